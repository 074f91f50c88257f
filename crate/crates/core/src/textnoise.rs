//! Caption perturbation families.
//!
//! Four generators, all pure functions of their inputs and a seed:
//!
//! 1. typos — per-word adjacent-character swaps plus a small lexicon of
//!    real-world misspellings, preserving word count and word-boundary
//!    characters;
//! 2. gradient-guided character edits (HotFlip style) against a white-box
//!    loss surface;
//! 3. universal trigger search: a short fixed token sequence optimized to
//!    push any caption toward a target label;
//! 4. back-translation via a pluggable paraphrase provider (a deterministic
//!    rule-based one ships in-crate; a remote pivot-translation client is
//!    optional plumbing).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Label;
use crate::rng::{derive_seed, seeded_rng};
use crate::toymodel::{CaptionGradient, ModelError, VOCAB};
use rand::Rng;

#[derive(Debug, Error)]
pub enum TextNoiseError {
    #[error("trigger search needs a non-empty dataset")]
    EmptyDataset,
    #[error("trigger search needs a non-empty vocabulary")]
    EmptyVocabulary,
    #[error("charset bytes must be ascii")]
    NonAsciiCharset,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("remote paraphrase request failed: {0}")]
    Remote(#[from] reqwest::Error),
    #[error("remote paraphrase endpoint returned malformed payload: {0}")]
    RemoteMalformed(String),
}

/// Caption noise family. Indices match the grid tables' footnote
/// numbering (1 = typos, 2 = character edits, 3 = triggers, 4 =
/// back-translation).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextNoiseFamily {
    None,
    Typos,
    HotFlip,
    Triggers,
    BackTranslation,
}

impl TextNoiseFamily {
    pub fn index(self) -> u8 {
        match self {
            TextNoiseFamily::None => 0,
            TextNoiseFamily::Typos => 1,
            TextNoiseFamily::HotFlip => 2,
            TextNoiseFamily::Triggers => 3,
            TextNoiseFamily::BackTranslation => 4,
        }
    }

    pub fn from_index(value: u8) -> Option<TextNoiseFamily> {
        match value {
            0 => Some(TextNoiseFamily::None),
            1 => Some(TextNoiseFamily::Typos),
            2 => Some(TextNoiseFamily::HotFlip),
            3 => Some(TextNoiseFamily::Triggers),
            4 => Some(TextNoiseFamily::BackTranslation),
            _ => None,
        }
    }

    /// All perturbed families, in table order.
    pub fn perturbed() -> [TextNoiseFamily; 4] {
        [
            TextNoiseFamily::Typos,
            TextNoiseFamily::HotFlip,
            TextNoiseFamily::Triggers,
            TextNoiseFamily::BackTranslation,
        ]
    }
}

/// Declarative description of one caption perturbation.
#[derive(Debug, Clone)]
pub struct TextNoiseSpec {
    pub family: TextNoiseFamily,
    /// Typo rate / edit-budget fraction, in [0, 1].
    pub severity: f64,
    pub seed: u64,
    /// Precomputed trigger tokens, required when `family` is `Triggers`.
    pub trigger: Option<Vec<String>>,
}

impl TextNoiseSpec {
    pub fn clean(seed: u64) -> TextNoiseSpec {
        TextNoiseSpec {
            family: TextNoiseFamily::None,
            severity: 0.0,
            seed,
            trigger: None,
        }
    }
}

/// A searched universal trigger and the loss it achieved on its search set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Trigger {
    pub tokens: Vec<String>,
    pub target_label: u8,
    pub search_loss: f64,
}

// ---------------------------------------------------------------------------
// Typos
// ---------------------------------------------------------------------------

/// Common real-world misspellings; every pair preserves the first and last
/// character so the word-boundary invariant holds for lexicon hits too.
const NATURAL_TYPOS: &[(&str, &str)] = &[
    ("because", "becuase"),
    ("definitely", "definately"),
    ("separate", "seperate"),
    ("government", "goverment"),
    ("tomorrow", "tommorow"),
    ("which", "wich"),
    ("people", "peaple"),
    ("probably", "probally"),
    ("interesting", "intresting"),
    ("different", "diffrent"),
    ("friend", "freind"),
    ("believe", "beleive"),
    ("receive", "recieve"),
    ("beginning", "begining"),
    ("nonetheless", "nonethless"),
];

/// Inject spelling errors. Each word of length >= 4 is selected with
/// probability `rate`; a selected word either gets two adjacent internal
/// characters swapped or, when the word is in the bundled misspelling
/// lexicon, may be replaced by its natural typo. Word count and the first
/// and last character of every word are preserved. Deterministic for a
/// fixed `(caption, rate, seed)`.
pub fn perturb_typos(caption: &str, rate: f64, seed: u64) -> String {
    if rate <= 0.0 || caption.is_empty() {
        return caption.to_string();
    }
    let mut rng = seeded_rng(derive_seed(seed, &[0x7e70]));
    let mut out = String::with_capacity(caption.len() + 8);
    // Walk whitespace/word segments so separators survive verbatim.
    let mut chars = caption.chars().peekable();
    while let Some(&c) = chars.peek() {
        if c.is_whitespace() {
            while let Some(&w) = chars.peek() {
                if !w.is_whitespace() {
                    break;
                }
                out.push(w);
                chars.next();
            }
        } else {
            let mut word = String::new();
            while let Some(&w) = chars.peek() {
                if w.is_whitespace() {
                    break;
                }
                word.push(w);
                chars.next();
            }
            out.push_str(&typo_word(&word, rate, &mut rng));
        }
    }
    out
}

fn typo_word(word: &str, rate: f64, rng: &mut impl Rng) -> String {
    let chars: Vec<char> = word.chars().collect();
    if chars.len() < 4 {
        return word.to_string();
    }
    if rng.random::<f64>() >= rate {
        return word.to_string();
    }
    if let Some((_, typo)) = NATURAL_TYPOS.iter().find(|(w, _)| *w == word) {
        if rng.random::<f64>() < 0.5 {
            return (*typo).to_string();
        }
    }
    // Swap two adjacent internal characters; positions 0 and len-1 stay put.
    let mut swapped = chars;
    let i = rng.random_range(1..=swapped.len() - 3);
    swapped.swap(i, i + 1);
    swapped.into_iter().collect()
}

// ---------------------------------------------------------------------------
// Gradient-guided character edits
// ---------------------------------------------------------------------------

/// White-box loss surface over captions: everything else (image, label)
/// is held fixed. `gradient` returns first-order scores with respect to
/// the caption's byte one-hots.
pub trait CaptionLossSurface {
    fn loss(&self, caption: &str) -> f64;
    fn gradient(&self, caption: &str) -> CaptionGradient;
}

/// Default edit charset: lowercase ASCII letters, digits, space.
pub fn default_charset() -> Vec<u8> {
    let mut set: Vec<u8> = (b'a'..=b'z').collect();
    set.extend(b'0'..=b'9');
    set.push(b' ');
    set
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EditOp {
    Substitute,
    Insert,
    Delete,
}

impl EditOp {
    fn rank(self) -> u8 {
        match self {
            EditOp::Substitute => 0,
            EditOp::Insert => 1,
            EditOp::Delete => 2,
        }
    }
}

pub const ALL_EDIT_OPS: [EditOp; 3] = [EditOp::Substitute, EditOp::Insert, EditOp::Delete];

/// Greedy gradient-guided character attack.
///
/// Each round scores every `(position, operation, replacement)` candidate
/// by the first-order loss change and applies the single best; ties break
/// on the lowest `(position, operation, charset index)`. Rounds stop early
/// when no candidate has a positive first-order estimate, so each applied
/// edit raises the estimated loss. Only ASCII bytes are edited; multi-byte
/// characters pass through untouched.
pub fn hotflip_attack(
    surface: &dyn CaptionLossSurface,
    caption: &str,
    budget: usize,
    charset: &[u8],
) -> Result<String, TextNoiseError> {
    hotflip_attack_ops(surface, caption, budget, charset, &ALL_EDIT_OPS)
}

/// [`hotflip_attack`] restricted to a subset of edit operations.
pub fn hotflip_attack_ops(
    surface: &dyn CaptionLossSurface,
    caption: &str,
    budget: usize,
    charset: &[u8],
    ops: &[EditOp],
) -> Result<String, TextNoiseError> {
    if charset.iter().any(|b| !b.is_ascii()) {
        return Err(TextNoiseError::NonAsciiCharset);
    }
    let mut current = caption.to_string();
    for _ in 0..budget {
        let grad = surface.gradient(&current);
        match best_edit(&current, &grad, charset, ops) {
            Some((score, edit)) if score > 0.0 => {
                current = apply_edit(&current, edit);
            }
            _ => break,
        }
    }
    Ok(current)
}

#[derive(Debug, Clone, Copy)]
struct Edit {
    op: EditOp,
    pos: usize,
    byte: u8,
}

fn best_edit(
    caption: &str,
    grad: &CaptionGradient,
    charset: &[u8],
    ops: &[EditOp],
) -> Option<(f64, Edit)> {
    let bytes = caption.as_bytes();
    let mut best: Option<(f64, (usize, u8, usize), Edit)> = None;
    let mut consider = |score: f64, key: (usize, u8, usize), edit: Edit| match &best {
        Some((s, k, _)) if score < *s || (score == *s && key >= *k) => {}
        _ => best = Some((score, key, edit)),
    };

    for &op in ops {
        match op {
            EditOp::Substitute => {
                for (p, &old) in bytes.iter().enumerate() {
                    if !old.is_ascii() {
                        continue;
                    }
                    let row = &grad.rows[p];
                    for (ci, &c) in charset.iter().enumerate() {
                        if c == old {
                            continue;
                        }
                        let score = row[c as usize] - row[old as usize];
                        consider(
                            score,
                            (p, op.rank(), ci),
                            Edit {
                                op,
                                pos: p,
                                byte: c,
                            },
                        );
                    }
                }
            }
            EditOp::Insert => {
                for p in 0..=bytes.len() {
                    if !caption.is_char_boundary(p) {
                        continue;
                    }
                    for (ci, &c) in charset.iter().enumerate() {
                        let score = grad.insert_row[c as usize];
                        consider(
                            score,
                            (p, op.rank(), ci),
                            Edit {
                                op,
                                pos: p,
                                byte: c,
                            },
                        );
                    }
                }
            }
            EditOp::Delete => {
                for (p, &old) in bytes.iter().enumerate() {
                    if !old.is_ascii() {
                        continue;
                    }
                    let score = -grad.rows[p][old as usize];
                    consider(
                        score,
                        (p, op.rank(), 0),
                        Edit {
                            op,
                            pos: p,
                            byte: 0,
                        },
                    );
                }
            }
        }
    }
    best.map(|(score, _, edit)| (score, edit))
}

fn apply_edit(caption: &str, edit: Edit) -> String {
    let mut bytes = caption.as_bytes().to_vec();
    match edit.op {
        EditOp::Substitute => bytes[edit.pos] = edit.byte,
        EditOp::Insert => bytes.insert(edit.pos, edit.byte),
        EditOp::Delete => {
            bytes.remove(edit.pos);
        }
    }
    String::from_utf8(bytes).expect("ascii edits preserve utf-8")
}

// ---------------------------------------------------------------------------
// Universal triggers
// ---------------------------------------------------------------------------

const TRIGGER_INIT_TOKEN: &str = "the";
/// Candidates re-evaluated with the true loss per slot, after first-order
/// ranking.
const TRIGGER_RERANK: usize = 8;

/// Where the trigger attaches. The grid uses `Prepend`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TriggerPlacement {
    Prepend,
    Append,
}

/// Attach trigger tokens to a caption (single-space joined). An empty
/// trigger is the identity; with `Prepend` the original caption is always
/// an exact suffix of the result.
pub fn apply_trigger_tokens(caption: &str, tokens: &[String]) -> String {
    apply_trigger_at(caption, tokens, TriggerPlacement::Prepend)
}

pub fn apply_trigger_at(caption: &str, tokens: &[String], placement: TriggerPlacement) -> String {
    if tokens.is_empty() {
        return caption.to_string();
    }
    let phrase = tokens.join(" ");
    if caption.is_empty() {
        return phrase;
    }
    match placement {
        TriggerPlacement::Prepend => format!("{phrase} {caption}"),
        TriggerPlacement::Append => format!("{caption} {phrase}"),
    }
}

pub fn apply_trigger(caption: &str, trigger: &Trigger) -> String {
    apply_trigger_tokens(caption, &trigger.tokens)
}

/// One (caption, loss surface) pair for trigger search. The surface must
/// measure cross-entropy toward the attack's target label.
pub struct TriggerSearchInput<'a> {
    pub caption: &'a str,
    pub surface: &'a dyn CaptionLossSurface,
}

/// Search a fixed token sequence that minimizes the batch loss toward
/// `target_label` when attached to every caption.
///
/// Starts from `length` copies of a neutral token and runs coordinate
/// descent over slots: candidates are ranked per slot by the first-order
/// score of swapping the slot's token bytes, the best few are re-scored
/// with the true batch loss, and a replacement is kept only when it
/// strictly improves. Stops when `iterations` are exhausted or a full pass
/// makes no improvement.
pub fn universal_trigger_search(
    inputs: &[TriggerSearchInput],
    vocab: &[String],
    length: usize,
    target_label: Label,
    iterations: usize,
) -> Result<Trigger, TextNoiseError> {
    if inputs.is_empty() {
        return Err(TextNoiseError::EmptyDataset);
    }
    let mean_loss = |tokens: &[String]| -> f64 {
        inputs
            .iter()
            .map(|inp| {
                inp.surface
                    .loss(&apply_trigger_tokens(inp.caption, tokens))
            })
            .sum::<f64>()
            / inputs.len() as f64
    };

    if length == 0 {
        return Ok(Trigger {
            tokens: Vec::new(),
            target_label: target_label.index() as u8,
            search_loss: mean_loss(&[]),
        });
    }
    if vocab.is_empty() {
        return Err(TextNoiseError::EmptyVocabulary);
    }

    let mut tokens = vec![TRIGGER_INIT_TOKEN.to_string(); length];
    let mut best_loss = mean_loss(&tokens);

    let token_score = |row: &[f64], token: &str| -> f64 {
        token.bytes().map(|b| row[b as usize]).sum()
    };

    for _ in 0..iterations {
        let mut improved = false;
        for slot in 0..length {
            // Batch-mean first-order row at the current trigger.
            let mut row = vec![0.0; VOCAB];
            for inp in inputs {
                let grad = inp
                    .surface
                    .gradient(&apply_trigger_tokens(inp.caption, &tokens));
                for (acc, g) in row.iter_mut().zip(grad.insert_row.iter()) {
                    *acc += g;
                }
            }

            let current_score = token_score(&row, &tokens[slot]);
            let mut ranked: Vec<(f64, usize)> = vocab
                .iter()
                .enumerate()
                .map(|(i, tok)| (token_score(&row, tok) - current_score, i))
                .collect();
            // Most negative estimated change first (we minimize the loss);
            // index breaks ties deterministically.
            ranked.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));

            let mut slot_best: Option<(f64, usize)> = None;
            for &(_, cand_idx) in ranked.iter().take(TRIGGER_RERANK) {
                if vocab[cand_idx] == tokens[slot] {
                    continue;
                }
                let mut attempt = tokens.clone();
                attempt[slot] = vocab[cand_idx].clone();
                let loss = mean_loss(&attempt);
                if slot_best.map_or(true, |(l, _)| loss < l) {
                    slot_best = Some((loss, cand_idx));
                }
            }
            if let Some((loss, cand_idx)) = slot_best {
                if loss < best_loss - 1e-15 {
                    tokens[slot] = vocab[cand_idx].clone();
                    best_loss = loss;
                    improved = true;
                }
            }
        }
        if !improved {
            break;
        }
    }

    Ok(Trigger {
        tokens,
        target_label: target_label.index() as u8,
        search_loss: best_loss,
    })
}

// ---------------------------------------------------------------------------
// Back-translation
// ---------------------------------------------------------------------------

/// Produces a paraphrase of the input text.
pub trait ParaphraseProvider {
    fn paraphrase(&self, text: &str) -> Result<String, TextNoiseError>;
}

/// Paraphrase a caption through the given provider. Empty captions pass
/// through unchanged without touching the provider.
pub fn backtranslate(
    caption: &str,
    provider: &dyn ParaphraseProvider,
) -> Result<String, TextNoiseError> {
    if caption.is_empty() {
        return Ok(String::new());
    }
    provider.paraphrase(caption)
}

/// Synonym table for the offline paraphraser. Multi-word keys are applied
/// first as phrase rewrites.
const SYNONYMS: &[(&str, &str)] = &[
    ("any individual", "everyone"),
    ("i am", "I'm"),
    ("nonetheless", "nevertheless"),
    ("nevertheless", "nonetheless"),
    ("unsure", "not certain"),
    ("freedom", "liberty"),
    ("fight", "stand up"),
    ("happy", "glad"),
    ("kind", "caring"),
    ("friend", "companion"),
    ("gentle", "mild"),
    ("warm", "cozy"),
    ("bright", "radiant"),
    ("nasty", "foul"),
    ("cruel", "heartless"),
    ("bitter", "sour"),
    ("harsh", "severe"),
    ("grim", "bleak"),
    ("people", "folks"),
    ("today", "these days"),
    ("very", "really"),
    ("about", "regarding"),
    ("online", "on the internet"),
    ("again", "once more"),
    ("meme", "image"),
    ("post", "message"),
];

fn fnv1a(text: &str) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for b in text.bytes() {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Deterministic offline paraphraser: a fixed synonym table applied at a
/// capped rate plus clause reordering, all driven by `(seed, text)`. Runs
/// with no network so the full suite stays offline.
#[derive(Debug, Clone)]
pub struct RuleParaphraser {
    pub seed: u64,
}

impl RuleParaphraser {
    pub fn new(seed: u64) -> RuleParaphraser {
        RuleParaphraser { seed }
    }
}

impl ParaphraseProvider for RuleParaphraser {
    fn paraphrase(&self, text: &str) -> Result<String, TextNoiseError> {
        let mut rng = seeded_rng(derive_seed(self.seed, &[0xbac4, fnv1a(text)]));
        let mut current = text.to_string();

        // Phrase-level rewrites first.
        for (from, to) in SYNONYMS.iter().filter(|(f, _)| f.contains(' ')) {
            if current.contains(from) && rng.random::<f64>() < 0.8 {
                current = current.replace(from, to);
            }
        }

        // Word-level synonyms, capped so most content words survive and
        // the paraphrase stays recognizably the same sentence.
        let words: Vec<&str> = current.split(' ').collect();
        let budget = (words.len() / 4).max(1);
        let mut replaced = 0usize;
        let mut out_words: Vec<String> = Vec::with_capacity(words.len());
        for word in words {
            let mut emitted = None;
            if replaced < budget {
                if let Some((_, to)) = SYNONYMS
                    .iter()
                    .filter(|(f, _)| !f.contains(' '))
                    .find(|(f, _)| *f == word)
                {
                    if rng.random::<f64>() < 0.6 {
                        emitted = Some((*to).to_string());
                        replaced += 1;
                    }
                }
            }
            out_words.push(emitted.unwrap_or_else(|| word.to_string()));
        }
        let mut result = out_words.join(" ");

        // Clause reorder: rotate a two-clause sentence around ", " or " but ".
        if let Some(idx) = result.find(", ") {
            if rng.random::<f64>() < 0.5 {
                let (head, tail) = result.split_at(idx);
                let tail = &tail[2..];
                if !tail.is_empty() && !head.is_empty() {
                    result = format!("{tail}, {head}");
                }
            }
        }
        Ok(result)
    }
}

/// Remote pivot-translation provider: `POST {text, pivot_language}` to the
/// configured endpoint, expecting `{text}` back. Failures surface as typed
/// errors, never as a silent passthrough.
#[derive(Debug, Clone)]
pub struct RemoteParaphraser {
    pub endpoint: String,
    pub pivot_language: String,
    pub timeout: std::time::Duration,
    /// Bearer token, typically sourced from an environment variable.
    pub api_key: Option<String>,
}

#[derive(Serialize)]
struct ParaphraseRequest<'a> {
    text: &'a str,
    pivot_language: &'a str,
}

#[derive(Deserialize)]
struct ParaphraseResponse {
    text: String,
}

impl ParaphraseProvider for RemoteParaphraser {
    fn paraphrase(&self, text: &str) -> Result<String, TextNoiseError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(self.timeout)
            .build()?;
        let mut request = client.post(&self.endpoint).json(&ParaphraseRequest {
            text,
            pivot_language: &self.pivot_language,
        });
        if let Some(key) = &self.api_key {
            request = request.bearer_auth(key);
        }
        let response = request.send()?.error_for_status()?;
        let payload: ParaphraseResponse = response
            .json()
            .map_err(|e| TextNoiseError::RemoteMalformed(e.to_string()))?;
        Ok(payload.text)
    }
}
