use super::*;
use crate::synth;
use crate::toymodel::{train_classifier, TrainConfig};
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;

fn small_world(seed: u64) -> (Dataset, ToyModel, NoiseDefaults) {
    let data = synth::make_synthetic_dataset_with_splits(48, 0, 24, seed, 32);
    let config = TrainConfig {
        epochs: 15,
        ..TrainConfig::default()
    };
    let model = train_classifier(&data.subset(Split::Train), &config, false, seed).unwrap();
    // Light attack budgets keep the unit tests quick.
    let defaults = NoiseDefaults {
        trigger_iterations: 2,
        trigger_vocab: 10,
        trigger_search_cap: 24,
        uap_epochs: 2,
        ..NoiseDefaults::default()
    };
    (data, model, defaults)
}

#[test]
fn clean_row_has_no_robustness_and_accuracy_matches_prediction_agreement() {
    let (data, model, defaults) = small_world(1);
    let test = data.subset(Split::Test);
    let row = evaluate_opts(
        &model,
        &test,
        &NoiseSpec::clean(7),
        ChannelMode::Multimodal,
        &defaults,
        None,
    )
    .unwrap();
    assert!(row.abs_robust.is_none());
    assert!(row.rel_robust.is_none());
    let agree = test
        .samples
        .iter()
        .filter(|s| crate::toymodel::predict(&model, s).unwrap().0 == s.label)
        .count();
    assert!((row.accuracy - agree as f64 / test.len() as f64).abs() < 1e-12);
}

#[test]
fn evaluation_is_deterministic_under_one_run_seed() {
    let (data, model, defaults) = small_world(2);
    let test = data.subset(Split::Test);
    let spec = defaults.cell_spec(
        11,
        TextNoiseFamily::Typos,
        ImageNoiseFamily::Augmix,
        None,
        None,
    );
    let a = evaluate_opts(&model, &test, &spec, ChannelMode::Multimodal, &defaults, None).unwrap();
    let b = evaluate_opts(&model, &test, &spec, ChannelMode::Multimodal, &defaults, None).unwrap();
    assert_eq!(a, b);
}

#[test]
fn text_only_mode_is_immune_to_image_noise() {
    let (data, model, defaults) = small_world(3);
    let test = data.subset(Split::Test);
    let clean_spec = NoiseSpec::clean(5);
    let noisy_spec = defaults.cell_spec(
        5,
        TextNoiseFamily::None,
        ImageNoiseFamily::Corruption,
        None,
        None,
    );
    let clean = evaluate_opts(
        &model,
        &test,
        &clean_spec,
        ChannelMode::TextOnly,
        &defaults,
        None,
    )
    .unwrap();
    let noisy = evaluate_opts(
        &model,
        &test,
        &noisy_spec,
        ChannelMode::TextOnly,
        &defaults,
        Some(&clean),
    )
    .unwrap();
    assert_eq!(clean.accuracy, noisy.accuracy);
    assert_eq!(clean.auroc, noisy.auroc);
    assert_eq!(clean.f1, noisy.f1);
    assert_eq!(noisy.rel_robust, Some(1.0));
}

#[test]
fn missing_artifacts_are_typed_errors() {
    let (data, model, defaults) = small_world(4);
    let test = data.subset(Split::Test);
    let uap_spec = defaults.cell_spec(3, TextNoiseFamily::None, ImageNoiseFamily::Uap, None, None);
    assert!(matches!(
        evaluate_opts(&model, &test, &uap_spec, ChannelMode::Multimodal, &defaults, None),
        Err(HarnessError::MissingUapDelta)
    ));
    let trig_spec =
        defaults.cell_spec(3, TextNoiseFamily::Triggers, ImageNoiseFamily::None, None, None);
    assert!(matches!(
        evaluate_opts(&model, &test, &trig_spec, ChannelMode::Multimodal, &defaults, None),
        Err(HarnessError::MissingTrigger)
    ));
}

#[test]
fn grid_report_recomputes_deltas_and_footer_exactly() {
    let (data, model, defaults) = small_world(5);
    let report = run_grid(&model, &data, 17, &defaults).unwrap();
    assert_eq!(report.cells.len(), 12);
    assert_eq!(report.deltas.len(), 12);
    for ((key, row), (dkey, delta)) in report.cells.iter().zip(report.deltas.iter()) {
        assert_eq!(key, dkey);
        assert_eq!(delta.accuracy, report.clean.accuracy - row.accuracy);
        assert_eq!(delta.auroc, report.clean.auroc - row.auroc);
        assert_eq!(delta.f1, report.clean.f1 - row.f1);
    }
    let mean: f64 = report.deltas.iter().map(|(_, d)| d.accuracy).sum::<f64>() / 12.0;
    assert!((report.average_drop.accuracy - mean).abs() < 1e-15);
    assert!(
        (report.average_dropping_rate.accuracy * report.clean.accuracy
            - report.average_drop.accuracy)
            .abs()
            < 1e-12
    );
}

#[test]
fn all_cells_equal_to_clean_yields_zero_drops() {
    let clean = (0.75, 0.8, 0.7);
    let cells: Vec<(u8, u8, (f64, f64, f64))> = (1..=4u8)
        .flat_map(|t| (1..=3u8).map(move |i| (t, i, clean)))
        .collect();
    let report = GridReport::from_table(clean, &cells);
    assert_eq!(report.average_drop.accuracy, 0.0);
    assert_eq!(report.average_dropping_rate.f1, 0.0);
    for (_, d) in &report.deltas {
        assert_eq!(d.accuracy, 0.0);
    }
}

#[test]
fn grid_csv_round_trips_to_identical_report() {
    // Table-precision values: 3-decimal metrics survive the CSV verbatim.
    let clean = (0.744, 0.834, 0.727);
    let round3 = |v: f64| (v * 1000.0).round() / 1000.0;
    let cells: Vec<(u8, u8, (f64, f64, f64))> = (1..=4u8)
        .flat_map(|t| {
            (1..=3u8).map(move |i| {
                let bump = (t as f64 * 0.01) + (i as f64 * 0.002);
                (
                    t,
                    i,
                    (
                        round3(0.744 - bump),
                        round3(0.834 - bump / 2.0),
                        round3(0.727 - bump),
                    ),
                )
            })
        })
        .collect();
    let report = GridReport::from_table(clean, &cells);
    let csv = render_grid(&report, ReportFormat::Csv);
    let parsed = parse_grid_csv(&csv).unwrap();
    assert_eq!(parsed, report);
    // And the re-render is byte-identical.
    assert_eq!(render_grid(&parsed, ReportFormat::Csv), csv);
}

#[test]
fn grid_markdown_has_footer_and_footnotes() {
    let clean = (0.7, 0.8, 0.6);
    let cells: Vec<(u8, u8, (f64, f64, f64))> = (1..=4u8)
        .flat_map(|t| (1..=3u8).map(move |i| (t, i, (0.65, 0.75, 0.55))))
        .collect();
    let report = GridReport::from_table(clean, &cells);
    let md = render_grid(&report, ReportFormat::Markdown);
    assert!(md.contains("**Average drop**"));
    assert!(md.contains("**Average dropping rate**"));
    assert!(md.contains("\u{2020}"));
    assert!(md.lines().filter(|l| l.starts_with('|')).count() >= 15);
}

#[test]
fn empty_cells_report_renders_header_and_clean_row_only() {
    let report = GridReport::from_table((0.7, 0.8, 0.6), &[]);
    let csv = render_grid(&report, ReportFormat::Csv);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], GRID_CSV_HEADER);
    assert!(lines[1].starts_with("0,0,"));
    assert_eq!(lines[2].split(',').next(), Some("average_drop"));
}

#[test]
fn suite_tables_key_rows_by_their_own_channel() {
    let (data, model, defaults) = small_world(6);
    let suite = run_single_channel_suite(&model, &data, 23, &defaults).unwrap();
    assert_eq!(suite.text_rows.len(), 5);
    assert_eq!(suite.image_rows.len(), 4);
    assert_eq!(suite.text_rows[0].condition, "clean");
    assert_eq!(suite.image_rows[0].condition, "clean");

    let csv = render_suite(&suite, ReportFormat::Csv);
    let parts: Vec<&str> = csv.split("\n\n").collect();
    assert!(parts[0].starts_with("text_noise,"));
    assert!(parts[1].starts_with("image_noise,"));
    assert!(!parts[1].contains("text_noise"), "image table must not carry a text column");

    // Robustness recomputes from the table's own clean baseline.
    for row in &suite.text_rows[1..] {
        let expected = 1.0 - (suite.text_rows[0].accuracy - row.accuracy) / suite.text_rows[0].accuracy;
        assert!((row.rel_robust.unwrap() - expected).abs() < 1e-12);
    }
}

#[test]
fn suite_is_deterministic_across_repeats() {
    let (data, model, defaults) = small_world(7);
    let a = run_single_channel_suite(&model, &data, 3, &defaults).unwrap();
    let b = run_single_channel_suite(&model, &data, 3, &defaults).unwrap();
    assert_eq!(a, b);
}

#[test]
fn gen_aug_writes_n_loadable_samples_with_provenance() {
    let dir = tempfile::TempDir::new().unwrap();
    let (data, _, defaults) = small_world(8);
    let manifest = gen_aug_dataset(&data, 10, 31, dir.path(), &defaults).unwrap();
    let loaded = crate::dataset::load_manifest(&manifest).unwrap();
    assert_eq!(loaded.len(), 10);
    assert_eq!(loaded.split, Some(Split::Aug));
    let train = data.subset(Split::Train);
    let source_ids: std::collections::BTreeSet<&str> =
        train.samples.iter().map(|s| s.id.as_str()).collect();
    for sample in &loaded.samples {
        let src = sample.aux.get("source_id").expect("provenance recorded");
        assert!(source_ids.contains(src.as_str()), "unknown source {src}");
    }
}

#[test]
fn gen_aug_zero_is_empty_and_empty_source_errors() {
    let dir = tempfile::TempDir::new().unwrap();
    let (data, _, defaults) = small_world(9);
    let manifest = gen_aug_dataset(&data, 0, 1, dir.path(), &defaults).unwrap();
    assert_eq!(std::fs::read_to_string(&manifest).unwrap(), "");

    let empty = Dataset::new(Vec::new(), "x".into()).unwrap();
    assert!(matches!(
        gen_aug_dataset(&empty, 3, 1, dir.path(), &defaults),
        Err(HarnessError::EmptyAugSource { n: 3 })
    ));
}

/// Minimal single-threaded HTTP stub: answers `hits` requests with the
/// given status and JSON body, then stops.
fn spawn_stub(
    status: u16,
    body: &'static str,
    hits: usize,
) -> (String, std::thread::JoinHandle<Vec<String>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let handle = std::thread::spawn(move || {
        let mut seen = Vec::new();
        for _ in 0..hits {
            let (mut stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut content_length = 0usize;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let line = line.trim_end();
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    content_length = v.trim().parse().unwrap();
                }
                if line.is_empty() {
                    break;
                }
            }
            let mut payload = vec![0u8; content_length];
            reader.read_exact(&mut payload).unwrap();
            seen.push(String::from_utf8_lossy(&payload).to_string());
            let reason = if status == 200 { "OK" } else { "ERR" };
            let response = format!(
                "HTTP/1.1 {status} {reason}\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                body.len()
            );
            stream.write_all(response.as_bytes()).unwrap();
        }
        seen
    });
    (format!("http://{addr}/classify"), handle)
}

fn stub_endpoint(url: String, retries: u32) -> RemoteEndpoint {
    RemoteEndpoint {
        url,
        timeout_ms: 2000,
        retries,
        backoff_ms: 1,
        api_key: None,
    }
}

#[test]
fn remote_predict_parses_stub_verbatim() {
    let (url, handle) = spawn_stub(200, r#"{"label":1,"probs":[0.1,0.9]}"#, 1);
    let sample = synth::make_synthetic_dataset(1, 10, 8).samples[0].clone();
    let (label, probs) = remote_predict(&stub_endpoint(url, 0), &sample).unwrap();
    assert_eq!(label, Label::Hateful);
    assert_eq!(probs, [0.1, 0.9]);
    let seen = handle.join().unwrap();
    assert!(seen[0].contains("\"caption\""));
    assert!(seen[0].contains("\"image\""));
}

#[test]
fn remote_predict_retries_then_errors_on_500() {
    let (url, handle) = spawn_stub(500, r#"{"err":"boom"}"#, 3);
    let sample = synth::make_synthetic_dataset(1, 11, 8).samples[0].clone();
    let err = remote_predict(&stub_endpoint(url, 2), &sample).unwrap_err();
    assert!(err.is_remote(), "got {err:?}");
    assert_eq!(handle.join().unwrap().len(), 3, "2 retries = 3 attempts");
}

#[test]
fn remote_predict_rejects_malformed_payload() {
    let (url, _handle) = spawn_stub(200, r#"{"label":7,"probs":[0.5,0.5]}"#, 1);
    let sample = synth::make_synthetic_dataset(1, 12, 8).samples[0].clone();
    assert!(matches!(
        remote_predict(&stub_endpoint(url, 0), &sample),
        Err(HarnessError::MalformedResponse(_))
    ));
}

/// Stub-backed end-to-end check: metrics computed over remote predictions
/// match the locally computed expectation for the same decision rule.
#[test]
fn remote_metrics_match_local_rule_on_fixture() {
    let ds = synth::make_synthetic_dataset(10, 13, 8);
    // The stub classifies by a fixed rule: hateful iff the payload caption
    // contains a hostile marker word. Mirror the rule locally.
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let handle = std::thread::spawn(move || {
        for _ in 0..10 {
            let (mut stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut content_length = 0usize;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let line = line.trim_end();
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    content_length = v.trim().parse().unwrap();
                }
                if line.is_empty() {
                    break;
                }
            }
            let mut payload = vec![0u8; content_length];
            reader.read_exact(&mut payload).unwrap();
            let text = String::from_utf8_lossy(&payload).to_string();
            let hateful = ["vile", "nasty", "cruel", "sneer", "mock", "spite", "bitter",
                "harsh", "grim", "scorn", "sour", "bleak", "taunt", "loathe", "menace"]
                .iter()
                .any(|w| text.contains(w));
            let body = if hateful {
                r#"{"label":1,"probs":[0.2,0.8]}"#
            } else {
                r#"{"label":0,"probs":[0.8,0.2]}"#
            };
            let response = format!(
                "HTTP/1.1 200 OK\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                body.len()
            );
            stream.write_all(response.as_bytes()).unwrap();
        }
    });
    let endpoint = stub_endpoint(format!("http://{addr}/classify"), 0);

    let mut remote_preds = Vec::new();
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for sample in &ds.samples {
        let (label, probs) = remote_predict(&endpoint, sample).unwrap();
        remote_preds.push(label);
        scores.push(probs[1]);
        labels.push(sample.label);
    }
    handle.join().unwrap();

    // The marker rule is exactly the fixture's labeling rule, so remote
    // metrics must be perfect — and equal the locally computed ones.
    let counts = confusion(&remote_preds, &labels).unwrap();
    let m = basic_metrics(&counts).unwrap();
    assert_eq!(m.accuracy, 1.0);
    assert_eq!(auroc(&scores, &labels).unwrap(), 1.0);
}

#[test]
fn cell_seed_is_order_free() {
    let a = cell_seed(9, 1, 2);
    let b = cell_seed(9, 2, 1);
    assert_ne!(a, b);
    assert_eq!(a, cell_seed(9, 1, 2));
}

#[test]
fn vocabulary_mining_is_frequency_ranked_and_deterministic() {
    let ds = synth::make_synthetic_dataset(30, 14, 8);
    let a = mine_vocabulary(&ds, 10);
    let b = mine_vocabulary(&ds, 10);
    assert_eq!(a, b);
    assert_eq!(a.len(), 10);
}
