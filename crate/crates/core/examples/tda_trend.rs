use memebench::harness::{run_grid, NoiseDefaults};
use memebench::synth::{make_benchmark_dataset, BenchmarkOptions};
use memebench::toymodel::{train_classifier, TrainConfig};
use memebench::dataset::Split;

fn main() {
    let defaults = NoiseDefaults::default();
    let options = BenchmarkOptions::default();
    for dropout in [0.1f64, 0.3] {
        let mut sum_b = 0.0;
        let mut sum_t = 0.0;
        for seed in [11u64, 12, 13, 14, 15, 16, 17, 18] {
            let data = make_benchmark_dataset(&options, seed);
            let train = data.subset(Split::Train);
            let cfg = TrainConfig { dropout_p: dropout, ..TrainConfig::default() };
            let base = train_classifier(&train, &cfg, false, seed).unwrap();
            let tda = train_classifier(&train, &cfg, true, seed).unwrap();
            let s = tda.tda.as_ref().unwrap().s;
            let g_b = run_grid(&base, &data, seed, &defaults).unwrap();
            let g_t = run_grid(&tda, &data, seed, &defaults).unwrap();
            println!(
                "drop={dropout} seed {seed}: base {:.4} (clean {:.3}) | tda {:.4} (clean {:.3}) | s={:+.3}",
                g_b.average_dropping_rate.accuracy, g_b.clean.accuracy,
                g_t.average_dropping_rate.accuracy, g_t.clean.accuracy, s
            );
            sum_b += g_b.average_dropping_rate.accuracy;
            sum_t += g_t.average_dropping_rate.accuracy;
        }
        println!("drop={dropout} MEAN base {:.4} tda {:.4}", sum_b / 8.0, sum_t / 8.0);
    }
}
