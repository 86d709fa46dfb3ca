//! Base versus joint training on the synthetic post-editing task.
//!
//! `cargo run --release --example toy_experiment [max_steps]`

use postedit::decoding::DecodeConfig;
use postedit::model::ModelConfig;
use postedit::toy::{run_experiment, ExperimentConfig, ToyConfig};
use postedit::training::TrainConfig;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let max_steps = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(400);
    for lambda in [1.0, 0.5] {
        let train = TrainConfig {
            model: ModelConfig {
                n_layers: 1,
                d_model: 32,
                d_ffn: 64,
                n_heads: 4,
                dropout: 0.1,
                max_positions: 64,
                vocab_size: 0,
            },
            lambda,
            warmup_steps: 100,
            batch_pe_tokens: 200,
            save_interval: 10,
            epochs: 1000,
            max_steps,
            seed: 7,
            ..TrainConfig::default()
        };
        let cfg = ExperimentConfig {
            task: ToyConfig::default(),
            task_seed: 11,
            train_size: 2000,
            dev_size: 100,
            test_size: 200,
            train,
            decode: DecodeConfig { beam: 4, extra_len: 5 },
        };
        let dir = tempfile::tempdir()?;
        let out = run_experiment(&cfg, dir.path())?;
        println!(
            "lambda={lambda}: MT as PE {:.2}, ensemble {:.2}, dev spread {:.2} over {:?} ({} steps, {:.0}s)",
            out.baseline_bleu,
            out.ensemble_bleu,
            out.spread(),
            out.averaged_dev_bleu.iter().map(|b| (b * 100.0).round() / 100.0).collect::<Vec<_>>(),
            out.steps,
            out.seconds
        );
    }
    Ok(())
}
