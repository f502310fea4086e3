//! Held-out preference accuracy of the transformer, the Markovian MLP and
//! the LSTM on one environment, all trained with the same schedule.
//!
//!     cargo run --release --example compare_models -- [grid_nav|key_door] [steps]

use std::time::Instant;

use pref_transformer::model::{LstmConfig, MlpConfig, ModelSpec, TransformerConfig};
use pref_transformer::pipeline::{generate, PipelineConfig};
use pref_transformer::preference::evaluate_accuracy;
use pref_transformer::train::{train, TrainConfig};

fn main() -> pref_transformer::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let env = args.first().cloned().unwrap_or_else(|| "key_door".into());
    let steps: usize = args.get(1).map_or(1500, |s| s.parse().expect("steps"));

    let cfg = PipelineConfig {
        env,
        ..Default::default()
    };
    let data = generate(&cfg)?;
    let schedule = TrainConfig {
        steps,
        warmup_steps: steps / 20,
        eval_interval: steps,
        learning_rate: 1e-3,
        ..Default::default()
    };
    let models = [
        (
            "transformer",
            ModelSpec::Pt(TransformerConfig {
                segment_len: cfg.segment_len,
                ..Default::default()
            }),
        ),
        ("mlp", ModelSpec::Mr(MlpConfig::default())),
        ("lstm", ModelSpec::Nmr(LstmConfig::default())),
    ];
    println!("{}: {} training pairs, {} held-out", cfg.env, data.preferences.len(), data.test_preferences.len());
    for (name, spec) in models {
        let started = Instant::now();
        let out = train(&data.preferences, spec, &schedule)?;
        let eval = evaluate_accuracy(&out.model, &data.test_preferences)?;
        println!(
            "{name:<12} accuracy {:.3}  loss {:.4}  {:.0}s",
            eval.accuracy.unwrap_or(f64::NAN),
            eval.loss,
            started.elapsed().as_secs_f64()
        );
    }
    Ok(())
}
