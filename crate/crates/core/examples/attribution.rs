//! Inspect where a trained transformer puts its importance weight along a
//! KeyDoor episode that picks up the key, and write the CSV export.
//!
//!     cargo run --release --example attribution -- [steps]

use pref_transformer::env::generate_dataset;
use pref_transformer::inference::{export_attribution, weight_rank};
use pref_transformer::model::{ModelSpec, TransformerConfig};
use pref_transformer::pipeline::{generate, PipelineConfig};
use pref_transformer::train::{train, TrainConfig};

fn main() -> pref_transformer::Result<()> {
    let steps: usize = std::env::args().nth(1).map_or(1500, |s| s.parse().expect("steps"));
    let cfg = PipelineConfig::default();
    let data = generate(&cfg)?;
    let spec = ModelSpec::Pt(TransformerConfig {
        segment_len: cfg.segment_len,
        ..Default::default()
    });
    let schedule = TrainConfig {
        steps,
        warmup_steps: steps / 20,
        eval_interval: steps,
        learning_rate: 1e-3,
        ..Default::default()
    };
    let model = train(&data.preferences, spec, &schedule)?.model;

    let env = &data.env;
    let episodes = generate_dataset(env, 100, 99);
    let traj = episodes
        .iter()
        .find(|t| env.key_pickup(t).is_some() && t.true_return() > 0.0)
        .expect("an episode that collects the key and reaches the goal");
    let pickup = env.key_pickup(traj).unwrap();
    let seg = traj.segment(0, cfg.segment_len)?;
    let a = model.score(&seg)?.attribution.expect("transformer attribution");

    println!(" t  true  reward  weight");
    for t in 0..seg.len() {
        let mark = if t == pickup { "  <- key" } else { "" };
        println!(
            "{t:>2}  {:>4}  {:>6.3}  {:>6.3}{mark}",
            traj.truth.rewards[t], a.rewards[t], a.weights[t]
        );
    }
    println!("key pickup weight rank {} of {}", weight_rank(&a.weights, pickup), seg.len());
    println!("segment score {:.4} = sum of weighted rewards {:.4}", a.mean_output(), a.weighted_sum());

    let path = std::env::temp_dir().join("attribution.csv");
    export_attribution(&model, &seg, &path)?;
    println!("wrote {}", path.display());
    Ok(())
}
