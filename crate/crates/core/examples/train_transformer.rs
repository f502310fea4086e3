//! Train a preference transformer on scripted GridNav labels, save it, load
//! it back and report held-out accuracy.
//!
//!     cargo run --release --example train_transformer -- [steps] [seed]

use pref_transformer::checkpoint;
use pref_transformer::model::{ModelSpec, TransformerConfig};
use pref_transformer::pipeline::{generate, PipelineConfig};
use pref_transformer::preference::evaluate_accuracy;
use pref_transformer::train::{train, TrainConfig};

fn main() -> pref_transformer::Result<()> {
    let mut args = std::env::args().skip(1).map(|a| a.parse::<u64>().expect("integer argument"));
    let steps = args.next().unwrap_or(1000) as usize;
    let seed = args.next().unwrap_or(0);

    let cfg = PipelineConfig {
        env: "grid_nav".into(),
        ..Default::default()
    }
    .with_seed(seed);
    let data = generate(&cfg)?;
    println!(
        "{} trajectories, {} training and {} held-out preferences",
        data.trajectories.len(),
        data.preferences.len(),
        data.test_preferences.len()
    );

    let spec = ModelSpec::Pt(TransformerConfig {
        embed_dim: 16,
        num_heads: 2,
        segment_len: cfg.segment_len,
        ..Default::default()
    });
    let train_cfg = TrainConfig {
        steps,
        warmup_steps: steps / 20,
        eval_interval: (steps / 10).max(1),
        learning_rate: 1e-3,
        seed,
        ..Default::default()
    };
    let out = train(&data.preferences, spec, &train_cfg)?;
    for m in &out.history {
        let acc = m.val_accuracy.map_or("-".into(), |a| format!("{a:.3}"));
        println!("step {:>5}  loss {:.4}  val acc {acc}", m.step, m.loss);
    }

    let path = std::env::temp_dir().join("pt_grid_nav.ckpt");
    checkpoint::save(&out.model, &path)?;
    let model = checkpoint::load(&path)?;
    let eval = evaluate_accuracy(&model, &data.test_preferences)?;
    println!(
        "held-out accuracy {:.3} on {} decided pairs (loss {:.4}); checkpoint at {}",
        eval.accuracy.unwrap_or(f64::NAN),
        eval.decided,
        eval.loss,
        path.display()
    );
    Ok(())
}
