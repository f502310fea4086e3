//! Full file-based run: generate data, train, relabel and evaluate, writing
//! every artifact into one directory. Takes an optional TOML config.
//!
//!     cargo run --release --example pipeline -- [out_dir] [config.toml]

use std::path::PathBuf;

use pref_transformer::pipeline::{run_all, PipelineConfig};

fn main() -> pref_transformer::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let dir = PathBuf::from(args.first().map_or("runs/example", String::as_str));
    let cfg = match args.get(1) {
        Some(path) => PipelineConfig::load(path.as_ref())?,
        None => {
            let mut cfg = PipelineConfig::default();
            cfg.transformer.embed_dim = 16;
            cfg.transformer.num_heads = 2;
            cfg.train.steps = 800;
            cfg.train.warmup_steps = 40;
            cfg.train.eval_interval = 100;
            cfg.train.learning_rate = 1e-3;
            cfg
        }
    };
    let out = run_all(&cfg, &dir)?;
    for m in &out.history {
        println!("step {:>5}  loss {:.4}  val acc {:?}", m.step, m.loss, m.val_accuracy);
    }
    println!(
        "success with learned reward {:.2}, with true reward {:.2}, held-out accuracy {:?}",
        out.learned.success_rate, out.truth.success_rate, out.learned.test_accuracy
    );
    println!("artifacts in {}", out.dir.display());
    Ok(())
}
