//! Relabel an offline KeyDoor dataset with learned rewards, normalize them
//! and plan on them with fitted Q-iteration. Compares against planning on
//! the true reward.
//!
//!     cargo run --release --example relabel_and_plan -- [steps] [seed]

use pref_transformer::inference::RelabeledDataset;
use pref_transformer::model::{MlpConfig, ModelSpec, TransformerConfig};
use pref_transformer::pipeline::{generate, PipelineConfig};
use pref_transformer::tabular::{tabular_eval, true_rewards, TabularPolicy, evaluate_policy};
use pref_transformer::train::{train, TrainConfig};

fn main() -> pref_transformer::Result<()> {
    let mut args = std::env::args().skip(1).map(|a| a.parse::<u64>().expect("integer argument"));
    let steps = args.next().unwrap_or(800) as usize;
    let seed = args.next().unwrap_or(0);

    let cfg = PipelineConfig::default().with_seed(seed);
    let data = generate(&cfg)?;
    let plan = cfg.tabular.clone();

    let random = evaluate_policy(&data.env, &TabularPolicy::random(&data.env), plan.episodes, seed);
    let (_, truth) = tabular_eval(&data.env, &data.trajectories, &true_rewards(&data.trajectories), &plan)?;
    println!("random policy success {:.2}", random.success_rate);
    println!("true reward   success {:.2}", truth.success_rate);

    let schedule = TrainConfig {
        steps,
        warmup_steps: steps / 20,
        eval_interval: steps,
        learning_rate: 1e-3,
        seed,
        ..Default::default()
    };
    let specs = [
        (
            "transformer",
            ModelSpec::Pt(TransformerConfig {
                embed_dim: 16,
                num_heads: 2,
                segment_len: cfg.segment_len,
                ..Default::default()
            }),
        ),
        ("mlp", ModelSpec::Mr(MlpConfig::default())),
    ];
    for (name, spec) in specs {
        let model = train(&data.preferences, spec, &schedule)?.model;
        let ds = RelabeledDataset::build(&data.env, &model, &data.trajectories, cfg.segment_len)?;
        let n = ds.meta.normalization;
        let (_, report) = tabular_eval(&data.env, &data.trajectories, &ds.rewards(), &plan)?;
        println!(
            "{name:<13} success {:.2}  (learned returns {:.3}..{:.3} mapped to {}..0)",
            report.success_rate,
            n.min_return,
            n.max_return,
            -(n.max_timestep as f64)
        );
    }
    Ok(())
}
