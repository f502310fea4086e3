//! Sample segment pairs and label them with deterministic and Boltzmann
//! scripted teachers.
//!
//!     cargo run --release --example scripted_teacher

use pref_transformer::env::{generate_dataset, Env};
use pref_transformer::teacher::{agreement_rate, sample_queries, ScriptedTeacher};

fn main() -> pref_transformer::Result<()> {
    let env = Env::key_door();
    let trajs = generate_dataset(&env, 300, 0);
    let refs = sample_queries(&trajs, 2000, 25, 1)?;

    let exact = ScriptedTeacher::deterministic().label_queries(&trajs, &refs, 2)?;
    let labels = |recs: &[pref_transformer::preference::PreferenceRecord]| -> Vec<f64> {
        recs.iter().map(|r| r.label).collect()
    };
    let exact_labels = labels(&exact);
    let ties = exact_labels.iter().filter(|&&y| y == 0.5).count();
    println!("deterministic: {} pairs, {ties} ties", exact.len());

    let (r0, r1) = refs[0].returns(&trajs);
    println!("first pair returns {r0} vs {r1}, label {}", exact[0].label);
    for beta in [0.1, 1.0, 10.0] {
        let teacher = ScriptedTeacher::boltzmann(beta)?;
        let noisy = labels(&teacher.label_queries(&trajs, &refs, 3)?);
        println!(
            "beta {beta:>4}: P(second | returns 0, 1) = {:.3}, agreement with deterministic {:.3}",
            teacher.preference_probability(0.0, 1.0),
            agreement_rate(&exact_labels, &noisy)?
        );
    }
    Ok(())
}
