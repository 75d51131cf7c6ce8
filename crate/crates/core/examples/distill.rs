//! Distils the benchmark draft with every preset and compares alignment.
//!
//! cargo run --release --example distill [config.json]

use std::path::PathBuf;

use speclab::cli::{build_task, distill_preset, ExperimentConfig};
use speclab::distill::{mean_exact_alpha, on_policy_tvd, sampled_tau};
use speclab::lm::AnyModel;
use speclab::specdec::SpecConfig;

fn main() -> speclab::Result<()> {
    let path = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(concat!(env!("CARGO_MANIFEST_DIR"), "/configs/benchmark.json")));
    let config = ExperimentConfig::load(&path)?;
    let task = build_task(&config)?;
    let t_max = config.task.t_max;
    let eval = &task.prompts.eval;

    let summarize = |name: &str, draft: &AnyModel| -> speclab::Result<()> {
        let alpha = mean_exact_alpha(&task.teacher, draft, eval, t_max)?;
        let tvd = on_policy_tvd(&task.teacher, draft, eval, t_max, 500, 1)?;
        let taus = [3, 5, 7]
            .iter()
            .map(|&g| sampled_tau(&task.teacher, draft, eval, &SpecConfig::lossless(g, t_max)?, 200, 2))
            .collect::<speclab::Result<Vec<_>>>()?;
        println!(
            "{name:>13}  alpha {alpha:.4}  on-policy tvd {tvd:.4}  tau(3,5,7) {:.3} {:.3} {:.3}",
            taus[0], taus[1], taus[2]
        );
        Ok(())
    };

    summarize("raw", &task.draft_init)?;
    for name in &config.distill.presets {
        let (draft, _) = distill_preset(&config, &task, name)?;
        summarize(name, &draft)?;
    }
    Ok(())
}
