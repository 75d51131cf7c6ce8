//! Exact acceptance-bound quantities on a few random tiny instances.
//!
//! cargo run --release --example oracle_audit

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use speclab::lm::{random_tabular_lm, Vocab};
use speclab::oracle::{check_bounds, oracle_report};

fn main() -> speclab::Result<()> {
    let vocab = Vocab::with_size(3)?;
    let t_max = 3;
    println!("seed  alpha   eps     bound    A_t                      E_t");
    for seed in 0..6u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let target = random_tabular_lm(vocab, 1, 1.0, 0.0, &mut rng)?;
        let draft = random_tabular_lm(vocab, 1, 1.0, 0.0, &mut rng)?;
        let report = oracle_report(&target, &draft, &[1], t_max)?;
        let slack = check_bounds(&report, t_max)?;
        println!(
            "{seed:>4}  {:.4}  {:.4}  {:+.4}  {:.4?}  {:.4?}  (slack {:.4}, identity residual {:.1e})",
            report.alpha_exact,
            report.epsilon,
            report.bound_value,
            report.a,
            report.e,
            slack.theorem_slack,
            slack.max_lemma_residual()
        );
    }
    Ok(())
}
