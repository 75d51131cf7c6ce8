//! Acceptance rate and block efficiency: sampled, exact and closed form.
//!
//! cargo run --release --example metrics

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use speclab::lm::{blend_lm, random_tabular_lm, Vocab};
use speclab::metrics::{alpha_from_tvd, theoretical_tau, AlphaMethod, MetricsReport};
use speclab::oracle::exact_alpha;
use speclab::specdec::{spec_decode, SpecConfig};

fn main() -> speclab::Result<()> {
    let vocab = Vocab::with_size(5)?;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let target = random_tabular_lm(vocab, 1, 1.0, -2.0, &mut rng)?;
    let noise = random_tabular_lm(vocab, 1, 1.0, -2.0, &mut rng)?;
    let prompt = [1];
    let t_max = 5;
    // accepted/output only tracks alpha when blocks rarely stop early
    let gamma = 8;
    let c = 0.1;

    println!("lambda  exact    tvd-route  mc-route  empirical  tau(emp)  tau(closed)  speedup");
    for lambda in [0.0, 0.5, 0.8, 0.95] {
        let draft = blend_lm(&target, &noise, lambda)?;
        let exact = exact_alpha(&target, &draft, &prompt, t_max)?.alpha;
        let via_tvd = alpha_from_tvd(&target, &draft, &prompt, t_max, AlphaMethod::Exact)?;
        let mc = alpha_from_tvd(&target, &draft, &prompt, t_max, AlphaMethod::MonteCarlo { samples: 5000, seed: 1 })?;
        let config = SpecConfig::lossless(gamma, t_max)?;
        let traces = (0..5000)
            .map(|_| spec_decode(&target, &draft, &prompt, &config, &mut rng))
            .collect::<speclab::Result<Vec<_>>>()?;
        let report = MetricsReport::from_traces(&traces, via_tvd, gamma, c)?;
        println!(
            "{lambda:>6}  {exact:.4}   {via_tvd:.4}     {mc:.4}    {:.4}     {:.3}     {:.3}        {:.3}",
            report.alpha_empirical,
            report.tau_empirical,
            theoretical_tau(exact, gamma),
            report.speedup
        );
    }
    Ok(())
}
