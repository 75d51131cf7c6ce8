//! Samples from a random bigram model and scores the samples exactly.
//!
//! cargo run --example generate

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use speclab::lm::{generate, random_tabular_lm, seq_logprob, Vocab};
use speclab::oracle::enumerate_seq_dist;

fn main() -> speclab::Result<()> {
    let vocab = Vocab::with_size(4)?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let model = random_tabular_lm(vocab, 1, 1.0, 0.0, &mut rng)?;
    let prompt = [2];
    let t_max = 4;

    for temperature in [0.0, 1.0] {
        println!("temperature {temperature}");
        for _ in 0..3 {
            let y = generate(&model, &prompt, t_max, temperature, &mut rng)?;
            println!("  {y:?}  log p = {:.4}", seq_logprob(&model, &prompt, &y)?);
        }
    }

    let seqs = enumerate_seq_dist(&model, &prompt, t_max)?;
    println!(
        "{} sequences up to length {t_max}, total mass {:.12}, mean length {:.4}",
        seqs.len(),
        seqs.total(),
        seqs.mean_len()
    );
    let mut top: Vec<_> = seqs.iter().collect();
    top.sort_by(|a, b| b.1.total_cmp(&a.1));
    for (y, p) in top.into_iter().take(5) {
        println!("  {y:?}  {p:.5}");
    }
    Ok(())
}
