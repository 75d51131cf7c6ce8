//! Quality against latency as the lenience parameter shrinks, computed exactly.
//!
//! cargo run --release --example lenience_sweep

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use speclab::lm::{random_tabular_lm, Vocab};
use speclab::oracle::{enumerate_seq_dist, exact_specdec};
use speclab::specdec::{LenienceKind, LenienceSpec, SpecConfig};

fn main() -> speclab::Result<()> {
    let vocab = Vocab::with_size(4)?;
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let target = random_tabular_lm(vocab, 1, 1.0, -1.0, &mut rng)?;
    let draft = random_tabular_lm(vocab, 1, 1.0, -1.0, &mut rng)?;
    let prompt = [1];
    let t_max = 4;
    let want = enumerate_seq_dist(&target, &prompt, t_max)?;
    let floor = enumerate_seq_dist(&draft, &prompt, t_max)?.tv(&want);
    println!("TV(draft, target) = {floor:.4}");

    println!("kind  eps      quality_tvd  alpha   latency(c=0.1)");
    for kind in [LenienceKind::Lin, LenienceKind::Sq, LenienceKind::Exp] {
        for eps in [1.0, 0.5, 0.1, 1e-2, 1e-3, 1e-5] {
            let config = SpecConfig::new(3, t_max, 1.0, LenienceSpec::new(kind, eps)?)?;
            let out = exact_specdec(&target, &draft, &prompt, &config)?;
            println!(
                "{kind:<4}  {eps:<7}  {:.6}     {:.4}  {:.4}",
                out.dist.tv(&want),
                out.alpha(),
                out.relative_latency(0.1)
            );
        }
    }
    Ok(())
}
