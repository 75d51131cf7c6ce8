//! One speculative decode block by block, then the exact output distribution.
//!
//! cargo run --example spec_decode

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use speclab::lm::{random_tabular_lm, Vocab};
use speclab::oracle::{enumerate_seq_dist, exact_specdec};
use speclab::specdec::{spec_decode, write_trace_csv, SpecConfig};

fn main() -> speclab::Result<()> {
    let vocab = Vocab::with_size(4)?;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let target = random_tabular_lm(vocab, 1, 1.0, -1.0, &mut rng)?;
    let draft = random_tabular_lm(vocab, 1, 1.0, -1.0, &mut rng)?;
    let prompt = [1];
    let config = SpecConfig::lossless(3, 4)?;

    let trace = spec_decode(&target, &draft, &prompt, &config, &mut rng)?;
    for (i, block) in trace.blocks.iter().enumerate() {
        println!(
            "block {i}: proposed {:?}, accepted {}, then {} {:?}",
            block.proposed, block.n_accepted, block.correction_kind, block.correction
        );
    }
    println!("output {:?}  target calls {}  draft calls {}", trace.output, trace.target_calls, trace.draft_calls);
    write_trace_csv(std::io::stdout(), &[trace])?;

    let exact = exact_specdec(&target, &draft, &prompt, &config)?;
    let want = enumerate_seq_dist(&target, &prompt, config.t_max)?;
    println!("TV(speculative output, target) = {:.2e}", exact.dist.tv(&want));
    println!("exact alpha {:.4}  tau {:.4}  relative latency at c = 0.1: {:.4}", exact.alpha(), exact.tau(), exact.relative_latency(0.1));
    Ok(())
}
