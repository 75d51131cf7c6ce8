//! Divergences between two next-token distributions, and their logit gradients.
//!
//! cargo run --example divergences

use speclab::prob::{chain_rule_logit_grad, divergence, divergence_grad_q, softmax_with_temperature, DivergenceKind, Logits};

fn main() -> speclab::Result<()> {
    let p = softmax_with_temperature(&Logits::new(vec![2.0, 0.5, -1.0, 0.0])?, 1.0)?;
    let q = softmax_with_temperature(&Logits::new(vec![0.0, 1.0, 0.0, 0.5])?, 1.0)?;
    println!("p = {:.4?}", p.probs());
    println!("q = {:.4?}", q.probs());

    let overlap: f64 = p.probs().iter().zip(q.probs()).map(|(a, b)| a.min(*b)).sum();
    println!("sum min(p, q) = {overlap:.6}");

    for kind in [DivergenceKind::Fkl, DivergenceKind::Rkl, DivergenceKind::jsd(0.5)?, DivergenceKind::Tvd] {
        let d = divergence(kind, &p, &q)?;
        let grad = chain_rule_logit_grad(&divergence_grad_q(kind, &p, &q)?, &q)?;
        println!("{:>9}  D = {d:.6}  dD/dlogits = {grad:+.4?}", kind.label());
    }

    // temperature sharpens or flattens a distribution
    for t in [0.0, 0.5, 1.0, 2.0] {
        println!("p at T = {t}: {:.4?}", p.with_temperature(t)?.probs());
    }
    Ok(())
}
