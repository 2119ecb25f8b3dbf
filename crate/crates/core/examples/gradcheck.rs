//! Reverse-mode autodiff on the tape, checked against finite differences.
//!
//! Run: `cargo run --release --example gradcheck`

use acot::nn::multi_head_attention;
use acot::tensor::{check_gradients, GradCheckOptions, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> acot::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);

    // a hand-sized expression: sum(silu(x W) ⊙ x W)
    let x = Tensor::randn(&[3, 4], 1.0, &mut rng);
    let w = Tensor::randn(&[4, 4], 0.5, &mut rng);
    let mut tape = Tape::detached();
    let (xv, wv) = (tape.leaf(x.clone(), true), tape.leaf(w.clone(), true));
    let h = tape.matmul(xv, wv)?;
    let a = tape.silu(h);
    let p = tape.mul(a, h)?;
    let loss = tape.sum(p);
    let grads = tape.backward(loss)?;
    println!("loss = {:.6}", tape.value(loss).data()[0]);
    println!("dL/dW[0,..] = {:?}", &grads.wrt(wv).expect("W requires grad")[..4]);

    // the same expression through the oracle
    let report = check_gradients(
        |t, v| {
            let h = t.matmul(v[0], v[1])?;
            let a = t.silu(h);
            let p = t.mul(a, h)?;
            Ok(t.sum(p))
        },
        &[x, w],
        &GradCheckOptions::default(),
    )?;
    println!("expression: max relative error {:.2e}", report.max_rel_error());

    // multi-head attention, every input checked
    let q = Tensor::randn(&[2, 8], 1.0, &mut rng);
    let k = Tensor::randn(&[5, 8], 1.0, &mut rng);
    let v = Tensor::randn(&[5, 8], 1.0, &mut rng);
    let report = check_gradients(
        |t, v| {
            let o = multi_head_attention(t, v[0], v[1], v[2], 2)?;
            let sq = t.mul(o, o)?;
            Ok(t.sum(sq))
        },
        &[q, k, v],
        &GradCheckOptions::default(),
    )?;
    for (name, r) in ["q", "k", "v"].iter().zip(&report.inputs) {
        println!("attention d/d{name}: {} coordinates, max relative error {:.2e}", r.checked, r.max_rel_error);
    }
    Ok(())
}
