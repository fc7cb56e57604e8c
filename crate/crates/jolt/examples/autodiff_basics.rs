//! Tape-based reverse mode on a tiny two-layer classifier, checked
//! against central finite differences.
//!
//! ```text
//! cargo run --release -p jolt --example autodiff_basics
//! ```

use jolt::tensor::{finite_diff_check_detailed, Tape, Tensor};
use jolt::Result;

fn main() -> Result<()> {
    // Three 8-dim inputs, three classes, one hidden layer of 5.
    let x = Tensor::from_vec(
        &[3, 8],
        (0..24).map(|i| ((i * 7 + 3) % 11) as f64 / 11.0 - 0.5).collect(),
    )?;
    let targets = [0usize, 2, 1];

    let mut w1 = Tensor::from_vec(&[8, 5], (0..40).map(|i| ((i % 9) as f64 - 4.0) / 20.0).collect())?;
    let mut b1 = Tensor::zeros(&[5]);
    let mut w2 = Tensor::from_vec(&[5, 3], (0..15).map(|i| ((i % 7) as f64 - 3.0) / 10.0).collect())?;
    let mut b2 = Tensor::zeros(&[3]);
    for t in [&mut w1, &mut b1, &mut w2, &mut b2] {
        t.set_requires_grad(true);
    }

    // One forward+backward pass, with the graph spelled out.
    let mut tape = Tape::new();
    let (vx, vw1, vb1, vw2, vb2) = (
        tape.input(&x),
        tape.param(&w1),
        tape.param(&b1),
        tape.param(&w2),
        tape.param(&b2),
    );
    let h = tape.linear(vx, vw1, vb1)?;
    let h = tape.relu(h);
    let logits = tape.linear(h, vw2, vb2)?;
    let loss = tape.smoothed_ce(logits, &targets, 0.1, 1.0)?;
    tape.backward(loss)?;
    println!("loss = {:.6}", tape.scalar(loss));
    println!(
        "d(loss)/d(w2)[0..4] = {:?}",
        &tape.grad(vw2).unwrap()[..4]
            .iter()
            .map(|g| format!("{g:.6}"))
            .collect::<Vec<_>>()
    );

    // Same graph as a closure, every coordinate checked against
    // (f(p+h) - f(p-h)) / 2h.
    let mut params = [w1, b1, w2, b2];
    let report = finite_diff_check_detailed(
        &mut |p: &mut [Tensor], want_grads: bool| {
            let mut tape = Tape::new();
            let vx = tape.input(&x);
            let vs: Vec<_> = p.iter().map(|t| tape.param(t)).collect();
            let h = tape.linear(vx, vs[0], vs[1])?;
            let h = tape.relu(h);
            let logits = tape.linear(h, vs[2], vs[3])?;
            let loss = tape.smoothed_ce(logits, &targets, 0.1, 1.0)?;
            let value = tape.scalar(loss);
            if want_grads {
                tape.backward(loss)?;
                for (t, v) in p.iter_mut().zip(&vs) {
                    tape.harvest_into(*v, t);
                }
            }
            Ok(value)
        },
        &mut params,
        1e-5,
        0, // 0 = every coordinate
        1,
    )?;
    println!(
        "finite differences: {} coords, max relative error {:.3e}",
        report.coords_checked, report.max_rel_err
    );
    if let Some((p, i, a, n)) = report.worst {
        println!("worst coord: param {p} index {i}: analytic {a:.9} vs numeric {n:.9}");
    }
    assert!(report.max_rel_err < 1e-6);
    println!("backward pass agrees with central differences");
    Ok(())
}
