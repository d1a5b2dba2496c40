//! Reverse-mode gradients through a tiny conv → relu → linear → CE graph,
//! checked against a central difference on one kernel entry.

use taflab::tensor::Graph;

fn loss(kernel: &[f64], x: &[f64]) -> taflab::Result<(f64, Vec<f64>)> {
    let mut g = Graph::<f64>::new();
    let input = g.input(&[1, 1, 4, 4], x.to_vec(), false)?;
    let k = g.input(&[2, 1, 4, 4], kernel.to_vec(), true)?;
    let w = g.input(&[3, 8], (0..24).map(|i| (i as f64 * 0.37).sin()).collect(), false)?;
    let h = g.conv2d(input, k, 2, 1)?;
    let h = g.relu(h);
    let h = g.reshape(h, &[1, 8])?;
    let logits = g.linear(h, w, None)?;
    let ce = g.cross_entropy(logits, &[2])?;
    let l = g.sum_all(ce)?;
    g.backward(l)?;
    Ok((g.value(l)[0], g.grad_or_zeros(k)))
}

fn main() -> taflab::Result<()> {
    let x: Vec<f64> = (0..16).map(|i| (i as f64 * 0.61).cos()).collect();
    let kernel: Vec<f64> = (0..32).map(|i| (i as f64 * 0.23).sin() * 0.5).collect();
    let (l, grad) = loss(&kernel, &x)?;
    let h = 1e-5;
    let j = 4;
    let (mut p, mut m) = (kernel.clone(), kernel.clone());
    p[j] += h;
    m[j] -= h;
    let numeric = (loss(&p, &x)?.0 - loss(&m, &x)?.0) / (2.0 * h);
    println!("loss {l:.6}");
    println!("dL/dk[{j}]: tape {:.9} vs central difference {numeric:.9}", grad[j]);
    Ok(())
}
