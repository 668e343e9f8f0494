//! Build a small graph, run backward, and compare against finite differences.
//!
//! cargo run --example autodiff

use mner::tensor::{grad_check, Graph, Tensor};

fn main() -> mner::Result<()> {
    let mut g = Graph::new();
    let x = g.input(Tensor::matrix(2, 3, vec![0.5, -1.0, 2.0, 0.0, 1.5, -0.5])?);
    let w = g.constant(Tensor::matrix(3, 2, vec![0.1, 0.2, -0.3, 0.4, 0.5, -0.6])?);
    let h = g.matmul(x, w)?;
    let h = g.tanh(h)?;
    let p = g.softmax(h, 1)?;
    let first = g.slice_cols(p, 0, 1)?;
    let loss = g.sum(first)?;
    let grads = g.backward(loss)?;
    println!("softmax rows: {:?}", g.value(p));
    println!("loss = {}", g.scalar_value(loss));
    println!("dloss/dx = {:?}", grads.get(x).unwrap());

    // a function whose gradient is not trivially zero
    let err = grad_check(
        |g, x| {
            let sq = g.mul(x, x)?;
            let s = g.sigmoid(sq)?;
            let l = g.softmax(s, 1)?;
            let first = g.slice_cols(l, 0, 1)?;
            g.sum(first)
        },
        &Tensor::matrix(2, 3, vec![0.3, -0.7, 1.1, 0.2, 0.9, -1.4])?,
        1e-6,
    )?;
    println!("max relative error vs central differences: {err:.2e}");
    Ok(())
}
