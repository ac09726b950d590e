//! Fits a two-layer perceptron to XOR with the tape autodiff and Adam, after
//! checking its gradient against central differences.
//!
//! cargo run --release --example autodiff_gradcheck

use docforge::autodiff::{grad_check_store, AdamConfig, Graph, Mlp, ParameterStore, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> docforge::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParameterStore::new();
    let mlp = Mlp::new(&mut store, &mut rng, "xor", &[2, 8, 1])?;
    let x = Tensor::new(vec![4, 2], vec![0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 1.0, 1.0])?;
    let y = [0.0, 1.0, 1.0, 0.0];

    let loss = |g: &mut Graph, p: &docforge::autodiff::Bindings| {
        let input = g.constant(x.clone());
        let logits = mlp.forward(g, p, input)?;
        let logits = g.reshape(logits, &[4])?;
        g.bce_with_logits(logits, &y)
    };
    let (err, at) = grad_check_store(&store, loss, 1e-4, 16)?;
    println!("worst relative gradient error {err:.2e} (in {at})");

    let adam = AdamConfig::with_lr(0.05);
    for step in 0..=300 {
        let mut g = Graph::new();
        let p = store.bind(&mut g, true);
        let l = loss(&mut g, &p)?;
        if step % 50 == 0 {
            println!("step {step:3}  loss {:.5}", g.value(l).data()[0]);
        }
        let grads = g.backward(l)?;
        store.accumulate_grads(&p, &grads);
        store.adam_step(&adam)?;
    }
    let mut g = Graph::new();
    let p = store.bind(&mut g, false);
    let input = g.constant(x.clone());
    let out = mlp.forward(&mut g, &p, input)?;
    let probs = g.sigmoid(out);
    println!("predictions {:?}", g.value(probs).data().iter().map(|v| (v * 1000.0).round() / 1000.0).collect::<Vec<_>>());
    Ok(())
}
