//! Reverse-mode gradients through a tiny conv net, then a few Adam steps on
//! a toy problem.

use msattn::tensor::{AdamConfig, AdamState, Graph, ParamStore, Tensor};

fn main() -> msattn::Result<()> {
    let mut store = ParamStore::new();
    let w = store.add("w", Tensor::from_fn(vec![2, 1, 3, 3], |i| ((i * 7 % 5) as f32 - 2.0) * 0.1))?;
    let b = store.add("b", Tensor::zeros(vec![2]))?;
    let fc = store.add("fc", Tensor::from_fn(vec![3, 8], |i| ((i * 3 % 7) as f32 - 3.0) * 0.1))?;
    let fb = store.add("fb", Tensor::zeros(vec![3]))?;

    let images = Tensor::from_fn(vec![4, 1, 4, 4], |i| ((i * 13 % 11) as f32) / 10.0);
    let labels = [0, 1, 2, 1];
    let mut adam = AdamState::new(&store, AdamConfig { lr: 0.05, ..AdamConfig::default() });

    for step in 0..30 {
        let mut g = Graph::new(&store);
        let x = g.input(images.clone());
        let (wv, bv, fcv, fbv) = (g.param(w), g.param(b), g.param(fc), g.param(fb));
        let h = g.conv2d(x, wv, bv, 1)?;
        let h = g.relu(h);
        let h = g.maxpool2d(h, 2, 2)?;
        let h = g.reshape(h, vec![4, 8])?;
        let logits = g.linear(h, fcv, fbv)?;
        let loss = g.cross_entropy(logits, &labels)?;
        g.backward(loss)?;
        if step % 10 == 0 {
            let gw = g.grad(wv).expect("conv weight gradient");
            println!("step {step:>2}  loss {:.4}  |dL/dw| {:.4}", g.value(loss)[0], gw.iter().map(|v| v * v).sum::<f32>().sqrt());
        }
        let grads: Vec<_> = g.param_grads().into_iter().map(|(id, gr)| (id, gr.to_vec())).collect();
        drop(g);
        adam.step(&mut store, &grads)?;
    }
    Ok(())
}
