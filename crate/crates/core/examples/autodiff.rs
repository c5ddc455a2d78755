//! Builds a small graph, backpropagates, and checks the result against
//! finite differences.

use eve_lm::rng::Rng;
use eve_lm::tensorcore::gradcheck::check_params;
use eve_lm::tensorcore::{Graph, ParamStore, Tensor};

fn random(rows: usize, cols: usize, rng: &mut Rng) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.normal()).collect()).unwrap()
}

fn main() -> eve_lm::Result<()> {
    let mut rng = Rng::new(0);
    let mut store = ParamStore::new();
    let w = store.add("w", random(3, 2, &mut rng), true);
    let b = store.add("b", Tensor::zeros(&[2]), true);
    let x = random(4, 3, &mut rng);

    let loss_of = |store: &ParamStore, g: &mut Graph| -> eve_lm::Result<_> {
        let xv = g.constant(x.clone())?;
        let (wv, bv) = (g.param(store, w), g.param(store, b));
        let h = g.matmul(xv, wv)?;
        let h = g.add_row(h, bv)?;
        let h = g.softplus(h)?;
        let sq = g.square(h)?;
        g.mean(sq)
    };

    let mut g = Graph::new();
    let loss = loss_of(&store, &mut g)?;
    println!("loss = {:.6}", g.value(loss).item());
    let grads = g.backward(loss)?.dense(&store);
    println!("dL/dw = {:?}", grads[w.index()].data());
    println!("dL/db = {:?}", grads[b.index()].data());

    let checks = check_params(&mut store, &grads, 1e-4, 6, &mut rng, |s| {
        let mut g = Graph::new();
        let l = loss_of(s, &mut g)?;
        Ok(g.value(l).item())
    })?;
    let worst = checks
        .iter()
        .map(|c| c.relative_error(1e-5))
        .fold(0.0, f64::max);
    println!(
        "{} entries checked, max relative error {worst:.2e}",
        checks.len()
    );
    Ok(())
}
