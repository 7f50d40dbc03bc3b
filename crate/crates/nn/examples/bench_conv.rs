use std::time::Instant;
use medmatting_nn::{Graph, ParamStore, Tensor};
fn main() {
    for &(c, hw, n) in &[(8usize, 32usize, 8usize), (16, 32, 8), (32, 32, 8)] {
        let store = ParamStore::new();
        let x = Tensor::full(&[n, c, hw, hw], 0.3);
        let w = Tensor::full(&[c, c, 3, 3], 0.01);
        let reps = 20;
        let t = Instant::now();
        for _ in 0..reps {
            let g = Graph::new(&store);
            let xv = g.leaf(x.clone());
            let wv = g.leaf(w.clone());
            let y = g.conv2d(xv, wv, None);
            let l = g.sum(y);
            let _ = g.backward(l);
        }
        let dt = t.elapsed().as_secs_f64() / reps as f64;
        let macs = (n * c * c * 9 * hw * hw) as f64 * 3.0;
        println!("c={c} fwd+bwd {:.2} ms  {:.2} GMAC/s", dt * 1e3, macs / dt / 1e9);
    }
}
