//! Probe: tangent-kernel diagonal and per-update preference drift for
//! the FrozenLake neural policy. Not part of the library surface.

use mpg_core::env::{frozen_lake_4x4, Environment};
use mpg_core::neural::{HorizonEncoding, NeuralPolicy};

fn main() {
    let fl = frozen_lake_4x4().with_one_hot();
    for width in [64usize, 256, 1024] {
        let policy = NeuralPolicy::new(
            4,
            fl.state_dim(),
            10,
            &[width],
            HorizonEncoding::SharedShrinking,
            0.4,
            7,
        )
        .unwrap();
        let x = policy.encode(0, &fl.encode(&fl.start), 5);
        let g = policy.nets[0].grad_params(&x).unwrap();
        let k: f64 = g.iter().map(|v| v * v).sum();
        // contrast direction: gradient of f(a) minus the action-average
        let gs: Vec<Vec<f64>> = (0..4)
            .map(|a| {
                policy
                    .nets[0]
                    .grad_params(&policy.encode(a, &fl.encode(&fl.start), 5))
                    .unwrap()
            })
            .collect();
        let mut contrast = 0.0;
        for j in 0..gs[0].len() {
            let mean: f64 = gs.iter().map(|g| g[j]).sum::<f64>() / 4.0;
            let d = gs[0][j] - mean;
            contrast += d * d;
        }
        println!(
            "width {width}: K(x,x) = {k:.2}, contrast |g(a)-mean|^2 = {contrast:.3}, drift/visit ~ {:.4}",
            0.001 / (0.4 * 0.4) * contrast
        );
    }
}
