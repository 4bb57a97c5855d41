//! Probe: one softmax table shared by every horizon block, trained with
//! the nested cascade update. Not part of the library surface.

use mpg_core::env::{frozen_lake_4x4, Cell};
use mpg_core::mdp::sample_categorical;
use mpg_core::policy::SoftmaxPolicy;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let eff: f64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(9.0); // scale^2
    let gamma: f64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(0.9);
    let episodes = 1000;
    let n = 10;
    let fl = frozen_lake_4x4();
    let ns = fl.n_states();
    let (tau0, taut, eta0, etat) = (0.4, 0.03, 0.001, 3e-6);
    let d_tau = (taut / tau0 as f64).powf(1.0 / episodes as f64);
    let d_eta = (etat / eta0 as f64).powf(1.0 / episodes as f64);
    let mut agg_pass = 0;
    let mut results = Vec::new();
    for seed in 0..10u64 {
        let mut pol = SoftmaxPolicy::tabular_uniform(4, ns, tau0);
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let (mut tau, mut eta) = (tau0, eta0);
        // per-block running-mean baseline
        let mut means = vec![0.0f64; n];
        let mut weight = 0.0f64;
        let decay = 0.99;
        for _ in 0..episodes {
            pol.set_tau(tau);
            let mut s = fl.start;
            let mut states = Vec::with_capacity(n);
            let mut actions = Vec::with_capacity(n);
            let mut terms = Vec::with_capacity(n);
            for _ in 0..n {
                states.push(s);
                let probs = pol.action_distribution(s);
                let a = sample_categorical(&probs, &mut rng);
                let terminal = fl.grid[s] == Cell::Hole || fl.grid[s] == Cell::Goal;
                let (s2, r) = if terminal {
                    (s, 0.0)
                } else {
                    let (s2, r, _) = fl.move_from(s, a);
                    (s2, r)
                };
                actions.push(a);
                terms.push(r - tau * (probs[a] / 0.25).ln());
                s = s2;
            }
            let mut c = 0.0;
            let mut returns = vec![0.0; n];
            for i in 1..=n {
                c = terms[n - i] + gamma * c;
                returns[i - 1] = c;
                let v = if weight == 0.0 { 0.0 } else { means[i - 1] / weight };
                let disc = gamma.powi((n - i) as i32);
                pol.apply_log_grad(eta * eff * disc * (c - v), actions[n - i], states[n - i]);
            }
            weight = decay * weight + (1.0 - decay);
            for (m, c) in means.iter_mut().zip(&returns) {
                *m = decay * *m + (1.0 - decay) * c;
            }
            tau *= d_tau;
            eta *= d_eta;
        }
        // evaluate
        pol.set_tau(taut);
        let mut rng = ChaCha12Rng::seed_from_u64(1000 + seed);
        let (mut wins, mut steps_win) = (0usize, 0usize);
        for _ in 0..100 {
            let mut s = fl.start;
            let mut steps = 0;
            for _ in 0..n {
                let probs = pol.action_distribution(s);
                let a = sample_categorical(&probs, &mut rng);
                let (s2, _, done) = fl.move_from(s, a);
                s = s2;
                steps += 1;
                if done {
                    break;
                }
            }
            if fl.grid[s] == Cell::Goal {
                wins += 1;
                steps_win += steps;
            }
        }
        results.push((wins, steps_win));
    }
    let tot_w: usize = results.iter().map(|r| r.0).sum();
    let tot_s: usize = results.iter().map(|r| r.1).sum();
    let per: Vec<String> = results
        .iter()
        .map(|(w, sw)| format!("{w}%/{:.1}", if *w > 0 { *sw as f64 / *w as f64 } else { f64::NAN }))
        .collect();
    let pct = 100.0 * tot_w as f64 / 1000.0;
    let avg = tot_s as f64 / tot_w as f64;
    if pct >= 99.0 && avg <= 6.3 {
        agg_pass += 1;
    }
    println!(
        "eff {eff} gamma {gamma}: success {pct:.2}%, avg steps {avg:.2}, pass={agg_pass} | {}",
        per.join(" ")
    );
}
