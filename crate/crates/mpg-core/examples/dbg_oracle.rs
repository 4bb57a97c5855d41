//! Probe: behavior of the exact optimal extended policy on FrozenLake
//! 4x4 at various temperatures. Not part of the library surface.

use mpg_core::env::{frozen_lake_4x4, Cell};
use mpg_core::mdp::sample_categorical;
use mpg_core::policy::PolicyTable;
use mpg_core::{frozenlake_as_mdp, solve_optimal};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

fn main() {
    let fl = frozen_lake_4x4();
    let mdp = frozenlake_as_mdp(&fl, false).unwrap();
    let n = 10;
    let baseline = PolicyTable::uniform(mdp.n_states(), mdp.n_actions());
    for (tau, gamma) in [(0.4, 0.9), (0.03, 0.9), (0.03, 0.95), (0.03, 0.8)] {
        let sol = solve_optimal(&mdp, &baseline, n, tau, gamma).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let games = 2000;
        let (mut wins, mut steps_win, mut steps_all) = (0usize, 0usize, 0usize);
        for _ in 0..games {
            let mut s = fl.start;
            let mut steps = 0;
            for k in 0..n {
                let probs = sol.pi(n - k).row(s).to_vec();
                let a = sample_categorical(&probs, &mut rng);
                let (s2, _, done) = fl.move_from(s, a);
                s = s2;
                steps += 1;
                if done {
                    break;
                }
            }
            steps_all += steps;
            if fl.grid[s] == Cell::Goal {
                wins += 1;
                steps_win += steps;
            }
        }
        println!(
            "tau {tau} gamma {gamma}: success {:.1}%, avg steps (wins) {:.2}, avg steps (all) {:.2}, V*(start) {:.3}",
            100.0 * wins as f64 / games as f64,
            steps_win as f64 / wins as f64,
            steps_all as f64 / games as f64,
            sol.v(n, fl.start)
        );
    }
}
