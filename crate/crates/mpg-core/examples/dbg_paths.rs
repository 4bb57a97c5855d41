//! Probe: compare a trained checkpoint's greedy path with the exact
//! optimal policy's path on FrozenLake 4x4. Not part of the library
//! surface.

use mpg_core::env::{frozen_lake_4x4, Cell};
use mpg_core::policy::{ExtendedPolicy, FeatureMap, PolicyTable};
use mpg_core::{frozenlake_as_mdp, solve_optimal};

fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .unwrap()
        .0
}

fn main() {
    let path = std::env::args().nth(1).expect("checkpoint path");
    let scale: f64 = std::env::args()
        .nth(2)
        .map(|s| s.parse().unwrap())
        .unwrap_or(10.0);
    let fl = frozen_lake_4x4();
    let mdp = frozenlake_as_mdp(&fl, false).unwrap();
    let n = 10;
    let doc: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    let inner = doc.get("policy").unwrap_or(&doc);
    let features = FeatureMap::scaled_tabular(mdp.n_actions(), mdp.n_states(), scale).unwrap();
    let trained = ExtendedPolicy::from_checkpoint(inner, features).unwrap();

    let baseline = PolicyTable::uniform(mdp.n_states(), mdp.n_actions());
    let sol = solve_optimal(&mdp, &baseline, n, 0.03, 0.9).unwrap();

    let names = ["L", "D", "R", "U"];
    println!("greedy paths from start (trained vs oracle):");
    let sources: Vec<(&str, Box<dyn Fn(usize, usize) -> Vec<f64>>)> = vec![
        (
            "trained",
            Box::new(|i: usize, s: usize| trained.step(i).action_distribution(s)),
        ),
        (
            "oracle ",
            Box::new(|i: usize, s: usize| sol.pi(i).row(s).to_vec()),
        ),
    ];
    for (label, probs_of) in &sources {
        let mut s = fl.start;
        print!("{label}: {s}");
        for k in 0..n {
            let probs = probs_of(n - k, s);
            let a = argmax(&probs);
            let (s2, r, done) = fl.move_from(s, a);
            print!(" -{}(p={:.2},r={:+.2})-> {}", names[a], probs[a], r, s2);
            s = s2;
            if done {
                break;
            }
        }
        println!(
            "  [{}]",
            if fl.grid[s] == Cell::Goal {
                "goal"
            } else {
                "no goal"
            }
        );
    }

    println!("\nper-horizon greedy action at each visited trained state:");
    let mut s = fl.start;
    for k in 0..n {
        let i = n - k;
        let tr = trained.step(i).action_distribution(s);
        let or = sol.pi(i).row(s).to_vec();
        println!(
            "i={i:2} s={s:2} trained {:?} | oracle {:?}",
            tr.iter().map(|p| format!("{p:.2}")).collect::<Vec<_>>(),
            or.iter().map(|p| format!("{p:.2}")).collect::<Vec<_>>(),
        );
        let a = argmax(&tr);
        let (s2, _, done) = fl.move_from(s, a);
        s = s2;
        if done {
            break;
        }
    }
}
