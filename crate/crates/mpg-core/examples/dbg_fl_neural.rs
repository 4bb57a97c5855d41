//! Probe: shared linear preferences on the grid worlds. Not part of the
//! library surface.

use mpg_core::env::{frozen_lake_4x4, frozen_lake_8x8, Cell};
use mpg_core::mdp::sample_categorical;
use mpg_core::neural::HorizonEncoding;
use mpg_core::train::TrainConfig;
use mpg_core::train_neural_policy;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let size: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(8);
    let n: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(100);
    let episodes: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(2000);
    let tau0: f64 = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(0.3);
    let taut: f64 = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(0.005);
    let eta0: f64 = args.get(6).map(|s| s.parse().unwrap()).unwrap_or(2e-6);
    let etat: f64 = args.get(7).map(|s| s.parse().unwrap()).unwrap_or(6e-9);
    let out_scale: f64 = args.get(8).map(|s| s.parse().unwrap()).unwrap_or(100.0);
    let gamma: f64 = args.get(9).map(|s| s.parse().unwrap()).unwrap_or(1.0);
    let hidden: Vec<usize> = args
        .get(10)
        .map(|s| {
            if s == "none" {
                vec![]
            } else {
                s.split(',').map(|x| x.parse().unwrap()).collect()
            }
        })
        .unwrap_or(vec![]);
    let one_hot = args.get(11).map(|s| s == "onehot").unwrap_or(true);
    let product = args.get(12).map(|s| s == "product").unwrap_or(hidden.is_empty());
    let mut fl = if size == 4 {
        frozen_lake_4x4()
    } else {
        frozen_lake_8x8()
    };
    if one_hot {
        fl = fl.with_one_hot();
    }
    for seed in 0..5u64 {
        let mut config = TrainConfig::new(n, episodes);
        config.tau0 = tau0;
        config.tau_terminal = taut;
        config.eta0 = eta0;
        config.eta_terminal = etat;
        config.gamma = gamma;
        config.baseline_value = mpg_core::train::BaselineValue::RunningMean { decay: 0.99 };
        config.seed = seed;
        config.exact_log_every = 0;
        let start = std::time::Instant::now();
        let settings = mpg_core::NeuralSettings {
            hidden: hidden.clone(),
            encoding: HorizonEncoding::SharedShrinking,
            zero_output: true,
            one_hot_states: one_hot,
            out_scale,
            product_input: product,
        };
        match train_neural_policy(&fl, &config, &settings) {
            Err(e) => println!("seed {seed}: training failed: {e}"),
            Ok((mut policy, rewards)) => {
                policy.set_tau(taut);
                let mut rng = ChaCha12Rng::seed_from_u64(1000 + seed);
                let (mut wins, mut steps_win, mut holes) = (0usize, 0usize, 0usize);
                for _ in 0..100 {
                    let mut s = fl.start;
                    let mut steps = 0;
                    for k in 0..n {
                        let probs = policy
                            .action_distribution(&fl.encode_cell(s), n - k)
                            .unwrap();
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
                    } else if fl.grid[s] == Cell::Hole {
                        holes += 1;
                    }
                }
                let hits = rewards.iter().filter(|&&r| r > 5.0).count();
                let hits_late = rewards.iter().rev().take(200).filter(|&&r| r > 5.0).count();
                println!(
                    "seed {seed}: success {wins}%, holes {holes}%, avg steps {:.2}, goal hits {hits} (last 200: {hits_late}), {:.1}s",
                    if wins > 0 { steps_win as f64 / wins as f64 } else { f64::NAN },
                    start.elapsed().as_secs_f64()
                );
            }
        }
    }
}
