//! Probe: neural trainer on a 2-armed bandit and a short FrozenLake
//! horizon, to isolate where neural learning breaks down.

use mpg_core::env::{bandit_env, frozen_lake_4x4, Environment};
use mpg_core::neural::HorizonEncoding;
use mpg_core::train::TrainConfig;
use mpg_core::{train_neural_policy, NeuralSettings};

fn main() {
    // bandit: arm 0 pays 1, arm 1 pays 0
    let bandit = bandit_env(vec![1.0, 0.0], None).unwrap();
    let mut config = TrainConfig::new(1, 2000);
    config.tau0 = 0.5;
    config.tau_terminal = 0.5;
    config.eta0 = 0.05;
    config.eta_terminal = 0.05;
    config.exact_log_every = 0;
    let settings = NeuralSettings {
        hidden: vec![32],
        encoding: HorizonEncoding::Separate,
        ..NeuralSettings::default()
    };
    let (policy, _) = train_neural_policy(&bandit, &config, &settings).unwrap();
    let probs = policy
        .action_distribution(&bandit.encode(&()), 1)
        .unwrap();
    println!("bandit arm probabilities: {probs:?} (want arm 0 favored)");

    // FrozenLake, fixed tau, generous eta, gamma 1: does reward move at all?
    let fl = frozen_lake_4x4().with_one_hot();
    for eta in [0.01, 0.05] {
        let mut config = TrainConfig::new(10, 2000);
        config.tau0 = 0.4;
        config.tau_terminal = 0.4;
        config.eta0 = eta;
        config.eta_terminal = eta;
        config.seed = 3;
        config.exact_log_every = 0;
        let settings = NeuralSettings {
            hidden: vec![64],
            ..NeuralSettings::default()
        };
        let (_, rewards) = train_neural_policy(&fl, &config, &settings).unwrap();
        let first: f64 = rewards.iter().take(100).sum::<f64>() / 100.0;
        let last: f64 = rewards.iter().rev().take(100).sum::<f64>() / 100.0;
        println!("frozenlake eta {eta}: first-100 reward {first:.3}, last-100 {last:.3}");
    }
}
