//! Fixtures shared by the benchmarks.

use l2o_core::channel::generate_channel_seeded;
use l2o_core::{Arch, Method, Model, ProblemInstance, TrainConfig};

pub const K: usize = 3;
pub const N: usize = 20;

/// The benchmark system at 10 dB with unit weights and thresholds.
pub fn instance(seed: u64) -> ProblemInstance {
    let ch = generate_channel_seeded(K, N, 3.0, 10.0, 1.0, seed).expect("valid channel parameters");
    ProblemInstance::new(ch, vec![1.0; K], vec![1.0; K], 1.1, 0.1).expect("valid instance")
}

/// An untrained model and its training config.
pub fn model(arch: Arch, method: Method) -> (Model, TrainConfig) {
    let cfg = TrainConfig::new(arch, method);
    let m = Model::init(cfg.model_spec(K, N), cfg.seed).expect("valid spec");
    (m, cfg)
}
