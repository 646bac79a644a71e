#![allow(dead_code)]

pub mod checks;

use l2o_core::autodiff::{NodeId, Tape, Tensor};
use l2o_core::channel::generate_channel_seeded;
use l2o_core::{ProblemInstance, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Instance with unit weights, unit thresholds and the default budget.
pub fn instance(k: usize, n: usize, snr_db: f64, seed: u64) -> ProblemInstance {
    instance_with(k, n, snr_db, vec![1.0; k], vec![1.0; k], seed)
}

pub fn instance_with(k: usize, n: usize, snr_db: f64, alpha: Vec<f64>, gamma: Vec<f64>, seed: u64) -> ProblemInstance {
    let ch = generate_channel_seeded(k, n, 3.0, snr_db, 1.0, seed).unwrap();
    ProblemInstance::new(ch, alpha, gamma, 1.1, 0.1).unwrap()
}

pub fn uniform(r: &mut ChaCha8Rng, len: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..len).map(|_| r.random_range(lo..hi)).collect()
}

/// Uniform entries bounded away from zero (for kinks and singularities).
pub fn away_from_zero(r: &mut ChaCha8Rng, len: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..len)
        .map(|_| {
            let m = r.random_range(lo..hi);
            if r.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect()
}

/// Reverse-mode gradient of a scalar graph at `x`.
pub fn tape_grad<F>(f: &F, x: &Tensor) -> Result<Vec<f64>>
where
    F: Fn(&mut Tape, NodeId) -> Result<NodeId>,
{
    let mut tape = Tape::new();
    let p = tape.param(x.clone());
    let root = f(&mut tape, p)?;
    let g = tape.backward(root)?;
    Ok(g.get(p).expect("param gradient").data().to_vec())
}

pub fn eval<F>(f: &F, x: &Tensor) -> Result<f64>
where
    F: Fn(&mut Tape, NodeId) -> Result<NodeId>,
{
    let mut tape = Tape::new();
    let p = tape.constant(x.clone());
    let root = f(&mut tape, p)?;
    Ok(tape.scalar(root))
}

/// Central differences with a per-coordinate step `h * max(1, |x_i|)`.
pub fn central_diff<F>(f: &F, x: &Tensor, h: f64) -> Result<Vec<f64>>
where
    F: Fn(&mut Tape, NodeId) -> Result<NodeId>,
{
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let xi = x.data()[i];
        let step = h * xi.abs().max(1.0);
        probe.data_mut()[i] = xi + step;
        let hi = eval(f, &probe)?;
        probe.data_mut()[i] = xi - step;
        let lo = eval(f, &probe)?;
        probe.data_mut()[i] = xi;
        out.push((hi - lo) / (2.0 * step));
    }
    Ok(out)
}

/// `||ad - fd|| / max(||fd||, floor)`.
pub fn rel_err(ad: &[f64], fd: &[f64], floor: f64) -> f64 {
    let diff: f64 = ad.iter().zip(fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = fd.iter().map(|v| v * v).sum::<f64>().sqrt();
    diff / norm.max(floor)
}

pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> f64
where
    F: Fn(&mut Tape, NodeId) -> Result<NodeId>,
{
    let ad = tape_grad(&f, x).unwrap();
    let fd = central_diff(&f, x, h).unwrap();
    rel_err(&ad, &fd, 1e-8)
}

/// Small sweep that still touches every architecture and method.
pub fn tiny_sweep(grid: Vec<f64>) -> l2o_core::SweepConfig {
    let mut s = l2o_core::SweepConfig::default_for(l2o_core::Axis::Snr);
    s.grid = grid;
    s.system.count = 24;
    s.train = serde_json::json!({ "epochs": 2, "batch_size": 8 });
    s
}

/// Every line of a history CSV with the wall-clock column dropped.
pub fn history_without_time(csv: &str) -> Vec<String> {
    csv.lines().map(|l| l.rsplit_once(',').map_or(l, |(head, _)| head).to_string()).collect()
}
