//! Census routines shared by the topical tests and the acceptance report.
//! Each returns statistics; callers decide what to assert.

use l2o_core::autodiff::{NodeId, Tape, Tensor};
use l2o_core::feasibility::{
    self, dc3_correct_values, hop_build_context, hop_map_values, phi_and_grad_nodes, BeamConstraints, Dc3Config, HopContext,
};
use l2o_core::problem::graph::{self, InstanceNodes};
use l2o_core::problem::{self, FEASIBILITY_TOL};
use l2o_core::wmmse::{self, WmmseState};
use l2o_core::{ProblemInstance, Result};
use num_complex::Complex64;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{away_from_zero, grad_check, instance, instance_with, rng, uniform};

pub const FD_CASES: usize = 100;
pub const FD_STEP: f64 = 1e-6;

pub const BINARY_OPS: [&str; 4] = ["add", "sub", "mul", "div"];
pub const UNARY_OPS: [&str; 13] =
    ["relu", "sigmoid", "tanh", "log", "exp", "sqrt", "square", "sin", "cos", "softplus", "neg", "scale", "offset"];
pub const STRUCTURAL_OPS: [&str; 9] =
    ["matmul", "transpose", "sum", "sum_axis", "concat", "slice", "reshape", "cumprod_exclusive", "solve_spd"];

pub type Graph = Box<dyn Fn(&mut Tape, NodeId) -> Result<NodeId>>;

/// `sum(y * w)` with a fixed, non-constant weight pattern so every output
/// entry contributes a distinct cotangent.
fn weighted_sum(t: &mut Tape, y: NodeId) -> Result<NodeId> {
    let shape = t.shape(y).to_vec();
    let numel: usize = shape.iter().product();
    let w: Vec<f64> = (0..numel).map(|i| 1.5 + (1.3 * i as f64 + 0.7).sin()).collect();
    let w = t.constant(Tensor::new(shape, w)?);
    let p = t.mul(y, w)?;
    Ok(t.sum(p))
}

/// Splits the flat parameter into two operands of the given shapes.
fn split2(t: &mut Tape, x: NodeId, sa: &[usize], sb: &[usize]) -> Result<(NodeId, NodeId)> {
    let na: usize = sa.iter().product();
    let nb: usize = sb.iter().product();
    let a = t.slice(x, 0, 0, na)?;
    let b = t.slice(x, 0, na, na + nb)?;
    Ok((t.reshape(a, sa)?, t.reshape(b, sb)?))
}

fn dims(r: &mut ChaCha8Rng) -> (usize, usize) {
    (r.random_range(1..5), r.random_range(1..5))
}

/// Operand shape pairs exercising each broadcasting rule.
fn broadcast_pair(r: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let (m, n) = dims(r);
    match r.random_range(0..6) {
        0 => (vec![m, n], vec![m, n]),
        1 => (vec![m, n], vec![m, 1]),
        2 => (vec![1, n], vec![m, n]),
        3 => (vec![m, n], vec![1]),
        4 => (vec![1], vec![m, n]),
        _ => (vec![m * n], vec![m * n]),
    }
}

pub fn binary(name: &'static str, r: &mut ChaCha8Rng) -> (Tensor, Graph) {
    let (sa, sb) = broadcast_pair(r);
    let na: usize = sa.iter().product();
    let nb: usize = sb.iter().product();
    let mut x = uniform(r, na, -2.0, 2.0);
    if name == "div" {
        x.extend(away_from_zero(r, nb, 0.5, 2.0));
    } else {
        x.extend(uniform(r, nb, -2.0, 2.0));
    }
    let f: Graph = Box::new(move |t, p| {
        let (a, b) = split2(t, p, &sa, &sb)?;
        let y = match name {
            "add" => t.add(a, b)?,
            "sub" => t.sub(a, b)?,
            "mul" => t.mul(a, b)?,
            "div" => t.div(a, b)?,
            _ => unreachable!(),
        };
        weighted_sum(t, y)
    });
    (Tensor::vector(x), f)
}

pub fn unary(name: &'static str, r: &mut ChaCha8Rng) -> (Tensor, Graph) {
    let (m, n) = dims(r);
    let len = m * n;
    let x = match name {
        "log" | "sqrt" => uniform(r, len, 0.2, 3.0),
        "relu" => away_from_zero(r, len, 0.05, 2.0),
        _ => uniform(r, len, -2.0, 2.0),
    };
    let c = r.random_range(-3.0..3.0);
    let f: Graph = Box::new(move |t, p| {
        let a = t.reshape(p, &[m, n])?;
        let y = match name {
            "relu" => t.relu(a),
            "sigmoid" => t.sigmoid(a),
            "tanh" => t.tanh(a),
            "log" => t.log(a)?,
            "exp" => t.exp(a),
            "sqrt" => t.sqrt(a)?,
            "square" => t.square(a),
            "sin" => t.sin(a),
            "cos" => t.cos(a),
            "softplus" => t.softplus(a),
            "neg" => t.neg(a),
            "scale" => t.scale(a, c),
            "offset" => {
                let o = t.offset(a, c);
                t.square(o)
            }
            _ => unreachable!(),
        };
        weighted_sum(t, y)
    });
    (Tensor::vector(x), f)
}

pub fn structural(name: &'static str, r: &mut ChaCha8Rng) -> (Tensor, Graph) {
    let (m, n) = dims(r);
    let k = r.random_range(1..5);
    let axis = r.random_range(0..2);
    match name {
        "matmul" => {
            let x = uniform(r, m * k + k * n, -2.0, 2.0);
            let f: Graph = Box::new(move |t, p| {
                let (a, b) = split2(t, p, &[m, k], &[k, n])?;
                let y = t.matmul(a, b)?;
                weighted_sum(t, y)
            });
            (Tensor::vector(x), f)
        }
        "transpose" => {
            let x = uniform(r, m * n, -2.0, 2.0);
            let f: Graph = Box::new(move |t, p| {
                let a = t.reshape(p, &[m, n])?;
                let y = t.transpose(a)?;
                weighted_sum(t, y)
            });
            (Tensor::vector(x), f)
        }
        "sum" => {
            let x = uniform(r, m * n, -2.0, 2.0);
            let f: Graph = Box::new(move |t, p| {
                let a = t.reshape(p, &[m, n])?;
                let s = t.sum(a);
                Ok(t.square(s))
            });
            (Tensor::vector(x), f)
        }
        "sum_axis" => {
            let x = uniform(r, m * n, -2.0, 2.0);
            let f: Graph = Box::new(move |t, p| {
                let a = t.reshape(p, &[m, n])?;
                let y = t.sum_axis(a, axis)?;
                weighted_sum(t, y)
            });
            (Tensor::vector(x), f)
        }
        "concat" => {
            let (sa, sb) = if axis == 0 { (vec![m, n], vec![k, n]) } else { (vec![m, n], vec![m, k]) };
            let len = m * n + sb.iter().product::<usize>();
            let x = uniform(r, len, -2.0, 2.0);
            let f: Graph = Box::new(move |t, p| {
                let (a, b) = split2(t, p, &sa, &sb)?;
                let y = t.concat(&[a, b, a], axis)?;
                weighted_sum(t, y)
            });
            (Tensor::vector(x), f)
        }
        "slice" => {
            let x = uniform(r, m * n, -2.0, 2.0);
            let dim = if axis == 0 { m } else { n };
            let start = r.random_range(0..dim);
            let end = r.random_range(start + 1..=dim);
            let f: Graph = Box::new(move |t, p| {
                let a = t.reshape(p, &[m, n])?;
                let y = t.slice(a, axis, start, end)?;
                weighted_sum(t, y)
            });
            (Tensor::vector(x), f)
        }
        "reshape" => {
            let x = uniform(r, m * n, -2.0, 2.0);
            let f: Graph = Box::new(move |t, p| {
                let a = t.reshape(p, &[n, m])?;
                let a = t.reshape(a, &[m * n, 1])?;
                weighted_sum(t, a)
            });
            (Tensor::vector(x), f)
        }
        "cumprod_exclusive" => {
            let len = m * n;
            let x = away_from_zero(r, len, 0.3, 1.5);
            let f: Graph = Box::new(move |t, p| {
                let y = t.cumprod_exclusive(p);
                weighted_sum(t, y)
            });
            (Tensor::vector(x), f)
        }
        "solve_spd" => {
            // A = M M^T + d I built on the tape so the gradient reaches A.
            let d = m + 1;
            let x = uniform(r, d * d + d * n, -1.0, 1.0);
            let f: Graph = Box::new(move |t, p| {
                let (mm, b) = split2(t, p, &[d, d], &[d, n])?;
                let mt = t.transpose(mm)?;
                let a = t.matmul(mm, mt)?;
                let eye = t.constant(Tensor::identity(d));
                let eye = t.scale(eye, d as f64);
                let a = t.add(a, eye)?;
                let y = t.solve_spd(a, b)?;
                weighted_sum(t, y)
            });
            (Tensor::vector(x), f)
        }
        _ => unreachable!(),
    }
}

/// Worst finite-difference relative error of `op` over [`FD_CASES`] random
/// cases.
pub fn op_census(name: &'static str) -> f64 {
    let build: fn(&'static str, &mut ChaCha8Rng) -> (Tensor, Graph) = if BINARY_OPS.contains(&name) {
        binary
    } else if UNARY_OPS.contains(&name) {
        unary
    } else {
        structural
    };
    let mut r = rng(0x5eed ^ name.len() as u64 ^ (name.as_bytes()[0] as u64) << 8);
    (0..FD_CASES)
        .map(|_| {
            let (x, f) = build(name, &mut r);
            grad_check(f, &x, FD_STEP)
        })
        .fold(0.0, f64::max)
}

/// Random instance and a raw beamformer of moderate power, so that some
/// constraints are active and some are not.
fn composed_case(r: &mut ChaCha8Rng, case: usize) -> (ProblemInstance, Tensor) {
    let k = r.random_range(1..5);
    let n = r.random_range(k..k + 6);
    let alpha = uniform(r, k, 0.5, 2.0);
    let gamma = uniform(r, k, 0.1, 3.0);
    let snr = r.random_range(0.0..20.0);
    let inst = instance_with(k, n, snr, alpha, gamma, 9000 + case as u64);
    let scale = r.random_range(0.05..0.6) / (n as f64).sqrt();
    let raw = uniform(r, 2 * n * k, -scale, scale);
    (inst, Tensor::vector(raw))
}

pub type Objective = fn(&mut Tape, &ProblemInstance, NodeId) -> Result<NodeId>;

pub const COMPOSED: [(&str, Objective); 4] = [
    ("wsr", |t, inst, p| {
        let h = InstanceNodes::new(t, inst);
        let beam = graph::split_raw(t, p, inst.n(), inst.k())?;
        graph::wsr(t, inst, &h, beam)
    }),
    ("penalty", |t, inst, p| {
        let h = InstanceNodes::new(t, inst);
        let beam = graph::split_raw(t, p, inst.n(), inst.k())?;
        feasibility::penalty_loss(t, inst, &h, beam, feasibility::DEFAULT_LAMBDA)
    }),
    ("phi", |t, inst, p| {
        let h = InstanceNodes::new(t, inst);
        let beam = graph::split_raw(t, p, inst.n(), inst.k())?;
        Ok(phi_and_grad_nodes(t, inst, &h, beam)?.0)
    }),
    // One fixed-size correction step x - eta grad(phi), differentiated
    // through the closed-form gradient, then scored by WSR.
    ("correction step", |t, inst, p| {
        let h = InstanceNodes::new(t, inst);
        let beam = graph::split_raw(t, p, inst.n(), inst.k())?;
        let (_, g) = phi_and_grad_nodes(t, inst, &h, beam)?;
        let sr = t.scale(g.re, 0.01);
        let si = t.scale(g.im, 0.01);
        let corrected = graph::BeamNodes { re: t.sub(beam.re, sr)?, im: t.sub(beam.im, si)? };
        graph::wsr(t, inst, &h, corrected)
    }),
];

pub fn composed_census(seed: u64, objective: Objective) -> f64 {
    let mut r = rng(seed);
    (0..FD_CASES)
        .map(|case| {
            let (inst, x) = composed_case(&mut r, case);
            grad_check(|t: &mut Tape, p: NodeId| objective(t, &inst, p), &x, FD_STEP)
        })
        .fold(0.0, f64::max)
}

pub struct AscentCensus {
    pub instances: usize,
    /// Largest single-step WSR decrease.
    pub worst_drop: f64,
    /// Largest `power / budget - 1` over all iterates.
    pub worst_power_excess: f64,
    pub converged: usize,
}

/// Random instances for the ascent census: K in 2..5, N >= K, mixed SNR and
/// weights.
pub fn ascent_instance(seed: u64) -> ProblemInstance {
    let mut r = rng(seed);
    let k = r.random_range(2..5);
    let n = r.random_range(k..k + 18);
    let alpha = uniform(&mut r, k, 0.5, 2.0);
    let snr = r.random_range(-5.0..25.0);
    instance_with(k, n, snr, alpha, vec![1.0; k], seed)
}

pub fn wmmse_ascent_census(instances: usize) -> AscentCensus {
    let mut c = AscentCensus { instances, worst_drop: f64::NEG_INFINITY, worst_power_excess: f64::NEG_INFINITY, converged: 0 };
    for seed in 0..instances as u64 {
        let inst = ascent_instance(seed);
        let mut state = WmmseState::new(&inst, wmmse::mrt_init(&inst).unwrap());
        c.worst_power_excess = c.worst_power_excess.max(state.v.power() / inst.p_budget() - 1.0);
        for _ in 0..wmmse::DEFAULT_MAX_ITER {
            state = wmmse::wmmse_step(&inst, &state).unwrap();
            c.worst_power_excess = c.worst_power_excess.max(state.v.power() / inst.p_budget() - 1.0);
            let t = &state.wsr_trace;
            let drop = t[t.len() - 2] - t[t.len() - 1];
            c.worst_drop = c.worst_drop.max(drop);
            if drop.abs() / t[t.len() - 1].max(1.0) < wmmse::DEFAULT_REL_TOL {
                c.converged += 1;
                break;
            }
        }
    }
    c
}

/// WSR of a two-user beamformer with columns `v1`, `v2`, computed directly.
fn wsr2(h: &[[Complex64; 2]; 2], v: &[[Complex64; 2]; 2], alpha: &[f64], sigma2: f64) -> f64 {
    let g = |k: usize, j: usize| (h[k][0] * v[j][0] + h[k][1] * v[j][1]).norm_sqr();
    (0..2)
        .map(|k| {
            let sinr = g(k, k) / (g(k, 1 - k) + sigma2);
            alpha[k] * (1.0 + sinr).log2()
        })
        .sum()
}

/// Unit vector `[cos t, sin t e^{i f}]`; a common phase does not change
/// any gain.
fn unit(t: f64, f: f64) -> [Complex64; 2] {
    [Complex64::new(t.cos(), 0.0), Complex64::from_polar(t.sin(), f)]
}

/// Best WSR of a two-antenna, two-user instance over full-power
/// beamformers: power split times (a) the MRT directions and (b) a dense grid
/// of all directions, then polished by coordinate pattern search.
pub fn grid_oracle(inst: &ProblemInstance) -> f64 {
    assert_eq!((inst.k(), inst.n()), (2, 2));
    let h: [[Complex64; 2]; 2] = std::array::from_fn(|k| std::array::from_fn(|a| inst.h_row(k, a)));
    let p = inst.p_budget();
    let s2 = inst.sigma2();
    let alpha = &inst.alpha;
    let eval = |x: &[f64; 5]| {
        let p1 = p * x[0].clamp(0.0, 1.0);
        let d1 = unit(x[1], x[2]);
        let d2 = unit(x[3], x[4]);
        let v = [d1.map(|c| c * p1.sqrt()), d2.map(|c| c * (p - p1).sqrt())];
        wsr2(&h, &v, alpha, s2)
    };

    const SPLITS: usize = 40;
    let mut best = f64::NEG_INFINITY;
    let mrt: [[Complex64; 2]; 2] = std::array::from_fn(|k| {
        let n = (h[k][0].norm_sqr() + h[k][1].norm_sqr()).sqrt();
        [h[k][0].conj() / n, h[k][1].conj() / n]
    });
    for i in 0..=SPLITS {
        let p1 = p * i as f64 / SPLITS as f64;
        let v = [mrt[0].map(|c| c * p1.sqrt()), mrt[1].map(|c| c * (p - p1).sqrt())];
        best = best.max(wsr2(&h, &v, alpha, s2));
    }

    const ANG: usize = 16;
    let t = |i: usize| std::f64::consts::FRAC_PI_2 * i as f64 / (ANG - 1) as f64;
    let f = |i: usize| 2.0 * std::f64::consts::PI * i as f64 / ANG as f64;
    let mut starts: Vec<(f64, [f64; 5])> = Vec::new();
    for s in 0..=SPLITS / 2 {
        let frac = s as f64 / (SPLITS / 2) as f64;
        for a in 0..ANG {
            for b in 0..ANG {
                for c in 0..ANG {
                    for d in 0..ANG {
                        let x = [frac, t(a), f(b), t(c), f(d)];
                        let w = eval(&x);
                        if starts.len() < 8 || w > starts[starts.len() - 1].0 {
                            starts.push((w, x));
                            starts.sort_by(|p, q| q.0.total_cmp(&p.0));
                            starts.truncate(8);
                        }
                    }
                }
            }
        }
    }
    for (mut w, mut x) in starts {
        let mut step = [0.05, 0.1, 0.4, 0.1, 0.4];
        while step[0] > 1e-9 {
            let mut moved = false;
            for i in 0..5 {
                for sgn in [1.0, -1.0] {
                    let mut y = x;
                    y[i] += sgn * step[i];
                    let wy = eval(&y);
                    if wy > w {
                        (w, x, moved) = (wy, y, true);
                    }
                }
            }
            if !moved {
                step.iter_mut().for_each(|s| *s *= 0.5);
            }
        }
        best = best.max(w);
    }
    best
}

/// `(wmmse, oracle)` WSR on instance `i` of the two-by-two suite.
pub fn tiny_pair(i: usize) -> (f64, f64) {
    let snr = [0.0, 5.0, 10.0, 15.0, 20.0][i % 5];
    let inst = instance(2, 2, snr, 500 + i as u64);
    let sol = wmmse::solve(&inst, 2000, 1e-10).unwrap();
    (problem::wsr(&inst, &sol.beamformer), grid_oracle(&inst))
}

/// Default-sized instance with random thresholds; some are near the edge of
/// what the channel supports and get no context.
pub fn hop_instance(r: &mut ChaCha8Rng, seed: u64) -> Option<(ProblemInstance, HopContext)> {
    let snr = [0.0, 5.0, 10.0, 15.0, 20.0][seed as usize % 5];
    let gamma = uniform(r, 3, 0.2, 3.0);
    let inst = instance_with(3, 20, snr, vec![1.0; 3], gamma, 3000 + seed);
    hop_build_context(&inst, feasibility::DEFAULT_DELTA).ok().map(|ctx| (inst, ctx))
}

pub struct HopCensus {
    pub draws: usize,
    pub instances: usize,
    pub violations: usize,
    pub worst: f64,
}

/// HoP map on `draws` raw outputs (200 per instance) at four magnitudes.
pub fn hop_census(draws: usize) -> HopCensus {
    let mut r = rng(404);
    let mut c = HopCensus { draws: 0, instances: 0, violations: 0, worst: f64::NEG_INFINITY };
    let mut seed = 0;
    while c.draws < draws {
        seed += 1;
        let Some((inst, ctx)) = hop_instance(&mut r, seed) else { continue };
        c.instances += 1;
        let d = 2 * inst.n() * inst.k();
        for _ in 0..200.min(draws - c.draws) {
            let scale = [0.1, 1.0, 5.0, 50.0][r.random_range(0..4)];
            let v = hop_map_values(&inst, &ctx, &uniform(&mut r, d, -scale, scale)).unwrap();
            let rep = problem::violation_report(&inst, &v, FEASIBILITY_TOL);
            c.worst = c.worst.max(rep.worst);
            c.violations += usize::from(!rep.feasible);
            c.draws += 1;
        }
    }
    c
}

pub struct Dc3Census {
    pub runs: usize,
    pub steps: usize,
    /// Largest increase of phi between consecutive steps.
    pub worst_rise: f64,
    pub ended_feasible: usize,
}

/// DC3 correction at the default config from random starting points.
pub fn dc3_census(runs: usize) -> Dc3Census {
    let cfg = Dc3Config::default();
    let mut r = rng(707);
    let mut c = Dc3Census { runs, steps: 0, worst_rise: f64::NEG_INFINITY, ended_feasible: 0 };
    for seed in 0..runs as u64 {
        let snr = r.random_range(0.0..20.0);
        let gamma = uniform(&mut r, 3, 0.2, 3.0);
        let inst = instance_with(3, 20, snr, vec![1.0; 3], gamma, 7000 + seed);
        let d = 2 * inst.n() * inst.k();
        let scale = r.random_range(0.01..0.5);
        let x = uniform(&mut r, d, -scale, scale);
        let (y, trace) = dc3_correct_values(&BeamConstraints { inst: &inst }, &x, &cfg).unwrap();
        for w in trace.phi.windows(2) {
            c.worst_rise = c.worst_rise.max(w[1] - w[0]);
        }
        c.steps += trace.steps.len();
        let v = problem::Beamformer::from_raw(&y, inst.n(), inst.k()).unwrap();
        c.ended_feasible += usize::from(problem::violation_report(&inst, &v, FEASIBILITY_TOL).feasible);
    }
    c
}
