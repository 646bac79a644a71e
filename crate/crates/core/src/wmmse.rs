//! Classical WMMSE baseline for sum-power-constrained WSR maximization, with
//! bisection on the power multiplier and a weight-boosting QoS repair loop.
//!
//! The precoder update `v_k = a_k (sum_j c_j h_j h_j^H + mu I)^-1 h_k` is
//! evaluated through the push-through identity
//! `(Hm C Hm^H + mu I)^-1 Hm = Hm (C R + mu I)^-1` with `R = Hm^H Hm`, so each
//! bisection probe costs a `K x K` solve instead of an `N x N` one. At
//! `mu = 0` this gives the minimum-norm solution of the singular system.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::problem::{self, Beamformer, ProblemInstance, FEASIBILITY_TOL};

pub const DEFAULT_MAX_ITER: usize = 500;
pub const DEFAULT_REL_TOL: f64 = 1e-6;
const MSE_FLOOR: f64 = 1e-12;
const MAX_DOUBLINGS: usize = 200;
const QOS_ROUNDS: u32 = 11;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WmmseState {
    pub v: Beamformer,
    pub u: Vec<Complex64>,
    pub w: Vec<f64>,
    pub mu: f64,
    pub wsr_trace: Vec<f64>,
}

impl WmmseState {
    pub fn new(inst: &ProblemInstance, v: Beamformer) -> Self {
        let k = inst.k();
        let wsr = problem::wsr(inst, &v);
        Self { v, u: vec![Complex64::new(0.0, 0.0); k], w: vec![1.0; k], mu: 0.0, wsr_trace: vec![wsr] }
    }
}

/// Channel vectors `h_k` and their Gram matrix.
struct Geometry {
    /// `h[k][n] = conj(H[k, n])`.
    h: Vec<Vec<Complex64>>,
    /// `gram[i][j] = h_i^H h_j`.
    gram: Vec<Vec<Complex64>>,
}

impl Geometry {
    fn new(inst: &ProblemInstance) -> Self {
        let (k, n) = (inst.k(), inst.n());
        let h: Vec<Vec<Complex64>> = (0..k).map(|u| (0..n).map(|a| inst.h_row(u, a).conj()).collect()).collect();
        let gram = (0..k).map(|i| (0..k).map(|j| h[i].iter().zip(&h[j]).map(|(a, b)| a.conj() * b).sum()).collect()).collect();
        Self { h, gram }
    }
}

/// Coefficients of the precoder subproblem for fixed receivers and weights.
pub(crate) struct PrecoderSystem {
    /// `c_j = alpha_j w_j |u_j|^2`.
    c: Vec<f64>,
    /// `b_k = alpha_k w_k u_k`.
    b: Vec<Complex64>,
}

/// Receivers `u_k`, weights `w_k = 1/e_k` for the current precoders.
pub fn receivers_and_weights(inst: &ProblemInstance, v: &Beamformer) -> (Vec<Complex64>, Vec<f64>) {
    let g = inst.cross_gains(v);
    let k = inst.k();
    let mut u = Vec::with_capacity(k);
    let mut w = Vec::with_capacity(k);
    for i in 0..k {
        let total: f64 = g[i].iter().map(|x| x.norm_sqr()).sum::<f64>() + inst.sigma2();
        let ui = g[i][i] / total;
        let e = (1.0 - (ui.conj() * g[i][i]).re).max(MSE_FLOOR);
        u.push(ui);
        w.push(1.0 / e);
    }
    (u, w)
}

fn precoder_system(inst: &ProblemInstance, u: &[Complex64], w: &[f64]) -> PrecoderSystem {
    let c = (0..inst.k()).map(|j| inst.alpha[j] * w[j] * u[j].norm_sqr()).collect();
    let b = (0..inst.k()).map(|j| u[j] * (inst.alpha[j] * w[j])).collect();
    PrecoderSystem { c, b }
}

/// Solves `A X = B` for small dense complex systems (partial pivoting).
fn complex_solve(mut a: Vec<Vec<Complex64>>, mut b: Vec<Vec<Complex64>>) -> Option<Vec<Vec<Complex64>>> {
    let n = a.len();
    let scale = a.iter().flatten().map(|x| x.norm()).fold(0.0, f64::max);
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].norm().total_cmp(&a[j][col].norm()))?;
        if !(a[piv][col].norm() > 1e-14 * scale.max(f64::MIN_POSITIVE)) {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for r in (col + 1)..n {
            let f = a[r][col] / a[col][col];
            if f == Complex64::new(0.0, 0.0) {
                continue;
            }
            for c in col..n {
                let t = a[col][c];
                a[r][c] -= f * t;
            }
            for c in 0..b[r].len() {
                let t = b[col][c];
                b[r][c] -= f * t;
            }
        }
    }
    for col in (0..n).rev() {
        for c in 0..b[col].len() {
            let mut s = b[col][c];
            for p in (col + 1)..n {
                s -= a[col][p] * b[p][c];
            }
            b[col][c] = s / a[col][col];
        }
    }
    Some(b)
}

/// Precoders for multiplier `mu`, or `None` if the system is singular.
fn precoders_for_mu(geo: &Geometry, sys: &PrecoderSystem, mu: f64) -> Option<Beamformer> {
    let k = sys.c.len();
    let n = geo.h[0].len();
    if sys.b.iter().all(|b| b.norm_sqr() == 0.0) {
        return Some(Beamformer::zeros(n, k));
    }
    // M = C R + mu I, solve M Z = diag(b)
    let m: Vec<Vec<Complex64>> = (0..k)
        .map(|i| {
            (0..k)
                .map(|j| geo.gram[i][j] * sys.c[i] + if i == j { Complex64::new(mu, 0.0) } else { Complex64::new(0.0, 0.0) })
                .collect()
        })
        .collect();
    let rhs: Vec<Vec<Complex64>> =
        (0..k).map(|i| (0..k).map(|j| if i == j { sys.b[i] } else { Complex64::new(0.0, 0.0) }).collect()).collect();
    let z = complex_solve(m, rhs)?;
    let mut v = Beamformer::zeros(n, k);
    for col in 0..k {
        for a in 0..n {
            let val: Complex64 = (0..k).map(|i| geo.h[i][a] * z[i][col]).sum();
            v.set(a, col, val);
        }
    }
    if v.v_re.iter().chain(&v.v_im).all(|x| x.is_finite()) {
        Some(v)
    } else {
        None
    }
}

fn bisection_on(inst: &ProblemInstance, geo: &Geometry, sys: &PrecoderSystem) -> Result<(f64, Beamformer)> {
    let p = inst.p_budget();
    if let Some(v0) = precoders_for_mu(geo, sys, 0.0) {
        if v0.power() <= p {
            return Ok((0.0, v0));
        }
    }
    let scale = sys.c.iter().sum::<f64>().max(1e-300) * geo.gram.iter().enumerate().map(|(i, r)| r[i].re).sum::<f64>();
    let mut hi = scale.max(1e-12);
    let mut hi_v = None;
    for _ in 0..MAX_DOUBLINGS {
        match precoders_for_mu(geo, sys, hi) {
            Some(v) if v.power() <= p => {
                hi_v = Some(v);
                break;
            }
            _ => hi *= 2.0,
        }
    }
    let mut hi_v = hi_v.ok_or_else(|| {
        Error::LinearSolve(format!("power multiplier bracket not found after {MAX_DOUBLINGS} doublings (mu = {hi:.3e})"))
    })?;
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        match precoders_for_mu(geo, sys, mid) {
            Some(v) if v.power() <= p => {
                hi = mid;
                hi_v = v;
            }
            _ => lo = mid,
        }
        if hi_v.power() >= p * (1.0 - 1e-15) {
            break;
        }
    }
    Ok((hi, hi_v))
}

/// Power multiplier for the precoder subproblem defined by `u`, `w`.
///
/// Returns 0 when the unconstrained update already fits the budget;
/// otherwise the smallest bracketed `mu` whose precoders satisfy the budget,
/// refined until the power reaches the budget to within rounding.
pub fn bisection_mu(inst: &ProblemInstance, u: &[Complex64], w: &[f64]) -> Result<f64> {
    let geo = Geometry::new(inst);
    let sys = precoder_system(inst, u, w);
    Ok(bisection_on(inst, &geo, &sys)?.0)
}

/// Precoders of the subproblem at a given multiplier (`mu > 0`, or `mu = 0`
/// with a nonsingular reduced system).
pub fn precoders(inst: &ProblemInstance, u: &[Complex64], w: &[f64], mu: f64) -> Result<Beamformer> {
    let geo = Geometry::new(inst);
    let sys = precoder_system(inst, u, w);
    precoders_for_mu(&geo, &sys, mu).ok_or_else(|| Error::LinearSolve(format!("singular precoder system at mu = {mu:.3e}")))
}

/// Matched filtering with the budget split equally across users.
pub fn mrt_init(inst: &ProblemInstance) -> Result<Beamformer> {
    let (k, n) = (inst.k(), inst.n());
    let amp = (inst.p_budget() / k as f64).sqrt();
    let mut v = Beamformer::zeros(n, k);
    for u in 0..k {
        let norm: f64 = (0..n).map(|a| inst.h_row(u, a).norm_sqr()).sum::<f64>().sqrt();
        if !(norm > 0.0) {
            return Err(Error::DegenerateChannel(format!("user {u} has a zero channel")));
        }
        for a in 0..n {
            v.set(a, u, inst.h_row(u, a).conj() * (amp / norm));
        }
    }
    Ok(v)
}

fn step_with(inst: &ProblemInstance, geo: &Geometry, state: &WmmseState) -> Result<WmmseState> {
    let (u, w) = receivers_and_weights(inst, &state.v);
    let sys = precoder_system(inst, &u, &w);
    let (mu, v) = bisection_on(inst, geo, &sys)?;
    let mut trace = state.wsr_trace.clone();
    trace.push(problem::wsr(inst, &v));
    Ok(WmmseState { v, u, w, mu, wsr_trace: trace })
}

/// One receiver / weight / precoder block update.
pub fn wmmse_step(inst: &ProblemInstance, state: &WmmseState) -> Result<WmmseState> {
    step_with(inst, &Geometry::new(inst), state)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveOutcome {
    pub beamformer: Beamformer,
    pub trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Iterates from MRT until the relative WSR change drops below `rel_tol`
/// or `max_iter` steps; returns the best iterate seen.
pub fn solve(inst: &ProblemInstance, max_iter: usize, rel_tol: f64) -> Result<SolveOutcome> {
    if max_iter == 0 {
        return Err(Error::InvalidParam("max_iter must be >= 1".into()));
    }
    let geo = Geometry::new(inst);
    let mut state = WmmseState::new(inst, mrt_init(inst)?);
    let mut best = (state.wsr_trace[0], state.v.clone());
    let mut converged = false;
    let mut iterations = 0;
    while iterations < max_iter {
        state = step_with(inst, &geo, &state)?;
        iterations += 1;
        let n = state.wsr_trace.len();
        let (prev, cur) = (state.wsr_trace[n - 2], state.wsr_trace[n - 1]);
        if cur > best.0 {
            best = (cur, state.v.clone());
        }
        if (cur - prev).abs() / cur.max(1.0) < rel_tol {
            converged = true;
            break;
        }
    }
    Ok(SolveOutcome { beamformer: best.1, trace: state.wsr_trace, iterations, converged })
}

fn sinr_deficits(inst: &ProblemInstance, v: &Beamformer) -> Vec<f64> {
    problem::sinr(inst, v).iter().zip(&inst.gamma).map(|(s, g)| ((g - s) / g).max(0.0)).collect()
}

/// Enforces the SINR thresholds by re-solving with boosted weights
/// `alpha_k + rho * deficit_k`, doubling `rho` from 1 to 2^10. Deficits only
/// grow across rounds so a user that slips below its threshold while another
/// is boosted joins the boost. Returns the first feasible iterate, or the
/// least-violating one with `false`.
pub fn qos_repair(inst: &ProblemInstance, v: &Beamformer) -> Result<(Beamformer, bool)> {
    let report = problem::violation_report(inst, v, FEASIBILITY_TOL);
    if report.g[1..].iter().all(|g| *g <= FEASIBILITY_TOL) {
        return Ok((v.clone(), report.feasible));
    }
    let mut deficits = sinr_deficits(inst, v);
    let mut best = (report.worst, v.clone());
    for round in 0..QOS_ROUNDS {
        let rho = f64::from(1u32 << round);
        let alpha: Vec<f64> = inst.alpha.iter().zip(&deficits).map(|(a, d)| a + rho * d).collect();
        let boosted = inst.with_alpha(alpha);
        let cand = solve(&boosted, DEFAULT_MAX_ITER, DEFAULT_REL_TOL)?.beamformer;
        let r = problem::violation_report(inst, &cand, FEASIBILITY_TOL);
        if r.feasible {
            return Ok((cand, true));
        }
        if r.worst < best.0 {
            best = (r.worst, cand.clone());
        }
        for (d, nd) in deficits.iter_mut().zip(sinr_deficits(inst, &cand)) {
            *d = d.max(nd);
        }
    }
    Ok((best.1, false))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineSolution {
    pub beamformer: Beamformer,
    pub feasible: bool,
    pub iterations: usize,
}

/// Default-parameter solve followed by QoS repair.
pub fn baseline(inst: &ProblemInstance) -> Result<BaselineSolution> {
    let sol = solve(inst, DEFAULT_MAX_ITER, DEFAULT_REL_TOL)?;
    let (beamformer, feasible) = qos_repair(inst, &sol.beamformer)?;
    Ok(BaselineSolution { beamformer, feasible, iterations: sol.iterations })
}
