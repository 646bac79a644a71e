//! Constraint handling: penalty loss, DC3-style gradient correction of the
//! violation energy `phi = sum_i relu(g_i)^2`, and the HoP ray map from a
//! strictly interior point.

use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape, Tensor};
use crate::error::{Error, Result};
use crate::problem::graph::{self, BeamNodes, InstanceNodes};
use crate::problem::{self, Beamformer, ProblemInstance, FEASIBILITY_TOL};
use crate::wmmse;

pub const DEFAULT_LAMBDA: f64 = 10.0;
pub const DEFAULT_DELTA: f64 = 0.01;
pub const DEFAULT_BISECTION_ITERS: usize = 40;
/// Sufficient-decrease constant of the correction line search.
const ARMIJO_C: f64 = 0.5;
const MAX_HALVINGS: usize = 60;

/// `sum relu(g)^2` of a constraint-value node.
pub fn violation_energy(tape: &mut Tape, g: NodeId) -> NodeId {
    let r = tape.relu(g);
    let sq = tape.square(r);
    tape.sum(sq)
}

/// `-wsr(V) + lambda * sum_i relu(g_i(V))^2`.
pub fn penalty_loss(tape: &mut Tape, inst: &ProblemInstance, h: &InstanceNodes, beam: BeamNodes, lambda: f64) -> Result<NodeId> {
    if !(lambda >= 0.0) {
        return Err(Error::InvalidParam(format!("lambda must be >= 0, got {lambda}")));
    }
    let s = graph::sinr(tape, inst, h, beam)?;
    let w = graph::wsr_from_sinr(tape, h, s)?;
    let g = graph::constraints_from_sinr(tape, inst, h, beam, s)?;
    let pen = violation_energy(tape, g);
    let pen = tape.scale(pen, lambda);
    let neg = tape.neg(w);
    tape.add(neg, pen)
}

/// Numeric `phi` straight from the problem module.
pub fn phi_value(inst: &ProblemInstance, v: &Beamformer) -> f64 {
    problem::constraint_values(inst, v).iter().map(|g| g.max(0.0).powi(2)).sum()
}

/// `phi` and its closed-form gradient with respect to the beamformer planes,
/// built from tape ops so that the gradient itself is differentiable.
///
/// With `S_k`, `D_k` the signal and interference-plus-noise of user `k` and
/// `c_k = -2 relu(g_k) / gamma_k`, the sensitivity to `|G_kj|^2` is
/// `M_kj = c_k (1/D_k if j = k else -S_k / D_k^2)`; chaining through
/// `G = H W^T` gives the planes below. The power term adds
/// `4 relu(g_0) W / p`.
pub fn phi_and_grad_nodes(
    tape: &mut Tape,
    inst: &ProblemInstance,
    h: &InstanceNodes,
    beam: BeamNodes,
) -> Result<(NodeId, BeamNodes)> {
    let k = inst.k();
    let p = inst.p_budget();
    let parts = graph::sinr_parts(tape, inst, h, beam)?;
    let inv_g = tape.reshape(h.inv_gamma, &[k, 1])?;
    let ratio = tape.mul(parts.sinr, inv_g)?;
    let neg = tape.neg(ratio);
    let gk = tape.offset(neg, 1.0);
    let rk = tape.relu(gk);
    let pw = graph::power(tape, beam)?;
    let g0 = tape.offset(pw, -p);
    let g0 = tape.scale(g0, 1.0 / p);
    let r0 = tape.relu(g0);

    let sq_k = tape.square(rk);
    let sq_k = tape.sum(sq_k);
    let sq_0 = tape.square(r0);
    let phi = tape.add(sq_0, sq_k)?;

    let ck = tape.mul(rk, inv_g)?;
    let ck = tape.scale(ck, -2.0);
    let own = tape.div(h.eye, parts.denom)?;
    let d2 = tape.square(parts.denom);
    let cross = tape.div(parts.signal, d2)?;
    let cross = tape.mul(h.off_diag, cross)?;
    let m = tape.sub(own, cross)?;
    let m = tape.mul(m, ck)?;
    let a = tape.mul(m, parts.g_re)?;
    let a = tape.scale(a, 2.0);
    let b = tape.mul(m, parts.g_im)?;
    let b = tape.scale(b, 2.0);
    let at = tape.transpose(a)?;
    let bt = tape.transpose(b)?;
    let t1 = tape.matmul(at, h.h_re)?;
    let t2 = tape.matmul(bt, h.h_im)?;
    let d_re = tape.add(t1, t2)?;
    let t3 = tape.matmul(bt, h.h_re)?;
    let t4 = tape.matmul(at, h.h_im)?;
    let d_im = tape.sub(t3, t4)?;

    let coef = tape.scale(r0, 4.0 / p);
    let pr = tape.mul(beam.re, coef)?;
    let pi = tape.mul(beam.im, coef)?;
    let grad = BeamNodes { re: tape.add(d_re, pr)?, im: tape.add(d_im, pi)? };
    Ok((phi, grad))
}

/// Smooth violation energy over a flat point; lets the correction loop run on
/// any constraint set.
pub trait Correctable {
    fn phi(&self, x: &[f64]) -> f64;
    fn phi_and_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>)>;
}

/// The beamforming constraint set over raw vectors.
pub struct BeamConstraints<'a> {
    pub inst: &'a ProblemInstance,
}

impl Correctable for BeamConstraints<'_> {
    fn phi(&self, x: &[f64]) -> f64 {
        let v = Beamformer::from_raw(x, self.inst.n(), self.inst.k()).expect("raw length checked by caller");
        phi_value(self.inst, &v)
    }

    fn phi_and_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let mut tape = Tape::new();
        let h = InstanceNodes::new(&mut tape, self.inst);
        let raw = tape.constant(Tensor::vector(x.to_vec()));
        let beam = graph::split_raw(&mut tape, raw, self.inst.n(), self.inst.k())?;
        let (phi, grad) = phi_and_grad_nodes(&mut tape, self.inst, &h, beam)?;
        let mut g = tape.value(grad.re).data().to_vec();
        g.extend_from_slice(tape.value(grad.im).data());
        Ok((tape.scalar(phi), g))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dc3Config {
    /// Initial step of each backtracking line search.
    pub eta: f64,
    pub t_train: usize,
    pub t_test: usize,
    pub phi_tol: f64,
}

impl Default for Dc3Config {
    fn default() -> Self {
        Self { eta: 0.05, t_train: 10, t_test: 200, phi_tol: 1e-14 }
    }
}

impl Dc3Config {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0) || !self.eta.is_finite() {
            return Err(Error::InvalidParam(format!("dc3 eta must be positive, got {}", self.eta)));
        }
        if self.t_train > self.t_test {
            return Err(Error::InvalidParam(format!("dc3 t_train ({}) must not exceed t_test ({})", self.t_train, self.t_test)));
        }
        if !(self.phi_tol > 0.0) {
            return Err(Error::InvalidParam(format!("dc3 phi_tol must be positive, got {}", self.phi_tol)));
        }
        Ok(())
    }
}

/// One correction step's accepted size, or `None` when no step decreases
/// `phi` (stationary or already feasible).
fn armijo_step<C: Correctable + ?Sized>(obj: &C, x: &[f64], phi: f64, grad: &[f64], eta0: f64) -> Result<Option<f64>> {
    let gg: f64 = grad.iter().map(|g| g * g).sum();
    if gg == 0.0 {
        return Ok(None);
    }
    let mut eta = eta0;
    let mut cand = vec![0.0; x.len()];
    for _ in 0..=MAX_HALVINGS {
        for ((c, xi), gi) in cand.iter_mut().zip(x).zip(grad) {
            *c = xi - eta * gi;
        }
        let p = obj.phi(&cand);
        if !p.is_finite() {
            return Err(Error::NonFinite(format!("correction phi = {p} at step size {eta:.3e}")));
        }
        if p <= phi - ARMIJO_C * eta * gg {
            return Ok(Some(eta));
        }
        eta *= 0.5;
    }
    Ok(None)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CorrectionTrace {
    /// `phi` before the first step and after each accepted step.
    pub phi: Vec<f64>,
    pub steps: Vec<f64>,
}

/// Inference-mode correction: at most `t_test` steps, stopping once
/// `phi < phi_tol`.
pub fn dc3_correct_values<C: Correctable + ?Sized>(obj: &C, x: &[f64], cfg: &Dc3Config) -> Result<(Vec<f64>, CorrectionTrace)> {
    cfg.validate()?;
    let mut x = x.to_vec();
    let mut trace = CorrectionTrace::default();
    for _ in 0..=cfg.t_test {
        let (phi, grad) = obj.phi_and_grad(&x)?;
        if !phi.is_finite() {
            return Err(Error::NonFinite(format!("correction phi = {phi}")));
        }
        trace.phi.push(phi);
        if phi < cfg.phi_tol || trace.steps.len() == cfg.t_test {
            break;
        }
        let Some(eta) = armijo_step(obj, &x, phi, &grad, cfg.eta)? else { break };
        for (xi, gi) in x.iter_mut().zip(&grad) {
            *xi -= eta * gi;
        }
        trace.steps.push(eta);
    }
    Ok((x, trace))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Test,
}

/// Correction of a beamformer. Train mode unrolls exactly `t_train` steps on
/// the tape so the loss differentiates through every step; line-search step
/// sizes enter as constants. Test mode runs [`dc3_correct_values`].
pub fn dc3_correct(
    tape: &mut Tape,
    inst: &ProblemInstance,
    h: &InstanceNodes,
    beam: BeamNodes,
    cfg: &Dc3Config,
    mode: Mode,
) -> Result<BeamNodes> {
    cfg.validate()?;
    let obj = BeamConstraints { inst };
    match mode {
        Mode::Test => {
            let x = raw_of(tape, beam);
            let (x, _) = dc3_correct_values(&obj, &x, cfg)?;
            let raw = tape.constant(Tensor::vector(x));
            graph::split_raw(tape, raw, inst.n(), inst.k())
        }
        Mode::Train => {
            let mut beam = beam;
            for _ in 0..cfg.t_train {
                let (phi, grad) = phi_and_grad_nodes(tape, inst, h, beam)?;
                let phi_v = tape.scalar(phi);
                if !phi_v.is_finite() {
                    return Err(Error::NonFinite(format!("correction phi = {phi_v}")));
                }
                let x = raw_of(tape, beam);
                let mut g = tape.value(grad.re).data().to_vec();
                g.extend_from_slice(tape.value(grad.im).data());
                let Some(eta) = armijo_step(&obj, &x, phi_v, &g, cfg.eta)? else { break };
                let sr = tape.scale(grad.re, eta);
                let si = tape.scale(grad.im, eta);
                beam = BeamNodes { re: tape.sub(beam.re, sr)?, im: tape.sub(beam.im, si)? };
            }
            Ok(beam)
        }
    }
}

fn raw_of(tape: &Tape, beam: BeamNodes) -> Vec<f64> {
    let mut x = tape.value(beam.re).data().to_vec();
    x.extend_from_slice(tape.value(beam.im).data());
    x
}

/// Interior point and ray parameters for the HoP map of one instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HopContext {
    /// Raw layout, `max g(x0) <= -delta`.
    pub x0: Vec<f64>,
    pub delta: f64,
    pub bisection_iters: usize,
    pub t_cap: f64,
}

fn too_tight(detail: impl std::fmt::Display) -> Error {
    Error::Infeasible(format!("instance too tight for HoP margin: {detail}"))
}

/// Builds the interior point from the repaired WMMSE baseline.
pub fn hop_build_context(inst: &ProblemInstance, delta: f64) -> Result<HopContext> {
    let base = wmmse::baseline(inst)?;
    if !base.feasible {
        return Err(too_tight("baseline solve found no feasible point"));
    }
    hop_context_from(inst, delta, &base.beamformer)
}

/// Interior point from a known feasible beamformer. Scaling by
/// `sqrt(1 - delta)` buys the power margin; if that leaves some SINR within
/// `delta` of its threshold the point is re-repaired against
/// `gamma (1 + delta) / (1 - delta)`, which survives the same scaling.
pub fn hop_context_from(inst: &ProblemInstance, delta: f64, feasible: &Beamformer) -> Result<HopContext> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidParam(format!("HoP margin must lie in (0, 1), got {delta}")));
    }
    // A hair past sqrt(1 - delta) so the power margin survives rounding.
    let shrink = (1.0 - delta).sqrt() * (1.0 - 1e-12);
    let margin_ok = |v: &Beamformer| problem::violation_report(inst, v, FEASIBILITY_TOL).worst <= -delta;
    let mut x0 = feasible.scaled(shrink);
    if !margin_ok(&x0) {
        let factor = (1.0 + delta) / (1.0 - delta) * (1.0 + 2.0 * FEASIBILITY_TOL);
        let tight = inst.with_gamma(inst.gamma.iter().map(|g| g * factor).collect());
        let (v, ok) = wmmse::qos_repair(&tight, feasible)?;
        if !ok {
            return Err(too_tight(format!("no point meets SINR thresholds scaled by {factor:.4}")));
        }
        x0 = v.scaled(shrink);
        if !margin_ok(&x0) {
            let worst = problem::violation_report(inst, &x0, FEASIBILITY_TOL).worst;
            return Err(too_tight(format!("worst constraint {worst:.3e} after shrinking, need <= {:.3e}", -delta)));
        }
    }
    Ok(HopContext { x0: x0.to_raw(), delta, bisection_iters: DEFAULT_BISECTION_ITERS, t_cap: 4.0 * inst.p_budget().sqrt() })
}

/// Unit vector from `d - 1` hyperspherical angles:
/// `dir_i = cos(theta_i) prod_{j<i} sin(theta_j)`, `dir_d = prod_j sin(theta_j)`.
pub fn hop_direction(tape: &mut Tape, theta: NodeId) -> Result<NodeId> {
    if tape.shape(theta).len() != 1 {
        return Err(Error::shape("hop_direction", &[tape.shape(theta)]));
    }
    let s = tape.sin(theta);
    let prefix = tape.cumprod_exclusive(s);
    let c = tape.cos(theta);
    let one = tape.constant(Tensor::vector(vec![1.0]));
    let tail = tape.concat(&[c, one], 0)?;
    tape.mul(prefix, tail)
}

pub fn hop_direction_values(theta: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(theta.len() + 1);
    let mut prod = 1.0;
    for t in theta {
        out.push(prod * t.cos());
        prod *= t.sin();
    }
    out.push(prod);
    out
}

/// Smallest positive root of `a t^2 + b t + c` given `c < 0`.
fn first_positive_root(a: f64, b: f64, c: f64) -> Option<f64> {
    if a == 0.0 {
        return (b > 0.0).then(|| -c / b);
    }
    let disc = b * b - 4.0 * a * c;
    if disc < 0.0 {
        return None;
    }
    let q = -0.5 * (b + b.signum() * disc.sqrt());
    let q = if b == 0.0 { -0.5 * disc.sqrt() } else { q };
    [q / a, c / q].into_iter().filter(|r| *r > 0.0).min_by(f64::total_cmp)
}

/// Distance from `x0` to the first constraint boundary along unit `dir`,
/// capped at `t_cap`. Along the ray every constraint is a quadratic in `t`
/// (negative at `t = 0`): the power ball directly, and each SINR constraint
/// through `gamma (I_k(t) + sigma^2) - S_k(t)` with linear cross gains.
pub fn hop_tmax(inst: &ProblemInstance, ctx: &HopContext, dir: &[f64]) -> Result<f64> {
    let (n, k) = (inst.n(), inst.k());
    if dir.len() != ctx.x0.len() {
        return Err(Error::Shape { op: "hop_tmax", shapes: vec![vec![dir.len()], vec![ctx.x0.len()]] });
    }
    let p = inst.p_budget();
    let dd: f64 = dir.iter().map(|d| d * d).sum();
    let xd: f64 = ctx.x0.iter().zip(dir).map(|(x, d)| x * d).sum();
    let xx: f64 = ctx.x0.iter().map(|x| x * x).sum();
    if !(xx < p) {
        return Err(Error::Infeasible("ray origin is not interior for the power constraint".into()));
    }
    let mut t = ctx.t_cap;
    if let Some(r) = first_positive_root(dd, 2.0 * xd, xx - p) {
        t = t.min(r);
    }
    let a = inst.cross_gains(&Beamformer::from_raw(&ctx.x0, n, k)?);
    let b = inst.cross_gains(&Beamformer::from_raw(dir, n, k)?);
    for u in 0..k {
        let gm = inst.gamma[u];
        let (mut qa, mut qb, mut qc) = (0.0, 0.0, gm * inst.sigma2());
        for j in 0..k {
            let w = if j == u { -1.0 } else { gm };
            qa += w * b[u][j].norm_sqr();
            qb += w * 2.0 * (a[u][j].conj() * b[u][j]).re;
            qc += w * a[u][j].norm_sqr();
        }
        if !(qc < 0.0) {
            return Err(Error::Infeasible(format!("ray origin is not interior for the SINR constraint of user {u}")));
        }
        if let Some(r) = first_positive_root(qa, qb, qc) {
            t = t.min(r);
        }
    }
    Ok(t)
}

/// Doubling-then-bisection boundary search along the ray; returns the
/// feasible end of the final bracket.
pub fn hop_tmax_bisection(inst: &ProblemInstance, ctx: &HopContext, dir: &[f64]) -> Result<f64> {
    let (n, k) = (inst.n(), inst.k());
    let feasible_at = |t: f64| -> Result<bool> {
        let x: Vec<f64> = ctx.x0.iter().zip(dir).map(|(x, d)| x + t * d).collect();
        let v = Beamformer::from_raw(&x, n, k)?;
        Ok(problem::constraint_values(inst, &v).iter().all(|g| *g <= 0.0))
    };
    let mut lo = 0.0;
    let mut hi = ctx.delta * inst.p_budget().sqrt();
    while feasible_at(hi)? {
        if hi >= ctx.t_cap {
            return Ok(ctx.t_cap);
        }
        lo = hi;
        hi = (2.0 * hi).min(ctx.t_cap);
    }
    for _ in 0..ctx.bisection_iters {
        let mid = 0.5 * (lo + hi);
        if feasible_at(mid)? {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo)
}

/// Angles are offset by `pi/2` so a zero network output points along the
/// last axis, where every angle has a nonzero sensitivity.
pub const ANGLE_OFFSET: f64 = std::f64::consts::FRAC_PI_2;

/// `x0 + sigmoid(m) t_max(dir) dir(theta + pi/2)` from a `[2NK]` raw node
/// holding `2NK - 1` angles then the magnitude logit `m`. `t_max` is a
/// constant of the graph.
pub fn hop_map(tape: &mut Tape, inst: &ProblemInstance, ctx: &HopContext, raw: NodeId) -> Result<BeamNodes> {
    let d = 2 * inst.n() * inst.k();
    let raw = tape.reshape(raw, &[d])?;
    let theta = tape.slice(raw, 0, 0, d - 1)?;
    let theta = tape.offset(theta, ANGLE_OFFSET);
    let m = tape.slice(raw, 0, d - 1, d)?;
    let dir = hop_direction(tape, theta)?;
    let t_max = hop_tmax(inst, ctx, tape.value(dir).data())?;
    let s = tape.sigmoid(m);
    let step = tape.mul(dir, s)?;
    let step = tape.scale(step, t_max);
    let x0 = tape.constant(Tensor::vector(ctx.x0.clone()));
    let x = tape.add(x0, step)?;
    graph::split_raw(tape, x, inst.n(), inst.k())
}

pub fn hop_map_values(inst: &ProblemInstance, ctx: &HopContext, raw: &[f64]) -> Result<Beamformer> {
    let mut tape = Tape::new();
    let r = tape.constant(Tensor::vector(raw.to_vec()));
    let beam = hop_map(&mut tape, inst, ctx, r)?;
    Ok(graph::to_beamformer(&tape, beam))
}

/// Ray map for generators that emit a beamformer rather than angles: the
/// offset `V - x0` supplies the direction and its length `r` the magnitude
/// `t_max tanh(r / t_max)`, which is close to the identity well inside the
/// region and saturates at the boundary.
pub fn hop_radial(tape: &mut Tape, inst: &ProblemInstance, ctx: &HopContext, beam: BeamNodes) -> Result<BeamNodes> {
    let raw = graph::join_raw(tape, beam)?;
    let x0 = tape.constant(Tensor::vector(ctx.x0.clone()));
    let off = tape.sub(raw, x0)?;
    let sq = tape.square(off);
    let sq = tape.sum(sq);
    let sq = tape.offset(sq, 1e-300);
    let r = tape.sqrt(sq)?;
    let dir = tape.div(off, r)?;
    let t_max = hop_tmax(inst, ctx, tape.value(dir).data())?;
    let mag = tape.scale(r, 1.0 / t_max);
    let mag = tape.tanh(mag);
    let mag = tape.scale(mag, t_max);
    let step = tape.mul(dir, mag)?;
    let x = tape.add(x0, step)?;
    graph::split_raw(tape, x, inst.n(), inst.k())
}
