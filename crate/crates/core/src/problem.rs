//! QoS-aware weighted-sum-rate beamforming: objective, SINR and constraints.
//!
//! Conventions used throughout the crate:
//!
//! * the channel matrix `H` is `K x N` with row `k` holding `h_k^H`, so the
//!   cross gain `h_k^H v_j` is the plain product `sum_n H[k,n] v_j[n]`;
//! * a [`Beamformer`] stores `V` as `N x K` (column `k` is `v_k`);
//! * the flat "raw" layout is `[Re V (column-major by user), Im V (same)]`,
//!   i.e. `raw[k*N + n] = Re V[n,k]` and `raw[N*K + k*N + n] = Im V[n,k]`.
//!   Reshaping each half to `K x N` gives the user-major matrices the tape
//!   functions in [`graph`] operate on.
//!
//! Constraints are normalized and written as `g <= 0`:
//! `g_0 = (sum_k |v_k|^2 - P)/P` and `g_k = (gamma_k - SINR_k)/gamma_k`.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::channel::ChannelSample;
use crate::error::{Error, Result};

/// Default tolerance on normalized constraint values.
pub const FEASIBILITY_TOL: f64 = 1e-6;

/// One fully specified optimization problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemInstance {
    pub channel: ChannelSample,
    pub alpha: Vec<f64>,
    pub gamma: Vec<f64>,
    pub p_max: f64,
    pub p_circuit: f64,
}

impl ProblemInstance {
    pub fn new(channel: ChannelSample, alpha: Vec<f64>, gamma: Vec<f64>, p_max: f64, p_circuit: f64) -> Result<Self> {
        let k = channel.k;
        if alpha.len() != k || gamma.len() != k {
            return Err(Error::InvalidParam(format!(
                "alpha/gamma must have length K = {k}, got {}/{}",
                alpha.len(),
                gamma.len()
            )));
        }
        if alpha.iter().chain(&gamma).any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(Error::InvalidParam("alpha and gamma must be strictly positive".into()));
        }
        if !(p_circuit > 0.0 && p_max > p_circuit) {
            return Err(Error::InvalidParam(format!("need p_max > p_circuit > 0, got p_max = {p_max}, p_circuit = {p_circuit}")));
        }
        Ok(Self { channel, alpha, gamma, p_max, p_circuit })
    }

    pub fn k(&self) -> usize {
        self.channel.k
    }

    pub fn n(&self) -> usize {
        self.channel.n
    }

    pub fn sigma2(&self) -> f64 {
        self.channel.sigma2
    }

    /// Transmit power available to the precoders, `p_max - p_circuit`.
    pub fn p_budget(&self) -> f64 {
        self.p_max - self.p_circuit
    }

    /// Copy with different SINR thresholds.
    pub fn with_gamma(&self, gamma: Vec<f64>) -> Self {
        Self { gamma, ..self.clone() }
    }

    /// Copy with different user weights.
    pub fn with_alpha(&self, alpha: Vec<f64>) -> Self {
        Self { alpha, ..self.clone() }
    }

    /// `H[k, n]` as a complex number.
    pub fn h_row(&self, k: usize, n: usize) -> Complex64 {
        let idx = k * self.n() + n;
        Complex64::new(self.channel.h_re[idx], self.channel.h_im[idx])
    }

    /// Cross-gain matrix `G[k][j] = h_k^H v_j`.
    pub fn cross_gains(&self, v: &Beamformer) -> Vec<Vec<Complex64>> {
        let (k_users, n) = (self.k(), self.n());
        (0..k_users).map(|k| (0..k_users).map(|j| (0..n).map(|a| self.h_row(k, a) * v.get(a, j)).sum()).collect()).collect()
    }
}

/// `N x K` complex precoding matrix, stored as real and imaginary planes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Beamformer {
    pub n: usize,
    pub k: usize,
    /// Row-major `N x K`.
    pub v_re: Vec<f64>,
    /// Row-major `N x K`.
    pub v_im: Vec<f64>,
}

impl Beamformer {
    pub fn zeros(n: usize, k: usize) -> Self {
        Self { n, k, v_re: vec![0.0; n * k], v_im: vec![0.0; n * k] }
    }

    pub fn get(&self, n: usize, k: usize) -> Complex64 {
        Complex64::new(self.v_re[n * self.k + k], self.v_im[n * self.k + k])
    }

    pub fn set(&mut self, n: usize, k: usize, v: Complex64) {
        self.v_re[n * self.k + k] = v.re;
        self.v_im[n * self.k + k] = v.im;
    }

    /// Precoder of user `k`.
    pub fn column(&self, k: usize) -> Vec<Complex64> {
        (0..self.n).map(|a| self.get(a, k)).collect()
    }

    pub fn power(&self) -> f64 {
        self.v_re.iter().chain(&self.v_im).map(|v| v * v).sum()
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            n: self.n,
            k: self.k,
            v_re: self.v_re.iter().map(|v| v * c).collect(),
            v_im: self.v_im.iter().map(|v| v * c).collect(),
        }
    }

    /// Inverse of [`Beamformer::to_raw`].
    pub fn from_raw(raw: &[f64], n: usize, k: usize) -> Result<Self> {
        if raw.len() != 2 * n * k {
            return Err(Error::Shape { op: "raw_to_beamformer", shapes: vec![vec![raw.len()], vec![2 * n * k]] });
        }
        let mut bf = Self::zeros(n, k);
        let nk = n * k;
        for u in 0..k {
            for a in 0..n {
                bf.v_re[a * k + u] = raw[u * n + a];
                bf.v_im[a * k + u] = raw[nk + u * n + a];
            }
        }
        Ok(bf)
    }

    /// Flat layout: real plane then imaginary plane, each column-major by user.
    pub fn to_raw(&self) -> Vec<f64> {
        let (n, k) = (self.n, self.k);
        let mut raw = vec![0.0; 2 * n * k];
        for u in 0..k {
            for a in 0..n {
                raw[u * n + a] = self.v_re[a * k + u];
                raw[n * k + u * n + a] = self.v_im[a * k + u];
            }
        }
        raw
    }

    fn check(&self, inst: &ProblemInstance) {
        assert!(
            self.n == inst.n() && self.k == inst.k(),
            "beamformer is {}x{}, instance expects {}x{}",
            self.n,
            self.k,
            inst.n(),
            inst.k()
        );
    }
}

/// Per-user SINR.
pub fn sinr(inst: &ProblemInstance, v: &Beamformer) -> Vec<f64> {
    v.check(inst);
    let g = inst.cross_gains(v);
    (0..inst.k())
        .map(|k| {
            let signal = g[k][k].norm_sqr();
            let interference: f64 = (0..inst.k()).filter(|&j| j != k).map(|j| g[k][j].norm_sqr()).sum();
            signal / (interference + inst.sigma2())
        })
        .collect()
}

/// Weighted sum rate in bits/s/Hz.
pub fn wsr(inst: &ProblemInstance, v: &Beamformer) -> f64 {
    wsr_from_sinr(&inst.alpha, &sinr(inst, v))
}

pub fn wsr_from_sinr(alpha: &[f64], sinr: &[f64]) -> f64 {
    alpha.iter().zip(sinr).map(|(a, s)| a * (1.0 + s).log2()).sum()
}

/// The `K + 1` normalized constraint values (power first).
pub fn constraint_values(inst: &ProblemInstance, v: &Beamformer) -> Vec<f64> {
    let p = inst.p_budget();
    let mut g = Vec::with_capacity(inst.k() + 1);
    g.push((v.power() - p) / p);
    g.extend(sinr(inst, v).iter().zip(&inst.gamma).map(|(s, gm)| (gm - s) / gm));
    g
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViolationReport {
    pub g: Vec<f64>,
    pub worst: f64,
    pub feasible: bool,
    pub tol: f64,
}

/// Feasible iff the worst normalized constraint is `<= tol` (closed).
pub fn violation_report(inst: &ProblemInstance, v: &Beamformer, tol: f64) -> ViolationReport {
    report_from_values(constraint_values(inst, v), tol)
}

pub fn report_from_values(g: Vec<f64>, tol: f64) -> ViolationReport {
    let worst = g.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    ViolationReport { feasible: worst <= tol, worst, g, tol }
}

/// Tape versions of the problem functions, operating on user-major `K x N`
/// real/imaginary nodes.
pub mod graph {
    use super::ProblemInstance;
    use crate::autodiff::{NodeId, Tape, Tensor};
    use crate::error::Result;

    /// Beamformer planes on a tape, each `K x N` (row `k` is `v_k^T`).
    #[derive(Debug, Clone, Copy)]
    pub struct BeamNodes {
        pub re: NodeId,
        pub im: NodeId,
    }

    /// Channel constants of one instance loaded on a tape.
    #[derive(Debug, Clone, Copy)]
    pub struct InstanceNodes {
        pub h_re: NodeId,
        pub h_im: NodeId,
        /// `K x K` identity.
        pub eye: NodeId,
        /// `K x K` ones minus identity.
        pub off_diag: NodeId,
        /// `1 / gamma`, shape `[K]`.
        pub inv_gamma: NodeId,
        /// `alpha / ln 2`, shape `[K]`.
        pub alpha_log2: NodeId,
    }

    impl InstanceNodes {
        pub fn new(tape: &mut Tape, inst: &ProblemInstance) -> Self {
            let (k, n) = (inst.k(), inst.n());
            let h_re = tape.constant(Tensor::matrix(k, n, inst.channel.h_re.clone()).expect("K x N"));
            let h_im = tape.constant(Tensor::matrix(k, n, inst.channel.h_im.clone()).expect("K x N"));
            let eye_t = Tensor::identity(k);
            let off = eye_t.map(|v| 1.0 - v);
            let eye = tape.constant(eye_t);
            let off_diag = tape.constant(off);
            let inv_gamma = tape.constant(Tensor::vector(inst.gamma.iter().map(|g| 1.0 / g).collect()));
            let alpha_log2 = tape.constant(Tensor::vector(inst.alpha.iter().map(|a| a / std::f64::consts::LN_2).collect()));
            Self { h_re, h_im, eye, off_diag, inv_gamma, alpha_log2 }
        }
    }

    /// Splits a flat `[2NK]` raw node into user-major planes.
    pub fn split_raw(tape: &mut Tape, raw: NodeId, n: usize, k: usize) -> Result<BeamNodes> {
        let flat = tape.reshape(raw, &[2 * n * k])?;
        let re = tape.slice(flat, 0, 0, n * k)?;
        let im = tape.slice(flat, 0, n * k, 2 * n * k)?;
        Ok(BeamNodes { re: tape.reshape(re, &[k, n])?, im: tape.reshape(im, &[k, n])? })
    }

    /// Inverse of [`split_raw`].
    pub fn join_raw(tape: &mut Tape, beam: BeamNodes) -> Result<NodeId> {
        let len = tape.value(beam.re).numel();
        let re = tape.reshape(beam.re, &[len])?;
        let im = tape.reshape(beam.im, &[len])?;
        tape.concat(&[re, im], 0)
    }

    /// `K x K` planes of `G[k,j] = h_k^H v_j`.
    pub fn cross_gains(tape: &mut Tape, h: &InstanceNodes, beam: BeamNodes) -> Result<(NodeId, NodeId)> {
        let wr_t = tape.transpose(beam.re)?;
        let wi_t = tape.transpose(beam.im)?;
        let a = tape.matmul(h.h_re, wr_t)?;
        let b = tape.matmul(h.h_im, wi_t)?;
        let g_re = tape.sub(a, b)?;
        let c = tape.matmul(h.h_re, wi_t)?;
        let d = tape.matmul(h.h_im, wr_t)?;
        let g_im = tape.add(c, d)?;
        Ok((g_re, g_im))
    }

    /// Signal, desired-plus-interference-plus-noise total, and SINR terms.
    #[derive(Debug, Clone, Copy)]
    pub struct SinrParts {
        pub g_re: NodeId,
        pub g_im: NodeId,
        /// `|G|^2`, `K x K`.
        pub gain: NodeId,
        /// `|h_k^H v_k|^2`, `K x 1`.
        pub signal: NodeId,
        /// `sum_j |h_k^H v_j|^2 + sigma^2`, `K x 1`.
        pub total: NodeId,
        /// `total - signal`, `K x 1`.
        pub denom: NodeId,
        /// `K x 1`.
        pub sinr: NodeId,
    }

    pub fn sinr_parts(tape: &mut Tape, inst: &ProblemInstance, h: &InstanceNodes, beam: BeamNodes) -> Result<SinrParts> {
        let (g_re, g_im) = cross_gains(tape, h, beam)?;
        let a = tape.square(g_re);
        let b = tape.square(g_im);
        let gain = tape.add(a, b)?;
        let diag = tape.mul(gain, h.eye)?;
        let signal = tape.sum_axis(diag, 1)?;
        let rows = tape.sum_axis(gain, 1)?;
        let total = tape.offset(rows, inst.sigma2());
        let denom = tape.sub(total, signal)?;
        let sinr = tape.div(signal, denom)?;
        Ok(SinrParts { g_re, g_im, gain, signal, total, denom, sinr })
    }

    /// SINR as a `[K]` node.
    pub fn sinr(tape: &mut Tape, inst: &ProblemInstance, h: &InstanceNodes, beam: BeamNodes) -> Result<NodeId> {
        let parts = sinr_parts(tape, inst, h, beam)?;
        tape.reshape(parts.sinr, &[inst.k()])
    }

    pub fn wsr_from_sinr(tape: &mut Tape, h: &InstanceNodes, sinr: NodeId) -> Result<NodeId> {
        let one_plus = tape.offset(sinr, 1.0);
        let logs = tape.log(one_plus)?;
        let weighted = tape.mul(logs, h.alpha_log2)?;
        Ok(tape.sum(weighted))
    }

    pub fn wsr(tape: &mut Tape, inst: &ProblemInstance, h: &InstanceNodes, beam: BeamNodes) -> Result<NodeId> {
        let s = sinr(tape, inst, h, beam)?;
        wsr_from_sinr(tape, h, s)
    }

    pub fn power(tape: &mut Tape, beam: BeamNodes) -> Result<NodeId> {
        let a = tape.square(beam.re);
        let a = tape.sum(a);
        let b = tape.square(beam.im);
        let b = tape.sum(b);
        tape.add(a, b)
    }

    pub fn constraints_from_sinr(
        tape: &mut Tape,
        inst: &ProblemInstance,
        h: &InstanceNodes,
        beam: BeamNodes,
        sinr: NodeId,
    ) -> Result<NodeId> {
        let p = inst.p_budget();
        let pw = power(tape, beam)?;
        let g0 = tape.offset(pw, -p);
        let g0 = tape.scale(g0, 1.0 / p);
        let ratio = tape.mul(sinr, h.inv_gamma)?;
        let neg = tape.neg(ratio);
        let gk = tape.offset(neg, 1.0);
        tape.concat(&[g0, gk], 0)
    }

    /// `[K + 1]` normalized constraint values, power first.
    pub fn constraint_values(tape: &mut Tape, inst: &ProblemInstance, h: &InstanceNodes, beam: BeamNodes) -> Result<NodeId> {
        let s = sinr(tape, inst, h, beam)?;
        constraints_from_sinr(tape, inst, h, beam, s)
    }

    /// Reads user-major planes back into a [`super::Beamformer`].
    pub fn to_beamformer(tape: &Tape, beam: BeamNodes) -> super::Beamformer {
        let (k, n) = (tape.shape(beam.re)[0], tape.shape(beam.re)[1]);
        let mut raw = Vec::with_capacity(2 * n * k);
        raw.extend_from_slice(tape.value(beam.re).data());
        raw.extend_from_slice(tape.value(beam.im).data());
        super::Beamformer::from_raw(&raw, n, k).expect("consistent planes")
    }
}
