//! Solution generators: a fully connected network over instance features and
//! a deep-unfolded WMMSE with per-layer learnable multiplier and damping.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape, Tensor};
use crate::error::{Error, Result};
use crate::problem::graph::{self, BeamNodes, InstanceNodes};
use crate::problem::{Beamformer, ProblemInstance};
use crate::wmmse;

/// `softplus^-1(1)`: the raw multiplier offset whose effective scale is 1.
pub const DU_MU_INIT: f64 = 0.541_324_854_612_918_1;
/// `sigmoid(3) ~ 0.95`.
pub const DU_BETA_INIT: f64 = 3.0;
pub const DEFAULT_DU_LAYERS: usize = 5;
pub const DEFAULT_HIDDEN: [usize; 2] = [512, 512];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Mlp,
    Du,
}

impl Arch {
    pub fn name(self) -> &'static str {
        match self {
            Arch::Mlp => "mlp",
            Arch::Du => "du",
        }
    }
}

impl std::str::FromStr for Arch {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlp" => Ok(Arch::Mlp),
            "du" => Ok(Arch::Du),
            _ => Err(Error::InvalidParam(format!("unknown arch '{s}' (expected mlp or du)"))),
        }
    }
}

pub fn feature_len(k: usize, n: usize) -> usize {
    2 * k * n + 2 * k + 2
}

/// Feature vector, in order: `H_re / rms` (row-major `K x N`), `H_im / rms`,
/// `log10 sigma^2`, `gamma` (K), `alpha` (K), `log10 p_budget`, where `rms`
/// is the root-mean-square channel entry magnitude.
pub fn featurize(inst: &ProblemInstance) -> Vec<f64> {
    let ch = &inst.channel;
    let kn = (ch.k * ch.n) as f64;
    let ms: f64 = ch.h_re.iter().chain(&ch.h_im).map(|x| x * x).sum::<f64>() / kn;
    let rms = if ms > 0.0 { ms.sqrt() } else { 1.0 };
    let mut f = Vec::with_capacity(feature_len(ch.k, ch.n));
    f.extend(ch.h_re.iter().map(|x| x / rms));
    f.extend(ch.h_im.iter().map(|x| x / rms));
    f.push(inst.sigma2().log10());
    f.extend_from_slice(&inst.gamma);
    f.extend_from_slice(&inst.alpha);
    f.push(inst.p_budget().log10());
    f
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "arch", rename_all = "lowercase")]
pub enum ModelSpec {
    /// Layer widths including input and output.
    Mlp {
        widths: Vec<usize>,
    },
    Du {
        layers: usize,
    },
}

impl ModelSpec {
    pub fn arch(&self) -> Arch {
        match self {
            ModelSpec::Mlp { .. } => Arch::Mlp,
            ModelSpec::Du { .. } => Arch::Du,
        }
    }

    /// Default architecture for a `K`-user, `N`-antenna problem.
    pub fn default_for(arch: Arch, k: usize, n: usize) -> Self {
        match arch {
            Arch::Mlp => {
                let mut widths = vec![feature_len(k, n)];
                widths.extend_from_slice(&DEFAULT_HIDDEN);
                widths.push(2 * n * k);
                ModelSpec::Mlp { widths }
            }
            Arch::Du => ModelSpec::Du { layers: DEFAULT_DU_LAYERS },
        }
    }

    /// Rejects a spec whose input/output sizes do not fit a `K x N` problem.
    pub fn check_dims(&self, k: usize, n: usize) -> Result<()> {
        if let ModelSpec::Mlp { widths } = self {
            let (first, last) = (widths[0], *widths.last().expect("validated"));
            if first != feature_len(k, n) || last != 2 * n * k {
                return Err(Error::InvalidParam(format!(
                    "mlp widths {widths:?} do not fit K={k}, N={n} (need input {} and output {})",
                    feature_len(k, n),
                    2 * n * k
                )));
            }
        }
        Ok(())
    }
}

/// Glorot-uniform weights (`[in, out]`, applied as `x W`) and zero biases
/// (`[1, out]`), stored `W1, b1, W2, b2, ...`.
pub fn mlp_init(widths: &[usize], seed: u64) -> Result<Vec<Tensor>> {
    if widths.len() < 2 {
        return Err(Error::InvalidParam(format!("mlp needs at least input and output widths, got {widths:?}")));
    }
    if let Some(i) = widths.iter().position(|w| *w == 0) {
        return Err(Error::InvalidParam(format!("layer {i} has zero width")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Vec::with_capacity(2 * (widths.len() - 1));
    for pair in widths.windows(2) {
        let (fi, fo) = (pair[0], pair[1]);
        let a = (6.0 / (fi + fo) as f64).sqrt();
        let w: Vec<f64> = (0..fi * fo).map(|_| rng.random_range(-a..a)).collect();
        params.push(Tensor::matrix(fi, fo, w)?);
        params.push(Tensor::zeros(&[1, fo]));
    }
    Ok(params)
}

/// Batched forward: `x` is `[B, in]`, result `[B, out]`. ReLU between
/// layers, linear output.
pub fn mlp_forward(tape: &mut Tape, params: &[NodeId], x: NodeId) -> Result<NodeId> {
    if params.is_empty() || !params.len().is_multiple_of(2) {
        return Err(Error::InvalidParam(format!("mlp expects weight/bias pairs, got {} tensors", params.len())));
    }
    let layers = params.len() / 2;
    let mut h = x;
    for l in 0..layers {
        let z = tape.matmul(h, params[2 * l])?;
        h = tape.add(z, params[2 * l + 1])?;
        if l + 1 < layers {
            h = tape.relu(h);
        }
    }
    Ok(h)
}

/// Raw `[2NK]` vector to beamformer; see [`Beamformer::to_raw`] for the layout.
pub fn raw_to_beamformer(raw: &[f64], n: usize, k: usize) -> Result<Beamformer> {
    Beamformer::from_raw(raw, n, k)
}

/// Unfolded-WMMSE parameters: raw multiplier offsets then raw damping,
/// each `[L]`.
pub fn du_init(layers: usize) -> Result<Vec<Tensor>> {
    if layers == 0 {
        return Err(Error::InvalidParam("deep unfolding needs at least one layer".into()));
    }
    Ok(vec![Tensor::vector(vec![DU_MU_INIT; layers]), Tensor::vector(vec![DU_BETA_INIT; layers])])
}

/// Per-instance constants of the unfolded solve in real form.
struct DuConstants {
    /// `2N x K`, column `j` = real form of `h_j`.
    x: NodeId,
    xt: NodeId,
    /// `2N x K`, column `j` = real form of `i h_j`.
    y: NodeId,
    yt: NodeId,
    eye2n: NodeId,
    alpha: NodeId,
}

impl DuConstants {
    fn new(tape: &mut Tape, inst: &ProblemInstance) -> Result<Self> {
        let (k, n) = (inst.k(), inst.n());
        let (hr, hi) = (&inst.channel.h_re, &inst.channel.h_im);
        let mut x = vec![0.0; 2 * n * k];
        let mut y = vec![0.0; 2 * n * k];
        for j in 0..k {
            for a in 0..n {
                // h_j = conj(H[j, :])
                x[a * k + j] = hr[j * n + a];
                x[(n + a) * k + j] = -hi[j * n + a];
                y[a * k + j] = hi[j * n + a];
                y[(n + a) * k + j] = hr[j * n + a];
            }
        }
        let xm = Tensor::matrix(2 * n, k, x)?;
        let ym = Tensor::matrix(2 * n, k, y)?;
        let x = tape.constant(xm);
        let y = tape.constant(ym);
        let xt = tape.transpose(x)?;
        let yt = tape.transpose(y)?;
        let eye2n = tape.constant(Tensor::identity(2 * n));
        let alpha = tape.constant(Tensor::matrix(k, 1, inst.alpha.clone())?);
        Ok(Self { x, xt, y, yt, eye2n, alpha })
    }
}

/// Unrolled WMMSE on the tape. `params` are the `[L]` raw multiplier and
/// damping nodes. Layer `t` computes the closed-form receivers and weights,
/// solves the regularized precoder system with
/// `mu_t = softplus(mu_raw_t) * sigma^2 * sum_j alpha_j w_j |u_j|^2 / p_budget`
/// (the multiplier a WMMSE fixed point at full power satisfies, so the raw
/// parameter learns a per-layer correction), and damps
/// `V_t = (1 - beta_t) V_{t-1} + beta_t V_hat`.
pub fn du_forward(tape: &mut Tape, params: &[NodeId], inst: &ProblemInstance, h: &InstanceNodes) -> Result<BeamNodes> {
    let [mu_raw, beta_raw] = params else {
        return Err(Error::InvalidParam(format!("deep unfolding expects 2 parameter tensors, got {}", params.len())));
    };
    let layers = tape.shape(*mu_raw)[0];
    if layers == 0 || tape.shape(*beta_raw) != [layers] {
        return Err(Error::shape("du_forward", &[tape.shape(*mu_raw), tape.shape(*beta_raw)]));
    }
    let (k, n) = (inst.k(), inst.n());
    let c0 = DuConstants::new(tape, inst)?;
    let v0 = wmmse::mrt_init(inst)?.to_raw();
    let v0 = tape.constant(Tensor::vector(v0));
    let mut beam = graph::split_raw(tape, v0, n, k)?;
    let mu_scale = inst.sigma2() / inst.p_budget();

    for t in 0..layers {
        let parts = graph::sinr_parts(tape, inst, h, beam)?;
        // c = alpha w |u|^2 = alpha S / (D T), b = alpha w u = alpha G_kk / D
        let dt = tape.mul(parts.denom, parts.total)?;
        let sd = tape.div(parts.signal, dt)?;
        let c = tape.mul(sd, c0.alpha)?;
        let ad = tape.div(c0.alpha, parts.denom)?;
        let gd_re = tape.mul(parts.g_re, h.eye)?;
        let gd_re = tape.sum_axis(gd_re, 1)?;
        let gd_im = tape.mul(parts.g_im, h.eye)?;
        let gd_im = tape.sum_axis(gd_im, 1)?;
        let b_re = tape.mul(gd_re, ad)?;
        let b_im = tape.mul(gd_im, ad)?;

        let mr = tape.slice(*mu_raw, 0, t, t + 1)?;
        let sp = tape.softplus(mr);
        let csum = tape.sum(c);
        let mu = tape.mul(sp, csum)?;
        let mu = tape.scale(mu, mu_scale);

        let c_row = tape.reshape(c, &[1, k])?;
        let xc = tape.mul(c0.x, c_row)?;
        let a1 = tape.matmul(xc, c0.xt)?;
        let yc = tape.mul(c0.y, c_row)?;
        let a2 = tape.matmul(yc, c0.yt)?;
        let a = tape.add(a1, a2)?;
        let reg = tape.mul(c0.eye2n, mu)?;
        let a = tape.add(a, reg)?;
        let z = tape.solve_spd(a, c0.x)?;
        let zt = tape.transpose(z)?;
        let zr = tape.slice(zt, 1, 0, n)?;
        let zi = tape.slice(zt, 1, n, 2 * n)?;
        let p1 = tape.mul(b_re, zr)?;
        let p2 = tape.mul(b_im, zi)?;
        let vh_re = tape.sub(p1, p2)?;
        let p3 = tape.mul(b_re, zi)?;
        let p4 = tape.mul(b_im, zr)?;
        let vh_im = tape.add(p3, p4)?;

        let br = tape.slice(*beta_raw, 0, t, t + 1)?;
        let beta = tape.sigmoid(br);
        let d_re = tape.sub(vh_re, beam.re)?;
        let d_re = tape.mul(d_re, beta)?;
        let d_im = tape.sub(vh_im, beam.im)?;
        let d_im = tape.mul(d_im, beta)?;
        beam = BeamNodes { re: tape.add(beam.re, d_re)?, im: tape.add(beam.im, d_im)? };
    }
    Ok(beam)
}

/// Value-only convenience wrapper around [`du_forward`].
pub fn du_beamformer(params: &[Tensor], inst: &ProblemInstance) -> Result<Beamformer> {
    let mut tape = Tape::new();
    let nodes: Vec<NodeId> = params.iter().map(|p| tape.constant(p.clone())).collect();
    let h = InstanceNodes::new(&mut tape, inst);
    let beam = du_forward(&mut tape, &nodes, inst, &h)?;
    Ok(graph::to_beamformer(&tape, beam))
}

/// Architecture plus flat parameter tensors in their documented order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub spec: ModelSpec,
    pub params: Vec<Tensor>,
}

impl Model {
    pub fn init(spec: ModelSpec, seed: u64) -> Result<Self> {
        let params = match &spec {
            ModelSpec::Mlp { widths } => mlp_init(widths, seed)?,
            ModelSpec::Du { layers } => du_init(*layers)?,
        };
        Ok(Self { spec, params })
    }

    pub fn arch(&self) -> Arch {
        self.spec.arch()
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    /// Registers every tensor as a trainable leaf.
    pub fn register(&self, tape: &mut Tape) -> Vec<NodeId> {
        self.params.iter().map(|p| tape.param(p.clone())).collect()
    }

    /// Loads the tensors as constants (inference).
    pub fn load_constants(&self, tape: &mut Tape) -> Vec<NodeId> {
        self.params.iter().map(|p| tape.constant(p.clone())).collect()
    }
}

/// Checkpoint file contents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub arch: Arch,
    /// Training configuration the parameters were produced with.
    pub config: serde_json::Value,
    pub seed: u64,
    pub step: u64,
    pub model: Model,
}

impl Checkpoint {
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let s = serde_json::to_string(self)?;
        std::fs::write(path, s)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let s = std::fs::read_to_string(path)?;
        let ck: Checkpoint = serde_json::from_str(&s)?;
        if ck.arch != ck.model.arch() {
            return Err(Error::InvalidParam(format!(
                "checkpoint arch {} disagrees with its parameters ({})",
                ck.arch.name(),
                ck.model.arch().name()
            )));
        }
        Ok(ck)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::generate_channel_seeded;

    fn instance(seed: u64) -> ProblemInstance {
        let ch = generate_channel_seeded(3, 20, 3.0, 10.0, 1.0, seed).unwrap();
        ProblemInstance::new(ch, vec![1.0; 3], vec![1.0; 3], 1.1, 0.1).unwrap()
    }

    #[test]
    fn mu_init_is_unit_softplus() {
        assert!(((DU_MU_INIT.exp()).ln_1p() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn feature_layout() {
        let inst = instance(1);
        let f = featurize(&inst);
        assert_eq!(f.len(), 128);
        assert_eq!(f, featurize(&inst));
        let mut big = inst.clone();
        big.channel.h_re.iter_mut().chain(big.channel.h_im.iter_mut()).for_each(|x| *x *= 10.0);
        for (a, b) in featurize(&big)[..120].iter().zip(&f[..120]) {
            assert!((a - b).abs() <= 1e-15 * b.abs().max(1.0));
        }
        assert_eq!(f[120], inst.sigma2().log10());
        assert_eq!(f[127], 0.0);
    }

    #[test]
    fn mlp_init_contract() {
        let a = mlp_init(&[4, 8, 2], 7).unwrap();
        assert_eq!(a, mlp_init(&[4, 8, 2], 7).unwrap());
        assert_ne!(a, mlp_init(&[4, 8, 2], 8).unwrap());
        assert!(mlp_init(&[4, 0, 2], 7).is_err());
        assert!(mlp_init(&[4], 7).is_err());
        assert_eq!(a[1].data(), &[0.0; 8]);
    }

    #[test]
    fn mlp_zero_params_give_zero() {
        let mut t = Tape::new();
        let p: Vec<NodeId> = mlp_init(&[3, 5, 2], 1).unwrap().into_iter().map(|x| t.constant(Tensor::zeros(x.shape()))).collect();
        let x = t.constant(Tensor::matrix(2, 3, vec![1.0, -2.0, 3.0, 0.5, 0.1, 9.0]).unwrap());
        let y = mlp_forward(&mut t, &p, x).unwrap();
        assert_eq!(t.value(y).data(), &[0.0; 4]);
        let bad = t.constant(Tensor::zeros(&[2, 4]));
        assert!(mlp_forward(&mut t, &p, bad).is_err());
    }

    #[test]
    fn default_specs() {
        let spec = ModelSpec::default_for(Arch::Mlp, 3, 20);
        assert_eq!(spec, ModelSpec::Mlp { widths: vec![128, 512, 512, 120] });
        assert!(spec.check_dims(3, 20).is_ok());
        assert!(spec.check_dims(2, 20).is_err());
        assert!(du_init(0).is_err());
    }

    #[test]
    fn du_zero_damping_is_mrt() {
        let inst = instance(2);
        let params = vec![Tensor::vector(vec![DU_MU_INIT; 3]), Tensor::vector(vec![-800.0; 3])];
        let v = du_beamformer(&params, &inst).unwrap();
        assert_eq!(v, wmmse::mrt_init(&inst).unwrap());
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        let model = Model::init(ModelSpec::Mlp { widths: vec![3, 4, 2] }, 5).unwrap();
        let ck = Checkpoint { arch: Arch::Mlp, config: serde_json::json!({"lr": 1e-3}), seed: 5, step: 10, model };
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
    }
}
