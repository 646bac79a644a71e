//! Nakagami-m MU-MISO channel generation and dataset persistence.
//!
//! Channel gains have unit mean power, so the system SNR is the ratio of
//! the transmit budget to the noise power: `sigma2 = p_budget * 10^(-snr_db/10)`.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::problem::{self, Beamformer, ProblemInstance};
use crate::wmmse;

pub const DATASET_VERSION: u32 = 1;

/// One draw of the `K x N` downlink channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelSample {
    pub k: usize,
    pub n: usize,
    /// Row-major `K x N`; row `k` is `h_k^H`.
    pub h_re: Vec<f64>,
    pub h_im: Vec<f64>,
    pub sigma2: f64,
    pub m: f64,
    pub snr_db: f64,
    pub sample_seed: u64,
}

/// Gamma(shape, scale) by Marsaglia-Tsang; shapes below one are boosted
/// through `G(k) = G(k + 1) * U^(1/k)`.
pub fn sample_gamma<R: Rng + ?Sized>(shape: f64, scale: f64, rng: &mut R) -> Result<f64> {
    if !(shape > 0.0) || !(scale > 0.0) || !shape.is_finite() || !scale.is_finite() {
        return Err(Error::InvalidParam(format!("gamma needs shape, scale > 0 (got {shape}, {scale})")));
    }
    if shape < 1.0 {
        let g = sample_gamma(shape + 1.0, scale, rng)?;
        let u: f64 = rng.random();
        return Ok(g * u.powf(1.0 / shape));
    }
    let d = shape - 1.0 / 3.0;
    let c = 1.0 / (9.0 * d).sqrt();
    loop {
        let x: f64 = rng.sample(StandardNormal);
        let v = 1.0 + c * x;
        if v <= 0.0 {
            continue;
        }
        let v = v * v * v;
        let u: f64 = rng.random();
        let x2 = x * x;
        if u < 1.0 - 0.0331 * x2 * x2 || u.ln() < 0.5 * x2 + d * (1.0 - v + v.ln()) {
            return Ok(d * v * scale);
        }
    }
}

/// Complex fading coefficient with Nakagami-m envelope (`E[r^2] = omega`)
/// and uniform phase.
pub fn sample_nakagami_entry<R: Rng + ?Sized>(m: f64, omega: f64, rng: &mut R) -> Result<(f64, f64)> {
    if !(m >= 0.5) {
        return Err(Error::InvalidParam(format!("Nakagami m must be >= 0.5, got {m}")));
    }
    if !(omega > 0.0) {
        return Err(Error::InvalidParam(format!("Nakagami omega must be > 0, got {omega}")));
    }
    let r = sample_gamma(m, omega / m, rng)?.sqrt();
    let phase = 2.0 * PI * rng.random::<f64>();
    Ok((r * phase.cos(), r * phase.sin()))
}

pub fn noise_power(p_budget: f64, snr_db: f64) -> f64 {
    p_budget * 10f64.powf(-snr_db / 10.0)
}

pub fn generate_channel<R: Rng + ?Sized>(
    k: usize,
    n: usize,
    m: f64,
    snr_db: f64,
    p_budget: f64,
    rng: &mut R,
) -> Result<ChannelSample> {
    if k == 0 || n == 0 {
        return Err(Error::InvalidParam(format!("K and N must be >= 1, got {k}, {n}")));
    }
    if !(p_budget > 0.0) {
        return Err(Error::InvalidParam(format!("p_budget must be > 0, got {p_budget}")));
    }
    let mut h_re = Vec::with_capacity(k * n);
    let mut h_im = Vec::with_capacity(k * n);
    for _ in 0..k * n {
        let (re, im) = sample_nakagami_entry(m, 1.0, rng)?;
        h_re.push(re);
        h_im.push(im);
    }
    Ok(ChannelSample { k, n, h_re, h_im, sigma2: noise_power(p_budget, snr_db), m, snr_db, sample_seed: 0 })
}

/// Channel drawn from its own seed; the same seed reproduces it bit-exactly.
pub fn generate_channel_seeded(k: usize, n: usize, m: f64, snr_db: f64, p_budget: f64, seed: u64) -> Result<ChannelSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = generate_channel(k, n, m, snr_db, p_budget, &mut rng)?;
    s.sample_seed = seed;
    Ok(s)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of candidate `index` under `master`; independent of generation order.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    splitmix64(splitmix64(master) ^ splitmix64(index.wrapping_add(0x5851_F42D_4C95_7F2D)))
}

/// Everything needed to generate one scenario's dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenConfig {
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "N")]
    pub n: usize,
    pub m: f64,
    pub snr_db: f64,
    pub p_max: f64,
    pub p_circuit: f64,
    pub gamma: Vec<f64>,
    pub alpha: Vec<f64>,
    pub count: usize,
    #[serde(default = "default_split_ratio")]
    pub split_ratio: f64,
    pub master_seed: u64,
}

fn default_split_ratio() -> f64 {
    0.7
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            k: 3,
            n: 20,
            m: 3.0,
            snr_db: 10.0,
            p_max: 1.1,
            p_circuit: 0.1,
            gamma: vec![1.0; 3],
            alpha: vec![1.0; 3],
            count: 1000,
            split_ratio: 0.7,
            master_seed: 2024,
        }
    }
}

impl GenConfig {
    pub fn p_budget(&self) -> f64 {
        self.p_max - self.p_circuit
    }

    /// Short hex digest of the canonical JSON encoding.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn split_index(&self) -> usize {
        (self.split_ratio * self.count as f64 - 1e-9).ceil().max(0.0) as usize
    }

    pub fn instance(&self, channel: ChannelSample) -> Result<ProblemInstance> {
        ProblemInstance::new(channel, self.alpha.clone(), self.gamma.clone(), self.p_max, self.p_circuit)
    }

    fn validate(&self) -> Result<()> {
        if self.k == 0 || self.n == 0 {
            return Err(Error::InvalidParam("K and N must be >= 1".into()));
        }
        if self.gamma.len() != self.k || self.alpha.len() != self.k {
            return Err(Error::InvalidParam(format!("gamma and alpha must have K = {} entries", self.k)));
        }
        if !(0.0..=1.0).contains(&self.split_ratio) {
            return Err(Error::InvalidParam(format!("split_ratio {} outside [0, 1]", self.split_ratio)));
        }
        if !(self.m >= 0.5) {
            return Err(Error::InvalidParam(format!("Nakagami m must be >= 0.5, got {}", self.m)));
        }
        Ok(())
    }
}

/// First line of a dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct DatasetHeader {
    pub version: u32,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "N")]
    pub n: usize,
    pub m: f64,
    pub snr_db: f64,
    pub p_max: f64,
    pub p_circuit: f64,
    pub gamma: Vec<f64>,
    pub alpha: Vec<f64>,
    pub count: usize,
    pub split_index: usize,
    pub master_seed: u64,
    pub discards: usize,
    pub fingerprint: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub samples: Vec<ChannelSample>,
}

impl Dataset {
    pub fn split_index(&self) -> usize {
        self.header.split_index.min(self.samples.len())
    }

    pub fn train(&self) -> &[ChannelSample] {
        &self.samples[..self.split_index()]
    }

    pub fn test(&self) -> &[ChannelSample] {
        &self.samples[self.split_index()..]
    }

    pub fn instance(&self, sample: &ChannelSample) -> Result<ProblemInstance> {
        let h = &self.header;
        ProblemInstance::new(sample.clone(), h.alpha.clone(), h.gamma.clone(), h.p_max, h.p_circuit)
    }

    pub fn instances(&self, samples: &[ChannelSample]) -> Result<Vec<ProblemInstance>> {
        samples.iter().map(|s| self.instance(s)).collect()
    }

    /// The generation config this dataset claims to come from.
    pub fn gen_config(&self) -> GenConfig {
        let h = &self.header;
        GenConfig {
            k: h.k,
            n: h.n,
            m: h.m,
            snr_db: h.snr_db,
            p_max: h.p_max,
            p_circuit: h.p_circuit,
            gamma: h.gamma.clone(),
            alpha: h.alpha.clone(),
            count: h.count,
            split_ratio: if h.count == 0 { 0.7 } else { h.split_index as f64 / h.count as f64 },
            master_seed: h.master_seed,
        }
    }
}

/// Result of screening one candidate: the channel and the baseline solution
/// that proved it QoS-feasible.
#[derive(Debug, Clone)]
pub struct Screened {
    pub index: u64,
    pub channel: ChannelSample,
    pub baseline: Option<Beamformer>,
}

/// Draws candidate `index` and checks it with the WMMSE baseline plus QoS repair.
pub fn screen_candidate(cfg: &GenConfig, index: u64) -> Result<Screened> {
    let seed = derive_seed(cfg.master_seed, index);
    let channel = generate_channel_seeded(cfg.k, cfg.n, cfg.m, cfg.snr_db, cfg.p_budget(), seed)?;
    let inst = cfg.instance(channel.clone())?;
    let sol = wmmse::baseline(&inst)?;
    let ok = sol.feasible && problem::violation_report(&inst, &sol.beamformer, problem::FEASIBILITY_TOL).feasible;
    Ok(Screened { index, channel, baseline: ok.then_some(sol.beamformer) })
}

/// Generates `count` QoS-feasible samples; infeasible candidates are skipped
/// and counted. Candidates are screened in parallel chunks but consumed in
/// index order, so the output does not depend on the thread count.
pub fn build_dataset(cfg: &GenConfig) -> Result<Dataset> {
    cfg.validate()?;
    let abort_after = cfg.count / 2;
    let mut samples = Vec::with_capacity(cfg.count);
    let mut discards = 0usize;
    let mut consecutive = 0usize;
    let mut next: u64 = 0;
    let chunk = rayon::current_num_threads().max(1) * 4;
    'outer: while samples.len() < cfg.count {
        let want = (cfg.count - samples.len()).min(chunk) as u64;
        let batch: Vec<Result<Screened>> = (next..next + want).into_par_iter().map(|i| screen_candidate(cfg, i)).collect();
        next += want;
        for s in batch {
            let s = s?;
            if s.baseline.is_some() {
                consecutive = 0;
                samples.push(s.channel);
                if samples.len() == cfg.count {
                    break 'outer;
                }
            } else {
                discards += 1;
                consecutive += 1;
                if consecutive > abort_after {
                    return Err(Error::Infeasible(format!(
                        "QoS thresholds too aggressive for this SNR/m ({consecutive} consecutive discards, snr_db = {}, m = {})",
                        cfg.snr_db, cfg.m
                    )));
                }
            }
        }
    }
    let header = DatasetHeader {
        version: DATASET_VERSION,
        k: cfg.k,
        n: cfg.n,
        m: cfg.m,
        snr_db: cfg.snr_db,
        p_max: cfg.p_max,
        p_circuit: cfg.p_circuit,
        gamma: cfg.gamma.clone(),
        alpha: cfg.alpha.clone(),
        count: cfg.count,
        split_index: cfg.split_index(),
        master_seed: cfg.master_seed,
        discards,
        fingerprint: cfg.fingerprint(),
    };
    Ok(Dataset { header, samples })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleLine {
    seed: u64,
    sigma2: f64,
    #[serde(rename = "H_re")]
    h_re: Vec<Vec<f64>>,
    #[serde(rename = "H_im")]
    h_im: Vec<Vec<f64>>,
}

fn rows(flat: &[f64], n: usize) -> Vec<Vec<f64>> {
    flat.chunks(n).map(<[f64]>::to_vec).collect()
}

/// Encodes a dataset as JSON lines (header first, then one sample per line).
pub fn dataset_to_string(ds: &Dataset) -> Result<String> {
    let mut out = serde_json::to_string(&ds.header)?;
    out.push('\n');
    for s in &ds.samples {
        let line = SampleLine { seed: s.sample_seed, sigma2: s.sigma2, h_re: rows(&s.h_re, s.n), h_im: rows(&s.h_im, s.n) };
        out.push_str(&serde_json::to_string(&line)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(dataset_to_string(ds)?.as_bytes())?;
    w.flush()?;
    Ok(())
}

fn flatten(rows: Vec<Vec<f64>>, k: usize, n: usize, line: usize) -> Result<Vec<f64>> {
    if rows.len() != k || rows.iter().any(|r| r.len() != n) {
        return Err(Error::Parse { line, msg: format!("channel matrix is not {k}x{n}") });
    }
    Ok(rows.into_iter().flatten().collect())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines().enumerate();
    let Some((_, first)) = lines.next() else {
        return Ok(Dataset::default());
    };
    let first = first?;
    if first.trim().is_empty() {
        return Ok(Dataset::default());
    }
    let header: DatasetHeader =
        serde_json::from_str(&first).map_err(|e| Error::Parse { line: 1, msg: format!("header: {e}") })?;
    let mut samples = Vec::with_capacity(header.count);
    for (i, line) in lines {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let s: SampleLine = serde_json::from_str(&line).map_err(|e| Error::Parse { line: line_no, msg: e.to_string() })?;
        samples.push(ChannelSample {
            k: header.k,
            n: header.n,
            h_re: flatten(s.h_re, header.k, header.n, line_no)?,
            h_im: flatten(s.h_im, header.k, header.n, line_no)?,
            sigma2: s.sigma2,
            m: header.m,
            snr_db: header.snr_db,
            sample_seed: s.seed,
        });
    }
    Ok(Dataset { header, samples })
}

/// Loads a dataset and compares its fingerprint against the requested
/// config; a mismatch is reported as a warning, not an error.
pub fn load_dataset_checked(path: &Path, expected: &GenConfig) -> Result<(Dataset, Option<String>)> {
    let ds = load_dataset(path)?;
    let want = expected.fingerprint();
    let warning = (ds.header.fingerprint != want).then(|| {
        format!("dataset fingerprint {} does not match requested config {} ({})", ds.header.fingerprint, want, path.display())
    });
    Ok((ds, warning))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gamma_rejects_bad_params() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(sample_gamma(0.0, 1.0, &mut rng).is_err());
        assert!(sample_gamma(1.0, -1.0, &mut rng).is_err());
        assert!(sample_gamma(0.3, 1.0, &mut rng).unwrap() > 0.0);
    }

    #[test]
    fn nakagami_rejects_small_m() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(sample_nakagami_entry(0.4, 1.0, &mut rng).is_err());
        assert!(sample_nakagami_entry(0.5, 1.0, &mut rng).is_ok());
    }

    #[test]
    fn noise_from_snr() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = generate_channel(3, 20, 2.0, 0.0, 1.0, &mut rng).unwrap();
        assert_eq!((s.h_re.len(), s.h_im.len()), (60, 60));
        assert_eq!(s.sigma2, 1.0);
        let s = generate_channel(3, 20, 2.0, 20.0, 1.0, &mut rng).unwrap();
        assert!((s.sigma2 - 0.01).abs() < 1e-17);
    }

    #[test]
    fn seeded_channel_reproduces() {
        let a = generate_channel_seeded(3, 20, 1.5, 5.0, 1.0, 77).unwrap();
        let b = generate_channel_seeded(3, 20, 1.5, 5.0, 1.0, 77).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.sample_seed, 77);
    }

    #[test]
    fn split_index_rounds_up() {
        let mut cfg = GenConfig::default();
        assert_eq!(cfg.split_index(), 700);
        cfg.count = 10;
        assert_eq!(cfg.split_index(), 7);
        cfg.count = 11;
        assert_eq!(cfg.split_index(), 8);
    }

    #[test]
    fn derived_seeds_distinct() {
        let seeds: std::collections::HashSet<u64> = (0..1000).map(|i| derive_seed(5, i)).collect();
        assert_eq!(seeds.len(), 1000);
        assert_ne!(derive_seed(5, 0), derive_seed(6, 0));
    }
}
