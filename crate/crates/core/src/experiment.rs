//! Scenario sweeps: per grid point, generate the dataset, train every
//! (arch, method) combination, evaluate it next to the WMMSE baseline, and
//! collect one result row per combination.

use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::channel::{build_dataset, save_dataset, GenConfig};
use crate::error::{Error, Result};
use crate::models::{Arch, Checkpoint};
use crate::trainer::{self, Method, Metrics, TrainConfig};

pub const RESULTS_HEADER: [&str; 9] =
    ["axis", "axis_value", "arch", "method", "mean_wsr_bps_hz", "violation_rate", "mean_worst_g", "infer_ms", "train_seed"];
pub const BASELINE_ARCH: &str = "wmmse";
pub const BASELINE_METHOD: &str = "baseline";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    Snr,
    Nakagami,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::Snr => "snr",
            Axis::Nakagami => "nakagami",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Axis::Snr => "SNR (dB)",
            Axis::Nakagami => "Nakagami m",
        }
    }

    pub fn default_grid(self) -> Vec<f64> {
        match self {
            Axis::Snr => vec![0.0, 5.0, 10.0, 15.0, 20.0],
            Axis::Nakagami => vec![1.0, 2.0, 3.0, 5.0],
        }
    }
}

impl std::str::FromStr for Axis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "snr" => Ok(Axis::Snr),
            "nakagami" => Ok(Axis::Nakagami),
            _ => Err(Error::InvalidParam(format!("unknown axis '{s}' (expected snr or nakagami)"))),
        }
    }
}

fn default_archs() -> Vec<Arch> {
    vec![Arch::Mlp, Arch::Du]
}
fn default_methods() -> Vec<Method> {
    Method::ALL.to_vec()
}
fn default_seeds() -> Vec<u64> {
    vec![7]
}
fn default_train() -> serde_json::Value {
    serde_json::json!({})
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub axis: Axis,
    pub grid: Vec<f64>,
    /// Fixed system parameters; the swept field is overwritten per point.
    #[serde(default)]
    pub system: GenConfig,
    #[serde(default = "default_archs")]
    pub archs: Vec<Arch>,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    /// Training seeds; every combination is trained once per seed.
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Training-config fields shared by every combination (everything but
    /// `arch`, `method`, `seed`).
    #[serde(default = "default_train")]
    pub train: serde_json::Value,
}

impl SweepConfig {
    pub fn default_for(axis: Axis) -> Self {
        let mut system = GenConfig::default();
        if axis == Axis::Nakagami {
            system.snr_db = 10.0;
        }
        Self {
            axis,
            grid: axis.default_grid(),
            system,
            archs: default_archs(),
            methods: default_methods(),
            seeds: default_seeds(),
            train: default_train(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid.is_empty() {
            return Err(Error::InvalidParam("sweep grid is empty".into()));
        }
        if self.grid.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::InvalidParam(format!("sweep grid {:?} is not strictly increasing", self.grid)));
        }
        if self.seeds.is_empty() {
            return Err(Error::InvalidParam("sweep needs at least one training seed".into()));
        }
        for key in ["arch", "method", "seed"] {
            if self.train.get(key).is_some() {
                return Err(Error::InvalidParam(format!("sweep train template must not set '{key}'")));
            }
        }
        for &arch in &self.archs {
            for &method in &self.methods {
                self.train_config(arch, method, self.seeds[0])?;
            }
        }
        Ok(())
    }

    pub fn gen_config_at(&self, value: f64) -> GenConfig {
        let mut g = self.system.clone();
        match self.axis {
            Axis::Snr => g.snr_db = value,
            Axis::Nakagami => g.m = value,
        }
        g
    }

    pub fn train_config(&self, arch: Arch, method: Method, seed: u64) -> Result<TrainConfig> {
        let mut v = self.train.clone();
        let obj = v.as_object_mut().ok_or_else(|| Error::InvalidParam("sweep train template must be a JSON object".into()))?;
        obj.insert("arch".into(), serde_json::to_value(arch)?);
        obj.insert("method".into(), serde_json::to_value(method)?);
        obj.insert("seed".into(), seed.into());
        let tc: TrainConfig = serde_json::from_value(v)?;
        tc.validate()?;
        Ok(tc)
    }

    /// Digest of everything besides the dataset that determines a point's rows.
    fn training_key(&self) -> String {
        let key = serde_json::json!({
            "archs": self.archs, "methods": self.methods, "seeds": self.seeds, "train": self.train,
        });
        let digest = Sha256::digest(key.to_string().as_bytes());
        digest.iter().take(6).map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub axis: String,
    pub axis_value: f64,
    pub arch: String,
    pub method: String,
    pub mean_wsr_bps_hz: f64,
    pub violation_rate: f64,
    pub mean_worst_g: f64,
    pub infer_ms: f64,
    pub train_seed: Option<u64>,
}

impl ResultRow {
    pub fn from_metrics(axis: Axis, value: f64, arch: &str, method: &str, m: &Metrics, seed: Option<u64>) -> Self {
        Self {
            axis: axis.name().into(),
            axis_value: value,
            arch: arch.into(),
            method: method.into(),
            mean_wsr_bps_hz: m.mean_wsr,
            violation_rate: m.violation_rate,
            mean_worst_g: m.mean_worst_g,
            infer_ms: m.infer_ms,
            train_seed: seed,
        }
    }

    pub fn is_baseline(&self) -> bool {
        self.arch == BASELINE_ARCH && self.method == BASELINE_METHOD
    }

    /// `arch+method` series label.
    pub fn series(&self) -> String {
        if self.is_baseline() {
            "WMMSE".into()
        } else {
            format!("{}+{}", self.method.to_uppercase(), self.arch.to_uppercase())
        }
    }
}

pub fn write_results(path: &Path, rows: &[ResultRow]) -> Result<()> {
    std::fs::write(path, results_to_string(rows)?)?;
    Ok(())
}

pub fn results_to_string(rows: &[ResultRow]) -> Result<String> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(RESULTS_HEADER).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::InvalidParam(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

fn csv_err(e: csv::Error) -> Error {
    Error::InvalidParam(format!("csv: {e}"))
}

/// Parses a results file; errors name the 1-based line of the bad row.
pub fn read_results(path: &Path) -> Result<Vec<ResultRow>> {
    parse_results(&std::fs::read_to_string(path)?)
}

pub fn parse_results(text: &str) -> Result<Vec<ResultRow>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let header = rdr.headers().map_err(|e| Error::Parse { line: 1, msg: e.to_string() })?.clone();
    if header.iter().collect::<Vec<_>>() != RESULTS_HEADER {
        return Err(Error::Parse { line: 1, msg: format!("unexpected header {:?}", header.iter().collect::<Vec<_>>()) });
    }
    let mut rows = Vec::new();
    for (i, rec) in rdr.deserialize::<ResultRow>().enumerate() {
        let row = rec.map_err(|e| Error::Parse { line: i + 2, msg: e.to_string() })?;
        if !(0.0..=1.0).contains(&row.violation_rate) {
            return Err(Error::Parse { line: i + 2, msg: format!("violation_rate {} outside [0, 1]", row.violation_rate) });
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Parse { line: 1, msg: "no result rows".into() });
    }
    Ok(rows)
}

/// Digest of the rows with wall-clock columns zeroed.
pub fn results_digest(rows: &[ResultRow]) -> String {
    let masked: Vec<ResultRow> = rows.iter().map(|r| ResultRow { infer_ms: 0.0, ..r.clone() }).collect();
    let s = results_to_string(&masked).expect("rows serialize");
    Sha256::digest(s.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}

/// Artifacts of one grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PointRecord {
    fingerprint: String,
    rows: Vec<ResultRow>,
}

fn tag(arch: Arch, method: Method, seed: u64) -> String {
    format!("{}_{}_s{seed}", arch.name(), method.name())
}

/// Runs one grid point. Artifacts land in a directory keyed by the dataset
/// fingerprint and the training settings; a completed directory is reused,
/// so a point shared by two sweeps is computed once.
pub fn run_point(sweep: &SweepConfig, value: f64, out_dir: &Path, log: &(dyn Fn(&str) + Sync)) -> Result<Vec<ResultRow>> {
    let gen = sweep.gen_config_at(value);
    let fp = gen.fingerprint();
    let dir = out_dir.join("points").join(format!("{fp}-{}", sweep.training_key()));
    let record_path = dir.join("rows.json");
    let relabel = |rows: Vec<ResultRow>| -> Vec<ResultRow> {
        rows.into_iter().map(|r| ResultRow { axis: sweep.axis.name().into(), axis_value: value, ..r }).collect()
    };
    if record_path.exists() {
        let rec: PointRecord = serde_json::from_str(&std::fs::read_to_string(&record_path)?)?;
        if rec.fingerprint == fp {
            log(&format!("{}={value}: reusing {}", sweep.axis.name(), dir.display()));
            return Ok(relabel(rec.rows));
        }
    }
    std::fs::create_dir_all(&dir)?;
    let ds = build_dataset(&gen)?;
    save_dataset(&ds, &dir.join("dataset.jsonl"))?;
    log(&format!("{}={value}: dataset {fp} ({} discards)", sweep.axis.name(), ds.header.discards));

    let mut rows = Vec::new();
    let base = trainer::evaluate_baseline(&ds)?;
    std::fs::write(dir.join("wmmse_samples.json"), serde_json::to_string(&base.samples)?)?;
    rows.push(ResultRow::from_metrics(sweep.axis, value, BASELINE_ARCH, BASELINE_METHOD, &base, None));

    let contexts = if sweep.methods.contains(&Method::Hop) {
        let delta = sweep.train_config(Arch::Mlp, Method::Hop, sweep.seeds[0])?.hop_delta;
        Some(trainer::hop_contexts(&ds, &ds.samples, delta, Some(&dir.join("dataset.hop.json")))?)
    } else {
        None
    };
    for &seed in &sweep.seeds {
        for &arch in &sweep.archs {
            for &method in &sweep.methods {
                let tc = sweep.train_config(arch, method, seed)?;
                let name = tag(arch, method, seed);
                let out = trainer::train(&ds, &tc, contexts.as_ref())?;
                let cfg_json = serde_json::to_value(&tc)?;
                let ck = Checkpoint { arch, config: cfg_json.clone(), seed, step: out.steps, model: out.model.clone() };
                ck.save(&dir.join(format!("{name}.ckpt.json")))?;
                let best = Checkpoint { model: out.best.clone(), step: out.best_epoch as u64, ..ck };
                best.save(&dir.join(format!("{name}.best.ckpt.json")))?;
                std::fs::write(dir.join(format!("{name}.history.csv")), out.history.to_csv())?;
                let m = trainer::evaluate(&out.model, &ds, &tc.loss_config(), contexts.as_ref())?;
                std::fs::write(dir.join(format!("{name}_samples.json")), serde_json::to_string(&m.samples)?)?;
                log(&format!("{}={value}: {name} wsr {:.3} viol {:.3}", sweep.axis.name(), m.mean_wsr, m.violation_rate));
                rows.push(ResultRow::from_metrics(sweep.axis, value, arch.name(), method.name(), &m, Some(seed)));
            }
        }
    }
    let rec = PointRecord { fingerprint: fp, rows: rows.clone() };
    std::fs::write(&record_path, serde_json::to_string_pretty(&rec)?)?;
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepOutcome {
    /// Rows in grid order, then combination order.
    pub rows: Vec<ResultRow>,
    /// `(axis value, error)` for points that failed.
    pub failures: Vec<(f64, String)>,
    pub results_path: PathBuf,
}

/// Runs every grid point on at most `jobs` threads and writes
/// `results_<axis>.csv` in `out_dir`. A failing point is recorded and the
/// rest continue.
pub fn run_sweep(sweep: &SweepConfig, out_dir: &Path, jobs: usize, log: &(dyn Fn(&str) + Sync)) -> Result<SweepOutcome> {
    sweep.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::InvalidParam(format!("thread pool: {e}")))?;
    let slots: Mutex<Vec<Option<Result<Vec<ResultRow>>>>> = Mutex::new(sweep.grid.iter().map(|_| None).collect());
    pool.scope(|s| {
        for (i, &value) in sweep.grid.iter().enumerate() {
            let slots = &slots;
            s.spawn(move |_| {
                let r = run_point(sweep, value, out_dir, log);
                slots.lock().expect("unpoisoned")[i] = Some(r);
            });
        }
    });
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for (slot, &value) in slots.into_inner().expect("unpoisoned").into_iter().zip(&sweep.grid) {
        match slot.expect("every point ran") {
            Ok(r) => rows.extend(r),
            Err(e) => {
                log(&format!("{}={value}: FAILED: {e}", sweep.axis.name()));
                failures.push((value, e.to_string()));
            }
        }
    }
    let results_path = out_dir.join(format!("results_{}.csv", sweep.axis.name()));
    if !rows.is_empty() {
        write_results(&results_path, &rows)?;
    }
    Ok(SweepOutcome { rows, failures, results_path })
}
