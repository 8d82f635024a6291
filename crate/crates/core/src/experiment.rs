//! Replicated fixed-length and stopping-rule experiments, truth estimation
//! and the regeneration demo, with CSV/JSON/SVG output.

use std::fmt::Write as _;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::chain::{run_chain, ChainError, ChainRunner, CyclicSampler, StepError};
use crate::estimators::{
    confidence_region, region_volume, BatchPlan, EstimatorError, EstimatorReport, DEFAULT_KAPPA,
};
use crate::numkit::stream;
use crate::regen::{
    kac_check, mean_small_fn, run_split_chain, tour_identity_check, tours, FiniteMinorized,
    FlipBlockKernel, KacReport, MinorizedKernel, RegenError, TourIdentityReport, MIN_TOURS,
};
use crate::samplers::{
    load_orthodont, orthodont, CurveRegion, CurveSampler, FlipChain, LmmSampler, LmmState,
    SamplerError,
};
use crate::stopping::{run_until_stop, RuleCheck, Scaling, StopConfig, StopError, StopReport};

/// Stream index reserved for long truth runs; replications use `0..reps`.
pub const TRUTH_STREAM: u64 = u64::MAX;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config error at `{field}`: {message}")]
    Config { field: String, message: String },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl ExperimentError {
    fn config(field: &str, message: impl Into<String>) -> Self {
        Self::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    /// 2 for configuration problems, 3 for numerical degeneracy, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config { .. } | Self::Parse(_) => 2,
            Self::Numerical(_) => 3,
            Self::Io(_) => 1,
        }
    }
}

impl From<std::io::Error> for ExperimentError {
    fn from(e: std::io::Error) -> Self {
        Self::Io(e.to_string())
    }
}

impl From<ChainError> for ExperimentError {
    fn from(e: ChainError) -> Self {
        match e {
            ChainError::Io(_) => Self::Io(e.to_string()),
            other => Self::Numerical(other.to_string()),
        }
    }
}

impl From<EstimatorError> for ExperimentError {
    fn from(e: EstimatorError) -> Self {
        Self::Numerical(e.to_string())
    }
}

impl From<RegenError> for ExperimentError {
    fn from(e: RegenError) -> Self {
        match e {
            RegenError::Io(m) => Self::Io(m),
            RegenError::InvalidArgument(m) => Self::config("regen", m),
            other => Self::Numerical(other.to_string()),
        }
    }
}

impl From<SamplerError> for ExperimentError {
    fn from(e: SamplerError) -> Self {
        match e {
            SamplerError::Numerical(n) => Self::Numerical(n.to_string()),
            SamplerError::Io(m) => Self::config("sampler.data", m),
            other => Self::config("sampler", other.to_string()),
        }
    }
}

impl From<StopError> for ExperimentError {
    fn from(e: StopError) -> Self {
        match e {
            StopError::InvalidConfig(m) => Self::config("stop", m),
            StopError::Chain(c) => c.into(),
            StopError::Estimator(c) => c.into(),
            b @ StopError::BudgetExceeded { .. } => Self::Numerical(b.to_string()),
        }
    }
}

fn default_k1() -> usize {
    3
}
fn default_flip_a() -> f64 {
    0.25
}
fn default_flip_b() -> f64 {
    0.5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SamplerSpec {
    /// Area-under-curve sampler for `h(x) = 2x + 1 − eˣ`, `f = x1·x2`.
    Curve {
        #[serde(default = "default_k1")]
        k1: usize,
    },
    /// Random-intercept mixed model; bundled Orthodont data unless `data` is set.
    /// `f = (β_last, λ_γ)`.
    Lmm {
        #[serde(default)]
        data: Option<PathBuf>,
        #[serde(default = "default_k1")]
        k1: usize,
    },
    /// Two-phase ±1 flip chain, `f = x`.
    Flip {
        #[serde(default = "default_flip_a")]
        a: f64,
        #[serde(default = "default_flip_b")]
        b: f64,
    },
}

impl SamplerSpec {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Curve { .. } => "curve",
            Self::Lmm { .. } => "lmm",
            Self::Flip { .. } => "flip",
        }
    }

    fn default_n(&self) -> usize {
        match self {
            Self::Curve { .. } => 30_000,
            Self::Lmm { .. } => 16_000,
            Self::Flip { .. } => 100_000,
        }
    }

    pub fn build(&self) -> Result<BuiltSampler, ExperimentError> {
        Ok(match self {
            Self::Curve { k1 } => {
                BuiltSampler::Curve(CurveSampler::new(CurveRegion::exp_curve(*k1)?))
            }
            Self::Lmm { data, k1 } => {
                let mut model = match data {
                    Some(p) => load_orthodont(p)?,
                    None => orthodont(),
                };
                model.k1 = *k1;
                BuiltSampler::Lmm(Box::new(LmmSampler::new(model)?))
            }
            Self::Flip { a, b } => BuiltSampler::Flip(FlipChain::new(*a, *b)?),
        })
    }
}

/// Runtime choice among the reference samplers.
#[derive(Clone)]
pub enum BuiltSampler {
    Curve(CurveSampler),
    Lmm(Box<LmmSampler>),
    Flip(FlipChain),
}

#[derive(Clone, Debug, PartialEq)]
pub enum AnyState {
    Curve((f64, f64)),
    Lmm(LmmState),
    Flip(f64),
}

impl BuiltSampler {
    pub fn initial_state(&self) -> AnyState {
        match self {
            Self::Curve(s) => AnyState::Curve(s.initial_state()),
            Self::Lmm(s) => AnyState::Lmm(s.initial_state()),
            Self::Flip(_) => AnyState::Flip(1.0),
        }
    }
}

impl CyclicSampler for BuiltSampler {
    type State = AnyState;

    fn cycle_len(&self) -> usize {
        match self {
            Self::Curve(s) => s.cycle_len(),
            Self::Lmm(s) => s.cycle_len(),
            Self::Flip(s) => s.cycle_len(),
        }
    }

    fn dim(&self) -> usize {
        match self {
            Self::Curve(s) => s.dim(),
            Self::Lmm(s) => s.dim(),
            Self::Flip(s) => s.dim(),
        }
    }

    fn step<R: Rng + ?Sized>(
        &self,
        state: &mut AnyState,
        phase: usize,
        rng: &mut R,
    ) -> Result<(), StepError> {
        match (self, state) {
            (Self::Curve(s), AnyState::Curve(x)) => s.step(x, phase, rng),
            (Self::Lmm(s), AnyState::Lmm(x)) => s.step(x, phase, rng),
            (Self::Flip(s), AnyState::Flip(x)) => s.step(x, phase, rng),
            _ => Err(StepError::InvalidState(
                "state does not match sampler".into(),
            )),
        }
    }

    fn observe(&self, state: &AnyState, out: &mut [f64]) {
        match (self, state) {
            (Self::Curve(s), AnyState::Curve(x)) => s.observe(x, out),
            (Self::Lmm(s), AnyState::Lmm(x)) => s.observe(x, out),
            (Self::Flip(s), AnyState::Flip(x)) => s.observe(x, out),
            _ => out.iter_mut().for_each(|v| *v = f64::NAN),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Fixed,
    Stop,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TruthSpec {
    Value {
        value: Vec<f64>,
    },
    /// Mean of one long run on a stream reserved for truth estimation.
    LongRun {
        length: usize,
    },
    /// Closed form or quadrature; curve and flip samplers only.
    Exact,
}

fn default_scaling() -> Scaling {
    Scaling::DetPsi
}
fn default_n0() -> usize {
    crate::stopping::DEFAULT_N0
}
fn default_growth() -> f64 {
    crate::stopping::DEFAULT_GROWTH
}

/// Stopping-rule settings; `alpha` and `kappa` come from the top level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StopSection {
    pub epsilon: f64,
    #[serde(default = "default_n0")]
    pub n0: usize,
    #[serde(default = "default_scaling")]
    pub scaling: Scaling,
    #[serde(default = "default_growth")]
    pub check_growth: f64,
    #[serde(default)]
    pub n_start: Option<usize>,
    #[serde(default)]
    pub max_n: Option<usize>,
}

impl StopSection {
    pub fn new(epsilon: f64) -> Self {
        Self {
            epsilon,
            n0: default_n0(),
            scaling: Scaling::DetPsi,
            check_growth: default_growth(),
            n_start: None,
            max_n: None,
        }
    }
}

fn default_reps() -> usize {
    1
}
fn default_alpha() -> f64 {
    0.1
}
fn default_kappa() -> f64 {
    DEFAULT_KAPPA
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub sampler: SamplerSpec,
    pub mode: Mode,
    /// Chain length in fixed mode; defaults per sampler.
    #[serde(default)]
    pub n: Option<usize>,
    #[serde(default)]
    pub stop: Option<StopSection>,
    #[serde(default = "default_reps")]
    pub replications: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_kappa")]
    pub kappa: f64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub truth: Option<TruthSpec>,
    /// Unrecorded steps before sampling. In stop mode it is rounded up to
    /// whole cycles so checks see phase-aligned chains.
    #[serde(default)]
    pub burn_in: usize,
    /// Worker threads; all cores when unset. Results do not depend on it.
    #[serde(default)]
    pub threads: Option<usize>,
}

impl ExperimentConfig {
    pub fn new(sampler: SamplerSpec, mode: Mode) -> Self {
        Self {
            sampler,
            mode,
            n: None,
            stop: None,
            replications: 1,
            seed: 0,
            kappa: DEFAULT_KAPPA,
            alpha: 0.1,
            truth: None,
            burn_in: 0,
            threads: None,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, ExperimentError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ExperimentError::Parse(e.to_string()))?;
        Ok(cfg)
    }

    pub fn from_json(text: &str) -> Result<Self, ExperimentError> {
        serde_json::from_str(text).map_err(|e| ExperimentError::Parse(e.to_string()))
    }

    /// Reads `.json` files as JSON and everything else as TOML.
    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = fs::read_to_string(path)
            .map_err(|e| ExperimentError::config("--config", format!("{}: {e}", path.display())))?;
        if path.extension().is_some_and(|e| e == "json") {
            Self::from_json(&text)
        } else {
            Self::from_toml(&text)
        }
    }

    pub fn chain_length(&self) -> usize {
        self.n.unwrap_or_else(|| self.sampler.default_n())
    }

    pub fn stop_config(&self) -> Option<StopConfig> {
        self.stop.as_ref().map(|s| StopConfig {
            alpha: self.alpha,
            epsilon: s.epsilon,
            n0: s.n0,
            scaling: s.scaling,
            check_growth: s.check_growth,
            n_start: s.n_start,
            kappa: self.kappa,
            max_n: s.max_n,
        })
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let err = |f: &str, m: &str| ExperimentError::config(f, m);
        if self.replications == 0 {
            return Err(err("replications", "must be >= 1"));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(err("alpha", &format!("{} is outside (0, 1)", self.alpha)));
        }
        if !(self.kappa > 0.0 && self.kappa < 1.0) {
            return Err(err("kappa", &format!("{} is outside (0, 1)", self.kappa)));
        }
        if self.threads == Some(0) {
            return Err(err("threads", "must be >= 1"));
        }
        match &self.sampler {
            SamplerSpec::Curve { k1 } | SamplerSpec::Lmm { k1, .. } if *k1 == 0 => {
                return Err(err("sampler.k1", "must be >= 1"));
            }
            SamplerSpec::Flip { a, b } if !(*a > 0.0 && *a < 1.0 && *b > 0.0 && *b < 1.0) => {
                return Err(err("sampler", "flip probabilities must lie in (0, 1)"));
            }
            _ => {}
        }
        match self.mode {
            Mode::Fixed => {
                if self.n == Some(0) {
                    return Err(err("n", "must be >= 1"));
                }
                if self.stop.is_some() {
                    return Err(err("stop", "only valid with mode = \"stop\""));
                }
            }
            Mode::Stop => {
                if self.n.is_some() {
                    return Err(err("n", "only valid with mode = \"fixed\"; use stop.max_n"));
                }
                let Some(stop) = self.stop_config() else {
                    return Err(err("stop", "required when mode = \"stop\""));
                };
                stop.validate().map_err(|e| match e {
                    StopError::InvalidConfig(m) => err("stop", &m),
                    other => err("stop", &other.to_string()),
                })?;
            }
        }
        match &self.truth {
            Some(TruthSpec::Value { value }) if value.iter().any(|v| !v.is_finite()) => {
                return Err(err("truth.value", "entries must be finite"));
            }
            Some(TruthSpec::LongRun { length }) if *length < 1000 => {
                return Err(err("truth.length", "must be >= 1000"));
            }
            Some(TruthSpec::Exact) if matches!(self.sampler, SamplerSpec::Lmm { .. }) => {
                return Err(err(
                    "truth.kind",
                    "no exact value for the lmm sampler; use long_run",
                ));
            }
            _ => {}
        }
        Ok(())
    }
}

/// One replication's outcome.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RepRow {
    pub rep: usize,
    pub n: usize,
    pub stopped: bool,
    pub wall_secs: f64,
    pub ess: Option<f64>,
    pub tess: Option<f64>,
    pub volume: Option<f64>,
    pub covered: Option<bool>,
    pub phase_counts: Vec<usize>,
    pub estimate: Vec<f64>,
}

fn per_minute(x: Option<f64>, secs: f64) -> Option<f64> {
    x.filter(|_| secs > 0.0).map(|v| v * 60.0 / secs)
}

/// Column-oriented replication table; the unit of CSV round-tripping.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Option<f64>>>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Aggregate {
    pub columns: Vec<String>,
    pub mean: Vec<Option<f64>>,
    pub se: Vec<Option<f64>>,
}

impl Aggregate {
    pub fn get(&self, column: &str) -> Option<(f64, Option<f64>)> {
        let i = self.columns.iter().position(|c| c == column)?;
        self.mean[i].map(|m| (m, self.se[i]))
    }
}

impl Table {
    pub fn from_rows(rows: &[RepRow]) -> Self {
        let k = rows.first().map_or(0, |r| r.phase_counts.len());
        let d = rows.first().map_or(0, |r| r.estimate.len());
        let mut columns: Vec<String> = [
            "rep",
            "n",
            "stopped",
            "wall_secs",
            "ess",
            "tess",
            "ess_per_min",
            "tess_per_min",
            "volume",
            "covered",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        columns.extend((1..=k).map(|j| format!("phase_{j}")));
        columns.extend((1..=d).map(|j| format!("est_{j}")));
        let bool_val = |b: bool| if b { 1.0 } else { 0.0 };
        let data = rows
            .iter()
            .map(|r| {
                let mut v = vec![
                    Some(r.rep as f64),
                    Some(r.n as f64),
                    Some(bool_val(r.stopped)),
                    Some(r.wall_secs),
                    r.ess,
                    r.tess,
                    per_minute(r.ess, r.wall_secs),
                    per_minute(r.tess, r.wall_secs),
                    r.volume,
                    r.covered.map(bool_val),
                ];
                v.extend(r.phase_counts.iter().map(|c| Some(*c as f64)));
                v.extend(r.estimate.iter().map(|e| Some(*e)));
                v
            })
            .collect();
        Self {
            columns,
            rows: data,
        }
    }

    /// Means and standard errors (`sd/√m`) of every column but `rep`,
    /// over the rows where the column is present.
    pub fn aggregate(&self) -> Aggregate {
        let cols: Vec<usize> = (1..self.columns.len()).collect();
        let mut mean = Vec::new();
        let mut se = Vec::new();
        for &c in &cols {
            let xs: Vec<f64> = self.rows.iter().filter_map(|r| r[c]).collect();
            if xs.is_empty() {
                mean.push(None);
                se.push(None);
                continue;
            }
            let m = xs.iter().sum::<f64>() / xs.len() as f64;
            mean.push(Some(m));
            se.push(if xs.len() > 1 {
                let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64;
                Some((var / xs.len() as f64).sqrt())
            } else {
                None
            });
        }
        Aggregate {
            columns: cols.iter().map(|&c| self.columns[c].clone()).collect(),
            mean,
            se,
        }
    }

    /// One row per replication followed by `mean` and `se` footer rows.
    /// Floats use the shortest representation that parses back exactly.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), ExperimentError> {
        let io = |e: csv::Error| ExperimentError::Io(e.to_string());
        let fmt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:?}"));
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(&self.columns).map_err(io)?;
        for r in &self.rows {
            let mut rec = vec![r[0].map_or(String::new(), |x| (x as usize).to_string())];
            rec.extend(r[1..].iter().map(|v| fmt(*v)));
            wtr.write_record(&rec).map_err(io)?;
        }
        let agg = self.aggregate();
        for (label, vals) in [("mean", &agg.mean), ("se", &agg.se)] {
            let mut rec = vec![label.to_string()];
            rec.extend(vals.iter().map(|v| fmt(*v)));
            wtr.write_record(&rec).map_err(io)?;
        }
        wtr.flush()?;
        Ok(())
    }

    /// Parses the output of [`Table::write_csv`], returning the table and the
    /// footer as written.
    pub fn read_csv<R: Read>(r: R) -> Result<(Table, Aggregate), ExperimentError> {
        let perr = |m: String| ExperimentError::Parse(m);
        let mut rdr = csv::Reader::from_reader(r);
        let columns: Vec<String> = rdr
            .headers()
            .map_err(|e| perr(e.to_string()))?
            .iter()
            .map(String::from)
            .collect();
        let parse = |s: &str| -> Result<Option<f64>, ExperimentError> {
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse::<f64>()
                    .map(Some)
                    .map_err(|e| perr(format!("{s:?}: {e}")))
            }
        };
        let mut rows = Vec::new();
        let mut footer: Vec<Vec<Option<f64>>> = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| perr(e.to_string()))?;
            let first = rec.get(0).unwrap_or("");
            let vals = rec
                .iter()
                .skip(1)
                .map(parse)
                .collect::<Result<Vec<_>, _>>()?;
            match first {
                "mean" | "se" => footer.push(vals),
                _ => {
                    let mut row = vec![parse(first)?];
                    row.extend(vals);
                    rows.push(row);
                }
            }
        }
        if footer.len() != 2 {
            return Err(perr("missing mean/se footer".into()));
        }
        let se = footer.pop().unwrap_or_default();
        let mean = footer.pop().unwrap_or_default();
        let agg = Aggregate {
            columns: columns[1..].to_vec(),
            mean,
            se,
        };
        Ok((Table { columns, rows }, agg))
    }
}

/// `(n, volume, ess)` along the check schedule of one replication.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TracePoint {
    pub n: usize,
    pub volume: Option<f64>,
    pub ess: Option<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct TruthReport {
    pub value: Vec<f64>,
    /// Batch-means standard errors for long runs; zero for exact values.
    pub se: Vec<f64>,
    pub source: String,
    pub length: Option<usize>,
    pub cached: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct ExperimentOutput {
    pub config: ExperimentConfig,
    pub truth: Option<TruthReport>,
    pub rows: Vec<RepRow>,
    pub aggregate: Aggregate,
    /// Rule diagnostics of replication 0 (stop mode).
    pub checks: Vec<RuleCheck>,
    /// Volume and ESS of replication 0 along the check schedule.
    pub trace: Vec<TracePoint>,
}

impl ExperimentOutput {
    pub fn table(&self) -> Table {
        Table::from_rows(&self.rows)
    }

    /// Headline numbers as `mean (se)`, one per line.
    pub fn summary(&self) -> String {
        let mut out = String::new();
        let show = |label: &str, col: &str, out: &mut String| {
            if let Some((m, se)) = self.aggregate.get(col) {
                let se = se.map_or("-".to_string(), |s| format!("{s:.3}"));
                let _ = writeln!(out, "{label:<14} {m:.3} ({se})");
            }
        };
        let _ = writeln!(
            out,
            "{} sampler, {:?} mode, {} replications",
            self.config.sampler.name(),
            self.config.mode,
            self.rows.len()
        );
        show("iterations", "n", &mut out);
        show("time (s)", "wall_secs", &mut out);
        show("ESS", "ess", &mut out);
        show("ESS/min", "ess_per_min", &mut out);
        show("TESS", "tess", &mut out);
        show("TESS/min", "tess_per_min", &mut out);
        let k = self.rows.first().map_or(0, |r| r.phase_counts.len());
        for j in 1..=k {
            show(&format!("phase {j} steps"), &format!("phase_{j}"), &mut out);
        }
        show("coverage", "covered", &mut out);
        out
    }

    /// Writes `table.csv`, `summary.json`, `volume_vs_n.svg`, `ess_vs_n.svg`
    /// and, in stop mode, `checks.csv` into `dir`.
    pub fn write_to_dir(&self, dir: &Path) -> Result<Vec<PathBuf>, ExperimentError> {
        fs::create_dir_all(dir)?;
        let mut written = Vec::new();
        let path = dir.join("table.csv");
        self.table().write_csv(fs::File::create(&path)?)?;
        written.push(path);
        let path = dir.join("summary.json");
        fs::write(
            &path,
            serde_json::to_string_pretty(self).map_err(|e| ExperimentError::Io(e.to_string()))?,
        )?;
        written.push(path);
        let vol: Vec<(f64, f64)> = self
            .trace
            .iter()
            .filter_map(|p| p.volume.map(|v| (p.n as f64, v)))
            .collect();
        let ess: Vec<(f64, f64)> = self
            .trace
            .iter()
            .filter_map(|p| p.ess.map(|v| (p.n as f64, v)))
            .collect();
        for (name, title, ylabel, pts) in [
            ("volume_vs_n.svg", "Region volume", "volume", vol),
            ("ess_vs_n.svg", "Effective sample size", "ESS", ess),
        ] {
            let path = dir.join(name);
            fs::write(&path, svg_line_plot(title, "n", ylabel, &pts))?;
            written.push(path);
        }
        if !self.checks.is_empty() {
            let path = dir.join("checks.csv");
            let rep = StopReport {
                n_eps: 0,
                stopped: false,
                estimate: vec![],
                sigma_bm: None,
                radius2: None,
                volume: None,
                ess_at_stop: None,
                tess_at_stop: None,
                phase_counts: vec![],
                checks: self.checks.clone(),
                region: None,
            };
            rep.write_checks_csv(fs::File::create(&path)?)
                .map_err(|e| ExperimentError::Io(e.to_string()))?;
            written.push(path);
        }
        Ok(written)
    }
}

fn pool(threads: Option<usize>) -> Result<rayon::ThreadPool, ExperimentError> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(t) = threads {
        b = b.num_threads(t);
    }
    b.build().map_err(|e| ExperimentError::Io(e.to_string()))
}

fn run_fixed_rep(
    sampler: &BuiltSampler,
    cfg: &ExperimentConfig,
    truth: Option<&[f64]>,
    rep: usize,
) -> Result<RepRow, ExperimentError> {
    let mut rng = stream(cfg.seed, rep as u64);
    let start = Instant::now();
    let s = run_chain(
        sampler,
        sampler.initial_state(),
        cfg.chain_length(),
        cfg.burn_in,
        &mut rng,
    )?;
    let report = EstimatorReport::compute(&s, cfg.kappa)?;
    let plan = BatchPlan::new(s.n(), cfg.kappa)?;
    let region = confidence_region(&s, &plan, cfg.alpha)?;
    let wall_secs = start.elapsed().as_secs_f64();
    Ok(RepRow {
        rep,
        n: s.n(),
        stopped: true,
        wall_secs,
        ess: report.ess,
        tess: report.tess,
        volume: Some(region_volume(&region)),
        covered: truth.map(|t| region.contains(t)),
        phase_counts: s.phase_counts(),
        estimate: report.mean,
    })
}

fn stop_rep(
    sampler: &BuiltSampler,
    cfg: &ExperimentConfig,
    stop: &StopConfig,
    rep: usize,
) -> Result<StopReport, ExperimentError> {
    let mut rng = stream(cfg.seed, rep as u64);
    let k = sampler.cycle_len();
    let mut init = sampler.initial_state();
    if cfg.burn_in > 0 {
        let mut runner = ChainRunner::new(sampler, init, &mut rng);
        runner.burn(cfg.burn_in.div_ceil(k) * k)?;
        init = runner.into_state();
    }
    match run_until_stop(sampler, init, stop, &mut rng) {
        Ok(r) => Ok(r),
        Err(StopError::BudgetExceeded { partial, .. }) => Ok(*partial),
        Err(e) => Err(e.into()),
    }
}

fn run_stop_rep(
    sampler: &BuiltSampler,
    cfg: &ExperimentConfig,
    stop: &StopConfig,
    truth: Option<&[f64]>,
    rep: usize,
) -> Result<(RepRow, Vec<RuleCheck>), ExperimentError> {
    let start = Instant::now();
    let r = stop_rep(sampler, cfg, stop, rep)?;
    let wall_secs = start.elapsed().as_secs_f64();
    let row = RepRow {
        rep,
        n: r.n_eps,
        stopped: r.stopped,
        wall_secs,
        ess: r.ess_at_stop,
        tess: r.tess_at_stop,
        volume: r.volume,
        covered: match (truth, &r.region) {
            (Some(t), Some(region)) => Some(region.contains(t)),
            _ => None,
        },
        phase_counts: r.phase_counts,
        estimate: r.estimate,
    };
    Ok((row, r.checks))
}

fn trace_fixed(
    sampler: &BuiltSampler,
    cfg: &ExperimentConfig,
) -> Result<Vec<TracePoint>, ExperimentError> {
    let mut rng = stream(cfg.seed, 0);
    let s = run_chain(
        sampler,
        sampler.initial_state(),
        cfg.chain_length(),
        cfg.burn_in,
        &mut rng,
    )?;
    let schedule = StopConfig {
        n_start: Some(1000.min(s.n())),
        ..StopConfig::new(cfg.alpha, 1.0)
    };
    let mut out = Vec::new();
    for n in schedule.schedule().take_while(|&n| n <= s.n()) {
        let prefix = s.prefix(n);
        let report = EstimatorReport::compute(&prefix, cfg.kappa).ok();
        let volume = BatchPlan::new(n, cfg.kappa)
            .ok()
            .and_then(|p| confidence_region(&prefix, &p, cfg.alpha).ok())
            .map(|r| region_volume(&r));
        out.push(TracePoint {
            n,
            volume,
            ess: report.and_then(|r| r.ess),
        });
    }
    Ok(out)
}

fn resolve_truth(
    cfg: &ExperimentConfig,
    sampler: &BuiltSampler,
    cache_dir: Option<&Path>,
) -> Result<Option<TruthReport>, ExperimentError> {
    match &cfg.truth {
        None => Ok(None),
        Some(_) => cmd_truth_with(cfg, sampler, cache_dir).map(Some),
    }
}

/// Fixed-length replications.
pub fn cmd_run_fixed(
    cfg: &ExperimentConfig,
    cache_dir: Option<&Path>,
) -> Result<ExperimentOutput, ExperimentError> {
    cfg.validate()?;
    if cfg.mode != Mode::Fixed {
        return Err(ExperimentError::config(
            "mode",
            "run-fixed needs mode = \"fixed\"",
        ));
    }
    let sampler = cfg.sampler.build()?;
    let truth = resolve_truth(cfg, &sampler, cache_dir)?;
    check_truth_dim(&truth, &sampler)?;
    let t = truth.as_ref().map(|t| t.value.as_slice());
    let rows = pool(cfg.threads)?.install(|| {
        (0..cfg.replications)
            .into_par_iter()
            .map(|i| run_fixed_rep(&sampler, cfg, t, i))
            .collect::<Result<Vec<_>, _>>()
    })?;
    let trace = trace_fixed(&sampler, cfg)?;
    Ok(ExperimentOutput {
        config: cfg.clone(),
        truth,
        aggregate: Table::from_rows(&rows).aggregate(),
        rows,
        checks: Vec::new(),
        trace,
    })
}

/// Stopping-rule replications.
pub fn cmd_run_stop(
    cfg: &ExperimentConfig,
    cache_dir: Option<&Path>,
) -> Result<ExperimentOutput, ExperimentError> {
    cfg.validate()?;
    if cfg.mode != Mode::Stop {
        return Err(ExperimentError::config(
            "mode",
            "run-stop needs mode = \"stop\"",
        ));
    }
    let stop = cfg.stop_config().expect("validated");
    let sampler = cfg.sampler.build()?;
    let truth = resolve_truth(cfg, &sampler, cache_dir)?;
    check_truth_dim(&truth, &sampler)?;
    let t = truth.as_ref().map(|t| t.value.as_slice());
    let results = pool(cfg.threads)?.install(|| {
        (0..cfg.replications)
            .into_par_iter()
            .map(|i| run_stop_rep(&sampler, cfg, &stop, t, i))
            .collect::<Result<Vec<_>, _>>()
    })?;
    let mut rows = Vec::with_capacity(results.len());
    let mut checks = Vec::new();
    for (row, c) in results {
        if row.rep == 0 {
            checks = c;
        }
        rows.push(row);
    }
    let trace = checks
        .iter()
        .map(|c| TracePoint {
            n: c.n,
            volume: c.volume,
            ess: c.ess,
        })
        .collect();
    Ok(ExperimentOutput {
        config: cfg.clone(),
        truth,
        aggregate: Table::from_rows(&rows).aggregate(),
        rows,
        checks,
        trace,
    })
}

fn check_truth_dim(
    truth: &Option<TruthReport>,
    sampler: &BuiltSampler,
) -> Result<(), ExperimentError> {
    match truth {
        Some(t) if t.value.len() != sampler.dim() => Err(ExperimentError::config(
            "truth.value",
            format!(
                "has {} entries, sampler output has {}",
                t.value.len(),
                sampler.dim()
            ),
        )),
        _ => Ok(()),
    }
}

/// Reference value for coverage. Long runs are cached in `cache_dir` under a
/// hash of everything that determines them.
pub fn cmd_truth(
    cfg: &ExperimentConfig,
    cache_dir: Option<&Path>,
) -> Result<TruthReport, ExperimentError> {
    cfg.validate()?;
    let sampler = cfg.sampler.build()?;
    cmd_truth_with(cfg, &sampler, cache_dir)
}

#[derive(Serialize)]
struct TruthKey<'a> {
    sampler: &'a SamplerSpec,
    data_sha256: Option<String>,
    length: usize,
    seed: u64,
    kappa: f64,
    burn_in: usize,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn truth_cache_key(cfg: &ExperimentConfig, length: usize) -> Result<String, ExperimentError> {
    let data_sha256 = match &cfg.sampler {
        SamplerSpec::Lmm { data: Some(p), .. } => Some(hex(&Sha256::digest(fs::read(p)?))),
        _ => None,
    };
    let key = TruthKey {
        sampler: &cfg.sampler,
        data_sha256,
        length,
        seed: cfg.seed,
        kappa: cfg.kappa,
        burn_in: cfg.burn_in,
    };
    let json = serde_json::to_vec(&key).map_err(|e| ExperimentError::Io(e.to_string()))?;
    Ok(hex(&Sha256::digest(json)))
}

#[derive(Serialize, Deserialize)]
struct CachedTruth {
    value: Vec<f64>,
    se: Vec<f64>,
    length: usize,
}

fn cmd_truth_with(
    cfg: &ExperimentConfig,
    sampler: &BuiltSampler,
    cache_dir: Option<&Path>,
) -> Result<TruthReport, ExperimentError> {
    let exact = |value: Vec<f64>| TruthReport {
        se: vec![0.0; value.len()],
        value,
        source: "exact".into(),
        length: None,
        cached: false,
    };
    match cfg
        .truth
        .as_ref()
        .unwrap_or(&TruthSpec::LongRun { length: 3_000_000 })
    {
        TruthSpec::Value { value } => Ok(TruthReport {
            se: vec![0.0; value.len()],
            value: value.clone(),
            source: "value".into(),
            length: None,
            cached: false,
        }),
        TruthSpec::Exact => match sampler {
            BuiltSampler::Curve(s) => Ok(exact(vec![s.region().mean_x1x2()])),
            BuiltSampler::Flip(_) => Ok(exact(vec![0.0])),
            BuiltSampler::Lmm(_) => Err(ExperimentError::config(
                "truth.kind",
                "no exact value for lmm",
            )),
        },
        TruthSpec::LongRun { length } => {
            let key = truth_cache_key(cfg, *length)?;
            let cache_file = cache_dir.map(|d| d.join(format!("truth-{key}.json")));
            if let Some(path) = &cache_file {
                if let Ok(text) = fs::read_to_string(path) {
                    if let Ok(c) = serde_json::from_str::<CachedTruth>(&text) {
                        return Ok(TruthReport {
                            value: c.value,
                            se: c.se,
                            source: "long_run".into(),
                            length: Some(c.length),
                            cached: true,
                        });
                    }
                }
            }
            let mut rng = stream(cfg.seed, TRUTH_STREAM);
            let s = run_chain(
                sampler,
                sampler.initial_state(),
                *length,
                cfg.burn_in,
                &mut rng,
            )?;
            let report = EstimatorReport::compute(&s, cfg.kappa)?;
            let se = report
                .sigma_bm
                .diag()
                .iter()
                .map(|v| (v.max(0.0) / s.n() as f64).sqrt())
                .collect::<Vec<_>>();
            let cached = CachedTruth {
                value: report.mean,
                se,
                length: *length,
            };
            if let Some(path) = &cache_file {
                if let Some(dir) = path.parent() {
                    fs::create_dir_all(dir)?;
                }
                fs::write(
                    path,
                    serde_json::to_string_pretty(&cached)
                        .map_err(|e| ExperimentError::Io(e.to_string()))?,
                )?;
            }
            Ok(TruthReport {
                value: cached.value,
                se: cached.se,
                source: "long_run".into(),
                length: Some(*length),
                cached: false,
            })
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegenChain {
    /// Rows (.5,.3,.2), (.2,.6,.2), (.3,.3,.4); `f` = indicator of the first state.
    ThreeState,
    /// Independent draws from (0.3, 0.7); every step regenerates.
    Iid,
    /// Flip chain with `a = 0.25`, `b = 0.3` through its two-step block chain.
    Flip,
}

#[derive(Clone, Debug, Serialize)]
pub struct RegenDemoReport {
    pub chain: RegenChain,
    pub steps: usize,
    pub tours: usize,
    pub mean_tau: f64,
    pub all_length_one: bool,
    pub theta: f64,
    pub kac: KacReport,
    /// Absent below the minimum tour count.
    pub identity: Option<TourIdentityReport>,
}

impl RegenDemoReport {
    pub fn summary(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:?} chain, {} steps, {} complete tours",
            self.chain, self.steps, self.tours
        );
        let _ = writeln!(
            out,
            "Kac: mean tour {:.4} (se {:.4}) vs 1/pi(h) = {:.4}, z = {:.2}",
            self.kac.mean_tau, self.kac.se, self.kac.expected, self.kac.z
        );
        if let Some(id) = &self.identity {
            let _ = writeln!(
                out,
                "tour mean: mean(Y)/(k mean(tau)) = {:.5} (se {:.5}) vs theta = {:.5}, z = {:.2}{}",
                id.ratio[0],
                id.se[0],
                self.theta,
                id.z[0],
                if id.flagged { " FLAGGED" } else { "" }
            );
            let _ = writeln!(
                out,
                "lag-2 corr of centered tours {:.4}; lag-1 corr of tau {:.4}",
                id.lag2_corr[0], id.tau_lag1_corr
            );
        }
        if self.all_length_one {
            let _ = writeln!(out, "all tours have length 1");
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Stationary distribution of a stochastic matrix by power iteration.
fn stationary(p: &[Vec<f64>]) -> Vec<f64> {
    let m = p.len();
    let mut pi = vec![1.0 / m as f64; m];
    for _ in 0..10_000 {
        let next: Vec<f64> = (0..m)
            .map(|v| (0..m).map(|u| pi[u] * p[u][v]).sum())
            .collect();
        let diff: f64 = next.iter().zip(&pi).map(|(a, b)| (a - b).abs()).sum();
        pi = next;
        if diff < 1e-15 {
            break;
        }
    }
    pi
}

fn demo_finite(
    chain: RegenChain,
    kernel: &FiniteMinorized,
    steps: usize,
    seed: u64,
) -> Result<RegenDemoReport, ExperimentError> {
    let mut rng = stream(seed, 0);
    let init = kernel.sample_mu(&mut rng);
    let (states, bells) = run_split_chain(kernel, init, steps, &mut rng)?;
    let theta = stationary(kernel.transition())[0];
    let indicator = |_: &usize, v: &usize, out: &mut [f64]| {
        if *v == 0 {
            out[0] += 1.0;
        }
    };
    let recs = tours(&states, &bells, 1, 1, Some(&[theta]), indicator)?;
    finish_demo(
        chain,
        steps,
        theta,
        1,
        &recs,
        mean_small_fn(kernel, &states),
    )
}

fn finish_demo(
    chain: RegenChain,
    steps: usize,
    theta: f64,
    k: usize,
    recs: &[crate::regen::TourRecord],
    pi_h: f64,
) -> Result<RegenDemoReport, ExperimentError> {
    let kac = kac_check(recs, pi_h)?;
    let identity = if recs.len() >= MIN_TOURS {
        Some(tour_identity_check(recs, k, &[theta])?)
    } else {
        None
    };
    Ok(RegenDemoReport {
        chain,
        steps,
        tours: recs.len(),
        mean_tau: kac.mean_tau,
        all_length_one: recs.iter().all(|r| r.tau == 1),
        theta,
        kac,
        identity,
    })
}

/// Split-chain demonstration on a toy chain.
pub fn cmd_regen_demo(
    chain: RegenChain,
    steps: usize,
    seed: u64,
) -> Result<RegenDemoReport, ExperimentError> {
    if steps < 2 {
        return Err(ExperimentError::config("--n", "need at least 2 steps"));
    }
    match chain {
        RegenChain::ThreeState => {
            let k = FiniteMinorized::from_stochastic(vec![
                vec![0.5, 0.3, 0.2],
                vec![0.2, 0.6, 0.2],
                vec![0.3, 0.3, 0.4],
            ])?;
            demo_finite(chain, &k, steps, seed)
        }
        RegenChain::Iid => {
            let p = vec![vec![0.3, 0.7], vec![0.3, 0.7]];
            let k = FiniteMinorized::with_minorization(p, vec![1.0, 1.0], vec![0.3, 0.7])?;
            demo_finite(chain, &k, steps, seed)
        }
        RegenChain::Flip => {
            let k = FlipBlockKernel::new(0.25, 0.3)?;
            let mut rng = stream(seed, 0);
            let init = k.sample_mu(&mut rng);
            let (states, bells) = run_split_chain(&k, init, steps, &mut rng)?;
            let recs = tours(
                &states,
                &bells,
                1,
                2,
                Some(&[0.0]),
                FlipBlockKernel::block_sum,
            )?;
            finish_demo(chain, steps, 0.0, 2, &recs, mean_small_fn(&k, &states))
        }
    }
}

/// Minimal standalone SVG line chart.
pub fn svg_line_plot(title: &str, x_label: &str, y_label: &str, points: &[(f64, f64)]) -> String {
    let (w, h, ml, mr, mt, mb) = (640.0, 400.0, 70.0, 20.0, 40.0, 50.0);
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#,
        w / 2.0,
        escape(title)
    );
    let finite: Vec<(f64, f64)> = points
        .iter()
        .copied()
        .filter(|(x, y)| x.is_finite() && y.is_finite())
        .collect();
    if finite.is_empty() {
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" text-anchor="middle">no data</text>"#,
            w / 2.0,
            h / 2.0
        );
        svg.push_str("</svg>\n");
        return svg;
    }
    let range = |vals: Vec<f64>| {
        let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if hi > lo {
            (lo, hi)
        } else {
            (lo - 0.5 * lo.abs().max(1.0), hi + 0.5 * hi.abs().max(1.0))
        }
    };
    let (x0, x1) = range(finite.iter().map(|p| p.0).collect());
    let (y0, y1) = range(finite.iter().map(|p| p.1).collect());
    let px = |x: f64| ml + (x - x0) / (x1 - x0) * (w - ml - mr);
    let py = |y: f64| h - mb - (y - y0) / (y1 - y0) * (h - mt - mb);
    let _ = writeln!(
        svg,
        r#"<path d="M{ml},{mt} V{} H{}" fill="none" stroke="black"/>"#,
        h - mb,
        w - mr
    );
    for i in 0..=4 {
        let fx = x0 + (x1 - x0) * i as f64 / 4.0;
        let fy = y0 + (y1 - y0) * i as f64 / 4.0;
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{}" text-anchor="middle">{}</text>"#,
            px(fx),
            h - mb + 16.0,
            tick(fx)
        );
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{:.1}" text-anchor="end">{}</text>"#,
            ml - 6.0,
            py(fy) + 4.0,
            tick(fy)
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        (ml + w - mr) / 2.0,
        h - 10.0,
        escape(x_label)
    );
    let _ = writeln!(
        svg,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
        (mt + h - mb) / 2.0,
        (mt + h - mb) / 2.0,
        escape(y_label)
    );
    let path: Vec<String> = finite
        .iter()
        .map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y)))
        .collect();
    let _ = writeln!(
        svg,
        r#"<polyline points="{}" fill="none" stroke="steelblue" stroke-width="2"/>"#,
        path.join(" ")
    );
    for &(x, y) in &finite {
        let _ = writeln!(
            svg,
            r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="steelblue"/>"#,
            px(x),
            py(y)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

fn tick(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e5 || v.abs() < 1e-2) {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flip_fixed(reps: usize) -> ExperimentConfig {
        ExperimentConfig {
            n: Some(5_000),
            replications: reps,
            seed: 11,
            truth: Some(TruthSpec::Exact),
            ..ExperimentConfig::new(SamplerSpec::Flip { a: 0.25, b: 0.5 }, Mode::Fixed)
        }
    }

    #[test]
    fn toml_schema() {
        let cfg = ExperimentConfig::from_toml(
            r#"
            mode = "stop"
            replications = 10
            seed = 7
            [sampler]
            kind = "curve"
            k1 = 1
            [stop]
            epsilon = 0.07
            [truth]
            kind = "exact"
            "#,
        )
        .unwrap();
        assert_eq!(cfg.sampler, SamplerSpec::Curve { k1: 1 });
        assert_eq!(cfg.stop_config().unwrap().epsilon, 0.07);
        assert_eq!(cfg.kappa, DEFAULT_KAPPA);
        cfg.validate().unwrap();
        let bad =
            ExperimentConfig::from_toml("mode = \"fixed\"\nbogus = 1\n[sampler]\nkind = \"flip\"");
        assert!(matches!(bad, Err(ExperimentError::Parse(_))));
    }

    #[test]
    fn validation_names_fields() {
        let mut cfg = flip_fixed(1);
        cfg.replications = 0;
        match cfg.validate() {
            Err(ExperimentError::Config { field, .. }) => assert_eq!(field, "replications"),
            other => panic!("{other:?}"),
        }
        let mut cfg = flip_fixed(1);
        cfg.mode = Mode::Stop;
        assert!(
            matches!(cfg.validate(), Err(ExperimentError::Config { ref field, .. }) if field == "n")
        );
        cfg.n = None;
        assert!(
            matches!(cfg.validate(), Err(ExperimentError::Config { ref field, .. }) if field == "stop")
        );
        let lmm = ExperimentConfig {
            truth: Some(TruthSpec::Exact),
            ..ExperimentConfig::new(SamplerSpec::Lmm { data: None, k1: 3 }, Mode::Fixed)
        };
        assert_eq!(lmm.validate().unwrap_err().exit_code(), 2);
    }

    #[test]
    fn single_replication_deterministic() {
        let a = cmd_run_fixed(&flip_fixed(1), None).unwrap();
        let b = cmd_run_fixed(&flip_fixed(1), None).unwrap();
        assert_eq!(a.rows.len(), 1);
        assert_eq!(a.rows[0].estimate, b.rows[0].estimate);
        assert_eq!(a.rows[0].ess, b.rows[0].ess);
    }

    #[test]
    fn parallelism_does_not_change_rows() {
        let mut one = flip_fixed(6);
        one.threads = Some(1);
        let mut many = flip_fixed(6);
        many.threads = Some(4);
        let a = cmd_run_fixed(&one, None).unwrap();
        let b = cmd_run_fixed(&many, None).unwrap();
        for (x, y) in a.rows.iter().zip(&b.rows) {
            assert_eq!(
                (x.rep, &x.estimate, x.ess, x.covered),
                (y.rep, &y.estimate, y.ess, y.covered)
            );
        }
    }

    #[test]
    fn csv_round_trip_bit_exact() {
        let out = cmd_run_fixed(&flip_fixed(5), None).unwrap();
        let table = out.table();
        let mut buf = Vec::new();
        table.write_csv(&mut buf).unwrap();
        let (parsed, footer) = Table::read_csv(buf.as_slice()).unwrap();
        assert_eq!(parsed, table);
        let again = parsed.aggregate();
        for (a, b) in again.mean.iter().zip(&footer.mean) {
            assert_eq!(a.map(f64::to_bits), b.map(f64::to_bits));
        }
        for (a, b) in again.se.iter().zip(&footer.se) {
            assert_eq!(a.map(f64::to_bits), b.map(f64::to_bits));
        }
    }

    #[test]
    fn stop_mode_phase_counts() {
        let cfg = ExperimentConfig {
            replications: 2,
            seed: 3,
            stop: Some(StopSection::new(0.2)),
            truth: Some(TruthSpec::Exact),
            ..ExperimentConfig::new(SamplerSpec::Curve { k1: 3 }, Mode::Stop)
        };
        let out = cmd_run_stop(&cfg, None).unwrap();
        for r in &out.rows {
            assert!(r.stopped);
            assert_eq!(r.phase_counts.len(), 4);
            let x_share = r.phase_counts[3] as f64 / r.n as f64;
            assert!((x_share - 0.25).abs() < 0.01);
        }
        assert!(!out.checks.is_empty());
        assert_eq!(out.trace.len(), out.checks.len());
    }

    #[test]
    fn truth_sources() {
        let flip = cmd_truth(&flip_fixed(1), None).unwrap();
        assert_eq!(flip.value, vec![0.0]);
        let curve = ExperimentConfig {
            truth: Some(TruthSpec::Exact),
            ..ExperimentConfig::new(SamplerSpec::Curve { k1: 3 }, Mode::Fixed)
        };
        let t = cmd_truth(&curve, None).unwrap();
        assert!((t.value[0] - 0.1026).abs() < 1e-3);
    }

    #[test]
    fn long_run_truth_is_cached() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig {
            truth: Some(TruthSpec::LongRun { length: 20_000 }),
            seed: 5,
            ..ExperimentConfig::new(SamplerSpec::Flip { a: 0.25, b: 0.5 }, Mode::Fixed)
        };
        let a = cmd_truth(&cfg, Some(dir.path())).unwrap();
        assert!(!a.cached);
        assert!(a.value[0].abs() < 5.0 * a.se[0].max(1e-3));
        let b = cmd_truth(&cfg, Some(dir.path())).unwrap();
        assert!(b.cached);
        assert_eq!(a.value, b.value);
        let other = ExperimentConfig { seed: 6, ..cfg };
        assert!(!cmd_truth(&other, Some(dir.path())).unwrap().cached);
    }

    #[test]
    fn regen_demos() {
        let three = cmd_regen_demo(RegenChain::ThreeState, 100_000, 1).unwrap();
        assert!((three.mean_tau - 1.0 / 0.7).abs() < 0.02);
        assert!(!three.identity.as_ref().unwrap().flagged);
        let iid = cmd_regen_demo(RegenChain::Iid, 2_000, 1).unwrap();
        assert!(iid.all_length_one);
        let flip = cmd_regen_demo(RegenChain::Flip, 100_000, 1).unwrap();
        assert!(flip.identity.unwrap().z[0].abs() < 4.0);
    }

    #[test]
    fn stationary_solves_balance() {
        let p = vec![
            vec![0.5, 0.3, 0.2],
            vec![0.2, 0.6, 0.2],
            vec![0.3, 0.3, 0.4],
        ];
        let pi = stationary(&p);
        for v in 0..3 {
            let back: f64 = (0..3).map(|u| pi[u] * p[u][v]).sum();
            assert!((back - pi[v]).abs() < 1e-12);
        }
    }

    #[test]
    fn outputs_written() {
        let dir = tempfile::tempdir().unwrap();
        let out = cmd_run_fixed(&flip_fixed(2), None).unwrap();
        let files = out.write_to_dir(dir.path()).unwrap();
        assert_eq!(files.len(), 4);
        let svg = fs::read_to_string(dir.path().join("volume_vs_n.svg")).unwrap();
        assert!(svg.starts_with("<svg") && svg.contains("polyline"));
        assert!(out.summary().contains("coverage"));
    }
}
