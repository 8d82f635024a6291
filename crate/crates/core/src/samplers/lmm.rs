//! Gibbs sampler for the Bayesian linear mixed model
//! `Y = Xβ + Zγ + E` with a proper normal/gamma prior.
//!
//! One cycle is `k1` lambda steps (both precisions drawn from their gamma
//! conditionals) followed by one beta-gamma step (a joint normal draw of the
//! fixed and random effects).

use std::collections::HashMap;
use std::fs::File;
use std::io::Read;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Observable, SamplerError};
use crate::chain::{CyclicSampler, StepError};
use crate::numkit::{gamma_sample, mvn_sample, Matrix, NumError, SpdMatrix};

/// Data and hyperparameters. Field names match the JSON config schema.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LmmModel {
    pub y: Vec<f64>,
    #[serde(rename = "X")]
    pub x: Matrix,
    #[serde(rename = "Z")]
    pub z: Matrix,
    pub mu_beta: Vec<f64>,
    pub sigma_beta: Matrix,
    pub a_gamma: f64,
    pub b_gamma: f64,
    pub a_e: f64,
    pub b_e: f64,
    pub k1: usize,
}

impl LmmModel {
    pub fn n_obs(&self) -> usize {
        self.y.len()
    }

    pub fn p(&self) -> usize {
        self.x.cols()
    }

    pub fn g(&self) -> usize {
        self.z.cols()
    }

    pub fn validate(&self) -> Result<(), SamplerError> {
        let bad = |m: String| Err(SamplerError::InvalidSpec(m));
        let n = self.n_obs();
        if n == 0 || self.p() == 0 || self.g() == 0 {
            return bad("empty model".into());
        }
        if self.x.rows() != n || self.z.rows() != n {
            return bad(format!(
                "X is {}x{}, Z is {}x{}, y has {n} entries",
                self.x.rows(),
                self.x.cols(),
                self.z.rows(),
                self.z.cols()
            ));
        }
        if self.mu_beta.len() != self.p()
            || self.sigma_beta.rows() != self.p()
            || self.sigma_beta.cols() != self.p()
        {
            return bad("prior dimensions do not match X".into());
        }
        for (name, v) in [
            ("a_gamma", self.a_gamma),
            ("b_gamma", self.b_gamma),
            ("a_e", self.a_e),
            ("b_e", self.b_e),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} = {v} must be positive"));
            }
        }
        if self.k1 == 0 {
            return bad("k1 must be >= 1".into());
        }
        for i in 0..n {
            let row = self.z.row(i);
            if row.iter().any(|&v| v != 0.0 && v != 1.0) || row.iter().sum::<f64>() != 1.0 {
                return bad(format!("row {} of Z is not a one-hot membership", i + 1));
            }
        }
        if !self.y.iter().all(|v| v.is_finite()) || !self.x.is_finite() {
            return bad("non-finite data".into());
        }
        SpdMatrix::new(self.sigma_beta.clone())
            .map_err(|e| SamplerError::InvalidSpec(format!("sigma_beta: {e}")))?;
        SpdMatrix::from_nearly_symmetric(self.x.t_matmul(&self.x))
            .map_err(|_| SamplerError::InvalidSpec("X does not have full column rank".into()))?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LmmState {
    pub beta: Vec<f64>,
    pub gamma: Vec<f64>,
    pub lambda_gamma: f64,
    pub lambda_e: f64,
}

/// Cross products that do not change between iterations.
#[derive(Clone, Debug)]
struct Gram {
    xtx: Matrix,
    xtz: Matrix,
    ztz: Matrix,
    xty: Vec<f64>,
    zty: Vec<f64>,
    prior_precision: Matrix,
    prior_shift: Vec<f64>,
}

#[derive(Clone)]
pub struct LmmSampler {
    model: LmmModel,
    gram: Gram,
    observable: Observable<LmmState>,
}

impl LmmSampler {
    /// Validates the model. Default `f = (β[p−1], λ_γ)`: the last fixed-effect
    /// coefficient (the sex effect for the Orthodont design) and the random
    /// intercept precision.
    pub fn new(model: LmmModel) -> Result<Self, SamplerError> {
        model.validate()?;
        let prior = SpdMatrix::new(model.sigma_beta.clone())?;
        let prior_precision = prior.inverse_matrix();
        let prior_shift = prior_precision.matvec(&model.mu_beta);
        let gram = Gram {
            xtx: model.x.t_matmul(&model.x),
            xtz: model.x.t_matmul(&model.z),
            ztz: model.z.t_matmul(&model.z),
            xty: model.x.t_matvec(&model.y),
            zty: model.z.t_matvec(&model.y),
            prior_precision,
            prior_shift,
        };
        let last = model.p() - 1;
        let observable = Observable::new(2, move |s: &LmmState, out: &mut [f64]| {
            out[0] = s.beta[last];
            out[1] = s.lambda_gamma;
        });
        Ok(Self {
            model,
            gram,
            observable,
        })
    }

    pub fn with_observable(mut self, observable: Observable<LmmState>) -> Self {
        self.observable = observable;
        self
    }

    pub fn model(&self) -> &LmmModel {
        &self.model
    }

    /// `(μ_β, 0, 1, 1)`.
    pub fn initial_state(&self) -> LmmState {
        LmmState {
            beta: self.model.mu_beta.clone(),
            gamma: vec![0.0; self.model.g()],
            lambda_gamma: 1.0,
            lambda_e: 1.0,
        }
    }

    /// `‖y − Xβ − Zγ‖²`.
    pub fn residual_ss(&self, beta: &[f64], gamma: &[f64]) -> f64 {
        let xb = self.model.x.matvec(beta);
        let zg = self.model.z.matvec(gamma);
        self.model
            .y
            .iter()
            .zip(xb.iter().zip(&zg))
            .map(|(y, (a, b))| (y - a - b).powi(2))
            .sum()
    }

    /// Shape and rate of the two gamma conditionals, `((shape_γ, rate_γ), (shape_e, rate_e))`.
    pub fn lambda_conditionals(&self, state: &LmmState) -> ((f64, f64), (f64, f64)) {
        let m = &self.model;
        let gamma_sq: f64 = state.gamma.iter().map(|v| v * v).sum();
        let rss = self.residual_ss(&state.beta, &state.gamma);
        (
            (m.a_gamma + 0.5 * m.g() as f64, m.b_gamma + 0.5 * gamma_sq),
            (m.a_e + 0.5 * m.n_obs() as f64, m.b_e + 0.5 * rss),
        )
    }

    /// Redraws `(λ_γ, λ_e)` given `(β, γ)`.
    pub fn lambda_step<R: Rng + ?Sized>(
        &self,
        state: &LmmState,
        rng: &mut R,
    ) -> Result<LmmState, StepError> {
        let ((sg, rg), (se, re)) = self.lambda_conditionals(state);
        Ok(LmmState {
            lambda_gamma: gamma_sample(sg, rg, rng)?,
            lambda_e: gamma_sample(se, re, rng)?,
            ..state.clone()
        })
    }

    /// Mean and covariance of `(β, γ) | λ_γ, λ_e, y`, via
    /// `A = (λ_e XᵀX + Σ_β⁻¹)⁻¹`, `B = I − λ_e X A Xᵀ`, `C = (λ_e ZᵀBZ + λ_γ I)⁻¹`.
    ///
    /// `B` is never formed: every product it enters reduces to the cached
    /// cross products, e.g. `ZᵀBZ = ZᵀZ − λ_e ZᵀX A XᵀZ`.
    pub fn beta_gamma_conditional(
        &self,
        lambda_gamma: f64,
        lambda_e: f64,
    ) -> Result<(Vec<f64>, SpdMatrix), NumError> {
        let gr = &self.gram;
        let (p, g) = (self.model.p(), self.model.g());
        let le = lambda_e;

        let mut a_inv = gr.xtx.scale(le).add(&gr.prior_precision);
        a_inv.symmetrize();
        let a = SpdMatrix::new(a_inv)?.inverse_matrix();

        let a_xtz = a.matmul(&gr.xtz); // A XᵀZ, p×g
        let ztx_a_xtz = gr.xtz.t_matmul(&a_xtz); // ZᵀX A XᵀZ
        let mut c_inv = gr.ztz.sub(&ztx_a_xtz.scale(le)).scale(le);
        for i in 0..g {
            c_inv[(i, i)] += lambda_gamma;
        }
        c_inv.symmetrize();
        let c = SpdMatrix::new(c_inv)?.inverse_matrix();

        // w = Zᵀ(B y − X A Σ_β⁻¹ μ_β) = Zᵀy − λ_e ZᵀX A Xᵀy − ZᵀX A Σ_β⁻¹μ_β
        let a_xty = a.matvec(&gr.xty);
        let a_shift = a.matvec(&gr.prior_shift);
        let ztx_a_xty = gr.xtz.t_matvec(&a_xty);
        let ztx_a_shift = gr.xtz.t_matvec(&a_shift);
        let w: Vec<f64> = (0..g)
            .map(|i| gr.zty[i] - le * ztx_a_xty[i] - ztx_a_shift[i])
            .collect();
        let cw = c.matvec(&w);

        let base: Vec<f64> = gr
            .xty
            .iter()
            .zip(&gr.prior_shift)
            .map(|(xy, s)| le * xy + s)
            .collect();
        let a_base = a.matvec(&base);
        let a_xtz_cw = a_xtz.matvec(&cw);
        let mut mean = Vec::with_capacity(p + g);
        mean.extend((0..p).map(|i| a_base[i] - le * le * a_xtz_cw[i]));
        mean.extend(cw.iter().map(|v| le * v));

        let a_xtz_c = a_xtz.matmul(&c); // A XᵀZ C, p×g
        let beta_block = a.add(&a_xtz_c.matmul(&a_xtz.transpose()).scale(le * le));
        let mut cov = Matrix::zeros(p + g, p + g);
        for i in 0..p {
            for j in 0..p {
                cov[(i, j)] = beta_block[(i, j)];
            }
            for j in 0..g {
                let v = -le * a_xtz_c[(i, j)];
                cov[(i, p + j)] = v;
                cov[(p + j, i)] = v;
            }
        }
        for i in 0..g {
            for j in 0..g {
                cov[(p + i, p + j)] = c[(i, j)];
            }
        }
        Ok((mean, SpdMatrix::from_nearly_symmetric(cov)?))
    }

    /// Redraws `(β, γ)` jointly given the precisions.
    pub fn beta_gamma_step<R: Rng + ?Sized>(
        &self,
        state: &LmmState,
        rng: &mut R,
    ) -> Result<LmmState, StepError> {
        if !(state.lambda_gamma > 0.0 && state.lambda_e > 0.0) {
            return Err(StepError::InvalidState(
                "precisions must be positive".into(),
            ));
        }
        let (mean, cov) = self.beta_gamma_conditional(state.lambda_gamma, state.lambda_e)?;
        let draw = mvn_sample(&mean, &cov, rng)?;
        let p = self.model.p();
        Ok(LmmState {
            beta: draw[..p].to_vec(),
            gamma: draw[p..].to_vec(),
            lambda_gamma: state.lambda_gamma,
            lambda_e: state.lambda_e,
        })
    }
}

/// Same as [`LmmSampler::new`].
pub fn make_lmm_sampler(model: LmmModel) -> Result<LmmSampler, SamplerError> {
    LmmSampler::new(model)
}

impl CyclicSampler for LmmSampler {
    type State = LmmState;

    fn cycle_len(&self) -> usize {
        self.model.k1 + 1
    }

    fn dim(&self) -> usize {
        self.observable.dim()
    }

    fn step<R: Rng + ?Sized>(
        &self,
        state: &mut LmmState,
        phase: usize,
        rng: &mut R,
    ) -> Result<(), StepError> {
        *state = if phase <= self.model.k1 {
            self.lambda_step(state, rng)?
        } else {
            self.beta_gamma_step(state, rng)?
        };
        Ok(())
    }

    fn observe(&self, state: &LmmState, out: &mut [f64]) {
        self.observable.eval(state, out)
    }
}

/// Reads Orthodont-style CSV (`distance, age, Subject, Sex`; extra columns
/// ignored) into the random-intercept design `X = [1, age, 1{Male}]`,
/// `Z` one-hot by subject in order of first appearance, with prior
/// `μ_β = 0`, `Σ_β = I`, all gamma hyperparameters 1 and `k1 = 3`.
pub fn parse_orthodont<R: Read>(reader: R) -> Result<LmmModel, SamplerError> {
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| SamplerError::Parse {
            row: 0,
            message: e.to_string(),
        })?
        .clone();
    let want = ["distance", "age", "Subject", "Sex"];
    let mut idx = [0usize; 4];
    let mut missing = Vec::new();
    for (slot, name) in idx.iter_mut().zip(want) {
        match headers.iter().position(|h| h.trim() == name) {
            Some(i) => *slot = i,
            None => missing.push(name.to_string()),
        }
    }
    if !missing.is_empty() {
        return Err(SamplerError::Schema { missing });
    }

    let mut y = Vec::new();
    let mut x_rows: Vec<[f64; 3]> = Vec::new();
    let mut subject_of_row = Vec::new();
    let mut subjects: HashMap<String, usize> = HashMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| SamplerError::Parse {
            row,
            message: e.to_string(),
        })?;
        let field = |j: usize| rec.get(j).unwrap_or("").trim();
        let num = |j: usize, name: &str| -> Result<f64, SamplerError> {
            field(j).parse::<f64>().map_err(|e| SamplerError::Parse {
                row,
                message: format!("{name}: {e}"),
            })
        };
        let distance = num(idx[0], "distance")?;
        let age = num(idx[1], "age")?;
        let male = match field(idx[3]) {
            "Male" => 1.0,
            "Female" => 0.0,
            other => {
                return Err(SamplerError::Parse {
                    row,
                    message: format!("unknown Sex value {other:?}"),
                })
            }
        };
        let subject = field(idx[2]);
        if subject.is_empty() {
            return Err(SamplerError::Parse {
                row,
                message: "empty Subject".into(),
            });
        }
        let next = subjects.len();
        let s = *subjects.entry(subject.to_string()).or_insert(next);
        y.push(distance);
        x_rows.push([1.0, age, male]);
        subject_of_row.push(s);
    }
    if y.is_empty() {
        return Err(SamplerError::Parse {
            row: 0,
            message: "no data rows".into(),
        });
    }
    let g = subjects.len();
    let mut z = Matrix::zeros(y.len(), g);
    for (i, &s) in subject_of_row.iter().enumerate() {
        z[(i, s)] = 1.0;
    }
    let model = LmmModel {
        y,
        x: Matrix::from_rows(&x_rows)?,
        z,
        mu_beta: vec![0.0; 3],
        sigma_beta: Matrix::identity(3),
        a_gamma: 1.0,
        b_gamma: 1.0,
        a_e: 1.0,
        b_e: 1.0,
        k1: 3,
    };
    model.validate()?;
    Ok(model)
}

const ORTHODONT_CSV: &str = include_str!("../../data/orthodont.csv");

/// The Orthodont data set shipped with the crate.
pub fn orthodont() -> LmmModel {
    parse_orthodont(ORTHODONT_CSV.as_bytes()).expect("bundled data parses")
}

pub fn load_orthodont(path: impl AsRef<Path>) -> Result<LmmModel, SamplerError> {
    let path = path.as_ref();
    let file =
        File::open(path).map_err(|e| SamplerError::Io(format!("{}: {e}", path.display())))?;
    parse_orthodont(file)
}
