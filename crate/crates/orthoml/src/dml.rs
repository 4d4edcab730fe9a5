//! Cross-fitted double/debiased machine learning.
//!
//! A [`Score`] declares the nuisance regressions it needs and turns their
//! cross-fitted predictions into a moment function. For scores linear in θ,
//! `ψ = ψᵇ − ψᵃθ`, the estimate is `Eₙ[ψᵇ]/Eₙ[ψᵃ]` and the influence values
//! are `φ = ψ/Eₙ[ψᵃ]`. The variance is always the centered second moment of φ.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{check_len, Error, Result};
use crate::learners::{cross_fit_masked, learner_select, CrossFitPlan, Learner, Selection, DEFAULT_CLIP};
use crate::linalg::{column, hstack, ols_fit, robust_variance, with_intercept, HcKind};
use crate::stats::{mean, qnorm};
use crate::weak_id::first_stage_diag;

/// Common estimation settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DmlOptions {
    pub alpha: f64,
    /// Propensities are clipped into `[clip, 1 − clip]`.
    pub clip: f64,
    pub seed: u64,
}

impl Default for DmlOptions {
    fn default() -> Self {
        DmlOptions { alpha: 0.05, clip: DEFAULT_CLIP, seed: 0 }
    }
}

/// Cross-fit RMSE of one nuisance regression.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NuisanceDiag {
    pub name: String,
    pub learner: String,
    pub rmse: f64,
}

/// Estimate, influence values and inference for one orthogonal-score target.
#[derive(Debug, Clone, Serialize)]
pub struct DmlResult {
    pub estimand: String,
    pub theta: f64,
    pub se: f64,
    /// Centered second moment of the influence values.
    pub variance: f64,
    pub ci: (f64, f64),
    pub alpha: f64,
    pub n: usize,
    #[serde(skip)]
    pub influence: Vec<f64>,
    pub nuisances: Vec<NuisanceDiag>,
    pub trimmed: usize,
    pub warnings: Vec<String>,
}

impl DmlResult {
    /// Build from an estimate and its influence values.
    pub fn from_influence(estimand: &str, theta: f64, influence: Vec<f64>, alpha: f64) -> Self {
        let n = influence.len();
        let m = mean(&influence);
        let variance = (influence.iter().map(|v| v * v).sum::<f64>() / n as f64 - m * m).max(0.0);
        let se = (variance / n as f64).sqrt();
        let z = qnorm(1.0 - alpha / 2.0);
        DmlResult {
            estimand: estimand.to_string(),
            theta,
            se,
            variance,
            ci: (theta - z * se, theta + z * se),
            alpha,
            n,
            influence,
            nuisances: Vec::new(),
            trimmed: 0,
            warnings: Vec::new(),
        }
    }

    /// Whether the confidence interval contains `v`.
    pub fn covers(&self, v: f64) -> bool {
        self.ci.0 <= v && v <= self.ci.1
    }

    pub fn t_stat(&self) -> f64 {
        self.theta / self.se
    }
}

/// Per-observation parts of a linear score `ψ = ψᵇ − ψᵃθ`.
#[derive(Debug, Clone)]
pub struct LinearParts {
    pub psi_a: Vec<f64>,
    pub psi_b: Vec<f64>,
}

impl LinearParts {
    /// Solve `Eₙ[ψ] = 0` and attach influence values.
    pub fn solve(&self, estimand: &str, alpha: f64) -> Result<DmlResult> {
        let n = self.psi_a.len() as f64;
        let ja = self.psi_a.iter().sum::<f64>() / n;
        let scale = self.psi_a.iter().map(|v| v.abs()).sum::<f64>() / n;
        if ja == 0.0 || ja.abs() <= 1e-12 * scale.max(f64::MIN_POSITIVE) {
            return Err(Error::SingularJacobian);
        }
        let theta = self.psi_b.iter().sum::<f64>() / n / ja;
        let phi = self
            .psi_a
            .iter()
            .zip(&self.psi_b)
            .map(|(a, b)| (b - a * theta) / ja)
            .collect();
        Ok(DmlResult::from_influence(estimand, theta, phi, alpha))
    }
}

/// One nuisance regression request.
pub struct NuisanceTask<'a> {
    pub name: &'static str,
    pub learner: &'a dyn Learner,
    pub features: &'a DMatrix<f64>,
    pub target: Vec<f64>,
    /// Train only on rows where set (predictions are still made for all rows).
    pub mask: Option<Vec<bool>>,
    /// Clip predictions into `[clip, 1 − clip]`.
    pub propensity: bool,
}

/// Cross-fitted nuisance predictions by name.
#[derive(Debug, Clone, Default)]
pub struct Nuisances {
    pub values: BTreeMap<String, Vec<f64>>,
    pub diagnostics: Vec<NuisanceDiag>,
    pub trimmed: usize,
}

impl Nuisances {
    pub fn get(&self, name: &str) -> Result<&[f64]> {
        self.values
            .get(name)
            .map(|v| v.as_slice())
            .ok_or_else(|| Error::NuisanceFit(format!("nuisance `{name}` missing")))
    }

    /// Known nuisance values, e.g. from an oracle.
    pub fn with(mut self, name: &str, v: Vec<f64>) -> Self {
        self.values.insert(name.to_string(), v);
        self
    }

    /// Clip the named propensity into `[clip, 1 − clip]`, counting changes.
    pub fn clip(mut self, name: &str, clip: f64) -> Self {
        if let Some(v) = self.values.get_mut(name) {
            for p in v.iter_mut() {
                let c = p.clamp(clip, 1.0 - clip);
                if c != *p {
                    self.trimmed += 1;
                    *p = c;
                }
            }
        }
        self
    }
}

/// Cross-fit every task on the same plan and seed.
pub fn cross_fit_nuisances(tasks: &[NuisanceTask<'_>], plan: &CrossFitPlan, seed: u64, clip: f64) -> Result<Nuisances> {
    let mut out = Nuisances::default();
    for t in tasks {
        let cf = cross_fit_masked(t.learner, t.features, &t.target, plan, None, t.mask.as_deref(), seed)
            .map_err(|e| Error::NuisanceFit(format!("{}: {e}", t.name)))?;
        let mut pred = cf.predictions;
        let (mut se, mut cnt) = (0.0, 0usize);
        for i in 0..pred.len() {
            if t.mask.as_ref().is_none_or(|m| m[i]) {
                se += (t.target[i] - pred[i]).powi(2);
                cnt += 1;
            }
        }
        out.diagnostics.push(NuisanceDiag {
            name: t.name.to_string(),
            learner: t.learner.name(),
            rmse: (se / cnt.max(1) as f64).sqrt(),
        });
        if t.propensity {
            for p in pred.iter_mut() {
                let c = p.clamp(clip, 1.0 - clip);
                if c != *p {
                    out.trimmed += 1;
                    *p = c;
                }
            }
        }
        out.values.insert(t.name.to_string(), pred);
    }
    Ok(out)
}

/// An orthogonal moment function with its nuisance requirements.
pub trait Score: Sync {
    fn estimand(&self) -> &str;

    fn tasks(&self) -> Vec<NuisanceTask<'_>>;

    /// Linear decomposition given nuisances.
    fn linear_parts(&self, eta: &Nuisances) -> Result<LinearParts>;

    /// Per-observation score at `θ`.
    fn psi(&self, eta: &Nuisances, theta: f64) -> Result<Vec<f64>> {
        let lp = self.linear_parts(eta)?;
        Ok(lp.psi_b.iter().zip(&lp.psi_a).map(|(b, a)| b - a * theta).collect())
    }

    /// Post-estimation warnings (weak instruments, degenerate groups, ...).
    fn warnings(&self, _eta: &Nuisances, _res: &DmlResult) -> Vec<String> {
        Vec::new()
    }
}

/// Solve a score given its nuisances.
pub fn solve_score(score: &dyn Score, eta: &Nuisances, alpha: f64) -> Result<DmlResult> {
    let mut res = score.linear_parts(eta)?.solve(score.estimand(), alpha)?;
    res.nuisances = eta.diagnostics.clone();
    res.trimmed = eta.trimmed;
    if eta.trimmed > 0 {
        res.warnings.push(format!("{} propensity values clipped", eta.trimmed));
    }
    let w = score.warnings(eta, &res);
    res.warnings.extend(w);
    Ok(res)
}

/// Generic DML: cross-fit the nuisances, solve the moment equation, and
/// report normal-approximation inference.
pub fn generic_dml(score: &dyn Score, plan: &CrossFitPlan, opts: DmlOptions) -> Result<DmlResult> {
    let eta = cross_fit_nuisances(&score.tasks(), plan, opts.seed, opts.clip)?;
    solve_score(score, &eta, opts.alpha)
}

/// Solve a possibly nonlinear score by bisection on `[lo, hi]`; the Jacobian
/// is a central difference of `Eₙ[ψ]`.
pub fn solve_score_bracketed(score: &dyn Score, eta: &Nuisances, lo: f64, hi: f64, alpha: f64) -> Result<DmlResult> {
    let m = |t: f64| -> Result<f64> { Ok(mean(&score.psi(eta, t)?)) };
    let (mut a, mut b) = (lo, hi);
    let (mut fa, fb) = (m(a)?, m(b)?);
    if fa.signum() == fb.signum() && fa != 0.0 && fb != 0.0 {
        return Err(Error::InvalidInput("score does not change sign on the bracket".into()));
    }
    for _ in 0..200 {
        let c = 0.5 * (a + b);
        let fc = m(c)?;
        if fc == 0.0 || (b - a) < 1e-14 * (1.0 + c.abs()) {
            a = c;
            b = c;
            break;
        }
        if fc.signum() == fa.signum() {
            a = c;
            fa = fc;
        } else {
            b = c;
        }
    }
    let theta = 0.5 * (a + b);
    let h = 1e-6 * (1.0 + theta.abs());
    let j = (m(theta + h)? - m(theta - h)?) / (2.0 * h);
    if j.abs() < 1e-12 {
        return Err(Error::SingularJacobian);
    }
    let phi = score.psi(eta, theta)?.into_iter().map(|v| -v / j).collect();
    Ok(DmlResult::from_influence(score.estimand(), theta, phi, alpha))
}

fn mask_eq(v: &[f64], val: f64) -> Vec<bool> {
    v.iter().map(|x| *x == val).collect()
}

fn check_binary(name: &str, v: &[f64]) -> Result<()> {
    if v.iter().any(|x| *x != 0.0 && *x != 1.0) {
        return Err(Error::InvalidInput(format!("{name} must be 0/1")));
    }
    Ok(())
}

fn check_arms(d: &[f64]) -> Result<()> {
    check_binary("treatment", d)?;
    if !d.contains(&1.0) {
        return Err(Error::OneArmEmpty(1));
    }
    if !d.contains(&0.0) {
        return Err(Error::OneArmEmpty(0));
    }
    Ok(())
}

// ------------------------------------------------------------------ PLM

/// Partially linear model `Y = θD + g(X) + ε`.
pub struct PlmScore<'a> {
    pub y: &'a [f64],
    pub d: &'a [f64],
    pub x: &'a DMatrix<f64>,
    pub learner_l: &'a dyn Learner,
    pub learner_m: &'a dyn Learner,
}

impl Score for PlmScore<'_> {
    fn estimand(&self) -> &str {
        "plm"
    }

    fn tasks(&self) -> Vec<NuisanceTask<'_>> {
        vec![
            NuisanceTask { name: "l", learner: self.learner_l, features: self.x, target: self.y.to_vec(), mask: None, propensity: false },
            NuisanceTask { name: "m", learner: self.learner_m, features: self.x, target: self.d.to_vec(), mask: None, propensity: false },
        ]
    }

    fn linear_parts(&self, eta: &Nuisances) -> Result<LinearParts> {
        let (l, m) = (eta.get("l")?, eta.get("m")?);
        let yt: Vec<f64> = self.y.iter().zip(l).map(|(a, b)| a - b).collect();
        let dt: Vec<f64> = self.d.iter().zip(m).map(|(a, b)| a - b).collect();
        plm_parts(&yt, &dt, self.d)
    }
}

/// `ψᵃ = Ď²`, `ψᵇ = ĎY̌`, rejecting residual treatment variation below
/// `1e-10·Eₙ[d²]`.
pub fn plm_parts(yt: &[f64], dt: &[f64], d: &[f64]) -> Result<LinearParts> {
    let n = yt.len() as f64;
    let ed2 = dt.iter().map(|v| v * v).sum::<f64>() / n;
    let raw = d.iter().map(|v| v * v).sum::<f64>() / n;
    if ed2 < 1e-10 * raw || ed2 == 0.0 {
        return Err(Error::WeakResidualVariation);
    }
    Ok(LinearParts {
        psi_a: dt.iter().map(|v| v * v).collect(),
        psi_b: dt.iter().zip(yt).map(|(a, b)| a * b).collect(),
    })
}

pub fn dml_plm(
    y: &[f64],
    d: &[f64],
    x: &DMatrix<f64>,
    learner_l: &dyn Learner,
    learner_m: &dyn Learner,
    plan: &CrossFitPlan,
    opts: DmlOptions,
) -> Result<DmlResult> {
    check_len("d", d.len(), y.len())?;
    check_len("X rows", x.nrows(), y.len())?;
    generic_dml(&PlmScore { y, d, x, learner_l, learner_m }, plan, opts)
}

/// PLM fit whose nuisance learners were picked by cross-fitted MSPE.
#[derive(Debug, Clone, Serialize)]
pub struct SelectedPlm {
    pub result: DmlResult,
    pub l: Selection,
    pub m: Selection,
}

/// [`dml_plm`] with `ℓ` and `m` each chosen from `candidates` by
/// [`learner_select`] on the same plan and seed, so the chosen nuisances are
/// the very predictions used in the score.
pub fn dml_plm_select(
    y: &[f64],
    d: &[f64],
    x: &DMatrix<f64>,
    candidates: &[&dyn Learner],
    plan: &CrossFitPlan,
    opts: DmlOptions,
) -> Result<SelectedPlm> {
    check_len("d", d.len(), y.len())?;
    let l = learner_select(candidates, x, y, plan, opts.seed)?;
    let m = learner_select(candidates, x, d, plan, opts.seed)?;
    let result = dml_plm(y, d, x, candidates[l.best], candidates[m.best], plan, opts)?;
    Ok(SelectedPlm { result, l, m })
}

// ------------------------------------------------------------- IRM / ATE

/// Per-row doubly robust signal `g(1,X) − g(0,X) + H(Y − g(D,X))` with
/// `H = D/m − (1−D)/(1−m)`.
pub fn irm_signal(y: &[f64], d: &[f64], g0: &[f64], g1: &[f64], m: &[f64]) -> Vec<f64> {
    (0..y.len())
        .map(|i| {
            let h = d[i] / m[i] - (1.0 - d[i]) / (1.0 - m[i]);
            let gd = if d[i] == 1.0 { g1[i] } else { g0[i] };
            g1[i] - g0[i] + h * (y[i] - gd)
        })
        .collect()
}

/// Interactive regression model; nuisances `g0`, `g1` (outcome regressions
/// fit within each arm) and propensity `m`.
pub struct IrmScore<'a> {
    pub y: &'a [f64],
    pub d: &'a [f64],
    pub x: &'a DMatrix<f64>,
    pub learner_g: &'a dyn Learner,
    pub learner_m: &'a dyn Learner,
}

impl<'a> IrmScore<'a> {
    fn irm_tasks(&self) -> Vec<NuisanceTask<'a>> {
        vec![
            NuisanceTask { name: "g0", learner: self.learner_g, features: self.x, target: self.y.to_vec(), mask: Some(mask_eq(self.d, 0.0)), propensity: false },
            NuisanceTask { name: "g1", learner: self.learner_g, features: self.x, target: self.y.to_vec(), mask: Some(mask_eq(self.d, 1.0)), propensity: false },
            NuisanceTask { name: "m", learner: self.learner_m, features: self.x, target: self.d.to_vec(), mask: None, propensity: true },
        ]
    }

    fn signal(&self, eta: &Nuisances) -> Result<Vec<f64>> {
        Ok(irm_signal(self.y, self.d, eta.get("g0")?, eta.get("g1")?, eta.get("m")?))
    }
}

impl Score for IrmScore<'_> {
    fn estimand(&self) -> &str {
        "ate"
    }

    fn tasks(&self) -> Vec<NuisanceTask<'_>> {
        self.irm_tasks()
    }

    fn linear_parts(&self, eta: &Nuisances) -> Result<LinearParts> {
        Ok(LinearParts { psi_a: vec![1.0; self.y.len()], psi_b: self.signal(eta)? })
    }
}

#[allow(clippy::too_many_arguments)]
pub fn dml_irm_ate(
    y: &[f64],
    d: &[f64],
    x: &DMatrix<f64>,
    learner_g: &dyn Learner,
    learner_m: &dyn Learner,
    plan: &CrossFitPlan,
    opts: DmlOptions,
) -> Result<DmlResult> {
    check_len("d", d.len(), y.len())?;
    check_arms(d)?;
    generic_dml(&IrmScore { y, d, x, learner_g, learner_m }, plan, opts)
}

/// Group ATE: `Eₙ[(G/p̂)(φ − θ)] = 0`.
pub struct GateScore<'a> {
    pub irm: IrmScore<'a>,
    pub group: &'a [f64],
}

impl Score for GateScore<'_> {
    fn estimand(&self) -> &str {
        "gate"
    }

    fn tasks(&self) -> Vec<NuisanceTask<'_>> {
        self.irm.irm_tasks()
    }

    fn linear_parts(&self, eta: &Nuisances) -> Result<LinearParts> {
        let phi = self.irm.signal(eta)?;
        gate_parts(&phi, self.group)
    }

    fn warnings(&self, _eta: &Nuisances, _res: &DmlResult) -> Vec<String> {
        if self.group.iter().filter(|g| **g != 0.0).count() < 2 {
            vec!["group has a single observation; variance is degenerate".into()]
        } else {
            Vec::new()
        }
    }
}

/// GATE parts from IRM signals and a group indicator.
pub fn gate_parts(phi: &[f64], group: &[f64]) -> Result<LinearParts> {
    let p = mean(group);
    if p <= 0.0 {
        return Err(Error::EmptyGroup);
    }
    Ok(LinearParts {
        psi_a: group.iter().map(|g| g / p).collect(),
        psi_b: group.iter().zip(phi).map(|(g, f)| g / p * f).collect(),
    })
}

#[allow(clippy::too_many_arguments)]
pub fn dml_gate(
    y: &[f64],
    d: &[f64],
    x: &DMatrix<f64>,
    group: &[f64],
    learner_g: &dyn Learner,
    learner_m: &dyn Learner,
    plan: &CrossFitPlan,
    opts: DmlOptions,
) -> Result<DmlResult> {
    check_len("group", group.len(), y.len())?;
    check_arms(d)?;
    if !group.iter().any(|g| *g != 0.0) {
        return Err(Error::EmptyGroup);
    }
    generic_dml(&GateScore { irm: IrmScore { y, d, x, learner_g, learner_m }, group }, plan, opts)
}

/// ATET with the bounded composite weight `H·m = D − (1−D)m/(1−m)`.
pub struct AtetScore<'a> {
    pub y: &'a [f64],
    pub d: &'a [f64],
    pub x: &'a DMatrix<f64>,
    pub learner_g0: &'a dyn Learner,
    pub learner_m: &'a dyn Learner,
}

/// ATET parts from `g(0,X)` and clipped `m(X)`.
pub fn atet_parts(y: &[f64], d: &[f64], g0: &[f64], m: &[f64]) -> Result<LinearParts> {
    let p = mean(d);
    if p <= 0.0 {
        return Err(Error::NoTreatedUnits);
    }
    Ok(LinearParts {
        psi_a: d.iter().map(|v| v / p).collect(),
        psi_b: (0..y.len())
            .map(|i| {
                let hm = d[i] - (1.0 - d[i]) * m[i] / (1.0 - m[i]);
                hm * (y[i] - g0[i]) / p
            })
            .collect(),
    })
}

impl Score for AtetScore<'_> {
    fn estimand(&self) -> &str {
        "atet"
    }

    fn tasks(&self) -> Vec<NuisanceTask<'_>> {
        vec![
            NuisanceTask { name: "g0", learner: self.learner_g0, features: self.x, target: self.y.to_vec(), mask: Some(mask_eq(self.d, 0.0)), propensity: false },
            NuisanceTask { name: "m", learner: self.learner_m, features: self.x, target: self.d.to_vec(), mask: None, propensity: true },
        ]
    }

    fn linear_parts(&self, eta: &Nuisances) -> Result<LinearParts> {
        atet_parts(self.y, self.d, eta.get("g0")?, eta.get("m")?)
    }
}

pub fn dml_atet(
    y: &[f64],
    d: &[f64],
    x: &DMatrix<f64>,
    learner_g0: &dyn Learner,
    learner_m: &dyn Learner,
    plan: &CrossFitPlan,
    opts: DmlOptions,
) -> Result<DmlResult> {
    check_len("d", d.len(), y.len())?;
    check_binary("treatment", d)?;
    if !d.contains(&1.0) {
        return Err(Error::NoTreatedUnits);
    }
    generic_dml(&AtetScore { y, d, x, learner_g0, learner_m }, plan, opts)
}

// ------------------------------------------------------------------ PLIV

/// Partially linear IV model; nuisances `l = E[Y|X]`, `r = E[D|X]`, `m = E[Z|X]`.
pub struct PlivScore<'a> {
    pub y: &'a [f64],
    pub d: &'a [f64],
    pub z: &'a [f64],
    pub x: &'a DMatrix<f64>,
    pub learner_l: &'a dyn Learner,
    pub learner_r: &'a dyn Learner,
    pub learner_m: &'a dyn Learner,
}

/// Residualized `(Y̌, Ď, Ž)` from PLIV nuisances.
pub fn pliv_residuals(y: &[f64], d: &[f64], z: &[f64], eta: &Nuisances) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let sub = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(u, v)| u - v).collect::<Vec<f64>>();
    Ok((sub(y, eta.get("l")?), sub(d, eta.get("r")?), sub(z, eta.get("m")?)))
}

/// `ψᵃ = ĎŽ`, `ψᵇ = Y̌Ž`.
pub fn pliv_parts(yt: &[f64], dt: &[f64], zt: &[f64]) -> Result<LinearParts> {
    let s: f64 = dt.iter().zip(zt).map(|(a, b)| a * b).sum();
    if s == 0.0 {
        return Err(Error::ExactlyZeroCovariance);
    }
    Ok(LinearParts {
        psi_a: dt.iter().zip(zt).map(|(a, b)| a * b).collect(),
        psi_b: yt.iter().zip(zt).map(|(a, b)| a * b).collect(),
    })
}

impl Score for PlivScore<'_> {
    fn estimand(&self) -> &str {
        "pliv"
    }

    fn tasks(&self) -> Vec<NuisanceTask<'_>> {
        vec![
            NuisanceTask { name: "l", learner: self.learner_l, features: self.x, target: self.y.to_vec(), mask: None, propensity: false },
            NuisanceTask { name: "r", learner: self.learner_r, features: self.x, target: self.d.to_vec(), mask: None, propensity: false },
            NuisanceTask { name: "m", learner: self.learner_m, features: self.x, target: self.z.to_vec(), mask: None, propensity: false },
        ]
    }

    fn linear_parts(&self, eta: &Nuisances) -> Result<LinearParts> {
        let (yt, dt, zt) = pliv_residuals(self.y, self.d, self.z, eta)?;
        pliv_parts(&yt, &dt, &zt)
    }

    fn warnings(&self, eta: &Nuisances, _res: &DmlResult) -> Vec<String> {
        let Ok((_, dt, zt)) = pliv_residuals(self.y, self.d, self.z, eta) else {
            return Vec::new();
        };
        match first_stage_diag(&dt, &zt) {
            Ok(diag) if !diag.strong => vec![format!("weak instrument: first-stage t = {:.3}", diag.t_stat)],
            Err(e) => vec![format!("first-stage diagnostic failed: {e}")],
            _ => Vec::new(),
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn dml_pliv(
    y: &[f64],
    d: &[f64],
    z: &[f64],
    x: &DMatrix<f64>,
    learner_l: &dyn Learner,
    learner_r: &dyn Learner,
    learner_m: &dyn Learner,
    plan: &CrossFitPlan,
    opts: DmlOptions,
) -> Result<DmlResult> {
    check_len("d", d.len(), y.len())?;
    check_len("z", z.len(), y.len())?;
    generic_dml(&PlivScore { y, d, z, x, learner_l, learner_r, learner_m }, plan, opts)
}

/// Cross-fitted PLIV residuals `(Y̌, Ď, Ž)` on the same streams as [`dml_pliv`].
#[allow(clippy::too_many_arguments)]
pub fn pliv_residuals_fit(
    y: &[f64],
    d: &[f64],
    z: &[f64],
    x: &DMatrix<f64>,
    learner_l: &dyn Learner,
    learner_r: &dyn Learner,
    learner_m: &dyn Learner,
    plan: &CrossFitPlan,
    opts: DmlOptions,
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    check_len("d", d.len(), y.len())?;
    check_len("z", z.len(), y.len())?;
    let score = PlivScore { y, d, z, x, learner_l, learner_r, learner_m };
    let eta = cross_fit_nuisances(&score.tasks(), plan, opts.seed, opts.clip)?;
    pliv_residuals(y, d, z, &eta)
}

// ------------------------------------------------------------------ LATE

/// Local average treatment effect with binary instrument `Z` and treatment `D`.
///
/// Nuisances: `mu0`, `mu1` (outcome given `Z = z`, `X`), `m0`, `m1` (treatment
/// given `Z = z`, `X`) and instrument propensity `p`.
pub struct LateScore<'a> {
    pub y: &'a [f64],
    pub d: &'a [f64],
    pub z: &'a [f64],
    pub x: &'a DMatrix<f64>,
    pub learner_mu: &'a dyn Learner,
    pub learner_m: &'a dyn Learner,
    pub learner_p: &'a dyn Learner,
}

/// `ψᵇ = μ(1,X) − μ(0,X) + H(Y − μ(Z,X))`, `ψᵃ = m(1,X) − m(0,X) + H(D − m(Z,X))`,
/// `H = Z/p − (1−Z)/(1−p)`.
pub fn late_parts(y: &[f64], d: &[f64], z: &[f64], eta: &Nuisances) -> Result<LinearParts> {
    let psi_b = irm_signal(y, z, eta.get("mu0")?, eta.get("mu1")?, eta.get("p")?);
    let psi_a = irm_signal(d, z, eta.get("m0")?, eta.get("m1")?, eta.get("p")?);
    if mean(&psi_a).abs() < 1e-10 {
        return Err(Error::NoCompliance);
    }
    Ok(LinearParts { psi_a, psi_b })
}

impl Score for LateScore<'_> {
    fn estimand(&self) -> &str {
        "late"
    }

    fn tasks(&self) -> Vec<NuisanceTask<'_>> {
        let z0 = Some(mask_eq(self.z, 0.0));
        let z1 = Some(mask_eq(self.z, 1.0));
        vec![
            NuisanceTask { name: "mu0", learner: self.learner_mu, features: self.x, target: self.y.to_vec(), mask: z0.clone(), propensity: false },
            NuisanceTask { name: "mu1", learner: self.learner_mu, features: self.x, target: self.y.to_vec(), mask: z1.clone(), propensity: false },
            NuisanceTask { name: "m0", learner: self.learner_m, features: self.x, target: self.d.to_vec(), mask: z0, propensity: false },
            NuisanceTask { name: "m1", learner: self.learner_m, features: self.x, target: self.d.to_vec(), mask: z1, propensity: false },
            NuisanceTask { name: "p", learner: self.learner_p, features: self.x, target: self.z.to_vec(), mask: None, propensity: true },
        ]
    }

    fn linear_parts(&self, eta: &Nuisances) -> Result<LinearParts> {
        late_parts(self.y, self.d, self.z, eta)
    }
}

#[allow(clippy::too_many_arguments)]
pub fn dml_late(
    y: &[f64],
    d: &[f64],
    z: &[f64],
    x: &DMatrix<f64>,
    learner_mu: &dyn Learner,
    learner_m: &dyn Learner,
    learner_p: &dyn Learner,
    plan: &CrossFitPlan,
    opts: DmlOptions,
) -> Result<DmlResult> {
    check_len("d", d.len(), y.len())?;
    check_len("z", z.len(), y.len())?;
    check_binary("treatment", d)?;
    check_arms(z).map_err(|e| match e {
        Error::OneArmEmpty(a) => Error::InvalidInput(format!("instrument arm {a} is empty")),
        other => other,
    })?;
    generic_dml(&LateScore { y, d, z, x, learner_mu, learner_m, learner_p }, plan, opts)
}

// ------------------------------------------------------------------ DiD

/// Four-group-means difference-in-differences with `t ∈ {1, 2}`.
pub fn did_canonical(y: &[f64], d: &[f64], t: &[f64], alpha: f64) -> Result<DmlResult> {
    let n = y.len();
    check_len("d", d.len(), n)?;
    check_len("t", t.len(), n)?;
    check_binary("treatment", d)?;
    if t.iter().any(|v| *v != 1.0 && *v != 2.0) {
        return Err(Error::InvalidInput("period must be 1 or 2".into()));
    }
    let mut cells = [[(0usize, 0.0f64); 2]; 2];
    for i in 0..n {
        let c = &mut cells[d[i] as usize][(t[i] - 1.0) as usize];
        c.0 += 1;
        c.1 += y[i];
    }
    let mut means = [[0.0; 2]; 2];
    for a in 0..2 {
        for b in 0..2 {
            if cells[a][b].0 == 0 {
                return Err(Error::EmptyCell { d: a as u8, t: b as u8 + 1 });
            }
            means[a][b] = cells[a][b].1 / cells[a][b].0 as f64;
        }
    }
    let theta = (means[1][1] - means[1][0]) - (means[0][1] - means[0][0]);
    let influence = (0..n)
        .map(|i| {
            let (a, b) = (d[i] as usize, (t[i] - 1.0) as usize);
            let share = cells[a][b].0 as f64 / n as f64;
            let sign = if (a == 1) == (b == 1) { 1.0 } else { -1.0 };
            sign * (y[i] - means[a][b]) / share
        })
        .collect();
    let mut res = DmlResult::from_influence("did_canonical", theta, influence, alpha);
    if cells.iter().flatten().any(|c| c.0 < 2) {
        res.warnings.push("a cell has a single observation; its variance is zero".into());
    }
    Ok(res)
}

/// Conditional DiD for the ATET with panel data.
pub struct DidPanelScore<'a> {
    pub dy: Vec<f64>,
    pub d: &'a [f64],
    pub x: &'a DMatrix<f64>,
    pub learner_g: &'a dyn Learner,
    pub learner_m: &'a dyn Learner,
}

/// `ψᵇ = (D − m)/(p(1 − m))·(ΔY − g(0,X))`, `ψᵃ = D/p`.
pub fn did_panel_parts(dy: &[f64], d: &[f64], g0: &[f64], m: &[f64]) -> Result<LinearParts> {
    let p = mean(d);
    if p <= 0.0 {
        return Err(Error::NoTreatedUnits);
    }
    Ok(LinearParts {
        psi_a: d.iter().map(|v| v / p).collect(),
        psi_b: (0..dy.len()).map(|i| (d[i] - m[i]) / (p * (1.0 - m[i])) * (dy[i] - g0[i])).collect(),
    })
}

impl Score for DidPanelScore<'_> {
    fn estimand(&self) -> &str {
        "did_panel"
    }

    fn tasks(&self) -> Vec<NuisanceTask<'_>> {
        vec![
            NuisanceTask { name: "g0", learner: self.learner_g, features: self.x, target: self.dy.clone(), mask: Some(mask_eq(self.d, 0.0)), propensity: false },
            NuisanceTask { name: "m", learner: self.learner_m, features: self.x, target: self.d.to_vec(), mask: None, propensity: true },
        ]
    }

    fn linear_parts(&self, eta: &Nuisances) -> Result<LinearParts> {
        did_panel_parts(&self.dy, self.d, eta.get("g0")?, eta.get("m")?)
    }
}

#[allow(clippy::too_many_arguments)]
pub fn dml_did_panel(
    y1: &[f64],
    y2: &[f64],
    d: &[f64],
    x: &DMatrix<f64>,
    learner_g: &dyn Learner,
    learner_m: &dyn Learner,
    plan: &CrossFitPlan,
    opts: DmlOptions,
) -> Result<DmlResult> {
    check_len("y2", y2.len(), y1.len())?;
    check_len("d", d.len(), y1.len())?;
    check_binary("treatment", d)?;
    if !d.contains(&1.0) {
        return Err(Error::NoTreatedUnits);
    }
    if !d.contains(&0.0) {
        return Err(Error::OneArmEmpty(0));
    }
    let dy = y1.iter().zip(y2).map(|(a, b)| b - a).collect();
    generic_dml(&DidPanelScore { dy, d, x, learner_g, learner_m }, plan, opts)
}

/// Conditional DiD with repeated cross-sections; nuisances `g{d}{t}` fit in
/// each (treatment, period) cell and propensity `m`.
pub struct DidRcsScore<'a> {
    pub y: &'a [f64],
    pub t: &'a [f64],
    pub d: &'a [f64],
    pub x: &'a DMatrix<f64>,
    pub learner_g: &'a dyn Learner,
    pub learner_m: &'a dyn Learner,
}

/// Repeated cross-section ATET score with `T = 1{t = 2}`, `p = Eₙ[D]`,
/// `λ = Eₙ[T]`.
pub fn did_rcs_parts(y: &[f64], t: &[f64], d: &[f64], eta: &Nuisances) -> Result<LinearParts> {
    let (g01, g02, g11, g12, m) = (eta.get("g01")?, eta.get("g02")?, eta.get("g11")?, eta.get("g12")?, eta.get("m")?);
    let p = mean(d);
    let post: Vec<f64> = t.iter().map(|v| if *v == 2.0 { 1.0 } else { 0.0 }).collect();
    let lam = mean(&post);
    if p <= 0.0 {
        return Err(Error::NoTreatedUnits);
    }
    if lam <= 0.0 || lam >= 1.0 {
        return Err(Error::EmptyCell { d: 1, t: if lam <= 0.0 { 2 } else { 1 } });
    }
    let psi_b = (0..y.len())
        .map(|i| {
            let (di, ti, mi) = (d[i], post[i], m[i]);
            let treated = di * ti / (p * lam) * (y[i] - g12[i]) - di * (1.0 - ti) / (p * (1.0 - lam)) * (y[i] - g11[i])
                + di / p * (g12[i] - g11[i]);
            let control = mi * (1.0 - di) * ti / (p * lam * (1.0 - mi)) * (y[i] - g02[i])
                - mi * (1.0 - di) * (1.0 - ti) / (p * (1.0 - lam) * (1.0 - mi)) * (y[i] - g01[i])
                + di / p * (g02[i] - g01[i]);
            treated - control
        })
        .collect();
    Ok(LinearParts { psi_a: d.iter().map(|v| v / p).collect(), psi_b })
}

impl Score for DidRcsScore<'_> {
    fn estimand(&self) -> &str {
        "did_rcs"
    }

    fn tasks(&self) -> Vec<NuisanceTask<'_>> {
        let cell = |dv: f64, tv: f64| Some((0..self.y.len()).map(|i| self.d[i] == dv && self.t[i] == tv).collect());
        let g = |name: &'static str, dv: f64, tv: f64| NuisanceTask {
            name,
            learner: self.learner_g,
            features: self.x,
            target: self.y.to_vec(),
            mask: cell(dv, tv),
            propensity: false,
        };
        vec![
            g("g01", 0.0, 1.0),
            g("g02", 0.0, 2.0),
            g("g11", 1.0, 1.0),
            g("g12", 1.0, 2.0),
            NuisanceTask { name: "m", learner: self.learner_m, features: self.x, target: self.d.to_vec(), mask: None, propensity: true },
        ]
    }

    fn linear_parts(&self, eta: &Nuisances) -> Result<LinearParts> {
        did_rcs_parts(self.y, self.t, self.d, eta)
    }

    fn warnings(&self, _eta: &Nuisances, _res: &DmlResult) -> Vec<String> {
        let mut out = Vec::new();
        for (dv, tv) in [(0.0, 1.0), (0.0, 2.0), (1.0, 1.0), (1.0, 2.0)] {
            let size = (0..self.y.len()).filter(|&i| self.d[i] == dv && self.t[i] == tv).count();
            if size < 2 {
                out.push(format!("degenerate cell: d = {dv}, t = {tv} has {size} row"));
            }
        }
        out
    }
}

#[allow(clippy::too_many_arguments)]
pub fn dml_did_rcs(
    y: &[f64],
    t: &[f64],
    d: &[f64],
    x: &DMatrix<f64>,
    learner_g: &dyn Learner,
    learner_m: &dyn Learner,
    plan: &CrossFitPlan,
    opts: DmlOptions,
) -> Result<DmlResult> {
    let n = y.len();
    check_len("t", t.len(), n)?;
    check_len("d", d.len(), n)?;
    check_binary("treatment", d)?;
    if t.iter().any(|v| *v != 1.0 && *v != 2.0) {
        return Err(Error::InvalidInput("period must be 1 or 2".into()));
    }
    for dv in [0.0, 1.0] {
        for tv in [1.0, 2.0] {
            if !(0..n).any(|i| d[i] == dv && t[i] == tv) {
                return Err(Error::EmptyCell { d: dv as u8, t: tv as u8 });
            }
        }
    }
    generic_dml(&DidRcsScore { y, t, d, x, learner_g, learner_m }, plan, opts)
}

// ------------------------------------------------------------------ RCT

/// Randomized-trial estimator flavour.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum RctMode {
    /// Difference of two means.
    Cl,
    /// Additive covariate adjustment `y ~ 1 + d + W`.
    Cra,
    /// Interactive adjustment `y ~ 1 + d + W + d·W`.
    Ira,
}

/// Relative effect `θ₁/θ₀ − 1` with its delta-method interval.
#[derive(Debug, Clone, Serialize)]
pub struct RelativeEffect {
    pub estimate: f64,
    pub se: f64,
    pub ci: (f64, f64),
}

/// RCT output: the ATE plus control/treated levels and the relative effect.
#[derive(Debug, Clone, Serialize)]
pub struct RctResult {
    pub mode: RctMode,
    pub ate: DmlResult,
    pub control_mean: f64,
    pub relative: RelativeEffect,
}

impl RctResult {
    /// Vaccine efficacy `1 − θ₁/θ₀` with its interval.
    pub fn efficacy(&self) -> (f64, (f64, f64)) {
        (-self.relative.estimate, (-self.relative.ci.1, -self.relative.ci.0))
    }
}

fn relative(ate: f64, base: f64, var_ate: f64, var_base: f64, cov: f64, alpha: f64) -> RelativeEffect {
    let g = [1.0 / base, -ate / (base * base)];
    let v = g[0] * g[0] * var_ate + g[1] * g[1] * var_base + 2.0 * g[0] * g[1] * cov;
    let se = v.max(0.0).sqrt();
    let est = ate / base;
    let z = qnorm(1.0 - alpha / 2.0);
    RelativeEffect { estimate: est, se, ci: (est - z * se, est + z * se) }
}

/// CL, CRA or IRA estimates of the ATE in a randomized experiment.
///
/// Covariates are centered internally; columns that are constant after
/// centering are dropped with a warning.
pub fn rct_estimators(y: &[f64], d: &[f64], w: &DMatrix<f64>, mode: RctMode, alpha: f64) -> Result<RctResult> {
    let n = y.len();
    check_len("d", d.len(), n)?;
    check_len("W rows", w.nrows(), n)?;
    check_arms(d)?;
    let n1 = d.iter().filter(|v| **v == 1.0).count() as f64;
    let n0 = n as f64 - n1;
    if mode == RctMode::Cl || w.ncols() == 0 {
        let m1 = (0..n).filter(|&i| d[i] == 1.0).map(|i| y[i]).sum::<f64>() / n1;
        let m0 = (0..n).filter(|&i| d[i] == 0.0).map(|i| y[i]).sum::<f64>() / n0;
        let v1 = (0..n).filter(|&i| d[i] == 1.0).map(|i| (y[i] - m1).powi(2)).sum::<f64>() / n1 / n1;
        let v0 = (0..n).filter(|&i| d[i] == 0.0).map(|i| (y[i] - m0).powi(2)).sum::<f64>() / n0 / n0;
        let (p1, p0) = (n1 / n as f64, n0 / n as f64);
        let influence = (0..n)
            .map(|i| if d[i] == 1.0 { (y[i] - m1) / p1 } else { -(y[i] - m0) / p0 })
            .collect();
        let mut ate = DmlResult::from_influence("rct_cl", m1 - m0, influence, alpha);
        ate.estimand = format!("rct_{}", format!("{mode:?}").to_lowercase());
        // Relative effect from the two arm means: the ATE and the control mean
        // covary through the control arm.
        let rel = relative(m1 - m0, m0, v1 + v0, v0, -v0, alpha);
        return Ok(RctResult { mode, ate, control_mean: m0, relative: rel });
    }
    let mut keep = Vec::new();
    let mut wc = w.clone();
    for j in 0..w.ncols() {
        let mu = w.column(j).mean();
        for i in 0..n {
            wc[(i, j)] -= mu;
        }
        let scale = w.column(j).amax().max(1e-300);
        if wc.column(j).amax() > 1e-12 * scale {
            keep.push(j);
        }
    }
    let dropped = w.ncols() - keep.len();
    let wc = wc.select_columns(keep.iter());
    let dcol = column(d);
    let design = match mode {
        RctMode::Cra => with_intercept(&hstack(&[&dcol, &wc])),
        RctMode::Ira => {
            let mut inter = wc.clone();
            for i in 0..n {
                inter.row_mut(i).scale_mut(d[i]);
            }
            with_intercept(&hstack(&[&dcol, &wc, &inter]))
        }
        RctMode::Cl => unreachable!("handled above"),
    };
    let fit = ols_fit(&design, y, None)?;
    let vc = robust_variance(&fit, HcKind::Hc0)?;
    let influence = fit.influence(1)?;
    let mut ate = DmlResult::from_influence(&format!("rct_{}", format!("{mode:?}").to_lowercase()), fit.coefficients[1], influence, alpha);
    if dropped > 0 {
        ate.warnings.push(format!("{dropped} constant covariate column(s) dropped"));
    }
    let rel = relative(
        fit.coefficients[1],
        fit.coefficients[0],
        vc.matrix[(1, 1)],
        vc.matrix[(0, 0)],
        vc.matrix[(0, 1)],
        alpha,
    );
    Ok(RctResult { mode, ate, control_mean: fit.coefficients[0], relative: rel })
}

// ------------------------------------------------------------------ RDD

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Kernel {
    Triangular,
    Uniform,
}

impl Kernel {
    pub fn weight(&self, u: f64) -> f64 {
        match self {
            Kernel::Triangular => (1.0 - u.abs()).max(0.0),
            Kernel::Uniform => {
                if u.abs() <= 1.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Sharp regression discontinuity: the coefficient on `D = 1{x ≥ c}` in a
/// kernel-weighted regression of `y` on `(1, D, (x−c)/h, D(x−c)/h[, Z])`.
#[allow(clippy::too_many_arguments)]
pub fn rdd_sharp(
    y: &[f64],
    x: &[f64],
    cutoff: f64,
    h: f64,
    kernel: Kernel,
    z: Option<&DMatrix<f64>>,
    alpha: f64,
) -> Result<DmlResult> {
    let n = y.len();
    check_len("running variable", x.len(), n)?;
    if !(h > 0.0) {
        return Err(Error::InvalidInput("bandwidth must be positive".into()));
    }
    let w: Vec<f64> = x.iter().map(|v| kernel.weight((v - cutoff) / h)).collect();
    let idx: Vec<usize> = (0..n).filter(|&i| w[i] > 0.0).collect();
    let right = idx.iter().filter(|&&i| x[i] >= cutoff).count();
    let left = idx.len() - right;
    if left < 2 {
        return Err(Error::OneSideEmpty("left"));
    }
    if right < 2 {
        return Err(Error::OneSideEmpty("right"));
    }
    let extra = z.map_or(0, |m| m.ncols());
    let design = DMatrix::from_fn(idx.len(), 4 + extra, |r, c| {
        let i = idx[r];
        let dv = if x[i] >= cutoff { 1.0 } else { 0.0 };
        let u = (x[i] - cutoff) / h;
        match c {
            0 => 1.0,
            1 => dv,
            2 => u,
            3 => dv * u,
            k => z.expect("covariates present")[(i, k - 4)],
        }
    });
    let ys: Vec<f64> = idx.iter().map(|&i| y[i]).collect();
    let ws: Vec<f64> = idx.iter().map(|&i| w[i]).collect();
    let fit = ols_fit(&design, &ys, Some(&ws))?;
    let influence = fit.influence(1)?;
    Ok(DmlResult::from_influence("rdd_sharp", fit.coefficients[1], influence, alpha))
}
