//! Heterogeneous treatment effects: doubly robust signals, best linear
//! predictors, meta-learners, model scoring and ensembling, validation by
//! calibration and uplift curves, and policy evaluation and learning.
//!
//! Most validation routines take a vector of held-out signals `Y(η̂)` and the
//! predictions of a fixed model on the same rows. Thresholds that define
//! groups are always computed from separate (non-test) predictions.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::Serialize;

use crate::dml::{cross_fit_nuisances, irm_signal, DmlResult, IrmScore, NuisanceDiag, Score};
use crate::error::{check_len, Error, Result};
use crate::learners::{cross_fit_masked, tree_fit, CrossFitPlan, Learner, Predictor, RegressionTree};
use crate::linalg::{hstack, ols_fit, robust_variance, select_rows, with_intercept, HcKind};
use crate::rng;
use crate::stats::{correlation, max_gaussian_quantile, mean, qnorm, two_sided_p, var_n, BAND_DRAWS};

/// Default number of uplift-curve grid points (and the cap on it).
pub const MAX_UPLIFT_GRID: usize = 20;

/// Projected-gradient iteration cap for simplex-constrained stacking.
pub const STACK_ITERS: usize = 5_000;

/// Stationarity tolerance for simplex-constrained stacking.
pub const STACK_TOL: f64 = 1e-9;

fn check_arms(d: &[f64]) -> Result<()> {
    if d.iter().any(|v| *v != 0.0 && *v != 1.0) {
        return Err(Error::InvalidInput("treatment must be 0/1".into()));
    }
    if !d.contains(&1.0) {
        return Err(Error::OneArmEmpty(1));
    }
    if !d.contains(&0.0) {
        return Err(Error::OneArmEmpty(0));
    }
    Ok(())
}

fn clip_all(v: &mut [f64], clip: f64) -> usize {
    let mut c = 0;
    for p in v.iter_mut() {
        let q = p.clamp(clip, 1.0 - clip);
        if q != *p {
            *p = q;
            c += 1;
        }
    }
    c
}

// --------------------------------------------------------------- splits

/// Row indices of a random three-way split.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Split3 {
    pub train: Vec<usize>,
    pub score: Vec<usize>,
    pub test: Vec<usize>,
}

/// Shuffle rows on stream `(seed, "split", 0)` and cut by `fractions`
/// (train, score); the test share is the remainder.
pub fn three_way_split(n: usize, train: f64, score: f64, seed: u64) -> Result<Split3> {
    if !(train > 0.0 && score >= 0.0 && train + score < 1.0) {
        return Err(Error::InvalidInput("split fractions must be positive and sum below 1".into()));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::stream(seed, "split", 0));
    let a = (train * n as f64).round() as usize;
    let b = a + (score * n as f64).round() as usize;
    if a == 0 || b >= n {
        return Err(Error::InvalidInput(format!("split of {n} rows leaves an empty part")));
    }
    let mut s = Split3 { train: idx[..a].to_vec(), score: idx[a..b].to_vec(), test: idx[b..].to_vec() };
    s.train.sort_unstable();
    s.score.sort_unstable();
    s.test.sort_unstable();
    Ok(s)
}

// -------------------------------------------------------------- signals

/// Doubly robust signals with the nuisances that produced them.
#[derive(Debug, Clone, Serialize)]
pub struct DrSignal {
    pub values: Vec<f64>,
    pub g0: Vec<f64>,
    pub g1: Vec<f64>,
    pub mu: Vec<f64>,
    pub trimmed: usize,
    pub nuisances: Vec<NuisanceDiag>,
}

/// Cross-fitted signals `H(Y − g(D,Z)) + g(1,Z) − g(0,Z)`.
#[allow(clippy::too_many_arguments)]
pub fn dr_signal(
    y: &[f64],
    d: &[f64],
    z: &DMatrix<f64>,
    learner_g: &dyn Learner,
    learner_mu: &dyn Learner,
    plan: &CrossFitPlan,
    clip: f64,
    seed: u64,
) -> Result<DrSignal> {
    check_len("d", d.len(), y.len())?;
    check_arms(d)?;
    let score = IrmScore { y, d, x: z, learner_g, learner_m: learner_mu };
    let eta = cross_fit_nuisances(&score.tasks(), plan, seed, clip)?;
    let (g0, g1, mu) = (eta.get("g0")?.to_vec(), eta.get("g1")?.to_vec(), eta.get("m")?.to_vec());
    Ok(DrSignal { values: irm_signal(y, d, &g0, &g1, &mu), g0, g1, mu, trimmed: eta.trimmed, nuisances: eta.diagnostics })
}

/// Signals on `test` rows with nuisances trained on `train` rows only.
#[allow(clippy::too_many_arguments)]
pub fn dr_signal_holdout(
    y: &[f64],
    d: &[f64],
    z: &DMatrix<f64>,
    train: &[usize],
    test: &[usize],
    learner_g: &dyn Learner,
    learner_mu: &dyn Learner,
    clip: f64,
    seed: u64,
) -> Result<DrSignal> {
    check_len("d", d.len(), y.len())?;
    let dtr: Vec<f64> = train.iter().map(|&i| d[i]).collect();
    check_arms(&dtr)?;
    let zte = select_rows(z, test);
    let fit_arm = |arm: f64, tag: u64| -> Result<Vec<f64>> {
        let rows: Vec<usize> = train.iter().copied().filter(|&i| d[i] == arm).collect();
        let yr: Vec<f64> = rows.iter().map(|&i| y[i]).collect();
        let m = learner_g.fit(&select_rows(z, &rows), &yr, None, rng::derive(seed, "holdout", tag))?;
        Ok(m.predict(&zte))
    };
    let g0 = fit_arm(0.0, 0)?;
    let g1 = fit_arm(1.0, 1)?;
    let mut mu = learner_mu.fit(&select_rows(z, train), &dtr, None, rng::derive(seed, "holdout", 2))?.predict(&zte);
    let trimmed = clip_all(&mut mu, clip);
    let yte: Vec<f64> = test.iter().map(|&i| y[i]).collect();
    let dte: Vec<f64> = test.iter().map(|&i| d[i]).collect();
    Ok(DrSignal { values: irm_signal(&yte, &dte, &g0, &g1, &mu), g0, g1, mu, trimmed, nuisances: Vec::new() })
}

// ------------------------------------------------------------------ BLP

/// Best linear predictor of the CATE in a basis `p(X)`.
#[derive(Debug, Clone, Serialize)]
pub struct BlpCate {
    pub beta: Vec<f64>,
    pub se: Vec<f64>,
    pub ci: Vec<(f64, f64)>,
    /// Covariance of `β̂` (already divided by `n`).
    #[serde(skip)]
    pub omega: DMatrix<f64>,
    /// Fitted CATE at the evaluation points.
    pub grid_values: Vec<f64>,
    pub grid_se: Vec<f64>,
    pub pointwise: Vec<(f64, f64)>,
    pub uniform: Vec<(f64, f64)>,
    pub critical: f64,
}

/// OLS of signals on the basis with HC0 variance, plus pointwise and uniform
/// bands for `p(x)'β̂` over the rows of `eval`.
pub fn blp_cate(signals: &[f64], basis: &DMatrix<f64>, eval: Option<&DMatrix<f64>>, alpha: f64, seed: u64) -> Result<BlpCate> {
    let fit = ols_fit(basis, signals, None)?;
    let vc = robust_variance(&fit, HcKind::Hc0)?;
    let z = qnorm(1.0 - alpha / 2.0);
    let k = basis.ncols();
    let beta = fit.coefficients.clone();
    let ci = (0..k).map(|j| (beta[j] - z * vc.se[j], beta[j] + z * vc.se[j])).collect();
    let mut out = BlpCate {
        se: vc.se.clone(),
        ci,
        omega: vc.matrix.clone(),
        beta,
        grid_values: Vec::new(),
        grid_se: Vec::new(),
        pointwise: Vec::new(),
        uniform: Vec::new(),
        critical: z,
    };
    if let Some(g) = eval {
        check_len("evaluation basis columns", g.ncols(), k)?;
        let b = DVector::from_column_slice(&out.beta);
        let vals = g * &b;
        let cov = g * &vc.matrix * g.transpose();
        let se: Vec<f64> = (0..g.nrows()).map(|i| cov[(i, i)].max(0.0).sqrt()).collect();
        let c = max_gaussian_quantile(&correlation(&cov), alpha, true, BAND_DRAWS, seed);
        out.critical = c;
        out.grid_values = vals.iter().cloned().collect();
        out.pointwise = (0..g.nrows()).map(|i| (vals[i] - z * se[i], vals[i] + z * se[i])).collect();
        out.uniform = (0..g.nrows()).map(|i| (vals[i] - c * se[i], vals[i] + c * se[i])).collect();
        out.grid_se = se;
    }
    Ok(out)
}

// -------------------------------------------------------- meta-learners

/// Meta-learning strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum MetaKind {
    S,
    T,
    X,
    /// X-learner with covariate-shift weights in the effect stages.
    Dax,
    Dr,
    /// DR signal built on X-learner outcome models.
    Drx,
    R,
}

impl MetaKind {
    pub const ALL: [MetaKind; 7] = [MetaKind::S, MetaKind::T, MetaKind::X, MetaKind::Dax, MetaKind::Dr, MetaKind::Drx, MetaKind::R];
}

impl fmt::Display for MetaKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MetaKind::S => "S",
            MetaKind::T => "T",
            MetaKind::X => "X",
            MetaKind::Dax => "DAX",
            MetaKind::Dr => "DR",
            MetaKind::Drx => "DRX",
            MetaKind::R => "R",
        })
    }
}

impl FromStr for MetaKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_uppercase().as_str() {
            "S" => MetaKind::S,
            "T" => MetaKind::T,
            "X" => MetaKind::X,
            "DAX" => MetaKind::Dax,
            "DR" => MetaKind::Dr,
            "DRX" => MetaKind::Drx,
            "R" => MetaKind::R,
            other => return Err(Error::Config(format!("unknown meta-learner `{other}`"))),
        })
    }
}

/// A fitted CATE function of the effect covariates.
#[derive(Clone)]
pub struct CateModel {
    pub kind: String,
    pub n_train: usize,
    pub trimmed: usize,
    predictor: Arc<dyn Predictor>,
}

impl fmt::Debug for CateModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CateModel").field("kind", &self.kind).field("n_train", &self.n_train).finish()
    }
}

impl CateModel {
    pub fn new(kind: &str, predictor: Arc<dyn Predictor>) -> Self {
        CateModel { kind: kind.to_string(), n_train: 0, trimmed: 0, predictor }
    }

    pub fn predict(&self, x: &DMatrix<f64>) -> Vec<f64> {
        self.predictor.predict(x)
    }
}

/// Regression oracles for each meta-learning stage.
pub struct MetaLearners<'a> {
    /// Outcome regressions `g`, `gᵀ`, `gᶜ` and `h`.
    pub outcome: &'a dyn Learner,
    pub propensity: &'a dyn Learner,
    /// Effect regressions `δᵀ`, `δᶜ` of the X-type learners.
    pub effect: &'a dyn Learner,
    /// Final CATE regression on the effect covariates.
    pub final_stage: &'a dyn Learner,
    pub clip: f64,
}

/// Cross-fit `learner` on `(train_x, y)` and predict held-out rows of each
/// matrix in `evals` (same row order as `train_x`).
#[allow(clippy::too_many_arguments)]
fn cross_fit_eval(
    learner: &dyn Learner,
    train_x: &DMatrix<f64>,
    y: &[f64],
    plan: &CrossFitPlan,
    mask: Option<&[bool]>,
    seed: u64,
    evals: &[&DMatrix<f64>],
) -> Result<Vec<Vec<f64>>> {
    let n = train_x.nrows();
    let per_fold: Vec<(Vec<usize>, Vec<Vec<f64>>)> = (0..plan.k)
        .into_par_iter()
        .map(|k| {
            let te = plan.test_indices(k);
            let tr: Vec<usize> = plan.train_indices(k).into_iter().filter(|&i| mask.is_none_or(|m| m[i])).collect();
            if tr.is_empty() {
                return Err(Error::FoldTooSmall { fold: k, size: 0 });
            }
            let ytr: Vec<f64> = tr.iter().map(|&i| y[i]).collect();
            let m = learner
                .fit(&select_rows(train_x, &tr), &ytr, None, rng::derive(seed, "crossfit", k as u64))
                .map_err(|e| Error::NuisanceFit(format!("fold {k}: {e}")))?;
            Ok((te.clone(), evals.iter().map(|e| m.predict(&select_rows(e, &te))).collect()))
        })
        .collect::<Result<_>>()?;
    let mut out = vec![vec![0.0; n]; evals.len()];
    for (te, preds) in per_fold {
        for (e, p) in preds.into_iter().enumerate() {
            for (i, v) in te.iter().zip(p) {
                out[e][*i] = v;
            }
        }
    }
    Ok(out)
}

struct Stage1 {
    g0: Vec<f64>,
    g1: Vec<f64>,
    mu: Vec<f64>,
    trimmed: usize,
}

fn arm_models(y: &[f64], d: &[f64], z: &DMatrix<f64>, l: &MetaLearners<'_>, plan: &CrossFitPlan, seed: u64, with_mu: bool) -> Result<Stage1> {
    let m0: Vec<bool> = d.iter().map(|v| *v == 0.0).collect();
    let m1: Vec<bool> = d.iter().map(|v| *v == 1.0).collect();
    let g0 = cross_fit_masked(l.outcome, z, y, plan, None, Some(&m0), seed)?.predictions;
    let g1 = cross_fit_masked(l.outcome, z, y, plan, None, Some(&m1), seed)?.predictions;
    let (mu, trimmed) = if with_mu {
        let mut mu = cross_fit_masked(l.propensity, z, d, plan, None, None, seed)?.predictions;
        let t = clip_all(&mut mu, l.clip);
        (mu, t)
    } else {
        (Vec::new(), 0)
    };
    Ok(Stage1 { g0, g1, mu, trimmed })
}

/// Cross-fitted `(δᵀ, δᶜ)` with optional covariate-shift weights.
fn effect_models(y: &[f64], d: &[f64], z: &DMatrix<f64>, s: &Stage1, l: &MetaLearners<'_>, plan: &CrossFitPlan, seed: u64, adapt: bool) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = y.len();
    let m0: Vec<bool> = d.iter().map(|v| *v == 0.0).collect();
    let m1: Vec<bool> = d.iter().map(|v| *v == 1.0).collect();
    let lab_t: Vec<f64> = (0..n).map(|i| y[i] - s.g0[i]).collect();
    let lab_c: Vec<f64> = (0..n).map(|i| s.g1[i] - y[i]).collect();
    let (wt, wc): (Option<Vec<f64>>, Option<Vec<f64>>) = if adapt {
        (
            Some(s.mu.iter().map(|m| (1.0 - m) * (1.0 - m) / m).collect()),
            Some(s.mu.iter().map(|m| m * m / (1.0 - m)).collect()),
        )
    } else {
        (None, None)
    };
    let eseed = rng::derive(seed, "effect", 0);
    let dt = cross_fit_masked(l.effect, z, &lab_t, plan, wt.as_deref(), Some(&m1), eseed)?.predictions;
    let dc = cross_fit_masked(l.effect, z, &lab_c, plan, wc.as_deref(), Some(&m0), eseed)?.predictions;
    Ok((dt, dc))
}

/// Fit a meta-learner. First-stage nuisances are cross-fitted on `plan`;
/// the final stage is trained on all rows of `x`.
#[allow(clippy::too_many_arguments)]
pub fn meta_learn(
    kind: MetaKind,
    y: &[f64],
    d: &[f64],
    z: &DMatrix<f64>,
    x: &DMatrix<f64>,
    learners: &MetaLearners<'_>,
    plan: &CrossFitPlan,
    seed: u64,
) -> Result<CateModel> {
    let n = y.len();
    check_len("d", d.len(), n)?;
    check_len("Z rows", z.nrows(), n)?;
    check_len("X rows", x.nrows(), n)?;
    check_arms(d)?;
    let mut weights: Option<Vec<f64>> = None;
    let mut trimmed = 0;
    let labels: Vec<f64> = match kind {
        MetaKind::S => {
            let dz = hstack(&[&DMatrix::from_column_slice(n, 1, d), z]);
            let z1 = hstack(&[&DMatrix::from_element(n, 1, 1.0), z]);
            let z0 = hstack(&[&DMatrix::from_element(n, 1, 0.0), z]);
            let p = cross_fit_eval(learners.outcome, &dz, y, plan, None, seed, &[&z1, &z0])?;
            (0..n).map(|i| p[0][i] - p[1][i]).collect()
        }
        MetaKind::T => {
            let s = arm_models(y, d, z, learners, plan, seed, false)?;
            (0..n).map(|i| s.g1[i] - s.g0[i]).collect()
        }
        MetaKind::X | MetaKind::Dax => {
            let s = arm_models(y, d, z, learners, plan, seed, true)?;
            trimmed = s.trimmed;
            let (dt, dc) = effect_models(y, d, z, &s, learners, plan, seed, kind == MetaKind::Dax)?;
            (0..n).map(|i| dt[i] * (1.0 - s.mu[i]) + dc[i] * s.mu[i]).collect()
        }
        MetaKind::Dr => {
            let s = arm_models(y, d, z, learners, plan, seed, true)?;
            trimmed = s.trimmed;
            irm_signal(y, d, &s.g0, &s.g1, &s.mu)
        }
        MetaKind::Drx => {
            let s = arm_models(y, d, z, learners, plan, seed, true)?;
            trimmed = s.trimmed;
            let (dt, dc) = effect_models(y, d, z, &s, learners, plan, seed, false)?;
            let g1x: Vec<f64> = (0..n).map(|i| (1.0 - s.mu[i]) * (s.g0[i] + dt[i]) + s.mu[i] * s.g1[i]).collect();
            let g0x: Vec<f64> = (0..n).map(|i| (1.0 - s.mu[i]) * s.g0[i] + s.mu[i] * (s.g1[i] - dc[i])).collect();
            irm_signal(y, d, &g0x, &g1x, &s.mu)
        }
        MetaKind::R => {
            let h = cross_fit_masked(learners.outcome, z, y, plan, None, None, seed)?.predictions;
            let mut mu = cross_fit_masked(learners.propensity, z, d, plan, None, None, seed)?.predictions;
            trimmed = clip_all(&mut mu, learners.clip);
            let yt: Vec<f64> = (0..n).map(|i| y[i] - h[i]).collect();
            let dt: Vec<f64> = (0..n).map(|i| d[i] - mu[i]).collect();
            let w: Vec<f64> = dt.iter().map(|v| v * v).collect();
            if w.iter().cloned().fold(0.0, f64::max) <= 1e-12 {
                return Err(Error::WeightOverflow);
            }
            let lab = (0..n).map(|i| if dt[i] != 0.0 { yt[i] / dt[i] } else { 0.0 }).collect();
            weights = Some(w);
            lab
        }
    };
    let fin = learners.final_stage.fit(x, &labels, weights.as_deref(), rng::derive(seed, "final", 0))?;
    Ok(CateModel { kind: kind.to_string(), n_train: n, trimmed, predictor: Arc::from(fin) })
}

// ---------------------------------------------------- scoring/stacking

/// Doubly robust loss and its improvement over a constant model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DrScore {
    pub loss: f64,
    pub constant_loss: f64,
    /// `(L̂(τ̂_c) − L̂(τ))/L̂(τ̂_c)`.
    pub score: f64,
}

/// `L̂_DR(τ) = Eₙ[(Y(η̂) − τ(X))²]`.
pub fn dr_loss(tau: &[f64], signals: &[f64]) -> f64 {
    tau.iter().zip(signals).map(|(t, s)| (s - t).powi(2)).sum::<f64>() / signals.len() as f64
}

/// Score of `tau` against the constant model `constant` (typically the
/// training-set ATE).
pub fn dr_score(tau: &[f64], signals: &[f64], constant: f64) -> Result<DrScore> {
    check_len("model predictions", tau.len(), signals.len())?;
    let loss = dr_loss(tau, signals);
    let constant_loss = signals.iter().map(|s| (s - constant).powi(2)).sum::<f64>() / signals.len() as f64;
    let score = if constant_loss > 0.0 { (constant_loss - loss) / constant_loss } else { 0.0 };
    Ok(DrScore { loss, constant_loss, score })
}

/// Difference in DR loss between two models with its interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ModelComparison {
    pub delta: f64,
    pub variance: f64,
    pub se: f64,
    pub ci: (f64, f64),
}

/// `δ̂ = L̂(τᵢ) − L̂(τⱼ)` with variance of the per-row loss differences.
pub fn compare_models(ti: &[f64], tj: &[f64], signals: &[f64], alpha: f64) -> Result<ModelComparison> {
    let n = signals.len();
    check_len("model i", ti.len(), n)?;
    check_len("model j", tj.len(), n)?;
    let dist = ti.iter().zip(tj).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n as f64;
    let scale = signals.iter().map(|s| s * s).sum::<f64>() / n as f64;
    if dist <= 1e-12 * scale.max(1.0) {
        return Err(Error::IndistinguishableModels);
    }
    let diff: Vec<f64> = (0..n).map(|i| (signals[i] - ti[i]).powi(2) - (signals[i] - tj[i]).powi(2)).collect();
    let delta = mean(&diff);
    let variance = var_n(&diff);
    let se = (variance / n as f64).sqrt();
    let z = qnorm(1.0 - alpha / 2.0);
    Ok(ModelComparison { delta, variance, se, ci: (delta - z * se, delta + z * se) })
}

/// Stacking rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum EnsembleMethod {
    Best,
    Convex,
    QAgg,
}

impl FromStr for EnsembleMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "best" => Ok(EnsembleMethod::Best),
            "convex" => Ok(EnsembleMethod::Convex),
            "qagg" | "q-aggregation" => Ok(EnsembleMethod::QAgg),
            other => Err(Error::Config(format!("unknown ensemble method `{other}`"))),
        }
    }
}

/// Simplex weights over base models.
#[derive(Debug, Clone, Serialize)]
pub struct Ensemble {
    pub method: EnsembleMethod,
    pub weights: Vec<f64>,
    /// DR loss of each base model on the scoring rows.
    pub losses: Vec<f64>,
    /// Fixed intercept; when set, base models enter de-meaned.
    pub intercept: Option<f64>,
    /// Scoring-set means used for de-meaning.
    pub centers: Vec<f64>,
    pub iterations: usize,
}

impl Ensemble {
    /// Combine base-model predictions `preds[m][i]`.
    pub fn combine(&self, preds: &[Vec<f64>]) -> Vec<f64> {
        let n = preds.first().map_or(0, |p| p.len());
        (0..n)
            .map(|i| {
                let s: f64 = (0..preds.len())
                    .map(|m| self.weights[m] * (preds[m][i] - if self.intercept.is_some() { self.centers[m] } else { 0.0 }))
                    .sum();
                s + self.intercept.unwrap_or(0.0)
            })
            .collect()
    }
}

/// Euclidean projection onto the probability simplex.
pub fn project_simplex(v: &[f64]) -> Vec<f64> {
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut css = 0.0;
    let mut theta = 0.0;
    for (k, uk) in u.iter().enumerate() {
        css += uk;
        let t = (css - 1.0) / (k + 1) as f64;
        if uk - t > 0.0 {
            theta = t;
        }
    }
    v.iter().map(|x| (x - theta).max(0.0)).collect()
}

/// Minimize `w'Aw − 2b'w + c'w` over the simplex by projected gradient from
/// uniform weights.
fn simplex_quadratic(a: &DMatrix<f64>, b: &[f64], c: &[f64]) -> (Vec<f64>, usize) {
    let m = b.len();
    let mut w = vec![1.0 / m as f64; m];
    let lmax = a.clone().symmetric_eigenvalues().iter().cloned().fold(0.0, f64::max);
    if lmax <= 0.0 && c.iter().all(|v| *v == c[0]) && b.iter().all(|v| *v == b[0]) {
        return (w, 0);
    }
    let step = if lmax > 0.0 { 1.0 / (2.0 * lmax) } else { 1.0 };
    for it in 0..STACK_ITERS {
        let grad: Vec<f64> = (0..m).map(|i| 2.0 * (0..m).map(|j| a[(i, j)] * w[j]).sum::<f64>() - 2.0 * b[i] + c[i]).collect();
        let next = project_simplex(&w.iter().zip(&grad).map(|(x, g)| x - step * g).collect::<Vec<_>>());
        let moved = next.iter().zip(&w).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt() / step;
        w = next;
        if moved < STACK_TOL {
            return (w, it + 1);
        }
    }
    (w, STACK_ITERS)
}

/// Stack base models scored on held-out signals. `preds[m]` holds model
/// `m`'s predictions on the scoring rows.
pub fn ensemble(preds: &[Vec<f64>], signals: &[f64], method: EnsembleMethod, intercept: Option<f64>) -> Result<Ensemble> {
    let m = preds.len();
    if m == 0 {
        return Err(Error::InvalidInput("no models to stack".into()));
    }
    let n = signals.len();
    for p in preds {
        check_len("model predictions", p.len(), n)?;
    }
    let centers: Vec<f64> = preds.iter().map(|p| mean(p)).collect();
    let cols: Vec<Vec<f64>> = match intercept {
        Some(c) => preds.iter().zip(&centers).map(|(p, mu)| p.iter().map(|v| c + v - mu).collect()).collect(),
        None => preds.to_vec(),
    };
    let losses: Vec<f64> = cols.iter().map(|p| dr_loss(p, signals)).collect();
    let (weights, iterations) = match method {
        EnsembleMethod::Best => {
            let mut best = 0;
            for k in 1..m {
                if losses[k] < losses[best] {
                    best = k;
                }
            }
            let mut w = vec![0.0; m];
            w[best] = 1.0;
            (w, 0)
        }
        EnsembleMethod::Convex | EnsembleMethod::QAgg => {
            let a = DMatrix::from_fn(m, m, |i, j| cols[i].iter().zip(&cols[j]).map(|(u, v)| u * v).sum::<f64>() / n as f64);
            let b: Vec<f64> = cols.iter().map(|p| p.iter().zip(signals).map(|(u, s)| u * s).sum::<f64>() / n as f64).collect();
            let c = if method == EnsembleMethod::QAgg { losses.clone() } else { vec![0.0; m] };
            simplex_quadratic(&a, &b, &c)
        }
    };
    Ok(Ensemble { method, weights, losses, intercept, centers, iterations })
}

/// Q-aggregation objective `L̂(Σwτ) + Σw L̂(τ)` at `w`.
pub fn qagg_objective(preds: &[Vec<f64>], signals: &[f64], w: &[f64]) -> f64 {
    let n = signals.len();
    let mix: Vec<f64> = (0..n).map(|i| (0..preds.len()).map(|m| w[m] * preds[m][i]).sum()).collect();
    dr_loss(&mix, signals) + preds.iter().zip(w).map(|(p, wm)| wm * dr_loss(p, signals)).sum::<f64>()
}

// ------------------------------------------------------------ validation

/// Regression of signals on `(1, τ − Eₙτ)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HeterogeneityTest {
    pub beta0: f64,
    pub beta1: f64,
    pub se0: f64,
    pub se1: f64,
    pub p_value: f64,
    pub ci1: (f64, f64),
}

pub fn heterogeneity_blp_test(tau: &[f64], signals: &[f64], alpha: f64) -> Result<HeterogeneityTest> {
    let n = signals.len();
    check_len("model predictions", tau.len(), n)?;
    let m = mean(tau);
    if var_n(tau) <= 1e-12 * (1.0 + m * m) {
        return Err(Error::ConstantModel);
    }
    let design = with_intercept(&DMatrix::from_fn(n, 1, |i, _| tau[i] - m));
    let fit = ols_fit(&design, signals, None)?;
    let vc = robust_variance(&fit, HcKind::Hc0)?;
    let z = qnorm(1.0 - alpha / 2.0);
    let (b1, s1) = (fit.coefficients[1], vc.se[1]);
    Ok(HeterogeneityTest {
        beta0: fit.coefficients[0],
        beta1: b1,
        se0: vc.se[0],
        se1: s1,
        p_value: two_sided_p(b1 / s1),
        ci1: (b1 - z * s1, b1 + z * s1),
    })
}

/// Interior bin edges at the empirical `k/K` quantiles of reference values.
pub fn quantile_thresholds(reference: &[f64], bins: usize) -> Vec<f64> {
    let mut s = reference.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    (1..bins)
        .map(|k| {
            let idx = ((k as f64 / bins as f64) * s.len() as f64).ceil() as usize;
            s[idx.clamp(1, s.len()) - 1] + 0.0
        })
        .map(|v| {
            // Edge sits just above the quantile so that the order statistic
            // itself lands in the lower bin.
            let next = s.iter().cloned().find(|x| *x > v);
            next.map_or(v, |nx| 0.5 * (v + nx))
        })
        .collect()
}

/// Bin of `v` given sorted interior edges: the number of edges `≤ v`.
pub fn bin_of(v: f64, edges: &[f64]) -> usize {
    edges.iter().filter(|e| v >= **e).count()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CalibrationBin {
    pub size: usize,
    pub theta_dr: f64,
    pub theta_model: f64,
    pub se: f64,
    pub ci: (f64, f64),
}

#[derive(Debug, Clone, Serialize)]
pub struct Calibration {
    pub bins: Vec<CalibrationBin>,
    pub cal1: f64,
    pub cal2: f64,
}

/// Binned calibration with edges from non-test data; bins weighted by
/// `n_k/n`.
pub fn calibration(tau: &[f64], signals: &[f64], edges: &[f64], alpha: f64) -> Result<Calibration> {
    let n = signals.len();
    check_len("model predictions", tau.len(), n)?;
    let k = edges.len() + 1;
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, t) in tau.iter().enumerate() {
        groups[bin_of(*t, edges)].push(i);
    }
    let z = qnorm(1.0 - alpha / 2.0);
    let mut bins = Vec::with_capacity(k);
    let (mut cal1, mut cal2) = (0.0, 0.0);
    for (b, g) in groups.iter().enumerate() {
        if g.is_empty() {
            return Err(Error::EmptyBin(b));
        }
        let s: Vec<f64> = g.iter().map(|&i| signals[i]).collect();
        let theta_dr = mean(&s);
        let theta_model = g.iter().map(|&i| tau[i]).sum::<f64>() / g.len() as f64;
        let se = (var_n(&s) / g.len() as f64).sqrt();
        let share = g.len() as f64 / n as f64;
        cal1 += (theta_dr - theta_model).abs() * share;
        cal2 += (theta_dr - theta_model).powi(2) * share;
        bins.push(CalibrationBin { size: g.len(), theta_dr, theta_model, se, ci: (theta_dr - z * se, theta_dr + z * se) });
    }
    Ok(Calibration { bins, cal1, cal2 })
}

/// Threshold `μ(τ, q)` (the `⌈qn⌉`-th largest reference value) and the tie
/// probability that makes the expected treated share equal `q`. At `q = 1`
/// everyone is treated whatever the reference holds.
pub fn top_threshold(reference: &[f64], q: f64) -> (f64, f64) {
    if q >= 1.0 {
        return (f64::NEG_INFINITY, 1.0);
    }
    let mut s = reference.to_vec();
    s.sort_by(|a, b| b.total_cmp(a));
    let n = s.len();
    let k = ((q * n as f64 - 1e-9).ceil() as usize).clamp(1, n);
    let mu = s[k - 1];
    let gt = s.iter().filter(|v| **v > mu).count() as f64 / n as f64;
    let eq = s.iter().filter(|v| **v == mu).count() as f64 / n as f64;
    let lambda = ((q - gt) / eq).clamp(0.0, 1.0);
    (mu, lambda)
}

/// Per-row treatment probability of the tie-broken threshold policy.
pub fn threshold_policy(tau: &[f64], mu: f64, lambda: f64) -> Vec<f64> {
    tau.iter().map(|t| if *t > mu { 1.0 } else if *t == mu { lambda } else { 0.0 }).collect()
}

/// One curve with pointwise and uniform inference and its area.
#[derive(Debug, Clone, Serialize)]
pub struct CurveInference {
    pub estimates: Vec<f64>,
    pub se: Vec<f64>,
    pub critical_two: f64,
    pub critical_one: f64,
    pub band: Vec<(f64, f64)>,
    pub lower: Vec<f64>,
    pub area: f64,
    pub area_se: f64,
    /// One-sided lower confidence bound for the area.
    pub area_lower: f64,
}

/// TOC and QINI curves.
#[derive(Debug, Clone, Serialize)]
pub struct UpliftCurves {
    pub q: Vec<f64>,
    pub thresholds: Vec<f64>,
    pub ties: Vec<f64>,
    pub pi_hat: Vec<f64>,
    pub toc: CurveInference,
    pub qini: CurveInference,
}

impl UpliftCurves {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("q,toc,toc_lo,toc_hi,qini,qini_lo,qini_hi\n");
        for l in 0..self.q.len() {
            s.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                self.q[l], self.toc.estimates[l], self.toc.band[l].0, self.toc.band[l].1, self.qini.estimates[l], self.qini.band[l].0, self.qini.band[l].1
            ));
        }
        s
    }
}

/// Default grid `1/p, 2/p, …, 1`.
pub fn uplift_grid(p: usize) -> Vec<f64> {
    let p = p.clamp(1, MAX_UPLIFT_GRID);
    (1..=p).map(|l| l as f64 / p as f64).collect()
}

fn curve(psi: Vec<Vec<f64>>, est: Vec<f64>, widths: &[f64], n: usize, alpha: f64, seed: u64) -> CurveInference {
    let p = est.len();
    let v = DMatrix::from_fn(p, p, |a, b| psi[a].iter().zip(&psi[b]).map(|(x, y)| x * y).sum::<f64>() / n as f64);
    let se: Vec<f64> = (0..p).map(|l| (v[(l, l)].max(0.0) / n as f64).sqrt()).collect();
    let corr = correlation(&v);
    let c2 = max_gaussian_quantile(&corr, alpha, true, BAND_DRAWS, seed);
    let c1 = max_gaussian_quantile(&corr, alpha, false, BAND_DRAWS, seed);
    let band = (0..p).map(|l| (est[l] - c2 * se[l], est[l] + c2 * se[l])).collect();
    let lower = (0..p).map(|l| est[l] - c1 * se[l]).collect();
    let area: f64 = est.iter().zip(widths).map(|(e, w)| e * w).sum();
    let pa: Vec<f64> = (0..n).map(|i| (0..p).map(|l| psi[l][i] * widths[l]).sum()).collect();
    let area_se = (pa.iter().map(|v| v * v).sum::<f64>() / n as f64 / n as f64).sqrt();
    CurveInference {
        estimates: est,
        se,
        critical_two: c2,
        critical_one: c1,
        band,
        lower,
        area,
        area_se,
        area_lower: area - qnorm(1.0 - alpha) * area_se,
    }
}

/// TOC and QINI curves for a fixed model on test rows.
///
/// `reference` holds the model's predictions on non-test rows and fixes the
/// thresholds and tie probabilities. Areas use `q_{p+1} = 1`.
pub fn toc_qini(tau: &[f64], signals: &[f64], reference: &[f64], grid: &[f64], alpha: f64, seed: u64) -> Result<UpliftCurves> {
    let n = signals.len();
    check_len("model predictions", tau.len(), n)?;
    if grid.is_empty() || grid.iter().any(|q| !(*q > 0.0 && *q <= 1.0)) || reference.is_empty() {
        return Err(Error::InvalidInput("uplift grid must lie in (0, 1] and reference must be nonempty".into()));
    }
    let theta = mean(signals);
    let (mut thresholds, mut ties, mut pi_hat, mut toc, mut qini) = (vec![], vec![], vec![], vec![], vec![]);
    let (mut psi_t, mut psi_q) = (vec![], vec![]);
    for (l, &q) in grid.iter().enumerate() {
        let (mu, lambda) = top_threshold(reference, q);
        let w = threshold_policy(tau, mu, lambda);
        let pi = mean(&w);
        if pi <= 0.0 {
            return Err(Error::EmptyTopGroup(l));
        }
        let qn = signals.iter().zip(&w).map(|(s, wi)| (s - theta) * (wi - pi)).sum::<f64>() / n as f64;
        let tc = qn / pi;
        psi_t.push((0..n).map(|i| (signals[i] - theta) * (w[i] / pi - 1.0) - tc).collect::<Vec<f64>>());
        psi_q.push((0..n).map(|i| (signals[i] - theta) * (w[i] - pi) - qn).collect::<Vec<f64>>());
        thresholds.push(mu);
        ties.push(lambda);
        pi_hat.push(pi);
        toc.push(tc);
        qini.push(qn);
    }
    let widths: Vec<f64> = (0..grid.len()).map(|l| grid.get(l + 1).copied().unwrap_or(1.0) - grid[l]).collect();
    Ok(UpliftCurves {
        q: grid.to_vec(),
        thresholds,
        ties,
        pi_hat,
        toc: curve(psi_t, toc, &widths, n, alpha, seed),
        qini: curve(psi_q, qini, &widths, n, alpha, rng::derive(seed, "band", 1)),
    })
}

// --------------------------------------------------------------- policy

/// `V̂(π) = Eₙ[π(X)Y(η̂)]` with centered influence values.
pub fn policy_value(pi: &[f64], signals: &[f64], alpha: f64) -> Result<DmlResult> {
    check_len("policy", pi.len(), signals.len())?;
    if pi.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::InvalidInput("policy values must lie in [0, 1]".into()));
    }
    let v: Vec<f64> = pi.iter().zip(signals).map(|(p, s)| p * s).collect();
    let theta = mean(&v);
    Ok(DmlResult::from_influence("policy_value", theta, v.into_iter().map(|x| x - theta).collect(), alpha))
}

/// Value of the plug-in optimal policy.
#[derive(Debug, Clone, Serialize)]
pub struct OptimalPolicy {
    pub value: DmlResult,
    /// Treatment threshold (the Lagrange multiplier of the share constraint).
    pub threshold: f64,
    pub tie_prob: f64,
    pub treated_share: f64,
}

/// Unconstrained `1{τ̂ ≥ 0}` or, with `constraint = (q, reference)`, the
/// tie-broken top-`q` threshold policy.
pub fn optimal_policy_value(signals: &[f64], tau: &[f64], constraint: Option<(f64, &[f64])>, alpha: f64) -> Result<OptimalPolicy> {
    let (threshold, tie_prob, pi) = match constraint {
        None => (0.0, 1.0, threshold_policy(tau, 0.0, 1.0)),
        Some((q, reference)) => {
            if !(q > 0.0 && q <= 1.0) || reference.is_empty() {
                return Err(Error::InvalidInput("treated share must lie in (0, 1]".into()));
            }
            let (mu, lam) = top_threshold(reference, q);
            (mu, lam, threshold_policy(tau, mu, lam))
        }
    };
    let treated_share = mean(&pi);
    Ok(OptimalPolicy { value: policy_value(&pi, signals, alpha)?, threshold, tie_prob, treated_share })
}

/// Shallow tree treatment rule.
#[derive(Debug, Clone, Serialize)]
pub struct PolicyTree {
    pub tree: RegressionTree,
    pub cost: f64,
}

impl PolicyTree {
    /// `1` where the leaf's weighted label mean is positive.
    pub fn treat(&self, x: &DMatrix<f64>) -> Vec<f64> {
        self.tree.predict(x).into_iter().map(|v| if v > 0.0 { 1.0 } else { 0.0 }).collect()
    }
}

/// Learned policy plus its value on held-out data.
#[derive(Debug, Clone, Serialize)]
pub struct PolicyLearning {
    pub policy: PolicyTree,
    pub value: Option<DmlResult>,
}

/// Weighted classification with labels `sign(Y − c)` and weights `|Y − c|`,
/// fit by a regression tree on the ±1 encoding.
pub fn policy_learn(signals: &[f64], x: &DMatrix<f64>, max_depth: usize, min_leaf: usize, cost: f64) -> Result<PolicyTree> {
    check_len("X rows", x.nrows(), signals.len())?;
    let adj: Vec<f64> = signals.iter().map(|s| s - cost).collect();
    let labels: Vec<f64> = adj.iter().map(|a| if *a > 0.0 { 1.0 } else { -1.0 }).collect();
    let weights: Vec<f64> = adj.iter().map(|a| a.abs()).collect();
    let tree = tree_fit(x, &labels, max_depth, min_leaf, Some(&weights))?;
    Ok(PolicyTree { tree, cost })
}

/// Learn on one sample, evaluate on another (signals net of cost).
#[allow(clippy::too_many_arguments)]
pub fn policy_learn_evaluate(
    signals: &[f64],
    x: &DMatrix<f64>,
    test_signals: &[f64],
    test_x: &DMatrix<f64>,
    max_depth: usize,
    min_leaf: usize,
    cost: f64,
    alpha: f64,
) -> Result<PolicyLearning> {
    let policy = policy_learn(signals, x, max_depth, min_leaf, cost)?;
    let net: Vec<f64> = test_signals.iter().map(|s| s - cost).collect();
    let value = Some(policy_value(&policy.treat(test_x), &net, alpha)?);
    Ok(PolicyLearning { policy, value })
}

// ------------------------------------------------------------- pipeline

/// Settings for [`cate_pipeline`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PipelineOptions {
    pub train: f64,
    pub score: f64,
    pub folds: usize,
    pub method: EnsembleMethod,
    pub bins: usize,
    pub grid_points: usize,
    /// Cross-fit test-set nuisances within the test rows instead of reusing
    /// models trained on train ∪ score.
    pub test_crossfit: bool,
    pub alpha: f64,
    pub seed: u64,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        PipelineOptions {
            train: 0.6,
            score: 0.2,
            folds: 5,
            method: EnsembleMethod::QAgg,
            bins: 4,
            grid_points: MAX_UPLIFT_GRID,
            test_crossfit: false,
            alpha: 0.05,
            seed: 0,
        }
    }
}

/// Summary of a train/score/test CATE workflow.
#[derive(Debug, Clone, Serialize)]
pub struct CatePipeline {
    pub kinds: Vec<String>,
    pub scores: Vec<DrScore>,
    pub ensemble: Ensemble,
    pub ate_train: f64,
    pub heterogeneity: Option<HeterogeneityTest>,
    pub calibration: Option<Calibration>,
    pub uplift: Option<UpliftCurves>,
    pub split: Split3,
    #[serde(skip)]
    pub models: Vec<CateModel>,
    #[serde(skip)]
    pub test_predictions: Vec<f64>,
    #[serde(skip)]
    pub test_signals: Vec<f64>,
    pub warnings: Vec<String>,
}

impl CatePipeline {
    /// Stacked CATE prediction at the rows of `x`.
    pub fn predict(&self, x: &DMatrix<f64>) -> Vec<f64> {
        self.ensemble.combine(&self.models.iter().map(|m| m.predict(x)).collect::<Vec<_>>())
    }
}

/// Fit every requested meta-learner on the training rows, score and stack
/// on the scoring rows, and validate the stacked model on the test rows.
pub fn cate_pipeline(
    y: &[f64],
    d: &[f64],
    z: &DMatrix<f64>,
    x: &DMatrix<f64>,
    kinds: &[MetaKind],
    learners: &MetaLearners<'_>,
    opts: &PipelineOptions,
) -> Result<CatePipeline> {
    let n = y.len();
    check_len("d", d.len(), n)?;
    check_len("Z rows", z.nrows(), n)?;
    check_len("X rows", x.nrows(), n)?;
    if kinds.is_empty() {
        return Err(Error::InvalidInput("no meta-learners requested".into()));
    }
    let seed = opts.seed;
    let split = three_way_split(n, opts.train, opts.score, seed)?;
    let sub = |idx: &[usize]| -> (Vec<f64>, Vec<f64>, DMatrix<f64>, DMatrix<f64>) {
        (idx.iter().map(|&i| y[i]).collect(), idx.iter().map(|&i| d[i]).collect(), select_rows(z, idx), select_rows(x, idx))
    };
    let (ytr, dtr, ztr, xtr) = sub(&split.train);
    let plan = CrossFitPlan::new(ytr.len(), opts.folds, rng::derive(seed, "folds", 0))?;
    let models: Vec<CateModel> = kinds
        .iter()
        .map(|k| meta_learn(*k, &ytr, &dtr, &ztr, &xtr, learners, &plan, seed))
        .collect::<Result<_>>()?;
    let train_sig = dr_signal(&ytr, &dtr, &ztr, learners.outcome, learners.propensity, &plan, learners.clip, seed)?;
    let ate_train = mean(&train_sig.values);

    let score_sig = dr_signal_holdout(y, d, z, &split.train, &split.score, learners.outcome, learners.propensity, learners.clip, seed)?;
    let xsc = select_rows(x, &split.score);
    let preds: Vec<Vec<f64>> = models.iter().map(|m| m.predict(&xsc)).collect();
    let scores = preds.iter().map(|p| dr_score(p, &score_sig.values, ate_train)).collect::<Result<Vec<_>>>()?;
    let ens = ensemble(&preds, &score_sig.values, opts.method, None)?;

    let mut nontest = split.train.clone();
    nontest.extend(&split.score);
    nontest.sort_unstable();
    let mut warnings = Vec::new();
    let test_sig = if opts.test_crossfit {
        let (yte, dte, zte, _) = sub(&split.test);
        let tplan = CrossFitPlan::new(yte.len(), opts.folds, rng::derive(seed, "folds", 1))?;
        dr_signal(&yte, &dte, &zte, learners.outcome, learners.propensity, &tplan, learners.clip, seed)?
    } else {
        dr_signal_holdout(y, d, z, &nontest, &split.test, learners.outcome, learners.propensity, learners.clip, seed)?
    };
    if test_sig.trimmed > 0 {
        warnings.push(format!("{} test propensities clipped", test_sig.trimmed));
    }
    let mut out = CatePipeline {
        kinds: kinds.iter().map(|k| k.to_string()).collect(),
        scores,
        ensemble: ens,
        ate_train,
        heterogeneity: None,
        calibration: None,
        uplift: None,
        split,
        models,
        test_predictions: Vec::new(),
        test_signals: test_sig.values,
        warnings,
    };
    let tau_test = out.predict(&select_rows(x, &out.split.test));
    let tau_ref = out.predict(&select_rows(x, &nontest));
    let sig = &out.test_signals;
    match heterogeneity_blp_test(&tau_test, sig, opts.alpha) {
        Ok(h) => out.heterogeneity = Some(h),
        Err(e) => out.warnings.push(format!("heterogeneity test: {e}")),
    }
    match calibration(&tau_test, sig, &quantile_thresholds(&tau_ref, opts.bins.max(1)), opts.alpha) {
        Ok(c) => out.calibration = Some(c),
        Err(e) => out.warnings.push(format!("calibration: {e}")),
    }
    match toc_qini(&tau_test, sig, &tau_ref, &uplift_grid(opts.grid_points), opts.alpha, seed) {
        Ok(u) => out.uplift = Some(u),
        Err(e) => out.warnings.push(format!("uplift curves: {e}")),
    }
    out.test_predictions = tau_test;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn dr_loss_and_comparison_by_hand() {
        assert_abs_diff_eq!(dr_loss(&[2.0, 2.0], &[1.0, 3.0]), 1.0);
        let c = compare_models(&[0.0, 0.0], &[2.0, 2.0], &[0.0, 2.0], 0.05).unwrap();
        assert_abs_diff_eq!(c.delta, 0.0);
        assert_abs_diff_eq!(c.variance, 16.0);
        assert!(matches!(compare_models(&[1.0, 2.0], &[1.0, 2.0], &[0.0, 2.0], 0.05), Err(Error::IndistinguishableModels)));
    }

    #[test]
    fn qagg_two_constants() {
        let e = ensemble(&[vec![0.0, 0.0], vec![2.0, 2.0]], &[0.0, 2.0], EnsembleMethod::QAgg, None).unwrap();
        assert_abs_diff_eq!(e.weights[0], 0.5, epsilon = 1e-8);
        let w = 0.3;
        let obj = qagg_objective(&[vec![0.0, 0.0], vec![2.0, 2.0]], &[0.0, 2.0], &[1.0 - w, w]);
        assert_abs_diff_eq!(obj, 4.0 * w * w - 4.0 * w + 4.0, epsilon = 1e-12);
        let dup = ensemble(&[vec![1.0, 3.0], vec![1.0, 3.0]], &[0.0, 2.0], EnsembleMethod::QAgg, None).unwrap();
        assert_eq!(dup.weights, vec![0.5, 0.5]);
        let one = ensemble(&[vec![1.0, 3.0]], &[0.0, 2.0], EnsembleMethod::Convex, None).unwrap();
        assert_eq!(one.weights, vec![1.0]);
    }

    #[test]
    fn heterogeneity_by_hand() {
        let t = heterogeneity_blp_test(&[0.0, 0.0, 1.0, 1.0], &[0.0, 1.0, 2.0, 3.0], 0.05).unwrap();
        assert_abs_diff_eq!(t.beta1, 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(t.beta0, 1.5, epsilon = 1e-12);
        assert!(matches!(heterogeneity_blp_test(&[1.0; 4], &[0.0, 1.0, 2.0, 3.0], 0.05), Err(Error::ConstantModel)));
    }

    #[test]
    fn calibration_by_hand() {
        let c = calibration(&[0.0, 0.0, 1.0, 1.0], &[0.0, 0.0, 2.0, 2.0], &[0.5], 0.05).unwrap();
        assert_abs_diff_eq!(c.cal1, 0.5);
        assert_abs_diff_eq!(c.cal2, 0.5);
        let one = calibration(&[0.0, 0.0, 1.0, 1.0], &[0.0, 0.0, 2.0, 2.0], &[], 0.05).unwrap();
        assert_abs_diff_eq!(one.cal1, 0.5);
        assert!(matches!(calibration(&[0.0, 0.0], &[1.0, 1.0], &[0.5], 0.05), Err(Error::EmptyBin(1))));
    }

    #[test]
    fn uplift_by_hand() {
        let tau = [4.0, 3.0, 2.0, 1.0];
        let sig = [4.0, 2.0, 0.0, -2.0];
        let u = toc_qini(&tau, &sig, &tau, &[0.5, 1.0], 0.05, 1).unwrap();
        assert_abs_diff_eq!(u.toc.estimates[0], 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(u.qini.estimates[0], 1.0, epsilon = 1e-12);
        assert_eq!(u.toc.estimates[1], 0.0);
        assert_eq!(u.qini.estimates[1], 0.0);
        let flat = toc_qini(&[1.0; 4], &sig, &[1.0; 4], &[0.25, 0.5], 0.05, 1).unwrap();
        assert!(flat.toc.estimates.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn policy_values_by_hand() {
        let sig = [4.0, 2.0, 0.0, -2.0];
        assert_eq!(policy_value(&[0.0; 4], &sig, 0.05).unwrap().theta, 0.0);
        assert_abs_diff_eq!(policy_value(&[1.0; 4], &sig, 0.05).unwrap().theta, 1.0);
        assert_abs_diff_eq!(policy_value(&[1.0, 1.0, 0.0, 0.0], &sig, 0.05).unwrap().theta, 1.5);
        let none = optimal_policy_value(&sig, &[-1.0; 4], None, 0.05).unwrap();
        assert_eq!(none.value.theta, 0.0);
        let all = optimal_policy_value(&sig, &[1.0; 4], None, 0.05).unwrap();
        assert_abs_diff_eq!(all.value.theta, 1.0);
    }

    #[test]
    fn policy_tree_cases() {
        let x = DMatrix::from_fn(10, 1, |i, _| i as f64 / 9.0);
        let sig: Vec<f64> = (0..10).map(|i| if i as f64 / 9.0 > 0.5 { 1.0 } else { -1.0 }).collect();
        let p = policy_learn(&sig, &x, 1, 1, 0.0).unwrap();
        assert_eq!(p.treat(&x), sig.iter().map(|s| if *s > 0.0 { 1.0 } else { 0.0 }).collect::<Vec<_>>());
        let all = policy_learn(&[1.0; 10], &x, 2, 1, 0.0).unwrap();
        assert_eq!(all.treat(&x), vec![1.0; 10]);
        let none = policy_learn(&[1.0; 10], &x, 2, 1, 2.0).unwrap();
        assert_eq!(none.treat(&x), vec![0.0; 10]);
    }

    #[test]
    fn simplex_projection() {
        let p = project_simplex(&[0.5, 0.5, 0.5]);
        assert!(p.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-12));
        assert_eq!(project_simplex(&[2.0, 0.0]), vec![1.0, 0.0]);
    }
}
