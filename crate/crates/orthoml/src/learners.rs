//! Pluggable prediction oracles and the cross-fitting machinery.
//!
//! A [`Learner`] fits on `(X, y, weights)` with an explicit seed and returns a
//! [`Predictor`]. Cross-fitting derives the seed of fold `k` from
//! `(seed, "crossfit", k)`, so the same learner on the same data always
//! produces the same out-of-fold predictions whatever the nuisance is called.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{check_len, Error, Result};
use crate::linalg::{ols_fit, ols_fit_min_norm, select_rows, with_intercept};
use crate::penalized::{lasso_plugin, ridge_fit, LinearModel, PluginOptions};
use crate::rng::{self, Rng};

/// Default propensity clipping level.
pub const DEFAULT_CLIP: f64 = 0.01;

/// Deterministic fold assignment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CrossFitPlan {
    pub n: usize,
    pub k: usize,
    /// Fold of each row.
    pub folds: Vec<usize>,
    pub seed: u64,
    /// Train and evaluate on the full sample (no cross-fitting). Only for
    /// ablations that demonstrate overfitting bias.
    pub in_sample: bool,
}

impl CrossFitPlan {
    /// Uniform random partition of `0..n` into `k` folds whose sizes differ by
    /// at most one.
    pub fn new(n: usize, k: usize, seed: u64) -> Result<Self> {
        if k < 2 || k > n {
            return Err(Error::BadFoldCount { n, k });
        }
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng::stream(seed, "folds", 0));
        let mut folds = vec![0; n];
        for (pos, &i) in perm.iter().enumerate() {
            folds[i] = pos % k;
        }
        Ok(CrossFitPlan { n, k, folds, seed, in_sample: false })
    }

    /// Plan from an explicit assignment.
    pub fn from_assignment(folds: Vec<usize>, k: usize) -> Result<Self> {
        let n = folds.len();
        if k < 2 || k > n || folds.iter().any(|&f| f >= k) {
            return Err(Error::BadFoldCount { n, k });
        }
        Ok(CrossFitPlan { n, k, folds, seed: 0, in_sample: false })
    }

    /// Single "fold" that trains and predicts on all rows.
    pub fn in_sample(n: usize) -> Self {
        CrossFitPlan { n, k: 1, folds: vec![0; n], seed: 0, in_sample: true }
    }

    pub fn test_indices(&self, k: usize) -> Vec<usize> {
        (0..self.n).filter(|&i| self.folds[i] == k).collect()
    }

    pub fn train_indices(&self, k: usize) -> Vec<usize> {
        if self.in_sample {
            return (0..self.n).collect();
        }
        (0..self.n).filter(|&i| self.folds[i] != k).collect()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.k];
        for &f in &self.folds {
            s[f] += 1;
        }
        s
    }
}

/// Shorthand for [`CrossFitPlan::new`].
pub fn make_folds(n: usize, k: usize, seed: u64) -> Result<CrossFitPlan> {
    CrossFitPlan::new(n, k, seed)
}

/// A fitted prediction function.
pub trait Predictor: Send + Sync {
    fn predict(&self, x: &DMatrix<f64>) -> Vec<f64>;
}

/// A fit-then-predict oracle.
pub trait Learner: Send + Sync {
    fn fit(&self, x: &DMatrix<f64>, y: &[f64], weights: Option<&[f64]>, seed: u64) -> Result<Box<dyn Predictor>>;

    fn name(&self) -> String {
        "learner".into()
    }
}

impl<F> Predictor for F
where
    F: Fn(&DMatrix<f64>) -> Vec<f64> + Send + Sync,
{
    fn predict(&self, x: &DMatrix<f64>) -> Vec<f64> {
        self(x)
    }
}

impl Predictor for LinearModel {
    fn predict(&self, x: &DMatrix<f64>) -> Vec<f64> {
        LinearModel::predict(self, x)
    }
}

struct Constant(f64);

impl Predictor for Constant {
    fn predict(&self, x: &DMatrix<f64>) -> Vec<f64> {
        vec![self.0; x.nrows()]
    }
}

fn weighted_mean(y: &[f64], w: Option<&[f64]>) -> f64 {
    match w {
        Some(w) => {
            let sw: f64 = w.iter().sum();
            if sw > 0.0 {
                y.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / sw
            } else {
                y.iter().sum::<f64>() / y.len() as f64
            }
        }
        None => y.iter().sum::<f64>() / y.len() as f64,
    }
}

/// Out-of-fold predictions plus the per-fold fitted predictors.
pub struct CrossFit {
    pub predictions: Vec<f64>,
    pub models: Vec<Box<dyn Predictor>>,
}

/// Cross-fitted predictions: row `i` is predicted by a model trained without
/// fold `fold(i)`.
pub fn cross_fit_predict(
    learner: &dyn Learner,
    x: &DMatrix<f64>,
    y: &[f64],
    plan: &CrossFitPlan,
    weights: Option<&[f64]>,
    seed: u64,
) -> Result<CrossFit> {
    cross_fit_masked(learner, x, y, plan, weights, None, seed)
}

/// As [`cross_fit_predict`] but trains only on rows with `mask[i]` set;
/// predictions are produced for every row.
pub fn cross_fit_masked(
    learner: &dyn Learner,
    x: &DMatrix<f64>,
    y: &[f64],
    plan: &CrossFitPlan,
    weights: Option<&[f64]>,
    mask: Option<&[bool]>,
    seed: u64,
) -> Result<CrossFit> {
    let n = x.nrows();
    check_len("plan", plan.n, n)?;
    check_len("y", y.len(), n)?;
    let fits: Vec<(Vec<usize>, Vec<f64>, Box<dyn Predictor>)> = (0..plan.k)
        .into_par_iter()
        .map(|k| {
            let te = plan.test_indices(k);
            let tr: Vec<usize> = plan
                .train_indices(k)
                .into_iter()
                .filter(|&i| mask.is_none_or(|m| m[i]))
                .collect();
            if te.is_empty() || tr.is_empty() {
                return Err(Error::FoldTooSmall { fold: k, size: tr.len().min(te.len()) });
            }
            let xtr = select_rows(x, &tr);
            let ytr: Vec<f64> = tr.iter().map(|&i| y[i]).collect();
            let wtr: Option<Vec<f64>> = weights.map(|w| tr.iter().map(|&i| w[i]).collect());
            let model = learner
                .fit(&xtr, &ytr, wtr.as_deref(), rng::derive(seed, "crossfit", k as u64))
                .map_err(|e| Error::NuisanceFit(format!("fold {k}: {e}")))?;
            let pred = model.predict(&select_rows(x, &te));
            Ok((te, pred, model))
        })
        .collect::<Result<_>>()?;
    let mut predictions = vec![0.0; n];
    let mut models = Vec::with_capacity(plan.k);
    for (te, pred, model) in fits {
        for (i, p) in te.into_iter().zip(pred) {
            predictions[i] = p;
        }
        models.push(model);
    }
    Ok(CrossFit { predictions, models })
}

// ---------------------------------------------------------------- trees

/// Growth controls for a regression tree.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TreeSpec {
    pub max_depth: usize,
    /// Minimum rows per leaf; with weights, also the minimum effective
    /// sample size `(Σw)²/Σw²`.
    pub min_leaf: usize,
    /// Features tried per split; `None` means all.
    pub mtry: Option<usize>,
}

impl Default for TreeSpec {
    fn default() -> Self {
        TreeSpec { max_depth: 6, min_leaf: 5, mtry: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Node {
    Leaf { value: f64, size: usize },
    Split { feature: usize, threshold: f64, left: usize, right: usize },
}

/// Binary regression tree; `x_f ≤ threshold` goes left.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegressionTree {
    pub nodes: Vec<Node>,
}

impl RegressionTree {
    pub fn predict_row(&self, x: &DMatrix<f64>, i: usize) -> f64 {
        let mut at = 0;
        loop {
            match self.nodes[at] {
                Node::Leaf { value, .. } => return value,
                Node::Split { feature, threshold, left, right } => {
                    at = if x[(i, feature)] <= threshold { left } else { right };
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn go(t: &RegressionTree, at: usize) -> usize {
            match t.nodes[at] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + go(t, left).max(go(t, right)),
            }
        }
        go(self, 0)
    }

    pub fn leaves(&self) -> impl Iterator<Item = (f64, usize)> + '_ {
        self.nodes.iter().filter_map(|n| match n {
            Node::Leaf { value, size } => Some((*value, *size)),
            _ => None,
        })
    }
}

impl Predictor for RegressionTree {
    fn predict(&self, x: &DMatrix<f64>) -> Vec<f64> {
        (0..x.nrows()).map(|i| self.predict_row(x, i)).collect()
    }
}

struct TreeBuilder<'a> {
    x: &'a DMatrix<f64>,
    y: &'a [f64],
    w: Option<&'a [f64]>,
    spec: TreeSpec,
    nodes: Vec<Node>,
    buf: Vec<(f64, f64, f64)>,
}

impl TreeBuilder<'_> {
    fn wt(&self, i: usize) -> f64 {
        self.w.map_or(1.0, |w| w[i])
    }

    fn leaf_value(&self, idx: &[usize]) -> f64 {
        let (mut s, mut sw) = (0.0, 0.0);
        for &i in idx {
            s += self.wt(i) * self.y[i];
            sw += self.wt(i);
        }
        if sw > 0.0 {
            s / sw
        } else {
            idx.iter().map(|&i| self.y[i]).sum::<f64>() / idx.len() as f64
        }
    }

    fn best_split(&mut self, idx: &[usize], features: &[usize]) -> Option<(usize, f64)> {
        let m = idx.len();
        let min_leaf = self.spec.min_leaf.max(1);
        if m < 2 * min_leaf {
            return None;
        }
        let (mut s, mut sw, mut sw2, mut ss) = (0.0, 0.0, 0.0, 0.0);
        for &i in idx {
            let w = self.wt(i);
            s += w * self.y[i];
            sw += w;
            sw2 += w * w;
            ss += w * self.y[i] * self.y[i];
        }
        // With weights, each child must also reach `min_leaf` in Kish effective
        // sample size (Σw)²/Σw², so a few heavy rows cannot form a leaf alone.
        let weighted = self.w.is_some();
        if weighted && sw * sw < 2.0 * min_leaf as f64 * sw2 {
            return None;
        }
        if sw <= 0.0 {
            return None;
        }
        let sse = (ss - s * s / sw).max(0.0);
        if sse <= 1e-14 * ss.max(1e-300) {
            return None;
        }
        let base = s * s / sw;
        let mut best: Option<(usize, f64, f64)> = None;
        for &f in features {
            self.buf.clear();
            for &i in idx {
                self.buf.push((self.x[(i, f)], self.y[i], self.wt(i)));
            }
            self.buf.sort_unstable_by(|a, b| a.0.total_cmp(&b.0));
            let (mut ls, mut lw, mut lw2) = (0.0, 0.0, 0.0);
            for k in 0..m - 1 {
                let (v, yv, wv) = self.buf[k];
                ls += wv * yv;
                lw += wv;
                lw2 += wv * wv;
                let next = self.buf[k + 1].0;
                if next <= v || k + 1 < min_leaf || m - k - 1 < min_leaf {
                    continue;
                }
                let rw = sw - lw;
                if lw <= 0.0 || rw <= 0.0 {
                    continue;
                }
                if weighted && (lw * lw < min_leaf as f64 * lw2 || rw * rw < min_leaf as f64 * (sw2 - lw2)) {
                    continue;
                }
                let rs = s - ls;
                let gain = ls * ls / lw + rs * rs / rw - base;
                if gain > 1e-12 * sse && best.is_none_or(|b| gain > b.2) {
                    let mut thr = 0.5 * (v + next);
                    if thr >= next {
                        thr = v;
                    }
                    best = Some((f, thr, gain));
                }
            }
        }
        best.map(|(f, t, _)| (f, t))
    }

    fn grow(&mut self, idx: Vec<usize>, depth: usize, rng: &mut Option<&mut Rng>) -> usize {
        let at = self.nodes.len();
        self.nodes.push(Node::Leaf { value: self.leaf_value(&idx), size: idx.len() });
        if depth >= self.spec.max_depth {
            return at;
        }
        let p = self.x.ncols();
        let features: Vec<usize> = match (self.spec.mtry, rng.as_mut()) {
            (Some(m), Some(r)) if m < p => {
                let mut f = rand::seq::index::sample(&mut **r, p, m.max(1)).into_vec();
                f.sort_unstable();
                f
            }
            _ => (0..p).collect(),
        };
        if let Some((f, thr)) = self.best_split(&idx, &features) {
            let (l, r): (Vec<usize>, Vec<usize>) = idx.iter().partition(|&&i| self.x[(i, f)] <= thr);
            let left = self.grow(l, depth + 1, rng);
            let right = self.grow(r, depth + 1, rng);
            self.nodes[at] = Node::Split { feature: f, threshold: thr, left, right };
        }
        at
    }
}

fn build_tree(
    x: &DMatrix<f64>,
    y: &[f64],
    w: Option<&[f64]>,
    rows: Vec<usize>,
    spec: TreeSpec,
    mut rng: Option<&mut Rng>,
) -> RegressionTree {
    let mut b = TreeBuilder { x, y, w, spec, nodes: Vec::new(), buf: Vec::with_capacity(rows.len()) };
    b.grow(rows, 0, &mut rng);
    RegressionTree { nodes: b.nodes }
}

/// Greedy SSE-minimizing tree on all rows.
///
/// Candidate thresholds are midpoints of sorted distinct values; equal
/// improvements go to the lower feature index, then the lower threshold.
pub fn tree_fit(x: &DMatrix<f64>, y: &[f64], max_depth: usize, min_leaf: usize, weights: Option<&[f64]>) -> Result<RegressionTree> {
    check_len("y", y.len(), x.nrows())?;
    if min_leaf == 0 {
        return Err(Error::InvalidInput("min_leaf must be at least 1".into()));
    }
    if x.nrows() == 0 {
        return Err(Error::InvalidInput("empty sample".into()));
    }
    let spec = TreeSpec { max_depth, min_leaf, mtry: None };
    Ok(build_tree(x, y, weights, (0..x.nrows()).collect(), spec, None))
}

/// Row resampling for each forest tree.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum SampleMode {
    Bootstrap,
    /// Without replacement, this fraction of rows.
    Subsample(f64),
    /// Every tree sees every row once.
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ForestSpec {
    pub trees: usize,
    pub tree: TreeSpec,
    pub sample: SampleMode,
}

impl Default for ForestSpec {
    fn default() -> Self {
        ForestSpec {
            trees: 100,
            tree: TreeSpec { max_depth: usize::MAX, min_leaf: 5, mtry: None },
            sample: SampleMode::Bootstrap,
        }
    }
}

/// Averaged trees.
#[derive(Debug, Clone)]
pub struct Forest {
    pub trees: Vec<RegressionTree>,
}

impl Predictor for Forest {
    fn predict(&self, x: &DMatrix<f64>) -> Vec<f64> {
        let b = self.trees.len() as f64;
        (0..x.nrows())
            .map(|i| self.trees.iter().map(|t| t.predict_row(x, i)).sum::<f64>() / b)
            .collect()
    }
}

/// Bagged (or subsampled) random forest; tree `b` uses stream `(seed, "tree", b)`.
pub fn forest_fit(x: &DMatrix<f64>, y: &[f64], spec: ForestSpec, weights: Option<&[f64]>, seed: u64) -> Result<Forest> {
    let n = x.nrows();
    check_len("y", y.len(), n)?;
    if spec.trees == 0 {
        return Err(Error::InvalidInput("forest needs at least one tree".into()));
    }
    if n == 0 {
        return Err(Error::InvalidInput("empty sample".into()));
    }
    let trees = (0..spec.trees)
        .into_par_iter()
        .map(|b| {
            let mut r = rng::stream(seed, "tree", b as u64);
            let rows: Vec<usize> = match spec.sample {
                SampleMode::Bootstrap => (0..n).map(|_| r.random_range(0..n)).collect(),
                SampleMode::Subsample(f) => {
                    let m = ((f * n as f64).round() as usize).clamp(1, n);
                    let mut s = rand::seq::index::sample(&mut r, n, m).into_vec();
                    s.sort_unstable();
                    s
                }
                SampleMode::Full => (0..n).collect(),
            };
            build_tree(x, y, weights, rows, spec.tree, Some(&mut r))
        })
        .collect();
    Ok(Forest { trees })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoostSpec {
    pub steps: usize,
    pub rate: f64,
    pub tree: TreeSpec,
}

impl Default for BoostSpec {
    fn default() -> Self {
        BoostSpec { steps: 100, rate: 0.1, tree: TreeSpec { max_depth: 2, min_leaf: 5, mtry: None } }
    }
}

/// `ĝ = Σ_j λ ĝ_j`, each `ĝ_j` a tree fit to the current residuals.
#[derive(Debug, Clone)]
pub struct Boosted {
    pub rate: f64,
    pub trees: Vec<RegressionTree>,
}

impl Predictor for Boosted {
    fn predict(&self, x: &DMatrix<f64>) -> Vec<f64> {
        (0..x.nrows())
            .map(|i| self.trees.iter().map(|t| self.rate * t.predict_row(x, i)).sum())
            .collect()
    }
}

pub fn boost_fit(x: &DMatrix<f64>, y: &[f64], spec: BoostSpec, weights: Option<&[f64]>, seed: u64) -> Result<Boosted> {
    let n = x.nrows();
    check_len("y", y.len(), n)?;
    if !(spec.rate >= 0.0 && spec.rate <= 1.0) {
        return Err(Error::InvalidInput(format!("boosting rate {} outside [0, 1]", spec.rate)));
    }
    let mut r = rng::stream(seed, "boost", 0);
    let mut resid = y.to_vec();
    let mut trees = Vec::with_capacity(spec.steps);
    for _ in 0..spec.steps {
        let t = build_tree(x, &resid, weights, (0..n).collect(), spec.tree, Some(&mut r));
        for (i, e) in resid.iter_mut().enumerate() {
            *e -= spec.rate * t.predict_row(x, i);
        }
        trees.push(t);
    }
    Ok(Boosted { rate: spec.rate, trees })
}

// ------------------------------------------------------------- logistic

/// Logistic regression with an intercept, fit by Newton-Raphson.
#[derive(Debug, Clone)]
pub struct LogisticFit {
    /// Intercept first.
    pub coefficients: Vec<f64>,
    pub clip: f64,
    /// Linear index exceeded the cap: the data are (quasi-)separated.
    pub separation: bool,
    pub iterations: usize,
}

/// Linear-index magnitude treated as separation.
pub const LOGIT_CAP: f64 = 30.0;

impl Predictor for LogisticFit {
    fn predict(&self, x: &DMatrix<f64>) -> Vec<f64> {
        (0..x.nrows())
            .map(|i| {
                let eta = self.coefficients[0]
                    + (0..x.ncols()).map(|j| self.coefficients[j + 1] * x[(i, j)]).sum::<f64>();
                (1.0 / (1.0 + (-eta).exp())).clamp(self.clip, 1.0 - self.clip)
            })
            .collect()
    }
}

pub fn logistic_fit(x: &DMatrix<f64>, d: &[f64], clip: f64, weights: Option<&[f64]>) -> Result<LogisticFit> {
    let n = x.nrows();
    check_len("d", d.len(), n)?;
    if d.iter().any(|v| *v != 0.0 && *v != 1.0) {
        return Err(Error::InvalidInput("logistic outcome must be 0/1".into()));
    }
    if d.iter().all(|v| *v == 0.0) || d.iter().all(|v| *v == 1.0) {
        return Err(Error::InvalidInput("logistic regression needs both classes".into()));
    }
    let z = with_intercept(x);
    let p = z.ncols();
    let w = |i: usize| weights.map_or(1.0, |w| w[i]);
    let mut beta = DVector::<f64>::zeros(p);
    let mut separation = false;
    let mut iterations = 0;
    for it in 0..100 {
        iterations = it + 1;
        let eta = &z * &beta;
        let mut grad = DVector::<f64>::zeros(p);
        let mut hess = DMatrix::<f64>::zeros(p, p);
        for i in 0..n {
            let pi = 1.0 / (1.0 + (-eta[i]).exp());
            let wi = w(i);
            let vi = wi * (pi * (1.0 - pi)).max(1e-12);
            for a in 0..p {
                grad[a] += wi * (d[i] - pi) * z[(i, a)];
                for b in a..p {
                    hess[(a, b)] += vi * z[(i, a)] * z[(i, b)];
                }
            }
        }
        for a in 0..p {
            for b in 0..a {
                hess[(a, b)] = hess[(b, a)];
            }
        }
        let step = match hess.clone().cholesky() {
            Some(c) => c.solve(&grad),
            None => {
                separation = true;
                break;
            }
        };
        beta += &step;
        let max_eta = (&z * &beta).amax();
        if max_eta > LOGIT_CAP {
            separation = true;
            break;
        }
        if step.amax() < 1e-10 {
            break;
        }
    }
    Ok(LogisticFit { coefficients: beta.iter().cloned().collect(), clip, separation, iterations })
}

// --------------------------------------------------- learner catalogue

/// Serializable learner catalogue used by configs and simulations.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum LearnerSpec {
    Zero,
    Mean,
    Ols,
    /// Lasso at the plug-in penalty.
    Lasso(PluginOptions),
    /// Post-Lasso at the plug-in penalty.
    PostLasso(PluginOptions),
    Ridge(f64),
    Tree(TreeSpec),
    Forest(ForestSpec),
    Boost(BoostSpec),
    Logistic { clip: f64 },
}

struct OlsPredictor(Vec<f64>);

impl Predictor for OlsPredictor {
    fn predict(&self, x: &DMatrix<f64>) -> Vec<f64> {
        (0..x.nrows())
            .map(|i| self.0[0] + (0..x.ncols()).map(|j| self.0[j + 1] * x[(i, j)]).sum::<f64>())
            .collect()
    }
}

impl Learner for LearnerSpec {
    fn fit(&self, x: &DMatrix<f64>, y: &[f64], weights: Option<&[f64]>, seed: u64) -> Result<Box<dyn Predictor>> {
        check_len("y", y.len(), x.nrows())?;
        let unweighted = |what: &str| -> Result<()> {
            if weights.is_some() {
                return Err(Error::InvalidInput(format!("{what} learner does not accept weights")));
            }
            Ok(())
        };
        Ok(match self {
            LearnerSpec::Zero => Box::new(Constant(0.0)),
            LearnerSpec::Mean => Box::new(Constant(weighted_mean(y, weights))),
            LearnerSpec::Ols => {
                let z = with_intercept(x);
                let fit = match ols_fit(&z, y, weights) {
                    Ok(f) => f,
                    Err(Error::RankDeficient { .. }) => ols_fit_min_norm(&z, y, weights)?,
                    Err(e) => return Err(e),
                };
                Box::new(OlsPredictor(fit.coefficients))
            }
            LearnerSpec::Lasso(o) => {
                unweighted("lasso")?;
                if x.ncols() == 0 {
                    return Ok(Box::new(Constant(weighted_mean(y, None))));
                }
                Box::new(lasso_plugin(x, y, *o)?.model())
            }
            LearnerSpec::PostLasso(o) => {
                unweighted("post-lasso")?;
                if x.ncols() == 0 {
                    return Ok(Box::new(Constant(weighted_mean(y, None))));
                }
                let fit = lasso_plugin(x, y, *o)?;
                Box::new(crate::penalized::post_lasso(x, y, &fit)?.model())
            }
            LearnerSpec::Ridge(l) => {
                unweighted("ridge")?;
                Box::new(ridge_fit(x, y, *l)?)
            }
            LearnerSpec::Tree(s) => {
                let mut r = rng::stream(seed, "tree", 0);
                Box::new(build_tree(x, y, weights, (0..x.nrows()).collect(), *s, Some(&mut r)))
            }
            LearnerSpec::Forest(s) => Box::new(forest_fit(x, y, *s, weights, seed)?),
            LearnerSpec::Boost(s) => Box::new(boost_fit(x, y, *s, weights, seed)?),
            LearnerSpec::Logistic { clip } => {
                if y.iter().all(|v| *v == y[0]) {
                    return Ok(Box::new(Constant(y[0])));
                }
                Box::new(logistic_fit(x, y, *clip, weights)?)
            }
        })
    }

    fn name(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for LearnerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let depth = |d: usize| if d == usize::MAX { "inf".to_string() } else { d.to_string() };
        let mtry = |m: Option<usize>| m.map_or("all".to_string(), |v| v.to_string());
        match self {
            LearnerSpec::Zero => write!(f, "zero"),
            LearnerSpec::Mean => write!(f, "mean"),
            LearnerSpec::Ols => write!(f, "ols"),
            LearnerSpec::Lasso(o) => write!(f, "lasso:c={},a={},iters={}", o.c, o.a, o.iterations),
            LearnerSpec::PostLasso(o) => write!(f, "post_lasso:c={},a={},iters={}", o.c, o.a, o.iterations),
            LearnerSpec::Ridge(l) => write!(f, "ridge:lambda={l}"),
            LearnerSpec::Tree(s) => write!(f, "tree:depth={},min_leaf={}", depth(s.max_depth), s.min_leaf),
            LearnerSpec::Forest(s) => write!(
                f,
                "forest:trees={},depth={},min_leaf={},mtry={},sample={}",
                s.trees,
                depth(s.tree.max_depth),
                s.tree.min_leaf,
                mtry(s.tree.mtry),
                match s.sample {
                    SampleMode::Bootstrap => "bootstrap".to_string(),
                    SampleMode::Subsample(v) => format!("{v}"),
                    SampleMode::Full => "full".to_string(),
                }
            ),
            LearnerSpec::Boost(s) => write!(
                f,
                "boost:steps={},rate={},depth={},min_leaf={}",
                s.steps,
                s.rate,
                depth(s.tree.max_depth),
                s.tree.min_leaf
            ),
            LearnerSpec::Logistic { clip } => write!(f, "logistic:clip={clip}"),
        }
    }
}

impl FromStr for LearnerSpec {
    type Err = Error;

    /// Parses `name` or `name:key=value,key=value`, e.g. `forest:trees=200,min_leaf=3`.
    fn from_str(s: &str) -> Result<Self> {
        let (name, rest) = s.trim().split_once(':').unwrap_or((s.trim(), ""));
        let mut kv = std::collections::BTreeMap::new();
        for part in rest.split(',').filter(|p| !p.trim().is_empty()) {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("learner option `{part}` is not key=value")))?;
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
        let bad = |k: &str, v: &str| Error::Config(format!("learner `{name}`: bad value `{v}` for `{k}`"));
        let take_f = |kv: &mut std::collections::BTreeMap<String, String>, k: &str, d: f64| -> Result<f64> {
            match kv.remove(k) {
                Some(v) => v.parse().map_err(|_| bad(k, &v)),
                None => Ok(d),
            }
        };
        let take_u = |kv: &mut std::collections::BTreeMap<String, String>, k: &str, d: usize| -> Result<usize> {
            match kv.remove(k) {
                Some(v) if v == "inf" => Ok(usize::MAX),
                Some(v) => v.parse().map_err(|_| bad(k, &v)),
                None => Ok(d),
            }
        };
        let plugin = |kv: &mut std::collections::BTreeMap<String, String>| -> Result<PluginOptions> {
            let d = PluginOptions::default();
            Ok(PluginOptions {
                c: take_f(kv, "c", d.c)?,
                a: take_f(kv, "a", d.a)?,
                iterations: take_u(kv, "iters", d.iterations)?,
                heteroskedastic: matches!(kv.remove("hetero").as_deref(), Some("true") | Some("1")),
            })
        };
        let spec = match name {
            "zero" => LearnerSpec::Zero,
            "mean" => LearnerSpec::Mean,
            "ols" => LearnerSpec::Ols,
            "lasso" => LearnerSpec::Lasso(plugin(&mut kv)?),
            "post_lasso" => LearnerSpec::PostLasso(plugin(&mut kv)?),
            "ridge" => LearnerSpec::Ridge(take_f(&mut kv, "lambda", 1.0)?),
            "tree" => LearnerSpec::Tree(TreeSpec {
                max_depth: take_u(&mut kv, "depth", 6)?,
                min_leaf: take_u(&mut kv, "min_leaf", 5)?,
                mtry: None,
            }),
            "forest" => {
                let d = ForestSpec::default();
                let trees = take_u(&mut kv, "trees", d.trees)?;
                let max_depth = take_u(&mut kv, "depth", d.tree.max_depth)?;
                let min_leaf = take_u(&mut kv, "min_leaf", d.tree.min_leaf)?;
                let mtry = match kv.remove("mtry") {
                    None => None,
                    Some(v) if v == "all" => None,
                    Some(v) => Some(v.parse().map_err(|_| bad("mtry", &v))?),
                };
                let sample = match kv.remove("sample").as_deref() {
                    None | Some("bootstrap") => SampleMode::Bootstrap,
                    Some("full") => SampleMode::Full,
                    Some(v) => SampleMode::Subsample(v.parse().map_err(|_| bad("sample", v))?),
                };
                LearnerSpec::Forest(ForestSpec { trees, tree: TreeSpec { max_depth, min_leaf, mtry }, sample })
            }
            "boost" => {
                let d = BoostSpec::default();
                LearnerSpec::Boost(BoostSpec {
                    steps: take_u(&mut kv, "steps", d.steps)?,
                    rate: take_f(&mut kv, "rate", d.rate)?,
                    tree: TreeSpec {
                        max_depth: take_u(&mut kv, "depth", d.tree.max_depth)?,
                        min_leaf: take_u(&mut kv, "min_leaf", d.tree.min_leaf)?,
                        mtry: None,
                    },
                })
            }
            "logistic" => LearnerSpec::Logistic { clip: take_f(&mut kv, "clip", DEFAULT_CLIP)? },
            other => return Err(Error::Config(format!("unknown learner `{other}`"))),
        };
        if let Some(k) = kv.keys().next() {
            return Err(Error::Config(format!("learner `{name}` has no option `{k}`")));
        }
        Ok(spec)
    }
}

/// Learner that always returns a fixed function; used for known nuisances.
#[derive(Clone)]
pub struct FixedLearner(pub Arc<dyn Fn(&DMatrix<f64>) -> Vec<f64> + Send + Sync>);

impl Learner for FixedLearner {
    fn fit(&self, _x: &DMatrix<f64>, _y: &[f64], _w: Option<&[f64]>, _seed: u64) -> Result<Box<dyn Predictor>> {
        let f = self.0.clone();
        Ok(Box::new(move |x: &DMatrix<f64>| f(x)))
    }

    fn name(&self) -> String {
        "fixed".into()
    }
}

// ------------------------------------------------ selection & importance

/// Outcome of [`learner_select`].
#[derive(Debug, Clone, Serialize)]
pub struct Selection {
    pub best: usize,
    pub mspe: Vec<f64>,
}

/// Picks the candidate with the smallest cross-fitted MSPE (ties: lowest index).
pub fn learner_select(
    candidates: &[&dyn Learner],
    x: &DMatrix<f64>,
    y: &[f64],
    plan: &CrossFitPlan,
    seed: u64,
) -> Result<Selection> {
    if candidates.is_empty() {
        return Err(Error::InvalidInput("no candidate learners".into()));
    }
    let mut mspe = Vec::with_capacity(candidates.len());
    for c in candidates {
        let cf = cross_fit_predict(*c, x, y, plan, None, seed)?;
        mspe.push(y.iter().zip(&cf.predictions).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / y.len() as f64);
    }
    let mut best = 0;
    for k in 1..mspe.len() {
        if mspe[k] < mspe[best] {
            best = k;
        }
    }
    Ok(Selection { best, mspe })
}

/// Mean increase in MSE when column `j` is randomly permuted, per column.
pub fn perm_importance(predictor: &dyn Predictor, x: &DMatrix<f64>, y: &[f64], reps: usize, seed: u64) -> Result<Vec<f64>> {
    check_len("y", y.len(), x.nrows())?;
    if reps == 0 {
        return Err(Error::InvalidInput("reps must be at least 1".into()));
    }
    let mse = |pred: &[f64]| y.iter().zip(pred).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / y.len() as f64;
    let base = mse(&predictor.predict(x));
    (0..x.ncols())
        .map(|j| {
            let mut r = rng::stream(seed, "perm", j as u64);
            let mut total = 0.0;
            let mut xp = x.clone();
            let col: Vec<f64> = x.column(j).iter().cloned().collect();
            for _ in 0..reps {
                let mut perm = col.clone();
                perm.shuffle(&mut r);
                xp.set_column(j, &DVector::from_vec(perm));
                total += mse(&predictor.predict(&xp)) - base;
            }
            Ok(total / reps as f64)
        })
        .collect()
}
