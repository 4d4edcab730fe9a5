//! Simulation designs and a Monte Carlo runner.
//!
//! Every design draws from the stream `(seed, "data", 0)`, and the runner
//! gives replication `r` the seed `derive(seed, "rep", r)`, so tables are
//! reproducible regardless of thread count.

use nalgebra::DMatrix;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::cate::{cate_pipeline, EnsembleMethod, MetaKind, MetaLearners, PipelineOptions};
use crate::dml::{dml_did_panel, dml_irm_ate, dml_late, dml_pliv, dml_plm, pliv_residuals_fit, DmlOptions, DmlResult};
use crate::double_lasso::{double_lasso, naive_single_selection};
use crate::error::{Error, Result};
use crate::learners::{BoostSpec, CrossFitPlan, ForestSpec, LearnerSpec, TreeSpec, DEFAULT_CLIP};
use crate::linalg::column;
use crate::penalized::{lasso_plugin, LambdaRule, PluginOptions};
use crate::rng::{self, Rng};
use crate::stats::{mean, median};
use crate::weak_id::{first_stage_diag, robust_region};

/// A registered design.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct DgpInfo {
    pub name: &'static str,
    pub description: &'static str,
    pub default_n: usize,
    /// Estimators run by default in simulations.
    pub estimators: &'static [&'static str],
}

pub const DGPS: &[DgpInfo] = &[
    DgpInfo {
        name: "example_4_3_1",
        description: "Y = D + b'W + e, D = g'W + N(0,1)/4, b_j = g_j = 1/j^2, p = 100",
        default_n: 100,
        estimators: &["naive", "double_lasso"],
    },
    DgpInfo {
        name: "example_3_1_1",
        description: "Y = b'X + e, X ~ N(0, I), b_j = 1/j^2, p = 1000",
        default_n: 300,
        estimators: &["lasso_select"],
    },
    DgpInfo {
        name: "plm_smooth",
        description: "smooth partially linear model with 5 Gaussian controls, theta = 0.5",
        default_n: 500,
        estimators: &["dml_plm"],
    },
    DgpInfo {
        name: "weak_iv",
        description: "linear IV with first-stage coefficient 0.05 and endogeneity 0.9, theta = 1",
        default_n: 500,
        estimators: &["dml_pliv", "c_stat"],
    },
    DgpInfo {
        name: "dgp1",
        description: "rare treatment (0.05), constant effect 0.5, discontinuous baseline",
        default_n: 500,
        estimators: &["S", "T", "X", "DAX", "DR", "DRX", "R", "qagg", "convex", "best"],
    },
    DgpInfo {
        name: "dgp2",
        description: "rare treatment (0.05), effect 0.5 on Z in [0.6, 0.8], flat baseline",
        default_n: 500,
        estimators: &["S", "T", "X", "DAX", "DR", "DRX", "R", "qagg", "convex", "best"],
    },
    DgpInfo {
        name: "dgp3",
        description: "prevalent treatment (0.95), effect 0.5 on Z in [0.6, 0.8], flat baseline",
        default_n: 500,
        estimators: &["S", "T", "X", "DAX", "DR", "DRX", "R", "qagg", "convex", "best"],
    },
    DgpInfo {
        name: "example_12_2_1",
        description: "partially linear SEM with a latent confounder A (alpha = 1, bias phi = 0.5)",
        default_n: 1000,
        estimators: &["dml_plm"],
    },
    DgpInfo {
        name: "discrete_late",
        description: "binary X, Z, D, Y with always-takers, never-takers and compliers",
        default_n: 20_000,
        estimators: &["dml_late"],
    },
    DgpInfo {
        name: "did_panel",
        description: "three-period panel with parallel trends, ATET = 1",
        default_n: 1000,
        estimators: &["did_panel", "placebo"],
    },
    DgpInfo {
        name: "did_pretrend",
        description: "three-period panel whose treated group trends up by 0.3 per period",
        default_n: 1000,
        estimators: &["did_panel", "placebo"],
    },
];

/// Look up a design by name.
pub fn dgp_info(name: &str) -> Result<&'static DgpInfo> {
    DGPS.iter().find(|d| d.name == name).ok_or_else(|| Error::UnknownDgp(name.to_string()))
}

/// One simulated sample.
#[derive(Debug, Clone)]
pub struct SimData {
    pub y: Vec<f64>,
    /// Treatment (empty for pure prediction designs).
    pub d: Vec<f64>,
    pub x: DMatrix<f64>,
    /// Instrument, when the design has one.
    pub z: Option<Vec<f64>>,
    /// Earlier-period outcomes for panel designs, oldest first.
    pub pre: Vec<Vec<f64>>,
    /// Latent confounder, when the design has one.
    pub latent: Option<Vec<f64>>,
    /// Target parameter.
    pub theta: f64,
    /// True regression coefficients for prediction designs.
    pub beta: Vec<f64>,
}

fn normal(r: &mut Rng) -> f64 {
    StandardNormal.sample(r)
}

fn bern(r: &mut Rng, p: f64) -> f64 {
    if r.random::<f64>() < p {
        1.0
    } else {
        0.0
    }
}

fn empty(n: usize) -> SimData {
    SimData { y: vec![0.0; n], d: vec![0.0; n], x: DMatrix::zeros(n, 0), z: None, pre: Vec::new(), latent: None, theta: 0.0, beta: Vec::new() }
}

/// Parameters of the latent-confounder SEM.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SemParams {
    pub alpha: f64,
    pub delta: f64,
    pub gamma: f64,
    pub sigma_y: f64,
    pub sigma_d: f64,
}

impl SemParams {
    /// Omitted-confounder bias `δγ/(γ² + σ_D²)` (with `Var ε_A = 1`).
    pub fn phi(&self) -> f64 {
        self.delta * self.gamma / (self.gamma * self.gamma + self.sigma_d * self.sigma_d)
    }
}

pub const SEM: SemParams = SemParams { alpha: 1.0, delta: 1.0, gamma: 1.0, sigma_y: 1.0, sigma_d: 1.0 };

/// Discrete LATE design: covariate and compliance-type probabilities and
/// outcome probabilities by `(type, d, x)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LateDesign {
    pub p_x: f64,
    /// `P(Z = 1 | X = x)`.
    pub p_z: [f64; 2],
    /// `(always, never, complier)` shares by `x`.
    pub types: [[f64; 3]; 2],
    /// `P(Y = 1 | type, d, x)`, indexed `[type][d][x]`.
    pub p_y: [[[f64; 2]; 2]; 3],
}

pub const LATE_DESIGN: LateDesign = LateDesign {
    p_x: 0.4,
    p_z: [0.3, 0.6],
    types: [[0.2, 0.3, 0.5], [0.1, 0.2, 0.7]],
    p_y: [[[0.5, 0.6], [0.7, 0.8]], [[0.2, 0.3], [0.4, 0.5]], [[0.3, 0.35], [0.6, 0.75]]],
};

impl LateDesign {
    /// Complier-average effect `E[Y(1) − Y(0) | complier]`.
    pub fn complier_effect(&self) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for x in 0..2 {
            let px = if x == 1 { self.p_x } else { 1.0 - self.p_x };
            let pc = self.types[x][2] * px;
            num += pc * (self.p_y[2][1][x] - self.p_y[2][0][x]);
            den += pc;
        }
        num / den
    }
}

/// Draw a sample of size `n` from design `name`.
pub fn generate(name: &str, n: usize, seed: u64) -> Result<SimData> {
    dgp_info(name)?;
    if n < 2 {
        return Err(Error::InvalidInput("simulation needs n >= 2".into()));
    }
    let mut r = rng::stream(seed, "data", 0);
    let mut s = empty(n);
    match name {
        "example_4_3_1" => {
            let p = 100;
            let b: Vec<f64> = (1..=p).map(|j| 1.0 / (j * j) as f64).collect();
            s.x = DMatrix::from_fn(n, p, |_, _| 0.0);
            for i in 0..n {
                for j in 0..p {
                    s.x[(i, j)] = normal(&mut r);
                }
                let bw: f64 = (0..p).map(|j| b[j] * s.x[(i, j)]).sum();
                s.d[i] = bw + normal(&mut r) / 4.0;
                s.y[i] = s.d[i] + bw + normal(&mut r);
            }
            s.theta = 1.0;
        }
        "example_3_1_1" => {
            let p = 1000;
            s.beta = (1..=p).map(|j| 1.0 / (j * j) as f64).collect();
            s.x = DMatrix::zeros(n, p);
            for i in 0..n {
                for j in 0..p {
                    s.x[(i, j)] = normal(&mut r);
                }
                s.y[i] = (0..p).map(|j| s.beta[j] * s.x[(i, j)]).sum::<f64>() + normal(&mut r);
            }
            s.d.clear();
        }
        "plm_smooth" => {
            s.x = DMatrix::zeros(n, 5);
            for i in 0..n {
                for j in 0..5 {
                    s.x[(i, j)] = normal(&mut r);
                }
                let x = |j: usize| s.x[(i, j)];
                let m = x(0).tanh() + 0.25 * x(1);
                let g = x(0).cos() + 0.5 * x(1).tanh() + 0.25 * x(2);
                s.d[i] = m + normal(&mut r);
                s.y[i] = 0.5 * s.d[i] + g + normal(&mut r);
            }
            s.theta = 0.5;
        }
        "weak_iv" => {
            let rho: f64 = 0.9;
            s.x = DMatrix::zeros(n, 1);
            let mut z = vec![0.0; n];
            for i in 0..n {
                let x = normal(&mut r);
                s.x[(i, 0)] = x;
                z[i] = normal(&mut r);
                let ed = normal(&mut r);
                let ey = rho * ed + (1.0 - rho * rho).sqrt() * normal(&mut r);
                s.d[i] = 0.05 * z[i] + 0.5 * x + ed;
                s.y[i] = s.d[i] + 0.5 * x + ey;
            }
            s.z = Some(z);
            s.theta = 1.0;
        }
        "dgp1" | "dgp2" | "dgp3" => {
            let mu = if name == "dgp3" { 0.95 } else { 0.05 };
            s.x = DMatrix::zeros(n, 1);
            for i in 0..n {
                let z = r.random::<f64>();
                s.x[(i, 0)] = z;
                s.d[i] = bern(&mut r, mu);
                let band = if (0.6..=0.8).contains(&z) { 1.0 } else { 0.0 };
                s.y[i] = if name == "dgp1" { 0.5 * s.d[i] + 0.3 * band } else { 0.5 * band * s.d[i] + 0.1 } + 0.05 * normal(&mut r);
            }
            s.theta = if name == "dgp1" { 0.5 } else { 0.1 };
        }
        "example_12_2_1" => {
            let p = SEM;
            s.x = DMatrix::zeros(n, 1);
            let mut a = vec![0.0; n];
            for i in 0..n {
                let x = normal(&mut r);
                s.x[(i, 0)] = x;
                a[i] = 0.5 * x + normal(&mut r);
                s.d[i] = p.gamma * a[i] + 0.5 * x + p.sigma_d * normal(&mut r);
                s.y[i] = p.alpha * s.d[i] + p.delta * a[i] + x + p.sigma_y * normal(&mut r);
            }
            s.latent = Some(a);
            s.theta = p.alpha;
        }
        "discrete_late" => {
            let g = LATE_DESIGN;
            s.x = DMatrix::zeros(n, 1);
            let mut z = vec![0.0; n];
            for i in 0..n {
                let x = bern(&mut r, g.p_x) as usize;
                s.x[(i, 0)] = x as f64;
                z[i] = bern(&mut r, g.p_z[x]);
                let u = r.random::<f64>();
                let ty = if u < g.types[x][0] {
                    0
                } else if u < g.types[x][0] + g.types[x][1] {
                    1
                } else {
                    2
                };
                s.d[i] = match ty {
                    0 => 1.0,
                    1 => 0.0,
                    _ => z[i],
                };
                s.y[i] = bern(&mut r, g.p_y[ty][s.d[i] as usize][x]);
            }
            s.z = Some(z);
            s.theta = g.complier_effect();
        }
        "did_panel" | "did_pretrend" => {
            let trend = if name == "did_pretrend" { 0.3 } else { 0.0 };
            s.x = DMatrix::zeros(n, 2);
            let (mut y0, mut y1) = (vec![0.0; n], vec![0.0; n]);
            for i in 0..n {
                let x0 = normal(&mut r);
                let x1 = normal(&mut r);
                s.x[(i, 0)] = x0;
                s.x[(i, 1)] = x1;
                let p = 1.0 / (1.0 + (-(0.5 * x0 - 0.25 * x1)).exp());
                let d = bern(&mut r, p);
                s.d[i] = d;
                let fe = x0 + 0.5 * d + normal(&mut r);
                // Common trend depends on x; the treated group drifts by `trend`.
                let step = |t: f64| 0.5 * t * (1.0 + 0.5 * x1) + trend * t * d;
                y0[i] = fe + step(0.0) + normal(&mut r);
                y1[i] = fe + step(1.0) + normal(&mut r);
                s.y[i] = fe + step(2.0) + d + normal(&mut r);
            }
            s.pre = vec![y0, y1];
            s.theta = 1.0;
        }
        _ => unreachable!(),
    }
    Ok(s)
}

/// True CATE of the Chapter-style designs at covariate values `z`.
pub fn true_cate(name: &str, z: &[f64]) -> Result<Vec<f64>> {
    match name {
        "dgp1" => Ok(vec![0.5; z.len()]),
        "dgp2" | "dgp3" => Ok(z.iter().map(|v| if (0.6..=0.8).contains(v) { 0.5 } else { 0.0 }).collect()),
        other => Err(Error::InvalidInput(format!("design `{other}` has no CATE"))),
    }
}

/// Learners used by the simulation runner.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimOptions {
    pub folds: usize,
    pub alpha: f64,
    /// Outcome nuisance learner (design default when `None`).
    pub outcome: Option<LearnerSpec>,
    pub treatment: Option<LearnerSpec>,
    /// Effect-stage learner of the X-type meta-learners.
    pub effect: Option<LearnerSpec>,
    /// Final CATE regression of the meta-learners.
    pub final_stage: Option<LearnerSpec>,
    /// Half-width of the weak-ID grid around the truth.
    pub grid_halfwidth: f64,
    pub grid_points: usize,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions { folds: 5, alpha: 0.05, outcome: None, treatment: None, effect: None, final_stage: None, grid_halfwidth: 20.0, grid_points: 401 }
    }
}

/// Default forest for smooth nuisances.
pub fn sim_forest() -> LearnerSpec {
    LearnerSpec::Forest(ForestSpec { trees: 50, tree: TreeSpec { max_depth: usize::MAX, min_leaf: 5, mtry: None }, ..Default::default() })
}

/// Default boosting oracle for the CATE designs.
pub fn sim_boost() -> LearnerSpec {
    LearnerSpec::Boost(BoostSpec { steps: 100, rate: 0.1, tree: TreeSpec { max_depth: 2, min_leaf: 5, mtry: None } })
}

/// Default final-stage regression for the CATE designs: stumps with large
/// leaves, since pseudo-outcome labels are noisy.
pub fn sim_final() -> LearnerSpec {
    LearnerSpec::Boost(BoostSpec { steps: 50, rate: 0.1, tree: TreeSpec { max_depth: 1, min_leaf: 20, mtry: None } })
}

/// One estimator on one replication.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct SimRow {
    pub replication: usize,
    pub estimator: String,
    pub estimate: f64,
    pub se: f64,
    pub lo: f64,
    pub hi: f64,
    pub covers: bool,
    /// Design-specific extra metric (selected count, CATE RMSE, first-stage t).
    pub extra: f64,
}

/// Summary over replications for one estimator.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct SimSummary {
    pub estimator: String,
    pub replications: usize,
    pub truth: f64,
    pub bias: f64,
    pub median_bias: f64,
    pub rmse: f64,
    pub coverage: f64,
    pub mean_extra: f64,
    pub median_extra: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SimReport {
    pub dgp: String,
    pub n: usize,
    pub replications: usize,
    pub seed: u64,
    pub summary: Vec<SimSummary>,
    pub rows: Vec<SimRow>,
    /// Replications that failed, with the error message.
    pub failures: Vec<(usize, String, String)>,
}

impl SimReport {
    pub fn summary_for(&self, estimator: &str) -> Option<&SimSummary> {
        self.summary.iter().find(|s| s.estimator == estimator)
    }

    pub fn rows_csv(&self) -> String {
        let mut s = String::from("replication,estimator,estimate,se,lo,hi,covers,extra\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{},{},{},{},{},{}\n", r.replication, r.estimator, r.estimate, r.se, r.lo, r.hi, r.covers as u8, r.extra));
        }
        s
    }

    pub fn summary_csv(&self) -> String {
        let mut s = String::from("estimator,replications,truth,bias,median_bias,rmse,coverage,mean_extra,median_extra\n");
        for m in &self.summary {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                m.estimator, m.replications, m.truth, m.bias, m.median_bias, m.rmse, m.coverage, m.mean_extra, m.median_extra
            ));
        }
        s
    }
}

fn row(rep: usize, name: &str, r: &DmlResult, truth: f64, extra: f64) -> SimRow {
    SimRow { replication: rep, estimator: name.into(), estimate: r.theta, se: r.se, lo: r.ci.0, hi: r.ci.1, covers: r.covers(truth), extra }
}

fn point_row(rep: usize, name: &str, estimate: f64, extra: f64) -> SimRow {
    SimRow { replication: rep, estimator: name.into(), estimate, se: f64::NAN, lo: f64::NAN, hi: f64::NAN, covers: false, extra }
}

fn learner_or(o: &Option<LearnerSpec>, d: LearnerSpec) -> LearnerSpec {
    o.clone().unwrap_or(d)
}

const CATE_EVAL_POINTS: usize = 1000;

/// Run the listed estimators on one replication.
pub fn run_replication(dgp: &str, n: usize, seed: u64, rep: usize, estimators: &[String], opts: &SimOptions) -> Result<Vec<SimRow>> {
    let s = generate(dgp, n, seed)?;
    let dml = DmlOptions { alpha: opts.alpha, clip: DEFAULT_CLIP, seed };
    let plan = || CrossFitPlan::new(s.y.len(), opts.folds, rng::derive(seed, "folds", 0));
    let mut rows = Vec::new();
    let mut cate_done = false;
    for est in estimators {
        match est.as_str() {
            "naive" => {
                let r = naive_single_selection(&s.y, &s.d, &s.x, PluginOptions::default(), opts.alpha)?;
                rows.push(SimRow {
                    replication: rep,
                    estimator: est.clone(),
                    estimate: r.estimates[0],
                    se: r.se[0],
                    lo: r.ci[0].0,
                    hi: r.ci[0].1,
                    covers: r.covers(0, s.theta),
                    extra: r.selected.len() as f64,
                });
            }
            "double_lasso" => {
                let r = double_lasso(&s.y, &s.d, &s.x, &LambdaRule::default(), opts.alpha)?;
                rows.push(SimRow {
                    replication: rep,
                    estimator: est.clone(),
                    estimate: r.estimates[0],
                    se: r.se[0],
                    lo: r.ci[0].0,
                    hi: r.ci[0].1,
                    covers: r.covers(0, s.theta),
                    extra: r.selected.len() as f64,
                });
            }
            "lasso_select" => {
                let fit = lasso_plugin(&s.x, &s.y, PluginOptions::default())?;
                let err = fit.coefficients.iter().zip(&s.beta).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                rows.push(point_row(rep, est, err, fit.active.len() as f64));
            }
            "dml_plm" | "dml_plm_nocf" => {
                let l = learner_or(&opts.outcome, sim_forest());
                let m = learner_or(&opts.treatment, sim_forest());
                let p = if est == "dml_plm" { plan()? } else { CrossFitPlan::in_sample(s.y.len()) };
                let r = dml_plm(&s.y, &s.d, &s.x, &l, &m, &p, dml)?;
                rows.push(row(rep, est, &r, s.theta, 0.0));
            }
            "dml_pliv" | "c_stat" => {
                let z = s.z.as_ref().ok_or_else(|| Error::Config(format!("design `{dgp}` has no instrument")))?;
                let l = learner_or(&opts.outcome, LearnerSpec::Ols);
                let m = learner_or(&opts.treatment, LearnerSpec::Ols);
                let p = plan()?;
                if est == "dml_pliv" {
                    let r = dml_pliv(&s.y, &s.d, z, &s.x, &l, &m, &m, &p, dml)?;
                    rows.push(row(rep, est, &r, s.theta, 0.0));
                } else {
                    let (yt, dt, zt) = pliv_residuals_fit(&s.y, &s.d, z, &s.x, &l, &m, &m, &p, dml)?;
                    let fs = first_stage_diag(&dt, &zt)?;
                    let c0 = crate::weak_id::c_statistic(&yt, &dt, &zt, s.theta)?;
                    let g = crate::weak_id::grid(s.theta - opts.grid_halfwidth, s.theta + opts.grid_halfwidth, opts.grid_points);
                    let region = robust_region(&yt, &dt, &zt, &g, opts.alpha)?;
                    rows.push(SimRow {
                        replication: rep,
                        estimator: est.clone(),
                        estimate: c0,
                        se: f64::NAN,
                        lo: region.intervals.first().map_or(f64::NAN, |i| i.lo),
                        hi: region.intervals.last().map_or(f64::NAN, |i| i.hi),
                        covers: c0 <= region.critical,
                        extra: fs.t_stat,
                    });
                }
            }
            "dml_late" => {
                let z = s.z.as_ref().ok_or_else(|| Error::Config(format!("design `{dgp}` has no instrument")))?;
                let l = learner_or(&opts.outcome, LearnerSpec::Ols);
                let m = learner_or(&opts.treatment, LearnerSpec::Ols);
                let r = dml_late(&s.y, &s.d, z, &s.x, &l, &m, &m, &plan()?, dml)?;
                rows.push(row(rep, est, &r, s.theta, 0.0));
            }
            "dml_irm" => {
                let l = learner_or(&opts.outcome, sim_forest());
                let m = learner_or(&opts.treatment, LearnerSpec::Logistic { clip: DEFAULT_CLIP });
                let r = dml_irm_ate(&s.y, &s.d, &s.x, &l, &m, &plan()?, dml)?;
                rows.push(row(rep, est, &r, s.theta, 0.0));
            }
            "did_panel" | "placebo" => {
                if s.pre.len() < 2 {
                    return Err(Error::Config(format!("design `{dgp}` is not a three-period panel")));
                }
                let l = learner_or(&opts.outcome, LearnerSpec::Ols);
                let m = learner_or(&opts.treatment, LearnerSpec::Logistic { clip: DEFAULT_CLIP });
                let (base, post, truth) = if est == "did_panel" { (&s.pre[1], &s.y, s.theta) } else { (&s.pre[0], &s.pre[1], 0.0) };
                let mut r = dml_did_panel(base, post, &s.d, &s.x, &l, &m, &plan()?, dml)?;
                if est == "placebo" {
                    r.estimand = "placebo_atet".into();
                }
                rows.push(row(rep, est, &r, truth, 0.0));
            }
            "S" | "T" | "X" | "DAX" | "DR" | "DRX" | "R" | "qagg" | "convex" | "best" => {
                if cate_done {
                    continue;
                }
                cate_done = true;
                rows.extend(cate_rows(dgp, &s, seed, rep, estimators, opts)?);
            }
            other => return Err(Error::Config(format!("unknown simulation estimator `{other}`"))),
        }
    }
    Ok(rows)
}

fn cate_rows(dgp: &str, s: &SimData, seed: u64, rep: usize, estimators: &[String], opts: &SimOptions) -> Result<Vec<SimRow>> {
    let kinds: Vec<MetaKind> = MetaKind::ALL.to_vec();
    let outcome = learner_or(&opts.outcome, sim_boost());
    let propensity = learner_or(&opts.treatment, LearnerSpec::Logistic { clip: DEFAULT_CLIP });
    let effect = learner_or(&opts.effect, sim_boost());
    let final_stage = learner_or(&opts.final_stage, sim_final());
    let learners = MetaLearners { outcome: &outcome, propensity: &propensity, effect: &effect, final_stage: &final_stage, clip: DEFAULT_CLIP };
    let po = PipelineOptions { folds: opts.folds, alpha: opts.alpha, seed, ..Default::default() };
    let pipe = cate_pipeline(&s.y, &s.d, &s.x, &s.x, &kinds, &learners, &po)?;
    let grid: Vec<f64> = (0..CATE_EVAL_POINTS).map(|i| (i as f64 + 0.5) / CATE_EVAL_POINTS as f64).collect();
    let truth = true_cate(dgp, &grid)?;
    let gx = column(&grid);
    let rmse = |p: &[f64]| (p.iter().zip(&truth).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / grid.len() as f64).sqrt();
    let preds: Vec<Vec<f64>> = pipe.models.iter().map(|m| m.predict(&gx)).collect();
    let mut rows = Vec::new();
    for est in estimators {
        let value = match est.as_str() {
            "qagg" | "convex" | "best" => {
                let method: EnsembleMethod = est.parse()?;
                let sc: Vec<usize> = pipe.split.score.clone();
                let xs = crate::linalg::select_rows(&s.x, &sc);
                let score_preds: Vec<Vec<f64>> = pipe.models.iter().map(|m| m.predict(&xs)).collect();
                let sig = crate::cate::dr_signal_holdout(&s.y, &s.d, &s.x, &pipe.split.train, &sc, &outcome, &propensity, DEFAULT_CLIP, seed)?;
                let e = crate::cate::ensemble(&score_preds, &sig.values, method, None)?;
                let w_ok = e.weights.iter().all(|w| *w >= -1e-8) && (e.weights.iter().sum::<f64>() - 1.0).abs() <= 1e-8;
                let mut r = point_row(rep, est, rmse(&e.combine(&preds)), if w_ok { 1.0 } else { 0.0 });
                r.covers = w_ok;
                r
            }
            k => match k.parse::<MetaKind>() {
                Ok(kind) => {
                    let idx = kinds.iter().position(|x| *x == kind).expect("all kinds fitted");
                    point_row(rep, est, rmse(&preds[idx]), 0.0)
                }
                Err(_) => continue,
            },
        };
        rows.push(value);
    }
    Ok(rows)
}

fn summarize(estimator: &str, rows: &[&SimRow], truth: f64) -> SimSummary {
    let est: Vec<f64> = rows.iter().map(|r| r.estimate).collect();
    let extra: Vec<f64> = rows.iter().map(|r| r.extra).collect();
    let dev: Vec<f64> = est.iter().map(|e| e - truth).collect();
    SimSummary {
        estimator: estimator.into(),
        replications: rows.len(),
        truth,
        bias: mean(&dev),
        median_bias: median(&dev),
        rmse: (dev.iter().map(|v| v * v).sum::<f64>() / dev.len() as f64).sqrt(),
        coverage: rows.iter().filter(|r| r.covers).count() as f64 / rows.len() as f64,
        mean_extra: mean(&extra),
        median_extra: median(&extra),
    }
}

/// Monte Carlo study of `estimators` (design defaults when empty).
pub fn run_simulation(dgp: &str, n: usize, replications: usize, seed: u64, estimators: &[String], opts: &SimOptions) -> Result<SimReport> {
    let info = dgp_info(dgp)?;
    if replications == 0 {
        return Err(Error::Config("replications must be positive".into()));
    }
    let ests: Vec<String> = if estimators.is_empty() { info.estimators.iter().map(|s| s.to_string()).collect() } else { estimators.to_vec() };
    let results: Vec<(usize, Result<Vec<SimRow>>)> = (0..replications)
        .into_par_iter()
        .map(|r| (r, run_replication(dgp, n, rng::derive(seed, "rep", r as u64), r, &ests, opts)))
        .collect();
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for (r, res) in results {
        match res {
            Ok(v) => rows.extend(v),
            Err(e @ Error::Config(_)) => return Err(e),
            Err(e) => failures.push((r, format!("{e}"), format!("{:?}", e.exit_code()))),
        }
    }
    if rows.is_empty() {
        return Err(Error::NuisanceFit(format!("every replication failed; first: {}", failures.first().map_or("", |f| f.1.as_str()))));
    }
    // Truth for CATE estimators is zero RMSE; for the rest it is the design target.
    let truth = generate(dgp, n, rng::derive(seed, "rep", 0))?.theta;
    let mut names: Vec<String> = Vec::new();
    for r in &rows {
        if !names.contains(&r.estimator) {
            names.push(r.estimator.clone());
        }
    }
    let summary = names
        .iter()
        .map(|name| {
            let sel: Vec<&SimRow> = rows.iter().filter(|r| &r.estimator == name).collect();
            let t = match name.as_str() {
                "S" | "T" | "X" | "DAX" | "DR" | "DRX" | "R" | "qagg" | "convex" | "best" | "lasso_select" | "c_stat" => 0.0,
                "placebo" => 0.0,
                _ => truth,
            };
            summarize(name, &sel, t)
        })
        .collect();
    Ok(SimReport { dgp: dgp.into(), n, replications, seed, summary, rows, failures })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_and_shapes() {
        assert!(matches!(generate("nope", 10, 1), Err(Error::UnknownDgp(_))));
        for info in DGPS {
            let s = generate(info.name, 50, 3).unwrap();
            assert_eq!(s.y.len(), 50);
            assert_eq!(s.x.nrows(), 50);
        }
        let a = generate("dgp2", 30, 9).unwrap();
        let b = generate("dgp2", 30, 9).unwrap();
        assert_eq!(a.y, b.y);
    }

    #[test]
    fn late_design_truth() {
        // Complier effects are 0.3 at x = 0 and 0.4 at x = 1.
        let t = LATE_DESIGN.complier_effect();
        let w0 = 0.6 * 0.5;
        let w1 = 0.4 * 0.7;
        assert!((t - (w0 * 0.3 + w1 * 0.4) / (w0 + w1)).abs() < 1e-12);
    }

    #[test]
    fn single_replication_table() {
        let r = run_simulation("example_4_3_1", 100, 1, 5, &[], &SimOptions::default()).unwrap();
        assert_eq!(r.summary.len(), 2);
        assert!(r.summary.iter().all(|s| s.replications == 1));
    }
}
