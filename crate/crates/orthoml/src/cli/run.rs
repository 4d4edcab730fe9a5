//! Estimation dispatch and report emission.
//!
//! Artifacts written to the output directory, with fixed CSV headers:
//!
//! | file            | estimand        | header                                        |
//! |-----------------|-----------------|-----------------------------------------------|
//! | `report.json`   | all             |                                               |
//! | `c_curve.csv`   | weak_id         | `theta,c_stat,accepted`                       |
//! | `contour.csv`   | sensitivity     | `r2_y,r2_d,phi_bound`                         |
//! | `uplift.csv`    | cate-pipeline   | `q,toc,toc_lo,toc_hi,qini,qini_lo,qini_hi`    |
//! | `rows.csv`      | simulate        | `replication,estimator,estimate,se,lo,hi,covers,extra` |
//! | `summary.csv`   | simulate        | `estimator,replications,truth,bias,...`       |

use std::path::Path;

use serde::Serialize;
use serde_json::{json, Value};

use super::config::{Estimand, Extra, RunConfig};
use super::data::{ingest_csv, Dataset};
use crate::cate::{cate_pipeline, MetaLearners, PipelineOptions};
use crate::dml::{
    did_canonical, dml_atet, dml_did_panel, dml_did_rcs, dml_gate, dml_irm_ate, dml_late, dml_pliv, dml_plm,
    pliv_parts, pliv_residuals_fit, rct_estimators, rdd_sharp, DmlOptions, DmlResult, NuisanceDiag,
};
use crate::error::{Error, Result};
use crate::learners::CrossFitPlan;
use crate::rng;
use crate::sensitivity::ovb_from_data;
use crate::sim::{self, SimOptions, SimReport};
use crate::weak_id::{first_stage_diag, grid, robust_region};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// One reported target.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct Estimate {
    pub name: String,
    pub estimate: f64,
    pub se: Option<f64>,
    pub ci: Option<(f64, f64)>,
}

impl Estimate {
    fn from_dml(name: &str, r: &DmlResult) -> Self {
        Estimate { name: name.into(), estimate: r.theta, se: Some(r.se), ci: Some(r.ci) }
    }

    fn point(name: &str, v: f64) -> Self {
        Estimate { name: name.into(), estimate: v, se: None, ci: None }
    }
}

/// What produced a report.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct Provenance {
    /// SHA-256 of the canonical config text.
    pub config_hash: String,
    pub seed: u64,
    pub version: String,
    pub config: String,
}

/// Everything `estimate` and `placebo` write to `report.json`.
#[derive(Debug, Clone, Serialize)]
pub struct Report {
    pub estimand: String,
    pub placebo: bool,
    pub n: usize,
    pub alpha: f64,
    pub estimates: Vec<Estimate>,
    pub nuisance_rmse: Vec<NuisanceDiag>,
    pub trimmed: usize,
    pub warnings: Vec<String>,
    /// Estimand-specific output (regions, bounds, calibration, ...).
    pub details: Value,
    pub artifacts: Vec<String>,
    pub provenance: Provenance,
}

impl Report {
    pub fn get(&self, name: &str) -> Option<&Estimate> {
        self.estimates.iter().find(|e| e.name == name)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

/// A report plus the CSV artifacts that go next to it.
#[derive(Debug, Clone)]
pub struct Output {
    pub report: Report,
    pub files: Vec<(String, String)>,
}

impl Output {
    /// Write `report.json` and every artifact into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io(format!("cannot create `{}`: {e}", dir.display())))?;
        for (name, body) in self.files.iter().chain(std::iter::once(&("report.json".to_string(), self.report.to_json()))) {
            let p = dir.join(name);
            std::fs::write(&p, body).map_err(|e| Error::Io(format!("cannot write `{}`: {e}", p.display())))?;
        }
        Ok(())
    }
}

fn provenance(cfg: &RunConfig) -> Provenance {
    Provenance { config_hash: cfg.hash(), seed: cfg.seed, version: VERSION.into(), config: cfg.canonical.clone() }
}

fn plain(cfg: &RunConfig, data: &Dataset, r: DmlResult, details: Value) -> Output {
    Output {
        report: Report {
            estimand: cfg.estimand.to_string(),
            placebo: false,
            n: data.n,
            alpha: cfg.alpha,
            estimates: vec![Estimate::from_dml(cfg.estimand.name(), &r)],
            nuisance_rmse: r.nuisances.clone(),
            trimmed: r.trimmed,
            warnings: r.warnings.clone(),
            details,
            artifacts: Vec::new(),
            provenance: provenance(cfg),
        },
        files: Vec::new(),
    }
}

fn drop_keys(mut v: Value, keys: &[&str]) -> Value {
    if let Value::Object(m) = &mut v {
        for k in keys {
            m.remove(*k);
        }
    }
    v
}

fn to_value<T: Serialize>(t: &T) -> Value {
    serde_json::to_value(t).expect("serializable")
}

/// Run the configured estimator on an already ingested dataset.
pub fn estimate(cfg: &RunConfig, data: &Dataset) -> Result<Output> {
    let opts = DmlOptions { alpha: cfg.alpha, clip: cfg.trim, seed: cfg.seed };
    let plan = || CrossFitPlan::new(data.n, cfg.folds, rng::derive(cfg.seed, "folds", 0));
    let l = |name: &str| cfg.learner(name);
    let (y, d, x) = (&data.y, &data.d, &data.x);
    let out = match cfg.estimand {
        Estimand::Plm => plain(cfg, data, dml_plm(y, d, x, l("l")?, l("m")?, &plan()?, opts)?, Value::Null),
        Estimand::Ate => plain(cfg, data, dml_irm_ate(y, d, x, l("g")?, l("m")?, &plan()?, opts)?, Value::Null),
        Estimand::Atet => plain(cfg, data, dml_atet(y, d, x, l("g")?, l("m")?, &plan()?, opts)?, Value::Null),
        Estimand::Gate => {
            plain(cfg, data, dml_gate(y, d, x, &data.group, l("g")?, l("m")?, &plan()?, opts)?, Value::Null)
        }
        Estimand::Pliv => {
            plain(cfg, data, dml_pliv(y, d, &data.z, x, l("l")?, l("r")?, l("m")?, &plan()?, opts)?, Value::Null)
        }
        Estimand::Late => {
            plain(cfg, data, dml_late(y, d, &data.z, x, l("mu")?, l("m")?, l("p")?, &plan()?, opts)?, Value::Null)
        }
        Estimand::DidPanel => plain(
            cfg,
            data,
            dml_did_panel(&data.outcome_pre, y, d, x, l("g")?, l("m")?, &plan()?, opts)?,
            Value::Null,
        ),
        Estimand::DidRcs => {
            plain(cfg, data, dml_did_rcs(y, &data.time, d, x, l("g")?, l("m")?, &plan()?, opts)?, Value::Null)
        }
        Estimand::DidCanonical => plain(cfg, data, did_canonical(y, d, &data.time, cfg.alpha)?, Value::Null),
        Estimand::Rct => {
            let Extra::Rct { mode } = cfg.extra else { unreachable!("validated config") };
            let r = rct_estimators(y, d, x, mode, cfg.alpha)?;
            let (ve, ve_ci) = r.efficacy();
            let mut o = plain(cfg, data, r.ate.clone(), json!({ "mode": r.mode, "control_mean": r.control_mean }));
            o.report.estimates = vec![
                Estimate::from_dml("ate", &r.ate),
                Estimate { name: "relative_effect".into(), estimate: r.relative.estimate, se: Some(r.relative.se), ci: Some(r.relative.ci) },
                Estimate { name: "efficacy".into(), estimate: ve, se: Some(r.relative.se), ci: Some(ve_ci) },
            ];
            o
        }
        Estimand::Rdd => {
            let Extra::Rdd { cutoff, bandwidth, kernel } = cfg.extra else { unreachable!("validated config") };
            let z = (x.ncols() > 0).then_some(x);
            let r = rdd_sharp(y, &data.running, cutoff, bandwidth, kernel, z, cfg.alpha)?;
            plain(cfg, data, r, json!({ "cutoff": cutoff, "bandwidth": bandwidth, "kernel": kernel }))
        }
        Estimand::WeakId => {
            let Extra::WeakId { lo, hi, points } = cfg.extra else { unreachable!("validated config") };
            let (yt, dt, zt) = pliv_residuals_fit(y, d, &data.z, x, l("l")?, l("r")?, l("m")?, &plan()?, opts)?;
            let fs = first_stage_diag(&dt, &zt)?;
            let region = robust_region(&yt, &dt, &zt, &grid(lo, hi, points), cfg.alpha)?;
            let mut warnings = Vec::new();
            if !fs.strong {
                warnings.push(format!("weak instrument: first-stage t = {:.3}; rely on the robust region", fs.t_stat));
            }
            if region.unbounded {
                warnings.push("robust region reaches the grid edge and may be unbounded".into());
            }
            if region.empty {
                warnings.push("robust region is empty on the grid".into());
            }
            let mut estimates = Vec::new();
            match pliv_parts(&yt, &dt, &zt).and_then(|p| p.solve("pliv", cfg.alpha)) {
                Ok(w) => estimates.push(Estimate::from_dml("wald", &w)),
                Err(e) => warnings.push(format!("Wald estimate unavailable: {e}")),
            }
            let details = json!({
                "first_stage": fs,
                "region": drop_keys(to_value(&region), &["grid", "c_values", "accepted"]),
            });
            Output {
                report: Report {
                    estimand: cfg.estimand.to_string(),
                    placebo: false,
                    n: data.n,
                    alpha: cfg.alpha,
                    estimates,
                    nuisance_rmse: Vec::new(),
                    trimmed: 0,
                    warnings,
                    details,
                    artifacts: vec!["c_curve.csv".into()],
                    provenance: provenance(cfg),
                },
                files: vec![("c_curve.csv".into(), region.curve_csv())],
            }
        }
        Estimand::Sensitivity => {
            let Extra::Sensitivity { r2_y, r2_d, r_max } = cfg.extra else { unreachable!("validated config") };
            let b = ovb_from_data(y, d, x, l("l")?, l("m")?, &plan()?, opts, r2_y, r2_d, r_max)?;
            let est = b.estimate.clone().expect("estimate from data");
            let mut o = plain(cfg, data, est.clone(), drop_keys(to_value(&b), &["contour", "estimate"]));
            o.report.estimates = vec![
                Estimate::from_dml("plm", &est),
                Estimate { name: "bounded".into(), estimate: b.beta, se: None, ci: Some(b.interval) },
                Estimate { name: "bounded_ci".into(), estimate: b.beta, se: None, ci: b.ci_interval },
            ];
            o.report.artifacts.push("contour.csv".into());
            o.files.push(("contour.csv".into(), b.contour_csv()));
            o
        }
        Estimand::CatePipeline => {
            let Extra::Cate { ref kinds, method, bins, grid, test_crossfit } = cfg.extra else {
                unreachable!("validated config")
            };
            let learners = MetaLearners {
                outcome: l("outcome")?,
                propensity: l("propensity")?,
                effect: l("effect")?,
                final_stage: l("final")?,
                clip: cfg.trim,
            };
            let po = PipelineOptions {
                train: cfg.split.0,
                score: cfg.split.1,
                folds: cfg.folds,
                method,
                bins,
                grid_points: grid,
                test_crossfit,
                alpha: cfg.alpha,
                seed: cfg.seed,
            };
            let p = cate_pipeline(y, d, x, &data.effect_x, kinds, &learners, &po)?;
            let mut estimates = vec![Estimate::point("ate_train", p.ate_train)];
            if let Some(h) = &p.heterogeneity {
                estimates.push(Estimate { name: "blp_ate".into(), estimate: h.beta0, se: Some(h.se0), ci: None });
                estimates.push(Estimate { name: "blp_heterogeneity".into(), estimate: h.beta1, se: Some(h.se1), ci: Some(h.ci1) });
            }
            let mut files = Vec::new();
            let mut artifacts = Vec::new();
            if let Some(u) = &p.uplift {
                files.push(("uplift.csv".to_string(), u.to_csv()));
                artifacts.push("uplift.csv".to_string());
            }
            Output {
                report: Report {
                    estimand: cfg.estimand.to_string(),
                    placebo: false,
                    n: data.n,
                    alpha: cfg.alpha,
                    estimates,
                    nuisance_rmse: Vec::new(),
                    trimmed: 0,
                    warnings: p.warnings.clone(),
                    details: drop_keys(to_value(&p), &["warnings"]),
                    artifacts,
                    provenance: provenance(cfg),
                },
                files,
            }
        }
    };
    Ok(out)
}

fn load(cfg: &RunConfig) -> Result<Dataset> {
    let input = cfg.input.as_ref().ok_or_else(|| Error::Config("missing required key `input`".into()))?;
    ingest_csv(input, &cfg.roles, &cfg.binary_columns())
}

/// Ingest the configured input, estimate, and write the report and artifacts
/// into the output directory.
pub fn run_estimate(cfg: &RunConfig) -> Result<Report> {
    let data = load(cfg)?;
    let out = estimate(cfg, &data)?;
    out.write(&cfg.output)?;
    Ok(out.report)
}

/// Placebo pre-trend check on an ingested panel: rerun the panel DiD with the
/// earlier pre-period as base and the later pre-period as the fake post period.
pub fn placebo(cfg: &RunConfig, data: &Dataset) -> Result<Output> {
    if cfg.estimand != Estimand::DidPanel {
        return Err(Error::Config(format!("placebo needs estimand did_panel, not {}", cfg.estimand)));
    }
    if cfg.roles.placebo_pre.is_none() {
        return Err(Error::Config("placebo needs `placebo.pre`, the outcome one period before `outcome_pre`".into()));
    }
    let opts = DmlOptions { alpha: cfg.alpha, clip: cfg.trim, seed: cfg.seed };
    let plan = CrossFitPlan::new(data.n, cfg.folds, rng::derive(cfg.seed, "folds", 0))?;
    let mut r = dml_did_panel(&data.placebo_pre, &data.outcome_pre, &data.d, &data.x, cfg.learner("g")?, cfg.learner("m")?, &plan, opts)?;
    r.estimand = "did_panel_placebo".into();
    let rejects = !r.covers(0.0);
    let mut o = plain(cfg, data, r, json!({ "rejects_parallel_trends": rejects }));
    o.report.placebo = true;
    o.report.estimand = "did_panel_placebo".into();
    o.report.estimates[0].name = "placebo_atet".into();
    if rejects {
        o.report.warnings.push("placebo interval excludes 0: pre-period trends differ between groups".into());
    }
    Ok(o)
}

/// [`placebo`] from the configured input, writing `report.json`.
pub fn did_placebo(cfg: &RunConfig) -> Result<Report> {
    let data = load(cfg)?;
    let out = placebo(cfg, &data)?;
    out.write(&cfg.output)?;
    Ok(out.report)
}

/// Monte Carlo run over a registered design, written as `summary.json`,
/// `summary.csv` and `rows.csv`.
pub fn run_simulation(
    dgp: &str,
    n: usize,
    replications: usize,
    seed: u64,
    estimators: &[String],
    opts: &SimOptions,
    output: Option<&Path>,
) -> Result<SimReport> {
    let rep = sim::run_simulation(dgp, n, replications, seed, estimators, opts)?;
    if let Some(dir) = output {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io(format!("cannot create `{}`: {e}", dir.display())))?;
        let summary = json!({
            "dgp": rep.dgp,
            "n": rep.n,
            "replications": rep.replications,
            "seed": rep.seed,
            "summary": rep.summary,
            "failures": rep.failures,
            "version": VERSION,
        });
        let mut js = serde_json::to_string_pretty(&summary).expect("summary serializes");
        js.push('\n');
        for (name, body) in [("summary.json", js), ("summary.csv", rep.summary_csv()), ("rows.csv", rep.rows_csv())] {
            let p = dir.join(name);
            std::fs::write(&p, body).map_err(|e| Error::Io(format!("cannot write `{}`: {e}", p.display())))?;
        }
    }
    Ok(rep)
}

/// Table of registered designs.
pub fn list_dgps() -> String {
    let mut s = String::new();
    for d in sim::DGPS {
        s.push_str(&format!("{:<14} n={:<6} {}\n{:<14} estimators: {}\n", d.name, d.default_n, d.description, "", d.estimators.join(", ")));
    }
    s
}
