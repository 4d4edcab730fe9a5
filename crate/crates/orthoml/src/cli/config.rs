//! Declarative run configuration.
//!
//! A config file is flat UTF-8 text, one `key = value` pair per line. Blank
//! lines and lines starting with `#` are ignored, keys are unique, and list
//! values are comma separated. Validation happens before any data is read so
//! role mistakes surface as configuration errors (exit code 2).
//!
//! ```text
//! input       = data.csv
//! estimand    = plm
//! outcome     = y
//! treatment   = d
//! controls    = x1, x2, w*
//! learner.l   = forest:trees=200
//! learner.m   = lasso
//! folds       = 5
//! seed        = 20240101
//! output      = out/plm
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::cate::{EnsembleMethod, MetaKind};
use crate::dml::{Kernel, RctMode};
use crate::error::{Error, Result};
use crate::learners::{LearnerSpec, DEFAULT_CLIP};

/// Target of an `estimate` run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Estimand {
    Plm,
    Ate,
    Atet,
    Gate,
    Pliv,
    Late,
    DidPanel,
    DidRcs,
    DidCanonical,
    Rct,
    Rdd,
    CatePipeline,
    Sensitivity,
    WeakId,
}

impl Estimand {
    pub const ALL: [Estimand; 14] = [
        Estimand::Plm,
        Estimand::Ate,
        Estimand::Atet,
        Estimand::Gate,
        Estimand::Pliv,
        Estimand::Late,
        Estimand::DidPanel,
        Estimand::DidRcs,
        Estimand::DidCanonical,
        Estimand::Rct,
        Estimand::Rdd,
        Estimand::CatePipeline,
        Estimand::Sensitivity,
        Estimand::WeakId,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Estimand::Plm => "plm",
            Estimand::Ate => "ate",
            Estimand::Atet => "atet",
            Estimand::Gate => "gate",
            Estimand::Pliv => "pliv",
            Estimand::Late => "late",
            Estimand::DidPanel => "did_panel",
            Estimand::DidRcs => "did_rcs",
            Estimand::DidCanonical => "did_canonical",
            Estimand::Rct => "rct",
            Estimand::Rdd => "rdd",
            Estimand::CatePipeline => "cate-pipeline",
            Estimand::Sensitivity => "sensitivity",
            Estimand::WeakId => "weak_id",
        }
    }

    /// Nuisance names accepted under `learner.<name>`, with their defaults.
    pub fn nuisances(&self) -> &'static [(&'static str, &'static str)] {
        const REG: &str = "forest:trees=100,min_leaf=5";
        const PROP: &str = "logistic";
        match self {
            Estimand::Plm | Estimand::Sensitivity => &[("l", REG), ("m", REG)],
            Estimand::Ate | Estimand::Atet | Estimand::Gate | Estimand::DidPanel | Estimand::DidRcs => {
                &[("g", REG), ("m", PROP)]
            }
            Estimand::Pliv | Estimand::WeakId => &[("l", REG), ("r", REG), ("m", REG)],
            Estimand::Late => &[("mu", REG), ("m", PROP), ("p", PROP)],
            Estimand::CatePipeline => &[
                ("outcome", REG),
                ("propensity", PROP),
                ("effect", REG),
                ("final", "boost:steps=50,rate=0.1,depth=1,min_leaf=20"),
            ],
            Estimand::DidCanonical | Estimand::Rct | Estimand::Rdd => &[],
        }
    }

    fn needs_controls(&self) -> bool {
        !matches!(self, Estimand::DidCanonical | Estimand::Rct | Estimand::Rdd)
    }

    fn binary_treatment(&self) -> bool {
        matches!(
            self,
            Estimand::Ate
                | Estimand::Atet
                | Estimand::Gate
                | Estimand::Late
                | Estimand::DidPanel
                | Estimand::DidRcs
                | Estimand::DidCanonical
                | Estimand::Rct
                | Estimand::CatePipeline
        )
    }
}

impl fmt::Display for Estimand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Estimand {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        Estimand::ALL.into_iter().find(|e| e.name() == s || e.name().replace('-', "_") == s).ok_or_else(|| {
            let names: Vec<&str> = Estimand::ALL.iter().map(|e| e.name()).collect();
            Error::Config(format!("unknown estimand `{s}`; expected one of {}", names.join(", ")))
        })
    }
}

/// Column roles. `controls` and `effect_covariates` may hold `prefix*` globs
/// that are expanded against the CSV header.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Roles {
    pub outcome: Option<String>,
    pub treatment: Option<String>,
    pub instrument: Option<String>,
    pub controls: Vec<String>,
    pub effect_covariates: Vec<String>,
    pub group: Option<String>,
    pub time: Option<String>,
    pub running: Option<String>,
    /// Base-period outcome of a two-period panel.
    pub outcome_pre: Option<String>,
    /// Earlier pre-period outcome used as the placebo base period.
    pub placebo_pre: Option<String>,
    /// Frequency weights: row `i` stands for `count[i]` identical units.
    pub count: Option<String>,
}

impl Roles {
    /// `(role, column)` pairs for the scalar roles that are set.
    pub fn scalar(&self) -> Vec<(&'static str, &str)> {
        [
            ("outcome", &self.outcome),
            ("treatment", &self.treatment),
            ("instrument", &self.instrument),
            ("group", &self.group),
            ("time", &self.time),
            ("running", &self.running),
            ("outcome_pre", &self.outcome_pre),
            ("placebo.pre", &self.placebo_pre),
            ("count", &self.count),
        ]
        .into_iter()
        .filter_map(|(r, c)| c.as_deref().map(|c| (r, c)))
        .collect()
    }
}

/// Estimand-specific settings.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum Extra {
    None,
    Rct { mode: RctMode },
    Rdd { cutoff: f64, bandwidth: f64, kernel: Kernel },
    WeakId { lo: f64, hi: f64, points: usize },
    Sensitivity { r2_y: f64, r2_d: f64, r_max: f64 },
    Cate { kinds: Vec<MetaKind>, method: EnsembleMethod, bins: usize, grid: usize, test_crossfit: bool },
}

/// Validated run configuration.
#[derive(Debug, Clone, Serialize)]
pub struct RunConfig {
    pub input: Option<PathBuf>,
    pub estimand: Estimand,
    pub roles: Roles,
    pub learners: BTreeMap<String, LearnerSpec>,
    pub folds: usize,
    pub trim: f64,
    pub alpha: f64,
    pub seed: u64,
    pub split: (f64, f64),
    pub output: PathBuf,
    pub extra: Extra,
    /// Canonical `key=value` text the provenance hash is computed from.
    pub canonical: String,
}

const KEYS: &[&str] = &[
    "input",
    "estimand",
    "outcome",
    "treatment",
    "instrument",
    "controls",
    "effect_covariates",
    "group",
    "time",
    "running",
    "outcome_pre",
    "placebo.pre",
    "count",
    "folds",
    "trim",
    "alpha",
    "seed",
    "split",
    "output",
    "rct.mode",
    "rdd.cutoff",
    "rdd.bandwidth",
    "rdd.kernel",
    "weak_id.grid",
    "sensitivity.r2_y",
    "sensitivity.r2_d",
    "sensitivity.r_max",
    "cate.learners",
    "cate.ensemble",
    "cate.bins",
    "cate.grid",
    "cate.test_crossfit",
];

/// Parse `key = value` text into an ordered map, rejecting malformed lines,
/// unknown keys and duplicates.
pub fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{line}`", lineno + 1)))?;
        let (k, v) = (k.trim().to_string(), v.trim().to_string());
        check_key(&k).map_err(|e| Error::Config(format!("line {}: {}", lineno + 1, strip(e))))?;
        if out.insert(k.clone(), v).is_some() {
            return Err(Error::Config(format!("line {}: key `{k}` is set twice", lineno + 1)));
        }
    }
    Ok(out)
}

fn strip(e: Error) -> String {
    match e {
        Error::Config(m) => m,
        other => other.to_string(),
    }
}

fn check_key(k: &str) -> Result<()> {
    if KEYS.contains(&k) || k.strip_prefix("learner.").is_some_and(|n| !n.is_empty()) {
        Ok(())
    } else {
        Err(Error::Config(format!("unknown key `{k}`")))
    }
}

/// Apply `key=value` overrides (command-line flags) on top of parsed pairs.
pub fn apply_overrides(pairs: &mut BTreeMap<String, String>, overrides: &[(String, String)]) -> Result<()> {
    for (k, v) in overrides {
        check_key(k)?;
        pairs.insert(k.clone(), v.clone());
    }
    Ok(())
}

fn list(v: &str) -> Vec<String> {
    v.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect()
}

fn num<T: FromStr>(pairs: &BTreeMap<String, String>, key: &str) -> Result<Option<T>> {
    pairs
        .get(key)
        .map(|v| v.parse::<T>().map_err(|_| Error::Config(format!("`{key}` must be a number, got `{v}`"))))
        .transpose()
}

fn required<T: FromStr>(pairs: &BTreeMap<String, String>, key: &str, estimand: Estimand) -> Result<T> {
    num(pairs, key)?.ok_or_else(|| Error::Config(format!("estimand {estimand} requires `{key}`")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("`{key}` must be true or false, got `{v}`"))),
    }
}

impl RunConfig {
    /// Parse and validate config text.
    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_pairs(parse_pairs(text)?)
    }

    pub fn from_file(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config `{}`: {e}", path.display())))?;
        Self::from_text(&text)
    }

    /// Validate a key-value map. Every estimand/role mismatch is reported
    /// here, before any data is touched.
    pub fn from_pairs(pairs: BTreeMap<String, String>) -> Result<Self> {
        for k in pairs.keys() {
            check_key(k)?;
        }
        let estimand: Estimand = pairs
            .get("estimand")
            .ok_or_else(|| Error::Config("missing required key `estimand`".into()))?
            .parse()?;
        let seed: u64 = num(&pairs, "seed")?
            .ok_or_else(|| Error::Config("missing required key `seed`: every run must be seeded".into()))?;

        let one = |k: &str| pairs.get(k).filter(|v| !v.is_empty()).cloned();
        let roles = Roles {
            outcome: one("outcome"),
            treatment: one("treatment"),
            instrument: one("instrument"),
            controls: pairs.get("controls").map(|v| list(v)).unwrap_or_default(),
            effect_covariates: pairs.get("effect_covariates").map(|v| list(v)).unwrap_or_default(),
            group: one("group"),
            time: one("time"),
            running: one("running"),
            outcome_pre: one("outcome_pre"),
            placebo_pre: one("placebo.pre"),
            count: one("count"),
        };
        check_roles(estimand, &roles)?;

        let folds: usize = num(&pairs, "folds")?.unwrap_or(5);
        if folds < 2 {
            return Err(Error::Config(format!("`folds` must be at least 2, got {folds}")));
        }
        let trim: f64 = num(&pairs, "trim")?.unwrap_or(DEFAULT_CLIP);
        if !(0.0..0.5).contains(&trim) {
            return Err(Error::Config(format!("`trim` must lie in [0, 0.5), got {trim}")));
        }
        let alpha: f64 = num(&pairs, "alpha")?.unwrap_or(0.05);
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::Config(format!("`alpha` must lie in (0, 1), got {alpha}")));
        }
        let split = match pairs.get("split") {
            None => (0.6, 0.2),
            Some(v) => {
                let parts = list(v);
                let f: Vec<f64> = parts.iter().filter_map(|p| p.parse().ok()).collect();
                if parts.len() != 2 || f.len() != 2 || f[0] <= 0.0 || f[1] <= 0.0 || f[0] + f[1] >= 1.0 {
                    return Err(Error::Config(format!(
                        "`split` must be `train,score` with positive fractions summing below 1, got `{v}`"
                    )));
                }
                (f[0], f[1])
            }
        };

        let allowed: Vec<&str> = estimand.nuisances().iter().map(|(n, _)| *n).collect();
        let mut learners = BTreeMap::new();
        for (name, default) in estimand.nuisances() {
            learners.insert(name.to_string(), default.parse::<LearnerSpec>()?);
        }
        for (k, v) in pairs.iter().filter_map(|(k, v)| k.strip_prefix("learner.").map(|n| (n, v))) {
            if !allowed.contains(&k) {
                return Err(Error::Config(if allowed.is_empty() {
                    format!("estimand {estimand} fits no nuisances; remove `learner.{k}`")
                } else {
                    format!("estimand {estimand} has no nuisance `{k}`; expected one of {}", allowed.join(", "))
                }));
            }
            let spec: LearnerSpec =
                v.parse().map_err(|e| Error::Config(format!("`learner.{k}`: {}", strip(e))))?;
            learners.insert(k.to_string(), spec);
        }

        let extra = parse_extra(estimand, &pairs)?;
        let canonical: String = pairs.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
        Ok(RunConfig {
            input: pairs.get("input").map(PathBuf::from),
            estimand,
            roles,
            learners,
            folds,
            trim,
            alpha,
            seed,
            split,
            output: pairs.get("output").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("out")),
            extra,
            canonical,
        })
    }

    /// SHA-256 of the canonical key-value text, hex encoded.
    pub fn hash(&self) -> String {
        Sha256::digest(self.canonical.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn learner(&self, name: &str) -> Result<&LearnerSpec> {
        self.learners
            .get(name)
            .ok_or_else(|| Error::Config(format!("estimand {} has no nuisance `{name}`", self.estimand)))
    }

    /// Columns that must hold only 0/1 values.
    pub fn binary_columns(&self) -> Vec<String> {
        let r = &self.roles;
        let mut out = Vec::new();
        if self.estimand.binary_treatment() {
            out.extend(r.treatment.clone());
        }
        if self.estimand == Estimand::Late {
            out.extend(r.instrument.clone());
        }
        if self.estimand == Estimand::Gate {
            out.extend(r.group.clone());
        }
        out
    }
}

fn check_roles(e: Estimand, r: &Roles) -> Result<()> {
    let need = |role: &str, v: &Option<String>| -> Result<()> {
        if v.is_none() {
            return Err(Error::Config(format!("estimand {e} requires the `{role}` column role")));
        }
        Ok(())
    };
    let forbid = |role: &str, set: bool, hint: &str| -> Result<()> {
        if set {
            return Err(Error::Config(format!("estimand {e} does not use `{role}`; {hint}")));
        }
        Ok(())
    };
    need("outcome", &r.outcome)?;
    if e != Estimand::Rdd {
        need("treatment", &r.treatment)?;
    } else {
        forbid("treatment", r.treatment.is_some(), "sharp RDD treatment is 1{running >= cutoff}")?;
        need("running", &r.running)?;
    }
    if e.needs_controls() && r.controls.is_empty() {
        return Err(Error::Config(format!("estimand {e} requires at least one column in `controls`")));
    }
    if e == Estimand::DidCanonical {
        forbid("controls", !r.controls.is_empty(), "use did_rcs or did_panel for conditional parallel trends")?;
    }
    let iv = matches!(e, Estimand::Pliv | Estimand::Late | Estimand::WeakId);
    if iv {
        need("instrument", &r.instrument)?;
    } else {
        forbid("instrument", r.instrument.is_some(), "choose pliv, late or weak_id for IV estimation")?;
    }
    if e == Estimand::Gate {
        need("group", &r.group)?;
    } else {
        forbid("group", r.group.is_some(), "only gate takes a group indicator")?;
    }
    if matches!(e, Estimand::DidRcs | Estimand::DidCanonical) {
        need("time", &r.time)?;
    } else {
        forbid("time", r.time.is_some(), "only did_rcs and did_canonical take a period column")?;
    }
    if e != Estimand::Rdd {
        forbid("running", r.running.is_some(), "only rdd takes a running variable")?;
    }
    if e == Estimand::DidPanel {
        need("outcome_pre", &r.outcome_pre)?;
    } else {
        forbid("outcome_pre", r.outcome_pre.is_some(), "only did_panel takes a base-period outcome")?;
        forbid("placebo.pre", r.placebo_pre.is_some(), "placebo runs need estimand did_panel")?;
    }
    if e != Estimand::CatePipeline {
        forbid("effect_covariates", !r.effect_covariates.is_empty(), "only cate-pipeline uses effect covariates")?;
    }
    let scalar = r.scalar();
    for (i, (ra, ca)) in scalar.iter().enumerate() {
        if let Some((rb, _)) = scalar[..i].iter().find(|(_, cb)| cb == ca) {
            return Err(Error::Config(format!("column `{ca}` is assigned to both `{rb}` and `{ra}`")));
        }
        if r.controls.iter().any(|c| c == ca) {
            return Err(Error::Config(format!("column `{ca}` is both `{ra}` and a control")));
        }
    }
    Ok(())
}

fn forbid_prefix(e: Estimand, pairs: &BTreeMap<String, String>, prefix: &str, owner: Estimand) -> Result<()> {
    if e != owner {
        if let Some(k) = pairs.keys().find(|k| k.starts_with(prefix)) {
            return Err(Error::Config(format!("`{k}` applies to estimand {owner}, not {e}")));
        }
    }
    Ok(())
}

fn parse_extra(e: Estimand, pairs: &BTreeMap<String, String>) -> Result<Extra> {
    forbid_prefix(e, pairs, "rct.", Estimand::Rct)?;
    forbid_prefix(e, pairs, "rdd.", Estimand::Rdd)?;
    forbid_prefix(e, pairs, "weak_id.", Estimand::WeakId)?;
    forbid_prefix(e, pairs, "sensitivity.", Estimand::Sensitivity)?;
    forbid_prefix(e, pairs, "cate.", Estimand::CatePipeline)?;
    Ok(match e {
        Estimand::Rct => {
            let mode = match pairs.get("rct.mode").map(String::as_str).unwrap_or("cl") {
                "cl" => RctMode::Cl,
                "cra" => RctMode::Cra,
                "ira" => RctMode::Ira,
                v => return Err(Error::Config(format!("`rct.mode` must be cl, cra or ira, got `{v}`"))),
            };
            Extra::Rct { mode }
        }
        Estimand::Rdd => {
            let cutoff: f64 = required(pairs, "rdd.cutoff", e)?;
            let bandwidth: f64 = required(pairs, "rdd.bandwidth", e)?;
            if !(bandwidth > 0.0 && bandwidth.is_finite()) {
                return Err(Error::Config(format!("`rdd.bandwidth` must be positive, got {bandwidth}")));
            }
            let kernel = match pairs.get("rdd.kernel").map(String::as_str).unwrap_or("triangular") {
                "triangular" => Kernel::Triangular,
                "uniform" => Kernel::Uniform,
                v => return Err(Error::Config(format!("`rdd.kernel` must be triangular or uniform, got `{v}`"))),
            };
            Extra::Rdd { cutoff, bandwidth, kernel }
        }
        Estimand::WeakId => {
            let v = pairs
                .get("weak_id.grid")
                .ok_or_else(|| Error::Config("estimand weak_id requires `weak_id.grid = lo,hi,points`".into()))?;
            let parts = list(v);
            let bad = || Error::Config(format!("`weak_id.grid` must be `lo,hi,points` with lo < hi and points >= 2, got `{v}`"));
            if parts.len() != 3 {
                return Err(bad());
            }
            let lo: f64 = parts[0].parse().map_err(|_| bad())?;
            let hi: f64 = parts[1].parse().map_err(|_| bad())?;
            let points: usize = parts[2].parse().map_err(|_| bad())?;
            if !(lo < hi) || points < 2 {
                return Err(bad());
            }
            Extra::WeakId { lo, hi, points }
        }
        Estimand::Sensitivity => {
            let r2_y: f64 = required(pairs, "sensitivity.r2_y", e)?;
            let r2_d: f64 = required(pairs, "sensitivity.r2_d", e)?;
            let r_max: f64 = num(pairs, "sensitivity.r_max")?.unwrap_or(0.5);
            for (k, v) in [("sensitivity.r2_y", r2_y), ("sensitivity.r2_d", r2_d), ("sensitivity.r_max", r_max)] {
                if !(0.0..1.0).contains(&v) {
                    return Err(Error::Config(format!("`{k}` must lie in [0, 1), got {v}")));
                }
            }
            Extra::Sensitivity { r2_y, r2_d, r_max }
        }
        Estimand::CatePipeline => {
            let kinds = match pairs.get("cate.learners") {
                None => MetaKind::ALL.to_vec(),
                Some(v) => list(v).iter().map(|s| s.parse()).collect::<Result<Vec<MetaKind>>>()?,
            };
            if kinds.is_empty() {
                return Err(Error::Config("`cate.learners` lists no meta-learners".into()));
            }
            let method = match pairs.get("cate.ensemble") {
                None => EnsembleMethod::QAgg,
                Some(v) => v.parse()?,
            };
            let bins: usize = num(pairs, "cate.bins")?.unwrap_or(4);
            let grid: usize = num(pairs, "cate.grid")?.unwrap_or(20);
            if bins < 2 || grid < 1 {
                return Err(Error::Config(format!("`cate.bins` must be >= 2 and `cate.grid` >= 1, got {bins} and {grid}")));
            }
            let test_crossfit = match pairs.get("cate.test_crossfit") {
                None => false,
                Some(v) => parse_bool("cate.test_crossfit", v)?,
            };
            Extra::Cate { kinds, method, bins, grid, test_crossfit }
        }
        _ => Extra::None,
    })
}
