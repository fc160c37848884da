//! Experiment configuration: one TOML file per experiment.
//!
//! ```toml
//! domain = "disk"
//! domain_params = [1.0]
//! drift = "sign1d"
//! drift_params = [2.0]
//! seed = 7
//! out_dir = "out/disk-sign"
//!
//! [uniqueness]
//! pairs = 1000
//! eps_ladder = [0.1, 0.01, 0.001]
//! ```
//!
//! Every key is optional except `domain` and `drift`; Monte Carlo commands
//! also need `seed` (or `--seed`). Unknown keys are rejected. The only
//! environment override is [`OUT_DIR_ENV`].

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::fields::DriftField;
use crate::geometry::DomainSpec;
use crate::pde::Resolution;
use crate::sde::Scheme;
use crate::{Error, Result, Vec2};

/// Environment variable that replaces `out_dir`.
pub const OUT_DIR_ENV: &str = "RSDE_OUT_DIR";

/// `T` for the PDE and transform: a number in `(0, 1]` or `"auto"` for `T₁`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum HorizonSpec {
    Fixed(f64),
    Named(AutoTag),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AutoTag {
    Auto,
}

impl Default for HorizonSpec {
    fn default() -> Self {
        HorizonSpec::Named(AutoTag::Auto)
    }
}

impl HorizonSpec {
    pub fn fixed(&self) -> Option<f64> {
        match self {
            HorizonSpec::Fixed(t) => Some(*t),
            HorizonSpec::Named(_) => None,
        }
    }
}

/// Scheme names accepted in config files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SchemeKind {
    Projection,
    Penalization,
}

/// A scheme as written in config: kind, projection substeps, penalty rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchemeConfig {
    pub kind: SchemeKind,
    #[serde(default = "one")]
    pub substeps: u32,
    /// `κ`; `None` means `1/dt`.
    #[serde(default)]
    pub kappa: Option<f64>,
}

fn one() -> u32 {
    1
}

impl SchemeConfig {
    pub fn projection(substeps: u32) -> Self {
        SchemeConfig { kind: SchemeKind::Projection, substeps, kappa: None }
    }

    pub fn scheme(&self) -> Scheme {
        match self.kind {
            SchemeKind::Projection => Scheme::Projection { substeps: self.substeps },
            SchemeKind::Penalization => Scheme::Penalization { kappa: self.kappa },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransformSection {
    /// Band enforced by the report check (not by the `T₁` search).
    pub det_band: [f64; 2],
    /// Band used while searching for `T₁`.
    pub select_band: [f64; 2],
    pub det_samples: usize,
    pub bilip_samples: usize,
    pub cone_trials: usize,
    pub select_samples: usize,
    /// Smallest horizon tried is `2^-min_level`.
    pub min_level: u32,
}

impl Default for TransformSection {
    fn default() -> Self {
        TransformSection {
            det_band: [0.45, 2.1],
            select_band: [0.5, 2.0],
            det_samples: 10_000,
            bilip_samples: 10_000,
            cone_trials: 10_000,
            select_samples: 2000,
            min_level: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowSection {
    /// Points for the `ψ` and hitting-time checks.
    pub samples: usize,
    pub fit_anchors: usize,
    pub fit_samples: usize,
    /// Relative step of the finite-difference Jacobians.
    pub fd_step: f64,
}

impl Default for FlowSection {
    fn default() -> Self {
        FlowSection { samples: 100, fit_anchors: 6, fit_samples: 12, fd_step: 1e-5 }
    }
}

/// Construction of the boundary function `H`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HChoice {
    /// Patch cover in one dimension (preimage if the cover fails), preimage
    /// construction in two.
    #[default]
    Auto,
    Cover,
    Preimage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TestFnSection {
    pub g_samples: usize,
    pub pair_samples: usize,
    pub fit_samples: usize,
    pub h_samples: usize,
    /// `ε` of `f_ε` for the fits and checks.
    pub eps: f64,
    /// Multiplier on fitted upper constants, divisor on lower ones.
    pub safety: f64,
    pub h: HChoice,
}

impl Default for TestFnSection {
    fn default() -> Self {
        TestFnSection { g_samples: 100_000, pair_samples: 10_000, fit_samples: 10_000, h_samples: 2000, eps: 0.1, safety: 1.25, h: HChoice::Auto }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateSection {
    pub paths: usize,
    pub horizon: f64,
    pub dt: f64,
    pub x0: Vec<f64>,
    pub scheme: SchemeConfig,
    /// Also write every trajectory in the flat binary layout.
    pub trajectories: bool,
}

impl Default for SimulateSection {
    fn default() -> Self {
        SimulateSection { paths: 10_000, horizon: 1.0, dt: 1.0 / 256.0, x0: vec![], scheme: SchemeConfig::projection(1), trajectories: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KrylovSection {
    pub paths: usize,
    pub widths: Vec<f64>,
    pub panels: usize,
    pub tolerance: f64,
    pub horizon: f64,
    pub dt: f64,
    /// Refinement level of the Brownian path, `dt / 2^level`.
    pub level: u32,
}

impl Default for KrylovSection {
    fn default() -> Self {
        KrylovSection { paths: 10_000, widths: vec![0.1, 0.05, 0.025], panels: 512, tolerance: 0.25, horizon: 1.0, dt: 1.0 / 64.0, level: 4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UniquenessSection {
    pub pairs: usize,
    pub dt_ladder: Vec<f64>,
    pub eps_ladder: Vec<f64>,
    pub scheme_a: SchemeConfig,
    pub scheme_b: SchemeConfig,
    /// Common start of the gap pair; empty means the domain centre.
    pub x0: Vec<f64>,
    /// Starts of the Lyapunov pair, which needs two distinct points.
    pub trace_x0: Vec<f64>,
    pub trace_x0_b: Vec<f64>,
    /// `R` of `τ_R`; absent means no truncation.
    pub tau_r: Option<f64>,
    pub fd_step: f64,
    pub p: f64,
    pub q: f64,
}

impl Default for UniquenessSection {
    fn default() -> Self {
        UniquenessSection {
            pairs: 1000,
            dt_ladder: (6..=10).map(|k| 0.5f64.powi(k)).collect(),
            eps_ladder: vec![0.1, 0.01, 0.001],
            scheme_a: SchemeConfig::projection(1),
            scheme_b: SchemeConfig::projection(2),
            x0: vec![],
            trace_x0: vec![],
            trace_x0_b: vec![],
            tau_r: None,
            fd_step: 1e-4,
            p: 0.5,
            q: 0.25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub domain: String,
    #[serde(default)]
    pub domain_params: Vec<f64>,
    pub drift: String,
    #[serde(default)]
    pub drift_params: Vec<f64>,
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default = "default_h")]
    pub h: f64,
    #[serde(default)]
    pub mollify_level: Option<u32>,
    #[serde(default)]
    pub horizon: HorizonSpec,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
    /// Shared ledger; defaults to `out_dir/ledger.json`.
    #[serde(default)]
    pub ledger: Option<PathBuf>,
    #[serde(default)]
    pub transform: TransformSection,
    #[serde(default)]
    pub flow: FlowSection,
    #[serde(default)]
    pub testfn: TestFnSection,
    #[serde(default)]
    pub simulate: SimulateSection,
    #[serde(default)]
    pub krylov: KrylovSection,
    #[serde(default)]
    pub uniqueness: UniquenessSection,
}

fn default_dt() -> f64 {
    Resolution::default().dt
}

fn default_h() -> f64 {
    Resolution::default().h
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

fn config_err(key: &str, message: impl Into<String>) -> Error {
    Error::config(key, message)
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

fn backticked(msg: &str) -> Option<&str> {
    let a = msg.find('`')?;
    let b = msg[a + 1..].find('`')?;
    Some(&msg[a + 1..a + 1 + b])
}

impl ExperimentConfig {
    /// Parses and validates; errors name the offending key and line.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| {
            let line = e.span().map(|s| line_of(text, s.start));
            let msg = e.message().to_string();
            let key = backticked(&msg).map(str::to_string).or_else(|| e.span().map(|s| text[s].split('=').next().unwrap_or("").trim().to_string()));
            let key = key.filter(|k| !k.is_empty()).unwrap_or_else(|| "<document>".into());
            match line {
                Some(l) => config_err(&key, format!("line {l}: {msg}")),
                None => config_err(&key, msg),
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| config_err("<file>", format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn domain_spec(&self) -> Result<DomainSpec> {
        DomainSpec::from_preset(&self.domain, &self.domain_params).map_err(|e| config_err("domain", e.to_string()))
    }

    pub fn drift_field(&self) -> Result<DriftField> {
        DriftField::from_preset(&self.drift, &self.drift_params, &self.domain_spec()?).map_err(|e| config_err("drift", e.to_string()))
    }

    pub fn resolution(&self) -> Resolution {
        Resolution::new(self.dt, self.h)
    }

    /// The seed, from the file or a command-line override.
    pub fn require_seed(&self, cli: Option<u64>) -> Result<u64> {
        cli.or(self.seed).ok_or_else(|| config_err("seed", "required for Monte Carlo commands (set `seed` or pass --seed)"))
    }

    /// `out_dir`, unless [`OUT_DIR_ENV`] is set.
    pub fn out_dir(&self) -> PathBuf {
        match std::env::var_os(OUT_DIR_ENV) {
            Some(v) if !v.is_empty() => PathBuf::from(v),
            _ => self.out_dir.clone(),
        }
    }

    pub fn ledger_path(&self) -> PathBuf {
        self.ledger.clone().unwrap_or_else(|| self.out_dir().join("ledger.json"))
    }

    /// A start point from config, or the centre of the domain.
    pub fn point(&self, key: &str, v: &[f64]) -> Result<Vec2> {
        let dom = self.domain_spec()?;
        let p = match v {
            [] => match dom {
                DomainSpec::Interval { a, b } => Vec2::new(0.5 * (a + b), 0.0),
                _ => Vec2::zeros(),
            },
            [x] if dom.dim() == 1 => Vec2::new(*x, 0.0),
            [x, y] if dom.dim() == 2 => Vec2::new(*x, *y),
            _ => return Err(config_err(key, format!("expected {} coordinates, got {}", dom.dim(), v.len()))),
        };
        if !dom.contains_closed(&p) {
            return Err(config_err(key, format!("point {v:?} lies outside the domain")));
        }
        Ok(p)
    }

    /// Starts of the Lyapunov pair: configured, or two nearby points close to
    /// the boundary so that both legs reflect.
    pub fn trace_points(&self) -> Result<(Vec2, Vec2)> {
        let u = &self.uniqueness;
        let dom = self.domain_spec()?;
        let (da, db) = match dom {
            DomainSpec::Interval { a, b } => (Vec2::new(a + 0.9 * (b - a), 0.0), Vec2::new(a + 0.875 * (b - a), 0.0)),
            DomainSpec::Disk { radius } => (Vec2::new(0.8 * radius, 0.0), Vec2::new(0.75 * radius, 0.1 * radius)),
            DomainSpec::Ellipse { a, b } => (Vec2::new(0.8 * a, 0.0), Vec2::new(0.75 * a, 0.1 * b)),
        };
        let pa = if u.trace_x0.is_empty() { da } else { self.point("uniqueness.trace_x0", &u.trace_x0)? };
        let pb = if u.trace_x0_b.is_empty() { db } else { self.point("uniqueness.trace_x0_b", &u.trace_x0_b)? };
        if pa == pb {
            return Err(config_err("uniqueness.trace_x0_b", "the two starts must differ"));
        }
        Ok((pa, pb))
    }

    /// `(base_dt, levels)` with `dt_k = base_dt / 2^{level_k}`.
    pub fn dt_levels(&self) -> Result<(f64, Vec<u32>)> {
        let l = &self.uniqueness.dt_ladder;
        let base = l.iter().cloned().fold(0.0, f64::max);
        let mut levels = Vec::with_capacity(l.len());
        for &dt in l {
            let r = (base / dt).log2();
            if !(dt > 0.0) || (r - r.round()).abs() > 1e-9 {
                return Err(config_err("uniqueness.dt_ladder", format!("{dt} is not the largest step over a power of two")));
            }
            levels.push(r.round() as u32);
        }
        Ok((base, levels))
    }

    fn validate(&self) -> Result<()> {
        self.domain_spec()?;
        self.drift_field()?;
        if !(self.dt > 0.0) {
            return Err(config_err("dt", "must be positive"));
        }
        if !(self.h > 0.0) {
            return Err(config_err("h", "must be positive"));
        }
        if let Some(t) = self.horizon.fixed() {
            if !(t > 0.0 && t <= 1.0) {
                return Err(config_err("horizon", format!("{t} must lie in (0, 1] or be \"auto\"")));
            }
        }
        let t = &self.transform;
        for (key, band) in [("transform.det_band", t.det_band), ("transform.select_band", t.select_band)] {
            if !(band[0] > 0.0 && band[0] < band[1]) {
                return Err(config_err(key, format!("{band:?} is not an interval of positive numbers")));
            }
        }
        let u = &self.uniqueness;
        if u.dt_ladder.is_empty() {
            return Err(config_err("uniqueness.dt_ladder", "ladder is empty"));
        }
        if u.eps_ladder.is_empty() {
            return Err(config_err("uniqueness.eps_ladder", "ladder is empty"));
        }
        if let Some(e) = u.eps_ladder.iter().find(|e| !(**e > 0.0)) {
            return Err(config_err("uniqueness.eps_ladder", format!("{e} is not positive")));
        }
        self.dt_levels()?;
        if let Some(r) = u.tau_r {
            if !(r > 0.0) {
                return Err(config_err("uniqueness.tau_r", "must be positive"));
            }
        }
        if !(0.0 < u.q && u.q < u.p && u.p < 1.0) {
            return Err(config_err("uniqueness.p", "need 0 < q < p < 1"));
        }
        if self.krylov.widths.is_empty() {
            return Err(config_err("krylov.widths", "ladder is empty"));
        }
        if !(self.testfn.eps > 0.0) {
            return Err(config_err("testfn.eps", "must be positive"));
        }
        for (key, s) in [("simulate.scheme", &self.simulate.scheme), ("uniqueness.scheme_a", &u.scheme_a), ("uniqueness.scheme_b", &u.scheme_b)] {
            if s.substeps == 0 || !s.substeps.is_power_of_two() {
                return Err(config_err(key, format!("substeps = {} is not a power of two", s.substeps)));
            }
        }
        self.point("simulate.x0", &self.simulate.x0)?;
        self.point("uniqueness.x0", &u.x0)?;
        self.trace_points()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MIN: &str = "domain = \"disk\"\ndomain_params = [1.0]\ndrift = \"zero\"\n";

    #[test]
    fn minimal_config_has_defaults() {
        let c = ExperimentConfig::from_toml(MIN).unwrap();
        assert_eq!(c.horizon, HorizonSpec::Named(AutoTag::Auto));
        assert_eq!(c.resolution(), Resolution::default());
        assert_eq!(c.uniqueness.eps_ladder, vec![0.1, 0.01, 0.001]);
        let (base, levels) = c.dt_levels().unwrap();
        assert_eq!(base, 1.0 / 64.0);
        assert_eq!(levels, vec![0, 1, 2, 3, 4]);
        assert_eq!(c.point("x0", &[]).unwrap(), Vec2::zeros());
        assert!(c.seed.is_none());
    }

    #[test]
    fn missing_seed_names_the_key() {
        let c = ExperimentConfig::from_toml(MIN).unwrap();
        match c.require_seed(None) {
            Err(Error::Config { key, .. }) => assert_eq!(key, "seed"),
            other => panic!("{other:?}"),
        }
        assert_eq!(c.require_seed(Some(3)).unwrap(), 3);
    }

    #[test]
    fn errors_name_keys_and_lines() {
        let bad = format!("{MIN}bogus = 1\n");
        match ExperimentConfig::from_toml(&bad) {
            Err(Error::Config { key, message }) => {
                assert_eq!(key, "bogus");
                assert!(message.contains("line 4"), "{message}");
            }
            other => panic!("{other:?}"),
        }
        let bad = MIN.replace("zero", "nonesuch");
        assert!(matches!(ExperimentConfig::from_toml(&bad), Err(Error::Config { key, .. }) if key == "drift"));
        let bad = format!("{MIN}horizon = 2.0\n");
        assert!(matches!(ExperimentConfig::from_toml(&bad), Err(Error::Config { key, .. }) if key == "horizon"));
        let bad = format!("{MIN}[uniqueness]\ndt_ladder = [0.1, 0.03]\n");
        assert!(matches!(ExperimentConfig::from_toml(&bad), Err(Error::Config { key, .. }) if key == "uniqueness.dt_ladder"));
        let bad = format!("{MIN}[uniqueness]\neps_ladder = []\n");
        assert!(matches!(ExperimentConfig::from_toml(&bad), Err(Error::Config { key, .. }) if key == "uniqueness.eps_ladder"));
    }

    #[test]
    fn horizon_and_schemes_parse() {
        let text = format!("{MIN}horizon = 0.25\nseed = 9\n[uniqueness]\nscheme_b = {{ kind = \"penalization\" }}\n");
        let c = ExperimentConfig::from_toml(&text).unwrap();
        assert_eq!(c.horizon.fixed(), Some(0.25));
        assert_eq!(c.uniqueness.scheme_b.scheme(), Scheme::Penalization { kappa: None });
        assert_eq!(c.require_seed(None).unwrap(), 9);
        let text = format!("{MIN}horizon = \"later\"\n");
        assert!(ExperimentConfig::from_toml(&text).is_err());
    }

    #[test]
    fn points_are_checked() {
        let c = ExperimentConfig::from_toml(MIN).unwrap();
        assert!(c.point("x0", &[0.5, 0.5]).is_ok());
        assert!(c.point("x0", &[2.0, 0.0]).is_err());
        assert!(c.point("x0", &[0.5]).is_err());
    }
}
