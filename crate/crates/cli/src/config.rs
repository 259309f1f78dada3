//! Experiment configuration: TOML file, command-line overrides, defaults.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, ensure, Context, Result};
use diffbench_core::{CorruptionDirection, CorruptionSpec, SchemeKind};
use serde::Deserialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Experiment {
    Figure1,
    OrderStudy,
    SelfTest,
}

impl Experiment {
    pub fn as_str(&self) -> &'static str {
        match self {
            Experiment::Figure1 => "figure1",
            Experiment::OrderStudy => "order_study",
            Experiment::SelfTest => "self_test",
        }
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Experiment {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "figure1" => Ok(Experiment::Figure1),
            "order_study" | "order" => Ok(Experiment::OrderStudy),
            "self_test" | "selftest" => Ok(Experiment::SelfTest),
            other => {
                bail!("unknown experiment {other:?} (expected figure1, order_study or self_test)")
            }
        }
    }
}

pub const DEFAULT_LAMBDAS: [f64; 3] = [10.0, 50.0, 100.0];
pub const DEFAULT_H_LIST: [f64; 5] = [0.4, 0.2, 0.1, 0.05, 0.025];
pub const DEFAULT_FIGURE1_TRAJ: usize = 2000;
pub const DEFAULT_ORDER_TRAJ: usize = 100_000;
pub const DEFAULT_REFERENCE: usize = 10_000;
pub const DEFAULT_MC_PARTICLES: usize = 10_000;
pub const DEFAULT_SEED: u64 = 20240601;

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    pub lambda_list: Vec<f64>,
    pub d: usize,
    pub n_data: usize,
    pub sigma2: f64,
    pub horizon: f64,
    pub h_list: Vec<f64>,
    pub schemes: Vec<SchemeKind>,
    pub n_traj: usize,
    pub n_reference: usize,
    pub mc_particles: usize,
    pub corruption: CorruptionSpec,
    pub master_seed: u64,
    pub out_dir: PathBuf,
    /// Fill `wall_ms` in results.csv. Off by default so reruns are byte-identical.
    pub record_timings: bool,
}

impl ExperimentConfig {
    pub fn defaults(experiment: Experiment) -> Self {
        Self {
            experiment,
            lambda_list: DEFAULT_LAMBDAS.to_vec(),
            d: 2,
            n_data: 100,
            sigma2: 100.0,
            horizon: 10.0,
            h_list: DEFAULT_H_LIST.to_vec(),
            schemes: SchemeKind::ALL.to_vec(),
            n_traj: match experiment {
                Experiment::OrderStudy => DEFAULT_ORDER_TRAJ,
                _ => DEFAULT_FIGURE1_TRAJ,
            },
            n_reference: DEFAULT_REFERENCE,
            mc_particles: DEFAULT_MC_PARTICLES,
            corruption: CorruptionSpec::none(),
            master_seed: DEFAULT_SEED,
            out_dir: PathBuf::from("out"),
            record_timings: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            !self.lambda_list.is_empty(),
            "lambda_list must not be empty"
        );
        for &l in &self.lambda_list {
            ensure!(
                l > 0.0 && l.is_finite(),
                "lambda_list: {l} is not a positive number"
            );
        }
        ensure!(self.d >= 1, "d must be at least 1");
        ensure!(self.n_data >= 1, "n_data must be at least 1");
        ensure!(
            self.sigma2 > 0.0 && self.sigma2.is_finite(),
            "sigma2 must be positive, got {}",
            self.sigma2
        );
        ensure!(
            self.horizon > 0.0 && self.horizon.is_finite(),
            "T must be positive, got {}",
            self.horizon
        );
        ensure!(!self.h_list.is_empty(), "h_list must not be empty");
        for &h in &self.h_list {
            ensure!(
                h > 0.0 && h.is_finite(),
                "h_list: step {h} must be positive"
            );
        }
        for w in self.h_list.windows(2) {
            ensure!(
                w[1] < w[0],
                "h_list must be strictly decreasing, got {} then {}",
                w[0],
                w[1]
            );
        }
        ensure!(
            self.horizon > self.h_list[0],
            "T = {} must exceed the largest step {}",
            self.horizon,
            self.h_list[0]
        );
        ensure!(!self.schemes.is_empty(), "schemes must not be empty");
        for (i, s) in self.schemes.iter().enumerate() {
            ensure!(!self.schemes[..i].contains(s), "schemes: {s} listed twice");
        }
        ensure!(self.n_traj >= 1, "n_traj must be at least 1");
        ensure!(self.n_reference >= 1, "n_reference must be at least 1");
        ensure!(
            self.mc_particles >= 100,
            "mc_particles must be at least 100, got {}",
            self.mc_particles
        );
        let c = &self.corruption;
        for (name, v) in [("eps_sc", c.eps_sc), ("eps_l", c.eps_l), ("eps_m", c.eps_m)] {
            ensure!(
                v >= 0.0 && v.is_finite(),
                "corruption.{name} must be non-negative, got {v}"
            );
        }
        Ok(())
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCorruption {
    eps_sc: Option<f64>,
    eps_l: Option<f64>,
    eps_m: Option<f64>,
    direction: Option<String>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    experiment: Option<String>,
    lambda_list: Option<Vec<f64>>,
    d: Option<usize>,
    n_data: Option<usize>,
    sigma2: Option<f64>,
    #[serde(rename = "T")]
    horizon: Option<f64>,
    h_list: Option<Vec<f64>>,
    schemes: Option<Vec<String>>,
    n_traj: Option<usize>,
    n_reference: Option<usize>,
    mc_particles: Option<usize>,
    corruption: Option<RawCorruption>,
    master_seed: Option<u64>,
    out_dir: Option<PathBuf>,
    record_timings: Option<bool>,
}

/// Command-line values that replace file or default values.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub experiment: Option<Experiment>,
    pub master_seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub h_list: Option<Vec<f64>>,
    pub lambda_list: Option<Vec<f64>>,
    pub schemes: Option<Vec<SchemeKind>>,
    pub n_traj: Option<usize>,
}

fn parse_schemes(names: &[String]) -> Result<Vec<SchemeKind>> {
    names
        .iter()
        .map(|s| {
            s.parse::<SchemeKind>()
                .map_err(|e| anyhow::anyhow!("schemes: {e}"))
        })
        .collect()
}

fn parse_direction(s: &str) -> Result<CorruptionDirection> {
    match s {
        "per_call" => Ok(CorruptionDirection::PerCall),
        "persistent" => Ok(CorruptionDirection::Persistent),
        other => bail!("corruption.direction: expected per_call or persistent, got {other:?}"),
    }
}

/// Parses config text. Missing keys take defaults; the experiment comes from
/// `overrides`, else the text, else `figure1`.
pub fn parse_config_str(text: &str, overrides: &Overrides) -> Result<ExperimentConfig> {
    let raw: RawConfig = toml::from_str(text).context("invalid config")?;
    let experiment = match (overrides.experiment, &raw.experiment) {
        (Some(e), _) => e,
        (None, Some(s)) => s.parse()?,
        (None, None) => Experiment::Figure1,
    };
    let mut cfg = ExperimentConfig::defaults(experiment);
    if let Some(v) = raw.lambda_list {
        cfg.lambda_list = v;
    }
    if let Some(v) = raw.d {
        cfg.d = v;
    }
    if let Some(v) = raw.n_data {
        cfg.n_data = v;
    }
    if let Some(v) = raw.sigma2 {
        cfg.sigma2 = v;
    }
    if let Some(v) = raw.horizon {
        cfg.horizon = v;
    }
    if let Some(v) = raw.h_list {
        cfg.h_list = v;
    }
    if let Some(v) = raw.schemes {
        cfg.schemes = parse_schemes(&v)?;
    }
    if let Some(v) = raw.n_traj {
        cfg.n_traj = v;
    }
    if let Some(v) = raw.n_reference {
        cfg.n_reference = v;
    }
    if let Some(v) = raw.mc_particles {
        cfg.mc_particles = v;
    }
    if let Some(c) = raw.corruption {
        cfg.corruption = CorruptionSpec {
            eps_sc: c.eps_sc.unwrap_or(0.0),
            eps_l: c.eps_l.unwrap_or(0.0),
            eps_m: c.eps_m.unwrap_or(0.0),
            direction: c
                .direction
                .as_deref()
                .map(parse_direction)
                .transpose()?
                .unwrap_or_default(),
        };
    }
    if let Some(v) = raw.master_seed {
        cfg.master_seed = v;
    }
    if let Some(v) = raw.out_dir {
        cfg.out_dir = v;
    }
    if let Some(v) = raw.record_timings {
        cfg.record_timings = v;
    }

    if let Some(v) = overrides.master_seed {
        cfg.master_seed = v;
    }
    if let Some(v) = &overrides.out_dir {
        cfg.out_dir = v.clone();
    }
    if let Some(v) = &overrides.h_list {
        cfg.h_list = v.clone();
    }
    if let Some(v) = &overrides.lambda_list {
        cfg.lambda_list = v.clone();
    }
    if let Some(v) = &overrides.schemes {
        cfg.schemes = v.clone();
    }
    if let Some(v) = overrides.n_traj {
        cfg.n_traj = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Reads `file` (or nothing) and applies `overrides`.
pub fn parse_config(file: Option<&Path>, overrides: &Overrides) -> Result<ExperimentConfig> {
    let text = match file {
        Some(p) => {
            std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?
        }
        None => String::new(),
    };
    parse_config_str(&text, overrides)
}

/// Comma-separated floats, as taken by `--h-list` and `--lambda-list`.
pub fn parse_f64_list(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|p| {
            let p = p.trim();
            p.parse::<f64>()
                .with_context(|| format!("{p:?} is not a number"))
        })
        .collect()
}

pub fn parse_scheme_list(s: &str) -> Result<Vec<SchemeKind>> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<SchemeKind>()
                .map_err(|e| anyhow::anyhow!("{e}"))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = parse_config_str("", &Overrides::default()).unwrap();
        assert_eq!(cfg, ExperimentConfig::defaults(Experiment::Figure1));
        assert_eq!(cfg.lambda_list, vec![10.0, 50.0, 100.0]);
        assert_eq!(
            (cfg.d, cfg.n_data, cfg.sigma2, cfg.horizon),
            (2, 100, 100.0, 10.0)
        );
        assert_eq!(cfg.h_list, vec![0.4, 0.2, 0.1, 0.05, 0.025]);
        assert_eq!(cfg.n_traj, 2000);
    }

    #[test]
    fn order_study_defaults_to_more_trajectories() {
        let o = Overrides {
            experiment: Some(Experiment::OrderStudy),
            ..Overrides::default()
        };
        assert_eq!(parse_config_str("", &o).unwrap().n_traj, 100_000);
        let cfg = parse_config_str("experiment = \"order_study\"", &Overrides::default()).unwrap();
        assert_eq!(cfg.experiment, Experiment::OrderStudy);
    }

    #[test]
    fn file_values_and_overrides() {
        let text = r#"
            lambda_list = [5.0]
            T = 8.0
            schemes = ["em", "SO"]
            mc_particles = 500
            corruption = { eps_sc = 0.1, direction = "persistent" }
            record_timings = true
        "#;
        let o = Overrides {
            h_list: Some(vec![0.5, 0.1]),
            n_traj: Some(7),
            ..Overrides::default()
        };
        let cfg = parse_config_str(text, &o).unwrap();
        assert_eq!(cfg.lambda_list, vec![5.0]);
        assert_eq!(cfg.horizon, 8.0);
        assert_eq!(cfg.schemes, vec![SchemeKind::Em, SchemeKind::So]);
        assert_eq!(cfg.h_list, vec![0.5, 0.1]);
        assert_eq!(cfg.n_traj, 7);
        assert_eq!(cfg.corruption, CorruptionSpec::score_only(0.1).persistent());
        assert!(cfg.record_timings);
    }

    #[test]
    fn rejects_bad_values() {
        let bad = [
            ("h_list = [0.2, 0.0]", "positive"),
            ("h_list = [0.1, 0.2]", "strictly decreasing"),
            ("h_list = [0.1, 0.1]", "strictly decreasing"),
            ("T = 0.3\nh_list = [0.4]", "must exceed"),
            ("n_traj = 0", "n_traj"),
            ("mc_particles = 10", "mc_particles"),
            ("schemes = [\"EM\", \"em\"]", "twice"),
            ("schemes = [\"XX\"]", "schemes"),
            ("lambda_list = [-1.0]", "lambda_list"),
            ("corruption = { eps_sc = -0.1 }", "eps_sc"),
            ("corruption = { direction = \"sideways\" }", "direction"),
            ("experiment = \"figure2\"", "unknown experiment"),
        ];
        for (text, needle) in bad {
            let err = format!(
                "{:#}",
                parse_config_str(text, &Overrides::default()).unwrap_err()
            );
            assert!(err.contains(needle), "{text:?} gave {err:?}");
        }
    }

    #[test]
    fn rejects_unknown_keys() {
        let err = format!(
            "{:#}",
            parse_config_str("n_trajectories = 5", &Overrides::default()).unwrap_err()
        );
        assert!(err.contains("n_trajectories"), "{err}");
        let err = format!(
            "{:#}",
            parse_config_str("corruption = { eps = 1.0 }", &Overrides::default()).unwrap_err()
        );
        assert!(err.contains("eps"), "{err}");
    }

    #[test]
    fn h_list_override_with_zero_is_rejected() {
        let o = Overrides {
            h_list: Some(parse_f64_list("0.5,0").unwrap()),
            ..Overrides::default()
        };
        assert!(parse_config_str("", &o).is_err());
    }

    #[test]
    fn list_parsers() {
        assert_eq!(parse_f64_list("0.5, 0.1").unwrap(), vec![0.5, 0.1]);
        assert!(parse_f64_list("0.5,x").is_err());
        assert_eq!(
            parse_scheme_list("so,rei").unwrap(),
            vec![SchemeKind::So, SchemeKind::Rei]
        );
    }
}
