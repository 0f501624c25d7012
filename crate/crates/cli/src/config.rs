//! Simulation config files. Top-level keys set defaults for every
//! `[[scenario]]` block; a block may name a `preset` from the figure grid
//! (`"a"` to `"h"`) in place of `dgp` and `misspec`.
//!
//! ```toml
//! replicates = 200
//! master_seed = 20240501
//!
//! [[scenario]]
//! preset = "a"
//!
//! [[scenario]]
//! name = "weak-no-c"
//! dgp = "scenario1"
//! misspec = ["f_star", "pi_star"]
//! n = 1000
//!
//! [[scenario]]
//! name = "custom"
//! [scenario.params]
//! zeta = [-0.44, 0.40]
//! upsilon = [0.2, 0.38, 0.3]
//! sigma_y_sq = 0.51
//! alpha = [-0.15, 0.215, 0.14]
//! sigma_l_sq = 0.43
//! sigma_yl = 0.21
//! eta = [1.0, -1.75, -1.75, 1.25]
//! ```

use serde::Deserialize;

use drmiss::sim::{figure_scenario, Dgp, DgpParams, ScenarioConfig};
use drmiss::{EstimatorKind, Misspecification};

use crate::error::CliError;

/// Keys allowed both at the top level and inside a scenario block.
#[derive(Debug, Default, Clone)]
struct Layer {
    n: Option<usize>,
    replicates: Option<usize>,
    master_seed: Option<u64>,
    estimators: Option<Vec<String>>,
    m_imputations: Option<usize>,
    bootstrap_b: Option<usize>,
    sandwich: Option<bool>,
}

macro_rules! layered {
    ($(#[$meta:meta])* struct $name:ident { $($(#[$fmeta:meta])* $field:ident: $ty:ty,)* }) => {
        $(#[$meta])*
        struct $name {
            $($(#[$fmeta])* $field: $ty,)*
            n: Option<usize>,
            replicates: Option<usize>,
            master_seed: Option<u64>,
            estimators: Option<Vec<String>>,
            m_imputations: Option<usize>,
            bootstrap_b: Option<usize>,
            sandwich: Option<bool>,
        }

        impl $name {
            fn layer(&self) -> Layer {
                Layer {
                    n: self.n,
                    replicates: self.replicates,
                    master_seed: self.master_seed,
                    estimators: self.estimators.clone(),
                    m_imputations: self.m_imputations,
                    bootstrap_b: self.bootstrap_b,
                    sandwich: self.sandwich,
                }
            }
        }
    };
}

layered! {
    #[derive(Debug, Clone, Deserialize)]
    #[serde(deny_unknown_fields)]
    struct ScenarioBlock {
        name: Option<String>,
        preset: Option<String>,
        dgp: Option<String>,
        misspec: Option<Vec<String>>,
        params: Option<DgpParams>,
    }
}

layered! {
    #[derive(Debug, Clone, Deserialize)]
    #[serde(deny_unknown_fields)]
    struct ConfigFile {
        #[serde(default)]
        scenario: Vec<ScenarioBlock>,
    }
}

/// Values given on the command line; they win over the file.
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub n: Option<usize>,
    pub replicates: Option<usize>,
    pub master_seed: Option<u64>,
    pub estimators: Option<Vec<EstimatorKind>>,
    pub m_imputations: Option<usize>,
    pub bootstrap_b: Option<usize>,
    /// Seed used when neither the file nor `master_seed` above sets one.
    pub default_seed: Option<u64>,
}

pub fn parse_dgp(name: &str) -> Result<Dgp, String> {
    match name.trim().to_ascii_lowercase().replace('_', "-").as_str() {
        "scenario1" | "scenario-1" => Ok(Dgp::Scenario1),
        "scenario2" | "scenario-2" => Ok(Dgp::Scenario2),
        "discrete-toy" | "toy" => Ok(Dgp::DiscreteToy),
        other => Err(format!("unknown dgp `{other}` (expected scenario1, scenario2 or discrete-toy)")),
    }
}

fn parse_estimators(names: &[String]) -> Result<Vec<EstimatorKind>, String> {
    EstimatorKind::parse_list(&names.join(","))
}

/// Parse a config file into validated scenarios, applying `overrides` last.
pub fn parse_config(text: &str, overrides: &Overrides) -> Result<Vec<ScenarioConfig>, CliError> {
    let file: ConfigFile = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
    if file.scenario.is_empty() {
        return Err(CliError::Config("no [[scenario]] block".into()));
    }
    let mut out = Vec::with_capacity(file.scenario.len());
    for (i, block) in file.scenario.iter().enumerate() {
        let cfg = build_scenario(i, block, &file.layer(), overrides).map_err(CliError::Config)?;
        cfg.validate().map_err(CliError::Config)?;
        if out.iter().any(|c: &ScenarioConfig| c.name == cfg.name) {
            return Err(CliError::Config(format!("duplicate scenario name `{}`", cfg.name)));
        }
        out.push(cfg);
    }
    Ok(out)
}

fn build_scenario(index: usize, block: &ScenarioBlock, defaults: &Layer, cli: &Overrides) -> Result<ScenarioConfig, String> {
    let mut cfg = match &block.preset {
        Some(p) => {
            let mut chars = p.trim().chars();
            let label = match (chars.next(), chars.next()) {
                (Some(c), None) => c.to_ascii_lowercase(),
                _ => return Err(format!("unknown preset `{p}` (expected a to h)")),
            };
            if block.dgp.is_some() || block.misspec.is_some() || block.params.is_some() {
                return Err(format!("scenario {}: `preset` cannot be combined with `dgp`, `params` or `misspec`", index + 1));
            }
            figure_scenario(label).ok_or_else(|| format!("unknown preset `{p}` (expected a to h)"))?
        }
        None => {
            let dgp = match (&block.dgp, &block.params) {
                (Some(name), None) => parse_dgp(name)?,
                (None, Some(p)) => Dgp::Custom(p.clone()),
                (Some(_), Some(_)) => return Err(format!("scenario {}: give either `dgp` or `params`, not both", index + 1)),
                (None, None) => return Err(format!("scenario {}: missing `dgp`, `params` or `preset`", index + 1)),
            };
            let mut misspec = Misspecification::NONE;
            for s in block.misspec.iter().flatten() {
                misspec.set(s)?;
            }
            ScenarioConfig::new(format!("s{}", index + 1), dgp, misspec)
        }
    };
    if let Some(name) = &block.name {
        cfg.name = name.clone();
    }
    if let Some(v) = cli.default_seed {
        cfg.master_seed = v;
    }
    for layer in [defaults, &block.layer()] {
        apply_layer(&mut cfg, layer)?;
    }
    if let Some(v) = cli.n {
        cfg.n = v;
    }
    if let Some(v) = cli.replicates {
        cfg.replicates = v;
    }
    if let Some(v) = cli.master_seed {
        cfg.master_seed = v;
    }
    if let Some(v) = &cli.estimators {
        cfg.estimators = v.clone();
    }
    if let Some(v) = cli.m_imputations {
        cfg.m_imputations = v;
    }
    if cli.bootstrap_b.is_some() {
        cfg.bootstrap_b = cli.bootstrap_b;
    }
    Ok(cfg)
}

fn apply_layer(cfg: &mut ScenarioConfig, layer: &Layer) -> Result<(), String> {
    if let Some(v) = layer.n {
        cfg.n = v;
    }
    if let Some(v) = layer.replicates {
        cfg.replicates = v;
    }
    if let Some(v) = layer.master_seed {
        cfg.master_seed = v;
    }
    if let Some(v) = &layer.estimators {
        cfg.estimators = parse_estimators(v)?;
    }
    if let Some(v) = layer.m_imputations {
        cfg.m_imputations = v;
    }
    if layer.bootstrap_b.is_some() {
        cfg.bootstrap_b = layer.bootstrap_b;
    }
    if let Some(v) = layer.sandwich {
        cfg.sandwich = v;
    }
    Ok(())
}
