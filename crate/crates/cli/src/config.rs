//! TOML run configuration.
//!
//! ```toml
//! seed = 7
//!
//! [model]
//! catalog = "dissipative_meanfield"   # LQ or general catalog name
//! params = { l0 = 10.0, coupling = 0.5 }
//! initial = { law = "gaussian", mean = [1.0], sd = [0.5] }
//!
//! [numerics]
//! n_particles = 10000
//! steps = 200
//!
//! [checks]
//! consistency = true
//! spike = true
//!
//! [output]
//! directory = "out"
//! ```
//!
//! A general model can be given term by term under `[model.registry]`
//! instead of `catalog`.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use tic_mkv::equilibrium::Backend;
use tic_mkv::hjb1d::XDomain;
use tic_mkv::model::CatalogParams;
use tic_mkv::registry::{build_general_catalog, GeneralCatalog, GeneralModelConfig, GeneralParams};
use tic_mkv::riccati::{OffsetForm, RiccatiOptions};
use tic_mkv::verify::{default_ladder, ProbeControls, ProbePoint};
use tic_mkv::{build_lq_catalog, EquilibriumOptions, InitialLaw, LqCatalog, Problem};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Overridden by `--seed` and `TIC_MKV_SEED`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub model: ModelSection,
    #[serde(default)]
    pub numerics: Numerics,
    #[serde(default)]
    pub checks: Checks,
    #[serde(default)]
    pub output: Output,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub catalog: Option<String>,
    /// Catalog parameters; keys depend on the catalog.
    #[serde(default, skip_serializing_if = "toml::Table::is_empty")]
    pub params: toml::Table,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub registry: Option<GeneralModelConfig>,
    /// Defaults to the catalog's initial law, or N(0, 1) for registry models.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial: Option<InitialLaw>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Numerics {
    pub n_particles: usize,
    pub steps: usize,
    pub x_intervals: usize,
    /// `[lo, hi]` of the HJB grid; derived from the initial law when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub x_domain: Option<[f64; 2]>,
    pub tol_fp: f64,
    pub max_iter: usize,
    pub damping: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub backend: Option<Backend>,
    pub offset_form: OffsetForm,
    /// Spike lengths; `{0.08, 0.04, 0.02, 0.01} T` when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eps_ladder: Option<Vec<f64>>,
    pub mc_paths: usize,
}

impl Default for Numerics {
    fn default() -> Self {
        let eq = EquilibriumOptions::default();
        Self {
            n_particles: eq.n_particles,
            steps: eq.steps,
            x_intervals: eq.x_intervals,
            x_domain: None,
            tol_fp: eq.tol_fp,
            max_iter: eq.max_iter,
            damping: eq.damping,
            backend: None,
            offset_form: OffsetForm::default(),
            eps_ladder: None,
            mc_paths: 20_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Checks {
    pub consistency: bool,
    pub spike: bool,
    /// Seed of the consistency re-simulation; derived from the run seed when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fresh_seed: Option<u64>,
    /// Spike probe points; three times by three cloud quantiles when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub probes: Option<Vec<ProbePoint>>,
    pub probe_controls: ProbeControls,
}

impl Default for Checks {
    fn default() -> Self {
        Self { consistency: true, spike: true, fresh_seed: None, probes: None, probe_controls: ProbeControls::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Output {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub directory: Option<PathBuf>,
    /// Also write the particle paths of the equilibrium as `paths.bin`.
    pub paths: bool,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run configuration serializes")
    }

    /// Checks numerics ranges and resolves the model.
    pub fn validate(&self) -> Result<ResolvedModel, CliError> {
        let n = &self.numerics;
        let bad = |msg: String| Err(CliError::Config(msg));
        if n.n_particles < 2 || n.steps == 0 || n.x_intervals < 2 || n.max_iter == 0 || n.mc_paths < 2 {
            return bad("n_particles, mc_paths >= 2 and steps, max_iter >= 1, x_intervals >= 2 are required".into());
        }
        if !(n.tol_fp > 0.0) || !(n.damping > 0.0 && n.damping <= 1.0) {
            return bad(format!("tol_fp must be positive and damping in (0, 1], got {} and {}", n.tol_fp, n.damping));
        }
        if let Some(ladder) = &n.eps_ladder {
            if ladder.is_empty() || ladder.iter().any(|e| !(*e > 0.0)) {
                return bad("eps_ladder needs positive entries".into());
            }
        }
        if let Some([lo, hi]) = n.x_domain {
            XDomain::new(lo, hi, n.x_intervals).map_err(|e| CliError::Config(e.to_string()))?;
        }
        let model = self.model.resolve()?;
        if let Some(initial) = &self.model.initial {
            initial.validate().map_err(|e| CliError::Config(e.to_string()))?;
            if initial.dim() != model.problem.dim() {
                return bad(format!("initial law has dimension {}, model has {}", initial.dim(), model.problem.dim()));
            }
        }
        Ok(model)
    }

    /// Flag, then environment, then file, then zero.
    pub fn effective_seed(&self, flag: Option<u64>) -> u64 {
        flag.or(self.seed).unwrap_or(0)
    }

    pub fn equilibrium_options(&self, seed: u64, workers: Option<usize>) -> EquilibriumOptions {
        let n = &self.numerics;
        EquilibriumOptions {
            backend: n.backend,
            n_particles: n.n_particles,
            steps: n.steps,
            seed,
            tol_fp: n.tol_fp,
            max_iter: n.max_iter,
            damping: n.damping,
            riccati: RiccatiOptions { offset_form: n.offset_form },
            x_domain: n.x_domain.map(|[lo, hi]| XDomain { lo, hi, intervals: n.x_intervals }),
            x_intervals: n.x_intervals,
            workers,
            ..EquilibriumOptions::default()
        }
    }

    pub fn ladder(&self, horizon: f64) -> Vec<f64> {
        self.numerics.eps_ladder.clone().unwrap_or_else(|| default_ladder(horizon))
    }
}

/// A model ready to solve, with its initial law.
#[derive(Debug, Clone)]
pub struct ResolvedModel {
    pub problem: Problem,
    pub initial: InitialLaw,
}

fn params_from<T: serde::de::DeserializeOwned>(table: &toml::Table, catalog: &str) -> Result<T, CliError> {
    toml::Value::Table(table.clone())
        .try_into()
        .map_err(|e| CliError::Config(format!("parameters of '{catalog}': {e}")))
}

impl ModelSection {
    pub fn resolve(&self) -> Result<ResolvedModel, CliError> {
        let config_err = |e: tic_mkv::Error| CliError::Config(e.to_string());
        match (&self.catalog, &self.registry) {
            (Some(_), Some(_)) => Err(CliError::Config("give either model.catalog or model.registry, not both".into())),
            (None, None) => Err(CliError::Config("model.catalog or model.registry is required".into())),
            (None, Some(registry)) => {
                if !self.params.is_empty() {
                    return Err(CliError::Config("model.params only applies to catalog models".into()));
                }
                let model = registry.build().map_err(config_err)?;
                let initial = self.initial.clone().unwrap_or(InitialLaw::Gaussian { mean: vec![0.0], sd: vec![1.0] });
                Ok(ResolvedModel { problem: Problem::General(model), initial })
            }
            (Some(name), None) => {
                if let Ok(lq) = LqCatalog::from_str(name) {
                    let params: CatalogParams = params_from(&self.params, name)?;
                    let model = build_lq_catalog(lq, &params).map_err(config_err)?;
                    let initial = self.initial.clone().unwrap_or_else(|| lq.default_initial(&params));
                    Ok(ResolvedModel { problem: Problem::Lq(model), initial })
                } else if let Ok(general) = GeneralCatalog::from_str(name) {
                    let params: GeneralParams = params_from(&self.params, name)?;
                    let model = build_general_catalog(general, &params).map_err(config_err)?;
                    let initial = self.initial.clone().unwrap_or_else(|| general.default_initial());
                    Ok(ResolvedModel { problem: Problem::General(model), initial })
                } else {
                    let known: Vec<&str> = LqCatalog::ALL
                        .iter()
                        .map(|c| c.name())
                        .chain(GeneralCatalog::ALL.iter().map(|c| c.name()))
                        .collect();
                    Err(CliError::Config(format!("unknown catalog '{name}'; known: {}", known.join(", "))))
                }
            }
        }
    }
}
