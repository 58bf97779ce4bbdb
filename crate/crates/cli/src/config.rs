//! Run configuration: one JSON document per run.

use std::path::{Path, PathBuf};

use dynport::dp::{PortfolioModel, ReturnModel};
use dynport::market::{ChainFactor, MarketParams, ParameterChain};
use dynport::options::{OptionKind, OptionPortfolioModel, OptionSpec};
use dynport::quadrature::default_order;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    NoConsumption,
    Consumption,
    Option,
    OptionEz,
}

impl ModelKind {
    pub fn has_option(self) -> bool {
        matches!(self, ModelKind::Option | ModelKind::OptionEz)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreferenceConfig {
    /// CRRA coefficient, or the inverse IES for Epstein–Zin runs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    /// Alternative to `gamma` for Epstein–Zin runs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ies: Option<f64>,
    #[serde(default)]
    pub rho: f64,
    /// Epstein–Zin risk aversion.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub psi: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Discretization {
    /// Years; option runs default to `rounds * expiry`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon: Option<f64>,
    pub dt: f64,
    pub degree: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nodes: Option<usize>,
    /// Gauss–Hermite nodes per dimension for lognormal returns.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quadrature_order: Option<usize>,
    /// Binomial sub-period length; one risky asset only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lattice_h: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptionConfig {
    pub kind: OptionKind,
    pub expiry: f64,
    pub tau: f64,
    #[serde(default = "one")]
    pub rounds: usize,
}

fn one() -> usize {
    1
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyErrorConfig {
    pub degree: usize,
    #[serde(default = "default_probes")]
    pub probes: usize,
}

fn default_probes() -> usize {
    dynport::analysis::DEFAULT_PROBES
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnosticsConfig {
    #[serde(default = "yes")]
    pub ntr: bool,
    /// Pre-trade points at which to report certainty equivalents.
    #[serde(default)]
    pub ce_points: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub policy_error: Option<PolicyErrorConfig>,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        Self { ntr: true, ce_points: Vec::new(), policy_error: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub kind: ModelKind,
    pub market: MarketParams,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub chain: Vec<ChainFactor>,
    pub preference: PreferenceConfig,
    pub discretization: Discretization,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub option: Option<OptionConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub diagnostics: DiagnosticsConfig,
}

/// A validated configuration with its model.
pub enum Model {
    Portfolio(PortfolioModel),
    Option(OptionPortfolioModel),
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("invalid config: {e}")))
    }

    /// Fills every defaulted field so the echo reproduces the run.
    pub fn resolve(mut self) -> Result<Self, CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        let d = &mut self.discretization;
        let p = &mut self.preference;
        if self.kind == ModelKind::OptionEz {
            match (p.gamma, p.ies) {
                (Some(g), Some(i)) if (g * i - 1.0).abs() > 1e-12 => return bad("gamma and ies disagree".into()),
                (None, Some(i)) if i > 0.0 => p.gamma = Some(1.0 / i),
                (None, _) => return bad("Epstein-Zin runs need gamma or ies".into()),
                _ => {}
            }
            if p.psi.is_none() {
                return bad("Epstein-Zin runs need the risk aversion psi".into());
            }
        } else {
            if p.ies.is_some() || p.psi.is_some() {
                return bad("ies and psi are only used by option_ez runs".into());
            }
            if p.gamma.is_none() {
                return bad("preference.gamma is required".into());
            }
        }
        if self.kind.has_option() {
            let Some(o) = &self.option else {
                return bad("option runs need an option section".into());
            };
            let h = o.rounds as f64 * o.expiry;
            match d.horizon {
                Some(t) if (t - h).abs() > 1e-9 * h.max(1.0) => return bad(format!("horizon {t} differs from rounds * expiry = {h}")),
                _ => d.horizon = Some(h),
            }
            if d.quadrature_order.is_some() {
                return bad("option runs use binomial returns; drop quadrature_order".into());
            }
            d.lattice_h.get_or_insert(d.dt / 10.0);
            if self.market.k() != 1 {
                return bad("option runs have exactly one risky asset".into());
            }
        } else {
            if self.option.is_some() {
                return bad("option section given for a run without options".into());
            }
            if d.horizon.is_none() {
                return bad("discretization.horizon is required".into());
            }
            if d.lattice_h.is_none() {
                d.quadrature_order.get_or_insert(default_order(d.dt));
            } else if d.quadrature_order.is_some() {
                return bad("choose either quadrature_order or lattice_h".into());
            }
        }
        d.nodes.get_or_insert(d.degree + 1);
        Ok(self)
    }

    fn substeps(&self) -> Result<usize, CliError> {
        let d = &self.discretization;
        let h = d.lattice_h.expect("resolved");
        let n = d.dt / h;
        if !(h > 0.0) || n.round() < 1.0 || (n - n.round()).abs() > 1e-9 * n {
            return Err(CliError::Config(format!("lattice_h {h} does not divide dt {}", d.dt)));
        }
        Ok(n.round() as usize)
    }

    /// Builds and validates the model of a resolved configuration.
    pub fn model(&self) -> Result<Model, CliError> {
        let d = &self.discretization;
        let p = &self.preference;
        let gamma = p.gamma.expect("resolved");
        let model = if self.kind.has_option() {
            let o = self.option.as_ref().expect("resolved");
            if !self.chain.is_empty() {
                return Err(CliError::Config("option runs do not support parameter chains".into()));
            }
            let m = &self.market;
            Model::Option(OptionPortfolioModel {
                r: m.r,
                mu: m.mu[0],
                sigma: m.sigma[0],
                tau: m.tau[0],
                option: OptionSpec { kind: o.kind, expiry: o.expiry, tau: o.tau },
                gamma,
                psi: p.psi,
                rho: p.rho,
                consumption: self.kind == ModelKind::OptionEz,
                dt: d.dt,
                substeps: self.substeps()?,
                rounds: o.rounds,
                degree: d.degree,
                nodes: d.nodes,
            })
        } else {
            let chain = if self.chain.is_empty() {
                ParameterChain::single(self.market.clone())
            } else {
                ParameterChain::from_factors(self.market.clone(), &self.chain).map_err(|e| CliError::Config(e.to_string()))?
            };
            let returns = match d.quadrature_order {
                Some(order) => ReturnModel::Lognormal { order },
                None => ReturnModel::Binomial { substeps: self.substeps()? },
            };
            Model::Portfolio(PortfolioModel {
                chain,
                gamma,
                horizon: d.horizon.expect("resolved"),
                dt: d.dt,
                consumption: self.kind == ModelKind::Consumption,
                rho: p.rho,
                degree: d.degree,
                returns,
                nodes: d.nodes,
            })
        };
        let checked = match &model {
            Model::Portfolio(m) => m.validate(),
            Model::Option(m) => m.validate(),
        };
        checked.map_err(|e| CliError::Config(e.to_string()))?;
        let k = match &model {
            Model::Portfolio(m) => m.k(),
            Model::Option(_) => 2,
        };
        if let Some(pt) = self.diagnostics.ce_points.iter().find(|pt| pt.len() != k || pt.iter().any(|v| !(0.0..=1.0).contains(v))) {
            return Err(CliError::Config(format!("ce point {pt:?} is not in the unit cube of dimension {k}")));
        }
        if let Some(pe) = &self.diagnostics.policy_error {
            if pe.probes < 100 {
                return Err(CliError::Config("policy_error.probes must be at least 100".into()));
            }
            if pe.degree > d.nodes.unwrap_or(d.degree + 1) - 1 {
                return Err(CliError::Config("policy_error.degree exceeds the node count".into()));
            }
        }
        if self.workers == Some(0) {
            return Err(CliError::Config("workers must be positive".into()));
        }
        Ok(model)
    }
}
