//! Named coefficient forms for general one-dimensional models, so that models
//! can be described in configuration files without runtime code loading.
//!
//! A coefficient is a sum of [`Term`]s in the state `x` and the moments of the
//! measure. Controls enter linearly in the drift, `a2 = gain * v`, and
//! quadratically in the cost, `f2 = weight * v^2`, so `psi` is the clamped
//! minimizer `-gain * q / (2 weight)`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measures::MomentVector;
use crate::model::{ControlGrid, ModelSpec};
use crate::simulate::InitialLaw;

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "snake_case", deny_unknown_fields)]
pub enum Term {
    Constant {
        value: f64,
    },
    /// `intercept + slope * x`
    Affine {
        #[serde(default)]
        intercept: f64,
        slope: f64,
    },
    /// `weight * (x - center)^2`
    Quadratic {
        weight: f64,
        #[serde(default)]
        center: f64,
    },
    /// `amplitude * sin(frequency * x + phase)`
    Trigonometric {
        amplitude: f64,
        #[serde(default = "one")]
        frequency: f64,
        #[serde(default)]
        phase: f64,
    },
    /// `mean * E[X] + second_moment * E[X^2] + variance * Var[X]`
    MomentCoupled {
        #[serde(default)]
        mean: f64,
        #[serde(default)]
        second_moment: f64,
        #[serde(default)]
        variance: f64,
    },
}

impl Term {
    pub fn eval(&self, x: f64, m: &MomentVector) -> f64 {
        match *self {
            Term::Constant { value } => value,
            Term::Affine { intercept, slope } => intercept + slope * x,
            Term::Quadratic { weight, center } => weight * (x - center) * (x - center),
            Term::Trigonometric { amplitude, frequency, phase } => amplitude * (frequency * x + phase).sin(),
            Term::MomentCoupled { mean, second_moment, variance } => {
                mean * m.mean_scalar() + second_moment * m.second_moment + variance * m.variance()
            }
        }
    }

    /// Lipschitz constant in `x`, if finite.
    pub fn lipschitz(&self) -> Option<f64> {
        match *self {
            Term::Constant { .. } | Term::MomentCoupled { .. } => Some(0.0),
            Term::Affine { slope, .. } => Some(slope.abs()),
            Term::Quadratic { weight, .. } => (weight == 0.0).then_some(0.0),
            Term::Trigonometric { amplitude, frequency, .. } => Some((amplitude * frequency).abs()),
        }
    }
}

fn sum(terms: &[Term], x: f64, m: &MomentVector) -> f64 {
    terms.iter().map(|t| t.eval(x, m)).sum()
}

fn lipschitz(terms: &[Term]) -> Option<f64> {
    terms.iter().map(Term::lipschitz).sum()
}

/// Weight applied to the costs evaluated at time `tau`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Discount {
    #[default]
    None,
    /// `1 / (1 + rate (t - tau))`
    Hyperbolic { rate: f64 },
    /// `exp(-rate (t - tau))`
    Exponential { rate: f64 },
}

impl Discount {
    pub fn weight(&self, tau: f64, t: f64) -> f64 {
        let lag = (t - tau).max(0.0);
        match *self {
            Discount::None => 1.0,
            Discount::Hyperbolic { rate } => 1.0 / (1.0 + rate * lag),
            Discount::Exponential { rate } => (-rate * lag).exp(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PsiMode {
    #[default]
    ClosedForm,
    /// Numeric argmin over `points` values in `[-bound, bound]`.
    Grid { points: usize },
}

/// General one-dimensional model built from registry forms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneralModelConfig {
    pub name: String,
    pub horizon: f64,
    /// `a1(x, m)`
    pub drift: Vec<Term>,
    /// `a2 = control_gain * v`
    pub control_gain: f64,
    pub diffusion: Vec<Term>,
    /// `f1(x, m)`, multiplied by the discount weight.
    pub running: Vec<Term>,
    /// `f2 = control_weight * v^2`, multiplied by the discount weight.
    pub control_weight: f64,
    /// `g(x, m)`, multiplied by the discount weight at `T`.
    pub terminal: Vec<Term>,
    pub discount: Discount,
    /// Controls are confined to `[-bound, bound]`; unbounded when absent.
    pub control_bound: Option<f64>,
    pub psi: PsiMode,
}

impl Default for GeneralModelConfig {
    fn default() -> Self {
        Self {
            name: "custom".into(),
            horizon: 1.0,
            drift: Vec::new(),
            control_gain: 1.0,
            diffusion: vec![Term::Constant { value: 1.0 }],
            running: Vec::new(),
            control_weight: 1.0,
            terminal: Vec::new(),
            discount: Discount::None,
            control_bound: None,
            psi: PsiMode::ClosedForm,
        }
    }
}

/// Half-width of the control grid when no bound is given.
const DEFAULT_GRID_BOUND: f64 = 5.0;

impl GeneralModelConfig {
    pub fn build(&self) -> Result<ModelSpec> {
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        if !(self.control_weight > 0.0) {
            return bad(format!("control_weight must be positive, got {}", self.control_weight));
        }
        if let Some(b) = self.control_bound {
            if !(b > 0.0) {
                return bad(format!("control_bound must be positive, got {b}"));
            }
        }
        let (drift, diffusion, running, terminal) =
            (self.drift.clone(), self.diffusion.clone(), self.running.clone(), self.terminal.clone());
        let (gain, weight, discount, horizon) = (self.control_gain, self.control_weight, self.discount, self.horizon);
        let mut model = ModelSpec::new(self.name.clone(), horizon, 1)?
            .with_drift_state(move |_, x, m| sum(&drift, x, m))
            .with_drift_control(move |_, _, v| gain * v[0])
            .with_diffusion(move |_, x, m| sum(&diffusion, x, m))
            .with_cost_state(move |tau, t, x, m| discount.weight(tau, t) * sum(&running, x, m))
            .with_cost_control(move |tau, t, _, v| discount.weight(tau, t) * weight * v[0] * v[0])
            .with_terminal(move |tau, x, m| discount.weight(tau, horizon) * sum(&terminal, x, m));
        model = match self.psi {
            PsiMode::ClosedForm => {
                let bound = self.control_bound.unwrap_or(f64::INFINITY);
                model.with_psi_closed_form(move |_, _, q, out| out[0] = (-gain * q / (2.0 * weight)).clamp(-bound, bound))
            }
            PsiMode::Grid { points } => {
                if points < 2 {
                    return bad(format!("control grid needs at least 2 points, got {points}"));
                }
                model.with_psi_grid(ControlGrid::symmetric(1, self.control_bound.unwrap_or(DEFAULT_GRID_BOUND), points))
            }
        };
        let kappa0 = match (lipschitz(&self.drift), lipschitz(&self.diffusion)) {
            (Some(a), Some(b)) => Some(a.max(b).max(gain.abs())),
            _ => None,
        };
        Ok(model.with_lipschitz(kappa0, Some(gain.abs() / (2.0 * weight))))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneralCatalog {
    /// `dX = sigma dW`, no control.
    Brownian,
    /// `dX = (-kappa X + c E[X] + offset) dt + sigma dW`, no control.
    OuMeanfield,
    /// Controlled scalar LQ: drift `-kappa x + c E[X] + offset + gain v`,
    /// costs `q x^2 + r v^2` and `g x^2`, optional hyperbolic discounting.
    Lq1d,
    /// Drift `-kappa x + alpha sin x + c E[X] + gain v` with controls confined
    /// to `[-bound, bound]`; same costs as `lq_1d`.
    NonlinearSine,
}

impl GeneralCatalog {
    pub const ALL: [GeneralCatalog; 4] =
        [GeneralCatalog::Brownian, GeneralCatalog::OuMeanfield, GeneralCatalog::Lq1d, GeneralCatalog::NonlinearSine];

    pub fn name(self) -> &'static str {
        match self {
            GeneralCatalog::Brownian => "brownian",
            GeneralCatalog::OuMeanfield => "ou_meanfield",
            GeneralCatalog::Lq1d => "lq_1d",
            GeneralCatalog::NonlinearSine => "nonlinear_sine",
        }
    }

    /// Initial law used when a configuration does not name one.
    pub fn default_initial(self) -> InitialLaw {
        match self {
            GeneralCatalog::Brownian => InitialLaw::Dirac { point: vec![0.0] },
            GeneralCatalog::OuMeanfield => InitialLaw::Dirac { point: vec![1.0] },
            _ => InitialLaw::Gaussian { mean: vec![0.0], sd: vec![1.0] },
        }
    }
}

impl fmt::Display for GeneralCatalog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GeneralCatalog {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        GeneralCatalog::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown general model '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneralParams {
    pub horizon: f64,
    pub kappa: f64,
    pub coupling: f64,
    pub offset: f64,
    pub sigma: f64,
    pub alpha: f64,
    pub control_gain: f64,
    pub state_weight: f64,
    pub control_weight: f64,
    pub terminal_weight: f64,
    /// Hyperbolic discount rate; zero means time-consistent costs.
    pub discount: f64,
    pub bound: f64,
}

impl Default for GeneralParams {
    fn default() -> Self {
        Self {
            horizon: 1.0,
            kappa: 1.0,
            coupling: 0.0,
            offset: 0.0,
            sigma: 1.0,
            alpha: 0.5,
            control_gain: 1.0,
            state_weight: 1.0,
            control_weight: 1.0,
            terminal_weight: 1.0,
            discount: 0.0,
            bound: 2.0,
        }
    }
}

pub fn general_catalog_config(name: GeneralCatalog, p: &GeneralParams) -> GeneralModelConfig {
    let base = GeneralModelConfig {
        name: name.name().into(),
        horizon: p.horizon,
        diffusion: vec![Term::Constant { value: p.sigma }],
        ..GeneralModelConfig::default()
    };
    let mean_field = vec![
        Term::Affine { intercept: p.offset, slope: -p.kappa },
        Term::MomentCoupled { mean: p.coupling, second_moment: 0.0, variance: 0.0 },
    ];
    let costs = |mut c: GeneralModelConfig| {
        c.running = vec![Term::Quadratic { weight: p.state_weight, center: 0.0 }];
        c.terminal = vec![Term::Quadratic { weight: p.terminal_weight, center: 0.0 }];
        c.control_gain = p.control_gain;
        c.control_weight = p.control_weight;
        c.discount = if p.discount > 0.0 { Discount::Hyperbolic { rate: p.discount } } else { Discount::None };
        c
    };
    match name {
        GeneralCatalog::Brownian => GeneralModelConfig { control_gain: 0.0, ..base },
        GeneralCatalog::OuMeanfield => GeneralModelConfig { control_gain: 0.0, drift: mean_field, ..base },
        GeneralCatalog::Lq1d => costs(GeneralModelConfig { drift: mean_field, ..base }),
        GeneralCatalog::NonlinearSine => {
            let mut drift = mean_field;
            drift.push(Term::Trigonometric { amplitude: p.alpha, frequency: 1.0, phase: 0.0 });
            costs(GeneralModelConfig { drift, control_bound: Some(p.bound), ..base })
        }
    }
}

pub fn build_general_catalog(name: GeneralCatalog, params: &GeneralParams) -> Result<ModelSpec> {
    if !(params.sigma >= 0.0) || !(params.bound > 0.0) || params.discount < 0.0 {
        return Err(Error::InvalidParameter("sigma and discount must be nonnegative, bound positive".into()));
    }
    general_catalog_config(name, params).build()
}
