//! Flat `key = value` experiment configuration.
//!
//! Lines are `key = value`; `#` starts a comment. Unknown keys are rejected.
//! Defaults depend on the model family and are filled in before any other key
//! is applied, so [`ExperimentConfig::echo`] always lists every resolved value.

use std::str::FromStr;

use nalgebra::{DMatrix, DVector};

use crate::adaptive::adaptive_bound;
use crate::dynamics::{model_by_name, wingrock_x0, Bounds, SystemModel, CSTR_X0};
use crate::error::{Error, Result};
use crate::governor::{GovernorConfig, TighteningSpec};
use crate::mpc::TrackingConfig;
use crate::orchestrator::{LoopConfig, DEFAULT_RESIDUAL_TOL};
use crate::trajopt::{Curvature, SolverSettings};

/// Every accepted key, in echo order.
pub const KEYS: &[&str] = &[
    "model",
    "x0",
    "angle_unit",
    "disturbance_scale",
    "horizon_governor",
    "state_margin_lower",
    "state_margin_upper",
    "control_margin_lower",
    "control_margin_upper",
    "adaptive_reserve",
    "horizon_online",
    "q_weight",
    "r_weight",
    "qf_weight",
    "u_max",
    "gamma",
    "epsilon",
    "g_zero_tol",
    "steps",
    "adaptation",
    "seed",
    "curvature",
    "tol_kkt",
    "max_iter_governor",
    "max_iter_online",
    "penalty_init",
    "penalty_growth",
    "penalty_rounds",
    "constraint_tol",
    "residual_tol",
    "out_dir",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Family {
    Cstr,
    WingRock,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AngleUnit {
    Deg,
    Rad,
}

/// `u^a_max` held back from `U` for the reference: the computed adaptive bound or a number.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Reserve {
    Auto,
    Value(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    /// One selector per agent: `cstr`, `wingrock:1`, `wingrock:2`.
    pub model: Vec<String>,
    pub x0: Option<Vec<f64>>,
    pub angle_unit: AngleUnit,
    pub disturbance_scale: f64,
    pub horizon_governor: usize,
    /// Tightening margins as fractions of the box half-widths.
    pub state_margin_lower: f64,
    pub state_margin_upper: f64,
    pub control_margin_lower: f64,
    pub control_margin_upper: f64,
    pub adaptive_reserve: Reserve,
    pub horizon_online: usize,
    pub q_weight: f64,
    pub r_weight: f64,
    pub qf_weight: f64,
    /// Half-width of `U` about its centre.
    pub u_max: f64,
    pub gamma: f64,
    pub epsilon: f64,
    pub g_zero_tol: f64,
    pub steps: usize,
    pub adaptation: bool,
    pub seed: u64,
    pub curvature: Curvature,
    pub tol_kkt: f64,
    pub max_iter_governor: usize,
    pub max_iter_online: usize,
    pub penalty_init: f64,
    pub penalty_growth: f64,
    pub penalty_rounds: usize,
    pub constraint_tol: f64,
    pub residual_tol: f64,
    pub out_dir: String,
}

fn family_of(selector: &str) -> Result<Family> {
    match selector {
        "cstr" => Ok(Family::Cstr),
        "wingrock:1" | "wingrock:2" => Ok(Family::WingRock),
        other => Err(Error::Config(format!("unknown model `{other}`"))),
    }
}

impl ExperimentConfig {
    pub fn defaults(model: Vec<String>) -> Result<Self> {
        let first = model
            .first()
            .ok_or_else(|| Error::Config("`model` lists no agent".into()))?;
        let family = family_of(first)?;
        for m in &model {
            if family_of(m)? != family {
                return Err(Error::Config("all agents must use the same model family".into()));
            }
        }
        let solver = SolverSettings::default();
        let mut cfg = Self {
            model,
            x0: None,
            angle_unit: AngleUnit::Deg,
            disturbance_scale: 1.0,
            horizon_governor: 300,
            state_margin_lower: 0.0,
            state_margin_upper: 0.0,
            control_margin_lower: 0.02,
            control_margin_upper: 0.0,
            adaptive_reserve: Reserve::Value(0.0),
            horizon_online: 40,
            q_weight: 0.5,
            r_weight: 0.5,
            qf_weight: 1e5,
            u_max: 1.0,
            gamma: 1.5,
            epsilon: 0.1,
            g_zero_tol: crate::adaptive::DEFAULT_G_ZERO_TOL,
            steps: 200,
            adaptation: true,
            seed: 0,
            curvature: solver.curvature,
            tol_kkt: solver.tol_kkt,
            max_iter_governor: 500,
            max_iter_online: 200,
            penalty_init: solver.penalty_init,
            penalty_growth: solver.penalty_growth,
            penalty_rounds: solver.penalty_rounds,
            constraint_tol: solver.constraint_tol,
            residual_tol: DEFAULT_RESIDUAL_TOL,
            out_dir: "out".into(),
        };
        if family == Family::WingRock {
            cfg.horizon_governor = 100;
            cfg.state_margin_lower = 0.05;
            cfg.state_margin_upper = 0.05;
            cfg.control_margin_lower = 0.05;
            cfg.control_margin_upper = 0.05;
            cfg.adaptive_reserve = Reserve::Auto;
            cfg.horizon_online = 20;
            cfg.q_weight = 1.0;
            cfg.r_weight = 0.1;
            cfg.qf_weight = 1e3;
            cfg.u_max = 60.0;
            cfg.epsilon = 1.0;
            cfg.steps = 400;
        }
        Ok(cfg)
    }

    pub fn family(&self) -> Family {
        family_of(&self.model[0]).expect("validated at construction")
    }

    /// Parse config text.
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: idx + 1,
                msg: format!("expected `key = value`, got `{line}`"),
            })?;
            pairs.push((k.trim().to_string(), v.trim().to_string(), idx + 1));
        }
        Self::from_pairs(&pairs, false)
    }

    /// Build from `(key, value, line)` triples. With `lenient`, keys outside
    /// [`KEYS`] are skipped instead of rejected (log headers carry extra facts).
    pub fn from_pairs(pairs: &[(String, String, usize)], lenient: bool) -> Result<Self> {
        let mut seen: Vec<&str> = Vec::new();
        let mut kept = Vec::new();
        for (k, v, line) in pairs {
            if !KEYS.contains(&k.as_str()) {
                if lenient {
                    continue;
                }
                return Err(Error::Parse { line: *line, msg: format!("unknown key `{k}`") });
            }
            if seen.contains(&k.as_str()) {
                return Err(Error::Parse { line: *line, msg: format!("duplicate key `{k}`") });
            }
            seen.push(k);
            kept.push((k, v, *line));
        }
        let model = kept
            .iter()
            .find(|(k, _, _)| *k == "model")
            .map(|(_, v, _)| parse_list(v))
            .ok_or_else(|| Error::Config("missing required key `model`".into()))?;
        let mut cfg = Self::defaults(model)?;
        for (k, v, line) in kept {
            if k != "model" {
                cfg.set(k, v).map_err(|e| Error::Parse { line, msg: e.to_string() })?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Apply one key, as from a file line or a command-line override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "model" => {
                let fresh = Self::defaults(parse_list(value))?;
                *self = fresh;
            }
            "x0" => {
                self.x0 = if value == "default" {
                    None
                } else {
                    Some(value.split_whitespace().map(|s| num(key, s)).collect::<Result<_>>()?)
                }
            }
            "angle_unit" => {
                self.angle_unit = match value {
                    "deg" => AngleUnit::Deg,
                    "rad" => AngleUnit::Rad,
                    _ => return Err(bad(key, value)),
                }
            }
            "disturbance_scale" => self.disturbance_scale = num(key, value)?,
            "horizon_governor" => self.horizon_governor = int(key, value)?,
            "state_margin_lower" => self.state_margin_lower = num(key, value)?,
            "state_margin_upper" => self.state_margin_upper = num(key, value)?,
            "control_margin_lower" => self.control_margin_lower = num(key, value)?,
            "control_margin_upper" => self.control_margin_upper = num(key, value)?,
            "adaptive_reserve" => {
                self.adaptive_reserve = if value == "auto" {
                    Reserve::Auto
                } else {
                    Reserve::Value(num(key, value)?)
                }
            }
            "horizon_online" => self.horizon_online = int(key, value)?,
            "q_weight" => self.q_weight = num(key, value)?,
            "r_weight" => self.r_weight = num(key, value)?,
            "qf_weight" => self.qf_weight = num(key, value)?,
            "u_max" => self.u_max = num(key, value)?,
            "gamma" => self.gamma = num(key, value)?,
            "epsilon" => self.epsilon = num(key, value)?,
            "g_zero_tol" => self.g_zero_tol = num(key, value)?,
            "steps" => self.steps = int(key, value)?,
            "adaptation" => self.adaptation = on_off(value)?,
            "seed" => self.seed = value.parse().map_err(|_| bad(key, value))?,
            "curvature" => self.curvature = Curvature::from_str(value)?,
            "tol_kkt" => self.tol_kkt = num(key, value)?,
            "max_iter_governor" => self.max_iter_governor = int(key, value)?,
            "max_iter_online" => self.max_iter_online = int(key, value)?,
            "penalty_init" => self.penalty_init = num(key, value)?,
            "penalty_growth" => self.penalty_growth = num(key, value)?,
            "penalty_rounds" => self.penalty_rounds = int(key, value)?,
            "constraint_tol" => self.constraint_tol = num(key, value)?,
            "residual_tol" => self.residual_tol = num(key, value)?,
            "out_dir" => self.out_dir = value.to_string(),
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Check every value against the preconditions of the modules it feeds.
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("q_weight", self.q_weight),
            ("r_weight", self.r_weight),
            ("qf_weight", self.qf_weight),
            ("u_max", self.u_max),
            ("epsilon", self.epsilon),
            ("tol_kkt", self.tol_kkt),
            ("constraint_tol", self.constraint_tol),
            ("residual_tol", self.residual_tol),
        ];
        for (k, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("`{k}` must be positive, got {v}")));
            }
        }
        if !(self.gamma > 0.0 && self.gamma < 2.0) {
            return Err(Error::Config(format!("`gamma` must lie in (0, 2), got {}", self.gamma)));
        }
        for (k, v) in [
            ("state_margin_lower", self.state_margin_lower),
            ("state_margin_upper", self.state_margin_upper),
            ("control_margin_lower", self.control_margin_lower),
            ("control_margin_upper", self.control_margin_upper),
            ("disturbance_scale", self.disturbance_scale),
            ("g_zero_tol", self.g_zero_tol),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("`{k}` must be nonnegative, got {v}")));
            }
        }
        if let Reserve::Value(v) = self.adaptive_reserve {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("`adaptive_reserve` must be nonnegative, got {v}")));
            }
        }
        for (k, v) in [("horizon_governor", self.horizon_governor), ("horizon_online", self.horizon_online)] {
            if v == 0 {
                return Err(Error::Config(format!("`{k}` must be at least 1")));
            }
        }
        if self.x0.is_some() && self.model.len() != 1 {
            return Err(Error::Config("`x0` needs a single-agent `model`".into()));
        }
        self.solver_settings(self.max_iter_online).validate()?;
        Ok(())
    }

    /// Resolved `key = value` pairs for every key.
    pub fn echo(&self) -> Vec<(String, String)> {
        KEYS.iter().map(|k| (k.to_string(), self.value_of(k))).collect()
    }

    /// The echo of a single agent's run.
    pub fn echo_for(&self, selector: &str) -> Vec<(String, String)> {
        let mut e = self.echo();
        e[0].1 = selector.to_string();
        e
    }

    /// Copy restricted to one agent.
    pub fn for_agent(&self, selector: &str) -> Self {
        let mut c = self.clone();
        c.model = vec![selector.to_string()];
        c
    }

    pub fn to_text(&self) -> String {
        self.echo().iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    fn value_of(&self, key: &str) -> String {
        match key {
            "model" => self.model.join(", "),
            "x0" => self.x0.as_ref().map_or("default".into(), |v| {
                v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ")
            }),
            "angle_unit" => match self.angle_unit {
                AngleUnit::Deg => "deg".into(),
                AngleUnit::Rad => "rad".into(),
            },
            "disturbance_scale" => self.disturbance_scale.to_string(),
            "horizon_governor" => self.horizon_governor.to_string(),
            "state_margin_lower" => self.state_margin_lower.to_string(),
            "state_margin_upper" => self.state_margin_upper.to_string(),
            "control_margin_lower" => self.control_margin_lower.to_string(),
            "control_margin_upper" => self.control_margin_upper.to_string(),
            "adaptive_reserve" => match self.adaptive_reserve {
                Reserve::Auto => "auto".into(),
                Reserve::Value(v) => v.to_string(),
            },
            "horizon_online" => self.horizon_online.to_string(),
            "q_weight" => self.q_weight.to_string(),
            "r_weight" => self.r_weight.to_string(),
            "qf_weight" => self.qf_weight.to_string(),
            "u_max" => self.u_max.to_string(),
            "gamma" => self.gamma.to_string(),
            "epsilon" => self.epsilon.to_string(),
            "g_zero_tol" => self.g_zero_tol.to_string(),
            "steps" => self.steps.to_string(),
            "adaptation" => if self.adaptation { "on" } else { "off" }.into(),
            "seed" => self.seed.to_string(),
            "curvature" => self.curvature.to_string(),
            "tol_kkt" => self.tol_kkt.to_string(),
            "max_iter_governor" => self.max_iter_governor.to_string(),
            "max_iter_online" => self.max_iter_online.to_string(),
            "penalty_init" => self.penalty_init.to_string(),
            "penalty_growth" => self.penalty_growth.to_string(),
            "penalty_rounds" => self.penalty_rounds.to_string(),
            "constraint_tol" => self.constraint_tol.to_string(),
            "residual_tol" => self.residual_tol.to_string(),
            "out_dir" => self.out_dir.clone(),
            _ => unreachable!("KEYS and value_of agree"),
        }
    }

    fn solver_settings(&self, max_iter: usize) -> SolverSettings {
        SolverSettings {
            tol_kkt: self.tol_kkt,
            max_iter,
            penalty_init: self.penalty_init,
            penalty_growth: self.penalty_growth,
            penalty_rounds: self.penalty_rounds,
            constraint_tol: self.constraint_tol,
            curvature: self.curvature,
            ..SolverSettings::default()
        }
    }

    /// The plant for `selector` with the configured disturbance scale and `U`.
    pub fn build_model(&self, selector: &str) -> Result<SystemModel> {
        let base = model_by_name(selector)?.with_disturbance_scale(self.disturbance_scale);
        let center = (base.control_box().lower() + base.control_box().upper()) * 0.5;
        let half = DVector::from_element(center.len(), self.u_max);
        base.with_control_box(Bounds::new(&center - &half, &center + &half)?)
    }

    pub fn initial_state(&self, selector: &str) -> Result<DVector<f64>> {
        let family = family_of(selector)?;
        match (&self.x0, family) {
            (None, Family::Cstr) => Ok(DVector::from_row_slice(&CSTR_X0)),
            (None, Family::WingRock) => wingrock_x0(selector[selector.len() - 1..].parse().unwrap_or(1)),
            (Some(v), Family::WingRock) if self.angle_unit == AngleUnit::Deg => {
                Ok(DVector::from_iterator(v.len(), v.iter().map(|d| d.to_radians())))
            }
            (Some(v), _) => Ok(DVector::from_row_slice(v)),
        }
    }

    /// The adaptive reserve in control units; zero when adaptation is off,
    /// which gives the baseline controller.
    pub fn reserve(&self, model: &SystemModel) -> f64 {
        if !self.adaptation {
            return 0.0;
        }
        match self.adaptive_reserve {
            Reserve::Value(v) => v,
            Reserve::Auto => adaptive_bound(model.w_true().norm(), &self.gamma_matrix(model), model.delta_phi()),
        }
    }

    fn gamma_matrix(&self, model: &SystemModel) -> DMatrix<f64> {
        let m = model.control_dim();
        DMatrix::identity(m, m) * self.gamma
    }

    pub fn governor_config(&self, model: &SystemModel) -> GovernorConfig {
        let (d, m) = (model.state_dim(), model.control_dim());
        let xh = model.state_box().half_widths();
        let uh = model.control_box().half_widths();
        let tightening = TighteningSpec {
            state_margin_lower: &xh * self.state_margin_lower,
            state_margin_upper: &xh * self.state_margin_upper,
            control_margin_lower: &uh * self.control_margin_lower,
            control_margin_upper: &uh * self.control_margin_upper,
            adaptive_reserve: self.reserve(model),
        };
        let mut g = GovernorConfig::new(
            self.horizon_governor,
            DMatrix::identity(d, d) * self.q_weight,
            DMatrix::identity(m, m) * self.r_weight,
            tightening,
        );
        g.solver = self.solver_settings(self.max_iter_governor);
        g
    }

    pub fn tracking_config(&self, model: &SystemModel) -> TrackingConfig {
        let (d, m) = (model.state_dim(), model.control_dim());
        let mut t = TrackingConfig::new(
            self.horizon_online,
            DMatrix::identity(d, d) * self.q_weight,
            DMatrix::identity(m, m) * self.r_weight,
            DMatrix::identity(d, d) * self.qf_weight,
            model.control_box().clone(),
        );
        t.solver = self.solver_settings(self.max_iter_online);
        t
    }

    pub fn loop_config(&self, model: &SystemModel, selector: &str) -> LoopConfig {
        let mut l = LoopConfig::new(
            self.tracking_config(model),
            self.gamma_matrix(model),
            self.epsilon,
            self.adaptation,
            self.steps,
        );
        l.residual_tol = self.residual_tol;
        l.echo = self.echo_for(selector);
        l
    }
}

impl FromStr for ExperimentConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::parse(s)
    }
}

fn parse_list(v: &str) -> Vec<String> {
    v.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect()
}

fn bad(key: &str, value: &str) -> Error {
    Error::Config(format!("bad value `{value}` for `{key}`"))
}

fn num(key: &str, value: &str) -> Result<f64> {
    value.parse().map_err(|_| bad(key, value))
}

fn int(key: &str, value: &str) -> Result<usize> {
    value.parse().map_err(|_| bad(key, value))
}

pub(crate) fn on_off(value: &str) -> Result<bool> {
    match value {
        "on" | "true" | "1" => Ok(true),
        "off" | "false" | "0" => Ok(false),
        _ => Err(bad("adaptation", value)),
    }
}
