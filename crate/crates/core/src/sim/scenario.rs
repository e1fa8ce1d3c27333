use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::ccp::CcpConfig;
use crate::controller::AgentConfig;
use crate::dynamics::{discretize_zoh, ModelError};
use crate::localization::Wgs84Pose;
use crate::ocp::{OcpLimits, OcpWeights};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ScenarioError {
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error("{field}: {message}")]
    Invalid { field: String, message: String },
    #[error("override {key:?}: {message}")]
    Override { key: String, message: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl ScenarioError {
    fn invalid(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self::Invalid {
            field: field.into(),
            message: message.into(),
        }
    }

    /// Dotted path of the offending field, when there is one.
    pub fn field_path(&self) -> Option<&str> {
        match self {
            Self::Parse { path, .. } => Some(path),
            Self::Invalid { field, .. } => Some(field),
            Self::Override { key, .. } => Some(key),
            Self::Model(_) => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeoOrigin {
    pub lat_deg: f64,
    pub lon_deg: f64,
    pub alt: f64,
    pub heading_deg: f64,
}

impl Default for GeoOrigin {
    fn default() -> Self {
        Self {
            lat_deg: 48.7758,
            lon_deg: 9.1829,
            alt: 250.0,
            heading_deg: 0.0,
        }
    }
}

impl GeoOrigin {
    pub fn pose(&self) -> Wgs84Pose {
        Wgs84Pose {
            lat: self.lat_deg.to_radians(),
            lon: self.lon_deg.to_radians(),
            alt: self.alt,
            heading: self.heading_deg.to_radians(),
        }
    }
}

/// One agent: controller parameters, lane and initial condition.
///
/// The lane is the straight line through `cp` with heading `heading_deg`
/// (counter-clockwise from the world `+x` axis); `s0` is the initial signed
/// position along it, with `s = 0` at `cp`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentSpec {
    pub id: u8,
    pub priority: u32,
    pub v_ref: f64,
    /// Defaults to `1.1 v_ref`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub v_max: Option<f64>,
    pub s0: f64,
    pub v0: f64,
    #[serde(default)]
    pub ax0: f64,
    pub heading_deg: f64,
    #[serde(default)]
    pub cp: [f64; 2],
    #[serde(default = "default_u_min")]
    pub u_min: f64,
    #[serde(default = "default_u_max")]
    pub u_max: f64,
}

impl AgentSpec {
    pub fn v_max(&self) -> f64 {
        self.v_max.unwrap_or(1.1 * self.v_ref)
    }

    pub fn direction(&self) -> [f64; 2] {
        let (s, c) = self.heading_deg.to_radians().sin_cos();
        [c, s]
    }

    /// World position at lane coordinate `s`.
    pub fn position(&self, s: f64) -> [f64; 2] {
        let d = self.direction();
        [self.cp[0] + s * d[0], self.cp[1] + s * d[1]]
    }
}

fn default_u_min() -> f64 {
    -5.0
}
fn default_u_max() -> f64 {
    2.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimSettings {
    pub duration: f64,
    pub substeps: usize,
    /// Plant drivetrain time constant relative to the controller model.
    pub plant_t_ax_scale: f64,
    pub odometry_period: f64,
    pub gnss_period: f64,
    /// How far ahead (s) path segments are projected for CP estimation.
    pub cp_horizon: f64,
    /// Path history window (s) for the CP retry ladder.
    pub history: f64,
}

impl Default for SimSettings {
    fn default() -> Self {
        Self {
            duration: 14.0,
            substeps: 10,
            plant_t_ax_scale: 1.0,
            odometry_period: 0.05,
            gnss_period: 0.2,
            cp_horizon: 30.0,
            history: 10.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSettings {
    pub enabled: bool,
    pub gnss_pos: f64,
    pub gnss_alt: f64,
    pub gnss_heading_deg: f64,
    pub odo_v: f64,
    pub odo_yaw_rate: f64,
}

impl Default for NoiseSettings {
    fn default() -> Self {
        Self {
            enabled: false,
            gnss_pos: 1.5,
            gnss_alt: 3.0,
            gnss_heading_deg: 2.0,
            odo_v: 0.1,
            odo_yaw_rate: 0.01,
        }
    }
}

/// Penalty-CCP settings; the state-slack weight lives in `weights.rho_x`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CcpSettings {
    pub rho_c0: f64,
    pub rho_c_max: f64,
    pub mu: f64,
    pub obj_tol: f64,
    pub viol_tol: f64,
    pub max_iter: usize,
}

impl Default for CcpSettings {
    fn default() -> Self {
        let c = CcpConfig::default();
        Self {
            rho_c0: c.rho_c0,
            rho_c_max: c.rho_c_max,
            mu: c.mu,
            obj_tol: c.obj_tol,
            viol_tol: c.viol_tol,
            max_iter: c.max_iter,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    #[serde(default = "default_ts")]
    pub ts: f64,
    #[serde(default = "default_horizon")]
    pub horizon: usize,
    #[serde(default = "default_t_ax")]
    pub t_ax: f64,
    #[serde(default = "default_d_safe")]
    pub d_safe: f64,
    #[serde(default = "default_d_brake")]
    pub d_brake: f64,
    /// Extra distance the controllers keep on top of `d_safe` to absorb
    /// localization and tracking error.
    #[serde(default = "default_error_budget")]
    pub error_budget: f64,
    #[serde(default)]
    pub weights: OcpWeights,
    #[serde(default)]
    pub ccp: CcpSettings,
    #[serde(default)]
    pub origin: GeoOrigin,
    pub agents: Vec<AgentSpec>,
    #[serde(default)]
    pub sim: SimSettings,
    #[serde(default)]
    pub noise: NoiseSettings,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub drop_prob: f64,
}

fn default_ts() -> f64 {
    0.2
}
fn default_horizon() -> usize {
    20
}
fn default_t_ax() -> f64 {
    0.4
}
fn default_d_safe() -> f64 {
    15.0
}
pub(crate) fn default_error_budget() -> f64 {
    1.0
}
pub(crate) fn default_d_brake() -> f64 {
    10.0
}

fn is_multiple(period: f64, base: f64) -> bool {
    let r = base / period;
    period > 0.0 && (r - r.round()).abs() < 1e-9 && r.round() >= 1.0
}

impl Scenario {
    pub fn from_json_str(s: &str) -> Result<Self, ScenarioError> {
        let de = &mut serde_json::Deserializer::from_str(s);
        let sc: Scenario =
            serde_path_to_error::deserialize(de).map_err(|e| ScenarioError::Parse {
                path: e.path().to_string(),
                message: e.inner().to_string(),
            })?;
        sc.validate()?;
        Ok(sc)
    }

    pub fn from_value(v: Value) -> Result<Self, ScenarioError> {
        let sc: Scenario =
            serde_path_to_error::deserialize(v).map_err(|e| ScenarioError::Parse {
                path: e.path().to_string(),
                message: e.inner().to_string(),
            })?;
        sc.validate()?;
        Ok(sc)
    }

    /// Parse `json`, apply `key=value` overrides, then validate.
    pub fn from_json_with_overrides(
        json: &str,
        overrides: &[String],
    ) -> Result<Self, ScenarioError> {
        let mut v: Value = serde_json::from_str(json).map_err(|e| ScenarioError::Parse {
            path: ".".into(),
            message: e.to_string(),
        })?;
        for o in overrides {
            apply_override(&mut v, o)?;
        }
        Self::from_value(v)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let pos = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(ScenarioError::invalid(
                    name,
                    format!("must be > 0, got {v}"),
                ))
            }
        };
        pos("ts", self.ts)?;
        pos("t_ax", self.t_ax)?;
        pos("d_safe", self.d_safe)?;
        pos("d_brake", self.d_brake)?;
        pos("sim.duration", self.sim.duration)?;
        pos("sim.plant_t_ax_scale", self.sim.plant_t_ax_scale)?;
        pos("sim.cp_horizon", self.sim.cp_horizon)?;
        pos("sim.history", self.sim.history)?;
        if self.horizon == 0 {
            return Err(ScenarioError::invalid("horizon", "must be >= 1"));
        }
        if self.sim.substeps == 0 {
            return Err(ScenarioError::invalid("sim.substeps", "must be >= 1"));
        }
        if !is_multiple(self.sim.odometry_period, self.ts) {
            return Err(ScenarioError::invalid(
                "sim.odometry_period",
                "must divide ts into a whole number of samples",
            ));
        }
        if !is_multiple(self.sim.gnss_period, self.ts) {
            return Err(ScenarioError::invalid(
                "sim.gnss_period",
                "must divide ts into a whole number of samples",
            ));
        }
        if !(0.0..=1.0).contains(&self.drop_prob) {
            return Err(ScenarioError::invalid("drop_prob", "must lie in [0, 1]"));
        }
        if !(self.error_budget >= 0.0) {
            return Err(ScenarioError::invalid("error_budget", "must be >= 0"));
        }
        self.weights
            .validate()
            .map_err(|e| ScenarioError::invalid("weights", e.to_string()))?;
        self.ccp_config()
            .validate()
            .map_err(|e| ScenarioError::invalid("ccp", e.to_string()))?;
        if self.agents.is_empty() {
            return Err(ScenarioError::invalid(
                "agents",
                "at least one agent required",
            ));
        }
        for (i, a) in self.agents.iter().enumerate() {
            let f = |name: &str| format!("agents.{i}.{name}");
            if self.agents[..i].iter().any(|b| b.id == a.id) {
                return Err(ScenarioError::invalid(
                    f("id"),
                    format!("duplicate id {}", a.id),
                ));
            }
            if self.agents[..i].iter().any(|b| b.priority == a.priority) {
                return Err(ScenarioError::invalid(
                    f("priority"),
                    format!("duplicate priority {}", a.priority),
                ));
            }
            if self.agents[..i].iter().any(|b| {
                let d = (b.heading_deg - a.heading_deg).rem_euclid(360.0);
                !(1e-9..=360.0 - 1e-9).contains(&d)
            }) {
                return Err(ScenarioError::invalid(
                    f("heading_deg"),
                    "one agent per approach",
                ));
            }
            if !(a.u_min < 0.0 && a.u_max > 0.0) {
                return Err(ScenarioError::invalid(f("u_min"), "need u_min < 0 < u_max"));
            }
            if !(a.v_ref >= 0.0 && a.v_ref.is_finite()) {
                return Err(ScenarioError::invalid(f("v_ref"), "must be >= 0"));
            }
            if !(a.v_max() >= a.v_ref) {
                return Err(ScenarioError::invalid(f("v_max"), "must be >= v_ref"));
            }
            if !(a.v0 >= 0.0 && a.v0.is_finite()) {
                return Err(ScenarioError::invalid(f("v0"), "must be >= 0"));
            }
            if !(a.s0.is_finite() && a.ax0.is_finite() && a.heading_deg.is_finite()) {
                return Err(ScenarioError::invalid(f("s0"), "must be finite"));
            }
        }
        Ok(())
    }

    pub fn ccp_config(&self) -> CcpConfig {
        CcpConfig {
            rho_c0: self.ccp.rho_c0,
            rho_c_max: self.ccp.rho_c_max,
            mu: self.ccp.mu,
            rho_x: self.weights.rho_x,
            obj_tol: self.ccp.obj_tol,
            viol_tol: self.ccp.viol_tol,
            max_iter: self.ccp.max_iter,
        }
    }

    /// Safety distance the controllers plan with.
    pub fn planning_d_safe(&self) -> f64 {
        self.d_safe + self.error_budget
    }

    pub fn agent_config(&self, spec: &AgentSpec) -> Result<AgentConfig, ScenarioError> {
        Ok(AgentConfig {
            id: spec.id,
            priority: spec.priority,
            model: discretize_zoh(self.t_ax, self.ts)?,
            weights: self.weights,
            limits: OcpLimits::constant(
                spec.u_min,
                spec.u_max,
                spec.v_ref,
                spec.v_max(),
                self.horizon,
            ),
            d_safe: self.planning_d_safe(),
            d_brake: self.d_brake,
            ccp: self.ccp_config(),
        })
    }

    pub fn steps(&self) -> u64 {
        (self.sim.duration / self.ts).round() as u64
    }

    fn base(name: &str) -> Self {
        Self {
            name: name.into(),
            ts: default_ts(),
            horizon: default_horizon(),
            t_ax: default_t_ax(),
            d_safe: default_d_safe(),
            d_brake: default_d_brake(),
            error_budget: default_error_budget(),
            weights: OcpWeights::default(),
            ccp: CcpSettings::default(),
            origin: GeoOrigin::default(),
            agents: Vec::new(),
            sim: SimSettings::default(),
            noise: NoiseSettings::default(),
            seed: 0,
            drop_prob: 0.0,
        }
    }

    fn two_agents(name: &str, a1: (f64, f64, f64), a2: (f64, f64, f64)) -> Self {
        let agent = |id, priority, heading_deg, (v_ref, s0, v0): (f64, f64, f64)| AgentSpec {
            id,
            priority,
            v_ref,
            v_max: None,
            s0,
            v0,
            ax0: 0.0,
            heading_deg,
            cp: [0.0, 0.0],
            u_min: default_u_min(),
            u_max: default_u_max(),
        };
        Self {
            agents: vec![agent(1, 2, 0.0, a1), agent(2, 1, 90.0, a2)],
            ..Self::base(name)
        }
    }

    /// Two perpendicular approaches; Agent 1 has to give way to Agent 2.
    pub fn scenario1() -> Self {
        Self::two_agents("scenario1", (12.0, -83.5, 11.9), (10.0, -64.8, 10.0))
    }

    /// As [`Scenario::scenario1`] with higher reference speeds.
    pub fn scenario2() -> Self {
        Self::two_agents("scenario2", (15.0, -103.1, 14.8), (11.0, -66.7, 10.3))
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "scenario1" => Some(Self::scenario1()),
            "scenario2" => Some(Self::scenario2()),
            _ => None,
        }
    }
}

/// Apply `path=value` to a JSON scenario. Inside `agents`, the segment after
/// `agents` is an agent id, not an array index. `value` is parsed as JSON,
/// falling back to a plain string.
pub fn apply_override(root: &mut Value, kv: &str) -> Result<(), ScenarioError> {
    let err = |m: &str| ScenarioError::Override {
        key: kv.to_string(),
        message: m.to_string(),
    };
    let (key, raw) = kv
        .split_once('=')
        .ok_or_else(|| err("expected key=value"))?;
    let value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(err("empty path segment"));
    }
    let mut cur = root;
    let mut i = 0;
    while i + 1 < parts.len() {
        let p = parts[i];
        if p == "agents" {
            let id: u64 = parts[i + 1]
                .parse()
                .map_err(|_| err("agent id must be an integer"))?;
            let arr = cur
                .get_mut("agents")
                .and_then(Value::as_array_mut)
                .ok_or_else(|| err("no agents array"))?;
            cur = arr
                .iter_mut()
                .find(|a| a.get("id").and_then(Value::as_u64) == Some(id))
                .ok_or_else(|| err("no agent with that id"))?;
            i += 2;
            continue;
        }
        let obj = cur.as_object_mut().ok_or_else(|| err("not an object"))?;
        cur = obj
            .entry(p.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
        i += 1;
    }
    if i >= parts.len() {
        return Err(err("path names an agent, not a field"));
    }
    cur.as_object_mut()
        .ok_or_else(|| err("not an object"))?
        .insert(parts[i].to_string(), value);
    Ok(())
}
