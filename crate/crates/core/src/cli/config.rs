//! Run configuration.
//!
//! The file is TOML with a fixed set of sections. Every key is optional and
//! falls back to the testbed defaults; unknown keys are rejected.
//!
//! ```toml
//! [plant]
//! model = "gfm"            # or "rl_reference"
//!
//! [plant.gfm]              # inverter and controller, symbol names
//! L_f = 0.0003
//!
//! [plant.grid]             # grid branch, source and load
//! R_grid = 0.23
//!
//! [plant.rl_reference]     # used when model = "rl_reference"
//! R = 0.23
//! L = 0.000318
//! omega0 = 377.0
//!
//! [sampling]
//! fs = 2500.0              # Hz
//! record_length = 1.0      # s kept after each step
//!
//! [era]
//! order = 6                # or "auto"
//! g = 0.01
//!
//! [sem]
//! n_poles = 4
//! g = 0.01
//!
//! [sfra]
//! f_min = 0.1
//! f_max = 1000.0
//! points = 100
//! cycles = 2
//! amplitude_pp = 0.1       # V
//! n_poles = 4
//!
//! [output]
//! directory = "dqid-out"
//! emit_timeseries = true
//! ```

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::era::EraOrder;
use crate::error::Error;
use crate::experiments::{StepInjection, SweepPlan};
use crate::lti::log_grid;
use crate::plant::{
    build_gfm_plant, build_rl_reference_plant, GfmParameters, GridParameters, Plant,
    MIN_SAMPLE_RATE,
};
use crate::ratfit::FitOptions;
use crate::signals::Axis;

/// A configuration problem, named by its dotted key.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub field: String,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.field.is_empty() {
            write!(f, "{}", self.message)
        } else {
            write!(f, "{}: {}", self.field, self.message)
        }
    }
}

impl std::error::Error for ConfigError {}

impl ConfigError {
    fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            message: message.into(),
        }
    }

    /// Lifts a parameter error, prefixing the section of the field.
    fn from_model(section: &str, e: Error) -> Self {
        match e {
            Error::InvalidParameters { field, reason } => {
                Self::new(format!("{section}.{field}"), reason)
            }
            other => Self::new(section, other.to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlantModel {
    #[default]
    Gfm,
    RlReference,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RlReferenceSection {
    #[serde(rename = "R")]
    pub r: f64,
    #[serde(rename = "L")]
    pub l: f64,
    pub omega0: f64,
}

impl Default for RlReferenceSection {
    fn default() -> Self {
        Self {
            r: 0.23,
            l: 318e-6,
            omega0: 377.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlantSection {
    pub model: PlantModel,
    pub gfm: GfmParameters,
    pub grid: GridParameters,
    pub rl_reference: RlReferenceSection,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingSection {
    pub fs: f64,
    pub record_length: f64,
}

impl Default for SamplingSection {
    fn default() -> Self {
        Self {
            fs: 2500.0,
            record_length: 1.0,
        }
    }
}

/// `order = 6` or `order = "auto"`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum OrderSetting {
    Fixed(usize),
    Keyword(String),
}

impl OrderSetting {
    pub fn to_order(&self) -> Result<EraOrder, ConfigError> {
        match self {
            OrderSetting::Fixed(0) => Err(ConfigError::new("era.order", "must be at least 1")),
            OrderSetting::Fixed(n) => Ok(EraOrder::Fixed(*n)),
            OrderSetting::Keyword(k) if k == "auto" => Ok(EraOrder::Auto),
            OrderSetting::Keyword(k) => Err(ConfigError::new(
                "era.order",
                format!("expected a positive count or \"auto\", got {k:?}"),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EraSection {
    pub order: OrderSetting,
    pub g: f64,
}

impl Default for EraSection {
    fn default() -> Self {
        Self {
            order: OrderSetting::Fixed(6),
            g: 0.01,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SemSection {
    pub n_poles: usize,
    pub g: f64,
}

impl Default for SemSection {
    fn default() -> Self {
        Self {
            n_poles: 4,
            g: 0.01,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SfraSection {
    pub f_min: f64,
    pub f_max: f64,
    pub points: usize,
    pub cycles: usize,
    pub amplitude_pp: f64,
    pub n_poles: usize,
}

impl Default for SfraSection {
    fn default() -> Self {
        Self {
            f_min: 0.1,
            f_max: 1000.0,
            points: 100,
            cycles: 2,
            amplitude_pp: 0.1,
            n_poles: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub directory: String,
    pub emit_timeseries: bool,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            directory: "dqid-out".into(),
            emit_timeseries: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub plant: PlantSection,
    pub sampling: SamplingSection,
    pub era: EraSection,
    pub sem: SemSection,
    pub sfra: SfraSection,
    pub output: OutputSection,
}

fn positive(field: &str, v: f64) -> Result<(), ConfigError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(ConfigError::new(
            field,
            format!("must be positive, got {v}"),
        ))
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|e| {
            let msg = e.message().trim_end().to_string();
            match e.span() {
                Some(span) => {
                    let line = text[..span.start.min(text.len())].matches('\n').count() + 1;
                    ConfigError::new(format!("line {line}"), msg)
                }
                None => ConfigError::new("", msg),
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::new("", format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// The effective configuration with every default written out.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        match self.plant.model {
            PlantModel::Gfm => {
                self.plant
                    .gfm
                    .validate()
                    .map_err(|e| ConfigError::from_model("plant.gfm", e))?;
                self.plant
                    .grid
                    .validate()
                    .map_err(|e| ConfigError::from_model("plant.grid", e))?;
            }
            PlantModel::RlReference => {
                let rl = &self.plant.rl_reference;
                positive("plant.rl_reference.R", rl.r)?;
                positive("plant.rl_reference.L", rl.l)?;
                if !(rl.omega0 >= 0.0 && rl.omega0.is_finite()) {
                    return Err(ConfigError::new(
                        "plant.rl_reference.omega0",
                        "must be nonnegative",
                    ));
                }
            }
        }
        let s = &self.sampling;
        positive("sampling.fs", s.fs)?;
        if s.fs < MIN_SAMPLE_RATE {
            return Err(ConfigError::new(
                "sampling.fs",
                format!("must be at least {MIN_SAMPLE_RATE} Hz, got {}", s.fs),
            ));
        }
        positive("sampling.record_length", s.record_length)?;
        self.era.order.to_order()?;
        self.step_injection(self.era.g)
            .validate()
            .map_err(|e| ConfigError::from_model("era", e))?;
        self.step_injection(self.sem.g)
            .validate()
            .map_err(|e| ConfigError::from_model("sem", e))?;
        if self.sem.n_poles == 0 {
            return Err(ConfigError::new("sem.n_poles", "must be at least 1"));
        }
        let f = &self.sfra;
        positive("sfra.f_min", f.f_min)?;
        positive("sfra.f_max", f.f_max)?;
        if f.points == 0 {
            return Err(ConfigError::new("sfra.points", "must be at least 1"));
        }
        if f.points > 1 && f.f_max <= f.f_min {
            return Err(ConfigError::new("sfra.f_max", "must exceed sfra.f_min"));
        }
        if f.f_max >= 0.5 * s.fs {
            return Err(ConfigError::new(
                "sfra.f_max",
                format!("must be below the Nyquist frequency {} Hz", 0.5 * s.fs),
            ));
        }
        self.sweep_plan()
            .validate(s.fs)
            .map_err(|e| ConfigError::from_model("sfra", e))?;
        if f.n_poles == 0 {
            return Err(ConfigError::new("sfra.n_poles", "must be at least 1"));
        }
        if self.output.directory.trim().is_empty() {
            return Err(ConfigError::new("output.directory", "must not be empty"));
        }
        Ok(())
    }

    pub fn build_plant(&self) -> crate::Result<Plant> {
        match self.plant.model {
            PlantModel::Gfm => build_gfm_plant(&self.plant.gfm, &self.plant.grid),
            PlantModel::RlReference => {
                let rl = &self.plant.rl_reference;
                build_rl_reference_plant(rl.r, rl.l, rl.omega0)
            }
        }
    }

    pub fn step_injection(&self, g: f64) -> StepInjection {
        StepInjection {
            g,
            record_length: self.sampling.record_length,
            ..StepInjection::new(Axis::D)
        }
    }

    pub fn era_order(&self) -> EraOrder {
        self.era.order.to_order().expect("validated order")
    }

    pub fn sweep_plan(&self) -> SweepPlan {
        let f = &self.sfra;
        let frequencies = if f.points == 1 {
            vec![f.f_min]
        } else {
            log_grid(f.f_min, f.f_max, f.points)
        };
        SweepPlan {
            frequencies,
            amplitude_pp: f.amplitude_pp,
            cycles: f.cycles,
        }
    }

    /// Time-domain fit grid: the sweep range, capped below Nyquist.
    pub fn sem_fit_options(&self) -> FitOptions {
        let hi = self.sfra.f_max.min(0.4 * self.sampling.fs);
        let lo = self.sfra.f_min.min(0.5 * hi);
        FitOptions {
            frequency_grid: log_grid(lo, hi, 200),
            ..FitOptions::new(self.sem.n_poles)
        }
    }

    pub fn sfra_fit_options(&self) -> FitOptions {
        FitOptions::new(self.sfra.n_poles)
    }
}
