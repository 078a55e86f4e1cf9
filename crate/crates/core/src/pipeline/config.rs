use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::diffcore::Padding;
use crate::error::{LtfeError, Result};
use crate::liquid::OdeConfig;
use crate::perturb::{EvolutionSchedule, EvolveOptions, InjectionStrategy, NoiseMode};
use crate::align::LossWeights;

/// Parameter groups that can be frozen independently.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Extractor,
    Lstm,
    Fusion,
    Field,
    W0,
    Heads,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 6] = [
        ParamGroup::Extractor,
        ParamGroup::Lstm,
        ParamGroup::Fusion,
        ParamGroup::Field,
        ParamGroup::W0,
        ParamGroup::Heads,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Extractor => "extractor",
            ParamGroup::Lstm => "lstm",
            ParamGroup::Fusion => "fusion",
            ParamGroup::Field => "field",
            ParamGroup::W0 => "w0",
            ParamGroup::Heads => "heads",
        }
    }
}

/// Everything a training, inference or benchmark run depends on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub schedule: EvolutionSchedule,
    /// Perturbation steps at inference; 0 classifies straight from `F_0`.
    #[serde(rename = "infer_T")]
    pub infer_steps: usize,
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Side of the evolved kernel.
    pub kernel_size: usize,
    pub strategy: InjectionStrategy,
    /// Extractor stage (1 or 2) whose output is evolved.
    pub layer_index: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub include_positive: bool,
    /// Add the blur kernel itself instead of blurred sampled noise.
    pub literal_eq1: bool,
    pub padding: Padding,
    /// Extractor width.
    pub channels: usize,
    /// LSTM state size, also the encoding size.
    pub hidden_dim: usize,
    /// Hidden width of the kernel vector field.
    pub field_hidden: usize,
    pub ode: OdeConfig,
    pub scene_size: usize,
    pub proposals: usize,
    pub classes: usize,
    pub num_scenes: usize,
    pub eval_scenes: usize,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    /// `false` trains the plain detector on `F_0` only.
    pub evolution: bool,
    pub frozen: Vec<ParamGroup>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            schedule: EvolutionSchedule::default(),
            infer_steps: 2,
            lr: 0.02,
            momentum: 0.9,
            epochs: 5,
            seed: 0,
            kernel_size: 3,
            strategy: InjectionStrategy::Progressive,
            layer_index: 1,
            lambda1: 1.0,
            lambda2: 0.1,
            include_positive: false,
            literal_eq1: false,
            padding: Padding::Circular,
            channels: 8,
            hidden_dim: 16,
            field_hidden: 64,
            ode: OdeConfig::default(),
            scene_size: 32,
            proposals: 4,
            classes: 3,
            num_scenes: 200,
            eval_scenes: 100,
            grad_clip: 10.0,
            evolution: true,
            frozen: Vec::new(),
        }
    }
}

fn config_err(msg: impl Into<String>) -> LtfeError {
    LtfeError::Config(msg.into())
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        self.ode.validate()?;
        self.weights().validate()?;
        let checks: [(bool, &str); 14] = [
            (self.infer_steps <= self.schedule.steps, "infer_T must not exceed T"),
            (self.lr.is_finite() && self.lr >= 0.0, "lr must be finite and >= 0"),
            ((0.0..1.0).contains(&self.momentum), "momentum must lie in [0, 1)"),
            (self.epochs >= 1, "epochs must be >= 1"),
            (self.kernel_size % 2 == 1, "kernel_size must be odd"),
            (matches!(self.layer_index, 1 | 2), "layer_index must be 1 or 2"),
            (self.channels >= 1, "channels must be >= 1"),
            (self.hidden_dim >= 1 && self.field_hidden >= 1, "hidden sizes must be >= 1"),
            (self.proposals >= 2, "proposals must be >= 2"),
            ((2..=4).contains(&self.classes), "classes must lie in 2..=4"),
            (self.num_scenes >= 1 && self.eval_scenes >= 1, "scene counts must be >= 1"),
            (self.grad_clip.is_finite() && self.grad_clip >= 0.0, "grad_clip must be finite and >= 0"),
            (self.kernel_size <= self.scene_size, "kernel_size exceeds scene_size"),
            (self.scene_size >= 2 * grid_side(self.proposals), "scene too small for its proposals"),
        ];
        match checks.iter().find(|(ok, _)| !ok) {
            Some((_, msg)) => Err(config_err(*msg)),
            None => Ok(()),
        }
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights { lambda1: self.lambda1, lambda2: self.lambda2 }
    }

    pub fn evolve_options(&self) -> EvolveOptions {
        EvolveOptions {
            strategy: self.strategy,
            noise: if self.literal_eq1 { NoiseMode::LiteralKernel } else { NoiseMode::Sampled },
            padding: self.padding,
        }
    }

    pub fn is_frozen(&self, group: ParamGroup) -> bool {
        self.frozen.contains(&group)
    }

    pub fn to_json(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }

    pub fn from_json(v: Value) -> Result<Self> {
        serde_json::from_value(v).map_err(|e| config_err(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| LtfeError::Io {
            path: path.display().to_string(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))
    }

    /// Applies `key=value` overrides with dotted keys (`schedule.T=4`).
    /// Values parse as JSON, falling back to a bare string.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut root = self.to_json();
        for o in overrides {
            let o = o.as_ref();
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| config_err(format!("override {o:?} is not key=value")))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            set_path(&mut root, key, value)?;
        }
        Self::from_json(root)
    }
}

fn set_path(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let map = node
            .as_object_mut()
            .ok_or_else(|| config_err(format!("{key}: {} is not a section", parts[..i].join("."))))?;
        let slot = map.get_mut(*part).ok_or_else(|| config_err(format!("unknown config key {key:?}")))?;
        if i + 1 == parts.len() {
            *slot = value;
            return Ok(());
        }
        node = slot;
    }
    Err(config_err("empty override key"))
}

/// Objects sit on a `g x g` grid with `g * g >= proposals`.
pub(crate) fn grid_side(proposals: usize) -> usize {
    (1..).find(|g| g * g >= proposals).expect("grid side")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let c = TrainConfig::default();
        c.validate().unwrap();
        assert_eq!(TrainConfig::from_json(c.to_json()).unwrap(), c);
        assert_eq!(c.to_json()["infer_T"], 2);
        assert_eq!(c.to_json()["schedule"]["T"], 8);
    }

    #[test]
    fn overrides() {
        let c = TrainConfig::default()
            .with_overrides(&["schedule.T=4", "strategy=one_shot", "lr=0.5", "frozen=[\"w0\"]"])
            .unwrap();
        assert_eq!(c.schedule.steps, 4);
        assert_eq!(c.strategy, InjectionStrategy::OneShot);
        assert_eq!(c.lr, 0.5);
        assert!(c.is_frozen(ParamGroup::W0));
        for bad in ["nope=1", "schedule.nope=1", "lr", "lr.x=1", "strategy=sideways"] {
            assert!(matches!(TrainConfig::default().with_overrides(&[bad]), Err(LtfeError::Config(_))), "{bad}");
        }
    }

    #[test]
    fn unknown_file_keys_rejected() {
        assert!(TrainConfig::from_json(serde_json::json!({"lr": 0.1, "extra": 1})).is_err());
        let partial = TrainConfig::from_json(serde_json::json!({"lr": 0.1})).unwrap();
        assert_eq!(partial.momentum, 0.9);
    }

    #[test]
    fn validation() {
        let bad = TrainConfig { infer_steps: 9, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = TrainConfig { layer_index: 3, ..Default::default() };
        assert!(bad.validate().is_err());
    }
}
