//! Training configuration with TOML/JSON loading and dotted-key overrides.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemporalSource {
    /// Per-frame mean of the patch tokens.
    PatchMean,
    /// Frame-CLS features.
    FCls,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionInit {
    /// Identity when `d_model == D_raw` (plus `init_std` noise), random otherwise.
    Identity,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    Ti,
    Wti,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    /// Shared embedding width; 0 means "same as the corpus D_raw".
    pub d_model: usize,
    pub max_text_len: usize,
    pub max_frames: usize,
    pub max_patches_per_frame: usize,
    pub temporal_source: TemporalSource,
    /// Temperature multiplier inside the contrastive softmax.
    pub logit_scale: f64,
    pub init: ProjectionInit,
    pub init_std: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d_model: 0,
            max_text_len: 32,
            max_frames: 12,
            max_patches_per_frame: 15,
            temporal_source: TemporalSource::PatchMean,
            logit_scale: 100.0,
            init: ProjectionInit::Identity,
            init_std: 0.02,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DmaeConfig {
    pub eta: f64,
    pub top_k: usize,
    /// Size of the TF-IDF irrelevant-word set.
    pub irrelevant_k: usize,
    pub reduction: Reduction,
}

impl Default for DmaeConfig {
    fn default() -> Self {
        Self {
            eta: 2.0,
            top_k: 2,
            irrelevant_k: 5,
            reduction: Reduction::Ti,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NegNceConfig {
    pub gamma1: f64,
    pub gamma2: f64,
    pub xi: f64,
}

impl Default for NegNceConfig {
    fn default() -> Self {
        Self {
            gamma1: 1.0,
            gamma2: 0.5,
            xi: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TpmConfig {
    /// Cumulative-weight threshold of the adaptive mask.
    pub mask_ratio: f64,
    pub margin: f64,
}

impl Default for TpmConfig {
    fn default() -> Self {
        Self {
            mask_ratio: 0.6,
            margin: 0.6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr_heads: f64,
    /// Learning-rate slot for pretrained backbones; unused by the stub encoders.
    pub lr_backbone: f64,
    pub total_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub dmae_on: bool,
    pub negnce_on: bool,
    pub tpmcl_on: bool,
    /// Evaluate every n steps (0 = only at the end).
    pub eval_every: usize,
    /// Write a checkpoint every n steps (0 = only at the end).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            lr_heads: 1e-4,
            lr_backbone: 1e-7,
            total_steps: 200,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            dmae_on: true,
            negnce_on: true,
            tpmcl_on: true,
            eval_every: 0,
            checkpoint_every: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub dsl: bool,
    pub dsl_scale: f64,
    /// Captions per similarity chunk.
    pub chunk_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            dsl: false,
            dsl_scale: 100.0,
            chunk_size: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub encoder: EncoderConfig,
    pub dmae: DmaeConfig,
    pub negnce: NegNceConfig,
    pub tpmcl: TpmConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Config {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let config: Config = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| Error::json(path, e))?
        } else {
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        };
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// Applies `section.key=value`. Unknown keys are rejected; values are parsed
    /// as TOML literals, falling back to a bare string.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
        let mut table = toml::Table::try_from(&*self).map_err(|e| Error::Config(e.to_string()))?;
        set_dotted(&mut table, key.trim(), raw.trim())?;
        let updated: Config = table
            .try_into()
            .map_err(|e| Error::Config(format!("override `{assignment}`: {e}")))?;
        updated.validate()?;
        *self = updated;
        Ok(())
    }

    pub fn apply_overrides<S: AsRef<str>>(&mut self, assignments: &[S]) -> Result<()> {
        for a in assignments {
            self.apply_override(a.as_ref())?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(Error::Config(msg.to_string()));
        let e = &self.encoder;
        if !(e.logit_scale > 0.0) {
            return fail("encoder.logit_scale must be > 0");
        }
        if e.max_text_len == 0 || e.max_frames == 0 {
            return fail("encoder.max_text_len and encoder.max_frames must be >= 1");
        }
        if !(e.init_std >= 0.0) {
            return fail("encoder.init_std must be >= 0");
        }
        if self.dmae.top_k == 0 {
            return fail("dmae.top_k must be >= 1");
        }
        if !(self.dmae.eta >= 1.0) {
            return fail("dmae.eta must be >= 1");
        }
        let n = &self.negnce;
        if !(n.gamma1 >= 0.0 && n.gamma2 >= 0.0) {
            return fail("negnce.gamma1 and negnce.gamma2 must be >= 0");
        }
        if !n.xi.is_finite() {
            return fail("negnce.xi must be finite");
        }
        if !(0.0..=1.0).contains(&self.tpmcl.mask_ratio) {
            return fail("tpmcl.mask_ratio must lie in [0, 1]");
        }
        if !(self.tpmcl.margin >= 0.0) {
            return fail("tpmcl.margin must be >= 0");
        }
        let t = &self.train;
        if t.batch_size == 0 {
            return fail("train.batch_size must be >= 1");
        }
        if !(t.lr_heads > 0.0 && t.lr_backbone > 0.0) {
            return fail("learning rates must be > 0");
        }
        if !(0.0..1.0).contains(&t.beta1) || !(0.0..1.0).contains(&t.beta2) || !(t.eps > 0.0) {
            return fail("adam betas must lie in [0, 1) and eps must be > 0");
        }
        if !(self.eval.dsl_scale > 0.0) || self.eval.chunk_size == 0 {
            return fail("eval.dsl_scale must be > 0 and eval.chunk_size >= 1");
        }
        Ok(())
    }
}

fn parse_literal(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("key v"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Sets an existing dotted key in a TOML table.
pub fn set_dotted(table: &mut toml::Table, key: &str, raw: &str) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    let (last, path) = parts.split_last().expect("split yields at least one part");
    let mut cur = table;
    for p in path {
        cur = match cur.get_mut(*p) {
            Some(toml::Value::Table(t)) => t,
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        };
    }
    let Some(slot) = cur.get_mut(*last) else {
        return Err(Error::Config(format!("unknown config key `{key}`")));
    };
    if matches!(slot, toml::Value::Table(_)) {
        return Err(Error::Config(format!("`{key}` is a section, not a value")));
    }
    let mut value = parse_literal(raw);
    if let (toml::Value::Float(_), toml::Value::Integer(i)) = (&*slot, &value) {
        value = toml::Value::Float(*i as f64);
    }
    *slot = value;
    Ok(())
}
