//! JSON checkpoints: `{ "config": …, "weights": { name: {rows, cols, data} } }`.
//!
//! Floats are written with the shortest representation that parses back to
//! the same bits, so a save/load round trip is exact.

use std::collections::BTreeMap;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::autodiff::ParamSet;
use crate::error::{FwpError, Result};
use crate::layer::{LayerConfig, SlowWeights};
use crate::tensor::Mat;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint<C> {
    pub config: C,
    pub weights: ParamSet,
}

impl<C: Serialize + DeserializeOwned> Checkpoint<C> {
    pub fn new(config: C, weights: ParamSet) -> Self {
        Self { config, weights }
    }

    pub fn to_json(&self) -> Result<String> {
        if !self.weights.is_finite() {
            return Err(FwpError::Input("refusing to save non-finite weights".into()));
        }
        serde_json::to_string_pretty(self).map_err(|e| FwpError::Input(format!("serialize checkpoint: {e}")))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Self = serde_json::from_str(text).map_err(|e| FwpError::Config(format!("parse checkpoint: {e}")))?;
        for (name, m) in ck.weights.iter() {
            check_mat(name, m)?;
        }
        Ok(ck)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| FwpError::Config(format!("read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }
}

fn check_mat(name: &str, m: &Mat) -> Result<()> {
    let (rows, cols) = m.shape();
    if m.as_slice().len() != rows * cols {
        return Err(FwpError::Shape(format!(
            "weight `{name}` declares {rows}x{cols} but holds {} numbers",
            m.as_slice().len()
        )));
    }
    Ok(())
}

/// Checkpoint of a single fast-weight layer.
pub fn layer_checkpoint(cfg: &LayerConfig, slow: &SlowWeights) -> Checkpoint<LayerConfig> {
    let weights = slow
        .named()
        .into_iter()
        .map(|(name, m)| (name.to_string(), m.clone()))
        .collect::<BTreeMap<_, _>>();
    Checkpoint::new(cfg.clone(), weights.into())
}

pub fn layer_from_checkpoint(ck: &Checkpoint<LayerConfig>) -> Result<(LayerConfig, SlowWeights)> {
    ck.config.validate()?;
    let slow = SlowWeights::from_named(ck.weights.clone().into_map())?;
    slow.validate(&ck.config)?;
    Ok((ck.config.clone(), slow))
}
