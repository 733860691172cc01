//! Checkpoint persistence.

use std::path::Path;

use crate::container::{self, Block};
use crate::error::{Error, Result};
use crate::model::{ModelCheckpoint, ModelConfig, Parameters, TrainingMeta};
use crate::tensor::Tensor;

const KIND: &str = "checkpoint";

pub fn write_checkpoint(path: &Path, checkpoint: &ModelCheckpoint) -> Result<()> {
    let header = serde_json::json!({
        "schema_version": 1,
        "config": checkpoint.config,
        "meta": checkpoint.meta,
    });
    let mut blocks = Vec::new();
    checkpoint.params.for_each(|name, t| {
        blocks.push(Block {
            name: name.to_string(),
            rows: t.rows(),
            cols: t.cols(),
            data: t.as_slice().to_vec(),
        });
    });
    container::write(path, KIND, &header, &blocks)
}

pub fn read_checkpoint(path: &Path) -> Result<ModelCheckpoint> {
    let (header, blocks) = container::read(path, KIND)?;
    let config: ModelConfig = serde_json::from_value(
        header
            .get("config")
            .cloned()
            .ok_or_else(|| Error::Format("checkpoint header missing config".into()))?,
    )
    .map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
    config.validate()?;
    let meta: TrainingMeta = serde_json::from_value(
        header
            .get("meta")
            .cloned()
            .ok_or_else(|| Error::Format("checkpoint header missing meta".into()))?,
    )
    .map_err(|e| Error::Format(format!("checkpoint meta: {e}")))?;

    let mut by_name: std::collections::BTreeMap<String, Block> =
        blocks.into_iter().map(|b| (b.name.clone(), b)).collect();

    // Template with the right shapes, filled from blocks by name.
    let template = ModelCheckpoint::init(config.clone())?;
    let mut params: Parameters = template.params;
    let mut missing = Vec::new();
    let mut bad_shape = Vec::new();
    params.for_each_mut(|name, t| match by_name.remove(name) {
        Some(block) => {
            if (block.rows, block.cols) == t.shape() {
                *t = Tensor::from_vec(block.rows, block.cols, block.data);
            } else {
                bad_shape.push(name.to_string());
            }
        }
        None => missing.push(name.to_string()),
    });
    if !missing.is_empty() {
        return Err(Error::Format(format!(
            "checkpoint missing tensors: {}",
            missing.join(", ")
        )));
    }
    if !bad_shape.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "checkpoint tensors with unexpected shape: {}",
            bad_shape.join(", ")
        )));
    }
    if !by_name.is_empty() {
        return Err(Error::Format(format!(
            "checkpoint has unknown tensors: {}",
            by_name.keys().cloned().collect::<Vec<_>>().join(", ")
        )));
    }
    if !params.is_finite() {
        return Err(Error::NonFinite {
            context: "checkpoint tensors",
            layer: None,
        });
    }
    Ok(ModelCheckpoint {
        config,
        params,
        meta,
    })
}
