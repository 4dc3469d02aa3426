//! Helpers shared by the subcommands: dataset loading with context and
//! model-compatible preparation (normalize with the checkpoint's statistics,
//! then cluster with the checkpoint's component count).

use std::path::Path;

use anyhow::{Context, Result};

use tassel_core::components::{extract_all, load_components, ComponentSet, KmeansConfig};
use tassel_core::data::{apply_normalizer, load_ndjson, Dataset};
use tassel_core::model::ModelParams;

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    load_ndjson(path).with_context(|| format!("loading dataset {}", path.display()))
}

/// Normalizes a dataset with the model's stored statistics and extracts (or
/// loads from a cache) components matching the model's configuration.
pub fn prepare_for_model(
    ds: &Dataset,
    model: &ModelParams<f32>,
    seed: u64,
    cache: Option<&Path>,
) -> Result<(Dataset, Vec<ComponentSet>)> {
    let normalized = apply_normalizer(ds, &model.norm)?;
    let comps = match cache {
        Some(path) => load_components(path, &normalized)
            .with_context(|| format!("loading component cache {}", path.display()))?,
        None => extract_all(
            &normalized,
            model.config.n_components,
            seed,
            &KmeansConfig::default(),
        )?,
    };
    Ok((normalized, comps))
}
