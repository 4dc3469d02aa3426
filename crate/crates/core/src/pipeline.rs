//! End-to-end experiment orchestration: split, normalize (training
//! statistics only), extract components, train, and evaluate on the held-out
//! test split. Shared by the command line and the verification suites.

use crate::components::{extract_all, ComponentSet, KmeansConfig};
use crate::data::{apply_normalizer, fit_normalizer, split, Dataset, NormStats};
use crate::error::{Error, Result};
use crate::eval::{
    confusion, mean_inputs, metrics, mlp_baseline_fit, mlp_baseline_predict, MetricReport,
};
use crate::model::{predict_all, ModelParams, PredictionRecord};
use crate::train::{fit, FitReport, TrainConfig};

/// The standard object-proportion split used throughout.
pub const SPLIT_FRACTIONS: (f64, f64, f64) = (0.5, 0.2, 0.3);

/// Normalized splits with their extracted components.
pub struct SplitBundle {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    pub norm: NormStats,
    pub train_comps: Vec<ComponentSet>,
    pub val_comps: Vec<ComponentSet>,
    pub test_comps: Vec<ComponentSet>,
}

/// Splits 50/20/30 under `seed`, fits the normalizer on the training split,
/// normalizes every split with those statistics, and clusters each object of
/// each split into `l` components.
pub fn prepare_splits(ds: &Dataset, l: usize, seed: u64) -> Result<SplitBundle> {
    let (train_raw, val_raw, test_raw) = split(ds, SPLIT_FRACTIONS, seed)?;
    if train_raw.objects.is_empty() || val_raw.objects.is_empty() || test_raw.objects.is_empty() {
        return Err(Error::Contract(format!(
            "split produced an empty part (train {}, val {}, test {})",
            train_raw.objects.len(),
            val_raw.objects.len(),
            test_raw.objects.len()
        )));
    }
    let norm = fit_normalizer(&train_raw)?;
    let train = apply_normalizer(&train_raw, &norm)?;
    let val = apply_normalizer(&val_raw, &norm)?;
    let test = apply_normalizer(&test_raw, &norm)?;
    let kcfg = KmeansConfig::default();
    let train_comps = extract_all(&train, l, seed, &kcfg)?;
    let val_comps = extract_all(&val, l, seed, &kcfg)?;
    let test_comps = extract_all(&test, l, seed, &kcfg)?;
    Ok(SplitBundle {
        train,
        val,
        test,
        norm,
        train_comps,
        val_comps,
        test_comps,
    })
}

/// Labels of every (labeled) object, in order.
pub fn labels_of(ds: &Dataset) -> Vec<usize> {
    ds.objects
        .iter()
        .map(|o| o.label.expect("labeled dataset"))
        .collect()
}

/// Everything a full training run produces.
pub struct RunOutcome {
    pub model: ModelParams<f32>,
    pub report: FitReport,
    pub bundle: SplitBundle,
    pub test_preds: Vec<PredictionRecord>,
    pub test_metrics: MetricReport,
}

/// Full protocol for the component-attention model on one split seed.
pub fn run_tassel(ds: &Dataset, config: &TrainConfig) -> Result<RunOutcome> {
    let bundle = prepare_splits(ds, config.n_components, config.seed)?;
    let (mut model, report) = fit(
        &bundle.train,
        &bundle.train_comps,
        &bundle.val,
        &bundle.val_comps,
        config,
    )?;
    model.norm = bundle.norm.clone();
    let test_preds = predict_all(&model, &bundle.test_comps, bundle.test.t)?;
    let pred_labels: Vec<usize> = test_preds.iter().map(|p| p.label).collect();
    let cm = confusion(&pred_labels, &labels_of(&bundle.test), bundle.test.n_classes())?;
    let test_metrics = metrics(&cm)?;
    Ok(RunOutcome {
        model,
        report,
        bundle,
        test_preds,
        test_metrics,
    })
}

/// Full protocol for the mean-representation MLP baseline on one split seed.
/// The input of each object is its single k-means centroid (L = 1), i.e.
/// the per-feature mean series flattened to `t * b` values.
pub fn run_mlp_baseline(ds: &Dataset, config: &TrainConfig) -> Result<(MetricReport, FitReport)> {
    let bundle = prepare_splits(ds, 1, config.seed)?;
    let train_inputs = mean_inputs(&bundle.train_comps)?;
    let val_inputs = mean_inputs(&bundle.val_comps)?;
    let test_inputs = mean_inputs(&bundle.test_comps)?;
    let (params, report) = mlp_baseline_fit(
        &bundle.train,
        &train_inputs,
        &bundle.val,
        &val_inputs,
        config,
    )?;
    let preds = mlp_baseline_predict(&params, &test_inputs)?;
    let cm = confusion(&preds, &labels_of(&bundle.test), bundle.test.n_classes())?;
    Ok((metrics(&cm)?, report))
}
