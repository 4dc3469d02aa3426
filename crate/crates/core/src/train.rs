//! Adam optimization and the experiment loop: seeded mini-batch shuffling,
//! combined-loss training steps, periodic validation with weighted-F1 model
//! selection, and a reproducible fit report.

use serde::{Deserialize, Serialize};

use crate::components::ComponentSet;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::eval::{confusion, metrics};
use crate::model::{bind, forward_loss, predict_all, ModelConfig, ModelParams, PredictionRecord};
use crate::rng;
use crate::tensor::graph::{Graph, Mode};
use crate::tensor::Tensor;

/// Training protocol parameters. Defaults: Adam at 1e-4, 5000 epochs,
/// batch size 32, lambda 0.5, 6 components.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub lambda: f32,
    pub n_components: usize,
    pub seed: u64,
    /// Validate (and consider for selection) every this many epochs.
    pub eval_every: usize,
    pub dropout: f32,
    pub width_div: usize,
    /// Stop as soon as a validation point reaches this weighted F1.
    pub stop_when_val_f1: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 5000,
            batch_size: 32,
            lr: 1e-4,
            lambda: 0.5,
            n_components: 6,
            seed: 0,
            eval_every: 10,
            dropout: 0.5,
            width_div: 1,
            stop_when_val_f1: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::Config(
                "epochs, batch_size and eval_every must be positive".into(),
            ));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("bad learning rate {}", self.lr)));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("lambda {} outside [0,1]", self.lambda)));
        }
        Ok(())
    }
}

/// Adam with bias correction; one `(m, v)` pair per trainable tensor.
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    step: u64,
    moments: Vec<(Tensor<f32>, Tensor<f32>)>,
}

impl Adam {
    pub fn new(lr: f32, shapes: &[Vec<usize>]) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: shapes
                .iter()
                .map(|s| (Tensor::zeros(s), Tensor::zeros(s)))
                .collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update: `params[i] -= lr * m_hat / (sqrt(v_hat) + eps)` with the
    /// gradients aligned index-for-index with the parameters.
    pub fn step(
        &mut self,
        params: &mut [&mut Tensor<f32>],
        grads: &[Option<Tensor<f32>>],
    ) -> Result<()> {
        if params.len() != self.moments.len() || grads.len() != params.len() {
            return Err(Error::Internal(format!(
                "optimizer sees {} params, {} grads, {} moment pairs",
                params.len(),
                grads.len(),
                self.moments.len()
            )));
        }
        self.step += 1;
        // Bias corrections in f64: beta^t underflows f32 on long runs.
        let c1 = 1.0 - (f64::from(self.beta1)).powi(self.step as i32);
        let c2 = 1.0 - (f64::from(self.beta2)).powi(self.step as i32);
        let inv_c1 = (1.0 / c1) as f32;
        let inv_c2 = (1.0 / c2) as f32;

        for (i, param) in params.iter_mut().enumerate() {
            let (m, v) = &mut self.moments[i];
            let zero;
            let grad = match &grads[i] {
                Some(g) => {
                    if g.shape() != param.shape() {
                        return Err(Error::Internal(format!(
                            "gradient shape {:?} vs parameter shape {:?}",
                            g.shape(),
                            param.shape()
                        )));
                    }
                    g
                }
                None => {
                    // Parameter unreachable from the loss this step (e.g. the
                    // auxiliary head at lambda 0): zero gradient, moments decay.
                    zero = Tensor::zeros(param.shape());
                    &zero
                }
            };
            let md = m.data_mut();
            let vd = v.data_mut();
            let pd = param.data_mut();
            let gd = grad.data();
            for j in 0..pd.len() {
                md[j] = self.beta1 * md[j] + (1.0 - self.beta1) * gd[j];
                vd[j] = self.beta2 * vd[j] + (1.0 - self.beta2) * gd[j] * gd[j];
                let m_hat = md[j] * inv_c1;
                let v_hat = vd[j] * inv_c2;
                pd[j] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Per-epoch traces and the selection outcome of one fit.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FitReport {
    /// Mean training loss per epoch (sample-weighted over batches).
    pub train_loss: Vec<f32>,
    /// `(epoch, weighted F1)` at each validation point.
    pub val_trace: Vec<(usize, f64)>,
    /// Epoch whose parameters were kept: argmax of the validation trace,
    /// earliest on ties.
    pub selected_epoch: usize,
    pub wall_seconds: f64,
}

struct LabeledSet<'a> {
    comps: &'a ComponentSet,
    label: usize,
}

fn labeled_sets<'a>(ds: &Dataset, comps: &'a [ComponentSet]) -> Result<Vec<LabeledSet<'a>>> {
    if ds.objects.len() != comps.len() {
        return Err(Error::Contract(format!(
            "{} objects but {} component sets",
            ds.objects.len(),
            comps.len()
        )));
    }
    ds.objects
        .iter()
        .zip(comps)
        .map(|(obj, set)| {
            let label = obj
                .label
                .ok_or_else(|| Error::Contract(format!("object {} has no label", obj.id)))?;
            Ok(LabeledSet { comps: set, label })
        })
        .collect()
}

/// Weighted F1 of predictions against the labels of `ds`.
pub fn weighted_f1(preds: &[PredictionRecord], ds: &Dataset) -> Result<f64> {
    let labels: Vec<usize> = ds
        .objects
        .iter()
        .map(|o| o.label.expect("evaluation object without label"))
        .collect();
    let pred_labels: Vec<usize> = preds.iter().map(|p| p.label).collect();
    let cm = confusion(&pred_labels, &labels, ds.n_classes())?;
    Ok(metrics(&cm)?.weighted_f1)
}

/// Trains a fresh model on pre-extracted components.
///
/// Mini-batches are reshuffled every epoch from the `"shuffle"` stream; the
/// last incomplete batch is kept. Every `eval_every` epochs (and at the last
/// epoch) the validation weighted F1 is computed in infer mode and the best
/// parameters so far are retained; the returned model is that best snapshot.
pub fn fit(
    train: &Dataset,
    train_comps: &[ComponentSet],
    val: &Dataset,
    val_comps: &[ComponentSet],
    config: &TrainConfig,
) -> Result<(ModelParams<f32>, FitReport)> {
    config.validate()?;
    if train.objects.is_empty() || val.objects.is_empty() {
        return Err(Error::Contract(
            "fit needs non-empty train and validation sets".into(),
        ));
    }
    let start = std::time::Instant::now();

    let model_cfg = ModelConfig::new(train.b, train.n_classes(), config.n_components)
        .with_width_div(config.width_div)
        .with_dropout(config.dropout);
    // Pipelines normalize before clustering; the identity stats recorded here
    // are overwritten by the caller when it owns real normalization state.
    let norm = crate::data::NormStats {
        min: vec![0.0; train.b],
        max: vec![1.0; train.b],
    };
    let mut params =
        ModelParams::<f32>::init(model_cfg, train.class_names.clone(), norm, config.seed)?;

    let examples = labeled_sets(train, train_comps)?;
    let shapes: Vec<Vec<usize>> = params
        .tensor_entries()
        .iter()
        .filter(|(_, role, _)| *role == crate::model::TensorRole::Trainable)
        .map(|(_, _, t)| t.shape().to_vec())
        .collect();
    let mut adam = Adam::new(config.lr, &shapes);
    let mut dropout_rng = rng::stream(config.seed, "dropout", 0);

    let mut report = FitReport {
        train_loss: Vec::with_capacity(config.epochs),
        val_trace: Vec::new(),
        selected_epoch: 0,
        wall_seconds: 0.0,
    };
    let mut best: Option<(f64, usize, ModelParams<f32>)> = None;

    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..examples.len()).collect();
        let mut shuffle_rng = rng::stream(config.seed, "shuffle", epoch as u64);
        crate::data::shuffle(&mut order, &mut shuffle_rng);

        let mut epoch_loss = 0.0f64;
        for chunk in order.chunks(config.batch_size) {
            let comps: Vec<&ComponentSet> = chunk.iter().map(|&i| examples[i].comps).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| examples[i].label).collect();

            let mut g = Graph::new(Mode::Train);
            let bound = bind(&mut g, &params, true);
            let out = forward_loss(
                &mut g,
                &bound,
                &params,
                &comps,
                &labels,
                config.lambda,
                train.t,
                &mut dropout_rng,
            )?;
            let loss_value = f64::from(g.value(out.loss).item());
            epoch_loss += loss_value * chunk.len() as f64;

            let grads = g.backward(out.loss)?;
            let ids = bound.trainable_ids();
            let grad_list: Vec<Option<Tensor<f32>>> =
                ids.iter().map(|id| grads.get(*id).cloned()).collect();
            let mut trainable = params.trainable_mut();
            adam.step(&mut trainable, &grad_list)?;
            params.apply_bn_updates(out.bn_updates);
        }
        report
            .train_loss
            .push((epoch_loss / examples.len() as f64) as f32);

        let last_epoch = epoch + 1 == config.epochs;
        if (epoch + 1) % config.eval_every == 0 || last_epoch {
            let preds = predict_all(&params, val_comps, val.t)?;
            let f1 = weighted_f1(&preds, val)?;
            if !f1.is_finite() {
                return Err(Error::Numeric(format!(
                    "validation weighted F1 became non-finite at epoch {epoch}"
                )));
            }
            report.val_trace.push((epoch, f1));
            if best.as_ref().is_none_or(|(bf, _, _)| f1 > *bf) {
                best = Some((f1, epoch, params.clone()));
            }
            if config.stop_when_val_f1.is_some_and(|target| f1 >= target) {
                break;
            }
        }
    }

    let (_, selected_epoch, best_params) = best.expect("at least one validation point");
    report.selected_epoch = selected_epoch;
    report.wall_seconds = start.elapsed().as_secs_f64();
    Ok((best_params, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{ObjectSits, PixelTs};

    #[test]
    fn first_adam_step_moves_by_about_the_learning_rate() {
        let mut p = Tensor::new(vec![1], vec![0.0f32]).unwrap();
        let mut adam = Adam::new(1e-4, &[vec![1]]);
        let grad = Some(Tensor::new(vec![1], vec![1.0f32]).unwrap());
        adam.step(&mut [&mut p], &[grad]).unwrap();
        let v = p.data()[0];
        assert!((v + 1e-4).abs() < 1e-8, "first step should be ~ -lr, got {v}");
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged_while_moments_decay() {
        let mut p = Tensor::new(vec![2], vec![0.5f32, -0.25]).unwrap();
        let mut adam = Adam::new(1e-3, &[vec![2]]);
        for _ in 0..5 {
            adam.step(&mut [&mut p], &[None]).unwrap();
        }
        assert_eq!(p.data(), &[0.5, -0.25]);
        assert_eq!(adam.step_count(), 5);
    }

    #[test]
    fn adam_trajectories_are_deterministic() {
        let run = || {
            let mut p = Tensor::new(vec![3], vec![0.1f32, -0.4, 0.9]).unwrap();
            let mut adam = Adam::new(1e-2, &[vec![3]]);
            for step in 0..20 {
                let g = Tensor::new(
                    vec![3],
                    vec![
                        (step as f32 * 0.3).sin(),
                        (step as f32 * 0.7).cos(),
                        0.5 - step as f32 * 0.01,
                    ],
                )
                .unwrap();
                adam.step(&mut [&mut p], &[Some(g)]).unwrap();
            }
            p.data().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn adam_rejects_mismatched_gradient_shape() {
        let mut p = Tensor::new(vec![2], vec![0.0f32, 0.0]).unwrap();
        let mut adam = Adam::new(1e-3, &[vec![2]]);
        let bad = Some(Tensor::new(vec![3], vec![0.0f32, 0.0, 0.0]).unwrap());
        assert!(adam.step(&mut [&mut p], &[bad]).is_err());
    }

    /// A dataset of single-pixel objects with two trivially separable
    /// classes (low vs high constant series).
    fn toy_data(n: usize, t: usize) -> (Dataset, Vec<ComponentSet>) {
        let objects: Vec<ObjectSits> = (0..n)
            .map(|i| {
                let class = i % 2;
                let level = if class == 0 { 0.2 } else { 0.8 };
                ObjectSits {
                    id: format!("o{i}"),
                    label: Some(class),
                    pixels: vec![PixelTs {
                        values: (0..t)
                            .map(|ti| level + 0.05 * ((ti + i) as f32 * 0.9).sin())
                            .collect(),
                        coord: None,
                    }],
                }
            })
            .collect();
        let ds = Dataset {
            objects,
            class_names: vec!["low".into(), "high".into()],
            t,
            b: 1,
        };
        let comps =
            crate::components::extract_all(&ds, 2, 0, &crate::components::KmeansConfig::default())
                .unwrap();
        (ds, comps)
    }

    #[test]
    fn fit_is_deterministic_and_selects_the_earliest_best_epoch() {
        let (ds, comps) = toy_data(8, 8);
        let config = TrainConfig {
            epochs: 6,
            batch_size: 4,
            lr: 1e-3,
            lambda: 0.5,
            n_components: 2,
            seed: 11,
            eval_every: 2,
            dropout: 0.2,
            width_div: 32,
            stop_when_val_f1: None,
        };
        let (m1, r1) = fit(&ds, &comps, &ds, &comps, &config).unwrap();
        let (m2, r2) = fit(&ds, &comps, &ds, &comps, &config).unwrap();
        assert_eq!(m1, m2);
        assert_eq!(r1.train_loss, r2.train_loss);
        assert_eq!(r1.val_trace, r2.val_trace);

        // Selection rule: argmax with earliest tie.
        let best = r1
            .val_trace
            .iter()
            .fold(None::<(usize, f64)>, |acc, &(e, f)| match acc {
                Some((be, bf)) if f <= bf => Some((be, bf)),
                _ => Some((e, f)),
            })
            .unwrap();
        assert_eq!(r1.selected_epoch, best.0);
    }

    #[test]
    fn aux_head_parameters_do_not_move_when_lambda_is_zero() {
        let (ds, comps) = toy_data(8, 8);
        let config = TrainConfig {
            epochs: 3,
            batch_size: 4,
            lr: 1e-3,
            lambda: 0.0,
            n_components: 2,
            seed: 3,
            eval_every: 3,
            dropout: 0.0,
            width_div: 32,
            stop_when_val_f1: None,
        };
        let (trained, _) = fit(&ds, &comps, &ds, &comps, &config).unwrap();
        let fresh = ModelParams::<f32>::init(
            trained.config.clone(),
            trained.class_names.clone(),
            trained.norm.clone(),
            config.seed,
        )
        .unwrap();
        // Aux head untouched, but the main path did train.
        assert_eq!(trained.head.w_aux, fresh.head.w_aux);
        assert_eq!(trained.head.b_aux, fresh.head.b_aux);
        assert_ne!(trained.head.w_out, fresh.head.w_out);
    }
}
