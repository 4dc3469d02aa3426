//! Classification metrics (accuracy, per-class and averaged F1, Cohen's
//! kappa) and the mean-aggregation MLP baseline used for head-to-head
//! comparisons against the component-based classifier.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::components::ComponentSet;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::graph::{BatchNormState, Graph, Mode, NodeId};
use crate::tensor::Tensor;
use crate::train::TrainConfig;

/// Row = true class, column = predicted class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub n_classes: usize,
    /// Row-major counts, length `n_classes * n_classes`.
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn at(&self, true_class: usize, pred_class: usize) -> u64 {
        self.counts[true_class * self.n_classes + pred_class]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

/// Accumulates prediction/label pairs into a confusion matrix.
pub fn confusion(preds: &[usize], labels: &[usize], n_classes: usize) -> Result<ConfusionMatrix> {
    if preds.len() != labels.len() {
        return Err(Error::Contract(format!(
            "{} predictions vs {} labels",
            preds.len(),
            labels.len()
        )));
    }
    let mut counts = vec![0u64; n_classes * n_classes];
    for (&p, &y) in preds.iter().zip(labels) {
        if p >= n_classes || y >= n_classes {
            return Err(Error::Contract(format!(
                "class index out of range: pred {p}, label {y}, {n_classes} classes"
            )));
        }
        counts[y * n_classes + p] += 1;
    }
    Ok(ConfusionMatrix { n_classes, counts })
}

/// Precision, recall, F1 and support of one class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

/// Summary metrics of one evaluation. Both support-weighted and macro F1
/// are reported so the averaging choice is always visible.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub accuracy: f64,
    pub kappa: f64,
    pub weighted_f1: f64,
    pub macro_f1: f64,
    pub per_class: Vec<ClassMetrics>,
}

impl MetricReport {
    pub const CSV_HEADER: &'static str = "accuracy,kappa,weighted_f1,macro_f1";

    /// Fixed-column CSV row matching [`Self::CSV_HEADER`].
    pub fn csv_row(&self) -> String {
        format!(
            "{:.6},{:.6},{:.6},{:.6}",
            self.accuracy, self.kappa, self.weighted_f1, self.macro_f1
        )
    }
}

/// Derives all metrics from a confusion matrix.
///
/// Per-class F1 is `2PR/(P+R)` with the 0-when-undefined convention; the
/// weighted F1 averages per-class F1 by support; kappa is
/// `(p_o - p_e) / (1 - p_e)` with the expected agreement from the marginal
/// products (1.0 for perfect agreement when `p_e` degenerates to 1).
pub fn metrics(cm: &ConfusionMatrix) -> Result<MetricReport> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::Contract("metrics of an empty confusion matrix".into()));
    }
    let n = cm.n_classes;
    let total_f = total as f64;

    let mut diag = 0u64;
    let mut row_sums = vec![0u64; n];
    let mut col_sums = vec![0u64; n];
    for y in 0..n {
        for p in 0..n {
            let c = cm.at(y, p);
            row_sums[y] += c;
            col_sums[p] += c;
            if y == p {
                diag += c;
            }
        }
    }

    let mut per_class = Vec::with_capacity(n);
    let mut weighted_f1 = 0.0;
    let mut macro_f1 = 0.0;
    for class in 0..n {
        let tp = cm.at(class, class) as f64;
        let precision = if col_sums[class] > 0 {
            tp / col_sums[class] as f64
        } else {
            0.0
        };
        let recall = if row_sums[class] > 0 {
            tp / row_sums[class] as f64
        } else {
            0.0
        };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        weighted_f1 += f1 * row_sums[class] as f64 / total_f;
        macro_f1 += f1 / n as f64;
        per_class.push(ClassMetrics {
            precision,
            recall,
            f1,
            support: row_sums[class],
        });
    }

    let accuracy = diag as f64 / total_f;
    let p_e: f64 = (0..n)
        .map(|c| (row_sums[c] as f64 / total_f) * (col_sums[c] as f64 / total_f))
        .sum();
    let kappa = if (1.0 - p_e).abs() < 1e-12 {
        if (accuracy - 1.0).abs() < 1e-12 {
            1.0
        } else {
            0.0
        }
    } else {
        (accuracy - p_e) / (1.0 - p_e)
    };

    Ok(MetricReport {
        accuracy,
        kappa,
        weighted_f1,
        macro_f1,
        per_class,
    })
}

// ── MLP baseline on mean object representations ─────────────────────────

/// Parameters of the flat-vector competitor: two 512-unit ReLU layers, each
/// followed by batch normalization and dropout, then a linear output. Its
/// input is the object's mean pixel series (the single k-means centroid at
/// L = 1) flattened to `T*B` values.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams {
    pub w1: Tensor<f32>,
    pub b1: Tensor<f32>,
    pub g1: Tensor<f32>,
    pub be1: Tensor<f32>,
    pub bn1: BatchNormState<f32>,
    pub w2: Tensor<f32>,
    pub b2: Tensor<f32>,
    pub g2: Tensor<f32>,
    pub be2: Tensor<f32>,
    pub bn2: BatchNormState<f32>,
    pub w3: Tensor<f32>,
    pub b3: Tensor<f32>,
    pub dropout: f32,
    pub units: usize,
}

impl MlpParams {
    fn init(input_dim: usize, n_classes: usize, units: usize, dropout: f32, seed: u64) -> Self {
        use rand::Rng;
        let mut rng = rng::stream(seed, "init", 1);
        let mut he = |shape: &[usize], fan_in: usize| {
            let limit = (6.0 / fan_in as f64).sqrt();
            let n: usize = shape.iter().product();
            let data: Vec<f32> = (0..n).map(|_| rng.gen_range(-limit..limit) as f32).collect();
            Tensor::new(shape.to_vec(), data).unwrap()
        };
        MlpParams {
            w1: he(&[input_dim, units], input_dim),
            b1: Tensor::zeros(&[units]),
            g1: Tensor::ones(&[units]),
            be1: Tensor::zeros(&[units]),
            bn1: BatchNormState::identity(units),
            w2: he(&[units, units], units),
            b2: Tensor::zeros(&[units]),
            g2: Tensor::ones(&[units]),
            be2: Tensor::zeros(&[units]),
            bn2: BatchNormState::identity(units),
            w3: he(&[units, n_classes], units),
            b3: Tensor::zeros(&[n_classes]),
            dropout,
            units,
        }
    }

    fn trainable_mut(&mut self) -> Vec<&mut Tensor<f32>> {
        vec![
            &mut self.w1, &mut self.b1, &mut self.g1, &mut self.be1,
            &mut self.w2, &mut self.b2, &mut self.g2, &mut self.be2,
            &mut self.w3, &mut self.b3,
        ]
    }
}

/// Mean representation of each object: the flattened single centroid of its
/// component set (callers pass L = 1 extractions).
pub fn mean_inputs(comps: &[ComponentSet]) -> Result<Vec<Vec<f32>>> {
    comps
        .iter()
        .map(|set| {
            if set.effective_k != 1 && set.l() != 1 {
                return Err(Error::Contract(format!(
                    "object {}: baseline wants single-centroid components, got l={}",
                    set.object_id,
                    set.l()
                )));
            }
            Ok(set.centroids[0].clone())
        })
        .collect()
}

fn mlp_forward(
    g: &mut Graph<f32>,
    p: &MlpParams,
    ids: &[NodeId],
    x: NodeId,
    rng: &mut ChaCha8Rng,
) -> Result<(NodeId, Option<BatchNormState<f32>>, Option<BatchNormState<f32>>)> {
    let drop = p.dropout;
    let z = g.dense(x, ids[0], ids[1])?;
    let z = g.relu(z)?;
    let (z, upd1) = g.batchnorm(z, ids[2], ids[3], &p.bn1, 1e-5, 0.9)?;
    let z = g.dropout(z, drop, rng)?;
    let z = g.dense(z, ids[4], ids[5])?;
    let z = g.relu(z)?;
    let (z, upd2) = g.batchnorm(z, ids[6], ids[7], &p.bn2, 1e-5, 0.9)?;
    let z = g.dropout(z, drop, rng)?;
    let logits = g.dense(z, ids[8], ids[9])?;
    Ok((logits, upd1, upd2))
}

fn bind_mlp(g: &mut Graph<f32>, p: &MlpParams, trainable: bool) -> Vec<NodeId> {
    let tensors = [
        &p.w1, &p.b1, &p.g1, &p.be1, &p.w2, &p.b2, &p.g2, &p.be2, &p.w3, &p.b3,
    ];
    tensors
        .iter()
        .map(|t| {
            if trainable {
                g.param((*t).clone())
            } else {
                g.constant((*t).clone())
            }
        })
        .collect()
}

/// Trains the MLP baseline under the same protocol as the main model (Adam,
/// seeded shuffling, weighted-F1 model selection on validation).
pub fn mlp_baseline_fit(
    train: &Dataset,
    train_inputs: &[Vec<f32>],
    val: &Dataset,
    val_inputs: &[Vec<f32>],
    config: &TrainConfig,
) -> Result<(MlpParams, crate::train::FitReport)> {
    config.validate()?;
    let input_dim = train.t * train.b;
    if train_inputs.iter().any(|x| x.len() != input_dim) {
        return Err(Error::Shape(format!(
            "baseline inputs must have length {input_dim}"
        )));
    }
    let units = 512 / config.width_div;
    let mut params = MlpParams::init(
        input_dim,
        train.n_classes(),
        units,
        config.dropout,
        config.seed,
    );
    let labels: Vec<usize> = train
        .objects
        .iter()
        .map(|o| o.label.ok_or_else(|| Error::Contract(format!("object {} has no label", o.id))))
        .collect::<Result<_>>()?;
    let val_labels: Vec<usize> = val
        .objects
        .iter()
        .map(|o| o.label.expect("validation object without label"))
        .collect();

    let shapes: Vec<Vec<usize>> = {
        let mut p = params.clone();
        p.trainable_mut().iter().map(|t| t.shape().to_vec()).collect()
    };
    let mut adam = crate::train::Adam::new(config.lr, &shapes);
    let mut dropout_rng = rng::stream(config.seed, "dropout", 1);

    let start = std::time::Instant::now();
    let mut report = crate::train::FitReport {
        train_loss: Vec::with_capacity(config.epochs),
        val_trace: Vec::new(),
        selected_epoch: 0,
        wall_seconds: 0.0,
    };
    let mut best: Option<(f64, usize, MlpParams)> = None;

    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..train_inputs.len()).collect();
        let mut shuffle_rng = rng::stream(config.seed, "shuffle", epoch as u64);
        crate::data::shuffle(&mut order, &mut shuffle_rng);

        let mut epoch_loss = 0.0f64;
        for chunk in order.chunks(config.batch_size) {
            let mut data = Vec::with_capacity(chunk.len() * input_dim);
            let mut batch_labels = Vec::with_capacity(chunk.len());
            for &i in chunk {
                data.extend_from_slice(&train_inputs[i]);
                batch_labels.push(labels[i]);
            }
            let mut g = Graph::new(Mode::Train);
            let ids = bind_mlp(&mut g, &params, true);
            let x = g.constant(Tensor::new(vec![chunk.len(), input_dim], data)?);
            let (logits, upd1, upd2) = mlp_forward(&mut g, &params, &ids, x, &mut dropout_rng)?;
            let loss = g.cross_entropy(logits, &batch_labels)?;
            epoch_loss += f64::from(g.value(loss).item()) * chunk.len() as f64;

            let grads = g.backward(loss)?;
            let grad_list: Vec<Option<Tensor<f32>>> =
                ids.iter().map(|id| grads.get(*id).cloned()).collect();
            let mut trainable = params.trainable_mut();
            adam.step(&mut trainable, &grad_list)?;
            if let Some(s) = upd1 {
                params.bn1 = s;
            }
            if let Some(s) = upd2 {
                params.bn2 = s;
            }
        }
        report
            .train_loss
            .push((epoch_loss / train_inputs.len() as f64) as f32);

        let last_epoch = epoch + 1 == config.epochs;
        if (epoch + 1) % config.eval_every == 0 || last_epoch {
            let preds = mlp_baseline_predict(&params, val_inputs)?;
            let cm = confusion(&preds, &val_labels, val.n_classes())?;
            let f1 = metrics(&cm)?.weighted_f1;
            report.val_trace.push((epoch, f1));
            if best.as_ref().is_none_or(|(bf, _, _)| f1 > *bf) {
                best = Some((f1, epoch, params.clone()));
            }
        }
    }

    let (_, selected_epoch, best_params) = best.expect("at least one validation point");
    report.selected_epoch = selected_epoch;
    report.wall_seconds = start.elapsed().as_secs_f64();
    Ok((best_params, report))
}

/// Infer-mode predictions of the baseline; one row per input.
pub fn mlp_baseline_predict(params: &MlpParams, inputs: &[Vec<f32>]) -> Result<Vec<usize>> {
    if inputs.is_empty() {
        return Ok(Vec::new());
    }
    let dim = inputs[0].len();
    let mut preds = Vec::with_capacity(inputs.len());
    let mut rng = rng::stream(0, "dropout", 1);
    for x in inputs {
        let mut g = Graph::new(Mode::Infer);
        let ids = bind_mlp(&mut g, params, false);
        let xn = g.constant(Tensor::new(vec![1, dim], x.clone())?);
        let (logits, _, _) = mlp_forward(&mut g, params, &ids, xn, &mut rng)?;
        let row = g.value(logits).data();
        preds.push(crate::model::argmax(row));
    }
    Ok(preds)
}
