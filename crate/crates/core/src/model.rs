//! The TASSEL network.
//!
//! A shared temporal CNN encodes each component of an object into a `d`
//! dimensional vector; an attention layer aggregates the component encodings
//! into one object representation while exposing the mixing weights `alpha`;
//! a two-layer head produces class logits. During training an auxiliary
//! linear classifier on the aggregated representation injects gradient
//! directly at the aggregation level; its output is discarded at inference.
//!
//! Encoder layout (blocks applied in order, weights shared across all
//! components):
//!
//! ```text
//! B1..B4  conv k=3 s=1, 256 filters   each: conv -> ReLU -> BN -> dropout
//! B5      conv k=3 s=2, 512 filters
//! B6      conv k=3 s=1, 512 filters
//! B7, B8  conv k=1 s=1, 512 filters   both reading B6's output
//! B9      channel concatenation of B7 and B8
//! B10     global average pooling over time  ->  d = 1024
//! ```
//!
//! All filter counts scale down by `width_div` for reduced test
//! configurations.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::components::ComponentSet;
use crate::data::NormStats;
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::graph::{BatchNormState, Graph, Mode, NodeId, Padding};
use crate::tensor::{Real, Tensor};

/// Architecture hyperparameters. `width_div` divides every filter count
/// (1 = full size: 256/512 filters, d=1024).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_bands: usize,
    pub n_classes: usize,
    pub n_components: usize,
    pub dropout: f32,
    pub width_div: usize,
    pub bn_eps: f32,
    pub bn_momentum: f32,
}

impl ModelConfig {
    pub fn new(n_bands: usize, n_classes: usize, n_components: usize) -> Self {
        ModelConfig {
            n_bands,
            n_classes,
            n_components,
            dropout: 0.5,
            width_div: 1,
            bn_eps: 1e-5,
            bn_momentum: 0.9,
        }
    }

    pub fn with_width_div(mut self, width_div: usize) -> Self {
        self.width_div = width_div;
        self
    }

    pub fn with_dropout(mut self, dropout: f32) -> Self {
        self.dropout = dropout;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_bands == 0 || self.n_classes < 2 || self.n_components == 0 {
            return Err(Error::Config(
                "model needs n_bands >= 1, n_classes >= 2, n_components >= 1".into(),
            ));
        }
        if self.width_div == 0 || 256 % self.width_div != 0 {
            return Err(Error::Config(format!(
                "width_div {} must divide 256",
                self.width_div
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout {} outside [0,1)",
                self.dropout
            )));
        }
        Ok(())
    }

    /// Filters in blocks B1..B4.
    pub fn base_filters(&self) -> usize {
        256 / self.width_div
    }

    /// Filters in blocks B5..B8.
    pub fn wide_filters(&self) -> usize {
        512 / self.width_div
    }

    /// Encoder output dimension (B7 and B8 concatenated).
    pub fn embedding_dim(&self) -> usize {
        2 * self.wide_filters()
    }

    /// Units in the two fully connected head layers.
    pub fn head_units(&self) -> usize {
        512 / self.width_div
    }
}

/// Kernel size, stride and (in, out) channels of each encoder block.
fn block_geometry(cfg: &ModelConfig) -> [(usize, usize, usize, usize); 8] {
    let nf1 = cfg.base_filters();
    let nf2 = cfg.wide_filters();
    [
        (3, 1, cfg.n_bands, nf1), // B1
        (3, 1, nf1, nf1),         // B2
        (3, 1, nf1, nf1),         // B3
        (3, 1, nf1, nf1),         // B4
        (3, 2, nf1, nf2),         // B5
        (3, 1, nf2, nf2),         // B6
        (1, 1, nf2, nf2),         // B7
        (1, 1, nf2, nf2),         // B8
    ]
}

/// One convolutional block: conv weights plus its batch-norm state.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvBlock<F: Real> {
    pub w: Tensor<F>, // [k, c_in, c_out]
    pub b: Tensor<F>, // [c_out]
    pub gamma: Tensor<F>,
    pub beta: Tensor<F>,
    pub bn: BatchNormState<F>,
    pub stride: usize,
}

/// Attention parameters. `w` is applied on the right of each row encoding
/// (`scores = tanh(h @ w + b) @ v`).
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams<F: Real> {
    pub w: Tensor<F>, // [d, d]
    pub b: Tensor<F>, // [d]
    pub v: Tensor<F>, // [d]
}

/// Fully connected layer followed by batch normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseBn<F: Real> {
    pub w: Tensor<F>,
    pub b: Tensor<F>,
    pub gamma: Tensor<F>,
    pub beta: Tensor<F>,
    pub bn: BatchNormState<F>,
}

/// Main head (two ReLU+BN layers then a linear output) and the auxiliary
/// linear classifier read directly off the aggregated representation.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams<F: Real> {
    pub fc1: DenseBn<F>,
    pub fc2: DenseBn<F>,
    pub w_out: Tensor<F>,
    pub b_out: Tensor<F>,
    pub w_aux: Tensor<F>,
    pub b_aux: Tensor<F>,
}

/// All learnable state of one model, plus the normalization statistics the
/// inputs were fitted with.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<F: Real = f32> {
    pub config: ModelConfig,
    pub class_names: Vec<String>,
    pub norm: NormStats,
    pub blocks: Vec<ConvBlock<F>>,
    pub attention: AttentionParams<F>,
    pub head: HeadParams<F>,
}

/// Distinguishes optimizer-updated tensors from running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TensorRole {
    Trainable,
    RunningStat,
}

fn he_uniform<F: Real>(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor<F> {
    let limit = (6.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| F::from_f64(rng.gen_range(-limit..limit)))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("he_uniform shape")
}

impl<F: Real> ModelParams<F> {
    /// Fresh parameters: He-uniform conv/dense weights, zero biases, BN
    /// gamma 1 / beta 0. Draws come from the `"init"` stream of `seed` in
    /// canonical tensor order.
    pub fn init(
        config: ModelConfig,
        class_names: Vec<String>,
        norm: NormStats,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        if class_names.len() != config.n_classes {
            return Err(Error::Config(format!(
                "{} class names for {} classes",
                class_names.len(),
                config.n_classes
            )));
        }
        let mut rng = rng::stream(seed, "init", 0);
        let blocks = block_geometry(&config)
            .iter()
            .map(|&(k, stride, c_in, c_out)| ConvBlock {
                w: he_uniform(&[k, c_in, c_out], k * c_in, &mut rng),
                b: Tensor::zeros(&[c_out]),
                gamma: Tensor::ones(&[c_out]),
                beta: Tensor::zeros(&[c_out]),
                bn: BatchNormState::identity(c_out),
                stride,
            })
            .collect();
        let d = config.embedding_dim();
        let u = config.head_units();
        let c = config.n_classes;
        let attention = AttentionParams {
            w: he_uniform(&[d, d], d, &mut rng),
            b: Tensor::zeros(&[d]),
            v: he_uniform(&[d], d, &mut rng),
        };
        let head = HeadParams {
            fc1: DenseBn {
                w: he_uniform(&[d, u], d, &mut rng),
                b: Tensor::zeros(&[u]),
                gamma: Tensor::ones(&[u]),
                beta: Tensor::zeros(&[u]),
                bn: BatchNormState::identity(u),
            },
            fc2: DenseBn {
                w: he_uniform(&[u, u], u, &mut rng),
                b: Tensor::zeros(&[u]),
                gamma: Tensor::ones(&[u]),
                beta: Tensor::zeros(&[u]),
                bn: BatchNormState::identity(u),
            },
            w_out: he_uniform(&[u, c], u, &mut rng),
            b_out: Tensor::zeros(&[c]),
            w_aux: he_uniform(&[d, c], d, &mut rng),
            b_aux: Tensor::zeros(&[c]),
        };
        Ok(ModelParams {
            config,
            class_names,
            norm,
            blocks,
            attention,
            head,
        })
    }

    pub fn cast<G: Real>(&self) -> ModelParams<G> {
        ModelParams {
            config: self.config.clone(),
            class_names: self.class_names.clone(),
            norm: self.norm.clone(),
            blocks: self
                .blocks
                .iter()
                .map(|blk| ConvBlock {
                    w: blk.w.cast(),
                    b: blk.b.cast(),
                    gamma: blk.gamma.cast(),
                    beta: blk.beta.cast(),
                    bn: blk.bn.cast(),
                    stride: blk.stride,
                })
                .collect(),
            attention: AttentionParams {
                w: self.attention.w.cast(),
                b: self.attention.b.cast(),
                v: self.attention.v.cast(),
            },
            head: HeadParams {
                fc1: DenseBn {
                    w: self.head.fc1.w.cast(),
                    b: self.head.fc1.b.cast(),
                    gamma: self.head.fc1.gamma.cast(),
                    beta: self.head.fc1.beta.cast(),
                    bn: self.head.fc1.bn.cast(),
                },
                fc2: DenseBn {
                    w: self.head.fc2.w.cast(),
                    b: self.head.fc2.b.cast(),
                    gamma: self.head.fc2.gamma.cast(),
                    beta: self.head.fc2.beta.cast(),
                    bn: self.head.fc2.bn.cast(),
                },
                w_out: self.head.w_out.cast(),
                b_out: self.head.b_out.cast(),
                w_aux: self.head.w_aux.cast(),
                b_aux: self.head.b_aux.cast(),
            },
        }
    }

    /// Canonical tensor order shared by the optimizer, the checkpoint format
    /// and graph binding. Running statistics follow their block's trainables.
    pub fn tensor_entries(&self) -> Vec<(String, TensorRole, &Tensor<F>)> {
        use TensorRole::*;
        let mut out = Vec::new();
        for (i, blk) in self.blocks.iter().enumerate() {
            let p = format!("encoder.b{}", i + 1);
            out.push((format!("{p}.w"), Trainable, &blk.w));
            out.push((format!("{p}.b"), Trainable, &blk.b));
            out.push((format!("{p}.gamma"), Trainable, &blk.gamma));
            out.push((format!("{p}.beta"), Trainable, &blk.beta));
            out.push((format!("{p}.bn_mean"), RunningStat, &blk.bn.mean));
            out.push((format!("{p}.bn_var"), RunningStat, &blk.bn.var));
        }
        out.push(("attention.w".into(), Trainable, &self.attention.w));
        out.push(("attention.b".into(), Trainable, &self.attention.b));
        out.push(("attention.v".into(), Trainable, &self.attention.v));
        for (name, fc) in [("head.fc1", &self.head.fc1), ("head.fc2", &self.head.fc2)] {
            out.push((format!("{name}.w"), Trainable, &fc.w));
            out.push((format!("{name}.b"), Trainable, &fc.b));
            out.push((format!("{name}.gamma"), Trainable, &fc.gamma));
            out.push((format!("{name}.beta"), Trainable, &fc.beta));
            out.push((format!("{name}.bn_mean"), RunningStat, &fc.bn.mean));
            out.push((format!("{name}.bn_var"), RunningStat, &fc.bn.var));
        }
        out.push(("head.out.w".into(), Trainable, &self.head.w_out));
        out.push(("head.out.b".into(), Trainable, &self.head.b_out));
        out.push(("head.aux.w".into(), Trainable, &self.head.w_aux));
        out.push(("head.aux.b".into(), Trainable, &self.head.b_aux));
        out
    }

    /// Mutable view of the trainable tensors, in the same order as the
    /// `Trainable` entries of [`Self::tensor_entries`].
    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor<F>> {
        let mut out: Vec<&mut Tensor<F>> = Vec::new();
        for blk in &mut self.blocks {
            out.push(&mut blk.w);
            out.push(&mut blk.b);
            out.push(&mut blk.gamma);
            out.push(&mut blk.beta);
        }
        out.push(&mut self.attention.w);
        out.push(&mut self.attention.b);
        out.push(&mut self.attention.v);
        for fc in [&mut self.head.fc1, &mut self.head.fc2] {
            out.push(&mut fc.w);
            out.push(&mut fc.b);
            out.push(&mut fc.gamma);
            out.push(&mut fc.beta);
        }
        out.push(&mut self.head.w_out);
        out.push(&mut self.head.b_out);
        out.push(&mut self.head.w_aux);
        out.push(&mut self.head.b_aux);
        out
    }

    /// Number of trainable scalars; independent of the number of components
    /// because the encoder is shared.
    pub fn trainable_count(&self) -> usize {
        self.tensor_entries()
            .iter()
            .filter(|(_, role, _)| *role == TensorRole::Trainable)
            .map(|(_, _, t)| t.len())
            .sum()
    }

    /// Batch-norm states in slot order (encoder blocks, then head fc1, fc2).
    pub fn bn_states_mut(&mut self) -> Vec<&mut BatchNormState<F>> {
        let mut out: Vec<&mut BatchNormState<F>> = Vec::new();
        for blk in &mut self.blocks {
            out.push(&mut blk.bn);
        }
        out.push(&mut self.head.fc1.bn);
        out.push(&mut self.head.fc2.bn);
        out
    }

    /// Writes back the running statistics produced by a train-mode forward
    /// pass.
    pub fn apply_bn_updates(&mut self, updates: Vec<(usize, BatchNormState<F>)>) {
        let mut states = self.bn_states_mut();
        for (slot, update) in updates {
            *states[slot] = update;
        }
    }
}

// ── graph binding and forward passes ────────────────────────────────────

/// NodeIds of every trainable tensor of one model inside one graph.
pub struct BoundModel {
    blocks: Vec<(NodeId, NodeId, NodeId, NodeId)>, // w, b, gamma, beta
    att_w: NodeId,
    att_b: NodeId,
    att_v: NodeId,
    fc1: (NodeId, NodeId, NodeId, NodeId),
    fc2: (NodeId, NodeId, NodeId, NodeId),
    w_out: NodeId,
    b_out: NodeId,
    w_aux: NodeId,
    b_aux: NodeId,
}

impl BoundModel {
    /// Trainable NodeIds in the canonical tensor order.
    pub fn trainable_ids(&self) -> Vec<NodeId> {
        let mut out = Vec::new();
        for &(w, b, g, be) in &self.blocks {
            out.extend([w, b, g, be]);
        }
        out.extend([self.att_w, self.att_b, self.att_v]);
        for &(w, b, g, be) in [&self.fc1, &self.fc2] {
            out.extend([w, b, g, be]);
        }
        out.extend([self.w_out, self.b_out, self.w_aux, self.b_aux]);
        out
    }
}

/// Registers all trainable tensors in the graph, as gradient-accumulating
/// parameters (training) or as constants (inference).
pub fn bind<F: Real>(g: &mut Graph<F>, params: &ModelParams<F>, trainable: bool) -> BoundModel {
    let leaf = |t: &Tensor<F>, g: &mut Graph<F>| {
        if trainable {
            g.param(t.clone())
        } else {
            g.constant(t.clone())
        }
    };
    BoundModel {
        blocks: params
            .blocks
            .iter()
            .map(|blk| {
                (
                    leaf(&blk.w, g),
                    leaf(&blk.b, g),
                    leaf(&blk.gamma, g),
                    leaf(&blk.beta, g),
                )
            })
            .collect(),
        att_w: leaf(&params.attention.w, g),
        att_b: leaf(&params.attention.b, g),
        att_v: leaf(&params.attention.v, g),
        fc1: (
            leaf(&params.head.fc1.w, g),
            leaf(&params.head.fc1.b, g),
            leaf(&params.head.fc1.gamma, g),
            leaf(&params.head.fc1.beta, g),
        ),
        fc2: (
            leaf(&params.head.fc2.w, g),
            leaf(&params.head.fc2.b, g),
            leaf(&params.head.fc2.gamma, g),
            leaf(&params.head.fc2.beta, g),
        ),
        w_out: leaf(&params.head.w_out, g),
        b_out: leaf(&params.head.b_out, g),
        w_aux: leaf(&params.head.w_aux, g),
        b_aux: leaf(&params.head.b_aux, g),
    }
}

/// Running-stat updates produced by one train-mode forward pass, keyed by
/// batch-norm slot.
pub type BnUpdates<F> = Vec<(usize, BatchNormState<F>)>;

/// Shared encoder over a stack of components: `[n, t, bands] -> [n, d]`.
///
/// In train mode the batch-norm statistics mix every component in the stack
/// and `updates` receives the new running states; dropout draws from `rng`.
pub fn encode_batch<F: Real>(
    g: &mut Graph<F>,
    bound: &BoundModel,
    params: &ModelParams<F>,
    x: NodeId,
    rng: &mut ChaCha8Rng,
    updates: &mut BnUpdates<F>,
) -> Result<NodeId> {
    let t = g.value(x).dim(1);
    if t < 4 {
        return Err(Error::Shape(format!(
            "encoder needs at least 4 timestamps, got {t}"
        )));
    }
    let cfg = &params.config;
    let drop = F::from_f64(f64::from(cfg.dropout));
    let eps = F::from_f64(f64::from(cfg.bn_eps));
    let momentum = F::from_f64(f64::from(cfg.bn_momentum));

    let conv_block = |g: &mut Graph<F>,
                          slot: usize,
                          input: NodeId,
                          rng: &mut ChaCha8Rng,
                          updates: &mut BnUpdates<F>|
     -> Result<NodeId> {
        let (w, b, gamma, beta) = bound.blocks[slot];
        let blk = &params.blocks[slot];
        let y = g.conv1d(input, w, b, blk.stride, Padding::Same)?;
        let y = g.relu(y)?;
        let (y, new_state) = g.batchnorm(y, gamma, beta, &blk.bn, eps, momentum)?;
        if let Some(state) = new_state {
            updates.push((slot, state));
        }
        g.dropout(y, drop, rng)
    };

    let mut cur = x;
    for slot in 0..6 {
        cur = conv_block(g, slot, cur, rng, updates)?;
    }
    // B7 and B8 branch in parallel from B6's output; their feature maps are
    // concatenated before pooling.
    let b7 = conv_block(g, 6, cur, rng, updates)?;
    let b8 = conv_block(g, 7, cur, rng, updates)?;
    let merged = g.concat_channels(b7, b8)?;
    g.global_avg_pool(merged)
}

/// Attention over component encodings.
///
/// `h` is `[n_objects * l, d]`; returns `(h_hat [n_objects, d],
/// alpha [n_objects, l])` where `alpha` rows are softmax-normalized scores
/// `tanh(h @ w + b) @ v` and `h_hat` the alpha-weighted sums.
pub fn attend_batch<F: Real>(
    g: &mut Graph<F>,
    bound: &BoundModel,
    h: NodeId,
    n_objects: usize,
    l: usize,
) -> Result<(NodeId, NodeId)> {
    let d = g.value(h).dim(1);
    let pre = g.dense(h, bound.att_w, bound.att_b)?;
    let act = g.tanh_act(pre)?;
    let v_col = g.reshape(bound.att_v, vec![d, 1])?;
    let scores = g.matmul(act, v_col)?;
    let scores = g.reshape(scores, vec![n_objects, l])?;
    let alpha = g.softmax_rows(scores)?;
    let h_hat = g.attention_pool(h, alpha)?;
    Ok((h_hat, alpha))
}

/// Main classifier: two ReLU+BN layers then the linear output. Returns raw
/// logits.
pub fn classify_batch<F: Real>(
    g: &mut Graph<F>,
    bound: &BoundModel,
    params: &ModelParams<F>,
    h_hat: NodeId,
    updates: &mut BnUpdates<F>,
) -> Result<NodeId> {
    let eps = F::from_f64(f64::from(params.config.bn_eps));
    let momentum = F::from_f64(f64::from(params.config.bn_momentum));
    let n_encoder_slots = params.blocks.len();

    let (w1, b1, g1, be1) = bound.fc1;
    let z = g.dense(h_hat, w1, b1)?;
    let z = g.relu(z)?;
    let (z, upd) = g.batchnorm(z, g1, be1, &params.head.fc1.bn, eps, momentum)?;
    if let Some(state) = upd {
        updates.push((n_encoder_slots, state));
    }

    let (w2, b2, g2, be2) = bound.fc2;
    let z = g.dense(z, w2, b2)?;
    let z = g.relu(z)?;
    let (z, upd) = g.batchnorm(z, g2, be2, &params.head.fc2.bn, eps, momentum)?;
    if let Some(state) = upd {
        updates.push((n_encoder_slots + 1, state));
    }

    g.dense(z, bound.w_out, bound.b_out)
}

/// Auxiliary classifier: one linear map from the aggregated representation.
pub fn classify_aux_batch<F: Real>(
    g: &mut Graph<F>,
    bound: &BoundModel,
    h_hat: NodeId,
) -> Result<NodeId> {
    g.dense(h_hat, bound.w_aux, bound.b_aux)
}

/// Everything a training step needs back from the forward pass.
pub struct ForwardOutput<F: Real> {
    pub loss: NodeId,
    pub logits: NodeId,
    pub alpha: NodeId,
    pub bn_updates: BnUpdates<F>,
}

/// Stacks each object's component centroids into one `[n*l, t, bands]`
/// tensor (object-major).
pub fn stack_components<F: Real>(
    comps: &[&ComponentSet],
    t: usize,
    bands: usize,
) -> Result<Tensor<F>> {
    if comps.is_empty() {
        return Err(Error::Contract("empty component batch".into()));
    }
    let l = comps[0].l();
    let mut data = Vec::with_capacity(comps.len() * l * t * bands);
    for set in comps {
        if set.l() != l {
            return Err(Error::Contract(format!(
                "object {} has {} components, batch expects {l}",
                set.object_id,
                set.l()
            )));
        }
        for centroid in &set.centroids {
            if centroid.len() != t * bands {
                return Err(Error::Shape(format!(
                    "object {}: centroid has {} values, want {}",
                    set.object_id,
                    centroid.len(),
                    t * bands
                )));
            }
            data.extend(centroid.iter().map(|&v| F::from_f64(f64::from(v))));
        }
    }
    Tensor::new(vec![comps.len() * l, t, bands], data)
}

/// Full training-mode forward pass over a labeled batch: encode, attend,
/// classify, and combine the main and auxiliary cross-entropies as
/// `loss = ce_main + lambda * ce_aux`. With `lambda == 0` the auxiliary
/// head is not evaluated, so its parameters receive no gradient.
pub fn forward_loss<F: Real>(
    g: &mut Graph<F>,
    bound: &BoundModel,
    params: &ModelParams<F>,
    comps: &[&ComponentSet],
    labels: &[usize],
    lambda: F,
    t: usize,
    rng: &mut ChaCha8Rng,
) -> Result<ForwardOutput<F>> {
    if comps.len() != labels.len() {
        return Err(Error::Contract(format!(
            "{} component sets but {} labels",
            comps.len(),
            labels.len()
        )));
    }
    if lambda < F::zero() || lambda > F::one() {
        return Err(Error::Config("lambda must lie in [0, 1]".into()));
    }
    let l = params.config.n_components;
    let x = stack_components::<F>(comps, t, params.config.n_bands)?;
    let x = g.constant(x);
    let mut updates = BnUpdates::new();
    let h = encode_batch(g, bound, params, x, rng, &mut updates)?;
    let (h_hat, alpha) = attend_batch(g, bound, h, comps.len(), l)?;
    let logits = classify_batch(g, bound, params, h_hat, &mut updates)?;
    let ce_main = g.cross_entropy(logits, labels)?;
    let loss = if lambda > F::zero() {
        let aux_logits = classify_aux_batch(g, bound, h_hat)?;
        let ce_aux = g.cross_entropy(aux_logits, labels)?;
        let scaled = g.scale(ce_aux, lambda)?;
        g.add(ce_main, scaled)?
    } else {
        ce_main
    };
    Ok(ForwardOutput {
        loss,
        logits,
        alpha,
        bn_updates: updates,
    })
}

// ── single-object operations ────────────────────────────────────────────

/// Encodes one component (a `[t, bands]` series) into its `d`-vector.
pub fn encode<F: Real>(
    params: &ModelParams<F>,
    component: &Tensor<F>,
    mode: Mode,
) -> Result<Vec<F>> {
    if component.rank() != 2 || component.dim(1) != params.config.n_bands {
        return Err(Error::Shape(format!(
            "component must be [t, {}], got {:?}",
            params.config.n_bands,
            component.shape()
        )));
    }
    let t = component.dim(0);
    let mut g = Graph::new(mode);
    let bound = bind(&mut g, params, false);
    let x = g.constant(component.reshaped(vec![1, t, params.config.n_bands])?);
    let mut rng = rng::stream(0, "dropout", 0);
    let mut updates = BnUpdates::new();
    let h = encode_batch(&mut g, &bound, params, x, &mut rng, &mut updates)?;
    Ok(g.value(h).data().to_vec())
}

/// Attention over a set of already-encoded components; returns
/// `(h_hat, alpha)`.
pub fn attend<F: Real>(params: &ModelParams<F>, h: &[Vec<F>]) -> Result<(Vec<F>, Vec<F>)> {
    if h.is_empty() {
        return Err(Error::Contract("attend requires at least one encoding".into()));
    }
    let d = params.config.embedding_dim();
    if h.iter().any(|row| row.len() != d) {
        return Err(Error::Shape(format!("attend expects {d}-dimensional encodings")));
    }
    let mut g = Graph::new(Mode::Infer);
    let bound = bind(&mut g, params, false);
    let stacked = Tensor::new(vec![h.len(), d], h.concat())?;
    let hn = g.constant(stacked);
    let (h_hat, alpha) = attend_batch(&mut g, &bound, hn, 1, h.len())?;
    Ok((g.value(h_hat).data().to_vec(), g.value(alpha).data().to_vec()))
}

/// Main classifier over one aggregated representation; returns raw logits.
pub fn classify<F: Real>(params: &ModelParams<F>, h_hat: &[F], mode: Mode) -> Result<Vec<F>> {
    let d = params.config.embedding_dim();
    if h_hat.len() != d {
        return Err(Error::Shape(format!(
            "classify expects a {d}-vector, got {}",
            h_hat.len()
        )));
    }
    let mut g = Graph::new(mode);
    let bound = bind(&mut g, params, false);
    let x = g.constant(Tensor::new(vec![1, d], h_hat.to_vec())?);
    let mut updates = BnUpdates::new();
    let logits = classify_batch(&mut g, &bound, params, x, &mut updates)?;
    Ok(g.value(logits).data().to_vec())
}

/// Auxiliary classifier; training-time only. Calling it in infer mode is a
/// contract violation because its output is discarded at inference.
pub fn classify_aux<F: Real>(params: &ModelParams<F>, h_hat: &[F], mode: Mode) -> Result<Vec<F>> {
    if mode == Mode::Infer {
        return Err(Error::Contract(
            "the auxiliary classifier is discarded at inference time".into(),
        ));
    }
    let d = params.config.embedding_dim();
    if h_hat.len() != d {
        return Err(Error::Shape(format!(
            "classify_aux expects a {d}-vector, got {}",
            h_hat.len()
        )));
    }
    let mut g = Graph::new(mode);
    let bound = bind(&mut g, params, false);
    let x = g.constant(Tensor::new(vec![1, d], h_hat.to_vec())?);
    let logits = classify_aux_batch(&mut g, &bound, x)?;
    Ok(g.value(logits).data().to_vec())
}

/// Combined training loss over a labeled batch of component sets. Unlabeled
/// objects are a contract error.
pub fn loss(
    params: &ModelParams<f32>,
    batch: &[(&ComponentSet, Option<usize>)],
    lambda: f32,
    t: usize,
    seed: u64,
) -> Result<f32> {
    let mut comps = Vec::with_capacity(batch.len());
    let mut labels = Vec::with_capacity(batch.len());
    for (set, label) in batch {
        let y = label
            .ok_or_else(|| Error::Contract(format!("object {} has no label", set.object_id)))?;
        comps.push(*set);
        labels.push(y);
    }
    let mut g = Graph::new(Mode::Train);
    let bound = bind(&mut g, params, false);
    let mut rng = rng::stream(seed, "dropout", 0);
    let out = forward_loss(&mut g, &bound, params, &comps, &labels, lambda, t, &mut rng)?;
    Ok(g.value(out.loss).item())
}

/// Classification outcome for one object: the predicted label, the softmax
/// class scores, and the attention weights with duplicate-padded components
/// merged back onto their genuine component.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub object_id: String,
    pub label: usize,
    pub scores: Vec<f32>,
    pub alpha: Vec<f32>,
}

/// Inference on one object. Components are encoded one at a time (the graph
/// seen by each component is independent of the rest of the object), then
/// aggregated and classified in infer mode.
pub fn predict(
    params: &ModelParams<f32>,
    comps: &ComponentSet,
    t: usize,
) -> Result<PredictionRecord> {
    let l = params.config.n_components;
    if comps.l() != l {
        return Err(Error::Config(format!(
            "object {} carries {} components but the model was trained with {l}",
            comps.object_id,
            comps.l()
        )));
    }
    let bands = params.config.n_bands;
    let mut g = Graph::new(Mode::Infer);
    let bound = bind(&mut g, params, false);
    let mut rng = rng::stream(0, "dropout", 0);
    let mut updates = BnUpdates::new();

    let mut encodings = Vec::with_capacity(l);
    for centroid in &comps.centroids {
        let x = g.constant(Tensor::new(vec![1, t, bands], centroid.clone())?);
        encodings.push(encode_batch(&mut g, &bound, params, x, &mut rng, &mut updates)?);
    }
    let h = g.concat_rows(&encodings)?;
    let (h_hat, alpha) = attend_batch(&mut g, &bound, h, 1, l)?;
    let logits = classify_batch(&mut g, &bound, params, h_hat, &mut updates)?;
    let scores_node = g.softmax_rows(logits)?;

    let scores = g.value(scores_node).data().to_vec();
    let raw_alpha = g.value(alpha).data();

    // Merge the cyclically padded duplicates back onto the genuine
    // components so the weights form a distribution over real parts.
    let mut merged = vec![0.0f32; comps.effective_k];
    for (i, &a) in raw_alpha.iter().enumerate() {
        merged[comps.canonical_component(i)] += a;
    }

    let label = argmax(&scores);
    Ok(PredictionRecord {
        object_id: comps.object_id.clone(),
        label,
        scores,
        alpha: merged,
    })
}

/// Earliest index of the maximum value.
pub fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Inference over many objects; order-preserving and safe to parallelize
/// because each object builds its own graph from shared frozen parameters.
pub fn predict_all(
    params: &ModelParams<f32>,
    comps: &[ComponentSet],
    t: usize,
) -> Result<Vec<PredictionRecord>> {
    use rayon::prelude::*;
    comps.par_iter().map(|c| predict(params, c, t)).collect()
}

// ── checkpoint format ───────────────────────────────────────────────────

const CHECKPOINT_FORMAT: &str = "tassel-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointManifest {
    format: String,
    version: u32,
    config: ModelConfig,
    class_names: Vec<String>,
    norm: NormStats,
    tensors: Vec<TensorInfo>,
}

#[derive(Serialize, Deserialize)]
struct TensorInfo {
    name: String,
    shape: Vec<usize>,
}

/// Serializes the model as a one-line JSON manifest followed by a flat
/// little-endian f32 blob in manifest order. Byte-deterministic.
pub fn save_checkpoint(params: &ModelParams<f32>, path: impl AsRef<std::path::Path>) -> Result<()> {
    use std::io::Write;
    let entries = params.tensor_entries();
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        config: params.config.clone(),
        class_names: params.class_names.clone(),
        norm: params.norm.clone(),
        tensors: entries
            .iter()
            .map(|(name, _, t)| TensorInfo {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let mut w = std::io::BufWriter::new(std::fs::File::create(path.as_ref())?);
    serde_json::to_writer(&mut w, &manifest)?;
    w.write_all(b"\n")?;
    for (_, _, tensor) in &entries {
        for v in tensor.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Loads a checkpoint, rejecting unknown versions and malformed blobs.
pub fn load_checkpoint(path: impl AsRef<std::path::Path>) -> Result<ModelParams<f32>> {
    use std::io::{BufRead, Read};
    let mut r = std::io::BufReader::new(std::fs::File::open(path.as_ref())?);
    let mut line = String::new();
    r.read_line(&mut line)?;
    let manifest: CheckpointManifest = serde_json::from_str(line.trim_end())?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(Error::Schema(format!(
            "not a model checkpoint (format {:?})",
            manifest.format
        )));
    }
    if manifest.version != CHECKPOINT_VERSION {
        return Err(Error::Schema(format!(
            "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
            manifest.version
        )));
    }
    // Rebuild the skeleton, then overwrite every tensor from the blob.
    let mut params = ModelParams::<f32>::init(
        manifest.config.clone(),
        manifest.class_names.clone(),
        manifest.norm.clone(),
        0,
    )?;
    {
        let expected: Vec<(String, Vec<usize>)> = params
            .tensor_entries()
            .iter()
            .map(|(name, _, t)| (name.clone(), t.shape().to_vec()))
            .collect();
        if expected.len() != manifest.tensors.len() {
            return Err(Error::Schema(format!(
                "checkpoint lists {} tensors, architecture has {}",
                manifest.tensors.len(),
                expected.len()
            )));
        }
        for ((name, shape), info) in expected.iter().zip(&manifest.tensors) {
            if *name != info.name || *shape != info.shape {
                return Err(Error::Schema(format!(
                    "checkpoint tensor {:?} {:?} does not match architecture tensor \
                     {name:?} {shape:?}",
                    info.name, info.shape
                )));
            }
        }
    }
    let mut blob = Vec::new();
    r.read_to_end(&mut blob)?;
    let expected_len: usize = manifest
        .tensors
        .iter()
        .map(|t| t.shape.iter().product::<usize>() * 4)
        .sum();
    if blob.len() != expected_len {
        return Err(Error::Schema(format!(
            "checkpoint blob is {} bytes, manifest declares {expected_len}",
            blob.len()
        )));
    }
    let mut offset = 0;
    for tensor in all_tensors_mut(&mut params) {
        for v in tensor.data_mut() {
            *v = f32::from_le_bytes(blob[offset..offset + 4].try_into().unwrap());
            offset += 4;
        }
    }
    Ok(params)
}

/// Mutable references to every tensor (trainable and running stats) in
/// canonical order; mirrors `tensor_entries`.
fn all_tensors_mut(params: &mut ModelParams<f32>) -> Vec<&mut Tensor<f32>> {
    let mut out: Vec<&mut Tensor<f32>> = Vec::new();
    for blk in &mut params.blocks {
        out.push(&mut blk.w);
        out.push(&mut blk.b);
        out.push(&mut blk.gamma);
        out.push(&mut blk.beta);
        out.push(&mut blk.bn.mean);
        out.push(&mut blk.bn.var);
    }
    out.push(&mut params.attention.w);
    out.push(&mut params.attention.b);
    out.push(&mut params.attention.v);
    for fc in [&mut params.head.fc1, &mut params.head.fc2] {
        out.push(&mut fc.w);
        out.push(&mut fc.b);
        out.push(&mut fc.gamma);
        out.push(&mut fc.beta);
        out.push(&mut fc.bn.mean);
        out.push(&mut fc.bn.var);
    }
    out.push(&mut params.head.w_out);
    out.push(&mut params.head.b_out);
    out.push(&mut params.head.w_aux);
    out.push(&mut params.head.b_aux);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn norm(bands: usize) -> NormStats {
        NormStats {
            min: vec![0.0; bands],
            max: vec![1.0; bands],
        }
    }

    fn tiny_params(l: usize) -> ModelParams<f32> {
        let cfg = ModelConfig::new(2, 3, l).with_width_div(32); // 8/16 filters, d=32
        ModelParams::init(cfg, vec!["a".into(), "b".into(), "c".into()], norm(2), 5).unwrap()
    }

    fn component_set(id: &str, l: usize, t: usize, bands: usize, seed: u64) -> ComponentSet {
        let mut rng = rng::stream(seed, "test-comp", 0);
        ComponentSet {
            object_id: id.into(),
            centroids: (0..l)
                .map(|_| {
                    (0..t * bands)
                        .map(|_| rng.gen_range(0.0f32..1.0))
                        .collect()
                })
                .collect(),
            assignment: (0..8).map(|i| (i % l) as u32).collect(),
            effective_k: l,
            inertia: 0.0,
        }
    }

    #[test]
    fn encode_of_zero_input_is_finite_with_full_width() {
        let cfg = ModelConfig::new(4, 2, 2);
        let params =
            ModelParams::<f32>::init(cfg, vec!["a".into(), "b".into()], norm(4), 1).unwrap();
        let comp = Tensor::zeros(&[12, 4]);
        let h = encode(&params, &comp, Mode::Infer).unwrap();
        assert_eq!(h.len(), 1024);
        assert!(h.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn embedding_dim_is_independent_of_input_length() {
        let params = tiny_params(2);
        let h12 = encode(&params, &Tensor::full(&[12, 2], 0.3), Mode::Infer).unwrap();
        let h24 = encode(&params, &Tensor::full(&[24, 2], 0.3), Mode::Infer).unwrap();
        assert_eq!(h12.len(), params.config.embedding_dim());
        assert_eq!(h24.len(), params.config.embedding_dim());
    }

    #[test]
    fn encode_rejects_short_series() {
        let params = tiny_params(2);
        assert!(matches!(
            encode(&params, &Tensor::full(&[3, 2], 0.1), Mode::Infer),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn identical_components_encode_identically() {
        let params = tiny_params(2);
        let comp = Tensor::full(&[10, 2], 0.7);
        let h1 = encode(&params, &comp, Mode::Infer).unwrap();
        let h2 = encode(&params, &comp, Mode::Infer).unwrap();
        assert_eq!(h1, h2);
    }

    #[test]
    fn attend_singleton_returns_the_encoding() {
        let params = tiny_params(1);
        let d = params.config.embedding_dim();
        let h: Vec<f32> = (0..d).map(|i| i as f32 * 0.01).collect();
        let (h_hat, alpha) = attend(&params, &[h.clone()]).unwrap();
        assert_eq!(alpha, vec![1.0]);
        assert_eq!(h_hat, h);
    }

    #[test]
    fn attend_identical_encodings_split_weight_evenly() {
        let params = tiny_params(2);
        let d = params.config.embedding_dim();
        let h: Vec<f32> = (0..d).map(|i| (i as f32 * 0.37).sin()).collect();
        let (h_hat, alpha) = attend(&params, &[h.clone(), h.clone()]).unwrap();
        assert!((alpha[0] - 0.5).abs() < 1e-6);
        assert!((alpha[1] - 0.5).abs() < 1e-6);
        for (a, b) in h_hat.iter().zip(&h) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn attend_matches_independent_recomputation() {
        // Reimplements the attention formula directly from the parameters.
        let params = tiny_params(3);
        let d = params.config.embedding_dim();
        let mut rng = rng::stream(9, "attend-oracle", 0);
        let h: Vec<Vec<f32>> = (0..3)
            .map(|_| (0..d).map(|_| rng.gen_range(-1.0f32..1.0)).collect())
            .collect();
        let (h_hat, alpha) = attend(&params, &h).unwrap();

        let w = &params.attention.w;
        let bias = params.attention.b.data();
        let v = params.attention.v.data();
        let mut scores = [0.0f64; 3];
        for (li, row) in h.iter().enumerate() {
            let mut s = 0.0f64;
            for j in 0..d {
                let mut pre = f64::from(bias[j]);
                for (i, &hi) in row.iter().enumerate() {
                    pre += f64::from(hi) * f64::from(w.at2(i, j));
                }
                s += f64::from(v[j]) * pre.tanh();
            }
            scores[li] = s;
        }
        let max = scores.iter().cloned().fold(f64::MIN, f64::max);
        let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        let want_alpha: Vec<f64> = exps.iter().map(|e| e / total).collect();
        for (got, want) in alpha.iter().zip(&want_alpha) {
            assert!((f64::from(*got) - want).abs() < 1e-6);
        }
        for j in 0..d {
            let want: f64 = (0..3).map(|li| want_alpha[li] * f64::from(h[li][j])).sum();
            assert!((f64::from(h_hat[j]) - want).abs() < 1e-6);
        }
        let sum: f32 = alpha.iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
    }

    #[test]
    fn classify_shapes_and_shift_invariance_of_argmax() {
        let params = tiny_params(2);
        let d = params.config.embedding_dim();
        let h_hat: Vec<f32> = (0..d).map(|i| (i as f32 * 0.11).cos()).collect();
        let logits = classify(&params, &h_hat, Mode::Infer).unwrap();
        assert_eq!(logits.len(), 3);
        let shifted: Vec<f32> = logits.iter().map(|v| v + 5.0).collect();
        assert_eq!(argmax(&logits), argmax(&shifted));

        let again = classify(&params, &h_hat, Mode::Infer).unwrap();
        assert_eq!(logits, again);
    }

    #[test]
    fn aux_classifier_refuses_inference_mode() {
        let params = tiny_params(2);
        let d = params.config.embedding_dim();
        let h_hat = vec![0.1f32; d];
        assert!(matches!(
            classify_aux(&params, &h_hat, Mode::Infer),
            Err(Error::Contract(_))
        ));
        let logits = classify_aux(&params, &h_hat, Mode::Train).unwrap();
        assert_eq!(logits.len(), 3);
    }

    #[test]
    fn aux_logits_equal_bias_when_weights_are_zero() {
        let mut params = tiny_params(2);
        let d = params.config.embedding_dim();
        params.head.w_aux = Tensor::zeros(&[d, 3]);
        params.head.b_aux = Tensor::new(vec![3], vec![0.5, -0.25, 1.0]).unwrap();
        let h_hat = vec![0.3f32; d];
        let logits = classify_aux(&params, &h_hat, Mode::Train).unwrap();
        assert_eq!(logits, vec![0.5, -0.25, 1.0]);
    }

    #[test]
    fn loss_combines_main_and_scaled_auxiliary_cross_entropy() {
        let params = tiny_params(2);
        let a = component_set("a", 2, 8, 2, 1);
        let b = component_set("b", 2, 8, 2, 2);
        let batch = vec![(&a, Some(0)), (&b, Some(2))];
        // Same dropout seed on every call, so the parts decompose exactly.
        let l0 = loss(&params, &batch, 0.0, 8, 7).unwrap();
        let l_half = loss(&params, &batch, 0.5, 8, 7).unwrap();

        // Recompute the auxiliary part independently: run the full forward
        // once and read both cross-entropies off the graph.
        let mut g = Graph::new(Mode::Train);
        let bound = bind(&mut g, &params, false);
        let mut rng = rng::stream(7, "dropout", 0);
        let out =
            forward_loss(&mut g, &bound, &params, &[&a, &b], &[0, 2], 0.5f32, 8, &mut rng).unwrap();
        assert!((g.value(out.loss).item() - l_half).abs() < 1e-6);
        assert!(l_half >= l0 - 1e-6); // lambda * ce_aux >= 0
    }

    #[test]
    fn aux_loss_gradient_reaches_the_attention_parameters() {
        // The auxiliary head exists to push error into the aggregation
        // level: its cross-entropy must produce nonzero gradients on the
        // attention weights for generic inputs.
        let params = tiny_params(2);
        let a = component_set("a", 2, 8, 2, 31);
        let b = component_set("b", 2, 8, 2, 32);
        let mut g = Graph::new(Mode::Train);
        let bound = bind(&mut g, &params, true);
        let x = g.constant(stack_components::<f32>(&[&a, &b], 8, 2).unwrap());
        let mut rng = rng::stream(1, "dropout", 0);
        let mut updates = BnUpdates::new();
        let h = encode_batch(&mut g, &bound, &params, x, &mut rng, &mut updates).unwrap();
        let (h_hat, _) = attend_batch(&mut g, &bound, h, 2, 2).unwrap();
        let aux_logits = classify_aux_batch(&mut g, &bound, h_hat).unwrap();
        let ce_aux = g.cross_entropy(aux_logits, &[0, 1]).unwrap();
        let grads = g.backward(ce_aux).unwrap();

        let att_ids = &bound.trainable_ids()[params.blocks.len() * 4..params.blocks.len() * 4 + 3];
        for &id in att_ids {
            let grad = grads.get(id).expect("attention parameter got no gradient");
            let norm: f32 = grad.data().iter().map(|v| v * v).sum::<f32>();
            assert!(norm > 0.0, "attention gradient is exactly zero");
        }
    }

    #[test]
    fn loss_rejects_unlabeled_objects() {
        let params = tiny_params(2);
        let a = component_set("a", 2, 8, 2, 1);
        let batch = vec![(&a, None)];
        assert!(matches!(
            loss(&params, &batch, 0.5, 8, 7),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn trainable_count_is_independent_of_component_count() {
        let p2 = tiny_params(2);
        let p6 = tiny_params(6);
        assert_eq!(p2.trainable_count(), p6.trainable_count());
    }

    #[test]
    fn bound_ids_align_with_trainable_tensors() {
        let mut params = tiny_params(2);
        let mut g = Graph::new(Mode::Train);
        let bound = bind(&mut g, &params, true);
        let ids = bound.trainable_ids();
        let entries: Vec<_> = params
            .tensor_entries()
            .into_iter()
            .filter(|(_, role, _)| *role == TensorRole::Trainable)
            .map(|(name, _, t)| (name, t.shape().to_vec()))
            .collect();
        assert_eq!(ids.len(), entries.len());
        for (id, (name, shape)) in ids.iter().zip(&entries) {
            assert_eq!(g.value(*id).shape(), &shape[..], "misaligned tensor {name}");
        }
        let trainable = params.trainable_mut();
        assert_eq!(trainable.len(), ids.len());
    }

    #[test]
    fn prediction_merges_padded_alpha_and_sums_to_one() {
        let params = tiny_params(4);
        let mut set = component_set("x", 4, 8, 2, 3);
        // Simulate an object with only 2 distinct pixel groups padded to 4.
        set.effective_k = 2;
        set.centroids[2] = set.centroids[0].clone();
        set.centroids[3] = set.centroids[1].clone();
        set.assignment = vec![0, 1, 0, 1, 0, 1, 0, 1];
        let record = predict(&params, &set, 8).unwrap();
        assert_eq!(record.alpha.len(), 2);
        let sum: f32 = record.alpha.iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
        assert!(record.label < 3);
        let score_sum: f32 = record.scores.iter().sum();
        assert!((score_sum - 1.0).abs() < 1e-6);
    }

    #[test]
    fn permuting_components_permutes_alpha_and_keeps_the_label() {
        let params = tiny_params(3);
        let set = component_set("p", 3, 8, 2, 4);
        let record = predict(&params, &set, 8).unwrap();

        let mut permuted = set.clone();
        permuted.centroids = vec![
            set.centroids[2].clone(),
            set.centroids[0].clone(),
            set.centroids[1].clone(),
        ];
        let record_p = predict(&params, &permuted, 8).unwrap();
        assert_eq!(record.label, record_p.label);
        for (i, &src) in [2usize, 0, 1].iter().enumerate() {
            assert!(
                (record_p.alpha[i] - record.alpha[src]).abs() < 1e-6,
                "alpha did not permute: {:?} vs {:?}",
                record.alpha,
                record_p.alpha
            );
        }
    }

    #[test]
    fn checkpoint_round_trip_preserves_predictions_bit_for_bit() {
        let dir = tempfile::tempdir().unwrap();
        let params = tiny_params(2);
        let set = component_set("c", 2, 8, 2, 5);
        let before = predict(&params, &set, 8).unwrap();

        let path = dir.path().join("model.ckpt");
        save_checkpoint(&params, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(params, loaded);
        let after = predict(&loaded, &set, 8).unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn checkpoint_rejects_unknown_version() {
        let dir = tempfile::tempdir().unwrap();
        let params = tiny_params(2);
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&params, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let text = String::from_utf8_lossy(&bytes);
        let tampered = text.replacen("\"version\":1", "\"version\":9", 1);
        std::fs::write(&path, tampered).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Schema(_))));
    }

    #[test]
    fn predict_rejects_component_count_mismatch() {
        let params = tiny_params(2);
        let set = component_set("x", 3, 8, 2, 6);
        assert!(matches!(predict(&params, &set, 8), Err(Error::Config(_))));
    }
}
