//! Reusable gradient-check suite: each function exercises one primitive on
//! randomized shapes and values against the central finite-difference oracle
//! in `common`, returning the worst relative error seen. The acceptance
//! suite times the full bundle; the gradcheck target runs them one by one.

use rand::Rng;

use tassel_core::components::ComponentSet;
use tassel_core::data::NormStats;
use tassel_core::model::{bind, forward_loss, ModelConfig, ModelParams, TensorRole};
use tassel_core::rng::stream;
use tassel_core::tensor::graph::{BatchNormState, Graph, Mode, NodeId, Padding};
use tassel_core::tensor::Tensor;

use super::{fd_check, rand_tensor, rand_tensor_off_zero, rel_err};

pub const TOL_PRIMITIVE: f64 = 1e-4;
pub const TOL_FULL_MODEL: f64 = 1e-3;

/// Projects a node to a scalar through a fixed random weighting so that
/// every output element influences the loss differently.
fn project(g: &mut Graph<f64>, y: NodeId, w: Tensor<f64>) -> NodeId {
    let w = g.constant(w);
    let p = g.mul(y, w).unwrap();
    g.sum_all(p).unwrap()
}

pub fn check_matmul(cases: usize) -> f64 {
    let mut rng = stream(101, "gradcheck", 0);
    let mut worst = 0.0f64;
    for case in 0..cases {
        let (m, k, n) = (
            rng.gen_range(1..5),
            rng.gen_range(1..5),
            rng.gen_range(1..5),
        );
        let a = rand_tensor(&mut rng, &[m, k], -1.5, 1.5);
        let b = rand_tensor(&mut rng, &[k, n], -1.5, 1.5);
        let w = rand_tensor(&mut rng, &[m, n], -1.0, 1.0);
        worst = worst.max(fd_check(
            &format!("matmul case {case}"),
            Mode::Infer,
            &[a, b],
            TOL_PRIMITIVE,
            |g, ids| {
                let y = g.matmul(ids[0], ids[1]).unwrap();
                project(g, y, w.clone())
            },
        ));
    }
    worst
}

pub fn check_conv1d(cases: usize) -> f64 {
    let mut rng = stream(101, "gradcheck", 1);
    let mut worst = 0.0f64;
    for case in 0..cases {
        let n = rng.gen_range(1..3);
        let k = rng.gen_range(1..4);
        let t = rng.gen_range(k..9);
        let c_in = rng.gen_range(1..4);
        let c_out = rng.gen_range(1..4);
        let stride = rng.gen_range(1..3);
        let padding = if rng.gen_bool(0.5) {
            Padding::Same
        } else {
            Padding::Valid
        };
        let x = rand_tensor(&mut rng, &[n, t, c_in], -1.0, 1.0);
        let w = rand_tensor(&mut rng, &[k, c_in, c_out], -1.0, 1.0);
        let b = rand_tensor(&mut rng, &[c_out], -0.5, 0.5);
        let t_out = match padding {
            Padding::Same => t.div_ceil(stride),
            Padding::Valid => (t - k) / stride + 1,
        };
        let proj = rand_tensor(&mut rng, &[n, t_out, c_out], -1.0, 1.0);
        worst = worst.max(fd_check(
            &format!("conv1d case {case}"),
            Mode::Infer,
            &[x, w, b],
            TOL_PRIMITIVE,
            |g, ids| {
                let y = g.conv1d(ids[0], ids[1], ids[2], stride, padding).unwrap();
                project(g, y, proj.clone())
            },
        ));
    }
    worst
}

pub fn check_batchnorm(cases: usize) -> f64 {
    let mut rng = stream(101, "gradcheck", 2);
    let mut worst = 0.0f64;
    for case in 0..cases {
        let c = rng.gen_range(1..4);
        let train = case % 2 == 0;
        let mode = if train { Mode::Train } else { Mode::Infer };
        let shape = if case % 4 < 2 {
            vec![rng.gen_range(2..6), c]
        } else {
            vec![rng.gen_range(1..4), rng.gen_range(2..5), c]
        };
        let x = rand_tensor(&mut rng, &shape, -2.0, 2.0);
        let gamma = rand_tensor(&mut rng, &[c], 0.5, 1.5);
        let beta = rand_tensor(&mut rng, &[c], -0.5, 0.5);
        let state = BatchNormState {
            mean: rand_tensor(&mut rng, &[c], -0.5, 0.5),
            var: rand_tensor(&mut rng, &[c], 0.5, 2.0),
        };
        let proj = rand_tensor(&mut rng, &shape, -1.0, 1.0);
        worst = worst.max(fd_check(
            &format!("batchnorm case {case}"),
            mode,
            &[x, gamma, beta],
            TOL_PRIMITIVE,
            |g, ids| {
                let (y, _) = g
                    .batchnorm(ids[0], ids[1], ids[2], &state, 1e-5, 0.9)
                    .unwrap();
                project(g, y, proj.clone())
            },
        ));
    }
    worst
}

pub fn check_elementwise(cases: usize) -> f64 {
    let mut rng = stream(101, "gradcheck", 3);
    let mut worst = 0.0f64;
    for case in 0..cases {
        let shape = vec![rng.gen_range(1..4), rng.gen_range(1..5)];
        let proj = rand_tensor(&mut rng, &shape, -1.0, 1.0);

        let x = rand_tensor_off_zero(&mut rng, &shape);
        worst = worst.max(fd_check(
            &format!("relu case {case}"),
            Mode::Infer,
            &[x],
            TOL_PRIMITIVE,
            |g, ids| {
                let y = g.relu(ids[0]).unwrap();
                project(g, y, proj.clone())
            },
        ));

        let x = rand_tensor(&mut rng, &shape, -2.0, 2.0);
        worst = worst.max(fd_check(
            &format!("tanh case {case}"),
            Mode::Infer,
            &[x],
            TOL_PRIMITIVE,
            |g, ids| {
                let y = g.tanh_act(ids[0]).unwrap();
                project(g, y, proj.clone())
            },
        ));

        let x = rand_tensor(&mut rng, &shape, -3.0, 3.0);
        worst = worst.max(fd_check(
            &format!("softmax case {case}"),
            Mode::Infer,
            &[x],
            TOL_PRIMITIVE,
            |g, ids| {
                let y = g.softmax_rows(ids[0]).unwrap();
                project(g, y, proj.clone())
            },
        ));

        let a = rand_tensor(&mut rng, &shape, -2.0, 2.0);
        let b = rand_tensor(&mut rng, &shape, -2.0, 2.0);
        worst = worst.max(fd_check(
            &format!("add/mul/scale case {case}"),
            Mode::Infer,
            &[a, b],
            TOL_PRIMITIVE,
            |g, ids| {
                let s = g.add(ids[0], ids[1]).unwrap();
                let p = g.mul(s, ids[1]).unwrap();
                let sc = g.scale(p, 0.7).unwrap();
                project(g, sc, proj.clone())
            },
        ));

        let x = rand_tensor(&mut rng, &shape, -2.0, 2.0);
        let bias = rand_tensor(&mut rng, &[shape[1]], -1.0, 1.0);
        worst = worst.max(fd_check(
            &format!("add_bias case {case}"),
            Mode::Infer,
            &[x, bias],
            TOL_PRIMITIVE,
            |g, ids| {
                let y = g.add_bias(ids[0], ids[1]).unwrap();
                project(g, y, proj.clone())
            },
        ));
    }
    worst
}

pub fn check_pooling_concat_reshape(cases: usize) -> f64 {
    let mut rng = stream(101, "gradcheck", 4);
    let mut worst = 0.0f64;
    for case in 0..cases {
        let (n, t, c) = (
            rng.gen_range(1..3),
            rng.gen_range(1..5),
            rng.gen_range(1..4),
        );
        let x = rand_tensor(&mut rng, &[n, t, c], -2.0, 2.0);
        let proj = rand_tensor(&mut rng, &[n, c], -1.0, 1.0);
        worst = worst.max(fd_check(
            &format!("gap case {case}"),
            Mode::Infer,
            &[x],
            TOL_PRIMITIVE,
            |g, ids| {
                let y = g.global_avg_pool(ids[0]).unwrap();
                project(g, y, proj.clone())
            },
        ));

        let c2 = rng.gen_range(1..4);
        let a = rand_tensor(&mut rng, &[n, t, c], -2.0, 2.0);
        let b = rand_tensor(&mut rng, &[n, t, c2], -2.0, 2.0);
        let proj = rand_tensor(&mut rng, &[n, t, c + c2], -1.0, 1.0);
        worst = worst.max(fd_check(
            &format!("concat_channels case {case}"),
            Mode::Infer,
            &[a, b],
            TOL_PRIMITIVE,
            |g, ids| {
                let y = g.concat_channels(ids[0], ids[1]).unwrap();
                project(g, y, proj.clone())
            },
        ));

        let rows_a = rng.gen_range(1..3);
        let rows_b = rng.gen_range(1..3);
        let d = rng.gen_range(1..4);
        let a = rand_tensor(&mut rng, &[rows_a, d], -2.0, 2.0);
        let b = rand_tensor(&mut rng, &[rows_b, d], -2.0, 2.0);
        let proj = rand_tensor(&mut rng, &[(rows_a + rows_b) * d], -1.0, 1.0);
        worst = worst.max(fd_check(
            &format!("concat_rows case {case}"),
            Mode::Infer,
            &[a, b],
            TOL_PRIMITIVE,
            |g, ids| {
                let y = g.concat_rows(&[ids[0], ids[1]]).unwrap();
                let flat = g.reshape(y, vec![(rows_a + rows_b) * d]).unwrap();
                project(g, flat, proj.clone())
            },
        ));
    }
    worst
}

pub fn check_attention_pool(cases: usize) -> f64 {
    let mut rng = stream(101, "gradcheck", 5);
    let mut worst = 0.0f64;
    for case in 0..cases {
        let (n_obj, l, d) = (
            rng.gen_range(1..3),
            rng.gen_range(1..4),
            rng.gen_range(1..5),
        );
        let h = rand_tensor(&mut rng, &[n_obj * l, d], -2.0, 2.0);
        let alpha = rand_tensor(&mut rng, &[n_obj, l], 0.05, 1.0);
        let proj = rand_tensor(&mut rng, &[n_obj, d], -1.0, 1.0);
        worst = worst.max(fd_check(
            &format!("attention_pool case {case}"),
            Mode::Infer,
            &[h, alpha],
            TOL_PRIMITIVE,
            |g, ids| {
                let y = g.attention_pool(ids[0], ids[1]).unwrap();
                project(g, y, proj.clone())
            },
        ));
    }
    worst
}

pub fn check_cross_entropy(cases: usize) -> f64 {
    let mut rng = stream(101, "gradcheck", 6);
    let mut worst = 0.0f64;
    for case in 0..cases {
        let (n, c) = (rng.gen_range(1..5), rng.gen_range(2..5));
        let logits = rand_tensor(&mut rng, &[n, c], -2.0, 2.0);
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..c)).collect();
        worst = worst.max(fd_check(
            &format!("cross_entropy case {case}"),
            Mode::Infer,
            &[logits],
            TOL_PRIMITIVE,
            |g, ids| g.cross_entropy(ids[0], &labels).unwrap(),
        ));
    }
    worst
}

pub fn check_dropout(cases: usize) -> f64 {
    let mut rng = stream(101, "gradcheck", 7);
    let mut worst = 0.0f64;
    for case in 0..cases {
        let shape = vec![rng.gen_range(1..4), rng.gen_range(1..6)];
        let x = rand_tensor(&mut rng, &shape, -2.0, 2.0);
        let proj = rand_tensor(&mut rng, &shape, -1.0, 1.0);
        let mask_seed = rng.gen::<u64>();
        worst = worst.max(fd_check(
            &format!("dropout case {case}"),
            Mode::Train,
            &[x],
            TOL_PRIMITIVE,
            |g, ids| {
                // Same seed on every call so finite differences see the
                // same mask as the analytic pass.
                let mut mask_rng = stream(mask_seed, "dropout", 0);
                let y = g.dropout(ids[0], 0.4, &mut mask_rng).unwrap();
                project(g, y, proj.clone())
            },
        ));
    }
    worst
}

pub fn check_dense(cases: usize) -> f64 {
    let mut rng = stream(101, "gradcheck", 8);
    let mut worst = 0.0f64;
    for case in 0..cases {
        let (n, fin, fout) = (
            rng.gen_range(1..4),
            rng.gen_range(1..5),
            rng.gen_range(1..5),
        );
        let x = rand_tensor(&mut rng, &[n, fin], -1.5, 1.5);
        let w = rand_tensor(&mut rng, &[fin, fout], -1.5, 1.5);
        let b = rand_tensor(&mut rng, &[fout], -0.5, 0.5);
        let proj = rand_tensor(&mut rng, &[n, fout], -1.0, 1.0);
        worst = worst.max(fd_check(
            &format!("dense case {case}"),
            Mode::Infer,
            &[x, w, b],
            TOL_PRIMITIVE,
            |g, ids| {
                let y = g.dense(ids[0], ids[1], ids[2]).unwrap();
                project(g, y, proj.clone())
            },
        ));
    }
    worst
}

/// End-to-end check: every trainable parameter of the full network (filters
/// scaled down 8x) against central finite differences on the combined loss,
/// dropout masks replayed, in the f64 shadow path. Returns the worst
/// relative error.
pub fn check_full_model() -> f64 {
    let t = 6usize;
    let bands = 2usize;
    let l = 2usize;
    let cfg = ModelConfig::new(bands, 2, l)
        .with_width_div(8)
        .with_dropout(0.3);
    let norm = NormStats {
        min: vec![0.0; bands],
        max: vec![1.0; bands],
    };
    let mut params = ModelParams::<f64>::init(cfg, vec!["x".into(), "y".into()], norm, 21).unwrap();

    let mut data_rng = stream(22, "gradcheck-e2e", 0);
    let comps: Vec<ComponentSet> = (0..2)
        .map(|i| ComponentSet {
            object_id: format!("o{i}"),
            centroids: (0..l)
                .map(|_| {
                    (0..t * bands)
                        .map(|_| data_rng.gen_range(0.0f32..1.0))
                        .collect()
                })
                .collect(),
            assignment: vec![0, 1],
            effective_k: l,
            inertia: 0.0,
        })
        .collect();
    let comp_refs: Vec<&ComponentSet> = comps.iter().collect();
    let labels = [0usize, 1];
    let lambda = 0.5f64;

    let eval = |p: &ModelParams<f64>| -> f64 {
        let mut g = Graph::new(Mode::Train);
        let bound = bind(&mut g, p, false);
        let mut mask_rng = stream(77, "dropout", 0);
        let out =
            forward_loss(&mut g, &bound, p, &comp_refs, &labels, lambda, t, &mut mask_rng).unwrap();
        g.value(out.loss).item()
    };

    // Analytic gradients.
    let mut g = Graph::new(Mode::Train);
    let bound = bind(&mut g, &params, true);
    let mut mask_rng = stream(77, "dropout", 0);
    let out = forward_loss(
        &mut g, &bound, &params, &comp_refs, &labels, lambda, t, &mut mask_rng,
    )
    .unwrap();
    let grads = g.backward(out.loss).unwrap();
    let ids = bound.trainable_ids();
    let analytic: Vec<Tensor<f64>> = ids
        .iter()
        .map(|id| {
            grads
                .get(*id)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(g.value(*id).shape()))
        })
        .collect();
    let names: Vec<String> = params
        .tensor_entries()
        .into_iter()
        .filter(|(_, role, _)| *role == TensorRole::Trainable)
        .map(|(name, _, _)| name)
        .collect();
    assert_eq!(names.len(), analytic.len());

    // Small step: f64 keeps truncation noise negligible while making relu
    // kink crossings (which bias the difference quotient) vanishingly rare.
    let h = 1e-6;
    let mut worst = 0.0f64;
    for ti in 0..analytic.len() {
        for ei in 0..analytic[ti].len() {
            let orig = params.trainable_mut()[ti].data()[ei];
            params.trainable_mut()[ti].data_mut()[ei] = orig + h;
            let up = eval(&params);
            params.trainable_mut()[ti].data_mut()[ei] = orig - h;
            let down = eval(&params);
            params.trainable_mut()[ti].data_mut()[ei] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[ti].data()[ei];
            let err = rel_err(a, numeric);
            assert!(
                err < TOL_FULL_MODEL,
                "{} elem {ei}: analytic {a} vs numeric {numeric} (rel err {err:.3e})",
                names[ti]
            );
            worst = worst.max(err);
        }
    }
    worst
}
