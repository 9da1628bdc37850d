//! Acceptance suite: one test per release criterion, each printing a
//! PASS line with its runtime (visible with `--nocapture`).
//!
//! The long-running criteria (training trends, swap semantics, resume)
//! share a single default-config desk run through a `OnceLock`.

use faceswap::attention::{cross_attention, self_attention, AttentionParams};
use faceswap::datasynth::{render, sample_dataset};
use faceswap::discriminator::{Discriminator, DiscriminatorConfig};
use faceswap::embedder::{
    identity_separation, pretrain_embedder, Embedder, EmbedderConfig, REQUIRED_SEPARATION,
};
use faceswap::generator::{Generator, GeneratorConfig};
use faceswap::harness::{
    ablate, eval_checkpoint_detailed, prepare_shared_embedder, read_metrics, run_ablation_entry,
    train, Checkpoint, MetricRow, TrainConfig, TrainOptions, ATTENTION_ROWS, LR_ROWS,
    METRIC_HEADER, WEIGHTING_ROWS,
};
use faceswap::losses::{
    feature_matching_loss, hinge_d_loss, hinge_g_loss, identity_loss, reconstruction_loss,
    total_generator_loss, GeneratorLossParts, LossWeights,
};
use faceswap::metrics::frechet_from_features;
use faceswap::nn::ParamSet;
use faceswap::rng::Frng;
use faceswap::schedules::{lambda_id_at, lambda_rec_at, lr_at, ScheduleState};
use faceswap::tensor::gradcheck::{grad_check, grad_check_sampled};
use faceswap::tensor::{
    add, add_channel_bias, add_scalar, avg_pool2d, concat, conv2d, cosine_similarity, div,
    instance_norm, l1_mean, l2_normalize, leaky_relu, matmul, mul, reduce_mean, reduce_sum,
    reshape, scale, softmax_rows, spatial_mean, sqrt, sub, tanh, transpose, upsample_nearest,
    Tensor,
};
use std::path::PathBuf;
use std::sync::OnceLock;
use std::time::Instant;

const FD_STEP: f64 = 1e-5;
const OP_TOL: f64 = 1e-4;
const E2E_TOL: f64 = 1e-3;
const ORACLE_TOL: f64 = 1e-10;

fn report(number: usize, name: &str, t0: Instant) {
    println!(
        "criterion {number} ({name}): PASS [{:.1}s]",
        t0.elapsed().as_secs_f64()
    );
}

fn tmp_dir(name: &str) -> PathBuf {
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join(name);
    std::fs::remove_dir_all(&dir).ok();
    dir
}

// ---------------------------------------------------------------------------
// Shared desk-scale run (criteria 4, 5, 7)
// ---------------------------------------------------------------------------

struct DeskRun {
    out: PathBuf,
    metrics_path: PathBuf,
    final_checkpoint: PathBuf,
    rows: Vec<MetricRow>,
    wall_seconds: f64,
}

static DESK: OnceLock<DeskRun> = OnceLock::new();

fn desk_run() -> &'static DeskRun {
    DESK.get_or_init(|| {
        let cfg = TrainConfig::default();
        let out = tmp_dir("desk_run");
        let t0 = Instant::now();
        let outcome = train(&cfg, &out, &TrainOptions::default()).expect("desk run");
        let wall_seconds = t0.elapsed().as_secs_f64();
        let rows = read_metrics(&outcome.metrics_path).expect("metric log");
        DeskRun {
            out,
            metrics_path: outcome.metrics_path,
            final_checkpoint: outcome.checkpoint_path,
            rows,
            wall_seconds,
        }
    })
}

// ---------------------------------------------------------------------------
// Random-instance helpers
// ---------------------------------------------------------------------------

fn rand_vec(rng: &mut Frng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.normal()).collect()
}

/// Normal draws pushed away from zero by `margin` (kink avoidance).
fn rand_vec_away_from_zero(rng: &mut Frng, n: usize, margin: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let v = rng.normal();
            v.signum() * (v.abs() + margin)
        })
        .collect()
}

fn param(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
    Tensor::param(shape, data).unwrap()
}

/// Scalar "probe" loss: weighted sum with fixed random weights, so every
/// output coordinate influences the root.
fn probe_loss(out: &Tensor<f64>, rng: &mut Frng) -> Tensor<f64> {
    let w = Tensor::from_vec(&[out.numel()], rand_vec(rng, out.numel())).unwrap();
    let flat = reshape(out, &[out.numel()]).unwrap();
    reduce_sum(&mul(&flat, &w).unwrap())
}

fn assert_grad(name: &str, err: f64, tol: f64) {
    assert!(err < tol, "{name}: max relative error {err} >= {tol}");
}

// ---------------------------------------------------------------------------
// Criterion 1: gradient correctness
// ---------------------------------------------------------------------------

#[test]
fn criterion_1_gradient_correctness() {
    let t0 = Instant::now();
    let instances = 20;

    // Elementwise and reduction ops.
    for i in 0..instances {
        let mut rng = Frng::from_seed(1000 + i);
        let n = 4 + (i as usize % 5);
        let a = param(&[n], rand_vec(&mut rng, n));
        let b = param(&[n], rand_vec_away_from_zero(&mut rng, n, 0.3));
        let mut probe_rng = Frng::from_seed(2000 + i);

        let checks: Vec<(&str, f64)> = vec![
            ("add", {
                let r = Frng::from_seed(3000 + i);
                grad_check(
                    |x| Ok(probe_loss(&add(&x[0], &x[1])?, &mut r.clone())),
                    &[a.clone(), b.clone()],
                    FD_STEP,
                )
                .unwrap()
            }),
            ("sub", {
                let r = Frng::from_seed(3100 + i);
                grad_check(
                    |x| Ok(probe_loss(&sub(&x[0], &x[1])?, &mut r.clone())),
                    &[a.clone(), b.clone()],
                    FD_STEP,
                )
                .unwrap()
            }),
            ("mul", {
                let r = Frng::from_seed(3200 + i);
                grad_check(
                    |x| Ok(probe_loss(&mul(&x[0], &x[1])?, &mut r.clone())),
                    &[a.clone(), b.clone()],
                    FD_STEP,
                )
                .unwrap()
            }),
            ("div", {
                let r = Frng::from_seed(3300 + i);
                grad_check(
                    |x| Ok(probe_loss(&div(&x[0], &x[1])?, &mut r.clone())),
                    &[a.clone(), b.clone()],
                    FD_STEP,
                )
                .unwrap()
            }),
            ("scale/add_scalar", {
                grad_check(
                    |x| Ok(reduce_sum(&add_scalar(&scale(&x[0], -1.7), 0.4))),
                    std::slice::from_ref(&a),
                    FD_STEP,
                )
                .unwrap()
            }),
            ("tanh", {
                let r = Frng::from_seed(3400 + i);
                grad_check(
                    |x| Ok(probe_loss(&tanh(&x[0]), &mut r.clone())),
                    std::slice::from_ref(&a),
                    FD_STEP,
                )
                .unwrap()
            }),
            ("abs", {
                let away = param(&[n], rand_vec_away_from_zero(&mut rng, n, 0.2));
                let r = Frng::from_seed(3500 + i);
                grad_check(
                    |x| Ok(probe_loss(&faceswap::tensor::abs(&x[0]), &mut r.clone())),
                    &[away],
                    FD_STEP,
                )
                .unwrap()
            }),
            ("sqrt", {
                let pos = param(
                    &[n],
                    rand_vec(&mut rng, n)
                        .iter()
                        .map(|v| v.abs() + 0.2)
                        .collect(),
                );
                let r = Frng::from_seed(3600 + i);
                grad_check(
                    |x| Ok(probe_loss(&sqrt(&x[0]), &mut r.clone())),
                    &[pos],
                    FD_STEP,
                )
                .unwrap()
            }),
            ("leaky_relu", {
                let away = param(&[n], rand_vec_away_from_zero(&mut rng, n, 0.2));
                let r = Frng::from_seed(3700 + i);
                grad_check(
                    |x| Ok(probe_loss(&leaky_relu(&x[0], 0.2), &mut r.clone())),
                    &[away],
                    FD_STEP,
                )
                .unwrap()
            }),
            ("reduce_sum", {
                grad_check(|x| Ok(reduce_sum(&x[0])), std::slice::from_ref(&a), FD_STEP).unwrap()
            }),
            ("reduce_mean", {
                grad_check(|x| Ok(reduce_mean(&x[0])), std::slice::from_ref(&a), FD_STEP).unwrap()
            }),
            ("scalar_broadcast", {
                let s = param(&[], vec![rng.normal() + 2.0]);
                let r = Frng::from_seed(3800 + i);
                grad_check(
                    |x| {
                        Ok(probe_loss(
                            &div(&mul(&x[0], &x[1])?, &x[1])?,
                            &mut r.clone(),
                        ))
                    },
                    &[a.clone(), s],
                    FD_STEP,
                )
                .unwrap()
            }),
            (
                "probe_consistency",
                probe_loss(&a, &mut probe_rng).item().abs() * 0.0,
            ),
        ];
        for (name, err) in checks {
            assert_grad(name, err, OP_TOL);
        }
    }

    // Shape ops.
    for i in 0..instances {
        let mut rng = Frng::from_seed(1100 + i);
        let x = param(&[2, 3], rand_vec(&mut rng, 6));
        let y = param(&[2, 3], rand_vec(&mut rng, 6));
        let r = Frng::from_seed(4000 + i);
        let err = grad_check(
            |ins| {
                let t = transpose(&ins[0])?;
                let rsh = reshape(&t, &[6])?;
                let cat = concat(&[reshape(&ins[1], &[6])?, rsh], 0)?;
                Ok(probe_loss(&cat, &mut r.clone()))
            },
            &[x, y],
            FD_STEP,
        )
        .unwrap();
        assert_grad("transpose/reshape/concat", err, OP_TOL);
    }

    // matmul.
    for i in 0..instances {
        let mut rng = Frng::from_seed(1200 + i);
        let (m, k, n) = (
            2 + i as usize % 3,
            2 + (i as usize / 3) % 3,
            2 + i as usize % 2,
        );
        let a = param(&[m, k], rand_vec(&mut rng, m * k));
        let b = param(&[k, n], rand_vec(&mut rng, k * n));
        let r = Frng::from_seed(4100 + i);
        let err = grad_check(
            |ins| Ok(probe_loss(&matmul(&ins[0], &ins[1])?, &mut r.clone())),
            &[a, b],
            FD_STEP,
        )
        .unwrap();
        assert_grad("matmul", err, OP_TOL);
    }

    // conv2d + channel bias.
    for i in 0..instances {
        let mut rng = Frng::from_seed(1300 + i);
        let (ci, co) = (1 + i as usize % 2, 1 + (i as usize / 2) % 2);
        let (kh, stride, pad) = (
            [1usize, 2, 3][i as usize % 3],
            1 + i as usize % 2,
            i as usize % 2,
        );
        let (h, w) = (4 + i as usize % 2, 4);
        if h + 2 * pad < kh {
            continue;
        }
        let x = param(&[ci, h, w], rand_vec(&mut rng, ci * h * w));
        let kk = param(&[co, ci, kh, kh], rand_vec(&mut rng, co * ci * kh * kh));
        let bias = param(&[co], rand_vec(&mut rng, co));
        let r = Frng::from_seed(4200 + i);
        let err = grad_check(
            |ins| {
                let c = conv2d(&ins[0], &ins[1], stride, pad)?;
                Ok(probe_loss(&add_channel_bias(&c, &ins[2])?, &mut r.clone()))
            },
            &[x, kk, bias],
            FD_STEP,
        )
        .unwrap();
        assert_grad("conv2d", err, OP_TOL);
    }

    // Normalization, modulation, resampling, softmax.
    for i in 0..instances {
        let mut rng = Frng::from_seed(1400 + i);
        let (c, h, w) = (2, 3, 3);
        let x = param(&[c, h, w], rand_vec(&mut rng, c * h * w));
        let sc = param(&[c], rand_vec_away_from_zero(&mut rng, c, 0.2));
        let sh = param(&[c], rand_vec(&mut rng, c));
        let r = Frng::from_seed(4300 + i);
        let err = grad_check(
            |ins| {
                let normed = instance_norm(&ins[0], 1e-5)?;
                let modulated = faceswap::tensor::channel_affine(&normed, &ins[1], &ins[2])?;
                let up = upsample_nearest(&modulated, 2)?;
                let down = avg_pool2d(&up, 3)?;
                Ok(probe_loss(&down, &mut r.clone()))
            },
            &[x.clone(), sc, sh],
            FD_STEP,
        )
        .unwrap();
        assert_grad("instance_norm/channel_affine/resample", err, OP_TOL);

        let logits = param(&[3, 4], rand_vec(&mut rng, 12));
        let r2 = Frng::from_seed(4400 + i);
        let err = grad_check(
            |ins| Ok(probe_loss(&softmax_rows(&ins[0])?, &mut r2.clone())),
            &[logits],
            FD_STEP,
        )
        .unwrap();
        assert_grad("softmax_rows", err, OP_TOL);

        let mean_err =
            grad_check(|ins| Ok(reduce_sum(&spatial_mean(&ins[0])?)), &[x], FD_STEP).unwrap();
        assert_grad("spatial_mean", mean_err, OP_TOL);
    }

    // Vector composites.
    for i in 0..instances {
        let mut rng = Frng::from_seed(1500 + i);
        let u = param(&[5], rand_vec_away_from_zero(&mut rng, 5, 0.1));
        let v = param(&[5], rand_vec_away_from_zero(&mut rng, 5, 0.1));
        let err = grad_check(
            |ins| cosine_similarity(&ins[0], &ins[1]),
            &[u.clone(), v.clone()],
            FD_STEP,
        )
        .unwrap();
        assert_grad("cosine_similarity", err, OP_TOL);
        let r = Frng::from_seed(4500 + i);
        let err = grad_check(
            |ins| Ok(probe_loss(&l2_normalize(&ins[0])?, &mut r.clone())),
            &[u],
            FD_STEP,
        )
        .unwrap();
        assert_grad("l2_normalize", err, OP_TOL);
    }

    // Attention blocks.
    for i in 0..instances {
        let mut rng = Frng::from_seed(1600 + i);
        let mut ps: ParamSet<f64> = ParamSet::new();
        let p = AttentionParams::new(&mut ps, "attn", 3, 0, true, true, &mut rng).unwrap();
        p.gamma.as_ref().unwrap().set_data(vec![0.6]).unwrap();
        let x = param(&[3, 2, 2], rand_vec(&mut rng, 12));
        let xs = param(&[3, 2, 1], rand_vec(&mut rng, 6));
        let mut leaves = vec![x.clone(), xs.clone()];
        for (_, t) in ps.iter() {
            leaves.push(t.clone());
        }
        let r = Frng::from_seed(4600 + i);
        let err = grad_check(
            |ins| Ok(probe_loss(&self_attention(&ins[0], &p)?, &mut r.clone())),
            &leaves,
            FD_STEP,
        )
        .unwrap();
        assert_grad("self_attention", err, OP_TOL);
        let r2 = Frng::from_seed(4700 + i);
        let err = grad_check(
            |ins| {
                Ok(probe_loss(
                    &cross_attention(&ins[0], &ins[1], &p)?,
                    &mut r2.clone(),
                ))
            },
            &leaves,
            FD_STEP,
        )
        .unwrap();
        assert_grad("cross_attention", err, OP_TOL);
    }

    // Losses.
    for i in 0..instances {
        let mut rng = Frng::from_seed(1700 + i);
        let e1 = param(&[6], rand_vec_away_from_zero(&mut rng, 6, 0.1));
        let e2 = param(&[6], rand_vec_away_from_zero(&mut rng, 6, 0.1));
        let err = grad_check(
            |ins| identity_loss(&ins[0], &ins[1]),
            &[e1.clone(), e2.clone()],
            FD_STEP,
        )
        .unwrap();
        assert_grad("identity_loss", err, OP_TOL);

        let img_a = param(&[3, 3, 3], rand_vec(&mut rng, 27));
        let img_b = param(&[3, 3, 3], rand_vec(&mut rng, 27));
        let err = grad_check(
            |ins| reconstruction_loss(&ins[0], &ins[1]),
            &[img_a.clone(), img_b.clone()],
            FD_STEP,
        )
        .unwrap();
        assert_grad("reconstruction_loss", err, OP_TOL);

        let fr = param(&[2, 3], rand_vec(&mut rng, 6));
        let ff = param(&[2, 3], rand_vec(&mut rng, 6));
        let fr2 = param(&[4], rand_vec(&mut rng, 4));
        let ff2 = param(&[4], rand_vec(&mut rng, 4));
        let err = grad_check(
            |ins| {
                feature_matching_loss(
                    &[ins[0].clone(), ins[2].clone()],
                    &[ins[1].clone(), ins[3].clone()],
                )
            },
            &[fr, ff, fr2, ff2],
            FD_STEP,
        )
        .unwrap();
        assert_grad("feature_matching_loss", err, OP_TOL);

        // Hinge losses away from the kinks at +-1.
        let kink_free = |rng: &mut Frng, n: usize, kink: f64| -> Vec<f64> {
            (0..n)
                .map(|_| {
                    let mut v = rng.uniform_in(-3.0, 3.0);
                    while (v - kink).abs() < 0.05 {
                        v = rng.uniform_in(-3.0, 3.0);
                    }
                    v
                })
                .collect()
        };
        let sr = param(&[1, 2, 2], kink_free(&mut rng, 4, 1.0));
        let sf = param(&[1, 2, 2], kink_free(&mut rng, 4, -1.0));
        let err = grad_check(
            |ins| hinge_d_loss(&[ins[0].clone()], &[ins[1].clone()]),
            &[sr, sf.clone()],
            FD_STEP,
        )
        .unwrap();
        assert_grad("hinge_d_loss", err, OP_TOL);
        let err = grad_check(|ins| hinge_g_loss(&[ins[0].clone()]), &[sf], FD_STEP).unwrap();
        assert_grad("hinge_g_loss", err, OP_TOL);

        // Weighted total over live parts.
        let base = param(&[4], rand_vec(&mut rng, 4));
        let aux = param(&[4], rand_vec(&mut rng, 4));
        let w = LossWeights::new(3.0, 10.0, 2.0).unwrap();
        let err = grad_check(
            |ins| {
                let parts = GeneratorLossParts {
                    adv: reduce_mean(&ins[0]),
                    id: identity_loss(&ins[0], &ins[1])?,
                    feat: l1_mean(&ins[0], &ins[1])?,
                    rec: Some(reduce_mean(&mul(&ins[1], &ins[1])?)),
                };
                Ok(total_generator_loss(&parts, &w, true)?.0)
            },
            &[base, aux],
            FD_STEP,
        )
        .unwrap();
        assert_grad("total_generator_loss", err, OP_TOL);
    }

    // Full-model end-to-end check on a micro configuration.
    e2e_micro_model_gradcheck();

    let elapsed = t0.elapsed().as_secs_f64();
    assert!(elapsed < 120.0, "criterion 1 took {elapsed}s, budget 120s");
    report(1, "gradient correctness", t0);
}

fn e2e_micro_model_gradcheck() {
    let gen_cfg = GeneratorConfig {
        image_size: 8,
        base_channels: 2,
        n_downsamples: 1,
        n_res_blocks: 2,
        use_self_attention: true,
        use_cross_attention: true,
        id_dim: 6,
        d_k: 0,
    };
    let disc_cfg = DiscriminatorConfig {
        n_scales: 1,
        n_layers: 1,
        base_channels: 3,
        leaky_slope: 0.2,
    };
    let emb_cfg = EmbedderConfig {
        id_dim: 6,
        base_channels: 2,
        image_size: 8,
    };
    let mut rng = Frng::from_seed(77);
    let generator: Generator<f64> = Generator::new(gen_cfg, &mut rng).unwrap();
    let discriminator: Discriminator<f64> = Discriminator::new(disc_cfg, 8, &mut rng).unwrap();
    let embedder: Embedder<f64> = Embedder::new(emb_cfg, &mut rng).unwrap();
    let frozen = embedder.frozen();

    // Wake up the gated paths so the check covers them.
    for (name, t) in generator.params.iter() {
        if name.contains("gamma") {
            t.set_data(vec![0.4]).unwrap();
        } else if name.contains("inj") {
            let mut d = t.data().clone();
            for v in d.iter_mut() {
                *v += 0.15 * rng.normal();
            }
            t.set_data(d).unwrap();
        }
    }

    let i_s = Tensor::from_vec(
        &[3, 8, 8],
        (0..192).map(|_| rng.uniform_in(-0.9, 0.9)).collect(),
    )
    .unwrap();
    let i_t = Tensor::from_vec(
        &[3, 8, 8],
        (0..192).map(|_| rng.uniform_in(-0.9, 0.9)).collect(),
    )
    .unwrap();
    let weights = LossWeights::new(5.0, 10.0, 2.0).unwrap();

    let mut leaves: Vec<Tensor<f64>> = Vec::new();
    for (_, t) in generator.params.iter() {
        leaves.push(t.clone());
    }
    for (_, t) in discriminator.params.iter() {
        leaves.push(t.clone());
    }

    // The real-image features are detached targets: the training gradient
    // treats them as constants, so the probe function must too (otherwise
    // the finite difference would see them move with the critic's weights).
    let fr_const: Vec<Tensor<f64>> = {
        let (_, fr) = discriminator.discriminate(&i_t).unwrap();
        fr.iter().map(|t| t.detach()).collect()
    };
    let f = |_: &[Tensor<f64>]| -> faceswap::Result<Tensor<f64>> {
        let e_src = frozen.embed(&i_s)?;
        let fake = generator.forward(&i_s, &i_t, &e_src)?;
        let (sf, ff) = discriminator.discriminate(&fake)?;
        let parts = GeneratorLossParts {
            adv: hinge_g_loss(&sf)?,
            id: identity_loss(&e_src, &frozen.embed(&fake)?)?,
            feat: feature_matching_loss(&fr_const, &ff)?,
            rec: Some(reconstruction_loss(&i_t, &fake)?),
        };
        Ok(total_generator_loss(&parts, &weights, true)?.0)
    };

    let mut coord_rng = Frng::from_seed(99);
    let err = grad_check_sampled(f, &leaves, FD_STEP, 3, &mut coord_rng).unwrap();
    assert_grad("full-model micro graph", err, E2E_TOL);
}

// ---------------------------------------------------------------------------
// Criterion 2: oracle equivalence
// ---------------------------------------------------------------------------

fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                c[i * n + j] += a[i * k + p] * b[p * n + j];
            }
        }
    }
    c
}

#[allow(clippy::too_many_arguments)]
fn naive_conv(
    x: &[f64],
    ker: &[f64],
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; co * oh * ow];
    for o in 0..co {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for c in 0..ci {
                    for dy in 0..kh {
                        for dx in 0..kw {
                            let iy = (oy * stride + dy) as isize - pad as isize;
                            let ix = (ox * stride + dx) as isize - pad as isize;
                            if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                                acc += x[(c * h + iy as usize) * w + ix as usize]
                                    * ker[((o * ci + c) * kh + dy) * kw + dx];
                            }
                        }
                    }
                }
                out[(o * oh + oy) * ow + ox] = acc;
            }
        }
    }
    out
}

#[test]
fn criterion_2_oracle_equivalence() {
    let t0 = Instant::now();
    let mut cases = 0usize;

    // matmul: 20 random shapes
    for i in 0..20u64 {
        let mut rng = Frng::from_seed(5000 + i);
        let (m, k, n) = (1 + rng.index(6), 1 + rng.index(6), 1 + rng.index(6));
        let a = rand_vec(&mut rng, m * k);
        let b = rand_vec(&mut rng, k * n);
        let got = matmul(
            &Tensor::from_vec(&[m, k], a.clone()).unwrap(),
            &Tensor::from_vec(&[k, n], b.clone()).unwrap(),
        )
        .unwrap();
        for (x, y) in got.data().iter().zip(naive_matmul(&a, &b, m, k, n)) {
            assert!((x - y).abs() < ORACLE_TOL, "matmul case {i}");
        }
        cases += 1;
    }

    // conv2d: 15 random shapes
    for i in 0..15u64 {
        let mut rng = Frng::from_seed(5100 + i);
        let (ci, co) = (1 + rng.index(3), 1 + rng.index(3));
        let k = 1 + rng.index(3);
        let stride = 1 + rng.index(2);
        let pad = rng.index(2);
        let h = (k + stride).max(3) + rng.index(3);
        let w = (k + stride).max(3) + rng.index(3);
        let x = rand_vec(&mut rng, ci * h * w);
        let ker = rand_vec(&mut rng, co * ci * k * k);
        let got = conv2d(
            &Tensor::from_vec(&[ci, h, w], x.clone()).unwrap(),
            &Tensor::from_vec(&[co, ci, k, k], ker.clone()).unwrap(),
            stride,
            pad,
        )
        .unwrap();
        for (a, b) in got
            .data()
            .iter()
            .zip(naive_conv(&x, &ker, ci, h, w, co, k, k, stride, pad))
        {
            assert!((a - b).abs() < ORACLE_TOL, "conv case {i}");
        }
        cases += 1;
    }

    // softmax: 10 cases against a max-subtracted exp/sum oracle
    for i in 0..10u64 {
        let mut rng = Frng::from_seed(5200 + i);
        let (r, c) = (1 + rng.index(4), 1 + rng.index(6));
        let x: Vec<f64> = (0..r * c).map(|_| rng.uniform_in(-6.0, 6.0)).collect();
        let got = softmax_rows(&Tensor::from_vec(&[r, c], x.clone()).unwrap()).unwrap();
        for row in 0..r {
            let slice = &x[row * c..(row + 1) * c];
            let m = slice.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = slice.iter().map(|v| (v - m).exp()).sum();
            for col in 0..c {
                let expect = (slice[col] - m).exp() / z;
                assert!((got.data()[row * c + col] - expect).abs() < ORACLE_TOL);
            }
        }
        cases += 1;
    }

    // attention: 10 cases against the pairwise-position oracle
    for i in 0..10u64 {
        let mut rng = Frng::from_seed(5300 + i);
        let c = 2 + rng.index(3);
        let (ht, wt) = (1 + rng.index(3), 1 + rng.index(3));
        let (hs, ws) = (1 + rng.index(2), 1 + rng.index(2));
        let mut ps: ParamSet<f64> = ParamSet::new();
        let p = AttentionParams::new(&mut ps, "attn", c, 0, true, true, &mut rng).unwrap();
        let gamma = 0.3 + rng.uniform();
        p.gamma.as_ref().unwrap().set_data(vec![gamma]).unwrap();
        let x_t = Tensor::from_vec(&[c, ht, wt], rand_vec(&mut rng, c * ht * wt)).unwrap();
        let x_s = Tensor::from_vec(&[c, hs, ws], rand_vec(&mut rng, c * hs * ws)).unwrap();

        let got_self = self_attention(&x_t, &p).unwrap();
        let expect_self = attention_oracle(&x_t, &x_t, &p, gamma);
        for (a, b) in got_self.data().iter().zip(&expect_self) {
            assert!((a - b).abs() < ORACLE_TOL, "self-attention case {i}");
        }
        let got_cross = cross_attention(&x_t, &x_s, &p).unwrap();
        let expect_cross = attention_oracle(&x_t, &x_s, &p, gamma);
        for (a, b) in got_cross.data().iter().zip(&expect_cross) {
            assert!((a - b).abs() < ORACLE_TOL, "cross-attention case {i}");
        }
        cases += 2;
    }

    assert!(cases >= 50, "only {cases} oracle cases");
    let elapsed = t0.elapsed().as_secs_f64();
    assert!(elapsed < 60.0, "criterion 2 took {elapsed}s, budget 60s");
    report(2, "kernel oracle equivalence", t0);
}

/// Explicit position-pair attention oracle (exp-normalized weighted sums).
fn attention_oracle(
    x_q: &Tensor<f64>,
    x_kv: &Tensor<f64>,
    p: &AttentionParams<f64>,
    gamma: f64,
) -> Vec<f64> {
    let c = x_q.shape()[0];
    let n_q = x_q.shape()[1] * x_q.shape()[2];
    let n_kv = x_kv.shape()[1] * x_kv.shape()[2];
    let d_k = p.d_k();
    let qd = x_q.data();
    let kd = x_kv.data();
    let wq = p.w_q.data();
    let wk = p.w_k.data();
    let wv = p.w_v.data();
    let wo = p.w_out.as_ref().unwrap().data();
    let project = |wmat: &std::cell::Ref<'_, Vec<f64>>,
                   buf: &std::cell::Ref<'_, Vec<f64>>,
                   n: usize,
                   pos: usize,
                   row: usize|
     -> f64 {
        (0..c)
            .map(|ch| wmat[row * c + ch] * buf[ch * n + pos])
            .sum()
    };
    let mut out = vec![0.0; c * n_q];
    for i in 0..n_q {
        let mut logits = vec![0.0; n_kv];
        for (j, l) in logits.iter_mut().enumerate() {
            let mut dot = 0.0;
            for r in 0..d_k {
                dot += project(&wq, &qd, n_q, i, r) * project(&wk, &kd, n_kv, j, r);
            }
            *l = dot / (d_k as f64).sqrt();
        }
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for l in &mut logits {
            *l = (*l - m).exp();
            z += *l;
        }
        for l in &mut logits {
            *l /= z;
        }
        for ch in 0..c {
            let mut acc = 0.0;
            for r in 0..d_k {
                let mut vr = 0.0;
                for (j, weight) in logits.iter().enumerate() {
                    vr += weight * project(&wv, &kd, n_kv, j, r);
                }
                acc += wo[ch * d_k + r] * vr;
            }
            out[ch * n_q + i] = qd[ch * n_q + i] + gamma * acc;
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Criterion 3: schedule exactness
// ---------------------------------------------------------------------------

#[test]
fn criterion_3_schedule_exactness() {
    let t0 = Instant::now();
    let s = ScheduleState {
        t: 0,
        t_total: 2000,
        gamma: 1.0,
        lambda_id_max: 40.0,
        lambda_rec_max: 2.0,
        eta_min: 2e-6,
        eta_max: 2e-4,
        t_cycle: 2000,
    };
    let tol = 1e-12;
    assert!((lambda_id_at(&s.at_step(0)).unwrap() - 40.0).abs() < tol);
    assert!(lambda_id_at(&s.at_step(2000)).unwrap().abs() < tol);
    assert!((lambda_id_at(&s.at_step(1000)).unwrap() - 20.0).abs() < tol);
    assert!((lambda_rec_at(&s.at_step(0)).unwrap() - 2.0).abs() < tol);
    assert!(lambda_rec_at(&s.at_step(2000)).unwrap().abs() < tol);
    assert!((lr_at(&s.at_step(0)) - 2e-4).abs() < tol);
    assert!((lr_at(&s.at_step(2000)) - 2e-6).abs() < tol);
    assert!((lr_at(&s.at_step(1000)) - (2e-4 + 2e-6) / 2.0).abs() < tol);
    report(3, "schedule exactness", t0);
}

// ---------------------------------------------------------------------------
// Criterion 4: trend reproduction on the desk run
// ---------------------------------------------------------------------------

#[test]
fn criterion_4_training_trend_reproduction() {
    let t0 = Instant::now();
    let desk = desk_run();
    let rows = &desk.rows;
    assert!(
        rows.len() >= 20,
        "expected >= 20 log rows, got {}",
        rows.len()
    );

    let avg = |slice: &[MetricRow], f: fn(&MetricRow) -> f64| -> f64 {
        slice.iter().map(f).sum::<f64>() / slice.len() as f64
    };
    let first10 = &rows[..10];
    let last10 = &rows[rows.len() - 10..];

    let id_first = avg(first10, |r| r.g_id);
    let id_last = avg(last10, |r| r.g_id);
    assert!(
        id_last < 0.5 * id_first,
        "G_ID moving average did not halve: {id_first} -> {id_last}"
    );

    let feat_first = avg(first10, |r| r.g_feat_match);
    let feat_last = avg(last10, |r| r.g_feat_match);
    assert!(
        feat_last < feat_first,
        "G_feat_match did not decline: {feat_first} -> {feat_last}"
    );

    for row in rows {
        for v in [
            row.g_loss,
            row.g_id,
            row.g_feat_match,
            row.d_fake,
            row.d_real,
            row.lambda_id,
            row.lambda_rec,
            row.lr,
        ] {
            assert!(v.is_finite(), "non-finite value at step {}", row.step);
        }
    }

    // Schedule wiring: logged weights/lr match the closed forms exactly.
    let cfg = TrainConfig::default();
    for row in rows {
        let w = cfg.weights_at(row.step).unwrap();
        assert_eq!(row.lambda_id, w.lambda_id, "lambda_id at step {}", row.step);
        assert_eq!(
            row.lambda_rec, w.lambda_rec,
            "lambda_rec at step {}",
            row.step
        );
        assert_eq!(row.lr, cfg.lr_at(row.step), "lr at step {}", row.step);
    }

    assert!(
        desk.wall_seconds < 1800.0,
        "desk run took {:.0}s, budget 1800s",
        desk.wall_seconds
    );
    println!(
        "  trend: G_ID {id_first:.3} -> {id_last:.3}, G_feat_match {feat_first:.3} -> {feat_last:.3}, desk run {:.0}s",
        desk.wall_seconds
    );
    report(4, "training trend reproduction", t0);
}

// ---------------------------------------------------------------------------
// Criterion 5: swap semantics on synthetic ground truth
// ---------------------------------------------------------------------------

#[test]
fn criterion_5_swap_semantics() {
    let t0 = Instant::now();
    let desk = desk_run();
    let detail = eval_checkpoint_detailed(&desk.final_checkpoint, 64, 4242).unwrap();
    println!(
        "  id_sim(swap)={:.4} vs id_sim(src,tgt)={:.4}; attr(tgt)={:.4} vs attr(src)={:.4}",
        detail.report.identity_similarity,
        detail.id_similarity_source_vs_target,
        detail.report.attribute_consistency,
        detail.attr_consistency_vs_source
    );
    assert!(
        detail.report.identity_similarity >= detail.id_similarity_source_vs_target + 0.05,
        "identity similarity margin too small: {} vs {}",
        detail.report.identity_similarity,
        detail.id_similarity_source_vs_target
    );
    assert!(
        detail.report.attribute_consistency > detail.attr_consistency_vs_source,
        "attributes should track the target: {} vs {}",
        detail.report.attribute_consistency,
        detail.attr_consistency_vs_source
    );

    // Reconstruction objective: the trained model rebuilds a face from
    // itself far better than a fresh one does.
    let cfg = TrainConfig::default();
    let ck = Checkpoint::load(&desk.final_checkpoint).unwrap();
    let embedder: Embedder<f64> = {
        let mut rng = Frng::from_seed(0);
        let e = Embedder::new(cfg.embedder_config(), &mut rng).unwrap();
        e.params
            .import(&ck.take_params::<f64>("e").unwrap())
            .unwrap();
        e.frozen()
    };
    let mut rng = Frng::from_seed(606);
    let fresh: Generator<f64> = Generator::new(cfg.generator_config(), &mut rng).unwrap();
    let dataset = sample_dataset(cfg.n_identities, cfg.images_per_identity, 12345).unwrap();
    let mut fresh_l1 = 0.0;
    let held = dataset.heldout_items();
    for (spec, _) in held.iter().take(8) {
        let img = render::<f64>(spec, cfg.image_size).unwrap();
        let rebuilt = fresh
            .forward(&img, &img, &embedder.embed(&img).unwrap())
            .unwrap();
        fresh_l1 += faceswap::tensor::l1_mean(&img, &rebuilt).unwrap().item();
    }
    fresh_l1 /= 8.0;
    println!(
        "  self-swap L1: trained {:.4} vs fresh {:.4}",
        detail.self_swap_l1, fresh_l1
    );
    assert!(
        detail.self_swap_l1 < fresh_l1,
        "training should improve self-swap reconstruction: {} vs {}",
        detail.self_swap_l1,
        fresh_l1
    );
    report(5, "swap semantics on ground truth", t0);
}

// ---------------------------------------------------------------------------
// Criterion 6: ablation harness
// ---------------------------------------------------------------------------

#[test]
fn criterion_6_ablation_grid() {
    let t0 = Instant::now();
    let steps = 500;
    let out = tmp_dir("ablate");
    let base = TrainConfig::default();
    let tables = ablate(&base, steps, &out).unwrap();

    // Row labels and column layouts match the reporting format exactly.
    let attention_csv = std::fs::read_to_string(out.join("attention.csv")).unwrap();
    let mut lines = attention_csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "Model Configuration,Identity Similarity,Attribute Consistency,FID Score"
    );
    let labels: Vec<&str> = lines.map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(
        labels,
        ATTENTION_ROWS
            .iter()
            .map(|(l, _, _)| *l)
            .collect::<Vec<_>>()
    );

    let weighting_csv = std::fs::read_to_string(out.join("weighting.csv")).unwrap();
    let mut lines = weighting_csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "Loss Weighting Strategy,Identity Similarity,FID Score"
    );
    let labels: Vec<&str> = lines.map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(
        labels,
        WEIGHTING_ROWS
            .iter()
            .map(|(l, _, _)| *l)
            .collect::<Vec<_>>()
    );

    let lr_csv = std::fs::read_to_string(out.join("lr.csv")).unwrap();
    let mut lines = lr_csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "Learning Rate Schedule,Convergence Speed,Final FID Score"
    );
    let labels: Vec<&str> = lines.map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(labels, LR_ROWS.iter().map(|(l, _)| *l).collect::<Vec<_>>());

    assert_eq!(tables.attention.len(), 4);
    assert_eq!(tables.weighting.len(), 4);
    assert_eq!(tables.lr.len(), 3);
    assert!(tables.attention[3].generator_param_count > tables.attention[0].generator_param_count);

    // Ordering property: the full model matches or beats the baseline on
    // identity similarity for at least 2 of 3 seeds.
    let mut wins = 0;
    let seed_pairs = {
        let mut pairs = vec![(
            base.seed,
            tables.attention[0].report.identity_similarity,
            tables.attention[3].report.identity_similarity,
        )];
        for (i, seed) in [101u64, 202u64].into_iter().enumerate() {
            let mut cfg = base.clone();
            cfg.seed = seed;
            cfg.total_steps = steps;
            cfg.checkpoint_every = 0;
            let dir = out.join(format!("ordering_seed_{i}"));
            let embedder = prepare_shared_embedder(&cfg, &dir).unwrap();
            let mut base_cfg = cfg.clone();
            base_cfg.use_self_attention = false;
            base_cfg.use_cross_attention = false;
            let baseline = run_ablation_entry(
                &base_cfg,
                "Baseline (No attention)",
                &dir.join("baseline"),
                Some(&embedder),
            )
            .unwrap();
            let full = run_ablation_entry(
                &cfg,
                "Full model (Self + Cross)",
                &dir.join("full"),
                Some(&embedder),
            )
            .unwrap();
            pairs.push((
                seed,
                baseline.report.identity_similarity,
                full.report.identity_similarity,
            ));
        }
        pairs
    };
    for (seed, baseline, full) in &seed_pairs {
        println!("  seed {seed}: baseline id_sim {baseline:.4}, full id_sim {full:.4}");
        if full >= baseline {
            wins += 1;
        }
    }
    assert!(wins >= 2, "full model won only {wins}/3 seeds");

    let elapsed = t0.elapsed().as_secs_f64();
    assert!(
        elapsed < 7200.0,
        "criterion 6 took {elapsed}s, budget 7200s"
    );
    report(6, "ablation grid", t0);
}

// ---------------------------------------------------------------------------
// Criterion 7: determinism and resume
// ---------------------------------------------------------------------------

#[test]
fn criterion_7_determinism_and_resume() {
    let t0 = Instant::now();

    // Identical config and seed give byte-identical metric logs.
    let mut short = TrainConfig::default();
    short.total_steps = 40;
    short.log_every = 10;
    short.checkpoint_every = 0;
    short.embedder_steps = 100;
    let a = train(&short, &tmp_dir("det_a"), &TrainOptions::default()).unwrap();
    let b = train(&short, &tmp_dir("det_b"), &TrainOptions::default()).unwrap();
    assert_eq!(
        std::fs::read(&a.metrics_path).unwrap(),
        std::fs::read(&b.metrics_path).unwrap(),
        "metric logs differ between identical runs"
    );

    // Resuming the desk run from its midpoint checkpoint reproduces the
    // straight run bit for bit.
    let desk = desk_run();
    let midpoint = desk.out.join("checkpoint_step_1000.mswp");
    assert!(midpoint.exists(), "desk run should checkpoint at step 1000");
    let resumed_out = tmp_dir("desk_resumed");
    let opts = TrainOptions {
        resume_from: Some(midpoint),
        embedder_checkpoint: None,
    };
    let resumed = train(&TrainConfig::default(), &resumed_out, &opts).unwrap();
    assert_eq!(
        std::fs::read(&desk.final_checkpoint).unwrap(),
        std::fs::read(&resumed.checkpoint_path).unwrap(),
        "resumed final checkpoint differs from the straight run"
    );

    // The resumed log matches the straight run's rows for steps >= 1000.
    let straight_text = std::fs::read_to_string(&desk.metrics_path).unwrap();
    let tail: Vec<&str> = straight_text
        .lines()
        .skip(1)
        .filter(|l| l.split(',').next().unwrap().parse::<usize>().unwrap() >= 1000)
        .collect();
    let resumed_text = std::fs::read_to_string(&resumed.metrics_path).unwrap();
    let resumed_rows: Vec<&str> = resumed_text.lines().skip(1).collect();
    assert_eq!(tail, resumed_rows, "resumed metric rows diverge");
    assert_eq!(
        straight_text.lines().next().unwrap(),
        METRIC_HEADER,
        "metric header drifted"
    );

    // Checkpoint round-trip is bitwise idempotent.
    let ck = Checkpoint::load(&desk.final_checkpoint).unwrap();
    assert_eq!(
        ck.to_bytes(),
        std::fs::read(&desk.final_checkpoint).unwrap()
    );

    report(7, "determinism and resume", t0);
}

// ---------------------------------------------------------------------------
// Criterion 8: embedder quality gate
// ---------------------------------------------------------------------------

#[test]
fn criterion_8_embedder_quality_gate() {
    let t0 = Instant::now();
    let cfg = TrainConfig::default();
    let dataset = sample_dataset(cfg.n_identities, cfg.images_per_identity, 777).unwrap();
    // pretrain_embedder itself errors below the gate; measure anyway.
    let embedder =
        pretrain_embedder::<f64>(cfg.embedder_config(), &dataset, 2000, 8, 1e-3, 31415).unwrap();
    let frozen = embedder.frozen();
    let separation = identity_separation(&frozen, &dataset.heldout_items(), 64, 2718).unwrap();
    println!("  held-out separation: {separation:.4}");
    assert!(
        separation >= REQUIRED_SEPARATION,
        "separation {separation} below {REQUIRED_SEPARATION}"
    );

    // With a separated embedder, self pairs score a strictly higher
    // identity similarity than cross-identity pairs.
    let held = dataset.heldout_items();
    let self_pairs: Vec<(Tensor<f64>, Tensor<f64>)> = held
        .iter()
        .take(8)
        .map(|(s, _)| {
            let img = render::<f64>(s, cfg.image_size).unwrap();
            (img.clone(), img)
        })
        .collect();
    let cross_pairs: Vec<(Tensor<f64>, Tensor<f64>)> = held
        .iter()
        .take(8)
        .zip(held.iter().rev().take(8))
        .filter(|((_, a), (_, b))| a != b)
        .map(|((sa, _), (sb, _))| {
            (
                render::<f64>(sa, cfg.image_size).unwrap(),
                render::<f64>(sb, cfg.image_size).unwrap(),
            )
        })
        .collect();
    let self_sim = faceswap::metrics::identity_similarity(&self_pairs, &frozen).unwrap();
    let cross_sim = faceswap::metrics::identity_similarity(&cross_pairs, &frozen).unwrap();
    assert!((self_sim - 1.0).abs() < 1e-9);
    assert!(cross_sim < self_sim, "cross {cross_sim} vs self {self_sim}");

    // Fréchet distance: identical image sets score ~0.
    let imgs: Vec<Tensor<f64>> = dataset
        .heldout_items()
        .iter()
        .take(48)
        .map(|(s, _)| render(s, cfg.image_size).unwrap())
        .collect();
    let fd = faceswap::metrics::frechet_distance(&imgs, &imgs, &frozen).unwrap();
    assert!(fd < 1e-6, "FD(set, set) = {fd}");

    // Equal-covariance clouds: distance equals the squared mean gap.
    let mut rng = Frng::from_seed(888);
    let dim = 16;
    let cloud: Vec<Vec<f64>> = (0..256)
        .map(|_| {
            (0..dim)
                .map(|j| rng.normal() * (1.0 + 0.2 * j as f64))
                .collect()
        })
        .collect();
    let shift: Vec<f64> = (0..dim).map(|j| 0.3 + 0.05 * j as f64).collect();
    let shifted: Vec<Vec<f64>> = cloud
        .iter()
        .map(|f| f.iter().zip(&shift).map(|(x, s)| x + s).collect())
        .collect();
    let d2: f64 = shift.iter().map(|s| s * s).sum();
    let fd = frechet_from_features(&cloud, &shifted).unwrap();
    assert!(
        (fd - d2).abs() / d2 < 0.05,
        "two-cloud FD {fd} vs squared distance {d2}"
    );
    report(8, "embedder quality gate", t0);
}
