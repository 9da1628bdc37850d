//! Operational shell: training loop, checkpointing, evaluation, swapping,
//! ablation sweeps, and plotting.
//!
//! Determinism contract: a run is a pure function of its [`TrainConfig`].
//! All randomness flows through sub-streams derived from the config seed,
//! the training loop's stream is serialized into every checkpoint, and
//! resuming replays the uninterrupted run bit for bit.

pub mod checkpoint;
pub mod config;
pub mod csvlog;
pub mod plot;
pub mod ppm;

pub use checkpoint::Checkpoint;
pub use config::{LrSchedule, TrainConfig, WeightMode};
pub use csvlog::{read_metrics, MetricRow, METRIC_HEADER};
pub use plot::plot_metrics;

use crate::datasynth::{render, sample_dataset, FaceSpec, SyntheticDataset};
use crate::discriminator::Discriminator;
use crate::embedder::{pretrain_embedder, Embedder};
use crate::error::{Error, Result};
use crate::generator::Generator;
use crate::losses::{
    feature_matching_loss, hinge_d_parts, hinge_g_loss, identity_loss, reconstruction_loss,
    total_generator_loss, GeneratorLossParts, LossBundle,
};
use crate::metrics::{
    attribute_consistency, frechet_distance, identity_similarity, pretrain_probe, EvalReport,
};
use crate::rng::{mix, Frng};
use crate::schedules::Adam;
use crate::tensor::{add, backward, scale, DType, Element, Tensor};
use std::path::{Path, PathBuf};

// Sub-stream indices hung off the run seed.
const STREAM_DATASET: u64 = 1;
const STREAM_EMBEDDER: u64 = 2;
const STREAM_G_INIT: u64 = 3;
const STREAM_D_INIT: u64 = 4;
const STREAM_LOOP: u64 = 5;
const STREAM_PROBE: u64 = 6;
const STREAM_EVAL: u64 = 7;

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Resume from a training checkpoint (its config must match).
    pub resume_from: Option<PathBuf>,
    /// Load a pretrained embedder instead of pretraining one.
    pub embedder_checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint_path: PathBuf,
    pub metrics_path: PathBuf,
    pub final_step: usize,
    pub generator_param_count: usize,
}

/// Trains per the config, writing `metrics.csv`, periodic checkpoints, and
/// `checkpoint_final.mswp` into `out_dir`.
pub fn train(cfg: &TrainConfig, out_dir: &Path, opts: &TrainOptions) -> Result<TrainOutcome> {
    cfg.validate()?;
    match cfg.precision {
        DType::F64 => train_impl::<f64>(cfg, out_dir, opts),
        DType::F32 => train_impl::<f32>(cfg, out_dir, opts),
    }
}

/// Builds (or loads) the frozen embedder for a run.
fn run_embedder<E: Element>(
    cfg: &TrainConfig,
    dataset: &SyntheticDataset,
    opts: &TrainOptions,
    out_dir: &Path,
) -> Result<Embedder<E>> {
    if let Some(path) = &opts.embedder_checkpoint {
        let ck = Checkpoint::load(path)?;
        if ck.role != "embedder" {
            return Err(Error::Checkpoint {
                what: format!("expected role `embedder`, found `{}`", ck.role),
            });
        }
        let mut rng = Frng::from_seed(0);
        let embedder = Embedder::new(cfg.embedder_config(), &mut rng)?;
        embedder.params.import(&ck.take_params::<E>("e")?)?;
        return Ok(embedder.frozen());
    }
    let trained = pretrain_embedder::<E>(
        cfg.embedder_config(),
        dataset,
        cfg.embedder_steps,
        cfg.embedder_batch,
        cfg.embedder_lr,
        mix(cfg.seed, STREAM_EMBEDDER),
    )?;
    let frozen = trained.frozen();
    let mut ck = Checkpoint::new(
        "embedder",
        cfg.embedder_steps as u64,
        Frng::from_seed(mix(cfg.seed, STREAM_EMBEDDER)).state(),
        cfg.to_text(),
    );
    ck.push_params("e", &frozen.params);
    ck.save(&out_dir.join("embedder.mswp"))?;
    Ok(frozen)
}

struct BatchItem<E: Element> {
    i_t: Tensor<E>,
    e_src: Tensor<E>,
    fake: Tensor<E>,
}

fn mean_of<E: Element>(terms: &[Tensor<E>]) -> Result<Tensor<E>> {
    let mut acc = terms[0].clone();
    for t in &terms[1..] {
        acc = add(&acc, t)?;
    }
    Ok(scale(&acc, 1.0 / terms.len() as f64))
}

#[allow(clippy::too_many_arguments)]
fn save_train_checkpoint<E: Element>(
    path: &Path,
    cfg: &TrainConfig,
    step: usize,
    loop_rng: &Frng,
    generator: &Generator<E>,
    discriminator: &Discriminator<E>,
    embedder: &Embedder<E>,
    adam_g: &Adam<E>,
    adam_d: &Adam<E>,
) -> Result<()> {
    let mut ck = Checkpoint::new("train", step as u64, loop_rng.state(), cfg.to_text());
    ck.push_params("g", &generator.params);
    ck.push_params("d", &discriminator.params);
    ck.push_params("e", &embedder.params);
    let g_names: Vec<String> = generator
        .params
        .iter()
        .map(|(n, _)| n.to_string())
        .collect();
    let d_names: Vec<String> = discriminator
        .params
        .iter()
        .map(|(n, _)| n.to_string())
        .collect();
    let (_, gm, gv) = adam_g.export();
    ck.push_vectors("mg", &g_names, &gm);
    ck.push_vectors("vg", &g_names, &gv);
    let (_, dm, dv) = adam_d.export();
    ck.push_vectors("md", &d_names, &dm);
    ck.push_vectors("vd", &d_names, &dv);
    ck.save(path)
}

fn import_moments<E: Element>(
    ck: &Checkpoint,
    adam: &mut Adam<E>,
    m_prefix: &str,
    v_prefix: &str,
    step: usize,
) -> Result<()> {
    let m: Vec<Vec<E>> = ck
        .take_params::<E>(m_prefix)?
        .into_iter()
        .map(|(_, _, data)| data)
        .collect();
    let v: Vec<Vec<E>> = ck
        .take_params::<E>(v_prefix)?
        .into_iter()
        .map(|(_, _, data)| data)
        .collect();
    adam.import(step as u64, m, v)
}

fn train_impl<E: Element>(
    cfg: &TrainConfig,
    out_dir: &Path,
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let dataset = sample_dataset(
        cfg.n_identities,
        cfg.images_per_identity,
        mix(cfg.seed, STREAM_DATASET),
    )?;
    let train_items = dataset.train_items();

    let resume = match &opts.resume_from {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            if ck.role != "train" {
                return Err(Error::Checkpoint {
                    what: format!("expected role `train`, found `{}`", ck.role),
                });
            }
            if ck.config_text != cfg.to_text() {
                return Err(Error::Checkpoint {
                    what: "checkpoint config does not match the requested config".into(),
                });
            }
            Some(ck)
        }
        None => None,
    };

    let embedder: Embedder<E> = match &resume {
        Some(ck) => {
            let mut rng = Frng::from_seed(0);
            let e = Embedder::new(cfg.embedder_config(), &mut rng)?;
            e.params.import(&ck.take_params::<E>("e")?)?;
            e.frozen()
        }
        None => run_embedder(cfg, &dataset, opts, out_dir)?,
    };

    let mut g_rng = Frng::from_seed(mix(cfg.seed, STREAM_G_INIT));
    let generator: Generator<E> = Generator::new(cfg.generator_config(), &mut g_rng)?;
    let mut d_rng = Frng::from_seed(mix(cfg.seed, STREAM_D_INIT));
    let discriminator: Discriminator<E> =
        Discriminator::new(cfg.discriminator_config(), cfg.image_size, &mut d_rng)?;
    let mut adam_g = Adam::new(&generator.params, cfg.adam_beta1, cfg.adam_beta2);
    let mut adam_d = Adam::new(&discriminator.params, cfg.adam_beta1, cfg.adam_beta2);

    let mut loop_rng = Frng::from_seed(mix(cfg.seed, STREAM_LOOP));
    let mut start = 0usize;
    if let Some(ck) = &resume {
        generator.params.import(&ck.take_params::<E>("g")?)?;
        discriminator.params.import(&ck.take_params::<E>("d")?)?;
        start = ck.step as usize;
        import_moments(ck, &mut adam_g, "mg", "vg", start)?;
        import_moments(ck, &mut adam_d, "md", "vd", start)?;
        loop_rng = Frng::restore(&ck.rng_state);
        if start >= cfg.total_steps {
            return Err(Error::InvalidConfig {
                what: format!(
                    "checkpoint is at step {start}, config trains for {}",
                    cfg.total_steps
                ),
            });
        }
    }

    let metrics_path = out_dir.join("metrics.csv");
    let mut log = csvlog::MetricWriter::create(&metrics_path)?;

    let abort =
        |step: usize, term: String, loop_rng: &Frng, adam_g: &Adam<E>, adam_d: &Adam<E>| -> Error {
            // Current weights predate the poisoned update; keep them.
            let path = out_dir.join(format!("abort_step_{step}.mswp"));
            let _ = save_train_checkpoint(
                &path,
                cfg,
                step,
                loop_rng,
                &generator,
                &discriminator,
                &embedder,
                adam_g,
                adam_d,
            );
            Error::NonFiniteLoss { term, step }
        };

    for t in start..cfg.total_steps {
        let weights = cfg.weights_at(t)?;
        let lr = cfg.lr_at(t);
        let self_swap = loop_rng.coin(cfg.self_swap_prob);

        // Assemble the batch. A self-swap batch uses one spec per item for
        // both roles.
        let mut items: Vec<BatchItem<E>> = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let (src_spec, tgt_spec): (&FaceSpec, &FaceSpec) = if self_swap {
                let s = &train_items[loop_rng.index(train_items.len())].0;
                (s, s)
            } else {
                let s = &train_items[loop_rng.index(train_items.len())].0;
                let t_ = &train_items[loop_rng.index(train_items.len())].0;
                (s, t_)
            };
            let i_s = render::<E>(src_spec, cfg.image_size)?;
            let i_t = if self_swap {
                i_s.clone()
            } else {
                render::<E>(tgt_spec, cfg.image_size)?
            };
            let e_src = embedder.embed(&i_s)?;
            let fake = generator.forward(&i_s, &i_t, &e_src)?;
            items.push(BatchItem { i_t, e_src, fake });
        }

        // Discriminator step on detached fakes.
        let mut real_scores = Vec::new();
        let mut fake_scores = Vec::new();
        for item in &items {
            let (sr, _) = discriminator.discriminate(&item.i_t)?;
            real_scores.extend(sr);
            let (sf, _) = discriminator.discriminate(&item.fake.detach())?;
            fake_scores.extend(sf);
        }
        let (d_real_term, d_fake_term) = hinge_d_parts(&real_scores, &fake_scores)?;
        let (d_real_v, d_fake_v) = (d_real_term.item_f64(), d_fake_term.item_f64());
        if !d_real_v.is_finite() || !d_fake_v.is_finite() {
            return Err(abort(t, "adv_d".into(), &loop_rng, &adam_g, &adam_d));
        }
        let d_loss = add(&d_real_term, &d_fake_term)?;
        discriminator.params.zero_grads();
        backward(&d_loss)?;
        adam_d.step(&discriminator.params, lr)?;

        // Generator step through a fresh forward of the updated critic.
        let mut g_fake_scores = Vec::new();
        let mut id_terms = Vec::new();
        let mut feat_terms = Vec::new();
        let mut rec_terms = Vec::new();
        for item in &items {
            let (sf, ff) = discriminator.discriminate(&item.fake)?;
            g_fake_scores.extend(sf);
            let (_, fr) = discriminator.discriminate(&item.i_t)?;
            let fr: Vec<Tensor<E>> = fr.iter().map(|f| f.detach()).collect();
            feat_terms.push(feature_matching_loss(&fr, &ff)?);
            let e_fake = embedder.embed(&item.fake)?;
            id_terms.push(identity_loss(&item.e_src, &e_fake)?);
            if self_swap {
                rec_terms.push(reconstruction_loss(&item.i_t, &item.fake)?);
            }
        }
        let parts = GeneratorLossParts {
            adv: hinge_g_loss(&g_fake_scores)?,
            id: mean_of(&id_terms)?,
            feat: mean_of(&feat_terms)?,
            rec: if self_swap {
                Some(mean_of(&rec_terms)?)
            } else {
                None
            },
        };
        let (g_total, mut bundle) = total_generator_loss(&parts, &weights, self_swap)?;
        bundle.adv_d_real = d_real_v;
        bundle.adv_d_fake = d_fake_v;
        if let Some(term) = bundle.first_non_finite() {
            return Err(abort(t, term.into(), &loop_rng, &adam_g, &adam_d));
        }
        generator.params.zero_grads();
        backward(&g_total)?;
        adam_g.step(&generator.params, lr)?;

        // Frozen-embedder contract: its weights never accumulate gradients.
        assert!(
            embedder.params.grads_empty(),
            "embedder received gradients at step {t}"
        );

        if t % cfg.log_every == 0 || t + 1 == cfg.total_steps {
            log.write(&metric_row(t, &bundle, &weights, lr))?;
        }
        let completed = t + 1;
        if completed == cfg.total_steps
            || (cfg.checkpoint_every > 0 && completed % cfg.checkpoint_every == 0)
        {
            let name = if completed == cfg.total_steps {
                "checkpoint_final.mswp".to_string()
            } else {
                format!("checkpoint_step_{completed}.mswp")
            };
            save_train_checkpoint(
                &out_dir.join(name),
                cfg,
                completed,
                &loop_rng,
                &generator,
                &discriminator,
                &embedder,
                &adam_g,
                &adam_d,
            )?;
        }
    }

    Ok(TrainOutcome {
        checkpoint_path: out_dir.join("checkpoint_final.mswp"),
        metrics_path,
        final_step: cfg.total_steps,
        generator_param_count: generator.params.total_params(),
    })
}

fn metric_row(
    t: usize,
    bundle: &LossBundle,
    weights: &crate::losses::LossWeights,
    lr: f64,
) -> MetricRow {
    MetricRow {
        step: t,
        g_loss: bundle.adv_g,
        g_id: weights.lambda_id * bundle.id,
        g_feat_match: weights.lambda_feat * bundle.feat,
        d_fake: bundle.adv_d_fake,
        d_real: bundle.adv_d_real,
        lambda_id: weights.lambda_id,
        lambda_rec: weights.lambda_rec,
        lr,
    }
}

// ---------------------------------------------------------------------------
// Swap
// ---------------------------------------------------------------------------

/// Applies a trained generator to a source/target PPM pair.
pub fn swap(checkpoint: &Path, source: &Path, target: &Path, out: &Path) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let cfg = TrainConfig::parse(&ck.config_text)?;
    match cfg.precision {
        DType::F64 => swap_impl::<f64>(&ck, &cfg, source, target, out),
        DType::F32 => swap_impl::<f32>(&ck, &cfg, source, target, out),
    }
}

fn load_models<E: Element>(
    ck: &Checkpoint,
    cfg: &TrainConfig,
) -> Result<(Generator<E>, Embedder<E>)> {
    let mut rng = Frng::from_seed(0);
    let generator: Generator<E> = Generator::new(cfg.generator_config(), &mut rng)?;
    generator.params.import(&ck.take_params::<E>("g")?)?;
    let embedder: Embedder<E> = Embedder::new(cfg.embedder_config(), &mut rng)?;
    embedder.params.import(&ck.take_params::<E>("e")?)?;
    Ok((generator, embedder.frozen()))
}

fn swap_impl<E: Element>(
    ck: &Checkpoint,
    cfg: &TrainConfig,
    source: &Path,
    target: &Path,
    out: &Path,
) -> Result<()> {
    let (generator, embedder) = load_models::<E>(ck, cfg)?;
    let i_s: Tensor<E> = ppm::read_ppm(source)?;
    let i_t: Tensor<E> = ppm::read_ppm(target)?;
    for (name, img) in [("source", &i_s), ("target", &i_t)] {
        let s = img.shape();
        if s != [3, cfg.image_size, cfg.image_size] {
            return Err(Error::Image {
                what: format!(
                    "{name} image is {}x{}, model wants {2}x{2}",
                    s[2], s[1], cfg.image_size
                ),
            });
        }
    }
    let e_src = embedder.embed(&i_s)?;
    let fake = generator.forward(&i_s, &i_t, &e_src)?;
    ppm::write_ppm(out, &fake)
}

// ---------------------------------------------------------------------------
// Eval
// ---------------------------------------------------------------------------

/// Evaluation with the directional baselines needed to judge swap semantics.
#[derive(Clone, Copy, Debug)]
pub struct EvalDetail {
    pub report: EvalReport,
    /// Mean embedding cosine between source and target images themselves.
    pub id_similarity_source_vs_target: f64,
    /// Probe agreement of the swaps with the source attributes.
    pub attr_consistency_vs_source: f64,
    /// Mean L1 between held-out faces and their self-swaps G(i, i, e(i)).
    pub self_swap_l1: f64,
}

pub fn eval_checkpoint(
    checkpoint: &Path,
    n_pairs: usize,
    seed: u64,
    out_csv: Option<&Path>,
) -> Result<EvalReport> {
    let detail = eval_checkpoint_detailed(checkpoint, n_pairs, seed)?;
    if let Some(path) = out_csv {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(
            path,
            format!(
                "{}\n{}\n",
                EvalReport::CSV_HEADER,
                detail.report.to_csv_row()
            ),
        )
        .map_err(|e| Error::io(path, e))?;
    }
    Ok(detail.report)
}

pub fn eval_checkpoint_detailed(
    checkpoint: &Path,
    n_pairs: usize,
    seed: u64,
) -> Result<EvalDetail> {
    let ck = Checkpoint::load(checkpoint)?;
    let cfg = TrainConfig::parse(&ck.config_text)?;
    match cfg.precision {
        DType::F64 => eval_impl::<f64>(&ck, &cfg, n_pairs, seed),
        DType::F32 => eval_impl::<f32>(&ck, &cfg, n_pairs, seed),
    }
}

fn eval_impl<E: Element>(
    ck: &Checkpoint,
    cfg: &TrainConfig,
    n_pairs: usize,
    seed: u64,
) -> Result<EvalDetail> {
    if n_pairs == 0 {
        return Err(Error::EmptyInput { op: "eval" });
    }
    let (generator, embedder) = load_models::<E>(ck, cfg)?;
    let dataset = sample_dataset(
        cfg.n_identities,
        cfg.images_per_identity,
        mix(cfg.seed, STREAM_DATASET),
    )?;
    let probe = pretrain_probe::<E>(
        &dataset,
        cfg.image_size,
        cfg.probe_steps,
        8,
        2e-3,
        mix(cfg.seed, STREAM_PROBE),
    )?;
    let held = dataset.heldout_items();
    {
        let mut ids: Vec<usize> = held.iter().map(|(_, id)| *id).collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() < 2 {
            return Err(Error::InvalidConfig {
                what: "evaluation needs at least 2 held-out identities".into(),
            });
        }
    }
    let mut rng = Frng::from_seed(mix(seed, STREAM_EVAL));

    let mut st_pairs = Vec::with_capacity(n_pairs); // (i_s, i_t) baselines
    let mut swap_pairs = Vec::with_capacity(n_pairs); // (i_s, fake)
    let mut attr_vs_target = Vec::with_capacity(n_pairs);
    let mut attr_vs_source = Vec::with_capacity(n_pairs);
    let mut fakes = Vec::with_capacity(n_pairs);
    let mut reals = Vec::with_capacity(n_pairs);
    for _ in 0..n_pairs {
        let (src_spec, src_id) = held[rng.index(held.len())];
        let mut tgt = held[rng.index(held.len())];
        while tgt.1 == *src_id {
            tgt = held[rng.index(held.len())];
        }
        let i_s = render::<E>(src_spec, cfg.image_size)?;
        let i_t = render::<E>(&tgt.0, cfg.image_size)?;
        let fake = generator.forward(&i_s, &i_t, &embedder.embed(&i_s)?)?;
        attr_vs_target.push((fake.clone(), &tgt.0));
        attr_vs_source.push((fake.clone(), src_spec));
        st_pairs.push((i_s.clone(), i_t.clone()));
        swap_pairs.push((i_s, fake.clone()));
        fakes.push(fake);
        reals.push(i_t);
    }

    // Self-swap reconstruction quality on a few held-out faces.
    let mut l1_total = 0.0;
    let n_self = n_pairs.min(8);
    for k in 0..n_self {
        let (spec, _) = held[k % held.len()];
        let img = render::<E>(spec, cfg.image_size)?;
        let rebuilt = generator.forward(&img, &img, &embedder.embed(&img)?)?;
        l1_total += crate::tensor::l1_mean(&img, &rebuilt)?.item_f64();
    }

    let report = EvalReport {
        identity_similarity: identity_similarity(&swap_pairs, &embedder)?,
        attribute_consistency: attribute_consistency(&attr_vs_target, &probe)?,
        frechet_distance: frechet_distance(&fakes, &reals, &embedder)?,
        n_samples: n_pairs,
    };
    Ok(EvalDetail {
        report,
        id_similarity_source_vs_target: identity_similarity(&st_pairs, &embedder)?,
        attr_consistency_vs_source: attribute_consistency(&attr_vs_source, &probe)?,
        self_swap_l1: l1_total / n_self as f64,
    })
}

// ---------------------------------------------------------------------------
// Ablation
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub label: String,
    pub report: EvalReport,
    pub generator_param_count: usize,
    /// First logged step where the feature-matching column fell to 75% of
    /// its initial value; total steps when it never did.
    pub convergence_step: usize,
}

#[derive(Clone, Debug)]
pub struct AblationTables {
    pub attention: Vec<AblationRow>,
    pub weighting: Vec<AblationRow>,
    pub lr: Vec<AblationRow>,
}

pub const ATTENTION_ROWS: [(&str, bool, bool); 4] = [
    ("Baseline (No attention)", false, false),
    ("Self-attention only", true, false),
    ("Cross-attention only", false, true),
    ("Full model (Self + Cross)", true, true),
];

pub const WEIGHTING_ROWS: [(&str, WeightMode, f64); 4] = [
    ("Static weights", WeightMode::Static, 1.0),
    ("Dynamic weights (γ = 0.5)", WeightMode::Dynamic, 0.5),
    ("Dynamic weights (γ = 1.0)", WeightMode::Dynamic, 1.0),
    ("Dynamic weights (γ = 2.0)", WeightMode::Dynamic, 2.0),
];

pub const LR_ROWS: [(&str, LrSchedule); 3] = [
    ("Constant LR", LrSchedule::Constant),
    ("Step decay", LrSchedule::StepDecay),
    ("Cosine annealing", LrSchedule::Cosine),
];

/// One ablation config: train for `steps`, then evaluate on held-out pairs.
pub fn run_ablation_entry(
    cfg: &TrainConfig,
    label: &str,
    out_dir: &Path,
    embedder_checkpoint: Option<&Path>,
) -> Result<AblationRow> {
    let opts = TrainOptions {
        resume_from: None,
        embedder_checkpoint: embedder_checkpoint.map(Path::to_path_buf),
    };
    let outcome = train(cfg, out_dir, &opts)?;
    let report = eval_checkpoint(
        &outcome.checkpoint_path,
        cfg.eval_pairs,
        mix(cfg.seed, STREAM_EVAL),
        None,
    )?;
    let rows = read_metrics(&outcome.metrics_path)?;
    let first = rows.first().map(|r| r.g_feat_match).unwrap_or(0.0);
    let convergence_step = rows
        .iter()
        .find(|r| r.g_feat_match <= 0.75 * first)
        .map(|r| r.step)
        .unwrap_or(cfg.total_steps);
    Ok(AblationRow {
        label: label.to_string(),
        report,
        generator_param_count: outcome.generator_param_count,
        convergence_step,
    })
}

fn pretrain_and_save<E: Element>(
    base: &TrainConfig,
    dataset: &SyntheticDataset,
    path: &Path,
) -> Result<()> {
    let e = pretrain_embedder::<E>(
        base.embedder_config(),
        dataset,
        base.embedder_steps,
        base.embedder_batch,
        base.embedder_lr,
        mix(base.seed, STREAM_EMBEDDER),
    )?;
    let mut ck = Checkpoint::new(
        "embedder",
        base.embedder_steps as u64,
        Frng::from_seed(mix(base.seed, STREAM_EMBEDDER)).state(),
        base.to_text(),
    );
    ck.push_params("e", &e.frozen().params);
    ck.save(path)
}

/// Pretrains the shared embedder once and writes it under `out_dir`.
pub fn prepare_shared_embedder(base: &TrainConfig, out_dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let dataset = sample_dataset(
        base.n_identities,
        base.images_per_identity,
        mix(base.seed, STREAM_DATASET),
    )?;
    let path = out_dir.join("embedder.mswp");
    match base.precision {
        DType::F64 => pretrain_and_save::<f64>(base, &dataset, &path)?,
        DType::F32 => pretrain_and_save::<f32>(base, &dataset, &path)?,
    }
    Ok(path)
}

/// Runs the full ablation grid (4 attention + 4 weighting + 3 learning-rate
/// configurations) at `steps` steps each, in parallel worker threads, and
/// writes `attention.csv`, `weighting.csv`, `lr.csv` into `out_dir`.
pub fn ablate(base: &TrainConfig, steps: usize, out_dir: &Path) -> Result<AblationTables> {
    base.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let embedder_path = prepare_shared_embedder(base, out_dir)?;

    struct Job {
        table: usize,
        index: usize,
        label: String,
        cfg: TrainConfig,
        dir: PathBuf,
    }
    let mut jobs = Vec::new();
    for (i, (label, sa, ca)) in ATTENTION_ROWS.iter().enumerate() {
        let mut cfg = base.clone();
        cfg.total_steps = steps;
        cfg.checkpoint_every = 0;
        cfg.use_self_attention = *sa;
        cfg.use_cross_attention = *ca;
        jobs.push(Job {
            table: 0,
            index: i,
            label: label.to_string(),
            cfg,
            dir: out_dir.join(format!("attention_{i}")),
        });
    }
    for (i, (label, mode, gamma)) in WEIGHTING_ROWS.iter().enumerate() {
        let mut cfg = base.clone();
        cfg.total_steps = steps;
        cfg.checkpoint_every = 0;
        cfg.weight_mode = *mode;
        cfg.gamma = *gamma;
        jobs.push(Job {
            table: 1,
            index: i,
            label: label.to_string(),
            cfg,
            dir: out_dir.join(format!("weighting_{i}")),
        });
    }
    for (i, (label, schedule)) in LR_ROWS.iter().enumerate() {
        let mut cfg = base.clone();
        cfg.total_steps = steps;
        cfg.checkpoint_every = 0;
        cfg.lr_schedule = *schedule;
        jobs.push(Job {
            table: 2,
            index: i,
            label: label.to_string(),
            cfg,
            dir: out_dir.join(format!("lr_{i}")),
        });
    }

    let n_workers = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
        .min(jobs.len());
    let queue = std::sync::Mutex::new(jobs);
    let results: std::sync::Mutex<Vec<(usize, usize, Result<AblationRow>)>> =
        std::sync::Mutex::new(Vec::new());
    std::thread::scope(|scope| {
        for _ in 0..n_workers {
            scope.spawn(|| loop {
                let job = match queue.lock().unwrap().pop() {
                    Some(j) => j,
                    None => break,
                };
                let row = run_ablation_entry(&job.cfg, &job.label, &job.dir, Some(&embedder_path));
                results.lock().unwrap().push((job.table, job.index, row));
            });
        }
    });

    let mut tables: [Vec<(usize, AblationRow)>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for (table, index, row) in results.into_inner().unwrap() {
        tables[table].push((index, row?));
    }
    for t in &mut tables {
        t.sort_by_key(|(i, _)| *i);
    }
    let [attention_rows, weighting_rows, lr_rows] = tables;
    let attention: Vec<AblationRow> = attention_rows.into_iter().map(|(_, r)| r).collect();
    let weighting: Vec<AblationRow> = weighting_rows.into_iter().map(|(_, r)| r).collect();
    let lr: Vec<AblationRow> = lr_rows.into_iter().map(|(_, r)| r).collect();

    // The full model must be a strict superset of the baseline.
    assert!(
        attention[3].generator_param_count > attention[0].generator_param_count,
        "full model should have more parameters than the baseline"
    );

    let write = |name: &str, header: &str, lines: Vec<String>| -> Result<()> {
        let path = out_dir.join(name);
        let mut text = String::from(header);
        text.push('\n');
        for l in lines {
            text.push_str(&l);
            text.push('\n');
        }
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    };
    write(
        "attention.csv",
        "Model Configuration,Identity Similarity,Attribute Consistency,FID Score",
        attention
            .iter()
            .map(|r| {
                format!(
                    "{},{},{},{}",
                    r.label,
                    r.report.identity_similarity,
                    r.report.attribute_consistency,
                    r.report.frechet_distance
                )
            })
            .collect(),
    )?;
    write(
        "weighting.csv",
        "Loss Weighting Strategy,Identity Similarity,FID Score",
        weighting
            .iter()
            .map(|r| {
                format!(
                    "{},{},{}",
                    r.label, r.report.identity_similarity, r.report.frechet_distance
                )
            })
            .collect(),
    )?;
    write(
        "lr.csv",
        "Learning Rate Schedule,Convergence Speed,Final FID Score",
        lr.iter()
            .map(|r| {
                format!(
                    "{},{},{}",
                    r.label, r.convergence_step, r.report.frechet_distance
                )
            })
            .collect(),
    )?;

    Ok(AblationTables {
        attention,
        weighting,
        lr,
    })
}

// ---------------------------------------------------------------------------
// Embedder pretraining entry point (CLI)
// ---------------------------------------------------------------------------

fn load_and_measure_separation<E: Element>(
    cfg: &TrainConfig,
    dataset: &SyntheticDataset,
    path: &Path,
) -> Result<f64> {
    let ck = Checkpoint::load(path)?;
    let mut rng = Frng::from_seed(0);
    let e: Embedder<E> = Embedder::new(cfg.embedder_config(), &mut rng)?;
    e.params.import(&ck.take_params::<E>("e")?)?;
    crate::embedder::identity_separation(
        &e,
        &dataset.heldout_items(),
        64,
        mix(cfg.seed, STREAM_EVAL),
    )
}

/// Pretrains an embedder per the config and writes `embedder.mswp`;
/// returns the held-out separation.
pub fn pretrain_embedder_to_dir(cfg: &TrainConfig, out_dir: &Path) -> Result<(PathBuf, f64)> {
    cfg.validate()?;
    let dataset = sample_dataset(
        cfg.n_identities,
        cfg.images_per_identity,
        mix(cfg.seed, STREAM_DATASET),
    )?;
    let path = prepare_shared_embedder(cfg, out_dir)?;
    let separation = match cfg.precision {
        DType::F64 => load_and_measure_separation::<f64>(cfg, &dataset, &path)?,
        DType::F32 => load_and_measure_separation::<f32>(cfg, &dataset, &path)?,
    };
    Ok((path, separation))
}
