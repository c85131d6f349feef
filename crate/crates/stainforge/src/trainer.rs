//! Two-stage training orchestration: the auxiliary diagnosis classifier
//! first, then the adversarial style-transfer model with a frozen
//! classifier, plus evaluation and per-step loss logging.
//!
//! Determinism contract: every randomized stage draws from a ChaCha stream
//! derived from (seed, stage tag, epoch), so a run restarted from an epoch
//! checkpoint replays exactly the steps an uninterrupted run would take.

use crate::color::{RgbPatch, ViewingConditions};
use crate::error::{Error, Result};
use crate::metrics::{
    dscsi_loss_graph, mse_loss_graph, ssim_loss_graph, DscsiConfig, SsimConstants, WindowConfig,
};
use crate::models::{
    classifier_forward, classifier_init, discriminator_forward, discriminator_init,
    feature_kl_graph, gan_generator_term_graph, gan_losses_graph, generator_forward,
    generator_init, save_checkpoint, ClassifierConfig, DiscriminatorConfig, GeneratorConfig,
    LossWeights, ParamStore,
};
use crate::synth::{load_patch, mix_seed, ClassLabel, DatasetManifest, ManifestRecord, Split};
use crate::tape::Tape;
use ndarray::{ArrayD, IxDyn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

const TAG_CLF_INIT: u64 = 0x01;
const TAG_CLF_EPOCH: u64 = 0x02;
const TAG_GEN_INIT: u64 = 0x03;
const TAG_DISC_INIT: u64 = 0x04;
const TAG_GAN_EPOCH: u64 = 0x05;

/// Which reconstruction loss drives the generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RecoKind {
    Mse,
    Ssim,
    Dscsi,
}

impl RecoKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            RecoKind::Mse => "mse",
            RecoKind::Ssim => "ssim",
            RecoKind::Dscsi => "dscsi",
        }
    }
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "mse" => Some(RecoKind::Mse),
            "ssim" => Some(RecoKind::Ssim),
            "dscsi" => Some(RecoKind::Dscsi),
            _ => None,
        }
    }
}

/// Metric configuration shared by training losses and evaluation.
#[derive(Debug, Clone, Default)]
pub struct MetricSettings {
    pub window: WindowConfig,
    pub ssim: SsimConstants,
    pub dscsi: DscsiConfig,
    pub vc: ViewingConditions,
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Classifier batch size, or 2m for the adversarial stage.
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// 0.0 is plain SGD, matching the reference schedule.
    pub momentum: f64,
    pub reco: RecoKind,
    pub loss_weights: LossWeights,
    pub checkpoint_dir: Option<PathBuf>,
}

impl TrainConfig {
    pub fn classifier_defaults(seed: u64) -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 8,
            epochs: 10,
            seed,
            momentum: 0.0,
            reco: RecoKind::Ssim,
            loss_weights: LossWeights::default(),
            checkpoint_dir: None,
        }
    }

    pub fn gan_defaults(seed: u64, reco: RecoKind) -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            batch_size: 4,
            epochs: 10,
            seed,
            momentum: 0.0,
            reco,
            loss_weights: LossWeights::default(),
            checkpoint_dir: None,
        }
    }

    pub fn validate(&self, adversarial: bool) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig("learning rate must be > 0".into()));
        }
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be >= 1".into()));
        }
        if adversarial && self.batch_size % 2 != 0 {
            return Err(Error::InvalidConfig(
                "adversarial batch size must be even (2m)".into(),
            ));
        }
        if self.momentum < 0.0 || self.momentum >= 1.0 {
            return Err(Error::InvalidConfig("momentum must be in [0, 1)".into()));
        }
        self.loss_weights.validate()
    }
}

/// One optimization step's losses; the unit of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainLogRecord {
    pub iter: usize,
    pub epoch: usize,
    pub d_loss: f64,
    pub g_gan: f64,
    pub reco: f64,
    pub kl: f64,
    pub total: f64,
    pub wall_ms: f64,
}

impl TrainLogRecord {
    fn check_finite(self) -> Result<Self> {
        let vals = [self.d_loss, self.g_gan, self.reco, self.kl, self.total];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteLoss {
                iter: self.iter,
                detail: format!(
                    "epoch {} d_loss {} g_gan {} reco {} kl {} total {}",
                    self.epoch, self.d_loss, self.g_gan, self.reco, self.kl, self.total
                ),
            });
        }
        Ok(self)
    }
}

pub const TRAIN_LOG_HEADER: &str = "iter,epoch,d_loss,g_gan,reco,kl,total,wall_ms";

pub fn write_train_log(path: &Path, records: &[TrainLogRecord]) -> Result<()> {
    let io_err = |e: std::io::Error| Error::Io {
        path: path.to_path_buf(),
        source: e,
    };
    let mut out = String::from(TRAIN_LOG_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.iter, r.epoch, r.d_loss, r.g_gan, r.reco, r.kl, r.total, r.wall_ms
        ));
    }
    std::fs::write(path, out).map_err(io_err)
}

pub fn read_train_log(path: &Path) -> Result<Vec<TrainLogRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == TRAIN_LOG_HEADER => {}
        other => {
            return Err(Error::ManifestParse {
                path: path.to_path_buf(),
                line: 1,
                msg: format!("expected header `{TRAIN_LOG_HEADER}`, got {other:?}"),
            })
        }
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 8 {
            return Err(Error::ManifestParse {
                path: path.to_path_buf(),
                line: i + 2,
                msg: format!("expected 8 fields, got {}", fields.len()),
            });
        }
        let parse_f = |s: &str| -> Result<f64> {
            s.parse().map_err(|_| Error::ManifestParse {
                path: path.to_path_buf(),
                line: i + 2,
                msg: format!("bad float `{s}`"),
            })
        };
        out.push(TrainLogRecord {
            iter: fields[0].parse().unwrap_or(0),
            epoch: fields[1].parse().unwrap_or(0),
            d_loss: parse_f(fields[2])?,
            g_gan: parse_f(fields[3])?,
            reco: parse_f(fields[4])?,
            kl: parse_f(fields[5])?,
            total: parse_f(fields[6])?,
            wall_ms: parse_f(fields[7])?,
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Data loading
// ---------------------------------------------------------------------------

/// A split decoded into memory as (3, H, W) f32 planes.
pub struct LoadedSplit {
    pub images: Vec<Vec<f32>>,
    pub labels: Vec<ClassLabel>,
    pub height: usize,
    pub width: usize,
}

impl LoadedSplit {
    pub fn len(&self) -> usize {
        self.images.len()
    }
    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn indices_of(&self, label: ClassLabel) -> Vec<usize> {
        (0..self.labels.len())
            .filter(|&i| self.labels[i] == label)
            .collect()
    }

    /// Stack images by index into an (n, 3, H, W) batch.
    pub fn batch(&self, idx: &[usize]) -> ArrayD<f32> {
        let plane = 3 * self.height * self.width;
        let mut data = Vec::with_capacity(idx.len() * plane);
        for &i in idx {
            data.extend_from_slice(&self.images[i]);
        }
        ArrayD::from_shape_vec(IxDyn(&[idx.len(), 3, self.height, self.width]), data).unwrap()
    }
}

fn patch_to_planes(p: &RgbPatch) -> Vec<f32> {
    let (h, w) = (p.height(), p.width());
    let mut out = vec![0.0f32; 3 * h * w];
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                out[(c * h + y) * w + x] = p.data()[[y, x, c]] as f32;
            }
        }
    }
    out
}

/// Decode one split of one profile into memory.
pub fn load_split(
    manifest: &DatasetManifest,
    split: Split,
    profile: &str,
) -> Result<LoadedSplit> {
    let records = manifest.filter(split, profile);
    if records.is_empty() {
        return Err(Error::InsufficientData(format!(
            "no records for split {split} profile {profile}"
        )));
    }
    let decoded: Vec<Result<(Vec<f32>, ClassLabel, usize, usize)>> = records
        .par_iter()
        .map(|r| {
            let p = load_patch(&manifest.resolve(r))?;
            Ok((patch_to_planes(&p), r.label, p.height(), p.width()))
        })
        .collect();
    let mut images = Vec::with_capacity(records.len());
    let mut labels = Vec::with_capacity(records.len());
    let mut dims = None;
    for d in decoded {
        let (img, label, h, w) = d?;
        match dims {
            None => dims = Some((h, w)),
            Some(d0) if d0 != (h, w) => {
                return Err(Error::DimensionMismatch(format!(
                    "mixed patch sizes in split: {d0:?} vs {:?}",
                    (h, w)
                )))
            }
            _ => {}
        }
        images.push(img);
        labels.push(label);
    }
    let (height, width) = dims.unwrap();
    Ok(LoadedSplit {
        images,
        labels,
        height,
        width,
    })
}

// ---------------------------------------------------------------------------
// Balanced sampling
// ---------------------------------------------------------------------------

/// Exactly m tumor + m normal records in shuffled order.
pub fn sample_balanced_minibatch<'a>(
    records: &[&'a ManifestRecord],
    m: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<&'a ManifestRecord>> {
    let tumor: Vec<&&ManifestRecord> = records
        .iter()
        .filter(|r| r.label == ClassLabel::Tumor)
        .collect();
    let normal: Vec<&&ManifestRecord> = records
        .iter()
        .filter(|r| r.label == ClassLabel::Normal)
        .collect();
    if tumor.len() < m || normal.len() < m {
        return Err(Error::InsufficientData(format!(
            "need {m} of each class, have {} tumor / {} normal",
            tumor.len(),
            normal.len()
        )));
    }
    let mut batch: Vec<&ManifestRecord> = Vec::with_capacity(2 * m);
    for pool in [tumor, normal] {
        let chosen: Vec<&&&ManifestRecord> =
            pool.iter().collect::<Vec<_>>().choose_multiple(rng, m).cloned().collect();
        for r in chosen {
            batch.push(**r);
        }
    }
    batch.shuffle(rng);
    Ok(batch)
}

// ---------------------------------------------------------------------------
// Classifier stage
// ---------------------------------------------------------------------------

fn serde_json_for<T: Serialize>(kind: &str, cfg: &T) -> String {
    serde_json::json!({ "kind": kind, "config": cfg }).to_string()
}

/// Parse the embedded config of a checkpoint written by this trainer.
pub fn parse_checkpoint_config<T: for<'de> Deserialize<'de>>(
    json: &str,
    expect_kind: &str,
) -> Result<T> {
    let v: serde_json::Value = serde_json::from_str(json)
        .map_err(|e| Error::InvalidConfig(format!("bad checkpoint config json: {e}")))?;
    let kind = v.get("kind").and_then(|k| k.as_str()).unwrap_or("");
    if kind != expect_kind {
        return Err(Error::InvalidConfig(format!(
            "checkpoint holds a `{kind}` model, expected `{expect_kind}`"
        )));
    }
    serde_json::from_value(v.get("config").cloned().unwrap_or_default())
        .map_err(|e| Error::InvalidConfig(format!("bad {expect_kind} config: {e}")))
}

/// Cross-entropy SGD training of the diagnosis net on one profile's train
/// split.
pub fn train_classifier(
    manifest: &DatasetManifest,
    profile: &str,
    clf_cfg: &ClassifierConfig,
    cfg: &TrainConfig,
) -> Result<(ParamStore<f32>, Vec<TrainLogRecord>)> {
    cfg.validate(false)?;
    let data = load_split(manifest, Split::Train, profile)?;
    let n_tumor = data.indices_of(ClassLabel::Tumor).len();
    if n_tumor == 0 || n_tumor == data.len() {
        return Err(Error::InsufficientData(
            "classifier training needs both classes in the train split".into(),
        ));
    }

    let mut params = classifier_init::<f32>(
        clf_cfg,
        &mut ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, &[TAG_CLF_INIT])),
    );
    let mut velocity = HashMap::new();
    let mut log = Vec::new();
    let mut iter = 0usize;

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, &[TAG_CLF_EPOCH, epoch as u64]));
        order.shuffle(&mut rng);
        let n_batches = data.len() / cfg.batch_size;
        for bi in 0..n_batches {
            let idx = &order[bi * cfg.batch_size..(bi + 1) * cfg.batch_size];
            let t0 = Instant::now();
            let tape = Tape::<f32>::new();
            let binding = params.bind(&tape, false);
            let x = tape.leaf(data.batch(idx));
            let out = classifier_forward(clf_cfg, &tape, &binding, x);
            // one-hot mask picks the true-class probability per row
            let mut mask = ArrayD::zeros(IxDyn(&[idx.len(), 2]));
            for (row, &i) in idx.iter().enumerate() {
                let col = if data.labels[i] == ClassLabel::Tumor { 1 } else { 0 };
                mask[[row, col]] = 1.0f32;
            }
            let mask = tape.leaf(mask);
            let picked = tape.mul(out.probs, mask);
            let p_true = tape.row_sum(picked);
            let p_safe = tape.add_const(p_true, 1e-12);
            let lp = tape.ln(p_safe);
            let nll = tape.mean_all(lp);
            let loss = tape.scale(nll, -1.0);
            let grads = tape.backward(loss);
            params.apply_sgd(&binding, &grads, cfg.learning_rate, cfg.momentum, &mut velocity);

            iter += 1;
            let rec = TrainLogRecord {
                iter,
                epoch,
                d_loss: 0.0,
                g_gan: 0.0,
                reco: 0.0,
                kl: 0.0,
                total: tape.scalar(loss) as f64,
                wall_ms: t0.elapsed().as_secs_f64() * 1e3,
            }
            .check_finite()?;
            log.push(rec);
        }
        if let Some(dir) = &cfg.checkpoint_dir {
            std::fs::create_dir_all(dir).map_err(|e| Error::Io {
                path: dir.clone(),
                source: e,
            })?;
            save_checkpoint(
                &dir.join(format!("classifier_epoch{epoch:03}.ckpt")),
                &serde_json_for("classifier", clf_cfg),
                &params,
            )?;
        }
    }
    if let Some(dir) = &cfg.checkpoint_dir {
        save_checkpoint(
            &dir.join("classifier.ckpt"),
            &serde_json_for("classifier", clf_cfg),
            &params,
        )?;
    }
    Ok((params, log))
}

// ---------------------------------------------------------------------------
// Adversarial stage
// ---------------------------------------------------------------------------

pub struct GanNets {
    pub gen_cfg: GeneratorConfig,
    pub disc_cfg: DiscriminatorConfig,
    pub clf_cfg: ClassifierConfig,
}

pub struct GanOutput {
    pub generator: ParamStore<f32>,
    pub discriminator: ParamStore<f32>,
    pub log: Vec<TrainLogRecord>,
}

/// One minibatch update: ascend the discriminator objective on the frozen
/// fake batch, then descend the generator on the weighted sum of its
/// adversarial, reconstruction, and feature-preservation terms, recomputing
/// D with its fresh parameters. The classifier is never touched.
#[allow(clippy::too_many_arguments)]
pub fn gan_training_step(
    nets: &GanNets,
    g_params: &mut ParamStore<f32>,
    d_params: &mut ParamStore<f32>,
    c_params: &ParamStore<f32>,
    batch: ArrayD<f32>,
    cfg: &TrainConfig,
    ms: &MetricSettings,
    iter: usize,
    epoch: usize,
    vel_g: &mut HashMap<String, ArrayD<f32>>,
    vel_d: &mut HashMap<String, ArrayD<f32>>,
) -> Result<TrainLogRecord> {
    let t0 = Instant::now();
    let (h, w) = (batch.shape()[2], batch.shape()[3]);
    let tape = Tape::<f32>::new();
    let gb = g_params.bind(&tape, false);
    let x = tape.leaf(batch);
    let xhat = generator_forward(&nets.gen_cfg, &tape, &gb, x)?;

    // discriminator update on the detached fakes
    let xhat_frozen = tape.detach(xhat);
    let db = d_params.bind(&tape, false);
    let d_real = discriminator_forward(&nets.disc_cfg, &tape, &db, x);
    let d_fake_frozen = discriminator_forward(&nets.disc_cfg, &tape, &db, xhat_frozen);
    let (d_objective, _) = gan_losses_graph(&tape, d_real, d_fake_frozen);
    let d_loss = tape.scale(d_objective, -1.0);
    let d_grads = tape.backward(d_loss);
    d_params.apply_sgd(&db, &d_grads, cfg.learning_rate, cfg.momentum, vel_d);

    // generator update against the updated, frozen discriminator
    let db_new = d_params.bind(&tape, true);
    let d_fake = discriminator_forward(&nets.disc_cfg, &tape, &db_new, xhat);
    let g_gan = gan_generator_term_graph(&tape, d_fake);

    let reco = match cfg.reco {
        RecoKind::Mse => mse_loss_graph(&tape, x, xhat),
        RecoKind::Ssim => ssim_loss_graph(&tape, x, xhat, &ms.window, &ms.ssim),
        RecoKind::Dscsi => dscsi_loss_graph(&tape, x, xhat, &ms.dscsi, &ms.vc, h, w),
    };

    let cb = c_params.bind(&tape, true);
    let f_x = classifier_forward(&nets.clf_cfg, &tape, &cb, x).features;
    let f_xhat = classifier_forward(&nets.clf_cfg, &tape, &cb, xhat).features;
    let kl = feature_kl_graph(&tape, f_x, f_xhat);

    let lw = &cfg.loss_weights;
    let t_gan = tape.scale(g_gan, lw.alpha);
    let t_reco = tape.scale(reco, lw.beta);
    let t_kl = tape.scale(kl, lw.gamma);
    let partial = tape.add(t_gan, t_reco);
    let total = tape.add(partial, t_kl);
    let g_grads = tape.backward(total);
    g_params.apply_sgd(&gb, &g_grads, cfg.learning_rate, cfg.momentum, vel_g);

    TrainLogRecord {
        iter,
        epoch,
        d_loss: -tape.scalar(d_objective) as f64,
        g_gan: tape.scalar(g_gan) as f64,
        reco: tape.scalar(reco) as f64,
        kl: tape.scalar(kl) as f64,
        total: tape.scalar(total) as f64,
        wall_ms: t0.elapsed().as_secs_f64() * 1e3,
    }
    .check_finite()
}

/// Full adversarial training on one profile's train split.
pub fn train_gan(
    manifest: &DatasetManifest,
    profile: &str,
    nets: &GanNets,
    c_params: &ParamStore<f32>,
    cfg: &TrainConfig,
    ms: &MetricSettings,
) -> Result<GanOutput> {
    train_gan_resume(manifest, profile, nets, c_params, cfg, ms, None, 1)
}

/// Resume-capable variant: supply the parameters restored from an epoch
/// checkpoint and the first epoch still to run.
#[allow(clippy::too_many_arguments)]
pub fn train_gan_resume(
    manifest: &DatasetManifest,
    profile: &str,
    nets: &GanNets,
    c_params: &ParamStore<f32>,
    cfg: &TrainConfig,
    ms: &MetricSettings,
    init: Option<(ParamStore<f32>, ParamStore<f32>)>,
    start_epoch: usize,
) -> Result<GanOutput> {
    cfg.validate(true)?;
    nets.gen_cfg.validate()?;
    let data = load_split(manifest, Split::Train, profile)?;
    nets.gen_cfg.check_side(data.height)?;
    nets.gen_cfg.check_side(data.width)?;
    let tumor_idx = data.indices_of(ClassLabel::Tumor);
    let normal_idx = data.indices_of(ClassLabel::Normal);
    let m = cfg.batch_size / 2;
    if tumor_idx.len() < m || normal_idx.len() < m {
        return Err(Error::InsufficientData(format!(
            "need {m} patches per class, have {} tumor / {} normal",
            tumor_idx.len(),
            normal_idx.len()
        )));
    }

    let (mut g_params, mut d_params) = match init {
        Some((g, d)) => (g, d),
        None => (
            generator_init::<f32>(
                &nets.gen_cfg,
                &mut ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, &[TAG_GEN_INIT])),
            ),
            discriminator_init::<f32>(
                &nets.disc_cfg,
                &mut ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, &[TAG_DISC_INIT])),
            ),
        ),
    };
    let mut vel_g = HashMap::new();
    let mut vel_d = HashMap::new();
    let mut log = Vec::new();
    let steps_per_epoch = tumor_idx.len().min(normal_idx.len()) / m;
    let mut iter = (start_epoch - 1) * steps_per_epoch;

    for epoch in start_epoch..=cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, &[TAG_GAN_EPOCH, epoch as u64]));
        let mut t_pool = tumor_idx.clone();
        let mut n_pool = normal_idx.clone();
        t_pool.shuffle(&mut rng);
        n_pool.shuffle(&mut rng);
        for s in 0..steps_per_epoch {
            let mut idx: Vec<usize> = Vec::with_capacity(2 * m);
            idx.extend_from_slice(&t_pool[s * m..(s + 1) * m]);
            idx.extend_from_slice(&n_pool[s * m..(s + 1) * m]);
            idx.shuffle(&mut rng);
            debug_assert_eq!(
                idx.iter().filter(|&&i| data.labels[i] == ClassLabel::Tumor).count(),
                m
            );
            iter += 1;
            let rec = gan_training_step(
                nets,
                &mut g_params,
                &mut d_params,
                c_params,
                data.batch(&idx),
                cfg,
                ms,
                iter,
                epoch,
                &mut vel_g,
                &mut vel_d,
            )?;
            log.push(rec);
        }
        if let Some(dir) = &cfg.checkpoint_dir {
            std::fs::create_dir_all(dir).map_err(|e| Error::Io {
                path: dir.clone(),
                source: e,
            })?;
            save_checkpoint(
                &dir.join(format!("generator_epoch{epoch:03}.ckpt")),
                &serde_json_for("generator", &nets.gen_cfg),
                &g_params,
            )?;
            save_checkpoint(
                &dir.join(format!("discriminator_epoch{epoch:03}.ckpt")),
                &serde_json_for("discriminator", &nets.disc_cfg),
                &d_params,
            )?;
        }
    }
    if let Some(dir) = &cfg.checkpoint_dir {
        save_checkpoint(
            &dir.join("generator.ckpt"),
            &serde_json_for("generator", &nets.gen_cfg),
            &g_params,
        )?;
        save_checkpoint(
            &dir.join("discriminator.ckpt"),
            &serde_json_for("discriminator", &nets.disc_cfg),
            &d_params,
        )?;
    }
    Ok(GanOutput {
        generator: g_params,
        discriminator: d_params,
        log,
    })
}

// ---------------------------------------------------------------------------
// Inference and evaluation
// ---------------------------------------------------------------------------

/// Run the trained generator over patches; shapes are preserved and outputs
/// stay in [0, 1] by construction.
pub fn normalize_patches(
    gen_cfg: &GeneratorConfig,
    g_params: &ParamStore<f32>,
    patches: &[RgbPatch],
) -> Result<Vec<RgbPatch>> {
    let mut out = Vec::with_capacity(patches.len());
    for chunk in patches.chunks(16) {
        let (h, w) = (chunk[0].height(), chunk[0].width());
        for p in chunk {
            if (p.height(), p.width()) != (h, w) {
                return Err(Error::DimensionMismatch(
                    "normalize_patches requires uniform patch sizes per call".into(),
                ));
            }
        }
        let plane = 3 * h * w;
        let mut data = Vec::with_capacity(chunk.len() * plane);
        for p in chunk {
            data.extend_from_slice(&patch_to_planes(p));
        }
        let batch = ArrayD::from_shape_vec(IxDyn(&[chunk.len(), 3, h, w]), data).unwrap();
        let tape = Tape::<f32>::new();
        let b = g_params.bind(&tape, true);
        let x = tape.leaf(batch);
        let y = generator_forward(gen_cfg, &tape, &b, x)?;
        let yv = tape.value(y);
        for n in 0..chunk.len() {
            let one = ndarray::Array3::from_shape_fn((h, w, 3), |(yy, xx, c)| {
                (yv[[n, c, yy, xx]] as f64).clamp(0.0, 1.0)
            });
            out.push(RgbPatch::new(one)?);
        }
    }
    Ok(out)
}

/// Tumor-probability scores for a set of patches.
pub fn classifier_scores(
    clf_cfg: &ClassifierConfig,
    c_params: &ParamStore<f32>,
    patches: &[RgbPatch],
) -> Result<Vec<f64>> {
    let mut scores = Vec::with_capacity(patches.len());
    for chunk in patches.chunks(32) {
        let (h, w) = (chunk[0].height(), chunk[0].width());
        let plane = 3 * h * w;
        let mut data = Vec::with_capacity(chunk.len() * plane);
        for p in chunk {
            if (p.height(), p.width()) != (h, w) {
                return Err(Error::DimensionMismatch(
                    "classifier_scores requires uniform patch sizes per call".into(),
                ));
            }
            data.extend_from_slice(&patch_to_planes(p));
        }
        let batch = ArrayD::from_shape_vec(IxDyn(&[chunk.len(), 3, h, w]), data).unwrap();
        let tape = Tape::<f32>::new();
        let b = c_params.bind(&tape, true);
        let x = tape.leaf(batch);
        let out = classifier_forward(clf_cfg, &tape, &b, x);
        let probs = tape.value(out.probs);
        for n in 0..chunk.len() {
            scores.push(probs[[n, 1]] as f64);
        }
    }
    Ok(scores)
}

/// Classification quality of score/label pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub auc: f64,
    pub precision: f64,
    pub recall: f64,
    pub accuracy: f64,
    pub n_samples: usize,
    pub threshold: f64,
}

/// Rank-statistic AUC with midranks for ties; errors when one class is
/// absent.
pub fn auc_from_scores(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Degenerate(
            "AUC undefined on a single-class sample".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
    let mut ranks = vec![0.0f64; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = midrank;
        }
        i = j + 1;
    }
    let rank_sum_pos: f64 = (0..scores.len())
        .filter(|&k| labels[k])
        .map(|k| ranks[k])
        .sum();
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Thresholded confusion metrics plus AUC from scores and labels.
pub fn eval_report_from_scores(
    scores: &[f64],
    labels: &[bool],
    threshold: f64,
) -> Result<EvalReport> {
    let auc = auc_from_scores(scores, labels)?;
    let (mut tp, mut fp, mut fn_, mut tn) = (0usize, 0usize, 0usize, 0usize);
    for (&s, &l) in scores.iter().zip(labels) {
        let pred = s >= threshold;
        match (pred, l) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    let precision = if tp + fp > 0 {
        tp as f64 / (tp + fp) as f64
    } else {
        0.0
    };
    let recall = tp as f64 / (tp + fn_) as f64;
    let accuracy = (tp + tn) as f64 / scores.len() as f64;
    Ok(EvalReport {
        auc,
        precision,
        recall,
        accuracy,
        n_samples: scores.len(),
        threshold,
    })
}

/// Evaluate the diagnosis net on one split, optionally normalizing the
/// patches through a trained generator first.
pub fn evaluate_classifier(
    clf_cfg: &ClassifierConfig,
    c_params: &ParamStore<f32>,
    manifest: &DatasetManifest,
    split: Split,
    profile: &str,
    normalizer: Option<(&GeneratorConfig, &ParamStore<f32>)>,
) -> Result<EvalReport> {
    let records = manifest.filter(split, profile);
    if records.is_empty() {
        return Err(Error::InsufficientData(format!(
            "no records for split {split} profile {profile}"
        )));
    }
    let patches: Vec<Result<RgbPatch>> = records
        .par_iter()
        .map(|r| load_patch(&manifest.resolve(r)))
        .collect();
    let mut imgs = Vec::with_capacity(records.len());
    for p in patches {
        imgs.push(p?);
    }
    let imgs = match normalizer {
        Some((gcfg, gparams)) => normalize_patches(gcfg, gparams, &imgs)?,
        None => imgs,
    };
    let scores = classifier_scores(clf_cfg, c_params, &imgs)?;
    let labels: Vec<bool> = records.iter().map(|r| r.label == ClassLabel::Tumor).collect();
    eval_report_from_scores(&scores, &labels, 0.5)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn auc_perfect_and_random_and_confusion() {
        // perfect separation
        let scores = [0.9, 0.8, 0.7, 0.2, 0.1, 0.05];
        let labels = [true, true, true, false, false, false];
        let rep = eval_report_from_scores(&scores, &labels, 0.5).unwrap();
        assert_eq!(rep.auc, 1.0);
        assert_eq!(rep.precision, 1.0);
        assert_eq!(rep.recall, 1.0);
        assert_eq!(rep.accuracy, 1.0);

        // label-independent scores hover near 0.5 over 1000 samples
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let scores: Vec<f64> = (0..1000).map(|_| rng.gen_range(0.0..1.0)).collect();
        let labels: Vec<bool> = (0..1000).map(|i| i % 2 == 0).collect();
        let auc = auc_from_scores(&scores, &labels).unwrap();
        assert!((auc - 0.5).abs() < 0.05, "auc {auc}");

        // hand confusion: TP=8 FP=2 FN=2 TN=8
        let mut scores = Vec::new();
        let mut labels = Vec::new();
        for _ in 0..8 {
            scores.push(0.9);
            labels.push(true);
        }
        for _ in 0..2 {
            scores.push(0.9);
            labels.push(false);
        }
        for _ in 0..2 {
            scores.push(0.1);
            labels.push(true);
        }
        for _ in 0..8 {
            scores.push(0.1);
            labels.push(false);
        }
        let rep = eval_report_from_scores(&scores, &labels, 0.5).unwrap();
        assert!((rep.precision - 0.8).abs() < 1e-12);
        assert!((rep.recall - 0.8).abs() < 1e-12);
        assert!((rep.accuracy - 0.8).abs() < 1e-12);

        // single class errors
        assert!(auc_from_scores(&[0.1, 0.2], &[true, true]).is_err());
    }

    #[test]
    fn auc_handles_ties_as_half() {
        let scores = [0.5, 0.5, 0.5, 0.5];
        let labels = [true, false, true, false];
        let auc = auc_from_scores(&scores, &labels).unwrap();
        assert!((auc - 0.5).abs() < 1e-12);
    }

    #[test]
    fn train_config_validation() {
        let mut cfg = TrainConfig::gan_defaults(1, RecoKind::Ssim);
        assert!(cfg.validate(true).is_ok());
        cfg.batch_size = 5;
        assert!(cfg.validate(true).is_err());
        cfg.batch_size = 4;
        cfg.learning_rate = 0.0;
        assert!(cfg.validate(true).is_err());
    }

    #[test]
    fn train_log_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.csv");
        let recs = vec![
            TrainLogRecord {
                iter: 1,
                epoch: 1,
                d_loss: 1.5,
                g_gan: -0.7,
                reco: 0.9,
                kl: 0.01,
                total: 0.14,
                wall_ms: 12.5,
            },
            TrainLogRecord {
                iter: 2,
                epoch: 1,
                d_loss: 1.4,
                g_gan: -0.71,
                reco: 0.85,
                kl: 0.02,
                total: 0.13,
                wall_ms: 11.0,
            },
        ];
        write_train_log(&path, &recs).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with(TRAIN_LOG_HEADER));
        let back = read_train_log(&path).unwrap();
        assert_eq!(back, recs);
    }

    #[test]
    fn nonfinite_record_is_rejected() {
        let rec = TrainLogRecord {
            iter: 3,
            epoch: 1,
            d_loss: f64::NAN,
            g_gan: 0.0,
            reco: 0.0,
            kl: 0.0,
            total: 0.0,
            wall_ms: 0.0,
        };
        match rec.check_finite() {
            Err(Error::NonFiniteLoss { iter, .. }) => assert_eq!(iter, 3),
            other => panic!("expected NonFiniteLoss, got {other:?}"),
        }
    }
}
