//! Network architectures and the composite objective: a U-Net generator, a
//! vanilla GAN discriminator, a small residual classifier whose penultimate
//! features drive the KL feature-preservation term, and the weighted total
//! loss that balances the three.

use crate::error::{Error, Result};
use crate::tape::{Grads, Scalar, Tape, Var};
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

/// Probabilities are clamped into [EPS_PROB, 1 - EPS_PROB] before logs; the
/// adversarial objective is unbounded otherwise.
pub const EPS_PROB: f64 = 1e-7;

/// Smoothing inside the KL logs.
pub const EPS_KL: f64 = 1e-8;

// ---------------------------------------------------------------------------
// Configs
// ---------------------------------------------------------------------------

/// Encoder depth and width of the U-Net generator. Channel width doubles per
/// level and is capped at 64 to keep desk-scale training in minutes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub depth: usize,
    pub base_channels: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            depth: 3,
            base_channels: 16,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return Err(Error::InvalidConfig("generator depth must be >= 2".into()));
        }
        if self.base_channels == 0 {
            return Err(Error::InvalidConfig("base_channels must be >= 1".into()));
        }
        Ok(())
    }

    fn channels(&self, level: usize) -> usize {
        (self.base_channels << level).min(64)
    }

    pub fn check_side(&self, side: usize) -> Result<()> {
        let div = 1usize << self.depth;
        if side % div != 0 {
            return Err(Error::InvalidConfig(format!(
                "patch side {side} not divisible by 2^depth = {div}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub levels: usize,
    pub base_channels: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig {
            levels: 4,
            base_channels: 16,
        }
    }
}

impl DiscriminatorConfig {
    fn channels(&self, level: usize) -> usize {
        (self.base_channels << level).min(128)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub stages: usize,
    pub base_channels: usize,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            stages: 3,
            base_channels: 16,
        }
    }
}

impl ClassifierConfig {
    fn channels(&self, stage: usize) -> usize {
        (self.base_channels << stage).min(64)
    }

    /// Length of the pooled penultimate feature vector.
    pub fn feature_len(&self) -> usize {
        self.channels(self.stages - 1)
    }
}

/// Weights balancing the adversarial, reconstruction, and
/// feature-preservation terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 0.2,
            beta: 0.3,
            gamma: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 || self.beta < 0.0 || self.gamma < 0.0 {
            return Err(Error::InvalidConfig("loss weights must be >= 0".into()));
        }
        if self.alpha == 0.0 && self.beta == 0.0 && self.gamma == 0.0 {
            return Err(Error::InvalidConfig("loss weights are all zero".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Parameter store
// ---------------------------------------------------------------------------

/// Ordered, named parameter collection for one network.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<S: Scalar> {
    entries: Vec<(String, ArrayD<S>)>,
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
        }
    }

    pub fn insert(&mut self, name: &str, value: ArrayD<S>) {
        debug_assert!(
            !self.entries.iter().any(|(n, _)| n == name),
            "duplicate param {name}"
        );
        self.entries.push((name.to_string(), value));
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<S>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, v)| v)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<S>)> {
        self.entries.iter().map(|(n, v)| (n.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut ArrayD<S>)> {
        self.entries.iter_mut().map(|(n, v)| (n.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn n_values(&self) -> usize {
        self.entries.iter().map(|(_, v)| v.len()).sum()
    }

    /// Bind every parameter onto a tape; trainable unless `frozen`.
    pub fn bind(&self, tape: &Tape<S>, frozen: bool) -> Binding {
        let mut map = HashMap::new();
        for (name, value) in &self.entries {
            let var = if frozen {
                tape.leaf(value.clone())
            } else {
                tape.param(value.clone())
            };
            map.insert(name.clone(), var);
        }
        Binding { map }
    }

    /// SGD step (optionally with momentum) from one backward pass.
    pub fn apply_sgd(
        &mut self,
        binding: &Binding,
        grads: &Grads<S>,
        lr: f64,
        momentum: f64,
        velocity: &mut HashMap<String, ArrayD<S>>,
    ) {
        let lr = S::of(lr);
        let mu = S::of(momentum);
        for (name, value) in self.entries.iter_mut() {
            let var = binding.map[name.as_str()];
            let Some(g) = grads.get(var) else { continue };
            if momentum == 0.0 {
                let vs = value.as_slice_mut().unwrap();
                let gs = g.as_slice().unwrap();
                for (w, gi) in vs.iter_mut().zip(gs) {
                    *w -= lr * *gi;
                }
            } else {
                let vel = velocity
                    .entry(name.clone())
                    .or_insert_with(|| ArrayD::zeros(value.raw_dim()));
                let vs = value.as_slice_mut().unwrap();
                let gs = g.as_slice().unwrap();
                let hs = vel.as_slice_mut().unwrap();
                for i in 0..vs.len() {
                    hs[i] = mu * hs[i] + gs[i];
                    vs[i] -= lr * hs[i];
                }
            }
        }
    }

    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(n, v)| (n.clone(), v.mapv(|x| T::of(x.as_f64()))))
                .collect(),
        }
    }
}

/// Per-step map from parameter names to tape nodes.
pub struct Binding {
    map: HashMap<String, Var>,
}

impl Binding {
    pub fn get(&self, name: &str) -> Var {
        *self
            .map
            .get(name)
            .unwrap_or_else(|| panic!("unbound parameter {name}"))
    }
}

fn he_conv<S: Scalar>(rng: &mut ChaCha8Rng, o: usize, c: usize, kh: usize, kw: usize) -> ArrayD<S> {
    let fan_in = (c * kh * kw) as f64;
    let std = (2.0 / fan_in).sqrt();
    let n = o * c * kh * kw;
    let data: Vec<S> = (0..n)
        .map(|_| {
            // Box-Muller on two uniforms keeps the stream identical across platforms
            let u1: f64 = rng.gen_range(1e-12..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
            S::of(z * std)
        })
        .collect();
    ArrayD::from_shape_vec(IxDyn(&[o, c, kh, kw]), data).unwrap()
}

fn zeros<S: Scalar>(shape: &[usize]) -> ArrayD<S> {
    ArrayD::zeros(IxDyn(shape))
}

// ---------------------------------------------------------------------------
// Generator: U-Net
// ---------------------------------------------------------------------------

fn conv_block<S: Scalar>(
    store: &mut ParamStore<S>,
    rng: &mut ChaCha8Rng,
    name: &str,
    cin: usize,
    cout: usize,
    k: usize,
) {
    store.insert(&format!("{name}.w"), he_conv(rng, cout, cin, k, k));
    store.insert(&format!("{name}.b"), zeros(&[cout]));
}

fn apply_conv<S: Scalar>(
    tape: &Tape<S>,
    b: &Binding,
    name: &str,
    x: Var,
    stride: usize,
    pad: usize,
) -> Var {
    let y = tape.conv2d(x, b.get(&format!("{name}.w")), stride, pad);
    tape.bias_add(y, b.get(&format!("{name}.b")))
}

/// Fresh He-initialized generator parameters.
pub fn generator_init<S: Scalar>(cfg: &GeneratorConfig, rng: &mut ChaCha8Rng) -> ParamStore<S> {
    let mut store = ParamStore::new();
    let d = cfg.depth;
    conv_block(&mut store, rng, "g.enc0", 3, cfg.channels(0), 3);
    for i in 1..d {
        conv_block(
            &mut store,
            rng,
            &format!("g.enc{i}"),
            cfg.channels(i - 1),
            cfg.channels(i),
            3,
        );
    }
    conv_block(
        &mut store,
        rng,
        "g.bott",
        cfg.channels(d - 1),
        cfg.channels(d - 1),
        3,
    );
    let mut up_ch = cfg.channels(d - 1);
    for i in (0..d).rev() {
        let skip_ch = cfg.channels(i);
        conv_block(
            &mut store,
            rng,
            &format!("g.dec{i}.merge"),
            up_ch + skip_ch,
            skip_ch,
            1,
        );
        conv_block(&mut store, rng, &format!("g.dec{i}.conv"), skip_ch, skip_ch, 3);
        up_ch = skip_ch;
    }
    conv_block(&mut store, rng, "g.out", cfg.channels(0), 3, 3);
    store
}

/// Encoder-decoder pass with a skip connection at every level; the final
/// sigmoid keeps outputs in [0, 1] and the shape matches the input.
pub fn generator_forward<S: Scalar>(
    cfg: &GeneratorConfig,
    tape: &Tape<S>,
    b: &Binding,
    x: Var,
) -> Result<Var> {
    let shape = tape.shape(x);
    if shape.len() != 4 || shape[1] != 3 {
        return Err(Error::InvalidConfig(format!(
            "generator expects (N,3,H,W), got {shape:?}"
        )));
    }
    cfg.check_side(shape[2])?;
    cfg.check_side(shape[3])?;

    let d = cfg.depth;
    let mut skips = Vec::with_capacity(d);
    // center pixel values; sigmoid at the far end maps back into [0, 1]
    let x0 = tape.scale(x, 2.0);
    let xc = tape.add_const(x0, -1.0);
    let e0 = apply_conv(tape, b, "g.enc0", xc, 1, 1);
    let mut cur = tape.relu(e0);
    skips.push(cur);
    for i in 1..d {
        let e = apply_conv(tape, b, &format!("g.enc{i}"), cur, 2, 1);
        cur = tape.relu(e);
        skips.push(cur);
    }
    let bo = apply_conv(tape, b, "g.bott", cur, 2, 1);
    cur = tape.relu(bo);
    for i in (0..d).rev() {
        let up = tape.upsample2x(cur);
        let cat = tape.concat_c(up, skips[i]);
        let m = apply_conv(tape, b, &format!("g.dec{i}.merge"), cat, 1, 0);
        let m = tape.relu(m);
        let c = apply_conv(tape, b, &format!("g.dec{i}.conv"), m, 1, 1);
        cur = tape.relu(c);
    }
    let out = apply_conv(tape, b, "g.out", cur, 1, 1);
    Ok(tape.sigmoid(out))
}

// ---------------------------------------------------------------------------
// Discriminator
// ---------------------------------------------------------------------------

pub fn discriminator_init<S: Scalar>(
    cfg: &DiscriminatorConfig,
    rng: &mut ChaCha8Rng,
) -> ParamStore<S> {
    let mut store = ParamStore::new();
    let mut cin = 3;
    for i in 0..cfg.levels {
        conv_block(&mut store, rng, &format!("d.conv{i}"), cin, cfg.channels(i), 3);
        cin = cfg.channels(i);
    }
    // zero-initialized head: an untrained discriminator answers exactly 0.5
    store.insert("d.fc.w", zeros(&[cin, 1]));
    store.insert("d.fc.b", zeros(&[1]));
    store
}

/// Real-vs-generated probability in (0, 1), shape (N, 1).
pub fn discriminator_forward<S: Scalar>(
    cfg: &DiscriminatorConfig,
    tape: &Tape<S>,
    b: &Binding,
    x: Var,
) -> Var {
    let x0 = tape.scale(x, 2.0);
    let mut cur = tape.add_const(x0, -1.0);
    for i in 0..cfg.levels {
        let c = apply_conv(tape, b, &format!("d.conv{i}"), cur, 2, 1);
        cur = tape.leaky_relu(c, 0.2);
    }
    let pooled = tape.mean_spatial(cur);
    let logits = tape.matmul(pooled, b.get("d.fc.w"));
    let logits = tape.bias_add(logits, b.get("d.fc.b"));
    tape.sigmoid(logits)
}

// ---------------------------------------------------------------------------
// Classifier
// ---------------------------------------------------------------------------

pub fn classifier_init<S: Scalar>(cfg: &ClassifierConfig, rng: &mut ChaCha8Rng) -> ParamStore<S> {
    let mut store = ParamStore::new();
    conv_block(&mut store, rng, "c.stem", 3, cfg.channels(0), 3);
    let mut cin = cfg.channels(0);
    for i in 0..cfg.stages {
        let cout = cfg.channels(i);
        conv_block(&mut store, rng, &format!("c.s{i}.down"), cin, cout, 3);
        conv_block(&mut store, rng, &format!("c.s{i}.res1"), cout, cout, 3);
        conv_block(&mut store, rng, &format!("c.s{i}.res2"), cout, cout, 3);
        cin = cout;
    }
    store.insert("c.fc.w", zeros(&[cin, 2]));
    store.insert("c.fc.b", zeros(&[2]));
    store
}

/// Classifier outputs: softmax class probabilities, raw logits, and the
/// spatially average-pooled penultimate feature map.
pub struct ClassifierOutput {
    pub probs: Var,
    pub logits: Var,
    pub features: Var,
}

pub fn classifier_forward<S: Scalar>(
    cfg: &ClassifierConfig,
    tape: &Tape<S>,
    b: &Binding,
    x: Var,
) -> ClassifierOutput {
    let x0 = tape.scale(x, 2.0);
    let xc = tape.add_const(x0, -1.0);
    let stem = apply_conv(tape, b, "c.stem", xc, 1, 1);
    let mut cur = tape.relu(stem);
    for i in 0..cfg.stages {
        let down = apply_conv(tape, b, &format!("c.s{i}.down"), cur, 2, 1);
        let down = tape.relu(down);
        let r1 = apply_conv(tape, b, &format!("c.s{i}.res1"), down, 1, 1);
        let r1 = tape.relu(r1);
        let r2 = apply_conv(tape, b, &format!("c.s{i}.res2"), r1, 1, 1);
        let sum = tape.add(down, r2);
        cur = tape.relu(sum);
    }
    let features = tape.mean_spatial(cur);
    let logits = tape.matmul(features, b.get("c.fc.w"));
    let logits = tape.bias_add(logits, b.get("c.fc.b"));
    let probs = tape.softmax_rows(logits);
    ClassifierOutput {
        probs,
        logits,
        features,
    }
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

/// Adversarial objectives on (N,1) probability tensors: the discriminator
/// ascends `d_objective`, the generator descends `g_term`.
pub fn gan_losses_graph<S: Scalar>(tape: &Tape<S>, d_real: Var, d_fake: Var) -> (Var, Var) {
    let pr = tape.clamp(d_real, EPS_PROB, 1.0 - EPS_PROB);
    let pf = tape.clamp(d_fake, EPS_PROB, 1.0 - EPS_PROB);
    let log_pr = tape.ln(pr);
    let neg_pf = tape.scale(pf, -1.0);
    let one_m_pf = tape.add_const(neg_pf, 1.0);
    let log_1m_pf = tape.ln(one_m_pf);
    let m1 = tape.mean_all(log_pr);
    let g_term = tape.mean_all(log_1m_pf);
    let d_objective = tape.add(m1, g_term);
    (d_objective, g_term)
}

/// The generator's adversarial term alone: mean log(1 - D(xhat)).
pub fn gan_generator_term_graph<S: Scalar>(tape: &Tape<S>, d_fake: Var) -> Var {
    let pf = tape.clamp(d_fake, EPS_PROB, 1.0 - EPS_PROB);
    let neg_pf = tape.scale(pf, -1.0);
    let one_m_pf = tape.add_const(neg_pf, 1.0);
    let log_1m_pf = tape.ln(one_m_pf);
    tape.mean_all(log_1m_pf)
}

/// Plain evaluation of the adversarial objectives.
pub fn gan_losses(d_real: &[f64], d_fake: &[f64]) -> (f64, f64) {
    let clamp = |p: f64| p.clamp(EPS_PROB, 1.0 - EPS_PROB);
    let m1: f64 = d_real.iter().map(|&p| clamp(p).ln()).sum::<f64>() / d_real.len() as f64;
    let g: f64 = d_fake.iter().map(|&p| (1.0 - clamp(p)).ln()).sum::<f64>() / d_fake.len() as f64;
    (m1 + g, g)
}

/// KL(softmax(f_x) || softmax(f_xhat)) averaged over the batch; gradients
/// flow only through `f_xhat`.
pub fn feature_kl_graph<S: Scalar>(tape: &Tape<S>, f_x: Var, f_xhat: Var) -> Var {
    let n = tape.shape(f_x)[0];
    let p = tape.softmax_rows(tape.detach(f_x));
    let q = tape.softmax_rows(f_xhat);
    let p_eps = tape.add_const(p, EPS_KL);
    let q_eps = tape.add_const(q, EPS_KL);
    let lp = tape.ln(p_eps);
    let lq = tape.ln(q_eps);
    let diff = tape.sub(lp, lq);
    let w = tape.mul(p, diff);
    let total = tape.sum_all(w);
    tape.scale(total, 1.0 / n as f64)
}

/// KL divergence between softmax-normalized feature vectors.
pub fn feature_kl(f_x: &[f64], f_xhat: &[f64]) -> Result<f64> {
    if f_x.len() != f_xhat.len() {
        return Err(Error::DimensionMismatch(format!(
            "feature lengths {} vs {}",
            f_x.len(),
            f_xhat.len()
        )));
    }
    let softmax = |v: &[f64]| {
        let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
        let s: f64 = exps.iter().sum();
        exps.into_iter().map(|e| e / s).collect::<Vec<f64>>()
    };
    let p = softmax(f_x);
    let q = softmax(f_xhat);
    Ok(p.iter()
        .zip(&q)
        .map(|(&pi, &qi)| pi * ((pi + EPS_KL).ln() - (qi + EPS_KL).ln()))
        .sum())
}

/// alpha * l_gan + beta * l_reco + gamma * l_fp.
pub fn total_loss(l_gan: f64, l_reco: f64, l_fp: f64, w: &LossWeights) -> Result<f64> {
    w.validate()?;
    for (name, v) in [("gan", l_gan), ("reco", l_reco), ("fp", l_fp)] {
        if !v.is_finite() {
            return Err(Error::NonFiniteLoss {
                iter: 0,
                detail: format!("{name} component is {v}"),
            });
        }
    }
    Ok(w.alpha * l_gan + w.beta * l_reco + w.gamma * l_fp)
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

const CKPT_MAGIC: &[u8; 4] = b"SFCK";
const CKPT_VERSION: u32 = 1;

fn sha_hex(data: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(data);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Versioned binary container: magic, version, config digest, the config
/// JSON itself, then named f64 parameter blocks.
pub fn save_checkpoint<S: Scalar>(
    path: &Path,
    config_json: &str,
    store: &ParamStore<S>,
) -> Result<()> {
    let io_err = |e: std::io::Error| Error::Io {
        path: path.to_path_buf(),
        source: e,
    };
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io_err)?);
    f.write_all(CKPT_MAGIC).map_err(io_err)?;
    f.write_all(&CKPT_VERSION.to_le_bytes()).map_err(io_err)?;
    let digest = sha_hex(config_json.as_bytes());
    f.write_all(&(digest.len() as u32).to_le_bytes()).map_err(io_err)?;
    f.write_all(digest.as_bytes()).map_err(io_err)?;
    f.write_all(&(config_json.len() as u32).to_le_bytes())
        .map_err(io_err)?;
    f.write_all(config_json.as_bytes()).map_err(io_err)?;
    f.write_all(&(store.len() as u32).to_le_bytes()).map_err(io_err)?;
    for (name, value) in store.iter() {
        f.write_all(&(name.len() as u32).to_le_bytes()).map_err(io_err)?;
        f.write_all(name.as_bytes()).map_err(io_err)?;
        let shape = value.shape();
        f.write_all(&(shape.len() as u32).to_le_bytes()).map_err(io_err)?;
        for d in shape {
            f.write_all(&(*d as u64).to_le_bytes()).map_err(io_err)?;
        }
        for v in value.as_slice().unwrap() {
            f.write_all(&v.as_f64().to_le_bytes()).map_err(io_err)?;
        }
    }
    f.flush().map_err(io_err)?;
    Ok(())
}

/// Load a checkpoint; returns the embedded config JSON and the parameters.
pub fn load_checkpoint<S: Scalar>(path: &Path) -> Result<(String, ParamStore<S>)> {
    let bad = |msg: String| Error::Checkpoint {
        path: path.to_path_buf(),
        msg,
    };
    let mut f = std::io::BufReader::new(std::fs::File::open(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?);
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic).map_err(|e| bad(e.to_string()))?;
    if &magic != CKPT_MAGIC {
        return Err(bad("bad magic; not a checkpoint file".into()));
    }
    let mut u32buf = [0u8; 4];
    let mut u64buf = [0u8; 8];
    let mut read_u32 = |f: &mut dyn Read| -> Result<u32> {
        f.read_exact(&mut u32buf).map_err(|e| bad(e.to_string()))?;
        Ok(u32::from_le_bytes(u32buf))
    };
    let version = read_u32(&mut f)?;
    if version != CKPT_VERSION {
        return Err(bad(format!(
            "unsupported version {version} (supported: {CKPT_VERSION})"
        )));
    }
    let dlen = read_u32(&mut f)? as usize;
    let mut digest = vec![0u8; dlen];
    f.read_exact(&mut digest).map_err(|e| bad(e.to_string()))?;
    let clen = read_u32(&mut f)? as usize;
    let mut cfg = vec![0u8; clen];
    f.read_exact(&mut cfg).map_err(|e| bad(e.to_string()))?;
    let config_json = String::from_utf8(cfg).map_err(|e| bad(e.to_string()))?;
    if sha_hex(config_json.as_bytes()).as_bytes() != digest.as_slice() {
        return Err(bad("config digest mismatch".into()));
    }
    let n = read_u32(&mut f)? as usize;
    let mut store = ParamStore::new();
    for _ in 0..n {
        let nlen = read_u32(&mut f)? as usize;
        let mut name = vec![0u8; nlen];
        f.read_exact(&mut name).map_err(|e| bad(e.to_string()))?;
        let name = String::from_utf8(name).map_err(|e| bad(e.to_string()))?;
        let ndim = read_u32(&mut f)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            f.read_exact(&mut u64buf).map_err(|e| bad(e.to_string()))?;
            shape.push(u64::from_le_bytes(u64buf) as usize);
        }
        let len: usize = shape.iter().product();
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            f.read_exact(&mut u64buf).map_err(|e| bad(e.to_string()))?;
            data.push(S::of(f64::from_le_bytes(u64buf)));
        }
        store.insert(&name, ArrayD::from_shape_vec(IxDyn(&shape), data).unwrap());
    }
    Ok((config_json, store))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::check::{max_relative_deviation, numeric_grad};
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn rand_batch(n: usize, c: usize, h: usize, w: usize, seed: u64) -> ArrayD<f64> {
        let mut r = rng(seed);
        let len = n * c * h * w;
        let data: Vec<f64> = (0..len).map(|_| r.gen_range(0.0..1.0)).collect();
        ArrayD::from_shape_vec(IxDyn(&[n, c, h, w]), data).unwrap()
    }

    #[test]
    fn generator_shape_range_and_skips() {
        let cfg = GeneratorConfig::default();
        let params = generator_init::<f64>(&cfg, &mut rng(1));
        let tape = Tape::<f64>::new();
        let b = params.bind(&tape, true);
        let x = tape.leaf(rand_batch(2, 3, 16, 16, 2));
        let y = generator_forward(&cfg, &tape, &b, x).unwrap();
        assert_eq!(tape.shape(y), vec![2, 3, 16, 16]);
        for v in tape.value(y).iter() {
            assert!((0.0..=1.0).contains(v));
        }
        // one merge block per encoder level = one skip connection per level
        let skips = params
            .iter()
            .filter(|(n, _)| n.ends_with(".merge.w"))
            .count();
        assert_eq!(skips, cfg.depth);
    }

    #[test]
    fn generator_rejects_indivisible_side() {
        let cfg = GeneratorConfig::default();
        let params = generator_init::<f64>(&cfg, &mut rng(1));
        let tape = Tape::<f64>::new();
        let b = params.bind(&tape, true);
        let x = tape.leaf(rand_batch(1, 3, 20, 20, 3));
        assert!(generator_forward(&cfg, &tape, &b, x).is_err());
    }

    #[test]
    fn generator_receptive_field_reaches_output() {
        let cfg = GeneratorConfig::default();
        let params = generator_init::<f64>(&cfg, &mut rng(7));
        let run = |input: &ArrayD<f64>| {
            let tape = Tape::<f64>::new();
            let b = params.bind(&tape, true);
            let x = tape.leaf(input.clone());
            let y = generator_forward(&cfg, &tape, &b, x).unwrap();
            tape.value(y)
        };
        let x0 = rand_batch(1, 3, 16, 16, 8);
        let y0 = run(&x0);
        let mut x1 = x0.clone();
        x1[[0, 1, 7, 9]] += 0.25;
        let y1 = run(&x1);
        let moved = y0
            .iter()
            .zip(y1.iter())
            .filter(|(a, b)| (**a - **b).abs() > 1e-12)
            .count();
        assert!(moved > 0, "perturbing one input pixel changed nothing");
    }

    #[test]
    fn discriminator_is_half_when_zero_head() {
        let cfg = DiscriminatorConfig::default();
        let params = discriminator_init::<f64>(&cfg, &mut rng(4));
        let tape = Tape::<f64>::new();
        let b = params.bind(&tape, true);
        let x = tape.leaf(rand_batch(3, 3, 32, 32, 5));
        let p = discriminator_forward(&cfg, &tape, &b, x);
        for v in tape.value(p).iter() {
            assert_eq!(*v, 0.5);
        }
    }

    #[test]
    fn classifier_probs_sum_to_one_and_feature_len() {
        let cfg = ClassifierConfig::default();
        let params = classifier_init::<f64>(&cfg, &mut rng(6));
        let tape = Tape::<f64>::new();
        let b = params.bind(&tape, true);
        let x = tape.leaf(rand_batch(4, 3, 32, 32, 7));
        let out = classifier_forward(&cfg, &tape, &b, x);
        let probs = tape.value(out.probs);
        for row in probs.as_slice().unwrap().chunks(2) {
            assert!((row[0] + row[1] - 1.0).abs() < 1e-9);
        }
        let f = tape.value(out.features);
        assert_eq!(f.shape(), &[4, cfg.feature_len()]);
        assert_eq!(cfg.feature_len(), 64);
    }

    #[test]
    fn gan_losses_known_values() {
        // optimal discriminator at the clamp
        let (d, _) = gan_losses(&[1.0], &[0.0]);
        assert!((d - 2.0 * (1.0 - EPS_PROB).ln()).abs() < 1e-15);
        assert!(d.abs() < 3e-7);

        let (_, g) = gan_losses(&[0.5], &[0.5]);
        assert!((g - 0.5f64.ln()).abs() < 1e-12);
        assert!((g + 0.6931).abs() < 1e-4);

        let (d, _) = gan_losses(&[0.5], &[0.5]);
        assert!((d - 2.0 * 0.5f64.ln()).abs() < 1e-12);
        assert!((d + 1.3863).abs() < 1e-4);
    }

    #[test]
    fn gan_losses_graph_matches_plain_and_gradchecks() {
        let dr = ArrayD::from_shape_vec(IxDyn(&[3, 1]), vec![0.8, 0.6, 0.9]).unwrap();
        let df = ArrayD::from_shape_vec(IxDyn(&[3, 1]), vec![0.3, 0.5, 0.2]).unwrap();
        let tape = Tape::<f64>::new();
        let a = tape.param(dr.clone());
        let c = tape.param(df.clone());
        let (d_obj, g_term) = gan_losses_graph(&tape, a, c);
        let (pd, pg) = gan_losses(dr.as_slice().unwrap(), df.as_slice().unwrap());
        assert!((tape.scalar(d_obj) - pd).abs() < 1e-12);
        assert!((tape.scalar(g_term) - pg).abs() < 1e-12);

        let analytic = tape.backward(d_obj);
        let ga = analytic.get(a).unwrap().clone();
        let num = numeric_grad(
            |probe| {
                let t = Tape::<f64>::new();
                let av = t.param(probe.clone());
                let cv = t.leaf(df.clone());
                let (obj, _) = gan_losses_graph(&t, av, cv);
                t.scalar(obj)
            },
            &dr,
            1e-6,
        );
        assert!(max_relative_deviation(&ga, &num, None) < 1e-6);
    }

    #[test]
    fn feature_kl_known_values() {
        assert_eq!(feature_kl(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);

        // logits giving p = (0.5, 0.5), q = (0.9, 0.1)
        let p_logits = [0.0, 0.0];
        let q_logits = [(0.9f64 / 0.1).ln(), 0.0];
        let kl = feature_kl(&p_logits, &q_logits).unwrap();
        let expect = 0.5 * (0.5f64 / 0.9).ln() + 0.5 * (0.5f64 / 0.1).ln();
        assert!((kl - expect).abs() < 1e-6);
        assert!((kl - 0.5108).abs() < 1e-4);

        let rev = feature_kl(&q_logits, &p_logits).unwrap();
        let expect_rev = 0.9 * (0.9f64 / 0.5).ln() + 0.1 * (0.1f64 / 0.5).ln();
        assert!((rev - expect_rev).abs() < 1e-6);
        assert!((rev - 0.3680).abs() < 1e-3);
        assert!((kl - rev).abs() > 1e-3, "KL should be asymmetric");

        assert!(feature_kl(&[0.1], &[0.1, 0.2]).is_err());
    }

    #[test]
    fn feature_kl_graph_nonneg_and_gradchecks() {
        let fx = ArrayD::from_shape_vec(IxDyn(&[2, 4]), vec![0.3, -0.2, 1.0, 0.5, 0.0, 0.1, -0.4, 0.9])
            .unwrap();
        let fy = ArrayD::from_shape_vec(IxDyn(&[2, 4]), vec![0.1, 0.2, 0.8, 0.4, 0.3, -0.1, 0.0, 1.1])
            .unwrap();
        let tape = Tape::<f64>::new();
        let a = tape.leaf(fx.clone());
        let c = tape.param(fy.clone());
        let kl = feature_kl_graph(&tape, a, c);
        assert!(tape.scalar(kl) >= 0.0);

        let analytic = tape.backward(kl);
        let g = analytic.get(c).unwrap().clone();
        let num = numeric_grad(
            |probe| {
                let t = Tape::<f64>::new();
                let av = t.leaf(fx.clone());
                let cv = t.param(probe.clone());
                t.scalar(feature_kl_graph(&t, av, cv))
            },
            &fy,
            1e-6,
        );
        assert!(max_relative_deviation(&g, &num, None) < 1e-6);

        // zero at identical features
        let t2 = Tape::<f64>::new();
        let a2 = t2.leaf(fx.clone());
        let c2 = t2.param(fx.clone());
        let kl2 = feature_kl_graph(&t2, a2, c2);
        assert!(t2.scalar(kl2).abs() < 1e-12);
    }

    #[test]
    fn total_loss_paper_weights() {
        let w = LossWeights::default();
        assert_eq!((w.alpha, w.beta, w.gamma), (0.2, 0.3, 0.5));
        assert!((total_loss(1.0, 1.0, 1.0, &w).unwrap() - 1.0).abs() < 1e-12);
        let v = total_loss(-0.6931, 0.2003, 0.5108, &w).unwrap();
        assert!((v - (0.2 * -0.6931 + 0.3 * 0.2003 + 0.5 * 0.5108)).abs() < 1e-12);
        assert!((v - 0.1769).abs() < 1e-3);
        assert!(total_loss(f64::NAN, 0.0, 0.0, &w).is_err());
        assert!(LossWeights {
            alpha: 0.0,
            beta: 0.0,
            gamma: 0.0
        }
        .validate()
        .is_err());
    }

    #[test]
    fn weight_degeneration_reduces_objective() {
        // beta = gamma = 0 leaves the pure GAN term; alpha = gamma = 0 leaves
        // pure reconstruction
        let g = -0.7;
        let r = 0.25;
        let f = 0.4;
        let gan_only = LossWeights {
            alpha: 1.0,
            beta: 0.0,
            gamma: 0.0,
        };
        assert_eq!(total_loss(g, r, f, &gan_only).unwrap(), g);
        let reco_only = LossWeights {
            alpha: 0.0,
            beta: 1.0,
            gamma: 0.0,
        };
        assert_eq!(total_loss(g, r, f, &reco_only).unwrap(), r);
    }

    #[test]
    fn checkpoint_roundtrip_bit_exact_forward() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = GeneratorConfig::default();
        let params = generator_init::<f32>(&cfg, &mut rng(42));
        let path = dir.path().join("g.ckpt");
        let json = serde_json::to_string(&cfg).unwrap();
        save_checkpoint(&path, &json, &params).unwrap();
        let (json2, loaded) = load_checkpoint::<f32>(&path).unwrap();
        assert_eq!(json, json2);
        assert_eq!(params, loaded);

        let x = rand_batch(1, 3, 16, 16, 9).mapv(|v| v as f32);
        let run = |p: &ParamStore<f32>| {
            let tape = Tape::<f32>::new();
            let b = p.bind(&tape, true);
            let xv = tape.leaf(x.clone());
            let y = generator_forward(&cfg, &tape, &b, xv).unwrap();
            tape.value(y)
        };
        let y1 = run(&params);
        let y2 = run(&loaded);
        assert_eq!(y1, y2);
    }

    #[test]
    fn checkpoint_rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"not a checkpoint").unwrap();
        assert!(load_checkpoint::<f32>(&path).is_err());
    }

    #[test]
    fn sgd_step_moves_against_gradient() {
        let mut store = ParamStore::<f64>::new();
        store.insert("w", ArrayD::from_elem(IxDyn(&[2]), 1.0));
        let tape = Tape::<f64>::new();
        let b = store.bind(&tape, false);
        let w = b.get("w");
        let sq = tape.mul(w, w);
        let loss = tape.mean_all(sq);
        let grads = tape.backward(loss);
        let mut vel = HashMap::new();
        store.apply_sgd(&b, &grads, 0.1, 0.0, &mut vel);
        // d(mean(w^2))/dw = w at len 2 -> w - 0.1*1.0 = 0.9
        for v in store.get("w").unwrap().iter() {
            assert!((v - 0.9).abs() < 1e-12);
        }
    }
}
