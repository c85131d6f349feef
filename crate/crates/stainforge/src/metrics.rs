//! Windowed structural similarity: SSIM over grayscale, DSCSI over S-CIELAB
//! LCh with directional hue statistics, and the corresponding differentiable
//! reconstruction losses.
//!
//! Every metric is evaluated by running the same tape graph the training
//! losses use, so the number a test oracle checks is exactly the number the
//! generator is optimized against.

use crate::color::{self, GrayPatch, RgbPatch, ViewingConditions};
use crate::error::{Error, Result};
use crate::tape::{Scalar, Tape, Var};
use ndarray::{Array2, ArrayD, IxDyn};

/// Stabilizer added inside the chroma sqrt so hue gradients exist at zero
/// chroma: C = sqrt(a^2 + b^2 + CHROMA_EPS^2).
pub const CHROMA_EPS: f64 = 1e-6;

/// Stabilizer added inside window-variance square roots.
const VAR_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WindowKind {
    Gaussian { sigma: f64 },
    Uniform,
}

/// Sliding-window shape shared by SSIM and DSCSI.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowConfig {
    pub size: usize,
    pub kind: WindowKind,
    pub stride: usize,
}

impl Default for WindowConfig {
    fn default() -> Self {
        WindowConfig {
            size: 11,
            kind: WindowKind::Gaussian { sigma: 1.5 },
            stride: 1,
        }
    }
}

impl WindowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size < 3 || self.size % 2 == 0 {
            return Err(Error::InvalidConfig(format!(
                "window size must be odd and >= 3, got {}",
                self.size
            )));
        }
        if self.stride == 0 {
            return Err(Error::InvalidConfig("stride must be >= 1".into()));
        }
        if let WindowKind::Gaussian { sigma } = self.kind {
            if !(sigma > 0.0) {
                return Err(Error::InvalidConfig(format!("sigma must be > 0, got {sigma}")));
            }
        }
        Ok(())
    }

    /// Unit-sum 2D window weights.
    pub fn kernel(&self) -> Array2<f64> {
        let k = self.size;
        let mut w = Array2::zeros((k, k));
        match self.kind {
            WindowKind::Uniform => w.fill(1.0 / (k * k) as f64),
            WindowKind::Gaussian { sigma } => {
                let r = (k / 2) as f64;
                let s2 = 2.0 * sigma * sigma;
                for i in 0..k {
                    for j in 0..k {
                        let dy = i as f64 - r;
                        let dx = j as f64 - r;
                        w[[i, j]] = (-(dy * dy + dx * dx) / s2).exp();
                    }
                }
                let sum = w.sum();
                w.mapv_inplace(|v| v / sum);
            }
        }
        w
    }

    fn kernel_var<S: Scalar>(&self, tape: &Tape<S>) -> Var {
        let k = self.kernel();
        let flat: Vec<S> = k.iter().map(|&v| S::of(v)).collect();
        tape.leaf(ArrayD::from_shape_vec(IxDyn(&[1, 1, self.size, self.size]), flat).unwrap())
    }
}

/// SSIM stabilizing constants; C1 = (K1*L)^2, C2 = (K2*L)^2.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimConstants {
    pub k1: f64,
    pub k2: f64,
    pub l_range: f64,
}

impl Default for SsimConstants {
    fn default() -> Self {
        SsimConstants {
            k1: 0.01,
            k2: 0.03,
            l_range: 1.0,
        }
    }
}

impl SsimConstants {
    pub fn c1(&self) -> f64 {
        (self.k1 * self.l_range).powi(2)
    }
    pub fn c2(&self) -> f64 {
        (self.k2 * self.l_range).powi(2)
    }
    pub fn validate(&self) -> Result<()> {
        if self.k1 <= 0.0 || self.k2 <= 0.0 || self.l_range <= 0.0 {
            return Err(Error::InvalidConfig("SSIM constants must be positive".into()));
        }
        Ok(())
    }
}

/// DSCSI channel stabilizers and pooling knobs. Lightness and chroma live on
/// a ~[0, 100] scale, so their constants follow the SSIM convention scaled to
/// that range; hue dispersion is compared on [0, 1] resultant lengths.
#[derive(Debug, Clone, PartialEq)]
pub struct DscsiConfig {
    pub window: WindowConfig,
    pub k_l: f64,
    pub k_c: f64,
    pub k_h: f64,
    /// Exponent on the chromatic score; 1.0 multiplies the two scores as-is.
    pub lambda_chroma: f64,
    /// Mean-chroma level below which a window pair counts as achromatic and
    /// its hue and chroma-contrast terms are fixed at 1.
    pub tau_chroma: f64,
}

impl Default for DscsiConfig {
    fn default() -> Self {
        DscsiConfig {
            window: WindowConfig::default(),
            k_l: 9.0,
            k_c: 9.0,
            k_h: 0.01,
            lambda_chroma: 1.0,
            tau_chroma: 2.0,
        }
    }
}

impl DscsiConfig {
    pub fn validate(&self) -> Result<()> {
        self.window.validate()?;
        if self.k_l <= 0.0 || self.k_c <= 0.0 || self.k_h <= 0.0 {
            return Err(Error::InvalidConfig("channel constants must be > 0".into()));
        }
        if self.lambda_chroma < 0.0 {
            return Err(Error::InvalidConfig("lambda_chroma must be >= 0".into()));
        }
        if self.tau_chroma < 0.0 {
            return Err(Error::InvalidConfig("tau_chroma must be >= 0".into()));
        }
        Ok(())
    }
}

/// Scalar similarity in [-1, 1]; 1 means identical.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimilarityScore(f64);

impl SimilarityScore {
    pub(crate) fn new(v: f64) -> Self {
        debug_assert!(v <= 1.0 + 1e-9, "similarity {v} above 1");
        SimilarityScore(v)
    }
    pub fn value(&self) -> f64 {
        self.0
    }
}

/// Weighted per-window first and second moments of a pair of gray images.
#[derive(Debug, Clone)]
pub struct LocalStats {
    pub mu_x: Array2<f64>,
    pub mu_y: Array2<f64>,
    pub var_x: Array2<f64>,
    pub var_y: Array2<f64>,
    pub cov: Array2<f64>,
}

fn check_pair_dims(
    (hx, wx): (usize, usize),
    (hy, wy): (usize, usize),
    window: usize,
) -> Result<()> {
    if (hx, wx) != (hy, wy) {
        return Err(Error::DimensionMismatch(format!("{wx}x{hx} vs {wy}x{hy}")));
    }
    if hx < window || wx < window {
        return Err(Error::PatchSmallerThanWindow {
            dims: (hx, wx),
            window,
        });
    }
    Ok(())
}

fn gray_to_nchw<S: Scalar>(g: &GrayPatch) -> ArrayD<S> {
    let (h, w) = (g.height(), g.width());
    let mut out = ArrayD::zeros(IxDyn(&[1, 1, h, w]));
    for y in 0..h {
        for x in 0..w {
            out[[0, 0, y, x]] = S::of(g.data()[[y, x]]);
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Graph builders
// ---------------------------------------------------------------------------

struct WindowMoments {
    mu_x: Var,
    mu_y: Var,
    var_x: Var,
    var_y: Var,
    cov: Var,
}

/// Weighted window moments of two aligned single-channel maps.
fn window_moments<S: Scalar>(
    tape: &Tape<S>,
    x: Var,
    y: Var,
    kernel: Var,
    stride: usize,
) -> WindowMoments {
    let wf = |v: Var| tape.conv2d(v, kernel, stride, 0);
    let mu_x = wf(x);
    let mu_y = wf(y);
    let xx = tape.mul(x, x);
    let yy = tape.mul(y, y);
    let xy = tape.mul(x, y);
    let mu_xx = tape.mul(mu_x, mu_x);
    let mu_yy = tape.mul(mu_y, mu_y);
    let mu_xy = tape.mul(mu_x, mu_y);
    let ex2 = wf(xx);
    let ey2 = wf(yy);
    let exy = wf(xy);
    let raw_var_x = tape.sub(ex2, mu_xx);
    let raw_var_y = tape.sub(ey2, mu_yy);
    let var_x = tape.clamp(raw_var_x, 0.0, f64::INFINITY);
    let var_y = tape.clamp(raw_var_y, 0.0, f64::INFINITY);
    let cov = tape.sub(exy, mu_xy);
    WindowMoments {
        mu_x,
        mu_y,
        var_x,
        var_y,
        cov,
    }
}

/// Ratio (2ab + k) / (a^2 + b^2 + k), the SSIM-style similarity kernel.
fn sim_ratio<S: Scalar>(tape: &Tape<S>, a: Var, b: Var, k: f64) -> Var {
    let ab = tape.mul(a, b);
    let num0 = tape.scale(ab, 2.0);
    let num = tape.add_const(num0, k);
    let aa = tape.mul(a, a);
    let bb = tape.mul(b, b);
    let den0 = tape.add(aa, bb);
    let den = tape.add_const(den0, k);
    tape.div(num, den)
}

/// Per-image SSIM scores (N, 1) of two gray (N,1,H,W) tensors.
pub fn ssim_graph<S: Scalar>(
    tape: &Tape<S>,
    gx: Var,
    gy: Var,
    w: &WindowConfig,
    k: &SsimConstants,
) -> Var {
    let kernel = w.kernel_var(tape);
    let m = window_moments(tape, gx, gy, kernel, w.stride);
    let c1 = k.c1();
    let c2 = k.c2();

    let mu_xy = tape.mul(m.mu_x, m.mu_y);
    let lum_num0 = tape.scale(mu_xy, 2.0);
    let lum_num = tape.add_const(lum_num0, c1);
    let mu_xx = tape.mul(m.mu_x, m.mu_x);
    let mu_yy = tape.mul(m.mu_y, m.mu_y);
    let lum_den0 = tape.add(mu_xx, mu_yy);
    let lum_den = tape.add_const(lum_den0, c1);

    let cs_num0 = tape.scale(m.cov, 2.0);
    let cs_num = tape.add_const(cs_num0, c2);
    let cs_den0 = tape.add(m.var_x, m.var_y);
    let cs_den = tape.add_const(cs_den0, c2);

    let num = tape.mul(lum_num, cs_num);
    let den = tape.mul(lum_den, cs_den);
    let map = tape.div(num, den);
    tape.mean_spatial(map)
}

/// Per-image DSCSI scores (N, 1) of two sRGB (N,3,H,W) tensors.
pub fn dscsi_graph<S: Scalar>(
    tape: &Tape<S>,
    x: Var,
    y: Var,
    cfg: &DscsiConfig,
    vc: &ViewingConditions,
    h: usize,
    w: usize,
) -> Var {
    let lab_x = color::scielab_graph(tape, x, vc, h, w);
    let lab_y = color::scielab_graph(tape, y, vc, h, w);

    let split = |lab: Var| -> (Var, Var, Var) {
        (
            tape.slice_c(lab, 0, 1),
            tape.slice_c(lab, 1, 1),
            tape.slice_c(lab, 2, 1),
        )
    };
    let (lx, ax, bx) = split(lab_x);
    let (ly, ay, by) = split(lab_y);

    // stabilized chroma and hue unit vectors
    let chroma = |a: Var, b: Var| -> (Var, Var, Var) {
        let aa = tape.mul(a, a);
        let bb = tape.mul(b, b);
        let s0 = tape.add(aa, bb);
        let s = tape.add_const(s0, CHROMA_EPS * CHROMA_EPS);
        let c = tape.sqrt(s);
        (c, tape.div(a, c), tape.div(b, c))
    };
    let (cx, ux, vx) = chroma(ax, bx);
    let (cy, uy, vy) = chroma(ay, by);

    let kernel = cfg.window.kernel_var(tape);
    let stride = cfg.window.stride;
    let wf = |v: Var| tape.conv2d(v, kernel, stride, 0);

    // lightness moments
    let ml = window_moments(tape, lx, ly, kernel, stride);
    let sd = |v: Var| {
        let ve = tape.add_const(v, VAR_EPS);
        tape.sqrt(ve)
    };
    let sig_lx = sd(ml.var_x);
    let sig_ly = sd(ml.var_y);

    // chroma moments
    let mc = window_moments(tape, cx, cy, kernel, stride);
    let sig_cx = sd(mc.var_x);
    let sig_cy = sd(mc.var_y);

    // hue circular statistics: window-weighted resultant vectors
    let cxb = wf(ux);
    let sxb = wf(vx);
    let cyb = wf(uy);
    let syb = wf(vy);
    let rlen = |c: Var, s: Var| {
        let cc = tape.mul(c, c);
        let ss = tape.mul(s, s);
        let sum0 = tape.add(cc, ss);
        let sum = tape.add_const(sum0, VAR_EPS);
        tape.sqrt(sum)
    };
    let r_x = rlen(cxb, sxb);
    let r_y = rlen(cyb, syb);

    // circular distance of the mean hues via the resultant vectors
    let cross0 = tape.mul(cxb, syb);
    let cross1 = tape.mul(sxb, cyb);
    let cross = tape.sub(cross0, cross1);
    let dot0 = tape.mul(cxb, cyb);
    let dot1 = tape.mul(sxb, syb);
    let dot = tape.add(dot0, dot1);
    let angle = tape.atan2(cross, dot);
    let delta = tape.abs(angle);

    // six similarity maps
    let s_h1 = {
        let t = tape.scale(delta, -1.0 / std::f64::consts::PI);
        tape.add_const(t, 1.0)
    };
    let s_h2 = sim_ratio(tape, r_x, r_y, cfg.k_h);
    let s_c1 = sim_ratio(tape, mc.mu_x, mc.mu_y, cfg.k_c);
    let s_c2 = sim_ratio(tape, sig_cx, sig_cy, cfg.k_c);
    let s_l1 = sim_ratio(tape, sig_lx, sig_ly, cfg.k_l);
    let s_l2 = {
        let num = tape.add_const(ml.cov, cfg.k_l / 2.0);
        let sig_prod = tape.mul(sig_lx, sig_ly);
        let den = tape.add_const(sig_prod, cfg.k_l / 2.0);
        tape.div(num, den)
    };

    // achromatic gate: both window mean chromas below tau
    let tau = S::of(cfg.tau_chroma);
    let mu_cx_val = tape.value(mc.mu_x);
    let mu_cy_val = tape.value(mc.mu_y);
    let mask = ndarray::Zip::from(&mu_cx_val)
        .and(&mu_cy_val)
        .map_collect(|&a, &b| if a < tau && b < tau { 1.0f64 } else { 0.0 });
    let ones = tape.leaf(ArrayD::from_elem(mu_cx_val.raw_dim(), S::one()));
    let s_h1 = tape.select(mask.clone(), ones, s_h1);
    let s_h2 = tape.select(mask.clone(), ones, s_h2);
    let s_c2 = tape.select(mask, ones, s_c2);

    let chrom0 = tape.mul(s_h1, s_h2);
    let chrom1 = tape.mul(chrom0, s_c1);
    let chrom = tape.mul(chrom1, s_c2);
    let achrom = tape.mul(s_l1, s_l2);

    let s_c = tape.mean_spatial(chrom);
    let s_a = tape.mean_spatial(achrom);
    let s_c_pow = if (cfg.lambda_chroma - 1.0).abs() < 1e-12 {
        s_c
    } else {
        tape.powf_const(s_c, cfg.lambda_chroma)
    };
    tape.mul(s_a, s_c_pow)
}

/// 1 - mean per-image SSIM of the grayscale maps, over a batch.
pub fn ssim_loss_graph<S: Scalar>(
    tape: &Tape<S>,
    x_rgb: Var,
    xhat_rgb: Var,
    w: &WindowConfig,
    k: &SsimConstants,
) -> Var {
    let gx = color::gray_graph(tape, x_rgb);
    let gy = color::gray_graph(tape, xhat_rgb);
    let scores = ssim_graph(tape, gx, gy, w, k);
    let mean = tape.mean_all(scores);
    let neg = tape.scale(mean, -1.0);
    tape.add_const(neg, 1.0)
}

/// 1 - mean per-image DSCSI, over a batch.
pub fn dscsi_loss_graph<S: Scalar>(
    tape: &Tape<S>,
    x_rgb: Var,
    xhat_rgb: Var,
    cfg: &DscsiConfig,
    vc: &ViewingConditions,
    h: usize,
    w: usize,
) -> Var {
    let scores = dscsi_graph(tape, x_rgb, xhat_rgb, cfg, vc, h, w);
    let mean = tape.mean_all(scores);
    let neg = tape.scale(mean, -1.0);
    tape.add_const(neg, 1.0)
}

/// Mean squared error over all pixels and channels.
pub fn mse_loss_graph<S: Scalar>(tape: &Tape<S>, x: Var, xhat: Var) -> Var {
    let d = tape.sub(x, xhat);
    let sq = tape.mul(d, d);
    tape.mean_all(sq)
}

// ---------------------------------------------------------------------------
// Plain entry points
// ---------------------------------------------------------------------------

/// Weighted per-window means, variances and covariance of a gray pair.
pub fn local_stats(x: &GrayPatch, y: &GrayPatch, w: &WindowConfig) -> Result<LocalStats> {
    w.validate()?;
    check_pair_dims((x.height(), x.width()), (y.height(), y.width()), w.size)?;
    let tape = Tape::<f64>::new();
    let gx = tape.leaf(gray_to_nchw::<f64>(x));
    let gy = tape.leaf(gray_to_nchw::<f64>(y));
    let kernel = w.kernel_var(&tape);
    let m = window_moments(&tape, gx, gy, kernel, w.stride);
    let to2d = |v: Var| {
        let a = tape.value(v);
        let (oh, ow) = (a.shape()[2], a.shape()[3]);
        Array2::from_shape_fn((oh, ow), |(i, j)| a[[0, 0, i, j]])
    };
    Ok(LocalStats {
        mu_x: to2d(m.mu_x),
        mu_y: to2d(m.mu_y),
        var_x: to2d(m.var_x),
        var_y: to2d(m.var_y),
        cov: to2d(m.cov),
    })
}

/// Mean windowed SSIM of two gray patches.
pub fn ssim(
    x: &GrayPatch,
    y: &GrayPatch,
    w: &WindowConfig,
    k: &SsimConstants,
) -> Result<SimilarityScore> {
    w.validate()?;
    k.validate()?;
    check_pair_dims((x.height(), x.width()), (y.height(), y.width()), w.size)?;
    let tape = Tape::<f64>::new();
    let gx = tape.leaf(gray_to_nchw::<f64>(x));
    let gy = tape.leaf(gray_to_nchw::<f64>(y));
    let scores = ssim_graph(&tape, gx, gy, w, k);
    Ok(SimilarityScore::new(tape.value(scores)[[0, 0]]))
}

/// Mean windowed DSCSI of two sRGB patches over S-CIELAB LCh.
pub fn dscsi(
    x: &RgbPatch,
    y: &RgbPatch,
    cfg: &DscsiConfig,
    vc: &ViewingConditions,
) -> Result<SimilarityScore> {
    cfg.validate()?;
    vc.validate()?;
    check_pair_dims(
        (x.height(), x.width()),
        (y.height(), y.width()),
        cfg.window.size,
    )?;
    let tape = Tape::<f64>::new();
    let xv = tape.leaf(x.to_nchw::<f64>());
    let yv = tape.leaf(y.to_nchw::<f64>());
    let scores = dscsi_graph(&tape, xv, yv, cfg, vc, x.height(), x.width());
    Ok(SimilarityScore::new(tape.value(scores)[[0, 0]]))
}

/// Weighted circular mean direction and mean resultant length.
///
/// Returns (mean angle in [0, 2*pi), R in [0, 1]); the mean angle is 0 by
/// convention when the resultant all but vanishes.
pub fn circular_mean_resultant(angles: &[f64], weights: &[f64]) -> Result<(f64, f64)> {
    if angles.len() != weights.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} angles vs {} weights",
            angles.len(),
            weights.len()
        )));
    }
    if weights.iter().any(|w| *w < 0.0) {
        return Err(Error::InvalidConfig("weights must be nonnegative".into()));
    }
    let wsum: f64 = weights.iter().sum();
    if wsum <= 0.0 {
        return Err(Error::Degenerate("all weights are zero".into()));
    }
    let mut c = 0.0;
    let mut s = 0.0;
    for (a, w) in angles.iter().zip(weights) {
        c += w * a.cos();
        s += w * a.sin();
    }
    let r = (c * c + s * s).sqrt() / wsum;
    let mean = if r < 1e-12 {
        0.0
    } else {
        let m = s.atan2(c);
        if m < 0.0 {
            m + 2.0 * std::f64::consts::PI
        } else {
            m
        }
    };
    Ok((mean, r))
}

/// 1 - SSIM(gray(x), gray(xhat)).
pub fn reco_loss_ssim(
    x: &RgbPatch,
    xhat: &RgbPatch,
    w: &WindowConfig,
    k: &SsimConstants,
) -> Result<f64> {
    w.validate()?;
    k.validate()?;
    check_pair_dims(
        (x.height(), x.width()),
        (xhat.height(), xhat.width()),
        w.size,
    )?;
    let tape = Tape::<f64>::new();
    let xv = tape.leaf(x.to_nchw::<f64>());
    let yv = tape.leaf(xhat.to_nchw::<f64>());
    let loss = ssim_loss_graph(&tape, xv, yv, w, k);
    Ok(tape.scalar(loss))
}

/// 1 - DSCSI(x, xhat).
pub fn reco_loss_dscsi(
    x: &RgbPatch,
    xhat: &RgbPatch,
    cfg: &DscsiConfig,
    vc: &ViewingConditions,
) -> Result<f64> {
    cfg.validate()?;
    vc.validate()?;
    check_pair_dims(
        (x.height(), x.width()),
        (xhat.height(), xhat.width()),
        cfg.window.size,
    )?;
    let tape = Tape::<f64>::new();
    let xv = tape.leaf(x.to_nchw::<f64>());
    let yv = tape.leaf(xhat.to_nchw::<f64>());
    let loss = dscsi_loss_graph(&tape, xv, yv, cfg, vc, x.height(), x.width());
    Ok(tape.scalar(loss))
}

/// Mean squared error between two patches.
pub fn reco_loss_mse(x: &RgbPatch, xhat: &RgbPatch) -> Result<f64> {
    check_pair_dims(
        (x.height(), x.width()),
        (xhat.height(), xhat.width()),
        1,
    )?;
    let tape = Tape::<f64>::new();
    let xv = tape.leaf(x.to_nchw::<f64>());
    let yv = tape.leaf(xhat.to_nchw::<f64>());
    let loss = mse_loss_graph(&tape, xv, yv);
    Ok(tape.scalar(loss))
}
