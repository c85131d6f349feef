//! Color encodings and transforms: grayscale, CIELAB, LCh, and the spatially
//! filtered S-CIELAB representation.
//!
//! All transforms are pure. The plain S-CIELAB function and the
//! differentiable loss path run the same tape graph, so they cannot drift
//! apart.

use crate::error::{Error, Result};
use crate::tape::{Scalar, Tape, Var};
use ndarray::{Array2, Array3, ArrayD, IxDyn};

/// D65 reference white in CIE XYZ.
pub const D65: [f64; 3] = [0.95047, 1.0, 1.08883];

/// ITU-R BT.601 luma weights, applied to sRGB-encoded values.
pub const LUMA_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

// ---------------------------------------------------------------------------
// Scalar transfer functions (shared with the tape ops)
// ---------------------------------------------------------------------------

/// sRGB electro-optical transfer function (gamma decode).
pub fn srgb_to_linear_scalar<S: Scalar>(c: S) -> S {
    if c <= S::of(0.04045) {
        c / S::of(12.92)
    } else {
        ((c + S::of(0.055)) / S::of(1.055)).powf(S::of(2.4))
    }
}

pub(crate) fn srgb_to_linear_deriv<S: Scalar>(c: S) -> S {
    if c <= S::of(0.04045) {
        S::one() / S::of(12.92)
    } else {
        S::of(2.4 / 1.055) * ((c + S::of(0.055)) / S::of(1.055)).powf(S::of(1.4))
    }
}

/// Inverse of [`srgb_to_linear_scalar`].
pub fn linear_to_srgb_scalar<S: Scalar>(c: S) -> S {
    if c <= S::of(0.0031308) {
        c * S::of(12.92)
    } else {
        S::of(1.055) * c.powf(S::of(1.0 / 2.4)) - S::of(0.055)
    }
}

/// CIELAB `f`: cube root above (6/29)^3 with the standard linear extension
/// below, which keeps it C^1 and defined for the slightly negative values a
/// CSF filter can produce.
pub fn lab_f_scalar<S: Scalar>(t: S) -> S {
    if t > S::of(216.0 / 24389.0) {
        t.powf(S::of(1.0 / 3.0))
    } else {
        t * S::of(24389.0 / 27.0 / 116.0) + S::of(16.0 / 116.0)
    }
}

pub(crate) fn lab_f_deriv<S: Scalar>(t: S) -> S {
    if t > S::of(216.0 / 24389.0) {
        S::of(1.0 / 3.0) * t.powf(S::of(-2.0 / 3.0))
    } else {
        S::of(24389.0 / 27.0 / 116.0)
    }
}

/// Inverse of [`lab_f_scalar`].
pub fn lab_f_inv_scalar(u: f64) -> f64 {
    let delta = 6.0 / 29.0;
    if u > delta {
        u * u * u
    } else {
        (u - 16.0 / 116.0) * 116.0 * 27.0 / 24389.0
    }
}

// ---------------------------------------------------------------------------
// Matrices
// ---------------------------------------------------------------------------

/// Linear sRGB -> XYZ under D65. Rows are rescaled so that (1,1,1) maps to
/// the reference white exactly; this puts gray-axis inputs on a = b = 0 to
/// machine precision instead of within coefficient rounding.
pub fn rgb_to_xyz_matrix() -> Array2<f64> {
    let base = [
        [0.4124564, 0.3575761, 0.1804375],
        [0.2126729, 0.7151522, 0.0721750],
        [0.0193339, 0.1191920, 0.9503041],
    ];
    let mut m = Array2::zeros((3, 3));
    for r in 0..3 {
        let sum: f64 = base[r].iter().sum();
        for c in 0..3 {
            m[[r, c]] = base[r][c] * D65[r] / sum;
        }
    }
    m
}

/// XYZ -> linear sRGB, the exact inverse of [`rgb_to_xyz_matrix`].
pub fn xyz_to_rgb_matrix() -> Array2<f64> {
    invert3(&rgb_to_xyz_matrix())
}

/// XYZ -> opponent (luminance, red-green, blue-yellow) used by S-CIELAB.
pub fn opponent_matrix() -> Array2<f64> {
    ndarray::arr2(&[
        [0.279, 0.72, -0.107],
        [-0.449, 0.29, -0.077],
        [0.086, -0.59, 0.501],
    ])
}

pub fn opponent_inverse() -> Array2<f64> {
    invert3(&opponent_matrix())
}

fn invert3(m: &Array2<f64>) -> Array2<f64> {
    let a = m[[0, 0]];
    let b = m[[0, 1]];
    let c = m[[0, 2]];
    let d = m[[1, 0]];
    let e = m[[1, 1]];
    let f = m[[1, 2]];
    let g = m[[2, 0]];
    let h = m[[2, 1]];
    let i = m[[2, 2]];
    let det = a * (e * i - f * h) - b * (d * i - f * g) + c * (d * h - e * g);
    ndarray::arr2(&[
        [(e * i - f * h) / det, (c * h - b * i) / det, (b * f - c * e) / det],
        [(f * g - d * i) / det, (a * i - c * g) / det, (c * d - a * f) / det],
        [(d * h - e * g) / det, (b * g - a * h) / det, (a * e - b * d) / det],
    ])
}

// ---------------------------------------------------------------------------
// Patch types
// ---------------------------------------------------------------------------

/// Minimum patch side (window support).
pub const MIN_PATCH_SIDE: usize = 8;

/// H x W x 3 image, sRGB-encoded, every channel in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct RgbPatch {
    data: Array3<f64>,
}

impl RgbPatch {
    pub fn new(data: Array3<f64>) -> Result<Self> {
        let (h, w, c) = data.dim();
        if c != 3 {
            return Err(Error::InvalidPatch(format!("expected 3 channels, got {c}")));
        }
        if h < MIN_PATCH_SIDE || w < MIN_PATCH_SIDE {
            return Err(Error::InvalidPatch(format!(
                "patch {w}x{h} below minimum side {MIN_PATCH_SIDE}"
            )));
        }
        if let Some(v) = data
            .iter()
            .find(|v| !(0.0..=1.0).contains(*v) || !v.is_finite())
        {
            return Err(Error::InvalidPatch(format!(
                "channel value {v} outside [0, 1]"
            )));
        }
        Ok(RgbPatch { data })
    }

    /// Uniform patch of one color.
    pub fn uniform(height: usize, width: usize, rgb: [f64; 3]) -> Result<Self> {
        Self::new(Array3::from_shape_fn((height, width, 3), |(_, _, c)| rgb[c]))
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }
    pub fn width(&self) -> usize {
        self.data.dim().1
    }
    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }
    pub fn into_data(self) -> Array3<f64> {
        self.data
    }

    /// Patch as a (1, 3, H, W) tensor for the tape.
    pub fn to_nchw<S: Scalar>(&self) -> ArrayD<S> {
        let (h, w, _) = self.data.dim();
        let mut out = ArrayD::zeros(IxDyn(&[1, 3, h, w]));
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    out[[0, c, y, x]] = S::of(self.data[[y, x, c]]);
                }
            }
        }
        out
    }

    /// Inverse of [`RgbPatch::to_nchw`], clipping into [0, 1].
    pub fn from_nchw<S: Scalar>(t: &ArrayD<S>) -> Result<Self> {
        let s = t.shape();
        if s.len() != 4 || s[0] != 1 || s[1] != 3 {
            return Err(Error::InvalidPatch(format!(
                "expected (1,3,H,W), got {s:?}"
            )));
        }
        let (h, w) = (s[2], s[3]);
        let data = Array3::from_shape_fn((h, w, 3), |(y, x, c)| {
            t[[0, c, y, x]].as_f64().clamp(0.0, 1.0)
        });
        Self::new(data)
    }
}

/// H x W luminance in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct GrayPatch {
    data: Array2<f64>,
}

impl GrayPatch {
    pub fn new(data: Array2<f64>) -> Result<Self> {
        if let Some(v) = data
            .iter()
            .find(|v| !(0.0..=1.0).contains(*v) || !v.is_finite())
        {
            return Err(Error::InvalidPatch(format!("luminance {v} outside [0, 1]")));
        }
        Ok(GrayPatch { data })
    }
    pub fn height(&self) -> usize {
        self.data.dim().0
    }
    pub fn width(&self) -> usize {
        self.data.dim().1
    }
    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }
}

/// H x W x 3 of (L, a, b); L in [0, 100], a and b unbounded.
#[derive(Debug, Clone, PartialEq)]
pub struct LabPatch {
    pub data: Array3<f64>,
}

impl LabPatch {
    pub fn height(&self) -> usize {
        self.data.dim().0
    }
    pub fn width(&self) -> usize {
        self.data.dim().1
    }
}

/// H x W x 3 of (L, C, h) with C >= 0 and hue in [0, 2*pi); h = 0 when C = 0.
#[derive(Debug, Clone, PartialEq)]
pub struct LchPatch {
    pub data: Array3<f64>,
}

/// Spatial sampling density and reference white for S-CIELAB filtering.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewingConditions {
    pub samples_per_degree: f64,
    pub white_point: [f64; 3],
}

impl Default for ViewingConditions {
    fn default() -> Self {
        ViewingConditions {
            samples_per_degree: 32.0,
            white_point: D65,
        }
    }
}

impl ViewingConditions {
    pub fn validate(&self) -> Result<()> {
        if !(self.samples_per_degree > 0.0) {
            return Err(Error::InvalidConfig(
                "samples_per_degree must be positive".into(),
            ));
        }
        if self.white_point.iter().any(|v| *v <= 0.0) {
            return Err(Error::InvalidConfig(
                "white point components must be positive".into(),
            ));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Plain transforms
// ---------------------------------------------------------------------------

/// BT.601 weighted sum of the sRGB-encoded channels.
pub fn rgb_to_gray(img: &RgbPatch) -> GrayPatch {
    let (h, w, _) = img.data.dim();
    let data = Array2::from_shape_fn((h, w), |(y, x)| {
        let px = &img.data;
        let v = LUMA_WEIGHTS[0] * px[[y, x, 0]]
            + LUMA_WEIGHTS[1] * px[[y, x, 1]]
            + LUMA_WEIGHTS[2] * px[[y, x, 2]];
        v.clamp(0.0, 1.0)
    });
    GrayPatch { data }
}

/// sRGB -> linear RGB -> XYZ -> CIELAB under `vc.white_point`.
pub fn rgb_to_lab(img: &RgbPatch, vc: &ViewingConditions) -> LabPatch {
    let m = rgb_to_xyz_matrix();
    let (h, w, _) = img.data.dim();
    let mut out = Array3::zeros((h, w, 3));
    for y in 0..h {
        for x in 0..w {
            let lin = [
                srgb_to_linear_scalar(img.data[[y, x, 0]]),
                srgb_to_linear_scalar(img.data[[y, x, 1]]),
                srgb_to_linear_scalar(img.data[[y, x, 2]]),
            ];
            let mut xyz = [0.0; 3];
            for r in 0..3 {
                xyz[r] = m[[r, 0]] * lin[0] + m[[r, 1]] * lin[1] + m[[r, 2]] * lin[2];
            }
            let fx = lab_f_scalar(xyz[0] / vc.white_point[0]);
            let fy = lab_f_scalar(xyz[1] / vc.white_point[1]);
            let fz = lab_f_scalar(xyz[2] / vc.white_point[2]);
            out[[y, x, 0]] = 116.0 * fy - 16.0;
            out[[y, x, 1]] = 500.0 * (fx - fy);
            out[[y, x, 2]] = 200.0 * (fy - fz);
        }
    }
    LabPatch { data: out }
}

/// CIELAB -> sRGB, clipping out-of-gamut values into [0, 1].
pub fn lab_to_rgb(lab: &LabPatch, vc: &ViewingConditions) -> RgbPatch {
    let m = xyz_to_rgb_matrix();
    let (h, w, _) = lab.data.dim();
    let data = Array3::from_shape_fn((h, w, 3), |(y, x, ch)| {
        let l = lab.data[[y, x, 0]];
        let a = lab.data[[y, x, 1]];
        let b = lab.data[[y, x, 2]];
        let fy = (l + 16.0) / 116.0;
        let fx = fy + a / 500.0;
        let fz = fy - b / 200.0;
        let xyz = [
            lab_f_inv_scalar(fx) * vc.white_point[0],
            lab_f_inv_scalar(fy) * vc.white_point[1],
            lab_f_inv_scalar(fz) * vc.white_point[2],
        ];
        let lin = m[[ch, 0]] * xyz[0] + m[[ch, 1]] * xyz[1] + m[[ch, 2]] * xyz[2];
        linear_to_srgb_scalar(lin).clamp(0.0, 1.0)
    });
    RgbPatch { data }
}

/// C = sqrt(a^2 + b^2), h = atan2(b, a) wrapped to [0, 2*pi); h = 0 at C = 0.
pub fn lab_to_lch(lab: &LabPatch) -> LchPatch {
    let (h, w, _) = lab.data.dim();
    let data = Array3::from_shape_fn((h, w, 3), |(y, x, ch)| {
        let a = lab.data[[y, x, 1]];
        let b = lab.data[[y, x, 2]];
        match ch {
            0 => lab.data[[y, x, 0]],
            1 => (a * a + b * b).sqrt(),
            _ => {
                if a == 0.0 && b == 0.0 {
                    0.0
                } else {
                    let ang = b.atan2(a);
                    if ang < 0.0 {
                        ang + 2.0 * std::f64::consts::PI
                    } else {
                        ang
                    }
                }
            }
        }
    });
    LchPatch { data }
}

/// S-CIELAB: opponent-space contrast-sensitivity filtering before CIELAB.
pub fn rgb_to_scielab(img: &RgbPatch, vc: &ViewingConditions) -> LabPatch {
    let tape = Tape::<f64>::new();
    let x = tape.leaf(img.to_nchw::<f64>());
    let lab = scielab_graph(&tape, x, vc, img.height(), img.width());
    let v = tape.value(lab);
    let (h, w) = (img.height(), img.width());
    let data = Array3::from_shape_fn((h, w, 3), |(y, xx, c)| v[[0, c, y, xx]]);
    LabPatch { data }
}

// ---------------------------------------------------------------------------
// Contrast sensitivity kernels
// ---------------------------------------------------------------------------

/// One Gaussian component of a CSF kernel.
#[derive(Debug, Clone, Copy)]
pub struct CsfGaussian {
    pub weight: f64,
    pub sigma_px: f64,
}

/// Sum-of-Gaussian CSF parameters per opponent channel (luminance,
/// red-green, blue-yellow). Halfwidths are in degrees of visual angle and
/// scale with the sampling density; weights are normalized to unit sum so
/// every channel kernel has exact unit DC gain.
pub fn csf_bank(samples_per_degree: f64) -> [Vec<CsfGaussian>; 3] {
    // (weight, halfwidth at half maximum in degrees)
    const LUM: [(f64, f64); 3] = [(0.921, 0.0283), (0.105, 0.133), (-0.108, 4.336)];
    const RG: [(f64, f64); 2] = [(0.531, 0.0392), (0.330, 0.494)];
    const BY: [(f64, f64); 2] = [(0.488, 0.0536), (0.371, 0.386)];
    let hwhm_to_sigma = 1.0 / (2.0 * 2.0f64.ln()).sqrt();
    let build = |params: &[(f64, f64)]| -> Vec<CsfGaussian> {
        let wsum: f64 = params.iter().map(|(w, _)| w).sum();
        params
            .iter()
            .map(|(w, hw)| CsfGaussian {
                weight: w / wsum,
                sigma_px: hw * hwhm_to_sigma * samples_per_degree,
            })
            .collect()
    };
    [build(&LUM), build(&RG), build(&BY)]
}

/// Discrete Gaussian taps truncated at +/-3 sigma (capped at `max_radius`)
/// and renormalized to unit sum.
pub fn csf_kernel_1d(sigma_px: f64, max_radius: usize) -> Vec<f64> {
    let radius = ((3.0 * sigma_px).ceil() as usize).clamp(1, max_radius.max(1));
    let mut k = Vec::with_capacity(2 * radius + 1);
    let s2 = 2.0 * sigma_px * sigma_px;
    for i in 0..=2 * radius {
        let d = i as f64 - radius as f64;
        k.push((-d * d / s2).exp());
    }
    let sum: f64 = k.iter().sum();
    for v in &mut k {
        *v /= sum;
    }
    k
}

// ---------------------------------------------------------------------------
// Tape builders
// ---------------------------------------------------------------------------

/// Separable blur of a single-channel (N,1,H,W) tensor with mirror padding.
fn separable_blur<S: Scalar>(tape: &Tape<S>, x: Var, kernel: &[f64], h: usize, w: usize) -> Var {
    let radius = kernel.len() / 2;
    // vertical pass
    let rh = radius.min(h - 1);
    let kh: Vec<f64> = if rh == radius {
        kernel.to_vec()
    } else {
        renorm(&kernel[radius - rh..=radius + rh])
    };
    let wk_h = tape.leaf(
        ArrayD::from_shape_vec(
            IxDyn(&[1, 1, kh.len(), 1]),
            kh.iter().map(|&v| S::of(v)).collect(),
        )
        .unwrap(),
    );
    let padded = tape.mirror_pad(x, rh, 0);
    let vpass = tape.conv2d(padded, wk_h, 1, 0);
    // horizontal pass
    let rw = radius.min(w - 1);
    let kw: Vec<f64> = if rw == radius {
        kernel.to_vec()
    } else {
        renorm(&kernel[radius - rw..=radius + rw])
    };
    let wk_w = tape.leaf(
        ArrayD::from_shape_vec(
            IxDyn(&[1, 1, 1, kw.len()]),
            kw.iter().map(|&v| S::of(v)).collect(),
        )
        .unwrap(),
    );
    let padded2 = tape.mirror_pad(vpass, 0, rw);
    tape.conv2d(padded2, wk_w, 1, 0)
}

fn renorm(k: &[f64]) -> Vec<f64> {
    let sum: f64 = k.iter().sum();
    k.iter().map(|v| v / sum).collect()
}

/// sRGB (N,3,H,W) -> grayscale (N,1,H,W) with BT.601 weights.
pub fn gray_graph<S: Scalar>(tape: &Tape<S>, x: Var) -> Var {
    tape.channel_mix(x, ndarray::arr2(&[LUMA_WEIGHTS]))
}

/// sRGB (N,3,H,W) -> CIELAB (N,3,H,W) without spatial filtering.
pub fn lab_graph<S: Scalar>(tape: &Tape<S>, x: Var, vc: &ViewingConditions) -> Var {
    let linear = tape.srgb_to_linear(x);
    let mut m = rgb_to_xyz_matrix();
    for r in 0..3 {
        for c in 0..3 {
            m[[r, c]] /= vc.white_point[r];
        }
    }
    let t = tape.channel_mix(linear, m);
    lab_from_normalized_xyz(tape, t)
}

/// sRGB (N,3,H,W) -> S-CIELAB (N,3,H,W): opponent CSF filtering between the
/// XYZ transform and the CIELAB encoding.
pub fn scielab_graph<S: Scalar>(
    tape: &Tape<S>,
    x: Var,
    vc: &ViewingConditions,
    h: usize,
    w: usize,
) -> Var {
    let linear = tape.srgb_to_linear(x);
    let to_opp = opponent_matrix().dot(&rgb_to_xyz_matrix());
    let opp = tape.channel_mix(linear, to_opp);

    let bank = csf_bank(vc.samples_per_degree);
    let mut filtered_channels = Vec::with_capacity(3);
    for (ci, gaussians) in bank.iter().enumerate() {
        let ch = tape.slice_c(opp, ci, 1);
        let mut acc: Option<Var> = None;
        for g in gaussians {
            let k = csf_kernel_1d(g.sigma_px, h.min(w) - 1);
            let blurred = separable_blur(tape, ch, &k, h, w);
            let weighted = tape.scale(blurred, g.weight);
            acc = Some(match acc {
                None => weighted,
                Some(a) => tape.add(a, weighted),
            });
        }
        filtered_channels.push(acc.unwrap());
    }
    let o12 = tape.concat_c(filtered_channels[0], filtered_channels[1]);
    let opp_f = tape.concat_c(o12, filtered_channels[2]);

    let mut back = opponent_inverse();
    for r in 0..3 {
        for c in 0..3 {
            back[[r, c]] /= vc.white_point[r];
        }
    }
    let t = tape.channel_mix(opp_f, back);
    lab_from_normalized_xyz(tape, t)
}

/// Shared CIELAB encoding from white-normalized XYZ.
fn lab_from_normalized_xyz<S: Scalar>(tape: &Tape<S>, t: Var) -> Var {
    let f = tape.lab_f(t);
    let lab_mix = ndarray::arr2(&[
        [0.0, 116.0, 0.0],
        [500.0, -500.0, 0.0],
        [0.0, 200.0, -200.0],
    ]);
    let mixed = tape.channel_mix(f, lab_mix);
    let bias = tape.leaf(
        ArrayD::from_shape_vec(IxDyn(&[3]), vec![S::of(-16.0), S::zero(), S::zero()]).unwrap(),
    );
    tape.bias_add(mixed, bias)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_patch(h: usize, w: usize, seed: u64) -> RgbPatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        RgbPatch::new(Array3::from_shape_fn((h, w, 3), |_| rng.gen_range(0.0..1.0))).unwrap()
    }

    #[test]
    fn patch_validation() {
        assert!(RgbPatch::uniform(8, 8, [0.5, 0.5, 0.5]).is_ok());
        assert!(RgbPatch::uniform(7, 8, [0.5, 0.5, 0.5]).is_err());
        assert!(RgbPatch::uniform(8, 8, [1.5, 0.5, 0.5]).is_err());
        assert!(RgbPatch::uniform(8, 8, [-0.1, 0.5, 0.5]).is_err());
    }

    #[test]
    fn gray_known_values() {
        let white = RgbPatch::uniform(8, 8, [1.0, 1.0, 1.0]).unwrap();
        let g = rgb_to_gray(&white);
        assert!((g.data()[[0, 0]] - 1.0).abs() < 1e-12);

        let black = RgbPatch::uniform(8, 8, [0.0, 0.0, 0.0]).unwrap();
        assert_eq!(rgb_to_gray(&black).data()[[0, 0]], 0.0);

        let red = RgbPatch::uniform(8, 8, [1.0, 0.0, 0.0]).unwrap();
        assert!((rgb_to_gray(&red).data()[[0, 0]] - 0.299).abs() < 1e-12);
    }

    #[test]
    fn lab_known_values() {
        let vc = ViewingConditions::default();
        let white = RgbPatch::uniform(8, 8, [1.0, 1.0, 1.0]).unwrap();
        let lab = rgb_to_lab(&white, &vc);
        assert!((lab.data[[0, 0, 0]] - 100.0).abs() < 1e-9);
        assert!(lab.data[[0, 0, 1]].abs() < 1e-9);
        assert!(lab.data[[0, 0, 2]].abs() < 1e-9);

        let black = RgbPatch::uniform(8, 8, [0.0, 0.0, 0.0]).unwrap();
        let lab = rgb_to_lab(&black, &vc);
        for c in 0..3 {
            assert!(lab.data[[0, 0, c]].abs() < 1e-9);
        }

        // closed-form oracle: L for mid gray via gamma + f-function
        let mid = RgbPatch::uniform(8, 8, [0.5, 0.5, 0.5]).unwrap();
        let lab = rgb_to_lab(&mid, &vc);
        let lin = srgb_to_linear_scalar(0.5f64);
        let expect_l = 116.0 * lin.cbrt() - 16.0;
        assert!((lab.data[[0, 0, 0]] - expect_l).abs() < 1e-9);
        assert!((expect_l - 53.39).abs() < 0.01);
        assert!(lab.data[[0, 0, 1]].abs() < 1e-6);
        assert!(lab.data[[0, 0, 2]].abs() < 1e-6);
    }

    #[test]
    fn gray_axis_has_zero_chroma() {
        let vc = ViewingConditions::default();
        for g in [0.1, 0.3, 0.77, 0.95] {
            let p = RgbPatch::uniform(8, 8, [g, g, g]).unwrap();
            let lab = rgb_to_lab(&p, &vc);
            assert!(lab.data[[0, 0, 1]].abs() < 1e-6, "a at gray {g}");
            assert!(lab.data[[0, 0, 2]].abs() < 1e-6, "b at gray {g}");
        }
    }

    #[test]
    fn srgb_roundtrip_identity() {
        for i in 0..=1000 {
            let c = i as f64 / 1000.0;
            let back = linear_to_srgb_scalar(srgb_to_linear_scalar(c));
            assert!((back - c).abs() < 1e-6, "roundtrip at {c}");
        }
    }

    #[test]
    fn lch_known_values() {
        let mut data = Array3::zeros((8, 8, 3));
        data.slice_mut(ndarray::s![.., .., 0]).fill(50.0);
        data.slice_mut(ndarray::s![.., .., 1]).fill(3.0);
        data.slice_mut(ndarray::s![.., .., 2]).fill(4.0);
        let lch = lab_to_lch(&LabPatch { data });
        assert!((lch.data[[0, 0, 0]] - 50.0).abs() < 1e-12);
        assert!((lch.data[[0, 0, 1]] - 5.0).abs() < 1e-12);
        assert!((lch.data[[0, 0, 2]] - 4.0f64.atan2(3.0)).abs() < 1e-12);
        assert!((lch.data[[0, 0, 2]] - 0.9273).abs() < 1e-4);

        let mut data = Array3::zeros((8, 8, 3));
        data.slice_mut(ndarray::s![.., .., 0]).fill(50.0);
        let lch = lab_to_lch(&LabPatch { data });
        assert_eq!(lch.data[[0, 0, 1]], 0.0);
        assert_eq!(lch.data[[0, 0, 2]], 0.0);

        let mut data = Array3::zeros((8, 8, 3));
        data.slice_mut(ndarray::s![.., .., 0]).fill(50.0);
        data.slice_mut(ndarray::s![.., .., 1]).fill(-3.0);
        let lch = lab_to_lch(&LabPatch { data });
        assert!((lch.data[[0, 0, 1]] - 3.0).abs() < 1e-12);
        assert!((lch.data[[0, 0, 2]] - std::f64::consts::PI).abs() < 1e-12);
    }

    #[test]
    fn csf_kernels_unit_sum() {
        for spd in [16.0, 32.0, 64.0] {
            for (ci, gaussians) in csf_bank(spd).iter().enumerate() {
                // effective 2D kernel sum = sum_i w_i * (sum of 1d taps)^2
                let mut total = 0.0;
                for g in gaussians {
                    let k = csf_kernel_1d(g.sigma_px, 63);
                    let s: f64 = k.iter().sum();
                    total += g.weight * s * s;
                }
                assert!(
                    (total - 1.0).abs() < 1e-9,
                    "channel {ci} at {spd} spd sums to {total}"
                );
            }
        }
    }

    #[test]
    fn scielab_equals_lab_on_uniform_images() {
        let vc = ViewingConditions::default();
        for rgb in [[0.8, 0.2, 0.4], [0.2, 0.2, 0.2], [1.0, 1.0, 1.0]] {
            let p = RgbPatch::uniform(16, 16, rgb).unwrap();
            let plain = rgb_to_lab(&p, &vc);
            let filtered = rgb_to_scielab(&p, &vc);
            for y in 0..16 {
                for x in 0..16 {
                    for c in 0..3 {
                        let d = (plain.data[[y, x, c]] - filtered.data[[y, x, c]]).abs();
                        assert!(d < 1e-6, "c{c} at ({y},{x}): {d}");
                    }
                }
            }
        }
    }

    #[test]
    fn scielab_attenuates_chromatic_contrast() {
        // High-frequency checkerboard of two roughly isoluminant colors:
        // chromatic low-pass filtering must reduce per-pixel chroma.
        let vc = ViewingConditions::default();
        let c1 = [0.8, 0.3, 0.3];
        let c2 = [0.2, 0.55, 0.55];
        let data = Array3::from_shape_fn((16, 16, 3), |(y, x, c)| {
            if (y + x) % 2 == 0 {
                c1[c]
            } else {
                c2[c]
            }
        });
        let p = RgbPatch::new(data).unwrap();
        let plain = rgb_to_lab(&p, &vc);
        let filtered = rgb_to_scielab(&p, &vc);
        for y in 0..16 {
            for x in 0..16 {
                let chroma = |lab: &LabPatch| {
                    (lab.data[[y, x, 1]].powi(2) + lab.data[[y, x, 2]].powi(2)).sqrt()
                };
                let before = chroma(&plain);
                let after = chroma(&filtered);
                assert!(
                    after < before,
                    "chroma rose at ({y},{x}): {before} -> {after}"
                );
            }
        }
    }

    #[test]
    fn lab_graph_matches_plain_lab() {
        let vc = ViewingConditions::default();
        let p = rand_patch(12, 10, 33);
        let plain = rgb_to_lab(&p, &vc);
        let tape = Tape::<f64>::new();
        let x = tape.leaf(p.to_nchw::<f64>());
        let lab = lab_graph(&tape, x, &vc);
        let v = tape.value(lab);
        for y in 0..12 {
            for xx in 0..10 {
                for c in 0..3 {
                    assert!((plain.data[[y, xx, c]] - v[[0, c, y, xx]]).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn lab_rgb_roundtrip_in_gamut() {
        let vc = ViewingConditions::default();
        let p = rand_patch(10, 10, 44);
        let lab = rgb_to_lab(&p, &vc);
        let back = lab_to_rgb(&lab, &vc);
        for (a, b) in p.data().iter().zip(back.data().iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}
