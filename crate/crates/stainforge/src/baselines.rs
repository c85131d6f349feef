//! Classical normalization comparators: global CIELAB statistics matching
//! and stain-deconvolution matching via the optical-density SVD plane.

use crate::color::{
    lab_to_rgb, rgb_to_lab, srgb_to_linear_scalar, LabPatch, RgbPatch, ViewingConditions,
};
use crate::error::{Error, Result};
use crate::synth::StainProfile;
use ndarray::{Array2, Array3};

/// Floor under linear RGB before the OD log.
const OD_LINEAR_EPS: f64 = 1e-6;

/// Per-channel CIELAB mean and standard deviation over a reference set.
#[derive(Debug, Clone, PartialEq)]
pub struct LabStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl LabStats {
    pub fn validate(&self) -> Result<()> {
        if self.std.iter().any(|s| *s < 0.0) {
            return Err(Error::InvalidConfig(
                "standard deviations must be >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// Pooled CIELAB statistics of a patch set.
pub fn lab_stats(patches: &[RgbPatch], vc: &ViewingConditions) -> Result<LabStats> {
    if patches.is_empty() {
        return Err(Error::InsufficientData("no reference patches".into()));
    }
    let mut sum = [0.0f64; 3];
    let mut sum2 = [0.0f64; 3];
    let mut n = 0usize;
    for p in patches {
        let lab = rgb_to_lab(p, vc);
        for y in 0..p.height() {
            for x in 0..p.width() {
                for c in 0..3 {
                    let v = lab.data[[y, x, c]];
                    sum[c] += v;
                    sum2[c] += v * v;
                }
                n += 1;
            }
        }
    }
    let mut mean = [0.0; 3];
    let mut std = [0.0; 3];
    for c in 0..3 {
        mean[c] = sum[c] / n as f64;
        std[c] = (sum2[c] / n as f64 - mean[c] * mean[c]).max(0.0).sqrt();
    }
    Ok(LabStats { mean, std })
}

/// Per-channel CIELAB affine map onto the target statistics. Channels whose
/// source deviation vanishes are mean-shifted only.
pub fn reinhard_normalize(
    src: &RgbPatch,
    target: &LabStats,
    vc: &ViewingConditions,
) -> Result<RgbPatch> {
    target.validate()?;
    let lab = rgb_to_lab(src, vc);
    let src_stats = lab_stats(std::slice::from_ref(src), vc)?;
    let (h, w) = (src.height(), src.width());
    let mut out = Array3::zeros((h, w, 3));
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let v = lab.data[[y, x, c]];
                out[[y, x, c]] = if src_stats.std[c] < 1e-6 {
                    v - src_stats.mean[c] + target.mean[c]
                } else {
                    (v - src_stats.mean[c]) * (target.std[c] / src_stats.std[c])
                        + target.mean[c]
                };
            }
        }
    }
    Ok(lab_to_rgb(&LabPatch { data: out }, vc))
}

/// Estimated stain geometry: unit-norm OD directions (more blue-absorbing
/// stain first) and robust per-stain concentration maxima.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatedStains {
    pub od_matrix: Array2<f64>,
    pub percentiles: [f64; 2],
}

impl EstimatedStains {
    pub fn from_profile(profile: &StainProfile, percentiles: [f64; 2]) -> Self {
        EstimatedStains {
            od_matrix: profile.od_matrix.clone(),
            percentiles,
        }
    }

    /// Angle in degrees between stain column `i` and a reference direction.
    pub fn column_angle_deg(&self, i: usize, reference: &[f64; 3]) -> f64 {
        let col = self.od_matrix.column(i);
        let dot: f64 = col.iter().zip(reference).map(|(a, b)| a * b).sum();
        let nr: f64 = reference.iter().map(|v| v * v).sum::<f64>().sqrt();
        (dot / nr).clamp(-1.0, 1.0).acos().to_degrees()
    }
}

fn od_of(img: &RgbPatch) -> Vec<[f64; 3]> {
    let (h, w) = (img.height(), img.width());
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let mut od = [0.0; 3];
            for c in 0..3 {
                let lin = srgb_to_linear_scalar(img.data()[[y, x, c]]).max(OD_LINEAR_EPS);
                od[c] = -lin.ln();
            }
            out.push(od);
        }
    }
    out
}

/// Eigen-decomposition of a symmetric 3x3 matrix by cyclic Jacobi rotations;
/// returns (eigenvalues descending, matching unit eigenvectors as rows).
fn sym_eigen_3x3(m: [[f64; 3]; 3]) -> ([f64; 3], [[f64; 3]; 3]) {
    let mut a = m;
    let mut v = [[0.0; 3]; 3];
    for (i, row) in v.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    for _ in 0..50 {
        let mut off = 0.0;
        for p in 0..3 {
            for q in (p + 1)..3 {
                off += a[p][q] * a[p][q];
            }
        }
        if off < 1e-30 {
            break;
        }
        for p in 0..3 {
            for q in (p + 1)..3 {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..3 {
                    let akp = a[k][p];
                    let akq = a[k][q];
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..3 {
                    let apk = a[p][k];
                    let aqk = a[q][k];
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for k in 0..3 {
                    let vkp = v[k][p];
                    let vkq = v[k][q];
                    v[k][p] = c * vkp - s * vkq;
                    v[k][q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut idx = [0usize, 1, 2];
    idx.sort_by(|&i, &j| a[j][j].partial_cmp(&a[i][i]).unwrap());
    let vals = [a[idx[0]][idx[0]], a[idx[1]][idx[1]], a[idx[2]][idx[2]]];
    let mut vecs = [[0.0; 3]; 3];
    for (r, &i) in idx.iter().enumerate() {
        for k in 0..3 {
            vecs[r][k] = v[k][i];
        }
    }
    (vals, vecs)
}

fn percentile_nearest_rank(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let rank = ((p * n as f64).ceil() as usize).clamp(1, n);
    sorted[rank - 1]
}

/// Estimate the two dominant stain directions of a patch from the extreme
/// angles of the optical-density cloud projected on its top-2 singular
/// plane.
pub fn macenko_estimate(
    src: &RgbPatch,
    od_threshold: f64,
    angle_percentile: f64,
) -> Result<EstimatedStains> {
    if !(0.0..0.5).contains(&angle_percentile) {
        return Err(Error::InvalidConfig(
            "angle percentile must be in [0, 0.5)".into(),
        ));
    }
    let od_all = od_of(src);
    let tissue: Vec<[f64; 3]> = od_all
        .into_iter()
        .filter(|od| (od[0] * od[0] + od[1] * od[1] + od[2] * od[2]).sqrt() >= od_threshold)
        .collect();
    if tissue.len() < 100 {
        return Err(Error::InsufficientData(format!(
            "only {} pixels above the OD threshold (need >= 100)",
            tissue.len()
        )));
    }

    // top-2 singular plane of the (uncentered) OD cloud
    let mut mtm = [[0.0f64; 3]; 3];
    for od in &tissue {
        for r in 0..3 {
            for c in 0..3 {
                mtm[r][c] += od[r] * od[c];
            }
        }
    }
    let (vals, vecs) = sym_eigen_3x3(mtm);
    if vals[1] <= vals[0] * 1e-8 {
        return Err(Error::Degenerate(
            "OD cloud is rank deficient (single stain)".into(),
        ));
    }
    // orient basis vectors into the positive octant so angles are stable
    let mut e1 = vecs[0];
    let mut e2 = vecs[1];
    if e1.iter().sum::<f64>() < 0.0 {
        e1.iter_mut().for_each(|v| *v = -*v);
    }
    if e2.iter().sum::<f64>() < 0.0 {
        e2.iter_mut().for_each(|v| *v = -*v);
    }

    let mut angles: Vec<f64> = tissue
        .iter()
        .map(|od| {
            let u: f64 = od.iter().zip(&e1).map(|(a, b)| a * b).sum();
            let v: f64 = od.iter().zip(&e2).map(|(a, b)| a * b).sum();
            v.atan2(u)
        })
        .collect();
    angles.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let lo = percentile_nearest_rank(&angles, angle_percentile.max(1e-9));
    let hi = percentile_nearest_rank(&angles, 1.0 - angle_percentile);

    let dir_at = |phi: f64| -> [f64; 3] {
        let (s, c) = phi.sin_cos();
        let mut d = [0.0; 3];
        for k in 0..3 {
            d[k] = c * e1[k] + s * e2[k];
        }
        if d.iter().sum::<f64>() < 0.0 {
            d.iter_mut().for_each(|v| *v = -*v);
        }
        let n: f64 = d.iter().map(|v| v * v).sum::<f64>().sqrt();
        d.iter_mut().for_each(|v| *v /= n);
        d
    };
    let d_lo = dir_at(lo);
    let d_hi = dir_at(hi);

    // the more blue-absorbing stain (larger OD in the blue channel) first
    let (first, second) = if d_lo[2] >= d_hi[2] {
        (d_lo, d_hi)
    } else {
        (d_hi, d_lo)
    };
    let mut m = Array2::zeros((3, 2));
    for r in 0..3 {
        m[[r, 0]] = first[r];
        m[[r, 1]] = second[r];
    }

    // robust concentration maxima via unconstrained least squares
    let est = EstimatedStains {
        od_matrix: m,
        percentiles: [1.0, 1.0],
    };
    let mut c1: Vec<f64> = Vec::with_capacity(tissue.len());
    let mut c2: Vec<f64> = Vec::with_capacity(tissue.len());
    for od in &tissue {
        let (a, b) = lstsq2(&est.od_matrix, od);
        c1.push(a);
        c2.push(b);
    }
    c1.sort_by(|a, b| a.partial_cmp(b).unwrap());
    c2.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let p1 = percentile_nearest_rank(&c1, 0.99);
    let p2 = percentile_nearest_rank(&c2, 0.99);
    if p1 <= 0.0 || p2 <= 0.0 {
        return Err(Error::Degenerate(
            "nonpositive concentration percentile".into(),
        ));
    }
    Ok(EstimatedStains {
        od_matrix: est.od_matrix,
        percentiles: [p1, p2],
    })
}

fn lstsq2(m: &Array2<f64>, od: &[f64; 3]) -> (f64, f64) {
    let a11: f64 = (0..3).map(|r| m[[r, 0]] * m[[r, 0]]).sum();
    let a12: f64 = (0..3).map(|r| m[[r, 0]] * m[[r, 1]]).sum();
    let a22: f64 = (0..3).map(|r| m[[r, 1]] * m[[r, 1]]).sum();
    let b1: f64 = (0..3).map(|r| m[[r, 0]] * od[r]).sum();
    let b2: f64 = (0..3).map(|r| m[[r, 1]] * od[r]).sum();
    let det = a11 * a22 - a12 * a12;
    ((a22 * b1 - a12 * b2) / det, (a11 * b2 - a12 * b1) / det)
}

/// Exact two-variable nonnegative least squares by active-set enumeration.
fn nnls2(m: &Array2<f64>, od: &[f64; 3]) -> (f64, f64) {
    let (c1, c2) = lstsq2(m, od);
    if c1 >= 0.0 && c2 >= 0.0 {
        return (c1, c2);
    }
    let resid = |a: f64, b: f64| -> f64 {
        (0..3)
            .map(|r| {
                let e = m[[r, 0]] * a + m[[r, 1]] * b - od[r];
                e * e
            })
            .sum()
    };
    let a11: f64 = (0..3).map(|r| m[[r, 0]] * m[[r, 0]]).sum();
    let a22: f64 = (0..3).map(|r| m[[r, 1]] * m[[r, 1]]).sum();
    let b1: f64 = (0..3).map(|r| m[[r, 0]] * od[r]).sum();
    let b2: f64 = (0..3).map(|r| m[[r, 1]] * od[r]).sum();
    let cand1 = ((b1 / a11).max(0.0), 0.0);
    let cand2 = (0.0, (b2 / a22).max(0.0));
    let mut best = (0.0, 0.0);
    let mut best_r = resid(0.0, 0.0);
    for cand in [cand1, cand2] {
        let r = resid(cand.0, cand.1);
        if r < best_r {
            best_r = r;
            best = cand;
        }
    }
    best
}

/// Deconvolve against the source stains, rescale concentrations to the
/// target's percentiles, and re-render through the target stain matrix.
pub fn macenko_normalize(
    src: &RgbPatch,
    src_stains: &EstimatedStains,
    target_stains: &EstimatedStains,
) -> Result<RgbPatch> {
    let (h, w) = (src.height(), src.width());
    let scale = [
        target_stains.percentiles[0] / src_stains.percentiles[0],
        target_stains.percentiles[1] / src_stains.percentiles[1],
    ];
    let mut out = Array3::zeros((h, w, 3));
    for y in 0..h {
        for x in 0..w {
            let mut od = [0.0; 3];
            for c in 0..3 {
                let lin = srgb_to_linear_scalar(src.data()[[y, x, c]]).max(OD_LINEAR_EPS);
                od[c] = -lin.ln();
            }
            let (c1, c2) = nnls2(&src_stains.od_matrix, &od);
            let (c1, c2) = (c1 * scale[0], c2 * scale[1]);
            for ch in 0..3 {
                let od_new =
                    target_stains.od_matrix[[ch, 0]] * c1 + target_stains.od_matrix[[ch, 1]] * c2;
                let lin = (-od_new).exp();
                out[[y, x, ch]] =
                    crate::color::linear_to_srgb_scalar(lin).clamp(0.0, 1.0);
            }
        }
    }
    RgbPatch::new(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_field, render_patch, ClassLabel};

    fn synth_patch(seed: u64, profile: &StainProfile) -> RgbPatch {
        let field = generate_field(seed, ClassLabel::Tumor, 64).unwrap();
        render_patch(&field, profile).unwrap()
    }

    #[test]
    fn jacobi_recovers_known_spectrum() {
        // diag(5, 2, 1) rotated is still spectrum {5, 2, 1}
        let m = [[4.0, 1.0, 0.0], [1.0, 3.0, 1.0], [0.0, 1.0, 2.0]];
        let (vals, vecs) = sym_eigen_3x3(m);
        assert!(vals[0] >= vals[1] && vals[1] >= vals[2]);
        // residual check: M v = lambda v
        for i in 0..3 {
            for r in 0..3 {
                let mv: f64 = (0..3).map(|c| m[r][c] * vecs[i][c]).sum();
                assert!((mv - vals[i] * vecs[i][r]).abs() < 1e-9);
            }
        }
        // orthonormality
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| vecs[i][k] * vecs[j][k]).sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((dot - expect).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn reinhard_matched_stats_is_identity() {
        let vc = ViewingConditions::default();
        let p = synth_patch(11, &StainProfile::default_a());
        let stats = lab_stats(std::slice::from_ref(&p), &vc).unwrap();
        let out = reinhard_normalize(&p, &stats, &vc).unwrap();
        for (a, b) in p.data().iter().zip(out.data().iter()) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn reinhard_constant_input_lands_on_target_mean() {
        let vc = ViewingConditions::default();
        let p = RgbPatch::uniform(16, 16, [0.6, 0.4, 0.5]).unwrap();
        let target = LabStats {
            mean: [60.0, 10.0, -5.0],
            std: [12.0, 6.0, 6.0],
        };
        let out = reinhard_normalize(&p, &target, &vc).unwrap();
        let lab = rgb_to_lab(&out, &vc);
        for c in 0..3 {
            let got = lab.data[[0, 0, c]];
            assert!(
                (got - target.mean[c]).abs() < 0.5,
                "channel {c}: {got} vs {}",
                target.mean[c]
            );
        }
    }

    #[test]
    fn reinhard_moves_channel_means_to_target() {
        let vc = ViewingConditions::default();
        let src = synth_patch(21, &StainProfile::default_b());
        let refp = synth_patch(22, &StainProfile::default_a());
        let target = lab_stats(std::slice::from_ref(&refp), &vc).unwrap();
        let out = reinhard_normalize(&src, &target, &vc).unwrap();
        let got = lab_stats(std::slice::from_ref(&out), &vc).unwrap();
        for c in 0..3 {
            assert!(
                (got.mean[c] - target.mean[c]).abs() < 0.5,
                "channel {c}: {} vs {}",
                got.mean[c],
                target.mean[c]
            );
        }
    }

    #[test]
    fn macenko_recovers_synthetic_stains() {
        let profile = StainProfile::default_a();
        let p = synth_patch(31, &profile);
        let est = macenko_estimate(&p, 0.15, 0.01).unwrap();
        for s in 0..2 {
            let truth = [
                profile.od_matrix[[0, s]],
                profile.od_matrix[[1, s]],
                profile.od_matrix[[2, s]],
            ];
            let ang = est.column_angle_deg(s, &truth);
            assert!(ang < 5.0, "stain {s} angular error {ang} deg");
        }
        // unit norm columns
        for s in 0..2 {
            let n: f64 = (0..3).map(|r| est.od_matrix[[r, s]].powi(2)).sum();
            assert!((n - 1.0).abs() < 1e-9);
        }
        // determinism
        let est2 = macenko_estimate(&p, 0.15, 0.01).unwrap();
        assert_eq!(est, est2);
    }

    #[test]
    fn macenko_rejects_white_and_single_stain() {
        let white = RgbPatch::uniform(64, 64, [1.0, 1.0, 1.0]).unwrap();
        assert!(matches!(
            macenko_estimate(&white, 0.15, 0.01),
            Err(Error::InsufficientData(_))
        ));

        // single stain: c1 only
        let field = generate_field(41, ClassLabel::Tumor, 64).unwrap();
        let single = crate::synth::ConcentrationField {
            c1: field.c1.clone(),
            c2: ndarray::Array2::zeros(field.c1.dim()),
            class_label: field.class_label,
        };
        let img = render_patch(&single, &StainProfile::default_a()).unwrap();
        assert!(matches!(
            macenko_estimate(&img, 0.05, 0.01),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn macenko_normalize_self_is_identity() {
        let p = synth_patch(51, &StainProfile::default_a());
        let est = macenko_estimate(&p, 0.15, 0.01).unwrap();
        let out = macenko_normalize(&p, &est, &est).unwrap();
        let mut worst = 0.0f64;
        for (a, b) in p.data().iter().zip(out.data().iter()) {
            worst = worst.max((a - b).abs());
        }
        assert!(worst < 1e-3, "self-normalization moved {worst}");
    }

    #[test]
    fn nnls_is_nonnegative_and_matches_interior() {
        let m = StainProfile::default_a().od_matrix;
        // interior case agrees with plain least squares
        let od = [0.4, 0.6, 0.2];
        let (l1, l2) = lstsq2(&m, &od);
        if l1 >= 0.0 && l2 >= 0.0 {
            let (n1, n2) = nnls2(&m, &od);
            assert!((l1 - n1).abs() < 1e-12 && (l2 - n2).abs() < 1e-12);
        }
        // adversarial case stays nonnegative
        let od = [0.5, -0.2, 0.4];
        let (n1, n2) = nnls2(&m, &od);
        assert!(n1 >= 0.0 && n2 >= 0.0);
    }
}
