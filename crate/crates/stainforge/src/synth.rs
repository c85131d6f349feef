//! Beer-Lambert synthetic histology: paired renderings of identical tissue
//! under two staining protocols, plus dataset ingestion for patch corpora.
//!
//! Transmitted light through stained tissue decays exponentially with stain
//! concentration, so optical density is linear in the per-stain
//! concentrations. That makes every render invertible and every quantitative
//! claim about the pipeline checkable against known ground truth.

use crate::color::{linear_to_srgb_scalar, srgb_to_linear_scalar, RgbPatch};
use crate::error::{Error, Result};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};
use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};

/// splitmix64; used to derive independent per-patch and per-epoch seeds.
pub(crate) fn mix_seed(seed: u64, parts: &[u64]) -> u64 {
    let mut x = seed;
    for &p in parts {
        x ^= p.wrapping_mul(0x9E37_79B9_7F4A_7C15);
        x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = x;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        x = z ^ (z >> 31);
    }
    x
}

// ---------------------------------------------------------------------------
// Stain profiles
// ---------------------------------------------------------------------------

/// Per-stain optical-density directions and concentration multipliers; the
/// "lab style" of a staining protocol. Column 0 is the nuclear stain, column
/// 1 the cytoplasmic counterstain.
#[derive(Debug, Clone, PartialEq)]
pub struct StainProfile {
    pub od_matrix: Array2<f64>,
    pub intensity_scale: [f64; 2],
}

impl StainProfile {
    pub fn new(od_matrix: Array2<f64>, intensity_scale: [f64; 2]) -> Result<Self> {
        let p = StainProfile {
            od_matrix,
            intensity_scale,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.od_matrix.dim() != (3, 2) {
            return Err(Error::InvalidConfig(format!(
                "stain matrix must be 3x2, got {:?}",
                self.od_matrix.dim()
            )));
        }
        for s in 0..2 {
            let col = self.od_matrix.column(s);
            let norm: f64 = col.iter().map(|v| v * v).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidConfig(format!(
                    "stain column {s} norm {norm} is not 1"
                )));
            }
            if col.iter().any(|v| *v < 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "stain column {s} has a negative entry"
                )));
            }
        }
        let dot: f64 = (0..3)
            .map(|r| self.od_matrix[[r, 0]] * self.od_matrix[[r, 1]])
            .sum();
        let angle = dot.clamp(-1.0, 1.0).acos().to_degrees();
        if angle < 10.0 {
            return Err(Error::InvalidConfig(format!(
                "stain columns nearly collinear ({angle:.2} deg apart)"
            )));
        }
        if self.intensity_scale.iter().any(|v| *v <= 0.0) {
            return Err(Error::InvalidConfig(
                "intensity scales must be positive".into(),
            ));
        }
        Ok(())
    }

    fn normalized_columns(cols: [[f64; 3]; 2], scale: [f64; 2]) -> Self {
        let mut m = Array2::zeros((3, 2));
        for (s, col) in cols.iter().enumerate() {
            let norm: f64 = col.iter().map(|v| v * v).sum::<f64>().sqrt();
            for r in 0..3 {
                m[[r, s]] = col[r] / norm;
            }
        }
        StainProfile {
            od_matrix: m,
            intensity_scale: scale,
        }
    }

    /// Hematoxylin/eosin-like reference protocol (the training domain).
    pub fn default_a() -> Self {
        Self::normalized_columns([[0.65, 0.70, 0.29], [0.07, 0.99, 0.11]], [1.0, 1.0])
    }

    /// A plausibly different lab: both stain vectors rotated 10-15 degrees
    /// within the OD simplex and intensities shifted by 15-20%.
    pub fn default_b() -> Self {
        let a = Self::default_a();
        let h = [a.od_matrix[[0, 0]], a.od_matrix[[1, 0]], a.od_matrix[[2, 0]]];
        let e = [a.od_matrix[[0, 1]], a.od_matrix[[1, 1]], a.od_matrix[[2, 1]]];
        let h_b = rotate_toward(h, e, 12.0_f64.to_radians());
        let e_b = rotate_toward(e, h, 10.0_f64.to_radians());
        Self::normalized_columns([h_b, e_b], [1.15, 0.85])
    }
}

/// Rotate unit vector `u` toward unit vector `v` by `theta` radians inside
/// their common plane.
fn rotate_toward(u: [f64; 3], v: [f64; 3], theta: f64) -> [f64; 3] {
    let dot: f64 = u.iter().zip(&v).map(|(a, b)| a * b).sum();
    let mut w = [0.0; 3];
    for i in 0..3 {
        w[i] = v[i] - dot * u[i];
    }
    let norm: f64 = w.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut out = [0.0; 3];
    for i in 0..3 {
        out[i] = u[i] * theta.cos() + (w[i] / norm) * theta.sin();
    }
    out
}

// ---------------------------------------------------------------------------
// Concentration fields
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ClassLabel {
    Tumor,
    Normal,
}

impl ClassLabel {
    pub fn as_str(&self) -> &'static str {
        match self {
            ClassLabel::Tumor => "tumor",
            ClassLabel::Normal => "normal",
        }
    }
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "tumor" => Some(ClassLabel::Tumor),
            "normal" => Some(ClassLabel::Normal),
            _ => None,
        }
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Per-pixel nonnegative stain concentrations with the class that generated
/// them.
#[derive(Debug, Clone, PartialEq)]
pub struct ConcentrationField {
    pub c1: Array2<f64>,
    pub c2: Array2<f64>,
    pub class_label: ClassLabel,
}

impl ConcentrationField {
    /// Hex digest of the field contents; paired renders share it.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.class_label.as_str().as_bytes());
        for v in self.c1.iter().chain(self.c2.iter()) {
            h.update(v.to_le_bytes());
        }
        let out = h.finalize();
        out.iter().take(4).map(|b| format!("{b:02x}")).collect()
    }
}

/// Nucleus count and size ranges per class. Tumor tissue gets larger,
/// denser nuclei so the classes are separable by construction.
struct ClassParams {
    count: (usize, usize),
    radius: (f64, f64),
    amplitude: (f64, f64),
}

fn class_params(label: ClassLabel) -> ClassParams {
    match label {
        ClassLabel::Tumor => ClassParams {
            count: (16, 22),
            radius: (4.5, 7.5),
            amplitude: (0.8, 1.2),
        },
        ClassLabel::Normal => ClassParams {
            count: (4, 8),
            radius: (2.0, 4.0),
            amplitude: (0.55, 0.85),
        },
    }
}

/// Deterministic synthetic tissue: elliptical nuclear blobs in `c1` over a
/// smooth cytoplasmic background in `c2`.
pub fn generate_field(seed: u64, class_label: ClassLabel, size: usize) -> Result<ConcentrationField> {
    if size < 32 {
        return Err(Error::InvalidConfig(format!(
            "field size must be >= 32, got {size}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // cytoplasm: bilinearly interpolated value noise plus a faint grain
    let cells = size / 8;
    let grid = Array2::from_shape_fn((cells + 1, cells + 1), |_| rng.gen_range(0.18..0.42));
    let mut c2 = Array2::zeros((size, size));
    let step = size as f64 / cells as f64;
    for y in 0..size {
        for x in 0..size {
            let gy = (y as f64 / step).min(cells as f64 - 1e-9);
            let gx = (x as f64 / step).min(cells as f64 - 1e-9);
            let (iy, ix) = (gy as usize, gx as usize);
            let (fy, fx) = (gy - iy as f64, gx - ix as f64);
            let v = grid[[iy, ix]] * (1.0 - fy) * (1.0 - fx)
                + grid[[iy + 1, ix]] * fy * (1.0 - fx)
                + grid[[iy, ix + 1]] * (1.0 - fy) * fx
                + grid[[iy + 1, ix + 1]] * fy * fx;
            c2[[y, x]] = v;
        }
    }
    for v in c2.iter_mut() {
        *v = (*v + rng.gen_range(-0.015..0.015)).max(0.0);
    }

    // nuclei: soft-edged ellipses, overlaps accumulate
    let p = class_params(class_label);
    let area_scale = (size * size) as f64 / (64.0 * 64.0);
    let lo = ((p.count.0 as f64) * area_scale).round() as usize;
    let hi = ((p.count.1 as f64) * area_scale).round() as usize;
    let n_nuclei = rng.gen_range(lo..=hi.max(lo));
    let mut c1 = Array2::from_elem((size, size), 0.0);
    // faint nuclear-stain haze so nucleus-free areas still carry some hue
    for v in c1.iter_mut() {
        *v = rng.gen_range(0.0..0.03);
    }
    for _ in 0..n_nuclei {
        let cy = rng.gen_range(0.0..size as f64);
        let cx = rng.gen_range(0.0..size as f64);
        let r = rng.gen_range(p.radius.0..p.radius.1);
        let (ry, rx) = (r * rng.gen_range(0.7..1.3), r * rng.gen_range(0.7..1.3));
        let angle: f64 = rng.gen_range(0.0..std::f64::consts::PI);
        let amp = rng.gen_range(p.amplitude.0..p.amplitude.1);
        let (sin_a, cos_a) = angle.sin_cos();
        let reach = (ry.max(rx) * 2.5).ceil() as isize;
        let (icy, icx) = (cy as isize, cx as isize);
        for y in (icy - reach).max(0)..(icy + reach + 1).min(size as isize) {
            for x in (icx - reach).max(0)..(icx + reach + 1).min(size as isize) {
                let dy = y as f64 - cy;
                let dx = x as f64 - cx;
                let u = (dx * cos_a + dy * sin_a) / rx;
                let v = (-dx * sin_a + dy * cos_a) / ry;
                let d2 = u * u + v * v;
                if d2 < 4.0 {
                    c1[[y as usize, x as usize]] += amp * (-3.0 * d2).exp();
                }
            }
        }
    }

    // nuclei displace cytoplasm, so nucleus interiors carry (nearly) pure
    // nuclear stain; without this no pixel ever exposes the raw stain
    // direction and deconvolution-based estimators lose several degrees
    ndarray::Zip::from(&mut c2).and(&c1).for_each(|b, &a| {
        *b *= (1.0 - 1.6 * a).max(0.0);
    });

    Ok(ConcentrationField {
        c1,
        c2,
        class_label,
    })
}

/// Beer-Lambert rendering: OD = M (scale .* c), linear RGB = exp(-OD),
/// encoded to sRGB and clipped.
pub fn render_patch(field: &ConcentrationField, profile: &StainProfile) -> Result<RgbPatch> {
    profile.validate()?;
    let (h, w) = field.c1.dim();
    if field.c2.dim() != (h, w) {
        return Err(Error::DimensionMismatch(
            "c1 and c2 differ in shape".into(),
        ));
    }
    if field.c1.iter().chain(field.c2.iter()).any(|v| *v < 0.0) {
        return Err(Error::InvalidConfig(
            "concentrations must be nonnegative".into(),
        ));
    }
    let m = &profile.od_matrix;
    let s = profile.intensity_scale;
    let data = Array3::from_shape_fn((h, w, 3), |(y, x, ch)| {
        let od = m[[ch, 0]] * s[0] * field.c1[[y, x]] + m[[ch, 1]] * s[1] * field.c2[[y, x]];
        let linear = (-od).exp();
        linear_to_srgb_scalar(linear).clamp(0.0, 1.0)
    });
    RgbPatch::new(data)
}

/// Least-squares concentration recovery against a known profile; the
/// companion of [`render_patch`] for round-trip checks.
pub fn invert_patch(img: &RgbPatch, profile: &StainProfile) -> (Array2<f64>, Array2<f64>) {
    let (h, w) = (img.height(), img.width());
    let m = &profile.od_matrix;
    let s = profile.intensity_scale;
    // scaled stain matrix and its 2x2 normal equations
    let ms = |r: usize, c: usize| m[[r, c]] * s[c];
    let a11: f64 = (0..3).map(|r| ms(r, 0) * ms(r, 0)).sum();
    let a12: f64 = (0..3).map(|r| ms(r, 0) * ms(r, 1)).sum();
    let a22: f64 = (0..3).map(|r| ms(r, 1) * ms(r, 1)).sum();
    let det = a11 * a22 - a12 * a12;
    let mut c1 = Array2::zeros((h, w));
    let mut c2 = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let od: Vec<f64> = (0..3)
                .map(|ch| {
                    let lin = srgb_to_linear_scalar(img.data()[[y, x, ch]]).max(1e-12);
                    -lin.ln()
                })
                .collect();
            let b1: f64 = (0..3).map(|r| ms(r, 0) * od[r]).sum();
            let b2: f64 = (0..3).map(|r| ms(r, 1) * od[r]).sum();
            c1[[y, x]] = (a22 * b1 - a12 * b2) / det;
            c2[[y, x]] = (a11 * b2 - a12 * b1) / det;
        }
    }
    (c1, c2)
}

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRecord {
    /// Path relative to the manifest's directory.
    pub path: PathBuf,
    pub label: ClassLabel,
    pub split: Split,
    pub profile_id: String,
}

/// The dataset index: one record per image file, resolved against `root`.
#[derive(Debug, Clone)]
pub struct DatasetManifest {
    root: PathBuf,
    records: Vec<ManifestRecord>,
}

impl DatasetManifest {
    pub fn new(root: PathBuf, records: Vec<ManifestRecord>) -> Result<Self> {
        let mut seen = HashSet::new();
        for r in &records {
            if !seen.insert(r.path.clone()) {
                return Err(Error::InvalidConfig(format!(
                    "duplicate path in manifest: {}",
                    r.path.display()
                )));
            }
        }
        Ok(DatasetManifest { root, records })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }
    pub fn records(&self) -> &[ManifestRecord] {
        &self.records
    }

    pub fn resolve(&self, r: &ManifestRecord) -> PathBuf {
        self.root.join(&r.path)
    }

    pub fn filter(&self, split: Split, profile_id: &str) -> Vec<&ManifestRecord> {
        self.records
            .iter()
            .filter(|r| r.split == split && r.profile_id == profile_id)
            .collect()
    }

    pub fn count(&self, split: Split, label: ClassLabel, profile_id: &str) -> usize {
        self.records
            .iter()
            .filter(|r| r.split == split && r.label == label && r.profile_id == profile_id)
            .count()
    }

    /// A/B pairs of one split, matched by file stem across profile dirs.
    pub fn paired(
        &self,
        split: Split,
        profile_a: &str,
        profile_b: &str,
    ) -> Vec<(PathBuf, PathBuf, ClassLabel)> {
        let stem = |r: &ManifestRecord| {
            r.path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default()
        };
        let bs: std::collections::HashMap<String, &ManifestRecord> = self
            .filter(split, profile_b)
            .into_iter()
            .map(|r| (stem(r), r))
            .collect();
        let mut out = Vec::new();
        for ra in self.filter(split, profile_a) {
            if let Some(rb) = bs.get(&stem(ra)) {
                out.push((self.resolve(ra), self.resolve(rb), ra.label));
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: std::io::Error::other(e),
        })?;
        w.write_record(["path", "label", "split", "profile_id"])
            .map_err(|e| csv_io_err(path, e))?;
        for r in &self.records {
            w.write_record([
                r.path.to_string_lossy().as_ref(),
                r.label.as_str(),
                r.split.as_str(),
                &r.profile_id,
            ])
            .map_err(|e| csv_io_err(path, e))?;
        }
        w.flush().map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        Ok(())
    }
}

fn csv_io_err(path: &Path, e: csv::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e),
    }
}

/// Parse and validate a manifest CSV; paths resolve against its directory.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: std::io::Error::other(e),
        })?;
    {
        let headers = rdr.headers().map_err(|e| csv_io_err(path, e))?;
        let expect = ["path", "label", "split", "profile_id"];
        if headers.iter().collect::<Vec<_>>() != expect {
            return Err(Error::ManifestParse {
                path: path.to_path_buf(),
                line: 1,
                msg: format!("header must be `path,label,split,profile_id`, got {headers:?}"),
            });
        }
    }
    let mut records = Vec::new();
    for (idx, row) in rdr.records().enumerate() {
        let line = idx + 2; // header is line 1
        let row = row.map_err(|e| Error::ManifestParse {
            path: path.to_path_buf(),
            line,
            msg: e.to_string(),
        })?;
        if row.len() != 4 {
            return Err(Error::ManifestParse {
                path: path.to_path_buf(),
                line,
                msg: format!("expected 4 fields, got {}", row.len()),
            });
        }
        let label = ClassLabel::parse(&row[1]).ok_or_else(|| Error::ManifestParse {
            path: path.to_path_buf(),
            line,
            msg: format!("label must be `tumor` or `normal`, got `{}`", &row[1]),
        })?;
        let split = Split::parse(&row[2]).ok_or_else(|| Error::ManifestParse {
            path: path.to_path_buf(),
            line,
            msg: format!("split must be train|val|test, got `{}`", &row[2]),
        })?;
        records.push(ManifestRecord {
            path: PathBuf::from(&row[0]),
            label,
            split,
            profile_id: row[3].to_string(),
        });
    }
    let root = path
        .parent()
        .map(|p| p.to_path_buf())
        .unwrap_or_else(|| PathBuf::from("."));
    DatasetManifest::new(root, records)
}

// ---------------------------------------------------------------------------
// Patch files
// ---------------------------------------------------------------------------

/// Write a patch as 8-bit RGB PNG.
pub fn save_patch(img: &RgbPatch, path: &Path) -> Result<()> {
    let (h, w) = (img.height(), img.width());
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = [
                (img.data()[[y, x, 0]] * 255.0).round().clamp(0.0, 255.0) as u8,
                (img.data()[[y, x, 1]] * 255.0).round().clamp(0.0, 255.0) as u8,
                (img.data()[[y, x, 2]] * 255.0).round().clamp(0.0, 255.0) as u8,
            ];
            buf.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    buf.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

/// Decode an 8-bit RGB image into [0, 1]; other layouts are rejected.
pub fn load_patch(path: &Path) -> Result<RgbPatch> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    let rgb = match img {
        image::DynamicImage::ImageRgb8(buf) => buf,
        other => {
            return Err(Error::Image {
                path: path.to_path_buf(),
                msg: format!("expected 8-bit RGB, got {:?}", other.color()),
            })
        }
    };
    let (w, h) = rgb.dimensions();
    let data = Array3::from_shape_fn((h as usize, w as usize, 3), |(y, x, c)| {
        rgb.get_pixel(x as u32, y as u32)[c] as f64 / 255.0
    });
    RgbPatch::new(data)
}

// ---------------------------------------------------------------------------
// Paired dataset generation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct SynthOptions {
    pub n_per_class: usize,
    pub seed: u64,
    pub patch_size: usize,
    pub train_frac: f64,
    pub val_frac: f64,
}

impl Default for SynthOptions {
    fn default() -> Self {
        SynthOptions {
            n_per_class: 1000,
            seed: 42,
            patch_size: 64,
            train_frac: 0.8,
            val_frac: 0.1,
        }
    }
}

/// Render every sampled tissue field under both profiles and write the
/// manifest. Per-patch seeds derive from (seed, patch index), so generation
/// is deterministic regardless of parallelism.
pub fn generate_paired_dataset(
    opts: &SynthOptions,
    profile_a: &StainProfile,
    profile_b: &StainProfile,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    if opts.n_per_class == 0 {
        return Err(Error::InvalidConfig("n_per_class must be >= 1".into()));
    }
    if profile_a == profile_b {
        return Err(Error::InvalidConfig(
            "profiles A and B must be distinct".into(),
        ));
    }
    if opts.train_frac <= 0.0 || opts.val_frac < 0.0 || opts.train_frac + opts.val_frac >= 1.0 {
        return Err(Error::InvalidConfig(
            "split fractions must satisfy 0 < train, 0 <= val, train+val < 1".into(),
        ));
    }
    for sub in ["profile_a", "profile_b"] {
        std::fs::create_dir_all(out_dir.join(sub)).map_err(|e| Error::Io {
            path: out_dir.join(sub),
            source: e,
        })?;
    }

    let n = opts.n_per_class;
    let n_train = (opts.train_frac * n as f64).floor() as usize;
    let n_val = (opts.val_frac * n as f64).floor() as usize;
    let split_of = |i: usize| {
        if i < n_train {
            Split::Train
        } else if i < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        }
    };

    let jobs: Vec<(usize, ClassLabel, usize)> = [ClassLabel::Tumor, ClassLabel::Normal]
        .into_iter()
        .enumerate()
        .flat_map(|(ci, label)| (0..n).map(move |i| (ci * n + i, label, i)))
        .collect();

    let results: Vec<Result<[ManifestRecord; 2]>> = jobs
        .par_iter()
        .map(|&(patch_index, label, i)| {
            let field_seed = mix_seed(opts.seed, &[patch_index as u64]);
            let field = generate_field(field_seed, label, opts.patch_size)?;
            let digest = field.digest();
            let stem = format!("{}_{:05}_{}", label.as_str(), i, digest);
            let split = split_of(i);
            let mut out = Vec::with_capacity(2);
            for (profile, id) in [(profile_a, "a"), (profile_b, "b")] {
                let rel = PathBuf::from(format!("profile_{id}")).join(format!("{stem}.png"));
                let img = render_patch(&field, profile)?;
                save_patch(&img, &out_dir.join(&rel))?;
                out.push(ManifestRecord {
                    path: rel,
                    label,
                    split,
                    profile_id: id.to_string(),
                });
            }
            Ok([out.remove(0), out.remove(0)])
        })
        .collect();

    let mut records = Vec::with_capacity(jobs.len() * 2);
    for r in results {
        let [a, b] = r?;
        records.push(a);
        records.push(b);
    }
    let manifest = DatasetManifest::new(out_dir.to_path_buf(), records)?;
    manifest.save(&out_dir.join("manifest.csv"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{dscsi, DscsiConfig};
    use crate::color::ViewingConditions;

    #[test]
    fn default_profiles_are_valid_and_distinct() {
        let a = StainProfile::default_a();
        let b = StainProfile::default_b();
        a.validate().unwrap();
        b.validate().unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn zero_concentration_renders_white() {
        let field = ConcentrationField {
            c1: Array2::zeros((32, 32)),
            c2: Array2::zeros((32, 32)),
            class_label: ClassLabel::Normal,
        };
        let img = render_patch(&field, &StainProfile::default_a()).unwrap();
        for v in img.data().iter() {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn doubling_nuclear_stain_darkens_every_channel() {
        let mk = |c1v: f64| ConcentrationField {
            c1: Array2::from_elem((32, 32), c1v),
            c2: Array2::from_elem((32, 32), 0.2),
            class_label: ClassLabel::Normal,
        };
        let a = render_patch(&mk(0.4), &StainProfile::default_a()).unwrap();
        let b = render_patch(&mk(0.8), &StainProfile::default_a()).unwrap();
        for (va, vb) in a.data().iter().zip(b.data().iter()) {
            assert!(vb < va, "doubling c1 did not darken: {va} -> {vb}");
        }
    }

    #[test]
    fn render_invert_roundtrip() {
        let field = generate_field(99, ClassLabel::Tumor, 64).unwrap();
        let profile = StainProfile::default_a();
        let img = render_patch(&field, &profile).unwrap();
        let (c1, c2) = invert_patch(&img, &profile);
        let mut worst = 0.0f64;
        for ((a, b), (c, d)) in field
            .c1
            .iter()
            .zip(c1.iter())
            .zip(field.c2.iter().zip(c2.iter()))
        {
            worst = worst.max((a - b).abs()).max((c - d).abs());
        }
        assert!(worst < 1e-6, "roundtrip error {worst}");
    }

    #[test]
    fn rerendering_with_other_profile_is_bit_exact() {
        let field = generate_field(7, ClassLabel::Normal, 64).unwrap();
        let b1 = render_patch(&field, &StainProfile::default_b()).unwrap();
        let b2 = render_patch(&field, &StainProfile::default_b()).unwrap();
        assert_eq!(b1, b2);
    }

    #[test]
    fn fields_are_deterministic_per_seed() {
        let f1 = generate_field(1234, ClassLabel::Tumor, 64).unwrap();
        let f2 = generate_field(1234, ClassLabel::Tumor, 64).unwrap();
        assert_eq!(f1, f2);
        let f3 = generate_field(1235, ClassLabel::Tumor, 64).unwrap();
        assert_ne!(f1, f3);
    }

    #[test]
    fn concentrations_nonnegative() {
        for seed in 0..20 {
            for label in [ClassLabel::Tumor, ClassLabel::Normal] {
                let f = generate_field(seed, label, 64).unwrap();
                assert!(f.c1.iter().all(|v| *v >= 0.0));
                assert!(f.c2.iter().all(|v| *v >= 0.0));
            }
        }
    }

    #[test]
    fn tumor_mean_c1_separates_from_normal() {
        // over 100 seeds the per-seed mean c1 distributions must not overlap
        // within three standard deviations
        let mut tumor = Vec::new();
        let mut normal = Vec::new();
        for seed in 0..100u64 {
            let ft = generate_field(mix_seed(seed, &[1]), ClassLabel::Tumor, 64).unwrap();
            let fn_ = generate_field(mix_seed(seed, &[2]), ClassLabel::Normal, 64).unwrap();
            tumor.push(ft.c1.mean().unwrap());
            normal.push(fn_.c1.mean().unwrap());
        }
        let stats = |v: &[f64]| {
            let m = v.iter().sum::<f64>() / v.len() as f64;
            let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64;
            (m, var.sqrt())
        };
        let (mt, st) = stats(&tumor);
        let (mn, sn) = stats(&normal);
        assert!(
            mt - 3.0 * st > mn + 3.0 * sn,
            "tumor {mt}+-{st} vs normal {mn}+-{sn} overlap at 3 sigma"
        );
    }

    #[test]
    fn field_size_validation() {
        assert!(generate_field(1, ClassLabel::Tumor, 16).is_err());
        assert!(generate_field(1, ClassLabel::Tumor, 32).is_ok());
    }

    #[test]
    fn paired_dataset_counts_and_digests() {
        let dir = tempfile::tempdir().unwrap();
        let opts = SynthOptions {
            n_per_class: 10,
            seed: 5,
            patch_size: 64,
            train_frac: 0.8,
            val_frac: 0.1,
        };
        let m = generate_paired_dataset(
            &opts,
            &StainProfile::default_a(),
            &StainProfile::default_b(),
            dir.path(),
        )
        .unwrap();
        assert_eq!(m.records().len(), 40);
        for profile in ["a", "b"] {
            assert_eq!(m.count(Split::Train, ClassLabel::Tumor, profile), 8);
            assert_eq!(m.count(Split::Val, ClassLabel::Tumor, profile), 1);
            assert_eq!(m.count(Split::Test, ClassLabel::Tumor, profile), 1);
            assert_eq!(m.count(Split::Train, ClassLabel::Normal, profile), 8);
        }
        // pairs share the field digest via the file stem
        let pairs = m.paired(Split::Train, "a", "b");
        assert_eq!(pairs.len(), 16);
        for (pa, pb, _) in &pairs {
            assert_eq!(pa.file_stem(), pb.file_stem());
        }
        // the two domains genuinely differ
        let (pa, pb, _) = &pairs[0];
        let a = load_patch(pa).unwrap();
        let b = load_patch(pb).unwrap();
        let cfg = DscsiConfig::default();
        let vc = ViewingConditions::default();
        let cross = dscsi(&a, &b, &cfg, &vc).unwrap().value();
        let self_score = dscsi(&a, &a, &cfg, &vc).unwrap().value();
        assert!((self_score - 1.0).abs() < 1e-9);
        assert!(cross < self_score - 0.02, "A and B too similar: {cross}");
    }

    #[test]
    fn manifest_roundtrip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.csv");
        let records = vec![
            ManifestRecord {
                path: PathBuf::from("profile_a/x.png"),
                label: ClassLabel::Tumor,
                split: Split::Train,
                profile_id: "a".into(),
            },
            ManifestRecord {
                path: PathBuf::from("profile_b/x.png"),
                label: ClassLabel::Tumor,
                split: Split::Train,
                profile_id: "b".into(),
            },
        ];
        let m = DatasetManifest::new(dir.path().to_path_buf(), records.clone()).unwrap();
        m.save(&path).unwrap();
        let loaded = load_manifest(&path).unwrap();
        assert_eq!(loaded.records(), &records[..]);

        // bad label names the line
        std::fs::write(
            &path,
            "path,label,split,profile_id\nprofile_a/x.png,t,train,a\n",
        )
        .unwrap();
        match load_manifest(&path) {
            Err(Error::ManifestParse { line, msg, .. }) => {
                assert_eq!(line, 2);
                assert!(msg.contains("label"));
            }
            other => panic!("expected parse error, got {other:?}"),
        }

        // duplicate paths rejected
        let dup = vec![records[0].clone(), records[0].clone()];
        assert!(DatasetManifest::new(dir.path().to_path_buf(), dup).is_err());
    }

    #[test]
    fn sixteen_bit_images_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("deep.png");
        let img = image::ImageBuffer::<image::Rgb<u16>, Vec<u16>>::new(16, 16);
        image::DynamicImage::ImageRgb16(img).save(&path).unwrap();
        match load_patch(&path) {
            Err(Error::Image { msg, .. }) => assert!(msg.contains("8-bit")),
            other => panic!("expected image error, got {other:?}"),
        }
    }

    #[test]
    fn png_roundtrip_quantizes_but_preserves() {
        let dir = tempfile::tempdir().unwrap();
        let field = generate_field(3, ClassLabel::Tumor, 64).unwrap();
        let img = render_patch(&field, &StainProfile::default_a()).unwrap();
        let path = dir.path().join("p.png");
        save_patch(&img, &path).unwrap();
        let back = load_patch(&path).unwrap();
        for (a, b) in img.data().iter().zip(back.data().iter()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }
}
