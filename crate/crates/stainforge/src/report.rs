//! Loss-curve and metric-comparison rendering: CSV for numeric checks, SVG
//! for eyeballs.

use crate::error::{Error, Result};
use crate::trainer::{EvalReport, TrainLogRecord};
use std::path::Path;

/// Trailing moving average with a warmup-truncated window.
pub fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    let mut out = Vec::with_capacity(values.len());
    let mut sum = 0.0;
    for i in 0..values.len() {
        sum += values[i];
        if i >= window {
            sum -= values[i - window];
        }
        let n = (i + 1).min(window);
        out.push(sum / n as f64);
    }
    out
}

/// Variance of the step-to-step differences of a curve normalized by its
/// mean level, so differently scaled losses compare fairly.
pub fn step_variance_normalized(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let scale = mean.abs().max(1e-12);
    let diffs: Vec<f64> = values
        .windows(2)
        .map(|w| (w[1] - w[0]) / scale)
        .collect();
    let dm = diffs.iter().sum::<f64>() / diffs.len() as f64;
    diffs.iter().map(|d| (d - dm).powi(2)).sum::<f64>() / diffs.len() as f64
}

/// One labelled loss curve extracted from a training log.
pub struct CurveSeries {
    pub label: String,
    pub iters: Vec<usize>,
    pub values: Vec<f64>,
}

impl CurveSeries {
    pub fn reco_from_log(label: &str, log: &[TrainLogRecord]) -> Self {
        CurveSeries {
            label: label.to_string(),
            iters: log.iter().map(|r| r.iter).collect(),
            values: log.iter().map(|r| r.reco).collect(),
        }
    }
}

/// Curves as CSV: `iter,<label>...`; rows are padded when series lengths
/// differ.
pub fn write_curves_csv(path: &Path, series: &[CurveSeries]) -> Result<()> {
    let io_err = |e: std::io::Error| Error::Io {
        path: path.to_path_buf(),
        source: e,
    };
    let mut out = String::from("iter");
    for s in series {
        out.push(',');
        out.push_str(&s.label);
    }
    out.push('\n');
    let rows = series.iter().map(|s| s.values.len()).max().unwrap_or(0);
    for i in 0..rows {
        let iter = series
            .iter()
            .find_map(|s| s.iters.get(i))
            .copied()
            .unwrap_or(i + 1);
        out.push_str(&iter.to_string());
        for s in series {
            out.push(',');
            if let Some(v) = s.values.get(i) {
                out.push_str(&v.to_string());
            }
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(io_err)
}

const SVG_COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

/// Minimal polyline chart; enough to mirror the CSV visually.
pub fn write_curves_svg(path: &Path, title: &str, series: &[CurveSeries]) -> Result<()> {
    let io_err = |e: std::io::Error| Error::Io {
        path: path.to_path_buf(),
        source: e,
    };
    let (w, h) = (720.0, 420.0);
    let (ml, mr, mt, mb) = (60.0, 20.0, 40.0, 40.0);
    let (pw, ph) = (w - ml - mr, h - mt - mb);

    let mut vmin = f64::INFINITY;
    let mut vmax = f64::NEG_INFINITY;
    let mut imax = 1usize;
    for s in series {
        for &v in &s.values {
            vmin = vmin.min(v);
            vmax = vmax.max(v);
        }
        imax = imax.max(s.iters.last().copied().unwrap_or(1));
    }
    if !vmin.is_finite() || !vmax.is_finite() {
        vmin = 0.0;
        vmax = 1.0;
    }
    if (vmax - vmin).abs() < 1e-12 {
        vmax = vmin + 1.0;
    }

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {w} {h}\" font-family=\"sans-serif\">\n"
    ));
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"24\" font-size=\"16\" text-anchor=\"middle\">{title}</text>\n",
        w / 2.0
    ));
    svg.push_str(&format!(
        "<rect x=\"{ml}\" y=\"{mt}\" width=\"{pw}\" height=\"{ph}\" fill=\"none\" stroke=\"#999\"/>\n"
    ));
    for frac in [0.0, 0.25, 0.5, 0.75, 1.0] {
        let v = vmin + (vmax - vmin) * frac;
        let y = mt + ph * (1.0 - frac);
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{:.1}\" font-size=\"10\" text-anchor=\"end\">{v:.3}</text>\n",
            ml - 6.0,
            y + 3.0
        ));
        svg.push_str(&format!(
            "<line x1=\"{ml}\" y1=\"{y:.1}\" x2=\"{:.1}\" y2=\"{y:.1}\" stroke=\"#eee\"/>\n",
            ml + pw
        ));
    }
    for (si, s) in series.iter().enumerate() {
        let color = SVG_COLORS[si % SVG_COLORS.len()];
        let pts: Vec<String> = s
            .iters
            .iter()
            .zip(&s.values)
            .map(|(&i, &v)| {
                let x = ml + pw * (i as f64 / imax as f64);
                let y = mt + ph * (1.0 - (v - vmin) / (vmax - vmin));
                format!("{x:.1},{y:.1}")
            })
            .collect();
        svg.push_str(&format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>\n",
            pts.join(" ")
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-size=\"12\" fill=\"{color}\">{}</text>\n",
            ml + 10.0,
            mt + 16.0 + 16.0 * si as f64,
            s.label
        ));
    }
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" font-size=\"12\" text-anchor=\"middle\">iteration</text>\n",
        ml + pw / 2.0,
        h - 10.0
    ));
    svg.push_str("</svg>\n");
    std::fs::write(path, svg).map_err(io_err)
}

/// Metric comparison table: one row per labelled evaluation report.
pub fn write_eval_comparison_csv(path: &Path, rows: &[(String, EvalReport)]) -> Result<()> {
    let io_err = |e: std::io::Error| Error::Io {
        path: path.to_path_buf(),
        source: e,
    };
    let mut out = String::from("label,auc,precision,recall,accuracy,n_samples,threshold\n");
    for (label, r) in rows {
        out.push_str(&format!(
            "{label},{},{},{},{},{},{}\n",
            r.auc, r.precision, r.recall, r.accuracy, r.n_samples, r.threshold
        ));
    }
    std::fs::write(path, out).map_err(io_err)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn moving_average_flattens_noise() {
        let v = vec![1.0, 3.0, 1.0, 3.0, 1.0, 3.0];
        let ma = moving_average(&v, 2);
        assert_eq!(ma[0], 1.0);
        for &x in &ma[1..] {
            assert_eq!(x, 2.0);
        }
    }

    #[test]
    fn step_variance_scale_invariant() {
        let a = vec![1.0, 1.5, 0.8, 1.2, 1.1];
        let b: Vec<f64> = a.iter().map(|v| v * 100.0).collect();
        let va = step_variance_normalized(&a);
        let vb = step_variance_normalized(&b);
        assert!((va - vb).abs() < 1e-12);
        assert!(va > 0.0);
        // a steadier curve has lower normalized step variance
        let steady = vec![1.0, 0.99, 0.98, 0.97, 0.96];
        assert!(step_variance_normalized(&steady) < va);
    }

    #[test]
    fn csv_and_svg_outputs_exist() {
        let dir = tempfile::tempdir().unwrap();
        let series = vec![
            CurveSeries {
                label: "ssim".into(),
                iters: vec![1, 2, 3],
                values: vec![0.9, 0.7, 0.6],
            },
            CurveSeries {
                label: "mse".into(),
                iters: vec![1, 2, 3],
                values: vec![0.08, 0.1, 0.05],
            },
        ];
        let csv_path = dir.path().join("curves.csv");
        write_curves_csv(&csv_path, &series).unwrap();
        let text = std::fs::read_to_string(&csv_path).unwrap();
        assert!(text.starts_with("iter,ssim,mse"));
        assert_eq!(text.lines().count(), 4);

        let svg_path = dir.path().join("curves.svg");
        write_curves_svg(&svg_path, "reconstruction loss", &series).unwrap();
        let svg = std::fs::read_to_string(&svg_path).unwrap();
        assert!(svg.contains("<svg"));
        assert!(svg.contains("polyline"));
    }
}
