//! False-color feature images, channel grids, match overlays and loss curves.

use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::evaluate::MatchReport;
use crate::loss::FeatureMap;
use crate::raster::Image;
use crate::trainer::write_csv;

/// `clip(0.5·x + 0.5, 0, 1)`.
pub fn to_unit(x: f32) -> f32 {
    (0.5 * x + 0.5).clamp(0.0, 1.0)
}

fn check_channel(f: &FeatureMap, ch: usize) -> Result<()> {
    if ch >= f.depth() {
        return Err(Error::Input(format!("channel {ch} out of range for depth {}", f.depth())));
    }
    Ok(())
}

/// Three feature channels as RGB.
pub fn false_color(f: &FeatureMap, channels: [usize; 3]) -> Result<Image> {
    for ch in channels {
        check_channel(f, ch)?;
    }
    let mut img = Image::new(f.height(), f.width());
    for r in 0..f.height() {
        for c in 0..f.width() {
            let px = f.pixel(r, c);
            img.set(r, c, channels.map(|ch| to_unit(px[ch])));
        }
    }
    Ok(img)
}

/// One channel as a gray image, same affine map as [`false_color`].
pub fn channel_image(f: &FeatureMap, ch: usize) -> Result<Image> {
    false_color(f, [ch; 3])
}

/// `(rows, cols)` with `rows * cols = d` and `rows` the largest divisor not
/// above `sqrt(d)`.
pub fn grid_shape(d: usize) -> (usize, usize) {
    let mut rows = 1;
    let mut k = 1;
    while k * k <= d {
        if d % k == 0 {
            rows = k;
        }
        k += 1;
    }
    (rows, d / rows.max(1))
}

/// All channels tiled row-major with 1-pixel black separators.
pub fn channel_grid(f: &FeatureMap) -> Image {
    let (h, w) = (f.height(), f.width());
    let (rows, cols) = grid_shape(f.depth());
    let mut out = Image::new(rows * h + rows.saturating_sub(1), cols * w + cols.saturating_sub(1));
    for ch in 0..f.depth() {
        let tile = channel_image(f, ch).expect("channel in range");
        out.blit(&tile, (ch / cols) * (h + 1), (ch % cols) * (w + 1));
    }
    out
}

const SOURCE_MARK: [f32; 3] = [1.0, 1.0, 0.0];
const MATCH_MARK: [f32; 3] = [0.0, 1.0, 1.0];
const TRUTH_MARK: [f32; 3] = [1.0, 0.0, 1.0];

/// View 1 and view 2 side by side (1-pixel gap). Source pixels are marked
/// yellow on the left, their best matches cyan on the right, and the
/// ground-truth targets magenta when known.
pub fn match_overlay(view1: &Image, view2: &Image, report: &MatchReport) -> Image {
    let gap = 1;
    let h = view1.height().max(view2.height());
    let mut out = Image::new(h, view1.width() + gap + view2.width());
    out.blit(view1, 0, 0);
    let off = view1.width() + gap;
    out.blit(view2, 0, off);
    for rec in report.records.iter() {
        out.set(rec.source_row, rec.source_col, SOURCE_MARK);
        if let (Some(r), Some(c)) = (rec.truth_row, rec.truth_col) {
            out.set(r, off + c, TRUTH_MARK);
        }
        out.set(rec.match_row, off + rec.match_col, MATCH_MARK);
    }
    out
}

/// One configuration's runs, each a list of `(step, loss)` points.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGroup {
    pub label: String,
    pub runs: Vec<Vec<(usize, f64)>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurvePoint {
    pub label: String,
    pub step: usize,
    pub mean: f64,
    /// Mean minus one population standard deviation across runs.
    pub lower: f64,
    pub upper: f64,
    pub runs: usize,
}

/// Linear interpolation of `run` at `step`, clamped to its end values.
pub fn interpolate(run: &[(usize, f64)], step: usize) -> f64 {
    let i = run.partition_point(|p| p.0 < step);
    if i == 0 {
        return run[0].1;
    }
    if i == run.len() {
        return run[run.len() - 1].1;
    }
    let (s0, v0) = run[i - 1];
    let (s1, v1) = run[i];
    if s1 == step {
        return v1;
    }
    let t = (step - s0) as f64 / (s1 - s0) as f64;
    v0 + (v1 - v0) * t
}

/// Mean ± standard deviation per group on the step grid of the group's
/// first run. Runs logged on other grids are linearly interpolated onto it.
pub fn aggregate_losses(groups: &[LossGroup]) -> Result<Vec<CurvePoint>> {
    if groups.is_empty() || groups.iter().any(|g| g.runs.is_empty() || g.runs.iter().any(Vec::is_empty)) {
        return Err(Error::Input("need at least one non-empty log per group".into()));
    }
    let mut out = Vec::new();
    for g in groups {
        let n = g.runs.len() as f64;
        for &(step, _) in &g.runs[0] {
            let vals: Vec<f64> = g.runs.iter().map(|r| interpolate(r, step)).collect();
            let mean = vals.iter().sum::<f64>() / n;
            let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
            out.push(CurvePoint {
                label: g.label.clone(),
                step,
                mean,
                lower: mean - sd,
                upper: mean + sd,
                runs: g.runs.len(),
            });
        }
    }
    Ok(out)
}

const PALETTE: [[f32; 3]; 6] = [
    [0.85, 0.2, 0.2],
    [0.2, 0.45, 0.85],
    [0.2, 0.7, 0.3],
    [0.8, 0.5, 0.1],
    [0.55, 0.3, 0.75],
    [0.3, 0.3, 0.3],
];

fn blend(a: [f32; 3], b: [f32; 3], t: f32) -> [f32; 3] {
    [0, 1, 2].map(|i| a[i] * (1.0 - t) + b[i] * t)
}

/// Draws the aggregated curves on a white canvas: a light band per group
/// and the mean as a line. Axes are the plot frame; there is no text.
pub fn render_curves(points: &[CurvePoint], height: usize, width: usize) -> Image {
    let mut img = Image::filled(height, width, [1.0; 3]);
    if points.is_empty() || height < 4 || width < 4 {
        return img;
    }
    let smax = points.iter().map(|p| p.step).max().unwrap_or(0).max(1) as f64;
    let smin = points.iter().map(|p| p.step).min().unwrap_or(0) as f64;
    let lo = points.iter().map(|p| p.lower).fold(f64::INFINITY, f64::min);
    let hi = points.iter().map(|p| p.upper).fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let (ph, pw) = (height - 3, width - 3);
    let x_of = |s: usize| 1 + (((s as f64 - smin) / (smax - smin).max(1.0)) * pw as f64).round() as usize;
    let y_of = |v: f64| 1 + (((hi - v) / span) * ph as f64).round().clamp(0.0, ph as f64) as usize;
    let mut labels: Vec<&str> = Vec::new();
    for p in points {
        if !labels.contains(&p.label.as_str()) {
            labels.push(&p.label);
        }
    }
    for (gi, label) in labels.iter().enumerate() {
        let color = PALETTE[gi % PALETTE.len()];
        let band = blend(color, [1.0; 3], 0.75);
        let pts: Vec<&CurvePoint> = points.iter().filter(|p| p.label == *label).collect();
        for p in &pts {
            let x = x_of(p.step);
            for y in y_of(p.upper)..=y_of(p.lower) {
                img.set(y, x, band);
            }
        }
        for pair in pts.windows(2) {
            let (x0, y0) = (x_of(pair[0].step) as i64, y_of(pair[0].mean) as i64);
            let (x1, y1) = (x_of(pair[1].step) as i64, y_of(pair[1].mean) as i64);
            let n = (x1 - x0).abs().max((y1 - y0).abs()).max(1);
            for k in 0..=n {
                let x = x0 + (x1 - x0) * k / n;
                let y = y0 + (y1 - y0) * k / n;
                img.set(y as usize, x as usize, color);
            }
        }
        if pts.len() == 1 {
            img.set(y_of(pts[0].mean), x_of(pts[0].step), color);
        }
    }
    for x in 0..width {
        img.set(height - 1, x, [0.0; 3]);
    }
    for y in 0..height {
        img.set(y, 0, [0.0; 3]);
    }
    img
}

/// Writes `<stem>.png` and `<stem>.csv` and returns the aggregated points.
pub fn plot_losses(groups: &[LossGroup], out_dir: &Path, stem: &str) -> Result<Vec<CurvePoint>> {
    let points = aggregate_losses(groups)?;
    std::fs::create_dir_all(out_dir)?;
    write_csv(&out_dir.join(format!("{stem}.csv")), &points)?;
    render_curves(&points, 360, 640).save_png(out_dir.join(format!("{stem}.png")))?;
    Ok(points)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn map_of(values: &[f32], h: usize, w: usize, d: usize) -> FeatureMap {
        FeatureMap::from_vec(h, w, d, values.to_vec()).unwrap()
    }

    #[test]
    fn affine_map_and_clipping() {
        let f = map_of(&[1.0, -1.0, 3.0, 0.0], 1, 1, 4);
        assert_eq!(false_color(&f, [0, 1, 2]).unwrap().get(0, 0), [1.0, 0.0, 1.0]);
        assert!(matches!(false_color(&f, [0, 1, 4]), Err(Error::Input(_))));
    }

    #[test]
    fn grid_layout_arithmetic() {
        assert_eq!(grid_shape(32), (4, 8));
        assert_eq!(grid_shape(16), (4, 4));
        assert_eq!(grid_shape(7), (1, 7));
        let f = FeatureMap::zeros(32, 32, 32);
        let g = channel_grid(&f);
        assert_eq!((g.height(), g.width()), (4 * 32 + 3, 8 * 32 + 7));
        // Constant map: every tile pixel is the same gray.
        assert_eq!(g.get(0, 0), [0.5; 3]);
        assert_eq!(g.get(3 * 33 + 31, 7 * 33 + 31), [0.5; 3]);
        assert_eq!(g.get(32, 0), [0.0; 3]);
    }

    #[test]
    fn single_log_curve_is_the_log() {
        let run = vec![(0, 3.0), (1, 2.0), (2, 1.5)];
        let pts = aggregate_losses(&[LossGroup { label: "a".into(), runs: vec![run.clone()] }]).unwrap();
        for (p, (s, v)) in pts.iter().zip(run) {
            assert_eq!((p.step, p.mean, p.lower, p.upper), (s, v, v, v));
        }
    }

    #[test]
    fn identical_logs_have_zero_band_and_mismatched_grids_interpolate() {
        let run = vec![(0, 1.0), (10, 0.5)];
        let pts = aggregate_losses(&[LossGroup { label: "a".into(), runs: vec![run.clone(), run] }]).unwrap();
        assert!(pts.iter().all(|p| p.lower == p.upper));
        let coarse = vec![(0, 1.0), (4, 0.0)];
        let fine = vec![(0, 1.0), (2, 0.5), (4, 0.0)];
        let pts = aggregate_losses(&[LossGroup { label: "b".into(), runs: vec![fine, coarse] }]).unwrap();
        assert_eq!(pts[1].mean, 0.5);
        assert_eq!(pts[1].upper, pts[1].lower);
    }

    #[test]
    fn mean_matches_recomputation() {
        let runs: Vec<Vec<(usize, f64)>> = (0..3).map(|k| (0..5).map(|s| (s, (s * (k + 1)) as f64 * 0.1)).collect()).collect();
        let pts = aggregate_losses(&[LossGroup { label: "m".into(), runs: runs.clone() }]).unwrap();
        for p in &pts {
            let m = runs.iter().map(|r| r[p.step].1).sum::<f64>() / 3.0;
            assert!((p.mean - m).abs() < 1e-12);
        }
        let dir = tempfile::tempdir().unwrap();
        plot_losses(&[LossGroup { label: "m".into(), runs }], dir.path(), "loss").unwrap();
        assert!(dir.path().join("loss.png").is_file() && dir.path().join("loss.csv").is_file());
    }

    proptest! {
        #[test]
        fn unmapping_recovers_values_in_range(v in -1.0f32..=1.0) {
            let f = map_of(&[v, 0.0, 0.0, 0.0], 1, 1, 4);
            let x = false_color(&f, [0, 1, 2]).unwrap().get(0, 0)[0];
            prop_assert!((2.0 * (x - 0.5) - v).abs() < 1e-6);
        }
    }
}
