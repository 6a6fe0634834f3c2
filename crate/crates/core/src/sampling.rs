//! Positive/negative pixel sets for the within-image loss.
//!
//! Every source pixel lands in exactly one of `P` (paired with its true
//! correspondence) or `N` (paired with a random target pixel that differs
//! from its correspondence).

use rand::seq::index;
use rand::Rng;

use crate::correspondence::CorrespondenceMap;
use crate::error::{Error, Result};

pub type Pixel = (usize, usize);

#[derive(Debug, Clone, PartialEq)]
pub struct PixelSampleSet {
    /// `(p, T(p))`, row-major by `p`.
    pub positives: Vec<(Pixel, Pixel)>,
    /// `(p, R(p))`, row-major by `p`.
    pub negatives: Vec<(Pixel, Pixel)>,
    /// Realized `|P| / |S|`.
    pub fraction: f64,
}

impl PixelSampleSet {
    pub fn len(&self) -> usize {
        self.positives.len() + self.negatives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Samples with exclusion radius 0: a negative target only has to differ
/// from the true correspondence.
pub fn build_sample_set(corr: &CorrespondenceMap, f: f64, rng: &mut impl Rng) -> Result<PixelSampleSet> {
    build_sample_set_with_radius(corr, f, 0.0, rng)
}

/// As [`build_sample_set`], but negative targets within Euclidean distance
/// `radius` of the true correspondence are redrawn.
pub fn build_sample_set_with_radius(
    corr: &CorrespondenceMap,
    f: f64,
    radius: f64,
    rng: &mut impl Rng,
) -> Result<PixelSampleSet> {
    if !(0.0..=1.0).contains(&f) {
        return Err(Error::Config(format!("positive fraction {f} outside [0, 1]")));
    }
    if !(radius >= 0.0 && radius.is_finite()) {
        return Err(Error::Config(format!("exclusion radius {radius} must be finite and >= 0")));
    }
    let (h, w) = (corr.height(), corr.width());
    let n = h * w;
    let valid: Vec<usize> = (0..n).filter(|&i| corr.is_valid(i / w, i % w)).collect();
    let k = ((f * n as f64).round() as usize).min(valid.len());
    let mut chosen: Vec<usize> = index::sample(rng, valid.len(), k)
        .into_iter()
        .map(|j| valid[j])
        .collect();
    chosen.sort_unstable();

    let mut is_pos = vec![false; n];
    let mut positives = Vec::with_capacity(k);
    for &i in &chosen {
        is_pos[i] = true;
        let p = (i / w, i % w);
        let t = corr.valid_target(p.0, p.1).expect("chosen from valid pixels");
        positives.push((p, t));
    }

    let mut negatives = Vec::with_capacity(n - k);
    for i in (0..n).filter(|&i| !is_pos[i]) {
        let p = (i / w, i % w);
        let target = match corr.valid_target(p.0, p.1) {
            None => rng.gen_range(0..n),
            Some(t) if radius == 0.0 => {
                if n < 2 {
                    return Err(Error::Input("a 1-pixel grid has no negative target".into()));
                }
                let excluded = t.0 * w + t.1;
                let u = rng.gen_range(0..n - 1);
                if u >= excluded {
                    u + 1
                } else {
                    u
                }
            }
            Some(t) => draw_outside(t, radius, h, w, rng)?,
        };
        negatives.push((p, (target / w, target % w)));
    }

    Ok(PixelSampleSet {
        positives,
        negatives,
        fraction: if n == 0 { 0.0 } else { k as f64 / n as f64 },
    })
}

fn draw_outside(t: Pixel, radius: f64, h: usize, w: usize, rng: &mut impl Rng) -> Result<usize> {
    let far = |i: usize| {
        let dr = (i / w) as f64 - t.0 as f64;
        let dc = (i % w) as f64 - t.1 as f64;
        (dr * dr + dc * dc).sqrt() > radius
    };
    // Corners are the farthest points; if none clears the radius nothing does.
    let corners = [0, w - 1, (h - 1) * w, h * w - 1];
    if !corners.iter().any(|&i| far(i)) {
        return Err(Error::Config(format!(
            "exclusion radius {radius} covers the whole {h}x{w} grid"
        )));
    }
    loop {
        let i = rng.gen_range(0..h * w);
        if far(i) {
            return Ok(i);
        }
    }
}
