//! The bounded pixel-level contrastive loss.
//!
//! Per pixel, positive pairs pay `d + d²` (zero only at `d = 0`), while
//! negative and between-image pairs pay `-d + d²`, which bottoms out at
//! `-1/4` for `d = 1/2` and grows again beyond it. The push term is therefore
//! bounded below and the features cannot run off to infinity.
//!
//! All functions are generic over the float type so gradients can be checked
//! in `f64`.

use std::fmt;
use std::str::FromStr;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampling::PixelSampleSet;

/// `H×W×D` per-pixel descriptors, pixel-interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<T = f32> {
    height: usize,
    width: usize,
    depth: usize,
    data: Vec<T>,
}

impl<T: Float> FeatureMap<T> {
    pub fn zeros(height: usize, width: usize, depth: usize) -> Self {
        Self {
            height,
            width,
            depth,
            data: vec![T::zero(); height * width * depth],
        }
    }

    /// Rejects wrong lengths and `depth <= 3` (the map must be overcomplete).
    pub fn from_vec(height: usize, width: usize, depth: usize, data: Vec<T>) -> Result<Self> {
        if depth <= 3 {
            return Err(Error::Shape(format!("feature depth must exceed 3, got {depth}")));
        }
        if data.len() != height * width * depth {
            return Err(Error::Shape(format!(
                "{height}x{width}x{depth} feature map needs {} values, got {}",
                height * width * depth,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            depth,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    #[inline]
    pub fn pixel(&self, row: usize, col: usize) -> &[T] {
        let i = (row * self.width + col) * self.depth;
        &self.data[i..i + self.depth]
    }

    #[inline]
    pub fn pixel_mut(&mut self, row: usize, col: usize) -> &mut [T] {
        let i = (row * self.width + col) * self.depth;
        &mut self.data[i..i + self.depth]
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        (self.height, self.width, self.depth) == (other.height, other.width, other.depth)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Float>(&self) -> FeatureMap<U> {
        FeatureMap {
            height: self.height,
            width: self.width,
            depth: self.depth,
            data: self.data.iter().map(|v| U::from(*v).expect("finite cast")).collect(),
        }
    }
}

/// Which `p`-norm measures feature distances.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Norm {
    #[serde(rename = "l1", alias = "one", alias = "1")]
    L1,
    #[serde(rename = "l2", alias = "two", alias = "2")]
    L2,
    #[serde(rename = "linf", alias = "infinity", alias = "inf")]
    Inf,
}

impl Norm {
    pub const ALL: [Norm; 3] = [Norm::L1, Norm::L2, Norm::Inf];
}

impl fmt::Display for Norm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Norm::L1 => "l1",
            Norm::L2 => "l2",
            Norm::Inf => "linf",
        })
    }
}

impl FromStr for Norm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l1" | "one" | "1" => Ok(Norm::L1),
            "l2" | "two" | "2" => Ok(Norm::L2),
            "linf" | "inf" | "infinity" => Ok(Norm::Inf),
            other => Err(Error::Config(format!("unknown norm `{other}` (expected l1, l2 or linf)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Weight of the within-image term; the between term gets `1 - lambda`.
    pub lambda: f64,
    pub norm: Norm,
    /// Positive fraction `f`.
    #[serde(default = "default_fraction")]
    pub f: f64,
    /// When set, `f` is drawn uniformly from this range at every step.
    #[serde(default)]
    pub f_range: Option<(f64, f64)>,
    /// Negative targets closer than this to the true correspondence are redrawn.
    #[serde(default)]
    pub exclusion_radius: f64,
}

fn default_fraction() -> f64 {
    0.125
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            norm: Norm::Inf,
            f: default_fraction(),
            f_range: None,
            exclusion_radius: 0.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        if !(0.0..=1.0).contains(&self.f) {
            return Err(Error::Config(format!("f {} outside [0, 1]", self.f)));
        }
        if let Some((lo, hi)) = self.f_range {
            if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
                return Err(Error::Config(format!("f_range ({lo}, {hi}) must satisfy 0 <= lo <= hi <= 1")));
            }
        }
        if !(self.exclusion_radius >= 0.0 && self.exclusion_radius.is_finite()) {
            return Err(Error::Config("exclusion_radius must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// `‖a − b‖_p`.
pub fn pixel_distance<T: Float>(a: &[T], b: &[T], norm: Norm) -> T {
    debug_assert_eq!(a.len(), b.len());
    let diffs = a.iter().zip(b).map(|(x, y)| (*x - *y).abs());
    match norm {
        Norm::L1 => diffs.fold(T::zero(), |s, d| s + d),
        Norm::L2 => diffs.fold(T::zero(), |s, d| s + d * d).sqrt(),
        Norm::Inf => diffs.fold(T::zero(), T::max),
    }
}

/// Adds `scale · ∂‖a − b‖/∂a` to `ga` and its negation to `gb`.
///
/// Subgradients: ℓ1 uses `sign(0) = 0`; ℓ∞ routes everything to the first
/// channel attaining the maximum; ℓ2 divides by `sqrt(Σ diff² + 1e-12)`.
pub fn accumulate_distance_grad<T: Float>(a: &[T], b: &[T], norm: Norm, scale: T, ga: &mut [T], gb: &mut [T]) {
    let sign = |v: T| {
        if v > T::zero() {
            T::one()
        } else if v < T::zero() {
            -T::one()
        } else {
            T::zero()
        }
    };
    match norm {
        Norm::L1 => {
            for i in 0..a.len() {
                let g = scale * sign(a[i] - b[i]);
                ga[i] = ga[i] + g;
                gb[i] = gb[i] - g;
            }
        }
        Norm::L2 => {
            let sq = a.iter().zip(b).fold(T::zero(), |s, (x, y)| s + (*x - *y) * (*x - *y));
            let denom = (sq + T::from(1e-12).unwrap()).sqrt();
            for i in 0..a.len() {
                let g = scale * (a[i] - b[i]) / denom;
                ga[i] = ga[i] + g;
                gb[i] = gb[i] - g;
            }
        }
        Norm::Inf => {
            let mut best = 0;
            let mut best_v = T::neg_infinity();
            for i in 0..a.len() {
                let v = (a[i] - b[i]).abs();
                if v > best_v {
                    best_v = v;
                    best = i;
                }
            }
            if !a.is_empty() {
                let g = scale * sign(a[best] - b[best]);
                ga[best] = ga[best] + g;
                gb[best] = gb[best] - g;
            }
        }
    }
}

/// Positive-pair penalty `d + d²`.
#[inline]
pub fn positive_term<T: Float>(d: T) -> T {
    d + d * d
}

/// Negative/between penalty `-d + d²`; minimum `-1/4` at `d = 1/2`.
#[inline]
pub fn negative_term<T: Float>(d: T) -> T {
    d * d - d
}

/// A loss value with its gradients w.r.t. both feature maps.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad<T> {
    pub value: T,
    pub grad_a: FeatureMap<T>,
    pub grad_b: FeatureMap<T>,
}

fn check_pair<T: Float>(a: &FeatureMap<T>, b: &FeatureMap<T>) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::Shape(format!(
            "feature maps differ: {}x{}x{} vs {}x{}x{}",
            a.height, a.width, a.depth, b.height, b.width, b.depth
        )));
    }
    Ok(())
}

fn check_samples<T: Float>(f: &FeatureMap<T>, s: &PixelSampleSet) -> Result<()> {
    let inside = |p: &(usize, usize)| p.0 < f.height && p.1 < f.width;
    if s.positives.iter().chain(&s.negatives).all(|(p, q)| inside(p) && inside(q)) {
        Ok(())
    } else {
        Err(Error::Shape("sample coordinates outside the feature map".into()))
    }
}

/// Within-image loss between view-1 features `f1` and view-2 features `f2`.
pub fn within_loss<T: Float>(f1: &FeatureMap<T>, f2: &FeatureMap<T>, samples: &PixelSampleSet, norm: Norm) -> Result<T> {
    Ok(within_loss_grad(f1, f2, samples, norm)?.value)
}

pub fn within_loss_grad<T: Float>(
    f1: &FeatureMap<T>,
    f2: &FeatureMap<T>,
    samples: &PixelSampleSet,
    norm: Norm,
) -> Result<LossGrad<T>> {
    check_pair(f1, f2)?;
    check_samples(f1, samples)?;
    let mut ga = FeatureMap::zeros(f1.height, f1.width, f1.depth);
    let mut gb = ga.clone();
    let mut value = T::zero();
    let two = T::from(2.0).unwrap();
    let groups: [(&[_], bool); 2] = [(&samples.positives, true), (&samples.negatives, false)];
    for (pairs, positive) in groups {
        if pairs.is_empty() {
            continue;
        }
        let inv = T::one() / T::from(pairs.len()).unwrap();
        let mut sum = T::zero();
        for &(p, q) in pairs {
            let (a, b) = (f1.pixel(p.0, p.1), f2.pixel(q.0, q.1));
            let d = pixel_distance(a, b, norm);
            let (term, slope) = if positive {
                (positive_term(d), T::one() + two * d)
            } else {
                (negative_term(d), two * d - T::one())
            };
            sum = sum + term;
            let i = (p.0 * f1.width + p.1) * f1.depth;
            let j = (q.0 * f2.width + q.1) * f2.depth;
            let depth = f1.depth;
            accumulate_distance_grad(
                a,
                b,
                norm,
                slope * inv,
                &mut ga.data[i..i + depth],
                &mut gb.data[j..j + depth],
            );
        }
        value = value + sum * inv;
    }
    Ok(LossGrad {
        value,
        grad_a: ga,
        grad_b: gb,
    })
}

/// Between-image loss on two unrelated views, pixel by pixel.
pub fn between_loss<T: Float>(fa: &FeatureMap<T>, fb: &FeatureMap<T>, norm: Norm) -> Result<T> {
    Ok(between_loss_grad(fa, fb, norm)?.value)
}

pub fn between_loss_grad<T: Float>(fa: &FeatureMap<T>, fb: &FeatureMap<T>, norm: Norm) -> Result<LossGrad<T>> {
    check_pair(fa, fb)?;
    let mut ga = FeatureMap::zeros(fa.height, fa.width, fa.depth);
    let mut gb = ga.clone();
    let n = fa.height * fa.width;
    if n == 0 {
        return Ok(LossGrad {
            value: T::zero(),
            grad_a: ga,
            grad_b: gb,
        });
    }
    let inv = T::one() / T::from(n).unwrap();
    let two = T::from(2.0).unwrap();
    let d = fa.depth;
    let mut sum = T::zero();
    for i in 0..n {
        let r = i * d..(i + 1) * d;
        let (a, b) = (&fa.data[r.clone()], &fb.data[r.clone()]);
        let c = pixel_distance(a, b, norm);
        sum = sum + negative_term(c);
        accumulate_distance_grad(a, b, norm, (two * c - T::one()) * inv, &mut ga.data[r.clone()], &mut gb.data[r]);
    }
    Ok(LossGrad {
        value: sum * inv,
        grad_a: ga,
        grad_b: gb,
    })
}

/// `λ · within + (1 − λ) · between`.
pub fn total_loss<T: Float>(within: T, between: T, lambda: T) -> T {
    lambda * within + (T::one() - lambda) * between
}

/// Batch-averaged loss terms and gradients for both views of every image.
#[derive(Debug, Clone)]
pub struct BatchLoss<T> {
    pub total: T,
    pub within: T,
    pub between: T,
    pub grad_view1: Vec<FeatureMap<T>>,
    pub grad_view2: Vec<FeatureMap<T>>,
}

/// Loss over a batch of view pairs. The between term pairs the second view
/// of image `i` with the second view of image `(i + 1) mod B`.
pub fn batch_loss<T: Float>(
    view1: &[FeatureMap<T>],
    view2: &[FeatureMap<T>],
    samples: &[PixelSampleSet],
    lambda: f64,
    norm: Norm,
) -> Result<BatchLoss<T>> {
    let b = view1.len();
    if b == 0 || view2.len() != b || samples.len() != b {
        return Err(Error::Shape(format!(
            "batch sizes disagree: {} view-1, {} view-2, {} sample sets",
            b,
            view2.len(),
            samples.len()
        )));
    }
    if lambda < 1.0 && b < 2 {
        return Err(Error::Config("the between-image term needs a batch of at least 2".into()));
    }
    let lam = T::from(lambda).unwrap();
    let inv_b = T::one() / T::from(b).unwrap();
    let mut grad_view1: Vec<_> = view1.iter().map(|f| FeatureMap::zeros(f.height, f.width, f.depth)).collect();
    let mut grad_view2 = grad_view1.clone();
    let mut within = T::zero();
    let mut between = T::zero();
    let add = |dst: &mut FeatureMap<T>, src: &FeatureMap<T>, s: T| {
        for (d, v) in dst.data.iter_mut().zip(&src.data) {
            *d = *d + *v * s;
        }
    };
    if lambda > 0.0 {
        for i in 0..b {
            let g = within_loss_grad(&view1[i], &view2[i], &samples[i], norm)?;
            within = within + g.value * inv_b;
            add(&mut grad_view1[i], &g.grad_a, lam * inv_b);
            add(&mut grad_view2[i], &g.grad_b, lam * inv_b);
        }
    }
    if lambda < 1.0 {
        for i in 0..b {
            let j = (i + 1) % b;
            let g = between_loss_grad(&view2[i], &view2[j], norm)?;
            between = between + g.value * inv_b;
            let s = (T::one() - lam) * inv_b;
            add(&mut grad_view2[i], &g.grad_a, s);
            add(&mut grad_view2[j], &g.grad_b, s);
        }
    }
    Ok(BatchLoss {
        total: total_loss(within, between, lam),
        within,
        between,
        grad_view1,
        grad_view2,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::correspondence::CorrespondenceMap;
    use crate::sampling::build_sample_set;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_map(rng: &mut impl Rng, h: usize, w: usize, d: usize) -> FeatureMap<f64> {
        FeatureMap::from_vec(h, w, d, (0..h * w * d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn distance_examples() {
        let (a, b) = ([1.0, 0.0], [0.0, 1.0]);
        assert_eq!(pixel_distance(&a, &b, Norm::Inf), 1.0);
        assert_eq!(pixel_distance(&a, &b, Norm::L1), 2.0);
        assert!((pixel_distance(&a, &b, Norm::L2) - 2f64.sqrt()).abs() < 1e-15);
        for n in Norm::ALL {
            assert_eq!(pixel_distance(&a, &a, n), 0.0);
        }
    }

    #[test]
    fn identical_maps_with_only_positives_give_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let f = random_map(&mut rng, 4, 4, 8);
        let s = build_sample_set(&CorrespondenceMap::identity(4, 4), 1.0, &mut rng).unwrap();
        for n in Norm::ALL {
            assert_eq!(within_loss(&f, &f, &s, n).unwrap(), 0.0);
        }
    }

    #[test]
    fn single_negative_at_half_distance() {
        let mut f1 = FeatureMap::<f64>::zeros(1, 2, 4);
        let f2 = FeatureMap::<f64>::zeros(1, 2, 4);
        f1.pixel_mut(0, 0)[0] = 0.5;
        let s = PixelSampleSet {
            positives: vec![],
            negatives: vec![((0, 0), (0, 1))],
            fraction: 0.0,
        };
        for n in Norm::ALL {
            assert_eq!(within_loss(&f1, &f2, &s, n).unwrap(), -0.25);
        }
    }

    #[test]
    fn between_at_half_distance_everywhere() {
        let fa = FeatureMap::<f64>::from_vec(2, 2, 4, vec![0.5; 16]).unwrap();
        let fb = FeatureMap::<f64>::from_vec(2, 2, 4, [0.0, 0.5, 0.5, 0.5].repeat(4)).unwrap();
        assert_eq!(between_loss(&fa, &fb, Norm::Inf).unwrap(), -0.25);
        assert_eq!(between_loss(&fa, &fb, Norm::L1).unwrap(), -0.25);
        assert_eq!(between_loss(&fa, &fa, Norm::L2).unwrap(), 0.0);
    }

    #[test]
    fn total_loss_examples() {
        assert_eq!(total_loss(0.3, -0.1, 1.0), 0.3);
        assert_eq!(total_loss(0.3, -0.1, 0.0), -0.1);
        assert!((total_loss(0.3, -0.1, 0.5) - 0.1f64).abs() < 1e-15);
    }

    #[test]
    fn depth_must_exceed_three() {
        assert!(FeatureMap::<f32>::from_vec(1, 1, 3, vec![0.0; 3]).is_err());
    }

    #[test]
    fn batch_of_one_needs_pure_within() {
        let f = FeatureMap::<f64>::zeros(2, 2, 4);
        let s = build_sample_set(&CorrespondenceMap::identity(2, 2), 0.5, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let one = [f.clone()];
        assert!(batch_loss(&one, &one, &[s.clone()], 0.5, Norm::Inf).is_err());
        assert!(batch_loss(&one, &one, &[s], 1.0, Norm::Inf).is_ok());
    }

    #[test]
    fn batch_between_uses_cyclic_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v1: Vec<_> = (0..3).map(|_| random_map(&mut rng, 3, 3, 4)).collect();
        let v2: Vec<_> = (0..3).map(|_| random_map(&mut rng, 3, 3, 4)).collect();
        let s: Vec<_> = (0..3)
            .map(|_| build_sample_set(&CorrespondenceMap::identity(3, 3), 0.25, &mut rng).unwrap())
            .collect();
        let got = batch_loss(&v1, &v2, &s, 0.0, Norm::L2).unwrap();
        let want = (0..3).map(|i| between_loss(&v2[i], &v2[(i + 1) % 3], Norm::L2).unwrap()).sum::<f64>() / 3.0;
        assert!((got.between - want).abs() < 1e-12);
        assert_eq!(got.total, got.between);
        assert!(got.grad_view1.iter().all(|g| g.as_slice().iter().all(|v| *v == 0.0)));
    }

    proptest! {
        #[test]
        fn norm_ordering(v in proptest::collection::vec((-3.0f64..3.0, -3.0f64..3.0), 1..40)) {
            let (a, b): (Vec<f64>, Vec<f64>) = v.into_iter().unzip();
            let inf = pixel_distance(&a, &b, Norm::Inf);
            let l2 = pixel_distance(&a, &b, Norm::L2);
            let l1 = pixel_distance(&a, &b, Norm::L1);
            prop_assert!(inf <= l2 + 1e-12 && l2 <= l1 + 1e-12);
        }

        #[test]
        fn term_bounds(d in 0.0f64..100.0) {
            prop_assert!(positive_term(d) >= 0.0);
            prop_assert!(negative_term(d) >= -0.25);
        }
    }
}
