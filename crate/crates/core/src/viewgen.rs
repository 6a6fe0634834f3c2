//! Paired-view generation for 2D images.
//!
//! A view pair is two photometrically jittered copies of one image where the
//! second copy is additionally warped by a random perspective transform. The
//! transform is known, so the exact pixel correspondence between the views is
//! available as a [`CorrespondenceMap`].
//!
//! Homographies act on continuous `(x, y) = (col, row)` coordinates with pixel
//! centers at integer positions.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::correspondence::CorrespondenceMap;
use crate::error::{Error, Result};
use crate::raster::Image;

/// Ranges the random transform is drawn from.
///
/// Every range is symmetric: rotation is drawn from `[-rotation, rotation]`,
/// each scale factor from `[1 - scale, 1 + scale]`, each skew factor from
/// `[-skew, skew]` and each translation from `[-translation, translation]`
/// times the image extent along that axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransformRanges {
    /// Maximum absolute rotation in radians.
    pub rotation: f64,
    pub scale: f64,
    pub skew: f64,
    /// Fraction of the image size.
    pub translation: f64,
    /// Maximum absolute hue shift, as a fraction of the hue circle.
    pub hue: f64,
    /// Saturation is multiplied by a factor in `[1 - saturation, 1 + saturation]`.
    pub saturation: f64,
    /// Jitter view 1 as well as view 2. When false only view 2 is jittered.
    pub jitter_both: bool,
}

impl Default for TransformRanges {
    fn default() -> Self {
        Self {
            rotation: 25f64.to_radians(),
            scale: 0.2,
            skew: 0.2,
            translation: 0.1,
            hue: 0.1,
            saturation: 0.3,
            jitter_both: true,
        }
    }
}

impl TransformRanges {
    /// All ranges zero: identity transform and no jitter.
    pub fn none() -> Self {
        Self {
            rotation: 0.0,
            scale: 0.0,
            skew: 0.0,
            translation: 0.0,
            hue: 0.0,
            saturation: 0.0,
            jitter_both: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("rotation", self.rotation),
            ("scale", self.scale),
            ("skew", self.skew),
            ("translation", self.translation),
            ("hue", self.hue),
            ("saturation", self.saturation),
        ];
        for (name, v) in fields {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!(
                    "transform range `{name}` must be finite and non-negative, got {v}"
                )));
            }
        }
        if self.rotation > std::f64::consts::FRAC_PI_2 {
            return Err(Error::Config(format!(
                "rotation range {} exceeds pi/2",
                self.rotation
            )));
        }
        // A scale factor of zero (or below) collapses the image.
        if self.scale >= 1.0 {
            return Err(Error::Config(format!(
                "scale range {} admits non-positive scale factors",
                self.scale
            )));
        }
        // |kx * ky| < 1 keeps the shear matrix invertible.
        if self.skew >= 1.0 {
            return Err(Error::Config(format!(
                "skew range {} admits singular shears",
                self.skew
            )));
        }
        if self.saturation > 1.0 {
            return Err(Error::Config(format!(
                "saturation range {} admits negative saturation factors",
                self.saturation
            )));
        }
        Ok(())
    }
}

/// Parameters a [`Homography`] was assembled from.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct HomographyParams {
    pub rotation: f64,
    pub scale: (f64, f64),
    pub skew: (f64, f64),
    pub translation: (f64, f64),
}

type Mat3 = [[f64; 3]; 3];

fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

fn translation(tx: f64, ty: f64) -> Mat3 {
    [[1.0, 0.0, tx], [0.0, 1.0, ty], [0.0, 0.0, 1.0]]
}

/// 3×3 projective transform on `(x, y)` pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Homography {
    matrix: Mat3,
    params: HomographyParams,
}

impl Homography {
    pub fn identity() -> Self {
        Self::from_params(HomographyParams {
            scale: (1.0, 1.0),
            ..Default::default()
        }, 1, 1)
    }

    pub fn from_matrix(matrix: Mat3) -> Result<Self> {
        let h = Self {
            matrix,
            params: HomographyParams::default(),
        };
        if h.determinant().abs() <= 1e-8 {
            return Err(Error::Input(format!(
                "homography is singular (det = {})",
                h.determinant()
            )));
        }
        Ok(h)
    }

    /// Assembles `T(center) · R · S · K · T(-center) · T(translation)` for an
    /// image of the given size, rotating about the image center.
    pub fn from_params(params: HomographyParams, height: usize, width: usize) -> Self {
        let cx = (width as f64 - 1.0) / 2.0;
        let cy = (height as f64 - 1.0) / 2.0;
        let (s, c) = params.rotation.sin_cos();
        let rot = [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]];
        let scale = [
            [params.scale.0, 0.0, 0.0],
            [0.0, params.scale.1, 0.0],
            [0.0, 0.0, 1.0],
        ];
        let skew = [[1.0, params.skew.0, 0.0], [params.skew.1, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let mut m = translation(cx, cy);
        for step in [
            rot,
            scale,
            skew,
            translation(-cx, -cy),
            translation(params.translation.0, params.translation.1),
        ] {
            m = mat_mul(&m, &step);
        }
        Self { matrix: m, params }
    }

    pub fn matrix(&self) -> &Mat3 {
        &self.matrix
    }

    pub fn params(&self) -> &HomographyParams {
        &self.params
    }

    pub fn determinant(&self) -> f64 {
        let m = &self.matrix;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    pub fn inverse(&self) -> Self {
        let m = &self.matrix;
        let det = self.determinant();
        let cof = |r0: usize, r1: usize, c0: usize, c1: usize| {
            m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0]
        };
        let adj = [
            [cof(1, 2, 1, 2), -cof(0, 2, 1, 2), cof(0, 1, 1, 2)],
            [-cof(1, 2, 0, 2), cof(0, 2, 0, 2), -cof(0, 1, 0, 2)],
            [cof(1, 2, 0, 1), -cof(0, 2, 0, 1), cof(0, 1, 0, 1)],
        ];
        let mut inv = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                inv[i][j] = adj[i][j] / det;
            }
        }
        Self {
            matrix: inv,
            params: HomographyParams::default(),
        }
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Homography) -> Self {
        Self {
            matrix: mat_mul(&self.matrix, &other.matrix),
            params: HomographyParams::default(),
        }
    }

    /// Maps `(x, y)`; `None` when the point goes to infinity.
    #[inline]
    pub fn apply(&self, x: f64, y: f64) -> Option<(f64, f64)> {
        let m = &self.matrix;
        let w = m[2][0] * x + m[2][1] * y + m[2][2];
        if w.abs() < 1e-12 {
            return None;
        }
        Some((
            (m[0][0] * x + m[0][1] * y + m[0][2]) / w,
            (m[1][0] * x + m[1][1] * y + m[1][2]) / w,
        ))
    }
}

/// Draws a random transform for an image of the given size.
pub fn sample_homography(
    rng: &mut impl Rng,
    ranges: &TransformRanges,
    height: usize,
    width: usize,
) -> Result<Homography> {
    ranges.validate()?;
    let mut sym = |r: f64| rng.gen_range(-r..=r);
    let rotation = sym(ranges.rotation);
    let scale = (1.0 + sym(ranges.scale), 1.0 + sym(ranges.scale));
    let skew = (sym(ranges.skew), sym(ranges.skew));
    let translation = (
        sym(ranges.translation) * width as f64,
        sym(ranges.translation) * height as f64,
    );
    Ok(Homography::from_params(
        HomographyParams {
            rotation,
            scale,
            skew,
            translation,
        },
        height,
        width,
    ))
}

/// Rounds to the nearest integer pixel, halves away from zero.
#[inline]
pub fn round_pixel(v: f64) -> i32 {
    v.round() as i32
}

/// Slack on the frame test so that exact rotations (where `cos(pi/2)` is
/// about 6e-17) do not push boundary pixels out by rounding residue.
pub const BOUNDS_EPS: f64 = 1e-9;

/// True when `(x, y)` lies in `[0, W-1] × [0, H-1]` up to [`BOUNDS_EPS`].
#[inline]
pub fn in_frame(x: f64, y: f64, height: usize, width: usize) -> bool {
    x >= -BOUNDS_EPS
        && y >= -BOUNDS_EPS
        && x <= width as f64 - 1.0 + BOUNDS_EPS
        && y <= height as f64 - 1.0 + BOUNDS_EPS
}

/// Maps every view-1 pixel through `h`; a pixel is valid when its continuous
/// image lies inside `[0, W-1] × [0, H-1]`.
pub fn build_correspondence(h: &Homography, height: usize, width: usize) -> CorrespondenceMap {
    let mut map = CorrespondenceMap::new(height, width);
    for r in 0..height {
        for c in 0..width {
            match h.apply(c as f64, r as f64) {
                Some((x, y)) => {
                    let valid = in_frame(x, y, height, width);
                    let target = if x.is_finite() && y.is_finite() {
                        (round_pixel(y), round_pixel(x))
                    } else {
                        (i32::MIN, i32::MIN)
                    };
                    map.set(r, c, target, valid);
                }
                None => map.set(r, c, (i32::MIN, i32::MIN), false),
            }
        }
    }
    map
}

/// Hue rotation plus saturation scaling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhotometricJitter {
    /// Fraction of the hue circle.
    pub hue_shift: f64,
    pub saturation_scale: f64,
}

impl Default for PhotometricJitter {
    fn default() -> Self {
        Self::identity()
    }
}

impl PhotometricJitter {
    pub fn identity() -> Self {
        Self {
            hue_shift: 0.0,
            saturation_scale: 1.0,
        }
    }

    pub fn sample(rng: &mut impl Rng, ranges: &TransformRanges) -> Self {
        let hue_shift = rng.gen_range(-ranges.hue..=ranges.hue);
        let saturation_scale = 1.0 + rng.gen_range(-ranges.saturation..=ranges.saturation);
        Self {
            hue_shift,
            saturation_scale,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.hue_shift == 0.0 && self.saturation_scale == 1.0
    }

    pub fn apply_pixel(&self, rgb: [f32; 3]) -> [f32; 3] {
        let (h, s, v) = rgb_to_hsv(rgb);
        let h = (h + self.hue_shift as f32).rem_euclid(1.0);
        let s = (s * self.saturation_scale as f32).clamp(0.0, 1.0);
        let out = hsv_to_rgb(h, s, v);
        out.map(|x| x.clamp(0.0, 1.0))
    }

    pub fn apply(&self, image: &Image) -> Image {
        if self.is_identity() {
            return image.clone();
        }
        let mut out = image.clone();
        for px in out.as_mut_slice().chunks_exact_mut(3) {
            let j = self.apply_pixel([px[0], px[1], px[2]]);
            px.copy_from_slice(&j);
        }
        out
    }
}

fn rgb_to_hsv([r, g, b]: [f32; 3]) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / delta).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { delta / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h6 = (h * 6.0).rem_euclid(6.0);
    let sector = h6.floor();
    let f = h6 - sector;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector as u32 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Inverse-maps every output pixel through `h⁻¹` and samples `image`
/// bilinearly. Pixels whose preimage falls outside the source are black.
pub fn warp_image(image: &Image, h: &Homography) -> Image {
    let (height, width) = (image.height(), image.width());
    let inv = h.inverse();
    let mut out = Image::new(height, width);
    let (max_x, max_y) = (width as f64 - 1.0, height as f64 - 1.0);
    for r in 0..height {
        for c in 0..width {
            let Some((x, y)) = inv.apply(c as f64, r as f64) else {
                continue;
            };
            if !in_frame(x, y, height, width) {
                continue;
            }
            out.set(r, c, bilinear(image, x.clamp(0.0, max_x), y.clamp(0.0, max_y)));
        }
    }
    out
}

fn bilinear(image: &Image, x: f64, y: f64) -> [f32; 3] {
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let x1 = (x0 + 1).min(image.width() - 1);
    let y1 = (y0 + 1).min(image.height() - 1);
    let fx = (x - x0 as f64) as f32;
    let fy = (y - y0 as f64) as f32;
    let (a, b, c, d) = (
        image.get(y0, x0),
        image.get(y0, x1),
        image.get(y1, x0),
        image.get(y1, x1),
    );
    let mut out = [0.0f32; 3];
    for k in 0..3 {
        let top = a[k] * (1.0 - fx) + b[k] * fx;
        let bottom = c[k] * (1.0 - fx) + d[k] * fx;
        out[k] = top * (1.0 - fy) + bottom * fy;
    }
    out
}

/// Two views of one image plus the correspondence from view-1 pixels to
/// view-2 pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewPair {
    pub view1: Image,
    pub view2: Image,
    pub corr: CorrespondenceMap,
}

/// Jitters the image twice independently and warps the second copy.
pub fn make_view_pair(
    image: &Image,
    rng: &mut impl Rng,
    ranges: &TransformRanges,
) -> Result<ViewPair> {
    let (height, width) = (image.height(), image.width());
    let h = sample_homography(rng, ranges, height, width)?;
    let jitter1 = if ranges.jitter_both {
        PhotometricJitter::sample(rng, ranges)
    } else {
        PhotometricJitter::identity()
    };
    let jitter2 = PhotometricJitter::sample(rng, ranges);
    let view1 = jitter1.apply(image);
    let view2 = warp_image(&jitter2.apply(image), &h);
    Ok(ViewPair {
        view1,
        view2,
        corr: build_correspondence(&h, height, width),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gradient_image(h: usize, w: usize) -> Image {
        let mut img = Image::new(h, w);
        for r in 0..h {
            for c in 0..w {
                img.set(r, c, [r as f32 / h as f32, c as f32 / w as f32, 0.5]);
            }
        }
        img
    }

    #[test]
    fn zero_ranges_give_identity_matrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h = sample_homography(&mut rng, &TransformRanges::none(), 32, 32).unwrap();
        let id = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        assert_eq!(h.matrix(), &id);
    }

    #[test]
    fn pure_translation_moves_x() {
        let h = Homography::from_params(
            HomographyParams {
                scale: (1.0, 1.0),
                translation: (2.0, 0.0),
                ..Default::default()
            },
            16,
            16,
        );
        assert_eq!(h.apply(5.0, 5.0), Some((7.0, 5.0)));
    }

    #[test]
    fn quarter_turn_about_center_hand_evaluated() {
        // Center of a 32x32 image is (15.5, 15.5). R(pi/2) sends
        // (dx, dy) to (-dy, dx), so (0,0) -> (15.5+15.5, 15.5-15.5) = (31, 0).
        let h = Homography::from_params(
            HomographyParams {
                rotation: std::f64::consts::FRAC_PI_2,
                scale: (1.0, 1.0),
                ..Default::default()
            },
            32,
            32,
        );
        let corners = [
            ((0.0, 0.0), (31.0, 0.0)),
            ((31.0, 0.0), (31.0, 31.0)),
            ((31.0, 31.0), (0.0, 31.0)),
            ((0.0, 31.0), (0.0, 0.0)),
        ];
        for ((x, y), (ex, ey)) in corners {
            let (gx, gy) = h.apply(x, y).unwrap();
            assert!((gx - ex).abs() < 1e-9 && (gy - ey).abs() < 1e-9, "({x},{y}) -> ({gx},{gy})");
        }
        let map = build_correspondence(&h, 32, 32);
        assert_eq!(map.target(0, 0), (0, 31));
        assert_eq!(map.target(0, 31), (31, 31));
        assert_eq!(map.valid_count(), 32 * 32);
    }

    #[test]
    fn degenerate_ranges_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for bad in [
            TransformRanges { scale: 1.0, ..TransformRanges::none() },
            TransformRanges { rotation: 2.0, ..TransformRanges::none() },
            TransformRanges { skew: f64::NAN, ..TransformRanges::none() },
            TransformRanges { skew: 1.5, ..TransformRanges::none() },
        ] {
            let err = sample_homography(&mut rng, &bad, 8, 8).unwrap_err();
            assert!(matches!(err, Error::Config(_)));
        }
    }

    #[test]
    fn identity_correspondence_on_4x4() {
        let map = build_correspondence(&Homography::identity(), 4, 4);
        assert_eq!(map, CorrespondenceMap::identity(4, 4));
    }

    #[test]
    fn translation_pushes_columns_out() {
        let h = Homography::from_params(
            HomographyParams {
                scale: (1.0, 1.0),
                translation: (3.0, 0.0),
                ..Default::default()
            },
            4,
            4,
        );
        let map = build_correspondence(&h, 4, 4);
        assert_eq!(map.valid_count(), 4);
        for r in 0..4 {
            assert!(map.is_valid(r, 0));
            for c in 1..4 {
                assert!(!map.is_valid(r, c));
            }
        }
    }

    #[test]
    fn random_correspondence_matches_per_pixel_multiply() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let h = sample_homography(&mut rng, &TransformRanges::default(), 8, 8).unwrap();
        let map = build_correspondence(&h, 8, 8);
        let m = h.matrix();
        for r in 0..8 {
            for c in 0..8 {
                let (x, y) = (c as f64, r as f64);
                let w = m[2][0] * x + m[2][1] * y + m[2][2];
                let qx = (m[0][0] * x + m[0][1] * y + m[0][2]) / w;
                let qy = (m[1][0] * x + m[1][1] * y + m[1][2]) / w;
                let inside = qx >= -1e-9 && qx <= 7.0 + 1e-9 && qy >= -1e-9 && qy <= 7.0 + 1e-9;
                assert_eq!(map.is_valid(r, c), inside);
                if inside {
                    assert_eq!(map.target(r, c), (qy.round() as i32, qx.round() as i32));
                }
            }
        }
    }

    #[test]
    fn zero_jitter_identity_pair_is_unchanged() {
        let img = gradient_image(8, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pair = make_view_pair(&img, &mut rng, &TransformRanges::none()).unwrap();
        assert_eq!(pair.view1, img);
        assert_eq!(pair.view2, img);
        assert_eq!(pair.corr, CorrespondenceMap::identity(8, 8));
    }

    #[test]
    fn hue_wraps_and_stays_in_range() {
        let red = Image::filled(4, 4, [1.0, 0.0, 0.0]);
        let j = PhotometricJitter {
            hue_shift: 0.5,
            saturation_scale: 1.0,
        };
        let out = j.apply(&red);
        for v in out.as_slice() {
            assert!((0.0..=1.0).contains(v));
        }
        // Half a turn from red is cyan.
        let px = out.get(0, 0);
        assert!(px[0].abs() < 1e-6 && (px[1] - 1.0).abs() < 1e-6 && (px[2] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn view_pairs_are_deterministic() {
        let img = gradient_image(16, 16);
        let a = make_view_pair(&img, &mut ChaCha8Rng::seed_from_u64(9), &TransformRanges::default()).unwrap();
        let b = make_view_pair(&img, &mut ChaCha8Rng::seed_from_u64(9), &TransformRanges::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn jitter_never_changes_correspondence() {
        let img = gradient_image(16, 16);
        let no_jitter = TransformRanges { hue: 0.0, saturation: 0.0, ..TransformRanges::default() };
        let with_jitter = TransformRanges { hue: 0.4, saturation: 0.9, ..TransformRanges::default() };
        // The homography is drawn first, so the same seed gives the same transform.
        let a = make_view_pair(&img, &mut ChaCha8Rng::seed_from_u64(5), &no_jitter).unwrap();
        let b = make_view_pair(&img, &mut ChaCha8Rng::seed_from_u64(5), &with_jitter).unwrap();
        assert_eq!(a.corr, b.corr);
    }

    proptest! {
        #[test]
        fn inverse_composes_to_identity(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let h = sample_homography(&mut rng, &TransformRanges::default(), 32, 32).unwrap();
            prop_assert!(h.determinant().abs() > 1e-8);
            let id = h.compose(&h.inverse());
            for i in 0..3 {
                for j in 0..3 {
                    let e = if i == j { 1.0 } else { 0.0 };
                    prop_assert!((id.matrix()[i][j] - e).abs() < 1e-6);
                }
            }
        }

        #[test]
        fn round_trip_returns_within_one_pixel(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let h = sample_homography(&mut rng, &TransformRanges::default(), 24, 24).unwrap();
            let fwd = build_correspondence(&h, 24, 24);
            let back = build_correspondence(&h.inverse(), 24, 24);
            for r in 0..24 {
                for c in 0..24 {
                    if let Some((tr, tc)) = fwd.valid_target(r, c) {
                        let (br, bc) = back.target(tr, tc);
                        prop_assert!((br - r as i32).abs() <= 1 && (bc - c as i32).abs() <= 1);
                    }
                }
            }
        }

        #[test]
        fn valid_mask_matches_brute_force_scan(seed in any::<u64>(), h in 2usize..20, w in 2usize..20) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let hom = sample_homography(&mut rng, &TransformRanges::default(), h, w).unwrap();
            let map = build_correspondence(&hom, h, w);
            for r in 0..h {
                for c in 0..w {
                    let (x, y) = hom.apply(c as f64, r as f64).unwrap();
                    let inside = x >= -1e-9 && x <= (w - 1) as f64 + 1e-9 && y >= -1e-9 && y <= (h - 1) as f64 + 1e-9;
                    prop_assert_eq!(map.is_valid(r, c), inside);
                    if inside {
                        let (tr, tc) = map.target(r, c);
                        prop_assert!(tr >= 0 && (tr as usize) < h && tc >= 0 && (tc as usize) < w);
                    }
                }
            }
        }
    }
}
