use super::geometry::Ray;
use super::render::{CameraPose, HitMap};
use super::scene::SceneSpec;
use crate::correspondence::CorrespondenceMap;
use crate::error::{Error, Result};

pub const DEFAULT_EPSILON: f64 = 0.01;

/// Largest pixel distance allowed when a matched view-2 hit is projected
/// back into view 1.
pub const BACKPROJECT_TOLERANCE_PX: f64 = 1.0;

/// Nearest pixel of a continuous `(row, col)`, if inside the frame.
pub fn pixel_of(rc: (f64, f64), height: usize, width: usize) -> Option<(usize, usize)> {
    let (r, c) = (rc.0.round(), rc.1.round());
    (r >= 0.0 && c >= 0.0 && r < height as f64 && c < width as f64).then_some((r as usize, c as usize))
}

/// Occlusion-aware correspondences from view 1 to view 2.
///
/// A view-1 hit `x` is matched to the view-2 pixel `q` it projects onto when
/// (a) the ray from the second camera toward `x` first meets the scene
/// within `epsilon` of `x`, and (b) the primary hit of `q` projects back into
/// view 1 within one pixel of the source pixel.
pub fn match_pixels(
    scene: &SceneSpec,
    cam1: &CameraPose,
    cam2: &CameraPose,
    hits1: &HitMap,
    hits2: &HitMap,
    epsilon: f64,
) -> Result<CorrespondenceMap> {
    if !(epsilon > 0.0) {
        return Err(Error::Config(format!("match epsilon must be positive, got {epsilon}")));
    }
    if hits1.height != cam1.height || hits1.width != cam1.width || hits2.height != cam2.height || hits2.width != cam2.width {
        return Err(Error::Shape("hit maps do not match camera resolutions".into()));
    }
    if cam1.height != cam2.height || cam1.width != cam2.width {
        return Err(Error::Shape("both views must share a resolution".into()));
    }
    let (h, w) = (cam1.height, cam1.width);
    let mut map = CorrespondenceMap::new(h, w);
    for r in 0..h {
        for c in 0..w {
            let x = hits1.get(r, c).point;
            let Some(q) = cam2.project(x).and_then(|rc| pixel_of(rc, h, w)) else {
                map.set(r, c, (-1, -1), false);
                continue;
            };
            let to_x = x - cam2.position;
            let ray = Ray {
                origin: cam2.position,
                dir: to_x.normalized(),
            };
            let visible = scene
                .intersect(&ray)
                .is_some_and(|hit| (hit.point - x).norm() <= epsilon);
            let consistent = cam1.project(hits2.get(q.0, q.1).point).is_some_and(|(br, bc)| {
                let (dr, dc) = (br - r as f64, bc - c as f64);
                (dr * dr + dc * dc).sqrt() <= BACKPROJECT_TOLERANCE_PX
            });
            let valid = visible && consistent;
            map.set(r, c, (q.0 as i32, q.1 as i32), valid);
        }
    }
    Ok(map)
}
