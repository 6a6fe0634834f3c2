use serde::{Deserialize, Serialize};

use super::geometry::{Quat, Ray, Vec3};
use super::scene::{RayHit, SceneSpec};
use crate::error::{Error, Result};
use crate::raster::Image;

pub const AMBIENT: f32 = 0.2;

/// Pinhole camera looking down its local `-z` axis with `+y` up.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    pub position: Vec3,
    /// Camera-to-world rotation.
    pub orientation: Quat,
    /// Vertical field of view in radians.
    pub fov: f64,
    pub height: usize,
    pub width: usize,
}

impl CameraPose {
    /// Camera at `position` looking at `target` with world `+y` as up.
    pub fn look_at(position: Vec3, target: Vec3, fov: f64, height: usize, width: usize) -> Result<Self> {
        let forward = (target - position).normalized();
        let mut up = Vec3::new(0.0, 1.0, 0.0);
        if forward.cross(up).norm() < 1e-6 {
            up = Vec3::new(0.0, 0.0, 1.0);
        }
        let right = forward.cross(up).normalized();
        let true_up = right.cross(forward);
        if !forward.x.is_finite() {
            return Err(Error::Input("camera target coincides with its position".into()));
        }
        Ok(Self {
            position,
            orientation: Quat::from_columns(right, true_up, -forward),
            fov,
            height,
            width,
        })
    }

    pub fn validate(&self, scene: &SceneSpec) -> Result<()> {
        if (self.orientation.norm() - 1.0).abs() > 1e-6 {
            return Err(Error::Input("camera quaternion is not unit length".into()));
        }
        if !scene.contains(self.position) {
            return Err(Error::Input("camera is outside the room".into()));
        }
        if !(self.fov > 0.0 && self.fov < std::f64::consts::PI) || self.height == 0 || self.width == 0 {
            return Err(Error::Input("camera intrinsics are degenerate".into()));
        }
        Ok(())
    }

    fn half_extents(&self) -> (f64, f64) {
        let ty = (self.fov / 2.0).tan();
        (ty * self.width as f64 / self.height as f64, ty)
    }

    /// Ray through the center of pixel `(row, col)`.
    pub fn ray(&self, row: usize, col: usize) -> Ray {
        let (tx, ty) = self.half_extents();
        let x = ((col as f64 + 0.5) / self.width as f64 * 2.0 - 1.0) * tx;
        let y = (1.0 - (row as f64 + 0.5) / self.height as f64 * 2.0) * ty;
        Ray {
            origin: self.position,
            dir: self.orientation.rotate(Vec3::new(x, y, -1.0).normalized()),
        }
    }

    /// Continuous `(row, col)` of a world point, with pixel centers at
    /// integers; `None` behind the camera.
    pub fn project(&self, p: Vec3) -> Option<(f64, f64)> {
        let local = self.orientation.conj().rotate(p - self.position);
        if local.z >= -1e-12 {
            return None;
        }
        let (tx, ty) = self.half_extents();
        let x = local.x / -local.z;
        let y = local.y / -local.z;
        let col = (x / tx + 1.0) / 2.0 * self.width as f64 - 0.5;
        let row = (1.0 - y / ty) / 2.0 * self.height as f64 - 0.5;
        Some((row, col))
    }

    pub fn with_resolution(&self, height: usize, width: usize) -> Self {
        Self { height, width, ..*self }
    }
}

/// Per-pixel primary hits, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct HitMap {
    pub height: usize,
    pub width: usize,
    pub hits: Vec<RayHit>,
}

impl HitMap {
    pub fn get(&self, row: usize, col: usize) -> &RayHit {
        &self.hits[row * self.width + col]
    }
}

/// Checkerboard albedo: two colors and a cell size chosen by texture id.
pub fn albedo(texture: u32, p: Vec3) -> [f32; 3] {
    const PALETTE: [[f32; 3]; 8] = [
        [0.90, 0.30, 0.25],
        [0.25, 0.65, 0.90],
        [0.95, 0.85, 0.30],
        [0.35, 0.80, 0.40],
        [0.75, 0.40, 0.85],
        [0.95, 0.60, 0.20],
        [0.85, 0.85, 0.85],
        [0.30, 0.35, 0.45],
    ];
    let t = texture as usize;
    let a = PALETTE[t % 8];
    let b = PALETTE[(t * 3 + 5) % 8];
    let cell = 0.15 + 0.1 * (t % 4) as f64;
    let parity = (p.x / cell).floor() as i64 + (p.y / cell).floor() as i64 + (p.z / cell).floor() as i64;
    if parity.rem_euclid(2) == 0 {
        a
    } else {
        b
    }
}

/// `clamp(albedo · max(0, n·l) + ambient)` per channel.
pub fn shade(scene: &SceneSpec, hit: &RayHit) -> [f32; 3] {
    let lambert = hit.normal.dot(scene.light).max(0.0) as f32;
    albedo(scene.texture_of(hit.object), hit.point).map(|a| (a * lambert + AMBIENT).clamp(0.0, 1.0))
}

/// Casts one primary ray per pixel.
pub fn render(scene: &SceneSpec, cam: &CameraPose) -> (Image, HitMap) {
    let mut img = Image::new(cam.height, cam.width);
    let mut hits = Vec::with_capacity(cam.height * cam.width);
    for r in 0..cam.height {
        for c in 0..cam.width {
            let hit = scene
                .intersect(&cam.ray(r, c))
                .expect("rays from inside a closed room always hit");
            img.set(r, c, shade(scene, &hit));
            hits.push(hit);
        }
    }
    (
        img,
        HitMap {
            height: cam.height,
            width: cam.width,
            hits,
        },
    )
}
