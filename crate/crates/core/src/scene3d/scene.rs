use serde::{Deserialize, Serialize};

use super::geometry::{Quat, Ray, Vec3};
use crate::error::{Error, Result};

/// Smallest accepted hit distance; avoids self-intersection at the origin.
pub const T_MIN: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    Sphere { radius: f64 },
    /// Oriented box with the given half extents along its local axes.
    Cuboid { half: Vec3 },
    /// Capped cylinder along the local y axis.
    Cylinder { radius: f64, half_height: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub shape: Shape,
    pub center: Vec3,
    pub rotation: Quat,
    pub texture: u32,
}

impl Primitive {
    /// Radius of a sphere around `center` containing the whole primitive.
    pub fn bounding_radius(&self) -> f64 {
        match self.shape {
            Shape::Sphere { radius } => radius,
            Shape::Cuboid { half } => half.norm(),
            Shape::Cylinder { radius, half_height } => (radius * radius + half_height * half_height).sqrt(),
        }
    }

    /// Nearest hit with `t > T_MIN` as `(t, outward normal)`.
    pub fn intersect(&self, ray: &Ray) -> Option<(f64, Vec3)> {
        let inv = self.rotation.conj();
        let o = inv.rotate(ray.origin - self.center);
        let d = inv.rotate(ray.dir);
        let (t, n) = match self.shape {
            Shape::Sphere { radius } => sphere(o, d, radius)?,
            Shape::Cuboid { half } => cuboid(o, d, half)?,
            Shape::Cylinder { radius, half_height } => cylinder(o, d, radius, half_height)?,
        };
        Some((t, self.rotation.rotate(n)))
    }
}

fn sphere(o: Vec3, d: Vec3, r: f64) -> Option<(f64, Vec3)> {
    let b = o.dot(d);
    let c = o.dot(o) - r * r;
    let disc = b * b - c;
    if disc < 0.0 {
        return None;
    }
    let s = disc.sqrt();
    let t = [-b - s, -b + s].into_iter().find(|&t| t > T_MIN)?;
    Some((t, (o + d * t) * (1.0 / r)))
}

fn cuboid(o: Vec3, d: Vec3, half: Vec3) -> Option<(f64, Vec3)> {
    let mut t_near = f64::NEG_INFINITY;
    let mut t_far = f64::INFINITY;
    let mut near_axis = 0;
    let mut far_axis = 0;
    for axis in 0..3 {
        let (oa, da, h) = (o.get(axis), d.get(axis), half.get(axis));
        if da.abs() < 1e-15 {
            if oa.abs() > h {
                return None;
            }
            continue;
        }
        let (mut t0, mut t1) = ((-h - oa) / da, (h - oa) / da);
        if t0 > t1 {
            std::mem::swap(&mut t0, &mut t1);
        }
        if t0 > t_near {
            t_near = t0;
            near_axis = axis;
        }
        if t1 < t_far {
            t_far = t1;
            far_axis = axis;
        }
    }
    if t_near > t_far {
        return None;
    }
    let (t, axis) = if t_near > T_MIN {
        (t_near, near_axis)
    } else if t_far > T_MIN {
        (t_far, far_axis)
    } else {
        return None;
    };
    let p = o + d * t;
    let mut n = [0.0; 3];
    n[axis] = p.get(axis).signum();
    Some((t, Vec3::new(n[0], n[1], n[2])))
}

fn cylinder(o: Vec3, d: Vec3, r: f64, hh: f64) -> Option<(f64, Vec3)> {
    let mut best: Option<(f64, Vec3)> = None;
    let mut consider = |t: f64, n: Vec3| {
        if t > T_MIN && best.is_none_or(|(bt, _)| t < bt) {
            best = Some((t, n));
        }
    };
    let a = d.x * d.x + d.z * d.z;
    if a > 1e-15 {
        let b = o.x * d.x + o.z * d.z;
        let c = o.x * o.x + o.z * o.z - r * r;
        let disc = b * b - a * c;
        if disc >= 0.0 {
            let s = disc.sqrt();
            for t in [(-b - s) / a, (-b + s) / a] {
                let p = o + d * t;
                if p.y.abs() <= hh {
                    consider(t, Vec3::new(p.x / r, 0.0, p.z / r));
                }
            }
        }
    }
    if d.y.abs() > 1e-15 {
        for cap in [-hh, hh] {
            let t = (cap - o.y) / d.y;
            let p = o + d * t;
            if p.x * p.x + p.z * p.z <= r * r {
                consider(t, Vec3::new(0.0, cap.signum(), 0.0));
            }
        }
    }
    best
}

/// A box room spanning `[0, size]` on every axis, with objects inside.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub room: Vec3,
    pub objects: Vec<Primitive>,
    /// Unit vector pointing toward the light.
    pub light: Vec3,
    /// Texture id of the walls.
    pub wall_texture: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RayHit {
    pub point: Vec3,
    /// 0 for the room, `i + 1` for `objects[i]`.
    pub object: u32,
    pub distance: f64,
    /// Unit surface normal facing the incoming ray.
    pub normal: Vec3,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.objects.is_empty() {
            return Err(Error::Input("a scene needs at least one object".into()));
        }
        for (i, o) in self.objects.iter().enumerate() {
            let r = o.bounding_radius();
            for axis in 0..3 {
                let c = o.center.get(axis);
                if !(c - r > 0.0 && c + r < self.room.get(axis)) {
                    return Err(Error::Input(format!("object {i} leaves the room along axis {axis}")));
                }
            }
        }
        Ok(())
    }

    pub fn contains(&self, p: Vec3) -> bool {
        (0..3).all(|a| p.get(a) > 0.0 && p.get(a) < self.room.get(a))
    }

    fn room_exit(&self, ray: &Ray) -> Option<(f64, Vec3)> {
        let mut best: Option<(f64, Vec3)> = None;
        for axis in 0..3 {
            let d = ray.dir.get(axis);
            if d.abs() < 1e-15 {
                continue;
            }
            let wall = if d > 0.0 { self.room.get(axis) } else { 0.0 };
            let t = (wall - ray.origin.get(axis)) / d;
            if t > T_MIN && best.is_none_or(|(bt, _)| t < bt) {
                let mut n = [0.0; 3];
                n[axis] = -d.signum();
                best = Some((t, Vec3::new(n[0], n[1], n[2])));
            }
        }
        best
    }

    /// Closest surface along the ray. Rays starting inside the room always
    /// hit something.
    pub fn intersect(&self, ray: &Ray) -> Option<RayHit> {
        let (mut t, mut normal) = self.room_exit(ray)?;
        let mut object = 0;
        for (i, o) in self.objects.iter().enumerate() {
            if let Some((ti, ni)) = o.intersect(ray) {
                if ti < t {
                    t = ti;
                    normal = ni;
                    object = i as u32 + 1;
                }
            }
        }
        if normal.dot(ray.dir) > 0.0 {
            normal = -normal;
        }
        Some(RayHit {
            point: ray.at(t),
            object,
            distance: t,
            normal,
        })
    }

    pub fn texture_of(&self, object: u32) -> u32 {
        if object == 0 {
            self.wall_texture
        } else {
            self.objects[object as usize - 1].texture
        }
    }
}
