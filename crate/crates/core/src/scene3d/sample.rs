use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::geometry::{Quat, Vec3};
use super::matching::{match_pixels, DEFAULT_EPSILON};
use super::render::{render, CameraPose};
use super::scene::{Primitive, SceneSpec, Shape};
use crate::error::{Error, Result};

pub const WALL_TEXTURES: u32 = 4;
pub const OBJECT_TEXTURES: u32 = 8;

/// Knobs for [`sample_scene_with`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSampler {
    pub height: usize,
    pub width: usize,
    /// Vertical field of view in degrees.
    pub fov_deg: f64,
    pub epsilon: f64,
    /// Required fraction of view-1 pixels with a valid match, measured on a
    /// coarse render.
    pub min_overlap: f64,
    pub probe_size: usize,
    pub max_tries: usize,
}

impl Default for SceneSampler {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            fov_deg: 60.0,
            epsilon: DEFAULT_EPSILON,
            min_overlap: 0.2,
            probe_size: 16,
            max_tries: 1000,
        }
    }
}

fn uniform_vec(rng: &mut impl Rng, lo: Vec3, hi: Vec3) -> Vec3 {
    Vec3::new(rng.gen_range(lo.x..hi.x), rng.gen_range(lo.y..hi.y), rng.gen_range(lo.z..hi.z))
}

fn random_axis(rng: &mut impl Rng) -> Vec3 {
    loop {
        let v = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            return v * (1.0 / n);
        }
    }
}

fn sample_object(rng: &mut impl Rng, room: Vec3) -> Primitive {
    let shape = match rng.gen_range(0..3) {
        0 => Shape::Sphere {
            radius: rng.gen_range(0.3..0.9),
        },
        1 => Shape::Cuboid {
            half: uniform_vec(rng, Vec3::new(0.2, 0.2, 0.2), Vec3::new(0.7, 0.7, 0.7)),
        },
        _ => Shape::Cylinder {
            radius: rng.gen_range(0.2..0.6),
            half_height: rng.gen_range(0.3..0.9),
        },
    };
    let rotation = Quat::from_axis_angle(random_axis(rng), rng.gen_range(0.0..2.0 * PI));
    let texture = rng.gen_range(0..OBJECT_TEXTURES);
    let mut p = Primitive {
        shape,
        center: Vec3::default(),
        rotation,
        texture,
    };
    let m = p.bounding_radius() + 0.05;
    p.center = uniform_vec(rng, Vec3::new(m, m, m), room - Vec3::new(m, m, m));
    p
}

fn sample_position(rng: &mut impl Rng, scene: &SceneSpec) -> Option<Vec3> {
    let margin = Vec3::new(0.4, 0.4, 0.4);
    for _ in 0..50 {
        let p = uniform_vec(rng, margin, scene.room - margin);
        if scene
            .objects
            .iter()
            .all(|o| (p - o.center).norm() > o.bounding_radius() + 0.3)
        {
            return Some(p);
        }
    }
    None
}

fn roll(cam: CameraPose, angle: f64) -> CameraPose {
    CameraPose {
        orientation: cam.orientation.mul(Quat::from_axis_angle(Vec3::new(0.0, 0.0, 1.0), angle)).normalized(),
        ..cam
    }
}

fn sample_cameras(rng: &mut impl Rng, scene: &SceneSpec, cfg: &SceneSampler) -> Result<Option<(CameraPose, CameraPose)>> {
    let fov = cfg.fov_deg.to_radians();
    let Some(p1) = sample_position(rng, scene) else {
        return Ok(None);
    };
    let focus = scene.objects[rng.gen_range(0..scene.objects.len())].center;
    let target1 = focus + uniform_vec(rng, Vec3::new(-0.5, -0.5, -0.5), Vec3::new(0.5, 0.5, 0.5));
    let offset = random_axis(rng) * rng.gen_range(0.3..1.5);
    let p2 = p1 + offset;
    if !scene.contains(p2)
        || scene
            .objects
            .iter()
            .any(|o| (p2 - o.center).norm() <= o.bounding_radius() + 0.3)
    {
        return Ok(None);
    }
    let target2 = focus + uniform_vec(rng, Vec3::new(-0.5, -0.5, -0.5), Vec3::new(0.5, 0.5, 0.5));
    if (target1 - p1).norm() < 0.5 || (target2 - p2).norm() < 0.5 {
        return Ok(None);
    }
    let cam1 = roll(CameraPose::look_at(p1, target1, fov, cfg.height, cfg.width)?, rng.gen_range(-0.25..0.25));
    let cam2 = roll(CameraPose::look_at(p2, target2, fov, cfg.height, cfg.width)?, rng.gen_range(-0.25..0.25));
    Ok(Some((cam1, cam2)))
}

/// Fraction of view-1 pixels with a valid match in a small probe render.
pub fn mutual_visibility(scene: &SceneSpec, cam1: &CameraPose, cam2: &CameraPose, size: usize, epsilon: f64) -> Result<f64> {
    let (c1, c2) = (cam1.with_resolution(size, size), cam2.with_resolution(size, size));
    let (_, h1) = render(scene, &c1);
    let (_, h2) = render(scene, &c2);
    Ok(match_pixels(scene, &c1, &c2, &h1, &h2, epsilon)?.valid_fraction())
}

/// Random room, objects and an overlapping camera pair at 64×64.
pub fn sample_scene(rng: &mut impl Rng) -> Result<(SceneSpec, CameraPose, CameraPose)> {
    sample_scene_with(rng, &SceneSampler::default())
}

pub fn sample_scene_with(rng: &mut impl Rng, cfg: &SceneSampler) -> Result<(SceneSpec, CameraPose, CameraPose)> {
    if cfg.height == 0 || cfg.width == 0 || cfg.probe_size == 0 || !(cfg.epsilon > 0.0) {
        return Err(Error::Config("scene sampler needs positive sizes and epsilon".into()));
    }
    for _ in 0..cfg.max_tries {
        let room = uniform_vec(rng, Vec3::new(4.0, 4.0, 4.0), Vec3::new(8.0, 8.0, 8.0));
        let count = rng.gen_range(3..=8);
        let objects = (0..count).map(|_| sample_object(rng, room)).collect();
        let light = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(0.5..1.5), rng.gen_range(-1.0..1.0)).normalized();
        let scene = SceneSpec {
            room,
            objects,
            light,
            wall_texture: rng.gen_range(0..WALL_TEXTURES),
        };
        let Some((cam1, cam2)) = sample_cameras(rng, &scene, cfg)? else {
            continue;
        };
        if mutual_visibility(&scene, &cam1, &cam2, cfg.probe_size, cfg.epsilon)? >= cfg.min_overlap {
            return Ok((scene, cam1, cam2));
        }
    }
    Err(Error::Generation(format!(
        "no scene with {:.0}% mutual visibility after {} tries",
        cfg.min_overlap * 100.0,
        cfg.max_tries
    )))
}
