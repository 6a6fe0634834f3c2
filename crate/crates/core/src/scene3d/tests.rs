use std::f64::consts::FRAC_PI_3;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;

fn room_with(objects: Vec<Primitive>) -> SceneSpec {
    SceneSpec {
        room: Vec3::new(6.0, 6.0, 6.0),
        objects,
        light: Vec3::new(0.3, 1.0, 0.2).normalized(),
        wall_texture: 1,
    }
}

fn small_sphere(center: Vec3, radius: f64) -> Primitive {
    Primitive {
        shape: Shape::Sphere { radius },
        center,
        rotation: Quat::IDENTITY,
        texture: 2,
    }
}

fn center_hit(scene: &SceneSpec, cam: &CameraPose) -> RayHit {
    // Odd resolution puts a pixel center exactly on the optical axis.
    let cam = cam.with_resolution(9, 9);
    let (_, hits) = render(scene, &cam);
    *hits.get(4, 4)
}

#[test]
fn flat_wall_distance() {
    let scene = room_with(vec![small_sphere(Vec3::new(5.0, 5.0, 5.0), 0.3)]);
    let cam = CameraPose::look_at(Vec3::new(3.0, 3.0, 3.7), Vec3::new(3.0, 3.0, 0.0), FRAC_PI_3, 9, 9).unwrap();
    let hit = center_hit(&scene, &cam);
    assert_eq!(hit.object, 0);
    assert!((hit.distance - 3.7).abs() < 1e-4);
}

#[test]
fn sphere_center_distance() {
    // Unit sphere 4 m in front of the camera along its axis, shifted into the room.
    let scene = SceneSpec {
        room: Vec3::new(6.0, 6.0, 7.0),
        ..room_with(vec![small_sphere(Vec3::new(3.0, 3.0, 1.5), 1.0)])
    };
    let cam = CameraPose::look_at(Vec3::new(3.0, 3.0, 6.5), Vec3::new(3.0, 3.0, 1.5), FRAC_PI_3, 9, 9).unwrap();
    let hit = center_hit(&scene, &cam);
    assert_eq!(hit.object, 1);
    assert!((hit.distance - 4.0).abs() < 1e-9);
}

#[test]
fn hits_lie_on_their_rays() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (scene, cam, _) = sample_scene(&mut rng).unwrap();
    let (img, hits) = render(&scene, &cam);
    for r in 0..cam.height {
        for c in 0..cam.width {
            let hit = hits.get(r, c);
            let ray = cam.ray(r, c);
            assert!(hit.distance > 0.0);
            assert!((ray.at(hit.distance) - hit.point).norm() < 1e-6);
            assert!(img.get(r, c).iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}

/// Slab-free reference intersections, kept separate from the renderer.
mod oracle {
    use super::*;

    fn solve_quadratic(a: f64, b: f64, c: f64) -> Vec<f64> {
        let disc = b * b - 4.0 * a * c;
        if disc < 0.0 || a.abs() < 1e-15 {
            return vec![];
        }
        let s = disc.sqrt();
        vec![(-b - s) / (2.0 * a), (-b + s) / (2.0 * a)]
    }

    /// Intersect with every face plane and keep points inside the face.
    fn cuboid(o: Vec3, d: Vec3, half: Vec3) -> Vec<f64> {
        let mut ts = vec![];
        for axis in 0..3 {
            for sign in [-1.0, 1.0] {
                let da = d.get(axis);
                if da.abs() < 1e-15 {
                    continue;
                }
                let t = (sign * half.get(axis) - o.get(axis)) / da;
                let p = o + d * t;
                if (0..3).filter(|&a| a != axis).all(|a| p.get(a).abs() <= half.get(a) + 1e-12) {
                    ts.push(t);
                }
            }
        }
        ts
    }

    fn candidates(p: &Primitive, ray: &Ray) -> Vec<f64> {
        let inv = p.rotation.conj();
        let o = inv.rotate(ray.origin - p.center);
        let d = inv.rotate(ray.dir);
        match p.shape {
            Shape::Sphere { radius } => solve_quadratic(d.dot(d), 2.0 * o.dot(d), o.dot(o) - radius * radius),
            Shape::Cuboid { half } => cuboid(o, d, half),
            Shape::Cylinder { radius, half_height } => {
                let mut ts: Vec<f64> = solve_quadratic(d.x * d.x + d.z * d.z, 2.0 * (o.x * d.x + o.z * d.z), o.x * o.x + o.z * o.z - radius * radius)
                    .into_iter()
                    .filter(|&t| (o.y + d.y * t).abs() <= half_height)
                    .collect();
                for cap in [-half_height, half_height] {
                    if d.y.abs() > 1e-15 {
                        let t = (cap - o.y) / d.y;
                        let (x, z) = (o.x + d.x * t, o.z + d.z * t);
                        if x * x + z * z <= radius * radius {
                            ts.push(t);
                        }
                    }
                }
                ts
            }
        }
    }

    pub fn nearest(scene: &SceneSpec, ray: &Ray) -> (u32, f64) {
        let mut best = (0u32, f64::INFINITY);
        for axis in 0..3 {
            for wall in [0.0, scene.room.get(axis)] {
                let t = (wall - ray.origin.get(axis)) / ray.dir.get(axis);
                if t > 0.0 && t < best.1 {
                    best = (0, t);
                }
            }
        }
        for (i, p) in scene.objects.iter().enumerate() {
            for t in candidates(p, ray) {
                if t > 1e-9 && t < best.1 {
                    best = (i as u32 + 1, t);
                }
            }
        }
        best
    }
}

#[test]
fn render_matches_brute_force_oracle() {
    for seed in 0..4 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (scene, cam, _) = sample_scene(&mut rng).unwrap();
        let cam = cam.with_resolution(16, 16);
        let (_, hits) = render(&scene, &cam);
        for r in 0..16 {
            for c in 0..16 {
                let (object, t) = oracle::nearest(&scene, &cam.ray(r, c));
                let hit = hits.get(r, c);
                assert_eq!(hit.object, object, "seed {seed} pixel ({r},{c})");
                assert!((hit.distance - t).abs() < 1e-9, "seed {seed} pixel ({r},{c})");
            }
        }
    }
}

#[test]
fn identical_cameras_give_identity_map() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (scene, cam, _) = sample_scene(&mut rng).unwrap();
    let (_, hits) = render(&scene, &cam);
    let map = match_pixels(&scene, &cam, &cam, &hits, &hits, DEFAULT_EPSILON).unwrap();
    for r in 0..cam.height {
        for c in 0..cam.width {
            assert_eq!(map.valid_target(r, c), Some((r, c)));
        }
    }
}

#[test]
fn nonpositive_epsilon_is_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (scene, cam, _) = sample_scene(&mut rng).unwrap();
    let (_, hits) = render(&scene, &cam);
    for eps in [0.0, -0.1, f64::NAN] {
        let err = match_pixels(&scene, &cam, &cam, &hits, &hits, eps).unwrap_err();
        assert!(matches!(err, crate::Error::Config(_)));
    }
}

#[test]
fn occluded_wall_pixel_is_invalid() {
    // Camera 1 looks straight at the back wall z = 0. Camera 2 sits to the side;
    // a sphere sits on the segment from camera 2 to the wall point hit by
    // camera 1's central pixel, but off camera 1's line of sight.
    let wall_point = Vec3::new(3.0, 3.0, 0.0);
    let cam1 = CameraPose::look_at(Vec3::new(3.0, 3.0, 4.0), wall_point, FRAC_PI_3, 9, 9).unwrap();
    let p2 = Vec3::new(5.0, 3.0, 4.0);
    let blocker = wall_point + (p2 - wall_point) * 0.5;
    let scene = room_with(vec![small_sphere(blocker, 0.3)]);
    // Hand geometry: the sphere center is 1.0 m from camera 1's axis (x = 3),
    // more than its radius, so camera 1 still sees the wall there.
    let cam2 = CameraPose::look_at(p2, wall_point, FRAC_PI_3, 9, 9).unwrap();
    let (_, h1) = render(&scene, &cam1);
    let (_, h2) = render(&scene, &cam2);
    assert_eq!(h1.get(4, 4).object, 0);
    assert!((h1.get(4, 4).point - wall_point).norm() < 1e-9);
    let map = match_pixels(&scene, &cam1, &cam2, &h1, &h2, DEFAULT_EPSILON).unwrap();
    assert!(!map.is_valid(4, 4));

    // Without the sphere the same pixel matches.
    let open = room_with(vec![small_sphere(Vec3::new(1.0, 5.0, 5.0), 0.3)]);
    let (_, h1) = render(&open, &cam1);
    let (_, h2) = render(&open, &cam2);
    let map = match_pixels(&open, &cam1, &cam2, &h1, &h2, DEFAULT_EPSILON).unwrap();
    assert_eq!(map.valid_target(4, 4), Some((4, 4)));
}

#[test]
fn flat_wall_pair_matches_over_shared_frustum() {
    let scene = room_with(vec![small_sphere(Vec3::new(5.5, 5.5, 5.5), 0.2)]);
    let target = Vec3::new(3.0, 3.0, 0.0);
    let cam1 = CameraPose::look_at(Vec3::new(2.8, 3.0, 3.0), target, FRAC_PI_3, 64, 64).unwrap();
    let cam2 = CameraPose::look_at(Vec3::new(3.3, 3.1, 3.2), target + Vec3::new(0.2, 0.0, 0.0), FRAC_PI_3, 64, 64).unwrap();
    let (_, h1) = render(&scene, &cam1);
    let (_, h2) = render(&scene, &cam2);
    let map = match_pixels(&scene, &cam1, &cam2, &h1, &h2, DEFAULT_EPSILON).unwrap();
    let mut shared = 0;
    let mut valid = 0;
    for r in 0..64 {
        for c in 0..64 {
            let p = h1.get(r, c);
            // Only pixels on the back wall whose hit projects inside view 2.
            if p.object != 0 || p.point.z.abs() > 1e-9 {
                continue;
            }
            if cam2.project(p.point).and_then(|rc| pixel_of(rc, 64, 64)).is_some() {
                shared += 1;
                valid += usize::from(map.is_valid(r, c));
            }
        }
    }
    assert!(shared > 1000, "shared region too small: {shared}");
    assert!(valid as f64 / shared as f64 >= 0.99, "{valid}/{shared}");
}

#[test]
fn matches_are_consistent_and_unoccluded() {
    for seed in 20..24 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (scene, cam1, cam2) = sample_scene(&mut rng).unwrap();
        let (_, h1) = render(&scene, &cam1);
        let (_, h2) = render(&scene, &cam2);
        let map = match_pixels(&scene, &cam1, &cam2, &h1, &h2, DEFAULT_EPSILON).unwrap();
        assert!(map.valid_count() > 0);
        for r in 0..cam1.height {
            for c in 0..cam1.width {
                let x = h1.get(r, c).point;
                let dir = (x - cam2.position).normalized();
                let first = scene.intersect(&Ray { origin: cam2.position, dir }).unwrap();
                let blocked = first.distance < (x - cam2.position).norm() - DEFAULT_EPSILON;
                if let Some((qr, qc)) = map.valid_target(r, c) {
                    let (br, bc) = cam1.project(h2.get(qr, qc).point).unwrap();
                    assert!(((br - r as f64).powi(2) + (bc - c as f64).powi(2)).sqrt() <= 1.0);
                    assert!(!blocked);
                }
                if blocked {
                    assert!(!map.is_valid(r, c));
                }
            }
        }
    }
}

#[test]
fn sampling_is_deterministic_and_valid() {
    let a = sample_scene(&mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let b = sample_scene(&mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    assert_eq!(a, b);
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..100 {
        let (scene, cam1, cam2) = sample_scene(&mut rng).unwrap();
        scene.validate().unwrap();
        assert!((3..=8).contains(&scene.objects.len()));
        for axis in 0..3 {
            assert!((4.0..8.0).contains(&scene.room.get(axis)));
        }
        cam1.validate(&scene).unwrap();
        cam2.validate(&scene).unwrap();
    }
}

#[test]
fn renderer_is_pure() {
    let (scene, cam, _) = sample_scene(&mut ChaCha8Rng::seed_from_u64(8)).unwrap();
    assert_eq!(render(&scene, &cam), render(&scene, &cam));
}

#[test]
fn impossible_overlap_fails_with_generation_error() {
    let cfg = SceneSampler {
        min_overlap: 1.01,
        max_tries: 5,
        ..SceneSampler::default()
    };
    let err = sample_scene_with(&mut ChaCha8Rng::seed_from_u64(0), &cfg).unwrap_err();
    assert!(matches!(err, crate::Error::Generation(_)));
}

#[test]
fn record_round_trip() {
    let (scene, cam1, cam2) = sample_scene(&mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let pair = render_pair(&scene, &cam1, &cam2, DEFAULT_EPSILON).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_record(dir.path(), &pair).unwrap();
    let back = read_record(dir.path()).unwrap();
    assert_eq!(back.corr, pair.corr);
    assert_eq!(back.view1.to_rgb8(), pair.view1.to_rgb8());
    assert_eq!(back.view2.to_rgb8(), pair.view2.to_rgb8());
}

#[test]
fn scene_records_are_idempotent() {
    let root = tempfile::tempdir().unwrap();
    let sampler = SceneSampler { height: 32, width: 32, ..SceneSampler::default() };
    let (dir, n) = generate_scene_records(root.path(), &sampler, 7, 3).unwrap();
    assert_eq!(n, 3);
    let before = std::fs::read(record_dir(&dir, 2).join("corr.oxcr")).unwrap();
    let (_, n) = generate_scene_records(root.path(), &sampler, 7, 3).unwrap();
    assert_eq!(n, 0);
    assert_eq!(std::fs::read(record_dir(&dir, 2).join("corr.oxcr")).unwrap(), before);
    assert_eq!(load_scene_records(&dir, 3).unwrap().len(), 3);
    assert!(matches!(load_scene_records(&dir, 4), Err(crate::Error::Dependency(_))));
}
