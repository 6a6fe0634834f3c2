//! Procedural box-room scenes, a ray-casting renderer, and occlusion-aware
//! pixel correspondences between two camera views.

mod dataset;
mod geometry;
mod matching;
mod render;
mod sample;
mod scene;

use std::path::Path;

pub use dataset::{
    generate_scene_records, load_scene_records, record_dir, scene_dataset_dir, scene_dataset_hash, scene_pair, SceneManifest,
};
pub use geometry::{Quat, Ray, Vec3};
pub use matching::{match_pixels, pixel_of, BACKPROJECT_TOLERANCE_PX, DEFAULT_EPSILON};
pub use render::{albedo, render, shade, CameraPose, HitMap, AMBIENT};
pub use sample::{mutual_visibility, sample_scene, sample_scene_with, SceneSampler};
pub use scene::{Primitive, RayHit, SceneSpec, Shape, T_MIN};

use crate::correspondence::CorrespondenceMap;
use crate::error::Result;
use crate::raster::Image;
use crate::viewgen::ViewPair;

/// Renders both views and matches them.
pub fn render_pair(scene: &SceneSpec, cam1: &CameraPose, cam2: &CameraPose, epsilon: f64) -> Result<ViewPair> {
    scene.validate()?;
    cam1.validate(scene)?;
    cam2.validate(scene)?;
    let (view1, hits1) = render(scene, cam1);
    let (view2, hits2) = render(scene, cam2);
    let corr = match_pixels(scene, cam1, cam2, &hits1, &hits2, epsilon)?;
    Ok(ViewPair { view1, view2, corr })
}

/// Writes `view1.png`, `view2.png` and `corr.oxcr` into `dir`.
pub fn write_record(dir: impl AsRef<Path>, pair: &ViewPair) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    pair.view1.save_png(dir.join("view1.png"))?;
    pair.view2.save_png(dir.join("view2.png"))?;
    pair.corr.save(dir.join("corr.oxcr"))
}

pub fn read_record(dir: impl AsRef<Path>) -> Result<ViewPair> {
    let dir = dir.as_ref();
    Ok(ViewPair {
        view1: Image::load_png(dir.join("view1.png"))?,
        view2: Image::load_png(dir.join("view2.png"))?,
        corr: CorrespondenceMap::load(dir.join("corr.oxcr"))?,
    })
}

#[cfg(test)]
mod tests;
