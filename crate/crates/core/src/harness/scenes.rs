//! Synthetic LiDAR-like scenes: non-overlapping boxes resting on a ground
//! plane, points sampled on and inside each box, and ground points outside
//! every footprint.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;

use super::mix;
use crate::geometry::{bev_iou, Point3, Roi};
use crate::voxel::scene::{Scene, SceneBox};
use crate::{Error, Result};

/// Class index → name. Index 0 is scored at the strict IoU threshold.
pub const CLASS_NAMES: [&str; 2] = ["car", "pedestrian"];

/// Mean full extents and a log-normal spread.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassPrior {
    pub size: Point3,
    pub log_sigma: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub boxes_min: usize,
    pub boxes_max: usize,
    /// Points sampled per box.
    pub points_min: usize,
    pub points_max: usize,
    pub ground_points: usize,
    /// Gaussian sensor noise, meters.
    pub noise: f64,
    pub pedestrian_frac: f64,
    /// Bird's-eye extent that every box footprint and ground point lies in.
    pub area_min: [f64; 2],
    pub area_max: [f64; 2],
    pub car: ClassPrior,
    pub pedestrian: ClassPrior,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            boxes_min: 2,
            boxes_max: 4,
            points_min: 150,
            points_max: 300,
            ground_points: 1500,
            noise: 0.02,
            pedestrian_frac: 0.25,
            area_min: [1.0, -11.0],
            area_max: [24.0, 11.0],
            car: ClassPrior { size: [4.0, 1.8, 1.6], log_sigma: 0.05 },
            pedestrian: ClassPrior { size: [0.8, 0.8, 1.7], log_sigma: 0.05 },
        }
    }
}

/// Placement attempts per box before giving up.
pub const MAX_ATTEMPTS: usize = 10_000;

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.boxes_min > self.boxes_max || self.points_min > self.points_max {
            return Err(config_err("scene count ranges must satisfy min <= max"));
        }
        if !(self.noise >= 0.0) {
            return Err(config_err("scene.noise must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.pedestrian_frac) {
            return Err(config_err("scene.pedestrian_frac must lie in [0, 1]"));
        }
        if (0..2).any(|i| !(self.area_max[i] > self.area_min[i])) {
            return Err(config_err("scene area must have positive extent"));
        }
        for p in [self.car, self.pedestrian] {
            if p.size.iter().any(|s| !(*s > 0.0)) || !(p.log_sigma >= 0.0) {
                return Err(config_err("class priors need positive sizes and non-negative spread"));
            }
        }
        Ok(())
    }

    fn footprint_inside(&self, roi: &Roi) -> bool {
        roi.bev_corners().iter().all(|c| (0..2).all(|i| c[i] >= self.area_min[i] && c[i] <= self.area_max[i]))
    }
}

fn in_footprint(roi: &Roi, p: Point3) -> bool {
    let q = roi.to_canonical(p);
    q[0].abs() <= roi.size[0] / 2.0 && q[1].abs() <= roi.size[1] / 2.0
}

/// Canonical sample: uniform in the box shrunk by `skin` per face, half of
/// them pushed onto a shrunk side or top face, so that noise rarely
/// carries a point out. A relative 1e-9 inset keeps exact membership
/// through the frame round trip.
fn sample_in_box(size: Point3, skin: f64, rng: &mut impl Rng) -> Point3 {
    let half: Point3 = size.map(|s| (s / 2.0 - skin).max(0.0) * (1.0 - 1e-9));
    let mut q: Point3 = [0, 1, 2].map(|a| rng.random_range(-1.0..1.0) * half[a]);
    if rng.random_bool(0.5) {
        match rng.random_range(0..5) {
            0 => q[0] = half[0],
            1 => q[0] = -half[0],
            2 => q[1] = half[1],
            3 => q[1] = -half[1],
            _ => q[2] = half[2],
        }
    }
    q
}

/// One scene; deterministic in `seed`.
pub fn gen_scene(spec: &SceneSpec, seed: u64) -> Result<Scene> {
    gen_scene_counted(spec, seed).map(|(s, _)| s)
}

/// [`gen_scene`] plus the number of points sampled for each box. Box
/// points come first, box by box, followed by the ground points.
pub fn gen_scene_counted(spec: &SceneSpec, seed: u64) -> Result<(Scene, Vec<usize>)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, spec.noise).map_err(|e| config_err(e.to_string()))?;
    let n_boxes = rng.random_range(spec.boxes_min..=spec.boxes_max);
    let mut boxes: Vec<Roi> = Vec::with_capacity(n_boxes);
    for _ in 0..n_boxes {
        let mut placed = None;
        for _ in 0..MAX_ATTEMPTS {
            let cls = usize::from(rng.random_bool(spec.pedestrian_frac));
            let prior = if cls == 0 { spec.car } else { spec.pedestrian };
            let size = prior.size.map(|s| {
                let z: f64 = StandardNormal.sample(&mut rng);
                s * (prior.log_sigma * z).exp()
            });
            let center = [
                rng.random_range(spec.area_min[0]..spec.area_max[0]),
                rng.random_range(spec.area_min[1]..spec.area_max[1]),
                size[2] / 2.0,
            ];
            let yaw = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
            let roi = Roi::new(center, size, yaw, cls)?;
            if !spec.footprint_inside(&roi) {
                continue;
            }
            let mut clear = true;
            for b in &boxes {
                if bev_iou(&roi, b)? > 0.0 {
                    clear = false;
                    break;
                }
            }
            if clear {
                placed = Some(roi);
                break;
            }
        }
        let roi = placed.ok_or_else(|| config_err(format!("could not place box {} in {MAX_ATTEMPTS} attempts", boxes.len())))?;
        boxes.push(roi);
    }

    let mut points = Vec::new();
    let mut counts = Vec::with_capacity(boxes.len());
    for roi in &boxes {
        let n = rng.random_range(spec.points_min..=spec.points_max);
        counts.push(n);
        for _ in 0..n {
            let p = roi.from_canonical(sample_in_box(roi.size, 2.0 * spec.noise, &mut rng));
            points.push([0, 1, 2].map(|a| p[a] + noise.sample(&mut rng)));
        }
    }
    let mut placed = 0;
    let mut attempts = 0;
    while placed < spec.ground_points {
        attempts += 1;
        if attempts > MAX_ATTEMPTS * spec.ground_points.max(1) {
            return Err(config_err("boxes leave no room for ground points"));
        }
        let p = [
            rng.random_range(spec.area_min[0]..spec.area_max[0]),
            rng.random_range(spec.area_min[1]..spec.area_max[1]),
            noise.sample(&mut rng),
        ];
        if boxes.iter().any(|b| in_footprint(b, p)) {
            continue;
        }
        points.push(p);
        placed += 1;
    }
    Ok((Scene { points, boxes: boxes.iter().map(SceneBox::from).collect() }, counts))
}

/// `count` scenes; scene `i` is seeded from `(seed, i)`.
pub fn gen_scenes(spec: &SceneSpec, seed: u64, count: usize) -> Result<Vec<Scene>> {
    (0..count).into_par_iter().map(|i| gen_scene(spec, mix(seed, i as u64))).collect()
}

pub fn scene_file_name(i: usize) -> String {
    format!("scene_{i:05}.json")
}

pub fn write_scenes(dir: &Path, scenes: &[Scene]) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    scenes
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let path = dir.join(scene_file_name(i));
            s.save(&path)?;
            Ok(path)
        })
        .collect()
}

/// Every `*.json` file in `dir`, in file-name order.
pub fn load_scenes(dir: &Path) -> Result<Vec<Scene>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::Config(format!("scene directory {}: {e}", dir.display())))?;
    let mut paths: Vec<PathBuf> =
        entries.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.extension().is_some_and(|x| x == "json")).collect();
    paths.sort();
    paths.iter().map(|p| Scene::load(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))).collect()
}
