//! Synthetic calibrated multi-camera scenes: ellipsoid pedestrians on a
//! checkered ground plane, a colored distractor box, ring cameras, and every
//! input the pipeline ingests (images, features, semantic maps, ground truth).

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::{DMatrix, Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraModel, WorldPoint};
use crate::render::ray_aabb;
use crate::sis::MaskStack;
use crate::tensorio::{write_tensor, Area, CalibrationSet, Dataset, DatasetLayout, Tensor};

const PLACEMENT_ATTEMPTS: usize = 1000;
const SKY: [f64; 3] = [0.75, 0.85, 0.95];
const DISTRACTOR_COLOR: [f64; 3] = [0.95, 0.55, 0.1];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub num_cameras: usize,
    pub num_pedestrians: usize,
    /// Area extent along x and y, meters; the area starts at the origin.
    pub area: [f64; 2],
    pub pedestrian_radius: f64,
    pub pedestrian_height: f64,
    /// Minimum distance between pedestrian centers.
    pub min_separation: f64,
    pub image_width: u32,
    pub image_height: u32,
    /// Image pixels per feature pixel along each axis.
    pub feature_stride: u32,
    pub feature_dim: usize,
    /// Length of the class embedding part of each feature.
    pub class_scale: f64,
    pub noise_sigma: f64,
    pub camera_height: f64,
    /// Horizontal field of view, degrees.
    pub fov_deg: f64,
    /// Extra ring radius beyond the area's half diagonal.
    pub ring_margin: f64,
    pub distractor: bool,
    /// Pixels a pedestrian needs in a view to count as visible there.
    pub min_visible_pixels: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_cameras: 4,
            num_pedestrians: 5,
            area: [8.0, 8.0],
            pedestrian_radius: 0.3,
            pedestrian_height: 1.7,
            min_separation: 1.0,
            image_width: 64,
            image_height: 64,
            feature_stride: 1,
            feature_dim: 16,
            class_scale: 4.0,
            noise_sigma: 0.05,
            camera_height: 2.5,
            fov_deg: 90.0,
            ring_margin: 1.0,
            distractor: true,
            min_visible_pixels: 4,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_cameras < 2 {
            return bad(format!("need at least 2 cameras, got {}", self.num_cameras));
        }
        if !(self.area[0] > 0.0 && self.area[1] > 0.0) {
            return bad("area extents must be positive".into());
        }
        if !(self.pedestrian_radius > 0.0 && self.pedestrian_height > 0.0 && self.min_separation >= 2.0 * self.pedestrian_radius) {
            return bad("pedestrians need positive size and a separation of at least one diameter".into());
        }
        if self.image_width == 0 || self.image_height == 0 || self.feature_stride == 0 {
            return bad("image size and feature stride must be positive".into());
        }
        if !self.image_width.is_multiple_of(self.feature_stride) || !self.image_height.is_multiple_of(self.feature_stride) {
            return bad("feature stride must divide the image size".into());
        }
        if self.feature_dim < 6 {
            return bad("feature_dim must be at least 6 (3 color + 3 class channels)".into());
        }
        if !(self.class_scale > 0.0) || !(self.noise_sigma >= 0.0) || !(self.fov_deg > 0.0 && self.fov_deg < 180.0) || !(self.camera_height > 0.0) {
            return bad("noise, field of view or camera height out of range".into());
        }
        Ok(())
    }

    fn area(&self) -> Area {
        Area {
            xmin: 0.0,
            ymin: 0.0,
            xmax: self.area[0],
            ymax: self.area[1],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pedestrian {
    pub x: f64,
    pub y: f64,
    pub color: [f64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Surface {
    Sky,
    Ground,
    Pedestrian(usize),
    Distractor,
}

impl Surface {
    fn class(self) -> usize {
        match self {
            Surface::Sky | Surface::Ground => 0,
            Surface::Pedestrian(_) => 1,
            Surface::Distractor => 2,
        }
    }
}

/// Analytic scene description.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthScene {
    pub pedestrians: Vec<Pedestrian>,
    pub radius: f64,
    pub height: f64,
    /// Min and max corners.
    pub distractor: Option<([f64; 3], [f64; 3])>,
}

fn distractor_box(cfg: &SynthConfig) -> Option<([f64; 3], [f64; 3])> {
    let cx = cfg.area[0] / 2.0;
    cfg.distractor.then_some(([cx - 1.5, -2.0, 0.0], [cx + 1.5, -1.0, 2.0]))
}

impl SynthScene {
    fn ellipsoid_hit(&self, p: &Pedestrian, o: &WorldPoint, d: &Vector3<f64>) -> Option<f64> {
        let axes = Vector3::new(self.radius, self.radius, self.height / 2.0);
        let oc = (o.coords - Vector3::new(p.x, p.y, self.height / 2.0)).component_div(&axes);
        let ds = d.component_div(&axes);
        let a = ds.dot(&ds);
        let b = oc.dot(&ds);
        let c = oc.dot(&oc) - 1.0;
        let disc = b * b - a * c;
        if disc < 0.0 {
            return None;
        }
        let sq = disc.sqrt();
        [(-b - sq) / a, (-b + sq) / a].into_iter().find(|&t| t > 1e-9)
    }

    /// Nearest surface along a ray.
    pub fn trace(&self, o: &WorldPoint, d: &Vector3<f64>) -> (Surface, WorldPoint) {
        let mut best = (f64::INFINITY, Surface::Sky);
        if d.z < 0.0 {
            best = (-o.z / d.z, Surface::Ground);
        }
        for (i, p) in self.pedestrians.iter().enumerate() {
            if let Some(t) = self.ellipsoid_hit(p, o, d) {
                if t < best.0 {
                    best = (t, Surface::Pedestrian(i));
                }
            }
        }
        if let Some((lo, hi)) = self.distractor {
            if let Some((t0, _)) = ray_aabb(o, d, lo, hi) {
                if t0 > 1e-9 && t0 < best.0 {
                    best = (t0, Surface::Distractor);
                }
            }
        }
        let hit = if best.0.is_finite() { o + d * best.0 } else { *o };
        (best.1, hit)
    }

    fn color(&self, s: Surface, hit: &WorldPoint) -> [f64; 3] {
        match s {
            Surface::Sky => SKY,
            Surface::Ground => {
                let cell = hit.x.floor() as i64 + hit.y.floor() as i64;
                let g = if cell.rem_euclid(2) == 0 { 0.45 } else { 0.55 };
                [g; 3]
            }
            Surface::Pedestrian(i) => self.pedestrians[i].color,
            Surface::Distractor => DISTRACTOR_COLOR,
        }
    }

    /// Per-pixel surfaces of one view, sampled at pixel centers of a
    /// `w x h` raster over the camera image.
    fn surfaces(&self, cam: &CameraModel, w: usize, h: usize) -> Vec<(Surface, WorldPoint)> {
        let su = f64::from(cam.width) / w as f64;
        let sv = f64::from(cam.height) / h as f64;
        let mut out = Vec::with_capacity(w * h);
        for j in 0..h {
            for i in 0..w {
                let (o, d) = cam.ray_through_pixel((i as f64 + 0.5) * su, (j as f64 + 0.5) * sv);
                out.push(self.trace(&o, &d));
            }
        }
        out
    }

    /// Binary pedestrian masks at camera resolution.
    pub fn pedestrian_masks(&self, cameras: &[CameraModel]) -> Result<MaskStack> {
        let (w, h) = (cameras[0].width as usize, cameras[0].height as usize);
        let mut data = Vec::with_capacity(cameras.len() * w * h);
        for cam in cameras {
            if (cam.width as usize, cam.height as usize) != (w, h) {
                return Err(Error::ShapeMismatch("cameras must share one resolution".into()));
            }
            data.extend(
                self.surfaces(cam, w, h)
                    .into_iter()
                    .map(|(s, _)| if matches!(s, Surface::Pedestrian(_)) { 1.0 } else { 0.0 }),
            );
        }
        MaskStack::new(cameras.len(), h, w, data)
    }
}

/// Ring cameras around the area, looking at its center on the ground.
pub fn ring_cameras(cfg: &SynthConfig) -> Result<Vec<CameraModel>> {
    let (w, h) = (cfg.image_width, cfg.image_height);
    let f = f64::from(w) / 2.0 / (cfg.fov_deg.to_radians() / 2.0).tan();
    let k = Matrix3::new(f, 0.0, f64::from(w) / 2.0, 0.0, f, f64::from(h) / 2.0, 0.0, 0.0, 1.0);
    let (cx, cy) = (cfg.area[0] / 2.0, cfg.area[1] / 2.0);
    let radius = cx.hypot(cy) + cfg.ring_margin;
    (0..cfg.num_cameras)
        .map(|n| {
            let a = PI / 4.0 + 2.0 * PI * n as f64 / cfg.num_cameras as f64;
            let eye = WorldPoint::new(cx + radius * a.cos(), cy + radius * a.sin(), cfg.camera_height);
            CameraModel::look_at(k, eye, WorldPoint::new(cx, cy, 0.0), w, h, n as i64)
        })
        .collect()
}

/// Orthonormal class embeddings, one row per class.
fn class_embeddings(dim: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let g = DMatrix::from_fn(dim, 3, |_, _| StandardNormal.sample(rng));
    let q = g.qr().q();
    (0..3).map(|c| q.column(c).iter().copied().collect()).collect()
}

fn pedestrian_color(k: usize, n: usize, offset: f64) -> [f64; 3] {
    // hue wheel at saturation 0.8, value 0.85
    let hue = (offset + k as f64 / n.max(1) as f64).fract() * 6.0;
    let (v, s) = (0.85, 0.8);
    let c = v * s;
    let x = c * (1.0 - (hue % 2.0 - 1.0).abs());
    let (r, g, b) = match hue as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

fn place_pedestrians(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<(f64, f64)> {
    let margin = cfg.pedestrian_radius + 0.2;
    let mut out: Vec<(f64, f64)> = Vec::new();
    let mut tries = 0;
    while out.len() < cfg.num_pedestrians && tries < 20 * cfg.num_pedestrians {
        tries += 1;
        let p = (
            rng.random_range(margin..(cfg.area[0] - margin).max(margin + 1e-9)),
            rng.random_range(margin..(cfg.area[1] - margin).max(margin + 1e-9)),
        );
        if out.iter().all(|q| (p.0 - q.0).hypot(p.1 - q.1) >= cfg.min_separation) {
            out.push(p);
        }
    }
    out
}

/// Pixel counts of every pedestrian in every view.
fn visibility(scene: &SynthScene, cameras: &[CameraModel]) -> Vec<Vec<usize>> {
    cameras
        .iter()
        .map(|cam| {
            let mut counts = vec![0; scene.pedestrians.len()];
            for (s, _) in scene.surfaces(cam, cam.width as usize, cam.height as usize) {
                if let Surface::Pedestrian(i) = s {
                    counts[i] += 1;
                }
            }
            counts
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub dataset: Dataset,
    pub scene: SynthScene,
    pub gt_masks: MaskStack,
}

impl SynthOutput {
    pub fn save(&self, root: impl AsRef<Path>) -> Result<()> {
        self.dataset.save(root.as_ref())?;
        let layout = DatasetLayout::new(root.as_ref());
        for n in 0..self.gt_masks.views {
            write_tensor(layout.gt_mask(n), &self.gt_masks.view_tensor(n))?;
        }
        Ok(())
    }
}

/// Samples a scene where every pedestrian is visible in at least two views.
pub fn sample_scene(cfg: &SynthConfig, cameras: &[CameraModel], rng: &mut ChaCha8Rng) -> Result<SynthScene> {
    let offset: f64 = rng.random();
    for attempt in 0..PLACEMENT_ATTEMPTS {
        let spots = place_pedestrians(cfg, rng);
        if spots.len() < cfg.num_pedestrians {
            continue;
        }
        let scene = SynthScene {
            pedestrians: spots
                .iter()
                .enumerate()
                .map(|(k, &(x, y))| Pedestrian {
                    x,
                    y,
                    color: pedestrian_color(k, cfg.num_pedestrians, offset),
                })
                .collect(),
            radius: cfg.pedestrian_radius,
            height: cfg.pedestrian_height,
            distractor: distractor_box(cfg),
        };
        let vis = visibility(&scene, cameras);
        let ok = (0..cfg.num_pedestrians).all(|i| vis.iter().filter(|v| v[i] >= cfg.min_visible_pixels).count() >= 2);
        if ok {
            log::debug!("pedestrian placement accepted after {} attempts", attempt + 1);
            return Ok(scene);
        }
    }
    Err(Error::Placement(PLACEMENT_ATTEMPTS))
}

/// Renders images, features and semantic maps of `scene` for `cameras`.
pub fn render_dataset(cfg: &SynthConfig, scene: &SynthScene, cameras: Vec<CameraModel>, rng: &mut ChaCha8Rng) -> Result<SynthOutput> {
    let (w, h) = (cfg.image_width as usize, cfg.image_height as usize);
    let s = cfg.feature_stride as usize;
    let (fw, fh) = (w / s, h / s);
    let embed = class_embeddings(cfg.feature_dim - 3, rng);
    let noise = Normal::new(0.0, cfg.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
    let mut images = Vec::new();
    let mut features = Vec::new();
    let mut semantic = Vec::new();
    for cam in &cameras {
        let img: Vec<f32> = scene
            .surfaces(cam, w, h)
            .iter()
            .flat_map(|(s, p)| scene.color(*s, p))
            .map(|x| x as f32)
            .collect();
        images.push(Tensor::new(vec![h, w, 3], img)?);
        let mut feat = Vec::with_capacity(fh * fw * cfg.feature_dim);
        let mut sem = Vec::with_capacity(fh * fw);
        for (surf, p) in scene.surfaces(cam, fw, fh) {
            let base = scene.color(surf, &p);
            let class = embed[surf.class()].iter().map(|e| e * cfg.class_scale);
            for v in base.into_iter().chain(class) {
                feat.push((v + noise.sample(rng)) as f32);
            }
            let target = if surf.class() == 1 { 0.9 } else { 0.1 };
            sem.push((target + noise.sample(rng)).clamp(-1.0, 1.0) as f32);
        }
        features.push(Tensor::new(vec![fh, fw, cfg.feature_dim], feat)?);
        semantic.push(Tensor::new(vec![fh, fw], sem)?);
    }
    let gt: Vec<f32> = scene.pedestrians.iter().flat_map(|p| [p.x as f32, p.y as f32]).collect();
    let gt_masks = scene.pedestrian_masks(&cameras)?;
    let dataset = Dataset {
        calibration: CalibrationSet {
            area: cfg.area(),
            cameras,
        },
        features,
        semantic,
        images,
        gt_positions: Some(Tensor::new(vec![scene.pedestrians.len(), 2], gt)?),
    };
    dataset.validate()?;
    Ok(SynthOutput {
        dataset,
        scene: scene.clone(),
        gt_masks,
    })
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthOutput> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let cameras = ring_cameras(cfg)?;
    let scene = sample_scene(cfg, &cameras, &mut rng)?;
    render_dataset(cfg, &scene, cameras, &mut rng)
}

/// Exact pedestrian masks of a generated dataset, rebuilt from its ground
/// truth positions and the generator settings.
pub fn ideal_masks(cfg: &SynthConfig, dataset: &Dataset) -> Result<MaskStack> {
    let gt = dataset
        .gt_positions
        .as_ref()
        .ok_or_else(|| Error::MissingInput("gt_positions.vpt".into()))?;
    let scene = SynthScene {
        pedestrians: gt
            .data
            .chunks_exact(2)
            .map(|p| Pedestrian {
                x: f64::from(p[0]),
                y: f64::from(p[1]),
                color: [0.0; 3],
            })
            .collect(),
        radius: cfg.pedestrian_radius,
        height: cfg.pedestrian_height,
        distractor: distractor_box(cfg),
    };
    scene.pedestrian_masks(&dataset.calibration.cameras)
}
