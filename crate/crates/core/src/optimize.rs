//! Rendering losses, the vertical BEV regularizer and the Adam fitting loop
//! that turns multi-view pseudo labels into a density/color volume.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::CameraModel;
use crate::render::{RayBundle, RenderConfig, RenderedView, SceneVolume};
use crate::sis::MaskStack;
use crate::tensorio::{write_text, Dataset, Tensor};
use crate::volume::{decode, decode_backward, fuse, lift_features, DecoderMode, DecoderParams, FusedVolume, FusionMode, GridSpec};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub iteration: usize,
    pub l_color: f64,
    pub l_mask: f64,
    pub l_vbr: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub huber_delta: f64,
    pub lambda_vbr: f64,
    pub temperature: f64,
    pub fusion: FusionMode,
    pub decoder: DecoderMode,
    /// Initial density logit (direct) or density bias (linear).
    pub init_logit: f64,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            iterations: 500,
            learning_rate: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            huber_delta: 1.0,
            lambda_vbr: 0.1,
            temperature: 1.0,
            fusion: FusionMode::Softmax,
            decoder: DecoderMode::Direct,
            init_logit: -5.0,
            seed: 0,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        let lr = self.learning_rate;
        let bad = |what: &str| Err(Error::Config(what.to_string()));
        if !(lr > 0.0 && lr.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(self.beta1 > 0.0 && self.beta1 < 1.0) || !(self.beta2 > 0.0 && self.beta2 < 1.0) {
            return bad("adam betas must lie in (0, 1)");
        }
        if !(self.epsilon > 0.0) || !(self.huber_delta > 0.0) || !(self.temperature > 0.0) {
            return bad("epsilon, huber_delta and temperature must be positive");
        }
        if !(self.lambda_vbr >= 0.0) || !self.init_logit.is_finite() {
            return bad("lambda_vbr must be non-negative and init_logit finite");
        }
        Ok(())
    }
}

fn huber(e: f64, delta: f64) -> (f64, f64) {
    if e.abs() <= delta {
        (0.5 * e * e, e)
    } else {
        (delta * (e.abs() - 0.5 * delta), delta * e.signum())
    }
}

/// Mean Huber loss and its gradient with respect to `pred`.
pub fn huber_loss(pred: &[f64], target: &[f64], delta: f64) -> Result<(f64, Vec<f64>)> {
    if pred.len() != target.len() {
        return Err(Error::ShapeMismatch(format!(
            "huber: {} predictions vs {} targets",
            pred.len(),
            target.len()
        )));
    }
    if pred.is_empty() {
        return Ok((0.0, Vec::new()));
    }
    let n = pred.len() as f64;
    let mut loss = 0.0;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(p, t)| {
            let (l, g) = huber(p - t, delta);
            loss += l;
            g / n
        })
        .collect();
    Ok((loss / n, grad))
}

/// Mean over BEV cells of the per-column maximum density, with the
/// subgradient routed to the first maximal voxel of every column.
pub fn vbr_loss(density: &[f64], grid: &GridSpec) -> Result<(f64, Vec<f64>)> {
    if density.len() != grid.num_voxels() {
        return Err(Error::ShapeMismatch("density does not match the grid".into()));
    }
    let z = grid.dims[2];
    let cols = grid.num_columns() as f64;
    let mut grad = vec![0.0; density.len()];
    let mut loss = 0.0;
    for (c, column) in density.chunks_exact(z).enumerate() {
        let mut arg = 0;
        for (k, &d) in column.iter().enumerate() {
            if d > column[arg] {
                arg = k;
            }
        }
        let m = column[arg];
        debug_assert!(m >= 0.0);
        loss += m.abs();
        if m != 0.0 {
            grad[c * z + arg] = m.signum() / cols;
        }
    }
    Ok((loss / cols, grad))
}

/// Pseudo labels for one view: the mask and the image masked by it.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewTargets {
    pub width: usize,
    pub height: usize,
    /// `H x W`.
    pub mask: Vec<f64>,
    /// `3 x H x W`.
    pub color: Vec<f64>,
}

impl ViewTargets {
    /// Area-average downsampling to the render resolution, masks re-binarized at 0.5.
    pub fn resample(&self, width: usize, height: usize) -> Result<ViewTargets> {
        if (width, height) == (self.width, self.height) {
            return Ok(self.clone());
        }
        if width == 0 || height == 0 || !self.width.is_multiple_of(width) || !self.height.is_multiple_of(height) {
            return Err(Error::ShapeMismatch(format!(
                "render size {width}x{height} must divide the target size {}x{}",
                self.width, self.height
            )));
        }
        let (fx, fy) = (self.width / width, self.height / height);
        let area = (fx * fy) as f64;
        let src_n = self.width * self.height;
        let n = width * height;
        let mut mask = vec![0.0; n];
        let mut color = vec![0.0; 3 * n];
        for y in 0..self.height {
            for x in 0..self.width {
                let p = y * self.width + x;
                let q = (y / fy) * width + x / fx;
                mask[q] += self.mask[p] / area;
                for c in 0..3 {
                    color[c * n + q] += self.color[c * src_n + p] / area;
                }
            }
        }
        for m in &mut mask {
            *m = if *m >= 0.5 { 1.0 } else { 0.0 };
        }
        Ok(ViewTargets {
            width,
            height,
            mask,
            color,
        })
    }
}

/// Mask target `M` and color target `I * M` for every view.
pub fn color_mask_targets(masks: &MaskStack, images: &[Tensor]) -> Result<Vec<ViewTargets>> {
    if images.len() != masks.views {
        return Err(Error::ShapeMismatch(format!(
            "{} mask views vs {} images",
            masks.views,
            images.len()
        )));
    }
    let (h, w) = (masks.height, masks.width);
    let n = h * w;
    images
        .iter()
        .enumerate()
        .map(|(v, img)| {
            if img.shape != [h, w, 3] {
                return Err(Error::ShapeMismatch(format!(
                    "view {v}: image {:?} vs mask {h}x{w}",
                    img.shape
                )));
            }
            let m = masks.view(v);
            let mut color = vec![0.0; 3 * n];
            for p in 0..n {
                for c in 0..3 {
                    color[c * n + p] = f64::from(img.data[3 * p + c]) * f64::from(m[p]);
                }
            }
            Ok(ViewTargets {
                width: w,
                height: h,
                mask: m.iter().map(|&x| f64::from(x)).collect(),
                color,
            })
        })
        .collect()
}

/// Gradients of the total loss with respect to the rendered outputs and the
/// decoded density.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGradients {
    /// Per view, `H x W`.
    pub d_mask: Vec<Vec<f64>>,
    /// Per view, `3 x H x W`.
    pub d_color: Vec<Vec<f64>>,
    /// Direct VBR contribution, already scaled by `lambda_vbr`.
    pub d_density: Vec<f64>,
}

/// Mask and color losses are means over all rendered pixels of all views.
pub fn total_loss(
    rendered: &[RenderedView],
    targets: &[ViewTargets],
    scene: &SceneVolume,
    huber_delta: f64,
    lambda_vbr: f64,
) -> Result<(LossReport, LossGradients)> {
    if rendered.len() != targets.len() {
        return Err(Error::ShapeMismatch("one target per rendered view is required".into()));
    }
    for (r, t) in rendered.iter().zip(targets) {
        if (r.width, r.height) != (t.width, t.height) {
            return Err(Error::ShapeMismatch("render and target sizes differ".into()));
        }
    }
    let pred_mask: Vec<f64> = rendered.iter().flat_map(|r| r.mask.iter().copied()).collect();
    let target_mask: Vec<f64> = targets.iter().flat_map(|t| t.mask.iter().copied()).collect();
    let pred_color: Vec<f64> = rendered.iter().flat_map(|r| r.color.iter().copied()).collect();
    let target_color: Vec<f64> = targets.iter().flat_map(|t| t.color.iter().copied()).collect();
    let (l_mask, g_mask) = huber_loss(&pred_mask, &target_mask, huber_delta)?;
    let (l_color, g_color) = huber_loss(&pred_color, &target_color, huber_delta)?;
    let (l_vbr, g_vbr) = vbr_loss(&scene.density, &scene.grid)?;
    let mut d_mask = Vec::new();
    let mut d_color = Vec::new();
    let (mut om, mut oc) = (0, 0);
    for r in rendered {
        d_mask.push(g_mask[om..om + r.mask.len()].to_vec());
        d_color.push(g_color[oc..oc + r.color.len()].to_vec());
        om += r.mask.len();
        oc += r.color.len();
    }
    let report = LossReport {
        iteration: 0,
        l_color,
        l_mask,
        l_vbr,
        total: l_color + l_mask + lambda_vbr * l_vbr,
    };
    Ok((
        report,
        LossGradients {
            d_mask,
            d_color,
            d_density: g_vbr.into_iter().map(|g| lambda_vbr * g).collect(),
        },
    ))
}

/// The full objective for fixed fused features, cameras and pseudo labels.
#[derive(Debug, Clone)]
pub struct Objective {
    pub fused: FusedVolume,
    bundles: Vec<RayBundle>,
    targets: Vec<ViewTargets>,
    huber_delta: f64,
    lambda_vbr: f64,
}

impl Objective {
    pub fn new(
        fused: FusedVolume,
        cameras: &[CameraModel],
        targets: &[ViewTargets],
        render: &RenderConfig,
        huber_delta: f64,
        lambda_vbr: f64,
    ) -> Result<Self> {
        if cameras.len() != targets.len() {
            return Err(Error::ShapeMismatch("one target per camera is required".into()));
        }
        let bundles = cameras
            .iter()
            .map(|cam| RayBundle::new(&fused.grid, cam, render))
            .collect::<Result<Vec<_>>>()?;
        let targets = targets
            .iter()
            .map(|t| t.resample(render.render_width, render.render_height))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            fused,
            bundles,
            targets,
            huber_delta,
            lambda_vbr,
        })
    }

    /// Loss and its gradient with respect to the decoder parameters.
    pub fn evaluate(&self, params: &DecoderParams) -> Result<(LossReport, DecoderParams, SceneVolume)> {
        let scene = decode(&self.fused, params)?;
        let n_pix: usize = self.targets.iter().map(|t| t.mask.len()).sum();
        let (mask_n, color_n) = (n_pix as f64, 3.0 * n_pix as f64);
        let mut d_density = vec![0.0; scene.density.len()];
        let mut d_color = vec![0.0; scene.color.len()];
        let (mut l_mask, mut l_color) = (0.0, 0.0);
        let delta = self.huber_delta;
        for (bundle, t) in self.bundles.iter().zip(&self.targets) {
            let n = t.mask.len();
            bundle.forward_backward(
                &scene,
                |r, alpha, c| {
                    let (l, g) = huber(alpha - t.mask[r], delta);
                    l_mask += l;
                    let mut g_c = [0.0; 3];
                    for k in 0..3 {
                        let (l, g) = huber(c[k] - t.color[k * n + r], delta);
                        l_color += l;
                        g_c[k] = g / color_n;
                    }
                    (g / mask_n, g_c)
                },
                &mut d_density,
                &mut d_color,
            )?;
        }
        let (l_vbr, g_vbr) = vbr_loss(&scene.density, &scene.grid)?;
        for (d, g) in d_density.iter_mut().zip(&g_vbr) {
            *d += self.lambda_vbr * g;
        }
        let (l_mask, l_color) = (l_mask / mask_n, l_color / color_n);
        let report = LossReport {
            iteration: 0,
            l_color,
            l_mask,
            l_vbr,
            total: l_color + l_mask + self.lambda_vbr * l_vbr,
        };
        let grad = decode_backward(&self.fused, params, &scene, &d_density, &d_color);
        Ok((report, grad, scene))
    }
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, x: &mut [f64], g: &[f64], cfg: &FitConfig) {
        self.t += 1;
        let lr = cfg.learning_rate;
        let c1 = 1.0 - cfg.beta1.powi(self.t);
        let c2 = 1.0 - cfg.beta2.powi(self.t);
        for i in 0..x.len() {
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g[i];
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            x[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + cfg.epsilon);
        }
    }
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub scene: SceneVolume,
    pub params: DecoderParams,
    pub history: Vec<LossReport>,
    pub best_iteration: usize,
}

pub fn initial_params(fused: &FusedVolume, cfg: &FitConfig) -> DecoderParams {
    match cfg.decoder {
        DecoderMode::Direct => DecoderParams::direct(&fused.grid, cfg.init_logit, 0.0),
        DecoderMode::Linear => DecoderParams::linear(fused.channels, cfg.init_logit),
    }
}

/// Runs Adam on the objective and returns the volume with the lowest total loss.
pub fn fit_objective(objective: &Objective, cfg: &FitConfig) -> Result<FitResult> {
    cfg.validate()?;
    let mut params = initial_params(&objective.fused, cfg);
    let mut flat = params.as_flat();
    let mut adam = Adam::new(flat.len());
    let mut history = Vec::with_capacity(cfg.iterations + 1);
    let mut best: Option<(f64, usize, DecoderParams, SceneVolume)> = None;
    for it in 0..=cfg.iterations {
        let (mut report, grad, scene) = objective.evaluate(&params)?;
        report.iteration = it;
        if !report.total.is_finite() {
            return Err(Error::Divergence(it));
        }
        history.push(report);
        if best.as_ref().is_none_or(|b| report.total < b.0) {
            best = Some((report.total, it, params.clone(), scene));
        }
        if it == cfg.iterations {
            break;
        }
        let g = grad.as_flat();
        if g.iter().any(|x| !x.is_finite()) {
            return Err(Error::Divergence(it));
        }
        adam.step(&mut flat, &g, cfg);
        if flat.iter().any(|x| !x.is_finite()) {
            return Err(Error::Divergence(it + 1));
        }
        params.set_flat(&flat);
        if it % 100 == 0 {
            log::debug!("iteration {it}: total {:.6}", report.total);
        }
    }
    let (_, best_iteration, params, scene) = best.expect("at least one evaluation");
    Ok(FitResult {
        scene,
        params,
        history,
        best_iteration,
    })
}

/// Lifts and fuses the dataset features onto `grid`.
pub fn fused_volume(dataset: &Dataset, grid: &GridSpec, cfg: &FitConfig) -> Result<FusedVolume> {
    let volumes = dataset
        .calibration
        .cameras
        .iter()
        .zip(&dataset.features)
        .map(|(cam, f)| lift_features(cam, f, grid))
        .collect::<Result<Vec<_>>>()?;
    fuse(&volumes, cfg.fusion, cfg.temperature, cfg.seed)
}

/// Fits a scene volume to the dataset images under the given pseudo-label masks.
pub fn fit(dataset: &Dataset, masks: &MaskStack, grid: &GridSpec, render: &RenderConfig, cfg: &FitConfig) -> Result<FitResult> {
    cfg.validate()?;
    dataset.calibration.require_multiview()?;
    let fused = fused_volume(dataset, grid, cfg)?;
    let targets = color_mask_targets(masks, &dataset.images)?;
    let objective = Objective::new(fused, &dataset.calibration.cameras, &targets, render, cfg.huber_delta, cfg.lambda_vbr)?;
    fit_objective(&objective, cfg)
}

pub fn loss_history_csv(history: &[LossReport]) -> String {
    let mut out = String::from("iteration,l_color,l_mask,l_vbr,total\n");
    for r in history {
        let _ = writeln!(out, "{},{},{},{},{}", r.iteration, r.l_color, r.l_mask, r.l_vbr, r.total);
    }
    out
}

pub fn write_loss_history(path: impl AsRef<Path>, history: &[LossReport]) -> Result<()> {
    write_text(path.as_ref(), &loss_history_csv(history))
}

/// Mean over BEV cells of the column maximum.
pub fn mean_bev_occupancy(scene: &SceneVolume) -> f64 {
    vbr_loss(&scene.density, &scene.grid).map(|(l, _)| l).unwrap_or(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Matrix3;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use crate::geometry::WorldPoint;

    #[test]
    fn huber_examples() {
        let (l, g) = huber_loss(&[0.3, 0.7], &[0.3, 0.7], 1.0).unwrap();
        assert_eq!(l, 0.0);
        assert_eq!(g, vec![0.0, 0.0]);
        let (l, _) = huber_loss(&[1.5], &[0.0], 1.5).unwrap();
        assert!((l - 0.5 * 1.5 * 1.5).abs() < 1e-15);
        let (l, g) = huber_loss(&[2.0], &[0.0], 1.0).unwrap();
        assert_eq!((l, g[0]), (1.5, 1.0));
        assert!(huber_loss(&[1.0], &[1.0, 2.0], 1.0).is_err());
    }

    #[test]
    fn huber_gradient_is_continuous_at_delta() {
        let d = 0.7;
        let (_, left) = huber(d - 1e-12, d);
        let (_, right) = huber(d + 1e-12, d);
        assert!((left - right).abs() < 1e-9);
        let (_, left) = huber(-d - 1e-12, d);
        let (_, right) = huber(-d + 1e-12, d);
        assert!((left - right).abs() < 1e-9);
    }

    #[test]
    fn vbr_examples() {
        let g = GridSpec::new([0.0; 3], 1.0, [2, 2, 3]).unwrap();
        let (l, grad) = vbr_loss(&[0.0; 12], &g).unwrap();
        assert_eq!(l, 0.0);
        assert!(grad.iter().all(|&x| x == 0.0));
        let mut d = vec![0.0; 12];
        d[g.index(1, 0, 2)] = 1.0;
        assert_eq!(vbr_loss(&d, &g).unwrap().0, 0.25);
        let (l, grad) = vbr_loss(&[0.3; 12], &g).unwrap();
        assert!((l - 0.3).abs() < 1e-15);
        for ix in 0..2 {
            for iy in 0..2 {
                assert_eq!(grad[g.index(ix, iy, 0)], 0.25);
                assert_eq!(grad[g.index(ix, iy, 1)], 0.0);
            }
        }
    }

    proptest! {
        #[test]
        fn vbr_matches_column_loop(seed in 0u64..1000, x in 1usize..5, y in 1usize..5, z in 1usize..5) {
            let g = GridSpec::new([0.0; 3], 1.0, [x, y, z]).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d: Vec<f64> = (0..g.num_voxels()).map(|_| rng.random()).collect();
            let mut sum = 0.0;
            for ix in 0..x {
                for iy in 0..y {
                    let mut m = f64::NEG_INFINITY;
                    for iz in 0..z {
                        m = m.max(d[g.index(ix, iy, iz)]);
                    }
                    sum += m;
                }
            }
            let (l, _) = vbr_loss(&d, &g).unwrap();
            prop_assert!((l - sum / (x * y) as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn targets_mask_the_image() {
        let img = Tensor::new(vec![2, 2, 3], (0..12).map(|i| i as f32 / 12.0).collect()).unwrap();
        let ones = MaskStack::new(1, 2, 2, vec![1.0; 4]).unwrap();
        let t = &color_mask_targets(&ones, std::slice::from_ref(&img)).unwrap()[0];
        for p in 0..4 {
            for c in 0..3 {
                assert_eq!(t.color[c * 4 + p], f64::from(img.data[3 * p + c]));
            }
        }
        let zeros = MaskStack::new(1, 2, 2, vec![0.0; 4]).unwrap();
        let t = &color_mask_targets(&zeros, std::slice::from_ref(&img)).unwrap()[0];
        assert!(t.color.iter().all(|&x| x == 0.0));
        let checker = MaskStack::new(1, 2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let t = &color_mask_targets(&checker, std::slice::from_ref(&img)).unwrap()[0];
        for c in 0..3 {
            assert_eq!(t.color[c * 4 + 1], 0.0);
            assert_eq!(t.color[c * 4 + 2], 0.0);
            assert_eq!(t.color[c * 4 + 3], f64::from(img.data[9 + c]));
        }
        assert!(color_mask_targets(&ones, &[img.clone(), img]).is_err());
    }

    #[test]
    fn resample_area_averages_and_rebinarizes() {
        let t = ViewTargets {
            width: 4,
            height: 2,
            mask: vec![1.0, 1.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0],
            color: (0..24).map(|i| i as f64).collect(),
        };
        let r = t.resample(2, 1).unwrap();
        assert_eq!(r.mask, vec![1.0, 0.0]);
        // channel 0 block (0,1,4,5)
        assert_eq!(r.color[0], 2.5);
        assert_eq!(r.color[1], 4.5);
        assert!(t.resample(3, 1).is_err());
    }

    fn corner_cameras(size: u32) -> Vec<CameraModel> {
        let f = size as f64;
        let c = size as f64 / 2.0;
        let k = Matrix3::new(f, 0.0, c, 0.0, f, c, 0.0, 0.0, 1.0);
        vec![
            CameraModel::look_at(k, WorldPoint::new(-3.0, -2.0, 3.0), WorldPoint::new(2.0, 2.0, 1.0), size, size, 0).unwrap(),
            CameraModel::look_at(k, WorldPoint::new(7.0, -1.0, 2.5), WorldPoint::new(2.0, 2.0, 1.0), size, size, 1).unwrap(),
        ]
    }

    fn covered(grid: GridSpec, channels: usize) -> FusedVolume {
        let n = grid.num_voxels();
        FusedVolume {
            grid,
            channels,
            values: (0..n * channels).map(|i| ((i * 7919) % 13) as f64 / 13.0 - 0.5).collect(),
            coverage: vec![2; n],
        }
    }

    fn random_targets(views: usize, w: usize, h: usize, rng: &mut ChaCha8Rng) -> Vec<ViewTargets> {
        (0..views)
            .map(|_| ViewTargets {
                width: w,
                height: h,
                mask: (0..w * h).map(|_| if rng.random::<f64>() < 0.3 { 1.0 } else { 0.0 }).collect(),
                color: (0..3 * w * h).map(|_| rng.random()).collect(),
            })
            .collect()
    }

    fn fd_check(params: &DecoderParams, obj: &Objective) -> f64 {
        let (_, grad, _) = obj.evaluate(params).unwrap();
        let g = grad.as_flat();
        let x0 = params.as_flat();
        let h = 1e-3;
        let mut p = params.clone();
        let mut worst: f64 = 0.0;
        let scale = g.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        for i in 0..x0.len() {
            let mut x = x0.clone();
            x[i] = x0[i] + h;
            p.set_flat(&x);
            let up = obj.evaluate(&p).unwrap().0.total;
            x[i] = x0[i] - h;
            p.set_flat(&x);
            let down = obj.evaluate(&p).unwrap().0.total;
            let fd = (up - down) / (2.0 * h);
            worst = worst.max((fd - g[i]).abs() / scale);
        }
        worst
    }

    #[test]
    fn full_objective_matches_finite_differences() {
        let grid = GridSpec::new([0.0; 3], 1.0, [4, 4, 4]).unwrap();
        let cams = corner_cameras(8);
        let render = RenderConfig {
            samples_per_ray: 16,
            render_width: 8,
            render_height: 8,
            chunk_size: 16,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let targets = random_targets(2, 8, 8, &mut rng);
        let obj = Objective::new(covered(grid, 3), &cams, &targets, &render, 1.0, 1.0).unwrap();
        let mut params = DecoderParams::direct(&grid, 0.0, 0.0);
        params.set_flat(&(0..4 * 64).map(|_| rng.random_range(-2.0..1.0)).collect::<Vec<_>>());
        let err = fd_check(&params, &obj);
        assert!(err < 1e-3, "direct: {err}");

        let mut params = DecoderParams::linear(3, -1.0);
        params.set_flat(&(0..16).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>());
        let err = fd_check(&params, &obj);
        assert!(err < 1e-3, "linear: {err}");
    }

    #[test]
    fn evaluate_agrees_with_total_loss() {
        let grid = GridSpec::new([0.0; 3], 1.0, [4, 4, 4]).unwrap();
        let cams = corner_cameras(8);
        let render = RenderConfig {
            samples_per_ray: 16,
            render_width: 8,
            render_height: 8,
            chunk_size: 16,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let targets = random_targets(2, 8, 8, &mut rng);
        let obj = Objective::new(covered(grid, 3), &cams, &targets, &render, 1.0, 0.5).unwrap();
        let mut params = DecoderParams::direct(&grid, 0.0, 0.0);
        params.set_flat(&(0..4 * 64).map(|_| rng.random_range(-2.0..1.0)).collect::<Vec<_>>());
        let (fast, grad, scene) = obj.evaluate(&params).unwrap();
        let rendered: Vec<_> = cams.iter().map(|c| crate::render::render_view(&scene, c, &render).unwrap()).collect();
        let (slow, g) = total_loss(&rendered, &targets, &scene, 1.0, 0.5).unwrap();
        for (a, b) in [(fast.l_mask, slow.l_mask), (fast.l_color, slow.l_color), (fast.l_vbr, slow.l_vbr), (fast.total, slow.total)] {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        assert!((slow.total - (slow.l_color + slow.l_mask + 0.5 * slow.l_vbr)).abs() < 1e-9);
        let mut dd = g.d_density.clone();
        let mut dc = vec![0.0; scene.color.len()];
        for (v, c) in cams.iter().enumerate() {
            let (a, b) = crate::render::render_backward(&scene, c, &render, &g.d_mask[v], &g.d_color[v]).unwrap();
            dd.iter_mut().zip(a).for_each(|(x, y)| *x += y);
            dc.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        let slow_grad = decode_backward(&obj.fused, &params, &scene, &dd, &dc).as_flat();
        for (a, b) in grad.as_flat().iter().zip(&slow_grad) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn perfect_render_of_empty_targets_has_zero_loss() {
        let grid = GridSpec::new([0.0; 3], 1.0, [4, 4, 4]).unwrap();
        let scene = SceneVolume::empty(grid);
        let rendered = vec![RenderedView {
            width: 2,
            height: 2,
            mask: vec![0.0; 4],
            color: vec![0.0; 12],
        }];
        let targets = vec![ViewTargets {
            width: 2,
            height: 2,
            mask: vec![0.0; 4],
            color: vec![0.0; 12],
        }];
        let (r, _) = total_loss(&rendered, &targets, &scene, 1.0, 1.0).unwrap();
        assert_eq!(r.total, 0.0);
        let rendered = vec![RenderedView {
            mask: vec![0.5; 4],
            ..rendered[0].clone()
        }];
        let (r, _) = total_loss(&rendered, &targets, &scene, 1.0, 0.0).unwrap();
        assert_eq!(r.total, r.l_color + r.l_mask);
    }

    fn small_objective(targets_on: bool, lambda: f64) -> Objective {
        let grid = GridSpec::new([0.0, 0.0, 0.0], 0.5, [8, 8, 4]).unwrap();
        let cams = corner_cameras(16);
        let render = RenderConfig {
            samples_per_ray: 24,
            render_width: 16,
            render_height: 16,
            chunk_size: 64,
        };
        // a 1 x 1 x 2 m block standing at (2, 2)
        let block = GridSpec::new([1.5, 1.5, 0.0], 0.5, [2, 2, 4]).unwrap();
        let targets: Vec<_> = cams
            .iter()
            .map(|cam| {
                let mut mask = vec![0.0; 256];
                if targets_on {
                    for (p, m) in mask.iter_mut().enumerate() {
                        let (o, d) = cam.ray_through_pixel((p % 16) as f64 + 0.5, (p / 16) as f64 + 0.5);
                        if crate::render::ray_box_intersect(&o, &d, &block).is_some() {
                            *m = 1.0;
                        }
                    }
                }
                let color = mask.iter().chain(&mask).chain(&mask).map(|m| 0.8 * m).collect();
                ViewTargets {
                    width: 16,
                    height: 16,
                    mask,
                    color,
                }
            })
            .collect();
        Objective::new(covered(grid, 3), &cams, &targets, &render, 1.0, lambda).unwrap()
    }

    #[test]
    fn zero_targets_drive_density_down() {
        let obj = small_objective(false, 1.0);
        let cfg = FitConfig {
            iterations: 200,
            init_logit: 0.0,
            ..FitConfig::default()
        };
        let res = fit_objective(&obj, &cfg).unwrap();
        let max = res.scene.density.iter().fold(0.0f64, |m, &x| m.max(x));
        assert!(max < 0.05, "max density {max}");
    }

    #[test]
    fn fit_reduces_mask_loss_deterministically() {
        let obj = small_objective(true, 0.0);
        let cfg = FitConfig {
            iterations: 150,
            ..FitConfig::default()
        };
        let a = fit_objective(&obj, &cfg).unwrap();
        let first = a.history[0].l_mask;
        let last = a.history.last().unwrap().l_mask;
        assert!(last < 0.1 * first, "{first} -> {last}");
        let mut running = f64::INFINITY;
        for r in &a.history {
            let next = running.min(r.total);
            assert!(next <= running);
            running = next;
        }
        assert_eq!(a.best_iteration, a.history.iter().enumerate().min_by(|x, y| x.1.total.total_cmp(&y.1.total)).unwrap().0);
        let b = fit_objective(&obj, &cfg).unwrap();
        assert_eq!(loss_history_csv(&a.history), loss_history_csv(&b.history));
    }

    #[test]
    fn fit_on_two_camera_one_pedestrian_scene() {
        let synth = crate::synth::SynthConfig {
            num_cameras: 2,
            num_pedestrians: 1,
            image_width: 32,
            image_height: 32,
            seed: 3,
            ..Default::default()
        };
        let out = crate::synth::generate(&synth).unwrap();
        let grid = GridSpec::covering(&out.dataset.calibration.area, 0.25, 2.0).unwrap();
        let render = RenderConfig {
            samples_per_ray: 48,
            render_width: 32,
            render_height: 32,
            chunk_size: 256,
        };
        let cfg = FitConfig {
            iterations: 200,
            ..FitConfig::default()
        };
        let a = fit(&out.dataset, &out.gt_masks, &grid, &render, &cfg).unwrap();
        let first = a.history[0].l_mask;
        let last = a.history.last().unwrap().l_mask;
        assert!(last < 0.1 * first, "{first} -> {last}");
        let b = fit(&out.dataset, &out.gt_masks, &grid, &render, &cfg).unwrap();
        assert_eq!(loss_history_csv(&a.history), loss_history_csv(&b.history));
    }

    #[test]
    fn vbr_lowers_bev_occupancy() {
        let cfg = FitConfig {
            iterations: 100,
            ..FitConfig::default()
        };
        let with = fit_objective(&small_objective(true, 1.0), &cfg).unwrap();
        let without = fit_objective(&small_objective(true, 0.0), &cfg).unwrap();
        assert!(mean_bev_occupancy(&with.scene) < mean_bev_occupancy(&without.scene));
    }

    #[test]
    fn divergence_is_reported() {
        let obj = small_objective(true, 1.0);
        let cfg = FitConfig {
            iterations: 10,
            learning_rate: 1e308,
            ..FitConfig::default()
        };
        assert!(matches!(fit_objective(&obj, &cfg), Err(Error::Divergence(_))));
        let bad = FitConfig {
            beta1: 1.0,
            ..FitConfig::default()
        };
        assert!(matches!(fit_objective(&obj, &bad), Err(Error::Config(_))));
    }

    #[test]
    fn csv_has_header_and_rows() {
        let h = vec![LossReport {
            iteration: 0,
            l_color: 0.5,
            l_mask: 0.25,
            l_vbr: 0.125,
            total: 0.875,
        }];
        assert_eq!(loss_history_csv(&h), "iteration,l_color,l_mask,l_vbr,total\n0,0.5,0.25,0.125,0.875\n");
    }
}
