//! wasm-bindgen bindings behind `www/index.html`: synthesize a scene, segment
//! it with iterative PCA, and fit/detect with an adjustable VBR weight.

use mvdet::config::RunConfig;
use mvdet::detect::{BevMap, Detection, MetricsReport};
use mvdet::optimize::{mean_bev_occupancy, FitResult};
use mvdet::pipeline::{detect_scene, evaluate, fit_dataset, segment};
use mvdet::render::render_view;
use mvdet::sis::{mask_iou, MaskStack};
use mvdet::synth::{generate, SynthOutput};
use wasm_bindgen::prelude::*;

fn js(e: mvdet::Error) -> JsError {
    JsError::new(&e.to_string())
}

fn gray_rgba(values: impl Iterator<Item = f64>) -> Vec<u8> {
    values
        .flat_map(|v| {
            let g = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            [g, g, g, 255]
        })
        .collect()
}

#[wasm_bindgen]
pub struct Demo {
    cfg: RunConfig,
    synth: SynthOutput,
    masks: MaskStack,
    fitted: Option<(FitResult, BevMap, Vec<Detection>, MetricsReport)>,
}

#[wasm_bindgen]
impl Demo {
    /// Default configuration except for a shorter fit, which keeps a browser
    /// run to several seconds.
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u64, pedestrians: usize) -> Result<Demo, JsError> {
        let mut cfg = RunConfig::default().with_seed(seed);
        cfg.synth.num_pedestrians = pedestrians;
        cfg.fit.iterations = 300;
        cfg.validate().map_err(js)?;
        let synth = generate(&cfg.synth).map_err(js)?;
        let masks = segment(&synth.dataset, &cfg).map_err(js)?;
        Ok(Demo {
            cfg,
            synth,
            masks,
            fitted: None,
        })
    }

    pub fn views(&self) -> usize {
        self.synth.dataset.num_views()
    }

    pub fn width(&self) -> usize {
        self.cfg.synth.image_width as usize
    }

    pub fn height(&self) -> usize {
        self.cfg.synth.image_height as usize
    }

    pub fn image_rgba(&self, view: usize) -> Vec<u8> {
        self.synth.dataset.images[view]
            .data
            .chunks_exact(3)
            .flat_map(|c| {
                let b = |x: f32| (x.clamp(0.0, 1.0) * 255.0).round() as u8;
                [b(c[0]), b(c[1]), b(c[2]), 255]
            })
            .collect()
    }

    /// Re-runs SIS and returns the IoU against the true pedestrian masks.
    pub fn segment(&mut self, t_pca: usize, semantic_selection: bool) -> Result<f64, JsError> {
        let mut cfg = self.cfg.clone();
        cfg.sis.t_pca = t_pca;
        cfg.sis.semantic_selection = semantic_selection;
        cfg.validate().map_err(js)?;
        self.masks = segment(&self.synth.dataset, &cfg).map_err(js)?;
        self.cfg = cfg;
        Ok(mask_iou(&self.masks, &self.synth.gt_masks))
    }

    pub fn mask_rgba(&self, view: usize) -> Vec<u8> {
        gray_rgba(self.masks.view(view).iter().map(|&m| f64::from(m)))
    }

    /// Fits the volume to the current masks and returns a JSON summary with
    /// metrics, detections and ground truth.
    pub fn fit(&mut self, lambda_vbr: f64, iterations: usize) -> Result<String, JsError> {
        let mut cfg = self.cfg.clone();
        cfg.fit.lambda_vbr = lambda_vbr;
        cfg.fit.iterations = iterations;
        cfg.validate().map_err(js)?;
        let fit = fit_dataset(&self.synth.dataset, &self.masks, &cfg).map_err(js)?;
        let (bev, dets) = detect_scene(&fit.scene, &cfg).map_err(js)?;
        let gt = self.synth.dataset.gt_positions.as_ref().expect("synthetic data has ground truth");
        let metrics = evaluate(&dets, gt, &cfg).map_err(js)?;
        let best = fit.history[fit.best_iteration];
        let gt_points: Vec<[f32; 2]> = gt.data.chunks_exact(2).map(|p| [p[0], p[1]]).collect();
        let summary = serde_json::json!({
            "metrics": metrics,
            "detections": dets,
            "ground_truth": gt_points,
            "best_iteration": best.iteration,
            "loss": {"color": best.l_color, "mask": best.l_mask, "vbr": best.l_vbr, "total": best.total},
            "area": [self.cfg.synth.area[0], self.cfg.synth.area[1]],
        });
        self.cfg = cfg;
        self.fitted = Some((fit, bev, dets, metrics));
        Ok(summary.to_string())
    }

    pub fn bev_width(&self) -> usize {
        self.fitted.as_ref().map_or(0, |f| f.1.grid.dims[0])
    }

    pub fn bev_height(&self) -> usize {
        self.fitted.as_ref().map_or(0, |f| f.1.grid.dims[1])
    }

    /// BEV map with x to the right and y up, one pixel per column.
    pub fn bev_rgba(&self) -> Vec<u8> {
        let Some((_, bev, _, _)) = &self.fitted else { return Vec::new() };
        let [x, y, _] = bev.grid.dims;
        gray_rgba((0..y).rev().flat_map(|iy| (0..x).map(move |ix| (ix, iy))).map(|(ix, iy)| bev.get(ix, iy)))
    }

    /// Rendered opacity of the fitted volume from one camera, at render size.
    pub fn render_rgba(&self, view: usize) -> Result<Vec<u8>, JsError> {
        let Some((fit, _, _, _)) = &self.fitted else { return Ok(Vec::new()) };
        let cam = &self.synth.dataset.calibration.cameras[view];
        let v = render_view(&fit.scene, cam, &self.cfg.render).map_err(js)?;
        Ok(gray_rgba(v.mask.into_iter()))
    }

    /// Mean over BEV cells of the column maximum of the fitted density.
    pub fn occupancy(&self) -> f64 {
        self.fitted.as_ref().map_or(0.0, |f| mean_bev_occupancy(&f.0.scene))
    }

    pub fn render_width(&self) -> usize {
        self.cfg.render.render_width
    }

    pub fn render_height(&self) -> usize {
        self.cfg.render.render_height
    }
}
