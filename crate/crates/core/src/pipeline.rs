//! Pipeline stages over the on-disk dataset layout. Every command reads its
//! inputs from the dataset directory, writes its outputs next to them, and
//! records the effective configuration in `effective_config.json`.

use std::fmt::Write as _;
use std::path::Path;

use crate::config::{MaskSource, RunConfig};
use crate::detect::{bev_project, extract_peaks, gt_points, match_and_score, read_detections, write_detections, write_metrics, BevMap, Detection, MetricsReport};
use crate::error::{Error, Result};
use crate::optimize::{fit, mean_bev_occupancy, write_loss_history, FitResult};
use crate::render::{render_view, SceneVolume};
use crate::sis::{sis_segment, FeatureStack, MaskStack, SemanticMap};
use crate::synth::{generate, SynthOutput};
use crate::tensorio::{read_calibration, read_tensor, write_image_pgm, write_image_ppm, write_tensor, Dataset, DatasetLayout};
use crate::volume::{DecoderMode, FusionMode, GridSpec};

fn save_config(layout: &DatasetLayout, cfg: &RunConfig) -> Result<()> {
    cfg.save(layout.effective_config())
}

pub fn cmd_synth(cfg: &RunConfig, out_dir: &Path) -> Result<SynthOutput> {
    cfg.validate()?;
    let out = generate(&cfg.synth)?;
    out.save(out_dir)?;
    save_config(&DatasetLayout::new(out_dir), cfg)?;
    Ok(out)
}

pub fn segment(dataset: &Dataset, cfg: &RunConfig) -> Result<MaskStack> {
    let stack = FeatureStack::from_tensors(&dataset.features)?;
    let semantic = SemanticMap::from_tensors(&dataset.semantic)?;
    let cam = &dataset.calibration.cameras[0];
    sis_segment(&stack, Some(&semantic), &cfg.sis, cam.height as usize, cam.width as usize)
}

pub fn cmd_segment(dir: &Path, cfg: &RunConfig) -> Result<MaskStack> {
    cfg.validate()?;
    let dataset = Dataset::load(dir)?;
    let masks = segment(&dataset, cfg)?;
    let layout = DatasetLayout::new(dir);
    for n in 0..masks.views {
        write_tensor(layout.mask(n), &masks.view_tensor(n))?;
        write_image_pgm(layout.mask_preview(n), masks.width, masks.height, masks.view(n))?;
    }
    save_config(&layout, cfg)?;
    Ok(masks)
}

fn read_masks(dir: &Path, views: usize, source: MaskSource) -> Result<MaskStack> {
    let layout = DatasetLayout::new(dir);
    let tensors = (0..views)
        .map(|n| {
            read_tensor(match source {
                MaskSource::Segmented => layout.mask(n),
                MaskSource::GroundTruth => layout.gt_mask(n),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    MaskStack::from_view_tensors(&tensors)
}

pub fn grid_for(dataset_area: &crate::tensorio::Area, cfg: &RunConfig) -> Result<GridSpec> {
    cfg.grid.grid_for(dataset_area)
}

pub fn fit_dataset(dataset: &Dataset, masks: &MaskStack, cfg: &RunConfig) -> Result<FitResult> {
    let grid = grid_for(&dataset.calibration.area, cfg)?;
    fit(dataset, masks, &grid, &cfg.render, &cfg.fit)
}

pub fn cmd_fit(dir: &Path, cfg: &RunConfig) -> Result<FitResult> {
    cfg.validate()?;
    let dataset = Dataset::load(dir)?;
    let masks = read_masks(dir, dataset.num_views(), cfg.masks)?;
    let result = fit_dataset(&dataset, &masks, cfg)?;
    let layout = DatasetLayout::new(dir);
    write_tensor(layout.scene_density(), &result.scene.density_tensor())?;
    write_tensor(layout.scene_color(), &result.scene.color_tensor())?;
    write_loss_history(layout.loss_history(), &result.history)?;
    for (n, cam) in dataset.calibration.cameras.iter().enumerate() {
        let view = render_view(&result.scene, cam, &cfg.render)?;
        let mask: Vec<f32> = view.mask.iter().map(|&x| x as f32).collect();
        write_image_pgm(layout.render_mask_preview(n), view.width, view.height, &mask)?;
        write_image_ppm(layout.render_color_preview(n), view.width, view.height, &view.color_hwc())?;
    }
    save_config(&layout, cfg)?;
    Ok(result)
}

pub fn detect_scene(scene: &SceneVolume, cfg: &RunConfig) -> Result<(BevMap, Vec<Detection>)> {
    let bev = bev_project(&scene.density, &scene.grid)?;
    let dets = extract_peaks(&bev, cfg.detect.score_thr, cfg.detect.nms_radius)?;
    Ok((bev, dets))
}

pub fn cmd_detect(dir: &Path, cfg: &RunConfig) -> Result<Vec<Detection>> {
    cfg.validate()?;
    let layout = DatasetLayout::new(dir);
    let calibration = read_calibration(layout.calibration())?;
    let grid = grid_for(&calibration.area, cfg)?;
    let density = read_tensor(layout.scene_density())?;
    let color = read_tensor(layout.scene_color())?;
    let scene = SceneVolume::from_tensors(grid, &density, &color)?;
    let (bev, dets) = detect_scene(&scene, cfg)?;
    write_detections(layout.detections(), &dets)?;
    bev.write_pgm(layout.bev_preview())?;
    save_config(&layout, cfg)?;
    Ok(dets)
}

pub fn evaluate(dets: &[Detection], gt: &crate::tensorio::Tensor, cfg: &RunConfig) -> Result<MetricsReport> {
    match_and_score(dets, &gt_points(gt)?, cfg.detect.match_radius)
}

pub fn cmd_eval(dir: &Path, cfg: &RunConfig) -> Result<MetricsReport> {
    cfg.validate()?;
    let layout = DatasetLayout::new(dir);
    let dets = read_detections(layout.detections())?;
    let gt = read_tensor(layout.gt_positions())?;
    let report = evaluate(&dets, &gt, cfg)?;
    write_metrics(layout.metrics(), &report)?;
    save_config(&layout, cfg)?;
    Ok(report)
}

pub fn cmd_pipeline(dir: &Path, cfg: &RunConfig) -> Result<MetricsReport> {
    if cfg.masks == MaskSource::Segmented {
        cmd_segment(dir, cfg)?;
    }
    cmd_fit(dir, cfg)?;
    cmd_detect(dir, cfg)?;
    cmd_eval(dir, cfg)
}

/// Fit, detect and score one in-memory dataset under given masks.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub metrics: MetricsReport,
    pub bev_occupancy: f64,
    pub detections: Vec<Detection>,
    pub fit: FitResult,
}

pub fn run_in_memory(dataset: &Dataset, masks: &MaskStack, cfg: &RunConfig) -> Result<RunSummary> {
    let fit = fit_dataset(dataset, masks, cfg)?;
    let (_, detections) = detect_scene(&fit.scene, cfg)?;
    let gt = dataset
        .gt_positions
        .as_ref()
        .ok_or_else(|| Error::MissingInput("gt_positions.vpt".into()))?;
    Ok(RunSummary {
        metrics: evaluate(&detections, gt, cfg)?,
        bev_occupancy: mean_bev_occupancy(&fit.scene),
        detections,
        fit,
    })
}

/// One row of the fusion ablation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AblationRow {
    pub fusion: FusionMode,
    pub metrics: MetricsReport,
}

/// Fits the dataset once per fusion mode with the linear decoder, the only
/// decoder that reads the fused features.
pub fn fusion_ablation(dataset: &Dataset, masks: &MaskStack, cfg: &RunConfig) -> Result<Vec<AblationRow>> {
    [FusionMode::Softmax, FusionMode::Add, FusionMode::ConcatProject]
        .into_iter()
        .map(|fusion| {
            let mut c = cfg.clone();
            c.fit.fusion = fusion;
            c.fit.decoder = DecoderMode::Linear;
            Ok(AblationRow {
                fusion,
                metrics: run_in_memory(dataset, masks, &c)?.metrics,
            })
        })
        .collect()
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut out = String::from("| fusion | MODA | MODP | precision | recall |\n|---|---|---|---|---|\n");
    for r in rows {
        let name = match r.fusion {
            FusionMode::Softmax => "soft-max",
            FusionMode::Add => "add",
            FusionMode::ConcatProject => "concat+project",
        };
        let m = &r.metrics;
        let _ = writeln!(
            out,
            "| {name} | {:.1} | {:.1} | {:.1} | {:.1} |",
            100.0 * m.moda,
            100.0 * m.modp,
            100.0 * m.precision,
            100.0 * m.recall
        );
    }
    out
}
