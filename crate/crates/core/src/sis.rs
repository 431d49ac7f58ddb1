//! Semantic-aware iterative segmentation.
//!
//! Pixels of all views are pooled into one `P x D` feature matrix. The first
//! principal component splits them into two sides; a semantic similarity map
//! decides which side is foreground. Later iterations repeat the PCA on the
//! surviving foreground pixels only.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensorio::Tensor;

/// Per-pixel features of every view, flattened to `P x D` (row-major,
/// view-major then row then column).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStack {
    pub views: usize,
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl FeatureStack {
    pub fn new(views: usize, height: usize, width: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != views * height * width * dim {
            return Err(Error::ShapeMismatch(format!(
                "feature stack {views}x{height}x{width}x{dim} needs {} values, got {}",
                views * height * width * dim,
                data.len()
            )));
        }
        if dim < 1 {
            return Err(Error::InvalidArgument("feature dimension must be positive".into()));
        }
        if let Some(i) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(Self {
            views,
            height,
            width,
            dim,
            data,
        })
    }

    /// Plain `P x D` matrix (one view of 1 x P pixels).
    pub fn from_rows(rows: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(1, 1, rows, dim, data)
    }

    /// Stacks per-view `H' x W' x D` tensors.
    pub fn from_tensors(views: &[Tensor]) -> Result<Self> {
        let first = views
            .first()
            .ok_or_else(|| Error::InvalidArgument("no feature maps".into()))?;
        if first.shape.len() != 3 {
            return Err(Error::ShapeMismatch("feature maps must be H'xW'xD".into()));
        }
        let (h, w, d) = (first.shape[0], first.shape[1], first.shape[2]);
        let mut data = Vec::with_capacity(views.len() * h * w * d);
        for t in views {
            if t.shape != first.shape {
                return Err(Error::ShapeMismatch(format!(
                    "feature map shape {:?} differs from {:?}",
                    t.shape, first.shape
                )));
            }
            data.extend(t.data.iter().map(|&x| f64::from(x)));
        }
        Self::new(views.len(), h, w, d, data)
    }

    pub fn pixels(&self) -> usize {
        self.views * self.height * self.width
    }

    pub fn row(&self, p: usize) -> &[f64] {
        &self.data[p * self.dim..(p + 1) * self.dim]
    }

    /// Rows selected by `keep` as a plain `P' x D` stack.
    pub fn select(&self, keep: &[bool]) -> FeatureStack {
        let mut data = Vec::new();
        let mut rows = 0;
        for (p, _) in keep.iter().enumerate().filter(|(_, &k)| k) {
            data.extend_from_slice(self.row(p));
            rows += 1;
        }
        FeatureStack {
            views: 1,
            height: 1,
            width: rows,
            dim: self.dim,
            data,
        }
    }
}

/// Cosine similarity to the pedestrian class per feature pixel, `N x H' x W'`.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticMap {
    pub views: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl SemanticMap {
    pub fn new(views: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != views * height * width {
            return Err(Error::ShapeMismatch(format!(
                "semantic map {views}x{height}x{width} needs {} values, got {}",
                views * height * width,
                data.len()
            )));
        }
        if let Some(x) = data.iter().find(|x| !(-1.0..=1.0).contains(*x)) {
            return Err(Error::OutOfRange(format!("semantic similarity {x} outside [-1, 1]")));
        }
        Ok(Self {
            views,
            height,
            width,
            data,
        })
    }

    pub fn from_tensors(views: &[Tensor]) -> Result<Self> {
        let first = views
            .first()
            .ok_or_else(|| Error::InvalidArgument("no semantic maps".into()))?;
        if first.shape.len() != 2 {
            return Err(Error::ShapeMismatch("semantic maps must be H'xW'".into()));
        }
        let mut data = Vec::new();
        for t in views {
            if t.shape != first.shape {
                return Err(Error::ShapeMismatch("semantic map shapes differ".into()));
            }
            data.extend(t.data.iter().map(|&x| f64::from(x)));
        }
        Self::new(views.len(), first.shape[0], first.shape[1], data)
    }
}

/// Binary per-view masks, `N x H x W`, values in `{0, 1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskStack {
    pub views: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl MaskStack {
    pub fn new(views: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != views * height * width {
            return Err(Error::ShapeMismatch(format!(
                "mask stack {views}x{height}x{width} needs {} values, got {}",
                views * height * width,
                data.len()
            )));
        }
        if data.iter().any(|&x| x != 0.0 && x != 1.0) {
            return Err(Error::OutOfRange("masks must be binary".into()));
        }
        Ok(Self {
            views,
            height,
            width,
            data,
        })
    }

    pub fn view(&self, n: usize) -> &[f32] {
        let len = self.height * self.width;
        &self.data[n * len..(n + 1) * len]
    }

    pub fn view_tensor(&self, n: usize) -> Tensor {
        Tensor {
            shape: vec![self.height, self.width],
            data: self.view(n).to_vec(),
        }
    }

    pub fn from_view_tensors(views: &[Tensor]) -> Result<Self> {
        let first = views
            .first()
            .ok_or_else(|| Error::InvalidArgument("no masks".into()))?;
        if first.shape.len() != 2 {
            return Err(Error::ShapeMismatch("masks must be HxW".into()));
        }
        let mut data = Vec::new();
        for t in views {
            if t.shape != first.shape {
                return Err(Error::ShapeMismatch("mask shapes differ".into()));
            }
            data.extend_from_slice(&t.data);
        }
        Self::new(views.len(), first.shape[0], first.shape[1], data)
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&x| x == 1.0).count()
    }
}

/// Intersection over union of two equally shaped binary masks (1 when both are empty).
pub fn mask_iou(a: &MaskStack, b: &MaskStack) -> f64 {
    assert_eq!(a.data.len(), b.data.len(), "mask shapes differ");
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.data.iter().zip(&b.data) {
        let (x, y) = (x == 1.0, y == 1.0);
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PcaResult {
    /// Unit-norm first principal direction.
    pub direction: Vec<f64>,
    /// Projection of every centered row onto `direction`.
    pub scores: Vec<f64>,
    pub threshold: f64,
}

/// Subtracts the per-dimension mean over all pixels.
pub fn center_features(stack: &FeatureStack) -> FeatureStack {
    let (p, d) = (stack.pixels(), stack.dim);
    let mut mean = vec![0.0; d];
    for row in stack.data.chunks_exact(d) {
        for (m, &x) in mean.iter_mut().zip(row) {
            *m += x;
        }
    }
    if p > 0 {
        mean.iter_mut().for_each(|m| *m /= p as f64);
    }
    let mut out = stack.clone();
    for row in out.data.chunks_exact_mut(d) {
        for (x, &m) in row.iter_mut().zip(&mean) {
            *x -= m;
        }
    }
    out
}

fn covariance(stack: &FeatureStack) -> Vec<f64> {
    let d = stack.dim;
    let mut cov = vec![0.0; d * d];
    for row in stack.data.chunks_exact(d) {
        for i in 0..d {
            let xi = row[i];
            if xi == 0.0 {
                continue;
            }
            for j in i..d {
                cov[i * d + j] += xi * row[j];
            }
        }
    }
    let n = stack.pixels().max(1) as f64;
    for i in 0..d {
        for j in i..d {
            let v = cov[i * d + j] / n;
            cov[i * d + j] = v;
            cov[j * d + i] = v;
        }
    }
    cov
}

struct PowerIteration {
    direction: Vec<f64>,
    residual: f64,
    converged: bool,
    iterations: usize,
}

fn power_iteration(cov: &[f64], dim: usize, iters: usize, tol: f64, seed: u64) -> Result<PowerIteration> {
    let trace: f64 = (0..dim).map(|i| cov[i * dim + i]).sum();
    if !(trace > 0.0) {
        return Err(Error::ZeroCovariance);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut random_unit = || {
        let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let n = norm(&v);
        v.iter_mut().for_each(|x| *x /= n);
        v
    };
    let mut v = random_unit();
    let mut next = vec![0.0; dim];
    let mut residual = f64::INFINITY;
    let mut restarts = 0;
    for it in 1..=iters {
        for i in 0..dim {
            next[i] = (0..dim).map(|j| cov[i * dim + j] * v[j]).sum();
        }
        let n = norm(&next);
        if !(n > trace * 1e-14) {
            // start vector (numerically) in the null space
            restarts += 1;
            if restarts > 8 {
                return Err(Error::ZeroCovariance);
            }
            v = random_unit();
            continue;
        }
        next.iter_mut().for_each(|x| *x /= n);
        let cos = dot(&next, &v).clamp(-1.0, 1.0);
        residual = angle_from_cos(cos);
        std::mem::swap(&mut v, &mut next);
        if residual < tol {
            return Ok(PowerIteration {
                direction: v,
                residual,
                converged: true,
                iterations: it,
            });
        }
    }
    Ok(PowerIteration {
        direction: v,
        residual,
        converged: false,
        iterations: iters,
    })
}

/// Angle between unit vectors from their cosine, accurate near zero.
fn angle_from_cos(cos: f64) -> f64 {
    // sqrt(2 - 2cos) is the chord length; angle = 2 asin(chord / 2)
    let chord = (2.0 - 2.0 * cos).max(0.0).sqrt();
    2.0 * (chord / 2.0).min(1.0).asin()
}

fn finish_pca(stack: &FeatureStack, mut direction: Vec<f64>) -> PcaResult {
    let mut scores: Vec<f64> = stack.data.chunks_exact(stack.dim).map(|r| dot(r, &direction)).collect();
    let third: f64 = scores.iter().map(|s| s * s * s).sum::<f64>();
    let scale: f64 = scores.iter().map(|s| s.abs().powi(3)).sum::<f64>();
    let flip = if third.abs() > 1e-12 * scale {
        third < 0.0
    } else {
        direction.iter().find(|x| **x != 0.0).is_some_and(|x| *x < 0.0)
    };
    if flip {
        direction.iter_mut().for_each(|x| *x = -*x);
        scores.iter_mut().for_each(|x| *x = -*x);
    }
    PcaResult {
        direction,
        scores,
        threshold: 0.0,
    }
}

/// Dominant eigenvector of the covariance of an already centered stack, by
/// power iteration. The sign is chosen so that the score distribution has
/// non-negative skewness.
pub fn first_principal_component(stack: &FeatureStack, iters: usize, tol: f64, seed: u64) -> Result<PcaResult> {
    if iters == 0 {
        return Err(Error::InvalidArgument("power iteration needs at least one step".into()));
    }
    let cov = covariance(stack);
    let run = power_iteration(&cov, stack.dim, iters, tol, seed)?;
    if !run.converged {
        return Err(Error::NoConvergence {
            iters,
            residual: run.residual,
        });
    }
    Ok(finish_pca(stack, run.direction))
}

/// `1.0` where `score > threshold`, else `0.0`.
pub fn threshold_scores(scores: &[f64], threshold: f64) -> Vec<f64> {
    scores.iter().map(|&s| if s > threshold { 1.0 } else { 0.0 }).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Positive,
    Negative,
}

/// Picks the candidate with the larger mean semantic similarity over its
/// support; ties go to the smaller candidate, then to the positive side.
pub fn semantic_side_select(positive: &[f64], negative: &[f64], semantic: &[f64]) -> Result<Side> {
    if positive.len() != semantic.len() || negative.len() != semantic.len() {
        return Err(Error::ShapeMismatch("candidate maps and semantic map differ in size".into()));
    }
    let stats = |m: &[f64]| {
        let (mut sum, mut count) = (0.0, 0usize);
        for (&x, &s) in m.iter().zip(semantic) {
            if x == 1.0 {
                sum += s;
                count += 1;
            }
        }
        (count, if count > 0 { sum / count as f64 } else { f64::NAN })
    };
    let (pos_n, pos_mean) = stats(positive);
    let (neg_n, neg_mean) = stats(negative);
    Ok(match (pos_n, neg_n) {
        (0, 0) => return Err(Error::EmptyCandidates),
        (_, 0) => Side::Positive,
        (0, _) => Side::Negative,
        _ if pos_mean > neg_mean => Side::Positive,
        _ if neg_mean > pos_mean => Side::Negative,
        _ if neg_n < pos_n => Side::Negative,
        _ => Side::Positive,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SisConfig {
    pub t_pca: usize,
    pub phi_thr: f64,
    pub semantic_selection: bool,
    pub power_iters: usize,
    pub power_tol: f64,
    pub seed: u64,
}

impl Default for SisConfig {
    fn default() -> Self {
        Self {
            t_pca: 2,
            phi_thr: 0.0,
            semantic_selection: true,
            power_iters: 5000,
            power_tol: 1e-7,
            seed: 0,
        }
    }
}

/// Per-iteration foreground masks at feature resolution (`P` entries each).
#[derive(Debug, Clone)]
pub struct SisTrace {
    pub iterations: Vec<Vec<bool>>,
}

/// Runs the segmentation and returns the mask after every iteration, at
/// feature resolution.
pub fn sis_trace(stack: &FeatureStack, semantic: Option<&SemanticMap>, cfg: &SisConfig) -> Result<SisTrace> {
    if cfg.t_pca == 0 {
        return Err(Error::InvalidArgument("T_PCA must be at least 1".into()));
    }
    let semantic = match (cfg.semantic_selection, semantic) {
        (true, None) => return Err(Error::InvalidArgument("semantic map missing".into())),
        (true, Some(s)) => {
            if s.data.len() != stack.pixels() {
                return Err(Error::ShapeMismatch("semantic map does not match feature stack".into()));
            }
            Some(s)
        }
        (false, _) => None,
    };
    let p = stack.pixels();
    let mut support = vec![true; p];
    let mut iterations = Vec::with_capacity(cfg.t_pca);
    for t in 1..=cfg.t_pca {
        let idx: Vec<usize> = (0..p).filter(|&i| support[i]).collect();
        if idx.len() < 2 {
            return Err(Error::EmptyForeground(t));
        }
        let sub = center_features(&stack.select(&support));
        let cov = covariance(&sub);
        let run = power_iteration(&cov, sub.dim, cfg.power_iters, cfg.power_tol, cfg.seed.wrapping_add(t as u64))?;
        if !run.converged {
            log::warn!(
                "PCA iteration {t}: power iteration stopped after {} steps (residual {:.2e})",
                run.iterations,
                run.residual
            );
        }
        let pca = finish_pca(&sub, run.direction);
        let above = threshold_scores(&pca.scores, cfg.phi_thr);
        let below: Vec<f64> = above.iter().map(|x| 1.0 - x).collect();
        let side = match semantic {
            Some(sem) => {
                let local: Vec<f64> = idx.iter().map(|&i| sem.data[i]).collect();
                semantic_side_select(&above, &below, &local)?
            }
            None => Side::Positive,
        };
        let chosen = if side == Side::Positive { &above } else { &below };
        let mut next = vec![false; p];
        for (k, &i) in idx.iter().enumerate() {
            next[i] = chosen[k] == 1.0;
        }
        support = next;
        if t < cfg.t_pca && !support.iter().any(|&x| x) {
            return Err(Error::EmptyForeground(t));
        }
        iterations.push(support.clone());
    }
    Ok(SisTrace { iterations })
}

/// Nearest-neighbor upsampling of a feature-resolution mask to image size.
pub fn upsample_mask(mask: &[bool], views: usize, fh: usize, fw: usize, h: usize, w: usize) -> Result<MaskStack> {
    if fh == 0 || fw == 0 || !h.is_multiple_of(fh) || !w.is_multiple_of(fw) {
        return Err(Error::ShapeMismatch(format!(
            "feature grid {fh}x{fw} does not divide image {h}x{w}"
        )));
    }
    let (sy, sx) = (h / fh, w / fw);
    let mut data = Vec::with_capacity(views * h * w);
    for n in 0..views {
        for y in 0..h {
            for x in 0..w {
                let on = mask[(n * fh + y / sy) * fw + x / sx];
                data.push(if on { 1.0 } else { 0.0 });
            }
        }
    }
    MaskStack::new(views, h, w, data)
}

/// Full segmentation: final masks upsampled to `image_height x image_width`.
pub fn sis_segment(
    stack: &FeatureStack,
    semantic: Option<&SemanticMap>,
    cfg: &SisConfig,
    image_height: usize,
    image_width: usize,
) -> Result<MaskStack> {
    let trace = sis_trace(stack, semantic, cfg)?;
    let last = trace.iterations.last().expect("at least one iteration");
    upsample_mask(last, stack.views, stack.height, stack.width, image_height, image_width)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}
