//! Voxel grids, 2D-to-3D feature lifting, multi-view fusion and the per-voxel
//! decoder that turns fused features into density and color.
//!
//! All volumes are stored voxel-major with `z` fastest (`(ix * Y + iy) * Z + iz`)
//! and channels innermost, so a BEV column is contiguous.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraModel, WorldPoint};
use crate::render::SceneVolume;
use crate::tensorio::{Area, Tensor};

/// Upper bound on `X * Y * Z`.
pub const MAX_VOXELS: usize = 1 << 26;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    /// Minimum corner of the grid, meters.
    pub origin: [f64; 3],
    pub voxel_size: f64,
    pub dims: [usize; 3],
}

impl GridSpec {
    pub fn new(origin: [f64; 3], voxel_size: f64, dims: [usize; 3]) -> Result<Self> {
        if !(voxel_size > 0.0) || !voxel_size.is_finite() {
            return Err(Error::InvalidArgument(format!("voxel size {voxel_size} must be positive")));
        }
        if dims.contains(&0) {
            return Err(Error::InvalidArgument(format!("grid dims {dims:?} must be positive")));
        }
        let count = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n <= MAX_VOXELS)
            .ok_or_else(|| Error::InvalidArgument(format!("grid {dims:?} exceeds the voxel budget")))?;
        debug_assert!(count > 0);
        Ok(Self {
            origin,
            voxel_size,
            dims,
        })
    }

    /// Smallest grid anchored at the area's minimum corner that covers the
    /// area footprint and `[0, height]` vertically.
    pub fn covering(area: &Area, voxel_size: f64, height: f64) -> Result<Self> {
        let cells = |len: f64| ((len / voxel_size) - 1e-9).ceil().max(1.0) as usize;
        Self::new(
            [area.xmin, area.ymin, 0.0],
            voxel_size,
            [cells(area.width()), cells(area.depth()), cells(height)],
        )
    }

    pub fn num_voxels(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn num_columns(&self) -> usize {
        self.dims[0] * self.dims[1]
    }

    pub fn index(&self, ix: usize, iy: usize, iz: usize) -> usize {
        (ix * self.dims[1] + iy) * self.dims[2] + iz
    }

    /// Inverse of [`GridSpec::index`].
    pub fn coords(&self, idx: usize) -> (usize, usize, usize) {
        let iz = idx % self.dims[2];
        let col = idx / self.dims[2];
        (col / self.dims[1], col % self.dims[1], iz)
    }

    pub fn max_corner(&self) -> [f64; 3] {
        [
            self.origin[0] + self.dims[0] as f64 * self.voxel_size,
            self.origin[1] + self.dims[1] as f64 * self.voxel_size,
            self.origin[2] + self.dims[2] as f64 * self.voxel_size,
        ]
    }

    pub fn voxel_center(&self, ix: usize, iy: usize, iz: usize) -> Result<WorldPoint> {
        if ix >= self.dims[0] || iy >= self.dims[1] || iz >= self.dims[2] {
            return Err(Error::InvalidArgument(format!(
                "voxel index ({ix}, {iy}, {iz}) outside grid {:?}",
                self.dims
            )));
        }
        Ok(self.center_unchecked(ix, iy, iz))
    }

    pub(crate) fn center_unchecked(&self, ix: usize, iy: usize, iz: usize) -> WorldPoint {
        let s = self.voxel_size;
        WorldPoint::new(
            self.origin[0] + (ix as f64 + 0.5) * s,
            self.origin[1] + (iy as f64 + 0.5) * s,
            self.origin[2] + (iz as f64 + 0.5) * s,
        )
    }

    /// Ground-plane center of BEV cell `(ix, iy)`.
    pub fn column_center(&self, ix: usize, iy: usize) -> (f64, f64) {
        let s = self.voxel_size;
        (
            self.origin[0] + (ix as f64 + 0.5) * s,
            self.origin[1] + (iy as f64 + 0.5) * s,
        )
    }
}

/// Features of one view lifted onto the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVolume {
    pub grid: GridSpec,
    pub channels: usize,
    /// `num_voxels * channels`, voxel-major.
    pub values: Vec<f64>,
    pub visibility: Vec<bool>,
}

impl FeatureVolume {
    pub fn voxel(&self, v: usize) -> &[f64] {
        &self.values[v * self.channels..(v + 1) * self.channels]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusedVolume {
    pub grid: GridSpec,
    pub channels: usize,
    pub values: Vec<f64>,
    /// Number of views that see each voxel.
    pub coverage: Vec<u32>,
}

impl FusedVolume {
    pub fn voxel(&self, v: usize) -> &[f64] {
        &self.values[v * self.channels..(v + 1) * self.channels]
    }

    /// `C x X x Y x Z` tensor for debugging dumps.
    pub fn to_tensor(&self) -> Tensor {
        let n = self.grid.num_voxels();
        let mut data = vec![0f32; n * self.channels];
        for v in 0..n {
            for c in 0..self.channels {
                data[c * n + v] = self.values[v * self.channels + c] as f32;
            }
        }
        let [x, y, z] = self.grid.dims;
        Tensor {
            shape: vec![self.channels, x, y, z],
            data,
        }
    }
}

/// Bilinear sample of an `H' x W' x C` map at continuous feature-pixel
/// coordinates (pixel centers at integer + 0.5), clamped to the border.
fn bilinear(features: &Tensor, fx: f64, fy: f64, out: &mut [f64]) {
    let (h, w, c) = (features.shape[0], features.shape[1], features.shape[2]);
    let gx = (fx - 0.5).clamp(0.0, (w - 1) as f64);
    let gy = (fy - 0.5).clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (gx.floor() as usize, gy.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (ax, ay) = (gx - x0 as f64, gy - y0 as f64);
    let at = |y: usize, x: usize, k: usize| f64::from(features.data[(y * w + x) * c + k]);
    for (k, o) in out.iter_mut().enumerate() {
        let top = at(y0, x0, k) * (1.0 - ax) + at(y0, x1, k) * ax;
        let bottom = at(y1, x0, k) * (1.0 - ax) + at(y1, x1, k) * ax;
        *o = top * (1.0 - ay) + bottom * ay;
    }
}

/// Assigns every voxel the feature of the pixel its center projects to; all
/// voxels along one camera ray receive the same feature.
pub fn lift_features(camera: &CameraModel, features: &Tensor, grid: &GridSpec) -> Result<FeatureVolume> {
    if features.shape.len() != 3 || features.shape.contains(&0) {
        return Err(Error::ShapeMismatch(format!(
            "feature map must be H'xW'xC, got {:?}",
            features.shape
        )));
    }
    if let Some(i) = features.data.iter().position(|x| !x.is_finite()) {
        return Err(Error::NonFinite(i));
    }
    let (fh, fw, c) = (features.shape[0], features.shape[1], features.shape[2]);
    let sx = fw as f64 / f64::from(camera.width);
    let sy = fh as f64 / f64::from(camera.height);
    let n = grid.num_voxels();
    let mut values = vec![0.0; n * c];
    let mut visibility = vec![false; n];
    for (v, (vis, out)) in visibility.iter_mut().zip(values.chunks_exact_mut(c)).enumerate() {
        let (ix, iy, iz) = grid.coords(v);
        let p = camera.project(&grid.center_unchecked(ix, iy, iz));
        if p.in_frustum {
            *vis = true;
            bilinear(features, p.u * sx, p.v * sy, out);
        }
    }
    Ok(FeatureVolume {
        grid: *grid,
        channels: c,
        values,
        visibility,
    })
}

fn check_same_grid(volumes: &[FeatureVolume]) -> Result<(GridSpec, usize)> {
    let first = volumes
        .first()
        .ok_or_else(|| Error::InvalidArgument("fusion needs at least one volume".into()))?;
    for v in volumes {
        if v.grid != first.grid || v.channels != first.channels {
            return Err(Error::ShapeMismatch("feature volumes have mismatched grids".into()));
        }
    }
    Ok((first.grid, first.channels))
}

fn l2(x: &[f64]) -> f64 {
    x.iter().map(|a| a * a).sum::<f64>().sqrt()
}

/// Soft-max weights of each view at voxel `v`; invisible views get exactly 0.
pub fn softmax_weights(volumes: &[FeatureVolume], v: usize, temperature: f64) -> Vec<f64> {
    let logits: Vec<Option<f64>> = volumes
        .iter()
        .map(|vol| vol.visibility[v].then(|| l2(vol.voxel(v)) / temperature))
        .collect();
    let max = logits.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut weights: Vec<f64> = logits
        .iter()
        .map(|l| l.map_or(0.0, |l| (l - max).exp()))
        .collect();
    let total: f64 = weights.iter().sum();
    if total > 0.0 {
        weights.iter_mut().for_each(|w| *w /= total);
    }
    weights
}

/// Soft-max re-weighting across views, using the feature L2 norm as the
/// per-view confidence.
pub fn fuse_softmax(volumes: &[FeatureVolume], temperature: f64) -> Result<FusedVolume> {
    if !(temperature > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature {temperature} must be positive")));
    }
    let (grid, c) = check_same_grid(volumes)?;
    let n = grid.num_voxels();
    let mut values = vec![0.0; n * c];
    let mut coverage = vec![0u32; n];
    for v in 0..n {
        let weights = softmax_weights(volumes, v, temperature);
        let out = &mut values[v * c..(v + 1) * c];
        for (vol, &w) in volumes.iter().zip(&weights) {
            if vol.visibility[v] {
                coverage[v] += 1;
                for (o, &x) in out.iter_mut().zip(vol.voxel(v)) {
                    *o += w * x;
                }
            }
        }
    }
    Ok(FusedVolume {
        grid,
        channels: c,
        values,
        coverage,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    Softmax,
    Add,
    ConcatProject,
}

/// `C x (N*C)` matrix with orthonormal rows, fixed by `seed`.
pub fn concat_projection(views: usize, channels: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = DMatrix::from_fn(views * channels, channels, |_, _| StandardNormal.sample(&mut rng));
    let q = g.qr().q();
    q.transpose()
}

/// Adding (visible-view mean) or concatenation followed by a fixed
/// orthonormal projection back to `C` channels.
pub fn fuse_alternative(volumes: &[FeatureVolume], mode: FusionMode, seed: u64) -> Result<FusedVolume> {
    let (grid, c) = check_same_grid(volumes)?;
    let n = grid.num_voxels();
    let mut values = vec![0.0; n * c];
    let mut coverage = vec![0u32; n];
    match mode {
        FusionMode::Softmax => {
            return Err(Error::InvalidArgument("use fuse_softmax for soft-max fusion".into()))
        }
        FusionMode::Add => {
            for v in 0..n {
                let out = &mut values[v * c..(v + 1) * c];
                for vol in volumes.iter().filter(|vol| vol.visibility[v]) {
                    coverage[v] += 1;
                    for (o, &x) in out.iter_mut().zip(vol.voxel(v)) {
                        *o += x;
                    }
                }
                if coverage[v] > 0 {
                    let k = f64::from(coverage[v]);
                    out.iter_mut().for_each(|o| *o /= k);
                }
            }
        }
        FusionMode::ConcatProject => {
            let q = concat_projection(volumes.len(), c, seed);
            for v in 0..n {
                let out = &mut values[v * c..(v + 1) * c];
                for (m, vol) in volumes.iter().enumerate() {
                    if !vol.visibility[v] {
                        continue;
                    }
                    coverage[v] += 1;
                    for (k, o) in out.iter_mut().enumerate() {
                        *o += (0..c).map(|j| q[(k, m * c + j)] * vol.voxel(v)[j]).sum::<f64>();
                    }
                }
            }
        }
    }
    Ok(FusedVolume {
        grid,
        channels: c,
        values,
        coverage,
    })
}

/// Fuses with the requested mode; `temperature` only matters for soft-max.
pub fn fuse(volumes: &[FeatureVolume], mode: FusionMode, temperature: f64, seed: u64) -> Result<FusedVolume> {
    match mode {
        FusionMode::Softmax => fuse_softmax(volumes, temperature),
        other => fuse_alternative(volumes, other, seed),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderMode {
    Direct,
    Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub enum DecoderParams {
    /// Free per-voxel logits: density `num_voxels`, color `num_voxels * 3`.
    Direct {
        density_logits: Vec<f64>,
        color_logits: Vec<f64>,
    },
    /// Affine map of the fused feature, shared by all voxels.
    Linear {
        w_density: Vec<f64>,
        b_density: f64,
        /// `3 x C`, row-major.
        w_color: Vec<f64>,
        b_color: [f64; 3],
    },
}

impl DecoderParams {
    pub fn direct(grid: &GridSpec, density_logit: f64, color_logit: f64) -> Self {
        let n = grid.num_voxels();
        DecoderParams::Direct {
            density_logits: vec![density_logit; n],
            color_logits: vec![color_logit; 3 * n],
        }
    }

    pub fn linear(channels: usize, b_density: f64) -> Self {
        DecoderParams::Linear {
            w_density: vec![0.0; channels],
            b_density,
            w_color: vec![0.0; 3 * channels],
            b_color: [0.0; 3],
        }
    }

    /// Flat view of all parameters (for the optimizer).
    pub fn as_flat(&self) -> Vec<f64> {
        match self {
            DecoderParams::Direct {
                density_logits,
                color_logits,
            } => density_logits.iter().chain(color_logits).copied().collect(),
            DecoderParams::Linear {
                w_density,
                b_density,
                w_color,
                b_color,
            } => w_density
                .iter()
                .chain(std::iter::once(b_density))
                .chain(w_color)
                .chain(b_color)
                .copied()
                .collect(),
        }
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        match self {
            DecoderParams::Direct {
                density_logits,
                color_logits,
            } => {
                let n = density_logits.len();
                density_logits.copy_from_slice(&flat[..n]);
                color_logits.copy_from_slice(&flat[n..]);
            }
            DecoderParams::Linear {
                w_density,
                b_density,
                w_color,
                b_color,
            } => {
                let c = w_density.len();
                w_density.copy_from_slice(&flat[..c]);
                *b_density = flat[c];
                w_color.copy_from_slice(&flat[c + 1..c + 1 + 3 * c]);
                b_color.copy_from_slice(&flat[c + 1 + 3 * c..]);
            }
        }
    }

    fn check(&self, fused: &FusedVolume) -> Result<()> {
        let n = fused.grid.num_voxels();
        let ok = match self {
            DecoderParams::Direct {
                density_logits,
                color_logits,
            } => density_logits.len() == n && color_logits.len() == 3 * n,
            DecoderParams::Linear { w_density, w_color, .. } => {
                w_density.len() == fused.channels && w_color.len() == 3 * fused.channels
            }
        };
        if !ok {
            return Err(Error::ShapeMismatch("decoder parameters do not match the volume".into()));
        }
        if self.as_flat().iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidArgument("non-finite decoder parameter".into()));
        }
        Ok(())
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Density and color from the fused volume; voxels no view sees get zero density.
pub fn decode(fused: &FusedVolume, params: &DecoderParams) -> Result<SceneVolume> {
    params.check(fused)?;
    let n = fused.grid.num_voxels();
    let c = fused.channels;
    let mut density = vec![0.0; n];
    let mut color = vec![0.0; 3 * n];
    for v in 0..n {
        let (d, rgb) = match params {
            DecoderParams::Direct {
                density_logits,
                color_logits,
            } => (
                sigmoid(density_logits[v]),
                [
                    sigmoid(color_logits[3 * v]),
                    sigmoid(color_logits[3 * v + 1]),
                    sigmoid(color_logits[3 * v + 2]),
                ],
            ),
            DecoderParams::Linear {
                w_density,
                b_density,
                w_color,
                b_color,
            } => {
                let f = fused.voxel(v);
                let lin = |w: &[f64], b: f64| sigmoid(w.iter().zip(f).map(|(a, x)| a * x).sum::<f64>() + b);
                (
                    lin(w_density, *b_density),
                    [
                        lin(&w_color[..c], b_color[0]),
                        lin(&w_color[c..2 * c], b_color[1]),
                        lin(&w_color[2 * c..], b_color[2]),
                    ],
                )
            }
        };
        density[v] = if fused.coverage[v] == 0 { 0.0 } else { d };
        color[3 * v..3 * v + 3].copy_from_slice(&rgb);
    }
    let scene = SceneVolume::new(fused.grid, density, color)?;
    debug_assert!(scene.in_range());
    Ok(scene)
}

/// Gradient of a loss with respect to the decoder parameters, given its
/// gradient with respect to the decoded density and color. `scene` must be
/// the output of [`decode`] for the same inputs.
pub fn decode_backward(
    fused: &FusedVolume,
    params: &DecoderParams,
    scene: &SceneVolume,
    d_density: &[f64],
    d_color: &[f64],
) -> DecoderParams {
    let n = fused.grid.num_voxels();
    let c = fused.channels;
    // gradient w.r.t. pre-sigmoid values
    let dd = |v: usize| {
        if fused.coverage[v] == 0 {
            0.0
        } else {
            let d = scene.density[v];
            d_density[v] * d * (1.0 - d)
        }
    };
    let dc = |v: usize, k: usize| {
        let x = scene.color[3 * v + k];
        d_color[3 * v + k] * x * (1.0 - x)
    };
    match params {
        DecoderParams::Direct { .. } => DecoderParams::Direct {
            density_logits: (0..n).map(dd).collect(),
            color_logits: (0..3 * n).map(|i| dc(i / 3, i % 3)).collect(),
        },
        DecoderParams::Linear { .. } => {
            let mut w_density = vec![0.0; c];
            let mut b_density = 0.0;
            let mut w_color = vec![0.0; 3 * c];
            let mut b_color = [0.0; 3];
            for v in 0..n {
                let f = fused.voxel(v);
                let g = dd(v);
                if g != 0.0 {
                    b_density += g;
                    for (w, &x) in w_density.iter_mut().zip(f) {
                        *w += g * x;
                    }
                }
                for k in 0..3 {
                    let g = dc(v, k);
                    if g != 0.0 {
                        b_color[k] += g;
                        for (w, &x) in w_color[k * c..(k + 1) * c].iter_mut().zip(f) {
                            *w += g * x;
                        }
                    }
                }
            }
            DecoderParams::Linear {
                w_density,
                b_density,
                w_color,
                b_color,
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Matrix3, Vector3};
    use rand::Rng;

    fn unit_grid(dims: [usize; 3]) -> GridSpec {
        GridSpec::new([0.0; 3], 1.0, dims).unwrap()
    }

    #[test]
    fn voxel_center_examples() {
        let g = unit_grid([2, 2, 2]);
        assert_eq!(g.voxel_center(0, 0, 0).unwrap(), WorldPoint::new(0.5, 0.5, 0.5));
        assert_eq!(g.voxel_center(1, 0, 0).unwrap(), WorldPoint::new(1.5, 0.5, 0.5));
        let g = GridSpec::new([-2.0, -2.0, 0.0], 0.5, [4, 4, 4]).unwrap();
        assert_eq!(g.voxel_center(0, 0, 0).unwrap(), WorldPoint::new(-1.75, -1.75, 0.25));
        assert!(g.voxel_center(4, 0, 0).is_err());
    }

    #[test]
    fn grid_validation_and_covering() {
        assert!(GridSpec::new([0.0; 3], 0.0, [1, 1, 1]).is_err());
        assert!(GridSpec::new([0.0; 3], 1.0, [0, 1, 1]).is_err());
        assert!(GridSpec::new([0.0; 3], 1.0, [1 << 20, 1 << 20, 1]).is_err());
        let area = Area {
            xmin: 0.0,
            ymin: 0.0,
            xmax: 8.0,
            ymax: 8.0,
        };
        let g = GridSpec::covering(&area, 0.25, 2.0).unwrap();
        assert_eq!(g.dims, [32, 32, 8]);
        let wild = Area {
            xmin: 0.0,
            ymin: 0.0,
            xmax: 12.0,
            ymax: 36.0,
        };
        assert_eq!(GridSpec::covering(&wild, 0.25, 2.0).unwrap().dims, [48, 144, 8]);
        for idx in [0, 5, 77, g.num_voxels() - 1] {
            let (x, y, z) = g.coords(idx);
            assert_eq!(g.index(x, y, z), idx);
        }
    }

    /// Camera at (0.5, 0.5, -10) looking up the +z axis.
    fn axis_camera() -> CameraModel {
        let k = Matrix3::new(10.0, 0.0, 4.0, 0.0, 10.0, 4.0, 0.0, 0.0, 1.0);
        CameraModel::new(k, Matrix3::identity(), Vector3::new(-0.5, -0.5, 10.0), 8, 8, 0).unwrap()
    }

    fn ramp_features(h: usize, w: usize, c: usize) -> Tensor {
        let data = (0..h * w * c).map(|i| (i as f32 * 0.37).sin()).collect();
        Tensor::new(vec![h, w, c], data).unwrap()
    }

    #[test]
    fn voxels_on_one_ray_share_features() {
        let cam = axis_camera();
        let grid = unit_grid([1, 1, 3]);
        let feats = ramp_features(8, 8, 4);
        let vol = lift_features(&cam, &feats, &grid).unwrap();
        assert!(vol.visibility.iter().all(|&v| v));
        assert_eq!(vol.voxel(0), vol.voxel(1));
        assert_eq!(vol.voxel(1), vol.voxel(2));
        // principal point (4, 4) is the corner of four feature pixels: bilinear average
        let avg: Vec<f64> = (0..4)
            .map(|k| {
                [(3, 3), (3, 4), (4, 3), (4, 4)]
                    .iter()
                    .map(|&(y, x)| f64::from(feats.data[(y * 8 + x) * 4 + k]))
                    .sum::<f64>()
                    / 4.0
            })
            .collect();
        for (a, b) in vol.voxel(0).iter().zip(&avg) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn voxels_behind_camera_are_invisible() {
        let cam = axis_camera();
        let grid = GridSpec::new([0.0, 0.0, -20.0], 1.0, [1, 1, 2]).unwrap();
        let vol = lift_features(&cam, &ramp_features(8, 8, 2), &grid).unwrap();
        assert!(!vol.visibility[0] && !vol.visibility[1]);
        assert!(vol.values.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn constant_map_lifts_to_constant() {
        let cam = axis_camera();
        let grid = GridSpec::new([-6.0, -6.0, 0.0], 0.5, [24, 24, 4]).unwrap();
        let feats = Tensor::new(vec![4, 4, 3], vec![0.25; 48]).unwrap();
        let vol = lift_features(&cam, &feats, &grid).unwrap();
        for v in 0..grid.num_voxels() {
            if vol.visibility[v] {
                assert!(vol.voxel(v).iter().all(|&x| (x - 0.25).abs() < 1e-12));
            } else {
                assert!(vol.voxel(v).iter().all(|&x| x == 0.0));
            }
        }
        assert!(vol.visibility.iter().any(|&v| v) && vol.visibility.iter().any(|&v| !v));
    }

    fn random_volume(rng: &mut ChaCha8Rng, grid: GridSpec, c: usize, p_visible: f64) -> FeatureVolume {
        let n = grid.num_voxels();
        let visibility: Vec<bool> = (0..n).map(|_| rng.random_bool(p_visible)).collect();
        let mut values = vec![0.0; n * c];
        for v in 0..n {
            if visibility[v] {
                for k in 0..c {
                    values[v * c + k] = rng.random_range(-1.0..1.0);
                }
            }
        }
        FeatureVolume {
            grid,
            channels: c,
            values,
            visibility,
        }
    }

    #[test]
    fn softmax_single_view_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let vol = random_volume(&mut rng, unit_grid([3, 3, 3]), 4, 0.7);
        let fused = fuse_softmax(std::slice::from_ref(&vol), 0.5).unwrap();
        for v in 0..27 {
            assert_eq!(fused.coverage[v], vol.visibility[v] as u32);
            for (a, b) in fused.voxel(v).iter().zip(vol.voxel(v)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_equal_confidence_is_mean() {
        let grid = unit_grid([1, 1, 1]);
        let mk = |vals: Vec<f64>| FeatureVolume {
            grid,
            channels: 2,
            values: vals,
            visibility: vec![true],
        };
        let fused = fuse_softmax(&[mk(vec![1.0, 0.0]), mk(vec![0.0, 1.0])], 0.3).unwrap();
        assert!((fused.values[0] - 0.5).abs() < 1e-12 && (fused.values[1] - 0.5).abs() < 1e-12);
        assert_eq!(fused.coverage[0], 2);
    }

    #[test]
    fn softmax_low_temperature_selects_max_confidence() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let grid = unit_grid([4, 4, 2]);
        let vols: Vec<_> = (0..3).map(|_| random_volume(&mut rng, grid, 3, 0.8)).collect();
        let fused = fuse_softmax(&vols, 1e-3).unwrap();
        for v in 0..grid.num_voxels() {
            // explicit argmax over visible views
            let best = vols
                .iter()
                .filter(|vol| vol.visibility[v])
                .max_by(|a, b| l2(a.voxel(v)).partial_cmp(&l2(b.voxel(v))).unwrap());
            match best {
                Some(b) => {
                    let second = vols
                        .iter()
                        .filter(|vol| vol.visibility[v])
                        .map(|vol| l2(vol.voxel(v)))
                        .filter(|&s| s < l2(b.voxel(v)))
                        .fold(f64::NEG_INFINITY, f64::max);
                    if l2(b.voxel(v)) - second > 0.02 {
                        for (a, e) in fused.voxel(v).iter().zip(b.voxel(v)) {
                            assert!((a - e).abs() < 1e-3);
                        }
                    }
                }
                None => assert!(fused.voxel(v).iter().all(|&x| x == 0.0)),
            }
        }
    }

    #[test]
    fn softmax_weights_are_normalized_and_mask_invisible_views() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let grid = unit_grid([3, 3, 3]);
        let vols: Vec<_> = (0..4).map(|_| random_volume(&mut rng, grid, 5, 0.6)).collect();
        for v in 0..grid.num_voxels() {
            let w = softmax_weights(&vols, v, 0.7);
            let visible = vols.iter().filter(|vol| vol.visibility[v]).count();
            if visible > 0 {
                assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
            for (vol, wi) in vols.iter().zip(&w) {
                if !vol.visibility[v] {
                    assert_eq!(*wi, 0.0);
                }
            }
        }
    }

    #[test]
    fn softmax_tends_to_add_at_high_temperature() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let grid = unit_grid([3, 3, 2]);
        let vols: Vec<_> = (0..3).map(|_| random_volume(&mut rng, grid, 4, 0.7)).collect();
        let soft = fuse_softmax(&vols, 1e6).unwrap();
        let add = fuse_alternative(&vols, FusionMode::Add, 0).unwrap();
        let max_diff = soft
            .values
            .iter()
            .zip(&add.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max_diff < 1e-4);
        assert_eq!(soft.coverage, add.coverage);
    }

    #[test]
    fn add_fusion_examples() {
        let grid = unit_grid([1, 1, 1]);
        let mk = |x: f64| FeatureVolume {
            grid,
            channels: 2,
            values: vec![x, x],
            visibility: vec![true],
        };
        let fused = fuse_alternative(&[mk(1.0), mk(1.0)], FusionMode::Add, 0).unwrap();
        assert_eq!(fused.values, vec![1.0, 1.0]);
        let fused = fuse_alternative(&[mk(1.0), mk(3.0)], FusionMode::Add, 0).unwrap();
        assert_eq!(fused.values, vec![2.0, 2.0]);
        let other = FeatureVolume {
            grid: unit_grid([2, 1, 1]),
            channels: 2,
            values: vec![0.0; 4],
            visibility: vec![true; 2],
        };
        assert!(fuse_alternative(&[mk(1.0), other.clone()], FusionMode::Add, 0).is_err());
        assert!(fuse_softmax(&[mk(1.0), other], 1.0).is_err());
    }

    #[test]
    fn concat_projection_matches_direct_application() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let grid = unit_grid([2, 2, 2]);
        let (views, c) = (3, 4);
        let vols: Vec<_> = (0..views).map(|_| random_volume(&mut rng, grid, c, 0.75)).collect();
        let fused = fuse_alternative(&vols, FusionMode::ConcatProject, 17).unwrap();
        let q = concat_projection(views, c, 17);
        // rows orthonormal
        let qqt = &q * q.transpose();
        assert!((qqt - DMatrix::<f64>::identity(c, c)).amax() < 1e-12);
        for v in 0..grid.num_voxels() {
            let concat = DMatrix::from_fn(views * c, 1, |i, _| {
                let vol = &vols[i / c];
                if vol.visibility[v] {
                    vol.voxel(v)[i % c]
                } else {
                    0.0
                }
            });
            let expected = &q * &concat;
            for k in 0..c {
                assert!((fused.voxel(v)[k] - expected[(k, 0)]).abs() < 1e-12);
            }
            assert!(l2(fused.voxel(v)) <= concat.norm() + 1e-12);
        }
        // inputs in the row space keep their norm
        let y = DMatrix::from_fn(c, 1, |_, _| rng.random_range(-1.0..1.0));
        let x = q.transpose() * &y;
        assert!(((&q * &x).norm() - x.norm()).abs() < 1e-6);
    }

    fn fused_from(values: Vec<f64>, channels: usize, grid: GridSpec) -> FusedVolume {
        let n = grid.num_voxels();
        FusedVolume {
            grid,
            channels,
            values,
            coverage: vec![1; n],
        }
    }

    #[test]
    fn decode_examples() {
        let grid = unit_grid([2, 2, 2]);
        let fused = fused_from(vec![0.0; 8 * 3], 3, grid);
        let scene = decode(&fused, &DecoderParams::direct(&grid, 0.0, 0.0)).unwrap();
        assert!(scene.density.iter().all(|&d| d == 0.5));

        let scene = decode(&fused, &DecoderParams::linear(3, -20.0)).unwrap();
        assert!(scene.density.iter().all(|&d| d < 1e-8));

        let mut values = vec![0.0; 8 * 3];
        values[5 * 3] = 2.0;
        let fused = fused_from(values, 3, grid);
        let mut params = DecoderParams::linear(3, 0.0);
        if let DecoderParams::Linear { w_density, .. } = &mut params {
            w_density[0] = 1.0;
        }
        let scene = decode(&fused, &params).unwrap();
        for v in 0..8 {
            let expected = if v == 5 { 1.0 / (1.0 + (-2.0f64).exp()) } else { 0.5 };
            assert!((scene.density[v] - expected).abs() < 1e-15);
        }
        assert!(scene.in_range());
        assert!(decode(&fused, &DecoderParams::linear(4, 0.0)).is_err());
    }

    #[test]
    fn zero_coverage_pins_density() {
        let grid = unit_grid([2, 1, 1]);
        let mut fused = fused_from(vec![0.0; 2], 1, grid);
        fused.coverage[1] = 0;
        let scene = decode(&fused, &DecoderParams::direct(&grid, 3.0, 0.0)).unwrap();
        assert!(scene.density[0] > 0.9);
        assert_eq!(scene.density[1], 0.0);
    }

    #[test]
    fn decode_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let grid = unit_grid([2, 2, 2]);
        let c = 3;
        let fused = fused_from((0..8 * c).map(|_| rng.random_range(-1.0..1.0)).collect(), c, grid);
        let gd: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let gc: Vec<f64> = (0..24).map(|_| rng.random_range(-1.0..1.0)).collect();
        let loss = |p: &DecoderParams| {
            let s = decode(&fused, p).unwrap();
            s.density.iter().zip(&gd).map(|(a, b)| a * b).sum::<f64>()
                + s.color.iter().zip(&gc).map(|(a, b)| a * b).sum::<f64>()
        };
        let mut linear = DecoderParams::linear(c, 0.1);
        linear.set_flat(&(0..4 * c + 4).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>());
        for params in [DecoderParams::direct(&grid, 0.3, -0.2), linear] {
            let scene = decode(&fused, &params).unwrap();
            let grad = decode_backward(&fused, &params, &scene, &gd, &gc).as_flat();
            let flat = params.as_flat();
            for i in 0..flat.len() {
                let h = 1e-5;
                let mut p = params.clone();
                let mut f = flat.clone();
                f[i] += h;
                p.set_flat(&f);
                let up = loss(&p);
                f[i] -= 2.0 * h;
                p.set_flat(&f);
                let down = loss(&p);
                let fd = (up - down) / (2.0 * h);
                assert!((fd - grad[i]).abs() < 1e-7, "param {i}: fd {fd} vs {}", grad[i]);
            }
        }
    }

    #[test]
    fn lifting_is_deterministic() {
        let cam = axis_camera();
        let grid = GridSpec::new([-1.0, -1.0, 0.0], 0.5, [5, 5, 3]).unwrap();
        let feats = ramp_features(4, 4, 3);
        assert_eq!(lift_features(&cam, &feats, &grid).unwrap(), lift_features(&cam, &feats, &grid).unwrap());
    }
}
