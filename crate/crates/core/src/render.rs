//! Emission-absorption volume rendering of a density/color grid with exact
//! reverse-mode gradients.
//!
//! Density values are used directly as per-sample opacities in `[0, 1]`.
//! Samples along each ray are the midpoints of `S` equal sub-intervals of the
//! ray's chord through the grid box; field values at samples come from
//! trilinear interpolation between voxel centers (zero outside the grid).

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraModel, WorldPoint};
use crate::tensorio::Tensor;
use crate::volume::GridSpec;

/// Density `X x Y x Z` and RGB color on a world-anchored grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneVolume {
    pub grid: GridSpec,
    /// `num_voxels`, z fastest.
    pub density: Vec<f64>,
    /// `num_voxels * 3`, channels innermost.
    pub color: Vec<f64>,
}

impl SceneVolume {
    pub fn new(grid: GridSpec, density: Vec<f64>, color: Vec<f64>) -> Result<Self> {
        let n = grid.num_voxels();
        if density.len() != n || color.len() != 3 * n {
            return Err(Error::ShapeMismatch(format!(
                "scene needs {} densities and {} colors, got {} and {}",
                n,
                3 * n,
                density.len(),
                color.len()
            )));
        }
        let scene = Self { grid, density, color };
        if !scene.in_range() {
            return Err(Error::OutOfRange("density and color must lie in [0, 1]".into()));
        }
        Ok(scene)
    }

    pub fn empty(grid: GridSpec) -> Self {
        let n = grid.num_voxels();
        Self {
            grid,
            density: vec![0.0; n],
            color: vec![0.0; 3 * n],
        }
    }

    pub fn in_range(&self) -> bool {
        self.density.iter().chain(&self.color).all(|x| (0.0..=1.0).contains(x))
    }

    /// `X x Y x Z` density tensor.
    pub fn density_tensor(&self) -> Tensor {
        let [x, y, z] = self.grid.dims;
        Tensor {
            shape: vec![x, y, z],
            data: self.density.iter().map(|&d| d as f32).collect(),
        }
    }

    /// `3 x X x Y x Z` color tensor.
    pub fn color_tensor(&self) -> Tensor {
        let [x, y, z] = self.grid.dims;
        let n = self.grid.num_voxels();
        let mut data = vec![0f32; 3 * n];
        for v in 0..n {
            for c in 0..3 {
                data[c * n + v] = self.color[3 * v + c] as f32;
            }
        }
        Tensor {
            shape: vec![3, x, y, z],
            data,
        }
    }

    pub fn from_tensors(grid: GridSpec, density: &Tensor, color: &Tensor) -> Result<Self> {
        let [x, y, z] = grid.dims;
        if density.shape != [x, y, z] || color.shape != [3, x, y, z] {
            return Err(Error::ShapeMismatch(format!(
                "scene tensors {:?} / {:?} do not match grid {:?}",
                density.shape, color.shape, grid.dims
            )));
        }
        let n = grid.num_voxels();
        let mut rgb = vec![0.0; 3 * n];
        for v in 0..n {
            for c in 0..3 {
                rgb[3 * v + c] = f64::from(color.data[c * n + v]);
            }
        }
        Self::new(grid, density.data.iter().map(|&d| f64::from(d)).collect(), rgb)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderConfig {
    pub samples_per_ray: usize,
    pub render_width: usize,
    pub render_height: usize,
    pub chunk_size: usize,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            samples_per_ray: 64,
            render_width: 64,
            render_height: 64,
            chunk_size: 512,
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples_per_ray < 2 {
            return Err(Error::InvalidArgument("need at least 2 samples per ray".into()));
        }
        if self.render_width == 0 || self.render_height == 0 || self.chunk_size == 0 {
            return Err(Error::InvalidArgument("render size and chunk size must be positive".into()));
        }
        Ok(())
    }

    pub fn pixels(&self) -> usize {
        self.render_width * self.render_height
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedView {
    pub width: usize,
    pub height: usize,
    /// `H x W` accumulated opacity.
    pub mask: Vec<f64>,
    /// `3 x H x W` composited color.
    pub color: Vec<f64>,
}

impl RenderedView {
    /// Interleaved `H x W x 3` copy for image writers.
    pub fn color_hwc(&self) -> Vec<f32> {
        let n = self.width * self.height;
        let mut out = vec![0f32; 3 * n];
        for p in 0..n {
            for c in 0..3 {
                out[3 * p + c] = self.color[c * n + p] as f32;
            }
        }
        out
    }
}

/// Slab-method intersection of a ray with the grid's bounding box, clipped to
/// `t >= 0`.
pub fn ray_box_intersect(origin: &WorldPoint, direction: &Vector3<f64>, grid: &GridSpec) -> Option<(f64, f64)> {
    ray_aabb(origin, direction, grid.origin, grid.max_corner())
}

/// Entry and exit parameters of a ray through an axis-aligned box, `t >= 0`.
pub fn ray_aabb(origin: &WorldPoint, direction: &Vector3<f64>, lo: [f64; 3], hi: [f64; 3]) -> Option<(f64, f64)> {
    let mut t_near = 0.0f64;
    let mut t_far = f64::INFINITY;
    for a in 0..3 {
        let (o, d) = (origin[a], direction[a]);
        if d == 0.0 {
            if o < lo[a] || o > hi[a] {
                return None;
            }
            continue;
        }
        let (mut t0, mut t1) = ((lo[a] - o) / d, (hi[a] - o) / d);
        if t0 > t1 {
            std::mem::swap(&mut t0, &mut t1);
        }
        t_near = t_near.max(t0);
        t_far = t_far.min(t1);
    }
    (t_far > t_near).then_some((t_near, t_far))
}

/// Up to eight `(voxel index, weight)` pairs for trilinear interpolation at a
/// point; corners outside the grid are dropped (zero padding).
#[derive(Debug, Clone, Copy, Default)]
struct Taps {
    idx: [u32; 8],
    weight: [f32; 8],
    len: u8,
}

impl Taps {
    fn at(grid: &GridSpec, p: &WorldPoint) -> Taps {
        let mut taps = Taps::default();
        let mut g = [0.0; 3];
        let mut base = [0i64; 3];
        let mut frac = [0.0; 3];
        for a in 0..3 {
            g[a] = (p[a] - grid.origin[a]) / grid.voxel_size - 0.5;
            let f = g[a].floor();
            base[a] = f as i64;
            frac[a] = g[a] - f;
            if g[a] < -1.0 || g[a] > grid.dims[a] as f64 || !g[a].is_finite() {
                return taps;
            }
        }
        for corner in 0..8 {
            let mut w = 1.0;
            let mut ijk = [0i64; 3];
            for a in 0..3 {
                let bit = (corner >> a) & 1;
                ijk[a] = base[a] + bit as i64;
                w *= if bit == 1 { frac[a] } else { 1.0 - frac[a] };
            }
            if w == 0.0 || (0..3).any(|a| ijk[a] < 0 || ijk[a] >= grid.dims[a] as i64) {
                continue;
            }
            let k = taps.len as usize;
            taps.idx[k] = grid.index(ijk[0] as usize, ijk[1] as usize, ijk[2] as usize) as u32;
            taps.weight[k] = w as f32;
            taps.len += 1;
        }
        taps
    }

    fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        (0..self.len as usize).map(|k| (self.idx[k] as usize, f64::from(self.weight[k])))
    }
}

/// Trilinear interpolation of a `channels`-valued field at `p`.
pub fn trilinear_sample(grid: &GridSpec, field: &[f64], channels: usize, p: &WorldPoint) -> Vec<f64> {
    let mut out = vec![0.0; channels];
    let mut g = [0.0; 3];
    for a in 0..3 {
        g[a] = (p[a] - grid.origin[a]) / grid.voxel_size - 0.5;
    }
    let base: Vec<i64> = g.iter().map(|x| x.floor() as i64).collect();
    for corner in 0..8 {
        let mut w = 1.0;
        let mut ijk = [0i64; 3];
        for a in 0..3 {
            let bit = (corner >> a) & 1;
            ijk[a] = base[a] + bit as i64;
            let f = g[a] - base[a] as f64;
            w *= if bit == 1 { f } else { 1.0 - f };
        }
        if (0..3).any(|a| ijk[a] < 0 || ijk[a] >= grid.dims[a] as i64) {
            continue;
        }
        let v = grid.index(ijk[0] as usize, ijk[1] as usize, ijk[2] as usize);
        for (c, o) in out.iter_mut().enumerate() {
            *o += w * field[v * channels + c];
        }
    }
    out
}

/// Front-to-back emission-absorption compositing.
///
/// Returns the accumulated opacity, the composited color and the per-sample
/// weights `w_i = sigma_i * prod_{j<i} (1 - sigma_j)`.
pub fn composite_ea(sigma: &[f64], colors: &[[f64; 3]]) -> (f64, [f64; 3], Vec<f64>) {
    assert_eq!(sigma.len(), colors.len());
    let mut transmittance = 1.0;
    let mut color = [0.0; 3];
    let mut weights = Vec::with_capacity(sigma.len());
    for (&s, c) in sigma.iter().zip(colors) {
        let w = s * transmittance;
        for k in 0..3 {
            color[k] += w * c[k];
        }
        weights.push(w);
        transmittance *= 1.0 - s;
    }
    (1.0 - transmittance, color, weights)
}

/// Precomputed sample taps for every pixel ray of one camera. The taps depend
/// only on the geometry, so they are reused across optimizer iterations.
#[derive(Debug, Clone)]
pub struct RayBundle {
    grid: GridSpec,
    cfg: RenderConfig,
    /// Per ray: `None` when the ray misses the grid, else `S` sample taps.
    offsets: Vec<Option<u32>>,
    taps: Vec<Taps>,
}

impl RayBundle {
    pub fn new(grid: &GridSpec, camera: &CameraModel, cfg: &RenderConfig) -> Result<Self> {
        cfg.validate()?;
        let s = cfg.samples_per_ray;
        let su = f64::from(camera.width) / cfg.render_width as f64;
        let sv = f64::from(camera.height) / cfg.render_height as f64;
        let mut offsets = Vec::with_capacity(cfg.pixels());
        let mut taps = Vec::new();
        for j in 0..cfg.render_height {
            for i in 0..cfg.render_width {
                let (o, d) = camera.ray_through_pixel((i as f64 + 0.5) * su, (j as f64 + 0.5) * sv);
                match ray_box_intersect(&o, &d, grid) {
                    None => offsets.push(None),
                    Some((t0, t1)) => {
                        offsets.push(Some(taps.len() as u32));
                        let dt = (t1 - t0) / s as f64;
                        for k in 0..s {
                            let t = t0 + (k as f64 + 0.5) * dt;
                            taps.push(Taps::at(grid, &(o + d * t)));
                        }
                    }
                }
            }
        }
        Ok(Self {
            grid: *grid,
            cfg: *cfg,
            offsets,
            taps,
        })
    }

    fn ray(&self, r: usize) -> Option<&[Taps]> {
        let s = self.cfg.samples_per_ray;
        self.offsets[r].map(|o| &self.taps[o as usize..o as usize + s])
    }

    fn check_scene(&self, scene: &SceneVolume) -> Result<()> {
        if scene.grid != self.grid {
            return Err(Error::ShapeMismatch("scene grid differs from the ray bundle grid".into()));
        }
        Ok(())
    }

    fn sample(scene: &SceneVolume, taps: &Taps) -> (f64, [f64; 3]) {
        let mut sigma = 0.0;
        let mut c = [0.0; 3];
        for (v, w) in taps.iter() {
            sigma += w * scene.density[v];
            for (k, ck) in c.iter_mut().enumerate() {
                *ck += w * scene.color[3 * v + k];
            }
        }
        // f32 weights can overshoot 1 by an ulp
        (sigma.clamp(0.0, 1.0), c.map(|x| x.clamp(0.0, 1.0)))
    }

    pub fn render(&self, scene: &SceneVolume) -> Result<RenderedView> {
        self.check_scene(scene)?;
        let n = self.cfg.pixels();
        let mut mask = vec![0.0; n];
        let mut color = vec![0.0; 3 * n];
        let s = self.cfg.samples_per_ray;
        let mut sigma = vec![0.0; s];
        let mut rgb = vec![[0.0; 3]; s];
        for r in 0..n {
            let Some(ray) = self.ray(r) else { continue };
            for (k, taps) in ray.iter().enumerate() {
                (sigma[k], rgb[k]) = Self::sample(scene, taps);
            }
            let (alpha, c, _) = composite_ea(&sigma, &rgb);
            mask[r] = alpha;
            for k in 0..3 {
                color[k * n + r] = c[k];
            }
        }
        Ok(RenderedView {
            width: self.cfg.render_width,
            height: self.cfg.render_height,
            mask,
            color,
        })
    }

    /// Accumulates `dL/d density` and `dL/d color` (voxel layouts of
    /// [`SceneVolume`]) into `d_density` / `d_color`, given the upstream
    /// gradients of the rendered mask (`H x W`) and color (`3 x H x W`).
    pub fn backward_into(
        &self,
        scene: &SceneVolume,
        d_mask: &[f64],
        d_rgb: &[f64],
        d_density: &mut [f64],
        d_color: &mut [f64],
    ) -> Result<()> {
        self.check_scene(scene)?;
        let n = self.cfg.pixels();
        if d_mask.len() != n || d_rgb.len() != 3 * n {
            return Err(Error::ShapeMismatch("upstream gradients do not match the render size".into()));
        }
        if d_density.len() != scene.density.len() || d_color.len() != scene.color.len() {
            return Err(Error::ShapeMismatch("gradient buffers do not match the scene".into()));
        }
        let s = self.cfg.samples_per_ray;
        let mut sigma = vec![0.0; s];
        let mut rgb = vec![[0.0; 3]; s];
        let mut trans = vec![0.0; s];
        let mut e = vec![0.0; s];
        for chunk_start in (0..n).step_by(self.cfg.chunk_size) {
            for r in chunk_start..(chunk_start + self.cfg.chunk_size).min(n) {
                let Some(ray) = self.ray(r) else { continue };
                let g_alpha = d_mask[r];
                let g_c = [d_rgb[r], d_rgb[n + r], d_rgb[2 * n + r]];
                if g_alpha == 0.0 && g_c == [0.0; 3] {
                    continue;
                }
                let mut t = 1.0;
                for (k, taps) in ray.iter().enumerate() {
                    (sigma[k], rgb[k]) = Self::sample(scene, taps);
                    trans[k] = t;
                    t *= 1.0 - sigma[k];
                    // dL/dw_k: alpha = sum w, color = sum w c
                    e[k] = g_alpha + g_c[0] * rgb[k][0] + g_c[1] * rgb[k][1] + g_c[2] * rgb[k][2];
                }
                // back-to-front: tail = sum_{i>k} e_i sigma_i prod_{k<j<i} (1 - sigma_j)
                let mut tail = 0.0;
                for k in (0..s).rev() {
                    let d_sigma = trans[k] * (e[k] - tail);
                    let w = sigma[k] * trans[k];
                    let d_c = [g_c[0] * w, g_c[1] * w, g_c[2] * w];
                    for (v, tw) in ray[k].iter() {
                        d_density[v] += d_sigma * tw;
                        for c in 0..3 {
                            d_color[3 * v + c] += d_c[c] * tw;
                        }
                    }
                    tail = e[k] * sigma[k] + (1.0 - sigma[k]) * tail;
                }
            }
        }
        Ok(())
    }
}

impl RayBundle {
    /// Renders every ray and immediately backpropagates a per-pixel loss.
    ///
    /// `pixel_grad(r, alpha, color)` returns `(dL/dalpha, dL/dcolor)` for ray
    /// `r`; gradients are accumulated into `d_density` / `d_color` in ray order.
    pub fn forward_backward<F>(
        &self,
        scene: &SceneVolume,
        mut pixel_grad: F,
        d_density: &mut [f64],
        d_color: &mut [f64],
    ) -> Result<RenderedView>
    where
        F: FnMut(usize, f64, [f64; 3]) -> (f64, [f64; 3]),
    {
        self.check_scene(scene)?;
        if d_density.len() != scene.density.len() || d_color.len() != scene.color.len() {
            return Err(Error::ShapeMismatch("gradient buffers do not match the scene".into()));
        }
        let n = self.cfg.pixels();
        let s = self.cfg.samples_per_ray;
        let mut mask = vec![0.0; n];
        let mut color = vec![0.0; 3 * n];
        let mut sigma = vec![0.0; s];
        let mut rgb = vec![[0.0; 3]; s];
        let mut trans = vec![0.0; s];
        for r in 0..n {
            let ray = self.ray(r);
            let (alpha, c) = match ray {
                None => (0.0, [0.0; 3]),
                Some(ray) => {
                    let mut t = 1.0;
                    let mut c = [0.0; 3];
                    for (k, taps) in ray.iter().enumerate() {
                        (sigma[k], rgb[k]) = Self::sample(scene, taps);
                        trans[k] = t;
                        let w = sigma[k] * t;
                        for ch in 0..3 {
                            c[ch] += w * rgb[k][ch];
                        }
                        t *= 1.0 - sigma[k];
                    }
                    (1.0 - t, c)
                }
            };
            mask[r] = alpha;
            for ch in 0..3 {
                color[ch * n + r] = c[ch];
            }
            let (g_alpha, g_c) = pixel_grad(r, alpha, c);
            let Some(ray) = ray else { continue };
            if g_alpha == 0.0 && g_c == [0.0; 3] {
                continue;
            }
            let mut tail = 0.0;
            for k in (0..s).rev() {
                let e = g_alpha + g_c[0] * rgb[k][0] + g_c[1] * rgb[k][1] + g_c[2] * rgb[k][2];
                let d_sigma = trans[k] * (e - tail);
                let w = sigma[k] * trans[k];
                for (v, tw) in ray[k].iter() {
                    d_density[v] += d_sigma * tw;
                    for ch in 0..3 {
                        d_color[3 * v + ch] += g_c[ch] * w * tw;
                    }
                }
                tail = e * sigma[k] + (1.0 - sigma[k]) * tail;
            }
        }
        Ok(RenderedView {
            width: self.cfg.render_width,
            height: self.cfg.render_height,
            mask,
            color,
        })
    }
}

pub fn render_view(scene: &SceneVolume, camera: &CameraModel, cfg: &RenderConfig) -> Result<RenderedView> {
    RayBundle::new(&scene.grid, camera, cfg)?.render(scene)
}

/// Exact gradients of `<d_mask, mask> + <d_rgb, color>` with respect to the
/// scene density and color.
pub fn render_backward(
    scene: &SceneVolume,
    camera: &CameraModel,
    cfg: &RenderConfig,
    d_mask: &[f64],
    d_rgb: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let bundle = RayBundle::new(&scene.grid, camera, cfg)?;
    let mut dd = vec![0.0; scene.density.len()];
    let mut dc = vec![0.0; scene.color.len()];
    bundle.backward_into(scene, d_mask, d_rgb, &mut dd, &mut dc)?;
    Ok((dd, dc))
}
