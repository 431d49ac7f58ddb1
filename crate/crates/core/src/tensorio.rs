//! File formats shared by every pipeline stage.
//!
//! * VPT1 tensors: `b"VPT1"`, `u8` dtype code (0 = f32), `u8` ndim,
//!   `ndim` little-endian `u32` dims, then the little-endian f32 payload in
//!   row-major order (last dim fastest).
//! * Calibration JSON:
//!   `{"area": [xmin,ymin,xmax,ymax], "cameras": [{"id", "width", "height", "K", "R", "t"}]}`
//!   with `K` and `R` as 9 row-major floats.
//! * Binary PGM (P5) / PPM (P6) previews, 8 bits per sample.
//!
//! A dataset directory holds `calibration.json`, `features/view_{n}.vpt`
//! (H'xW'xD), `semantic/view_{n}.vpt` (H'xW'), `images/view_{n}.vpt` (HxWx3)
//! and optionally `gt_positions.vpt` (Gx2). `n` is the 0-based position of
//! the camera in the calibration file.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{nearest_rotation, orthonormality_error, CameraModel};

const MAGIC: &[u8; 4] = b"VPT1";
const DTYPE_F32: u8 = 0;
const MAX_NDIM: usize = 4;

/// Dense row-major f32 tensor of rank 1 to 4.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.is_empty() || shape.len() > MAX_NDIM {
            return Err(Error::DimOverflow(format!("rank {} not in 1..=4", shape.len())));
        }
        let n = checked_len(&shape)?;
        if n != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let n = checked_len(&shape)?;
        Self::new(shape, vec![0.0; n])
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(6 + 4 * self.shape.len() + 4 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.push(DTYPE_F32);
        out.push(self.shape.len() as u8);
        for &d in &self.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &x in &self.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 6 || &bytes[..4] != MAGIC {
            return Err(Error::BadMagic);
        }
        if bytes[4] != DTYPE_F32 {
            return Err(Error::UnsupportedDtype(bytes[4]));
        }
        let ndim = bytes[5] as usize;
        if ndim == 0 || ndim > MAX_NDIM {
            return Err(Error::DimOverflow(format!("rank {ndim} not in 1..=4")));
        }
        let header = 6 + 4 * ndim;
        if bytes.len() < header {
            return Err(Error::TruncatedPayload {
                expected: header,
                found: bytes.len(),
            });
        }
        let shape: Vec<usize> = bytes[6..header]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
            .collect();
        let count = checked_len(&shape)?;
        let expected = count
            .checked_mul(4)
            .and_then(|n| n.checked_add(header))
            .ok_or_else(|| Error::DimOverflow(format!("{shape:?}")))?;
        if bytes.len() < expected {
            return Err(Error::TruncatedPayload {
                expected,
                found: bytes.len(),
            });
        }
        if bytes.len() > expected {
            return Err(Error::TrailingBytes {
                expected,
                found: bytes.len(),
            });
        }
        let mut data = Vec::with_capacity(count);
        for (i, c) in bytes[header..].chunks_exact(4).enumerate() {
            let x = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
            if !x.is_finite() {
                return Err(Error::NonFinite(i));
            }
            data.push(x);
        }
        Ok(Self { shape, data })
    }
}

fn checked_len(shape: &[usize]) -> Result<usize> {
    let mut n: usize = 1;
    for &d in shape {
        if d > u32::MAX as usize {
            return Err(Error::DimOverflow(format!("dimension {d} exceeds u32")));
        }
        n = n
            .checked_mul(d)
            .ok_or_else(|| Error::DimOverflow(format!("{shape:?}")))?;
    }
    // payload must stay addressable as bytes
    n.checked_mul(4)
        .ok_or_else(|| Error::DimOverflow(format!("{shape:?}")))?;
    Ok(n)
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    Tensor::from_bytes(&read_file(path.as_ref())?)
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_tensor(path: impl AsRef<Path>, tensor: &Tensor) -> Result<()> {
    if let Some(i) = tensor.data.iter().position(|x| !x.is_finite()) {
        return Err(Error::NonFinite(i));
    }
    write_bytes(path.as_ref(), &tensor.to_bytes())
}

pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// World-frame area `[xmin, ymin, xmax, ymax]` in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Area {
    pub xmin: f64,
    pub ymin: f64,
    pub xmax: f64,
    pub ymax: f64,
}

impl Area {
    pub fn width(&self) -> f64 {
        self.xmax - self.xmin
    }

    pub fn depth(&self) -> f64 {
        self.ymax - self.ymin
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationSet {
    pub area: Area,
    pub cameras: Vec<CameraModel>,
}

impl CalibrationSet {
    /// Multi-view pipelines need at least two cameras.
    pub fn require_multiview(&self) -> Result<()> {
        if self.cameras.len() < 2 {
            return Err(Error::Schema(format!(
                "multi-view calibration needs at least 2 cameras, found {}",
                self.cameras.len()
            )));
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CalibrationJson {
    area: [f64; 4],
    cameras: Vec<CameraJson>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CameraJson {
    id: i64,
    width: u32,
    height: u32,
    #[serde(rename = "K")]
    k: [f64; 9],
    #[serde(rename = "R")]
    r: [f64; 9],
    t: [f64; 3],
}

const REPAIR_WARN_TOL: f64 = 1e-4;
const REPAIR_REJECT_TOL: f64 = 1e-2;

pub fn parse_calibration(text: &str) -> Result<CalibrationSet> {
    let doc: CalibrationJson =
        serde_json::from_str(text).map_err(|e| Error::Schema(e.to_string()))?;
    let [xmin, ymin, xmax, ymax] = doc.area;
    if !(xmin < xmax && ymin < ymax) || !doc.area.iter().all(|x| x.is_finite()) {
        return Err(Error::Schema(format!("degenerate area {:?}", doc.area)));
    }
    if doc.cameras.is_empty() {
        return Err(Error::Schema("no cameras".into()));
    }
    let mut cameras = Vec::with_capacity(doc.cameras.len());
    for cam in &doc.cameras {
        if cameras.iter().any(|c: &CameraModel| c.view_id == cam.id) {
            return Err(Error::Schema(format!("duplicate camera id {}", cam.id)));
        }
        let k = Matrix3::from_row_slice(&cam.k);
        let mut r = Matrix3::from_row_slice(&cam.r);
        if !r.iter().all(|x| x.is_finite()) {
            return Err(Error::Schema(format!("camera {}: non-finite rotation", cam.id)));
        }
        if r.determinant() <= 0.0 {
            return Err(Error::InvalidCamera(format!(
                "camera {}: rotation determinant {} is not +1",
                cam.id,
                r.determinant()
            )));
        }
        let err = orthonormality_error(&r).max((r.determinant() - 1.0).abs());
        if err >= REPAIR_REJECT_TOL {
            return Err(Error::InvalidCamera(format!(
                "camera {}: rotation is far from orthonormal ({err:.3e})",
                cam.id
            )));
        }
        if err >= 1e-6 {
            if err >= REPAIR_WARN_TOL {
                log::warn!(
                    "camera {}: rotation off by {err:.3e}, replaced by nearest rotation",
                    cam.id
                );
            }
            r = nearest_rotation(&r);
        }
        cameras.push(CameraModel::new(
            k,
            r,
            Vector3::from_row_slice(&cam.t),
            cam.width,
            cam.height,
            cam.id,
        )?);
    }
    Ok(CalibrationSet {
        area: Area { xmin, ymin, xmax, ymax },
        cameras,
    })
}

pub fn calibration_to_json(calib: &CalibrationSet) -> String {
    let row_major = |m: &Matrix3<f64>| {
        let mut out = [0.0; 9];
        for r in 0..3 {
            for c in 0..3 {
                out[3 * r + c] = m[(r, c)];
            }
        }
        out
    };
    let doc = CalibrationJson {
        area: [calib.area.xmin, calib.area.ymin, calib.area.xmax, calib.area.ymax],
        cameras: calib
            .cameras
            .iter()
            .map(|c| CameraJson {
                id: c.view_id,
                width: c.width,
                height: c.height,
                k: row_major(c.intrinsic()),
                r: row_major(c.rotation()),
                t: [c.translation().x, c.translation().y, c.translation().z],
            })
            .collect(),
    };
    serde_json::to_string_pretty(&doc).expect("calibration serializes")
}

pub fn read_calibration(path: impl AsRef<Path>) -> Result<CalibrationSet> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_calibration(&text)
}

pub fn write_calibration(path: impl AsRef<Path>, calib: &CalibrationSet) -> Result<()> {
    write_bytes(path.as_ref(), calibration_to_json(calib).as_bytes())
}

fn to_byte(x: f32) -> Result<u8> {
    if !(0.0..=1.0).contains(&x) {
        return Err(Error::OutOfRange(format!("image value {x} outside [0, 1]")));
    }
    Ok((255.0 * f64::from(x) + 0.5).floor() as u8)
}

/// Encodes a single-channel image as binary PGM (P5).
pub fn encode_pgm(width: usize, height: usize, values: &[f32]) -> Result<Vec<u8>> {
    if values.len() != width * height {
        return Err(Error::ShapeMismatch(format!(
            "{}x{} image needs {} values, got {}",
            width,
            height,
            width * height,
            values.len()
        )));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    for &x in values {
        out.push(to_byte(x)?);
    }
    Ok(out)
}

/// Encodes an interleaved RGB image (HxWx3) as binary PPM (P6).
pub fn encode_ppm(width: usize, height: usize, rgb: &[f32]) -> Result<Vec<u8>> {
    if rgb.len() != width * height * 3 {
        return Err(Error::ShapeMismatch(format!(
            "{}x{}x3 image needs {} values, got {}",
            width,
            height,
            width * height * 3,
            rgb.len()
        )));
    }
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    for &x in rgb {
        out.push(to_byte(x)?);
    }
    Ok(out)
}

pub fn write_image_pgm(path: impl AsRef<Path>, width: usize, height: usize, values: &[f32]) -> Result<()> {
    write_bytes(path.as_ref(), &encode_pgm(width, height, values)?)
}

pub fn write_image_ppm(path: impl AsRef<Path>, width: usize, height: usize, rgb: &[f32]) -> Result<()> {
    write_bytes(path.as_ref(), &encode_ppm(width, height, rgb)?)
}

/// Paths of a dataset directory.
#[derive(Debug, Clone)]
pub struct DatasetLayout {
    pub root: PathBuf,
}

impl DatasetLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    fn view_file(&self, dir: &str, n: usize, ext: &str) -> PathBuf {
        self.root.join(dir).join(format!("view_{n}.{ext}"))
    }

    pub fn calibration(&self) -> PathBuf {
        self.root.join("calibration.json")
    }
    pub fn features(&self, n: usize) -> PathBuf {
        self.view_file("features", n, "vpt")
    }
    pub fn semantic(&self, n: usize) -> PathBuf {
        self.view_file("semantic", n, "vpt")
    }
    pub fn image(&self, n: usize) -> PathBuf {
        self.view_file("images", n, "vpt")
    }
    pub fn gt_positions(&self) -> PathBuf {
        self.root.join("gt_positions.vpt")
    }
    pub fn gt_mask(&self, n: usize) -> PathBuf {
        self.view_file("gt_masks", n, "vpt")
    }
    pub fn mask(&self, n: usize) -> PathBuf {
        self.view_file("masks", n, "vpt")
    }
    pub fn mask_preview(&self, n: usize) -> PathBuf {
        self.view_file("masks", n, "pgm")
    }
    pub fn image_preview(&self, n: usize) -> PathBuf {
        self.view_file("images", n, "ppm")
    }
    pub fn render_mask_preview(&self, n: usize) -> PathBuf {
        self.view_file("renders", n, "pgm")
    }
    pub fn render_color_preview(&self, n: usize) -> PathBuf {
        self.view_file("renders", n, "ppm")
    }
    pub fn scene_density(&self) -> PathBuf {
        self.root.join("scene_density.vpt")
    }
    pub fn scene_color(&self) -> PathBuf {
        self.root.join("scene_color.vpt")
    }
    pub fn loss_history(&self) -> PathBuf {
        self.root.join("loss_history.csv")
    }
    pub fn detections(&self) -> PathBuf {
        self.root.join("detections.csv")
    }
    pub fn bev_preview(&self) -> PathBuf {
        self.root.join("bev.pgm")
    }
    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.json")
    }
    pub fn effective_config(&self) -> PathBuf {
        self.root.join("effective_config.json")
    }
}

/// Multi-view inputs held in memory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub calibration: CalibrationSet,
    /// Per view, `H' x W' x D`.
    pub features: Vec<Tensor>,
    /// Per view, `H' x W'`.
    pub semantic: Vec<Tensor>,
    /// Per view, `H x W x 3` in `[0, 1]`.
    pub images: Vec<Tensor>,
    /// `G x 2` ground-truth BEV positions.
    pub gt_positions: Option<Tensor>,
}

impl Dataset {
    pub fn num_views(&self) -> usize {
        self.calibration.cameras.len()
    }

    /// Checks that every per-view entry agrees on `N` and on resolutions.
    pub fn validate(&self) -> Result<()> {
        let n = self.num_views();
        if self.features.len() != n || self.semantic.len() != n || self.images.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "{} cameras but {} feature maps, {} semantic maps, {} images",
                n,
                self.features.len(),
                self.semantic.len(),
                self.images.len()
            )));
        }
        let mut feat_dim = None;
        for (i, cam) in self.calibration.cameras.iter().enumerate() {
            let (h, w) = (cam.height as usize, cam.width as usize);
            let img = &self.images[i];
            if img.shape != [h, w, 3] {
                return Err(Error::ShapeMismatch(format!(
                    "view {i}: image shape {:?}, expected [{h}, {w}, 3]",
                    img.shape
                )));
            }
            if img.data.iter().any(|x| !(0.0..=1.0).contains(x)) {
                return Err(Error::OutOfRange(format!("view {i}: image values outside [0, 1]")));
            }
            let f = &self.features[i];
            if f.shape.len() != 3 {
                return Err(Error::ShapeMismatch(format!("view {i}: features must be H'xW'xD")));
            }
            let (fh, fw, d) = (f.shape[0], f.shape[1], f.shape[2]);
            if fh == 0 || fw == 0 || h % fh != 0 || w % fw != 0 {
                return Err(Error::ShapeMismatch(format!(
                    "view {i}: feature resolution {fh}x{fw} does not divide image {h}x{w}"
                )));
            }
            if *feat_dim.get_or_insert(d) != d {
                return Err(Error::ShapeMismatch(format!("view {i}: feature dim {d} differs")));
            }
            if self.semantic[i].shape != [fh, fw] {
                return Err(Error::ShapeMismatch(format!(
                    "view {i}: semantic shape {:?}, expected [{fh}, {fw}]",
                    self.semantic[i].shape
                )));
            }
        }
        if let Some(gt) = &self.gt_positions {
            if gt.shape.len() != 2 || gt.shape[1] != 2 {
                return Err(Error::ShapeMismatch(format!("gt positions shape {:?}", gt.shape)));
            }
        }
        Ok(())
    }

    pub fn load(root: impl AsRef<Path>) -> Result<Self> {
        let layout = DatasetLayout::new(root.as_ref());
        let calibration = read_calibration(layout.calibration())?;
        let n = calibration.cameras.len();
        let mut features = Vec::with_capacity(n);
        let mut semantic = Vec::with_capacity(n);
        let mut images = Vec::with_capacity(n);
        for i in 0..n {
            features.push(read_tensor(layout.features(i))?);
            semantic.push(read_tensor(layout.semantic(i))?);
            images.push(read_tensor(layout.image(i))?);
        }
        let gt_path = layout.gt_positions();
        let gt_positions = if gt_path.exists() {
            Some(read_tensor(gt_path)?)
        } else {
            None
        };
        let ds = Self {
            calibration,
            features,
            semantic,
            images,
            gt_positions,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn save(&self, root: impl AsRef<Path>) -> Result<()> {
        self.validate()?;
        let layout = DatasetLayout::new(root.as_ref());
        write_calibration(layout.calibration(), &self.calibration)?;
        for i in 0..self.num_views() {
            write_tensor(layout.features(i), &self.features[i])?;
            write_tensor(layout.semantic(i), &self.semantic[i])?;
            write_tensor(layout.image(i), &self.images[i])?;
            let img = &self.images[i];
            write_image_ppm(layout.image_preview(i), img.shape[1], img.shape[0], &img.data)?;
        }
        if let Some(gt) = &self.gt_positions {
            write_tensor(layout.gt_positions(), gt)?;
        }
        Ok(())
    }
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    write_bytes(path, text.as_bytes())
}
