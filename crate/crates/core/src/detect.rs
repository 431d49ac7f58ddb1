//! Bird's-eye-view inference from a fitted density volume, peak extraction,
//! and detection metrics against ground truth.

use std::cmp::Ordering;
use std::path::Path;

use pathfinding::kuhn_munkres::kuhn_munkres;
use pathfinding::matrix::Matrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensorio::{read_file, write_image_pgm, write_text, Tensor};
use crate::volume::GridSpec;

/// Column maxima of a density volume, indexed `ix * Y + iy`.
#[derive(Debug, Clone, PartialEq)]
pub struct BevMap {
    pub grid: GridSpec,
    pub values: Vec<f64>,
}

impl BevMap {
    pub fn get(&self, ix: usize, iy: usize) -> f64 {
        self.values[ix * self.grid.dims[1] + iy]
    }

    /// Top-down preview with `x` along image columns and `y` along rows.
    pub fn write_pgm(&self, path: impl AsRef<Path>) -> Result<()> {
        let [x, y, _] = self.grid.dims;
        let mut img = vec![0f32; x * y];
        for ix in 0..x {
            for iy in 0..y {
                img[iy * x + ix] = self.get(ix, iy).clamp(0.0, 1.0) as f32;
            }
        }
        write_image_pgm(path, x, y, &img)
    }
}

pub fn bev_project(density: &[f64], grid: &GridSpec) -> Result<BevMap> {
    if density.len() != grid.num_voxels() {
        return Err(Error::ShapeMismatch("density does not match the grid".into()));
    }
    let values = density
        .chunks_exact(grid.dims[2])
        .map(|col| col.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    Ok(BevMap { grid: *grid, values })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub x: f64,
    pub y: f64,
    pub score: f64,
}

fn dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - b.0).hypot(a.1 - b.1)
}

fn greedy_nms(mut dets: Vec<Detection>, radius: f64) -> Vec<Detection> {
    // stable sort keeps grid order among equal scores
    dets.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap_or(Ordering::Equal));
    let mut kept: Vec<Detection> = Vec::new();
    for d in dets {
        if kept.iter().all(|k| dist((k.x, k.y), (d.x, d.y)) >= radius) {
            kept.push(d);
        }
    }
    kept
}

/// Local maxima above `score_thr`, thinned by greedy non-maximum suppression
/// and refined to the score-weighted centroid of their above-threshold
/// 3x3 neighborhood.
pub fn extract_peaks(bev: &BevMap, score_thr: f64, nms_radius: f64) -> Result<Vec<Detection>> {
    if !(score_thr > 0.0 && score_thr < 1.0) {
        return Err(Error::InvalidArgument(format!("score threshold {score_thr} must lie in (0, 1)")));
    }
    if !(nms_radius > 0.0) {
        return Err(Error::InvalidArgument(format!("nms radius {nms_radius} must be positive")));
    }
    let [nx, ny, _] = bev.grid.dims;
    let neighbors = |ix: usize, iy: usize| {
        let xs = ix.saturating_sub(1)..(ix + 2).min(nx);
        xs.flat_map(move |x| (iy.saturating_sub(1)..(iy + 2).min(ny)).map(move |y| (x, y)))
    };
    let mut candidates = Vec::new();
    for ix in 0..nx {
        for iy in 0..ny {
            let s = bev.get(ix, iy);
            if s >= score_thr && neighbors(ix, iy).all(|(x, y)| bev.get(x, y) <= s) {
                let (x, y) = bev.grid.column_center(ix, iy);
                candidates.push((Detection { x, y, score: s }, ix, iy));
            }
        }
    }
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| candidates[b].0.score.partial_cmp(&candidates[a].0.score).unwrap_or(Ordering::Equal));
    let mut kept: Vec<(Detection, usize, usize)> = Vec::new();
    for i in order {
        let c = candidates[i];
        if kept.iter().all(|k| dist((k.0.x, k.0.y), (c.0.x, c.0.y)) >= nms_radius) {
            kept.push(c);
        }
    }
    let refined = kept
        .into_iter()
        .map(|(d, ix, iy)| {
            let (mut sx, mut sy, mut sw) = (0.0, 0.0, 0.0);
            for (x, y) in neighbors(ix, iy) {
                let w = bev.get(x, y);
                if w >= score_thr {
                    let (cx, cy) = bev.grid.column_center(x, y);
                    sx += w * cx;
                    sy += w * cy;
                    sw += w;
                }
            }
            Detection {
                x: sx / sw,
                y: sy / sw,
                score: d.score,
            }
        })
        .collect();
    // refinement can pull two survivors together
    Ok(greedy_nms(refined, nms_radius))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub moda: f64,
    pub modp: f64,
    pub precision: f64,
    pub recall: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub gt_count: usize,
}

/// Maximum-cardinality matching of detections to ground truth within
/// `radius`, with minimum total distance among maximum matchings. Returns
/// `(detection, gt, distance)` triples.
pub fn match_detections(dets: &[(f64, f64)], gt: &[(f64, f64)], radius: f64) -> Vec<(usize, usize, f64)> {
    if dets.is_empty() || gt.is_empty() {
        return Vec::new();
    }
    // integer micrometers; BIG makes one more match outweigh any distance saving
    let r_int = (radius * 1e6).round() as i64;
    let big = dets.len().min(gt.len()) as i64 * r_int + 1;
    let transpose = dets.len() > gt.len();
    let (rows, cols) = if transpose { (gt, dets) } else { (dets, gt) };
    let weights = Matrix::from_fn(rows.len(), cols.len(), |(i, j)| {
        let d = dist(rows[i], cols[j]);
        if d <= radius {
            big - ((d * 1e6).round() as i64).min(r_int)
        } else {
            0
        }
    });
    let (_, assign) = kuhn_munkres(&weights);
    let mut out: Vec<(usize, usize, f64)> = assign
        .into_iter()
        .enumerate()
        .filter(|&(i, j)| weights[(i, j)] > 0)
        .map(|(i, j)| {
            let (di, gi) = if transpose { (j, i) } else { (i, j) };
            (di, gi, dist(dets[di], gt[gi]))
        })
        .collect();
    out.sort_by_key(|m| m.0);
    out
}

pub fn match_and_score(dets: &[Detection], gt: &[(f64, f64)], radius: f64) -> Result<MetricsReport> {
    if !(radius > 0.0) {
        return Err(Error::InvalidArgument(format!("match radius {radius} must be positive")));
    }
    if gt.is_empty() && !dets.is_empty() {
        return Err(Error::UndefinedModa { fp: dets.len() });
    }
    let points: Vec<(f64, f64)> = dets.iter().map(|d| (d.x, d.y)).collect();
    let matches = match_detections(&points, gt, radius);
    let tp = matches.len();
    let fp = dets.len() - tp;
    let fn_ = gt.len() - tp;
    let ratio = |num: usize, den: usize| if den == 0 { 1.0 } else { num as f64 / den as f64 };
    Ok(MetricsReport {
        moda: if gt.is_empty() { 1.0 } else { 1.0 - (fp + fn_) as f64 / gt.len() as f64 },
        modp: if tp == 0 {
            0.0
        } else {
            matches.iter().map(|m| 1.0 - m.2 / radius).sum::<f64>() / tp as f64
        },
        precision: ratio(tp, tp + fp),
        recall: ratio(tp, tp + fn_),
        tp,
        fp,
        fn_,
        gt_count: gt.len(),
    })
}

/// Ground-truth positions from a `G x 2` tensor.
pub fn gt_points(t: &Tensor) -> Result<Vec<(f64, f64)>> {
    if t.shape.len() != 2 || t.shape[1] != 2 {
        return Err(Error::ShapeMismatch(format!("gt positions must be Gx2, got {:?}", t.shape)));
    }
    Ok(t.data.chunks_exact(2).map(|p| (f64::from(p[0]), f64::from(p[1]))).collect())
}

pub fn detections_csv(dets: &[Detection]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for d in dets {
        w.serialize(d).map_err(|e| Error::Schema(format!("detections: {e}")))?;
    }
    if dets.is_empty() {
        w.write_record(["x", "y", "score"]).map_err(|e| Error::Schema(format!("detections: {e}")))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Schema(format!("detections: {e}")))?;
    String::from_utf8(bytes).map_err(|e| Error::Schema(format!("detections: {e}")))
}

pub fn parse_detections(text: &str) -> Result<Vec<Detection>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let headers = r.headers().map_err(|e| Error::Schema(format!("detections.csv: {e}")))?;
    if headers != vec!["x", "y", "score"] {
        return Err(Error::Schema(format!("detections.csv header {headers:?}, expected x,y,score")));
    }
    r.deserialize()
        .enumerate()
        .map(|(i, row)| {
            let d: Detection = row.map_err(|e| Error::Schema(format!("detections.csv row {}: {e}", i + 1)))?;
            if !(d.x.is_finite() && d.y.is_finite() && d.score.is_finite()) {
                return Err(Error::Schema(format!("detections.csv row {}: non-finite value", i + 1)));
            }
            Ok(d)
        })
        .collect()
}

pub fn write_detections(path: impl AsRef<Path>, dets: &[Detection]) -> Result<()> {
    write_text(path.as_ref(), &detections_csv(dets)?)
}

pub fn read_detections(path: impl AsRef<Path>) -> Result<Vec<Detection>> {
    let bytes = read_file(path.as_ref())?;
    let text = String::from_utf8(bytes).map_err(|e| Error::Schema(format!("detections.csv: {e}")))?;
    parse_detections(&text)
}

pub fn write_metrics(path: impl AsRef<Path>, report: &MetricsReport) -> Result<()> {
    let text = serde_json::to_string_pretty(report).map_err(|e| Error::Schema(e.to_string()))?;
    write_text(path.as_ref(), &(text + "\n"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid(x: usize, y: usize, z: usize) -> GridSpec {
        GridSpec::new([0.0; 3], 0.25, [x, y, z]).unwrap()
    }

    #[test]
    fn bev_examples() {
        let g = grid(4, 5, 6);
        let bev = bev_project(&vec![0.0; g.num_voxels()], &g).unwrap();
        assert!(bev.values.iter().all(|&v| v == 0.0));
        let mut d = vec![0.0; g.num_voxels()];
        d[g.index(2, 3, 5)] = 0.9;
        let bev = bev_project(&d, &g).unwrap();
        for ix in 0..4 {
            for iy in 0..5 {
                assert_eq!(bev.get(ix, iy), if (ix, iy) == (2, 3) { 0.9 } else { 0.0 });
            }
        }
    }

    proptest! {
        #[test]
        fn bev_matches_triple_loop(seed in 0u64..500) {
            let g = grid(3, 4, 5);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d: Vec<f64> = (0..g.num_voxels()).map(|_| rng.random()).collect();
            let bev = bev_project(&d, &g).unwrap();
            for ix in 0..3 {
                for iy in 0..4 {
                    let mut m = 0.0f64;
                    for iz in 0..5 {
                        m = m.max(d[g.index(ix, iy, iz)]);
                    }
                    prop_assert_eq!(bev.get(ix, iy), m);
                }
            }
        }
    }

    fn blob_map(g: &GridSpec, blobs: &[(f64, f64, f64)], sigma: f64) -> BevMap {
        let [x, y, _] = g.dims;
        let mut values = vec![0.0; x * y];
        for ix in 0..x {
            for iy in 0..y {
                let (cx, cy) = g.column_center(ix, iy);
                values[ix * y + iy] = blobs
                    .iter()
                    .map(|&(bx, by, a)| a * (-((cx - bx).powi(2) + (cy - by).powi(2)) / (2.0 * sigma * sigma)).exp())
                    .fold(0.0, f64::max);
            }
        }
        BevMap { grid: *g, values }
    }

    #[test]
    fn single_blob_gives_one_detection_near_its_cell() {
        let g = grid(32, 32, 1);
        let (cx, cy) = g.column_center(10, 20);
        let bev = blob_map(&g, &[(cx, cy, 0.9)], 0.3);
        let dets = extract_peaks(&bev, 0.4, 0.5).unwrap();
        assert_eq!(dets.len(), 1);
        assert!((dets[0].x - cx).abs() <= 0.125 && (dets[0].y - cy).abs() <= 0.125);
        assert_eq!(dets[0].score, bev.get(10, 20));
    }

    #[test]
    fn separated_and_close_blobs() {
        let g = grid(32, 32, 1);
        let bev = blob_map(&g, &[(2.125, 4.125, 0.9), (5.125, 4.125, 0.8)], 0.2);
        assert_eq!(extract_peaks(&bev, 0.4, 0.5).unwrap().len(), 2);
        let mut values = vec![0.0; 32 * 32];
        values[8 * 32 + 8] = 0.9;
        values[8 * 32 + 10] = 0.7; // 0.5 m apart in y, still not neighbors
        let bev = BevMap { grid: g, values };
        let dets = extract_peaks(&bev, 0.4, 0.6).unwrap();
        assert_eq!(dets.len(), 1);
        assert_eq!(dets[0].score, 0.9);
    }

    proptest! {
        #[test]
        fn peaks_respect_their_invariants(seed in 0u64..200, radius in 0.2f64..1.5) {
            let g = grid(16, 16, 1);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let bev = BevMap { grid: g, values: (0..256).map(|_| rng.random()).collect() };
            let dets = extract_peaks(&bev, 0.4, radius).unwrap();
            for (i, a) in dets.iter().enumerate() {
                prop_assert!(a.score >= 0.4);
                for b in &dets[i + 1..] {
                    prop_assert!(dist((a.x, a.y), (b.x, b.y)) >= radius);
                }
            }
        }
    }

    #[test]
    fn metric_formula_cases() {
        let gt: Vec<(f64, f64)> = (0..3).map(|i| (i as f64 * 2.0, 0.0)).collect();
        let dets: Vec<Detection> = gt.iter().map(|&(x, y)| Detection { x, y, score: 0.9 }).collect();
        let m = match_and_score(&dets, &gt, 0.5).unwrap();
        assert_eq!((m.moda, m.modp, m.precision, m.recall), (1.0, 1.0, 1.0, 1.0));

        let gt: Vec<(f64, f64)> = (0..10).map(|i| (i as f64 * 2.0, 0.0)).collect();
        let mut dets: Vec<Detection> = gt[..8].iter().map(|&(x, y)| Detection { x, y, score: 0.9 }).collect();
        dets.push(Detection {
            x: 100.0,
            y: 100.0,
            score: 0.5,
        });
        let m = match_and_score(&dets, &gt, 0.5).unwrap();
        assert_eq!((m.tp, m.fp, m.fn_), (8, 1, 2));
        assert!((m.moda - 0.7).abs() < 1e-12);
        assert!((m.precision - 8.0 / 9.0).abs() < 1e-12);
        assert!((m.recall - 0.8).abs() < 1e-12);
        assert_eq!(m.modp, 1.0);
    }

    #[test]
    fn crossed_pair_is_matched_to_the_near_truth() {
        let gt = [(0.0, 0.0), (1.0, 0.0)];
        let dets = [(0.9, 0.0), (0.1, 0.0)];
        let m = match_detections(&dets, &gt, 0.5);
        assert_eq!(m.len(), 2);
        assert_eq!((m[0].0, m[0].1), (0, 1));
        assert_eq!((m[1].0, m[1].1), (1, 0));
    }

    #[test]
    fn empty_truth() {
        let d = [Detection { x: 0.0, y: 0.0, score: 0.5 }];
        assert!(matches!(match_and_score(&d, &[], 0.5), Err(Error::UndefinedModa { fp: 1 })));
        let m = match_and_score(&[], &[], 0.5).unwrap();
        assert_eq!((m.moda, m.precision, m.recall, m.tp), (1.0, 1.0, 1.0, 0));
        let m = match_and_score(&[], &[(0.0, 0.0)], 0.5).unwrap();
        assert_eq!((m.moda, m.modp, m.recall), (0.0, 0.0, 0.0));
    }

    /// Best (count, -cost) over all partial one-to-one matchings.
    fn exhaustive(dets: &[(f64, f64)], gt: &[(f64, f64)], r: f64) -> (usize, f64) {
        fn go(i: usize, dets: &[(f64, f64)], gt: &[(f64, f64)], used: &mut Vec<bool>, r: f64, acc: (usize, f64), best: &mut (usize, f64)) {
            if i == dets.len() {
                if acc.0 > best.0 || (acc.0 == best.0 && acc.1 < best.1) {
                    *best = acc;
                }
                return;
            }
            go(i + 1, dets, gt, used, r, acc, best);
            for j in 0..gt.len() {
                let d = dist(dets[i], gt[j]);
                if !used[j] && d <= r {
                    used[j] = true;
                    go(i + 1, dets, gt, used, r, (acc.0 + 1, acc.1 + d), best);
                    used[j] = false;
                }
            }
        }
        let mut best = (0, 0.0);
        go(0, dets, gt, &mut vec![false; gt.len()], r, (0, 0.0), &mut best);
        best
    }

    fn greedy(dets: &[(f64, f64)], gt: &[(f64, f64)], r: f64) -> (usize, f64) {
        let mut pairs = Vec::new();
        for (i, &d) in dets.iter().enumerate() {
            for (j, &g) in gt.iter().enumerate() {
                let e = dist(d, g);
                if e <= r {
                    pairs.push((e, i, j));
                }
            }
        }
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let (mut ud, mut ug) = (vec![false; dets.len()], vec![false; gt.len()]);
        let mut out = (0, 0.0);
        for (e, i, j) in pairs {
            if !ud[i] && !ug[j] {
                ud[i] = true;
                ug[j] = true;
                out = (out.0 + 1, out.1 + e);
            }
        }
        out
    }

    fn random_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<(f64, f64)> {
        (0..n).map(|_| (rng.random_range(0.0..2.0), rng.random_range(0.0..2.0))).collect()
    }

    #[test]
    fn hungarian_equals_exhaustive_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..300 {
            let (nd, ng) = (rng.random_range(0..=6), rng.random_range(0..=6));
            let dets = random_points(&mut rng, nd);
            let gt = random_points(&mut rng, ng);
            let m = match_detections(&dets, &gt, 0.6);
            let cost: f64 = m.iter().map(|x| x.2).sum();
            let (count, best) = exhaustive(&dets, &gt, 0.6);
            assert_eq!(m.len(), count);
            assert!((cost - best).abs() < 1e-5, "{cost} vs {best}");
        }
    }

    #[test]
    fn hungarian_never_loses_to_greedy() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let dets = random_points(&mut rng, 12);
            let gt = random_points(&mut rng, 10);
            let m = match_detections(&dets, &gt, 0.5);
            let cost: f64 = m.iter().map(|x| x.2).sum();
            let (gc, gcost) = greedy(&dets, &gt, 0.5);
            assert!(m.len() > gc || (m.len() == gc && cost <= gcost + 1e-5));
        }
    }

    proptest! {
        #[test]
        fn metrics_are_permutation_invariant(seed in 0u64..300) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let gt = random_points(&mut rng, 7);
            let mut dets: Vec<Detection> = random_points(&mut rng, 8)
                .into_iter()
                .map(|(x, y)| Detection { x, y, score: 0.5 })
                .collect();
            let a = match_and_score(&dets, &gt, 0.5).unwrap();
            let mut gt2 = gt.clone();
            gt2.shuffle(&mut rng);
            dets.shuffle(&mut rng);
            let b = match_and_score(&dets, &gt2, 0.5).unwrap();
            prop_assert_eq!((a.tp, a.fp, a.fn_), (b.tp, b.fp, b.fn_));
            prop_assert!((a.moda - b.moda).abs() < 1e-12);
            prop_assert!((a.modp - b.modp).abs() < 1e-5);
        }
    }

    #[test]
    fn csv_round_trip() {
        let dets = vec![
            Detection {
                x: 1.25,
                y: -0.5,
                score: 0.75,
            },
            Detection {
                x: 3.0,
                y: 2.0,
                score: 0.5,
            },
        ];
        let text = detections_csv(&dets).unwrap();
        assert!(text.starts_with("x,y,score\n"));
        assert_eq!(parse_detections(&text).unwrap(), dets);
        assert_eq!(parse_detections(&detections_csv(&[]).unwrap()).unwrap(), vec![]);
        assert!(parse_detections("a,b,c\n1,2,3\n").is_err());
        assert!(parse_detections("x,y,score\n1,2\n").is_err());
    }

    #[test]
    fn metrics_json_uses_fn_key() {
        let m = match_and_score(&[], &[(0.0, 0.0)], 0.5).unwrap();
        let v: serde_json::Value = serde_json::to_value(m).unwrap();
        assert_eq!(v["fn"], 1);
        for k in ["moda", "modp", "precision", "recall", "tp", "fp"] {
            assert!(v.get(k).is_some());
        }
    }
}
