//! Coarse-to-fine dense matching between feature grids, plus sparse
//! keypoint verification through a fundamental-matrix RANSAC.

use nalgebra::{DMatrix, Matrix3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::featurizer::{FeatureMap, Keypoints};

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct MatchConfig {
    /// Softmax temperature tau.
    pub temperature: f64,
    /// Mutual-confidence floor theta.
    pub confidence_threshold: f64,
    /// Fine window side length, odd.
    pub window: usize,
    /// Sharpening applied to the center-row distribution before the
    /// sub-cell refinement (raised to 1/subpixel_temperature). The
    /// per-axis parabolic vertex used for that refinement is invariant
    /// to it, so it only matters for downstream consumers of the
    /// distribution itself.
    pub subpixel_temperature: f64,
}

impl Default for MatchConfig {
    fn default() -> Self {
        MatchConfig {
            temperature: 0.1,
            confidence_threshold: 0.2,
            window: 5,
            subpixel_temperature: 1.0,
        }
    }
}

impl MatchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::InvalidConfig("temperature must be positive".into()));
        }
        if !(self.subpixel_temperature > 0.0) {
            return Err(Error::InvalidConfig(
                "subpixel_temperature must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.confidence_threshold) {
            return Err(Error::InvalidConfig(
                "confidence threshold outside [0, 1]".into(),
            ));
        }
        if self.window == 0 || self.window % 2 == 0 {
            return Err(Error::InvalidConfig("window must be odd".into()));
        }
        Ok(())
    }
}

/// Cell-level match between two coarse grids.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellMatch {
    pub q: (usize, usize),
    pub r: (usize, usize),
    pub confidence: f64,
}

/// Refined pixel-level correspondence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub query_px: Vector2<f64>,
    pub ref_px: Vector2<f64>,
    pub confidence: f64,
}

fn softmax_inplace(row: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Dual-softmax matching with a mutual-nearest-neighbor filter.
/// Similarities are scaled by `1/tau`; a pair survives when it is the
/// argmax of both its row and its column and
/// `min(row softmax, column softmax) >= theta`.
pub fn coarse_match(
    fq: &FeatureMap,
    fr: &FeatureMap,
    cfg: &MatchConfig,
) -> Result<Vec<CellMatch>> {
    cfg.validate()?;
    if fq.channels != fr.channels {
        return Err(Error::DimMismatch(format!(
            "feature dims differ: {} vs {}",
            fq.channels, fr.channels
        )));
    }
    let nq = fq.cells();
    let nr = fr.cells();
    if nq == 0 || nr == 0 {
        return Ok(Vec::new());
    }
    let c = fq.channels;
    let inv_tau = 1.0 / cfg.temperature;

    let scores: Vec<f64> = (0..nq)
        .into_par_iter()
        .flat_map_iter(|i| {
            let qf = &fq.data[i * c..(i + 1) * c];
            (0..nr).map(move |j| {
                let rf = &fr.data[j * c..(j + 1) * c];
                qf.iter().zip(rf).map(|(a, b)| a * b).sum::<f64>() * inv_tau
            })
        })
        .collect();

    // Row argmax (first index wins ties) and row softmax value at it.
    let mut row_best = vec![0usize; nq];
    let mut row_prob = vec![0.0f64; nq];
    let mut rows: Vec<f64> = scores.clone();
    for i in 0..nq {
        let row = &mut rows[i * nr..(i + 1) * nr];
        let mut best = 0;
        for j in 1..nr {
            if row[j] > row[best] {
                best = j;
            }
        }
        softmax_inplace(row);
        row_best[i] = best;
        row_prob[i] = row[best];
    }

    let mut col_best = vec![0usize; nr];
    let mut col_prob = vec![0.0f64; nr];
    for j in 0..nr {
        let mut col: Vec<f64> = (0..nq).map(|i| scores[i * nr + j]).collect();
        let mut best = 0;
        for i in 1..nq {
            if col[i] > col[best] {
                best = i;
            }
        }
        softmax_inplace(&mut col);
        col_best[j] = best;
        col_prob[j] = col[best];
    }

    let mut out = Vec::new();
    for i in 0..nq {
        let j = row_best[i];
        if col_best[j] != i {
            continue;
        }
        let confidence = row_prob[i].min(col_prob[j]);
        if confidence < cfg.confidence_threshold {
            continue;
        }
        out.push(CellMatch {
            q: (i % fq.width, i / fq.width),
            r: (j % fr.width, j / fr.width),
            confidence,
        });
    }
    Ok(out)
}

/// Nearest fine-grid cell to a pixel location.
fn to_fine_cell(px: f64, stride: usize, cells: usize) -> usize {
    let g = (px + 0.5) / stride as f64 - 0.5;
    (g.round().max(0.0) as usize).min(cells - 1)
}

/// Window origin so that `[o, o + w)` contains `center` and stays in
/// `[0, n)`.
fn window_origin(center: usize, w: usize, n: usize) -> usize {
    center.saturating_sub(w / 2).min(n.saturating_sub(w))
}

/// Refines coarse cell matches to subpixel correspondences. A
/// `window x window` block around each match is compared in the fine
/// grids; the pairwise probability is the elementwise product of the
/// row and column softmaxes. The query center's row of that matrix
/// gives the reference distribution: matches whose peak falls below
/// theta are dropped, survivors place the reference position at the
/// per-axis parabolic vertex of the log-probability around the peak.
pub fn fine_match(
    coarse_q: &FeatureMap,
    coarse: &[CellMatch],
    fine_q: &FeatureMap,
    fine_r: &FeatureMap,
    cfg: &MatchConfig,
) -> Result<Vec<Correspondence>> {
    cfg.validate()?;
    if fine_q.channels != fine_r.channels {
        return Err(Error::DimMismatch(format!(
            "fine feature dims differ: {} vs {}",
            fine_q.channels, fine_r.channels
        )));
    }
    let w = cfg.window;
    if fine_q.width < w || fine_q.height < w || fine_r.width < w || fine_r.height < w {
        return Err(Error::InvalidInput(
            "fine grids smaller than the match window".into(),
        ));
    }
    let n = w * w;
    let inv_tau = 1.0 / cfg.temperature;

    let refine = |m: &CellMatch| -> Option<Correspondence> {
        let qc_px = coarse_q.cell_center(m.q.0, m.q.1);
        let rc_px = coarse_q.cell_center(m.r.0, m.r.1);
        let qcx = to_fine_cell(qc_px.x, fine_q.stride, fine_q.width);
        let qcy = to_fine_cell(qc_px.y, fine_q.stride, fine_q.height);
        let rcx = to_fine_cell(rc_px.x, fine_r.stride, fine_r.width);
        let rcy = to_fine_cell(rc_px.y, fine_r.stride, fine_r.height);
        let qx0 = window_origin(qcx, w, fine_q.width);
        let qy0 = window_origin(qcy, w, fine_q.height);
        let rx0 = window_origin(rcx, w, fine_r.width);
        let ry0 = window_origin(rcy, w, fine_r.height);

        let mut s = vec![0.0f64; n * n];
        for a in 0..n {
            let (ax, ay) = (qx0 + a % w, qy0 + a / w);
            let qf = fine_q.cell(ax, ay);
            for b in 0..n {
                let (bx, by) = (rx0 + b % w, ry0 + b / w);
                let rf = fine_r.cell(bx, by);
                s[a * n + b] = qf.iter().zip(rf).map(|(x, y)| x * y).sum::<f64>() * inv_tau;
            }
        }
        let mut p_row = s.clone();
        for a in 0..n {
            softmax_inplace(&mut p_row[a * n..(a + 1) * n]);
        }
        let mut p = p_row;
        for b in 0..n {
            let mut col: Vec<f64> = (0..n).map(|a| s[a * n + b]).collect();
            softmax_inplace(&mut col);
            for a in 0..n {
                p[a * n + b] *= col[a];
            }
        }

        let center = (qcy - qy0) * w + (qcx - qx0);
        let row = &p[center * n..(center + 1) * n];
        let peak = row.iter().cloned().fold(0.0, f64::max);
        if peak < cfg.confidence_threshold {
            return None;
        }
        // Sub-cell refinement at the peak: per-axis parabolic vertex of
        // the log-probability (equivalently the sharpened distribution;
        // the exponent cancels in the vertex). A full-window expectation
        // instead drags the estimate toward whatever similar texture
        // sits elsewhere in the window, and shrinks genuine sub-cell
        // shifts toward zero.
        let sharpen = 1.0 / cfg.subpixel_temperature;
        let best = (0..n).max_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap())?;
        let (bx, by) = (best % w, best / w);
        let vertex = |lo: Option<f64>, hi: Option<f64>| -> f64 {
            let (l, r) = match (lo, hi) {
                (Some(l), Some(r)) => (
                    sharpen * (l.max(f64::MIN_POSITIVE) / peak).ln(),
                    sharpen * (r.max(f64::MIN_POSITIVE) / peak).ln(),
                ),
                _ => return 0.0,
            };
            let denom = l + r;
            if denom >= -1e-12 {
                return 0.0;
            }
            (0.5 * (l - r) / denom).clamp(-1.0, 1.0)
        };
        let at = |wx: isize, wy: isize| -> Option<f64> {
            if wx < 0 || wy < 0 || wx >= w as isize || wy >= w as isize {
                None
            } else {
                Some(row[wy as usize * w + wx as usize])
            }
        };
        let dx = vertex(at(bx as isize - 1, by as isize), at(bx as isize + 1, by as isize));
        let dy = vertex(at(bx as isize, by as isize - 1), at(bx as isize, by as isize + 1));
        let ex = (rx0 + bx) as f64 + dx;
        let ey = (ry0 + by) as f64 + dy;
        let s_r = fine_r.stride as f64;
        Some(Correspondence {
            query_px: fine_q.cell_center(qcx, qcy),
            ref_px: Vector2::new((ex + 0.5) * s_r - 0.5, (ey + 0.5) * s_r - 0.5),
            confidence: m.confidence.min(peak),
        })
    };

    Ok(coarse.par_iter().filter_map(refine).collect())
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct VerifyConfig {
    /// Lowe ratio for descriptor matching.
    pub ratio: f64,
    /// Sampson distance inlier threshold, px.
    pub sampson_px: f64,
    pub iterations: usize,
    pub seed: u64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig {
            ratio: 0.8,
            sampson_px: 2.0,
            iterations: 1000,
            seed: 42,
        }
    }
}

fn descriptor_matches(query: &Keypoints, reference: &Keypoints, ratio: f64) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (qi, q) in query.iter().enumerate() {
        let mut best = f64::INFINITY;
        let mut second = f64::INFINITY;
        let mut best_j = usize::MAX;
        for (rj, r) in reference.iter().enumerate() {
            let d: f64 = q
                .descriptor
                .iter()
                .zip(&r.descriptor)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            if d < best {
                second = best;
                best = d;
                best_j = rj;
            } else if d < second {
                second = d;
            }
        }
        if best_j != usize::MAX && best.sqrt() < ratio * second.sqrt() {
            out.push((qi, best_j));
        }
    }
    out
}

/// Normalized eight-point fit on the given correspondences.
fn fit_fundamental(pairs: &[(Vector2<f64>, Vector2<f64>)]) -> Option<Matrix3<f64>> {
    let normalize = |pts: &[Vector2<f64>]| {
        let c = pts.iter().sum::<Vector2<f64>>() / pts.len() as f64;
        let mean_d = pts.iter().map(|p| (p - c).norm()).sum::<f64>() / pts.len() as f64;
        let s = if mean_d > 1e-12 {
            std::f64::consts::SQRT_2 / mean_d
        } else {
            1.0
        };
        Matrix3::new(s, 0.0, -s * c.x, 0.0, s, -s * c.y, 0.0, 0.0, 1.0)
    };
    let tq = normalize(&pairs.iter().map(|p| p.0).collect::<Vec<_>>());
    let tr = normalize(&pairs.iter().map(|p| p.1).collect::<Vec<_>>());

    let mut a = DMatrix::zeros(pairs.len(), 9);
    for (row, (q, r)) in pairs.iter().enumerate() {
        let qh = tq * Vector3::new(q.x, q.y, 1.0);
        let rh = tr * Vector3::new(r.x, r.y, 1.0);
        a.set_row(
            row,
            &nalgebra::RowDVector::from_vec(vec![
                rh.x * qh.x,
                rh.x * qh.y,
                rh.x,
                rh.y * qh.x,
                rh.y * qh.y,
                rh.y,
                qh.x,
                qh.y,
                1.0,
            ])
            .into(),
        );
    }
    let svd = a.svd(false, true);
    let vt = svd.v_t?;
    let f_vec = vt.row(vt.nrows() - 1);
    let f_hat = Matrix3::new(
        f_vec[0], f_vec[1], f_vec[2], f_vec[3], f_vec[4], f_vec[5], f_vec[6], f_vec[7], f_vec[8],
    );
    // rank-2 enforcement
    let mut svd3 = f_hat.svd(true, true);
    svd3.singular_values[2] = 0.0;
    let f2 = svd3.recompose().ok()?;
    Some(tr.transpose() * f2 * tq)
}

/// Squared Sampson distance of a correspondence under `f` (maps query
/// homogeneous points to reference epipolar lines).
fn sampson_sq(f: &Matrix3<f64>, q: &Vector2<f64>, r: &Vector2<f64>) -> f64 {
    let qh = Vector3::new(q.x, q.y, 1.0);
    let rh = Vector3::new(r.x, r.y, 1.0);
    let fq = f * qh;
    let ftr = f.transpose() * rh;
    let e = rh.dot(&fq);
    let denom = fq.x * fq.x + fq.y * fq.y + ftr.x * ftr.x + ftr.y * ftr.y;
    if denom < 1e-18 {
        return f64::INFINITY;
    }
    e * e / denom
}

/// Ratio-test descriptor matching followed by a fundamental-matrix
/// RANSAC; returns the best inlier count. Deterministic for a fixed
/// seed.
pub fn sparse_verify(query: &Keypoints, reference: &Keypoints, cfg: &VerifyConfig) -> usize {
    let matched = descriptor_matches(query, reference, cfg.ratio);
    if matched.len() < 8 {
        return 0;
    }
    let pairs: Vec<(Vector2<f64>, Vector2<f64>)> = matched
        .iter()
        .map(|&(qi, rj)| (query[qi].pos, reference[rj].pos))
        .collect();
    let thresh_sq = cfg.sampson_px * cfg.sampson_px;
    let count_inliers = |f: &Matrix3<f64>| {
        pairs
            .iter()
            .filter(|(q, r)| sampson_sq(f, q, r) <= thresh_sq)
            .count()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best = 0usize;
    if pairs.len() == 8 {
        if let Some(f) = fit_fundamental(&pairs) {
            best = count_inliers(&f);
        }
        return best;
    }
    for _ in 0..cfg.iterations {
        let mut sample: Vec<(Vector2<f64>, Vector2<f64>)> = Vec::with_capacity(8);
        let mut taken = std::collections::HashSet::new();
        while sample.len() < 8 {
            let i = rng.gen_range(0..pairs.len());
            if taken.insert(i) {
                sample.push(pairs[i]);
            }
        }
        if let Some(f) = fit_fundamental(&sample) {
            best = best.max(count_inliers(&f));
        }
    }
    best
}
