//! Pose estimation against the splat map: depth lifting, P3P inside a
//! RANSAC loop, Gauss-Newton refinement, and the render-match-refine
//! relocalization driver.

use nalgebra::{
    DMatrix, Matrix3, Matrix6, UnitQuaternion, Vector2, Vector3, Vector6,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featurizer::{decode_features, encode_coarse_dim, encode_fine};
use crate::geometry::{project, CameraIntrinsics, Pose, PoseError};
use crate::image::{sample_bilinear, Image};
use crate::matcher::{coarse_match, fine_match, MatchConfig, VerifyConfig};
use crate::retrieval::{adaptive_retrieve, RetrievalConfig};
use crate::splat::{render, RenderChannels, RenderedView, SceneMap};

/// Rendered pixels need at least this much accumulated alpha before
/// their depth is trusted for lifting.
pub const LIFT_ALPHA_MIN: f64 = 0.5;

/// Back-projects a pixel of a rendered view into world space using the
/// alpha-normalized depth plane. Returns `None` where coverage or depth
/// is unusable.
pub fn lift(
    view: &RenderedView,
    k: &CameraIntrinsics,
    pose: &Pose,
    px: Vector2<f64>,
) -> Option<Vector3<f64>> {
    if px.x < 0.0
        || px.y < 0.0
        || px.x > (view.width - 1) as f64
        || px.y > (view.height - 1) as f64
    {
        return None;
    }
    let alpha = sample_bilinear(&view.alpha_acc, view.width, view.height, px.x, px.y);
    if alpha < LIFT_ALPHA_MIN {
        return None;
    }
    let depth = sample_bilinear(&view.depth, view.width, view.height, px.x, px.y);
    if depth <= 0.0 {
        return None;
    }
    let ray = Vector3::new((px.x - k.cx) / k.fx, (px.y - k.cy) / k.fy, 1.0);
    Some(pose.transform(&(ray * depth)))
}

/// Real roots of `c[0] + c[1] x + ... + c[n] x^n` via the eigenvalues
/// of the companion matrix.
fn polynomial_roots(coeffs: &[f64]) -> Vec<f64> {
    let mut c = coeffs.to_vec();
    while c.len() > 1 && c.last().map(|v| v.abs() < 1e-14) == Some(true) {
        c.pop();
    }
    let n = c.len() - 1;
    if n == 0 {
        return Vec::new();
    }
    let lead = c[n];
    let mut comp = DMatrix::<f64>::zeros(n, n);
    for i in 1..n {
        comp[(i, i - 1)] = 1.0;
    }
    for i in 0..n {
        comp[(i, n - 1)] = -c[i] / lead;
    }
    let eig = comp.complex_eigenvalues();
    eig.iter()
        .filter(|z| z.im.abs() < 1e-6 * (1.0 + z.re.abs()))
        .map(|z| z.re)
        .collect()
}

/// Rigid transform mapping `from` points onto `to` points (Kabsch).
fn rigid_from_points(from: &[Vector3<f64>; 3], to: &[Vector3<f64>; 3]) -> Option<Pose> {
    let cf = (from[0] + from[1] + from[2]) / 3.0;
    let ct = (to[0] + to[1] + to[2]) / 3.0;
    let mut h = Matrix3::zeros();
    for i in 0..3 {
        h += (from[i] - cf) * (to[i] - ct).transpose();
    }
    let svd = h.svd(true, true);
    let (u, v_t) = (svd.u?, svd.v_t?);
    let d = (v_t.transpose() * u.transpose()).determinant();
    let mut s = Matrix3::identity();
    s[(2, 2)] = d.signum();
    let r = v_t.transpose() * s * u.transpose();
    let t = ct - r * cf;
    Some(Pose::from_parts(
        UnitQuaternion::from_rotation_matrix(&nalgebra::Rotation3::from_matrix_unchecked(r)),
        t,
    ))
}

/// Grunert's P3P: camera poses (camera-to-world) consistent with three
/// world points and their image observations. Up to four solutions.
pub fn p3p(
    world: &[Vector3<f64>; 3],
    pixels: &[Vector2<f64>; 3],
    k: &CameraIntrinsics,
) -> Vec<Pose> {
    let f: Vec<Vector3<f64>> = pixels
        .iter()
        .map(|p| Vector3::new((p.x - k.cx) / k.fx, (p.y - k.cy) / k.fy, 1.0).normalize())
        .collect();
    let a2 = (world[1] - world[2]).norm_squared();
    let b2 = (world[0] - world[2]).norm_squared();
    let c2 = (world[0] - world[1]).norm_squared();
    if a2 < 1e-18 || b2 < 1e-18 || c2 < 1e-18 {
        return Vec::new();
    }
    let cos_a = f[1].dot(&f[2]);
    let cos_b = f[0].dot(&f[2]);
    let cos_g = f[0].dot(&f[1]);

    let ac = (a2 - c2) / b2;
    let apc = (a2 + c2) / b2;
    // quartic in v = s3/s1 (Grunert, via Haralick's formulation)
    let a4 = (ac - 1.0).powi(2) - 4.0 * (c2 / b2) * cos_a * cos_a;
    let a3 = 4.0
        * (ac * (1.0 - ac) * cos_b - (1.0 - apc) * cos_a * cos_g
            + 2.0 * (c2 / b2) * cos_a * cos_a * cos_b);
    let a2c = 2.0
        * (ac * ac - 1.0
            + 2.0 * ac * ac * cos_b * cos_b
            + 2.0 * ((b2 - c2) / b2) * cos_a * cos_a
            - 4.0 * apc * cos_a * cos_b * cos_g
            + 2.0 * ((b2 - a2) / b2) * cos_g * cos_g);
    let a1 = 4.0
        * (-ac * (1.0 + ac) * cos_b + 2.0 * (a2 / b2) * cos_g * cos_g * cos_b
            - (1.0 - apc) * cos_a * cos_g);
    let a0 = (1.0 + ac).powi(2) - 4.0 * (a2 / b2) * cos_g * cos_g;

    let mut poses = Vec::new();
    for v in polynomial_roots(&[a0, a1, a2c, a3, a4]) {
        if !(v.is_finite() && v > 0.0) {
            continue;
        }
        let denom = 1.0 + v * v - 2.0 * v * cos_b;
        if denom <= 1e-14 {
            continue;
        }
        let s1 = (b2 / denom).sqrt();
        let s3 = v * s1;
        // u = s2/s1 from the remaining law-of-cosines pair
        let u_den = 2.0 * (cos_g - v * cos_a);
        let u = if u_den.abs() > 1e-12 {
            ((-1.0 + ac) * v * v - 2.0 * ac * cos_b * v + 1.0 + ac) / u_den
        } else {
            // fall back to the c-side equation: u^2 - 2 u cos_g + 1 = c2/s1^2
            let disc = cos_g * cos_g - 1.0 + c2 / (s1 * s1);
            if disc < 0.0 {
                continue;
            }
            cos_g + disc.sqrt()
        };
        if !(u.is_finite() && u > 0.0) {
            continue;
        }
        let s2 = u * s1;
        let cam = [f[0] * s1, f[1] * s2, f[2] * s3];
        // world -> camera rigid fit, inverted to camera-to-world
        if let Some(w2c) = rigid_from_points(world, &cam) {
            poses.push(w2c.invert());
        }
    }
    poses
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PnPConfig {
    /// Reprojection inlier threshold, px.
    pub reproj_px: f64,
    pub max_iterations: usize,
    pub confidence: f64,
    pub min_inliers: usize,
    /// Gauss-Newton steps per refinement round.
    pub gn_steps: usize,
}

impl Default for PnPConfig {
    fn default() -> Self {
        PnPConfig {
            reproj_px: 1.0,
            max_iterations: 5000,
            confidence: 0.9999,
            min_inliers: 6,
            gn_steps: 10,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PnPResult {
    pub pose: Pose,
    pub inliers: Vec<usize>,
}

fn reproj_error_sq(
    pose: &Pose,
    k: &CameraIntrinsics,
    x: &Vector3<f64>,
    px: &Vector2<f64>,
) -> f64 {
    match project(k, pose, x) {
        Ok((p, _)) => (p - px).norm_squared(),
        Err(_) => f64::INFINITY,
    }
}

/// Gauss-Newton refinement of a camera-to-world pose over reprojection
/// residuals, with a simple step-rejection backoff.
pub fn refine_pose(
    pose: &Pose,
    world: &[Vector3<f64>],
    pixels: &[Vector2<f64>],
    k: &CameraIntrinsics,
    steps: usize,
) -> Pose {
    let mut w2c = pose.invert();
    let total_err = |w2c: &Pose| -> f64 {
        let c2w = w2c.invert();
        world
            .iter()
            .zip(pixels)
            .map(|(x, p)| reproj_error_sq(&c2w, k, x, p).min(1e12))
            .sum()
    };
    let mut err = total_err(&w2c);
    for _ in 0..steps {
        let mut h = Matrix6::<f64>::zeros();
        let mut b = Vector6::<f64>::zeros();
        let r_w2c = w2c.rotation_matrix();
        for (x, p) in world.iter().zip(pixels) {
            let xc = r_w2c * x + w2c.translation;
            if xc.z <= 1e-6 {
                continue;
            }
            let proj = Vector2::new(k.fx * xc.x / xc.z + k.cx, k.fy * xc.y / xc.z + k.cy);
            let res = proj - p;
            let z2 = xc.z * xc.z;
            // d proj / d xc
            let jp = nalgebra::Matrix2x3::new(
                k.fx / xc.z,
                0.0,
                -k.fx * xc.x / z2,
                0.0,
                k.fy / xc.z,
                -k.fy * xc.y / z2,
            );
            // left perturbation: xc' = exp(w^) xc + dt
            let mut jx = nalgebra::Matrix3x6::zeros();
            jx.fixed_view_mut::<3, 3>(0, 0).copy_from(&Matrix3::identity());
            jx.fixed_view_mut::<3, 3>(0, 3)
                .copy_from(&(-skew(&xc)));
            let j = jp * jx; // 2x6
            h += j.transpose() * j;
            b += j.transpose() * res;
        }
        let Some(delta) = h.lu().solve(&(-b)) else {
            break;
        };
        let dt = Vector3::new(delta[0], delta[1], delta[2]);
        let dw = Vector3::new(delta[3], delta[4], delta[5]);
        let dq = UnitQuaternion::from_scaled_axis(dw);
        let cand = Pose::from_parts(dq * w2c.rotation, dq * w2c.translation + dt);
        let cand_err = total_err(&cand);
        if cand_err.is_finite() && cand_err < err {
            w2c = cand;
            err = cand_err;
        } else {
            break;
        }
    }
    w2c.invert()
}

fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// P3P-RANSAC with adaptive termination followed by two rounds of
/// Gauss-Newton refinement on the inlier set.
pub fn estimate_pose(
    world: &[Vector3<f64>],
    pixels: &[Vector2<f64>],
    k: &CameraIntrinsics,
    cfg: &PnPConfig,
    seed: u64,
) -> Result<PnPResult> {
    let n = world.len();
    if n != pixels.len() {
        return Err(Error::DimMismatch(format!(
            "{n} world points vs {} pixels",
            pixels.len()
        )));
    }
    if n < 4 {
        return Err(Error::PoseEstimation(format!(
            "need at least 4 correspondences, got {n}"
        )));
    }
    let thresh_sq = cfg.reproj_px * cfg.reproj_px;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // MSAC scoring: truncated squared reprojection error, lower is better
    let msac = |pose: &Pose| -> f64 {
        world
            .iter()
            .zip(pixels)
            .map(|(x, px)| reproj_error_sq(pose, k, x, px).min(thresh_sq))
            .sum()
    };
    let mut best: Option<(f64, usize, Pose)> = None;
    let mut max_iters = cfg.max_iterations;
    let mut iter = 0usize;
    while iter < max_iters {
        iter += 1;
        let mut idx = [0usize; 3];
        idx[0] = rng.gen_range(0..n);
        loop {
            idx[1] = rng.gen_range(0..n);
            if idx[1] != idx[0] {
                break;
            }
        }
        loop {
            idx[2] = rng.gen_range(0..n);
            if idx[2] != idx[0] && idx[2] != idx[1] {
                break;
            }
        }
        let w = [world[idx[0]], world[idx[1]], world[idx[2]]];
        let p = [pixels[idx[0]], pixels[idx[1]], pixels[idx[2]]];
        for pose in p3p(&w, &p, k) {
            let count_inliers = |pose: &Pose| {
                world
                    .iter()
                    .zip(pixels)
                    .filter(|(x, px)| reproj_error_sq(pose, k, x, px) <= thresh_sq)
                    .count()
            };
            let mut score = msac(&pose);
            let mut pose = pose;
            // local optimization: a minimal fit on noisy points rarely
            // covers the full consensus set, so refine and re-score
            if best.as_ref().map(|(s, _, _)| score < *s).unwrap_or(true) {
                let idx: Vec<usize> = (0..n)
                    .filter(|&i| reproj_error_sq(&pose, k, &world[i], &pixels[i]) <= thresh_sq)
                    .collect();
                if idx.len() >= 3 {
                    let w: Vec<Vector3<f64>> = idx.iter().map(|&i| world[i]).collect();
                    let p: Vec<Vector2<f64>> = idx.iter().map(|&i| pixels[i]).collect();
                    let refined = refine_pose(&pose, &w, &p, k, 5);
                    let refined_score = msac(&refined);
                    if refined_score < score {
                        pose = refined;
                        score = refined_score;
                    }
                }
            }
            if best.as_ref().map(|(s, _, _)| score < *s).unwrap_or(true) {
                let inliers = count_inliers(&pose);
                best = Some((score, inliers, pose));
                let w_ratio = inliers as f64 / n as f64;
                let p_all = w_ratio.powi(3);
                if p_all > 1e-12 {
                    let denom = (1.0 - p_all).max(1e-12).ln();
                    let needed = ((1.0 - cfg.confidence).ln() / denom).ceil();
                    if needed.is_finite() && needed >= 0.0 {
                        max_iters = max_iters.min(iter + needed as usize);
                    }
                }
            }
        }
    }
    let Some((_, count, pose)) = best else {
        return Err(Error::PoseEstimation("no P3P solution found".into()));
    };
    if count < cfg.min_inliers {
        return Err(Error::PoseEstimation(format!(
            "only {count} inliers, need {}",
            cfg.min_inliers
        )));
    }
    // two refine/re-collect rounds
    let mut pose = pose;
    for _ in 0..2 {
        let inliers: Vec<usize> = (0..n)
            .filter(|&i| reproj_error_sq(&pose, k, &world[i], &pixels[i]) <= thresh_sq)
            .collect();
        if inliers.len() < cfg.min_inliers {
            return Err(Error::PoseEstimation(format!(
                "inlier set collapsed to {}",
                inliers.len()
            )));
        }
        let w: Vec<Vector3<f64>> = inliers.iter().map(|&i| world[i]).collect();
        let p: Vec<Vector2<f64>> = inliers.iter().map(|&i| pixels[i]).collect();
        pose = refine_pose(&pose, &w, &p, k, cfg.gn_steps);
    }
    let inliers: Vec<usize> = (0..n)
        .filter(|&i| reproj_error_sq(&pose, k, &world[i], &pixels[i]) <= thresh_sq)
        .collect();
    Ok(PnPResult { pose, inliers })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LocalizeConfig {
    pub retrieval: RetrievalConfig,
    /// Coarse-stage matching parameters.
    pub matching: MatchConfig,
    /// Fine-stage confidence floor (the window peak filter).
    pub fine_threshold: f64,
    pub verify: VerifyConfig,
    pub pnp: PnPConfig,
    /// Render-match-estimate rounds.
    pub refinements: usize,
    /// Flow gate of the first round, px: correspondences displaced
    /// further than this between query and render are discarded. The
    /// gate halves every round down to `flow_gate_floor_px`.
    pub flow_gate_px: f64,
    pub flow_gate_floor_px: f64,
    /// Encoder dimension used for dense matching.
    pub coarse_dim: usize,
    pub min_correspondences: usize,
    /// Refinement stops early once the median correspondence flow falls
    /// below this, px.
    pub converged_flow_px: f64,
}

impl Default for LocalizeConfig {
    fn default() -> Self {
        LocalizeConfig {
            retrieval: RetrievalConfig::default(),
            matching: MatchConfig {
                confidence_threshold: 0.1,
                window: 9,
                ..MatchConfig::default()
            },
            fine_threshold: 0.0,
            verify: VerifyConfig::default(),
            pnp: PnPConfig::default(),
            refinements: 4,
            flow_gate_px: 40.0,
            flow_gate_floor_px: 8.0,
            coarse_dim: crate::featurizer::COARSE_DIM,
            min_correspondences: 8,
            converged_flow_px: 0.5,
        }
    }
}

/// One render-match-estimate pass of the relocalization pipeline.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IterationRecord {
    /// Estimate after this pass; on a degenerate pass, the pose it
    /// started from.
    pub pose: Pose,
    /// Correspondences fed to the pose estimator.
    pub matches: usize,
    /// PnP inliers under the final pose of this pass.
    pub inliers: usize,
    /// Median query-to-render displacement of the used correspondences,
    /// px; near zero once the rendered view is aligned with the query.
    pub median_flow_px: f64,
    /// The pass produced too little evidence or PnP failed; the
    /// previous estimate was kept.
    pub degenerate: bool,
    /// Alignment was already below the convergence threshold, so no new
    /// render-match-estimate was run and the pose carries over.
    pub converged: bool,
    pub render_ms: f64,
    pub match_ms: f64,
    pub estimate_ms: f64,
}

/// Everything relocalization produced for one query: the retrieval
/// prior, the initial estimate, and one record per refinement round.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RelocalizationTrace {
    /// Pose of the retrieval stage (the reference view prior).
    pub retrieval_pose: Pose,
    pub retrieval_inliers: usize,
    pub used_fine_retrieval: bool,
    pub retrieval_ms: f64,
    /// Initial estimate from matching against the retrieval prior.
    pub initial: IterationRecord,
    /// The initial estimate failed and `initial.pose` is the retrieval
    /// pose itself.
    pub failed: bool,
    /// One entry per refinement round.
    pub refinements: Vec<IterationRecord>,
}

impl RelocalizationTrace {
    /// Final pose estimate: the last refinement, or the initial
    /// estimate when no refinement ran.
    pub fn pose(&self) -> &Pose {
        self.refinements.last().map(|r| &r.pose).unwrap_or(&self.initial.pose)
    }

    /// PnP inliers backing the final pose.
    pub fn inliers(&self) -> usize {
        self.refinements.last().map(|r| r.inliers).unwrap_or(self.initial.inliers)
    }
}

/// One render-match-estimate round from `prior`; `pose: None` means the
/// round produced too little evidence and the prior should be kept.
struct RoundOutcome {
    pose: Option<Pose>,
    matches: usize,
    inliers: usize,
    median_flow_px: f64,
    render_ms: f64,
    match_ms: f64,
    estimate_ms: f64,
}

fn refine_round(
    query: &Image,
    scene: &SceneMap,
    k: &CameraIntrinsics,
    prior: &Pose,
    cfg: &LocalizeConfig,
    flow_gate_px: f64,
    seed: u64,
) -> Result<RoundOutcome> {
    let mut out = RoundOutcome {
        pose: None,
        matches: 0,
        inliers: 0,
        median_flow_px: f64::INFINITY,
        render_ms: 0.0,
        match_ms: 0.0,
        estimate_ms: 0.0,
    };
    let t = std::time::Instant::now();
    let view = render(scene, k, prior, RenderChannels::all());
    out.render_ms = t.elapsed().as_secs_f64() * 1e3;
    let t = std::time::Instant::now();
    let query_coarse = encode_coarse_dim(query, cfg.coarse_dim)?;
    let rendered_coarse = decode_features(
        view.feature_low.as_ref().expect("feature plane rendered"),
        &scene.decoder,
        (query_coarse.height, query_coarse.width),
    )?;
    let cells = coarse_match(&query_coarse, &rendered_coarse, &cfg.matching)?;
    if cells.is_empty() {
        out.match_ms = t.elapsed().as_secs_f64() * 1e3;
        return Ok(out);
    }
    let rendered_img = view.color_image();
    let (fine_q, fine_r) = encode_fine(query, &rendered_img)?;
    let fine_cfg = MatchConfig {
        confidence_threshold: cfg.fine_threshold,
        ..cfg.matching.clone()
    };
    let corr = fine_match(&query_coarse, &cells, &fine_q, &fine_r, &fine_cfg)?;
    out.match_ms = t.elapsed().as_secs_f64() * 1e3;

    let mut world = Vec::with_capacity(corr.len());
    let mut pixels = Vec::with_capacity(corr.len());
    let mut flows = Vec::with_capacity(corr.len());
    // a correct match cannot move further than the render-to-query flow
    // allows; everything else is a matching outlier. A badly wrong
    // prior produces uniformly large flows, so when the gate starves
    // the estimator it is widened rather than giving up on the round.
    let mut gate = flow_gate_px;
    for attempt in 0..3 {
        if attempt > 0 {
            gate *= 2.0;
            world.clear();
            pixels.clear();
            flows.clear();
        }
        for c in &corr {
            let flow = (c.ref_px - c.query_px).norm();
            if flow > gate {
                continue;
            }
            if let Some(x) = lift(&view, k, prior, c.ref_px) {
                world.push(x);
                pixels.push(c.query_px);
                flows.push(flow);
            }
        }
        if world.len() >= cfg.min_correspondences {
            break;
        }
    }
    out.matches = world.len();
    if world.len() < cfg.min_correspondences {
        return Ok(out);
    }
    out.median_flow_px = lower_median(&mut flows);
    // early rounds carry coarse-quantized matches, so the inlier band
    // loosens with the gate and tightens as the pose settles
    let pnp = PnPConfig {
        reproj_px: cfg.pnp.reproj_px.max((gate / 10.0).min(4.0)),
        ..cfg.pnp.clone()
    };
    let t = std::time::Instant::now();
    match estimate_pose(&world, &pixels, k, &pnp, seed) {
        Ok(r) => {
            out.pose = Some(r.pose);
            out.inliers = r.inliers.len();
        }
        Err(Error::PoseEstimation(_)) => {}
        Err(e) => return Err(e),
    }
    out.estimate_ms = t.elapsed().as_secs_f64() * 1e3;
    Ok(out)
}

/// Full relocalization of one query image: adaptive retrieval for the
/// prior, an initial render-match-estimate pass against it, then
/// `refinements` further rounds from each successive estimate. A round
/// whose estimation fails keeps the previous pose and is marked
/// degenerate; once the median correspondence flow falls below the
/// convergence threshold, later rounds carry the pose over unchanged
/// rather than re-sampling matching noise.
pub fn relocalize(
    query: &Image,
    scene: &SceneMap,
    k: &CameraIntrinsics,
    cfg: &LocalizeConfig,
    seed: u64,
) -> Result<RelocalizationTrace> {
    let t = std::time::Instant::now();
    let prior = adaptive_retrieve(query, scene, k, &cfg.retrieval, &cfg.verify, seed)?;
    let retrieval_ms = t.elapsed().as_secs_f64() * 1e3;

    let record = |r: &RoundOutcome, fallback: &Pose, converged: bool| IterationRecord {
        pose: r.pose.unwrap_or(*fallback),
        matches: r.matches,
        inliers: r.inliers,
        median_flow_px: r.median_flow_px,
        degenerate: r.pose.is_none() && !converged,
        converged,
        render_ms: r.render_ms,
        match_ms: r.match_ms,
        estimate_ms: r.estimate_ms,
    };

    let mut gate = cfg.flow_gate_px;
    let r0 = refine_round(query, scene, k, &prior.pose, cfg, gate, seed)?;
    let initial = record(&r0, &prior.pose, false);
    let failed = r0.pose.is_none();
    let mut pose = initial.pose;
    let mut converged = !failed && r0.median_flow_px < cfg.converged_flow_px;
    let mut last = initial.clone();

    let mut refinements = Vec::with_capacity(cfg.refinements);
    for round in 0..cfg.refinements {
        if converged {
            refinements.push(IterationRecord {
                converged: true,
                degenerate: false,
                render_ms: 0.0,
                match_ms: 0.0,
                estimate_ms: 0.0,
                ..last.clone()
            });
            continue;
        }
        gate = (gate * 0.5).max(cfg.flow_gate_floor_px);
        let r = refine_round(query, scene, k, &pose, cfg, gate, seed ^ (round as u64 + 1))?;
        let rec = record(&r, &pose, false);
        pose = rec.pose;
        converged = r.pose.is_some() && r.median_flow_px < cfg.converged_flow_px;
        last = rec.clone();
        refinements.push(rec);
    }

    Ok(RelocalizationTrace {
        retrieval_pose: prior.pose,
        retrieval_inliers: prior.inliers,
        used_fine_retrieval: prior.used_fine_stage,
        retrieval_ms,
        initial,
        failed,
        refinements,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalSummary {
    pub count: usize,
    /// Lower median over the per-query translation errors, meters.
    pub median_translation_m: f64,
    /// Lower median over the per-query rotation errors, degrees.
    pub median_rotation_deg: f64,
    /// Recall at each `(meters, degrees)` threshold pair, both bounds
    /// inclusive.
    pub recall: Vec<RecallPoint>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecallPoint {
    pub translation_m: f64,
    pub rotation_deg: f64,
    pub recall: f64,
}

/// Lower median: the element at index `(n - 1) / 2` of the sorted list.
fn lower_median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    values[(values.len() - 1) / 2]
}

pub fn evaluate(errors: &[PoseError], thresholds: &[(f64, f64)]) -> Result<EvalSummary> {
    if errors.is_empty() {
        return Err(Error::InvalidInput("no errors to evaluate".into()));
    }
    let mut t: Vec<f64> = errors.iter().map(|e| e.translation_err).collect();
    let mut r: Vec<f64> = errors.iter().map(|e| e.rotation_err).collect();
    let recall = thresholds
        .iter()
        .map(|&(tm, rd)| {
            let hit = errors
                .iter()
                .filter(|e| e.translation_err <= tm && e.rotation_err <= rd)
                .count();
            RecallPoint {
                translation_m: tm,
                rotation_deg: rd,
                recall: hit as f64 / errors.len() as f64,
            }
        })
        .collect();
    Ok(EvalSummary {
        count: errors.len(),
        median_translation_m: lower_median(&mut t),
        median_rotation_deg: lower_median(&mut r),
        recall,
    })
}
