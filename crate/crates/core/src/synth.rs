//! Synthetic scene generation: a textured room of splats, a database
//! trajectory, query poses, and closed-form feature distillation so
//! rendered feature planes decode to the query encoder's output.

use nalgebra::{Matrix3, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featurizer::{
    coarse_projection_matrix, encode_coarse_dim, global_descriptor, FeatureDecoder,
};
use crate::geometry::{CameraIntrinsics, Pose};
use crate::retrieval::{perturb_pose, PerturbStrategy};
use crate::splat::{render, DatabaseEntry, GaussianPrimitive, RenderChannels, SceneMap};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_gaussians: usize,
    /// Room extents in meters, centered on the origin.
    pub box_size: [f64; 3],
    pub n_database: usize,
    pub n_queries: usize,
    /// Query perturbation bounds relative to the trajectory.
    pub query_offset_m: f64,
    pub query_offset_deg: f64,
    pub width: u32,
    pub height: u32,
    pub focal: f64,
    /// Rendered feature dimension C'.
    pub c_low: usize,
    /// Encoder feature dimension C the decoder lifts back to.
    pub c_coarse: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_gaussians: 5000,
            box_size: [10.0, 10.0, 3.0],
            n_database: 100,
            n_queries: 50,
            query_offset_m: 0.3,
            query_offset_deg: 10.0,
            width: 240,
            height: 180,
            focal: 130.0,
            c_low: 64,
            c_coarse: 256,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_gaussians == 0 || self.n_database == 0 {
            return Err(Error::InvalidConfig(
                "need at least one primitive and one database view".into(),
            ));
        }
        if self.box_size.iter().any(|&s| s <= 0.0) {
            return Err(Error::InvalidConfig("box extents must be positive".into()));
        }
        if self.c_low <= crate::featurizer::CELL_STATS_DIM {
            return Err(Error::InvalidConfig(
                "rendered feature dim must cover the encoder statistics range".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub scene: SceneMap,
    pub intrinsics: CameraIntrinsics,
    /// Ground-truth query poses with ids.
    pub queries: Vec<(String, Pose)>,
}

/// Smooth multi-frequency color texture over wall positions; gives the
/// renders enough structure for corners and matching.
/// Aperiodic speckle: hash of the quantized position. Periodic
/// patterns (stripes, sinusoids) let the matcher lock onto a
/// wallpaper-shifted alignment; independent per-splat colors cannot
/// alias.
fn texture_color(p: &Vector3<f64>) -> [f64; 3] {
    let mut h: u64 = 0x9e37_79b9_7f4a_7c15;
    for v in [p.x, p.y, p.z] {
        let q = (v * 1e3).round() as i64 as u64;
        h ^= q.wrapping_mul(0xbf58_476d_1ce4_e5b9);
        h = h.rotate_left(23).wrapping_mul(0x94d0_49bb_1331_11eb);
    }
    let mut out = [0.0; 3];
    for slot in out.iter_mut() {
        h ^= h >> 27;
        h = h.wrapping_mul(0x2545_f491_4f6c_dd1d);
        *slot = 0.05 + 0.9 * ((h >> 11) as f64 / (1u64 << 53) as f64);
    }
    out
}

/// Camera-to-world pose at `position` looking along `forward`
/// (world z up, image y pointing down).
pub fn look_at(position: Vector3<f64>, forward: Vector3<f64>) -> Pose {
    let f = forward.normalize();
    let up = Vector3::new(0.0, 0.0, 1.0);
    let mut right = f.cross(&up);
    if right.norm() < 1e-9 {
        right = Vector3::new(1.0, 0.0, 0.0);
    } else {
        right = right.normalize();
    }
    let down = f.cross(&right);
    let r = Matrix3::from_columns(&[right, down, f]);
    Pose::from_parts(
        UnitQuaternion::from_rotation_matrix(&nalgebra::Rotation3::from_matrix_unchecked(r)),
        position,
    )
}

fn wall_primitives(cfg: &SynthConfig, rng: &mut ChaCha8Rng, c_low: usize) -> Vec<GaussianPrimitive> {
    let [bx, by, bz] = cfg.box_size;
    let (hx, hy, hz) = (bx / 2.0, by / 2.0, bz / 2.0);
    // four walls plus floor and ceiling, weighted by area
    let areas = [by * bz, by * bz, bx * bz, bx * bz, bx * by, bx * by];
    let total: f64 = areas.iter().sum();
    let mut prims = Vec::with_capacity(cfg.n_gaussians);
    // disc radius tied to surface area per primitive so coverage stays
    // dense regardless of box size and budget
    let base = (total / cfg.n_gaussians as f64).sqrt();
    for _ in 0..cfg.n_gaussians {
        let mut pick = rng.gen::<f64>() * total;
        let mut wall = 0;
        for (i, a) in areas.iter().enumerate() {
            if pick < *a {
                wall = i;
                break;
            }
            pick -= a;
        }
        let u = rng.gen::<f64>();
        let v = rng.gen::<f64>();
        let (center, normal) = match wall {
            0 => (
                Vector3::new(hx, (u - 0.5) * by, (v - 0.5) * bz),
                Vector3::new(1.0, 0.0, 0.0),
            ),
            1 => (
                Vector3::new(-hx, (u - 0.5) * by, (v - 0.5) * bz),
                Vector3::new(-1.0, 0.0, 0.0),
            ),
            2 => (
                Vector3::new((u - 0.5) * bx, hy, (v - 0.5) * bz),
                Vector3::new(0.0, 1.0, 0.0),
            ),
            3 => (
                Vector3::new((u - 0.5) * bx, -hy, (v - 0.5) * bz),
                Vector3::new(0.0, -1.0, 0.0),
            ),
            4 => (
                Vector3::new((u - 0.5) * bx, (v - 0.5) * by, -hz),
                Vector3::new(0.0, 0.0, -1.0),
            ),
            _ => (
                Vector3::new((u - 0.5) * bx, (v - 0.5) * by, hz),
                Vector3::new(0.0, 0.0, 1.0),
            ),
        };
        // tangential disc, thin along the wall normal; most discs are
        // large for opaque coverage, the rest small and opaque to give
        // the texture sharp detail worth matching
        let rotation = UnitQuaternion::rotation_between(&Vector3::z(), &normal)
            .unwrap_or_else(UnitQuaternion::identity);
        let (tangential, opacity) = if rng.gen::<f64>() < 0.7 {
            (
                base * (0.5 + 0.3 * rng.gen::<f64>()),
                0.65 + 0.3 * rng.gen::<f64>(),
            )
        } else {
            (base * (0.2 + 0.15 * rng.gen::<f64>()), 0.95)
        };
        prims.push(GaussianPrimitive {
            center: center.map(|c| (c * 1e4).round() / 1e4),
            rotation,
            scale: Vector3::new(tangential, tangential * (0.8 + 0.4 * rng.gen::<f64>()), 0.01),
            opacity,
            color: texture_color(&center),
            feature: vec![0.0; c_low],
        });
    }
    // keep z-scale distinct from tangential after rounding below
    for p in prims.iter_mut() {
        p.scale = p.scale.map(|s| (s * 1e4).round() / 1e4);
        p.opacity = (p.opacity * 1e4).round() / 1e4;
    }
    prims
}

/// Ring trajectory inside the room looking outward at the walls.
fn trajectory(cfg: &SynthConfig, n: usize) -> Vec<Pose> {
    let [bx, by, _] = cfg.box_size;
    let radius = 0.22 * bx.min(by);
    (0..n)
        .map(|i| {
            let t = i as f64 / n as f64 * std::f64::consts::TAU;
            let pos = Vector3::new(radius * t.cos(), radius * t.sin(), 0.15 * (3.0 * t).sin());
            look_at(pos, Vector3::new(t.cos(), t.sin(), 0.08 * (2.0 * t).cos()))
        })
        .collect()
}

/// Center-tap decoder whose columns orthonormally span the range of the
/// coarse encoder projection, so `P^T t` is the exact preimage of any
/// encoder feature `t`.
pub fn distillation_decoder(c_coarse: usize, c_low: usize) -> FeatureDecoder {
    use crate::featurizer::CELL_STATS_DIM;
    let e = coarse_projection_matrix(c_coarse); // c_coarse x CELL_STATS_DIM, row-major
    let stats = CELL_STATS_DIM.min(c_low);
    // Gram-Schmidt over the first `stats` columns of E
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(stats);
    for j in 0..stats {
        let mut col: Vec<f64> = (0..c_coarse).map(|i| e[i * CELL_STATS_DIM + j]).collect();
        for b in &basis {
            let d: f64 = col.iter().zip(b).map(|(x, y)| x * y).sum();
            for (x, y) in col.iter_mut().zip(b) {
                *x -= d * y;
            }
        }
        let n = col.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-9 {
            col.iter_mut().for_each(|x| *x /= n);
            basis.push(col);
        }
    }
    // P is c_coarse x c_low, extra columns zero
    let mut p = vec![0.0f64; c_coarse * c_low];
    for (j, b) in basis.iter().enumerate() {
        for i in 0..c_coarse {
            p[i * c_low + j] = b[i];
        }
    }
    FeatureDecoder::from_center_tap(c_low, c_coarse, &p).expect("valid center tap")
}

/// Bilinear sample of one feature-map cell vector at fractional grid
/// coordinates, accumulated into `out` with weight `w`.
fn sample_map_into(
    map: &crate::featurizer::FeatureMap,
    gx: f64,
    gy: f64,
    w: f64,
    out: &mut [f64],
) {
    let gx = gx.clamp(0.0, (map.width - 1) as f64);
    let gy = gy.clamp(0.0, (map.height - 1) as f64);
    let (x0, y0) = (gx.floor() as usize, gy.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(map.width - 1), (y0 + 1).min(map.height - 1));
    let (fx, fy) = (gx - x0 as f64, gy - y0 as f64);
    for (cell, wgt) in [
        ((x0, y0), (1.0 - fx) * (1.0 - fy)),
        ((x1, y0), fx * (1.0 - fy)),
        ((x0, y1), (1.0 - fx) * fy),
        ((x1, y1), fx * fy),
    ] {
        for (a, v) in out.iter_mut().zip(map.cell(cell.0, cell.1)) {
            *a += w * wgt * v;
        }
    }
}

fn normalize_in_place(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 1e-12 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

const DISTILL_ROUNDS: usize = 3;
const DISTILL_STEP: f64 = 0.8;

/// Assigns each primitive a feature so that rendered feature planes
/// decode to (approximately) the coarse encoder output of the same
/// image. Initialization takes the preimage, under the center-tap
/// decoder, of the encoder feature at the primitive's projection in
/// each database render; a few relaxation rounds then re-render the
/// feature plane and push every primitive along its sampled residual.
pub fn distill_features(
    scene: &mut SceneMap,
    intrinsics: &CameraIntrinsics,
    db_images: &[(Pose, crate::image::Image)],
    c_coarse: usize,
) -> Result<()> {
    let c_low = scene.decoder.c_in;
    let dec = scene.decoder.clone();
    // Per-view targets in the rendered feature space: normalize(P^T t).
    let targets: Vec<(Pose, crate::featurizer::FeatureMap)> = db_images
        .par_iter()
        .map(|(pose, img)| {
            let t = encode_coarse_dim(img, c_coarse)?;
            let mut low =
                crate::featurizer::FeatureMap::new(c_low, t.height, t.width, t.stride);
            for i in 0..t.cells() {
                let tc = &t.data[i * c_coarse..(i + 1) * c_coarse];
                let lc = &mut low.data[i * c_low..(i + 1) * c_low];
                for (j, l) in lc.iter_mut().enumerate() {
                    *l = (0..c_coarse).map(|o| dec.center_tap(o, j) * tc[o]).sum();
                }
                normalize_in_place(lc);
            }
            Ok((*pose, low))
        })
        .collect::<Result<_>>()?;

    // (view, fractional grid position) per primitive, fixed geometry
    let visibility: Vec<Vec<(usize, f64, f64)>> = scene
        .primitives
        .par_iter()
        .map(|g| {
            let mut seen = Vec::new();
            for (vi, (pose, map)) in targets.iter().enumerate() {
                let Ok((px, _z)) = crate::geometry::project(intrinsics, pose, &g.center) else {
                    continue;
                };
                if px.x < 0.0
                    || px.y < 0.0
                    || px.x > (intrinsics.width - 1) as f64
                    || px.y > (intrinsics.height - 1) as f64
                {
                    continue;
                }
                let s = map.stride as f64;
                seen.push((vi, (px.x + 0.5) / s - 0.5, (px.y + 0.5) / s - 0.5));
            }
            seen
        })
        .collect();

    // initialization: mean target at the projection
    let mut feats: Vec<Vec<f64>> = visibility
        .par_iter()
        .map(|seen| {
            let mut f = vec![0.0f64; c_low];
            for &(vi, gx, gy) in seen {
                sample_map_into(&targets[vi].1, gx, gy, 1.0, &mut f);
            }
            normalize_in_place(&mut f);
            f
        })
        .collect();

    for _ in 0..DISTILL_ROUNDS {
        for (g, f) in scene.primitives.iter_mut().zip(&feats) {
            g.feature = f.clone();
        }
        // rendered feature planes under the current assignment
        let rendered: Vec<crate::featurizer::FeatureMap> = targets
            .par_iter()
            .map(|(pose, _)| {
                let v = render(
                    scene,
                    intrinsics,
                    pose,
                    RenderChannels {
                        color: false,
                        depth: false,
                        feature: true,
                    },
                );
                v.feature_low.expect("feature plane requested")
            })
            .collect();
        feats = visibility
            .par_iter()
            .zip(&feats)
            .map(|(seen, f_old)| {
                if seen.is_empty() {
                    return f_old.clone();
                }
                let mut residual = vec![0.0f64; c_low];
                for &(vi, gx, gy) in seen {
                    let (_, tmap) = &targets[vi];
                    sample_map_into(tmap, gx, gy, 1.0, &mut residual);
                    // rendered plane is stride 1: back to pixel coords
                    let s = tmap.stride as f64;
                    let mut r = vec![0.0f64; c_low];
                    sample_map_into(
                        &rendered[vi],
                        (gx + 0.5) * s - 0.5,
                        (gy + 0.5) * s - 0.5,
                        1.0,
                        &mut r,
                    );
                    normalize_in_place(&mut r);
                    for (a, b) in residual.iter_mut().zip(&r) {
                        *a -= b;
                    }
                }
                let inv = 1.0 / seen.len() as f64;
                let mut f = f_old.clone();
                for (x, r) in f.iter_mut().zip(&residual) {
                    *x += DISTILL_STEP * r * inv;
                }
                normalize_in_place(&mut f);
                f
            })
            .collect();
    }

    for (g, f) in scene.primitives.iter_mut().zip(feats) {
        // snap to f32 so the on-disk round trip is exact
        g.feature = f.iter().map(|&x| x as f32 as f64).collect();
    }
    Ok(())
}

/// Builds the full synthetic benchmark: scene, distilled features,
/// posed database with descriptors, and ground-truth query poses.
pub fn generate(cfg: &SynthConfig, seed: u64) -> Result<SynthOutput> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let intrinsics = CameraIntrinsics::new(
        cfg.focal,
        cfg.focal,
        cfg.width as f64 / 2.0,
        cfg.height as f64 / 2.0,
        cfg.width,
        cfg.height,
    )?;
    let mut scene = SceneMap {
        primitives: wall_primitives(cfg, &mut rng, cfg.c_low),
        decoder: distillation_decoder(cfg.c_coarse, cfg.c_low),
        database: Vec::new(),
    };

    let poses = trajectory(cfg, cfg.n_database);
    let db_images: Vec<(Pose, crate::image::Image)> = poses
        .par_iter()
        .map(|p| {
            (
                *p,
                render(&scene, &intrinsics, p, RenderChannels::color_only()).color_image(),
            )
        })
        .collect();
    distill_features(&mut scene, &intrinsics, &db_images, cfg.c_coarse)?;

    scene.database = db_images
        .par_iter()
        .enumerate()
        .map(|(i, (pose, img))| {
            let d = global_descriptor(img)?;
            Ok(DatabaseEntry {
                id: format!("db{i:04}"),
                pose: *pose,
                intrinsics,
                descriptor: d.0,
                source_path: None,
            })
        })
        .collect::<Result<_>>()?;

    let mut queries = Vec::with_capacity(cfg.n_queries);
    for i in 0..cfg.n_queries {
        let anchor = poses[rng.gen_range(0..poses.len())];
        let q = perturb_pose(
            &anchor,
            cfg.query_offset_deg,
            cfg.query_offset_m,
            PerturbStrategy::UniformBall,
            &mut rng,
        );
        queries.push((format!("q{i:04}"), q));
    }
    scene.validate()?;
    Ok(SynthOutput {
        scene,
        intrinsics,
        queries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::featurizer::decode_features;
    use crate::geometry::pose_error;

    fn small_cfg() -> SynthConfig {
        SynthConfig {
            n_gaussians: 2200,
            box_size: [6.0, 6.0, 2.5],
            n_database: 16,
            n_queries: 6,
            width: 128,
            height: 96,
            focal: 100.0,
            c_low: 24,
            c_coarse: 32,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn generate_is_deterministic_and_valid() {
        let a = generate(&small_cfg(), 3).unwrap();
        let b = generate(&small_cfg(), 3).unwrap();
        assert_eq!(a.scene.primitives.len(), b.scene.primitives.len());
        for (x, y) in a.scene.primitives.iter().zip(&b.scene.primitives) {
            assert_eq!(x, y);
        }
        assert_eq!(a.queries.len(), 6);
        a.scene.validate().unwrap();
        // all primitives inside the room
        for g in &a.scene.primitives {
            assert!(g.center.x.abs() <= 3.0 + 1e-9);
            assert!(g.center.y.abs() <= 3.0 + 1e-9);
            assert!(g.center.z.abs() <= 1.25 + 1e-9);
        }
    }

    #[test]
    fn database_views_cover_the_scene() {
        let out = generate(&small_cfg(), 4).unwrap();
        for e in &out.scene.database {
            let v = render(
                &out.scene,
                &out.intrinsics,
                &e.pose,
                RenderChannels::color_only(),
            );
            let covered = v.alpha_acc.iter().filter(|&&a| a > 0.5).count();
            assert!(
                covered as f64 > 0.6 * v.alpha_acc.len() as f64,
                "coverage {covered}/{}",
                v.alpha_acc.len()
            );
        }
    }

    #[test]
    fn decoder_columns_are_orthonormal() {
        let dec = distillation_decoder(32, 24);
        for a in 0..crate::featurizer::CELL_STATS_DIM {
            for b in 0..crate::featurizer::CELL_STATS_DIM {
                let d: f64 = (0..32).map(|o| dec.center_tap(o, a) * dec.center_tap(o, b)).sum();
                let expect = if a == b { 1.0 } else { 0.0 };
                assert!((d - expect).abs() < 1e-9, "({a},{b}) -> {d}");
            }
        }
    }

    /// The core guarantee: rendering the distilled features and decoding
    /// them reproduces the encoder output of the rendered color image.
    #[test]
    fn distilled_features_decode_to_encoder_output() {
        let out = generate(&small_cfg(), 5).unwrap();
        let pose = out.scene.database[3].pose;
        let v = render(
            &out.scene,
            &out.intrinsics,
            &pose,
            RenderChannels::all(),
        );
        let target = encode_coarse_dim(&v.color_image(), 32).unwrap();
        let decoded = decode_features(
            v.feature_low.as_ref().unwrap(),
            &out.scene.decoder,
            (target.height, target.width),
        )
        .unwrap();
        let mut cos_sum = 0.0;
        let mut cells = 0;
        for i in 0..target.cells() {
            let t = &target.data[i * 32..(i + 1) * 32];
            let d = &decoded.data[i * 32..(i + 1) * 32];
            let c: f64 = t.iter().zip(d).map(|(a, b)| a * b).sum();
            cos_sum += c;
            cells += 1;
        }
        let mean_cos = cos_sum / cells as f64;
        assert!(mean_cos > 0.75, "mean cosine {mean_cos}");
    }

    #[test]
    fn queries_stay_near_trajectory() {
        let out = generate(&small_cfg(), 6).unwrap();
        for (_, q) in &out.queries {
            let best = out
                .scene
                .database
                .iter()
                .map(|e| pose_error(q, &e.pose))
                .min_by(|a, b| a.translation_err.partial_cmp(&b.translation_err).unwrap())
                .unwrap();
            assert!(best.translation_err <= 0.3 + 1e-9);
        }
    }

    #[test]
    fn look_at_points_camera_forward() {
        let p = look_at(Vector3::new(1.0, 2.0, 0.5), Vector3::new(0.0, 1.0, 0.0));
        // camera z-axis maps to the forward direction
        let f = p.rotation * Vector3::z();
        assert!((f - Vector3::new(0.0, 1.0, 0.0)).norm() < 1e-12);
        let r = p.rotation_matrix();
        assert!((r.transpose() * r - Matrix3::identity()).norm() < 1e-12);
        assert!((r.determinant() - 1.0).abs() < 1e-12);
    }
}
