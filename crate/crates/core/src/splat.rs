//! Gaussian-splat scene representation and the forward rasterizer
//! producing color, depth and low-dim feature planes.

use std::path::PathBuf;

use nalgebra::{Matrix2, Matrix3, UnitQuaternion, Vector2, Vector3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::featurizer::{FeatureDecoder, FeatureMap};
use crate::geometry::{project_camera, projection_jacobian, CameraIntrinsics, Pose};
use crate::image::Image;

/// Anti-aliasing floor added to the screen covariance diagonal, px^2.
pub const COVARIANCE_DILATION: f64 = 0.3;
/// Footprint cutoff: squared Mahalanobis distance (3 sigma).
pub const MAHALANOBIS_CUTOFF_SQ: f64 = 9.0;
/// Per-pixel opacity clamp.
pub const ALPHA_MAX: f64 = 0.999;
/// Contributions below this per-pixel opacity are skipped.
pub const ALPHA_MIN: f64 = 1.0 / 255.0;
/// Compositing stops once transmittance falls below this.
pub const TRANSMITTANCE_STOP: f64 = 1e-4;
/// Screen covariances with a smaller determinant are culled.
pub const MIN_DETERMINANT: f64 = 1e-12;
/// Primitives closer than this to the camera plane are culled; the
/// projective linearization explodes as z approaches zero.
pub const NEAR_PLANE: f64 = 0.2;
/// Primitives whose projected 3-sigma radius exceeds this fraction of
/// the larger image side are culled. Nearly edge-on primitives close to
/// the camera otherwise smear across the whole frame: the affine
/// projection approximation has no business extrapolating that far, and
/// one such streak fogs every pixel it crosses.
pub const MAX_RADIUS_FRACTION: f64 = 0.4;
/// Pixels with less accumulated alpha get no normalized depth.
pub const ALPHA_DEPTH_CUTOFF: f64 = 1e-6;

const TILE_SIZE: usize = 16;

/// One splat: center, orientation, per-axis scale, opacity, color and a
/// low-dim feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPrimitive {
    pub center: Vector3<f64>,
    pub rotation: UnitQuaternion<f64>,
    pub scale: Vector3<f64>,
    pub opacity: f64,
    pub color: [f64; 3],
    pub feature: Vec<f64>,
}

impl GaussianPrimitive {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale.x > 0.0 && self.scale.y > 0.0 && self.scale.z > 0.0) {
            return Err(Error::InvalidInput("non-positive scale".into()));
        }
        if !(self.opacity > 0.0 && self.opacity <= 1.0) {
            return Err(Error::InvalidInput(format!(
                "opacity {} outside (0, 1]",
                self.opacity
            )));
        }
        if !self.feature.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidInput("non-finite feature".into()));
        }
        if !(self.center.iter().all(|v| v.is_finite()) && self.color.iter().all(|v| v.is_finite()))
        {
            return Err(Error::InvalidInput("non-finite primitive".into()));
        }
        Ok(())
    }
}

/// A posed database image with its global descriptor.
#[derive(Debug, Clone, PartialEq)]
pub struct DatabaseEntry {
    pub id: String,
    pub pose: Pose,
    pub intrinsics: CameraIntrinsics,
    pub descriptor: Vec<f64>,
    pub source_path: Option<PathBuf>,
}

impl DatabaseEntry {
    pub fn validate(&self) -> Result<()> {
        let n = self.descriptor.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(n.is_finite() && (n - 1.0).abs() <= 1e-6) {
            return Err(Error::InvalidInput(format!(
                "database descriptor of {} has norm {n}",
                self.id
            )));
        }
        Ok(())
    }
}

/// Immutable scene: primitives, feature decoder, posed database.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneMap {
    pub primitives: Vec<GaussianPrimitive>,
    pub decoder: FeatureDecoder,
    pub database: Vec<DatabaseEntry>,
}

impl SceneMap {
    /// (C', C)
    pub fn feature_dims(&self) -> (usize, usize) {
        (self.decoder.c_in, self.decoder.c_out)
    }

    pub fn validate(&self) -> Result<()> {
        for g in &self.primitives {
            g.validate()?;
            if g.feature.len() != self.decoder.c_in {
                return Err(Error::DimMismatch(format!(
                    "primitive feature dim {} != decoder input {}",
                    g.feature.len(),
                    self.decoder.c_in
                )));
            }
        }
        let d = self.database.first().map(|e| e.descriptor.len());
        for e in &self.database {
            e.validate()?;
            if Some(e.descriptor.len()) != d {
                return Err(Error::DimMismatch("mixed descriptor dims".into()));
            }
        }
        Ok(())
    }
}

/// Which planes to composite.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RenderChannels {
    pub color: bool,
    pub depth: bool,
    pub feature: bool,
}

impl RenderChannels {
    pub fn all() -> Self {
        RenderChannels {
            color: true,
            depth: true,
            feature: true,
        }
    }
    pub fn color_only() -> Self {
        RenderChannels {
            color: true,
            depth: false,
            feature: false,
        }
    }
    pub fn color_depth() -> Self {
        RenderChannels {
            color: true,
            depth: true,
            feature: false,
        }
    }
}

/// Per-pixel output planes of one render.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedView {
    pub width: usize,
    pub height: usize,
    /// Pixel-interleaved RGB.
    pub color: Vec<f64>,
    /// Alpha-normalized depth, meters; 0 where coverage is negligible.
    pub depth: Vec<f64>,
    /// Raw composited depth.
    pub depth_raw: Vec<f64>,
    pub alpha_acc: Vec<f64>,
    /// Low-dim feature plane at stride 1, unit-norm where covered.
    pub feature_low: Option<FeatureMap>,
}

impl RenderedView {
    fn new(width: usize, height: usize, c_low: Option<usize>) -> Self {
        let n = width * height;
        RenderedView {
            width,
            height,
            color: vec![0.0; 3 * n],
            depth: vec![0.0; n],
            depth_raw: vec![0.0; n],
            alpha_acc: vec![0.0; n],
            feature_low: c_low.map(|c| FeatureMap::new(c, height, width, 1)),
        }
    }

    pub fn color_image(&self) -> Image {
        Image::from_data(self.width, self.height, 3, self.color.clone()).expect("consistent dims")
    }
}

/// World-frame covariance `R diag(s^2) R^T`.
pub fn world_covariance(g: &GaussianPrimitive) -> Matrix3<f64> {
    let r = g.rotation.to_rotation_matrix().into_inner();
    let d = Matrix3::from_diagonal(&Vector3::new(
        g.scale.x * g.scale.x,
        g.scale.y * g.scale.y,
        g.scale.z * g.scale.z,
    ));
    r * d * r.transpose()
}

/// Projects a primitive's covariance to the image plane:
/// `J (W Sigma W^T) J^T` plus the dilation floor. Returns the screen
/// covariance, the projected mean and the camera depth; behind-camera
/// primitives are signaled via the error.
pub fn screen_covariance(
    g: &GaussianPrimitive,
    k: &CameraIntrinsics,
    pose: &Pose,
) -> Result<(Matrix2<f64>, Vector2<f64>, f64)> {
    let xc = pose.inverse_transform(&g.center);
    let (mean, z) = project_camera(k, &xc)?;
    let w = pose.rotation.inverse().to_rotation_matrix().into_inner();
    let cov_cam = w * world_covariance(g) * w.transpose();
    let j = projection_jacobian(k, &xc)?;
    let mut cov2 = j * cov_cam * j.transpose();
    cov2[(0, 0)] += COVARIANCE_DILATION;
    cov2[(1, 1)] += COVARIANCE_DILATION;
    Ok((cov2, mean, z))
}

pub(crate) struct PreparedSplat {
    pub mean: Vector2<f64>,
    pub inv: [f64; 3], // symmetric inverse covariance (a, b, c)
    pub z: f64,
    pub alpha: f64,
    pub color: [f64; 3],
    /// L2-normalized feature, present when the feature plane is rendered.
    pub feat: Vec<f64>,
    pub bbox: [usize; 4], // x0, x1, y0, y1 inclusive, clipped
}

/// Culls, projects and front-to-back sorts the scene for one camera.
pub(crate) fn prepare_splats(
    scene: &SceneMap,
    k: &CameraIntrinsics,
    pose: &Pose,
    need_feature: bool,
) -> Vec<PreparedSplat> {
    prepare_splats_indexed(scene, k, pose, need_feature)
        .into_iter()
        .map(|(_, s)| s)
        .collect()
}

/// As `prepare_splats`, but keeps each splat's original primitive index.
pub(crate) fn prepare_splats_indexed(
    scene: &SceneMap,
    k: &CameraIntrinsics,
    pose: &Pose,
    need_feature: bool,
) -> Vec<(usize, PreparedSplat)> {
    let w = k.width as usize;
    let h = k.height as usize;
    let mut out: Vec<(usize, PreparedSplat)> = Vec::with_capacity(scene.primitives.len());
    for (idx, g) in scene.primitives.iter().enumerate() {
        if pose.inverse_transform(&g.center).z < NEAR_PLANE {
            continue;
        }
        let Ok((cov, mean, z)) = screen_covariance(g, k, pose) else {
            continue;
        };
        let det = cov[(0, 0)] * cov[(1, 1)] - cov[(0, 1)] * cov[(1, 0)];
        if det < MIN_DETERMINANT {
            continue;
        }
        let inv = [cov[(1, 1)] / det, -cov[(0, 1)] / det, cov[(0, 0)] / det];
        // 3-sigma radius from the largest eigenvalue.
        let half_tr = (cov[(0, 0)] + cov[(1, 1)]) / 2.0;
        let disc = (half_tr * half_tr - det).max(0.0).sqrt();
        let radius = 3.0 * (half_tr + disc).sqrt();
        if radius > MAX_RADIUS_FRACTION * w.max(h) as f64 {
            continue;
        }
        let x0 = (mean.x - radius).floor().max(0.0) as usize;
        let y0 = (mean.y - radius).floor().max(0.0) as usize;
        if mean.x + radius < 0.0
            || mean.y + radius < 0.0
            || x0 >= w
            || y0 >= h
        {
            continue;
        }
        let x1 = ((mean.x + radius).ceil() as usize).min(w - 1);
        let y1 = ((mean.y + radius).ceil() as usize).min(h - 1);
        let feat = if need_feature {
            let n = g.feature.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 1e-12 {
                g.feature.iter().map(|v| v / n).collect()
            } else {
                vec![0.0; g.feature.len()]
            }
        } else {
            Vec::new()
        };
        out.push((
            idx,
            PreparedSplat {
                mean,
                inv,
                z,
                alpha: g.opacity,
                color: g.color,
                feat,
                bbox: [x0, x1, y0, y1],
            },
        ));
    }
    // Front-to-back, ties broken by primitive index.
    out.sort_by(|a, b| {
        a.1.z
            .partial_cmp(&b.1.z)
            .unwrap()
            .then_with(|| a.0.cmp(&b.0))
    });
    out
}

#[inline]
fn composite_pixel<'a>(
    x: usize,
    y: usize,
    splats: impl Iterator<Item = &'a PreparedSplat>,
    channels: RenderChannels,
    c_low: usize,
    color: &mut [f64; 3],
    depth_raw: &mut f64,
    feat: &mut [f64],
) -> f64 {
    let ux = x as f64;
    let uy = y as f64;
    let mut transmittance = 1.0;
    for s in splats {
        let dx = ux - s.mean.x;
        let dy = uy - s.mean.y;
        let m = s.inv[0] * dx * dx + 2.0 * s.inv[1] * dx * dy + s.inv[2] * dy * dy;
        if m > MAHALANOBIS_CUTOFF_SQ {
            continue;
        }
        let a = (s.alpha * (-0.5 * m).exp()).min(ALPHA_MAX);
        if a < ALPHA_MIN {
            continue;
        }
        let weight = a * transmittance;
        if channels.color {
            color[0] += s.color[0] * weight;
            color[1] += s.color[1] * weight;
            color[2] += s.color[2] * weight;
        }
        if channels.depth {
            *depth_raw += s.z * weight;
        }
        if channels.feature {
            for (o, f) in feat.iter_mut().zip(&s.feat) {
                *o += f * weight;
            }
        }
        transmittance *= 1.0 - a;
        if transmittance < TRANSMITTANCE_STOP {
            break;
        }
    }
    debug_assert!(c_low == feat.len());
    1.0 - transmittance
}

fn finalize_pixel(view: &mut RenderedView, i: usize, alpha: f64, channels: RenderChannels) {
    view.alpha_acc[i] = alpha;
    if channels.depth {
        view.depth[i] = if alpha > ALPHA_DEPTH_CUTOFF {
            view.depth_raw[i] / alpha
        } else {
            0.0
        };
    }
    if channels.feature {
        let fm = view.feature_low.as_mut().expect("feature plane allocated");
        let c = fm.channels;
        let cell = &mut fm.data[i * c..(i + 1) * c];
        let n = cell.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 1e-12 {
            cell.iter_mut().for_each(|v| *v /= n);
        }
    }
}

/// Tiled front-to-back rasterizer. Output is deterministic and
/// independent of thread count.
pub fn render(
    scene: &SceneMap,
    k: &CameraIntrinsics,
    pose: &Pose,
    channels: RenderChannels,
) -> RenderedView {
    let w = k.width as usize;
    let h = k.height as usize;
    let c_low = scene.decoder.c_in;
    let need_feature = channels.feature;
    let splats = prepare_splats(scene, k, pose, need_feature);

    let tiles_x = w.div_ceil(TILE_SIZE);
    let tiles_y = h.div_ceil(TILE_SIZE);
    let mut bins: Vec<Vec<u32>> = vec![Vec::new(); tiles_x * tiles_y];
    for (si, s) in splats.iter().enumerate() {
        let [x0, x1, y0, y1] = s.bbox;
        for ty in y0 / TILE_SIZE..=y1 / TILE_SIZE {
            for tx in x0 / TILE_SIZE..=x1 / TILE_SIZE {
                bins[ty * tiles_x + tx].push(si as u32);
            }
        }
    }

    struct TileOut {
        color: Vec<f64>,
        depth_raw: Vec<f64>,
        alpha: Vec<f64>,
        feat: Vec<f64>,
    }

    let tile_results: Vec<TileOut> = (0..tiles_x * tiles_y)
        .into_par_iter()
        .map(|ti| {
            let tx = ti % tiles_x;
            let ty = ti / tiles_x;
            let x_lo = tx * TILE_SIZE;
            let y_lo = ty * TILE_SIZE;
            let tw = (w - x_lo).min(TILE_SIZE);
            let th = (h - y_lo).min(TILE_SIZE);
            let n = tw * th;
            let mut out = TileOut {
                color: vec![0.0; 3 * n],
                depth_raw: vec![0.0; n],
                alpha: vec![0.0; n],
                feat: vec![0.0; if need_feature { c_low * n } else { 0 }],
            };
            let bin = &bins[ti];
            let mut scratch_feat = vec![0.0; c_low];
            for py in 0..th {
                for px in 0..tw {
                    let li = py * tw + px;
                    let mut color = [0.0; 3];
                    let mut depth_raw = 0.0;
                    let feat_slice: &mut [f64] = if need_feature {
                        &mut out.feat[li * c_low..(li + 1) * c_low]
                    } else {
                        &mut scratch_feat[..0]
                    };
                    let alpha = composite_pixel(
                        x_lo + px,
                        y_lo + py,
                        bin.iter().map(|&si| &splats[si as usize]),
                        channels,
                        feat_slice.len(),
                        &mut color,
                        &mut depth_raw,
                        feat_slice,
                    );
                    out.color[3 * li..3 * li + 3].copy_from_slice(&color);
                    out.depth_raw[li] = depth_raw;
                    out.alpha[li] = alpha;
                }
            }
            out
        })
        .collect();

    let mut view = RenderedView::new(w, h, need_feature.then_some(c_low));
    for (ti, t) in tile_results.into_iter().enumerate() {
        let tx = ti % tiles_x;
        let ty = ti / tiles_x;
        let x_lo = tx * TILE_SIZE;
        let y_lo = ty * TILE_SIZE;
        let tw = (w - x_lo).min(TILE_SIZE);
        let th = (h - y_lo).min(TILE_SIZE);
        for py in 0..th {
            for px in 0..tw {
                let li = py * tw + px;
                let gi = (y_lo + py) * w + (x_lo + px);
                view.color[3 * gi..3 * gi + 3].copy_from_slice(&t.color[3 * li..3 * li + 3]);
                view.depth_raw[gi] = t.depth_raw[li];
                if need_feature {
                    let fm = view.feature_low.as_mut().unwrap();
                    fm.data[gi * c_low..(gi + 1) * c_low]
                        .copy_from_slice(&t.feat[li * c_low..(li + 1) * c_low]);
                }
                finalize_pixel(&mut view, gi, t.alpha[li], channels);
            }
        }
    }
    view
}

/// Correctness oracle: per-pixel loop over every projected primitive in
/// global depth order, no tiling, identical dilation and clamps.
pub fn render_reference(scene: &SceneMap, k: &CameraIntrinsics, pose: &Pose) -> RenderedView {
    let w = k.width as usize;
    let h = k.height as usize;
    let c_low = scene.decoder.c_in;
    let channels = RenderChannels::all();
    let splats = prepare_splats(scene, k, pose, true);
    let mut view = RenderedView::new(w, h, Some(c_low));
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let mut color = [0.0; 3];
            let mut depth_raw = 0.0;
            let fm = view.feature_low.as_mut().unwrap();
            let feat_ptr = &mut fm.data[i * c_low..(i + 1) * c_low];
            let mut feat: Vec<f64> = vec![0.0; c_low];
            let alpha = composite_pixel(
                x,
                y,
                splats.iter(),
                channels,
                c_low,
                &mut color,
                &mut depth_raw,
                &mut feat,
            );
            feat_ptr.copy_from_slice(&feat);
            view.color[3 * i..3 * i + 3].copy_from_slice(&color);
            view.depth_raw[i] = depth_raw;
            finalize_pixel(&mut view, i, alpha, channels);
        }
    }
    view
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::pose_error;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn camera(f: f64, w: u32, h: u32) -> CameraIntrinsics {
        CameraIntrinsics::new(f, f, w as f64 / 2.0, h as f64 / 2.0, w, h).unwrap()
    }

    fn prim(center: Vector3<f64>, scale: f64, opacity: f64, color: [f64; 3]) -> GaussianPrimitive {
        GaussianPrimitive {
            center,
            rotation: UnitQuaternion::identity(),
            scale: Vector3::new(scale, scale, scale),
            opacity,
            color,
            feature: vec![1.0, 0.0],
        }
    }

    fn scene_of(prims: Vec<GaussianPrimitive>) -> SceneMap {
        SceneMap {
            primitives: prims,
            decoder: FeatureDecoder::identity(2),
            database: Vec::new(),
        }
    }

    fn random_scene(n: usize, seed: u64) -> SceneMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut prims = Vec::with_capacity(n);
        for _ in 0..n {
            let axis = Vector3::new(
                rng.gen::<f64>() - 0.5,
                rng.gen::<f64>() - 0.5,
                rng.gen::<f64>() - 0.5,
            )
            .normalize();
            let feature: Vec<f64> = (0..4).map(|_| rng.gen::<f64>() - 0.5).collect();
            prims.push(GaussianPrimitive {
                center: Vector3::new(
                    rng.gen::<f64>() * 4.0 - 2.0,
                    rng.gen::<f64>() * 4.0 - 2.0,
                    rng.gen::<f64>() * 4.0 + 1.5,
                ),
                rotation: UnitQuaternion::from_scaled_axis(axis * rng.gen::<f64>() * 3.0),
                scale: Vector3::new(
                    rng.gen::<f64>() * 0.2 + 0.02,
                    rng.gen::<f64>() * 0.2 + 0.02,
                    rng.gen::<f64>() * 0.2 + 0.02,
                ),
                opacity: rng.gen::<f64>() * 0.9 + 0.05,
                color: [rng.gen(), rng.gen(), rng.gen()],
                feature,
            });
        }
        SceneMap {
            primitives: prims,
            decoder: FeatureDecoder::identity(4),
            database: Vec::new(),
        }
    }

    #[test]
    fn world_covariance_cases() {
        let g = prim(Vector3::zeros(), 1.0, 1.0, [1.0; 3]);
        assert_relative_eq!(world_covariance(&g), Matrix3::identity(), epsilon = 1e-12);

        let mut g2 = g.clone();
        g2.scale = Vector3::new(2.0, 1.0, 1.0);
        assert_relative_eq!(
            world_covariance(&g2),
            Matrix3::from_diagonal(&Vector3::new(4.0, 1.0, 1.0)),
            epsilon = 1e-12
        );
    }

    #[test]
    fn world_covariance_eigenvalues() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..50 {
            let axis = Vector3::new(
                rng.gen::<f64>() - 0.5,
                rng.gen::<f64>() - 0.5,
                rng.gen::<f64>() - 0.5,
            )
            .normalize();
            let mut g = prim(Vector3::zeros(), 1.0, 1.0, [1.0; 3]);
            g.rotation = UnitQuaternion::from_scaled_axis(axis * rng.gen::<f64>() * 3.0);
            g.scale = Vector3::new(
                rng.gen::<f64>() + 0.1,
                rng.gen::<f64>() + 0.1,
                rng.gen::<f64>() + 0.1,
            );
            let mut eig: Vec<f64> = world_covariance(&g)
                .symmetric_eigenvalues()
                .iter()
                .cloned()
                .collect();
            let mut expect: Vec<f64> = g.scale.iter().map(|s| s * s).collect();
            eig.sort_by(|a, b| a.partial_cmp(b).unwrap());
            expect.sort_by(|a, b| a.partial_cmp(b).unwrap());
            for (a, b) in eig.iter().zip(&expect) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn screen_covariance_on_axis() {
        let k = camera(100.0, 64, 64);
        let sigma = 0.05;
        let z = 2.0;
        let g = prim(Vector3::new(0.0, 0.0, z), sigma, 1.0, [1.0; 3]);
        let (cov, mean, depth) = screen_covariance(&g, &k, &Pose::identity()).unwrap();
        let expect = 100.0f64.powi(2) * sigma * sigma / (z * z) + COVARIANCE_DILATION;
        assert_relative_eq!(cov[(0, 0)], expect, epsilon = 1e-9);
        assert_relative_eq!(cov[(1, 1)], expect, epsilon = 1e-9);
        assert_relative_eq!(cov[(0, 1)], 0.0, epsilon = 1e-12);
        assert_relative_eq!(mean, Vector2::new(32.0, 32.0), epsilon = 1e-12);
        assert_relative_eq!(depth, z);

        // doubling z quarters the undilated covariance
        let g2 = prim(Vector3::new(0.0, 0.0, 2.0 * z), sigma, 1.0, [1.0; 3]);
        let (cov2, _, _) = screen_covariance(&g2, &k, &Pose::identity()).unwrap();
        assert_relative_eq!(
            cov2[(0, 0)] - COVARIANCE_DILATION,
            (cov[(0, 0)] - COVARIANCE_DILATION) / 4.0,
            epsilon = 1e-9
        );
    }

    #[test]
    fn screen_covariance_matches_stepwise_oracle() {
        let k = camera(120.0, 64, 64);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let scene = random_scene(1, rng.gen());
            let g = &scene.primitives[0];
            let axis = Vector3::new(
                rng.gen::<f64>() - 0.5,
                rng.gen::<f64>() - 0.5,
                rng.gen::<f64>() - 0.5,
            )
            .normalize();
            let pose = Pose::from_parts(
                UnitQuaternion::from_scaled_axis(axis * rng.gen::<f64>() * 0.3),
                Vector3::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5, -0.2),
            );
            let Ok((cov, mean, z)) = screen_covariance(g, &k, &pose) else {
                continue;
            };
            // step by step
            let xc = pose.inverse_transform(&g.center);
            let w = pose.invert().rotation_matrix();
            let cam_cov = w * world_covariance(g) * w.transpose();
            let j = projection_jacobian(&k, &xc).unwrap();
            let mut oracle = j * cam_cov * j.transpose();
            oracle[(0, 0)] += COVARIANCE_DILATION;
            oracle[(1, 1)] += COVARIANCE_DILATION;
            assert_relative_eq!(cov, oracle, epsilon = 1e-9);
            let (px, pz) = crate::geometry::project(&k, &pose, &g.center).unwrap();
            assert_relative_eq!(mean, px, epsilon = 1e-9);
            assert_relative_eq!(z, pz, epsilon = 1e-12);
        }
    }

    #[test]
    fn render_empty_scene() {
        let k = camera(100.0, 32, 32);
        let v = render(&scene_of(vec![]), &k, &Pose::identity(), RenderChannels::all());
        assert!(v.color.iter().all(|&c| c == 0.0));
        assert!(v.alpha_acc.iter().all(|&a| a == 0.0));
        assert!(v.depth.iter().all(|&d| d == 0.0));
        let r = render_reference(&scene_of(vec![]), &k, &Pose::identity());
        assert_eq!(v, r);
    }

    #[test]
    fn render_single_gaussian_closed_form() {
        let k = camera(100.0, 64, 64);
        // The center pixel sits on the mean, so g == 1 there.
        let g = prim(Vector3::new(0.0, 0.0, 2.0), 0.1, 1.0, [1.0, 0.0, 0.0]);
        let v = render(&scene_of(vec![g]), &k, &Pose::identity(), RenderChannels::all());
        let i = 32 * 64 + 32; // mu = (32, 32)
        // alpha = min(1 * 1, ALPHA_MAX)
        assert_relative_eq!(v.alpha_acc[i], ALPHA_MAX, epsilon = 1e-9);
        assert_relative_eq!(v.color[3 * i], ALPHA_MAX, epsilon = 1e-9);
        assert_relative_eq!(v.depth_raw[i], 2.0 * ALPHA_MAX, epsilon = 1e-9);
        assert_relative_eq!(v.depth[i], 2.0, epsilon = 1e-9);

        // Unclamped case.
        let g = prim(Vector3::new(0.0, 0.0, 2.0), 0.1, 0.5, [1.0, 0.0, 0.0]);
        let v = render(&scene_of(vec![g]), &k, &Pose::identity(), RenderChannels::all());
        assert_relative_eq!(v.alpha_acc[i], 0.5, epsilon = 1e-9);
        assert_relative_eq!(v.color[3 * i], 0.5, epsilon = 1e-9);
        assert_relative_eq!(v.depth_raw[i], 1.0, epsilon = 1e-9);
    }

    #[test]
    fn render_two_term_compositing() {
        let k = camera(100.0, 64, 64);
        let front = prim(Vector3::new(0.0, 0.0, 2.0), 0.1, 0.5, [1.0, 1.0, 1.0]);
        let back = prim(Vector3::new(0.0, 0.0, 2.5), 0.1, 0.5, [0.0, 0.0, 0.0]);
        let v = render(
            &scene_of(vec![back, front]),
            &k,
            &Pose::identity(),
            RenderChannels::all(),
        );
        let i = 32 * 64 + 32;
        assert_relative_eq!(v.color[3 * i], 0.5, epsilon = 1e-6);
        assert_relative_eq!(v.alpha_acc[i], 0.75, epsilon = 1e-6);
    }

    #[test]
    fn tiled_matches_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..5 {
            let scene = random_scene(100, rng.gen());
            let k = camera(60.0, 64, 64);
            let v = render(&scene, &k, &Pose::identity(), RenderChannels::all());
            let r = render_reference(&scene, &k, &Pose::identity());
            let max = |a: &[f64], b: &[f64]| {
                a.iter()
                    .zip(b)
                    .map(|(x, y)| (x - y).abs())
                    .fold(0.0, f64::max)
            };
            assert!(max(&v.color, &r.color) < 1e-5);
            assert!(max(&v.depth_raw, &r.depth_raw) < 1e-5);
            assert!(max(&v.alpha_acc, &r.alpha_acc) < 1e-5);
            assert!(
                max(
                    &v.feature_low.as_ref().unwrap().data,
                    &r.feature_low.as_ref().unwrap().data
                ) < 1e-5
            );
        }
    }

    #[test]
    fn rigid_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let scene = random_scene(60, 99);
        let k = camera(60.0, 48, 48);
        let base_pose = Pose::identity();
        let base = render(&scene, &k, &base_pose, RenderChannels::all());
        for _ in 0..5 {
            let axis = Vector3::new(
                rng.gen::<f64>() - 0.5,
                rng.gen::<f64>() - 0.5,
                rng.gen::<f64>() - 0.5,
            )
            .normalize();
            let g = Pose::from_parts(
                UnitQuaternion::from_scaled_axis(axis * rng.gen::<f64>() * 3.0),
                Vector3::new(rng.gen(), rng.gen(), rng.gen()),
            );
            let mut moved = scene.clone();
            for p in moved.primitives.iter_mut() {
                p.center = g.transform(&p.center);
                p.rotation = g.rotation * p.rotation;
            }
            let pose2 = g.compose(&base_pose);
            let v = render(&moved, &k, &pose2, RenderChannels::all());
            let max = |a: &[f64], b: &[f64]| {
                a.iter()
                    .zip(b)
                    .map(|(x, y)| (x - y).abs())
                    .fold(0.0, f64::max)
            };
            assert!(max(&v.color, &base.color) < 1e-6);
            assert!(max(&v.depth_raw, &base.depth_raw) < 1e-6);
            assert!(max(&v.alpha_acc, &base.alpha_acc) < 1e-6);
        }
        // sanity: pose arithmetic above kept the camera equivalent
        let e = pose_error(&base_pose, &base_pose);
        assert_eq!(e.translation_err, 0.0);
    }

    #[test]
    fn alpha_bounds_and_feature_norm() {
        let scene = random_scene(150, 77);
        let k = camera(60.0, 64, 64);
        let v = render(&scene, &k, &Pose::identity(), RenderChannels::all());
        for &a in &v.alpha_acc {
            assert!((0.0..=1.0).contains(&a));
        }
        let fm = v.feature_low.as_ref().unwrap();
        for i in 0..v.alpha_acc.len() {
            if v.alpha_acc[i] > 0.0 {
                let cell = &fm.data[i * fm.channels..(i + 1) * fm.channels];
                let n = cell.iter().map(|x| x * x).sum::<f64>().sqrt();
                if n > 0.0 {
                    assert!((n - 1.0).abs() < 1e-6, "feature norm {n}");
                }
            }
            // depth consistency
            if v.alpha_acc[i] > ALPHA_DEPTH_CUTOFF {
                assert!((v.depth[i] * v.alpha_acc[i] - v.depth_raw[i]).abs() < 1e-9);
            }
        }
    }
}
