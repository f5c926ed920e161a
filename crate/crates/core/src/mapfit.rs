//! Gradient-based fitting of splat colors, opacities, low-dim features
//! and the feature decoder against posed target images and feature
//! maps, with geometry held fixed. Gradients are analytic through the
//! whole compositing and decoding chain and validated against central
//! finite differences.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featurizer::FeatureMap;
use crate::geometry::{CameraIntrinsics, Pose};
use crate::image::Image;
use crate::splat::{
    prepare_splats_indexed, SceneMap, ALPHA_MAX, ALPHA_MIN, MAHALANOBIS_CUTOFF_SQ,
    TRANSMITTANCE_STOP,
};

/// SSIM window side length.
pub const SSIM_WINDOW: usize = 11;
/// SSIM window Gaussian sigma, px.
pub const SSIM_SIGMA: f64 = 1.5;
/// SSIM stabilizers for a data range of 1.0.
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
/// Opacity clamp band applied after every descent step.
pub const OPACITY_MIN: f64 = 1e-4;
pub const OPACITY_MAX: f64 = 0.999;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    /// D-SSIM weight in the photometric loss.
    pub lambda: f64,
    /// Feature-loss weight.
    pub gamma: f64,
    pub train_color: bool,
    pub train_opacity: bool,
    pub train_feature: bool,
    pub train_decoder: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            iterations: 2000,
            learning_rate: 0.001,
            lambda: 0.2,
            gamma: 1.0,
            train_color: true,
            train_opacity: true,
            train_feature: true,
            train_decoder: true,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::InvalidConfig("lambda outside [0, 1]".into()));
        }
        if !(self.gamma >= 0.0) {
            return Err(Error::InvalidConfig("gamma must be non-negative".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig("learning rate must be positive".into()));
        }
        if !(self.train_color || self.train_opacity || self.train_feature || self.train_decoder) {
            return Err(Error::InvalidConfig("no trainable attributes".into()));
        }
        Ok(())
    }
}

/// One posed supervision view: the target image and the target coarse
/// feature grid it should decode to.
#[derive(Debug, Clone)]
pub struct FitView {
    pub image: Image,
    pub features: FeatureMap,
    pub pose: Pose,
    pub intrinsics: CameraIntrinsics,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossRecord {
    pub iter: usize,
    pub loss: f64,
    pub loss_rgb: f64,
    pub loss_feat: f64,
}

// ---------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

/// Separable Gaussian blur with replicate padding; its own transpose.
fn blur(plane: &[f64], w: usize, h: usize) -> Vec<f64> {
    let k = gaussian_kernel();
    let r = SSIM_WINDOW / 2;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for (i, kv) in k.iter().enumerate() {
                let xx = (x as isize + i as isize - r as isize).clamp(0, w as isize - 1) as usize;
                s += kv * plane[y * w + xx];
            }
            tmp[y * w + x] = s;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for (i, kv) in k.iter().enumerate() {
                let yy = (y as isize + i as isize - r as isize).clamp(0, h as isize - 1) as usize;
                s += kv * tmp[yy * w + x];
            }
            out[y * w + x] = s;
        }
    }
    out
}

/// Adjoint of `blur`. Replicate padding makes the blur matrix
/// asymmetric at borders, so the transpose scatters through the same
/// clamped taps instead of re-running the blur.
fn blur_transpose(plane: &[f64], w: usize, h: usize) -> Vec<f64> {
    let k = gaussian_kernel();
    let r = SSIM_WINDOW / 2;
    // forward order is horizontal then vertical; the adjoint applies
    // the vertical transpose first
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let v = plane[y * w + x];
            for (i, kv) in k.iter().enumerate() {
                let yy = (y as isize + i as isize - r as isize).clamp(0, h as isize - 1) as usize;
                tmp[yy * w + x] += kv * v;
            }
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let v = tmp[y * w + x];
            for (i, kv) in k.iter().enumerate() {
                let xx = (x as isize + i as isize - r as isize).clamp(0, w as isize - 1) as usize;
                out[y * w + xx] += kv * v;
            }
        }
    }
    out
}

struct SsimPlanes {
    mu_x: Vec<f64>,
    mu_y: Vec<f64>,
    bxx: Vec<f64>,
    byy: Vec<f64>,
    bxy: Vec<f64>,
}

fn ssim_planes(x: &[f64], y: &[f64], w: usize, h: usize) -> SsimPlanes {
    let sq = |p: &[f64]| p.iter().map(|v| v * v).collect::<Vec<f64>>();
    let prod: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    SsimPlanes {
        mu_x: blur(x, w, h),
        mu_y: blur(y, w, h),
        bxx: blur(&sq(x), w, h),
        byy: blur(&sq(y), w, h),
        bxy: blur(&prod, w, h),
    }
}

fn ssim_value(p: &SsimPlanes, i: usize) -> f64 {
    let (mx, my) = (p.mu_x[i], p.mu_y[i]);
    let sx = p.bxx[i] - mx * mx;
    let sy = p.byy[i] - my * my;
    let sxy = p.bxy[i] - mx * my;
    let a1 = 2.0 * mx * my + SSIM_C1;
    let a2 = 2.0 * sxy + SSIM_C2;
    let b1 = mx * mx + my * my + SSIM_C1;
    let b2 = sx + sy + SSIM_C2;
    (a1 * a2) / (b1 * b2)
}

/// Subgradient of |v| that is zero at the kink, unlike `f64::signum`
/// which maps +0.0 to 1.0.
#[inline]
fn l1_sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Mean SSIM of one channel plane pair (x = rendered, y = target).
fn ssim_mean(x: &[f64], y: &[f64], w: usize, h: usize) -> f64 {
    let p = ssim_planes(x, y, w, h);
    (0..w * h).map(|i| ssim_value(&p, i)).sum::<f64>() / (w * h) as f64
}

/// d mean-SSIM / d x, the rendered plane.
fn ssim_grad(x: &[f64], y: &[f64], w: usize, h: usize) -> Vec<f64> {
    let p = ssim_planes(x, y, w, h);
    let n = (w * h) as f64;
    // partials of s w.r.t. the blurred quantities, as planes
    let mut d_mu = vec![0.0; w * h];
    let mut d_bxx = vec![0.0; w * h];
    let mut d_bxy = vec![0.0; w * h];
    for i in 0..w * h {
        let (mx, my) = (p.mu_x[i], p.mu_y[i]);
        let sx = p.bxx[i] - mx * mx;
        let sy = p.byy[i] - my * my;
        let sxy = p.bxy[i] - mx * my;
        let a1 = 2.0 * mx * my + SSIM_C1;
        let a2 = 2.0 * sxy + SSIM_C2;
        let b1 = mx * mx + my * my + SSIM_C1;
        let b2 = sx + sy + SSIM_C2;
        let denom = b1 * b2;
        // s = a1 a2 / (b1 b2) with a2, b2 viewed through (mu_x, bxx, bxy)
        let da2_dmu = -2.0 * my;
        let db1_dmu = 2.0 * mx;
        let db2_dmu = -2.0 * mx;
        d_mu[i] = (2.0 * my * a2 + a1 * da2_dmu) / denom
            - a1 * a2 * (db1_dmu * b2 + b1 * db2_dmu) / (denom * denom);
        d_bxx[i] = -a1 * a2 / (denom * b2);
        d_bxy[i] = 2.0 * a1 / denom;
        d_mu[i] /= n;
        d_bxx[i] /= n;
        d_bxy[i] /= n;
    }
    let t_mu = blur_transpose(&d_mu, w, h);
    let t_bxx = blur_transpose(&d_bxx, w, h);
    let t_bxy = blur_transpose(&d_bxy, w, h);
    (0..w * h)
        .map(|i| t_mu[i] + 2.0 * x[i] * t_bxx[i] + y[i] * t_bxy[i])
        .collect()
}

/// Photometric loss: `(1 - lambda) L1 + lambda (1 - SSIM) / 2`, SSIM
/// averaged over channels.
pub fn loss_rgb(target: &Image, rendered: &Image, lambda: f64) -> Result<f64> {
    if target.width != rendered.width
        || target.height != rendered.height
        || target.channels != rendered.channels
    {
        return Err(Error::DimMismatch("image dims differ".into()));
    }
    let n = target.data.len() as f64;
    let l1 = target
        .data
        .iter()
        .zip(&rendered.data)
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / n;
    let (w, h, c) = (target.width, target.height, target.channels);
    let mut ssim = 0.0;
    for ch in 0..c {
        let xp: Vec<f64> = (0..w * h).map(|i| rendered.data[i * c + ch]).collect();
        let yp: Vec<f64> = (0..w * h).map(|i| target.data[i * c + ch]).collect();
        ssim += ssim_mean(&xp, &yp, w, h);
    }
    ssim /= c as f64;
    Ok((1.0 - lambda) * l1 + lambda * (1.0 - ssim) / 2.0)
}

/// d loss_rgb / d rendered, same layout as the image data.
fn loss_rgb_grad(target: &Image, rendered: &Image, lambda: f64) -> Vec<f64> {
    let n = target.data.len() as f64;
    let (w, h, c) = (target.width, target.height, target.channels);
    let mut grad: Vec<f64> = rendered
        .data
        .iter()
        .zip(&target.data)
        .map(|(r, t)| (1.0 - lambda) * l1_sign(r - t) / n)
        .collect();
    for ch in 0..c {
        let xp: Vec<f64> = (0..w * h).map(|i| rendered.data[i * c + ch]).collect();
        let yp: Vec<f64> = (0..w * h).map(|i| target.data[i * c + ch]).collect();
        let g = ssim_grad(&xp, &yp, w, h);
        for i in 0..w * h {
            grad[i * c + ch] += lambda * (-0.5) * g[i] / c as f64;
        }
    }
    grad
}

/// Mean absolute difference between two equally shaped feature maps.
pub fn loss_feat(target: &FeatureMap, rendered: &FeatureMap) -> Result<f64> {
    if target.channels != rendered.channels
        || target.width != rendered.width
        || target.height != rendered.height
    {
        return Err(Error::DimMismatch("feature map dims differ".into()));
    }
    let n = target.data.len() as f64;
    Ok(target
        .data
        .iter()
        .zip(&rendered.data)
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / n)
}

// ---------------------------------------------------------------------
// Differentiable forward pass
// ---------------------------------------------------------------------

/// One composited contribution: primitive index, Gaussian kernel value
/// and the (possibly clamped) per-pixel opacity.
#[derive(Clone, Copy)]
struct Contribution {
    prim: u32,
    kernel: f64,
    alpha: f64,
}

struct ForwardPass {
    width: usize,
    height: usize,
    color: Vec<f64>,
    /// Unnormalized composited feature plane.
    feat_raw: Vec<f64>,
    /// Per-pixel L2-normalized feature plane (what rendering exposes).
    feat_hat: FeatureMap,
    /// Per-pixel contributions in compositing order.
    records: Vec<Vec<Contribution>>,
}

/// Reference-style forward identical to the rasterizer's compositing,
/// recording every contribution for the backward pass.
fn forward(scene: &SceneMap, k: &CameraIntrinsics, pose: &Pose) -> ForwardPass {
    let w = k.width as usize;
    let h = k.height as usize;
    let c_low = scene.decoder.c_in;
    let splats = prepare_splats_indexed(scene, k, pose, true);
    let mut pass = ForwardPass {
        width: w,
        height: h,
        color: vec![0.0; 3 * w * h],
        feat_raw: vec![0.0; c_low * w * h],
        feat_hat: FeatureMap::new(c_low, h, w, 1),
        records: vec![Vec::new(); w * h],
    };
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let mut transmittance = 1.0;
            for (prim, s) in &splats {
                let dx = x as f64 - s.mean.x;
                let dy = y as f64 - s.mean.y;
                let m = s.inv[0] * dx * dx + 2.0 * s.inv[1] * dx * dy + s.inv[2] * dy * dy;
                if m > MAHALANOBIS_CUTOFF_SQ {
                    continue;
                }
                let kernel = (-0.5 * m).exp();
                let a = (s.alpha * kernel).min(ALPHA_MAX);
                if a < ALPHA_MIN {
                    continue;
                }
                let weight = a * transmittance;
                for ch in 0..3 {
                    pass.color[3 * i + ch] += s.color[ch] * weight;
                }
                for (o, f) in pass.feat_raw[i * c_low..(i + 1) * c_low]
                    .iter_mut()
                    .zip(&s.feat)
                {
                    *o += f * weight;
                }
                pass.records[i].push(Contribution {
                    prim: *prim as u32,
                    kernel,
                    alpha: a,
                });
                transmittance *= 1.0 - a;
                if transmittance < TRANSMITTANCE_STOP {
                    break;
                }
            }
            let cell = pass.feat_hat.cell_mut(x, y);
            let raw = &pass.feat_raw[i * c_low..(i + 1) * c_low];
            let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 1e-12 {
                for (o, v) in cell.iter_mut().zip(raw) {
                    *o = v / norm;
                }
            }
        }
    }
    pass
}

// ---------------------------------------------------------------------
// Gradients
// ---------------------------------------------------------------------

/// Accumulated gradients for every trainable attribute.
struct Gradients {
    color: Vec<[f64; 3]>,
    opacity: Vec<f64>,
    /// w.r.t. the raw (unnormalized) per-primitive feature vectors.
    feature: Vec<Vec<f64>>,
    dec_weights: Vec<f64>,
    dec_bias: Vec<f64>,
}

impl Gradients {
    fn zeros(scene: &SceneMap) -> Self {
        let c_low = scene.decoder.c_in;
        Gradients {
            color: vec![[0.0; 3]; scene.primitives.len()],
            opacity: vec![0.0; scene.primitives.len()],
            feature: vec![vec![0.0; c_low]; scene.primitives.len()],
            dec_weights: vec![0.0; scene.decoder.weights.len()],
            dec_bias: vec![0.0; scene.decoder.c_out],
        }
    }

    fn add(&mut self, other: &Gradients) {
        for (a, b) in self.color.iter_mut().zip(&other.color) {
            for ch in 0..3 {
                a[ch] += b[ch];
            }
        }
        for (a, b) in self.opacity.iter_mut().zip(&other.opacity) {
            *a += b;
        }
        for (a, b) in self.feature.iter_mut().zip(&other.feature) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        for (a, b) in self.dec_weights.iter_mut().zip(&other.dec_weights) {
            *a += b;
        }
        for (a, b) in self.dec_bias.iter_mut().zip(&other.dec_bias) {
            *a += b;
        }
    }
}

#[inline]
fn clamp_idx(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

/// Decodes the normalized feature plane to the target grid exactly as
/// `featurizer::decode_features` does, and backpropagates the feature
/// L1 loss into the decoder weights and the normalized feature plane.
/// Returns (loss, d loss / d feat_hat).
fn feature_loss_and_grads(
    scene: &SceneMap,
    feat_hat: &FeatureMap,
    target: &FeatureMap,
    grads: &mut Gradients,
) -> Result<(f64, Vec<f64>)> {
    let dec = &scene.decoder;
    let (ih, iw) = (feat_hat.height, feat_hat.width);
    let (th, tw) = (target.height, target.width);
    if target.channels != dec.c_out {
        return Err(Error::DimMismatch(format!(
            "target features have {} channels, decoder emits {}",
            target.channels, dec.c_out
        )));
    }
    let sx = iw as f64 / tw as f64;
    let sy = ih as f64 / th as f64;
    let n_total = (dec.c_out * th * tw) as f64;
    let mut d_feat_hat = vec![0.0; feat_hat.data.len()];
    let mut loss = 0.0;

    let conv_at = |px: usize, py: usize, acc: &mut [f64]| {
        for o in 0..dec.c_out {
            let mut v = dec.bias[o];
            for ky in 0..3 {
                let yy = clamp_idx(py as isize + ky as isize - 1, ih);
                for kx in 0..3 {
                    let xx = clamp_idx(px as isize + kx as isize - 1, iw);
                    let cell = feat_hat.cell(xx, yy);
                    for (i, &f) in cell.iter().enumerate() {
                        v += dec.tap(o, i, ky, kx) * f;
                    }
                }
            }
            acc[o] = v;
        }
    };

    let mut samples = [vec![0.0; dec.c_out], vec![0.0; dec.c_out], vec![0.0; dec.c_out], vec![0.0; dec.c_out]];
    for ty in 0..th {
        let fy = ((ty as f64 + 0.5) * sy - 0.5).clamp(0.0, (ih - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(ih - 1);
        let wy = fy - y0 as f64;
        for tx in 0..tw {
            let fx = ((tx as f64 + 0.5) * sx - 0.5).clamp(0.0, (iw - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(iw - 1);
            let wx = fx - x0 as f64;
            let corners = [(x0, y0), (x1, y0), (x0, y1), (x1, y1)];
            let weights = [
                (1.0 - wx) * (1.0 - wy),
                wx * (1.0 - wy),
                (1.0 - wx) * wy,
                wx * wy,
            ];
            for (s, &(cx, cy)) in samples.iter_mut().zip(&corners) {
                conv_at(cx, cy, s);
            }
            // bilinear blend, then the cell normalization
            // associate exactly as the decoder does, so a perfectly
            // reconstructed map yields bitwise-zero residuals
            let v: Vec<f64> = (0..dec.c_out)
                .map(|o| {
                    (samples[0][o] * (1.0 - wx) + samples[1][o] * wx) * (1.0 - wy)
                        + (samples[2][o] * (1.0 - wx) + samples[3][o] * wx) * wy
                })
                .collect();
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            let hat: Vec<f64> = if norm > 1e-12 {
                v.iter().map(|a| a / norm).collect()
            } else {
                v.clone()
            };
            let t = target.cell(tx, ty);
            let mut g_hat = vec![0.0; dec.c_out];
            for o in 0..dec.c_out {
                loss += (hat[o] - t[o]).abs();
                g_hat[o] = l1_sign(hat[o] - t[o]) / n_total;
            }
            // through the normalization
            let g_v: Vec<f64> = if norm > 1e-12 {
                let dot: f64 = g_hat.iter().zip(&hat).map(|(a, b)| a * b).sum();
                (0..dec.c_out).map(|o| (g_hat[o] - dot * hat[o]) / norm).collect()
            } else {
                g_hat
            };
            // through the bilinear blend into each conv sample
            for (c, &(cx, cy)) in corners.iter().enumerate() {
                let wgt = weights[c];
                if wgt == 0.0 {
                    continue;
                }
                for (o, &g) in g_v.iter().enumerate() {
                    let g = g * wgt;
                    grads.dec_bias[o] += g;
                    for ky in 0..3 {
                        let yy = clamp_idx(cy as isize + ky as isize - 1, ih);
                        for kx in 0..3 {
                            let xx = clamp_idx(cx as isize + kx as isize - 1, iw);
                            let cell_i = (yy * iw + xx) * dec.c_in;
                            for i in 0..dec.c_in {
                                let tap = ((o * dec.c_in + i) * 3 + ky) * 3 + kx;
                                grads.dec_weights[tap] += g * feat_hat.data[cell_i + i];
                                d_feat_hat[cell_i + i] += g * dec.weights[tap];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((loss / n_total, d_feat_hat))
}

/// Backpropagates per-pixel color and feature-plane gradients through
/// the compositing chain into primitive attributes.
fn backward_compositing(
    scene: &SceneMap,
    pass: &ForwardPass,
    d_color: &[f64],
    d_feat_hat: &[f64],
    grads: &mut Gradients,
) {
    let c_low = scene.decoder.c_in;
    // per-primitive normalized features and norms, for the f -> f_hat chain
    let norms: Vec<f64> = scene
        .primitives
        .iter()
        .map(|g| g.feature.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    let mut d_feat_splat: Vec<Vec<f64>> = vec![vec![0.0; c_low]; scene.primitives.len()];

    let have_feat = !d_feat_hat.is_empty();
    for i in 0..pass.width * pass.height {
        let recs = &pass.records[i];
        if recs.is_empty() {
            continue;
        }
        let gc = &d_color[3 * i..3 * i + 3];
        // gradient w.r.t. the raw composited feature vector
        let mut gf = vec![0.0; if have_feat { c_low } else { 0 }];
        if have_feat {
            let raw = &pass.feat_raw[i * c_low..(i + 1) * c_low];
            let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 1e-12 {
                let hat = pass.feat_hat.cell(i % pass.width, i / pass.width);
                let gh = &d_feat_hat[i * c_low..(i + 1) * c_low];
                let dot: f64 = gh.iter().zip(hat).map(|(a, b)| a * b).sum();
                for o in 0..c_low {
                    gf[o] = (gh[o] - dot * hat[o]) / norm;
                }
            }
        }
        // transmittance in front of each contribution
        let mut t = Vec::with_capacity(recs.len());
        let mut acc = 1.0;
        for r in recs {
            t.push(acc);
            acc *= 1.0 - r.alpha;
        }
        // suffix sums of weighted channel values, walked back-to-front
        let mut s_c = [0.0; 3];
        let mut s_f = vec![0.0; gf.len()];
        for (j, r) in recs.iter().enumerate().rev() {
            let p = r.prim as usize;
            let g = &scene.primitives[p];
            let weight = r.alpha * t[j];
            // channel gradients
            let mut d_a = 0.0;
            for ch in 0..3 {
                grads.color[p][ch] += weight * gc[ch];
                d_a += t[j] * g.color[ch] * gc[ch] - s_c[ch] * gc[ch] / (1.0 - r.alpha);
            }
            if have_feat {
                let fhat: Vec<f64> = if norms[p] > 1e-12 {
                    g.feature.iter().map(|v| v / norms[p]).collect()
                } else {
                    vec![0.0; c_low]
                };
                for o in 0..c_low {
                    d_feat_splat[p][o] += weight * gf[o];
                    d_a += t[j] * fhat[o] * gf[o] - s_f[o] * gf[o] / (1.0 - r.alpha);
                }
                for o in 0..c_low {
                    s_f[o] += weight * fhat[o];
                }
            }
            for ch in 0..3 {
                s_c[ch] += weight * g.color[ch];
            }
            // a = min(opacity * kernel, ALPHA_MAX): zero slope when clamped
            if r.alpha < ALPHA_MAX {
                grads.opacity[p] += r.kernel * d_a;
            }
        }
    }
    // through the per-splat feature normalization
    for (p, g) in scene.primitives.iter().enumerate() {
        if norms[p] <= 1e-12 {
            continue;
        }
        let hat: Vec<f64> = g.feature.iter().map(|v| v / norms[p]).collect();
        let dot: f64 = d_feat_splat[p].iter().zip(&hat).map(|(a, b)| a * b).sum();
        for o in 0..c_low {
            grads.feature[p][o] += (d_feat_splat[p][o] - dot * hat[o]) / norms[p];
        }
    }
}

/// Loss and analytic gradients of one view.
fn view_loss_and_grads(
    scene: &SceneMap,
    view: &FitView,
    cfg: &FitConfig,
    grads: &mut Gradients,
) -> Result<(f64, f64)> {
    let pass = forward(scene, &view.intrinsics, &view.pose);
    let rendered = Image::from_data(pass.width, pass.height, 3, pass.color.clone())?;
    let l_rgb = loss_rgb(&view.image, &rendered, cfg.lambda)?;
    let d_color = loss_rgb_grad(&view.image, &rendered, cfg.lambda);

    let (l_feat, d_feat_hat) = if cfg.gamma > 0.0 {
        let mut fg = Gradients::zeros(scene);
        let (l, mut d) = feature_loss_and_grads(scene, &pass.feat_hat, &view.features, &mut fg)?;
        for (a, b) in grads.dec_weights.iter_mut().zip(&fg.dec_weights) {
            *a += cfg.gamma * b;
        }
        for (a, b) in grads.dec_bias.iter_mut().zip(&fg.dec_bias) {
            *a += cfg.gamma * b;
        }
        d.iter_mut().for_each(|v| *v *= cfg.gamma);
        (l, d)
    } else {
        (0.0, Vec::new())
    };
    backward_compositing(scene, &pass, &d_color, &d_feat_hat, grads);
    Ok((l_rgb, l_feat))
}

/// Total loss of one view without gradients (used by finite differences).
fn view_loss(scene: &SceneMap, view: &FitView, cfg: &FitConfig) -> Result<f64> {
    let pass = forward(scene, &view.intrinsics, &view.pose);
    let rendered = Image::from_data(pass.width, pass.height, 3, pass.color.clone())?;
    let l_rgb = loss_rgb(&view.image, &rendered, cfg.lambda)?;
    let l_feat = if cfg.gamma > 0.0 {
        let mut fg = Gradients::zeros(scene);
        feature_loss_and_grads(scene, &pass.feat_hat, &view.features, &mut fg)?.0
    } else {
        0.0
    };
    Ok(l_rgb + cfg.gamma * l_feat)
}

/// Plain SGD on `L = L_rgb + gamma * L_feat` over the trainable
/// attributes; geometry stays fixed. Returns the fitted scene and the
/// per-iteration loss history.
pub fn fit(scene: &SceneMap, views: &[FitView], cfg: &FitConfig) -> Result<(SceneMap, Vec<LossRecord>)> {
    cfg.validate()?;
    if views.is_empty() {
        return Err(Error::InvalidInput("no supervision views".into()));
    }
    let mut scene = scene.clone();
    let mut history = Vec::with_capacity(cfg.iterations);
    for iter in 0..cfg.iterations {
        let mut grads = Gradients::zeros(&scene);
        let mut l_rgb_sum = 0.0;
        let mut l_feat_sum = 0.0;
        // deterministic accumulation: parallel per view, reduced in
        // view order
        let per_view: Vec<Result<(f64, f64, Gradients)>> = views
            .par_iter()
            .map(|v| {
                let mut g = Gradients::zeros(&scene);
                let (lr, lf) = view_loss_and_grads(&scene, v, cfg, &mut g)?;
                Ok((lr, lf, g))
            })
            .collect();
        for r in per_view {
            let (lr, lf, g) = r?;
            l_rgb_sum += lr;
            l_feat_sum += lf;
            grads.add(&g);
        }
        let nv = views.len() as f64;
        let l_rgb = l_rgb_sum / nv;
        let l_feat = l_feat_sum / nv;
        history.push(LossRecord {
            iter,
            loss: l_rgb + cfg.gamma * l_feat,
            loss_rgb: l_rgb,
            loss_feat: l_feat,
        });

        let step = cfg.learning_rate / nv;
        if cfg.train_color {
            for (g, d) in scene.primitives.iter_mut().zip(&grads.color) {
                for ch in 0..3 {
                    g.color[ch] = (g.color[ch] - step * d[ch]).clamp(0.0, 1.0);
                }
            }
        }
        if cfg.train_opacity {
            for (g, d) in scene.primitives.iter_mut().zip(&grads.opacity) {
                g.opacity = (g.opacity - step * d).clamp(OPACITY_MIN, OPACITY_MAX);
            }
        }
        if cfg.train_feature {
            for (g, d) in scene.primitives.iter_mut().zip(&grads.feature) {
                for (f, dv) in g.feature.iter_mut().zip(d) {
                    *f -= step * dv;
                }
            }
        }
        if cfg.train_decoder {
            for (w, d) in scene.decoder.weights.iter_mut().zip(&grads.dec_weights) {
                *w -= step * d;
            }
            for (b, d) in scene.decoder.bias.iter_mut().zip(&grads.dec_bias) {
                *b -= step * d;
            }
        }
    }
    Ok((scene, history))
}

/// Central finite differences (step 1e-4) against the analytic
/// gradients for every trainable attribute of a small scene; returns
/// the maximum relative error, where near-zero pairs are compared by
/// absolute difference.
pub fn gradient_check(scene: &SceneMap, view: &FitView, cfg: &FitConfig) -> Result<f64> {
    cfg.validate()?;
    let h = 1e-4;
    let mut grads = Gradients::zeros(scene);
    view_loss_and_grads(scene, view, cfg, &mut grads)?;

    let mut max_err = 0.0f64;
    let mut check = |analytic: f64, param: &mut dyn FnMut(&mut SceneMap) -> &mut f64| -> Result<()> {
        let mut probe = |delta: f64| -> Result<f64> {
            let mut s = scene.clone();
            *param(&mut s) += delta;
            view_loss(&s, view, cfg)
        };
        let fd = (probe(h)? - probe(-h)?) / (2.0 * h);
        let scale = analytic.abs().max(fd.abs());
        let err = if scale > 1e-3 {
            (analytic - fd).abs() / scale
        } else {
            (analytic - fd).abs()
        };
        max_err = max_err.max(err);
        Ok(())
    };

    let c_low = scene.decoder.c_in;
    for p in 0..scene.primitives.len() {
        if cfg.train_color {
            for ch in 0..3 {
                check(grads.color[p][ch], &mut |s| &mut s.primitives[p].color[ch])?;
            }
        }
        if cfg.train_opacity {
            check(grads.opacity[p], &mut |s| &mut s.primitives[p].opacity)?;
        }
        if cfg.train_feature && cfg.gamma > 0.0 {
            for o in 0..c_low {
                check(grads.feature[p][o], &mut |s| &mut s.primitives[p].feature[o])?;
            }
        }
    }
    if cfg.train_decoder && cfg.gamma > 0.0 {
        for wi in 0..scene.decoder.weights.len() {
            check(grads.dec_weights[wi], &mut |s| &mut s.decoder.weights[wi])?;
        }
        for bi in 0..scene.decoder.bias.len() {
            check(grads.dec_bias[bi], &mut |s| &mut s.decoder.bias[bi])?;
        }
    }
    Ok(max_err)
}
