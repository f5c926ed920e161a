//! Deterministic stand-ins for the learned components: dense coarse/fine
//! image encoders, global descriptors, sparse keypoints, and the
//! scene-specific feature decoder applied to rendered low-dim features.
//!
//! The dense encoders are gradient-orientation-histogram features with a
//! seeded fixed random projection, so everything here is a pure function
//! of the input bytes. Externally computed feature maps can be loaded
//! through the `io` module instead.

use nalgebra::Vector2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::Image;

/// Default feature dimension of the coarse encoder.
pub const COARSE_DIM: usize = 256;
/// Default feature dimension of the fine encoder.
pub const FINE_DIM: usize = 64;
/// Default global descriptor dimension.
pub const DESCRIPTOR_DIM: usize = COARSE_DIM;
/// Dimension of the raw per-cell statistics before projection: 8
/// gradient-orientation bins, 3 cell-mean colors and a 2x2 grid of
/// sub-block color deviations capturing the layout inside the cell.
pub const CELL_STATS_DIM: usize = 23;

pub const COARSE_STRIDE: usize = 8;
pub const FINE_STRIDE: usize = 1;

const COARSE_PROJECTION_SEED: u64 = 0x5eed_c0a5;
const FINE_PROJECTION_SEED: u64 = 0x5eed_f1fe;

/// Dense feature grid. Cell-major storage: `data[(y*w + x)*c + ch]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Pixels per cell.
    pub stride: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, stride: usize) -> Self {
        FeatureMap {
            channels,
            height,
            width,
            stride,
            data: vec![0.0; channels * height * width],
        }
    }

    #[inline]
    pub fn cell(&self, x: usize, y: usize) -> &[f64] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    #[inline]
    pub fn cell_mut(&mut self, x: usize, y: usize) -> &mut [f64] {
        let i = (y * self.width + x) * self.channels;
        &mut self.data[i..i + self.channels]
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    /// Center of a cell in pixel coordinates of the source image.
    pub fn cell_center(&self, x: usize, y: usize) -> Vector2<f64> {
        let s = self.stride as f64;
        Vector2::new((x as f64 + 0.5) * s - 0.5, (y as f64 + 0.5) * s - 0.5)
    }
}

/// 3x3 linear map lifting rendered low-dim features back to the encoder
/// dimension. Weight layout: `w[((o*c_in + i)*3 + ky)*3 + kx]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureDecoder {
    pub c_in: usize,
    pub c_out: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl FeatureDecoder {
    pub fn new(c_in: usize, c_out: usize, weights: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if weights.len() != c_out * c_in * 9 || bias.len() != c_out {
            return Err(Error::DimMismatch(format!(
                "decoder weights {} / bias {} for dims {}x{}",
                weights.len(),
                bias.len(),
                c_in,
                c_out
            )));
        }
        if !weights.iter().chain(bias.iter()).all(|v| v.is_finite()) {
            return Err(Error::InvalidInput("non-finite decoder weights".into()));
        }
        Ok(FeatureDecoder {
            c_in,
            c_out,
            weights,
            bias,
        })
    }

    /// Identity-like decoder: center tap = I, zero elsewhere, zero bias.
    pub fn identity(c: usize) -> Self {
        let mut weights = vec![0.0; c * c * 9];
        for i in 0..c {
            weights[((i * c + i) * 3 + 1) * 3 + 1] = 1.0;
        }
        FeatureDecoder {
            c_in: c,
            c_out: c,
            weights,
            bias: vec![0.0; c],
        }
    }

    /// Center-tap decoder from a dense `c_out x c_in` matrix (row-major).
    pub fn from_center_tap(c_in: usize, c_out: usize, matrix: &[f64]) -> Result<Self> {
        if matrix.len() != c_out * c_in {
            return Err(Error::DimMismatch("center tap matrix size".into()));
        }
        let mut weights = vec![0.0; c_out * c_in * 9];
        for o in 0..c_out {
            for i in 0..c_in {
                weights[((o * c_in + i) * 3 + 1) * 3 + 1] = matrix[o * c_in + i];
            }
        }
        FeatureDecoder::new(c_in, c_out, weights, vec![0.0; c_out])
    }

    pub fn random(c_in: usize, c_out: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = (0..c_out * c_in * 9)
            .map(|_| rng.gen::<f64>() - 0.5)
            .collect();
        let bias = (0..c_out).map(|_| 0.1 * (rng.gen::<f64>() - 0.5)).collect();
        FeatureDecoder {
            c_in,
            c_out,
            weights,
            bias,
        }
    }

    #[inline]
    pub fn tap(&self, o: usize, i: usize, ky: usize, kx: usize) -> f64 {
        self.weights[((o * self.c_in + i) * 3 + ky) * 3 + kx]
    }

    #[inline]
    pub fn center_tap(&self, o: usize, i: usize) -> f64 {
        self.tap(o, i, 1, 1)
    }
}

/// Unit-norm global image descriptor.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalDescriptor(pub Vec<f64>);

impl GlobalDescriptor {
    pub fn new(v: Vec<f64>) -> Result<Self> {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !(n.is_finite() && (n - 1.0).abs() <= 1e-6) {
            return Err(Error::InvalidInput(format!(
                "descriptor norm {n} is not unit"
            )));
        }
        Ok(GlobalDescriptor(v))
    }

    pub fn cosine(&self, other: &GlobalDescriptor) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }
}

#[derive(Debug, Clone)]
pub struct Keypoint {
    pub pos: Vector2<f64>,
    pub descriptor: Vec<f64>,
    pub response: f64,
}

pub type Keypoints = Vec<Keypoint>;

/// Fixed seeded projection matrix (`c x CELL_STATS_DIM`, row-major).
fn projection_matrix_dims(c: usize, in_dim: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (c as u64).wrapping_mul(0x9e37_79b9));
    (0..c * in_dim)
        .map(|_| {
            // Box-Muller; deterministic given the stream.
            let u1: f64 = rng.gen::<f64>().max(1e-12);
            let u2: f64 = rng.gen();
            (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
        })
        .collect()
}

fn projection_matrix(c: usize, seed: u64) -> Vec<f64> {
    projection_matrix_dims(c, CELL_STATS_DIM, seed)
}

pub fn coarse_projection_matrix(c: usize) -> Vec<f64> {
    projection_matrix(c, COARSE_PROJECTION_SEED)
}

/// Reflect-pad index into [0, n).
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    i = i.rem_euclid(period);
    if i >= n {
        i = period - i;
    }
    i as usize
}

struct PaddedGray {
    w: usize,
    h: usize,
    lum: Vec<f64>,
    mean_rgb: Vec<[f64; 3]>,
}

/// Reflect-pads an image so both dims divide `stride`, precomputing
/// luminance and per-pixel color.
fn pad_to_stride(image: &Image, stride: usize) -> PaddedGray {
    let w = image.width.div_ceil(stride) * stride;
    let h = image.height.div_ceil(stride) * stride;
    let mut lum = vec![0.0; w * h];
    let mut mean_rgb = vec![[0.0; 3]; w * h];
    for y in 0..h {
        let sy = reflect(y as isize, image.height);
        for x in 0..w {
            let sx = reflect(x as isize, image.width);
            let p = image.pixel(sx, sy);
            let rgb = match image.channels {
                1 => [p[0], p[0], p[0]],
                _ => [p[0], p[1 % image.channels], p[2 % image.channels]],
            };
            mean_rgb[y * w + x] = rgb;
            lum[y * w + x] = match image.channels {
                1 => p[0],
                3 => 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2],
                c => p.iter().sum::<f64>() / c as f64,
            };
        }
    }
    PaddedGray { w, h, lum, mean_rgb }
}

#[inline]
fn gradient(lum: &[f64], w: usize, h: usize, x: usize, y: usize) -> (f64, f64) {
    let xm = x.saturating_sub(1);
    let xp = (x + 1).min(w - 1);
    let ym = y.saturating_sub(1);
    let yp = (y + 1).min(h - 1);
    (
        (lum[y * w + xp] - lum[y * w + xm]) / 2.0,
        (lum[yp * w + x] - lum[ym * w + x]) / 2.0,
    )
}

/// Raw statistics of one `stride x stride` cell: mean-centered orientation
/// histogram (8 bins) plus centered mean color (3).
fn cell_stats(p: &PaddedGray, cx: usize, cy: usize, stride: usize) -> [f64; CELL_STATS_DIM] {
    let mut hist = [0.0f64; 8];
    let mut rgb = [0.0f64; 3];
    // 2x2 sub-blocks in row-major order
    let mut sub = [[0.0f64; 3]; 4];
    let x0 = cx * stride;
    let y0 = cy * stride;
    let half = (stride / 2).max(1);
    for y in y0..y0 + stride {
        for x in x0..x0 + stride {
            let (gx, gy) = gradient(&p.lum, p.w, p.h, x, y);
            let mag = (gx * gx + gy * gy).sqrt();
            if mag > 0.0 {
                let angle = gy.atan2(gx) + std::f64::consts::PI;
                let mut bin = (angle / std::f64::consts::TAU * 8.0) as usize;
                if bin >= 8 {
                    bin = 7;
                }
                hist[bin] += mag;
            }
            let c = p.mean_rgb[y * p.w + x];
            let b = ((y - y0) / half).min(1) * 2 + ((x - x0) / half).min(1);
            for i in 0..3 {
                rgb[i] += c[i];
                sub[b][i] += c[i];
            }
        }
    }
    let n = (stride * stride) as f64;
    // per-pixel scale so no stat group dominates the projection
    let hmean = hist.iter().sum::<f64>() / 8.0;
    let mut v = [0.0; CELL_STATS_DIM];
    for (i, h) in hist.iter().enumerate() {
        v[i] = (h - hmean) / n;
    }
    for i in 0..3 {
        v[8 + i] = rgb[i] / n - 0.5;
    }
    let quarter = n / 4.0;
    for (b, block) in sub.iter().enumerate() {
        for i in 0..3 {
            v[11 + b * 3 + i] = block[i] / quarter - (v[8 + i] + 0.5);
        }
    }
    v
}

fn encode_with(image: &Image, c: usize, stride: usize, seed: u64) -> Result<FeatureMap> {
    if image.is_empty() {
        return Err(Error::InvalidInput("empty image".into()));
    }
    let proj = projection_matrix(c, seed);
    let padded = pad_to_stride(image, stride);
    let gw = padded.w / stride;
    let gh = padded.h / stride;
    let mut map = FeatureMap::new(c, gh, gw, stride);
    // Fallback direction for featureless cells: first projection column.
    let mut fallback: Vec<f64> = (0..c).map(|o| proj[o * CELL_STATS_DIM]).collect();
    let fnorm = fallback.iter().map(|x| x * x).sum::<f64>().sqrt();
    fallback.iter_mut().for_each(|x| *x /= fnorm);

    for cy in 0..gh {
        for cx in 0..gw {
            let stats = cell_stats(&padded, cx, cy, stride);
            let out = map.cell_mut(cx, cy);
            for o in 0..c {
                let row = &proj[o * CELL_STATS_DIM..(o + 1) * CELL_STATS_DIM];
                out[o] = row.iter().zip(stats.iter()).map(|(a, b)| a * b).sum();
            }
            let norm = out.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-12 {
                out.iter_mut().for_each(|x| *x /= norm);
            } else {
                out.copy_from_slice(&fallback);
            }
        }
    }
    Ok(map)
}

/// Coarse dense encoder: stride-8 grid of unit-norm features.
pub fn encode_coarse(image: &Image) -> Result<FeatureMap> {
    encode_coarse_dim(image, COARSE_DIM)
}

pub fn encode_coarse_dim(image: &Image, c: usize) -> Result<FeatureMap> {
    encode_with(image, c, COARSE_STRIDE, COARSE_PROJECTION_SEED)
}

/// Fine patch support: pixels beyond the stride cell on each side.
const FINE_PATCH_MARGIN: usize = 2;

/// Fine per-cell descriptor: the mean-centered RGB patch around the
/// cell (cell pixels plus a margin ring), randomly projected to `c`
/// dims and L2-normalized, so inner products behave like normalized
/// cross-correlation of local patches.
fn encode_fine_one(image: &Image, c: usize) -> Result<FeatureMap> {
    if image.is_empty() {
        return Err(Error::InvalidInput("empty image".into()));
    }
    let stride = FINE_STRIDE;
    let side = stride + 2 * FINE_PATCH_MARGIN;
    let in_dim = side * side * 3;
    let proj = projection_matrix_dims(c, in_dim, FINE_PROJECTION_SEED);
    let padded = pad_to_stride(image, stride);
    let gw = padded.w / stride;
    let gh = padded.h / stride;
    let mut map = FeatureMap::new(c, gh, gw, stride);
    let mut fallback: Vec<f64> = (0..c).map(|o| proj[o * in_dim]).collect();
    let fnorm = fallback.iter().map(|x| x * x).sum::<f64>().sqrt();
    fallback.iter_mut().for_each(|x| *x /= fnorm);

    let mut patch = vec![0.0f64; in_dim];
    for cy in 0..gh {
        for cx in 0..gw {
            let x0 = (cx * stride) as isize - FINE_PATCH_MARGIN as isize;
            let y0 = (cy * stride) as isize - FINE_PATCH_MARGIN as isize;
            let mut mean = [0.0f64; 3];
            for py in 0..side {
                let sy = (y0 + py as isize).clamp(0, padded.h as isize - 1) as usize;
                for px in 0..side {
                    let sx = (x0 + px as isize).clamp(0, padded.w as isize - 1) as usize;
                    let rgb = padded.mean_rgb[sy * padded.w + sx];
                    for ch in 0..3 {
                        patch[(py * side + px) * 3 + ch] = rgb[ch];
                        mean[ch] += rgb[ch];
                    }
                }
            }
            let n = (side * side) as f64;
            for v in mean.iter_mut() {
                *v /= n;
            }
            for i in 0..side * side {
                for ch in 0..3 {
                    patch[i * 3 + ch] -= mean[ch];
                }
            }
            let out = map.cell_mut(cx, cy);
            for o in 0..c {
                let row = &proj[o * in_dim..(o + 1) * in_dim];
                out[o] = row.iter().zip(patch.iter()).map(|(a, b)| a * b).sum();
            }
            let norm = out.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-12 {
                out.iter_mut().for_each(|x| *x /= norm);
            } else {
                out.copy_from_slice(&fallback);
            }
        }
    }
    Ok(map)
}

/// Fine encoder applied to a query/reference pair, stride-2 grids.
pub fn encode_fine(image_q: &Image, image_r: &Image) -> Result<(FeatureMap, FeatureMap)> {
    Ok((
        encode_fine_one(image_q, FINE_DIM)?,
        encode_fine_one(image_r, FINE_DIM)?,
    ))
}

/// Spatial regions per image side in the global descriptor.
const DESCRIPTOR_GRID: usize = 4;
const DESCRIPTOR_REGION_SEED: u64 = 0x5eed_41eb;

/// Global descriptor: signed generalized-mean pooling (p = 3) of the
/// coarse feature grid over a 4x4 spatial grid of regions, each region
/// projected down and concatenated, L2-normalized. The spatial layout
/// keeps the descriptor viewpoint-discriminative even when image
/// statistics are stationary.
pub fn global_descriptor(image: &Image) -> Result<GlobalDescriptor> {
    let map = encode_coarse_dim(image, DESCRIPTOR_DIM)?;
    let g = DESCRIPTOR_GRID;
    let sub = DESCRIPTOR_DIM / (g * g);
    let proj = projection_matrix_dims(sub, DESCRIPTOR_DIM, DESCRIPTOR_REGION_SEED);
    let mut out = vec![0.0f64; g * g * sub];
    for ry in 0..g {
        let y0 = ry * map.height / g;
        let y1 = ((ry + 1) * map.height / g).max(y0 + 1).min(map.height);
        for rx in 0..g {
            let x0 = rx * map.width / g;
            let x1 = ((rx + 1) * map.width / g).max(x0 + 1).min(map.width);
            let mut pooled = vec![0.0f64; map.channels];
            for y in y0..y1 {
                for x in x0..x1 {
                    let cell = map.cell(x, y);
                    for (p, v) in pooled.iter_mut().zip(cell) {
                        *p += v * v * v;
                    }
                }
            }
            let n = ((y1 - y0) * (x1 - x0)) as f64;
            for p in pooled.iter_mut() {
                let m = *p / n;
                *p = m.signum() * m.abs().cbrt();
            }
            let slot = &mut out[(ry * g + rx) * sub..(ry * g + rx + 1) * sub];
            for (o, s) in slot.iter_mut().enumerate() {
                let row = &proj[o * DESCRIPTOR_DIM..(o + 1) * DESCRIPTOR_DIM];
                *s = row.iter().zip(pooled.iter()).map(|(a, b)| a * b).sum();
            }
        }
    }
    let norm = out.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 1e-12 {
        out.iter_mut().for_each(|x| *x /= norm);
    } else {
        out[0] = 1.0;
    }
    GlobalDescriptor::new(out)
}

const PATCH_RADIUS: usize = 8;

/// Harris corners with a 4x4-cell gradient-orientation descriptor (128-d).
/// Deterministic; a flat image yields an empty list.
pub fn detect_keypoints(image: &Image, max_n: usize) -> Keypoints {
    if image.is_empty() || max_n == 0 {
        return Vec::new();
    }
    let w = image.width;
    let h = image.height;
    let lum = image.luminance();
    if w <= 2 * PATCH_RADIUS || h <= 2 * PATCH_RADIUS {
        return Vec::new();
    }

    let mut gx = vec![0.0; w * h];
    let mut gy = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = gradient(&lum, w, h, x, y);
            gx[y * w + x] = dx;
            gy[y * w + x] = dy;
        }
    }

    // Harris response with a flat 5x5 structure-tensor window.
    let mut response = vec![0.0; w * h];
    let margin = PATCH_RADIUS;
    for y in margin..h - margin {
        for x in margin..w - margin {
            let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
            for dy in -2isize..=2 {
                for dx in -2isize..=2 {
                    let i = (y as isize + dy) as usize * w + (x as isize + dx) as usize;
                    sxx += gx[i] * gx[i];
                    syy += gy[i] * gy[i];
                    sxy += gx[i] * gy[i];
                }
            }
            let det = sxx * syy - sxy * sxy;
            let tr = sxx + syy;
            response[y * w + x] = det - 0.06 * tr * tr;
        }
    }

    let max_r = response.iter().cloned().fold(0.0f64, f64::max);
    if max_r <= 1e-12 {
        return Vec::new();
    }
    let threshold = (0.01 * max_r).max(1e-10);

    let mut found: Keypoints = Vec::new();
    for y in margin..h - margin {
        for x in margin..w - margin {
            let r = response[y * w + x];
            if r < threshold {
                continue;
            }
            // 3x3 non-maximum suppression; ties resolved toward the
            // earlier pixel in scan order.
            let mut is_max = true;
            'nms: for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    let rn = response[(y as isize + dy) as usize * w + (x as isize + dx) as usize];
                    if rn > r || (rn == r && (dy < 0 || (dy == 0 && dx < 0))) {
                        is_max = false;
                        break 'nms;
                    }
                }
            }
            if !is_max {
                continue;
            }
            let descriptor = keypoint_descriptor(&gx, &gy, w, x, y);
            found.push(Keypoint {
                pos: Vector2::new(x as f64, y as f64),
                descriptor,
                response: r,
            });
        }
    }
    found.sort_by(|a, b| {
        b.response
            .partial_cmp(&a.response)
            .unwrap()
            .then_with(|| (a.pos.y, a.pos.x).partial_cmp(&(b.pos.y, b.pos.x)).unwrap())
    });
    found.truncate(max_n);
    found
}

/// 16x16 patch, 4x4 cells, 8 orientation bins each, unit-normalized.
fn keypoint_descriptor(gx: &[f64], gy: &[f64], w: usize, x: usize, y: usize) -> Vec<f64> {
    let mut desc = vec![0.0; 128];
    for dy in 0..16 {
        for dx in 0..16 {
            let px = x + dx - PATCH_RADIUS;
            let py = y + dy - PATCH_RADIUS;
            let i = py * w + px;
            let mag = (gx[i] * gx[i] + gy[i] * gy[i]).sqrt();
            if mag <= 0.0 {
                continue;
            }
            let angle = gy[i].atan2(gx[i]) + std::f64::consts::PI;
            let mut bin = (angle / std::f64::consts::TAU * 8.0) as usize;
            if bin >= 8 {
                bin = 7;
            }
            let cell = (dy / 4) * 4 + dx / 4;
            desc[cell * 8 + bin] += mag;
        }
    }
    let norm = desc.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 1e-12 {
        desc.iter_mut().for_each(|v| *v /= norm);
    }
    desc
}

#[inline]
fn clamp_idx(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

/// Decodes a rendered low-dim feature plane: 3x3 correlation with clamp
/// padding, bilinear resize to `target` (h, w), per-cell L2 normalize.
/// The convolution is evaluated only at the pixels the resize samples.
pub fn decode_features(
    f_low: &FeatureMap,
    decoder: &FeatureDecoder,
    target: (usize, usize),
) -> Result<FeatureMap> {
    if f_low.channels != decoder.c_in {
        return Err(Error::DimMismatch(format!(
            "feature map has {} channels, decoder expects {}",
            f_low.channels, decoder.c_in
        )));
    }
    let (th, tw) = target;
    if th == 0 || tw == 0 {
        return Err(Error::DimMismatch("empty decode target".into()));
    }
    let (ih, iw) = (f_low.height, f_low.width);
    let out_stride = ((iw * f_low.stride) as f64 / tw as f64).round().max(1.0) as usize;
    let mut out = FeatureMap::new(decoder.c_out, th, tw, out_stride);

    let sx = iw as f64 / tw as f64;
    let sy = ih as f64 / th as f64;

    let conv_at = |px: usize, py: usize, acc: &mut [f64]| {
        for o in 0..decoder.c_out {
            let mut v = decoder.bias[o];
            for ky in 0..3 {
                let yy = clamp_idx(py as isize + ky as isize - 1, ih);
                for kx in 0..3 {
                    let xx = clamp_idx(px as isize + kx as isize - 1, iw);
                    let cell = f_low.cell(xx, yy);
                    for (i, &f) in cell.iter().enumerate() {
                        v += decoder.tap(o, i, ky, kx) * f;
                    }
                }
            }
            acc[o] = v;
        }
    };

    let mut c00 = vec![0.0; decoder.c_out];
    let mut c10 = vec![0.0; decoder.c_out];
    let mut c01 = vec![0.0; decoder.c_out];
    let mut c11 = vec![0.0; decoder.c_out];
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
            conv_at(x0, y0, &mut c00);
            conv_at(x1, y0, &mut c10);
            conv_at(x0, y1, &mut c01);
            conv_at(x1, y1, &mut c11);
            let cell = out.cell_mut(tx, ty);
            for o in 0..decoder.c_out {
                cell[o] = (c00[o] * (1.0 - wx) + c10[o] * wx) * (1.0 - wy)
                    + (c01[o] * (1.0 - wx) + c11[o] * wx) * wy;
            }
            let norm = cell.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 1e-12 {
                cell.iter_mut().for_each(|v| *v /= norm);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn textured(w: usize, h: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut img = Image::new(w, h, 3);
        for v in img.data.iter_mut() {
            *v = rng.gen();
        }
        img
    }

    /// Smooth multi-frequency texture so shifted copies stay comparable.
    fn wave_texture(w: usize, h: usize, phase: f64) -> Image {
        let mut img = Image::new(w, h, 3);
        for y in 0..h {
            for x in 0..w {
                let (xf, yf) = (x as f64 + phase, y as f64);
                let p = img.pixel_mut(x, y);
                p[0] = 0.5 + 0.4 * (0.37 * xf + 0.11 * yf).sin() * (0.23 * yf).cos();
                p[1] = 0.5 + 0.3 * (0.19 * xf - 0.29 * yf).sin();
                p[2] = 0.5 + 0.35 * (0.13 * xf + 0.41 * yf).cos();
            }
        }
        img
    }

    #[test]
    fn coarse_constant_image_uniform() {
        let mut img = Image::new(32, 32, 3);
        img.data.fill(0.3);
        let map = encode_coarse_dim(&img, 32).unwrap();
        let first = map.cell(0, 0).to_vec();
        for y in 0..map.height {
            for x in 0..map.width {
                assert_eq!(map.cell(x, y), &first[..]);
            }
        }
    }

    #[test]
    fn coarse_shift_equivariance() {
        let full = wave_texture(96, 64, 0.0);
        let shifted = wave_texture(96, 64, 8.0);
        let a = encode_coarse_dim(&full, 64).unwrap();
        let b = encode_coarse_dim(&shifted, 64).unwrap();
        // shifted(x) == full(x + 8): grid of b shifted by one cell.
        for y in 1..a.height - 1 {
            for x in 1..a.width - 2 {
                let ca = a.cell(x + 1, y);
                let cb = b.cell(x, y);
                let diff: f64 = ca
                    .iter()
                    .zip(cb)
                    .map(|(u, v)| (u - v).abs())
                    .fold(0.0, f64::max);
                assert!(diff < 1e-6, "cell ({x},{y}) differs by {diff}");
            }
        }
    }

    #[test]
    fn coarse_distinctiveness() {
        let a = encode_coarse_dim(&textured(64, 64, 1), 64).unwrap();
        let b = encode_coarse_dim(&textured(64, 64, 2), 64).unwrap();
        let mut total = 0.0;
        for i in 0..a.cells() {
            let ca = &a.data[i * 64..(i + 1) * 64];
            let cb = &b.data[i * 64..(i + 1) * 64];
            total += ca.iter().zip(cb).map(|(u, v)| u * v).sum::<f64>();
        }
        let mean = total / a.cells() as f64;
        assert!(mean < 0.5, "mean cosine {mean}");
    }

    #[test]
    fn fine_shift_equivariance_and_determinism() {
        let full = wave_texture(64, 48, 0.0);
        let shifted = wave_texture(64, 48, 2.0);
        let (a, a2) = encode_fine(&full, &full).unwrap();
        assert_eq!(a, a2);
        let (_, b) = encode_fine(&full, &shifted).unwrap();
        let s = 2 / FINE_STRIDE; // the 2 px shift in fine cells
        let m = FINE_PATCH_MARGIN.div_ceil(FINE_STRIDE) + 1; // skip border-clamped patches
        for y in m..a.height - m {
            for x in m..a.width - m - s {
                let ca = a.cell(x + s, y);
                let cb = b.cell(x, y);
                let diff: f64 = ca
                    .iter()
                    .zip(cb)
                    .map(|(u, v)| (u - v).abs())
                    .fold(0.0, f64::max);
                assert!(diff < 1e-6, "cell ({x},{y}) differs by {diff}");
            }
        }
    }

    #[test]
    fn fine_constant_uniform() {
        let mut img = Image::new(16, 16, 3);
        img.data.fill(0.25);
        let (a, _) = encode_fine(&img, &img).unwrap();
        let first = a.cell(0, 0).to_vec();
        for i in 0..a.cells() {
            assert_eq!(&a.data[i * a.channels..(i + 1) * a.channels], &first[..]);
        }
    }

    #[test]
    fn global_descriptor_unit_and_self_similar() {
        let img = textured(64, 64, 3);
        let d = global_descriptor(&img).unwrap();
        let n: f64 = d.0.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-9);
        assert!((d.cosine(&global_descriptor(&img).unwrap()) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn keypoints_flat_image_empty() {
        let mut img = Image::new(64, 64, 1);
        img.data.fill(0.5);
        assert!(detect_keypoints(&img, 100).is_empty());
    }

    #[test]
    fn keypoints_square_corners() {
        let mut img = Image::new(64, 64, 1);
        for y in 20..44 {
            for x in 20..44 {
                img.pixel_mut(x, y)[0] = 1.0;
            }
        }
        let kps = detect_keypoints(&img, 16);
        let truth = [(20.0, 20.0), (43.0, 20.0), (20.0, 43.0), (43.0, 43.0)];
        for (tx, ty) in truth {
            let best = kps
                .iter()
                .map(|k| ((k.pos.x - tx).powi(2) + (k.pos.y - ty).powi(2)).sqrt())
                .fold(f64::INFINITY, f64::min);
            assert!(best <= 2.0, "corner ({tx},{ty}) nearest detection {best}");
        }
    }

    #[test]
    fn keypoints_deterministic() {
        let img = textured(64, 64, 7);
        let a = detect_keypoints(&img, 50);
        let b = detect_keypoints(&img, 50);
        assert_eq!(a.len(), b.len());
        for (ka, kb) in a.iter().zip(&b) {
            assert_eq!(ka.pos, kb.pos);
            assert_eq!(ka.descriptor, kb.descriptor);
        }
    }

    fn random_feature_map(c: usize, h: usize, w: usize, seed: u64) -> FeatureMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = FeatureMap::new(c, h, w, 1);
        for v in m.data.iter_mut() {
            *v = rng.gen::<f64>() - 0.5;
        }
        m
    }

    #[test]
    fn decode_identity_kernel() {
        let f = random_feature_map(6, 10, 12, 11);
        let out = decode_features(&f, &FeatureDecoder::identity(6), (10, 12)).unwrap();
        for i in 0..f.cells() {
            let input = &f.data[i * 6..(i + 1) * 6];
            let norm = input.iter().map(|v| v * v).sum::<f64>().sqrt();
            for (o, v) in out.data[i * 6..(i + 1) * 6].iter().enumerate() {
                assert!((v - input[o] / norm).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn decode_constant_plane_constant_output() {
        let mut f = FeatureMap::new(4, 8, 8, 1);
        for i in 0..f.cells() {
            for c in 0..4 {
                f.data[i * 4 + c] = 0.1 * (c as f64 + 1.0);
            }
        }
        let out = decode_features(&f, &FeatureDecoder::random(4, 8, 5), (4, 4)).unwrap();
        let first = out.cell(0, 0).to_vec();
        for i in 0..out.cells() {
            for c in 0..8 {
                assert!((out.data[i * 8 + c] - first[c]).abs() < 1e-9);
            }
        }
    }

    /// Naive dense 3x3 correlation + resize + normalize oracle.
    fn decode_oracle(f: &FeatureMap, d: &FeatureDecoder, target: (usize, usize)) -> Vec<f64> {
        let (ih, iw) = (f.height, f.width);
        let mut dense = vec![0.0; d.c_out * ih * iw];
        for y in 0..ih {
            for x in 0..iw {
                for o in 0..d.c_out {
                    let mut v = d.bias[o];
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let yy = (y as isize + ky - 1).clamp(0, ih as isize - 1) as usize;
                            let xx = (x as isize + kx - 1).clamp(0, iw as isize - 1) as usize;
                            for i in 0..d.c_in {
                                v += d.weights[((o * d.c_in + i) * 3 + ky as usize) * 3 + kx as usize]
                                    * f.data[(yy * iw + xx) * d.c_in + i];
                            }
                        }
                    }
                    dense[(y * iw + x) * d.c_out + o] = v;
                }
            }
        }
        let (th, tw) = target;
        let mut out = vec![0.0; d.c_out * th * tw];
        for ty in 0..th {
            let fy = ((ty as f64 + 0.5) * ih as f64 / th as f64 - 0.5).clamp(0.0, (ih - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(ih - 1);
            let wy = fy - y0 as f64;
            for tx in 0..tw {
                let fx =
                    ((tx as f64 + 0.5) * iw as f64 / tw as f64 - 0.5).clamp(0.0, (iw - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(iw - 1);
                let wx = fx - x0 as f64;
                let cell = &mut out[(ty * tw + tx) * d.c_out..(ty * tw + tx + 1) * d.c_out];
                for o in 0..d.c_out {
                    let g = |yy: usize, xx: usize| dense[(yy * iw + xx) * d.c_out + o];
                    cell[o] = (g(y0, x0) * (1.0 - wx) + g(y0, x1) * wx) * (1.0 - wy)
                        + (g(y1, x0) * (1.0 - wx) + g(y1, x1) * wx) * wy;
                }
                let n = cell.iter().map(|v| v * v).sum::<f64>().sqrt();
                if n > 1e-12 {
                    cell.iter_mut().for_each(|v| *v /= n);
                }
            }
        }
        out
    }

    #[test]
    fn decode_matches_naive_convolution() {
        let f = random_feature_map(5, 12, 16, 21);
        let d = FeatureDecoder::random(5, 7, 22);
        let out = decode_features(&f, &d, (6, 8)).unwrap();
        let oracle = decode_oracle(&f, &d, (6, 8));
        for (a, b) in out.data.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn decode_dim_mismatch() {
        let f = random_feature_map(5, 4, 4, 1);
        assert!(decode_features(&f, &FeatureDecoder::identity(4), (4, 4)).is_err());
    }
}
