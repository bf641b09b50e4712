//! Parameter-free refinement of localizer scores by local colour affinity, and
//! the self-supervised loss built on the refined maps.

use candle_core::{Device, Tensor};

use crate::error::{Error, Result};
use crate::ops;
use crate::pooling::NormalizedMap;

pub const DILATIONS: [usize; 5] = [1, 2, 4, 8, 12];
pub const DEFAULT_ITERATIONS: usize = 10;
pub const BACKGROUND_THRESHOLD: f64 = 0.7;
pub const FOREGROUND_THRESHOLD: f64 = 0.6;

/// Neighbour offsets: the centre, then the eight 3x3 neighbours at every
/// dilation.
pub fn neighbourhood(dilations: &[usize]) -> Vec<(isize, isize)> {
    let mut out = vec![(0, 0)];
    for &d in dilations {
        let d = d as isize;
        for dy in [-d, 0, d] {
            for dx in [-d, 0, d] {
                if (dy, dx) != (0, 0) {
                    out.push((dy, dx));
                }
            }
        }
    }
    out
}

/// Per-pixel convex weights over the neighbourhood, one field per image.
#[derive(Debug, Clone)]
pub struct AffinityField {
    batch: usize,
    height: usize,
    width: usize,
    offsets: Vec<(isize, isize)>,
    /// `[b][i][n]`, zero for out-of-bounds neighbours.
    weights: Vec<f64>,
}

impl AffinityField {
    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn spatial(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn offsets(&self) -> &[(isize, isize)] {
        &self.offsets
    }

    /// Weights of pixel `(y, x)` of image `b`, aligned with [`Self::offsets`].
    pub fn weights_at(&self, b: usize, y: usize, x: usize) -> &[f64] {
        let k = self.offsets.len();
        let start = ((b * self.height + y) * self.width + x) * k;
        &self.weights[start..start + k]
    }

    fn neighbour(&self, y: usize, x: usize, (dy, dx): (isize, isize)) -> Option<usize> {
        let ny = y as isize + dy;
        let nx = x as isize + dx;
        if ny < 0 || nx < 0 || ny >= self.height as isize || nx >= self.width as isize {
            return None;
        }
        Some(ny as usize * self.width + nx as usize)
    }
}

/// Affinities from an `(N, 3, H, W)` image already at score-map resolution.
pub fn compute_affinity(image: &Tensor) -> Result<AffinityField> {
    compute_affinity_with(image, &DILATIONS)
}

pub fn compute_affinity_with(image: &Tensor, dilations: &[usize]) -> Result<AffinityField> {
    let (n, channels, h, w) = image.dims4()?;
    let pixels = ops::to_f64_vec(image)?;
    if pixels.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericInput("affinity image"));
    }
    let offsets = neighbourhood(dilations);
    let k = offsets.len();
    let mut field = AffinityField {
        batch: n,
        height: h,
        width: w,
        offsets,
        weights: vec![0.0; n * h * w * k],
    };
    let hw = h * w;
    for b in 0..n {
        let img = &pixels[b * channels * hw..(b + 1) * channels * hw];

        // Per-channel spread of intensity differences over all valid pairs.
        let mut scale = vec![0.0; channels];
        for (c, s) in scale.iter_mut().enumerate() {
            let plane = &img[c * hw..(c + 1) * hw];
            let (mut sum, mut sq, mut count) = (0.0, 0.0, 0.0);
            for y in 0..h {
                for x in 0..w {
                    for &off in &field.offsets {
                        if let Some(j) = field.neighbour(y, x, off) {
                            let d = plane[y * w + x] - plane[j];
                            sum += d;
                            sq += d * d;
                            count += 1.0;
                        }
                    }
                }
            }
            let mean = sum / count;
            *s = (sq / count - mean * mean).max(0.0).sqrt().max(1e-8);
        }

        let mut kernel = vec![f64::NEG_INFINITY; k];
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                for (slot, &off) in kernel.iter_mut().zip(&field.offsets) {
                    *slot = match field.neighbour(y, x, off) {
                        Some(j) => {
                            let total: f64 = (0..channels)
                                .map(|c| {
                                    let d = img[c * hw + i] - img[c * hw + j];
                                    -d * d / (2.0 * scale[c] * scale[c])
                                })
                                .sum();
                            total / channels as f64
                        }
                        None => f64::NEG_INFINITY,
                    };
                }
                let peak = kernel.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let start = (b * hw + i) * k;
                let row = &mut field.weights[start..start + k];
                let mut norm = 0.0;
                for (wt, kv) in row.iter_mut().zip(&kernel) {
                    *wt = (kv - peak).exp();
                    norm += *wt;
                }
                row.iter_mut().for_each(|wt| *wt /= norm);
            }
        }
    }
    Ok(field)
}

/// Repeated affinity-weighted averaging of `m`. The result is detached.
pub fn pamr_refine(m: &NormalizedMap, affinity: &AffinityField, iterations: usize) -> Result<NormalizedMap> {
    let probs = m.probs();
    let (n, c, h, w) = probs.dims4()?;
    if (n, (h, w)) != (affinity.batch, affinity.spatial()) {
        return Err(Error::shape(format!(
            "scores {:?} vs affinity over {} images of {:?}",
            probs.dims(),
            affinity.batch,
            affinity.spatial()
        )));
    }
    if iterations == 0 {
        return Ok(m.detach());
    }
    let hw = h * w;
    let k = affinity.offsets.len();
    let mut current = ops::to_f64_vec(probs)?;
    let mut next = vec![0.0; current.len()];
    for _ in 0..iterations {
        for b in 0..n {
            for y in 0..h {
                for x in 0..w {
                    let i = y * w + x;
                    let weights = affinity.weights_at(b, y, x);
                    for ch in 0..c {
                        next[(b * c + ch) * hw + i] = 0.0;
                    }
                    for (slot, &off) in affinity.offsets.iter().enumerate().take(k) {
                        let Some(j) = affinity.neighbour(y, x, off) else { continue };
                        let wt = weights[slot];
                        for ch in 0..c {
                            next[(b * c + ch) * hw + i] += wt * current[(b * c + ch) * hw + j];
                        }
                    }
                }
            }
        }
        std::mem::swap(&mut current, &mut next);
    }
    let refined = Tensor::from_vec(current, (n, c, h, w), &Device::Cpu)?
        .to_device(probs.device())?
        .to_dtype(probs.dtype())?;
    NormalizedMap::from_probs(refined)
}

/// Hard pseudo ground truth from a refined map, plus the per-class mass of
/// the refined map used to weight the loss.
#[derive(Debug, Clone, PartialEq)]
pub struct RefinedPseudoGT {
    batch: usize,
    height: usize,
    width: usize,
    num_classes: usize,
    /// Channel index per pixel, `None` for ignored pixels.
    labels: Vec<Option<usize>>,
    /// `M_c` per image, `[b][c]`.
    mass: Vec<f64>,
}

impl RefinedPseudoGT {
    pub fn labels(&self) -> &[Option<usize>] {
        &self.labels
    }

    pub fn mass(&self, b: usize, c: usize) -> f64 {
        self.mass[b * self.num_classes + c]
    }

    pub fn pixels_per_image(&self) -> usize {
        self.height * self.width
    }

    /// `w_c = (|I| − M_c) / (1 + |I|)`.
    pub fn class_weight(&self, b: usize, c: usize) -> f64 {
        let area = self.pixels_per_image() as f64;
        (area - self.mass(b, c)) / (1.0 + area)
    }
}

/// Thresholds each class map at a fraction of its per-image maximum; pixels
/// claimed by no class or by several are ignored.
pub fn pseudo_gt_from_refined(m_ref: &NormalizedMap) -> Result<RefinedPseudoGT> {
    pseudo_gt_from_refined_masked(m_ref, None)
}

/// As [`pseudo_gt_from_refined`], skipping classes marked absent for an
/// image (`allowed[b][c] == false`).
pub fn pseudo_gt_from_refined_masked(m_ref: &NormalizedMap, allowed: Option<&[Vec<bool>]>) -> Result<RefinedPseudoGT> {
    let (n, c, h, w) = m_ref.probs().dims4()?;
    if let Some(allowed) = allowed {
        if allowed.len() != n || allowed.iter().any(|row| row.len() != c) {
            return Err(Error::shape(format!("class mask does not cover {n} images x {c} classes")));
        }
    }
    let values = ops::to_f64_vec(m_ref.probs())?;
    let hw = h * w;
    let mut labels = vec![None; n * hw];
    let mut mass = vec![0.0; n * c];
    for b in 0..n {
        let mut claims = vec![0u32; hw];
        let mut claimant = vec![0usize; hw];
        for ch in 0..c {
            let plane = &values[(b * c + ch) * hw..(b * c + ch + 1) * hw];
            mass[b * c + ch] = plane.iter().sum();
            if allowed.is_some_and(|a| !a[b][ch]) {
                continue;
            }
            let peak = plane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let theta = if ch == 0 { BACKGROUND_THRESHOLD } else { FOREGROUND_THRESHOLD };
            for (i, &v) in plane.iter().enumerate() {
                if v > theta * peak {
                    claims[i] += 1;
                    claimant[i] = ch;
                }
            }
        }
        for i in 0..hw {
            if claims[i] == 1 {
                labels[b * hw + i] = Some(claimant[i]);
            }
        }
    }
    Ok(RefinedPseudoGT {
        batch: n,
        height: h,
        width: w,
        num_classes: c,
        labels,
        mass,
    })
}

/// Class-weighted cross-entropy of `m` against the refined pseudo ground
/// truth, summed over labelled pixels and averaged over images.
pub fn sss_loss(m: &NormalizedMap, gt: &RefinedPseudoGT) -> Result<Tensor> {
    let log_m = m.log_probs();
    let (n, c, h, w) = log_m.dims4()?;
    if (n, c, h, w) != (gt.batch, gt.num_classes, gt.height, gt.width) {
        return Err(Error::shape(format!(
            "scores {:?} vs pseudo ground truth {:?}",
            log_m.dims(),
            (gt.batch, gt.num_classes, gt.height, gt.width)
        )));
    }
    let hw = h * w;
    let mut weights = vec![0f64; n * c * hw];
    for b in 0..n {
        for i in 0..hw {
            if let Some(ch) = gt.labels[b * hw + i] {
                weights[(b * c + ch) * hw + i] = gt.class_weight(b, ch);
            }
        }
    }
    let weights = Tensor::from_vec(weights, (n, c, h, w), log_m.device())?.to_dtype(log_m.dtype())?;
    // Ignored pixels carry zero weight; mask any -inf so 0 * -inf stays 0.
    let safe_log = log_m.maximum(-1e30)?;
    Ok((weights * safe_log)?.sum_all()?.affine(-1.0 / n as f64, 0.0)?)
}
