//! Scalar-loop reference implementations over flat `(N, C, H, W)` buffers.
#![allow(dead_code)]

#[derive(Debug, Clone, Copy)]
pub struct Dims {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Dims {
    pub fn hw(&self) -> usize {
        self.h * self.w
    }

    pub fn len(&self) -> usize {
        self.n * self.c * self.hw()
    }

    pub fn at(&self, b: usize, c: usize, i: usize) -> usize {
        (b * self.c + c) * self.hw() + i
    }

    pub fn shape(&self) -> (usize, usize, usize, usize) {
        (self.n, self.c, self.h, self.w)
    }
}

fn sigmoid(s: f64) -> f64 {
    1.0 / (1.0 + (-s).exp())
}

/// Binary cross-entropy written out from the probabilities.
pub fn bce(s: f64, y: f64) -> f64 {
    let p = sigmoid(s);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

pub fn softmax(z: &[f64], d: Dims) -> Vec<f64> {
    let mut out = vec![0.0; z.len()];
    for b in 0..d.n {
        for i in 0..d.hw() {
            let top = (0..d.c).map(|c| z[d.at(b, c, i)]).fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = (0..d.c).map(|c| (z[d.at(b, c, i)] - top).exp()).sum();
            for c in 0..d.c {
                out[d.at(b, c, i)] = (z[d.at(b, c, i)] - top).exp() / total;
            }
        }
    }
    out
}

/// Image-level loss: soft-margin loss over `channels` of nGWP plus the focal
/// penalty, averaged over images and classes. `labels[b][k]` pairs with
/// `channels[k]`.
pub fn cls_loss(z: &[f64], d: Dims, channels: &[usize], labels: &[Vec<f64>], eps: f64, lambda: f64, gamma: f64) -> f64 {
    let m = softmax(z, d);
    let mut total = 0.0;
    for b in 0..d.n {
        for (k, &c) in channels.iter().enumerate() {
            let (mut num, mut den) = (0.0, 0.0);
            for i in 0..d.hw() {
                num += m[d.at(b, c, i)] * z[d.at(b, c, i)];
                den += m[d.at(b, c, i)];
            }
            let pooled = num / (eps + den);
            let mu = den / d.hw() as f64;
            let focal = (1.0 - mu).powf(gamma) * (lambda + mu).ln();
            total += bce(pooled + focal, labels[b][k]);
        }
    }
    total / (d.n * channels.len()) as f64
}

/// Mean pixel BCE between `σ(z_c)` and `ω_c` over the first `c_old` channels.
pub fn loc_loss(z: &[f64], d: Dims, omega: &[f64], c_old: usize) -> f64 {
    let od = Dims { c: c_old, ..d };
    let mut total = 0.0;
    for b in 0..d.n {
        for c in 0..c_old {
            for i in 0..d.hw() {
                total += bce(z[d.at(b, c, i)], omega[od.at(b, c, i)]);
            }
        }
    }
    total / od.len() as f64
}

/// Mean negative log-softmax of `z` at the old model's per-pixel argmax.
pub fn ce_prior_loss(z: &[f64], d: Dims, omega: &[f64], c_old: usize) -> f64 {
    let od = Dims { c: c_old, ..d };
    let m = softmax(z, d);
    let mut total = 0.0;
    for b in 0..d.n {
        for i in 0..d.hw() {
            let mut best = 0;
            for c in 1..c_old {
                if omega[od.at(b, c, i)] > omega[od.at(b, best, i)] {
                    best = c;
                }
            }
            total -= m[d.at(b, best, i)].ln();
        }
    }
    total / (d.n * d.hw()) as f64
}

/// BCE summed over classes, averaged over images and pixels.
pub fn seg_loss(p: &[f64], q: &[f64], d: Dims) -> f64 {
    let total: f64 = p.iter().zip(q).map(|(&s, &y)| bce(s, y)).sum();
    total / (d.n * d.hw()) as f64
}

/// Per-pixel label from class maps thresholded at a fraction of their peak;
/// pixels claimed by zero or several classes stay unlabelled.
pub fn pseudo_gt(m_ref: &[f64], d: Dims, bg_threshold: f64, fg_threshold: f64) -> Vec<Option<usize>> {
    let mut labels = vec![None; d.n * d.hw()];
    for b in 0..d.n {
        for i in 0..d.hw() {
            let mut claimants = Vec::new();
            for c in 0..d.c {
                let peak = (0..d.hw()).map(|j| m_ref[d.at(b, c, j)]).fold(f64::NEG_INFINITY, f64::max);
                let theta = if c == 0 { bg_threshold } else { fg_threshold };
                if m_ref[d.at(b, c, i)] > theta * peak {
                    claimants.push(c);
                }
            }
            if claimants.len() == 1 {
                labels[b * d.hw() + i] = Some(claimants[0]);
            }
        }
    }
    labels
}

/// Class-weighted cross-entropy of `softmax(z)` against the pseudo ground
/// truth of `m_ref`, summed over labelled pixels and averaged over images.
pub fn sss_loss(z: &[f64], m_ref: &[f64], d: Dims, bg_threshold: f64, fg_threshold: f64) -> f64 {
    let m = softmax(z, d);
    let labels = pseudo_gt(m_ref, d, bg_threshold, fg_threshold);
    let area = d.hw() as f64;
    let mut total = 0.0;
    for b in 0..d.n {
        for i in 0..d.hw() {
            if let Some(c) = labels[b * d.hw() + i] {
                let mass: f64 = (0..d.hw()).map(|j| m_ref[d.at(b, c, j)]).sum();
                let weight = (area - mass) / (1.0 + area);
                total -= weight * m[d.at(b, c, i)].ln();
            }
        }
    }
    total / d.n as f64
}

pub fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

/// Softmax cross-entropy averaged over pixels whose target is not `ignore`.
pub fn dense_ce(logits: &[f64], d: Dims, targets: &[u32], ignore: u32) -> f64 {
    let m = softmax(logits, d);
    let (mut total, mut count) = (0.0, 0);
    for b in 0..d.n {
        for i in 0..d.hw() {
            let t = targets[b * d.hw() + i];
            if t != ignore {
                total -= m[d.at(b, t as usize, i)].ln();
                count += 1;
            }
        }
    }
    total / count as f64
}
