//! Localizer score aggregation and the image-level classification loss.
//!
//! Score maps are batched `(N, C, H, W)` tensors. Pooled scores are `(N, C)`.
//! Losses are averaged over the batch.

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};
use crate::ops;

/// Raw per-pixel class scores `z`.
#[derive(Debug, Clone)]
pub struct ScoreMap(Tensor);

impl ScoreMap {
    pub fn new(z: Tensor) -> Result<Self> {
        let (_, c, _, _) = z
            .dims4()
            .map_err(|_| Error::shape(format!("score map must be (N, C, H, W), got {:?}", z.dims())))?;
        if c < 2 {
            return Err(Error::shape("score map needs background plus at least one class"));
        }
        if !z.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?.iter().all(|v| v.is_finite()) {
            return Err(Error::NumericInput("score map"));
        }
        Ok(Self(z))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn num_classes(&self) -> usize {
        self.0.dims()[1]
    }

    pub fn spatial(&self) -> (usize, usize) {
        (self.0.dims()[2], self.0.dims()[3])
    }
}

/// Per-pixel class distribution `m`, with its logarithm kept alongside for
/// stable log-likelihood losses.
#[derive(Debug, Clone)]
pub struct NormalizedMap {
    probs: Tensor,
    log_probs: Tensor,
}

impl NormalizedMap {
    /// Wraps an existing distribution, checking the simplex constraint.
    pub fn from_probs(probs: Tensor) -> Result<Self> {
        probs.dims4()?;
        let sums = ops::to_f64_vec(&probs.sum(1)?)?;
        if sums.iter().any(|s| !s.is_finite() || (s - 1.0).abs() > 1e-4) {
            return Err(Error::ContractViolation("class distribution does not sum to one".into()));
        }
        let log_probs = probs.log()?;
        Ok(Self { probs, log_probs })
    }

    pub fn probs(&self) -> &Tensor {
        &self.probs
    }

    pub fn log_probs(&self) -> &Tensor {
        &self.log_probs
    }

    pub fn num_classes(&self) -> usize {
        self.probs.dims()[1]
    }

    pub fn spatial(&self) -> (usize, usize) {
        (self.probs.dims()[2], self.probs.dims()[3])
    }

    /// Copy cut from the autograd graph.
    pub fn detach(&self) -> Self {
        Self {
            probs: self.probs.detach(),
            log_probs: self.log_probs.detach(),
        }
    }
}

/// `m = softmax(z)` over the class axis.
pub fn softmax_normalize(z: &ScoreMap) -> Result<NormalizedMap> {
    Ok(NormalizedMap {
        probs: ops::channel_softmax(z.tensor())?,
        log_probs: ops::channel_log_softmax(z.tensor())?,
    })
}

/// Normalized global weighted pooling: `Σ_i m_i z_i / (ε + Σ_i m_i)` per class.
pub fn ngwp(z: &ScoreMap, m: &NormalizedMap, epsilon: f64) -> Result<Tensor> {
    if z.tensor().dims() != m.probs().dims() {
        return Err(Error::shape(format!(
            "ngwp: scores {:?} vs weights {:?}",
            z.tensor().dims(),
            m.probs().dims()
        )));
    }
    let weighted = ops::spatial_sum(&(m.probs() * z.tensor())?)?;
    let mass = ops::spatial_sum(m.probs())?.affine(1.0, epsilon)?;
    Ok((weighted / mass)?)
}

/// Focal penalty `(1 - μ)^γ log(λ + μ)`, with `μ` the mean of `m_c` over pixels.
pub fn focal_penalty(m: &NormalizedMap, lambda: f64, gamma: f64) -> Result<Tensor> {
    let (h, w) = m.spatial();
    let coverage = ops::spatial_sum(m.probs())?.affine(1.0 / (h * w) as f64, 0.0)?;
    let modulation = coverage.affine(-1.0, 1.0)?.relu()?.powf(gamma)?;
    Ok((modulation * coverage.affine(1.0, lambda)?.log()?)?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClsHyper {
    pub epsilon: f64,
    pub lambda: f64,
    pub gamma: f64,
}

impl Default for ClsHyper {
    fn default() -> Self {
        Self {
            epsilon: 1e-5,
            lambda: 0.01,
            gamma: 3.0,
        }
    }
}

/// Which classes the image-level loss covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelScope {
    /// Only the classes introduced at the current step.
    #[default]
    NewOnly,
    /// Every class seen so far, background included.
    AllClasses,
}

/// The class set `K` (as channel indices) with per-image binary labels.
#[derive(Debug, Clone)]
pub struct ClassTargets {
    channels: Vec<usize>,
    labels: Tensor,
}

impl ClassTargets {
    /// `present[n]` lists the channels annotated as present in image `n`.
    /// Background is always counted present under [`LabelScope::AllClasses`].
    pub fn new(
        scope: LabelScope,
        num_old: usize,
        num_total: usize,
        present: &[Vec<usize>],
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        let channels: Vec<usize> = match scope {
            LabelScope::NewOnly => (num_old..num_total).collect(),
            LabelScope::AllClasses => (0..num_total).collect(),
        };
        if channels.is_empty() {
            return Err(Error::EmptyTarget);
        }
        if scope == LabelScope::NewOnly && channels.len() == 1 {
            return Err(Error::UnsupportedSingleClass(
                "one new class in the image-level loss".into(),
            ));
        }
        let mut labels = Vec::with_capacity(present.len() * channels.len());
        for p in present {
            for &c in &channels {
                let on = p.contains(&c) || (scope == LabelScope::AllClasses && c == 0);
                labels.push(if on { 1.0 } else { 0.0 });
            }
        }
        let labels = Tensor::from_vec(labels, (present.len(), channels.len()), device)?.to_dtype(dtype)?;
        Ok(Self { channels, labels })
    }

    /// Targets from an explicit indicator matrix `(N, |K|)`.
    pub fn from_parts(channels: Vec<usize>, labels: Tensor) -> Result<Self> {
        if channels.is_empty() {
            return Err(Error::EmptyTarget);
        }
        let (_, k) = labels.dims2()?;
        if k != channels.len() {
            return Err(Error::shape(format!("{k} label columns for {} classes", channels.len())));
        }
        Ok(Self { channels, labels })
    }

    pub fn channels(&self) -> &[usize] {
        &self.channels
    }

    pub fn labels(&self) -> &Tensor {
        &self.labels
    }
}

/// Multi-label soft-margin loss on `σ(ŷ^nGWP + ŷ^FOC)` over the classes of
/// `targets`. Gradients reach every channel of `z` through the softmax weights.
pub fn classification_loss(z: &ScoreMap, targets: &ClassTargets, hyper: ClsHyper) -> Result<Tensor> {
    let m = softmax_normalize(z)?;
    classification_loss_with(z, &m, targets, hyper)
}

/// As [`classification_loss`], reusing an already computed `m = softmax(z)`.
pub fn classification_loss_with(
    z: &ScoreMap,
    m: &NormalizedMap,
    targets: &ClassTargets,
    hyper: ClsHyper,
) -> Result<Tensor> {
    let (n, c, _, _) = z.tensor().dims4()?;
    if let Some(&bad) = targets.channels.iter().find(|&&k| k >= c) {
        return Err(Error::shape(format!("target channel {bad} outside {c} score channels")));
    }
    if targets.labels.dims()[0] != n {
        return Err(Error::shape(format!("{} label rows for a batch of {n}", targets.labels.dims()[0])));
    }
    let logits = (ngwp(z, m, hyper.epsilon)? + focal_penalty(m, hyper.lambda, hyper.gamma)?)?;
    let index = Tensor::from_vec(
        targets.channels.iter().map(|&k| k as u32).collect::<Vec<_>>(),
        targets.channels.len(),
        z.tensor().device(),
    )?;
    let logits = logits.index_select(&index, 1)?;
    let labels = targets.labels.to_dtype(logits.dtype())?;
    Ok(ops::bce_with_logits(&logits, &labels)?.mean_all()?)
}
