//! Supervision of the localizer by the frozen previous-step model.

use std::fmt;
use std::str::FromStr;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops;
use crate::pooling::{LabelScope, ScoreMap};

/// `ω = σ(f^{t-1}(x))`: per-class probabilities of the old model over the old
/// label set, background first. Always detached.
#[derive(Debug, Clone)]
pub struct OldModelOutput(Tensor);

impl OldModelOutput {
    pub fn new(omega: Tensor) -> Result<Self> {
        omega.dims4()?;
        let values = ops::to_f64_vec(&omega)?;
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::ContractViolation("old-model probabilities outside [0, 1]".into()));
        }
        Ok(Self(omega.detach()))
    }

    /// From raw old-model logits.
    pub fn from_logits(logits: &Tensor) -> Result<Self> {
        Ok(Self(ops::sigmoid(&logits.detach())?))
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

    /// Area-averaged copy at a coarser resolution.
    pub fn downsampled(&self, size: (usize, usize)) -> Result<Self> {
        Ok(Self(ops::area_downsample(&self.0, size)?))
    }

    /// Per-pixel argmax over old classes, as `(N, H, W)` channel indices.
    pub fn argmax(&self) -> Result<Tensor> {
        Ok(self.0.argmax(1)?)
    }
}

fn check_old_channels(z: &ScoreMap, omega: &OldModelOutput) -> Result<usize> {
    let c_old = omega.num_classes();
    if z.num_classes() < c_old {
        return Err(Error::shape(format!(
            "scores cover {} classes, old model {c_old}",
            z.num_classes()
        )));
    }
    if z.spatial() != omega.spatial() || z.tensor().dims()[0] != omega.tensor().dims()[0] {
        return Err(Error::shape(format!(
            "scores {:?} vs old-model output {:?}",
            z.tensor().dims(),
            omega.tensor().dims()
        )));
    }
    Ok(c_old)
}

/// Pixel-wise binary cross-entropy between `σ(z_c)` and `ω_c` for every old
/// class `c`, averaged over old classes, pixels and images.
pub fn localization_prior_loss(z: &ScoreMap, omega: &OldModelOutput) -> Result<Tensor> {
    let c_old = check_old_channels(z, omega)?;
    let old_scores = z.tensor().narrow(1, 0, c_old)?;
    let target = omega.tensor().to_dtype(old_scores.dtype())?;
    Ok(ops::bce_with_logits(&old_scores, &target)?.mean_all()?)
}

/// Softmax cross-entropy of `z` (all channels) against the old model's
/// per-pixel argmax. This forces a hard old-class target even where the old
/// model is unsure.
pub fn ce_prior_loss(z: &ScoreMap, omega: &OldModelOutput) -> Result<Tensor> {
    check_old_channels(z, omega)?;
    let log_m = ops::channel_log_softmax(z.tensor())?;
    let target = omega.argmax()?.unsqueeze(1)?.to_dtype(DType::U32)?;
    let picked = log_m.gather(&target.contiguous()?, 1)?;
    Ok(picked.mean_all()?.neg()?)
}

/// How the localizer is informed about old classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PriorVariant {
    /// Old-class channels replaced by a constant score of zero.
    None,
    /// Old-model probabilities stand in for the old-class channels.
    Fixed,
    /// Learned old-class channels, softmax cross-entropy against the old argmax.
    Ce,
    /// Learned old-class channels, per-class logistic prior.
    #[default]
    Loc,
}

impl FromStr for PriorVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(PriorVariant::None),
            "fixed" => Ok(PriorVariant::Fixed),
            "ce" => Ok(PriorVariant::Ce),
            "loc" => Ok(PriorVariant::Loc),
            other => Err(Error::Config(format!("unknown prior variant `{other}`"))),
        }
    }
}

impl fmt::Display for PriorVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PriorVariant::None => "none",
            PriorVariant::Fixed => "fixed",
            PriorVariant::Ce => "ce",
            PriorVariant::Loc => "loc",
        })
    }
}

impl PriorVariant {
    pub fn validate(self, scope: LabelScope) -> Result<()> {
        if self == PriorVariant::Fixed && scope == LabelScope::AllClasses {
            return Err(Error::Config(
                "the fixed prior has no learned old-class channels to supervise with all-class labels".into(),
            ));
        }
        Ok(())
    }

    /// Scores the rest of the pipeline sees (`m`, the image-level loss, the
    /// pseudo-labels) given the raw localizer output.
    pub fn effective_scores(self, raw: &ScoreMap, omega: &OldModelOutput) -> Result<ScoreMap> {
        let c_old = check_old_channels(raw, omega)?;
        let z = raw.tensor();
        let new = z.narrow(1, c_old, raw.num_classes() - c_old)?;
        match self {
            PriorVariant::Ce | PriorVariant::Loc => Ok(raw.clone()),
            PriorVariant::None => {
                let mut dims = z.dims().to_vec();
                dims[1] = c_old;
                let placeholder = Tensor::zeros(dims, z.dtype(), z.device())?;
                ScoreMap::new(Tensor::cat(&[&placeholder, &new], 1)?)
            }
            PriorVariant::Fixed => {
                let fixed = omega.tensor().to_dtype(z.dtype())?;
                ScoreMap::new(Tensor::cat(&[&fixed, &new], 1)?)
            }
        }
    }

    /// The prior's loss term on the raw localizer scores, if it has one.
    pub fn prior_loss(self, raw: &ScoreMap, omega: &OldModelOutput) -> Result<Option<Tensor>> {
        match self {
            PriorVariant::Loc => localization_prior_loss(raw, omega).map(Some),
            PriorVariant::Ce => ce_prior_loss(raw, omega).map(Some),
            PriorVariant::None | PriorVariant::Fixed => Ok(None),
        }
    }
}
