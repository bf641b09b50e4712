//! Encoder, decoder and localizer of the reference segmenter, and the frozen
//! snapshot used as the previous-step teacher.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops;

/// Layer widths of the reference network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder_widths: [usize; 3],
    pub decoder_width: usize,
    pub localizer_width: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder_widths: [16, 32, 64],
            decoder_width: 64,
            localizer_width: 256,
        }
    }
}

impl ModelConfig {
    pub const OUTPUT_STRIDE: usize = 4;

    pub fn feature_dim(&self) -> usize {
        self.encoder_widths[2]
    }
}

const LEAKY_SLOPE: f64 = 0.01;

/// Read access to named parameters.
pub trait Weights {
    fn weight(&self, name: &str) -> Result<&Tensor>;
}

fn conv(w: &impl Weights, prefix: &str, x: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let weight = w.weight(&format!("{prefix}.weight"))?;
    let bias = w.weight(&format!("{prefix}.bias"))?;
    Ok(ops::conv2d(x, weight, Some(bias), stride, padding)?)
}

fn encode_with(w: &impl Weights, x: &Tensor) -> Result<Tensor> {
    let h = conv(w, "encoder.conv1", x, 2, 1)?.relu()?;
    let h = conv(w, "encoder.conv2", &h, 2, 1)?.relu()?;
    Ok(conv(w, "encoder.conv3", &h, 1, 1)?.relu()?)
}

fn decode_with(w: &impl Weights, feat: &Tensor, out: (usize, usize)) -> Result<Tensor> {
    let h = conv(w, "decoder.conv", feat, 1, 1)?.relu()?;
    let logits = conv(w, "decoder.classifier", &h, 1, 0)?;
    Ok(ops::bilinear_resize(&logits, out)?)
}

fn localize_with(w: &impl Weights, feat: &Tensor) -> Result<Tensor> {
    let h = ops::leaky_relu(&conv(w, "localizer.conv1", feat, 1, 1)?, LEAKY_SLOPE)?;
    let h = ops::leaky_relu(&conv(w, "localizer.conv2", &h, 1, 1)?, LEAKY_SLOPE)?;
    conv(w, "localizer.classifier", &h, 1, 0)
}

fn layer_shapes(cfg: &ModelConfig, num_classes: usize, localizer: bool) -> Vec<(&'static str, [usize; 4])> {
    let [c1, c2, c3] = cfg.encoder_widths;
    let mut out = vec![
        ("encoder.conv1", [c1, 3, 3, 3]),
        ("encoder.conv2", [c2, c1, 3, 3]),
        ("encoder.conv3", [c3, c2, 3, 3]),
        ("decoder.conv", [cfg.decoder_width, c3, 3, 3]),
        ("decoder.classifier", [num_classes, cfg.decoder_width, 1, 1]),
    ];
    if localizer {
        let lw = cfg.localizer_width;
        out.push(("localizer.conv1", [lw, c3, 3, 3]));
        out.push(("localizer.conv2", [lw, lw, 3, 3]));
        out.push(("localizer.classifier", [num_classes, lw, 1, 1]));
    }
    out
}

/// Uniform fan-in initialisation; classifier rows are kept small.
fn init_layer(rng: &mut ChaCha8Rng, shape: [usize; 4], classifier: bool) -> (Vec<f32>, Vec<f32>) {
    let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
    let bound = if classifier { 0.01 } else { (6.0 / fan_in).sqrt() };
    let n = shape.iter().product();
    let weight = (0..n).map(|_| rng.random_range(-bound..bound) as f32).collect();
    (weight, vec![0.0; shape[0]])
}

/// The trainable network.
#[derive(Debug)]
pub struct Segmenter {
    config: ModelConfig,
    num_classes: usize,
    params: BTreeMap<String, Var>,
}

impl Weights for Segmenter {
    fn weight(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .map(|v| v.as_tensor())
            .ok_or_else(|| Error::Schema(format!("missing parameter `{name}`")))
    }
}

impl Segmenter {
    pub fn init(config: ModelConfig, num_classes: usize, localizer: bool, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = BTreeMap::new();
        for (name, shape) in layer_shapes(&config, num_classes, localizer) {
            let (w, b) = init_layer(&mut rng, shape, name.ends_with("classifier"));
            params.insert(format!("{name}.weight"), Var::from_tensor(&Tensor::from_vec(w, shape.to_vec(), &Device::Cpu)?)?);
            params.insert(format!("{name}.bias"), Var::from_tensor(&Tensor::from_vec(b, shape[0], &Device::Cpu)?)?);
        }
        Ok(Self {
            config,
            num_classes,
            params,
        })
    }

    /// Rebuilds a network from named tensors, checking every expected shape.
    pub fn from_tensors(config: ModelConfig, num_classes: usize, tensors: &BTreeMap<String, Tensor>) -> Result<Self> {
        let localizer = tensors.contains_key("localizer.classifier.weight");
        let mut params = BTreeMap::new();
        for (name, shape) in layer_shapes(&config, num_classes, localizer) {
            for (suffix, dims) in [("weight", shape.to_vec()), ("bias", vec![shape[0]])] {
                let key = format!("{name}.{suffix}");
                let t = tensors
                    .get(&key)
                    .ok_or_else(|| Error::Schema(format!("checkpoint lacks `{key}`")))?;
                if t.dims() != dims.as_slice() {
                    return Err(Error::Schema(format!("`{key}` has shape {:?}, expected {dims:?}", t.dims())));
                }
                params.insert(key, Var::from_tensor(&t.to_dtype(DType::F32)?)?);
            }
        }
        Ok(Self {
            config,
            num_classes,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn has_localizer(&self) -> bool {
        self.params.contains_key("localizer.classifier.weight")
    }

    pub fn params(&self) -> &BTreeMap<String, Var> {
        &self.params
    }

    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        encode_with(self, x)
    }

    pub fn decode(&self, feat: &Tensor, out: (usize, usize)) -> Result<Tensor> {
        decode_with(self, feat, out)
    }

    pub fn localize(&self, feat: &Tensor) -> Result<Tensor> {
        if !self.has_localizer() {
            return Err(Error::Unsupported("this network has no localizer".into()));
        }
        localize_with(self, feat)
    }

    /// Decoder-only inference: logits at input resolution.
    pub fn segment(&self, x: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        self.decode(&self.encode(x)?, (h, w))
    }

    /// Deep copy of the encoder and decoder, cut from the autograd graph.
    pub fn snapshot(&self) -> Result<FrozenModel> {
        let mut tensors = BTreeMap::new();
        for (name, var) in &self.params {
            if !name.starts_with("localizer.") {
                tensors.insert(name.clone(), var.as_tensor().copy()?.detach());
            }
        }
        Ok(FrozenModel {
            num_classes: self.num_classes,
            tensors,
        })
    }

    /// Grows the class dimension of the decoder and localizer by `extra`
    /// channels, keeping old rows and initialising new ones small. Adds a
    /// fresh localizer if there is none yet.
    pub fn extend_classes(&mut self, extra: usize, seed: u64) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let total = self.num_classes + extra;
        if !self.has_localizer() {
            for (name, shape) in layer_shapes(&self.config, total, true) {
                if name.starts_with("localizer.") {
                    let (w, b) = init_layer(&mut rng, shape, name.ends_with("classifier"));
                    self.params
                        .insert(format!("{name}.weight"), Var::from_tensor(&Tensor::from_vec(w, shape.to_vec(), &Device::Cpu)?)?);
                    self.params
                        .insert(format!("{name}.bias"), Var::from_tensor(&Tensor::from_vec(b, shape[0], &Device::Cpu)?)?);
                }
            }
            self.extend_classifier("decoder.classifier", extra, &mut rng)?;
        } else {
            self.extend_classifier("decoder.classifier", extra, &mut rng)?;
            self.extend_classifier("localizer.classifier", extra, &mut rng)?;
        }
        self.num_classes = total;
        Ok(())
    }

    fn extend_classifier(&mut self, prefix: &str, extra: usize, rng: &mut ChaCha8Rng) -> Result<()> {
        let wkey = format!("{prefix}.weight");
        let bkey = format!("{prefix}.bias");
        let old_w = self.weight(&wkey)?.clone();
        let old_b = self.weight(&bkey)?.clone();
        let (_, in_ch, kh, kw) = old_w.dims4()?;
        let (new_w, new_b) = init_layer(rng, [extra, in_ch, kh, kw], true);
        let new_w = Tensor::from_vec(new_w, (extra, in_ch, kh, kw), &Device::Cpu)?;
        let new_b = Tensor::from_vec(new_b, extra, &Device::Cpu)?;
        self.params
            .insert(wkey, Var::from_tensor(&Tensor::cat(&[&old_w, &new_w], 0)?)?);
        self.params
            .insert(bkey, Var::from_tensor(&Tensor::cat(&[&old_b, &new_b], 0)?)?);
        Ok(())
    }

    /// Named copies of every parameter.
    pub fn tensors(&self) -> Result<BTreeMap<String, Tensor>> {
        self.params
            .iter()
            .map(|(k, v)| Ok((k.clone(), v.as_tensor().copy()?.detach())))
            .collect()
    }
}

/// Immutable previous-step model. It has no parameters to optimise and no
/// way to change its weights.
#[derive(Debug)]
pub struct FrozenModel {
    num_classes: usize,
    tensors: BTreeMap<String, Tensor>,
}

impl Weights for FrozenModel {
    fn weight(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Schema(format!("missing parameter `{name}`")))
    }
}

impl FrozenModel {
    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Read-only view of the frozen weights.
    pub fn weights(&self) -> &BTreeMap<String, Tensor> {
        &self.tensors
    }

    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        Ok(encode_with(self, &x.detach())?.detach())
    }

    /// Features and segmentation logits at input resolution.
    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let (_, _, h, w) = x.dims4()?;
        let feat = self.encode(x)?;
        let logits = decode_with(self, &feat, (h, w))?.detach();
        Ok((feat, logits))
    }
}
