//! SGD with momentum and weight decay, and the polynomial learning-rate decay.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};

use crate::error::{Error, Result};

/// `base_lr · (1 − iter / max_iter)^power`, zero past the end.
pub fn poly_lr(base_lr: f64, iter: usize, max_iter: usize, power: f64) -> f64 {
    if iter >= max_iter {
        return 0.0;
    }
    base_lr * (1.0 - iter as f64 / max_iter as f64).powf(power)
}

/// Momentum SGD. Weight decay is added to the gradient before the momentum
/// buffer; the first step seeds the buffer with the gradient.
#[derive(Debug, Default)]
pub struct Sgd {
    momentum: f64,
    weight_decay: f64,
    buffers: BTreeMap<String, Tensor>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            buffers: BTreeMap::new(),
        }
    }

    pub fn buffers(&self) -> &BTreeMap<String, Tensor> {
        &self.buffers
    }

    pub fn set_buffers(&mut self, buffers: BTreeMap<String, Tensor>) {
        self.buffers = buffers;
    }

    /// Updates every parameter in `group` that received a gradient.
    pub fn step<'a>(
        &mut self,
        group: impl IntoIterator<Item = (&'a String, &'a Var)>,
        grads: &GradStore,
        lr: f64,
    ) -> Result<()> {
        for (name, var) in group {
            let Some(grad) = grads.get(var.as_tensor()) else { continue };
            let param = var.as_tensor();
            let mut d = grad.clone();
            if self.weight_decay != 0.0 {
                d = (d + param.affine(self.weight_decay, 0.0)?)?;
            }
            if self.momentum != 0.0 {
                d = match self.buffers.get(name) {
                    Some(buf) => {
                        if buf.dims() != d.dims() {
                            return Err(Error::Schema(format!(
                                "momentum buffer for `{name}` has shape {:?}, parameter {:?}",
                                buf.dims(),
                                d.dims()
                            )));
                        }
                        (buf.affine(self.momentum, 0.0)? + d)?
                    }
                    None => d,
                };
                self.buffers.insert(name.clone(), d.detach());
            }
            var.set(&(param - d.affine(lr, 0.0)?)?)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use candle_core::Device;

    #[test]
    fn poly_schedule_points() {
        assert_eq!(poly_lr(0.001, 0, 100, 0.9), 0.001);
        assert_eq!(poly_lr(0.001, 100, 100, 0.9), 0.0);
        assert_eq!(poly_lr(0.001, 150, 100, 0.9), 0.0);
        assert_relative_eq!(poly_lr(1.0, 50, 100, 0.9), 0.5f64.powf(0.9), epsilon = 1e-15);
        assert_relative_eq!(poly_lr(1.0, 50, 100, 0.9), 0.5359, epsilon = 1e-4);
    }

    #[test]
    fn momentum_and_decay_follow_the_reference_recurrence() {
        let var = Var::from_tensor(&Tensor::new(&[1.0f64, -2.0], &Device::Cpu).unwrap()).unwrap();
        let name = "p".to_string();
        let mut sgd = Sgd::new(0.9, 0.1);
        let (mut p, mut buf) = ([1.0f64, -2.0], [0.0f64; 2]);
        for step in 0..3 {
            let loss = var.as_tensor().sqr().unwrap().sum_all().unwrap();
            let grads = loss.backward().unwrap();
            sgd.step([(&name, &var)], &grads, 0.05).unwrap();
            for k in 0..2 {
                let d = 2.0 * p[k] + 0.1 * p[k];
                buf[k] = if step == 0 { d } else { 0.9 * buf[k] + d };
                p[k] -= 0.05 * buf[k];
            }
            let got = var.as_tensor().to_vec1::<f64>().unwrap();
            assert_relative_eq!(got[0], p[0], epsilon = 1e-12);
            assert_relative_eq!(got[1], p[1], epsilon = 1e-12);
        }
    }
}
