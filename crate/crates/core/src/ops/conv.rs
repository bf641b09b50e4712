use candle_core::backend::BackendStorage;
use candle_core::{bail, CpuStorage, CustomOp1, Layout, Result, Shape, Tensor, WithDType};

/// Square-kernel convolution geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn out_len(&self, len: usize) -> usize {
        (len + 2 * self.padding - self.kernel) / self.stride + 1
    }

    // Visits every (patch column, input offset) pair of one output location.
    #[inline]
    fn for_each_tap(
        &self,
        channels: usize,
        (h, w): (usize, usize),
        (oy, ox): (usize, usize),
        mut f: impl FnMut(usize, usize),
    ) {
        let k = self.kernel;
        for ci in 0..channels {
            for ky in 0..k {
                let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    f((ci * k + ky) * k + kx, (ci * h + iy as usize) * w + ix as usize);
                }
            }
        }
    }
}

/// im2col: `(N, C, H, W)` -> `(N, OH*OW, C*K*K)`. Its adjoint is [`Fold`].
struct Unfold(ConvGeometry);

/// col2im with accumulation, the adjoint of [`Unfold`].
struct Fold {
    geometry: ConvGeometry,
    height: usize,
    width: usize,
}

fn contiguous<'a, T>(data: &'a [T], layout: &Layout) -> Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => bail!("unfold/fold expect contiguous input"),
    }
}

fn unfold<T: WithDType>(g: ConvGeometry, x: &[T], (n, c, h, w): (usize, usize, usize, usize)) -> Vec<T> {
    let (oh, ow) = (g.out_len(h), g.out_len(w));
    let ckk = c * g.kernel * g.kernel;
    let mut out = vec![T::from_f64(0.0); n * oh * ow * ckk];
    for b in 0..n {
        let image = &x[b * c * h * w..(b + 1) * c * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let row = &mut out[((b * oh + oy) * ow + ox) * ckk..][..ckk];
                g.for_each_tap(c, (h, w), (oy, ox), |col, src| row[col] = image[src]);
            }
        }
    }
    out
}

fn fold<T: WithDType>(
    g: ConvGeometry,
    cols: &[T],
    (n, ckk): (usize, usize),
    (h, w): (usize, usize),
) -> Vec<T> {
    let c = ckk / (g.kernel * g.kernel);
    let (oh, ow) = (g.out_len(h), g.out_len(w));
    let mut out = vec![T::from_f64(0.0); n * c * h * w];
    for b in 0..n {
        let image = &mut out[b * c * h * w..(b + 1) * c * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let row = &cols[((b * oh + oy) * ow + ox) * ckk..][..ckk];
                g.for_each_tap(c, (h, w), (oy, ox), |col, dst| image[dst] += row[col]);
            }
        }
    }
    out
}

impl CustomOp1 for Unfold {
    fn name(&self) -> &'static str {
        "unfold"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> Result<(CpuStorage, Shape)> {
        let dims = layout.shape().dims4()?;
        let (n, c, h, w) = dims;
        let g = self.0;
        let shape = Shape::from((n, g.out_len(h) * g.out_len(w), c * g.kernel * g.kernel));
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(unfold(g, contiguous(v, layout)?, dims)),
            CpuStorage::F64(v) => CpuStorage::F64(unfold(g, contiguous(v, layout)?, dims)),
            other => bail!("unfold: unsupported dtype {:?}", other.dtype()),
        };
        Ok((out, shape))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> Result<Option<Tensor>> {
        let (_, _, h, w) = arg.dims4()?;
        let fold = Fold {
            geometry: self.0,
            height: h,
            width: w,
        };
        Ok(Some(grad_res.contiguous()?.apply_op1_no_bwd(&fold)?))
    }
}

impl CustomOp1 for Fold {
    fn name(&self) -> &'static str {
        "fold"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> Result<(CpuStorage, Shape)> {
        let (n, _, ckk) = layout.shape().dims3()?;
        let g = self.geometry;
        let hw = (self.height, self.width);
        let shape = Shape::from((n, ckk / (g.kernel * g.kernel), self.height, self.width));
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(fold(g, contiguous(v, layout)?, (n, ckk), hw)),
            CpuStorage::F64(v) => CpuStorage::F64(fold(g, contiguous(v, layout)?, (n, ckk), hw)),
            other => bail!("fold: unsupported dtype {:?}", other.dtype()),
        };
        Ok((out, shape))
    }
}

/// 2-D convolution of `(N, C, H, W)` input with `(O, C, K, K)` weights and an
/// optional `(O,)` bias, computed as im2col followed by a single GEMM.
pub fn conv2d(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>, stride: usize, padding: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let (o, wc, k, k2) = weight.dims4()?;
    if wc != c || k != k2 {
        bail!("conv2d: input has {c} channels, weight is {:?}", weight.dims());
    }
    let g = ConvGeometry {
        kernel: k,
        stride,
        padding,
    };
    let (oh, ow) = (g.out_len(h), g.out_len(w));
    let cols = x.contiguous()?.apply_op1(Unfold(g))?;
    let wm = weight.reshape((o, c * k * k))?.t()?;
    let out = cols
        .reshape((n * oh * ow, c * k * k))?
        .matmul(&wm)?
        .reshape((n, oh * ow, o))?
        .transpose(1, 2)?
        .reshape((n, o, oh, ow))?;
    match bias {
        Some(b) => out.broadcast_add(&b.reshape((1, o, 1, 1))?),
        None => Ok(out),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device, Var};

    fn ramp(shape: (usize, usize, usize, usize), scale: f64) -> Tensor {
        let len = shape.0 * shape.1 * shape.2 * shape.3;
        let v: Vec<f64> = (0..len).map(|i| ((i * 7919) % 23) as f64 * scale - 0.3).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    #[test]
    fn matches_candle_reference_conv() {
        let x = ramp((2, 3, 7, 6), 0.05);
        let w = ramp((4, 3, 3, 3), 0.02);
        for (stride, padding) in [(1, 1), (2, 1), (1, 0), (2, 0)] {
            let ours = conv2d(&x, &w, None, stride, padding).unwrap();
            let reference = x.conv2d(&w, padding, stride, 1, 1).unwrap();
            let diff = (ours - reference).unwrap().abs().unwrap().max_all().unwrap();
            assert!(diff.to_scalar::<f64>().unwrap() < 1e-12);
        }
    }

    #[test]
    fn fold_is_adjoint_of_unfold() {
        // <unfold(x), y> == <x, fold(y)>
        let g = ConvGeometry {
            kernel: 3,
            stride: 2,
            padding: 1,
        };
        let x = ramp((1, 2, 5, 5), 0.1);
        let ux = x.apply_op1_no_bwd(&Unfold(g)).unwrap();
        let y = ramp(ux.dims3().map(|(a, b, c)| (1, a, b, c)).unwrap(), 0.07)
            .squeeze(0)
            .unwrap();
        let fy = y
            .apply_op1_no_bwd(&Fold {
                geometry: g,
                height: 5,
                width: 5,
            })
            .unwrap();
        let lhs = (ux * &y).unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap();
        let rhs = (x * fy).unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn gradients_flow_to_input_and_weights() {
        let x = Var::from_tensor(&ramp((1, 2, 4, 4), 0.1)).unwrap();
        let w = Var::from_tensor(&ramp((3, 2, 3, 3), 0.05)).unwrap();
        let y = conv2d(x.as_tensor(), w.as_tensor(), None, 1, 1).unwrap();
        let grads = y.sqr().unwrap().sum_all().unwrap().backward().unwrap();
        assert_eq!(grads.get(x.as_tensor()).unwrap().dims(), &[1, 2, 4, 4]);
        assert_eq!(grads.get(w.as_tensor()).unwrap().dims(), &[3, 2, 3, 3]);
        assert_eq!(grads.get(w.as_tensor()).unwrap().dtype(), DType::F64);
    }
}
