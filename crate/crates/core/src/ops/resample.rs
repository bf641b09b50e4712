use candle_core::{bail, Result, Tensor};

/// Row-stochastic `(out, in)` matrix of 1-D bilinear interpolation with
/// half-pixel centers and edge clamping.
pub fn bilinear_matrix(out_len: usize, in_len: usize) -> Vec<f64> {
    let mut m = vec![0.0; out_len * in_len];
    let scale = in_len as f64 / out_len as f64;
    for dst in 0..out_len {
        let src = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
        let lo = src.floor() as usize;
        let hi = (lo + 1).min(in_len - 1);
        let frac = src - lo as f64;
        m[dst * in_len + lo] += 1.0 - frac;
        m[dst * in_len + hi] += frac;
    }
    m
}

/// Row-stochastic `(out, in)` matrix averaging the input cells covered by
/// each output cell, weighted by overlap length.
pub fn area_matrix(out_len: usize, in_len: usize) -> Vec<f64> {
    let mut m = vec![0.0; out_len * in_len];
    let span = in_len as f64 / out_len as f64;
    for dst in 0..out_len {
        let (start, end) = (dst as f64 * span, (dst + 1) as f64 * span);
        let first = start.floor() as usize;
        let last = (end.ceil() as usize).min(in_len);
        for src in first..last {
            let overlap = end.min(src as f64 + 1.0) - start.max(src as f64);
            if overlap > 0.0 {
                m[dst * in_len + src] = overlap / span;
            }
        }
    }
    m
}

// Applies `rows` (out_h x h) and `cols` (out_w x w) to every channel:
// Y = Rows . X . Cols^T, as two plain GEMMs so the result stays differentiable.
fn separable(x: &Tensor, rows: Vec<f64>, cols: Vec<f64>, (out_h, out_w): (usize, usize)) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let dev = x.device();
    let dtype = x.dtype();
    let cols_t = Tensor::from_vec(cols, (out_w, w), dev)?.to_dtype(dtype)?.t()?;
    let rows_t = Tensor::from_vec(rows, (out_h, h), dev)?.to_dtype(dtype)?.t()?;
    let y = x.contiguous()?.reshape((n * c * h, w))?.matmul(&cols_t)?;
    let y = y.reshape((n * c, h, out_w))?.transpose(1, 2)?.reshape((n * c * out_w, h))?;
    let y = y.matmul(&rows_t)?;
    y.reshape((n * c, out_w, out_h))?
        .transpose(1, 2)?
        .reshape((n, c, out_h, out_w))
}

/// Bilinear resize of an `(N, C, H, W)` tensor. Upsampling only.
pub fn bilinear_resize(x: &Tensor, (out_h, out_w): (usize, usize)) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if out_h < h || out_w < w {
        bail!("bilinear_resize: {h}x{w} -> {out_h}x{out_w} would downscale");
    }
    if (out_h, out_w) == (h, w) {
        return Ok(x.clone());
    }
    separable(x, bilinear_matrix(out_h, h), bilinear_matrix(out_w, w), (out_h, out_w))
}

/// Area-average downsampling of an `(N, C, H, W)` tensor.
pub fn area_downsample(x: &Tensor, (out_h, out_w): (usize, usize)) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if out_h > h || out_w > w || out_h == 0 || out_w == 0 {
        bail!("area_downsample: {h}x{w} -> {out_h}x{out_w} is not a reduction");
    }
    if (out_h, out_w) == (h, w) {
        return Ok(x.clone());
    }
    separable(x, area_matrix(out_h, h), area_matrix(out_w, w), (out_h, out_w))
}
