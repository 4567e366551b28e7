use super::{BatchNormParams, DenseParams, Tensor4};
use crate::error::{Error, Result};

fn same_dims(what: &str, a: &Tensor4, b: &Tensor4) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!(
            "{what}: {} does not match {}",
            a.shape_str(),
            b.shape_str()
        )));
    }
    Ok(())
}

pub fn relu_forward(input: &Tensor4) -> Tensor4 {
    let data = input.data().iter().map(|&v| v.max(0.0)).collect();
    Tensor4::from_vec(input.dims(), data).expect("same dims")
}

/// Gradient passes where the forward input was strictly positive.
pub fn relu_backward(input: &Tensor4, grad_output: &Tensor4) -> Result<Tensor4> {
    same_dims("relu backward", input, grad_output)?;
    let data = input
        .data()
        .iter()
        .zip(grad_output.data())
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Tensor4::from_vec(input.dims(), data)
}

fn pool_extent(size: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    if kernel == 0 || stride == 0 || padding >= kernel || size + 2 * padding < kernel {
        return Err(Error::Shape(format!(
            "pool window {kernel} (stride {stride}, padding {padding}) does not fit extent {size}"
        )));
    }
    Ok((size + 2 * padding - kernel) / stride + 1)
}

/// Max pooling; padded positions never win.
pub fn max_pool_forward(input: &Tensor4, kernel: usize, stride: usize, padding: usize) -> Result<Tensor4> {
    let [g, c, h, w] = input.dims();
    let h_out = pool_extent(h, kernel, stride, padding)?;
    let w_out = pool_extent(w, kernel, stride, padding)?;
    let mut out = Tensor4::zeros([g, c, h_out, w_out]);
    for n in 0..g {
        for ch in 0..c {
            let plane = input.plane(n, ch);
            for oy in 0..h_out {
                for ox in 0..w_out {
                    let (_, best) = window_argmax(plane, h, w, oy, ox, kernel, stride, padding);
                    out.set(n, ch, oy, ox, best);
                }
            }
        }
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn window_argmax(
    plane: &[f64],
    h: usize,
    w: usize,
    oy: usize,
    ox: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> (usize, f64) {
    let mut best = f64::NEG_INFINITY;
    let mut arg = usize::MAX;
    for ky in 0..kernel {
        let iy = (oy * stride + ky) as isize - padding as isize;
        if iy < 0 || iy >= h as isize {
            continue;
        }
        for kx in 0..kernel {
            let ix = (ox * stride + kx) as isize - padding as isize;
            if ix < 0 || ix >= w as isize {
                continue;
            }
            let idx = iy as usize * w + ix as usize;
            if arg == usize::MAX || plane[idx] > best {
                best = plane[idx];
                arg = idx;
            }
        }
    }
    (arg, best)
}

pub fn maxpool2x2_forward(input: &Tensor4) -> Result<Tensor4> {
    max_pool_forward(input, 2, 2, 0)
}

/// Routes each output gradient to the first maximal element of its window.
pub fn max_pool_backward(
    input: &Tensor4,
    kernel: usize,
    stride: usize,
    padding: usize,
    grad_output: &Tensor4,
) -> Result<Tensor4> {
    let [g, c, h, w] = input.dims();
    let h_out = pool_extent(h, kernel, stride, padding)?;
    let w_out = pool_extent(w, kernel, stride, padding)?;
    if grad_output.dims() != [g, c, h_out, w_out] {
        return Err(Error::Shape(format!(
            "max pool upstream gradient {} does not match output {g}x{c}x{h_out}x{w_out}",
            grad_output.shape_str()
        )));
    }
    let mut grad = Tensor4::zeros(input.dims());
    let plane_len = h * w;
    for n in 0..g {
        for ch in 0..c {
            let plane = input.plane(n, ch);
            let base = (n * c + ch) * plane_len;
            for oy in 0..h_out {
                for ox in 0..w_out {
                    let (arg, _) = window_argmax(plane, h, w, oy, ox, kernel, stride, padding);
                    grad.data_mut()[base + arg] += grad_output.get(n, ch, oy, ox);
                }
            }
        }
    }
    Ok(grad)
}

/// Unpadded average pooling.
pub fn avg_pool_forward(input: &Tensor4, kernel: usize, stride: usize) -> Result<Tensor4> {
    let [g, c, h, w] = input.dims();
    let h_out = pool_extent(h, kernel, stride, 0)?;
    let w_out = pool_extent(w, kernel, stride, 0)?;
    let norm = 1.0 / (kernel * kernel) as f64;
    let mut out = Tensor4::zeros([g, c, h_out, w_out]);
    for n in 0..g {
        for ch in 0..c {
            let plane = input.plane(n, ch);
            for oy in 0..h_out {
                for ox in 0..w_out {
                    let mut acc = 0.0;
                    for ky in 0..kernel {
                        let row = (oy * stride + ky) * w;
                        for kx in 0..kernel {
                            acc += plane[row + ox * stride + kx];
                        }
                    }
                    out.set(n, ch, oy, ox, acc * norm);
                }
            }
        }
    }
    Ok(out)
}

pub fn avg_pool_backward(input: &Tensor4, kernel: usize, stride: usize, grad_output: &Tensor4) -> Result<Tensor4> {
    let [g, c, h, w] = input.dims();
    let h_out = pool_extent(h, kernel, stride, 0)?;
    let w_out = pool_extent(w, kernel, stride, 0)?;
    if grad_output.dims() != [g, c, h_out, w_out] {
        return Err(Error::Shape(format!(
            "avg pool upstream gradient {} does not match output {g}x{c}x{h_out}x{w_out}",
            grad_output.shape_str()
        )));
    }
    let norm = 1.0 / (kernel * kernel) as f64;
    let mut grad = Tensor4::zeros(input.dims());
    for n in 0..g {
        for ch in 0..c {
            for oy in 0..h_out {
                for ox in 0..w_out {
                    let gv = grad_output.get(n, ch, oy, ox) * norm;
                    for ky in 0..kernel {
                        for kx in 0..kernel {
                            let (y, x) = (oy * stride + ky, ox * stride + kx);
                            let cur = grad.get(n, ch, y, x);
                            grad.set(n, ch, y, x, cur + gv);
                        }
                    }
                }
            }
        }
    }
    Ok(grad)
}

/// Averages each plane down to a single value: `g × c × 1 × 1`.
pub fn global_avg_pool_forward(input: &Tensor4) -> Tensor4 {
    let [g, c, _, _] = input.dims();
    let norm = 1.0 / input.plane_len().max(1) as f64;
    let mut out = Tensor4::zeros([g, c, 1, 1]);
    for n in 0..g {
        for ch in 0..c {
            out.set(n, ch, 0, 0, input.plane(n, ch).iter().sum::<f64>() * norm);
        }
    }
    out
}

pub fn global_avg_pool_backward(input: &Tensor4, grad_output: &Tensor4) -> Result<Tensor4> {
    let [g, c, h, w] = input.dims();
    if grad_output.dims() != [g, c, 1, 1] {
        return Err(Error::Shape(format!(
            "global pool upstream gradient {} does not match {g}x{c}x1x1",
            grad_output.shape_str()
        )));
    }
    let norm = 1.0 / (h * w).max(1) as f64;
    let mut grad = Tensor4::zeros(input.dims());
    let plane = h * w;
    for (i, chunk) in grad.data_mut().chunks_mut(plane.max(1)).enumerate() {
        let gv = grad_output.data()[i] * norm;
        chunk.iter_mut().for_each(|v| *v = gv);
    }
    Ok(grad)
}

pub fn batchnorm_forward(input: &Tensor4, params: &BatchNormParams) -> Result<Tensor4> {
    params.validate()?;
    if input.channels() != params.channels() {
        return Err(Error::Shape(format!(
            "batchnorm over {} channels applied to {}",
            params.channels(),
            input.shape_str()
        )));
    }
    let mut out = input.clone();
    let plane = input.plane_len();
    let c = input.channels();
    if plane == 0 {
        return Ok(out);
    }
    for (i, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
        let ch = i % c;
        let inv = 1.0 / (params.var[ch] + params.eps).sqrt();
        let (scale, shift, mean) = (params.scale[ch], params.shift[ch], params.mean[ch]);
        chunk.iter_mut().for_each(|v| *v = scale * (*v - mean) * inv + shift);
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct BatchNormGrads {
    pub input: Tensor4,
    pub scale: Vec<f64>,
    pub shift: Vec<f64>,
}

/// Backward of the stored-statistics normalization (an affine map per channel).
pub fn batchnorm_backward(input: &Tensor4, params: &BatchNormParams, grad_output: &Tensor4) -> Result<BatchNormGrads> {
    params.validate()?;
    same_dims("batchnorm backward", input, grad_output)?;
    let c = input.channels();
    if c != params.channels() {
        return Err(Error::Shape(format!(
            "batchnorm over {} channels applied to {}",
            params.channels(),
            input.shape_str()
        )));
    }
    let plane = input.plane_len();
    let mut grad_input = grad_output.clone();
    let mut scale = vec![0.0; c];
    let mut shift = vec![0.0; c];
    if plane > 0 {
        for (i, (gi, (x, gy))) in grad_input
            .data_mut()
            .chunks_mut(plane)
            .zip(input.data().chunks(plane).zip(grad_output.data().chunks(plane)))
            .enumerate()
        {
            let ch = i % c;
            let inv = 1.0 / (params.var[ch] + params.eps).sqrt();
            for ((g_in, &xv), &gv) in gi.iter_mut().zip(x).zip(gy) {
                scale[ch] += gv * (xv - params.mean[ch]) * inv;
                shift[ch] += gv;
                *g_in = gv * params.scale[ch] * inv;
            }
        }
    }
    Ok(BatchNormGrads {
        input: grad_input,
        scale,
        shift,
    })
}

/// Fully-connected layer over each image flattened in `(channel, row, col)` order.
/// The result is `g × out × 1 × 1`.
pub fn dense_forward(input: &Tensor4, params: &DenseParams) -> Result<Tensor4> {
    params.validate()?;
    if input.image_len() != params.in_features {
        return Err(Error::Shape(format!(
            "dense layer expects {} features, input {} flattens to {}",
            params.in_features,
            input.shape_str(),
            input.image_len()
        )));
    }
    let mut out = Tensor4::zeros([input.images(), params.out_features, 1, 1]);
    for n in 0..input.images() {
        let x = input.image(n);
        for o in 0..params.out_features {
            let row = &params.weights[o * params.in_features..(o + 1) * params.in_features];
            let acc: f64 = row.iter().zip(x).map(|(a, b)| a * b).sum();
            out.set(n, o, 0, 0, acc + params.bias[o]);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct DenseGrads {
    pub input: Tensor4,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

pub fn dense_backward(input: &Tensor4, params: &DenseParams, grad_output: &Tensor4) -> Result<DenseGrads> {
    params.validate()?;
    if grad_output.dims() != [input.images(), params.out_features, 1, 1] || input.image_len() != params.in_features {
        return Err(Error::Shape(format!(
            "dense backward: input {} and upstream gradient {} do not fit a {}->{} layer",
            input.shape_str(),
            grad_output.shape_str(),
            params.in_features,
            params.out_features
        )));
    }
    let fan_in = params.in_features;
    let mut grad_input = Tensor4::zeros(input.dims());
    let mut weights = vec![0.0; params.weights.len()];
    let mut bias = vec![0.0; params.out_features];
    for n in 0..input.images() {
        let x = input.image(n);
        let gy = grad_output.image(n);
        let gx = &mut grad_input.data_mut()[n * fan_in..(n + 1) * fan_in];
        for (o, &g) in gy.iter().enumerate() {
            bias[o] += g;
            let row = &params.weights[o * fan_in..(o + 1) * fan_in];
            let grow = &mut weights[o * fan_in..(o + 1) * fan_in];
            for i in 0..fan_in {
                grow[i] += g * x[i];
                gx[i] += g * row[i];
            }
        }
    }
    Ok(DenseGrads {
        input: grad_input,
        weights,
        bias,
    })
}

/// Elementwise sum of two identically shaped maps (residual merge).
pub fn add_forward(a: &Tensor4, b: &Tensor4) -> Result<Tensor4> {
    same_dims("add", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Tensor4::from_vec(a.dims(), data)
}

/// Both branches receive the upstream gradient unchanged.
pub fn add_backward(grad_output: &Tensor4) -> (Tensor4, Tensor4) {
    (grad_output.clone(), grad_output.clone())
}

/// Stacks inputs along the channel axis, preserving their order.
pub fn concat_channels(inputs: &[&Tensor4]) -> Result<Tensor4> {
    let first = inputs
        .first()
        .ok_or_else(|| Error::Shape("concat needs at least one input".into()))?;
    let [g, _, h, w] = first.dims();
    for t in inputs {
        let [tg, _, th, tw] = t.dims();
        if (tg, th, tw) != (g, h, w) {
            return Err(Error::Shape(format!(
                "concat inputs disagree: {} vs {}",
                first.shape_str(),
                t.shape_str()
            )));
        }
    }
    let channels: usize = inputs.iter().map(|t| t.channels()).sum();
    let mut data = Vec::with_capacity(g * channels * h * w);
    for n in 0..g {
        for t in inputs {
            data.extend_from_slice(t.image(n));
        }
    }
    Tensor4::from_vec([g, channels, h, w], data)
}

/// Splits a concatenated gradient back into per-input blocks.
pub fn concat_backward(grad_output: &Tensor4, channel_counts: &[usize]) -> Result<Vec<Tensor4>> {
    let [g, c, h, w] = grad_output.dims();
    if channel_counts.iter().sum::<usize>() != c {
        return Err(Error::Shape(format!(
            "concat backward: parts {channel_counts:?} do not sum to {} channels",
            c
        )));
    }
    let plane = h * w;
    let mut parts: Vec<Vec<f64>> = channel_counts
        .iter()
        .map(|&cc| Vec::with_capacity(g * cc * plane))
        .collect();
    for n in 0..g {
        let image = grad_output.image(n);
        let mut offset = 0;
        for (part, &cc) in parts.iter_mut().zip(channel_counts) {
            part.extend_from_slice(&image[offset * plane..(offset + cc) * plane]);
            offset += cc;
        }
    }
    parts
        .into_iter()
        .zip(channel_counts)
        .map(|(data, &cc)| Tensor4::from_vec([g, cc, h, w], data))
        .collect()
}

/// Parameter-free residual shortcut: keeps every `stride`-th row and column and
/// surrounds the channels with zero planes (`front` before, `back` after).
pub fn channel_pad_forward(input: &Tensor4, stride: usize, front: usize, back: usize) -> Result<Tensor4> {
    if stride == 0 {
        return Err(Error::Shape("channel pad stride must be positive".into()));
    }
    let [g, c, h, w] = input.dims();
    let (h_out, w_out) = (h.div_ceil(stride), w.div_ceil(stride));
    let c_out = front + c + back;
    let mut out = Tensor4::zeros([g, c_out, h_out, w_out]);
    for n in 0..g {
        for ch in 0..c {
            for oy in 0..h_out {
                for ox in 0..w_out {
                    out.set(n, front + ch, oy, ox, input.get(n, ch, oy * stride, ox * stride));
                }
            }
        }
    }
    Ok(out)
}

pub fn channel_pad_backward(
    input: &Tensor4,
    stride: usize,
    front: usize,
    back: usize,
    grad_output: &Tensor4,
) -> Result<Tensor4> {
    let [g, c, h, w] = input.dims();
    let (h_out, w_out) = (h.div_ceil(stride), w.div_ceil(stride));
    if grad_output.dims() != [g, front + c + back, h_out, w_out] {
        return Err(Error::Shape(format!(
            "channel pad upstream gradient {} does not match input {}",
            grad_output.shape_str(),
            input.shape_str()
        )));
    }
    let mut grad = Tensor4::zeros(input.dims());
    for n in 0..g {
        for ch in 0..c {
            for oy in 0..h_out {
                for ox in 0..w_out {
                    grad.set(n, ch, oy * stride, ox * stride, grad_output.get(n, front + ch, oy, ox));
                }
            }
        }
    }
    Ok(grad)
}
