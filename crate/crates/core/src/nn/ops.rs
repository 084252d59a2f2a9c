//! Per-kind layer kernels on batch tensors.
//!
//! Spatial tensors are `[batch, height, width, channels]`; conv weights are
//! `[3, 3, in_channels, out_channels]`; dense weights are `[in, out]`.
//! Batch normalization treats the last axis as the channel axis.

use rand::Rng;

use crate::nn::{NnError, Tensor};
use crate::scalar::{gemm, MatRef, Scalar};

pub const KERNEL: usize = 3;

/// Output size and leading pad of a "same" padded 3-wide window.
///
/// The total padding is split with the odd element at the end, so a stride-2
/// window over an even size reads one padded row/column at the bottom/right.
pub fn same_padding(size: usize, stride: usize) -> (usize, usize) {
    let out = size.div_ceil(stride);
    let total = ((out - 1) * stride + KERNEL).saturating_sub(size);
    (out, total / 2)
}

#[derive(Clone, Copy, Debug)]
struct ConvGeometry {
    batch: usize,
    h: usize,
    w: usize,
    c: usize,
    stride: usize,
    oh: usize,
    ow: usize,
    pad_top: usize,
    pad_left: usize,
}

impl ConvGeometry {
    fn new(input: &[usize], stride: usize) -> Result<Self, NnError> {
        let &[batch, h, w, c] = input else {
            return Err(NnError::ShapeMismatch(format!("conv2d expects a 4-d input, got {input:?}")));
        };
        if stride != 1 && stride != 2 {
            return Err(NnError::InvalidHyperparameter(format!("conv2d stride {stride}")));
        }
        let (oh, pad_top) = same_padding(h, stride);
        let (ow, pad_left) = same_padding(w, stride);
        Ok(Self { batch, h, w, c, stride, oh, ow, pad_top, pad_left })
    }

    fn rows(&self) -> usize {
        self.batch * self.oh * self.ow
    }

    fn patch(&self) -> usize {
        KERNEL * KERNEL * self.c
    }

    /// Visits every in-image run of kernel taps as
    /// (patch row, offset within the patch row, input offset, run length);
    /// a run covers consecutive `kx`, which are contiguous on both sides.
    fn for_each_run(&self, mut f: impl FnMut(usize, usize, usize, usize)) {
        let c = self.c;
        for b in 0..self.batch {
            for oy in 0..self.oh {
                for ky in 0..KERNEL {
                    let iy = (oy * self.stride + ky) as isize - self.pad_top as isize;
                    if iy < 0 || iy >= self.h as isize {
                        continue;
                    }
                    let in_row = (b * self.h + iy as usize) * self.w;
                    for ox in 0..self.ow {
                        let row = (b * self.oh + oy) * self.ow + ox;
                        let x0 = (ox * self.stride) as isize - self.pad_left as isize;
                        let kx0 = (-x0).max(0) as usize;
                        let kx1 = (self.w as isize - x0).min(KERNEL as isize) as usize;
                        if kx0 >= kx1 {
                            continue;
                        }
                        let ix0 = (x0 + kx0 as isize) as usize;
                        f(row, (ky * KERNEL + kx0) * c, (in_row + ix0) * c, (kx1 - kx0) * c);
                    }
                }
            }
        }
    }

    fn im2col<T: Scalar>(&self, input: &[T]) -> Vec<T> {
        let patch = self.patch();
        let mut cols = vec![T::zero(); self.rows() * patch];
        self.for_each_run(|row, off, src, len| {
            let at = row * patch + off;
            cols[at..at + len].copy_from_slice(&input[src..src + len]);
        });
        cols
    }

    fn col2im<T: Scalar>(&self, cols: &[T]) -> Vec<T> {
        let patch = self.patch();
        let mut image = vec![T::zero(); self.batch * self.h * self.w * self.c];
        self.for_each_run(|row, off, src, len| {
            let from = &cols[row * patch + off..row * patch + off + len];
            for (dst, &v) in image[src..src + len].iter_mut().zip(from) {
                *dst += v;
            }
        });
        image
    }
}

fn check_conv_params<T: Scalar>(geo: &ConvGeometry, weights: &Tensor<T>, bias: &Tensor<T>) -> Result<usize, NnError> {
    let ws = weights.shape();
    if ws.len() != 4 || ws[0] != KERNEL || ws[1] != KERNEL || ws[2] != geo.c {
        return Err(NnError::ShapeMismatch(format!(
            "conv2d weights {ws:?} for {} input channels",
            geo.c
        )));
    }
    let k = ws[3];
    if bias.shape() != [k] {
        return Err(NnError::ShapeMismatch(format!("conv2d bias {:?} for {k} filters", bias.shape())));
    }
    Ok(k)
}

/// Same-padded 3×3 cross-correlation, as one product of the patch matrix
/// with the flattened kernel.
pub fn conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
) -> Result<Tensor<T>, NnError> {
    let geo = ConvGeometry::new(input.shape(), stride)?;
    let k = check_conv_params(&geo, weights, bias)?;
    let cols = geo.im2col(input.data());
    let mut out = Vec::with_capacity(geo.rows() * k);
    for _ in 0..geo.rows() {
        out.extend_from_slice(bias.data());
    }
    gemm(
        MatRef::new(&cols, geo.rows(), geo.patch()),
        MatRef::new(weights.data(), geo.patch(), k),
        &mut out,
        true,
    );
    Tensor::new(vec![geo.batch, geo.oh, geo.ow, k], out)
}

pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn conv2d_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    input: &Tensor<T>,
    weights: &Tensor<T>,
    stride: usize,
) -> Result<ConvGrads<T>, NnError> {
    let geo = ConvGeometry::new(input.shape(), stride)?;
    let k = weights.shape().last().copied().unwrap_or(0);
    check_conv_params(&geo, weights, &Tensor::zeros(&[k.max(1)]))?;
    if grad_out.shape() != [geo.batch, geo.oh, geo.ow, k] {
        return Err(NnError::ShapeMismatch(format!(
            "conv2d upstream gradient {:?}, expected {:?}",
            grad_out.shape(),
            [geo.batch, geo.oh, geo.ow, k]
        )));
    }
    let rows = geo.rows();
    let patch = geo.patch();
    let cols = geo.im2col(input.data());
    let g = MatRef::new(grad_out.data(), rows, k);

    let mut grad_w = vec![T::zero(); patch * k];
    gemm(MatRef::new(&cols, rows, patch).t(), g, &mut grad_w, false);

    let mut grad_b = vec![T::zero(); k];
    for row in grad_out.data().chunks_exact(k) {
        for (acc, &v) in grad_b.iter_mut().zip(row) {
            *acc += v;
        }
    }

    let mut grad_cols = cols;
    gemm(g, MatRef::new(weights.data(), patch, k).t(), &mut grad_cols, false);
    let grad_in = geo.col2im(&grad_cols);

    Ok(ConvGrads {
        input: Tensor::new(input.shape().to_vec(), grad_in)?,
        weights: Tensor::new(weights.shape().to_vec(), grad_w)?,
        bias: Tensor::new(vec![k], grad_b)?,
    })
}

fn channels_of<T: Scalar>(input: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<usize, NnError> {
    let c = *input.shape().last().unwrap_or(&0);
    if input.shape().len() < 2 || gamma.shape() != [c] || beta.shape() != [c] {
        return Err(NnError::ShapeMismatch(format!(
            "batchnorm over {:?} with gamma {:?}, beta {:?}",
            input.shape(),
            gamma.shape(),
            beta.shape()
        )));
    }
    Ok(c)
}

/// Values kept from a training-mode normalization for the backward pass.
#[derive(Clone, Debug)]
pub struct BatchNormTrace<T> {
    pub normalized: Tensor<T>,
    pub inv_std: Vec<T>,
    pub batch_mean: Vec<T>,
    pub batch_var: Vec<T>,
}

/// Normalizes with the batch's own per-channel mean and biased variance.
pub fn batchnorm_forward_train<T: Scalar>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    epsilon: T,
) -> Result<(Tensor<T>, BatchNormTrace<T>), NnError> {
    let c = channels_of(input, gamma, beta)?;
    if input.batch() < 2 {
        return Err(NnError::BatchTooSmall(input.batch()));
    }
    let x = input.data();
    let m = T::from_usize(x.len() / c).unwrap();
    let mut mean = vec![T::zero(); c];
    for row in x.chunks_exact(c) {
        for (acc, &v) in mean.iter_mut().zip(row) {
            *acc += v;
        }
    }
    mean.iter_mut().for_each(|v| *v /= m);
    let mut var = vec![T::zero(); c];
    for row in x.chunks_exact(c) {
        for ((acc, &v), &mu) in var.iter_mut().zip(row).zip(&mean) {
            let d = v - mu;
            *acc += d * d;
        }
    }
    var.iter_mut().for_each(|v| *v /= m);
    let inv_std: Vec<T> = var.iter().map(|&v| (v + epsilon).sqrt().recip()).collect();

    let mut normalized = Vec::with_capacity(x.len());
    let mut out = Vec::with_capacity(x.len());
    let (g, b) = (gamma.data(), beta.data());
    for row in x.chunks_exact(c) {
        for ch in 0..c {
            let xh = (row[ch] - mean[ch]) * inv_std[ch];
            normalized.push(xh);
            out.push(g[ch] * xh + b[ch]);
        }
    }
    let shape = input.shape().to_vec();
    Ok((
        Tensor::new(shape.clone(), out)?,
        BatchNormTrace { normalized: Tensor::new(shape, normalized)?, inv_std, batch_mean: mean, batch_var: var },
    ))
}

/// Normalizes with stored running statistics.
pub fn batchnorm_forward_infer<T: Scalar>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &[T],
    running_var: &[T],
    epsilon: T,
) -> Result<Tensor<T>, NnError> {
    let c = channels_of(input, gamma, beta)?;
    if running_mean.len() != c || running_var.len() != c {
        return Err(NnError::ShapeMismatch("batchnorm running statistics".into()));
    }
    let (g, b) = (gamma.data(), beta.data());
    let scale: Vec<T> = (0..c).map(|ch| g[ch] / (running_var[ch] + epsilon).sqrt()).collect();
    let mut out = Vec::with_capacity(input.len());
    for row in input.data().chunks_exact(c) {
        for ch in 0..c {
            out.push((row[ch] - running_mean[ch]) * scale[ch] + b[ch]);
        }
    }
    Tensor::new(input.shape().to_vec(), out)
}

pub struct AffineGrads<T> {
    pub input: Tensor<T>,
    pub scale: Tensor<T>,
    pub shift: Tensor<T>,
}

/// Backward of [`batchnorm_forward_train`].
pub fn batchnorm_backward_train<T: Scalar>(
    grad_out: &Tensor<T>,
    trace: &BatchNormTrace<T>,
    gamma: &Tensor<T>,
) -> Result<AffineGrads<T>, NnError> {
    let c = gamma.len();
    if grad_out.shape() != trace.normalized.shape() {
        return Err(NnError::ShapeMismatch("batchnorm upstream gradient".into()));
    }
    let g = grad_out.data();
    let xh = trace.normalized.data();
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for (grow, xrow) in g.chunks_exact(c).zip(xh.chunks_exact(c)) {
        for ch in 0..c {
            dgamma[ch] += grow[ch] * xrow[ch];
            dbeta[ch] += grow[ch];
        }
    }
    let m = T::from_usize(g.len() / c).unwrap();
    let coef: Vec<T> = (0..c).map(|ch| gamma.data()[ch] * trace.inv_std[ch] / m).collect();
    let mut dx = Vec::with_capacity(g.len());
    for (grow, xrow) in g.chunks_exact(c).zip(xh.chunks_exact(c)) {
        for ch in 0..c {
            dx.push(coef[ch] * (m * grow[ch] - dbeta[ch] - xrow[ch] * dgamma[ch]));
        }
    }
    Ok(AffineGrads {
        input: Tensor::new(grad_out.shape().to_vec(), dx)?,
        scale: Tensor::new(vec![c], dgamma)?,
        shift: Tensor::new(vec![c], dbeta)?,
    })
}

/// Backward of [`batchnorm_forward_infer`]; statistics are constants here.
pub fn batchnorm_backward_infer<T: Scalar>(
    grad_out: &Tensor<T>,
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    running_mean: &[T],
    running_var: &[T],
    epsilon: T,
) -> Result<AffineGrads<T>, NnError> {
    let c = gamma.len();
    if grad_out.shape() != input.shape() {
        return Err(NnError::ShapeMismatch("batchnorm upstream gradient".into()));
    }
    let inv_std: Vec<T> = running_var.iter().map(|&v| (v + epsilon).sqrt().recip()).collect();
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    let mut dx = Vec::with_capacity(input.len());
    for (grow, xrow) in grad_out.data().chunks_exact(c).zip(input.data().chunks_exact(c)) {
        for ch in 0..c {
            let xh = (xrow[ch] - running_mean[ch]) * inv_std[ch];
            dgamma[ch] += grow[ch] * xh;
            dbeta[ch] += grow[ch];
            dx.push(grow[ch] * gamma.data()[ch] * inv_std[ch]);
        }
    }
    Ok(AffineGrads {
        input: Tensor::new(input.shape().to_vec(), dx)?,
        scale: Tensor::new(vec![c], dgamma)?,
        shift: Tensor::new(vec![c], dbeta)?,
    })
}

/// `input [batch, in] · weights [in, out] + bias`.
pub fn dense_forward<T: Scalar>(input: &Tensor<T>, weights: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>, NnError> {
    let (b, i) = match input.shape() {
        &[b, i] => (b, i),
        s => return Err(NnError::ShapeMismatch(format!("dense expects [batch, features], got {s:?}"))),
    };
    let o = match weights.shape() {
        &[wi, o] if wi == i => o,
        s => return Err(NnError::ShapeMismatch(format!("dense weights {s:?} for {i} inputs"))),
    };
    if bias.shape() != [o] {
        return Err(NnError::ShapeMismatch(format!("dense bias {:?} for {o} units", bias.shape())));
    }
    let mut out = Vec::with_capacity(b * o);
    for _ in 0..b {
        out.extend_from_slice(bias.data());
    }
    gemm(MatRef::new(input.data(), b, i), MatRef::new(weights.data(), i, o), &mut out, true);
    Tensor::new(vec![b, o], out)
}

pub fn dense_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    input: &Tensor<T>,
    weights: &Tensor<T>,
) -> Result<AffineGrads<T>, NnError> {
    let (b, i) = (input.batch(), input.sample_len());
    let o = weights.shape().get(1).copied().unwrap_or(0);
    if grad_out.shape() != [b, o] || weights.shape() != [i, o] {
        return Err(NnError::ShapeMismatch("dense upstream gradient".into()));
    }
    let g = MatRef::new(grad_out.data(), b, o);
    let mut dw = vec![T::zero(); i * o];
    gemm(MatRef::new(input.data(), b, i).t(), g, &mut dw, false);
    let mut db = vec![T::zero(); o];
    for row in grad_out.data().chunks_exact(o) {
        for (acc, &v) in db.iter_mut().zip(row) {
            *acc += v;
        }
    }
    let mut dx = vec![T::zero(); b * i];
    gemm(g, MatRef::new(weights.data(), i, o).t(), &mut dx, false);
    Ok(AffineGrads {
        input: Tensor::new(input.shape().to_vec(), dx)?,
        scale: Tensor::new(vec![i, o], dw)?,
        shift: Tensor::new(vec![o], db)?,
    })
}

pub fn relu_forward<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn relu_backward<T: Scalar>(grad_out: &Tensor<T>, input: &Tensor<T>) -> Tensor<T> {
    let data = grad_out
        .data()
        .iter()
        .zip(input.data())
        .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::new(grad_out.shape().to_vec(), data).expect("same shape")
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        (T::one() + (-x).exp()).recip()
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid_forward<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(sigmoid)
}

/// Takes the forward *output*.
pub fn sigmoid_backward<T: Scalar>(grad_out: &Tensor<T>, output: &Tensor<T>) -> Tensor<T> {
    let data = grad_out
        .data()
        .iter()
        .zip(output.data())
        .map(|(&g, &y)| g * y * (T::one() - y))
        .collect();
    Tensor::new(grad_out.shape().to_vec(), data).expect("same shape")
}

/// Softmax over the last axis with max subtraction.
pub fn softmax_forward<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    let n = *input.shape().last().unwrap();
    let mut out = Vec::with_capacity(input.len());
    for row in input.data().chunks_exact(n) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let start = out.len();
        let mut sum = T::zero();
        for &v in row {
            let e = (v - max).exp();
            sum += e;
            out.push(e);
        }
        out[start..].iter_mut().for_each(|v| *v /= sum);
    }
    Tensor::new(input.shape().to_vec(), out).expect("same shape")
}

/// Takes the forward *output*.
pub fn softmax_backward<T: Scalar>(grad_out: &Tensor<T>, output: &Tensor<T>) -> Tensor<T> {
    let n = *output.shape().last().unwrap();
    let mut dx = Vec::with_capacity(output.len());
    for (g, y) in grad_out.data().chunks_exact(n).zip(output.data().chunks_exact(n)) {
        let dot: T = g.iter().zip(y).map(|(&a, &b)| a * b).sum();
        dx.extend(g.iter().zip(y).map(|(&gi, &yi)| yi * (gi - dot)));
    }
    Tensor::new(output.shape().to_vec(), dx).expect("same shape")
}

/// Inverted dropout: each value is kept with probability `1 - rate` and the
/// survivors are scaled by `1 / (1 - rate)`. Returns the output and the
/// multiplicative mask.
pub fn dropout_forward<T: Scalar, R: Rng + ?Sized>(input: &Tensor<T>, rate: f64, rng: &mut R) -> (Tensor<T>, Tensor<T>) {
    let keep = T::from_f64_lossy(1.0 / (1.0 - rate));
    let mask_data: Vec<T> = (0..input.len())
        .map(|_| if rng.gen::<f64>() < rate { T::zero() } else { keep })
        .collect();
    let mask = Tensor::new(input.shape().to_vec(), mask_data).expect("same shape");
    (dropout_apply(input, &mask), mask)
}

/// Multiplies elementwise by a dropout mask; also the backward pass.
pub fn dropout_apply<T: Scalar>(values: &Tensor<T>, mask: &Tensor<T>) -> Tensor<T> {
    let data = values.data().iter().zip(mask.data()).map(|(&v, &m)| v * m).collect();
    Tensor::new(values.shape().to_vec(), data).expect("same shape")
}

/// Stacks operands along the channel (last) axis in operand order.
pub fn concat_channels_forward<T: Scalar>(inputs: &[&Tensor<T>]) -> Result<Tensor<T>, NnError> {
    let first = inputs.first().ok_or_else(|| NnError::ShapeMismatch("concat of nothing".into()))?;
    let lead = &first.shape()[..first.shape().len() - 1];
    let mut channels = Vec::with_capacity(inputs.len());
    for t in inputs {
        let s = t.shape();
        if s.len() != first.shape().len() || &s[..s.len() - 1] != lead {
            return Err(NnError::ConcatSpatialMismatch(format!("{:?} vs {:?}", first.shape(), s)));
        }
        channels.push(s[s.len() - 1]);
    }
    let total: usize = channels.iter().sum();
    let positions: usize = lead.iter().product();
    let mut out = Vec::with_capacity(positions * total);
    for p in 0..positions {
        for (t, &c) in inputs.iter().zip(&channels) {
            out.extend_from_slice(&t.data()[p * c..(p + 1) * c]);
        }
    }
    let mut shape = lead.to_vec();
    shape.push(total);
    Tensor::new(shape, out)
}

/// Splits a concatenated gradient back into per-operand gradients.
pub fn concat_channels_backward<T: Scalar>(grad_out: &Tensor<T>, channels: &[usize]) -> Result<Vec<Tensor<T>>, NnError> {
    let s = grad_out.shape();
    let total = s[s.len() - 1];
    if channels.iter().sum::<usize>() != total {
        return Err(NnError::ShapeMismatch("concat upstream gradient".into()));
    }
    let lead = &s[..s.len() - 1];
    let positions: usize = lead.iter().product();
    let mut parts: Vec<Vec<T>> = channels.iter().map(|&c| Vec::with_capacity(positions * c)).collect();
    for row in grad_out.data().chunks_exact(total) {
        let mut off = 0;
        for (part, &c) in parts.iter_mut().zip(channels) {
            part.extend_from_slice(&row[off..off + c]);
            off += c;
        }
    }
    parts
        .into_iter()
        .zip(channels)
        .map(|(data, &c)| {
            let mut shape = lead.to_vec();
            shape.push(c);
            Tensor::new(shape, data)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn same_padding_shapes() {
        assert_eq!(same_padding(16, 1), (16, 1));
        assert_eq!(same_padding(16, 2), (8, 0));
        assert_eq!(same_padding(5, 2), (3, 1));
        assert_eq!(same_padding(1, 2), (1, 1));
        assert_eq!(same_padding(1, 1), (1, 1));
    }

    #[test]
    fn conv_of_zero_input_is_bias() {
        let input = Tensor::<f64>::zeros(&[2, 4, 4, 3]);
        let weights = Tensor::filled(&[3, 3, 3, 2], 0.7);
        let bias = t(&[2], &[0.25, -1.5]);
        let out = conv2d_forward(&input, &weights, &bias, 1).unwrap();
        assert_eq!(out.shape(), [2, 4, 4, 2]);
        for px in out.data().chunks_exact(2) {
            assert_eq!(px, [0.25, -1.5]);
        }
    }

    #[test]
    fn conv_center_tap_on_single_pixel() {
        let mut weights = Tensor::<f64>::zeros(&[3, 3, 1, 1]);
        weights.data_mut()[4] = 1.5;
        let bias = Tensor::zeros(&[1]);
        for stride in [1, 2] {
            let out = conv2d_forward(&t(&[1, 1, 1, 1], &[2.0]), &weights, &bias, stride).unwrap();
            assert_eq!(out.data(), [3.0]);
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let input = Tensor::<f64>::zeros(&[1, 4, 4, 2]);
        let weights = Tensor::zeros(&[3, 3, 3, 1]);
        let bias = Tensor::zeros(&[1]);
        assert!(matches!(conv2d_forward(&input, &weights, &bias, 1), Err(NnError::ShapeMismatch(_))));
        assert!(matches!(conv2d_forward(&input, &Tensor::zeros(&[3, 3, 2, 1]), &bias, 3), Err(NnError::InvalidHyperparameter(_))));
    }

    #[test]
    fn conv_backward_scalar_case() {
        let mut weights = Tensor::<f64>::zeros(&[3, 3, 1, 1]);
        weights.data_mut()[4] = -0.5;
        let input = t(&[1, 1, 1, 1], &[3.0]);
        let upstream = t(&[1, 1, 1, 1], &[2.0]);
        let g = conv2d_backward(&upstream, &input, &weights, 1).unwrap();
        assert_eq!(g.weights.data()[4], 6.0);
        assert_eq!(g.weights.data().iter().filter(|&&v| v != 0.0).count(), 1);
        assert_eq!(g.bias.data(), [2.0]);
        assert_eq!(g.input.data(), [-1.0]);

        let zero = conv2d_backward(&Tensor::zeros(&[1, 1, 1, 1]), &input, &weights, 1).unwrap();
        assert!(zero.weights.data().iter().chain(zero.bias.data()).chain(zero.input.data()).all(|&v| v == 0.0));
    }

    #[test]
    fn batchnorm_two_value_channel() {
        let input = t(&[2, 1], &[1.0, 3.0]);
        let (out, trace) = batchnorm_forward_train(&input, &t(&[1], &[1.0]), &t(&[1], &[0.0]), 1e-3).unwrap();
        let expect = 1.0 / (1.0f64 + 1e-3).sqrt();
        assert!((out.data()[0] + expect).abs() < 1e-12);
        assert!((out.data()[1] - expect).abs() < 1e-12);
        assert_eq!(trace.batch_mean, [2.0]);
        assert_eq!(trace.batch_var, [1.0]);
    }

    #[test]
    fn batchnorm_zero_gamma_yields_beta() {
        let input = t(&[3, 2], &[1.0, -4.0, 2.0, 9.0, 0.5, 0.0]);
        let (out, _) = batchnorm_forward_train(&input, &t(&[2], &[0.0, 0.0]), &t(&[2], &[0.3, -0.7]), 1e-3).unwrap();
        for row in out.data().chunks_exact(2) {
            assert_eq!(row, [0.3, -0.7]);
        }
    }

    #[test]
    fn batchnorm_train_needs_two_samples() {
        let input = t(&[1, 2], &[1.0, 2.0]);
        let r = batchnorm_forward_train(&input, &t(&[2], &[1.0, 1.0]), &t(&[2], &[0.0, 0.0]), 1e-3);
        assert!(matches!(r, Err(NnError::BatchTooSmall(1))));
    }

    #[test]
    fn activations_basic_values() {
        assert_eq!(relu_forward(&t(&[3], &[-1.0, 0.0, 2.0])).data(), [0.0, 0.0, 2.0]);
        assert_eq!(softmax_forward(&t(&[1, 4], &[0.0; 4])).data(), [0.25; 4]);
        let s = sigmoid_forward(&t(&[3], &[-800.0, 0.0, 800.0]));
        assert_eq!(s.data()[1], 0.5);
        assert!(s.data()[0] >= 0.0 && s.data()[2] <= 1.0);
        let big = softmax_forward(&t(&[1, 2], &[1000.0, 1000.0]));
        assert_eq!(big.data(), [0.5, 0.5]);
    }

    #[test]
    fn concat_preserves_operand_slices() {
        let a = Tensor::<f64>::new(vec![1, 16, 16, 1], (0..256).map(|v| v as f64).collect()).unwrap();
        let b = Tensor::<f64>::new(vec![1, 16, 16, 8], (0..2048).map(|v| -(v as f64)).collect()).unwrap();
        let out = concat_channels_forward(&[&a, &b]).unwrap();
        assert_eq!(out.shape(), [1, 16, 16, 9]);
        for p in 0..256 {
            assert_eq!(out.data()[p * 9], a.data()[p]);
            assert_eq!(&out.data()[p * 9 + 1..p * 9 + 9], &b.data()[p * 8..p * 8 + 8]);
        }
        let parts = concat_channels_backward(&out, &[1, 8]).unwrap();
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);

        let c = Tensor::<f64>::zeros(&[1, 8, 8, 1]);
        assert!(matches!(concat_channels_forward(&[&a, &c]), Err(NnError::ConcatSpatialMismatch(_))));
    }

    #[test]
    fn dropout_mask_is_inverted_scaling() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let input = Tensor::<f64>::filled(&[10, 100], 1.0);
        let (out, mask) = dropout_forward(&input, 0.2, &mut rng);
        assert!(mask.data().iter().all(|&m| m == 0.0 || m == 1.25));
        let dropped = mask.data().iter().filter(|&&m| m == 0.0).count();
        assert!((100..300).contains(&dropped));
        assert_eq!(out, mask);
    }
}
