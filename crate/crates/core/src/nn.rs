//! Layer vocabulary for the backbone and head: convolution, ReLU, 2×2 max
//! pooling, global average pooling, fully connected, softmax cross-entropy.
//!
//! The free functions here are eager and allocation-only; the [`Tape`]
//! methods of the same names record the op for backpropagation and share the
//! kernels in [`kernels`].
//!
//! "Convolution" is cross-correlation (no kernel flip) with symmetric zero
//! padding.
//!
//! [`Tape`]: crate::tensor::Tape

use crate::tensor::{Result, Shape, Tensor4, TensorError};

#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    /// `(out_ch, in_ch, k, k)`
    pub weight: Tensor4,
    /// `(out_ch, 1, 1, 1)`
    pub bias: Tensor4,
    pub stride: usize,
    pub padding: usize,
}

impl ConvParams {
    pub fn new(weight: Tensor4, bias: Tensor4, stride: usize, padding: usize) -> Result<Self> {
        let [out_ch, _, kh, kw] = weight.shape();
        if kh != kw || kh % 2 == 0 {
            return Err(TensorError::InvalidShape {
                op: "conv2d",
                detail: format!("kernel must be square with odd side, got {kh}x{kw}"),
            });
        }
        if stride == 0 {
            return Err(TensorError::InvalidShape {
                op: "conv2d",
                detail: "stride must be positive".into(),
            });
        }
        if bias.shape() != [out_ch, 1, 1, 1] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d bias",
                lhs: bias.shape(),
                rhs: [out_ch, 1, 1, 1],
            });
        }
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearParams {
    /// `(out_features, in_features, 1, 1)`
    pub weight: Tensor4,
    /// `(out_features, 1, 1, 1)`
    pub bias: Tensor4,
}

impl LinearParams {
    pub fn new(weight: Tensor4, bias: Tensor4) -> Result<Self> {
        let [out_f, in_f, a, b] = weight.shape();
        if out_f == 0 || in_f == 0 || a != 1 || b != 1 {
            return Err(TensorError::InvalidShape {
                op: "linear",
                detail: format!(
                    "weight must be (out, in, 1, 1) with positive dims, got {:?}",
                    weight.shape()
                ),
            });
        }
        if bias.shape() != [out_f, 1, 1, 1] {
            return Err(TensorError::ShapeMismatch {
                op: "linear bias",
                lhs: bias.shape(),
                rhs: [out_f, 1, 1, 1],
            });
        }
        Ok(Self { weight, bias })
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape()[0]
    }
}

/// `floor((size + 2·padding − k) / stride) + 1`, or `None` when the kernel
/// does not fit.
pub fn conv_output_side(size: usize, k: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = size + 2 * padding;
    if padded < k || stride == 0 {
        return None;
    }
    Some((padded - k) / stride + 1)
}

pub fn conv2d(x: &Tensor4, p: &ConvParams) -> Result<Tensor4> {
    let out_shape = kernels::conv2d_shape(x.shape(), p.weight.shape(), p.stride, p.padding)?;
    let data = kernels::conv2d_forward(
        x.data(),
        x.shape(),
        p.weight.data(),
        p.weight.shape(),
        p.bias.data(),
        p.stride,
        p.padding,
        out_shape,
    );
    Tensor4::from_vec(out_shape, data)
}

pub fn relu(x: &Tensor4) -> Tensor4 {
    let data = x
        .data()
        .iter()
        .map(|&v| if v > 0.0 { v } else { 0.0 })
        .collect();
    Tensor4::from_vec(x.shape(), data).expect("same shape")
}

pub fn maxpool2(x: &Tensor4) -> Result<Tensor4> {
    let out_shape = kernels::maxpool2_shape(x.shape())?;
    let (data, _) = kernels::maxpool2_forward(x.data(), x.shape());
    Tensor4::from_vec(out_shape, data)
}

pub fn global_avg_pool(x: &Tensor4) -> Result<Tensor4> {
    let out_shape = kernels::gap_shape(x.shape())?;
    Tensor4::from_vec(out_shape, kernels::gap_forward(x.data(), x.shape()))
}

pub fn linear(x: &Tensor4, p: &LinearParams) -> Result<Tensor4> {
    let out_shape = kernels::linear_shape(x.shape(), p.weight.shape())?;
    let data = kernels::linear_forward(
        x.data(),
        x.shape(),
        p.weight.data(),
        p.weight.shape(),
        p.bias.data(),
    );
    Tensor4::from_vec(out_shape, data)
}

/// Mean over the batch of `−log softmax(logits)[label]`.
pub fn softmax_cross_entropy(logits: &Tensor4, labels: &[usize]) -> Result<f64> {
    kernels::check_logits(logits.shape(), labels)?;
    let (loss, _) = kernels::softmax_xent_forward(logits.data(), logits.shape(), labels);
    Ok(loss)
}

/// Row-wise softmax of `(n, classes, 1, 1)` logits.
pub fn softmax(logits: &Tensor4) -> Tensor4 {
    let [n, classes, h, w] = logits.shape();
    let cols = classes * h * w;
    let mut out = logits.data().to_vec();
    for row in 0..n {
        kernels::softmax_row(&mut out[row * cols..(row + 1) * cols]);
    }
    Tensor4::from_vec(logits.shape(), out).expect("same shape")
}

pub(crate) mod kernels {
    use super::*;

    pub fn conv2d_shape(x: Shape, w: Shape, stride: usize, padding: usize) -> Result<Shape> {
        let [n, c, h, wd] = x;
        let [o, ci, kh, kw] = w;
        if c != ci {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d channels",
                lhs: x,
                rhs: w,
            });
        }
        let oh = conv_output_side(h, kh, stride, padding);
        let ow = conv_output_side(wd, kw, stride, padding);
        match (oh, ow) {
            (Some(oh), Some(ow)) if oh > 0 && ow > 0 => Ok([n, o, oh, ow]),
            _ => Err(TensorError::InvalidShape {
                op: "conv2d",
                detail: format!(
                    "non-positive output for input {x:?}, kernel {w:?}, padding {padding}"
                ),
            }),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn im2col(
        img: &[f64],
        c: usize,
        h: usize,
        w: usize,
        k: usize,
        stride: usize,
        pad: usize,
        oh: usize,
        ow: usize,
        cols: &mut [f64],
        (ld, off): (usize, usize),
    ) {
        let plane = oh * ow;
        for ci in 0..c {
            let chan = &img[ci * h * w..(ci + 1) * h * w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = &mut cols[((ci * k + ki) * k + kj) * ld + off..][..plane];
                    let (lo, hi) = valid_range(kj, stride, pad, w, ow);
                    for oy in 0..oh {
                        let iy = (oy * stride + ki) as isize - pad as isize;
                        let dst = &mut row[oy * ow..(oy + 1) * ow];
                        if iy < 0 || iy >= h as isize || lo >= hi {
                            dst.fill(0.0);
                            continue;
                        }
                        let src = &chan[iy as usize * w..(iy as usize + 1) * w];
                        dst[..lo].fill(0.0);
                        dst[hi..].fill(0.0);
                        let first = lo * stride + kj - pad;
                        if stride == 1 {
                            dst[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                        } else {
                            for (d, &v) in dst[lo..hi]
                                .iter_mut()
                                .zip(src[first..].iter().step_by(stride))
                            {
                                *d = v;
                            }
                        }
                    }
                }
            }
        }
    }

    /// Output columns `[lo, hi)` whose input column `ox·stride + kj − pad`
    /// falls inside `[0, w)`.
    fn valid_range(kj: usize, stride: usize, pad: usize, w: usize, ow: usize) -> (usize, usize) {
        let lo = if pad > kj {
            (pad - kj).div_ceil(stride)
        } else {
            0
        };
        let hi = if w + pad > kj {
            (w + pad - kj).div_ceil(stride).min(ow)
        } else {
            0
        };
        (lo.min(hi), hi)
    }

    #[allow(clippy::too_many_arguments)]
    fn col2im_add(
        cols: &[f64],
        c: usize,
        h: usize,
        w: usize,
        k: usize,
        stride: usize,
        pad: usize,
        oh: usize,
        ow: usize,
        (ld, off): (usize, usize),
        img: &mut [f64],
    ) {
        let plane = oh * ow;
        for ci in 0..c {
            let chan = &mut img[ci * h * w..(ci + 1) * h * w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = &cols[((ci * k + ki) * k + kj) * ld + off..][..plane];
                    let (lo, hi) = valid_range(kj, stride, pad, w, ow);
                    for oy in 0..oh {
                        let iy = (oy * stride + ki) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize || lo >= hi {
                            continue;
                        }
                        let dst = &mut chan[iy as usize * w..(iy as usize + 1) * w];
                        let first = lo * stride + kj - pad;
                        for (&g, d) in row[oy * ow + lo..oy * ow + hi]
                            .iter()
                            .zip(dst[first..].iter_mut().step_by(stride))
                        {
                            *d += g;
                        }
                    }
                }
            }
        }
    }

    /// `c[m×n] = alpha · a[m×k] · b[k×n] + beta · c`, with explicit strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f64],
        (rsa, csa): (usize, usize),
        b: &[f64],
        (rsb, csb): (usize, usize),
        beta: f64,
        c: &mut [f64],
    ) {
        if m == 0 || n == 0 {
            return;
        }
        debug_assert!(m == 0 || k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
        debug_assert!(k == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
        debug_assert!((m - 1) * n + n - 1 < c.len());
        // SAFETY: the debug assertions above state the bounds each caller
        // guarantees from the tensor shapes; `c` is row-major m×n.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                rsa as isize,
                csa as isize,
                b.as_ptr(),
                rsb as isize,
                csb as isize,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }

    /// Images per GEMM in the convolution kernels.
    const CONV_CHUNK: usize = 32;

    #[allow(clippy::too_many_arguments)]
    pub fn conv2d_forward(
        x: &[f64],
        xs: Shape,
        w: &[f64],
        ws: Shape,
        b: &[f64],
        stride: usize,
        pad: usize,
        out_shape: Shape,
    ) -> Vec<f64> {
        let [n, c, h, wd] = xs;
        let [o, _, k, _] = ws;
        let [_, _, oh, ow] = out_shape;
        let plane = oh * ow;
        let ckk = c * k * k;
        let img_len = c * h * wd;
        let mut out = vec![0.0; n * o * plane];
        let chunk = CONV_CHUNK.min(n.max(1));
        let mut cols = vec![0.0; ckk * chunk * plane];
        let mut tmp = vec![0.0; o * chunk * plane];
        for start in (0..n).step_by(chunk) {
            let m = chunk.min(n - start);
            let ld = m * plane;
            for j in 0..m {
                let img = &x[(start + j) * img_len..][..img_len];
                im2col(
                    img,
                    c,
                    h,
                    wd,
                    k,
                    stride,
                    pad,
                    oh,
                    ow,
                    &mut cols,
                    (ld, j * plane),
                );
            }
            // (o, m·plane) = W · cols
            gemm(o, ckk, ld, w, (ckk, 1), &cols, (ld, 1), 0.0, &mut tmp);
            for j in 0..m {
                let dst = &mut out[(start + j) * o * plane..][..o * plane];
                for (oc, &bias) in b.iter().enumerate() {
                    let src = &tmp[oc * ld + j * plane..][..plane];
                    for (d, &v) in dst[oc * plane..(oc + 1) * plane].iter_mut().zip(src) {
                        *d = v + bias;
                    }
                }
            }
        }
        out
    }

    /// Returns `(dx, dw, db)`; `dx` is empty when `need_dx` is false.
    #[allow(clippy::too_many_arguments)]
    pub fn conv2d_backward(
        dout: &[f64],
        x: &[f64],
        xs: Shape,
        w: &[f64],
        ws: Shape,
        stride: usize,
        pad: usize,
        out_shape: Shape,
        need_dx: bool,
    ) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let [n, c, h, wd] = xs;
        let [o, _, k, _] = ws;
        let [_, _, oh, ow] = out_shape;
        let plane = oh * ow;
        let ckk = c * k * k;
        let img_len = c * h * wd;
        let mut dx = if need_dx {
            vec![0.0; x.len()]
        } else {
            Vec::new()
        };
        let mut dw = vec![0.0; w.len()];
        let mut db = vec![0.0; o];
        let chunk = CONV_CHUNK.min(n.max(1));
        let mut cols = vec![0.0; ckk * chunk * plane];
        let mut dcols = if need_dx {
            vec![0.0; ckk * chunk * plane]
        } else {
            Vec::new()
        };
        let mut g = vec![0.0; o * chunk * plane];
        for start in (0..n).step_by(chunk) {
            let m = chunk.min(n - start);
            let ld = m * plane;
            for j in 0..m {
                let img = &x[(start + j) * img_len..][..img_len];
                im2col(
                    img,
                    c,
                    h,
                    wd,
                    k,
                    stride,
                    pad,
                    oh,
                    ow,
                    &mut cols,
                    (ld, j * plane),
                );
                let src = &dout[(start + j) * o * plane..][..o * plane];
                for oc in 0..o {
                    let row = &src[oc * plane..(oc + 1) * plane];
                    g[oc * ld + j * plane..][..plane].copy_from_slice(row);
                    db[oc] += row.iter().sum::<f64>();
                }
            }
            // dW += G · colsᵀ
            gemm(o, ld, ckk, &g, (ld, 1), &cols, (1, ld), 1.0, &mut dw);
            if need_dx {
                // dcols = Wᵀ · G
                gemm(ckk, o, ld, w, (1, ckk), &g, (ld, 1), 0.0, &mut dcols);
                for j in 0..m {
                    let img = &mut dx[(start + j) * img_len..][..img_len];
                    col2im_add(
                        &dcols,
                        c,
                        h,
                        wd,
                        k,
                        stride,
                        pad,
                        oh,
                        ow,
                        (ld, j * plane),
                        img,
                    );
                }
            }
        }
        (dx, dw, db)
    }

    pub fn maxpool2_shape(x: Shape) -> Result<Shape> {
        let [n, c, h, w] = x;
        if h % 2 != 0 || w % 2 != 0 || h == 0 || w == 0 {
            return Err(TensorError::InvalidShape {
                op: "maxpool2",
                detail: format!("spatial dims must be even and positive, got {h}x{w}"),
            });
        }
        Ok([n, c, h / 2, w / 2])
    }

    /// Output values and, per output, the flat input index of the winner.
    /// Ties go to the first position in row-major window order.
    pub fn maxpool2_forward(x: &[f64], xs: Shape) -> (Vec<f64>, Vec<usize>) {
        let [n, c, h, w] = xs;
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut arg = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let top = base + 2 * oy * w + 2 * ox;
                    let mut best = top;
                    for cand in [top + 1, top + w, top + w + 1] {
                        if x[cand] > x[best] {
                            best = cand;
                        }
                    }
                    out.push(x[best]);
                    arg.push(best);
                }
            }
        }
        (out, arg)
    }

    pub fn gap_shape(x: Shape) -> Result<Shape> {
        let [n, c, h, w] = x;
        if h == 0 || w == 0 {
            return Err(TensorError::InvalidShape {
                op: "global_avg_pool",
                detail: "empty spatial dims".into(),
            });
        }
        Ok([n, c, 1, 1])
    }

    /// Per-plane mean. Values are summed in ascending order so the result
    /// depends only on the multiset of values, not on their positions; any
    /// spatial permutation (quarter turns included) leaves it bitwise equal.
    pub fn gap_forward(x: &[f64], xs: Shape) -> Vec<f64> {
        let [n, c, h, w] = xs;
        let area = h * w;
        let mut scratch = vec![0.0; area];
        (0..n * c)
            .map(|plane| {
                scratch.copy_from_slice(&x[plane * area..(plane + 1) * area]);
                scratch.sort_unstable_by(f64::total_cmp);
                scratch.iter().sum::<f64>() / area as f64
            })
            .collect()
    }

    pub fn linear_shape(x: Shape, w: Shape) -> Result<Shape> {
        let [n, c, h, wd] = x;
        let [out_f, in_f, _, _] = w;
        if c * h * wd != in_f {
            return Err(TensorError::ShapeMismatch {
                op: "linear features",
                lhs: x,
                rhs: w,
            });
        }
        Ok([n, out_f, 1, 1])
    }

    pub fn linear_forward(x: &[f64], xs: Shape, w: &[f64], ws: Shape, b: &[f64]) -> Vec<f64> {
        let n = xs[0];
        let [out_f, in_f, _, _] = ws;
        let mut y = vec![0.0; n * out_f];
        gemm(n, in_f, out_f, x, (in_f, 1), w, (1, in_f), 0.0, &mut y);
        for row in y.chunks_exact_mut(out_f.max(1)) {
            for (v, &bias) in row.iter_mut().zip(b) {
                *v += bias;
            }
        }
        y
    }

    /// Returns `(dx, dw, db)`; `dx` is empty when `need_dx` is false.
    pub fn linear_backward(
        dy: &[f64],
        x: &[f64],
        xs: Shape,
        w: &[f64],
        ws: Shape,
        need_dx: bool,
    ) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let n = xs[0];
        let [out_f, in_f, _, _] = ws;
        let mut dw = vec![0.0; w.len()];
        gemm(out_f, n, in_f, dy, (1, out_f), x, (in_f, 1), 0.0, &mut dw);
        let mut db = vec![0.0; out_f];
        for row in dy.chunks_exact(out_f.max(1)) {
            for (acc, &g) in db.iter_mut().zip(row) {
                *acc += g;
            }
        }
        let dx = if need_dx {
            let mut dx = vec![0.0; x.len()];
            gemm(n, out_f, in_f, dy, (out_f, 1), w, (in_f, 1), 0.0, &mut dx);
            dx
        } else {
            Vec::new()
        };
        (dx, dw, db)
    }

    pub fn check_logits(shape: Shape, labels: &[usize]) -> Result<()> {
        let [n, classes, h, w] = shape;
        if h != 1 || w != 1 || classes == 0 {
            return Err(TensorError::InvalidShape {
                op: "softmax_cross_entropy",
                detail: format!("logits must be (n, classes, 1, 1), got {shape:?}"),
            });
        }
        if labels.len() != n || n == 0 {
            return Err(TensorError::InvalidShape {
                op: "softmax_cross_entropy",
                detail: format!("{} labels for a batch of {n}", labels.len()),
            });
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(TensorError::LabelOutOfRange { label, classes });
        }
        Ok(())
    }

    pub fn softmax_row(row: &mut [f64]) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }

    /// Mean loss and the softmax probabilities (kept for backward).
    pub fn softmax_xent_forward(logits: &[f64], shape: Shape, labels: &[usize]) -> (f64, Vec<f64>) {
        let [n, classes, _, _] = shape;
        let mut probs = logits.to_vec();
        let mut total = 0.0;
        for (i, &label) in labels.iter().enumerate() {
            let row = &logits[i * classes..(i + 1) * classes];
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
            total += lse - row[label];
            softmax_row(&mut probs[i * classes..(i + 1) * classes]);
        }
        (total / n as f64, probs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ones(shape: Shape) -> Tensor4 {
        let n = shape.iter().product();
        Tensor4::from_vec(shape, vec![1.0; n]).unwrap()
    }

    #[test]
    fn one_by_one_conv_scales() {
        let x = ones([1, 1, 3, 3]);
        let p = ConvParams::new(
            Tensor4::from_vec([1, 1, 1, 1], vec![2.0]).unwrap(),
            Tensor4::vector(vec![0.0]),
            1,
            0,
        )
        .unwrap();
        let y = conv2d(&x, &p).unwrap();
        assert_eq!(y.shape(), [1, 1, 3, 3]);
        assert!(y.data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn identity_kernel_preserves_input() {
        let x = Tensor4::from_vec([1, 1, 3, 3], (1..=9).map(f64::from).collect()).unwrap();
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let p = ConvParams::new(
            Tensor4::from_vec([1, 1, 3, 3], k).unwrap(),
            Tensor4::vector(vec![0.0]),
            1,
            1,
        )
        .unwrap();
        assert_eq!(conv2d(&x, &p).unwrap().data(), x.data());
    }

    #[test]
    fn conv_rejects_even_kernel_and_channel_mismatch() {
        let even = ConvParams::new(
            Tensor4::zeros([1, 1, 2, 2]).unwrap(),
            Tensor4::vector(vec![0.0]),
            1,
            0,
        );
        assert!(even.is_err());

        let p = ConvParams::new(
            Tensor4::zeros([1, 2, 3, 3]).unwrap(),
            Tensor4::vector(vec![0.0]),
            1,
            1,
        )
        .unwrap();
        let x = ones([1, 3, 4, 4]);
        assert!(matches!(
            conv2d(&x, &p),
            Err(TensorError::ShapeMismatch { .. })
        ));

        let tiny = ones([1, 2, 1, 1]);
        let p0 = ConvParams::new(
            Tensor4::zeros([1, 2, 3, 3]).unwrap(),
            Tensor4::vector(vec![0.0]),
            1,
            0,
        )
        .unwrap();
        assert!(matches!(
            conv2d(&tiny, &p0),
            Err(TensorError::InvalidShape { .. })
        ));
    }

    #[test]
    fn output_side_formula() {
        assert_eq!(conv_output_side(28, 3, 1, 1), Some(28));
        assert_eq!(conv_output_side(28, 3, 2, 1), Some(14));
        assert_eq!(conv_output_side(5, 3, 2, 0), Some(2));
        assert_eq!(conv_output_side(1, 3, 1, 0), None);
    }

    #[test]
    fn gap_examples() {
        let x = Tensor4::from_vec([1, 1, 2, 2], vec![1.0, 3.0, 5.0, 7.0]).unwrap();
        assert_eq!(global_avg_pool(&x).unwrap().data(), &[4.0]);
        let c = Tensor4::from_vec([1, 1, 3, 3], vec![0.7; 9]).unwrap();
        assert!((global_avg_pool(&c).unwrap().data()[0] - 0.7).abs() < 1e-15);
        assert!(global_avg_pool(&Tensor4::zeros([1, 1, 0, 0]).unwrap()).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        let logits = Tensor4::matrix(1, 2, vec![0.0, 0.0]).unwrap();
        let l = softmax_cross_entropy(&logits, &[0]).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);

        let big = Tensor4::matrix(1, 2, vec![1000.0, 0.0]).unwrap();
        let l = softmax_cross_entropy(&big, &[0]).unwrap();
        assert!(l.is_finite() && l.abs() < 1e-12);

        let err = softmax_cross_entropy(&logits, &[2]).unwrap_err();
        assert_eq!(
            err,
            TensorError::LabelOutOfRange {
                label: 2,
                classes: 2
            }
        );
    }

    #[test]
    fn relu_and_pool_examples() {
        let x = Tensor4::vector(vec![-1.0, 0.0, 2.0]);
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);

        let p = Tensor4::from_vec([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(maxpool2(&p).unwrap().data(), &[4.0]);
        assert!(maxpool2(&ones([1, 1, 3, 2])).is_err());
    }

    #[test]
    fn pool_ties_pick_first_in_window() {
        let x = vec![5.0, 5.0, 5.0, 5.0];
        let (_, arg) = kernels::maxpool2_forward(&x, [1, 1, 2, 2]);
        assert_eq!(arg, vec![0]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let logits = Tensor4::matrix(2, 3, vec![1.0, 2.0, 3.0, -5.0, 0.0, 5.0]).unwrap();
        let p = softmax(&logits);
        for row in p.data().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
