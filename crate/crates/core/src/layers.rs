//! Differentiable layers recorded on a [`Graph`].
//!
//! Convolutions are cross-correlations (no kernel flip) over NCHW tensors,
//! lowered to GEMM through im2col. Conv weights are `[out, in, k, k]`;
//! transposed-conv weights are `[in, out, k, k]`, so a conv and a transposed
//! conv sharing one weight tensor are adjoint linear maps.

use serde::{Deserialize, Serialize};

use crate::autograd::{Backward, Graph, Var};
use crate::error::{GcnError, Result};
use crate::tensor::{gemm, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_size: usize,
    pub stride: usize,
    #[serde(default)]
    pub pad: usize,
}

/// Fractionally-strided (transposed) convolution. The output extent is
/// always derived through [`deconv_output_size`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeconvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_size: usize,
    pub stride: usize,
    #[serde(default)]
    pub pad: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolSpec {
    pub kernel_size: usize,
    pub stride: usize,
}

/// `(size_in - 1) * stride + kernel_size - 2 * pad`.
pub fn deconv_output_size(
    size_in: usize,
    stride: usize,
    kernel_size: usize,
    pad: usize,
) -> Result<usize> {
    if size_in == 0 || stride == 0 || kernel_size == 0 {
        return Err(GcnError::Geometry(format!(
            "size_in, stride and kernel_size must be positive (got {size_in}, {stride}, {kernel_size})"
        )));
    }
    let grown = (size_in - 1) * stride + kernel_size;
    match grown.checked_sub(2 * pad) {
        Some(out) if out >= 1 => Ok(out),
        _ => Err(GcnError::Geometry(format!(
            "transposed conv output is non-positive: ({size_in} - 1) * {stride} + {kernel_size} - 2 * {pad}"
        ))),
    }
}

/// Strided conv output extent. `size_in + 2 * pad - kernel_size` must be a
/// non-negative multiple of `stride`; nothing is truncated.
pub fn conv_output_size(
    size_in: usize,
    kernel_size: usize,
    stride: usize,
    pad: usize,
) -> Result<usize> {
    if size_in == 0 || stride == 0 || kernel_size == 0 {
        return Err(GcnError::Geometry(format!(
            "size_in, stride and kernel_size must be positive (got {size_in}, {kernel_size}, {stride})"
        )));
    }
    let span = (size_in + 2 * pad)
        .checked_sub(kernel_size)
        .ok_or_else(|| {
            GcnError::Geometry(format!(
                "kernel {kernel_size} larger than padded input {}",
                size_in + 2 * pad
            ))
        })?;
    if span % stride != 0 {
        return Err(GcnError::Geometry(format!(
            "({size_in} + 2*{pad} - {kernel_size}) = {span} is not divisible by stride {stride}"
        )));
    }
    Ok(span / stride + 1)
}

/// Chain [`deconv_output_size`] over a stack of `(stride, kernel, pad)` layers.
pub fn deconv_chain(size_in: usize, layers: &[(usize, usize, usize)]) -> Result<Vec<usize>> {
    let mut sizes = vec![size_in];
    let mut cur = size_in;
    for &(stride, kernel, pad) in layers {
        cur = deconv_output_size(cur, stride, kernel, pad)?;
        sizes.push(cur);
    }
    Ok(sizes)
}

#[derive(Clone, Copy, Debug)]
struct PatchGeom {
    channels: usize,
    h: usize,
    w: usize,
    k: usize,
    s: usize,
    p: usize,
    oh: usize,
    ow: usize,
}

impl PatchGeom {
    fn rows(&self) -> usize {
        self.channels * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }
}

/// Unfold one `[C, H, W]` image into `[C*k*k, oh*ow]` patch columns.
fn im2col<T: Scalar>(x: &[T], g: PatchGeom, cols: &mut [T]) {
    let ohw = g.cols();
    for c in 0..g.channels {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = ((c * g.k + ky) * g.k + kx) * ohw;
                for oy in 0..g.oh {
                    let dst = &mut cols[row + oy * g.ow..row + (oy + 1) * g.ow];
                    let iy = (oy * g.s + ky) as isize - g.p as isize;
                    if iy < 0 || iy >= g.h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = c * g.h * g.w + iy as usize * g.w;
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.s + kx) as isize - g.p as isize;
                        *d = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            x[src + ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add patch columns back into an image.
fn col2im<T: Scalar>(cols: &[T], g: PatchGeom, x: &mut [T]) {
    let ohw = g.cols();
    for c in 0..g.channels {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = ((c * g.k + ky) * g.k + kx) * ohw;
                for oy in 0..g.oh {
                    let iy = (oy * g.s + ky) as isize - g.p as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &cols[row + oy * g.ow..row + (oy + 1) * g.ow];
                    let base = c * g.h * g.w + iy as usize * g.w;
                    for (ox, &v) in src.iter().enumerate() {
                        let ix = (ox * g.s + kx) as isize - g.p as isize;
                        if ix >= 0 && ix < g.w as isize {
                            x[base + ix as usize] = x[base + ix as usize] + v;
                        }
                    }
                }
            }
        }
    }
}

fn expect_rank4(t: &Tensor<impl Scalar>, what: &str) -> Result<(usize, usize, usize, usize)> {
    match *t.shape() {
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(GcnError::shape(format!(
            "{what} expects [batch, C, H, W], got {:?}",
            t.shape()
        ))),
    }
}

fn expect_shape(t: &Tensor<impl Scalar>, shape: &[usize], what: &str) -> Result<()> {
    if t.shape() != shape {
        return Err(GcnError::shape(format!(
            "{what}: expected shape {shape:?}, got {:?}",
            t.shape()
        )));
    }
    Ok(())
}

fn add_channel_bias<T: Scalar>(out: &mut [T], bias: &[T], plane: usize) {
    for (chunk, &b) in out.chunks_mut(plane).zip(bias.iter().cycle()) {
        for v in chunk {
            *v = *v + b;
        }
    }
}

fn channel_sums<T: Scalar>(grad: &[T], channels: usize, plane: usize) -> Vec<T> {
    let mut db = vec![T::zero(); channels];
    for (i, chunk) in grad.chunks(plane).enumerate() {
        let c = i % channels;
        db[c] = chunk.iter().fold(db[c], |a, &v| a + v);
    }
    db
}

impl<T: Scalar> Graph<T> {
    /// `x W + b` per row: `x [batch, in]`, `W [in, out]`, `b [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (vx, vw, vb) = (self.value(x), self.value(w), self.value(b));
        let (batch, fan_in, fan_out) = match (vx.shape(), vw.shape()) {
            ([n, i], [i2, o]) if i == i2 => (*n, *i, *o),
            _ => {
                return Err(GcnError::shape(format!(
                    "linear: x {:?} incompatible with W {:?}",
                    vx.shape(),
                    vw.shape()
                )))
            }
        };
        expect_shape(vb, &[fan_out], "linear bias")?;
        let mut out = vec![T::zero(); batch * fan_out];
        gemm(false, false, batch, fan_in, fan_out, vx.data(), vw.data(), T::zero(), &mut out);
        for row in out.chunks_mut(fan_out) {
            for (v, &bb) in row.iter_mut().zip(vb.data()) {
                *v = *v + bb;
            }
        }
        let out = Tensor::from_parts(vec![batch, fan_out], out);
        Ok(self.push_op(out, vec![x, w, b], LinearRule))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, spec: &ConvSpec) -> Result<Var> {
        let (vx, vw, vb) = (self.value(x), self.value(w), self.value(b));
        let (n, c, h, wd) = expect_rank4(vx, "conv2d")?;
        if c != spec.in_channels {
            return Err(GcnError::shape(format!(
                "conv2d: input has {c} channels, spec wants {}",
                spec.in_channels
            )));
        }
        let k = spec.kernel_size;
        expect_shape(vw, &[spec.out_channels, c, k, k], "conv2d weights")?;
        expect_shape(vb, &[spec.out_channels], "conv2d bias")?;
        let oh = conv_output_size(h, k, spec.stride, spec.pad)?;
        let ow = conv_output_size(wd, k, spec.stride, spec.pad)?;
        let geom = PatchGeom {
            channels: c,
            h,
            w: wd,
            k,
            s: spec.stride,
            p: spec.pad,
            oh,
            ow,
        };
        let co = spec.out_channels;
        let (rows, ohw) = (geom.rows(), geom.cols());
        let mut cols = vec![T::zero(); rows * ohw];
        let mut out = vec![T::zero(); n * co * ohw];
        let in_plane = c * h * wd;
        for i in 0..n {
            im2col(&vx.data()[i * in_plane..(i + 1) * in_plane], geom, &mut cols);
            let dst = &mut out[i * co * ohw..(i + 1) * co * ohw];
            gemm(false, false, co, rows, ohw, vw.data(), &cols, T::zero(), dst);
        }
        add_channel_bias(&mut out, vb.data(), ohw);
        let out = Tensor::from_parts(vec![n, co, oh, ow], out);
        Ok(self.push_op(out, vec![x, w, b], ConvRule { geom, co }))
    }

    /// Transposed convolution; spatial output extents follow
    /// [`deconv_output_size`].
    pub fn deconv2d(&mut self, x: Var, w: Var, b: Var, spec: &DeconvSpec) -> Result<Var> {
        let (vx, vw, vb) = (self.value(x), self.value(w), self.value(b));
        let (n, ci, ih, iw) = expect_rank4(vx, "deconv2d")?;
        if ci != spec.in_channels {
            return Err(GcnError::shape(format!(
                "deconv2d: input has {ci} channels, spec wants {}",
                spec.in_channels
            )));
        }
        let k = spec.kernel_size;
        let co = spec.out_channels;
        expect_shape(vw, &[ci, co, k, k], "deconv2d weights")?;
        expect_shape(vb, &[co], "deconv2d bias")?;
        let oh = deconv_output_size(ih, spec.stride, k, spec.pad)?;
        let ow = deconv_output_size(iw, spec.stride, k, spec.pad)?;
        // Geometry of the adjoint conv, which maps [co, oh, ow] back to [.., ih, iw].
        let geom = PatchGeom {
            channels: co,
            h: oh,
            w: ow,
            k,
            s: spec.stride,
            p: spec.pad,
            oh: ih,
            ow: iw,
        };
        let (rows, ihw) = (geom.rows(), geom.cols());
        let mut cols = vec![T::zero(); rows * ihw];
        let out_plane = co * oh * ow;
        let mut out = vec![T::zero(); n * out_plane];
        for i in 0..n {
            let xi = &vx.data()[i * ci * ihw..(i + 1) * ci * ihw];
            gemm(true, false, rows, ci, ihw, vw.data(), xi, T::zero(), &mut cols);
            col2im(&cols, geom, &mut out[i * out_plane..(i + 1) * out_plane]);
        }
        add_channel_bias(&mut out, vb.data(), oh * ow);
        let out = Tensor::from_parts(vec![n, co, oh, ow], out);
        Ok(self.push_op(out, vec![x, w, b], DeconvRule { geom, ci }))
    }

    /// Max pooling; ties resolve to the first maximal element in scan order.
    pub fn max_pool2d(&mut self, x: Var, spec: &PoolSpec) -> Result<Var> {
        let vx = self.value(x);
        let (n, c, h, w) = expect_rank4(vx, "max_pool2d")?;
        let (k, s) = (spec.kernel_size, spec.stride);
        let oh = conv_output_size(h, k, s, 0)?;
        let ow = conv_output_size(w, k, s, 0)?;
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        let data = vx.data();
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + oy * s * w + ox * s;
                    for ky in 0..k {
                        for kx in 0..k {
                            let idx = base + (oy * s + ky) * w + ox * s + kx;
                            if data[idx] > data[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(data[best]);
                    argmax.push(best);
                }
            }
        }
        let out = Tensor::from_parts(vec![n, c, oh, ow], out);
        Ok(self.push_op(out, vec![x], MaxPoolRule { argmax }))
    }

    /// `x` where `x > 0`, `slope * x` otherwise (the kink at 0 takes `slope`).
    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let slope = T::lit(slope);
        let out = self
            .value(x)
            .map(|v| if v > T::zero() { v } else { v * slope });
        self.push_op(out, vec![x], LeakyReluRule { slope })
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| GcnError::shape("concat of zero tensors"))?;
        let base = self.value(*first).shape().to_vec();
        if axis >= base.len() {
            return Err(GcnError::shape(format!(
                "concat axis {axis} out of range for rank {}",
                base.len()
            )));
        }
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let s = self.value(*p).shape();
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(GcnError::shape(format!(
                    "concat along axis {axis}: {s:?} does not match {base:?}"
                )));
            }
            widths.push(s[axis]);
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &wd) in parts.iter().zip(&widths) {
                let src = self.value(*p).data();
                data.extend_from_slice(&src[o * wd * inner..(o + 1) * wd * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let out = Tensor::from_parts(shape, data);
        Ok(self.push_op(
            out,
            parts.to_vec(),
            ConcatRule {
                outer,
                inner,
                widths,
            },
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        Ok(self.push_op(out, vec![x], ReshapeRule))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let z = self.value(logits);
        let (batch, classes) = match *z.shape() {
            [b, k] => (b, k),
            _ => {
                return Err(GcnError::shape(format!(
                    "softmax_cross_entropy expects [batch, K], got {:?}",
                    z.shape()
                )))
            }
        };
        if classes < 2 {
            return Err(GcnError::shape("softmax_cross_entropy needs K >= 2"));
        }
        if labels.len() != batch {
            return Err(GcnError::Label(format!(
                "{} labels for a batch of {batch}",
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(GcnError::Label(format!("label {bad} out of range 0..{classes}")));
        }
        let probs = softmax_rows(z)?;
        let mut total = T::zero();
        for (row, &label) in z.data().chunks(classes).zip(labels) {
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let lse = row.iter().fold(T::zero(), |a, &v| a + (v - max).exp()).ln();
            total = total + lse - (row[label] - max);
        }
        let out = Tensor::scalar(total / T::lit(batch as f64));
        Ok(self.push_op(
            out,
            vec![logits],
            SoftmaxCeRule {
                probs,
                labels: labels.to_vec(),
            },
        ))
    }

    /// Per-sample squared L2 distance summed over all non-batch axes, then
    /// averaged over the batch (leading axis).
    pub fn mse_pixel_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        va.expect_same_shape(vb, "mse_pixel_loss")?;
        let batch = va.shape()[0];
        let loss = va.squared_distance(vb)? / T::lit(batch as f64);
        Ok(self.push_op(Tensor::scalar(loss), vec![a, b], MseRule { batch }))
    }
}

/// Row-wise softmax of a `[batch, K]` tensor, max-subtracted.
pub fn softmax_rows<T: Scalar>(z: &Tensor<T>) -> Result<Tensor<T>> {
    let classes = match *z.shape() {
        [_, k] => k,
        _ => {
            return Err(GcnError::shape(format!(
                "softmax expects [batch, K], got {:?}",
                z.shape()
            )))
        }
    };
    let mut out = Vec::with_capacity(z.len());
    for row in z.data().chunks(classes) {
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let exps: Vec<T> = row.iter().map(|&v| (v - max).exp()).collect();
        let sum = exps.iter().fold(T::zero(), |a, &v| a + v);
        out.extend(exps.into_iter().map(|e| e / sum));
    }
    Ok(Tensor::from_parts(z.shape().to_vec(), out))
}

/// Index of the largest entry in each row of a `[batch, K]` tensor.
pub fn argmax_rows<T: Scalar>(z: &Tensor<T>) -> Vec<usize> {
    let classes = *z.shape().last().unwrap_or(&1);
    z.data()
        .chunks(classes)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, T::neg_infinity()), |(bi, bv), (i, &v)| {
                    if v > bv {
                        (i, v)
                    } else {
                        (bi, bv)
                    }
                })
                .0
        })
        .collect()
}

struct LinearRule;

impl<T: Scalar> Backward<T> for LinearRule {
    fn name(&self) -> &'static str {
        "fully_connected"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let (x, w) = (inputs[0], inputs[1]);
        let (batch, fan_in, fan_out) = (x.shape()[0], x.shape()[1], w.shape()[1]);
        let dx = needs[0].then(|| {
            let mut d = vec![T::zero(); batch * fan_in];
            gemm(false, true, batch, fan_out, fan_in, grad.data(), w.data(), T::zero(), &mut d);
            Tensor::from_parts(vec![batch, fan_in], d)
        });
        let dw = needs[1].then(|| {
            let mut d = vec![T::zero(); fan_in * fan_out];
            gemm(true, false, fan_in, batch, fan_out, x.data(), grad.data(), T::zero(), &mut d);
            Tensor::from_parts(vec![fan_in, fan_out], d)
        });
        let db = needs[2].then(|| {
            let mut d = vec![T::zero(); fan_out];
            for row in grad.data().chunks(fan_out) {
                for (a, &g) in d.iter_mut().zip(row) {
                    *a = *a + g;
                }
            }
            Tensor::from_parts(vec![fan_out], d)
        });
        Ok(vec![dx, dw, db])
    }
}

struct ConvRule {
    geom: PatchGeom,
    co: usize,
}

impl<T: Scalar> Backward<T> for ConvRule {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let (x, w) = (inputs[0], inputs[1]);
        let g = self.geom;
        let co = self.co;
        let n = x.shape()[0];
        let (rows, ohw) = (g.rows(), g.cols());
        let in_plane = g.channels * g.h * g.w;
        let mut cols = vec![T::zero(); rows * ohw];
        let mut dx = needs[0].then(|| vec![T::zero(); x.len()]);
        let mut dw = needs[1].then(|| vec![T::zero(); w.len()]);
        for i in 0..n {
            let gi = &grad.data()[i * co * ohw..(i + 1) * co * ohw];
            if let Some(dw) = dw.as_mut() {
                im2col(&x.data()[i * in_plane..(i + 1) * in_plane], g, &mut cols);
                gemm(false, true, co, ohw, rows, gi, &cols, T::one(), dw);
            }
            if let Some(dx) = dx.as_mut() {
                gemm(true, false, rows, co, ohw, w.data(), gi, T::zero(), &mut cols);
                col2im(&cols, g, &mut dx[i * in_plane..(i + 1) * in_plane]);
            }
        }
        let db = needs[2].then(|| Tensor::from_parts(vec![co], channel_sums(grad.data(), co, ohw)));
        Ok(vec![
            dx.map(|d| Tensor::from_parts(x.shape().to_vec(), d)),
            dw.map(|d| Tensor::from_parts(w.shape().to_vec(), d)),
            db,
        ])
    }
}

struct DeconvRule {
    geom: PatchGeom,
    ci: usize,
}

impl<T: Scalar> Backward<T> for DeconvRule {
    fn name(&self) -> &'static str {
        "deconv2d"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let (x, w) = (inputs[0], inputs[1]);
        let g = self.geom;
        let ci = self.ci;
        let n = x.shape()[0];
        let (rows, ihw) = (g.rows(), g.cols());
        let out_plane = g.channels * g.h * g.w;
        let mut dcols = vec![T::zero(); rows * ihw];
        let mut dx = needs[0].then(|| vec![T::zero(); x.len()]);
        let mut dw = needs[1].then(|| vec![T::zero(); w.len()]);
        if dx.is_some() || dw.is_some() {
            for i in 0..n {
                im2col(&grad.data()[i * out_plane..(i + 1) * out_plane], g, &mut dcols);
                if let Some(dx) = dx.as_mut() {
                    let dst = &mut dx[i * ci * ihw..(i + 1) * ci * ihw];
                    gemm(false, false, ci, rows, ihw, w.data(), &dcols, T::zero(), dst);
                }
                if let Some(dw) = dw.as_mut() {
                    let xi = &x.data()[i * ci * ihw..(i + 1) * ci * ihw];
                    gemm(false, true, ci, ihw, rows, xi, &dcols, T::one(), dw);
                }
            }
        }
        let db = needs[2].then(|| {
            Tensor::from_parts(
                vec![g.channels],
                channel_sums(grad.data(), g.channels, g.h * g.w),
            )
        });
        Ok(vec![
            dx.map(|d| Tensor::from_parts(x.shape().to_vec(), d)),
            dw.map(|d| Tensor::from_parts(w.shape().to_vec(), d)),
            db,
        ])
    }
}

struct MaxPoolRule {
    argmax: Vec<usize>,
}

impl<T: Scalar> Backward<T> for MaxPoolRule {
    fn name(&self) -> &'static str {
        "max_pool2d"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let mut dx = inputs[0].zeros_like();
        let d = dx.data_mut();
        for (&src, &g) in self.argmax.iter().zip(grad.data()) {
            d[src] = d[src] + g;
        }
        Ok(vec![Some(dx)])
    }
}

struct LeakyReluRule<T> {
    slope: T,
}

impl<T: Scalar> Backward<T> for LeakyReluRule<T> {
    fn name(&self) -> &'static str {
        "leaky_relu"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let data = inputs[0]
            .data()
            .iter()
            .zip(grad.data())
            .map(|(&x, &g)| if x > T::zero() { g } else { g * self.slope })
            .collect();
        Ok(vec![Some(Tensor::from_parts(grad.shape().to_vec(), data))])
    }
}

struct ConcatRule {
    outer: usize,
    inner: usize,
    widths: Vec<usize>,
}

impl<T: Scalar> Backward<T> for ConcatRule {
    fn name(&self) -> &'static str {
        "concat"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let total: usize = self.widths.iter().sum();
        let mut parts: Vec<Vec<T>> = inputs.iter().map(|t| Vec::with_capacity(t.len())).collect();
        for o in 0..self.outer {
            let mut offset = o * total * self.inner;
            for (part, &wd) in parts.iter_mut().zip(&self.widths) {
                let len = wd * self.inner;
                part.extend_from_slice(&grad.data()[offset..offset + len]);
                offset += len;
            }
        }
        Ok(parts
            .into_iter()
            .zip(inputs)
            .map(|(d, t)| Some(Tensor::from_parts(t.shape().to_vec(), d)))
            .collect())
    }
}

struct ReshapeRule;

impl<T: Scalar> Backward<T> for ReshapeRule {
    fn name(&self) -> &'static str {
        "reshape"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        Ok(vec![Some(grad.reshape(inputs[0].shape())?)])
    }
}

struct SoftmaxCeRule<T: Scalar> {
    probs: Tensor<T>,
    labels: Vec<usize>,
}

impl<T: Scalar> Backward<T> for SoftmaxCeRule<T> {
    fn name(&self) -> &'static str {
        "softmax_cross_entropy"
    }

    fn backward(
        &self,
        _inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let classes = self.probs.shape()[1];
        let scale = grad.item() / T::lit(self.labels.len() as f64);
        let mut d = self.probs.clone();
        for (row, &label) in d.data_mut().chunks_mut(classes).zip(&self.labels) {
            row[label] = row[label] - T::one();
            for v in row.iter_mut() {
                *v = *v * scale;
            }
        }
        Ok(vec![Some(d)])
    }
}

struct MseRule {
    batch: usize,
}

impl<T: Scalar> Backward<T> for MseRule {
    fn name(&self) -> &'static str {
        "mse_pixel_loss"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let c = T::lit(2.0) * grad.item() / T::lit(self.batch as f64);
        let (a, b) = (inputs[0], inputs[1]);
        let diff: Vec<T> = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| (x - y) * c)
            .collect();
        let da = Tensor::from_parts(a.shape().to_vec(), diff);
        let db = needs[1].then(|| da.map(|v| -v));
        Ok(vec![needs[0].then_some(da), db])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Init, RngState};

    fn gauss(shape: &[usize], rng: &mut RngState) -> Tensor<f64> {
        Tensor::create(shape, Init::Gaussian { mean: 0.0, std: 1.0 }, rng).unwrap()
    }

    #[test]
    fn deconv_size_formula() {
        assert_eq!(deconv_output_size(8, 2, 4, 0).unwrap(), 18);
        assert_eq!(
            deconv_chain(8, &[(2, 4, 0); 4]).unwrap(),
            vec![8, 18, 38, 78, 158]
        );
        assert_eq!(deconv_chain(7, &[(2, 4, 1); 2]).unwrap(), vec![7, 14, 28]);
        for s in 1..5 {
            assert_eq!(deconv_output_size(1, s, 3, 0).unwrap(), 3);
        }
        assert!(matches!(
            deconv_output_size(1, 2, 2, 1),
            Err(GcnError::Geometry(_))
        ));
    }

    #[test]
    fn conv_size_requires_exact_divisibility() {
        assert_eq!(conv_output_size(28, 4, 2, 1).unwrap(), 14);
        assert!(conv_output_size(28, 3, 2, 0).is_err());
        assert!(conv_output_size(2, 5, 1, 0).is_err());
    }

    #[test]
    fn fully_connected_hand_cases() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_f64([1, 2], &[1., 0.]).unwrap());
        let w = g.constant(Tensor::eye(2).unwrap());
        let b = g.constant(Tensor::zeros([2]).unwrap());
        let y = g.linear(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 0.0]);

        let x = g.constant(Tensor::from_f64([1, 2], &[1., 1.]).unwrap());
        let w = g.constant(Tensor::from_f64([2, 1], &[1., 1.]).unwrap());
        let b = g.constant(Tensor::from_f64([1], &[0.5]).unwrap());
        let y = g.linear(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[2.5]);
        assert!(g.linear(x, x, b).is_err());
    }

    #[test]
    fn conv_identity_kernel_and_local_sums() {
        let mut rng = RngState::new(5);
        let x0 = gauss(&[2, 1, 4, 4], &mut rng);
        let mut g = Graph::new();
        let x = g.constant(x0.clone());
        let w = g.constant(Tensor::full([1, 1, 1, 1], 1.0).unwrap());
        let b = g.constant(Tensor::zeros([1]).unwrap());
        let spec = ConvSpec {
            in_channels: 1,
            out_channels: 1,
            kernel_size: 1,
            stride: 1,
            pad: 0,
        };
        let y = g.conv2d(x, w, b, &spec).unwrap();
        assert_eq!(g.value(y), &x0);

        let x = g.constant(Tensor::from_f64([1, 1, 3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]).unwrap());
        let w = g.constant(Tensor::full([1, 1, 2, 2], 1.0).unwrap());
        let spec = ConvSpec {
            kernel_size: 2,
            ..spec
        };
        let y = g.conv2d(x, w, b, &spec).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1, 2, 2]);
        assert_eq!(g.value(y).data(), &[12., 16., 24., 28.]);
    }

    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, s: usize, p: usize) -> Tensor<f64> {
        let [n, c, h, wd] = x.shape().try_into().unwrap();
        let [co, _, k, _] = w.shape().try_into().unwrap();
        let oh = (h + 2 * p - k) / s + 1;
        let ow = (wd + 2 * p - k) / s + 1;
        let mut out = vec![0.0; n * co * oh * ow];
        for i in 0..n {
            for o in 0..co {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = b.data()[o];
                        for ci in 0..c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * s + ky) as isize - p as isize;
                                    let ix = (ox * s + kx) as isize - p as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    acc += x.data()[((i * c + ci) * h + iy as usize) * wd + ix as usize]
                                        * w.data()[((o * c + ci) * k + ky) * k + kx];
                                }
                            }
                        }
                        out[((i * co + o) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        Tensor::new([n, co, oh, ow], out).unwrap()
    }

    #[test]
    fn conv_matches_naive_loops() {
        let mut rng = RngState::new(17);
        for &(c, co, h, k, s, p) in &[(2, 3, 7, 3, 2, 1), (3, 2, 6, 2, 2, 0), (1, 4, 5, 3, 1, 1)] {
            let x0 = gauss(&[2, c, h, h], &mut rng);
            let w0 = gauss(&[co, c, k, k], &mut rng);
            let b0 = gauss(&[co], &mut rng);
            let mut g = Graph::new();
            let x = g.constant(x0.clone());
            let w = g.constant(w0.clone());
            let b = g.constant(b0.clone());
            let spec = ConvSpec {
                in_channels: c,
                out_channels: co,
                kernel_size: k,
                stride: s,
                pad: p,
            };
            let y = g.conv2d(x, w, b, &spec).unwrap();
            let want = naive_conv(&x0, &w0, &b0, s, p);
            assert_eq!(g.value(y).shape(), want.shape());
            for (a, b) in g.value(y).data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn deconv_single_pixel_broadcast() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_f64([1, 1, 1, 1], &[2.5]).unwrap());
        let w = g.constant(Tensor::full([1, 1, 2, 2], 1.0).unwrap());
        let b = g.constant(Tensor::zeros([1]).unwrap());
        let spec = DeconvSpec {
            in_channels: 1,
            out_channels: 1,
            kernel_size: 2,
            stride: 2,
            pad: 0,
        };
        let y = g.deconv2d(x, w, b, &spec).unwrap();
        assert_eq!(g.value(y).data(), &[2.5; 4]);
    }

    #[test]
    fn deconv_output_shape_7_to_14() {
        let mut rng = RngState::new(2);
        let mut g = Graph::<f64>::new();
        let x = g.constant(gauss(&[1, 2, 7, 7], &mut rng));
        let w = g.constant(gauss(&[2, 3, 4, 4], &mut rng));
        let b = g.constant(Tensor::zeros([3]).unwrap());
        let spec = DeconvSpec {
            in_channels: 2,
            out_channels: 3,
            kernel_size: 4,
            stride: 2,
            pad: 1,
        };
        let y = g.deconv2d(x, w, b, &spec).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 3, 14, 14]);
    }

    #[test]
    fn conv_and_deconv_are_adjoint() {
        let mut rng = RngState::new(23);
        for &(c, co, out, k, s, p) in &[(2, 3, 4, 4, 2, 1), (1, 2, 3, 3, 2, 0), (3, 1, 5, 3, 1, 1)] {
            let big = deconv_output_size(out, s, k, p).unwrap();
            let x0 = gauss(&[2, c, big, big], &mut rng);
            let y0 = gauss(&[2, co, out, out], &mut rng);
            let w0 = gauss(&[co, c, k, k], &mut rng);
            let mut g = Graph::new();
            let x = g.constant(x0.clone());
            let y = g.constant(y0.clone());
            let w = g.constant(w0);
            let zc = g.constant(Tensor::zeros([co]).unwrap());
            let zd = g.constant(Tensor::zeros([c]).unwrap());
            let conv = ConvSpec {
                in_channels: c,
                out_channels: co,
                kernel_size: k,
                stride: s,
                pad: p,
            };
            let deconv = DeconvSpec {
                in_channels: co,
                out_channels: c,
                kernel_size: k,
                stride: s,
                pad: p,
            };
            let cx = g.conv2d(x, w, zc, &conv).unwrap();
            let dy = g.deconv2d(y, w, zd, &deconv).unwrap();
            let lhs = g.value(cx).dot(&y0).unwrap();
            let rhs = x0.dot(g.value(dy)).unwrap();
            assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn leaky_relu_definition() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_f64([3], &[5.0, -1.0, -2.0]).unwrap());
        let a = g.leaky_relu(x, 0.1);
        assert_eq!(g.value(a).data()[..2], [5.0, -0.1]);
        let b = g.leaky_relu(x, 0.2);
        assert!((g.value(b).data()[2] + 0.4).abs() < 1e-15);
        let id = g.leaky_relu(x, 1.0);
        assert_eq!(g.value(id), g.value(x));
        let relu = g.leaky_relu(x, 0.0);
        assert_eq!(g.value(relu).data(), &[5.0, 0.0, 0.0]);
    }

    #[test]
    fn leaky_relu_kink_takes_negative_slope() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_f64([1], &[0.0]).unwrap());
        let y = g.leaky_relu(x, 0.1);
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 0.1);
    }

    #[test]
    fn concat_and_reshape_shapes() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::from_f64([2], &[1., 2.]).unwrap());
        let b = g.constant(Tensor::from_f64([1], &[3.]).unwrap());
        let c = g.concat(&[a, b], 0).unwrap();
        assert_eq!(g.value(c).data(), &[1., 2., 3.]);

        let e1 = g.constant(Tensor::zeros([2, 256]).unwrap());
        let e2 = g.constant(Tensor::zeros([2, 256]).unwrap());
        let cat = g.concat(&[e1, e2], 1).unwrap();
        assert_eq!(g.value(cat).shape(), &[2, 512]);
        let bad = g.constant(Tensor::zeros([3, 256]).unwrap());
        assert!(g.concat(&[e1, bad], 1).is_err());

        let v = g.constant(Tensor::zeros([16384]).unwrap());
        let r = g.reshape(v, &[256, 8, 8]).unwrap();
        assert_eq!(g.value(r).shape(), &[256, 8, 8]);
        let six = g.constant(Tensor::from_f64([6], &[1., 2., 3., 4., 5., 6.]).unwrap());
        let m = g.reshape(six, &[2, 3]).unwrap();
        let back = g.reshape(m, &[6]).unwrap();
        assert_eq!(g.value(back), g.value(six));
        assert!(g.reshape(six, &[4]).is_err());
    }

    #[test]
    fn cross_entropy_reference_values() {
        let mut g = Graph::<f64>::new();
        let z = g.constant(Tensor::from_f64([1, 2], &[0., 0.]).unwrap());
        let l = g.softmax_cross_entropy(z, &[0]).unwrap();
        assert!((g.value(l).item() - std::f64::consts::LN_2).abs() < 1e-12);
        let z = g.constant(Tensor::from_f64([1, 2], &[30., 0.]).unwrap());
        let l = g.softmax_cross_entropy(z, &[0]).unwrap();
        assert!(g.value(l).item() < 1e-12);
        assert!(matches!(
            g.softmax_cross_entropy(z, &[2]),
            Err(GcnError::Label(_))
        ));
    }

    #[test]
    fn cross_entropy_matches_direct_formula() {
        let mut rng = RngState::new(31);
        let z0 = gauss(&[4, 5], &mut rng);
        let labels = [0, 3, 4, 1];
        let mut g = Graph::new();
        let z = g.constant(z0.clone());
        let l = g.softmax_cross_entropy(z, &labels).unwrap();
        let mut want = 0.0;
        for (row, &y) in z0.data().chunks(5).zip(&labels) {
            let denom: f64 = row.iter().map(|v| v.exp()).sum();
            want -= (row[y].exp() / denom).ln();
        }
        want /= 4.0;
        assert!((g.value(l).item() - want).abs() < 1e-12);
    }

    #[test]
    fn mse_hand_cases() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::from_f64([1, 2], &[1., 1.]).unwrap());
        let b = g.constant(Tensor::from_f64([1, 2], &[0., 0.]).unwrap());
        let l = g.mse_pixel_loss(a, b).unwrap();
        assert_eq!(g.value(l).item(), 2.0);
        let l0 = g.mse_pixel_loss(a, a).unwrap();
        assert_eq!(g.value(l0).item(), 0.0);
        let c = g.constant(Tensor::from_f64([2], &[0., 0.]).unwrap());
        assert!(g.mse_pixel_loss(a, c).is_err());
    }

    #[test]
    fn mse_gradient_closed_form() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(Tensor::from_f64([2, 2], &[1., 2., 3., 4.]).unwrap());
        let b = g.constant(Tensor::from_f64([2, 2], &[0., 1., 1., 1.]).unwrap());
        let l = g.mse_pixel_loss(a, b).unwrap();
        let grads = g.backward(l).unwrap();
        // 2 (a - b) / batch
        assert_eq!(grads.get(a).unwrap().data(), &[1., 1., 2., 3.]);
    }

    #[test]
    fn max_pool_picks_window_maximum() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(
            Tensor::from_f64([1, 1, 4, 4], &[
                1., 2., 0., 0., //
                3., 4., 0., 9., //
                0., 0., 5., 0., //
                7., 0., 0., 6.,
            ])
            .unwrap(),
        );
        let y = g
            .max_pool2d(
                x,
                &PoolSpec {
                    kernel_size: 2,
                    stride: 2,
                },
            )
            .unwrap();
        assert_eq!(g.value(y).data(), &[4., 9., 7., 6.]);
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().sum(), 4.0);
        assert_eq!(grads.get(x).unwrap().data()[5], 1.0);
    }
}
