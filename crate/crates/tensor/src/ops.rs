//! Primitive operations: forward kernels and their reverse-mode rules.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};
use crate::gemm::gemm;
use crate::tensor::Tensor;

/// The closed set of primitive operations the engine knows how to
/// differentiate.
///
/// Layouts: images are `[batch, channels, height, width]`, sequences are
/// `[batch, channels, length]`. Convolution weights are `[out, in, k...]`;
/// transposed-convolution weights are `[in, out, kh, kw]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Op {
    /// `x [B, in]`, `w [out, in]`, `b [out]` → `x wᵀ + b`.
    Linear,
    Conv2d { stride: usize, padding: usize },
    Conv1d { stride: usize, padding: usize },
    TransposedConv2d { stride: usize, padding: usize },
    Upsample2dNearest { factor: usize },
    Upsample1dNearest { factor: usize },
    LeakyRelu { slope: f64 },
    Tanh,
    Softplus,
    Sigmoid,
    /// Inverted dropout. `training = false` or `rate = 0` is the identity.
    Dropout { rate: f64, seed: u64, training: bool },
    Add,
    Matmul,
    /// Mean squared error between two equally shaped tensors; scalar output.
    MseLoss,
    /// Mean binary cross-entropy of `sigmoid(x)` against a constant label.
    BceWithLogits { target: f64 },
    /// Mean of all elements; scalar output.
    Mean,
    Scale { factor: f64 },
    Reshape { shape: Vec<usize> },
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Linear => "linear",
            Op::Conv2d { .. } => "conv2d",
            Op::Conv1d { .. } => "conv1d",
            Op::TransposedConv2d { .. } => "transposed_conv2d",
            Op::Upsample2dNearest { .. } => "upsample2d_nearest",
            Op::Upsample1dNearest { .. } => "upsample1d_nearest",
            Op::LeakyRelu { .. } => "leaky_relu",
            Op::Tanh => "tanh",
            Op::Softplus => "softplus",
            Op::Sigmoid => "sigmoid",
            Op::Dropout { .. } => "dropout",
            Op::Add => "add",
            Op::Matmul => "matmul",
            Op::MseLoss => "mse_loss",
            Op::BceWithLogits { .. } => "bce_with_logits",
            Op::Mean => "mean",
            Op::Scale { .. } => "scale",
            Op::Reshape { .. } => "reshape",
        }
    }

    pub fn arity(&self) -> usize {
        match self {
            Op::Linear | Op::Conv2d { .. } | Op::Conv1d { .. } | Op::TransposedConv2d { .. } => 3,
            Op::Add | Op::Matmul | Op::MseLoss => 2,
            _ => 1,
        }
    }

    /// Parses an op description such as `{"kind": "conv2d", "stride": 1, "padding": 0}`.
    pub fn from_json(text: &str) -> Result<Op> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        let kind = value
            .get("kind")
            .and_then(|k| k.as_str())
            .ok_or_else(|| TensorError::UnknownOp("<missing kind>".into()))?
            .to_string();
        serde_json::from_value(value).map_err(|e| {
            if e.to_string().contains("unknown variant") {
                TensorError::UnknownOp(kind)
            } else {
                TensorError::Attr {
                    op: "op",
                    detail: e.to_string(),
                }
            }
        })
    }
}

/// Extra forward state kept for the backward rule.
#[derive(Clone, Debug)]
pub(crate) enum Saved {
    Nothing,
    Mask(Vec<f64>),
}

/// Evaluates `op` on `inputs` without recording anything.
pub fn apply(op: &Op, inputs: &[&Tensor]) -> Result<Tensor> {
    forward(op, inputs).map(|(t, _)| t)
}

pub(crate) fn forward(op: &Op, inputs: &[&Tensor]) -> Result<(Tensor, Saved)> {
    if inputs.len() != op.arity() {
        return Err(TensorError::Arity {
            op: op.name(),
            expected: op.arity(),
            got: inputs.len(),
        });
    }
    let out = match op {
        Op::Linear => linear_fwd(inputs[0], inputs[1], inputs[2])?,
        Op::Conv2d { stride, padding } => {
            let g = conv2d_geom("conv2d", inputs[0], inputs[1], inputs[2], *stride, *padding)?;
            conv_fwd(&g, inputs[0], inputs[1], inputs[2])
        }
        Op::Conv1d { stride, padding } => {
            let g = conv1d_geom(inputs[0], inputs[1], inputs[2], *stride, *padding)?;
            conv_fwd(&g, inputs[0], inputs[1], inputs[2])
        }
        Op::TransposedConv2d { stride, padding } => {
            let g = tconv_geom(inputs[0], inputs[1], inputs[2], *stride, *padding)?;
            tconv_fwd(&g, inputs[0], inputs[1], inputs[2])
        }
        Op::Upsample2dNearest { factor } => upsample_fwd(inputs[0], *factor, 2)?,
        Op::Upsample1dNearest { factor } => upsample_fwd(inputs[0], *factor, 1)?,
        Op::LeakyRelu { slope } => map(inputs[0], |x| if x > 0.0 { x } else { slope * x }),
        Op::Tanh => map(inputs[0], f64::tanh),
        Op::Softplus => map(inputs[0], softplus),
        Op::Sigmoid => map(inputs[0], sigmoid),
        Op::Dropout {
            rate,
            seed,
            training,
        } => {
            if !(0.0..1.0).contains(rate) {
                return Err(TensorError::Attr {
                    op: "dropout",
                    detail: format!("rate {rate} outside [0, 1)"),
                });
            }
            if !*training || *rate == 0.0 {
                return Ok((inputs[0].clone_plain(), Saved::Nothing));
            }
            let mask = dropout_mask(inputs[0].numel(), *rate, *seed);
            let data = inputs[0].data().iter().zip(&mask).map(|(x, m)| x * m).collect();
            let out = Tensor::from_parts(inputs[0].shape().to_vec(), data);
            return Ok((out, Saved::Mask(mask)));
        }
        Op::Add => {
            same_shape("add", inputs[0], inputs[1])?;
            let data = inputs[0].data().iter().zip(inputs[1].data()).map(|(a, b)| a + b).collect();
            Tensor::from_parts(inputs[0].shape().to_vec(), data)
        }
        Op::Matmul => matmul_fwd(inputs[0], inputs[1])?,
        Op::MseLoss => {
            same_shape("mse_loss", inputs[0], inputs[1])?;
            let n = inputs[0].numel().max(1) as f64;
            let s: f64 = inputs[0]
                .data()
                .iter()
                .zip(inputs[1].data())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            Tensor::scalar(s / n)
        }
        Op::BceWithLogits { target } => {
            let n = inputs[0].numel().max(1) as f64;
            let s: f64 = inputs[0].data().iter().map(|&x| softplus(x) - target * x).sum();
            Tensor::scalar(s / n)
        }
        Op::Mean => {
            let n = inputs[0].numel().max(1) as f64;
            Tensor::scalar(inputs[0].data().iter().sum::<f64>() / n)
        }
        Op::Scale { factor } => map(inputs[0], |x| x * factor),
        Op::Reshape { shape } => {
            let out = inputs[0].reshape(shape).map_err(|_| {
                TensorError::shape(
                    "reshape",
                    format!("cannot view {:?} as {:?}", inputs[0].shape(), shape),
                )
            })?;
            out.clone_plain()
        }
    };
    Ok((out, Saved::Nothing))
}

/// Reverse-mode rule: given the upstream gradient of `output`, returns the
/// gradient for each input whose `need` flag is set.
pub(crate) fn backward(
    op: &Op,
    inputs: &[&Tensor],
    output: &Tensor,
    saved: &Saved,
    grad: &Tensor,
    need: &[bool],
) -> Vec<Option<Tensor>> {
    let mut out: Vec<Option<Tensor>> = vec![None; inputs.len()];
    match op {
        Op::Linear => {
            let (x, w) = (inputs[0], inputs[1]);
            let (b, fin) = (x.shape()[0], x.shape()[1]);
            let fout = w.shape()[0];
            if need[0] {
                let mut dx = vec![0.0; b * fin];
                gemm(b, fout, fin, grad.data(), false, w.data(), false, 0.0, &mut dx);
                out[0] = Some(Tensor::from_parts(x.shape().to_vec(), dx));
            }
            if need[1] {
                let mut dw = vec![0.0; fout * fin];
                gemm(fout, b, fin, grad.data(), true, x.data(), false, 0.0, &mut dw);
                out[1] = Some(Tensor::from_parts(w.shape().to_vec(), dw));
            }
            if need[2] {
                let mut db = vec![0.0; fout];
                for row in grad.data().chunks(fout) {
                    for (d, g) in db.iter_mut().zip(row) {
                        *d += g;
                    }
                }
                out[2] = Some(Tensor::from_parts(vec![fout], db));
            }
        }
        Op::Conv2d { stride, padding } => {
            let g = conv2d_geom("conv2d", inputs[0], inputs[1], inputs[2], *stride, *padding)
                .expect("shapes validated in forward");
            conv_bwd(&g, inputs, grad, need, &mut out);
        }
        Op::Conv1d { stride, padding } => {
            let g = conv1d_geom(inputs[0], inputs[1], inputs[2], *stride, *padding)
                .expect("shapes validated in forward");
            conv_bwd(&g, inputs, grad, need, &mut out);
        }
        Op::TransposedConv2d { stride, padding } => {
            let g = tconv_geom(inputs[0], inputs[1], inputs[2], *stride, *padding)
                .expect("shapes validated in forward");
            tconv_bwd(&g, inputs, grad, need, &mut out);
        }
        Op::Upsample2dNearest { factor } => {
            out[0] = Some(upsample_bwd(inputs[0], grad, *factor, 2));
        }
        Op::Upsample1dNearest { factor } => {
            out[0] = Some(upsample_bwd(inputs[0], grad, *factor, 1));
        }
        Op::LeakyRelu { slope } => {
            out[0] = Some(zip_map(inputs[0], grad, |x, g| if x > 0.0 { g } else { slope * g }));
        }
        Op::Tanh => {
            out[0] = Some(zip_map(output, grad, |y, g| g * (1.0 - y * y)));
        }
        Op::Softplus => {
            out[0] = Some(zip_map(inputs[0], grad, |x, g| g * sigmoid(x)));
        }
        Op::Sigmoid => {
            out[0] = Some(zip_map(output, grad, |y, g| g * y * (1.0 - y)));
        }
        Op::Dropout { .. } => {
            out[0] = Some(match saved {
                Saved::Mask(mask) => {
                    let data = grad.data().iter().zip(mask).map(|(g, m)| g * m).collect();
                    Tensor::from_parts(grad.shape().to_vec(), data)
                }
                Saved::Nothing => grad.clone_plain(),
            });
        }
        Op::Add => {
            if need[0] {
                out[0] = Some(grad.clone_plain());
            }
            if need[1] {
                out[1] = Some(grad.clone_plain());
            }
        }
        Op::Matmul => {
            let (a, b) = (inputs[0], inputs[1]);
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            if need[0] {
                let mut da = vec![0.0; m * k];
                gemm(m, n, k, grad.data(), false, b.data(), true, 0.0, &mut da);
                out[0] = Some(Tensor::from_parts(vec![m, k], da));
            }
            if need[1] {
                let mut db = vec![0.0; k * n];
                gemm(k, m, n, a.data(), true, grad.data(), false, 0.0, &mut db);
                out[1] = Some(Tensor::from_parts(vec![k, n], db));
            }
        }
        Op::MseLoss => {
            let g = grad.item();
            let n = inputs[0].numel().max(1) as f64;
            let d: Vec<f64> = inputs[0]
                .data()
                .iter()
                .zip(inputs[1].data())
                .map(|(a, b)| 2.0 * (a - b) / n * g)
                .collect();
            if need[1] {
                let neg = d.iter().map(|v| -v).collect();
                out[1] = Some(Tensor::from_parts(inputs[1].shape().to_vec(), neg));
            }
            if need[0] {
                out[0] = Some(Tensor::from_parts(inputs[0].shape().to_vec(), d));
            }
        }
        Op::BceWithLogits { target } => {
            let g = grad.item();
            let n = inputs[0].numel().max(1) as f64;
            out[0] = Some(map(inputs[0], |x| (sigmoid(x) - target) / n * g));
        }
        Op::Mean => {
            let n = inputs[0].numel().max(1) as f64;
            out[0] = Some(Tensor::full(inputs[0].shape(), grad.item() / n));
        }
        Op::Scale { factor } => {
            out[0] = Some(map(grad, |g| g * factor));
        }
        Op::Reshape { .. } => {
            out[0] = Some(Tensor::from_parts(inputs[0].shape().to_vec(), grad.data().to_vec()));
        }
    }
    out
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn dropout_mask(len: usize, rate: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keep = 1.0 / (1.0 - rate);
    (0..len)
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
        .collect()
}

impl Tensor {
    fn clone_plain(&self) -> Tensor {
        Tensor::from_parts(self.shape().to_vec(), self.data().to_vec())
    }
}

fn map(x: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::from_parts(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect())
}

fn zip_map(x: &Tensor, g: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = x.data().iter().zip(g.data()).map(|(&a, &b)| f(a, b)).collect();
    Tensor::from_parts(x.shape().to_vec(), data)
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::shape(
            op,
            format!("operand shapes differ: {:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn rank(op: &'static str, what: &str, t: &Tensor, r: usize) -> Result<()> {
    if t.shape().len() != r {
        return Err(TensorError::shape(
            op,
            format!("{what} must have rank {r}, got shape {:?}", t.shape()),
        ));
    }
    Ok(())
}

fn linear_fwd(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    rank("linear", "input", x, 2)?;
    rank("linear", "weight", w, 2)?;
    rank("linear", "bias", b, 1)?;
    let (batch, fin) = (x.shape()[0], x.shape()[1]);
    let fout = w.shape()[0];
    if w.shape()[1] != fin {
        return Err(TensorError::shape(
            "linear",
            format!("input has {fin} features but weight expects {}", w.shape()[1]),
        ));
    }
    if b.shape()[0] != fout {
        return Err(TensorError::shape(
            "linear",
            format!("bias length {} does not match {fout} outputs", b.shape()[0]),
        ));
    }
    let mut y = vec![0.0; batch * fout];
    for row in y.chunks_mut(fout) {
        row.copy_from_slice(b.data());
    }
    gemm(batch, fin, fout, x.data(), false, w.data(), true, 1.0, &mut y);
    Ok(Tensor::from_parts(vec![batch, fout], y))
}

fn matmul_fwd(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    rank("matmul", "left operand", a, 2)?;
    rank("matmul", "right operand", b, 2)?;
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    if b.shape()[0] != k {
        return Err(TensorError::shape(
            "matmul",
            format!("inner dimensions differ: {:?} x {:?}", a.shape(), b.shape()),
        ));
    }
    let mut c = vec![0.0; m * n];
    gemm(m, k, n, a.data(), false, b.data(), false, 0.0, &mut c);
    Ok(Tensor::from_parts(vec![m, n], c))
}

/// Geometry of a (possibly 1-D) convolution expressed as a 2-D one.
///
/// `h x w` is the image the kernel slides over, `oh x ow` the grid of kernel
/// positions. For a transposed convolution the roles swap: the image is the
/// op's output and the grid is its input.
#[derive(Clone, Copy, Debug)]
struct Geom {
    batch: usize,
    /// Channels of the image side.
    c: usize,
    /// Channels of the grid side.
    o: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    ph: usize,
    pw: usize,
    oh: usize,
    ow: usize,
}

impl Geom {
    fn col_rows(&self) -> usize {
        self.c * self.kh * self.kw
    }
    fn grid(&self) -> usize {
        self.oh * self.ow
    }
    fn image(&self) -> usize {
        self.c * self.h * self.w
    }
}

fn out_extent(op: &'static str, input: usize, k: usize, s: usize, p: usize) -> Result<usize> {
    if s == 0 {
        return Err(TensorError::Attr {
            op,
            detail: "stride must be at least 1".into(),
        });
    }
    if input + 2 * p < k {
        return Err(TensorError::shape(
            op,
            format!("kernel {k} larger than padded input {}", input + 2 * p),
        ));
    }
    Ok((input + 2 * p - k) / s + 1)
}

fn conv_weight_check(op: &'static str, channels: usize, w: &Tensor, b: &Tensor) -> Result<()> {
    if w.shape()[1] != channels {
        return Err(TensorError::shape(
            op,
            format!(
                "input has {channels} channels but weight {:?} expects {}",
                w.shape(),
                w.shape()[1]
            ),
        ));
    }
    if b.shape() != [w.shape()[0]] {
        return Err(TensorError::shape(
            op,
            format!("bias shape {:?} does not match {} filters", b.shape(), w.shape()[0]),
        ));
    }
    Ok(())
}

fn conv2d_geom(
    op: &'static str,
    x: &Tensor,
    w: &Tensor,
    b: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Geom> {
    rank(op, "input", x, 4)?;
    rank(op, "weight", w, 4)?;
    conv_weight_check(op, x.shape()[1], w, b)?;
    let (kh, kw) = (w.shape()[2], w.shape()[3]);
    let oh = out_extent(op, x.shape()[2], kh, stride, padding)?;
    let ow = out_extent(op, x.shape()[3], kw, stride, padding)?;
    Ok(Geom {
        batch: x.shape()[0],
        c: x.shape()[1],
        o: w.shape()[0],
        h: x.shape()[2],
        w: x.shape()[3],
        kh,
        kw,
        sh: stride,
        sw: stride,
        ph: padding,
        pw: padding,
        oh,
        ow,
    })
}

fn conv1d_geom(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, padding: usize) -> Result<Geom> {
    rank("conv1d", "input", x, 3)?;
    rank("conv1d", "weight", w, 3)?;
    conv_weight_check("conv1d", x.shape()[1], w, b)?;
    let k = w.shape()[2];
    let ol = out_extent("conv1d", x.shape()[2], k, stride, padding)?;
    Ok(Geom {
        batch: x.shape()[0],
        c: x.shape()[1],
        o: w.shape()[0],
        h: 1,
        w: x.shape()[2],
        kh: 1,
        kw: k,
        sh: 1,
        sw: stride,
        ph: 0,
        pw: padding,
        oh: 1,
        ow: ol,
    })
}

fn tconv_geom(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, padding: usize) -> Result<Geom> {
    let op = "transposed_conv2d";
    rank(op, "input", x, 4)?;
    rank(op, "weight", w, 4)?;
    if stride == 0 {
        return Err(TensorError::Attr {
            op,
            detail: "stride must be at least 1".into(),
        });
    }
    if w.shape()[0] != x.shape()[1] {
        return Err(TensorError::shape(
            op,
            format!(
                "input has {} channels but weight {:?} expects {}",
                x.shape()[1],
                w.shape(),
                w.shape()[0]
            ),
        ));
    }
    if b.shape() != [w.shape()[1]] {
        return Err(TensorError::shape(
            op,
            format!("bias shape {:?} does not match {} filters", b.shape(), w.shape()[1]),
        ));
    }
    let (kh, kw) = (w.shape()[2], w.shape()[3]);
    let extent = |i: usize, k: usize| -> Result<usize> {
        let full = (i - 1) * stride + k;
        if full <= 2 * padding {
            return Err(TensorError::shape(
                op,
                format!("padding {padding} leaves no output for input extent {i}"),
            ));
        }
        Ok(full - 2 * padding)
    };
    let (h, wd) = (x.shape()[2], x.shape()[3]);
    if h == 0 || wd == 0 {
        return Err(TensorError::shape(op, "empty spatial input"));
    }
    Ok(Geom {
        batch: x.shape()[0],
        c: w.shape()[1],
        o: x.shape()[1],
        h: extent(h, kh)?,
        w: extent(wd, kw)?,
        kh,
        kw,
        sh: stride,
        sw: stride,
        ph: padding,
        pw: padding,
        oh: h,
        ow: wd,
    })
}

fn im2col(g: &Geom, img: &[f64], cols: &mut [f64]) {
    let grid = g.grid();
    for ci in 0..g.c {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * grid..(row + 1) * grid];
                for oy in 0..g.oh {
                    let iy = (oy * g.sh + ky) as isize - g.ph as isize;
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let base = (ci * g.h + iy as usize) * g.w;
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.sw + kx) as isize - g.pw as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            img[base + ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(g: &Geom, cols: &[f64], img: &mut [f64]) {
    let grid = g.grid();
    for ci in 0..g.c {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src = &cols[row * grid..(row + 1) * grid];
                for oy in 0..g.oh {
                    let iy = (oy * g.sh + ky) as isize - g.ph as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = (ci * g.h + iy as usize) * g.w;
                    for ox in 0..g.ow {
                        let ix = (ox * g.sw + kx) as isize - g.pw as isize;
                        if ix >= 0 && ix < g.w as isize {
                            img[base + ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

fn out_shape_like(x: &Tensor, channels: usize, g: &Geom, image_side: bool) -> Vec<usize> {
    let (h, w) = if image_side { (g.h, g.w) } else { (g.oh, g.ow) };
    if x.shape().len() == 3 {
        vec![g.batch, channels, w]
    } else {
        vec![g.batch, channels, h, w]
    }
}

fn conv_fwd(g: &Geom, x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let (rows, grid) = (g.col_rows(), g.grid());
    let mut cols = vec![0.0; rows * grid];
    let mut out = vec![0.0; g.batch * g.o * grid];
    for (bi, dst) in out.chunks_mut(g.o * grid).enumerate() {
        im2col(g, &x.data()[bi * g.image()..(bi + 1) * g.image()], &mut cols);
        for (o, line) in dst.chunks_mut(grid).enumerate() {
            line.fill(b.data()[o]);
        }
        gemm(g.o, rows, grid, w.data(), false, &cols, false, 1.0, dst);
    }
    Tensor::from_parts(out_shape_like(x, g.o, g, false), out)
}

fn conv_bwd(g: &Geom, inputs: &[&Tensor], grad: &Tensor, need: &[bool], out: &mut [Option<Tensor>]) {
    let (x, w) = (inputs[0], inputs[1]);
    let (rows, grid) = (g.col_rows(), g.grid());
    let mut cols = vec![0.0; rows * grid];
    let mut dcols = vec![0.0; rows * grid];
    let mut dx = need[0].then(|| vec![0.0; x.numel()]);
    let mut dw = need[1].then(|| vec![0.0; w.numel()]);
    let mut db = need[2].then(|| vec![0.0; g.o]);
    for bi in 0..g.batch {
        let gout = &grad.data()[bi * g.o * grid..(bi + 1) * g.o * grid];
        if let Some(dw) = dw.as_mut() {
            im2col(g, &x.data()[bi * g.image()..(bi + 1) * g.image()], &mut cols);
            gemm(g.o, grid, rows, gout, false, &cols, true, 1.0, dw);
        }
        if let Some(dx) = dx.as_mut() {
            gemm(rows, g.o, grid, w.data(), true, gout, false, 0.0, &mut dcols);
            col2im(g, &dcols, &mut dx[bi * g.image()..(bi + 1) * g.image()]);
        }
        if let Some(db) = db.as_mut() {
            for (o, line) in gout.chunks(grid).enumerate() {
                db[o] += line.iter().sum::<f64>();
            }
        }
    }
    out[0] = dx.map(|d| Tensor::from_parts(x.shape().to_vec(), d));
    out[1] = dw.map(|d| Tensor::from_parts(w.shape().to_vec(), d));
    out[2] = db.map(|d| Tensor::from_parts(vec![g.o], d));
}

fn tconv_fwd(g: &Geom, x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let (rows, grid) = (g.col_rows(), g.grid());
    let mut cols = vec![0.0; rows * grid];
    let mut out = vec![0.0; g.batch * g.image()];
    let plane = g.h * g.w;
    for (bi, dst) in out.chunks_mut(g.image()).enumerate() {
        let xb = &x.data()[bi * g.o * grid..(bi + 1) * g.o * grid];
        gemm(rows, g.o, grid, w.data(), true, xb, false, 0.0, &mut cols);
        col2im(g, &cols, dst);
        for (c, p) in dst.chunks_mut(plane).enumerate() {
            let bias = b.data()[c];
            p.iter_mut().for_each(|v| *v += bias);
        }
    }
    Tensor::from_parts(vec![g.batch, g.c, g.h, g.w], out)
}

fn tconv_bwd(g: &Geom, inputs: &[&Tensor], grad: &Tensor, need: &[bool], out: &mut [Option<Tensor>]) {
    let (x, w) = (inputs[0], inputs[1]);
    let (rows, grid) = (g.col_rows(), g.grid());
    let mut gcols = vec![0.0; rows * grid];
    let mut dx = need[0].then(|| vec![0.0; x.numel()]);
    let mut dw = need[1].then(|| vec![0.0; w.numel()]);
    let mut db = need[2].then(|| vec![0.0; g.c]);
    let plane = g.h * g.w;
    for bi in 0..g.batch {
        let gout = &grad.data()[bi * g.image()..(bi + 1) * g.image()];
        if dx.is_some() || dw.is_some() {
            im2col(g, gout, &mut gcols);
        }
        if let Some(dx) = dx.as_mut() {
            let dst = &mut dx[bi * g.o * grid..(bi + 1) * g.o * grid];
            gemm(g.o, rows, grid, w.data(), false, &gcols, false, 0.0, dst);
        }
        if let Some(dw) = dw.as_mut() {
            let xb = &x.data()[bi * g.o * grid..(bi + 1) * g.o * grid];
            gemm(g.o, grid, rows, xb, false, &gcols, true, 1.0, dw);
        }
        if let Some(db) = db.as_mut() {
            for (c, p) in gout.chunks(plane).enumerate() {
                db[c] += p.iter().sum::<f64>();
            }
        }
    }
    out[0] = dx.map(|d| Tensor::from_parts(x.shape().to_vec(), d));
    out[1] = dw.map(|d| Tensor::from_parts(w.shape().to_vec(), d));
    out[2] = db.map(|d| Tensor::from_parts(vec![g.c], d));
}

fn upsample_fwd(x: &Tensor, factor: usize, dims: usize) -> Result<Tensor> {
    let op = if dims == 2 { "upsample2d_nearest" } else { "upsample1d_nearest" };
    if factor == 0 {
        return Err(TensorError::Attr {
            op,
            detail: "factor must be at least 1".into(),
        });
    }
    rank(op, "input", x, dims + 2)?;
    let s = x.shape();
    if dims == 2 {
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let (oh, ow) = (h * factor, w * factor);
        let mut out = vec![0.0; planes * oh * ow];
        for p in 0..planes {
            for oy in 0..oh {
                let src = &x.data()[(p * h + oy / factor) * w..(p * h + oy / factor + 1) * w];
                let dst = &mut out[(p * oh + oy) * ow..(p * oh + oy + 1) * ow];
                for (ox, v) in dst.iter_mut().enumerate() {
                    *v = src[ox / factor];
                }
            }
        }
        Ok(Tensor::from_parts(vec![s[0], s[1], oh, ow], out))
    } else {
        let (lines, l) = (s[0] * s[1], s[2]);
        let ol = l * factor;
        let mut out = vec![0.0; lines * ol];
        for (p, dst) in out.chunks_mut(ol).enumerate() {
            let src = &x.data()[p * l..(p + 1) * l];
            for (i, v) in dst.iter_mut().enumerate() {
                *v = src[i / factor];
            }
        }
        Ok(Tensor::from_parts(vec![s[0], s[1], ol], out))
    }
}

fn upsample_bwd(x: &Tensor, grad: &Tensor, factor: usize, dims: usize) -> Tensor {
    let s = x.shape();
    let mut dx = vec![0.0; x.numel()];
    if dims == 2 {
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let (oh, ow) = (h * factor, w * factor);
        for p in 0..planes {
            for oy in 0..oh {
                let src = &grad.data()[(p * oh + oy) * ow..(p * oh + oy + 1) * ow];
                let dst = &mut dx[(p * h + oy / factor) * w..(p * h + oy / factor + 1) * w];
                for (ox, g) in src.iter().enumerate() {
                    dst[ox / factor] += g;
                }
            }
        }
    } else {
        let l = s[2];
        let ol = l * factor;
        for (p, src) in grad.data().chunks(ol).enumerate() {
            let dst = &mut dx[p * l..(p + 1) * l];
            for (i, g) in src.iter().enumerate() {
                dst[i / factor] += g;
            }
        }
    }
    Tensor::from_parts(s.to_vec(), dx)
}
