//! Differentiable building blocks on `(C, Z, Y, X)` tensors.
//!
//! Convolutions run on zero-padded copies of each channel so every kernel tap is one
//! contiguous `axpy` over the flattened padded volume; results at pad positions are
//! discarded.

use rand::Rng;

use super::tensor::{axpy, dot, sum, Scalar, Tensor};
use super::NnError;

#[derive(Debug, Clone, Copy)]
struct PadGeom {
    dims: [usize; 3],
    pad: usize,
    yp: usize,
    xp: usize,
    len: usize,
    start: usize,
    end: usize,
}

impl PadGeom {
    fn new(z: usize, y: usize, x: usize, pad: usize) -> Self {
        let (zp, yp, xp) = (z + 2 * pad, y + 2 * pad, x + 2 * pad);
        let at = |k: usize, j: usize, i: usize| (k * yp + j) * xp + i;
        PadGeom {
            dims: [z, y, x],
            pad,
            yp,
            xp,
            len: zp * yp * xp,
            start: at(pad, pad, pad),
            end: at(z - 1 + pad, y - 1 + pad, x - 1 + pad) + 1,
        }
    }

    /// Flat offset of kernel tap `(dz, dy, dx)` relative to the output position.
    fn offset(&self, dz: usize, dy: usize, dx: usize) -> isize {
        let p = self.pad as isize;
        ((dz as isize - p) * self.yp as isize + (dy as isize - p)) * self.xp as isize + (dx as isize - p)
    }

    fn pad_into<F: Scalar>(&self, src: &[F], dst: &mut [F]) {
        let [z, y, x] = self.dims;
        for k in 0..z {
            for j in 0..y {
                let s = (k * y + j) * x;
                let d = ((k + self.pad) * self.yp + j + self.pad) * self.xp + self.pad;
                dst[d..d + x].copy_from_slice(&src[s..s + x]);
            }
        }
    }

    fn unpad_into<F: Scalar>(&self, src: &[F], dst: &mut [F]) {
        let [z, y, x] = self.dims;
        for k in 0..z {
            for j in 0..y {
                let d = (k * y + j) * x;
                let s = ((k + self.pad) * self.yp + j + self.pad) * self.xp + self.pad;
                dst[d..d + x].copy_from_slice(&src[s..s + x]);
            }
        }
    }

    fn padded<F: Scalar>(&self, t: &Tensor<F>) -> Vec<F> {
        let channels = t.shape()[0];
        let mut out = vec![F::zero(); channels * self.len];
        for c in 0..channels {
            self.pad_into(t.channel(c), &mut out[c * self.len..(c + 1) * self.len]);
        }
        out
    }

    fn shifted(&self, off: isize) -> std::ops::Range<usize> {
        let s = (self.start as isize + off) as usize;
        s..s + (self.end - self.start)
    }
}

fn conv_shapes<F: Scalar>(input: &Tensor<F>, weight: &Tensor<F>) -> Result<([usize; 4], usize, usize), NnError> {
    let [cin, z, y, x] = input.dims4()?;
    let (cout, k) = match weight.shape()[..] {
        [o, i, kz, ky, kx] if kz == ky && ky == kx && kz % 2 == 1 => {
            if i != cin {
                return Err(NnError::ChannelMismatch {
                    expected: i,
                    found: cin,
                });
            }
            (o, kz)
        }
        _ => {
            return Err(NnError::Shape(format!(
                "kernel must be (out, in, k, k, k) with odd k, got {:?}",
                weight.shape()
            )))
        }
    };
    Ok(([cin, z, y, x], cout, k))
}

/// Same-padded, stride-1 3D convolution (cross-correlation) with bias.
pub fn conv3d_forward<F: Scalar>(
    input: &Tensor<F>,
    weight: &Tensor<F>,
    bias: &Tensor<F>,
) -> Result<Tensor<F>, NnError> {
    let ([cin, z, y, x], cout, k) = conv_shapes(input, weight)?;
    if bias.len() != cout {
        return Err(NnError::Shape(format!(
            "bias has {} entries for {cout} filters",
            bias.len()
        )));
    }
    let g = PadGeom::new(z, y, x, k / 2);
    let inp = g.padded(input);
    let taps = k * k * k;
    let offsets: Vec<isize> = (0..taps).map(|t| g.offset(t / (k * k), (t / k) % k, t % k)).collect();
    let w = weight.data();
    let mut out = Tensor::zeros(&[cout, z, y, x]);
    let mut acc = vec![F::zero(); g.len];
    for o in 0..cout {
        acc.iter_mut().for_each(|v| *v = F::zero());
        for i in 0..cin {
            let src = &inp[i * g.len..(i + 1) * g.len];
            let wk = &w[(o * cin + i) * taps..(o * cin + i + 1) * taps];
            for (t, &off) in offsets.iter().enumerate() {
                axpy(&mut acc[g.start..g.end], wk[t], &src[g.shifted(off)]);
            }
        }
        let dst = out.channel_mut(o);
        g.unpad_into(&acc, dst);
        let b = bias.data()[o];
        dst.iter_mut().for_each(|v| *v += b);
    }
    Ok(out)
}

/// Gradients of a convolution.
#[derive(Debug, Clone)]
pub struct ConvGrads<F> {
    pub input: Option<Tensor<F>>,
    pub weight: Tensor<F>,
    pub bias: Tensor<F>,
}

pub fn conv3d_backward<F: Scalar>(
    input: &Tensor<F>,
    weight: &Tensor<F>,
    grad_out: &Tensor<F>,
) -> Result<ConvGrads<F>, NnError> {
    conv3d_backward_impl(input, weight, grad_out, true)
}

pub(crate) fn conv3d_backward_impl<F: Scalar>(
    input: &Tensor<F>,
    weight: &Tensor<F>,
    grad_out: &Tensor<F>,
    need_input: bool,
) -> Result<ConvGrads<F>, NnError> {
    let ([cin, z, y, x], cout, k) = conv_shapes(input, weight)?;
    if grad_out.shape() != [cout, z, y, x] {
        return Err(NnError::Shape(format!(
            "conv grad has shape {:?}, expected {:?}",
            grad_out.shape(),
            [cout, z, y, x]
        )));
    }
    let g = PadGeom::new(z, y, x, k / 2);
    let taps = k * k * k;
    let offsets: Vec<isize> = (0..taps).map(|t| g.offset(t / (k * k), (t / k) % k, t % k)).collect();
    let inp = g.padded(input);
    let gout = g.padded(grad_out);
    let w = weight.data();

    let mut gw = Tensor::zeros(weight.shape());
    let mut gb = Tensor::zeros(&[cout]);
    for o in 0..cout {
        let go = &gout[o * g.len..(o + 1) * g.len];
        gb.data_mut()[o] = sum(grad_out.channel(o));
        for i in 0..cin {
            let src = &inp[i * g.len..(i + 1) * g.len];
            let base = (o * cin + i) * taps;
            for (t, &off) in offsets.iter().enumerate() {
                gw.data_mut()[base + t] = dot(&go[g.start..g.end], &src[g.shifted(off)]);
            }
        }
    }

    let gin = if need_input {
        let mut gin = Tensor::zeros(&[cin, z, y, x]);
        let mut acc = vec![F::zero(); g.len];
        for i in 0..cin {
            acc.iter_mut().for_each(|v| *v = F::zero());
            for o in 0..cout {
                let go = &gout[o * g.len..(o + 1) * g.len];
                let wk = &w[(o * cin + i) * taps..(o * cin + i + 1) * taps];
                for (t, &off) in offsets.iter().enumerate() {
                    axpy(&mut acc[g.shifted(off)], wk[t], &go[g.start..g.end]);
                }
            }
            g.unpad_into(&acc, gin.channel_mut(i));
        }
        Some(gin)
    } else {
        None
    };
    Ok(ConvGrads {
        input: gin,
        weight: gw,
        bias: gb,
    })
}

/// 2x2x2 max pooling. The record holds, per output element, the flat input index of the
/// maximum; ties go to the first element of the window in layout order.
pub fn maxpool3d<F: Scalar>(input: &Tensor<F>) -> Result<(Tensor<F>, Vec<u32>), NnError> {
    let [c, z, y, x] = input.dims4()?;
    if z % 2 != 0 || y % 2 != 0 || x % 2 != 0 {
        return Err(NnError::OddDims([z, y, x]));
    }
    let (oz, oy, ox) = (z / 2, y / 2, x / 2);
    let mut out = Tensor::zeros(&[c, oz, oy, ox]);
    let mut arg = Vec::with_capacity(c * oz * oy * ox);
    let d = input.data();
    let od = out.data_mut();
    let mut n = 0;
    for ch in 0..c {
        let base = ch * z * y * x;
        for k in 0..oz {
            for j in 0..oy {
                for i in 0..ox {
                    let mut best = base + ((2 * k) * y + 2 * j) * x + 2 * i;
                    for dz in 0..2 {
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let idx = base + ((2 * k + dz) * y + 2 * j + dy) * x + 2 * i + dx;
                                if d[idx] > d[best] {
                                    best = idx;
                                }
                            }
                        }
                    }
                    od[n] = d[best];
                    arg.push(best as u32);
                    n += 1;
                }
            }
        }
    }
    Ok((out, arg))
}

pub fn maxpool3d_backward<F: Scalar>(
    input_shape: &[usize],
    argmax: &[u32],
    grad_out: &Tensor<F>,
) -> Result<Tensor<F>, NnError> {
    if argmax.len() != grad_out.len() {
        return Err(NnError::Shape("pool record does not match gradient".into()));
    }
    let mut gin = Tensor::zeros(input_shape);
    let gd = gin.data_mut();
    for (&a, &g) in argmax.iter().zip(grad_out.data()) {
        gd[a as usize] += g;
    }
    Ok(gin)
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample_nn<F: Scalar>(input: &Tensor<F>) -> Result<Tensor<F>, NnError> {
    let [c, z, y, x] = input.dims4()?;
    let (uz, uy, ux) = (2 * z, 2 * y, 2 * x);
    let mut out = Tensor::zeros(&[c, uz, uy, ux]);
    for ch in 0..c {
        let src = input.channel(ch);
        let dst = out.channel_mut(ch);
        for k in 0..uz {
            for j in 0..uy {
                let srow = &src[((k / 2) * y + j / 2) * x..][..x];
                let drow = &mut dst[(k * uy + j) * ux..][..ux];
                for (i, v) in drow.iter_mut().enumerate() {
                    *v = srow[i / 2];
                }
            }
        }
    }
    Ok(out)
}

pub fn upsample_nn_backward<F: Scalar>(grad_out: &Tensor<F>) -> Result<Tensor<F>, NnError> {
    let [c, uz, uy, ux] = grad_out.dims4()?;
    if uz % 2 != 0 || uy % 2 != 0 || ux % 2 != 0 {
        return Err(NnError::OddDims([uz, uy, ux]));
    }
    let (z, y, x) = (uz / 2, uy / 2, ux / 2);
    let mut gin = Tensor::zeros(&[c, z, y, x]);
    for ch in 0..c {
        let src = grad_out.channel(ch);
        let dst = gin.channel_mut(ch);
        for k in 0..uz {
            for j in 0..uy {
                let srow = &src[(k * uy + j) * ux..][..ux];
                let drow = &mut dst[((k / 2) * y + j / 2) * x..][..x];
                for (i, &g) in srow.iter().enumerate() {
                    drow[i / 2] += g;
                }
            }
        }
    }
    Ok(gin)
}

/// NN upsampling followed by a 3x3x3 convolution. Returns the upsampled tensor as well,
/// which the backward pass needs.
pub fn upsample_conv<F: Scalar>(
    input: &Tensor<F>,
    weight: &Tensor<F>,
    bias: &Tensor<F>,
) -> Result<(Tensor<F>, Tensor<F>), NnError> {
    let up = upsample_nn(input)?;
    let out = conv3d_forward(&up, weight, bias)?;
    Ok((out, up))
}

pub fn upsample_conv_backward<F: Scalar>(
    upsampled: &Tensor<F>,
    weight: &Tensor<F>,
    grad_out: &Tensor<F>,
) -> Result<ConvGrads<F>, NnError> {
    let mut g = conv3d_backward_impl(upsampled, weight, grad_out, true)?;
    let gi = g.input.take().expect("requested");
    g.input = Some(upsample_nn_backward(&gi)?);
    Ok(g)
}

pub fn relu<F: Scalar>(x: &Tensor<F>) -> Tensor<F> {
    x.map(|v| if v > F::zero() { v } else { F::zero() })
}

/// Gradient through a ReLU given its output.
pub fn relu_backward<F: Scalar>(output: &Tensor<F>, grad_out: &Tensor<F>) -> Tensor<F> {
    let mut g = grad_out.clone();
    for (gv, &o) in g.data_mut().iter_mut().zip(output.data()) {
        if o <= F::zero() {
            *gv = F::zero();
        }
    }
    g
}

/// Softmax over the channel axis at every voxel.
pub fn softmax_channels<F: Scalar>(logits: &Tensor<F>) -> Result<Tensor<F>, NnError> {
    let [c, ..] = logits.dims4()?;
    let n = logits.voxels();
    let l = logits.data();
    let mut out = Tensor::zeros(logits.shape());
    let o = out.data_mut();
    for v in 0..n {
        let mut m = l[v];
        for ch in 1..c {
            m = m.max(l[ch * n + v]);
        }
        let mut s = F::zero();
        for ch in 0..c {
            let e = (l[ch * n + v] - m).exp();
            o[ch * n + v] = e;
            s += e;
        }
        for ch in 0..c {
            o[ch * n + v] /= s;
        }
    }
    Ok(out)
}

pub fn softmax_channels_backward<F: Scalar>(probs: &Tensor<F>, grad_probs: &Tensor<F>) -> Tensor<F> {
    let c = probs.shape()[0];
    let n = probs.voxels();
    let p = probs.data();
    let g = grad_probs.data();
    let mut out = Tensor::zeros(probs.shape());
    let o = out.data_mut();
    for v in 0..n {
        let mut inner = F::zero();
        for ch in 0..c {
            inner += p[ch * n + v] * g[ch * n + v];
        }
        for ch in 0..c {
            o[ch * n + v] = p[ch * n + v] * (g[ch * n + v] - inner);
        }
    }
    out
}

pub fn concat_channels<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>, NnError> {
    let [ca, z, y, x] = a.dims4()?;
    let [cb, zb, yb, xb] = b.dims4()?;
    if [z, y, x] != [zb, yb, xb] {
        return Err(NnError::Shape(format!(
            "cannot concatenate spatial dims {:?} and {:?}",
            [z, y, x],
            [zb, yb, xb]
        )));
    }
    let mut data = Vec::with_capacity(a.len() + b.len());
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    Tensor::from_vec(&[ca + cb, z, y, x], data)
}

/// Split a channel-concatenated gradient back into its first `ca` channels and the rest.
pub fn split_channels<F: Scalar>(g: &Tensor<F>, ca: usize) -> Result<(Tensor<F>, Tensor<F>), NnError> {
    let [c, z, y, x] = g.dims4()?;
    if ca > c {
        return Err(NnError::Shape(format!("cannot split {ca} channels from {c}")));
    }
    let n = g.voxels();
    let (a, b) = g.data().split_at(ca * n);
    Ok((
        Tensor::from_vec(&[ca, z, y, x], a.to_vec())?,
        Tensor::from_vec(&[c - ca, z, y, x], b.to_vec())?,
    ))
}

/// Inverted-dropout mask: each entry is 0 with probability `rate`, else `1 / (1 - rate)`.
pub fn dropout_mask<F: Scalar, R: Rng + ?Sized>(shape: &[usize], rate: f64, rng: &mut R) -> Tensor<F> {
    let keep = F::of(1.0 / (1.0 - rate));
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| if rng.random::<f64>() < rate { F::zero() } else { keep })
        .collect();
    Tensor::from_vec(shape, data).expect("sized from shape")
}

pub fn mul_elementwise<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Tensor<F> {
    let mut out = a.clone();
    for (o, &m) in out.data_mut().iter_mut().zip(b.data()) {
        *o *= m;
    }
    out
}

pub fn add_assign<F: Scalar>(a: &mut Tensor<F>, b: &Tensor<F>) {
    for (o, &v) in a.data_mut().iter_mut().zip(b.data()) {
        *o += v;
    }
}
