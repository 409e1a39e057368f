//! Differentiable operations on [`Var`].

use super::{broadcast_index_map, broadcast_shapes, reduce_to_shape, strides, Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Split `shape` around `axis` into (outer, extent, inner) element counts.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::contract(format!(
            "{op}: axis {axis} out of range for shape {shape:?}"
        )));
    }
    Ok(())
}

pub(crate) fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

type Partial = fn(f64, f64, f64) -> f64;

#[allow(clippy::should_implement_trait)]
impl<'t> Var<'t> {
    fn same_tape(&self, other: &Var<'t>) -> &'t Tape {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "operands recorded on different tapes"
        );
        self.tape
    }

    fn binary(
        self,
        other: Var<'t>,
        op: &'static str,
        f: fn(f64, f64) -> f64,
        da: Partial,
        db: Partial,
    ) -> Result<Var<'t>> {
        let tape = self.same_tape(&other);
        let (out, a_shape, b_shape) = {
            let a = self.value();
            let b = other.value();
            let out_shape = broadcast_shapes(a.shape(), b.shape())
                .ok_or_else(|| Error::shape(op, a.shape(), b.shape()))?;
            let data: Vec<f64> = if a.shape() == b.shape() {
                a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect()
            } else {
                let ma = broadcast_index_map(a.shape(), &out_shape);
                let mb = broadcast_index_map(b.shape(), &out_shape);
                ma.iter()
                    .zip(&mb)
                    .map(|(&i, &j)| f(a.data()[i], b.data()[j]))
                    .collect()
            };
            (
                Tensor::new(out_shape, data)?,
                a.shape().to_vec(),
                b.shape().to_vec(),
            )
        };
        Ok(tape.custom(
            &[self, other],
            out,
            Box::new(move |ctx| {
                let (a, b, out, g) = (ctx.inputs[0], ctx.inputs[1], ctx.output, ctx.grad);
                let same = a.shape() == b.shape();
                let ma = (!same).then(|| broadcast_index_map(&a_shape, out.shape()));
                let mb = (!same).then(|| broadcast_index_map(&b_shape, out.shape()));
                let at = |i: usize| ma.as_ref().map_or(i, |m| m[i]);
                let bt = |i: usize| mb.as_ref().map_or(i, |m| m[i]);
                let partial = |d: Partial| {
                    Tensor::from_fn(out.shape().to_vec(), |i| {
                        g.data()[i] * d(a.data()[at(i)], b.data()[bt(i)], out.data()[i])
                    })
                };
                vec![
                    ctx.needs[0].then(|| reduce_to_shape(&partial(da), &a_shape)),
                    ctx.needs[1].then(|| reduce_to_shape(&partial(db), &b_shape)),
                ]
            }),
        ))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", |a, b| a + b, |_, _, _| 1.0, |_, _, _| 1.0)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", |a, b| a - b, |_, _, _| 1.0, |_, _, _| -1.0)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", |a, b| a * b, |_, b, _| b, |a, _, _| a)
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(
            other,
            "div",
            |a, b| a / b,
            |_, b, _| 1.0 / b,
            |_, b, out| -out / b,
        )
    }

    /// Elementwise minimum; ties send the gradient to the left operand.
    pub fn minimum(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(
            other,
            "minimum",
            f64::min,
            |a, b, _| if a <= b { 1.0 } else { 0.0 },
            |a, b, _| if a <= b { 0.0 } else { 1.0 },
        )
    }

    /// Elementwise maximum; ties send the gradient to the left operand.
    pub fn maximum(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(
            other,
            "maximum",
            f64::max,
            |a, b, _| if a >= b { 1.0 } else { 0.0 },
            |a, b, _| if a >= b { 0.0 } else { 1.0 },
        )
    }

    fn unary(self, f: impl Fn(f64) -> f64, df: fn(f64, f64) -> f64) -> Var<'t> {
        let out = self.value().map(f);
        self.tape.custom(
            &[self],
            out,
            Box::new(move |ctx| {
                let (x, y, g) = (ctx.inputs[0], ctx.output, ctx.grad);
                let d = Tensor::from_fn(x.shape().to_vec(), |i| {
                    g.data()[i] * df(x.data()[i], y.data()[i])
                });
                vec![Some(d)]
            }),
        )
    }

    pub fn neg(self) -> Var<'t> {
        self.unary(|x| -x, |_, _| -1.0)
    }

    pub fn scale(self, s: f64) -> Var<'t> {
        let out = self.value().map(|x| x * s);
        self.tape.custom(
            &[self],
            out,
            Box::new(move |ctx| vec![Some(ctx.grad.map(|g| g * s))]),
        )
    }

    pub fn add_scalar(self, s: f64) -> Var<'t> {
        self.unary(move |x| x + s, |_, _| 1.0)
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(f64::exp, |_, y| y)
    }

    pub fn ln(self) -> Var<'t> {
        self.unary(f64::ln, |x, _| 1.0 / x)
    }

    pub fn abs(self) -> Var<'t> {
        self.unary(f64::abs, |x, _| if x >= 0.0 { 1.0 } else { -1.0 })
    }

    pub fn sin(self) -> Var<'t> {
        self.unary(f64::sin, |x, _| x.cos())
    }

    pub fn cos(self) -> Var<'t> {
        self.unary(f64::cos, |x, _| -x.sin())
    }

    pub fn square(self) -> Var<'t> {
        self.unary(|x| x * x, |x, _| 2.0 * x)
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(|x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    /// `1/(1+exp(-x))`, evaluated without overflow for any finite input.
    pub fn sigmoid(self) -> Var<'t> {
        self.unary(stable_sigmoid, |_, y| y * (1.0 - y))
    }

    /// `max(x, floor)`; gradient passes where the bound is inactive.
    pub fn clamp_min(self, floor: f64) -> Var<'t> {
        self.unary(
            move |x| x.max(floor),
            |x, y| if x >= y { 1.0 } else { 0.0 },
        )
    }

    /// Batched matrix product over the last two axes, with numpy-style
    /// broadcasting of any leading batch axes.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let tape = self.same_tape(&other);
        let out = matmul_forward(&self.value(), &other.value())?;
        Ok(tape.custom(
            &[self, other],
            out,
            Box::new(|ctx| {
                let (a, b, g) = (ctx.inputs[0], ctx.inputs[1], ctx.grad);
                let (ga, gb) = matmul_backward(a, b, g, ctx.needs[0], ctx.needs[1]);
                vec![ga, gb]
            }),
        ))
    }

    pub fn sum_all(self) -> Var<'t> {
        let out = Tensor::scalar(self.value().sum());
        self.tape.custom(
            &[self],
            out,
            Box::new(|ctx| {
                let g = ctx.grad.item();
                vec![Some(Tensor::full(ctx.inputs[0].shape().to_vec(), g))]
            }),
        )
    }

    pub fn mean_all(self) -> Var<'t> {
        let n = self.value().numel() as f64;
        self.sum_all().scale(1.0 / n)
    }

    pub fn sum_axis(self, axis: usize, keepdim: bool) -> Result<Var<'t>> {
        let in_shape = self.shape();
        check_axis("sum_axis", &in_shape, axis)?;
        let (outer, n, inner) = axis_split(&in_shape, axis);
        let out = {
            let x = self.value();
            let mut data = vec![0.0; outer * inner];
            for o in 0..outer {
                for k in 0..n {
                    let row = &x.data()[(o * n + k) * inner..(o * n + k + 1) * inner];
                    for (acc, v) in data[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                        *acc += v;
                    }
                }
            }
            let mut shape = in_shape.clone();
            if keepdim {
                shape[axis] = 1;
            } else {
                shape.remove(axis);
            }
            Tensor::new(shape, data)?
        };
        Ok(self.tape.custom(
            &[self],
            out,
            Box::new(move |ctx| {
                let g = ctx.grad.data();
                let mut d = Tensor::zeros(in_shape.clone());
                let dd = d.data_mut();
                for o in 0..outer {
                    for k in 0..n {
                        let base = (o * n + k) * inner;
                        dd[base..base + inner].copy_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                vec![Some(d)]
            }),
        ))
    }

    /// Softmax along `axis`, shifted by the per-slice maximum.
    pub fn softmax(self, axis: usize) -> Result<Var<'t>> {
        let shape = self.shape();
        check_axis("softmax", &shape, axis)?;
        let out = softmax_forward(&self.value(), axis);
        Ok(self.tape.custom(
            &[self],
            out,
            Box::new(move |ctx| {
                let (y, g) = (ctx.output, ctx.grad);
                let (outer, n, inner) = axis_split(y.shape(), axis);
                let mut d = Tensor::zeros(y.shape().to_vec());
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| (o * n + k) * inner + i;
                        let dot: f64 = (0..n).map(|k| g.data()[at(k)] * y.data()[at(k)]).sum();
                        for k in 0..n {
                            d.data_mut()[at(k)] = y.data()[at(k)] * (g.data()[at(k)] - dot);
                        }
                    }
                }
                vec![Some(d)]
            }),
        ))
    }

    pub fn log_softmax(self, axis: usize) -> Result<Var<'t>> {
        let shape = self.shape();
        check_axis("log_softmax", &shape, axis)?;
        let out = {
            let x = self.value();
            let (outer, n, inner) = axis_split(x.shape(), axis);
            let mut out = x.clone();
            for o in 0..outer {
                for i in 0..inner {
                    let at = |k: usize| (o * n + k) * inner + i;
                    let max = (0..n).map(|k| x.data()[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                    let lse = max + (0..n).map(|k| (x.data()[at(k)] - max).exp()).sum::<f64>().ln();
                    for k in 0..n {
                        out.data_mut()[at(k)] = x.data()[at(k)] - lse;
                    }
                }
            }
            out
        };
        Ok(self.tape.custom(
            &[self],
            out,
            Box::new(move |ctx| {
                let (y, g) = (ctx.output, ctx.grad);
                let (outer, n, inner) = axis_split(y.shape(), axis);
                let mut d = Tensor::zeros(y.shape().to_vec());
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| (o * n + k) * inner + i;
                        let gsum: f64 = (0..n).map(|k| g.data()[at(k)]).sum();
                        for k in 0..n {
                            d.data_mut()[at(k)] = g.data()[at(k)] - y.data()[at(k)].exp() * gsum;
                        }
                    }
                }
                vec![Some(d)]
            }),
        ))
    }

    /// Normalize to zero mean and unit variance along `axis`, then apply the
    /// per-channel affine `gamma * x + beta`.
    pub fn layer_norm(self, gamma: Var<'t>, beta: Var<'t>, axis: usize) -> Result<Var<'t>> {
        let shape = self.shape();
        check_axis("layer_norm", &shape, axis)?;
        let n = shape[axis];
        for p in [gamma, beta] {
            if p.shape() != [n] {
                return Err(Error::shape("layer_norm", &shape, &p.shape()));
            }
        }
        let (out, xhat, inv_std) = {
            let x = self.value();
            let gm = gamma.value();
            let bt = beta.value();
            let (outer, n, inner) = axis_split(&shape, axis);
            let mut out = Tensor::zeros(shape.clone());
            let mut xhat = Tensor::zeros(shape.clone());
            let mut inv_std = vec![0.0; outer * inner];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |k: usize| (o * n + k) * inner + i;
                    let mean = (0..n).map(|k| x.data()[at(k)]).sum::<f64>() / n as f64;
                    let var = (0..n)
                        .map(|k| (x.data()[at(k)] - mean).powi(2))
                        .sum::<f64>()
                        / n as f64;
                    let r = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                    inv_std[o * inner + i] = r;
                    for k in 0..n {
                        let h = (x.data()[at(k)] - mean) * r;
                        xhat.data_mut()[at(k)] = h;
                        out.data_mut()[at(k)] = gm.data()[k] * h + bt.data()[k];
                    }
                }
            }
            (out, xhat, inv_std)
        };
        Ok(self.tape.custom(
            &[self, gamma, beta],
            out,
            Box::new(move |ctx| {
                let (g, gm) = (ctx.grad, ctx.inputs[1]);
                let (outer, n, inner) = axis_split(xhat.shape(), axis);
                let mut dx = Tensor::zeros(xhat.shape().to_vec());
                let mut dgamma = Tensor::zeros([n]);
                let mut dbeta = Tensor::zeros([n]);
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| (o * n + k) * inner + i;
                        let mut mean_d = 0.0;
                        let mut mean_dh = 0.0;
                        for k in 0..n {
                            let gk = g.data()[at(k)];
                            let h = xhat.data()[at(k)];
                            dgamma.data_mut()[k] += gk * h;
                            dbeta.data_mut()[k] += gk;
                            let d = gk * gm.data()[k];
                            mean_d += d;
                            mean_dh += d * h;
                        }
                        mean_d /= n as f64;
                        mean_dh /= n as f64;
                        let r = inv_std[o * inner + i];
                        for k in 0..n {
                            let d = g.data()[at(k)] * gm.data()[k];
                            dx.data_mut()[at(k)] = r * (d - mean_d - xhat.data()[at(k)] * mean_dh);
                        }
                    }
                }
                vec![Some(dx), Some(dgamma), Some(dbeta)]
            }),
        ))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let in_shape = self.shape();
        let out = self.to_tensor().reshape(shape.to_vec())?;
        Ok(self.tape.custom(
            &[self],
            out,
            Box::new(move |ctx| vec![Some(ctx.grad.clone().reshape(in_shape.clone()).unwrap())]),
        ))
    }

    /// Reorder axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(self, axes: &[usize]) -> Result<Var<'t>> {
        let shape = self.shape();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::contract(format!(
                "permute: {axes:?} is not a permutation of the axes of {shape:?}"
            )));
        }
        let out = permute_tensor(&self.value(), axes);
        let mut inverse = vec![0; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        Ok(self.tape.custom(
            &[self],
            out,
            Box::new(move |ctx| vec![Some(permute_tensor(ctx.grad, &inverse))]),
        ))
    }

    /// Slice `len` entries of `axis` starting at `start`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let shape = self.shape();
        check_axis("narrow", &shape, axis)?;
        if start + len > shape[axis] {
            return Err(Error::contract(format!(
                "narrow: range {start}..{} exceeds extent {} of axis {axis}",
                start + len,
                shape[axis]
            )));
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let out = {
            let x = self.value();
            let mut data = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let base = (o * n + start) * inner;
                data.extend_from_slice(&x.data()[base..base + len * inner]);
            }
            let mut out_shape = shape.clone();
            out_shape[axis] = len;
            Tensor::new(out_shape, data)?
        };
        Ok(self.tape.custom(
            &[self],
            out,
            Box::new(move |ctx| {
                let mut d = Tensor::zeros(shape.clone());
                for o in 0..outer {
                    let base = (o * n + start) * inner;
                    d.data_mut()[base..base + len * inner]
                        .copy_from_slice(&ctx.grad.data()[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(d)]
            }),
        ))
    }

    /// Gather entries of axis 0.
    pub fn index_select(self, indices: &[usize]) -> Result<Var<'t>> {
        let shape = self.shape();
        if shape.is_empty() {
            return Err(Error::contract("index_select on a scalar"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= shape[0]) {
            return Err(Error::contract(format!(
                "index_select: index {bad} out of range for extent {}",
                shape[0]
            )));
        }
        let row: usize = shape[1..].iter().product();
        let out = {
            let x = self.value();
            let mut data = Vec::with_capacity(indices.len() * row);
            for &i in indices {
                data.extend_from_slice(&x.data()[i * row..(i + 1) * row]);
            }
            let mut out_shape = shape.clone();
            out_shape[0] = indices.len();
            Tensor::new(out_shape, data)?
        };
        let indices = indices.to_vec();
        Ok(self.tape.custom(
            &[self],
            out,
            Box::new(move |ctx| {
                let mut d = Tensor::zeros(shape.clone());
                for (j, &i) in indices.iter().enumerate() {
                    let src = &ctx.grad.data()[j * row..(j + 1) * row];
                    for (a, b) in d.data_mut()[i * row..(i + 1) * row].iter_mut().zip(src) {
                        *a += b;
                    }
                }
                vec![Some(d)]
            }),
        ))
    }

    /// Join along `axis`; all other extents must agree.
    pub fn concat(vars: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = vars
            .first()
            .ok_or_else(|| Error::contract("concat of zero tensors"))?;
        let tape = first.tape;
        let shapes: Vec<Vec<usize>> = vars.iter().map(Var::shape).collect();
        check_axis("concat", &shapes[0], axis)?;
        for s in &shapes[1..] {
            let compatible = s.len() == shapes[0].len()
                && s.iter()
                    .zip(&shapes[0])
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &shapes[0], s));
            }
        }
        let extents: Vec<usize> = shapes.iter().map(|s| s[axis]).collect();
        let total: usize = extents.iter().sum();
        let (outer, _, inner) = axis_split(&shapes[0], axis);
        let out = {
            let mut data = Vec::with_capacity(outer * total * inner);
            let values: Vec<_> = vars.iter().map(|v| v.value()).collect();
            for o in 0..outer {
                for (v, &e) in values.iter().zip(&extents) {
                    data.extend_from_slice(&v.data()[o * e * inner..(o + 1) * e * inner]);
                }
            }
            let mut shape = shapes[0].clone();
            shape[axis] = total;
            Tensor::new(shape, data)?
        };
        Ok(tape.custom(
            vars,
            out,
            Box::new(move |ctx| {
                let mut grads: Vec<Vec<f64>> = extents
                    .iter()
                    .map(|&e| Vec::with_capacity(outer * e * inner))
                    .collect();
                let g = ctx.grad.data();
                let mut pos = 0;
                for _ in 0..outer {
                    for (gi, &e) in grads.iter_mut().zip(&extents) {
                        gi.extend_from_slice(&g[pos..pos + e * inner]);
                        pos += e * inner;
                    }
                }
                grads
                    .into_iter()
                    .zip(&shapes)
                    .map(|(d, s)| Some(Tensor::new(s.clone(), d).unwrap()))
                    .collect()
            }),
        ))
    }
}

pub(crate) fn softmax_forward(x: &Tensor, axis: usize) -> Tensor {
    let (outer, n, inner) = axis_split(x.shape(), axis);
    let mut out = x.clone();
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * n + k) * inner + i;
            let max = (0..n).map(|k| x.data()[at(k)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for k in 0..n {
                let e = (x.data()[at(k)] - max).exp();
                out.data_mut()[at(k)] = e;
                total += e;
            }
            for k in 0..n {
                out.data_mut()[at(k)] /= total;
            }
        }
    }
    out
}

pub(crate) fn permute_tensor(x: &Tensor, axes: &[usize]) -> Tensor {
    let in_strides = strides(x.shape());
    let out_shape: Vec<usize> = axes.iter().map(|&a| x.shape()[a]).collect();
    let eff: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n = x.numel();
    let mut data = Vec::with_capacity(n);
    let mut idx = vec![0usize; axes.len()];
    let mut src = 0usize;
    for _ in 0..n {
        data.push(x.data()[src]);
        for d in (0..axes.len()).rev() {
            idx[d] += 1;
            src += eff[d];
            if idx[d] < out_shape[d] {
                break;
            }
            src -= eff[d] * idx[d];
            idx[d] = 0;
        }
    }
    Tensor::new(out_shape, data).unwrap()
}

/// `out[m,n] += a[m,k] * b[k,n]` on raw row-major slices.
pub(crate) fn gemm_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m,k] += g[m,n] * b[k,n]^T`.
fn gemm_acc_bt(g: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            out[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `out[k,n] += a[m,k]^T * g[m,n]`.
fn gemm_acc_at(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

struct MatmulPlan {
    m: usize,
    k: usize,
    n: usize,
    out_shape: Vec<usize>,
    a_batch: Vec<usize>,
    b_batch: Vec<usize>,
}

fn matmul_plan(a: &[usize], b: &[usize]) -> Result<MatmulPlan> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::shape("matmul", a, b));
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != k2 {
        return Err(Error::shape("matmul", a, b));
    }
    let ba = &a[..a.len() - 2];
    let bb = &b[..b.len() - 2];
    let batch = broadcast_shapes(ba, bb).ok_or_else(|| Error::shape("matmul", a, b))?;
    let mut out_shape = batch.clone();
    out_shape.extend([m, n]);
    Ok(MatmulPlan {
        m,
        k,
        n,
        a_batch: broadcast_index_map(ba, &batch),
        b_batch: broadcast_index_map(bb, &batch),
        out_shape,
    })
}

pub(crate) fn matmul_forward(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let p = matmul_plan(a.shape(), b.shape())?;
    let (m, k, n) = (p.m, p.k, p.n);
    let mut out = vec![0.0; p.a_batch.len() * m * n];
    for (bi, (&ia, &ib)) in p.a_batch.iter().zip(&p.b_batch).enumerate() {
        gemm_acc(
            &a.data()[ia * m * k..(ia + 1) * m * k],
            &b.data()[ib * k * n..(ib + 1) * k * n],
            &mut out[bi * m * n..(bi + 1) * m * n],
            m,
            k,
            n,
        );
    }
    Tensor::new(p.out_shape, out)
}

fn matmul_backward(
    a: &Tensor,
    b: &Tensor,
    g: &Tensor,
    need_a: bool,
    need_b: bool,
) -> (Option<Tensor>, Option<Tensor>) {
    let p = matmul_plan(a.shape(), b.shape()).expect("validated in forward");
    let (m, k, n) = (p.m, p.k, p.n);
    let mut ga = need_a.then(|| Tensor::zeros(a.shape().to_vec()));
    let mut gb = need_b.then(|| Tensor::zeros(b.shape().to_vec()));
    for (bi, (&ia, &ib)) in p.a_batch.iter().zip(&p.b_batch).enumerate() {
        let gs = &g.data()[bi * m * n..(bi + 1) * m * n];
        if let Some(ga) = ga.as_mut() {
            gemm_acc_bt(
                gs,
                &b.data()[ib * k * n..(ib + 1) * k * n],
                &mut ga.data_mut()[ia * m * k..(ia + 1) * m * k],
                m,
                k,
                n,
            );
        }
        if let Some(gb) = gb.as_mut() {
            gemm_acc_at(
                &a.data()[ia * m * k..(ia + 1) * m * k],
                gs,
                &mut gb.data_mut()[ib * k * n..(ib + 1) * k * n],
                m,
                k,
                n,
            );
        }
    }
    (ga, gb)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_dot() {
        let tape = Tape::new();
        let i = tape.constant(t(&[2, 2], &[1., 0., 0., 1.]));
        let b = tape.constant(t(&[2, 2], &[5., 6., 7., 8.]));
        assert_eq!(i.matmul(b).unwrap().to_tensor().data(), &[5., 6., 7., 8.]);
        let r = tape.constant(t(&[1, 2], &[1., 2.]));
        let c = tape.constant(t(&[2, 1], &[3., 4.]));
        assert_eq!(r.matmul(c).unwrap().to_tensor().data(), &[11.]);
    }

    #[test]
    fn matmul_mismatch_names_both_shapes() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros([2, 3]));
        let b = tape.constant(Tensor::zeros([4, 5]));
        let err = a.matmul(b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4, 5]"), "{err}");
    }

    #[test]
    fn matmul_broadcasts_batch() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::from_fn([3, 2, 2], |i| i as f64));
        let b = tape.constant(t(&[2, 2], &[1., 0., 0., 1.]));
        let c = a.matmul(b).unwrap();
        assert_eq!(c.shape(), vec![3, 2, 2]);
        assert_eq!(c.to_tensor(), a.to_tensor());
    }

    #[test]
    fn softmax_symmetric_and_shift_invariant() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros([3]));
        for v in x.softmax(0).unwrap().to_tensor().data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let y = tape.constant(t(&[2], &[1000., 1000.]));
        assert_eq!(y.softmax(0).unwrap().to_tensor().data(), &[0.5, 0.5]);
    }

    #[test]
    fn sigmoid_saturates_without_overflow() {
        let tape = Tape::new();
        let x = tape.constant(t(&[4], &[0., 1000., -1000., -800.]));
        let y = x.sigmoid().to_tensor();
        assert_eq!(y.data()[0], 0.5);
        assert_eq!(y.data()[1], 1.0);
        assert_eq!(y.data()[2], 0.0);
        assert!(y.all_finite());
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::full([1, 4], 3.0));
        let g = tape.constant(Tensor::ones([4]));
        let b = tape.constant(Tensor::zeros([4]));
        let y = x.layer_norm(g, b, 1).unwrap().to_tensor();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layer_norm_rejects_bad_affine() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros([2, 4]));
        let g = tape.constant(Tensor::ones([3]));
        let b = tape.constant(Tensor::zeros([4]));
        assert!(x.layer_norm(g, b, 1).is_err());
    }

    #[test]
    fn backward_sum_and_square() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1., 2.]));
        let loss = x.mul(x).unwrap().sum_all();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2., 4.]);

        let tape = Tape::new();
        let x = tape.leaf(Tensor::zeros([2, 3, 2]));
        let loss = x.sum_all();
        let g = tape.backward(loss).unwrap();
        assert!(g.get(x).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn permute_and_narrow_and_concat() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_fn([2, 3], |i| i as f64));
        let p = x.permute(&[1, 0]).unwrap().to_tensor();
        assert_eq!(p.shape(), &[3, 2]);
        assert_eq!(p.data(), &[0., 3., 1., 4., 2., 5.]);
        let n = x.narrow(1, 1, 2).unwrap().to_tensor();
        assert_eq!(n.data(), &[1., 2., 4., 5.]);
        let c = Var::concat(&[x, x], 0).unwrap().to_tensor();
        assert_eq!(c.shape(), &[4, 3]);
        assert!(x.permute(&[0, 0]).is_err());
    }
}
