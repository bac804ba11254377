//! Differentiable primitives recorded on a [`Tape`](super::Tape).

use super::kernels::{self, ConvGeometry, MatRef};
use super::tape::Var;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn same_shape(a: &Tensor, b: &Tensor, op: &str) -> Result<()> {
    a.expect_same_shape(b, op)
}

fn elementwise(g: &Tensor, f: impl Fn(usize, f64) -> f64) -> Tensor {
    Tensor::raw(
        g.shape().to_vec(),
        g.data().iter().enumerate().map(|(i, &v)| f(i, v)).collect(),
    )
}

/// `sign` with `sign(0) = sign(-0.0) = +1`.
pub fn sign_value(v: f64) -> f64 {
    if v < 0.0 {
        -1.0
    } else {
        1.0
    }
}

/// Numerically stable `log(sum(exp(row)))`.
pub(crate) fn logsumexp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_row(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn logits_dims(t: &Tensor, op: &str) -> Result<(usize, usize)> {
    match t.shape() {
        [b, k] if *k > 0 => Ok((*b, *k)),
        s => Err(Error::Shape(format!("{op}: expected [batch, classes], got {s:?}"))),
    }
}

fn check_labels(labels: &[usize], batch: usize, classes: usize) -> Result<()> {
    if labels.len() != batch {
        return Err(Error::Shape(format!(
            "{} labels for a batch of {batch}",
            labels.len()
        )));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::LabelOutOfRange { label, classes });
    }
    Ok(())
}

impl<'t> Var<'t> {
    fn binary(
        self,
        other: Var<'t>,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
        backward: super::tape::BackwardFn,
    ) -> Result<Var<'t>> {
        let value = {
            let a = self.tape.value_ref(self.idx);
            let b = self.tape.value_ref(other.idx);
            same_shape(&a, &b, op)?;
            a.zip_map(&b, f)?
        };
        Ok(self.tape.push(op, value, &[self, other], backward))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(
            other,
            "add",
            |a, b| a + b,
            Box::new(|g, _, _, _| vec![Some(g.clone()), Some(g.clone())]),
        )
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(
            other,
            "sub",
            |a, b| a - b,
            Box::new(|g, _, _, _| vec![Some(g.clone()), Some(g.scale(-1.0))]),
        )
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(
            other,
            "mul",
            |a, b| a * b,
            Box::new(|g, inp, _, needs| {
                vec![
                    needs[0].then(|| elementwise(g, |i, v| v * inp[1].data()[i])),
                    needs[1].then(|| elementwise(g, |i, v| v * inp[0].data()[i])),
                ]
            }),
        )
    }

    /// Elementwise minimum; ties send the gradient to `self`.
    pub fn minimum(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(
            other,
            "minimum",
            f64::min,
            Box::new(|g, inp, _, _| {
                let (a, b) = (inp[0].data(), inp[1].data());
                vec![
                    Some(elementwise(g, |i, v| if a[i] <= b[i] { v } else { 0.0 })),
                    Some(elementwise(g, |i, v| if a[i] <= b[i] { 0.0 } else { v })),
                ]
            }),
        )
    }

    /// Elementwise maximum; ties send the gradient to `self`.
    pub fn maximum(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(
            other,
            "maximum",
            f64::max,
            Box::new(|g, inp, _, _| {
                let (a, b) = (inp[0].data(), inp[1].data());
                vec![
                    Some(elementwise(g, |i, v| if a[i] >= b[i] { v } else { 0.0 })),
                    Some(elementwise(g, |i, v| if a[i] >= b[i] { 0.0 } else { v })),
                ]
            }),
        )
    }

    /// `max(lo, min(self, hi))` elementwise. The gradient with respect to
    /// `self` is 1 where `lo <= self <= hi` (the boundary counts as inside)
    /// and 0 where the clamp is active.
    pub fn clamp(self, lo: Var<'t>, hi: Var<'t>) -> Result<Var<'t>> {
        let value = {
            let x = self.tape.value_ref(self.idx);
            let l = self.tape.value_ref(lo.idx);
            let h = self.tape.value_ref(hi.idx);
            same_shape(&x, &l, "clamp")?;
            same_shape(&x, &h, "clamp")?;
            let data = x
                .data()
                .iter()
                .zip(l.data().iter().zip(h.data()))
                .map(|(&v, (&l, &h))| v.min(h).max(l))
                .collect();
            Tensor::raw(x.shape().to_vec(), data)
        };
        Ok(self.tape.push(
            "clamp",
            value,
            &[self, lo, hi],
            Box::new(|g, inp, _, needs| {
                let (x, l, h) = (inp[0].data(), inp[1].data(), inp[2].data());
                vec![
                    needs[0].then(|| {
                        elementwise(g, |i, v| if x[i] >= l[i] && x[i] <= h[i] { v } else { 0.0 })
                    }),
                    needs[1].then(|| elementwise(g, |i, v| if x[i] < l[i] { v } else { 0.0 })),
                    needs[2].then(|| {
                        elementwise(g, |i, v| if x[i] > h[i] && x[i] >= l[i] { v } else { 0.0 })
                    }),
                ]
            }),
        ))
    }

    fn unary(
        self,
        op: &'static str,
        f: impl Fn(f64) -> f64,
        backward: super::tape::BackwardFn,
    ) -> Var<'t> {
        let value = self.tape.value_ref(self.idx).map(f);
        self.tape.push(op, value, &[self], backward)
    }

    pub fn scale(self, k: f64) -> Var<'t> {
        self.unary("scale", |v| v * k, Box::new(move |g, _, _, _| vec![Some(g.scale(k))]))
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(
            "relu",
            |v| v.max(0.0),
            Box::new(|g, inp, _, _| {
                let x = inp[0].data();
                vec![Some(elementwise(g, |i, v| if x[i] > 0.0 { v } else { 0.0 }))]
            }),
        )
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(
            "tanh",
            f64::tanh,
            Box::new(|g, _, out, _| {
                let y = out.data();
                vec![Some(elementwise(g, |i, v| v * (1.0 - y[i] * y[i])))]
            }),
        )
    }

    /// Elementwise sign with `sign(0) = 1`. Treated as a constant in the
    /// backward pass.
    pub fn sign(self) -> Var<'t> {
        self.unary("sign", sign_value, Box::new(|_, _, _, _| vec![None]))
    }

    pub fn sum(self) -> Var<'t> {
        let value = Tensor::scalar(self.tape.value_ref(self.idx).sum());
        self.tape.push(
            "sum",
            value,
            &[self],
            Box::new(|g, inp, _, _| vec![Some(Tensor::full(inp[0].shape().to_vec(), g.item()))]),
        )
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.tape.value_ref(self.idx).len().max(1) as f64;
        self.sum().scale(1.0 / n)
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Var<'t>> {
        let value = self.tape.value_ref(self.idx).reshape(shape)?;
        Ok(self.tape.push(
            "reshape",
            value,
            &[self],
            Box::new(|g, inp, _, _| {
                vec![Some(Tensor::raw(inp[0].shape().to_vec(), g.data().to_vec()))]
            }),
        ))
    }

    /// Collapses all but the leading axis.
    pub fn flatten(self) -> Result<Var<'t>> {
        let (b, n) = {
            let v = self.tape.value_ref(self.idx);
            (v.batch_size(), v.row_len())
        };
        self.reshape(vec![b, n])
    }

    pub fn transpose(self) -> Result<Var<'t>> {
        let value = {
            let v = self.tape.value_ref(self.idx);
            let [r, c] = v.shape() else {
                return Err(Error::Shape(format!("transpose of {:?}", v.shape())));
            };
            transpose2(v.data(), *r, *c)
        };
        Ok(self.tape.push(
            "transpose",
            value,
            &[self],
            Box::new(|g, _, _, _| {
                let (r, c) = (g.shape()[0], g.shape()[1]);
                vec![Some(transpose2(g.data(), r, c))]
            }),
        ))
    }

    /// `[m, k] x [k, n] -> [m, n]`
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let value = {
            let a = self.tape.value_ref(self.idx);
            let b = self.tape.value_ref(other.idx);
            let (&[m, k], &[k2, n]) = (a.shape(), b.shape()) else {
                return Err(Error::Shape(format!(
                    "matmul needs 2-D operands, got {:?} and {:?}",
                    a.shape(),
                    b.shape()
                )));
            };
            if k != k2 {
                return Err(Error::Shape(format!(
                    "matmul {:?} x {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
            let mut out = vec![0.0; m * n];
            kernels::gemm(MatRef::new(a.data(), m, k), MatRef::new(b.data(), k, n), &mut out, 0.0);
            Tensor::raw(vec![m, n], out)
        };
        Ok(self.tape.push(
            "matmul",
            value,
            &[self, other],
            Box::new(|g, inp, _, needs| {
                let (m, k) = (inp[0].shape()[0], inp[0].shape()[1]);
                let n = inp[1].shape()[1];
                let gm = MatRef::new(g.data(), m, n);
                let ga = needs[0].then(|| {
                    let mut out = vec![0.0; m * k];
                    kernels::gemm(gm, MatRef::new(inp[1].data(), k, n).t(), &mut out, 0.0);
                    Tensor::raw(vec![m, k], out)
                });
                let gb = needs[1].then(|| {
                    let mut out = vec![0.0; k * n];
                    kernels::gemm(MatRef::new(inp[0].data(), m, k).t(), gm, &mut out, 0.0);
                    Tensor::raw(vec![k, n], out)
                });
                vec![ga, gb]
            }),
        ))
    }

    /// Adds `bias[c]` to every element of channel `c` of a `[B, C, ...]` tensor.
    pub fn add_channel_bias(self, bias: Var<'t>) -> Result<Var<'t>> {
        let value = {
            let x = self.tape.value_ref(self.idx);
            let b = self.tape.value_ref(bias.idx);
            if x.shape().len() < 2 || b.shape() != [x.shape()[1]] {
                return Err(Error::Shape(format!(
                    "channel bias {:?} for input {:?}",
                    b.shape(),
                    x.shape()
                )));
            }
            let (c, spatial) = (x.shape()[1], x.shape()[2..].iter().product::<usize>());
            let mut out = x.data().to_vec();
            for (i, v) in out.iter_mut().enumerate() {
                *v += b.data()[(i / spatial) % c];
            }
            Tensor::raw(x.shape().to_vec(), out)
        };
        Ok(self.tape.push(
            "add_channel_bias",
            value,
            &[self, bias],
            Box::new(|g, inp, _, needs| {
                let c = inp[0].shape()[1];
                let spatial: usize = inp[0].shape()[2..].iter().product();
                let gb = needs[1].then(|| {
                    let mut acc = vec![0.0; c];
                    for (i, v) in g.data().iter().enumerate() {
                        acc[(i / spatial) % c] += v;
                    }
                    Tensor::raw(vec![c], acc)
                });
                vec![needs[0].then(|| g.clone()), gb]
            }),
        ))
    }

    /// Valid 2-D cross-correlation: `[B, C, H, W] * [O, C, k, k] -> [B, O, OH, OW]`.
    pub fn conv2d(self, weight: Var<'t>, stride: usize) -> Result<Var<'t>> {
        let (value, geom, out_channels) = {
            let x = self.tape.value_ref(self.idx);
            let w = self.tape.value_ref(weight.idx);
            let (&[batch, c, h, wd], &[o, wc, k1, k2]) = (x.shape(), w.shape()) else {
                return Err(Error::Shape(format!(
                    "conv2d input {:?} / weight {:?}",
                    x.shape(),
                    w.shape()
                )));
            };
            if wc != c || k1 != k2 || k1 == 0 || k1 > h || k1 > wd || stride == 0 {
                return Err(Error::Shape(format!(
                    "conv2d input {:?} / weight {:?} / stride {stride}",
                    x.shape(),
                    w.shape()
                )));
            }
            let geom = ConvGeometry {
                channels: c,
                height: h,
                width: wd,
                kernel: k1,
                stride,
            };
            let out = kernels::conv2d_forward(x.data(), batch, &geom, w.data(), o);
            (
                Tensor::raw(vec![batch, o, geom.out_height(), geom.out_width()], out),
                geom,
                o,
            )
        };
        Ok(self.tape.push(
            "conv2d",
            value,
            &[self, weight],
            Box::new(move |g, inp, _, needs| {
                let batch = inp[0].shape()[0];
                let (gx, gw) = kernels::conv2d_backward(
                    inp[0].data(),
                    batch,
                    &geom,
                    inp[1].data(),
                    out_channels,
                    g.data(),
                    needs[0],
                    needs[1],
                );
                vec![
                    gx.map(|d| Tensor::raw(inp[0].shape().to_vec(), d)),
                    gw.map(|d| Tensor::raw(inp[1].shape().to_vec(), d)),
                ]
            }),
        ))
    }

    /// Non-overlapping `size x size` max pooling over `[B, C, H, W]`.
    pub fn maxpool2d(self, size: usize) -> Result<Var<'t>> {
        let (value, argmax) = {
            let x = self.tape.value_ref(self.idx);
            let &[b, c, h, w] = x.shape() else {
                return Err(Error::Shape(format!("maxpool2d input {:?}", x.shape())));
            };
            if size == 0 || size > h || size > w {
                return Err(Error::Shape(format!("maxpool2d({size}) on {:?}", x.shape())));
            }
            let (out, arg) = kernels::maxpool2d_forward(x.data(), b * c, h, w, size);
            (Tensor::raw(vec![b, c, h / size, w / size], out), arg)
        };
        Ok(self.tape.push(
            "maxpool2d",
            value,
            &[self],
            Box::new(move |g, inp, _, _| {
                let mut gx = vec![0.0; inp[0].len()];
                for (&src, v) in argmax.iter().zip(g.data()) {
                    gx[src] += v;
                }
                vec![Some(Tensor::raw(inp[0].shape().to_vec(), gx))]
            }),
        ))
    }

    /// Per-example softmax cross-entropy of `[B, K]` logits; returns `[B]`.
    pub fn cross_entropy(self, labels: &[usize]) -> Result<Var<'t>> {
        let value = {
            let z = self.tape.value_ref(self.idx);
            let (b, k) = logits_dims(&z, "cross_entropy")?;
            check_labels(labels, b, k)?;
            let data = (0..b).map(|i| logsumexp(z.row(i)) - z.row(i)[labels[i]]).collect();
            Tensor::raw(vec![b], data)
        };
        let labels = labels.to_vec();
        Ok(self.tape.push(
            "cross_entropy",
            value,
            &[self],
            Box::new(move |g, inp, _, _| {
                let z = inp[0];
                let k = z.shape()[1];
                let mut out = Vec::with_capacity(z.len());
                for (i, &y) in labels.iter().enumerate() {
                    let mut p = softmax_row(z.row(i));
                    p[y] -= 1.0;
                    out.extend(p.into_iter().map(|v| v * g.data()[i]));
                }
                vec![Some(Tensor::raw(vec![labels.len(), k], out))]
            }),
        ))
    }

    /// Per-example `KL(softmax(self) || softmax(logits))`; returns `[B]`.
    /// `self` is the reference distribution's logits.
    pub fn kl_div(self, logits: Var<'t>) -> Result<Var<'t>> {
        let value = {
            let r = self.tape.value_ref(self.idx);
            let z = self.tape.value_ref(logits.idx);
            let (b, _) = logits_dims(&r, "kl_div")?;
            same_shape(&r, &z, "kl_div")?;
            let data = (0..b).map(|i| kl_row(r.row(i), z.row(i))).collect();
            Tensor::raw(vec![b], data)
        };
        Ok(self.tape.push(
            "kl_div",
            value,
            &[self, logits],
            Box::new(|g, inp, out, needs| {
                let (r, z) = (inp[0], inp[1]);
                let (b, k) = (r.shape()[0], r.shape()[1]);
                let mut gr = needs[0].then(|| Vec::with_capacity(b * k));
                let mut gz = needs[1].then(|| Vec::with_capacity(b * k));
                for i in 0..b {
                    let gi = g.data()[i];
                    let (lr, lz) = (logsumexp(r.row(i)), logsumexp(z.row(i)));
                    let kl = out.data()[i];
                    for (rv, zv) in r.row(i).iter().zip(z.row(i)) {
                        let (log_p, log_q) = (rv - lr, zv - lz);
                        let p = log_p.exp();
                        if let Some(gr) = gr.as_mut() {
                            gr.push(gi * p * ((log_p - log_q) - kl));
                        }
                        if let Some(gz) = gz.as_mut() {
                            gz.push(gi * (log_q.exp() - p));
                        }
                    }
                }
                vec![
                    gr.map(|d| Tensor::raw(vec![b, k], d)),
                    gz.map(|d| Tensor::raw(vec![b, k], d)),
                ]
            }),
        ))
    }

    /// Per-example clipped margin `max(z[y] - max_{j != y} z[j], -kappa)`; returns `[B]`.
    pub fn margin(self, labels: &[usize], kappa: f64) -> Result<Var<'t>> {
        let (value, runner_up) = {
            let z = self.tape.value_ref(self.idx);
            let (b, k) = logits_dims(&z, "margin")?;
            if k < 2 {
                return Err(Error::Shape("margin needs at least two classes".into()));
            }
            check_labels(labels, b, k)?;
            let mut vals = Vec::with_capacity(b);
            let mut other = Vec::with_capacity(b);
            for (i, &y) in labels.iter().enumerate() {
                let row = z.row(i);
                let j = (0..k)
                    .filter(|&j| j != y)
                    .fold(None, |best: Option<usize>, j| match best {
                        Some(bj) if row[bj] >= row[j] => Some(bj),
                        _ => Some(j),
                    })
                    .unwrap_or(0);
                vals.push((row[y] - row[j]).max(-kappa));
                other.push(j);
            }
            (Tensor::raw(vec![b], vals), other)
        };
        let labels = labels.to_vec();
        Ok(self.tape.push(
            "margin",
            value,
            &[self],
            Box::new(move |g, inp, _, _| {
                let z = inp[0];
                let k = z.shape()[1];
                let mut out = vec![0.0; z.len()];
                for (i, (&y, &j)) in labels.iter().zip(&runner_up).enumerate() {
                    if z.row(i)[y] - z.row(i)[j] >= -kappa {
                        out[i * k + y] += g.data()[i];
                        out[i * k + j] -= g.data()[i];
                    }
                }
                vec![Some(Tensor::raw(z.shape().to_vec(), out))]
            }),
        ))
    }
}

pub(crate) fn kl_row(ref_logits: &[f64], logits: &[f64]) -> f64 {
    let (lr, lz) = (logsumexp(ref_logits), logsumexp(logits));
    let kl: f64 = ref_logits
        .iter()
        .zip(logits)
        .map(|(r, z)| {
            let log_p = r - lr;
            log_p.exp() * (log_p - (z - lz))
        })
        .sum();
    // Rounding can leave a tiny negative value at p == q.
    kl.max(0.0)
}

fn transpose2(data: &[f64], r: usize, c: usize) -> Tensor {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = data[i * c + j];
        }
    }
    Tensor::raw(vec![c, r], out)
}
