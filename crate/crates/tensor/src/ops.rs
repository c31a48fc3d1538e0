//! Differentiable elementwise, reduction, shape and matrix ops.

use crate::error::{dim_err, Result, TensorError};
use crate::fault;
use crate::tensor::{numel, Tensor};

fn same_shape(a: &Tensor, b: &Tensor, op: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return dim_err(format!("{op}: shapes {:?} and {:?} differ", a.shape(), b.shape()));
    }
    Ok(())
}

fn check_axis(t: &Tensor, axis: usize) -> Result<()> {
    if axis >= t.ndim() {
        return dim_err(format!("axis {axis} out of range for shape {:?}", t.shape()));
    }
    Ok(())
}

/// (outer, extent, inner) strides for iterating over one axis.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Tensor {
    fn unary(
        &self,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
    ) -> Tensor {
        let out: Vec<f64> = self.data().iter().map(|&x| f(x)).collect();
        let x = self.clone();
        let y = out.clone();
        Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |g| {
                let gx = g
                    .iter()
                    .zip(x.data())
                    .zip(&y)
                    .map(|((g, &xi), &yi)| g * df(xi, yi))
                    .collect();
                vec![Some(gx)]
            }),
        )
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        same_shape(self, other, "add")?;
        let out = self.data().iter().zip(other.data()).map(|(a, b)| a + b).collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone(), other.clone()],
            Box::new(|g| vec![Some(g.to_vec()), Some(g.to_vec())]),
        ))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        same_shape(self, other, "sub")?;
        let out = self.data().iter().zip(other.data()).map(|(a, b)| a - b).collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone(), other.clone()],
            Box::new(|g| vec![Some(g.to_vec()), Some(g.iter().map(|v| -v).collect())]),
        ))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        same_shape(self, other, "mul")?;
        let out = self.data().iter().zip(other.data()).map(|(a, b)| a * b).collect();
        let (a, b) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                let ga = g.iter().zip(b.data()).map(|(g, b)| g * b).collect();
                let gb = g.iter().zip(a.data()).map(|(g, a)| g * a).collect();
                vec![Some(ga), Some(gb)]
            }),
        ))
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        same_shape(self, other, "div")?;
        let out: Vec<f64> = self.data().iter().zip(other.data()).map(|(a, b)| a / b).collect();
        let (b, y) = (other.clone(), out.clone());
        Tensor::from_op_checked(
            "div",
            self.shape().to_vec(),
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                let ga = g.iter().zip(b.data()).map(|(g, b)| g / b).collect();
                let gb = g
                    .iter()
                    .zip(b.data())
                    .zip(&y)
                    .map(|((g, b), y)| -g * y / b)
                    .collect();
                vec![Some(ga), Some(gb)]
            }),
        )
    }

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.unary(|x| c * x, move |_, _| c)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        self.unary(|x| x + c, |_, _| 1.0)
    }

    pub fn square(&self) -> Tensor {
        self.unary(|x| x * x, |x, _| 2.0 * x)
    }

    /// Subgradient 0 at the origin.
    pub fn abs(&self) -> Tensor {
        self.unary(f64::abs, |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    pub fn sqrt(&self) -> Result<Tensor> {
        if self.data().iter().any(|&x| x < 0.0) {
            return Err(TensorError::NonFinite("sqrt of negative value"));
        }
        let t = self.unary(f64::sqrt, |_, y| 0.5 / y);
        Ok(t)
    }

    pub fn exp(&self) -> Result<Tensor> {
        let t = self.unary(f64::exp, |_, y| y);
        if t.data().iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite("exp"));
        }
        Ok(t)
    }

    pub fn ln(&self) -> Result<Tensor> {
        if self.data().iter().any(|&x| x <= 0.0) {
            return Err(TensorError::NonFinite("ln of non-positive value"));
        }
        Ok(self.unary(f64::ln, |x, _| 1.0 / x))
    }

    pub fn sigmoid(&self) -> Tensor {
        self.unary(stable_sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn tanh(&self) -> Tensor {
        self.unary(f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn relu(&self) -> Tensor {
        self.unary(|x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn leaky_relu(&self, slope: f64) -> Tensor {
        self.unary(
            move |x| if x > 0.0 { x } else { slope * x },
            move |x, _| if x > 0.0 { 1.0 } else { slope },
        )
    }

    /// x·σ(x)
    pub fn silu(&self) -> Tensor {
        self.unary(
            |x| x * stable_sigmoid(x),
            |x, _| {
                let s = stable_sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            },
        )
    }

    /// Elementwise sigmoid cross-entropy against a constant label,
    /// `max(x,0) − x·y + ln(1 + e^{−|x|})`.
    pub fn bce_with_logits(&self, label: f64) -> Tensor {
        self.unary(
            move |x| x.max(0.0) - x * label + (-x.abs()).exp().ln_1p(),
            move |x, _| stable_sigmoid(x) - label,
        )
    }

    /// Sum of all elements as a 0-d tensor.
    pub fn sum(&self) -> Tensor {
        let s = self.data().iter().sum();
        let n = self.len();
        Tensor::from_op(
            Vec::new(),
            vec![s],
            vec![self.clone()],
            Box::new(move |g| vec![Some(vec![g[0]; n])]),
        )
    }

    pub fn mean(&self) -> Tensor {
        let n = self.len().max(1) as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sum over the last axis.
    pub fn sum_last(&self) -> Result<Tensor> {
        if self.ndim() == 0 {
            return dim_err("sum_last on 0-d tensor");
        }
        let k = *self.shape().last().unwrap();
        let rows = self.len() / k.max(1);
        let out = if k == 0 {
            vec![0.0; rows]
        } else {
            self.data().chunks(k).map(|r| r.iter().sum()).collect()
        };
        let shape = self.shape()[..self.ndim() - 1].to_vec();
        Ok(Tensor::from_op(
            shape,
            out,
            vec![self.clone()],
            Box::new(move |g| {
                let mut gx = Vec::with_capacity(rows * k);
                for &gi in g {
                    gx.extend(std::iter::repeat_n(gi, k));
                }
                vec![Some(gx)]
            }),
        ))
    }

    pub fn mean_last(&self) -> Result<Tensor> {
        let k = *self.shape().last().unwrap_or(&1);
        Ok(self.sum_last()?.scale(1.0 / k.max(1) as f64))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.len() {
            return dim_err(format!("cannot reshape {:?} into {:?}", self.shape(), shape));
        }
        Ok(Tensor::from_op(
            shape.to_vec(),
            self.to_vec(),
            vec![self.clone()],
            Box::new(|g| vec![Some(g.to_vec())]),
        ))
    }

    /// Transpose of a 2-d tensor.
    pub fn transpose(&self) -> Result<Tensor> {
        if self.ndim() != 2 {
            return dim_err(format!("transpose expects 2-d, got {:?}", self.shape()));
        }
        let (r, c) = (self.shape()[0], self.shape()[1]);
        let out = transpose_buf(self.data(), r, c);
        Ok(Tensor::from_op(
            vec![c, r],
            out,
            vec![self.clone()],
            Box::new(move |g| vec![Some(transpose_buf(g, c, r))]),
        ))
    }

    /// Contiguous sub-range `[start, start+len)` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        check_axis(self, axis)?;
        if start + len > self.shape()[axis] {
            return dim_err(format!(
                "slice {start}..{} exceeds extent {} on axis {axis}",
                start + len,
                self.shape()[axis]
            ));
        }
        let (outer, extent, inner) = axis_split(self.shape(), axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * extent * inner + start * inner;
            out.extend_from_slice(&self.data()[base..base + len * inner]);
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        let total = self.len();
        Ok(Tensor::from_op(
            shape,
            out,
            vec![self.clone()],
            Box::new(move |g| {
                let mut gx = vec![0.0; total];
                for o in 0..outer {
                    let base = o * extent * inner + start * inner;
                    gx[base..base + len * inner]
                        .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Drops the leading axis by selecting entry `i`.
    pub fn index0(&self, i: usize) -> Result<Tensor> {
        let s = self.slice(0, i, 1)?;
        s.reshape(&self.shape()[1..])
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(parts: &[Tensor], axis: usize) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Dimension("concat of zero tensors".into()))?;
        check_axis(first, axis)?;
        for p in parts {
            let ok = p.ndim() == first.ndim()
                && p.shape()
                    .iter()
                    .zip(first.shape())
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return dim_err(format!(
                    "concat on axis {axis}: {:?} incompatible with {:?}",
                    p.shape(),
                    first.shape()
                ));
            }
        }
        let (outer, _, inner) = axis_split(first.shape(), axis);
        let extents: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let total_extent: usize = extents.iter().sum();
        let mut out = Vec::with_capacity(outer * total_extent * inner);
        for o in 0..outer {
            for (p, &e) in parts.iter().zip(&extents) {
                out.extend_from_slice(&p.data()[o * e * inner..(o + 1) * e * inner]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total_extent;
        let ext = extents.clone();
        Ok(Tensor::from_op(
            shape,
            out,
            parts.to_vec(),
            Box::new(move |g| {
                let mut grads: Vec<Vec<f64>> =
                    ext.iter().map(|&e| Vec::with_capacity(outer * e * inner)).collect();
                let mut pos = 0;
                for _ in 0..outer {
                    for (gp, &e) in grads.iter_mut().zip(&ext) {
                        gp.extend_from_slice(&g[pos..pos + e * inner]);
                        pos += e * inner;
                    }
                }
                grads.into_iter().map(Some).collect()
            }),
        ))
    }

    /// Stacks equally-shaped tensors along a new leading axis.
    pub fn stack(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Dimension("stack of zero tensors".into()))?;
        let mut shape = vec![1];
        shape.extend_from_slice(first.shape());
        let lifted = parts
            .iter()
            .map(|p| {
                if p.shape() != first.shape() {
                    return dim_err(format!("stack: {:?} vs {:?}", p.shape(), first.shape()));
                }
                p.reshape(&shape)
            })
            .collect::<Result<Vec<_>>>()?;
        Tensor::concat(&lifted, 0)
    }

    /// `self + b` where `b` matches the trailing axes of `self`.
    pub fn add_suffix(&self, b: &Tensor) -> Result<Tensor> {
        let k = suffix_len(self, b)?;
        let out = self
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + b.data()[i % k])
            .collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone(), b.clone()],
            Box::new(move |g| {
                let mut gb = vec![0.0; k];
                for (i, gi) in g.iter().enumerate() {
                    gb[i % k] += gi;
                }
                vec![Some(g.to_vec()), Some(gb)]
            }),
        ))
    }

    /// `self * b` where `b` matches the trailing axes of `self`.
    pub fn mul_suffix(&self, b: &Tensor) -> Result<Tensor> {
        let k = suffix_len(self, b)?;
        let out = self
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x * b.data()[i % k])
            .collect();
        let (x, bb) = (self.clone(), b.clone());
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone(), b.clone()],
            Box::new(move |g| {
                let mut gb = vec![0.0; k];
                let mut gx = Vec::with_capacity(g.len());
                for (i, gi) in g.iter().enumerate() {
                    gx.push(gi * bb.data()[i % k]);
                    gb[i % k] += gi * x.data()[i];
                }
                vec![Some(gx), Some(gb)]
            }),
        ))
    }

    /// `self + b` where `b` matches the leading axes of `self`.
    pub fn add_prefix(&self, b: &Tensor) -> Result<Tensor> {
        if b.ndim() > self.ndim() || b.shape() != &self.shape()[..b.ndim()] {
            return dim_err(format!(
                "add_prefix: {:?} is not a leading sub-shape of {:?}",
                b.shape(),
                self.shape()
            ));
        }
        let inner = self.len() / b.len().max(1);
        let out = self
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + b.data()[i / inner])
            .collect();
        let nb = b.len();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone(), b.clone()],
            Box::new(move |g| {
                let gb = (0..nb)
                    .map(|j| g[j * inner..(j + 1) * inner].iter().sum())
                    .collect();
                vec![Some(g.to_vec()), Some(gb)]
            }),
        ))
    }

    /// Matrix product of 2-d tensors.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.ndim() != 2 || other.ndim() != 2 || self.shape()[1] != other.shape()[0] {
            return dim_err(format!(
                "matmul: {:?} × {:?}",
                self.shape(),
                other.shape()
            ));
        }
        let (m, k, n) = (self.shape()[0], self.shape()[1], other.shape()[1]);
        let out = matmul_buf(self.data(), other.data(), m, k, n);
        let (a, b) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            vec![m, n],
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                let ga = a
                    .requires_grad()
                    .then(|| matmul_buf(g, &transpose_buf(b.data(), k, n), m, n, k));
                let gb = b
                    .requires_grad()
                    .then(|| matmul_buf(&transpose_buf(a.data(), m, k), g, k, m, n));
                vec![ga, gb]
            }),
        ))
    }

    /// Softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        check_axis(self, axis)?;
        if self.shape()[axis] == 0 {
            return dim_err("softmax over empty axis");
        }
        let (outer, extent, inner) = axis_split(self.shape(), axis);
        let mut out = vec![0.0; self.len()];
        let x = self.data();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |e: usize| o * extent * inner + e * inner + i;
                let max = (0..extent).map(|e| x[idx(e)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for e in 0..extent {
                    let v = (x[idx(e)] - max).exp();
                    out[idx(e)] = v;
                    z += v;
                }
                for e in 0..extent {
                    out[idx(e)] /= z;
                }
            }
        }
        let y = out.clone();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |g| {
                let mut gx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |e: usize| o * extent * inner + e * inner + i;
                        let dot: f64 = (0..extent).map(|e| g[idx(e)] * y[idx(e)]).sum();
                        for e in 0..extent {
                            gx[idx(e)] = y[idx(e)] * (g[idx(e)] - dot);
                        }
                    }
                }
                if fault::softmax_backward_flipped() {
                    gx.iter_mut().for_each(|v| *v = -*v);
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Normalizes each row of the last axis to zero mean / unit variance
    /// (biased variance), then applies `scale` and `offset`.
    pub fn layer_norm(&self, scale: &Tensor, offset: &Tensor, eps: f64) -> Result<Tensor> {
        let k = *self
            .shape()
            .last()
            .ok_or_else(|| TensorError::Dimension("layer_norm on 0-d tensor".into()))?;
        if k == 0 {
            return dim_err("layer_norm over zero-length row");
        }
        if scale.shape() != [k] || offset.shape() != [k] {
            return dim_err(format!(
                "layer_norm: scale {:?} / offset {:?} must be [{k}]",
                scale.shape(),
                offset.shape()
            ));
        }
        let rows = self.len() / k;
        let mut xhat = vec![0.0; self.len()];
        let mut inv_std = vec![0.0; rows];
        for (r, row) in self.data().chunks(k).enumerate() {
            let mean = row.iter().sum::<f64>() / k as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / k as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for (j, v) in row.iter().enumerate() {
                xhat[r * k + j] = (v - mean) * is;
            }
        }
        let out = xhat
            .iter()
            .enumerate()
            .map(|(i, xh)| xh * scale.data()[i % k] + offset.data()[i % k])
            .collect();
        let sc = scale.clone();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone(), scale.clone(), offset.clone()],
            Box::new(move |g| {
                let mut gx = vec![0.0; g.len()];
                let mut gs = vec![0.0; k];
                let mut go = vec![0.0; k];
                for r in 0..rows {
                    let gr = &g[r * k..(r + 1) * k];
                    let xr = &xhat[r * k..(r + 1) * k];
                    let mut dxh = vec![0.0; k];
                    for j in 0..k {
                        gs[j] += gr[j] * xr[j];
                        go[j] += gr[j];
                        dxh[j] = gr[j] * sc.data()[j];
                    }
                    let m1 = dxh.iter().sum::<f64>() / k as f64;
                    let m2 = dxh.iter().zip(xr).map(|(d, x)| d * x).sum::<f64>() / k as f64;
                    for j in 0..k {
                        gx[r * k + j] = inv_std[r] * (dxh[j] - m1 - xr[j] * m2);
                    }
                }
                vec![Some(gx), Some(gs), Some(go)]
            }),
        ))
    }
}

fn suffix_len(a: &Tensor, b: &Tensor) -> Result<usize> {
    let nb = b.ndim();
    if nb > a.ndim() || b.shape() != &a.shape()[a.ndim() - nb..] || b.is_empty() {
        return dim_err(format!(
            "{:?} is not a trailing sub-shape of {:?}",
            b.shape(),
            a.shape()
        ));
    }
    Ok(b.len())
}

pub(crate) fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn transpose_buf(x: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = x[i * c + j];
        }
    }
    out
}

/// Row-major `[m,k] × [k,n]`.
pub(crate) fn matmul_buf(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}
