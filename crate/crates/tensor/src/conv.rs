//! Small-kernel image ops on `[N, C, H, W]` tensors.

use crate::error::{dim_err, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub pad: usize,
}

impl Default for Conv2dSpec {
    fn default() -> Self {
        Conv2dSpec { stride: 1, pad: 1 }
    }
}

pub fn conv_out_extent(input: usize, kernel: usize, spec: Conv2dSpec) -> usize {
    (input + 2 * spec.pad).saturating_sub(kernel) / spec.stride + 1
}

/// Range of output columns `o` for which `o*stride + k - pad` lands in `[0, extent)`.
fn valid_range(out: usize, extent: usize, k: usize, spec: Conv2dSpec) -> (usize, usize) {
    let s = spec.stride as isize;
    let shift = k as isize - spec.pad as isize;
    // o*s + shift >= 0
    let lo = if shift >= 0 { 0 } else { ((-shift) + s - 1) / s };
    // o*s + shift <= extent-1
    let hi_excl = if (extent as isize - 1 - shift) < 0 {
        0
    } else {
        (extent as isize - 1 - shift) / s + 1
    };
    (lo as usize, (hi_excl as usize).min(out))
}

fn dims4(t: &Tensor, what: &str) -> Result<[usize; 4]> {
    match t.shape() {
        &[a, b, c, d] => Ok([a, b, c, d]),
        s => dim_err(format!("{what} expects [N,C,H,W], got {s:?}")),
    }
}

impl Tensor {
    /// 2-d cross-correlation with zero padding. `weight` is `[Co, Ci, KH, KW]`.
    pub fn conv2d(&self, weight: &Tensor, bias: Option<&Tensor>, spec: Conv2dSpec) -> Result<Tensor> {
        let [n, ci, h, w] = dims4(self, "conv2d input")?;
        let [co, wci, kh, kw] = dims4(weight, "conv2d weight")?;
        if wci != ci {
            return dim_err(format!("conv2d: input has {ci} channels, weight expects {wci}"));
        }
        if spec.stride == 0 {
            return dim_err("conv2d: stride must be ≥ 1");
        }
        if h + 2 * spec.pad < kh || w + 2 * spec.pad < kw {
            return dim_err("conv2d: kernel larger than padded input");
        }
        if let Some(b) = bias {
            if b.shape() != [co] {
                return dim_err(format!("conv2d bias {:?} must be [{co}]", b.shape()));
            }
        }
        let ho = conv_out_extent(h, kh, spec);
        let wo = conv_out_extent(w, kw, spec);
        let s = spec.stride;
        let x = self.data();
        let wt = weight.data();
        let mut out = vec![0.0; n * co * ho * wo];
        for b in 0..n {
            for o in 0..co {
                let plane = &mut out[(b * co + o) * ho * wo..(b * co + o + 1) * ho * wo];
                if let Some(bias) = bias {
                    plane.iter_mut().for_each(|v| *v = bias.data()[o]);
                }
                for c in 0..ci {
                    let xin = &x[(b * ci + c) * h * w..(b * ci + c + 1) * h * w];
                    for ky in 0..kh {
                        let (oy0, oy1) = valid_range(ho, h, ky, spec);
                        for kx in 0..kw {
                            let wv = wt[((o * ci + c) * kh + ky) * kw + kx];
                            let (ox0, ox1) = valid_range(wo, w, kx, spec);
                            for oy in oy0..oy1 {
                                let iy = oy * s + ky - spec.pad;
                                let orow = &mut plane[oy * wo..(oy + 1) * wo];
                                let xrow = &xin[iy * w..(iy + 1) * w];
                                for ox in ox0..ox1 {
                                    orow[ox] += wv * xrow[ox * s + kx - spec.pad];
                                }
                            }
                        }
                    }
                }
            }
        }
        let (xt, wtt) = (self.clone(), weight.clone());
        let has_bias = bias.is_some();
        let mut parents = vec![self.clone(), weight.clone()];
        if let Some(b) = bias {
            parents.push(b.clone());
        }
        Ok(Tensor::from_op(
            vec![n, co, ho, wo],
            out,
            parents,
            Box::new(move |g| {
                let x = xt.data();
                let wt = wtt.data();
                let want_x = xt.requires_grad();
                let want_w = wtt.requires_grad();
                let mut gx = vec![0.0; if want_x { x.len() } else { 0 }];
                let mut gw = vec![0.0; if want_w { wt.len() } else { 0 }];
                let mut gb = vec![0.0; co];
                for b in 0..n {
                    for o in 0..co {
                        let gplane = &g[(b * co + o) * ho * wo..(b * co + o + 1) * ho * wo];
                        gb[o] += gplane.iter().sum::<f64>();
                        for c in 0..ci {
                            let xoff = (b * ci + c) * h * w;
                            for ky in 0..kh {
                                let (oy0, oy1) = valid_range(ho, h, ky, spec);
                                for kx in 0..kw {
                                    let widx = ((o * ci + c) * kh + ky) * kw + kx;
                                    let wv = wt[widx];
                                    let (ox0, ox1) = valid_range(wo, w, kx, spec);
                                    let mut acc = 0.0;
                                    for oy in oy0..oy1 {
                                        let iy = oy * s + ky - spec.pad;
                                        let grow = &gplane[oy * wo..(oy + 1) * wo];
                                        let rbase = xoff + iy * w;
                                        for ox in ox0..ox1 {
                                            let ix = rbase + ox * s + kx - spec.pad;
                                            if want_w {
                                                acc += grow[ox] * x[ix];
                                            }
                                            if want_x {
                                                gx[ix] += grow[ox] * wv;
                                            }
                                        }
                                    }
                                    if want_w {
                                        gw[widx] += acc;
                                    }
                                }
                            }
                        }
                    }
                }
                let mut grads = vec![want_x.then_some(gx), want_w.then_some(gw)];
                if has_bias {
                    grads.push(Some(gb));
                }
                grads
            }),
        ))
    }

    /// Non-overlapping `k×k` mean pooling; extents must be divisible by `k`.
    pub fn avg_pool2d(&self, k: usize) -> Result<Tensor> {
        let [n, c, h, w] = dims4(self, "avg_pool2d")?;
        if k == 0 || h % k != 0 || w % k != 0 {
            return dim_err(format!("avg_pool2d: {h}×{w} not divisible by {k}"));
        }
        let (ho, wo) = (h / k, w / k);
        let inv = 1.0 / (k * k) as f64;
        let x = self.data();
        let mut out = vec![0.0; n * c * ho * wo];
        for p in 0..n * c {
            for y in 0..h {
                for xx in 0..w {
                    out[p * ho * wo + (y / k) * wo + xx / k] += x[p * h * w + y * w + xx] * inv;
                }
            }
        }
        Ok(Tensor::from_op(
            vec![n, c, ho, wo],
            out,
            vec![self.clone()],
            Box::new(move |g| {
                let mut gx = vec![0.0; n * c * h * w];
                for p in 0..n * c {
                    for y in 0..h {
                        for xx in 0..w {
                            gx[p * h * w + y * w + xx] = g[p * ho * wo + (y / k) * wo + xx / k] * inv;
                        }
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Nearest-neighbour resampling to `(out_h, out_w)`; source index is
    /// `floor(i · in / out)`.
    pub fn resize_nearest(&self, out_h: usize, out_w: usize) -> Result<Tensor> {
        let [n, c, h, w] = dims4(self, "resize_nearest")?;
        if out_h == 0 || out_w == 0 {
            return dim_err("resize_nearest to empty extent");
        }
        let ys: Vec<usize> = (0..out_h).map(|i| i * h / out_h).collect();
        let xs: Vec<usize> = (0..out_w).map(|j| j * w / out_w).collect();
        let x = self.data();
        let mut out = Vec::with_capacity(n * c * out_h * out_w);
        for p in 0..n * c {
            for &sy in &ys {
                for &sx in &xs {
                    out.push(x[p * h * w + sy * w + sx]);
                }
            }
        }
        Ok(Tensor::from_op(
            vec![n, c, out_h, out_w],
            out,
            vec![self.clone()],
            Box::new(move |g| {
                let mut gx = vec![0.0; n * c * h * w];
                let mut idx = 0;
                for p in 0..n * c {
                    for &sy in &ys {
                        for &sx in &xs {
                            gx[p * h * w + sy * w + sx] += g[idx];
                            idx += 1;
                        }
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }
}
