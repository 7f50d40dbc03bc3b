//! Elementwise, reduction, and shape ops.

use std::sync::Arc;

use crate::tensor::gemm;
use crate::{Graph, Tensor, Var};

fn same_shape(op: &str, a: &Tensor, b: &Tensor) {
    assert_eq!(
        a.shape(),
        b.shape(),
        "{op}: shape mismatch {:?} vs {:?}",
        a.shape(),
        b.shape()
    );
}

impl Graph<'_> {
    pub fn add(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape("add", &va, &vb);
        let out = va.zip_map(&vb, |x, y| x + y);
        self.push_op(out, &[a, b], || {
            Box::new(|g| vec![Some(g.clone()), Some(g.clone())])
        })
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape("sub", &va, &vb);
        let out = va.zip_map(&vb, |x, y| x - y);
        self.push_op(out, &[a, b], || {
            Box::new(|g| vec![Some(g.clone()), Some(g.map(|v| -v))])
        })
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape("mul", &va, &vb);
        let out = va.zip_map(&vb, |x, y| x * y);
        self.push_op(out, &[a, b], move || {
            Box::new(move |g| {
                vec![
                    Some(g.zip_map(&vb, |gi, y| gi * y)),
                    Some(g.zip_map(&va, |gi, x| gi * x)),
                ]
            })
        })
    }

    pub fn add_scalar(&self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x + s);
        self.push_op(out, &[a], || Box::new(|g| vec![Some(g.clone())]))
    }

    pub fn mul_scalar(&self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        self.push_op(out, &[a], move || Box::new(move |g| vec![Some(g.map(|v| v * s))]))
    }

    pub fn neg(&self, a: Var) -> Var {
        self.mul_scalar(a, -1.0)
    }

    pub fn square(&self, a: Var) -> Var {
        let va = self.value(a);
        let out = va.map(|x| x * x);
        self.push_op(out, &[a], move || {
            Box::new(move |g| vec![Some(g.zip_map(&va, |gi, x| 2.0 * gi * x))])
        })
    }

    pub fn exp(&self, a: Var) -> Var {
        let out = Arc::new(self.value(a).map(f64::exp));
        let saved = Arc::clone(&out);
        self.push_op(out, &[a], move || {
            Box::new(move |g| vec![Some(g.zip_map(&saved, |gi, y| gi * y))])
        })
    }

    /// `ln(max(x, eps))`; the gradient is zero where the clamp is active.
    pub fn ln_clamped(&self, a: Var, eps: f64) -> Var {
        let va = self.value(a);
        let out = va.map(|x| x.max(eps).ln());
        self.push_op(out, &[a], move || {
            Box::new(move |g| {
                vec![Some(g.zip_map(&va, |gi, x| if x > eps { gi / x } else { 0.0 }))]
            })
        })
    }

    pub fn relu(&self, a: Var) -> Var {
        let va = self.value(a);
        let out = va.map(|x| x.max(0.0));
        self.push_op(out, &[a], move || {
            Box::new(move |g| vec![Some(g.zip_map(&va, |gi, x| if x > 0.0 { gi } else { 0.0 }))])
        })
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        let out = Arc::new(self.value(a).map(sigmoid));
        let saved = Arc::clone(&out);
        self.push_op(out, &[a], move || {
            Box::new(move |g| vec![Some(g.zip_map(&saved, |gi, y| gi * y * (1.0 - y)))])
        })
    }

    /// `|x|` with subgradient 0 at the origin.
    pub fn abs(&self, a: Var) -> Var {
        let va = self.value(a);
        let out = va.map(f64::abs);
        self.push_op(out, &[a], move || {
            Box::new(move |g| {
                vec![Some(g.zip_map(&va, |gi, x| {
                    if x > 0.0 {
                        gi
                    } else if x < 0.0 {
                        -gi
                    } else {
                        0.0
                    }
                }))]
            })
        })
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&self, a: Var) -> Var {
        let va = self.value(a);
        let shape = va.shape().to_vec();
        let out = Tensor::scalar(va.sum());
        self.push_op(out, &[a], move || {
            Box::new(move |g| vec![Some(Tensor::full(&shape, g.item()))])
        })
    }

    pub fn mean(&self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.mul_scalar(s, 1.0 / n)
    }

    /// Multiplies each `(n, c)` plane of `x: [N, C, ...]` by `gates[n, c]`.
    pub fn scale_channels(&self, x: Var, gates: Var) -> Var {
        let (vx, vg) = (self.value(x), self.value(gates));
        let (n, c) = (vx.shape()[0], vx.shape()[1]);
        assert_eq!(vg.shape(), &[n, c], "scale_channels: gates {:?}", vg.shape());
        let plane = vx.len() / (n * c);
        let mut out = (*vx).clone();
        for (i, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
            let s = vg.data()[i];
            chunk.iter_mut().for_each(|v| *v *= s);
        }
        self.push_op(out, &[x, gates], move || {
            Box::new(move |g| {
                let mut gx = g.clone();
                let mut gg = Tensor::zeros(vg.shape());
                for (i, (gchunk, xchunk)) in gx
                    .data_mut()
                    .chunks_mut(plane)
                    .zip(vx.data().chunks(plane))
                    .enumerate()
                {
                    let s = vg.data()[i];
                    gg.data_mut()[i] = gchunk.iter().zip(xchunk).map(|(a, b)| a * b).sum();
                    gchunk.iter_mut().for_each(|v| *v *= s);
                }
                vec![Some(gx), Some(gg)]
            })
        })
    }

    /// Tiles `z: [N, L]` over an `h × w` grid, giving `[N, L, h, w]`.
    pub fn broadcast_spatial(&self, z: Var, h: usize, w: usize) -> Var {
        let vz = self.value(z);
        let (n, l) = vz.dims2().expect("broadcast_spatial expects [N, L]");
        let plane = h * w;
        let mut data = Vec::with_capacity(n * l * plane);
        for &v in vz.data() {
            data.extend(std::iter::repeat_n(v, plane));
        }
        let out = Tensor::new(&[n, l, h, w], data).expect("sized above");
        self.push_op(out, &[z], move || {
            Box::new(move |g| {
                let sums = g.data().chunks(plane).map(|c| c.iter().sum()).collect();
                vec![Some(Tensor::new(&[n, l], sums).expect("sized"))]
            })
        })
    }

    /// Concatenation along axis 1.
    pub fn concat_channels(&self, parts: &[Var]) -> Var {
        let values: Vec<Arc<Tensor>> = parts.iter().map(|&p| self.value(p)).collect();
        let refs: Vec<&Tensor> = values.iter().map(|v| v.as_ref()).collect();
        let out = Tensor::concat_channels(&refs).unwrap_or_else(|e| panic!("{e}"));
        let shapes: Vec<Vec<usize>> = values.iter().map(|v| v.shape().to_vec()).collect();
        self.push_op(out, parts, move || {
            Box::new(move |g| {
                let n = shapes[0][0];
                let mut outs: Vec<Vec<f64>> = shapes
                    .iter()
                    .map(|s| Vec::with_capacity(s.iter().product()))
                    .collect();
                let per_item: Vec<usize> =
                    shapes.iter().map(|s| s[1..].iter().product()).collect();
                let mut offset = 0;
                for _ in 0..n {
                    for (o, &len) in outs.iter_mut().zip(&per_item) {
                        o.extend_from_slice(&g.data()[offset..offset + len]);
                        offset += len;
                    }
                }
                outs.into_iter()
                    .zip(&shapes)
                    .map(|(d, s)| Some(Tensor::new(s, d).expect("sized")))
                    .collect()
            })
        })
    }

    /// Channels `start..start + len` of `x` along axis 1.
    pub fn narrow_channels(&self, x: Var, start: usize, len: usize) -> Var {
        let vx = self.value(x);
        let shape = vx.shape().to_vec();
        let (n, c) = (shape[0], shape[1]);
        assert!(start + len <= c, "narrow_channels out of range");
        let inner: usize = shape[2..].iter().product();
        let mut data = Vec::with_capacity(n * len * inner);
        for b in 0..n {
            let base = (b * c + start) * inner;
            data.extend_from_slice(&vx.data()[base..base + len * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[1] = len;
        let out = Tensor::new(&out_shape, data).expect("sized");
        self.push_op(out, &[x], move || {
            Box::new(move |g| {
                let mut gx = Tensor::zeros(&shape);
                for b in 0..n {
                    let src = b * len * inner;
                    let dst = (b * c + start) * inner;
                    gx.data_mut()[dst..dst + len * inner]
                        .copy_from_slice(&g.data()[src..src + len * inner]);
                }
                vec![Some(gx)]
            })
        })
    }

    /// Repeats every batch item `times` times in place: item `b` lands at
    /// rows `b * times .. (b + 1) * times`.
    pub fn repeat_batch(&self, x: Var, times: usize) -> Var {
        assert!(times >= 1, "repeat_batch: times must be positive");
        let vx = self.value(x);
        let shape = vx.shape().to_vec();
        let n = shape[0];
        let item = vx.len() / n.max(1);
        let mut data = Vec::with_capacity(vx.len() * times);
        for b in 0..n {
            for _ in 0..times {
                data.extend_from_slice(vx.batch_item(b));
            }
        }
        let mut out_shape = shape.clone();
        out_shape[0] = n * times;
        let out = Tensor::new(&out_shape, data).expect("sized");
        self.push_op(out, &[x], move || {
            Box::new(move |g| {
                let mut gx = Tensor::zeros(&shape);
                for (row, chunk) in g.data().chunks(item).enumerate() {
                    let b = row / times;
                    let dst = &mut gx.data_mut()[b * item..(b + 1) * item];
                    dst.iter_mut().zip(chunk).for_each(|(d, s)| *d += s);
                }
                vec![Some(gx)]
            })
        })
    }

    /// Softmax over axis 1 of `[N, C, H, W]`.
    pub fn softmax_channels(&self, x: Var) -> Var {
        let vx = self.value(x);
        let (n, c, h, w) = vx.dims4().expect("softmax_channels expects NCHW");
        let plane = h * w;
        let mut out = Tensor::zeros(vx.shape());
        for b in 0..n {
            let src = vx.batch_item(b);
            let dst = &mut out.data_mut()[b * c * plane..(b + 1) * c * plane];
            for p in 0..plane {
                let max = (0..c).map(|k| src[k * plane + p]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for k in 0..c {
                    let e = (src[k * plane + p] - max).exp();
                    dst[k * plane + p] = e;
                    total += e;
                }
                for k in 0..c {
                    dst[k * plane + p] /= total;
                }
            }
        }
        let out = Arc::new(out);
        let saved = Arc::clone(&out);
        self.push_op(out, &[x], move || {
            Box::new(move |g| {
                let mut gx = Tensor::zeros(saved.shape());
                for b in 0..n {
                    let off = b * c * plane;
                    for p in 0..plane {
                        let dot: f64 = (0..c)
                            .map(|k| g.data()[off + k * plane + p] * saved.data()[off + k * plane + p])
                            .sum();
                        for k in 0..c {
                            let i = off + k * plane + p;
                            gx.data_mut()[i] = saved.data()[i] * (g.data()[i] - dot);
                        }
                    }
                }
                vec![Some(gx)]
            })
        })
    }

    /// `x @ wᵀ + b` for `x: [N, I]`, `w: [O, I]`, `b: [O]`.
    pub fn linear(&self, x: Var, weight: Var, bias: Var) -> Var {
        let (vx, vw, vb) = (self.value(x), self.value(weight), self.value(bias));
        let (n, i) = vx.dims2().expect("linear input [N, I]");
        let (o, wi) = vw.dims2().expect("linear weight [O, I]");
        assert_eq!(i, wi, "linear: input width {i} vs weight {wi}");
        assert_eq!(vb.shape(), &[o]);
        let mut out = vec![0.0; n * o];
        for row in out.chunks_mut(o) {
            row.copy_from_slice(vb.data());
        }
        gemm(n, i, o, vx.data(), false, vw.data(), true, 1.0, &mut out);
        let out = Tensor::new(&[n, o], out).expect("sized");
        self.push_op(out, &[x, weight, bias], move || {
            Box::new(move |g| {
                let mut gx = vec![0.0; n * i];
                gemm(n, o, i, g.data(), false, vw.data(), false, 0.0, &mut gx);
                let mut gw = vec![0.0; o * i];
                gemm(o, n, i, g.data(), true, vx.data(), false, 0.0, &mut gw);
                let mut gb = vec![0.0; o];
                for row in g.data().chunks(o) {
                    for (acc, v) in gb.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                vec![
                    Some(Tensor::new(&[n, i], gx).expect("sized")),
                    Some(Tensor::new(&[o, i], gw).expect("sized")),
                    Some(Tensor::new(&[o], gb).expect("sized")),
                ]
            })
        })
    }

    /// Mean over the spatial axes: `[N, C, H, W] -> [N, C]`.
    pub fn global_avg_pool(&self, x: Var) -> Var {
        let vx = self.value(x);
        let (n, c, h, w) = vx.dims4().expect("global_avg_pool expects NCHW");
        let plane = h * w;
        let means = vx
            .data()
            .chunks(plane)
            .map(|p| p.iter().sum::<f64>() / plane as f64)
            .collect();
        let out = Tensor::new(&[n, c], means).expect("sized");
        self.push_op(out, &[x], move || {
            Box::new(move |g| {
                let mut data = Vec::with_capacity(n * c * plane);
                for &gv in g.data() {
                    data.extend(std::iter::repeat_n(gv / plane as f64, plane));
                }
                vec![Some(Tensor::new(&[n, c, h, w], data).expect("sized"))]
            })
        })
    }

    /// Max over the spatial axes: `[N, C, H, W] -> [N, C]`. Ties route the
    /// gradient to the first maximum.
    pub fn global_max_pool(&self, x: Var) -> Var {
        let vx = self.value(x);
        let (n, c, h, w) = vx.dims4().expect("global_max_pool expects NCHW");
        let plane = h * w;
        let mut arg = Vec::with_capacity(n * c);
        let mut maxes = Vec::with_capacity(n * c);
        for p in vx.data().chunks(plane) {
            let (idx, m) = p
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(bi, bm), (i, &v)| {
                    if v > bm {
                        (i, v)
                    } else {
                        (bi, bm)
                    }
                });
            arg.push(idx);
            maxes.push(m);
        }
        let out = Tensor::new(&[n, c], maxes).expect("sized");
        self.push_op(out, &[x], move || {
            Box::new(move |g| {
                let mut gx = Tensor::zeros(&[n, c, h, w]);
                for (k, (&idx, &gv)) in arg.iter().zip(g.data()).enumerate() {
                    gx.data_mut()[k * plane + idx] = gv;
                }
                vec![Some(gx)]
            })
        })
    }

    /// Group normalization of `x: [N, C, H, W]` with `groups` dividing `C`,
    /// followed by a per-channel affine `gamma: [C]`, `beta: [C]`. Statistics
    /// are the biased mean and variance over each `(n, group)` slab.
    pub fn group_norm(&self, x: Var, gamma: Var, beta: Var, groups: usize, eps: f64) -> Var {
        let (vx, vg, vb) = (self.value(x), self.value(gamma), self.value(beta));
        let (n, c, h, w) = vx.dims4().expect("group_norm expects NCHW");
        assert!(groups > 0 && c % groups == 0, "group_norm: {groups} groups for {c} channels");
        assert_eq!(vg.shape(), &[c], "group_norm: gamma {:?}", vg.shape());
        assert_eq!(vb.shape(), &[c], "group_norm: beta {:?}", vb.shape());
        let plane = h * w;
        let per = c / groups;
        let slab = per * plane;
        let mut xhat = Tensor::zeros(vx.shape());
        let mut inv_std = Vec::with_capacity(n * groups);
        for (src, dst) in vx.data().chunks(slab).zip(xhat.data_mut().chunks_mut(slab)) {
            let mean = src.iter().sum::<f64>() / slab as f64;
            let var = src.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / slab as f64;
            let is = 1.0 / (var + eps).sqrt();
            dst.iter_mut().zip(src).for_each(|(d, s)| *d = (s - mean) * is);
            inv_std.push(is);
        }
        let mut out = xhat.clone();
        for (i, p) in out.data_mut().chunks_mut(plane).enumerate() {
            let (s, b) = (vg.data()[i % c], vb.data()[i % c]);
            p.iter_mut().for_each(|v| *v = s * *v + b);
        }
        self.push_op(out, &[x, gamma, beta], move || {
            Box::new(move |g| {
                let mut gg = Tensor::zeros(&[c]);
                let mut gb = Tensor::zeros(&[c]);
                let mut dxhat = g.clone();
                for (i, (dp, xp)) in dxhat
                    .data_mut()
                    .chunks_mut(plane)
                    .zip(xhat.data().chunks(plane))
                    .enumerate()
                {
                    let k = i % c;
                    gg.data_mut()[k] += dp.iter().zip(xp).map(|(a, b)| a * b).sum::<f64>();
                    gb.data_mut()[k] += dp.iter().sum::<f64>();
                    let s = vg.data()[k];
                    dp.iter_mut().for_each(|v| *v *= s);
                }
                let mut gx = Tensor::zeros(xhat.shape());
                for (j, ((dst, d), xh)) in gx
                    .data_mut()
                    .chunks_mut(slab)
                    .zip(dxhat.data().chunks(slab))
                    .zip(xhat.data().chunks(slab))
                    .enumerate()
                {
                    let m1 = d.iter().sum::<f64>() / slab as f64;
                    let m2 = d.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / slab as f64;
                    let is = inv_std[j];
                    for ((o, &dv), &xv) in dst.iter_mut().zip(d).zip(xh) {
                        *o = is * (dv - m1 - xv * m2);
                    }
                }
                vec![Some(gx), Some(gg), Some(gb)]
            })
        })
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
