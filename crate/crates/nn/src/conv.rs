//! Spatial ops on NCHW tensors: same-padded convolution, 2× pooling and
//! upsampling, and a replicate-padded Sobel filter.

use crate::tensor::gemm;
use crate::{Graph, Tensor, Var};

/// Largest patch cache (in elements) a convolution keeps for its backward pass.
const COL_CACHE_LIMIT: usize = 1 << 22;

/// Appends the `[C·k·k, H·W]` patch matrix of one `[C, H, W]` item to
/// `col`, with zero padding `k / 2`.
fn im2col(x: &[f64], c: usize, h: usize, w: usize, k: usize, col: &mut Vec<f64>) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    col.reserve(c * k * k * hw);
    for ch in 0..c {
        let plane = &x[ch * hw..(ch + 1) * hw];
        for ky in 0..k {
            let dy = ky as isize - pad;
            for kx in 0..k {
                let dx = kx as isize - pad;
                let x0 = (-dx).max(0) as usize;
                let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize || x0 >= x1 {
                        col.extend(std::iter::repeat_n(0.0, w));
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    let sx0 = (x0 as isize + dx) as usize;
                    col.extend(std::iter::repeat_n(0.0, x0));
                    col.extend_from_slice(&src[sx0..sx0 + (x1 - x0)]);
                    col.extend(std::iter::repeat_n(0.0, w - x1));
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the image.
fn col2im(col: &[f64], c: usize, h: usize, w: usize, k: usize, x: &mut [f64]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ch in 0..c {
        let plane = &mut x[ch * hw..(ch + 1) * hw];
        for ky in 0..k {
            let dy = ky as isize - pad;
            for kx in 0..k {
                let dx = kx as isize - pad;
                let row = (ch * k + ky) * k + kx;
                let src = &col[row * hw..(row + 1) * hw];
                let x0 = (-dx).max(0) as usize;
                let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                if x0 >= x1 {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    let sx0 = (x0 as isize + dx) as usize;
                    for (d, s) in dst[sx0..sx0 + (x1 - x0)]
                        .iter_mut()
                        .zip(&src[y * w + x0..y * w + x1])
                    {
                        *d += s;
                    }
                }
            }
        }
    }
}

impl Graph<'_> {
    /// Stride-1 convolution with zero padding `k / 2` (output keeps the
    /// spatial size). `weight: [Co, Ci, k, k]` with odd `k`, `bias: [Co]`.
    pub fn conv2d(&self, x: Var, weight: Var, bias: Option<Var>) -> Var {
        let (vx, vw) = (self.value(x), self.value(weight));
        let (n, ci, h, w) = vx.dims4().expect("conv2d input must be NCHW");
        let (co, wci, k, k2) = vw.dims4().expect("conv2d weight must be [Co, Ci, k, k]");
        assert_eq!(ci, wci, "conv2d: input has {ci} channels, weight expects {wci}");
        assert!(k == k2 && k % 2 == 1, "conv2d: kernel must be square and odd");
        let vb = bias.map(|b| self.value(b));
        if let Some(b) = &vb {
            assert_eq!(b.shape(), &[co], "conv2d bias shape");
        }
        let hw = h * w;
        let kk = ci * k * k;
        let need_x = self.requires_grad(x);
        let need_w = self.requires_grad(weight);
        // Keep the patch matrices for the weight gradient unless they are large.
        let cache = k > 1 && need_w && n * kk * hw <= COL_CACHE_LIMIT;
        let mut out = Tensor::zeros(&[n, co, h, w]);
        let mut cols = Vec::new();
        for b in 0..n {
            let xb = vx.batch_item(b);
            let patches: &[f64] = if k == 1 {
                xb
            } else {
                if !cache {
                    cols.clear();
                }
                let start = cols.len();
                im2col(xb, ci, h, w, k, &mut cols);
                &cols[start..]
            };
            let ob = &mut out.data_mut()[b * co * hw..(b + 1) * co * hw];
            if let Some(bias) = &vb {
                for (row, &bv) in ob.chunks_mut(hw).zip(bias.data()) {
                    row.fill(bv);
                }
            }
            gemm(co, kk, hw, vw.data(), false, patches, false, 1.0, ob);
        }

        let cols = cache.then_some(cols);
        let mut parents = vec![x, weight];
        parents.extend(bias);
        self.push_op(out, &parents, move || {
            Box::new(move |g| {
                let mut gx = need_x.then(|| Tensor::zeros(vx.shape()));
                let mut gw = need_w.then(|| vec![0.0; co * kk]);
                let mut scratch = Vec::new();
                let mut dcol = if k == 1 { Vec::new() } else { vec![0.0; kk * hw] };
                for b in 0..n {
                    let gb = &g.data()[b * co * hw..(b + 1) * co * hw];
                    if let Some(gw) = gw.as_mut() {
                        let xb = vx.batch_item(b);
                        let patches: &[f64] = if k == 1 {
                            xb
                        } else if let Some(cols) = &cols {
                            &cols[b * kk * hw..(b + 1) * kk * hw]
                        } else {
                            scratch.clear();
                            im2col(xb, ci, h, w, k, &mut scratch);
                            &scratch
                        };
                        gemm(co, hw, kk, gb, false, patches, true, 1.0, gw);
                    }
                    if let Some(gx) = gx.as_mut() {
                        let gxb = &mut gx.data_mut()[b * ci * hw..(b + 1) * ci * hw];
                        if k == 1 {
                            gemm(kk, co, hw, vw.data(), true, gb, false, 1.0, gxb);
                        } else {
                            gemm(kk, co, hw, vw.data(), true, gb, false, 0.0, &mut dcol);
                            col2im(&dcol, ci, h, w, k, gxb);
                        }
                    }
                }
                let mut grads = vec![
                    gx,
                    gw.map(|d| Tensor::new(&[co, ci, k, k], d).expect("sized")),
                ];
                if vb.is_some() {
                    let mut gbias = vec![0.0; co];
                    for (i, row) in g.data().chunks(hw).enumerate() {
                        gbias[i % co] += row.iter().sum::<f64>();
                    }
                    grads.push(Some(Tensor::new(&[co], gbias).expect("sized")));
                }
                grads
            })
        })
    }

    /// 2×2 max pooling with stride 2; `H` and `W` must be even.
    pub fn max_pool2(&self, x: Var) -> Var {
        let vx = self.value(x);
        let (n, c, h, w) = vx.dims4().expect("max_pool2 expects NCHW");
        assert!(h % 2 == 0 && w % 2 == 0, "max_pool2 needs even sides, got {h}×{w}");
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut arg = Vec::with_capacity(n * c * oh * ow);
        for (p, plane) in vx.data().chunks(h * w).enumerate() {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = 0;
                    for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let i = (2 * y + dy) * w + 2 * xx + dx;
                        if plane[i] > best {
                            best = plane[i];
                            best_i = i;
                        }
                    }
                    out.push(best);
                    arg.push(p * h * w + best_i);
                }
            }
        }
        let out = Tensor::new(&[n, c, oh, ow], out).expect("sized");
        self.push_op(out, &[x], move || {
            Box::new(move |g| {
                let mut gx = Tensor::zeros(&[n, c, h, w]);
                for (&i, &gv) in arg.iter().zip(g.data()) {
                    gx.data_mut()[i] += gv;
                }
                vec![Some(gx)]
            })
        })
    }

    /// Nearest-neighbour 2× upsampling.
    pub fn upsample_nearest2(&self, x: Var) -> Var {
        let vx = self.value(x);
        let (n, c, h, w) = vx.dims4().expect("upsample_nearest2 expects NCHW");
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = Vec::with_capacity(n * c * oh * ow);
        for plane in vx.data().chunks(h * w) {
            for y in 0..oh {
                let row = &plane[(y / 2) * w..(y / 2 + 1) * w];
                for xx in 0..ow {
                    out.push(row[xx / 2]);
                }
            }
        }
        let out = Tensor::new(&[n, c, oh, ow], out).expect("sized");
        self.push_op(out, &[x], move || {
            Box::new(move |g| {
                let mut gx = Tensor::zeros(&[n, c, h, w]);
                for (gplane, dst) in g.data().chunks(oh * ow).zip(gx.data_mut().chunks_mut(h * w)) {
                    for y in 0..oh {
                        for xx in 0..ow {
                            dst[(y / 2) * w + xx / 2] += gplane[y * ow + xx];
                        }
                    }
                }
                vec![Some(gx)]
            })
        })
    }

    /// 3×3 Sobel responses with replicate padding. Each input channel `c`
    /// yields output channels `2c` (horizontal derivative) and `2c + 1`
    /// (vertical derivative).
    pub fn sobel(&self, x: Var) -> Var {
        let vx = self.value(x);
        let (n, c, h, w) = vx.dims4().expect("sobel expects NCHW");
        let mut out = Tensor::zeros(&[n, 2 * c, h, w]);
        for (p, plane) in vx.data().chunks(h * w).enumerate() {
            let (gx, gy) = sobel_plane(plane, h, w);
            let base = 2 * p * h * w;
            out.data_mut()[base..base + h * w].copy_from_slice(&gx);
            out.data_mut()[base + h * w..base + 2 * h * w].copy_from_slice(&gy);
        }
        self.push_op(out, &[x], move || {
            Box::new(move |g| {
                let mut gin = Tensor::zeros(&[n, c, h, w]);
                for p in 0..n * c {
                    let base = 2 * p * h * w;
                    let gxs = &g.data()[base..base + h * w];
                    let gys = &g.data()[base + h * w..base + 2 * h * w];
                    let dst = &mut gin.data_mut()[p * h * w..(p + 1) * h * w];
                    for y in 0..h {
                        for xx in 0..w {
                            let (ox, oy) = (gxs[y * w + xx], gys[y * w + xx]);
                            for (ky, row) in SOBEL_X.iter().enumerate() {
                                let sy = clamp_index(y as isize + ky as isize - 1, h);
                                for (kx, &wx) in row.iter().enumerate() {
                                    let sx = clamp_index(xx as isize + kx as isize - 1, w);
                                    let wy = SOBEL_X[kx][ky];
                                    dst[sy * w + sx] += wx * ox + wy * oy;
                                }
                            }
                        }
                    }
                }
                vec![Some(gin)]
            })
        })
    }
}

/// Horizontal-derivative Sobel kernel (correlation form, `[row][col]`); the
/// vertical kernel is its transpose.
pub const SOBEL_X: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];

fn clamp_index(i: isize, len: usize) -> usize {
    i.clamp(0, len as isize - 1) as usize
}

/// Sobel responses of one `h × w` plane with replicate padding.
pub fn sobel_plane(plane: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
    let mut gx = vec![0.0; h * w];
    let mut gy = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let (mut sx_acc, mut sy_acc) = (0.0, 0.0);
            for (ky, row) in SOBEL_X.iter().enumerate() {
                let sy = clamp_index(y as isize + ky as isize - 1, h);
                for (kx, &wx) in row.iter().enumerate() {
                    let sx = clamp_index(x as isize + kx as isize - 1, w);
                    let v = plane[sy * w + sx];
                    sx_acc += wx * v;
                    sy_acc += SOBEL_X[kx][ky] * v;
                }
            }
            gx[y * w + x] = sx_acc;
            gy[y * w + x] = sy_acc;
        }
    }
    (gx, gy)
}
