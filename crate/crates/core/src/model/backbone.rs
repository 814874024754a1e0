//! Windowed-attention encoder/decoder building blocks.
//!
//! Token grids are carried as `[Hs·Ws, Cs]` matrices in row-major grid order.

use std::rc::Rc;

use super::params::{Bound, Init};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor, Var};

/// Additive mask value for forbidden attention pairs.
pub const MASK_VALUE: f64 = -1e9;

/// Patch side of the embedding layer.
pub const PATCH: usize = 4;

/// Window layout of one `Hs × Ws` grid.
///
/// A window larger than the grid is clamped to the grid side, and a grid that
/// fits in a single window is never shifted.
#[derive(Clone, Debug)]
pub struct WindowGeometry {
    pub hs: usize,
    pub ws: usize,
    pub window: usize,
    pub shift: usize,
    /// `order[k]` is the grid index of the `k`-th token in window-major order
    /// after the cyclic shift.
    pub order: Rc<Vec<usize>>,
    pub inverse: Rc<Vec<usize>>,
    /// Row of the relative-position table for each `(query, key)` pair.
    pub rel_index: Rc<Vec<usize>>,
}

impl WindowGeometry {
    pub fn new(hs: usize, ws: usize, window: usize, shifted: bool) -> Result<Self> {
        if window == 0 {
            return Err(Error::invalid("window size must be positive"));
        }
        let w = window.min(hs).min(ws);
        if hs % w != 0 || ws % w != 0 {
            return Err(Error::shape(format!("window {w} does not divide grid {hs}x{ws}")));
        }
        let shift = if shifted && hs > w && ws > w { w / 2 } else { 0 };
        let (nwy, nwx) = (hs / w, ws / w);
        let mut order = Vec::with_capacity(hs * ws);
        for wy in 0..nwy {
            for wx in 0..nwx {
                for iy in 0..w {
                    for ix in 0..w {
                        let y = (wy * w + iy + shift) % hs;
                        let x = (wx * w + ix + shift) % ws;
                        order.push(y * ws + x);
                    }
                }
            }
        }
        let mut inverse = vec![0; order.len()];
        for (k, &i) in order.iter().enumerate() {
            inverse[i] = k;
        }
        let side = 2 * w - 1;
        let mut rel = Vec::with_capacity(w.pow(4));
        for a in 0..w * w {
            for b in 0..w * w {
                let dy = a / w + w - 1 - b / w;
                let dx = a % w + w - 1 - b % w;
                rel.push(dy * side + dx);
            }
        }
        Ok(WindowGeometry {
            hs,
            ws,
            window: w,
            shift,
            order: Rc::new(order),
            inverse: Rc::new(inverse),
            rel_index: Rc::new(rel),
        })
    }

    pub fn num_windows(&self) -> usize {
        (self.hs / self.window) * (self.ws / self.window)
    }

    pub fn tokens_per_window(&self) -> usize {
        self.window * self.window
    }

    /// Rows of the relative-position bias table, `(2w − 1)²`.
    pub fn table_rows(&self) -> usize {
        (2 * self.window - 1).pow(2)
    }

    /// Shifted-grid region of each token in window-major order: the shifted grid
    /// is cut at `side − w` and `side − shift` along each axis.
    pub fn region_labels(&self) -> Vec<usize> {
        let band = |s: usize, side: usize| {
            if s < side - self.window {
                0
            } else if s < side - self.shift {
                1
            } else {
                2
            }
        };
        let w = self.window;
        let nwx = self.ws / w;
        (0..self.hs * self.ws)
            .map(|k| {
                let (win, t) = (k / (w * w), k % (w * w));
                let sy = (win / nwx) * w + t / w;
                let sx = (win % nwx) * w + t % w;
                band(sy, self.hs) * 3 + band(sx, self.ws)
            })
            .collect()
    }

    /// `[nW, 1, w², w²]` additive mask, or `None` without a shift.
    pub fn mask<T: Scalar>(&self) -> Option<Tensor<T>> {
        if self.shift == 0 {
            return None;
        }
        let labels = self.region_labels();
        let n = self.tokens_per_window();
        let nw = self.num_windows();
        Some(Tensor::from_fn(&[nw, 1, n, n], |i| {
            let (win, a, b) = (i / (n * n), (i / n) % n, i % n);
            if labels[win * n + a] == labels[win * n + b] {
                T::zero()
            } else {
                T::lit(MASK_VALUE)
            }
        }))
    }
}

pub fn linear<'g, T: Scalar>(b: &Bound<'g, '_, T>, p: &str, x: Var<'g, T>, bias: bool) -> Result<Var<'g, T>> {
    let y = x.matmul(b.param(p, "w")?)?;
    if bias {
        y.add(b.param(p, "b")?)
    } else {
        Ok(y)
    }
}

pub fn norm<'g, T: Scalar>(b: &Bound<'g, '_, T>, p: &str, x: Var<'g, T>, eps: f64) -> Result<Var<'g, T>> {
    x.layer_norm(b.param(p, "g")?, b.param(p, "b")?, eps)
}

pub fn declare_ffn<T: Scalar>(init: &mut Init<'_, T>, p: &str, c: usize, ratio: usize) -> Result<()> {
    init.linear(&format!("{p}.fc1"), c, c * ratio, true)?;
    init.linear(&format!("{p}.fc2"), c * ratio, c, true)
}

/// `linear → gelu → linear`.
pub fn ffn<'g, T: Scalar>(b: &Bound<'g, '_, T>, p: &str, x: Var<'g, T>) -> Result<Var<'g, T>> {
    let h = linear(b, &format!("{p}.fc1"), x, true)?.gelu()?;
    linear(b, &format!("{p}.fc2"), h, true)
}

/// The key projection has no bias: it would add a per-query constant to every
/// logit of a softmax row and so never receive a gradient.
pub fn declare_attention<T: Scalar>(init: &mut Init<'_, T>, p: &str, c: usize, heads: usize, table_rows: usize) -> Result<()> {
    for n in ["q", "k", "v", "proj"] {
        init.linear(&format!("{p}.{n}"), c, c, n != "k")?;
    }
    init.trunc_normal(&format!("{p}.rpb"), &[table_rows, heads])
}

/// Output of a windowed attention call.
pub struct Attention<'g, T: Scalar> {
    /// `[N, C]` in grid order.
    pub out: Var<'g, T>,
    /// `[nW, heads, w², w²]` attention weights in window-major order.
    pub probs: Var<'g, T>,
}

/// Multi-head attention inside windows with relative position bias. Queries come
/// from `q_src`, keys and values from `kv_src`; both are `[N, C]` grids laid out
/// by `geom`, shifted consistently when the geometry carries a shift.
pub fn window_attention<'g, T: Scalar>(
    b: &Bound<'g, '_, T>,
    p: &str,
    q_src: Var<'g, T>,
    kv_src: Var<'g, T>,
    geom: &WindowGeometry,
    heads: usize,
) -> Result<Attention<'g, T>> {
    let shape = q_src.shape();
    if shape != kv_src.shape() || shape.len() != 2 || shape[0] != geom.hs * geom.ws {
        return Err(Error::shape(format!(
            "attention operands {:?}/{:?} do not fit a {}x{} grid",
            shape,
            kv_src.shape(),
            geom.hs,
            geom.ws
        )));
    }
    let c = shape[1];
    if heads == 0 || c % heads != 0 {
        return Err(Error::shape(format!("{heads} heads do not divide {c} channels")));
    }
    let (nw, n, d) = (geom.num_windows(), geom.tokens_per_window(), c / heads);
    let qw = q_src.gather_rows(geom.order.clone())?;
    let kvw = if kv_src.id() == q_src.id() {
        qw
    } else {
        kv_src.gather_rows(geom.order.clone())?
    };
    let split_heads = |x: Var<'g, T>| x.reshape(&[nw, n, heads, d])?.permute(&[0, 2, 1, 3]);
    let q = split_heads(linear(b, &format!("{p}.q"), qw, true)?.scale(1.0 / (d as f64).sqrt())?)?;
    let k = split_heads(linear(b, &format!("{p}.k"), kvw, false)?)?;
    let v = split_heads(linear(b, &format!("{p}.v"), kvw, true)?)?;
    let bias = b
        .param(p, "rpb")?
        .gather_rows(geom.rel_index.clone())?
        .reshape(&[n, n, heads])?
        .permute(&[2, 0, 1])?;
    let scores = q.matmul_bt(k)?.add(bias)?;
    let mask = geom.mask::<T>();
    let probs = scores.softmax(mask.as_ref())?;
    let o = probs.matmul(v)?.permute(&[0, 2, 1, 3])?.reshape(&[nw * n, c])?;
    let out = linear(b, &format!("{p}.proj"), o, true)?.gather_rows(geom.inverse.clone())?;
    Ok(Attention { out, probs })
}

pub fn declare_block<T: Scalar>(
    init: &mut Init<'_, T>,
    p: &str,
    c: usize,
    heads: usize,
    ratio: usize,
    geom: &WindowGeometry,
) -> Result<()> {
    init.norm(&format!("{p}.norm1"), c)?;
    declare_attention(init, &format!("{p}.attn"), c, heads, geom.table_rows())?;
    init.norm(&format!("{p}.norm2"), c)?;
    declare_ffn(init, &format!("{p}.ffn"), c, ratio)
}

/// Pre-norm block: `x + attn(LN(x))`, then `x + FFN(LN(x))`.
pub fn swin_block<'g, T: Scalar>(
    b: &Bound<'g, '_, T>,
    p: &str,
    x: Var<'g, T>,
    geom: &WindowGeometry,
    heads: usize,
    eps: f64,
) -> Result<Var<'g, T>> {
    let y = norm(b, &format!("{p}.norm1"), x, eps)?;
    let a = window_attention(b, &format!("{p}.attn"), y, y, geom, heads)?;
    let x = x.add(a.out)?;
    let y = norm(b, &format!("{p}.norm2"), x, eps)?;
    x.add(ffn(b, &format!("{p}.ffn"), y)?)
}

/// The bias is random rather than zero: empty patches embed to the bias, and a
/// constant row entering layer norm has a derivative of order `1/sqrt(eps)`
/// that compounds through every following norm.
pub fn declare_patch_embed<T: Scalar>(init: &mut Init<'_, T>, p: &str, in_channels: usize, c: usize) -> Result<()> {
    init.linear(p, PATCH * PATCH * in_channels, c, false)?;
    init.trunc_normal(&format!("{p}.b"), &[c])
}

/// `[C_e, H, W]` → `[(H/4)·(W/4), C]`; each 4×4 patch is flattened in
/// `(row, column, channel)` order and projected.
pub fn patch_embed<'g, T: Scalar>(b: &Bound<'g, '_, T>, p: &str, e: Var<'g, T>) -> Result<Var<'g, T>> {
    let s = e.shape();
    if s.len() != 3 || s[1] % 32 != 0 || s[2] % 32 != 0 {
        return Err(Error::shape(format!("input {s:?} must be [C, H, W] with H, W divisible by 32")));
    }
    let (ce, h, w) = (s[0], s[1] / PATCH, s[2] / PATCH);
    let patches = e
        .reshape(&[ce, h, PATCH, w, PATCH])?
        .permute(&[1, 3, 2, 4, 0])?
        .reshape(&[h * w, PATCH * PATCH * ce])?;
    linear(b, p, patches, true)
}

/// Rearranges `[Hs·Ws, C]` into `[(Hs/2)·(Ws/2), 4C]`, each 2×2 neighbourhood
/// concatenated in `(dy, dx, channel)` order.
pub fn unfold2x2<'g, T: Scalar>(x: Var<'g, T>, hs: usize, ws: usize) -> Result<Var<'g, T>> {
    let c = x.shape()[1];
    if hs % 2 != 0 || ws % 2 != 0 || x.shape()[0] != hs * ws {
        return Err(Error::shape(format!("cannot unfold {:?} as an even {hs}x{ws} grid", x.shape())));
    }
    x.reshape(&[hs / 2, 2, ws / 2, 2, c])?
        .permute(&[0, 2, 1, 3, 4])?
        .reshape(&[hs * ws / 4, 4 * c])
}

/// Inverse of [`unfold2x2`]: `[h·w, 4C]` → `[(2h)·(2w), C]`.
pub fn fold2x2<'g, T: Scalar>(x: Var<'g, T>, h: usize, w: usize) -> Result<Var<'g, T>> {
    let c4 = x.shape()[1];
    if c4 % 4 != 0 || x.shape()[0] != h * w {
        return Err(Error::shape(format!("cannot fold {:?} from a {h}x{w} grid", x.shape())));
    }
    x.reshape(&[h, w, 2, 2, c4 / 4])?
        .permute(&[0, 2, 1, 3, 4])?
        .reshape(&[4 * h * w, c4 / 4])
}

/// 2×2 neighbourhood concat then a bias-free `4C → 2C` projection.
pub fn patch_merging<'g, T: Scalar>(b: &Bound<'g, '_, T>, p: &str, x: Var<'g, T>, hs: usize, ws: usize) -> Result<Var<'g, T>> {
    linear(b, p, unfold2x2(x, hs, ws)?, false)
}

/// Bias-free `C → 2C` projection then a 2×2 fold to `C/2` channels.
pub fn patch_splitting<'g, T: Scalar>(b: &Bound<'g, '_, T>, p: &str, x: Var<'g, T>, hs: usize, ws: usize) -> Result<Var<'g, T>> {
    fold2x2(linear(b, p, x, false)?, hs, ws)
}

/// `[out, n]` matrix of ×`factor` bilinear interpolation with half-pixel centres
/// and edge clamping.
pub fn bilinear_matrix<T: Scalar>(n: usize, factor: usize) -> Tensor<T> {
    let out = n * factor;
    let mut m = vec![0.0f64; out * n];
    for o in 0..out {
        let src = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(n - 1);
        let i1 = (i0 + 1).min(n - 1);
        let frac = src - i0 as f64;
        m[o * n + i0] += 1.0 - frac;
        m[o * n + i1] += frac;
    }
    Tensor::from_f64(&[out, n], &m).expect("consistent shape")
}

pub fn declare_depth_head<T: Scalar>(init: &mut Init<'_, T>, p: &str, c: usize) -> Result<()> {
    init.norm(&format!("{p}.norm"), c)?;
    init.linear(&format!("{p}.proj"), c, 1, true)
}

/// `LN → linear C→1 → bilinear ×4 → sigmoid`, giving an `[H, W]` map in (0, 1).
pub fn depth_head<'g, T: Scalar>(
    b: &Bound<'g, '_, T>,
    p: &str,
    d0: Var<'g, T>,
    hs: usize,
    ws: usize,
    eps: f64,
) -> Result<Var<'g, T>> {
    let g = b.graph();
    let y = norm(b, &format!("{p}.norm"), d0, eps)?;
    let z = linear(b, &format!("{p}.proj"), y, true)?.reshape(&[hs, ws])?;
    let rh = g.constant(bilinear_matrix(hs, PATCH));
    let rw = g.constant(bilinear_matrix(ws, PATCH));
    rh.matmul(z)?.matmul_bt(rw)?.sigmoid()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn geometry_counts_and_inverse() {
        let g = WindowGeometry::new(16, 16, 4, false).unwrap();
        assert_eq!((g.num_windows(), g.tokens_per_window()), (16, 16));
        for (k, &i) in g.order.iter().enumerate() {
            assert_eq!(g.inverse[i], k);
        }
        let s = WindowGeometry::new(8, 8, 4, true).unwrap();
        assert_eq!(s.shift, 2);
        assert!(s.mask::<f64>().is_some());
        let small = WindowGeometry::new(2, 2, 4, true).unwrap();
        assert_eq!((small.window, small.shift), (2, 0));
        assert!(WindowGeometry::new(6, 6, 4, false).is_err());
    }

    #[test]
    fn bilinear_rows_sum_to_one() {
        let m = bilinear_matrix::<f64>(5, 4);
        for r in 0..20 {
            let s: f64 = (0..5).map(|c| m.at(&[r, c])).sum();
            assert!((s - 1.0).abs() < 1e-15);
        }
        assert_eq!(m.at(&[0, 0]), 1.0);
        assert_eq!(m.at(&[2, 0]), 0.875);
    }
}
