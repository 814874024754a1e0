//! Forward/backward kernels. All loops run in a fixed order so results are
//! reproducible bit for bit.

use super::{numel, strides, Scalar, Tensor};
use crate::error::{Error, Result};

pub fn broadcast_shapes(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = if da == db || db == 1 {
            da
        } else if da == 1 {
            db
        } else {
            return Err(Error::shape(format!("cannot broadcast {a:?} with {b:?}")));
        };
    }
    Ok(out)
}

/// Strides of `shape` viewed inside the broadcast shape `out` (0 on expanded axes).
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let st = strides(shape);
    let off = out.len() - shape.len();
    (0..out.len())
        .map(|i| {
            if i < off || shape[i - off] == 1 {
                0
            } else {
                st[i - off]
            }
        })
        .collect()
}

/// Calls `f(out_index, a_offset, b_offset)` for every element of the
/// broadcast output, in row-major order.
fn for_each_broadcast(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let rank = out.len();
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let total = numel(out);
    let mut idx = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    let last = rank - 1;
    let inner = out[last];
    let mut o = 0;
    while o < total {
        for j in 0..inner {
            f(o + j, oa + j * sa[last], ob + j * sb[last]);
        }
        o += inner;
        // advance the odometer over the outer axes
        let mut ax = last;
        while ax > 0 {
            ax -= 1;
            idx[ax] += 1;
            oa += sa[ax];
            ob += sb[ax];
            if idx[ax] < out[ax] {
                break;
            }
            oa -= sa[ax] * out[ax];
            ob -= sb[ax] * out[ax];
            idx[ax] = 0;
        }
    }
}

pub fn broadcast_binary<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    if a.shape == b.shape {
        return a.zip_map(b, f);
    }
    let out = broadcast_shapes(&a.shape, &b.shape)?;
    let n = numel(&out);
    // common fast path: `b` repeats over the leading axes of `a`
    if out == a.shape && b.shape.len() <= a.shape.len() && a.shape.ends_with(&b.shape) {
        let m = b.data.len();
        let mut data = Vec::with_capacity(n);
        for chunk in a.data.chunks(m) {
            data.extend(chunk.iter().zip(&b.data).map(|(&x, &y)| f(x, y)));
        }
        return Ok(Tensor { shape: out, data });
    }
    let sa = broadcast_strides(&a.shape, &out);
    let sb = broadcast_strides(&b.shape, &out);
    let mut data = vec![T::zero(); n];
    for_each_broadcast(&out, &sa, &sb, |o, ia, ib| data[o] = f(a.data[ia], b.data[ib]));
    Ok(Tensor { shape: out, data })
}

pub fn broadcast_to<T: Scalar>(t: &Tensor<T>, shape: &[usize]) -> Result<Tensor<T>> {
    let out = broadcast_shapes(&t.shape, shape)?;
    if out != shape {
        return Err(Error::shape(format!("cannot expand {:?} to {shape:?}", t.shape)));
    }
    if t.shape == shape {
        return Ok(t.clone());
    }
    let st = broadcast_strides(&t.shape, &out);
    let zero = vec![0; out.len()];
    let mut data = vec![T::zero(); numel(&out)];
    for_each_broadcast(&out, &st, &zero, |o, i, _| data[o] = t.data[i]);
    Ok(Tensor { shape: out, data })
}

/// Sums `g` over the axes along which `target` was broadcast to reach `g`'s shape.
pub fn reduce_to_shape<T: Scalar>(g: &Tensor<T>, target: &[usize]) -> Result<Tensor<T>> {
    if g.shape == target {
        return Ok(g.clone());
    }
    let full = broadcast_shapes(target, &g.shape)?;
    if full != g.shape {
        return Err(Error::shape(format!("cannot reduce {:?} to {target:?}", g.shape)));
    }
    let m = numel(target);
    let mut data = vec![T::zero(); m];
    if g.shape.ends_with(target) {
        for chunk in g.data.chunks(m) {
            for (d, &v) in data.iter_mut().zip(chunk) {
                *d = *d + v;
            }
        }
    } else {
        let st = broadcast_strides(target, &g.shape);
        let zero = vec![0; g.shape.len()];
        for_each_broadcast(&g.shape, &zero, &st, |o, _, it| data[it] = data[it] + g.data[o]);
    }
    Ok(Tensor {
        shape: target.to_vec(),
        data,
    })
}

pub fn permute<T: Scalar>(t: &Tensor<T>, axes: &[usize]) -> Result<Tensor<T>> {
    let rank = t.rank();
    let mut seen = vec![false; rank];
    if axes.len() != rank {
        return Err(Error::shape(format!("permutation {axes:?} for rank {rank}")));
    }
    for &a in axes {
        if a >= rank || seen[a] {
            return Err(Error::shape(format!("invalid permutation {axes:?}")));
        }
        seen[a] = true;
    }
    if axes.iter().enumerate().all(|(i, &a)| i == a) {
        return Ok(t.clone());
    }
    let src_strides = strides(&t.shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| t.shape[a]).collect();
    let ps: Vec<usize> = axes.iter().map(|&a| src_strides[a]).collect();
    let zero = vec![0; rank];
    let mut data = vec![T::zero(); t.len()];
    for_each_broadcast(&out_shape, &ps, &zero, |o, i, _| data[o] = t.data[i]);
    Ok(Tensor {
        shape: out_shape,
        data,
    })
}

pub fn inverse_permutation(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

/// Batched matrix product with optional transposition of either operand's
/// last two axes. Batch axes must match, or one operand must be a plain matrix.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, ta: bool, tb: bool) -> Result<Tensor<T>> {
    let (ra, rb) = (a.rank(), b.rank());
    if ra < 2 || rb < 2 {
        return Err(Error::shape(format!(
            "matmul needs rank >= 2 operands, got {:?} and {:?}",
            a.shape, b.shape
        )));
    }
    let (a0, a1) = (a.shape[ra - 2], a.shape[ra - 1]);
    let (b0, b1) = (b.shape[rb - 2], b.shape[rb - 1]);
    let (m, ka) = if ta { (a1, a0) } else { (a0, a1) };
    let (kb, n) = if tb { (b1, b0) } else { (b0, b1) };
    if ka != kb {
        return Err(Error::shape(format!(
            "matmul inner dimensions differ: {:?}{} x {:?}{}",
            a.shape,
            if ta { "^T" } else { "" },
            b.shape,
            if tb { "^T" } else { "" }
        )));
    }
    let k = ka;
    let batch_a = &a.shape[..ra - 2];
    let batch_b = &b.shape[..rb - 2];
    let batch: Vec<usize> = if batch_a == batch_b || batch_b.is_empty() {
        batch_a.to_vec()
    } else if batch_a.is_empty() {
        batch_b.to_vec()
    } else {
        return Err(Error::shape(format!(
            "matmul batch dimensions differ: {:?} x {:?}",
            a.shape, b.shape
        )));
    };
    let nb = numel(&batch);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    let mut out_shape = batch.clone();
    out_shape.extend([m, n]);
    let mut data = vec![T::zero(); nb * m * n];
    let step_a = if batch_a.is_empty() { 0 } else { m * k };
    let step_b = if batch_b.is_empty() { 0 } else { k * n };
    if step_b == 0 && !ta && nb > 1 {
        // fold the batch into the row dimension
        T::gemm(nb * m, k, n, &a.data, rsa, csa, &b.data, rsb, csb, T::zero(), &mut data, n as isize, 1);
    } else {
        for i in 0..nb {
            T::gemm(
                m,
                k,
                n,
                &a.data[i * step_a..i * step_a + m * k],
                rsa,
                csa,
                &b.data[i * step_b..i * step_b + k * n],
                rsb,
                csb,
                T::zero(),
                &mut data[i * m * n..(i + 1) * m * n],
                n as isize,
                1,
            );
        }
    }
    Ok(Tensor {
        shape: out_shape,
        data,
    })
}

/// Layer norm over the last axis. Returns `(y, xhat, rstd)`.
pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    bias: &Tensor<T>,
    eps: T,
) -> (Tensor<T>, Tensor<T>, Vec<T>) {
    let c = *x.shape.last().expect("rank >= 1");
    let rows = x.len() / c;
    let inv_c = T::one() / T::lit(c as f64);
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &x.data[r * c..(r + 1) * c];
        let mean = row.iter().copied().sum::<T>() * inv_c;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_c;
        let rs = T::one() / (var + eps).sqrt();
        rstd.push(rs);
        for j in 0..c {
            let h = (row[j] - mean) * rs;
            xhat[r * c + j] = h;
            y[r * c + j] = h * gain.data[j] + bias.data[j];
        }
    }
    let shape = x.shape.clone();
    (
        Tensor {
            shape: shape.clone(),
            data: y,
        },
        Tensor { shape, data: xhat },
        rstd,
    )
}

/// Returns `(dx, dgain, dbias)`.
pub fn layer_norm_backward<T: Scalar>(
    dy: &Tensor<T>,
    xhat: &Tensor<T>,
    rstd: &[T],
    gain: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let c = gain.len();
    let rows = dy.len() / c;
    let inv_c = T::one() / T::lit(c as f64);
    let mut dx = vec![T::zero(); dy.len()];
    let mut dg = vec![T::zero(); c];
    let mut db = vec![T::zero(); c];
    for r in 0..rows {
        let dyr = &dy.data[r * c..(r + 1) * c];
        let xh = &xhat.data[r * c..(r + 1) * c];
        let mut mean_d = T::zero();
        let mut mean_dx = T::zero();
        for j in 0..c {
            let d = dyr[j] * gain.data[j];
            mean_d = mean_d + d;
            mean_dx = mean_dx + d * xh[j];
            dg[j] = dg[j] + dyr[j] * xh[j];
            db[j] = db[j] + dyr[j];
        }
        mean_d = mean_d * inv_c;
        mean_dx = mean_dx * inv_c;
        for j in 0..c {
            let d = dyr[j] * gain.data[j];
            dx[r * c + j] = rstd[r] * (d - mean_d - xh[j] * mean_dx);
        }
    }
    (
        Tensor {
            shape: dy.shape.clone(),
            data: dx,
        },
        Tensor {
            shape: vec![c],
            data: dg,
        },
        Tensor {
            shape: vec![c],
            data: db,
        },
    )
}

/// Softmax over the last axis, with an optional additive mask already
/// expanded to the input shape.
pub fn softmax_lastaxis<T: Scalar>(x: &Tensor<T>, mask: Option<&Tensor<T>>) -> Tensor<T> {
    let c = *x.shape.last().expect("rank >= 1");
    let mut data = x.data.clone();
    if let Some(m) = mask {
        for (d, &mv) in data.iter_mut().zip(&m.data) {
            *d = *d + mv;
        }
    }
    for row in data.chunks_mut(c) {
        let max = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let mut s = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            s = s + *v;
        }
        let inv = T::one() / s;
        for v in row.iter_mut() {
            *v = *v * inv;
        }
    }
    Tensor {
        shape: x.shape.clone(),
        data,
    }
}

pub fn softmax_backward<T: Scalar>(dy: &Tensor<T>, y: &Tensor<T>) -> Tensor<T> {
    let c = *y.shape.last().expect("rank >= 1");
    let mut dx = vec![T::zero(); y.len()];
    for ((dxr, dyr), yr) in dx.chunks_mut(c).zip(dy.data.chunks(c)).zip(y.data.chunks(c)) {
        let dot = dyr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>();
        for j in 0..c {
            dxr[j] = yr[j] * (dyr[j] - dot);
        }
    }
    Tensor {
        shape: y.shape.clone(),
        data: dx,
    }
}

/// Cyclic shift of the two leading axes: `out[(i+dh) mod H][(j+dw) mod W] = x[i][j]`.
pub fn roll2<T: Scalar>(x: &Tensor<T>, dh: isize, dw: isize) -> Result<Tensor<T>> {
    if x.rank() < 2 {
        return Err(Error::shape(format!("roll2 needs rank >= 2, got {:?}", x.shape)));
    }
    let (h, w) = (x.shape[0], x.shape[1]);
    let inner = x.len() / (h * w);
    let mut data = vec![T::zero(); x.len()];
    for i in 0..h {
        let oi = (i as isize + dh).rem_euclid(h as isize) as usize;
        for j in 0..w {
            let oj = (j as isize + dw).rem_euclid(w as isize) as usize;
            let src = (i * w + j) * inner;
            let dst = (oi * w + oj) * inner;
            data[dst..dst + inner].copy_from_slice(&x.data[src..src + inner]);
        }
    }
    Ok(Tensor {
        shape: x.shape.clone(),
        data,
    })
}

pub fn gather_rows<T: Scalar>(table: &Tensor<T>, idx: &[usize]) -> Result<Tensor<T>> {
    if table.rank() != 2 {
        return Err(Error::shape(format!("gather_rows needs a matrix, got {:?}", table.shape)));
    }
    let (r, c) = (table.shape[0], table.shape[1]);
    let mut data = Vec::with_capacity(idx.len() * c);
    for &i in idx {
        if i >= r {
            return Err(Error::shape(format!("row index {i} out of range for {r} rows")));
        }
        data.extend_from_slice(&table.data[i * c..(i + 1) * c]);
    }
    Ok(Tensor {
        shape: vec![idx.len(), c],
        data,
    })
}

pub fn scatter_rows<T: Scalar>(g: &Tensor<T>, idx: &[usize], rows: usize) -> Tensor<T> {
    let c = g.shape[1];
    let mut data = vec![T::zero(); rows * c];
    for (k, &i) in idx.iter().enumerate() {
        for j in 0..c {
            data[i * c + j] = data[i * c + j] + g.data[k * c + j];
        }
    }
    Tensor {
        shape: vec![rows, c],
        data,
    }
}

pub fn concat<T: Scalar>(parts: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::shape("concat of zero tensors"))?;
    let rank = first.rank();
    if axis >= rank {
        return Err(Error::Axis { axis, rank });
    }
    let mut shape = first.shape.clone();
    shape[axis] = 0;
    for p in parts {
        let compatible = p.rank() == rank
            && p.shape
                .iter()
                .zip(&first.shape)
                .enumerate()
                .all(|(i, (a, b))| i == axis || a == b);
        if !compatible {
            return Err(Error::shape(format!(
                "concat on axis {axis}: incompatible shapes {:?} and {:?}",
                first.shape, p.shape
            )));
        }
        shape[axis] += p.shape[axis];
    }
    let outer = numel(&shape[..axis]);
    let mut data = Vec::with_capacity(numel(&shape));
    for o in 0..outer {
        for p in parts {
            let chunk = numel(&p.shape[axis..]);
            data.extend_from_slice(&p.data[o * chunk..(o + 1) * chunk]);
        }
    }
    Ok(Tensor { shape, data })
}

pub fn slice<T: Scalar>(x: &Tensor<T>, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
    let rank = x.rank();
    if axis >= rank {
        return Err(Error::Axis { axis, rank });
    }
    if len == 0 || start + len > x.shape[axis] {
        return Err(Error::shape(format!(
            "slice {start}..{} out of range for axis {axis} of {:?}",
            start + len,
            x.shape
        )));
    }
    let outer = numel(&x.shape[..axis]);
    let inner = numel(&x.shape[axis + 1..]);
    let full = x.shape[axis] * inner;
    let mut shape = x.shape.clone();
    shape[axis] = len;
    let mut data = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = o * full + start * inner;
        data.extend_from_slice(&x.data[base..base + len * inner]);
    }
    Ok(Tensor { shape, data })
}

/// Adjoint of [`slice`]: embeds `g` into zeros of `full_shape`.
pub fn unslice<T: Scalar>(g: &Tensor<T>, full_shape: &[usize], axis: usize, start: usize) -> Tensor<T> {
    let outer = numel(&full_shape[..axis]);
    let inner = numel(&full_shape[axis + 1..]);
    let full = full_shape[axis] * inner;
    let len = g.shape[axis];
    let mut data = vec![T::zero(); numel(full_shape)];
    for o in 0..outer {
        let base = o * full + start * inner;
        data[base..base + len * inner].copy_from_slice(&g.data[o * len * inner..(o + 1) * len * inner]);
    }
    Tensor {
        shape: full_shape.to_vec(),
        data,
    }
}

/// Sum over one axis, keeping it with length 1.
pub fn sum_axis<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let rank = x.rank();
    if axis >= rank {
        return Err(Error::Axis { axis, rank });
    }
    let outer = numel(&x.shape[..axis]);
    let inner = numel(&x.shape[axis + 1..]);
    let n = x.shape[axis];
    let mut data = vec![T::zero(); outer * inner];
    for o in 0..outer {
        for a in 0..n {
            let src = &x.data[(o * n + a) * inner..(o * n + a + 1) * inner];
            let dst = &mut data[o * inner..(o + 1) * inner];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = *d + s;
            }
        }
    }
    let mut shape = x.shape.clone();
    shape[axis] = 1;
    Ok(Tensor { shape, data })
}
