use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor, Var};

fn valid_count<T: Scalar>(mask: &Tensor<T>) -> Result<f64> {
    let n = mask.sum().as_f64();
    if n < 1.0 {
        return Err(Error::Data("loss over an empty mask".into()));
    }
    Ok(n)
}

/// Scale-invariant log loss over masked pixels:
/// `L = (1/n)Σd² − (λ/n²)(Σd)²` with `d = pred_log − gt_log`.
pub fn scale_invariant_loss<'g, T: Scalar>(
    pred_log: Var<'g, T>,
    gt_log: &Tensor<T>,
    mask: &Tensor<T>,
    lambda: f64,
) -> Result<Var<'g, T>> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::invalid(format!("lambda {lambda} outside [0, 1]")));
    }
    if pred_log.shape() != gt_log.shape() || gt_log.shape() != mask.shape() {
        return Err(Error::shape(format!(
            "loss operands differ: {:?}, {:?}, {:?}",
            pred_log.shape(),
            gt_log.shape(),
            mask.shape()
        )));
    }
    let n = valid_count(mask)?;
    let g = pred_log.graph();
    let m = g.constant(mask.clone());
    let d = pred_log.sub(g.constant(gt_log.clone()))?.mul(m)?;
    let sq = d.square()?.sum()?.scale(1.0 / n)?;
    let s = d.sum()?.square()?.scale(lambda / (n * n))?;
    sq.sub(s)
}

/// Plain-value version of [`scale_invariant_loss`].
pub fn scale_invariant_value(pred_log: &[f64], gt_log: &[f64], mask: &[bool], lambda: f64) -> Result<f64> {
    let mut n = 0.0;
    let (mut s, mut s2) = (0.0, 0.0);
    for ((&p, &g), &m) in pred_log.iter().zip(gt_log).zip(mask) {
        if m {
            let d = p - g;
            s += d;
            s2 += d * d;
            n += 1.0;
        }
    }
    if n < 1.0 {
        return Err(Error::Data("loss over an empty mask".into()));
    }
    Ok(s2 / n - lambda * s * s / (n * n))
}

/// Keeps every `step`-th row and column of an `[H, W]` map.
fn subsample<'g, T: Scalar>(x: Var<'g, T>, step: usize) -> Result<Var<'g, T>> {
    if step == 1 {
        return Ok(x);
    }
    let s = x.shape();
    let (h, w) = (s[0] / step, s[1] / step);
    x.reshape(&[h, step, w, step])?
        .slice(1, 0, 1)?
        .slice(3, 0, 1)?
        .reshape(&[h, w])
}

fn subsample_const<T: Scalar>(x: &Tensor<T>, step: usize) -> Tensor<T> {
    let (h, w) = (x.shape()[0], x.shape()[1]);
    let (hs, ws) = (h / step, w / step);
    Tensor::from_fn(&[hs, ws], |i| x.at(&[(i / ws) * step, (i % ws) * step]))
}

/// Multi-scale gradient-matching loss: the mean over `scales` dyadic
/// subsamplings of `mean|∇x d| + mean|∇y d|` on pixel pairs that are both valid.
pub fn gradient_matching_loss<'g, T: Scalar>(
    pred_log: Var<'g, T>,
    gt_log: &Tensor<T>,
    mask: &Tensor<T>,
    scales: usize,
) -> Result<Var<'g, T>> {
    if scales == 0 {
        return Err(Error::invalid("gradient matching needs at least one scale"));
    }
    if pred_log.shape().len() != 2 || pred_log.shape() != gt_log.shape() || gt_log.shape() != mask.shape() {
        return Err(Error::shape("gradient matching expects equal [H, W] operands"));
    }
    valid_count(mask)?;
    let g = pred_log.graph();
    let d = pred_log.sub(g.constant(gt_log.clone()))?;
    let mut total: Option<Var<'g, T>> = None;
    let mut used = 0;
    for s in 0..scales {
        let step = 1 << s;
        let (h, w) = (mask.shape()[0] / step, mask.shape()[1] / step);
        if h < 2 && w < 2 {
            break;
        }
        let ds = subsample(d, step)?;
        let ms = subsample_const(mask, step);
        let mut term: Option<Var<'g, T>> = None;
        for axis in 0..2 {
            let len = ms.shape()[axis];
            if len < 2 {
                continue;
            }
            let a = crate::tensor::Graph::constant(g, pair_mask(&ms, axis));
            let n = a.value().sum().as_f64();
            if n < 1.0 {
                continue;
            }
            let diff = ds.slice(axis, 1, len - 1)?.sub(ds.slice(axis, 0, len - 1)?)?;
            let t = diff.mul(a)?.abs()?.sum()?.scale(1.0 / n)?;
            term = Some(match term {
                Some(acc) => acc.add(t)?,
                None => t,
            });
        }
        if let Some(t) = term {
            used += 1;
            total = Some(match total {
                Some(acc) => acc.add(t)?,
                None => t,
            });
        }
    }
    match total {
        Some(t) => t.scale(1.0 / used as f64),
        None => Err(Error::Data("no valid pixel pairs for gradient matching".into())),
    }
}

/// 1 where both neighbours along `axis` are valid.
fn pair_mask<T: Scalar>(m: &Tensor<T>, axis: usize) -> Tensor<T> {
    let (h, w) = (m.shape()[0], m.shape()[1]);
    let (oh, ow) = if axis == 0 { (h - 1, w) } else { (h, w - 1) };
    Tensor::from_fn(&[oh, ow], |i| {
        let (r, c) = (i / ow, i % ow);
        let (r2, c2) = if axis == 0 { (r + 1, c) } else { (r, c + 1) };
        m.at(&[r, c]) * m.at(&[r2, c2])
    })
}
