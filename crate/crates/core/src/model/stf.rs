//! Skip connections between the encoder/recurrent path and the decoder.

use serde::{Deserialize, Serialize};

use super::backbone::{declare_attention, declare_ffn, ffn, linear, norm, window_attention, WindowGeometry};
use super::params::{Bound, Init};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipMode {
    /// Two-stage windowed cross-attention fusion.
    #[default]
    Stf,
    Add,
    Concat,
}

impl std::str::FromStr for SkipMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "stf" => Ok(SkipMode::Stf),
            "add" => Ok(SkipMode::Add),
            "concat" => Ok(SkipMode::Concat),
            other => Err(Error::invalid(format!("unknown skip mode `{other}`"))),
        }
    }
}

pub fn declare_stf<T: Scalar>(
    init: &mut Init<'_, T>,
    p: &str,
    c: usize,
    heads: usize,
    ratio: usize,
    geoms: [&WindowGeometry; 2],
) -> Result<()> {
    for (s, geom) in geoms.iter().enumerate() {
        let ps = format!("{p}.s{s}");
        init.norm(&format!("{ps}.norm_q"), c)?;
        init.norm(&format!("{ps}.norm_kv"), c)?;
        declare_attention(init, &format!("{ps}.attn"), c, heads, geom.table_rows())?;
        init.norm(&format!("{ps}.norm_ffn"), c)?;
        declare_ffn(init, &format!("{ps}.ffn"), c, ratio)?;
    }
    Ok(())
}

/// Result of [`stf_fuse`].
pub struct Fused<'g, T: Scalar> {
    pub out: Var<'g, T>,
    /// Cross-attention weights of the regular and the shifted stage.
    pub probs: [Var<'g, T>; 2],
}

/// `d̃ = X(d, f̂) + FFN(X(d, f̂))` with regular windows, the same with shifted
/// windows on `(d̃, f̂)`, then the outer residual `d̂ = d̄ + d`. Queries come from
/// the decoder side, keys and values from `f̂`.
pub fn stf_fuse<'g, T: Scalar>(
    b: &Bound<'g, '_, T>,
    p: &str,
    d: Var<'g, T>,
    f: Var<'g, T>,
    geoms: [&WindowGeometry; 2],
    heads: usize,
    eps: f64,
) -> Result<Fused<'g, T>> {
    if d.shape() != f.shape() {
        return Err(Error::shape(format!("STF operands differ: {:?} vs {:?}", d.shape(), f.shape())));
    }
    let mut x = d;
    let mut probs = Vec::with_capacity(2);
    for (s, geom) in geoms.iter().enumerate() {
        let ps = format!("{p}.s{s}");
        let q = norm(b, &format!("{ps}.norm_q"), x, eps)?;
        let kv = norm(b, &format!("{ps}.norm_kv"), f, eps)?;
        let att = window_attention(b, &format!("{ps}.attn"), q, kv, geom, heads)?;
        let y = norm(b, &format!("{ps}.norm_ffn"), att.out, eps)?;
        x = att.out.add(ffn(b, &format!("{ps}.ffn"), y)?)?;
        probs.push(att.probs);
    }
    Ok(Fused {
        out: x.add(d)?,
        probs: [probs[0], probs[1]],
    })
}

pub fn skip_add<'g, T: Scalar>(d: Var<'g, T>, f: Var<'g, T>) -> Result<Var<'g, T>> {
    if d.shape() != f.shape() {
        return Err(Error::shape(format!("skip operands differ: {:?} vs {:?}", d.shape(), f.shape())));
    }
    d.add(f)
}

pub fn declare_concat<T: Scalar>(init: &mut Init<'_, T>, p: &str, c: usize) -> Result<()> {
    init.linear(p, 2 * c, c, true)
}

/// Channel concat `[d | f]` then a `2C → C` projection.
pub fn skip_concat<'g, T: Scalar>(b: &Bound<'g, '_, T>, p: &str, d: Var<'g, T>, f: Var<'g, T>) -> Result<Var<'g, T>> {
    if d.shape() != f.shape() {
        return Err(Error::shape(format!("skip operands differ: {:?} vs {:?}", d.shape(), f.shape())));
    }
    let x = b.graph().concat(&[d, f], 1)?;
    linear(b, p, x, true)
}
