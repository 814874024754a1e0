//! Gate recurrent vision transformer unit: linear-attention gate over the
//! current features and the hidden state, an FFN output path and a gated
//! hidden-state update.

use std::cell::Cell;

use serde::{Deserialize, Serialize};

use super::backbone::{declare_ffn, ffn, linear, norm};
use super::params::{Bound, Init};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor, Var};

/// How the next hidden state is formed from `h_{t−1}` and the attended `A_t`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransferMode {
    /// `h_t = (1 − U_t)⊙h_{t−1} + U_t⊙A_t`
    #[default]
    #[serde(alias = "gate")]
    UpdateGate,
    /// `h_t = A_t`
    Attended,
    /// `h_t = h_{t−1} + A_t`
    Residual,
}

impl std::str::FromStr for TransferMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gate" | "update_gate" => Ok(TransferMode::UpdateGate),
            "attended" => Ok(TransferMode::Attended),
            "residual" => Ok(TransferMode::Residual),
            other => Err(Error::invalid(format!("unknown transfer mode `{other}`"))),
        }
    }
}

/// Optional normalization of the linear attention.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionNorm {
    /// `φ(Q)(φ(K)ᵀV)` as is. Cubic in feature scale, so activations can run
    /// away during training.
    None,
    /// Each row divided by `φ(q_i)·Σ_j φ(k_j)`.
    #[default]
    Kernel,
}

thread_local! {
    static LIVE: Cell<usize> = const { Cell::new(0) };
    static PEAK: Cell<usize> = const { Cell::new(0) };
}

/// Number of [`RecurrentState`] values alive on this thread.
pub fn live_states() -> usize {
    LIVE.with(Cell::get)
}

/// Highest [`live_states`] seen since the last [`reset_peak_states`].
pub fn peak_live_states() -> usize {
    PEAK.with(Cell::get)
}

pub fn reset_peak_states() {
    PEAK.with(|p| p.set(live_states()));
}

#[derive(Debug)]
struct LiveToken;

impl LiveToken {
    fn new() -> Self {
        let n = LIVE.with(|l| {
            l.set(l.get() + 1);
            l.get()
        });
        PEAK.with(|p| p.set(p.get().max(n)));
        LiveToken
    }
}

impl Drop for LiveToken {
    fn drop(&mut self) {
        LIVE.with(|l| l.set(l.get() - 1));
    }
}

/// Hidden state of one scale, `[N, Cs]`, with the 1-based bin that produced it
/// (0 for the initial zero state).
#[derive(Debug)]
pub struct RecurrentState<H> {
    pub h: H,
    pub bin: usize,
    _live: LiveToken,
}

impl<H> RecurrentState<H> {
    pub fn new(h: H, bin: usize) -> Self {
        RecurrentState {
            h,
            bin,
            _live: LiveToken::new(),
        }
    }
}

impl<T: Scalar> RecurrentState<Tensor<T>> {
    pub fn zeros(n: usize, c: usize) -> Self {
        Self::new(Tensor::zeros(&[n, c]), 0)
    }
}

impl<'g, T: Scalar> RecurrentState<Var<'g, T>> {
    /// The state as a constant of the tape, cutting gradient flow to earlier bins.
    pub fn detach(self) -> Self {
        RecurrentState::new(self.h.detach(), self.bin)
    }

    pub fn to_tensor(&self) -> RecurrentState<Tensor<T>> {
        RecurrentState::new((*self.h.value()).clone(), self.bin)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GrvitConfig {
    pub heads: usize,
    pub transfer: TransferMode,
    pub attention_norm: AttentionNorm,
    pub eps: f64,
}

pub fn declare<T: Scalar>(init: &mut Init<'_, T>, p: &str, n: usize, c: usize, ratio: usize, transfer: TransferMode) -> Result<()> {
    for w in ["q_f", "k_f", "v_f", "q_h", "k_h", "v_h"] {
        init.linear(&format!("{p}.{w}"), c, c, false)?;
    }
    // zero output projection: the unit starts as a residual FFN with a zero state
    init.tensor(&format!("{p}.out.w"), Tensor::zeros(&[c, c]))?;
    init.tensor(&format!("{p}.out.b"), Tensor::zeros(&[c]))?;
    if transfer == TransferMode::UpdateGate {
        init.linear(&format!("{p}.gate"), 2 * c, c, true)?;
    }
    init.norm(&format!("{p}.norm"), c)?;
    init.tensor(&format!("{p}.state_norm.g"), Tensor::ones(&[c]))?;
    declare_ffn(init, &format!("{p}.ffn"), c, ratio)?;
    init.trunc_normal(&format!("{p}.pos"), &[n, c])
}

/// `elu(x) + 1`
pub fn feature_map<'g, T: Scalar>(x: Var<'g, T>) -> Result<Var<'g, T>> {
    x.elu()?.add_scalar(1.0)
}

/// Multi-head linear attention over `[N, C]` operands, computed right-associated
/// as `φ(Q)·(φ(K)ᵀ·V)` per head.
pub fn linear_attention<'g, T: Scalar>(
    q: Var<'g, T>,
    k: Var<'g, T>,
    v: Var<'g, T>,
    heads: usize,
    norm: AttentionNorm,
) -> Result<Var<'g, T>> {
    let s = q.shape();
    if s.len() != 2 || k.shape() != s || v.shape() != s {
        return Err(Error::shape(format!(
            "linear attention operands {:?}, {:?}, {:?}",
            s,
            k.shape(),
            v.shape()
        )));
    }
    let (n, c) = (s[0], s[1]);
    if heads == 0 || c % heads != 0 {
        return Err(Error::shape(format!("{heads} heads do not divide {c} channels")));
    }
    let d = c / heads;
    let split = |x: Var<'g, T>| x.reshape(&[n, heads, d])?.permute(&[1, 0, 2]);
    let qf = split(feature_map(q)?)?;
    let kf = split(feature_map(k)?)?;
    let vh = split(v)?;
    let kv = kf.matmul_at(vh)?;
    let mut a = qf.matmul(kv)?;
    if norm == AttentionNorm::Kernel {
        let z = qf.matmul_bt(kf.sum_axis(1)?)?;
        a = a.div(z)?;
    }
    a.permute(&[1, 0, 2])?.reshape(&[n, c])
}

/// `A_t`: projections of the positioned features `f` and the normalized previous
/// state `h`, linear attention, then the output projection.
pub fn attention_gate<'g, T: Scalar>(
    b: &Bound<'g, '_, T>,
    p: &str,
    f: Var<'g, T>,
    h: Var<'g, T>,
    cfg: &GrvitConfig,
) -> Result<Var<'g, T>> {
    if f.shape() != h.shape() {
        return Err(Error::shape(format!("features {:?} vs state {:?}", f.shape(), h.shape())));
    }
    let proj = |name: &str| -> Result<Var<'g, T>> {
        let from_f = linear(b, &format!("{p}.{name}_f"), f, false)?;
        let from_h = linear(b, &format!("{p}.{name}_h"), h, false)?;
        from_f.add(from_h)
    };
    let (q, k, v) = (proj("q")?, proj("k")?, proj("v")?);
    let a = linear_attention(q, k, v, cfg.heads, cfg.attention_norm)?;
    linear(b, &format!("{p}.out"), a, true)
}

/// Everything one step produces.
pub struct Step<'g, T: Scalar> {
    /// `f̂_t = A_t + f + FFN(LN(A_t + f))`
    pub output: Var<'g, T>,
    pub state: RecurrentState<Var<'g, T>>,
    pub attended: Var<'g, T>,
    /// `U_t`, present in update-gate mode.
    pub gate: Option<Var<'g, T>>,
}

/// Layer norm without bias, so the zero state stays zero and the projections
/// stay linear in it.
pub fn state_norm<'g, T: Scalar>(b: &Bound<'g, '_, T>, p: &str, h: Var<'g, T>, eps: f64) -> Result<Var<'g, T>> {
    let g = b.param(&format!("{p}.state_norm"), "g")?;
    let zero = b.graph().constant(Tensor::zeros(&g.shape()));
    h.layer_norm(g, zero, eps)
}

/// One recurrent step. `state = None` stands for the zero initial state.
pub fn step<'g, T: Scalar>(
    b: &Bound<'g, '_, T>,
    p: &str,
    f_t: Var<'g, T>,
    state: Option<RecurrentState<Var<'g, T>>>,
    cfg: &GrvitConfig,
) -> Result<Step<'g, T>> {
    let shape = f_t.shape();
    let (h, prev_bin) = match state {
        Some(s) => (s.h, s.bin),
        None => (b.graph().constant(Tensor::zeros(&shape)), 0),
    };
    let f = f_t.add(b.param(p, "pos")?)?;
    let hn = state_norm(b, p, h, cfg.eps)?;
    let a = attention_gate(b, p, f, hn, cfg)?;
    let af = a.add(f)?;
    let output = af.add(ffn(b, &format!("{p}.ffn"), norm(b, &format!("{p}.norm"), af, cfg.eps)?)?)?;
    let (h_next, gate) = match cfg.transfer {
        TransferMode::UpdateGate => {
            let fh = b.graph().concat(&[f, hn], 1)?;
            let u = linear(b, &format!("{p}.gate"), fh, true)?.sigmoid()?;
            (h.convex_mix(a, u)?, Some(u))
        }
        TransferMode::Attended => (a, None),
        TransferMode::Residual => (h.add(a)?, None),
    };
    Ok(Step {
        output,
        state: RecurrentState::new(h_next, prev_bin + 1),
        attended: a,
        gate,
    })
}

/// Folds [`step`] over a feature sequence from the zero state. Only the state
/// being threaded through the fold is alive at any time.
pub fn run_sequence<'g, T: Scalar>(
    b: &Bound<'g, '_, T>,
    p: &str,
    features: &[Var<'g, T>],
    cfg: &GrvitConfig,
) -> Result<Vec<Var<'g, T>>> {
    if features.is_empty() {
        return Err(Error::invalid("run_sequence needs at least one bin"));
    }
    let mut state = None;
    let mut out = Vec::with_capacity(features.len());
    for &f in features {
        let s = step(b, p, f, state.take(), cfg)?;
        out.push(s.output);
        state = Some(s.state);
    }
    Ok(out)
}
