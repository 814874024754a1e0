//! Finite-difference gradient checks of every differentiable component, in
//! 64-bit, against randomized parameters.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use crate::depth::{gradient_matching_loss, scale_invariant_loss, DepthCodec};
use crate::error::{Error, Result};
use crate::model::backbone::{self, WindowGeometry};
use crate::model::grvit::{self, AttentionNorm, GrvitConfig, RecurrentState, TransferMode};
use crate::model::{stf, Bound, Init, ModelConfig, Network, ParamStore};
use crate::rng;
use crate::tensor::gradcheck::{grad_check_inputs, GradCheckReport};
use crate::tensor::{Graph, Tensor, Var};

/// Acceptance threshold on the maximum relative error.
pub const TOLERANCE: f64 = 1e-5;
/// Central-difference step.
pub const STEP: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckGroup {
    All,
    Backbone,
    Grvit,
    Stf,
    Loss,
}

impl FromStr for CheckGroup {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(CheckGroup::All),
            "backbone" => Ok(CheckGroup::Backbone),
            "grvit" => Ok(CheckGroup::Grvit),
            "stf" => Ok(CheckGroup::Stf),
            "loss" => Ok(CheckGroup::Loss),
            other => Err(Error::invalid(format!("unknown gradcheck module `{other}`"))),
        }
    }
}

/// Floor, as a fraction of the largest gradient component, under which the
/// whole-network check compares gradients absolutely.
pub const NETWORK_FLOOR: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: &'static str,
    pub report: GradCheckReport,
    /// Error the pass decision is based on.
    pub error: f64,
    pub seconds: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.error <= TOLERANCE
    }
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<18} {} max_rel_error={:.3e} coords={} ({:.1}s)",
            self.name,
            if self.passed() { "PASS" } else { "FAIL" },
            self.error,
            self.report.coordinates,
            self.seconds
        )
    }
}

fn randn(shape: &[usize], std: f64, name: &str) -> Tensor<f64> {
    rng::normal(shape, std, &mut rng::stream(17, name))
}

/// Replaces every parameter with a draw that makes all paths matter while
/// keeping activations near unit scale: matrices `N(0, gain²/fan_in)`,
/// vectors `N(0, 0.3²)`, norm gains around 1.
fn randomize(store: &mut ParamStore<f64>, gain: f64) {
    let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).collect();
    for n in names {
        let shape = store.get(&n).expect("listed name").shape().to_vec();
        let std = if n.ends_with(".w") { gain / (shape[0] as f64).sqrt() } else { 0.3 };
        let mut t = randn(&shape, std, &n);
        if n.ends_with(".g") {
            t = t.map(|v| 1.0 + v);
        }
        store.set(&n, t).expect("same shape");
    }
}

/// Weighted sum with fixed random weights, so no output direction cancels.
/// Scaled to keep the value near unit size, which bounds the rounding error
/// of the difference quotient.
fn probe<'g>(out: Var<'g, f64>) -> Result<Var<'g, f64>> {
    let shape = out.shape();
    let w = randn(&shape, 1.0 / (shape.iter().product::<usize>() as f64).sqrt(), "probe");
    out.mul(out.graph().constant(w))?.sum()
}

/// Checks `f` with respect to every parameter in `store` plus `data`.
fn check_params<F>(store: &ParamStore<f64>, data: &[Tensor<f64>], sample: Option<usize>, f: F) -> Result<GradCheckReport>
where
    F: for<'g> Fn(&Bound<'g, '_, f64>, &[Var<'g, f64>]) -> Result<Var<'g, f64>>,
{
    let np = store.len();
    let mut inputs: Vec<Tensor<f64>> = store.iter().map(|(_, t)| t.clone()).collect();
    inputs.extend_from_slice(data);
    grad_check_inputs(
        |g: &Graph<f64>, vars: &[Var<'_, f64>]| {
            let b = Bound::new(g, store, false);
            for (i, &v) in vars[..np].iter().enumerate() {
                b.set_var(store.name(i), v)?;
            }
            f(&b, &vars[np..])
        },
        &inputs,
        STEP,
        sample.map(|k| (k, 5)),
    )
}

fn store_with(gain: f64, declare: impl FnOnce(&mut Init<'_, f64>) -> Result<()>) -> Result<ParamStore<f64>> {
    let mut s = ParamStore::new();
    declare(&mut Init { store: &mut s, seed: 1 })?;
    randomize(&mut s, gain);
    Ok(s)
}

fn check_patch_embed() -> Result<GradCheckReport> {
    let s = store_with(1.0, |i| backbone::declare_patch_embed(i, "embed", 2, 4))?;
    let x = randn(&[2, 32, 32], 1.0, "embed.x");
    check_params(&s, &[x], Some(64), |b, v| probe(backbone::patch_embed(b, "embed", v[0])?))
}

fn check_block(shifted: bool) -> Result<GradCheckReport> {
    let geom = WindowGeometry::new(8, 8, 4, shifted)?;
    let s = store_with(1.0, |i| backbone::declare_block(i, "blk", 8, 2, 2, &geom))?;
    let x = randn(&[64, 8], 1.0, "blk.x");
    check_params(&s, &[x], Some(48), |b, v| probe(backbone::swin_block(b, "blk", v[0], &geom, 2, 1e-5)?))
}

fn check_merge() -> Result<GradCheckReport> {
    let s = store_with(1.0, |i| i.linear("m", 16, 8, false))?;
    let x = randn(&[64, 4], 1.0, "merge.x");
    check_params(&s, &[x], None, |b, v| probe(backbone::patch_merging(b, "m", v[0], 8, 8)?))
}

fn check_split() -> Result<GradCheckReport> {
    let s = store_with(1.0, |i| i.linear("sp", 8, 16, false))?;
    let x = randn(&[16, 8], 1.0, "split.x");
    check_params(&s, &[x], None, |b, v| probe(backbone::patch_splitting(b, "sp", v[0], 4, 4)?))
}

fn check_head() -> Result<GradCheckReport> {
    let s = store_with(1.0, |i| backbone::declare_depth_head(i, "head", 8))?;
    let x = randn(&[16, 8], 1.0, "head.x");
    check_params(&s, &[x], None, |b, v| probe(backbone::depth_head(b, "head", v[0], 4, 4, 1e-5)?))
}

fn check_stf() -> Result<GradCheckReport> {
    let regular = WindowGeometry::new(8, 8, 4, false)?;
    let shifted = WindowGeometry::new(8, 8, 4, true)?;
    let s = store_with(1.0, |i| stf::declare_stf(i, "stf", 8, 2, 2, [&regular, &shifted]))?;
    let d = randn(&[64, 8], 1.0, "stf.d");
    let f = randn(&[64, 8], 1.0, "stf.f");
    check_params(&s, &[d, f], Some(48), |b, v| {
        probe(stf::stf_fuse(b, "stf", v[0], v[1], [&regular, &shifted], 2, 1e-5)?.out)
    })
}

/// Two chained steps from a nonzero state; the probe reads both outputs and
/// the final state, so gradients pass through the gated update.
fn check_grvit(transfer: TransferMode, attention_norm: AttentionNorm) -> Result<GradCheckReport> {
    let (n, c) = (16, 8);
    let s = store_with(0.3, |i| grvit::declare(i, "gr", n, c, 2, transfer))?;
    let cfg = GrvitConfig {
        heads: 2,
        transfer,
        attention_norm,
        eps: 1e-5,
    };
    let data = [
        randn(&[n, c], 0.5, "gr.f1"),
        randn(&[n, c], 0.5, "gr.f2"),
        randn(&[n, c], 0.5, "gr.h0"),
    ];
    check_params(&s, &data, Some(48), |b, v| {
        let s1 = grvit::step(b, "gr", v[0], Some(RecurrentState::new(v[2], 0)), &cfg)?;
        let s2 = grvit::step(b, "gr", v[1], Some(s1.state), &cfg)?;
        let g = b.graph();
        probe(g.concat(&[s1.output, s2.output, s2.state.h], 0)?)
    })
}

/// Sensitivity of the last of four outputs to the first input, which only
/// reaches it through the recurrent state.
fn check_grvit_memory() -> Result<GradCheckReport> {
    let (n, c) = (16, 8);
    let s = store_with(0.3, |i| grvit::declare(i, "gr", n, c, 2, TransferMode::UpdateGate))?;
    let cfg = GrvitConfig {
        heads: 2,
        transfer: TransferMode::UpdateGate,
        attention_norm: AttentionNorm::None,
        eps: 1e-5,
    };
    let rest: Vec<Tensor<f64>> = (2..=4).map(|t| randn(&[n, c], 0.5, &format!("gr.f{t}"))).collect();
    grad_check_inputs(
        |g, v| {
            let b = Bound::new(g, &s, false);
            let mut feats = vec![v[0]];
            feats.extend(rest.iter().map(|t| g.constant(t.clone())));
            let outs = grvit::run_sequence(&b, "gr", &feats, &cfg)?;
            probe(outs[3])
        },
        &[randn(&[n, c], 0.5, "gr.f1")],
        STEP,
        None,
    )
}

fn log_maps() -> (Tensor<f64>, Tensor<f64>, Tensor<f64>) {
    let pred = randn(&[16, 16], 1.0, "loss.pred");
    let gt = randn(&[16, 16], 1.0, "loss.gt");
    let mask = Tensor::from_fn(&[16, 16], |i| if (i * 7) % 11 == 3 { 0.0 } else { 1.0 });
    (pred, gt, mask)
}

fn check_si_loss() -> Result<GradCheckReport> {
    let (pred, gt, mask) = log_maps();
    grad_check_inputs(
        |_, v| scale_invariant_loss(v[0], &gt, &mask, 0.85),
        &[pred],
        STEP,
        None,
    )
}

fn check_gm_loss() -> Result<GradCheckReport> {
    let (pred, gt, mask) = log_maps();
    grad_check_inputs(
        |_, v| gradient_matching_loss(v[0], &gt, &mask, 3),
        &[pred],
        STEP,
        None,
    )
}

/// The whole network at 32×32 over two bins, trained loss included.
fn check_network() -> Result<GradCheckReport> {
    let cfg = ModelConfig {
        height: 32,
        width: 32,
        embed_dim: 4,
        heads: [1, 1, 2, 2],
        encoder_depths: [2, 2, 2, 2],
        decoder_depths: [2, 2, 2, 2],
        mlp_ratio: 2,
        ..ModelConfig::default()
    };
    let mut net = Network::<f64>::new(cfg, 1)?;
    randomize(&mut net.params, 0.3);
    let codec = DepthCodec::default();
    let bins = [randn(&[2, 32, 32], 1.0, "net.x1"), randn(&[2, 32, 32], 1.0, "net.x2")];
    let gt = randn(&[32, 32], 0.5, "net.gt").map(|v| v + 2.5);
    let mask = Tensor::ones(&[32, 32]);
    let offset = codec.max_depth.ln() - codec.alpha;
    check_params(&net.params, &bins, Some(4), |b, v| {
        let mut states = Network::<f64>::empty_states();
        let mut total: Option<Var<'_, f64>> = None;
        for &x in v {
            let out = net.forward_bin(b, x, &mut states)?;
            let pred_log = out.depth.scale(codec.alpha)?.add_scalar(offset)?;
            let l = scale_invariant_loss(pred_log, &gt, &mask, 0.85)?;
            total = Some(match total {
                Some(t) => t.add(l)?,
                None => l,
            });
        }
        total.ok_or_else(|| Error::invalid("no bins"))
    })
}

type Check = (&'static str, fn() -> Result<GradCheckReport>);

fn checks(group: CheckGroup) -> Vec<Check> {
    let backbone: [Check; 7] = [
        ("patch_embed", check_patch_embed),
        ("wmsa_block", || check_block(false)),
        ("swmsa_block", || check_block(true)),
        ("patch_merging", check_merge),
        ("patch_splitting", check_split),
        ("depth_head", check_head),
        ("network_32x32", check_network),
    ];
    let grvit: [Check; 5] = [
        ("grvit_gate_2step", || check_grvit(TransferMode::UpdateGate, AttentionNorm::None)),
        ("grvit_kernel_norm", || check_grvit(TransferMode::UpdateGate, AttentionNorm::Kernel)),
        ("grvit_f1_to_out4", check_grvit_memory),
        ("grvit_attended", || check_grvit(TransferMode::Attended, AttentionNorm::None)),
        ("grvit_residual", || check_grvit(TransferMode::Residual, AttentionNorm::None)),
    ];
    let stf: [Check; 1] = [("stf_fuse", check_stf)];
    let loss: [Check; 2] = [("si_loss", check_si_loss), ("grad_match_loss", check_gm_loss)];
    match group {
        CheckGroup::All => backbone.into_iter().chain(grvit).chain(stf).chain(loss).collect(),
        CheckGroup::Backbone => backbone.to_vec(),
        CheckGroup::Grvit => grvit.to_vec(),
        CheckGroup::Stf => stf.to_vec(),
        CheckGroup::Loss => loss.to_vec(),
    }
}

/// Runs the checks of `group`, calling `report` after each one.
pub fn run_gradchecks(group: CheckGroup, mut on_result: impl FnMut(&CheckResult)) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for (name, f) in checks(group) {
        let t0 = Instant::now();
        let report = f()?;
        let error = if name == "network_32x32" {
            report.max_rel_error_scaled(NETWORK_FLOOR)
        } else {
            report.max_rel_error
        };
        let r = CheckResult {
            name,
            report,
            error,
            seconds: t0.elapsed().as_secs_f64(),
        };
        on_result(&r);
        out.push(r);
    }
    Ok(out)
}
