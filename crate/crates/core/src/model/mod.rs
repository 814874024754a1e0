//! The recurrent encoder/decoder depth network.

pub mod backbone;
pub mod checkpoint;
pub mod grvit;
pub mod params;
pub mod stf;

use serde::{Deserialize, Serialize};

use backbone::{depth_head, patch_embed, patch_merging, patch_splitting, swin_block, WindowGeometry};
use grvit::{AttentionNorm, GrvitConfig, RecurrentState, TransferMode};
pub use params::{Bound, Init, ParamStore};
use stf::SkipMode;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Var};

pub const LEVELS: usize = 4;

/// Which encoder scales carry a recurrent unit.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecurrentScales {
    #[default]
    All,
    Bottleneck,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    pub in_channels: usize,
    /// Channels `C` of the finest level; level `i` has `2^i·C`.
    pub embed_dim: usize,
    pub encoder_depths: [usize; LEVELS],
    pub decoder_depths: [usize; LEVELS],
    pub heads: [usize; LEVELS],
    pub window: usize,
    pub mlp_ratio: usize,
    pub norm_eps: f64,
    pub skip_mode: SkipMode,
    pub transfer_mode: TransferMode,
    pub recurrence: bool,
    pub recurrent_scales: RecurrentScales,
    pub attention_norm: AttentionNorm,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            height: 64,
            width: 64,
            in_channels: 2,
            embed_dim: 96,
            encoder_depths: [2, 2, 6, 2],
            decoder_depths: [2, 2, 2, 2],
            heads: [3, 6, 12, 24],
            window: 4,
            mlp_ratio: 4,
            norm_eps: 1e-5,
            skip_mode: SkipMode::Stf,
            transfer_mode: TransferMode::UpdateGate,
            recurrence: true,
            recurrent_scales: RecurrentScales::All,
            attention_norm: AttentionNorm::Kernel,
        }
    }
}

impl ModelConfig {
    /// `(Hs, Ws, Cs)` of level `i`.
    pub fn level_shape(&self, i: usize) -> (usize, usize, usize) {
        (self.height >> (i + 2), self.width >> (i + 2), self.embed_dim << i)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.height == 0 || self.width == 0 || self.height % 32 != 0 || self.width % 32 != 0 {
            return bad(format!("input {}x{} must be a positive multiple of 32", self.height, self.width));
        }
        if self.in_channels == 0 || self.embed_dim == 0 || self.mlp_ratio == 0 || self.window == 0 {
            return bad("channels, mlp_ratio and window must be positive".into());
        }
        if !(self.norm_eps > 0.0) {
            return bad(format!("norm_eps must be positive, got {}", self.norm_eps));
        }
        for i in 0..LEVELS {
            let (hs, ws, cs) = self.level_shape(i);
            if self.heads[i] == 0 || cs % self.heads[i] != 0 {
                return bad(format!("level {i}: {} heads do not divide {cs} channels", self.heads[i]));
            }
            let w = self.window.min(hs).min(ws);
            if hs % w != 0 || ws % w != 0 {
                return bad(format!("level {i}: window {w} does not divide grid {hs}x{ws}"));
            }
        }
        Ok(())
    }

    fn has_grvit(&self, level: usize) -> bool {
        self.recurrence && (self.recurrent_scales == RecurrentScales::All || level == LEVELS - 1)
    }

    fn grvit_config(&self, level: usize) -> GrvitConfig {
        GrvitConfig {
            heads: self.heads[level],
            transfer: self.transfer_mode,
            attention_norm: self.attention_norm,
            eps: self.norm_eps,
        }
    }
}

/// Features produced for one bin.
pub struct BinOutput<'g, T: Scalar> {
    /// Normalized depth `[H, W]` in (0, 1).
    pub depth: Var<'g, T>,
    /// Encoder features `f^0..f^3`.
    pub encoder: Vec<Var<'g, T>>,
    /// Recurrent outputs `f̂^0..f̂^3`.
    pub fused: Vec<Var<'g, T>>,
    /// Decoder features after each decoder layer, levels 3 down to 0.
    pub decoder: Vec<Var<'g, T>>,
}

/// Per-scale recurrent states on a tape; `None` is the zero state.
pub type TapeStates<'g, T> = Vec<Option<RecurrentState<Var<'g, T>>>>;

#[derive(Clone, Debug)]
pub struct Network<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    geoms: Vec<[WindowGeometry; 2]>,
}

fn geometries(cfg: &ModelConfig) -> Result<Vec<[WindowGeometry; 2]>> {
    (0..LEVELS)
        .map(|i| {
            let (hs, ws, _) = cfg.level_shape(i);
            Ok([
                WindowGeometry::new(hs, ws, cfg.window, false)?,
                WindowGeometry::new(hs, ws, cfg.window, true)?,
            ])
        })
        .collect()
}

/// Block `j` of a layer alternates regular and shifted windows.
fn block_geom(geoms: &[WindowGeometry; 2], j: usize) -> &WindowGeometry {
    &geoms[j % 2]
}

impl<T: Scalar> Network<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let geoms = geometries(&config)?;
        let mut params = ParamStore::new();
        declare(&config, &geoms, &mut Init { store: &mut params, seed })?;
        Ok(Network { config, params, geoms })
    }

    /// Wraps loaded parameters after checking they match the config's layout.
    pub fn from_parts(config: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        let fresh = Network::<T>::new(config.clone(), 0)?;
        if fresh.params.len() != params.len() {
            return Err(Error::Format(format!(
                "checkpoint holds {} parameters, config expects {}",
                params.len(),
                fresh.params.len()
            )));
        }
        for (name, t) in fresh.params.iter() {
            let got = params.get(name).map_err(|_| Error::Format(format!("checkpoint lacks `{name}`")))?;
            if got.shape() != t.shape() {
                return Err(Error::Format(format!(
                    "parameter `{name}` has shape {:?}, config expects {:?}",
                    got.shape(),
                    t.shape()
                )));
            }
        }
        Ok(Network {
            config,
            params,
            geoms: fresh.geoms,
        })
    }

    pub fn geometry(&self, level: usize, shifted: bool) -> &WindowGeometry {
        &self.geoms[level][usize::from(shifted)]
    }

    pub fn empty_states<'g>() -> TapeStates<'g, T> {
        (0..LEVELS).map(|_| None).collect()
    }

    /// Encoder → recurrent units → decoder with skip fusion → depth head, for
    /// one event image `[C_e, H, W]`. `states` is updated in place.
    pub fn forward_bin<'g>(
        &self,
        b: &Bound<'g, '_, T>,
        input: Var<'g, T>,
        states: &mut TapeStates<'g, T>,
    ) -> Result<BinOutput<'g, T>> {
        let cfg = &self.config;
        let expect = [cfg.in_channels, cfg.height, cfg.width];
        if input.shape() != expect {
            return Err(Error::shape(format!(
                "input {:?} does not match configured {:?}",
                input.shape(),
                expect
            )));
        }
        if states.len() != LEVELS {
            return Err(Error::invalid(format!("expected {LEVELS} state slots, got {}", states.len())));
        }
        let encoder = self.encode(b, input)?;
        let mut fused = Vec::with_capacity(LEVELS);
        for (i, &f) in encoder.iter().enumerate() {
            if cfg.has_grvit(i) {
                let s = grvit::step(b, &format!("grvit.{i}"), f, states[i].take(), &cfg.grvit_config(i))?;
                states[i] = Some(s.state);
                fused.push(s.output);
            } else {
                fused.push(f);
            }
        }
        let decoder = self.decode(b, &fused)?;
        let d = *decoder.last().expect("four decoder levels");
        let eps = cfg.norm_eps;
        let (hs, ws, _) = cfg.level_shape(0);
        let depth = depth_head(b, "head", d, hs, ws, eps)?;
        Ok(BinOutput {
            depth,
            encoder,
            fused,
            decoder,
        })
    }

    /// Patch embedding and the four encoder layers, giving `f^0..f^3`.
    pub fn encode<'g>(&self, b: &Bound<'g, '_, T>, input: Var<'g, T>) -> Result<Vec<Var<'g, T>>> {
        let cfg = &self.config;
        let mut encoder = Vec::with_capacity(LEVELS);
        let mut x = patch_embed(b, "embed", input)?;
        for i in 0..LEVELS {
            if i > 0 {
                let (hs, ws, _) = cfg.level_shape(i - 1);
                x = patch_merging(b, &format!("enc.{i}.merge"), x, hs, ws)?;
            }
            for j in 0..cfg.encoder_depths[i] {
                x = swin_block(b, &format!("enc.{i}.block.{j}"), x, block_geom(&self.geoms[i], j), cfg.heads[i], cfg.norm_eps)?;
            }
            encoder.push(x);
        }
        Ok(encoder)
    }

    /// Decoder from the bottleneck `skips[3]`, fusing `skips[2..0]` on the way
    /// up. Returns the features after each decoder layer, levels 3 down to 0.
    pub fn decode<'g>(&self, b: &Bound<'g, '_, T>, skips: &[Var<'g, T>]) -> Result<Vec<Var<'g, T>>> {
        let cfg = &self.config;
        if skips.len() != LEVELS {
            return Err(Error::invalid(format!("decoder needs {LEVELS} skip features, got {}", skips.len())));
        }
        let eps = cfg.norm_eps;
        let mut decoder = Vec::with_capacity(LEVELS);
        let mut d = skips[LEVELS - 1];
        for i in (0..LEVELS).rev() {
            if i < LEVELS - 1 {
                let (hs, ws, _) = cfg.level_shape(i + 1);
                d = patch_splitting(b, &format!("dec.{}.split", i + 1), d, hs, ws)?;
                d = match cfg.skip_mode {
                    SkipMode::Stf => {
                        let g = &self.geoms[i];
                        stf::stf_fuse(b, &format!("stf.{i}"), d, skips[i], [&g[0], &g[1]], cfg.heads[i], eps)?.out
                    }
                    SkipMode::Add => stf::skip_add(d, skips[i])?,
                    SkipMode::Concat => stf::skip_concat(b, &format!("skip.{i}"), d, skips[i])?,
                };
            }
            for j in 0..cfg.decoder_depths[i] {
                d = swin_block(b, &format!("dec.{i}.block.{j}"), d, block_geom(&self.geoms[i], j), cfg.heads[i], eps)?;
            }
            decoder.push(d);
        }
        Ok(decoder)
    }
}

fn declare<T: Scalar>(cfg: &ModelConfig, geoms: &[[WindowGeometry; 2]], init: &mut Init<'_, T>) -> Result<()> {
    let r = cfg.mlp_ratio;
    backbone::declare_patch_embed(init, "embed", cfg.in_channels, cfg.embed_dim)?;
    for i in 0..LEVELS {
        let (hs, ws, c) = cfg.level_shape(i);
        if i > 0 {
            init.linear(&format!("enc.{i}.merge"), 2 * c, c, false)?;
        }
        for j in 0..cfg.encoder_depths[i] {
            backbone::declare_block(init, &format!("enc.{i}.block.{j}"), c, cfg.heads[i], r, block_geom(&geoms[i], j))?;
        }
        if cfg.has_grvit(i) {
            grvit::declare(init, &format!("grvit.{i}"), hs * ws, c, r, cfg.transfer_mode)?;
        }
    }
    for i in (0..LEVELS).rev() {
        let (_, _, c) = cfg.level_shape(i);
        if i < LEVELS - 1 {
            init.linear(&format!("dec.{}.split", i + 1), 2 * c, 4 * c, false)?;
            match cfg.skip_mode {
                SkipMode::Stf => stf::declare_stf(init, &format!("stf.{i}"), c, cfg.heads[i], r, [&geoms[i][0], &geoms[i][1]])?,
                SkipMode::Add => {}
                SkipMode::Concat => stf::declare_concat(init, &format!("skip.{i}"), c)?,
            }
        }
        for j in 0..cfg.decoder_depths[i] {
            backbone::declare_block(init, &format!("dec.{i}.block.{j}"), c, cfg.heads[i], r, block_geom(&geoms[i], j))?;
        }
    }
    backbone::declare_depth_head(init, "head", cfg.embed_dim)
}
