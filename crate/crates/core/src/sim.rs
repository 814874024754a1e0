//! Synthetic event sequences with exact depth ground truth.
//!
//! A pinhole camera (focal length `W` pixels) translates laterally in front of
//! textured fronto-parallel planes. Log intensity is rendered at a fixed
//! internal frame rate and every pixel fires an event each time its log
//! intensity moves one contrast threshold away from the level of its last
//! event, with the crossing time interpolated linearly between frames.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::depth::{pfm, DepthMap};
use crate::error::{Error, Result};
use crate::events::{read_binary, write_binary, Event, EventStream, Polarity};
use crate::rng;

/// Simulation aborts beyond this many events.
pub const MAX_EVENTS: usize = 100_000_000;

/// Side lengths must be multiples of this (patch size times three merges).
pub const SIZE_MULTIPLE: u32 = 32;

fn default_threshold() -> f64 {
    0.2
}

fn default_frame_rate() -> f64 {
    1000.0
}

fn default_texel() -> f64 {
    4.0
}

/// A textured plane parallel to the image plane.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Plane {
    /// Distance along the optical axis in meters.
    pub depth: f64,
    pub texture_seed: u64,
    /// World-space `[x0, y0, x1, y1]` in meters; unbounded when absent.
    #[serde(default)]
    pub extent: Option<[f64; 4]>,
    /// Texture cell size as seen from the camera, in pixels.
    #[serde(default = "default_texel")]
    pub texel_px: f64,
}

impl Plane {
    fn contains(&self, x: f64, y: f64) -> bool {
        match self.extent {
            None => true,
            Some([x0, y0, x1, y1]) => x >= x0 && x < x1 && y >= y0 && y < y1,
        }
    }
}

/// Constant camera velocity over a time span.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MotionSegment {
    pub duration_us: u64,
    /// Lateral velocity `[vx, vy]` in m/s.
    pub velocity: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub width: u32,
    pub height: u32,
    pub duration_us: u64,
    /// Depth maps are rendered at the end of every bin of this length.
    pub bin_us: u64,
    /// Used for the whole sequence when `motion` is empty.
    #[serde(default)]
    pub velocity: [f64; 2],
    /// Piecewise-constant motion; the camera rests after the last segment.
    #[serde(default)]
    pub motion: Vec<MotionSegment>,
    pub planes: Vec<Plane>,
    /// Contrast threshold in log-intensity units.
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    #[serde(default = "default_frame_rate")]
    pub frame_rate_hz: f64,
    #[serde(default)]
    pub seed: u64,
}

/// Events plus one depth map per bin, aligned to bin ends.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSequence {
    pub stream: EventStream,
    pub bin_us: u64,
    pub depths: Vec<DepthMap>,
}

impl LabeledSequence {
    pub fn bins(&self) -> usize {
        self.depths.len()
    }
}

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn lattice(seed: u64, i: i64, j: i64) -> f64 {
    let h = mix(seed ^ mix((i as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ mix(j as u64)));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn smooth(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Smooth value noise in `[0, 1)` over lattice cells of unit size.
fn value_noise(seed: u64, x: f64, y: f64) -> f64 {
    let (fx, fy) = (x.floor(), y.floor());
    let (i, j) = (fx as i64, fy as i64);
    let (tx, ty) = (smooth(x - fx), smooth(y - fy));
    let a = lattice(seed, i, j) * (1.0 - tx) + lattice(seed, i + 1, j) * tx;
    let b = lattice(seed, i, j + 1) * (1.0 - tx) + lattice(seed, i + 1, j + 1) * tx;
    a * (1.0 - ty) + b * ty
}

/// Intensity where no plane is hit.
const BACKGROUND: f64 = 0.5;

impl SceneSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let s: SceneSpec = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.width == 0 || self.height == 0 || self.width % SIZE_MULTIPLE != 0 || self.height % SIZE_MULTIPLE != 0 {
            return bad(format!(
                "sensor {}x{} must be a nonzero multiple of {SIZE_MULTIPLE} on both sides",
                self.width, self.height
            ));
        }
        if self.width > u32::from(u16::MAX) || self.height > u32::from(u16::MAX) {
            return bad("sensor too large for 16-bit coordinates".into());
        }
        if self.duration_us == 0 || self.bin_us == 0 {
            return bad("duration and bin length must be positive".into());
        }
        if !(self.threshold > 0.0 && self.threshold.is_finite()) {
            return bad(format!("contrast threshold must be positive, got {}", self.threshold));
        }
        if !(self.frame_rate_hz > 0.0 && 1e6 / self.frame_rate_hz >= 1.0) {
            return bad(format!("frame rate {} Hz out of range", self.frame_rate_hz));
        }
        for (i, p) in self.planes.iter().enumerate() {
            if !(p.depth > 0.0 && p.depth.is_finite()) {
                return bad(format!("plane {i}: depth must be positive, got {}", p.depth));
            }
            if !(p.texel_px > 0.0) {
                return bad(format!("plane {i}: texel size must be positive"));
            }
        }
        let v = self.motion.iter().flat_map(|m| m.velocity).chain(self.velocity);
        if v.into_iter().any(|c| !c.is_finite()) {
            return bad("velocities must be finite".into());
        }
        Ok(())
    }

    pub fn focal_px(&self) -> f64 {
        f64::from(self.width)
    }

    /// Number of bins, the last one possibly partial.
    pub fn bins(&self) -> usize {
        self.duration_us.div_ceil(self.bin_us) as usize
    }

    /// Camera position `[x, y]` in meters at time `t_us`.
    pub fn camera_position(&self, t_us: f64) -> [f64; 2] {
        if self.motion.is_empty() {
            let s = t_us * 1e-6;
            return [self.velocity[0] * s, self.velocity[1] * s];
        }
        let mut pos = [0.0; 2];
        let mut start = 0.0;
        for m in &self.motion {
            let dt = (t_us - start).clamp(0.0, m.duration_us as f64) * 1e-6;
            pos[0] += m.velocity[0] * dt;
            pos[1] += m.velocity[1] * dt;
            start += m.duration_us as f64;
        }
        pos
    }

    /// Index of the nearest plane seen through pixel `(u, v)`, with its world hit point.
    fn hit(&self, cam: [f64; 2], u: usize, v: usize) -> Option<(usize, f64, f64)> {
        let f = self.focal_px();
        let rx = (u as f64 + 0.5 - f64::from(self.width) / 2.0) / f;
        let ry = (v as f64 + 0.5 - f64::from(self.height) / 2.0) / f;
        let mut best: Option<(usize, f64, f64)> = None;
        for (i, p) in self.planes.iter().enumerate() {
            if best.is_some_and(|(b, _, _)| self.planes[b].depth <= p.depth) {
                continue;
            }
            let (x, y) = (cam[0] + p.depth * rx, cam[1] + p.depth * ry);
            if p.contains(x, y) {
                best = Some((i, x, y));
            }
        }
        best
    }

    fn intensity_at(&self, cam: [f64; 2], u: usize, v: usize) -> f64 {
        match self.hit(cam, u, v) {
            None => BACKGROUND,
            Some((i, x, y)) => {
                let p = &self.planes[i];
                // texture cells keep a constant apparent size at every depth
                let cell = p.depth * p.texel_px / self.focal_px();
                let seed = mix(self.seed ^ mix(p.texture_seed.wrapping_add(i as u64)));
                0.1 + 0.9 * value_noise(seed, x / cell, y / cell)
            }
        }
    }

    /// Row-major `[H, W]` intensities in `(0, 1]` at time `t_us`.
    pub fn render_intensity(&self, t_us: f64) -> Vec<f64> {
        let cam = self.camera_position(t_us);
        let (w, h) = (self.width as usize, self.height as usize);
        (0..w * h).map(|i| self.intensity_at(cam, i % w, i / w)).collect()
    }

    /// Metric depth of the nearest plane per pixel; 0 and masked where nothing is hit.
    pub fn render_depth(&self, t_us: f64) -> Result<DepthMap> {
        let cam = self.camera_position(t_us);
        let (w, h) = (self.width as usize, self.height as usize);
        let values = (0..w * h)
            .map(|i| self.hit(cam, i % w, i / w).map_or(0.0, |(p, _, _)| self.planes[p].depth as f32))
            .collect();
        DepthMap::from_values(w, h, values)
    }

    /// Simulates the event stream and the per-bin ground truth.
    pub fn emit_events(&self) -> Result<LabeledSequence> {
        self.validate()?;
        let w = self.width as usize;
        let frame_us = 1e6 / self.frame_rate_hz;
        let frames = (self.duration_us as f64 / frame_us).ceil() as usize;
        let log = |t: f64| -> Vec<f64> { self.render_intensity(t).into_iter().map(f64::ln).collect() };
        let mut prev = log(0.0);
        let mut reference = prev.clone();
        let mut events = Vec::new();
        let theta = self.threshold;
        for k in 0..frames {
            let t0 = k as f64 * frame_us;
            let t1 = ((k + 1) as f64 * frame_us).min(self.duration_us as f64);
            let next = log(t1);
            for (i, (&l0, &l1)) in prev.iter().zip(&next).enumerate() {
                let slope = l1 - l0;
                if slope == 0.0 {
                    continue;
                }
                let (step, p) = if slope > 0.0 {
                    (theta, Polarity::Positive)
                } else {
                    (-theta, Polarity::Negative)
                };
                let r = &mut reference[i];
                while (l1 - (*r + step)) * step.signum() >= 0.0 {
                    *r += step;
                    let frac = (*r - l0) / slope;
                    let t = (t0 + frac * (t1 - t0)).floor() as u64;
                    let t = t.min(self.duration_us - 1);
                    events.push(Event::new(t, (i % w) as u16, (i / w) as u16, p));
                    if events.len() > MAX_EVENTS {
                        return Err(Error::Data(format!(
                            "simulation exceeded {MAX_EVENTS} events; raise the threshold or shorten the scene"
                        )));
                    }
                }
            }
            prev = next;
        }
        events.sort_by_key(|e| (e.t, e.y, e.x, e.p.sign()));
        let stream = EventStream::new(self.width, self.height, 0, self.duration_us, events)?;
        let depths = (1..=self.bins())
            .map(|b| self.render_depth((b as u64 * self.bin_us).min(self.duration_us) as f64))
            .collect::<Result<Vec<_>>>()?;
        Ok(LabeledSequence {
            stream,
            bin_us: self.bin_us,
            depths,
        })
    }
}

/// Recipe for a set of random scenes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub width: u32,
    pub height: u32,
    pub sequences: usize,
    pub bins_per_sequence: usize,
    pub bin_us: u64,
    pub threshold: f64,
    pub seed: u64,
    /// Depth range `[near, far]` in meters for all planes.
    pub depth_range: [f64; 2],
    /// Camera speed range in m/s for moving segments.
    pub speed_range: [f64; 2],
    /// Number of rectangles in front of the background plane, inclusive range.
    pub foreground: [usize; 2],
    /// Probability that a motion segment is a pause.
    pub pause_probability: f64,
    /// Segment length range in bins.
    pub segment_bins: [usize; 2],
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            width: 64,
            height: 64,
            sequences: 5,
            bins_per_sequence: 16,
            bin_us: crate::events::DEFAULT_BIN_US,
            threshold: default_threshold(),
            seed: 0,
            depth_range: [2.5, 40.0],
            speed_range: [1.0, 3.0],
            foreground: [1, 3],
            pause_probability: 0.3,
            segment_bins: [1, 4],
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        let [near, far] = self.depth_range;
        if !(near > 0.0 && far >= near) {
            return bad("depth_range must be 0 < near <= far");
        }
        if !(self.speed_range[0] >= 0.0 && self.speed_range[1] >= self.speed_range[0]) {
            return bad("speed_range must be 0 <= lo <= hi");
        }
        if self.foreground[0] > self.foreground[1] || self.segment_bins[0] == 0 || self.segment_bins[0] > self.segment_bins[1] {
            return bad("foreground and segment_bins must be ordered ranges, segments at least one bin");
        }
        if !(0.0..=1.0).contains(&self.pause_probability) {
            return bad("pause_probability must lie in [0, 1]");
        }
        if self.sequences == 0 || self.bins_per_sequence == 0 {
            return bad("need at least one sequence of one bin");
        }
        Ok(())
    }

    /// Scene `index`, a pure function of the spec and the index.
    pub fn scene(&self, index: usize) -> SceneSpec {
        let mut r = rng::stream(self.seed, &format!("scene/{index}"));
        let [near, far] = self.depth_range;
        // log-uniform depths spread the samples evenly in inverse depth
        let depth = |r: &mut rand_chacha::ChaCha8Rng, lo: f64, hi: f64| (r.random_range(lo.ln()..=hi.ln())).exp();
        let back = depth(&mut r, (near * far).sqrt().max(near), far);
        let mut planes = vec![Plane {
            depth: back,
            texture_seed: r.random(),
            extent: None,
            texel_px: r.random_range(3.0..6.0),
        }];
        let duration_us = self.bin_us * self.bins_per_sequence as u64;
        let mut motion = Vec::new();
        let mut covered = 0;
        while covered < self.bins_per_sequence {
            let bins = r.random_range(self.segment_bins[0]..=self.segment_bins[1]).min(self.bins_per_sequence - covered);
            // the first segment always moves so every sequence starts with events
            let velocity = if !motion.is_empty() && r.random_bool(self.pause_probability) {
                [0.0, 0.0]
            } else {
                let speed = r.random_range(self.speed_range[0]..=self.speed_range[1]);
                let angle = r.random_range(0.0..std::f64::consts::TAU);
                [speed * angle.cos(), speed * angle.sin()]
            };
            motion.push(MotionSegment {
                duration_us: bins as u64 * self.bin_us,
                velocity,
            });
            covered += bins;
        }
        let probe = SceneSpec {
            width: self.width,
            height: self.height,
            duration_us,
            bin_us: self.bin_us,
            velocity: [0.0; 2],
            motion,
            planes: Vec::new(),
            threshold: self.threshold,
            frame_rate_hz: default_frame_rate(),
            seed: r.random(),
        };
        // place rectangles around the mid-sequence line of sight
        let mid = probe.camera_position(duration_us as f64 / 2.0);
        let count = r.random_range(self.foreground[0]..=self.foreground[1]);
        for _ in 0..count {
            let d = depth(&mut r, near, back.min(far));
            let half_fov = f64::from(self.width) / 2.0 / probe.focal_px();
            let span = d * half_fov;
            let cx = mid[0] + r.random_range(-span..span);
            let cy = mid[1] + r.random_range(-span..span);
            let hw = span * r.random_range(0.25..0.7);
            let hh = span * r.random_range(0.25..0.7);
            planes.push(Plane {
                depth: d,
                texture_seed: r.random(),
                extent: Some([cx - hw, cy - hh, cx + hw, cy + hh]),
                texel_px: r.random_range(3.0..6.0),
            });
        }
        SceneSpec { planes, ..probe }
    }

    pub fn scenes(&self) -> Vec<SceneSpec> {
        (0..self.sequences).map(|i| self.scene(i)).collect()
    }
}

/// Contents of a `simulate` spec file: one explicit scene or a random dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateSpec {
    #[serde(default)]
    pub scene: Option<SceneSpec>,
    #[serde(default)]
    pub dataset: Option<DatasetSpec>,
}

impl SimulateSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let s: SimulateSpec = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        match (&s.scene, &s.dataset) {
            (Some(sc), None) => sc.validate()?,
            (None, Some(d)) => d.validate()?,
            _ => return Err(Error::Config("spec needs exactly one of [scene] or [dataset]".into())),
        }
        Ok(s)
    }

    pub fn scenes(&self) -> Vec<SceneSpec> {
        match (&self.scene, &self.dataset) {
            (Some(s), _) => vec![s.clone()],
            (_, Some(d)) => d.scenes(),
            _ => Vec::new(),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SequenceMeta {
    width: u32,
    height: u32,
    t_start: u64,
    t_end: u64,
    bin_us: u64,
    bins: usize,
}

fn depth_file(bin: usize) -> String {
    format!("depth_{bin:04}.pfm")
}

/// Writes `events.bin`, `depth_NNNN.pfm` (1-based, invalid pixels stored as 0)
/// and `meta.json` into `dir`.
pub fn write_sequence(dir: &Path, seq: &LabeledSequence) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join("events.bin");
    fs::write(&path, write_binary(&seq.stream)).map_err(|e| Error::io(&path, e))?;
    for (i, d) in seq.depths.iter().enumerate() {
        let values: Vec<f32> = d.values.iter().zip(&d.mask).map(|(&v, &m)| if m { v } else { 0.0 }).collect();
        pfm::write(&dir.join(depth_file(i + 1)), d.width, d.height, &values)?;
    }
    let meta = SequenceMeta {
        width: seq.stream.width,
        height: seq.stream.height,
        t_start: seq.stream.t_start,
        t_end: seq.stream.t_end,
        bin_us: seq.bin_us,
        bins: seq.depths.len(),
    };
    let path = dir.join("meta.json");
    let text = serde_json::to_string_pretty(&meta).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

pub fn read_sequence(dir: &Path) -> Result<LabeledSequence> {
    let path = dir.join("meta.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let meta: SequenceMeta =
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let path = dir.join("events.bin");
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let (parsed, _) = read_binary(&bytes, true)?;
    if parsed.width != meta.width || parsed.height != meta.height {
        return Err(Error::Data(format!("{}: sensor size disagrees with meta.json", dir.display())));
    }
    let stream = EventStream::new(meta.width, meta.height, meta.t_start, meta.t_end, parsed.events().to_vec())?;
    let expected = stream.span_us().div_ceil(meta.bin_us) as usize;
    if meta.bin_us == 0 || expected != meta.bins {
        return Err(Error::Data(format!("{}: {} depth maps for {expected} bins", dir.display(), meta.bins)));
    }
    let depths = (1..=meta.bins)
        .map(|b| {
            let (w, h, v) = pfm::read(&dir.join(depth_file(b)))?;
            if w != meta.width as usize || h != meta.height as usize {
                return Err(Error::Data(format!("{}: depth map {b} is {w}x{h}", dir.display())));
            }
            DepthMap::from_values(w, h, v)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LabeledSequence {
        stream,
        bin_us: meta.bin_us,
        depths,
    })
}

fn sequence_dir(i: usize) -> String {
    format!("seq_{i:03}")
}

/// Simulates every scene into `out/seq_NNN`, returning the sequences.
pub fn write_dataset(out: &Path, scenes: &[SceneSpec]) -> Result<Vec<LabeledSequence>> {
    let mut seqs = Vec::with_capacity(scenes.len());
    for (i, s) in scenes.iter().enumerate() {
        let seq = s.emit_events()?;
        write_sequence(&out.join(sequence_dir(i)), &seq)?;
        seqs.push(seq);
    }
    Ok(seqs)
}

/// Loads every `seq_*` directory under `dir` in name order.
pub fn read_dataset(dir: &Path) -> Result<Vec<LabeledSequence>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut dirs = Vec::new();
    for e in entries {
        let e = e.map_err(|e| Error::io(dir, e))?;
        if e.file_name().to_string_lossy().starts_with("seq_") && e.path().is_dir() {
            dirs.push(e.path());
        }
    }
    if dirs.is_empty() {
        return Err(Error::Data(format!("{}: no seq_* directories", dir.display())));
    }
    dirs.sort();
    dirs.iter().map(|d| read_sequence(d)).collect()
}
