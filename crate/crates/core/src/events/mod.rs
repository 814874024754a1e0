//! Event streams: parsing, temporal binning and rasterization into event images.

mod io;

pub use io::{parse_events, read_binary, read_csv, write_binary, write_csv, EventFormat, ParseOptions, ParseReport};

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Default bin duration (50 ms).
pub const DEFAULT_BIN_US: u64 = 50_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Polarity {
    Negative,
    Positive,
}

impl Polarity {
    pub fn from_sign(p: i64) -> Option<Self> {
        match p {
            1 => Some(Polarity::Positive),
            -1 => Some(Polarity::Negative),
            _ => None,
        }
    }

    pub fn sign(self) -> i8 {
        match self {
            Polarity::Positive => 1,
            Polarity::Negative => -1,
        }
    }
}

/// A single brightness-change event.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Event {
    pub t: u64,
    pub x: u16,
    pub y: u16,
    pub p: Polarity,
}

impl Event {
    pub fn new(t: u64, x: u16, y: u16, p: Polarity) -> Self {
        Event { t, x, y, p }
    }
}

/// Time-ordered events from a `width × height` sensor over `[t_start, t_end)`.
#[derive(Clone, Debug, PartialEq)]
pub struct EventStream {
    pub width: u32,
    pub height: u32,
    pub t_start: u64,
    pub t_end: u64,
    events: Vec<Event>,
}

impl EventStream {
    /// Validates bounds, ordering and the time window.
    pub fn new(width: u32, height: u32, t_start: u64, t_end: u64, events: Vec<Event>) -> Result<Self> {
        if t_end < t_start {
            return Err(Error::invalid(format!("window end {t_end} before start {t_start}")));
        }
        for (i, e) in events.iter().enumerate() {
            if u32::from(e.x) >= width || u32::from(e.y) >= height {
                return Err(Error::OutOfBounds {
                    index: i,
                    x: e.x.into(),
                    y: e.y.into(),
                    width,
                    height,
                });
            }
            if i > 0 && events[i - 1].t > e.t {
                return Err(Error::NonMonotone { index: i });
            }
            if e.t < t_start || e.t >= t_end {
                return Err(Error::invalid(format!(
                    "event {i} at t={} outside window [{t_start}, {t_end})",
                    e.t
                )));
            }
        }
        Ok(EventStream {
            width,
            height,
            t_start,
            t_end,
            events,
        })
    }

    /// Stream whose window spans exactly its events.
    pub fn from_events(width: u32, height: u32, events: Vec<Event>) -> Result<Self> {
        let (s, e) = match (events.first(), events.last()) {
            (Some(a), Some(b)) => (a.t, b.t + 1),
            _ => (0, 0),
        };
        Self::new(width, height, s, e, events)
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn span_us(&self) -> u64 {
        self.t_end - self.t_start
    }

    /// Slices the stream into consecutive `[start, start + Δt)` bins covering
    /// the whole window. A trailing partial bin is kept.
    pub fn split_into_bins(&self, bin_us: u64) -> Result<Vec<EventBin<'_>>> {
        if bin_us == 0 {
            return Err(Error::invalid("bin duration must be positive"));
        }
        let count = self.span_us().div_ceil(bin_us) as usize;
        let mut bins = Vec::with_capacity(count);
        let mut lo = 0;
        for k in 0..count {
            let start = self.t_start + k as u64 * bin_us;
            let end = start + bin_us;
            let hi = lo + self.events[lo..].partition_point(|e| e.t < end);
            bins.push(EventBin {
                index: k + 1,
                start_us: start,
                duration_us: bin_us,
                events: &self.events[lo..hi],
            });
            lo = hi;
        }
        Ok(bins)
    }
}

/// Events of one temporal bin.
#[derive(Clone, Copy, Debug)]
pub struct EventBin<'a> {
    /// 1-based position within the stream.
    pub index: usize,
    pub start_us: u64,
    pub duration_us: u64,
    pub events: &'a [Event],
}

impl EventBin<'_> {
    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn end_us(&self) -> u64 {
        self.start_us + self.duration_us
    }
}

/// How a bin is turned into a dense tensor.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Representation {
    /// Per-pixel positive and negative event counts.
    #[default]
    EventImage,
    /// Reserved; not implemented.
    VoxelGrid,
}

/// Dense `[C_e, H, W]` rasterization of one bin.
#[derive(Clone, Debug, PartialEq)]
pub struct EventTensor<T> {
    pub values: Tensor<T>,
}

impl<T: Scalar> EventTensor<T> {
    pub fn channels(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn total_count(&self) -> T {
        self.values.sum()
    }
}

/// Counts events per pixel: channel 0 for positive, channel 1 for negative polarity.
pub fn rasterize<T: Scalar>(bin: &EventBin<'_>, width: usize, height: usize) -> EventTensor<T> {
    rasterize_events(bin.events, width, height)
}

pub fn rasterize_events<T: Scalar>(events: &[Event], width: usize, height: usize) -> EventTensor<T> {
    let plane = width * height;
    let mut data = vec![T::zero(); 2 * plane];
    for e in events {
        let c = match e.p {
            Polarity::Positive => 0,
            Polarity::Negative => 1,
        };
        let i = c * plane + usize::from(e.y) * width + usize::from(e.x);
        data[i] = data[i] + T::one();
    }
    EventTensor {
        values: Tensor::new(&[2, height, width], data).expect("consistent shape"),
    }
}

/// Rasterizes with an explicit representation choice.
pub fn rasterize_as<T: Scalar>(
    bin: &EventBin<'_>,
    width: usize,
    height: usize,
    repr: Representation,
) -> Result<EventTensor<T>> {
    match repr {
        Representation::EventImage => Ok(rasterize(bin, width, height)),
        Representation::VoxelGrid => Err(Error::invalid("voxel_grid representation is not implemented")),
    }
}

/// Input conditioning applied to event counts before patch embedding.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    None,
    Max,
    #[default]
    Log1p,
}

impl FromStr for Normalization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Normalization::None),
            "max" => Ok(Normalization::Max),
            "log1p" => Ok(Normalization::Log1p),
            other => Err(Error::invalid(format!("unknown normalization mode `{other}`"))),
        }
    }
}

pub fn normalize_embedding<T: Scalar>(e: &EventTensor<T>, mode: Normalization) -> Tensor<T> {
    match mode {
        Normalization::None => e.values.clone(),
        Normalization::Max => {
            let m = e.values.max_abs().max(T::one());
            e.values.map(|v| v / m)
        }
        Normalization::Log1p => e.values.map(|v| v.ln_1p()),
    }
}

#[cfg(test)]
mod tests {
    use std::collections::HashMap;

    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn ev(t: u64, x: u16, y: u16, p: i64) -> Event {
        Event::new(t, x, y, Polarity::from_sign(p).unwrap())
    }

    fn random_stream(n: usize, span: u64, seed: u64) -> EventStream {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mut evs: Vec<Event> = (0..n)
            .map(|_| {
                ev(
                    r.random_range(0..span),
                    r.random_range(0..16),
                    r.random_range(0..12),
                    if r.random_bool(0.5) { 1 } else { -1 },
                )
            })
            .collect();
        evs.sort_by_key(|e| e.t);
        EventStream::new(16, 12, 0, span, evs).unwrap()
    }

    #[test]
    fn bin_boundaries_are_left_closed() {
        let s = EventStream::from_events(
            8,
            8,
            vec![ev(0, 0, 0, 1), ev(49_999, 0, 0, 1), ev(50_000, 0, 0, 1), ev(99_999, 0, 0, 1)],
        )
        .unwrap();
        let bins = s.split_into_bins(50_000).unwrap();
        assert_eq!(bins.len(), 2);
        assert_eq!(bins[0].len(), 2);
        assert_eq!(bins[1].len(), 2);
        assert_eq!((bins[0].index, bins[1].index), (1, 2));
        assert!(s.split_into_bins(0).is_err());
    }

    #[test]
    fn single_event_makes_one_bin() {
        let s = EventStream::from_events(8, 8, vec![ev(0, 1, 1, -1)]).unwrap();
        assert_eq!(s.split_into_bins(50_000).unwrap().len(), 1);
    }

    #[test]
    fn uniform_random_stream_recount() {
        let s = random_stream(1000, 200_000, 3);
        let bins = s.split_into_bins(50_000).unwrap();
        assert_eq!(bins.len(), 4);
        // independent recount by direct bucketing
        let mut expect = [0usize; 4];
        for e in s.events() {
            expect[(e.t / 50_000) as usize] += 1;
        }
        let got: Vec<usize> = bins.iter().map(|b| b.len()).collect();
        assert_eq!(got, expect);
        assert_eq!(got.iter().sum::<usize>(), 1000);
    }

    #[test]
    fn trailing_partial_bin_kept() {
        let s = EventStream::new(8, 8, 0, 120_000, vec![ev(110_000, 0, 0, 1)]).unwrap();
        let bins = s.split_into_bins(50_000).unwrap();
        assert_eq!(bins.len(), 3);
        assert_eq!(bins[2].len(), 1);
    }

    #[test]
    fn rasterize_counts() {
        let evs = [ev(0, 3, 4, 1), ev(5, 3, 4, 1)];
        let t = rasterize_events::<f32>(&evs, 8, 8);
        assert_eq!(t.values.at(&[0, 4, 3]), 2.0);
        assert_eq!(t.total_count(), 2.0);
        let empty = rasterize_events::<f32>(&[], 8, 8);
        assert!(empty.values.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rasterize_matches_hashmap_recount() {
        let s = random_stream(500, 1_000, 9);
        let bins = s.split_into_bins(1_000).unwrap();
        let t = rasterize::<f64>(&bins[0], 16, 12);
        let mut counts: HashMap<(u8, u16, u16), usize> = HashMap::new();
        for e in s.events() {
            let c = if e.p == Polarity::Positive { 0 } else { 1 };
            *counts.entry((c, e.y, e.x)).or_default() += 1;
        }
        for c in 0..2u8 {
            for y in 0..12u16 {
                for x in 0..16u16 {
                    let want = counts.get(&(c, y, x)).copied().unwrap_or(0) as f64;
                    assert_eq!(t.values.at(&[c as usize, y as usize, x as usize]), want);
                }
            }
        }
    }

    #[test]
    fn voxel_grid_reserved() {
        let s = random_stream(10, 100, 1);
        let bins = s.split_into_bins(100).unwrap();
        assert!(rasterize_as::<f32>(&bins[0], 16, 12, Representation::VoxelGrid).is_err());
        assert!(rasterize_as::<f32>(&bins[0], 16, 12, Representation::EventImage).is_ok());
    }

    #[test]
    fn normalization_modes() {
        let e = EventTensor {
            values: Tensor::<f64>::from_f64(&[3], &[0., 2., 4.]).unwrap(),
        };
        assert_eq!(normalize_embedding(&e, Normalization::Max).data(), &[0., 0.5, 1.0]);
        assert_eq!(normalize_embedding(&e, Normalization::Log1p).data()[0], 0.0);
        assert_eq!(normalize_embedding(&e, Normalization::None), e.values);
        let z = EventTensor {
            values: Tensor::<f64>::zeros(&[2, 2, 2]),
        };
        assert!(normalize_embedding(&z, Normalization::Max).data().iter().all(|&v| v == 0.0));
        assert!("sqrt".parse::<Normalization>().is_err());
        assert_eq!("log1p".parse::<Normalization>().unwrap(), Normalization::Log1p);
    }

    proptest! {
        #[test]
        fn count_conservation_and_partition(n in 0usize..400, span in 1u64..300_000, bin in 1u64..80_000, seed in 0u64..500) {
            let s = random_stream(n, span, seed);
            let bins = s.split_into_bins(bin).unwrap();
            let mut rebuilt = Vec::new();
            for b in &bins {
                let t = rasterize::<f64>(b, 16, 12);
                prop_assert_eq!(t.total_count(), b.len() as f64);
                prop_assert!(b.events.iter().all(|e| e.t >= b.start_us && e.t < b.end_us()));
                rebuilt.extend_from_slice(b.events);
            }
            prop_assert_eq!(rebuilt.as_slice(), s.events());
        }
    }
}
