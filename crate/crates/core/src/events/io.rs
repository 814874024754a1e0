//! CSV and binary event files.
//!
//! CSV: header `t_us,x,y,p`, one event per line, `p` is `1` or `-1`.
//! Binary: `EVS1`, u32 width, u32 height, u64 count, then packed
//! little-endian records of (u64 t_us, u16 x, u16 y, i8 p).

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{Event, EventStream, Polarity};
use crate::error::{Error, Result};

pub const BINARY_MAGIC: &[u8; 4] = b"EVS1";
const HEADER_LEN: usize = 4 + 4 + 4 + 8;
const RECORD_LEN: usize = 8 + 2 + 2 + 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EventFormat {
    Csv,
    Bin,
}

impl EventFormat {
    /// Guesses the format from a file extension (`.csv` or anything else → binary).
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("csv") => EventFormat::Csv,
            _ => EventFormat::Bin,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ParseOptions {
    /// Sensor size for CSV input; binary files carry their own.
    pub width: u32,
    pub height: u32,
    /// Strict mode fails on out-of-bounds or out-of-order records instead of
    /// dropping or sorting them.
    pub strict: bool,
}

impl ParseOptions {
    pub fn new(width: u32, height: u32) -> Self {
        ParseOptions {
            width,
            height,
            strict: false,
        }
    }

    pub fn strict(mut self) -> Self {
        self.strict = true;
        self
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ParseReport {
    pub rejected_out_of_bounds: usize,
    pub sorted: bool,
}

struct Collector {
    opts: ParseOptions,
    events: Vec<Event>,
    report: ParseReport,
    monotone: bool,
}

impl Collector {
    fn new(opts: ParseOptions) -> Self {
        Collector {
            opts,
            events: Vec::new(),
            report: ParseReport::default(),
            monotone: true,
        }
    }

    fn push(&mut self, index: usize, t: u64, x: i64, y: i64, p: Polarity) -> Result<()> {
        let (w, h) = (self.opts.width, self.opts.height);
        if x < 0 || y < 0 || x >= i64::from(w) || y >= i64::from(h) {
            if self.opts.strict {
                return Err(Error::OutOfBounds {
                    index,
                    x,
                    y,
                    width: w,
                    height: h,
                });
            }
            self.report.rejected_out_of_bounds += 1;
            return Ok(());
        }
        if let Some(last) = self.events.last() {
            if last.t > t {
                if self.opts.strict {
                    return Err(Error::NonMonotone { index });
                }
                self.monotone = false;
            }
        }
        self.events.push(Event::new(t, x as u16, y as u16, p));
        Ok(())
    }

    fn finish(mut self) -> Result<(EventStream, ParseReport)> {
        if !self.monotone {
            self.events.sort_by_key(|e| e.t);
            self.report.sorted = true;
        }
        let s = EventStream::from_events(self.opts.width, self.opts.height, self.events)?;
        Ok((s, self.report))
    }
}

fn parse_field<T: std::str::FromStr>(s: &str, line: usize, what: &str) -> Result<T> {
    s.trim().parse().map_err(|_| Error::Parse {
        line,
        msg: format!("invalid {what} `{}`", s.trim()),
    })
}

pub fn read_csv(text: &str, opts: ParseOptions) -> Result<(EventStream, ParseReport)> {
    let mut c = Collector::new(opts);
    let mut record = 0;
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let l = raw.trim();
        if l.is_empty() || (record == 0 && l.starts_with("t_us")) {
            continue;
        }
        let fields: Vec<&str> = l.split(',').collect();
        if fields.len() != 4 {
            return Err(Error::Parse {
                line,
                msg: format!("expected 4 fields, found {}", fields.len()),
            });
        }
        let t: u64 = parse_field(fields[0], line, "timestamp")?;
        let x: i64 = parse_field(fields[1], line, "x")?;
        let y: i64 = parse_field(fields[2], line, "y")?;
        let p: i64 = parse_field(fields[3], line, "polarity")?;
        let p = Polarity::from_sign(p).ok_or_else(|| Error::Parse {
            line,
            msg: format!("polarity must be 1 or -1, got {p}"),
        })?;
        c.push(record, t, x, y, p)?;
        record += 1;
    }
    c.finish()
}

pub fn write_csv(stream: &EventStream, out: &mut impl Write) -> std::io::Result<()> {
    writeln!(out, "t_us,x,y,p")?;
    for e in stream.events() {
        writeln!(out, "{},{},{},{}", e.t, e.x, e.y, e.p.sign())?;
    }
    Ok(())
}

pub fn read_binary(bytes: &[u8], strict: bool) -> Result<(EventStream, ParseReport)> {
    if bytes.len() < HEADER_LEN || &bytes[..4] != BINARY_MAGIC {
        return Err(Error::Format("missing EVS1 header".into()));
    }
    let width = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    let height = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    let count = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = &bytes[HEADER_LEN..];
    if body.len() != count.saturating_mul(RECORD_LEN) {
        return Err(Error::Format(format!(
            "header declares {count} records but body holds {} bytes",
            body.len()
        )));
    }
    let mut c = Collector::new(ParseOptions {
        width,
        height,
        strict,
    });
    for (i, r) in body.chunks_exact(RECORD_LEN).enumerate() {
        let t = u64::from_le_bytes(r[0..8].try_into().expect("8 bytes"));
        let x = u16::from_le_bytes(r[8..10].try_into().expect("2 bytes"));
        let y = u16::from_le_bytes(r[10..12].try_into().expect("2 bytes"));
        let p = Polarity::from_sign(i64::from(r[12] as i8))
            .ok_or_else(|| Error::Format(format!("record {i}: polarity byte {}", r[12] as i8)))?;
        c.push(i, t, x.into(), y.into(), p)?;
    }
    c.finish()
}

pub fn write_binary(stream: &EventStream) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + stream.len() * RECORD_LEN);
    out.extend_from_slice(BINARY_MAGIC);
    out.extend_from_slice(&stream.width.to_le_bytes());
    out.extend_from_slice(&stream.height.to_le_bytes());
    out.extend_from_slice(&(stream.len() as u64).to_le_bytes());
    for e in stream.events() {
        out.extend_from_slice(&e.t.to_le_bytes());
        out.extend_from_slice(&e.x.to_le_bytes());
        out.extend_from_slice(&e.y.to_le_bytes());
        out.push(e.p.sign() as u8);
    }
    out
}

/// Reads an event file. CSV needs the sensor size in `opts`.
pub fn parse_events(path: &Path, format: EventFormat, opts: ParseOptions) -> Result<(EventStream, ParseReport)> {
    match format {
        EventFormat::Csv => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            read_csv(&text, opts)
        }
        EventFormat::Bin => {
            let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
            read_binary(&bytes, opts.strict)
        }
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn csv_single_record() {
        let (s, rep) = read_csv("1000,3,4,1", ParseOptions::new(8, 8)).unwrap();
        assert_eq!(s.events(), &[Event::new(1000, 3, 4, Polarity::Positive)]);
        assert_eq!(rep, ParseReport::default());
    }

    #[test]
    fn csv_empty_and_header_only() {
        assert_eq!(read_csv("", ParseOptions::new(8, 8)).unwrap().0.len(), 0);
        assert_eq!(read_csv("t_us,x,y,p\n", ParseOptions::new(8, 8)).unwrap().0.len(), 0);
    }

    #[test]
    fn csv_bounds_strict_and_lenient() {
        let text = "t_us,x,y,p\n0,1,1,1\n5,9,1,-1\n";
        let err = read_csv(text, ParseOptions::new(8, 8).strict()).unwrap_err();
        assert!(matches!(err, Error::OutOfBounds { index: 1, x: 9, .. }), "{err}");
        let (s, rep) = read_csv(text, ParseOptions::new(8, 8)).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(rep.rejected_out_of_bounds, 1);
    }

    #[test]
    fn csv_malformed_line_reports_line_number() {
        let err = read_csv("t_us,x,y,p\n0,1,1,1\n7,x,1,1\n", ParseOptions::new(8, 8)).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
        let err = read_csv("0,1,1,0\n", ParseOptions::new(8, 8)).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }), "{err}");
    }

    #[test]
    fn csv_out_of_order() {
        let text = "10,1,1,1\n5,2,2,-1\n";
        assert!(matches!(
            read_csv(text, ParseOptions::new(8, 8).strict()),
            Err(Error::NonMonotone { index: 1 })
        ));
        let (s, rep) = read_csv(text, ParseOptions::new(8, 8)).unwrap();
        assert!(rep.sorted);
        assert_eq!(s.events()[0].t, 5);
    }

    #[test]
    fn binary_rejects_truncation() {
        let s = EventStream::from_events(8, 8, vec![Event::new(1, 1, 1, Polarity::Negative)]).unwrap();
        let mut b = write_binary(&s);
        b.pop();
        assert!(read_binary(&b, true).is_err());
        assert!(read_binary(b"EVS0", true).is_err());
    }

    fn arb_events() -> impl Strategy<Value = Vec<Event>> {
        prop::collection::vec((0u64..1_000_000, 0u16..64, 0u16..48, prop::bool::ANY), 0..200).prop_map(|v| {
            let mut evs: Vec<Event> = v
                .into_iter()
                .map(|(t, x, y, p)| Event::new(t, x, y, if p { Polarity::Positive } else { Polarity::Negative }))
                .collect();
            evs.sort_by_key(|e| e.t);
            evs
        })
    }

    proptest! {
        #[test]
        fn binary_roundtrip_bit_exact(evs in arb_events()) {
            let s = EventStream::from_events(64, 48, evs).unwrap();
            let bytes = write_binary(&s);
            let (back, _) = read_binary(&bytes, true).unwrap();
            prop_assert_eq!(&back, &s);
            prop_assert_eq!(write_binary(&back), bytes);
        }

        #[test]
        fn csv_roundtrip(evs in arb_events()) {
            let s = EventStream::from_events(64, 48, evs).unwrap();
            let mut text = Vec::new();
            write_csv(&s, &mut text).unwrap();
            let (back, _) = read_csv(std::str::from_utf8(&text).unwrap(), ParseOptions::new(64, 48).strict()).unwrap();
            prop_assert_eq!(back, s);
        }
    }
}
