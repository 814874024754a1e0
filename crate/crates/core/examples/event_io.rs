use ereformer::events::{normalize_embedding, rasterize, read_binary, read_csv, write_binary, write_csv};
use ereformer::events::{Event, EventStream, Normalization, ParseOptions, Polarity};

/// Round-trips a small stream through CSV and the binary format, then bins
/// and rasterizes it.
fn main() -> ereformer::Result<()> {
    let events: Vec<Event> = (0..200u64)
        .map(|i| {
            let p = if i % 3 == 0 { Polarity::Negative } else { Polarity::Positive };
            Event::new(i * 500, (i % 32) as u16, (i / 7 % 32) as u16, p)
        })
        .collect();
    let stream = EventStream::from_events(32, 32, events)?;

    let mut csv = Vec::new();
    write_csv(&stream, &mut csv).expect("in-memory write");
    let (from_csv, report) = read_csv(std::str::from_utf8(&csv).expect("utf-8"), ParseOptions::new(32, 32))?;
    println!("csv: {} bytes, {} events back, {} rejected", csv.len(), from_csv.len(), report.rejected_out_of_bounds);

    let bytes = write_binary(&stream);
    let (from_bin, _) = read_binary(&bytes, true)?;
    println!("binary: {} bytes, byte-exact round trip: {}", bytes.len(), write_binary(&from_bin) == bytes);

    for (i, bin) in stream.split_into_bins(25_000)?.iter().enumerate() {
        let raw = rasterize::<f32>(bin, 32, 32);
        let x = normalize_embedding(&raw, Normalization::Log1p);
        println!("bin {i}: {} events, total count {}, input max {:.3}", bin.len(), raw.total_count(), x.max_abs());
    }
    Ok(())
}
