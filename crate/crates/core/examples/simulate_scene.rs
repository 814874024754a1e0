use ereformer::sim::{DatasetSpec, Plane, SceneSpec};

/// Renders a textured wall behind a box while the camera slides sideways, then
/// a small random dataset written to disk.
fn main() -> ereformer::Result<()> {
    let scene = SceneSpec {
        width: 64,
        height: 64,
        duration_us: 200_000,
        bin_us: 50_000,
        velocity: [1.5, 0.0],
        motion: Vec::new(),
        planes: vec![
            Plane { depth: 12.0, texture_seed: 1, extent: None, texel_px: 4.0 },
            Plane { depth: 3.0, texture_seed: 2, extent: Some([-0.8, -0.8, 0.8, 0.8]), texel_px: 4.0 },
        ],
        threshold: 0.2,
        frame_rate_hz: 1000.0,
        seed: 7,
    };
    let seq = scene.emit_events()?;
    let bins = seq.stream.split_into_bins(seq.bin_us)?;
    for (bin, depth) in bins.iter().zip(&seq.depths) {
        let near = depth.values.iter().cloned().fold(f32::MAX, f32::min);
        println!("{} events, nearest surface {near:.1} m, {} labelled pixels", bin.len(), depth.valid_count());
    }

    // the same events over a range of contrast thresholds
    for th in [0.1, 0.2, 0.4] {
        let n = SceneSpec { threshold: th, ..scene.clone() }.emit_events()?.stream.len();
        println!("threshold {th}: {n} events");
    }

    let spec = DatasetSpec { sequences: 3, bins_per_sequence: 4, ..DatasetSpec::default() };
    let dir = std::env::temp_dir().join("ereformer_sim_example");
    ereformer::sim::write_dataset(&dir, &spec.scenes())?;
    println!("wrote {} sequences to {}", spec.sequences, dir.display());
    Ok(())
}
