use ereformer::train::{ablation_suite, ablation_table, default_variants, load_sequences, TrainConfig};

/// Trains each architecture variant once on the quick config and prints the
/// validation abs_rel table. Pass a config path and seeds for the full study.
fn main() -> ereformer::Result<()> {
    let mut args = std::env::args().skip(1);
    let path = args.next().unwrap_or_else(|| concat!(env!("CARGO_MANIFEST_DIR"), "/configs/quick.toml").into());
    let seeds: Vec<u64> = args.map(|s| s.parse().expect("integer seed")).collect();
    let seeds = if seeds.is_empty() { vec![0] } else { seeds };
    let cfg = TrainConfig::load(path.as_ref())?;
    let sequences = load_sequences(&cfg.data)?;
    let rows = ablation_suite(&cfg, &sequences, &seeds, &default_variants(), |v, seed, score| {
        println!("{:<14} seed {seed} abs_rel {score:.4}", v.name);
    })?;
    print!("{}", ablation_table(&rows));
    Ok(())
}
