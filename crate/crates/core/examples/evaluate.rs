use ereformer::depth::MetricReport;
use ereformer::model::checkpoint::Checkpoint;
use ereformer::train::{evaluate, load_sequences, prepare, TrainConfig, Trainer};

/// Scores a checkpoint, `run_example/best.ckpt` by default, on its own
/// config's sequences; falls back to an untrained network of the quick config.
fn main() -> ereformer::Result<()> {
    let path = std::env::args().nth(1).unwrap_or_else(|| "run_example/best.ckpt".into());
    let trainer = match Checkpoint::read(std::path::Path::new(&path)) {
        Ok(ck) => Trainer::from_checkpoint(&ck)?,
        Err(_) => {
            println!("no checkpoint at {path}; scoring an untrained network");
            Trainer::new(TrainConfig::load(concat!(env!("CARGO_MANIFEST_DIR"), "/configs/quick.toml").as_ref())?)?
        }
    };
    let cfg = &trainer.config;
    let samples = load_sequences(&cfg.data)?
        .iter()
        .map(|s| prepare(s, cfg.data.normalization))
        .collect::<ereformer::Result<Vec<_>>>()?;
    let report = evaluate(&trainer.net, &samples, &cfg.codec)?;
    let mut rows: Vec<(String, &MetricReport)> =
        report.sequences.iter().enumerate().map(|(i, m)| (format!("seq_{i:03}"), m)).collect();
    rows.push(("mean".into(), &report.aggregate));
    print!("{}", MetricReport::to_table(&rows));
    Ok(())
}
