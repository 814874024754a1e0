use ereformer::model::checkpoint::Checkpoint;
use ereformer::train::{infer, load_sequences, TrainConfig, Trainer};

/// Writes one PFM depth map and one PPM preview per bin of a simulated
/// sequence to `infer_example/`.
fn main() -> ereformer::Result<()> {
    let trainer = match Checkpoint::read("run_example/best.ckpt".as_ref()) {
        Ok(ck) => Trainer::from_checkpoint(&ck)?,
        Err(_) => Trainer::new(TrainConfig::load(concat!(env!("CARGO_MANIFEST_DIR"), "/configs/quick.toml").as_ref())?)?,
    };
    let seq = load_sequences(&trainer.config.data)?.remove(0);
    let out = std::path::Path::new("infer_example");
    let n = infer(&trainer.net, &trainer.config, &seq.stream, out)?;
    println!("{} events in {} bins -> {n} depth maps in {}", seq.stream.len(), seq.bins(), out.display());
    Ok(())
}
