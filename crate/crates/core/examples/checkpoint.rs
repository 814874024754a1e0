use ereformer::model::checkpoint::Checkpoint;
use ereformer::model::ModelConfig;
use ereformer::train::{TrainConfig, Trainer};

/// Saves a fresh trainer, reloads it and checks the bytes match.
fn main() -> ereformer::Result<()> {
    let mut cfg = TrainConfig {
        model: ModelConfig { height: 32, width: 32, embed_dim: 16, heads: [1, 2, 4, 8], ..ModelConfig::default() },
        ..TrainConfig::default()
    };
    cfg.data.dataset.width = 32;
    cfg.data.dataset.height = 32;
    let trainer = Trainer::new(cfg)?;
    let path = std::env::temp_dir().join("ereformer_example.ckpt");
    trainer.checkpoint().write(&path)?;

    let loaded = Checkpoint::read(&path)?;
    let again = Trainer::from_checkpoint(&loaded)?;
    let bytes = std::fs::read(&path).map_err(|e| ereformer::Error::io(&path, e))?;
    println!("{} parameters, {} bytes on disk", again.net.params.num_scalars(), bytes.len());
    println!("save -> load -> save is byte-identical: {}", again.checkpoint().encode() == bytes);
    Ok(())
}
