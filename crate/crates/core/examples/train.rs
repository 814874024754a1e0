use ereformer::train::{load_sequences, train, TrainConfig};

/// Trains from a config file, `configs/quick.toml` unless another is given,
/// writing checkpoints and a manifest to `run_example/`.
fn main() -> ereformer::Result<()> {
    let path = std::env::args().nth(1).unwrap_or_else(|| concat!(env!("CARGO_MANIFEST_DIR"), "/configs/quick.toml").into());
    let cfg = TrainConfig::load(std::path::Path::new(&path))?;
    let sequences = load_sequences(&cfg.data)?;
    let out = std::path::PathBuf::from("run_example");
    let outcome = train(cfg, &sequences, Some(&out), None, |log| {
        let val = log.validation.as_ref().map_or(f64::NAN, |v| v.abs_rel);
        println!("epoch {:>3}  loss {:.4}  lr {:.2e}  val abs_rel {val:.4}", log.epoch, log.mean_loss, log.lr);
    })?;
    if let (Some(u), Some(f)) = (&outcome.manifest.untrained_validation, &outcome.final_validation) {
        println!("val abs_rel {:.4} -> {:.4} ({:+.1}%)", u.abs_rel, f.abs_rel, 100.0 * (f.abs_rel / u.abs_rel - 1.0));
    }
    println!("best epoch {:?}, artifacts in {}", outcome.manifest.best_epoch, out.display());
    Ok(())
}
