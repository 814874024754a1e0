use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use ereformer::diagnostics::{run_gradchecks, CheckGroup};
use ereformer::events::{parse_events, EventFormat, ParseOptions};
use ereformer::model::checkpoint::Checkpoint;
use ereformer::model::grvit::TransferMode;
use ereformer::model::stf::SkipMode;
use ereformer::sim::{read_dataset, write_dataset, SimulateSpec};
use ereformer::train::{
    ablation_suite, ablation_table, default_variants, evaluate, infer, load_sequences, prepare, train, TrainConfig, Trainer,
};
use ereformer::{depth::MetricReport, Error, Result};

#[derive(Parser)]
#[command(name = "ereformer", version, about = "Event-based monocular depth estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a TOML config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        skip_mode: Option<SkipMode>,
        #[arg(long)]
        transfer_mode: Option<TransferMode>,
        #[arg(long)]
        recurrence: Option<Switch>,
        /// Continue from a checkpoint written by an earlier run of the same config.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long, default_value = "run")]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a directory of sequences.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Predict depth for every bin of an event file.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        events: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render a scene or a random dataset to events and depth.
    Simulate {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference gradient checks in 64-bit.
    Gradcheck {
        #[arg(long, default_value = "all")]
        module: CheckGroup,
    },
    /// Train every ablation variant once per seed and report median abs_rel.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        seeds: Vec<u64>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train {
            config,
            seed,
            skip_mode,
            transfer_mode,
            recurrence,
            resume,
            out,
        } => {
            let mut cfg = TrainConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(m) = skip_mode {
                cfg.model.skip_mode = m;
            }
            if let Some(m) = transfer_mode {
                cfg.model.transfer_mode = m;
            }
            if let Some(r) = recurrence {
                cfg.model.recurrence = matches!(r, Switch::On);
            }
            cfg.validate()?;
            let resume = resume.map(|p| Trainer::from_checkpoint(&Checkpoint::read(&p)?)).transpose()?;
            let sequences = load_sequences(&cfg.data)?;
            let outcome = train(cfg, &sequences, Some(&out), resume, |log| {
                let val = log.validation.as_ref().map_or("-".to_string(), |v| format!("{:.4}", v.abs_rel));
                println!("epoch {:>3}  loss {:.5}  lr {:.3e}  val abs_rel {val}", log.epoch, log.mean_loss, log.lr);
            })?;
            if let Some(u) = &outcome.manifest.untrained_validation {
                println!("untrained val abs_rel {:.4}", u.abs_rel);
            }
            println!("wrote {}", out.display());
            Ok(())
        }
        Command::Eval { ckpt, data } => {
            let trainer = Trainer::from_checkpoint(&Checkpoint::read(&ckpt)?)?;
            let cfg = &trainer.config;
            let sequences = read_dataset(&data)?;
            let samples = sequences
                .iter()
                .map(|s| {
                    let (w, h) = (s.stream.width as usize, s.stream.height as usize);
                    if w != cfg.model.width || h != cfg.model.height {
                        return Err(Error::Data(format!(
                            "data is {w}x{h}, checkpoint expects {}x{}",
                            cfg.model.width, cfg.model.height
                        )));
                    }
                    prepare(s, cfg.data.normalization)
                })
                .collect::<Result<Vec<_>>>()?;
            let report = evaluate(&trainer.net, &samples, &cfg.codec)?;
            let mut rows: Vec<(String, &MetricReport)> =
                report.sequences.iter().enumerate().map(|(i, m)| (format!("seq_{i:03}"), m)).collect();
            rows.push(("mean".to_string(), &report.aggregate));
            print!("{}", MetricReport::to_table(&rows));
            Ok(())
        }
        Command::Infer { ckpt, events, out } => {
            let trainer = Trainer::from_checkpoint(&Checkpoint::read(&ckpt)?)?;
            let m = &trainer.config.model;
            let opts = ParseOptions::new(m.width as u32, m.height as u32);
            let (stream, report) = parse_events(&events, EventFormat::from_path(&events), opts)?;
            if report.rejected_out_of_bounds > 0 {
                eprintln!("dropped {} out-of-bounds events", report.rejected_out_of_bounds);
            }
            let n = infer(&trainer.net, &trainer.config, &stream, &out)?;
            if n == 0 {
                println!("no events in {}; nothing written", events.display());
            } else {
                println!("wrote {n} depth maps to {}", out.display());
            }
            Ok(())
        }
        Command::Simulate { spec, out } => {
            let text = std::fs::read_to_string(&spec).map_err(|e| Error::io(&spec, e))?;
            let scenes = SimulateSpec::from_toml(&text)?.scenes();
            write_dataset(&out, &scenes)?;
            println!("wrote {} sequences to {}", scenes.len(), out.display());
            Ok(())
        }
        Command::Gradcheck { module } => {
            let results = run_gradchecks(module, |r| println!("{r}"))?;
            let failed = results.iter().filter(|r| !r.passed()).count();
            if failed > 0 {
                return Err(Error::NonFinite(format!("{failed} gradient checks above tolerance")));
            }
            Ok(())
        }
        Command::Ablate { config, seeds } => ablate(&config, &seeds),
    }
}

fn ablate(config: &Path, seeds: &[u64]) -> Result<()> {
    let cfg = TrainConfig::load(config)?;
    let sequences = load_sequences(&cfg.data)?;
    let rows = ablation_suite(&cfg, &sequences, seeds, &default_variants(), |v, seed, score| {
        println!("{:<16} seed {seed:<4} abs_rel {score:.4}", v.name);
    })?;
    print!("{}", ablation_table(&rows));
    Ok(())
}
