mod config;

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use scunetpp_core::data::{replicate_channels, save_mask_pgm, synth_dataset, Dataset, Split};
use scunetpp_core::metrics::{BinaryMask, HdMode};
use scunetpp_core::model::{ablate, Model, Variant};
use scunetpp_core::tensor::io::load_tensor;
use scunetpp_core::trainer::{evaluate, EpochRecord, Trainer};
use scunetpp_core::verify::{self, Level};

use config::{split_overrides, RunConfig, SEED_ENV};

/// Bad invocation, reported with exit code 1.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Parser, Debug)]
#[command(name = "scunetpp", version, about = "Swin/CNN segmentation network for pulmonary embolus masks")]
#[command(after_help = "Any config field can be overridden with --model.KEY=VALUE, --train.KEY=VALUE or --data.KEY=VALUE.")]
struct Cli {
    /// JSON file with optional `model`, `train` and `data` sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for model, training and data; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; all computation currently runs on one thread.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic phantom dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        cases: Option<usize>,
        #[arg(long)]
        slices: Option<usize>,
    },
    /// Train on the train split, validating on the test split.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        /// Continue from the latest checkpoint in --out.
        #[arg(long)]
        resume: bool,
    },
    /// Score a checkpoint on one split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        /// Output directory; defaults to eval_<split> next to the checkpoint.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        hd_mode: Option<HdMode>,
    },
    /// Predict the mask of one windowed slice (`.img.tsr`) and write a PGM.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck {
        #[arg(long, default_value = "full")]
        level: Level,
        #[arg(long, default_value_t = 20)]
        seeds: u64,
    },
    /// Report trainable parameter counts.
    Params,
    /// Train every ablation variant on one dataset and tabulate the results.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
    },
}

fn main() -> ExitCode {
    let result = split_overrides(std::env::args_os().collect()).map_err(anyhow::Error::from).and_then(|(args, overrides)| {
        let cli = match Cli::try_parse_from(args) {
            Ok(c) => c,
            Err(e) => {
                let code = if e.use_stderr() { 1 } else { 0 };
                let _ = e.print();
                return Ok(ExitCode::from(code));
            }
        };
        let env_seed = std::env::var(SEED_ENV).ok();
        let run = config::resolve(cli.config.as_deref(), cli.seed, env_seed.as_deref(), &overrides)?;
        if cli.threads == 0 {
            bail!(UsageError("--threads must be at least 1".into()));
        }
        if cli.threads > 1 {
            eprintln!("note: no parallel worker pools are available; running on one thread");
        }
        dispatch(cli.command, run).map(|()| ExitCode::SUCCESS)
    });
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            let usage = e.downcast_ref::<UsageError>().is_some()
                || matches!(e.downcast_ref::<scunetpp_core::Error>(), Some(scunetpp_core::Error::Usage(_)));
            ExitCode::from(if usage { 1 } else { 2 })
        }
    }
}

fn dispatch(command: Command, mut run: RunConfig) -> anyhow::Result<()> {
    match command {
        Command::Synth { out, cases, slices } => {
            run.data.cases = cases.unwrap_or(run.data.cases);
            run.data.slices = slices.unwrap_or(run.data.slices);
            let manifest = synth_dataset(&out, &run.data)?;
            run.write(&out)?;
            let test = manifest.iter().filter(|c| c.split == Split::Test).count();
            println!(
                "wrote {} cases ({} train, {test} test) of {} slices to {}",
                manifest.len(),
                manifest.len() - test,
                run.data.slices,
                out.display()
            );
        }
        Command::Train { data, out, epochs, resume } => {
            run.train.epochs = epochs.unwrap_or(run.train.epochs);
            let ds = Dataset::open(&data).with_context(|| format!("opening dataset {}", data.display()))?;
            let train = ds.load_split(Split::Train, run.model.in_channels)?;
            let val = ds.load_split(Split::Test, run.model.in_channels)?;
            run.write(&out)?;
            let mut trainer = Trainer::new(run.model.clone(), run.train.clone(), &train, &val).with_output(&out);
            trainer.on_epoch = Some(Box::new(log_epoch));
            let outcome = if resume { trainer.resume()? } else { trainer.run()? };
            let last = outcome.history.last().context("no epochs were run")?;
            println!(
                "trained {} epochs on {} samples; final loss {:.5}; checkpoints in {}",
                last.epoch,
                train.len(),
                last.train_loss,
                out.display()
            );
        }
        Command::Eval { ckpt, data, split, out, hd_mode } => {
            let model = Model::load(&ckpt)?;
            let samples = Dataset::open(&data)?.load_split(split, model.cfg.in_channels)?;
            if samples.is_empty() {
                bail!(UsageError(format!("split {split:?} of {} is empty", data.display())));
            }
            let report = evaluate(&model, &samples, hd_mode.unwrap_or(run.train.hd_mode))?;
            let out = out.unwrap_or_else(|| ckpt.parent().unwrap_or(Path::new(".")).join(format!("eval_{}", split_name(split))));
            run.model = model.cfg.clone();
            run.write(&out)?;
            report.write_csv(&out.join("metrics.csv"))?;
            report.write_json(&out.join("metrics.json"))?;
            let a = &report.aggregates;
            let hd = match (a.hd95_mean, a.hd95_std) {
                (Some(m), Some(s)) => format!("{m:.3} ± {s:.3}"),
                _ => "undefined".into(),
            };
            println!(
                "{} samples: DSC {:.4} ± {:.4}, HD95 {hd} ({} undefined); reports in {}",
                a.count,
                a.dsc_mean,
                a.dsc_std,
                a.hd_undefined,
                out.display()
            );
        }
        Command::Infer { ckpt, image, out } => {
            let model = Model::load(&ckpt)?;
            let (img, _) = load_tensor(&image)?;
            let n = model.cfg.img_size;
            if img.shape() != [n, n] {
                bail!("image {} has shape {:?}; the model expects [{n}, {n}]", image.display(), img.shape());
            }
            let c = model.cfg.in_channels;
            let batch = replicate_channels(&img, c)?.reshape(&[1, c, n, n])?;
            let mask = BinaryMask::from_logits(&model.predict(&batch)?)?.remove(0);
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            save_mask_pgm(&out, &mask)?;
            println!("{} foreground pixels of {} written to {}", mask.count(), n * n, out.display());
        }
        Command::Gradcheck { level, seeds } => {
            if seeds == 0 {
                bail!(UsageError("--seeds must be at least 1".into()));
            }
            let checks = verify::run(level, 0..seeds)?;
            let mut names: Vec<&str> = checks.iter().map(|c| c.name.as_str()).collect();
            names.dedup();
            let mut failed = 0;
            for name in names {
                let group: Vec<_> = checks.iter().filter(|c| c.name == name).collect();
                let worst = group.iter().map(|c| c.rel_err).fold(0.0, f64::max);
                let bad = group.iter().filter(|c| !c.passed()).count();
                failed += bad;
                println!("{:<22} {:>3} seeds  worst {worst:.2e}  tol {:.0e}  {}", name, group.len(), group[0].tol, if bad == 0 { "ok" } else { "FAIL" });
            }
            println!("{} checks, {failed} failed", checks.len());
            if failed > 0 {
                bail!("{failed} gradient checks exceeded tolerance");
            }
        }
        Command::Params => {
            println!("{:<18} {:>12}", "variant", "params");
            for v in Variant::ALL {
                let m = Model::build(&ablate(&run.model, v))?;
                println!("{:<18} {:>12}", v.to_string(), m.param_count());
            }
            let m = Model::build(&run.model)?;
            let mut groups: Vec<(String, usize)> = Vec::new();
            for (_, p) in m.store.iter().filter(|(_, p)| p.trainable) {
                let head = p.name.split('.').next().unwrap_or_default().to_string();
                match groups.iter_mut().find(|g| g.0 == head) {
                    Some(g) => g.1 += p.value.numel(),
                    None => groups.push((head, p.value.numel())),
                }
            }
            println!();
            for (name, n) in groups {
                println!("  {name:<16} {n:>12}");
            }
        }
        Command::Ablate { data, out, epochs } => {
            run.train.epochs = epochs.unwrap_or(run.train.epochs);
            let ds = Dataset::open(&data)?;
            let train = ds.load_split(Split::Train, run.model.in_channels)?;
            let val = ds.load_split(Split::Test, run.model.in_channels)?;
            run.write(&out)?;
            let mut rows = Vec::new();
            for v in Variant::ALL {
                let cfg = ablate(&run.model, v);
                let dir = out.join(v.to_string());
                RunConfig { model: cfg.clone(), ..run.clone() }.write(&dir)?;
                eprintln!("training {v}");
                let mut trainer = Trainer::new(cfg.clone(), run.train.clone(), &train, &val).with_output(&dir);
                trainer.on_epoch = Some(Box::new(log_epoch));
                let outcome = trainer.run()?;
                let last = outcome.history.last().context("no epochs were run")?.clone();
                rows.push(serde_json::json!({
                    "variant": v.to_string(),
                    "params": outcome.model.param_count(),
                    "epochs": last.epoch,
                    "train_loss": last.train_loss,
                    "val_dsc": last.val_dsc,
                    "val_hd95": last.val_hd95,
                }));
            }
            let table = ablation_table(&rows);
            print!("{table}");
            std::fs::write(out.join("ablation.md"), &table)?;
            std::fs::write(out.join("ablation.json"), serde_json::to_string_pretty(&rows)? + "\n")?;
        }
    }
    Ok(())
}

fn split_name(s: Split) -> &'static str {
    match s {
        Split::Train => "train",
        Split::Test => "test",
    }
}

fn log_epoch(r: &EpochRecord) {
    let opt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
    eprintln!("epoch {:>4}  loss {:.5}  val_dsc {}  val_hd95 {}", r.epoch, r.train_loss, opt(r.val_dsc), opt(r.val_hd95));
}

fn ablation_table(rows: &[serde_json::Value]) -> String {
    let num = |v: &serde_json::Value, p: usize| v.as_f64().map_or("n/a".to_string(), |x| format!("{x:.p$}"));
    let mut s = String::from("| variant | params | epochs | train loss | val DSC | val HD95 |\n|---|---:|---:|---:|---:|---:|\n");
    for r in rows {
        s += &format!(
            "| {} | {} | {} | {} | {} | {} |\n",
            r["variant"].as_str().unwrap_or_default(),
            r["params"],
            r["epochs"],
            num(&r["train_loss"], 5),
            num(&r["val_dsc"], 4),
            num(&r["val_hd95"], 3)
        );
    }
    s
}
