//! `stambridge` command line.
//!
//! Exit codes: 0 on success, 1 on runtime or numeric failure, 2 on usage
//! and configuration errors.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::config::TrainConfig;
use crate::data::dataset::MANIFEST_FILE;
use crate::data::tensor_file::FORMAT_VERSION;
use crate::data::{synth_generate, Dataset, SynthConfig};
use crate::error::{Error, Result};
use crate::eval::zero_shot_retrieval;
use crate::export::export_artifacts;
use crate::gradcheck::{gradcheck, GradCheckConfig};
use crate::ringing::{ringing_compare, Transient};
use crate::train::{fit_with_progress, Checkpoint, META_FILE};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Parser, Debug)]
#[command(
    name = "stambridge",
    about = "EEG-to-prototype alignment toolkit",
    disable_version_flag = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset directory.
    Synth {
        #[arg(long, default_value_t = 20)]
        classes: usize,
        #[arg(long = "test-classes", default_value_t = 20)]
        test_classes: usize,
        #[arg(long, default_value_t = 50)]
        trials: usize,
        #[arg(long, default_value_t = 1)]
        subjects: usize,
        #[arg(long, default_value_t = 64)]
        dim: usize,
        #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
        snr: f64,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a dataset and write a checkpoint directory.
    Train {
        #[command(flatten)]
        opts: TrainFlags,
    },
    /// Zero-shot retrieval on the held-out classes.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 20)]
        kway: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Report path; defaults to `<ckpt>/retrieval_k<kway>.json`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference gradient check at tiny dimensions.
    Gradcheck {
        #[arg(long, default_value_t = 11)]
        seed: u64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        /// Scale the backward rule of this op by 1.01 (negative control).
        #[arg(long)]
        fault: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare hard spectral masking with soft channel gating.
    Ringing {
        #[arg(long, default_value_t = 250)]
        time: usize,
        #[arg(long, default_value_t = 125)]
        pos: usize,
        #[arg(long, default_value_t = 0.5)]
        keep: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write embeddings, channel weights and prototypes as CSV.
    Export {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the program and tensor-format versions.
    Version,
}

#[derive(clap::Args, Debug, Default)]
struct TrainFlags {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Checkpoint directory (alias: --out).
    #[arg(long, visible_alias = "out")]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    batch: Option<String>,
    #[arg(long)]
    dim: Option<String>,
    #[arg(long)]
    precision: Option<String>,
}

impl TrainFlags {
    fn overrides(&self) -> Vec<(&'static str, String)> {
        let mut o = Vec::new();
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        for (key, value) in [
            ("seed", self.seed.clone()),
            ("lr", self.lr.clone()),
            ("epochs", self.epochs.clone()),
            ("batch_size", self.batch.clone()),
            ("embed_dim", self.dim.clone()),
            ("precision", self.precision.clone()),
            ("data", path(&self.data)),
            ("ckpt", path(&self.ckpt)),
        ] {
            if let Some(v) = value {
                o.push((key, v));
            }
        }
        o
    }
}

/// Defaults, then the config file, then flags.
pub fn load_config(path: Option<&Path>, overrides: &[(&str, String)]) -> Result<TrainConfig> {
    if let Some(p) = path {
        if !p.is_file() {
            return Err(Error::Config(format!(
                "config file {} not found",
                p.display()
            )));
        }
    }
    TrainConfig::resolve(path, overrides)
}

fn require_dataset(dir: &Path) -> Result<()> {
    let m = dir.join(MANIFEST_FILE);
    if !m.is_file() {
        return Err(Error::Config(format!(
            "dataset manifest {} not found",
            m.display()
        )));
    }
    Ok(())
}

fn require_checkpoint(dir: &Path) -> Result<()> {
    let m = dir.join(META_FILE);
    if !m.is_file() {
        return Err(Error::Config(format!(
            "checkpoint {} not found",
            m.display()
        )));
    }
    Ok(())
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let json = serde_json::to_string_pretty(value).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    std::fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
}

fn dispatch(cmd: Command, out: &mut dyn Write) -> Result<()> {
    let mut say = |s: String| {
        let _ = writeln!(out, "{s}");
    };
    match cmd {
        Command::Version => {
            say(format!(
                "stambridge {VERSION} (tensor format v{FORMAT_VERSION})"
            ));
        }
        Command::Synth {
            classes,
            test_classes,
            trials,
            subjects,
            dim,
            snr,
            seed,
            out: dir,
        } => {
            let cfg = SynthConfig {
                train_classes: classes,
                test_classes,
                trials_per_class: trials,
                n_subjects: subjects,
                dim,
                snr_db: snr,
                seed,
                ..SynthConfig::default()
            };
            cfg.validate()?;
            let m = synth_generate(&cfg, &dir)?;
            say(format!(
                "wrote {} trials ({} train + {} held-out classes, {}x{}) to {}",
                m.n_trials(),
                classes,
                test_classes,
                m.channels,
                m.time,
                dir.display()
            ));
        }
        Command::Train { opts } => {
            let cfg = load_config(opts.config.as_deref(), &opts.overrides())?;
            say("# resolved configuration".into());
            say(cfg.to_text().trim_end().to_string());
            require_dataset(&cfg.data)?;
            let data = Dataset::load(&cfg.data)?;
            let summary = fit_with_progress(&cfg, &data, |epoch, main| {
                say(format!("epoch {:3}  L_main {main:.6}", epoch + 1));
            })?;
            let last = summary.rows.last().map(|r| r.l_total).unwrap_or(f64::NAN);
            say(format!(
                "checkpoint {} ({}) final loss {last}",
                summary.checkpoint_dir.display(),
                summary.checkpoint_id
            ));
        }
        Command::Eval {
            ckpt,
            data,
            kway,
            seed,
            out: report_path,
        } => {
            require_checkpoint(&ckpt)?;
            require_dataset(&data)?;
            let c = Checkpoint::load(&ckpt)?;
            say("# resolved configuration".into());
            say(c.config.to_text().trim_end().to_string());
            let dataset = Dataset::load(&data)?;
            let report =
                zero_shot_retrieval(&c.model, &dataset, kway, seed, &c.meta.checkpoint_id)?;
            let path = report_path.unwrap_or_else(|| ckpt.join(format!("retrieval_k{kway}.json")));
            report.write_json(&path)?;
            say(format!(
                "{}-way zero-shot over {} queries: top-1 {:.4}  top-5 {:.4}  -> {}",
                kway,
                report.n_queries,
                report.top1,
                report.top5,
                path.display()
            ));
        }
        Command::Gradcheck {
            seed,
            tolerance,
            fault,
            out: report_path,
        } => {
            let fault = match fault.as_deref() {
                None => None,
                Some(op) => Some((
                    crate::autodiff::op_name(op)
                        .ok_or_else(|| Error::Config(format!("unknown op `{op}`")))?,
                    1.01,
                )),
            };
            let cfg = GradCheckConfig {
                seed,
                tolerance,
                fault,
                ..GradCheckConfig::default()
            };
            let report = gradcheck(&cfg)?;
            for p in &report.params {
                say(format!(
                    "{:<36} {:>6}  rel {:.3e}  {}",
                    p.name,
                    p.numel,
                    p.max_rel_err,
                    if p.passed { "ok" } else { "FAIL" }
                ));
            }
            say(format!(
                "detach: max |dL_distill/d bridge| = {:e} ({})",
                report.detach.bridge_max_abs,
                if report.detach.passed { "ok" } else { "FAIL" }
            ));
            if let Some(p) = report_path {
                write_json(&p, &report)?;
            }
            if !report.passed {
                return Err(Error::Contract(format!(
                    "gradient check failed for {}",
                    report.offenders.join(", ")
                )));
            }
            say("gradient check passed".into());
        }
        Command::Ringing {
            time,
            pos,
            keep,
            out: report_path,
        } => {
            let mut all = Vec::new();
            for tr in [Transient::Impulse, Transient::Burst] {
                let m = ringing_compare(time, pos, keep, tr)?;
                say(format!(
                    "{:?}: pre-onset energy hard {:.6e} soft {:e}  sidelobe {:.4}",
                    tr, m.pre_onset_energy_hard, m.pre_onset_energy_soft, m.max_sidelobe_hard
                ));
                all.push(m);
            }
            if let Some(p) = report_path {
                write_json(&p, &all)?;
            }
        }
        Command::Export {
            ckpt,
            data,
            out: dir,
        } => {
            require_checkpoint(&ckpt)?;
            require_dataset(&data)?;
            let c = Checkpoint::load(&ckpt)?;
            let dataset = Dataset::load(&data)?;
            for p in export_artifacts(&c.model, &dataset, &dir)? {
                say(format!("wrote {}", p.display()));
            }
        }
    }
    Ok(())
}

/// Parses `argv` (program name first), runs the command, and returns the
/// process exit code. Summaries go to `out`, errors to stderr.
pub fn run_with<I, S>(argv: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command, out) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_usage() {
                2
            } else {
                1
            }
        }
    }
}

pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    run_with(argv, &mut std::io::stdout())
}
