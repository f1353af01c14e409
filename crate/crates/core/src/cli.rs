//! `nnbp` command line: construct, train, eval, gradcheck and replay.
//!
//! Every run is described by an [`Invocation`] holding the fully resolved
//! inputs (code definition, config, embedded checkpoints), which is written to
//! a [`RunManifest`] before the run starts and finalized with output digests
//! when it ends. `nnbp replay` re-executes an invocation from its manifest.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::bench::{self, Contender, Stopping, SweepConfig, CONVENTIONAL};
use crate::channel::SnrConvention;
use crate::config::KeyValues;
use crate::decoder::DEFAULT_LLR_MAX;
use crate::error::{Error, Result};
use crate::grad::{finite_difference_check, FdConfig};
use crate::loss::LossKind;
use crate::polar::{construct_frozen_set, PolarCode};
use crate::train::{self, TrainConfig};
use crate::weights::{Checkpoint, ScalingWeights};

pub const MANIFEST_FORMAT: &str = "polar-nnbp-manifest";

/// Largest block length `gradcheck` accepts.
pub const GRADCHECK_MAX_BLOCK_LENGTH: usize = 16;

#[derive(Debug, Parser)]
#[command(name = "nnbp", version, about = "Weighted belief-propagation polar decoder: training and evaluation")]
pub struct Cli {
    /// Worker threads for frame-level parallelism (default: all cores).
    #[arg(long, global = true, env = "NNBP_WORKERS")]
    pub workers: Option<usize>,

    /// Where to write the run manifest (default: next to the primary output).
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a polar code by Bhattacharyya construction and write its definition file.
    Construct {
        #[arg(short = 'N', long = "block-length")]
        block_len: usize,
        #[arg(short = 'K', long = "dimension")]
        k: usize,
        #[arg(long, default_value_t = 0.5)]
        design_erasure: f64,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Train scaling weights from a key-value config file.
    Train { config: PathBuf },
    /// Monte-Carlo FER/BER comparison against conventional BP.
    Eval(EvalArgs),
    /// Compare analytic gradients with central finite differences.
    Gradcheck(GradcheckArgs),
    /// Re-run the invocation recorded in a manifest and compare output digests.
    Replay {
        manifest: PathBuf,
        /// Directory receiving the re-generated outputs.
        #[arg(long)]
        out_dir: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Code definition file.
    #[arg(long)]
    pub code: PathBuf,
    /// Weight checkpoint, as `label=path` or `path` (label = file name up to the first dot). Repeatable.
    #[arg(long = "checkpoint")]
    pub checkpoints: Vec<String>,
    /// Comma-separated SNR points in dB.
    #[arg(long, value_delimiter = ',', required = true, allow_hyphen_values = true)]
    pub snr: Vec<f64>,
    #[arg(long, default_value_t = 1_000_000)]
    pub max_frames: u64,
    #[arg(long, default_value_t = 100)]
    pub min_errors: u64,
    #[arg(long)]
    pub seed: u64,
    /// BP iterations; defaults to the checkpoints' value, else 5.
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_LLR_MAX)]
    pub llr_max: f64,
    #[arg(long, default_value = "ebn0")]
    pub snr_convention: SnrConvention,
    /// Also run the exhaustive ML decoder (N <= 16).
    #[arg(long)]
    pub ml: bool,
    #[arg(short, long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(short = 'N', long = "block-length", default_value_t = 8)]
    pub block_len: usize,
    #[arg(short = 'K', long = "dimension", default_value_t = 4)]
    pub k: usize,
    #[arg(short = 'T', long, default_value_t = 2)]
    pub iterations: usize,
    #[arg(long)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    pub eps: f64,
    #[arg(long, default_value_t = 10)]
    pub frames: usize,
    #[arg(long, default_value = "syndrome")]
    pub loss: LossKind,
    #[arg(long, default_value_t = 1e-3)]
    pub tolerance: f64,
    /// Write the report as JSON.
    #[arg(short, long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelledCheckpoint {
    pub label: String,
    pub source: PathBuf,
    /// The checkpoint file's JSON, embedded so the manifest is self-contained.
    pub checkpoint: serde_json::Value,
}

/// Fully resolved inputs of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "lowercase")]
pub enum Invocation {
    Construct {
        block_len: usize,
        k: usize,
        design_erasure: f64,
        out: PathBuf,
    },
    Train {
        config: TrainConfig,
        /// Code definition text.
        code: String,
        checkpoint: PathBuf,
        history: PathBuf,
    },
    Eval {
        code: String,
        checkpoints: Vec<LabelledCheckpoint>,
        sweep: SweepConfig,
        ml: bool,
        out: PathBuf,
    },
    Gradcheck {
        config: FdConfig,
        out: Option<PathBuf>,
    },
}

impl Invocation {
    pub fn name(&self) -> &'static str {
        match self {
            Invocation::Construct { .. } => "construct",
            Invocation::Train { .. } => "train",
            Invocation::Eval { .. } => "eval",
            Invocation::Gradcheck { .. } => "gradcheck",
        }
    }

    pub fn seed(&self) -> Option<u64> {
        match self {
            Invocation::Construct { .. } => None,
            Invocation::Train { config, .. } => Some(config.seed),
            Invocation::Eval { sweep, .. } => Some(sweep.seed),
            Invocation::Gradcheck { config, .. } => Some(config.seed),
        }
    }

    /// `(role, path)` of every file the run writes.
    pub fn outputs(&self) -> Vec<(&'static str, PathBuf)> {
        match self {
            Invocation::Construct { out, .. } => vec![("code", out.clone())],
            Invocation::Train { checkpoint, history, .. } => {
                vec![("checkpoint", checkpoint.clone()), ("history", history.clone())]
            }
            Invocation::Eval { out, .. } => vec![("report", out.clone())],
            Invocation::Gradcheck { out, .. } => out.iter().map(|p| ("gradcheck", p.clone())).collect(),
        }
    }

    /// Same invocation with every output moved into `dir` (file names kept).
    pub fn relocated(&self, dir: &Path) -> Invocation {
        let mv = |p: &PathBuf| dir.join(p.file_name().unwrap_or(p.as_os_str()));
        let mut inv = self.clone();
        match &mut inv {
            Invocation::Construct { out, .. } | Invocation::Eval { out, .. } => *out = mv(out),
            Invocation::Train { checkpoint, history, .. } => {
                *checkpoint = mv(checkpoint);
                *history = mv(history);
            }
            Invocation::Gradcheck { out, .. } => *out = out.as_ref().map(mv),
        }
        inv
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Running,
    Completed,
    /// Finished, but a check (e.g. gradcheck tolerance) failed.
    CheckFailed,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutputRecord {
    pub role: String,
    pub path: PathBuf,
    /// FNV-1a 64 digest of the reproducible content (see [`output_digest`]).
    pub digest: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: String,
    pub version: String,
    pub command: String,
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub invocation: Invocation,
    pub outputs: Vec<OutputRecord>,
    pub status: RunStatus,
    pub error: Option<String>,
    pub started_unix_ms: u64,
    pub finished_unix_ms: Option<u64>,
}

impl RunManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: RunManifest = serde_json::from_str(&text)?;
        if m.format != MANIFEST_FORMAT {
            return Err(Error::Config(format!("{}: not a run manifest", path.display())));
        }
        Ok(m)
    }
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Digest of an output file. For training histories the wall-clock `seconds`
/// column is dropped first, since it is the one non-reproducible field.
pub fn output_digest(role: &str, path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bytes = if role == "history" {
        String::from_utf8_lossy(&bytes)
            .lines()
            .map(|l| l.rsplit_once(',').map_or(l, |(head, _)| head))
            .collect::<Vec<_>>()
            .join("\n")
            .into_bytes()
    } else {
        bytes
    };
    Ok(format!("{:016x}", fnv1a(&bytes)))
}

fn default_manifest_path(inv: &Invocation) -> PathBuf {
    match inv.outputs().first() {
        Some((_, p)) => {
            let mut s = p.clone().into_os_string();
            s.push(".manifest.json");
            PathBuf::from(s)
        }
        None => PathBuf::from(format!("{}.manifest.json", inv.name())),
    }
}

/// Whether a run succeeded and, for checks, whether the check passed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    Success,
    CheckFailed,
}

/// Executes an invocation, bracketing it with manifest writes.
pub fn run_invocation(inv: &Invocation, manifest_path: &Path, workers: Option<usize>) -> Result<(Outcome, RunManifest)> {
    let mut manifest = RunManifest {
        format: MANIFEST_FORMAT.to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        command: inv.name().to_string(),
        seed: inv.seed(),
        workers,
        invocation: inv.clone(),
        outputs: inv
            .outputs()
            .into_iter()
            .map(|(role, path)| OutputRecord { role: role.to_string(), path, digest: None })
            .collect(),
        status: RunStatus::Running,
        error: None,
        started_unix_ms: now_ms(),
        finished_unix_ms: None,
    };
    manifest.save(manifest_path)?;
    let result = execute(inv);
    manifest.finished_unix_ms = Some(now_ms());
    match &result {
        Ok(outcome) => {
            manifest.status = match outcome {
                Outcome::Success => RunStatus::Completed,
                Outcome::CheckFailed => RunStatus::CheckFailed,
            };
            for rec in &mut manifest.outputs {
                rec.digest = Some(output_digest(&rec.role, &rec.path)?);
            }
        }
        Err(e) => {
            manifest.status = RunStatus::Failed;
            manifest.error = Some(e.to_string());
        }
    }
    manifest.save(manifest_path)?;
    result.map(|o| (o, manifest))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Runs an invocation without manifest bookkeeping.
pub fn execute(inv: &Invocation) -> Result<Outcome> {
    match inv {
        Invocation::Construct { block_len, k, design_erasure, out } => {
            let info = construct_frozen_set(*block_len, *k, *design_erasure)?;
            let code = PolarCode::new(*block_len, info)?;
            code.save(out)?;
            println!("{}", code.to_definition().trim_end());
            Ok(Outcome::Success)
        }
        Invocation::Train { config, code, checkpoint, history } => {
            let code = PolarCode::from_definition(code)?;
            let outcome = train::train(config, &code, |r| {
                eprintln!(
                    "epoch {:>3}  train_loss {:.6}  val_loss {:.6}  val_fer {:.5}  ({:.1}s)",
                    r.epoch, r.train_loss, r.val_loss, r.val_fer, r.seconds
                );
            })?;
            Checkpoint { iterations: config.iterations, weights: outcome.weights }.save(checkpoint)?;
            train::write_history(history, &outcome.history)?;
            eprintln!("selected epoch {}", outcome.best_epoch);
            Ok(Outcome::Success)
        }
        Invocation::Eval { code, checkpoints, sweep, ml, out } => {
            let code = PolarCode::from_definition(code)?;
            let mut contenders = vec![Contender::bp(CONVENTIONAL, ScalingWeights::ones(code.n()))];
            for c in checkpoints {
                let ck = Checkpoint::from_json(&c.checkpoint.to_string())?;
                if ck.iterations != sweep.iterations {
                    return Err(Error::Checkpoint(format!(
                        "`{}` was trained for T={}, evaluating with T={}",
                        c.label, ck.iterations, sweep.iterations
                    )));
                }
                if ck.weights.block_len() != code.n() {
                    return Err(Error::Checkpoint(format!(
                        "`{}` has N={}, code has N={}",
                        c.label,
                        ck.weights.block_len(),
                        code.n()
                    )));
                }
                contenders.push(Contender::bp(c.label.clone(), ck.weights));
            }
            if *ml {
                contenders.push(Contender::Ml { label: "ml".into() });
            }
            let reports = bench::compare_contenders(&code, &contenders, sweep)?;
            bench::write_report(&reports, out)?;
            for r in &reports {
                for p in &r.points {
                    let (lo, hi) = p.fer_interval();
                    println!(
                        "{:<14} {:>6} dB  FER {:.4e} [{:.2e}, {:.2e}]  BER {:.4e}  ({} / {} frames)",
                        r.decoder,
                        p.snr_db,
                        p.fer(),
                        lo,
                        hi,
                        p.ber(r.k),
                        p.frame_errors,
                        p.frames
                    );
                }
            }
            Ok(Outcome::Success)
        }
        Invocation::Gradcheck { config, out } => {
            if config.block_len > GRADCHECK_MAX_BLOCK_LENGTH {
                return Err(Error::Config(format!(
                    "gradcheck is limited to N <= {GRADCHECK_MAX_BLOCK_LENGTH} (got {})",
                    config.block_len
                )));
            }
            let report = finite_difference_check(config)?;
            let json = serde_json::to_string_pretty(&report)? + "\n";
            if let Some(path) = out {
                write_text(path, &json)?;
            }
            print!("{json}");
            println!(
                "{} (max relative error {:.3e}, tolerance {:.0e}, at {})",
                if report.passed() { "PASS" } else { "FAIL" },
                report.max_rel_error,
                report.tolerance,
                report.worst_param
            );
            Ok(if report.passed() { Outcome::Success } else { Outcome::CheckFailed })
        }
    }
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = PathBuf::from(p);
    if p.is_absolute() {
        p
    } else {
        base.join(p)
    }
}

/// Reads a training config. Beyond the [`TrainConfig`] keys it takes `code`
/// (definition file) and optional `checkpoint` / `history` output paths; relative
/// paths are resolved against the config file's directory.
pub fn train_invocation(config_path: &Path) -> Result<Invocation> {
    let text = std::fs::read_to_string(config_path).map_err(|e| Error::io(config_path, e))?;
    let mut kv = KeyValues::parse(&text)?;
    let base = config_path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let stem = config_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "train".into());
    let code_path = resolve(&base, &kv.require_str("code")?);
    let checkpoint = kv
        .take_str("checkpoint")
        .map(|p| resolve(&base, &p))
        .unwrap_or_else(|| base.join(format!("{stem}.weights.json")));
    let history = kv
        .take_str("history")
        .map(|p| resolve(&base, &p))
        .unwrap_or_else(|| base.join(format!("{stem}.history.csv")));
    let config = TrainConfig::from_key_values(&mut kv)?;
    kv.finish()?;
    let code = PolarCode::load(&code_path)?;
    Ok(Invocation::Train { config, code: code.to_definition(), checkpoint, history })
}

pub fn eval_invocation(args: &EvalArgs) -> Result<Invocation> {
    let code = PolarCode::load(&args.code)?;
    let mut checkpoints = Vec::new();
    let mut iterations = args.iterations;
    for spec in &args.checkpoints {
        let (label, path) = match spec.split_once('=') {
            Some((l, p)) => (l.to_string(), PathBuf::from(p)),
            None => {
                let p = PathBuf::from(spec);
                let label = p
                    .file_name()
                    .map(|s| s.to_string_lossy().split('.').next().unwrap_or_default().to_string())
                    .filter(|s| !s.is_empty())
                    .unwrap_or_else(|| spec.clone());
                (label, p)
            }
        };
        if label == CONVENTIONAL || label == "ml" || checkpoints.iter().any(|c: &LabelledCheckpoint| c.label == label) {
            return Err(Error::Config(format!("duplicate or reserved decoder label `{label}`")));
        }
        let ck = Checkpoint::load(&path)?;
        let t = *iterations.get_or_insert(ck.iterations);
        if t != ck.iterations {
            return Err(Error::Checkpoint(format!(
                "{}: trained for T={}, evaluating with T={t}",
                path.display(),
                ck.iterations
            )));
        }
        checkpoints.push(LabelledCheckpoint {
            label,
            source: path,
            checkpoint: serde_json::from_str(&ck.to_json()?)?,
        });
    }
    Ok(Invocation::Eval {
        code: code.to_definition(),
        checkpoints,
        sweep: SweepConfig {
            iterations: iterations.unwrap_or(5),
            llr_max: args.llr_max,
            snr_list: args.snr.clone(),
            stopping: Stopping { max_frames: args.max_frames, min_frame_errors: args.min_errors },
            seed: args.seed,
            snr_convention: args.snr_convention,
        },
        ml: args.ml,
        out: args.out.clone(),
    })
}

pub fn gradcheck_invocation(args: &GradcheckArgs) -> Invocation {
    Invocation::Gradcheck {
        config: FdConfig {
            block_len: args.block_len,
            info_len: args.k,
            iterations: args.iterations,
            seed: args.seed,
            eps: args.eps,
            frames: args.frames,
            loss: args.loss,
            tolerance: args.tolerance,
            ..FdConfig::default()
        },
        out: args.out.clone(),
    }
}

/// Re-executes a manifest's invocation with outputs in `out_dir`. Returns
/// `(role, recorded digest, new digest)` per output.
pub fn replay(manifest_path: &Path, out_dir: &Path, workers: Option<usize>) -> Result<Vec<(String, String, String)>> {
    let original = RunManifest::load(manifest_path)?;
    if original.status == RunStatus::Running || original.status == RunStatus::Failed {
        return Err(Error::Config(format!(
            "{}: run did not complete ({:?})",
            manifest_path.display(),
            original.status
        )));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let inv = original.invocation.relocated(out_dir);
    let new_manifest_path = out_dir.join(
        default_manifest_path(&original.invocation)
            .file_name()
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("replay.manifest.json")),
    );
    let (_, rerun) = run_invocation(&inv, &new_manifest_path, workers)?;
    Ok(original
        .outputs
        .iter()
        .zip(&rerun.outputs)
        .map(|(a, b)| (a.role.clone(), a.digest.clone().unwrap_or_default(), b.digest.clone().unwrap_or_default()))
        .collect())
}

pub fn run(cli: Cli) -> Result<ExitCode> {
    if let Some(n) = cli.workers {
        if n == 0 {
            return Err(Error::Config("--workers must be >= 1".into()));
        }
        // Fails only if the pool was already built, in which case the existing one is used.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let inv = match &cli.command {
        Command::Construct { block_len, k, design_erasure, out } => Invocation::Construct {
            block_len: *block_len,
            k: *k,
            design_erasure: *design_erasure,
            out: out.clone(),
        },
        Command::Train { config } => train_invocation(config)?,
        Command::Eval(args) => eval_invocation(args)?,
        Command::Gradcheck(args) => gradcheck_invocation(args),
        Command::Replay { manifest, out_dir } => {
            let results = replay(manifest, out_dir, cli.workers)?;
            let mut ok = true;
            for (role, before, after) in &results {
                let same = before == after;
                ok &= same;
                println!("{role:<12} {before} {after} {}", if same { "identical" } else { "DIFFERS" });
            }
            return Ok(if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE });
        }
    };
    let manifest_path = cli.manifest.clone().unwrap_or_else(|| default_manifest_path(&inv));
    let (outcome, _) = run_invocation(&inv, &manifest_path, cli.workers)?;
    Ok(match outcome {
        Outcome::Success => ExitCode::SUCCESS,
        Outcome::CheckFailed => ExitCode::FAILURE,
    })
}
