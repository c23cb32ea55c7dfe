//! Subcommands of the `wavlm` binary.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use wavlm_core::encoder::EncoderConfig;
use wavlm_core::labeler::{fit_mfcc_codebook, label_waveform, write_labels, KMeansConfig};
use wavlm_core::mixer::{simulate_batch, MixConfig};
use wavlm_core::model::Preset;
use wavlm_core::signal::{read_wav_dir, write_wav, WaveBatch, Waveform};
use wavlm_core::train::{train, TrainConfig, TrainData};
use wavlm_core::transformer::BucketConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad flags or configuration: exit code 2.
    #[error("{0}")]
    Usage(String),
    /// Failure while running: exit code 1.
    #[error(transparent)]
    Runtime(#[from] wavlm_core::Error),
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Runtime(wavlm_core::Error::Config(_)) => 2,
            _ => 1,
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Runtime(wavlm_core::Error::io(path, e))
}

#[derive(Debug, Parser)]
#[command(
    name = "wavlm",
    version,
    about = "Masked speech denoising and prediction pre-training at desk scale"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Overlap utterances of a directory with each other and with noise clips.
    SimulateMix(SimulateMix),
    /// Fit an MFCC k-means codebook and write frame labels.
    PseudoLabel(PseudoLabel),
    /// Print the relative-position bucket of every offset in a range.
    InspectBuckets(InspectBuckets),
    /// Compare reverse-mode gradients with finite differences.
    Gradcheck(Gradcheck),
    /// Run the toy pre-training loop.
    PretrainToy(PretrainToy),
    /// Run the acceptance checks.
    Verify(Verify),
}

#[derive(Debug, Args)]
pub struct SimulateMix {
    #[arg(long)]
    pub in_dir: PathBuf,
    #[arg(long)]
    pub noise_dir: Option<PathBuf>,
    /// Probability that an utterance is mixed.
    #[arg(long, default_value_t = 0.2)]
    pub p: f64,
    /// Probability that the secondary source is a noise clip.
    #[arg(long, default_value_t = 0.1)]
    pub pn: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Defaults to `<out-dir>/events.json`.
    #[arg(long)]
    pub events_json: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PseudoLabel {
    #[arg(long)]
    pub in_dir: PathBuf,
    /// Number of clusters.
    #[arg(long = "C", default_value_t = 32)]
    pub clusters: usize,
    #[arg(long, default_value_t = 50)]
    pub iters: usize,
    #[arg(long, default_value_t = 1)]
    pub restarts: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory for `labels.txt`, `files.txt` and `codebook.json`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct InspectBuckets {
    #[arg(long, default_value_t = 320)]
    pub n: usize,
    #[arg(long, default_value_t = 800)]
    pub m: usize,
    /// Inclusive offset range `lo..hi`.
    #[arg(long, default_value = "-1200..1200", allow_hyphen_values = true)]
    pub range: String,
    /// CSV destination; standard output when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct Gradcheck {
    #[arg(long, default_value = "micro")]
    pub preset: Preset,
    #[arg(long, default_value_t = 5)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct PretrainToy {
    /// JSON training configuration; omitted fields take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Print the full default configuration and exit.
    #[arg(long)]
    pub dump_config: bool,
    #[arg(long, default_value = "runs/toy")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct Verify {
    /// Run every criterion.
    #[arg(long, conflicts_with = "criterion")]
    pub all: bool,
    /// Run a single criterion by number.
    #[arg(long)]
    pub criterion: Option<u8>,
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<(), CliError> {
    match cli.command {
        Command::SimulateMix(a) => simulate_mix(a, out),
        Command::PseudoLabel(a) => pseudo_label(a, out),
        Command::InspectBuckets(a) => inspect_buckets(a, out),
        Command::Gradcheck(a) => gradcheck(a, out),
        Command::PretrainToy(a) => pretrain_toy(a, out),
        Command::Verify(a) => verify(a, out),
    }
}

fn emit(out: &mut dyn Write, line: std::fmt::Arguments<'_>) -> Result<(), CliError> {
    writeln!(out, "{line}").map_err(|e| io_err(Path::new("<stdout>"), e))
}

fn load_dir(dir: &Path) -> Result<Vec<(PathBuf, Waveform)>, CliError> {
    let files = read_wav_dir(dir)?;
    if files.is_empty() {
        return Err(CliError::Failed(format!("no .wav files in {}", dir.display())));
    }
    Ok(files)
}

fn simulate_mix(a: SimulateMix, out: &mut dyn Write) -> Result<(), CliError> {
    let cfg = MixConfig {
        p: a.p,
        p_n: a.pn,
        seed: a.seed,
        ..MixConfig::default()
    };
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let files = load_dir(&a.in_dir)?;
    let noises: Vec<Waveform> = match &a.noise_dir {
        Some(d) => load_dir(d)?.into_iter().map(|(_, w)| w).collect(),
        None => Vec::new(),
    };
    let waves: Vec<Waveform> = files.iter().map(|(_, w)| w.clone()).collect();
    let batch = WaveBatch::from_waveforms(&waves)?;
    let mixed = simulate_batch(&batch, &noises, &cfg)?;
    fs::create_dir_all(&a.out_dir).map_err(|e| io_err(&a.out_dir, e))?;
    let mut clipped = 0;
    for (i, (path, _)) in files.iter().enumerate() {
        let name = path.file_name().expect("directory entries have names");
        clipped += write_wav(a.out_dir.join(name), &mixed.mixed.waveform(i))?.clipped;
    }
    let events_path = a.events_json.unwrap_or_else(|| a.out_dir.join("events.json"));
    let json = serde_json::to_string_pretty(&mixed.events).map_err(wavlm_core::Error::from)?;
    fs::write(&events_path, json).map_err(|e| io_err(&events_path, e))?;
    emit(
        out,
        format_args!(
            "mixed {} of {} utterances; events in {}{}",
            mixed.events.len(),
            files.len(),
            events_path.display(),
            if clipped > 0 {
                format!("; {clipped} samples clipped")
            } else {
                String::new()
            }
        ),
    )
}

fn pseudo_label(a: PseudoLabel, out: &mut dyn Write) -> Result<(), CliError> {
    let cfg = KMeansConfig {
        clusters: a.clusters,
        iters: a.iters,
        restarts: a.restarts,
        seed: a.seed,
    };
    let files = load_dir(&a.in_dir)?;
    let waves: Vec<Waveform> = files.iter().map(|(_, w)| w.clone()).collect();
    let (codebook, fit) = fit_mfcc_codebook(&waves, &cfg)?;
    let encoder = EncoderConfig::default();
    let labels = waves
        .iter()
        .zip(&files)
        .map(|(w, (p, _))| {
            let frames = encoder.frames_for(w.len()).ok_or_else(|| {
                CliError::Failed(format!(
                    "{} is shorter than one encoder frame (400 samples)",
                    p.display()
                ))
            })?;
            Ok(label_waveform(&codebook, w, frames)?)
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    fs::create_dir_all(&a.out).map_err(|e| io_err(&a.out, e))?;
    write_labels(a.out.join("labels.txt"), &labels)?;
    codebook.save(a.out.join("codebook.json"))?;
    let names: String = files
        .iter()
        .map(|(p, _)| format!("{}\n", p.file_name().unwrap_or_default().to_string_lossy()))
        .collect();
    let list = a.out.join("files.txt");
    fs::write(&list, names).map_err(|e| io_err(&list, e))?;
    emit(
        out,
        format_args!(
            "{} utterances labelled with {} clusters (inertia {:.4}); output in {}",
            labels.len(),
            codebook.clusters(),
            fit.inertia,
            a.out.display()
        ),
    )
}

fn parse_range(text: &str) -> Result<(i64, i64), CliError> {
    let bad = || CliError::Usage(format!("--range expects lo..hi, got {text:?}"));
    let (lo, hi) = text.split_once("..").ok_or_else(bad)?;
    let lo: i64 = lo.trim().parse().map_err(|_| bad())?;
    let hi: i64 = hi.trim().parse().map_err(|_| bad())?;
    if lo > hi {
        return Err(bad());
    }
    Ok((lo, hi))
}

fn inspect_buckets(a: InspectBuckets, out: &mut dyn Write) -> Result<(), CliError> {
    let cfg = BucketConfig { n: a.n, m: a.m };
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let (lo, hi) = parse_range(&a.range)?;
    let mut csv = String::from("offset,bucket\n");
    for off in lo..=hi {
        csv.push_str(&format!("{off},{}\n", cfg.index(off)));
    }
    match a.out {
        Some(path) => {
            fs::write(&path, csv).map_err(|e| io_err(&path, e))?;
            emit(out, format_args!("{} rows written to {}", hi - lo + 1, path.display()))
        }
        None => out
            .write_all(csv.as_bytes())
            .map_err(|e| io_err(Path::new("<stdout>"), e)),
    }
}

fn gradcheck(a: Gradcheck, out: &mut dyn Write) -> Result<(), CliError> {
    let checks = wavlm_verify::model_gradcheck(a.preset, a.seed)?;
    let mut failed = 0;
    for c in &checks {
        let ok = c.relative_error < wavlm_verify::GRADCHECK_TOLERANCE;
        failed += !ok as usize;
        emit(
            out,
            format_args!(
                "{} {:<40} {:>4} elements  rel. error {:.2e}",
                if ok { "ok  " } else { "FAIL" },
                c.name,
                c.checked,
                c.relative_error
            ),
        )?;
    }
    if failed > 0 {
        return Err(CliError::Failed(format!(
            "{failed} of {} parameter groups failed",
            checks.len()
        )));
    }
    emit(out, format_args!("all {} parameter groups agree", checks.len()))
}

fn pretrain_toy(a: PretrainToy, out: &mut dyn Write) -> Result<(), CliError> {
    if a.dump_config {
        let json = serde_json::to_string_pretty(&TrainConfig::default()).map_err(wavlm_core::Error::from)?;
        return emit(out, format_args!("{json}"));
    }
    let cfg = match &a.config {
        Some(path) => TrainConfig::load(path)?,
        None => TrainConfig::default(),
    };
    let data = TrainData::load(&cfg)?;
    let outcome = train(&cfg, &data, Some(&a.out_dir))?;
    let s = outcome.summary;
    emit(
        out,
        format_args!(
            "{} steps: smoothed loss {:.4} → {:.4} (ratio {:.3}); outputs in {}",
            cfg.steps,
            s.initial,
            s.last,
            s.ratio,
            a.out_dir.display()
        ),
    )
}

fn verify(a: Verify, out: &mut dyn Write) -> Result<(), CliError> {
    let reports =
        match (a.all, a.criterion) {
            (_, Some(id)) => vec![wavlm_verify::run(id)
                .ok_or_else(|| CliError::Usage(format!("no criterion {id}; valid ids are 1-9")))?],
            (true, None) => {
                let mut reports = Vec::new();
                for r in wavlm_verify::run_all(|r| {
                    let _ = writeln!(out, "{r}");
                }) {
                    reports.push(r);
                }
                reports
            }
            (false, None) => return Err(CliError::Usage("verify needs --all or --criterion N".into())),
        };
    if a.criterion.is_some() {
        emit(out, format_args!("{}", reports[0]))?;
    }
    let total: f64 = reports.iter().map(|r| r.elapsed.as_secs_f64()).sum();
    let passed = reports.iter().filter(|r| r.passed).count();
    emit(out, format_args!("{passed}/{} passed in {total:.1} s", reports.len()))?;
    if passed < reports.len() {
        return Err(CliError::Failed(format!("{} criteria failed", reports.len() - passed)));
    }
    Ok(())
}
