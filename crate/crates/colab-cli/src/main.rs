//! `colab`: experiment driver for the context-label toolkit.
//!
//! Subcommands cover the full loop: `gen-data` writes a synthetic benchmark,
//! `train` runs one arm (resuming from its checkpoint if present), `eval`
//! scores a checkpoint on a split, `compare` executes a whole plan of
//! arm x seed runs and reduces them to a summary table, `export-logits` and
//! `hist` dump analysis CSVs.
//!
//! Every command is deterministic: rerunning with the same inputs rewrites
//! byte-identical outputs. Exit codes: 0 success, 1 incomplete plan,
//! 2 invalid input, 3 numerical divergence.

mod compare;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use colab_core::contextgen::ContextArm;
use colab_core::io::{fmt_sig, write_pgm};
use colab_core::labeling::LabelField;
use colab_core::metatrain::{
    continue_training, init_state, static_context, write_metrics_csv, ColabConfig, TrainData,
    TrainOptions, TrainState,
};
use colab_core::metrics::{
    evaluate_case, export_logits, intensity_histogram, largest_component, predict_case,
    MetricsRecord,
};
use colab_core::rng::SeedStream;
use colab_core::synthdata::{generate_task, load_dataset, save_dataset, Case, TaskSpec};
use colab_core::{Error, Result};

#[derive(Parser)]
#[command(name = "colab", version, about = "Synthetic context-label segmentation lab")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic benchmark dataset from a task spec file.
    GenData(GenDataArgs),
    /// Train one arm on a dataset, resuming from a checkpoint if present.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset split, one CSV row per case.
    Eval(EvalArgs),
    /// Run every arm x seed of a plan file and write a summary table.
    Compare(CompareArgs),
    /// Sample pixel logits from a checkpoint into a CSV.
    ExportLogits(ExportLogitsArgs),
    /// Per-class intensity histograms of a dataset split.
    Hist(HistArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Task spec file (JSON or TOML).
    #[arg(long)]
    config: PathBuf,
    /// Dataset directory to create.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Training config file (JSON or TOML).
    #[arg(long)]
    config: PathBuf,
    /// Label source for this run.
    #[arg(long, value_parser = parse_arm)]
    arm: ContextArm,
    /// Dataset directory from gen-data.
    #[arg(long)]
    data: PathBuf,
    /// Run directory: checkpoint/ and metrics.csv land here.
    #[arg(long)]
    out: PathBuf,
    /// Override the config's context class count.
    #[arg(long)]
    t: Option<usize>,
    /// Override the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Stop after this many epochs (for interrupt/resume runs).
    #[arg(long)]
    max_epochs: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    /// Run directory from train (or its checkpoint/ subdirectory).
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Which split to score.
    #[arg(long, default_value = "test")]
    split: Split,
    /// Keep only the largest connected predicted component.
    #[arg(long)]
    postprocess: bool,
    /// CSV file to write.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CompareArgs {
    /// Experiment plan file (JSON).
    #[arg(long)]
    plan: PathBuf,
}

#[derive(Args)]
struct ExportLogitsArgs {
    /// Run directory from train (or its checkpoint/ subdirectory).
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Which split to sample from.
    #[arg(long, default_value = "test")]
    split: Split,
    /// Pixel sample count (half ROI, half background).
    #[arg(long, default_value_t = 2000)]
    samples: usize,
    /// Sampling seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// CSV file to write.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct HistArgs {
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Which split to histogram.
    #[arg(long, default_value = "train")]
    split: Split,
    /// Intensity bins per class.
    #[arg(long, default_value_t = 32)]
    bins: usize,
    /// CSV file to write.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
enum Split {
    Train,
    Test,
}

fn parse_arm(s: &str) -> std::result::Result<ContextArm, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::NonFinite(_) | Error::Diverged(_) => ExitCode::from(3),
                _ => ExitCode::from(2),
            }
        }
    }
}

fn run(cmd: Cmd) -> Result<ExitCode> {
    match cmd {
        Cmd::GenData(a) => cmd_gen_data(&a)?,
        Cmd::Train(a) => cmd_train(&a)?,
        Cmd::Eval(a) => cmd_eval(&a)?,
        Cmd::Compare(a) => return compare::cmd_compare(&a.plan),
        Cmd::ExportLogits(a) => cmd_export_logits(&a)?,
        Cmd::Hist(a) => cmd_hist(&a)?,
    }
    Ok(ExitCode::SUCCESS)
}

/// Deserializes a JSON (default) or TOML (by extension) config file.
fn read_file_as<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    if path.extension().is_some_and(|e| e == "toml") {
        toml::from_str(&text).map_err(|e| Error::format(path.display().to_string(), e.to_string()))
    } else {
        serde_json::from_str(&text)
            .map_err(|e| Error::format(path.display().to_string(), e.to_string()))
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent.display().to_string(), e))?;
        }
    }
    fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

fn cmd_gen_data(a: &GenDataArgs) -> Result<()> {
    let spec: TaskSpec = read_file_as(&a.config)?;
    spec.validate()?;
    let (train, test) = generate_task(&spec)?;
    save_dataset(&a.out, &spec, &train, &test)?;
    println!("wrote {} train + {} test cases to {}", train.len(), test.len(), a.out.display());
    Ok(())
}

/// Static arms also leave an argmax snapshot of their label fields next to
/// the dataset, one indexed PGM per case (value = context class). The
/// snapshot is a cache for inspection; soft fields (the dilated arm) lose
/// their off-argmax mass in it, training always uses the full fields.
fn cache_context_labels(data_dir: &Path, arm: ContextArm, cfg: &ColabConfig, train: &[Case]) -> Result<()> {
    let (fields, _) = static_context(arm, cfg, train)?;
    let Some(fields) = fields else { return Ok(()) };
    let dir = data_dir.join("context_labels").join(format!("{arm}_t{}_s{}", cfg.t, cfg.seed));
    fs::create_dir_all(&dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    for (case, field) in train.iter().zip(&fields) {
        let (h, w) = (field.height(), field.width());
        let mut px = vec![0u8; h * w];
        for y in 0..h {
            for x in 0..w {
                px[y * w + x] = field.argmax_class(y, x) as u8;
            }
        }
        write_pgm(&dir.join(format!("{}.pgm", case.id)), w, h, &px)?;
    }
    Ok(())
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let mut cfg: ColabConfig = read_file_as(&a.config)?;
    if let Some(t) = a.t {
        cfg.t = t;
    }
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    let (_, train, test) = load_dataset(&a.data)?;
    cache_context_labels(&a.data, a.arm, &cfg, &train)?;

    let ckpt = a.out.join("checkpoint");
    let mut state = if ckpt.join("manifest.json").exists() {
        let state = TrainState::load(&ckpt)?;
        if state.arm != a.arm {
            return Err(Error::invalid(format!(
                "checkpoint in {} was trained with arm {}, not {}",
                ckpt.display(),
                state.arm,
                a.arm
            )));
        }
        if state.cfg != cfg {
            return Err(Error::invalid(format!(
                "checkpoint in {} was trained with a different config",
                ckpt.display()
            )));
        }
        state
    } else {
        init_state(&cfg, a.arm)?
    };

    let opts = TrainOptions { out_dir: Some(a.out.clone()), max_epochs: a.max_epochs };
    let data = TrainData { train: &train, test: &test };
    let output = continue_training(&mut state, &data, &opts)?;

    // the loop saves at epoch boundaries; repeat here so a rerun of an
    // already-finished run still rewrites its (identical) outputs
    fs::create_dir_all(&a.out).map_err(|e| Error::io(a.out.display().to_string(), e))?;
    output.state.save(&ckpt)?;
    write_metrics_csv(&a.out.join("metrics.csv"), a.arm, cfg.seed, &output.state.history)?;

    for w in &output.state.warnings {
        eprintln!("warning: {w}");
    }
    match output.state.history.last() {
        Some(r) => println!(
            "{} seed {}: epoch {} test dsc {} (out: {})",
            a.arm,
            cfg.seed,
            r.epoch,
            fmt_sig(r.dsc),
            a.out.display()
        ),
        None => println!("{} seed {}: no epochs run", a.arm, cfg.seed),
    }
    Ok(())
}

/// Accepts either a run directory (containing checkpoint/) or the
/// checkpoint directory itself.
fn load_checkpoint(dir: &Path) -> Result<TrainState> {
    if dir.join("manifest.json").exists() {
        TrainState::load(dir)
    } else if dir.join("checkpoint").join("manifest.json").exists() {
        TrainState::load(&dir.join("checkpoint"))
    } else {
        Err(Error::invalid(format!("no checkpoint under {}", dir.display())))
    }
}

fn pick_split(split: Split, train: Vec<Case>, test: Vec<Case>) -> Vec<Case> {
    match split {
        Split::Train => train,
        Split::Test => test,
    }
}

fn record_row(r: &MetricsRecord) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{},{}\n",
        r.case_id,
        r.tp,
        r.fp,
        r.fn_,
        r.tn,
        fmt_sig(r.dsc),
        fmt_sig(r.sen),
        fmt_sig(r.prc),
        fmt_sig(r.hd95),
        u8::from(r.hd95_degenerate)
    )
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let state = load_checkpoint(&a.checkpoint)?;
    let (_, train, test) = load_dataset(&a.data)?;
    let cases = pick_split(a.split, train, test);
    let mut csv = String::from("case,tp,fp,fn,tn,dsc,sen,prc,hd95,hd95_degenerate\n");
    for case in &cases {
        let mut pred = predict_case(&state.seg, &case.image)?;
        if a.postprocess {
            pred = largest_component(&pred);
        }
        csv.push_str(&record_row(&evaluate_case(&case.id, &pred, &case.roi_mask)?));
    }
    write_text(&a.out, &csv)?;
    println!("scored {} cases into {}", cases.len(), a.out.display());
    Ok(())
}

fn cmd_export_logits(a: &ExportLogitsArgs) -> Result<()> {
    let state = load_checkpoint(&a.checkpoint)?;
    let (_, train, test) = load_dataset(&a.data)?;
    let cases = pick_split(a.split, train, test);
    let mut rng = SeedStream::new(a.seed).child("logit-export");
    let rows = export_logits(&state.seg, &cases, a.samples, &mut rng)?;
    let mut csv = String::from("case,y,x,class_label,z1,z_rest_max\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.case, r.y, r.x, r.class_label, fmt_sig(r.z1), fmt_sig(r.z_rest_max)
        ));
    }
    write_text(&a.out, &csv)?;
    println!("sampled {} pixels into {}", rows.len(), a.out.display());
    Ok(())
}

/// Ground-truth composition of a case: class 0 = ROI, 1 = rest of the
/// organ, 2 = everything else.
fn composition_field(case: &Case) -> LabelField {
    let (h, w) = (case.roi_mask.height(), case.roi_mask.width());
    LabelField::from_fn(3, h, w, |c, y, x| {
        let want = if case.roi_mask.get(y, x) {
            0
        } else if case.organ_mask.get(y, x) {
            1
        } else {
            2
        };
        f64::from(u8::from(c == want))
    })
}

fn cmd_hist(a: &HistArgs) -> Result<()> {
    let (_, train, test) = load_dataset(&a.data)?;
    let cases = pick_split(a.split, train, test);
    let mut csv = String::from("case,class,bin,lo,hi,freq\n");
    for case in &cases {
        let hist = intensity_histogram(&case.image, &composition_field(case), a.bins)?;
        let step = (hist.hi - hist.lo) / a.bins as f64;
        for (cls, row) in hist.counts.iter().enumerate() {
            for (bin, freq) in row.iter().enumerate() {
                csv.push_str(&format!(
                    "{},{},{},{},{},{}\n",
                    case.id,
                    cls,
                    bin,
                    fmt_sig(hist.lo + step * bin as f64),
                    fmt_sig(hist.lo + step * (bin + 1) as f64),
                    fmt_sig(*freq)
                ));
            }
        }
    }
    write_text(&a.out, &csv)?;
    println!("histogrammed {} cases into {}", cases.len(), a.out.display());
    Ok(())
}
