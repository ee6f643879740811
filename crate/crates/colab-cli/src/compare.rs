//! Plan runner: trains every arm x seed of an experiment plan in child
//! processes, then reduces the final-epoch rows to one summary table
//! (CSV plus an aligned text rendering).
//!
//! Runs that already have a complete metrics table are skipped, so a rerun
//! of a finished plan only re-aggregates. Runs that fail or are missing
//! appear as `--` gap markers and make the command exit 1.

use std::collections::VecDeque;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, ExitCode, Stdio};

use serde::{Deserialize, Serialize};

use colab_core::contextgen::ContextArm;
use colab_core::io::fmt_sig;
use colab_core::metatrain::ColabConfig;
use colab_core::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArmSpec {
    pub arm: ContextArm,
    pub t: usize,
    pub seeds: Vec<u64>,
}

/// A full comparison: the same dataset and seed list for every arm, one
/// shared config (each run overrides t and seed). Relative paths are
/// resolved against the plan file's directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentPlan {
    pub arms: Vec<ArmSpec>,
    pub config: ColabConfig,
    pub dataset: PathBuf,
    pub out: PathBuf,
}

impl ExperimentPlan {
    pub fn validate(&self) -> Result<()> {
        if self.arms.is_empty() {
            return Err(Error::invalid("plan lists no arms"));
        }
        let first = &self.arms[0].seeds;
        if first.is_empty() {
            return Err(Error::invalid("plan lists no seeds"));
        }
        for (i, a) in self.arms.iter().enumerate() {
            if a.seeds != *first {
                return Err(Error::invalid(format!(
                    "arm {} uses a different seed list; paired comparison needs one list",
                    a.arm
                )));
            }
            if self.arms[..i].iter().any(|b| b.arm == a.arm && b.t == a.t) {
                return Err(Error::invalid(format!("arm {} t={} listed twice", a.arm, a.t)));
            }
            let mut cfg = self.config.clone();
            cfg.t = a.t;
            cfg.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Job {
    arm: ContextArm,
    t: usize,
    seed: u64,
    dir: PathBuf,
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn process_cap() -> usize {
    std::env::var("COLAB_LAB_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|n| *n >= 1)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Final-epoch metric columns of one run's metrics.csv, reparsed from the
/// written text so a hand recomputation over the same file matches bitwise.
struct FinalRow {
    values: Vec<f64>,
}

const METRIC_NAMES: [&str; 7] = ["dsc", "sen", "prc", "hd95", "loss_ce", "loss_dice", "loss_roi"];

fn final_row(path: &Path, epochs: usize) -> Option<FinalRow> {
    let text = fs::read_to_string(path).ok()?;
    let lines: Vec<&str> = text.lines().collect();
    if lines.len() != epochs + 1 {
        return None;
    }
    let cells: Vec<&str> = lines.last()?.split(',').collect();
    if cells.len() != 10 {
        return None;
    }
    let values: Option<Vec<f64>> = cells[3..10].iter().map(|c| c.parse().ok()).collect();
    Some(FinalRow { values: values? })
}

fn run_complete(job: &Job, epochs: usize) -> bool {
    final_row(&job.dir.join("metrics.csv"), epochs).is_some()
}

fn spawn_job(exe: &Path, cfg_path: &Path, dataset: &Path, job: &Job) -> Result<Child> {
    fs::create_dir_all(&job.dir).map_err(|e| Error::io(job.dir.display().to_string(), e))?;
    let log_path = job.dir.join("log.txt");
    let log = fs::File::create(&log_path).map_err(|e| Error::io(log_path.display().to_string(), e))?;
    let log_err = log.try_clone().map_err(|e| Error::io(log_path.display().to_string(), e))?;
    Command::new(exe)
        .arg("train")
        .arg("--config")
        .arg(cfg_path)
        .arg("--arm")
        .arg(job.arm.as_str())
        .arg("--t")
        .arg(job.t.to_string())
        .arg("--seed")
        .arg(job.seed.to_string())
        .arg("--data")
        .arg(dataset)
        .arg("--out")
        .arg(&job.dir)
        .stdout(Stdio::from(log))
        .stderr(Stdio::from(log_err))
        .spawn()
        .map_err(|e| Error::io(exe.display().to_string(), e))
}

/// Runs every job not already complete, at most `cap` child processes at a
/// time; each child trains single-threaded.
fn run_jobs(exe: &Path, cfg_path: &Path, dataset: &Path, jobs: &[Job], epochs: usize) -> Result<()> {
    let cap = process_cap();
    let mut pending: VecDeque<&Job> = jobs.iter().filter(|j| !run_complete(j, epochs)).collect();
    let mut running: Vec<(&Job, Child)> = Vec::new();
    while !pending.is_empty() || !running.is_empty() {
        while running.len() < cap {
            let Some(job) = pending.pop_front() else { break };
            running.push((job, spawn_job(exe, cfg_path, dataset, job)?));
        }
        let mut finished = false;
        let mut i = 0;
        while i < running.len() {
            let status = running[i]
                .1
                .try_wait()
                .map_err(|e| Error::io(running[i].0.dir.display().to_string(), e))?;
            match status {
                Some(status) => {
                    let (job, _) = running.swap_remove(i);
                    finished = true;
                    if !status.success() {
                        eprintln!(
                            "run {} t={} seed {} exited with {} (see {})",
                            job.arm,
                            job.t,
                            job.seed,
                            status.code().map_or_else(|| "signal".into(), |c| c.to_string()),
                            job.dir.join("log.txt").display()
                        );
                    }
                }
                None => i += 1,
            }
        }
        if !finished && !running.is_empty() {
            std::thread::sleep(std::time::Duration::from_millis(25));
        }
    }
    Ok(())
}

fn aligned_table(rows: &[Vec<String>]) -> String {
    let cols = rows[0].len();
    let widths: Vec<usize> =
        (0..cols).map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0)).collect();
    let mut out = String::new();
    for row in rows {
        for (c, cell) in row.iter().enumerate() {
            if c > 0 {
                out.push_str("  ");
            }
            out.push_str(&format!("{cell:>w$}", w = widths[c]));
        }
        out.push('\n');
    }
    out
}

pub fn cmd_compare(plan_path: &Path) -> Result<ExitCode> {
    let plan: ExperimentPlan = crate::read_file_as(plan_path)?;
    plan.validate()?;
    let base = plan_path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let dataset = resolve(&base, &plan.dataset);
    let out = resolve(&base, &plan.out);
    if !dataset.join("spec.json").exists() {
        return Err(Error::invalid(format!("no dataset at {}", dataset.display())));
    }
    fs::create_dir_all(&out).map_err(|e| Error::io(out.display().to_string(), e))?;

    let cfg_path = out.join("config.json");
    let cfg_json = serde_json::to_string_pretty(&plan.config)
        .map_err(|e| Error::format(cfg_path.display().to_string(), e.to_string()))?;
    fs::write(&cfg_path, cfg_json).map_err(|e| Error::io(cfg_path.display().to_string(), e))?;

    let jobs: Vec<Job> = plan
        .arms
        .iter()
        .flat_map(|a| {
            a.seeds.iter().map(|&seed| Job {
                arm: a.arm,
                t: a.t,
                seed,
                dir: out.join("runs").join(format!("{}_t{}_s{seed}", a.arm, a.t)),
            })
        })
        .collect();

    let exe = std::env::current_exe().map_err(|e| Error::io("current_exe", e))?;
    let epochs = plan.config.epochs;
    run_jobs(&exe, &cfg_path, &dataset, &jobs, epochs)?;

    // reduce: per arm, mean of each final-epoch metric over seeds
    let mut csv = String::from("arm,t,n_seeds,dsc,sen,prc,hd95,loss_ce,loss_dice,loss_roi\n");
    let mut table = vec![vec![
        "arm".to_string(),
        "t".to_string(),
        "dsc".to_string(),
        "sen".to_string(),
        "prc".to_string(),
        "hd95".to_string(),
    ]];
    let mut gaps = 0usize;
    for a in &plan.arms {
        let rows: Vec<Option<FinalRow>> = jobs
            .iter()
            .filter(|j| j.arm == a.arm && j.t == a.t)
            .map(|j| final_row(&j.dir.join("metrics.csv"), epochs))
            .collect();
        let complete: Vec<&FinalRow> = rows.iter().flatten().collect();
        let (csv_cells, txt_cells) = if complete.len() == a.seeds.len() {
            let means: Vec<f64> = (0..METRIC_NAMES.len())
                .map(|m| complete.iter().map(|r| r.values[m]).sum::<f64>() / complete.len() as f64)
                .collect();
            (
                means.iter().map(|v| fmt_sig(*v)).collect::<Vec<_>>(),
                means[..4].iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>(),
            )
        } else {
            gaps += 1;
            (vec!["--".to_string(); 7], vec!["--".to_string(); 4])
        };
        csv.push_str(&format!(
            "{},{},{},{}\n",
            a.arm,
            a.t,
            a.seeds.len(),
            csv_cells.join(",")
        ));
        let mut row = vec![a.arm.to_string(), a.t.to_string()];
        row.extend(txt_cells);
        table.push(row);
    }
    let text = aligned_table(&table);
    fs::write(out.join("summary.csv"), &csv)
        .map_err(|e| Error::io(out.join("summary.csv").display().to_string(), e))?;
    fs::write(out.join("summary.txt"), &text)
        .map_err(|e| Error::io(out.join("summary.txt").display().to_string(), e))?;
    print!("{text}");
    println!("summary: {}", out.join("summary.csv").display());
    if gaps > 0 {
        eprintln!("{gaps} arm(s) incomplete");
        return Ok(ExitCode::from(1));
    }
    Ok(ExitCode::SUCCESS)
}
