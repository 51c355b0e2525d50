//! Ablation runner: every mode of a suite trained and evaluated under the
//! same seeds, summarised as a modes x metrics table. Each run is scored
//! from its validation-selected checkpoint, which also seeds Stage II.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use diffoseg_core::ConsensusMode;

use crate::config::{IdentityMode, TrainConfig};
use crate::dataset::Dataset;
use crate::evaluate::{evaluate_consensus, evaluate_experts, Report};
use crate::plot::bar_chart;
use crate::sampler::Model;
use crate::train::{train_stage1, train_stage2};
use crate::{Error, Result};

pub const TABLE_FILE: &str = "table.csv";
pub const RUNS_FILE: &str = "runs.csv";
pub const PLOT_FILE: &str = "bars.png";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Consensus,
    Identity,
}

impl Suite {
    pub fn name(self) -> &'static str {
        match self {
            Suite::Consensus => "consensus",
            Suite::Identity => "identity",
        }
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "consensus" => Ok(Suite::Consensus),
            "identity" => Ok(Suite::Identity),
            _ => Err(Error::config(format!("unknown suite '{s}' (consensus, identity)"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct AblationConfig {
    /// Shared training settings; `stage`, `consensus`, `identity`, `seed`
    /// and `out_dir` are overridden per run.
    pub base: TrainConfig,
    /// Stage I iterations for the identity suite's backbones (`None` uses
    /// the Stage I default).
    pub stage1_iterations: Option<usize>,
    pub seeds: Vec<u64>,
    /// Sample counts for the consensus suite columns.
    pub ns: Vec<usize>,
    /// Samples per expert and image for the identity suite.
    pub expert_samples: usize,
    pub out_dir: PathBuf,
}

/// Outcome of one (mode, seed) cell.
#[derive(Debug, Clone)]
pub struct RunRecord {
    pub mode: String,
    pub seed: u64,
    pub run_dir: PathBuf,
    pub report: std::result::Result<Report, String>,
}

impl RunRecord {
    fn values(&self) -> Option<Vec<f64>> {
        match &self.report {
            Ok(Report::Consensus(r)) => Some(r.mean_ged.iter().chain(&r.mean_dice_soft).copied().collect()),
            Ok(Report::Experts(r)) => Some(r.mean_dice.iter().copied().chain([r.d_mean]).collect()),
            Err(_) => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AblationTable {
    pub suite: Suite,
    pub modes: Vec<String>,
    pub columns: Vec<String>,
    /// `cells[mode][column]`: median over the seeds that succeeded (NaN if
    /// none did).
    pub cells: Vec<Vec<f64>>,
    pub runs: Vec<RunRecord>,
}

/// Median ignoring NaN; NaN for an empty input.
pub fn median(values: &[f64]) -> f64 {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| !x.is_nan()).collect();
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let k = v.len() / 2;
    if v.len() % 2 == 1 {
        v[k]
    } else {
        0.5 * (v[k - 1] + v[k])
    }
}

fn run_dir(root: &Path, suite: Suite, mode: &str, seed: u64) -> PathBuf {
    root.join(suite.name()).join(mode).join(format!("seed{seed}"))
}

fn consensus_run(cfg: &AblationConfig, mode: ConsensusMode, seed: u64, data: &[&Dataset; 3]) -> Result<(PathBuf, Report)> {
    let dir = run_dir(&cfg.out_dir, Suite::Consensus, mode.short_name(), seed);
    let tc = TrainConfig {
        stage: 1,
        consensus: mode,
        seed: Some(seed),
        out_dir: dir.clone(),
        resume: None,
        stage1_checkpoint: None,
        ..cfg.base.clone()
    };
    let out = train_stage1(&tc, data[0], data[1])?;
    let model = Model::load(&out.best_checkpoint)?;
    let report = evaluate_consensus(&model, data[2], &cfg.ns, seed)?;
    Ok((dir, Report::Consensus(report)))
}

fn stage1_backbone(cfg: &AblationConfig, seed: u64, data: &[&Dataset; 3]) -> Result<PathBuf> {
    if let Some(p) = &cfg.base.stage1_checkpoint {
        return Ok(p.clone());
    }
    let tc = TrainConfig {
        stage: 1,
        consensus: ConsensusMode::Probabilistic,
        seed: Some(seed),
        iterations: cfg.stage1_iterations,
        out_dir: run_dir(&cfg.out_dir, Suite::Identity, "stage1", seed),
        resume: None,
        stage1_checkpoint: None,
        ..cfg.base.clone()
    };
    Ok(train_stage1(&tc, data[0], data[1])?.best_checkpoint)
}

fn identity_run(
    cfg: &AblationConfig,
    mode: IdentityMode,
    seed: u64,
    backbone: &Path,
    data: &[&Dataset; 3],
) -> Result<(PathBuf, Report)> {
    let dir = run_dir(&cfg.out_dir, Suite::Identity, mode.name(), seed);
    let tc = TrainConfig {
        stage: 2,
        identity: mode,
        seed: Some(seed),
        out_dir: dir.clone(),
        resume: None,
        stage1_checkpoint: Some(backbone.to_path_buf()),
        ..cfg.base.clone()
    };
    let out = train_stage2(&tc, data[0], data[1])?;
    let model = Model::load(&out.best_checkpoint)?;
    let report = evaluate_experts(&model, data[2], cfg.expert_samples, seed)?;
    Ok((dir, Report::Experts(report)))
}

/// Train and evaluate every mode of `suite` for every seed, then write
/// `table.csv`, `runs.csv` and `bars.png` under `out_dir/<suite>`. Failed
/// cells are recorded rather than aborting the suite.
pub fn ablate(suite: Suite, cfg: &AblationConfig, train: &Dataset, val: &Dataset, test: &Dataset) -> Result<AblationTable> {
    if cfg.seeds.is_empty() {
        return Err(Error::config("ablation needs at least one seed"));
    }
    if cfg.ns.is_empty() || cfg.ns.contains(&0) || cfg.expert_samples == 0 {
        return Err(Error::config("sample counts must be positive"));
    }
    let data = [train, val, test];
    let mut runs = Vec::new();
    let (modes, columns): (Vec<String>, Vec<String>) = match suite {
        Suite::Consensus => {
            let modes = [ConsensusMode::Random, ConsensusMode::Average, ConsensusMode::Probabilistic];
            for &seed in &cfg.seeds {
                for mode in modes {
                    let dir = run_dir(&cfg.out_dir, suite, mode.short_name(), seed);
                    let res = consensus_run(cfg, mode, seed, &data);
                    runs.push(record(mode.short_name(), seed, dir, res));
                }
            }
            let cols = cfg
                .ns
                .iter()
                .map(|n| format!("GED_{n}"))
                .chain(cfg.ns.iter().map(|n| format!("Dsoft_{n}")))
                .collect();
            (modes.iter().map(|m| m.short_name().to_string()).collect(), cols)
        }
        Suite::Identity => {
            for &seed in &cfg.seeds {
                let backbone = stage1_backbone(cfg, seed, &data);
                for mode in IdentityMode::ALL {
                    let dir = run_dir(&cfg.out_dir, suite, mode.name(), seed);
                    let res = match &backbone {
                        Ok(path) => identity_run(cfg, mode, seed, path, &data),
                        Err(e) => Err(Error::config(format!("stage-1 backbone failed: {e}"))),
                    };
                    runs.push(record(mode.name(), seed, dir, res));
                }
            }
            let cols = (1..=train.experts).map(|e| format!("D_A{e}")).chain(["D_mean".to_string()]).collect();
            (IdentityMode::ALL.iter().map(|m| m.name().to_string()).collect(), cols)
        }
    };
    let cells = modes
        .iter()
        .map(|mode| {
            let per_seed: Vec<Vec<f64>> = runs.iter().filter(|r| &r.mode == mode).filter_map(RunRecord::values).collect();
            (0..columns.len())
                .map(|c| median(&per_seed.iter().map(|v| v[c]).collect::<Vec<_>>()))
                .collect()
        })
        .collect();
    let table = AblationTable { suite, modes, columns, cells, runs };
    table.write(&cfg.out_dir.join(suite.name()))?;
    Ok(table)
}

fn record(mode: &str, seed: u64, dir: PathBuf, res: Result<(PathBuf, Report)>) -> RunRecord {
    RunRecord {
        mode: mode.to_string(),
        seed,
        run_dir: dir,
        report: res.map(|(_, r)| r).map_err(|e| e.to_string()),
    }
}

fn cell(v: f64) -> String {
    if v.is_nan() {
        "failed".to_string()
    } else {
        format!("{v:.6}")
    }
}

impl AblationTable {
    pub fn cell(&self, mode: &str, column: &str) -> Option<f64> {
        let r = self.modes.iter().position(|m| m == mode)?;
        let c = self.columns.iter().position(|m| m == column)?;
        Some(self.cells[r][c])
    }

    /// Per-seed values of one cell, in seed order (NaN for failed runs).
    pub fn per_seed(&self, mode: &str, column: &str) -> Vec<f64> {
        let Some(c) = self.columns.iter().position(|m| m == column) else {
            return Vec::new();
        };
        self.runs
            .iter()
            .filter(|r| r.mode == mode)
            .map(|r| r.values().map_or(f64::NAN, |v| v[c]))
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("mode,{}\n", self.columns.join(","));
        for (mode, row) in self.modes.iter().zip(&self.cells) {
            let vals: Vec<String> = row.iter().map(|&v| cell(v)).collect();
            let _ = writeln!(out, "{mode},{}", vals.join(","));
        }
        out
    }

    /// Long form: one line per (mode, seed, metric), errors included.
    pub fn runs_csv(&self) -> String {
        let mut out = String::from("mode,seed,metric,value,error\n");
        for r in &self.runs {
            match r.values() {
                Some(vals) => {
                    for (c, v) in self.columns.iter().zip(vals) {
                        let _ = writeln!(out, "{},{},{c},{v:.6},", r.mode, r.seed);
                    }
                }
                None => {
                    let msg = r.report.as_ref().err().map_or(String::new(), |e| e.replace([',', '\n'], ";"));
                    let _ = writeln!(out, "{},{},,,{msg}", r.mode, r.seed);
                }
            }
        }
        out
    }

    /// Fixed-width text rendering of the median table.
    pub fn render(&self) -> String {
        let mut out = format!("{:<8}", "mode");
        for c in &self.columns {
            let _ = write!(out, " {c:>9}");
        }
        out.push('\n');
        for (mode, row) in self.modes.iter().zip(&self.cells) {
            let _ = write!(out, "{mode:<8}");
            for &v in row {
                let s = if v.is_nan() { "failed".to_string() } else { format!("{v:.4}") };
                let _ = write!(out, " {s:>9}");
            }
            out.push('\n');
        }
        out
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let table = dir.join(TABLE_FILE);
        fs::write(&table, self.to_csv()).map_err(|e| Error::io(&table, e))?;
        let runs = dir.join(RUNS_FILE);
        fs::write(&runs, self.runs_csv()).map_err(|e| Error::io(&runs, e))?;
        // One group per metric column, one bar per mode.
        let groups: Vec<Vec<f64>> = (0..self.columns.len())
            .map(|c| self.cells.iter().map(|row| row[c]).collect())
            .collect();
        bar_chart(&dir.join(PLOT_FILE), &groups, 1.0)
    }
}
