//! Loss × noise × seed sweeps with CSV/JSON outputs.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::divergence::DivergenceKind;
use crate::error::{Error, Result};
use crate::nnet::Loss;
use crate::synth::{generate_task, DataSplit, TaskSpec};
use crate::w2sg::{run_on_split, RunResult, TrainConfig};

pub const RUNS_CSV: &str = "runs.csv";
pub const RUNS_JSON: &str = "runs.json";
pub const SUMMARY_CSV: &str = "summary.csv";
pub const SUMMARY_JSON: &str = "summary.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentGrid {
    pub task: TaskSpec,
    pub losses: Vec<Loss>,
    pub noise_levels: Vec<f64>,
    pub seeds: Vec<u64>,
    /// Train students with the auxiliary confidence loss.
    pub aux: bool,
    /// Settings shared by every cell; `loss_kind`, `seed` and `aux_enabled`
    /// are overridden per cell.
    pub train: TrainConfig,
}

impl Default for ExperimentGrid {
    fn default() -> Self {
        ExperimentGrid {
            task: TaskSpec::default(),
            losses: DivergenceKind::TRAINABLE
                .iter()
                .map(|&k| Loss::Divergence(k))
                .collect(),
            noise_levels: vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5],
            seeds: vec![0, 1, 2, 3, 4],
            aux: false,
            train: TrainConfig::default(),
        }
    }
}

impl ExperimentGrid {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let grid: ExperimentGrid = toml::from_str(text)?;
        grid.validate()?;
        Ok(grid)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_toml_str(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        if self.losses.is_empty() || self.seeds.is_empty() || self.noise_levels.is_empty() {
            return Err(Error::Config(
                "losses, noise_levels and seeds must be nonempty".into(),
            ));
        }
        if let Some(n) = self.noise_levels.iter().find(|n| !(0.0..=0.5).contains(*n)) {
            return Err(Error::Config(format!(
                "noise level {n} is outside [0, 0.5]"
            )));
        }
        for &loss in &self.losses {
            self.cell_config(loss, self.seeds[0]).validate()?;
        }
        Ok(())
    }

    fn cell_config(&self, loss: Loss, seed: u64) -> TrainConfig {
        TrainConfig {
            loss_kind: loss,
            seed,
            aux_enabled: self.aux,
            ..self.train.clone()
        }
    }

    /// Cells in grid order: loss, then noise level, then seed.
    pub fn cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for &loss in &self.losses {
            for &noise_level in &self.noise_levels {
                for &seed in &self.seeds {
                    out.push(Cell {
                        loss,
                        noise_level,
                        seed,
                    });
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub loss: Loss,
    pub noise_level: f64,
    pub seed: u64,
}

/// One row of `runs.csv`; column order is the field order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub loss: Loss,
    pub noise_level: f64,
    pub seed: u64,
    pub aux: bool,
    pub flipped: usize,
    pub weak_test_accuracy: f64,
    pub strong_test_accuracy: f64,
    pub metric: DivergenceKind,
    pub r_strong_weak: f64,
    pub r_weak_truth: f64,
    pub r_strong_truth: f64,
    pub bound_lhs: f64,
    pub bound_rhs: f64,
    pub bound_residual: f64,
    pub bound_holds: bool,
}

impl From<&RunResult> for RunRow {
    fn from(r: &RunResult) -> Self {
        RunRow {
            loss: r.loss,
            noise_level: r.noise_level,
            seed: r.seed,
            aux: r.config.aux_enabled,
            flipped: r.flipped,
            weak_test_accuracy: r.weak_test_accuracy,
            strong_test_accuracy: r.strong_test_accuracy,
            metric: r.strong_weak.kind,
            r_strong_weak: r.strong_weak.value,
            r_weak_truth: r.weak_truth.value,
            r_strong_truth: r.strong_truth.value,
            bound_lhs: r.bound.lhs,
            bound_rhs: r.bound.rhs,
            bound_residual: r.bound.residual,
            bound_holds: r.bound.holds(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellFailure {
    pub cell: Cell,
    pub error: String,
}

/// Median-over-seeds pivot: one row per loss, one column per noise level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub metric: String,
    pub noise_levels: Vec<f64>,
    pub rows: Vec<SummaryRow>,
    /// Median weak-teacher accuracy per noise level, over all rows.
    pub weak: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub loss: Loss,
    pub values: Vec<Option<f64>>,
}

impl Summary {
    pub fn get(&self, loss: Loss, noise_level: f64) -> Option<f64> {
        let col = self.noise_levels.iter().position(|&n| n == noise_level)?;
        self.rows.iter().find(|r| r.loss == loss)?.values[col]
    }
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    Some(if v.len() % 2 == 1 {
        v[mid]
    } else {
        0.5 * (v[mid - 1] + v[mid])
    })
}

/// Pivots rows into medians of strong accuracy; losses and noise levels keep
/// their first-appearance order.
pub fn summarize(rows: &[RunRow]) -> Summary {
    let mut losses: Vec<Loss> = Vec::new();
    let mut noise_levels: Vec<f64> = Vec::new();
    let mut strong: BTreeMap<(usize, usize), Vec<f64>> = BTreeMap::new();
    let mut weak: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for r in rows {
        let li = losses.iter().position(|&l| l == r.loss).unwrap_or_else(|| {
            losses.push(r.loss);
            losses.len() - 1
        });
        let ni = noise_levels
            .iter()
            .position(|&n| n == r.noise_level)
            .unwrap_or_else(|| {
                noise_levels.push(r.noise_level);
                noise_levels.len() - 1
            });
        strong
            .entry((li, ni))
            .or_default()
            .push(r.strong_test_accuracy);
        weak.entry(ni).or_default().push(r.weak_test_accuracy);
    }
    let rows = losses
        .iter()
        .enumerate()
        .map(|(li, &loss)| SummaryRow {
            loss,
            values: (0..noise_levels.len())
                .map(|ni| strong.get(&(li, ni)).and_then(|v| median(v)))
                .collect(),
        })
        .collect();
    Summary {
        metric: "median strong_test_accuracy".into(),
        weak: (0..noise_levels.len())
            .map(|ni| weak.get(&ni).and_then(|v| median(v)))
            .collect(),
        noise_levels,
        rows,
    }
}

pub fn write_runs(dir: &Path, rows: &[RunRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(dir.join(RUNS_CSV))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    write_json(&dir.join(RUNS_JSON), &rows)
}

pub fn read_runs(path: &Path) -> Result<Vec<RunRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let rows = r
        .deserialize()
        .collect::<std::result::Result<Vec<RunRow>, _>>()?;
    Ok(rows)
}

pub fn write_summary(dir: &Path, summary: &Summary) -> Result<()> {
    let mut w = csv::Writer::from_path(dir.join(SUMMARY_CSV))?;
    let mut header = vec!["loss".to_string()];
    header.extend(summary.noise_levels.iter().map(|n| n.to_string()));
    w.write_record(&header)?;
    let fmt = |v: &Option<f64>| v.map_or_else(String::new, |x| x.to_string());
    for row in &summary.rows {
        let mut rec = vec![row.loss.to_string()];
        rec.extend(row.values.iter().map(fmt));
        w.write_record(&rec)?;
    }
    let mut rec = vec!["weak".to_string()];
    rec.extend(summary.weak.iter().map(fmt));
    w.write_record(&rec)?;
    w.flush()?;
    write_json(&dir.join(SUMMARY_JSON), summary)
}

pub(crate) fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridOutcome {
    pub results: Vec<RunResult>,
    pub rows: Vec<RunRow>,
    pub summary: Summary,
    pub failures: Vec<CellFailure>,
}

impl GridOutcome {
    pub fn all_bounds_hold(&self) -> bool {
        self.rows.iter().all(|r| r.bound_holds)
    }

    /// True when every cell completed and every bound check held.
    pub fn passed(&self) -> bool {
        self.failures.is_empty() && self.all_bounds_hold()
    }
}

/// Runs every cell on the shared task split, with up to `workers` threads
/// (0 = all cores). Results are ordered by grid index regardless of
/// scheduling.
pub fn execute_grid(grid: &ExperimentGrid, workers: usize) -> Result<GridOutcome> {
    grid.validate()?;
    let (split, _) = generate_task(&grid.task)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let cells = grid.cells();
    let outcomes: Vec<std::result::Result<RunResult, CellFailure>> = pool.install(|| {
        cells
            .par_iter()
            .map(|&cell| run_cell(grid, &split, cell))
            .collect()
    });
    let mut results = Vec::new();
    let mut failures = Vec::new();
    for o in outcomes {
        match o {
            Ok(r) => results.push(r),
            Err(f) => failures.push(f),
        }
    }
    let rows: Vec<RunRow> = results.iter().map(RunRow::from).collect();
    let summary = summarize(&rows);
    Ok(GridOutcome {
        results,
        rows,
        summary,
        failures,
    })
}

fn run_cell(
    grid: &ExperimentGrid,
    split: &DataSplit,
    cell: Cell,
) -> std::result::Result<RunResult, CellFailure> {
    run_on_split(
        split,
        &grid.cell_config(cell.loss, cell.seed),
        cell.noise_level,
    )
    .map_err(|e| CellFailure {
        cell,
        error: e.to_string(),
    })
}

/// [`execute_grid`] followed by writing `runs.csv`, `runs.json`,
/// `summary.csv`, `summary.json` (and `failures.json` when any cell failed)
/// into `out_dir`.
pub fn run_grid(grid: &ExperimentGrid, out_dir: &Path, workers: usize) -> Result<GridOutcome> {
    fs::create_dir_all(out_dir)?;
    let outcome = execute_grid(grid, workers)?;
    write_runs(out_dir, &outcome.rows)?;
    write_summary(out_dir, &outcome.summary)?;
    let failures_path = out_dir.join("failures.json");
    if outcome.failures.is_empty() {
        if failures_path.exists() {
            fs::remove_file(&failures_path)?;
        }
    } else {
        write_json(&failures_path, &outcome.failures)?;
    }
    Ok(outcome)
}

/// Re-pivots an existing `runs.csv` into summary files in `out_dir`.
pub fn report(runs_csv: &Path, out_dir: &Path) -> Result<Summary> {
    let rows = read_runs(runs_csv)?;
    if rows.is_empty() {
        return Err(Error::InvalidInput(format!(
            "{} has no rows",
            runs_csv.display()
        )));
    }
    fs::create_dir_all(out_dir)?;
    let summary = summarize(&rows);
    write_summary(out_dir, &summary)?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_uses_defaults() {
        assert_eq!(
            ExperimentGrid::from_toml_str("").unwrap(),
            ExperimentGrid::default()
        );
        let g = ExperimentGrid::from_toml_str(
            "losses = [\"ce\", \"hellinger\"]\n[task]\nsamples_per_split = 100\n",
        )
        .unwrap();
        assert_eq!(
            g.losses,
            vec![
                Loss::CrossEntropy,
                Loss::Divergence(DivergenceKind::SquaredHellinger)
            ]
        );
        assert_eq!(g.task.samples_per_split, 100);
        assert!(ExperimentGrid::from_toml_str("noise_levels = [0.7]").is_err());
        assert!(ExperimentGrid::from_toml_str("seeds = []").is_err());
        assert!(ExperimentGrid::from_toml_str("losses = [\"tv\"]").is_err());
        assert!(ExperimentGrid::from_toml_str("bogus = 1").is_err());
    }

    #[test]
    fn median_examples() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&[]), None);
    }

    #[test]
    fn default_grid_has_180_cells() {
        assert_eq!(ExperimentGrid::default().cells().len(), 180);
    }
}
