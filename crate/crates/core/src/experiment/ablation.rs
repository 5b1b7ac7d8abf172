use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{fit_variant, ExperimentSpec, NamedVariant};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::model::{Checkpoint, Model, ModelVariant};
use crate::train::{self, TrainConfig, TrainOutcome};

#[derive(Clone, Copy, Debug, Default)]
pub struct RunOptions {
    /// Sequential execution and no wall-clock values in metric files.
    pub deterministic: bool,
    pub save_checkpoints: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellStatus {
    Completed,
    Failed(String),
}

/// Outcome of one `(variant, seed)` cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub variant: String,
    pub seed: u64,
    pub status: CellStatus,
    pub epochs: usize,
    pub final_loss: Option<f64>,
    pub train_acc: Option<f64>,
    pub test_acc: Option<f64>,
}

/// Per-variant aggregate over completed cells.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub variant: String,
    pub use_sim: bool,
    pub fusion: String,
    pub ffn_role: String,
    pub cells: usize,
    pub failed: usize,
    pub mean_test_acc: Option<f64>,
    /// Sample standard deviation; 0 for a single cell.
    pub std_test_acc: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct AblationReport {
    pub records: Vec<CellRecord>,
    pub summary: Vec<SummaryRow>,
    pub out: PathBuf,
}

impl AblationReport {
    pub fn failed(&self) -> usize {
        self.records
            .iter()
            .filter(|r| matches!(r.status, CellStatus::Failed(_)))
            .count()
    }

    pub fn row(&self, variant: &str) -> Option<&SummaryRow> {
        self.summary.iter().find(|r| r.variant == variant)
    }

    /// Test accuracies of `variant` in seed order, `None` for failed cells.
    pub fn accuracies(&self, variant: &str) -> Vec<Option<f64>> {
        self.records
            .iter()
            .filter(|r| r.variant == variant)
            .map(|r| r.test_acc)
            .collect()
    }
}

pub const CELLS_HEADER: &str = "variant,seed,status,epochs,final_loss,train_acc,test_acc";
pub const SUMMARY_HEADER: &str =
    "variant,use_sim,fusion,ffn_role,cells,failed,mean_test_acc,std_test_acc";

pub fn cell_dir(out: &Path, variant: &str, seed: u64) -> PathBuf {
    out.join("cells").join(variant).join(format!("seed-{seed}"))
}

/// Trains one cell from a seed-derived initialization.
pub fn run_cell(
    variant: &ModelVariant,
    train_set: &Dataset,
    test_set: &Dataset,
    config: &TrainConfig,
    seed: u64,
    exec: Exec,
) -> Result<(Model, TrainOutcome)> {
    let model = Model::new(fit_variant(variant, &train_set.extents)?)?;
    let params = model.init(seed);
    let config = TrainConfig {
        seed,
        ..config.clone()
    };
    let outcome = train::train(&model, params, train_set, Some(test_set), &config, exec)?;
    Ok((model, outcome))
}

fn write_timing(history: &[train::EpochMetrics], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "epoch,seconds")?;
    for m in history {
        writeln!(f, "{},{:?}", m.epoch, m.seconds)?;
    }
    f.flush()?;
    Ok(())
}

struct Grid<'a> {
    spec: &'a ExperimentSpec,
    train_set: &'a Dataset,
    test_set: &'a Dataset,
    out: &'a Path,
    options: RunOptions,
    exec: Exec,
}

fn execute_cell(grid: &Grid<'_>, nv: &NamedVariant, seed: u64) -> Result<CellRecord> {
    let Grid {
        spec,
        train_set,
        test_set,
        out,
        options,
        exec,
    } = *grid;
    let dir = cell_dir(out, &nv.name, seed);
    std::fs::create_dir_all(&dir)?;
    match run_cell(&nv.variant, train_set, test_set, &spec.train, seed, exec) {
        Ok((model, outcome)) => {
            let h = &outcome.history;
            train::save_metrics_csv(h, !options.deterministic, &dir.join("metrics.csv"))?;
            write_timing(h, &dir.join("timing.csv"))?;
            if options.save_checkpoints {
                Checkpoint::new(&model.variant, &outcome.params)
                    .save(&dir.join("checkpoint.json"))?;
            }
            let last = h.last();
            Ok(CellRecord {
                variant: nv.name.clone(),
                seed,
                status: CellStatus::Completed,
                epochs: h.len(),
                final_loss: last.map(|m| m.loss),
                train_acc: last.map(|m| m.train_acc),
                test_acc: last.and_then(|m| m.test_acc),
            })
        }
        Err(
            e @ (Error::Diverged { .. } | Error::NonFinite { .. } | Error::NonFiniteGradient(_)),
        ) => Ok(CellRecord {
            variant: nv.name.clone(),
            seed,
            status: CellStatus::Failed(e.to_string()),
            epochs: 0,
            final_loss: None,
            train_acc: None,
            test_acc: None,
        }),
        Err(e) => Err(e),
    }
}

/// Trains every `(variant, seed)` cell and writes per-cell metrics,
/// `cells.csv`, `summary.csv` and `summary.md` under `out`.
///
/// A diverging cell is recorded as failed and the grid carries on;
/// configuration and I/O errors abort.
pub fn run_ablation(
    spec: &ExperimentSpec,
    out: &Path,
    options: RunOptions,
) -> Result<AblationReport> {
    spec.validate()?;
    let (train_set, test_set) = spec.corpus()?;
    for nv in &spec.variants {
        fit_variant(&nv.variant, &train_set.extents)?;
    }
    std::fs::create_dir_all(out)?;
    let exec = if options.deterministic {
        Exec::Sequential
    } else {
        Exec::Parallel
    };
    let cells: Vec<(&NamedVariant, u64)> = spec
        .variants
        .iter()
        .flat_map(|v| spec.seeds.iter().map(move |&s| (v, s)))
        .collect();
    let grid = Grid {
        spec,
        train_set: &train_set,
        test_set: &test_set,
        out,
        options,
        exec,
    };
    let records = exec
        .map(&cells, |(nv, seed)| execute_cell(&grid, nv, *seed))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let summary = summarize(&spec.variants, &records);
    write_cells_csv(&records, &out.join("cells.csv"))?;
    write_summary_csv(&summary, &out.join("summary.csv"))?;
    std::fs::write(
        out.join("summary.md"),
        summary_markdown(&spec.name, &summary),
    )?;
    Ok(AblationReport {
        records,
        summary,
        out: out.to_path_buf(),
    })
}

fn mean_std(values: &[f64]) -> (Option<f64>, Option<f64>) {
    if values.is_empty() {
        return (None, None);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (Some(mean), Some(std))
}

/// Mean and sample stdev of final test accuracy per variant, in spec order.
pub fn summarize(variants: &[NamedVariant], records: &[CellRecord]) -> Vec<SummaryRow> {
    variants
        .iter()
        .map(|nv| {
            let cells: Vec<&CellRecord> = records.iter().filter(|r| r.variant == nv.name).collect();
            let accs: Vec<f64> = cells.iter().filter_map(|r| r.test_acc).collect();
            let failed = cells
                .iter()
                .filter(|r| matches!(r.status, CellStatus::Failed(_)))
                .count();
            let (mean, std) = mean_std(&accs);
            SummaryRow {
                variant: nv.name.clone(),
                use_sim: nv.variant.use_sim,
                fusion: nv.variant.fusion.as_str().into(),
                ffn_role: serde_json::to_value(nv.variant.ffn_role)
                    .ok()
                    .and_then(|v| v.as_str().map(str::to_string))
                    .unwrap_or_default(),
                cells: cells.len(),
                failed,
                mean_test_acc: mean,
                std_test_acc: std,
            }
        })
        .collect()
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:?}")).unwrap_or_default()
}

fn write_cells_csv(records: &[CellRecord], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "{CELLS_HEADER}")?;
    for r in records {
        let status = match &r.status {
            CellStatus::Completed => "completed".to_string(),
            CellStatus::Failed(msg) => format!("failed: {}", msg.replace(',', ";")),
        };
        writeln!(
            f,
            "{},{},{},{},{},{},{}",
            r.variant,
            r.seed,
            status,
            r.epochs,
            opt(r.final_loss),
            opt(r.train_acc),
            opt(r.test_acc)
        )?;
    }
    f.flush()?;
    Ok(())
}

/// Parses `cells.csv` back into records.
pub fn read_cells_csv(text: &str) -> Result<Vec<CellRecord>> {
    let mut lines = text.lines();
    if lines.next() != Some(CELLS_HEADER) {
        return Err(Error::Config("cells CSV header mismatch".into()));
    }
    let num = |s: &str| -> Result<Option<f64>> {
        if s.is_empty() {
            return Ok(None);
        }
        s.parse()
            .map(Some)
            .map_err(|_| Error::Config(format!("bad number `{s}` in cells CSV")))
    };
    lines
        .filter(|l| !l.is_empty())
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 7 {
                return Err(Error::Config(format!("bad cells row `{line}`")));
            }
            let status = match f[2] {
                "completed" => CellStatus::Completed,
                s => CellStatus::Failed(s.trim_start_matches("failed: ").to_string()),
            };
            Ok(CellRecord {
                variant: f[0].to_string(),
                seed: f[1]
                    .parse()
                    .map_err(|_| Error::Config(format!("bad seed `{}`", f[1])))?,
                status,
                epochs: f[3]
                    .parse()
                    .map_err(|_| Error::Config(format!("bad epoch count `{}`", f[3])))?,
                final_loss: num(f[4])?,
                train_acc: num(f[5])?,
                test_acc: num(f[6])?,
            })
        })
        .collect()
}

fn write_summary_csv(rows: &[SummaryRow], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "{SUMMARY_HEADER}")?;
    for r in rows {
        writeln!(
            f,
            "{},{},{},{},{},{},{},{}",
            r.variant,
            r.use_sim,
            r.fusion,
            r.ffn_role,
            r.cells,
            r.failed,
            opt(r.mean_test_acc),
            opt(r.std_test_acc)
        )?;
    }
    f.flush()?;
    Ok(())
}

fn summary_markdown(name: &str, rows: &[SummaryRow]) -> String {
    let mut s = format!(
        "# {name}\n\n| variant | SIM | fusion | FFN role | accuracy (%) | cells | failed |\n|---|:---:|---|---|---:|---:|---:|\n"
    );
    for r in rows {
        let acc = match (r.mean_test_acc, r.std_test_acc) {
            (Some(m), Some(sd)) => format!("{:.2} ± {:.2}", 100.0 * m, 100.0 * sd),
            _ => "n/a".into(),
        };
        s.push_str(&format!(
            "| {} | {} | {} | {} | {} | {} | {} |\n",
            r.variant,
            if r.use_sim { "✓" } else { "" },
            r.fusion,
            if r.use_sim { r.ffn_role.as_str() } else { "" },
            acc,
            r.cells,
            r.failed
        ));
    }
    s
}
