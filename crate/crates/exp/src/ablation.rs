//! Component and loss-decomposition ablations over shared seeds.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use log::warn;
use npbml_core::params::Variant;
use npbml_core::tasks::TaskKind;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{ExpError, Result};
use crate::runner::{run, RunSummary};

pub const TABLE_FILE: &str = "ablation.txt";
pub const ABLATION_FILE: &str = "ablation.json";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub id: u8,
    /// 3 for the component matrix, 4 for the loss decomposition.
    pub table: u8,
    pub label: &'static str,
    pub variant: Variant,
    /// Row whose results this one shares.
    pub same_as: Option<u8>,
}

const fn flags(warp: bool, support: bool, query: bool, reg: bool, film: bool) -> Variant {
    Variant {
        warp,
        support_loss: support,
        query_loss: query,
        regularizer: reg,
        film,
        metasgd: false,
    }
}

pub const ROWS: [Row; 10] = [
    Row { id: 1, table: 3, label: "initialization (MAML)", variant: flags(false, false, false, false, false), same_as: None },
    Row { id: 2, table: 3, label: "+ optimizer", variant: flags(true, false, false, false, false), same_as: None },
    Row { id: 3, table: 3, label: "+ loss", variant: flags(false, true, true, true, false), same_as: None },
    Row { id: 4, table: 3, label: "+ optimizer + loss", variant: flags(true, true, true, true, false), same_as: None },
    Row { id: 5, table: 3, label: "+ task-adaptive", variant: flags(true, true, true, true, true), same_as: None },
    Row { id: 6, table: 4, label: "base loss", variant: flags(false, false, false, false, false), same_as: Some(1) },
    Row { id: 7, table: 4, label: "+ inductive", variant: flags(false, true, false, false, false), same_as: None },
    Row { id: 8, table: 4, label: "+ transductive", variant: flags(false, false, true, false, false), same_as: None },
    Row { id: 9, table: 4, label: "+ regularizer", variant: flags(false, false, false, true, false), same_as: None },
    Row { id: 10, table: 4, label: "all terms", variant: flags(false, true, true, true, false), same_as: Some(3) },
];

pub fn row(id: u8) -> Option<&'static Row> {
    ROWS.iter().find(|r| r.id == id)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RowResult {
    pub id: u8,
    pub label: String,
    pub variant: Variant,
    pub same_as: Option<u8>,
    /// Seed-averaged mean and half-width.
    pub mean: Option<f64>,
    pub ci: Option<f64>,
    pub error: Option<String>,
    #[serde(skip)]
    pub summary: Option<RunSummary>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationTable {
    pub kind: TaskKind,
    pub seeds: Vec<u64>,
    pub rows: Vec<RowResult>,
}

/// Runs the eight distinct rows and fills the two shared ones from their
/// twins. A failing row is recorded and the sweep continues.
pub fn ablate(cfg: &ExperimentConfig, out: Option<&Path>, only: Option<&[u8]>) -> Result<AblationTable> {
    cfg.validate()?;
    let wanted = |id: u8| only.is_none_or(|o| o.contains(&id));
    let mut rows: Vec<RowResult> = Vec::new();
    for r in ROWS.iter() {
        let twin = r.same_as.and_then(|id| rows.iter().find(|x| x.id == id).cloned());
        let result = match twin {
            Some(t) => RowResult {
                id: r.id,
                label: r.label.into(),
                same_as: r.same_as,
                ..t
            },
            None if !wanted(r.same_as.unwrap_or(r.id)) => continue,
            None => {
                let dir = out.map(|o| o.join(format!("row-{}", r.same_as.unwrap_or(r.id))));
                match run(&cfg.with_variant(r.variant), dir.as_deref()) {
                    Ok(s) => {
                        let (mean, ci) = s.seed_average(false).unzip();
                        RowResult {
                            id: r.id,
                            label: r.label.into(),
                            variant: r.variant,
                            same_as: r.same_as,
                            mean,
                            ci,
                            error: None,
                            summary: Some(s),
                        }
                    }
                    Err(e) => {
                        warn!("ablation row {} failed: {e}", r.id);
                        RowResult {
                            id: r.id,
                            label: r.label.into(),
                            variant: r.variant,
                            same_as: r.same_as,
                            mean: None,
                            ci: None,
                            error: Some(e.to_string()),
                            summary: None,
                        }
                    }
                }
            }
        };
        rows.push(result);
    }
    let table = AblationTable {
        kind: cfg.task.spec.kind,
        seeds: cfg.seeds.clone(),
        rows,
    };
    if let Some(out) = out {
        fs::create_dir_all(out).map_err(|e| ExpError::io(out, e))?;
        let path = out.join(TABLE_FILE);
        fs::write(&path, table.render()).map_err(|e| ExpError::io(&path, e))?;
        let path = out.join(ABLATION_FILE);
        fs::write(&path, serde_json::to_vec_pretty(&table)?).map_err(|e| ExpError::io(&path, e))?;
    }
    Ok(table)
}

fn tick(on: bool) -> &'static str {
    if on {
        "✓"
    } else {
        ""
    }
}

impl AblationTable {
    fn cell(&self, r: &RowResult) -> String {
        match (&r.error, r.mean, r.ci) {
            (Some(e), _, _) => format!("failed: {e}"),
            (None, Some(m), Some(c)) if self.kind == TaskKind::Classification => format!("{:.2} ± {:.2}%", 100.0 * m, 100.0 * c),
            (None, Some(m), Some(c)) => format!("{m:.4} ± {c:.4} MSE"),
            _ => "n/a".into(),
        }
    }

    /// Both tables as aligned plain text.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        let _ = writeln!(s, "seeds: {}", seeds.join(", "));
        let _ = writeln!(s, "\nComponents");
        let _ = writeln!(s, "{:<5} {:<24} {:^5} {:^5} {:^5} {:^5}  result", "row", "variant", "init", "opt", "loss", "film");
        for r in self.rows.iter().filter(|r| r.id <= 5) {
            let v = r.variant;
            let _ = writeln!(
                s,
                "({:<2}) {:<24} {:^5} {:^5} {:^5} {:^5}  {}",
                r.id,
                r.label,
                tick(true),
                tick(v.warp),
                tick(v.learned_loss()),
                tick(v.film),
                self.cell(r)
            );
        }
        let _ = writeln!(s, "\nLoss terms");
        let _ = writeln!(s, "{:<5} {:<24} {:^5} {:^5} {:^5} {:^5}  result", "row", "variant", "base", "L_S", "L_Q", "R");
        for r in self.rows.iter().filter(|r| r.id > 5) {
            let v = r.variant;
            let shared = r.same_as.map(|id| format!(" (= row {id})")).unwrap_or_default();
            let _ = writeln!(
                s,
                "({:<2}) {:<24} {:^5} {:^5} {:^5} {:^5}  {}{}",
                r.id,
                r.label,
                tick(true),
                tick(v.support_loss),
                tick(v.query_loss),
                tick(v.regularizer),
                self.cell(r),
                shared
            );
        }
        s
    }
}
