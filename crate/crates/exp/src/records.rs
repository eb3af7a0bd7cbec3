//! Comma-separated per-task results and plot data.

use std::path::Path;

use npbml_core::eval::{Summary, TaskRecord};
use npbml_core::outer::MetricRecord;

use crate::error::Result;

pub const TASKS_FILE: &str = "tasks.csv";
pub const PLOT_FILE: &str = "metrics.csv";

pub fn write_tasks(path: &Path, records: &[TaskRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| crate::error::ExpError::io(path, e))?;
    Ok(())
}

pub fn read_tasks(path: &Path) -> Result<Vec<TaskRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}

/// Recomputes the interval summary from a `tasks.csv` file alone.
pub fn summarize_file(path: &Path) -> Result<Summary> {
    Ok(Summary::of(&read_tasks(path)?))
}

/// `step, meta_loss, val_loss, val_accuracy, grad_norm, clipped` rows.
pub fn write_plot_data(path: &Path, log: &[MetricRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in log {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| crate::error::ExpError::io(path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn task_records_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(TASKS_FILE);
        let records = vec![
            TaskRecord {
                seed: 1,
                task: 0,
                accuracy: Some(0.25),
                loss: 1.5,
                support_seed: 10,
            },
            TaskRecord {
                seed: 1,
                task: 1,
                accuracy: None,
                loss: 0.1 + 0.2,
                support_seed: 11,
            },
        ];
        write_tasks(&path, &records).unwrap();
        assert_eq!(read_tasks(&path).unwrap(), records);
    }
}
