use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::task::TaskSpec;
use crate::error::{Error, Result};
use crate::features::{ConfigMode, FeatureMatrix};
use crate::neuralnet::{argmax, ensemble_average, predict_all, Network};

pub const ENSEMBLE: &str = "ensemble";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: TaskSpec,
    pub mode: ConfigMode,
    pub model: String,
    pub classes: Vec<String>,
    /// `confusion[true][predicted]` counts.
    pub confusion: Vec<Vec<usize>>,
    pub accuracy: f64,
    pub recall: Vec<f64>,
}

impl EvalReport {
    pub fn from_predictions(
        task: TaskSpec,
        mode: ConfigMode,
        model: &str,
        classes: Vec<String>,
        truth: &[usize],
        predicted: &[usize],
    ) -> Result<Self> {
        if truth.is_empty() {
            return Err(Error::Empty("test set"));
        }
        if truth.len() != predicted.len() {
            return Err(Error::Shape(
                "prediction count differs from label count".into(),
            ));
        }
        let c = classes.len();
        if truth.iter().chain(predicted).any(|&l| l >= c) {
            return Err(Error::Shape(format!("label outside {c} classes")));
        }
        let mut confusion = vec![vec![0usize; c]; c];
        for (&t, &p) in truth.iter().zip(predicted) {
            confusion[t][p] += 1;
        }
        let hits: usize = (0..c).map(|i| confusion[i][i]).sum();
        let recall = confusion
            .iter()
            .enumerate()
            .map(|(i, row)| {
                let n: usize = row.iter().sum();
                if n == 0 {
                    f64::NAN
                } else {
                    row[i] as f64 / n as f64
                }
            })
            .collect();
        Ok(Self {
            task,
            mode,
            model: model.to_string(),
            classes,
            confusion,
            accuracy: hits as f64 / truth.len() as f64,
            recall,
        })
    }

    /// `task,mode,model,accuracy` row without trailing newline.
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{:.4}",
            self.task,
            self.mode.as_str(),
            self.model,
            self.accuracy
        )
    }

    /// Labelled integer grid, rows are true classes.
    pub fn confusion_text(&self) -> String {
        let width = self
            .classes
            .iter()
            .map(String::len)
            .chain(self.confusion.iter().flatten().map(|v| v.to_string().len()))
            .chain(["true\\pred".len()])
            .max()
            .unwrap_or(1);
        let mut out = format!("{:>width$}", "true\\pred");
        for c in &self.classes {
            write!(out, " {c:>width$}").unwrap();
        }
        out.push('\n');
        for (c, row) in self.classes.iter().zip(&self.confusion) {
            write!(out, "{c:>width$}").unwrap();
            for v in row {
                write!(out, " {v:>width$}").unwrap();
            }
            out.push('\n');
        }
        out
    }
}

/// Argmax predictions of each network and of their probability average.
/// Returns one `(name, predictions)` pair per model, then the ensemble when requested.
pub fn predict_models(
    models: &[(String, &Network)],
    inputs: &[&FeatureMatrix],
    ensemble: bool,
) -> Result<Vec<(String, Vec<usize>)>> {
    let first = models.first().ok_or(Error::Empty("models"))?;
    if models.iter().any(|(_, m)| m.classes() != first.1.classes()) {
        return Err(Error::Shape("models disagree on class count".into()));
    }
    let probs: Vec<Vec<Vec<f64>>> = models
        .iter()
        .map(|(_, m)| predict_all(m, inputs))
        .collect::<Result<_>>()?;
    let mut out: Vec<(String, Vec<usize>)> = models
        .iter()
        .zip(&probs)
        .map(|((name, _), p)| (name.clone(), p.iter().map(|v| argmax(v)).collect()))
        .collect();
    if ensemble {
        let preds = (0..inputs.len())
            .map(|i| {
                let member: Vec<Vec<f64>> = probs.iter().map(|p| p[i].clone()).collect();
                ensemble_average(&member).map(|v| argmax(&v))
            })
            .collect::<Result<_>>()?;
        out.push((ENSEMBLE.to_string(), preds));
    }
    Ok(out)
}

/// Accuracy grid per task: rows are channel modes, columns are models.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SummaryGrid {
    pub cells: BTreeMap<(TaskSpec, ConfigMode), BTreeMap<String, f64>>,
    pub columns: Vec<String>,
}

impl SummaryGrid {
    pub fn new(columns: Vec<String>) -> Self {
        Self {
            cells: BTreeMap::new(),
            columns,
        }
    }

    pub fn insert(&mut self, report: &EvalReport) {
        self.cells
            .entry((report.task, report.mode))
            .or_default()
            .insert(report.model.clone(), report.accuracy);
    }

    pub fn get(&self, task: TaskSpec, mode: ConfigMode, model: &str) -> Option<f64> {
        self.cells.get(&(task, mode))?.get(model).copied()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut tasks: Vec<TaskSpec> = self.cells.keys().map(|k| k.0).collect();
        tasks.dedup();
        for task in tasks {
            writeln!(out, "[{task}]").unwrap();
            write!(out, "{:<14}", "mode").unwrap();
            for c in &self.columns {
                write!(out, " {c:>9}").unwrap();
            }
            out.push('\n');
            for ((_, mode), row) in self
                .cells
                .range((task, ConfigMode::Channel0)..=(task, ConfigMode::AllShuffled))
            {
                write!(out, "{:<14}", mode.as_str()).unwrap();
                for c in &self.columns {
                    match row.get(c) {
                        Some(a) => write!(out, " {a:>9.4}").unwrap(),
                        None => write!(out, " {:>9}", "-").unwrap(),
                    }
                }
                out.push('\n');
            }
            out.push('\n');
        }
        out
    }
}
