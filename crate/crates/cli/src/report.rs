use std::path::Path;

use convbeam::scene::Condition;
use serde::{Deserialize, Serialize};

use crate::config::Method;
use crate::error::{CliError, Result};

/// One speaker-selection decision within a trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub selected: usize,
    /// Output fwSSNR of the selected signal minus the input fwSSNR.
    pub delta_db: f64,
    /// The selected output scores strictly higher than every other output
    /// against the attended reference.
    pub correct: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialScore {
    pub trial: usize,
    pub attended: usize,
    pub start_s: f64,
    pub len_s: f64,
    pub input_db: f64,
    /// Output fwSSNR of each beamformer output against the attended reference.
    pub output_db: Vec<f64>,
    pub oracle: Decision,
    pub estimated: Option<Decision>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakerScore {
    pub speaker: usize,
    pub input_db: f64,
    pub output_db: f64,
    pub delta_db: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    pub condition: Condition,
    pub target_db: f64,
    /// Input fwSSNR averaged over speakers, whole signal.
    pub input_db: f64,
    pub speakers: Vec<SpeakerScore>,
    pub trials: Vec<TrialScore>,
    pub oracle_accuracy: f64,
    pub oracle_delta_db: f64,
    pub estimated_accuracy: Option<f64>,
    pub estimated_delta_db: Option<f64>,
    /// Accuracy above which decoding beats chance at the 5 % level.
    pub chance_bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub method: Method,
    pub conditions: Vec<ConditionReport>,
    /// Input fwSSNR averaged over all conditions.
    pub mean_input_db: f64,
}

impl Report {
    pub fn load(path: &Path) -> Result<Report> {
        crate::artifacts::read_json(path)
    }

    /// Writes `conditions.csv` and `trials.csv` into `dir`.
    pub fn write_tables(&self, dir: &Path) -> Result<()> {
        let path = dir.join("conditions.csv");
        let mut w = csv::Writer::from_path(&path).map_err(|e| CliError::io(&path, e))?;
        let err = |e: csv::Error| CliError::io(dir.join("conditions.csv"), e);
        w.write_record(["condition", "selection", "accuracy", "delta_db", "input_db", "chance_bound"])
            .map_err(err)?;
        for c in &self.conditions {
            let mut rows = vec![("oracle", Some(c.oracle_accuracy), Some(c.oracle_delta_db))];
            rows.push(("estimated", c.estimated_accuracy, c.estimated_delta_db));
            for (kind, acc, delta) in rows {
                w.write_record([
                    c.condition.name().to_string(),
                    kind.to_string(),
                    opt(acc),
                    opt(delta),
                    c.input_db.to_string(),
                    c.chance_bound.to_string(),
                ])
                .map_err(err)?;
            }
        }
        w.flush().map_err(|e| CliError::io(&path, e))?;

        let path = dir.join("trials.csv");
        let mut w = csv::Writer::from_path(&path).map_err(|e| CliError::io(&path, e))?;
        let err = |e: csv::Error| CliError::io(dir.join("trials.csv"), e);
        w.write_record([
            "condition",
            "trial",
            "attended",
            "input_db",
            "oracle_selected",
            "oracle_delta_db",
            "estimated_selected",
            "estimated_delta_db",
            "estimated_correct",
        ])
        .map_err(err)?;
        for c in &self.conditions {
            for t in &c.trials {
                let est = t.estimated.as_ref();
                w.write_record([
                    c.condition.name().to_string(),
                    t.trial.to_string(),
                    t.attended.to_string(),
                    t.input_db.to_string(),
                    t.oracle.selected.to_string(),
                    t.oracle.delta_db.to_string(),
                    est.map_or(String::new(), |d| d.selected.to_string()),
                    opt(est.map(|d| d.delta_db)),
                    est.map_or(String::new(), |d| d.correct.to_string()),
                ])
                .map_err(err)?;
            }
        }
        w.flush().map_err(|e| CliError::io(&path, e))
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |v| v.to_string())
}
