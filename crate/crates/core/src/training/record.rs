use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::Result;

/// Loss and tracked quantities at the start of an epoch. The last record of a
/// completed run holds the values after the final update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_loss: Option<f64>,
    /// Cumulative forward stage evaluations.
    pub nfe: u64,
    pub tau: Option<f64>,
    pub tracked: Vec<(String, f64)>,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TrainEvent {
    /// A step produced a non-finite or failed solve; parameters were rolled
    /// back and the learning rate halved.
    Divergence { epoch: usize, detail: String, new_lr: f64 },
    /// The delay was clamped into its admissible interval.
    TauProjected { epoch: usize, tau: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TrainStatus {
    Completed,
    /// Retries were exhausted; the record ends at the last good epoch.
    Diverged { epoch: usize, detail: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub epochs: Vec<EpochRecord>,
    pub events: Vec<TrainEvent>,
    pub status: TrainStatus,
    /// Final trainable vector in the layout of the problem that produced it.
    pub final_theta: Vec<f64>,
    pub forward_solves: u64,
    pub wall_time_s: f64,
}

impl TrainRecord {
    pub fn completed(&self) -> bool {
        self.status == TrainStatus::Completed
    }

    pub fn losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.train_loss).collect()
    }

    pub fn final_loss(&self) -> f64 {
        self.epochs.last().map_or(f64::INFINITY, |e| e.train_loss)
    }

    pub fn final_tau(&self) -> Option<f64> {
        self.epochs.last().and_then(|e| e.tau)
    }

    pub fn final_tracked(&self, name: &str) -> Option<f64> {
        let last = self.epochs.last()?;
        last.tracked.iter().find(|(k, _)| k == name).map(|(_, v)| *v)
    }

    pub fn total_nfe(&self) -> u64 {
        self.epochs.last().map_or(0, |e| e.nfe)
    }

    /// One JSON object per epoch. Wall time is left out so that reruns are
    /// byte-identical.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for e in &self.epochs {
            let mut obj = Map::new();
            obj.insert("epoch".into(), Value::from(e.epoch));
            obj.insert("train_loss".into(), json_f64(e.train_loss));
            obj.insert("test_loss".into(), e.test_loss.map_or(Value::Null, json_f64));
            obj.insert("nfe".into(), Value::from(e.nfe));
            obj.insert("tau".into(), e.tau.map_or(Value::Null, json_f64));
            obj.insert("lr".into(), json_f64(e.lr));
            for (k, v) in &e.tracked {
                obj.insert(k.clone(), json_f64(*v));
            }
            serde_json::to_writer(&mut w, &Value::Object(obj))?;
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn save_jsonl(&self, path: &Path) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_jsonl(f)
    }
}

/// Non-finite values become strings so the line stays valid JSON.
fn json_f64(v: f64) -> Value {
    if v.is_finite() {
        Value::from(v)
    } else {
        Value::from(v.to_string())
    }
}
