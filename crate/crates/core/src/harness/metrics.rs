//! Per-step metric records and their JSON-lines / CSV writers.
//!
//! JSONL: one [`StepMetrics`] object per line. CSV: `step,loss` followed by
//! `<probe>_rms,<probe>_absmax` for every probe in name order.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::harness::models::ActivationStat;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ModuleMetrics {
    /// `||W||_2` of the weight the update was applied to (after retraction
    /// for sphere optimizers).
    pub spectral_norm: f64,
    /// `||W_next - W||_2` for that same weight.
    pub update_spectral_norm: f64,
    /// Top singular value before retraction; equals `spectral_norm` for the
    /// unconstrained optimizers.
    pub sigma_before: f64,
    pub frobenius_norm: f64,
    pub radius: f64,
    pub lambda_star: f64,
    pub solver_iters: usize,
    pub tangency: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub loss: f64,
    pub per_module: BTreeMap<String, ModuleMetrics>,
    pub activations: BTreeMap<String, ActivationStat>,
}

/// Writes each record as soon as it is produced.
pub struct MetricsSink {
    jsonl: BufWriter<File>,
    csv: BufWriter<File>,
    header: Option<Vec<String>>,
    pub jsonl_path: PathBuf,
    pub csv_path: PathBuf,
}

impl MetricsSink {
    pub fn create(dir: &Path, name: &str) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        let jsonl_path = dir.join(format!("{name}.jsonl"));
        let csv_path = dir.join(format!("{name}.csv"));
        Ok(MetricsSink {
            jsonl: BufWriter::new(File::create(&jsonl_path)?),
            csv: BufWriter::new(File::create(&csv_path)?),
            header: None,
            jsonl_path,
            csv_path,
        })
    }

    pub fn write(&mut self, m: &StepMetrics) -> Result<()> {
        serde_json::to_writer(&mut self.jsonl, m)?;
        self.jsonl.write_all(b"\n")?;
        self.jsonl.flush()?;

        let probes: Vec<String> = m.activations.keys().cloned().collect();
        if self.header.is_none() {
            let mut cols = vec!["step".to_string(), "loss".to_string()];
            for p in &probes {
                cols.push(format!("{p}_rms"));
                cols.push(format!("{p}_absmax"));
            }
            writeln!(self.csv, "{}", cols.join(","))?;
            self.header = Some(probes.clone());
        }
        let mut row = vec![m.step.to_string(), m.loss.to_string()];
        for p in self.header.as_ref().expect("header written") {
            let s = m.activations.get(p).copied().unwrap_or_default();
            row.push(s.rms.to_string());
            row.push(s.absmax.to_string());
        }
        writeln!(self.csv, "{}", row.join(","))?;
        self.csv.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sink_writes_both_files() {
        let dir = tempfile::tempdir().unwrap();
        let mut sink = MetricsSink::create(dir.path(), "r").unwrap();
        let mut acts = BTreeMap::new();
        acts.insert("ffn_pre".to_string(), ActivationStat { rms: 1.5, absmax: 3.0 });
        for step in 0..2 {
            sink.write(&StepMetrics {
                step,
                loss: 0.25,
                per_module: BTreeMap::new(),
                activations: acts.clone(),
            })
            .unwrap();
        }
        let csv = std::fs::read_to_string(&sink.csv_path).unwrap();
        assert_eq!(csv, "step,loss,ffn_pre_rms,ffn_pre_absmax\n0,0.25,1.5,3\n1,0.25,1.5,3\n");
        let jsonl = std::fs::read_to_string(&sink.jsonl_path).unwrap();
        let back: StepMetrics = serde_json::from_str(jsonl.lines().nth(1).unwrap()).unwrap();
        assert_eq!(back.step, 1);
    }
}
