//! Append-only training log with CSV and JSON emission.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LossTerms, RdPoint};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iteration: u64,
    pub phase: String,
    /// `train` (noisy minibatch terms), `val` (validation curve) or `xi`.
    pub kind: String,
    /// Level being scheduled, 1-based.
    pub level: Option<usize>,
    pub lambdas: Vec<f64>,
    pub rates: Vec<f64>,
    /// MSE for `train` records, PSNR in dB otherwise.
    pub distortions: Vec<f64>,
    pub xi: Option<f64>,
}

impl LogRecord {
    pub fn train(iteration: u64, phase: &str, lambdas: &[f64], terms: &[LossTerms]) -> Self {
        LogRecord {
            iteration,
            phase: phase.to_string(),
            kind: "train".into(),
            level: None,
            lambdas: lambdas.to_vec(),
            rates: super::terms_rates(terms),
            distortions: terms.iter().map(|t| t.distortion).collect(),
            xi: None,
        }
    }

    pub fn val(iteration: u64, phase: &str, level: Option<usize>, lambdas: &[f64], curve: &[RdPoint], xi: Option<f64>) -> Self {
        LogRecord {
            iteration,
            phase: phase.to_string(),
            kind: if xi.is_some() { "xi".into() } else { "val".into() },
            level: level.map(|l| l + 1),
            lambdas: lambdas.to_vec(),
            rates: curve.iter().map(|p| p.rate).collect(),
            distortions: curve.iter().map(|p| p.psnr).collect(),
            xi,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct CsvRow {
    iteration: u64,
    phase: String,
    kind: String,
    level: Option<usize>,
    lambdas: String,
    rates: String,
    distortions: String,
    xi: Option<f64>,
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(";")
}

fn split(s: &str) -> Result<Vec<f64>> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(';')
        .map(|x| x.parse::<f64>().map_err(|_| Error::data(format!("bad number {x:?} in log"))))
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
}

impl TrainLog {
    pub fn push(&mut self, r: LogRecord) {
        self.records.push(r);
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.records {
            w.serialize(CsvRow {
                iteration: r.iteration,
                phase: r.phase.clone(),
                kind: r.kind.clone(),
                level: r.level,
                lambdas: join(&r.lambdas),
                rates: join(&r.rates),
                distortions: join(&r.distortions),
                xi: r.xi,
            })
            .map_err(|e| Error::internal(format!("csv: {e}")))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::internal(format!("csv: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let mut records = Vec::new();
        for row in r.deserialize::<CsvRow>() {
            let row = row.map_err(|e| Error::data(format!("log csv: {e}")))?;
            records.push(LogRecord {
                iteration: row.iteration,
                phase: row.phase,
                kind: row.kind,
                level: row.level,
                lambdas: split(&row.lambdas)?,
                rates: split(&row.rates)?,
                distortions: split(&row.distortions)?,
                xi: row.xi,
            });
        }
        Ok(TrainLog { records })
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::write(dir.join("train_log.csv"), self.to_csv()?)?;
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::internal(format!("json: {e}")))?;
        std::fs::write(dir.join("train_log.json"), json)?;
        Ok(())
    }
}
