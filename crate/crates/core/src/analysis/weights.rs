use crate::error::{Error, Result};
use crate::report::{Provenance, Table};
use crate::trainer::TrainLogRecord;

const SIMPLEX_TOL: f64 = 1e-12;

/// Fusion weights over training, one simplex point per logged step.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightTrajectory {
    pub steps: Vec<u64>,
    pub alphas: Vec<Vec<f64>>,
}

impl WeightTrajectory {
    pub fn new(steps: Vec<u64>, alphas: Vec<Vec<f64>>) -> Result<Self> {
        let t = Self { steps, alphas };
        t.validate()?;
        Ok(t)
    }

    pub fn from_records(records: &[TrainLogRecord]) -> Result<Self> {
        Self::new(
            records.iter().map(|r| r.step).collect(),
            records.iter().map(|r| r.alpha.clone()).collect(),
        )
    }

    fn validate(&self) -> Result<()> {
        if self.steps.len() != self.alphas.len() {
            return Err(Error::invalid(
                "weight_trajectory",
                format!("{} steps for {} weight vectors", self.steps.len(), self.alphas.len()),
            ));
        }
        let k = self.layers();
        if k == 0 && !self.alphas.is_empty() {
            return Err(Error::invalid("weight_trajectory", "records carry no fusion weights"));
        }
        for (s, a) in self.steps.iter().zip(&self.alphas) {
            if a.len() != k {
                return Err(Error::invalid(
                    "weight_trajectory",
                    format!("step {s} has {} weights, expected {k}", a.len()),
                ));
            }
            let sum: f64 = a.iter().sum();
            if (sum - 1.0).abs() > SIMPLEX_TOL || a.iter().any(|&x| !(0.0..=1.0).contains(&x)) {
                return Err(Error::Domain {
                    op: "weight_trajectory",
                    msg: format!("weights at step {s} are off the simplex (sum {sum})"),
                });
            }
        }
        if let Some(w) = self.steps.windows(2).find(|w| w[0] >= w[1]) {
            return Err(Error::invalid(
                "weight_trajectory",
                format!("steps not strictly increasing: {} then {}", w[0], w[1]),
            ));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Size of the fused layer set.
    pub fn layers(&self) -> usize {
        self.alphas.first().map_or(0, Vec::len)
    }

    /// Weight of fused layer `i` at every logged step.
    pub fn series(&self, i: usize) -> Vec<f64> {
        self.alphas.iter().map(|a| a[i]).collect()
    }

    pub fn first(&self) -> Option<&[f64]> {
        self.alphas.first().map(Vec::as_slice)
    }

    pub fn last(&self) -> Option<&[f64]> {
        self.alphas.last().map(Vec::as_slice)
    }

    /// `step,alpha_0,...,alpha_k`.
    pub fn to_table(&self, provenance: Option<Provenance>) -> Table {
        let mut header = vec!["step".to_string()];
        header.extend((0..self.layers()).map(|i| format!("alpha_{i}")));
        let mut table = Table::new(provenance, header);
        for (s, a) in self.steps.iter().zip(&self.alphas) {
            let mut row = vec![*s as f64];
            row.extend_from_slice(a);
            table.push(row);
        }
        table
    }
}

/// Extracts the fusion-weight trajectory from a training log table.
pub fn track_weights(log: &Table) -> Result<WeightTrajectory> {
    let step = log
        .column("step")
        .ok_or_else(|| Error::Format("training log lacks a `step` column".into()))?;
    let cols: Vec<usize> = (0..).map_while(|i| log.column(&format!("alpha_{i}"))).collect();
    if cols.is_empty() {
        return Err(Error::Format("training log lacks `alpha_*` columns".into()));
    }
    let mut steps = Vec::with_capacity(log.rows.len());
    for row in &log.rows {
        let s = row[step];
        if s < 0.0 || s.fract() != 0.0 {
            return Err(Error::Format(format!("invalid step value {s}")));
        }
        steps.push(s as u64);
    }
    let alphas = log.rows.iter().map(|r| cols.iter().map(|&c| r[c]).collect()).collect();
    WeightTrajectory::new(steps, alphas)
}
