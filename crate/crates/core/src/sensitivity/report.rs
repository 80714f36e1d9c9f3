use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sensitivity of one cluster at one bit-width. `trace` is the trace factor
/// actually used, so `omega == trace * perturbation` holds as stored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityRecord {
    pub cluster: String,
    pub params: usize,
    pub bits: u32,
    pub trace: f64,
    pub trace_stderr: f64,
    pub perturbation: f64,
    pub omega: f64,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityReport {
    records: Vec<SensitivityRecord>,
}

impl SensitivityReport {
    pub fn new(records: Vec<SensitivityRecord>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::EmptyInput("sensitivity report has no records".into()));
        }
        for (i, r) in records.iter().enumerate() {
            let field = |name: &str| format!("record {i} ({}, {} bits): {name}", r.cluster, r.bits);
            if !(r.perturbation >= 0.0) {
                return Err(Error::format(field("perturbation"), "must be non-negative"));
            }
            if r.samples == 0 {
                return Err(Error::format(field("samples"), "must be at least 1"));
            }
            if r.omega != r.trace * r.perturbation {
                return Err(Error::format(field("omega"), "differs from trace × perturbation"));
            }
            if records[..i]
                .iter()
                .any(|o| o.cluster == r.cluster && (o.bits == r.bits || o.params != r.params))
            {
                return Err(Error::format(field("cluster"), "duplicate or inconsistent entry"));
            }
        }
        Ok(SensitivityReport { records })
    }

    pub fn records(&self) -> &[SensitivityRecord] {
        &self.records
    }

    /// Cluster ids with their sizes, in first-appearance order.
    pub fn clusters(&self) -> Vec<(String, usize)> {
        let mut out: Vec<(String, usize)> = Vec::new();
        for r in &self.records {
            if !out.iter().any(|(c, _)| c == &r.cluster) {
                out.push((r.cluster.clone(), r.params));
            }
        }
        out
    }

    pub fn omega(&self, cluster: &str, bits: u32) -> Option<f64> {
        self.records
            .iter()
            .find(|r| r.cluster == cluster && r.bits == bits)
            .map(|r| r.omega)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.records {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let records = r.deserialize().collect::<std::result::Result<Vec<_>, _>>()?;
        Self::new(records)
    }
}
