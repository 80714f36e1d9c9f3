use std::cmp::Ordering;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::SensitivityReport;
use crate::error::{Error, Result};
use crate::quant::{size_mb, BitWidth};

/// Cluster count up to which every combination is enumerated.
const EXHAUSTIVE_LIMIT: usize = 12;
/// Largest budget grid the dynamic program works on.
const MAX_STATES: u64 = 200_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssignedCluster {
    pub cluster: String,
    pub params: usize,
    pub bits: u32,
}

/// Bit-width chosen for every cluster.
#[derive(Debug, Clone, PartialEq)]
pub struct PrecisionAssignment {
    pub clusters: Vec<AssignedCluster>,
    /// Total sensitivity; `None` when the assignment did not come from a report.
    pub total_omega: Option<f64>,
}

impl PrecisionAssignment {
    pub fn new(clusters: Vec<AssignedCluster>) -> Result<Self> {
        if clusters.is_empty() {
            return Err(Error::EmptyInput("assignment has no clusters".into()));
        }
        for c in &clusters {
            BitWidth::new(c.bits)?;
        }
        Ok(PrecisionAssignment {
            clusters,
            total_omega: None,
        })
    }

    /// Parameter-weighted mean bit-width.
    pub fn average_bits(&self) -> f64 {
        let total: f64 = self.clusters.iter().map(|c| c.params as f64).sum();
        let weighted: f64 = self
            .clusters
            .iter()
            .map(|c| c.params as f64 * f64::from(c.bits))
            .sum();
        weighted / total
    }

    pub fn bits_of(&self, cluster: &str) -> Option<BitWidth> {
        self.clusters
            .iter()
            .find(|c| c.cluster == cluster)
            .map(|c| BitWidth::new(c.bits).expect("validated on construction"))
    }

    /// Model size with `residue` further full-precision scalars.
    pub fn size_mb(&self, residue: usize) -> f64 {
        let q: Vec<(usize, u32)> = self.clusters.iter().map(|c| (c.params, c.bits)).collect();
        size_mb(&q, residue)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for c in &self.clusters {
            w.serialize(c)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let clusters = r.deserialize().collect::<std::result::Result<Vec<_>, _>>()?;
        Self::new(clusters)
    }
}

struct Options {
    id: String,
    params: usize,
    /// `(bits, Ω)` ascending in bits.
    choices: Vec<(u32, f64)>,
}

fn options(report: &SensitivityReport) -> Result<Vec<Options>> {
    let clusters = report.clusters();
    let mut out: Vec<Options> = clusters
        .into_iter()
        .map(|(id, params)| Options {
            id,
            params,
            choices: Vec::new(),
        })
        .collect();
    for r in report.records() {
        let o = out.iter_mut().find(|o| o.id == r.cluster).expect("cluster listed");
        o.choices.push((r.bits, r.omega));
    }
    for o in &mut out {
        o.choices.sort_by_key(|c| c.0);
    }
    let bits: Vec<u32> = out[0].choices.iter().map(|c| c.0).collect();
    if let Some(o) = out.iter().find(|o| o.choices.iter().map(|c| c.0).ne(bits.iter().copied())) {
        return Err(Error::format(
            o.id.clone(),
            "sensitivity report must cover the same bit-widths for every cluster",
        ));
    }
    Ok(out)
}

fn check_budget(budget: f64) -> Result<()> {
    if !(budget >= 1.0) {
        return Err(Error::Infeasible(format!(
            "average budget {budget} is below one bit"
        )));
    }
    Ok(())
}

/// Largest admissible `Σ params·bits`.
fn capacity(opts: &[Options], budget: f64) -> u64 {
    let total: u64 = opts.iter().map(|o| o.params as u64).sum();
    (budget * total as f64 + 1e-9).floor() as u64
}

/// `(Ω, cost, bits)` ordering: lower sensitivity, then fewer bits, then the
/// lexicographically smaller bit vector.
fn better(a: (f64, u64, &[u32]), b: (f64, u64, &[u32])) -> bool {
    match a.0.total_cmp(&b.0) {
        Ordering::Less => true,
        Ordering::Greater => false,
        Ordering::Equal => (a.1, a.2) < (b.1, b.2),
    }
}

fn build(opts: &[Options], bits: &[u32], omega: f64) -> PrecisionAssignment {
    PrecisionAssignment {
        clusters: opts
            .iter()
            .zip(bits)
            .map(|(o, &b)| AssignedCluster {
                cluster: o.id.clone(),
                params: o.params,
                bits: b,
            })
            .collect(),
        total_omega: Some(omega),
    }
}

fn infeasible(budget: f64) -> Error {
    Error::Infeasible(format!("no assignment fits an average of {budget} bits"))
}

/// Minimizes total sensitivity subject to a parameter-weighted average
/// bit-width of at most `budget`.
pub fn allocate_bits(report: &SensitivityReport, budget: f64) -> Result<PrecisionAssignment> {
    if report.clusters().len() <= EXHAUSTIVE_LIMIT {
        allocate_exhaustive(report, budget)
    } else {
        allocate_dp(report, budget)
    }
}

pub fn allocate_exhaustive(report: &SensitivityReport, budget: f64) -> Result<PrecisionAssignment> {
    check_budget(budget)?;
    let opts = options(report)?;
    let cap = capacity(&opts, budget);
    let k = opts[0].choices.len();
    let mut idx = vec![0usize; opts.len()];
    let mut best: Option<(f64, u64, Vec<u32>)> = None;
    loop {
        let mut omega = 0.0;
        let mut cost = 0u64;
        for (o, &i) in opts.iter().zip(&idx) {
            omega += o.choices[i].1;
            cost += o.params as u64 * u64::from(o.choices[i].0);
        }
        if cost <= cap {
            let bits: Vec<u32> = opts.iter().zip(&idx).map(|(o, &i)| o.choices[i].0).collect();
            if best
                .as_ref()
                .is_none_or(|b| better((omega, cost, &bits), (b.0, b.1, &b.2)))
            {
                best = Some((omega, cost, bits));
            }
        }
        // mixed-radix increment, last cluster fastest
        let mut pos = idx.len();
        loop {
            if pos == 0 {
                let (omega, _, bits) = best.ok_or_else(|| infeasible(budget))?;
                return Ok(build(&opts, &bits, omega));
            }
            pos -= 1;
            idx[pos] += 1;
            if idx[pos] < k {
                break;
            }
            idx[pos] = 0;
        }
    }
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Dynamic program over the total bit cost, measured in units of the common
/// divisor of the cluster sizes. When that grid is too fine it is coarsened
/// and costs are rounded up, which keeps every result within budget.
pub fn allocate_dp(report: &SensitivityReport, budget: f64) -> Result<PrecisionAssignment> {
    check_budget(budget)?;
    let opts = options(report)?;
    let cap = capacity(&opts, budget);
    let mut unit = opts.iter().fold(0u64, |g, o| gcd(g, o.params as u64)).max(1);
    if cap / unit + 1 > MAX_STATES {
        unit = cap.div_ceil(MAX_STATES - 1);
    }
    let slots = (cap / unit) as usize + 1;
    type State = Option<(f64, Vec<u32>)>;
    let mut states: Vec<State> = vec![None; slots];
    states[0] = Some((0.0, Vec::new()));
    for o in &opts {
        let mut next: Vec<State> = vec![None; slots];
        for (c, state) in states.iter().enumerate() {
            let Some((omega, bits)) = state else { continue };
            for &(b, w) in &o.choices {
                let step = (o.params as u64 * u64::from(b)).div_ceil(unit) as usize;
                let target = c + step;
                if target >= slots {
                    continue;
                }
                let total = omega + w;
                let mut cand = bits.clone();
                cand.push(b);
                let replace = match &next[target] {
                    None => true,
                    Some((o2, b2)) => better((total, 0, &cand), (*o2, 0, b2)),
                };
                if replace {
                    next[target] = Some((total, cand));
                }
            }
        }
        states = next;
    }
    let mut best: Option<(f64, u64, Vec<u32>)> = None;
    for state in states.into_iter().flatten() {
        let (omega, bits) = state;
        let cost: u64 = opts
            .iter()
            .zip(&bits)
            .map(|(o, &b)| o.params as u64 * u64::from(b))
            .sum();
        if best
            .as_ref()
            .is_none_or(|b| better((omega, cost, &bits), (b.0, b.1, &b.2)))
        {
            best = Some((omega, cost, bits));
        }
    }
    let (omega, _, bits) = best.ok_or_else(|| infeasible(budget))?;
    Ok(build(&opts, &bits, omega))
}
