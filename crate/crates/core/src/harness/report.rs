//! Result tables.
//!
//! Every numeric field is stored at its printed precision, so a dump
//! reparses to the same rows.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::quant::compression_ratio;

pub const COLUMNS: [&str; 8] = [
    "model",
    "quant. precision",
    "quant. method",
    "#bit",
    "PPL",
    "size(MB)",
    "comp. ratio",
    "eval time(s)",
];

macro_rules! named_enum {
    ($name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
        pub enum $name {
            $($variant),+
        }

        impl $name {
            pub fn name(self) -> &'static str {
                match self {
                    $($name::$variant => $text),+
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.name())
            }
        }

        impl FromStr for $name {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok($name::$variant),)+
                    other => Err(Error::format(stringify!($name), format!("unknown value `{other}`"))),
                }
            }
        }
    };
}

named_enum!(QuantMethod {
    None => "none",
    Uniform => "uniform",
    AdmmManual => "admm-manual",
    MinSen => "minsen",
    Nas => "nas",
});

named_enum!(PrecisionKind {
    Full => "full",
    Uniform => "uniform",
    Mixed => "mixed",
});

fn round_to(x: f64, decimals: i32) -> f64 {
    let scale = 10f64.powi(decimals);
    (x * scale).round() / scale
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub model: String,
    pub precision: PrecisionKind,
    pub method: QuantMethod,
    pub bits: f64,
    pub ppl: f64,
    pub size_mb: f64,
    /// `None` on the full-precision baseline.
    pub ratio: Option<f64>,
    /// `None` when timings are switched off.
    pub eval_seconds: Option<f64>,
}

impl ReportRow {
    pub fn baseline(model: &str, ppl: f64, size_mb: f64, eval_seconds: Option<f64>) -> Self {
        ReportRow {
            model: model.to_owned(),
            precision: PrecisionKind::Full,
            method: QuantMethod::None,
            bits: 32.0,
            ppl: round_to(ppl, 2),
            size_mb: round_to(size_mb, 4),
            ratio: None,
            eval_seconds: eval_seconds.map(|s| round_to(s, 2)),
        }
    }

    /// A quantized row; the ratio is taken between the printed sizes.
    #[allow(clippy::too_many_arguments)]
    pub fn quantized(
        model: &str,
        precision: PrecisionKind,
        method: QuantMethod,
        bits: f64,
        ppl: f64,
        size_mb: f64,
        full_size_mb: f64,
        eval_seconds: Option<f64>,
    ) -> Result<Self> {
        let size_mb = round_to(size_mb, 4);
        let ratio = compression_ratio(round_to(full_size_mb, 4), size_mb)?;
        Ok(ReportRow {
            model: model.to_owned(),
            precision,
            method,
            bits: round_to(bits, 1),
            ppl: round_to(ppl, 2),
            size_mb,
            ratio: Some(ratio),
            eval_seconds: eval_seconds.map(|s| round_to(s, 2)),
        })
    }

    fn cells(&self) -> [String; 8] {
        let bits = if self.bits.fract() == 0.0 {
            format!("{}", self.bits as i64)
        } else {
            format!("{:.1}", self.bits)
        };
        [
            self.model.clone(),
            self.precision.to_string(),
            self.method.to_string(),
            bits,
            format!("{:.2}", self.ppl),
            format!("{:.4}", self.size_mb),
            self.ratio.map_or("-".to_owned(), |r| format!("{r:.1}")),
            self.eval_seconds.map_or("-".to_owned(), |s| format!("{s:.2}")),
        ]
    }

    fn from_cells(cells: &[String]) -> Result<Self> {
        if cells.len() != COLUMNS.len() {
            return Err(Error::format(
                "row",
                format!("{} cells, expected {}", cells.len(), COLUMNS.len()),
            ));
        }
        let number = |i: usize| -> Result<f64> {
            cells[i]
                .parse()
                .map_err(|e| Error::format(COLUMNS[i], format!("`{}`: {e}", cells[i])))
        };
        let optional = |i: usize| -> Result<Option<f64>> {
            if cells[i] == "-" {
                Ok(None)
            } else {
                number(i).map(Some)
            }
        };
        Ok(ReportRow {
            model: cells[0].clone(),
            precision: cells[1].parse()?,
            method: cells[2].parse()?,
            bits: number(3)?,
            ppl: number(4)?,
            size_mb: number(5)?,
            ratio: optional(6)?,
            eval_seconds: optional(7)?,
        })
    }
}

/// Column-aligned text table.
pub fn format_table(rows: &[ReportRow]) -> String {
    let cells: Vec<[String; 8]> = rows.iter().map(ReportRow::cells).collect();
    let widths: Vec<usize> = (0..COLUMNS.len())
        .map(|j| {
            cells
                .iter()
                .map(|r| r[j].chars().count())
                .chain(std::iter::once(COLUMNS[j].len()))
                .max()
                .unwrap_or(0)
        })
        .collect();
    let line = |values: Vec<&str>| -> String {
        let padded: Vec<String> = values
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(j, (v, &w))| if j < 3 { format!("{v:<w$}") } else { format!("{v:>w$}") })
            .collect();
        padded.join("  ").trim_end().to_owned()
    };
    let mut out = line(COLUMNS.to_vec());
    out.push('\n');
    out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
    out.push('\n');
    for r in &cells {
        out.push_str(&line(r.iter().map(String::as_str).collect()));
        out.push('\n');
    }
    out
}

pub fn write_dump<W: Write>(rows: &[ReportRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(COLUMNS)?;
    for r in rows {
        w.write_record(r.cells())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dump<R: Read>(input: R) -> Result<Vec<ReportRow>> {
    let mut r = csv::Reader::from_reader(input);
    let header: Vec<String> = r.headers()?.iter().map(str::to_owned).collect();
    if header != COLUMNS {
        return Err(Error::format("header", format!("unexpected columns {header:?}")));
    }
    r.records()
        .map(|rec| {
            let cells: Vec<String> = rec?.iter().map(str::to_owned).collect();
            ReportRow::from_cells(&cells)
        })
        .collect()
}
