// SPDX-License-Identifier: MIT OR Apache-2.0

//! CSV and JSON-lines result tables with fixed column orders.

use std::io::Write;

use serde::Serialize;

use crate::analysis::{AgreementMatrix, ImportanceProfile, LinearFit, TermCorrelation};
use crate::decomp::{Term, TermSet};
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableFormat {
    Csv,
    Jsonl,
}

impl std::str::FromStr for TableFormat {
    type Err = crate::error::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(TableFormat::Csv),
            "jsonl" => Ok(TableFormat::Jsonl),
            other => Err(crate::error::Error::Config(format!("unknown format `{other}`"))),
        }
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

#[derive(Serialize)]
struct TermRow<'a> {
    sequence_id: usize,
    token_index: usize,
    layer_cut: usize,
    term: &'a str,
    values: &'a [f64],
}

/// Streams term vectors: one row per (sequence, token, term), with `e` the
/// traced representation after the four terms.
pub struct TermWriter<W: Write> {
    format: TableFormat,
    csv: Option<csv::Writer<W>>,
    raw: Option<W>,
    dim: Option<usize>,
}

impl<W: Write> TermWriter<W> {
    pub fn new(out: W, format: TableFormat) -> Self {
        match format {
            TableFormat::Csv => Self {
                format,
                csv: Some(csv::Writer::from_writer(out)),
                raw: None,
                dim: None,
            },
            TableFormat::Jsonl => Self {
                format,
                csv: None,
                raw: Some(out),
                dim: None,
            },
        }
    }

    pub fn write(&mut self, sequence_id: usize, terms: &TermSet) -> Result<()> {
        let d = terms.dim();
        if self.dim.is_none() {
            self.dim = Some(d);
            if let Some(w) = &mut self.csv {
                let mut header: Vec<String> = ["sequence_id", "token_index", "layer_cut", "term"]
                    .iter()
                    .map(|s| s.to_string())
                    .collect();
                header.extend((0..d).map(|j| format!("v{j}")));
                w.write_record(&header)?;
            }
        }
        for t in 0..terms.tokens() {
            let rows = Term::ALL
                .iter()
                .map(|&term| (term.symbol().to_string(), terms.term(term).row(t)))
                .chain(std::iter::once(("e".to_string(), terms.reference().row(t))));
            for (sym, values) in rows {
                match self.format {
                    TableFormat::Csv => {
                        let w = self.csv.as_mut().expect("csv writer");
                        let mut rec = vec![
                            sequence_id.to_string(),
                            t.to_string(),
                            terms.cut().to_string(),
                            sym,
                        ];
                        rec.extend(values.iter().map(f64::to_string));
                        w.write_record(&rec)?;
                    }
                    TableFormat::Jsonl => {
                        let w = self.raw.as_mut().expect("jsonl writer");
                        let row = TermRow {
                            sequence_id,
                            token_index: t,
                            layer_cut: terms.cut(),
                            term: &sym,
                            values,
                        };
                        serde_json::to_writer(&mut *w, &row)?;
                        w.write_all(b"\n").map_err(csv::Error::from)?;
                    }
                }
            }
        }
        Ok(())
    }

    pub fn finish(self) -> Result<()> {
        if let Some(mut w) = self.csv {
            w.flush().map_err(csv::Error::from)?;
        }
        if let Some(mut w) = self.raw {
            w.flush().map_err(csv::Error::from)?;
        }
        Ok(())
    }
}

/// `layer,term,mean,std,count`; undefined entries leave mean and std empty.
pub fn write_profile<W: Write>(out: W, profile: &ImportanceProfile) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["layer", "term", "mean", "std", "count"])?;
    for e in &profile.entries {
        w.write_record([
            e.layer.to_string(),
            e.term.symbol().to_string(),
            opt(e.mean),
            opt(e.std),
            e.count.to_string(),
        ])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// `layer,r2,samples`, layers counted from 1.
pub fn write_fits<W: Write>(out: W, fits: &[LinearFit]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["layer", "r2", "samples"])?;
    for (l, f) in fits.iter().enumerate() {
        w.write_record([(l + 1).to_string(), f.r2.to_string(), f.samples.to_string()])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// `layer,term,rho,n`.
pub fn write_correlations<W: Write>(out: W, rows: &[TermCorrelation]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["layer", "term", "rho", "n"])?;
    for r in rows {
        w.write_record([
            r.layer.to_string(),
            r.term.symbol().to_string(),
            r.rho.to_string(),
            r.n.to_string(),
        ])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// Square matrix with a leading `system` column.
pub fn write_agreement<W: Write>(out: W, m: &AgreementMatrix) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["system".to_string()];
    header.extend(m.names.iter().cloned());
    w.write_record(&header)?;
    for (name, row) in m.names.iter().zip(&m.values) {
        let mut rec = vec![name.clone()];
        rec.extend(row.iter().map(f64::to_string));
        w.write_record(&rec)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// One row per verified sequence.
#[derive(Debug, Clone, Serialize)]
pub struct ResidualRow {
    pub sequence_id: usize,
    pub layer_cut: usize,
    pub tokens: usize,
    pub max: f64,
    pub mean: f64,
    pub passed: bool,
}

pub fn write_residuals<W: Write>(out: W, rows: &[ResidualRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    if rows.is_empty() {
        w.write_record(["sequence_id", "layer_cut", "tokens", "max", "mean", "passed"])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}
