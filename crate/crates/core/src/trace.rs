//! Iterate traces: the scalar per-iteration record solvers emit and the
//! monitors consume, with exact CSV round-tripping.
//!
//! Indexing convention: record `k` holds `f(x^k)` and the step norm
//! `||x^k - x^{k-1}||` (so the step lives on the successor record and record
//! 0 has none). The decrease coefficient `a_k` sits on record `k` and governs
//! the transition `k -> k+1`; the relative-error pair `(b, eps)` for that
//! same transition sits on record `k+1`, matching how the inequalities are
//! stated. The metric bounds `(alpha, beta)` of the sweep producing `x^k`
//! ride on record `k` as well (arrival side, like `b` and `eps`).

use std::io::{BufRead, Write};
use std::path::Path;

use serde::Serialize;

use crate::block::BlockVector;
use crate::error::{Error, Result};

/// Scalar observations for one iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct IterateRecord {
    pub k: usize,
    pub f_val: f64,
    /// `||x^k - x^{k-1}||`; `None` on the initial record.
    pub step_norm: Option<f64>,
    /// Norm of an explicitly constructed witness subgradient at `x^k`
    /// (an upper bound on the lazy slope).
    pub slope_norm: Option<f64>,
    pub a_k: Option<f64>,
    pub b_k: Option<f64>,
    pub eps_k: Option<f64>,
    pub alpha_k: Option<f64>,
    pub beta_k: Option<f64>,
    /// 1.0 when the iterate is inside the configured neighborhood slice,
    /// 0.0 when outside; `None` when no region was configured.
    pub region_flag: Option<f64>,
}

impl IterateRecord {
    pub fn initial(f_val: f64) -> Self {
        Self {
            k: 0,
            f_val,
            step_norm: None,
            slope_norm: None,
            a_k: None,
            b_k: None,
            eps_k: None,
            alpha_k: None,
            beta_k: None,
            region_flag: None,
        }
    }
}

/// Why a run stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum TerminalStatus {
    /// Step norm and slope witness dropped below their tolerances.
    Converged,
    MaxIter,
    Diverged,
}

/// A full run: scalar records, terminal status, and (optionally) the block
/// iterates themselves for diagnostics that need them.
#[derive(Debug, Clone)]
pub struct IterateTrace {
    pub records: Vec<IterateRecord>,
    pub status: TerminalStatus,
    /// `x^k` per record; populated by solvers, not stored in the CSV.
    pub iterates: Vec<BlockVector>,
    /// Error-free companion iterates `y^k` when error injection was active.
    pub companions: Option<Vec<BlockVector>>,
}

impl IterateTrace {
    pub fn new(status: TerminalStatus) -> Self {
        Self { records: Vec::new(), status, iterates: Vec::new(), companions: None }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn final_f(&self) -> Option<f64> {
        self.records.last().map(|r| r.f_val)
    }

    /// Push a record, enforcing the strictly increasing index invariant.
    pub fn push(&mut self, rec: IterateRecord) -> Result<()> {
        if let Some(last) = self.records.last() {
            if rec.k <= last.k {
                return Err(Error::TraceData(format!(
                    "record index {} does not increase past {}",
                    rec.k, last.k
                )));
            }
        }
        if !rec.f_val.is_finite() {
            return Err(Error::TraceData(format!("non-finite f at k = {}", rec.k)));
        }
        self.records.push(rec);
        Ok(())
    }

    pub fn f_values(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.f_val).collect()
    }

    pub fn step_norms(&self) -> Vec<Option<f64>> {
        self.records.iter().map(|r| r.step_norm).collect()
    }
}

pub const CSV_HEADER: &str = "k,f_val,step_norm,slope_norm,a_k,b_k,eps_k,alpha_k,beta_k,region_flag";

fn fmt_opt(v: Option<f64>) -> String {
    // 17 significant digits: round-trips f64 exactly.
    match v {
        Some(x) => format!("{x:.16e}"),
        None => String::new(),
    }
}

fn parse_opt(s: &str, line: usize, col: &str) -> Result<Option<f64>> {
    let s = s.trim();
    if s.is_empty() {
        return Ok(None);
    }
    s.parse::<f64>()
        .map(Some)
        .map_err(|e| Error::TraceData(format!("line {line}, column {col}: {e}")))
}

/// Write the scalar trace as CSV (header + one row per record, 17 significant
/// digits, empty cells for absent values).
pub fn write_trace_csv<W: Write>(trace: &IterateTrace, mut out: W) -> Result<()> {
    writeln!(out, "{CSV_HEADER}").map_err(|e| Error::TraceData(e.to_string()))?;
    for r in &trace.records {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.k,
            fmt_opt(Some(r.f_val)),
            fmt_opt(r.step_norm),
            fmt_opt(r.slope_norm),
            fmt_opt(r.a_k),
            fmt_opt(r.b_k),
            fmt_opt(r.eps_k),
            fmt_opt(r.alpha_k),
            fmt_opt(r.beta_k),
            fmt_opt(r.region_flag),
        )
        .map_err(|e| Error::TraceData(e.to_string()))?;
    }
    Ok(())
}

pub fn save_trace_csv(trace: &IterateTrace, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)
        .map_err(|e| Error::TraceData(format!("create {}: {e}", path.display())))?;
    write_trace_csv(trace, std::io::BufWriter::new(file))
}

/// Read a scalar trace back. The terminal status is not part of the CSV; the
/// result carries `MaxIter` as a neutral placeholder unless the caller knows
/// better from the run summary.
pub fn read_trace_csv<R: BufRead>(input: R) -> Result<IterateTrace> {
    let mut lines = input.lines().enumerate();
    let header = match lines.next() {
        Some((_, Ok(h))) => h,
        Some((_, Err(e))) => return Err(Error::TraceData(e.to_string())),
        None => return Err(Error::TraceData("empty trace file".into())),
    };
    if header.trim() != CSV_HEADER {
        return Err(Error::TraceData(format!(
            "unexpected header: {:?} (want {CSV_HEADER:?})",
            header.trim()
        )));
    }
    let mut trace = IterateTrace::new(TerminalStatus::MaxIter);
    for (idx, line) in lines {
        let line = line.map_err(|e| Error::TraceData(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != 10 {
            return Err(Error::TraceData(format!(
                "line {}: expected 10 columns, got {}",
                idx + 1,
                cells.len()
            )));
        }
        let lineno = idx + 1;
        let k: usize = cells[0]
            .trim()
            .parse()
            .map_err(|e| Error::TraceData(format!("line {lineno}, column k: {e}")))?;
        let f_val = parse_opt(cells[1], lineno, "f_val")?
            .ok_or_else(|| Error::TraceData(format!("line {lineno}: f_val is mandatory")))?;
        trace.push(IterateRecord {
            k,
            f_val,
            step_norm: parse_opt(cells[2], lineno, "step_norm")?,
            slope_norm: parse_opt(cells[3], lineno, "slope_norm")?,
            a_k: parse_opt(cells[4], lineno, "a_k")?,
            b_k: parse_opt(cells[5], lineno, "b_k")?,
            eps_k: parse_opt(cells[6], lineno, "eps_k")?,
            alpha_k: parse_opt(cells[7], lineno, "alpha_k")?,
            beta_k: parse_opt(cells[8], lineno, "beta_k")?,
            region_flag: parse_opt(cells[9], lineno, "region_flag")?,
        })?;
    }
    if trace.is_empty() {
        return Err(Error::TraceData("trace has a header but no records".into()));
    }
    Ok(trace)
}

pub fn load_trace_csv(path: &Path) -> Result<IterateTrace> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::TraceData(format!("open {}: {e}", path.display())))?;
    read_trace_csv(std::io::BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_trace() -> IterateTrace {
        let mut t = IterateTrace::new(TerminalStatus::Converged);
        t.push(IterateRecord::initial(4.0)).unwrap();
        t.push(IterateRecord {
            k: 1,
            f_val: 2.5,
            step_norm: Some(1.0),
            slope_norm: Some(0.3),
            a_k: Some(1.0),
            b_k: Some(0.5),
            eps_k: Some(0.0),
            alpha_k: Some(2.0),
            beta_k: Some(3.0),
            region_flag: Some(1.0),
        })
        .unwrap();
        t.push(IterateRecord {
            k: 2,
            f_val: 2.0 + 1e-17, // exercises 17-digit round-trip
            step_norm: Some(0.5),
            slope_norm: None,
            a_k: Some(1.0),
            b_k: Some(0.5),
            eps_k: None,
            alpha_k: None,
            beta_k: None,
            region_flag: None,
        })
        .unwrap();
        t
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let t = sample_trace();
        let mut buf = Vec::new();
        write_trace_csv(&t, &mut buf).unwrap();
        let back = read_trace_csv(&buf[..]).unwrap();
        assert_eq!(back.records, t.records);
    }

    #[test]
    fn csv_writer_is_deterministic() {
        let t = sample_trace();
        let mut a = Vec::new();
        let mut b = Vec::new();
        write_trace_csv(&t, &mut a).unwrap();
        write_trace_csv(&t, &mut b).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn indices_must_increase() {
        let mut t = IterateTrace::new(TerminalStatus::MaxIter);
        t.push(IterateRecord::initial(1.0)).unwrap();
        let mut dup = IterateRecord::initial(0.5);
        dup.k = 0;
        assert!(t.push(dup).is_err());
    }

    #[test]
    fn non_finite_f_rejected() {
        let mut t = IterateTrace::new(TerminalStatus::MaxIter);
        assert!(t.push(IterateRecord::initial(f64::NAN)).is_err());
    }

    #[test]
    fn reader_rejects_bad_shapes() {
        assert!(read_trace_csv(&b""[..]).is_err());
        let wrong_header = b"k,f\n0,1.0\n";
        assert!(read_trace_csv(&wrong_header[..]).is_err());
        let short_row = format!("{CSV_HEADER}\n0,1.0,,,\n");
        assert!(read_trace_csv(short_row.as_bytes()).is_err());
        let no_rows = format!("{CSV_HEADER}\n");
        assert!(read_trace_csv(no_rows.as_bytes()).is_err());
    }
}
