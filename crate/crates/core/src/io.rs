//! CSV files for observed tables and simulation ground truth.
//!
//! Data files carry the header `L1..Lp,Z1..Zq,W1..Wr,A,Y`; ground truth
//! files carry `U,mu_Y,prop_true,mu_plus,mu_minus`. Row numbers in parse
//! errors count data rows from 1.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::data::{Arm, SampleTable};
use crate::error::{Error, Result};
use crate::evaluate::GroundTruth;

pub fn table_header(table: &SampleTable) -> Vec<String> {
    let mut h = Vec::new();
    for (prefix, k) in [("L", table.l().ncols()), ("Z", table.z().ncols()), ("W", table.w().ncols())] {
        h.extend((1..=k).map(|j| format!("{prefix}{j}")));
    }
    h.push("A".into());
    h.push("Y".into());
    h
}

pub fn write_table<W: Write>(out: W, table: &SampleTable) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(table_header(table))?;
    let mut rec = Vec::new();
    for i in 0..table.n() {
        rec.clear();
        for block in [table.l(), table.z(), table.w()] {
            rec.extend(block.row(i).iter().map(|v| v.to_string()));
        }
        rec.push(if table.a()[i].is_treated() { "1".into() } else { "-1".into() });
        rec.push(table.y()[i].to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_table_file(path: &Path, table: &SampleTable) -> Result<()> {
    write_table(File::create(path)?, table)
}

fn parse_cell(raw: &str, row: usize, column: &str) -> Result<f64> {
    let v: f64 = raw.trim().parse().map_err(|_| Error::Parse {
        row,
        column: column.into(),
        message: format!("{raw:?} is not a number"),
    })?;
    if !v.is_finite() {
        return Err(Error::Parse { row, column: column.into(), message: format!("{raw:?} is not finite") });
    }
    Ok(v)
}

fn block_columns(header: &[String], prefix: char) -> Result<Vec<usize>> {
    let mut found: Vec<(usize, usize)> = header
        .iter()
        .enumerate()
        .filter_map(|(pos, name)| {
            let rest = name.strip_prefix(prefix)?;
            rest.parse::<usize>().ok().map(|k| (k, pos))
        })
        .collect();
    found.sort_unstable();
    if found.is_empty() {
        return Err(Error::Parse { row: 0, column: format!("{prefix}1"), message: "missing column".into() });
    }
    for (expect, (k, _)) in (1..).zip(&found) {
        if *k != expect {
            return Err(Error::Parse { row: 0, column: format!("{prefix}{expect}"), message: "missing column".into() });
        }
    }
    Ok(found.into_iter().map(|(_, pos)| pos).collect())
}

/// Reads a data file; columns may come in any order.
pub fn read_table<R: std::io::Read>(input: R) -> Result<SampleTable> {
    let mut r = csv::Reader::from_reader(input);
    let header: Vec<String> = r.headers()?.iter().map(|s| s.trim().to_string()).collect();
    let (lc, zc, wc) = (block_columns(&header, 'L')?, block_columns(&header, 'Z')?, block_columns(&header, 'W')?);
    let find = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Parse { row: 0, column: name.into(), message: "missing column".into() })
    };
    let (ac, yc) = (find("A")?, find("Y")?);
    let (mut l, mut z, mut w, mut a, mut y) = (Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (idx, rec) in r.records().enumerate() {
        let row = idx + 1;
        let rec = rec?;
        if rec.len() != header.len() {
            return Err(Error::Parse {
                row,
                column: "*".into(),
                message: format!("expected {} fields, found {}", header.len(), rec.len()),
            });
        }
        for (cols, dst) in [(&lc, &mut l), (&zc, &mut z), (&wc, &mut w)] {
            for &c in cols {
                dst.push(parse_cell(&rec[c], row, &header[c])?);
            }
        }
        let code = parse_cell(&rec[ac], row, "A")?;
        a.push(Arm::from_code(code).ok_or_else(|| Error::Parse {
            row,
            column: "A".into(),
            message: format!("treatment must be 1 or -1, got {}", rec[ac].trim()),
        })?);
        y.push(parse_cell(&rec[yc], row, "Y")?);
    }
    let n = a.len();
    if n == 0 {
        return Err(Error::DegenerateData("data file has no rows".into()));
    }
    SampleTable::new(
        DMatrix::from_row_slice(n, lc.len(), &l),
        DMatrix::from_row_slice(n, zc.len(), &z),
        DMatrix::from_row_slice(n, wc.len(), &w),
        a,
        DVector::from_vec(y),
    )
}

pub fn read_table_file(path: &Path) -> Result<SampleTable> {
    read_table(File::open(path)?)
}

pub const TRUTH_HEADER: [&str; 5] = ["U", "mu_Y", "prop_true", "mu_plus", "mu_minus"];

pub fn write_truth<W: Write>(out: W, u: &[f64], truth: &GroundTruth) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(TRUTH_HEADER)?;
    let n = truth.mu_y.len();
    let na = |v: &Option<Vec<f64>>, i: usize| v.as_ref().map_or_else(|| "".to_string(), |v| v[i].to_string());
    for i in 0..n {
        w.write_record([
            u.get(i).map_or_else(String::new, |v| v.to_string()),
            truth.mu_y[i].to_string(),
            truth.prop_treated[i].to_string(),
            na(&truth.mu_treated, i),
            na(&truth.mu_control, i),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_truth_file(path: &Path, u: &[f64], truth: &GroundTruth) -> Result<()> {
    write_truth(File::create(path)?, u, truth)
}

/// Reads a ground truth file. `noise_free` records whether the matching
/// data file holds conditional means as outcomes.
pub fn read_truth<R: std::io::Read>(input: R, noise_free: bool) -> Result<GroundTruth> {
    let mut r = csv::Reader::from_reader(input);
    let header: Vec<String> = r.headers()?.iter().map(|s| s.trim().to_string()).collect();
    let pos = |name: &str| header.iter().position(|h| h == name);
    let (Some(my), Some(pt)) = (pos("mu_Y"), pos("prop_true")) else {
        return Err(Error::ContractViolation("ground truth needs mu_Y and prop_true columns".into()));
    };
    let (mp, mm) = (pos("mu_plus"), pos("mu_minus"));
    let mut truth = GroundTruth {
        prop_treated: Vec::new(),
        mu_y: Vec::new(),
        mu_treated: mp.map(|_| Vec::new()),
        mu_control: mm.map(|_| Vec::new()),
        noise_free,
    };
    for (idx, rec) in r.records().enumerate() {
        let row = idx + 1;
        let rec = rec?;
        truth.mu_y.push(parse_cell(&rec[my], row, "mu_Y")?);
        let p = parse_cell(&rec[pt], row, "prop_true")?;
        if !(p > 0.0 && p < 1.0) {
            return Err(Error::Parse { row, column: "prop_true".into(), message: format!("{p} is not in (0, 1)") });
        }
        truth.prop_treated.push(p);
        for (col, dst, name) in [(mp, &mut truth.mu_treated, "mu_plus"), (mm, &mut truth.mu_control, "mu_minus")] {
            if let (Some(c), Some(v)) = (col, dst.as_mut()) {
                v.push(parse_cell(&rec[c], row, name)?);
            }
        }
    }
    Ok(truth)
}

pub fn read_truth_file(path: &Path, noise_free: bool) -> Result<GroundTruth> {
    read_truth(File::open(path)?, noise_free)
}
