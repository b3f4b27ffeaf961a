//! Attention sparsity measurements and per-epoch run logging.
//!
//! Sparsity is reported as negative Shannon entropy (natural log) of each
//! attention row, so higher values mean more concentrated attention and a
//! one-hot row scores 0.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::attention::AttentionMask;
use crate::error::{Result, VqdError};
use crate::numerics::Tensor;

const STOCHASTIC_TOL: f64 = 1e-9;

fn check_row(row: usize, sum: f64) -> Result<()> {
    if (sum - 1.0).abs() > STOCHASTIC_TOL {
        return Err(VqdError::NotStochastic { row, sum });
    }
    Ok(())
}

/// Mean over rows of `sum_j A[i,j] ln A[i,j]`, with `0 ln 0 = 0`. When a
/// mask is given only allowed columns are summed.
pub fn attention_negative_entropy(attn: &Tensor, mask: Option<&AttentionMask>) -> Result<f64> {
    let (rows, cols) = attn.dims2();
    if let Some(m) = mask {
        if m.size() != rows || m.size() != cols {
            return Err(VqdError::Dimension(format!("mask of size {} for a {rows}x{cols} map", m.size())));
        }
    }
    if rows == 0 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for i in 0..rows {
        let (mut sum, mut neg_h) = (0.0, 0.0);
        for (j, &p) in attn.row(i).iter().enumerate() {
            if mask.is_some_and(|m| !m.allows(i, j)) {
                continue;
            }
            sum += p;
            if p > 0.0 {
                neg_h += p * p.ln();
            }
        }
        check_row(i, sum)?;
        total += neg_h;
    }
    Ok(total / rows as f64)
}

/// Mean over noisy rows of the attention placed on the `N` learnable
/// columns. Returns 0 when there are no noisy rows.
pub fn noisy_to_learnable_mass(attn: &Tensor, num_learnable: usize, num_objects: usize, num_noisy_groups: usize) -> Result<f64> {
    let s = num_learnable + num_objects * num_noisy_groups;
    if attn.dims2() != (s, s) {
        return Err(VqdError::Dimension(format!("map of shape {:?}, expected {s}x{s}", attn.shape())));
    }
    let noisy = s - num_learnable;
    if noisy == 0 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for i in num_learnable..s {
        total += attn.row(i)[..num_learnable].iter().sum::<f64>();
    }
    Ok(total / noisy as f64)
}

/// One row of a run's metrics. Wall time is kept out of `metrics.csv` so
/// that file stays byte-reproducible; see [`write_timing_csv`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub neg_entropy: f64,
    pub noisy_learnable_mass: f64,
    pub loss_det: f64,
    pub loss_dn: f64,
    pub loss_res: f64,
    pub loss_kl: f64,
    pub loss_distill: f64,
    pub val_ap40: f64,
    pub wall_time_s: f64,
}

pub const CSV_HEADER: &str =
    "epoch,neg_entropy,noisy_learnable_mass,loss_det,loss_dn,loss_res,loss_kl,loss_distill,val_ap40";

/// Six significant digits, shortest spelling.
pub fn format_sig6(v: f64) -> String {
    if !v.is_finite() {
        return format!("{v}");
    }
    let rounded: f64 = format!("{v:.5e}").parse().expect("float literal");
    format!("{rounded}")
}

impl EpochRecord {
    fn csv_row(&self) -> String {
        let vals = [
            self.neg_entropy,
            self.noisy_learnable_mass,
            self.loss_det,
            self.loss_dn,
            self.loss_res,
            self.loss_kl,
            self.loss_distill,
            self.val_ap40,
        ];
        let mut s = self.epoch.to_string();
        for v in vals {
            s.push(',');
            s.push_str(&format_sig6(v));
        }
        s
    }

    fn parse_row(line: &str, line_no: usize) -> Result<Self> {
        let err = |msg: String| VqdError::Parse { line: line_no, msg };
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 9 {
            return Err(err(format!("expected 9 fields, found {}", fields.len())));
        }
        let epoch = fields[0].parse().map_err(|e| err(format!("epoch: {e}")))?;
        let mut v = [0.0; 8];
        for (slot, f) in v.iter_mut().zip(&fields[1..]) {
            *slot = f.parse().map_err(|e| err(format!("`{f}`: {e}")))?;
        }
        Ok(Self {
            epoch,
            neg_entropy: v[0],
            noisy_learnable_mass: v[1],
            loss_det: v[2],
            loss_dn: v[3],
            loss_res: v[4],
            loss_kl: v[5],
            loss_distill: v[6],
            val_ap40: v[7],
            wall_time_s: 0.0,
        })
    }
}

pub fn write_run_csv(records: &[EpochRecord], path: &Path) -> Result<()> {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Appends one record, writing the header first if the file is new.
pub fn append_run_csv(record: &EpochRecord, path: &Path) -> Result<()> {
    let fresh = !path.exists() || std::fs::metadata(path)?.len() == 0;
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    if fresh {
        writeln!(f, "{CSV_HEADER}")?;
    }
    writeln!(f, "{}", record.csv_row())?;
    Ok(())
}

pub fn read_run_csv(path: &Path) -> Result<Vec<EpochRecord>> {
    let r = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if i == 0 {
            if line.trim() != CSV_HEADER {
                return Err(VqdError::Parse { line: 1, msg: "unexpected header".into() });
            }
            continue;
        }
        if !line.trim().is_empty() {
            out.push(EpochRecord::parse_row(line.trim(), i + 1)?);
        }
    }
    Ok(out)
}

pub fn write_timing_csv(records: &[EpochRecord], path: &Path) -> Result<()> {
    let mut out = String::from("epoch,wall_time_s\n");
    for r in records {
        let _ = writeln!(out, "{},{:.3}", r.epoch, r.wall_time_s);
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Side-by-side entropy and mass trends of several runs, followed by a line
/// naming the run with the highest final-epoch sparsity value.
pub fn trend_table(runs: &[(String, Vec<EpochRecord>)]) -> String {
    let mut out = String::from("epoch");
    for (name, _) in runs {
        let _ = write!(out, "\t{name}:neg_entropy\t{name}:mass");
    }
    out.push('\n');
    let epochs = runs.iter().map(|r| r.1.len()).max().unwrap_or(0);
    for e in 0..epochs {
        let epoch = runs.iter().find_map(|r| r.1.get(e)).map_or(e, |r| r.epoch);
        let _ = write!(out, "{epoch}");
        for (_, recs) in runs {
            match recs.get(e) {
                Some(r) => {
                    let _ = write!(out, "\t{}\t{}", format_sig6(r.neg_entropy), format_sig6(r.noisy_learnable_mass));
                }
                None => out.push_str("\t-\t-"),
            }
        }
        out.push('\n');
    }
    let finals: Vec<(&str, &EpochRecord)> =
        runs.iter().filter_map(|(n, r)| r.last().map(|last| (n.as_str(), last))).collect();
    if let Some((name, rec)) = finals.iter().fold(None::<(&str, &EpochRecord)>, |best, &(n, r)| match best {
        Some((_, b)) if b.neg_entropy >= r.neg_entropy => best,
        _ => Some((n, r)),
    }) {
        let _ = writeln!(out, "sparsest final epoch: {name} (neg_entropy={})", format_sig6(rec.neg_entropy));
    }
    out
}
