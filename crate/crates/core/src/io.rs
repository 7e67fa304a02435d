//! CSV artifacts: Riccati solution caches, monitor series and trajectory
//! summaries. Floats use 17 significant digits; every file starts with a
//! `# config_hash=…,seed=…` line.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::kernel::{MatrixField, MatrixKernel, ScalarField, VectorField};
use crate::model::ProblemSpec;
use crate::riccati::{RiccatiSolution, Scheme};
use crate::simulator::QuantileRow;

pub const K_FILE: &str = "K.csv";
pub const KBAR_FILE: &str = "Kbar.csv";
pub const Y_FILE: &str = "Y.csv";
pub const LAMBDA_FILE: &str = "Lambda.csv";
pub const MONITOR_FILE: &str = "monitor.csv";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
}

impl Provenance {
    pub fn line(&self) -> String {
        format!("# config_hash={},seed={}", self.config_hash, self.seed)
    }
}

pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn writer(path: &Path, prov: &Provenance) -> Result<csv::Writer<BufWriter<File>>> {
    let mut f = BufWriter::new(File::create(path)?);
    writeln!(f, "{}", prov.line())?;
    Ok(csv::Writer::from_writer(f))
}

fn write_rows(
    path: &Path,
    prov: &Provenance,
    header: &[String],
    rows: impl Iterator<Item = Vec<String>>,
) -> Result<()> {
    let mut w = writer(path, prov)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.flush()?;
    Ok(())
}

fn entry_names(prefix: &str, rows: usize, cols: usize) -> Vec<String> {
    (0..rows)
        .flat_map(|i| (0..cols).map(move |j| format!("{prefix}_{i}{j}")))
        .collect()
}

/// Writes `K.csv`, `Kbar.csv`, `Y.csv`, `Lambda.csv` and `monitor.csv`.
pub fn write_riccati(dir: &Path, sol: &RiccatiSolution, prov: &Provenance) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let times = sol.tgrid.times();
    let grid = sol.grid();
    let n = grid.len();
    let (d, _) = sol.k[0].shape();

    let mut header = vec!["knot".to_string(), "t".into(), "label".into()];
    header.extend(entry_names("k", d, d));
    write_rows(
        &dir.join(K_FILE),
        prov,
        &header,
        sol.k.iter().enumerate().flat_map(|(knot, k)| {
            let t = times[knot];
            (0..n).map(move |u| {
                let mut r = vec![knot.to_string(), fmt_f64(t), u.to_string()];
                let m = &k[u];
                r.extend((0..d).flat_map(|i| (0..d).map(move |j| fmt_f64(m[(i, j)]))));
                r
            })
        }),
    )?;

    let mut header = vec!["knot".to_string(), "t".into(), "i".into(), "j".into()];
    header.extend(entry_names("e", d, d));
    write_rows(
        &dir.join(KBAR_FILE),
        prov,
        &header,
        sol.kbar.iter().enumerate().flat_map(|(knot, kb)| {
            let t = times[knot];
            (0..n).flat_map(move |i| {
                (0..n).map(move |j| {
                    let mut r = vec![knot.to_string(), fmt_f64(t), i.to_string(), j.to_string()];
                    let b = &kb.block(i, j);
                    r.extend((0..d).flat_map(|p| (0..d).map(move |q| fmt_f64(b[(p, q)]))));
                    r
                })
            })
        }),
    )?;

    let mut header = vec!["knot".to_string(), "t".into(), "label".into()];
    header.extend((0..d).map(|j| format!("y_{j}")));
    write_rows(
        &dir.join(Y_FILE),
        prov,
        &header,
        sol.y.iter().enumerate().flat_map(|(knot, y)| {
            let t = times[knot];
            (0..n).map(move |u| {
                let mut r = vec![knot.to_string(), fmt_f64(t), u.to_string()];
                r.extend(y[u].iter().map(|v| fmt_f64(*v)));
                r
            })
        }),
    )?;

    let header: Vec<String> = ["knot", "t", "label", "lambda"].map(String::from).to_vec();
    write_rows(
        &dir.join(LAMBDA_FILE),
        prov,
        &header,
        sol.lambda.iter().enumerate().flat_map(|(knot, l)| {
            let t = times[knot];
            (0..n).map(move |u| vec![knot.to_string(), fmt_f64(t), u.to_string(), fmt_f64(l[u])])
        }),
    )?;

    let header: Vec<String> = ["t", "kbar_op_norm", "min_eig_k", "min_eig_o"]
        .map(String::from)
        .to_vec();
    write_rows(
        &dir.join(MONITOR_FILE),
        prov,
        &header,
        sol.monitor.iter().map(|m| {
            vec![
                fmt_f64(m.t),
                fmt_f64(m.kbar_norm),
                fmt_f64(m.min_eig_k),
                fmt_f64(m.min_eig_o),
            ]
        }),
    )
}

struct Table {
    path: String,
    rows: Vec<Vec<f64>>,
}

fn read_table(path: &Path, n_cols: usize) -> Result<Table> {
    let name = path.display().to_string();
    let corrupted = |reason: String| Error::Corrupted {
        path: name.clone(),
        reason,
    };
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| corrupted(e.to_string()))?;
    let mut rows = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| corrupted(e.to_string()))?;
        if rec.len() != n_cols {
            return Err(corrupted(format!(
                "row {line}: expected {n_cols} fields, found {}",
                rec.len()
            )));
        }
        let vals = rec
            .iter()
            .map(|s| match s.trim().parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(corrupted(format!("row {line}: bad number '{s}'"))),
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(vals);
    }
    Ok(Table { path: name, rows })
}

impl Table {
    fn expect_rows(&self, n: usize) -> Result<()> {
        if self.rows.len() != n {
            return Err(Error::Corrupted {
                path: self.path.clone(),
                reason: format!("expected {n} rows, found {}", self.rows.len()),
            });
        }
        Ok(())
    }
}

/// Reads a cache written by [`write_riccati`] for the given problem and rebuilds the
/// feedback caches. Missing, truncated or non-numeric files are reported as
/// corrupted.
pub fn read_riccati(dir: &Path, spec: &ProblemSpec, scheme: Scheme) -> Result<RiccatiSolution> {
    let grid = spec.grid;
    let n = grid.len();
    let d = spec.state_dim;
    let knots = spec.tgrid.n_knots();

    let k_tab = read_table(&dir.join(K_FILE), 3 + d * d)?;
    k_tab.expect_rows(knots * n)?;
    let kbar_tab = read_table(&dir.join(KBAR_FILE), 4 + d * d)?;
    kbar_tab.expect_rows(knots * n * n)?;
    let y_tab = read_table(&dir.join(Y_FILE), 3 + d)?;
    y_tab.expect_rows(knots * n)?;
    let l_tab = read_table(&dir.join(LAMBDA_FILE), 4)?;
    l_tab.expect_rows(knots * n)?;

    let k = (0..knots)
        .map(|knot| {
            MatrixField::new(
                grid,
                (0..n)
                    .map(|u| {
                        let r = &k_tab.rows[knot * n + u];
                        DMatrix::from_row_slice(d, d, &r[3..])
                    })
                    .collect(),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let kbar = (0..knots)
        .map(|knot| {
            MatrixKernel::from_blocks(grid, d, d, |i, j| {
                let r = &kbar_tab.rows[knot * n * n + i * n + j];
                DMatrix::from_row_slice(d, d, &r[4..])
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let y = (0..knots)
        .map(|knot| {
            VectorField::new(
                grid,
                (0..n)
                    .map(|u| DVector::from_column_slice(&y_tab.rows[knot * n + u][3..]))
                    .collect(),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let lambda = (0..knots)
        .map(|knot| ScalarField::new(grid, (0..n).map(|u| l_tab.rows[knot * n + u][3]).collect()))
        .collect::<Result<Vec<_>>>()?;
    RiccatiSolution::from_paths(spec, scheme, k, kbar, y, Some(lambda)).map_err(|e| match e {
        Error::CoercivityLost { .. } | Error::NonFinite { .. } | Error::Dimension { .. } => {
            Error::Corrupted {
                path: dir.display().to_string(),
                reason: e.to_string(),
            }
        }
        other => other,
    })
}

pub fn write_quantiles(path: &Path, rows: &[QuantileRow], prov: &Provenance) -> Result<()> {
    let header: Vec<String> = ["t", "label", "variable", "component", "mean", "q05", "q95"]
        .map(String::from)
        .to_vec();
    write_rows(
        path,
        prov,
        &header,
        rows.iter().map(|r| {
            vec![
                fmt_f64(r.t),
                r.label.to_string(),
                r.variable.to_string(),
                r.component.to_string(),
                fmt_f64(r.mean),
                fmt_f64(r.q05),
                fmt_f64(r.q95),
            ]
        }),
    )
}

/// Flat JSON object written with a trailing newline.
pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut f, value)?;
    writeln!(f)?;
    f.flush()?;
    Ok(())
}
