//! Named graphons and tabulated kernels.

use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{LabelGrid, MatrixKernel};

/// A scalar interaction profile `g(u, v)` on `[0, 1]²`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Graphon {
    Zero,
    Constant {
        value: f64,
    },
    /// Stochastic block model: `blocks[a][b]` on the cell pair `(a, b)`.
    /// `cuts` are the interior block boundaries; equal-width blocks if omitted.
    Step {
        blocks: Vec<Vec<f64>>,
        #[serde(default)]
        cuts: Option<Vec<f64>>,
    },
    Min,
    /// `exp(−|u − v| / length)`.
    Exp {
        length: f64,
    },
}

impl Graphon {
    pub fn eval(&self, u: f64, v: f64) -> f64 {
        match self {
            Graphon::Zero => 0.0,
            Graphon::Constant { value } => *value,
            Graphon::Step { blocks, cuts } => {
                let a = block_index(u, blocks.len(), cuts.as_deref());
                let b = block_index(v, blocks.len(), cuts.as_deref());
                blocks[a][b]
            }
            Graphon::Min => u.min(v),
            Graphon::Exp { length } => (-(u - v).abs() / length).exp(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Graphon::Step { blocks, cuts } => {
                let n = blocks.len();
                if n == 0 || blocks.iter().any(|r| r.len() != n) {
                    return Err(Error::Config(
                        "step graphon needs a square block matrix".into(),
                    ));
                }
                if let Some(c) = cuts {
                    if c.len() + 1 != n
                        || c.windows(2).any(|w| w[0] >= w[1])
                        || c.iter().any(|&x| !(0.0..=1.0).contains(&x))
                    {
                        return Err(Error::Config(
                            "step graphon cuts must be increasing in [0,1], one fewer than blocks"
                                .into(),
                        ));
                    }
                }
                Ok(())
            }
            Graphon::Exp { length } if *length <= 0.0 => {
                Err(Error::Config("exp graphon length must be positive".into()))
            }
            _ => Ok(()),
        }
    }

    /// Samples `g(u_i, u_j) · block` on the grid.
    pub fn to_kernel(&self, grid: LabelGrid, block: &DMatrix<f64>) -> Result<MatrixKernel> {
        self.validate()?;
        Ok(MatrixKernel::from_graphon(grid, block, |u, v| {
            self.eval(u, v)
        }))
    }

    /// Scalar (1×1) kernel.
    pub fn to_scalar_kernel(&self, grid: LabelGrid) -> Result<MatrixKernel> {
        self.to_kernel(grid, &DMatrix::identity(1, 1))
    }
}

pub(crate) fn block_index(x: f64, n: usize, cuts: Option<&[f64]>) -> usize {
    match cuts {
        Some(c) => c.iter().take_while(|&&cut| x >= cut).count(),
        None => ((x * n as f64).floor() as usize).min(n - 1),
    }
}

/// Reads a tabulated kernel: one row per `(i, j)` pair with columns
/// `i, j, e_00, e_01, …` (block entries in row-major order). Lines starting
/// with `#` are ignored; a header row is expected.
pub fn load_kernel_csv(
    path: &Path,
    grid: LabelGrid,
    rows: usize,
    cols: usize,
) -> Result<MatrixKernel> {
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path)?;
    let n = grid.len();
    let mut data = DMatrix::zeros(n * rows, n * cols);
    let mut seen = vec![false; n * n];
    let corrupted = |reason: String| Error::Corrupted {
        path: path.display().to_string(),
        reason,
    };
    for record in reader.records() {
        let record = record?;
        if record.len() != 2 + rows * cols {
            return Err(corrupted(format!(
                "expected {} columns, found {}",
                2 + rows * cols,
                record.len()
            )));
        }
        let parse = |k: usize| -> Result<f64> {
            record[k]
                .parse::<f64>()
                .map_err(|e| corrupted(format!("column {k}: {e}")))
        };
        let i: usize = record[0]
            .parse()
            .map_err(|e| corrupted(format!("row index: {e}")))?;
        let j: usize = record[1]
            .parse()
            .map_err(|e| corrupted(format!("column index: {e}")))?;
        if i >= n || j >= n {
            return Err(corrupted(format!(
                "index ({i}, {j}) outside a {n}-node grid"
            )));
        }
        for r in 0..rows {
            for c in 0..cols {
                data[(i * rows + r, j * cols + c)] = parse(2 + r * cols + c)?;
            }
        }
        seen[i * n + j] = true;
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(corrupted(format!(
            "missing block ({}, {})",
            missing / n,
            missing % n
        )));
    }
    MatrixKernel::from_dense(grid, rows, cols, data)
}
