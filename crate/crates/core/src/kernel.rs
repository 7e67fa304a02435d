//! Discretized calculus on `L²(I; ℝ^d)` and `L²(I×I; ℝ^{r×c})` for the label
//! space `I = [0, 1]`.
//!
//! Labels sit at cell midpoints `u_i = (i + 1/2)/N` and every `∫_I dv` becomes
//! a midpoint sum with weight `h = 1/N`. A kernel is stored as one dense
//! `(N·r) × (N·c)` matrix whose `(i, j)` block is `K(u_i, u_j)`, so that
//!
//! * `T_K f = h · M f`,
//! * `K ∘ W = h · M_K M_W`,
//! * `K* = M_Kᵀ`,
//! * `‖T_K‖ = h · σ_max(M_K)` and `‖K‖_{L²} = h · ‖M_K‖_F`.

use nalgebra::{DMatrix, DVector};

use crate::error::{ensure_same_grid, Error, Result};

/// Absolute per-entry tolerance used when a kernel is flagged symmetric.
pub const SYMMETRY_TOL: f64 = 1e-10;

/// Power-iteration defaults for [`MatrixKernel::operator_norm`].
pub const NORM_TOL: f64 = 1e-10;
pub const NORM_MAX_ITER: usize = 10_000;

/// Uniform midpoint discretization of the label set `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct LabelGrid {
    n: usize,
}

impl LabelGrid {
    pub fn new(n_labels: usize) -> Result<Self> {
        if n_labels == 0 {
            return Err(Error::InvalidParameter(
                "label grid needs at least one node".into(),
            ));
        }
        Ok(Self { n: n_labels })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Quadrature weight `h = 1/N` carried by every node.
    pub fn weight(&self) -> f64 {
        1.0 / self.n as f64
    }

    pub fn node(&self, i: usize) -> f64 {
        (i as f64 + 0.5) / self.n as f64
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.node(i)).collect()
    }

    pub(crate) fn ensure_same(&self, other: &LabelGrid) -> Result<()> {
        ensure_same_grid(self.n, other.n)
    }
}

/// Values that can be checked for NaN/Inf.
pub trait Finite {
    fn is_all_finite(&self) -> bool;
}

impl Finite for f64 {
    fn is_all_finite(&self) -> bool {
        self.is_finite()
    }
}

impl Finite for DVector<f64> {
    fn is_all_finite(&self) -> bool {
        self.iter().all(|x| x.is_finite())
    }
}

impl Finite for DMatrix<f64> {
    fn is_all_finite(&self) -> bool {
        self.iter().all(|x| x.is_finite())
    }
}

/// A function on the label grid: one value per node.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelField<T> {
    grid: LabelGrid,
    values: Vec<T>,
}

pub type ScalarField = LabelField<f64>;
pub type VectorField = LabelField<DVector<f64>>;
pub type MatrixField = LabelField<DMatrix<f64>>;

impl<T> LabelField<T> {
    pub fn new(grid: LabelGrid, values: Vec<T>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::Dimension {
                context: "label field length",
                expected: grid.len(),
                got: values.len(),
            });
        }
        Ok(Self { grid, values })
    }

    /// Builds a field from `f(i, u_i)`.
    pub fn from_fn(grid: LabelGrid, mut f: impl FnMut(usize, f64) -> T) -> Self {
        let values = (0..grid.len()).map(|i| f(i, grid.node(i))).collect();
        Self { grid, values }
    }

    pub fn grid(&self) -> LabelGrid {
        self.grid
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn iter(&self) -> std::slice::Iter<'_, T> {
        self.values.iter()
    }

    pub fn map<S>(&self, f: impl FnMut(&T) -> S) -> LabelField<S> {
        LabelField {
            grid: self.grid,
            values: self.values.iter().map(f).collect(),
        }
    }

    /// Pointwise combination of two fields on the same grid.
    pub fn zip_map<S, R>(
        &self,
        other: &LabelField<S>,
        mut f: impl FnMut(&T, &S) -> R,
    ) -> Result<LabelField<R>> {
        self.grid.ensure_same(&other.grid)?;
        Ok(LabelField {
            grid: self.grid,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| f(a, b))
                .collect(),
        })
    }
}

impl<T: Clone> LabelField<T> {
    pub fn constant(grid: LabelGrid, value: T) -> Self {
        Self {
            grid,
            values: vec![value; grid.len()],
        }
    }
}

impl<T: Finite> LabelField<T> {
    pub fn check_finite(&self, context: &str) -> Result<()> {
        match self.values.iter().position(|v| !v.is_all_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::NonFinite {
                context: format!("{context} (label {i})"),
            }),
        }
    }
}

impl<T> std::ops::Index<usize> for LabelField<T> {
    type Output = T;

    fn index(&self, i: usize) -> &T {
        &self.values[i]
    }
}

impl ScalarField {
    /// `∫_I f(u) du` by the midpoint rule.
    pub fn integral(&self) -> f64 {
        self.grid.weight() * self.values.iter().sum::<f64>()
    }
}

impl VectorField {
    pub fn zeros(grid: LabelGrid, dim: usize) -> Self {
        Self::constant(grid, DVector::zeros(dim))
    }

    pub fn dim(&self) -> usize {
        self.values.first().map_or(0, |v| v.len())
    }

    /// Stacks the label values into one `N·d` vector.
    pub fn to_flat(&self) -> DVector<f64> {
        let d = self.dim();
        let mut out = DVector::zeros(self.len() * d);
        for (i, v) in self.values.iter().enumerate() {
            out.rows_mut(i * d, d).copy_from(v);
        }
        out
    }

    pub fn from_flat(grid: LabelGrid, dim: usize, flat: &DVector<f64>) -> Result<Self> {
        if flat.len() != grid.len() * dim {
            return Err(Error::Dimension {
                context: "flat label vector",
                expected: grid.len() * dim,
                got: flat.len(),
            });
        }
        Ok(Self::from_fn(grid, |i, _| {
            flat.rows(i * dim, dim).into_owned()
        }))
    }

    /// Weighted `L²(I; ℝ^d)` inner product.
    pub fn inner(&self, other: &VectorField) -> Result<f64> {
        self.grid.ensure_same(&other.grid)?;
        let s: f64 = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a.dot(b))
            .sum();
        Ok(self.grid.weight() * s)
    }

    pub fn norm(&self) -> f64 {
        let s: f64 = self.values.iter().map(|v| v.norm_squared()).sum();
        (self.grid.weight() * s).sqrt()
    }
}

impl MatrixField {
    pub fn zeros(grid: LabelGrid, rows: usize, cols: usize) -> Self {
        Self::constant(grid, DMatrix::zeros(rows, cols))
    }

    pub fn identity(grid: LabelGrid, dim: usize) -> Self {
        Self::constant(grid, DMatrix::identity(dim, dim))
    }

    pub fn shape(&self) -> (usize, usize) {
        self.values.first().map_or((0, 0), |m| m.shape())
    }

    /// Applies `u ↦ M[u]·f[u]`.
    pub fn mul_vectors(&self, f: &VectorField) -> Result<VectorField> {
        self.zip_map(f, |m, v| m * v)
    }

    pub fn transposed(&self) -> Self {
        self.map(|m| m.transpose())
    }
}

/// Discretized matrix-valued kernel on `I×I` with `rows × cols` blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct MatrixKernel {
    grid: LabelGrid,
    rows: usize,
    cols: usize,
    data: DMatrix<f64>,
}

/// Outcome of the power iteration for `‖T_K‖`.
#[derive(Clone, Debug)]
pub struct OperatorNorm {
    pub value: f64,
    pub converged: bool,
    pub iterations: usize,
    /// Last iterate (unit norm), reusable as a warm start.
    pub vector: DVector<f64>,
}

impl MatrixKernel {
    pub fn zeros(grid: LabelGrid, rows: usize, cols: usize) -> Self {
        Self {
            grid,
            rows,
            cols,
            data: DMatrix::zeros(grid.len() * rows, grid.len() * cols),
        }
    }

    /// Wraps an already assembled `(N·rows) × (N·cols)` matrix of kernel values.
    pub fn from_dense(
        grid: LabelGrid,
        rows: usize,
        cols: usize,
        data: DMatrix<f64>,
    ) -> Result<Self> {
        if data.nrows() != grid.len() * rows || data.ncols() != grid.len() * cols {
            return Err(Error::Dimension {
                context: "dense kernel shape",
                expected: grid.len() * grid.len() * rows * cols,
                got: data.nrows() * data.ncols(),
            });
        }
        Ok(Self {
            grid,
            rows,
            cols,
            data,
        })
    }

    /// Builds the kernel block by block from `f(i, j) ≈ K(u_i, u_j)`.
    pub fn from_blocks(
        grid: LabelGrid,
        rows: usize,
        cols: usize,
        mut f: impl FnMut(usize, usize) -> DMatrix<f64>,
    ) -> Result<Self> {
        let mut out = Self::zeros(grid, rows, cols);
        for i in 0..grid.len() {
            for j in 0..grid.len() {
                let b = f(i, j);
                if b.shape() != (rows, cols) {
                    return Err(Error::Dimension {
                        context: "kernel block",
                        expected: rows * cols,
                        got: b.len(),
                    });
                }
                out.data
                    .view_mut((i * rows, j * cols), (rows, cols))
                    .copy_from(&b);
            }
        }
        Ok(out)
    }

    /// Scalar graphon `g(u, v)` sampled at the nodes, times a fixed block.
    pub fn from_graphon(
        grid: LabelGrid,
        block: &DMatrix<f64>,
        g: impl Fn(f64, f64) -> f64,
    ) -> Self {
        let (rows, cols) = block.shape();
        let mut out = Self::zeros(grid, rows, cols);
        for i in 0..grid.len() {
            for j in 0..grid.len() {
                let w = g(grid.node(i), grid.node(j));
                out.data
                    .view_mut((i * rows, j * cols), (rows, cols))
                    .copy_from(&(block * w));
            }
        }
        out
    }

    /// Scalar (1×1) kernel from `g(u, v)`.
    pub fn scalar(grid: LabelGrid, g: impl Fn(f64, f64) -> f64) -> Self {
        Self::from_graphon(grid, &DMatrix::identity(1, 1), g)
    }

    pub fn grid(&self) -> LabelGrid {
        self.grid
    }

    pub fn block_shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn dense(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn block(&self, i: usize, j: usize) -> DMatrix<f64> {
        self.data
            .view((i * self.rows, j * self.cols), (self.rows, self.cols))
            .into_owned()
    }

    pub fn is_all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.amax()
    }

    /// `(T_K f)(u_i) = h Σ_j K(u_i, u_j) f(u_j)`.
    pub fn apply(&self, f: &VectorField) -> Result<VectorField> {
        self.grid.ensure_same(&f.grid())?;
        if f.dim() != self.cols {
            return Err(Error::Dimension {
                context: "apply_operator field dimension",
                expected: self.cols,
                got: f.dim(),
            });
        }
        let out = self.apply_flat(&f.to_flat());
        VectorField::from_flat(self.grid, self.rows, &out)
    }

    pub(crate) fn apply_flat(&self, f: &DVector<f64>) -> DVector<f64> {
        (&self.data * f) * self.grid.weight()
    }

    /// `K*(u, v) = K(v, u)ᵀ`.
    pub fn adjoint(&self) -> Self {
        Self {
            grid: self.grid,
            rows: self.cols,
            cols: self.rows,
            data: self.data.transpose(),
        }
    }

    /// `(K ∘ W)(u, v) = ∫_I K(u, w) W(w, v) dw`.
    pub fn compose(&self, other: &MatrixKernel) -> Result<Self> {
        self.grid.ensure_same(&other.grid)?;
        self.check_inner(other.rows)?;
        Ok(Self {
            grid: self.grid,
            rows: self.rows,
            cols: other.cols,
            data: (&self.data * &other.data) * self.grid.weight(),
        })
    }

    /// `(K ∘ L ∘ W)(u, v) = ∫_I K(u, w) L(w) W(w, v) dw`.
    pub fn mult_compose(&self, mid: &MatrixField, other: &MatrixKernel) -> Result<Self> {
        self.grid.ensure_same(&other.grid)?;
        self.grid.ensure_same(&mid.grid())?;
        let (mr, mc) = mid.shape();
        self.check_inner(mr)?;
        if mc != other.rows {
            return Err(Error::Dimension {
                context: "mult_compose right factor",
                expected: mc,
                got: other.rows,
            });
        }
        let scaled = other.left_diag(mid)?;
        self.compose(&scaled)
    }

    fn check_inner(&self, rows: usize) -> Result<()> {
        if self.cols != rows {
            return Err(Error::Dimension {
                context: "kernel composition inner dimension",
                expected: self.cols,
                got: rows,
            });
        }
        Ok(())
    }

    /// `(u, v) ↦ L[u] · K(u, v)`.
    pub fn left_diag(&self, l: &MatrixField) -> Result<Self> {
        self.grid.ensure_same(&l.grid())?;
        let (lr, lc) = l.shape();
        if lc != self.rows {
            return Err(Error::Dimension {
                context: "left block-diagonal factor",
                expected: self.rows,
                got: lc,
            });
        }
        let mut data = DMatrix::zeros(self.grid.len() * lr, self.data.ncols());
        for (i, li) in l.iter().enumerate() {
            let src = self.data.rows(i * self.rows, self.rows);
            data.rows_mut(i * lr, lr).copy_from(&(li * src));
        }
        Ok(Self {
            grid: self.grid,
            rows: lr,
            cols: self.cols,
            data,
        })
    }

    /// `(u, v) ↦ K(u, v) · L[v]`.
    pub fn right_diag(&self, l: &MatrixField) -> Result<Self> {
        self.grid.ensure_same(&l.grid())?;
        let (lr, lc) = l.shape();
        if lr != self.cols {
            return Err(Error::Dimension {
                context: "right block-diagonal factor",
                expected: self.cols,
                got: lr,
            });
        }
        let mut data = DMatrix::zeros(self.data.nrows(), self.grid.len() * lc);
        for (j, lj) in l.iter().enumerate() {
            let src = self.data.columns(j * self.cols, self.cols);
            data.columns_mut(j * lc, lc).copy_from(&(src * lj));
        }
        Ok(Self {
            grid: self.grid,
            rows: self.rows,
            cols: lc,
            data,
        })
    }

    pub fn scale(&self, s: f64) -> Self {
        Self {
            data: &self.data * s,
            ..self.clone()
        }
    }

    pub fn add(&self, other: &MatrixKernel) -> Result<Self> {
        self.check_same_shape(other)?;
        Ok(Self {
            data: &self.data + &other.data,
            ..self.clone()
        })
    }

    pub fn sub(&self, other: &MatrixKernel) -> Result<Self> {
        self.check_same_shape(other)?;
        Ok(Self {
            data: &self.data - &other.data,
            ..self.clone()
        })
    }

    pub(crate) fn add_assign(&mut self, other: &MatrixKernel) {
        self.data += &other.data;
    }

    fn check_same_shape(&self, other: &MatrixKernel) -> Result<()> {
        self.grid.ensure_same(&other.grid)?;
        if self.block_shape() != other.block_shape() {
            return Err(Error::Dimension {
                context: "kernel block shape",
                expected: self.rows * self.cols,
                got: other.rows * other.cols,
            });
        }
        Ok(())
    }

    /// `‖K‖_{L²(I×I)}`.
    pub fn l2_norm(&self) -> f64 {
        self.grid.weight() * self.data.norm()
    }

    /// Largest entrywise deviation `|K(u,v) − K*(u,v)|`; infinite for
    /// non-square blocks.
    pub fn symmetry_defect(&self) -> f64 {
        if self.rows != self.cols {
            return f64::INFINITY;
        }
        (&self.data - self.data.transpose()).amax()
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        self.symmetry_defect() <= tol
    }

    /// `(K + K*)/2`.
    pub fn symmetrized(&self) -> Self {
        let mut out = self.clone();
        out.symmetrize();
        out
    }

    pub(crate) fn symmetrize(&mut self) {
        let t = self.data.transpose();
        self.data += t;
        self.data *= 0.5;
    }

    /// `‖T_K‖` by power iteration on `T_{K*} T_K` from the all-ones seed.
    pub fn operator_norm(&self, max_iter: usize, tol: f64) -> OperatorNorm {
        self.operator_norm_from(None, max_iter, tol)
    }

    /// Power iteration with an optional warm start (e.g. the previous knot's
    /// singular vector).
    pub fn operator_norm_from(
        &self,
        start: Option<&DVector<f64>>,
        max_iter: usize,
        tol: f64,
    ) -> OperatorNorm {
        let n = self.data.ncols();
        let h = self.grid.weight();
        let seed = match start {
            Some(v) if v.len() == n && v.norm() > 0.0 => v.clone(),
            _ => DVector::from_element(n, 1.0),
        };
        let first = power_iterate(&self.data, seed, max_iter, tol);
        // The all-ones seed is orthogonal to the top singular vector of some
        // kernels (e.g. zero row sums); retry from an irregular seed.
        let result = if first.value == 0.0 && self.data.amax() > 0.0 {
            let irregular = DVector::from_fn(n, |k, _| {
                1.0 + 0.5 * ((k as f64 + 1.0) * 1.618_033_988_7).sin()
            });
            power_iterate(&self.data, irregular, max_iter, tol)
        } else {
            first
        };
        let value = h * result.value;
        debug_assert!(value <= self.l2_norm() * (1.0 + 1e-9) + 1e-300);
        OperatorNorm {
            value,
            converged: result.converged,
            iterations: result.iterations,
            vector: result.vector,
        }
    }
}

/// Returns `σ_max(m)` (unweighted).
fn power_iterate(m: &DMatrix<f64>, mut v: DVector<f64>, max_iter: usize, tol: f64) -> OperatorNorm {
    let nv = v.norm();
    if nv == 0.0 || m.nrows() == 0 {
        return OperatorNorm {
            value: 0.0,
            converged: true,
            iterations: 0,
            vector: v,
        };
    }
    v /= nv;
    let mut lambda = 0.0_f64;
    for it in 1..=max_iter {
        let mv = m * &v;
        let w = m.tr_mul(&mv);
        // Rayleigh quotient of MᵀM at the unit vector v.
        let next = mv.norm_squared();
        let wn = w.norm();
        if wn == 0.0 {
            return OperatorNorm {
                value: 0.0,
                converged: true,
                iterations: it,
                vector: v,
            };
        }
        v = w / wn;
        if (next - lambda).abs() <= tol * next {
            return OperatorNorm {
                value: next.sqrt(),
                converged: true,
                iterations: it,
                vector: v,
            };
        }
        lambda = next;
    }
    OperatorNorm {
        value: lambda.sqrt(),
        converged: false,
        iterations: max_iter,
        vector: v,
    }
}
