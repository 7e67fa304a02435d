//! LQ problem data on a time grid, standing-assumption checks and the
//! centered-cost kernel transform.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::kernel::{LabelGrid, MatrixField, MatrixKernel, VectorField, SYMMETRY_TOL};

/// Tolerance on negative eigenvalues of matrices required to be PSD.
pub const PSD_TOL: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimeGrid {
    t0: f64,
    t_end: f64,
    n_steps: usize,
}

impl TimeGrid {
    pub fn new(t0: f64, t_end: f64, n_steps: usize) -> Result<Self> {
        if !(t0.is_finite() && t_end.is_finite()) || t0 >= t_end || n_steps == 0 {
            return Err(Error::InvalidParameter(format!(
                "time grid needs t0 < T and n_steps > 0 (got [{t0}, {t_end}], {n_steps})"
            )));
        }
        Ok(Self { t0, t_end, n_steps })
    }

    /// Grid on `[t0, t_end]` whose step is as close as possible to `dt`.
    pub fn with_step(t0: f64, t_end: f64, dt: f64) -> Result<Self> {
        if !(dt > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "dt must be positive (got {dt})"
            )));
        }
        let n = ((t_end - t0) / dt).round().max(1.0) as usize;
        Self::new(t0, t_end, n)
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn t_end(&self) -> f64 {
        self.t_end
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn n_knots(&self) -> usize {
        self.n_steps + 1
    }

    pub fn dt(&self) -> f64 {
        (self.t_end - self.t0) / self.n_steps as f64
    }

    pub fn time(&self, knot: usize) -> f64 {
        if knot == self.n_steps {
            self.t_end
        } else {
            self.t0 + knot as f64 * self.dt()
        }
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.n_steps).map(|k| self.time(k)).collect()
    }
}

/// Model coefficients in force on one time interval.
///
/// Shapes: `a, c, q` are `d×d`; `b, d` are `d×m`; `r` is `m×m`;
/// `beta, gamma, theta` are `d`-vectors; `i_off` is an `m`-vector; the
/// kernels have `d×d` blocks.
#[derive(Clone, Debug)]
pub struct Coefficients {
    pub a: MatrixField,
    pub b: MatrixField,
    pub beta: VectorField,
    pub g_a: MatrixKernel,
    pub c: MatrixField,
    pub d: MatrixField,
    pub gamma: VectorField,
    pub g_c: MatrixKernel,
    pub theta: VectorField,
    pub q: MatrixField,
    pub g_q: MatrixKernel,
    pub r: MatrixField,
    pub i_off: VectorField,
}

impl Coefficients {
    /// All-zero dynamics and costs with `R = I_m`.
    pub fn zeros(grid: LabelGrid, d: usize, m: usize) -> Self {
        Self {
            a: MatrixField::zeros(grid, d, d),
            b: MatrixField::zeros(grid, d, m),
            beta: VectorField::zeros(grid, d),
            g_a: MatrixKernel::zeros(grid, d, d),
            c: MatrixField::zeros(grid, d, d),
            d: MatrixField::zeros(grid, d, m),
            gamma: VectorField::zeros(grid, d),
            g_c: MatrixKernel::zeros(grid, d, d),
            theta: VectorField::zeros(grid, d),
            q: MatrixField::zeros(grid, d, d),
            g_q: MatrixKernel::zeros(grid, d, d),
            r: MatrixField::identity(grid, m),
            i_off: VectorField::zeros(grid, m),
        }
    }

    fn check(&self, grid: LabelGrid, d: usize, m: usize) -> Result<()> {
        let fields: [(&str, &MatrixField, (usize, usize)); 6] = [
            ("A", &self.a, (d, d)),
            ("B", &self.b, (d, m)),
            ("C", &self.c, (d, d)),
            ("D", &self.d, (d, m)),
            ("Q", &self.q, (d, d)),
            ("R", &self.r, (m, m)),
        ];
        for (name, f, shape) in fields {
            check_matrix_field(name, f, grid, shape)?;
        }
        let vectors: [(&str, &VectorField, usize); 4] = [
            ("beta", &self.beta, d),
            ("gamma", &self.gamma, d),
            ("theta", &self.theta, d),
            ("I", &self.i_off, m),
        ];
        for (name, f, dim) in vectors {
            check_vector_field(name, f, grid, dim)?;
        }
        for (name, k) in [("G_A", &self.g_a), ("G_C", &self.g_c), ("G_Q", &self.g_q)] {
            check_kernel(name, k, grid, d)?;
        }
        Ok(())
    }
}

fn check_matrix_field(
    name: &str,
    f: &MatrixField,
    grid: LabelGrid,
    shape: (usize, usize),
) -> Result<()> {
    grid.ensure_same(&f.grid())?;
    if let Some(bad) = f.iter().find(|m| m.shape() != shape) {
        return Err(Error::InvalidParameter(format!(
            "{name} entries must be {}x{} (found {}x{})",
            shape.0,
            shape.1,
            bad.nrows(),
            bad.ncols()
        )));
    }
    f.check_finite(name)
}

fn check_vector_field(name: &str, f: &VectorField, grid: LabelGrid, dim: usize) -> Result<()> {
    grid.ensure_same(&f.grid())?;
    if let Some(bad) = f.iter().find(|v| v.len() != dim) {
        return Err(Error::InvalidParameter(format!(
            "{name} entries must have length {dim} (found {})",
            bad.len()
        )));
    }
    f.check_finite(name)
}

fn check_kernel(name: &str, k: &MatrixKernel, grid: LabelGrid, d: usize) -> Result<()> {
    grid.ensure_same(&k.grid())?;
    if k.block_shape() != (d, d) {
        return Err(Error::InvalidParameter(format!(
            "{name} blocks must be {d}x{d}"
        )));
    }
    if !k.is_all_finite() {
        return Err(Error::NonFinite {
            context: name.to_string(),
        });
    }
    Ok(())
}

/// Full LQ problem: dynamics, running and terminal costs, initial law.
///
/// `coefficients` holds either one entry (constant in time) or one entry per
/// time knot; the interval `[t_n, t_{n+1})` uses the entry of knot `n`.
#[derive(Clone, Debug)]
pub struct ProblemSpec {
    pub grid: LabelGrid,
    pub tgrid: TimeGrid,
    pub state_dim: usize,
    pub control_dim: usize,
    pub coefficients: Vec<Coefficients>,
    pub h: MatrixField,
    pub g_h: MatrixKernel,
    pub xi_mean: VectorField,
    pub xi_cov: MatrixField,
    /// Declared lower bound `c` with `R ⪰ c·I`; the minimum eigenvalue of `R`
    /// is used when absent.
    pub coercivity: Option<f64>,
}

impl ProblemSpec {
    /// Time-constant problem with zero terminal cost and `ξ ≡ 0`.
    pub fn new(tgrid: TimeGrid, coefficients: Coefficients) -> Self {
        let grid = coefficients.a.grid();
        let (d, m) = coefficients.b.shape();
        Self {
            grid,
            tgrid,
            state_dim: d,
            control_dim: m,
            coefficients: vec![coefficients],
            h: MatrixField::zeros(grid, d, d),
            g_h: MatrixKernel::zeros(grid, d, d),
            xi_mean: VectorField::zeros(grid, d),
            xi_cov: MatrixField::zeros(grid, d, d),
            coercivity: None,
        }
    }

    pub fn coefficients_at(&self, knot: usize) -> &Coefficients {
        if self.coefficients.len() == 1 {
            &self.coefficients[0]
        } else {
            &self.coefficients[knot.min(self.coefficients.len() - 1)]
        }
    }

    /// Second moment `E[ξξᵀ] = Σ + m mᵀ` per label.
    pub fn xi_second_moment(&self) -> MatrixField {
        self.xi_cov
            .zip_map(&self.xi_mean, |c, m| c + m * m.transpose())
            .expect("initial mean and covariance share the grid")
    }

    /// Shapes, lengths and finiteness of every coefficient.
    pub fn check_structure(&self) -> Result<()> {
        let (d, m) = (self.state_dim, self.control_dim);
        if d == 0 || m == 0 {
            return Err(Error::InvalidParameter(
                "state and control dimensions must be positive".into(),
            ));
        }
        let n = self.coefficients.len();
        if n != 1 && n != self.tgrid.n_knots() {
            return Err(Error::Dimension {
                context: "coefficient knots",
                expected: self.tgrid.n_knots(),
                got: n,
            });
        }
        for c in &self.coefficients {
            c.check(self.grid, d, m)?;
        }
        check_matrix_field("H", &self.h, self.grid, (d, d))?;
        check_kernel("G_H", &self.g_h, self.grid, d)?;
        check_vector_field("xi_mean", &self.xi_mean, self.grid, d)?;
        check_matrix_field("xi_cov", &self.xi_cov, self.grid, (d, d))?;
        Ok(())
    }
}

/// Sufficient-condition check of the cost positivity assumption.
#[derive(Clone, Debug, Serialize)]
pub struct PositivityReport {
    /// Minimum over knots of the smallest eigenvalue of `M_Q + T_{G_Q}`.
    pub min_eig_q_plus_gq: f64,
    /// Smallest eigenvalue of `M_H + T_{G_H}`.
    pub min_eig_h_plus_gh: f64,
    /// Coercivity constant in force (`R ⪰ c·I`).
    pub coercivity: f64,
    pub method: String,
    pub warnings: Vec<String>,
}

impl PositivityReport {
    /// Human-readable two-column table.
    pub fn table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("{:<28} {:>14}\n", "check", "value"));
        out.push_str(&format!(
            "{:<28} {:>14.6e}\n",
            "min eig (Q + G_Q)", self.min_eig_q_plus_gq
        ));
        out.push_str(&format!(
            "{:<28} {:>14.6e}\n",
            "min eig (H + G_H)", self.min_eig_h_plus_gh
        ));
        out.push_str(&format!(
            "{:<28} {:>14.6e}\n",
            "coercivity c (R >= cI)", self.coercivity
        ));
        out.push_str(&format!("method: {}\n", self.method));
        for w in &self.warnings {
            out.push_str(&format!("warning: {w}\n"));
        }
        out
    }
}

fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    let sym = (m + m.transpose()) * 0.5;
    SymmetricEigen::new(sym).eigenvalues.min()
}

/// Smallest eigenvalue of the operator `x ↦ W[u] x(u) + ∫ G(u,v) x(v) dv` on
/// the grid (self-adjoint for the weighted inner product).
pub fn assembled_min_eigenvalue(w: &MatrixField, g: &MatrixKernel) -> f64 {
    let d = w.shape().0;
    let mut dense = g.dense() * g.grid().weight();
    for (i, wi) in w.iter().enumerate() {
        let mut view = dense.view_mut((i * d, i * d), (d, d));
        view += wi;
    }
    min_eigenvalue(&dense)
}

fn check_psd_field(name: &str, f: &MatrixField) -> Result<()> {
    for (i, m) in f.iter().enumerate() {
        let asym = (m - m.transpose()).amax();
        if asym > SYMMETRY_TOL {
            return Err(Error::NotSymmetric {
                name: format!("{name} at label {i}"),
                deviation: asym,
            });
        }
        let me = min_eigenvalue(m);
        if me < -PSD_TOL * (1.0 + m.amax()) {
            return Err(Error::NotPsd {
                name: name.to_string(),
                label: i,
                min_eig: me,
            });
        }
    }
    Ok(())
}

fn check_symmetric_kernel(name: &str, k: &MatrixKernel) -> Result<()> {
    let dev = k.symmetry_defect();
    if dev > SYMMETRY_TOL {
        return Err(Error::NotSymmetric {
            name: name.to_string(),
            deviation: dev,
        });
    }
    Ok(())
}

/// Checks the standing assumptions and reports the operator positivity margins.
///
/// Hard errors: malformed data, non-symmetric or indefinite `Q`/`H`/`Σ_ξ`,
/// asymmetric `G_Q`/`G_H`, and `R` failing the coercivity bound. A negative
/// assembled eigenvalue only produces a warning, since it is a sufficient
/// condition for the (weaker) positivity of the conditional cost.
pub fn validate(spec: &ProblemSpec) -> Result<PositivityReport> {
    spec.check_structure()?;

    let mut min_r = f64::INFINITY;
    let mut min_r_at = (0, 0);
    for (knot, c) in spec.coefficients.iter().enumerate() {
        for (i, r) in c.r.iter().enumerate() {
            let asym = (r - r.transpose()).amax();
            if asym > SYMMETRY_TOL {
                return Err(Error::NotSymmetric {
                    name: format!("R at knot {knot}, label {i}"),
                    deviation: asym,
                });
            }
            let e = min_eigenvalue(r);
            if e < min_r {
                min_r = e;
                min_r_at = (knot, i);
            }
        }
    }
    let declared = spec.coercivity.unwrap_or(min_r);
    if !(declared > 0.0) || min_r < declared * (1.0 - 1e-12) {
        return Err(Error::CoercivityViolated {
            knot: min_r_at.0,
            label: min_r_at.1,
            min_eig: min_r,
            declared,
        });
    }

    let mut min_q = f64::INFINITY;
    for (knot, c) in spec.coefficients.iter().enumerate() {
        check_psd_field(&format!("Q (knot {knot})"), &c.q)?;
        check_symmetric_kernel(&format!("G_Q (knot {knot})"), &c.g_q)?;
        min_q = min_q.min(assembled_min_eigenvalue(&c.q, &c.g_q));
    }
    check_psd_field("H", &spec.h)?;
    check_symmetric_kernel("G_H", &spec.g_h)?;
    check_psd_field("xi covariance", &spec.xi_cov)?;
    let min_h = assembled_min_eigenvalue(&spec.h, &spec.g_h);

    let mut warnings = Vec::new();
    if min_q < -PSD_TOL {
        warnings.push(format!(
            "M_Q + T_G_Q has a negative eigenvalue ({min_q:.3e}); cost positivity is not guaranteed"
        ));
    }
    if min_h < -PSD_TOL {
        warnings.push(format!(
            "M_H + T_G_H has a negative eigenvalue ({min_h:.3e}); cost positivity is not guaranteed"
        ));
    }
    Ok(PositivityReport {
        min_eig_q_plus_gq: min_q,
        min_eig_h_plus_gh: min_h,
        coercivity: declared,
        method: "dense symmetric eigenvalues of the Nd x Nd weighted operator matrix".into(),
        warnings,
    })
}

/// Kernel `G` such that `∫ xᵀ W x + ∫∫ x(u)ᵀ G(u,v) x(v)` equals the centered
/// form `∫ (x − T_Ĝ x)ᵀ W (x − T_Ĝ x)`:
/// `G(u,v) = (Ĝ ∘ W ∘ Ĝ)(u,v) − W[u] Ĝ(u,v) − Ĝ(u,v) W[v]`.
pub fn centered_transform(g_hat: &MatrixKernel, w: &MatrixField) -> Result<MatrixKernel> {
    check_symmetric_kernel("centering graphon", g_hat)?;
    let quad = g_hat.mult_compose(w, g_hat)?;
    let mut out = quad.sub(&g_hat.left_diag(w)?)?.sub(&g_hat.right_diag(w)?)?;
    out.symmetrize();
    Ok(out)
}

/// Per-label Gaussian sampler `ξ^u = m_u + L_u z` with `L_u L_uᵀ = Σ_u`.
#[derive(Clone, Debug)]
pub struct InitialSampler {
    mean: Vec<DVector<f64>>,
    factor: Vec<Option<DMatrix<f64>>>,
}

impl InitialSampler {
    pub fn new(spec: &ProblemSpec) -> Result<Self> {
        let mut factor = Vec::with_capacity(spec.grid.len());
        for (i, cov) in spec.xi_cov.iter().enumerate() {
            if cov.iter().all(|&x| x == 0.0) {
                factor.push(None);
                continue;
            }
            let sym = (cov + cov.transpose()) * 0.5;
            let eig = SymmetricEigen::new(sym);
            let min = eig.eigenvalues.min();
            if min < -PSD_TOL * (1.0 + cov.amax()) {
                return Err(Error::NotPsd {
                    name: "xi covariance".into(),
                    label: i,
                    min_eig: min,
                });
            }
            let sqrt = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
            factor.push(Some(&eig.eigenvectors * DMatrix::from_diagonal(&sqrt)));
        }
        Ok(Self {
            mean: spec.xi_mean.values().to_vec(),
            factor,
        })
    }

    pub fn is_deterministic(&self) -> bool {
        self.factor.iter().all(Option::is_none)
    }

    /// Writes one draw for every label into `out` (label-major, length `N·d`).
    /// Consumes exactly `N·d` standard normals whether or not the covariance
    /// vanishes, so downstream draws do not depend on it.
    pub fn sample_into<R: rand::Rng + ?Sized>(&self, rng: &mut R, out: &mut [f64]) {
        let d = self.mean.first().map_or(0, |m| m.len());
        let mut z = DVector::zeros(d);
        for (i, (m, f)) in self.mean.iter().zip(&self.factor).enumerate() {
            for k in 0..d {
                z[k] = StandardNormal.sample(rng);
            }
            let dst = &mut out[i * d..(i + 1) * d];
            match f {
                None => dst.copy_from_slice(m.as_slice()),
                Some(l) => {
                    let x = m + l * &z;
                    dst.copy_from_slice(x.as_slice());
                }
            }
        }
    }
}

/// Draws `n_samples` independent initial fields from `N(ξ_mean[u], ξ_cov[u])`.
/// The conditional mean of every draw given the common noise is `ξ_mean`.
pub fn build_initial_condition(
    spec: &ProblemSpec,
    n_samples: usize,
    rng_seed: u64,
) -> Result<Vec<VectorField>> {
    let sampler = InitialSampler::new(spec)?;
    let d = spec.state_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut buf = vec![0.0; spec.grid.len() * d];
    (0..n_samples)
        .map(|_| {
            sampler.sample_into(&mut rng, &mut buf);
            VectorField::from_flat(spec.grid, d, &DVector::from_column_slice(&buf))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graphon::Graphon;

    fn scalar_field(grid: LabelGrid, v: f64) -> MatrixField {
        MatrixField::constant(grid, DMatrix::from_element(1, 1, v))
    }

    fn zero_spec(n: usize) -> ProblemSpec {
        let grid = LabelGrid::new(n).unwrap();
        ProblemSpec::new(
            TimeGrid::new(0.0, 1.0, 10).unwrap(),
            Coefficients::zeros(grid, 1, 1),
        )
    }

    #[test]
    fn time_grid_basics() {
        let t = TimeGrid::new(0.0, 1.0, 4).unwrap();
        assert_eq!(t.times(), vec![0.0, 0.25, 0.5, 0.75, 1.0]);
        assert!(TimeGrid::new(1.0, 1.0, 4).is_err());
        assert!(TimeGrid::new(0.0, 1.0, 0).is_err());
        assert_eq!(
            TimeGrid::with_step(0.0, 1.0, 0.0025).unwrap().n_steps(),
            400
        );
    }

    #[test]
    fn zero_kernels_report_diagonal_eigenvalues() {
        let mut spec = zero_spec(3);
        spec.coefficients[0].q = MatrixField::from_fn(spec.grid, |i, _| {
            DMatrix::from_element(1, 1, 1.0 + i as f64)
        });
        spec.h = scalar_field(spec.grid, 0.5);
        let rep = validate(&spec).unwrap();
        assert!((rep.min_eig_q_plus_gq - 1.0).abs() < 1e-12);
        assert!((rep.min_eig_h_plus_gh - 0.5).abs() < 1e-12);
        assert!(rep.warnings.is_empty());
        assert!(rep.table().contains("min eig (Q + G_Q)"));
    }

    #[test]
    fn zero_control_weight_is_rejected() {
        let mut spec = zero_spec(2);
        spec.coefficients[0].r = scalar_field(spec.grid, 0.0);
        let err = validate(&spec).unwrap_err();
        assert!(err.to_string().contains("coercivity violated"), "{err}");
    }

    #[test]
    fn declared_coercivity_must_hold() {
        let mut spec = zero_spec(2);
        spec.coercivity = Some(2.0);
        assert!(matches!(
            validate(&spec),
            Err(Error::CoercivityViolated { .. })
        ));
        spec.coercivity = Some(0.5);
        assert_eq!(validate(&spec).unwrap().coercivity, 0.5);
    }

    #[test]
    fn asymmetric_cost_kernel_is_rejected() {
        let mut spec = zero_spec(2);
        spec.coefficients[0].g_q = MatrixKernel::scalar(spec.grid, |u, v| u - 2.0 * v);
        assert!(matches!(validate(&spec), Err(Error::NotSymmetric { .. })));
    }

    #[test]
    fn indefinite_q_is_rejected_negative_operator_warns() {
        let mut spec = zero_spec(2);
        spec.coefficients[0].q = scalar_field(spec.grid, -1.0);
        assert!(matches!(validate(&spec), Err(Error::NotPsd { .. })));

        let mut spec = zero_spec(2);
        spec.coefficients[0].g_q = MatrixKernel::scalar(spec.grid, |_, _| -1.0);
        let rep = validate(&spec).unwrap();
        assert!(rep.min_eig_q_plus_gq < 0.0);
        assert_eq!(rep.warnings.len(), 1);
    }

    #[test]
    fn validate_is_idempotent() {
        let mut spec = zero_spec(4);
        spec.coefficients[0].q = scalar_field(spec.grid, 1.0);
        let g = Graphon::Constant { value: 1.0 }
            .to_scalar_kernel(spec.grid)
            .unwrap();
        spec.coefficients[0].g_q = centered_transform(&g, &spec.coefficients[0].q).unwrap();
        let a = validate(&spec).unwrap();
        let b = validate(&spec).unwrap();
        assert_eq!(a.min_eig_q_plus_gq, b.min_eig_q_plus_gq);
        // Centered quadratic with a unit graphon annihilates constants.
        assert!(a.min_eig_q_plus_gq.abs() < 1e-12);
    }

    #[test]
    fn centered_transform_constants() {
        let grid = LabelGrid::new(5).unwrap();
        let w = scalar_field(grid, 0.7);
        let zero = MatrixKernel::zeros(grid, 1, 1);
        assert_eq!(centered_transform(&zero, &w).unwrap().max_abs(), 0.0);
        let one = MatrixKernel::scalar(grid, |_, _| 1.0);
        let g = centered_transform(&one, &w).unwrap();
        assert!(g.dense().iter().all(|x| (x + 0.7).abs() < 1e-14));
        let asym = MatrixKernel::scalar(grid, |u, _| u);
        assert!(centered_transform(&asym, &w).is_err());
    }

    #[test]
    fn centered_transform_step_graphon_direct_sum() {
        // Direct evaluation of (Ĝ∘W∘Ĝ)(u,v) − (W_u + W_v) Ĝ(u,v) at N = 4, W ≡ 1.
        let grid = LabelGrid::new(4).unwrap();
        let blocks = [[0.8, 0.2], [0.2, 0.8]];
        let gh = |i: usize, j: usize| blocks[i / 2][j / 2];
        let g = Graphon::Step {
            blocks: vec![vec![0.8, 0.2], vec![0.2, 0.8]],
            cuts: None,
        }
        .to_scalar_kernel(grid)
        .unwrap();
        let out = centered_transform(&g, &scalar_field(grid, 1.0)).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let mut quad = 0.0;
                for w in 0..4 {
                    quad += 0.25 * gh(i, w) * gh(w, j);
                }
                let expected = quad - 2.0 * gh(i, j);
                assert!((out.block(i, j)[(0, 0)] - expected).abs() < 1e-14);
            }
        }
        // Same-block entries: 0.25·2·(0.64+0.04) − 1.6 = −1.26.
        assert!((out.block(0, 1)[(0, 0)] + 1.26).abs() < 1e-14);
    }

    #[test]
    fn zero_covariance_samples_equal_the_mean() {
        let mut spec = zero_spec(3);
        spec.xi_mean = VectorField::from_fn(spec.grid, |i, _| DVector::from_element(1, i as f64));
        let s = build_initial_condition(&spec, 5, 1).unwrap();
        for x in &s {
            assert_eq!(x, &spec.xi_mean);
        }
    }

    #[test]
    fn non_psd_covariance_is_rejected() {
        let mut spec = zero_spec(2);
        spec.xi_cov = scalar_field(spec.grid, -0.5);
        assert!(build_initial_condition(&spec, 1, 0).is_err());
    }

    #[test]
    fn gaussian_initial_variance() {
        let mut spec = zero_spec(3);
        spec.xi_cov = scalar_field(spec.grid, 1.0);
        let n = 100_000;
        let s = build_initial_condition(&spec, n, 7).unwrap();
        let again = build_initial_condition(&spec, n, 7).unwrap();
        assert_eq!(s, again);
        for label in 0..3 {
            let xs: Vec<f64> = s.iter().map(|f| f[label][0]).collect();
            let mean = xs.iter().sum::<f64>() / n as f64;
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            assert!(
                (var - 1.0).abs() < 3.0 * (2.0 / n as f64).sqrt(),
                "var {var}"
            );
        }
    }

    #[test]
    fn structure_errors() {
        let mut spec = zero_spec(2);
        spec.coefficients[0].b = MatrixField::zeros(spec.grid, 2, 1);
        assert!(spec.check_structure().is_err());
        let mut spec = zero_spec(2);
        spec.coefficients[0].beta =
            VectorField::constant(spec.grid, DVector::from_element(1, f64::NAN));
        assert!(matches!(
            spec.check_structure(),
            Err(Error::NonFinite { .. })
        ));
    }
}
