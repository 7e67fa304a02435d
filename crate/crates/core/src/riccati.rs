//! Backward integration of the triangular Riccati system `K → K̄ → Y → Λ`
//! for deterministic coefficients, where the martingale parts vanish and the
//! backward equations reduce to ODEs.
//!
//! With `O = R + DᵀKD` and `U = BᵀK + DᵀKC` (per label):
//!
//! * `−K̇ = AᵀK + KA + CᵀKC + Q − UᵀO⁻¹U`, `K_T = H`;
//! * `−K̄̇ = Ψ − UᵀO⁻¹V − V*O⁻¹U − V*∘O⁻¹∘V`, `K̄_T = G_H`, with
//!   `V(u,v) = DᵀK G_C(u,v) + Bᵀ K̄(u,v)`;
//! * `−Ẏ = M − UᵀO⁻¹Γ − T_{V*}(O⁻¹Γ)`, `Y_T = 0`, with
//!   `Γ = DᵀKγ + BᵀY + R·I`;
//! * `−Λ̇ = L − ΓᵀO⁻¹Γ`, `Λ_T = 0`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{
    LabelGrid, MatrixField, MatrixKernel, ScalarField, VectorField, NORM_MAX_ITER, NORM_TOL,
};
use crate::model::{validate, Coefficients, ProblemSpec, TimeGrid};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Euler,
    #[default]
    Rk4,
}

impl std::str::FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "euler" => Ok(Scheme::Euler),
            "rk4" => Ok(Scheme::Rk4),
            other => Err(Error::Config(format!(
                "unknown scheme '{other}' (euler|rk4)"
            ))),
        }
    }
}

impl std::fmt::Display for Scheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Scheme::Euler => "euler",
            Scheme::Rk4 => "rk4",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolverOptions {
    pub scheme: Scheme,
    /// Error out when `‖T_{K̄_t}‖` exceeds this value.
    pub blow_up_cap: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            scheme: Scheme::Rk4,
            blow_up_cap: 1e6,
        }
    }
}

/// Per-label quantities derived from `K` at one knot.
#[derive(Clone, Debug)]
pub struct KGains {
    pub o: MatrixField,
    pub o_inv: MatrixField,
    pub u: MatrixField,
}

/// Monitor series recorded at every knot.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MonitorRow {
    pub t: f64,
    pub kbar_norm: f64,
    pub min_eig_k: f64,
    pub min_eig_o: f64,
}

/// Knot-indexed solution paths and the feedback caches built from them.
#[derive(Clone, Debug)]
pub struct RiccatiSolution {
    pub tgrid: TimeGrid,
    pub scheme: Scheme,
    pub k: Vec<MatrixField>,
    pub kbar: Vec<MatrixKernel>,
    pub y: Vec<VectorField>,
    pub lambda: Vec<ScalarField>,
    pub o: Vec<MatrixField>,
    pub o_inv: Vec<MatrixField>,
    pub u: Vec<MatrixField>,
    /// `V` kernels (`m×d` blocks).
    pub v: Vec<MatrixKernel>,
    pub gamma: Vec<VectorField>,
    pub monitor: Vec<MonitorRow>,
}

fn min_eig(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new((m + m.transpose()) * 0.5)
        .eigenvalues
        .min()
}

fn sym(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

/// Coercivity constant in force: declared `c`, or the smallest eigenvalue of `R`.
pub fn coercivity_constant(spec: &ProblemSpec) -> f64 {
    spec.coercivity.unwrap_or_else(|| {
        spec.coefficients
            .iter()
            .flat_map(|c| c.r.iter().map(min_eig))
            .fold(f64::INFINITY, f64::min)
    })
}

/// `O = R + DᵀKD`, its inverse and `U = BᵀK + DᵀKC`. Fails when the smallest
/// eigenvalue of `O` drops below `c/2`.
pub fn k_gains(k: &MatrixField, coefs: &Coefficients, c: f64, knot: usize) -> Result<KGains> {
    let grid = k.grid();
    let n = grid.len();
    let mut o = Vec::with_capacity(n);
    let mut o_inv = Vec::with_capacity(n);
    let mut u = Vec::with_capacity(n);
    for i in 0..n {
        let (ki, di) = (&k[i], &coefs.d[i]);
        let dtk = di.transpose() * ki;
        let oi = sym(&coefs.r[i] + &dtk * di);
        let e = min_eig(&oi);
        if !(e >= 0.5 * c) {
            return Err(Error::CoercivityLost {
                knot,
                label: i,
                min_eig: e,
            });
        }
        let inv = oi.clone().try_inverse().ok_or(Error::CoercivityLost {
            knot,
            label: i,
            min_eig: e,
        })?;
        u.push(coefs.b[i].transpose() * ki + dtk * &coefs.c[i]);
        o_inv.push(sym(inv));
        o.push(oi);
    }
    Ok(KGains {
        o: MatrixField::new(grid, o)?,
        o_inv: MatrixField::new(grid, o_inv)?,
        u: MatrixField::new(grid, u)?,
    })
}

/// `Φ̃(K)[u] = AᵀK + KA + CᵀKC + Q − UᵀO⁻¹U`, symmetrized, plus the gains.
pub fn k_rate(
    k: &MatrixField,
    coefs: &Coefficients,
    c: f64,
    knot: usize,
) -> Result<(MatrixField, KGains)> {
    let gains = k_gains(k, coefs, c, knot)?;
    let rate = MatrixField::from_fn(k.grid(), |i, _| {
        let (ki, ai, ci) = (&k[i], &coefs.a[i], &coefs.c[i]);
        let ui = &gains.u[i];
        let phi = ai.transpose() * ki + ki * ai + ci.transpose() * ki * ci + &coefs.q[i];
        sym(phi - ui.transpose() * &gains.o_inv[i] * ui)
    });
    Ok((rate, gains))
}

/// `V(u,v) = D_uᵀ K_u G_C(u,v) + B_uᵀ K̄(u,v)`.
pub fn v_kernel(
    k: &MatrixField,
    kbar: &MatrixKernel,
    coefs: &Coefficients,
) -> Result<MatrixKernel> {
    let dtk = coefs.d.zip_map(k, |d, k| d.transpose() * k)?;
    let bt = coefs.b.transposed();
    coefs.g_c.left_diag(&dtk)?.add(&kbar.left_diag(&bt)?)
}

/// Driver `F(t, K̄)` of the kernel equation (symmetrized), and `V`.
pub fn kbar_rate(
    k: &MatrixField,
    gains: &KGains,
    kbar: &MatrixKernel,
    coefs: &Coefficients,
) -> Result<(MatrixKernel, MatrixKernel)> {
    let g_a_adj = coefs.g_a.adjoint();
    let g_c_adj = coefs.g_c.adjoint();
    let kbar_adj = kbar.adjoint();
    let ctk = coefs.c.zip_map(k, |c, k| c.transpose() * k)?;
    let kc = k.zip_map(&coefs.c, |k, c| k * c)?;

    let mut psi = coefs.g_a.left_diag(k)?;
    psi.add_assign(&g_a_adj.right_diag(k)?);
    psi.add_assign(&coefs.g_c.left_diag(&ctk)?);
    psi.add_assign(&g_c_adj.right_diag(&kc)?);
    psi.add_assign(&g_c_adj.mult_compose(k, &coefs.g_c)?);
    psi.add_assign(&kbar.left_diag(&coefs.a.transposed())?);
    psi.add_assign(&g_a_adj.compose(kbar)?);
    psi.add_assign(&kbar_adj.right_diag(&coefs.a)?);
    psi.add_assign(&kbar_adj.compose(&coefs.g_a)?);
    psi.add_assign(&coefs.g_q);

    let v = v_kernel(k, kbar, coefs)?;
    let v_adj = v.adjoint();
    let ut_oinv = gains.u.zip_map(&gains.o_inv, |u, oi| u.transpose() * oi)?;
    let oinv_u = gains.o_inv.zip_map(&gains.u, |oi, u| oi * u)?;
    let mut f = psi
        .sub(&v.left_diag(&ut_oinv)?)?
        .sub(&v_adj.right_diag(&oinv_u)?)?
        .sub(&v_adj.mult_compose(&gains.o_inv, &v)?)?;
    f.symmetrize();
    Ok((f, v))
}

/// `Γ = DᵀKγ + BᵀY + R·I` per label.
pub fn gamma_field(k: &MatrixField, y: &VectorField, coefs: &Coefficients) -> VectorField {
    VectorField::from_fn(k.grid(), |i, _| {
        coefs.d[i].transpose() * (&k[i] * &coefs.gamma[i])
            + coefs.b[i].transpose() * &y[i]
            + &coefs.r[i] * &coefs.i_off[i]
    })
}

/// Driver `F̂(t, Y)` of the linear equation, and `Γ`.
pub fn y_rate(
    k: &MatrixField,
    gains: &KGains,
    kbar: &MatrixKernel,
    v: &MatrixKernel,
    y: &VectorField,
    coefs: &Coefficients,
) -> Result<(VectorField, VectorField)> {
    let grid = k.grid();
    let kgamma = k.mul_vectors(&coefs.gamma)?;
    let gc_term = coefs.g_c.adjoint().apply(&kgamma)?;
    let kbar_beta = kbar.apply(&coefs.beta)?;
    let ga_y = coefs.g_a.adjoint().apply(y)?;
    let gamma = gamma_field(k, y, coefs);
    let oinv_gamma = gains.o_inv.mul_vectors(&gamma)?;
    let v_term = v.adjoint().apply(&oinv_gamma)?;
    let rate = VectorField::from_fn(grid, |i, _| {
        let m = &k[i] * &coefs.beta[i]
            + coefs.c[i].transpose() * &kgamma[i]
            + &gc_term[i]
            + &kbar_beta[i]
            + coefs.a[i].transpose() * &y[i]
            + &ga_y[i];
        m - gains.u[i].transpose() * &oinv_gamma[i] - &v_term[i]
    });
    Ok((rate, gamma))
}

/// Integrand `L − ΓᵀO⁻¹Γ` of the scalar equation, per label.
pub fn lambda_rate(
    k: &MatrixField,
    kbar: &MatrixKernel,
    y: &VectorField,
    coefs: &Coefficients,
    c: f64,
    knot: usize,
) -> Result<ScalarField> {
    let gains = k_gains(k, coefs, c, knot)?;
    let gamma = gamma_field(k, y, coefs);
    let kbar_theta = kbar.apply(&coefs.theta)?;
    Ok(ScalarField::from_fn(k.grid(), |i, _| {
        let (ki, g, th) = (&k[i], &coefs.gamma[i], &coefs.theta[i]);
        let l = g.dot(&(ki * g))
            + th.dot(&(ki * th))
            + 2.0 * coefs.beta[i].dot(&y[i])
            + th.dot(&kbar_theta[i])
            + coefs.i_off[i].dot(&(&coefs.r[i] * &coefs.i_off[i]));
        l - gamma[i].dot(&(&gains.o_inv[i] * &gamma[i]))
    }))
}

/// Public entry points keyed on a problem and a knot index.
pub fn driver_k(spec: &ProblemSpec, knot: usize, k: &MatrixField) -> Result<MatrixField> {
    let c = coercivity_constant(spec);
    k_rate(k, spec.coefficients_at(knot), c, knot).map(|(r, _)| r)
}

pub fn driver_kbar(
    spec: &ProblemSpec,
    knot: usize,
    k: &MatrixField,
    kbar: &MatrixKernel,
) -> Result<MatrixKernel> {
    let coefs = spec.coefficients_at(knot);
    let gains = k_gains(k, coefs, coercivity_constant(spec), knot)?;
    kbar_rate(k, &gains, kbar, coefs).map(|(f, _)| f)
}

pub fn driver_y(
    spec: &ProblemSpec,
    knot: usize,
    k: &MatrixField,
    kbar: &MatrixKernel,
    y: &VectorField,
) -> Result<VectorField> {
    let coefs = spec.coefficients_at(knot);
    let gains = k_gains(k, coefs, coercivity_constant(spec), knot)?;
    let v = v_kernel(k, kbar, coefs)?;
    y_rate(k, &gains, kbar, &v, y, coefs).map(|(r, _)| r)
}

#[derive(Clone, Debug)]
struct State {
    k: MatrixField,
    kbar: MatrixKernel,
    y: VectorField,
}

impl State {
    /// `self + a·rate`, with symmetry of `K` and `K̄` restored.
    fn axpy(&self, a: f64, rate: &State) -> State {
        let k = self
            .k
            .zip_map(&rate.k, |x, r| sym(x + r * a))
            .expect("same grid");
        let mut kbar = self.kbar.clone();
        kbar.add_assign(&rate.kbar.scale(a));
        kbar.symmetrize();
        let y = self
            .y
            .zip_map(&rate.y, |x, r| x + r * a)
            .expect("same grid");
        State { k, kbar, y }
    }

    fn combine(&self, dt: f64, k1: &State, k2: &State, k3: &State, k4: &State) -> State {
        let w = dt / 6.0;
        let k = MatrixField::from_fn(self.k.grid(), |i, _| {
            sym(&self.k[i] + (&k1.k[i] + &k2.k[i] * 2.0 + &k3.k[i] * 2.0 + &k4.k[i]) * w)
        });
        let dense = self.kbar.dense()
            + (k1.kbar.dense() + k2.kbar.dense() * 2.0 + k3.kbar.dense() * 2.0 + k4.kbar.dense())
                * w;
        let (r, c) = self.kbar.block_shape();
        let mut kbar = MatrixKernel::from_dense(self.kbar.grid(), r, c, dense).expect("shape kept");
        kbar.symmetrize();
        let y = VectorField::from_fn(self.y.grid(), |i, _| {
            &self.y[i] + (&k1.y[i] + &k2.y[i] * 2.0 + &k3.y[i] * 2.0 + &k4.y[i]) * w
        });
        State { k, kbar, y }
    }

    fn is_finite(&self) -> bool {
        self.k.check_finite("K").is_ok()
            && self.kbar.is_all_finite()
            && self.y.check_finite("Y").is_ok()
    }
}

/// Rates in reversed time `τ = T − t` (so `dK/dτ = Φ̃`), triangular staging.
fn rates(s: &State, coefs: &Coefficients, c: f64, knot: usize) -> Result<State> {
    let (k_r, gains) = k_rate(&s.k, coefs, c, knot)?;
    let (kbar_r, v) = kbar_rate(&s.k, &gains, &s.kbar, coefs)?;
    let (y_r, _) = y_rate(&s.k, &gains, &s.kbar, &v, &s.y, coefs)?;
    Ok(State {
        k: k_r,
        kbar: kbar_r,
        y: y_r,
    })
}

fn step_back(
    s: &State,
    coefs: &Coefficients,
    c: f64,
    dt: f64,
    knot: usize,
    scheme: Scheme,
) -> Result<State> {
    let k1 = rates(s, coefs, c, knot)?;
    match scheme {
        Scheme::Euler => Ok(s.axpy(dt, &k1)),
        Scheme::Rk4 => {
            let k2 = rates(&s.axpy(0.5 * dt, &k1), coefs, c, knot)?;
            let k3 = rates(&s.axpy(0.5 * dt, &k2), coefs, c, knot)?;
            let k4 = rates(&s.axpy(dt, &k3), coefs, c, knot)?;
            Ok(s.combine(dt, &k1, &k2, &k3, &k4))
        }
    }
}

/// Backward trapezoidal accumulation of `Λ_t = ∫_t^T (L − ΓᵀO⁻¹Γ) ds`.
/// On `[t_n, t_{n+1}]` both endpoint integrands use the coefficients of knot `n`.
pub fn eval_lambda(
    spec: &ProblemSpec,
    k: &[MatrixField],
    kbar: &[MatrixKernel],
    y: &[VectorField],
) -> Result<Vec<ScalarField>> {
    let n_knots = spec.tgrid.n_knots();
    if k.len() != n_knots || kbar.len() != n_knots || y.len() != n_knots {
        return Err(Error::Dimension {
            context: "solution path length",
            expected: n_knots,
            got: k.len().min(kbar.len()).min(y.len()),
        });
    }
    let c = coercivity_constant(spec);
    let dt = spec.tgrid.dt();
    let constant = spec.coefficients.len() == 1;
    let own: Vec<ScalarField> = (0..n_knots)
        .map(|m| lambda_rate(&k[m], &kbar[m], &y[m], spec.coefficients_at(m), c, m))
        .collect::<Result<_>>()?;
    let mut lambda = vec![ScalarField::constant(spec.grid, 0.0); n_knots];
    for n in (0..n_knots - 1).rev() {
        let right = if constant {
            own[n + 1].clone()
        } else {
            lambda_rate(
                &k[n + 1],
                &kbar[n + 1],
                &y[n + 1],
                spec.coefficients_at(n),
                c,
                n,
            )?
        };
        let next = lambda[n + 1].clone();
        lambda[n] = ScalarField::from_fn(spec.grid, |i, _| {
            next[i] + 0.5 * dt * (own[n][i] + right[i])
        });
    }
    Ok(lambda)
}

/// Integrates the system backward from `T` and caches the feedback data.
pub fn solve_backward(spec: &ProblemSpec, options: SolverOptions) -> Result<RiccatiSolution> {
    validate(spec)?;
    let c = coercivity_constant(spec);
    let tg = spec.tgrid;
    let n_steps = tg.n_steps();
    let dt = tg.dt();

    let mut states: Vec<Option<State>> = vec![None; n_steps + 1];
    let mut s = State {
        k: spec.h.map(|h| sym(h.clone())),
        kbar: spec.g_h.symmetrized(),
        y: VectorField::zeros(spec.grid, spec.state_dim),
    };
    let mut warm: Option<DVector<f64>> = None;
    let mut norms = vec![0.0; n_steps + 1];
    let check = |s: &State, knot: usize, warm: &mut Option<DVector<f64>>| -> Result<f64> {
        if !s.is_finite() {
            return Err(Error::BlowUp {
                knot,
                norm: f64::INFINITY,
                cap: options.blow_up_cap,
            });
        }
        let norm = s
            .kbar
            .operator_norm_from(warm.as_ref(), NORM_MAX_ITER, NORM_TOL);
        if norm.value > options.blow_up_cap {
            return Err(Error::BlowUp {
                knot,
                norm: norm.value,
                cap: options.blow_up_cap,
            });
        }
        *warm = Some(norm.vector);
        Ok(norm.value)
    };
    norms[n_steps] = check(&s, n_steps, &mut warm)?;
    states[n_steps] = Some(s.clone());
    for n in (0..n_steps).rev() {
        s = step_back(&s, spec.coefficients_at(n), c, dt, n, options.scheme)?;
        norms[n] = check(&s, n, &mut warm)?;
        states[n] = Some(s.clone());
    }
    let states: Vec<State> = states.into_iter().map(|s| s.expect("filled")).collect();
    let mut k = Vec::with_capacity(n_steps + 1);
    let mut kbar = Vec::with_capacity(n_steps + 1);
    let mut y = Vec::with_capacity(n_steps + 1);
    for st in states {
        k.push(st.k);
        kbar.push(st.kbar);
        y.push(st.y);
    }
    let mut sol = RiccatiSolution::assemble(spec, options.scheme, k, kbar, y, None)?;
    for (row, norm) in sol.monitor.iter_mut().zip(norms) {
        row.kbar_norm = norm;
    }
    Ok(sol)
}

impl RiccatiSolution {
    /// Rebuilds a solution (caches, `Λ` if absent, monitors) from stored paths.
    pub fn from_paths(
        spec: &ProblemSpec,
        scheme: Scheme,
        k: Vec<MatrixField>,
        kbar: Vec<MatrixKernel>,
        y: Vec<VectorField>,
        lambda: Option<Vec<ScalarField>>,
    ) -> Result<Self> {
        spec.check_structure()?;
        let mut sol = Self::assemble(spec, scheme, k, kbar, y, lambda)?;
        let mut warm: Option<DVector<f64>> = None;
        for (row, kb) in sol.monitor.iter_mut().zip(&sol.kbar) {
            let n = kb.operator_norm_from(warm.as_ref(), NORM_MAX_ITER, NORM_TOL);
            row.kbar_norm = n.value;
            warm = Some(n.vector);
        }
        Ok(sol)
    }

    fn assemble(
        spec: &ProblemSpec,
        scheme: Scheme,
        k: Vec<MatrixField>,
        kbar: Vec<MatrixKernel>,
        y: Vec<VectorField>,
        lambda: Option<Vec<ScalarField>>,
    ) -> Result<Self> {
        let tg = spec.tgrid;
        let lambda = match lambda {
            Some(l) => l,
            None => eval_lambda(spec, &k, &kbar, &y)?,
        };
        if lambda.len() != tg.n_knots() {
            return Err(Error::Dimension {
                context: "Lambda path length",
                expected: tg.n_knots(),
                got: lambda.len(),
            });
        }
        let c = coercivity_constant(spec);
        let n_knots = tg.n_knots();
        let mut o = Vec::with_capacity(n_knots);
        let mut o_inv = Vec::with_capacity(n_knots);
        let mut u = Vec::with_capacity(n_knots);
        let mut v = Vec::with_capacity(n_knots);
        let mut gamma = Vec::with_capacity(n_knots);
        let mut monitor = Vec::with_capacity(n_knots);
        for n in 0..n_knots {
            let coefs = spec.coefficients_at(n);
            let gains = k_gains(&k[n], coefs, c, n)?;
            v.push(v_kernel(&k[n], &kbar[n], coefs)?);
            gamma.push(gamma_field(&k[n], &y[n], coefs));
            monitor.push(MonitorRow {
                t: tg.time(n),
                kbar_norm: 0.0,
                min_eig_k: k[n].iter().map(min_eig).fold(f64::INFINITY, f64::min),
                min_eig_o: gains.o.iter().map(min_eig).fold(f64::INFINITY, f64::min),
            });
            o.push(gains.o);
            o_inv.push(gains.o_inv);
            u.push(gains.u);
        }
        Ok(Self {
            tgrid: tg,
            scheme,
            k,
            kbar,
            y,
            lambda,
            o,
            o_inv,
            u,
            v,
            gamma,
            monitor,
        })
    }

    pub fn grid(&self) -> LabelGrid {
        self.k[0].grid()
    }

    /// Value at `t_0` for the problem's own initial law.
    pub fn initial_value(&self, spec: &ProblemSpec) -> Result<f64> {
        value_function(self, spec, 0, &spec.xi_mean, &spec.xi_second_moment())
    }
}

/// `𝒱 = ∫ tr(K E[ξξᵀ]) + ∫∫ ξ̄ᵀ K̄ ξ̄ + 2 ∫ Yᵀ ξ̄ + ∫ Λ` at knot `t_index`.
pub fn value_function(
    sol: &RiccatiSolution,
    spec: &ProblemSpec,
    t_index: usize,
    xi_mean: &VectorField,
    xi_second_moment: &MatrixField,
) -> Result<f64> {
    let _ = spec;
    if t_index >= sol.k.len() {
        return Err(Error::Dimension {
            context: "value_function knot",
            expected: sol.k.len(),
            got: t_index,
        });
    }
    let h = sol.grid().weight();
    let k = &sol.k[t_index];
    let quad: f64 = k
        .iter()
        .zip(xi_second_moment.iter())
        .map(|(k, s)| (k * s).trace())
        .sum::<f64>()
        * h;
    let kbar_xi = sol.kbar[t_index].apply(xi_mean)?;
    let mean_part = xi_mean.inner(&kbar_xi)?;
    let linear = 2.0 * sol.y[t_index].inner(xi_mean)?;
    let lambda = sol.lambda[t_index].integral();
    Ok(quad + mean_part + linear + lambda)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::LabelGrid;

    fn sc(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    fn scalar_coefs(grid: LabelGrid) -> Coefficients {
        Coefficients::zeros(grid, 1, 1)
    }

    #[test]
    fn zero_k_is_a_fixed_point() {
        let grid = LabelGrid::new(3).unwrap();
        let coefs = scalar_coefs(grid);
        let k = MatrixField::zeros(grid, 1, 1);
        let (r, _) = k_rate(&k, &coefs, 1.0, 0).unwrap();
        assert!(r.iter().all(|m| m[(0, 0)] == 0.0));
    }

    #[test]
    fn systemic_k_driver() {
        let grid = LabelGrid::new(2).unwrap();
        let mut coefs = scalar_coefs(grid);
        let kappa = -0.7;
        let eta = 1.3;
        coefs.a = MatrixField::constant(grid, sc(kappa));
        coefs.b = MatrixField::constant(grid, sc(1.0));
        coefs.q = MatrixField::constant(grid, sc(eta));
        for kv in [0.0, 0.4, 2.5] {
            let k = MatrixField::constant(grid, sc(kv));
            let (r, _) = k_rate(&k, &coefs, 1.0, 0).unwrap();
            let expected = 2.0 * kappa * kv + eta - kv * kv;
            assert!((r[0][(0, 0)] - expected).abs() < 1e-14);
        }
    }

    #[test]
    fn trading_k_driver() {
        let grid = LabelGrid::new(2).unwrap();
        let mut coefs = scalar_coefs(grid);
        coefs.b = MatrixField::constant(grid, sc(1.0));
        let k = MatrixField::constant(grid, sc(1.7));
        let (r, _) = k_rate(&k, &coefs, 1.0, 0).unwrap();
        assert!((r[1][(0, 0)] + 1.7 * 1.7).abs() < 1e-14);
    }

    #[test]
    fn lost_coercivity_is_reported() {
        let grid = LabelGrid::new(2).unwrap();
        let mut coefs = scalar_coefs(grid);
        coefs.d = MatrixField::constant(grid, sc(1.0));
        let k = MatrixField::constant(grid, sc(-0.9));
        let err = k_gains(&k, &coefs, 1.0, 3).unwrap_err();
        assert!(err.to_string().contains("coercivity lost along trajectory"));
    }

    #[test]
    fn zero_kernel_is_a_fixed_point() {
        let grid = LabelGrid::new(3).unwrap();
        let mut coefs = scalar_coefs(grid);
        coefs.a = MatrixField::constant(grid, sc(0.3));
        coefs.b = MatrixField::constant(grid, sc(1.0));
        let k = MatrixField::constant(grid, sc(0.5));
        let gains = k_gains(&k, &coefs, 1.0, 0).unwrap();
        let (f, _) = kbar_rate(&k, &gains, &MatrixKernel::zeros(grid, 1, 1), &coefs).unwrap();
        assert_eq!(f.max_abs(), 0.0);
    }

    #[test]
    fn trading_kbar_driver_with_cross_terms() {
        // B = R = 1, everything else zero: F = −K_u K̄ − K̄ K_v − K̄*∘K̄.
        let grid = LabelGrid::new(3).unwrap();
        let h = grid.weight();
        let mut coefs = scalar_coefs(grid);
        coefs.b = MatrixField::constant(grid, sc(1.0));
        let kv = [0.5, 1.0, 1.5];
        let k = MatrixField::from_fn(grid, |i, _| sc(kv[i]));
        let kb = |i: usize, j: usize| 0.1 * (1.0 + i as f64 + j as f64) - 0.05 * (i * j) as f64;
        let kbar = MatrixKernel::from_blocks(grid, 1, 1, |i, j| sc(kb(i, j))).unwrap();
        let gains = k_gains(&k, &coefs, 1.0, 0).unwrap();
        let (f, v) = kbar_rate(&k, &gains, &kbar, &coefs).unwrap();
        assert_eq!(v, kbar);
        for i in 0..3 {
            for j in 0..3 {
                let comp: f64 = (0..3).map(|w| h * kb(w, i) * kb(w, j)).sum();
                let expected = -kv[i] * kb(i, j) - kb(i, j) * kv[j] - comp;
                assert!((f.block(i, j)[(0, 0)] - expected).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn y_driver_vanishes_without_forcing() {
        let grid = LabelGrid::new(3).unwrap();
        let mut coefs = scalar_coefs(grid);
        coefs.a = MatrixField::constant(grid, sc(0.3));
        coefs.b = MatrixField::constant(grid, sc(1.0));
        coefs.g_a = MatrixKernel::scalar(grid, |u, v| u * v);
        let k = MatrixField::constant(grid, sc(0.5));
        let kbar = MatrixKernel::scalar(grid, |u, v| 0.1 + u * v);
        let gains = k_gains(&k, &coefs, 1.0, 0).unwrap();
        let v = v_kernel(&k, &kbar, &coefs).unwrap();
        let y = VectorField::zeros(grid, 1);
        let (r, _) = y_rate(&k, &gains, &kbar, &v, &y, &coefs).unwrap();
        assert!(r.iter().all(|x| x[0] == 0.0));
    }

    #[test]
    fn trading_gamma_includes_offset() {
        let grid = LabelGrid::new(2).unwrap();
        let mut coefs = scalar_coefs(grid);
        coefs.b = MatrixField::constant(grid, sc(1.0));
        coefs.i_off = VectorField::from_fn(grid, |i, _| DVector::from_element(1, 0.5 + i as f64));
        let y = VectorField::from_fn(grid, |i, _| DVector::from_element(1, -0.2 * i as f64));
        let k = MatrixField::constant(grid, sc(0.9));
        let g = gamma_field(&k, &y, &coefs);
        assert!((g[0][0] - 0.5).abs() < 1e-15);
        assert!((g[1][0] - (1.5 - 0.2)).abs() < 1e-15);
    }

    #[test]
    fn scheme_parses() {
        assert_eq!("RK4".parse::<Scheme>().unwrap(), Scheme::Rk4);
        assert_eq!("euler".parse::<Scheme>().unwrap(), Scheme::Euler);
        assert!("midpoint".parse::<Scheme>().is_err());
    }
}
