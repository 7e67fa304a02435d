//! Builders for the optimal-trading and systemic-risk models, and a scalar
//! reference integrator for their label-homogeneous versions.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::kernel::{LabelGrid, MatrixField, MatrixKernel, ScalarField, VectorField, SYMMETRY_TOL};
use crate::model::{centered_transform, validate, Coefficients, ProblemSpec, TimeGrid};

fn sc(v: f64) -> DMatrix<f64> {
    DMatrix::from_element(1, 1, v)
}

fn sv(v: f64) -> DVector<f64> {
    DVector::from_element(1, v)
}

fn scalar_matrices(f: &ScalarField) -> MatrixField {
    f.map(|&v| sc(v))
}

/// Traders with inventory `dX = α dt + σ dW + σ₀ dB̃⁰`, cost
/// `∫ (α + P)² dt + λ (X_T − T_{G̃λ} X̄_T)²`.
#[derive(Clone, Debug)]
pub struct TradingParams {
    pub tgrid: TimeGrid,
    pub p: ScalarField,
    pub lambda: ScalarField,
    pub g_lambda: MatrixKernel,
    /// Idiosyncratic volatility, one field per knot or a single field.
    pub sigma: Vec<ScalarField>,
    /// Common-noise volatility, same layout as `sigma`.
    pub sigma0: Vec<ScalarField>,
    pub xi_mean: ScalarField,
    pub xi_var: ScalarField,
}

/// Banks with log-reserves `dX = [κ(X − T_{G̃κ}X̄) + α] dt + σ(√(1−ρ²) dW + ρ dB̃⁰)`.
#[derive(Clone, Debug)]
pub struct SystemicParams {
    pub tgrid: TimeGrid,
    pub kappa: f64,
    pub g_kappa: MatrixKernel,
    pub g_eta: MatrixKernel,
    pub g_r: MatrixKernel,
    pub eta: ScalarField,
    pub r: ScalarField,
    /// Volatility, one field per knot or a single field.
    pub sigma: Vec<ScalarField>,
    /// Common-noise correlation, same layout as `sigma`.
    pub rho: Vec<ScalarField>,
    pub xi_mean: ScalarField,
    pub xi_var: ScalarField,
}

fn check_layout(name: &str, f: &[ScalarField], grid: LabelGrid, tgrid: TimeGrid) -> Result<()> {
    if f.len() != 1 && f.len() != tgrid.n_knots() {
        return Err(Error::InvalidParameter(format!(
            "{name} needs one field or one per knot ({}), got {}",
            tgrid.n_knots(),
            f.len()
        )));
    }
    for x in f {
        grid.ensure_same(&x.grid())?;
        x.check_finite(name)?;
    }
    Ok(())
}

fn check_graphon(name: &str, g: &MatrixKernel, grid: LabelGrid) -> Result<()> {
    grid.ensure_same(&g.grid())?;
    if g.block_shape() != (1, 1) {
        return Err(Error::InvalidParameter(format!(
            "{name} must be a scalar kernel"
        )));
    }
    let dev = g.symmetry_defect();
    if dev > SYMMETRY_TOL {
        return Err(Error::NotSymmetric {
            name: name.into(),
            deviation: dev,
        });
    }
    Ok(())
}

fn check_nonneg(name: &str, f: &ScalarField, strict: bool) -> Result<()> {
    f.check_finite(name)?;
    if let Some((i, v)) = f
        .iter()
        .enumerate()
        .find(|(_, &v)| if strict { !(v > 0.0) } else { !(v >= 0.0) })
    {
        let rel = if strict { "> 0" } else { ">= 0" };
        return Err(Error::InvalidParameter(format!(
            "{name} must be {rel} (label {i}: {v})"
        )));
    }
    Ok(())
}

fn at(f: &[ScalarField], n: usize) -> &ScalarField {
    &f[n.min(f.len() - 1)]
}

fn per_knot<F: Fn(usize) -> Coefficients>(
    n: usize,
    time_dependent: bool,
    f: F,
) -> Vec<Coefficients> {
    if time_dependent {
        (0..n).map(f).collect()
    } else {
        vec![f(0)]
    }
}

impl TradingParams {
    pub fn grid(&self) -> LabelGrid {
        self.lambda.grid()
    }

    pub fn validate(&self) -> Result<()> {
        let grid = self.grid();
        check_nonneg("lambda", &self.lambda, false)?;
        check_nonneg("xi_var", &self.xi_var, false)?;
        grid.ensure_same(&self.p.grid())?;
        self.p.check_finite("P")?;
        grid.ensure_same(&self.xi_mean.grid())?;
        check_graphon("G_lambda", &self.g_lambda, grid)?;
        check_layout("sigma", &self.sigma, grid, self.tgrid)?;
        check_layout("sigma0", &self.sigma0, grid, self.tgrid)
    }
}

impl SystemicParams {
    pub fn grid(&self) -> LabelGrid {
        self.eta.grid()
    }

    pub fn validate(&self) -> Result<()> {
        let grid = self.grid();
        if !(self.kappa <= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "kappa must be <= 0, got {}",
                self.kappa
            )));
        }
        check_nonneg("eta", &self.eta, true)?;
        check_nonneg("r", &self.r, true)?;
        check_nonneg("xi_var", &self.xi_var, false)?;
        grid.ensure_same(&self.xi_mean.grid())?;
        check_graphon("G_kappa", &self.g_kappa, grid)?;
        check_graphon("G_eta", &self.g_eta, grid)?;
        check_graphon("G_r", &self.g_r, grid)?;
        check_layout("sigma", &self.sigma, grid, self.tgrid)?;
        check_layout("rho", &self.rho, grid, self.tgrid)?;
        for rho in &self.rho {
            if let Some(v) = rho.iter().find(|v| !(-1.0..=1.0).contains(*v)) {
                return Err(Error::InvalidParameter(format!(
                    "rho must lie in [-1, 1], got {v}"
                )));
            }
        }
        Ok(())
    }
}

pub fn build_trading(params: &TradingParams) -> Result<ProblemSpec> {
    params.validate()?;
    let grid = params.grid();
    let tg = params.tgrid;
    let time_dependent = params.sigma.len() > 1 || params.sigma0.len() > 1;
    let coefficients = per_knot(tg.n_knots(), time_dependent, |n| {
        let mut c = Coefficients::zeros(grid, 1, 1);
        c.b = MatrixField::constant(grid, sc(1.0));
        c.gamma = at(&params.sigma, n).map(|&v| sv(v));
        c.theta = at(&params.sigma0, n).map(|&v| sv(v));
        c.i_off = params.p.map(|&v| sv(v));
        c
    });
    let lambda = scalar_matrices(&params.lambda);
    let mut spec = ProblemSpec::new(tg, coefficients[0].clone());
    spec.coefficients = coefficients;
    spec.g_h = centered_transform(&params.g_lambda, &lambda)?;
    spec.h = lambda;
    spec.xi_mean = params.xi_mean.map(|&v| sv(v));
    spec.xi_cov = scalar_matrices(&params.xi_var);
    validate(&spec)?;
    Ok(spec)
}

pub fn build_systemic(params: &SystemicParams) -> Result<ProblemSpec> {
    params.validate()?;
    let grid = params.grid();
    let tg = params.tgrid;
    let kappa = params.kappa;
    let eta = scalar_matrices(&params.eta);
    let r = scalar_matrices(&params.r);
    let g_q = centered_transform(&params.g_eta, &eta)?;
    let g_a = params.g_kappa.scale(-kappa);
    let time_dependent = params.sigma.len() > 1 || params.rho.len() > 1;
    let coefficients = per_knot(tg.n_knots(), time_dependent, |n| {
        let (sigma, rho) = (at(&params.sigma, n), at(&params.rho, n));
        let mut c = Coefficients::zeros(grid, 1, 1);
        c.a = MatrixField::constant(grid, sc(kappa));
        c.g_a = g_a.clone();
        c.b = MatrixField::constant(grid, sc(1.0));
        c.gamma = VectorField::from_fn(grid, |i, _| sv(sigma[i] * (1.0 - rho[i] * rho[i]).sqrt()));
        c.theta = VectorField::from_fn(grid, |i, _| sv(sigma[i] * rho[i]));
        c.q = eta.clone();
        c.g_q = g_q.clone();
        c
    });
    let mut spec = ProblemSpec::new(tg, coefficients[0].clone());
    spec.coefficients = coefficients;
    spec.g_h = centered_transform(&params.g_r, &r)?;
    spec.h = r;
    spec.xi_mean = params.xi_mean.map(|&v| sv(v));
    spec.xi_cov = scalar_matrices(&params.xi_var);
    validate(&spec)?;
    Ok(spec)
}

/// Scalar inputs of the label-homogeneous models with unit graphons.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
#[serde(tag = "app", rename_all = "snake_case")]
pub enum HomogeneousModel {
    Trading { lambda: f64 },
    Systemic { kappa: f64, eta: f64, r: f64 },
}

fn uniform(f: &ScalarField, name: &str) -> Result<f64> {
    let v = f[0];
    if f.iter().any(|&x| x != v) {
        return Err(Error::InvalidParameter(format!(
            "{name} is not label-constant"
        )));
    }
    Ok(v)
}

fn unit_graphon(g: &MatrixKernel, name: &str) -> Result<()> {
    if g.dense().iter().any(|&x| x != 1.0) {
        return Err(Error::InvalidParameter(format!(
            "{name} is not the unit graphon"
        )));
    }
    Ok(())
}

impl HomogeneousModel {
    pub fn from_trading(p: &TradingParams) -> Result<Self> {
        unit_graphon(&p.g_lambda, "G_lambda")?;
        Ok(HomogeneousModel::Trading {
            lambda: uniform(&p.lambda, "lambda")?,
        })
    }

    pub fn from_systemic(p: &SystemicParams) -> Result<Self> {
        unit_graphon(&p.g_kappa, "G_kappa")?;
        unit_graphon(&p.g_eta, "G_eta")?;
        unit_graphon(&p.g_r, "G_r")?;
        Ok(HomogeneousModel::Systemic {
            kappa: p.kappa,
            eta: uniform(&p.eta, "eta")?,
            r: uniform(&p.r, "r")?,
        })
    }

    /// `(K_T, k̄_T)`.
    fn terminal(&self) -> (f64, f64) {
        match *self {
            HomogeneousModel::Trading { lambda } => (lambda, -lambda),
            HomogeneousModel::Systemic { r, .. } => (r, -r),
        }
    }

    /// `(dK/dτ, dk̄/dτ)` in reversed time `τ = T − t`.
    fn rates(&self, k: f64, kb: f64) -> (f64, f64) {
        match *self {
            HomogeneousModel::Trading { .. } => (-k * k, -2.0 * k * kb - kb * kb),
            HomogeneousModel::Systemic { kappa, eta, .. } => (
                2.0 * kappa * k + eta - k * k,
                -2.0 * kappa * k - eta - 2.0 * k * kb - kb * kb,
            ),
        }
    }
}

/// Reference solution on the knots of a time grid.
#[derive(Clone, Debug, Serialize)]
pub struct OraclePaths {
    pub t: Vec<f64>,
    pub k: Vec<f64>,
    pub kbar: Vec<f64>,
    /// Feedback `α = gain_state·X + gain_mean·∫X̄ − Y − P`.
    pub gain_state: Vec<f64>,
    pub gain_mean: Vec<f64>,
}

/// Integrates the constant-kernel reduction of the Riccati pair with RK4 on
/// a grid sixteen times finer than `tgrid`.
pub fn homogeneous_oracle(model: HomogeneousModel, tgrid: TimeGrid) -> Result<OraclePaths> {
    const REFINE: usize = 16;
    let n = tgrid.n_steps();
    let dt = tgrid.dt() / REFINE as f64;
    let (mut k, mut kb) = model.terminal();
    let mut ks = vec![0.0; n + 1];
    let mut kbs = vec![0.0; n + 1];
    ks[n] = k;
    kbs[n] = kb;
    for knot in (0..n).rev() {
        for _ in 0..REFINE {
            let (a1, b1) = model.rates(k, kb);
            let (a2, b2) = model.rates(k + 0.5 * dt * a1, kb + 0.5 * dt * b1);
            let (a3, b3) = model.rates(k + 0.5 * dt * a2, kb + 0.5 * dt * b2);
            let (a4, b4) = model.rates(k + dt * a3, kb + dt * b3);
            k += dt / 6.0 * (a1 + 2.0 * a2 + 2.0 * a3 + a4);
            kb += dt / 6.0 * (b1 + 2.0 * b2 + 2.0 * b3 + b4);
        }
        if !k.is_finite() || !kb.is_finite() {
            return Err(Error::BlowUp {
                knot,
                norm: kb.abs(),
                cap: f64::INFINITY,
            });
        }
        ks[knot] = k;
        kbs[knot] = kb;
    }
    Ok(OraclePaths {
        t: tgrid.times(),
        gain_state: ks.iter().map(|k| -k).collect(),
        gain_mean: kbs.iter().map(|k| -k).collect(),
        k: ks,
        kbar: kbs,
    })
}
