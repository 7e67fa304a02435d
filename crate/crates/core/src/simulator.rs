//! Euler–Maruyama Monte Carlo of the controlled label-indexed system with
//! common noise, cost estimation and the optimality harness.
//!
//! Conditional means `X̄ = E[X | B̃⁰]` are propagated by their own closed
//! equation once per common path; idiosyncratic replicas then reuse them.
//! Several policies can be evaluated on the same random numbers.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::kernel::{LabelGrid, MatrixField, MatrixKernel, VectorField};
use crate::model::{Coefficients, InitialSampler, ProblemSpec, TimeGrid};
use crate::riccati::RiccatiSolution;

/// Words of the ChaCha stream reserved for one replica of one common path.
const REPLICA_STRIDE: u128 = 1 << 40;

/// Generator for `slot` (0: common noise, `k + 1`: idiosyncratic replica `k`)
/// of common path `common`. Streams never overlap and do not depend on the
/// order in which paths are processed.
pub fn path_rng(seed: u64, common: usize, slot: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(common as u64);
    rng.set_word_pos(slot as u128 * REPLICA_STRIDE);
    rng
}

#[derive(Clone, Debug)]
pub enum ControlPolicy {
    /// `α = −O⁻¹(U X + T_V X̄ + Γ)`.
    Feedback,
    /// Deterministic control values: one field per interval, or a single field
    /// used on every interval.
    OpenLoopField(Vec<VectorField>),
    /// Feedback plus `eps · δ`; `delta` follows the same layout as
    /// [`ControlPolicy::OpenLoopField`].
    PerturbedFeedback { eps: f64, delta: Vec<VectorField> },
}

impl ControlPolicy {
    pub fn perturbed(eps: f64, delta: VectorField) -> Self {
        ControlPolicy::PerturbedFeedback {
            eps,
            delta: vec![delta],
        }
    }

    pub fn is_feedback(&self) -> bool {
        !matches!(self, ControlPolicy::OpenLoopField(_))
    }

    fn check(&self, spec: &ProblemSpec, sol: Option<&RiccatiSolution>) -> Result<()> {
        let n_steps = spec.tgrid.n_steps();
        let check_fields = |name: &str, fields: &[VectorField]| -> Result<()> {
            let n = fields.len();
            if n != 1 && n != n_steps && n != n_steps + 1 {
                return Err(Error::Dimension {
                    context: "policy field count",
                    expected: n_steps,
                    got: n,
                });
            }
            for f in fields {
                spec.grid.ensure_same(&f.grid())?;
                if f.iter().any(|v| v.len() != spec.control_dim) {
                    return Err(Error::Dimension {
                        context: "policy control dimension",
                        expected: spec.control_dim,
                        got: f.dim(),
                    });
                }
                f.check_finite(name)?;
            }
            Ok(())
        };
        match self {
            ControlPolicy::Feedback => {}
            ControlPolicy::OpenLoopField(a) => check_fields("open-loop control", a)?,
            ControlPolicy::PerturbedFeedback { eps, delta } => {
                if !eps.is_finite() {
                    return Err(Error::InvalidParameter(
                        "perturbation size must be finite".into(),
                    ));
                }
                check_fields("perturbation", delta)?;
            }
        }
        if self.is_feedback() {
            let sol = sol.ok_or(Error::UnsupportedPolicy(
                "feedback policies need a Riccati solution",
            ))?;
            spec.grid.ensure_same(&sol.grid())?;
            if sol.tgrid != spec.tgrid {
                return Err(Error::InvalidParameter(
                    "Riccati solution and problem use different time grids".into(),
                ));
            }
        }
        Ok(())
    }
}

fn field_at(fields: &[VectorField], n: usize) -> &VectorField {
    &fields[n.min(fields.len() - 1)]
}

/// Running-state, control and terminal parts of a cost.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct CostBreakdown {
    pub state: f64,
    pub control: f64,
    pub terminal: f64,
}

impl CostBreakdown {
    pub fn total(&self) -> f64 {
        self.state + self.control + self.terminal
    }

    fn add(&self, o: &CostBreakdown) -> CostBreakdown {
        CostBreakdown {
            state: self.state + o.state,
            control: self.control + o.control,
            terminal: self.terminal + o.terminal,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CostEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub n_samples: usize,
    pub breakdown: CostBreakdown,
}

/// Stored trajectories. Flat layouts: `xbar[c][knot·N·d + u·d + j]`,
/// `x[s][knot·N·d + …]`, `alpha[s][n·N·m + u·m + j]` with sample index
/// `s = c·n_idio + k`.
#[derive(Clone, Debug)]
pub struct PathRecord {
    pub common_increments: Vec<Vec<f64>>,
    pub xbar: Vec<Vec<f64>>,
    pub x: Vec<Vec<f64>>,
    pub alpha: Vec<Vec<f64>>,
}

/// Sums of `X` and `X²` over idiosyncratic replicas, per knot, one common path.
#[derive(Clone, Debug)]
pub struct StateMoments {
    pub count: usize,
    pub sum: Vec<f64>,
    pub sum_sq: Vec<f64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SimulationOptions {
    pub record_paths: bool,
    pub record_moments: bool,
}

#[derive(Clone, Debug)]
pub struct SimulationEnsemble {
    pub grid: LabelGrid,
    pub tgrid: TimeGrid,
    pub state_dim: usize,
    pub control_dim: usize,
    pub n_common: usize,
    pub n_idio: usize,
    pub seed: u64,
    /// Conditional-mean cost terms, one entry per common path.
    pub common_costs: Vec<CostBreakdown>,
    /// Remaining cost terms, one entry per `(common, idio)` sample.
    pub sample_costs: Vec<CostBreakdown>,
    pub paths: Option<PathRecord>,
    pub moments: Option<Vec<StateMoments>>,
}

impl SimulationEnsemble {
    /// Total realized cost of each common path, averaged over its replicas.
    pub fn common_path_costs(&self) -> Vec<f64> {
        (0..self.n_common)
            .map(|c| {
                let idio = &self.sample_costs[c * self.n_idio..(c + 1) * self.n_idio];
                let s: Vec<f64> = idio.iter().map(CostBreakdown::total).collect();
                self.common_costs[c].total() + pairwise_sum(&s) / self.n_idio as f64
            })
            .collect()
    }

    pub fn xbar_at(&self, common: usize, knot: usize) -> Option<VectorField> {
        let p = self.paths.as_ref()?;
        let nd = self.grid.len() * self.state_dim;
        let flat = DVector::from_column_slice(&p.xbar[common][knot * nd..(knot + 1) * nd]);
        VectorField::from_flat(self.grid, self.state_dim, &flat).ok()
    }

    pub fn x_at(&self, sample: usize, knot: usize) -> Option<VectorField> {
        let p = self.paths.as_ref()?;
        let nd = self.grid.len() * self.state_dim;
        let flat = DVector::from_column_slice(&p.x[sample][knot * nd..(knot + 1) * nd]);
        VectorField::from_flat(self.grid, self.state_dim, &flat).ok()
    }
}

/// Fixed-order pairwise summation.
pub fn pairwise_sum(x: &[f64]) -> f64 {
    if x.len() <= 8 {
        return x.iter().sum();
    }
    let mid = x.len() / 2;
    pairwise_sum(&x[..mid]) + pairwise_sum(&x[mid..])
}

/// Mean and standard error of the mean.
pub fn mean_and_se(x: &[f64]) -> (f64, f64) {
    let n = x.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = pairwise_sum(x) / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let dev: Vec<f64> = x.iter().map(|v| (v - mean) * (v - mean)).collect();
    let var = pairwise_sum(&dev) / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

// Per-label small matrices, row-major.
fn flat_mats(f: &MatrixField) -> Vec<f64> {
    let mut out = Vec::new();
    for m in f.iter() {
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                out.push(m[(i, j)]);
            }
        }
    }
    out
}

fn flat_vecs(f: &VectorField) -> Vec<f64> {
    f.iter().flat_map(|v| v.iter().copied()).collect()
}

fn scaled_dense(k: &MatrixKernel) -> Option<DMatrix<f64>> {
    (k.max_abs() > 0.0).then(|| k.dense() * k.grid().weight())
}

#[inline]
fn gemv_add(out: &mut [f64], m: &[f64], x: &[f64]) {
    let cols = x.len();
    for (i, o) in out.iter_mut().enumerate() {
        let row = &m[i * cols..(i + 1) * cols];
        *o += row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

#[inline]
fn quad(m: &[f64], x: &[f64]) -> f64 {
    let d = x.len();
    let mut s = 0.0;
    for i in 0..d {
        let row = &m[i * d..(i + 1) * d];
        s += x[i] * row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
    s
}

fn kernel_apply(k: &Option<DMatrix<f64>>, x: &DVector<f64>, out: &mut [f64]) {
    if let Some(k) = k {
        let y = k * x;
        for (o, v) in out.iter_mut().zip(y.iter()) {
            *o += v;
        }
    }
}

struct CoefFlat {
    a: Vec<f64>,
    b: Vec<f64>,
    c: Vec<f64>,
    d: Vec<f64>,
    q: Vec<f64>,
    r: Vec<f64>,
    i_off: Vec<f64>,
    beta: Vec<f64>,
    gamma: Vec<f64>,
    theta: Vec<f64>,
    g_a: Option<DMatrix<f64>>,
    g_c: Option<DMatrix<f64>>,
    g_q: Option<DMatrix<f64>>,
}

impl CoefFlat {
    fn new(c: &Coefficients) -> Self {
        Self {
            a: flat_mats(&c.a),
            b: flat_mats(&c.b),
            c: flat_mats(&c.c),
            d: flat_mats(&c.d),
            q: flat_mats(&c.q),
            r: flat_mats(&c.r),
            i_off: flat_vecs(&c.i_off),
            beta: flat_vecs(&c.beta),
            gamma: flat_vecs(&c.gamma),
            theta: flat_vecs(&c.theta),
            g_a: scaled_dense(&c.g_a),
            g_c: scaled_dense(&c.g_c),
            g_q: scaled_dense(&c.g_q),
        }
    }
}

/// Feedback data on one interval: `α = gain·X + v·X̄ + offset`.
struct FeedbackFlat {
    gain: Vec<f64>,
    v: DMatrix<f64>,
    offset: Vec<f64>,
}

struct PolicyFlat {
    feedback: bool,
    /// Per interval: open-loop values, or `eps·δ` for feedback policies.
    shift: Vec<Vec<f64>>,
}

struct Context {
    n: usize,
    d: usize,
    m: usize,
    h: f64,
    dt: f64,
    n_steps: usize,
    coefs: Vec<CoefFlat>,
    terminal: Vec<f64>,
    g_h: Option<DMatrix<f64>>,
    feedback: Vec<FeedbackFlat>,
    sampler: InitialSampler,
    xi_mean: Vec<f64>,
}

impl Context {
    fn new(spec: &ProblemSpec, sol: Option<&RiccatiSolution>, need_feedback: bool) -> Result<Self> {
        spec.check_structure()?;
        let n_steps = spec.tgrid.n_steps();
        let h = spec.grid.weight();
        let feedback = if need_feedback {
            let sol = sol.ok_or(Error::UnsupportedPolicy(
                "feedback policies need a Riccati solution",
            ))?;
            (0..n_steps)
                .map(|n| -> Result<FeedbackFlat> {
                    let gain = sol.o_inv[n].zip_map(&sol.u[n], |oi, u| -(oi * u))?;
                    let v = sol.v[n].left_diag(&sol.o_inv[n])?.dense() * (-h);
                    let offset = sol.o_inv[n].mul_vectors(&sol.gamma[n])?;
                    Ok(FeedbackFlat {
                        gain: flat_mats(&gain),
                        v,
                        offset: flat_vecs(&offset).into_iter().map(|x| -x).collect(),
                    })
                })
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        Ok(Self {
            n: spec.grid.len(),
            d: spec.state_dim,
            m: spec.control_dim,
            h,
            dt: spec.tgrid.dt(),
            n_steps,
            coefs: spec.coefficients.iter().map(CoefFlat::new).collect(),
            terminal: flat_mats(&spec.h),
            g_h: scaled_dense(&spec.g_h),
            feedback,
            sampler: InitialSampler::new(spec)?,
            xi_mean: flat_vecs(&spec.xi_mean),
        })
    }

    fn coefs(&self, n: usize) -> &CoefFlat {
        &self.coefs[n.min(self.coefs.len() - 1)]
    }

    fn policy(&self, p: &ControlPolicy) -> PolicyFlat {
        let nm = self.n * self.m;
        match p {
            ControlPolicy::Feedback => PolicyFlat {
                feedback: true,
                shift: vec![vec![0.0; nm]; self.n_steps],
            },
            ControlPolicy::PerturbedFeedback { eps, delta } => PolicyFlat {
                feedback: true,
                shift: (0..self.n_steps)
                    .map(|n| {
                        flat_vecs(field_at(delta, n))
                            .into_iter()
                            .map(|x| eps * x)
                            .collect()
                    })
                    .collect(),
            },
            ControlPolicy::OpenLoopField(a) => PolicyFlat {
                feedback: false,
                shift: (0..self.n_steps)
                    .map(|n| flat_vecs(field_at(a, n)))
                    .collect(),
            },
        }
    }
}

/// Common-path quantities for one policy: `X̄` per knot and the parts of the
/// drift, diffusion and control that only depend on `X̄`.
struct CommonPath {
    xbar: Vec<DVector<f64>>,
    drift: Vec<Vec<f64>>,
    diffusion: Vec<Vec<f64>>,
    control: Vec<Vec<f64>>,
    cost: CostBreakdown,
}

#[allow(clippy::needless_range_loop)]
fn propagate_common(ctx: &Context, policy: &PolicyFlat, db0: &[f64]) -> Result<CommonPath> {
    let (n, d, m, dt, h) = (ctx.n, ctx.d, ctx.m, ctx.dt, ctx.h);
    let nd = n * d;
    let mut xbar = Vec::with_capacity(ctx.n_steps + 1);
    let mut drift = Vec::with_capacity(ctx.n_steps);
    let mut diffusion = Vec::with_capacity(ctx.n_steps);
    let mut control = Vec::with_capacity(ctx.n_steps);
    let mut cost = CostBreakdown::default();
    let mut x = DVector::from_column_slice(&ctx.xi_mean);
    let mut abar = vec![0.0; m];
    for step in 0..ctx.n_steps {
        let cf = ctx.coefs(step);
        let mut dr = cf.beta.clone();
        kernel_apply(&cf.g_a, &x, &mut dr);
        let mut df = cf.gamma.clone();
        kernel_apply(&cf.g_c, &x, &mut df);
        let mut ac = policy.shift[step].clone();
        if policy.feedback {
            let fb = &ctx.feedback[step];
            let vx = &fb.v * &x;
            for (k, a) in ac.iter_mut().enumerate() {
                *a += vx[k] + fb.offset[k];
            }
        }
        if let Some(g) = &cf.g_q {
            cost.state += dt * h * x.dot(&(g * &x));
        }
        let mut next = DVector::zeros(nd);
        for u in 0..n {
            let xu = &x.as_slice()[u * d..(u + 1) * d];
            abar.copy_from_slice(&ac[u * m..(u + 1) * m]);
            if policy.feedback {
                gemv_add(
                    &mut abar,
                    &ctx.feedback[step].gain[u * m * d..(u + 1) * m * d],
                    xu,
                );
            }
            let mut f = dr[u * d..(u + 1) * d].to_vec();
            gemv_add(&mut f, &cf.a[u * d * d..(u + 1) * d * d], xu);
            gemv_add(&mut f, &cf.b[u * d * m..(u + 1) * d * m], &abar);
            for j in 0..d {
                next[u * d + j] = xu[j] + dt * f[j] + cf.theta[u * d + j] * db0[step];
            }
        }
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::SimulationDiverged { knot: step + 1 });
        }
        xbar.push(std::mem::replace(&mut x, next));
        drift.push(dr);
        diffusion.push(df);
        control.push(ac);
    }
    if let Some(g) = &ctx.g_h {
        cost.terminal += h * x.dot(&(g * &x));
    }
    xbar.push(x);
    Ok(CommonPath {
        xbar,
        drift,
        diffusion,
        control,
        cost,
    })
}

struct ReplicaOutput {
    cost: CostBreakdown,
    x: Option<Vec<f64>>,
    alpha: Option<Vec<f64>>,
}

/// Per-step inputs shared by every label.
struct StepInputs<'a> {
    cf: &'a CoefFlat,
    gain: Option<&'a [f64]>,
    drift: &'a [f64],
    diffusion: &'a [f64],
    control: &'a [f64],
    dw: &'a [f64],
    b0: f64,
}

/// Advances all labels by one step. Returns the label sums of `XᵀQX` and
/// `(α+I)ᵀR(α+I)`.
fn step_scalar(
    dt: f64,
    s: &StepInputs,
    x: &[f64],
    next: &mut [f64],
    alphas: Option<&mut Vec<f64>>,
) -> (f64, f64) {
    let cf = s.cf;
    let (mut state, mut control) = (0.0, 0.0);
    let mut record = alphas;
    for u in 0..x.len() {
        let xu = x[u];
        let mut alpha = s.control[u];
        if let Some(g) = s.gain {
            alpha += g[u] * xu;
        }
        let sh = alpha + cf.i_off[u];
        control += cf.r[u] * sh * sh;
        state += cf.q[u] * xu * xu;
        let f = s.drift[u] + cf.a[u] * xu + cf.b[u] * alpha;
        let g = s.diffusion[u] + cf.c[u] * xu + cf.d[u] * alpha;
        next[u] = xu + dt * f + g * s.dw[u] + cf.theta[u] * s.b0;
        if let Some(a) = record.as_mut() {
            a.push(alpha);
        }
    }
    (state, control)
}

fn step_general(
    dt: f64,
    (n, d, m): (usize, usize, usize),
    s: &StepInputs,
    x: &[f64],
    next: &mut [f64],
    alphas: Option<&mut Vec<f64>>,
) -> (f64, f64) {
    let cf = s.cf;
    let mut alpha = vec![0.0; m];
    let mut shifted = vec![0.0; m];
    let mut f = vec![0.0; d];
    let mut g = vec![0.0; d];
    let (mut state, mut control) = (0.0, 0.0);
    let mut record = alphas;
    for u in 0..n {
        let xu = &x[u * d..(u + 1) * d];
        alpha.copy_from_slice(&s.control[u * m..(u + 1) * m]);
        if let Some(gain) = s.gain {
            gemv_add(&mut alpha, &gain[u * m * d..(u + 1) * m * d], xu);
        }
        for j in 0..m {
            shifted[j] = alpha[j] + cf.i_off[u * m + j];
        }
        control += quad(&cf.r[u * m * m..(u + 1) * m * m], &shifted);
        state += quad(&cf.q[u * d * d..(u + 1) * d * d], xu);

        f.copy_from_slice(&s.drift[u * d..(u + 1) * d]);
        gemv_add(&mut f, &cf.a[u * d * d..(u + 1) * d * d], xu);
        gemv_add(&mut f, &cf.b[u * d * m..(u + 1) * d * m], &alpha);
        g.copy_from_slice(&s.diffusion[u * d..(u + 1) * d]);
        gemv_add(&mut g, &cf.c[u * d * d..(u + 1) * d * d], xu);
        gemv_add(&mut g, &cf.d[u * d * m..(u + 1) * d * m], &alpha);
        let w = s.dw[u];
        for j in 0..d {
            next[u * d + j] = xu[j] + dt * f[j] + g[j] * w + cf.theta[u * d + j] * s.b0;
        }
        if let Some(a) = record.as_mut() {
            a.extend_from_slice(&alpha);
        }
    }
    (state, control)
}

#[allow(clippy::too_many_arguments)]
fn run_replica(
    ctx: &Context,
    policy: &PolicyFlat,
    common: &CommonPath,
    xi: &[f64],
    dw: &[f64],
    db0: &[f64],
    options: SimulationOptions,
    moments: Option<&mut StateMoments>,
) -> Result<ReplicaOutput> {
    let (n, d, m, dt, h) = (ctx.n, ctx.d, ctx.m, ctx.dt, ctx.h);
    let nd = n * d;
    let scalar = d == 1 && m == 1;
    let mut x = xi.to_vec();
    let mut next = vec![0.0; nd];
    let mut cost = CostBreakdown::default();
    let record = options.record_paths;
    let mut xs = record.then(|| Vec::with_capacity((ctx.n_steps + 1) * nd));
    let mut alphas = record.then(|| Vec::with_capacity(ctx.n_steps * n * m));
    let mut moments = moments;
    let push_moments = |x: &[f64], knot: usize, mom: &mut Option<&mut StateMoments>| {
        if let Some(mm) = mom.as_deref_mut() {
            for (j, v) in x.iter().enumerate() {
                mm.sum[knot * nd + j] += v;
                mm.sum_sq[knot * nd + j] += v * v;
            }
        }
    };
    for step in 0..ctx.n_steps {
        if let Some(xs) = xs.as_mut() {
            xs.extend_from_slice(&x);
        }
        push_moments(&x, step, &mut moments);
        let inputs = StepInputs {
            cf: ctx.coefs(step),
            gain: policy.feedback.then(|| ctx.feedback[step].gain.as_slice()),
            drift: &common.drift[step],
            diffusion: &common.diffusion[step],
            control: &common.control[step],
            dw: &dw[step * n..(step + 1) * n],
            b0: db0[step],
        };
        let (state, control) = if scalar {
            step_scalar(dt, &inputs, &x, &mut next, alphas.as_mut())
        } else {
            step_general(dt, (n, d, m), &inputs, &x, &mut next, alphas.as_mut())
        };
        cost.state += dt * h * state;
        cost.control += dt * h * control;
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::SimulationDiverged { knot: step + 1 });
        }
        std::mem::swap(&mut x, &mut next);
    }
    let terminal: f64 = (0..n)
        .map(|u| {
            quad(
                &ctx.terminal[u * d * d..(u + 1) * d * d],
                &x[u * d..(u + 1) * d],
            )
        })
        .sum();
    cost.terminal += h * terminal;
    push_moments(&x, ctx.n_steps, &mut moments);
    if let Some(xs) = xs.as_mut() {
        xs.extend_from_slice(&x);
    }
    Ok(ReplicaOutput {
        cost,
        x: xs,
        alpha: alphas,
    })
}

struct CommonOutput {
    common_cost: CostBreakdown,
    idio_costs: Vec<CostBreakdown>,
    db0: Option<Vec<f64>>,
    xbar: Option<Vec<f64>>,
    x: Vec<Vec<f64>>,
    alpha: Vec<Vec<f64>>,
    moments: Option<StateMoments>,
}

fn draw_normals(rng: &mut ChaCha8Rng, out: &mut [f64], scale: f64) {
    for v in out.iter_mut() {
        let z: f64 = rng.sample(StandardNormal);
        *v = scale * z;
    }
}

fn run_common(
    ctx: &Context,
    policies: &[PolicyFlat],
    n_idio: usize,
    seed: u64,
    c: usize,
    options: SimulationOptions,
) -> Result<Vec<CommonOutput>> {
    let (n, d) = (ctx.n, ctx.d);
    let nd = n * d;
    let sq = ctx.dt.sqrt();
    let mut db0 = vec![0.0; ctx.n_steps];
    draw_normals(&mut path_rng(seed, c, 0), &mut db0, sq);
    let commons: Vec<CommonPath> = policies
        .iter()
        .map(|p| propagate_common(ctx, p, &db0))
        .collect::<Result<_>>()?;
    let mut outs: Vec<CommonOutput> = commons
        .iter()
        .map(|cp| CommonOutput {
            common_cost: cp.cost,
            idio_costs: Vec::with_capacity(n_idio),
            db0: options.record_paths.then(|| db0.clone()),
            xbar: options
                .record_paths
                .then(|| cp.xbar.iter().flat_map(|v| v.iter().copied()).collect()),
            x: Vec::new(),
            alpha: Vec::new(),
            moments: options.record_moments.then(|| StateMoments {
                count: 0,
                sum: vec![0.0; (ctx.n_steps + 1) * nd],
                sum_sq: vec![0.0; (ctx.n_steps + 1) * nd],
            }),
        })
        .collect();
    let mut xi = vec![0.0; nd];
    let mut dw = vec![0.0; ctx.n_steps * n];
    for k in 0..n_idio {
        let mut rng = path_rng(seed, c, k + 1);
        ctx.sampler.sample_into(&mut rng, &mut xi);
        draw_normals(&mut rng, &mut dw, sq);
        for ((p, cp), out) in policies.iter().zip(&commons).zip(outs.iter_mut()) {
            let mut mom = out.moments.take();
            let r = run_replica(ctx, p, cp, &xi, &dw, &db0, options, mom.as_mut())?;
            if let Some(mm) = mom.as_mut() {
                mm.count += 1;
            }
            out.moments = mom;
            out.idio_costs.push(r.cost);
            if let (Some(x), Some(a)) = (r.x, r.alpha) {
                out.x.push(x);
                out.alpha.push(a);
            }
        }
    }
    Ok(outs)
}

/// Simulates every policy on the same random numbers (shared `B̃⁰`
/// increments, initial draws and idiosyncratic increments).
pub fn simulate_policies(
    spec: &ProblemSpec,
    sol: Option<&RiccatiSolution>,
    policies: &[ControlPolicy],
    n_common: usize,
    n_idio: usize,
    seed: u64,
    options: SimulationOptions,
) -> Result<Vec<SimulationEnsemble>> {
    if n_common == 0 || n_idio == 0 {
        return Err(Error::InvalidParameter(
            "path counts must be positive".into(),
        ));
    }
    for p in policies {
        p.check(spec, sol)?;
    }
    let ctx = Context::new(spec, sol, policies.iter().any(ControlPolicy::is_feedback))?;
    let flats: Vec<PolicyFlat> = policies.iter().map(|p| ctx.policy(p)).collect();
    let per_common: Vec<Vec<CommonOutput>> = (0..n_common)
        .into_par_iter()
        .map(|c| run_common(&ctx, &flats, n_idio, seed, c, options))
        .collect::<Result<_>>()?;

    let mut ensembles: Vec<SimulationEnsemble> = (0..policies.len())
        .map(|_| SimulationEnsemble {
            grid: spec.grid,
            tgrid: spec.tgrid,
            state_dim: spec.state_dim,
            control_dim: spec.control_dim,
            n_common,
            n_idio,
            seed,
            common_costs: Vec::with_capacity(n_common),
            sample_costs: Vec::with_capacity(n_common * n_idio),
            paths: options.record_paths.then(|| PathRecord {
                common_increments: Vec::with_capacity(n_common),
                xbar: Vec::with_capacity(n_common),
                x: Vec::with_capacity(n_common * n_idio),
                alpha: Vec::with_capacity(n_common * n_idio),
            }),
            moments: options.record_moments.then(|| Vec::with_capacity(n_common)),
        })
        .collect();
    for outs in per_common {
        for (ens, out) in ensembles.iter_mut().zip(outs) {
            ens.common_costs.push(out.common_cost);
            ens.sample_costs.extend(out.idio_costs);
            if let Some(p) = ens.paths.as_mut() {
                p.common_increments.push(out.db0.unwrap_or_default());
                p.xbar.push(out.xbar.unwrap_or_default());
                p.x.extend(out.x);
                p.alpha.extend(out.alpha);
            }
            if let (Some(m), Some(om)) = (ens.moments.as_mut(), out.moments) {
                m.push(om);
            }
        }
    }
    Ok(ensembles)
}

/// Simulates one policy and keeps the full trajectories.
pub fn simulate_paths(
    spec: &ProblemSpec,
    sol: Option<&RiccatiSolution>,
    policy: &ControlPolicy,
    n_common: usize,
    n_idio: usize,
    seed: u64,
) -> Result<SimulationEnsemble> {
    let options = SimulationOptions {
        record_paths: true,
        record_moments: false,
    };
    let mut e = simulate_policies(
        spec,
        sol,
        std::slice::from_ref(policy),
        n_common,
        n_idio,
        seed,
        options,
    )?;
    Ok(e.remove(0))
}

/// Conditional mean `X̄` per knot along one given path of `B̃⁰` increments.
pub fn propagate_conditional_mean(
    spec: &ProblemSpec,
    sol: Option<&RiccatiSolution>,
    policy: &ControlPolicy,
    common_increments: &[f64],
) -> Result<Vec<VectorField>> {
    policy.check(spec, sol)?;
    if common_increments.len() != spec.tgrid.n_steps() {
        return Err(Error::Dimension {
            context: "common noise increments",
            expected: spec.tgrid.n_steps(),
            got: common_increments.len(),
        });
    }
    let ctx = Context::new(spec, sol, policy.is_feedback())?;
    let cp = propagate_common(&ctx, &ctx.policy(policy), common_increments)?;
    cp.xbar
        .iter()
        .map(|x| VectorField::from_flat(spec.grid, spec.state_dim, x))
        .collect()
}

/// Monte-Carlo estimate of the cost at the initial time. The standard error
/// treats the per-common-path averages as the independent units.
pub fn estimate_cost(spec: &ProblemSpec, ensemble: &SimulationEnsemble) -> Result<CostEstimate> {
    spec.grid.ensure_same(&ensemble.grid)?;
    let (nc, ni) = (ensemble.n_common, ensemble.n_idio);
    let part = |f: fn(&CostBreakdown) -> f64| -> f64 {
        let per_common: Vec<f64> = (0..nc)
            .map(|c| {
                let s: Vec<f64> = ensemble.sample_costs[c * ni..(c + 1) * ni]
                    .iter()
                    .map(f)
                    .collect();
                f(&ensemble.common_costs[c]) + pairwise_sum(&s) / ni as f64
            })
            .collect();
        pairwise_sum(&per_common) / nc as f64
    };
    let breakdown = CostBreakdown {
        state: part(|b| b.state),
        control: part(|b| b.control),
        terminal: part(|b| b.terminal),
    };
    let std_error = if nc > 1 {
        mean_and_se(&ensemble.common_path_costs()).1
    } else {
        let s: Vec<f64> = ensemble
            .sample_costs
            .iter()
            .map(|b| b.add(&ensemble.common_costs[0]).total())
            .collect();
        mean_and_se(&s).1
    };
    Ok(CostEstimate {
        mean: breakdown.total(),
        std_error,
        n_samples: nc * ni,
        breakdown,
    })
}

/// Mean and standard error of `J(a) − J(b)` on common random numbers.
pub fn paired_difference(a: &SimulationEnsemble, b: &SimulationEnsemble) -> (f64, f64) {
    let (ca, cb) = (a.common_path_costs(), b.common_path_costs());
    let diff: Vec<f64> = ca.iter().zip(&cb).map(|(x, y)| x - y).collect();
    mean_and_se(&diff)
}

/// `eps² Σ_n dt Σ_u h δᵀ O δ`, the exact cost increase of `α̂ + eps·δ`.
pub fn quadratic_penalty(sol: &RiccatiSolution, delta: &[VectorField], eps: f64) -> f64 {
    let tg = sol.tgrid;
    let h = sol.grid().weight();
    let terms: Vec<f64> = (0..tg.n_steps())
        .map(|n| {
            let dl = field_at(delta, n);
            tg.dt()
                * h
                * dl.iter()
                    .zip(sol.o[n].iter())
                    .map(|(v, o)| v.dot(&(o * v)))
                    .sum::<f64>()
        })
        .collect();
    eps * eps * pairwise_sum(&terms)
}

/// Optimality residuals of the feedback law.
///
/// * `residual_a = Ĵ(α̂) − 𝒱`;
/// * `residual_b = Ĵ(α̂ + εδ) − 𝒱 − penalty`;
/// * `residual_b_crn = Ĵ(α̂ + εδ) − Ĵ(α̂) − penalty` (paired standard error);
/// * `residual_c = [Ĵ(α̂ + εδ) − Ĵ(α̂ − εδ)] / 2ε`, zero when `ε = 0`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FundamentalRelationReport {
    pub value: f64,
    pub j_hat: f64,
    pub j_hat_se: f64,
    pub j_plus: f64,
    pub j_plus_se: f64,
    pub j_minus: f64,
    pub j_minus_se: f64,
    pub penalty: f64,
    pub residual_a: f64,
    pub se_a: f64,
    pub residual_b: f64,
    pub se_b: f64,
    pub residual_b_crn: f64,
    pub se_b_crn: f64,
    pub residual_c: f64,
    pub se_c: f64,
    pub eps: f64,
    pub n_common: usize,
    pub n_idio: usize,
    pub seed: u64,
    pub pass: bool,
}

fn within(residual: f64, se: f64, k: f64) -> bool {
    residual.abs() <= k * se || residual == 0.0
}

pub fn fundamental_relation_residual(
    spec: &ProblemSpec,
    sol: &RiccatiSolution,
    delta: &[VectorField],
    eps: f64,
    n_common: usize,
    n_idio: usize,
    seed: u64,
) -> Result<FundamentalRelationReport> {
    if !(eps >= 0.0) {
        return Err(Error::InvalidParameter("eps must be non-negative".into()));
    }
    let value = sol.initial_value(spec)?;
    let policies = [
        ControlPolicy::Feedback,
        ControlPolicy::PerturbedFeedback {
            eps,
            delta: delta.to_vec(),
        },
        ControlPolicy::PerturbedFeedback {
            eps: -eps,
            delta: delta.to_vec(),
        },
    ];
    let ens = simulate_policies(
        spec,
        Some(sol),
        &policies,
        n_common,
        n_idio,
        seed,
        SimulationOptions::default(),
    )?;
    let est: Vec<CostEstimate> = ens
        .iter()
        .map(|e| estimate_cost(spec, e))
        .collect::<Result<_>>()?;
    let penalty = quadratic_penalty(sol, delta, eps);
    let (diff, se_diff) = paired_difference(&ens[1], &ens[0]);
    let (residual_c, se_c) = if eps > 0.0 {
        let (pm, se) = paired_difference(&ens[1], &ens[2]);
        (pm / (2.0 * eps), se / (2.0 * eps))
    } else {
        (0.0, 0.0)
    };
    let residual_a = est[0].mean - value;
    let residual_b_crn = diff - penalty;
    let pass = within(residual_a, est[0].std_error, 3.0)
        && within(residual_b_crn, se_diff, 3.0)
        && within(residual_c, se_c, 3.0);
    Ok(FundamentalRelationReport {
        value,
        j_hat: est[0].mean,
        j_hat_se: est[0].std_error,
        j_plus: est[1].mean,
        j_plus_se: est[1].std_error,
        j_minus: est[2].mean,
        j_minus_se: est[2].std_error,
        penalty,
        residual_a,
        se_a: est[0].std_error,
        residual_b: est[1].mean - value - penalty,
        se_b: est[1].std_error,
        residual_b_crn,
        se_b_crn: se_diff,
        residual_c,
        se_c,
        eps,
        n_common,
        n_idio,
        seed,
        pass,
    })
}

/// Nested Monte-Carlo check of the conditional-mean closure on one common path.
#[derive(Clone, Debug)]
pub struct NestedMeanCheck {
    pub xbar: Vec<VectorField>,
    pub mean: Vec<VectorField>,
    pub std_error: Vec<VectorField>,
    /// Largest `|mean − X̄| / SE` over knots, labels and components
    /// (infinite if a zero-variance entry disagrees).
    pub max_z: f64,
}

pub fn nested_conditional_mean(
    spec: &ProblemSpec,
    sol: Option<&RiccatiSolution>,
    policy: &ControlPolicy,
    n_idio: usize,
    seed: u64,
) -> Result<NestedMeanCheck> {
    let options = SimulationOptions {
        record_paths: false,
        record_moments: true,
    };
    let ens = simulate_policies(
        spec,
        sol,
        std::slice::from_ref(policy),
        1,
        n_idio,
        seed,
        options,
    )?
    .remove(0);
    let mut db0 = vec![0.0; spec.tgrid.n_steps()];
    draw_normals(&mut path_rng(seed, 0, 0), &mut db0, spec.tgrid.dt().sqrt());
    let xbar = propagate_conditional_mean(spec, sol, policy, &db0)?;
    let mom = &ens.moments.as_ref().expect("moments requested")[0];
    let cnt = mom.count as f64;
    let nd = spec.grid.len() * spec.state_dim;
    let mut mean = Vec::with_capacity(xbar.len());
    let mut se = Vec::with_capacity(xbar.len());
    let mut max_z: f64 = 0.0;
    for (knot, xb) in xbar.iter().enumerate() {
        let flat_xb = xb.to_flat();
        let mut mu = DVector::zeros(nd);
        let mut s = DVector::zeros(nd);
        for j in 0..nd {
            let m1 = mom.sum[knot * nd + j] / cnt;
            let var =
                ((mom.sum_sq[knot * nd + j] / cnt - m1 * m1) * cnt / (cnt - 1.0).max(1.0)).max(0.0);
            mu[j] = m1;
            s[j] = (var / cnt).sqrt();
            let err = (m1 - flat_xb[j]).abs();
            let z = if s[j] > 0.0 {
                err / s[j]
            } else if err <= 1e-12 * (1.0 + flat_xb[j].abs()) {
                0.0
            } else {
                f64::INFINITY
            };
            max_z = max_z.max(z);
        }
        mean.push(VectorField::from_flat(spec.grid, spec.state_dim, &mu)?);
        se.push(VectorField::from_flat(spec.grid, spec.state_dim, &s)?);
    }
    Ok(NestedMeanCheck {
        xbar,
        mean,
        std_error: se,
        max_z,
    })
}

/// One row of the trajectory summary: `variable` is `"X"` or `"alpha"`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct QuantileRow {
    pub t: f64,
    pub label: usize,
    pub variable: &'static str,
    pub component: usize,
    pub mean: f64,
    pub q05: f64,
    pub q95: f64,
}

fn quantile(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Mean and 5%/95% quantiles of `X` (every knot) and `α` (every interval).
pub fn trajectory_quantiles(ensemble: &SimulationEnsemble) -> Result<Vec<QuantileRow>> {
    let p = ensemble.paths.as_ref().ok_or(Error::InvalidParameter(
        "ensemble was simulated without path recording".into(),
    ))?;
    let (n, d, m) = (
        ensemble.grid.len(),
        ensemble.state_dim,
        ensemble.control_dim,
    );
    let tg = ensemble.tgrid;
    let mut rows = Vec::new();
    let mut buf = Vec::with_capacity(p.x.len());
    let summarize = |data: &[Vec<f64>], offset: usize, buf: &mut Vec<f64>| -> (f64, f64, f64) {
        buf.clear();
        buf.extend(data.iter().map(|s| s[offset]));
        let mean = pairwise_sum(buf) / buf.len() as f64;
        buf.sort_by(f64::total_cmp);
        (mean, quantile(buf, 0.05), quantile(buf, 0.95))
    };
    for knot in 0..tg.n_knots() {
        for u in 0..n {
            for j in 0..d {
                let (mean, q05, q95) = summarize(&p.x, knot * n * d + u * d + j, &mut buf);
                rows.push(QuantileRow {
                    t: tg.time(knot),
                    label: u,
                    variable: "X",
                    component: j,
                    mean,
                    q05,
                    q95,
                });
            }
            if knot < tg.n_steps() {
                for j in 0..m {
                    let (mean, q05, q95) = summarize(&p.alpha, knot * n * m + u * m + j, &mut buf);
                    rows.push(QuantileRow {
                        t: tg.time(knot),
                        label: u,
                        variable: "alpha",
                        component: j,
                        mean,
                        q05,
                        q95,
                    });
                }
            }
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::TimeGrid;

    fn sc(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    fn base(n: usize, steps: usize) -> ProblemSpec {
        let grid = LabelGrid::new(n).unwrap();
        ProblemSpec::new(
            TimeGrid::new(0.0, 1.0, steps).unwrap(),
            Coefficients::zeros(grid, 1, 1),
        )
    }

    #[test]
    fn pairwise_sum_matches_naive() {
        let x: Vec<f64> = (0..100).map(|i| i as f64).collect();
        assert_eq!(pairwise_sum(&x), 4950.0);
        assert_eq!(mean_and_se(&[2.0]), (2.0, 0.0));
    }

    #[test]
    fn zero_model_keeps_initial_draws() {
        let mut spec = base(3, 5);
        spec.xi_mean = VectorField::from_fn(spec.grid, |i, _| DVector::from_element(1, i as f64));
        spec.xi_cov = MatrixField::constant(spec.grid, sc(0.5));
        let open = ControlPolicy::OpenLoopField(vec![VectorField::zeros(spec.grid, 1)]);
        let e = simulate_paths(&spec, None, &open, 2, 3, 7).unwrap();
        let p = e.paths.as_ref().unwrap();
        let nd = 3;
        for x in &p.x {
            for knot in 1..=5 {
                assert_eq!(&x[knot * nd..(knot + 1) * nd], &x[..nd]);
            }
        }
        let est = estimate_cost(&spec, &e).unwrap();
        assert_eq!(est.mean, 0.0);
        assert_eq!(est.std_error, 0.0);
    }

    #[test]
    fn constant_open_loop_drift_is_exact() {
        let mut spec = base(2, 8);
        spec.coefficients[0].b = MatrixField::constant(spec.grid, sc(1.0));
        spec.xi_mean = VectorField::constant(spec.grid, DVector::from_element(1, 0.25));
        let open = ControlPolicy::OpenLoopField(vec![VectorField::constant(
            spec.grid,
            DVector::from_element(1, 0.5),
        )]);
        let e = simulate_paths(&spec, None, &open, 1, 2, 1).unwrap();
        let xt = e.x_at(1, 8).unwrap();
        assert!((xt[0][0] - 0.75).abs() < 1e-14);
    }

    #[test]
    fn pure_common_noise_integrator() {
        let mut spec = base(2, 10);
        spec.coefficients[0].theta =
            VectorField::constant(spec.grid, DVector::from_element(1, 0.3));
        spec.xi_mean = VectorField::constant(spec.grid, DVector::from_element(1, 1.0));
        let sol = crate::riccati::solve_backward(&spec, Default::default()).unwrap();
        let db0: Vec<f64> = (0..10).map(|i| 0.01 * i as f64 - 0.03).collect();
        let xbar =
            propagate_conditional_mean(&spec, Some(&sol), &ControlPolicy::Feedback, &db0).unwrap();
        let mut b = 0.0;
        for (n, xb) in xbar.iter().enumerate() {
            assert!((xb[1][0] - (1.0 + 0.3 * b)).abs() < 1e-14);
            if n < 10 {
                b += db0[n];
            }
        }
    }

    #[test]
    fn feedback_requires_solution() {
        let spec = base(2, 4);
        let err = simulate_paths(&spec, None, &ControlPolicy::Feedback, 1, 1, 0).unwrap_err();
        assert!(matches!(err, Error::UnsupportedPolicy(_)));
    }

    #[test]
    fn quantiles_interpolate() {
        assert_eq!(quantile(&[0.0, 10.0], 0.05), 0.5);
        assert_eq!(quantile(&[1.0, 2.0, 3.0], 0.5), 2.0);
    }
}
