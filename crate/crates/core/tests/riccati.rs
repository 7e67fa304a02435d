use graphon_lq::applications::{homogeneous_oracle, HomogeneousModel};
use graphon_lq::config::{ModelConfig, ProblemConfig};
use graphon_lq::model::Coefficients;
use graphon_lq::riccati::{driver_k, driver_kbar, driver_y};
use graphon_lq::{
    solve_backward, Error, LabelGrid, MatrixField, MatrixKernel, ProblemSpec, RiccatiSolution,
    Scheme, SolverOptions, TimeGrid, VectorField,
};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn preset(name: &str, labels: usize, dt: f64) -> (ProblemConfig, ProblemSpec) {
    let mut cfg = ProblemConfig::preset(name).unwrap();
    cfg.labels = labels;
    cfg.set_dt(dt);
    let spec = cfg.build().unwrap();
    (cfg, spec)
}

fn solve(spec: &ProblemSpec, scheme: Scheme) -> RiccatiSolution {
    solve_backward(
        spec,
        SolverOptions {
            scheme,
            ..SolverOptions::default()
        },
    )
    .unwrap()
}

fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
}

fn rand_vec(rng: &mut ChaCha8Rng, r: usize) -> DVector<f64> {
    DVector::from_fn(r, |_, _| rng.random_range(-1.0..1.0))
}

fn rand_kernel(rng: &mut ChaCha8Rng, grid: LabelGrid, r: usize, c: usize) -> MatrixKernel {
    MatrixKernel::from_blocks(grid, r, c, |_, _| rand_mat(rng, r, c)).unwrap()
}

struct Random {
    spec: ProblemSpec,
    k: MatrixField,
    kbar: MatrixKernel,
    y: VectorField,
}

fn random_problem(seed: u64, n: usize, d: usize, m: usize) -> Random {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid = LabelGrid::new(n).unwrap();
    let mf = |rng: &mut ChaCha8Rng, r, c| MatrixField::from_fn(grid, |_, _| rand_mat(rng, r, c));
    let vf = |rng: &mut ChaCha8Rng, r| VectorField::from_fn(grid, |_, _| rand_vec(rng, r));
    let psd = |rng: &mut ChaCha8Rng, r, shift: f64| {
        MatrixField::from_fn(grid, |_, _| {
            let x = rand_mat(rng, r, r);
            &x * x.transpose() + DMatrix::identity(r, r) * shift
        })
    };
    let coefs = Coefficients {
        a: mf(&mut rng, d, d),
        b: mf(&mut rng, d, m),
        beta: vf(&mut rng, d),
        g_a: rand_kernel(&mut rng, grid, d, d),
        c: mf(&mut rng, d, d),
        d: mf(&mut rng, d, m),
        gamma: vf(&mut rng, d),
        g_c: rand_kernel(&mut rng, grid, d, d),
        theta: vf(&mut rng, d),
        q: psd(&mut rng, d, 0.0),
        g_q: rand_kernel(&mut rng, grid, d, d).symmetrized(),
        r: psd(&mut rng, m, 1.0),
        i_off: vf(&mut rng, m),
    };
    let tgrid = TimeGrid::new(0.0, 1.0, 10).unwrap();
    let spec = ProblemSpec::new(tgrid, coefs);
    let k = psd(&mut rng, d, 0.1);
    let kbar = rand_kernel(&mut rng, grid, d, d).symmetrized();
    let y = vf(&mut rng, d);
    Random { spec, k, kbar, y }
}

fn sym(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

#[test]
fn k_driver_matches_pointwise_formula() {
    for seed in 0..4 {
        let p = random_problem(seed, 3, 2, 2);
        let c = &p.spec.coefficients[0];
        let got = driver_k(&p.spec, 0, &p.k).unwrap();
        for i in 0..3 {
            let k = &p.k[i];
            let o = &c.r[i] + c.d[i].transpose() * k * &c.d[i];
            let u = c.b[i].transpose() * k + c.d[i].transpose() * k * &c.c[i];
            let want =
                c.a[i].transpose() * k + k * &c.a[i] + c.c[i].transpose() * k * &c.c[i] + &c.q[i]
                    - u.transpose() * o.try_inverse().unwrap() * &u;
            assert!((&got[i] - sym(&want)).amax() < 1e-12);
        }
    }
}

#[test]
fn kbar_and_y_drivers_match_direct_sums() {
    for (seed, n, d, m) in [(1, 3, 2, 2), (2, 4, 1, 1), (3, 2, 2, 1), (4, 3, 1, 2)] {
        let p = random_problem(seed, n, d, m);
        let c = &p.spec.coefficients[0];
        let h = 1.0 / n as f64;
        let (k, kb, y) = (&p.k, &p.kbar, &p.y);
        let ga = |i, j| c.g_a.block(i, j);
        let gc = |i, j| c.g_c.block(i, j);
        let kbb = |i, j| kb.block(i, j);
        let o_inv: Vec<DMatrix<f64>> = (0..n)
            .map(|i| {
                (&c.r[i] + c.d[i].transpose() * &k[i] * &c.d[i])
                    .try_inverse()
                    .unwrap()
            })
            .collect();
        let u: Vec<DMatrix<f64>> = (0..n)
            .map(|i| c.b[i].transpose() * &k[i] + c.d[i].transpose() * &k[i] * &c.c[i])
            .collect();
        let v = |i, j| c.d[i].transpose() * &k[i] * gc(i, j) + c.b[i].transpose() * kbb(i, j);

        let got = driver_kbar(&p.spec, 0, k, kb).unwrap();
        for i in 0..n {
            for j in 0..n {
                let mut psi = &k[i] * ga(i, j)
                    + ga(j, i).transpose() * &k[j]
                    + c.c[i].transpose() * &k[i] * gc(i, j)
                    + gc(j, i).transpose() * &k[j] * &c.c[j]
                    + c.a[i].transpose() * kbb(i, j)
                    + kbb(j, i).transpose() * &c.a[j]
                    + c.g_q.block(i, j);
                let mut quad = DMatrix::zeros(d, d);
                for w in 0..n {
                    psi += (gc(w, i).transpose() * &k[w] * gc(w, j)
                        + ga(w, i).transpose() * kbb(w, j)
                        + kbb(w, i).transpose() * ga(w, j))
                        * h;
                    quad += v(w, i).transpose() * &o_inv[w] * v(w, j) * h;
                }
                let f = psi
                    - u[i].transpose() * &o_inv[i] * v(i, j)
                    - v(j, i).transpose() * &o_inv[j] * &u[j]
                    - quad;
                assert!(
                    (got.block(i, j) - &f).amax() < 1e-12,
                    "seed {seed} ({i},{j})"
                );
            }
        }

        let got = driver_y(&p.spec, 0, k, kb, y).unwrap();
        let gamma: Vec<DVector<f64>> = (0..n)
            .map(|i| {
                c.d[i].transpose() * &k[i] * &c.gamma[i]
                    + c.b[i].transpose() * &y[i]
                    + &c.r[i] * &c.i_off[i]
            })
            .collect();
        for i in 0..n {
            let mut want = &k[i] * &c.beta[i]
                + c.c[i].transpose() * &k[i] * &c.gamma[i]
                + c.a[i].transpose() * &y[i]
                - u[i].transpose() * &o_inv[i] * &gamma[i];
            for w in 0..n {
                want += (gc(w, i).transpose() * &k[w] * &c.gamma[w]
                    + kbb(i, w) * &c.beta[w]
                    + ga(w, i).transpose() * &y[w]
                    - v(w, i).transpose() * &o_inv[w] * &gamma[w])
                    * h;
            }
            assert!((&got[i] - &want).amax() < 1e-12, "seed {seed} label {i}");
        }
    }
}

#[test]
fn systemic_kernel_driver_on_block_graphon() {
    // Two-block graphon [[1, 0.3], [0.3, 1]] at N = 4, κ = −1, η = 1, with
    // G_A = −κ G̃ and G_Q the centered form of η around T_G̃.
    let (_, spec) = preset("systemic-sbm", 4, 0.1);
    let g = |i: usize, j: usize| if i / 2 == j / 2 { 1.0 } else { 0.3 };
    let (kappa, eta, h) = (-1.0, 1.0, 0.25);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let grid = spec.grid;
    let kv: Vec<f64> = (0..4).map(|_| rng.random_range(0.2..1.5)).collect();
    let k = MatrixField::from_fn(grid, |i, _| DMatrix::from_element(1, 1, kv[i]));
    let kbar = rand_kernel(&mut rng, grid, 1, 1).symmetrized();
    let kb = |i: usize, j: usize| kbar.block(i, j)[(0, 0)];
    let got = driver_kbar(&spec, 0, &k, &kbar).unwrap();
    for i in 0..4 {
        for j in 0..4 {
            let ga = |a, b| -kappa * g(a, b);
            let mut gq = -2.0 * eta * g(i, j);
            let mut coupling = 0.0;
            let mut quad = 0.0;
            for w in 0..4 {
                gq += h * g(i, w) * eta * g(w, j);
                coupling += h * (ga(w, i) * kb(w, j) + kb(w, i) * ga(w, j));
                quad += h * kb(w, i) * kb(w, j);
            }
            let f = kv[i] * ga(i, j) + ga(j, i) * kv[j] + 2.0 * kappa * kb(i, j) + coupling + gq
                - kv[i] * kb(i, j)
                - kb(i, j) * kv[j]
                - quad;
            assert!((got.block(i, j)[(0, 0)] - f).abs() < 1e-13, "({i},{j})");
        }
    }
}

#[test]
fn lambda_and_value_match_the_scalar_oracle() {
    let (cfg, spec) = preset("systemic-homog", 8, 1.0 / 400.0);
    let sol = solve(&spec, Scheme::Rk4);
    let ModelConfig::Systemic(s) = &cfg.model else {
        panic!()
    };
    let model = HomogeneousModel::Systemic {
        kappa: s.kappa,
        eta: 1.0,
        r: 1.0,
    };
    let o = homogeneous_oracle(model, spec.tgrid).unwrap();
    let (sigma, rho) = (0.2f64, 0.5f64);
    // With Y = 0 and Γ = 0 the integrand is σ²(1−ρ²)K + σ²ρ²(K + k̄); Simpson on the knots.
    let l: Vec<f64> = (0..o.t.len())
        .map(|n| {
            sigma * sigma * (1.0 - rho * rho) * o.k[n]
                + sigma * sigma * rho * rho * (o.k[n] + o.kbar[n])
        })
        .collect();
    let dt = spec.tgrid.dt();
    let mut lambda0 = l[0] + l[l.len() - 1];
    for (n, v) in l.iter().enumerate().take(l.len() - 1).skip(1) {
        lambda0 += if n % 2 == 1 { 4.0 } else { 2.0 } * v;
    }
    lambda0 *= dt / 3.0;
    for i in 0..8 {
        assert!(
            (sol.lambda[0][i] - lambda0).abs() < 1e-7,
            "{} vs {lambda0}",
            sol.lambda[0][i]
        );
    }
    let (m, var) = (0.5, 0.1);
    let want = o.k[0] * (var + m * m) + o.kbar[0] * m * m + lambda0;
    let got = sol.initial_value(&spec).unwrap();
    assert!((got - want).abs() < 1e-6, "{got} vs {want}");
}

#[test]
fn lambda_quadrature_error_shrinks_with_dt() {
    let lam = |dt: f64| {
        let (_, spec) = preset("systemic-sbm", 8, dt);
        solve(&spec, Scheme::Rk4).lambda[0].integral()
    };
    let (a, b, c) = (lam(0.02), lam(0.01), lam(0.005));
    let d1 = (a - b).abs();
    let d2 = (b - c).abs();
    assert!(d1 <= 0.02, "first-order bound");
    assert!(d2 <= 0.5 * d1 * 1.1, "{d1} -> {d2}");
}

#[test]
fn value_is_invariant_to_label_count_for_homogeneous_data() {
    let values: Vec<(f64, f64, f64)> = [4, 16, 64]
        .iter()
        .map(|&n| {
            let (_, spec) = preset("systemic-homog", n, 0.01);
            let sol = solve(&spec, Scheme::Rk4);
            (
                sol.initial_value(&spec).unwrap(),
                sol.k[0][0][(0, 0)],
                sol.kbar[0].block(0, n - 1)[(0, 0)],
            )
        })
        .collect();
    for w in values.windows(2) {
        assert!((w[0].0 - w[1].0).abs() < 1e-9, "{:?}", values);
        assert!((w[0].1 - w[1].1).abs() < 1e-12);
        assert!((w[0].2 - w[1].2).abs() < 1e-9);
    }
}

#[test]
fn k_is_independent_of_the_mean_field_cost_kernel() {
    let (_, spec) = preset("systemic-sbm", 6, 0.01);
    let mut perturbed = spec.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let bump = rand_kernel(&mut rng, spec.grid, 1, 1)
        .symmetrized()
        .scale(0.05);
    perturbed.coefficients[0].g_q = spec.coefficients[0].g_q.add(&bump).unwrap();
    let a = solve(&spec, Scheme::Rk4);
    let b = solve(&perturbed, Scheme::Rk4);
    for (x, y) in a.k.iter().zip(&b.k) {
        assert_eq!(x.values(), y.values());
    }
    assert!(a.kbar[0].sub(&b.kbar[0]).unwrap().max_abs() > 1e-4);
}

#[test]
fn schemes_converge_at_their_orders() {
    let model = HomogeneousModel::Systemic {
        kappa: -1.0,
        eta: 1.0,
        r: 1.0,
    };
    let err = |scheme: Scheme, dt: f64| {
        let (_, spec) = preset("systemic-homog", 4, dt);
        let sol = solve(&spec, scheme);
        let o = homogeneous_oracle(model, spec.tgrid).unwrap();
        (0..o.t.len())
            .map(|n| {
                (sol.k[n][0][(0, 0)] - o.k[n])
                    .abs()
                    .max((sol.kbar[n].block(0, 1)[(0, 0)] - o.kbar[n]).abs())
            })
            .fold(0.0, f64::max)
    };
    let e: Vec<f64> = [0.04, 0.02, 0.01]
        .iter()
        .map(|&dt| err(Scheme::Euler, dt))
        .collect();
    for w in e.windows(2) {
        let ratio = w[0] / w[1];
        assert!((1.7..2.3).contains(&ratio), "euler ratio {ratio}");
    }
    let r: Vec<f64> = [0.1, 0.05, 0.025]
        .iter()
        .map(|&dt| err(Scheme::Rk4, dt))
        .collect();
    for w in r.windows(2) {
        let ratio = w[0] / w[1];
        assert!(ratio > 12.0, "rk4 ratio {ratio}");
    }
}

#[test]
fn solution_invariants_on_presets() {
    for name in [
        "trading-homog",
        "trading-step",
        "systemic-homog",
        "systemic-sbm",
    ] {
        let (_, spec) = preset(name, 8, 0.01);
        let sol = solve(&spec, Scheme::Rk4);
        for (n, (k, kb)) in sol.k.iter().zip(&sol.kbar).enumerate() {
            assert!(kb.symmetry_defect() <= 1e-9, "{name} knot {n}");
            for m in k.iter() {
                assert!((m - m.transpose()).amax() <= 1e-11);
                assert!(m.symmetric_eigenvalues().min() >= -1e-9, "{name} knot {n}");
            }
        }
        assert_eq!(sol.monitor.len(), spec.tgrid.n_knots());
    }
}

#[test]
fn blow_up_cap_is_enforced() {
    let (cfg, spec) = preset("systemic-homog", 4, 0.05);
    let err = solve_backward(
        &spec,
        SolverOptions {
            blow_up_cap: 1e-3,
            ..cfg.solver.options()
        },
    )
    .unwrap_err();
    assert!(matches!(err, Error::BlowUp { .. }), "{err}");
    assert!(err.to_string().contains("positivity"));
}
