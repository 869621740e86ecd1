use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sweep_core::dynamics::ProcessSpec;
use sweep_core::models::{builtin_car, builtin_crowd, CarVariant, CrowdCase, Model};
use sweep_core::transcription::{
    build_pk, constraint_violation, evaluate_cost, reduced_gradient, reduced_objective, solve, ControlInit,
    DiscreteProblem, ReferenceParams, SolveStatus, SolverOptions,
};

fn models() -> Vec<Model> {
    vec![
        builtin_car(CarVariant::Standard).unwrap(),
        builtin_car(CarVariant::HeavyEnergy).unwrap(),
        builtin_crowd(CrowdCase::Contact).unwrap(),
        builtin_crowd(CrowdCase::Free).unwrap(),
    ]
}

/// Analytic controls with a smooth random perturbation along the control
/// structure.
fn perturbed(m: &Model, k: usize, rng: &mut ChaCha8Rng, size: f64) -> ControlInit {
    let spec = &m.spec;
    let mut c = m.analytic.controls(k).unwrap();
    let (cu, ca) = (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
    let w = rng.gen_range(0.5..3.0);
    for j in 0..=k {
        let s = (w * j as f64 / k as f64).sin();
        c.u[j] += spec.u_structure.column(0) * (size * cu * s);
        c.a[j] += spec.a_structure.column(0) * (size * ca * (1.0 + s));
    }
    c
}

/// Central differences of the reduced objective along each structured
/// coordinate, in the order used by `reduced_gradient`.
fn fd_gradient(problem: &DiscreteProblem, init: &ControlInit, step: f64) -> DVector<f64> {
    let spec: &ProcessSpec = &problem.spec;
    let k = problem.k;
    let mut dirs: Vec<(bool, usize, usize)> = Vec::new();
    for j in 0..=k {
        for c in 0..spec.u_structure.ncols() {
            dirs.push((true, j, c));
        }
    }
    for j in 0..k {
        for c in 0..spec.a_structure.ncols() {
            dirs.push((false, j, c));
        }
    }
    DVector::from_iterator(
        dirs.len(),
        dirs.iter().map(|&(is_u, j, c)| {
            let shift = |s: f64| {
                let mut p = init.clone();
                if is_u {
                    p.u[j] += spec.u_structure.column(c) * s;
                } else {
                    p.a[j] += spec.a_structure.column(c) * s;
                    if j == k - 1 {
                        p.a[k] = p.a[j].clone();
                    }
                }
                reduced_objective(problem, &p).unwrap()
            };
            (shift(step) - shift(-step)) / (2.0 * step)
        }),
    )
}

#[test]
fn shooting_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let ms = models();
    for trial in 0..10 {
        let m = &ms[trial % ms.len()];
        let k = 20;
        let problem = build_pk(&m.spec, &m.cost, k, None).unwrap();
        let init = perturbed(m, k, &mut rng, 0.3);
        let got = reduced_gradient(&problem, &init, 1e-6).unwrap();
        let want = fd_gradient(&problem, &init, 1e-5);
        assert_eq!(got.len(), want.len());
        let rel = (&got - &want).norm() / want.norm().max(1e-12);
        assert!(rel < 1e-4, "{} trial {trial}: relative gradient error {rel:e}", m.name);
    }
}

#[test]
fn converged_solutions_are_feasible_and_descend() {
    for m in models() {
        let k = 40;
        let problem = build_pk(&m.spec, &m.cost, k, None).unwrap();
        let opts = SolverOptions::default();
        let r = solve(&problem, &m.default_init(k), &opts).unwrap();
        assert_eq!(r.status, SolveStatus::Converged, "{}", m.name);
        let viol = constraint_violation(&problem, &r.trajectory).unwrap();
        assert!(viol <= opts.tol_feas, "{}: violation {viol:e}", m.name);
        assert!(r.max_violation <= opts.tol_feas);
        let g = |j: usize| m.spec.set.g(&(&r.trajectory.x[j] - &r.trajectory.u[j]));
        assert!((0..=k).all(|j| g(j).iter().all(|v| *v >= -1e-8)), "{}", m.name);
        for (outer, merit) in r.merit_history.iter().enumerate() {
            assert!(merit.windows(2).all(|w| w[1] <= w[0]), "{} outer {outer}", m.name);
        }
        assert!((evaluate_cost(&problem, &r.trajectory).unwrap() - r.objective).abs() <= 1e-9 * (1.0 + r.objective));
    }
}

#[test]
fn solver_never_reports_worse_than_the_analytic_candidate() {
    for m in models() {
        for k in [25, 50] {
            let problem = build_pk(&m.spec, &m.cost, k, None).unwrap();
            let candidate = sweep_core::dynamics::integrate(
                &m.spec,
                &m.analytic.controls(k).unwrap().u,
                &m.analytic.controls(k).unwrap().a,
                k,
            )
            .unwrap()
            .trajectory;
            let analytic = evaluate_cost(&problem, &candidate).unwrap();
            let r = solve(&problem, &m.default_init(k), &SolverOptions::default()).unwrap();
            assert!(
                analytic >= r.objective - 1e-6 * (1.0 + analytic),
                "{} k = {k}: {analytic} < {}",
                m.name,
                r.objective
            );
        }
    }
}

#[test]
fn localization_is_inactive_near_the_reference() {
    for m in [builtin_car(CarVariant::Standard).unwrap(), builtin_crowd(CrowdCase::Contact).unwrap()] {
        let k = 50;
        let eps = 1.0;
        let reference = (m.analytic.as_reference(), ReferenceParams { epsilon_loc: eps, mu: 1.0 });
        let problem = build_pk(&m.spec, &m.cost, k, Some(reference)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let r = solve(&problem, &perturbed(&m, k, &mut rng, 0.01), &SolverOptions::default()).unwrap();
        // the car optimum sits on the kink x_k = u_k, where the stopping test
        // on the gradient can stall a few 1e-6 above the optimum
        assert_ne!(r.status, SolveStatus::Infeasible, "{}", m.name);
        assert!(r.max_violation <= 1e-8, "{}", m.name);
        let at_reference = evaluate_cost(&problem, &m.analytic.sample(k).unwrap()).unwrap();
        assert!(
            r.objective <= at_reference + 1e-6 * (1.0 + at_reference),
            "{}: {} vs {at_reference}",
            m.name,
            r.objective
        );
        let tr = &r.trajectory;
        for j in 0..k {
            let t = problem.t(j);
            let dev = ((&tr.x[j] - (m.analytic.x)(t)).norm_squared()
                + (&tr.u[j] - (m.analytic.u)(t)).norm_squared()
                + (&tr.a[j] - (m.analytic.a)(t)).norm_squared())
            .sqrt();
            assert!(dev < 0.5 * eps * 0.1, "{} node {j}: deviation {dev}", m.name);
        }
        // with constant reference controls the variation terms vanish and the
        // gap to the plain cost is the proximal sum
        let plain = build_pk(&m.spec, &m.cost, k, None).unwrap();
        let prox_sum = r.objective - evaluate_cost(&plain, tr).unwrap();
        assert!((0.0..0.5 * eps * 0.1).contains(&prox_sum), "{}: proximal sum {prox_sum}", m.name);
    }
}
