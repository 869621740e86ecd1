use std::sync::Arc;

use nalgebra::DVector;
use proptest::prelude::*;
use sweep_core::config::ModelConfig;
use sweep_core::models::quadratic_cost;
use sweep_core::transcription::{CostSpec, RunningArgs};

fn central(f: impl Fn(&DVector<f64>) -> f64, x: &DVector<f64>) -> DVector<f64> {
    DVector::from_fn(x.len(), |i, _| {
        let h = 1e-5 * (1.0 + x[i].abs());
        let (mut p, mut m) = (x.clone(), x.clone());
        p[i] += h;
        m[i] -= h;
        (f(&p) - f(&m)) / (2.0 * h)
    })
}

fn close(a: &DVector<f64>, b: &DVector<f64>, tol: f64) -> bool {
    (a - b).amax() <= tol * (1.0 + b.amax())
}

fn vec3() -> impl Strategy<Value = DVector<f64>> {
    prop::collection::vec(-10.0f64..10.0, 3).prop_map(DVector::from_vec)
}

proptest! {
    #[test]
    fn declared_gradients_match_differences(x in vec3(), u in vec3(), a in vec3(), xd in vec3(), w in 0.0f64..50.0) {
        let cost = quadratic_cost(w);
        let g = cost.phi_gradient(&x);
        prop_assert!(close(&g, &central(|x| (cost.phi)(x), &x), 1e-6));
        let z = DVector::zeros(3);
        let args = RunningArgs { t: 0.3, x: &x, u: &u, a: &a, xdot: &xd, udot: &z, adot: &z };
        let rg = cost.ell_gradient(&args);
        let ell_a = |a: &DVector<f64>| (cost.ell)(&RunningArgs { a, ..args });
        prop_assert!(close(&rg.a, &central(ell_a, &a), 1e-6));
        prop_assert!(rg.x.amax() == 0.0 && rg.xdot.amax() == 0.0);
    }

    #[test]
    fn fallback_gradients_match_differences(x in vec3(), u in vec3(), a in vec3(), xd in vec3()) {
        // no declared gradients: the library differences itself
        let cost = CostSpec::new(
            Arc::new(|x| x.map(f64::sin).sum() + x.norm_squared()),
            Arc::new(|r| r.a.dot(r.u) + r.xdot.map(f64::cos).sum() + r.x[0] * r.x[1]),
        );
        let exact_phi = x.map(f64::cos) + &x * 2.0;
        prop_assert!(close(&cost.phi_gradient(&x), &exact_phi, 1e-6));
        let z = DVector::zeros(3);
        let args = RunningArgs { t: 1.0, x: &x, u: &u, a: &a, xdot: &xd, udot: &z, adot: &z };
        let rg = cost.ell_gradient(&args);
        prop_assert!(close(&rg.a, &u, 1e-6));
        prop_assert!(close(&rg.u, &a, 1e-6));
        prop_assert!(close(&rg.xdot, &(-xd.map(f64::sin)), 1e-6));
        prop_assert!(close(&rg.x, &DVector::from_column_slice(&[x[1], x[0], 0.0]), 1e-6));
    }
}

#[test]
fn custom_config_cost_gradients() {
    let text = r#"{
  "model": "custom",
  "custom": {
    "n": 2, "d": 1,
    "constraints": {"form": "ball", "center": [0, 0], "radius": 10},
    "dynamics": {"form": "linear", "fx": [[0, 1], [-1, 0]], "fa": [[1], [0]]},
    "terminal_cost": {"form": "quadratic", "weight": 3, "target": [1, -2]},
    "running_cost": {"form": "quadratic", "control_weight": 2, "state_weight": 0.5},
    "horizon": 1, "x0": [1, 1], "r1": 0.5, "r2": 2, "u0": [0.5, 0]
  }
}"#;
    let cfg = ModelConfig::parse_str(text).unwrap();
    let setup = cfg.build().unwrap();
    let x = DVector::from_column_slice(&[0.3, -0.7]);
    let g = setup.cost.phi_gradient(&x);
    assert!(close(&g, &central(|x| (setup.cost.phi)(x), &x), 1e-6));
    assert!(close(&g, &DVector::from_column_slice(&[3.0 * (0.3 - 1.0), 3.0 * (-0.7 + 2.0)]), 1e-12));
    let (u, a, z) = (DVector::zeros(2), DVector::from_element(1, 0.4), DVector::zeros(2));
    let args = RunningArgs { t: 0.0, x: &x, u: &u, a: &a, xdot: &z, udot: &z, adot: &DVector::zeros(1) };
    let rg = setup.cost.ell_gradient(&args);
    assert!(close(&rg.x, &(&x * 0.5), 1e-12));
    assert!(close(&rg.a, &(&a * 2.0), 1e-12));
}
