//! Built-in models: one-dimensional car motion and two-disk crowd motion,
//! each with its closed-form optimal solution.

use std::f64::consts::SQRT_2;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dynamics::{DiscreteTrajectory, PathFn, ProcessSpec, ReferencePath};
use crate::error::{invalid, Result};
use crate::geometry::SweepingSet;
use crate::transcription::{ControlInit, CostSpec, RunningGrad};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum CarVariant {
    #[default]
    Standard,
    HeavyEnergy,
}

impl std::str::FromStr for CarVariant {
    type Err = crate::SweepError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(CarVariant::Standard),
            "heavy-energy" => Ok(CarVariant::HeavyEnergy),
            _ => Err(invalid(format!("unknown car variant '{s}' (expected standard or heavy-energy)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum CrowdCase {
    Free,
    #[default]
    Contact,
}

impl std::str::FromStr for CrowdCase {
    type Err = crate::SweepError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "free" => Ok(CrowdCase::Free),
            "contact" => Ok(CrowdCase::Contact),
            _ => Err(invalid(format!("unknown crowd case '{s}' (expected free or contact)"))),
        }
    }
}

/// Closed-form optimal triple with its velocity multiplier `eta(t)`.
#[derive(Clone)]
pub struct AnalyticSolution {
    pub horizon: f64,
    pub x: PathFn,
    pub xdot: PathFn,
    pub u: PathFn,
    pub a: PathFn,
    pub eta: PathFn,
    pub objective: f64,
}

impl std::fmt::Debug for AnalyticSolution {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AnalyticSolution")
            .field("horizon", &self.horizon)
            .field("objective", &self.objective)
            .finish_non_exhaustive()
    }
}

impl AnalyticSolution {
    /// Node values on the uniform `k`-step grid.
    pub fn sample(&self, k: usize) -> Result<DiscreteTrajectory> {
        if k < 1 {
            return Err(invalid("k must be positive"));
        }
        let h = self.horizon / k as f64;
        let t = |j: usize| if j == k { self.horizon } else { j as f64 * h };
        let nodes = |p: &PathFn| (0..=k).map(|j| p(t(j))).collect::<Vec<_>>();
        Ok(DiscreteTrajectory {
            horizon: self.horizon,
            x: nodes(&self.x),
            u: nodes(&self.u),
            a: nodes(&self.a),
            eta: nodes(&self.eta),
        })
    }

    pub fn controls(&self, k: usize) -> Result<ControlInit> {
        let s = self.sample(k)?;
        Ok(ControlInit { u: s.u, a: s.a })
    }

    pub fn as_reference(&self) -> ReferencePath {
        let zero_like = |p: &PathFn| {
            let dim = p(0.0).len();
            let z: PathFn = Arc::new(move |_| DVector::zeros(dim));
            z
        };
        ReferencePath {
            horizon: self.horizon,
            x: self.x.clone(),
            xdot: self.xdot.clone(),
            udot: zero_like(&self.u),
            adot: zero_like(&self.a),
            u: self.u.clone(),
            a: self.a.clone(),
        }
    }
}

/// A process, its cost and a known optimal solution.
#[derive(Clone, Debug)]
pub struct Model {
    pub name: String,
    pub spec: ProcessSpec,
    pub cost: CostSpec,
    pub analytic: AnalyticSolution,
}

impl Model {
    /// Default solver start: `u_j` equal to the analytic `u(0)` and `a_j = 0`.
    pub fn default_init(&self, k: usize) -> ControlInit {
        let u0 = (self.analytic.u)(0.0);
        ControlInit::constant(&u0, &DVector::zeros(self.spec.control_dim), k)
    }
}

fn constant(v: DVector<f64>) -> PathFn {
    Arc::new(move |_| v.clone())
}

/// `phi = |x|^2 / 2` and `ell = weight |a|^2 / 2`.
pub fn quadratic_cost(weight: f64) -> CostSpec {
    CostSpec::new(Arc::new(|x| 0.5 * x.norm_squared()), Arc::new(move |r| 0.5 * weight * r.a.norm_squared()))
        .with_gradients(
            Arc::new(|x| x.clone()),
            Arc::new(move |r| RunningGrad {
                x: DVector::zeros(r.x.len()),
                u: DVector::zeros(r.u.len()),
                a: r.a * weight,
                xdot: DVector::zeros(r.xdot.len()),
                udot: DVector::zeros(r.udot.len()),
                adot: DVector::zeros(r.adot.len()),
            }),
        )
}

/// Car on a line: `-x' in N_{(-inf, u]}(x) + 9a`, `x(0) = -250`, `T = 20`.
pub fn builtin_car(variant: CarVariant) -> Result<Model> {
    let weight = match variant {
        CarVariant::Standard => 1.0,
        CarVariant::HeavyEnergy => 100.0,
    };
    let horizon = 20.0;
    let x0 = -250.0;
    // minimizer of (x0 - 180 a)^2 / 2 + 10 weight a^2
    let theta = 180.0 * x0 / (32400.0 + 20.0 * weight);
    let xt = x0 - 180.0 * theta;
    let set = SweepingSet::affine(DMatrix::from_element(1, 1, -1.0), DVector::zeros(1), 1.0, 1.0)?;
    let spec = ProcessSpec::new(
        set,
        Arc::new(|_, a| a * 9.0),
        Arc::new(|_, _| DMatrix::zeros(1, 1)),
        Arc::new(|_, _| DMatrix::from_element(1, 1, 9.0)),
        1,
        horizon,
        DVector::from_element(1, x0),
        1e-3,
        50.0,
        1.0,
        18.0,
    )?;
    let analytic = AnalyticSolution {
        horizon,
        x: Arc::new(move |t| DVector::from_element(1, x0 - 9.0 * theta * t)),
        xdot: constant(DVector::from_element(1, -9.0 * theta)),
        u: constant(DVector::from_element(1, xt)),
        a: constant(DVector::from_element(1, theta)),
        eta: constant(DVector::zeros(1)),
        objective: 0.5 * xt * xt + 10.0 * weight * theta * theta,
    };
    let name = match variant {
        CarVariant::Standard => "car-standard",
        CarVariant::HeavyEnergy => "car-heavy-energy",
    };
    Ok(Model { name: name.into(), spec, cost: quadratic_cost(weight), analytic })
}

/// Unit vector of the desired direction, 135 degrees.
fn desired() -> (f64, f64) {
    (-SQRT_2 / 2.0, SQRT_2 / 2.0)
}

/// Two disks of radius 3 heading to the origin with speeds `6 a_1` and
/// `3 a_2`; `u = (u_1, u_1)` and, in the free case, `a = (b, 2 b)`.
pub fn builtin_crowd(case: CrowdCase) -> Result<Model> {
    let horizon = 6.0;
    let s = 6.0 / SQRT_2;
    let x0 = DVector::from_column_slice(&[-48.0 - s, 48.0 + s, -48.0, 48.0]);
    let (ex, ey) = desired();
    let set = SweepingSet::two_disks(6.0, 1.0)?;
    let grad_a = DMatrix::from_row_slice(4, 2, &[6.0 * ex, 0.0, 6.0 * ey, 0.0, 0.0, 3.0 * ex, 0.0, 3.0 * ey]);
    let ga = grad_a.clone();
    let mut spec = ProcessSpec::new(
        set,
        Arc::new(move |_, a| &ga * a),
        Arc::new(|_, _| DMatrix::zeros(4, 4)),
        Arc::new(move |_, _| grad_a.clone()),
        2,
        horizon,
        x0.clone(),
        1.0,
        10.0,
        1.0,
        30.0,
    )?
    .with_u_structure(DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0]))?;
    let c = 96.0 * SQRT_2 + 6.0;
    // common velocity along (1, -1) and the multiplier
    let (a, speed, eta) = match case {
        CrowdCase::Free => {
            spec = spec.with_a_structure(DMatrix::from_column_slice(2, 1, &[1.0, 2.0]))?;
            let a1 = 18.0 * c / 1311.0;
            (DVector::from_column_slice(&[a1, 2.0 * a1]), 3.0 * SQRT_2 * a1, 0.0)
        }
        CrowdCase::Contact => {
            let a2 = 45.0 * c / 4080.0;
            (DVector::from_column_slice(&[2.0 * a2, a2]), 3.75 * SQRT_2 * a2, 4.5 * a2)
        }
    };
    let v = DVector::from_column_slice(&[speed, -speed, speed, -speed]);
    let x_end = &x0 + &v * horizon;
    let objective = 0.5 * (x_end.norm_squared() + horizon * a.norm_squared());
    let (vx, x0c) = (v.clone(), x0.clone());
    let analytic = AnalyticSolution {
        horizon,
        x: Arc::new(move |t| &x0c + &vx * t),
        xdot: constant(v),
        u: constant(DVector::from_column_slice(&[-0.5, 0.5, -0.5, 0.5])),
        a: constant(a),
        eta: constant(DVector::from_element(1, eta)),
        objective,
    };
    let name = match case {
        CrowdCase::Free => "crowd-free",
        CrowdCase::Contact => "crowd-contact",
    };
    Ok(Model { name: name.into(), spec, cost: quadratic_cost(1.0), analytic })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn car_terminal_states() {
        let m = builtin_car(CarVariant::Standard).unwrap();
        assert!(((m.analytic.x)(20.0)[0] + 0.154).abs() < 1e-3);
        let h = builtin_car(CarVariant::HeavyEnergy).unwrap();
        assert!(((h.analytic.x)(20.0)[0] + 14.535).abs() < 1e-2);
    }

    #[test]
    fn crowd_objectives() {
        let c = builtin_crowd(CrowdCase::Contact).unwrap();
        assert!((c.analytic.objective - 45.9).abs() < 0.1);
        let f = builtin_crowd(CrowdCase::Free).unwrap();
        assert!((f.analytic.objective - 66.49).abs() < 0.05);
    }

    #[test]
    fn crowd_disks_stay_in_contact() {
        let c = builtin_crowd(CrowdCase::Contact).unwrap();
        for t in [0.0, 2.0, 6.0] {
            let x = (c.analytic.x)(t);
            let g = c.spec.set.g(&(&x - (c.analytic.u)(t)));
            assert!(g[0].abs() < 1e-12);
        }
    }
}
