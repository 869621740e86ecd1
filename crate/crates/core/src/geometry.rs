//! The constraint set `C = {y : g_i(y) >= 0, i = 1..m}` and its normal cones.
//!
//! The outward normal cone at `y` is generated by `-grad g_i(y)` over the
//! active indices, so a normal vector reads `-sum_i lambda_i grad g_i(y)` with
//! `lambda >= 0`.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_finite, invalid, precondition, Result, SweepError};
use crate::linalg::{lstsq_min_norm, sym_spectral_norm};

/// Absolute activity tolerance on `g_i`.
pub const TOL_ACT: f64 = 1e-8;

pub type VecFn = Arc<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>;
pub type MatFn = Arc<dyn Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync>;
pub type HessFn = Arc<dyn Fn(&DVector<f64>) -> Vec<DMatrix<f64>> + Send + Sync>;

/// Declared regularity constants of the constraint functions.
///
/// `m1 <= |grad g_i| <= m2` and `|hess g_i| <= m3` near the boundary,
/// `beta` bounds the positive linear independence ratio on `I_rho`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SetConstants {
    pub m1: f64,
    pub m2: f64,
    pub m3: f64,
    pub beta: f64,
    pub rho: f64,
}

impl SetConstants {
    pub fn validate(&self) -> Result<()> {
        let all = [self.m1, self.m2, self.m3, self.beta, self.rho];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(invalid("set constants must be finite"));
        }
        if self.m1 <= 0.0 {
            return Err(invalid("m1 must be positive"));
        }
        if self.m2 < self.m1 {
            return Err(invalid("m2 must be at least m1"));
        }
        // m3 = 0 is allowed and marks affine constraints
        if self.m3 < 0.0 {
            return Err(invalid("m3 must be nonnegative"));
        }
        if self.beta < 1.0 {
            return Err(invalid("beta must be at least 1"));
        }
        if self.rho <= 0.0 {
            return Err(invalid("rho must be positive"));
        }
        Ok(())
    }
}

/// Sorted active indices together with the threshold that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct ActiveIndexSet {
    pub indices: Vec<usize>,
    pub threshold: f64,
}

impl ActiveIndexSet {
    pub fn contains(&self, i: usize) -> bool {
        self.indices.binary_search(&i).is_ok()
    }
    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormalConeElement {
    pub multipliers: DVector<f64>,
    pub vector_value: DVector<f64>,
}

/// Result of a Euclidean projection onto `C`.
#[derive(Debug, Clone)]
pub struct Projection {
    pub point: DVector<f64>,
    /// KKT multipliers with `z - point = -sum_i lambda_i grad g_i(point)`.
    pub multipliers: DVector<f64>,
    pub iterations: usize,
    /// Set when `|z - point|` reaches the prox radius, where uniqueness is
    /// no longer guaranteed.
    pub beyond_prox_radius: bool,
}

/// Axis-aligned sampling box.
#[derive(Debug, Clone)]
pub struct SampleBox {
    pub center: DVector<f64>,
    pub half_width: f64,
}

impl SampleBox {
    /// Box of half-width `2 (|x0| + 1)` around `x0`.
    pub fn around(x0: &DVector<f64>) -> Self {
        SampleBox { center: x0.clone(), half_width: 2.0 * (x0.norm() + 1.0) }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssumptionViolation {
    pub constant: &'static str,
    pub declared: f64,
    pub observed: f64,
}

#[derive(Debug, Clone)]
pub struct AssumptionReport {
    pub min_grad_norm: f64,
    pub max_grad_norm: f64,
    pub max_hess_norm: f64,
    pub beta_estimate: f64,
    pub samples_used: usize,
    pub violations: Vec<AssumptionViolation>,
}

/// Static sweeping set `C = {y : g(y) >= 0}` in `R^n`.
#[derive(Clone)]
pub struct SweepingSet {
    dim: usize,
    num_constraints: usize,
    g: VecFn,
    grad_g: MatFn,
    hess_g: HessFn,
    constants: SetConstants,
    prox_alpha: Option<f64>,
}

impl fmt::Debug for SweepingSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SweepingSet")
            .field("dim", &self.dim)
            .field("num_constraints", &self.num_constraints)
            .field("constants", &self.constants)
            .field("prox_alpha", &self.prox_alpha)
            .finish()
    }
}

impl SweepingSet {
    pub fn new(
        dim: usize,
        num_constraints: usize,
        g: VecFn,
        grad_g: MatFn,
        hess_g: HessFn,
        constants: SetConstants,
    ) -> Result<Self> {
        if dim == 0 || num_constraints == 0 {
            return Err(invalid("dimension and constraint count must be positive"));
        }
        constants.validate()?;
        Ok(SweepingSet { dim, num_constraints, g, grad_g, hess_g, constants, prox_alpha: None })
    }

    /// Polyhedral set `{y : A y + b >= 0}`. Rows of `A` must be nonzero.
    pub fn affine(a: DMatrix<f64>, b: DVector<f64>, beta: f64, rho: f64) -> Result<Self> {
        let (m, n) = a.shape();
        if b.len() != m {
            return Err(invalid("affine offset length must equal the row count"));
        }
        let norms: Vec<f64> = a.row_iter().map(|r| r.norm()).collect();
        let m1 = norms.iter().copied().fold(f64::INFINITY, f64::min);
        let m2 = norms.iter().copied().fold(0.0, f64::max);
        if m1 <= 0.0 {
            return Err(invalid("affine constraint with zero gradient"));
        }
        let a_g = a.clone();
        let a_grad = a.clone();
        Self::new(
            n,
            m,
            Arc::new(move |y| &a_g * y + &b),
            Arc::new(move |_| a_grad.clone()),
            Arc::new(move |_| vec![DMatrix::zeros(n, n); m]),
            SetConstants { m1, m2, m3: 0.0, beta, rho },
        )
    }

    /// Two planar disks of radii summing to `contact`, state `(x1, x2)` in
    /// `R^4`: `g(y) = |y1 - y2| - contact`.
    pub fn two_disks(contact: f64, rho: f64) -> Result<Self> {
        if !(contact > 0.0) {
            return Err(invalid("contact distance must be positive"));
        }
        let split = |y: &DVector<f64>| (y[0] - y[2], y[1] - y[3]);
        Self::new(
            4,
            1,
            Arc::new(move |y| {
                let (dx, dy) = split(y);
                DVector::from_element(1, dx.hypot(dy) - contact)
            }),
            Arc::new(move |y| {
                let (dx, dy) = split(y);
                let r = dx.hypot(dy);
                let (ex, ey) = (dx / r, dy / r);
                DMatrix::from_row_slice(1, 4, &[ex, ey, -ex, -ey])
            }),
            Arc::new(move |y| {
                let (dx, dy) = split(y);
                let r = dx.hypot(dy);
                let (ex, ey) = (dx / r, dy / r);
                let p = [(1.0 - ex * ex) / r, -ex * ey / r, -ex * ey / r, (1.0 - ey * ey) / r];
                let mut h = DMatrix::zeros(4, 4);
                for (bi, si) in [(0usize, 1.0), (2, -1.0)] {
                    for (bj, sj) in [(0usize, 1.0), (2, -1.0)] {
                        for i in 0..2 {
                            for j in 0..2 {
                                h[(bi + i, bj + j)] = si * sj * p[2 * i + j];
                            }
                        }
                    }
                }
                vec![h]
            }),
            SetConstants {
                m1: std::f64::consts::SQRT_2,
                m2: std::f64::consts::SQRT_2,
                m3: 2.0 / contact,
                beta: 1.0,
                rho,
            },
        )
    }

    /// Closed ball `{y : r^2 - |y - c|^2 >= 0}`.
    pub fn ball(center: DVector<f64>, radius: f64, rho: f64) -> Result<Self> {
        if !(radius > 0.0) {
            return Err(invalid("radius must be positive"));
        }
        let n = center.len();
        let c1 = center.clone();
        let c2 = center;
        Self::new(
            n,
            1,
            Arc::new(move |y| DVector::from_element(1, radius * radius - (y - &c1).norm_squared())),
            Arc::new(move |y| {
                let r = (y - &c2) * -2.0;
                DMatrix::from_row_slice(1, n, r.as_slice())
            }),
            Arc::new(move |_| vec![DMatrix::identity(n, n) * -2.0]),
            SetConstants { m1: radius, m2: 2.0 * radius, m3: 2.0, beta: 1.0, rho },
        )
    }

    /// Replaces the numerator of the prox radius (defaults to `m1`).
    pub fn with_prox_alpha(mut self, alpha: f64) -> Result<Self> {
        if !(alpha > 0.0) || !alpha.is_finite() {
            return Err(invalid("prox alpha must be positive"));
        }
        self.prox_alpha = Some(alpha);
        Ok(self)
    }

    pub fn with_constants(mut self, constants: SetConstants) -> Result<Self> {
        constants.validate()?;
        self.constants = constants;
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn num_constraints(&self) -> usize {
        self.num_constraints
    }
    pub fn constants(&self) -> &SetConstants {
        &self.constants
    }
    pub fn g(&self, y: &DVector<f64>) -> DVector<f64> {
        (self.g)(y)
    }
    /// `m x n` matrix whose rows are `grad g_i(y)`.
    pub fn grad_g(&self, y: &DVector<f64>) -> DMatrix<f64> {
        (self.grad_g)(y)
    }
    pub fn hess_g(&self, y: &DVector<f64>) -> Vec<DMatrix<f64>> {
        (self.hess_g)(y)
    }

    fn check_point(&self, y: &DVector<f64>) -> Result<()> {
        if y.len() != self.dim {
            return Err(invalid(format!("point has dimension {}, expected {}", y.len(), self.dim)));
        }
        check_finite(y, "point")
    }

    pub fn membership(&self, y: &DVector<f64>, tol: f64) -> Result<bool> {
        self.check_point(y)?;
        Ok(self.g(y).iter().all(|v| *v >= -tol))
    }

    /// `I(y)` for `threshold = 0`, `I_rho(y)` for `threshold = rho`.
    pub fn active_set(&self, y: &DVector<f64>, threshold: f64) -> Result<ActiveIndexSet> {
        self.check_point(y)?;
        let gy = self.g(y);
        if gy.iter().any(|v| *v < -TOL_ACT) {
            return Err(precondition("point is outside the set"));
        }
        let cut = if threshold > 0.0 { threshold } else { TOL_ACT };
        Ok(ActiveIndexSet {
            indices: (0..self.num_constraints).filter(|&i| gy[i] <= cut).collect(),
            threshold: threshold.max(0.0),
        })
    }

    pub fn normal_cone_element(&self, y: &DVector<f64>, lambdas: &DVector<f64>) -> Result<NormalConeElement> {
        if lambdas.len() != self.num_constraints {
            return Err(invalid("multiplier length must equal the constraint count"));
        }
        if lambdas.iter().any(|l| *l < 0.0 || !l.is_finite()) {
            return Err(invalid("multipliers must be finite and nonnegative"));
        }
        let active = self.active_set(y, 0.0).map_err(|_| invalid("normal cone requested outside the set"))?;
        if let Some(i) = (0..self.num_constraints).find(|&i| lambdas[i] > 0.0 && !active.contains(i)) {
            return Err(invalid(format!("multiplier {i} is supported off the active set")));
        }
        let value = -(self.grad_g(y).transpose() * lambdas);
        Ok(NormalConeElement { multipliers: lambdas.clone(), vector_value: value })
    }

    /// `m1 / (m3 beta)` (or the configured numerator); infinite for affine sets.
    pub fn prox_modulus(&self) -> f64 {
        let c = &self.constants;
        if c.m3 == 0.0 {
            return f64::INFINITY;
        }
        self.prox_alpha.unwrap_or(c.m1) / (c.m3 * c.beta)
    }

    /// Euclidean projection by an active-set Newton iteration on the KKT
    /// system of `min |z - y|^2 / 2` subject to `g(y) >= 0`.
    pub fn project(&self, z: &DVector<f64>) -> Result<Projection> {
        self.check_point(z)?;
        let m = self.num_constraints;
        let gz = self.g(z);
        if gz.iter().all(|v| *v >= 0.0) {
            return Ok(Projection {
                point: z.clone(),
                multipliers: DVector::zeros(m),
                iterations: 0,
                beyond_prox_radius: false,
            });
        }
        let scale = 1.0 + z.amax();
        let ftol = 1e-14 * scale;
        let mut working: Vec<usize> = (0..m).filter(|&i| gz[i] < 0.0).collect();
        let mut y = z.clone();
        let mut lam = DVector::zeros(m);
        let mut iterations = 0;
        let max_swaps = 4 * m + 8;
        for _ in 0..max_swaps {
            let (ny, nlam, it) = self.newton_equality(z, &y, &lam, &working, ftol)?;
            iterations += it;
            y = ny;
            lam = nlam;
            let gy = self.g(&y);
            let most_negative =
                working.iter().copied().filter(|&i| lam[i] < -1e-12 * scale).min_by(|&a, &b| lam[a].total_cmp(&lam[b]));
            if let Some(i) = most_negative {
                working.retain(|&w| w != i);
                lam[i] = 0.0;
                continue;
            }
            let most_violated = (0..m)
                .filter(|i| !working.contains(i))
                .filter(|&i| gy[i] < -ftol)
                .min_by(|&a, &b| gy[a].total_cmp(&gy[b]));
            if let Some(i) = most_violated {
                working.push(i);
                working.sort_unstable();
                continue;
            }
            for i in 0..m {
                lam[i] = if working.contains(&i) { lam[i].max(0.0) } else { 0.0 };
            }
            let dist = (z - &y).norm();
            return Ok(Projection {
                point: y,
                multipliers: lam,
                iterations,
                beyond_prox_radius: dist >= self.prox_modulus(),
            });
        }
        Err(SweepError::NumericalFailure { message: "projection active set did not settle".into(), best: Some(y) })
    }

    /// Newton iteration for `y - z - G_W^T lam_W = 0`, `g_W(y) = 0`.
    fn newton_equality(
        &self,
        z: &DVector<f64>,
        y0: &DVector<f64>,
        lam0: &DVector<f64>,
        working: &[usize],
        ftol: f64,
    ) -> Result<(DVector<f64>, DVector<f64>, usize)> {
        let n = self.dim;
        let w = working.len();
        let m = self.num_constraints;
        let residual = |y: &DVector<f64>, lw: &DVector<f64>| -> DVector<f64> {
            let gy = self.g(y);
            let jac = self.grad_g(y);
            let mut r = DVector::zeros(n + w);
            let mut stat = y - z;
            for (k, &i) in working.iter().enumerate() {
                stat -= jac.row(i).transpose() * lw[k];
                r[n + k] = gy[i];
            }
            r.rows_mut(0, n).copy_from(&stat);
            r
        };
        let mut y = y0.clone();
        let mut lw = DVector::from_iterator(w, working.iter().map(|&i| lam0[i]));
        let mut r = residual(&y, &lw);
        let mut rn = r.amax();
        let max_iter = 60;
        for it in 0..max_iter {
            if rn <= ftol {
                let mut lam = DVector::zeros(m);
                for (k, &i) in working.iter().enumerate() {
                    lam[i] = lw[k];
                }
                return Ok((y, lam, it));
            }
            let jac = self.grad_g(&y);
            let mut kkt = DMatrix::zeros(n + w, n + w);
            kkt.view_mut((0, 0), (n, n)).fill_with_identity();
            if self.constants.m3 != 0.0 && w > 0 {
                let hs = self.hess_g(&y);
                for (k, &i) in working.iter().enumerate() {
                    let mut blk = kkt.view_mut((0, 0), (n, n));
                    blk -= &hs[i] * lw[k];
                }
            }
            for (k, &i) in working.iter().enumerate() {
                for c in 0..n {
                    kkt[(c, n + k)] = -jac[(i, c)];
                    kkt[(n + k, c)] = jac[(i, c)];
                }
            }
            let rhs = -&r;
            let step = match kkt.clone().lu().solve(&rhs) {
                Some(s) if s.iter().all(|v| v.is_finite()) => s,
                _ => lstsq_min_norm(&kkt, &rhs),
            };
            let mut t = 1.0;
            let mut accepted = false;
            for _ in 0..40 {
                let ny = &y + step.rows(0, n) * t;
                let nl = &lw + step.rows(n, w) * t;
                let nr = residual(&ny, &nl);
                let nn = nr.amax();
                if nn.is_finite() && (nn <= (1.0 - 1e-4 * t) * rn || nn <= ftol) {
                    y = ny;
                    lw = nl;
                    r = nr;
                    rn = nn;
                    accepted = true;
                    break;
                }
                t *= 0.5;
            }
            if !accepted {
                break;
            }
        }
        if rn <= ftol * 1e3 {
            let mut lam = DVector::zeros(m);
            for (k, &i) in working.iter().enumerate() {
                lam[i] = lw[k];
            }
            return Ok((y, lam, max_iter));
        }
        Err(SweepError::NumericalFailure {
            message: format!("projection Newton iteration stalled at residual {rn:.3e}"),
            best: Some(y),
        })
    }

    /// Empirical check of the declared constants on points of `C` that lie
    /// within `rho` of some constraint boundary.
    pub fn check_assumptions(&self, region: &SampleBox, samples: usize, seed: u64) -> AssumptionReport {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = self.dim;
        let rho = self.constants.rho;
        let mut min_g = f64::INFINITY;
        let mut max_g: f64 = 0.0;
        let mut max_h: f64 = 0.0;
        let mut beta: f64 = 1.0;
        let mut used = 0;
        for _ in 0..samples {
            let z = DVector::from_fn(n, |i, _| {
                region.center.get(i).copied().unwrap_or(0.0) + rng.gen_range(-1.0..=1.0) * region.half_width
            });
            let y = match self.project(&z) {
                Ok(p) => p.point,
                Err(_) => continue,
            };
            let gy = self.g(&y);
            if gy.iter().any(|v| !v.is_finite() || *v < -TOL_ACT) {
                continue;
            }
            let near: Vec<usize> = (0..self.num_constraints).filter(|&i| gy[i] <= rho).collect();
            if near.is_empty() {
                continue;
            }
            used += 1;
            let jac = self.grad_g(&y);
            let hs = self.hess_g(&y);
            for &i in &near {
                let gn = jac.row(i).norm();
                min_g = min_g.min(gn);
                max_g = max_g.max(gn);
                max_h = max_h.max(sym_spectral_norm(&hs[i]));
            }
            let lam: Vec<f64> = near.iter().map(|_| -rng.gen::<f64>().max(1e-300).ln()).collect();
            let mut sum = DVector::zeros(n);
            let mut weighted = 0.0;
            for (k, &i) in near.iter().enumerate() {
                sum += jac.row(i).transpose() * lam[k];
                weighted += lam[k] * jac.row(i).norm();
            }
            let sn = sum.norm();
            if sn > 0.0 {
                beta = beta.max(weighted / sn);
            } else {
                beta = f64::INFINITY;
            }
        }
        let c = &self.constants;
        let slack = 1e-9;
        let mut violations = Vec::new();
        if used > 0 {
            if min_g < c.m1 * (1.0 - slack) {
                violations.push(AssumptionViolation { constant: "m1", declared: c.m1, observed: min_g });
            }
            if max_g > c.m2 * (1.0 + slack) {
                violations.push(AssumptionViolation { constant: "m2", declared: c.m2, observed: max_g });
            }
            if max_h > c.m3 * (1.0 + slack) + slack {
                violations.push(AssumptionViolation { constant: "m3", declared: c.m3, observed: max_h });
            }
            if beta > c.beta * (1.0 + slack) {
                violations.push(AssumptionViolation { constant: "beta", declared: c.beta, observed: beta });
            }
        }
        AssumptionReport {
            min_grad_norm: if used > 0 { min_g } else { f64::NAN },
            max_grad_norm: if used > 0 { max_g } else { f64::NAN },
            max_hess_norm: if used > 0 { max_h } else { f64::NAN },
            beta_estimate: beta,
            samples_used: used,
            violations,
        }
    }
}
