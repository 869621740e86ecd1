//! The discrete problem `(P_k)` and a single-shooting augmented-Lagrangian
//! solver over the control sequences.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dynamics::{propagate, simulate, DiscreteTrajectory, ProcessSpec, ReferencePath};
use crate::error::{invalid, precondition, Result};
use crate::geometry::TOL_ACT;
use crate::linalg::nnls;

/// Arguments of the running cost at one node.
#[derive(Debug, Clone, Copy)]
pub struct RunningArgs<'a> {
    pub t: f64,
    pub x: &'a DVector<f64>,
    pub u: &'a DVector<f64>,
    pub a: &'a DVector<f64>,
    pub xdot: &'a DVector<f64>,
    pub udot: &'a DVector<f64>,
    pub adot: &'a DVector<f64>,
}

/// Gradient of the running cost; `(x, u, a)` is the `w` part and
/// `(xdot, udot, adot)` the `v` part.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningGrad {
    pub x: DVector<f64>,
    pub u: DVector<f64>,
    pub a: DVector<f64>,
    pub xdot: DVector<f64>,
    pub udot: DVector<f64>,
    pub adot: DVector<f64>,
}

pub type TerminalFn = Arc<dyn Fn(&DVector<f64>) -> f64 + Send + Sync>;
pub type TerminalGradFn = Arc<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>;
pub type RunningFn = Arc<dyn Fn(&RunningArgs) -> f64 + Send + Sync>;
pub type RunningGradFn = Arc<dyn Fn(&RunningArgs) -> RunningGrad + Send + Sync>;

/// Terminal cost `phi` and running cost `ell`, with optional gradients.
#[derive(Clone)]
pub struct CostSpec {
    pub phi: TerminalFn,
    pub ell: RunningFn,
    pub grad_phi: Option<TerminalGradFn>,
    pub grad_ell: Option<RunningGradFn>,
}

impl std::fmt::Debug for CostSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CostSpec")
            .field("grad_phi", &self.grad_phi.is_some())
            .field("grad_ell", &self.grad_ell.is_some())
            .finish_non_exhaustive()
    }
}

const FD_REL: f64 = 1e-6;

fn fd_step(v: f64) -> f64 {
    FD_REL * v.abs().max(1.0)
}

impl CostSpec {
    pub fn new(phi: TerminalFn, ell: RunningFn) -> Self {
        CostSpec { phi, ell, grad_phi: None, grad_ell: None }
    }

    pub fn with_gradients(mut self, grad_phi: TerminalGradFn, grad_ell: RunningGradFn) -> Self {
        self.grad_phi = Some(grad_phi);
        self.grad_ell = Some(grad_ell);
        self
    }

    pub fn phi_gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        if let Some(g) = &self.grad_phi {
            return g(x);
        }
        let mut xp = x.clone();
        DVector::from_fn(x.len(), |i, _| {
            let s = fd_step(x[i]);
            xp[i] = x[i] + s;
            let fp = (self.phi)(&xp);
            xp[i] = x[i] - s;
            let fm = (self.phi)(&xp);
            xp[i] = x[i];
            (fp - fm) / (2.0 * s)
        })
    }

    pub fn ell_gradient(&self, args: &RunningArgs) -> RunningGrad {
        if let Some(g) = &self.grad_ell {
            return g(args);
        }
        let mut parts =
            [args.x.clone(), args.u.clone(), args.a.clone(), args.xdot.clone(), args.udot.clone(), args.adot.clone()];
        let mut grads: Vec<DVector<f64>> = Vec::with_capacity(6);
        for p in 0..6 {
            let len = parts[p].len();
            let mut g = DVector::zeros(len);
            for i in 0..len {
                let base = parts[p][i];
                let s = fd_step(base);
                parts[p][i] = base + s;
                let fp = eval_ell(&self.ell, args.t, &parts);
                parts[p][i] = base - s;
                let fm = eval_ell(&self.ell, args.t, &parts);
                parts[p][i] = base;
                g[i] = (fp - fm) / (2.0 * s);
            }
            grads.push(g);
        }
        let mut it = grads.into_iter();
        RunningGrad {
            x: it.next().unwrap(),
            u: it.next().unwrap(),
            a: it.next().unwrap(),
            xdot: it.next().unwrap(),
            udot: it.next().unwrap(),
            adot: it.next().unwrap(),
        }
    }
}

fn eval_ell(ell: &RunningFn, t: f64, p: &[DVector<f64>; 6]) -> f64 {
    ell(&RunningArgs { t, x: &p[0], u: &p[1], a: &p[2], xdot: &p[3], udot: &p[4], adot: &p[5] })
}

/// Parameters tying `(P_k)` to a reference triple.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceParams {
    /// Localization radius `epsilon`.
    pub epsilon_loc: f64,
    /// Bound `mu` on the reference control variation.
    pub mu: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProblemMode {
    /// Discrete Bolza problem without proximal terms.
    Plain,
    /// Full `(P_k)` with proximal, localization and variation terms.
    Reference,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConstraintCounts {
    pub state: usize,
    pub norm: usize,
    pub localization: usize,
    pub variation: usize,
}

#[derive(Clone)]
pub struct DiscreteProblem {
    pub spec: ProcessSpec,
    pub cost: CostSpec,
    pub k: usize,
    pub h: f64,
    pub reference: Option<ReferencePath>,
    pub epsilon_k: f64,
    pub mu_tilde: f64,
    pub epsilon_loc: f64,
}

impl std::fmt::Debug for DiscreteProblem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DiscreteProblem")
            .field("k", &self.k)
            .field("h", &self.h)
            .field("mode", &self.mode())
            .field("epsilon_k", &self.epsilon_k)
            .field("mu_tilde", &self.mu_tilde)
            .field("epsilon_loc", &self.epsilon_loc)
            .finish_non_exhaustive()
    }
}

impl DiscreteProblem {
    pub fn mode(&self) -> ProblemMode {
        if self.reference.is_some() {
            ProblemMode::Reference
        } else {
            ProblemMode::Plain
        }
    }

    pub fn t(&self, j: usize) -> f64 {
        if j == self.k {
            self.spec.horizon
        } else {
            j as f64 * self.h
        }
    }

    pub fn constraint_counts(&self) -> ConstraintCounts {
        let m = self.spec.set.num_constraints();
        let k = self.k;
        let (localization, variation) = match self.mode() {
            ProblemMode::Plain => (0, 0),
            ProblemMode::Reference => (k + 1, 2),
        };
        ConstraintCounts { state: m * (k + 1), norm: 2 * (k + 1), localization, variation }
    }
}

/// `max{3 mu (1 + 4KT) e^K, 4 mu (e^K + 1)}`.
pub fn mu_tilde(mu: f64, lipschitz_k: f64, horizon: f64) -> f64 {
    let ek = lipschitz_k.exp();
    (3.0 * mu * (1.0 + 4.0 * lipschitz_k * horizon) * ek).max(4.0 * mu * (ek + 1.0))
}

/// Feasible discrete triple built from a reference as in the strong
/// approximation construction: `u^k = x^k - xbar + ubar`, `a^k = abar` and
/// velocities chosen nearest to the reference velocity inside `F(z^k_j)`.
///
/// Returns the triple and `max_j |x^k_j - xbar(t_j)|`.
pub fn feasible_approximation(
    spec: &ProcessSpec,
    reference: &ReferencePath,
    k: usize,
) -> Result<(DiscreteTrajectory, f64)> {
    if k < 1 {
        return Err(invalid("k must be positive"));
    }
    let h = spec.horizon / k as f64;
    let m = spec.set.num_constraints();
    let t = |j: usize| if j == k { spec.horizon } else { j as f64 * h };
    let mut x = vec![spec.x0.clone()];
    let mut u = Vec::with_capacity(k + 1);
    let mut a = Vec::with_capacity(k + 1);
    let mut eta = Vec::with_capacity(k + 1);
    let mut eps: f64 = (&spec.x0 - (reference.x)(0.0)).norm();
    for j in 0..k {
        let (xb, ub, ab) = ((reference.x)(t(j)), (reference.u)(t(j)), (reference.a)(t(j)));
        let uj = &x[j] - &xb + &ub;
        let y = &xb - &ub;
        let active = spec.set.active_set(&y, 0.0)?;
        let f = spec.f(&x[j], &ab);
        let w1 = ((reference.x)(t(j + 1)) - &xb) / h;
        // nearest element of f + N_C(y) to -w1
        let target = -&w1 - &f;
        let mut lam = DVector::zeros(m);
        let mut normal = DVector::zeros(y.len());
        if !active.is_empty() {
            let jac = spec.set.grad_g(&y);
            let cols = DMatrix::from_fn(y.len(), active.indices.len(), |r, c| -jac[(active.indices[c], r)]);
            let sol = nnls(&cols, &target);
            normal = &cols * &sol;
            for (c, &i) in active.indices.iter().enumerate() {
                lam[i] = sol[c];
            }
        }
        let v = f + normal;
        let xn = &x[j] - v * h;
        eps = eps.max((&xn - (reference.x)(t(j + 1))).norm());
        x.push(xn);
        u.push(uj);
        a.push(ab);
        eta.push(lam);
    }
    u.push(&x[k] - (reference.x)(spec.horizon) + (reference.u)(spec.horizon));
    a.push((reference.a)(spec.horizon));
    eta.push(DVector::zeros(m));
    Ok((DiscreteTrajectory { horizon: spec.horizon, x, u, a, eta }, eps))
}

/// Builds `(P_k)`; without a reference the proximal, localization and
/// variation terms are dropped.
pub fn build_pk(
    spec: &ProcessSpec,
    cost: &CostSpec,
    k: usize,
    reference: Option<(ReferencePath, ReferenceParams)>,
) -> Result<DiscreteProblem> {
    spec.validate()?;
    if k < 2 {
        return Err(invalid("k must be at least 2"));
    }
    let h = spec.horizon / k as f64;
    let mut problem = DiscreteProblem {
        spec: spec.clone(),
        cost: cost.clone(),
        k,
        h,
        reference: None,
        epsilon_k: 0.0,
        mu_tilde: f64::INFINITY,
        epsilon_loc: f64::INFINITY,
    };
    if let Some((path, params)) = reference {
        if (path.horizon - spec.horizon).abs() > 1e-12 * spec.horizon {
            return Err(invalid("reference horizon differs from the process horizon"));
        }
        if !(params.epsilon_loc > 0.0) || !(params.mu >= 0.0) {
            return Err(invalid("epsilon_loc must be positive and mu nonnegative"));
        }
        for j in 0..=k {
            let t = problem.t(j);
            let y = (path.x)(t) - (path.u)(t);
            if !spec.set.membership(&y, TOL_ACT)? {
                return Err(precondition(format!("reference leaves the set at t = {t}")));
            }
            let nu = (path.u)(t).norm();
            if nu < spec.r1 - 1e-9 || nu > spec.r2 + 1e-9 {
                return Err(precondition(format!("reference control norm {nu} outside [r1, r2] at t = {t}")));
            }
        }
        let (_, eps) = feasible_approximation(spec, &path, k)?;
        problem.epsilon_k = eps;
        problem.mu_tilde = mu_tilde(params.mu, spec.lipschitz_k, spec.horizon).max(f64::MIN_POSITIVE);
        problem.epsilon_loc = params.epsilon_loc;
        problem.reference = Some(path);
    }
    Ok(problem)
}

// 5-point Gauss-Legendre rule on [-1, 1]
const GAUSS_X: [f64; 5] =
    [0.0, -0.538_469_310_105_683, 0.538_469_310_105_683, -0.906_179_845_938_664, 0.906_179_845_938_664];
const GAUSS_W: [f64; 5] =
    [0.568_888_888_888_889, 0.478_628_670_499_366, 0.478_628_670_499_366, 0.236_926_885_056_189, 0.236_926_885_056_189];

/// `int_{t_j}^{t_{j+1}} |s - r'(t)|^2 dt` and `2 int (s - r'(t)) dt`.
pub(crate) fn proximal_piece(
    slope: &DVector<f64>,
    rdot: &dyn Fn(f64) -> DVector<f64>,
    t0: f64,
    h: f64,
) -> (f64, DVector<f64>) {
    let mut sq = 0.0;
    let mut theta = DVector::zeros(slope.len());
    for (s, w) in GAUSS_X.iter().zip(GAUSS_W.iter()) {
        let t = t0 + 0.5 * h * (1.0 + s);
        let d = slope - rdot(t);
        sq += 0.5 * h * w * d.norm_squared();
        theta += d * (h * w);
    }
    (sq, theta)
}

/// Averaged deviations `theta_j` of the three components for step `j`.
pub fn theta(
    problem: &DiscreteProblem,
    traj: &DiscreteTrajectory,
    j: usize,
) -> (DVector<f64>, DVector<f64>, DVector<f64>) {
    let (n, d) = (problem.spec.state_dim(), problem.spec.control_dim);
    let Some(r) = &problem.reference else {
        return (DVector::zeros(n), DVector::zeros(n), DVector::zeros(d));
    };
    let h = problem.h;
    let t0 = problem.t(j);
    let sx = (&traj.x[j + 1] - &traj.x[j]) / h;
    let su = (&traj.u[j + 1] - &traj.u[j]) / h;
    let sa = (&traj.a[j + 1] - &traj.a[j]) / h;
    (
        proximal_piece(&sx, &*r.xdot, t0, h).1,
        proximal_piece(&su, &*r.udot, t0, h).1,
        proximal_piece(&sa, &*r.adot, t0, h).1,
    )
}

/// Objective value and constraint values `c <= 0` of a candidate.
pub(crate) struct Evaluation {
    pub objective: f64,
    pub constraints: Vec<f64>,
}

pub(crate) fn evaluate(
    problem: &DiscreteProblem,
    x: &[DVector<f64>],
    u: &[DVector<f64>],
    a: &[DVector<f64>],
) -> Evaluation {
    let spec = &problem.spec;
    let (k, h) = (problem.k, problem.h);
    let mut objective = (problem.cost.phi)(&x[k]);
    let mut prox_sum = 0.0;
    for j in 0..k {
        let xdot = (&x[j + 1] - &x[j]) / h;
        let udot = (&u[j + 1] - &u[j]) / h;
        let adot = (&a[j + 1] - &a[j]) / h;
        let args = RunningArgs { t: problem.t(j), x: &x[j], u: &u[j], a: &a[j], xdot: &xdot, udot: &udot, adot: &adot };
        objective += h * (problem.cost.ell)(&args);
        if let Some(r) = &problem.reference {
            let t0 = problem.t(j);
            prox_sum += proximal_piece(&xdot, &*r.xdot, t0, h).0
                + proximal_piece(&udot, &*r.udot, t0, h).0
                + proximal_piece(&adot, &*r.adot, t0, h).0;
        }
    }
    let eps = problem.epsilon_k;
    let mut constraints = Vec::with_capacity(2 * (k + 1) + 2 * spec.set.num_constraints() + k + 3);
    for uj in u {
        let nu = uj.norm();
        constraints.push(nu - (spec.r2 + eps));
        constraints.push((spec.r1 - eps) - nu);
    }
    constraints.extend(spec.set.g(&(&x[0] - &u[0])).iter().map(|g| -g));
    constraints.extend(spec.set.g(&(&x[k] - &u[k])).iter().map(|g| -g));
    if let Some(r) = &problem.reference {
        objective += prox_sum;
        let first = ((&u[1] - &u[0]) / h).norm();
        let second: f64 = (0..k - 1).map(|j| ((&u[j + 2] - &u[j + 1] * 2.0 + &u[j]) / h).norm()).sum();
        let mt = problem.mu_tilde;
        objective += (first - mt).max(0.0).powi(2) + (second - mt).max(0.0).powi(2);
        for j in 0..k {
            let t = problem.t(j);
            let dev = ((&x[j] - (r.x)(t)).norm_squared()
                + (&u[j] - (r.u)(t)).norm_squared()
                + (&a[j] - (r.a)(t)).norm_squared())
            .sqrt();
            constraints.push(dev - problem.epsilon_loc / 2.0);
        }
        constraints.push(prox_sum - problem.epsilon_loc / 2.0);
        constraints.push(first - (mt + 1.0));
        constraints.push(second - (mt + 1.0));
    }
    Evaluation { objective, constraints }
}

fn check_dims(problem: &DiscreteProblem, traj: &DiscreteTrajectory) -> Result<()> {
    traj.validate_shape()?;
    let spec = &problem.spec;
    if traj.k() != problem.k
        || traj.state_dim() != spec.state_dim()
        || traj.control_dim() != spec.control_dim
        || traj.num_constraints() != spec.set.num_constraints()
        || (traj.horizon - spec.horizon).abs() > 1e-12 * spec.horizon
    {
        return Err(invalid("trajectory does not match the problem dimensions"));
    }
    Ok(())
}

/// Discrete cost of a trajectory, including the reference terms when present.
pub fn evaluate_cost(problem: &DiscreteProblem, traj: &DiscreteTrajectory) -> Result<f64> {
    check_dims(problem, traj)?;
    Ok(evaluate(problem, &traj.x, &traj.u, &traj.a).objective)
}

/// Largest constraint violation of a trajectory.
pub fn constraint_violation(problem: &DiscreteProblem, traj: &DiscreteTrajectory) -> Result<f64> {
    check_dims(problem, traj)?;
    Ok(evaluate(problem, &traj.x, &traj.u, &traj.a).constraints.iter().fold(0.0f64, |m, c| m.max(*c)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverOptions {
    pub max_outer: usize,
    pub max_inner: usize,
    pub penalty_growth: f64,
    pub initial_penalty: f64,
    pub tol_kkt: f64,
    pub tol_feas: f64,
    pub fd_step: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            max_outer: 20,
            max_inner: 300,
            penalty_growth: 10.0,
            initial_penalty: 10.0,
            tol_kkt: 1e-6,
            tol_feas: 1e-8,
            fd_step: 1e-6,
        }
    }
}

impl SolverOptions {
    pub fn validate(&self) -> Result<()> {
        if self.max_outer == 0 || self.max_inner == 0 {
            return Err(invalid("iteration limits must be positive"));
        }
        if !(self.penalty_growth > 1.0) || !(self.initial_penalty > 0.0) {
            return Err(invalid("penalty parameters must be positive with growth above 1"));
        }
        if !(self.tol_kkt > 0.0) || !(self.tol_feas > 0.0) || !(self.fd_step > 0.0) {
            return Err(invalid("tolerances and the difference step must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolveStatus {
    Converged,
    MaxIter,
    Infeasible,
}

#[derive(Debug, Clone)]
pub struct SolveResult {
    pub trajectory: DiscreteTrajectory,
    pub objective: f64,
    pub iterations: usize,
    pub kkt_residual: f64,
    pub max_violation: f64,
    pub status: SolveStatus,
    /// Accepted merit values, one per inner iteration.
    pub merit_history: Vec<Vec<f64>>,
}

/// Control sequences with `k + 1` entries each.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlInit {
    pub u: Vec<DVector<f64>>,
    pub a: Vec<DVector<f64>>,
}

impl ControlInit {
    pub fn constant(u: &DVector<f64>, a: &DVector<f64>, k: usize) -> Self {
        ControlInit { u: vec![u.clone(); k + 1], a: vec![a.clone(); k + 1] }
    }
}

#[derive(Debug, Clone, Copy)]
enum VarKind {
    U,
    A,
}

/// Decision-vector layout: structured coordinates of `u_j` and `a_j`.
struct Layout {
    vars: Vec<(VarKind, usize, usize)>,
    u_pinv: DMatrix<f64>,
    a_pinv: DMatrix<f64>,
}

impl Layout {
    fn new(problem: &DiscreteProblem) -> Self {
        let spec = &problem.spec;
        let (p, q) = (spec.u_structure.ncols(), spec.a_structure.ncols());
        let reference = problem.reference.is_some();
        let mut vars = Vec::new();
        for j in (if reference { 1 } else { 0 })..=problem.k {
            for c in 0..p {
                vars.push((VarKind::U, j, c));
            }
        }
        for j in (if reference { 1 } else { 0 })..problem.k {
            for c in 0..q {
                vars.push((VarKind::A, j, c));
            }
        }
        let pinv = |m: &DMatrix<f64>| m.clone().pseudo_inverse(1e-12).expect("structure matrix");
        Layout { vars, u_pinv: pinv(&spec.u_structure), a_pinv: pinv(&spec.a_structure) }
    }

    fn encode(&self, u: &[DVector<f64>], a: &[DVector<f64>]) -> DVector<f64> {
        let cu: Vec<DVector<f64>> = u.iter().map(|v| &self.u_pinv * v).collect();
        let ca: Vec<DVector<f64>> = a.iter().map(|v| &self.a_pinv * v).collect();
        DVector::from_iterator(
            self.vars.len(),
            self.vars.iter().map(|&(kind, j, c)| match kind {
                VarKind::U => cu[j][c],
                VarKind::A => ca[j][c],
            }),
        )
    }

    /// Writes `z` into the control paths; `a_k` follows `a_{k-1}`.
    fn decode(&self, problem: &DiscreteProblem, z: &DVector<f64>, u: &mut [DVector<f64>], a: &mut [DVector<f64>]) {
        let spec = &problem.spec;
        let k = problem.k;
        let mut cu: Vec<DVector<f64>> = u.iter().map(|v| &self.u_pinv * v).collect();
        let mut ca: Vec<DVector<f64>> = a.iter().map(|v| &self.a_pinv * v).collect();
        for (i, &(kind, j, c)) in self.vars.iter().enumerate() {
            match kind {
                VarKind::U => cu[j][c] = z[i],
                VarKind::A => ca[j][c] = z[i],
            }
        }
        ca[k] = ca[k - 1].clone();
        for j in 0..=k {
            u[j] = &spec.u_structure * &cu[j];
            a[j] = &spec.a_structure * &ca[j];
        }
    }
}

struct Merit<'a> {
    problem: &'a DiscreteProblem,
    layout: Layout,
    mult: Vec<f64>,
    rho: f64,
    u: Vec<DVector<f64>>,
    a: Vec<DVector<f64>>,
}

impl<'a> Merit<'a> {
    fn value_of(&self, ev: &Evaluation) -> f64 {
        let mut v = ev.objective;
        for (c, mu) in ev.constraints.iter().zip(self.mult.iter()) {
            let s = (mu + self.rho * c).max(0.0);
            v += (s * s - mu * mu) / (2.0 * self.rho);
        }
        v
    }

    fn trajectory(&mut self, z: &DVector<f64>) -> Result<DiscreteTrajectory> {
        self.layout.decode(self.problem, z, &mut self.u, &mut self.a);
        simulate(&self.problem.spec, &self.u, &self.a)
    }

    fn value(&mut self, z: &DVector<f64>) -> Result<(f64, DiscreteTrajectory)> {
        let traj = self.trajectory(z)?;
        let ev = evaluate(self.problem, &traj.x, &traj.u, &traj.a);
        Ok((self.value_of(&ev), traj))
    }

    /// Central differences; a perturbation of node `j` only re-integrates
    /// the steps it influences. Where the one-sided slopes disagree (a kink
    /// of the projection) the element of `[backward, forward]` nearest zero
    /// is returned.
    fn gradient(&mut self, z: &DVector<f64>, base: &DiscreteTrajectory, step: f64) -> Result<DVector<f64>> {
        self.layout.decode(self.problem, z, &mut self.u, &mut self.a);
        let spec = &self.problem.spec;
        let (k, h) = (self.problem.k, self.problem.h);
        let f0 = self.value_of(&evaluate(self.problem, &base.x, &self.u, &self.a));
        let mut g = DVector::zeros(z.len());
        for i in 0..z.len() {
            let (kind, j, c) = self.layout.vars[i];
            let s = step * z[i].abs().max(1.0);
            let mut vals = [0.0; 2];
            for (slot, sign) in [(0usize, 1.0), (1, -1.0)] {
                let delta = s * sign;
                let (from, touched_a_k) = match kind {
                    VarKind::U => {
                        self.u[j] += spec.u_structure.column(c) * delta;
                        (j.saturating_sub(1), false)
                    }
                    VarKind::A => {
                        self.a[j] += spec.a_structure.column(c) * delta;
                        if j == k - 1 {
                            self.a[k] += spec.a_structure.column(c) * delta;
                        }
                        (j, j == k - 1)
                    }
                };
                let ev = if matches!(kind, VarKind::U) && j == 0 {
                    evaluate(self.problem, &base.x, &self.u, &self.a)
                } else {
                    let mut x = base.x[..=from].to_vec();
                    let mut eta = base.eta[..from].to_vec();
                    propagate(spec, &self.u, &self.a, h, from, &mut x, &mut eta)?;
                    evaluate(self.problem, &x, &self.u, &self.a)
                };
                vals[slot] = self.value_of(&ev);
                match kind {
                    VarKind::U => self.u[j] -= spec.u_structure.column(c) * delta,
                    VarKind::A => {
                        self.a[j] -= spec.a_structure.column(c) * delta;
                        if touched_a_k {
                            self.a[k] -= spec.a_structure.column(c) * delta;
                        }
                    }
                }
            }
            let (fwd, bwd) = ((vals[0] - f0) / s, (f0 - vals[1]) / s);
            g[i] = if (fwd - bwd).abs() <= 1e-3 * (1.0 + fwd.abs().max(bwd.abs())) {
                (vals[0] - vals[1]) / (2.0 * s)
            } else if bwd <= fwd {
                if bwd > 0.0 {
                    bwd
                } else if fwd < 0.0 {
                    fwd
                } else {
                    0.0
                }
            } else if fwd.abs() > bwd.abs() {
                fwd
            } else {
                bwd
            };
        }
        Ok(g)
    }
}

/// Gradient of the reduced objective (no constraint terms) with respect to
/// the structured control coordinates, ordered as `u_0..u_k` then
/// `a_0..a_{k-1}` (nodes fixed by a reference are skipped).
pub fn reduced_gradient(problem: &DiscreteProblem, init: &ControlInit, fd_step: f64) -> Result<DVector<f64>> {
    let layout = Layout::new(problem);
    let z = layout.encode(&init.u, &init.a);
    let mut merit = Merit { problem, layout, mult: vec![], rho: 1.0, u: init.u.clone(), a: init.a.clone() };
    let (_, base) = merit.value(&z)?;
    merit.gradient(&z, &base, fd_step)
}

/// Reduced objective of a control pair (with `a_k` replaced by `a_{k-1}`).
pub fn reduced_objective(problem: &DiscreteProblem, init: &ControlInit) -> Result<f64> {
    let layout = Layout::new(problem);
    let z = layout.encode(&init.u, &init.a);
    let mut merit = Merit { problem, layout, mult: vec![], rho: 1.0, u: init.u.clone(), a: init.a.clone() };
    Ok(merit.value(&z)?.0)
}

fn repair_controls(problem: &DiscreteProblem, init: &ControlInit) -> Result<Option<ControlInit>> {
    let spec = &problem.spec;
    let layout = Layout::new(problem);
    let clamp = |u: &DVector<f64>| -> DVector<f64> {
        let coords = &layout.u_pinv * u;
        let mut v = &spec.u_structure * coords;
        let nv = v.norm();
        if nv == 0.0 {
            v = spec.u_structure.column(0).into_owned();
            let len = v.norm();
            v *= spec.r1 / len;
        } else if nv < spec.r1 {
            v *= spec.r1 / nv;
        } else if nv > spec.r2 {
            v *= spec.r2 / nv;
        }
        v
    };
    let mut u: Vec<DVector<f64>> = init.u.iter().map(clamp).collect();
    let a: Vec<DVector<f64>> = init.a.iter().map(|v| &spec.a_structure * (&layout.a_pinv * v)).collect();
    if let Some(r) = &problem.reference {
        u[0] = (r.u)(0.0);
    }
    let y0 = &spec.x0 - &u[0];
    if !spec.set.membership(&y0, TOL_ACT)? {
        if problem.reference.is_some() {
            return Ok(None);
        }
        let p = spec.set.project(&y0)?;
        u[0] = clamp(&(&spec.x0 - p.point));
        if !spec.set.membership(&(&spec.x0 - &u[0]), TOL_ACT)? {
            return Ok(None);
        }
    }
    Ok(Some(ControlInit { u, a }))
}

/// Single-shooting augmented-Lagrangian solve of `(P_k)` from `init`.
pub fn solve(problem: &DiscreteProblem, init: &ControlInit, options: &SolverOptions) -> Result<SolveResult> {
    options.validate()?;
    let k = problem.k;
    let spec = &problem.spec;
    if init.u.len() != k + 1 || init.a.len() != k + 1 {
        return Err(invalid("initial controls must have k + 1 entries"));
    }
    if init.u.iter().any(|v| v.len() != spec.state_dim()) || init.a.iter().any(|v| v.len() != spec.control_dim) {
        return Err(invalid("initial control dimension mismatch"));
    }
    let mut start = init.clone();
    if let Some(r) = &problem.reference {
        start.a[0] = (r.a)(0.0);
    }
    let Some(start) = repair_controls(problem, &start)? else {
        let trajectory = simulate(spec, &init.u, &init.a)?;
        let ev = evaluate(problem, &trajectory.x, &trajectory.u, &trajectory.a);
        return Ok(SolveResult {
            objective: ev.objective,
            max_violation: ev.constraints.iter().fold(0.0f64, |m, c| m.max(*c)),
            trajectory,
            iterations: 0,
            kkt_residual: f64::INFINITY,
            status: SolveStatus::Infeasible,
            merit_history: vec![],
        });
    };

    let layout = Layout::new(problem);
    let mut z = layout.encode(&start.u, &start.a);
    let mut merit =
        Merit { problem, layout, mult: vec![], rho: options.initial_penalty, u: start.u.clone(), a: start.a.clone() };
    let (_, t0) = merit.value(&z)?;
    let n_cons = evaluate(problem, &t0.x, &t0.u, &t0.a).constraints.len();
    merit.mult = vec![0.0; n_cons];

    let mut iterations = 0;
    let mut history = Vec::new();
    let mut last_violation = f64::INFINITY;
    let mut kkt = f64::INFINITY;
    let mut status = SolveStatus::MaxIter;
    for _ in 0..options.max_outer {
        let (nz, inner_hist, gnorm, its) = lbfgs(&mut merit, z, options)?;
        z = nz;
        iterations += its;
        history.push(inner_hist);
        kkt = gnorm;
        let traj = merit.trajectory(&z)?;
        let ev = evaluate(problem, &traj.x, &traj.u, &traj.a);
        let violation = ev.constraints.iter().fold(0.0f64, |m, c| m.max(*c));
        if violation <= options.tol_feas && gnorm <= options.tol_kkt {
            status = SolveStatus::Converged;
            break;
        }
        for (mu, c) in merit.mult.iter_mut().zip(ev.constraints.iter()) {
            *mu = (*mu + merit.rho * c).max(0.0);
        }
        if violation > 0.25 * last_violation && violation > options.tol_feas {
            merit.rho *= options.penalty_growth;
        }
        last_violation = violation;
    }
    let mut trajectory = merit.trajectory(&z)?;
    // reported a_k repeats a_{k-1}, as in the decision layout
    trajectory.a[k] = trajectory.a[k - 1].clone();
    let ev = evaluate(problem, &trajectory.x, &trajectory.u, &trajectory.a);
    Ok(SolveResult {
        objective: ev.objective,
        max_violation: ev.constraints.iter().fold(0.0f64, |m, c| m.max(*c)),
        trajectory,
        iterations,
        kkt_residual: kkt,
        status,
        merit_history: history,
    })
}

/// Limited-memory BFGS with Armijo backtracking on the merit function.
fn lbfgs(merit: &mut Merit, z0: DVector<f64>, options: &SolverOptions) -> Result<(DVector<f64>, Vec<f64>, f64, usize)> {
    const MEMORY: usize = 10;
    let mut z = z0;
    let (mut f, mut traj) = merit.value(&z)?;
    let mut g = merit.gradient(&z, &traj, options.fd_step)?;
    let mut s_hist: Vec<DVector<f64>> = Vec::new();
    let mut y_hist: Vec<DVector<f64>> = Vec::new();
    let mut history = vec![f];
    let mut its = 0;
    while its < options.max_inner {
        let gnorm = g.amax();
        if gnorm <= options.tol_kkt {
            break;
        }
        // two-loop recursion
        let mut q = g.clone();
        let mut alphas = Vec::with_capacity(s_hist.len());
        for (s, y) in s_hist.iter().zip(y_hist.iter()).rev() {
            let rho = 1.0 / y.dot(s);
            let alpha = rho * s.dot(&q);
            q -= y * alpha;
            alphas.push((alpha, rho));
        }
        let gamma = match (s_hist.last(), y_hist.last()) {
            (Some(s), Some(y)) => s.dot(y) / y.dot(y),
            _ => 1.0 / g.norm().max(1e-300),
        };
        let mut r = q * gamma;
        for ((s, y), (alpha, rho)) in s_hist.iter().zip(y_hist.iter()).zip(alphas.into_iter().rev()) {
            let beta = rho * y.dot(&r);
            r += s * (alpha - beta);
        }
        let mut dir = -r;
        let mut slope = g.dot(&dir);
        if !(slope < 0.0) {
            dir = -g.clone();
            slope = -g.norm_squared();
            s_hist.clear();
            y_hist.clear();
        }
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..50 {
            let zn = &z + &dir * t;
            if let Ok((fnew, tn)) = merit.value(&zn) {
                if fnew.is_finite() && fnew <= f + 1e-4 * t * slope {
                    accepted = Some((zn, fnew, tn));
                    break;
                }
            }
            t *= 0.5;
        }
        let Some((zn, fnew, tn)) = accepted else {
            break;
        };
        its += 1;
        let gn = merit.gradient(&zn, &tn, options.fd_step)?;
        let s = &zn - &z;
        let y = &gn - &g;
        if s.dot(&y) > 1e-12 * s.norm() * y.norm() {
            s_hist.push(s);
            y_hist.push(y);
            if s_hist.len() > MEMORY {
                s_hist.remove(0);
                y_hist.remove(0);
            }
        }
        let stalled = (f - fnew).abs() <= 1e-15 * f.abs().max(1.0);
        z = zn;
        f = fnew;
        g = gn;
        traj = tn;
        history.push(f);
        if stalled {
            break;
        }
    }
    let _ = traj;
    Ok((z, history, g.amax(), its))
}

#[derive(Debug, Clone, Serialize)]
pub struct ConvergenceRow {
    pub k: usize,
    pub w12_distance: f64,
    pub objective: f64,
    pub objective_gap: f64,
    pub status: Option<SolveStatus>,
    pub error: Option<String>,
}

/// Solves `(P_k)` in plain mode for each `k` and measures the distance to a
/// reference path. Rows are computed on the current rayon pool.
pub fn convergence_study(
    spec: &ProcessSpec,
    cost: &CostSpec,
    k_list: &[usize],
    reference: &ReferencePath,
    reference_objective: f64,
    init: &(dyn Fn(usize) -> ControlInit + Sync),
    options: &SolverOptions,
) -> Result<Vec<ConvergenceRow>> {
    use rayon::prelude::*;
    if k_list.windows(2).any(|w| w[0] >= w[1]) {
        return Err(invalid("k_list must be increasing"));
    }
    let rows = k_list
        .par_iter()
        .map(|&k| {
            let run = || -> Result<(f64, f64, SolveStatus)> {
                let problem = build_pk(spec, cost, k, None)?;
                let res = solve(&problem, &init(k), options)?;
                let d = crate::dynamics::w12_distance_to_path(&res.trajectory, &*reference.x, &*reference.xdot)?;
                Ok((d, res.objective, res.status))
            };
            match run() {
                Ok((d, obj, status)) => ConvergenceRow {
                    k,
                    w12_distance: d,
                    objective: obj,
                    objective_gap: (obj - reference_objective).abs() / reference_objective.abs().max(1e-300),
                    status: Some(status),
                    error: None,
                },
                Err(e) => ConvergenceRow {
                    k,
                    w12_distance: f64::NAN,
                    objective: f64::NAN,
                    objective_gap: f64::NAN,
                    status: None,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect();
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::SweepingSet;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(xs)
    }

    fn car() -> (ProcessSpec, CostSpec) {
        let set = SweepingSet::affine(DMatrix::from_element(1, 1, -1.0), DVector::zeros(1), 1.0, 1.0).unwrap();
        let spec = ProcessSpec::new(
            set,
            Arc::new(|_, a| a * 9.0),
            Arc::new(|_, _| DMatrix::zeros(1, 1)),
            Arc::new(|_, _| DMatrix::from_element(1, 1, 9.0)),
            1,
            20.0,
            v(&[-250.0]),
            1e-3,
            50.0,
            1.0,
            20.0,
        )
        .unwrap();
        let cost = CostSpec::new(Arc::new(|x| 0.5 * x.norm_squared()), Arc::new(|r| 0.5 * r.a.norm_squared()));
        (spec, cost)
    }

    #[test]
    fn counts_and_k_bounds() {
        let (spec, cost) = car();
        let p = build_pk(&spec, &cost, 10, None).unwrap();
        assert_eq!(p.mode(), ProblemMode::Plain);
        assert_eq!(p.constraint_counts(), ConstraintCounts { state: 11, norm: 22, localization: 0, variation: 0 });
        assert!(build_pk(&spec, &cost, 1, None).is_err());
    }

    #[test]
    fn zero_cost_is_zero() {
        let (spec, _) = car();
        let cost = CostSpec::new(Arc::new(|_| 0.0), Arc::new(|_| 0.0));
        let p = build_pk(&spec, &cost, 4, None).unwrap();
        let traj = simulate(&spec, &vec![v(&[1.0]); 5], &vec![v(&[0.3]); 5]).unwrap();
        assert_eq!(evaluate_cost(&p, &traj).unwrap(), 0.0);
    }

    #[test]
    fn mu_tilde_formula() {
        let m = mu_tilde(1.0, 0.5, 2.0);
        let ek = 0.5f64.exp();
        assert!((m - (3.0 * 5.0 * ek).max(4.0 * (ek + 1.0))).abs() < 1e-12);
    }

    #[test]
    fn fd_cost_gradients_match_closed_form() {
        let (_, cost) = car();
        let x = v(&[2.0]);
        assert!((cost.phi_gradient(&x)[0] - 2.0).abs() < 1e-8);
        let z = v(&[0.0]);
        let a = v(&[-1.5]);
        let g = cost.ell_gradient(&RunningArgs { t: 0.0, x: &z, u: &z, a: &a, xdot: &z, udot: &z, adot: &z });
        assert!((g.a[0] + 1.5).abs() < 1e-8);
        assert_eq!(g.x[0], 0.0);
    }

    #[test]
    fn solve_small_car() {
        let (spec, cost) = car();
        let k = 20;
        let p = build_pk(&spec, &cost, k, None).unwrap();
        let theta = -45000.0 / 32420.0;
        let ubar = v(&[-250.0 - 180.0 * theta]);
        let res = solve(&p, &ControlInit::constant(&ubar, &v(&[0.0]), k), &SolverOptions::default()).unwrap();
        assert_eq!(res.status, SolveStatus::Converged);
        for a in &res.trajectory.a {
            assert!((a[0] - theta).abs() < 1e-4, "{}", a[0]);
        }
        for h in &res.merit_history {
            assert!(h.windows(2).all(|w| w[1] <= w[0]));
        }
    }
}
