//! Dual reconstruction and residual checks of the discrete and continuous
//! necessary optimality conditions.
//!
//! Sign convention: the coderivative direction at step `j` is
//! `y_j = p^x_{j+1} - lambda (v^x_j + theta^x_j / h)`.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};

use crate::dynamics::{fmt_sig, DiscreteTrajectory, ProcessSpec};
use crate::error::{invalid, Result, SweepError};
use crate::geometry::TOL_ACT;
use crate::linalg::{bounded_lstsq, nnls, Bound};
use crate::second_order::{gamma_tags, CoderivativeValue, GammaTag};
use crate::transcription::{theta, CostSpec, DiscreteProblem, RunningArgs, RunningGrad};

/// Adjoint triple `(p^x, p^u, p^a)` at one node.
#[derive(Debug, Clone, PartialEq)]
pub struct Adjoint {
    pub x: DVector<f64>,
    pub u: DVector<f64>,
    pub a: DVector<f64>,
}

impl Adjoint {
    pub fn zeros(n: usize, d: usize) -> Self {
        Adjoint { x: DVector::zeros(n), u: DVector::zeros(n), a: DVector::zeros(d) }
    }

    pub fn norm(&self) -> f64 {
        (self.x.norm_squared() + self.u.norm_squared() + self.a.norm_squared()).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Theta {
    pub x: DVector<f64>,
    pub u: DVector<f64>,
    pub a: DVector<f64>,
}

/// Dual elements of the discrete optimality system.
///
/// `p`, `eta`, `xi1`, `xi2` have `k + 1` entries; `gamma`, `subgradients`
/// and `theta` have `k`. `eta[j]` for `j < k` are the velocity multipliers
/// at `x_j - u_j`; `eta[k]` is the terminal multiplier.
#[derive(Debug, Clone)]
pub struct DualSystem {
    pub lambda: f64,
    pub p: Vec<Adjoint>,
    pub eta: Vec<DVector<f64>>,
    pub gamma: Vec<DVector<f64>>,
    pub xi1: Vec<f64>,
    pub xi2: Vec<f64>,
    pub subgradients: Vec<RunningGrad>,
    pub theta: Vec<Theta>,
    /// Least-squares residual of each backward stage (index `k` is terminal).
    pub stage_residuals: Vec<f64>,
}

impl DualSystem {
    /// All-zero duals of the right shape.
    pub fn zeros(k: usize, n: usize, d: usize, m: usize) -> Self {
        let g0 = RunningGrad {
            x: DVector::zeros(n),
            u: DVector::zeros(n),
            a: DVector::zeros(d),
            xdot: DVector::zeros(n),
            udot: DVector::zeros(n),
            adot: DVector::zeros(d),
        };
        DualSystem {
            lambda: 0.0,
            p: vec![Adjoint::zeros(n, d); k + 1],
            eta: vec![DVector::zeros(m); k + 1],
            gamma: vec![DVector::zeros(m); k],
            xi1: vec![0.0; k + 1],
            xi2: vec![0.0; k + 1],
            subgradients: vec![g0; k],
            theta: vec![Theta { x: DVector::zeros(n), u: DVector::zeros(n), a: DVector::zeros(d) }; k],
            stage_residuals: vec![0.0; k + 1],
        }
    }

    pub fn k(&self) -> usize {
        self.p.len().saturating_sub(1)
    }

    /// The adjoint read at grid nodes as the arc `q` of the continuous
    /// system; the atom at `t_j` belongs to the tail `[t_j, T]`.
    pub fn q(&self) -> &[Adjoint] {
        &self.p
    }

    /// Absolutely continuous arc `p` at the nodes, obtained from `q` by
    /// adding back the tail sums of the measure atoms.
    pub fn continuous_p(&self, spec: &ProcessSpec, traj: &DiscreteTrajectory) -> Result<Vec<Adjoint>> {
        let atoms = measure_atoms(self, spec, traj)?;
        let k = self.k();
        let mut out = self.p.clone();
        let mut tail_x = DVector::zeros(spec.state_dim());
        let mut tail_u = DVector::zeros(spec.state_dim());
        for j in (0..k).rev() {
            tail_x += &atoms[j];
            tail_u += &atoms[j] + &traj.u[j] * (2.0 * (self.xi1[j] + self.xi2[j]));
            out[j].x = &self.p[j].x - &tail_x;
            out[j].u = &self.p[j].u + &tail_u;
        }
        Ok(out)
    }

    fn check_shape(&self, k: usize, n: usize, d: usize, m: usize) -> Result<()> {
        let ok = self.p.len() == k + 1
            && self.eta.len() == k + 1
            && self.gamma.len() == k
            && self.xi1.len() == k + 1
            && self.xi2.len() == k + 1
            && self.subgradients.len() == k
            && self.theta.len() == k
            && self.p.iter().all(|p| p.x.len() == n && p.u.len() == n && p.a.len() == d)
            && self.eta.iter().all(|e| e.len() == m)
            && self.gamma.iter().all(|g| g.len() == m);
        if ok {
            Ok(())
        } else {
            Err(invalid("dual system is missing entries or has wrong dimensions"))
        }
    }
}

/// `G_j = h (sum_i eta_{j,i} grad^2 g_i y_j + sum_i gamma_{j,i} grad g_i)`.
fn measure_atoms(duals: &DualSystem, spec: &ProcessSpec, traj: &DiscreteTrajectory) -> Result<Vec<DVector<f64>>> {
    let k = duals.k();
    let h = traj.h();
    let mut out = Vec::with_capacity(k);
    for j in 0..k {
        let xu = &traj.x[j] - &traj.u[j];
        let y = direction(duals, j, h);
        let jac = spec.set.grad_g(&xu);
        let mut atom = jac.transpose() * &duals.gamma[j];
        if duals.eta[j].iter().any(|e| *e != 0.0) {
            for (i, hess) in spec.set.hess_g(&xu).iter().enumerate() {
                atom += hess * &y * duals.eta[j][i];
            }
        }
        out.push(atom * h);
    }
    Ok(out)
}

fn direction(duals: &DualSystem, j: usize, h: f64) -> DVector<f64> {
    let sg = &duals.subgradients[j];
    &duals.p[j + 1].x - (&sg.xdot + &duals.theta[j].x / h) * duals.lambda
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckOptions {
    /// Relative tolerance: a residual `r` against a matched side of size
    /// `s` passes when `r <= tol_dual (1 + s)`.
    pub tol_dual: f64,
    pub tol_act: f64,
    pub tol_nontriv: f64,
}

impl Default for CheckOptions {
    fn default() -> Self {
        CheckOptions { tol_dual: 1e-6, tol_act: TOL_ACT, tol_nontriv: 1e-8 }
    }
}

impl CheckOptions {
    pub fn with_tolerance(tol: f64) -> Self {
        CheckOptions { tol_dual: tol, ..Default::default() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionEntry {
    pub name: String,
    /// Max over nodes of `residual / (1 + matched magnitude)`.
    pub residual: f64,
    pub tolerance: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionReport {
    pub entries: Vec<ConditionEntry>,
    pub nontriviality_value: f64,
    pub nontriviality_tolerance: f64,
    pub overall: bool,
    /// Warnings that do not affect the verdict.
    pub flags: Vec<String>,
}

impl ConditionReport {
    fn new(tol_nontriv: f64) -> Self {
        ConditionReport {
            entries: vec![],
            nontriviality_value: 0.0,
            nontriviality_tolerance: tol_nontriv,
            overall: false,
            flags: vec![],
        }
    }

    fn flag_norm_bounds(&mut self, spec: &ProcessSpec) {
        if spec.r1 == spec.r2 {
            self.flags.push("r1 = r2: both norm multipliers may be active at once".into());
        }
    }

    fn finish(mut self, nontriviality: f64) -> Self {
        self.nontriviality_value = nontriviality;
        self.overall = self.entries.iter().all(|e| e.pass) && nontriviality > self.nontriviality_tolerance;
        self
    }

    pub fn entry(&self, name: &str) -> Option<&ConditionEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn max_residual(&self) -> f64 {
        self.entries.iter().fold(0.0f64, |m, e| m.max(e.residual))
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let verdict = |p: bool| if p { "pass" } else { "fail" };
        for e in &self.entries {
            let _ = writeln!(
                s,
                "{:<28} {:>20} {:>20} {}",
                e.name,
                fmt_sig(e.residual),
                fmt_sig(e.tolerance),
                verdict(e.pass)
            );
        }
        let _ = writeln!(
            s,
            "{:<28} {:>20} {:>20} {}",
            "nontriviality",
            fmt_sig(self.nontriviality_value),
            fmt_sig(self.nontriviality_tolerance),
            verdict(self.nontriviality_value > self.nontriviality_tolerance)
        );
        for f in &self.flags {
            let _ = writeln!(s, "flag {f}");
        }
        let _ = writeln!(s, "overall {}", verdict(self.overall));
        s
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let err = |e: csv::Error| SweepError::Csv(e.to_string());
        w.write_record(["name", "residual", "tolerance", "verdict"]).map_err(err)?;
        let verdict = |p: bool| if p { "pass" } else { "fail" };
        for e in &self.entries {
            w.write_record([e.name.as_str(), &fmt_sig(e.residual), &fmt_sig(e.tolerance), verdict(e.pass)])
                .map_err(err)?;
        }
        w.write_record([
            "nontriviality",
            &fmt_sig(self.nontriviality_value),
            &fmt_sig(self.nontriviality_tolerance),
            verdict(self.nontriviality_value > self.nontriviality_tolerance),
        ])
        .map_err(err)?;
        for f in &self.flags {
            w.write_record(["flag", "", "", f.as_str()]).map_err(err)?;
        }
        w.write_record(["overall", "", "", verdict(self.overall)]).map_err(err)?;
        let bytes = w.into_inner().map_err(|e| SweepError::Csv(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| SweepError::Csv(e.to_string()))
    }
}

/// Running max of scaled residuals for one named condition.
struct Acc {
    name: &'static str,
    value: f64,
}

impl Acc {
    fn new(name: &'static str) -> Self {
        Acc { name, value: 0.0 }
    }

    fn add(&mut self, residual: f64, magnitude: f64) {
        let r = residual / (1.0 + magnitude);
        if r.is_nan() {
            self.value = f64::INFINITY;
        } else {
            self.value = self.value.max(r);
        }
    }

    fn push(self, report: &mut ConditionReport, tol: f64) {
        report.entries.push(ConditionEntry {
            name: self.name.to_string(),
            residual: self.value,
            tolerance: tol,
            pass: self.value <= tol,
        });
    }
}

/// Per-step primal data used by both checks.
struct Stage {
    xu: DVector<f64>,
    g: DVector<f64>,
    jac: DMatrix<f64>,
    hess: Vec<DMatrix<f64>>,
    fx: DMatrix<f64>,
    fa: DMatrix<f64>,
    f: DVector<f64>,
    xdot: DVector<f64>,
}

fn stage(spec: &ProcessSpec, traj: &DiscreteTrajectory, j: usize) -> Stage {
    let k = traj.k();
    let xu = &traj.x[j] - &traj.u[j];
    let xdot = if j < k { (&traj.x[j + 1] - &traj.x[j]) / traj.h() } else { DVector::zeros(xu.len()) };
    Stage {
        g: spec.set.g(&xu),
        jac: spec.set.grad_g(&xu),
        hess: spec.set.hess_g(&xu),
        fx: spec.grad_f_x(&traj.x[j], &traj.a[j]),
        fa: spec.grad_f_a(&traj.x[j], &traj.a[j]),
        f: spec.f(&traj.x[j], &traj.a[j]),
        xdot,
        xu,
    }
}

fn hess_apply(st: &Stage, eta: &DVector<f64>, y: &DVector<f64>) -> DVector<f64> {
    let mut out = DVector::zeros(y.len());
    for (i, h) in st.hess.iter().enumerate() {
        if eta[i] != 0.0 {
            out += h * y * eta[i];
        }
    }
    out
}

/// Nonnegative multipliers with `-xdot - f = -sum eta_i grad g_i` over the
/// active constraints, and the fit residual.
fn velocity_fit(st: &Stage, tol_act: f64) -> (DVector<f64>, f64) {
    let m = st.g.len();
    let rhs = &st.xdot + &st.f;
    let active: Vec<usize> = (0..m).filter(|&i| st.g[i] <= tol_act).collect();
    let mut eta = DVector::zeros(m);
    if active.is_empty() {
        return (eta, rhs.norm());
    }
    let cols = DMatrix::from_fn(rhs.len(), active.len(), |r, c| st.jac[(active[c], r)]);
    let sol = nnls(&cols, &rhs);
    for (c, &i) in active.iter().enumerate() {
        eta[i] = sol[c];
    }
    (eta, (&rhs - cols * sol).norm())
}

fn running_grad(cost: &CostSpec, traj: &DiscreteTrajectory, j: usize, t: f64) -> RunningGrad {
    let h = traj.h();
    let xdot = (&traj.x[j + 1] - &traj.x[j]) / h;
    let udot = (&traj.u[j + 1] - &traj.u[j]) / h;
    let adot = (&traj.a[j + 1] - &traj.a[j]) / h;
    cost.ell_gradient(&RunningArgs {
        t,
        x: &traj.x[j],
        u: &traj.u[j],
        a: &traj.a[j],
        xdot: &xdot,
        udot: &udot,
        adot: &adot,
    })
}

fn check_traj(problem: &DiscreteProblem, traj: &DiscreteTrajectory) -> Result<()> {
    traj.validate_shape()?;
    let spec = &problem.spec;
    if traj.k() != problem.k
        || traj.state_dim() != spec.state_dim()
        || traj.control_dim() != spec.control_dim
        || traj.num_constraints() != spec.set.num_constraints()
    {
        return Err(invalid("trajectory does not match the problem dimensions"));
    }
    Ok(())
}

/// Norm-annulus interval `[r1 - eps, r2 + eps]` and the activity of its ends.
fn norm_activity(spec: &ProcessSpec, eps: f64, u: &DVector<f64>, tol: f64) -> (bool, bool) {
    let nu = u.norm();
    (nu >= spec.r2 + eps - tol, nu <= spec.r1 - eps + tol)
}

fn xi_bounds(upper: bool, lower: bool) -> [Bound; 2] {
    [if upper { Bound::NonNegative } else { Bound::Zero }, if lower { Bound::NonPositive } else { Bound::Zero }]
}

fn tags_or_free(spec: &ProcessSpec, st: &Stage, eta: &DVector<f64>, y: &DVector<f64>) -> Vec<GammaTag> {
    let tol = 1e-9 * (1.0 + y.norm() * spec.set.constants().m2);
    match gamma_tags(&spec.set, &st.xu, eta, y, tol) {
        Ok(CoderivativeValue::Tagged(t)) => t,
        _ => vec![GammaTag::Free; eta.len()],
    }
}

/// Rows of a stage least-squares system `M z = r`.
struct Rows {
    m: Vec<Vec<f64>>,
    r: Vec<f64>,
}

impl Rows {
    fn new() -> Self {
        Rows { m: vec![], r: vec![] }
    }

    fn push_block(&mut self, mat: &DMatrix<f64>, rhs: &DVector<f64>) {
        for i in 0..mat.nrows() {
            self.m.push(mat.row(i).iter().copied().collect());
            self.r.push(rhs[i]);
        }
    }

    fn solve(&self, bounds: &[Bound]) -> (DVector<f64>, f64) {
        let nvar = bounds.len();
        if self.r.is_empty() {
            return (DVector::zeros(nvar), 0.0);
        }
        let mat = DMatrix::from_fn(self.r.len(), nvar, |i, c| self.m[i][c]);
        let rhs = DVector::from_column_slice(&self.r);
        let scale = 1.0 + rhs.amax();
        let z = bounded_lstsq(&mat, &rhs, bounds);
        let res = (&mat * &z - &rhs).amax() / scale;
        (z, res)
    }
}

/// Rows coupling step `j - 1` to the unknown `p^x_j = base + L z`: the
/// implication for positive multipliers and, when `a_known` is given, the
/// a-equation.
#[allow(clippy::too_many_arguments)]
fn previous_step_rows(
    rows: &mut Rows,
    prev: &Stage,
    prev_eta: &DVector<f64>,
    a_struct: &DMatrix<f64>,
    base_y: &DVector<f64>,
    lin: &DMatrix<f64>,
    a_known: Option<&DVector<f64>>,
    tol: f64,
) {
    if let Some(a_known) = a_known {
        // A^T [known - grad_a f^T (base_y + L z)] = 0
        let at_fa = a_struct.transpose() * prev.fa.transpose();
        rows.push_block(&(&at_fa * lin), &(a_struct.transpose() * a_known - &at_fa * base_y));
    }
    for i in 0..prev_eta.len() {
        if prev_eta[i] > tol {
            let gi = prev.jac.row(i).transpose();
            rows.m.push((gi.transpose() * lin).iter().copied().collect());
            rows.r.push(-gi.dot(base_y));
        }
    }
}

#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub duals: DualSystem,
    pub report: ConditionReport,
}

/// Builds the dual system backward from the terminal conditions, fitting
/// `eta_k`, `gamma_j` and the norm multipliers by sign-constrained least
/// squares.
pub fn reconstruct_duals(
    traj: &DiscreteTrajectory,
    problem: &DiscreteProblem,
    lambda: f64,
    options: &CheckOptions,
) -> Result<Reconstruction> {
    check_traj(problem, traj)?;
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(invalid("lambda must be finite and nonnegative"));
    }
    let spec = &problem.spec;
    let (k, h) = (problem.k, problem.h);
    let (n, d, m) = (spec.state_dim(), spec.control_dim, spec.set.num_constraints());
    let (bs, as_) = (&spec.u_structure, &spec.a_structure);
    let stages: Vec<Stage> = (0..=k).map(|j| stage(spec, traj, j)).collect();
    let mut duals = DualSystem::zeros(k, n, d, m);
    duals.lambda = lambda;
    for j in 0..k {
        let sg = running_grad(&problem.cost, traj, j, problem.t(j));
        let (tx, tu, ta) = theta(problem, traj, j);
        duals.subgradients[j] = sg;
        duals.theta[j] = Theta { x: tx, u: tu, a: ta };
        duals.eta[j] = velocity_fit(&stages[j], options.tol_act).0;
    }
    // coupling fixes p^u and p^a at nodes 1..k
    for j in 0..k {
        let (sg, th) = (&duals.subgradients[j], &duals.theta[j]);
        duals.p[j + 1].u = (&sg.udot + &th.u / h) * lambda;
        duals.p[j + 1].a = (&sg.adot + &th.a / h) * lambda;
    }
    let eps = problem.epsilon_k;
    let tol_act = options.tol_act;

    // terminal stage: z = (eta_k, xi1_k, xi2_k)
    {
        let st = &stages[k];
        let base_px = -problem.cost.phi_gradient(&traj.x[k]) * lambda;
        let lin = st.jac.transpose(); // p^x_k = base + G^T eta_k
        let mut lin_full = DMatrix::zeros(n, m + 2);
        lin_full.columns_mut(0, m).copy_from(&lin);
        let mut rows = Rows::new();
        // B^T [p^u_k + G^T eta + 2 (xi1 + xi2) u_k] = 0
        let mut mu = DMatrix::zeros(n, m + 2);
        mu.columns_mut(0, m).copy_from(&lin);
        mu.set_column(m, &(&traj.u[k] * 2.0));
        mu.set_column(m + 1, &(&traj.u[k] * 2.0));
        rows.push_block(&(bs.transpose() * mu), &(-(bs.transpose() * &duals.p[k].u)));
        let prev = &stages[k - 1];
        let sg = &duals.subgradients[k - 1];
        let th = &duals.theta[k - 1];
        let base_y = &base_px - (&sg.xdot + &th.x / h) * lambda;
        let a_known = (&duals.p[k].a - &duals.p[k - 1].a) / h - &sg.a * lambda;
        previous_step_rows(&mut rows, prev, &duals.eta[k - 1], as_, &base_y, &lin_full, Some(&a_known), tol_act);
        let (up, lo) = norm_activity(spec, eps, &traj.u[k], tol_act);
        let mut bounds: Vec<Bound> =
            (0..m).map(|i| if st.g[i] <= tol_act { Bound::NonNegative } else { Bound::Zero }).collect();
        bounds.extend(xi_bounds(up, lo));
        let (z, res) = rows.solve(&bounds);
        duals.eta[k] = z.rows(0, m).into_owned();
        duals.xi1[k] = z[m];
        duals.xi2[k] = z[m + 1];
        duals.p[k].x = base_px + &lin * &duals.eta[k];
        duals.stage_residuals[k] = res;
    }

    for j in (0..k).rev() {
        let st = &stages[j];
        let sg = duals.subgradients[j].clone();
        let y = direction(&duals, j, h);
        let hy = hess_apply(st, &duals.eta[j], &y);
        let tags = tags_or_free(spec, st, &duals.eta[j], &y);
        // p^x_j = base_x + h G^T gamma
        let base_x = &duals.p[j + 1].x - (&sg.x * lambda + st.fx.transpose() * &y - &hy) * h;
        let gt = st.jac.transpose();
        let mut lin = DMatrix::zeros(n, m + 2);
        lin.columns_mut(0, m).copy_from(&(&gt * h));
        let mut rows = Rows::new();
        if j >= 1 {
            // B^T [(p^u_{j+1} - p^u_j)/h - lambda w^u - (2/h)(xi1 + xi2) u_j - H y - G^T gamma] = 0
            let known = (&duals.p[j + 1].u - &duals.p[j].u) / h - &sg.u * lambda - &hy;
            let mut mu = DMatrix::zeros(n, m + 2);
            mu.columns_mut(0, m).copy_from(&gt);
            mu.set_column(m, &(&traj.u[j] * (2.0 / h)));
            mu.set_column(m + 1, &(&traj.u[j] * (2.0 / h)));
            rows.push_block(&(bs.transpose() * mu), &(bs.transpose() * known));
            let psg = &duals.subgradients[j - 1];
            let pth = &duals.theta[j - 1];
            let base_y = &base_x - (&psg.xdot + &pth.x / h) * lambda;
            let a_known = (&duals.p[j].a - &duals.p[j - 1].a) / h - &psg.a * lambda;
            // p^a_0 is not fixed by coupling
            let a_known = (j >= 2).then_some(&a_known);
            previous_step_rows(&mut rows, &stages[j - 1], &duals.eta[j - 1], as_, &base_y, &lin, a_known, tol_act);
        }
        let (up, lo) = norm_activity(spec, eps, &traj.u[j], tol_act);
        let mut bounds: Vec<Bound> = tags.iter().map(|t| t.bound()).collect();
        bounds.extend(xi_bounds(up, lo));
        let (z, res) = rows.solve(&bounds);
        duals.gamma[j] = z.rows(0, m).into_owned();
        duals.xi1[j] = z[m];
        duals.xi2[j] = z[m + 1];
        duals.p[j].x = &base_x + &gt * &duals.gamma[j] * h;
        if j == 0 {
            // p^u_0 and p^a_0 from their own equations
            let known = &duals.p[1].u
                - (&sg.u * lambda + &hy + &gt * &duals.gamma[0]) * h
                - &traj.u[0] * (2.0 * (duals.xi1[0] + duals.xi2[0]));
            duals.p[0].u = known;
        }
        if j == 0 {
            let y0 = direction(&duals, 0, h);
            duals.p[0].a = &duals.p[1].a - (&sg.a * lambda + st.fa.transpose() * y0) * h;
        }
        duals.stage_residuals[j] = res;
    }

    let max = duals.stage_residuals.iter().fold(0.0f64, |a, b| a.max(*b));
    let report = check_discrete(traj, &duals, problem, options)?;
    if max > options.tol_dual {
        return Err(SweepError::ReconstructionFailed { max, profile: duals.stage_residuals.clone() });
    }
    Ok(Reconstruction { duals, report })
}

/// Residuals of the discrete optimality system for given duals.
pub fn check_discrete(
    traj: &DiscreteTrajectory,
    duals: &DualSystem,
    problem: &DiscreteProblem,
    options: &CheckOptions,
) -> Result<ConditionReport> {
    check_traj(problem, traj)?;
    let spec = &problem.spec;
    let (k, h) = (problem.k, problem.h);
    let (n, d, m) = (spec.state_dim(), spec.control_dim, spec.set.num_constraints());
    duals.check_shape(k, n, d, m)?;
    let (bs, as_) = (&spec.u_structure, &spec.a_structure);
    let lambda = duals.lambda;
    let tol = options.tol_dual;
    let tol_act = options.tol_act;
    let eps = problem.epsilon_k;
    let stages: Vec<Stage> = (0..=k).map(|j| stage(spec, traj, j)).collect();

    let mut dynamics = Acc::new("dynamics");
    let mut adj_x = Acc::new("adjoint-x");
    let mut adj_u = Acc::new("adjoint-u");
    let mut adj_a = Acc::new("adjoint-a");
    let mut coup_u = Acc::new("coupling-u");
    let mut coup_a = Acc::new("coupling-a");
    let mut tr_x = Acc::new("transversality-x");
    let mut tr_u = Acc::new("transversality-u");
    let mut tr_a = Acc::new("transversality-a");
    let mut signs = Acc::new("multiplier-signs");
    let mut norm_comp = Acc::new("norm-complementarity");
    let mut eta_comp = Acc::new("eta-complementarity");
    let mut tags_acc = Acc::new("gamma-tags");
    let mut gamma_inactive = Acc::new("gamma-inactive");
    let mut implication = Acc::new("eta-implication");

    for j in 0..=k {
        let st = &stages[j];
        for i in 0..m {
            signs.add((-duals.eta[j][i]).max(0.0), 0.0);
            if st.g[i] > tol_act {
                eta_comp.add(duals.eta[j][i].abs(), 0.0);
            }
        }
        signs.add((-duals.xi1[j]).max(0.0) + duals.xi2[j].max(0.0), 0.0);
        let nu = traj.u[j].norm();
        norm_comp.add((duals.xi1[j] * (nu - spec.r2 - eps)).abs(), 0.0);
        norm_comp.add((duals.xi2[j] * (nu - spec.r1 + eps)).abs(), 0.0);
    }

    for j in 0..k {
        let st = &stages[j];
        let sg = &duals.subgradients[j];
        let th = &duals.theta[j];
        // -xdot = f - G^T eta
        let lhs = -&st.xdot;
        let rhs = &st.f - st.jac.transpose() * &duals.eta[j];
        dynamics.add((&lhs - &rhs).norm(), lhs.norm().max(rhs.norm()));

        let y = direction(duals, j, h);
        let hy = hess_apply(st, &duals.eta[j], &y);
        let ggam = st.jac.transpose() * &duals.gamma[j];
        let px_l = (&duals.p[j + 1].x - &duals.p[j].x) / h - &sg.x * lambda;
        let px_r = st.fx.transpose() * &y - &hy - &ggam;
        adj_x.add((&px_l - &px_r).norm(), px_l.norm().max(px_r.norm()));

        let xi = duals.xi1[j] + duals.xi2[j];
        let pu_l = (&duals.p[j + 1].u - &duals.p[j].u) / h - &sg.u * lambda - &traj.u[j] * (2.0 * xi / h);
        let pu_r = &hy + &ggam;
        adj_u.add((bs.transpose() * (&pu_l - &pu_r)).norm(), pu_l.norm().max(pu_r.norm()));

        let pa_l = (&duals.p[j + 1].a - &duals.p[j].a) / h - &sg.a * lambda;
        let pa_r = st.fa.transpose() * &y;
        adj_a.add((as_.transpose() * (&pa_l - &pa_r)).norm(), pa_l.norm().max(pa_r.norm()));

        let cu = (&sg.udot + &th.u / h) * lambda;
        coup_u.add((bs.transpose() * (&duals.p[j + 1].u - &cu)).norm(), cu.norm());
        let ca = (&sg.adot + &th.a / h) * lambda;
        coup_a.add((as_.transpose() * (&duals.p[j + 1].a - &ca)).norm(), ca.norm());

        let tags = tags_or_free(spec, st, &duals.eta[j], &y);
        for i in 0..m {
            tags_acc.add(tags[i].violation(duals.gamma[j][i]), 0.0);
            if st.g[i] > tol_act {
                gamma_inactive.add(duals.gamma[j][i].abs(), 0.0);
            }
            if duals.eta[j][i] > tol_act {
                let gi = st.jac.row(i).transpose();
                implication.add(gi.dot(&y).abs(), gi.norm() * y.norm());
            }
        }
    }

    // terminal
    let st = &stages[k];
    let gte = st.jac.transpose() * &duals.eta[k];
    let dphi = problem.cost.phi_gradient(&traj.x[k]) * lambda;
    let lhs = -&duals.p[k].x;
    let rhs = &dphi - &gte;
    tr_x.add((&lhs - &rhs).norm(), lhs.norm().max(rhs.norm()));
    let xi = duals.xi1[k] + duals.xi2[k];
    let rhs_u = -&gte - &traj.u[k] * (2.0 * xi);
    tr_u.add((bs.transpose() * (&duals.p[k].u - &rhs_u)).norm(), duals.p[k].u.norm().max(rhs_u.norm()));
    tr_a.add((as_.transpose() * &duals.p[k].a).norm(), 0.0);

    let mut report = ConditionReport::new(options.tol_nontriv);
    report.flag_norm_bounds(spec);
    for acc in [
        dynamics,
        adj_x,
        adj_u,
        adj_a,
        coup_u,
        coup_a,
        tr_x,
        tr_u,
        tr_a,
        signs,
        norm_comp,
        eta_comp,
        tags_acc,
        gamma_inactive,
        implication,
    ] {
        acc.push(&mut report, tol);
    }
    // enhanced form under LICQ at the terminal active constraints
    let active: Vec<usize> = (0..m).filter(|&i| st.g[i] <= tol_act).collect();
    let licq = active.is_empty() || {
        let ga = DMatrix::from_fn(active.len(), n, |r, c| st.jac[(active[r], c)]);
        ga.rank(1e-10 * (1.0 + ga.amax())) == active.len()
    };
    let value = if licq {
        lambda + (duals.xi1[k] + duals.xi2[k]).abs() + duals.p[0].u.norm()
    } else {
        nontriviality_discrete(duals)
    };
    Ok(report.finish(value))
}

fn nontriviality_discrete(duals: &DualSystem) -> f64 {
    let k = duals.k();
    duals.lambda
        + duals.p[0].u.norm()
        + duals.p[k].norm()
        + duals.xi1.iter().map(|v| v.abs()).sum::<f64>()
        + duals.xi2.iter().map(|v| v.abs()).sum::<f64>()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NontrivialityMode {
    General,
    EnhancedInitial,
    EnhancedTerminal,
}

/// `lambda + |q^u(0)| + |p(T)| + TV(xi1) + TV(xi2)`, with the `q^u(0)` term
/// dropped in the enhanced-initial form and the `p(T)` term dropped in the
/// enhanced-terminal form. Total variations are sums of atoms.
pub fn nontriviality(duals: &DualSystem, mode: NontrivialityMode) -> f64 {
    let k = duals.k();
    if duals.p.is_empty() {
        return duals.lambda;
    }
    let tv1: f64 = duals.xi1.iter().map(|v| v.abs()).sum();
    let tv2: f64 = duals.xi2.iter().map(|v| v.abs()).sum();
    let qu0 = duals.p[0].u.norm();
    let pt = duals.p[k].norm();
    duals.lambda
        + tv1
        + tv2
        + match mode {
            NontrivialityMode::General => qu0 + pt,
            NontrivialityMode::EnhancedInitial => pt,
            NontrivialityMode::EnhancedTerminal => qu0,
        }
}

/// Grid residuals of the continuous optimality system, reading the duals as
/// node values of `q` and per-node measure atoms.
pub fn check_continuous(
    traj: &DiscreteTrajectory,
    duals: &DualSystem,
    spec: &ProcessSpec,
    cost: &CostSpec,
    options: &CheckOptions,
) -> Result<ConditionReport> {
    traj.validate_shape()?;
    let k = traj.k();
    let h = traj.h();
    let (n, d, m) = (spec.state_dim(), spec.control_dim, spec.set.num_constraints());
    if traj.state_dim() != n || traj.control_dim() != d || traj.num_constraints() != m {
        return Err(invalid("trajectory does not match the process dimensions"));
    }
    duals.check_shape(k, n, d, m)?;
    let (bs, as_) = (&spec.u_structure, &spec.a_structure);
    let lambda = duals.lambda;
    let tol = options.tol_dual;
    let tol_act = options.tol_act;
    let stages: Vec<Stage> = (0..=k).map(|j| stage(spec, traj, j)).collect();
    let p = duals.continuous_p(spec, traj)?;
    let q = duals.q();

    let mut primal = Acc::new("primal-dynamics");
    let mut adj_x = Acc::new("adjoint-x");
    let mut adj_u = Acc::new("adjoint-u");
    let mut adj_a = Acc::new("adjoint-a");
    let mut q_u = Acc::new("q-alignment-u");
    let mut q_a = Acc::new("q-alignment-a");
    let mut implication = Acc::new("implications");
    let mut tr_x = Acc::new("transversality-x");
    let mut tr_u = Acc::new("transversality-u");
    let mut inclusion = Acc::new("terminal-inclusion");
    let mut atoms_gamma = Acc::new("nonatomic-gamma");
    let mut atoms_xi = Acc::new("nonatomic-xi");

    for j in 0..k {
        let st = &stages[j];
        let sg = running_grad(cost, traj, j, traj.t(j));
        let lhs = -&st.xdot;
        let rhs = &st.f - st.jac.transpose() * &duals.eta[j];
        primal.add((&lhs - &rhs).norm(), lhs.norm().max(rhs.norm()));

        let y = &q[j + 1].x - &sg.xdot * lambda;
        let dx = (&p[j + 1].x - &p[j].x) / h;
        let rx = &sg.x * lambda + st.fx.transpose() * &y;
        adj_x.add((&dx - &rx).norm(), dx.norm().max(rx.norm()));
        let du = (&p[j + 1].u - &p[j].u) / h;
        let ru = &sg.u * lambda;
        adj_u.add((bs.transpose() * (&du - &ru)).norm(), du.norm().max(ru.norm()));
        let da = (&p[j + 1].a - &p[j].a) / h;
        let ra = &sg.a * lambda + st.fa.transpose() * &y;
        adj_a.add((as_.transpose() * (&da - &ra)).norm(), da.norm().max(ra.norm()));

        let vu = &sg.udot * lambda;
        q_u.add((bs.transpose() * (&q[j + 1].u - &vu)).norm(), vu.norm());
        let va = &sg.adot * lambda;
        q_a.add((as_.transpose() * (&q[j + 1].a - &va)).norm(), va.norm());

        let all_inactive = st.g.iter().all(|g| *g > tol_act);
        for i in 0..m {
            if duals.eta[j][i] > tol_act {
                let gi = st.jac.row(i).transpose();
                implication.add(gi.dot(&y).abs(), gi.norm() * y.norm());
            }
            if st.g[i] > tol_act {
                implication.add(duals.eta[j][i].abs() + duals.gamma[j][i].abs(), 0.0);
            }
        }
        if all_inactive {
            atoms_gamma.add(duals.gamma[j].amax(), 0.0);
        }
    }
    for j in 0..=k {
        let nu = traj.u[j].norm();
        if nu > spec.r1 + tol_act && nu < spec.r2 - tol_act {
            atoms_xi.add(duals.xi1[j].abs() + duals.xi2[j].abs(), 0.0);
        }
    }
    let st = &stages[k];
    let gte = st.jac.transpose() * &duals.eta[k];
    let rhs = cost.phi_gradient(&traj.x[k]) * lambda - &gte;
    tr_x.add((&p[k].x + &rhs).norm(), p[k].x.norm().max(rhs.norm()));
    let rhs_u = -&gte - &traj.u[k] * (2.0 * (duals.xi1[k] + duals.xi2[k]));
    tr_u.add((bs.transpose() * (&p[k].u - &rhs_u)).norm(), p[k].u.norm().max(rhs_u.norm()));
    for i in 0..m {
        inclusion.add((-duals.eta[k][i]).max(0.0), 0.0);
        if st.g[i] > tol_act {
            inclusion.add(duals.eta[k][i].abs(), 0.0);
        }
    }
    inclusion.add((-duals.xi1[k]).max(0.0) + duals.xi2[k].max(0.0), 0.0);

    let mut report = ConditionReport::new(options.tol_nontriv);
    report.flag_norm_bounds(spec);
    for acc in [primal, adj_x, adj_u, adj_a, q_u, q_a, implication, tr_x, tr_u, inclusion, atoms_gamma, atoms_xi] {
        acc.push(&mut report, tol);
    }
    let mut with_p = duals.clone();
    with_p.p[k] = p[k].clone();
    Ok(report.finish(nontriviality(&with_p, NontrivialityMode::General)))
}
