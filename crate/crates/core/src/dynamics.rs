//! Controlled sweeping process `-x' in N_C(x - u) + f(x, a)` on a uniform grid.

use std::io::{Read, Write};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{check_finite, invalid, precondition, Result, SweepError};
use crate::geometry::{SweepingSet, TOL_ACT};
use crate::linalg::nnls;

pub type FieldFn = Arc<dyn Fn(&DVector<f64>, &DVector<f64>) -> DVector<f64> + Send + Sync>;
pub type JacFn = Arc<dyn Fn(&DVector<f64>, &DVector<f64>) -> DMatrix<f64> + Send + Sync>;
pub type PathFn = Arc<dyn Fn(f64) -> DVector<f64> + Send + Sync>;

/// Inclusion tolerance `1e-6 (1 + |f|)`.
pub fn tol_dyn(f_norm: f64) -> f64 {
    1e-6 * (1.0 + f_norm)
}

/// Data of a controlled sweeping process.
///
/// `u_structure` (`n x p`) and `a_structure` (`d x q`) restrict the controls to
/// `u = B v` and `a = A b`; both default to the identity.
#[derive(Clone)]
pub struct ProcessSpec {
    pub set: SweepingSet,
    pub f: FieldFn,
    pub grad_f_x: JacFn,
    pub grad_f_a: JacFn,
    pub control_dim: usize,
    pub horizon: f64,
    pub x0: DVector<f64>,
    pub r1: f64,
    pub r2: f64,
    pub lipschitz_k: f64,
    pub growth_m: f64,
    pub u_structure: DMatrix<f64>,
    pub a_structure: DMatrix<f64>,
}

impl std::fmt::Debug for ProcessSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ProcessSpec")
            .field("set", &self.set)
            .field("control_dim", &self.control_dim)
            .field("horizon", &self.horizon)
            .field("x0", &self.x0.as_slice())
            .field("r1", &self.r1)
            .field("r2", &self.r2)
            .finish_non_exhaustive()
    }
}

impl ProcessSpec {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        set: SweepingSet,
        f: FieldFn,
        grad_f_x: JacFn,
        grad_f_a: JacFn,
        control_dim: usize,
        horizon: f64,
        x0: DVector<f64>,
        r1: f64,
        r2: f64,
        lipschitz_k: f64,
        growth_m: f64,
    ) -> Result<Self> {
        let n = set.dim();
        let spec = ProcessSpec {
            set,
            f,
            grad_f_x,
            grad_f_a,
            control_dim,
            horizon,
            x0,
            r1,
            r2,
            lipschitz_k,
            growth_m,
            u_structure: DMatrix::identity(n, n),
            a_structure: DMatrix::identity(control_dim, control_dim),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_u_structure(mut self, b: DMatrix<f64>) -> Result<Self> {
        self.u_structure = b;
        self.validate()?;
        Ok(self)
    }

    pub fn with_a_structure(mut self, a: DMatrix<f64>) -> Result<Self> {
        self.a_structure = a;
        self.validate()?;
        Ok(self)
    }

    pub fn state_dim(&self) -> usize {
        self.set.dim()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.set.dim();
        if self.x0.len() != n {
            return Err(invalid("x0 dimension differs from the set dimension"));
        }
        check_finite(&self.x0, "x0")?;
        if !(self.horizon > 0.0) || !self.horizon.is_finite() {
            return Err(invalid("horizon must be positive"));
        }
        if !(self.r1 > 0.0) {
            return Err(invalid("r1 must be positive"));
        }
        if !(self.r2 >= self.r1) || !self.r2.is_finite() {
            return Err(invalid("r2 must be finite and at least r1"));
        }
        if !(self.lipschitz_k > 0.0) || !(self.growth_m > 0.0) {
            return Err(invalid("lipschitz_k and growth_m must be positive"));
        }
        if self.control_dim == 0 {
            return Err(invalid("control dimension must be positive"));
        }
        let b = &self.u_structure;
        if b.nrows() != n || b.ncols() == 0 || b.rank(1e-12) != b.ncols() {
            return Err(invalid("u_structure must be n x p with full column rank"));
        }
        let a = &self.a_structure;
        if a.nrows() != self.control_dim || a.ncols() == 0 || a.rank(1e-12) != a.ncols() {
            return Err(invalid("a_structure must be d x q with full column rank"));
        }
        Ok(())
    }

    pub fn f(&self, x: &DVector<f64>, a: &DVector<f64>) -> DVector<f64> {
        (self.f)(x, a)
    }
    pub fn grad_f_x(&self, x: &DVector<f64>, a: &DVector<f64>) -> DMatrix<f64> {
        (self.grad_f_x)(x, a)
    }
    pub fn grad_f_a(&self, x: &DVector<f64>, a: &DVector<f64>) -> DMatrix<f64> {
        (self.grad_f_a)(x, a)
    }
}

/// Closed-form time functions of a reference triple and its derivatives.
#[derive(Clone)]
pub struct ReferencePath {
    pub horizon: f64,
    pub x: PathFn,
    pub xdot: PathFn,
    pub u: PathFn,
    pub udot: PathFn,
    pub a: PathFn,
    pub adot: PathFn,
}

/// States, controls and per-step multipliers on the grid `t_j = j T / k`.
///
/// `eta[j]` (for `j < k`) is the multiplier of the step `j -> j+1`, paired with
/// the gradients at `x[j+1] - u[j+1]`; `eta[k]` is recovered from the last
/// backward difference.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteTrajectory {
    pub horizon: f64,
    pub x: Vec<DVector<f64>>,
    pub u: Vec<DVector<f64>>,
    pub a: Vec<DVector<f64>>,
    pub eta: Vec<DVector<f64>>,
}

impl DiscreteTrajectory {
    pub fn k(&self) -> usize {
        self.x.len().saturating_sub(1)
    }
    pub fn h(&self) -> f64 {
        self.horizon / self.k() as f64
    }
    pub fn t(&self, j: usize) -> f64 {
        if j == self.k() {
            self.horizon
        } else {
            j as f64 * self.h()
        }
    }
    pub fn state_dim(&self) -> usize {
        self.x.first().map_or(0, |v| v.len())
    }
    pub fn control_dim(&self) -> usize {
        self.a.first().map_or(0, |v| v.len())
    }
    pub fn num_constraints(&self) -> usize {
        self.eta.first().map_or(0, |v| v.len())
    }

    pub fn validate_shape(&self) -> Result<()> {
        let k = self.k();
        if k < 1 {
            return Err(invalid("trajectory needs at least two nodes"));
        }
        if !(self.horizon > 0.0) || !self.horizon.is_finite() {
            return Err(invalid("trajectory horizon must be positive"));
        }
        let (n, d, m) = (self.state_dim(), self.control_dim(), self.num_constraints());
        let ok = self.u.len() == k + 1
            && self.a.len() == k + 1
            && self.eta.len() == k + 1
            && self.x.iter().all(|v| v.len() == n)
            && self.u.iter().all(|v| v.len() == n)
            && self.a.iter().all(|v| v.len() == d)
            && self.eta.iter().all(|v| v.len() == m);
        if !ok {
            return Err(invalid("trajectory sequences have inconsistent lengths"));
        }
        Ok(())
    }

    /// Largest violation of the step inclusion, scaled by `tol_dyn`.
    pub fn inclusion_residual(&self, spec: &ProcessSpec) -> f64 {
        let h = self.h();
        let mut worst: f64 = 0.0;
        for j in 0..self.k() {
            let f = spec.f(&self.x[j], &self.a[j]);
            let y = &self.x[j + 1] - &self.u[j + 1];
            let jac = spec.set.grad_g(&y);
            let r = (&self.x[j + 1] - &self.x[j]) / h + &f - jac.transpose() * &self.eta[j];
            worst = worst.max(r.amax() / tol_dyn(f.norm()));
        }
        worst
    }

    /// CSV with header `t,x0..,u0..,a0..,eta0..` and 12 significant digits.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let (n, d, m) = (self.state_dim(), self.control_dim(), self.num_constraints());
        let mut header = vec!["t".to_string()];
        header.extend((0..n).map(|i| format!("x{i}")));
        header.extend((0..n).map(|i| format!("u{i}")));
        header.extend((0..d).map(|i| format!("a{i}")));
        header.extend((0..m).map(|i| format!("eta{i}")));
        wr.write_record(&header).map_err(csv_err)?;
        for j in 0..=self.k() {
            let mut row = vec![fmt_sig(self.t(j))];
            for v in [&self.x[j], &self.u[j], &self.a[j], &self.eta[j]] {
                row.extend(v.iter().map(|x| fmt_sig(*x)));
            }
            wr.write_record(&row).map_err(csv_err)?;
        }
        wr.flush().map_err(|e| SweepError::Csv(e.to_string()))?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        String::from_utf8(buf).map_err(|e| SweepError::Csv(e.to_string()))
    }

    /// Reads the format produced by [`DiscreteTrajectory::write_csv`].
    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rd = csv::ReaderBuilder::new().has_headers(true).from_reader(r);
        let header = rd.headers().map_err(csv_err)?.clone();
        let cols: Vec<&str> = header.iter().collect();
        if cols.first() != Some(&"t") {
            return Err(SweepError::Csv("first column must be `t`".into()));
        }
        let count = |p: &str| -> Result<usize> {
            let idx: Vec<usize> = cols
                .iter()
                .enumerate()
                .filter(|(_, c)| {
                    c.strip_prefix(p).is_some_and(|rest| !rest.is_empty() && rest.bytes().all(|b| b.is_ascii_digit()))
                })
                .map(|(i, _)| i)
                .collect();
            for (k, &i) in idx.iter().enumerate() {
                if cols[i] != format!("{p}{k}") {
                    return Err(SweepError::Csv(format!("column `{}` out of order", cols[i])));
                }
            }
            Ok(idx.len())
        };
        let (n, nu, d, m) = (count("x")?, count("u")?, count("a")?, count("eta")?);
        if n == 0 || nu != n || 1 + 2 * n + d + m != cols.len() {
            return Err(SweepError::Csv("header does not describe a trajectory".into()));
        }
        let mut t = Vec::new();
        let (mut x, mut u, mut a, mut eta) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for (line, rec) in rd.records().enumerate() {
            let rec = rec.map_err(csv_err)?;
            if rec.len() != cols.len() {
                return Err(SweepError::Csv(format!("row {} has {} fields", line + 2, rec.len())));
            }
            let vals: Vec<f64> = rec
                .iter()
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| SweepError::Csv(format!("row {}: {e}", line + 2)))?;
            if vals.iter().any(|v| !v.is_finite()) {
                return Err(SweepError::Csv(format!("row {}: non-finite value", line + 2)));
            }
            t.push(vals[0]);
            let mut off = 1;
            for (dst, len) in [(&mut x, n), (&mut u, n), (&mut a, d), (&mut eta, m)] {
                dst.push(DVector::from_column_slice(&vals[off..off + len]));
                off += len;
            }
        }
        if t.len() < 2 {
            return Err(SweepError::Csv("need at least two rows".into()));
        }
        let k = t.len() - 1;
        let horizon = t[k];
        if !(horizon > 0.0) || t[0].abs() > 1e-9 * horizon {
            return Err(SweepError::Csv("grid must start at 0 and have positive horizon".into()));
        }
        let h = horizon / k as f64;
        if t.iter().enumerate().any(|(j, tj)| (tj - j as f64 * h).abs() > 1e-9 * horizon.max(1.0)) {
            return Err(SweepError::Csv("grid is not uniform".into()));
        }
        if d == 0 || m == 0 {
            return Err(SweepError::Csv("missing control or multiplier columns".into()));
        }
        Ok(DiscreteTrajectory { horizon, x, u, a, eta })
    }
}

fn csv_err(e: csv::Error) -> SweepError {
    SweepError::Csv(e.to_string())
}

/// Formats with 12 significant digits.
pub fn fmt_sig(v: f64) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    format!("{v:.11e}")
}

fn lengths_ok(spec: &ProcessSpec, x: &DVector<f64>, u: &DVector<f64>, a: &DVector<f64>) -> Result<()> {
    let n = spec.state_dim();
    if x.len() != n || u.len() != n || a.len() != spec.control_dim {
        return Err(invalid("state or control dimension mismatch"));
    }
    Ok(())
}

/// One catching-up step: `x_next = u_next + proj(x_j - h f(x_j, a_j) - u_next)`.
///
/// Returns the new state and the step multiplier `lambda / h`, attached to the
/// gradients at `x_next - u_next`.
pub fn step_catching_up(
    spec: &ProcessSpec,
    x_j: &DVector<f64>,
    u_next: &DVector<f64>,
    a_j: &DVector<f64>,
    h: f64,
) -> Result<(DVector<f64>, DVector<f64>)> {
    lengths_ok(spec, x_j, u_next, a_j)?;
    if !(h > 0.0) {
        return Err(invalid("step size must be positive"));
    }
    let f = spec.f(x_j, a_j);
    let z = x_j - &f * h - u_next;
    let p = spec.set.project(&z)?;
    Ok((u_next + p.point, p.multipliers / h))
}

/// One explicit step `x_next = x_j - h (f(x_j, a_j) - sum eta_i grad g_i(x_j - u_j))`.
pub fn step_explicit(
    spec: &ProcessSpec,
    x_j: &DVector<f64>,
    u_j: &DVector<f64>,
    a_j: &DVector<f64>,
    eta_j: &DVector<f64>,
    h: f64,
) -> Result<DVector<f64>> {
    lengths_ok(spec, x_j, u_j, a_j)?;
    let y = x_j - u_j;
    // normal_cone_element enforces sign and support of eta
    let normal = spec.set.normal_cone_element(&y, eta_j)?;
    let f = spec.f(x_j, a_j);
    Ok(x_j - (f + normal.vector_value) * h)
}

/// `|x0| + exp(2MT) (2MT (1 + |x0|) + sum |u_{j+1} - u_j|)`.
pub fn state_bound(spec: &ProcessSpec, u_path: &[DVector<f64>]) -> f64 {
    let mt = spec.growth_m * spec.horizon;
    let x0n = spec.x0.norm();
    let var: f64 = u_path.windows(2).map(|w| (&w[1] - &w[0]).norm()).sum();
    x0n + (2.0 * mt).exp() * (2.0 * mt * (1.0 + x0n) + var)
}

#[derive(Debug, Clone)]
pub struct Integration {
    pub trajectory: DiscreteTrajectory,
    /// Bound on `|x_j|` from the growth constant.
    pub state_bound: f64,
}

/// Integrates with the catching-up scheme from `spec.x0`.
pub fn integrate(
    spec: &ProcessSpec,
    u_path: &[DVector<f64>],
    a_path: &[DVector<f64>],
    k: usize,
) -> Result<Integration> {
    spec.validate()?;
    if k < 1 || u_path.len() != k + 1 || a_path.len() != k + 1 {
        return Err(invalid("control paths must have k + 1 entries"));
    }
    let tol_norm = 1e-12 * (1.0 + spec.r2);
    for (j, u) in u_path.iter().enumerate() {
        let nu = u.norm();
        if nu < spec.r1 - tol_norm || nu > spec.r2 + tol_norm {
            return Err(precondition(format!("|u_{j}| = {nu} outside [r1, r2]")));
        }
    }
    if !spec.set.membership(&(&spec.x0 - &u_path[0]), TOL_ACT)? {
        return Err(precondition("x0 - u(0) is not in the set"));
    }
    let trajectory = simulate(spec, u_path, a_path)?;
    let bound = state_bound(spec, u_path);
    let slack = 1e-9 * (1.0 + bound);
    if let Some(j) = trajectory.x.iter().position(|x| x.norm() > bound + slack) {
        return Err(SweepError::NumericalFailure {
            message: format!("state bound violated at node {j}"),
            best: Some(trajectory.x[j].clone()),
        });
    }
    Ok(Integration { trajectory, state_bound: bound })
}

/// Catching-up integration without the admissibility checks of [`integrate`].
pub fn simulate(spec: &ProcessSpec, u_path: &[DVector<f64>], a_path: &[DVector<f64>]) -> Result<DiscreteTrajectory> {
    let k = u_path.len() - 1;
    let h = spec.horizon / k as f64;
    let mut x = Vec::with_capacity(k + 1);
    let mut eta = Vec::with_capacity(k + 1);
    x.push(spec.x0.clone());
    propagate(spec, u_path, a_path, h, 0, &mut x, &mut eta)?;
    Ok(DiscreteTrajectory { horizon: spec.horizon, x, u: u_path.to_vec(), a: a_path.to_vec(), eta })
}

/// Continues the catching-up recursion from node `from`, given `x[..=from]`
/// and `eta[..from]`; truncates anything beyond.
pub(crate) fn propagate(
    spec: &ProcessSpec,
    u_path: &[DVector<f64>],
    a_path: &[DVector<f64>],
    h: f64,
    from: usize,
    x: &mut Vec<DVector<f64>>,
    eta: &mut Vec<DVector<f64>>,
) -> Result<()> {
    let k = u_path.len() - 1;
    x.truncate(from + 1);
    eta.truncate(from);
    for j in from..k {
        let (xn, e) = step_catching_up(spec, &x[j], &u_path[j + 1], &a_path[j], h)?;
        x.push(xn);
        eta.push(e);
    }
    let xdot = (&x[k] - &x[k - 1]) / h;
    let last = recover_eta(spec, &x[k], &u_path[k], &xdot, &a_path[k])
        .unwrap_or_else(|_| DVector::zeros(spec.set.num_constraints()));
    eta.push(last);
    Ok(())
}

/// Nonnegative least-squares fit of `x' + f(x, a) = sum eta_i grad g_i(x - u)`
/// over `I_rho(x - u)`.
pub fn recover_eta(
    spec: &ProcessSpec,
    x: &DVector<f64>,
    u: &DVector<f64>,
    xdot: &DVector<f64>,
    a: &DVector<f64>,
) -> Result<DVector<f64>> {
    lengths_ok(spec, x, u, a)?;
    if xdot.len() != x.len() {
        return Err(invalid("velocity dimension mismatch"));
    }
    let y = x - u;
    let near = spec.set.active_set(&y, spec.set.constants().rho)?;
    let f = spec.f(x, a);
    let rhs = xdot + &f;
    let m = spec.set.num_constraints();
    let mut eta = DVector::zeros(m);
    let residual = if near.is_empty() {
        rhs.norm()
    } else {
        let jac = spec.set.grad_g(&y);
        let cols = DMatrix::from_fn(x.len(), near.indices.len(), |r, c| jac[(near.indices[c], r)]);
        let sol = nnls(&cols, &rhs);
        for (c, &i) in near.indices.iter().enumerate() {
            eta[i] = sol[c];
        }
        (&rhs - cols * sol).norm()
    };
    let tol = tol_dyn(f.norm());
    if residual > tol {
        return Err(SweepError::NotInCone { residual, tolerance: tol });
    }
    Ok(eta)
}

/// Sup-norm of the state difference plus the L2 norm of the velocity
/// difference, both trajectories read as piecewise-linear interpolants.
pub fn w12_distance(a: &DiscreteTrajectory, b: &DiscreteTrajectory) -> Result<f64> {
    a.validate_shape()?;
    b.validate_shape()?;
    if (a.horizon - b.horizon).abs() > 1e-12 * a.horizon.max(1.0) {
        return Err(invalid("trajectories have different horizons"));
    }
    if a.state_dim() != b.state_dim() {
        return Err(invalid("trajectories have different state dimensions"));
    }
    let (ka, kb) = (a.k(), b.k());
    // breakpoints of both grids, as exact fractions j/ka and i/kb
    let mut pts: Vec<(usize, usize)> = Vec::new();
    let (mut i, mut j) = (0usize, 0usize);
    while i <= ka || j <= kb {
        let ta = if i <= ka { i * kb } else { usize::MAX };
        let tb = if j <= kb { j * ka } else { usize::MAX };
        let num = ta.min(tb);
        pts.push((num, ka * kb));
        if ta == num {
            i += 1;
        }
        if tb == num {
            j += 1;
        }
    }
    let eval = |tr: &DiscreteTrajectory, num: usize, den: usize| -> DVector<f64> {
        let k = tr.k();
        let s = num as f64 * k as f64 / den as f64;
        let idx = ((num * k) / den).min(k - 1);
        let w = s - idx as f64;
        &tr.x[idx] * (1.0 - w) + &tr.x[idx + 1] * w
    };
    let mut sup: f64 = 0.0;
    let mut l2 = 0.0;
    let tt = a.horizon;
    for w in pts.windows(2) {
        let (n0, d) = w[0];
        let (n1, _) = w[1];
        let (a0, a1) = (eval(a, n0, d), eval(a, n1, d));
        let (b0, b1) = (eval(b, n0, d), eval(b, n1, d));
        sup = sup.max((&a0 - &b0).norm()).max((&a1 - &b1).norm());
        let dt = (n1 - n0) as f64 / d as f64 * tt;
        let dv = ((&a1 - &a0) - (&b1 - &b0)) / dt;
        l2 += dv.norm_squared() * dt;
    }
    Ok(sup + l2.sqrt())
}

/// Distance of a trajectory to a smooth path given by `x(t)` and `x'(t)`.
pub fn w12_distance_to_path(
    a: &DiscreteTrajectory,
    x: &dyn Fn(f64) -> DVector<f64>,
    xdot: &dyn Fn(f64) -> DVector<f64>,
) -> Result<f64> {
    a.validate_shape()?;
    let h = a.h();
    // 5-point Gauss-Legendre nodes and weights on [-1, 1]
    const GN: [f64; 5] =
        [0.0, -0.538_469_310_105_683, 0.538_469_310_105_683, -0.906_179_845_938_664, 0.906_179_845_938_664];
    const GW: [f64; 5] = [
        0.568_888_888_888_889,
        0.478_628_670_499_366,
        0.478_628_670_499_366,
        0.236_926_885_056_189,
        0.236_926_885_056_189,
    ];
    let mut sup: f64 = 0.0;
    let mut l2 = 0.0;
    for j in 0..a.k() {
        let (t0, t1) = (a.t(j), a.t(j + 1));
        let slope = (&a.x[j + 1] - &a.x[j]) / h;
        for (s, wt) in GN.iter().zip(GW.iter()) {
            let t = 0.5 * (t0 + t1) + 0.5 * h * s;
            let interp = &a.x[j] + &slope * (t - t0);
            let xt = x(t);
            if xt.len() != interp.len() {
                return Err(invalid("path dimension mismatch"));
            }
            sup = sup.max((interp - xt).norm());
            l2 += 0.5 * h * wt * (&slope - xdot(t)).norm_squared();
        }
        sup = sup.max((&a.x[j] - x(t0)).norm());
    }
    sup = sup.max((&a.x[a.k()] - x(a.horizon)).norm());
    Ok(sup + l2.sqrt())
}
