//! Coderivatives of the orthant normal cone, of `N_C` and of the velocity
//! mapping `F(x, u, a) = f(x, a) + N_C(x - u)`.
//!
//! Set-valued results are a base point plus generators whose coefficients
//! `gamma_i` carry a sign tag.

use nalgebra::{DMatrix, DVector};

use crate::dynamics::{tol_dyn, ProcessSpec};
use crate::error::{check_finite, invalid, precondition, Result, SweepError};
use crate::geometry::{SweepingSet, TOL_ACT};
use crate::linalg::{bounded_lstsq, nnls, Bound};

/// Default zero test for orthant queries.
pub const ZERO_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum GammaTag {
    Zero,
    NonNegative,
    Free,
}

impl GammaTag {
    pub fn bound(self) -> Bound {
        match self {
            GammaTag::Zero => Bound::Zero,
            GammaTag::NonNegative => Bound::NonNegative,
            GammaTag::Free => Bound::Free,
        }
    }

    /// Distance of `g` from the admissible coefficient range.
    pub fn violation(self, g: f64) -> f64 {
        match self {
            GammaTag::Zero => g.abs(),
            GammaTag::NonNegative => (-g).max(0.0),
            GammaTag::Free => 0.0,
        }
    }
}

/// Query `D* N_{R^m_-}(x, v)(y)`.
#[derive(Debug, Clone)]
pub struct OrthantCoderivativeQuery {
    pub x: DVector<f64>,
    pub v: DVector<f64>,
    pub y: DVector<f64>,
    pub tol: f64,
}

impl OrthantCoderivativeQuery {
    pub fn new(x: DVector<f64>, v: DVector<f64>, y: DVector<f64>) -> Result<Self> {
        Self::with_tolerance(x, v, y, ZERO_TOL)
    }

    pub fn with_tolerance(x: DVector<f64>, v: DVector<f64>, y: DVector<f64>, tol: f64) -> Result<Self> {
        if x.len() != v.len() || x.len() != y.len() {
            return Err(invalid("orthant query vectors must have equal length"));
        }
        check_finite(&x, "x")?;
        check_finite(&v, "v")?;
        check_finite(&y, "y")?;
        for i in 0..x.len() {
            let on_graph = x[i] <= tol && v[i] >= -tol && (x[i].abs() <= tol || v[i].abs() <= tol);
            if !on_graph {
                return Err(invalid(format!("({}, {}) is not on the orthant normal-cone graph", x[i], v[i])));
            }
        }
        Ok(OrthantCoderivativeQuery { x, v, y, tol })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexPartition {
    pub i1: Vec<usize>,
    pub i2: Vec<usize>,
    pub free: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CoderivativeValue {
    Empty,
    Tagged(Vec<GammaTag>),
}

impl CoderivativeValue {
    pub fn is_empty(&self) -> bool {
        matches!(self, CoderivativeValue::Empty)
    }
    pub fn tags(&self) -> Option<&[GammaTag]> {
        match self {
            CoderivativeValue::Empty => None,
            CoderivativeValue::Tagged(t) => Some(t),
        }
    }
    pub fn contains(&self, gamma: &DVector<f64>, tol: f64) -> bool {
        match self {
            CoderivativeValue::Empty => false,
            CoderivativeValue::Tagged(t) => {
                t.len() == gamma.len() && t.iter().zip(gamma.iter()).all(|(tag, g)| tag.violation(*g) <= tol)
            }
        }
    }
}

pub fn index_partition(q: &OrthantCoderivativeQuery) -> IndexPartition {
    let zero = |s: f64| s.abs() <= q.tol;
    let mut p = IndexPartition { i1: vec![], i2: vec![], free: vec![] };
    for i in 0..q.x.len() {
        let (x, v, y) = (q.x[i], q.v[i], q.y[i]);
        if (x < 0.0 && !zero(x)) || (zero(v) && y < -q.tol) {
            p.i1.push(i);
        } else if zero(x) && zero(v) && y > q.tol {
            p.i2.push(i);
        } else {
            p.free.push(i);
        }
    }
    p
}

pub fn coderivative_orthant(q: &OrthantCoderivativeQuery) -> CoderivativeValue {
    let nonzero = |s: f64| s.abs() > q.tol;
    if (0..q.x.len()).any(|i| nonzero(q.v[i]) && nonzero(q.y[i])) {
        return CoderivativeValue::Empty;
    }
    let p = index_partition(q);
    let mut tags = vec![GammaTag::Free; q.x.len()];
    for &i in &p.i1 {
        tags[i] = GammaTag::Zero;
    }
    for &i in &p.i2 {
        tags[i] = GammaTag::NonNegative;
    }
    CoderivativeValue::Tagged(tags)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QualificationMode {
    /// Active gradients linearly independent; the value is exact.
    Licq,
    /// Only positive linear independence; the value is an upper estimate.
    MfcqUpperEstimate,
}

/// One multiplier choice: the set `base + sum_i gamma_i generators[:, i]`.
#[derive(Debug, Clone)]
pub struct CoderivativeBranch {
    pub lambda: DVector<f64>,
    pub base: DVector<f64>,
    pub generators: DMatrix<f64>,
    pub tags: Vec<GammaTag>,
}

impl CoderivativeBranch {
    pub fn element(&self, gamma: &DVector<f64>) -> DVector<f64> {
        &self.base + &self.generators * gamma
    }

    pub fn distance(&self, z: &DVector<f64>) -> f64 {
        let bounds: Vec<Bound> = self.tags.iter().map(|t| t.bound()).collect();
        let rhs = z - &self.base;
        let g = bounded_lstsq(&self.generators, &rhs, &bounds);
        (&self.generators * g - rhs).norm()
    }
}

#[derive(Debug, Clone)]
pub struct NormalConeCoderivative {
    pub mode: QualificationMode,
    pub branches: Vec<CoderivativeBranch>,
    pub domain_violation: bool,
}

impl NormalConeCoderivative {
    pub fn is_empty(&self) -> bool {
        self.branches.is_empty()
    }
    pub fn distance(&self, z: &DVector<f64>) -> f64 {
        self.branches.iter().map(|b| b.distance(z)).fold(f64::INFINITY, f64::min)
    }
}

fn active_gradients(jac: &DMatrix<f64>, active: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(active.len(), jac.ncols(), |r, c| jac[(active[r], c)])
}

/// Positive linear independence of the rows of `ga`.
pub fn positively_independent(ga: &DMatrix<f64>) -> bool {
    let k = ga.nrows();
    if k == 0 {
        return true;
    }
    let n = ga.ncols();
    let weight = 1e3 * (1.0 + ga.amax());
    let mut a = DMatrix::zeros(n + 1, k);
    a.view_mut((0, 0), (n, k)).copy_from(&ga.transpose());
    a.row_mut(n).fill(weight);
    let mut b = DVector::zeros(n + 1);
    b[n] = weight;
    let lam = nnls(&a, &b);
    (ga.transpose() * lam).norm() > 1e-9 * (1.0 + ga.amax())
}

fn combinations(items: &[usize], size: usize) -> Vec<Vec<usize>> {
    if size == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for (pos, &first) in items.iter().enumerate() {
        for mut rest in combinations(&items[pos + 1..], size - 1) {
            rest.insert(0, first);
            out.push(rest);
        }
    }
    out
}

/// `D* N_C(x, v)(u)` for `C = {g >= 0}`.
pub fn coderivative_normal_cone(
    set: &SweepingSet,
    x: &DVector<f64>,
    v: &DVector<f64>,
    u_dir: &DVector<f64>,
) -> Result<NormalConeCoderivative> {
    let n = set.dim();
    if v.len() != n || u_dir.len() != n {
        return Err(invalid("normal and direction must live in the state space"));
    }
    check_finite(v, "normal")?;
    check_finite(u_dir, "direction")?;
    let active = set.active_set(x, 0.0)?;
    let m = set.num_constraints();
    let gx = set.g(x);
    let jac = set.grad_g(x);
    let ga = active_gradients(&jac, &active.indices);
    let licq = ga.nrows() == 0 || ga.rank(1e-10 * (1.0 + ga.amax())) == ga.nrows();
    let mode = if licq {
        QualificationMode::Licq
    } else if positively_independent(&ga) {
        QualificationMode::MfcqUpperEstimate
    } else {
        return Err(precondition("active gradients are positively dependent"));
    };

    let tol = 1e-9 * (1.0 + v.norm());
    let lambdas: Vec<DVector<f64>> = match mode {
        QualificationMode::Licq => {
            let sol = nnls(&(-ga.transpose()), v);
            let res = (-ga.transpose() * &sol - v).norm();
            if res > tol {
                return Err(SweepError::NotInCone { residual: res, tolerance: tol });
            }
            let mut lam = DVector::zeros(m);
            for (c, &i) in active.indices.iter().enumerate() {
                lam[i] = sol[c];
            }
            vec![lam]
        }
        QualificationMode::MfcqUpperEstimate => {
            let mut out: Vec<DVector<f64>> = Vec::new();
            for size in 1..=active.indices.len().min(n) {
                for subset in combinations(&active.indices, size) {
                    let cols = DMatrix::from_fn(n, size, |r, c| -jac[(subset[c], r)]);
                    if cols.rank(1e-10 * (1.0 + cols.amax())) < size {
                        continue;
                    }
                    let sol = crate::linalg::lstsq_min_norm(&cols, v);
                    if sol.iter().any(|s| *s < -tol) || (&cols * &sol - v).norm() > tol {
                        continue;
                    }
                    let mut lam = DVector::zeros(m);
                    for (c, &i) in subset.iter().enumerate() {
                        lam[i] = sol[c].max(0.0);
                    }
                    if !out.iter().any(|o| (o - &lam).amax() <= tol) {
                        out.push(lam);
                    }
                }
            }
            if v.norm() <= tol {
                out.push(DVector::zeros(m));
            }
            if out.is_empty() {
                return Err(SweepError::NotInCone { residual: v.norm(), tolerance: tol });
            }
            out
        }
    };

    let hess = set.hess_g(x);
    let y_orth = -(&jac * u_dir);
    let x_orth = DVector::from_fn(m, |i, _| if active.contains(i) { 0.0 } else { -gx[i] });
    let dom_tol = 1e-9 * (1.0 + u_dir.norm() * set.constants().m2);
    let mut branches = Vec::new();
    for lam in lambdas {
        let q = OrthantCoderivativeQuery::with_tolerance(x_orth.clone(), lam.clone(), y_orth.clone(), dom_tol)?;
        let CoderivativeValue::Tagged(tags) = coderivative_orthant(&q) else {
            continue;
        };
        let mut hsum = DMatrix::zeros(n, n);
        for i in 0..m {
            if lam[i] != 0.0 {
                hsum += &hess[i] * lam[i];
            }
        }
        branches.push(CoderivativeBranch { base: -(hsum * u_dir), generators: -jac.transpose(), lambda: lam, tags });
    }
    let domain_violation = branches.is_empty();
    Ok(NormalConeCoderivative { mode, branches, domain_violation })
}

/// Value of `D* F(x, u, a, w)(y)`.
///
/// Elements are `(x_base - G^T gamma, u_base + G^T gamma, a_value)` where `G`
/// stacks `grad g_i(x - u)` and `gamma` obeys `tags`.
#[derive(Debug, Clone)]
pub struct FCoderivative {
    pub lambda: DVector<f64>,
    pub x_base: DVector<f64>,
    pub u_base: DVector<f64>,
    pub a_value: DVector<f64>,
    pub gradients: DMatrix<f64>,
    pub tags: Vec<GammaTag>,
    /// `grad_x f(x, a)^T y`, the value of the x- and u-components' sum.
    pub row_sum: DVector<f64>,
}

impl FCoderivative {
    pub fn element(&self, gamma: &DVector<f64>) -> Result<(DVector<f64>, DVector<f64>, DVector<f64>)> {
        if gamma.len() != self.tags.len() {
            return Err(invalid("gamma length must equal the constraint count"));
        }
        if self.tags.iter().zip(gamma.iter()).any(|(t, g)| t.violation(*g) > 0.0) {
            return Err(invalid("gamma violates its sign tags"));
        }
        let gg = self.gradients.transpose() * gamma;
        Ok((&self.x_base - &gg, &self.u_base + &gg, self.a_value.clone()))
    }
}

/// Multipliers `lambda >= 0` on `I(x - u)` with `w - f(x, a) = -sum lambda_i grad g_i`.
pub fn velocity_multipliers(
    spec: &ProcessSpec,
    x: &DVector<f64>,
    u: &DVector<f64>,
    a: &DVector<f64>,
    w: &DVector<f64>,
) -> Result<DVector<f64>> {
    let y = x - u;
    let active = spec.set.active_set(&y, 0.0)?;
    let f = spec.f(x, a);
    let rhs = w - &f;
    let m = spec.set.num_constraints();
    let mut lam = DVector::zeros(m);
    let residual = if active.is_empty() {
        rhs.norm()
    } else {
        let jac = spec.set.grad_g(&y);
        let cols = DMatrix::from_fn(x.len(), active.indices.len(), |r, c| -jac[(active.indices[c], r)]);
        let sol = nnls(&cols, &rhs);
        for (c, &i) in active.indices.iter().enumerate() {
            lam[i] = sol[c];
        }
        (cols * sol - &rhs).norm()
    };
    let tol = tol_dyn(f.norm());
    if residual > tol {
        return Err(SweepError::NotInCone { residual, tolerance: tol });
    }
    Ok(lam)
}

/// Tags of `gamma` for the pair `(x - u, lambda)` and direction `y`.
pub fn gamma_tags(
    set: &SweepingSet,
    xu: &DVector<f64>,
    lambda: &DVector<f64>,
    y: &DVector<f64>,
    tol: f64,
) -> Result<CoderivativeValue> {
    let m = set.num_constraints();
    let gx = set.g(xu);
    let jac = set.grad_g(xu);
    let x_orth = DVector::from_fn(m, |i, _| if gx[i].abs() <= TOL_ACT { 0.0 } else { -gx[i].max(0.0) });
    let lam = DVector::from_fn(m, |i, _| if x_orth[i] < 0.0 { 0.0 } else { lambda[i] });
    let q = OrthantCoderivativeQuery::with_tolerance(x_orth, lam, -(&jac * y), tol)?;
    Ok(coderivative_orthant(&q))
}

pub fn coderivative_f(
    spec: &ProcessSpec,
    x: &DVector<f64>,
    u: &DVector<f64>,
    a: &DVector<f64>,
    w: &DVector<f64>,
    y: &DVector<f64>,
) -> Result<FCoderivative> {
    let n = spec.state_dim();
    if x.len() != n || u.len() != n || w.len() != n || y.len() != n || a.len() != spec.control_dim {
        return Err(invalid("coderivative query dimension mismatch"));
    }
    for (v, name) in [(x, "x"), (u, "u"), (a, "a"), (w, "w"), (y, "y")] {
        check_finite(v, name)?;
    }
    let lambda = velocity_multipliers(spec, x, u, a, w)?;
    let xu = x - u;
    let jac = spec.set.grad_g(&xu);
    let gy = &jac * y;
    let tol = 1e-9 * (1.0 + y.norm() * spec.set.constants().m2);
    let scale = 1.0 + lambda.amax();
    if let Some(i) = (0..lambda.len()).find(|&i| (lambda[i] * gy[i]).abs() > tol * scale) {
        return Err(SweepError::DomainViolation(format!("lambda_{i} <grad g_{i}, y> = {:.3e}", lambda[i] * gy[i])));
    }
    let tags = match gamma_tags(&spec.set, &xu, &lambda, y, tol)? {
        CoderivativeValue::Tagged(t) => t,
        CoderivativeValue::Empty => return Err(SweepError::DomainViolation("empty orthant coderivative".into())),
    };
    let mut hy = DVector::zeros(n);
    if lambda.iter().any(|l| *l != 0.0) {
        let hess = spec.set.hess_g(&xu);
        for (i, h) in hess.iter().enumerate() {
            if lambda[i] != 0.0 {
                hy += h * y * lambda[i];
            }
        }
    }
    let row_sum = spec.grad_f_x(x, a).transpose() * y;
    Ok(FCoderivative {
        x_base: &row_sum - &hy,
        u_base: hy,
        a_value: spec.grad_f_a(x, a).transpose() * y,
        gradients: jac,
        tags,
        lambda,
        row_sum,
    })
}
