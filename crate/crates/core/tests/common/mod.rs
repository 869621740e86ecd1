//! Independent oracles shared by the integration tests, plus drivers that
//! compare library results against them.
//!
//! The oracles themselves never call the projection, coderivative or solver
//! code of the library; they are brute-force or closed-form.

#![allow(dead_code)]

use std::f64::consts::SQRT_2;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sweep_core::dynamics::ProcessSpec;
use sweep_core::geometry::SweepingSet;
use sweep_core::nalgebra::{DMatrix, DVector};
use sweep_core::second_order::{
    coderivative_f, coderivative_normal_cone, coderivative_orthant, CoderivativeValue, GammaTag,
    OrthantCoderivativeQuery,
};

/// Golden-section minimization of a unimodal function on `[lo, hi]`.
pub fn golden_min(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = hi - r * (hi - lo);
    let mut d = lo + r * (hi - lo);
    let (mut fc, mut fd) = (f(c), f(d));
    while hi - lo > 1e-12 * (1.0 + lo.abs() + hi.abs()) {
        if fc < fd {
            hi = d;
            d = c;
            fd = fc;
            c = hi - r * (hi - lo);
            fc = f(c);
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + r * (hi - lo);
            fd = f(d);
        }
    }
    0.5 * (lo + hi)
}

/// Car cost for a constant control: the car moves at speed `-9 a` until the
/// end, `J = x(20)^2 / 2 + 10 weight a^2`.
pub fn car_cost(a: f64, weight: f64) -> f64 {
    let xt = -250.0 - 180.0 * a;
    0.5 * xt * xt + 10.0 * weight * a * a
}

pub fn car_oracle(weight: f64) -> (f64, f64) {
    let a = golden_min(|a| car_cost(a, weight), -5.0, 5.0);
    (a, -250.0 - 180.0 * a)
}

/// Two-disk crowd under constant controls, integrated with a fine explicit
/// step followed by a pairwise push-apart that keeps the midpoint.
/// Returns the terminal state.
pub fn crowd_terminal(a1: f64, a2: f64, steps: usize) -> [f64; 4] {
    let s = 6.0 / SQRT_2;
    let mut p = [-48.0 - s, 48.0 + s, -48.0, 48.0];
    let e = (-SQRT_2 / 2.0, SQRT_2 / 2.0);
    let h = 6.0 / steps as f64;
    for _ in 0..steps {
        p[0] -= h * 6.0 * a1 * e.0;
        p[1] -= h * 6.0 * a1 * e.1;
        p[2] -= h * 3.0 * a2 * e.0;
        p[3] -= h * 3.0 * a2 * e.1;
        let (rx, ry) = (p[0] - p[2], p[1] - p[3]);
        let r = (rx * rx + ry * ry).sqrt();
        if r < 6.0 {
            let push = 0.5 * (6.0 - r) / r;
            p[0] += push * rx;
            p[1] += push * ry;
            p[2] -= push * rx;
            p[3] -= push * ry;
        }
    }
    p
}

pub fn crowd_cost(a1: f64, a2: f64, steps: usize) -> f64 {
    let p = crowd_terminal(a1, a2, steps);
    0.5 * p.iter().map(|v| v * v).sum::<f64>() + 3.0 * (a1 * a1 + a2 * a2)
}

/// Best `b` for controls `(2b, b)` (contact family) or `(b, 2b)` (free
/// family), with its cost.
pub fn crowd_oracle(contact: bool, steps: usize) -> (f64, f64) {
    let ctrl = |b: f64| if contact { (2.0 * b, b) } else { (b, 2.0 * b) };
    let b = golden_min(
        |b| {
            let (a1, a2) = ctrl(b);
            crowd_cost(a1, a2, steps)
        },
        0.0,
        5.0,
    );
    let (a1, a2) = ctrl(b);
    (b, crowd_cost(a1, a2, steps))
}

/// Unrestricted minimizer over constant `(a1, a2)` by nested golden sections.
pub fn crowd_oracle_2d(steps: usize) -> (f64, f64, f64) {
    let inner = |a2: f64| golden_min(|a1| crowd_cost(a1, a2, steps), 0.0, 5.0);
    let a2 = golden_min(|a2| crowd_cost(inner(a2), a2, steps), 0.0, 5.0);
    let a1 = inner(a2);
    (a1, a2, crowd_cost(a1, a2, steps))
}

/// Position of a coordinate pair on the graph of `N_{R_-}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GraphPiece {
    /// `x < 0, v = 0`
    Interior,
    /// `x = 0, v > 0`
    Normal,
    /// `x = v = 0`
    Corner,
}

pub const PIECES: [GraphPiece; 3] = [GraphPiece::Interior, GraphPiece::Normal, GraphPiece::Corner];

/// Whether `(a, b)` lies in the limiting normal cone to the graph of
/// `N_{R_-}` at a point of `piece`.
fn in_graph_normal_cone(piece: GraphPiece, a: f64, b: f64) -> bool {
    match piece {
        GraphPiece::Interior => a == 0.0,
        GraphPiece::Normal => b == 0.0,
        GraphPiece::Corner => (a >= 0.0 && b <= 0.0) || a == 0.0 || b == 0.0,
    }
}

/// One-dimensional coderivative by testing the defining normal-cone
/// condition `(gamma, -y) in N_gph` on probe values of `gamma`.
/// `None` means empty.
pub fn orthant_oracle_1d(piece: GraphPiece, y: f64) -> Option<GammaTag> {
    let ok: Vec<bool> = [-1.0, 0.0, 1.0].iter().map(|&g| in_graph_normal_cone(piece, g, -y)).collect();
    match (ok[0], ok[1], ok[2]) {
        (false, false, false) => None,
        (false, true, false) => Some(GammaTag::Zero),
        (false, true, true) => Some(GammaTag::NonNegative),
        (true, true, true) => Some(GammaTag::Free),
        other => panic!("unexpected probe pattern {other:?}"),
    }
}

/// Product rule over coordinates.
pub fn orthant_oracle(pieces: &[GraphPiece], y: &[f64]) -> Option<Vec<GammaTag>> {
    pieces.iter().zip(y).map(|(p, y)| orthant_oracle_1d(*p, *y)).collect()
}

/// Closed-form data of the two-disk constraint `|y1 - y2| >= 6`.
pub fn disk_gradient(y: &DVector<f64>) -> DVector<f64> {
    let (rx, ry) = (y[0] - y[2], y[1] - y[3]);
    let r = (rx * rx + ry * ry).sqrt();
    DVector::from_column_slice(&[rx / r, ry / r, -rx / r, -ry / r])
}

/// Moves `y` onto `|y1 - y2| = contact` keeping the midpoint.
pub fn disk_to_boundary(y: &DVector<f64>, contact: f64) -> DVector<f64> {
    let (mx, my) = (0.5 * (y[0] + y[2]), 0.5 * (y[1] + y[3]));
    let (rx, ry) = (y[0] - y[2], y[1] - y[3]);
    let s = 0.5 * contact / (rx * rx + ry * ry).sqrt();
    DVector::from_column_slice(&[mx + s * rx, my + s * ry, mx - s * rx, my - s * ry])
}

/// Coderivative of `N_C` for the two-disk set at a boundary point with
/// normal `v = -lambda grad g`, `lambda > 0`, from a sampled tangent space
/// of the graph. Returns the tangent basis split as `(T_x, T_v)`; `z` is in
/// the coderivative at `u` iff `T_x^T z = T_v^T u`.
pub fn disk_graph_tangent(
    x: &DVector<f64>,
    lambda: f64,
    eps: f64,
    samples: &[(DVector<f64>, f64)],
) -> (DMatrix<f64>, DMatrix<f64>) {
    let v0 = -disk_gradient(x) * lambda;
    let mut diffs = DMatrix::zeros(8, samples.len());
    for (c, (dx, dl)) in samples.iter().enumerate() {
        let xs = disk_to_boundary(&(x + dx * eps), 6.0);
        let vs = -disk_gradient(&xs) * (lambda + eps * dl);
        for r in 0..4 {
            diffs[(r, c)] = (xs[r] - x[r]) / eps;
            diffs[(r + 4, c)] = (vs[r] - v0[r]) / eps;
        }
    }
    let svd = diffs.svd(true, false);
    let uu = svd.u.expect("left vectors");
    let mut idx: Vec<usize> = (0..svd.singular_values.len()).collect();
    idx.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let tangent = DMatrix::from_fn(8, 4, |r, c| uu[(r, idx[c])]);
    (tangent.rows(0, 4).into_owned(), tangent.rows(4, 4).into_owned())
}

/// Grid projection onto the car set `{y <= 0}` in one dimension.
pub fn car_grid_projection(z: f64, res: f64) -> f64 {
    let lo = z.min(0.0) - 1.0;
    let n = ((0.0 - lo) / res).ceil() as usize;
    (0..=n).map(|i| (lo + i as f64 * res).min(0.0)).min_by(|a, b| (a - z).abs().total_cmp(&(b - z).abs())).unwrap()
}

/// Grid projection onto `|y1 - y2| >= contact`: the midpoint is kept and the
/// relative position is searched on a polar grid whose arc spacing is `res`,
/// over radii from `contact` outward.
pub fn disk_grid_distance(z: &DVector<f64>, contact: f64, res: f64) -> f64 {
    let (rx, ry) = (z[0] - z[2], z[1] - z[3]);
    let r = (rx * rx + ry * ry).sqrt();
    if r >= contact {
        return 0.0;
    }
    // |z - y|^2 = |zr - yr|^2 / 2 when midpoints agree
    let steps = (2.0 * std::f64::consts::PI * contact / res).ceil() as usize;
    let radii = [contact, contact + res, contact + 2.0 * res];
    let mut best = f64::INFINITY;
    for i in 0..steps {
        let th = i as f64 * 2.0 * std::f64::consts::PI / steps as f64;
        for rad in radii {
            let (px, py) = (rad * th.cos(), rad * th.sin());
            let d2 = 0.5 * ((px - rx).powi(2) + (py - ry).powi(2));
            best = best.min(d2);
        }
    }
    best.sqrt()
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0))
}

/// Point of `R^4` whose two planar halves are `r` apart around `mid`.
pub fn relative_pair(mid: [f64; 2], r: f64, th: f64) -> DVector<f64> {
    let (rx, ry) = (r * th.cos() / 2.0, r * th.sin() / 2.0);
    DVector::from_column_slice(&[mid[0] + rx, mid[1] + ry, mid[0] - rx, mid[1] - ry])
}

/// All `3^m` graph patterns for `m <= 3` with `per_pattern` random `y` each.
/// Returns the number of queries compared.
pub fn orthant_exhaustive(per_pattern: usize, seed: u64) -> Result<usize, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut count = 0;
    for m in 1..=3usize {
        for code in 0..3usize.pow(m as u32) {
            let pieces: Vec<GraphPiece> = (0..m).map(|i| PIECES[(code / 3usize.pow(i as u32)) % 3]).collect();
            for _ in 0..per_pattern {
                let mut x = DVector::zeros(m);
                let mut v = DVector::zeros(m);
                for (i, p) in pieces.iter().enumerate() {
                    match p {
                        GraphPiece::Interior => x[i] = -rng.gen_range(0.1..5.0),
                        GraphPiece::Normal => v[i] = rng.gen_range(0.1..5.0),
                        GraphPiece::Corner => {}
                    }
                }
                let y: Vec<f64> =
                    (0..m).map(|_| if rng.gen_bool(1.0 / 3.0) { 0.0 } else { rng.gen_range(-5.0..5.0) }).collect();
                let q =
                    OrthantCoderivativeQuery::new(x, v, DVector::from_column_slice(&y)).map_err(|e| e.to_string())?;
                let got = coderivative_orthant(&q);
                let ok = match orthant_oracle(&pieces, &y) {
                    None => got.is_empty(),
                    Some(tags) => got == CoderivativeValue::Tagged(tags),
                };
                if !ok {
                    return Err(format!("pieces {pieces:?}, y {y:?}: got {got:?}"));
                }
                count += 1;
            }
        }
    }
    Ok(count)
}

/// Compares `D* N_C` of the two-disk set with the sampled graph tangent on
/// `queries` points: 70% boundary with tangent directions, 15% boundary
/// with transversal directions (empty), 15% interior. Returns the largest
/// deviation seen.
pub fn disk_coderivative_queries(queries: usize, seed: u64) -> Result<f64, String> {
    let set = SweepingSet::two_disks(6.0, 1.0).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n_tan, n_trans) = (queries * 7 / 10, queries * 15 / 100);
    let mut worst: f64 = 0.0;
    for q in 0..queries {
        let mid = [rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)];
        let th = rng.gen_range(0.0..std::f64::consts::TAU);
        if q >= n_tan + n_trans {
            let x = relative_pair(mid, 6.0 + rng.gen_range(0.5..3.0), th);
            let u = rand_vec(&mut rng, 4);
            let d = coderivative_normal_cone(&set, &x, &DVector::zeros(4), &u).map_err(|e| e.to_string())?;
            let dev = d.distance(&DVector::zeros(4)).max(d.branches.iter().map(|b| b.base.norm()).fold(0.0, f64::max));
            if dev > 1e-3 || d.branches.iter().any(|b| b.tags.iter().any(|t| *t != GammaTag::Zero)) {
                return Err(format!("interior query {q}: deviation {dev}"));
            }
            worst = worst.max(dev);
            continue;
        }
        let x = relative_pair(mid, 6.0, th);
        let lam = rng.gen_range(0.2..3.0);
        let grad = disk_gradient(&x);
        let v = -&grad * lam;
        let samples: Vec<(DVector<f64>, f64)> =
            (0..24).map(|_| (rand_vec(&mut rng, 4), rng.gen_range(-1.0..1.0))).collect();
        let (tx, tv) = disk_graph_tangent(&x, lam, 1e-6, &samples);
        let mut u = rand_vec(&mut rng, 4);
        let tangent = q < n_tan;
        if tangent {
            u -= &grad * (grad.dot(&u) / grad.norm_squared());
        }
        let lhs = tx.transpose();
        let rhs = tv.transpose() * &u;
        let z0 = lhs.clone().svd(true, true).solve(&rhs, 1e-6).map_err(|e| e.to_string())?;
        let oracle_residual = (&lhs * &z0 - &rhs).norm();
        let d = coderivative_normal_cone(&set, &x, &v, &u).map_err(|e| e.to_string())?;
        if !tangent {
            if oracle_residual <= 1e-3 || !d.is_empty() || !d.domain_violation {
                return Err(format!(
                    "transversal query {q}: oracle residual {oracle_residual}, library empty {}",
                    d.is_empty()
                ));
            }
            continue;
        }
        if oracle_residual >= 1e-3 || d.is_empty() {
            return Err(format!(
                "tangent query {q}: oracle residual {oracle_residual}, library empty {}",
                d.is_empty()
            ));
        }
        let mut dev = d.distance(&z0);
        for b in &d.branches {
            for gamma in [-2.0, 0.0, 1.5] {
                let z = b.element(&DVector::from_element(1, gamma));
                dev = dev.max((&lhs * &z - &rhs).norm() / (1.0 + z.norm()));
            }
        }
        if dev > 1e-3 {
            return Err(format!("tangent query {q}: deviation {dev}"));
        }
        worst = worst.max(dev);
    }
    Ok(worst)
}

/// Projection statistics over random points near a set.
#[derive(Debug, Clone, Copy, Default)]
pub struct ProjectionStats {
    /// Largest `|z - P(z)| - oracle distance` (nonpositive means beats or ties).
    pub excess: f64,
    pub complementarity: f64,
    pub stationarity: f64,
    pub infeasibility: f64,
}

fn projection_kkt(set: &SweepingSet, z: &DVector<f64>, stats: &mut ProjectionStats) -> Result<DVector<f64>, String> {
    let p = set.project(z).map_err(|e| e.to_string())?;
    let g = set.g(&p.point);
    let jac = set.grad_g(&p.point);
    if p.multipliers.iter().any(|l| *l < 0.0) {
        return Err("negative projection multiplier".into());
    }
    stats.stationarity = stats.stationarity.max((z - &p.point + jac.transpose() * &p.multipliers).norm());
    for (gi, li) in g.iter().zip(p.multipliers.iter()) {
        stats.complementarity = stats.complementarity.max((gi * li).abs());
        stats.infeasibility = stats.infeasibility.max(-gi);
    }
    Ok(p.point)
}

/// Car set `{y <= 0}` on points within 3 of the boundary.
pub fn car_projection_stats(points: usize, res: f64, seed: u64) -> Result<ProjectionStats, String> {
    let set = SweepingSet::affine(DMatrix::from_element(1, 1, -1.0), DVector::zeros(1), 1.0, 1.0)
        .map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stats = ProjectionStats { excess: f64::NEG_INFINITY, ..Default::default() };
    for _ in 0..points {
        let z = rng.gen_range(-3.0..3.0);
        let p = projection_kkt(&set, &DVector::from_element(1, z), &mut stats)?;
        let grid = car_grid_projection(z, res);
        stats.excess = stats.excess.max((p[0] - z).abs() - (grid - z).abs());
    }
    Ok(stats)
}

/// Two-disk set on points whose disk separation lies in `[3.5, 8]`.
pub fn disk_projection_stats(points: usize, res: f64, seed: u64) -> Result<ProjectionStats, String> {
    let set = SweepingSet::two_disks(6.0, 1.0).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stats = ProjectionStats { excess: f64::NEG_INFINITY, ..Default::default() };
    for _ in 0..points {
        let mid = [rng.gen_range(-20.0..20.0), rng.gen_range(-20.0..20.0)];
        let z = relative_pair(mid, rng.gen_range(3.5..8.0), rng.gen_range(0.0..std::f64::consts::TAU));
        let p = projection_kkt(&set, &z, &mut stats)?;
        stats.excess = stats.excess.max((&p - &z).norm() - disk_grid_distance(&z, 6.0, res));
    }
    Ok(stats)
}

/// Two disks driven by `f(x, a) = sin(x) + M a`.
pub fn nonlinear_disks() -> ProcessSpec {
    let m = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 0.5, -1.0, 0.0, 2.0, -1.5, 0.25]);
    let m2 = m.clone();
    ProcessSpec::new(
        SweepingSet::two_disks(6.0, 1.0).unwrap(),
        Arc::new(move |x, a| x.map(f64::sin) + &m * a),
        Arc::new(|x, _| DMatrix::from_diagonal(&x.map(f64::cos))),
        Arc::new(move |_, _| m2.clone()),
        2,
        1.0,
        DVector::from_column_slice(&[4.0, 0.0, -4.0, 0.0]),
        1.0,
        10.0,
        1.0,
        10.0,
    )
    .unwrap()
}

/// Largest relative defect of `x-part + u-part = cos(x) .* y` over random
/// evaluations of `D* F` for [`nonlinear_disks`].
pub fn row_sum_defect(evaluations: usize, seed: u64) -> Result<f64, String> {
    let spec = nonlinear_disks();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..evaluations {
        let mid = [rng.gen_range(-10.0..10.0), rng.gen_range(-10.0..10.0)];
        let touching = rng.gen_bool(0.5);
        let gap = if touching { 0.0 } else { rng.gen_range(0.01..3.0) };
        let rel = relative_pair(mid, 6.0 + gap, rng.gen_range(0.0..std::f64::consts::TAU));
        let u = rand_vec(&mut rng, 4) * 3.0;
        let x = &rel + &u;
        let a = rand_vec(&mut rng, 2) * 2.0;
        let grad = disk_gradient(&rel);
        let lam = if touching && rng.gen_bool(0.8) { rng.gen_range(0.0..4.0) } else { 0.0 };
        let w = spec.f(&x, &a) - &grad * lam;
        let mut y = rand_vec(&mut rng, 4) * 3.0;
        if lam > 0.0 {
            y -= &grad * (grad.dot(&y) / grad.norm_squared());
        }
        let cd = coderivative_f(&spec, &x, &u, &a, &w, &y).map_err(|e| e.to_string())?;
        let r: f64 = rng.gen_range(-5.0..5.0);
        let g = match cd.tags[0] {
            GammaTag::Zero => 0.0,
            GammaTag::NonNegative => r.abs(),
            GammaTag::Free => r,
        };
        let (ex, eu, _) = cd.element(&DVector::from_element(1, g)).map_err(|e| e.to_string())?;
        let expected = DVector::from_fn(4, |i, _| x[i].cos() * y[i]);
        worst = worst.max((&ex + &eu - &expected).norm() / (1.0 + ex.norm() + eu.norm()));
    }
    Ok(worst)
}
