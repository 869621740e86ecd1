mod common;

use common::{GraphPiece, PIECES};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use sweep_core::geometry::SweepingSet;
use sweep_core::second_order::{coderivative_orthant, CoderivativeValue, OrthantCoderivativeQuery};

fn car_set() -> SweepingSet {
    SweepingSet::affine(DMatrix::from_element(1, 1, -1.0), DVector::zeros(1), 1.0, 1.0).unwrap()
}

fn disk_set() -> SweepingSet {
    SweepingSet::two_disks(6.0, 1.0).unwrap()
}

fn kkt_residual(set: &SweepingSet, z: &DVector<f64>) -> (f64, f64, f64) {
    let p = set.project(z).unwrap();
    let g = set.g(&p.point);
    let jac = set.grad_g(&p.point);
    let stationarity = (z - &p.point + jac.transpose() * &p.multipliers).norm();
    let compl = g.iter().zip(p.multipliers.iter()).map(|(g, l)| (g * l).abs()).fold(0.0, f64::max);
    let infeas = g.iter().map(|g| (-g).max(0.0)).fold(0.0, f64::max);
    assert!(p.multipliers.iter().all(|l| *l >= 0.0));
    (stationarity, compl, infeas)
}

proptest! {
    #[test]
    fn car_projection_beats_grid(z in -3.0f64..3.0) {
        let set = car_set();
        let p = set.project(&DVector::from_element(1, z)).unwrap();
        let grid = common::car_grid_projection(z, 1e-3);
        prop_assert!((p.point[0] - z).abs() <= (grid - z).abs() + 1e-12);
        let (s, c, f) = kkt_residual(&set, &DVector::from_element(1, z));
        prop_assert!(s < 1e-12 && c < 1e-8 && f < 1e-12);
    }

    #[test]
    fn disk_projection_beats_grid(
        mid in prop::array::uniform2(-20.0f64..20.0),
        r in 3.5f64..8.0,
        th in 0.0f64..std::f64::consts::TAU,
    ) {
        let set = disk_set();
        let (rx, ry) = (r * th.cos(), r * th.sin());
        let z = DVector::from_column_slice(&[mid[0] + rx / 2.0, mid[1] + ry / 2.0, mid[0] - rx / 2.0, mid[1] - ry / 2.0]);
        let p = set.project(&z).unwrap();
        let oracle = common::disk_grid_distance(&z, 6.0, 1e-3);
        prop_assert!((&p.point - &z).norm() <= oracle + 1e-9);
        let (s, c, f) = kkt_residual(&set, &z);
        prop_assert!(s < 1e-9 && c < 1e-8 && f < 1e-10);
    }

    #[test]
    fn projection_is_idempotent(
        mid in prop::array::uniform2(-5.0f64..5.0),
        r in 3.5f64..9.0,
        th in 0.0f64..std::f64::consts::TAU,
    ) {
        let set = disk_set();
        let z = DVector::from_column_slice(&[mid[0] + r * th.cos() / 2.0, mid[1] + r * th.sin() / 2.0, mid[0] - r * th.cos() / 2.0, mid[1] - r * th.sin() / 2.0]);
        let p = set.project(&z).unwrap().point;
        let q = set.project(&p).unwrap().point;
        prop_assert!((p - q).norm() < 1e-12);
    }

    #[test]
    fn orthant_matches_case_analysis(
        pieces in prop::collection::vec(0usize..3, 1..=3),
        mags in prop::collection::vec(0.1f64..5.0, 3),
        ys in prop::collection::vec(prop_oneof![Just(0.0), -5.0f64..5.0], 3),
    ) {
        let m = pieces.len();
        let pieces: Vec<GraphPiece> = pieces.iter().map(|&i| PIECES[i]).collect();
        let (x, v) = graph_point(&pieces, &mags);
        let y = DVector::from_column_slice(&ys[..m]);
        let q = OrthantCoderivativeQuery::new(x, v, y.clone()).unwrap();
        let got = coderivative_orthant(&q);
        let want = common::orthant_oracle(&pieces, &ys[..m]);
        match want {
            None => prop_assert!(got.is_empty()),
            Some(tags) => prop_assert_eq!(got, CoderivativeValue::Tagged(tags)),
        }
    }
}

proptest! {
    #[test]
    fn disk_set_is_prox_regular_with_declared_radius(
        mid in prop::array::uniform2(-10.0f64..10.0),
        th in 0.0f64..std::f64::consts::TAU,
        other_mid in prop::array::uniform2(-12.0f64..12.0),
        other_r in 6.0f64..14.0,
        other_th in 0.0f64..std::f64::consts::TAU,
    ) {
        let set = disk_set();
        let eta = set.prox_modulus();
        let x = common::relative_pair(mid, 6.0, th);
        let v = -common::disk_gradient(&x) / std::f64::consts::SQRT_2;
        let y = common::relative_pair(other_mid, other_r, other_th);
        prop_assert!(set.membership(&y, 0.0).unwrap());
        let d = &y - &x;
        prop_assert!(v.dot(&d) <= d.norm_squared() / (2.0 * eta) + 1e-9 * (1.0 + d.norm_squared()));
    }

    #[test]
    fn ball_is_prox_regular_with_declared_radius(
        dir in prop::array::uniform3(-1.0f64..1.0),
        y in prop::array::uniform3(-1.0f64..1.0),
    ) {
        let set = SweepingSet::ball(DVector::zeros(3), 2.0, 0.5).unwrap();
        let dir = DVector::from_column_slice(&dir);
        let y = DVector::from_column_slice(&y);
        prop_assume!(dir.norm() > 1e-3);
        let x = &dir * (2.0 / dir.norm());
        let v = &x / 2.0;
        let d = &y - &x;
        prop_assert!(v.dot(&d) <= d.norm_squared() / (2.0 * set.prox_modulus()) + 1e-12);
    }

    #[test]
    fn exact_active_set_is_inside_perturbed_one(
        mid in prop::array::uniform2(-10.0f64..10.0),
        gap in prop_oneof![Just(0.0), 0.0f64..2.0],
        th in 0.0f64..std::f64::consts::TAU,
        rho in 1e-6f64..3.0,
        z in prop::array::uniform2(-3.0f64..3.0),
    ) {
        let disks = disk_set();
        let y = common::relative_pair(mid, 6.0 + gap, th);
        let exact = disks.active_set(&y, 0.0).unwrap();
        let near = disks.active_set(&y, rho).unwrap();
        prop_assert!(exact.indices.iter().all(|i| near.contains(*i)));

        let square = SweepingSet::affine(
            DMatrix::from_row_slice(4, 2, &[1.0, 0.0, -1.0, 0.0, 0.0, 1.0, 0.0, -1.0]),
            DVector::from_element(4, 1.0),
            1.0,
            1.0,
        )
        .unwrap();
        let y = DVector::from_column_slice(&z).map(|c| c.clamp(-1.0, 1.0));
        let exact = square.active_set(&y, 0.0).unwrap();
        let near = square.active_set(&y, rho).unwrap();
        prop_assert!(exact.indices.iter().all(|i| near.contains(*i)));
    }

    #[test]
    fn orthant_emptiness_is_permutation_symmetric(
        pieces in prop::collection::vec(0usize..3, 1..=4),
        mags in prop::collection::vec(0.1f64..5.0, 4),
        ys in prop::collection::vec(prop_oneof![Just(0.0), -5.0f64..5.0], 4),
        perm_seed in any::<u64>(),
    ) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let m = pieces.len();
        let pieces: Vec<GraphPiece> = pieces.iter().map(|&i| PIECES[i]).collect();
        let (x, v) = graph_point(&pieces, &mags);
        let y = DVector::from_column_slice(&ys[..m]);
        let mut perm: Vec<usize> = (0..m).collect();
        perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(perm_seed));
        let permute = |z: &DVector<f64>| DVector::from_fn(m, |i, _| z[perm[i]]);
        let got = coderivative_orthant(&OrthantCoderivativeQuery::new(x.clone(), v.clone(), y.clone()).unwrap());
        let moved = coderivative_orthant(&OrthantCoderivativeQuery::new(permute(&x), permute(&v), permute(&y)).unwrap());
        prop_assert_eq!(got.is_empty(), moved.is_empty());
        if let (Some(a), Some(b)) = (got.tags(), moved.tags()) {
            for i in 0..m {
                prop_assert_eq!(a[perm[i]], b[i]);
            }
        }
    }
}

fn graph_point(pieces: &[GraphPiece], mags: &[f64]) -> (DVector<f64>, DVector<f64>) {
    let m = pieces.len();
    let mut x = DVector::zeros(m);
    let mut v = DVector::zeros(m);
    for (i, p) in pieces.iter().enumerate() {
        match p {
            GraphPiece::Interior => x[i] = -mags[i],
            GraphPiece::Normal => v[i] = mags[i],
            GraphPiece::Corner => {}
        }
    }
    (x, v)
}
