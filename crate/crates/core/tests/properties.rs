//! Property tests over randomly drawn domains, windows and operators.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use num_complex::Complex64;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use qsieve::locop::{build_localization_matrix, husimi_at};
use qsieve::opstft::{opstft_at, HermiteOperator, PolyradialWindow};
use qsieve::phasespace::{make_disk_union, nyquist_density, PhaseGrid};
use qsieve::recovery::ForwardMap;
use qsieve::sieve::{
    faber_krahn_bound, max_nyquist_bound, rfk_bound, theorem2_bound, Theorem2Form,
};
use qsieve::specialfn::{stft_hermite, HermiteIndex};

fn cfg(cases: u32) -> ProptestConfig {
    ProptestConfig {
        cases,
        ..ProptestConfig::default()
    }
}

fn window(kind: u8) -> PolyradialWindow {
    match kind % 3 {
        0 => PolyradialWindow::gaussian(),
        1 => PolyradialWindow::rank_two(),
        _ => PolyradialWindow::projection(2).unwrap(),
    }
}

fn disks() -> impl Strategy<Value = Vec<(f64, f64, f64)>> {
    prop::collection::vec((-1.5..1.5f64, -1.5..1.5f64, 0.15..0.6f64), 1..4)
}

fn split(d: &[(f64, f64, f64)]) -> (Vec<(f64, f64)>, Vec<f64>) {
    (d.iter().map(|t| (t.0, t.1)).collect(), d.iter().map(|t| t.2).collect())
}

proptest! {
    #![proptest_config(cfg(64))]

    #[test]
    fn stft_modulus_is_symmetric(n in 0usize..12, k in 0usize..12, x in -3.0..3.0f64, y in -3.0..3.0f64) {
        let a = stft_hermite(HermiteIndex::new(n).unwrap(), HermiteIndex::new(k).unwrap(), (x, y)).norm();
        let b = stft_hermite(HermiteIndex::new(k).unwrap(), HermiteIndex::new(n).unwrap(), (x, y)).norm();
        prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a));
    }

    #[test]
    fn rfk_on_concentrated_sets_is_worse_than_faber_krahn(area in 0.01..20.0f64, r in 0.1..3.0f64) {
        let nu = area.min(PI * r * r);
        let rfk = rfk_bound(nu, r).unwrap().value;
        let fk = faber_krahn_bound(nu, 1.0).unwrap().value;
        prop_assert!(rfk >= fk - 1e-15, "{rfk} < {fk}");
    }

    #[test]
    fn hs_norm_is_bounded_pointwise(seed in any::<u64>(), kind in any::<u8>(), x in -4.0..4.0f64, y in -4.0..4.0f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rho = HermiteOperator::random(5, 3, &mut rng).unwrap();
        let g = window(kind);
        let v = opstft_at(&g, &rho, (x, y)).unwrap();
        let hs = v.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
        prop_assert!(hs <= g.op_norm() * rho.hs_norm() * (1.0 + 1e-12));
    }

    #[test]
    fn husimi_is_nonnegative(seed in any::<u64>(), rank in 1usize..4, x in -4.0..4.0f64, y in -4.0..4.0f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rho = HermiteOperator::random_positive(6, rank, &mut rng).unwrap();
        prop_assert!(husimi_at(&rho, (x, y)) >= -1e-10);
    }
}

proptest! {
    #![proptest_config(cfg(12))]

    #[test]
    fn nyquist_is_monotone_and_bounded(d in disks(), extra in (-1.5..1.5f64, -1.5..1.5f64, 0.15..0.6f64), r in 0.2..2.0f64) {
        let grid = PhaseGrid::new(4.5, 0.05).unwrap();
        let (c1, r1) = split(&d);
        let mut all = d.clone();
        all.push(extra);
        let (c2, r2) = split(&all);
        let small = make_disk_union(&c1, &r1, grid).unwrap();
        let big = make_disk_union(&c2, &r2, grid).unwrap();
        let n1 = nyquist_density(&small, r).unwrap().value;
        let n2 = nyquist_density(&big, r).unwrap().value;
        prop_assert!(n1 <= n2 + 1e-12);
        prop_assert!(n2 <= big.measure().min(PI * r * r) + 1e-12);
    }

    #[test]
    fn nyquist_is_translation_invariant(d in disks(), sx in -10i32..10, sy in -10i32..10, r in 0.2..1.5f64) {
        let grid = PhaseGrid::new(4.5, 0.05).unwrap();
        let h = grid.spacing();
        let (c, radii) = split(&d);
        let moved: Vec<(f64, f64)> = c.iter().map(|&(x, y)| (x + sx as f64 * h, y + sy as f64 * h)).collect();
        let a = nyquist_density(&make_disk_union(&c, &radii, grid).unwrap(), r).unwrap().value;
        let b = nyquist_density(&make_disk_union(&moved, &radii, grid).unwrap(), r).unwrap().value;
        prop_assert!((a - b).abs() <= 1e-12, "{a} {b}");
    }

    #[test]
    fn restricted_nyquist_chain_is_ordered(d in disks(), kind in 1u8..3, r in 0.3..1.5f64) {
        let grid = PhaseGrid::new(4.5, 0.05).unwrap();
        let (c, radii) = split(&d);
        let mask = make_disk_union(&c, &radii, grid).unwrap();
        let rep = max_nyquist_bound(&mask, &window(kind), r).unwrap();
        let op = rep.restricted_op.unwrap();
        prop_assert!(op <= rep.restricted_hs * (1.0 + 1e-12));
        prop_assert!(rep.restricted_hs <= rep.bound.value * (1.0 + 1e-12));
    }

    #[test]
    fn thermal_kernel_form_is_below_closed_form(d in disks(), a in 0.0..2.0f64) {
        let grid = PhaseGrid::new(4.0, 0.05).unwrap();
        let (c, radii) = split(&d);
        let mask = make_disk_union(&c, &radii, grid).unwrap();
        let k = theorem2_bound(&mask, a, Theorem2Form::KernelSup).unwrap().value;
        let cl = theorem2_bound(&mask, a, Theorem2Form::Closed).unwrap().value;
        prop_assert!(k <= cl + 1e-9, "{k} > {cl}");
    }

    #[test]
    fn localization_matrix_is_a_positive_contraction(d in disks(), kind in any::<u8>()) {
        let grid = PhaseGrid::new(3.0, 0.05).unwrap();
        let (c, radii) = split(&d);
        let mask = make_disk_union(&c, &radii, grid).unwrap();
        let a = build_localization_matrix(&mask, &window(kind), 10).unwrap();
        let e = a.entries();
        prop_assert!((e - e.adjoint()).norm() <= 1e-12 * (1.0 + e.norm()));
        let spec = a.spectrum();
        prop_assert!(spec.iter().all(|&l| l >= -1e-12 && l <= 1.0 + 1e-12));
        prop_assert!(a.trace() <= mask.measure() + 1e-9);
    }

    #[test]
    fn forward_map_adjoint_is_consistent(seed in any::<u64>(), kind in any::<u8>()) {
        let grid = PhaseGrid::new(2.0, 0.1).unwrap();
        let g = window(kind);
        let map = ForwardMap::new(&g, grid, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sigma = HermiteOperator::random(4, 4, &mut rng).unwrap();
        let field: Vec<Complex64> = (0..map.field_len())
            .map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect();
        let lhs: Complex64 = map.apply(sigma.coeff()).iter().zip(&field).map(|(a, b)| a.conj() * b).sum();
        let adj: DMatrix<Complex64> = map.adjoint(&field);
        let rhs: Complex64 = sigma.coeff().iter().zip(adj.iter()).map(|(a, b)| a.conj() * b).sum();
        prop_assert!((lhs - rhs).norm() <= 1e-10 * (1.0 + lhs.norm()), "{lhs} {rhs}");
    }
}
