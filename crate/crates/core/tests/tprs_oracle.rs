mod common;

use common::*;
use nalgebra::DVector;
use rand::Rng;
use stkrige::basis::tprs_basis;
use stkrige::geometry::Coord;

fn coords(seed: u64, n: usize) -> Vec<Coord> {
    let mut r = rng(seed);
    (0..n)
        .map(|_| Coord::new(r.random_range(0.0..40.0), r.random_range(0.0..25.0)))
        .collect()
}

#[test]
fn coefficient_map_is_orthogonal_to_polynomials() {
    for seed in 0..5 {
        let c = coords(seed, 30);
        for k in [4, 10, 30] {
            let b = tprs_basis(&c, k).unwrap();
            let tp = b.polynomial(&c).transpose() * &b.coef_map;
            assert!(tp.abs().max() < 1e-8, "seed {seed} k {k}: {}", tp.abs().max());
        }
    }
}

#[test]
fn full_rank_smoother_interpolates_like_the_bordered_system() {
    for seed in 10..14 {
        let c = coords(seed, 25);
        let mut r = rng(seed + 100);
        let y = DVector::from_fn(25, |_, _| r.random_range(-2.0..2.0));
        let b = tprs_basis(&c, 25).unwrap();
        let lib = b.smooth(&y, 0.0).unwrap();
        let reference = bordered_tps(&c, &y, 0.0);
        assert!((&lib - &reference).abs().max() < 1e-6);
        assert!((&lib - &y).abs().max() < 1e-6);
    }
}

#[test]
fn full_rank_smoother_matches_penalized_bordered_system() {
    let c = coords(20, 20);
    let mut r = rng(21);
    let y = DVector::from_fn(20, |_, _| r.random_range(-2.0..2.0));
    let b = tprs_basis(&c, 20).unwrap();
    let std: Vec<Coord> = c.iter().map(|p| b.standardization.apply(p)).collect();
    for lambda in [0.01, 0.5, 5.0] {
        let lib = b.smooth(&y, lambda).unwrap();
        let reference = bordered_tps(&std, &y, lambda);
        assert!((&lib - &reference).abs().max() < 1e-6, "λ {lambda}");
    }
}

#[test]
fn reduced_rank_keeps_planes_exact() {
    let c = coords(30, 40);
    let b = tprs_basis(&c, 8).unwrap();
    let y = DVector::from_iterator(40, c.iter().map(|p| 1.5 - 0.2 * p.x + 0.7 * p.y));
    let fit = b.smooth(&y, 3.0).unwrap();
    assert!((&fit - &y).abs().max() < 1e-8);
}
