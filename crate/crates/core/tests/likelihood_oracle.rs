mod common;

use common::*;
use stkrige::basis::BasisKind;

fn sweep(kind: BasisKind, nugget: bool, seeds: std::ops::Range<u64>) {
    for seed in seeds {
        let mut r = rng(seed);
        let n = 8 + (seed as usize % 7);
        let t = 4 + (seed as usize % 4);
        let m = 1 + (seed as usize % 3);
        let k = match kind {
            BasisKind::Tprs => 4 + (seed as usize % (n - 3)),
            BasisKind::Lrk => 3 + (seed as usize % 5),
            _ => 0,
        };
        let inst = random_instance(&mut r, n, t, m, kind, k, nugget);
        let (lib, reference, da) = likelihood_pair(&inst);
        assert!(
            rel_diff(lib, reference) < 1e-6,
            "{kind:?} nugget={nugget} seed {seed}: {lib} vs {reference}"
        );
        assert!(da < 1e-6 * (1.0 + reference.abs()), "α̂ differs by {da}");
    }
}

#[test]
fn no_field_matches_dense() {
    sweep(BasisKind::None, false, 0..6);
}

#[test]
fn lrk_matches_dense() {
    sweep(BasisKind::Lrk, false, 10..16);
    sweep(BasisKind::Lrk, true, 20..26);
}

#[test]
fn tprs_matches_dense() {
    sweep(BasisKind::Tprs, false, 30..36);
    sweep(BasisKind::Tprs, true, 40..46);
}

#[test]
fn full_rank_matches_dense() {
    sweep(BasisKind::Full, false, 50..56);
    sweep(BasisKind::Full, true, 60..66);
}
