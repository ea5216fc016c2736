//! Spatial bases for the β-fields.
//!
//! * LRK: `Z Ω̃^{-1/2}` with `Z = C(‖s − κ‖)` and `Ω̃ = C(‖κ − κ‖)`.
//! * TPRS: truncated eigenbasis of the thin plate kernel matrix `E` with the
//!   polynomial side condition absorbed through `W_K`.
//! * Full: the exact exponential covariance over the sites.
//!
//! TPRS rows at new locations. With `E = U D Uᵀ` we have `E U_K = U_K D_K`,
//! so the training rows `Z* = U_K D_K W_K M^{-1/2}` (with `M = W_Kᵀ D_K W_K`)
//! equal `E P` for the coefficient map `P = U_K W_K M^{-1/2}`. A new site's
//! row is therefore `η(‖s − s_i‖)_i · P`, which is exactly the thin plate
//! representation `Σ_i ζ_i η(‖s − s_i‖)` with `ζ = P δ*`. The side condition
//! `Tᵀ ζ = 0` holds because `Tᵀ U_K W_K = 0`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::covariance::corr;
use crate::error::{invalid, Error, Result};
use crate::geometry::{pairwise_distances, Coord, KnotSet};
use crate::linalg::{cholesky_with_jitter, dependent_columns, inv_sqrt_sym, sorted_eigen};

/// Eigenvalue floor for `Ω̃^{-1/2}`, relative to the largest eigenvalue.
pub const EIGEN_FLOOR_REL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BasisKind {
    None,
    Lrk,
    Tprs,
    /// Full-rank exponential β-fields.
    Full,
}

impl std::str::FromStr for BasisKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(Self::None),
            "lrk" => Ok(Self::Lrk),
            "tprs" => Ok(Self::Tprs),
            "full" => Ok(Self::Full),
            other => invalid(format!("unknown basis `{other}`")),
        }
    }
}

impl std::fmt::Display for BasisKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::None => "none",
            Self::Lrk => "lrk",
            Self::Tprs => "tprs",
            Self::Full => "full",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", content = "value")]
pub enum RangeMode {
    Estimated,
    /// One shared range in kilometres.
    Fixed(f64),
    /// One shared range equal to this fraction of the maximum inter-site distance.
    FixedFraction(f64),
}

impl std::str::FromStr for RangeMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "est" || s == "estimated" {
            return Ok(Self::Estimated);
        }
        let Some(v) = s.strip_prefix("fixed:") else {
            return invalid(format!("unknown range mode `{s}`"));
        };
        let frac = match v {
            "max" => Some(1.0),
            "max/2" => Some(0.5),
            "max/4" => Some(0.25),
            "max/8" => Some(0.125),
            _ => None,
        };
        if let Some(f) = frac {
            return Ok(Self::FixedFraction(f));
        }
        match v.parse::<f64>() {
            Ok(km) if km > 0.0 && km.is_finite() => Ok(Self::Fixed(km)),
            _ => invalid(format!("range mode `{s}` needs a positive value in km")),
        }
    }
}

impl std::fmt::Display for RangeMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Estimated => write!(f, "est"),
            Self::Fixed(v) => write!(f, "fixed:{v}"),
            Self::FixedFraction(x) if *x == 1.0 => write!(f, "fixed:max"),
            Self::FixedFraction(x) => write!(f, "fixed:max/{}", 1.0 / x),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KnotPlacement {
    /// Space-filling selection among the training sites.
    MonitorSites,
    /// Space-filling selection among grid-cell centres over the site hull.
    Grid { cell_km: f64 },
    Given(KnotSet),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpatialBasisSpec {
    pub kind: BasisKind,
    pub rank: usize,
    pub knots: KnotPlacement,
    pub range_mode: RangeMode,
}

impl SpatialBasisSpec {
    pub fn none() -> Self {
        Self {
            kind: BasisKind::None,
            rank: 0,
            knots: KnotPlacement::MonitorSites,
            range_mode: RangeMode::Estimated,
        }
    }

    pub fn tprs(rank: usize) -> Self {
        Self {
            kind: BasisKind::Tprs,
            rank,
            knots: KnotPlacement::MonitorSites,
            range_mode: RangeMode::Estimated,
        }
    }

    pub fn lrk(rank: usize, knots: KnotPlacement, range_mode: RangeMode) -> Self {
        Self {
            kind: BasisKind::Lrk,
            rank,
            knots,
            range_mode,
        }
    }

    pub fn full(range_mode: RangeMode) -> Self {
        Self {
            kind: BasisKind::Full,
            rank: 0,
            knots: KnotPlacement::MonitorSites,
            range_mode,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            BasisKind::None if self.rank != 0 => invalid("basis `none` requires rank 0"),
            BasisKind::Tprs if self.rank < 4 => {
                invalid(format!("TPRS requires rank >= 4, got {}", self.rank))
            }
            BasisKind::Lrk if self.rank < 1 => invalid("LRK requires rank >= 1"),
            BasisKind::Lrk => match &self.knots {
                KnotPlacement::Given(k) if k.len() != self.rank => invalid(format!(
                    "LRK rank {} but {} knots given",
                    self.rank,
                    k.len()
                )),
                KnotPlacement::Grid { cell_km } if !(*cell_km > 0.0) => {
                    invalid("grid cell size must be positive")
                }
                _ => self.check_range(),
            },
            BasisKind::Full => self.check_range(),
            _ => Ok(()),
        }
    }

    fn check_range(&self) -> Result<()> {
        match self.range_mode {
            RangeMode::Fixed(v) | RangeMode::FixedFraction(v) if !(v > 0.0) || !v.is_finite() => {
                invalid("fixed range must be positive")
            }
            _ => Ok(()),
        }
    }

    /// Whether the β-field ranges enter the basis at all.
    pub fn uses_range(&self) -> bool {
        matches!(self.kind, BasisKind::Lrk | BasisKind::Full)
    }

    /// Short row label used in CV tables, e.g. `tprs` or `lrk fixed:max/2`.
    pub fn label(&self) -> String {
        if self.uses_range() {
            format!("{} {}", self.kind, self.range_mode)
        } else {
            self.kind.to_string()
        }
    }
}

/// Centre and single overall scale of a coordinate set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub cx: f64,
    pub cy: f64,
    pub scale: f64,
}

impl Standardization {
    pub fn fit(coords: &[Coord]) -> Result<Self> {
        if coords.is_empty() {
            return Err(Error::Empty("coordinates".into()));
        }
        let n = coords.len() as f64;
        let cx = coords.iter().map(|c| c.x).sum::<f64>() / n;
        let cy = coords.iter().map(|c| c.y).sum::<f64>() / n;
        let ss: f64 = coords
            .iter()
            .map(|c| (c.x - cx).powi(2) + (c.y - cy).powi(2))
            .sum();
        let scale = (ss / (2.0 * n)).sqrt();
        if !(scale > 0.0) {
            return Err(Error::Degenerate("all sites coincide".into()));
        }
        Ok(Self { cx, cy, scale })
    }

    pub fn apply(&self, c: &Coord) -> Coord {
        Coord::new((c.x - self.cx) / self.scale, (c.y - self.cy) / self.scale)
    }
}

/// Thin plate kernel `η(r) = r² log(r) / (8π)`, with `η(0) = 0`.
pub fn tprs_eta(r: f64) -> f64 {
    if r <= 0.0 {
        0.0
    } else {
        r * r * r.ln() / (8.0 * std::f64::consts::PI)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TprsBasis {
    pub rank: usize,
    pub standardization: Standardization,
    /// Standardized training coordinates.
    pub train: Vec<Coord>,
    /// `Z*` at the training sites, `n x (K − 3)`.
    pub penalized: DMatrix<f64>,
    /// Coefficient map `P = U_K W_K (W_Kᵀ D_K W_K)^{-1/2}`.
    pub coef_map: DMatrix<f64>,
    /// Warnings about near-tied eigenvalues at the truncation point.
    pub warnings: Vec<String>,
}

impl TprsBasis {
    /// `T = [1 | x | y]` on standardized coordinates.
    pub fn polynomial(&self, coords: &[Coord]) -> DMatrix<f64> {
        tprs_polynomial(&self.standardization, coords)
    }

    pub fn eta_matrix(&self, coords: &[Coord]) -> DMatrix<f64> {
        DMatrix::from_fn(coords.len(), self.train.len(), |i, j| {
            tprs_eta(self.standardization.apply(&coords[i]).dist(&self.train[j]))
        })
    }

    pub fn penalized_at(&self, coords: &[Coord]) -> DMatrix<f64> {
        self.eta_matrix(coords) * &self.coef_map
    }

    /// Fitted values at the training sites of the penalized least-squares
    /// smoother `min ‖y − T γ − Z* δ‖² + λ ‖δ‖²`.
    pub fn smooth(&self, y: &DVector<f64>, lambda: f64) -> Result<DVector<f64>> {
        let n = self.train.len();
        if y.len() != n {
            return invalid(format!("{} values for {n} training sites", y.len()));
        }
        if !(lambda >= 0.0) {
            return invalid("smoothing parameter must be non-negative");
        }
        let k = self.penalized.ncols();
        let mut x = DMatrix::zeros(n + k, 3 + k);
        for (i, c) in self.train.iter().enumerate() {
            x[(i, 0)] = 1.0;
            x[(i, 1)] = c.x;
            x[(i, 2)] = c.y;
        }
        x.view_mut((0, 3), (n, k)).copy_from(&self.penalized);
        for j in 0..k {
            x[(n + j, 3 + j)] = lambda.sqrt();
        }
        let mut rhs = DVector::zeros(n + k);
        rhs.rows_mut(0, n).copy_from(y);
        let svd = x.clone().svd(true, true);
        let tol = 1e-13 * svd.singular_values.max();
        let coef = svd
            .solve(&rhs, tol)
            .map_err(|e| Error::Degenerate(format!("TPRS smoother: {e}")))?;
        Ok(x.rows(0, n) * coef)
    }
}

fn tprs_polynomial(st: &Standardization, coords: &[Coord]) -> DMatrix<f64> {
    DMatrix::from_fn(coords.len(), 3, |i, j| {
        let c = st.apply(&coords[i]);
        match j {
            0 => 1.0,
            1 => c.x,
            _ => c.y,
        }
    })
}

/// Thin plate regression spline basis of rank `k` over the given sites.
pub fn tprs_basis(coords: &[Coord], k: usize) -> Result<TprsBasis> {
    let n = coords.len();
    if k < 4 || k > n {
        return invalid(format!("TPRS rank must be in 4..={n}, got {k}"));
    }
    let st = Standardization::fit(coords)?;
    let t = tprs_polynomial(&st, coords);
    if !dependent_columns(&t, 1e-9).is_empty() {
        return Err(Error::Degenerate("sites are collinear".into()));
    }
    let train: Vec<Coord> = coords.iter().map(|c| st.apply(c)).collect();
    let e = DMatrix::from_fn(n, n, |i, j| tprs_eta(train[i].dist(&train[j])));
    let (vals, vecs) = sorted_eigen(&e, f64::abs);
    let mut warnings = Vec::new();
    if k < n {
        let (a, b) = (vals[k - 1].abs(), vals[k].abs());
        if (a - b) <= 1e-8 * a.max(f64::MIN_POSITIVE) {
            warnings.push(format!(
                "eigenvalues {} and {} tie at the rank-{k} truncation",
                vals[k - 1],
                vals[k]
            ));
        }
    }
    let uk = vecs.columns(0, k).into_owned();
    let dk = vals.rows(0, k).into_owned();

    // W_K: orthonormal basis of the null space of Tᵀ U_K.
    let b = uk.transpose() * &t; // K x 3
    let (bv, bvecs) = sorted_eigen(&(&b * b.transpose()), |x| x);
    let wk = bvecs.columns(3, k - 3).into_owned();
    if bv[2] <= 1e-10 * bv[0] {
        return Err(Error::Degenerate(
            "polynomial space not resolved by the truncated eigenbasis".into(),
        ));
    }

    let dw = DMatrix::from_fn(k, k - 3, |i, j| dk[i] * wk[(i, j)]);
    let mut mpen = wk.transpose() * &dw;
    mpen = (&mpen + mpen.transpose()) * 0.5;
    let min_eig = mpen.symmetric_eigenvalues().min();
    if !(min_eig > 0.0) {
        return Err(Error::NotPositiveDefinite {
            block: "TPRS penalty W_Kᵀ D_K W_K".into(),
        });
    }
    let (m_inv_sqrt, _) = inv_sqrt_sym(&mpen, 0.0)?;
    let penalized = &uk * &dw * &m_inv_sqrt;
    let coef_map = &uk * &wk * &m_inv_sqrt;
    Ok(TprsBasis {
        rank: k,
        standardization: st,
        train,
        penalized,
        coef_map,
        warnings,
    })
}

/// LRK basis `Z Ω̃^{-1/2}` at `coords`; also returns the number of knot-matrix
/// eigen-directions dropped by the floor.
pub fn lrk_basis(coords: &[Coord], knots: &KnotSet, range: f64) -> Result<(DMatrix<f64>, usize)> {
    let (inv_sqrt, dropped) = lrk_knot_inv_sqrt(knots, range)?;
    let z = pairwise_distances(coords, &knots.knots)?.map(|d| corr(d, range));
    Ok((z * inv_sqrt, dropped))
}

fn lrk_knot_inv_sqrt(knots: &KnotSet, range: f64) -> Result<(DMatrix<f64>, usize)> {
    if !(range > 0.0) || !range.is_finite() {
        return invalid(format!("range must be positive, got {range}"));
    }
    let omega = pairwise_distances(&knots.knots, &knots.knots)?.map(|d| corr(d, range));
    inv_sqrt_sym(&omega, EIGEN_FLOOR_REL)
}

/// Block-diagonal `Z_B` with `m` copies of `penalized`.
pub fn assemble_z_b(penalized: &DMatrix<f64>, m: usize) -> Result<DMatrix<f64>> {
    if m < 1 {
        return invalid("need at least one trend");
    }
    let (n, k) = penalized.shape();
    let mut out = DMatrix::zeros(m * n, m * k);
    for j in 0..m {
        out.view_mut((j * n, j * k), (n, k)).copy_from(penalized);
    }
    Ok(out)
}

/// A realized β-field representation over a fixed set of training sites.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SpatialBasis {
    None,
    Lrk { knots: KnotSet },
    Tprs(TprsBasis),
    Full { sites: Vec<Coord> },
}

impl SpatialBasis {
    pub fn kind(&self) -> BasisKind {
        match self {
            Self::None => BasisKind::None,
            Self::Lrk { .. } => BasisKind::Lrk,
            Self::Tprs(_) => BasisKind::Tprs,
            Self::Full { .. } => BasisKind::Full,
        }
    }

    pub fn range_dependent(&self) -> bool {
        matches!(self, Self::Lrk { .. } | Self::Full { .. })
    }

    pub fn has_field(&self) -> bool {
        !matches!(self, Self::None)
    }

    /// Extra fixed-effect columns appended to every `X_j`: the standardized
    /// coordinates for TPRS (the intercept is already in `X_j`), none otherwise.
    pub fn unpenalized_at(&self, coords: &[Coord]) -> DMatrix<f64> {
        match self {
            Self::Tprs(t) => t.polynomial(coords).columns(1, 2).into_owned(),
            _ => DMatrix::zeros(coords.len(), 0),
        }
    }

    pub fn n_unpenalized(&self) -> usize {
        match self {
            Self::Tprs(_) => 2,
            _ => 0,
        }
    }

    /// Loading `L` at the training sites `train` with `L Lᵀ` equal to the
    /// unit-sill β-field covariance: the penalized basis for LRK/TPRS, a
    /// Cholesky factor of the correlation matrix for the full-rank field.
    pub fn loading(&self, train: &[Coord], range: Option<f64>) -> Result<DMatrix<f64>> {
        match self {
            Self::None => Ok(DMatrix::zeros(train.len(), 0)),
            Self::Tprs(t) => Ok(t.penalized.clone()),
            Self::Lrk { knots } => Ok(lrk_basis(train, knots, need_range(range)?)?.0),
            Self::Full { sites } => {
                let r = need_range(range)?;
                let c = pairwise_distances(sites, sites)?.map(|d| corr(d, r));
                let (ch, _) = cholesky_with_jitter(c, 1.0, "full-rank β-field correlation")?;
                Ok(ch.l())
            }
        }
    }

    /// Basis rows at arbitrary sites (not defined for the full-rank field).
    pub fn penalized_at(&self, coords: &[Coord], range: Option<f64>) -> Result<DMatrix<f64>> {
        match self {
            Self::None => Ok(DMatrix::zeros(coords.len(), 0)),
            Self::Tprs(t) => Ok(t.penalized_at(coords)),
            Self::Lrk { knots } => Ok(lrk_basis(coords, knots, need_range(range)?)?.0),
            Self::Full { .. } => invalid("the full-rank field has no finite basis"),
        }
    }

    /// Unit-sill β-field cross-covariance `k(a_i, b_j)`.
    pub fn cross_kernel(&self, a: &[Coord], b: &[Coord], range: Option<f64>) -> Result<DMatrix<f64>> {
        match self {
            Self::None => Ok(DMatrix::zeros(a.len(), b.len())),
            Self::Full { .. } => {
                let r = need_range(range)?;
                Ok(pairwise_distances(a, b)?.map(|d| corr(d, r)))
            }
            _ => {
                let pa = self.penalized_at(a, range)?;
                let pb = self.penalized_at(b, range)?;
                Ok(pa * pb.transpose())
            }
        }
    }

    /// Unit-sill β-field variance `k(a_i, a_i)`.
    pub fn kernel_diag(&self, a: &[Coord], range: Option<f64>) -> Result<Vec<f64>> {
        match self {
            Self::None => Ok(vec![0.0; a.len()]),
            Self::Full { .. } => Ok(vec![1.0; a.len()]),
            _ => {
                let p = self.penalized_at(a, range)?;
                Ok(p.row_iter().map(|r| r.norm_squared()).collect())
            }
        }
    }
}

fn need_range(range: Option<f64>) -> Result<f64> {
    match range {
        Some(r) if r > 0.0 && r.is_finite() => Ok(r),
        _ => invalid("this basis needs a positive range"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::KnotSource;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn layout(n: usize, seed: u64) -> Vec<Coord> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| Coord::new(rng.random_range(0.0..30.0), rng.random_range(0.0..30.0)))
            .collect()
    }

    fn corr_of(a: &[Coord], b: &[Coord], r: f64) -> DMatrix<f64> {
        pairwise_distances(a, b).unwrap().map(|d| (-d / r).exp())
    }

    #[test]
    fn eta_sign_structure() {
        assert_eq!(tprs_eta(1.0), 0.0);
        assert_eq!(tprs_eta(0.0), 0.0);
        for r in [0.1, 0.5, 0.9] {
            assert!(tprs_eta(r) < 0.0);
        }
        for r in [1.1, 2.0, 10.0] {
            assert!(tprs_eta(r) > 0.0);
        }
    }

    #[test]
    fn lrk_knots_at_sites_is_exact() {
        let s = layout(10, 1);
        let knots = KnotSet::new(s.clone(), KnotSource::MonitorSites).unwrap();
        let (p, dropped) = lrk_basis(&s, &knots, 8.0).unwrap();
        assert_eq!(dropped, 0);
        let diff = &p * p.transpose() - corr_of(&s, &s, 8.0);
        assert!(diff.abs().max() < 1e-8);
    }

    #[test]
    fn lrk_single_knot_at_site() {
        let s = layout(6, 2);
        let knots = KnotSet::new(vec![s[3]], KnotSource::MonitorSites).unwrap();
        let (p, _) = lrk_basis(&s, &knots, 5.0).unwrap();
        assert!((p[(3, 0)] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn lrk_never_exceeds_full_variance() {
        let s = layout(20, 3);
        let knots = KnotSet::new(layout(5, 4), KnotSource::Grid).unwrap();
        let (p, _) = lrk_basis(&s, &knots, 10.0).unwrap();
        // Dense oracle: Z Ω̃⁻¹ Zᵀ via an explicit inverse.
        let z = corr_of(&s, &knots.knots, 10.0);
        let om = corr_of(&knots.knots, &knots.knots, 10.0);
        let approx = &z * om.try_inverse().unwrap() * z.transpose();
        assert!((&p * p.transpose() - &approx).abs().max() < 1e-8);
        for i in 0..20 {
            assert!(approx[(i, i)] <= 1.0 + 1e-8);
        }
    }

    #[test]
    fn lrk_error_shrinks_with_nested_knots() {
        let s = layout(25, 5);
        let full = corr_of(&s, &s, 12.0);
        let mut last = f64::INFINITY;
        for k in [3, 6, 10, 15, 25] {
            let knots = KnotSet::new(s[..k].to_vec(), KnotSource::MonitorSites).unwrap();
            let (p, _) = lrk_basis(&s, &knots, 12.0).unwrap();
            let err = (&full - &p * p.transpose()).norm();
            assert!(err <= last + 1e-8);
            last = err;
        }
    }

    #[test]
    fn lrk_translation_invariant() {
        let s = layout(12, 6);
        let kn = layout(4, 7);
        let shift = |v: &[Coord]| v.iter().map(|c| Coord::new(c.x + 100.0, c.y - 40.0)).collect::<Vec<_>>();
        let (a, _) = lrk_basis(&s, &KnotSet::new(kn.clone(), KnotSource::Grid).unwrap(), 9.0).unwrap();
        let (b, _) = lrk_basis(&shift(&s), &KnotSet::new(shift(&kn), KnotSource::Grid).unwrap(), 9.0).unwrap();
        assert!((a - b).abs().max() < 1e-10);
    }

    #[test]
    fn tprs_coefficient_constraint_holds() {
        for seed in 0..5 {
            let s = layout(15, 10 + seed);
            for k in [4, 8, 15] {
                let b = tprs_basis(&s, k).unwrap();
                assert_eq!(b.penalized.ncols(), k - 3);
                let t = b.polynomial(&s);
                assert!((t.transpose() * &b.coef_map).abs().max() < 1e-8);
                assert!(b.penalized.iter().all(|v| v.is_finite()));
            }
        }
    }

    #[test]
    fn tprs_rows_at_training_sites_match() {
        let s = layout(14, 11);
        let b = tprs_basis(&s, 9).unwrap();
        assert!((b.penalized_at(&s) - &b.penalized).abs().max() < 1e-8);
    }

    #[test]
    fn tprs_penalty_reparameterization() {
        // ‖δ‖² equals ζ*ᵀ (W_Kᵀ D_K W_K) ζ* for ζ* = M^{-1/2} δ; checked as
        // δᵀ Pᵀ E P δ = ‖δ‖² since Pᵀ E P = I.
        let s = layout(16, 12);
        let b = tprs_basis(&s, 10).unwrap();
        let e = DMatrix::from_fn(16, 16, |i, j| tprs_eta(b.train[i].dist(&b.train[j])));
        let gram = b.coef_map.transpose() * e * &b.coef_map;
        assert!((gram - DMatrix::identity(7, 7)).abs().max() < 1e-8);
    }

    #[test]
    fn tprs_rejects_collinear_and_bad_rank() {
        let line: Vec<Coord> = (0..8).map(|i| Coord::new(i as f64, 2.0 * i as f64)).collect();
        assert!(matches!(tprs_basis(&line, 5), Err(Error::Degenerate(_))));
        let s = layout(6, 13);
        assert!(tprs_basis(&s, 3).is_err());
        assert!(tprs_basis(&s, 7).is_err());
    }

    #[test]
    fn z_b_blocks() {
        let p = DMatrix::from_row_slice(3, 2, &[1., 2., 3., 4., 5., 6.]);
        assert_eq!(assemble_z_b(&p, 1).unwrap(), p);
        let zb = assemble_z_b(&p, 2).unwrap();
        assert_eq!(zb.shape(), (6, 4));
        // Indicator on the second block's first column picks p's first column
        // in rows 3..6 only.
        let mut e = DMatrix::zeros(4, 1);
        e[(2, 0)] = 1.0;
        let col = &zb * e;
        assert_eq!(col.rows(0, 3).iter().sum::<f64>(), 0.0);
        assert_eq!(col.rows(3, 3).into_owned(), p.columns(0, 1).into_owned());
        assert_eq!(assemble_z_b(&DMatrix::zeros(3, 0), 2).unwrap().ncols(), 0);
        assert!(assemble_z_b(&p, 0).is_err());
    }

    #[test]
    fn range_mode_parsing() {
        assert_eq!("est".parse::<RangeMode>().unwrap(), RangeMode::Estimated);
        assert_eq!("fixed:max/4".parse::<RangeMode>().unwrap(), RangeMode::FixedFraction(0.25));
        assert_eq!("fixed:12.5".parse::<RangeMode>().unwrap(), RangeMode::Fixed(12.5));
        assert!("fixed:-1".parse::<RangeMode>().is_err());
        for s in ["est", "fixed:max", "fixed:max/2", "fixed:max/8", "fixed:3.5"] {
            assert_eq!(s.parse::<RangeMode>().unwrap().to_string(), s);
        }
    }

    #[test]
    fn spec_invariants() {
        assert!(SpatialBasisSpec::tprs(3).validate().is_err());
        assert!(SpatialBasisSpec::tprs(4).validate().is_ok());
        let mut none = SpatialBasisSpec::none();
        none.rank = 2;
        assert!(none.validate().is_err());
        let kn = KnotSet::new(layout(3, 1), KnotSource::Grid).unwrap();
        assert!(SpatialBasisSpec::lrk(4, KnotPlacement::Given(kn), RangeMode::Estimated)
            .validate()
            .is_err());
    }
}
