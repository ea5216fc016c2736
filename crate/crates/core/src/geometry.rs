//! Planar site geometry: site tables, distances, knot selection and grid
//! candidates. Coordinates are projected kilometres.

use std::collections::HashSet;
use std::fmt;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Coord {
    pub x: f64,
    pub y: f64,
}

impl Coord {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dist(&self, other: &Coord) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Monitor class, used to group sites for cross-validation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SiteKind {
    Fixed,
    Snapshot,
    Home,
}

impl SiteKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            SiteKind::Fixed => "fixed",
            SiteKind::Snapshot => "snapshot",
            SiteKind::Home => "home",
        }
    }
}

impl fmt::Display for SiteKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for SiteKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "fixed" | "aqs" | "aqs_fixed" => Ok(SiteKind::Fixed),
            "snapshot" => Ok(SiteKind::Snapshot),
            "home" => Ok(SiteKind::Home),
            other => invalid(format!("unknown site kind `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Site {
    pub id: String,
    pub coord: Coord,
    pub kind: SiteKind,
    pub covariates: Vec<f64>,
}

/// Sites with their land-use covariates. Every site carries the same
/// covariate columns; per-trend design matrices select from them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteTable {
    pub covariate_names: Vec<String>,
    pub sites: Vec<Site>,
}

impl SiteTable {
    pub fn new(covariate_names: Vec<String>, sites: Vec<Site>) -> Result<Self> {
        let mut seen = HashSet::new();
        for s in &sites {
            if !seen.insert(s.id.as_str()) {
                return invalid(format!("duplicate site id `{}`", s.id));
            }
            if !s.coord.x.is_finite() || !s.coord.y.is_finite() {
                return invalid(format!("site `{}` has non-finite coordinates", s.id));
            }
            if s.covariates.len() != covariate_names.len() {
                return invalid(format!(
                    "site `{}` has {} covariates, expected {}",
                    s.id,
                    s.covariates.len(),
                    covariate_names.len()
                ));
            }
        }
        Ok(Self {
            covariate_names,
            sites,
        })
    }

    pub fn len(&self) -> usize {
        self.sites.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }

    pub fn coords(&self) -> Vec<Coord> {
        self.sites.iter().map(|s| s.coord).collect()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.sites.iter().position(|s| s.id == id)
    }

    pub fn get(&self, id: &str) -> Option<&Site> {
        self.sites.iter().find(|s| s.id == id)
    }

    pub fn ids_of_kind(&self, kind: SiteKind) -> Vec<String> {
        self.sites
            .iter()
            .filter(|s| s.kind == kind)
            .map(|s| s.id.clone())
            .collect()
    }

    /// Table restricted to the given ids, in the table's own order.
    pub fn subset(&self, keep: &HashSet<&str>) -> SiteTable {
        SiteTable {
            covariate_names: self.covariate_names.clone(),
            sites: self
                .sites
                .iter()
                .filter(|s| keep.contains(s.id.as_str()))
                .cloned()
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KnotSource {
    MonitorSites,
    Grid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnotSet {
    pub knots: Vec<Coord>,
    pub source: KnotSource,
}

impl KnotSet {
    pub fn new(knots: Vec<Coord>, source: KnotSource) -> Result<Self> {
        if knots.is_empty() {
            return Err(Error::Empty("knot set".into()));
        }
        for i in 0..knots.len() {
            for j in 0..i {
                if knots[i] == knots[j] {
                    return invalid(format!("knots {j} and {i} coincide"));
                }
            }
        }
        Ok(Self { knots, source })
    }

    pub fn len(&self) -> usize {
        self.knots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.knots.is_empty()
    }
}

/// Euclidean distance matrix between two point lists.
pub fn pairwise_distances(a: &[Coord], b: &[Coord]) -> Result<DMatrix<f64>> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Empty("distance input".into()));
    }
    if a.iter().chain(b).any(|c| !c.x.is_finite() || !c.y.is_finite()) {
        return invalid("non-finite coordinate in distance input");
    }
    Ok(DMatrix::from_fn(a.len(), b.len(), |i, j| a[i].dist(&b[j])))
}

pub fn max_distance(points: &[Coord]) -> f64 {
    let mut best = 0.0f64;
    for i in 0..points.len() {
        for j in 0..i {
            best = best.max(points[i].dist(&points[j]));
        }
    }
    best
}

/// Sum over candidates of the distance to the nearest chosen point.
pub fn coverage_criterion(candidates: &[Coord], chosen: &[usize]) -> f64 {
    candidates
        .iter()
        .map(|c| {
            chosen
                .iter()
                .map(|&k| c.dist(&candidates[k]))
                .fold(f64::INFINITY, f64::min)
        })
        .sum()
}

/// Space-filling knot selection: greedy construction followed by point-swap
/// descent on the coverage criterion. The seed fixes the order in which knot
/// slots are revisited during swaps; the best swap for a slot is taken with
/// ties going to the lowest candidate index.
pub fn select_knots(
    candidates: &[Coord],
    k: usize,
    seed: u64,
    source: KnotSource,
) -> Result<KnotSet> {
    if k == 0 {
        return invalid("knot count must be at least 1");
    }
    // Distinct candidates only, keeping first occurrences.
    let mut pts: Vec<Coord> = Vec::with_capacity(candidates.len());
    for c in candidates {
        if !pts.contains(c) {
            pts.push(*c);
        }
    }
    if k > pts.len() {
        return invalid(format!(
            "requested {k} knots from {} distinct candidates",
            pts.len()
        ));
    }
    let m = pts.len();
    let d = DMatrix::from_fn(m, m, |i, j| pts[i].dist(&pts[j]));

    // Greedy.
    let mut chosen: Vec<usize> = Vec::with_capacity(k);
    let mut in_set = vec![false; m];
    let mut nearest = vec![f64::INFINITY; m];
    for _ in 0..k {
        let mut best = (f64::INFINITY, usize::MAX);
        for c in 0..m {
            if in_set[c] {
                continue;
            }
            let total: f64 = (0..m).map(|i| nearest[i].min(d[(i, c)])).sum();
            if total < best.0 {
                best = (total, c);
            }
        }
        let c = best.1;
        in_set[c] = true;
        chosen.push(c);
        for i in 0..m {
            nearest[i] = nearest[i].min(d[(i, c)]);
        }
    }

    // Swap descent.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut current = coverage_from(&d, &chosen);
    loop {
        let mut slots: Vec<usize> = (0..k).collect();
        slots.shuffle(&mut rng);
        let mut improved = false;
        for &slot in &slots {
            // Distance to the nearest knot other than the one in `slot`.
            let others: Vec<usize> = chosen
                .iter()
                .enumerate()
                .filter(|&(s, _)| s != slot)
                .map(|(_, &c)| c)
                .collect();
            let without: Vec<f64> = (0..m)
                .map(|i| {
                    others
                        .iter()
                        .map(|&c| d[(i, c)])
                        .fold(f64::INFINITY, f64::min)
                })
                .collect();
            let mut best = (current, usize::MAX);
            for c in 0..m {
                if in_set[c] {
                    continue;
                }
                let total: f64 = (0..m).map(|i| without[i].min(d[(i, c)])).sum();
                if total < best.0 - 1e-12 * current.max(1.0) {
                    best = (total, c);
                }
            }
            if best.1 != usize::MAX {
                in_set[chosen[slot]] = false;
                in_set[best.1] = true;
                chosen[slot] = best.1;
                current = best.0;
                improved = true;
            }
        }
        if !improved {
            break;
        }
    }
    chosen.sort_unstable();
    KnotSet::new(chosen.into_iter().map(|i| pts[i]).collect(), source)
}

fn coverage_from(d: &DMatrix<f64>, chosen: &[usize]) -> f64 {
    (0..d.nrows())
        .map(|i| {
            chosen
                .iter()
                .map(|&c| d[(i, c)])
                .fold(f64::INFINITY, f64::min)
        })
        .sum()
}

fn cross(o: Coord, a: Coord, b: Coord) -> f64 {
    (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x)
}

/// Convex hull in counter-clockwise order (Andrew's monotone chain).
pub fn convex_hull(points: &[Coord]) -> Vec<Coord> {
    let mut pts: Vec<Coord> = points.to_vec();
    pts.sort_by(|a, b| {
        a.x.partial_cmp(&b.x)
            .unwrap()
            .then(a.y.partial_cmp(&b.y).unwrap())
    });
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut lower: Vec<Coord> = Vec::new();
    for &p in &pts {
        while lower.len() >= 2 && cross(lower[lower.len() - 2], lower[lower.len() - 1], p) <= 0.0 {
            lower.pop();
        }
        lower.push(p);
    }
    let mut upper: Vec<Coord> = Vec::new();
    for &p in pts.iter().rev() {
        while upper.len() >= 2 && cross(upper[upper.len() - 2], upper[upper.len() - 1], p) <= 0.0 {
            upper.pop();
        }
        upper.push(p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

fn hull_area(hull: &[Coord]) -> f64 {
    let n = hull.len();
    (0..n)
        .map(|i| {
            let (a, b) = (hull[i], hull[(i + 1) % n]);
            a.x * b.y - b.x * a.y
        })
        .sum::<f64>()
        / 2.0
}

/// Whether `p` lies inside (or on) a counter-clockwise convex polygon.
pub fn in_convex_hull(hull: &[Coord], p: Coord, tol: f64) -> bool {
    let n = hull.len();
    (0..n).all(|i| {
        let (a, b) = (hull[i], hull[(i + 1) % n]);
        let edge = a.dist(&b);
        cross(a, b, p) >= -tol * edge.max(1.0)
    })
}

/// Centres of the `cell_km` grid cells, anchored at the lower-left corner of
/// the bounding box, that fall inside the convex hull of `sites`.
pub fn grid_candidates(sites: &[Coord], cell_km: f64) -> Result<Vec<Coord>> {
    if !(cell_km > 0.0) || !cell_km.is_finite() {
        return invalid("grid cell size must be positive");
    }
    let hull = convex_hull(sites);
    if hull.len() < 3 {
        return Err(Error::Degenerate(
            "fewer than three non-collinear sites".into(),
        ));
    }
    let span = hull
        .iter()
        .flat_map(|a| hull.iter().map(move |b| a.dist(b)))
        .fold(0.0, f64::max);
    if hull_area(&hull) <= 1e-12 * span * span {
        return Err(Error::Degenerate("sites are collinear".into()));
    }
    let (xmin, xmax) = hull
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), c| {
            (lo.min(c.x), hi.max(c.x))
        });
    let (ymin, ymax) = hull
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), c| {
            (lo.min(c.y), hi.max(c.y))
        });
    let nx = ((xmax - xmin) / cell_km).ceil().max(1.0) as usize;
    let ny = ((ymax - ymin) / cell_km).ceil().max(1.0) as usize;
    let mut out = Vec::new();
    for r in 0..ny {
        for c in 0..nx {
            let p = Coord::new(
                xmin + (c as f64 + 0.5) * cell_km,
                ymin + (r as f64 + 0.5) * cell_km,
            );
            if in_convex_hull(&hull, p, 1e-9) {
                out.push(p);
            }
        }
    }
    if out.is_empty() {
        return Err(Error::Degenerate(
            "no grid cell centre falls inside the hull".into(),
        ));
    }
    Ok(out)
}
