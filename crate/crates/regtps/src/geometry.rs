//! Spatial point sets, distances, bounding domains and prediction grids.
//!
//! Everything here is immutable after construction and shared read-only
//! across sampler chains.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A location in the plane, in user units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point2 {
    pub s1: f64,
    pub s2: f64,
}

impl Point2 {
    pub fn new(s1: f64, s2: f64) -> Result<Self> {
        if !s1.is_finite() || !s2.is_finite() {
            return Err(Error::invalid(format!(
                "point coordinates must be finite, got ({s1}, {s2})"
            )));
        }
        Ok(Point2 { s1, s2 })
    }

    pub fn distance(&self, other: &Point2) -> f64 {
        (self.s1 - other.s1).hypot(self.s2 - other.s2)
    }
}

/// What a point set indexes: observations, spline knots, mesh nodes or a
/// prediction grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PointRole {
    Observation,
    Knot,
    MeshNode,
    Grid,
}

/// An ordered, non-empty list of locations with a role tag.
///
/// Duplicate points are allowed for observations (stations may coincide)
/// but rejected for knots, where they would make the TPS kernel matrix
/// singular.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointSet {
    points: Vec<Point2>,
    role: PointRole,
}

impl PointSet {
    pub fn new(points: Vec<Point2>, role: PointRole) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::invalid("point set must be non-empty"));
        }
        if role == PointRole::Knot {
            // O(n^2) scan; knot sets are small (<= a few hundred).
            for i in 0..points.len() {
                for j in (i + 1)..points.len() {
                    if points[i].distance(&points[j]) == 0.0 {
                        return Err(Error::invalid(format!(
                            "duplicate knot at index {j} (same as {i})"
                        )));
                    }
                }
            }
        }
        Ok(PointSet { points, role })
    }

    pub fn from_coords(coords: &[(f64, f64)], role: PointRole) -> Result<Self> {
        let points = coords
            .iter()
            .map(|&(a, b)| Point2::new(a, b))
            .collect::<Result<Vec<_>>>()?;
        PointSet::new(points, role)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn role(&self) -> PointRole {
        self.role
    }

    pub fn points(&self) -> &[Point2] {
        &self.points
    }

    /// Same points under a different role tag. Fails if the new role's
    /// invariants (e.g. distinct knots) do not hold.
    pub fn with_role(&self, role: PointRole) -> Result<PointSet> {
        PointSet::new(self.points.clone(), role)
    }

    /// Axis-aligned bounds of the points, optionally inflated by a margin
    /// fraction per side.
    pub fn bounds(&self, margin_fraction: f64) -> Result<BoundingDomain> {
        let (mut min1, mut max1) = (f64::INFINITY, f64::NEG_INFINITY);
        let (mut min2, mut max2) = (f64::INFINITY, f64::NEG_INFINITY);
        for p in &self.points {
            min1 = min1.min(p.s1);
            max1 = max1.max(p.s1);
            min2 = min2.min(p.s2);
            max2 = max2.max(p.s2);
        }
        // Degenerate extents are widened so the domain stays proper.
        if max1 <= min1 {
            max1 = min1 + 1.0;
        }
        if max2 <= min2 {
            max2 = min2 + 1.0;
        }
        let d = BoundingDomain::new(min1, max1, min2, max2)?;
        if margin_fraction > 0.0 {
            Ok(d.with_margin(margin_fraction))
        } else {
            Ok(d)
        }
    }
}

/// A rectangular domain [min1, max1] x [min2, max2].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingDomain {
    pub min1: f64,
    pub max1: f64,
    pub min2: f64,
    pub max2: f64,
}

impl BoundingDomain {
    pub fn new(min1: f64, max1: f64, min2: f64, max2: f64) -> Result<Self> {
        for v in [min1, max1, min2, max2] {
            if !v.is_finite() {
                return Err(Error::invalid("domain bounds must be finite"));
            }
        }
        if max1 <= min1 || max2 <= min2 {
            return Err(Error::invalid(format!(
                "domain bounds must satisfy max > min, got [{min1}, {max1}] x [{min2}, {max2}]"
            )));
        }
        Ok(BoundingDomain {
            min1,
            max1,
            min2,
            max2,
        })
    }

    pub fn unit_square() -> Self {
        BoundingDomain {
            min1: 0.0,
            max1: 1.0,
            min2: 0.0,
            max2: 1.0,
        }
    }

    /// Inflate each side by `fraction` of its extent.
    pub fn with_margin(&self, fraction: f64) -> BoundingDomain {
        let m1 = fraction * (self.max1 - self.min1);
        let m2 = fraction * (self.max2 - self.min2);
        BoundingDomain {
            min1: self.min1 - m1,
            max1: self.max1 + m1,
            min2: self.min2 - m2,
            max2: self.max2 + m2,
        }
    }

    pub fn extent(&self) -> (f64, f64) {
        (self.max1 - self.min1, self.max2 - self.min2)
    }

    pub fn diameter(&self) -> f64 {
        let (e1, e2) = self.extent();
        e1.hypot(e2)
    }

    pub fn area(&self) -> f64 {
        let (e1, e2) = self.extent();
        e1 * e2
    }

    pub fn contains(&self, p: &Point2) -> bool {
        p.s1 >= self.min1 && p.s1 <= self.max1 && p.s2 >= self.min2 && p.s2 <= self.max2
    }
}

/// Euclidean distance matrix between two point sets, |a| x |b|.
pub fn pairwise_distances(a: &PointSet, b: &PointSet) -> DMatrix<f64> {
    DMatrix::from_fn(a.len(), b.len(), |i, j| {
        a.points()[i].distance(&b.points()[j])
    })
}

/// Row-major regular lattice of `resolution`^2 points spanning the domain,
/// edges included.
pub fn make_grid(domain: &BoundingDomain, resolution: usize) -> Result<PointSet> {
    if resolution < 2 {
        return Err(Error::invalid(format!(
            "grid resolution must be >= 2, got {resolution}"
        )));
    }
    let n = resolution;
    let (e1, e2) = domain.extent();
    let mut points = Vec::with_capacity(n * n);
    for j in 0..n {
        let s2 = domain.min2 + e2 * j as f64 / (n - 1) as f64;
        for i in 0..n {
            let s1 = domain.min1 + e1 * i as f64 / (n - 1) as f64;
            points.push(Point2 { s1, s2 });
        }
    }
    PointSet::new(points, PointRole::Grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn distances_three_four_five() {
        let a = PointSet::from_coords(&[(0.0, 0.0), (3.0, 4.0)], PointRole::Observation).unwrap();
        let d = pairwise_distances(&a, &a);
        assert_eq!(d[(0, 0)], 0.0);
        assert_eq!(d[(0, 1)], 5.0);
        assert_eq!(d[(1, 0)], 5.0);
        assert_eq!(d[(1, 1)], 0.0);
    }

    #[test]
    fn distances_identity_case() {
        let a = PointSet::from_coords(&[(1.0, 1.0)], PointRole::Observation).unwrap();
        let d = pairwise_distances(&a, &a);
        assert_eq!(d[(0, 0)], 0.0);
    }

    #[test]
    fn distances_match_scalar_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        let coords: Vec<(f64, f64)> = (0..10).map(|_| (rng.gen::<f64>(), rng.gen())).collect();
        let a = PointSet::from_coords(&coords, PointRole::Observation).unwrap();
        let d = pairwise_distances(&a, &a);
        for i in 0..10 {
            for j in 0..10 {
                let dx = coords[i].0 - coords[j].0;
                let dy = coords[i].1 - coords[j].1;
                let expect = (dx * dx + dy * dy).sqrt();
                assert_abs_diff_eq!(d[(i, j)], expect, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn non_finite_coordinate_rejected() {
        assert!(Point2::new(f64::NAN, 0.0).is_err());
        assert!(Point2::new(0.0, f64::INFINITY).is_err());
    }

    #[test]
    fn duplicate_knots_rejected() {
        let err = PointSet::from_coords(&[(0.0, 0.0), (0.0, 0.0)], PointRole::Knot);
        assert!(err.is_err());
        // Same coordinates are fine for observations.
        assert!(PointSet::from_coords(&[(0.0, 0.0), (0.0, 0.0)], PointRole::Observation).is_ok());
    }

    #[test]
    fn grid_resolution_two_unit_square() {
        let g = make_grid(&BoundingDomain::unit_square(), 2).unwrap();
        let expect = [(0.0, 0.0), (1.0, 0.0), (0.0, 1.0), (1.0, 1.0)];
        assert_eq!(g.len(), 4);
        for (p, &(x, y)) in g.points().iter().zip(expect.iter()) {
            assert_eq!((p.s1, p.s2), (x, y));
        }
    }

    #[test]
    fn grid_resolution_three_spacing() {
        let g = make_grid(&BoundingDomain::unit_square(), 3).unwrap();
        assert_eq!(g.len(), 9);
        assert_abs_diff_eq!(g.points()[1].s1 - g.points()[0].s1, 0.5, epsilon = 1e-15);
    }

    #[test]
    fn grid_rectangular_domain_spacing() {
        let d = BoundingDomain::new(0.0, 2.0, 0.0, 1.0).unwrap();
        let g = make_grid(&d, 4).unwrap();
        assert_eq!(g.len(), 16);
        assert_abs_diff_eq!(g.points()[1].s1 - g.points()[0].s1, 2.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(g.points()[4].s2 - g.points()[0].s2, 1.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn grid_resolution_one_rejected() {
        assert!(make_grid(&BoundingDomain::unit_square(), 1).is_err());
    }

    #[test]
    fn degenerate_domain_rejected() {
        assert!(BoundingDomain::new(0.0, 0.0, 0.0, 1.0).is_err());
    }

    proptest! {
        #[test]
        fn triangle_inequality(
            pts in proptest::collection::vec((-50.0f64..50.0, -50.0f64..50.0), 3..12)
        ) {
            let set = PointSet::from_coords(&pts, PointRole::Observation).unwrap();
            let d = pairwise_distances(&set, &set);
            let n = set.len();
            for i in 0..n {
                for j in 0..n {
                    for k in 0..n {
                        prop_assert!(d[(i, j)] <= d[(i, k)] + d[(k, j)] + 1e-9);
                    }
                }
            }
        }

        #[test]
        fn grid_bounds_match_domain(res in 2usize..12, w in 0.1f64..10.0, h in 0.1f64..10.0) {
            let domain = BoundingDomain::new(0.0, w, -h, 0.0).unwrap();
            let g = make_grid(&domain, res).unwrap();
            prop_assert_eq!(g.len(), res * res);
            let min1 = g.points().iter().map(|p| p.s1).fold(f64::INFINITY, f64::min);
            let max1 = g.points().iter().map(|p| p.s1).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!((min1 - domain.min1).abs() <= 1e-12);
            prop_assert!((max1 - domain.max1).abs() <= 1e-12);
        }
    }
}
