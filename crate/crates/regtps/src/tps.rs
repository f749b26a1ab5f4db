//! Thin-plate-spline basis, bending-energy penalty matrix and its
//! one-time eigendecomposition.
//!
//! The basis is the classical low-rank TPS representer system: radial
//! columns `eta(|s - t_j|)` centered at the knots plus the polynomial
//! null space {1, s1, s2}, with the side conditions `T' delta = 0`
//! absorbed through a complement of the polynomial block. The penalized
//! coordinates are whitened so the radial basis columns are orthonormal
//! at the knots; the penalty is zero on the polynomial columns and the
//! bending energy of a fitted surface is exactly `c' S c`.
//!
//! Radial columns are additionally residualized against the polynomial
//! block at the knots, so penalized modes carry no constant or linear
//! trend there; the trend lives entirely in the first `M_NULL` columns.

use std::io::{Read as _, Write as _};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use sha2::{Digest, Sha256};

use crate::error::{check_dim, Error, Result};
use crate::geometry::{pairwise_distances, PointRole, PointSet};

/// Dimension of the polynomial null space in 2-D: {1, s1, s2}.
pub const M_NULL: usize = 3;

/// Eigenvalues at or below `ZERO_EIG_RTOL * lambda_max` count as exactly zero.
pub const ZERO_EIG_RTOL: f64 = 1e-8;

/// The TPS radial kernel `eta(d) = d^2 log d`, extended continuously by
/// `eta(0) = 0`. The 1/(8 pi) factor of the biharmonic fundamental
/// solution is dropped; it is absorbed into the penalty parameter.
pub fn tps_eta(d: f64) -> Result<f64> {
    if d < 0.0 || !d.is_finite() {
        return Err(Error::invalid(format!("tps_eta requires d >= 0, got {d}")));
    }
    if d == 0.0 {
        Ok(0.0)
    } else {
        Ok(d * d * d.ln())
    }
}

fn eta_unchecked(d: f64) -> f64 {
    if d == 0.0 {
        0.0
    } else {
        d * d * d.ln()
    }
}

/// The assembled basis: design evaluation, penalty matrix and its
/// eigensystem. Immutable after construction; decompose once, share
/// read-only across chains.
#[derive(Debug, Clone, PartialEq)]
pub struct TpsBasisSystem {
    knots: PointSet,
    /// Radial coefficient map into the null space of `T'`, whitened so
    /// penalized basis columns are orthonormal at the knots
    /// (n x (n - M_NULL)).
    q2: DMatrix<f64>,
    /// Polynomial correction coefficients for the radial columns
    /// (M_NULL x (n - M_NULL)).
    poly_correction: DMatrix<f64>,
    /// K x K penalty matrix, zero on the polynomial block.
    s: DMatrix<f64>,
    /// Orthonormal eigenvectors of `s`, columns ordered by ascending
    /// eigenvalue, sign fixed so each column's largest-magnitude entry
    /// is positive.
    psi_s: DMatrix<f64>,
    /// Ascending nonnegative eigenvalues; the first M_NULL are exactly 0.
    lambda_s: DVector<f64>,
}

impl TpsBasisSystem {
    pub fn knots(&self) -> &PointSet {
        &self.knots
    }

    /// Total basis count K = M_NULL + (n_knots - M_NULL) = n_knots.
    pub fn basis_count(&self) -> usize {
        self.knots.len()
    }

    pub fn null_dim(&self) -> usize {
        M_NULL
    }

    pub fn penalty(&self) -> &DMatrix<f64> {
        &self.s
    }

    pub fn eigvecs(&self) -> &DMatrix<f64> {
        &self.psi_s
    }

    pub fn eigvals(&self) -> &DVector<f64> {
        &self.lambda_s
    }

    /// Design matrix |points| x K: polynomial columns first, then the
    /// constraint-absorbed, trend-free radial columns.
    pub fn design(&self, points: &PointSet) -> DMatrix<f64> {
        let t_eval = polynomial_block(points);
        let dist = pairwise_distances(points, &self.knots);
        let e_eval = dist.map(eta_unchecked);
        let radial = &e_eval * &self.q2 - &t_eval * &self.poly_correction;
        let mut phi = DMatrix::zeros(points.len(), self.basis_count());
        phi.columns_mut(0, M_NULL).copy_from(&t_eval);
        phi.columns_mut(M_NULL, self.basis_count() - M_NULL)
            .copy_from(&radial);
        phi
    }

    /// Bending energy `c' S c`, clamped at zero against roundoff.
    pub fn bending_energy(&self, c: &DVector<f64>) -> Result<f64> {
        check_dim("bending_energy coefficients", self.basis_count(), c.len())?;
        let v = c.dot(&(&self.s * c));
        if v < -1e-12 {
            return Err(Error::Numerical(format!(
                "bending energy {v} is negative beyond tolerance"
            )));
        }
        Ok(v.max(0.0))
    }

    /// Content hash of the knot coordinates, used to key the binary cache.
    pub fn knot_hash(&self) -> [u8; 32] {
        knot_hash(&self.knots)
    }

    /// Persist (S, Psi_S, lambda_S) plus the design bookkeeping to a
    /// module-private binary file keyed by the knot hash.
    pub fn save_cache(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(CACHE_MAGIC)?;
        f.write_all(&CACHE_VERSION.to_le_bytes())?;
        f.write_all(&self.knot_hash())?;
        write_u64(&mut f, self.knots.len() as u64)?;
        for p in self.knots.points() {
            write_f64(&mut f, p.s1)?;
            write_f64(&mut f, p.s2)?;
        }
        write_matrix(&mut f, &self.q2)?;
        write_matrix(&mut f, &self.poly_correction)?;
        write_matrix(&mut f, &self.s)?;
        write_matrix(&mut f, &self.psi_s)?;
        write_matrix(&mut f, &DMatrix::from_column_slice(self.lambda_s.len(), 1, self.lambda_s.as_slice()))?;
        Ok(())
    }

    /// Load a cached system, verifying version and knot hash.
    pub fn load_cache(path: &Path, knots: &PointSet) -> Result<TpsBasisSystem> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 8];
        f.read_exact(&mut magic)?;
        if &magic != CACHE_MAGIC {
            return Err(Error::Data("basis cache: bad magic".into()));
        }
        let mut ver = [0u8; 4];
        f.read_exact(&mut ver)?;
        if u32::from_le_bytes(ver) != CACHE_VERSION {
            return Err(Error::Data("basis cache: unsupported version".into()));
        }
        let mut hash = [0u8; 32];
        f.read_exact(&mut hash)?;
        if hash != knot_hash(knots) {
            return Err(Error::Data("basis cache: knot hash mismatch".into()));
        }
        let n = read_u64(&mut f)? as usize;
        if n != knots.len() {
            return Err(Error::Data("basis cache: knot count mismatch".into()));
        }
        for _ in 0..n {
            read_f64(&mut f)?;
            read_f64(&mut f)?;
        }
        let q2 = read_matrix(&mut f)?;
        let poly_correction = read_matrix(&mut f)?;
        let s = read_matrix(&mut f)?;
        let psi_s = read_matrix(&mut f)?;
        let lam = read_matrix(&mut f)?;
        Ok(TpsBasisSystem {
            knots: knots.clone(),
            q2,
            poly_correction,
            s,
            psi_s,
            lambda_s: DVector::from_column_slice(lam.as_slice()),
        })
    }
}

/// Build the basis from a knot set. Requires at least `M_NULL + 1`
/// distinct, non-collinear knots.
pub fn build_basis(knots: &PointSet) -> Result<TpsBasisSystem> {
    let knots = knots.with_role(PointRole::Knot)?;
    let n = knots.len();
    if n < M_NULL + 1 {
        return Err(Error::invalid(format!(
            "need at least {} knots, got {n}",
            M_NULL + 1
        )));
    }

    let t = polynomial_block(&knots);

    // Collinear knots make the polynomial block rank deficient.
    let svd = t.clone().svd(false, false);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if smin <= 1e-10 * smax {
        return Err(Error::RankDeficient(
            "knots are collinear: polynomial block is rank deficient".into(),
        ));
    }

    // Orthonormal complement of the polynomial block: eigenvectors of the
    // residual projector with unit eigenvalue.
    let tt = t.transpose() * &t;
    let tt_inv = tt
        .try_inverse()
        .ok_or_else(|| Error::RankDeficient("polynomial Gram matrix is singular".into()))?;
    let hat = &t * &tt_inv * t.transpose();
    let mut proj = DMatrix::identity(n, n) - hat;
    symmetrize(&mut proj);
    let pe = nalgebra::SymmetricEigen::new(proj);
    let mut complement_cols: Vec<usize> = (0..n).filter(|&i| pe.eigenvalues[i] > 0.5).collect();
    if complement_cols.len() != n - M_NULL {
        return Err(Error::Numerical(format!(
            "projector rank {} != {}",
            complement_cols.len(),
            n - M_NULL
        )));
    }
    // Deterministic column order: ascending eigenvalue indices are solver
    // dependent, so order by first significant entry instead.
    complement_cols.sort_unstable();
    let mut q2 = DMatrix::zeros(n, n - M_NULL);
    for (j, &src) in complement_cols.iter().enumerate() {
        let col = pe.eigenvectors.column(src);
        let mut v = col.clone_owned();
        fix_sign(&mut v);
        q2.set_column(j, &v);
    }

    let dist = pairwise_distances(&knots, &knots);
    let e = dist.map(eta_unchecked);

    // Reduced penalty on the radial coefficients.
    let mut s_r = q2.transpose() * &e * &q2;
    symmetrize(&mut s_r);

    // Polynomial correction that removes constant/linear trend from the
    // radial columns at the knots.
    let poly_correction = &tt_inv * t.transpose() * &e * &q2;

    // Eigendecomposition of the reduced kernel block. The residualized
    // radial design at the knots is exactly Q2 S_r, so a unit coefficient
    // along an S_r-eigenvector with eigenvalue g produces a field of norm
    // g with bending energy g: per unit field amplitude the energy is
    // 1/g. Whitening the radial coordinates by S_r^-1 makes the penalized
    // columns orthonormal at the knots (the Demmler-Reinsch form), so
    // coefficient variance equals field variance and truncation by the
    // shrinkage spectrum keeps the dominant smooth modes. In these
    // coordinates the reduced penalty becomes S_r^-1 with the same
    // eigenvectors and eigenvalues 1/g.
    let se = nalgebra::SymmetricEigen::new(s_r);
    let m = n - M_NULL;
    let g_max = se.eigenvalues.max().max(0.0);
    for i in 0..m {
        if se.eigenvalues[i] <= ZERO_EIG_RTOL * g_max {
            return Err(Error::RankDeficient(format!(
                "near-duplicate knots: reduced kernel eigenvalue {} is numerically zero",
                se.eigenvalues[i]
            )));
        }
    }
    let g_inv = DVector::from_fn(m, |i, _| 1.0 / se.eigenvalues[i]);
    let mut s_inv = &se.eigenvectors * DMatrix::from_diagonal(&g_inv) * se.eigenvectors.transpose();
    symmetrize(&mut s_inv);
    let q2 = q2 * &s_inv;
    let poly_correction = poly_correction * &s_inv;

    // Ascending penalty order 1/g, i.e. descending kernel eigenvalue.
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| se.eigenvalues[b].partial_cmp(&se.eigenvalues[a]).unwrap());

    let k = n;
    let mut psi_s = DMatrix::zeros(k, k);
    let mut lambda_s = DVector::zeros(k);
    // Null-space modes first: unit vectors on the polynomial columns.
    for i in 0..M_NULL {
        psi_s[(i, i)] = 1.0;
    }
    for (j, &src) in order.iter().enumerate() {
        let mut v = DVector::zeros(k);
        v.rows_mut(M_NULL, m)
            .copy_from(&se.eigenvectors.column(src));
        fix_sign(&mut v);
        psi_s.set_column(M_NULL + j, &v);
        lambda_s[M_NULL + j] = 1.0 / se.eigenvalues[src];
    }

    let mut s = DMatrix::zeros(k, k);
    s.view_mut((M_NULL, M_NULL), (m, m)).copy_from(&s_inv);

    Ok(TpsBasisSystem {
        knots,
        q2,
        poly_correction,
        s,
        psi_s,
        lambda_s,
    })
}

/// Space-filling knot subset by farthest-point ordering, deterministic
/// given the seed (which only picks the starting point). Returns all
/// points when `max_knots` is not exceeded.
pub fn select_knots(obs: &PointSet, max_knots: usize, seed: u64) -> Result<PointSet> {
    use rand::{Rng, SeedableRng};
    if obs.len() <= max_knots {
        // Deduplicate exact coincidences so the knot invariant holds.
        let mut pts = Vec::new();
        for p in obs.points() {
            if !pts
                .iter()
                .any(|q: &crate::geometry::Point2| q.distance(p) == 0.0)
            {
                pts.push(*p);
            }
        }
        return PointSet::new(pts, PointRole::Knot);
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let start = rng.gen_range(0..obs.len());
    let pts = obs.points();
    let mut chosen = vec![start];
    let mut mindist: Vec<f64> = pts.iter().map(|p| p.distance(&pts[start])).collect();
    while chosen.len() < max_knots {
        let (next, &d) = mindist
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap();
        if d == 0.0 {
            break; // only duplicates remain
        }
        chosen.push(next);
        for (i, p) in pts.iter().enumerate() {
            mindist[i] = mindist[i].min(p.distance(&pts[next]));
        }
    }
    let selected: Vec<_> = chosen.into_iter().map(|i| pts[i]).collect();
    PointSet::new(selected, PointRole::Knot)
}

/// Polynomial design block [1 | s1 | s2].
pub fn polynomial_block(points: &PointSet) -> DMatrix<f64> {
    let n = points.len();
    DMatrix::from_fn(n, M_NULL, |i, j| match j {
        0 => 1.0,
        1 => points.points()[i].s1,
        _ => points.points()[i].s2,
    })
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let (r, c) = m.shape();
    debug_assert_eq!(r, c);
    for i in 0..r {
        for j in (i + 1)..c {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Flip sign so the largest-magnitude entry is positive; ties broken by
/// the first such entry.
fn fix_sign(v: &mut DVector<f64>) {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i].abs() > v[best].abs() {
            best = i;
        }
    }
    if v[best] < 0.0 {
        *v = -&*v;
    }
}

fn knot_hash(knots: &PointSet) -> [u8; 32] {
    let mut h = Sha256::new();
    for p in knots.points() {
        h.update(p.s1.to_le_bytes());
        h.update(p.s2.to_le_bytes());
    }
    h.finalize().into()
}

const CACHE_MAGIC: &[u8; 8] = b"RTPSBAS1";
const CACHE_VERSION: u32 = 2;

fn write_u64(w: &mut impl std::io::Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_f64(w: &mut impl std::io::Write, v: f64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u64(r: &mut impl std::io::Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64(r: &mut impl std::io::Read) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

fn write_matrix(w: &mut impl std::io::Write, m: &DMatrix<f64>) -> Result<()> {
    write_u64(w, m.nrows() as u64)?;
    write_u64(w, m.ncols() as u64)?;
    for v in m.iter() {
        write_f64(w, *v)?;
    }
    Ok(())
}

fn read_matrix(r: &mut impl std::io::Read) -> Result<DMatrix<f64>> {
    let rows = read_u64(r)? as usize;
    let cols = read_u64(r)? as usize;
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows * cols {
        data.push(read_f64(r)?);
    }
    Ok(DMatrix::from_column_slice(rows, cols, &data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::PointRole;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};

    fn random_knots(n: usize, seed: u64) -> PointSet {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let coords: Vec<(f64, f64)> = (0..n).map(|_| (rng.gen::<f64>(), rng.gen())).collect();
        PointSet::from_coords(&coords, PointRole::Knot).unwrap()
    }

    #[test]
    fn eta_values() {
        assert_eq!(tps_eta(0.0).unwrap(), 0.0);
        assert_eq!(tps_eta(1.0).unwrap(), 0.0);
        let e = std::f64::consts::E;
        assert_abs_diff_eq!(tps_eta(e).unwrap(), e * e, epsilon = 1e-12);
        assert!(tps_eta(-0.1).is_err());
    }

    #[test]
    fn corner_knots_null_space_count() {
        let knots =
            PointSet::from_coords(&[(0.0, 0.0), (1.0, 0.0), (0.0, 1.0), (1.0, 1.0)], PointRole::Knot)
                .unwrap();
        let sys = build_basis(&knots).unwrap();
        assert_eq!(sys.basis_count(), 4);
        assert_eq!(sys.null_dim(), 3);
        let zeros = sys.eigvals().iter().filter(|&&l| l == 0.0).count();
        assert_eq!(zeros, 3);
    }

    #[test]
    fn polynomial_coefficients_have_zero_penalty() {
        let sys = build_basis(&random_knots(15, 3)).unwrap();
        let k = sys.basis_count();
        for i in 0..M_NULL {
            let mut c = DVector::zeros(k);
            c[i] = 1.0;
            assert_abs_diff_eq!(sys.bending_energy(&c).unwrap(), 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn penalty_is_psd_on_random_coefficients() {
        let sys = build_basis(&random_knots(20, 5)).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        for _ in 0..1000 {
            let c = DVector::from_fn(sys.basis_count(), |_, _| rng.gen::<f64>() * 2.0 - 1.0);
            assert!(sys.bending_energy(&c).unwrap() >= 0.0);
        }
    }

    #[test]
    fn bending_energy_spectral_identity() {
        let sys = build_basis(&random_knots(18, 7)).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let c = DVector::from_fn(sys.basis_count(), |_, _| rng.gen::<f64>() * 2.0 - 1.0);
        let direct = sys.bending_energy(&c).unwrap();
        let z = sys.eigvecs().transpose() * &c;
        let spectral: f64 = sys
            .eigvals()
            .iter()
            .zip(z.iter())
            .map(|(l, zi)| l * zi * zi)
            .sum();
        assert!((direct - spectral).abs() <= 1e-9 * direct.abs().max(1.0));
    }

    #[test]
    fn bending_energy_zero_for_zero_coefficients() {
        let sys = build_basis(&random_knots(10, 11)).unwrap();
        let c = DVector::zeros(sys.basis_count());
        assert_eq!(sys.bending_energy(&c).unwrap(), 0.0);
    }

    #[test]
    fn eigendecomposition_residual_small() {
        let sys = build_basis(&random_knots(25, 13)).unwrap();
        let lam = DMatrix::from_diagonal(sys.eigvals());
        let recon = sys.eigvecs() * lam * sys.eigvecs().transpose();
        let resid = (sys.penalty() - recon).abs().max();
        assert!(resid <= 1e-8 * sys.penalty().abs().max());
    }

    #[test]
    fn eigvecs_orthonormal() {
        let sys = build_basis(&random_knots(16, 2)).unwrap();
        let gram = sys.eigvecs().transpose() * sys.eigvecs();
        let dev = (gram - DMatrix::identity(sys.basis_count(), sys.basis_count()))
            .abs()
            .max();
        assert!(dev <= 1e-10);
    }

    #[test]
    fn penalized_modes_are_trend_free_at_knots() {
        let sys = build_basis(&random_knots(22, 21)).unwrap();
        let phi = sys.design(sys.knots());
        let t = polynomial_block(sys.knots());
        let scale = phi.abs().max().max(1.0);
        for kidx in 0..sys.basis_count() {
            if sys.eigvals()[kidx] == 0.0 {
                continue;
            }
            let field = &phi * sys.eigvecs().column(kidx);
            let proj = t.transpose() * &field;
            assert!(
                proj.abs().max() <= 1e-8 * scale,
                "mode {kidx} projects onto the polynomial trend: {}",
                proj.abs().max()
            );
        }
    }

    #[test]
    fn collinear_knots_rejected() {
        let knots = PointSet::from_coords(
            &[(0.0, 0.0), (1.0, 1.0), (2.0, 2.0), (3.0, 3.0)],
            PointRole::Observation,
        )
        .unwrap();
        assert!(matches!(build_basis(&knots), Err(Error::RankDeficient(_))));
    }

    #[test]
    fn symmetry_of_penalty() {
        let sys = build_basis(&random_knots(12, 31)).unwrap();
        let dev = (sys.penalty() - sys.penalty().transpose()).abs().max();
        assert!(dev <= 1e-10 * sys.penalty().abs().max());
    }

    #[test]
    fn build_is_deterministic() {
        let knots = random_knots(14, 41);
        let a = build_basis(&knots).unwrap();
        let b = build_basis(&knots).unwrap();
        assert_eq!(a.penalty(), b.penalty());
        assert_eq!(a.eigvecs(), b.eigvecs());
        let pts = random_knots(6, 42).with_role(PointRole::Observation).unwrap();
        assert_eq!(a.design(&pts), b.design(&pts));
    }

    #[test]
    fn design_interpolates_function_space() {
        // A pure polynomial target must be representable exactly through
        // the polynomial columns at arbitrary points.
        let sys = build_basis(&random_knots(9, 55)).unwrap();
        let mut c = DVector::zeros(sys.basis_count());
        c[0] = 2.0;
        c[1] = -1.0;
        c[2] = 0.5;
        let eval = random_knots(7, 56).with_role(PointRole::Observation).unwrap();
        let vals = sys.design(&eval) * &c;
        for (i, p) in eval.points().iter().enumerate() {
            assert_abs_diff_eq!(vals[i], 2.0 - p.s1 + 0.5 * p.s2, epsilon = 1e-10);
        }
    }

    #[test]
    fn farthest_point_knot_selection() {
        let obs = random_knots(50, 61).with_role(PointRole::Observation).unwrap();
        let knots = select_knots(&obs, 20, 1).unwrap();
        assert_eq!(knots.len(), 20);
        let again = select_knots(&obs, 20, 1).unwrap();
        assert_eq!(knots, again);
    }

    #[test]
    fn cache_round_trip() {
        let knots = random_knots(10, 71);
        let sys = build_basis(&knots).unwrap();
        let dir = std::env::temp_dir().join("regtps_cache_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("basis.bin");
        sys.save_cache(&path).unwrap();
        let loaded = TpsBasisSystem::load_cache(&path, &knots).unwrap();
        assert_eq!(sys, loaded);
        // Wrong knots must be rejected.
        let other = random_knots(10, 72);
        assert!(TpsBasisSystem::load_cache(&path, &other).is_err());
        std::fs::remove_dir_all(&dir).ok();
    }
}
