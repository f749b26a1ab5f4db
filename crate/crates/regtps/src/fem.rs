//! SPDE/GMRF baseline: structured triangulation, piecewise-linear FEM
//! mass and stiffness matrices, the Matern precision matrix for the
//! second-order operator, and barycentric projection onto arbitrary
//! points.
//!
//! The mesh is a deterministic right-triangle lattice over the domain
//! extended by a 20% margin per side, which keeps boundary effects away
//! from the data and guarantees that every in-domain point has a
//! containing triangle.

use nalgebra::{DMatrix, DVector};
use nalgebra_sparse::{CooMatrix, CscMatrix};

use crate::error::{Error, Result};
use crate::geometry::{BoundingDomain, Point2, PointRole, PointSet};

/// Margin fraction added to each side of the domain before meshing.
pub const MESH_MARGIN: f64 = 0.2;

/// A structured triangulation: lattice nodes and counter-clockwise
/// triangles.
#[derive(Debug, Clone)]
pub struct TriMesh {
    nodes: PointSet,
    triangles: Vec<[usize; 3]>,
    nx: usize,
    ny: usize,
    extended: BoundingDomain,
}

impl TriMesh {
    pub fn nodes(&self) -> &PointSet {
        &self.nodes
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    pub fn extended_domain(&self) -> &BoundingDomain {
        &self.extended
    }

    /// Export nodes and triangles as two CSV files for visualization.
    pub fn export_csv(&self, nodes_path: &std::path::Path, tris_path: &std::path::Path) -> Result<()> {
        let mut w = csv::Writer::from_path(nodes_path)?;
        w.write_record(["node", "s1", "s2"])?;
        for (i, p) in self.nodes.points().iter().enumerate() {
            w.write_record([i.to_string(), format!("{:.17e}", p.s1), format!("{:.17e}", p.s2)])?;
        }
        w.flush()?;
        let mut w = csv::Writer::from_path(tris_path)?;
        w.write_record(["triangle", "v0", "v1", "v2"])?;
        for (i, t) in self.triangles.iter().enumerate() {
            w.write_record([i.to_string(), t[0].to_string(), t[1].to_string(), t[2].to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Lumped mass, stiffness and the stiffness-mass-stiffness product used
/// by the second-order precision matrix.
#[derive(Debug, Clone)]
pub struct FemMatrices {
    /// Diagonal of the lumped mass matrix, `C_ii = <psi_i, 1>`.
    pub mass_diag: DVector<f64>,
    /// Sparse symmetric stiffness, `G_ij = <grad psi_i, grad psi_j>`.
    pub stiffness: CscMatrix<f64>,
    /// `G C^-1 G`, sparse symmetric.
    pub g2: CscMatrix<f64>,
}

/// Precision matrix of the FEM-discretized Matern field (second-order
/// operator): `Q = tau^2 (kappa^4 C + 2 kappa^2 G + G C^-1 G)`.
#[derive(Debug, Clone)]
pub struct PrecisionQ {
    pub matrix: CscMatrix<f64>,
    pub kappa: f64,
    pub tau: f64,
}

/// Build a structured mesh with roughly `target_nodes` nodes.
pub fn build_mesh(domain: &BoundingDomain, target_nodes: usize) -> Result<TriMesh> {
    if target_nodes < 9 {
        return Err(Error::invalid(format!(
            "target_nodes must be >= 9, got {target_nodes}"
        )));
    }
    let m = (target_nodes as f64).sqrt().round().max(3.0) as usize;
    let extended = domain.with_margin(MESH_MARGIN);
    let (e1, e2) = extended.extent();
    let mut pts = Vec::with_capacity(m * m);
    for j in 0..m {
        let y = extended.min2 + e2 * j as f64 / (m - 1) as f64;
        for i in 0..m {
            let x = extended.min1 + e1 * i as f64 / (m - 1) as f64;
            pts.push(Point2 { s1: x, s2: y });
        }
    }
    let nodes = PointSet::new(pts, PointRole::MeshNode)?;
    let mut triangles = Vec::with_capacity(2 * (m - 1) * (m - 1));
    for j in 0..m - 1 {
        for i in 0..m - 1 {
            let v00 = j * m + i;
            let v10 = v00 + 1;
            let v01 = v00 + m;
            let v11 = v01 + 1;
            triangles.push([v00, v10, v11]);
            triangles.push([v00, v11, v01]);
        }
    }
    Ok(TriMesh {
        nodes,
        triangles,
        nx: m,
        ny: m,
        extended,
    })
}

fn signed_area(a: &Point2, b: &Point2, c: &Point2) -> f64 {
    0.5 * ((b.s1 - a.s1) * (c.s2 - a.s2) - (c.s1 - a.s1) * (b.s2 - a.s2))
}

/// Element-wise linear FEM assembly: lumped mass (row sums of the
/// consistent mass) and exact per-element gradient stiffness.
pub fn assemble_fem(mesh: &TriMesh) -> Result<FemMatrices> {
    let n = mesh.node_count();
    let pts = mesh.nodes().points();
    let mut mass_diag = DVector::zeros(n);
    let mut g_coo = CooMatrix::new(n, n);
    for tri in mesh.triangles() {
        let [i0, i1, i2] = *tri;
        let (a, b, c) = (&pts[i0], &pts[i1], &pts[i2]);
        let area = signed_area(a, b, c);
        if area <= 0.0 {
            return Err(Error::invalid(format!(
                "degenerate or misoriented triangle ({i0}, {i1}, {i2})"
            )));
        }
        // P1 basis gradients: grad psi_i = (b_i, c_i).
        let grads = [
            ((b.s2 - c.s2) / (2.0 * area), (c.s1 - b.s1) / (2.0 * area)),
            ((c.s2 - a.s2) / (2.0 * area), (a.s1 - c.s1) / (2.0 * area)),
            ((a.s2 - b.s2) / (2.0 * area), (b.s1 - a.s1) / (2.0 * area)),
        ];
        let idx = [i0, i1, i2];
        for r in 0..3 {
            mass_diag[idx[r]] += area / 3.0;
            for s in 0..3 {
                let v = area * (grads[r].0 * grads[s].0 + grads[r].1 * grads[s].1);
                g_coo.push(idx[r], idx[s], v);
            }
        }
    }
    let stiffness = CscMatrix::from(&g_coo);
    // G C^-1 G, with C diagonal: scale the columns of G, multiply by G.
    let mut scaled = stiffness.clone();
    {
        let (offsets, indices, values) = scaled.csc_data_mut();
        let _ = offsets;
        for (row, v) in indices.iter().zip(values.iter_mut()) {
            *v /= mass_diag[*row];
        }
    }
    // (C^-1 G) has rows scaled; G * (C^-1 G) = G C^-1 G.
    let g2 = &stiffness * &scaled;
    Ok(FemMatrices {
        mass_diag,
        stiffness,
        g2,
    })
}

/// `Q = tau^2 (kappa^4 C + 2 kappa^2 G + G C^-1 G)`, validated SPD by a
/// sparse Cholesky factorization.
pub fn build_precision(fem: &FemMatrices, kappa: f64, tau: f64) -> Result<PrecisionQ> {
    if !(kappa > 0.0) || !(tau > 0.0) {
        return Err(Error::invalid("kappa and tau must be positive"));
    }
    let n = fem.mass_diag.len();
    let mut c_coo = CooMatrix::new(n, n);
    for i in 0..n {
        c_coo.push(i, i, fem.mass_diag[i]);
    }
    let c = CscMatrix::from(&c_coo);
    let t2 = tau * tau;
    let k2 = kappa * kappa;
    let q = &(&(&c * (t2 * k2 * k2)) + &(&fem.stiffness * (2.0 * t2 * k2))) + &(&fem.g2 * t2);
    nalgebra_sparse::factorization::CscCholesky::factor(&q)
        .map_err(|e| Error::Numerical(format!("precision matrix not SPD: {e}")))?;
    Ok(PrecisionQ {
        matrix: q,
        kappa,
        tau,
    })
}

/// Matern range and marginal SD to SPDE parameters for the second-order
/// operator in 2-D (`nu = 1`): `kappa = sqrt(8)/rho`,
/// `tau = 1 / (sigma_u kappa sqrt(4 pi))`.
pub fn hyperparam_transform(rho: f64, sigma_u: f64) -> (f64, f64) {
    let kappa = 8.0_f64.sqrt() / rho;
    let tau = 1.0 / (sigma_u * kappa * (4.0 * std::f64::consts::PI).sqrt());
    (kappa, tau)
}

/// Inverse of [`hyperparam_transform`].
pub fn hyperparam_inverse(kappa: f64, tau: f64) -> (f64, f64) {
    let rho = 8.0_f64.sqrt() / kappa;
    let sigma_u = 1.0 / (tau * kappa * (4.0 * std::f64::consts::PI).sqrt());
    (rho, sigma_u)
}

/// Sparse |pts| x n projection: row i holds the barycentric coordinates
/// of point i in its containing triangle.
pub fn projection_matrix(mesh: &TriMesh, pts: &PointSet) -> Result<CscMatrix<f64>> {
    let n = mesh.node_count();
    let mut coo = CooMatrix::new(pts.len(), n);
    let nodes = mesh.nodes().points();
    let (e1, e2) = mesh.extended.extent();
    let dx = e1 / (mesh.nx - 1) as f64;
    let dy = e2 / (mesh.ny - 1) as f64;
    for (pi, p) in pts.points().iter().enumerate() {
        let ci = (((p.s1 - mesh.extended.min1) / dx).floor() as isize)
            .clamp(0, mesh.nx as isize - 2) as usize;
        let cj = (((p.s2 - mesh.extended.min2) / dy).floor() as isize)
            .clamp(0, mesh.ny as isize - 2) as usize;
        let t0 = 2 * (cj * (mesh.nx - 1) + ci);
        let mut placed = false;
        for tri in [t0, t0 + 1] {
            let [i0, i1, i2] = mesh.triangles[tri];
            let (a, b, c) = (&nodes[i0], &nodes[i1], &nodes[i2]);
            let area = signed_area(a, b, c);
            let l0 = signed_area(p, b, c) / area;
            let l1 = signed_area(a, p, c) / area;
            let l2 = signed_area(a, b, p) / area;
            const TOL: f64 = -1e-12;
            if l0 >= TOL && l1 >= TOL && l2 >= TOL {
                // Clamp tiny negatives and renormalize so rows sum to 1.
                let (mut l0, mut l1, mut l2) = (l0.max(0.0), l1.max(0.0), l2.max(0.0));
                let sum = l0 + l1 + l2;
                l0 /= sum;
                l1 /= sum;
                l2 /= sum;
                for (idx, l) in [(i0, l0), (i1, l1), (i2, l2)] {
                    if l > 0.0 {
                        coo.push(pi, idx, l);
                    }
                }
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::invalid(format!(
                "point {pi} at ({}, {}) lies outside the mesh",
                p.s1, p.s2
            )));
        }
    }
    Ok(CscMatrix::from(&coo))
}

/// One-time spectral form of the precision family: with the diagonal
/// mass matrix `C` and `M = C^{-1/2} G C^{-1/2} = V diag(gamma) V'`, the
/// unit-tau precision is `Q0(kappa) = C^{1/2} V (kappa^2 + gamma)^2 V' C^{1/2}`.
/// Log-determinants and quadratic forms for any `kappa` then cost a
/// matrix-vector product, which is what the sampler needs in its inner
/// loop.
#[derive(Debug, Clone)]
pub struct FemSystem {
    pub mesh: TriMesh,
    pub matrices: FemMatrices,
    /// Eigenvalues of `M`, nonnegative.
    pub gamma: DVector<f64>,
    /// Orthonormal eigenvectors of `M` (dense n x n).
    pub eigvecs: DMatrix<f64>,
    /// Elementwise square root of the mass diagonal.
    pub sqrt_mass: DVector<f64>,
    /// Sum of `log C_ii`, the kappa-independent part of `log |Q0|`.
    pub logdet_mass: f64,
}

impl FemSystem {
    pub fn new(mesh: TriMesh) -> Result<FemSystem> {
        let matrices = assemble_fem(&mesh)?;
        let n = mesh.node_count();
        let sqrt_mass = matrices.mass_diag.map(f64::sqrt);
        let g_dense = DMatrix::from(&matrices.stiffness);
        let mut m = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                m[(i, j)] = g_dense[(i, j)] / (sqrt_mass[i] * sqrt_mass[j]);
            }
        }
        let eig = nalgebra::SymmetricEigen::new(m);
        let gamma = eig.eigenvalues.map(|g| g.max(0.0));
        let logdet_mass = matrices.mass_diag.iter().map(|c| c.ln()).sum();
        Ok(FemSystem {
            mesh,
            matrices,
            gamma,
            eigvecs: eig.eigenvectors,
            sqrt_mass,
            logdet_mass,
        })
    }

    pub fn node_count(&self) -> usize {
        self.mesh.node_count()
    }

    /// `log |Q0(kappa)|` for the unit-tau precision.
    pub fn logdet_q0(&self, kappa: f64) -> f64 {
        let k2 = kappa * kappa;
        self.logdet_mass + 2.0 * self.gamma.iter().map(|g| (k2 + g).ln()).sum::<f64>()
    }

    /// `d log |Q0| / d kappa`.
    pub fn dlogdet_q0_dkappa(&self, kappa: f64) -> f64 {
        let k2 = kappa * kappa;
        4.0 * kappa * self.gamma.iter().map(|g| 1.0 / (k2 + g)).sum::<f64>()
    }

    /// `Q0(kappa) x` without forming the matrix.
    pub fn q0_mul(&self, kappa: f64, x: &DVector<f64>) -> DVector<f64> {
        let k2 = kappa * kappa;
        let w = self.eigvecs.transpose() * x.component_mul(&self.sqrt_mass);
        let scaled = DVector::from_fn(w.len(), |i, _| {
            let f = k2 + self.gamma[i];
            f * f * w[i]
        });
        (&self.eigvecs * scaled).component_mul(&self.sqrt_mass)
    }

    /// Draw `u_raw ~ N(0, Q0(kappa)^-1)` from standard normals.
    pub fn sample_u_raw(&self, kappa: f64, xi: &DVector<f64>) -> DVector<f64> {
        let k2 = kappa * kappa;
        let scaled = DVector::from_fn(xi.len(), |i, _| xi[i] / (k2 + self.gamma[i]));
        (&self.eigvecs * scaled).component_div(&self.sqrt_mass)
    }
}
