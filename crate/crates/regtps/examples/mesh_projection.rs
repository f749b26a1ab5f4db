//! Build a triangular mesh over a domain, assemble the piecewise-linear
//! FEM matrices, and project off-mesh points with barycentric weights.

use nalgebra::DVector;
use regtps::fem::{self, FemSystem};
use regtps::geometry::{BoundingDomain, PointRole, PointSet};
use std::sync::Arc;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let domain = BoundingDomain::unit_square();
    let mesh = fem::build_mesh(&domain, 114)?;
    println!(
        "mesh: {} nodes, {} triangles, extended domain extent {:?}",
        mesh.nodes().len(),
        mesh.triangles().len(),
        mesh.extended_domain().extent()
    );

    // Linear fields are reproduced exactly by the projection.
    let nodes = mesh.nodes();
    let linear = DVector::from_iterator(
        nodes.len(),
        nodes.points().iter().map(|p| 1.0 + 2.0 * p.s1 - 0.5 * p.s2),
    );
    let probes = PointSet::from_coords(&[(0.21, 0.34), (0.77, 0.05), (0.5, 0.99)], PointRole::Observation)?;
    let a = fem::projection_matrix(&mesh, &probes)?;
    let at_probes = &a * &linear;
    for (p, v) in probes.points().iter().zip(at_probes.iter()) {
        let exact = 1.0 + 2.0 * p.s1 - 0.5 * p.s2;
        println!("probe ({:.2}, {:.2}): projected {v:.6}, exact {exact:.6}", p.s1, p.s2);
    }

    // The precision matrix for range 0.3 and unit marginal SD.
    let system = Arc::new(FemSystem::new(mesh)?);
    let (kappa, tau) = fem::hyperparam_transform(0.3, 1.0);
    let q = fem::build_precision(&system.matrices, kappa, tau)?;
    println!(
        "precision: {} nonzeros, log det Q0 = {:.3}",
        q.matrix.nnz(),
        system.logdet_q0(kappa)
    );
    Ok(())
}
