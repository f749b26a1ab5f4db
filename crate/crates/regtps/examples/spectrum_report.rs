//! Report the expansion eigenvalue spectrum at a few smoothing weights:
//! per-mode variances, cumulative fractions and the 95% crossing index.

use regtps::evaluation::spectrum_report;
use regtps::geometry::{make_grid, BoundingDomain, PointRole};
use regtps::tps;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let domain = BoundingDomain::unit_square();
    let knots = make_grid(&domain, 9)?.with_role(PointRole::Knot)?;
    let basis = tps::build_basis(&knots)?;

    for alpha in [0.1, 1.0, 10.0] {
        let report = spectrum_report(&basis, alpha)?;
        println!(
            "alpha {alpha:>5.1}: {} modes reach 95% of total variance (of {})",
            report.crossing_index_95,
            report.rows.len()
        );
        for row in report.rows.iter().take(6) {
            println!(
                "  mode {:>3}: penalty {:>10.3e}  variance {:>8.5}  cumulative {:.4}",
                row.mode, row.penalty_eigval, row.kle_eigval, row.cumulative_fraction
            );
        }
    }
    Ok(())
}
