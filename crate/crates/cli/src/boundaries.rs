//! Boundary curves of the fixture catalog in the (η₁, η₂) plane.

use std::fmt::Write as _;

use ridematch::indices::{boundary_sweep, curves_to_text, whittle_index_self_shared};
use ridematch::mdp::Solver;
use ridematch::network::fixture_catalog;

use crate::CliError;

/// Default η₂ grid: -100, -90, ..., -20.
pub fn default_grid() -> Vec<f64> {
    (0..9).map(|k| -100.0 + 10.0 * k as f64).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryOutput {
    pub text: String,
    /// Set for self-shared services, whose boundaries are vertical lines.
    pub notice: Option<String>,
}

/// Curves of both action slots for every controllable state of fixture
/// service `service_id`, as `n1,n2,slot,other_eta,crossing` rows.
pub fn emit_boundaries(service_id: usize, grid: &[f64], solver: Solver) -> Result<BoundaryOutput, CliError> {
    let (catalog, arrivals) = fixture_catalog();
    if service_id == 0 || service_id > catalog.len() {
        return Err(CliError::Usage(format!(
            "fixture has services 1..={}, got {service_id}",
            catalog.len()
        )));
    }
    if grid.is_empty() {
        return Err(CliError::Usage("empty eta grid".into()));
    }
    let svc = catalog.service(service_id);
    let (l1, l2) = svc.types;
    if svc.self_shared {
        let (a, b) = whittle_index_self_shared(svc, arrivals[l1 - 1])?;
        let mut text = String::from("n1,n2,slot,other_eta,crossing\n");
        for (n1, v) in [(0, a), (1, b)] {
            for x in grid {
                let _ = writeln!(text, "{n1},0,1,{x},{v}");
            }
        }
        return Ok(BoundaryOutput {
            text,
            notice: Some(format!(
                "service {service_id} is self-shared: its boundaries are vertical lines at the closed-form indices ({a}, {b})"
            )),
        });
    }
    let curves = boundary_sweep(svc, catalog.n_max, (arrivals[l1 - 1], arrivals[l2 - 1]), grid, solver)?;
    Ok(BoundaryOutput {
        text: curves_to_text(&curves),
        notice: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pair_service_has_ten_first_slot_curves() {
        let out = emit_boundaries(3, &[-50.0], Solver::Exact).unwrap();
        let first: Vec<&str> = out.text.lines().skip(1).filter(|l| l.split(',').nth(2) == Some("1")).collect();
        assert_eq!(first.len(), 10);
        assert!(out.notice.is_none());
    }

    #[test]
    fn single_point_grid_gives_one_sample_per_curve() {
        let out = emit_boundaries(3, &[-20.0], Solver::Exact).unwrap();
        // 10 controllable states per slot
        assert_eq!(out.text.lines().count(), 1 + 20);
    }

    #[test]
    fn self_shared_is_vertical_at_closed_form() {
        let out = emit_boundaries(1, &default_grid(), Solver::Exact).unwrap();
        assert!(out.notice.is_some());
        for line in out.text.lines().skip(1) {
            let v: f64 = line.rsplit(',').next().unwrap().parse().unwrap();
            assert!((v - 255.0 / 11.0).abs() < 1e-12);
        }
    }

    #[test]
    fn unknown_service_is_usage_error() {
        assert!(matches!(emit_boundaries(4, &[0.0], Solver::Exact), Err(CliError::Usage(_))));
    }
}
