//! Accuracy diagnostics: certainty equivalents, policy approximation
//! errors and distances between solved surfaces.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::approx::{fit_complete, ChebyshevSurface, EvalScratch, HyperRectangle, TensorNodeGrid};
use crate::dp::{NodeDecision, Preference, StageProblem, ValueSurface};
use crate::error::{Error, Result};
use crate::nlp::SolveStatus;

pub const DEFAULT_PROBES: usize = 1000;
/// Largest share of probe points allowed to fail before the report is rejected.
pub const MAX_FAILURE_SHARE: f64 = 0.01;

/// Certainty equivalent per unit of wealth of value factor `v`.
pub fn certainty_equivalent(preference: &Preference, v: f64, dt: f64) -> Result<f64> {
    let gamma = preference.gamma();
    let log = !matches!(preference, Preference::EpsteinZin { .. }) && (gamma - 1.0).abs() < 1e-12;
    if !log && !((1.0 - gamma) * v > 0.0) {
        return Err(Error::Domain(format!("value factor {v} has the wrong sign for risk aversion {gamma}")));
    }
    let ce = preference.certainty_equivalent(v, dt);
    if !ce.is_finite() {
        return Err(Error::Numerical(format!("certainty equivalent of {v} is not finite")));
    }
    Ok(ce)
}

/// `count` points drawn uniformly from `domain` with a ChaCha8 stream.
pub fn uniform_probes(domain: &HyperRectangle, count: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| (0..domain.dim()).map(|j| domain.lower()[j] + rng.gen::<f64>() * (domain.upper()[j] - domain.lower()[j])).collect())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub degree: usize,
    pub probes: usize,
    pub failures: usize,
    pub seed: u64,
    /// Mean absolute difference over probes and decision variables.
    pub l1: f64,
    /// Largest absolute difference.
    pub linf: f64,
}

/// Fits every decision variable of `decisions` (solved at the nodes of
/// `grid`) with a complete polynomial of `degree`, re-solves `problem` at
/// uniform random points, and measures the distance between the re-solved
/// and the fitted decisions.
pub fn policy_approx_error(
    grid: &TensorNodeGrid,
    decisions: &[NodeDecision],
    problem: &StageProblem<'_>,
    degree: usize,
    probe_count: usize,
    seed: u64,
) -> Result<ErrorReport> {
    if decisions.len() != grid.len() {
        return Err(Error::Dimension { expected: grid.len(), found: decisions.len() });
    }
    if probe_count == 0 {
        return Err(Error::Parameter("at least one probe point is needed".into()));
    }
    let controls: Vec<Vec<f64>> = decisions.iter().map(NodeDecision::controls).collect();
    let n = controls[0].len();
    let fitted = (0..n)
        .map(|c| {
            let values: Vec<f64> = controls.iter().map(|v| v[c]).collect();
            fit_complete(grid, &values, degree)
        })
        .collect::<Result<Vec<_>>>()?;
    let probes = uniform_probes(grid.domain(), probe_count, seed);
    let diffs: Vec<Option<Vec<f64>>> = probes
        .par_iter()
        .map_init(EvalScratch::new, |scratch, x| {
            let d = problem.solve(x, None).ok().filter(|d| d.status == SolveStatus::Converged)?;
            let solved = d.controls();
            Some(fitted.iter().zip(&solved).map(|(f, s)| (f.value_with(x, scratch) - s).abs()).collect())
        })
        .collect();
    let failures = diffs.iter().filter(|d| d.is_none()).count();
    if failures as f64 > MAX_FAILURE_SHARE * probe_count as f64 {
        return Err(Error::Numerical(format!("{failures} of {probe_count} probe solves failed")));
    }
    let (mut sum, mut count, mut linf) = (0.0, 0usize, 0.0f64);
    for d in diffs.iter().flatten() {
        for v in d {
            sum += v;
            linf = linf.max(*v);
            count += 1;
        }
    }
    Ok(ErrorReport { degree, probes: probe_count, failures, seed, l1: sum / count.max(1) as f64, linf })
}

/// Monte-Carlo L1 (mean) and L-infinity (max) distance of two surfaces.
pub fn surface_distance(a: &ChebyshevSurface, b: &ChebyshevSurface, probe_count: usize, seed: u64) -> Result<(f64, f64)> {
    if a.domain() != b.domain() {
        return Err(Error::Domain("surfaces live on different domains".into()));
    }
    if probe_count == 0 {
        return Err(Error::Parameter("at least one probe point is needed".into()));
    }
    let probes = uniform_probes(a.domain(), probe_count, seed);
    let diffs: Vec<f64> = probes
        .par_iter()
        .map_init(EvalScratch::new, |s, x| (a.value_with(x, s) - b.value_with(x, s)).abs())
        .collect();
    let l1 = diffs.iter().sum::<f64>() / probe_count as f64;
    Ok((l1, diffs.iter().fold(0.0, |m, d| m.max(*d))))
}

/// [`surface_distance`] over all discrete states: mean of the per-state L1
/// distances and the largest L-infinity distance.
pub fn value_surface_distance(a: &ValueSurface, b: &ValueSurface, probe_count: usize, seed: u64) -> Result<(f64, f64)> {
    if a.surfaces.len() != b.surfaces.len() {
        return Err(Error::Dimension { expected: a.surfaces.len(), found: b.surfaces.len() });
    }
    let mut l1 = 0.0;
    let mut linf = 0.0f64;
    for (sa, sb) in a.surfaces.iter().zip(&b.surfaces) {
        let (m, x) = surface_distance(sa, sb, probe_count, seed)?;
        l1 += m;
        linf = linf.max(x);
    }
    Ok((l1 / a.surfaces.len().max(1) as f64, linf))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::approx::chebyshev_nodes;

    #[test]
    fn ce_of_deterministic_growth() {
        let pref = Preference::TerminalWealth { gamma: 3.0 };
        let growth: f64 = 1.07;
        let v = growth.powf(-2.0) / -2.0;
        assert!((certainty_equivalent(&pref, v, 1.0).unwrap() - growth).abs() < 1e-14);
        assert!(certainty_equivalent(&pref, 0.3, 1.0).is_err());
        let log = Preference::TerminalWealth { gamma: 1.0 };
        assert!((certainty_equivalent(&log, growth.ln(), 1.0).unwrap() - growth).abs() < 1e-14);
    }

    #[test]
    fn probes_are_reproducible() {
        let d = HyperRectangle::unit(3);
        let a = uniform_probes(&d, 50, 7);
        assert_eq!(a, uniform_probes(&d, 50, 7));
        assert_ne!(a, uniform_probes(&d, 50, 8));
        assert!(a.iter().flatten().all(|v| (0.0..1.0).contains(v)));
    }

    #[test]
    fn distance_identity_and_symmetry() {
        let grid = chebyshev_nodes(5, &HyperRectangle::unit(2)).unwrap();
        let fa = fit_complete(&grid, &grid.points().map(|p| p[0] * p[1]).collect::<Vec<_>>(), 4).unwrap();
        let fb = fit_complete(&grid, &grid.points().map(|p| p[0] + p[1]).collect::<Vec<_>>(), 4).unwrap();
        assert_eq!(surface_distance(&fa, &fa, 100, 1).unwrap(), (0.0, 0.0));
        let (l1, linf) = surface_distance(&fa, &fb, 100, 1).unwrap();
        assert_eq!((l1, linf), surface_distance(&fb, &fa, 100, 1).unwrap());
        assert!(l1 <= linf && l1 > 0.0);
    }
}
