//! Smooth maximization over bounds and linear inequality rows.
//!
//! A primal feasible active-set method: every iterate satisfies all
//! constraints, steps solve an equality-constrained quadratic model built
//! from a damped BFGS approximation of the negated objective's Hessian, and
//! constraints enter the working set through the ratio test and leave it on
//! negative multipliers at a working-set stationary point.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_TOLERANCE: f64 = 1e-8;
pub const DEFAULT_MAX_ITERATIONS: usize = 500;
/// Largest allowed constraint violation of a returned point.
pub const FEASIBILITY_TOLERANCE: f64 = 1e-9;
/// Netting is accepted if it lowers the objective by at most this much.
pub const NETTING_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Converged,
    MaxIterations,
    Infeasible,
}

/// A maximization problem `max f(v)` s.t. `lower <= v <= upper`, `rows v <= rhs`.
pub struct SmoothProgram<F> {
    /// Returns `f(v)` and writes the gradient; may return a non-finite value
    /// outside the objective's natural domain.
    pub objective: F,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub rows: Vec<Vec<f64>>,
    pub rhs: Vec<f64>,
    /// Index pairs `(plus, minus)` of split variables netted after solving.
    pub complementary_pairs: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveReport {
    pub point: Vec<f64>,
    pub value: f64,
    pub status: SolveStatus,
    /// Largest violation of any bound or row at `point`.
    pub constraint_residual: f64,
    /// Projected-gradient norm at `point` (infinity norm).
    pub stationarity: f64,
    pub iterations: usize,
    /// Final quasi-Newton model of the negated Hessian over the free
    /// variables; a good initial model for a nearby problem.
    pub curvature: Option<DMatrix<f64>>,
}

impl SolveReport {
    pub fn converged(&self) -> bool {
        self.status == SolveStatus::Converged
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SolverOptions {
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self { tolerance: DEFAULT_TOLERANCE, max_iterations: DEFAULT_MAX_ITERATIONS }
    }
}

/// Inequality `a . v <= b` over the free variables.
#[derive(Debug, Clone)]
struct Row {
    a: Vec<f64>,
    b: f64,
    /// For bound rows, the variable index and the bound value to snap to.
    bound: Option<(usize, f64)>,
}

struct Reduced {
    free: Vec<usize>,
    full: Vec<f64>,
    rows: Vec<Row>,
}

impl Reduced {
    fn new<F>(p: &SmoothProgram<F>, start: &[f64]) -> Result<Self> {
        let n = p.lower.len();
        if p.upper.len() != n || start.len() != n {
            return Err(Error::Dimension { expected: n, found: start.len().min(p.upper.len()) });
        }
        if p.rows.len() != p.rhs.len() || p.rows.iter().any(|r| r.len() != n) {
            return Err(Error::Parameter("constraint rows do not match the variable count".into()));
        }
        if p.rows.iter().flatten().chain(&p.rhs).any(|v| !v.is_finite()) {
            return Err(Error::Parameter("constraint rows must be finite".into()));
        }
        for i in 0..n {
            if !(p.lower[i] <= p.upper[i]) {
                return Err(Error::Parameter(format!("variable {i} has empty bounds")));
            }
        }
        let free: Vec<usize> = (0..n).filter(|&i| p.upper[i] > p.lower[i]).collect();
        let mut full = start.to_vec();
        for i in 0..n {
            if p.upper[i] <= p.lower[i] {
                full[i] = p.lower[i];
            }
        }
        let mut rows = Vec::new();
        for (slot, &i) in free.iter().enumerate() {
            if p.lower[i].is_finite() {
                let mut a = vec![0.0; free.len()];
                a[slot] = -1.0;
                rows.push(Row { a, b: -p.lower[i], bound: Some((slot, p.lower[i])) });
            }
            if p.upper[i].is_finite() {
                let mut a = vec![0.0; free.len()];
                a[slot] = 1.0;
                rows.push(Row { a, b: p.upper[i], bound: Some((slot, p.upper[i])) });
            }
        }
        for (r, &b) in p.rows.iter().zip(&p.rhs) {
            let fixed: f64 = (0..n).filter(|i| p.upper[*i] <= p.lower[*i]).map(|i| r[i] * full[i]).sum();
            let a: Vec<f64> = free.iter().map(|&i| r[i]).collect();
            if a.iter().all(|v| *v == 0.0) {
                if fixed > b + FEASIBILITY_TOLERANCE {
                    return Err(Error::Numerical("row violated by fixed variables".into()));
                }
                continue;
            }
            rows.push(Row { a, b: b - fixed, bound: None });
        }
        Ok(Self { free, full, rows })
    }

    fn expand(&mut self, z: &[f64]) -> &[f64] {
        for (slot, &i) in self.free.iter().enumerate() {
            self.full[i] = z[slot];
        }
        &self.full
    }

    fn slack(&self, r: &Row, z: &[f64]) -> f64 {
        r.b - dot(&r.a, z)
    }

    fn violation(&self, z: &[f64]) -> f64 {
        self.rows.iter().map(|r| (-self.slack(r, z)).max(0.0)).fold(0.0, f64::max)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Projects `z` onto the polyhedron by Dykstra's alternating projections.
fn project_feasible(red: &Reduced, z: &mut [f64]) -> bool {
    let m = red.rows.len();
    let n = z.len();
    let mut corrections = vec![vec![0.0; n]; m];
    for _ in 0..20_000 {
        if red.violation(z) <= FEASIBILITY_TOLERANCE * 0.1 {
            return true;
        }
        for (r, inc) in red.rows.iter().zip(corrections.iter_mut()) {
            let y: Vec<f64> = z.iter().zip(inc.iter()).map(|(a, b)| a + b).collect();
            let nn = dot(&r.a, &r.a);
            let excess = dot(&r.a, &y) - r.b;
            let scale = if excess > 0.0 { excess / nn } else { 0.0 };
            for j in 0..n {
                let pj = y[j] - scale * r.a[j];
                inc[j] = y[j] - pj;
                z[j] = pj;
            }
        }
    }
    red.violation(z) <= FEASIBILITY_TOLERANCE * 0.1
}

struct State<'a, F> {
    program: &'a mut SmoothProgram<F>,
    red: Reduced,
    full_grad: Vec<f64>,
}

impl<F: FnMut(&[f64], &mut [f64]) -> f64> State<'_, F> {
    /// Value and gradient of the negated objective over the free variables.
    fn eval(&mut self, z: &[f64], grad: &mut [f64]) -> f64 {
        let full = self.red.expand(z).to_vec();
        let f = (self.program.objective)(&full, &mut self.full_grad);
        for (slot, &i) in self.red.free.iter().enumerate() {
            grad[slot] = -self.full_grad[i];
        }
        if f.is_finite() && grad.iter().all(|g| g.is_finite()) {
            -f
        } else {
            f64::INFINITY
        }
    }
}

/// Least-squares multipliers for the working set and the residual
/// `g + A^T lambda`. Returns `None` if the working rows are dependent.
fn multipliers(rows: &[Row], working: &[usize], g: &[f64]) -> Option<(Vec<f64>, Vec<f64>)> {
    let w = working.len();
    if w == 0 {
        return Some((Vec::new(), g.to_vec()));
    }
    let gram = DMatrix::from_fn(w, w, |i, j| dot(&rows[working[i]].a, &rows[working[j]].a));
    let rhs = DVector::from_fn(w, |i, _| -dot(&rows[working[i]].a, g));
    let lambda = gram.cholesky()?.solve(&rhs);
    let mut resid = g.to_vec();
    for (l, &i) in lambda.iter().zip(working) {
        for (rj, aj) in resid.iter_mut().zip(&rows[i].a) {
            *rj += l * aj;
        }
    }
    Some((lambda.iter().copied().collect(), resid))
}

/// Step of the equality-constrained quadratic model.
fn eqp_step(b: &DMatrix<f64>, rows: &[Row], working: &[usize], g: &[f64]) -> Option<Vec<f64>> {
    let n = g.len();
    let w = working.len();
    let mut kkt = DMatrix::<f64>::zeros(n + w, n + w);
    kkt.view_mut((0, 0), (n, n)).copy_from(b);
    for (k, &i) in working.iter().enumerate() {
        for j in 0..n {
            kkt[(n + k, j)] = rows[i].a[j];
            kkt[(j, n + k)] = rows[i].a[j];
        }
    }
    let mut rhs = DVector::<f64>::zeros(n + w);
    for j in 0..n {
        rhs[j] = -g[j];
    }
    let sol = kkt.lu().solve(&rhs)?;
    let p: Vec<f64> = sol.iter().take(n).copied().collect();
    p.iter().all(|v| v.is_finite()).then_some(p)
}

fn independent(rows: &[Row], working: &[usize], cand: usize) -> bool {
    let a = &rows[cand].a;
    match multipliers(rows, working, a) {
        // residual of projecting `a` onto span of working rows (sign flipped)
        Some((_, resid)) => inf_norm(&resid) > 1e-10 * inf_norm(a).max(1.0),
        None => false,
    }
}

/// Finds a KKT point of `program` from `start`.
pub fn maximize<F>(program: &mut SmoothProgram<F>, start: &[f64], options: SolverOptions) -> Result<SolveReport>
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    maximize_from(program, start, options, None)
}

/// [`maximize`] with an initial curvature model, typically the
/// [`SolveReport::curvature`] of a neighbouring problem. Ignored unless its
/// size matches the number of free variables.
pub fn maximize_from<F>(program: &mut SmoothProgram<F>, start: &[f64], options: SolverOptions, curvature: Option<&DMatrix<f64>>) -> Result<SolveReport>
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    let red = Reduced::new(program, start)?;
    let n_full = program.lower.len();
    let mut z: Vec<f64> = red.free.iter().map(|&i| start[i]).collect();
    let mut st = State { full_grad: vec![0.0; n_full], red, program };

    if st.red.violation(&z) > FEASIBILITY_TOLERANCE * 0.1 && !project_feasible(&st.red, &mut z) {
        let point = st.red.expand(&z).to_vec();
        let residual = st.red.violation(&z);
        return Ok(SolveReport {
            point,
            value: f64::NEG_INFINITY,
            status: SolveStatus::Infeasible,
            constraint_residual: residual,
            stationarity: f64::INFINITY,
            iterations: 0,
            curvature: None,
        });
    }

    let n = z.len();
    let mut g = vec![0.0; n];
    let mut phi = st.eval(&z, &mut g);
    // initial working set: rows active at the start
    let mut working: Vec<usize> = Vec::new();
    for i in 0..st.red.rows.len() {
        if st.red.slack(&st.red.rows[i], &z) <= 1e-13 && independent(&st.red.rows, &working, i) {
            working.push(i);
        }
    }
    if n == 0 || !phi.is_finite() {
        let status = if n == 0 { SolveStatus::Converged } else { SolveStatus::MaxIterations };
        return Ok(finish(&mut st, &z, phi, status, if n == 0 { 0.0 } else { f64::INFINITY }, 0, None));
    }

    let mut bmat = DMatrix::<f64>::identity(n, n);
    let mut scaled = false;
    if let Some(c) = curvature.filter(|c| c.shape() == (n, n) && c.iter().all(|v| v.is_finite())) {
        bmat.copy_from(c);
        scaled = true;
    }
    let mut stationarity = f64::INFINITY;
    let mut g_new = vec![0.0; n];
    let mut trial = vec![0.0; n];
    let mut resets = 0;
    for iter in 0..options.max_iterations {
        let (lambda, resid) = match multipliers(&st.red.rows, &working, &g) {
            Some(v) => v,
            None => {
                working.pop();
                continue;
            }
        };
        stationarity = inf_norm(&resid);
        let mut step = None;
        if stationarity > options.tolerance {
            let p = match eqp_step(&bmat, &st.red.rows, &working, &g) {
                Some(p) => p,
                None => {
                    bmat = DMatrix::identity(n, n);
                    match eqp_step(&bmat, &st.red.rows, &working, &g) {
                        Some(p) => p,
                        None => break,
                    }
                }
            };
            // a predicted change below the rounding of the objective means
            // the working-set problem is solved to working precision
            if dot(&g, &p).abs() > 16.0 * f64::EPSILON * phi.abs().max(1e-3) {
                step = Some(p);
            }
        }
        let Some(p) = step else {
            let worst = lambda.iter().enumerate().fold((usize::MAX, -options.tolerance), |acc, (i, &l)| if l < acc.1 { (i, l) } else { acc }).0;
            if worst == usize::MAX {
                return Ok(finish(&mut st, &z, phi, SolveStatus::Converged, stationarity, iter, Some(bmat)));
            }
            working.remove(worst);
            continue;
        };
        let slope = dot(&g, &p);
        if !(slope < 0.0) {
            if resets < 3 {
                bmat = DMatrix::identity(n, n);
                resets += 1;
                continue;
            }
            break;
        }

        // ratio test
        let mut alpha_max = 1.0;
        let mut blocking = None;
        for (i, r) in st.red.rows.iter().enumerate() {
            if working.contains(&i) {
                continue;
            }
            let ap = dot(&r.a, &p);
            if ap > 1e-14 * inf_norm(&r.a) * inf_norm(&p) {
                let room = st.red.slack(r, &z).max(0.0) / ap;
                if room < alpha_max {
                    alpha_max = room;
                    blocking = Some(i);
                }
            }
        }

        // Armijo backtracking
        let mut alpha = alpha_max;
        let mut accepted = false;
        let mut phi_new = phi;
        for _ in 0..60 {
            for j in 0..n {
                trial[j] = z[j] + alpha * p[j];
            }
            phi_new = st.eval(&trial, &mut g_new);
            if phi_new.is_finite() && phi_new <= phi + 1e-4 * alpha * slope {
                accepted = true;
                break;
            }
            alpha *= 0.5;
            if alpha * inf_norm(&p) < 1e-17 {
                break;
            }
        }
        if !accepted {
            if alpha_max == 0.0 {
                if let Some(i) = blocking {
                    working.push(i);
                    continue;
                }
            }
            if resets < 3 {
                bmat = DMatrix::identity(n, n);
                scaled = false;
                resets += 1;
                continue;
            }
            break;
        }
        let full_step = alpha == alpha_max;
        if full_step {
            if let Some(i) = blocking {
                if let Some((slot, value)) = st.red.rows[i].bound {
                    trial[slot] = value;
                    phi_new = st.eval(&trial, &mut g_new);
                }
                working.push(i);
            }
        }
        // keep bound rows in the working set exactly on their bounds
        for &i in &working {
            if let Some((slot, value)) = st.red.rows[i].bound {
                if trial[slot] != value {
                    trial[slot] = value;
                }
            }
        }

        let s: Vec<f64> = trial.iter().zip(&z).map(|(a, b)| a - b).collect();
        let mut y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if !scaled && sy > 0.0 {
            let yy = dot(&y, &y);
            bmat = DMatrix::identity(n, n) * (yy / sy);
            scaled = true;
        }
        let sv = DVector::from_column_slice(&s);
        let bs = &bmat * &sv;
        let sbs = sv.dot(&bs);
        if sbs > 1e-300 {
            if sy < 0.2 * sbs {
                let theta = 0.8 * sbs / (sbs - sy);
                for j in 0..n {
                    y[j] = theta * y[j] + (1.0 - theta) * bs[j];
                }
            }
            let yv = DVector::from_column_slice(&y);
            let sy = sv.dot(&yv);
            if sy > 1e-300 {
                bmat += &yv * yv.transpose() / sy - &bs * bs.transpose() / sbs;
            }
        }

        z.copy_from_slice(&trial);
        g.copy_from_slice(&g_new);
        phi = phi_new;
    }
    Ok(finish(&mut st, &z, phi, SolveStatus::MaxIterations, stationarity, options.max_iterations, Some(bmat)))
}

#[allow(clippy::too_many_arguments)]
fn finish<F>(
    st: &mut State<'_, F>,
    z: &[f64],
    phi: f64,
    status: SolveStatus,
    stationarity: f64,
    iterations: usize,
    curvature: Option<DMatrix<f64>>,
) -> SolveReport
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    let residual = st.red.violation(z);
    let mut point = st.red.expand(z).to_vec();
    // bounds hold exactly
    for (i, v) in point.iter_mut().enumerate() {
        *v = v.clamp(st.program.lower[i], st.program.upper[i]);
    }
    SolveReport { point, value: -phi, status, constraint_residual: residual, stationarity, iterations, curvature }
}

/// Replaces each split pair with its net position if that does not lower
/// the objective by more than [`NETTING_SLACK`].
pub fn net_pairs<F>(program: &mut SmoothProgram<F>, report: &mut SolveReport)
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    let mut candidate = report.point.clone();
    let mut changed = false;
    for &(plus, minus) in &program.complementary_pairs {
        let (a, b) = (candidate[plus], candidate[minus]);
        if a > 0.0 && b > 0.0 {
            let net = a - b;
            candidate[plus] = net.max(0.0).max(program.lower[plus]);
            candidate[minus] = (-net).max(0.0).max(program.lower[minus]);
            changed = true;
        }
    }
    if !changed {
        return;
    }
    let mut grad = vec![0.0; candidate.len()];
    let value = (program.objective)(&candidate, &mut grad);
    let violation = row_violation(program, &candidate);
    if value.is_finite() && value >= report.value - NETTING_SLACK && violation <= FEASIBILITY_TOLERANCE {
        report.point = candidate;
        report.value = value;
        report.constraint_residual = violation;
    }
}

fn row_violation<F>(program: &SmoothProgram<F>, v: &[f64]) -> f64 {
    let rows = program.rows.iter().zip(&program.rhs).map(|(r, b)| (dot(r, v) - b).max(0.0));
    let bounds = v.iter().enumerate().map(|(i, x)| (program.lower[i] - x).max(0.0).max(x - program.upper[i]));
    rows.chain(bounds).fold(0.0, f64::max)
}

fn pair_mass<F>(program: &SmoothProgram<F>, v: &[f64]) -> f64 {
    program.complementary_pairs.iter().map(|&(a, b)| v[a].abs() + v[b].abs()).sum()
}

/// Relative objective gap below which two optima count as tied.
pub const TIE_TOLERANCE: f64 = 1e-12;

/// Solves from every start, nets split pairs, and keeps the best point:
/// converged reports beat the rest, then larger objective, then smaller
/// total mass on the complementary pairs.
pub fn multistart<F>(program: &mut SmoothProgram<F>, starts: &[Vec<f64>], options: SolverOptions) -> Result<SolveReport>
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    multistart_from(program, starts, options, None)
}

/// [`multistart`] with an initial curvature model shared by all starts.
pub fn multistart_from<F>(
    program: &mut SmoothProgram<F>,
    starts: &[Vec<f64>],
    options: SolverOptions,
    curvature: Option<&DMatrix<f64>>,
) -> Result<SolveReport>
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    let mut best: Option<SolveReport> = None;
    for s in starts {
        let mut rep = maximize_from(program, s, options, curvature)?;
        if rep.status != SolveStatus::Infeasible {
            net_pairs(program, &mut rep);
        }
        best = Some(match best {
            None => rep,
            Some(b) => {
                if better(program, &rep, &b) {
                    rep
                } else {
                    b
                }
            }
        });
    }
    best.ok_or_else(|| Error::Parameter("no start points given".into()))
}

fn better<F>(program: &SmoothProgram<F>, a: &SolveReport, b: &SolveReport) -> bool {
    let rank = |r: &SolveReport| match r.status {
        SolveStatus::Converged => 2,
        SolveStatus::MaxIterations => 1,
        SolveStatus::Infeasible => 0,
    };
    if rank(a) != rank(b) {
        return rank(a) > rank(b);
    }
    let scale = a.value.abs().max(b.value.abs()).max(1.0);
    if (a.value - b.value).abs() > TIE_TOLERANCE * scale {
        return a.value > b.value;
    }
    pair_mass(program, &a.point) < pair_mass(program, &b.point)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn program<F: FnMut(&[f64], &mut [f64]) -> f64>(f: F, lower: Vec<f64>, upper: Vec<f64>) -> SmoothProgram<F> {
        SmoothProgram { objective: f, lower, upper, rows: vec![], rhs: vec![], complementary_pairs: vec![] }
    }

    #[test]
    fn interior_optimum() {
        let mut p = program(
            |v: &[f64], g: &mut [f64]| {
                g[0] = -2.0 * (v[0] - 0.5);
                -(v[0] - 0.5).powi(2)
            },
            vec![0.0],
            vec![1.0],
        );
        let r = maximize(&mut p, &[0.0], SolverOptions::default()).unwrap();
        assert!(r.converged());
        assert!((r.point[0] - 0.5).abs() < 1e-8 && r.value.abs() < 1e-15);
        p.rows = vec![vec![1.0]];
        p.rhs = vec![0.3];
        let r = maximize(&mut p, &[0.0], SolverOptions::default()).unwrap();
        assert!(r.converged());
        assert!((r.point[0] - 0.3).abs() < 1e-12);
    }

    #[test]
    fn simplex_optimum() {
        let mut p = program(
            |v: &[f64], g: &mut [f64]| {
                g[0] = -2.0 * (v[0] - 0.6);
                g[1] = -2.0 * (v[1] - 0.6);
                -(v[0] - 0.6).powi(2) - (v[1] - 0.6).powi(2)
            },
            vec![0.0, 0.0],
            vec![f64::INFINITY, f64::INFINITY],
        );
        p.rows = vec![vec![1.0, 1.0]];
        p.rhs = vec![1.0];
        let r = maximize(&mut p, &[0.1, 0.0], SolverOptions::default()).unwrap();
        assert!(r.converged());
        assert!((r.point[0] - 0.5).abs() < 1e-8 && (r.point[1] - 0.5).abs() < 1e-8);
        assert!(r.constraint_residual <= FEASIBILITY_TOLERANCE);
    }

    #[test]
    fn infeasible_start_is_repaired_or_reported() {
        let f = |v: &[f64], g: &mut [f64]| {
            g[0] = 1.0;
            g[1] = 1.0;
            v[0] + v[1]
        };
        let mut p = program(f, vec![0.0, 0.0], vec![1.0, 1.0]);
        p.rows = vec![vec![1.0, 2.0]];
        p.rhs = vec![1.0];
        let r = maximize(&mut p, &[1.0, 1.0], SolverOptions::default()).unwrap();
        assert!(r.converged());
        assert!((r.point[0] - 1.0).abs() < 1e-9 && r.point[1].abs() < 1e-9);
        p.rhs = vec![-1.0];
        let r = maximize(&mut p, &[0.5, 0.5], SolverOptions::default()).unwrap();
        assert_eq!(r.status, SolveStatus::Infeasible);
    }

    #[test]
    fn fixed_variables_are_eliminated() {
        let mut p = program(
            |v: &[f64], g: &mut [f64]| {
                g[0] = -2.0 * (v[0] - 0.9);
                g[1] = 1.0;
                -(v[0] - 0.9).powi(2) + v[1]
            },
            vec![0.0, 0.25],
            vec![1.0, 0.25],
        );
        p.rows = vec![vec![1.0, 1.0]];
        p.rhs = vec![1.0];
        let r = maximize(&mut p, &[0.0, 0.25], SolverOptions::default()).unwrap();
        assert!(r.converged());
        assert!((r.point[0] - 0.75).abs() < 1e-9);
        assert_eq!(r.point[1], 0.25);
    }

    #[test]
    fn netting_removes_round_trips() {
        // objective penalizes both legs of a split variable
        let f = |v: &[f64], g: &mut [f64]| {
            let d = v[0] - v[1];
            g[0] = -2.0 * (d - 0.2) - 0.01;
            g[1] = 2.0 * (d - 0.2) - 0.01;
            -(d - 0.2).powi(2) - 0.01 * (v[0] + v[1])
        };
        let mut p = program(f, vec![0.0, 0.0], vec![1.0, 1.0]);
        p.complementary_pairs = vec![(0, 1)];
        let mut rep = SolveReport {
            point: vec![0.5, 0.3],
            value: -0.008,
            status: SolveStatus::Converged,
            constraint_residual: 0.0,
            stationarity: 0.0,
            iterations: 0,
            curvature: None,
        };
        net_pairs(&mut p, &mut rep);
        assert!((rep.point[0] - 0.2).abs() < 1e-15 && rep.point[1] == 0.0);
        let best = multistart(&mut p, &[vec![0.0, 0.0], vec![1.0, 0.8]], SolverOptions::default()).unwrap();
        assert!(best.point[1] == 0.0);
        assert!((best.point[0] - 0.195).abs() < 1e-7);
    }

    #[test]
    fn rosenbrock_in_box() {
        let f = |v: &[f64], g: &mut [f64]| {
            let (x, y) = (v[0], v[1]);
            g[0] = 2.0 * (1.0 - x) + 400.0 * x * (y - x * x);
            g[1] = -200.0 * (y - x * x);
            -((1.0 - x).powi(2) + 100.0 * (y - x * x).powi(2))
        };
        let mut p = program(f, vec![-2.0, -2.0], vec![0.8, 2.0]);
        let r = maximize(&mut p, &[-1.2, 1.0], SolverOptions::default()).unwrap();
        assert!(r.converged(), "{r:?}");
        assert!((r.point[0] - 0.8).abs() < 1e-9 && (r.point[1] - 0.64).abs() < 1e-6);
    }
}
