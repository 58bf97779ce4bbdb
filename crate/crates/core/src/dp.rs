//! Backward value-function iteration for CRRA investors.
//!
//! With wealth `W` and pre-trade risky fractions `x`, the value function
//! separates as `W^(1-gamma) G(x, theta)` (or `log W + G` for log utility),
//! so only `G` is approximated, one complete Chebyshev surface per discrete
//! market state over the hypercube `[0, 1]^k`.
//!
//! Controls per node are `(d+_1..k, d-_1..k[, c])` as fractions of wealth.
//! Trading costs `y = sum(d+ - d-) + sum tau (d+ + d-)`, post-trade risky
//! holdings are `u = x + d+ - d-`, cash is `b = 1 - e'x - y - c dt`, and a
//! scenario with gross returns `R` gives growth `Pi = R'u + Rf b` and next
//! fractions `x' = (R o u) / Pi`.

use std::io::Write;
use std::sync::Arc;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::approx::{chebyshev_nodes, fit_with_basis, ChebyshevSurface, CompleteBasis, EvalScratch, HyperRectangle, TensorNodeGrid};
use crate::error::{Error, Result};
use crate::market::{binomial_return_pmf, lognormal_return_scenarios, merton_point, ParameterChain, ReturnScenarioSet};
use crate::nlp::{multistart_from, SmoothProgram, SolveStatus, SolverOptions};

/// Lower bound on the consumption rate (per unit wealth and year).
pub const MIN_CONSUMPTION: f64 = 1e-10;

/// How the continuation value enters the Bellman objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Preference {
    /// Utility of terminal wealth only.
    TerminalWealth { gamma: f64 },
    /// Time-separable utility of consumption.
    Consumption { gamma: f64, beta: f64 },
    /// Recursive utility with `gamma = 1/IES` and risk aversion `psi`. The
    /// carried surface is the certainty-equivalent factor
    /// `((1 - gamma) g)^(1 / (1 - gamma))`.
    EpsteinZin { gamma: f64, psi: f64, beta: f64 },
}

impl Preference {
    pub fn consumes(&self) -> bool {
        !matches!(self, Preference::TerminalWealth { .. })
    }

    pub fn gamma(&self) -> f64 {
        match *self {
            Preference::TerminalWealth { gamma } | Preference::Consumption { gamma, .. } | Preference::EpsteinZin { gamma, .. } => gamma,
        }
    }

    pub fn beta(&self) -> f64 {
        match *self {
            Preference::TerminalWealth { .. } => 1.0,
            Preference::Consumption { beta, .. } | Preference::EpsteinZin { beta, .. } => beta,
        }
    }

    fn is_log(&self) -> bool {
        !matches!(self, Preference::EpsteinZin { .. }) && (self.gamma() - 1.0).abs() < 1e-12
    }

    pub fn validate(&self) -> Result<()> {
        let g = self.gamma();
        if !(g > 0.0 && g.is_finite()) {
            return Err(Error::Parameter(format!("risk aversion {g} must be positive")));
        }
        let b = self.beta();
        if self.consumes() && !(b > 0.0 && b < 1.0) {
            return Err(Error::Parameter(format!("discount factor {b} must lie in (0, 1)")));
        }
        if let Preference::EpsteinZin { gamma, psi, .. } = *self {
            if !(psi > 0.0 && psi.is_finite()) || (psi - 1.0).abs() < 1e-12 || (gamma - 1.0).abs() < 1e-12 {
                return Err(Error::Parameter("Epstein-Zin needs psi > 0 and psi, gamma different from 1".into()));
            }
        }
        Ok(())
    }

    /// Terminal value factor for liquidation value `l = 1 - tau'x` at rate `r`.
    ///
    /// Consumption models live on the interest of the liquidated wealth
    /// forever after the horizon.
    pub fn terminal_value(&self, r: f64, liquidation: f64, dt: f64) -> f64 {
        match *self {
            Preference::TerminalWealth { gamma } => {
                if self.is_log() {
                    0.0
                } else {
                    1.0 / (1.0 - gamma)
                }
            }
            Preference::Consumption { gamma, beta } => {
                let base = r * liquidation;
                if self.is_log() {
                    dt / (1.0 - beta) * base.ln()
                } else {
                    base.powf(1.0 - gamma) * dt / ((1.0 - gamma) * (1.0 - beta))
                }
            }
            Preference::EpsteinZin { gamma, beta, .. } => r * liquidation * (dt / (1.0 - beta)).powf(1.0 / (1.0 - gamma)),
        }
    }

    /// Maps an optimal Bellman objective value to the carried surface value.
    pub fn carried(&self, objective: f64) -> f64 {
        match *self {
            Preference::EpsteinZin { gamma, .. } => ((1.0 - gamma) * objective).powf(1.0 / (1.0 - gamma)),
            _ => objective,
        }
    }

    /// Value factor `V / W^(1-gamma)` (or `V - a log W`) from a carried value.
    pub fn value_factor(&self, carried: f64) -> f64 {
        match *self {
            Preference::EpsteinZin { gamma, .. } => carried.powf(1.0 - gamma) / (1.0 - gamma),
            _ => carried,
        }
    }

    /// Certainty equivalent per unit of wealth of a value factor `v`.
    pub fn certainty_equivalent(&self, v: f64, dt: f64) -> f64 {
        let gamma = self.gamma();
        if self.is_log() {
            match *self {
                Preference::Consumption { beta, .. } => (v * (1.0 - beta) / dt).exp(),
                _ => v.exp(),
            }
        } else {
            ((1.0 - gamma) * v).powf(1.0 / (1.0 - gamma))
        }
    }
}

/// Scenario table of one period: gross returns per leg, probabilities and
/// the continuation surface used by each scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioTable {
    pub k: usize,
    /// Row-major `n x k`; zero is allowed (an option expiring worthless).
    pub returns: Vec<f64>,
    pub weights: Vec<f64>,
    pub continuation: Vec<usize>,
}

impl ScenarioTable {
    pub fn from_set(set: &ReturnScenarioSet, continuation: usize) -> Self {
        Self {
            k: set.k(),
            returns: (0..set.len()).flat_map(|j| set.returns(j).to_vec()).collect(),
            weights: set.weights().to_vec(),
            continuation: vec![continuation; set.len()],
        }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

/// Everything needed to solve the Bellman subproblem at any point `x` of
/// one period and discrete state.
#[derive(Debug, Clone)]
pub struct StageProblem<'a> {
    pub preference: Preference,
    pub tau: Vec<f64>,
    pub rf: f64,
    pub dt: f64,
    pub scenarios: ScenarioTable,
    pub continuations: &'a [ChebyshevSurface],
    /// Post-trade holdings tried as a structured start.
    pub target: Vec<f64>,
    /// Legs whose post-trade holding is forced to zero.
    pub frozen: Vec<bool>,
    pub options: SolverOptions,
}

/// Optimal controls at one point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeDecision {
    pub buy: Vec<f64>,
    pub sell: Vec<f64>,
    pub consumption: Option<f64>,
    /// Optimal Bellman objective.
    pub objective: f64,
    pub status: SolveStatus,
    pub iterations: usize,
}

impl NodeDecision {
    pub fn controls(&self) -> Vec<f64> {
        let mut v = self.buy.clone();
        v.extend_from_slice(&self.sell);
        if let Some(c) = self.consumption {
            v.push(c);
        }
        v
    }

    /// True if no leg trades more than `tol`.
    pub fn is_no_trade(&self, tol: f64) -> bool {
        self.buy.iter().chain(&self.sell).all(|d| d.abs() <= tol)
    }

    /// Post-trade holdings `x + d+ - d-`.
    pub fn post_trade(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(self.buy.iter().zip(&self.sell)).map(|(x, (p, m))| x + p - m).collect()
    }
}

struct KernelScratch {
    eval: EvalScratch,
    u: Vec<f64>,
    xn: Vec<f64>,
    hg: Vec<f64>,
    mu: Vec<f64>,
}

impl KernelScratch {
    fn new(k: usize) -> Self {
        Self { eval: EvalScratch::new(), u: vec![0.0; k], xn: vec![0.0; k], hg: vec![0.0; k], mu: vec![0.0; k] }
    }
}

impl<'a> StageProblem<'a> {
    pub fn k(&self) -> usize {
        self.scenarios.k
    }

    pub fn n_controls(&self) -> usize {
        2 * self.k() + usize::from(self.preference.consumes())
    }

    /// Bellman objective at pre-trade fractions `x` and controls `v`,
    /// writing its gradient; NaN outside the objective's domain.
    pub fn objective(&self, x: &[f64], v: &[f64], grad: &mut [f64]) -> f64 {
        let mut scratch = KernelScratch::new(self.k());
        self.objective_with(x, v, grad, &mut scratch)
    }

    fn objective_with(&self, x: &[f64], v: &[f64], grad: &mut [f64], s: &mut KernelScratch) -> f64 {
        let k = self.k();
        let dt = self.dt;
        let consumes = self.preference.consumes();
        let c = if consumes { v[2 * k] } else { 0.0 };
        let mut y = 0.0;
        let mut ex = 0.0;
        for i in 0..k {
            let (p, m) = (v[i], v[k + i]);
            y += p - m + self.tau[i] * (p + m);
            s.u[i] = x[i] + p - m;
            ex += x[i];
        }
        let b = 1.0 - ex - y - c * dt;
        let rf = self.rf;

        // accumulate M = E[F] and its partials in u and b
        let mut m_val = 0.0;
        let mut m_b = 0.0;
        s.mu.iter_mut().for_each(|g| *g = 0.0);
        let (exponent, psi_transform) = match self.preference {
            Preference::EpsteinZin { psi, .. } => (psi, true),
            p => (p.gamma(), false),
        };
        let log = self.preference.is_log();
        let log_factor = match self.preference {
            Preference::Consumption { beta, .. } => dt / (1.0 - beta),
            _ => 1.0,
        };
        let sc = &self.scenarios;
        for j in 0..sc.len() {
            let r = &sc.returns[j * k..(j + 1) * k];
            let w = sc.weights[j];
            let mut pi = rf * b;
            for i in 0..k {
                pi += r[i] * s.u[i];
            }
            if !(pi > 0.0) {
                return f64::NAN;
            }
            for i in 0..k {
                s.xn[i] = r[i] * s.u[i] / pi;
            }
            let surf = &self.continuations[sc.continuation[j]];
            let mut h = surf.value_grad_with(&s.xn, &mut s.hg, &mut s.eval);
            if log {
                let hx: f64 = s.hg.iter().zip(&s.xn).map(|(g, x)| g * x).sum();
                let a = (log_factor - hx) / pi;
                m_val += w * (log_factor * pi.ln() + h);
                for i in 0..k {
                    s.mu[i] += w * (a * r[i] + s.hg[i] * r[i] / pi);
                }
                m_b += w * a * rf;
                continue;
            }
            if psi_transform {
                if !(h > 0.0) {
                    return f64::NAN;
                }
                let hp = h.powf(-exponent);
                for g in s.hg.iter_mut() {
                    *g *= (1.0 - exponent) * hp;
                }
                h *= hp;
            }
            let hx: f64 = s.hg.iter().zip(&s.xn).map(|(g, x)| g * x).sum();
            let pe = pi.powf(-exponent);
            let a = pe * ((1.0 - exponent) * h - hx);
            m_val += w * pe * pi * h;
            for i in 0..k {
                s.mu[i] += w * (a * r[i] + pe * s.hg[i] * r[i]);
            }
            m_b += w * a * rf;
        }

        let gamma = self.preference.gamma();
        let (mut f, f_m, dc) = match self.preference {
            Preference::TerminalWealth { .. } => (m_val, 1.0, 0.0),
            Preference::Consumption { beta, .. } => {
                if !(c > 0.0) {
                    return f64::NAN;
                }
                if log {
                    (dt * c.ln() + beta * m_val, beta, dt / c)
                } else {
                    (dt * c.powf(1.0 - gamma) / (1.0 - gamma) + beta * m_val, beta, dt * c.powf(-gamma))
                }
            }
            Preference::EpsteinZin { psi, beta, .. } => {
                if !(c > 0.0 && m_val > 0.0) {
                    return f64::NAN;
                }
                let e = (1.0 - gamma) / (1.0 - psi);
                let me = m_val.powf(e);
                (dt * c.powf(1.0 - gamma) / (1.0 - gamma) + beta / (1.0 - gamma) * me, beta / (1.0 - psi) * me / m_val, dt * c.powf(-gamma))
            }
        };
        for i in 0..k {
            grad[i] = f_m * (s.mu[i] - (1.0 + self.tau[i]) * m_b);
            grad[k + i] = f_m * (-s.mu[i] + (1.0 - self.tau[i]) * m_b);
        }
        if consumes {
            grad[2 * k] = dc - f_m * m_b * dt;
        }
        if !f.is_finite() {
            f = f64::NAN;
        }
        f
    }

    fn bounds(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let k = self.k();
        let n = self.n_controls();
        let mut lower = vec![0.0; n];
        let mut upper = vec![0.0; n];
        for i in 0..k {
            if self.frozen[i] {
                // sell the whole position, buy nothing
                lower[k + i] = x[i];
                upper[k + i] = x[i];
            } else {
                // selling is capped by the no-short row alone; a separate
                // bound would make the sell-everything vertex degenerate
                upper[i] = 1.0;
                upper[k + i] = f64::INFINITY;
            }
        }
        if self.preference.consumes() {
            // strictly positive: with gamma < 1 the utility is finite at zero
            // but its slope is not, and steps would land on the bound
            lower[2 * k] = MIN_CONSUMPTION;
            upper[2 * k] = 1.0 / self.dt;
        }
        (lower, upper)
    }

    fn rows(&self, x: &[f64]) -> (Vec<Vec<f64>>, Vec<f64>) {
        let k = self.k();
        let n = self.n_controls();
        let mut rows = Vec::with_capacity(k + 1);
        let mut rhs = Vec::with_capacity(k + 1);
        // no shorting: -(d+ - d-) <= x
        for i in 0..k {
            let mut a = vec![0.0; n];
            a[i] = -1.0;
            a[k + i] = 1.0;
            rows.push(a);
            rhs.push(x[i]);
        }
        // no borrowing: y + c dt <= 1 - e'x
        let mut a = vec![0.0; n];
        for i in 0..k {
            a[i] = 1.0 + self.tau[i];
            a[k + i] = -(1.0 - self.tau[i]);
        }
        if self.preference.consumes() {
            a[2 * k] = self.dt;
        }
        rows.push(a);
        rhs.push(1.0 - x.iter().sum::<f64>());
        (rows, rhs)
    }

    /// Controls that trade `x` to `target` (clipped into the constraints),
    /// with a default consumption rate.
    fn start_towards(&self, x: &[f64], target: &[f64], lower: &[f64], upper: &[f64]) -> Vec<f64> {
        let k = self.k();
        let mut v = vec![0.0; self.n_controls()];
        for i in 0..k {
            let d = target[i] - x[i];
            v[i] = d.max(0.0);
            v[k + i] = (-d).max(0.0);
        }
        for i in 0..v.len() {
            v[i] = v[i].clamp(lower[i], upper[i]);
        }
        let cost = |v: &[f64]| (0..k).map(|i| v[i] - v[k + i] + self.tau[i] * (v[i] + v[k + i])).sum::<f64>();
        let ex: f64 = x.iter().sum();
        // scale purchases down until they fit the budget
        let mut slack = 1.0 - ex - cost(&v);
        if slack < 0.0 {
            let buys: f64 = (0..k).map(|i| (v[i] - lower[i]) * (1.0 + self.tau[i])).sum();
            if buys > 0.0 {
                let shrink = ((buys + slack) / buys).max(0.0);
                for i in 0..k {
                    v[i] = lower[i] + (v[i] - lower[i]) * shrink;
                }
            }
            slack = 1.0 - ex - cost(&v);
        }
        // then sell proportionally if cash is still negative
        let reserve = if self.preference.consumes() { 0.02 } else { 0.0 };
        if slack < reserve {
            let room: Vec<f64> = (0..k).map(|i| (x[i] + v[i] - v[k + i]).max(0.0)).collect();
            let capacity: f64 = (0..k).map(|i| room[i] * (1.0 - self.tau[i])).sum();
            if capacity > 0.0 {
                let theta = ((reserve - slack) / capacity).min(1.0);
                for i in 0..k {
                    v[k + i] += theta * room[i];
                }
            }
            slack = 1.0 - ex - cost(&v);
        }
        if self.preference.consumes() {
            let c = if slack > 0.0 { (0.5 * slack / self.dt).min(0.05) } else { 0.0 };
            let c = c.max(MIN_CONSUMPTION);
            v[2 * k] = c;
        }
        v
    }

    /// Solves the subproblem at `x`, trying no trade, trading to the
    /// target, and `warm` if given.
    pub fn solve(&self, x: &[f64], warm: Option<&[f64]>) -> Result<NodeDecision> {
        Ok(self.solve_from(x, warm, None)?.0)
    }

    /// [`Self::solve`] seeded with the curvature model of a nearby solve;
    /// also returns the final model.
    pub fn solve_from(&self, x: &[f64], warm: Option<&[f64]>, curvature: Option<&DMatrix<f64>>) -> Result<(NodeDecision, Option<DMatrix<f64>>)> {
        let k = self.k();
        if x.len() != k {
            return Err(Error::Dimension { expected: k, found: x.len() });
        }
        let (lower, upper) = self.bounds(x);
        let (rows, rhs) = self.rows(x);
        let mut starts = vec![self.start_towards(x, x, &lower, &upper), self.start_towards(x, &self.target, &lower, &upper)];
        if let Some(w) = warm {
            if w.len() == self.n_controls() {
                let mut w = w.to_vec();
                for i in 0..w.len() {
                    w[i] = w[i].clamp(lower[i], upper[i]);
                }
                starts.push(w);
            }
        }
        let mut scratch = KernelScratch::new(k);
        let xs = x.to_vec();
        let mut program = SmoothProgram {
            objective: |v: &[f64], g: &mut [f64]| self.objective_with(&xs, v, g, &mut scratch),
            lower,
            upper,
            rows,
            rhs,
            complementary_pairs: (0..k).map(|i| (i, k + i)).collect(),
        };
        let rep = multistart_from(&mut program, &starts, self.options, curvature)?;
        if rep.status == SolveStatus::Infeasible {
            return Err(Error::Numerical(format!("infeasible subproblem at x = {x:?}")));
        }
        if !rep.value.is_finite() {
            return Err(Error::Numerical(format!("no finite objective value at x = {x:?}")));
        }
        let p = rep.point;
        let decision = NodeDecision {
            buy: p[..k].to_vec(),
            sell: p[k..2 * k].to_vec(),
            consumption: self.preference.consumes().then(|| p[2 * k]),
            objective: rep.value,
            status: rep.status,
            iterations: rep.iterations,
        };
        Ok((decision, rep.curvature))
    }
}

/// Return-generating process of a portfolio model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ReturnModel {
    /// Lognormal returns discretized by product Gauss–Hermite quadrature.
    Lognormal { order: usize },
    /// Single-asset binomial returns over `substeps` lattice steps per period.
    Binomial { substeps: usize },
}

/// A no-option portfolio model over a (possibly single-state) Markov chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PortfolioModel {
    pub chain: ParameterChain,
    pub gamma: f64,
    pub horizon: f64,
    pub dt: f64,
    pub consumption: bool,
    /// Utility discount rate; used by consumption models.
    pub rho: f64,
    pub degree: usize,
    pub returns: ReturnModel,
    /// Nodes per dimension; `degree + 1` if absent.
    pub nodes: Option<usize>,
}

impl PortfolioModel {
    pub fn k(&self) -> usize {
        self.chain.k()
    }

    pub fn periods(&self) -> Result<usize> {
        let n = self.horizon / self.dt;
        let rounded = n.round();
        if !(self.dt > 0.0 && self.horizon > 0.0) || rounded < 1.0 || (n - rounded).abs() > 1e-9 * n.max(1.0) {
            return Err(Error::Parameter("horizon not integer periods".into()));
        }
        Ok(rounded as usize)
    }

    pub fn preference(&self) -> Preference {
        if self.consumption {
            Preference::Consumption { gamma: self.gamma, beta: (-self.rho * self.dt).exp() }
        } else {
            Preference::TerminalWealth { gamma: self.gamma }
        }
    }

    pub fn nodes_per_dim(&self) -> usize {
        self.nodes.unwrap_or(self.degree + 1)
    }

    pub fn validate(&self) -> Result<()> {
        self.chain.validate()?;
        self.periods()?;
        self.preference().validate()?;
        if self.nodes_per_dim() < self.degree + 1 {
            return Err(Error::Parameter("fewer nodes than degree + 1".into()));
        }
        if let ReturnModel::Binomial { .. } = self.returns {
            if self.k() != 1 {
                return Err(Error::Parameter("binomial returns support one risky asset".into()));
            }
        }
        self.scenario_sets()?;
        Ok(())
    }

    pub fn domain(&self) -> HyperRectangle {
        HyperRectangle::unit(self.k())
    }

    pub fn grid(&self) -> Result<TensorNodeGrid> {
        chebyshev_nodes(self.nodes_per_dim(), &self.domain())
    }

    /// One-period scenario set per discrete state.
    pub fn scenario_sets(&self) -> Result<Vec<ReturnScenarioSet>> {
        self.chain
            .states
            .iter()
            .map(|p| match self.returns {
                ReturnModel::Lognormal { order } => lognormal_return_scenarios(p, self.dt, order),
                ReturnModel::Binomial { substeps } => {
                    Ok(binomial_return_pmf(p.mu[0], p.sigma[0], self.dt, substeps)?.with_risk_free((p.r * self.dt).exp()))
                }
            })
            .collect()
    }

    /// Merton point per discrete state.
    pub fn merton_points(&self) -> Result<Vec<Vec<f64>>> {
        self.chain.states.iter().map(|p| merton_point(p, self.gamma)).collect()
    }
}

/// Carried surfaces of one time, one per discrete state.
#[derive(Debug, Clone)]
pub struct ValueSurface {
    pub time_index: usize,
    pub surfaces: Vec<ChebyshevSurface>,
}

/// Optimal controls at the approximation nodes of one period.
#[derive(Debug, Clone)]
pub struct StagePolicy {
    pub time_index: usize,
    pub nodes: Vec<Vec<f64>>,
    /// `decisions[state][node]`
    pub decisions: Vec<Vec<NodeDecision>>,
}

impl StagePolicy {
    pub fn non_converged(&self) -> usize {
        self.decisions.iter().flatten().filter(|d| d.status != SolveStatus::Converged).count()
    }

    /// CSV rows `t, state, x_1..x_k, buy_1..k, sell_1..k, c` with 17 significant digits.
    pub fn write_csv(&self, mut out: impl Write) -> Result<()> {
        let k = self.nodes.first().map_or(0, Vec::len);
        let mut header = vec!["time".to_string(), "state".to_string()];
        header.extend((1..=k).map(|i| format!("x{i}")));
        header.extend((1..=k).map(|i| format!("buy{i}")));
        header.extend((1..=k).map(|i| format!("sell{i}")));
        header.push("consumption".into());
        writeln!(out, "{}", header.join(","))?;
        for (s, decisions) in self.decisions.iter().enumerate() {
            for (x, d) in self.nodes.iter().zip(decisions) {
                let mut fields = vec![self.time_index.to_string(), s.to_string()];
                fields.extend(x.iter().chain(&d.buy).chain(&d.sell).map(|v| fmt17(*v)));
                fields.push(d.consumption.map(fmt17).unwrap_or_default());
                writeln!(out, "{}", fields.join(","))?;
            }
        }
        Ok(())
    }
}

/// Shortest decimal form that round-trips, capped at 17 significant digits.
pub fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

/// Constant or closed-form terminal surfaces.
pub fn terminal_surface(model: &PortfolioModel) -> Result<ValueSurface> {
    model.validate()?;
    let pref = model.preference();
    let grid = model.grid()?;
    let basis = Arc::new(CompleteBasis::new(model.degree, model.k()));
    let surfaces = model
        .chain
        .states
        .iter()
        .map(|p| {
            let values: Vec<f64> = grid
                .points()
                .map(|x| {
                    let liq = 1.0 - x.iter().zip(&p.tau).map(|(a, t)| a * t).sum::<f64>();
                    pref.terminal_value(p.r, liq, model.dt)
                })
                .collect();
            fit_with_basis(&grid, &values, basis.clone())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ValueSurface { time_index: model.periods()?, surfaces })
}

/// Stage problems of one period for every discrete state.
pub struct StageContext {
    pub preference: Preference,
    pub dt: f64,
    pub tau: Vec<Vec<f64>>,
    pub rf: Vec<f64>,
    pub targets: Vec<Vec<f64>>,
    pub tables: Vec<ScenarioTable>,
    /// Markov-mixed continuation surface per current state.
    pub continuations: Vec<ChebyshevSurface>,
    pub options: SolverOptions,
}

impl StageContext {
    pub fn new(model: &PortfolioModel, next: &ValueSurface) -> Result<Self> {
        let sets = model.scenario_sets()?;
        let n = model.chain.len();
        if next.surfaces.len() != n {
            return Err(Error::Dimension { expected: n, found: next.surfaces.len() });
        }
        let continuations = (0..n)
            .map(|s| {
                let refs: Vec<&ChebyshevSurface> = next.surfaces.iter().collect();
                ChebyshevSurface::linear_combination(&model.chain.transition[s], &refs)
            })
            .collect::<Result<Vec<_>>>()?;
        let targets = model.merton_points()?.into_iter().map(|m| m.into_iter().map(|v| v.clamp(0.0, 1.0)).collect()).collect();
        Ok(Self {
            preference: model.preference(),
            dt: model.dt,
            tau: model.chain.states.iter().map(|p| p.tau.clone()).collect(),
            rf: sets.iter().map(|s| s.risk_free()).collect(),
            targets,
            tables: sets.iter().enumerate().map(|(s, set)| ScenarioTable::from_set(set, s)).collect(),
            continuations,
            options: SolverOptions::default(),
        })
    }

    pub fn problem(&self, state: usize) -> StageProblem<'_> {
        let k = self.tables[state].k;
        StageProblem {
            preference: self.preference,
            tau: self.tau[state].clone(),
            rf: self.rf[state],
            dt: self.dt,
            scenarios: self.tables[state].clone(),
            continuations: &self.continuations,
            target: self.targets[state].clone(),
            frozen: vec![false; k],
            options: self.options,
        }
    }
}

/// Solves `problem` at every grid node. Nodes along the last axis form a
/// line solved in order with warm starts; lines run in parallel and results
/// are placed by index, so the output does not depend on the worker count.
pub fn solve_nodes(grid: &TensorNodeGrid, problem: &StageProblem<'_>) -> Result<Vec<NodeDecision>> {
    Ok(solve_nodes_many(grid, std::slice::from_ref(problem))?.pop().expect("one problem"))
}

/// [`solve_nodes`] for several problems on the same grid, with the lines of
/// all problems sharing one parallel pool.
pub fn solve_nodes_many(grid: &TensorNodeGrid, problems: &[StageProblem<'_>]) -> Result<Vec<Vec<NodeDecision>>> {
    let m = grid.nodes_per_dim();
    let lines = grid.len() / m;
    let solved: Vec<Result<Vec<NodeDecision>>> = (0..lines * problems.len())
        .into_par_iter()
        .map(|job| {
            let (problem, line) = (&problems[job / lines], job % lines);
            let mut out: Vec<NodeDecision> = Vec::with_capacity(m);
            let mut x = vec![0.0; grid.dim()];
            let mut curvature = None;
            for i in 0..m {
                grid.point_into(line * m + i, &mut x);
                let warm = out.last().map(NodeDecision::controls);
                let (d, c) = problem.solve_from(&x, warm.as_deref(), curvature.as_ref())?;
                out.push(d);
                curvature = c;
            }
            Ok(out)
        })
        .collect();
    let mut all = Vec::with_capacity(problems.len());
    let mut current = Vec::with_capacity(grid.len());
    for r in solved {
        current.extend(r?);
        if current.len() == grid.len() {
            all.push(std::mem::replace(&mut current, Vec::with_capacity(grid.len())));
        }
    }
    Ok(all)
}

/// One backward step from `next` (time `t + dt`) to time `t`.
pub fn bellman_step(model: &PortfolioModel, next: &ValueSurface, t: usize) -> Result<(ValueSurface, StagePolicy)> {
    let grid = model.grid()?;
    let basis = next.surfaces[0].basis().clone();
    let ctx = StageContext::new(model, next)?;
    let problems: Vec<StageProblem<'_>> = (0..model.chain.len()).map(|s| ctx.problem(s)).collect();
    let decisions = solve_nodes_many(&grid, &problems)?;
    let surfaces = decisions
        .iter()
        .map(|nodes| {
            let values: Vec<f64> = nodes.iter().map(|d| ctx.preference.carried(d.objective)).collect();
            fit_with_basis(&grid, &values, basis.clone())
        })
        .collect::<Result<Vec<_>>>()?;
    let policy = StagePolicy { time_index: t, nodes: grid.points().collect(), decisions };
    Ok((ValueSurface { time_index: t, surfaces }, policy))
}

/// Surfaces for `t = N, N-1, ..., 0` (index by time) and policies for
/// `t = 0..N-1`.
pub fn solve_horizon(model: &PortfolioModel) -> Result<(Vec<ValueSurface>, Vec<StagePolicy>)> {
    let n = model.periods()?;
    let mut surfaces = vec![terminal_surface(model)?];
    let mut policies = Vec::with_capacity(n);
    for t in (0..n).rev() {
        let (s, p) = bellman_step(model, surfaces.last().unwrap(), t)?;
        surfaces.push(s);
        policies.push(p);
    }
    surfaces.reverse();
    policies.reverse();
    Ok((surfaces, policies))
}

/// Like [`solve_horizon`] but keeps only the surfaces at times 0 and 1 and
/// the policy at time 0.
pub fn solve_horizon_initial(model: &PortfolioModel) -> Result<(ValueSurface, ValueSurface, StagePolicy)> {
    let n = model.periods()?;
    let mut next = terminal_surface(model)?;
    let mut out = None;
    for t in (0..n).rev() {
        let (s, p) = bellman_step(model, &next, t)?;
        if t == 0 {
            out = Some((s, next, p));
            break;
        }
        next = s;
    }
    Ok(out.expect("at least one period"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::MarketParams;

    fn model(k: usize, consumption: bool) -> PortfolioModel {
        PortfolioModel {
            chain: ParameterChain::single(MarketParams::iid(k, 0.03, 0.07, 0.2, 0.001)),
            gamma: 3.0,
            horizon: 1.0 / 52.0,
            dt: 1.0 / 52.0,
            consumption,
            rho: 0.05,
            degree: 6,
            returns: ReturnModel::Lognormal { order: 3 },
            nodes: None,
        }
    }

    #[test]
    fn terminal_values() {
        let t = terminal_surface(&model(2, false)).unwrap();
        let e = t.surfaces[0].evaluate(&[0.4, 0.1]).unwrap().value;
        assert!((e + 0.5).abs() < 1e-14);
        let m = model(2, true);
        let t = terminal_surface(&m).unwrap();
        let beta = (-0.05f64 / 52.0).exp();
        let at0 = t.surfaces[0].evaluate(&[0.0, 0.0]).unwrap().value;
        let want = 0.03f64.powf(-2.0) / 52.0 / (-2.0 * (1.0 - beta));
        assert!((at0 / want - 1.0).abs() < 1e-9);
    }

    #[test]
    fn rejects_fractional_horizon() {
        let mut m = model(1, false);
        m.horizon = 0.3;
        m.dt = 0.25;
        assert!(matches!(m.validate(), Err(Error::Parameter(s)) if s.contains("horizon not integer periods")));
    }

    fn fd_check(problem: &StageProblem<'_>, x: &[f64], v: &[f64]) {
        let n = v.len();
        let mut g = vec![0.0; n];
        let f = problem.objective(x, v, &mut g);
        assert!(f.is_finite());
        let mut scratch = vec![0.0; n];
        for i in 0..n {
            let h = 1e-6;
            let mut vp = v.to_vec();
            let mut vm = v.to_vec();
            vp[i] += h;
            vm[i] -= h;
            let fd = (problem.objective(x, &vp, &mut scratch) - problem.objective(x, &vm, &mut scratch)) / (2.0 * h);
            assert!((fd - g[i]).abs() <= 1e-5 * g[i].abs().max(1e-3), "control {i}: fd {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let dom = HyperRectangle::unit(2);
        let grid = chebyshev_nodes(7, &dom).unwrap();
        let vals: Vec<f64> = grid.points().map(|p| -0.5 - 0.1 * (p[0] - 0.3).powi(2) + 0.05 * p[0] * p[1]).collect();
        let ghat: Vec<f64> = grid.points().map(|p| 0.6 + 0.1 * p[0] - 0.05 * p[1] * p[1]).collect();
        let surf = vec![fit_complete_for_test(&grid, &vals)];
        let surf_pos = vec![fit_complete_for_test(&grid, &ghat)];
        let set = lognormal_return_scenarios(&MarketParams::iid(2, 0.03, 0.07, 0.2, 0.002), 1.0 / 12.0, 3).unwrap();
        let prefs = [
            (Preference::TerminalWealth { gamma: 3.0 }, &surf),
            (Preference::TerminalWealth { gamma: 1.0 }, &surf),
            (Preference::Consumption { gamma: 3.0, beta: 0.99 }, &surf),
            (Preference::Consumption { gamma: 1.0, beta: 0.99 }, &surf),
            (Preference::EpsteinZin { gamma: 2.0, psi: 5.0, beta: 0.99 }, &surf_pos),
            (Preference::EpsteinZin { gamma: 2.0 / 3.0, psi: 5.0, beta: 0.99 }, &surf_pos),
        ];
        for (pref, s) in prefs {
            let p = StageProblem {
                preference: pref,
                tau: vec![0.002, 0.003],
                rf: set.risk_free(),
                dt: 1.0 / 12.0,
                scenarios: ScenarioTable::from_set(&set, 0),
                continuations: s,
                target: vec![0.3, 0.3],
                frozen: vec![false; 2],
                options: SolverOptions::default(),
            };
            let mut v = vec![0.05, 0.0, 0.0, 0.1];
            if pref.consumes() {
                v.push(0.3);
            }
            fd_check(&p, &[0.3, 0.4], &v);
        }
    }

    fn fit_complete_for_test(grid: &TensorNodeGrid, values: &[f64]) -> ChebyshevSurface {
        crate::approx::fit_complete(grid, values, 6).unwrap()
    }

    #[test]
    fn one_period_matches_grid_scan() {
        // tau = 0, one asset, one period: optimum of E[(R u + Rf (1 - u))^(1-gamma)] / (1-gamma)
        let mut m = model(1, false);
        m.chain = ParameterChain::single(MarketParams::iid(1, 0.03, 0.07, 0.2, 0.0));
        m.dt = 0.25;
        m.horizon = 0.25;
        m.returns = ReturnModel::Lognormal { order: 5 };
        let (_, policies) = solve_horizon(&m).unwrap();
        let set = m.scenario_sets().unwrap().remove(0);
        let value = |u: f64| set.iter().map(|(r, w)| w * (r[0] * u + set.risk_free() * (1.0 - u)).powi(-2) / -2.0).sum::<f64>();
        let best = (0..=10_000).map(|i| i as f64 * 1e-4).max_by(|a, b| value(*a).total_cmp(&value(*b))).unwrap();
        for (x, d) in policies[0].nodes.iter().zip(&policies[0].decisions[0]) {
            let u = d.post_trade(x)[0];
            assert!((u - best).abs() < 2e-4, "x {x:?}: u {u} vs {best}");
        }
    }
}
