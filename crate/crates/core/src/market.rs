//! Return processes, cost data, Markov parameter chains and the Merton point.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quadrature::{cholesky_psd, normal_nodes};

/// Market parameters of one discrete state, in annual units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarketParams {
    pub r: f64,
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    /// Row-major `k x k` correlation matrix.
    pub corr: Vec<Vec<f64>>,
    /// Proportional transaction cost per risky asset.
    pub tau: Vec<f64>,
}

impl MarketParams {
    /// `k` uncorrelated assets sharing drift, volatility and cost.
    pub fn iid(k: usize, r: f64, mu: f64, sigma: f64, tau: f64) -> Self {
        let corr = (0..k).map(|i| (0..k).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
        Self { r, mu: vec![mu; k], sigma: vec![sigma; k], corr, tau: vec![tau; k] }
    }

    pub fn k(&self) -> usize {
        self.mu.len()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.k();
        if k == 0 {
            return Err(Error::Parameter("at least one risky asset is required".into()));
        }
        for (name, len) in [("sigma", self.sigma.len()), ("tau", self.tau.len()), ("corr", self.corr.len())] {
            if len != k {
                return Err(Error::Parameter(format!("{name} has length {len}, expected {k}")));
            }
        }
        if !self.r.is_finite() || self.mu.iter().any(|m| !m.is_finite()) {
            return Err(Error::Parameter("rates must be finite".into()));
        }
        if self.sigma.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(Error::Parameter("volatilities must be finite and nonnegative".into()));
        }
        if self.tau.iter().any(|t| !(t.is_finite() && *t >= 0.0 && *t < 1.0)) {
            return Err(Error::Parameter("transaction costs must lie in [0, 1)".into()));
        }
        for (i, row) in self.corr.iter().enumerate() {
            if row.len() != k {
                return Err(Error::Parameter(format!("corr row {i} has length {}, expected {k}", row.len())));
            }
            if (row[i] - 1.0).abs() > 1e-12 {
                return Err(Error::Parameter(format!("corr diagonal entry {i} is {}, expected 1", row[i])));
            }
            if row.iter().any(|c| !(c.is_finite() && c.abs() <= 1.0 + 1e-12)) {
                return Err(Error::Parameter(format!("corr row {i} has entries outside [-1, 1]")));
            }
        }
        cholesky_psd(&self.corr_matrix())?;
        Ok(())
    }

    pub fn corr_matrix(&self) -> DMatrix<f64> {
        let k = self.k();
        DMatrix::from_fn(k, k, |i, j| self.corr[i][j])
    }

    /// `Lambda Sigma Lambda` with `Lambda = diag(sigma)`.
    pub fn covariance(&self) -> DMatrix<f64> {
        let k = self.k();
        DMatrix::from_fn(k, k, |i, j| self.sigma[i] * self.corr[i][j] * self.sigma[j])
    }
}

/// Discrete return distribution for one period.
#[derive(Debug, Clone, PartialEq)]
pub struct ReturnScenarioSet {
    k: usize,
    /// Row-major `n x k` gross returns.
    returns: Vec<f64>,
    weights: Vec<f64>,
    rf: f64,
}

impl ReturnScenarioSet {
    pub fn new(k: usize, returns: Vec<f64>, weights: Vec<f64>, rf: f64) -> Result<Self> {
        if k == 0 || returns.len() != k * weights.len() {
            return Err(Error::Dimension { expected: k * weights.len(), found: returns.len() });
        }
        if returns.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
            return Err(Error::Parameter("gross returns must be positive".into()));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::Parameter("scenario weights must be positive".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-10 {
            return Err(Error::Parameter(format!("scenario weights sum to {total}")));
        }
        if !(rf.is_finite() && rf > 0.0) {
            return Err(Error::Parameter("risk-free return must be positive".into()));
        }
        Ok(Self { k, returns, weights, rf })
    }

    pub fn with_risk_free(mut self, rf: f64) -> Self {
        assert!(rf > 0.0, "risk-free return must be positive");
        self.rf = rf;
        self
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn returns(&self, j: usize) -> &[f64] {
        &self.returns[j * self.k..(j + 1) * self.k]
    }

    pub fn weight(&self, j: usize) -> f64 {
        self.weights[j]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn risk_free(&self) -> f64 {
        self.rf
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[f64], f64)> {
        self.returns.chunks_exact(self.k).zip(self.weights.iter().copied())
    }

    /// Probability-weighted mean gross return per asset.
    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.k];
        for (r, w) in self.iter() {
            for (acc, x) in m.iter_mut().zip(r) {
                *acc += w * x;
            }
        }
        m
    }
}

/// Gauss–Hermite discretization of
/// `log R_i = (mu_i - sigma_i^2/2) dt + sigma_i sqrt(dt) (L z)_i` with
/// `L L^T` the correlation matrix and `z` standard normal.
pub fn lognormal_return_scenarios(params: &MarketParams, dt: f64, order: usize) -> Result<ReturnScenarioSet> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::Parameter(format!("time step {dt} must be positive")));
    }
    params.validate()?;
    let k = params.k();
    let cov = params.covariance() * dt;
    let draws = normal_nodes(&cov, order)?;
    let mut returns = Vec::with_capacity(draws.len() * k);
    let mut weights = Vec::with_capacity(draws.len());
    for (z, w) in draws {
        for i in 0..k {
            let drift = (params.mu[i] - 0.5 * params.sigma[i] * params.sigma[i]) * dt;
            returns.push((drift + z[i]).exp());
        }
        weights.push(w);
    }
    ReturnScenarioSet::new(k, returns, weights, (params.r * dt).exp())
}

/// Up/down factors and physical probability of a binomial sub-step of length `h`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BinomialStep {
    pub u: f64,
    pub d: f64,
    pub p: f64,
    pub h: f64,
}

impl BinomialStep {
    pub fn new(mu: f64, sigma: f64, h: f64) -> Result<Self> {
        if !(sigma > 0.0 && h > 0.0) {
            return Err(Error::Parameter("binomial step needs positive sigma and h".into()));
        }
        let sh = sigma * h.sqrt();
        let p = 0.5 + (mu - 0.5 * sigma * sigma) / (2.0 * sigma) * h.sqrt();
        if !(p > 0.0 && p < 1.0) {
            return Err(Error::Parameter(format!("up probability {p} outside (0, 1); step too coarse for the drift")));
        }
        let u = sh.exp();
        Ok(Self { u, d: 1.0 / u, p, h })
    }

    /// Risk-neutral up probability `(e^{rh} - d)/(u - d)`.
    pub fn risk_neutral(&self, r: f64) -> f64 {
        ((r * self.h).exp() - self.d) / (self.u - self.d)
    }

    /// `u^j`; negative `j` counts down-moves.
    pub fn power(&self, j: i64) -> f64 {
        (j as f64 * self.u.ln()).exp()
    }
}

/// Pmf of the gross return over `n` binomial sub-steps covering `dt`.
/// Scenario `j` is `j` up-moves.
pub fn binomial_return_pmf(mu: f64, sigma: f64, dt: f64, n: usize) -> Result<ReturnScenarioSet> {
    if n == 0 || !(dt > 0.0) {
        return Err(Error::Parameter("binomial pmf needs n >= 1 and dt > 0".into()));
    }
    let step = BinomialStep::new(mu, sigma, dt / n as f64)?;
    let mut returns = Vec::with_capacity(n + 1);
    let mut weights = Vec::with_capacity(n + 1);
    let mut choose = 1.0f64;
    for j in 0..=n {
        if j > 0 {
            choose = choose * (n + 1 - j) as f64 / j as f64;
        }
        returns.push(step.power(2 * j as i64 - n as i64));
        weights.push(choose * step.p.powi(j as i32) * (1.0 - step.p).powi((n - j) as i32));
    }
    // probabilities are exact up to rounding; renormalize so they sum to one
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    // the risky pmf does not know the bond rate; callers attach it
    ReturnScenarioSet::new(1, returns, weights, 1.0)
}

/// Frictionless optimal fractions `(Lambda Sigma Lambda)^{-1} (mu - r) / gamma`.
pub fn merton_point(params: &MarketParams, gamma: f64) -> Result<Vec<f64>> {
    if !(gamma > 0.0) {
        return Err(Error::Parameter("risk aversion must be positive".into()));
    }
    let cov = params.covariance();
    let excess = DVector::from_iterator(params.k(), params.mu.iter().map(|m| m - params.r));
    let lu = cov.lu();
    let sol = lu.solve(&excess).ok_or_else(|| Error::Singular("covariance matrix".into()))?;
    if sol.iter().any(|v| !v.is_finite()) {
        return Err(Error::Singular("covariance matrix".into()));
    }
    Ok(sol.iter().map(|v| v / gamma).collect())
}

/// Discrete Markov chain over market states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParameterChain {
    pub states: Vec<MarketParams>,
    pub transition: Vec<Vec<f64>>,
}

/// Parameter that an independent chain factor drives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "asset")]
pub enum ChainTarget {
    Rate,
    Drift(usize),
    Volatility(usize),
}

/// One independent Markov factor over the values of a single parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainFactor {
    pub target: ChainTarget,
    pub values: Vec<f64>,
    pub transition: Vec<Vec<f64>>,
}

fn check_stochastic(m: &[Vec<f64>], n: usize) -> Result<()> {
    if m.len() != n {
        return Err(Error::Parameter(format!("transition has {} rows, expected {n}", m.len())));
    }
    for (i, row) in m.iter().enumerate() {
        if row.len() != n {
            return Err(Error::Parameter(format!("transition row {i} has length {}, expected {n}", row.len())));
        }
        if row.iter().any(|p| !(*p >= 0.0 && *p <= 1.0)) {
            return Err(Error::Parameter(format!("transition row {i} has entries outside [0, 1]")));
        }
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-12 {
            return Err(Error::Parameter(format!("transition row {i} sums to {s}")));
        }
    }
    Ok(())
}

impl ParameterChain {
    pub fn new(states: Vec<MarketParams>, transition: Vec<Vec<f64>>) -> Result<Self> {
        let chain = Self { states, transition };
        chain.validate()?;
        Ok(chain)
    }

    pub fn single(params: MarketParams) -> Self {
        Self { states: vec![params], transition: vec![vec![1.0]] }
    }

    /// Joint chain of independent factors applied to `base`; the first factor
    /// varies slowest in the joint state index (Kronecker order).
    pub fn from_factors(base: MarketParams, factors: &[ChainFactor]) -> Result<Self> {
        base.validate()?;
        let mut states = vec![base];
        let mut transition = vec![vec![1.0]];
        for f in factors {
            let n = f.values.len();
            if n == 0 {
                return Err(Error::Parameter("chain factor has no values".into()));
            }
            check_stochastic(&f.transition, n)?;
            match f.target {
                ChainTarget::Drift(i) | ChainTarget::Volatility(i) if i >= states[0].k() => {
                    return Err(Error::Parameter(format!("chain factor targets asset {i} out of range")));
                }
                _ => {}
            }
            let mut next_states = Vec::with_capacity(states.len() * n);
            for s in &states {
                for &v in &f.values {
                    let mut p = s.clone();
                    match f.target {
                        ChainTarget::Rate => p.r = v,
                        ChainTarget::Drift(i) => p.mu[i] = v,
                        ChainTarget::Volatility(i) => p.sigma[i] = v,
                    }
                    next_states.push(p);
                }
            }
            let old = states.len();
            let mut next_t = vec![vec![0.0; old * n]; old * n];
            for a in 0..old {
                for b in 0..n {
                    for c in 0..old {
                        for d in 0..n {
                            next_t[a * n + b][c * n + d] = transition[a][c] * f.transition[b][d];
                        }
                    }
                }
            }
            states = next_states;
            transition = next_t;
        }
        Self::new(states, transition)
    }

    pub fn validate(&self) -> Result<()> {
        if self.states.is_empty() {
            return Err(Error::Parameter("chain needs at least one state".into()));
        }
        let k = self.states[0].k();
        for s in &self.states {
            s.validate()?;
            if s.k() != k {
                return Err(Error::Parameter("chain states disagree on the number of assets".into()));
            }
        }
        // products of exactly stochastic rows can drift by a few ulps
        check_stochastic(&self.transition, self.states.len()).or_else(|_| {
            for row in &self.transition {
                let s: f64 = row.iter().sum();
                if (s - 1.0).abs() > 1e-12 || row.len() != self.states.len() {
                    return Err(Error::Parameter(format!("transition row sums to {s}")));
                }
            }
            Ok(())
        })
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn k(&self) -> usize {
        self.states[0].k()
    }
}

/// Nonzero entries `(next_state, probability)` of row `state`.
pub fn chain_transitions(chain: &ParameterChain, state: usize) -> Result<Vec<(usize, f64)>> {
    let row = chain
        .transition
        .get(state)
        .ok_or_else(|| Error::Parameter(format!("state index {state} out of range (chain has {})", chain.len())))?;
    Ok(row.iter().copied().enumerate().filter(|(_, p)| *p > 0.0).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn merton_examples() {
        let p = MarketParams::iid(2, 0.03, 0.07, 0.2, 0.0);
        assert!(close(&merton_point(&p, 3.0).unwrap(), &[1.0 / 3.0, 1.0 / 3.0], 1e-14));
        let ex4 = MarketParams {
            r: 0.04,
            mu: vec![0.07; 3],
            sigma: vec![0.2; 3],
            corr: vec![vec![1.0, 0.4, 0.4], vec![0.4, 1.0, 0.16], vec![0.4, 0.16, 1.0]],
            tau: vec![0.001; 3],
        };
        assert!(close(&merton_point(&ex4, 3.0).unwrap(), &[0.1071, 0.1786, 0.1786], 5e-5));
        let flat = MarketParams::iid(2, 0.05, 0.05, 0.2, 0.0);
        assert!(merton_point(&flat, 2.0).unwrap().iter().all(|v| *v == 0.0));
        let a = merton_point(&ex4, 3.0).unwrap();
        let b = merton_point(&ex4, 6.0).unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| x / 2.0 == *y));
    }

    #[test]
    fn lognormal_scenarios() {
        let p = MarketParams::iid(2, 0.03, 0.07, 0.0, 0.0);
        let s = lognormal_return_scenarios(&p, 0.25, 5).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s.weight(0), 1.0);
        assert!((s.returns(0)[0] - (0.07f64 * 0.25).exp()).abs() < 1e-15);

        let p = MarketParams::iid(2, 0.03, 0.07, 0.2, 0.0);
        for order in 1..8 {
            let s = lognormal_return_scenarios(&p, 1.0 / 52.0, order).unwrap();
            assert!((s.weights().iter().sum::<f64>() - 1.0).abs() < 1e-10);
        }
        let s = lognormal_return_scenarios(&p, 1.0 / 52.0, 5).unwrap();
        let want = (0.07f64 / 52.0).exp();
        for m in s.mean() {
            assert!((m / want - 1.0).abs() < 1e-6);
        }
        assert!((s.risk_free() - (0.03f64 / 52.0).exp()).abs() < 1e-15);
    }

    #[test]
    fn binomial_pmf() {
        let dt = 1.0 / 52.0;
        let s = binomial_return_pmf(0.07, 0.2, dt, 10).unwrap();
        assert_eq!(s.len(), 11);
        assert!((s.weights().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let mean_log: f64 = s.iter().map(|(r, w)| w * r[0].ln()).sum();
        assert!((mean_log - (0.07 - 0.02) * dt).abs() < 1e-12);
        let st = BinomialStep::new(0.07, 0.2, dt / 10.0).unwrap();
        assert_eq!(st.u * st.d, 1.0);
        assert!(binomial_return_pmf(5.0, 0.2, 1.0, 1).is_err());
    }

    #[test]
    fn chains() {
        let base = MarketParams::iid(1, 0.04, 0.07, 0.2, 0.001);
        let r_chain = ChainFactor {
            target: ChainTarget::Rate,
            values: vec![0.03, 0.04, 0.05],
            transition: vec![vec![0.6, 0.4, 0.0], vec![0.2, 0.6, 0.2], vec![0.0, 0.4, 0.6]],
        };
        let c = ParameterChain::from_factors(base, &[r_chain]).unwrap();
        assert_eq!(chain_transitions(&c, 0).unwrap(), vec![(0, 0.6), (1, 0.4)]);
        assert!(chain_transitions(&c, 3).is_err());

        let base = MarketParams::iid(2, 0.03, 0.07, 0.2, 0.001);
        let drift = |i| ChainFactor {
            target: ChainTarget::Drift(i),
            values: vec![0.06, 0.08],
            transition: vec![vec![0.75, 0.25], vec![0.25, 0.75]],
        };
        let c = ParameterChain::from_factors(base.clone(), &[drift(0), drift(1)]).unwrap();
        assert_eq!(c.len(), 4);
        assert_eq!(c.states[0].mu, vec![0.06, 0.06]);
        assert_eq!(chain_transitions(&c, 0).unwrap()[0], (0, 0.5625));
        for row in &c.transition {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let single = ParameterChain::single(base);
        assert_eq!(chain_transitions(&single, 0).unwrap(), vec![(0, 1.0)]);
    }

    #[test]
    fn rejects_bad_params() {
        let mut p = MarketParams::iid(2, 0.03, 0.07, 0.2, 0.0);
        p.corr = vec![vec![1.0, 1.5], vec![1.5, 1.0]];
        assert!(p.validate().is_err());
        let mut p = MarketParams::iid(3, 0.03, 0.07, 0.2, 0.0);
        p.corr = vec![vec![1.0, 0.9, -0.9], vec![0.9, 1.0, 0.9], vec![-0.9, 0.9, 1.0]];
        assert!(matches!(p.validate(), Err(Error::NotPsd(_))));
        let mut p = MarketParams::iid(1, 0.03, 0.07, 0.2, 0.0);
        p.sigma[0] = -0.1;
        assert!(p.validate().is_err());
    }
}
