//! Shared fixtures for the integration tests.
#![allow(dead_code)]

use dynport::dp::{PortfolioModel, ReturnModel};
use dynport::market::{lognormal_return_scenarios, MarketParams, ParameterChain};

/// One risky asset, two periods, three return scenarios.
pub fn two_period_model(degree: usize) -> PortfolioModel {
    PortfolioModel {
        chain: ParameterChain::single(MarketParams::iid(1, 0.03, 0.07, 0.2, 0.005)),
        gamma: 3.0,
        horizon: 2.0 / 12.0,
        dt: 1.0 / 12.0,
        consumption: false,
        rho: 0.0,
        degree,
        returns: ReturnModel::Lognormal { order: 3 },
        nodes: None,
    }
}

/// Exhaustive dynamic program for [`two_period_model`]: every stage picks
/// the best post-trade fraction on a grid of spacing `1 / steps`, and the
/// second-stage values are recomputed exactly at every next-period state.
pub struct BruteForce {
    returns: Vec<f64>,
    weights: Vec<f64>,
    rf: f64,
    tau: f64,
    gamma: f64,
    steps: usize,
}

impl BruteForce {
    pub fn new(model: &PortfolioModel, steps: usize) -> Self {
        let p = &model.chain.states[0];
        let set = lognormal_return_scenarios(p, model.dt, 3).unwrap();
        Self {
            returns: (0..set.len()).map(|j| set.returns(j)[0]).collect(),
            weights: set.weights().to_vec(),
            rf: set.risk_free(),
            tau: p.tau[0],
            gamma: model.gamma,
            steps,
        }
    }

    /// Best value factor at pre-trade fraction `x` with `stages` periods
    /// left, and the post-trade fraction achieving it.
    pub fn value(&self, x: f64, stages: usize) -> (f64, f64) {
        if stages == 0 {
            return (1.0 / (1.0 - self.gamma), x);
        }
        let mut best = (f64::NEG_INFINITY, x);
        for s in 0..=self.steps {
            let u = s as f64 / self.steps as f64;
            let b = 1.0 - u - self.tau * (u - x).abs();
            if b < 0.0 {
                continue;
            }
            let mut v = 0.0;
            for (r, w) in self.returns.iter().zip(&self.weights) {
                let pi = r * u + self.rf * b;
                let next = if stages > 1 { self.value(r * u / pi, stages - 1).0 } else { 1.0 / (1.0 - self.gamma) };
                v += w * pi.powf(1.0 - self.gamma) * next;
            }
            if v > best.0 {
                best = (v, u);
            }
        }
        best
    }
}
