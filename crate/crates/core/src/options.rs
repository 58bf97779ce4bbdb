//! European options on a recombining binomial lattice and the portfolio
//! problem with one risky asset, one option on it, and a bond.
//!
//! Prices are kept per unit strike as functions of the moneyness
//! `A = S / K`, which is all the portfolio problem needs: between trading
//! times the option leg's gross return is `P_{t+dt}(A R) / P_t(A)` for the
//! stock return `R`. The discrete state of a period is the lattice index of
//! `A`; the continuous state is `(x, y)`, the stock and option fractions.
//!
//! Options are issued at the money and held to expiry. A longer horizon is
//! covered by reissuing: at every expiry the payoff has already been
//! credited through the last period's option return, so the expiring
//! fraction is cash and the value at issue is the `y = 0` slice of the next
//! round's value at `A = 1`.

use std::io::Write;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::approx::{chebyshev_nodes, fit_with_basis, ChebyshevSurface, CompleteBasis, HyperRectangle, TensorNodeGrid};
use crate::dp::{fmt17, solve_nodes_many, Preference, ScenarioTable, StagePolicy, StageProblem};
use crate::error::{Error, Result};
use crate::market::{merton_point, BinomialStep, MarketParams};
use crate::nlp::SolverOptions;

/// Prices at or below this (per unit strike) make the option untradable at
/// that lattice node; its leg is liquidated instead of divided by zero.
pub const PRICE_FLOOR: f64 = 1e-14;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptionKind {
    Put,
    Call,
    /// Long straddle `|S - K|`, the sum of a put and a call.
    Butterfly,
}

impl OptionKind {
    pub fn payoff(self, spot: f64, strike: f64) -> f64 {
        match self {
            OptionKind::Put => (strike - spot).max(0.0),
            OptionKind::Call => (spot - strike).max(0.0),
            OptionKind::Butterfly => (spot - strike).abs(),
        }
    }
}

/// An at-the-money European option issued at the start of each round.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptionSpec {
    pub kind: OptionKind,
    /// Time to expiry in years.
    pub expiry: f64,
    /// Proportional cost of trading the option.
    pub tau: f64,
}

impl OptionSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.expiry > 0.0 && self.expiry.is_finite()) {
            return Err(Error::Parameter(format!("option expiry {} must be positive", self.expiry)));
        }
        if !(self.tau >= 0.0 && self.tau < 1.0) {
            return Err(Error::Parameter(format!("option cost ratio {} must lie in [0, 1)", self.tau)));
        }
        Ok(())
    }
}

fn check_bs(s: f64, k: f64, r: f64, sigma: f64, t: f64) -> Result<()> {
    if !(s > 0.0 && k > 0.0 && sigma > 0.0 && t > 0.0 && r.is_finite()) {
        return Err(Error::Domain(format!("Black-Scholes needs positive S, K, sigma, T (got {s}, {k}, {sigma}, {t})")));
    }
    Ok(())
}

fn bs_d12(s: f64, k: f64, r: f64, sigma: f64, t: f64) -> (f64, f64) {
    let v = sigma * t.sqrt();
    let d1 = ((s / k).ln() + (r + 0.5 * sigma * sigma) * t) / v;
    (d1, d1 - v)
}

pub fn black_scholes_put(s: f64, k: f64, r: f64, sigma: f64, t: f64) -> Result<f64> {
    check_bs(s, k, r, sigma, t)?;
    let n = Normal::new(0.0, 1.0).expect("standard normal");
    let (d1, d2) = bs_d12(s, k, r, sigma, t);
    Ok(k * (-r * t).exp() * n.cdf(-d2) - s * n.cdf(-d1))
}

pub fn black_scholes_call(s: f64, k: f64, r: f64, sigma: f64, t: f64) -> Result<f64> {
    check_bs(s, k, r, sigma, t)?;
    let n = Normal::new(0.0, 1.0).expect("standard normal");
    let (d1, d2) = bs_d12(s, k, r, sigma, t);
    Ok(s * n.cdf(d1) - k * (-r * t).exp() * n.cdf(d2))
}

/// Moneyness lattice over one option's life. Trading time `i` has
/// `n i + 1` values `A = u^(2a - n i)`, `a = 0..=n i`.
#[derive(Debug, Clone)]
pub struct OptionLattice {
    pub step: BinomialStep,
    /// Sub-periods per trading period.
    pub substeps: usize,
    /// Trading periods until expiry.
    pub periods: usize,
    /// Risk-neutral up probability; empty price tables until priced.
    pub q: f64,
    /// `prices[i][a]` per unit strike.
    pub prices: Vec<Vec<f64>>,
}

fn whole_periods(span: f64, dt: f64, what: &str) -> Result<usize> {
    let n = span / dt;
    let rounded = n.round();
    if !(dt > 0.0 && span > 0.0) || rounded < 1.0 || (n - rounded).abs() > 1e-9 * n.max(1.0) {
        return Err(Error::Parameter(format!("{what} is not a whole number of trading periods")));
    }
    Ok(rounded as usize)
}

/// Lattice of `A` values for an option expiring after `expiry` years, with
/// `substeps` binomial moves per trading period of length `dt`.
pub fn build_lattice(mu: f64, sigma: f64, dt: f64, substeps: usize, expiry: f64) -> Result<OptionLattice> {
    if substeps == 0 {
        return Err(Error::Parameter("lattice needs at least one sub-period per trading period".into()));
    }
    let periods = whole_periods(expiry, dt, "option expiry")?;
    let step = BinomialStep::new(mu, sigma, dt / substeps as f64)?;
    Ok(OptionLattice { step, substeps, periods, q: f64::NAN, prices: Vec::new() })
}

/// Backward risk-neutral recursion from the exact payoff on a lattice rooted
/// at `spot`, returning the price layers of every `record`-th level.
fn backward_prices(kind: OptionKind, spot: f64, strike: f64, step: &BinomialStep, q: f64, disc: f64, levels: usize, record: usize) -> Vec<Vec<f64>> {
    let mut layer: Vec<f64> = (0..=levels).map(|a| kind.payoff(spot * step.power(2 * a as i64 - levels as i64), strike)).collect();
    let mut kept = vec![layer.clone()];
    for m in (0..levels).rev() {
        for a in 0..=m {
            layer[a] = disc * (q * layer[a + 1] + (1.0 - q) * layer[a]);
        }
        layer.truncate(m + 1);
        if m % record == 0 {
            kept.push(layer.clone());
        }
    }
    kept.reverse();
    kept
}

/// Fills the per-unit-strike price tables of an at-the-money option.
pub fn price_option(mut lattice: OptionLattice, kind: OptionKind, r: f64) -> Result<OptionLattice> {
    let q = lattice.step.risk_neutral(r);
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::Parameter(format!("risk-neutral probability {q} outside (0, 1)")));
    }
    let disc = (-r * lattice.step.h).exp();
    let levels = lattice.substeps * lattice.periods;
    lattice.prices = backward_prices(kind, 1.0, 1.0, &lattice.step, q, disc, levels, lattice.substeps);
    lattice.q = q;
    Ok(lattice)
}

/// European price on a lattice with sub-period `h` that must divide the expiry.
pub fn binomial_price(kind: OptionKind, spot: f64, strike: f64, r: f64, sigma: f64, expiry: f64, h: f64) -> Result<f64> {
    let levels = whole_periods(expiry, h, "expiry")?;
    let step = BinomialStep::new(r, sigma, h)?;
    let q = step.risk_neutral(r);
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::Parameter(format!("risk-neutral probability {q} outside (0, 1)")));
    }
    Ok(backward_prices(kind, spot, strike, &step, q, (-r * h).exp(), levels, levels)[0][0])
}

impl OptionLattice {
    pub fn layer_len(&self, i: usize) -> usize {
        self.substeps * i + 1
    }

    pub fn moneyness(&self, i: usize, a: usize) -> f64 {
        self.step.power(2 * a as i64 - (self.substeps * i) as i64)
    }

    pub fn price(&self, i: usize, a: usize) -> f64 {
        self.prices[i][a]
    }

    /// CSV rows `t, A, price` for every trading time.
    pub fn write_csv(&self, mut out: impl Write) -> Result<()> {
        writeln!(out, "time,moneyness,price")?;
        for (i, layer) in self.prices.iter().enumerate() {
            for (a, p) in layer.iter().enumerate() {
                writeln!(out, "{},{},{}", i, fmt17(self.moneyness(i, a)), fmt17(*p))?;
            }
        }
        Ok(())
    }
}

/// Stock, option and bond; CRRA (terminal wealth or consumption) or
/// Epstein–Zin preferences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptionPortfolioModel {
    pub r: f64,
    pub mu: f64,
    pub sigma: f64,
    /// Proportional cost of trading the stock.
    pub tau: f64,
    pub option: OptionSpec,
    /// Relative risk aversion for CRRA; the inverse IES for Epstein–Zin.
    pub gamma: f64,
    /// Risk aversion of the Epstein–Zin aggregator; CRRA when absent.
    pub psi: Option<f64>,
    pub rho: f64,
    pub consumption: bool,
    pub dt: f64,
    pub substeps: usize,
    /// Number of consecutive option lives in the horizon.
    pub rounds: usize,
    pub degree: usize,
    pub nodes: Option<usize>,
}

impl OptionPortfolioModel {
    pub fn preference(&self) -> Preference {
        let beta = (-self.rho * self.dt).exp();
        match (self.psi, self.consumption) {
            (Some(psi), _) => Preference::EpsteinZin { gamma: self.gamma, psi, beta },
            (None, true) => Preference::Consumption { gamma: self.gamma, beta },
            (None, false) => Preference::TerminalWealth { gamma: self.gamma },
        }
    }

    pub fn horizon(&self) -> f64 {
        self.rounds as f64 * self.option.expiry
    }

    pub fn periods_per_round(&self) -> Result<usize> {
        whole_periods(self.option.expiry, self.dt, "option expiry")
    }

    pub fn nodes_per_dim(&self) -> usize {
        self.nodes.unwrap_or(self.degree + 1)
    }

    pub fn validate(&self) -> Result<()> {
        self.option.validate()?;
        self.market().validate()?;
        self.preference().validate()?;
        if self.psi.is_some() && !self.consumption {
            return Err(Error::Parameter("Epstein-Zin preferences need consumption".into()));
        }
        if self.rounds == 0 {
            return Err(Error::Parameter("at least one option round is needed".into()));
        }
        if self.nodes_per_dim() < self.degree + 1 {
            return Err(Error::Parameter("fewer nodes than degree + 1".into()));
        }
        self.periods_per_round()?;
        self.lattice()?;
        Ok(())
    }

    pub fn market(&self) -> MarketParams {
        MarketParams::iid(1, self.r, self.mu, self.sigma, self.tau)
    }

    pub fn lattice(&self) -> Result<OptionLattice> {
        let lattice = build_lattice(self.mu, self.sigma, self.dt, self.substeps, self.option.expiry)?;
        price_option(lattice, self.option.kind, self.r)
    }

    pub fn domain(&self) -> HyperRectangle {
        HyperRectangle::unit(2)
    }

    pub fn grid(&self) -> Result<TensorNodeGrid> {
        chebyshev_nodes(self.nodes_per_dim(), &self.domain())
    }

    /// Frictionless stock fraction with no option held.
    pub fn merton_target(&self) -> Result<Vec<f64>> {
        let ra = self.psi.unwrap_or(self.gamma);
        let x = merton_point(&self.market(), ra)?[0].clamp(0.0, 1.0);
        Ok(vec![x, 0.0])
    }
}

/// Stage problems of one trading time, one per lattice value of `A`.
pub struct OptionStage<'a> {
    preference: Preference,
    tau: Vec<f64>,
    rf: f64,
    dt: f64,
    target: Vec<f64>,
    tables: Vec<ScenarioTable>,
    frozen: Vec<bool>,
    continuations: &'a [ChebyshevSurface],
    pub options: SolverOptions,
}

impl<'a> OptionStage<'a> {
    /// Problems at trading time `i` of a round. `next` holds one surface per
    /// lattice value at `i + 1`, or a single surface when `i + 1` is expiry.
    pub fn new(model: &OptionPortfolioModel, lattice: &OptionLattice, next: &'a [ChebyshevSurface], i: usize) -> Result<Self> {
        let expiring = i + 1 == lattice.periods;
        let expected = if expiring { 1 } else { lattice.layer_len(i + 1) };
        if next.len() != expected {
            return Err(Error::Dimension { expected, found: next.len() });
        }
        let n = lattice.substeps;
        let step = &lattice.step;
        let mut probs = Vec::with_capacity(n + 1);
        let mut choose = 1.0f64;
        for j in 0..=n {
            if j > 0 {
                choose = choose * (n + 1 - j) as f64 / j as f64;
            }
            probs.push(choose * step.p.powi(j as i32) * (1.0 - step.p).powi((n - j) as i32));
        }
        let total: f64 = probs.iter().sum();
        probs.iter_mut().for_each(|w| *w /= total);

        let mut tables = Vec::with_capacity(lattice.layer_len(i));
        let mut frozen = Vec::with_capacity(lattice.layer_len(i));
        for a in 0..lattice.layer_len(i) {
            let p = lattice.price(i, a);
            let dead = !(p > PRICE_FLOOR);
            let mut returns = Vec::with_capacity(2 * (n + 1));
            let mut continuation = Vec::with_capacity(n + 1);
            for j in 0..=n {
                returns.push(step.power(2 * j as i64 - n as i64));
                returns.push(if dead { 0.0 } else { lattice.price(i + 1, a + j) / p });
                continuation.push(if expiring { 0 } else { a + j });
            }
            tables.push(ScenarioTable { k: 2, returns, weights: probs.clone(), continuation });
            frozen.push(dead);
        }
        Ok(Self {
            preference: model.preference(),
            tau: vec![model.tau, model.option.tau],
            rf: (model.r * model.dt).exp(),
            dt: model.dt,
            target: model.merton_target()?,
            tables,
            frozen,
            continuations: next,
            options: SolverOptions::default(),
        })
    }

    pub fn len(&self) -> usize {
        self.tables.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tables.is_empty()
    }

    /// Whether the option is untradable at lattice index `a`.
    pub fn is_frozen(&self, a: usize) -> bool {
        self.frozen[a]
    }

    pub fn problem(&self, a: usize) -> StageProblem<'a> {
        StageProblem {
            preference: self.preference,
            tau: self.tau.clone(),
            rf: self.rf,
            dt: self.dt,
            scenarios: self.tables[a].clone(),
            continuations: self.continuations,
            target: self.target.clone(),
            frozen: vec![false, self.frozen[a]],
            options: self.options,
        }
    }
}

/// Terminal surface over `(x, y)`; the option has been exercised, so only
/// the stock is liquidated at a cost.
pub fn option_terminal_surface(model: &OptionPortfolioModel) -> Result<ChebyshevSurface> {
    let grid = model.grid()?;
    let pref = model.preference();
    let values: Vec<f64> = grid.points().map(|x| pref.terminal_value(model.r, 1.0 - model.tau * x[0], model.dt)).collect();
    fit_with_basis(&grid, &values, Arc::new(CompleteBasis::new(model.degree, 2)))
}

/// One backward step at trading time `i` of a round: carried surfaces per
/// lattice value of `A` and the policy (`decisions[a][node]`).
pub fn bellman_step_option(
    model: &OptionPortfolioModel,
    lattice: &OptionLattice,
    next: &[ChebyshevSurface],
    i: usize,
    time_index: usize,
) -> Result<(Vec<ChebyshevSurface>, StagePolicy)> {
    let grid = model.grid()?;
    let stage = OptionStage::new(model, lattice, next, i)?;
    let problems: Vec<StageProblem<'_>> = (0..stage.len()).map(|a| stage.problem(a)).collect();
    let decisions = solve_nodes_many(&grid, &problems)?;
    let basis = next[0].basis().clone();
    let pref = model.preference();
    let surfaces = decisions
        .iter()
        .map(|nodes| {
            let values: Vec<f64> = nodes.iter().map(|d| pref.carried(d.objective)).collect();
            fit_with_basis(&grid, &values, basis.clone())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((surfaces, StagePolicy { time_index, nodes: grid.points().collect(), decisions }))
}

/// Carried value at the issue time of a round, for every incoming `(x, y)`
/// and moneyness: the value just after reissue at `y = 0`, `A = 1`.
pub fn reissue_boundary(issued: &ChebyshevSurface) -> ChebyshevSurface {
    issued.freeze_axis_at_lower(1)
}

/// Solution at time zero.
#[derive(Debug, Clone)]
pub struct OptionSolution {
    pub lattice: OptionLattice,
    /// Carried surface at `t = 0` (`A = 1`).
    pub initial: ChebyshevSurface,
    /// Continuation surfaces used at `t = 0`.
    pub next: Vec<ChebyshevSurface>,
    pub policy: StagePolicy,
}

impl OptionSolution {
    /// Stage problems at `t = 0` (a single lattice value).
    pub fn stage<'a>(&'a self, model: &OptionPortfolioModel) -> Result<OptionStage<'a>> {
        OptionStage::new(model, &self.lattice, &self.next, 0)
    }
}

/// Backward induction over every round.
pub fn solve_option_model(model: &OptionPortfolioModel) -> Result<OptionSolution> {
    model.validate()?;
    let lattice = model.lattice()?;
    let per_round = lattice.periods;
    let total = per_round * model.rounds;
    let mut next = vec![option_terminal_surface(model)?];
    for t in (0..total).rev() {
        let i = t % per_round;
        let (mut surfaces, policy) = bellman_step_option(model, &lattice, &next, i, t)?;
        if t == 0 {
            let initial = surfaces.pop().expect("one lattice value at issue");
            return Ok(OptionSolution { lattice, initial, next, policy });
        }
        next = if i == 0 { vec![reissue_boundary(&surfaces[0])] } else { surfaces };
    }
    unreachable!("at least one period")
}
