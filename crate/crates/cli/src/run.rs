//! `solve`: one model run and its artifacts.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use dynport::analysis::{certainty_equivalent, policy_approx_error, ErrorReport};
use dynport::approx::{ChebyshevSurface, SurfaceArchive};
use dynport::dp::{fmt17, solve_horizon, NodeDecision, PortfolioModel, Preference, StageContext, StagePolicy, StageProblem};
use dynport::ntr::{axis_extents, classify_no_trade, region_width, trace_boundary_2d, NoTradeRegion, TraceOptions, DEFAULT_TRADE_TOLERANCE};
use dynport::options::{solve_option_model, OptionPortfolioModel};
use serde::{Deserialize, Serialize};

use crate::config::{Model, RunConfig};
use crate::error::CliError;

pub const CONFIG_FILE: &str = "effective_config.json";
pub const DIAGNOSTICS_FILE: &str = "diagnostics.json";
pub const NTR_JSON: &str = "ntr_t0.json";
pub const NTR_CSV: &str = "ntr_t0.csv";

/// Surfaces of every discrete state at one time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurfaceFile {
    pub time_index: usize,
    pub states: Vec<SurfaceArchive>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub state: usize,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionSummary {
    pub region: NoTradeRegion,
    pub centroid: Option<[f64; 2]>,
    pub bounding_box: Option<([f64; 2], [f64; 2])>,
    /// Extent along each axis through the centroid.
    pub widths: Option<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Extents {
    pub state: usize,
    pub center: Vec<f64>,
    /// `[down, up]` distance to the boundary along each axis.
    pub extents: Option<Vec<[f64; 2]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

/// No-trade region at time zero, by dimension of the state space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum NtrReport {
    Interval { intervals: Vec<Interval> },
    Polygon { regions: Vec<RegionSummary> },
    AxisExtents { extents: Vec<Extents> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CePoint {
    pub state: usize,
    pub x: Vec<f64>,
    pub value_factor: f64,
    pub certainty_equivalent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub seed: u64,
    pub workers: usize,
    pub wall_time_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub kind: crate::config::ModelKind,
    pub periods: usize,
    pub merton_points: Vec<Vec<f64>>,
    pub non_converged: usize,
    pub certainty_equivalents: Vec<CePoint>,
    pub policy_error: Vec<ErrorReport>,
    pub run: RunMetadata,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn write_surfaces(dir: &Path, time_index: usize, surfaces: &[ChebyshevSurface]) -> Result<(), CliError> {
    let file = SurfaceFile { time_index, states: surfaces.iter().map(ChebyshevSurface::to_archive).collect() };
    write_json(&dir.join("surfaces").join(format!("t{time_index:04}.json")), &file)
}

fn write_policy(dir: &Path, policy: &StagePolicy) -> Result<(), CliError> {
    let path = dir.join("policy").join(format!("t{:04}.csv", policy.time_index));
    let mut out = BufWriter::new(File::create(path)?);
    policy.write_csv(&mut out)?;
    out.flush()?;
    Ok(())
}

/// Everything the time-zero diagnostics need from either model family.
struct TimeZero<'a> {
    preference: Preference,
    dt: f64,
    consumption: bool,
    merton: Vec<Vec<f64>>,
    surfaces: &'a [ChebyshevSurface],
    problems: Vec<StageProblem<'a>>,
    policy: &'a StagePolicy,
}

/// Solves the configured model and writes all artifacts into `out`.
pub fn run(cfg: &RunConfig, out: &Path, workers: usize) -> Result<(), CliError> {
    let model = cfg.model()?;
    let started = Instant::now();
    for sub in ["surfaces", "policy"] {
        fs::create_dir_all(out.join(sub))?;
    }
    let mut echo = cfg.clone();
    echo.output = Some(out.to_path_buf());
    echo.workers = Some(workers);
    write_json(&out.join(CONFIG_FILE), &echo)?;

    let mut diagnostics = match &model {
        Model::Portfolio(m) => run_portfolio(cfg, m, out)?,
        Model::Option(m) => run_option(cfg, m, out)?,
    };
    diagnostics.run = RunMetadata { seed: cfg.seed, workers, wall_time_seconds: started.elapsed().as_secs_f64() };
    write_json(&out.join(DIAGNOSTICS_FILE), &diagnostics)
}

fn run_portfolio(cfg: &RunConfig, model: &PortfolioModel, out: &Path) -> Result<Diagnostics, CliError> {
    let (surfaces, policies) = solve_horizon(model)?;
    for s in &surfaces {
        write_surfaces(out, s.time_index, &s.surfaces)?;
    }
    for p in &policies {
        write_policy(out, p)?;
    }
    let ctx = StageContext::new(model, &surfaces[1])?;
    let zero = TimeZero {
        preference: model.preference(),
        dt: model.dt,
        consumption: model.consumption,
        merton: model.merton_points()?,
        surfaces: &surfaces[0].surfaces,
        problems: (0..model.chain.len()).map(|s| ctx.problem(s)).collect(),
        policy: &policies[0],
    };
    let non_converged = policies.iter().map(StagePolicy::non_converged).sum();
    diagnose(cfg, &zero, out, policies.len(), non_converged)
}

fn run_option(cfg: &RunConfig, model: &OptionPortfolioModel, out: &Path) -> Result<Diagnostics, CliError> {
    let solution = solve_option_model(model)?;
    // only the first period is kept by the solver
    write_surfaces(out, 0, std::slice::from_ref(&solution.initial))?;
    write_surfaces(out, 1, &solution.next)?;
    write_policy(out, &solution.policy)?;
    let mut prices = BufWriter::new(File::create(out.join("prices.csv"))?);
    solution.lattice.write_csv(&mut prices)?;
    prices.flush()?;

    let stage = solution.stage(model)?;
    let zero = TimeZero {
        preference: model.preference(),
        dt: model.dt,
        consumption: model.consumption,
        merton: vec![model.merton_target()?],
        surfaces: std::slice::from_ref(&solution.initial),
        problems: vec![stage.problem(0)],
        policy: &solution.policy,
    };
    let periods = solution.lattice.periods * model.rounds;
    diagnose(cfg, &zero, out, periods, solution.policy.non_converged())
}

fn diagnose(cfg: &RunConfig, zero: &TimeZero<'_>, out: &Path, periods: usize, non_converged: usize) -> Result<Diagnostics, CliError> {
    let mut ce = Vec::new();
    for (state, surface) in zero.surfaces.iter().enumerate() {
        for x in &cfg.diagnostics.ce_points {
            let carried = surface.evaluate(x)?.value;
            let v = zero.preference.value_factor(carried);
            let c = certainty_equivalent(&zero.preference, v, zero.dt)?;
            ce.push(CePoint { state, x: x.clone(), value_factor: v, certainty_equivalent: c });
        }
    }

    let mut policy_error = Vec::new();
    if let Some(pe) = &cfg.diagnostics.policy_error {
        let grid = cfg_grid(zero)?;
        for (decisions, problem) in zero.policy.decisions.iter().zip(&zero.problems) {
            policy_error.push(policy_approx_error(&grid, decisions, problem, pe.degree, pe.probes, cfg.seed)?);
        }
    }

    if cfg.diagnostics.ntr {
        let report = no_trade_report(zero)?;
        write_json(&out.join(NTR_JSON), &report)?;
        let mut csv = BufWriter::new(File::create(out.join(NTR_CSV))?);
        write_ntr_csv(&report, &mut csv)?;
        csv.flush()?;
    }

    Ok(Diagnostics {
        kind: cfg.kind,
        periods,
        merton_points: zero.merton.clone(),
        non_converged,
        certainty_equivalents: ce,
        policy_error,
        run: RunMetadata { seed: cfg.seed, workers: 0, wall_time_seconds: 0.0 },
    })
}

/// The node grid is recoverable from the policy itself.
fn cfg_grid(zero: &TimeZero<'_>) -> Result<dynport::approx::TensorNodeGrid, CliError> {
    let domain = zero.surfaces[0].domain().clone();
    let k = domain.dim();
    let m = (zero.policy.nodes.len() as f64).powf(1.0 / k as f64).round() as usize;
    Ok(dynport::approx::chebyshev_nodes(m, &domain)?)
}

fn no_trade_report(zero: &TimeZero<'_>) -> Result<NtrReport, CliError> {
    let k = zero.surfaces[0].dim();
    let dt = zero.consumption.then_some(zero.dt);
    let scale = |d: &NodeDecision| match (dt, d.consumption) {
        (Some(dt), Some(c)) => 1.0 - c * dt,
        _ => 1.0,
    };
    let report = match k {
        1 => {
            let mut intervals = Vec::new();
            for (state, p) in zero.problems.iter().enumerate() {
                // everyone below the interval buys up to it, everyone above sells down
                let lo = p.solve(&[0.0], None)?;
                let hi = p.solve(&[1.0], None)?;
                let lower = if classify_no_trade(&lo, DEFAULT_TRADE_TOLERANCE) { 0.0 } else { lo.post_trade(&[0.0])[0] / scale(&lo) };
                let upper = if classify_no_trade(&hi, DEFAULT_TRADE_TOLERANCE) { 1.0 } else { hi.post_trade(&[1.0])[0] / scale(&hi) };
                intervals.push(Interval { state, lower, upper });
            }
            NtrReport::Interval { intervals }
        }
        2 => {
            let mut regions = Vec::new();
            for (state, p) in zero.problems.iter().enumerate() {
                let solver = |x: &[f64], w: Option<&[f64]>| p.solve(x, w);
                let opts = TraceOptions { consumption_dt: dt, ..Default::default() };
                let region = trace_boundary_2d(&solver, 0, state, opts)?;
                let centroid = region.centroid().ok();
                let widths = match (region_width(&region, 0), region_width(&region, 1)) {
                    (Ok(a), Ok(b)) => Some([a, b]),
                    _ => None,
                };
                regions.push(RegionSummary { bounding_box: region.bounding_box(), centroid, widths, region });
            }
            NtrReport::Polygon { regions }
        }
        _ => {
            let mut extents = Vec::new();
            for (state, p) in zero.problems.iter().enumerate() {
                let solver = |x: &[f64], w: Option<&[f64]>| p.solve(x, w);
                let center: Vec<f64> = zero.merton[state.min(zero.merton.len() - 1)].iter().map(|v| v.clamp(0.0, 1.0)).collect();
                let (ext, note) = match axis_extents(&solver, &center, DEFAULT_TRADE_TOLERANCE) {
                    Ok(e) => (Some(e), None),
                    Err(dynport::Error::Numerical(m)) => (None, Some(m)),
                    Err(e) => return Err(e.into()),
                };
                extents.push(Extents { state, center, extents: ext, note });
            }
            NtrReport::AxisExtents { extents }
        }
    };
    Ok(report)
}

fn write_ntr_csv(report: &NtrReport, out: &mut impl Write) -> Result<(), CliError> {
    match report {
        NtrReport::Interval { intervals } => {
            writeln!(out, "time,state,lower,upper")?;
            for i in intervals {
                writeln!(out, "0,{},{},{}", i.state, fmt17(i.lower), fmt17(i.upper))?;
            }
        }
        NtrReport::Polygon { regions } => {
            writeln!(out, "time,state,x1,x2,boundary_flag")?;
            for r in regions {
                for p in &r.region.boundary {
                    writeln!(out, "0,{},{},{},1", r.region.state, fmt17(p[0]), fmt17(p[1]))?;
                }
            }
        }
        NtrReport::AxisExtents { extents } => {
            writeln!(out, "time,state,axis,center,down,up")?;
            for e in extents {
                for (axis, d) in e.extents.iter().flatten().enumerate() {
                    writeln!(out, "0,{},{},{},{},{}", e.state, axis + 1, fmt17(e.center[axis]), fmt17(d[0]), fmt17(d[1]))?;
                }
            }
        }
    }
    Ok(())
}
