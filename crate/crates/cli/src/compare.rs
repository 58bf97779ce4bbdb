//! `compare`: distances between two run directories.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use dynport::analysis::surface_distance;
use dynport::approx::ChebyshevSurface;
use dynport::ntr::{nesting, Nesting};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::CliError;
use crate::run::{NtrReport, SurfaceFile, CONFIG_FILE, NTR_JSON};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurfaceComparison {
    pub time_index: usize,
    /// Mean over states of the per-state mean absolute difference.
    pub l1: f64,
    pub linf: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyComparison {
    pub time_index: usize,
    /// `None` when the runs use different nodes.
    pub mean_abs: Option<f64>,
    pub max_abs: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NestingComparison {
    pub state: usize,
    pub a_in_b: Nesting,
    pub b_in_a: Nesting,
    /// `contained` when either region lies inside the other.
    pub verdict: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub probes: usize,
    pub seed: u64,
    pub surfaces: Vec<SurfaceComparison>,
    pub policies: Vec<PolicyComparison>,
    pub nesting: Vec<NestingComparison>,
}

fn incompatible(m: impl Into<String>) -> CliError {
    CliError::Config(format!("incompatible runs: {}", m.into()))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn listing(dir: &Path, ext: &str) -> Result<BTreeSet<String>, CliError> {
    let mut names = BTreeSet::new();
    let Ok(entries) = fs::read_dir(dir) else {
        return Ok(names);
    };
    for e in entries {
        let name = e?.file_name().to_string_lossy().into_owned();
        if name.ends_with(ext) {
            names.insert(name);
        }
    }
    Ok(names)
}

pub fn compare(a: &Path, b: &Path, probes: usize, seed: u64) -> Result<Comparison, CliError> {
    let ca: RunConfig = read_json(&a.join(CONFIG_FILE))?;
    let cb: RunConfig = read_json(&b.join(CONFIG_FILE))?;
    if ca.kind != cb.kind {
        return Err(incompatible("model kinds differ"));
    }
    if probes == 0 {
        return Err(CliError::Config("at least one probe is needed".into()));
    }

    let mut surfaces = Vec::new();
    let names = listing(&a.join("surfaces"), ".json")?;
    for name in names.intersection(&listing(&b.join("surfaces"), ".json")?) {
        let fa: SurfaceFile = read_json(&a.join("surfaces").join(name))?;
        let fb: SurfaceFile = read_json(&b.join("surfaces").join(name))?;
        if fa.states.len() != fb.states.len() {
            return Err(incompatible(format!("{name}: state counts differ")));
        }
        let (mut l1, mut linf) = (0.0, 0.0f64);
        for (sa, sb) in fa.states.iter().zip(&fb.states) {
            let (sa, sb) = (ChebyshevSurface::from_archive(sa)?, ChebyshevSurface::from_archive(sb)?);
            if sa.domain() != sb.domain() {
                return Err(incompatible("domains differ"));
            }
            let (m, x) = surface_distance(&sa, &sb, probes, seed)?;
            l1 += m;
            linf = linf.max(x);
        }
        surfaces.push(SurfaceComparison { time_index: fa.time_index, l1: l1 / fa.states.len().max(1) as f64, linf });
    }
    if surfaces.is_empty() {
        return Err(incompatible("no matching surface archives"));
    }

    let mut policies = Vec::new();
    let names = listing(&a.join("policy"), ".csv")?;
    for name in names.intersection(&listing(&b.join("policy"), ".csv")?) {
        let pa = fs::read_to_string(a.join("policy").join(name))?;
        let pb = fs::read_to_string(b.join("policy").join(name))?;
        let time_index = name.trim_start_matches('t').trim_end_matches(".csv").parse().unwrap_or(0);
        let (mean_abs, max_abs) = policy_difference(&pa, &pb)?.unzip();
        policies.push(PolicyComparison { time_index, mean_abs, max_abs });
    }

    let mut nest = Vec::new();
    if a.join(NTR_JSON).exists() && b.join(NTR_JSON).exists() {
        let ra: NtrReport = read_json(&a.join(NTR_JSON))?;
        let rb: NtrReport = read_json(&b.join(NTR_JSON))?;
        if let (NtrReport::Polygon { regions: ra }, NtrReport::Polygon { regions: rb }) = (ra, rb) {
            for (x, y) in ra.iter().zip(&rb) {
                let a_in_b = nesting(&x.region, &y.region, 101);
                let b_in_a = nesting(&y.region, &x.region, 101);
                let verdict = if a_in_b.contained || b_in_a.contained { "contained" } else { "not_contained" };
                nest.push(NestingComparison { state: x.region.state, a_in_b, b_in_a, verdict: verdict.into() });
            }
        }
    }
    Ok(Comparison { probes, seed, surfaces, policies, nesting: nest })
}

/// Mean and max absolute control difference, if both files list the same nodes.
fn policy_difference(a: &str, b: &str) -> Result<Option<(f64, f64)>, CliError> {
    let (la, lb): (Vec<&str>, Vec<&str>) = (a.lines().collect(), b.lines().collect());
    if la.len() != lb.len() || la.first() != lb.first() {
        return Ok(None);
    }
    let header: Vec<&str> = la.first().map(|h| h.split(',').collect()).unwrap_or_default();
    let k = header.iter().filter(|h| h.starts_with('x')).count();
    let parse = |s: &str| -> Result<Option<f64>, CliError> {
        if s.is_empty() {
            return Ok(None);
        }
        s.parse().map(Some).map_err(|_| CliError::Config(format!("bad policy field {s:?}")))
    };
    let (mut sum, mut count, mut max) = (0.0, 0usize, 0.0f64);
    for (ra, rb) in la.iter().zip(&lb).skip(1) {
        let (fa, fb): (Vec<&str>, Vec<&str>) = (ra.split(',').collect(), rb.split(',').collect());
        if fa[..2 + k] != fb[..2 + k] {
            return Ok(None);
        }
        for (x, y) in fa[2 + k..].iter().zip(&fb[2 + k..]) {
            if let (Some(x), Some(y)) = (parse(x)?, parse(y)?) {
                let d = (x - y).abs();
                sum += d;
                max = max.max(d);
                count += 1;
            }
        }
    }
    Ok(Some((sum / count.max(1) as f64, max)))
}
