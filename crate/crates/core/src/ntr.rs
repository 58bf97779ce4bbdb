//! No-trade regions: classification, 2-D boundary tracing and measurement.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dp::{fmt17, NodeDecision};
use crate::error::{Error, Result};

pub const DEFAULT_TRADE_TOLERANCE: f64 = 1e-6;
pub const DEFAULT_RESOLUTION: usize = 101;
pub const BISECTION_STEPS: usize = 12;

/// True iff no leg of `decision` trades more than `tol`.
pub fn classify_no_trade(decision: &NodeDecision, tol: f64) -> bool {
    decision.is_no_trade(tol)
}

/// Settings for [`trace_boundary_2d`].
#[derive(Debug, Clone, Copy)]
pub struct TraceOptions {
    pub resolution: usize,
    pub tolerance: f64,
    /// Consumption models report `x / (1 - c dt)`; `None` for terminal-wealth models.
    pub consumption_dt: Option<f64>,
    /// Number of zoom passes onto the region's bounding box.
    pub zoom_passes: usize,
    /// Initial scan window `[lo, hi]^2`.
    pub window: ([f64; 2], [f64; 2]),
}

impl Default for TraceOptions {
    fn default() -> Self {
        Self {
            resolution: DEFAULT_RESOLUTION,
            tolerance: DEFAULT_TRADE_TOLERANCE,
            consumption_dt: None,
            zoom_passes: 3,
            window: ([0.0, 0.0], [1.0, 1.0]),
        }
    }
}

/// Two-dimensional no-trade region as an ordered boundary polygon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoTradeRegion {
    pub time_index: usize,
    pub state: usize,
    pub tolerance: f64,
    /// Counter-clockwise around the centroid of the scanned no-trade points.
    pub boundary: Vec<[f64; 2]>,
    /// Final scan window.
    pub window: ([f64; 2], [f64; 2]),
    pub resolution: usize,
    /// Number of no-trade points found on the final scan.
    pub no_trade_points: usize,
}

impl NoTradeRegion {
    pub fn is_empty(&self) -> bool {
        self.boundary.len() < 3
    }

    /// Scan step of the final window along each axis.
    pub fn step(&self) -> [f64; 2] {
        let n = (self.resolution - 1).max(1) as f64;
        [(self.window.1[0] - self.window.0[0]) / n, (self.window.1[1] - self.window.0[1]) / n]
    }

    /// Area centroid of the polygon.
    pub fn centroid(&self) -> Result<[f64; 2]> {
        if self.is_empty() {
            return Err(Error::Numerical("empty no-trade region".into()));
        }
        let b = &self.boundary;
        let n = b.len();
        let (mut a, mut cx, mut cy) = (0.0, 0.0, 0.0);
        for i in 0..n {
            let (p, q) = (b[i], b[(i + 1) % n]);
            let cross = p[0] * q[1] - q[0] * p[1];
            a += cross;
            cx += (p[0] + q[0]) * cross;
            cy += (p[1] + q[1]) * cross;
        }
        if a.abs() < 1e-300 {
            let m = b.iter().fold([0.0, 0.0], |acc, p| [acc[0] + p[0], acc[1] + p[1]]);
            return Ok([m[0] / n as f64, m[1] / n as f64]);
        }
        Ok([cx / (3.0 * a), cy / (3.0 * a)])
    }

    pub fn bounding_box(&self) -> Option<([f64; 2], [f64; 2])> {
        if self.boundary.is_empty() {
            return None;
        }
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for p in &self.boundary {
            for j in 0..2 {
                lo[j] = lo[j].min(p[j]);
                hi[j] = hi[j].max(p[j]);
            }
        }
        Some((lo, hi))
    }

    /// Point-in-polygon by ray casting.
    pub fn contains(&self, x: [f64; 2]) -> bool {
        let b = &self.boundary;
        let n = b.len();
        let mut inside = false;
        for i in 0..n {
            let (p, q) = (b[i], b[(i + 1) % n]);
            if (p[1] > x[1]) != (q[1] > x[1]) {
                let t = (x[1] - p[1]) / (q[1] - p[1]);
                if x[0] < p[0] + t * (q[0] - p[0]) {
                    inside = !inside;
                }
            }
        }
        inside
    }

    /// Euclidean distance from `x` to the polygon boundary.
    pub fn boundary_distance(&self, x: [f64; 2]) -> f64 {
        let b = &self.boundary;
        let n = b.len();
        (0..n).map(|i| segment_distance(x, b[i], b[(i + 1) % n])).fold(f64::INFINITY, f64::min)
    }

    /// CSV rows `time, state, x1, x2, boundary_flag`.
    pub fn write_csv(&self, mut out: impl Write) -> Result<()> {
        writeln!(out, "time,state,x1,x2,boundary_flag")?;
        for p in &self.boundary {
            writeln!(out, "{},{},{},{},1", self.time_index, self.state, fmt17(p[0]), fmt17(p[1]))?;
        }
        Ok(())
    }
}

fn segment_distance(x: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let d = [b[0] - a[0], b[1] - a[1]];
    let len2 = d[0] * d[0] + d[1] * d[1];
    let t = if len2 > 0.0 { (((x[0] - a[0]) * d[0] + (x[1] - a[1]) * d[1]) / len2).clamp(0.0, 1.0) } else { 0.0 };
    let p = [a[0] + t * d[0], a[1] + t * d[1]];
    ((x[0] - p[0]).powi(2) + (x[1] - p[1]).powi(2)).sqrt()
}

struct Scan {
    lo: [f64; 2],
    step: [f64; 2],
    decisions: Vec<NodeDecision>,
}

impl Scan {
    fn point(&self, i: usize, j: usize) -> [f64; 2] {
        [self.lo[0] + i as f64 * self.step[0], self.lo[1] + j as f64 * self.step[1]]
    }
}

fn scan<S>(solver: &S, lo: [f64; 2], hi: [f64; 2], res: usize) -> Result<Scan>
where
    S: Fn(&[f64], Option<&[f64]>) -> Result<NodeDecision> + Sync,
{
    let n = (res - 1).max(1) as f64;
    let step = [(hi[0] - lo[0]) / n, (hi[1] - lo[1]) / n];
    // rows of constant x1, warm-started along x2
    let rows: Vec<Result<Vec<NodeDecision>>> = (0..res)
        .into_par_iter()
        .map(|i| {
            let mut out: Vec<NodeDecision> = Vec::with_capacity(res);
            for j in 0..res {
                let x = [lo[0] + i as f64 * step[0], lo[1] + j as f64 * step[1]];
                let warm = out.last().map(NodeDecision::controls);
                out.push(solver(&x, warm.as_deref())?);
            }
            Ok(out)
        })
        .collect();
    let mut decisions = Vec::with_capacity(res * res);
    for r in rows {
        decisions.extend(r?);
    }
    Ok(Scan { lo, step, decisions })
}

/// Traces the no-trade region of a 2-D problem.
///
/// `solver(x, warm)` solves the stage subproblem at `x`. The window is
/// scanned on a `resolution^2` lattice, zoomed onto the bounding box of the
/// no-trade points and post-trade targets while the region is small
/// relative to the window, and every lattice edge that crosses the boundary
/// is bisected [`BISECTION_STEPS`] times.
pub fn trace_boundary_2d<S>(solver: &S, time_index: usize, state: usize, opts: TraceOptions) -> Result<NoTradeRegion>
where
    S: Fn(&[f64], Option<&[f64]>) -> Result<NodeDecision> + Sync,
{
    let res = opts.resolution.max(3);
    let tol = opts.tolerance;
    let (mut lo, mut hi) = opts.window;
    let mut sc = scan(solver, lo, hi, res)?;
    for _ in 0..opts.zoom_passes {
        let mut blo = [f64::INFINITY; 2];
        let mut bhi = [f64::NEG_INFINITY; 2];
        let mut grow = |p: [f64; 2]| {
            for j in 0..2 {
                blo[j] = blo[j].min(p[j]);
                bhi[j] = bhi[j].max(p[j]);
            }
        };
        for i in 0..res {
            for j in 0..res {
                let d = &sc.decisions[i * res + j];
                let x = sc.point(i, j);
                if classify_no_trade(d, tol) {
                    grow(x);
                } else {
                    let u = d.post_trade(&x);
                    grow([u[0], u[1]]);
                }
            }
        }
        let extent = [bhi[0] - blo[0], bhi[1] - blo[1]];
        let window = [hi[0] - lo[0], hi[1] - lo[1]];
        if !(extent[0].is_finite() && extent[1].is_finite()) || (extent[0] > 0.4 * window[0] && extent[1] > 0.4 * window[1]) {
            break;
        }
        let mut nlo = [0.0; 2];
        let mut nhi = [0.0; 2];
        for j in 0..2 {
            let margin = (0.15 * extent[j]).max(1e-6);
            nlo[j] = (blo[j] - margin).max(opts.window.0[j]);
            nhi[j] = (bhi[j] + margin).min(opts.window.1[j]);
        }
        if nhi[0] - nlo[0] >= 0.9 * window[0] && nhi[1] - nlo[1] >= 0.9 * window[1] {
            break;
        }
        lo = nlo;
        hi = nhi;
        sc = scan(solver, lo, hi, res)?;
    }

    let flags: Vec<bool> = sc.decisions.iter().map(|d| classify_no_trade(d, tol)).collect();
    let no_trade_points = flags.iter().filter(|f| **f).count();
    let mut inside = Vec::new();
    for i in 0..res {
        for j in 0..res {
            if flags[i * res + j] {
                inside.push(sc.point(i, j));
            }
        }
    }

    // edges between lattice neighbours with different classification
    let mut edges = Vec::new();
    for i in 0..res {
        for j in 0..res {
            let a = i * res + j;
            if i + 1 < res && flags[a] != flags[a + res] {
                edges.push(((i, j), (i + 1, j)));
            }
            if j + 1 < res && flags[a] != flags[a + 1] {
                edges.push(((i, j), (i, j + 1)));
            }
        }
    }
    // a region touching the window edge is closed by its lattice points there
    let mut rim = Vec::new();
    for i in 0..res {
        for j in 0..res {
            if flags[i * res + j] && (i == 0 || j == 0 || i + 1 == res || j + 1 == res) {
                rim.push((sc.point(i, j), sc.decisions[i * res + j].consumption));
            }
        }
    }

    let points: Vec<Result<([f64; 2], Option<f64>)>> = edges
        .par_iter()
        .map(|&((i0, j0), (i1, j1))| {
            let (mut a, mut b) = (sc.point(i0, j0), sc.point(i1, j1));
            let mut da = sc.decisions[i0 * res + j0].clone();
            if !flags[i0 * res + j0] {
                std::mem::swap(&mut a, &mut b);
                da = sc.decisions[i1 * res + j1].clone();
            }
            // a: no trade, b: trade
            for _ in 0..BISECTION_STEPS {
                let mid = [(a[0] + b[0]) / 2.0, (a[1] + b[1]) / 2.0];
                let d = solver(&mid, Some(&da.controls()))?;
                if classify_no_trade(&d, tol) {
                    a = mid;
                    da = d;
                } else {
                    b = mid;
                }
            }
            Ok(([(a[0] + b[0]) / 2.0, (a[1] + b[1]) / 2.0], da.consumption))
        })
        .collect();
    let mut boundary_raw = Vec::with_capacity(points.len() + rim.len());
    for p in points {
        boundary_raw.push(p?);
    }
    boundary_raw.extend(rim);

    let map = |(p, c): ([f64; 2], Option<f64>)| -> [f64; 2] {
        match (opts.consumption_dt, c) {
            (Some(dt), Some(c)) => {
                let s = 1.0 - c * dt;
                [p[0] / s, p[1] / s]
            }
            _ => p,
        }
    };
    let mut boundary: Vec<[f64; 2]> = boundary_raw.into_iter().map(map).collect();
    if !inside.is_empty() {
        let n = inside.len() as f64;
        let c = inside.iter().fold([0.0, 0.0], |acc, p| [acc[0] + p[0] / n, acc[1] + p[1] / n]);
        boundary.sort_by(|p, q| {
            let ap = (p[1] - c[1]).atan2(p[0] - c[0]);
            let aq = (q[1] - c[1]).atan2(q[0] - c[0]);
            ap.total_cmp(&aq).then(p[0].total_cmp(&q[0])).then(p[1].total_cmp(&q[1]))
        });
        boundary.dedup();
    } else {
        boundary.clear();
    }
    Ok(NoTradeRegion { time_index, state, tolerance: tol, boundary, window: (lo, hi), resolution: res, no_trade_points })
}

/// Extent of the region along axis `axis` (0 or 1) on the line through its centroid.
pub fn region_width(region: &NoTradeRegion, axis: usize) -> Result<f64> {
    if axis > 1 {
        return Err(Error::Parameter(format!("axis {axis} out of range for a 2-D region")));
    }
    let c = region.centroid()?;
    let other = 1 - axis;
    let b = &region.boundary;
    let n = b.len();
    let mut hits = Vec::new();
    for i in 0..n {
        let (p, q) = (b[i], b[(i + 1) % n]);
        let (lo, hi) = if p[other] <= q[other] { (p, q) } else { (q, p) };
        if c[other] >= lo[other] && c[other] <= hi[other] {
            if hi[other] == lo[other] {
                hits.push(lo[axis]);
                hits.push(hi[axis]);
            } else {
                let t = (c[other] - lo[other]) / (hi[other] - lo[other]);
                hits.push(lo[axis] + t * (hi[axis] - lo[axis]));
            }
        }
    }
    if hits.len() < 2 {
        return Err(Error::Numerical("centroid line misses the region".into()));
    }
    let min = hits.iter().copied().fold(f64::INFINITY, f64::min);
    let max = hits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(max - min)
}

/// Largest distance from a mirrored boundary point `(b, a)` to the boundary.
pub fn diagonal_asymmetry(region: &NoTradeRegion) -> f64 {
    region.boundary.iter().map(|p| region.boundary_distance([p[1], p[0]])).fold(0.0, f64::max)
}

/// Containment verdict of `inner` in `outer`, probed on a `probe^2` lattice over
/// `inner`'s bounding box. A probe inside `inner` and outside `outer` counts as
/// a violation only if it is farther than one probe cell from `outer`'s boundary.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Nesting {
    pub contained: bool,
    pub violations: usize,
    pub probes_inside: usize,
    pub cell: f64,
}

pub fn nesting(inner: &NoTradeRegion, outer: &NoTradeRegion, probe: usize) -> Nesting {
    let Some((lo, hi)) = inner.bounding_box() else {
        return Nesting { contained: true, violations: 0, probes_inside: 0, cell: 0.0 };
    };
    let n = (probe.max(2) - 1) as f64;
    let step = [(hi[0] - lo[0]) / n, (hi[1] - lo[1]) / n];
    let cell = step[0].hypot(step[1]);
    let (mut violations, mut probes_inside) = (0, 0);
    for i in 0..probe {
        for j in 0..probe {
            let x = [lo[0] + i as f64 * step[0], lo[1] + j as f64 * step[1]];
            if inner.contains(x) {
                probes_inside += 1;
                if !outer.contains(x) && outer.boundary_distance(x) > cell {
                    violations += 1;
                }
            }
        }
    }
    Nesting { contained: violations == 0, violations, probes_inside, cell }
}

/// For `k >= 3`: distance from `center` to the region boundary along `+e_i`
/// and `-e_i` for every axis, by bisection on each ray. `center` must lie in
/// the region; rays stop at the unit hypercube.
pub fn axis_extents<S>(solver: &S, center: &[f64], tol: f64) -> Result<Vec<[f64; 2]>>
where
    S: Fn(&[f64], Option<&[f64]>) -> Result<NodeDecision> + Sync,
{
    let k = center.len();
    if !classify_no_trade(&solver(center, None)?, tol) {
        return Err(Error::Numerical("ray center is not a no-trade point".into()));
    }
    (0..k)
        .map(|i| {
            let mut out = [0.0; 2];
            for (slot, dir) in [(0usize, -1.0f64), (1, 1.0)] {
                let limit = if dir > 0.0 { 1.0 - center[i] } else { center[i] };
                let probe = |s: f64| -> Result<bool> {
                    let mut x = center.to_vec();
                    x[i] += dir * s;
                    Ok(classify_no_trade(&solver(&x, None)?, tol))
                };
                if probe(limit)? {
                    out[slot] = limit;
                    continue;
                }
                let (mut a, mut b) = (0.0, limit);
                for _ in 0..30 {
                    let m = (a + b) / 2.0;
                    if probe(m)? {
                        a = m;
                    } else {
                        b = m;
                    }
                }
                out[slot] = (a + b) / 2.0;
            }
            Ok(out)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nlp::SolveStatus;

    fn decision(buy: Vec<f64>, sell: Vec<f64>) -> NodeDecision {
        NodeDecision { buy, sell, consumption: None, objective: 0.0, status: SolveStatus::Converged, iterations: 0 }
    }

    #[test]
    fn classification() {
        assert!(classify_no_trade(&decision(vec![1e-9, 0.0], vec![0.0, 1e-9]), 1e-6));
        assert!(!classify_no_trade(&decision(vec![0.05, 0.0], vec![0.0, 0.0]), 1e-6));
    }

    /// Synthetic policy: trade to the box [a, b]^2.
    fn box_solver(a: f64, b: f64) -> impl Fn(&[f64], Option<&[f64]>) -> Result<NodeDecision> + Sync {
        move |x: &[f64], _| {
            let t: Vec<f64> = x.iter().map(|v| v.clamp(a, b)).collect();
            let buy = x.iter().zip(&t).map(|(x, t)| (t - x).max(0.0)).collect();
            let sell = x.iter().zip(&t).map(|(x, t)| (x - t).max(0.0)).collect();
            Ok(decision(buy, sell))
        }
    }

    #[test]
    fn traces_a_box() {
        let r = trace_boundary_2d(&box_solver(0.3, 0.35), 0, 0, TraceOptions { resolution: 41, ..Default::default() }).unwrap();
        let c = r.centroid().unwrap();
        assert!((c[0] - 0.325).abs() < 1e-3 && (c[1] - 0.325).abs() < 1e-3);
        for axis in 0..2 {
            assert!((region_width(&r, axis).unwrap() - 0.05).abs() < 2e-3);
        }
        assert!(diagonal_asymmetry(&r) < 1e-3);
        let big = trace_boundary_2d(&box_solver(0.25, 0.4), 0, 0, TraceOptions { resolution: 41, ..Default::default() }).unwrap();
        assert!(nesting(&r, &big, 41).contained);
        assert!(!nesting(&big, &r, 41).contained);
    }

    #[test]
    fn tiny_region_is_found_by_zooming() {
        let r = trace_boundary_2d(&box_solver(0.3333, 0.3336), 0, 0, TraceOptions { resolution: 21, ..Default::default() }).unwrap();
        assert!(!r.is_empty());
        let c = r.centroid().unwrap();
        assert!((c[0] - 0.33345).abs() < 1e-4);
    }

    #[test]
    fn unit_square_width() {
        let r = NoTradeRegion {
            time_index: 0,
            state: 0,
            tolerance: 1e-6,
            boundary: vec![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]],
            window: ([0.0, 0.0], [1.0, 1.0]),
            resolution: 11,
            no_trade_points: 121,
        };
        assert_eq!(region_width(&r, 0).unwrap(), 1.0);
        assert_eq!(region_width(&r, 1).unwrap(), 1.0);
        assert!(region_width(&r, 2).is_err());
    }
}
