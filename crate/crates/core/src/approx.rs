//! Complete Chebyshev polynomial approximation on hyper-rectangles.
//!
//! A degree-`d` complete approximation in `k` dimensions keeps every tensor
//! basis product `T_a1(z_1) ... T_ak(z_k)` with `a1 + ... + ak <= d`, which
//! gives `binomial(d + k, k)` coefficients instead of the `(d + 1)^k` of a full
//! tensor basis. Coefficients are fitted by Chebyshev regression on a tensor
//! grid of Chebyshev nodes and stored in graded lexicographic order.

use std::f64::consts::PI;
use std::sync::{Arc, OnceLock};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tag written into coefficient archives describing the multi-index order.
pub const MULTI_INDEX_ORDER: &str = "grlex";

/// Axis-aligned box `[lower, upper]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperRectangle {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl HyperRectangle {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.is_empty() || lower.len() != upper.len() {
            return Err(Error::Domain(format!(
                "bound vectors must be non-empty and of equal length (got {} and {})",
                lower.len(),
                upper.len()
            )));
        }
        for (j, (lo, hi)) in lower.iter().zip(&upper).enumerate() {
            if !(lo.is_finite() && hi.is_finite() && hi > lo) {
                return Err(Error::Domain(format!(
                    "dimension {j}: upper bound {hi} must exceed lower bound {lo}"
                )));
            }
        }
        Ok(Self { lower, upper })
    }

    /// The unit hypercube `[0, 1]^k`.
    pub fn unit(k: usize) -> Self {
        assert!(k > 0, "unit hypercube needs at least one dimension");
        Self { lower: vec![0.0; k], upper: vec![1.0; k] }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && x.iter().zip(self.lower.iter().zip(&self.upper)).all(|(v, (lo, hi))| *v >= *lo && *v <= *hi)
    }

    /// Maps `x` to canonical coordinates in `[-1, 1]^k`.
    #[inline]
    pub fn canonical(&self, j: usize, x: f64) -> f64 {
        (2.0 * x - self.lower[j] - self.upper[j]) / (self.upper[j] - self.lower[j])
    }

    /// `dz_j / dx_j`
    #[inline]
    pub fn canonical_scale(&self, j: usize) -> f64 {
        2.0 / (self.upper[j] - self.lower[j])
    }

    #[inline]
    pub fn from_canonical(&self, j: usize, z: f64) -> f64 {
        (z + 1.0) * (self.upper[j] - self.lower[j]) / 2.0 + self.lower[j]
    }
}

/// Number of terms of a degree-`d` complete polynomial basis in `k` variables,
/// `binomial(d + k, k)`.
pub fn basis_count(d: usize, k: usize) -> u64 {
    let small = d.min(k) as u64;
    let n = (d + k) as u64;
    // running product stays an exact binomial at every step
    (0..small).fold(1u64, |acc, i| acc * (n - i) / (i + 1))
}

/// Multi-indices `|alpha| <= d` in graded lexicographic order: total degree
/// ascending, then lexicographically descending within one total degree.
#[derive(Debug)]
pub struct CompleteBasis {
    degree: usize,
    dim: usize,
    indices: Vec<u16>,
    /// Positions in lexicographic (nested) order, built on first use.
    nested: OnceLock<Vec<u32>>,
}

impl CompleteBasis {
    pub fn new(degree: usize, dim: usize) -> Self {
        assert!(dim > 0, "basis needs at least one dimension");
        assert!(degree < u16::MAX as usize, "degree too large");
        let count = basis_count(degree, dim) as usize;
        let mut indices = Vec::with_capacity(count * dim);
        let mut alpha = vec![0u16; dim];
        for total in 0..=degree {
            push_compositions(total, 0, &mut alpha, &mut indices);
        }
        debug_assert_eq!(indices.len(), count * dim);
        Self { degree, dim, indices, nested: OnceLock::new() }
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.indices.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn multi_index(&self, i: usize) -> &[u16] {
        &self.indices[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[u16]> {
        self.indices.chunks_exact(self.dim)
    }

    /// Basis positions sorted lexicographically by multi-index, so that the
    /// terms sharing a prefix `(a_1, ..., a_j)` form one contiguous block.
    fn nested_order(&self) -> &[u32] {
        self.nested.get_or_init(|| {
            let mut order: Vec<u32> = (0..self.len() as u32).collect();
            order.sort_by(|&a, &b| self.multi_index(a as usize).cmp(self.multi_index(b as usize)));
            order
        })
    }

    /// Position of `alpha` in the ordering, if it belongs to the basis.
    pub fn position(&self, alpha: &[u16]) -> Option<usize> {
        self.iter().position(|a| a == alpha)
    }
}

fn push_compositions(remaining: usize, pos: usize, alpha: &mut [u16], out: &mut Vec<u16>) {
    if pos + 1 == alpha.len() {
        alpha[pos] = remaining as u16;
        out.extend_from_slice(alpha);
        return;
    }
    for first in (0..=remaining).rev() {
        alpha[pos] = first as u16;
        push_compositions(remaining - first, pos + 1, alpha, out);
    }
}

/// Tensor grid of `m^k` Chebyshev nodes inside a hyper-rectangle.
///
/// Points are enumerated in row-major order: dimension 0 varies slowest.
#[derive(Debug, Clone)]
pub struct TensorNodeGrid {
    domain: HyperRectangle,
    canonical: Vec<f64>,
}

/// Builds the tensor grid of Chebyshev nodes `z_i = -cos((2i - 1) pi / (2m))`.
pub fn chebyshev_nodes(m: usize, domain: &HyperRectangle) -> Result<TensorNodeGrid> {
    if m == 0 {
        return Err(Error::Domain("node count per dimension must be positive".into()));
    }
    let canonical = (1..=m)
        .map(|i| {
            let z = -(((2 * i - 1) as f64) * PI / (2 * m) as f64).cos();
            // the middle node of an odd grid is 0 analytically
            if 2 * i - 1 == m {
                0.0
            } else {
                z
            }
        })
        .collect();
    Ok(TensorNodeGrid { domain: domain.clone(), canonical })
}

impl TensorNodeGrid {
    pub fn nodes_per_dim(&self) -> usize {
        self.canonical.len()
    }

    pub fn dim(&self) -> usize {
        self.domain.dim()
    }

    pub fn len(&self) -> usize {
        self.nodes_per_dim().pow(self.dim() as u32)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn domain(&self) -> &HyperRectangle {
        &self.domain
    }

    /// One-dimensional canonical nodes in `(-1, 1)`, ascending.
    pub fn canonical_nodes(&self) -> &[f64] {
        &self.canonical
    }

    /// Per-dimension node indices of flat point `i`.
    pub fn multi_index(&self, mut i: usize, out: &mut [usize]) {
        let m = self.nodes_per_dim();
        for slot in out.iter_mut().rev() {
            *slot = i % m;
            i /= m;
        }
    }

    pub fn point_into(&self, i: usize, out: &mut [f64]) {
        let k = self.dim();
        let m = self.nodes_per_dim();
        let mut rest = i;
        for j in (0..k).rev() {
            let idx = rest % m;
            rest /= m;
            out[j] = self.domain.from_canonical(j, self.canonical[idx]);
        }
    }

    pub fn point(&self, i: usize) -> Vec<f64> {
        let mut p = vec![0.0; self.dim()];
        self.point_into(i, &mut p);
        p
    }

    pub fn points(&self) -> impl Iterator<Item = Vec<f64>> + '_ {
        (0..self.len()).map(|i| self.point(i))
    }
}

/// Degree-`d` complete Chebyshev polynomial over a hyper-rectangle.
#[derive(Debug, Clone)]
pub struct ChebyshevSurface {
    domain: HyperRectangle,
    basis: Arc<CompleteBasis>,
    coefficients: Vec<f64>,
    /// Coefficients in nested order, used for evaluation when `k >= 3`.
    nested: OnceLock<Vec<f64>>,
}

/// Result of a checked evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub value: f64,
    /// The point lay outside the approximation domain.
    pub extrapolated: bool,
}

/// Reusable buffers for evaluating surfaces without allocation.
#[derive(Debug, Default, Clone)]
pub struct EvalScratch {
    t: Vec<f64>,
    dt: Vec<f64>,
    z: Vec<f64>,
    acc: Vec<f64>,
}

impl EvalScratch {
    pub fn new() -> Self {
        Self::default()
    }

    fn prepare(&mut self, k: usize, degree: usize) {
        let len = k * (degree + 1);
        if self.t.len() < len {
            self.t.resize(len, 0.0);
            self.dt.resize(len, 0.0);
        }
        if self.z.len() < k {
            self.z.resize(k, 0.0);
            self.acc.resize(k + 1, 0.0);
        }
    }
}

/// Fills `t[0..=d]` with `T_j(z)` by the three-term recurrence.
#[inline]
fn chebyshev_values(z: f64, t: &mut [f64]) {
    t[0] = 1.0;
    if t.len() > 1 {
        t[1] = z;
    }
    for j in 2..t.len() {
        t[j] = 2.0 * z * t[j - 1] - t[j - 2];
    }
}

/// Fills `T_j(z)` and `T_j'(z)`; the derivative uses
/// `T'_{j+1} = 2 T_j + 2 z T'_j - T'_{j-1}`.
#[inline]
fn chebyshev_values_and_slopes(z: f64, t: &mut [f64], dt: &mut [f64]) {
    t[0] = 1.0;
    dt[0] = 0.0;
    if t.len() > 1 {
        t[1] = z;
        dt[1] = 1.0;
    }
    for j in 2..t.len() {
        t[j] = 2.0 * z * t[j - 1] - t[j - 2];
        dt[j] = 2.0 * t[j - 1] + 2.0 * z * dt[j - 1] - dt[j - 2];
    }
}

/// Sum of the nested-order block starting at `*pos` over axes `level..k`
/// with total degree at most `budget`; advances `*pos` past the block.
fn nested_value(level: usize, budget: usize, c: &[f64], pos: &mut usize, t: &[f64], stride: usize, k: usize) -> f64 {
    let ts = &t[level * stride..];
    if level + 1 == k {
        let block = &c[*pos..*pos + budget + 1];
        *pos += budget + 1;
        return block.iter().zip(ts).map(|(b, t)| b * t).sum();
    }
    let mut v = 0.0;
    for a in 0..=budget {
        v += ts[a] * nested_value(level + 1, budget - a, c, pos, t, stride, k);
    }
    v
}

/// As [`nested_value`], also differentiating: `acc[0]` receives the value
/// and `acc[1 + j]` the slope along axis `level + j`. Deeper levels use the
/// tail of `acc` as workspace.
#[allow(clippy::too_many_arguments)]
fn nested_block(level: usize, budget: usize, c: &[f64], pos: &mut usize, t: &[f64], dt: &[f64], stride: usize, k: usize, acc: &mut [f64]) {
    let width = k - level + 1;
    let (out, rest) = acc.split_at_mut(width);
    let (ts, ds) = (&t[level * stride..], &dt[level * stride..]);
    if level + 1 == k {
        let block = &c[*pos..*pos + budget + 1];
        *pos += budget + 1;
        let (mut v, mut g) = (0.0, 0.0);
        for (a, b) in block.iter().enumerate() {
            v += b * ts[a];
            g += b * ds[a];
        }
        out[0] = v;
        out[1] = g;
        return;
    }
    out.iter_mut().for_each(|v| *v = 0.0);
    for a in 0..=budget {
        nested_block(level + 1, budget - a, c, pos, t, dt, stride, k, rest);
        let inner = &rest[..width - 1];
        out[0] += ts[a] * inner[0];
        out[1] += ds[a] * inner[0];
        for j in 1..width - 1 {
            out[1 + j] += ts[a] * inner[j];
        }
    }
}

impl ChebyshevSurface {
    fn assemble(domain: HyperRectangle, basis: Arc<CompleteBasis>, coefficients: Vec<f64>) -> Self {
        Self { domain, basis, coefficients, nested: OnceLock::new() }
    }

    fn nested(&self) -> &[f64] {
        self.nested.get_or_init(|| self.basis.nested_order().iter().map(|&i| self.coefficients[i as usize]).collect())
    }

    /// Builds a surface from coefficients in graded lexicographic order.
    pub fn from_coefficients(domain: HyperRectangle, degree: usize, coefficients: Vec<f64>) -> Result<Self> {
        let basis = Arc::new(CompleteBasis::new(degree, domain.dim()));
        Self::with_basis(domain, basis, coefficients)
    }

    pub fn with_basis(domain: HyperRectangle, basis: Arc<CompleteBasis>, coefficients: Vec<f64>) -> Result<Self> {
        if basis.dim() != domain.dim() {
            return Err(Error::Dimension { expected: domain.dim(), found: basis.dim() });
        }
        if coefficients.len() != basis.len() {
            return Err(Error::Dimension { expected: basis.len(), found: coefficients.len() });
        }
        Ok(Self::assemble(domain, basis, coefficients))
    }

    /// Constant surface `c` on `domain`.
    pub fn constant(domain: HyperRectangle, degree: usize, c: f64) -> Self {
        let basis = Arc::new(CompleteBasis::new(degree, domain.dim()));
        let mut coefficients = vec![0.0; basis.len()];
        coefficients[0] = c;
        Self::assemble(domain, basis, coefficients)
    }

    pub fn domain(&self) -> &HyperRectangle {
        &self.domain
    }

    pub fn degree(&self) -> usize {
        self.basis.degree()
    }

    pub fn dim(&self) -> usize {
        self.domain.dim()
    }

    pub fn basis(&self) -> &Arc<CompleteBasis> {
        &self.basis
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.coefficients
    }

    pub fn coefficient(&self, alpha: &[u16]) -> Option<f64> {
        self.basis.position(alpha).map(|i| self.coefficients[i])
    }

    /// Checked evaluation that also reports extrapolation.
    pub fn evaluate(&self, x: &[f64]) -> Result<Evaluation> {
        if x.len() != self.dim() {
            return Err(Error::Dimension { expected: self.dim(), found: x.len() });
        }
        let mut scratch = EvalScratch::new();
        Ok(Evaluation { value: self.value_with(x, &mut scratch), extrapolated: !self.domain.contains(x) })
    }

    /// Unchecked evaluation; `x.len()` must equal the dimension.
    pub fn value_with(&self, x: &[f64], scratch: &mut EvalScratch) -> f64 {
        let k = self.dim();
        let d = self.degree();
        let stride = d + 1;
        scratch.prepare(k, d);
        for j in 0..k {
            let z = self.domain.canonical(j, x[j]);
            chebyshev_values(z, &mut scratch.t[j * stride..(j + 1) * stride]);
        }
        let t = &scratch.t;
        let c = &self.coefficients;
        let idx = &self.basis.indices;
        match k {
            1 => c.iter().zip(idx).map(|(b, &a)| b * t[a as usize]).sum(),
            2 => {
                let (t0, t1) = t.split_at(stride);
                let mut acc = 0.0;
                for (b, a) in c.iter().zip(idx.chunks_exact(2)) {
                    acc += b * t0[a[0] as usize] * t1[a[1] as usize];
                }
                acc
            }
            _ => {
                let mut pos = 0;
                nested_value(0, d, self.nested(), &mut pos, t, stride, k)
            }
        }
    }

    /// Value and gradient with respect to `x`; `grad.len()` must equal the dimension.
    pub fn value_grad_with(&self, x: &[f64], grad: &mut [f64], scratch: &mut EvalScratch) -> f64 {
        let k = self.dim();
        let d = self.degree();
        let stride = d + 1;
        scratch.prepare(k, d);
        for j in 0..k {
            let z = self.domain.canonical(j, x[j]);
            scratch.z[j] = z;
            let range = j * stride..(j + 1) * stride;
            chebyshev_values_and_slopes(z, &mut scratch.t[range.clone()], &mut scratch.dt[range]);
        }
        let t = &scratch.t;
        let dt = &scratch.dt;
        let c = &self.coefficients;
        let idx = &self.basis.indices;
        let value = match k {
            1 => {
                let mut v = 0.0;
                let mut g = 0.0;
                for (b, &a) in c.iter().zip(idx) {
                    v += b * t[a as usize];
                    g += b * dt[a as usize];
                }
                grad[0] = g;
                v
            }
            2 => {
                let (t0, t1) = t.split_at(stride);
                let (d0, d1) = dt.split_at(stride);
                let (mut v, mut g0, mut g1) = (0.0, 0.0, 0.0);
                for (b, a) in c.iter().zip(idx.chunks_exact(2)) {
                    let (a0, a1) = (a[0] as usize, a[1] as usize);
                    let bt1 = b * t1[a1];
                    v += bt1 * t0[a0];
                    g0 += bt1 * d0[a0];
                    g1 += b * t0[a0] * d1[a1];
                }
                grad[0] = g0;
                grad[1] = g1;
                v
            }
            3 => {
                let c = self.nested();
                let (t0, rest) = t.split_at(stride);
                let (t1, t2) = rest.split_at(stride);
                let (d0, rest) = dt.split_at(stride);
                let (d1, d2) = rest.split_at(stride);
                let (mut v, mut g0, mut g1, mut g2) = (0.0, 0.0, 0.0, 0.0);
                let mut pos = 0;
                for a0 in 0..=d {
                    let (mut v1, mut h1, mut h2) = (0.0, 0.0, 0.0);
                    for a1 in 0..=d - a0 {
                        let len = d - a0 - a1 + 1;
                        let block = &c[pos..pos + len];
                        pos += len;
                        let (mut v2, mut k2) = (0.0, 0.0);
                        for ((b, x), y) in block.iter().zip(t2).zip(d2) {
                            v2 += b * x;
                            k2 += b * y;
                        }
                        v1 += t1[a1] * v2;
                        h1 += d1[a1] * v2;
                        h2 += t1[a1] * k2;
                    }
                    v += t0[a0] * v1;
                    g0 += d0[a0] * v1;
                    g1 += t0[a0] * h1;
                    g2 += t0[a0] * h2;
                }
                grad[0] = g0;
                grad[1] = g1;
                grad[2] = g2;
                v
            }
            _ => {
                let acc = &mut scratch.acc;
                let need = (k + 1) * (k + 1);
                if acc.len() < need {
                    acc.resize(need, 0.0);
                }
                let mut pos = 0;
                nested_block(0, d, self.nested(), &mut pos, t, dt, stride, k, acc);
                grad[..k].copy_from_slice(&acc[1..=k]);
                acc[0]
            }
        };
        for (j, g) in grad.iter_mut().enumerate().take(k) {
            *g *= self.domain.canonical_scale(j);
        }
        value
    }

    /// Coefficientwise `sum_i w_i * s_i`; all surfaces must share basis and domain.
    pub fn linear_combination(weights: &[f64], surfaces: &[&ChebyshevSurface]) -> Result<Self> {
        let first = surfaces.first().ok_or_else(|| Error::Domain("no surfaces to combine".into()))?;
        let mut coefficients = vec![0.0; first.coefficients.len()];
        for (w, s) in weights.iter().zip(surfaces) {
            if s.domain != first.domain || s.basis.degree() != first.basis.degree() {
                return Err(Error::Domain("surfaces differ in domain or degree".into()));
            }
            for (acc, b) in coefficients.iter_mut().zip(&s.coefficients) {
                *acc += w * b;
            }
        }
        Ok(Self::assemble(first.domain.clone(), first.basis.clone(), coefficients))
    }

    /// Restricts dimension `axis` to the domain's lower bound and returns a
    /// surface over the same domain that no longer depends on that axis.
    pub fn freeze_axis_at_lower(&self, axis: usize) -> Self {
        let mut coefficients = vec![0.0; self.coefficients.len()];
        // T_a(-1) = (-1)^a
        for (b, alpha) in self.coefficients.iter().zip(self.basis.iter()) {
            let sign = if alpha[axis] % 2 == 0 { 1.0 } else { -1.0 };
            let mut target = alpha.to_vec();
            target[axis] = 0;
            let pos = self.basis.position(&target).expect("lower-degree index is in the basis");
            coefficients[pos] += sign * b;
        }
        Self::assemble(self.domain.clone(), self.basis.clone(), coefficients)
    }

    pub fn to_archive(&self) -> SurfaceArchive {
        SurfaceArchive {
            domain: self.domain.clone(),
            degree: self.degree(),
            dimension: self.dim(),
            order: MULTI_INDEX_ORDER.to_string(),
            coefficients: self.coefficients.iter().map(|c| format!("{:016x}", c.to_bits())).collect(),
        }
    }

    pub fn from_archive(archive: &SurfaceArchive) -> Result<Self> {
        if archive.order != MULTI_INDEX_ORDER {
            return Err(Error::Archive(format!("unsupported multi-index order {:?}", archive.order)));
        }
        if archive.dimension != archive.domain.dim() {
            return Err(Error::Archive("dimension disagrees with domain".into()));
        }
        let coefficients = archive
            .coefficients
            .iter()
            .map(|h| {
                u64::from_str_radix(h, 16)
                    .map(f64::from_bits)
                    .map_err(|e| Error::Archive(format!("bad coefficient {h:?}: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_coefficients(archive.domain.clone(), archive.degree, coefficients)
    }
}

/// Lossless JSON form of a surface; coefficients are the hex bit patterns of
/// the binary64 values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SurfaceArchive {
    pub domain: HyperRectangle,
    pub degree: usize,
    pub dimension: usize,
    pub order: String,
    pub coefficients: Vec<String>,
}

/// Chebyshev regression of grid values onto a degree-`d` complete basis:
/// `b_alpha = 2^(k - n) / m^k * sum_i v_i T_alpha(z_i)` with `n` the number of
/// zero entries of `alpha`.
pub fn fit_complete(grid: &TensorNodeGrid, values: &[f64], degree: usize) -> Result<ChebyshevSurface> {
    let basis = Arc::new(CompleteBasis::new(degree, grid.dim()));
    fit_with_basis(grid, values, basis)
}

/// As [`fit_complete`] with a shared, precomputed basis.
pub fn fit_with_basis(grid: &TensorNodeGrid, values: &[f64], basis: Arc<CompleteBasis>) -> Result<ChebyshevSurface> {
    let k = grid.dim();
    let m = grid.nodes_per_dim();
    let degree = basis.degree();
    if basis.dim() != k {
        return Err(Error::Dimension { expected: k, found: basis.dim() });
    }
    if values.len() != grid.len() {
        return Err(Error::Dimension { expected: grid.len(), found: values.len() });
    }
    if m < degree + 1 {
        return Err(Error::Domain(format!("{m} nodes per dimension cannot fit degree {degree}")));
    }
    let stride = degree + 1;
    // table[a * m + i] = T_a(z_i)
    let mut table = vec![0.0; stride * m];
    let mut column = vec![0.0; stride];
    for (i, &z) in grid.canonical_nodes().iter().enumerate() {
        chebyshev_values(z, &mut column);
        for a in 0..stride {
            table[a * m + i] = column[a];
        }
    }

    // Contract one axis at a time, fastest axis first; the axis being
    // contracted is always the last one of the current layout and is
    // rotated to the front afterwards.
    let mut current = values.to_vec();
    let mut shape: Vec<usize> = vec![m; k];
    for _ in 0..k {
        let inner = *shape.last().unwrap();
        let outer: usize = shape[..k - 1].iter().product();
        let mut next = vec![0.0; outer * stride];
        for o in 0..outer {
            let row = &current[o * inner..(o + 1) * inner];
            for a in 0..stride {
                let trow = &table[a * m..(a + 1) * m];
                let mut acc = 0.0;
                for (v, t) in row.iter().zip(trow) {
                    acc += v * t;
                }
                // new layout: axis a moves to the front
                next[a * outer + o] = acc;
            }
        }
        shape.pop();
        shape.insert(0, stride);
        current = next;
    }
    // after k rotations the layout is back to dimension 0 slowest
    let scale = 1.0 / (m as f64).powi(k as i32);
    let coefficients = basis
        .iter()
        .map(|alpha| {
            let mut flat = 0usize;
            let mut nonzero = 0;
            for &a in alpha {
                flat = flat * stride + a as usize;
                if a != 0 {
                    nonzero += 1;
                }
            }
            current[flat] * scale * f64::from(1u32 << nonzero)
        })
        .collect();
    ChebyshevSurface::with_basis(grid.domain().clone(), basis, coefficients)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit1() -> HyperRectangle {
        HyperRectangle::new(vec![-1.0], vec![1.0]).unwrap()
    }

    #[test]
    fn node_examples() {
        let g = chebyshev_nodes(1, &unit1()).unwrap();
        assert_eq!(g.point(0), vec![0.0]);
        let g = chebyshev_nodes(2, &unit1()).unwrap();
        assert!((g.point(0)[0] + 0.5f64.sqrt()).abs() < 1e-15);
        assert!((g.point(1)[0] - 0.5f64.sqrt()).abs() < 1e-15);
        let g = chebyshev_nodes(1, &HyperRectangle::unit(1)).unwrap();
        assert_eq!(g.point(0), vec![0.5]);
    }

    #[test]
    fn node_errors() {
        assert!(chebyshev_nodes(0, &unit1()).is_err());
        assert!(HyperRectangle::new(vec![0.0], vec![0.0]).is_err());
        assert!(HyperRectangle::new(vec![0.0, 0.0], vec![1.0]).is_err());
    }

    #[test]
    fn grid_nodes_strictly_inside() {
        let dom = HyperRectangle::new(vec![0.0, 2.0], vec![1.0, 5.0]).unwrap();
        let g = chebyshev_nodes(7, &dom).unwrap();
        assert_eq!(g.len(), 49);
        for p in g.points() {
            assert!(p[0] > 0.0 && p[0] < 1.0 && p[1] > 2.0 && p[1] < 5.0);
        }
    }

    #[test]
    fn basis_count_fixtures() {
        assert_eq!(basis_count(2, 100), 5151);
        assert_eq!(basis_count(30, 4), 46376);
        assert_eq!(basis_count(0, 7), 1);
        assert_eq!(CompleteBasis::new(5, 3).len() as u64, basis_count(5, 3));
    }

    #[test]
    fn grlex_order() {
        let b = CompleteBasis::new(2, 2);
        let got: Vec<Vec<u16>> = b.iter().map(|a| a.to_vec()).collect();
        assert_eq!(got, vec![vec![0, 0], vec![1, 0], vec![0, 1], vec![2, 0], vec![1, 1], vec![0, 2]]);
    }

    #[test]
    fn fit_constant_and_linear() {
        let g = chebyshev_nodes(4, &unit1()).unwrap();
        let s = fit_complete(&g, &[2.5; 4], 3).unwrap();
        assert!((s.coefficients()[0] - 2.5).abs() < 1e-15);
        assert!(s.coefficients()[1..].iter().all(|c| c.abs() < 1e-15));

        let g = chebyshev_nodes(2, &unit1()).unwrap();
        let vals: Vec<f64> = g.points().map(|p| p[0]).collect();
        let s = fit_complete(&g, &vals, 1).unwrap();
        assert!(s.coefficients()[0].abs() < 1e-15);
        assert!((s.coefficients()[1] - 1.0).abs() < 1e-15);

        let dom = HyperRectangle::unit(2);
        let g = chebyshev_nodes(5, &dom).unwrap();
        let s = fit_complete(&g, &vec![1.0; 25], 4).unwrap();
        assert!((s.coefficient(&[0, 0]).unwrap() - 1.0).abs() < 1e-14);
        assert!(s.coefficients()[1..].iter().all(|c| c.abs() < 1e-14));
    }

    #[test]
    fn fit_rejects_bad_input() {
        let g = chebyshev_nodes(3, &unit1()).unwrap();
        assert!(fit_complete(&g, &[1.0, 2.0], 2).is_err());
        assert!(fit_complete(&g, &[1.0, 2.0, 3.0], 3).is_err());
    }

    #[test]
    fn evaluate_examples() {
        let s = ChebyshevSurface::from_coefficients(unit1(), 2, vec![0.0, 0.0, 1.0]).unwrap();
        assert!((s.evaluate(&[0.0]).unwrap().value + 1.0).abs() < 1e-15);
        let c = ChebyshevSurface::constant(HyperRectangle::unit(3), 4, 1.0);
        let e = c.evaluate(&[0.3, 0.9, 0.1]).unwrap();
        assert_eq!(e.value, 1.0);
        assert!(!e.extrapolated);
        assert!(c.evaluate(&[1.3, 0.9, 0.1]).unwrap().extrapolated);
        assert!(c.evaluate(&[0.3]).is_err());
    }

    #[test]
    fn interpolates_at_nodes() {
        let dom = HyperRectangle::new(vec![0.0, -1.0, 0.5], vec![1.0, 2.0, 0.9]).unwrap();
        let d = 5;
        let g = chebyshev_nodes(d + 1, &dom).unwrap();
        let f = |p: &[f64]| (p[0] * 3.0).sin() + p[1] * p[2].exp() - (p[0] * p[1]).cos();
        let vals: Vec<f64> = g.points().map(|p| f(&p)).collect();
        // complete basis is not the full tensor basis, so nodes are only
        // reproduced exactly for k = 1; check the 1-D case separately
        let s = fit_complete(&g, &vals, d).unwrap();
        assert_eq!(s.coefficients().len() as u64, basis_count(d, 3));

        let dom1 = HyperRectangle::new(vec![0.2], vec![1.7]).unwrap();
        let g1 = chebyshev_nodes(d + 1, &dom1).unwrap();
        let v1: Vec<f64> = g1.points().map(|p| (p[0] * 2.0).exp()).collect();
        let s1 = fit_complete(&g1, &v1, d).unwrap();
        for (p, v) in g1.points().zip(&v1) {
            let e = s1.evaluate(&p).unwrap().value;
            assert!((e - v).abs() <= 1e-10 * v.abs().max(1.0));
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let dom = HyperRectangle::unit(3);
        let g = chebyshev_nodes(7, &dom).unwrap();
        let vals: Vec<f64> = g.points().map(|p| (p[0] + 2.0 * p[1]).sin() * (1.0 + p[2] * p[2])).collect();
        let s = fit_complete(&g, &vals, 6).unwrap();
        let mut scratch = EvalScratch::new();
        let x = [0.31, 0.62, 0.17];
        let mut grad = [0.0; 3];
        let v = s.value_grad_with(&x, &mut grad, &mut scratch);
        assert!((v - s.value_with(&x, &mut scratch)).abs() < 1e-14);
        for j in 0..3 {
            let h = 1e-6;
            let mut xp = x;
            let mut xm = x;
            xp[j] += h;
            xm[j] -= h;
            let fd = (s.value_with(&xp, &mut scratch) - s.value_with(&xm, &mut scratch)) / (2.0 * h);
            assert!((fd - grad[j]).abs() < 1e-7, "axis {j}: {fd} vs {}", grad[j]);
        }
    }

    #[test]
    fn freeze_axis_matches_direct_evaluation() {
        let dom = HyperRectangle::unit(2);
        let g = chebyshev_nodes(9, &dom).unwrap();
        let vals: Vec<f64> = g.points().map(|p| (p[0] - 0.3).powi(2) + p[1] * p[0] + p[1].powi(3)).collect();
        let s = fit_complete(&g, &vals, 8).unwrap();
        let frozen = s.freeze_axis_at_lower(1);
        let mut scratch = EvalScratch::new();
        for &x in &[0.1, 0.45, 0.9] {
            let want = s.value_with(&[x, 0.0], &mut scratch);
            for &y in &[0.0, 0.3, 1.0] {
                assert!((frozen.value_with(&[x, y], &mut scratch) - want).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn archive_round_trip_is_bit_exact() {
        let dom = HyperRectangle::unit(2);
        let g = chebyshev_nodes(6, &dom).unwrap();
        let vals: Vec<f64> = g.points().map(|p| (p[0] * 7.1).sin() / (1.0 + p[1])).collect();
        let s = fit_complete(&g, &vals, 5).unwrap();
        let text = serde_json::to_string(&s.to_archive()).unwrap();
        let back = ChebyshevSurface::from_archive(&serde_json::from_str(&text).unwrap()).unwrap();
        assert!(s.coefficients().iter().zip(back.coefficients()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}
