//! Gauss–Hermite rules and Gaussian expectation operators.

use std::f64::consts::PI;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};

pub const MAX_ORDER: usize = 64;

/// Pivots at or below this value are treated as zero in [`cholesky_psd`].
pub const PIVOT_TOLERANCE: f64 = 1e-12;

/// Nodes and weights for `int f(x) exp(-x^2) dx`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussHermiteRule {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl GaussHermiteRule {
    pub fn order(&self) -> usize {
        self.nodes.len()
    }

    /// Ascending.
    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// `sum_i w_i f(x_i)`, approximating `int f(x) exp(-x^2) dx`.
    ///
    /// Mirrored nodes are summed in pairs so odd integrands cancel exactly.
    pub fn integrate(&self, mut f: impl FnMut(f64) -> f64) -> f64 {
        let m = self.nodes.len();
        let mut acc = 0.0;
        for i in 0..m / 2 {
            let j = m - 1 - i;
            acc += self.weights[i] * (f(self.nodes[i]) + f(self.nodes[j]));
        }
        if m % 2 == 1 {
            acc += self.weights[m / 2] * f(self.nodes[m / 2]);
        }
        acc
    }

    /// `E[f(X)]` for `X ~ N(mean, sd^2)`.
    pub fn expect_normal(&self, mean: f64, sd: f64, mut f: impl FnMut(f64) -> f64) -> f64 {
        let s2 = std::f64::consts::SQRT_2 * sd;
        self.integrate(|x| f(mean + s2 * x)) / PI.sqrt()
    }
}

/// Orthonormal Hermite values `p_{m-1}(x), p_m(x)` for the weight `exp(-x^2)`.
fn hermite_pair(m: usize, x: f64) -> (f64, f64, f64) {
    let mut prev = 0.0;
    let mut cur = PI.powf(-0.25);
    let mut sumsq = cur * cur;
    for j in 0..m {
        let next = x * (2.0 / (j + 1) as f64).sqrt() * cur - (j as f64 / (j + 1) as f64).sqrt() * prev;
        prev = cur;
        cur = next;
        if j + 1 < m {
            sumsq += cur * cur;
        }
    }
    (prev, cur, sumsq)
}

/// Gauss–Hermite rule of order `m` (physicists' weight `exp(-x^2)`).
///
/// Golub–Welsch on the Jacobi matrix, then one Newton polish per node on the
/// three-term recurrence; weights are `1 / sum_j p_j(x)^2`.
pub fn gauss_hermite_rule(m: usize) -> Result<GaussHermiteRule> {
    if m == 0 || m > MAX_ORDER {
        return Err(Error::Parameter(format!("quadrature order {m} outside 1..={MAX_ORDER}")));
    }
    let mut jacobi = DMatrix::<f64>::zeros(m, m);
    for i in 1..m {
        let b = (i as f64 / 2.0).sqrt();
        jacobi[(i, i - 1)] = b;
        jacobi[(i - 1, i)] = b;
    }
    let eig = SymmetricEigen::new(jacobi);
    let mut nodes: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    nodes.sort_by(|a, b| a.total_cmp(b));

    // enforce exact symmetry: polish the non-negative half and mirror it
    let half = m / 2;
    let mut polished = vec![0.0; m];
    let mut weights = vec![0.0; m];
    for i in 0..m {
        if i < half {
            continue;
        }
        let mut x = if m % 2 == 1 && i == half { 0.0 } else { nodes[i].abs() };
        if x != 0.0 {
            for _ in 0..3 {
                let (pm1, pm, _) = hermite_pair(m, x);
                let dp = (2.0 * m as f64).sqrt() * pm1;
                let step = pm / dp;
                x -= step;
                if step.abs() <= 1e-16 * x.abs() {
                    break;
                }
            }
        }
        let (_, _, sumsq) = hermite_pair(m, x);
        polished[i] = x;
        weights[i] = 1.0 / sumsq;
        polished[m - 1 - i] = -x;
        weights[m - 1 - i] = weights[i];
    }
    Ok(GaussHermiteRule { nodes: polished, weights })
}

/// Default per-dimension order for a time step in years.
pub fn default_order(dt: f64) -> usize {
    if dt <= 1.0 / 12.0 + 1e-12 {
        3
    } else {
        5
    }
}

/// Lower-triangular `L` with `L L^T = a` for symmetric positive semidefinite `a`.
///
/// A pivot at or below [`PIVOT_TOLERANCE`] (relative to the diagonal scale)
/// zeroes its column instead of failing; a clearly negative pivot is an error.
pub fn cholesky_psd(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::Dimension { expected: n, found: a.ncols() });
    }
    for i in 0..n {
        for j in 0..i {
            let (x, y) = (a[(i, j)], a[(j, i)]);
            if (x - y).abs() > 1e-12 * (1.0 + x.abs().max(y.abs())) {
                return Err(Error::NotPsd(format!("not symmetric at ({i}, {j})")));
            }
        }
    }
    let scale = (0..n).map(|i| a[(i, i)].abs()).fold(0.0, f64::max).max(1.0);
    let mut l = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let mut pivot = a[(j, j)];
        for p in 0..j {
            pivot -= l[(j, p)] * l[(j, p)];
        }
        if pivot <= PIVOT_TOLERANCE * scale {
            if pivot < -1e-9 * scale {
                return Err(Error::NotPsd(format!("negative pivot {pivot:e} at column {j}")));
            }
            // rank-deficient direction: the remaining entries of the column
            // must vanish as well for the matrix to be PSD
            for i in j + 1..n {
                let mut v = a[(i, j)];
                for p in 0..j {
                    v -= l[(i, p)] * l[(j, p)];
                }
                if v.abs() > 1e-9 * scale {
                    return Err(Error::NotPsd(format!("inconsistent zero pivot at column {j}")));
                }
            }
            continue;
        }
        let d = pivot.sqrt();
        l[(j, j)] = d;
        for i in j + 1..n {
            let mut v = a[(i, j)];
            for p in 0..j {
                v -= l[(i, p)] * l[(j, p)];
            }
            l[(i, j)] = v / d;
        }
    }
    Ok(l)
}

/// Product Gauss–Hermite discretization of `N(0, cov)`: a list of
/// `(draw, probability)` pairs. Columns of the factor that vanish are not
/// integrated over, so a zero covariance gives the single draw `0`.
pub fn normal_nodes(cov: &DMatrix<f64>, m: usize) -> Result<Vec<(Vec<f64>, f64)>> {
    let rule = gauss_hermite_rule(m)?;
    let l = cholesky_psd(cov)?;
    let k = cov.nrows();
    let active: Vec<usize> = (0..k).filter(|&j| l.column(j).iter().any(|v| *v != 0.0)).collect();
    let norm = PI.sqrt();
    let count = m.pow(active.len() as u32);
    let mut out = Vec::with_capacity(count);
    let mut idx = vec![0usize; active.len()];
    let sqrt2 = std::f64::consts::SQRT_2;
    for flat in 0..count {
        let mut rest = flat;
        for slot in idx.iter_mut().rev() {
            *slot = rest % m;
            rest /= m;
        }
        let mut draw = vec![0.0; k];
        let mut prob = 1.0;
        for (a, &j) in active.iter().enumerate() {
            let x = rule.nodes[idx[a]];
            prob *= rule.weights[idx[a]] / norm;
            for (i, d) in draw.iter_mut().enumerate() {
                *d += l[(i, j)] * sqrt2 * x;
            }
        }
        out.push((draw, prob));
    }
    Ok(out)
}

/// `E[f(X)]` for `X ~ N(mean, cov)` by product Gauss–Hermite quadrature of
/// order `m` per dimension.
pub fn expect_mvn(mut f: impl FnMut(&[f64]) -> f64, mean: &[f64], cov: &DMatrix<f64>, m: usize) -> Result<f64> {
    if cov.nrows() != mean.len() {
        return Err(Error::Dimension { expected: mean.len(), found: cov.nrows() });
    }
    let mut point = vec![0.0; mean.len()];
    let mut acc = 0.0;
    for (draw, prob) in normal_nodes(cov, m)? {
        for ((p, d), mu) in point.iter_mut().zip(&draw).zip(mean) {
            *p = d + mu;
        }
        acc += prob * f(&point);
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// `int x^p exp(-x^2) dx = Gamma((p+1)/2)` for even `p`, zero for odd.
    fn moment(p: u32) -> f64 {
        if p % 2 == 1 {
            0.0
        } else {
            // Gamma(n + 1/2) = (2n)! / (4^n n!) sqrt(pi)
            let n = p / 2;
            let mut g = PI.sqrt();
            for i in 0..n {
                g *= i as f64 + 0.5;
            }
            g
        }
    }

    #[test]
    fn small_rules() {
        let r = gauss_hermite_rule(1).unwrap();
        assert_eq!(r.nodes(), &[0.0]);
        assert!((r.weights()[0] - PI.sqrt()).abs() < 1e-15);
        let r = gauss_hermite_rule(2).unwrap();
        let h = 0.5f64.sqrt();
        assert!((r.nodes()[0] + h).abs() < 1e-15 && (r.nodes()[1] - h).abs() < 1e-15);
        for w in r.weights() {
            assert!((w - PI.sqrt() / 2.0).abs() < 1e-15);
        }
        assert!(gauss_hermite_rule(0).is_err());
        assert!(gauss_hermite_rule(65).is_err());
    }

    #[test]
    fn mass_symmetry_exactness() {
        for m in 1..=MAX_ORDER {
            let r = gauss_hermite_rule(m).unwrap();
            let mass: f64 = r.weights().iter().sum();
            assert!((mass - PI.sqrt()).abs() < 1e-12, "m={m} mass {mass}");
            assert!(r.weights().iter().all(|w| *w > 0.0));
            for i in 0..m {
                assert_eq!(r.nodes()[i], -r.nodes()[m - 1 - i]);
            }
            if m <= 20 {
                for p in 0..(2 * m as u32) {
                    let got = r.integrate(|x| x.powi(p as i32));
                    let want = moment(p);
                    assert!((got - want).abs() <= 1e-10 * want.abs().max(1.0), "m={m} p={p}: {got} vs {want}");
                }
            }
        }
    }

    #[test]
    fn mvn_examples() {
        let cov = DMatrix::from_row_slice(2, 2, &[0.04, 0.01, 0.01, 0.09]);
        let mean = [0.3, -0.2];
        let lin = expect_mvn(|x| 2.0 * x[0] - 3.0 * x[1] + 1.0, &mean, &cov, 3).unwrap();
        assert!((lin - (0.6 + 0.6 + 1.0)).abs() < 1e-14);
        let one = expect_mvn(|_| 1.0, &mean, &cov, 4).unwrap();
        assert!((one - 1.0).abs() < 1e-12);
        let sq = expect_mvn(|x| x[0] * x[0], &[0.0], &DMatrix::from_element(1, 1, 1.0), 3).unwrap();
        assert!((sq - 1.0).abs() < 1e-12);
        // E[x0 x1] = cov
        let cross = expect_mvn(|x| x[0] * x[1], &[0.0, 0.0], &cov, 2).unwrap();
        assert!((cross - 0.01).abs() < 1e-15);
        assert!(expect_mvn(|_| 1.0, &[0.0], &cov, 3).is_err());
    }

    #[test]
    fn diagonal_is_tensor_product() {
        let cov = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![0.04, 0.25]));
        let f = |x: &[f64]| (x[0]).exp() * (1.0 + x[1] * x[1]);
        let joint = expect_mvn(f, &[0.1, 0.0], &cov, 5).unwrap();
        let r = gauss_hermite_rule(5).unwrap();
        let a = r.expect_normal(0.1, 0.2, f64::exp);
        let b = r.expect_normal(0.0, 0.5, |x| 1.0 + x * x);
        assert!((joint - a * b).abs() < 1e-12);
    }

    #[test]
    fn lognormal_mean() {
        let r = gauss_hermite_rule(9).unwrap();
        for &s in &[0.01, 0.1, 0.2, 0.3] {
            let got = r.expect_normal(0.05, s, f64::exp);
            let want = (0.05 + s * s / 2.0f64).exp();
            assert!((got / want - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn psd_factor() {
        let rank1 = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let l = cholesky_psd(&rank1).unwrap();
        assert!((&l * l.transpose() - &rank1).abs().max() < 1e-15);
        assert_eq!(normal_nodes(&rank1, 3).unwrap().len(), 3);
        assert_eq!(normal_nodes(&DMatrix::zeros(2, 2), 3).unwrap(), vec![(vec![0.0, 0.0], 1.0)]);
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(cholesky_psd(&bad).is_err());
    }

    #[test]
    fn default_orders() {
        assert_eq!(default_order(1.0 / 52.0), 3);
        assert_eq!(default_order(1.0 / 12.0), 3);
        assert_eq!(default_order(1.0), 5);
    }
}
