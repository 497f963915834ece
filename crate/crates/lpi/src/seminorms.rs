//! Weighted Lp norms, the max-norm, and span seminorms.
//!
//! The span seminorm `span_{p,mu}(u) = 2 min_a ||u - a e||_{p,mu}` vanishes
//! exactly on constant vectors, which makes it a strictly sharper error
//! gauge than any norm. The inner minimization over the shift `a` is convex;
//! closed forms exist for p = 1 (weighted median), p = 2 (weighted mean) and
//! p = infinity (midrange), and a golden-section search covers every other p.

use nalgebra::DVector;

use crate::error::{LpiError, Result};
use crate::mdp::{RowStochasticMatrix, ValueVec};

/// Absolute tolerance of the golden-section search over the shift.
const SHIFT_SEARCH_TOL: f64 = 1e-10;

/// Which functional a [`SeminormSpec`] selects.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SeminormKind {
    LpWeighted,
    Max,
    SpanInf,
    SpanPWeighted,
}

/// Selector for one of the norms/seminorms used by the bound engine:
/// `||.||_{p,mu}`, `||.||_inf`, `span_inf`, or `span_{p,mu}`.
#[derive(Clone, Debug)]
pub struct SeminormSpec {
    pub kind: SeminormKind,
    /// Order of the weighted kinds; `f64::INFINITY` is allowed.
    pub p: f64,
    /// Weight distribution, present for the weighted kinds.
    pub mu: Option<Vec<f64>>,
}

impl SeminormSpec {
    pub fn lp_weighted(p: f64, mu: Vec<f64>) -> Result<Self> {
        validate_p(p)?;
        validate_distribution(&mu)?;
        Ok(Self {
            kind: SeminormKind::LpWeighted,
            p,
            mu: Some(mu),
        })
    }

    pub fn max() -> Self {
        Self {
            kind: SeminormKind::Max,
            p: f64::INFINITY,
            mu: None,
        }
    }

    pub fn span_inf() -> Self {
        Self {
            kind: SeminormKind::SpanInf,
            p: f64::INFINITY,
            mu: None,
        }
    }

    pub fn span_p_weighted(p: f64, mu: Vec<f64>) -> Result<Self> {
        validate_p(p)?;
        validate_distribution(&mu)?;
        Ok(Self {
            kind: SeminormKind::SpanPWeighted,
            p,
            mu: Some(mu),
        })
    }

    /// Evaluates the selected functional on `u`.
    pub fn evaluate(&self, u: &ValueVec) -> f64 {
        match self.kind {
            SeminormKind::LpWeighted => {
                weighted_lp_norm(u, self.p, self.mu.as_ref().expect("weighted kind carries mu"))
            }
            SeminormKind::Max => max_norm(u),
            SeminormKind::SpanInf => span_inf(u),
            SeminormKind::SpanPWeighted => {
                span_p(u, self.p, self.mu.as_ref().expect("weighted kind carries mu"))
            }
        }
    }
}

fn validate_p(p: f64) -> Result<()> {
    if p >= 1.0 {
        Ok(())
    } else {
        Err(LpiError::InvalidParameter(format!("p = {p} must be >= 1")))
    }
}

/// Checks nonnegativity and unit mass (within 1e-12).
pub fn validate_distribution(mu: &[f64]) -> Result<()> {
    let mut sum = 0.0;
    for (i, &w) in mu.iter().enumerate() {
        if !(w >= 0.0) {
            return Err(LpiError::InvalidDistribution(format!(
                "weight {w} at index {i} is negative or NaN"
            )));
        }
        sum += w;
    }
    if (sum - 1.0).abs() > 1e-12 {
        return Err(LpiError::InvalidDistribution(format!(
            "weights sum to {sum}, not 1"
        )));
    }
    Ok(())
}

/// `||u||_{p,mu} = (sum_x mu(x) |u(x)|^p)^(1/p)`.
///
/// `p = infinity` gives the essential sup over the support of `mu`.
/// The computation factors out `max |u|` so large `p` does not overflow.
pub fn weighted_lp_norm(u: &ValueVec, p: f64, mu: &[f64]) -> f64 {
    assert_eq!(u.len(), mu.len(), "weight dimension mismatch");
    assert!(p >= 1.0, "p must be >= 1");
    if p.is_infinite() {
        return u
            .as_slice()
            .iter()
            .zip(mu)
            .filter(|(_, &w)| w > 0.0)
            .map(|(x, _)| x.abs())
            .fold(0.0, f64::max);
    }
    let scale = u
        .as_slice()
        .iter()
        .zip(mu)
        .filter(|(_, &w)| w > 0.0)
        .map(|(x, _)| x.abs())
        .fold(0.0, f64::max);
    if scale == 0.0 {
        return 0.0;
    }
    let mut acc = 0.0;
    for (x, &w) in u.as_slice().iter().zip(mu) {
        if w > 0.0 {
            acc += w * (x.abs() / scale).powf(p);
        }
    }
    scale * acc.powf(1.0 / p)
}

/// `||u||_inf = max_x |u(x)|`.
pub fn max_norm(u: &ValueVec) -> f64 {
    u.amax()
}

/// `span_inf(u) = max_x u(x) - min_x u(x)`.
pub fn span_inf(u: &ValueVec) -> f64 {
    let max = u.as_slice().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = u.as_slice().iter().cloned().fold(f64::INFINITY, f64::min);
    max - min
}

/// The shift minimizing `||u - a e||_{p,mu}`.
///
/// States with zero weight contribute nothing and are ignored.
pub fn shift_minimizer(u: &ValueVec, p: f64, mu: &[f64]) -> f64 {
    assert_eq!(u.len(), mu.len(), "weight dimension mismatch");
    let support: Vec<(f64, f64)> = u
        .as_slice()
        .iter()
        .zip(mu)
        .filter(|(_, &w)| w > 0.0)
        .map(|(&x, &w)| (x, w))
        .collect();
    if support.is_empty() {
        return 0.0;
    }
    if p.is_infinite() {
        let max = support.iter().map(|(x, _)| *x).fold(f64::NEG_INFINITY, f64::max);
        let min = support.iter().map(|(x, _)| *x).fold(f64::INFINITY, f64::min);
        return 0.5 * (min + max);
    }
    if p == 2.0 {
        return support.iter().map(|(x, w)| w * x).sum();
    }
    if p == 1.0 {
        // Weighted median: first point where the cumulative weight reaches
        // half of the total mass.
        let mut sorted = support.clone();
        sorted.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite values"));
        let total: f64 = sorted.iter().map(|(_, w)| *w).sum();
        let mut acc = 0.0;
        for (x, w) in &sorted {
            acc += w;
            if acc >= 0.5 * total {
                return *x;
            }
        }
        return sorted.last().expect("nonempty").0;
    }
    // Convex in the shift, so golden-section search on the value range.
    let mut lo = support.iter().map(|(x, _)| *x).fold(f64::INFINITY, f64::min);
    let mut hi = support
        .iter()
        .map(|(x, _)| *x)
        .fold(f64::NEG_INFINITY, f64::max);
    if hi - lo <= SHIFT_SEARCH_TOL {
        return 0.5 * (lo + hi);
    }
    let objective = |a: f64| -> f64 {
        let mut acc = 0.0;
        for (x, w) in &support {
            acc += w * (x - a).abs().powf(p);
        }
        acc
    };
    let inv_phi = (5.0_f64.sqrt() - 1.0) / 2.0;
    let mut c = hi - inv_phi * (hi - lo);
    let mut d = lo + inv_phi * (hi - lo);
    let mut fc = objective(c);
    let mut fd = objective(d);
    while hi - lo > SHIFT_SEARCH_TOL {
        if fc < fd {
            hi = d;
            d = c;
            fd = fc;
            c = hi - inv_phi * (hi - lo);
            fc = objective(c);
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + inv_phi * (hi - lo);
            fd = objective(d);
        }
    }
    0.5 * (lo + hi)
}

/// `span_{p,mu}(u) = 2 min_a ||u - a e||_{p,mu}`.
pub fn span_p(u: &ValueVec, p: f64, mu: &[f64]) -> f64 {
    let a = shift_minimizer(u, p, mu);
    let shifted = ValueVec::from(u.inner() - DVector::from_element(u.len(), a));
    2.0 * weighted_lp_norm(&shifted, p, mu)
}

/// The distribution `mu_k = mu (X + X') / 2` used to convert componentwise
/// bounds into weighted seminorm bounds.
pub fn mixed_distribution(
    mu: &[f64],
    x: &RowStochasticMatrix,
    xp: &RowStochasticMatrix,
) -> Result<Vec<f64>> {
    let n = mu.len();
    if x.nrows() != n || xp.nrows() != n {
        return Err(LpiError::DimensionMismatch {
            expected: n,
            got: x.nrows(),
        });
    }
    validate_distribution(mu)?;
    let mut out = vec![0.0; n];
    for j in 0..n {
        let mut acc = 0.0;
        for i in 0..n {
            acc += mu[i] * 0.5 * (x[(i, j)] + xp[(i, j)]);
        }
        out[j] = acc.max(0.0);
    }
    let sum: f64 = out.iter().sum();
    if (sum - 1.0).abs() > 1e-10 {
        return Err(LpiError::InvalidDistribution(format!(
            "mixed distribution sums to {sum}"
        )));
    }
    Ok(out)
}

/// The distribution `mu (P)^k` obtained by pushing `mu` through a
/// stochastic matrix power.
pub fn pushforward(mu: &[f64], m: &RowStochasticMatrix) -> Vec<f64> {
    let n = mu.len();
    let mut out = vec![0.0; n];
    for j in 0..n {
        let mut acc = 0.0;
        for i in 0..n {
            acc += mu[i] * m[(i, j)];
        }
        out[j] = acc.max(0.0);
    }
    out
}

pub fn uniform_distribution(n: usize) -> Vec<f64> {
    vec![1.0 / n as f64; n]
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    fn v(values: &[f64]) -> ValueVec {
        ValueVec::new(values.to_vec()).unwrap()
    }

    #[test]
    fn weighted_lp_examples() {
        let u = v(&[3.0, -4.0]);
        let mu = uniform_distribution(2);
        let norm = weighted_lp_norm(&u, 2.0, &mu);
        assert!((norm - 12.5_f64.sqrt()).abs() <= 1e-12);

        assert_eq!(weighted_lp_norm(&v(&[0.0, 0.0]), 3.0, &mu), 0.0);

        // Point mass recovers |u(x)| for any p.
        let point = vec![0.0, 1.0];
        for &p in &[1.0, 2.0, 7.5, f64::INFINITY] {
            assert!((weighted_lp_norm(&u, p, &point) - 4.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn lp_approaches_max_norm() {
        let u = v(&[0.3, -2.0, 1.4, 0.9, -0.4]);
        let mu = uniform_distribution(5);
        let p64 = weighted_lp_norm(&u, 64.0, &mu);
        let max = max_norm(&u);
        assert!((p64 - max).abs() <= 0.05 * max);
        assert!(p64 <= max + 1e-12);
    }

    #[test]
    fn max_norm_examples() {
        assert_eq!(max_norm(&v(&[1.0, -5.0, 3.0])), 5.0);
        assert_eq!(max_norm(&v(&[0.0, 0.0])), 0.0);
    }

    #[test]
    fn span_inf_examples() {
        assert_eq!(span_inf(&v(&[1.0, 5.0, 3.0])), 4.0);
        assert_eq!(span_inf(&v(&[2.5, 2.5, 2.5])), 0.0);

        // span_inf = 2 min_a ||u - a e||_inf with the midrange minimizer.
        let u = v(&[1.0, 5.0, 3.0]);
        let mid = 3.0;
        let best = ValueVec::from(u.inner() - DVector::from_element(3, mid));
        assert!((span_inf(&u) - 2.0 * max_norm(&best)).abs() <= 1e-12);
    }

    #[test]
    fn span_p_examples() {
        let mu = uniform_distribution(2);
        let u = v(&[0.0, 2.0]);
        assert!((span_p(&u, 2.0, &mu) - 2.0).abs() <= 1e-9);
        assert!((shift_minimizer(&u, 2.0, &mu) - 1.0).abs() <= 1e-12);

        assert_eq!(span_p(&v(&[3.0, 3.0]), 2.0, &mu), 0.0);

        let w = v(&[1.0, -2.0]);
        assert!(span_p(&w, 2.0, &mu) <= 2.0 * weighted_lp_norm(&w, 2.0, &mu) + 1e-12);
    }

    #[test]
    fn closed_forms_match_generic_search() {
        let u = v(&[0.4, -1.3, 2.7, 0.0, 1.9, -0.6]);
        let mu = vec![0.1, 0.25, 0.05, 0.3, 0.2, 0.1];
        for &p in &[1.0, 2.0] {
            let closed = shift_minimizer(&u, p, &mu);
            let grid = golden_oracle(&u, p, &mu);
            let f_closed = weighted_lp_norm(
                &ValueVec::from(u.inner() - DVector::from_element(6, closed)),
                p,
                &mu,
            );
            let f_grid = weighted_lp_norm(
                &ValueVec::from(u.inner() - DVector::from_element(6, grid)),
                p,
                &mu,
            );
            assert!((f_closed - f_grid).abs() <= 1e-8, "p={p}");
        }
        let mid = shift_minimizer(&u, f64::INFINITY, &mu);
        assert!((mid - 0.5 * (2.7 + (-1.3))).abs() <= 1e-12);
    }

    // Independent oracle: plain grid refinement of the 1-D convex objective.
    fn golden_oracle(u: &ValueVec, p: f64, mu: &[f64]) -> f64 {
        let mut lo = u.as_slice().iter().cloned().fold(f64::INFINITY, f64::min);
        let mut hi = u
            .as_slice()
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        let f = |a: f64| {
            weighted_lp_norm(
                &ValueVec::from(u.inner() - DVector::from_element(u.len(), a)),
                p,
                mu,
            )
        };
        for _ in 0..200 {
            let step = (hi - lo) / 32.0;
            let mut best = lo;
            let mut best_f = f(lo);
            let mut a = lo;
            while a <= hi {
                let fa = f(a);
                if fa < best_f {
                    best_f = fa;
                    best = a;
                }
                a += step;
            }
            lo = (best - step).max(lo);
            hi = (best + step).min(hi);
            if hi - lo < 1e-12 {
                break;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn mixed_distribution_examples() {
        let eye = RowStochasticMatrix::new(DMatrix::identity(2, 2)).unwrap();
        let mu = vec![0.3, 0.7];
        let out = mixed_distribution(&mu, &eye, &eye).unwrap();
        assert!((out[0] - 0.3).abs() <= 1e-15 && (out[1] - 0.7).abs() <= 1e-15);

        let x = RowStochasticMatrix::new(DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 1.0]))
            .unwrap();
        let out = mixed_distribution(&[1.0, 0.0], &x, &eye).unwrap();
        assert!((out[0] - 0.5).abs() <= 1e-15 && (out[1] - 0.5).abs() <= 1e-15);

        let xp = RowStochasticMatrix::new(DMatrix::from_row_slice(2, 2, &[0.25, 0.75, 0.5, 0.5]))
            .unwrap();
        let out = mixed_distribution(&uniform_distribution(2), &x, &xp).unwrap();
        let sum: f64 = out.iter().sum();
        assert!((sum - 1.0).abs() <= 1e-10);
    }

    #[test]
    fn zero_weight_states_are_ignored() {
        let u = v(&[1000.0, 2.0, 5.0]);
        let mu = vec![0.0, 0.5, 0.5];
        assert!((weighted_lp_norm(&u, 2.0, &mu) - (0.5 * 4.0 + 0.5 * 25.0_f64).sqrt()).abs() <= 1e-12);
        let mid = shift_minimizer(&u, f64::INFINITY, &mu);
        assert!((mid - 3.5).abs() <= 1e-12);
    }

    #[test]
    fn rejects_bad_distributions() {
        assert!(validate_distribution(&[0.5, 0.6]).is_err());
        assert!(validate_distribution(&[-0.1, 1.1]).is_err());
        assert!(SeminormSpec::lp_weighted(0.5, uniform_distribution(2)).is_err());
    }
}
