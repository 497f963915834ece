//! Construction of the stochastic matrix families behind every bound.
//!
//! All of them are mixtures of products of transition matrices of the MDP,
//! so each has nonnegative entries and unit row sums; construction validates
//! both. Running products over iteration indices are maintained
//! incrementally (one multiply per step) with a from-scratch cross-check at
//! a few pseudo-random indices.

use nalgebra::{DMatrix, DVector};

use crate::error::{LpiError, Result};
use crate::mdp::{Mdp, Policy, RowStochasticMatrix};
use crate::solvers::IterationTrace;

use super::beta;

/// Row-sum tolerance for derived bound matrices.
pub const BOUND_MATRIX_ROW_TOL: f64 = 1e-8;

/// `A = (1 - lg) (I - lg P^pi)^-1 P^pi`, the one-step operator of the
/// geometric averaging; reduces to `P^pi` at lambda = 0.
pub fn matrix_a(mdp: &Mdp, pi: &Policy, lambda: f64) -> Result<RowStochasticMatrix> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(LpiError::InvalidLambda(lambda));
    }
    let p = mdp.policy_transition_matrix(pi)?;
    let a = matrix_a_from(p.inner(), lambda, mdp.gamma());
    RowStochasticMatrix::with_row_tol(a, 1e-9)
}

fn matrix_a_from(p: &DMatrix<f64>, lambda: f64, gamma: f64) -> DMatrix<f64> {
    let lg = lambda * gamma;
    let resolvent = resolvent_of(p, lg);
    (1.0 - lg) * (resolvent * p)
}

/// `(I - c P)^-1` by dense LU inversion.
pub(crate) fn resolvent_of(p: &DMatrix<f64>, c: f64) -> DMatrix<f64> {
    let n = p.nrows();
    let m = DMatrix::identity(n, n) - c * p;
    m.try_inverse().expect("I - cP is invertible for c < 1")
}

/// Per-trace cache of transition matrices, resolvents and `A_k` operators.
pub(crate) struct TraceMatrices {
    pub gamma: f64,
    pub lambda: f64,
    pub beta: f64,
    pub p_star: DMatrix<f64>,
    /// `(I - gamma P_*)^-1`
    pub resolvent_star: DMatrix<f64>,
    /// `(P_*)^m` for m = 0..=len
    pub p_star_powers: Vec<DMatrix<f64>>,
    /// `P_k` per record (absent where the record has no policy).
    pub p: Vec<Option<DMatrix<f64>>>,
    /// `(I - gamma P_k)^-1`
    pub resolvent: Vec<Option<DMatrix<f64>>>,
    /// `A_k`
    pub a: Vec<Option<DMatrix<f64>>>,
}

impl TraceMatrices {
    pub fn build(trace: &IterationTrace, mdp: &Mdp, lambda: f64) -> Result<Self> {
        let gamma = mdp.gamma();
        let p_star = mdp
            .policy_transition_matrix(&trace.optimal_policy)?
            .into_inner();
        let resolvent_star = resolvent_of(&p_star, gamma);
        let len = trace.len();
        let mut p_star_powers = Vec::with_capacity(len + 1);
        let n = p_star.nrows();
        p_star_powers.push(DMatrix::identity(n, n));
        for m in 1..=len {
            let next = &p_star_powers[m - 1] * &p_star;
            p_star_powers.push(next);
        }
        let mut p = Vec::with_capacity(len);
        let mut resolvent = Vec::with_capacity(len);
        let mut a = Vec::with_capacity(len);
        for record in &trace.records {
            match &record.policy {
                None => {
                    p.push(None);
                    resolvent.push(None);
                    a.push(None);
                }
                Some(pi) => {
                    let pk = mdp.policy_transition_matrix(pi)?.into_inner();
                    resolvent.push(Some(resolvent_of(&pk, gamma)));
                    a.push(Some(matrix_a_from(&pk, lambda, gamma)));
                    p.push(Some(pk));
                }
            }
        }
        Ok(Self {
            gamma,
            lambda,
            beta: beta(lambda, gamma),
            p_star,
            resolvent_star,
            p_star_powers,
            p,
            resolvent,
            a,
        })
    }

    pub fn n(&self) -> usize {
        self.p_star.nrows()
    }

    pub fn a_at(&self, k: usize) -> Result<&DMatrix<f64>> {
        self.a
            .get(k)
            .and_then(|m| m.as_ref())
            .ok_or(LpiError::TraceIndexOutOfRange {
                index: k,
                len: self.a.len(),
            })
    }

    pub fn p_at(&self, k: usize) -> Result<&DMatrix<f64>> {
        self.p
            .get(k)
            .and_then(|m| m.as_ref())
            .ok_or(LpiError::TraceIndexOutOfRange {
                index: k,
                len: self.p.len(),
            })
    }

    pub fn resolvent_at(&self, k: usize) -> Result<&DMatrix<f64>> {
        self.resolvent
            .get(k)
            .and_then(|m| m.as_ref())
            .ok_or(LpiError::TraceIndexOutOfRange {
                index: k,
                len: self.resolvent.len(),
            })
    }
}

/// The exact-rate matrix triple at one `(k0, k)` pair.
pub struct ExactRateMatrices {
    pub e: RowStochasticMatrix,
    pub e_prime: RowStochasticMatrix,
    pub f: RowStochasticMatrix,
}

/// Incremental sweep over `k` for a fixed anchor `k0`, maintaining the
/// running product `A_k ... A_{k0+1}` and the geometric sum inside the
/// rate matrix.
pub(crate) struct ExactRateSweep<'a> {
    ctx: &'a TraceMatrices,
    k0: usize,
    k: usize,
    /// `A_k A_{k-1} ... A_{k0+1}`
    tail_product: DMatrix<f64>,
    /// `sum_{j=k0}^{k-1} gamma^{k-1-j} beta^{j-k0} (P_*)^{k-1-j} A_{j+1}..A_{k0+1}`
    geometric_sum: DMatrix<f64>,
    /// `beta^{k-k0}` tracked multiplicatively so `0^0 = 1` at the anchor.
    beta_pow: f64,
    gamma_pow: f64,
    /// Indices at which the running product is recomputed from scratch.
    audit_points: Vec<usize>,
}

impl<'a> ExactRateSweep<'a> {
    /// Positions the sweep at `k = k0 + 1`.
    pub fn new(ctx: &'a TraceMatrices, k0: usize) -> Result<Self> {
        let first = ctx.a_at(k0 + 1)?.clone();
        let mut audit_points = Vec::new();
        let len = ctx.a.len();
        // Three deterministic pseudo-random audit indices per anchor.
        let mut h = (k0 as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ len as u64;
        for _ in 0..3 {
            h ^= h >> 33;
            h = h.wrapping_mul(0xff51_afd7_ed55_8ccd);
            if len > k0 + 2 {
                audit_points.push(k0 + 2 + (h % (len - k0 - 2) as u64) as usize);
            }
        }
        Ok(Self {
            ctx,
            k0,
            k: k0 + 1,
            tail_product: first.clone(),
            geometric_sum: first,
            beta_pow: ctx.beta,
            gamma_pow: ctx.gamma,
            audit_points,
        })
    }

    pub fn position(&self) -> usize {
        self.k
    }

    /// Matrices at the current `(k0, k)`; call `advance` to move to `k + 1`.
    pub fn matrices(&self) -> Result<ExactRateMatrices> {
        let ctx = self.ctx;
        let n = ctx.n();
        let lg_ratio = if ctx.lambda == 0.0 {
            0.0
        } else {
            ctx.lambda * ctx.gamma / (1.0 - ctx.lambda * ctx.gamma)
        };
        let resolvent_k = ctx.resolvent_at(self.k)?;
        let e_prime_raw = ((1.0 - ctx.gamma) / self.gamma_pow)
            * (lg_ratio * &self.geometric_sum + self.beta_pow * (resolvent_k * &self.tail_product));
        let steps = self.k - self.k0;
        let e_raw = (1.0 - ctx.gamma) * (&ctx.p_star_powers[steps] * &ctx.resolvent_star);
        let f_raw = (1.0 - ctx.gamma) * &ctx.p_star_powers[steps]
            + ctx.gamma * (&e_prime_raw * &ctx.p_star);
        Ok(ExactRateMatrices {
            e: RowStochasticMatrix::with_row_tol(e_raw, BOUND_MATRIX_ROW_TOL)?,
            e_prime: RowStochasticMatrix::with_row_tol(e_prime_raw, BOUND_MATRIX_ROW_TOL)?,
            f: RowStochasticMatrix::with_row_tol(f_raw, BOUND_MATRIX_ROW_TOL)?,
        })
    }

    /// The raw `E'` matrix without stochasticity validation, for use inside
    /// remainder terms where only the product with a vector is needed.
    pub fn e_prime_apply(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        let ctx = self.ctx;
        let lg_ratio = if ctx.lambda == 0.0 {
            0.0
        } else {
            ctx.lambda * ctx.gamma / (1.0 - ctx.lambda * ctx.gamma)
        };
        let resolvent_k = ctx.resolvent_at(self.k)?;
        Ok(((1.0 - ctx.gamma) / self.gamma_pow)
            * (lg_ratio * (&self.geometric_sum * v)
                + self.beta_pow * (resolvent_k * (&self.tail_product * v))))
    }

    /// Moves the sweep from `k` to `k + 1`.
    pub fn advance(&mut self) -> Result<()> {
        let next = self.k + 1;
        let a_next = self.ctx.a_at(next)?;
        self.geometric_sum =
            self.ctx.gamma * (&self.ctx.p_star * &self.geometric_sum) + self.beta_pow * (a_next * &self.tail_product);
        self.tail_product = a_next * &self.tail_product;
        self.beta_pow *= self.ctx.beta;
        self.gamma_pow *= self.ctx.gamma;
        self.k = next;
        if self.audit_points.contains(&self.k) {
            self.audit_tail_product();
        }
        Ok(())
    }

    /// Recomputes the running product with the opposite association order
    /// and checks agreement.
    fn audit_tail_product(&self) {
        let mut fresh = self.ctx.a_at(self.k0 + 1).expect("anchor factor").clone();
        for j in self.k0 + 2..=self.k {
            fresh = self.ctx.a_at(j).expect("audited factor") * fresh;
        }
        let dev = (&fresh - &self.tail_product).amax();
        assert!(
            dev <= 1e-10,
            "incremental product drifted from recomputation: {dev}"
        );
    }
}

/// `E`, `E'`, `F` at one `(k0, k)` pair of an exact run.
pub fn exact_rate_matrices(
    trace: &IterationTrace,
    mdp: &Mdp,
    k0: usize,
    k: usize,
    lambda: f64,
) -> Result<(RowStochasticMatrix, RowStochasticMatrix, RowStochasticMatrix)> {
    if k <= k0 {
        return Err(LpiError::InvalidParameter(format!(
            "need k > k0, got k0 = {k0}, k = {k}"
        )));
    }
    trace.record(k)?;
    let ctx = TraceMatrices::build(trace, mdp, lambda)?;
    let mut sweep = ExactRateSweep::new(&ctx, k0)?;
    while sweep.position() < k {
        sweep.advance()?;
    }
    let m = sweep.matrices()?;
    Ok((m.e, m.e_prime, m.f))
}

/// The six matrix families of the approximate componentwise analysis at one
/// `(j, k)` pair.
pub struct ApproxMatrices {
    pub b: RowStochasticMatrix,
    pub b_prime: RowStochasticMatrix,
    pub c: RowStochasticMatrix,
    pub c_prime: RowStochasticMatrix,
    pub d: RowStochasticMatrix,
    pub d_prime: RowStochasticMatrix,
}

/// Descending-in-`j` builder of `B_{jk}` for one fixed `k`: starting at
/// `j = k - 1`, each step right-multiplies by `A_{j+1}` and adds the new
/// geometric term.
pub(crate) struct BSweep<'a> {
    ctx: &'a TraceMatrices,
    k: usize,
    j: usize,
    /// The bracketed part of `B_{jk}` before the `(1-gamma)/gamma^{k-j}` scale.
    inner: DMatrix<f64>,
    gamma_pow: f64,
}

impl<'a> BSweep<'a> {
    pub fn new(ctx: &'a TraceMatrices, k: usize) -> Result<Self> {
        let a_k = ctx.a_at(k)?;
        let lg_ratio = if ctx.lambda == 0.0 {
            0.0
        } else {
            ctx.lambda * ctx.gamma / (1.0 - ctx.lambda * ctx.gamma)
        };
        let resolvent_k = ctx.resolvent_at(k)?;
        let inner = lg_ratio * a_k + ctx.beta * (resolvent_k * a_k);
        Ok(Self {
            ctx,
            k,
            j: k - 1,
            inner,
            gamma_pow: ctx.gamma,
        })
    }

    pub fn position(&self) -> usize {
        self.j
    }

    /// `B_{jk}` at the current `j`.
    pub fn b(&self) -> Result<RowStochasticMatrix> {
        let raw = ((1.0 - self.ctx.gamma) / self.gamma_pow) * &self.inner;
        RowStochasticMatrix::with_row_tol(raw, BOUND_MATRIX_ROW_TOL)
    }

    /// `B'_{jk} = gamma B_{jk} P_j + (1-gamma) (P_*)^{k-j}`.
    pub fn b_prime(&self, b: &RowStochasticMatrix) -> Result<RowStochasticMatrix> {
        let p_j = self.ctx.p_at(self.j)?;
        let raw = self.ctx.gamma * (b.inner() * p_j)
            + (1.0 - self.ctx.gamma) * &self.ctx.p_star_powers[self.k - self.j];
        RowStochasticMatrix::with_row_tol(raw, BOUND_MATRIX_ROW_TOL)
    }

    /// Moves from `j` to `j - 1`.
    pub fn descend(&mut self) -> Result<()> {
        let j_new = self.j - 1;
        let a = self.ctx.a_at(j_new + 1)?;
        let lg_ratio = if self.ctx.lambda == 0.0 {
            0.0
        } else {
            self.ctx.lambda * self.ctx.gamma / (1.0 - self.ctx.lambda * self.ctx.gamma)
        };
        let steps = self.k - 1 - j_new;
        self.inner = self.ctx.beta * (&self.inner * a)
            + (lg_ratio * self.gamma_pow) * (&self.ctx.p_star_powers[steps] * a);
        self.gamma_pow *= self.ctx.gamma;
        self.j = j_new;
        Ok(())
    }
}

/// All six approximate-bound families at `(j, k)`.
pub fn approx_bound_matrices(
    trace: &IterationTrace,
    mdp: &Mdp,
    j: usize,
    k: usize,
    lambda: f64,
) -> Result<ApproxMatrices> {
    if k <= j {
        return Err(LpiError::InvalidParameter(format!(
            "need k > j, got j = {j}, k = {k}"
        )));
    }
    trace.record(k + 1)?;
    let ctx = TraceMatrices::build(trace, mdp, lambda)?;
    let mut sweep = BSweep::new(&ctx, k)?;
    while sweep.position() > j {
        sweep.descend()?;
    }
    let b = sweep.b()?;
    let b_prime = sweep.b_prime(&b)?;
    let (c, c_prime) = c_pair(&ctx, k)?;
    let d = d_matrix(&ctx)?;
    let d_prime = d_prime_matrix(&ctx, k)?;
    Ok(ApproxMatrices {
        b,
        b_prime,
        c,
        c_prime,
        d,
        d_prime,
    })
}

pub(crate) fn c_pair(
    ctx: &TraceMatrices,
    k: usize,
) -> Result<(RowStochasticMatrix, RowStochasticMatrix)> {
    let scale = (1.0 - ctx.gamma) * (1.0 - ctx.gamma);
    let c_raw = scale * (&ctx.resolvent_star * (&ctx.p_star * ctx.resolvent_at(k)?));
    let c_prime_raw =
        scale * (&ctx.resolvent_star * (ctx.p_at(k + 1)? * ctx.resolvent_at(k + 1)?));
    Ok((
        RowStochasticMatrix::with_row_tol(c_raw, BOUND_MATRIX_ROW_TOL)?,
        RowStochasticMatrix::with_row_tol(c_prime_raw, BOUND_MATRIX_ROW_TOL)?,
    ))
}

pub(crate) fn d_matrix(ctx: &TraceMatrices) -> Result<RowStochasticMatrix> {
    let raw = (1.0 - ctx.gamma) * (&ctx.p_star * &ctx.resolvent_star);
    RowStochasticMatrix::with_row_tol(raw, BOUND_MATRIX_ROW_TOL)
}

pub(crate) fn d_prime_matrix(ctx: &TraceMatrices, k: usize) -> Result<RowStochasticMatrix> {
    let raw = (1.0 - ctx.gamma) * (ctx.p_at(k)? * ctx.resolvent_at(k)?);
    RowStochasticMatrix::with_row_tol(raw, BOUND_MATRIX_ROW_TOL)
}

/// The matrices of the convergence-case corollaries.
pub struct ConvergenceMatrices {
    pub b_v: RowStochasticMatrix,
    pub d: RowStochasticMatrix,
    pub a_pi: RowStochasticMatrix,
    pub a_pi_jk: RowStochasticMatrix,
    pub b_pi_jk: RowStochasticMatrix,
    pub b_prime_pi_jk: RowStochasticMatrix,
}

/// Builds the sharper-bound families for a run whose value or policy has
/// converged to `pi`.
pub fn convergence_case_matrices(
    mdp: &Mdp,
    pi: &Policy,
    lambda: f64,
    j: usize,
    k: usize,
) -> Result<ConvergenceMatrices> {
    if k <= j {
        return Err(LpiError::InvalidParameter(format!(
            "need k > j, got j = {j}, k = {k}"
        )));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(LpiError::InvalidLambda(lambda));
    }
    let gamma = mdp.gamma();
    let lg = lambda * gamma;
    let b = beta(lambda, gamma);
    let p = mdp.policy_transition_matrix(pi)?.into_inner();
    let (_, pi_star) = mdp.optimal_value();
    let p_star = mdp.policy_transition_matrix(&pi_star)?.into_inner();
    let resolvent = resolvent_of(&p, gamma);
    let resolvent_star = resolvent_of(&p_star, gamma);
    let lambda_resolvent = resolvent_of(&p, lg);

    let b_v_raw = (1.0 - gamma)
        * ((1.0 - lambda) * (&resolvent * &p) + lambda * (&resolvent_star * &p));
    let d_raw = (1.0 - gamma) * (&p_star * &resolvent_star);

    let a_pi_raw = (1.0 - lg) * (&p * &lambda_resolvent);

    // a_pi_jk = (1-g)/g^{k-j} [ lg/(1-lg) sum_{i=j}^{k-1} g^{k-1-i} beta^{i-j}
    //           (P_*)^{k-1-i} (A^pi)^{i-j} + beta^{k-j} (I-gP)^-1 (A^pi)^{k-1-j} ]
    let n = p.nrows();
    let lg_ratio = if lambda == 0.0 { 0.0 } else { lg / (1.0 - lg) };
    let span = k - j;
    let mut star_powers = Vec::with_capacity(span + 1);
    star_powers.push(DMatrix::identity(n, n));
    for m in 1..=span {
        let next = &star_powers[m - 1] * &p_star;
        star_powers.push(next);
    }
    let mut sum = DMatrix::zeros(n, n);
    let mut a_pow = DMatrix::identity(n, n); // (A^pi)^(i-j)
    let mut beta_pow = 1.0;
    for i in j..k {
        let gamma_pow = gamma.powi((k - 1 - i) as i32);
        sum += (gamma_pow * beta_pow) * (&star_powers[k - 1 - i] * &a_pow);
        if i + 1 < k {
            a_pow = &a_pow * &a_pi_raw;
        }
        beta_pow *= b;
    }
    // After the loop a_pow = (A^pi)^{k-1-j} and beta_pow = beta^{k-j}.
    let a_pi_jk_raw = ((1.0 - gamma) / gamma.powi(span as i32))
        * (lg_ratio * sum + beta_pow * (&resolvent * &a_pow));

    let b_pi_jk_raw = &a_pi_jk_raw * &p;
    let p_sq = &p * &p;
    let b_prime_pi_jk_raw = ((1.0 - gamma) / (1.0 - lg))
        * (&star_powers[span]
            + ((1.0 - lg) * gamma * (1.0 - lambda) / (1.0 - gamma))
                * (&a_pi_jk_raw * (&lambda_resolvent * &p_sq)));

    Ok(ConvergenceMatrices {
        b_v: RowStochasticMatrix::with_row_tol(b_v_raw, BOUND_MATRIX_ROW_TOL)?,
        d: RowStochasticMatrix::with_row_tol(d_raw, BOUND_MATRIX_ROW_TOL)?,
        a_pi: RowStochasticMatrix::with_row_tol(a_pi_raw, BOUND_MATRIX_ROW_TOL)?,
        a_pi_jk: RowStochasticMatrix::with_row_tol(a_pi_jk_raw, BOUND_MATRIX_ROW_TOL)?,
        b_pi_jk: RowStochasticMatrix::with_row_tol(b_pi_jk_raw, BOUND_MATRIX_ROW_TOL)?,
        b_prime_pi_jk: RowStochasticMatrix::with_row_tol(b_prime_pi_jk_raw, BOUND_MATRIX_ROW_TOL)?,
    })
}

