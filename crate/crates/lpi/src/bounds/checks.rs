//! Numerical certification of the componentwise and span-seminorm bounds
//! against finished traces.
//!
//! Componentwise statements that hold at every iteration are checked at
//! every iteration. Asymptotic statements are checked through the
//! tail-window surrogate: both sides are maximized over the same trailing
//! window, and where the finite-horizon derivation leaves an explicitly
//! computable `gamma^(k-k0)` remainder (the error-sum bound and the
//! converged-policy bound), that remainder is added to the right-hand side
//! so the inequality is exact at finite k as well.

use nalgebra::DVector;

use crate::error::{LpiError, Result};
use crate::mdp::Mdp;
use crate::seminorms::{
    mixed_distribution, pushforward, span_inf, span_p, weighted_lp_norm,
};
use crate::solvers::{Algorithm, IterationTrace};

use super::matrices::{BSweep, ExactRateSweep, TraceMatrices};
use super::{concentration, BoundId, BoundReport, BoundValue};

/// Successive-span threshold for declaring value convergence.
pub const VALUE_CONV_TOL: f64 = 1e-8;
/// Number of consecutive small steps required for value convergence.
pub const VALUE_CONV_RUN: usize = 5;

/// Window and weighting parameters shared by the check suites.
#[derive(Clone, Debug)]
pub struct CheckParams {
    /// Anchor iteration for windowed statements.
    pub k0: usize,
    /// Tail-window length of the limsup surrogate.
    pub window: usize,
    /// Orders p at which the weighted seminorm bounds are evaluated.
    pub p_grid: Vec<f64>,
    /// Weight distribution of the seminorm bounds.
    pub mu: Vec<f64>,
    /// Reference distribution of the concentration coefficient.
    pub nu: Vec<f64>,
    /// Largest iteration index used by the all-pairs exact-rate sweep.
    pub pair_cap: usize,
    /// Epsilon of the stopping-test guarantee.
    pub epsilon: f64,
}

fn cmax(acc: &mut Option<DVector<f64>>, v: DVector<f64>) {
    match acc {
        None => *acc = Some(v),
        Some(m) => {
            for i in 0..m.len() {
                if v[i] > m[i] {
                    m[i] = v[i];
                }
            }
        }
    }
}

fn loss_of(trace: &IterationTrace, k: usize) -> Result<&DVector<f64>> {
    trace
        .record(k)?
        .loss
        .as_ref()
        .map(|l| l.inner())
        .ok_or(LpiError::TraceIndexOutOfRange {
            index: k,
            len: trace.len(),
        })
}

/// The three componentwise rate inequalities of the exact analysis at one
/// `(k0, k)` pair.
pub fn check_exact_rate_bounds(
    trace: &IterationTrace,
    mdp: &Mdp,
    k0: usize,
    k: usize,
) -> Result<Vec<BoundReport>> {
    if !trace.is_exact() {
        return Err(LpiError::TraceNotExact);
    }
    if k <= k0 {
        return Err(LpiError::InvalidParameter(format!(
            "need k > k0, got k0 = {k0}, k = {k}"
        )));
    }
    trace.record(k)?;
    let ctx = TraceMatrices::build(trace, mdp, trace.lambda)?;
    let mut sweep = ExactRateSweep::new(&ctx, k0)?;
    while sweep.position() < k {
        sweep.advance()?;
    }
    exact_rate_reports(trace, &ctx, &sweep, k0, k)
}

fn exact_rate_reports(
    trace: &IterationTrace,
    ctx: &TraceMatrices,
    sweep: &ExactRateSweep,
    k0: usize,
    k: usize,
) -> Result<Vec<BoundReport>> {
    let m = sweep.matrices()?;
    let gamma = ctx.gamma;
    let steps = k - k0;
    let gamma_pow = gamma.powi(steps as i32);
    let factor = gamma_pow / (1.0 - gamma);
    let v_star = trace.optimal_value.inner();
    let diff = v_star - trace.record(k0)?.value.inner();
    let b_k0 = trace.record(k0)?.bellman_residual.inner();
    let loss_k = loss_of(trace, k)?;

    let rhs1 = factor * ((m.f.inner() - m.e_prime.inner()) * &diff);
    let rhs2 = factor * ((m.e.inner() - m.e_prime.inner()) * b_k0);
    let min_diff = diff.min();
    let centered = diff.add_scalar(-min_diff);
    let loss_next = loss_of(trace, k0 + 1)?.amax();
    let rhs3 = gamma_pow * (&ctx.p_star_powers[steps] * centered)
        + DVector::from_element(diff.len(), loss_next);

    Ok(vec![
        BoundReport::componentwise(BoundId::ThExact1, loss_k.clone(), rhs1),
        BoundReport::componentwise(BoundId::ThExact2, loss_k.clone(), rhs2),
        BoundReport::componentwise(BoundId::ThExact3, loss_k.clone(), rhs3),
    ])
}

/// The six span-seminorm rate inequalities of the exact analysis at one
/// `(k0, k)` pair and one order p.
pub fn check_croclpi_bounds(
    trace: &IterationTrace,
    mdp: &Mdp,
    p: f64,
    mu: &[f64],
    k0: usize,
    k: usize,
) -> Result<Vec<BoundReport>> {
    if !trace.is_exact() {
        return Err(LpiError::TraceNotExact);
    }
    if k <= k0 {
        return Err(LpiError::InvalidParameter(format!(
            "need k > k0, got k0 = {k0}, k = {k}"
        )));
    }
    trace.record(k)?;
    let ctx = TraceMatrices::build(trace, mdp, trace.lambda)?;
    let mut sweep = ExactRateSweep::new(&ctx, k0)?;
    while sweep.position() < k {
        sweep.advance()?;
    }
    croclpi_reports(trace, &ctx, &sweep, k0, k, p, mu)
}

fn croclpi_reports(
    trace: &IterationTrace,
    ctx: &TraceMatrices,
    sweep: &ExactRateSweep,
    k0: usize,
    k: usize,
    p: f64,
    mu: &[f64],
) -> Result<Vec<BoundReport>> {
    let m = sweep.matrices()?;
    let gamma = ctx.gamma;
    let steps = k - k0;
    let gamma_pow = gamma.powi(steps as i32);
    let factor = gamma_pow / (1.0 - gamma);
    let v_star = &trace.optimal_value;
    let diff = crate::mdp::ValueVec::from(v_star.inner() - trace.record(k0)?.value.inner());
    let b_k0 = &trace.record(k0)?.bellman_residual;
    let loss_k = crate::mdp::ValueVec::from(loss_of(trace, k)?.clone());
    let loss_next = loss_of(trace, k0 + 1)?.amax();

    let lhs_pmu = weighted_lp_norm(&loss_k, p, mu);
    let lhs_inf = loss_k.amax();

    let mu_fe = mixed_distribution(mu, &m.f, &m.e_prime)?;
    let mu_ee = mixed_distribution(mu, &m.e, &m.e_prime)?;
    let star_pow = crate::mdp::RowStochasticMatrix::with_row_tol(
        ctx.p_star_powers[steps].clone(),
        super::matrices::BOUND_MATRIX_ROW_TOL,
    )?;
    let mu_star = pushforward(mu, &star_pow);

    let min_diff = diff.min();
    let centered = crate::mdp::ValueVec::from(diff.inner().add_scalar(-min_diff));

    Ok(vec![
        BoundReport::scalar(
            BoundId::Croclpi1,
            lhs_pmu,
            factor * span_p(&diff, p, &mu_fe),
        ),
        BoundReport::scalar(BoundId::Croclpi2, lhs_inf, factor * span_inf(&diff)),
        BoundReport::scalar(
            BoundId::Croclpi3,
            lhs_pmu,
            factor * span_p(b_k0, p, &mu_ee),
        ),
        BoundReport::scalar(BoundId::Croclpi4, lhs_inf, factor * span_inf(b_k0)),
        BoundReport::scalar(
            BoundId::Croclpi5,
            lhs_pmu,
            gamma_pow * (weighted_lp_norm(&centered, p, &mu_star) + loss_next),
        ),
        BoundReport::scalar(
            BoundId::Croclpi6,
            lhs_inf,
            gamma_pow * (span_inf(&diff) + loss_next),
        ),
    ])
}

/// Runs the exact-rate suite (componentwise and seminorm) over every pair
/// `k0 < k <= min(len - 1, pair_cap)` and aggregates per bound id.
pub fn exact_suite(
    trace: &IterationTrace,
    mdp: &Mdp,
    params: &CheckParams,
) -> Result<Vec<BoundReport>> {
    if !trace.is_exact() {
        return Err(LpiError::TraceNotExact);
    }
    let limit = (trace.len() - 1).min(params.pair_cap);
    let ctx = TraceMatrices::build(trace, mdp, trace.lambda)?;
    let mut agg = Aggregator::new();
    for k0 in 0..limit {
        let mut sweep = ExactRateSweep::new(&ctx, k0)?;
        loop {
            let k = sweep.position();
            for report in exact_rate_reports(trace, &ctx, &sweep, k0, k)? {
                agg.add(report);
            }
            for &p in &params.p_grid {
                for report in croclpi_reports(trace, &ctx, &sweep, k0, k, p, &params.mu)? {
                    agg.add(report);
                }
            }
            if k >= limit {
                break;
            }
            sweep.advance()?;
        }
    }
    Ok(agg.into_reports())
}

/// Keeps, per bound id, the instance with the smallest slack.
struct Aggregator {
    worst: Vec<Option<BoundReport>>,
}

impl Aggregator {
    fn new() -> Self {
        Self {
            worst: (0..BoundId::ALL.len()).map(|_| None).collect(),
        }
    }

    fn add(&mut self, report: BoundReport) {
        let slot = &mut self.worst[report.bound_id as usize];
        match slot {
            None => *slot = Some(report),
            Some(existing) => {
                if report.slack < existing.slack {
                    *existing = report;
                }
            }
        }
    }

    fn into_reports(self) -> Vec<BoundReport> {
        self.worst.into_iter().flatten().collect()
    }
}

/// The finite error-sum right-hand side at iteration `k`, anchored at `k0`:
/// the discounted `[B - B'] eps` sum plus the two remainder terms carrying
/// the anchor residual and the anchor distance.
fn error_sum_rhs(
    trace: &IterationTrace,
    ctx: &TraceMatrices,
    rate_sweep: &ExactRateSweep,
    k0: usize,
    k: usize,
) -> Result<DVector<f64>> {
    let gamma = ctx.gamma;
    let n = trace.n_states();
    let mut sum = DVector::zeros(n);
    if k >= k0 + 2 {
        let mut b_sweep = BSweep::new(ctx, k)?;
        loop {
            let j = b_sweep.position();
            if j <= k0 {
                break;
            }
            let eps = trace.record(j)?.error.inner();
            if eps.amax() > 0.0 {
                let b = b_sweep.b()?;
                let b_prime = b_sweep.b_prime(&b)?;
                let gamma_pow = gamma.powi((k - j) as i32);
                sum += gamma_pow * ((b.inner() - b_prime.inner()) * eps);
            }
            if j == k0 + 1 {
                break;
            }
            b_sweep.descend()?;
        }
    }
    let steps = k - k0;
    let gamma_pow = gamma.powi(steps as i32);
    let b_k0 = trace.record(k0)?.bellman_residual.inner();
    let remainder_residual = (gamma_pow / (1.0 - gamma)) * rate_sweep.e_prime_apply(&(-b_k0))?;
    let diff = trace.optimal_value.inner() - trace.record(k0)?.value.inner();
    let remainder_distance = gamma_pow * (&ctx.p_star_powers[steps] * diff);
    Ok(sum / (1.0 - gamma) + remainder_residual + remainder_distance)
}

/// The componentwise performance checks of the approximate analysis:
/// windowed error-sum and policy-residual bounds, the per-iteration
/// Bellman-residual bound, and the two per-iteration one-step lemmas.
pub fn check_approx_bounds(
    trace: &IterationTrace,
    mdp: &Mdp,
    k0: usize,
    window: usize,
) -> Result<Vec<BoundReport>> {
    if window == 0 {
        return Err(LpiError::InvalidParameter("window must be >= 1".into()));
    }
    if trace.len() < k0 + window {
        return Err(LpiError::TraceTooShort {
            len: trace.len(),
            window: k0 + window,
        });
    }
    let ctx = TraceMatrices::build(trace, mdp, trace.lambda)?;
    let k_hi = trace.len() - 1;
    let mut reports = Vec::new();

    // Error-sum bound; requires the lambda-PI update structure.
    if trace.algorithm != Algorithm::ModifiedPolicyIteration {
        let w1_lo = (k_hi + 1 - window).max(k0 + 1);
        if w1_lo <= k_hi {
            let mut lhs: Option<DVector<f64>> = None;
            let mut rhs: Option<DVector<f64>> = None;
            let mut rate_sweep = ExactRateSweep::new(&ctx, k0)?;
            while rate_sweep.position() < w1_lo {
                rate_sweep.advance()?;
            }
            let mut k = w1_lo;
            loop {
                cmax(&mut lhs, loss_of(trace, k)?.clone());
                cmax(&mut rhs, error_sum_rhs(trace, &ctx, &rate_sweep, k0, k)?);
                if k == k_hi {
                    break;
                }
                rate_sweep.advance()?;
                k += 1;
            }
            reports.push(BoundReport::componentwise(
                BoundId::Th1,
                lhs.expect("window nonempty"),
                rhs.expect("window nonempty"),
            ));
        }
    }

    // Policy-residual bound, windowed on both sides.
    let w2_lo = k_hi.saturating_sub(window).max(k0).max(1);
    if w2_lo <= k_hi - 1 {
        let factor = ctx.gamma / ((1.0 - ctx.gamma) * (1.0 - ctx.gamma));
        let mut lhs: Option<DVector<f64>> = None;
        let mut rhs: Option<DVector<f64>> = None;
        for k in w2_lo..=k_hi - 1 {
            let (c, c_prime) = super::matrices::c_pair(&ctx, k)?;
            let b_pi = trace
                .record(k)?
                .policy_bellman_residual
                .as_ref()
                .expect("policy exists for k >= 1")
                .inner();
            cmax(&mut lhs, loss_of(trace, k)?.clone());
            cmax(&mut rhs, factor * ((c.inner() - c_prime.inner()) * b_pi));
        }
        reports.push(BoundReport::componentwise(
            BoundId::Th2,
            lhs.expect("window nonempty"),
            rhs.expect("window nonempty"),
        ));
    }

    // Per-iteration Bellman-residual bound over the tail window.
    let w3_lo = (k_hi + 1 - window).max(k0).max(1);
    let d = super::matrices::d_matrix(&ctx)?;
    let mut worst: Option<BoundReport> = None;
    for k in w3_lo..=k_hi {
        let d_prime = super::matrices::d_prime_matrix(&ctx, k)?;
        let b_prev = trace.record(k - 1)?.bellman_residual.inner();
        let rhs = (ctx.gamma / (1.0 - ctx.gamma)) * ((d.inner() - d_prime.inner()) * b_prev);
        let report = BoundReport::componentwise(BoundId::Th3, loss_of(trace, k)?.clone(), rhs);
        if worst.as_ref().map_or(true, |w| report.slack < w.slack) {
            worst = Some(report);
        }
    }
    if let Some(report) = worst {
        reports.push(report);
    }

    // One-step policy-residual lemma, checked at every iteration.
    let mut worst: Option<BoundReport> = None;
    for k in 1..k_hi {
        let b_pi = trace
            .record(k)?
            .policy_bellman_residual
            .as_ref()
            .expect("policy exists")
            .inner();
        let res_k = ctx.resolvent_at(k)?;
        let res_next = ctx.resolvent_at(k + 1)?;
        let p_next = ctx.p_at(k + 1)?;
        let rhs = ctx.gamma * (&ctx.p_star * loss_of(trace, k)?)
            + ctx.gamma * (&ctx.p_star * (res_k * b_pi))
            - ctx.gamma * (p_next * (res_next * b_pi));
        let report =
            BoundReport::componentwise(BoundId::AppendixAPolicy, loss_of(trace, k + 1)?.clone(), rhs);
        if worst.as_ref().map_or(true, |w| report.slack < w.slack) {
            worst = Some(report);
        }
    }
    if let Some(report) = worst {
        reports.push(report);
    }

    // One-step greedy lemma, checked at every iteration.
    let mut worst: Option<BoundReport> = None;
    for k in 1..=k_hi {
        let b_prev = trace.record(k - 1)?.bellman_residual.inner();
        let res_k = ctx.resolvent_at(k)?;
        let p_k = ctx.p_at(k)?;
        let rhs = ctx.gamma * (&ctx.p_star * (&ctx.resolvent_star * b_prev))
            - ctx.gamma * (p_k * (res_k * b_prev));
        let report =
            BoundReport::componentwise(BoundId::AppendixAGreedy, loss_of(trace, k)?.clone(), rhs);
        if worst.as_ref().map_or(true, |w| report.slack < w.slack) {
            worst = Some(report);
        }
    }
    if let Some(report) = worst {
        reports.push(report);
    }

    Ok(reports)
}

/// The six span-seminorm performance bounds of the approximate analysis at
/// one order p.
pub fn check_spapi_bounds(
    trace: &IterationTrace,
    mdp: &Mdp,
    p: f64,
    mu: &[f64],
    k0: usize,
    window: usize,
) -> Result<Vec<BoundReport>> {
    if window == 0 {
        return Err(LpiError::InvalidParameter("window must be >= 1".into()));
    }
    if trace.len() < k0 + window {
        return Err(LpiError::TraceTooShort {
            len: trace.len(),
            window: k0 + window,
        });
    }
    let ctx = TraceMatrices::build(trace, mdp, trace.lambda)?;
    let gamma = ctx.gamma;
    let k_hi = trace.len() - 1;
    let j_lo = k0.max(1);
    let factor2 = gamma / ((1.0 - gamma) * (1.0 - gamma));
    let factor1 = gamma / (1.0 - gamma);
    let mut reports = Vec::new();

    // Line 1: windowed error bound with the pairwise mixed distributions.
    if trace.algorithm != Algorithm::ModifiedPolicyIteration {
        let w_lo = (k_hi + 1 - window).max(j_lo + 1);
        if w_lo <= k_hi {
            let mut lhs = f64::NEG_INFINITY;
            let mut rhs_span = 0.0_f64;
            for k in w_lo..=k_hi {
                let loss = crate::mdp::ValueVec::from(loss_of(trace, k)?.clone());
                lhs = lhs.max(weighted_lp_norm(&loss, p, mu));
                let mut sweep = BSweep::new(&ctx, k)?;
                loop {
                    let j = sweep.position();
                    if j < j_lo {
                        break;
                    }
                    let b = sweep.b()?;
                    let b_prime = sweep.b_prime(&b)?;
                    let mu_jk = mixed_distribution(mu, &b, &b_prime)?;
                    let eps = &trace.record(j)?.error;
                    rhs_span = rhs_span.max(span_p(eps, p, &mu_jk));
                    if j == j_lo {
                        break;
                    }
                    sweep.descend()?;
                }
            }
            reports.push(BoundReport::scalar(BoundId::Spapi1, lhs, factor2 * rhs_span));
        }
    }

    // Line 2: max-norm error bound.
    {
        let w_lo = (k_hi + 1 - window).max(1);
        let mut lhs = f64::NEG_INFINITY;
        for k in w_lo..=k_hi {
            lhs = lhs.max(loss_of(trace, k)?.amax());
        }
        let mut rhs_span = 0.0_f64;
        for j in j_lo..=k_hi {
            rhs_span = rhs_span.max(span_inf(&trace.record(j)?.error));
        }
        reports.push(BoundReport::scalar(BoundId::Spapi2, lhs, factor2 * rhs_span));
    }

    // Lines 3 and 4: windowed policy-residual bounds.
    let w2_lo = k_hi.saturating_sub(window).max(1);
    if w2_lo <= k_hi - 1 {
        let mut lhs_pmu = f64::NEG_INFINITY;
        let mut lhs_inf = f64::NEG_INFINITY;
        let mut rhs_pmu = 0.0_f64;
        let mut rhs_inf = 0.0_f64;
        for k in w2_lo..=k_hi - 1 {
            let loss = crate::mdp::ValueVec::from(loss_of(trace, k)?.clone());
            lhs_pmu = lhs_pmu.max(weighted_lp_norm(&loss, p, mu));
            lhs_inf = lhs_inf.max(loss.amax());
            let (c, c_prime) = super::matrices::c_pair(&ctx, k)?;
            let mu_k = mixed_distribution(mu, &c, &c_prime)?;
            let b_pi = trace
                .record(k)?
                .policy_bellman_residual
                .as_ref()
                .expect("policy exists")
                .clone();
            rhs_pmu = rhs_pmu.max(span_p(&b_pi, p, &mu_k));
            rhs_inf = rhs_inf.max(span_inf(&b_pi));
        }
        reports.push(BoundReport::scalar(BoundId::Spapi3, lhs_pmu, factor2 * rhs_pmu));
        reports.push(BoundReport::scalar(BoundId::Spapi4, lhs_inf, factor2 * rhs_inf));
    }

    // Lines 5 and 6: per-iteration Bellman-residual bounds.
    let d = super::matrices::d_matrix(&ctx)?;
    let w3_lo = (k_hi + 1 - window).max(1);
    let mut worst5: Option<BoundReport> = None;
    let mut worst6: Option<BoundReport> = None;
    for k in w3_lo..=k_hi {
        let loss = crate::mdp::ValueVec::from(loss_of(trace, k)?.clone());
        let b_prev = &trace.record(k - 1)?.bellman_residual;
        let d_prime = super::matrices::d_prime_matrix(&ctx, k)?;
        let mu_k = mixed_distribution(mu, &d, &d_prime)?;
        let r5 = BoundReport::scalar(
            BoundId::Spapi5,
            weighted_lp_norm(&loss, p, mu),
            factor1 * span_p(b_prev, p, &mu_k),
        );
        if worst5.as_ref().map_or(true, |w| r5.slack < w.slack) {
            worst5 = Some(r5);
        }
        let r6 = BoundReport::scalar(BoundId::Spapi6, loss.amax(), factor1 * span_inf(b_prev));
        if worst6.as_ref().map_or(true, |w| r6.slack < w.slack) {
            worst6 = Some(r6);
        }
    }
    reports.extend(worst5);
    reports.extend(worst6);

    Ok(reports)
}

/// The three concentration-coefficient bounds at one order p.
pub fn check_calpi_bounds(
    trace: &IterationTrace,
    mdp: &Mdp,
    p: f64,
    nu: &[f64],
    k0: usize,
    window: usize,
) -> Result<Vec<BoundReport>> {
    if window == 0 {
        return Err(LpiError::InvalidParameter("window must be >= 1".into()));
    }
    if trace.len() < k0 + window {
        return Err(LpiError::TraceTooShort {
            len: trace.len(),
            window: k0 + window,
        });
    }
    let coefficient = concentration(mdp, nu)?;
    let gamma = mdp.gamma();
    let k_hi = trace.len() - 1;
    let j_lo = k0.max(1);
    if coefficient.value.is_infinite() {
        return Ok([BoundId::Calpi1, BoundId::Calpi2, BoundId::Calpi3]
            .into_iter()
            .map(BoundReport::vacuous)
            .collect());
    }
    let c_factor = coefficient.value.powf(1.0 / p);
    let factor2 = gamma / ((1.0 - gamma) * (1.0 - gamma)) * c_factor;
    let factor1 = gamma / (1.0 - gamma) * c_factor;
    let mut reports = Vec::new();

    // Line 1: error spans against the tail loss.
    {
        let w_lo = (k_hi + 1 - window).max(1);
        let mut lhs = f64::NEG_INFINITY;
        for k in w_lo..=k_hi {
            lhs = lhs.max(loss_of(trace, k)?.amax());
        }
        let mut rhs_span = 0.0_f64;
        for j in j_lo..=k_hi {
            rhs_span = rhs_span.max(span_p(&trace.record(j)?.error, p, nu));
        }
        reports.push(BoundReport::scalar(BoundId::Calpi1, lhs, factor2 * rhs_span));
    }

    // Line 2: policy-residual spans.
    let w2_lo = k_hi.saturating_sub(window).max(1);
    if w2_lo <= k_hi - 1 {
        let mut lhs = f64::NEG_INFINITY;
        let mut rhs_span = 0.0_f64;
        for k in w2_lo..=k_hi - 1 {
            lhs = lhs.max(loss_of(trace, k)?.amax());
            let b_pi = trace
                .record(k)?
                .policy_bellman_residual
                .as_ref()
                .expect("policy exists");
            rhs_span = rhs_span.max(span_p(b_pi, p, nu));
        }
        reports.push(BoundReport::scalar(BoundId::Calpi2, lhs, factor2 * rhs_span));
    }

    // Line 3: per-iteration Bellman-residual bound.
    let w3_lo = (k_hi + 1 - window).max(1);
    let mut worst: Option<BoundReport> = None;
    for k in w3_lo..=k_hi {
        let report = BoundReport::scalar(
            BoundId::Calpi3,
            loss_of(trace, k)?.amax(),
            factor1 * span_p(&trace.record(k - 1)?.bellman_residual, p, nu),
        );
        if worst.as_ref().map_or(true, |w| report.slack < w.slack) {
            worst = Some(report);
        }
    }
    reports.extend(worst);

    Ok(reports)
}

/// Result of looking for value/policy convergence on a trace.
pub struct ConvergenceCaseOutcome {
    pub reports: Vec<BoundReport>,
    pub value_converged: bool,
    pub policy_converged: bool,
}

/// Detects value or policy convergence on the trace and, when found,
/// certifies the sharper factor-(1/(1-gamma)) bounds.
pub fn check_convergence_case_bounds(
    trace: &IterationTrace,
    mdp: &Mdp,
    window: usize,
) -> Result<ConvergenceCaseOutcome> {
    let mut outcome = ConvergenceCaseOutcome {
        reports: Vec::new(),
        value_converged: false,
        policy_converged: false,
    };
    let len = trace.len();
    let k_hi = len - 1;
    let gamma = mdp.gamma();

    // Value convergence: a run of small successive spans at the tail.
    if len > VALUE_CONV_RUN {
        let converged = (0..VALUE_CONV_RUN).all(|i| {
            let a = trace.records[len - 1 - i].value.inner();
            let b = trace.records[len - 2 - i].value.inner();
            span_inf(&crate::mdp::ValueVec::from(a - b)) < VALUE_CONV_TOL
        });
        if converged {
            outcome.value_converged = true;
            let v = &trace.records[k_hi].value;
            let pi = mdp.greedy(v);
            let v_pi = mdp.evaluate_policy(&pi)?;
            let lhs = trace.optimal_value.inner() - v_pi.inner();
            let eps = trace.records[k_hi].error.inner();
            let m = super::matrices::convergence_case_matrices(mdp, &pi, trace.lambda, 0, 1)?;
            let rhs = (gamma / (1.0 - gamma)) * ((m.b_v.inner() - m.d.inner()) * eps);
            outcome
                .reports
                .push(BoundReport::componentwise(BoundId::VConverges, lhs, rhs));
        }
    }

    // Policy convergence: identical policies across the tail window.
    if len >= window + 1 && window >= 1 {
        let tail_policy = trace.records[k_hi].policy.clone();
        if let Some(pi) = tail_policy {
            let tail_start = len - window;
            let converged = (tail_start..len)
                .all(|k| trace.records[k].policy.as_ref() == Some(&pi));
            if converged {
                // Earliest index from which the policy stays constant.
                let mut kc = tail_start;
                while kc > 1 && trace.records[kc - 1].policy.as_ref() == Some(&pi) {
                    kc -= 1;
                }
                if kc < k_hi {
                    outcome.policy_converged = true;
                    let v_pi = mdp.evaluate_policy(&pi)?;
                    let lhs = trace.optimal_value.inner() - v_pi.inner();
                    // The converged-policy sum coincides with the error-sum
                    // bound anchored at the convergence onset.
                    let ctx = TraceMatrices::build(trace, mdp, trace.lambda)?;
                    let w_lo = (k_hi + 1 - window.min(k_hi - kc)).max(kc + 1);
                    let mut rate_sweep = ExactRateSweep::new(&ctx, kc)?;
                    while rate_sweep.position() < w_lo {
                        rate_sweep.advance()?;
                    }
                    let mut rhs: Option<DVector<f64>> = None;
                    let mut k = w_lo;
                    loop {
                        cmax(&mut rhs, error_sum_rhs(trace, &ctx, &rate_sweep, kc, k)?);
                        if k == k_hi {
                            break;
                        }
                        rate_sweep.advance()?;
                        k += 1;
                    }
                    outcome.reports.push(BoundReport::componentwise(
                        BoundId::PiConverges,
                        lhs,
                        rhs.expect("window nonempty"),
                    ));
                }
            }
        }
    }

    Ok(outcome)
}

/// Verifies that every iterate passing the span stopping test yields a
/// greedy policy whose loss stays below epsilon.
pub fn check_stopping_guarantee(
    trace: &IterationTrace,
    mdp: &Mdp,
    epsilon: f64,
) -> Result<BoundReport> {
    let mut worst_loss: Option<f64> = None;
    for k in 0..trace.len() {
        let record = trace.record(k)?;
        if !record.stop_test {
            continue;
        }
        // The epsilon-optimality claim is about the greedy policy of v_k.
        let loss = if k + 1 < trace.len() {
            loss_of(trace, k + 1)?.amax()
        } else {
            let pi = mdp.greedy(&record.value);
            let v_pi = mdp.evaluate_policy(&pi)?;
            (trace.optimal_value.inner() - v_pi.inner()).amax()
        };
        worst_loss = Some(worst_loss.map_or(loss, |w: f64| w.max(loss)));
    }
    Ok(match worst_loss {
        Some(loss) => BoundReport::scalar(BoundId::StopExact, loss, epsilon),
        None => BoundReport::vacuous(BoundId::StopExact),
    })
}

/// Worst deviations of the per-iteration residual recurrences over a trace.
#[derive(Clone, Debug)]
pub struct RecurrenceSlacks {
    /// Max deviation of the shift identity `s_k = beta (I-gP_k)^-1 A_k (-b_{k-1})`.
    pub shift_identity_max_dev: f64,
    /// Min slack of `b_{k+1} >= beta A_{k+1} b_k + x_{k+1}`.
    pub residual_recursion_min_slack: f64,
    /// Min slack of `d_{k+1} <= gamma P_* d_k + y_k`.
    pub distance_recursion_min_slack: f64,
    /// Min slack of `b_k >= (I - gamma P_*)(v_* - v_k)`.
    pub residual_distance_min_slack: f64,
    /// Max deviation of `l_k = d_k + s_k`.
    pub loss_decomposition_max_dev: f64,
    /// Smallest loss component seen (optimality of `v_*` keeps it >= 0).
    pub loss_min: f64,
}

/// Evaluates the four residual recurrences and the loss decomposition at
/// every iteration of a greedy-driven trace.
pub fn recurrence_slacks(trace: &IterationTrace, mdp: &Mdp) -> Result<RecurrenceSlacks> {
    if trace.algorithm == Algorithm::ModifiedPolicyIteration {
        return Err(LpiError::UnsupportedAlgorithm {
            algorithm: "modified_policy_iteration",
        });
    }
    let ctx = TraceMatrices::build(trace, mdp, trace.lambda)?;
    let gamma = ctx.gamma;
    let lambda = ctx.lambda;
    let lg_ratio = if lambda == 0.0 {
        0.0
    } else {
        lambda * gamma / (1.0 - lambda * gamma)
    };
    let v_star = trace.optimal_value.inner();
    let mut out = RecurrenceSlacks {
        shift_identity_max_dev: 0.0,
        residual_recursion_min_slack: f64::INFINITY,
        distance_recursion_min_slack: f64::INFINITY,
        residual_distance_min_slack: f64::INFINITY,
        loss_decomposition_max_dev: 0.0,
        loss_min: f64::INFINITY,
    };
    for k in 0..trace.len() {
        let record = trace.record(k)?;
        let b_k = record.bellman_residual.inner();

        // b_k >= (I - gamma P_*)(v_* - v_k)
        let gap = v_star - record.value.inner();
        let dg_rhs = &gap - gamma * (&ctx.p_star * &gap);
        out.residual_distance_min_slack = out.residual_distance_min_slack.min((b_k - dg_rhs).min());

        if let (Some(loss), Some(shift)) = (&record.loss, &record.shift) {
            out.loss_min = out.loss_min.min(loss.min());
            let recomposed = record.distance.inner() + shift.inner();
            out.loss_decomposition_max_dev = out
                .loss_decomposition_max_dev
                .max((loss.inner() - recomposed).amax());
        }

        // Shift identity, defined from k = 1 on.
        if k >= 1 {
            if let Some(shift) = &record.shift {
                let b_prev = trace.record(k - 1)?.bellman_residual.inner();
                let a_k = ctx.a_at(k)?;
                let res_k = ctx.resolvent_at(k)?;
                let expected = ctx.beta * (res_k * (a_k * (-b_prev)));
                out.shift_identity_max_dev = out
                    .shift_identity_max_dev
                    .max((shift.inner() - expected).amax());
            }
        }

        // Forward recurrences into k + 1.
        if k + 1 < trace.len() {
            let next = trace.record(k + 1)?;
            let a_next = ctx.a_at(k + 1)?;
            let p_next = ctx.p_at(k + 1)?;
            let eps_next = next.error.inner();
            let b_next = next.bellman_residual.inner();
            let x_next = gamma * (p_next * eps_next) - eps_next;
            let lrecg_rhs = ctx.beta * (a_next * b_k) + x_next;
            out.residual_recursion_min_slack = out
                .residual_recursion_min_slack
                .min((b_next - lrecg_rhs).min());

            let eps_k = record.error.inner();
            let y_k = lg_ratio * (a_next * (-b_k)) - gamma * (&ctx.p_star * eps_k);
            let lrecd_rhs = gamma * (&ctx.p_star * record.distance.inner()) + y_k;
            out.distance_recursion_min_slack = out
                .distance_recursion_min_slack
                .min((lrecd_rhs - next.distance.inner()).min());
        }
    }
    Ok(out)
}
