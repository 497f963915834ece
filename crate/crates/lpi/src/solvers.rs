//! Iteration drivers: value iteration, policy iteration, modified policy
//! iteration and lambda policy iteration, in exact or error-injected form.
//!
//! Every run produces a full [`IterationTrace`] whose records carry the
//! iterate, the injected error, both Bellman residuals, and the derived
//! loss/distance/shift decomposition against the exact optimum. The traces
//! are what the bound engine certifies.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LpiError, Result};
use crate::mdp::{Mdp, Policy, TLambdaForm, ValueVec, MK_DEFAULT_TOL};

/// How lambda policy iteration computes its next iterate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InnerMode {
    /// Dense solve of `(I - lg P) x = r + (1-l) g P v`.
    DenseSolve,
    /// Fixed-point iteration of the operator `M_k`.
    MkIteration,
}

/// Outer-loop configuration shared by all drivers.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SolverConfig {
    pub lambda: f64,
    /// Maximum number of update steps before the run is flagged as budget-bound.
    pub max_iterations: usize,
    /// Target epsilon-optimality for the span stopping test.
    pub stop_epsilon: f64,
    pub inner_mode: InnerMode,
    /// Successive-difference tolerance of the `M_k` iteration.
    pub inner_tol: f64,
    /// Number of backup sweeps per step of modified policy iteration.
    pub mpi_steps: usize,
    pub seed: u64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            max_iterations: 1000,
            stop_epsilon: 1e-6,
            inner_mode: InnerMode::DenseSolve,
            inner_tol: MK_DEFAULT_TOL,
            mpi_steps: 1,
            seed: 0,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 {
            return Err(LpiError::InvalidParameter(
                "max_iterations must be >= 1".into(),
            ));
        }
        if !(self.stop_epsilon > 0.0) {
            return Err(LpiError::InvalidParameter(
                "stop_epsilon must be positive".into(),
            ));
        }
        if self.mpi_steps == 0 {
            return Err(LpiError::InvalidParameter("mpi_steps must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(LpiError::InvalidLambda(self.lambda));
        }
        if !(self.inner_tol > 0.0) {
            return Err(LpiError::InvalidParameter(
                "inner_tol must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Source of the per-iteration error term.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    None,
    /// Components i.i.d. uniform on `[-amplitude, amplitude]`.
    UniformBounded,
    /// Components N(0,(amplitude/3)^2) clipped to `[-amplitude, amplitude]`.
    GaussianClipped,
    /// Error is the residual of projecting the iterate onto `rank` fixed
    /// random directions plus the constant vector.
    RankProjection,
}

/// Error model attached to a run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NoiseModel {
    pub kind: NoiseKind,
    pub amplitude: f64,
    pub rank: usize,
    pub seed: u64,
}

impl NoiseModel {
    pub fn none() -> Self {
        Self {
            kind: NoiseKind::None,
            amplitude: 0.0,
            rank: 0,
            seed: 0,
        }
    }

    pub fn uniform(amplitude: f64, seed: u64) -> Self {
        Self {
            kind: NoiseKind::UniformBounded,
            amplitude,
            rank: 0,
            seed,
        }
    }

    pub fn gaussian(amplitude: f64, seed: u64) -> Self {
        Self {
            kind: NoiseKind::GaussianClipped,
            amplitude,
            rank: 0,
            seed,
        }
    }

    pub fn rank_projection(rank: usize, seed: u64) -> Self {
        Self {
            kind: NoiseKind::RankProjection,
            amplitude: 0.0,
            rank,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.amplitude >= 0.0) {
            return Err(LpiError::InvalidParameter(
                "noise amplitude must be nonnegative".into(),
            ));
        }
        Ok(())
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Counter-based draw keyed by (seed, iteration, component): reproducible
/// and independent of trajectory history.
fn counter_unit(seed: u64, k: u64, component: u64) -> f64 {
    let mut z = seed.wrapping_add(0x9e37_79b9_7f4a_7c15u64.wrapping_mul(k.wrapping_add(1)));
    z = splitmix(z);
    z = splitmix(z ^ 0xd134_2543_de82_ef95u64.wrapping_mul(component.wrapping_add(1)));
    (z >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Materialized noise source for one run.
struct NoiseSampler {
    kind: NoiseKind,
    amplitude: f64,
    seed: u64,
    /// Orthonormal projection basis (columns), present for rank projection.
    basis: Option<DMatrix<f64>>,
}

impl NoiseSampler {
    fn new(model: &NoiseModel, n_states: usize) -> Result<Self> {
        model.validate()?;
        let basis = if model.kind == NoiseKind::RankProjection {
            Some(projection_basis(n_states, model.rank, model.seed))
        } else {
            None
        };
        Ok(Self {
            kind: model.kind,
            amplitude: model.amplitude,
            seed: model.seed,
            basis,
        })
    }

    /// Error injected at iteration `k`, possibly depending on the pre-noise
    /// iterate `w` (projection residual).
    fn sample(&self, k: usize, w: &DVector<f64>) -> DVector<f64> {
        let n = w.len();
        match self.kind {
            NoiseKind::None => DVector::zeros(n),
            NoiseKind::UniformBounded => {
                if self.amplitude == 0.0 {
                    return DVector::zeros(n);
                }
                DVector::from_fn(n, |i, _| {
                    let u = counter_unit(self.seed, k as u64, i as u64);
                    (2.0 * u - 1.0) * self.amplitude
                })
            }
            NoiseKind::GaussianClipped => {
                if self.amplitude == 0.0 {
                    return DVector::zeros(n);
                }
                DVector::from_fn(n, |i, _| {
                    let u1 = counter_unit(self.seed, k as u64, 2 * i as u64);
                    let u2 = counter_unit(self.seed, k as u64, 2 * i as u64 + 1);
                    let z = (-2.0 * (1.0 - u1).ln()).sqrt()
                        * (2.0 * std::f64::consts::PI * u2).cos();
                    (z * self.amplitude / 3.0).clamp(-self.amplitude, self.amplitude)
                })
            }
            NoiseKind::RankProjection => {
                let q = self.basis.as_ref().expect("basis built at construction");
                let coeffs = q.transpose() * w;
                q * coeffs - w
            }
        }
    }
}

/// Orthonormal basis of span{e, q_1, ..., q_rank} with fixed random
/// directions, via modified Gram-Schmidt.
fn projection_basis(n: usize, rank: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut raw: Vec<DVector<f64>> = Vec::with_capacity(rank + 1);
    raw.push(DVector::from_element(n, 1.0));
    for _ in 0..rank {
        raw.push(DVector::from_fn(n, |_, _| {
            // Box-Muller from two uniform draws.
            let u1: f64 = rng.gen::<f64>();
            let u2: f64 = rng.gen::<f64>();
            (-2.0 * (1.0 - u1).ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        }));
    }
    let mut basis: Vec<DVector<f64>> = Vec::new();
    for mut v in raw {
        for q in &basis {
            let c = q.dot(&v);
            v -= c * q;
        }
        let norm = v.norm();
        if norm > 1e-10 {
            basis.push(v / norm);
        }
    }
    let mut q = DMatrix::zeros(n, basis.len());
    for (idx, col) in basis.iter().enumerate() {
        q.set_column(idx, col);
    }
    q
}

/// Which driver produced a trace.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Algorithm {
    ValueIteration,
    PolicyIteration,
    ModifiedPolicyIteration,
    LambdaPolicyIteration,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::ValueIteration => "value_iteration",
            Algorithm::PolicyIteration => "policy_iteration",
            Algorithm::ModifiedPolicyIteration => "modified_policy_iteration",
            Algorithm::LambdaPolicyIteration => "lambda_policy_iteration",
        }
    }
}

/// Why a run stopped.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TerminalReason {
    /// The span stopping test certified epsilon-optimality.
    Converged,
    /// The iteration budget ran out first (not an error).
    Budget,
}

/// Everything known about iteration `k` of a run.
///
/// Record 0 of value-style runs has no policy yet, so the policy-derived
/// fields are absent there; policy iteration carries a policy from the
/// start.
#[derive(Clone, Debug, PartialEq)]
pub struct IterationRecord {
    pub k: usize,
    /// The iterate `v_k` (after noise injection).
    pub value: ValueVec,
    /// The injected error `eps_k`.
    pub error: ValueVec,
    /// Policy `pi_k` (greedy with respect to `v_{k-1}`).
    pub policy: Option<Policy>,
    /// `b_k = T v_k - v_k`.
    pub bellman_residual: ValueVec,
    /// `b'_k = T^{pi_k} v_k - v_k`.
    pub policy_bellman_residual: Option<ValueVec>,
    /// `l_k = v_* - v^{pi_k}`.
    pub loss: Option<ValueVec>,
    /// `d_k = v_* - (v_k - eps_k)`.
    pub distance: ValueVec,
    /// `s_k = (v_k - eps_k) - v^{pi_k}`.
    pub shift: Option<ValueVec>,
    /// Whether the span stopping test passed at `v_k`.
    pub stop_test: bool,
}

/// A finished run: per-iteration records plus the exact optimum used to
/// derive losses.
#[derive(Clone, Debug)]
pub struct IterationTrace {
    pub algorithm: Algorithm,
    pub lambda: f64,
    pub gamma: f64,
    pub seed: u64,
    pub stop_epsilon: f64,
    pub records: Vec<IterationRecord>,
    pub reason: TerminalReason,
    pub optimal_value: ValueVec,
    pub optimal_policy: Policy,
    inner_iterations: usize,
    final_loss: f64,
}

impl IterationTrace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn n_states(&self) -> usize {
        self.optimal_value.len()
    }

    pub fn record(&self, k: usize) -> Result<&IterationRecord> {
        self.records.get(k).ok_or(LpiError::TraceIndexOutOfRange {
            index: k,
            len: self.records.len(),
        })
    }

    /// True when every stored error vector is identically zero.
    pub fn is_exact(&self) -> bool {
        self.records
            .iter()
            .all(|r| r.error.as_slice().iter().all(|&x| x == 0.0))
    }

    pub fn inner_iterations_total(&self) -> usize {
        self.inner_iterations
    }

    pub fn stop_epsilon(&self) -> f64 {
        self.stop_epsilon
    }

    /// Max-norm loss of the last policy the run produced.
    pub fn final_max_norm_loss(&self) -> f64 {
        self.final_loss
    }
}

/// Maximum of a per-record functional over the final `window` records; the
/// finite surrogate for asymptotic statements.
pub fn tail_limsup<F>(trace: &IterationTrace, window: usize, f: F) -> Result<f64>
where
    F: Fn(&IterationRecord) -> f64,
{
    if window == 0 {
        return Err(LpiError::InvalidParameter("window must be >= 1".into()));
    }
    if trace.len() < window {
        return Err(LpiError::TraceTooShort {
            len: trace.len(),
            window,
        });
    }
    Ok(trace.records[trace.len() - window..]
        .iter()
        .map(&f)
        .fold(f64::NEG_INFINITY, f64::max))
}

/// One raw step: next policy, pre-noise iterate, inner-loop work.
struct RawStep {
    policy: Policy,
    pre_noise: ValueVec,
    inner_iterations: usize,
}

struct RawRecord {
    value: ValueVec,
    error: ValueVec,
    policy: Option<Policy>,
}

fn enrich(
    mdp: &Mdp,
    raw: Vec<RawRecord>,
    reason: TerminalReason,
    algorithm: Algorithm,
    lambda: f64,
    seed: u64,
    stop_epsilon: f64,
    inner_iterations: usize,
) -> Result<IterationTrace> {
    let (v_star, pi_star) = mdp.optimal_value();
    let mut records = Vec::with_capacity(raw.len());
    let mut final_loss = f64::NAN;
    for (k, r) in raw.into_iter().enumerate() {
        let bellman_residual =
            ValueVec::from(mdp.apply_bellman_optimal(&r.value).inner() - r.value.inner());
        let pre_noise = ValueVec::from(r.value.inner() - r.error.inner());
        let distance = ValueVec::from(v_star.inner() - pre_noise.inner());
        let stop_test = crate::bounds::stopping_test(mdp, &r.value, stop_epsilon);
        let (policy_bellman_residual, loss, shift) = match &r.policy {
            None => (None, None, None),
            Some(pi) => {
                let b_pi =
                    ValueVec::from(mdp.apply_bellman_policy(pi, &r.value).inner() - r.value.inner());
                let v_pi = mdp.evaluate_policy(pi)?;
                let loss = ValueVec::from(v_star.inner() - v_pi.inner());
                let shift = ValueVec::from(pre_noise.inner() - v_pi.inner());
                final_loss = loss.amax();
                (Some(b_pi), Some(loss), Some(shift))
            }
        };
        records.push(IterationRecord {
            k,
            value: r.value,
            error: r.error,
            policy: r.policy,
            bellman_residual,
            policy_bellman_residual,
            loss,
            distance,
            shift,
            stop_test,
        });
    }
    if final_loss.is_nan() {
        // Trace stopped before producing any policy: grade the greedy
        // policy of the last iterate.
        let last = records.last().expect("at least one record");
        let pi = mdp.greedy(&last.value);
        let v_pi = mdp.evaluate_policy(&pi)?;
        final_loss = (v_star.inner() - v_pi.inner()).amax();
    }
    Ok(IterationTrace {
        algorithm,
        lambda,
        gamma: mdp.gamma(),
        seed,
        stop_epsilon,
        records,
        reason,
        optimal_value: v_star,
        optimal_policy: pi_star,
        inner_iterations,
        final_loss,
    })
}

/// Common outer loop for the value-style drivers (VI, MPI, lambda-PI):
/// start from `v_0`, repeatedly pick the greedy policy and track its value.
fn drive_value_style<S>(
    mdp: &Mdp,
    v0: &ValueVec,
    config: &SolverConfig,
    noise: &NoiseModel,
    algorithm: Algorithm,
    lambda: f64,
    mut step: S,
) -> Result<IterationTrace>
where
    S: FnMut(&ValueVec) -> Result<RawStep>,
{
    config.validate()?;
    assert_eq!(v0.len(), mdp.n_states(), "initial value dimension mismatch");
    let sampler = NoiseSampler::new(noise, mdp.n_states())?;
    let mut raw = vec![RawRecord {
        value: v0.clone(),
        error: ValueVec::zeros(mdp.n_states()),
        policy: None,
    }];
    let mut inner_total = 0usize;
    let mut k = 0usize;
    let reason = loop {
        let current = &raw[k].value;
        if crate::bounds::stopping_test(mdp, current, config.stop_epsilon) {
            break TerminalReason::Converged;
        }
        if k == config.max_iterations {
            break TerminalReason::Budget;
        }
        let step_out = step(current)?;
        inner_total += step_out.inner_iterations;
        let error = sampler.sample(k + 1, step_out.pre_noise.inner());
        let value = ValueVec::from(step_out.pre_noise.inner() + &error);
        raw.push(RawRecord {
            value,
            error: error.into(),
            policy: Some(step_out.policy),
        });
        k += 1;
    };
    enrich(
        mdp,
        raw,
        reason,
        algorithm,
        lambda,
        noise.seed,
        config.stop_epsilon,
        inner_total,
    )
}

/// Value iteration: `v_{k+1} = T v_k + eps_{k+1}`.
pub fn run_value_iteration(
    mdp: &Mdp,
    v0: &ValueVec,
    config: &SolverConfig,
    noise: &NoiseModel,
) -> Result<IterationTrace> {
    drive_value_style(
        mdp,
        v0,
        config,
        noise,
        Algorithm::ValueIteration,
        0.0,
        |v| {
            let policy = mdp.greedy(v);
            let pre_noise = mdp.apply_bellman_policy(&policy, v);
            Ok(RawStep {
                policy,
                pre_noise,
                inner_iterations: 0,
            })
        },
    )
}

/// Modified policy iteration: `v_{k+1} = (T^{pi_{k+1}})^n v_k` with
/// `pi_{k+1}` greedy; `n = 1` reproduces value iteration exactly.
pub fn run_modified_policy_iteration(
    mdp: &Mdp,
    v0: &ValueVec,
    config: &SolverConfig,
) -> Result<IterationTrace> {
    let n_steps = config.mpi_steps;
    drive_value_style(
        mdp,
        v0,
        config,
        &NoiseModel::none(),
        Algorithm::ModifiedPolicyIteration,
        0.0,
        |v| {
            let policy = mdp.greedy(v);
            let mut w = mdp.apply_bellman_policy(&policy, v);
            for _ in 1..n_steps {
                w = mdp.apply_bellman_policy(&policy, &w);
            }
            Ok(RawStep {
                policy,
                pre_noise: w,
                inner_iterations: n_steps,
            })
        },
    )
}

/// Lambda policy iteration: `pi_{k+1} = greedy(v_k)`,
/// `v_{k+1} = T_lambda^{pi_{k+1}} v_k + eps_{k+1}`.
pub fn run_lambda_pi(
    mdp: &Mdp,
    v0: &ValueVec,
    config: &SolverConfig,
    noise: &NoiseModel,
) -> Result<IterationTrace> {
    let lambda = config.lambda;
    let inner_mode = config.inner_mode;
    let inner_tol = config.inner_tol;
    drive_value_style(
        mdp,
        v0,
        config,
        noise,
        Algorithm::LambdaPolicyIteration,
        lambda,
        |v| {
            let policy = mdp.greedy(v);
            let (pre_noise, inner) = match inner_mode {
                InnerMode::DenseSolve => {
                    (mdp.apply_tlambda(&policy, lambda, v, TLambdaForm::Form3)?, 0)
                }
                InnerMode::MkIteration => {
                    let out = mdp.mk_fixed_point(&policy, lambda, v, inner_tol)?;
                    (out.value, out.iterations)
                }
            };
            Ok(RawStep {
                policy,
                pre_noise,
                inner_iterations: inner,
            })
        },
    )
}

/// Policy iteration: `v_k = (I - g P^{pi_k})^-1 r^{pi_k} + eps_k`,
/// `pi_{k+1} = greedy(v_k)`.
pub fn run_policy_iteration(
    mdp: &Mdp,
    pi0: &Policy,
    config: &SolverConfig,
    noise: &NoiseModel,
) -> Result<IterationTrace> {
    config.validate()?;
    pi0.validate(mdp)?;
    let sampler = NoiseSampler::new(noise, mdp.n_states())?;
    let evaluate = |pi: &Policy, k: usize| -> Result<(ValueVec, ValueVec)> {
        let w = mdp.evaluate_policy(pi)?;
        let error = sampler.sample(k, w.inner());
        let value = ValueVec::from(w.inner() + &error);
        Ok((value, error.into()))
    };
    let (value, error) = evaluate(pi0, 0)?;
    let mut raw = vec![RawRecord {
        value,
        error,
        policy: Some(pi0.clone()),
    }];
    let mut k = 0usize;
    let reason = loop {
        let current = &raw[k].value;
        if crate::bounds::stopping_test(mdp, current, config.stop_epsilon) {
            break TerminalReason::Converged;
        }
        if k == config.max_iterations {
            break TerminalReason::Budget;
        }
        let policy = mdp.greedy(current);
        let (value, error) = evaluate(&policy, k + 1)?;
        raw.push(RawRecord {
            value,
            error,
            policy: Some(policy),
        });
        k += 1;
    };
    enrich(
        mdp,
        raw,
        reason,
        Algorithm::PolicyIteration,
        1.0,
        noise.seed,
        config.stop_epsilon,
        0,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::{counterexample_mdp, random_mdp, GeneratorSpec, ACTION_CHANGE, ACTION_STAY};

    fn tight_config(max_iterations: usize) -> SolverConfig {
        SolverConfig {
            max_iterations,
            stop_epsilon: 1e-9,
            ..SolverConfig::default()
        }
    }

    #[test]
    fn vi_first_backup_on_counterexample() {
        let mdp = counterexample_mdp();
        let trace = run_value_iteration(
            &mdp,
            &ValueVec::zeros(2),
            &tight_config(1),
            &NoiseModel::none(),
        )
        .unwrap();
        assert_eq!(trace.records[1].value.as_slice(), &[0.0, 1.0]);
    }

    #[test]
    fn vi_stops_immediately_at_optimum() {
        let mdp = counterexample_mdp();
        let (v_star, _) = mdp.optimal_value();
        let trace = run_value_iteration(&mdp, &v_star, &tight_config(50), &NoiseModel::none())
            .unwrap();
        assert_eq!(trace.reason, TerminalReason::Converged);
        assert_eq!(trace.len(), 1);
        assert!(crate::seminorms::span_inf(&trace.records[0].bellman_residual) <= 1e-9);
    }

    #[test]
    fn vi_linear_rate() {
        for seed in 0..10 {
            let mdp = random_mdp(&GeneratorSpec {
                n_states: 6,
                n_actions: 2,
                branching: 3,
                reward_scale: 1.0,
                seed,
            })
            .unwrap();
            let (v_star, _) = mdp.optimal_value();
            let trace = run_value_iteration(
                &mdp,
                &ValueVec::zeros(6),
                &SolverConfig {
                    max_iterations: 40,
                    stop_epsilon: 1e-300,
                    ..SolverConfig::default()
                },
                &NoiseModel::none(),
            )
            .unwrap();
            let initial = (v_star.inner() - trace.records[0].value.inner()).amax();
            for record in &trace.records {
                let gap = (v_star.inner() - record.value.inner()).amax();
                let bound = mdp.gamma().powi(record.k as i32) * initial;
                assert!(gap <= bound + 1e-9, "seed {seed} k {}", record.k);
            }
        }
    }

    #[test]
    fn pi_counterexample_converges_to_optimum() {
        let mdp = counterexample_mdp();
        let trace = run_policy_iteration(
            &mdp,
            &Policy::new(vec![ACTION_STAY, ACTION_STAY]),
            &tight_config(50),
            &NoiseModel::none(),
        )
        .unwrap();
        assert_eq!(trace.reason, TerminalReason::Converged);
        let last = trace.records.last().unwrap();
        let pi = last.policy.as_ref().unwrap();
        assert_eq!(pi.actions(), &[ACTION_CHANGE, ACTION_STAY]);
        let v = last.value.as_slice();
        assert!((v[0] - 9.0).abs() <= 1e-9 && (v[1] - 10.0).abs() <= 1e-9);
    }

    #[test]
    fn pi_is_stable_at_the_optimal_policy() {
        let mdp = counterexample_mdp();
        let (_, pi_star) = mdp.optimal_value();
        let trace =
            run_policy_iteration(&mdp, &pi_star, &tight_config(50), &NoiseModel::none()).unwrap();
        assert_eq!(trace.len(), 1);
        assert_eq!(trace.reason, TerminalReason::Converged);
    }

    #[test]
    fn pi_values_are_monotone() {
        for seed in 0..20 {
            let mdp = random_mdp(&GeneratorSpec {
                n_states: 6,
                n_actions: 3,
                branching: 3,
                reward_scale: 1.0,
                seed,
            })
            .unwrap();
            let trace = run_policy_iteration(
                &mdp,
                &Policy::new(vec![0; 6]),
                &tight_config(100),
                &NoiseModel::none(),
            )
            .unwrap();
            for pair in trace.records.windows(2) {
                let v_prev = pair[0].value.inner();
                let v_next = pair[1].value.inner();
                for i in 0..6 {
                    assert!(v_next[i] >= v_prev[i] - 1e-9);
                }
            }
        }
    }

    #[test]
    fn mpi_one_step_equals_value_iteration() {
        let mdp = random_mdp(&GeneratorSpec {
            n_states: 6,
            n_actions: 2,
            branching: 3,
            reward_scale: 1.0,
            seed: 4,
        })
        .unwrap();
        let config = SolverConfig {
            mpi_steps: 1,
            max_iterations: 25,
            stop_epsilon: 1e-9,
            ..SolverConfig::default()
        };
        let v0 = ValueVec::zeros(6);
        let mpi = run_modified_policy_iteration(&mdp, &v0, &config).unwrap();
        let vi = run_value_iteration(&mdp, &v0, &config, &NoiseModel::none()).unwrap();
        assert_eq!(mpi.len(), vi.len());
        for (a, b) in mpi.records.iter().zip(&vi.records) {
            assert_eq!(a.value.as_slice(), b.value.as_slice());
            assert_eq!(a.policy, b.policy);
        }
    }

    #[test]
    fn mpi_long_sweeps_track_policy_values() {
        let mdp = random_mdp(&GeneratorSpec {
            n_states: 6,
            n_actions: 2,
            branching: 3,
            reward_scale: 1.0,
            seed: 9,
        })
        .unwrap();
        let n = 50;
        let config = SolverConfig {
            mpi_steps: n,
            max_iterations: 20,
            stop_epsilon: 1e-9,
            ..SolverConfig::default()
        };
        let trace = run_modified_policy_iteration(&mdp, &ValueVec::zeros(6), &config).unwrap();
        let gamma = mdp.gamma();
        for pair in trace.records.windows(2) {
            let v_k = &pair[0].value;
            let pi_next = pair[1].policy.as_ref().unwrap();
            let v_pi = mdp.evaluate_policy(pi_next).unwrap();
            let b = (mdp.apply_bellman_policy(pi_next, v_k).inner() - v_k.inner()).amax();
            let tail = gamma.powi(n as i32) / (1.0 - gamma) * b;
            assert!((pair[1].value.inner() - v_pi.inner()).amax() <= tail + 1e-12);
        }
    }

    #[test]
    fn mpi_converges_to_optimum() {
        for seed in 0..10 {
            let mdp = random_mdp(&GeneratorSpec {
                n_states: 6,
                n_actions: 3,
                branching: 3,
                reward_scale: 1.0,
                seed,
            })
            .unwrap();
            let config = SolverConfig {
                mpi_steps: 5,
                max_iterations: 300,
                stop_epsilon: 1e-6,
                ..SolverConfig::default()
            };
            let trace = run_modified_policy_iteration(&mdp, &ValueVec::zeros(6), &config).unwrap();
            assert_eq!(trace.reason, TerminalReason::Converged);
            assert!(trace.final_max_norm_loss() <= 1e-6);
        }
    }

    #[test]
    fn lambda_zero_matches_value_iteration_bitwise() {
        for seed in 0..10 {
            let mdp = random_mdp(&GeneratorSpec {
                n_states: 6,
                n_actions: 2,
                branching: 3,
                reward_scale: 1.0,
                seed,
            })
            .unwrap();
            for noise in [NoiseModel::none(), NoiseModel::uniform(0.05, seed)] {
                let config = SolverConfig {
                    lambda: 0.0,
                    max_iterations: 30,
                    stop_epsilon: 1e-9,
                    ..SolverConfig::default()
                };
                let v0 = ValueVec::zeros(6);
                let lpi = run_lambda_pi(&mdp, &v0, &config, &noise).unwrap();
                let vi = run_value_iteration(&mdp, &v0, &config, &noise).unwrap();
                assert_eq!(lpi.len(), vi.len());
                for (a, b) in lpi.records.iter().zip(&vi.records) {
                    assert_eq!(a.value.as_slice(), b.value.as_slice());
                    assert_eq!(a.policy, b.policy);
                    assert_eq!(a.error.as_slice(), b.error.as_slice());
                }
            }
        }
    }

    #[test]
    fn lambda_one_matches_policy_iteration_bitwise() {
        for seed in 0..10 {
            let mdp = random_mdp(&GeneratorSpec {
                n_states: 6,
                n_actions: 2,
                branching: 3,
                reward_scale: 1.0,
                seed,
            })
            .unwrap();
            let config = SolverConfig {
                lambda: 1.0,
                max_iterations: 40,
                stop_epsilon: 1e-9,
                ..SolverConfig::default()
            };
            let v0 = ValueVec::zeros(6);
            let lpi = run_lambda_pi(&mdp, &v0, &config, &NoiseModel::none()).unwrap();
            let pi0 = mdp.greedy(&v0);
            let pi_trace =
                run_policy_iteration(&mdp, &pi0, &config, &NoiseModel::none()).unwrap();
            // lambda-PI record k+1 corresponds to PI record k.
            for (a, b) in lpi.records[1..].iter().zip(&pi_trace.records) {
                assert_eq!(a.value.as_slice(), b.value.as_slice());
                assert_eq!(a.policy, b.policy);
            }
        }
    }

    #[test]
    fn lambda_pi_first_iterate_on_counterexample() {
        let mdp = counterexample_mdp();
        let config = SolverConfig {
            lambda: 0.5,
            max_iterations: 1,
            stop_epsilon: 1e-12,
            ..SolverConfig::default()
        };
        let trace = run_lambda_pi(
            &mdp,
            &ValueVec::new(vec![0.1, 0.0]).unwrap(),
            &config,
            &NoiseModel::none(),
        )
        .unwrap();
        let expected = (1.0 - 0.5) * 0.9 * 0.1 / (1.0 - 0.45);
        let v1 = trace.records[1].value.as_slice();
        assert!((v1[0] - expected).abs() <= 1e-12);
        assert!((v1[1] - (1.0 + expected)).abs() <= 1e-12);
        let pi1 = trace.records[1].policy.as_ref().unwrap();
        assert_eq!(pi1.actions(), &[ACTION_STAY, ACTION_CHANGE]);
    }

    #[test]
    fn lambda_pi_inner_modes_agree() {
        let mdp = counterexample_mdp();
        let dense = SolverConfig {
            lambda: 0.5,
            max_iterations: 20,
            stop_epsilon: 1e-9,
            ..SolverConfig::default()
        };
        let mk = SolverConfig {
            inner_mode: InnerMode::MkIteration,
            inner_tol: 1e-13,
            ..dense.clone()
        };
        let v0 = ValueVec::zeros(2);
        let a = run_lambda_pi(&mdp, &v0, &dense, &NoiseModel::none()).unwrap();
        let b = run_lambda_pi(&mdp, &v0, &mk, &NoiseModel::none()).unwrap();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.records.iter().zip(&b.records) {
            assert!((x.value.inner() - y.value.inner()).amax() <= 1e-8);
        }
        assert!(b.inner_iterations_total() > 0);
        assert_eq!(a.inner_iterations_total(), 0);
    }

    #[test]
    fn exact_lambda_pi_converges_for_all_lambdas() {
        for seed in 0..10 {
            let mdp = random_mdp(&GeneratorSpec {
                n_states: 6,
                n_actions: 2,
                branching: 3,
                reward_scale: 1.0,
                seed,
            })
            .unwrap();
            for &lambda in &[0.0, 0.25, 0.5, 0.75, 1.0] {
                let config = SolverConfig {
                    lambda,
                    max_iterations: 500,
                    stop_epsilon: 1e-4,
                    ..SolverConfig::default()
                };
                let trace =
                    run_lambda_pi(&mdp, &ValueVec::zeros(6), &config, &NoiseModel::none())
                        .unwrap();
                assert_eq!(trace.reason, TerminalReason::Converged);
                let last = trace.records.last().unwrap();
                let gap = (trace.optimal_value.inner() - last.value.inner()).amax();
                assert!(gap < 1e-4 / (1.0 - mdp.gamma()), "lambda {lambda} seed {seed}");
                assert!(trace.final_max_norm_loss() < 1e-4);
            }
        }
    }

    #[test]
    fn loss_decomposition_holds_on_traces() {
        let mdp = random_mdp(&GeneratorSpec {
            n_states: 6,
            n_actions: 2,
            branching: 3,
            reward_scale: 1.0,
            seed: 21,
        })
        .unwrap();
        let config = SolverConfig {
            lambda: 0.5,
            max_iterations: 60,
            stop_epsilon: 1e-10,
            ..SolverConfig::default()
        };
        let trace = run_lambda_pi(
            &mdp,
            &ValueVec::zeros(6),
            &config,
            &NoiseModel::uniform(0.02, 5),
        )
        .unwrap();
        for record in &trace.records {
            if let (Some(loss), Some(shift)) = (&record.loss, &record.shift) {
                // l_k >= 0 and l_k = d_k + s_k.
                for i in 0..6 {
                    assert!(loss[i] >= -1e-9);
                    let recomposed = record.distance[i] + shift[i];
                    assert!((loss[i] - recomposed).abs() <= 1e-9);
                }
            }
        }
    }

    #[test]
    fn uniform_zero_amplitude_equals_none() {
        let mdp = counterexample_mdp();
        let config = SolverConfig {
            lambda: 0.5,
            max_iterations: 15,
            stop_epsilon: 1e-9,
            ..SolverConfig::default()
        };
        let v0 = ValueVec::zeros(2);
        let a = run_lambda_pi(&mdp, &v0, &config, &NoiseModel::none()).unwrap();
        let b = run_lambda_pi(&mdp, &v0, &config, &NoiseModel::uniform(0.0, 9)).unwrap();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.records.iter().zip(&b.records) {
            assert_eq!(x.value.as_slice(), y.value.as_slice());
            assert_eq!(x.error.as_slice(), y.error.as_slice());
        }
    }

    #[test]
    fn noise_is_reproducible_and_counter_based() {
        let model = NoiseModel::uniform(0.5, 42);
        let sampler = NoiseSampler::new(&model, 4).unwrap();
        let w = DVector::zeros(4);
        let a = sampler.sample(3, &w);
        let b = sampler.sample(3, &w);
        assert_eq!(a.as_slice(), b.as_slice());
        let c = sampler.sample(4, &w);
        assert_ne!(a.as_slice(), c.as_slice());
        for &x in a.as_slice() {
            assert!(x.abs() <= 0.5);
        }
    }

    #[test]
    fn gaussian_noise_is_clipped() {
        let model = NoiseModel::gaussian(0.1, 7);
        let sampler = NoiseSampler::new(&model, 64).unwrap();
        for k in 0..50 {
            let draw = sampler.sample(k, &DVector::zeros(64));
            for &x in draw.as_slice() {
                assert!(x.abs() <= 0.1);
            }
        }
    }

    #[test]
    fn full_rank_projection_is_lossless() {
        let mdp = random_mdp(&GeneratorSpec {
            n_states: 5,
            n_actions: 2,
            branching: 3,
            reward_scale: 1.0,
            seed: 6,
        })
        .unwrap();
        let config = SolverConfig {
            lambda: 0.0,
            max_iterations: 80,
            stop_epsilon: 1e-8,
            ..SolverConfig::default()
        };
        let trace = run_lambda_pi(
            &mdp,
            &ValueVec::zeros(5),
            &config,
            &NoiseModel::rank_projection(5, 3),
        )
        .unwrap();
        for record in &trace.records {
            assert!(record.error.amax() <= 1e-9);
        }
        assert_eq!(trace.reason, TerminalReason::Converged);
    }

    #[test]
    fn tail_limsup_basics() {
        let mdp = counterexample_mdp();
        let trace = run_value_iteration(
            &mdp,
            &ValueVec::zeros(2),
            &SolverConfig {
                max_iterations: 10,
                stop_epsilon: 1e-300,
                ..SolverConfig::default()
            },
            &NoiseModel::none(),
        )
        .unwrap();
        let f = |r: &IterationRecord| r.k as f64;
        assert_eq!(tail_limsup(&trace, 1, f).unwrap(), 10.0);
        assert_eq!(tail_limsup(&trace, 4, f).unwrap(), 10.0);
        assert!(matches!(
            tail_limsup(&trace, 99, f),
            Err(LpiError::TraceTooShort { .. })
        ));
        // Nested windows: a wider window dominates a narrower one.
        let g = |r: &IterationRecord| -((r.k as f64 - 7.0).powi(2));
        assert!(tail_limsup(&trace, 8, g).unwrap() >= tail_limsup(&trace, 2, g).unwrap());
    }

    #[test]
    fn budget_exhaustion_is_flagged() {
        let mdp = counterexample_mdp();
        let trace = run_value_iteration(
            &mdp,
            &ValueVec::zeros(2),
            &SolverConfig {
                max_iterations: 3,
                stop_epsilon: 1e-12,
                ..SolverConfig::default()
            },
            &NoiseModel::none(),
        )
        .unwrap();
        assert_eq!(trace.reason, TerminalReason::Budget);
        assert_eq!(trace.len(), 4);
    }
}
