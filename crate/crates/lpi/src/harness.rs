//! Problem generators and scripted experiment campaigns.
//!
//! Houses the reproducible random-MDP generator, the two-state fixture that
//! witnesses non-contraction of the update operator, and the campaign runner
//! that sweeps (replication, lambda, gamma) cells, executes the requested
//! bound checks, and emits a canonical result table.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bounds::{self, BoundId};
use crate::error::{LpiError, Result};
use crate::mdp::Mdp;
use crate::seminorms::uniform_distribution;
use crate::solvers::{run_lambda_pi, InnerMode, IterationTrace, NoiseKind, NoiseModel, SolverConfig};

/// Action index of "change" in the two-state fixture.
pub const ACTION_CHANGE: usize = 0;
/// Action index of "stay" in the two-state fixture.
pub const ACTION_STAY: usize = 1;

/// Shape of a randomly generated MDP.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub n_states: usize,
    pub n_actions: usize,
    /// Number of successor states per (state, action), chosen without
    /// replacement.
    pub branching: usize,
    /// Rewards are drawn uniformly from `[0, reward_scale]`.
    pub reward_scale: f64,
    pub seed: u64,
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_states == 0 || self.n_actions == 0 {
            return Err(LpiError::InvalidParameter(
                "generator needs positive state and action counts".into(),
            ));
        }
        if self.branching == 0 || self.branching > self.n_states {
            return Err(LpiError::InvalidParameter(format!(
                "branching {} must lie in [1, {}]",
                self.branching, self.n_states
            )));
        }
        if !(self.reward_scale >= 0.0) {
            return Err(LpiError::InvalidParameter(
                "reward_scale must be nonnegative".into(),
            ));
        }
        Ok(())
    }
}

/// Draws a random MDP with `branching` successors per (state, action),
/// normalized uniform transition weights and uniform rewards.
///
/// Deterministic in the seed; gamma defaults to 0.9 and can be swapped with
/// [`Mdp::with_gamma`].
pub fn random_mdp(spec: &GeneratorSpec) -> Result<Mdp> {
    spec.validate()?;
    let n = spec.n_states;
    let na = spec.n_actions;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut transitions = vec![0.0; na * n * n];
    let mut rewards = vec![0.0; n * na * n];
    let mut successor_pool: Vec<usize> = (0..n).collect();
    for a in 0..na {
        for i in 0..n {
            successor_pool.shuffle(&mut rng);
            let successors = &successor_pool[..spec.branching];
            let mut weights: Vec<f64> = (0..spec.branching).map(|_| rng.gen::<f64>()).collect();
            let total: f64 = weights.iter().sum();
            if total == 0.0 {
                weights = vec![1.0; spec.branching];
            }
            let total: f64 = weights.iter().sum();
            for (slot, &j) in successors.iter().enumerate() {
                transitions[(a * n + i) * n + j] = weights[slot] / total;
                rewards[(i * na + a) * n + j] = rng.gen::<f64>() * spec.reward_scale;
            }
        }
    }
    Mdp::new(n, na, 0.9, transitions, rewards)
}

/// The deterministic two-state, two-action fixture with `r = (0, 1)`:
/// "change" swaps states, "stay" keeps them.
///
/// Its greedy policy flips under arbitrarily small value perturbations,
/// which makes the lambda-PI update operator expand distances by a factor
/// of order `1 / (1 - lambda * gamma)`.
pub fn counterexample_mdp() -> Mdp {
    counterexample_mdp_with_gamma(0.9)
}

/// Same fixture with an explicit discount factor.
pub fn counterexample_mdp_with_gamma(gamma: f64) -> Mdp {
    let n = 2;
    let mut transitions = vec![0.0; 2 * n * n];
    // change: 1 -> 2, 2 -> 1
    transitions[(ACTION_CHANGE * n) * n + 1] = 1.0;
    transitions[(ACTION_CHANGE * n + 1) * n] = 1.0;
    // stay: 1 -> 1, 2 -> 2
    transitions[(ACTION_STAY * n) * n] = 1.0;
    transitions[(ACTION_STAY * n + 1) * n + 1] = 1.0;
    Mdp::with_state_rewards(n, 2, gamma, transitions, &[0.0, 1.0])
        .expect("fixture is well-formed")
}

/// Problem source of an experiment: a generator or the named fixture.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProblemSource {
    Generator(GeneratorSpec),
    Counterexample,
}

/// A scripted campaign: a problem source crossed with lambda and gamma
/// grids, one noise model, one solver configuration, and a set of bound
/// checks, replicated over derived seeds.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub problem: ProblemSource,
    pub lambdas: Vec<f64>,
    pub gammas: Vec<f64>,
    pub noise: NoiseModel,
    pub solver: SolverConfig,
    pub checks: Vec<BoundId>,
    pub replications: usize,
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.lambdas.is_empty() || self.gammas.is_empty() {
            return Err(LpiError::InvalidParameter(
                "lambda and gamma lists must be non-empty".into(),
            ));
        }
        if self.replications == 0 {
            return Err(LpiError::InvalidParameter(
                "replications must be >= 1".into(),
            ));
        }
        if let ProblemSource::Generator(g) = &self.problem {
            g.validate()?;
        }
        for &l in &self.lambdas {
            if !(0.0..=1.0).contains(&l) {
                return Err(LpiError::InvalidLambda(l));
            }
        }
        for &g in &self.gammas {
            if !(g > 0.0 && g < 1.0) {
                return Err(LpiError::InvalidGamma(g));
            }
        }
        Ok(())
    }
}

/// One row of the result table: run coordinates plus the aggregated outcome
/// of one bound id (worst slack over all instances checked in the run).
#[derive(Clone, Debug)]
pub struct ExperimentRecord {
    pub replication: usize,
    pub lambda: f64,
    pub gamma: f64,
    pub seed: u64,
    pub bound_id: Option<BoundId>,
    pub satisfied: bool,
    pub vacuous: bool,
    pub slack: f64,
    pub iterations: usize,
    pub final_loss: f64,
    /// Populated instead of bound results when a run fails outright.
    pub error: Option<String>,
}

/// Summary row of a lambda sweep.
#[derive(Clone, Debug)]
pub struct SweepRow {
    pub lambda: f64,
    pub outer_iterations: usize,
    pub inner_iterations: usize,
    pub final_loss: f64,
}

fn mix(seed: u64, salt: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn build_problem(spec: &ExperimentSpec, replication: usize, gamma: f64) -> Result<Mdp> {
    let mdp = match &spec.problem {
        ProblemSource::Counterexample => counterexample_mdp(),
        ProblemSource::Generator(g) => {
            let mut g = g.clone();
            g.seed = mix(g.seed, replication as u64);
            random_mdp(&g)?
        }
    };
    mdp.with_gamma(gamma)
}

fn run_cell(
    spec: &ExperimentSpec,
    replication: usize,
    lambda: f64,
    gamma: f64,
) -> Result<(IterationTrace, Mdp, u64)> {
    let mdp = build_problem(spec, replication, gamma)?;
    let mut config = spec.solver.clone();
    config.lambda = lambda;
    let mut noise = spec.noise.clone();
    noise.seed = mix(noise.seed, (replication as u64) << 32 | mix(lambda.to_bits(), gamma.to_bits()));
    let v0 = crate::mdp::ValueVec::zeros(mdp.n_states());
    let trace = run_lambda_pi(&mdp, &v0, &config, &noise)?;
    Ok((trace, mdp, noise.seed))
}

/// Executes every requested check on one finished trace and aggregates the
/// outcomes per bound id (worst slack wins).
fn checks_for_trace(
    trace: &IterationTrace,
    mdp: &Mdp,
    checks: &[BoundId],
) -> Result<Vec<(BoundId, bool, bool, f64)>> {
    let reports = bounds::evaluate_checks(trace, mdp, checks, &default_check_params(trace))?;
    let mut aggregated: Vec<(BoundId, bool, bool, f64)> = Vec::new();
    for id in checks {
        let matching: Vec<_> = reports.iter().filter(|r| r.bound_id == *id).collect();
        if matching.is_empty() {
            continue;
        }
        let satisfied = matching.iter().all(|r| r.satisfied);
        let vacuous = matching.iter().all(|r| r.vacuous);
        let slack = matching
            .iter()
            .map(|r| r.slack)
            .fold(f64::INFINITY, f64::min);
        aggregated.push((*id, satisfied, vacuous, slack));
    }
    Ok(aggregated)
}

/// Check-window parameters derived from the trace length.
pub fn default_check_params(trace: &IterationTrace) -> bounds::CheckParams {
    let len = trace.len();
    let window = (len / 4).clamp(1, 20);
    let last = len.saturating_sub(1);
    let k0 = last.saturating_sub(2 * window).max(1);
    bounds::CheckParams {
        k0,
        window,
        p_grid: vec![1.0, 2.0, 4.0],
        mu: uniform_distribution(trace.n_states()),
        nu: uniform_distribution(trace.n_states()),
        pair_cap: 30,
        epsilon: trace.stop_epsilon(),
    }
}

/// Runs the campaign. The output table is sorted by (replication, lambda,
/// gamma, bound_id) and is byte-reproducible for a fixed spec; failures of
/// individual cells become error rows instead of aborting the sweep.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<Vec<ExperimentRecord>> {
    spec.validate()?;
    let mut records = Vec::new();
    for replication in 0..spec.replications {
        for (li, &lambda) in spec.lambdas.iter().enumerate() {
            for (gi, &gamma) in spec.gammas.iter().enumerate() {
                let _ = (li, gi);
                match run_cell(spec, replication, lambda, gamma) {
                    Ok((trace, mdp, seed)) => {
                        let iterations = trace.len() - 1;
                        let final_loss = trace.final_max_norm_loss();
                        if spec.checks.is_empty() {
                            records.push(ExperimentRecord {
                                replication,
                                lambda,
                                gamma,
                                seed,
                                bound_id: None,
                                satisfied: true,
                                vacuous: false,
                                slack: 0.0,
                                iterations,
                                final_loss,
                                error: None,
                            });
                            continue;
                        }
                        match checks_for_trace(&trace, &mdp, &spec.checks) {
                            Ok(outcomes) => {
                                for (bound_id, satisfied, vacuous, slack) in outcomes {
                                    records.push(ExperimentRecord {
                                        replication,
                                        lambda,
                                        gamma,
                                        seed,
                                        bound_id: Some(bound_id),
                                        satisfied,
                                        vacuous,
                                        slack,
                                        iterations,
                                        final_loss,
                                        error: None,
                                    });
                                }
                            }
                            Err(err) => records.push(ExperimentRecord {
                                replication,
                                lambda,
                                gamma,
                                seed,
                                bound_id: None,
                                satisfied: false,
                                vacuous: false,
                                slack: f64::NEG_INFINITY,
                                iterations,
                                final_loss,
                                error: Some(err.to_string()),
                            }),
                        }
                    }
                    Err(err) => records.push(ExperimentRecord {
                        replication,
                        lambda,
                        gamma,
                        seed: 0,
                        bound_id: None,
                        satisfied: false,
                        vacuous: false,
                        slack: f64::NEG_INFINITY,
                        iterations: 0,
                        final_loss: f64::NAN,
                        error: Some(err.to_string()),
                    }),
                }
            }
        }
    }
    records.sort_by(|a, b| {
        (a.replication, a.lambda.to_bits(), a.gamma.to_bits(), a.bound_id)
            .cmp(&(b.replication, b.lambda.to_bits(), b.gamma.to_bits(), b.bound_id))
    });
    Ok(records)
}

/// Runs lambda-PI once per lambda and reports the outer/inner iteration
/// tradeoff together with the final max-norm loss.
///
/// With the dense inner solver the inner count is 0 by convention; with the
/// fixed-point inner solver it totals the `M_k` applications.
pub fn lambda_sweep(
    mdp: &Mdp,
    lambdas: &[f64],
    config: &SolverConfig,
    noise: &NoiseModel,
) -> Result<Vec<SweepRow>> {
    if lambdas.is_empty() {
        return Err(LpiError::InvalidParameter("empty lambda list".into()));
    }
    let mut rows = Vec::with_capacity(lambdas.len());
    for &lambda in lambdas {
        let mut config = config.clone();
        config.lambda = lambda;
        let v0 = crate::mdp::ValueVec::zeros(mdp.n_states());
        let trace = run_lambda_pi(mdp, &v0, &config, noise)?;
        rows.push(SweepRow {
            lambda,
            outer_iterations: trace.len() - 1,
            inner_iterations: trace.inner_iterations_total(),
            final_loss: trace.final_max_norm_loss(),
        });
    }
    Ok(rows)
}

/// The default verification campaign: lambda and gamma grids over 20
/// replications, once exact and once under uniform noise.
pub fn default_campaign() -> Vec<ExperimentSpec> {
    let generator = GeneratorSpec {
        n_states: 6,
        n_actions: 2,
        branching: 3,
        reward_scale: 1.0,
        seed: 2024,
    };
    let lambdas = vec![0.0, 0.25, 0.5, 0.75, 1.0];
    let gammas = vec![0.5, 0.9];
    let exact = ExperimentSpec {
        problem: ProblemSource::Generator(generator.clone()),
        lambdas: lambdas.clone(),
        gammas: gammas.clone(),
        noise: NoiseModel::none(),
        solver: SolverConfig {
            max_iterations: 30,
            stop_epsilon: 1e-12,
            ..SolverConfig::default()
        },
        checks: bounds::exact_check_ids(),
        replications: 20,
    };
    let noisy = ExperimentSpec {
        problem: ProblemSource::Generator(generator),
        lambdas,
        gammas,
        noise: NoiseModel {
            kind: NoiseKind::UniformBounded,
            amplitude: 0.01,
            rank: 0,
            seed: 77,
        },
        solver: SolverConfig {
            max_iterations: 120,
            stop_epsilon: 1e-12,
            ..SolverConfig::default()
        },
        checks: bounds::approximate_check_ids(),
        replications: 20,
    };
    vec![exact, noisy]
}

/// Configuration used by `lambda_sweep` callers that want the fixed-point
/// inner loop.
pub fn sweep_config() -> SolverConfig {
    SolverConfig {
        inner_mode: InnerMode::MkIteration,
        ..SolverConfig::default()
    }
}
