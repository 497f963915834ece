//! Finite Markov decision processes and their Bellman operators.
//!
//! The model is the discounted infinite-horizon tuple (states, actions,
//! transition tensor, reward tensor, gamma). Values are vectors on states,
//! policies are deterministic maps from states to actions, and the backup
//! operators are the usual linear `T^pi` and nonlinear `T` together with
//! the geometrically averaged `T_lambda^pi` family that interpolates
//! between them.

use nalgebra::{DMatrix, DVector};

use crate::error::{LpiError, Result};

/// Tolerance on transition-row sums at model construction.
pub const TRANSITION_ROW_TOL: f64 = 1e-12;
/// Tolerance on row sums of derived stochastic matrices.
pub const MATRIX_ROW_TOL: f64 = 1e-9;
/// Entries of derived stochastic matrices may undershoot zero by this much.
pub const MATRIX_NEG_TOL: f64 = 1e-12;
/// Relative residual bound asserted after every dense linear solve.
pub const SOLVE_RESIDUAL_TOL: f64 = 1e-10;
/// Application cap for the inner fixed-point iteration.
pub const MK_ITERATION_CAP: usize = 1_000_000;
/// Default successive-difference tolerance for the inner fixed-point iteration.
pub const MK_DEFAULT_TOL: f64 = 1e-12;

/// A real-valued function on states.
#[derive(Clone, Debug, PartialEq)]
pub struct ValueVec(DVector<f64>);

impl ValueVec {
    /// Builds a value vector, rejecting non-finite entries.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(index) = values.iter().position(|x| !x.is_finite()) {
            return Err(LpiError::NonFiniteEntry { index });
        }
        Ok(Self(DVector::from_vec(values)))
    }

    pub fn zeros(n: usize) -> Self {
        Self(DVector::zeros(n))
    }

    pub fn constant(n: usize, c: f64) -> Self {
        Self(DVector::from_element(n, c))
    }

    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice()
    }

    pub fn inner(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DVector<f64> {
        self.0
    }
}

impl From<DVector<f64>> for ValueVec {
    fn from(v: DVector<f64>) -> Self {
        Self(v)
    }
}

impl std::ops::Deref for ValueVec {
    type Target = DVector<f64>;
    fn deref(&self) -> &DVector<f64> {
        &self.0
    }
}

/// A stationary deterministic policy: one action index per state.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Policy(Vec<usize>);

impl Policy {
    pub fn new(actions: Vec<usize>) -> Self {
        Self(actions)
    }

    pub fn actions(&self) -> &[usize] {
        &self.0
    }

    /// Checks that every entry addresses a valid action of `mdp`.
    pub fn validate(&self, mdp: &Mdp) -> Result<()> {
        if self.0.len() != mdp.n_states {
            return Err(LpiError::DimensionMismatch {
                expected: mdp.n_states,
                got: self.0.len(),
            });
        }
        for (state, &action) in self.0.iter().enumerate() {
            if action >= mdp.n_actions {
                return Err(LpiError::InvalidPolicy {
                    state,
                    action,
                    n_actions: mdp.n_actions,
                });
            }
        }
        Ok(())
    }
}

impl std::ops::Deref for Policy {
    type Target = [usize];
    fn deref(&self) -> &[usize] {
        &self.0
    }
}

/// A nonnegative square matrix with unit row sums.
///
/// Houses transition matrices of policies as well as every matrix built by
/// the bound engine; construction clamps entries in `[-1e-12, 0)` to zero
/// and rejects anything worse.
#[derive(Clone, Debug, PartialEq)]
pub struct RowStochasticMatrix(DMatrix<f64>);

impl RowStochasticMatrix {
    /// Validates with the default row-sum tolerance.
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        Self::with_row_tol(m, MATRIX_ROW_TOL)
    }

    /// Validates with an explicit row-sum tolerance.
    pub fn with_row_tol(mut m: DMatrix<f64>, tol: f64) -> Result<Self> {
        let n = m.nrows();
        if m.ncols() != n {
            return Err(LpiError::DimensionMismatch {
                expected: n,
                got: m.ncols(),
            });
        }
        for row in 0..n {
            for col in 0..n {
                let v = m[(row, col)];
                if v < 0.0 {
                    if v < -MATRIX_NEG_TOL {
                        return Err(LpiError::NegativeEntry { row, col, value: v });
                    }
                    m[(row, col)] = 0.0;
                }
            }
            let sum: f64 = m.row(row).iter().sum();
            if (sum - 1.0).abs() > tol {
                return Err(LpiError::RowSumViolation { row, sum, tol });
            }
        }
        Ok(Self(m))
    }

    pub fn inner(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }

    /// Row-major matrix-vector product with a fixed summation order.
    pub fn mul_vec(&self, v: &DVector<f64>) -> DVector<f64> {
        let n = self.0.nrows();
        DVector::from_fn(n, |i, _| {
            let mut acc = 0.0;
            for j in 0..n {
                acc += self.0[(i, j)] * v[j];
            }
            acc
        })
    }
}

impl std::ops::Deref for RowStochasticMatrix {
    type Target = DMatrix<f64>;
    fn deref(&self) -> &DMatrix<f64> {
        &self.0
    }
}

/// Which of the four equivalent expressions computes `T_lambda^pi`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TLambdaForm {
    /// `v + (I - lg P)^-1 (T^pi v - v)`
    Form1,
    /// `(I - lg P)^-1 (T^pi v - lg P v)`
    Form2,
    /// `(I - lg P)^-1 (r^pi + (1-l) g P v)`
    Form3,
    /// `(I - lg P)^-1 (l r^pi + (1-l) T^pi v)`
    Form4,
}

/// Result of iterating the inner operator `M_k` to its fixed point.
#[derive(Clone, Debug)]
pub struct MkFixedPoint {
    pub value: ValueVec,
    /// Number of operator applications performed.
    pub iterations: usize,
    /// Largest observed ratio of successive max-norm differences.
    pub measured_modulus: f64,
}

/// A finite MDP: transition tensor `p[a][i][j]`, reward tensor `r[i][a][j]`,
/// discount `gamma` strictly inside (0,1).
#[derive(Clone, Debug)]
pub struct Mdp {
    n_states: usize,
    n_actions: usize,
    gamma: f64,
    /// Flat layout `[(a * n_states + i) * n_states + j]`.
    transitions: Vec<f64>,
    /// Flat layout `[(i * n_actions + a) * n_states + j]`.
    rewards: Vec<f64>,
}

impl Mdp {
    pub fn new(
        n_states: usize,
        n_actions: usize,
        gamma: f64,
        transitions: Vec<f64>,
        rewards: Vec<f64>,
    ) -> Result<Self> {
        if n_states == 0 || n_actions == 0 {
            return Err(LpiError::InvalidParameter(
                "n_states and n_actions must be positive".into(),
            ));
        }
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(LpiError::InvalidGamma(gamma));
        }
        let nt = n_actions * n_states * n_states;
        if transitions.len() != nt {
            return Err(LpiError::DimensionMismatch {
                expected: nt,
                got: transitions.len(),
            });
        }
        let nr = n_states * n_actions * n_states;
        if rewards.len() != nr {
            return Err(LpiError::DimensionMismatch {
                expected: nr,
                got: rewards.len(),
            });
        }
        if let Some(index) = rewards.iter().position(|x| !x.is_finite()) {
            return Err(LpiError::NonFiniteEntry { index });
        }
        let mdp = Self {
            n_states,
            n_actions,
            gamma,
            transitions,
            rewards,
        };
        for a in 0..n_actions {
            for i in 0..n_states {
                let mut sum = 0.0;
                for j in 0..n_states {
                    let p = mdp.p(a, i, j);
                    if p < 0.0 {
                        return Err(LpiError::NegativeProbability {
                            action: a,
                            state: i,
                            next: j,
                            value: p,
                        });
                    }
                    sum += p;
                }
                if (sum - 1.0).abs() > TRANSITION_ROW_TOL {
                    return Err(LpiError::NonStochasticRow {
                        state: i,
                        action: a,
                        sum,
                    });
                }
            }
        }
        Ok(mdp)
    }

    /// Builds an MDP whose reward depends only on the current state,
    /// replicating `state_rewards[i]` across all `(a, j)`.
    pub fn with_state_rewards(
        n_states: usize,
        n_actions: usize,
        gamma: f64,
        transitions: Vec<f64>,
        state_rewards: &[f64],
    ) -> Result<Self> {
        if state_rewards.len() != n_states {
            return Err(LpiError::DimensionMismatch {
                expected: n_states,
                got: state_rewards.len(),
            });
        }
        let mut rewards = vec![0.0; n_states * n_actions * n_states];
        for i in 0..n_states {
            for a in 0..n_actions {
                for j in 0..n_states {
                    rewards[(i * n_actions + a) * n_states + j] = state_rewards[i];
                }
            }
        }
        Self::new(n_states, n_actions, gamma, transitions, rewards)
    }

    /// Same model with a different discount factor.
    pub fn with_gamma(&self, gamma: f64) -> Result<Self> {
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(LpiError::InvalidGamma(gamma));
        }
        let mut out = self.clone();
        out.gamma = gamma;
        Ok(out)
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    #[inline]
    pub fn p(&self, action: usize, state: usize, next: usize) -> f64 {
        self.transitions[(action * self.n_states + state) * self.n_states + next]
    }

    #[inline]
    pub fn r(&self, state: usize, action: usize, next: usize) -> f64 {
        self.rewards[(state * self.n_actions + action) * self.n_states + next]
    }

    pub fn transitions(&self) -> &[f64] {
        &self.transitions
    }

    pub fn rewards(&self) -> &[f64] {
        &self.rewards
    }

    /// Expected one-step reward and expected continuation for `(state, action)`.
    ///
    /// Every backup in the crate is assembled from these two sums so that
    /// greedy selection, `T`, and `T^pi` evaluate action values through the
    /// exact same floating-point path.
    #[inline]
    fn backup_terms(&self, state: usize, action: usize, v: &DVector<f64>) -> (f64, f64) {
        let mut r_sum = 0.0;
        let mut v_sum = 0.0;
        for j in 0..self.n_states {
            let p = self.p(action, state, j);
            r_sum += p * self.r(state, action, j);
            v_sum += p * v[j];
        }
        (r_sum, v_sum)
    }

    /// The matrix `P^pi` with rows `p[pi(i)][i][.]`.
    pub fn policy_transition_matrix(&self, pi: &Policy) -> Result<RowStochasticMatrix> {
        pi.validate(self)?;
        let n = self.n_states;
        let m = DMatrix::from_fn(n, n, |i, j| self.p(pi[i], i, j));
        RowStochasticMatrix::new(m)
    }

    /// The vector `r^pi` with components `sum_j p[pi(i)][i][j] r(i,pi(i),j)`.
    pub fn policy_reward(&self, pi: &Policy) -> Result<ValueVec> {
        pi.validate(self)?;
        let zero = DVector::zeros(self.n_states);
        let values = DVector::from_fn(self.n_states, |i, _| self.backup_terms(i, pi[i], &zero).0);
        Ok(values.into())
    }

    /// The linear backup `T^pi v = r^pi + gamma P^pi v`.
    pub fn apply_bellman_policy(&self, pi: &Policy, v: &ValueVec) -> ValueVec {
        assert_eq!(v.len(), self.n_states, "value dimension mismatch");
        DVector::from_fn(self.n_states, |i, _| {
            let (r_sum, v_sum) = self.backup_terms(i, pi[i], v);
            r_sum + self.gamma * v_sum
        })
        .into()
    }

    /// Greedy policy and its backup values in a single argmax sweep.
    ///
    /// Ties go to the lowest action index; comparisons are exact.
    fn greedy_backup(&self, v: &DVector<f64>) -> (Policy, DVector<f64>) {
        let mut actions = Vec::with_capacity(self.n_states);
        let mut values = DVector::zeros(self.n_states);
        for i in 0..self.n_states {
            let mut best_action = 0usize;
            let mut best_q = {
                let (r_sum, v_sum) = self.backup_terms(i, 0, v);
                r_sum + self.gamma * v_sum
            };
            for a in 1..self.n_actions {
                let (r_sum, v_sum) = self.backup_terms(i, a, v);
                let q = r_sum + self.gamma * v_sum;
                if q > best_q {
                    best_q = q;
                    best_action = a;
                }
            }
            actions.push(best_action);
            values[i] = best_q;
        }
        (Policy::new(actions), values)
    }

    /// The nonlinear backup `T v`, the componentwise max over action backups.
    pub fn apply_bellman_optimal(&self, v: &ValueVec) -> ValueVec {
        assert_eq!(v.len(), self.n_states, "value dimension mismatch");
        self.greedy_backup(v).1.into()
    }

    /// A policy attaining `T v`, ties broken by lowest action index.
    pub fn greedy(&self, v: &ValueVec) -> Policy {
        assert_eq!(v.len(), self.n_states, "value dimension mismatch");
        self.greedy_backup(v).0
    }

    /// The system matrix `I - c P^pi`.
    fn discounted_system(&self, pi: &Policy, c: f64) -> DMatrix<f64> {
        let n = self.n_states;
        DMatrix::from_fn(n, n, |i, j| {
            let d = if i == j { 1.0 } else { 0.0 };
            d - c * self.p(pi[i], i, j)
        })
    }

    /// Dense LU solve of `(I - c P^pi) x = rhs` with a residual assertion.
    fn solve_discounted(&self, pi: &Policy, c: f64, rhs: &DVector<f64>) -> Result<DVector<f64>> {
        let m = self.discounted_system(pi, c);
        let lu = m.clone().lu();
        let x = lu.solve(rhs).ok_or(LpiError::LinearSolveFailed {
            residual: f64::INFINITY,
            bound: 0.0,
        })?;
        let residual = (&m * &x - rhs).amax();
        let bound = SOLVE_RESIDUAL_TOL * (1.0 + rhs.amax());
        if residual > bound {
            return Err(LpiError::LinearSolveFailed { residual, bound });
        }
        Ok(x)
    }

    /// Exact policy evaluation `v^pi = (I - gamma P^pi)^-1 r^pi`.
    pub fn evaluate_policy(&self, pi: &Policy) -> Result<ValueVec> {
        let r = self.policy_reward(pi)?;
        Ok(self.solve_discounted(pi, self.gamma, r.inner())?.into())
    }

    /// Optimal value and policy by exact policy iteration.
    ///
    /// Finite MDPs reach the optimum in finitely many improvement steps, so
    /// this serves as the ground-truth oracle for everything downstream.
    pub fn optimal_value(&self) -> (ValueVec, Policy) {
        let mut pi = self.greedy(&ValueVec::zeros(self.n_states));
        for _ in 0..10_000 {
            let v = self.evaluate_policy(&pi).expect("policy evaluation");
            let next = self.greedy(&v);
            if next == pi {
                let t_v = self.apply_bellman_optimal(&v);
                debug_assert!((t_v.inner() - v.inner()).amax() <= 1e-9 * (1.0 + v.amax()));
                return (v, next);
            }
            pi = next;
        }
        unreachable!("exact policy iteration failed to terminate");
    }

    /// The operator `T_lambda^pi v` computed through the requested form.
    ///
    /// All four forms agree up to linear-algebra roundoff; form 3 is the
    /// default path used by the solvers.
    pub fn apply_tlambda(
        &self,
        pi: &Policy,
        lambda: f64,
        v: &ValueVec,
        form: TLambdaForm,
    ) -> Result<ValueVec> {
        pi.validate(self)?;
        if !(0.0..=1.0).contains(&lambda) {
            return Err(LpiError::InvalidLambda(lambda));
        }
        let n = self.n_states;
        assert_eq!(v.len(), n, "value dimension mismatch");
        let lg = lambda * self.gamma;
        let rhs = match form {
            TLambdaForm::Form1 => {
                let t = self.apply_bellman_policy(pi, v);
                let delta = self.solve_discounted(pi, lg, &(t.inner() - v.inner()))?;
                return Ok((v.inner() + delta).into());
            }
            TLambdaForm::Form2 => DVector::from_fn(n, |i, _| {
                let (r_sum, v_sum) = self.backup_terms(i, pi[i], v);
                r_sum + self.gamma * v_sum - lg * v_sum
            }),
            TLambdaForm::Form3 => DVector::from_fn(n, |i, _| {
                let (r_sum, v_sum) = self.backup_terms(i, pi[i], v);
                r_sum + ((1.0 - lambda) * self.gamma) * v_sum
            }),
            TLambdaForm::Form4 => DVector::from_fn(n, |i, _| {
                let (r_sum, v_sum) = self.backup_terms(i, pi[i], v);
                lambda * r_sum + (1.0 - lambda) * (r_sum + self.gamma * v_sum)
            }),
        };
        Ok(self.solve_discounted(pi, lg, &rhs)?.into())
    }

    /// The additive step `delta = (I - lg P^pi)^-1 (T^pi v - v)`,
    /// so that `v + delta = T_lambda^pi v`.
    pub fn td_increment(&self, pi: &Policy, lambda: f64, v: &ValueVec) -> Result<ValueVec> {
        pi.validate(self)?;
        if !(0.0..=1.0).contains(&lambda) {
            return Err(LpiError::InvalidLambda(lambda));
        }
        let t = self.apply_bellman_policy(pi, v);
        Ok(self
            .solve_discounted(pi, lambda * self.gamma, &(t.inner() - v.inner()))?
            .into())
    }

    /// One application of `M_k: v -> (1-lambda) T^pi v_anchor + lambda T^pi v`.
    pub fn mk_apply(
        &self,
        pi: &Policy,
        lambda: f64,
        v_anchor: &ValueVec,
        v: &ValueVec,
    ) -> ValueVec {
        let t_anchor = self.apply_bellman_policy(pi, v_anchor);
        let t_v = self.apply_bellman_policy(pi, v);
        ((1.0 - lambda) * t_anchor.inner() + lambda * t_v.inner()).into()
    }

    /// Iterates `M_k` from the anchor until the successive max-norm
    /// difference drops below `tol`, recording the empirical contraction
    /// modulus along the way.
    ///
    /// `M_k u - M_k w = lambda (T^pi u - T^pi w)`, so the modulus never
    /// exceeds `lambda * gamma`; the stop rule certifies that the result is
    /// within `lambda * gamma * tol / (1 - lambda * gamma)` of the true
    /// fixed point, which is `T_lambda^pi v_anchor`.
    pub fn mk_fixed_point(
        &self,
        pi: &Policy,
        lambda: f64,
        v_anchor: &ValueVec,
        tol: f64,
    ) -> Result<MkFixedPoint> {
        pi.validate(self)?;
        if !(0.0..=1.0).contains(&lambda) {
            return Err(LpiError::InvalidLambda(lambda));
        }
        if !(tol > 0.0) {
            return Err(LpiError::InvalidParameter("tol must be positive".into()));
        }
        if lambda == 0.0 {
            // M_k is the constant map onto T^pi v_anchor.
            return Ok(MkFixedPoint {
                value: self.apply_bellman_policy(pi, v_anchor),
                iterations: 1,
                measured_modulus: 0.0,
            });
        }
        let mut current = v_anchor.clone();
        let mut prev_diff: Option<f64> = None;
        let mut modulus: f64 = 0.0;
        for iteration in 1..=MK_ITERATION_CAP {
            let next = self.mk_apply(pi, lambda, v_anchor, &current);
            let diff = (next.inner() - current.inner()).amax();
            if let Some(prev) = prev_diff {
                if prev > 0.0 {
                    modulus = modulus.max(diff / prev);
                }
            }
            current = next;
            if diff < tol {
                return Ok(MkFixedPoint {
                    value: current,
                    iterations: iteration,
                    measured_modulus: modulus,
                });
            }
            prev_diff = Some(diff);
        }
        Err(LpiError::InnerIterationCap {
            cap: MK_ITERATION_CAP,
        })
    }
}
