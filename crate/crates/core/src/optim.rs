//! Learning regimes: per-task Adam from scratch, and first/second-order
//! Meta-SGD with K-step unrolled inner adaptation and learned per-parameter
//! step sizes.
//!
//! The inner update is `theta_{k+1} = theta_k - alpha (.) grad L_support`.
//! The outer objective is the query loss at the adapted parameters; its exact
//! gradient reverse-unrolls the inner steps, multiplying the running adjoint
//! by `(I - H_k diag(alpha))` via one support-loss HVP per step. The
//! first-order variant treats those Jacobians as the identity but keeps the
//! `-grad L_support (.) adjoint` term for the alpha gradient.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::episodes::{self, Episode, EpisodeError, GrammarConfig_alias, QUERY_SIZE, SUPPORT_SIZE};
use crate::grammar::GrammarConfig;
use crate::metrics::{ParamSnapshot, RunTrace, TraceKey, TraceRecord};
use crate::net::{self, Architecture, BatchLoss, NetError, Objective, ParamSet};
use crate::seeding::{self, STREAM_INIT, STREAM_TRAIN};

/// Samples consumed by one meta-training episode (support plus query, both
/// of which drive the meta-update).
pub const SAMPLES_PER_META_EPISODE: u64 = (SUPPORT_SIZE + QUERY_SIZE) as u64;
/// Samples consumed by one baseline Adam step (the full support batch).
pub const SAMPLES_PER_BASELINE_STEP: u64 = SUPPORT_SIZE as u64;

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("regime mismatch: {0}")]
    WrongRegime(&'static str),
    #[error("non-finite meta-gradient at episode {episode}")]
    NonFiniteMetaGradient { episode: u64 },
    #[error(transparent)]
    Episode(#[from] EpisodeError),
    #[error(transparent)]
    Net(#[from] NetError),
}

/// Whether the meta-gradient keeps the inner-step Hessian terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GradOrder {
    First,
    Second,
}

impl GradOrder {
    pub fn label(self) -> &'static str {
        match self {
            GradOrder::First => "first",
            GradOrder::Second => "second",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Regime {
    /// Fresh network per task, Adam on the support set.
    Sgd,
    /// Learned initialization and per-parameter rates.
    Meta(GradOrder),
}

/// Resolved hyperparameters for one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeConfig {
    pub regime: Regime,
    pub k_adapt: usize,
    /// Outer Adam rate for (theta_init, alpha).
    pub outer_lr: f64,
    /// Adam rate for the from-scratch baseline.
    pub baseline_lr: f64,
    pub baseline_steps: usize,
    pub meta_episodes: usize,
    /// Episodes per outer update.
    pub meta_batch: usize,
    pub alpha_init: f64,
    pub alpha_min: f64,
    pub alpha_max: f64,
    /// Outer steps between theta_init snapshots; 0 disables snapshots.
    pub snapshot_stride: usize,
    /// Apply Hessian terms only through this many most-recent inner steps;
    /// `None` unrolls fully.
    pub unroll_truncation: Option<usize>,
    /// Concept resamples allowed per episode.
    pub max_episode_attempts: usize,
}

impl RegimeConfig {
    pub fn sgd() -> Self {
        RegimeConfig { regime: Regime::Sgd, k_adapt: 0, ..Self::base() }
    }

    pub fn meta(order: GradOrder, k_adapt: usize) -> Self {
        RegimeConfig { regime: Regime::Meta(order), k_adapt, ..Self::base() }
    }

    fn base() -> Self {
        RegimeConfig {
            regime: Regime::Sgd,
            k_adapt: 0,
            outer_lr: 0.001,
            baseline_lr: 0.001,
            baseline_steps: 100,
            meta_episodes: 10_000,
            meta_batch: 16,
            alpha_init: 0.01,
            alpha_min: 1e-6,
            alpha_max: 1.0,
            snapshot_stride: 10,
            unroll_truncation: None,
            max_episode_attempts: 50,
        }
    }

    pub fn method_label(&self) -> &'static str {
        match self.regime {
            Regime::Sgd => "sgd",
            Regime::Meta(_) => "metasgd",
        }
    }

    pub fn order_label(&self) -> &'static str {
        match self.regime {
            Regime::Sgd => "-",
            Regime::Meta(order) => order.label(),
        }
    }
}

/// Bias-corrected Adam moments over one flat vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self::with_hyper(n, 0.9, 0.999, 1e-8)
    }

    pub fn with_hyper(n: usize, beta1: f64, beta2: f64, eps: f64) -> Self {
        AdamState { beta1, beta2, eps, step: 0, m: vec![0.0; n], v: vec![0.0; n] }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update in place.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        assert_eq!(params.len(), self.m.len(), "param length mismatch");
        assert_eq!(grad.len(), self.m.len(), "grad length mismatch");
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// The inner adaptation path: `theta_0 .. theta_K` plus the support loss at
/// each point (including the final one).
#[derive(Debug, Clone, PartialEq)]
pub struct InnerTrajectory {
    pub thetas: Vec<Vec<f64>>,
    pub support_losses: Vec<f64>,
}

impl InnerTrajectory {
    pub fn final_theta(&self) -> &[f64] {
        self.thetas.last().expect("trajectory has theta_0")
    }

    pub fn final_support_loss(&self) -> f64 {
        *self.support_losses.last().expect("trajectory has a loss")
    }
}

fn unroll<S: Objective + ?Sized>(
    support: &S,
    theta_start: &[f64],
    alpha: &[f64],
    k: usize,
) -> (InnerTrajectory, Vec<Vec<f64>>) {
    assert_eq!(theta_start.len(), alpha.len(), "alpha length mismatch");
    let mut thetas = Vec::with_capacity(k + 1);
    let mut losses = Vec::with_capacity(k + 1);
    let mut grads = Vec::with_capacity(k);
    thetas.push(theta_start.to_vec());
    for step in 0..k {
        let (loss, grad) = support.loss_grad(&thetas[step]);
        losses.push(loss);
        let next: Vec<f64> = thetas[step]
            .iter()
            .zip(alpha.iter().zip(grad.iter()))
            .map(|(t, (a, g))| t - a * g)
            .collect();
        grads.push(grad);
        thetas.push(next);
    }
    losses.push(support.loss(thetas.last().expect("theta_0 present")));
    (InnerTrajectory { thetas, support_losses: losses }, grads)
}

/// Runs K elementwise-scaled gradient steps on the support loss.
pub fn adapt<S: Objective + ?Sized>(
    support: &S,
    theta_start: &[f64],
    alpha: &[f64],
    k: usize,
) -> InnerTrajectory {
    unroll(support, theta_start, alpha, k).0
}

/// The outer gradient over `(theta_init, alpha)` for one task.
#[derive(Debug, Clone)]
pub struct MetaGradient {
    pub d_theta: Vec<f64>,
    pub d_alpha: Vec<f64>,
    pub query_loss: f64,
    pub trajectory: InnerTrajectory,
}

/// Exact (second-order) or identity-Jacobian (first-order) gradient of the
/// query loss at the adapted parameters, with respect to the initialization
/// and the per-parameter rates.
pub fn meta_grad<S: Objective + ?Sized, Q: Objective + ?Sized>(
    support: &S,
    query: &Q,
    theta_init: &[f64],
    alpha: &[f64],
    k: usize,
    order: GradOrder,
    truncation: Option<usize>,
) -> MetaGradient {
    let (trajectory, inner_grads) = unroll(support, theta_init, alpha, k);
    let (query_loss, query_grad) = query.loss_grad(trajectory.final_theta());

    // Adjoint of the query loss w.r.t. theta_k, walked back from k = K.
    let mut adjoint = query_grad;
    let mut d_alpha = vec![0.0; alpha.len()];
    for back in 0..k {
        let step = k - 1 - back; // inner step producing theta_{step+1}
        let g = &inner_grads[step];
        for i in 0..d_alpha.len() {
            d_alpha[i] -= g[i] * adjoint[i];
        }
        let apply_hessian = order == GradOrder::Second && truncation.map_or(true, |t| back < t);
        if apply_hessian {
            let scaled: Vec<f64> =
                alpha.iter().zip(adjoint.iter()).map(|(a, v)| a * v).collect();
            let hv = support.hvp(&trajectory.thetas[step], &scaled);
            for i in 0..adjoint.len() {
                adjoint[i] -= hv[i];
            }
        }
    }
    MetaGradient { d_theta: adjoint, d_alpha, query_loss, trajectory }
}

/// Meta-learned state: initialization, per-parameter rates, and the outer
/// Adam moments over their concatenation.
#[derive(Debug, Clone)]
pub struct MetaState {
    pub theta_init: ParamSet,
    pub alpha: ParamSet,
    pub adam: AdamState,
    pub outer_steps: u64,
    pub episodes_seen: u64,
    pub init_seed: u64,
}

impl MetaState {
    pub fn new(arch: Architecture, init_seed: u64, alpha_init: f64) -> Self {
        let theta_init = net::init_params(arch, init_seed);
        let n = theta_init.len();
        MetaState {
            theta_init,
            alpha: ParamSet::constant(arch, alpha_init),
            adam: AdamState::new(2 * n),
            outer_steps: 0,
            episodes_seen: 0,
            init_seed,
        }
    }

    pub fn arch(&self) -> Architecture {
        self.theta_init.arch()
    }
}

fn all_finite(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// Meta-trains on freshly sampled episode batches; one trace record per
/// episode, theta_init snapshots every `snapshot_stride` outer steps.
pub fn meta_train(
    rcfg: &RegimeConfig,
    gcfg: &GrammarConfig,
    arch: Architecture,
    run_seed: u64,
) -> Result<(MetaState, RunTrace), OptimError> {
    let order = match rcfg.regime {
        Regime::Meta(order) => order,
        Regime::Sgd => return Err(OptimError::WrongRegime("meta_train needs a Meta-SGD regime")),
    };
    assert_eq!(arch.input as u32, gcfg.features, "architecture width must match F");

    let mut state = MetaState::new(arch, seeding::derive_seed(run_seed, STREAM_INIT, 0), rcfg.alpha_init);
    let stream_cfg =
        GrammarConfig { seed: seeding::derive_seed(run_seed, STREAM_TRAIN, 0), ..gcfg.clone() };
    let mut trace = RunTrace::new(TraceKey {
        method: rcfg.method_label().to_string(),
        features: gcfg.features,
        depth: gcfg.max_depth,
        k_adapt: rcfg.k_adapt as u32,
        order: rcfg.order_label().to_string(),
        seed: run_seed,
    });
    if rcfg.snapshot_stride > 0 {
        trace
            .snapshots
            .push(ParamSnapshot { episode: 0, theta: state.theta_init.flat().to_vec() });
    }

    let n = arch.param_count();
    let mut batch_index = 0u64;
    while (state.episodes_seen as usize) < rcfg.meta_episodes {
        let remaining = rcfg.meta_episodes - state.episodes_seen as usize;
        let size = rcfg.meta_batch.max(1).min(remaining);
        let batch = episodes::make_batch(&stream_cfg, batch_index, size, rcfg.max_episode_attempts)?;
        batch_index += 1;

        let mut sum_d_theta = vec![0.0; n];
        let mut sum_d_alpha = vec![0.0; n];
        for ep in &batch.episodes {
            let support = BatchLoss::new(arch, &ep.support)?;
            let query = BatchLoss::new(arch, &ep.query)?;
            let mg = meta_grad(
                &support,
                &query,
                state.theta_init.flat(),
                state.alpha.flat(),
                rcfg.k_adapt,
                order,
                rcfg.unroll_truncation,
            );
            state.episodes_seen += 1;
            if !all_finite(&mg.d_theta) || !all_finite(&mg.d_alpha) {
                return Err(OptimError::NonFiniteMetaGradient { episode: state.episodes_seen });
            }
            let adapted = ParamSet::from_flat(arch, mg.trajectory.final_theta().to_vec())?;
            trace.records.push(TraceRecord {
                episode: state.episodes_seen,
                cum_samples: state.episodes_seen * SAMPLES_PER_META_EPISODE,
                support_loss: mg.trajectory.final_support_loss(),
                query_loss: mg.query_loss,
                query_acc: net::accuracy(&adapted, &ep.query)?,
            });
            for i in 0..n {
                sum_d_theta[i] += mg.d_theta[i];
                sum_d_alpha[i] += mg.d_alpha[i];
            }
        }

        let inv = 1.0 / size as f64;
        let mut concat = Vec::with_capacity(2 * n);
        concat.extend_from_slice(state.theta_init.flat());
        concat.extend_from_slice(state.alpha.flat());
        let mut grad = Vec::with_capacity(2 * n);
        grad.extend(sum_d_theta.iter().map(|g| g * inv));
        grad.extend(sum_d_alpha.iter().map(|g| g * inv));
        state.adam.step(&mut concat, &grad, rcfg.outer_lr);
        state.theta_init.flat_mut().copy_from_slice(&concat[..n]);
        for (a, v) in state.alpha.flat_mut().iter_mut().zip(concat[n..].iter()) {
            *a = v.clamp(rcfg.alpha_min, rcfg.alpha_max);
        }
        state.outer_steps += 1;

        if rcfg.snapshot_stride > 0 && state.outer_steps % rcfg.snapshot_stride as u64 == 0 {
            trace.snapshots.push(ParamSnapshot {
                episode: state.episodes_seen,
                theta: state.theta_init.flat().to_vec(),
            });
        }
    }

    if rcfg.snapshot_stride > 0
        && trace.snapshots.last().map(|s| s.episode) != Some(state.episodes_seen)
    {
        trace.snapshots.push(ParamSnapshot {
            episode: state.episodes_seen,
            theta: state.theta_init.flat().to_vec(),
        });
    }
    Ok((state, trace))
}

/// Trains a fresh network on one episode's support set with Adam, recording
/// query metrics at the initialization and after every step. Snapshots are
/// kept at the requested stride (plus the endpoints).
pub fn eval_baseline(
    rcfg: &RegimeConfig,
    arch: Architecture,
    episode: &Episode,
    snapshot_every: Option<usize>,
) -> Result<RunTrace, OptimError> {
    if rcfg.regime != Regime::Sgd {
        return Err(OptimError::WrongRegime("eval_baseline needs the SGD regime"));
    }
    assert_eq!(arch.input as u32, episode.features, "architecture width must match F");

    let mut theta = net::init_params(arch, seeding::derive_seed(episode.seed, STREAM_INIT, 0));
    let support = BatchLoss::new(arch, &episode.support)?;
    let query = BatchLoss::new(arch, &episode.query)?;
    let mut adam = AdamState::new(theta.len());

    let mut trace = RunTrace::new(TraceKey {
        method: "sgd".to_string(),
        features: episode.features,
        depth: episode.max_depth,
        k_adapt: 0,
        order: "-".to_string(),
        seed: episode.seed,
    });

    let snapshot_due = |step: usize| match snapshot_every {
        Some(stride) if stride > 0 => step % stride == 0 || step == rcfg.baseline_steps,
        _ => false,
    };
    let mut record = |step: usize, theta: &ParamSet, trace: &mut RunTrace| -> Result<(), OptimError> {
        trace.records.push(TraceRecord {
            // Records are per optimizer step; `episode` numbers them from 1
            // so downstream grids stay strictly increasing.
            episode: step as u64 + 1,
            cum_samples: step as u64 * SAMPLES_PER_BASELINE_STEP,
            support_loss: support.loss(theta.flat()),
            query_loss: query.loss(theta.flat()),
            query_acc: net::accuracy(theta, &episode.query)?,
        });
        if snapshot_due(step) {
            trace
                .snapshots
                .push(ParamSnapshot { episode: step as u64, theta: theta.flat().to_vec() });
        }
        Ok(())
    };

    record(0, &theta, &mut trace)?;
    for step in 1..=rcfg.baseline_steps {
        let (_, grad) = support.loss_grad(theta.flat());
        adam.step(theta.flat_mut(), &grad, rcfg.baseline_lr);
        record(step, &theta, &mut trace)?;
    }
    Ok(trace)
}

/// Post-adaptation accuracy of one task during evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaskEval {
    pub accuracy: f64,
    pub query_loss: f64,
    pub final_support_loss: f64,
}

/// Evaluation over held-out tasks: the full distribution plus mean and
/// standard error.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub per_task: Vec<TaskEval>,
    pub mean_acc: f64,
    pub stderr_acc: f64,
}

/// Adapts from the meta-learned state on each episode's support set and
/// reports query accuracy after K steps.
pub fn meta_eval(
    state: &MetaState,
    episodes: &[Episode],
    k: usize,
) -> Result<EvalReport, OptimError> {
    let arch = state.arch();
    let mut per_task = Vec::with_capacity(episodes.len());
    for ep in episodes {
        let support = BatchLoss::new(arch, &ep.support)?;
        let traj = adapt(&support, state.theta_init.flat(), state.alpha.flat(), k);
        let adapted = ParamSet::from_flat(arch, traj.final_theta().to_vec())?;
        let query = BatchLoss::new(arch, &ep.query)?;
        per_task.push(TaskEval {
            accuracy: net::accuracy(&adapted, &ep.query)?,
            query_loss: query.loss(adapted.flat()),
            final_support_loss: traj.final_support_loss(),
        });
    }
    let accs: Vec<f64> = per_task.iter().map(|t| t.accuracy).collect();
    let n = accs.len() as f64;
    let mean = accs.iter().sum::<f64>() / n.max(1.0);
    let stderr = if accs.len() < 2 {
        0.0
    } else {
        let var = accs.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / (n - 1.0);
        (var / n).sqrt()
    };
    Ok(EvalReport { per_task, mean_acc: mean, stderr_acc: stderr })
}
