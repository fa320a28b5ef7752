//! Teacher training with the flow-matching objective `‖F(x_t, t) − (ε − x)‖²`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::datasets::{CompositionSample, ToyDistribution};
use crate::error::{Error, Result};
use crate::networks::{Architecture, ConditionToken, SeqCond, VelocityNet};
use crate::optim::{cosine_lr, AdamWConfig, OptimState};
use crate::schedule::{interpolate_rows, velocity_target, T_MAX, T_MIN};
use crate::tensor::Tensor;

/// A training batch: data rows, conditioning, and the sample each row belongs to.
#[derive(Clone, Debug)]
pub struct Batch<C> {
    pub x: Tensor,
    pub cond: C,
    /// `groups[i]` is the sample index of row `i`; rows of one sample share `t`.
    pub groups: Vec<usize>,
    pub samples: usize,
}

impl<C> Batch<C> {
    /// Expands per-sample values to per-row values.
    pub fn expand(&self, per_sample: &[f64]) -> Vec<f64> {
        self.groups.iter().map(|&g| per_sample[g]).collect()
    }
}

/// Source of training batches for architecture `A`.
pub trait DataSource<A: Architecture> {
    /// `n` samples; each condition token is replaced by null with
    /// probability `drop_prob`.
    fn batch(&mut self, n: usize, drop_prob: f64, rng: &mut ChaCha8Rng) -> Result<Batch<A::Cond>>;
}

fn maybe_drop(c: ConditionToken, p: f64, rng: &mut ChaCha8Rng) -> ConditionToken {
    if p > 0.0 && rng.random::<f64>() < p {
        ConditionToken::NULL
    } else {
        c
    }
}

fn point_batch(x: Tensor, token: ConditionToken, drop_prob: f64, rng: &mut ChaCha8Rng) -> Batch<Vec<ConditionToken>> {
    let n = x.rows();
    let cond = (0..n).map(|_| maybe_drop(token, drop_prob, rng)).collect();
    Batch {
        x,
        cond,
        groups: (0..n).collect(),
        samples: n,
    }
}

/// Fresh draws from a toy distribution, all with one condition token.
#[derive(Clone, Debug)]
pub struct ToySource {
    pub dist: ToyDistribution,
    pub token: ConditionToken,
}

impl<A: Architecture<Cond = Vec<ConditionToken>>> DataSource<A> for ToySource {
    fn batch(&mut self, n: usize, drop_prob: f64, rng: &mut ChaCha8Rng) -> Result<Batch<Vec<ConditionToken>>> {
        let x = self.dist.sample_with(n, rng)?;
        Ok(point_batch(x, self.token, drop_prob, rng))
    }
}

/// Rows drawn with replacement from a fixed pool of points.
#[derive(Clone, Debug)]
pub struct PoolSource {
    pub pool: Tensor,
    pub token: ConditionToken,
}

impl<A: Architecture<Cond = Vec<ConditionToken>>> DataSource<A> for PoolSource {
    fn batch(&mut self, n: usize, drop_prob: f64, rng: &mut ChaCha8Rng) -> Result<Batch<Vec<ConditionToken>>> {
        if self.pool.rows() == 0 {
            return Err(Error::invalid("empty sample pool"));
        }
        let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..self.pool.rows())).collect();
        let x = self.pool.gather_rows(&idx)?;
        Ok(point_batch(x, self.token, drop_prob, rng))
    }
}

/// Composition samples drawn with replacement; rows are target tokens.
#[derive(Clone, Debug)]
pub struct CompositionSource {
    pub samples: Vec<CompositionSample>,
}

impl<A: Architecture<Cond = SeqCond>> DataSource<A> for CompositionSource {
    fn batch(&mut self, n: usize, drop_prob: f64, rng: &mut ChaCha8Rng) -> Result<Batch<SeqCond>> {
        if self.samples.is_empty() {
            return Err(Error::invalid("empty composition dataset"));
        }
        let mut seqs = Vec::with_capacity(n);
        let mut tokens = Vec::with_capacity(n);
        for _ in 0..n {
            let s = &self.samples[rng.random_range(0..self.samples.len())];
            seqs.push(s.unified()?);
            tokens.push(maybe_drop(s.cond, drop_prob, rng));
        }
        let (x, cond) = SeqCond::from_sequences(&seqs, &tokens)?;
        let groups = cond.sample_of_row();
        Ok(Batch {
            x,
            cond,
            groups,
            samples: n,
        })
    }
}

/// Per-sample times uniform on `[lo, hi]`.
pub fn sample_times(n: usize, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| lo + (hi - lo) * rng.random::<f64>()).collect()
}

/// Flow-matching loss value.
pub fn fm_loss<A: Architecture>(
    net: &VelocityNet<A>,
    x: &Tensor,
    eps: &Tensor,
    t: &[f64],
    cond: &A::Cond,
) -> Result<f64> {
    let x_t = interpolate_rows(x, eps, t)?;
    let target = velocity_target(x, eps)?;
    net.predict(&x_t, t, cond)?.mse(&target)
}

/// Gradient-carrying evaluation of a regression loss `mse(F(x_t, t), target)`
/// with the gradient written into `net.params`; returns the loss value.
pub fn regression_grad<A: Architecture>(
    net: &mut VelocityNet<A>,
    x_t: &Tensor,
    t: &[f64],
    cond: &A::Cond,
    target: &Tensor,
) -> Result<f64> {
    let tape = Tape::new();
    let input = tape.constant(x_t.clone());
    let (out, bound) = net.forward_trainable(&tape, input, t, cond)?;
    let loss = out.mse(tape.constant(target.clone()))?;
    let grads = tape.backward(loss)?;
    net.params.collect_grads(&bound, &grads)?;
    Ok(loss.item())
}

/// Flow-matching loss with gradient into `net.params`.
pub fn fm_loss_grad<A: Architecture>(
    net: &mut VelocityNet<A>,
    x: &Tensor,
    eps: &Tensor,
    t: &[f64],
    cond: &A::Cond,
) -> Result<f64> {
    let x_t = interpolate_rows(x, eps, t)?;
    let target = velocity_target(x, eps)?;
    regression_grad(net, &x_t, t, cond, &target)
}

/// Teacher training schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub optim: AdamWConfig,
    pub cosine: bool,
    /// Probability of replacing the condition by the null token.
    pub cfg_dropout: f64,
    pub t_min: f64,
    pub t_max: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 20_000,
            batch: 256,
            optim: AdamWConfig::default(),
            cosine: true,
            cfg_dropout: 0.1,
            t_min: T_MIN,
            t_max: T_MAX,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.optim.validate()?;
        if self.batch == 0 || !(0.0..=1.0).contains(&self.cfg_dropout) || !(0.0 < self.t_min && self.t_min < self.t_max && self.t_max <= 1.0) {
            return Err(Error::Config(format!("invalid training schedule {self:?}")));
        }
        Ok(())
    }
}

/// `(step, loss)` pairs.
pub type LossCurve = Vec<(usize, f64)>;

pub struct TrainOutcome<A> {
    pub net: VelocityNet<A>,
    pub optim: OptimState,
    pub losses: LossCurve,
}

/// One flow-matching AdamW step on `net`; returns the pre-update loss.
#[allow(clippy::too_many_arguments)]
pub fn fm_step<A: Architecture>(
    net: &mut VelocityNet<A>,
    opt: &mut OptimState,
    x: &Tensor,
    cond: &A::Cond,
    t: &[f64],
    eps: &Tensor,
    lr: f64,
) -> Result<f64> {
    let loss = fm_loss_grad(net, x, eps, t, cond)?;
    opt.step_with_lr(&mut net.params, lr)?;
    Ok(loss)
}

/// Trains `net` in place with the flow-matching objective.
pub fn train_teacher<A: Architecture, S: DataSource<A>>(
    net: VelocityNet<A>,
    source: &mut S,
    config: &TrainConfig,
    seed: u64,
) -> Result<TrainOutcome<A>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = net;
    let mut opt = OptimState::new(config.optim);
    let mut losses = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let batch = source.batch(config.batch, config.cfg_dropout, &mut rng)?;
        let t = batch.expand(&sample_times(batch.samples, config.t_min, config.t_max, &mut rng));
        let eps = Tensor::randn(batch.x.shape().to_vec(), &mut rng);
        let lr = if config.cosine {
            cosine_lr(config.optim.lr, step, config.steps)
        } else {
            config.optim.lr
        };
        let loss = fm_step(&mut net, &mut opt, &batch.x, &batch.cond, &t, &eps, lr)
            .map_err(|e| diverged(e, "flow matching", step))?;
        if !loss.is_finite() {
            return Err(Error::Diverged {
                what: "flow matching",
                step,
            });
        }
        losses.push((step, loss));
    }
    Ok(TrainOutcome {
        net,
        optim: opt,
        losses,
    })
}

pub(crate) fn diverged(e: Error, what: &'static str, step: usize) -> Error {
    match e {
        Error::NonFinite(_) => Error::Diverged { what, step },
        other => other,
    }
}
