//! Consistency distillation in the velocity parameterization: the student
//! regresses onto `ε − x − t·dF_{θ⁻}/dt`, with the tangent taken by central
//! finite differences along the conditional path.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::networks::{Architecture, VelocityNet};
use crate::optim::{cosine_lr, AdamWConfig, OptimState};
use crate::params::ParamSet;
use crate::samplers::VelocityField;
use crate::schedule::{interpolate_rows, velocity_target};
use crate::tensor::Tensor;
use crate::train::{diverged, regression_grad, sample_times, DataSource, LossCurve};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FdConfig {
    pub epsilon: f64,
}

impl Default for FdConfig {
    fn default() -> Self {
        Self { epsilon: 5e-3 }
    }
}

impl FdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon < 0.5) {
            return Err(Error::Config(format!("fd epsilon {} outside (0, 0.5)", self.epsilon)));
        }
        Ok(())
    }
}

/// Central difference of `F(x_t, t)` along `x_t = (1 − t)x + t·ε`.
pub fn tangent_fd<F>(
    field: &F,
    x: &Tensor,
    eps: &Tensor,
    t: &[f64],
    cond: &F::Cond,
    fd: FdConfig,
) -> Result<Tensor>
where
    F: VelocityField + Sync,
    F::Cond: Sync,
{
    fd.validate()?;
    let h = fd.epsilon;
    if let Some(&bad) = t.iter().find(|&&t| t - h < 0.0 || t + h > 1.0) {
        return Err(Error::invalid(format!("t = {bad} too close to the boundary for fd epsilon {h}")));
    }
    let t_plus: Vec<f64> = t.iter().map(|t| t + h).collect();
    let t_minus: Vec<f64> = t.iter().map(|t| t - h).collect();
    let eval = |ts: &[f64]| -> Result<Tensor> {
        let x_t = interpolate_rows(x, eps, ts)?;
        field.velocity(&x_t, ts, cond, 1.0)
    };
    let (plus, minus) = Exec::default().join(|| eval(&t_plus), || eval(&t_minus));
    plus?.zip_map(&minus?, "tangent_fd", |p, m| (p - m) / (2.0 * h))
}

/// Regression target `ε − x − t·clip(dF/dt)`, built from plain tensors so no
/// gradient can reach the student.
#[allow(clippy::too_many_arguments)]
pub fn cm_target<F>(
    field: &F,
    x: &Tensor,
    eps: &Tensor,
    t: &[f64],
    cond: &F::Cond,
    fd: FdConfig,
    clip: f64,
) -> Result<Tensor>
where
    F: VelocityField + Sync,
    F::Cond: Sync,
{
    let tangent = tangent_fd(field, x, eps, t, cond, fd)?.map(|v| v.clamp(-clip, clip));
    let base = velocity_target(x, eps)?;
    base.sub(&tangent.scale_rows(t)?)
}

/// `mean ‖F_θ(x_t, t) − target‖²`.
pub fn cm_loss<A: Architecture>(
    student: &VelocityNet<A>,
    x: &Tensor,
    eps: &Tensor,
    t: &[f64],
    cond: &A::Cond,
    target: &Tensor,
) -> Result<f64> {
    let x_t = interpolate_rows(x, eps, t)?;
    student.predict(&x_t, t, cond)?.mse(target)
}

/// [`cm_loss`] with its gradient written into `student.params`.
pub fn cm_loss_grad<A: Architecture>(
    student: &mut VelocityNet<A>,
    x: &Tensor,
    eps: &Tensor,
    t: &[f64],
    cond: &A::Cond,
    target: &Tensor,
) -> Result<f64> {
    let x_t = interpolate_rows(x, eps, t)?;
    regression_grad(student, &x_t, t, cond, target)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CmConfig {
    pub steps: usize,
    pub batch: usize,
    pub optim: AdamWConfig,
    pub cosine: bool,
    pub fd: FdConfig,
    /// Elementwise bound on the tangent.
    pub tangent_clip: f64,
    /// `None` refreshes θ⁻ as a plain copy every step.
    pub ema_decay: Option<f64>,
    pub t_min: f64,
    pub t_max: f64,
    /// Point datasets: number of 100-step teacher samples used as training
    /// data (0 trains on the dataset itself).
    pub teacher_pool: usize,
    /// Guidance used when drawing the teacher pool.
    pub pool_cfg_scale: f64,
}

impl Default for CmConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch: 256,
            optim: AdamWConfig::default().with_lr(1e-4),
            cosine: true,
            fd: FdConfig::default(),
            tangent_clip: 10.0,
            ema_decay: None,
            t_min: 5e-3,
            t_max: 1.0 - 5e-3,
            teacher_pool: 4096,
            pool_cfg_scale: 1.0,
        }
    }
}

impl CmConfig {
    pub fn validate(&self) -> Result<()> {
        self.optim.validate()?;
        self.fd.validate()?;
        let h = self.fd.epsilon;
        if self.batch == 0 || self.tangent_clip <= 0.0 {
            return Err(Error::Config("cm batch and tangent_clip must be positive".into()));
        }
        if !(self.t_min - h >= 0.0 && self.t_min < self.t_max && self.t_max + h <= 1.0) {
            return Err(Error::Config(format!(
                "cm time range [{}, {}] must keep t ± {h} inside [0, 1]",
                self.t_min, self.t_max
            )));
        }
        if self.pool_cfg_scale < 1.0 {
            return Err(Error::Config("cm pool_cfg_scale must be ≥ 1".into()));
        }
        if let Some(d) = self.ema_decay {
            if !(0.0..1.0).contains(&d) {
                return Err(Error::Config(format!("ema decay {d} outside [0, 1)")));
            }
        }
        Ok(())
    }
}

pub struct CmOutcome<A> {
    pub student: VelocityNet<A>,
    pub optim: OptimState,
    pub losses: LossCurve,
}

/// Distills `teacher` into a student initialised from it. Batches come from
/// `source`; conditioning is never dropped here.
pub fn distill_cm<A: Architecture, S: DataSource<A>>(
    teacher: &VelocityNet<A>,
    source: &mut S,
    config: &CmConfig,
    seed: u64,
) -> Result<CmOutcome<A>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut student = teacher.clone();
    let mut target_params: ParamSet = student.params.snapshot();
    let mut opt = OptimState::new(config.optim);
    let mut losses = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        match config.ema_decay {
            None => target_params = student.params.snapshot(),
            Some(d) => target_params.ema_from(&student.params, d)?,
        }
        let minus = VelocityNet::from_params(student.arch.clone(), target_params.clone());
        let batch = source.batch(config.batch, 0.0, &mut rng)?;
        let t = batch.expand(&sample_times(batch.samples, config.t_min, config.t_max, &mut rng));
        let eps = Tensor::randn(batch.x.shape().to_vec(), &mut rng);
        let lr = if config.cosine {
            cosine_lr(config.optim.lr, step, config.steps)
        } else {
            config.optim.lr
        };
        let loss = (|| {
            let target = cm_target(&minus, &batch.x, &eps, &t, &batch.cond, config.fd, config.tangent_clip)?;
            let loss = cm_loss_grad(&mut student, &batch.x, &eps, &t, &batch.cond, &target)?;
            opt.step_with_lr(&mut student.params, lr)?;
            Ok(loss)
        })()
        .map_err(|e| diverged(e, "consistency distillation", step))?;
        if !loss.is_finite() {
            return Err(Error::Diverged {
                what: "consistency distillation",
                step,
            });
        }
        losses.push((step, loss));
    }
    Ok(CmOutcome {
        student,
        optim: opt,
        losses,
    })
}
