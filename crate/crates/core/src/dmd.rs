//! Distribution-matching distillation: a fake-score network tracks the
//! generator's distribution, and the generator follows the weighted score
//! difference `g = ((1 − t)/t)(F_teacher^CFG − F_φ)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::networks::{Architecture, VelocityNet};
use crate::optim::{cosine_lr, AdamWConfig, OptimState};
use crate::samplers::{consistency_chain, consistency_sample, renoise_draws, VelocityField};
use crate::schedule::interpolate_rows;
use crate::tensor::Tensor;
use crate::train::{diverged, fm_step, sample_times, DataSource};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DmdConfig {
    /// Generator updates.
    pub steps: usize,
    pub batch: usize,
    pub cfg_scale: f64,
    pub gen_lr: f64,
    pub fake_lr: f64,
    /// Fake-score updates per generator update.
    pub ratio: usize,
    /// Generator sampling steps.
    pub nfe: usize,
    pub t_min: f64,
    pub t_max: f64,
    /// Fake-score updates before the first generator update, with the
    /// learning rate annealed from `fake_warmup_lr` to 0.
    pub fake_warmup: usize,
    pub fake_warmup_lr: f64,
    /// Betas, eps and weight decay; the learning rate field is ignored.
    pub optim: AdamWConfig,
}

impl Default for DmdConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            batch: 256,
            cfg_scale: 6.0,
            gen_lr: 2e-6,
            fake_lr: 4e-7,
            ratio: 5,
            nfe: 8,
            t_min: 0.02,
            t_max: 0.98,
            fake_warmup: 0,
            fake_warmup_lr: 1e-4,
            optim: AdamWConfig::default(),
        }
    }
}

impl DmdConfig {
    pub fn validate(&self) -> Result<()> {
        self.optim.validate()?;
        let bad = |m: &str| Err(Error::Config(format!("dmd: {m}")));
        if self.cfg_scale < 1.0 {
            return bad("cfg_scale must be ≥ 1");
        }
        if self.ratio == 0 || self.nfe == 0 || self.batch == 0 {
            return bad("ratio, nfe and batch must be ≥ 1");
        }
        if !(self.gen_lr > 0.0 && self.fake_lr > 0.0 && self.fake_warmup_lr > 0.0) {
            return bad("learning rates must be positive");
        }
        if !(0.0 < self.t_min && self.t_min < self.t_max && self.t_max <= 1.0) {
            return bad("time range must satisfy 0 < t_min < t_max ≤ 1");
        }
        Ok(())
    }
}

/// `G_θ(ε)`: the `steps`-step consistency sampler, without gradient.
pub fn generate_few_step<A: Architecture>(
    student: &VelocityNet<A>,
    eps: &Tensor,
    steps: usize,
    cond: &A::Cond,
    seed: u64,
) -> Result<Tensor> {
    Ok(consistency_sample(student, eps, steps, cond, seed)?.samples)
}

/// One flow-matching step of the fake score on detached generator samples.
#[allow(clippy::too_many_arguments)]
pub fn fake_score_update<A: Architecture>(
    fake: &mut VelocityNet<A>,
    opt: &mut OptimState,
    samples: &Tensor,
    cond: &A::Cond,
    t: &[f64],
    eps: &Tensor,
    lr: f64,
) -> Result<f64> {
    fm_step(fake, opt, samples, cond, t, eps, lr)
}

/// `g = ((1 − t)/t)(F_teacher^CFG(x_t, t) − F_φ(x_t, t))` at
/// `x_t = (1 − t)x + t·ε̂`.
#[allow(clippy::too_many_arguments)]
pub fn dmd_gradient<T, P>(
    teacher: &T,
    fake: &P,
    x: &Tensor,
    t: &[f64],
    cond: &T::Cond,
    w: f64,
    eps_hat: &Tensor,
) -> Result<Tensor>
where
    T: VelocityField + Sync,
    P: VelocityField<Cond = T::Cond> + Sync,
    T::Cond: Sync,
{
    if let Some(&bad) = t.iter().find(|&&t| !(t > 0.0 && t <= 1.0)) {
        return Err(Error::invalid(format!("dmd_gradient needs t in (0, 1], got {bad}")));
    }
    let x_t = interpolate_rows(x, eps_hat, t)?;
    let (f_t, f_p) = Exec::default().join(
        || teacher.velocity(&x_t, t, cond, w),
        || fake.velocity(&x_t, t, cond, 1.0),
    );
    let weights: Vec<f64> = t.iter().map(|t| (1.0 - t) / t).collect();
    f_t?.sub(&f_p?)?.scale_rows(&weights)
}

/// `½‖G − stopgrad(G) + g‖²` averaged over rows; its value is `½‖g‖²/rows`
/// and its gradient pushes `G` along `−g`.
pub fn dmd_loss_var<'t>(generated: Var<'t>, g: &Tensor) -> Result<Var<'t>> {
    let tape = generated.tape();
    let rows = generated.shape()[0].max(1) as f64;
    generated
        .sub(generated.detach())?
        .add(tape.constant(g.clone()))?
        .sum_squares()?
        .scale(0.5 / rows)
}

/// Value of [`dmd_loss_var`].
pub fn dmd_loss(generated: &Tensor, g: &Tensor) -> Result<f64> {
    generated.check_same_shape(g, "dmd_loss")?;
    Ok(0.5 * g.data().iter().map(|v| v * v).sum::<f64>() / generated.rows().max(1) as f64)
}

/// `(step, generator loss, mean fake-score loss)`.
pub type DmdCurve = Vec<(usize, f64, f64)>;

pub struct DmdOutcome<A> {
    pub student: VelocityNet<A>,
    pub fake: VelocityNet<A>,
    pub losses: DmdCurve,
}

/// Alternates `ratio` fake-score updates with one generator update. The
/// source only supplies conditioning; its data rows set the sample shape.
pub fn distill_dmd<A: Architecture, S: DataSource<A>>(
    cm_student: &VelocityNet<A>,
    teacher: &VelocityNet<A>,
    source: &mut S,
    config: &DmdConfig,
    seed: u64,
) -> Result<DmdOutcome<A>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut student = cm_student.clone();
    let mut fake = teacher.clone();
    let mut gen_opt = OptimState::new(config.optim);
    let mut fake_opt = OptimState::new(config.optim);
    let mut losses = Vec::with_capacity(config.steps);

    let mut fake_round = |source: &mut S, student: &VelocityNet<A>, fake: &mut VelocityNet<A>, rng: &mut ChaCha8Rng, lr: f64| -> Result<f64> {
        let batch = source.batch(config.batch, 0.0, rng)?;
        let eps = Tensor::randn(batch.x.shape().to_vec(), rng);
        let samples = generate_few_step(student, &eps, config.nfe, &batch.cond, rng.random())?;
        let t = batch.expand(&sample_times(batch.samples, config.t_min, config.t_max, rng));
        let noise = Tensor::randn(batch.x.shape().to_vec(), rng);
        fake_score_update(fake, &mut fake_opt, &samples, &batch.cond, &t, &noise, lr)
    };

    for i in 0..config.fake_warmup {
        fake_round(source, &student, &mut fake, &mut rng, cosine_lr(config.fake_warmup_lr, i, config.fake_warmup)).map_err(|e| diverged(e, "fake score warmup", i))?;
    }
    for step in 0..config.steps {
        let mut fake_loss = 0.0;
        for _ in 0..config.ratio {
            fake_loss += fake_round(source, &student, &mut fake, &mut rng, config.fake_lr).map_err(|e| diverged(e, "fake score", step))?;
        }
        fake_loss /= config.ratio as f64;

        let batch = source.batch(config.batch, 0.0, &mut rng)?;
        let shape = batch.x.shape().to_vec();
        let eps = Tensor::randn(shape.clone(), &mut rng);
        let noise = renoise_draws(shape[0], shape[1], config.nfe, rng.random());
        let t = batch.expand(&sample_times(batch.samples, config.t_min, config.t_max, &mut rng));
        let eps_hat = Tensor::randn(shape, &mut rng);
        let gen_loss = (|| {
            let tape = Tape::new();
            let bound = tape.bind(&student.params);
            let generated = consistency_chain(&student.arch, &bound, tape.constant(eps), config.nfe, &batch.cond, &noise)?;
            let g = dmd_gradient(teacher, &fake, &generated.value(), &t, &batch.cond, config.cfg_scale, &eps_hat)?;
            let loss = dmd_loss_var(generated, &g)?;
            let grads = tape.backward(loss)?;
            student.params.collect_grads(&bound, &grads)?;
            gen_opt.step_with_lr(&mut student.params, config.gen_lr)?;
            Ok(loss.item())
        })()
        .map_err(|e| diverged(e, "dmd generator", step))?;
        if !(gen_loss.is_finite() && fake_loss.is_finite()) {
            return Err(Error::Diverged { what: "dmd", step });
        }
        losses.push((step, gen_loss, fake_loss));
    }
    Ok(DmdOutcome { student, fake, losses })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::ToyDistribution;
    use crate::networks::{ConditionToken, PointNet, PointNetSpec};
    use crate::samplers::FnField;
    use crate::schedule::cm_apply;
    use crate::schedule::TimePoint;
    use crate::train::ToySource;

    fn net(seed: u64) -> VelocityNet<PointNet> {
        let arch = PointNet::new(PointNetSpec { hidden: 16, depth: 2, ..Default::default() }).unwrap();
        VelocityNet::new(arch, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    fn randn(rows: usize, cols: usize, seed: u64) -> Tensor {
        Tensor::randn(vec![rows, cols], &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn one_step_generator_is_single_jump() {
        let n = net(1);
        let eps = randn(8, 2, 2);
        let cond = vec![ConditionToken(1); 8];
        let x = generate_few_step(&n, &eps, 1, &cond, 0).unwrap();
        let f = n.predict(&eps, &[1.0; 8], &cond).unwrap();
        assert_eq!(x, cm_apply(&f, &eps, TimePoint::new(1.0).unwrap()).unwrap());
    }

    #[test]
    fn shared_weights_give_exact_zero() {
        let n = net(3);
        let x = randn(16, 2, 4);
        let e = randn(16, 2, 5);
        let t: Vec<f64> = (0..16).map(|i| 0.02 + 0.06 * i as f64).collect();
        let g = dmd_gradient(&n, &n.clone(), &x, &t, &vec![ConditionToken(1); 16], 1.0, &e).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn weight_is_one_at_half_and_zero_time_is_rejected() {
        let a = FnField(|x: &Tensor, _: &[f64]| Ok(x.map(|_| 3.0)));
        let b = FnField(|x: &Tensor, _: &[f64]| Ok(x.map(|_| 1.0)));
        let x = randn(1, 2, 1);
        let g = dmd_gradient(&a, &b, &x, &[0.5], &(), 1.0, &x).unwrap();
        assert_eq!(g.data(), &[2.0, 2.0]);
        assert!(dmd_gradient(&a, &b, &x, &[0.0], &(), 1.0, &x).is_err());
    }

    #[test]
    fn shifted_generator_gradient_tracks_mean_shift() {
        // generator N(μ, I), teacher N(0, I): E[g] ∥ μ, so descent moves samples back toward 0
        let mu = [1.0, -0.5];
        let teacher_dist = ToyDistribution::StandardGaussian { dim: 2 };
        let gen_dist = ToyDistribution::GaussianMixture { means: vec![mu.to_vec()], stds: vec![1.0], weights: vec![1.0] };
        let teacher = FnField(|x: &Tensor, t: &[f64]| teacher_dist.oracle_velocity(x, t));
        let fake = FnField(|x: &Tensor, t: &[f64]| gen_dist.oracle_velocity(x, t));
        let n = 4000;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = gen_dist.sample_with(n, &mut rng).unwrap();
        let e = Tensor::randn(vec![n, 2], &mut rng);
        let t = sample_times(n, 0.02, 0.98, &mut rng);
        let g = dmd_gradient(&teacher, &fake, &x, &t, &(), 1.0, &e).unwrap();
        let mean: Vec<f64> = (0..2).map(|c| (0..n).map(|r| g.data()[r * 2 + c]).sum::<f64>() / n as f64).collect();
        let dot = mean[0] * mu[0] + mean[1] * mu[1];
        let cos = dot / (mean.iter().map(|v| v * v).sum::<f64>().sqrt() * (1.25f64).sqrt());
        assert!(cos > 0.99, "{mean:?}");
    }

    #[test]
    fn loss_value_and_gradient_on_scalar_generator() {
        let tape = Tape::new();
        let u = tape.leaf(Tensor::matrix(1, 1, vec![0.8]).unwrap());
        let g = Tensor::matrix(1, 1, vec![-0.3]).unwrap();
        let loss = dmd_loss_var(u, &g).unwrap();
        assert_eq!(loss.item(), 0.5 * 0.09);
        assert_eq!(dmd_loss(&u.value(), &g).unwrap(), loss.item());
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(u).unwrap().item(), -0.3);
    }

    #[test]
    fn zero_g_gives_zero_gradient() {
        let tape = Tape::new();
        let u = tape.leaf(randn(3, 2, 7));
        let loss = dmd_loss_var(u, &Tensor::zeros(vec![3, 2])).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(u).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fake_update_leaves_generator_alone() {
        let student = net(1);
        let mut fake = net(2);
        let before = student.params.clone();
        let mut opt = OptimState::new(AdamWConfig::default());
        let cond = vec![ConditionToken(1); 8];
        let samples = generate_few_step(&student, &randn(8, 2, 3), 2, &cond, 4).unwrap();
        let fake_before = fake.params.clone();
        fake_score_update(&mut fake, &mut opt, &samples, &cond, &[0.5; 8], &randn(8, 2, 5), 1e-3).unwrap();
        assert_eq!(student.params, before);
        assert_ne!(fake.params, fake_before);
    }

    #[test]
    fn short_run_is_seeded_and_finite() {
        let teacher = net(5);
        let cfg = DmdConfig { steps: 3, batch: 16, ratio: 2, nfe: 2, gen_lr: 1e-3, fake_lr: 2e-4, ..Default::default() };
        let run = || {
            let mut src = ToySource { dist: ToyDistribution::StandardGaussian { dim: 2 }, token: ConditionToken(1) };
            distill_dmd(&teacher, &teacher, &mut src, &cfg, 3).unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.losses, b.losses);
        assert_eq!(a.student.params, b.student.params);
        assert!(a.losses.iter().all(|l| l.1.is_finite() && l.2.is_finite()));
        assert_ne!(a.student.params, teacher.params);
    }
}
