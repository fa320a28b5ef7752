//! Probability-flow ODE Euler solver and the multi-step consistency sampler,
//! with network-evaluation accounting.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Bound, Var};
use crate::error::{Error, Result};
use crate::networks::{Architecture, VelocityNet};
use crate::schedule::{cm_apply, cm_apply_var, interpolate, TimePoint};
use crate::tensor::Tensor;

/// Generated samples plus cost accounting.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleBatch {
    pub samples: Tensor,
    /// Network forward evaluations performed.
    pub nfe: usize,
    pub wall_clock_ns: u64,
    pub seed: u64,
}

/// Anything that can produce a (possibly guided) velocity.
pub trait VelocityField {
    type Cond;

    fn velocity(&self, x: &Tensor, t: &[f64], cond: &Self::Cond, w: f64) -> Result<Tensor>;

    /// Network evaluations one call to [`velocity`](Self::velocity) costs.
    fn cost(&self, w: f64) -> usize;
}

impl<A: Architecture> VelocityField for VelocityNet<A> {
    type Cond = A::Cond;

    fn velocity(&self, x: &Tensor, t: &[f64], cond: &A::Cond, w: f64) -> Result<Tensor> {
        self.cfg_predict(x, t, cond, w)
    }

    fn cost(&self, w: f64) -> usize {
        Self::cfg_cost(w)
    }
}

/// Closure-backed field `F(x, t)`; used for analytic test fields.
pub struct FnField<F>(pub F);

impl<F> VelocityField for FnField<F>
where
    F: Fn(&Tensor, &[f64]) -> Result<Tensor>,
{
    type Cond = ();

    fn velocity(&self, x: &Tensor, t: &[f64], _: &(), _: f64) -> Result<Tensor> {
        (self.0)(x, t)
    }

    fn cost(&self, _: f64) -> usize {
        1
    }
}

/// Wraps a network and counts every forward pass it actually runs,
/// independently of the samplers' own bookkeeping.
pub struct Counted<'a, A> {
    net: &'a VelocityNet<A>,
    calls: AtomicUsize,
}

impl<'a, A: Architecture> Counted<'a, A> {
    pub fn new(net: &'a VelocityNet<A>) -> Self {
        Self {
            net,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }

    fn forward(&self, x: &Tensor, t: &[f64], cond: &A::Cond) -> Result<Tensor> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.net.predict(x, t, cond)
    }
}

impl<A: Architecture> VelocityField for Counted<'_, A> {
    type Cond = A::Cond;

    fn velocity(&self, x: &Tensor, t: &[f64], cond: &A::Cond, w: f64) -> Result<Tensor> {
        let f_c = self.forward(x, t, cond)?;
        if w == 1.0 {
            return Ok(f_c);
        }
        let f_u = self.forward(x, t, &self.net.arch.null_cond(cond))?;
        f_u.zip_map(&f_c, "cfg", |u, c| u + w * (c - u))
    }

    fn cost(&self, w: f64) -> usize {
        VelocityNet::<A>::cfg_cost(w)
    }
}

/// Uniform grid `1 = t_0 > t_1 > … > t_steps = 0`.
pub fn euler_grid(steps: usize) -> Vec<f64> {
    (0..=steps).map(|k| 1.0 - k as f64 / steps as f64).collect()
}

/// Explicit Euler on the PF-ODE from `t = 1` (noise) to `t = 0` (data).
pub fn euler_solve<F: VelocityField>(
    field: &F,
    eps: &Tensor,
    steps: usize,
    cond: &F::Cond,
    w: f64,
) -> Result<SampleBatch> {
    if steps == 0 {
        return Err(Error::invalid("euler_solve needs at least one step"));
    }
    let start = Instant::now();
    let grid = euler_grid(steps);
    let mut x = eps.clone();
    let mut nfe = 0;
    for k in 0..steps {
        let t = vec![grid[k]; x.rows()];
        let v = field.velocity(&x, &t, cond, w)?;
        nfe += field.cost(w);
        let dt = grid[k + 1] - grid[k];
        x = x.zip_map(&v, "euler", |xi, vi| xi + dt * vi)?.ensure_finite("euler")?;
    }
    Ok(SampleBatch {
        samples: x,
        nfe,
        wall_clock_ns: start.elapsed().as_nanos() as u64,
        seed: 0,
    })
}

/// Descending consistency grid `t_i = 1 − i/steps`, `i = 0..steps`.
pub fn consistency_grid(steps: usize) -> Vec<f64> {
    (0..steps).map(|i| 1.0 - i as f64 / steps as f64).collect()
}

/// The `steps − 1` fresh noise draws used for renoising, in order.
pub fn renoise_draws(rows: usize, cols: usize, steps: usize, seed: u64) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (1..steps)
        .map(|_| Tensor::randn(vec![rows, cols], &mut rng))
        .collect()
}

/// Multi-step consistency sampling: at each grid time jump to the data
/// estimate `x̂ = x − t·F(x, t)`, then renoise to the next grid time with
/// fresh noise. Returns the last `x̂`.
pub fn consistency_sample<F: VelocityField>(
    field: &F,
    eps: &Tensor,
    steps: usize,
    cond: &F::Cond,
    seed: u64,
) -> Result<SampleBatch> {
    if steps == 0 {
        return Err(Error::invalid("consistency_sample needs at least one step"));
    }
    let start = Instant::now();
    let grid = consistency_grid(steps);
    let noise = renoise_draws(eps.rows(), eps.cols(), steps, seed);
    let mut x = eps.clone();
    let mut x_hat = eps.clone();
    let mut nfe = 0;
    for (i, &t) in grid.iter().enumerate() {
        let v = field.velocity(&x, &vec![t; x.rows()], cond, 1.0)?;
        nfe += field.cost(1.0);
        x_hat = cm_apply(&v, &x, TimePoint::new(t)?)?;
        if let Some(&t_next) = grid.get(i + 1) {
            x = interpolate(&x_hat, &noise[i].reshape(x_hat.shape().to_vec())?, TimePoint::new(t_next)?)?;
        }
    }
    Ok(SampleBatch {
        samples: x_hat,
        nfe,
        wall_clock_ns: start.elapsed().as_nanos() as u64,
        seed,
    })
}

/// Differentiable version of [`consistency_sample`] on a tape; same
/// arithmetic, so values match bit for bit.
pub fn consistency_chain<'t, A: Architecture>(
    arch: &A,
    params: &Bound<'t>,
    eps: Var<'t>,
    steps: usize,
    cond: &A::Cond,
    noise: &[Tensor],
) -> Result<Var<'t>> {
    if steps == 0 || noise.len() + 1 < steps {
        return Err(Error::invalid("consistency_chain needs steps ≥ 1 and steps − 1 noise draws"));
    }
    let tape = eps.tape();
    let grid = consistency_grid(steps);
    let rows = eps.shape()[0];
    let mut x = eps;
    let mut x_hat = eps;
    for (i, &t) in grid.iter().enumerate() {
        let ts = vec![t; rows];
        let v = arch.forward(params, x, &ts, cond)?;
        x_hat = cm_apply_var(v, x, &ts)?;
        if let Some(&t_next) = grid.get(i + 1) {
            let injected = tape.constant(noise[i].reshape(x_hat.shape())?.scale(t_next));
            x = x_hat.scale(1.0 - t_next)?.add(injected)?;
        }
    }
    Ok(x_hat)
}
