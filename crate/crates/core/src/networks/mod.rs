//! Time- and condition-aware velocity networks and classifier-free guidance.

mod embed;
mod point;
mod seq;

pub use embed::{position_features, time_embedding};
pub use point::{repeat_token, PointNet, PointNetSpec};
pub use seq::{seq_forward, SeqCond, SeqNet, SeqNetSpec};

use std::fmt::Debug;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Bound, Tape, Var};
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;

/// Condition id; `0` is the null (unconditional) token.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ConditionToken(pub u32);

impl ConditionToken {
    pub const NULL: ConditionToken = ConditionToken(0);

    pub fn is_null(self) -> bool {
        self == Self::NULL
    }
}

/// Serializable architecture descriptor, stored in checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ArchSpec {
    Point(PointNetSpec),
    Seq(SeqNetSpec),
}

/// The structure of a velocity network, independent of its weights.
pub trait Architecture: Clone + Debug + Send + Sync {
    /// Per-batch conditioning information.
    type Cond: Clone + Debug + Send + Sync;

    fn init(&self, rng: &mut dyn rand::RngCore) -> Result<ParamSet>;

    /// `F(x_t, t, c)`; row `i` of `x_t` is at time `t[i]`.
    fn forward<'t>(&self, p: &Bound<'t>, x_t: Var<'t>, t: &[f64], cond: &Self::Cond) -> Result<Var<'t>>;

    /// The same conditioning with every condition token replaced by null.
    fn null_cond(&self, cond: &Self::Cond) -> Self::Cond;

    /// Whether any condition token in `cond` is null.
    fn has_null(&self, cond: &Self::Cond) -> bool;

    fn spec(&self) -> ArchSpec;
}

/// Weights plus architecture.
#[derive(Clone, Debug, PartialEq)]
pub struct VelocityNet<A> {
    pub arch: A,
    pub params: ParamSet,
}

impl<A: Architecture> VelocityNet<A> {
    pub fn new(arch: A, rng: &mut dyn rand::RngCore) -> Result<Self> {
        let params = arch.init(rng)?;
        Ok(Self { arch, params })
    }

    pub fn from_params(arch: A, params: ParamSet) -> Self {
        Self { arch, params }
    }

    /// Forward pass recording this net's weights as trainable leaves.
    pub fn forward_trainable<'t>(
        &self,
        tape: &'t Tape,
        x_t: Var<'t>,
        t: &[f64],
        cond: &A::Cond,
    ) -> Result<(Var<'t>, Bound<'t>)> {
        let bound = tape.bind(&self.params);
        let out = self.arch.forward(&bound, x_t, t, cond)?;
        Ok((out, bound))
    }

    /// Forward pass with frozen weights; gradient flows only through `x_t`.
    pub fn forward_frozen<'t>(&self, tape: &'t Tape, x_t: Var<'t>, t: &[f64], cond: &A::Cond) -> Result<Var<'t>> {
        let bound = tape.bind_frozen(&self.params);
        self.arch.forward(&bound, x_t, t, cond)
    }

    /// Velocity prediction without gradient tracking.
    pub fn predict(&self, x_t: &Tensor, t: &[f64], cond: &A::Cond) -> Result<Tensor> {
        let tape = Tape::new();
        let x = tape.constant(x_t.clone());
        Ok(self.forward_frozen(&tape, x, t, cond)?.value())
    }

    /// Guided velocity `F_u + w·(F_c − F_u)`; exactly the conditional
    /// prediction when `w == 1`.
    pub fn cfg_predict(&self, x_t: &Tensor, t: &[f64], cond: &A::Cond, w: f64) -> Result<Tensor> {
        if w == 1.0 {
            return self.predict(x_t, t, cond);
        }
        if self.arch.has_null(cond) {
            return Err(Error::invalid("guidance needs a non-null condition"));
        }
        let f_c = self.predict(x_t, t, cond)?;
        let f_u = self.predict(x_t, t, &self.arch.null_cond(cond))?;
        f_u.zip_map(&f_c, "cfg", |u, c| u + w * (c - u))?
            .ensure_finite("cfg")
    }

    /// Number of network evaluations one guided prediction costs.
    pub fn cfg_cost(w: f64) -> usize {
        if w == 1.0 {
            1
        } else {
            2
        }
    }
}

/// Dense layer `x·W + b`.
pub(crate) fn linear<'t>(p: &Bound<'t>, name: &str, x: Var<'t>) -> Result<Var<'t>> {
    let w = p.get(&format!("{name}.w"))?;
    let b = p.get(&format!("{name}.b"))?;
    x.matmul(w)?.add_row(b)
}

pub(crate) fn init_linear(
    params: &mut ParamSet,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    gain: f64,
    rng: &mut dyn rand::RngCore,
) -> Result<()> {
    let std = gain / (fan_in as f64).sqrt();
    let w: Vec<f64> = (0..fan_in * fan_out)
        .map(|_| std * rng.sample::<f64, _>(StandardNormal))
        .collect();
    params.insert(format!("{name}.w"), Tensor::matrix(fan_in, fan_out, w)?)?;
    params.insert(format!("{name}.b"), Tensor::matrix(1, fan_out, vec![0.0; fan_out])?)?;
    Ok(())
}

pub(crate) fn init_embedding(
    params: &mut ParamSet,
    name: &str,
    rows: usize,
    dim: usize,
    std: f64,
    rng: &mut dyn rand::RngCore,
) -> Result<()> {
    let e: Vec<f64> = (0..rows * dim)
        .map(|_| std * rng.sample::<f64, _>(StandardNormal))
        .collect();
    params.insert(name, Tensor::matrix(rows, dim, e)?)
}

pub(crate) fn token_ids(tokens: &[ConditionToken], vocab: usize) -> Result<Vec<usize>> {
    tokens
        .iter()
        .map(|c| {
            let id = c.0 as usize;
            if id < vocab {
                Ok(id)
            } else {
                Err(Error::invalid(format!("condition token {id} outside vocabulary {vocab}")))
            }
        })
        .collect()
}
