use serde::{Deserialize, Serialize};

use super::{init_embedding, init_linear, linear, token_ids, ArchSpec, Architecture, ConditionToken};
use crate::autodiff::{Bound, Var};
use crate::error::{Error, Result};
use crate::networks::time_embedding;
use crate::params::ParamSet;


/// MLP velocity network on points in `R^dim`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PointNetSpec {
    pub dim: usize,
    pub hidden: usize,
    /// Number of hidden layers.
    pub depth: usize,
    pub time_freqs: usize,
    /// Condition vocabulary size, including the null token 0.
    pub vocab: usize,
    pub cond_dim: usize,
    /// Start the output layer at zero so the initial velocity is 0.
    pub zero_init_output: bool,
}

impl Default for PointNetSpec {
    fn default() -> Self {
        Self {
            dim: 2,
            hidden: 64,
            depth: 3,
            time_freqs: 6,
            vocab: 2,
            cond_dim: 8,
            zero_init_output: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PointNet {
    pub spec: PointNetSpec,
}

impl PointNet {
    pub fn new(spec: PointNetSpec) -> Result<Self> {
        if spec.dim == 0 || spec.hidden == 0 || spec.depth == 0 || spec.vocab == 0 {
            return Err(Error::Config(format!("degenerate point net {spec:?}")));
        }
        Ok(Self { spec })
    }

    fn input_width(&self) -> usize {
        self.spec.dim + 1 + 2 * self.spec.time_freqs + self.spec.cond_dim
    }
}

impl Architecture for PointNet {
    type Cond = Vec<ConditionToken>;

    fn init(&self, rng: &mut dyn rand::RngCore) -> Result<ParamSet> {
        let s = &self.spec;
        let mut p = ParamSet::new();
        init_embedding(&mut p, "cond_emb", s.vocab, s.cond_dim, 1.0, rng)?;
        let mut fan_in = self.input_width();
        for l in 0..s.depth {
            init_linear(&mut p, &format!("hidden{l}"), fan_in, s.hidden, 1.0, rng)?;
            fan_in = s.hidden;
        }
        let gain = if s.zero_init_output { 0.0 } else { 1.0 };
        init_linear(&mut p, "out", s.hidden, s.dim, gain, rng)?;
        Ok(p)
    }

    fn forward<'t>(&self, p: &Bound<'t>, x_t: Var<'t>, t: &[f64], cond: &Self::Cond) -> Result<Var<'t>> {
        let s = &self.spec;
        let shape = x_t.shape();
        if shape.len() != 2 || shape[1] != s.dim || shape[0] != t.len() || cond.len() != t.len() {
            return Err(Error::ShapeMismatch {
                op: "point_net",
                left: vec![t.len(), s.dim],
                right: shape,
            });
        }
        let tape = x_t.tape();
        let temb = tape.constant(time_embedding(t, s.time_freqs));
        let ids = token_ids(cond, s.vocab)?;
        let cemb = p.get("cond_emb")?.gather_rows(&ids)?;
        let mut h = tape.concat_cols(&[x_t, temb, cemb])?;
        for l in 0..s.depth {
            h = linear(p, &format!("hidden{l}"), h)?.silu()?;
        }
        linear(p, "out", h)
    }

    fn null_cond(&self, cond: &Self::Cond) -> Self::Cond {
        vec![ConditionToken::NULL; cond.len()]
    }

    fn has_null(&self, cond: &Self::Cond) -> bool {
        cond.iter().any(|c| c.is_null())
    }

    fn spec(&self) -> ArchSpec {
        ArchSpec::Point(self.spec.clone())
    }
}

/// `n` copies of one condition token.
pub fn repeat_token(c: ConditionToken, n: usize) -> Vec<ConditionToken> {
    vec![c; n]
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::networks::VelocityNet;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn net(zero: bool) -> VelocityNet<PointNet> {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let arch = PointNet::new(PointNetSpec {
            zero_init_output: zero,
            ..Default::default()
        })
        .unwrap();
        VelocityNet::new(arch, &mut rng).unwrap()
    }

    fn batch(n: usize) -> (Tensor, Vec<f64>, Vec<ConditionToken>) {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::randn(vec![n, 2], &mut rng);
        let t = (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect();
        (x, t, repeat_token(ConditionToken(1), n))
    }

    #[test]
    fn output_shape_matches_input() {
        let (x, t, c) = batch(5);
        assert_eq!(net(false).predict(&x, &t, &c).unwrap().shape(), &[5, 2]);
    }

    #[test]
    fn zero_output_layer_gives_zero_velocity() {
        let (x, t, c) = batch(5);
        assert_eq!(net(true).predict(&x, &t, &c).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn forward_is_deterministic_and_checks_shapes() {
        let n = net(false);
        let (x, t, c) = batch(4);
        assert_eq!(n.predict(&x, &t, &c).unwrap(), n.predict(&x, &t, &c).unwrap());
        assert!(n.predict(&Tensor::zeros(vec![4, 3]), &t, &c).is_err());
        assert!(n.predict(&x, &t, &vec![ConditionToken(9); 4]).is_err());
    }

    #[test]
    fn guidance_special_cases() {
        let n = net(false);
        let (x, t, c) = batch(6);
        let cond = n.predict(&x, &t, &c).unwrap();
        let uncond = n.predict(&x, &t, &n.arch.null_cond(&c)).unwrap();
        assert_eq!(n.cfg_predict(&x, &t, &c, 1.0).unwrap(), cond);
        assert_eq!(n.cfg_predict(&x, &t, &c, 0.0).unwrap(), uncond);
        let g6 = n.cfg_predict(&x, &t, &c, 6.0).unwrap();
        for i in 0..g6.len() {
            let e = uncond.data()[i] + 6.0 * (cond.data()[i] - uncond.data()[i]);
            assert!((g6.data()[i] - e).abs() < 1e-12);
        }
        let nulls = n.arch.null_cond(&c);
        assert!(n.cfg_predict(&x, &t, &nulls, 6.0).is_err());
        assert!(n.cfg_predict(&x, &t, &nulls, 1.0).is_ok());
    }
}
