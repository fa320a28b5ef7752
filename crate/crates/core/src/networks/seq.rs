//! Token-sequence velocity network for unified target + reference sequences.
//!
//! Target tokens pass through a per-token MLP. Each reference segment is
//! embedded per token (with a learned segment embedding for its slot),
//! mean-pooled, and projected to a slot vector; the slot vectors of a sample
//! are concatenated in slot order and fed to every target token of that
//! sample. Only target tokens produce outputs.

use serde::{Deserialize, Serialize};

use super::{init_embedding, init_linear, linear, token_ids, ArchSpec, Architecture, ConditionToken};
use crate::autodiff::{Bound, Var};
use crate::error::{Error, Result};
use crate::networks::{position_features, time_embedding, VelocityNet};
use crate::packing::{UnifiedSequence, MAX_REFERENCES};
use crate::params::ParamSet;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SeqNetSpec {
    /// Token width `D = 4C`.
    pub token_dim: usize,
    pub hidden: usize,
    /// Residual mixing blocks (2–4).
    pub blocks: usize,
    /// Width of each pooled reference-slot vector.
    pub slot_dim: usize,
    pub time_freqs: usize,
    pub pos_freqs: usize,
    pub vocab: usize,
    pub zero_init_output: bool,
}

impl Default for SeqNetSpec {
    fn default() -> Self {
        Self {
            token_dim: 16,
            hidden: 64,
            blocks: 2,
            slot_dim: 16,
            time_freqs: 6,
            pos_freqs: 3,
            vocab: 2,
            zero_init_output: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeqNet {
    pub spec: SeqNetSpec,
}

impl SeqNet {
    pub fn new(spec: SeqNetSpec) -> Result<Self> {
        if !(2..=4).contains(&spec.blocks) || spec.token_dim == 0 || !spec.token_dim.is_multiple_of(4) || spec.hidden == 0 {
            return Err(Error::Config(format!("unsupported sequence net {spec:?}")));
        }
        Ok(Self { spec })
    }
}

/// Batch conditioning for [`SeqNet`]: the reference segments of every sample.
///
/// The rows of `x_t` handed to the network are the target tokens of all
/// samples, stacked in sample order.
#[derive(Clone, Debug, PartialEq)]
pub struct SeqCond {
    /// Reference tokens of all samples, stacked.
    pub refs: Tensor,
    /// Per sample, the `(start, rows)` of each reference inside `refs`, in slot order.
    pub ref_segments: Vec<Vec<(usize, usize)>>,
    /// Per sample, the latent `(height, width)` of the target.
    pub target_shapes: Vec<(usize, usize)>,
    /// Per sample condition token.
    pub tokens: Vec<ConditionToken>,
}

impl SeqCond {
    /// Splits a batch of sequences into stacked target tokens and conditioning.
    pub fn from_sequences(seqs: &[UnifiedSequence], tokens: &[ConditionToken]) -> Result<(Tensor, SeqCond)> {
        if seqs.is_empty() || seqs.len() != tokens.len() {
            return Err(Error::invalid("one condition token per sequence required"));
        }
        let mut targets = Vec::with_capacity(seqs.len());
        let mut refs = Vec::new();
        let mut ref_segments = Vec::with_capacity(seqs.len());
        let mut target_shapes = Vec::with_capacity(seqs.len());
        let mut row = 0;
        for s in seqs {
            s.validate()?;
            let d = s.descriptors()[0];
            target_shapes.push((d.height, d.width));
            targets.push(s.target_tokens());
            let mut segs = Vec::with_capacity(s.num_references());
            for k in 1..s.num_segments() {
                let tok = s.segment_tokens(k);
                segs.push((row, tok.rows()));
                row += tok.rows();
                refs.push(tok);
            }
            ref_segments.push(segs);
        }
        let t_refs: Vec<&Tensor> = targets.iter().collect();
        let r_refs: Vec<&Tensor> = refs.iter().collect();
        Ok((
            Tensor::concat_rows(&t_refs)?,
            SeqCond {
                refs: Tensor::concat_rows(&r_refs)?,
                ref_segments,
                target_shapes,
                tokens: tokens.to_vec(),
            },
        ))
    }

    pub fn num_samples(&self) -> usize {
        self.target_shapes.len()
    }

    /// Target token rows per sample.
    pub fn target_rows(&self) -> Vec<usize> {
        self.target_shapes.iter().map(|(h, w)| (h / 2) * (w / 2)).collect()
    }

    /// Sample index of every target-token row.
    pub fn sample_of_row(&self) -> Vec<usize> {
        self.target_rows()
            .into_iter()
            .enumerate()
            .flat_map(|(s, n)| std::iter::repeat_n(s, n))
            .collect()
    }

    /// Expands per-sample values to per-row values.
    pub fn expand<T: Copy>(&self, per_sample: &[T]) -> Vec<T> {
        self.sample_of_row().into_iter().map(|s| per_sample[s]).collect()
    }
}

impl SeqNet {
    /// Forward pass with the reference tokens supplied as a tape value, so
    /// gradient can be taken with respect to them.
    pub fn forward_with_refs<'t>(
        &self,
        p: &Bound<'t>,
        x_t: Var<'t>,
        refs: Var<'t>,
        t: &[f64],
        cond: &SeqCond,
    ) -> Result<Var<'t>> {
        let s = &self.spec;
        let tape = x_t.tape();
        let rows_per = cond.target_rows();
        let n_rows: usize = rows_per.iter().sum();
        let xs = x_t.shape();
        if xs.len() != 2 || xs[0] != n_rows || xs[1] != s.token_dim || t.len() != n_rows {
            return Err(Error::ShapeMismatch {
                op: "seq_net",
                left: vec![n_rows, s.token_dim],
                right: xs,
            });
        }
        if cond.tokens.len() != cond.num_samples() || cond.ref_segments.len() != cond.num_samples() {
            return Err(Error::invalid("malformed sequence conditioning"));
        }

        // reference path
        let mut slot_of_ref_row = vec![0usize; refs.shape()[0]];
        let mut flat_segments = Vec::new();
        let mut pooled_index = Vec::with_capacity(cond.num_samples() * MAX_REFERENCES);
        for segs in &cond.ref_segments {
            if segs.is_empty() || segs.len() > MAX_REFERENCES {
                return Err(Error::invalid(format!("{} references in a sample", segs.len())));
            }
            for (k, &(start, len)) in segs.iter().enumerate() {
                if start + len > slot_of_ref_row.len() {
                    return Err(Error::invalid("reference segment outside the stacked references"));
                }
                slot_of_ref_row[start..start + len].fill(k + 1);
            }
            let base = flat_segments.len();
            flat_segments.extend_from_slice(segs);
            for slot in 0..MAX_REFERENCES {
                pooled_index.push(if slot < segs.len() { base + slot } else { usize::MAX });
            }
        }
        let empty_row = flat_segments.len();
        pooled_index.iter_mut().filter(|i| **i == usize::MAX).for_each(|i| *i = empty_row);

        let seg_emb = p.get("seg_emb")?;
        let hr = linear(p, "ref_in", refs)?
            .add(seg_emb.gather_rows(&slot_of_ref_row)?)?
            .silu()?;
        let hr = linear(p, "ref_mlp", hr)?.silu()?;
        let pooled = linear(p, "slot_proj", hr.segment_mean(&flat_segments)?)?;
        let table = tape.concat_rows(&[pooled, p.get("empty_slot")?])?;
        let ctx = table
            .gather_rows(&pooled_index)?
            .reshape(&[cond.num_samples(), MAX_REFERENCES * s.slot_dim])?;
        let ctx_tok = ctx.gather_rows(&cond.sample_of_row())?;

        // target path
        let pos: Vec<Tensor> = cond
            .target_shapes
            .iter()
            .map(|&(h, w)| position_features(h / 2, w / 2, s.pos_freqs))
            .collect();
        let pos = tape.constant(Tensor::concat_rows(&pos.iter().collect::<Vec<_>>())?);
        let temb = tape.constant(time_embedding(t, s.time_freqs));
        let ids = token_ids(&cond.expand(&cond.tokens), s.vocab)?;
        let mut h = linear(p, "tgt_in", tape.concat_cols(&[x_t, pos, temb])?)?
            .add(seg_emb.gather_rows(&vec![0; n_rows])?)?
            .add(p.get("cond_emb")?.gather_rows(&ids)?)?
            .silu()?;
        for b in 0..s.blocks {
            let z = linear(p, &format!("block{b}.a"), tape.concat_cols(&[h, ctx_tok])?)?.silu()?;
            h = h.add(linear(p, &format!("block{b}.b"), z)?)?;
        }
        linear(p, "out", h)
    }
}

impl Architecture for SeqNet {
    type Cond = SeqCond;

    fn init(&self, rng: &mut dyn rand::RngCore) -> Result<ParamSet> {
        let s = &self.spec;
        let mut p = ParamSet::new();
        let (h, d) = (s.hidden, s.token_dim);
        init_embedding(&mut p, "seg_emb", MAX_REFERENCES + 1, h, 0.5, rng)?;
        init_embedding(&mut p, "cond_emb", s.vocab, h, 0.5, rng)?;
        init_embedding(&mut p, "empty_slot", 1, s.slot_dim, 0.5, rng)?;
        init_linear(&mut p, "ref_in", d, h, 1.0, rng)?;
        init_linear(&mut p, "ref_mlp", h, h, 1.0, rng)?;
        init_linear(&mut p, "slot_proj", h, s.slot_dim, 1.0, rng)?;
        let tgt_in = d + (2 + 4 * s.pos_freqs) + (1 + 2 * s.time_freqs);
        init_linear(&mut p, "tgt_in", tgt_in, h, 1.0, rng)?;
        for b in 0..s.blocks {
            init_linear(&mut p, &format!("block{b}.a"), h + MAX_REFERENCES * s.slot_dim, h, 1.0, rng)?;
            init_linear(&mut p, &format!("block{b}.b"), h, h, 0.5, rng)?;
        }
        let gain = if s.zero_init_output { 0.0 } else { 1.0 };
        init_linear(&mut p, "out", h, d, gain, rng)?;
        Ok(p)
    }

    fn forward<'t>(&self, p: &Bound<'t>, x_t: Var<'t>, t: &[f64], cond: &SeqCond) -> Result<Var<'t>> {
        let refs = x_t.tape().constant(cond.refs.clone());
        self.forward_with_refs(p, x_t, refs, t, cond)
    }

    fn null_cond(&self, cond: &SeqCond) -> SeqCond {
        SeqCond {
            tokens: vec![ConditionToken::NULL; cond.tokens.len()],
            ..cond.clone()
        }
    }

    fn has_null(&self, cond: &SeqCond) -> bool {
        cond.tokens.iter().any(|c| c.is_null())
    }

    fn spec(&self) -> ArchSpec {
        ArchSpec::Seq(self.spec.clone())
    }
}

/// Velocity for the target tokens of one unified sequence (`N_O × D`).
pub fn seq_forward(
    net: &VelocityNet<SeqNet>,
    seq: &UnifiedSequence,
    t: f64,
    c: ConditionToken,
) -> Result<Tensor> {
    let (x, cond) = SeqCond::from_sequences(std::slice::from_ref(seq), &[c])?;
    let ts = vec![t; x.rows()];
    net.predict(&x, &ts, &cond)
}
