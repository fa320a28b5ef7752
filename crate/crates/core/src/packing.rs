//! Latent grids, 2×2 patch packing, and unified target + reference sequences.
//!
//! Token `i·(W/2) + j` of a packed grid holds the `4C` values of spatial block
//! `(2i..2i+2, 2j..2j+2)`, channel-major, then row-major within the block.

use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Maximum references alongside one target.
pub const MAX_REFERENCES: usize = 6;
/// Spatial downsample factor of the toy encoder (pixels per latent cell, per axis).
pub const LATENT_DOWNSAMPLE: usize = 2;
/// Total pixel budget over target and references.
pub const PIXEL_BUDGET: usize = 1024 * 1024;

const SEQ_MAGIC: &[u8; 4] = b"UPS1";

/// A `C × H × W` latent with even spatial sides.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentGrid {
    values: Tensor,
}

impl LatentGrid {
    pub fn new(values: Tensor) -> Result<Self> {
        let s = values.shape();
        if s.len() != 3 || s.contains(&0) {
            return Err(Error::invalid(format!("latent grid needs shape C×H×W, got {s:?}")));
        }
        if !s[1].is_multiple_of(2) || !s[2].is_multiple_of(2) {
            return Err(Error::invalid(format!(
                "latent grid sides must be even for 2×2 packing, got {}×{}",
                s[1], s[2]
            )));
        }
        Ok(Self { values })
    }

    pub fn from_fn(c: usize, h: usize, w: usize, f: impl Fn(usize, usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(c * h * w);
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    data.push(f(ch, y, x));
                }
            }
        }
        Self::new(Tensor::new(vec![c, h, w], data)?)
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.values.data()[(c * self.height() + y) * self.width() + x]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Target,
    Reference,
}

/// Per-segment record enabling exact unpacking.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ShapeDescriptor {
    pub height: usize,
    pub width: usize,
    pub role: Role,
    /// 0 for the target, `1..=K` for references.
    pub index: usize,
}

impl ShapeDescriptor {
    pub fn tokens(&self) -> usize {
        (self.height / 2) * (self.width / 2)
    }

    pub fn pixels(&self) -> usize {
        self.height * LATENT_DOWNSAMPLE * self.width * LATENT_DOWNSAMPLE
    }
}

/// Token sequence of one packed grid: `N × D` with `N = (H/2)(W/2)`, `D = 4C`.
#[derive(Clone, Debug, PartialEq)]
pub struct PackedSeq {
    pub tokens: Tensor,
    pub descriptor: ShapeDescriptor,
}

impl PackedSeq {
    pub fn with_role(mut self, role: Role, index: usize) -> Self {
        self.descriptor.role = role;
        self.descriptor.index = index;
        self
    }

    pub fn token_dim(&self) -> usize {
        self.tokens.cols()
    }
}

pub fn pack(grid: &LatentGrid) -> PackedSeq {
    let (c, h, w) = (grid.channels(), grid.height(), grid.width());
    let (bh, bw) = (h / 2, w / 2);
    let d = 4 * c;
    let mut data = Vec::with_capacity(bh * bw * d);
    for i in 0..bh {
        for j in 0..bw {
            for ch in 0..c {
                for dy in 0..2 {
                    for dx in 0..2 {
                        data.push(grid.at(ch, 2 * i + dy, 2 * j + dx));
                    }
                }
            }
        }
    }
    PackedSeq {
        tokens: Tensor::matrix(bh * bw, d, data).expect("pack: shape arithmetic"),
        descriptor: ShapeDescriptor {
            height: h,
            width: w,
            role: Role::Target,
            index: 0,
        },
    }
}

pub fn unpack(seq: &PackedSeq) -> Result<LatentGrid> {
    unpack_tokens(&seq.tokens, &seq.descriptor)
}

fn unpack_tokens(tokens: &Tensor, desc: &ShapeDescriptor) -> Result<LatentGrid> {
    let (h, w) = (desc.height, desc.width);
    let d = tokens.cols();
    if h == 0 || w == 0 || h % 2 != 0 || w % 2 != 0 || !d.is_multiple_of(4) || d == 0 || tokens.rows() != desc.tokens() {
        return Err(Error::Format(format!(
            "descriptor {}×{} does not describe {} tokens of width {}",
            h,
            w,
            tokens.rows(),
            d
        )));
    }
    let c = d / 4;
    let bw = w / 2;
    let mut data = vec![0.0; c * h * w];
    for (tok, row) in tokens.data().chunks(d).enumerate() {
        let (i, j) = (tok / bw, tok % bw);
        for ch in 0..c {
            for dy in 0..2 {
                for dx in 0..2 {
                    data[(ch * h + 2 * i + dy) * w + 2 * j + dx] = row[ch * 4 + dy * 2 + dx];
                }
            }
        }
    }
    LatentGrid::new(Tensor::new(vec![c, h, w], data)?)
}

/// Target and reference tokens concatenated along the sequence axis,
/// target first.
#[derive(Clone, Debug, PartialEq)]
pub struct UnifiedSequence {
    tokens: Tensor,
    offsets: Vec<usize>,
    descriptors: Vec<ShapeDescriptor>,
}

pub fn build_unified(target: &PackedSeq, refs: &[PackedSeq]) -> Result<UnifiedSequence> {
    if refs.is_empty() || refs.len() > MAX_REFERENCES {
        return Err(Error::invalid(format!(
            "need 1..={MAX_REFERENCES} references, got {}",
            refs.len()
        )));
    }
    let d = target.token_dim();
    let mut descriptors = Vec::with_capacity(refs.len() + 1);
    let mut offsets = Vec::with_capacity(refs.len() + 1);
    let mut parts = Vec::with_capacity(refs.len() + 1);
    let mut offset = 0;
    for (k, seg) in std::iter::once(target).chain(refs).enumerate() {
        if seg.token_dim() != d {
            return Err(Error::ShapeMismatch {
                op: "build_unified",
                left: target.tokens.shape().to_vec(),
                right: seg.tokens.shape().to_vec(),
            });
        }
        let role = if k == 0 { Role::Target } else { Role::Reference };
        let desc = ShapeDescriptor {
            role,
            index: k,
            ..seg.descriptor
        };
        if desc.tokens() != seg.tokens.rows() {
            return Err(Error::Format(format!("segment {k}: descriptor/token count mismatch")));
        }
        descriptors.push(desc);
        offsets.push(offset);
        offset += seg.tokens.rows();
        parts.push(&seg.tokens);
    }
    let pixels: usize = descriptors.iter().map(|d| d.pixels()).sum();
    if pixels > PIXEL_BUDGET {
        return Err(Error::invalid(format!(
            "{pixels} pixels exceed the budget of {PIXEL_BUDGET}"
        )));
    }
    Ok(UnifiedSequence {
        tokens: Tensor::concat_rows(&parts)?,
        offsets,
        descriptors,
    })
}

impl UnifiedSequence {
    pub fn tokens(&self) -> &Tensor {
        &self.tokens
    }

    pub fn descriptors(&self) -> &[ShapeDescriptor] {
        &self.descriptors
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn num_segments(&self) -> usize {
        self.descriptors.len()
    }

    pub fn num_references(&self) -> usize {
        self.descriptors.len() - 1
    }

    pub fn token_dim(&self) -> usize {
        self.tokens.cols()
    }

    /// `(offset, rows)` of segment `k` (0 is the target).
    pub fn segment(&self, k: usize) -> (usize, usize) {
        (self.offsets[k], self.descriptors[k].tokens())
    }

    pub fn segment_tokens(&self, k: usize) -> Tensor {
        let (o, n) = self.segment(k);
        self.tokens.slice_rows(o, n).expect("segments lie inside the sequence")
    }

    pub fn target_tokens(&self) -> Tensor {
        self.segment_tokens(0)
    }

    /// Tokens of every reference segment, stacked in order.
    pub fn reference_tokens(&self) -> Tensor {
        let (o, n) = self.segment(0);
        let start = o + n;
        self.tokens
            .slice_rows(start, self.tokens.rows() - start)
            .expect("references follow the target")
    }

    pub fn unpack_segment(&self, k: usize) -> Result<LatentGrid> {
        unpack_tokens(&self.segment_tokens(k), &self.descriptors[k])
    }

    /// Same sequence with the target rows replaced by `target`.
    pub fn with_target(&self, target: &Tensor) -> Result<UnifiedSequence> {
        let (o, n) = self.segment(0);
        if target.rows() != n || target.cols() != self.token_dim() {
            return Err(Error::ShapeMismatch {
                op: "with_target",
                left: vec![n, self.token_dim()],
                right: target.shape().to_vec(),
            });
        }
        let mut out = self.clone();
        let d = self.token_dim();
        out.tokens.data_mut()[o * d..(o + n) * d].copy_from_slice(target.data());
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.descriptors.len();
        if !(2..=MAX_REFERENCES + 1).contains(&k) || self.offsets.len() != k {
            return Err(Error::Format(format!("{k} segments")));
        }
        let mut expect = 0;
        for (i, (d, &o)) in self.descriptors.iter().zip(&self.offsets).enumerate() {
            let role_ok = (i == 0) == (d.role == Role::Target);
            if o != expect || !role_ok || d.index != i || d.height % 2 != 0 || d.width % 2 != 0 || d.tokens() == 0 {
                return Err(Error::Format(format!("segment {i} descriptor is inconsistent")));
            }
            expect += d.tokens();
        }
        if expect != self.tokens.rows() || self.tokens.shape().len() != 2 {
            return Err(Error::Format("segments do not cover the token rows".into()));
        }
        Ok(())
    }

    /// Writes the `UPS1` binary record.
    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(SEQ_MAGIC)?;
        w.write_all(&(self.descriptors.len() as u32).to_le_bytes())?;
        w.write_all(&(self.token_dim() as u32).to_le_bytes())?;
        for (d, &o) in self.descriptors.iter().zip(&self.offsets) {
            let role = match d.role {
                Role::Target => 0u32,
                Role::Reference => 1u32,
            };
            for field in [d.height as u32, d.width as u32, role, d.index as u32, o as u32, d.tokens() as u32] {
                w.write_all(&field.to_le_bytes())?;
            }
        }
        for v in self.tokens.data() {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    /// Reads one `UPS1` record; `Ok(None)` at a clean end of stream.
    pub fn read_from(r: &mut impl Read) -> Result<Option<UnifiedSequence>> {
        let mut magic = [0u8; 4];
        match read_exact_or_eof(r, &mut magic)? {
            false => return Ok(None),
            true if &magic != SEQ_MAGIC => return Err(Error::Format("bad UPS1 magic".into())),
            true => {}
        }
        let nseg = read_u32(r)? as usize;
        let d = read_u32(r)? as usize;
        if nseg == 0 || nseg > MAX_REFERENCES + 1 || d == 0 {
            return Err(Error::Format(format!("bad UPS1 header ({nseg} segments, D={d})")));
        }
        let mut descriptors = Vec::with_capacity(nseg);
        let mut offsets = Vec::with_capacity(nseg);
        let mut rows = 0;
        for _ in 0..nseg {
            let f: Vec<u32> = (0..6).map(|_| read_u32(r)).collect::<Result<_>>()?;
            let role = match f[2] {
                0 => Role::Target,
                1 => Role::Reference,
                x => return Err(Error::Format(format!("bad role {x}"))),
            };
            let desc = ShapeDescriptor {
                height: f[0] as usize,
                width: f[1] as usize,
                role,
                index: f[3] as usize,
            };
            if desc.tokens() != f[5] as usize {
                return Err(Error::Format("descriptor/row count mismatch".into()));
            }
            offsets.push(f[4] as usize);
            rows += f[5] as usize;
            descriptors.push(desc);
        }
        let mut buf = vec![0u8; rows * d * 8];
        r.read_exact(&mut buf)
            .map_err(|e| Error::Format(format!("truncated UPS1 token data: {e}")))?;
        let data = buf
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
            .collect();
        let seq = UnifiedSequence {
            tokens: Tensor::matrix(rows, d, data)?,
            offsets,
            descriptors,
        };
        seq.validate()?;
        Ok(Some(seq))
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|e| Error::Format(format!("truncated UPS1 header: {e}")))?;
    Ok(u32::from_le_bytes(b))
}

fn read_exact_or_eof(r: &mut impl Read, buf: &mut [u8]) -> Result<bool> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) if filled == 0 => return Ok(false),
            Ok(0) => return Err(Error::Format("truncated UPS1 magic".into())),
            Ok(n) => filled += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(Error::Format(e.to_string())),
        }
    }
    Ok(true)
}

/// Replaces the target rows with fresh N(0, I) noise; reference rows are
/// copied untouched.
pub fn replace_target_with_noise(seq: &UnifiedSequence, seed: u64) -> UnifiedSequence {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (_, n) = seq.segment(0);
    let noise = Tensor::randn(vec![n, seq.token_dim()], &mut rng);
    seq.with_target(&noise).expect("noise has the target shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(c: usize, h: usize, w: usize, seed: u64) -> LatentGrid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        LatentGrid::new(Tensor::randn(vec![c, h, w], &mut rng)).unwrap()
    }

    #[test]
    fn single_block_layout() {
        let g = LatentGrid::from_fn(1, 2, 2, |_, y, x| [[1.0, 2.0], [3.0, 4.0]][y][x]).unwrap();
        let p = pack(&g);
        assert_eq!(p.tokens.shape(), &[1, 4]);
        assert_eq!(p.tokens.data(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(unpack(&p).unwrap(), g);
    }

    #[test]
    fn shape_arithmetic() {
        let p = pack(&grid(1, 4, 4, 0));
        assert_eq!(p.tokens.shape(), &[4, 4]);
        let p = pack(&grid(3, 6, 8, 0));
        assert_eq!(p.tokens.shape(), &[12, 12]);
        assert_eq!(p.tokens.len(), 3 * 6 * 8);
    }

    #[test]
    fn channel_major_within_block() {
        // channel 1 of block (0, 1) lands at positions 4..8 of token 1
        let g = LatentGrid::from_fn(2, 2, 4, |c, y, x| (c * 100 + y * 10 + x) as f64).unwrap();
        let p = pack(&g);
        assert_eq!(p.tokens.row(1), &[2., 3., 12., 13., 102., 103., 112., 113.]);
    }

    #[test]
    fn odd_sides_rejected() {
        assert!(LatentGrid::new(Tensor::zeros(vec![1, 3, 4])).is_err());
        assert!(LatentGrid::new(Tensor::zeros(vec![1, 4, 5])).is_err());
    }

    #[test]
    fn tampered_descriptor_rejected() {
        let mut p = pack(&grid(1, 4, 4, 1));
        p.descriptor.height = 6;
        assert!(unpack(&p).is_err());
    }

    #[test]
    fn unified_offsets() {
        let target = pack(&grid(1, 4, 4, 1));
        let r1 = pack(&grid(1, 4, 4, 2));
        let r2 = pack(&grid(1, 6, 6, 3));
        let u = build_unified(&target, &[r1.clone(), r2.clone()]).unwrap();
        assert_eq!(u.tokens().rows(), 17);
        assert_eq!(u.offsets(), &[0, 4, 8]);
        assert_eq!(u.descriptors()[2].role, Role::Reference);
        assert_eq!(u.descriptors()[2].index, 2);
        assert_eq!(u.segment_tokens(2), r2.tokens);
        assert_eq!(u.unpack_segment(1).unwrap(), unpack(&r1).unwrap());
        u.validate().unwrap();
    }

    #[test]
    fn unified_rejects_bad_reference_counts_and_widths() {
        let target = pack(&grid(1, 4, 4, 1));
        assert!(build_unified(&target, &[]).is_err());
        let many = vec![pack(&grid(1, 2, 2, 5)); 7];
        assert!(build_unified(&target, &many).is_err());
        let wide = pack(&grid(2, 2, 2, 5));
        assert!(build_unified(&target, &[wide]).is_err());
    }

    #[test]
    fn unified_enforces_pixel_budget() {
        // 256×256 latents are 512×512 pixels each; five of them exceed 1024²
        let target = pack(&LatentGrid::new(Tensor::zeros(vec![1, 256, 256])).unwrap());
        let r = target.clone();
        assert!(build_unified(&target, &[r.clone(), r.clone(), r.clone()]).is_ok());
        assert!(build_unified(&target, &[r.clone(), r.clone(), r.clone(), r]).is_err());
    }

    #[test]
    fn noise_replacement_keeps_references() {
        let target = pack(&grid(2, 8, 8, 1));
        let refs = [pack(&grid(2, 4, 4, 2)), pack(&grid(2, 6, 2, 3))];
        let u = build_unified(&target, &refs).unwrap();
        let n = replace_target_with_noise(&u, 42);
        for k in 1..u.num_segments() {
            let a: Vec<u64> = u.segment_tokens(k).data().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u64> = n.segment_tokens(k).data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b);
        }
        assert_ne!(n.target_tokens(), u.target_tokens());
        assert_eq!(replace_target_with_noise(&u, 42), n);
        assert_ne!(replace_target_with_noise(&u, 43), n);
    }

    #[test]
    fn noise_moments_approach_standard_normal() {
        let target = pack(&LatentGrid::new(Tensor::zeros(vec![4, 128, 128])).unwrap());
        let u = build_unified(&target, &[pack(&grid(4, 2, 2, 0))]).unwrap();
        let t = replace_target_with_noise(&u, 7).target_tokens();
        let n = t.len() as f64;
        let mean = t.mean();
        let var = t.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        assert!(mean.abs() < 5.0 / n.sqrt());
        assert!((var - 1.0).abs() < 0.02);
    }

    #[test]
    fn binary_record_roundtrip_and_truncation() {
        let target = pack(&grid(2, 4, 4, 1));
        let u = build_unified(&target, &[pack(&grid(2, 2, 6, 2))]).unwrap();
        let mut buf = Vec::new();
        u.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"UPS1");
        assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), 2);
        let back = UnifiedSequence::read_from(&mut buf.as_slice()).unwrap().unwrap();
        assert_eq!(back, u);
        let cut = &buf[..buf.len() - 3];
        assert!(UnifiedSequence::read_from(&mut &cut[..]).is_err());
        assert!(UnifiedSequence::read_from(&mut &b""[..]).unwrap().is_none());
    }
}
