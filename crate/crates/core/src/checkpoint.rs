//! Binary checkpoints: `"UPCK"`, `u32` version, `u32` header length, JSON
//! header, header CRC32, then one blob per tensor (`f64` little-endian)
//! each followed by its CRC32. All integers are little-endian.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::networks::ArchSpec;
use crate::optim::{AdamWConfig, OptimState};
use crate::params::ParamSet;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"UPCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub arch: ArchSpec,
    pub params: ParamSet,
    pub optim: Option<OptimState>,
    pub step: u64,
    pub config_hash: String,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum BlobKind {
    Param,
    FirstMoment,
    SecondMoment,
}

#[derive(Serialize, Deserialize)]
struct BlobEntry {
    name: String,
    kind: BlobKind,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct OptimHeader {
    config: AdamWConfig,
    step: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    arch: ArchSpec,
    step: u64,
    config_hash: String,
    optim: Option<OptimHeader>,
    blobs: Vec<BlobEntry>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut blobs = Vec::new();
        let mut tensors: Vec<&Tensor> = Vec::new();
        for (name, t) in self.params.iter() {
            blobs.push(BlobEntry { name: name.to_string(), kind: BlobKind::Param, shape: t.shape().to_vec() });
            tensors.push(t);
        }
        if let Some(opt) = &self.optim {
            for (name, m, v) in opt.moments() {
                blobs.push(BlobEntry { name: name.to_string(), kind: BlobKind::FirstMoment, shape: m.shape().to_vec() });
                tensors.push(m);
                blobs.push(BlobEntry { name: name.to_string(), kind: BlobKind::SecondMoment, shape: v.shape().to_vec() });
                tensors.push(v);
            }
        }
        let header = Header {
            arch: self.arch.clone(),
            step: self.step,
            config_hash: self.config_hash.clone(),
            optim: self.optim.as_ref().map(|o| OptimHeader { config: o.config, step: o.step_count() }),
            blobs,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + json.len() + tensors.iter().map(|t| t.len() * 8 + 4).sum::<usize>());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&crc32fast::hash(&json).to_le_bytes());
        for t in tensors {
            let start = out.len();
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
            let crc = crc32fast::hash(&out[start..]);
            out.extend_from_slice(&crc.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(Error::Version { found: version, expected: FORMAT_VERSION });
        }
        let len = r.u32("header length")? as usize;
        let json = r.take(len, "header")?;
        if r.u32("header checksum")? != crc32fast::hash(json) {
            return Err(Error::Checksum("header".into()));
        }
        let header: Header = serde_json::from_slice(json)?;
        let mut params = ParamSet::new();
        let mut first = Vec::new();
        let mut second = Vec::new();
        for b in &header.blobs {
            let n: usize = b.shape.iter().product();
            let raw = r.take(n * 8, &b.name)?;
            if r.u32(&b.name)? != crc32fast::hash(raw) {
                return Err(Error::Checksum(b.name.clone()));
            }
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            let t = Tensor::new(b.shape.clone(), data)?;
            match b.kind {
                BlobKind::Param => params.insert(b.name.clone(), t)?,
                BlobKind::FirstMoment => first.push((b.name.clone(), t)),
                BlobKind::SecondMoment => second.push(t),
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        if first.len() != second.len() {
            return Err(Error::Format("unpaired optimizer moments".into()));
        }
        let optim = header.optim.map(|o| {
            OptimState::from_parts(o.config, o.step, first.into_iter().zip(second).map(|((k, m), v)| (k, m, v)))
        });
        Ok(Self { arch: header.arch, params, optim, step: header.step, config_hash: header.config_hash })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Checksum(format!("file truncated inside {what}"))),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let bytes = ckpt.to_bytes()?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::networks::{PointNet, PointNetSpec, VelocityNet};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample(with_optim: bool) -> Checkpoint {
        let arch = PointNet::new(PointNetSpec { hidden: 8, depth: 2, ..Default::default() }).unwrap();
        let mut net = VelocityNet::new(arch, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let optim = with_optim.then(|| {
            let mut o = OptimState::new(AdamWConfig::default());
            let names: Vec<String> = net.params.names().map(String::from).collect();
            for n in &names {
                let g = net.params.get(n).unwrap().map(|v| v * 0.5 + 0.1);
                net.params.set_grad(n, g).unwrap();
            }
            o.step(&mut net.params).unwrap();
            net.params.zero_grads();
            o
        });
        Checkpoint { arch: ArchSpec::Point(PointNetSpec { hidden: 8, depth: 2, ..Default::default() }), params: net.params, optim, step: 17, config_hash: "abc".into() }
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        for with in [false, true] {
            let c = sample(with);
            let bytes = c.to_bytes().unwrap();
            let back = Checkpoint::from_bytes(&bytes).unwrap();
            assert_eq!(back, c);
            assert_eq!(back.to_bytes().unwrap(), bytes);
        }
    }

    #[test]
    fn truncation_and_corruption_are_detected() {
        let bytes = sample(true).to_bytes().unwrap();
        for cut in [bytes.len() - 1, bytes.len() - 9, bytes.len() / 2] {
            assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::Checksum(_))), "cut {cut}");
        }
        let mut flipped = bytes.clone();
        let last = flipped.len() - 20;
        flipped[last] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&flipped), Err(Error::Checksum(_))));
    }

    #[test]
    fn version_and_magic_are_checked() {
        let mut bytes = sample(false).to_bytes().unwrap();
        bytes[4] = 9;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Version { found: 9, .. })));
        bytes[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ckpt");
        let c = sample(true);
        save_checkpoint(&p, &c).unwrap();
        assert_eq!(load_checkpoint(&p).unwrap(), c);
        assert!(matches!(load_checkpoint(&dir.path().join("missing")), Err(Error::Io { .. })));
    }
}
