//! Toy data sources with closed-form velocity oracles, the toy latent
//! encoder, and the synthetic region-composition task.

use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::networks::ConditionToken;
use crate::packing::{build_unified, pack, LatentGrid, PackedSeq, UnifiedSequence, MAX_REFERENCES};
use crate::schedule::check_rows;
use crate::tensor::Tensor;

/// Toy data distributions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ToyDistribution {
    StandardGaussian {
        dim: usize,
    },
    /// Isotropic Gaussian components `N(means[k], stds[k]² I)`.
    GaussianMixture {
        means: Vec<Vec<f64>>,
        stds: Vec<f64>,
        weights: Vec<f64>,
    },
    TwoMoons {
        noise: f64,
    },
    /// Uniform on the even cells of a `cells × cells` board over `[-h, h]²`.
    Checkerboard {
        cells: usize,
        half_width: f64,
    },
}

impl ToyDistribution {
    pub fn dim(&self) -> usize {
        match self {
            Self::StandardGaussian { dim } => *dim,
            Self::GaussianMixture { means, .. } => means.first().map_or(0, Vec::len),
            Self::TwoMoons { .. } | Self::Checkerboard { .. } => 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(m));
        match self {
            Self::StandardGaussian { dim } if *dim == 0 => bad("zero dimension".into()),
            Self::GaussianMixture { means, stds, weights } => {
                let d = self.dim();
                if means.is_empty() || d == 0 || means.iter().any(|m| m.len() != d) {
                    return bad("mixture means must be non-empty and equal length".into());
                }
                if stds.len() != means.len() || weights.len() != means.len() {
                    return bad("mixture needs one std and weight per component".into());
                }
                if stds.iter().any(|s| !(*s > 0.0)) || weights.iter().any(|w| !(*w >= 0.0)) {
                    return bad("mixture stds must be positive and weights non-negative".into());
                }
                let total: f64 = weights.iter().sum();
                if (total - 1.0).abs() > 1e-9 {
                    return bad(format!("mixture weights sum to {total}, not 1"));
                }
                Ok(())
            }
            Self::TwoMoons { noise } if !(*noise >= 0.0) => bad("negative noise".into()),
            Self::Checkerboard { cells, half_width } if *cells < 2 || !(*half_width > 0.0) => {
                bad("checkerboard needs ≥ 2 cells and positive width".into())
            }
            _ => Ok(()),
        }
    }

    /// Two-component 1-D mixture used by the teacher-quality checks.
    pub fn bimodal_1d() -> Self {
        Self::GaussianMixture {
            means: vec![vec![-1.5], vec![1.5]],
            stds: vec![0.5, 0.5],
            weights: vec![0.5, 0.5],
        }
    }

    /// Draws `n` rows; `sample_data(dist, n, seed)`.
    pub fn sample(&self, n: usize, seed: u64) -> Result<Tensor> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.sample_with(n, &mut rng)
    }

    pub fn sample_with<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Tensor> {
        if n == 0 {
            return Err(Error::invalid("sample count must be ≥ 1"));
        }
        self.validate()?;
        let d = self.dim();
        let mut data = Vec::with_capacity(n * d);
        for _ in 0..n {
            match self {
                Self::StandardGaussian { .. } => {
                    data.extend((0..d).map(|_| rng.sample::<f64, _>(StandardNormal)));
                }
                Self::GaussianMixture { means, stds, weights } => {
                    let k = pick(weights, rng.random::<f64>());
                    data.extend(
                        means[k]
                            .iter()
                            .map(|m| m + stds[k] * rng.sample::<f64, _>(StandardNormal)),
                    );
                }
                Self::TwoMoons { noise } => {
                    let theta = std::f64::consts::PI * rng.random::<f64>();
                    let (x, y) = if rng.random::<bool>() {
                        (theta.cos(), theta.sin())
                    } else {
                        (1.0 - theta.cos(), 0.5 - theta.sin())
                    };
                    let nx: f64 = rng.sample(StandardNormal);
                    let ny: f64 = rng.sample(StandardNormal);
                    // centred so the cloud sits around the origin
                    data.push(x - 0.5 + noise * nx);
                    data.push(y - 0.25 + noise * ny);
                }
                Self::Checkerboard { cells, half_width } => {
                    let cell = 2.0 * half_width / *cells as f64;
                    loop {
                        let i = rng.random_range(0..*cells);
                        let j = rng.random_range(0..*cells);
                        if (i + j) % 2 == 0 {
                            data.push(-half_width + cell * (i as f64 + rng.random::<f64>()));
                            data.push(-half_width + cell * (j as f64 + rng.random::<f64>()));
                            break;
                        }
                    }
                }
            }
        }
        Tensor::matrix(n, d, data)
    }

    /// Exact membership in the checkerboard support.
    pub fn in_support(&self, p: &[f64]) -> bool {
        match self {
            Self::Checkerboard { cells, half_width } => {
                let cell = 2.0 * half_width / *cells as f64;
                let idx = |v: f64| ((v + half_width) / cell).floor();
                let (i, j) = (idx(p[0]), idx(p[1]));
                let n = *cells as f64;
                (0.0..n).contains(&i) && (0.0..n).contains(&j) && (i as usize + j as usize).is_multiple_of(2)
            }
            _ => true,
        }
    }

    fn components(&self) -> Result<(Vec<Vec<f64>>, Vec<f64>, Vec<f64>)> {
        match self {
            Self::StandardGaussian { dim } => Ok((vec![vec![0.0; *dim]], vec![1.0], vec![1.0])),
            Self::GaussianMixture { means, stds, weights } => {
                self.validate()?;
                Ok((means.clone(), stds.clone(), weights.clone()))
            }
            _ => Err(Error::invalid(format!(
                "no closed-form oracle for {}",
                self.name()
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::StandardGaussian { .. } => "standard-gaussian",
            Self::GaussianMixture { .. } => "gaussian-mixture",
            Self::TwoMoons { .. } => "two-moons",
            Self::Checkerboard { .. } => "checkerboard",
        }
    }

    /// Posterior quantities per row: `(E[ε − x | x_t], ∇ log p_t(x_t))`.
    fn posterior(&self, x_t: &Tensor, t: &[f64]) -> Result<(Tensor, Tensor)> {
        let (means, stds, weights) = self.components()?;
        let d = means[0].len();
        if x_t.cols() != d {
            return Err(Error::ShapeMismatch {
                op: "oracle",
                left: vec![x_t.rows(), d],
                right: x_t.shape().to_vec(),
            });
        }
        check_rows(x_t, t, "oracle")?;
        let mut vel = Vec::with_capacity(x_t.len());
        let mut score = Vec::with_capacity(x_t.len());
        for (r, &tv) in t.iter().enumerate() {
            let x = x_t.row(r);
            let a = 1.0 - tv;
            // log responsibilities of each component for x_t
            let logs: Vec<f64> = means
                .iter()
                .zip(&stds)
                .zip(&weights)
                .map(|((m, s), w)| {
                    let var = a * a * s * s + tv * tv;
                    let sq: f64 = x.iter().zip(m).map(|(xi, mi)| (xi - a * mi).powi(2)).sum();
                    w.ln() - 0.5 * sq / var - 0.5 * d as f64 * var.ln()
                })
                .collect();
            let top = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logs.iter().map(|l| (l - top).exp()).sum();
            let resp: Vec<f64> = logs.iter().map(|l| (l - top).exp() / z).collect();
            let mut v = vec![0.0; d];
            let mut s = vec![0.0; d];
            for ((m, sd), rk) in means.iter().zip(&stds).zip(&resp) {
                let var = a * a * sd * sd + tv * tv;
                for i in 0..d {
                    let resid = x[i] - a * m[i];
                    let e_x = m[i] + a * sd * sd / var * resid;
                    let e_eps = tv / var * resid;
                    v[i] += rk * (e_eps - e_x);
                    s[i] += rk * (-resid / var);
                }
            }
            vel.extend(v);
            score.extend(s);
        }
        Ok((
            Tensor::new(x_t.shape().to_vec(), vel)?,
            Tensor::new(x_t.shape().to_vec(), score)?,
        ))
    }

    /// Optimal flow-matching velocity `E[ε − x | x_t]`, row `i` at time `t[i]`.
    pub fn oracle_velocity(&self, x_t: &Tensor, t: &[f64]) -> Result<Tensor> {
        Ok(self.posterior(x_t, t)?.0)
    }

    /// Marginal score `∇ log p_t(x_t)`.
    pub fn oracle_score(&self, x_t: &Tensor, t: &[f64]) -> Result<Tensor> {
        Ok(self.posterior(x_t, t)?.1)
    }
}

fn pick(weights: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (k, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return k;
        }
    }
    weights.len() - 1
}

/// Pixel channels of the composition images.
pub const IMAGE_CHANNELS: usize = 3;
/// Latent channels produced by [`toy_encode`].
pub const LATENT_CHANNELS: usize = 4;

/// Toy encoder: 2×2 average pool, then lift `[r, g, b] → [r, g, b, (r+g+b)/3]`.
pub fn toy_encode(image: &Tensor) -> Result<LatentGrid> {
    let s = image.shape();
    if s.len() != 3 || s[0] != IMAGE_CHANNELS {
        return Err(Error::invalid(format!("image must be 3×H×W, got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::invalid(format!("image sides must be even, got {h}×{w}")));
    }
    let px = |c: usize, y: usize, x: usize| image.data()[(c * h + y) * w + x];
    let (lh, lw) = (h / 2, w / 2);
    let mut pooled = vec![0.0; IMAGE_CHANNELS * lh * lw];
    for c in 0..IMAGE_CHANNELS {
        for y in 0..lh {
            for x in 0..lw {
                let sum = (px(c, 2 * y, 2 * x) + px(c, 2 * y, 2 * x + 1))
                    + (px(c, 2 * y + 1, 2 * x) + px(c, 2 * y + 1, 2 * x + 1));
                pooled[(c * lh + y) * lw + x] = sum / 4.0;
            }
        }
    }
    LatentGrid::from_fn(LATENT_CHANNELS, lh, lw, |c, y, x| {
        let at = |ch: usize| pooled[(ch * lh + y) * lw + x];
        if c < IMAGE_CHANNELS {
            at(c)
        } else {
            (at(0) + at(1) + at(2)) / 3.0
        }
    })
}

/// Inverse of [`toy_encode`] up to pooling loss: drop the lifted channel and
/// nearest-neighbour upsample.
pub fn toy_decode(latent: &LatentGrid) -> Result<Tensor> {
    if latent.channels() != LATENT_CHANNELS {
        return Err(Error::invalid(format!(
            "latent must have {LATENT_CHANNELS} channels, got {}",
            latent.channels()
        )));
    }
    let (h, w) = (2 * latent.height(), 2 * latent.width());
    let mut data = Vec::with_capacity(IMAGE_CHANNELS * h * w);
    for c in 0..IMAGE_CHANNELS {
        for y in 0..h {
            for x in 0..w {
                data.push(latent.at(c, y / 2, x / 2));
            }
        }
    }
    Tensor::new(vec![IMAGE_CHANNELS, h, w], data)
}

/// PSNR in dB for signals with the given peak-to-peak range.
pub fn psnr(a: &Tensor, b: &Tensor, range: f64) -> Result<f64> {
    let mse = a.mse(b)?;
    Ok(10.0 * (range * range / mse).log10())
}

/// Random piecewise-constant image: axis-aligned rectangles (sides ≥ 4 px)
/// of random colour over a random background, values in `[-1, 1]`.
pub fn piecewise_constant_image<R: Rng + ?Sized>(h: usize, w: usize, rects: usize, rng: &mut R) -> Tensor {
    const MIN_SIDE: usize = 4;
    assert!(h >= MIN_SIDE && w >= MIN_SIDE, "image smaller than one piece");
    let mut img = Tensor::zeros(vec![IMAGE_CHANNELS, h, w]);
    let bg: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
    for c in 0..IMAGE_CHANNELS {
        img.data_mut()[c * h * w..(c + 1) * h * w].fill(bg[c]);
    }
    for _ in 0..rects {
        let y0 = rng.random_range(0..=h - MIN_SIDE);
        let x0 = rng.random_range(0..=w - MIN_SIDE);
        let y1 = rng.random_range(y0 + MIN_SIDE..=h);
        let x1 = rng.random_range(x0 + MIN_SIDE..=w);
        let col: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        for c in 0..IMAGE_CHANNELS {
            for y in y0..y1 {
                for x in x0..x1 {
                    img.data_mut()[(c * h + y) * w + x] = col[c];
                }
            }
        }
    }
    img
}

/// Attribute vocabulary: the eight corners of the RGB cube.
pub const PALETTE: [[f64; 3]; 8] = [
    [-1.0, -1.0, -1.0],
    [-1.0, -1.0, 1.0],
    [-1.0, 1.0, -1.0],
    [-1.0, 1.0, 1.0],
    [1.0, -1.0, -1.0],
    [1.0, -1.0, 1.0],
    [1.0, 1.0, -1.0],
    [1.0, 1.0, 1.0],
];

/// Target canvas in pixels: 2 × 3 regions of 8 × 8.
pub const TARGET_HEIGHT: usize = 16;
pub const TARGET_WIDTH: usize = 24;
const REGION: usize = 8;
const REGION_COLS: usize = 3;
/// Texture amplitude on reference images.
const TEXTURE: f64 = 0.2;
/// Reference sizes in pixels; mixed resolutions.
const REFERENCE_SIZES: [(usize, usize); 3] = [(8, 8), (16, 16), (8, 16)];

/// Condition token used by every composition sample.
pub const COMPOSE_TOKEN: ConditionToken = ConditionToken(1);

/// Pixel box `(y0, x0, side)` of target region `slot`.
pub fn region_box(slot: usize) -> (usize, usize, usize) {
    (REGION * (slot / REGION_COLS), REGION * (slot % REGION_COLS), REGION)
}

/// One reference: the attribute it carries and the region it controls.
#[derive(Clone, Debug, PartialEq)]
pub struct Reference {
    pub slot: usize,
    pub color: usize,
    pub image: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompositionSample {
    pub references: Vec<Reference>,
    pub target_image: Tensor,
    pub cond: ConditionToken,
}

impl CompositionSample {
    /// Assembles the target from references: region `slot` takes the
    /// reference's palette colour, everything else stays background (0).
    pub fn new(references: Vec<Reference>) -> Result<Self> {
        if references.is_empty() || references.len() > MAX_REFERENCES {
            return Err(Error::invalid(format!(
                "K = {} outside 1..={MAX_REFERENCES}",
                references.len()
            )));
        }
        let mut used = [false; MAX_REFERENCES];
        for r in &references {
            if r.slot >= MAX_REFERENCES || r.color >= PALETTE.len() {
                return Err(Error::invalid(format!("bad reference slot {} / colour {}", r.slot, r.color)));
            }
            if std::mem::replace(&mut used[r.slot], true) {
                return Err(Error::invalid(format!("two references claim slot {}", r.slot)));
            }
        }
        let (h, w) = (TARGET_HEIGHT, TARGET_WIDTH);
        let mut img = Tensor::zeros(vec![IMAGE_CHANNELS, h, w]);
        for r in &references {
            let (y0, x0, side) = region_box(r.slot);
            for (c, &v) in PALETTE[r.color].iter().enumerate() {
                for y in y0..y0 + side {
                    for x in x0..x0 + side {
                        img.data_mut()[(c * h + y) * w + x] = v;
                    }
                }
            }
        }
        Ok(Self {
            references,
            target_image: img,
            cond: COMPOSE_TOKEN,
        })
    }

    pub fn k(&self) -> usize {
        self.references.len()
    }

    pub fn target_latent(&self) -> Result<LatentGrid> {
        toy_encode(&self.target_image)
    }

    pub fn packed_references(&self) -> Result<Vec<PackedSeq>> {
        self.references
            .iter()
            .map(|r| Ok(pack(&toy_encode(&r.image)?)))
            .collect()
    }

    /// Packed target followed by the packed references in slot order.
    pub fn unified(&self) -> Result<UnifiedSequence> {
        let mut refs: Vec<(usize, PackedSeq)> = self
            .references
            .iter()
            .map(|r| Ok((r.slot, pack(&toy_encode(&r.image)?))))
            .collect::<Result<_>>()?;
        refs.sort_by_key(|(s, _)| *s);
        let refs: Vec<PackedSeq> = refs.into_iter().map(|(_, p)| p).collect();
        build_unified(&pack(&self.target_latent()?), &refs)
    }
}

/// Textured reference image of one palette colour.
pub fn reference_image<R: Rng + ?Sized>(color: usize, h: usize, w: usize, rng: &mut R) -> Tensor {
    let mut img = Tensor::zeros(vec![IMAGE_CHANNELS, h, w]);
    let (bh, bw) = (h.div_ceil(4), w.div_ceil(4));
    let tex: Vec<f64> = (0..bh * bw).map(|_| rng.random_range(-TEXTURE..TEXTURE)).collect();
    for (c, &v) in PALETTE[color].iter().enumerate() {
        for y in 0..h {
            for x in 0..w {
                img.data_mut()[(c * h + y) * w + x] = v + tex[(y / 4) * bw + x / 4];
            }
        }
    }
    img
}

/// Nearest palette colour to the mean of region `slot` of a decoded target.
pub fn classify_region(image: &Tensor, slot: usize) -> usize {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let (y0, x0, side) = region_box(slot);
    let mut mean = [0.0; 3];
    for (c, m) in mean.iter_mut().enumerate() {
        let mut acc = 0.0;
        for y in y0..y0 + side {
            for x in x0..x0 + side {
                acc += image.data()[(c * h + y) * w + x];
            }
        }
        *m = acc / (side * side) as f64;
    }
    nearest_color(&mean)
}

/// Palette index nearest to an RGB value.
pub fn nearest_color(rgb: &[f64; 3]) -> usize {
    (0..PALETTE.len())
        .min_by(|&a, &b| {
            let da: f64 = PALETTE[a].iter().zip(rgb).map(|(p, v)| (p - v).powi(2)).sum();
            let db: f64 = PALETTE[b].iter().zip(rgb).map(|(p, v)| (p - v).powi(2)).sum();
            da.total_cmp(&db)
        })
        .expect("non-empty palette")
}

/// `n` composition samples with `K` uniform in `k_min..=k_max`. Reference
/// `k` owns region `k`.
pub fn make_composition_dataset(k_min: usize, k_max: usize, n: usize, seed: u64) -> Result<Vec<CompositionSample>> {
    if k_min == 0 || k_max > MAX_REFERENCES || k_min > k_max {
        return Err(Error::invalid(format!(
            "K range {k_min}..={k_max} outside 1..={MAX_REFERENCES}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let k = rng.random_range(k_min..=k_max);
            let refs = (0..k)
                .map(|slot| {
                    let color = rng.random_range(0..PALETTE.len());
                    let (h, w) = REFERENCE_SIZES[rng.random_range(0..REFERENCE_SIZES.len())];
                    Reference {
                        slot,
                        color,
                        image: reference_image(color, h, w, &mut rng),
                    }
                })
                .collect();
            CompositionSample::new(refs)
        })
        .collect()
}

/// Summary written next to a dumped dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub count: usize,
    /// `k_histogram[k - 1]` samples have `k` references.
    pub k_histogram: Vec<usize>,
    pub seed: u64,
    pub format: String,
}

/// Writes `<stem>.ups` (concatenated `UPS1` records) and `<stem>.json`.
pub fn dump_dataset(samples: &[CompositionSample], seed: u64, dir: &Path, stem: &str) -> Result<DatasetManifest> {
    let path = dir.join(format!("{stem}.ups"));
    let file = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut w = BufWriter::new(file);
    let mut hist = vec![0; MAX_REFERENCES];
    for s in samples {
        s.unified()?.write_to(&mut w).map_err(|e| Error::io(&path, e))?;
        hist[s.k() - 1] += 1;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    let manifest = DatasetManifest {
        count: samples.len(),
        k_histogram: hist,
        seed,
        format: "UPS1".into(),
    };
    let mpath = dir.join(format!("{stem}.json"));
    std::fs::write(&mpath, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&mpath, e))?;
    Ok(manifest)
}

/// Reads back what [`dump_dataset`] wrote.
pub fn load_dataset(dir: &Path, stem: &str) -> Result<(Vec<UnifiedSequence>, DatasetManifest)> {
    let mpath = dir.join(format!("{stem}.json"));
    let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text)?;
    let path = dir.join(format!("{stem}.ups"));
    let file = std::fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
    let mut r = BufReader::new(file);
    let mut seqs = Vec::new();
    while let Some(s) = UnifiedSequence::read_from(&mut r)? {
        seqs.push(s);
    }
    if seqs.len() != manifest.count {
        return Err(Error::Format(format!(
            "manifest lists {} samples, file holds {}",
            manifest.count,
            seqs.len()
        )));
    }
    Ok((seqs, manifest))
}
