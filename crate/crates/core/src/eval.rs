//! Sample-set metrics, oracle checks, conditioning accuracy and speedup.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::{classify_region, toy_decode, CompositionSample, ToyDistribution, PALETTE};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::networks::{Architecture, SeqCond, SeqNet, VelocityNet};
use crate::packing::{replace_target_with_noise, unpack, PackedSeq, UnifiedSequence};
use crate::samplers::{consistency_sample, euler_solve, VelocityField};
use crate::schedule::{interpolate_rows, score_from_velocity, TimePoint};
use crate::tensor::Tensor;

fn check_dims(a: &Tensor, b: &Tensor, op: &'static str) -> Result<()> {
    if a.shape().len() != 2 || b.shape().len() != 2 || a.cols() != b.cols() {
        return Err(Error::ShapeMismatch {
            op,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    Ok(())
}

/// Exact W₁ between two 1D empirical distributions: `∫ |F_a − F_b| dx`.
/// Sorts its inputs in place.
pub fn wasserstein_1d(a: &mut [f64], b: &mut [f64]) -> f64 {
    if a.is_empty() || b.is_empty() {
        return 0.0;
    }
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut prev = a[0].min(b[0]);
    let mut total = 0.0;
    while i < a.len() || j < b.len() {
        let next = match (a.get(i), b.get(j)) {
            (Some(&x), Some(&y)) => x.min(y),
            (Some(&x), None) => x,
            (None, Some(&y)) => y,
            (None, None) => unreachable!(),
        };
        total += (i as f64 / na - j as f64 / nb).abs() * (next - prev);
        while i < a.len() && a[i] == next {
            i += 1;
        }
        while j < b.len() && b[j] == next {
            j += 1;
        }
        prev = next;
    }
    total
}

/// Seeded unit directions in `dim` dimensions.
pub fn projections(dim: usize, n_proj: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_proj)
        .map(|_| loop {
            let v: Vec<f64> = (0..dim).map(|_| rng.sample(rand_distr::StandardNormal)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 1e-12 {
                break v.into_iter().map(|x| x / n).collect();
            }
        })
        .collect()
}

fn project(x: &Tensor, u: &[f64]) -> Vec<f64> {
    x.data()
        .chunks_exact(u.len())
        .map(|row| row.iter().zip(u).map(|(a, b)| a * b).sum())
        .collect()
}

/// Mean 1D W₁ over `n_proj` seeded random projections.
pub fn sliced_wasserstein(a: &Tensor, b: &Tensor, n_proj: usize, seed: u64) -> Result<f64> {
    sliced_wasserstein_with(Exec::default(), a, b, n_proj, seed)
}

pub fn sliced_wasserstein_with(exec: Exec, a: &Tensor, b: &Tensor, n_proj: usize, seed: u64) -> Result<f64> {
    check_dims(a, b, "sliced_wasserstein")?;
    if n_proj == 0 {
        return Err(Error::invalid("sliced_wasserstein needs at least one projection"));
    }
    let dirs = projections(a.cols(), n_proj, seed);
    let per = exec.map(n_proj, |k| wasserstein_1d(&mut project(a, &dirs[k]), &mut project(b, &dirs[k])));
    Ok(per.iter().sum::<f64>() / n_proj as f64)
}

/// Unbiased MMD² with kernel `exp(−‖x − y‖²/(2h²))`.
pub fn mmd_rbf(a: &Tensor, b: &Tensor, bandwidth: f64) -> Result<f64> {
    mmd_rbf_with(Exec::default(), a, b, bandwidth)
}

pub fn mmd_rbf_with(exec: Exec, a: &Tensor, b: &Tensor, bandwidth: f64) -> Result<f64> {
    check_dims(a, b, "mmd_rbf")?;
    if !(bandwidth > 0.0) {
        return Err(Error::invalid(format!("bandwidth {bandwidth} must be positive")));
    }
    let (n, m) = (a.rows(), b.rows());
    if n < 2 || m < 2 {
        return Err(Error::invalid("mmd_rbf needs at least two samples per set"));
    }
    let gamma = 1.0 / (2.0 * bandwidth * bandwidth);
    let k = |x: &[f64], y: &[f64]| (-gamma * x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum::<f64>()).exp();
    let cross_sum = |x: &Tensor, y: &Tensor, skip_diag: bool| -> f64 {
        exec.map(x.rows(), |i| {
            let xi = x.row(i);
            (0..y.rows())
                .filter(|&j| !(skip_diag && i == j))
                .map(|j| k(xi, y.row(j)))
                .sum::<f64>()
        })
        .iter()
        .sum()
    };
    let (nf, mf) = (n as f64, m as f64);
    Ok(cross_sum(a, a, true) / (nf * (nf - 1.0)) + cross_sum(b, b, true) / (mf * (mf - 1.0))
        - 2.0 * cross_sum(a, b, false) / (nf * mf))
}

/// Probe points drawn from the noisy marginal at each time in `times`.
pub fn score_probes(dist: &ToyDistribution, times: &[f64], per_time: usize, seed: u64) -> Result<(Tensor, Vec<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = times.len() * per_time;
    let x = dist.sample_with(n, &mut rng)?;
    let eps = Tensor::randn(x.shape().to_vec(), &mut rng);
    let t: Vec<f64> = times.iter().flat_map(|&t| std::iter::repeat_n(t, per_time)).collect();
    Ok((interpolate_rows(&x, &eps, &t)?, t))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    /// Per distinct time: `‖s_net − s_true‖ / ‖s_true‖` over that time's probes.
    pub per_time: Vec<(f64, f64)>,
    pub max_rel_error: f64,
}

/// Compares the score implied by `field` with the analytic score of `dist`.
pub fn score_oracle_check<F: VelocityField>(
    field: &F,
    cond: &F::Cond,
    dist: &ToyDistribution,
    x_t: &Tensor,
    t: &[f64],
) -> Result<ScoreReport> {
    let truth = dist.oracle_score(x_t, t)?;
    let v = field.velocity(x_t, t, cond, 1.0)?;
    let mut groups: BTreeMap<u64, (f64, f64, f64)> = BTreeMap::new();
    let d = x_t.cols();
    for (r, &tr) in t.iter().enumerate() {
        let row = |m: &Tensor| Tensor::matrix(1, d, m.row(r).to_vec());
        let s = score_from_velocity(&row(&v)?, &row(x_t)?, TimePoint::new(tr)?)?;
        let e = groups.entry(tr.to_bits()).or_insert((tr, 0.0, 0.0));
        for (a, b) in s.data().iter().zip(truth.row(r)) {
            e.1 += (a - b) * (a - b);
            e.2 += b * b;
        }
    }
    let mut per_time: Vec<(f64, f64)> = groups
        .into_values()
        .map(|(t, num, den)| {
            let rel = if den > 0.0 { (num / den).sqrt() } else { num.sqrt() };
            (t, rel)
        })
        .collect();
    per_time.sort_by(|a, b| a.0.total_cmp(&b.0));
    let max_rel_error = per_time.iter().map(|p| p.1).fold(0.0, f64::max);
    Ok(ScoreReport { per_time, max_rel_error })
}

/// Fills in the target tokens of noised unified sequences.
pub trait CompositionGenerator {
    fn generate(&self, noised: &[UnifiedSequence], seed: u64) -> Result<Vec<Tensor>>;
}

/// Few-step consistency sampling with a sequence network.
pub struct ConsistencyGenerator<'a> {
    pub net: &'a VelocityNet<SeqNet>,
    pub steps: usize,
}

impl CompositionGenerator for ConsistencyGenerator<'_> {
    fn generate(&self, noised: &[UnifiedSequence], seed: u64) -> Result<Vec<Tensor>> {
        let tokens = vec![crate::datasets::COMPOSE_TOKEN; noised.len()];
        let (eps, cond) = SeqCond::from_sequences(noised, &tokens)?;
        let out = consistency_sample(self.net, &eps, self.steps, &cond, seed)?.samples;
        split_rows(&out, &cond.target_rows())
    }
}

/// Paints each region with the mean colour of the reference that owns it.
pub struct OracleGenerator;

impl CompositionGenerator for OracleGenerator {
    fn generate(&self, noised: &[UnifiedSequence], _: u64) -> Result<Vec<Tensor>> {
        noised
            .iter()
            .map(|seq| {
                let colors: Vec<[f64; 3]> = (1..seq.num_segments())
                    .map(|k| {
                        let g = seq.unpack_segment(k)?;
                        let n = (g.height() * g.width()) as f64;
                        let mut m = [0.0; 3];
                        for (c, v) in m.iter_mut().enumerate() {
                            *v = g.values().data()[c * g.height() * g.width()..(c + 1) * g.height() * g.width()]
                                .iter()
                                .sum::<f64>()
                                / n;
                        }
                        Ok(m)
                    })
                    .collect::<Result<_>>()?;
                paint(seq, &colors)
            })
            .collect()
    }
}

/// Paints every region with a uniformly random palette colour.
pub struct RandomGenerator;

impl CompositionGenerator for RandomGenerator {
    fn generate(&self, noised: &[UnifiedSequence], seed: u64) -> Result<Vec<Tensor>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        noised
            .iter()
            .map(|seq| {
                let colors: Vec<[f64; 3]> = (1..seq.num_segments())
                    .map(|_| PALETTE[rng.random_range(0..PALETTE.len())])
                    .collect();
                paint(seq, &colors)
            })
            .collect()
    }
}

fn paint(seq: &UnifiedSequence, colors: &[[f64; 3]]) -> Result<Tensor> {
    let refs: Vec<crate::datasets::Reference> = colors
        .iter()
        .enumerate()
        .map(|(slot, rgb)| crate::datasets::Reference {
            slot,
            color: crate::datasets::nearest_color(rgb),
            image: Tensor::zeros(vec![3, 2, 2]),
        })
        .collect();
    let mut img = CompositionSample::new(refs)?.target_image;
    // keep the measured colours rather than their palette projection
    let (h, w) = (img.shape()[1], img.shape()[2]);
    for (slot, rgb) in colors.iter().enumerate() {
        let (y0, x0, side) = crate::datasets::region_box(slot);
        for (c, &v) in rgb.iter().enumerate() {
            for y in y0..y0 + side {
                for x in x0..x0 + side {
                    img.data_mut()[(c * h + y) * w + x] = v;
                }
            }
        }
    }
    let d = seq.descriptors()[0];
    let tokens = crate::packing::pack(&crate::datasets::toy_encode(&img)?).tokens;
    debug_assert_eq!(tokens.rows(), d.tokens());
    Ok(tokens)
}

fn split_rows(x: &Tensor, rows: &[usize]) -> Result<Vec<Tensor>> {
    let mut start = 0;
    rows.iter()
        .map(|&n| {
            let s = x.slice_rows(start, n);
            start += n;
            s
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditioningReport {
    pub accuracy: f64,
    pub chance: f64,
    /// K → (correct regions, total regions).
    pub per_k: BTreeMap<usize, (usize, usize)>,
}

impl ConditioningReport {
    pub fn accuracy_for(&self, k: usize) -> Option<f64> {
        self.per_k.get(&k).map(|&(c, n)| c as f64 / n as f64)
    }
}

/// Noises every target, regenerates it, decodes, and classifies the colour
/// of each referenced region against ground truth.
pub fn conditioning_accuracy<G: CompositionGenerator>(
    generator: &G,
    dataset: &[CompositionSample],
    batch: usize,
    seed: u64,
) -> Result<ConditioningReport> {
    if batch == 0 {
        return Err(Error::invalid("batch must be positive"));
    }
    let mut per_k: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for (b, chunk) in dataset.chunks(batch).enumerate() {
        let noised: Vec<UnifiedSequence> = chunk
            .iter()
            .enumerate()
            .map(|(i, s)| Ok(replace_target_with_noise(&s.unified()?, seed ^ ((b * batch + i) as u64).wrapping_mul(0x9E37_79B9))))
            .collect::<Result<_>>()?;
        let outputs = generator.generate(&noised, seed.wrapping_add(b as u64))?;
        for ((sample, seq), tokens) in chunk.iter().zip(&noised).zip(outputs) {
            let image = toy_decode(&unpack(&PackedSeq {
                tokens,
                descriptor: seq.descriptors()[0],
            })?)?;
            let entry = per_k.entry(sample.k()).or_insert((0, 0));
            for r in &sample.references {
                entry.0 += usize::from(classify_region(&image, r.slot) == r.color);
                entry.1 += 1;
            }
        }
    }
    let (c, n) = per_k.values().fold((0, 0), |acc, v| (acc.0 + v.0, acc.1 + v.1));
    Ok(ConditioningReport {
        accuracy: if n == 0 { 0.0 } else { c as f64 / n as f64 },
        chance: 1.0 / PALETTE.len() as f64,
        per_k,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeedupReport {
    pub euler_steps: usize,
    pub consistency_steps: usize,
    pub euler_nfe: usize,
    pub consistency_nfe: usize,
    pub nfe_ratio: f64,
    pub euler_wall_ns: u64,
    pub consistency_wall_ns: u64,
    pub wall_ratio: f64,
}

/// Times `euler_steps` of teacher Euler against `consistency_steps` of
/// student consistency sampling on the same noise; wall clock is the best of
/// `repeats` runs.
#[allow(clippy::too_many_arguments)]
pub fn speedup_report<A: Architecture>(
    teacher: &VelocityNet<A>,
    student: &VelocityNet<A>,
    eps: &Tensor,
    cond: &A::Cond,
    euler_steps: usize,
    consistency_steps: usize,
    repeats: usize,
    seed: u64,
) -> Result<SpeedupReport> {
    let repeats = repeats.max(1);
    let mut e_best = u64::MAX;
    let mut c_best = u64::MAX;
    let (mut e_nfe, mut c_nfe) = (0, 0);
    for _ in 0..repeats {
        let start = Instant::now();
        let e = euler_solve(teacher, eps, euler_steps, cond, 1.0)?;
        e_best = e_best.min(start.elapsed().as_nanos() as u64);
        let start = Instant::now();
        let c = consistency_sample(student, eps, consistency_steps, cond, seed)?;
        c_best = c_best.min(start.elapsed().as_nanos() as u64);
        e_nfe = e.nfe;
        c_nfe = c.nfe;
    }
    Ok(SpeedupReport {
        euler_steps,
        consistency_steps,
        euler_nfe: e_nfe,
        consistency_nfe: c_nfe,
        nfe_ratio: e_nfe as f64 / c_nfe as f64,
        euler_wall_ns: e_best,
        consistency_wall_ns: c_best,
        wall_ratio: e_best as f64 / c_best.max(1) as f64,
    })
}

/// Replicated sliced-Wasserstein protocol for point nets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FidelityConfig {
    pub count: usize,
    pub projections: usize,
    pub replicates: usize,
    pub euler_steps: usize,
    pub cfg_scale: f64,
    pub token: crate::networks::ConditionToken,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FidelityEntry {
    pub label: String,
    pub steps: usize,
    pub sw: f64,
    pub ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FidelityReport {
    /// Mean SW between two independent teacher sample sets.
    pub baseline: f64,
    pub entries: Vec<FidelityEntry>,
}

fn seeded_noise(rows: usize, cols: usize, seed: u64, stream: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    Tensor::randn(vec![rows, cols], &mut rng)
}

/// For each replicate `i`: teacher sets `R_i`, `R'_i` from independent
/// noise, baseline `SW(R_i, R'_i)`, and for every student `SW(S_i, R_i)`
/// with the student noise shared across students. Distances are averaged
/// over replicates.
pub fn fidelity_report(
    teacher: &VelocityNet<crate::networks::PointNet>,
    students: &[(&str, &VelocityNet<crate::networks::PointNet>, usize)],
    cfg: &FidelityConfig,
) -> Result<FidelityReport> {
    if cfg.replicates == 0 || cfg.count < 2 {
        return Err(Error::invalid("fidelity needs replicates ≥ 1 and count ≥ 2"));
    }
    let dim = teacher.arch.spec.dim;
    let n = cfg.count;
    let cond = vec![cfg.token; n];
    let teacher_set = |stream: u64| -> Result<Tensor> {
        Ok(euler_solve(teacher, &seeded_noise(n, dim, cfg.seed, stream), cfg.euler_steps, &cond, cfg.cfg_scale)?.samples)
    };
    let mut baseline = 0.0;
    let mut sums = vec![0.0; students.len()];
    for i in 0..cfg.replicates as u64 {
        let reference = teacher_set(3 * i)?;
        let other = teacher_set(3 * i + 1)?;
        baseline += sliced_wasserstein(&reference, &other, cfg.projections, cfg.seed ^ i)?;
        let eps = seeded_noise(n, dim, cfg.seed, 3 * i + 2);
        for (k, (_, net, steps)) in students.iter().enumerate() {
            let x = consistency_sample(*net, &eps, *steps, &cond, cfg.seed.wrapping_add(i))?.samples;
            sums[k] += sliced_wasserstein(&x, &reference, cfg.projections, cfg.seed ^ i)?;
        }
    }
    let r = cfg.replicates as f64;
    let baseline = baseline / r;
    let entries = students
        .iter()
        .zip(sums)
        .map(|((label, _, steps), s)| FidelityEntry {
            label: label.to_string(),
            steps: *steps,
            sw: s / r,
            ratio: s / r / baseline,
        })
        .collect();
    Ok(FidelityReport { baseline, entries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::make_composition_dataset;
    use crate::samplers::FnField;

    #[test]
    fn w1_point_masses_and_identity() {
        let mut a = vec![0.3];
        let mut b = vec![-1.2];
        assert!((wasserstein_1d(&mut a, &mut b) - 1.5).abs() < 1e-15);
        let mut c = vec![1.0, 2.0, 5.0];
        let mut d = c.clone();
        assert_eq!(wasserstein_1d(&mut c, &mut d), 0.0);
    }

    #[test]
    fn w1_unequal_sizes() {
        // {0, 1} vs {0.5}: CDF gap 1/2 over [0, 1]
        let mut a = vec![0.0, 1.0];
        let mut b = vec![0.5];
        assert!((wasserstein_1d(&mut a, &mut b) - 0.5).abs() < 1e-15);
        // ties inside one set
        let mut a = vec![0.0, 0.0, 3.0];
        let mut b = vec![0.0];
        assert!((wasserstein_1d(&mut a, &mut b) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn sw_in_one_dimension_is_w1() {
        let a = Tensor::matrix(1, 1, vec![2.0]).unwrap();
        let b = Tensor::matrix(1, 1, vec![-0.5]).unwrap();
        assert!((sliced_wasserstein(&a, &b, 16, 1).unwrap() - 2.5).abs() < 1e-12);
        assert!(sliced_wasserstein(&a, &Tensor::zeros(vec![1, 2]), 4, 0).is_err());
    }

    #[test]
    fn sw_gaussian_shift() {
        // large samples: SW ≈ mean |⟨u, μ⟩| over the same projections
        let mu = [1.5, 0.5];
        let n = 20_000;
        let a = Tensor::randn(vec![n, 2], &mut ChaCha8Rng::seed_from_u64(1));
        let b = Tensor::randn(vec![n, 2], &mut ChaCha8Rng::seed_from_u64(2)).map(|v| v);
        let b = Tensor::matrix(n, 2, b.data().chunks(2).flat_map(|r| [r[0] + mu[0], r[1] + mu[1]]).collect()).unwrap();
        let sw = sliced_wasserstein(&a, &b, 64, 3).unwrap();
        let expect: f64 = projections(2, 64, 3).iter().map(|u| (u[0] * mu[0] + u[1] * mu[1]).abs()).sum::<f64>() / 64.0;
        assert!((sw - expect).abs() < 0.03, "{sw} vs {expect}");
    }

    #[test]
    fn policies_agree_bitwise() {
        let a = Tensor::randn(vec![300, 3], &mut ChaCha8Rng::seed_from_u64(4));
        let b = Tensor::randn(vec![200, 3], &mut ChaCha8Rng::seed_from_u64(5));
        let sw: Vec<f64> = Exec::available().into_iter().map(|e| sliced_wasserstein_with(e, &a, &b, 32, 0).unwrap()).collect();
        let mmd: Vec<f64> = Exec::available().into_iter().map(|e| mmd_rbf_with(e, &a, &b, 1.0).unwrap()).collect();
        assert!(sw.windows(2).all(|w| w[0] == w[1]));
        assert!(mmd.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn mmd_same_distribution_is_small_and_separation_grows() {
        let draw = |seed, shift: f64| {
            Tensor::randn(vec![400, 2], &mut ChaCha8Rng::seed_from_u64(seed)).map(|v| v + shift)
        };
        let same = mmd_rbf(&draw(1, 0.0), &draw(2, 0.0), 1.0).unwrap();
        assert!(same.abs() < 0.01, "{same}");
        let vals: Vec<f64> = [0.5, 1.0, 2.0, 4.0].iter().map(|&s| mmd_rbf(&draw(1, 0.0), &draw(2, s), 1.0).unwrap()).collect();
        assert!(vals.windows(2).all(|w| w[1] > w[0]), "{vals:?}");
        assert!(mmd_rbf(&draw(1, 0.0), &Tensor::zeros(vec![1, 2]), 1.0).is_err());
        assert!(mmd_rbf(&draw(1, 0.0), &draw(2, 0.0), 0.0).is_err());
    }

    #[test]
    fn oracle_field_passes_score_check() {
        for dist in [ToyDistribution::StandardGaussian { dim: 2 }, ToyDistribution::bimodal_1d()] {
            let field = FnField(|x: &Tensor, t: &[f64]| dist.oracle_velocity(x, t));
            let (x, t) = score_probes(&dist, &[0.25, 0.5, 0.75], 50, 1).unwrap();
            let rep = score_oracle_check(&field, &(), &dist, &x, &t).unwrap();
            assert_eq!(rep.per_time.len(), 3);
            assert!(rep.max_rel_error < 1e-10, "{rep:?}");
        }
    }

    #[test]
    fn bad_field_is_reported_not_raised() {
        let dist = ToyDistribution::StandardGaussian { dim: 2 };
        let field = FnField(|x: &Tensor, _: &[f64]| Ok(x.map(|_| 1.0)));
        let (x, t) = score_probes(&dist, &[0.25, 0.5], 20, 2).unwrap();
        let rep = score_oracle_check(&field, &(), &dist, &x, &t).unwrap();
        assert!(rep.max_rel_error.is_finite() && rep.max_rel_error > 0.1);
    }

    #[test]
    fn oracle_and_random_generators_bracket_accuracy() {
        let data = make_composition_dataset(1, 6, 120, 3).unwrap();
        let oracle = conditioning_accuracy(&OracleGenerator, &data, 16, 0).unwrap();
        assert_eq!(oracle.accuracy, 1.0);
        let random = conditioning_accuracy(&RandomGenerator, &data, 16, 0).unwrap();
        assert!((random.accuracy - 0.125).abs() < 0.06, "{}", random.accuracy);
        assert_eq!(random.chance, 0.125);
    }
}
