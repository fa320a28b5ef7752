use flowlab::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use flowlab::datasets::ToyDistribution;
use flowlab::eval::{mmd_rbf, mmd_rbf_with, sliced_wasserstein, sliced_wasserstein_with};
use flowlab::exec::{gemm, gemm_naive, Exec, MatRef};
use flowlab::networks::{Architecture, ArchSpec, ConditionToken, PointNet, PointNetSpec, VelocityNet};
use flowlab::optim::{AdamWConfig, OptimState};
use flowlab::packing::{pack, unpack, LatentGrid};
use flowlab::schedule::{interpolate_rows, velocity_target};
use flowlab::train::{fm_step, sample_times};
use flowlab::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn randn(rows: usize, cols: usize, seed: u64) -> Tensor {
    Tensor::randn(vec![rows, cols], &mut ChaCha8Rng::seed_from_u64(seed))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pack_unpack_is_bit_exact(c in 1usize..6, hh in 1usize..12, hw in 1usize..12, seed in any::<u64>()) {
        let g = LatentGrid::new(Tensor::randn(vec![c, 2 * hh, 2 * hw], &mut ChaCha8Rng::seed_from_u64(seed))).unwrap();
        let p = pack(&g);
        prop_assert_eq!(p.tokens.rows(), hh * hw);
        prop_assert_eq!(p.tokens.cols(), 4 * c);
        let back = unpack(&p).unwrap();
        prop_assert_eq!(back.values().shape(), g.values().shape());
        for (a, b) in back.values().data().iter().zip(g.values().data()) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn sliced_wasserstein_is_a_symmetric_discrepancy(seed in any::<u64>(), n in 5usize..60, m in 5usize..60) {
        let a = randn(n, 3, seed);
        let b = randn(m, 3, seed.wrapping_add(1));
        prop_assert_eq!(sliced_wasserstein(&a, &a, 16, 1).unwrap(), 0.0);
        let ab = sliced_wasserstein(&a, &b, 16, 1).unwrap();
        let ba = sliced_wasserstein(&b, &a, 16, 1).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() < 1e-12);
    }
}

#[test]
fn sliced_wasserstein_of_a_translation_is_mean_projected_shift() {
    let a = randn(300, 2, 1);
    let shift = [0.8, -0.3];
    let b = Tensor::new(
        a.shape().to_vec(),
        a.data().iter().enumerate().map(|(i, v)| v + shift[i % 2]).collect(),
    )
    .unwrap();
    let dirs = flowlab::eval::projections(2, 64, 7);
    let expect = dirs.iter().map(|u| (u[0] * shift[0] + u[1] * shift[1]).abs()).sum::<f64>() / 64.0;
    let sw = sliced_wasserstein(&a, &b, 64, 7).unwrap();
    assert!((sw - expect).abs() < 1e-12, "{sw} vs {expect}");
}

#[test]
fn execution_policies_agree_bitwise() {
    let a = randn(70, 45, 2);
    let b = randn(45, 33, 3);
    let reference = gemm_naive(MatRef::new(a.data(), 70, 45), MatRef::new(b.data(), 45, 33));
    let x = randn(400, 2, 4);
    let y = randn(350, 2, 5);
    let sw: Vec<f64> = Exec::available().into_iter().map(|e| sliced_wasserstein_with(e, &x, &y, 32, 9).unwrap()).collect();
    let mmd: Vec<f64> = Exec::available().into_iter().map(|e| mmd_rbf_with(e, &x, &y, 0.5).unwrap()).collect();
    let prods: Vec<Vec<f64>> = Exec::available()
        .into_iter()
        .map(|e| gemm(e, MatRef::new(a.data(), 70, 45), MatRef::new(b.data(), 45, 33)))
        .collect();
    assert!(sw.windows(2).all(|w| w[0].to_bits() == w[1].to_bits()));
    assert!(mmd.windows(2).all(|w| w[0].to_bits() == w[1].to_bits()));
    assert!(prods.windows(2).all(|w| w[0] == w[1]));
    for (p, q) in prods[0].iter().zip(&reference) {
        assert!((p - q).abs() < 1e-12);
    }
}

#[test]
fn mmd_separates_shifted_sets() {
    let a = randn(300, 2, 6);
    let b = randn(300, 2, 7);
    let c = Tensor::new(b.shape().to_vec(), b.data().iter().map(|v| v + 1.0).collect()).unwrap();
    let same = mmd_rbf(&a, &b, 0.5).unwrap();
    let shifted = mmd_rbf(&a, &c, 0.5).unwrap();
    assert!(same.abs() < 0.02, "{same}");
    assert!(shifted > 10.0 * same.abs().max(1e-3), "{shifted} vs {same}");
}

#[test]
fn reloaded_checkpoint_resumes_identically() {
    let spec = PointNetSpec { hidden: 16, depth: 2, ..Default::default() };
    let mut net = VelocityNet::new(PointNet::new(spec).unwrap(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let mut opt = OptimState::new(AdamWConfig::default().with_lr(1e-2));
    let dist = ToyDistribution::TwoMoons { noise: 0.05 };
    let cond = vec![ConditionToken(1); 64];
    let batch = |step: u64| {
        let mut r = ChaCha8Rng::seed_from_u64(100 + step);
        let x = dist.sample_with(64, &mut r).unwrap();
        let e = Tensor::randn(vec![64, 2], &mut r);
        let t = sample_times(64, 0.002, 0.998, &mut r);
        (x, e, t)
    };
    for step in 0..5 {
        let (x, e, t) = batch(step);
        fm_step(&mut net, &mut opt, &x, &cond, &t, &e, 1e-2).unwrap();
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mid.ckpt");
    net.params.zero_grads();
    let ckpt = Checkpoint {
        arch: net.arch.spec(),
        params: net.params.clone(),
        optim: Some(opt.clone()),
        step: opt.step_count(),
        config_hash: "test".into(),
    };
    save_checkpoint(&path, &ckpt).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    let ArchSpec::Point(spec) = loaded.arch else { panic!("point net expected") };
    let mut resumed = VelocityNet::from_params(PointNet::new(spec).unwrap(), loaded.params);
    let mut resumed_opt = loaded.optim.unwrap();
    assert_eq!(resumed_opt.step_count(), 5);

    for step in 5..8 {
        let (x, e, t) = batch(step);
        let a = fm_step(&mut net, &mut opt, &x, &cond, &t, &e, 1e-2).unwrap();
        let b = fm_step(&mut resumed, &mut resumed_opt, &x, &cond, &t, &e, 1e-2).unwrap();
        assert_eq!(a.to_bits(), b.to_bits(), "step {step}");
    }
}

#[test]
fn mixture_oracle_minimises_the_flow_matching_loss() {
    // E[ε − x | x_t] is the regression optimum: any perturbation raises the loss
    let dist = ToyDistribution::GaussianMixture {
        means: vec![vec![-1.0, 0.0], vec![1.0, 0.5]],
        stds: vec![0.3, 0.5],
        weights: vec![0.4, 0.6],
    };
    let mut r = ChaCha8Rng::seed_from_u64(3);
    let n = 20_000;
    let x = dist.sample_with(n, &mut r).unwrap();
    let e = Tensor::randn(vec![n, 2], &mut r);
    let t = sample_times(n, 0.02, 0.98, &mut r);
    let x_t = interpolate_rows(&x, &e, &t).unwrap();
    let target = velocity_target(&x, &e).unwrap();
    let oracle = dist.oracle_velocity(&x_t, &t).unwrap();
    let best = oracle.mse(&target).unwrap();
    for (scale, bias) in [(1.05, 0.0), (0.95, 0.0), (1.0, 0.05), (1.0, -0.05)] {
        let other = oracle.map(|v| scale * v + bias);
        assert!(other.mse(&target).unwrap() > best, "scale {scale} bias {bias}");
    }
}

#[test]
fn single_component_oracle_is_a_shifted_gaussian() {
    let mu = [0.7, -1.2];
    let one = ToyDistribution::GaussianMixture { means: vec![mu.to_vec()], stds: vec![1.0], weights: vec![1.0] };
    let std = ToyDistribution::StandardGaussian { dim: 2 };
    let x_t = randn(50, 2, 8);
    let t: Vec<f64> = (0..50).map(|i| 0.01 + 0.98 * i as f64 / 49.0).collect();
    // x_t under N(μ, I) is x_t − (1−t)μ under N(0, I); velocity shifts by −μ
    let shifted: Vec<f64> = x_t
        .data()
        .iter()
        .enumerate()
        .map(|(i, v)| v - (1.0 - t[i / 2]) * mu[i % 2])
        .collect();
    let base = std.oracle_velocity(&Tensor::new(vec![50, 2], shifted).unwrap(), &t).unwrap();
    let got = one.oracle_velocity(&x_t, &t).unwrap();
    for (i, (g, b)) in got.data().iter().zip(base.data()).enumerate() {
        assert!((g - (b - mu[i % 2])).abs() < 1e-12);
    }
}
