use slimcae::checkpoint::{to_bytes, Storage};
use slimcae::data::{make_synthetic, Dataset, SyntheticKind};
use slimcae::model::{SlimCae, SlimCaeConfig};
use slimcae::training::{run_scheduled, train_naive, validate_rd, AdamConfig, ScheduleParams, TrainLog, Trainer};
use slimcae::Tensor4;

fn adam() -> AdamConfig {
    AdamConfig { lr: 3e-3, entropy_lr: 3e-2, ..AdamConfig::default() }
}

fn trained(kind: SyntheticKind, lambda: f64, iterations: usize, seed: u64) -> SlimCae<f64> {
    let mut m = SlimCae::<f64>::new(SlimCaeConfig::desk(), seed).unwrap();
    let data = Dataset::new(make_synthetic(kind, 32, 24, seed), 24, 4, seed).unwrap();
    let mut t = Trainer::new(&m, adam(), seed).unwrap();
    train_naive(&mut m, &mut t, &data, lambda, iterations, &mut TrainLog::default()).unwrap();
    m
}

fn mean_rate(m: &SlimCae<f64>, images: &[Tensor4<f64>], level: usize) -> f64 {
    images.iter().map(|x| m.rd_point(x, level).unwrap().rate).sum::<f64>() / images.len() as f64
}

#[test]
fn distortion_only_training_reduces_mse_on_a_single_image() {
    let x = make_synthetic(SyntheticKind::GaussianBlobs, 1, 24, 4);
    let mut m = SlimCae::<f64>::new(SlimCaeConfig::desk(), 4).unwrap();
    let data = Dataset::new(x.clone(), 24, 1, 4).unwrap();
    let before = validate_rd(&m, &x).unwrap();
    let mut t = Trainer::new(&m, adam(), 4).unwrap();
    train_naive(&mut m, &mut t, &data, 0.0, 150, &mut TrainLog::default()).unwrap();
    let after = validate_rd(&m, &x).unwrap();
    for (b, a) in before.iter().zip(&after) {
        assert!(a.psnr > b.psnr + 3.0, "level {}: {} -> {}", b.level, b.psnr, a.psnr);
    }
}

#[test]
fn a_constant_image_costs_almost_nothing() {
    let x = make_synthetic(SyntheticKind::Constant, 1, 24, 6);
    let mut m = SlimCae::<f64>::new(SlimCaeConfig::desk(), 6).unwrap();
    let data = Dataset::new(x.clone(), 24, 4, 6).unwrap();
    let mut t = Trainer::new(&m, adam(), 6).unwrap();
    train_naive(&mut m, &mut t, &data, 0.05, 300, &mut TrainLog::default()).unwrap();
    for k in 0..m.levels() {
        let r = mean_rate(&m, &x, k);
        assert!(r < 0.01, "level {}: {r} bpp", k + 1);
    }
}

#[test]
fn smoother_noise_trains_to_fewer_bits() {
    let lo = SyntheticKind::BandLimitedNoise { cutoff: 0.02 };
    let hi = SyntheticKind::BandLimitedNoise { cutoff: 0.05 };
    let (a, b) = (trained(lo, 0.01, 600, 7), trained(hi, 0.01, 600, 7));
    let va = validate_rd(&a, &make_synthetic(lo, 4, 24, 70)).unwrap();
    let vb = validate_rd(&b, &make_synthetic(hi, 4, 24, 70)).unwrap();
    // lower rate and higher PSNR at every level: fewer bits at equal quality
    for (pa, pb) in va.iter().zip(&vb) {
        assert!(pa.rate < pb.rate && pa.psnr > pb.psnr, "level {}: {pa:?} vs {pb:?}", pa.level + 1);
    }
}

fn scheduled(seed: u64) -> (SlimCae<f64>, Vec<f64>, TrainLog) {
    let mut m = SlimCae::<f64>::new(SlimCaeConfig::desk(), seed).unwrap();
    let mut images = make_synthetic(SyntheticKind::GaussianBlobs, 36, 24, seed);
    let val = images.split_off(32);
    let data = Dataset::new(images, 24, 4, seed).unwrap();
    let t = Trainer::new(&m, adam(), seed).unwrap();
    let params = ScheduleParams { lambda_top: 0.01, kappa: 1.25, iterations: 10, max_steps: 3 };
    let mut log = TrainLog::default();
    let (lambdas, _) = run_scheduled(&mut m, t, params, &data, &val, 60, 20, &mut log).unwrap();
    (m, lambdas, log)
}

#[test]
fn scheduled_tradeoffs_only_grow_and_frozen_levels_stay_put() {
    let (_, lambdas, log) = scheduled(9);
    assert_eq!(*lambdas.last().unwrap(), 0.01);
    assert!(lambdas.windows(2).all(|p| p[0] >= p[1]), "{lambdas:?}");
    let records: Vec<_> = log.records.iter().filter(|r| r.phase == "schedule").collect();
    assert!(!records.is_empty());
    for p in records.windows(2) {
        for (j, (a, b)) in p[0].lambdas.iter().zip(&p[1].lambdas).enumerate() {
            assert!(b >= a, "tradeoff {} fell from {a} to {b}", j + 1);
        }
        // levels above the one being scheduled never move
        if let Some(i) = p[1].level {
            assert_eq!(p[0].lambdas[i + 1..], p[1].lambdas[i + 1..]);
        }
    }
    let last = records.last().unwrap();
    assert_eq!(last.lambdas, lambdas);
}

#[test]
fn scheduled_runs_are_bit_reproducible() {
    let (a, la, _) = scheduled(12);
    let (b, lb, _) = scheduled(12);
    assert_eq!(la, lb);
    assert_eq!(to_bytes(&a, Storage::F64).unwrap(), to_bytes(&b, Storage::F64).unwrap());
}
