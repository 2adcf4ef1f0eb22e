//! Acceptance suite: one line per criterion, non-zero exit if any fails.
//!
//! Run with `cargo test -p slimcae-cli --test acceptance`.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use slimcae::checkpoint;
use slimcae::codec::{decode_image, encode_image, ideal_bits, range_decode, range_encode};
use slimcae::data::{load_image, make_synthetic, save_image, to_rgb8, SyntheticKind};
use slimcae::entropy::ChannelCdf;
use slimcae::eval::{flops_count, gdn_param_bytes, independent_params, total_params, BYTES_PER_VALUE};
use slimcae::gradcheck::{probe, ProbeOp};
use slimcae::model::{psnr, RdPoint, SlimCaeConfig};
use slimcae::slim::{GdnVariant, WidthSet};
use slimcae::training::{rate_spread, training_noise, TrainState};
use slimcae::{SlimCae64, Tensor4};

const MB: f64 = 1024.0 * 1024.0;
const SEED: u64 = 1;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome { passed, detail: detail.into() }
}

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_slimcae")
}

fn run(args: &[&str]) -> String {
    let out = Command::new(bin()).args(args).env("RUST_LOG", "warn").output().expect("spawn slimcae");
    assert!(
        out.status.success(),
        "slimcae {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> T {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

/// Desk-scale runs shared by criteria 5, 6, 7, 9 and 10.
struct Runs {
    scheduled: PathBuf,
    repeat: PathBuf,
    naive: PathBuf,
    _tmp: tempfile::TempDir,
}

fn train(dir: &Path, regime: &str, extra: &[&str]) {
    let seed = SEED.to_string();
    let mut args = vec!["train", "--regime", regime, "--seed", &seed, "--synthetic", "gaussian_blobs", "--out"];
    let d = dir.to_str().unwrap();
    args.push(d);
    args.extend_from_slice(extra);
    run(&args);
}

fn desk_runs() -> Runs {
    let tmp = tempfile::tempdir().unwrap();
    let scheduled = tmp.path().join("scheduled");
    let repeat = tmp.path().join("repeat");
    let naive = tmp.path().join("naive");
    train(&scheduled, "scheduled", &[]);
    train(&repeat, "scheduled", &[]);
    let state = TrainState::from_json(&std::fs::read_to_string(scheduled.join("state.json")).unwrap()).unwrap();
    let budget = state.trainer.step.to_string();
    train(&naive, "naive", &["--iterations", &budget]);
    Runs { scheduled, repeat, naive, _tmp: tmp }
}

fn model(dir: &Path) -> SlimCae64 {
    checkpoint::load(&dir.join("model.ckpt")).unwrap()
}

fn validation_images() -> Vec<Tensor4<f64>> {
    // same construction as the training run's validation split
    let mut all = make_synthetic(SyntheticKind::GaussianBlobs, 256 + 10, 24, SEED);
    all.split_off(256)
}

fn c1_nesting() -> Outcome {
    let mut worst = 0.0f64;
    for (i, variant) in GdnVariant::ALL.into_iter().enumerate() {
        for seed in 0..3u64 {
            let cfg = SlimCaeConfig::desk().with_variant(variant);
            let m = SlimCae64::new(cfg, 100 + seed).unwrap();
            let x = make_synthetic(SyntheticKind::BandLimitedNoise { cutoff: 0.3 }, 2, 32, seed).remove(1);
            let (xp, _, _) = m.pad(&x).unwrap();
            for k in 0..m.levels() {
                let single = m.extract_level(k).unwrap();
                let z = m.encode_latent(&xp, k).unwrap();
                let zs = single.encode_latent(&xp, 0).unwrap();
                worst = worst.max(z.max_abs_diff(&zs).unwrap());
                let noise = training_noise::<f64>(seed + i as u64, 0, z.shape());
                let zn = z.zip_map(&noise, |a, b| a + b).unwrap();
                let y = m.decode_latent(&zn, k).unwrap();
                let ys = single.decode_latent(&zn, 0).unwrap();
                worst = worst.max(y.max_abs_diff(&ys).unwrap());
                let a = m.rd_point(&x, k).unwrap();
                let b = single.rd_point(&x, 0).unwrap();
                worst = worst.max((a.rate - b.rate).abs()).max((a.psnr - b.psnr).abs());
            }
        }
    }
    outcome(worst <= 1e-9, format!("max abs diff {worst:.2e} over 3 variants x 3 seeds x 3 levels"))
}

fn c2_gradients() -> Outcome {
    let mut worst = 0.0f64;
    let mut failures = Vec::new();
    let ops = ProbeOp::differentiable();
    for op in &ops {
        for seed in 0..20u64 {
            let r = probe(*op, 1000 + seed, 1e-3).unwrap();
            worst = worst.max(r.max_rel_error());
            if !r.passed() {
                failures.push(format!("{}#{seed}", op.label()));
            }
        }
    }
    outcome(
        failures.is_empty(),
        format!("{} ops x 20 instances, max rel error {worst:.2e}, failures {failures:?}", ops.len()),
    )
}

fn c3_gdn_counts() -> Outcome {
    let w = WidthSet::new(vec![48, 72, 96, 144, 192]).unwrap();
    let got: Vec<usize> = GdnVariant::ALL.iter().map(|v| v.param_count(w.as_slice())).collect();
    let want = [74_856, 37_056, 37_076];
    // the built layers must agree with the formula
    let mut built = Vec::new();
    for v in GdnVariant::ALL {
        let m = SlimCae64::new(SlimCaeConfig::full().with_variant(v), 0).unwrap();
        let (_, gdn) = m.encoder_layers();
        built.push(gdn[0].param_count());
    }
    outcome(got == want && built == want, format!("switch/slim/slim+ = {got:?}, built {built:?}"))
}

fn random_tables(rng: &mut ChaCha8Rng, n: usize, support: usize) -> Vec<ChannelCdf> {
    (0..n)
        .map(|_| {
            let peak = rng.random_range(0.5..8.0);
            let m: Vec<f64> = (0..2 * support)
                .map(|j| (-(j as f64 - support as f64).abs() / peak).exp() * rng.random_range(0.2..1.0))
                .collect();
            let s: f64 = m.iter().sum();
            ChannelCdf::from_masses(&m.iter().map(|v| v / s).collect::<Vec<_>>(), 16).unwrap()
        })
        .collect()
}

fn draw(rng: &mut ChaCha8Rng, t: &ChannelCdf) -> i32 {
    let v = rng.random_range(0..t.total());
    t.symbol(t.find(v))
}

fn c4_coder() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut mismatches = 0;
    for _ in 0..10_000 {
        let (count, support) = (rng.random_range(1..4), rng.random_range(1..33));
        let tables = random_tables(&mut rng, count, support);
        let n = rng.random_range(0..64);
        let nt = tables.len();
        let s: Vec<i32> = (0..n).map(|i| draw(&mut rng, &tables[i % nt])).collect();
        let bytes = range_encode(&s, |i| i % nt, &tables).unwrap();
        if range_decode(&bytes, n, |i| i % nt, &tables).unwrap() != s {
            mismatches += 1;
        }
    }
    let mut worst_excess = f64::NEG_INFINITY;
    for _ in 0..20 {
        let tables = random_tables(&mut rng, 8, 32);
        let n = rng.random_range(10_000..30_000);
        let s: Vec<i32> = (0..n).map(|i| draw(&mut rng, &tables[i % 8])).collect();
        let bytes = range_encode(&s, |i| i % 8, &tables).unwrap();
        let ideal = ideal_bits(&s, |i| i % 8, &tables).unwrap();
        let bound = ideal * 1.02 + 64.0;
        worst_excess = worst_excess.max(8.0 * bytes.len() as f64 - bound);
        if range_decode(&bytes, n, |i| i % 8, &tables).unwrap() != s {
            mismatches += 1;
        }
    }

    // cross-process: the binary encodes twice and decodes; compare with this process
    let tmp = tempfile::tempdir().unwrap();
    let m = SlimCae64::new(SlimCaeConfig::desk(), 9).unwrap();
    let ck = tmp.path().join("m.ckpt");
    checkpoint::save(&m, &ck, checkpoint::Storage::F64).unwrap();
    let x = make_synthetic(SyntheticKind::GaussianBlobs, 1, 40, 9).remove(0);
    let img = tmp.path().join("x.png");
    save_image(&img, &x).unwrap();
    let x = load_image(&img).unwrap();
    let p = |s: &str| tmp.path().join(s).to_str().unwrap().to_owned();
    let mut exact = true;
    for level in 1..=3 {
        let l = level.to_string();
        run(&["encode", "--checkpoint", &p("m.ckpt"), "-i", &p("x.png"), "-o", &p("a.scae"), "--level", &l]);
        run(&["encode", "--checkpoint", &p("m.ckpt"), "-i", &p("x.png"), "-o", &p("b.scae"), "--level", &l]);
        run(&["decode", "--checkpoint", &p("m.ckpt"), "-i", &p("a.scae"), "-o", &p("y.png")]);
        let a = std::fs::read(p("a.scae")).unwrap();
        let local = encode_image(&x, &m, level - 1, false).unwrap();
        let y_local = to_rgb8(&decode_image(&a, &m, None).unwrap()).unwrap();
        let y_remote = to_rgb8(&load_image(Path::new(&p("y.png"))).unwrap()).unwrap();
        exact &= a == std::fs::read(p("b.scae")).unwrap() && a == local.bytes && y_local == y_remote;
    }
    outcome(
        mismatches == 0 && worst_excess <= 0.0 && exact,
        format!(
            "{mismatches} round-trip mismatches in 10020, worst length minus bound {worst_excess:.1} bits, cross-process exact {exact}"
        ),
    )
}

fn c5_rate_fidelity(runs: &Runs) -> Outcome {
    let m = model(&runs.scheduled);
    // larger images so the fixed coder flush is small next to the payload
    let images = make_synthetic(SyntheticKind::GaussianBlobs, 10, 256, 55);
    let mut worst = 0.0f64;
    for x in &images {
        for k in 0..m.levels() {
            let est = m.rd_point(x, k).unwrap().rate;
            let act = encode_image(x, &m, k, false).unwrap().bpp();
            worst = worst.max((act - est).abs() / est);
        }
    }
    outcome(worst <= 0.05, format!("max relative gap {:.2}% over 10 images x 3 levels", 100.0 * worst))
}

fn strictly_increasing(v: &[f64]) -> bool {
    v.windows(2).all(|p| p[0] < p[1])
}

fn c6_scheduling(runs: &Runs) -> Outcome {
    let curve: Vec<RdPoint> = read_json(&runs.scheduled.join("rd_points.json"));
    let lambdas: Vec<f64> = read_json(&runs.scheduled.join("lambdas.json"));
    let rates: Vec<f64> = curve.iter().map(|p| p.rate).collect();
    let psnrs: Vec<f64> = curve.iter().map(|p| p.psnr).collect();
    let ordered = lambdas.windows(2).all(|p| p[0] > p[1]);
    outcome(
        strictly_increasing(&rates) && strictly_increasing(&psnrs) && ordered,
        format!("R {rates:.4?}, PSNR {psnrs:.2?}, lambda {lambdas:.5?}"),
    )
}

fn c7_spread(runs: &Runs) -> Outcome {
    let s: Vec<RdPoint> = read_json(&runs.scheduled.join("rd_points.json"));
    let n: Vec<RdPoint> = read_json(&runs.naive.join("rd_points.json"));
    let (ss, ns) = (rate_spread(&s), rate_spread(&n));
    outcome(ss > ns, format!("scheduled spread {ss:.4} bpp vs naive {ns:.4} bpp"))
}

fn c8_accounting() -> Outcome {
    let cfg = SlimCaeConfig::full();
    let top = flops_count(&cfg, 4, 768, 512).unwrap() as f64;
    let reference = [15.34 / 200.28, 31.69 / 200.28, 53.81 / 200.28, 115.53 / 200.28];
    let mut ok = true;
    let mut ratios = Vec::new();
    for (k, want) in reference.iter().enumerate() {
        let got = flops_count(&cfg, k, 768, 512).unwrap() as f64 / top;
        ok &= (got - want).abs() / want <= 0.10;
        ratios.push(format!("w{} {:.4} vs {:.4} ({:+.1}%)", cfg.widths.width(k), got, want, 100.0 * (got - want) / want));
    }
    let bytes = BYTES_PER_VALUE as f64;
    let total = total_params(&cfg) as f64 * bytes / MB;
    let indep = independent_params(&cfg).unwrap() as f64 * bytes / MB;
    let switch = gdn_param_bytes(&cfg.widths, GdnVariant::Switch) as f64 / MB;
    let slim = gdn_param_bytes(&cfg.widths, GdnVariant::Slim) as f64 / MB;
    let near = |a: f64, b: f64| (a - b).abs() / b <= 0.10;
    let sizes = near(total, 15.3) && near(indep, 31.1) && near(slim, 0.85) && near(switch, 1.71);
    outcome(
        ok && sizes,
        format!(
            "FLOP ratios [{}]; model {total:.2} MB, independent {indep:.2} MB, GDN {slim:.3} vs {switch:.3} MB",
            ratios.join(", ")
        ),
    )
}

fn c9_scalable(runs: &Runs) -> Outcome {
    let m = model(&runs.scheduled);
    let k = m.levels();
    let (mut sizes_ok, mut mono, mut exact) = (true, true, true);
    let mut worst_drop = f64::NEG_INFINITY;
    for x in validation_images() {
        let s = encode_image(&x, &m, k - 1, true).unwrap();
        let ns = encode_image(&x, &m, k - 1, false).unwrap();
        sizes_ok &= s.payload_bytes >= ns.payload_bytes;
        let q: Vec<f64> = (1..=k)
            .map(|l| psnr(&x, &decode_image(&s.bytes, &m, Some(l)).unwrap()).unwrap())
            .collect();
        mono &= q.windows(2).all(|p| p[1] >= p[0]);
        worst_drop = worst_drop.max(q.windows(2).map(|p| p[0] - p[1]).fold(f64::NEG_INFINITY, f64::max));
        let full = decode_image(&s.bytes, &m, None).unwrap();
        let sh = x.shape();
        let reference = m.reconstruct(&ns.latent, k - 1, sh.h, sh.w).unwrap();
        exact &= full == reference && s.latent.symbols == ns.latent.symbols;
    }
    outcome(
        sizes_ok && mono && exact,
        format!(
            "scalable >= single {sizes_ok}, PSNR non-decreasing {mono} (largest step down {worst_drop:.2} dB), full decode bitwise {exact}"
        ),
    )
}

fn c10_determinism(runs: &Runs) -> Outcome {
    let files = ["model.ckpt", "train_log.csv", "train_log.json", "lambdas.json", "state.json", "rd_points.json"];
    let same_files = files
        .iter()
        .all(|f| std::fs::read(runs.scheduled.join(f)).unwrap() == std::fs::read(runs.repeat.join(f)).unwrap());
    let (a, b) = (model(&runs.scheduled), model(&runs.repeat));
    let same_streams = validation_images().iter().all(|x| {
        (0..a.levels()).all(|k| encode_image(x, &a, k, false).unwrap().bytes == encode_image(x, &b, k, false).unwrap().bytes)
            && encode_image(x, &a, 2, true).unwrap().bytes == encode_image(x, &b, 2, true).unwrap().bytes
    });
    outcome(same_files && same_streams, format!("run files identical {same_files}, bitstreams identical {same_streams}"))
}

fn main() {
    let start = Instant::now();
    let mut results: Vec<(usize, &str, Outcome, f64)> = Vec::new();
    let mut record = |n: usize, name: &'static str, f: &mut dyn FnMut() -> Outcome| {
        let t = Instant::now();
        let o = f();
        let secs = t.elapsed().as_secs_f64();
        println!(
            "criterion {n:>2} {name:<28} {} ({secs:.1}s) {}",
            if o.passed { "PASS" } else { "FAIL" },
            o.detail
        );
        results.push((n, name, o, secs));
    };
    record(1, "nesting equivalence", &mut c1_nesting);
    record(2, "gradient suite", &mut c2_gradients);
    record(3, "GDN parameter counts", &mut c3_gdn_counts);
    record(4, "range coder", &mut c4_coder);
    record(8, "efficiency accounting", &mut c8_accounting);
    let t = Instant::now();
    let runs = desk_runs();
    println!("desk training runs finished in {:.1}s", t.elapsed().as_secs_f64());
    record(5, "rate-estimate fidelity", &mut || c5_rate_fidelity(&runs));
    record(6, "lambda scheduling", &mut || c6_scheduling(&runs));
    record(7, "naive vs scheduled spread", &mut || c7_spread(&runs));
    record(9, "scalable bitstream", &mut || c9_scalable(&runs));
    record(10, "determinism", &mut || c10_determinism(&runs));
    let failed: Vec<usize> = results.iter().filter(|r| !r.2.passed).map(|r| r.0).collect();
    println!(
        "acceptance: {} of {} criteria passed in {:.1}s",
        results.len() - failed.len(),
        results.len(),
        start.elapsed().as_secs_f64()
    );
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
