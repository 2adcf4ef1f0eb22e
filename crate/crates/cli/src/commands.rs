use std::path::{Path, PathBuf};

use log::{info, warn};
use slimcae::checkpoint::{self, Storage};
use slimcae::codec::{decode_image, encode_image};
use slimcae::data::{load_image, make_synthetic, read_manifest, save_image, SyntheticKind};
use slimcae::eval::{cost_report, rd_sweep, write_rows, Timing};
use slimcae::model::{psnr, SlimCaeConfig};
use slimcae::training::{
    estimate_lambdas_from_curves, fixed_width_curves, run_scheduled, sgd_train, train_naive, validate_rd, LogRecord,
    RdSample, TrainLog, Trainer,
};
use slimcae::{Error, Result, SlimCae64, Tensor4};

use crate::config::{Regime, RunConfig};
use crate::{CostArgs, DecodeArgs, EncodeArgs, EvalArgs, SweepArgs, TrainArgs, TrainOverrides};

pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 1,
        Error::Numeric(_) => 3,
        _ => 2,
    }
}

fn json<T: serde::Serialize>(v: &T) -> Result<String> {
    serde_json::to_string_pretty(v).map_err(|e| Error::Internal(e.to_string()))
}

fn build_config(o: &TrainOverrides) -> Result<RunConfig> {
    let mut c = match &o.config {
        Some(p) => RunConfig::read(p)?,
        None => RunConfig::default(),
    };
    if o.full {
        c.model = SlimCaeConfig { gdn_variant: c.model.gdn_variant, ..SlimCaeConfig::full() };
    }
    if let Some(w) = &o.widths {
        c.model.widths = slimcae::slim::WidthSet::new(w.clone())?;
    }
    if let Some(g) = &o.gdn {
        c.model.gdn_variant = g.parse()?;
    }
    if let Some(s) = o.seed {
        c.seed = s;
    }
    if let Some(s) = &o.synthetic {
        c.data.synthetic = Some(s.clone());
        c.data.manifest = None;
    }
    if let Some(m) = &o.manifest {
        c.data.manifest = Some(m.clone());
        c.data.synthetic = None;
    }
    let d = &mut c.data;
    d.split_seed = o.split_seed.unwrap_or(d.split_seed);
    d.train_images = o.train_images.unwrap_or(d.train_images);
    d.val_images = o.val_images.unwrap_or(d.val_images);
    d.image_size = o.image_size.unwrap_or(d.image_size);
    d.crop = o.crop.unwrap_or(d.crop);
    d.batch = o.batch.unwrap_or(d.batch);
    let t = &mut c.training;
    t.lambda = o.lambda.unwrap_or(t.lambda);
    t.iterations = o.iterations.unwrap_or(t.iterations);
    t.lr = o.lr.unwrap_or(t.lr);
    t.entropy_lr = o.entropy_lr.unwrap_or(t.entropy_lr);
    Ok(c)
}

fn out_dir(out: Option<PathBuf>, default: &str) -> Result<PathBuf> {
    let dir = out.unwrap_or_else(|| PathBuf::from("runs").join(default));
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn read_curves(path: &Path) -> Result<Vec<Vec<RdSample>>> {
    serde_json::from_str(&std::fs::read_to_string(path)?)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

pub fn train(a: TrainArgs) -> Result<()> {
    let mut c = build_config(&a.common)?;
    let t = &mut c.training;
    t.regime = a.regime.unwrap_or(t.regime);
    t.finetune_iterations = a.finetune_iterations.unwrap_or(t.finetune_iterations);
    t.kappa = a.kappa.unwrap_or(t.kappa);
    t.schedule_iterations = a.schedule_iterations.unwrap_or(t.schedule_iterations);
    t.max_steps = a.max_steps.unwrap_or(t.max_steps);
    t.delta = a.delta.unwrap_or(t.delta);
    if a.curves.is_some() {
        t.curves = a.curves.clone();
    }
    c.validate()?;
    let dir = out_dir(a.out, "train")?;
    std::fs::write(dir.join("config.toml"), c.to_toml()?)?;

    let (train, val) = c.data.load(c.seed)?;
    let t = &c.training;
    let mut model = SlimCae64::new(c.model.clone(), c.seed)?;
    let mut trainer = Trainer::new(&model, t.adam(), c.seed)?;
    trainer.log_every = t.log_every;
    let mut log = TrainLog::default();
    info!("{:?} training, {} levels, {} training images", t.regime, model.levels(), train.len());

    let lambdas = match t.regime {
        Regime::Naive => {
            info!("phase naive: {} steps at lambda {}", t.iterations, t.lambda);
            train_naive(&mut model, &mut trainer, &train, t.lambda, t.iterations, &mut log)?;
            vec![t.lambda; model.levels()]
        }
        Regime::Estimated => {
            let curves = match &t.curves {
                Some(p) => read_curves(p)?,
                None => {
                    info!("phase sweep: {} fixed-width models", model.levels() * t.sweep_lambdas.len());
                    let mut sweep_log = TrainLog::default();
                    let curves = fixed_width_curves(
                        &c.model,
                        &t.sweep_lambdas,
                        t.sweep_iterations,
                        t.adam(),
                        &train,
                        &val,
                        c.seed,
                        &mut sweep_log,
                    )?;
                    std::fs::write(dir.join("curves.json"), json(&curves)?)?;
                    curves
                }
            };
            if curves.len() != model.levels() {
                return Err(Error::Config(format!("{} curves for {} levels", curves.len(), model.levels())));
            }
            let lambdas = estimate_lambdas_from_curves(&curves, t.delta, t.lambda)?;
            info!("estimated tradeoffs {lambdas:?}");
            let steps = t.iterations + t.finetune_iterations;
            info!("phase estimated: {steps} steps");
            sgd_train(&mut model, &mut trainer, &train, &lambdas, steps, &mut log, "estimated")?;
            lambdas
        }
        Regime::Scheduled => {
            info!("phase naive: {} steps, then scheduling and {} fine-tune steps", t.iterations, t.finetune_iterations);
            let (lambdas, state) = run_scheduled(
                &mut model,
                trainer.clone(),
                t.schedule(),
                &train,
                &val,
                t.iterations,
                t.finetune_iterations,
                &mut log,
            )?;
            if state.frozen.iter().any(|f| !f) {
                warn!("some levels used every tradeoff update without the slope rising");
            }
            std::fs::write(dir.join("state.json"), state.to_json()?)?;
            trainer = state.trainer;
            lambdas
        }
    };

    let curve = validate_rd(&model, &val)?;
    if t.regime != Regime::Scheduled {
        log.push(LogRecord::val(trainer.step, "final", None, &lambdas, &curve, None));
    }
    checkpoint::save(&model, &dir.join("model.ckpt"), Storage::F64)?;
    std::fs::write(dir.join("lambdas.json"), json(&lambdas)?)?;
    std::fs::write(dir.join("rd_points.json"), json(&curve)?)?;
    log.write(&dir)?;
    for (p, l) in curve.iter().zip(&lambdas) {
        println!(
            "level {} (width {:>3}): lambda {:.5}  {:.4} bpp  {:.2} dB",
            p.level + 1,
            model.width(p.level),
            l,
            p.rate,
            p.psnr
        );
    }
    println!("run directory: {}", dir.display());
    Ok(())
}

fn load_model(path: &Path) -> Result<SlimCae64> {
    checkpoint::load(path)
}

pub fn encode(a: EncodeArgs) -> Result<()> {
    let model = load_model(&a.checkpoint)?;
    let x = load_image(&a.input)?;
    let k = model.levels();
    let level = match a.level {
        None => k - 1,
        Some(l) if (1..=k).contains(&l) => l - 1,
        Some(l) => return Err(Error::Config(format!("--level {l} outside 1..={k}"))),
    };
    let e = encode_image(&x, &model, level, a.scalable)?;
    std::fs::write(&a.output, &e.bytes)?;
    let xh = decode_image(&e.bytes, &model, None)?;
    println!(
        "level {} ({}): {} bytes, {:.4} bpp, {:.2} dB",
        level + 1,
        if a.scalable { "scalable" } else { "single" },
        e.bytes.len(),
        e.bpp(),
        psnr(&x, &xh)?
    );
    Ok(())
}

pub fn decode(a: DecodeArgs) -> Result<()> {
    let model = load_model(&a.checkpoint)?;
    let bytes = std::fs::read(&a.input)?;
    let xh = decode_image(&bytes, &model, a.levels)?;
    save_image(&a.output, &xh)?;
    let s = xh.shape();
    let bpp = 8.0 * bytes.len() as f64 / (s.h * s.w) as f64;
    match &a.original {
        Some(p) => println!("{}x{}: {:.4} bpp (file), {:.2} dB", s.w, s.h, bpp, psnr(&load_image(p)?, &xh)?),
        None => println!("{}x{}: {:.4} bpp (file)", s.w, s.h, bpp),
    }
    Ok(())
}

fn eval_images(a: &EvalArgs) -> Result<Vec<Tensor4<f64>>> {
    if let Some(m) = &a.manifest {
        return read_manifest(m)?.iter().map(|p| load_image(p)).collect();
    }
    let kind: SyntheticKind = a.synthetic.as_deref().unwrap_or("gaussian_blobs").parse()?;
    Ok(make_synthetic(kind, a.images, a.image_size, a.seed))
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let model = load_model(&a.checkpoint)?;
    let images = eval_images(&a)?;
    let lambdas = match &a.lambdas {
        Some(l) => l.clone(),
        None => {
            let p = a.checkpoint.with_file_name("lambdas.json");
            match std::fs::read_to_string(&p) {
                Ok(text) => serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", p.display())))?,
                Err(_) => {
                    warn!("no lambdas given and {} not found; lambda column set to 0", p.display());
                    vec![0.0; model.levels()]
                }
            }
        }
    };
    let timing = if a.runs == 0 { Timing::OFF } else { Timing { warmup: 3, runs: a.runs } };
    let rows = rd_sweep(&model, &images, &lambdas, timing)?;
    let dir = out_dir(a.out, "eval")?;
    write_rows(&dir, "rd", &rows)?;
    println!("level width    lambda  est_bpp  act_bpp  psnr_db     MFLOPs  param_MiB  feat_MiB  enc_ms  dec_ms");
    for r in &rows {
        println!(
            "{:>5} {:>5} {:>9.5} {:>8.4} {:>8.4} {:>8.2} {:>10.2} {:>10.3} {:>9.3} {:>7.2} {:>7.2}",
            r.level,
            r.width,
            r.lambda,
            r.est_bpp,
            r.actual_bpp,
            r.psnr_db,
            r.flops as f64 / 1e6,
            r.param_bytes as f64 / MIB,
            r.feature_bytes as f64 / MIB,
            r.enc_ms,
            r.dec_ms
        );
    }
    println!("report: {}", dir.join("rd.csv").display());
    Ok(())
}

const MIB: f64 = 1024.0 * 1024.0;

pub fn cost(a: CostArgs) -> Result<()> {
    let mut cfg = match (&a.config, a.full) {
        (Some(p), _) => RunConfig::read(p)?.model,
        (None, true) => SlimCaeConfig::full(),
        (None, false) => SlimCaeConfig::desk(),
    };
    if let Some(w) = &a.widths {
        cfg.widths = slimcae::slim::WidthSet::new(w.clone())?;
    }
    if let Some(g) = &a.gdn {
        cfg.gdn_variant = g.parse()?;
    }
    let r = cost_report(&cfg, a.height, a.width)?;
    if a.json {
        println!("{}", json(&r)?);
        return Ok(());
    }
    println!("input {}x{} (height x width), {} GDN", r.height, r.width, cfg.gdn_variant);
    println!("level width      MFLOPs  param_MiB  enc_feat_MiB  dec_feat_MiB");
    for l in &r.levels {
        println!(
            "{:>5} {:>5} {:>11.2} {:>10.3} {:>13.3} {:>13.3}",
            l.level + 1,
            l.width,
            l.flops as f64 / 1e6,
            l.param_bytes as f64 / MIB,
            l.encoder_feature_bytes as f64 / MIB,
            l.decoder_feature_bytes as f64 / MIB
        );
    }
    println!("stored model:          {:.2} MiB", r.total_param_bytes as f64 / MIB);
    println!("independent models:    {:.2} MiB", r.independent_param_bytes as f64 / MIB);
    println!("GDN parameters:        {:.3} MiB", r.gdn_param_bytes as f64 / MIB);
    Ok(())
}

pub fn sweep(a: SweepArgs) -> Result<()> {
    let mut c = build_config(&a.common)?;
    if let Some(l) = &a.lambdas {
        c.training.sweep_lambdas = l.clone();
    }
    if let Some(i) = a.common.iterations {
        c.training.sweep_iterations = i;
    }
    c.training.regime = Regime::Estimated;
    c.validate()?;
    let dir = out_dir(a.out, "sweep")?;
    std::fs::write(dir.join("config.toml"), c.to_toml()?)?;
    let (train, val) = c.data.load(c.seed)?;
    let t = &c.training;
    let mut log = TrainLog::default();
    let curves = fixed_width_curves(&c.model, &t.sweep_lambdas, t.sweep_iterations, t.adam(), &train, &val, c.seed, &mut log)?;
    std::fs::write(dir.join("curves.json"), json(&curves)?)?;
    let mut csv = String::from("width,lambda,bpp,mse,psnr_db\n");
    for (w, curve) in c.model.widths.as_slice().iter().zip(&curves) {
        for (l, s) in t.sweep_lambdas.iter().zip(curve) {
            csv.push_str(&format!("{w},{l},{},{},{}\n", s.rate, s.mse, slimcae::model::psnr_from_mse(s.mse)));
        }
    }
    std::fs::write(dir.join("sweep.csv"), csv)?;
    log.write(&dir)?;
    println!("curves: {}", dir.join("curves.json").display());
    Ok(())
}
