use std::fs;
use std::path::{Path, PathBuf};

use mscd::crf::{grid_search_fit, refine, CrfConfig, CrfGrid, CrfScene};
use mscd::maps::{ChangeMap, ProbabilityMap};
use mscd::metrics::evaluate;
use mscd::pipelines::{
    generate_synthetic, ingest_acd, load_model, load_truth, run_supervised_infer, run_supervised_train,
    run_unsupervised, save_model, AcdSplit, Report, SupervisedRunConfig, SyntheticSceneSpec,
    UnsupervisedRunConfig,
};
use mscd::raster::{load_raster, save_mask, save_raster, LabelMask, Raster, RasterFormat, RasterPair};
use mscd::{Error, Result};

use crate::config::{pick, required, FileConfig};
use crate::{Cli, Command, EvalArgs, InferArgs, IngestArgs, RefineArgs, SynthArgs, TrainArgs, UnsupArgs};

struct Globals {
    seed: u64,
    threads: usize,
}

pub fn run(cli: &Cli) -> Result<()> {
    let file = FileConfig::load(cli.config.as_deref())?;
    let g = Globals {
        seed: pick(&cli.seed, &file.seed).unwrap_or(0),
        threads: pick(&cli.threads, &file.threads).unwrap_or(1),
    };
    if g.threads == 0 {
        return Err(Error::InvalidArgument("--threads must be >= 1".into()));
    }
    match &cli.command {
        Command::Synth(a) => synth(a, &file, &g),
        Command::Unsup(a) => unsup(a, &file, &g),
        Command::Train(a) => train(a, &file, &g),
        Command::Infer(a) => infer(a, &file),
        Command::Refine(a) => refine_cmd(a, &file),
        Command::Eval(a) => eval(a, &file),
        Command::IngestAcd(a) => ingest(a, &file),
    }
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn load_image(path: &Path) -> Result<Raster> {
    load_raster(path, RasterFormat::from_path(path))
}

fn load_pair(t1: &Path, t2: &Path) -> Result<RasterPair> {
    RasterPair::new(load_image(t1)?, load_image(t2)?)
}

fn load_matching_truth(path: &Path, pair: &RasterPair) -> Result<LabelMask> {
    let truth = load_truth(path)?;
    if !truth.matches(pair) {
        return Err(Error::Shape(format!("{}: size differs from the images", path.display())));
    }
    Ok(truth)
}

/// `<dir>/<stem>.bras`, else `<dir>/<stem>.png`.
fn find_in(dir: &Path, stem: &str) -> Result<PathBuf> {
    ["bras", "png"]
        .iter()
        .map(|ext| dir.join(format!("{stem}.{ext}")))
        .find(|p| p.is_file())
        .ok_or_else(|| {
            io_err(
                &dir.join(format!("{stem}.bras")),
                std::io::Error::new(std::io::ErrorKind::NotFound, "no .bras or .png file"),
            )
        })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn synth(a: &SynthArgs, f: &FileConfig, g: &Globals) -> Result<()> {
    let out = required(pick(&a.out, &f.out), "out")?;
    let base = SyntheticSceneSpec::default();
    let size = pick(&a.size, &f.size).unwrap_or(base.height);
    let spec = SyntheticSceneSpec {
        height: size,
        width: size,
        bands: pick(&a.bands, &f.bands).unwrap_or(base.bands),
        change_frac: pick(&a.change_frac, &f.change_frac).unwrap_or(base.change_frac),
        shape_size: (
            pick(&a.shape_min, &f.shape_min).unwrap_or(base.shape_size.0),
            pick(&a.shape_max, &f.shape_max).unwrap_or(base.shape_size.1),
        ),
        noise_std: pick(&a.noise, &f.noise).unwrap_or(base.noise_std),
        gain: pick(&a.gain, &f.gain).unwrap_or(base.gain.clone()),
        bias: pick(&a.bias, &f.bias).unwrap_or(base.bias.clone()),
        seed: g.seed,
        ..base
    };
    if !(spec.change_frac > 0.0 && spec.change_frac < 0.5) {
        return Err(Error::InvalidArgument(format!(
            "--change-frac must be in (0, 0.5), got {}",
            spec.change_frac
        )));
    }
    spec.validate()?;
    let (pair, mask) = generate_synthetic(&spec)?;
    create_dir(&out)?;
    save_raster(&pair.t1, &out.join("t1.bras"))?;
    save_raster(&pair.t2, &out.join("t2.bras"))?;
    save_mask(&mask, &out.join("mask.bras"))?;
    let changed = mask.labels().iter().filter(|&&v| v == 1).count();
    println!("wrote {} ({size}x{size}, {} bands, {changed} changed pixels)", out.display(), spec.bands);
    Ok(())
}

fn unsup(a: &UnsupArgs, f: &FileConfig, g: &Globals) -> Result<()> {
    let t1 = required(pick(&a.t1, &f.t1), "t1")?;
    let t2 = required(pick(&a.t2, &f.t2), "t2")?;
    let out = required(pick(&a.out, &f.out), "out")?;
    let base = UnsupervisedRunConfig::default();
    let cfg = UnsupervisedRunConfig {
        patch_size: pick(&a.patch_size, &f.patch_size).unwrap_or(base.patch_size),
        neg_pos_ratio: pick(&a.neg_pos_ratio, &f.neg_pos_ratio).unwrap_or(base.neg_pos_ratio),
        epochs: pick(&a.epochs, &f.epochs).unwrap_or(base.epochs),
        batch_size: pick(&a.batch_size, &f.batch_size).unwrap_or(base.batch_size),
        learning_rate: pick(&a.lr, &f.lr).unwrap_or(base.learning_rate),
        weight_decay: pick(&a.weight_decay, &f.weight_decay).unwrap_or(base.weight_decay),
        max_steps_per_epoch: pick(&a.max_steps_per_epoch, &f.max_steps_per_epoch).or(base.max_steps_per_epoch),
        patience: pick(&a.patience, &f.patience).unwrap_or(base.patience),
        validation_fraction: pick(&a.val_fraction, &f.val_fraction).unwrap_or(base.validation_fraction),
        threads: g.threads,
        seed: g.seed,
        ..base
    };
    cfg.validate()?;
    let pair = load_pair(&t1, &t2)?;
    let truth = pick(&a.truth, &f.truth).map(|p| load_matching_truth(&p, &pair)).transpose()?;

    let mut result = run_unsupervised(&pair, &cfg)?;
    if let Some(truth) = &truth {
        let s = evaluate(&result.change_map.labels, truth)?;
        result.report.push_scores(&s);
        println!("{s}");
    }
    create_dir(&out)?;
    result
        .change_map
        .save(&out.join("change_map.bras"), Some(&out.join("change_map.png")))?;
    result.probability.save(&out.join("probability.bras"))?;
    result.preclass.save(&out.join("preclass.bras"))?;
    result.report.save(&out.join("report.txt"))?;
    println!(
        "wrote {} ({} changed pixels)",
        out.display(),
        result.change_map.changed()
    );
    Ok(())
}

fn train(a: &TrainArgs, f: &FileConfig, g: &Globals) -> Result<()> {
    let dirs = required(pick(&a.data, &f.data), "data")?;
    let out = required(pick(&a.out, &f.out), "out")?;
    let base = SupervisedRunConfig::default();
    let cfg = SupervisedRunConfig {
        learning_rate: pick(&a.lr, &f.lr).unwrap_or(base.learning_rate),
        weight_decay: pick(&a.weight_decay, &f.weight_decay).unwrap_or(base.weight_decay),
        epochs: pick(&a.epochs, &f.epochs).unwrap_or(base.epochs),
        tile_size: pick(&a.tile_size, &f.tile_size).unwrap_or(base.tile_size),
        batch_size: pick(&a.batch_size, &f.batch_size).unwrap_or(base.batch_size),
        steps_per_epoch: pick(&a.steps_per_epoch, &f.steps_per_epoch).or(base.steps_per_epoch),
        augment: pick(&a.augment, &f.augment).unwrap_or(base.augment),
        seed: g.seed,
        ..base
    };
    cfg.validate()?;
    if dirs.is_empty() {
        return Err(Error::InvalidArgument("--data needs at least one directory".into()));
    }
    let mut dataset = Vec::with_capacity(dirs.len());
    for dir in &dirs {
        let pair = load_pair(&find_in(dir, "t1")?, &find_in(dir, "t2")?)?;
        let mask = load_matching_truth(&find_in(dir, "mask")?, &pair)?;
        dataset.push((pair, mask));
    }
    let (model, report) = run_supervised_train(&dataset, &cfg)?;
    create_dir(&out)?;
    save_model(&model, &out.join("model.ckpt"))?;
    report.save(&out.join("trace.txt"))?;
    let last = format!("epoch.{}.train_f1", cfg.epochs);
    println!(
        "wrote {} (final train F1 {})",
        out.display(),
        report.get(&last).unwrap_or("n/a")
    );
    Ok(())
}

fn model_path(p: PathBuf) -> PathBuf {
    if p.is_dir() {
        p.join("model.ckpt")
    } else {
        p
    }
}

fn infer(a: &InferArgs, f: &FileConfig) -> Result<()> {
    let model = model_path(required(pick(&a.model, &f.model), "model")?);
    let t1 = required(pick(&a.t1, &f.t1), "t1")?;
    let t2 = required(pick(&a.t2, &f.t2), "t2")?;
    let out = required(pick(&a.out, &f.out), "out")?;
    let crf = pick(&a.crf, &f.crf).map(|p| CrfConfig::load(&p)).transpose()?;
    if let Some(c) = &crf {
        c.validate()?;
    }
    let net = load_model(&model)?;
    let pair = load_pair(&t1, &t2)?;
    let truth = pick(&a.truth, &f.truth).map(|p| load_matching_truth(&p, &pair)).transpose()?;
    let result = run_supervised_infer(&pair, &net, crf.as_ref())?;

    let mut report = Report::new();
    report.push("changed_pixels", result.change_map.changed());
    if let Some(r) = &result.refined {
        report.push("refined_changed_pixels", r.changed());
    }
    if let Some(truth) = &truth {
        let s = evaluate(&result.change_map.labels, truth)?;
        println!("{s}");
        report.push_scores(&s);
        if let Some(r) = &result.refined {
            let s = evaluate(&r.labels, truth)?;
            println!("refined:\n{s}");
            let mut refined = Report::new();
            refined.push_scores(&s);
            report.extend("refined_", &refined);
        }
    }
    create_dir(&out)?;
    result.probability.save(&out.join("probability.bras"))?;
    result
        .change_map
        .save(&out.join("change_map.bras"), Some(&out.join("change_map.png")))?;
    if let Some(r) = &result.refined {
        r.save(&out.join("refined_map.bras"), Some(&out.join("refined_map.png")))?;
    }
    report.save(&out.join("report.txt"))?;
    println!("wrote {}", out.display());
    Ok(())
}

fn refine_cmd(a: &RefineArgs, f: &FileConfig) -> Result<()> {
    let prob_path = required(pick(&a.prob, &f.prob), "prob")?;
    let t1 = required(pick(&a.t1, &f.t1), "t1")?;
    let t2 = required(pick(&a.t2, &f.t2), "t2")?;
    let out = required(pick(&a.out, &f.out), "out")?;
    let grid_spec = pick(&a.grid, &f.grid);
    let truth_path = pick(&a.truth, &f.truth);
    let crf_path = pick(&a.crf_config, &f.crf_config);
    if grid_spec.is_some() && truth_path.is_none() {
        return Err(Error::InvalidArgument("--grid needs --truth".into()));
    }
    if grid_spec.is_some() && crf_path.is_some() {
        return Err(Error::InvalidArgument("--grid and --crf-config are exclusive".into()));
    }
    let mut cfg = crf_path.map(|p| CrfConfig::load(&p)).transpose()?.unwrap_or_default();
    let set = |dst: &mut f64, cli: &Option<f64>, file: &Option<f64>| {
        if let Some(v) = pick(cli, file) {
            *dst = v;
        }
    };
    set(&mut cfg.w1, &a.w1, &f.w1);
    set(&mut cfg.w2, &a.w2, &f.w2);
    set(&mut cfg.sigma_alpha, &a.sigma_alpha, &f.sigma_alpha);
    set(&mut cfg.sigma_beta, &a.sigma_beta, &f.sigma_beta);
    set(&mut cfg.sigma_gamma, &a.sigma_gamma, &f.sigma_gamma);
    if let Some(v) = pick(&a.iterations, &f.iterations) {
        cfg.iterations = v;
    }
    if let Some(v) = pick(&a.backend, &f.backend) {
        cfg.backend = v;
    }
    cfg.validate()?;
    let grid = match grid_spec.as_deref() {
        None => None,
        Some("default") => Some(CrfGrid::default()),
        Some(p) => Some(CrfGrid::load(Path::new(p))?),
    };

    let pair = load_pair(&t1, &t2)?;
    let prob = ProbabilityMap::from_raster(&load_image(&prob_path)?)?;
    let truth = truth_path.map(|p| load_matching_truth(&p, &pair)).transpose()?;
    let mut report = Report::new();
    if let Some(grid) = &grid {
        let truth = truth.as_ref().expect("checked above");
        let fit = grid_search_fit(&[CrfScene { pair: &pair, prob: &prob, truth }], grid)?;
        report.push("grid_points", fit.evaluated);
        report.push("grid_f1", format!("{:.4}", fit.f1));
        cfg = fit.config;
    }
    let map = refine(&prob, &pair, &cfg)?;
    report.push("changed_pixels", map.changed());
    if let Some(truth) = &truth {
        let s = evaluate(&map.labels, truth)?;
        println!("{s}");
        report.push_scores(&s);
    }
    create_dir(&out)?;
    map.save(&out.join("change_map.bras"), Some(&out.join("change_map.png")))?;
    cfg.save(&out.join("crf.toml"))?;
    report.save(&out.join("report.txt"))?;
    println!("wrote {}", out.display());
    Ok(())
}

fn load_prediction(path: &Path) -> Result<Vec<u8>> {
    match RasterFormat::from_path(path) {
        RasterFormat::Bras => Ok(ChangeMap::from_raster(&load_raster(path, RasterFormat::Bras)?)?.labels),
        RasterFormat::Png8 => Ok(load_truth(path)?.labels().to_vec()),
    }
}

fn eval(a: &EvalArgs, f: &FileConfig) -> Result<()> {
    let pred = required(pick(&a.pred, &f.pred), "pred")?;
    let truth = required(pick(&a.truth, &f.truth), "truth")?;
    let out = pick(&a.out, &f.out);
    let scores = evaluate(&load_prediction(&pred)?, &load_truth(&truth)?)?;
    println!("{scores}");
    if let Some(out) = out {
        write_text(&out, &format!("{scores}\n"))?;
    }
    Ok(())
}

fn ingest(a: &IngestArgs, f: &FileConfig) -> Result<()> {
    let root = required(pick(&a.root, &f.root), "root")?;
    let out = required(pick(&a.out, &f.out), "out")?;
    let datasets = ingest_acd(&root)?;
    for d in &datasets {
        for s in &d.samples {
            let split = match s.split {
                AcdSplit::Train => "train",
                AcdSplit::Test => "test",
            };
            let dir = out.join(&d.name).join(split).join(s.id());
            create_dir(&dir)?;
            save_raster(&s.pair.t1, &dir.join("t1.bras"))?;
            save_raster(&s.pair.t2, &dir.join("t2.bras"))?;
            save_mask(&s.mask, &dir.join("mask.bras"))?;
        }
        println!(
            "{}: {} training pieces, {} test pieces",
            d.name,
            d.samples.iter().filter(|s| s.split == AcdSplit::Train).count(),
            d.samples.iter().filter(|s| s.split == AcdSplit::Test).count()
        );
    }
    Ok(())
}
