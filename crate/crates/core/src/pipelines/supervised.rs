//! End-to-end training and inference of the fully convolutional network on
//! labeled pairs.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::report::Report;
use crate::crf::{refine, CrfConfig};
use crate::error::{Error, Result};
use crate::maps::{ChangeMap, ProbabilityMap};
use crate::metrics::{scores, ConfusionMatrix};
use crate::nets::{Dsmsfcn, DsmsfcnConfig, FCN_ALIGN};
use crate::raster::{augment_dihedral, crop, LabelMask, RasterPair};
use crate::tensor::{load_checkpoint, save_checkpoint, AdamConfig, AdamState, Graph, Mode, Tensor};

const UNDEFINED: u8 = 255;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SupervisedRunConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    /// Side of the square training crops; a multiple of 16.
    pub tile_size: usize,
    pub batch_size: usize,
    /// Optimizer steps per epoch; `None` covers the training pixels about once.
    pub steps_per_epoch: Option<usize>,
    /// Adds the eight rotations/reflections of every training pair.
    pub augment: bool,
    /// Crops redrawn while they contain no changed pixel.
    pub tile_attempts: usize,
    pub network: Option<DsmsfcnConfig>,
    pub seed: u64,
}

impl Default for SupervisedRunConfig {
    fn default() -> Self {
        SupervisedRunConfig {
            learning_rate: 2e-4,
            weight_decay: 1e-4,
            epochs: 100,
            tile_size: 64,
            batch_size: 8,
            steps_per_epoch: None,
            augment: true,
            tile_attempts: 10,
            network: None,
            seed: 0,
        }
    }
}

impl SupervisedRunConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.tile_size == 0 || self.tile_size % FCN_ALIGN != 0 {
            return bad(format!("tile size must be a positive multiple of {FCN_ALIGN}, got {}", self.tile_size));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.steps_per_epoch == Some(0) {
            return bad("epochs, batch size and steps per epoch must be >= 1".into());
        }
        if !(self.learning_rate > 0.0) || !(self.weight_decay >= 0.0) {
            return bad("learning rate must be > 0 and weight decay >= 0".into());
        }
        Ok(())
    }
}

/// Normalized (and optionally augmented) training pairs with their masks.
fn prepare(dataset: &[(RasterPair, LabelMask)], cfg: &SupervisedRunConfig) -> Result<Vec<(RasterPair, LabelMask)>> {
    if dataset.is_empty() {
        return Err(Error::Empty("training set has no pairs".into()));
    }
    let bands = dataset[0].0.bands();
    let mut out = Vec::new();
    for (i, (pair, mask)) in dataset.iter().enumerate() {
        if !mask.matches(pair) {
            return Err(Error::Shape(format!("pair {i}: mask does not match the images")));
        }
        if pair.bands() != bands {
            return Err(Error::Shape(format!("pair {i} has {} bands, expected {bands}", pair.bands())));
        }
        if pair.height() < cfg.tile_size || pair.width() < cfg.tile_size {
            return Err(Error::InvalidArgument(format!(
                "pair {i} is {}x{}, smaller than the {} px tile",
                pair.height(),
                pair.width(),
                cfg.tile_size
            )));
        }
        let norm = pair.normalized();
        if cfg.augment {
            out.extend(augment_dihedral(&norm, mask)?);
        } else {
            out.push((norm, mask.clone()));
        }
    }
    Ok(out)
}

struct Tile {
    x1: Tensor<f32>,
    x2: Tensor<f32>,
    labels: Vec<f32>,
    valid: Vec<bool>,
}

fn draw_tile(data: &[(RasterPair, LabelMask)], cfg: &SupervisedRunConfig, rng: &mut ChaCha8Rng) -> Result<Tile> {
    let t = cfg.tile_size;
    let (pair, mask) = &data[rng.random_range(0..data.len())];
    let mut window = (0, 0);
    for _ in 0..cfg.tile_attempts.max(1) {
        window = (
            rng.random_range(0..=pair.height() - t),
            rng.random_range(0..=pair.width() - t),
        );
        let m = mask.crop(window.0, window.1, t, t)?;
        if m.labels().contains(&1) {
            break;
        }
    }
    let (r, c) = window;
    let m = mask.crop(r, c, t, t)?;
    Ok(Tile {
        x1: crop(&pair.t1, r, c, t, t)?.to_tensor(),
        x2: crop(&pair.t2, r, c, t, t)?.to_tensor(),
        labels: m.labels().iter().map(|&l| (l == 1) as u8 as f32).collect(),
        valid: m.labels().iter().map(|&l| l != UNDEFINED).collect(),
    })
}

fn stack(parts: Vec<Tensor<f32>>) -> Tensor<f32> {
    let [_, c, h, w] = parts[0].shape();
    let n = parts.len();
    let mut data = Vec::with_capacity(n * c * h * w);
    for p in parts {
        data.extend_from_slice(p.data());
    }
    Tensor::from_vec([n, c, h, w], data)
}

/// Trains the network; the report carries `w_p`, per-epoch mean loss and
/// F1 of the thresholded training-tile predictions.
pub fn run_supervised_train(
    dataset: &[(RasterPair, LabelMask)],
    cfg: &SupervisedRunConfig,
) -> Result<(Dsmsfcn<f32>, Report)> {
    cfg.validate()?;
    let data = prepare(dataset, cfg)?;
    let (mut defined, mut positive) = (0usize, 0usize);
    for (_, m) in &data {
        defined += m.labels().iter().filter(|&&l| l != UNDEFINED).count();
        positive += m.labels().iter().filter(|&&l| l == 1).count();
    }
    if defined == 0 {
        return Err(Error::Empty("every training pixel is undefined".into()));
    }
    if positive == 0 {
        return Err(Error::NoChangedPixels);
    }
    let w_p = defined as f64 / positive as f64;
    let mut report = Report::new();
    report.push("pairs", dataset.len());
    report.push("training_images", data.len());
    report.push("defined_pixels", defined);
    report.push("changed_pixels", positive);
    report.push("w_p", w_p);

    let bands = data[0].0.bands();
    let mut net_cfg = cfg.network.clone().unwrap_or_else(|| DsmsfcnConfig::new(bands));
    net_cfg.bands = bands;
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    init_rng.set_stream(1);
    let mut net = Dsmsfcn::<f32>::new(net_cfg, &mut init_rng)?;
    let mut adam = AdamState::new(
        &net.params,
        AdamConfig {
            lr: cfg.learning_rate,
            weight_decay: cfg.weight_decay,
            ..AdamConfig::default()
        },
    )?;
    let tile_px = cfg.tile_size * cfg.tile_size * cfg.batch_size;
    let total_px: usize = data.iter().map(|(p, _)| p.height() * p.width()).sum();
    let steps = cfg.steps_per_epoch.unwrap_or(total_px.div_ceil(tile_px));
    report.push("steps_per_epoch", steps);
    let mut tile_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    tile_rng.set_stream(2);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    dropout_rng.set_stream(3);

    for epoch in 1..=cfg.epochs {
        let (mut total, mut cm) = (0.0, ConfusionMatrix::default());
        for _ in 0..steps {
            let tiles = (0..cfg.batch_size)
                .map(|_| draw_tile(&data, cfg, &mut tile_rng))
                .collect::<Result<Vec<_>>>()?;
            let labels: Vec<f32> = tiles.iter().flat_map(|t| t.labels.iter().copied()).collect();
            let valid: Vec<bool> = tiles.iter().flat_map(|t| t.valid.iter().copied()).collect();
            if !valid.contains(&true) {
                continue;
            }
            let (a, b): (Vec<_>, Vec<_>) = tiles.into_iter().map(|t| (t.x1, t.x2)).unzip();
            let mut g = Graph::new();
            let p = net.params.bind(&mut g);
            let (xa, xb) = (g.input(stack(a)), g.input(stack(b)));
            let y = net.forward(&mut g, &p, xa, xb, Mode::Train, &mut dropout_rng)?;
            let loss = g.wbce(y, &labels, Some(&valid), w_p)?;
            let value = g.value(loss).data()[0] as f64;
            if !value.is_finite() {
                return Err(Error::Numerical(format!("training loss became {value} in epoch {epoch}")));
            }
            for ((&pv, &t), &v) in g.value(y).data().iter().zip(&labels).zip(&valid) {
                if v {
                    match (pv > 0.5, t == 1.0) {
                        (true, true) => cm.tp += 1,
                        (true, false) => cm.fp += 1,
                        (false, true) => cm.fn_ += 1,
                        (false, false) => cm.tn += 1,
                    }
                }
            }
            let mut grads = g.backward(loss)?;
            let grads = net.params.collect_grads(&p, &mut grads);
            adam.step(&mut net.params, &grads)?;
            total += value;
        }
        report.push(format!("epoch.{epoch}.loss"), total / steps as f64);
        report.push(format!("epoch.{epoch}.train_f1"), format!("{:.4}", scores(&cm).f1));
    }
    Ok((net, report))
}

#[derive(Debug, Clone)]
pub struct SupervisedInference {
    pub probability: ProbabilityMap,
    pub change_map: ChangeMap,
    pub refined: Option<ChangeMap>,
}

/// Whole-image prediction at the 0.5 threshold, optionally followed by CRF
/// refinement of the same probabilities.
pub fn run_supervised_infer(
    pair: &RasterPair,
    model: &Dsmsfcn<f32>,
    crf: Option<&CrfConfig>,
) -> Result<SupervisedInference> {
    if pair.bands() != model.config.bands {
        return Err(Error::InvalidArgument(format!(
            "model expects {} bands, the pair has {}",
            model.config.bands,
            pair.bands()
        )));
    }
    if let Some(c) = crf {
        c.validate()?;
    }
    let norm = pair.normalized();
    let y = model.predict(&norm.t1.to_tensor(), &norm.t2.to_tensor())?;
    let values: Vec<f64> = y.data().iter().map(|&v| v as f64).collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("network produced a non-finite probability".into()));
    }
    let probability = ProbabilityMap::new(pair.height(), pair.width(), values)?;
    let change_map = probability.threshold();
    let refined = crf.map(|c| refine(&probability, pair, c)).transpose()?;
    Ok(SupervisedInference {
        probability,
        change_map,
        refined,
    })
}

/// Path of the network description stored next to a checkpoint.
pub fn model_config_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("toml")
}

/// Writes the weights to `checkpoint` and the network description beside it.
pub fn save_model(model: &Dsmsfcn<f32>, checkpoint: &Path) -> Result<()> {
    let cfg_path = model_config_path(checkpoint);
    let text = toml::to_string(&model.config).map_err(|e| Error::format(&cfg_path, e.to_string()))?;
    std::fs::write(&cfg_path, text).map_err(|e| Error::io(&cfg_path, e))?;
    save_checkpoint(&model.params, checkpoint)
}

pub fn load_model(checkpoint: &Path) -> Result<Dsmsfcn<f32>> {
    let cfg_path = model_config_path(checkpoint);
    let text = std::fs::read_to_string(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?;
    let config: DsmsfcnConfig =
        toml::from_str(&text).map_err(|e| Error::format(&cfg_path, e.to_string()))?;
    let mut model = Dsmsfcn::new(config, &mut ChaCha8Rng::seed_from_u64(0))?;
    load_checkpoint(&mut model.params, checkpoint)?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crf::FilterBackend;
    use crate::pipelines::{generate_synthetic, SyntheticSceneSpec};
    use crate::raster::Raster;

    fn scene(h: usize, w: usize, seed: u64) -> (RasterPair, LabelMask) {
        let spec = SyntheticSceneSpec {
            height: h,
            width: w,
            bands: 3,
            change_frac: 0.0,
            squares: vec![(4, 6, 10), (h - 12, w - 14, 8)],
            seed,
            ..SyntheticSceneSpec::default()
        };
        generate_synthetic(&spec).unwrap()
    }

    fn tiny() -> SupervisedRunConfig {
        SupervisedRunConfig {
            learning_rate: 1e-3,
            epochs: 2,
            tile_size: 16,
            batch_size: 2,
            steps_per_epoch: Some(3),
            network: Some(DsmsfcnConfig {
                bands: 0,
                encoder_channels: [4, 8, 8, 16],
                decoder_channels: [8, 8, 4, 4],
                dropout: 0.5,
            }),
            seed: 2,
            ..SupervisedRunConfig::default()
        }
    }

    fn loss(r: &Report, epoch: usize) -> f64 {
        r.get(&format!("epoch.{epoch}.loss")).unwrap().parse().unwrap()
    }

    #[test]
    fn two_hundred_steps_lower_the_loss() {
        let cfg = SupervisedRunConfig {
            epochs: 20,
            steps_per_epoch: Some(10),
            augment: false,
            ..tiny()
        };
        let (_, report) = run_supervised_train(&[scene(32, 32, 1)], &cfg).unwrap();
        assert!(loss(&report, 20) < loss(&report, 1), "{report}");
        assert!(report.get("epoch.20.train_f1").is_some());
    }

    #[test]
    fn augmentation_changes_the_weights_and_the_dataset() {
        let data = [scene(32, 32, 1)];
        let (on, r_on) = run_supervised_train(&data, &tiny()).unwrap();
        let (off, r_off) = run_supervised_train(&data, &SupervisedRunConfig { augment: false, ..tiny() }).unwrap();
        assert_eq!(r_on.get("training_images"), Some("8"));
        assert_eq!(r_off.get("training_images"), Some("1"));
        let weights = |m: &Dsmsfcn<f32>| m.params.iter().flat_map(|p| p.tensor.data().to_vec()).collect::<Vec<_>>();
        assert_ne!(weights(&on), weights(&off));
    }

    #[test]
    fn positive_weight_counts_defined_pixels_only() {
        let (pair, mask) = scene(32, 32, 3);
        let mut labels = mask.labels().to_vec();
        labels[..32].fill(UNDEFINED);
        let mask = LabelMask::new(32, 32, labels).unwrap();
        let (_, report) = run_supervised_train(&[(pair, mask)], &SupervisedRunConfig { augment: false, ..tiny() }).unwrap();
        let changed = 100 + 64;
        let w_p: f64 = report.get("w_p").unwrap().parse().unwrap();
        assert_eq!(w_p, (32.0 * 31.0) / changed as f64);
    }

    #[test]
    fn inference_keeps_dims_and_zero_weight_crf_is_identity() {
        let (model, _) = run_supervised_train(&[scene(32, 32, 4)], &tiny()).unwrap();
        let (pair, _) = scene(37, 45, 5);
        let crf = CrfConfig {
            w1: 0.0,
            w2: 0.0,
            backend: FilterBackend::Exact,
            ..CrfConfig::default()
        };
        let out = run_supervised_infer(&pair, &model, Some(&crf)).unwrap();
        assert_eq!((out.probability.height, out.probability.width), (37, 45));
        assert_eq!(out.refined.as_ref(), Some(&out.change_map));
    }

    #[test]
    fn saved_model_predicts_identically() {
        let (model, _) = run_supervised_train(&[scene(32, 32, 6)], &tiny()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_model(&model, &path).unwrap();
        assert!(model_config_path(&path).exists());
        let loaded = load_model(&path).unwrap();
        let (pair, _) = scene(32, 32, 7);
        let a = run_supervised_infer(&pair, &model, None).unwrap();
        let b = run_supervised_infer(&pair, &loaded, None).unwrap();
        assert_eq!(a.probability, b.probability);
    }

    #[test]
    fn guards() {
        let (pair, mask) = scene(32, 32, 1);
        let undefined = LabelMask::new(32, 32, vec![UNDEFINED; 1024]).unwrap();
        let none = LabelMask::new(32, 32, vec![0; 1024]).unwrap();
        let cases: [(Vec<(RasterPair, LabelMask)>, SupervisedRunConfig); 5] = [
            (vec![(pair.clone(), undefined)], tiny()),
            (vec![(pair.clone(), none)], tiny()),
            (vec![], tiny()),
            (vec![(pair.clone(), mask.clone())], SupervisedRunConfig { tile_size: 24, ..tiny() }),
            (vec![(pair.clone(), mask.clone())], SupervisedRunConfig { tile_size: 48, ..tiny() }),
        ];
        let kinds: Vec<_> = cases
            .iter()
            .map(|(d, c)| match run_supervised_train(d, c) {
                Err(Error::Empty(_)) => "empty",
                Err(Error::NoChangedPixels) => "no-change",
                Err(Error::InvalidArgument(_)) => "invalid",
                other => panic!("unexpected {:?}", other.map(|_| ())),
            })
            .collect();
        assert_eq!(kinds, ["empty", "no-change", "empty", "invalid", "invalid"]);

        let (model, _) = run_supervised_train(&[(pair, mask)], &tiny()).unwrap();
        let two_band = RasterPair::new(Raster::zeros(2, 16, 16), Raster::zeros(2, 16, 16)).unwrap();
        assert!(matches!(run_supervised_infer(&two_band, &model, None), Err(Error::InvalidArgument(_))));
    }
}
