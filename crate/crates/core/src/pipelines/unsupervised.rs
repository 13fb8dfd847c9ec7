//! Pre-classification driven training of the patch network: normalize, CVA,
//! FCM, three-way partition, sample selection, DSMS-CN training, then
//! network decisions for the uncertain pixels only.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::report::{join, Report};
use crate::error::{Error, Result};
use crate::maps::{ChangeMap, ProbabilityMap};
use crate::nets::{Dsmscn, DsmscnConfig};
use crate::preclassify::{
    cva_di, fcm, partition_three_way, select_samples, FcmConfig, PreClass, PreClassMap, SampleSet,
};
use crate::raster::RasterPair;
use crate::tensor::{AdamConfig, AdamState, Graph, Mode, Tensor};

/// A top FCM center below this (in normalized units) means the pair shows
/// no change beyond rounding noise.
const NO_CHANGE_CENTER: f64 = 1e-6;
const INFER_BATCH: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UnsupervisedRunConfig {
    pub patch_size: usize,
    /// Unchanged samples drawn per changed sample.
    pub neg_pos_ratio: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub validation_fraction: f64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    /// Caps the mini-batches drawn per epoch; `None` uses every sample.
    pub max_steps_per_epoch: Option<usize>,
    pub fcm: FcmConfig,
    /// Network widths; band count and patch size are taken from the input
    /// and `patch_size`.
    pub network: Option<DsmscnConfig>,
    /// Workers for classifying the uncertain pixels.
    pub threads: usize,
    pub seed: u64,
}

impl Default for UnsupervisedRunConfig {
    fn default() -> Self {
        UnsupervisedRunConfig {
            patch_size: 13,
            neg_pos_ratio: 1.0,
            epochs: 20,
            batch_size: 64,
            learning_rate: 1e-4,
            weight_decay: 1e-4,
            validation_fraction: 0.1,
            patience: 3,
            max_steps_per_epoch: None,
            fcm: FcmConfig::default(),
            network: None,
            threads: 1,
            seed: 0,
        }
    }
}

impl UnsupervisedRunConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.patch_size % 2 == 0 || self.patch_size < 5 {
            return bad(format!("patch size must be odd and >= 5, got {}", self.patch_size));
        }
        if !(self.neg_pos_ratio > 0.0 && self.neg_pos_ratio.is_finite()) {
            return bad(format!("negative:positive ratio must be > 0, got {}", self.neg_pos_ratio));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.threads == 0 {
            return bad("epochs, batch size and threads must be >= 1".into());
        }
        if self.max_steps_per_epoch == Some(0) {
            return bad("max steps per epoch must be >= 1".into());
        }
        if !(self.learning_rate > 0.0) || !(self.weight_decay >= 0.0) {
            return bad("learning rate must be > 0 and weight decay >= 0".into());
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return bad(format!("validation fraction {} not in [0, 1)", self.validation_fraction));
        }
        Ok(())
    }

    fn network_config(&self, bands: usize) -> DsmscnConfig {
        let mut net = self.network.clone().unwrap_or_else(|| DsmscnConfig::new(bands));
        net.bands = bands;
        net.patch_size = self.patch_size;
        net
    }
}

#[derive(Debug, Clone)]
pub struct UnsupervisedOutput {
    pub change_map: ChangeMap,
    pub probability: ProbabilityMap,
    pub preclass: PreClassMap,
    pub report: Report,
}

/// Independent generator streams of one run.
fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn gather(t: &Tensor<f32>, idx: &[usize]) -> Tensor<f32> {
    let [_, c, h, w] = t.shape();
    let per = c * h * w;
    let mut data = Vec::with_capacity(idx.len() * per);
    for &i in idx {
        data.extend_from_slice(&t.data()[i * per..(i + 1) * per]);
    }
    Tensor::from_vec([idx.len(), c, h, w], data)
}

struct PatchData {
    x1: Tensor<f32>,
    x2: Tensor<f32>,
    labels: Vec<f32>,
}

impl PatchData {
    fn batch(&self, idx: &[usize]) -> (Tensor<f32>, Tensor<f32>, Vec<f32>) {
        (
            gather(&self.x1, idx),
            gather(&self.x2, idx),
            idx.iter().map(|&i| self.labels[i]).collect(),
        )
    }
}

/// Mean loss over `idx` in evaluation mode.
fn evaluate_loss(net: &Dsmscn<f32>, data: &PatchData, idx: &[usize], w_p: f64) -> Result<f64> {
    let mut total = 0.0;
    let mut rng = stream(0, 0);
    for chunk in idx.chunks(INFER_BATCH) {
        let (a, b, labels) = data.batch(chunk);
        let mut g = Graph::new();
        let p = net.params.bind_frozen(&mut g);
        let (xa, xb) = (g.input(a), g.input(b));
        let y = net.forward(&mut g, &p, xa, xb, Mode::Eval, &mut rng)?;
        let loss = g.wbce(y, &labels, None, w_p)?;
        total += g.value(loss).data()[0] as f64 * chunk.len() as f64;
    }
    Ok(total / idx.len() as f64)
}

/// Stratified split: the same fraction of each class goes to validation.
fn split(samples: &SampleSet, fraction: f64, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for label in [1u8, 0] {
        let mut idx: Vec<usize> = (0..samples.samples.len())
            .filter(|&i| samples.samples[i].label == label)
            .collect();
        idx.shuffle(rng);
        let n_val = (idx.len() as f64 * fraction).floor() as usize;
        val.extend_from_slice(&idx[..n_val]);
        train.extend_from_slice(&idx[n_val..]);
    }
    (train, val)
}

fn train_patch_network(
    net: &mut Dsmscn<f32>,
    data: &PatchData,
    samples: &SampleSet,
    cfg: &UnsupervisedRunConfig,
    report: &mut Report,
) -> Result<()> {
    let mut split_rng = stream(cfg.seed, 3);
    let (mut train, val) = split(samples, cfg.validation_fraction, &mut split_rng);
    let positives = train.iter().filter(|&&i| data.labels[i] == 1.0).count();
    let w_p = train.len() as f64 / positives as f64;
    report.push("train_samples", train.len());
    report.push("validation_samples", val.len());
    report.push("w_p", w_p);

    let mut adam = AdamState::new(
        &net.params,
        AdamConfig {
            lr: cfg.learning_rate,
            weight_decay: cfg.weight_decay,
            ..AdamConfig::default()
        },
    )?;
    let mut shuffle_rng = stream(cfg.seed, 4);
    let mut dropout_rng = stream(cfg.seed, 5);
    let mut best: Option<(f64, usize, crate::tensor::ParamStore<f32>)> = None;
    let mut since_best = 0;
    let mut epochs_run = 0;
    for epoch in 0..cfg.epochs {
        train.shuffle(&mut shuffle_rng);
        let steps = cfg.max_steps_per_epoch.unwrap_or(usize::MAX);
        let (mut total, mut seen) = (0.0, 0usize);
        for chunk in train.chunks(cfg.batch_size).take(steps) {
            let (a, b, labels) = data.batch(chunk);
            let mut g = Graph::new();
            let p = net.params.bind(&mut g);
            let (xa, xb) = (g.input(a), g.input(b));
            let y = net.forward(&mut g, &p, xa, xb, Mode::Train, &mut dropout_rng)?;
            let loss = g.wbce(y, &labels, None, w_p)?;
            let value = g.value(loss).data()[0] as f64;
            if !value.is_finite() {
                return Err(Error::Numerical(format!("training loss became {value} in epoch {}", epoch + 1)));
            }
            let mut grads = g.backward(loss)?;
            let grads = net.params.collect_grads(&p, &mut grads);
            adam.step(&mut net.params, &grads)?;
            total += value * chunk.len() as f64;
            seen += chunk.len();
        }
        epochs_run += 1;
        let train_loss = total / seen as f64;
        report.push(format!("epoch.{}.train_loss", epoch + 1), train_loss);
        if val.is_empty() {
            continue;
        }
        let val_loss = evaluate_loss(net, data, &val, w_p)?;
        report.push(format!("epoch.{}.val_loss", epoch + 1), val_loss);
        if best.as_ref().is_none_or(|(b, _, _)| val_loss < *b) {
            best = Some((val_loss, epoch + 1, net.params.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    report.push("epochs_run", epochs_run);
    if let Some((_, epoch, params)) = best {
        net.params = params;
        report.push("best_epoch", epoch);
    }
    Ok(())
}

/// Change probability of each center, in order.
fn classify(net: &Dsmscn<f32>, pair: &RasterPair, centers: &[(usize, usize)], threads: usize) -> Result<Vec<f64>> {
    let w = net.config.patch_size;
    let run = |part: &[(usize, usize)]| -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(part.len());
        let mut rng = stream(0, 0);
        for chunk in part.chunks(INFER_BATCH) {
            let mut g = Graph::new();
            let p = net.params.bind_frozen(&mut g);
            let a = g.input(pair.t1.patches(chunk, w)?);
            let b = g.input(pair.t2.patches(chunk, w)?);
            let y = net.forward(&mut g, &p, a, b, Mode::Eval, &mut rng)?;
            out.extend(g.value(y).data().iter().map(|&v| v as f64));
        }
        Ok(out)
    };
    if threads <= 1 || centers.len() < 2 * INFER_BATCH * threads {
        return run(centers);
    }
    let per = centers.len().div_ceil(threads);
    let parts: Vec<Result<Vec<f64>>> = std::thread::scope(|s| {
        let handles: Vec<_> = centers.chunks(per).map(|part| s.spawn(move || run(part))).collect();
        handles.into_iter().map(|h| h.join().expect("classification worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(centers.len());
    for part in parts {
        out.extend(part?);
    }
    Ok(out)
}

pub fn run_unsupervised(pair: &RasterPair, cfg: &UnsupervisedRunConfig) -> Result<UnsupervisedOutput> {
    cfg.validate()?;
    let (h, w) = (pair.height(), pair.width());
    let mut report = Report::new();
    report.push("height", h);
    report.push("width", w);
    report.push("bands", pair.bands());

    let norm = pair.normalized();
    let di = cva_di(&norm)?;
    let mut distinct = di.magnitude.clone();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() < cfg.fcm.clusters {
        return Err(Error::NoChangedPixels);
    }
    let clusters = fcm(&di.magnitude, &cfg.fcm)?;
    let mut centers = clusters.centers.clone();
    centers.sort_by(f64::total_cmp);
    if centers.last().is_none_or(|&c| c < NO_CHANGE_CENTER) {
        return Err(Error::NoChangedPixels);
    }
    report.push("fcm_centers", join(&centers));
    report.push("fcm_iterations", clusters.iterations);
    let preclass = partition_three_way(&clusters, h, w)?;
    let (unchanged, changed, tbc) = preclass.counts();
    report.push("preclass_unchanged", unchanged);
    report.push("preclass_changed", changed);
    report.push("preclass_tbc", tbc);

    let samples = select_samples(&preclass, cfg.patch_size, cfg.neg_pos_ratio, &mut stream(cfg.seed, 2))?;
    report.push("samples_positive", samples.positives());
    report.push("samples_negative", samples.negatives());
    let centers: Vec<(usize, usize)> = samples.samples.iter().map(|s| (s.row, s.col)).collect();
    let data = PatchData {
        x1: norm.t1.patches(&centers, cfg.patch_size)?,
        x2: norm.t2.patches(&centers, cfg.patch_size)?,
        labels: samples.samples.iter().map(|s| s.label as f32).collect(),
    };

    let mut net = Dsmscn::<f32>::new(cfg.network_config(pair.bands()), &mut stream(cfg.seed, 1))?;
    train_patch_network(&mut net, &data, &samples, cfg, &mut report)?;

    let uncertain: Vec<usize> = (0..h * w)
        .filter(|&i| preclass.labels[i] == PreClass::ToBeClassified)
        .collect();
    let tbc_centers: Vec<(usize, usize)> = uncertain.iter().map(|&i| (i / w, i % w)).collect();
    let probs = classify(&net, &norm, &tbc_centers, cfg.threads)?;
    let mut values: Vec<f64> = preclass
        .labels
        .iter()
        .map(|l| if *l == PreClass::Changed { 1.0 } else { 0.0 })
        .collect();
    for (&i, &p) in uncertain.iter().zip(&probs) {
        if !p.is_finite() {
            return Err(Error::Numerical("network produced a non-finite probability".into()));
        }
        values[i] = p;
    }
    let probability = ProbabilityMap::new(h, w, values)?;
    let change_map = probability.threshold();
    report.push("tbc_changed", uncertain.iter().filter(|&&i| change_map.labels[i] == 1).count());
    report.push("changed_pixels", change_map.changed());
    Ok(UnsupervisedOutput {
        change_map,
        probability,
        preclass,
        report,
    })
}
