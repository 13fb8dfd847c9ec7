//! Fully convolutional siamese encoder/decoder producing a dense change
//! probability map.
//!
//! Encoder (weights shared by both dates): 3x3 conv, 3x3 conv, MFCU, MFCU,
//! each followed by 2x2 max-pooling. Decoder: four 2x2 transpose convs; after
//! each one the upsampled map is concatenated with the first date's encoder
//! features and the absolute encoder-feature difference at that scale. A 1x1
//! conv with sigmoid gives one probability channel.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{Conv, UpConv};
use super::mfcu::{Mfcu, MfcuConfig};
use crate::error::{Error, Result};
use crate::raster::reflect_index;
use crate::tensor::{BoundParams, Graph, Mode, ParamStore, Real, Tensor, Var};

/// Input sides are padded up to a multiple of this.
pub const FCN_ALIGN: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DsmsfcnConfig {
    pub bands: usize,
    /// Widths of the four encoder stages: conv, conv, MFCU, MFCU.
    pub encoder_channels: [usize; 4],
    /// Output widths of the four transpose convs, deepest first.
    pub decoder_channels: [usize; 4],
    /// Dropout on the deepest encoder features during training.
    pub dropout: f64,
}

impl DsmsfcnConfig {
    pub fn new(bands: usize) -> Self {
        DsmsfcnConfig {
            bands,
            encoder_channels: [16, 32, 64, 128],
            decoder_channels: [64, 32, 16, 16],
            dropout: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.bands == 0 {
            return Err(Error::InvalidArgument("band count must be >= 1".into()));
        }
        if self.encoder_channels.contains(&0) || self.decoder_channels.contains(&0) {
            return Err(Error::InvalidArgument("channel widths must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidArgument(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Dsmsfcn<T> {
    pub config: DsmsfcnConfig,
    pub params: ParamStore<T>,
    conv1: Conv,
    conv2: Conv,
    mfcu3: Mfcu,
    mfcu4: Mfcu,
    up: [UpConv; 4],
    head: Conv,
}

impl<T: Real> Dsmsfcn<T> {
    pub fn new<R: Rng + ?Sized>(config: DsmsfcnConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut s = ParamStore::new();
        let [e1, e2, e3, e4] = config.encoder_channels;
        let [d4, d3, d2, d1] = config.decoder_channels;
        let conv1 = Conv::new(&mut s, "enc1.conv", config.bands, e1, 3, rng)?;
        let conv2 = Conv::new(&mut s, "enc2.conv", e1, e2, 3, rng)?;
        let mfcu3 = Mfcu::new(&mut s, "enc3.mfcu", MfcuConfig::with_width(e2, e3)?, rng)?;
        let mfcu4 = Mfcu::new(&mut s, "enc4.mfcu", MfcuConfig::with_width(e3, e4)?, rng)?;
        let up = [
            UpConv::new(&mut s, "dec4.up", e4, d4, rng)?,
            UpConv::new(&mut s, "dec3.up", d4 + 2 * e4, d3, rng)?,
            UpConv::new(&mut s, "dec2.up", d3 + 2 * e3, d2, rng)?,
            UpConv::new(&mut s, "dec1.up", d2 + 2 * e2, d1, rng)?,
        ];
        let head = Conv::new(&mut s, "head.conv", d1 + 2 * e1, 1, 1, rng)?;
        Ok(Dsmsfcn {
            config,
            params: s,
            conv1,
            conv2,
            mfcu3,
            mfcu4,
            up,
            head,
        })
    }

    pub fn cast<U: Real>(&self) -> Dsmsfcn<U> {
        Dsmsfcn {
            config: self.config.clone(),
            params: self.params.cast(),
            conv1: self.conv1,
            conv2: self.conv2,
            mfcu3: self.mfcu3.clone(),
            mfcu4: self.mfcu4.clone(),
            up: self.up,
            head: self.head,
        }
    }

    /// Encoder features before each pooling step, plus the pooled bottom.
    pub fn encode(&self, g: &mut Graph<T>, p: &BoundParams, x: Var) -> Result<([Var; 4], Var)> {
        let f1 = self.conv1.forward_relu(g, p, x)?;
        let q1 = g.max_pool2x2(f1)?;
        let f2 = self.conv2.forward_relu(g, p, q1)?;
        let q2 = g.max_pool2x2(f2)?;
        let f3 = self.mfcu3.forward(g, p, q2)?;
        let q3 = g.max_pool2x2(f3)?;
        let f4 = self.mfcu4.forward(g, p, q3)?;
        let bottom = g.max_pool2x2(f4)?;
        Ok(([f1, f2, f3, f4], bottom))
    }

    /// Probability map `[n, 1, h, w]` for inputs whose sides are multiples
    /// of [`FCN_ALIGN`].
    pub fn forward<R: Rng + ?Sized>(
        &self,
        g: &mut Graph<T>,
        p: &BoundParams,
        x1: Var,
        x2: Var,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var> {
        let (s1, s2) = (g.shape(x1), g.shape(x2));
        if s1 != s2 {
            return Err(Error::Shape(format!("image shapes differ: {s1:?} vs {s2:?}")));
        }
        if s1[1] != self.config.bands {
            return Err(Error::Shape(format!(
                "network expects {} bands, got {}",
                self.config.bands, s1[1]
            )));
        }
        if s1[2] % FCN_ALIGN != 0 || s1[3] % FCN_ALIGN != 0 {
            return Err(Error::Shape(format!(
                "sides must be multiples of {FCN_ALIGN}, got {}x{}",
                s1[2], s1[3]
            )));
        }
        let (fa, bottom) = self.encode(g, p, x1)?;
        let (fb, _) = self.encode(g, p, x2)?;
        let mut d = g.dropout(bottom, self.config.dropout, mode, rng)?;
        for (stage, up) in self.up.iter().enumerate() {
            let level = 3 - stage;
            let u = up.forward_relu(g, p, d)?;
            let diff = g.abs_diff(fa[level], fb[level])?;
            d = g.concat(&[u, fa[level], diff])?;
        }
        let logit = self.head.forward(g, p, d)?;
        Ok(g.sigmoid(logit))
    }

    /// Whole-image inference at any size: reflect-pads bottom/right to the
    /// alignment, runs the network without gradient tracking and crops back.
    /// Inputs are `[n, bands, h, w]`; output is `[n, 1, h, w]`.
    pub fn predict(&self, t1: &Tensor<T>, t2: &Tensor<T>) -> Result<Tensor<T>> {
        if t1.shape() != t2.shape() {
            return Err(Error::Shape(format!(
                "image shapes differ: {:?} vs {:?}",
                t1.shape(),
                t2.shape()
            )));
        }
        let [_, _, h, w] = t1.shape();
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let x1 = g.input(pad_to_multiple(t1, FCN_ALIGN));
        let x2 = g.input(pad_to_multiple(t2, FCN_ALIGN));
        // evaluation mode draws nothing from the generator
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let y = self.forward(&mut g, &p, x1, x2, Mode::Eval, &mut rng)?;
        let y = g.crop(y, h, w)?;
        Ok(g.value(y).clone())
    }
}

/// Reflect-pads the bottom and right edges up to the next multiple of `align`.
pub fn pad_to_multiple<T: Real>(t: &Tensor<T>, align: usize) -> Tensor<T> {
    let [n, c, h, w] = t.shape();
    let ph = h.div_ceil(align) * align;
    let pw = w.div_ceil(align) * align;
    if (ph, pw) == (h, w) {
        return t.clone();
    }
    let mut out = Tensor::zeros([n, c, ph, pw]);
    let src = t.data();
    let dst = out.data_mut();
    for plane in 0..n * c {
        for y in 0..ph {
            let sy = reflect_index(y as isize, h);
            for x in 0..pw {
                let sx = reflect_index(x as isize, w);
                dst[(plane * ph + y) * pw + x] = src[(plane * h + sy) * w + sx];
            }
        }
    }
    out
}
