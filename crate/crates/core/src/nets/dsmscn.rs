//! Patch-level siamese network: predicts the change probability of the
//! center pixel of a pair of `w x w` patches.
//!
//! Each branch runs two plain 3x3 conv blocks and two MFCU blocks without
//! pooling. Absolute feature differences from the selected depths are
//! concatenated, fused by a 1x1 conv, passed through one more MFCU, globally
//! average-pooled and mapped to a probability by an affine unit + sigmoid.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::Conv;
use super::mfcu::{Mfcu, MfcuConfig};
use crate::error::{Error, Result};
use crate::tensor::{BoundParams, Graph, Mode, ParamStore, Real, Var};

/// Which per-depth feature differences feed the judging network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiffLevels {
    /// Both plain conv depths and both MFCU depths.
    All,
    MfcuOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DsmscnConfig {
    pub bands: usize,
    pub patch_size: usize,
    pub conv_channels: [usize; 2],
    pub mfcu_channels: [usize; 2],
    pub fusion_channels: usize,
    pub judge_channels: usize,
    pub diff_levels: DiffLevels,
    pub dropout: f64,
}

impl DsmscnConfig {
    pub fn new(bands: usize) -> Self {
        DsmscnConfig {
            bands,
            patch_size: 13,
            conv_channels: [16, 32],
            mfcu_channels: [64, 128],
            fusion_channels: 128,
            judge_channels: 128,
            diff_levels: DiffLevels::All,
            dropout: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size < 5 || self.patch_size % 2 == 0 {
            return Err(Error::InvalidArgument(format!(
                "patch size must be odd and >= 5, got {}",
                self.patch_size
            )));
        }
        if self.bands == 0 {
            return Err(Error::InvalidArgument("band count must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidArgument(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        Ok(())
    }

    fn diff_width(&self) -> usize {
        let mfcu: usize = self.mfcu_channels.iter().sum();
        match self.diff_levels {
            DiffLevels::All => self.conv_channels.iter().sum::<usize>() + mfcu,
            DiffLevels::MfcuOnly => mfcu,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Dsmscn<T> {
    pub config: DsmscnConfig,
    pub params: ParamStore<T>,
    conv1: Conv,
    conv2: Conv,
    mfcu1: Mfcu,
    mfcu2: Mfcu,
    fusion: Conv,
    judge: Mfcu,
    head: Conv,
}

impl<T: Real> Dsmscn<T> {
    pub fn new<R: Rng + ?Sized>(config: DsmscnConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut s = ParamStore::new();
        let [c1, c2] = config.conv_channels;
        let [m1, m2] = config.mfcu_channels;
        let conv1 = Conv::new(&mut s, "branch.conv1", config.bands, c1, 3, rng)?;
        let conv2 = Conv::new(&mut s, "branch.conv2", c1, c2, 3, rng)?;
        let mfcu1 = Mfcu::new(&mut s, "branch.mfcu1", MfcuConfig::with_width(c2, m1)?, rng)?;
        let mfcu2 = Mfcu::new(&mut s, "branch.mfcu2", MfcuConfig::with_width(m1, m2)?, rng)?;
        let fusion = Conv::new(&mut s, "judge.fusion", config.diff_width(), config.fusion_channels, 1, rng)?;
        let judge = Mfcu::new(
            &mut s,
            "judge.mfcu",
            MfcuConfig::with_width(config.fusion_channels, config.judge_channels)?,
            rng,
        )?;
        let head = Conv::new(&mut s, "judge.linear", config.judge_channels, 1, 1, rng)?;
        Ok(Dsmscn {
            config,
            params: s,
            conv1,
            conv2,
            mfcu1,
            mfcu2,
            fusion,
            judge,
            head,
        })
    }

    /// Converts the parameters to another precision.
    pub fn cast<U: Real>(&self) -> Dsmscn<U> {
        Dsmscn {
            config: self.config.clone(),
            params: self.params.cast(),
            conv1: self.conv1,
            conv2: self.conv2,
            mfcu1: self.mfcu1.clone(),
            mfcu2: self.mfcu2.clone(),
            fusion: self.fusion,
            judge: self.judge.clone(),
            head: self.head,
        }
    }

    /// Feature maps of one branch at its four depths.
    pub fn branch(&self, g: &mut Graph<T>, p: &BoundParams, x: Var) -> Result<[Var; 4]> {
        let f1 = self.conv1.forward_relu(g, p, x)?;
        let f2 = self.conv2.forward_relu(g, p, f1)?;
        let f3 = self.mfcu1.forward(g, p, f2)?;
        let f4 = self.mfcu2.forward(g, p, f3)?;
        Ok([f1, f2, f3, f4])
    }

    /// Change probability per patch pair, shape `[n, 1, 1, 1]`.
    /// `x1`, `x2` are `[n, bands, w, w]`.
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
            return Err(Error::Shape(format!("patch shapes differ: {s1:?} vs {s2:?}")));
        }
        let w = self.config.patch_size;
        if s1[1] != self.config.bands || s1[2] != w || s1[3] != w {
            return Err(Error::Shape(format!(
                "expected [n, {}, {w}, {w}] patches, got {s1:?}",
                self.config.bands
            )));
        }
        let a = self.branch(g, p, x1)?;
        let b = self.branch(g, p, x2)?;
        let levels: &[usize] = match self.config.diff_levels {
            DiffLevels::All => &[0, 1, 2, 3],
            DiffLevels::MfcuOnly => &[2, 3],
        };
        let diffs = levels
            .iter()
            .map(|&l| g.abs_diff(a[l], b[l]))
            .collect::<Result<Vec<_>>>()?;
        let cat = g.concat(&diffs)?;
        let fused = self.fusion.forward_relu(g, p, cat)?;
        let judged = self.judge.forward(g, p, fused)?;
        let pooled = g.global_avg_pool(judged);
        let dropped = g.dropout(pooled, self.config.dropout, mode, rng)?;
        let logit = self.head.forward(g, p, dropped)?;
        Ok(g.sigmoid(logit))
    }
}
