//! Multi-scale feature convolution unit: four parallel paths over the same
//! input (1x1 conv; 1x1 reduction then 3x3 conv; 1x1 reduction then 5x5
//! conv; 3x3 stride-1 max-pool then 1x1 conv), concatenated along channels.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::Conv;
use crate::error::{Error, Result};
use crate::tensor::{BoundParams, Graph, ParamStore, Real, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MfcuConfig {
    pub in_channels: usize,
    /// Output widths of the 1x1, 3x3, 5x5 and pooling paths.
    pub branch_channels: (usize, usize, usize, usize),
    /// Widths of the 1x1 reductions in front of the 3x3 and 5x5 convs.
    pub bottleneck_channels: (usize, usize),
}

impl MfcuConfig {
    /// Default split of an output width: 1/4, 1/2, 1/8, 1/8 across the four
    /// paths, with reductions at half the width of the path they feed.
    pub fn with_width(in_channels: usize, width: usize) -> Result<Self> {
        if width < 8 || width % 8 != 0 {
            return Err(Error::InvalidArgument(format!(
                "MFCU width must be a positive multiple of 8, got {width}"
            )));
        }
        let (c1, c3, c5, cp) = (width / 4, width / 2, width / 8, width / 8);
        MfcuConfig {
            in_channels,
            branch_channels: (c1, c3, c5, cp),
            bottleneck_channels: ((c3 / 2).max(1), (c5 / 2).max(1)),
        }
        .validated()
    }

    pub fn validated(self) -> Result<Self> {
        let (c1, c3, c5, cp) = self.branch_channels;
        let (b3, b5) = self.bottleneck_channels;
        if [self.in_channels, c1, c3, c5, cp, b3, b5].contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "MFCU channel counts must be >= 1: {self:?}"
            )));
        }
        Ok(self)
    }

    pub fn out_channels(&self) -> usize {
        let (c1, c3, c5, cp) = self.branch_channels;
        c1 + c3 + c5 + cp
    }

    /// Closed-form trainable scalar count (weights plus biases).
    pub fn param_count(&self) -> usize {
        let conv = |cin: usize, cout: usize, k: usize| cout * cin * k * k + cout;
        let i = self.in_channels;
        let (c1, c3, c5, cp) = self.branch_channels;
        let (b3, b5) = self.bottleneck_channels;
        conv(i, c1, 1) + conv(i, b3, 1) + conv(b3, c3, 3) + conv(i, b5, 1) + conv(b5, c5, 5) + conv(i, cp, 1)
    }
}

#[derive(Debug, Clone)]
pub struct Mfcu {
    pub config: MfcuConfig,
    path1: Conv,
    reduce3: Conv,
    path3: Conv,
    reduce5: Conv,
    path5: Conv,
    pool_proj: Conv,
}

impl Mfcu {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        config: MfcuConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let config = config.validated()?;
        let i = config.in_channels;
        let (c1, c3, c5, cp) = config.branch_channels;
        let (b3, b5) = config.bottleneck_channels;
        Ok(Mfcu {
            config,
            path1: Conv::new(store, &format!("{name}.p1"), i, c1, 1, rng)?,
            reduce3: Conv::new(store, &format!("{name}.p3_reduce"), i, b3, 1, rng)?,
            path3: Conv::new(store, &format!("{name}.p3"), b3, c3, 3, rng)?,
            reduce5: Conv::new(store, &format!("{name}.p5_reduce"), i, b5, 1, rng)?,
            path5: Conv::new(store, &format!("{name}.p5"), b5, c5, 5, rng)?,
            pool_proj: Conv::new(store, &format!("{name}.pool_proj"), i, cp, 1, rng)?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &BoundParams, x: Var) -> Result<Var> {
        let c = g.shape(x)[1];
        if c != self.config.in_channels {
            return Err(Error::Shape(format!(
                "MFCU expects {} input channels, got {c}",
                self.config.in_channels
            )));
        }
        let a = self.path1.forward_relu(g, p, x)?;
        let r3 = self.reduce3.forward_relu(g, p, x)?;
        let b = self.path3.forward_relu(g, p, r3)?;
        let r5 = self.reduce5.forward_relu(g, p, x)?;
        let c = self.path5.forward_relu(g, p, r5)?;
        let pooled = g.max_pool3x3_same(x);
        let d = self.pool_proj.forward_relu(g, p, pooled)?;
        g.concat(&[a, b, c, d])
    }
}
