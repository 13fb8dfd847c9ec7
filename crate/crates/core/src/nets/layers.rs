use rand::Rng;

use crate::error::Result;
use crate::tensor::{he_normal, BoundParams, Graph, ParamId, ParamStore, Real, Tensor, Var};

/// Same-padded `k x k` convolution with bias.
#[derive(Debug, Clone, Copy)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
}

impl Conv {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.add(
            format!("{name}.weight"),
            he_normal([cout, cin, k, k], cin * k * k, rng)?,
            true,
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros([1, cout, 1, 1]), false);
        Ok(Conv {
            weight,
            bias,
            cin,
            cout,
            k,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &BoundParams, x: Var) -> Result<Var> {
        g.conv2d(x, p.var(self.weight), p.var(self.bias))
    }

    pub fn forward_relu<T: Real>(&self, g: &mut Graph<T>, p: &BoundParams, x: Var) -> Result<Var> {
        let y = self.forward(g, p, x)?;
        Ok(g.relu(y))
    }

    pub fn param_count(&self) -> usize {
        self.cout * self.cin * self.k * self.k + self.cout
    }
}

/// 2x2 stride-2 transpose convolution with bias, followed by ReLU.
#[derive(Debug, Clone, Copy)]
pub struct UpConv {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl UpConv {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.add(
            format!("{name}.weight"),
            he_normal([cin, cout, 2, 2], cin, rng)?,
            true,
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros([1, cout, 1, 1]), false);
        Ok(UpConv { weight, bias })
    }

    pub fn forward_relu<T: Real>(&self, g: &mut Graph<T>, p: &BoundParams, x: Var) -> Result<Var> {
        let y = g.conv_transpose2x2(x, p.var(self.weight), p.var(self.bias))?;
        Ok(g.relu(y))
    }
}
