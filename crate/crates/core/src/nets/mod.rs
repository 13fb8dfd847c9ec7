//! The multi-scale feature convolution unit and the two siamese networks
//! built from it.

mod dsmscn;
mod dsmsfcn;
mod layers;
mod mfcu;

pub use dsmscn::{DiffLevels, Dsmscn, DsmscnConfig};
pub use dsmsfcn::{pad_to_multiple, Dsmsfcn, DsmsfcnConfig, FCN_ALIGN};
pub use layers::{Conv, UpConv};
pub use mfcu::{Mfcu, MfcuConfig};

use crate::tensor::{ParamStore, Real};

/// Trainable scalar count per named parameter.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParameterTable {
    pub rows: Vec<(String, usize)>,
    pub total: usize,
}

impl std::fmt::Display for ParameterTable {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let width = self.rows.iter().map(|(n, _)| n.len()).max().unwrap_or(5).max(5);
        for (name, count) in &self.rows {
            writeln!(f, "{name:<width$}  {count:>10}")?;
        }
        write!(f, "{:<width$}  {:>10}", "total", self.total)
    }
}

pub fn count_parameters<T: Real>(store: &ParamStore<T>) -> ParameterTable {
    let rows: Vec<(String, usize)> = store.iter().map(|p| (p.name.clone(), p.tensor.len())).collect();
    let total = rows.iter().map(|(_, c)| c).sum();
    ParameterTable { rows, total }
}

/// Closed-form size of a plain same-padded conv layer with bias.
pub fn plain_conv_params(cin: usize, cout: usize, k: usize) -> usize {
    cout * cin * k * k + cout
}
