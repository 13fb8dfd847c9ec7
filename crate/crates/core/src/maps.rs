//! Per-pixel change probability and binary decision fields.

use std::path::Path;

use crate::error::{Error, Result};
use crate::raster::{save_label_png, save_raster, Raster};

#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl ProbabilityMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || values.len() != height * width {
            return Err(Error::Shape(format!(
                "{} probabilities for a {height}x{width} map",
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!("probability {v} outside [0, 1]")));
        }
        Ok(ProbabilityMap {
            height,
            width,
            values,
        })
    }

    pub fn from_raster(r: &Raster) -> Result<Self> {
        if r.bands() != 1 {
            return Err(Error::Shape(format!("probability map needs 1 band, got {}", r.bands())));
        }
        ProbabilityMap::new(r.height(), r.width(), r.values().to_vec())
    }

    /// Changed where the probability is strictly above one half.
    pub fn threshold(&self) -> ChangeMap {
        ChangeMap {
            height: self.height,
            width: self.width,
            labels: self.values.iter().map(|&p| u8::from(p > 0.5)).collect(),
        }
    }

    pub fn to_raster(&self) -> Raster {
        Raster::new(1, self.height, self.width, self.values.clone()).expect("valid map")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_raster(&self.to_raster(), path)
    }
}

/// Binary decisions: 1 changed, 0 unchanged.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChangeMap {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u8>,
}

impl ChangeMap {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 || labels.len() != height * width {
            return Err(Error::Shape(format!("{} labels for a {height}x{width} map", labels.len())));
        }
        if labels.iter().any(|&l| l > 1) {
            return Err(Error::InvalidArgument("change map labels must be 0 or 1".into()));
        }
        Ok(ChangeMap {
            height,
            width,
            labels,
        })
    }

    pub fn from_raster(r: &Raster) -> Result<Self> {
        if r.bands() != 1 {
            return Err(Error::Shape(format!("change map needs 1 band, got {}", r.bands())));
        }
        let labels = r
            .values()
            .iter()
            .map(|&v| match v {
                0.0 => Ok(0),
                1.0 => Ok(1),
                other => Err(Error::InvalidArgument(format!("change map value {other} not 0 or 1"))),
            })
            .collect::<Result<Vec<u8>>>()?;
        ChangeMap::new(r.height(), r.width(), labels)
    }

    pub fn changed(&self) -> usize {
        self.labels.iter().filter(|&&l| l == 1).count()
    }

    pub fn to_raster(&self) -> Raster {
        let values = self.labels.iter().map(|&l| l as f64).collect();
        Raster::new(1, self.height, self.width, values).expect("valid map")
    }

    /// BRAS file plus a black/white PNG beside it.
    pub fn save(&self, bras: &Path, png: Option<&Path>) -> Result<()> {
        save_raster(&self.to_raster(), bras)?;
        if let Some(p) = png {
            save_label_png(&self.labels, self.height, self.width, p)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn threshold_is_strict() {
        let p = ProbabilityMap::new(1, 3, vec![0.5, 0.51, 0.0]).unwrap();
        assert_eq!(p.threshold().labels, vec![0, 1, 0]);
        assert!(ProbabilityMap::new(1, 1, vec![1.5]).is_err());
        assert!(ProbabilityMap::new(1, 1, vec![f64::NAN]).is_err());
    }

    #[test]
    fn change_map_raster_round_trip() {
        let m = ChangeMap::new(2, 2, vec![0, 1, 1, 0]).unwrap();
        assert_eq!(ChangeMap::from_raster(&m.to_raster()).unwrap(), m);
        assert!(ChangeMap::new(1, 1, vec![2]).is_err());
    }
}
