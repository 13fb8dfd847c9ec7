//! Loader for the SZTAKI AirChange benchmark laid out as
//! `<root>/<Szada|Tiszadob>/<n>/{im1,im2,gt}.{png|bras}`.
//!
//! Szada and Tiszadob form separate datasets. The top-left 448 x 784
//! (rows x cols) window of Szada-1 and Tiszadob-3 is the test set; the rest
//! of those two scenes, as a right strip and a bottom strip, and every other
//! scene are training data. The single-pair "Archieve" scene is skipped.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::raster::{crop, load_mask, load_raster, LabelMask, RasterFormat, RasterPair};

pub const ACD_TEST_ROWS: usize = 448;
pub const ACD_TEST_COLS: usize = 784;
const DATASETS: [(&str, usize); 2] = [("Szada", 1), ("Tiszadob", 3)];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AcdSplit {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AcdRegion {
    Full,
    TestCrop,
    /// Rows above the crop's bottom edge, right of the crop.
    RightStrip,
    /// Every row below the crop, full width.
    BottomStrip,
}

impl fmt::Display for AcdRegion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AcdRegion::Full => "full",
            AcdRegion::TestCrop => "test",
            AcdRegion::RightStrip => "right",
            AcdRegion::BottomStrip => "bottom",
        })
    }
}

#[derive(Debug, Clone)]
pub struct AcdSample {
    pub scene: usize,
    pub region: AcdRegion,
    pub split: AcdSplit,
    pub pair: RasterPair,
    pub mask: LabelMask,
}

impl AcdSample {
    /// `<scene>_<region>`, e.g. `3_right`.
    pub fn id(&self) -> String {
        format!("{}_{}", self.scene, self.region)
    }
}

#[derive(Debug, Clone)]
pub struct AcdDataset {
    pub name: String,
    pub samples: Vec<AcdSample>,
}

impl AcdDataset {
    pub fn split(&self, split: AcdSplit) -> Vec<(RasterPair, LabelMask)> {
        self.samples
            .iter()
            .filter(|s| s.split == split)
            .map(|s| (s.pair.clone(), s.mask.clone()))
            .collect()
    }
}

fn find_file(dir: &Path, stem: &str) -> Result<PathBuf> {
    ["png", "bras"]
        .iter()
        .map(|ext| dir.join(format!("{stem}.{ext}")))
        .find(|p| p.is_file())
        .ok_or_else(|| {
            Error::io(
                dir.join(format!("{stem}.png")),
                std::io::Error::new(std::io::ErrorKind::NotFound, "missing scene file (png or bras)"),
            )
        })
}

/// Ground truth as an 8-bit image (bright = changed) or a BRAS label mask,
/// chosen by extension.
pub fn load_truth(path: &Path) -> Result<LabelMask> {
    if RasterFormat::from_path(path) == RasterFormat::Bras {
        return load_mask(path);
    }
    let r = load_raster(path, RasterFormat::Png8)?;
    let labels = r.band(0).iter().map(|&v| (v > 127.0) as u8).collect();
    LabelMask::new(r.height(), r.width(), labels)
}

fn load_scene(dir: &Path) -> Result<(RasterPair, LabelMask)> {
    let image = |stem| {
        let p = find_file(dir, stem)?;
        load_raster(&p, RasterFormat::from_path(&p))
    };
    let pair = RasterPair::new(image("im1")?, image("im2")?)?;
    let mask = load_truth(&find_file(dir, "gt")?)?;
    if !mask.matches(&pair) {
        return Err(Error::Shape(format!("{}: ground truth size differs from the images", dir.display())));
    }
    Ok((pair, mask))
}

fn scene_dirs(dir: &Path) -> Result<Vec<(usize, PathBuf)>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut scenes = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        let id = entry.file_name().to_str().and_then(|s| s.parse::<usize>().ok());
        if let (Some(id), true) = (id, path.is_dir()) {
            scenes.push((id, path));
        }
    }
    scenes.sort();
    Ok(scenes)
}

fn window(pair: &RasterPair, mask: &LabelMask, r: usize, c: usize, h: usize, w: usize) -> Result<(RasterPair, LabelMask)> {
    Ok((
        RasterPair::new(crop(&pair.t1, r, c, h, w)?, crop(&pair.t2, r, c, h, w)?)?,
        mask.crop(r, c, h, w)?,
    ))
}

fn split_test_scene(scene: usize, pair: &RasterPair, mask: &LabelMask) -> Result<Vec<AcdSample>> {
    let (h, w) = (pair.height(), pair.width());
    if h < ACD_TEST_ROWS || w < ACD_TEST_COLS {
        return Err(Error::Shape(format!(
            "test scene {scene} is {h}x{w}, smaller than the {ACD_TEST_ROWS}x{ACD_TEST_COLS} test window"
        )));
    }
    let mut out = Vec::new();
    let mut push = |region, split, (pair, mask)| {
        out.push(AcdSample {
            scene,
            region,
            split,
            pair,
            mask,
        })
    };
    push(AcdRegion::TestCrop, AcdSplit::Test, window(pair, mask, 0, 0, ACD_TEST_ROWS, ACD_TEST_COLS)?);
    if w > ACD_TEST_COLS {
        push(
            AcdRegion::RightStrip,
            AcdSplit::Train,
            window(pair, mask, 0, ACD_TEST_COLS, ACD_TEST_ROWS, w - ACD_TEST_COLS)?,
        );
    }
    if h > ACD_TEST_ROWS {
        push(
            AcdRegion::BottomStrip,
            AcdSplit::Train,
            window(pair, mask, ACD_TEST_ROWS, 0, h - ACD_TEST_ROWS, w)?,
        );
    }
    Ok(out)
}

/// Returns the Szada and Tiszadob datasets, in that order.
pub fn ingest_acd(root: &Path) -> Result<Vec<AcdDataset>> {
    let mut datasets = Vec::new();
    for (name, test_scene) in DATASETS {
        let dir = root.join(name);
        let scenes = scene_dirs(&dir)?;
        if !scenes.iter().any(|(id, _)| *id == test_scene) {
            return Err(Error::io(
                dir.join(test_scene.to_string()),
                std::io::Error::new(std::io::ErrorKind::NotFound, "missing test scene"),
            ));
        }
        let mut samples = Vec::new();
        for (id, path) in scenes {
            let (pair, mask) = load_scene(&path)?;
            if id == test_scene {
                samples.extend(split_test_scene(id, &pair, &mask)?);
            } else {
                samples.push(AcdSample {
                    scene: id,
                    region: AcdRegion::Full,
                    split: AcdSplit::Train,
                    pair,
                    mask,
                });
            }
        }
        datasets.push(AcdDataset {
            name: name.to_string(),
            samples,
        });
    }
    Ok(datasets)
}
