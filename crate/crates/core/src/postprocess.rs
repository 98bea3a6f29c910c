//! Probability maps to final masks: binarisation at a threshold, removal of
//! small connected components, and a grid search over both thresholds.
//!
//! Probability maps are brought to ground-truth resolution (bilinear) before
//! binarisation, so the removal threshold counts ground-truth pixels.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{metrics_from_counts, ConfusionCounts};
use crate::raster::{MaskTensor, ProbMap};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Connectivity {
    Four,
    #[default]
    Eight,
}

impl Connectivity {
    fn offsets(self) -> &'static [(isize, isize)] {
        match self {
            Connectivity::Four => &[(-1, 0), (1, 0), (0, -1), (0, 1)],
            Connectivity::Eight => &[
                (-1, -1),
                (-1, 0),
                (-1, 1),
                (0, -1),
                (0, 1),
                (1, -1),
                (1, 0),
                (1, 1),
            ],
        }
    }
}

impl TryFrom<u8> for Connectivity {
    type Error = Error;

    fn try_from(v: u8) -> Result<Self> {
        match v {
            4 => Ok(Connectivity::Four),
            8 => Ok(Connectivity::Eight),
            other => Err(Error::InvalidArgument(format!("connectivity must be 4 or 8, got {other}"))),
        }
    }
}

impl From<Connectivity> for u8 {
    fn from(c: Connectivity) -> u8 {
        match c {
            Connectivity::Four => 4,
            Connectivity::Eight => 8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PostprocessParams {
    /// Pixels with probability strictly above this are foreground.
    pub binarization_threshold: f64,
    /// Components with fewer pixels than this are removed.
    pub removal_threshold: usize,
    pub connectivity: Connectivity,
}

impl Default for PostprocessParams {
    fn default() -> Self {
        Self {
            binarization_threshold: 0.5,
            removal_threshold: 0,
            connectivity: Connectivity::Eight,
        }
    }
}

impl PostprocessParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.binarization_threshold) {
            return Err(Error::InvalidArgument(format!(
                "binarization threshold {} outside [0, 1]",
                self.binarization_threshold
            )));
        }
        Ok(())
    }

    /// Full post-processing of a map to a mask of the given resolution.
    pub fn apply(&self, map: &ProbMap, height: usize, width: usize) -> MaskTensor {
        let map = map.resize_bilinear(height, width);
        let mask = binarize(&map, self.binarization_threshold);
        remove_small_components(&mask, self.removal_threshold, self.connectivity)
    }
}

/// Foreground where `p > threshold`, compared at the map's `f32` precision.
pub fn binarize(map: &ProbMap, threshold: f64) -> MaskTensor {
    let data = map
        .data()
        .iter()
        .map(|&p| (p > threshold as f32) as u8)
        .collect();
    MaskTensor::new(map.height(), map.width(), data).expect("same shape as the map")
}

/// Connected-component labelling. Label 0 is background; labels `1..=n` index
/// `areas[label - 1]`.
#[derive(Debug, Clone)]
pub struct Components {
    pub labels: Vec<u32>,
    pub areas: Vec<usize>,
}

pub fn label_components(mask: &MaskTensor, connectivity: Connectivity) -> Components {
    let (h, w) = (mask.height() as isize, mask.width() as isize);
    let data = mask.data();
    let mut labels = vec![0u32; data.len()];
    let mut areas = Vec::new();
    let mut stack = Vec::new();
    for start in 0..data.len() {
        if data[start] == 0 || labels[start] != 0 {
            continue;
        }
        let label = areas.len() as u32 + 1;
        labels[start] = label;
        stack.push(start);
        let mut area = 0;
        while let Some(idx) = stack.pop() {
            area += 1;
            let (r, c) = ((idx as isize) / w, (idx as isize) % w);
            for &(dr, dc) in connectivity.offsets() {
                let (nr, nc) = (r + dr, c + dc);
                if nr < 0 || nc < 0 || nr >= h || nc >= w {
                    continue;
                }
                let n = (nr * w + nc) as usize;
                if data[n] == 1 && labels[n] == 0 {
                    labels[n] = label;
                    stack.push(n);
                }
            }
        }
        areas.push(area);
    }
    Components { labels, areas }
}

/// Zeroes every component whose area is below `min_area`. `min_area = 0`
/// returns the input unchanged.
pub fn remove_small_components(mask: &MaskTensor, min_area: usize, connectivity: Connectivity) -> MaskTensor {
    if min_area <= 1 {
        return mask.clone();
    }
    let comps = label_components(mask, connectivity);
    let data = comps
        .labels
        .iter()
        .map(|&l| (l != 0 && comps.areas[l as usize - 1] >= min_area) as u8)
        .collect();
    MaskTensor::new(mask.height(), mask.width(), data).expect("same shape as the mask")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResolutionPolicy {
    /// Resize probability maps bilinearly to the ground-truth resolution.
    #[default]
    UpsampleToTruth,
    /// Require maps to already match the ground truth.
    Strict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridConfig {
    pub bt_grid: Vec<f64>,
    pub rt_grid: Vec<usize>,
    pub connectivity: Connectivity,
    pub resolution_policy: ResolutionPolicy,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            bt_grid: default_bt_grid(),
            rt_grid: default_rt_grid(),
            connectivity: Connectivity::Eight,
            resolution_policy: ResolutionPolicy::UpsampleToTruth,
        }
    }
}

/// 0.05, 0.10, ..., 0.95.
pub fn default_bt_grid() -> Vec<f64> {
    (1..=19).map(|k| (5 * k) as f64 / 100.0).collect()
}

pub fn default_rt_grid() -> Vec<usize> {
    vec![0, 128, 256, 512, 1024, 2048, 4096]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurfaceCell {
    pub bt: f64,
    pub rt: usize,
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSearchResult {
    pub bt_grid: Vec<f64>,
    pub rt_grid: Vec<usize>,
    pub connectivity: Connectivity,
    /// Pooled IoU for every grid cell, BT-major in ascending order.
    pub surface: Vec<SurfaceCell>,
    pub best: PostprocessParams,
    pub best_iou: f64,
}

impl GridSearchResult {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn iou_at(&self, bt: f64, rt: usize) -> Option<f64> {
        self.surface
            .iter()
            .find(|c| c.bt == bt && c.rt == rt)
            .map(|c| c.iou)
    }
}

/// Pooled IoU of post-processed maps against their masks at one parameter pair.
pub fn pooled_iou(pairs: &[(ProbMap, MaskTensor)], params: &PostprocessParams) -> Result<f64> {
    let mut counts = ConfusionCounts::default();
    for (map, truth) in pairs {
        let pred = params.apply(map, truth.height(), truth.width());
        counts += crate::metrics::confusion(&pred, truth)?;
    }
    Ok(metrics_from_counts(&counts)?.iou)
}

/// Evaluates every `(BT, RT)` pair on the given maps and returns the full
/// surface and its argmax. Ties go to the lowest BT, then the lowest RT.
pub fn grid_search(pairs: &[(ProbMap, MaskTensor)], config: &GridConfig) -> Result<GridSearchResult> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("grid search needs at least one map".into()));
    }
    if config.bt_grid.is_empty() || config.rt_grid.is_empty() {
        return Err(Error::InvalidArgument("threshold grids must be nonempty".into()));
    }
    let mut bt_grid = config.bt_grid.clone();
    for &bt in &bt_grid {
        if !(0.0..=1.0).contains(&bt) {
            return Err(Error::InvalidArgument(format!("BT {bt} outside [0, 1]")));
        }
    }
    bt_grid.sort_by(|a, b| a.total_cmp(b));
    bt_grid.dedup();
    let mut rt_grid = config.rt_grid.clone();
    rt_grid.sort_unstable();
    rt_grid.dedup();

    let maps: Vec<ProbMap> = pairs
        .iter()
        .map(|(map, truth)| {
            let same = map.height() == truth.height() && map.width() == truth.width();
            match (same, config.resolution_policy) {
                (true, _) => Ok(map.clone()),
                (false, ResolutionPolicy::UpsampleToTruth) => {
                    Ok(map.resize_bilinear(truth.height(), truth.width()))
                }
                (false, ResolutionPolicy::Strict) => Err(Error::shape(
                    format!("{}x{}", truth.height(), truth.width()),
                    format!("{}x{}", map.height(), map.width()),
                )),
            }
        })
        .collect::<Result<_>>()?;

    let mut grid = vec![ConfusionCounts::default(); bt_grid.len() * rt_grid.len()];
    for (map, (_, truth)) in maps.iter().zip(pairs) {
        let truth_pos = truth.foreground() as u64;
        let total = truth.data().len() as u64;
        for (bi, &bt) in bt_grid.iter().enumerate() {
            let mask = binarize(map, bt);
            let comps = label_components(&mask, config.connectivity);
            let mut hits = vec![0u64; comps.areas.len()];
            for (&l, &t) in comps.labels.iter().zip(truth.data()) {
                if l != 0 && t == 1 {
                    hits[l as usize - 1] += 1;
                }
            }
            for (ri, &rt) in rt_grid.iter().enumerate() {
                let (mut tp, mut fp) = (0u64, 0u64);
                for (&area, &hit) in comps.areas.iter().zip(&hits) {
                    if area >= rt {
                        tp += hit;
                        fp += area as u64 - hit;
                    }
                }
                let fn_ = truth_pos - tp;
                grid[bi * rt_grid.len() + ri] += ConfusionCounts::new(tp, fp, fn_, total - tp - fp - fn_);
            }
        }
    }

    let mut surface = Vec::with_capacity(grid.len());
    let mut best: Option<SurfaceCell> = None;
    for (bi, &bt) in bt_grid.iter().enumerate() {
        for (ri, &rt) in rt_grid.iter().enumerate() {
            let iou = metrics_from_counts(&grid[bi * rt_grid.len() + ri])?.iou;
            let cell = SurfaceCell { bt, rt, iou };
            if best.is_none_or(|b| iou > b.iou) {
                best = Some(cell);
            }
            surface.push(cell);
        }
    }
    let best = best.expect("nonempty grid");
    Ok(GridSearchResult {
        bt_grid,
        rt_grid,
        connectivity: config.connectivity,
        surface,
        best: PostprocessParams {
            binarization_threshold: best.bt,
            removal_threshold: best.rt,
            connectivity: config.connectivity,
        },
        best_iou: best.iou,
    })
}
