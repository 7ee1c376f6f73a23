//! Segmentation evaluation: per-class Dice, boundary Hausdorff distances
//! between consecutive frames, area ejection fraction, seven per-frame shape
//! attributes, and range-relative temporal inconsistency flags.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::field::LabelMask;

pub const LV_ENDO: u8 = 1;
pub const MYO: u8 = 2;
pub const DEFAULT_TAU: f64 = 0.15;

pub const ATTRIBUTE_NAMES: [&str; 7] = [
    "lv_area",
    "lv_width_at_valves",
    "lv_length",
    "lv_orientation",
    "myo_area",
    "epi_com_x",
    "epi_com_y",
];

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("mask shapes differ: {0}x{1} vs {2}x{3}")]
    ShapeMismatch(usize, usize, usize, usize),
    #[error("class {class} region is empty in frame {frame}")]
    EmptyClass { class: u8, frame: usize },
    #[error("class {class} region is empty in the {side} mask")]
    EmptySide { class: u8, side: &'static str },
    #[error("need at least {need} frames, got {got}")]
    TooFewFrames { need: usize, got: usize },
    #[error("predicted and reference sequences differ in length: {0} vs {1}")]
    CountMismatch(usize, usize),
    #[error("tau = {0} must be > 0")]
    BadTau(f64),
    #[error("series of length {0} is too short for consistency flags")]
    ShortSeries(usize),
}

fn check_shapes(a: &LabelMask, b: &LabelMask) -> Result<(), MetricsError> {
    if (a.h, a.w) != (b.h, b.w) {
        return Err(MetricsError::ShapeMismatch(a.h, a.w, b.h, b.w));
    }
    Ok(())
}

fn class_count(m: &LabelMask, class: u8) -> usize {
    m.labels.iter().filter(|&&l| l == class).count()
}

/// 2|A and B| / (|A| + |B|) for class-k regions; 1 when both are empty.
pub fn dice(a: &LabelMask, b: &LabelMask, class: u8) -> Result<f64, MetricsError> {
    check_shapes(a, b)?;
    let inter = a
        .labels
        .iter()
        .zip(&b.labels)
        .filter(|&(&x, &y)| x == class && y == class)
        .count();
    let total = class_count(a, class) + class_count(b, class);
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

/// Class-k pixels with a 4-neighbor outside the class; image borders count
/// as outside. Points are (col, row).
pub fn boundary_points(m: &LabelMask, class: u8) -> Vec<(i64, i64)> {
    let (h, w) = (m.h as i64, m.w as i64);
    let at = |x: i64, y: i64| -> bool {
        x >= 0 && y >= 0 && x < w && y < h && m.labels[(y * w + x) as usize] == class
    };
    let mut pts = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if at(x, y)
                && !(at(x - 1, y) && at(x + 1, y) && at(x, y - 1) && at(x, y + 1))
            {
                pts.push((x, y));
            }
        }
    }
    pts
}

/// Largest squared distance from any point of `from` to its nearest point
/// of `to`, by exhaustive integer arithmetic.
fn directed_max_min_d2(from: &[(i64, i64)], to: &[(i64, i64)]) -> i64 {
    let mut worst = 0i64;
    for &(ax, ay) in from {
        let mut best = i64::MAX;
        for &(bx, by) in to {
            let (dx, dy) = (ax - bx, ay - by);
            let d2 = dx * dx + dy * dy;
            if d2 < best {
                best = d2;
                if best == 0 {
                    break;
                }
            }
        }
        if best > worst {
            worst = best;
        }
    }
    worst
}

/// Symmetric boundary Hausdorff distance for class k, scaled by spacing.
pub fn hausdorff(
    a: &LabelMask,
    b: &LabelMask,
    class: u8,
    spacing: f64,
) -> Result<f64, MetricsError> {
    check_shapes(a, b)?;
    let pa = boundary_points(a, class);
    let pb = boundary_points(b, class);
    if pa.is_empty() {
        return Err(MetricsError::EmptySide { class, side: "first" });
    }
    if pb.is_empty() {
        return Err(MetricsError::EmptySide { class, side: "second" });
    }
    let d2 = directed_max_min_d2(&pa, &pb).max(directed_max_min_d2(&pb, &pa));
    Ok((d2 as f64).sqrt() * spacing)
}

/// Mean Hausdorff distance over consecutive frame pairs.
pub fn temporal_hd(masks: &[LabelMask], class: u8, spacing: f64) -> Result<f64, MetricsError> {
    if masks.len() < 2 {
        return Err(MetricsError::TooFewFrames { need: 2, got: masks.len() });
    }
    for (i, m) in masks.iter().enumerate() {
        if class_count(m, class) == 0 {
            return Err(MetricsError::EmptyClass { class, frame: i });
        }
    }
    let mut sum = 0.0;
    for pair in masks.windows(2) {
        sum += hausdorff(&pair[0], &pair[1], class, spacing)?;
    }
    Ok(sum / (masks.len() - 1) as f64)
}

/// Area ejection fraction (A_ED - A_ES)/A_ED over LV_endo pixel counts.
pub fn ef_from_masks(m_ed: &LabelMask, m_es: &LabelMask) -> Result<f64, MetricsError> {
    let a_ed = class_count(m_ed, LV_ENDO) as f64;
    if a_ed == 0.0 {
        return Err(MetricsError::EmptyClass { class: LV_ENDO, frame: 0 });
    }
    let a_es = class_count(m_es, LV_ENDO) as f64;
    Ok((a_ed - a_es) / a_ed)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeAttributes {
    pub lv_area: f64,
    pub lv_width_at_valves: f64,
    pub lv_length: f64,
    /// Angle of the LV principal axis against vertical, degrees in (-90, 90].
    pub lv_orientation: f64,
    pub myo_area: f64,
    pub epi_com_x: f64,
    pub epi_com_y: f64,
}

impl ShapeAttributes {
    pub fn series(&self) -> [f64; 7] {
        [
            self.lv_area,
            self.lv_width_at_valves,
            self.lv_length,
            self.lv_orientation,
            self.myo_area,
            self.epi_com_x,
            self.epi_com_y,
        ]
    }
}

/// Angle of the leading principal component of the pixel cloud against the
/// vertical axis, mapped into (-90, 90]. Isotropic clouds read as 0.
fn principal_angle(points: &[(i64, i64)]) -> f64 {
    let n = points.len() as f64;
    let (mx, my) = points
        .iter()
        .fold((0.0, 0.0), |(sx, sy), &(x, y)| (sx + x as f64, sy + y as f64));
    let (mx, my) = (mx / n, my / n);
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for &(x, y) in points {
        let (dx, dy) = (x as f64 - mx, y as f64 - my);
        sxx += dx * dx;
        sxy += dx * dy;
        syy += dy * dy;
    }
    let half_gap = (sxx - syy) / 2.0;
    let lead = (sxx + syy) / 2.0 + (half_gap * half_gap + sxy * sxy).sqrt();
    // Two candidate eigenvectors; take the numerically larger one.
    let v1 = (sxy, lead - sxx);
    let v2 = (lead - syy, sxy);
    let (vx, vy) = if v1.0 * v1.0 + v1.1 * v1.1 >= v2.0 * v2.0 + v2.1 * v2.1 { v1 } else { v2 };
    if vx == 0.0 && vy == 0.0 {
        return 0.0;
    }
    let mut deg = vx.atan2(vy).to_degrees();
    if deg <= -90.0 {
        deg += 180.0;
    }
    if deg > 90.0 {
        deg -= 180.0;
    }
    deg
}

/// Geometric shape descriptors of one mask. Valve corners are the leftmost
/// and rightmost LV boundary pixels within the bottom 5% of the LV vertical
/// extent (at least one row); the apex is the boundary pixel farthest from
/// their midpoint.
pub fn shape_attributes(m: &LabelMask) -> Result<ShapeAttributes, MetricsError> {
    let lv: Vec<(i64, i64)> = (0..m.h as i64)
        .flat_map(|y| (0..m.w as i64).map(move |x| (x, y)))
        .filter(|&(x, y)| m.labels[(y * m.w as i64 + x) as usize] == LV_ENDO)
        .collect();
    if lv.is_empty() {
        return Err(MetricsError::EmptyClass { class: LV_ENDO, frame: 0 });
    }
    let lv_area = lv.len() as f64;

    let boundary = boundary_points(m, LV_ENDO);
    let max_row = lv.iter().map(|&(_, y)| y).max().unwrap();
    let min_row = lv.iter().map(|&(_, y)| y).min().unwrap();
    let extent = (max_row - min_row + 1) as f64;
    let band_rows = ((0.05 * extent).ceil() as i64).max(1);
    let band_start = max_row - (band_rows - 1);
    let band: Vec<(i64, i64)> =
        boundary.iter().copied().filter(|&(_, y)| y >= band_start).collect();
    // Ties broken toward the base (larger row).
    let left = *band
        .iter()
        .min_by_key(|&&(x, y)| (x, std::cmp::Reverse(y)))
        .expect("band contains the bottom row");
    let right = *band.iter().max_by_key(|&&(x, y)| (x, y)).unwrap();
    let dist = |a: (i64, i64), b: (f64, f64)| -> f64 {
        let (dx, dy) = (a.0 as f64 - b.0, a.1 as f64 - b.1);
        (dx * dx + dy * dy).sqrt()
    };
    let lv_width = dist(left, (right.0 as f64, right.1 as f64));
    let mid = ((left.0 + right.0) as f64 / 2.0, (left.1 + right.1) as f64 / 2.0);
    let lv_length = boundary
        .iter()
        .map(|&p| dist(p, mid))
        .fold(0.0, f64::max);

    let epi: Vec<(i64, i64)> = (0..m.h as i64)
        .flat_map(|y| (0..m.w as i64).map(move |x| (x, y)))
        .filter(|&(x, y)| {
            let l = m.labels[(y * m.w as i64 + x) as usize];
            l == LV_ENDO || l == MYO
        })
        .collect();
    let ne = epi.len() as f64;
    let (sx, sy) = epi
        .iter()
        .fold((0.0, 0.0), |(ax, ay), &(x, y)| (ax + x as f64, ay + y as f64));

    Ok(ShapeAttributes {
        lv_area,
        lv_width_at_valves: lv_width,
        lv_length,
        lv_orientation: principal_angle(&lv),
        myo_area: class_count(m, MYO) as f64,
        epi_com_x: sx / ne,
        epi_com_y: sy / ne,
    })
}

/// Interior frame t is flagged when the value deviates from the midpoint of
/// its neighbors by more than tau times the series range. A constant series
/// never flags.
pub fn temporal_consistency_errors(series: &[f64], tau: f64) -> Result<Vec<bool>, MetricsError> {
    if series.len() < 3 {
        return Err(MetricsError::ShortSeries(series.len()));
    }
    if !(tau > 0.0) {
        return Err(MetricsError::BadTau(tau));
    }
    let max = series.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = series.iter().copied().fold(f64::INFINITY, f64::min);
    let range = max - min;
    let mut flags = vec![false; series.len()];
    if range == 0.0 {
        return Ok(flags);
    }
    for t in 1..series.len() - 1 {
        let midpoint = (series[t - 1] + series[t + 1]) / 2.0;
        flags[t] = (series[t] - midpoint).abs() > tau * range;
    }
    Ok(flags)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SequenceReport {
    /// Per-class Dice against the reference, one value per frame.
    pub dice: BTreeMap<u8, Vec<f64>>,
    pub mean_dice: BTreeMap<u8, f64>,
    /// Mean consecutive-frame LV boundary Hausdorff distance.
    pub temporal_hd_px: f64,
    pub temporal_hd_mm: Option<f64>,
    pub ef_predicted: f64,
    pub ef_reference: f64,
    pub ef_abs_error: f64,
    pub attributes: Vec<ShapeAttributes>,
    pub attribute_flags: BTreeMap<String, Vec<bool>>,
    /// Set exactly when any attribute flags any frame.
    pub temporal_error: bool,
}

/// Full evaluation of predicted masks against references. Attribute flags
/// are computed on the predicted sequence; sequences of fewer than 3 frames
/// have no interior and never flag.
pub fn sequence_report(
    pred: &[LabelMask],
    reference: &[LabelMask],
    spacing_mm: Option<f64>,
    tau: f64,
) -> Result<SequenceReport, MetricsError> {
    if pred.len() != reference.len() {
        return Err(MetricsError::CountMismatch(pred.len(), reference.len()));
    }
    if pred.len() < 2 {
        return Err(MetricsError::TooFewFrames { need: 2, got: pred.len() });
    }
    let mut classes: Vec<u8> = pred
        .iter()
        .chain(reference)
        .flat_map(|m| m.labels.iter().copied())
        .filter(|&l| l > 0)
        .collect();
    classes.sort_unstable();
    classes.dedup();

    let mut dice_map = BTreeMap::new();
    let mut mean_map = BTreeMap::new();
    for &class in &classes {
        let series: Vec<f64> = pred
            .iter()
            .zip(reference)
            .map(|(p, r)| dice(p, r, class))
            .collect::<Result<_, _>>()?;
        let mean = series.iter().sum::<f64>() / series.len() as f64;
        dice_map.insert(class, series);
        mean_map.insert(class, mean);
    }

    let temporal_hd_px = temporal_hd(pred, LV_ENDO, 1.0)?;
    let temporal_hd_mm = spacing_mm.map(|s| temporal_hd_px * s);

    let ef_predicted = ef_from_masks(&pred[0], pred.last().unwrap())?;
    let ef_reference = ef_from_masks(&reference[0], reference.last().unwrap())?;

    let attributes: Vec<ShapeAttributes> = pred
        .iter()
        .enumerate()
        .map(|(i, m)| {
            shape_attributes(m).map_err(|e| match e {
                MetricsError::EmptyClass { class, .. } => {
                    MetricsError::EmptyClass { class, frame: i }
                }
                other => other,
            })
        })
        .collect::<Result<_, _>>()?;

    let mut attribute_flags = BTreeMap::new();
    let mut temporal_error = false;
    for (idx, name) in ATTRIBUTE_NAMES.iter().enumerate() {
        let series: Vec<f64> = attributes.iter().map(|a| a.series()[idx]).collect();
        let flags = if series.len() < 3 {
            vec![false; series.len()]
        } else {
            temporal_consistency_errors(&series, tau)?
        };
        temporal_error |= flags.iter().any(|&f| f);
        attribute_flags.insert((*name).to_string(), flags);
    }

    Ok(SequenceReport {
        dice: dice_map,
        mean_dice: mean_map,
        temporal_hd_px,
        temporal_hd_mm,
        ef_predicted,
        ef_reference,
        ef_abs_error: (ef_predicted - ef_reference).abs(),
        attributes,
        attribute_flags,
        temporal_error,
    })
}
