//! Overlap and surface-distance metrics for segmentation maps.
//!
//! Masks are row-major `height × width` boolean slices. Surface pixels are
//! mask pixels with a non-mask 4-neighbour or on the image border. When
//! exactly one of the two surfaces is empty the distance metrics return the
//! image diagonal; when both are empty they return 0.

use serde::{Deserialize, Serialize};

use crate::dataio::ClassMap;

/// Class whose surface distances are reported.
pub const LESION_CLASS: u8 = 1;

/// `2|P∩G| / (|P| + |G|)`, 1 when both are empty.
pub fn dice(pred: &[bool], gt: &[bool]) -> f64 {
    assert_eq!(pred.len(), gt.len(), "mask sizes differ");
    let (mut inter, mut total) = (0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt) {
        inter += (p && g) as usize;
        total += p as usize + g as usize;
    }
    if total == 0 {
        1.0
    } else {
        2.0 * inter as f64 / total as f64
    }
}

/// Mean IoU over classes present in either map.
pub fn miou(pred: &[u8], gt: &[u8], classes: usize) -> f64 {
    assert_eq!(pred.len(), gt.len(), "map sizes differ");
    let mut inter = vec![0usize; classes];
    let mut union = vec![0usize; classes];
    for (&p, &g) in pred.iter().zip(gt) {
        let (p, g) = (p as usize, g as usize);
        if p == g {
            inter[p] += 1;
            union[p] += 1;
        } else {
            union[p] += 1;
            union[g] += 1;
        }
    }
    let ious: Vec<f64> = (0..classes)
        .filter(|&c| union[c] > 0)
        .map(|c| inter[c] as f64 / union[c] as f64)
        .collect();
    if ious.is_empty() {
        1.0
    } else {
        ious.iter().sum::<f64>() / ious.len() as f64
    }
}

/// Surface pixel coordinates `(y, x)` in row-major order.
pub fn surface(mask: &[bool], height: usize, width: usize) -> Vec<(usize, usize)> {
    assert_eq!(mask.len(), height * width, "mask size");
    let at = |y: usize, x: usize| mask[y * width + x];
    let mut out = Vec::new();
    for y in 0..height {
        for x in 0..width {
            if !at(y, x) {
                continue;
            }
            let border = y == 0 || x == 0 || y + 1 == height || x + 1 == width;
            if border || !at(y - 1, x) || !at(y + 1, x) || !at(y, x - 1) || !at(y, x + 1) {
                out.push((y, x));
            }
        }
    }
    out
}

fn nearest(from: &[(usize, usize)], to: &[(usize, usize)]) -> Vec<f64> {
    from.iter()
        .map(|&(y, x)| {
            to.iter()
                .map(|&(v, u)| {
                    let (dy, dx) = (y as f64 - v as f64, x as f64 - u as f64);
                    dy * dy + dx * dx
                })
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .collect()
}

/// Directed nearest-surface distances `(pred → gt, gt → pred)`, or `None`
/// when either surface is empty.
pub fn surface_distances(pred: &[bool], gt: &[bool], height: usize, width: usize) -> Option<(Vec<f64>, Vec<f64>)> {
    let (sp, sg) = (surface(pred, height, width), surface(gt, height, width));
    if sp.is_empty() || sg.is_empty() {
        return None;
    }
    Some((nearest(&sp, &sg), nearest(&sg, &sp)))
}

/// Linear-interpolation percentile (`q` in `[0, 100]`) of a non-empty slice.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = q / 100.0 * (v.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = (lo + 1).min(v.len() - 1);
    v[lo] + (rank - lo as f64) * (v[hi] - v[lo])
}

fn surface_metric(pred: &[bool], gt: &[bool], height: usize, width: usize, reduce: impl Fn(&[f64]) -> f64) -> f64 {
    match surface_distances(pred, gt, height, width) {
        Some((a, b)) => {
            // sorted so the reduction does not depend on argument order
            let mut all = [a, b].concat();
            all.sort_by(f64::total_cmp);
            reduce(&all)
        }
        None => {
            let (ep, eg) = (!pred.iter().any(|&p| p), !gt.iter().any(|&g| g));
            if ep && eg {
                0.0
            } else {
                ((height * height + width * width) as f64).sqrt()
            }
        }
    }
}

pub fn hd95(pred: &[bool], gt: &[bool], height: usize, width: usize) -> f64 {
    surface_metric(pred, gt, height, width, |d| percentile(d, 95.0))
}

pub fn asd(pred: &[bool], gt: &[bool], height: usize, width: usize) -> f64 {
    surface_metric(pred, gt, height, width, |d| d.iter().sum::<f64>() / d.len() as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SegMetrics {
    pub dice: f64,
    pub miou: f64,
    pub hd95: f64,
    pub asd: f64,
}

impl SegMetrics {
    /// Metrics of one predicted map; Dice and distances use [`LESION_CLASS`].
    pub fn of(pred: &ClassMap, gt: &ClassMap, classes: usize) -> SegMetrics {
        let (h, w) = (gt.height(), gt.width());
        let (p, g) = (pred.mask_of(LESION_CLASS), gt.mask_of(LESION_CLASS));
        SegMetrics {
            dice: dice(&p, &g),
            miou: miou(pred.data(), gt.data(), classes),
            hd95: hd95(&p, &g, h, w),
            asd: asd(&p, &g, h, w),
        }
    }

    /// Component-wise mean; `None` for an empty slice.
    pub fn mean(rows: &[SegMetrics]) -> Option<SegMetrics> {
        if rows.is_empty() {
            return None;
        }
        let n = rows.len() as f64;
        let sum = |f: fn(&SegMetrics) -> f64| rows.iter().map(f).sum::<f64>() / n;
        Some(SegMetrics {
            dice: sum(|r| r.dice),
            miou: sum(|r| r.miou),
            hd95: sum(|r| r.hd95),
            asd: sum(|r| r.asd),
        })
    }
}
