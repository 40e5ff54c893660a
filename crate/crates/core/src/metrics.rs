//! Point-cloud quality metrics: Chamfer distance, Hausdorff distance, and
//! F-Score at a distance threshold, plus the CDF curve used for reporting.

use crate::error::{Error, Result};
use crate::geometry::{Point2, PointCloud2D};
use crate::num::{real, Float};

/// Default F-Score distance threshold (m).
pub const FSCORE_DEFAULT_D: f64 = 0.1;

#[inline]
fn dist<T: Float>(a: Point2<T>, b: Point2<T>) -> T {
    let dx = a.x - b.x;
    let dy = a.y - b.y;
    (dx * dx + dy * dy).sqrt()
}

#[inline]
fn nearest<T: Float>(p: Point2<T>, set: &[Point2<T>]) -> T {
    let mut best = T::infinity();
    for &q in set {
        let d = dist(p, q);
        if d < best {
            best = d;
        }
    }
    best
}

fn check_nonempty<T>(a: &PointCloud2D<T>, b: &PointCloud2D<T>, op: &'static str) -> Result<()> {
    if a.points.is_empty() || b.points.is_empty() {
        return Err(Error::EmptyPointSet(op));
    }
    Ok(())
}

/// Chamfer distance: mean nearest-neighbor distance in both directions,
/// summed.
pub fn chamfer<T: Float>(gt: &PointCloud2D<T>, pred: &PointCloud2D<T>) -> Result<T> {
    check_nonempty(gt, pred, "chamfer")?;
    let fwd: T = gt
        .points
        .iter()
        .map(|&p| nearest(p, &pred.points))
        .sum::<T>()
        / real::<T>(gt.points.len() as f64);
    let bwd: T = pred
        .points
        .iter()
        .map(|&g| nearest(g, &gt.points))
        .sum::<T>()
        / real::<T>(pred.points.len() as f64);
    Ok(fwd + bwd)
}

/// Hausdorff distance: the larger of the two directed worst-case
/// nearest-neighbor distances.
pub fn hausdorff<T: Float>(gt: &PointCloud2D<T>, pred: &PointCloud2D<T>) -> Result<T> {
    check_nonempty(gt, pred, "hausdorff")?;
    let directed = |a: &[Point2<T>], b: &[Point2<T>]| {
        a.iter()
            .map(|&p| nearest(p, b))
            .fold(T::zero(), |acc, d| acc.max(d))
    };
    Ok(directed(&gt.points, &pred.points).max(directed(&pred.points, &gt.points)))
}

/// F-Score at threshold `d`: harmonic mean of precision (fraction of
/// predicted points within `d` of ground truth) and recall (fraction of
/// ground-truth points within `d` of the prediction). Zero when both vanish.
pub fn fscore<T: Float>(gt: &PointCloud2D<T>, pred: &PointCloud2D<T>, d: T) -> Result<T> {
    check_nonempty(gt, pred, "fscore")?;
    if !(d > T::zero()) {
        return Err(Error::Domain("fscore threshold must be > 0".into()));
    }
    let within = |a: &[Point2<T>], b: &[Point2<T>]| {
        let hits = a.iter().filter(|&&p| nearest(p, b) <= d).count();
        real::<T>(hits as f64) / real::<T>(a.len() as f64)
    };
    let precision = within(&pred.points, &gt.points);
    let recall = within(&gt.points, &pred.points);
    let denom = precision + recall;
    if denom == T::zero() {
        Ok(T::zero())
    } else {
        Ok(real::<T>(2.0) * precision * recall / denom)
    }
}

/// Sorted per-frame values with cumulative fractions `i/n`; ties keep
/// cumulative-count semantics.
pub fn cdf_curve<T: Float>(values: &[T]) -> Vec<(T, f64)> {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len() as f64;
    sorted
        .into_iter()
        .enumerate()
        .map(|(i, v)| (v, (i + 1) as f64 / n))
        .collect()
}
