//! Point clouds, polar BEV images, and the conversions between them.
//!
//! BEV images live on a polar grid: rows are range bins over
//! `[0, range_extent)`, columns are azimuth bins over `[-fov/2, fov/2)`.
//! Rasterization is binary occupancy; extraction returns cell centers.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::dsp::RangeAzimuthHeatmap;
use crate::error::{Error, Result};
use crate::num::{real, Float};

/// One 2D point in sensor-centric Cartesian coordinates (meters).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point2<T> {
    pub x: T,
    pub y: T,
}

/// A set of 2D points with its source frame id.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud2D<T> {
    pub points: Vec<Point2<T>>,
    pub frame_id: u64,
}

impl<T: Float> PointCloud2D<T> {
    pub fn is_finite(&self) -> bool {
        self.points.iter().all(|p| p.x.is_finite() && p.y.is_finite())
    }

    /// Convert point coordinates to another scalar width.
    pub fn cast<U: Float>(&self) -> PointCloud2D<U> {
        PointCloud2D {
            points: self
                .points
                .iter()
                .map(|p| Point2 {
                    x: real::<U>(p.x.to_f64().unwrap()),
                    y: real::<U>(p.y.to_f64().unwrap()),
                })
                .collect(),
            frame_id: self.frame_id,
        }
    }
}

/// Geometry of a polar BEV grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BevSpec {
    /// Rows (range bins).
    pub height: usize,
    /// Columns (azimuth bins).
    pub width: usize,
    /// Range covered by the rows (m).
    pub range_extent_m: f64,
    /// Full field of view covered by the columns (rad).
    pub fov_rad: f64,
}

impl Default for BevSpec {
    fn default() -> Self {
        Self {
            height: 128,
            width: 128,
            range_extent_m: 12.8,
            fov_rad: 120f64.to_radians(),
        }
    }
}

impl BevSpec {
    pub fn cell_range(&self) -> f64 {
        self.range_extent_m / self.height as f64
    }

    pub fn cell_azimuth(&self) -> f64 {
        self.fov_rad / self.width as f64
    }

    /// Continuous grid coordinates (row, col) of a polar point.
    pub fn grid_coords(&self, r: f64, azimuth: f64) -> (f64, f64) {
        (
            r / self.cell_range(),
            (azimuth + self.fov_rad / 2.0) / self.cell_azimuth(),
        )
    }

    /// Polar coordinates of a cell center.
    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        (
            (row as f64 + 0.5) * self.cell_range(),
            -self.fov_rad / 2.0 + (col as f64 + 0.5) * self.cell_azimuth(),
        )
    }
}

/// Polar-grid occupancy image with values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct BevImage<T: Float> {
    pub values: Array2<T>,
    pub spec: BevSpec,
    pub frame_id: u64,
}

impl<T: Float> BevImage<T> {
    pub fn zeros(spec: BevSpec) -> Self {
        Self {
            values: Array2::zeros((spec.height, spec.width)),
            spec,
            frame_id: 0,
        }
    }

    pub fn cast<U: Float>(&self) -> BevImage<U> {
        BevImage {
            values: self.values.mapv(|v| real::<U>(v.to_f64().unwrap())),
            spec: self.spec,
            frame_id: self.frame_id,
        }
    }
}

/// Rasterize a point cloud onto a polar occupancy grid.
///
/// In-bounds points set their cell to one; duplicates are idempotent.
/// Out-of-bounds points are dropped and counted in the second return.
pub fn rasterize<T: Float>(cloud: &PointCloud2D<T>, spec: BevSpec) -> (BevImage<T>, usize) {
    let mut img = BevImage::zeros(spec);
    img.frame_id = cloud.frame_id;
    let mut dropped = 0usize;
    for p in &cloud.points {
        let x = p.x.to_f64().unwrap();
        let y = p.y.to_f64().unwrap();
        let r = (x * x + y * y).sqrt();
        let az = y.atan2(x);
        let (row_f, col_f) = spec.grid_coords(r, az);
        let row = row_f.floor();
        let col = col_f.floor();
        if row >= 0.0 && col >= 0.0 && (row as usize) < spec.height && (col as usize) < spec.width
        {
            img.values[[row as usize, col as usize]] = T::one();
        } else {
            dropped += 1;
        }
    }
    (img, dropped)
}

/// Cells at or above `threshold` become points at their cell centers.
pub fn extract_points<T: Float>(img: &BevImage<T>, threshold: T) -> PointCloud2D<T> {
    let mut points = Vec::new();
    for ((row, col), &v) in img.values.indexed_iter() {
        if v >= threshold {
            let (r, az) = img.spec.cell_center(row, col);
            points.push(Point2 {
                x: real::<T>(r * az.cos()),
                y: real::<T>(r * az.sin()),
            });
        }
    }
    PointCloud2D {
        points,
        frame_id: img.frame_id,
    }
}

/// Keep points with |azimuth| <= fov/2 and range <= range_extent.
pub fn fov_filter<T: Float>(
    cloud: &PointCloud2D<T>,
    fov_rad: f64,
    range_extent_m: f64,
) -> PointCloud2D<T> {
    let points = cloud
        .points
        .iter()
        .copied()
        .filter(|p| {
            let x = p.x.to_f64().unwrap();
            let y = p.y.to_f64().unwrap();
            let r = (x * x + y * y).sqrt();
            y.atan2(x).abs() <= fov_rad / 2.0 && r <= range_extent_m
        })
        .collect();
    PointCloud2D {
        points,
        frame_id: cloud.frame_id,
    }
}

/// Elementwise mean of same-shape BEV images.
pub fn average_predictions<T: Float>(images: &[BevImage<T>]) -> Result<BevImage<T>> {
    let first = images
        .first()
        .ok_or_else(|| Error::Config("average_predictions needs at least one image".into()))?;
    let mut acc = Array2::<T>::zeros(first.values.raw_dim());
    for img in images {
        if img.values.dim() != first.values.dim() {
            return Err(Error::ShapeMismatch(format!(
                "{:?} vs {:?}",
                img.values.dim(),
                first.values.dim()
            )));
        }
        acc += &img.values;
    }
    let n = real::<T>(images.len() as f64);
    acc.mapv_inplace(|v| v / n);
    Ok(BevImage {
        values: acc,
        spec: first.spec,
        frame_id: first.frame_id,
    })
}

/// Resample a range-azimuth heatmap onto a BEV grid so condition and target
/// are pixel-aligned.
///
/// The heatmap's rows sit at ranges `bin * range_bin_size` and its columns at
/// the angle-FFT centers (uniform in sin(theta)); the BEV grid is uniform in
/// theta. Bilinear interpolation in (range-bin, sin-bin) space.
pub fn rah_to_bev_grid<T: Float>(rah: &RangeAzimuthHeatmap<T>, spec: BevSpec) -> BevImage<T> {
    let (n_range, n_az) = rah.values.dim();
    let mut out = BevImage::zeros(spec);
    out.frame_id = rah.frame_id;
    for row in 0..spec.height {
        for col in 0..spec.width {
            let (r, az) = spec.cell_center(row, col);
            // Fractional source coordinates.
            let rb = (r / rah.range_bin_size_m).clamp(0.0, (n_range - 1) as f64);
            let ab = (n_az as f64 / 2.0) * (1.0 + az.sin());
            let ab = ab.clamp(0.0, (n_az - 1) as f64);
            let r0 = rb.floor() as usize;
            let a0 = ab.floor() as usize;
            let r1 = (r0 + 1).min(n_range - 1);
            let a1 = (a0 + 1).min(n_az - 1);
            let fr = real::<T>(rb - r0 as f64);
            let fa = real::<T>(ab - a0 as f64);
            let one = T::one();
            let v = rah.values[[r0, a0]] * (one - fr) * (one - fa)
                + rah.values[[r1, a0]] * fr * (one - fa)
                + rah.values[[r0, a1]] * (one - fr) * fa
                + rah.values[[r1, a1]] * fr * fa;
            out.values[[row, col]] = v;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cloud(points: &[(f64, f64)]) -> PointCloud2D<f64> {
        PointCloud2D {
            points: points.iter().map(|&(x, y)| Point2 { x, y }).collect(),
            frame_id: 0,
        }
    }

    #[test]
    fn rasterize_places_boresight_point_in_expected_cell() {
        let spec = BevSpec::default();
        let (img, dropped) = rasterize(&cloud(&[(5.0, 0.0)]), spec);
        assert_eq!(dropped, 0);
        // 5 m / 0.1 m = row 50; boresight lands in the center column.
        assert_eq!(img.values[[50, 64]], 1.0);
        assert_eq!(img.values.sum(), 1.0);
    }

    #[test]
    fn rasterize_empty_and_duplicates() {
        let spec = BevSpec::default();
        let (empty, _) = rasterize(&cloud(&[]), spec);
        assert_eq!(empty.values.sum(), 0.0);

        let (once, _) = rasterize(&cloud(&[(3.0, 1.0)]), spec);
        let (twice, _) = rasterize(&cloud(&[(3.0, 1.0), (3.0, 1.0)]), spec);
        assert_eq!(once.values, twice.values);
    }

    #[test]
    fn rasterize_reports_dropped_points() {
        let spec = BevSpec::default();
        let (_, dropped) = rasterize(&cloud(&[(20.0, 0.0), (5.0, 0.0), (-1.0, 0.0)]), spec);
        assert_eq!(dropped, 2);
    }

    #[test]
    fn rasterize_is_point_order_invariant() {
        let spec = BevSpec::default();
        let pts = [(2.0, 0.5), (7.0, -1.0), (4.4, 2.2), (9.9, 0.0)];
        let mut rev = pts;
        rev.reverse();
        let (a, _) = rasterize(&cloud(&pts), spec);
        let (b, _) = rasterize(&cloud(&rev), spec);
        assert_eq!(a.values, b.values);
    }

    #[test]
    fn extract_threshold_semantics() {
        let spec = BevSpec {
            height: 2,
            width: 2,
            range_extent_m: 2.0,
            fov_rad: 1.0,
        };
        let mut img = BevImage::<f64>::zeros(spec);
        img.values[[0, 0]] = 0.4;
        img.values[[1, 1]] = 0.6;
        let pts = extract_points(&img, 0.5);
        assert_eq!(pts.points.len(), 1);

        let none = extract_points(&BevImage::<f64>::zeros(spec), 0.5);
        assert!(none.points.is_empty());
    }

    #[test]
    fn rasterize_extract_round_trip_stays_within_half_cell() {
        let spec = BevSpec::default();
        // Points chosen so no two land in one cell.
        let pts = [(2.0, 0.2), (5.5, -1.3), (8.8, 2.0), (11.0, 0.0)];
        let (img, _) = rasterize(&cloud(&pts), spec);
        let rec = extract_points(&img, 0.5);
        assert_eq!(rec.points.len(), pts.len());
        for &(x, y) in &pts {
            let r = (x * x + y * y).sqrt();
            let az = y.atan2(x);
            let best = rec
                .points
                .iter()
                .map(|p| {
                    let rr = (p.x * p.x + p.y * p.y).sqrt();
                    let aa = p.y.atan2(p.x);
                    ((rr - r).abs(), (aa - az).abs())
                })
                .min_by(|a, b| (a.0 + a.1).partial_cmp(&(b.0 + b.1)).unwrap())
                .unwrap();
            assert!(best.0 <= spec.cell_range() / 2.0 + 1e-12);
            assert!(best.1 <= spec.cell_azimuth() / 2.0 + 1e-12);
        }
    }

    #[test]
    fn image_level_idempotence() {
        let spec = BevSpec::default();
        let pts = [(2.0, 0.2), (5.5, -1.3), (8.8, 2.0)];
        let (img1, _) = rasterize(&cloud(&pts), spec);
        let rec = extract_points(&img1, 0.5);
        let (img2, _) = rasterize(&rec, spec);
        assert_eq!(img1.values, img2.values);
    }

    #[test]
    fn fov_filter_matches_bruteforce_predicate() {
        let fov = 1.5;
        let ext = 10.0;
        let pts = [
            (5.0, 0.0),
            (-3.0, 0.0), // behind the sensor
            (2.0, 2.0),
            (9.0, 8.0), // range > 10
            (0.5, -0.2),
        ];
        let filtered = fov_filter(&cloud(&pts), fov, ext);
        let expect: Vec<(f64, f64)> = pts
            .iter()
            .copied()
            .filter(|&(x, y)| {
                let r = (x * x + y * y).sqrt();
                y.atan2(x).abs() <= fov / 2.0 && r <= ext
            })
            .collect();
        assert_eq!(filtered.points.len(), expect.len());
        assert!(filtered.points.iter().any(|p| p.x == 5.0));
        assert!(!filtered.points.iter().any(|p| p.x < 0.0));
    }

    #[test]
    fn average_predictions_matches_independent_mean() {
        use rand::{Rng, SeedableRng};
        let spec = BevSpec {
            height: 6,
            width: 5,
            range_extent_m: 6.0,
            fov_rad: 1.0,
        };
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let images: Vec<BevImage<f64>> = (0..11)
            .map(|_| {
                let mut img = BevImage::zeros(spec);
                img.values.mapv_inplace(|_| rng.random::<f64>());
                img
            })
            .collect();
        let mean = average_predictions(&images).unwrap();
        for idx in 0..30 {
            let (r, c) = (idx / 5, idx % 5);
            let direct: f64 =
                images.iter().map(|im| im.values[[r, c]]).sum::<f64>() / images.len() as f64;
            assert!((mean.values[[r, c]] - direct).abs() < 1e-12);
        }

        let id = average_predictions(&images[..1]).unwrap();
        assert_eq!(id.values, images[0].values);

        let mut zeros = BevImage::<f64>::zeros(spec);
        zeros.values.fill(0.0);
        let mut ones = BevImage::<f64>::zeros(spec);
        ones.values.fill(1.0);
        let half = average_predictions(&[zeros, ones]).unwrap();
        assert!(half.values.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn average_predictions_rejects_shape_mismatch() {
        let a = BevImage::<f64>::zeros(BevSpec::default());
        let b = BevImage::<f64>::zeros(BevSpec {
            height: 64,
            width: 64,
            range_extent_m: 12.8,
            fov_rad: 2.0,
        });
        assert!(matches!(
            average_predictions(&[a, b]),
            Err(Error::ShapeMismatch(_))
        ));
    }
}
