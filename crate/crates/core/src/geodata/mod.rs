//! Geo-referenced inputs and the reference tile database.
//!
//! All coordinates are planar metric (easting, northing) in one projected CRS
//! declared alongside the inputs. No geodesic math happens here.

mod crop;
mod db;
mod io;
mod tiling;

pub use crop::{compute_crop_size, crop_envelope_covered, extract_reference, extract_reference_clamped};
pub use db::{
    build_reference_db, read_tile_manifest, write_tile_db, MissingTilePolicy, ReferenceDbParams,
    TileRecord, TILE_MANIFEST,
};
pub use io::{format_world_file, parse_world_file, read_trajectory_csv, write_trajectory_csv, CrsSidecar, Projection};
pub use tiling::{build_tiling, distance_to_polyline, nearest_pose, select_search_zone};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::AnyImage;

/// A planar metric position.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub e: f64,
    pub n: f64,
}

impl Point {
    pub const fn new(e: f64, n: f64) -> Self {
        Self { e, n }
    }

    pub fn distance(&self, other: &Point) -> f64 {
        (self.e - other.e).hypot(self.n - other.n)
    }
}

/// Wraps any angle in degrees into `[0, 360)`.
pub fn normalize_heading(deg: f64) -> f64 {
    let h = deg.rem_euclid(360.0);
    // rem_euclid can round up to exactly 360 for tiny negative inputs
    if h >= 360.0 {
        0.0
    } else {
        h
    }
}

/// One timestamped position and attitude sample of a flight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPose {
    pub timestamp: f64,
    pub position: Point,
    /// Meters above ground.
    pub altitude: f64,
    /// Degrees clockwise from north, in `[0, 360)`.
    pub heading: f64,
    pub pitch: f64,
    pub roll: f64,
}

impl GeoPose {
    pub fn new(timestamp: f64, position: Point, altitude: f64, heading: f64) -> Result<Self> {
        Self::with_attitude(timestamp, position, altitude, heading, 0.0, 0.0)
    }

    pub fn with_attitude(
        timestamp: f64,
        position: Point,
        altitude: f64,
        heading: f64,
        pitch: f64,
        roll: f64,
    ) -> Result<Self> {
        if !(altitude >= 0.0) {
            return Err(Error::invalid(format!("altitude must be >= 0, got {altitude}")));
        }
        if ![timestamp, position.e, position.n, heading, pitch, roll]
            .iter()
            .all(|v| v.is_finite())
        {
            return Err(Error::invalid("pose fields must be finite"));
        }
        Ok(Self {
            timestamp,
            position,
            altitude,
            heading: normalize_heading(heading),
            pitch,
            roll,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlightTrajectory {
    poses: Vec<GeoPose>,
    crs_id: String,
}

impl FlightTrajectory {
    /// Timestamps must be strictly increasing. An empty trajectory is allowed
    /// here but rejected by every operation that consumes one.
    pub fn new(poses: Vec<GeoPose>, crs_id: impl Into<String>) -> Result<Self> {
        for w in poses.windows(2) {
            if !(w[1].timestamp > w[0].timestamp) {
                return Err(Error::invalid(format!(
                    "timestamps must be strictly increasing ({} then {})",
                    w[0].timestamp, w[1].timestamp
                )));
            }
        }
        Ok(Self {
            poses,
            crs_id: crs_id.into(),
        })
    }

    pub fn poses(&self) -> &[GeoPose] {
        &self.poses
    }

    pub fn crs_id(&self) -> &str {
        &self.crs_id
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub(crate) fn require_non_empty(&self) -> Result<()> {
        if self.poses.is_empty() {
            Err(Error::invalid("trajectory is empty"))
        } else {
            Ok(())
        }
    }

    pub fn mean_altitude(&self) -> Option<f64> {
        if self.poses.is_empty() {
            return None;
        }
        Some(self.poses.iter().map(|p| p.altitude).sum::<f64>() / self.poses.len() as f64)
    }

    /// `(min, max)` corners of the position bounding box.
    pub fn bounds(&self) -> Option<(Point, Point)> {
        let first = self.poses.first()?.position;
        let mut lo = first;
        let mut hi = first;
        for p in &self.poses {
            lo.e = lo.e.min(p.position.e);
            lo.n = lo.n.min(p.position.n);
            hi.e = hi.e.max(p.position.e);
            hi.n = hi.n.max(p.position.n);
        }
        Some((lo, hi))
    }
}

/// GDAL-style affine transform: `e = t0 + px*t1 + py*t2`, `n = t3 + px*t4 + py*t5`,
/// with `(px, py)` continuous pixel coordinates (corner convention).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoTransform(pub [f64; 6]);

impl GeoTransform {
    /// North-up transform with square pixels and the given upper-left corner.
    pub fn north_up(origin_e: f64, origin_n: f64, resolution: f64) -> Self {
        Self([origin_e, resolution, 0.0, origin_n, 0.0, -resolution])
    }

    fn det(&self) -> f64 {
        let t = &self.0;
        t[1] * t[5] - t[2] * t[4]
    }

    pub fn is_invertible(&self) -> bool {
        let d = self.det();
        d.is_finite() && d.abs() > 1e-12
    }

    pub fn pixel_to_world(&self, px: f64, py: f64) -> Point {
        let t = &self.0;
        Point::new(t[0] + px * t[1] + py * t[2], t[3] + px * t[4] + py * t[5])
    }

    pub fn world_to_pixel(&self, p: Point) -> (f64, f64) {
        let t = &self.0;
        let de = p.e - t[0];
        let dn = p.n - t[3];
        let det = self.det();
        let px = (t[5] * de - t[2] * dn) / det;
        let py = (-t[4] * de + t[1] * dn) / det;
        (px, py)
    }

    /// Meters per pixel (geometric mean of the two axes).
    pub fn resolution(&self) -> f64 {
        self.det().abs().sqrt()
    }
}

/// A geo-referenced orthophoto.
#[derive(Debug, Clone)]
pub struct RasterSource {
    pixels: AnyImage,
    transform: GeoTransform,
}

impl RasterSource {
    pub fn new(pixels: AnyImage, transform: GeoTransform) -> Result<Self> {
        if !transform.is_invertible() {
            return Err(Error::invalid("geo transform is not invertible"));
        }
        if pixels.width() == 0 || pixels.height() == 0 {
            return Err(Error::invalid("raster is empty"));
        }
        Ok(Self { pixels, transform })
    }

    pub fn pixels(&self) -> &AnyImage {
        &self.pixels
    }

    pub fn transform(&self) -> &GeoTransform {
        &self.transform
    }

    pub fn resolution(&self) -> f64 {
        self.transform.resolution()
    }

    pub fn width(&self) -> usize {
        self.pixels.width()
    }

    pub fn height(&self) -> usize {
        self.pixels.height()
    }

    /// True when the world point maps inside the pixel grid.
    pub fn contains(&self, p: Point) -> bool {
        let (px, py) = self.transform.world_to_pixel(p);
        px >= 0.0 && py >= 0.0 && px <= self.width() as f64 && py <= self.height() as f64
    }
}

/// A cropped, heading-rotated reference patch.
#[derive(Debug, Clone)]
pub struct ReferenceTile {
    pub tile_id: u64,
    pub center: Point,
    /// Degrees; image "up" points along this heading.
    pub heading: f64,
    /// Ground side length in meters.
    pub footprint: f64,
    pub image: AnyImage,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn heading_is_normalized() {
        let p = GeoPose::new(0.0, Point::new(0.0, 0.0), 10.0, -90.0).unwrap();
        assert_eq!(p.heading, 270.0);
        let p = GeoPose::new(0.0, Point::new(0.0, 0.0), 10.0, 720.0).unwrap();
        assert_eq!(p.heading, 0.0);
        assert_eq!(normalize_heading(-1e-20), 0.0);
    }

    #[test]
    fn negative_altitude_rejected() {
        assert!(GeoPose::new(0.0, Point::new(0.0, 0.0), -1.0, 0.0).is_err());
    }

    #[test]
    fn timestamps_must_increase() {
        let a = GeoPose::new(1.0, Point::new(0.0, 0.0), 1.0, 0.0).unwrap();
        let b = GeoPose::new(1.0, Point::new(1.0, 0.0), 1.0, 0.0).unwrap();
        assert!(FlightTrajectory::new(vec![a, b], "local").is_err());
    }

    #[test]
    fn geotransform_round_trip() {
        let t = GeoTransform([100.0, 0.5, 0.1, 200.0, -0.05, -0.5]);
        let p = t.pixel_to_world(12.25, 7.5);
        let (x, y) = t.world_to_pixel(p);
        assert!((x - 12.25).abs() < 1e-9 && (y - 7.5).abs() < 1e-9);
        assert!(!GeoTransform([0.0, 1.0, 2.0, 0.0, 1.0, 2.0]).is_invertible());
    }
}
