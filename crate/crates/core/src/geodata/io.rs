use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{FlightTrajectory, GeoPose, GeoTransform, Point, RasterSource};
use crate::error::{Error, Result};
use crate::image::AnyImage;

#[derive(Debug, Serialize, Deserialize)]
struct TrajectoryRow {
    timestamp: f64,
    easting: f64,
    northing: f64,
    altitude: f64,
    heading: f64,
    pitch: f64,
    roll: f64,
}

/// Reads `timestamp,easting,northing,altitude,heading,pitch,roll` (header required).
pub fn read_trajectory_csv(path: &Path, crs_id: &str) -> Result<FlightTrajectory> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let headers = rdr.headers()?.clone();
    let expected = ["timestamp", "easting", "northing", "altitude", "heading", "pitch", "roll"];
    if headers.iter().map(str::trim).collect::<Vec<_>>() != expected {
        return Err(Error::format(path, format!("expected header {}", expected.join(","))));
    }
    let mut poses = Vec::new();
    for row in rdr.deserialize::<TrajectoryRow>() {
        let r = row?;
        poses.push(GeoPose::with_attitude(
            r.timestamp,
            Point::new(r.easting, r.northing),
            r.altitude,
            r.heading,
            r.pitch,
            r.roll,
        )?);
    }
    FlightTrajectory::new(poses, crs_id)
}

pub fn write_trajectory_csv(path: &Path, trajectory: &FlightTrajectory) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for p in trajectory.poses() {
        w.serialize(TrajectoryRow {
            timestamp: p.timestamp,
            easting: p.position.e,
            northing: p.position.n,
            altitude: p.altitude,
            heading: p.heading,
            pitch: p.pitch,
            roll: p.roll,
        })?;
    }
    w.flush()?;
    Ok(())
}

/// Projection used to bring geographic inputs into the working metric CRS.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Projection {
    /// Inputs are already planar metric coordinates.
    #[default]
    Identity,
    /// Local equirectangular projection about a reference latitude/longitude
    /// (spherical earth, adequate for regional extents).
    Equirectangular { lat0: f64, lon0: f64 },
}

const EARTH_RADIUS_M: f64 = 6_371_008.8;

impl Projection {
    /// Maps `(lat, lon)` in degrees, or `(easting, northing)` for `Identity`.
    pub fn project(&self, a: f64, b: f64) -> Point {
        match *self {
            Projection::Identity => Point::new(a, b),
            Projection::Equirectangular { lat0, lon0 } => {
                let e = (b - lon0).to_radians() * lat0.to_radians().cos() * EARTH_RADIUS_M;
                let n = (a - lat0).to_radians() * EARTH_RADIUS_M;
                Point::new(e, n)
            }
        }
    }
}

/// Sidecar JSON next to a raster: declares the CRS and optionally the affine
/// transform when no world file is present.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrsSidecar {
    pub crs_id: String,
    #[serde(default)]
    pub geo_transform: Option<[f64; 6]>,
    #[serde(default)]
    pub projection: Projection,
}

impl CrsSidecar {
    pub fn path_for(raster: &Path) -> PathBuf {
        let mut p = raster.as_os_str().to_owned();
        p.push(".crs.json");
        PathBuf::from(p)
    }

    pub fn read(raster: &Path) -> Result<Self> {
        let p = Self::path_for(raster);
        let text = fs::read_to_string(&p)
            .map_err(|e| Error::Config(format!("CRS sidecar {} unreadable: {e}", p.display())))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn write(&self, raster: &Path) -> Result<()> {
        fs::write(Self::path_for(raster), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

fn world_file_candidates(raster: &Path) -> Vec<PathBuf> {
    let ext = raster.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase();
    let mut exts = vec!["wld".to_string()];
    if ext.len() >= 2 {
        let b = ext.as_bytes();
        exts.insert(0, format!("{}{}w", b[0] as char, b[ext.len() - 1] as char));
        exts.insert(1, format!("{ext}w"));
    }
    exts.into_iter().map(|e| raster.with_extension(e)).collect()
}

/// Parses a six-line ESRI world file (pixel-center anchored) into a corner
/// anchored [`GeoTransform`].
pub fn parse_world_file(text: &str, path: &Path) -> Result<GeoTransform> {
    let v: Vec<f64> = text
        .split_whitespace()
        .map(|s| s.parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::format(path, format!("world file: {e}")))?;
    if v.len() != 6 {
        return Err(Error::format(path, format!("world file needs 6 values, got {}", v.len())));
    }
    let (a, d, b, e, c, f) = (v[0], v[1], v[2], v[3], v[4], v[5]);
    Ok(GeoTransform([c - 0.5 * a - 0.5 * b, a, b, f - 0.5 * d - 0.5 * e, d, e]))
}

pub fn format_world_file(t: &GeoTransform) -> String {
    let [t0, a, b, t3, d, e] = t.0;
    let c = t0 + 0.5 * a + 0.5 * b;
    let f = t3 + 0.5 * d + 0.5 * e;
    format!("{a}\n{d}\n{b}\n{e}\n{c}\n{f}\n")
}

impl RasterSource {
    /// Opens an image with its world file (or sidecar transform) and CRS sidecar.
    pub fn open(path: &Path) -> Result<(Self, CrsSidecar)> {
        let sidecar = CrsSidecar::read(path)?;
        let pixels = AnyImage::open(path)?;
        let transform = match world_file_candidates(path).into_iter().find(|p| p.exists()) {
            Some(wf) => parse_world_file(&fs::read_to_string(&wf)?, &wf)?,
            None => GeoTransform(sidecar.geo_transform.ok_or_else(|| {
                Error::Config(format!("{}: no world file and no transform in the sidecar", path.display()))
            })?),
        };
        Ok((RasterSource::new(pixels, transform)?, sidecar))
    }

    /// Writes PNG + `.pgw` world file + CRS sidecar.
    pub fn save(&self, path: &Path, sidecar: &CrsSidecar) -> Result<()> {
        self.pixels().save_png(path)?;
        fs::write(path.with_extension("pgw"), format_world_file(self.transform()))?;
        sidecar.write(path)
    }
}
