//! Procedural stand-in for an orthophoto, a flight over it and the UAV
//! frames taken along the way.
//!
//! The raster mixes textured field parcels, a road network and building
//! clusters so that edge maps are informative. Query frames are crops at
//! known poses distorted by altitude error, heading error, off-nadir shift,
//! photometric change, vignetting and sensor noise.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{write_truth_csv, QueryGroundTruth};
use crate::geodata::{
    build_tiling, crop_envelope_covered, extract_reference_clamped, select_search_zone, write_trajectory_csv,
    CrsSidecar, FlightTrajectory, GeoPose, GeoTransform, MissingTilePolicy, Point, Projection, RasterSource,
    ReferenceDbParams,
};
use crate::image::{AnyImage, GrayImage, RgbImage};
use crate::preprocess::vignette;

pub const SYNTH_CRS: &str = "LOCAL:synthetic-metric";

/// Distortions that separate a query frame from its reference crop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(deny_unknown_fields, default)]
pub struct QueryShift {
    /// Relative altitude error, uniform in `[-x, x]`.
    pub altitude_error: f64,
    /// Heading error in degrees, uniform in `[-x, x]`.
    pub heading_error_deg: f64,
    /// Off-nadir ground shift of the image center in meters, uniform per axis.
    pub nadir_shift_m: f64,
    /// Brightness and contrast factors drawn from `[1 - x, 1 + x]`.
    pub photometric: f64,
    /// Vignette std as a fraction of the frame side.
    pub vignette_frac: f64,
    pub noise_sigma: f64,
}

impl Default for QueryShift {
    fn default() -> Self {
        Self {
            altitude_error: 0.15,
            heading_error_deg: 20.0,
            nadir_shift_m: 10.0,
            photometric: 0.3,
            vignette_frac: 70.0 / 224.0,
            noise_sigma: 0.02,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub seed: u64,
    /// Side of the square world in meters.
    pub world_size_m: f64,
    pub resolution: f64,
    /// Minimum number of fully covered reference tiles along the flight.
    pub n_tiles: usize,
    pub spacing: f64,
    pub half_width: f64,
    /// Planned flight altitude in meters.
    pub altitude: f64,
    pub focal_length_mm: f64,
    pub sensor_width_mm: f64,
    pub speed_mps: f64,
    /// Seconds between trajectory poses.
    pub pose_interval_s: f64,
    pub n_queries: usize,
    pub query: QueryShift,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            world_size_m: 3000.0,
            resolution: 2.0,
            n_tiles: 500,
            spacing: 48.0,
            half_width: 120.0,
            altitude: 500.0,
            focal_length_mm: 25.0,
            sensor_width_mm: 12.8,
            speed_mps: 10.0,
            pose_interval_s: 2.0,
            n_queries: 240,
            query: QueryShift::default(),
        }
    }
}

impl SynthConfig {
    pub fn footprint(&self) -> f64 {
        self.altitude * self.sensor_width_mm / self.focal_length_mm
    }

    pub fn db_params(&self) -> ReferenceDbParams {
        ReferenceDbParams {
            spacing: self.spacing,
            half_width: self.half_width,
            focal_length_mm: self.focal_length_mm,
            sensor_width_mm: self.sensor_width_mm,
            altitude: Some(self.altitude),
            on_missing: MissingTilePolicy::Skip,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_tiles < 10 {
            return Err(Error::Config(format!("n_tiles must be >= 10, got {}", self.n_tiles)));
        }
        for (name, v) in [
            ("world_size_m", self.world_size_m),
            ("resolution", self.resolution),
            ("spacing", self.spacing),
            ("half_width", self.half_width),
            ("altitude", self.altitude),
            ("focal_length_mm", self.focal_length_mm),
            ("sensor_width_mm", self.sensor_width_mm),
            ("speed_mps", self.speed_mps),
            ("pose_interval_s", self.pose_interval_s),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be > 0, got {v}")));
            }
        }
        if self.n_queries == 0 {
            return Err(Error::Config("n_queries must be >= 1".into()));
        }
        let margin = self.margin();
        if self.world_size_m <= 2.0 * margin + 4.0 * self.spacing {
            return Err(Error::Config(format!(
                "world of {} m is too small for a {:.0} m footprint and a {} m corridor",
                self.world_size_m,
                self.footprint(),
                self.half_width
            )));
        }
        Ok(())
    }

    /// Distance the flight keeps from the raster edge so every corridor tile
    /// and every query frame is covered.
    fn margin(&self) -> f64 {
        let q = &self.query;
        let frame = self.footprint() * (1.0 + q.altitude_error);
        self.half_width + frame * std::f64::consts::SQRT_2 / 2.0 + q.nadir_shift_m * 2.0 + self.spacing
    }
}

#[derive(Debug, Clone)]
pub struct SynthQuery {
    pub truth: QueryGroundTruth,
    pub image: RgbImage,
}

#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub config: SynthConfig,
    pub raster: RasterSource,
    pub trajectory: FlightTrajectory,
    pub queries: Vec<SynthQuery>,
}

fn mix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Uniform in `[-1, 1)` from a hash of the inputs.
fn hash_unit(seed: u64, x: u64, y: u64) -> f32 {
    let h = mix(mix(seed ^ x.wrapping_mul(0x1000_0000_01b3)) ^ y);
    (h >> 40) as f32 / (1u64 << 23) as f32 - 1.0
}

struct Parcel {
    x: f64,
    y: f64,
    color: [f32; 3],
    stripe_dir: (f64, f64),
    stripe_period: f64,
    stripe_amp: f32,
    grain: f32,
}

const PALETTE: [[f32; 3]; 6] = [
    [0.30, 0.46, 0.22],
    [0.70, 0.65, 0.38],
    [0.48, 0.38, 0.27],
    [0.14, 0.28, 0.14],
    [0.50, 0.62, 0.32],
    [0.62, 0.55, 0.45],
];

fn jitter_color(rng: &mut ChaCha8Rng, c: [f32; 3]) -> [f32; 3] {
    let d: f32 = rng.random_range(-0.06..0.06);
    c.map(|v| (v + d + rng.random_range(-0.02..0.02)).clamp(0.0, 1.0))
}

/// Parcels on a jittered lattice; each pixel takes its nearest parcel.
fn paint_fields(rng: &mut ChaCha8Rng, side: usize, cell: f64, seed: u64) -> RgbImage {
    let n = (side as f64 / cell).ceil() as usize;
    let mut parcels = Vec::with_capacity(n * n);
    for j in 0..n {
        for i in 0..n {
            let forest = rng.random_bool(0.15);
            let base = if forest { PALETTE[3] } else { PALETTE[rng.random_range(0..PALETTE.len())] };
            let th: f64 = rng.random_range(0.0..PI);
            parcels.push(Parcel {
                x: (i as f64 + rng.random_range(0.0..1.0)) * cell,
                y: (j as f64 + rng.random_range(0.0..1.0)) * cell,
                color: jitter_color(rng, base),
                stripe_dir: (th.cos(), th.sin()),
                stripe_period: rng.random_range(5.0..14.0),
                stripe_amp: if forest { 0.0 } else { rng.random_range(0.0..0.07) },
                grain: if forest { 0.08 } else { 0.02 },
            });
        }
    }
    let rows: Vec<Vec<[f32; 3]>> = (0..side)
        .into_par_iter()
        .map(|y| {
            (0..side)
                .map(|x| {
                    let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
                    let (ci, cj) = ((fx / cell) as isize, (fy / cell) as isize);
                    let mut best = (f64::INFINITY, 0usize);
                    for dj in -2..=2 {
                        for di in -2..=2 {
                            let (i, j) = (ci + di, cj + dj);
                            if i < 0 || j < 0 || i >= n as isize || j >= n as isize {
                                continue;
                            }
                            let k = j as usize * n + i as usize;
                            let p = &parcels[k];
                            let d = (p.x - fx).powi(2) + (p.y - fy).powi(2);
                            if d < best.0 {
                                best = (d, k);
                            }
                        }
                    }
                    let p = &parcels[best.1];
                    let phase = (fx * p.stripe_dir.0 + fy * p.stripe_dir.1) / p.stripe_period * 2.0 * PI;
                    let stripe = p.stripe_amp * phase.sin() as f32;
                    let grain = p.grain * hash_unit(seed, x as u64, y as u64);
                    p.color.map(|v| (v + stripe + grain).clamp(0.0, 1.0))
                })
                .collect()
        })
        .collect();
    let flat: Vec<[f32; 3]> = rows.into_iter().flatten().collect();
    RgbImage::from_fn(side, side, |x, y| flat[y * side + x])
}

fn stamp_disc(img: &mut [[f32; 3]], side: usize, cx: f64, cy: f64, r: f64, color: [f32; 3]) {
    let (x0, x1) = ((cx - r).floor().max(0.0) as usize, ((cx + r).ceil() as usize).min(side));
    let (y0, y1) = ((cy - r).floor().max(0.0) as usize, ((cy + r).ceil() as usize).min(side));
    for y in y0..y1 {
        for x in x0..x1 {
            if (x as f64 + 0.5 - cx).powi(2) + (y as f64 + 0.5 - cy).powi(2) <= r * r {
                img[y * side + x] = color;
            }
        }
    }
}

/// Meandering roads that start on the border and cross the map.
fn paint_roads(rng: &mut ChaCha8Rng, img: &mut [[f32; 3]], side: usize, count: usize) {
    let s = side as f64;
    for k in 0..count {
        let major = k < count / 3;
        let width = if major { rng.random_range(3.5..5.0) } else { rng.random_range(1.5..3.0) };
        let g: f32 = rng.random_range(0.55..0.72);
        let color = [g, g, g * 0.97];
        let edge = rng.random_range(0..4);
        let t = rng.random_range(0.1..0.9) * s;
        let (mut x, mut y, mut th) = match edge {
            0 => (t, 0.0, PI / 2.0),
            1 => (s, t, PI),
            2 => (t, s, -PI / 2.0),
            _ => (0.0, t, 0.0),
        };
        th += rng.random_range(-0.6..0.6);
        let mut turn = 0.0;
        let wiggle = if major { 0.0015 } else { 0.004 };
        let mut steps = 0;
        while (-2.0..=s + 2.0).contains(&x) && (-2.0..=s + 2.0).contains(&y) && steps < 6 * side {
            stamp_disc(img, side, x, y, width, color);
            turn = (turn + rng.random_range(-wiggle..wiggle)) * 0.95;
            if rng.random_bool(0.002) {
                th += rng.random_range(-1.2..1.2);
            }
            th += turn;
            x += th.cos();
            y += th.sin();
            steps += 1;
        }
    }
}

/// Clusters of oriented rectangular roofs with a cast shadow.
fn paint_buildings(rng: &mut ChaCha8Rng, img: &mut [[f32; 3]], side: usize, clusters: usize) {
    let s = side as f64;
    for _ in 0..clusters {
        let (cx, cy) = (rng.random_range(0.05..0.95) * s, rng.random_range(0.05..0.95) * s);
        let spread: f64 = rng.random_range(15.0..45.0);
        let ang: f64 = rng.random_range(0.0..PI);
        let (sa, ca) = ang.sin_cos();
        for _ in 0..rng.random_range(8..30) {
            let bx = cx + rng.random_range(-spread..spread);
            let by = cy + rng.random_range(-spread..spread);
            let (hw, hh): (f64, f64) = (rng.random_range(2.5..7.0), rng.random_range(2.5..7.0));
            let roof = if rng.random_bool(0.6) {
                [0.62, 0.33, 0.26]
            } else {
                let g = rng.random_range(0.35..0.8);
                [g, g, g]
            };
            for (ox, oy, color) in [(2.0, 2.0, [0.12f32, 0.12, 0.12]), (0.0, 0.0, roof)] {
                let r = hw.max(hh) * 1.5;
                let (x0, x1) = ((bx + ox - r).max(0.0) as usize, ((bx + ox + r).ceil() as usize).min(side));
                let (y0, y1) = ((by + oy - r).max(0.0) as usize, ((by + oy + r).ceil() as usize).min(side));
                for y in y0..y1 {
                    for x in x0..x1 {
                        let (dx, dy) = (x as f64 + 0.5 - bx - ox, y as f64 + 0.5 - by - oy);
                        let (u, v) = (ca * dx + sa * dy, -sa * dx + ca * dy);
                        if u.abs() <= hw && v.abs() <= hh {
                            img[y * side + x] = color;
                        }
                    }
                }
            }
        }
    }
}

/// The synthetic orthophoto, `world_size_m / resolution` pixels square.
pub fn synthetic_raster(config: &SynthConfig, origin: Point) -> Result<RasterSource> {
    let side = (config.world_size_m / config.resolution).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(mix(config.seed ^ 0x5a5a));
    let per_km = |x: f64| ((config.world_size_m / 1000.0).powi(2) * x).round().max(1.0) as usize;
    let fields = paint_fields(&mut rng, side, 110.0 / config.resolution, config.seed);
    let mut px: Vec<[f32; 3]> = fields.pixels().to_vec();
    paint_roads(&mut rng, &mut px, side, per_km(1.6));
    paint_buildings(&mut rng, &mut px, side, per_km(1.3));
    let image = RgbImage::from_fn(side, side, |x, y| px[y * side + x]);
    RasterSource::new(
        AnyImage::Rgb(image),
        GeoTransform::north_up(origin.e, origin.n + config.world_size_m, config.resolution),
    )
}

/// A smooth random flight that steers back toward the center near the
/// margin. Heading is the direction of travel, degrees clockwise from north.
fn random_flight(config: &SynthConfig, origin: Point, poses: usize, rng: &mut ChaCha8Rng) -> Result<Vec<GeoPose>> {
    let w = config.world_size_m;
    let margin = config.margin();
    let step = config.speed_mps * config.pose_interval_s;
    let mut p = Point::new(
        origin.e + rng.random_range(margin..w - margin),
        origin.n + rng.random_range(margin..w - margin),
    );
    let mut heading: f64 = rng.random_range(0.0..360.0);
    let mut turn = 0.0f64;
    let alt_phase: f64 = rng.random_range(0.0..2.0 * PI);
    let center = Point::new(origin.e + w / 2.0, origin.n + w / 2.0);
    let mut out = Vec::with_capacity(poses);
    for i in 0..poses {
        let t = i as f64 * config.pose_interval_s;
        let alt = config.altitude * (1.0 + 0.05 * (t / 300.0 + alt_phase).sin());
        out.push(GeoPose::new(t, p, alt, heading)?);
        turn = (turn + rng.random_range(-1.5..1.5)).clamp(-8.0, 8.0);
        let rel = Point::new(p.e - origin.e, p.n - origin.n);
        if rel.e < margin + 2.0 * step || rel.e > w - margin - 2.0 * step || rel.n < margin + 2.0 * step || rel.n > w - margin - 2.0 * step {
            let to_center = (center.e - p.e).atan2(center.n - p.n).to_degrees();
            let diff = (to_center - heading + 540.0).rem_euclid(360.0) - 180.0;
            turn = diff.clamp(-25.0, 25.0);
        }
        heading = (heading + turn).rem_euclid(360.0);
        let (s, c) = heading.to_radians().sin_cos();
        p = Point::new(p.e + step * s, p.n + step * c);
        let lo = Point::new(origin.e + margin, origin.n + margin);
        p = Point::new(p.e.clamp(lo.e, origin.e + w - margin), p.n.clamp(lo.n, origin.n + w - margin));
    }
    Ok(out)
}

fn covered_tiles(raster: &RasterSource, config: &SynthConfig, poses: &[GeoPose]) -> Result<usize> {
    let traj = FlightTrajectory::new(poses.to_vec(), SYNTH_CRS)?;
    let grid = build_tiling(&traj, config.spacing, config.half_width)?;
    let zone = select_search_zone(&grid, &traj, config.half_width)?;
    Ok(zone
        .iter()
        .filter(|&&c| crop_envelope_covered(raster, c, config.footprint()))
        .count())
}

fn render_query(raster: &RasterSource, config: &SynthConfig, pose: &GeoPose, side: usize, rng: &mut ChaCha8Rng) -> Result<RgbImage> {
    let q = &config.query;
    let alt_scale = 1.0 + rng.random_range(-1.0..=1.0) * q.altitude_error;
    let heading = pose.heading + rng.random_range(-1.0..=1.0) * q.heading_error_deg;
    let shift = Point::new(
        pose.position.e + rng.random_range(-1.0..=1.0) * q.nadir_shift_m,
        pose.position.n + rng.random_range(-1.0..=1.0) * q.nadir_shift_m,
    );
    let frame = extract_reference_clamped(raster, shift, config.footprint() * alt_scale, heading);
    let rgb = frame.image.to_rgb().resize(side, side);
    let b = 1.0 + rng.random_range(-1.0..=1.0) * q.photometric;
    let c = 1.0 + rng.random_range(-1.0..=1.0) * q.photometric;
    let tint = [1.0 + rng.random_range(-0.05..0.05), 1.0, 1.0 + rng.random_range(-0.05..0.05)];
    let mean = rgb.to_gray().mean();
    let mask = if q.vignette_frac > 0.0 {
        vignette(&GrayImage::filled(side, side, 1.0), q.vignette_frac * side as f64)
    } else {
        GrayImage::filled(side, side, 1.0)
    };
    let noise = Normal::new(0.0, q.noise_sigma.max(1e-12)).map_err(|e| Error::invalid(e.to_string()))?;
    let noise: Vec<f32> = (0..side * side * 3)
        .map(|_| if q.noise_sigma > 0.0 { noise.sample(rng) as f32 } else { 0.0 })
        .collect();
    Ok(RgbImage::from_fn(side, side, |x, y| {
        let p = rgb.get(x, y);
        let m = mask.get(x, y);
        let i = (y * side + x) * 3;
        [0, 1, 2].map(|k| {
            let v = ((p[k] - mean) * c as f32 + mean) * b as f32 * tint[k] as f32;
            (v * m + noise[i + k]).clamp(0.0, 1.0)
        })
    }))
}

/// Raster, trajectory and ground-truth queries from one seed. The flight is
/// extended until its corridor holds at least `n_tiles` covered tiles;
/// queries sit at evenly spaced poses.
pub fn generate_synthetic_corpus(config: &SynthConfig) -> Result<SynthCorpus> {
    config.validate()?;
    let origin = Point::new(500_000.0, 5_000_000.0);
    let raster = synthetic_raster(config, origin)?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix(config.seed ^ 0xf11e));
    let step = config.speed_mps * config.pose_interval_s;
    let max_poses = ((20.0 * config.world_size_m / step) as usize).max(2);
    let all = random_flight(config, origin, max_poses, &mut rng)?;
    if covered_tiles(&raster, config, &all)? < config.n_tiles {
        return Err(Error::Config(format!(
            "a {} m world cannot hold {} corridor tiles at {} m spacing; enlarge the world",
            config.world_size_m, config.n_tiles, config.spacing
        )));
    }
    // shortest prefix reaching n_tiles
    let (mut lo, mut hi) = (2usize, max_poses);
    while lo < hi {
        let mid = (lo + hi) / 2;
        if covered_tiles(&raster, config, &all[..mid])? >= config.n_tiles {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    let poses = all[..lo].to_vec();
    let trajectory = FlightTrajectory::new(poses.clone(), SYNTH_CRS)?;

    let side = (config.footprint() / config.resolution).round() as usize;
    let nq = config.n_queries;
    let picks: Vec<usize> = (0..nq).map(|i| (i * (poses.len() - 1)) / (nq.max(2) - 1).max(1)).collect();
    let seeds: Vec<u64> = (0..nq).map(|i| mix(config.seed ^ mix(i as u64 ^ 0x9e7))).collect();
    let queries = picks
        .par_iter()
        .zip(&seeds)
        .enumerate()
        .map(|(i, (&pi, &s))| {
            let pose = &poses[pi];
            let mut r = ChaCha8Rng::seed_from_u64(s);
            Ok(SynthQuery {
                truth: QueryGroundTruth {
                    query_id: format!("q{i:05}"),
                    true_position: pose.position,
                    altitude: pose.altitude,
                    timestamp: pose.timestamp,
                },
                image: render_query(&raster, config, pose, side, &mut r)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SynthCorpus {
        config: config.clone(),
        raster,
        trajectory,
        queries,
    })
}

/// Files written by [`SynthCorpus::write`], relative to its directory.
pub const RASTER_FILE: &str = "raster.png";
pub const TRAJECTORY_FILE: &str = "trajectory.csv";
pub const QUERY_DIR: &str = "queries";
pub const TRUTH_FILE: &str = "queries.csv";
pub const SYNTH_CONFIG_FILE: &str = "synth.json";

impl SynthCorpus {
    /// `raster.png` (+ world file and CRS sidecar), `trajectory.csv`,
    /// `queries/<id>.png`, `queries.csv` and the generating `synth.json`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir.join(QUERY_DIR))?;
        self.raster.save(
            &dir.join(RASTER_FILE),
            &CrsSidecar {
                crs_id: SYNTH_CRS.into(),
                geo_transform: None,
                projection: Projection::default(),
            },
        )?;
        write_trajectory_csv(&dir.join(TRAJECTORY_FILE), &self.trajectory)?;
        self.queries.par_iter().try_for_each(|q| {
            q.image
                .save_png(&dir.join(QUERY_DIR).join(format!("{}.png", q.truth.query_id)))
        })?;
        let truth: Vec<QueryGroundTruth> = self.queries.iter().map(|q| q.truth.clone()).collect();
        write_truth_csv(&dir.join(TRUTH_FILE), &truth)?;
        std::fs::write(dir.join(SYNTH_CONFIG_FILE), serde_json::to_string_pretty(&self.config)?)?;
        Ok(())
    }

    pub fn truth(&self) -> Vec<QueryGroundTruth> {
        self.queries.iter().map(|q| q.truth.clone()).collect()
    }
}
