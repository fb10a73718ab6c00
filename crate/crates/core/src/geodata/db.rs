use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    build_tiling, compute_crop_size, extract_reference, nearest_pose, select_search_zone, FlightTrajectory,
    RasterSource, ReferenceTile,
};
use crate::error::{Error, Result};
use crate::image::AnyImage;

pub const TILE_MANIFEST: &str = "tiles.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(rename_all = "kebab-case")]
pub enum MissingTilePolicy {
    /// Drop tiles whose crop envelope leaves the raster and log them.
    #[default]
    Skip,
    Abort,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceDbParams {
    pub spacing: f64,
    pub half_width: f64,
    pub focal_length_mm: f64,
    pub sensor_width_mm: f64,
    /// Overrides the trajectory's mean altitude for crop sizing.
    pub altitude: Option<f64>,
    pub on_missing: MissingTilePolicy,
}

/// Tiling, search-zone selection and heading-aligned extraction in one pass.
/// Tile ids follow output order.
pub fn build_reference_db(
    source: &RasterSource,
    trajectory: &FlightTrajectory,
    params: &ReferenceDbParams,
) -> Result<Vec<ReferenceTile>> {
    trajectory.require_non_empty()?;
    let altitude = match params.altitude {
        Some(a) => a,
        None => trajectory.mean_altitude().expect("non-empty"),
    };
    let (footprint, _) = compute_crop_size(
        altitude,
        params.focal_length_mm,
        params.sensor_width_mm,
        source.resolution(),
    )?;
    let grid = build_tiling(trajectory, params.spacing, params.half_width)?;
    let zone = select_search_zone(&grid, trajectory, params.half_width)?;
    info!(
        "tiling: {} lattice points, {} inside the {:.0} m band, footprint {:.1} m",
        grid.len(),
        zone.len(),
        params.half_width,
        footprint
    );

    let extracted: Vec<Result<ReferenceTile>> = zone
        .par_iter()
        .map(|&center| {
            let pose = &trajectory.poses()[nearest_pose(center, trajectory)?];
            extract_reference(source, center, footprint, pose.heading)
        })
        .collect();

    let mut tiles = Vec::with_capacity(extracted.len());
    let mut skipped = 0usize;
    for r in extracted {
        match r {
            Ok(mut tile) => {
                tile.tile_id = tiles.len() as u64;
                tiles.push(tile);
            }
            Err(Error::OutOfCoverage { center }) if params.on_missing == MissingTilePolicy::Skip => {
                skipped += 1;
                log::debug!("skipping tile at ({:.1}, {:.1}): outside raster", center.e, center.n);
            }
            Err(e) => return Err(e),
        }
    }
    if skipped > 0 {
        warn!("{skipped} tiles skipped for incomplete raster coverage");
    }
    if tiles.is_empty() {
        warn!("reference database is empty");
    }
    Ok(tiles)
}

/// One line of the tile manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TileRecord {
    pub tile_id: u64,
    pub center_e: f64,
    pub center_n: f64,
    pub heading: f64,
    pub footprint_m: f64,
    pub file: String,
}

/// Writes `tiles/<id>.png` and the JSON-lines manifest under `dir`. When
/// `store_px` is set, tiles are resized to that side before writing.
pub fn write_tile_db(dir: &Path, tiles: &[ReferenceTile], store_px: Option<usize>) -> Result<Vec<TileRecord>> {
    let tile_dir = dir.join("tiles");
    fs::create_dir_all(&tile_dir)?;
    let records: Vec<TileRecord> = tiles
        .par_iter()
        .map(|tile| {
            let file = format!("tiles/{:07}.png", tile.tile_id);
            let image = match (store_px, &tile.image) {
                (Some(px), AnyImage::Gray(g)) => AnyImage::Gray(g.resize(px, px)),
                (Some(px), AnyImage::Rgb(c)) => AnyImage::Rgb(c.resize(px, px)),
                (None, img) => img.clone(),
            };
            image.save_png(&dir.join(&file))?;
            Ok(TileRecord {
                tile_id: tile.tile_id,
                center_e: tile.center.e,
                center_n: tile.center.n,
                heading: tile.heading,
                footprint_m: tile.footprint,
                file,
            })
        })
        .collect::<Result<_>>()?;
    let mut w = BufWriter::new(File::create(dir.join(TILE_MANIFEST))?);
    for r in &records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(records)
}

/// Reads a tile manifest. Lines that are not tile records (for instance query
/// records) are rejected.
pub fn read_tile_manifest(path: &Path) -> Result<Vec<TileRecord>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TileRecord = serde_json::from_str(&line)
            .map_err(|e| Error::format(path, format!("line {}: not a reference tile record: {e}", i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}
