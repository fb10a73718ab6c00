use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geodata::{read_tile_manifest, ReferenceTile, TILE_MANIFEST};
use crate::image::{AnyImage, GrayImage};

/// A reference tile prepared for training.
#[derive(Debug, Clone)]
pub struct TrainTile {
    tile_id: u64,
    image: GrayImage,
    meters_per_pixel: f64,
}

impl TrainTile {
    pub fn tile_id(&self) -> u64 {
        self.tile_id
    }

    pub fn image(&self) -> &GrayImage {
        &self.image
    }

    pub fn meters_per_pixel(&self) -> f64 {
        self.meters_per_pixel
    }
}

/// The only input type the training stages accept.
///
/// It can be built from extracted [`ReferenceTile`]s or from a reference
/// database on disk, and from nothing else: there is no constructor taking
/// free-standing images, so query imagery cannot reach a training loop.
///
/// ```compile_fail
/// use refloc::retrieval::QuerySet;
/// use refloc::training::{pretrain_autoencoder, RunOptions, TrainConfig};
///
/// fn train_on_queries(queries: &QuerySet) {
///     let _ = pretrain_autoencoder(queries, &TrainConfig::default(), &RunOptions::default());
/// }
/// ```
#[derive(Debug, Clone)]
pub struct ReferenceTileSet {
    tiles: Vec<TrainTile>,
}

fn square_gray(image: &AnyImage, side: Option<usize>) -> GrayImage {
    let g = image.to_gray();
    match side {
        Some(s) if s != g.width() || s != g.height() => g.resize(s, s),
        _ => g,
    }
}

impl ReferenceTileSet {
    /// `source_px` optionally resamples every tile to a square of that side.
    pub fn from_tiles(tiles: &[ReferenceTile], source_px: Option<usize>) -> Result<Self> {
        let tiles = tiles
            .iter()
            .map(|t| {
                let image = square_gray(&t.image, source_px);
                TrainTile {
                    tile_id: t.tile_id,
                    meters_per_pixel: t.footprint / image.width() as f64,
                    image,
                }
            })
            .collect();
        Self::checked(tiles)
    }

    /// Loads a reference database written by
    /// [`write_tile_db`](crate::geodata::write_tile_db). Manifest lines that
    /// are not reference tile records are rejected by the parser.
    pub fn load(db_dir: &Path, source_px: Option<usize>) -> Result<Self> {
        let records = read_tile_manifest(&db_dir.join(TILE_MANIFEST))?;
        let tiles = records
            .iter()
            .map(|r| {
                if !r.file.starts_with("tiles/") || r.file.contains("..") {
                    return Err(Error::format(
                        &db_dir.join(TILE_MANIFEST),
                        format!("tile {} points outside the tile store: {}", r.tile_id, r.file),
                    ));
                }
                let image = square_gray(&AnyImage::open(&db_dir.join(&r.file))?, source_px);
                Ok(TrainTile {
                    tile_id: r.tile_id,
                    meters_per_pixel: r.footprint_m / image.width() as f64,
                    image,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::checked(tiles)
    }

    fn checked(tiles: Vec<TrainTile>) -> Result<Self> {
        if tiles.is_empty() {
            return Err(Error::invalid("reference tile set is empty"));
        }
        for t in &tiles {
            if t.image.width() != t.image.height() {
                return Err(Error::invalid(format!("tile {} is not square", t.tile_id)));
            }
        }
        Ok(Self { tiles })
    }

    pub fn len(&self) -> usize {
        self.tiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tiles.is_empty()
    }

    pub fn tiles(&self) -> &[TrainTile] {
        &self.tiles
    }

    /// First `n` tiles, for quick experiments.
    pub fn truncated(&self, n: usize) -> Self {
        Self {
            tiles: self.tiles[..n.min(self.tiles.len())].to_vec(),
        }
    }
}

fn mix(mut x: u64) -> u64 {
    // splitmix64 finalizer
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Seed of one item's augmentation draw in a given epoch.
pub fn item_seed(seed: u64, epoch: usize, index: usize) -> u64 {
    mix(mix(mix(seed) ^ epoch as u64) ^ index as u64)
}

/// Visiting order of one epoch; depends only on `(seed, epoch)` so a resumed
/// run sees the same order.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(seed ^ 0x0bad_5eed) ^ epoch as u64));
    order
}

/// Batches of the epoch order. A trailing batch smaller than two items is
/// dropped because batch statistics need at least two samples.
pub fn epoch_batches(seed: u64, epoch: usize, n: usize, batch_size: usize) -> Vec<Vec<usize>> {
    epoch_order(seed, epoch, n)
        .chunks(batch_size.max(2))
        .filter(|c| c.len() >= 2)
        .map(|c| c.to_vec())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_a_permutation_and_reproducible() {
        let a = epoch_order(1, 3, 50);
        assert_eq!(a, epoch_order(1, 3, 50));
        assert_ne!(a, epoch_order(1, 4, 50));
        let mut s = a.clone();
        s.sort();
        assert_eq!(s, (0..50).collect::<Vec<_>>());
        assert_ne!(item_seed(1, 0, 0), item_seed(1, 0, 1));
    }

    #[test]
    fn batches_drop_singletons() {
        let b = epoch_batches(0, 0, 9, 4);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4]);
        let b = epoch_batches(0, 0, 10, 4);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 2]);
    }
}
