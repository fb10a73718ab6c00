use std::f64::consts::SQRT_2;

use super::{normalize_heading, Point, RasterSource, ReferenceTile};
use crate::error::{Error, Result};
use crate::image::{AnyImage, GrayImage, RgbImage};

/// Ground footprint of a nadir pinhole camera and the matching crop size in
/// raster pixels: `footprint = altitude * sensor_width / focal_length`.
pub fn compute_crop_size(
    altitude: f64,
    focal_length_mm: f64,
    sensor_width_mm: f64,
    resolution: f64,
) -> Result<(f64, usize)> {
    for (name, v) in [
        ("altitude", altitude),
        ("focal length", focal_length_mm),
        ("sensor width", sensor_width_mm),
        ("resolution", resolution),
    ] {
        if !(v > 0.0) || !v.is_finite() {
            return Err(Error::invalid(format!("{name} must be > 0, got {v}")));
        }
    }
    let footprint = altitude * sensor_width_mm / focal_length_mm;
    let crop = ((footprint / resolution).round() as usize).max(1);
    Ok((footprint, crop))
}

/// Whether the axis-aligned `footprint * sqrt(2)` box around `center` (the
/// envelope of the crop under any rotation) lies inside the raster.
pub fn crop_envelope_covered(source: &RasterSource, center: Point, footprint: f64) -> bool {
    let half = footprint * SQRT_2 / 2.0;
    [(-half, -half), (half, -half), (-half, half), (half, half)]
        .iter()
        .all(|&(de, dn)| source.contains(Point::new(center.e + de, center.n + dn)))
}

/// Square tile of side `round(footprint / resolution)` pixels centered on
/// `center`, rotated so that image up points along `heading`.
///
/// Fails with [`Error::OutOfCoverage`] when the rotation envelope leaves the raster.
pub fn extract_reference(source: &RasterSource, center: Point, footprint: f64, heading: f64) -> Result<ReferenceTile> {
    if !(footprint > 0.0) {
        return Err(Error::invalid(format!("footprint must be > 0, got {footprint}")));
    }
    if !crop_envelope_covered(source, center, footprint) {
        return Err(Error::OutOfCoverage { center });
    }
    Ok(extract_reference_clamped(source, center, footprint, heading))
}

/// Same as [`extract_reference`] but samples outside the raster replicate the border.
pub fn extract_reference_clamped(source: &RasterSource, center: Point, footprint: f64, heading: f64) -> ReferenceTile {
    let side = ((footprint / source.resolution()).round() as usize).max(1);
    let step = footprint / side as f64;
    let heading = normalize_heading(heading);
    let (s, c) = heading.to_radians().sin_cos();
    let t = source.transform();
    let half = side as f64 / 2.0;
    let locate = |u: usize, v: usize| {
        let dx = (u as f64 + 0.5 - half) * step;
        let dy = (v as f64 + 0.5 - half) * step;
        // right = (cos h, -sin h), forward = (sin h, cos h); image y grows backwards
        let e = center.e + dx * c - dy * s;
        let n = center.n - dx * s - dy * c;
        t.world_to_pixel(Point::new(e, n))
    };
    let image = match source.pixels() {
        AnyImage::Gray(g) => AnyImage::Gray(GrayImage::from_fn(side, side, |u, v| {
            let (px, py) = locate(u, v);
            g.sample_bilinear(px, py)
        })),
        AnyImage::Rgb(rgb) => AnyImage::Rgb(RgbImage::from_fn(side, side, |u, v| {
            let (px, py) = locate(u, v);
            rgb.sample_bilinear(px, py)
        })),
    };
    ReferenceTile {
        tile_id: 0,
        center,
        heading,
        footprint,
        image,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geodata::GeoTransform;

    fn stripe_raster() -> RasterSource {
        // 64x64 at 1 m/px, origin (0, 64); horizontal stripe on rows 30..34
        let img = GrayImage::from_fn(64, 64, |_, y| if (30..34).contains(&y) { 1.0 } else { 0.0 });
        RasterSource::new(AnyImage::Gray(img), GeoTransform::north_up(0.0, 64.0, 1.0)).unwrap()
    }

    #[test]
    fn pinhole_footprint() {
        let (fp, px) = compute_crop_size(571.0, 8.0, 6.4, 0.20).unwrap();
        assert!((fp - 456.8).abs() < 1e-9);
        assert_eq!(px, 2284);
        let (fp2, _) = compute_crop_size(1142.0, 8.0, 6.4, 0.20).unwrap();
        assert_eq!(fp2, 2.0 * fp);
        assert!(compute_crop_size(0.0, 8.0, 6.4, 0.2).is_err());
        assert!(compute_crop_size(100.0, -8.0, 6.4, 0.2).is_err());
    }

    #[test]
    fn heading_zero_is_axis_aligned_crop() {
        let src = stripe_raster();
        let tile = extract_reference(&src, Point::new(32.0, 32.0), 20.0, 0.0).unwrap();
        let g = tile.image.to_gray();
        assert_eq!(g.width(), 20);
        let AnyImage::Gray(full) = src.pixels() else { unreachable!() };
        for v in 0..20 {
            for u in 0..20 {
                assert_eq!(g.get(u, v), full.get(22 + u, 22 + v));
            }
        }
    }

    #[test]
    fn heading_periodic() {
        let src = stripe_raster();
        let a = extract_reference(&src, Point::new(30.5, 33.0), 21.0, 0.0).unwrap();
        let b = extract_reference(&src, Point::new(30.5, 33.0), 21.0, 360.0).unwrap();
        assert_eq!(a.image.to_gray(), b.image.to_gray());
    }

    #[test]
    fn heading_ninety_turns_stripe_vertical() {
        let src = stripe_raster();
        let tile = extract_reference(&src, Point::new(32.0, 32.0), 20.0, 90.0).unwrap();
        let g = tile.image.to_gray();
        // the stripe now runs top to bottom: columns near the center are bright
        let col_mean = |u: usize| (0..20).map(|v| g.get(u, v)).sum::<f32>() / 20.0;
        let bright: Vec<usize> = (0..20).filter(|&u| col_mean(u) > 0.9).collect();
        assert_eq!(bright.len(), 4);
        for v in 0..20 {
            assert!(g.get(0, v) < 0.1 && g.get(19, v) < 0.1);
        }
    }

    #[test]
    fn out_of_coverage_carries_center() {
        let src = stripe_raster();
        let err = extract_reference(&src, Point::new(5.0, 5.0), 20.0, 0.0).unwrap_err();
        match err {
            Error::OutOfCoverage { center } => assert_eq!(center, Point::new(5.0, 5.0)),
            e => panic!("unexpected {e}"),
        }
    }
}
