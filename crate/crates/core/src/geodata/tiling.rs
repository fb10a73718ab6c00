use std::cmp::Ordering;

use super::{FlightTrajectory, GeoPose, Point};
use crate::error::{Error, Result};

/// Regular lattice (pitch `spacing`, anchored at multiples of `spacing`) covering
/// the trajectory bounding box expanded by `half_width` on every side.
///
/// Points are ordered by easting, then northing.
pub fn build_tiling(trajectory: &FlightTrajectory, spacing: f64, half_width: f64) -> Result<Vec<Point>> {
    if !(spacing > 0.0) || !spacing.is_finite() {
        return Err(Error::invalid(format!("spacing must be > 0, got {spacing}")));
    }
    if !(half_width >= 0.0) || !half_width.is_finite() {
        return Err(Error::invalid(format!("half width must be >= 0, got {half_width}")));
    }
    trajectory.require_non_empty()?;
    let (lo, hi) = trajectory.bounds().expect("non-empty");
    let i0 = ((lo.e - half_width) / spacing).floor() as i64;
    let i1 = ((hi.e + half_width) / spacing).ceil() as i64;
    let j0 = ((lo.n - half_width) / spacing).floor() as i64;
    let j1 = ((hi.n + half_width) / spacing).ceil() as i64;
    let mut grid = Vec::with_capacity(((i1 - i0 + 1) * (j1 - j0 + 1)) as usize);
    for i in i0..=i1 {
        for j in j0..=j1 {
            grid.push(Point::new(i as f64 * spacing, j as f64 * spacing));
        }
    }
    Ok(grid)
}

fn segment_distance_sq(p: Point, a: Point, b: Point) -> f64 {
    let (dx, dy) = (b.e - a.e, b.n - a.n);
    let len_sq = dx * dx + dy * dy;
    let t = if len_sq > 0.0 {
        (((p.e - a.e) * dx + (p.n - a.n) * dy) / len_sq).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (qx, qy) = (a.e + t * dx - p.e, a.n + t * dy - p.n);
    qx * qx + qy * qy
}

/// Minimum Euclidean distance from `p` to the polyline through the poses.
pub fn distance_to_polyline(p: Point, poses: &[GeoPose]) -> f64 {
    match poses {
        [] => f64::INFINITY,
        [only] => only.position.distance(&p),
        _ => poses
            .windows(2)
            .map(|w| segment_distance_sq(p, w[0].position, w[1].position))
            .fold(f64::INFINITY, f64::min)
            .sqrt(),
    }
}

/// Grid points within `half_width` of the trajectory polyline, sorted by
/// easting then northing.
pub fn select_search_zone(grid: &[Point], trajectory: &FlightTrajectory, half_width: f64) -> Result<Vec<Point>> {
    if !(half_width > 0.0) {
        return Err(Error::invalid(format!("half width must be > 0, got {half_width}")));
    }
    trajectory.require_non_empty()?;
    let poses = trajectory.poses();
    let limit = half_width * half_width;

    // per-segment bounding boxes expanded by the band, for cheap rejection
    let segments: Vec<(Point, Point)> = if poses.len() == 1 {
        vec![(poses[0].position, poses[0].position)]
    } else {
        poses.windows(2).map(|w| (w[0].position, w[1].position)).collect()
    };
    let boxes: Vec<(Point, Point, Point, Point)> = segments
        .into_iter()
        .map(|(a, b)| {
            (
                a,
                b,
                Point::new(a.e.min(b.e) - half_width, a.n.min(b.n) - half_width),
                Point::new(a.e.max(b.e) + half_width, a.n.max(b.n) + half_width),
            )
        })
        .collect();

    let mut kept: Vec<Point> = grid
        .iter()
        .copied()
        .filter(|&p| {
            boxes.iter().any(|(a, b, lo, hi)| {
                p.e >= lo.e && p.e <= hi.e && p.n >= lo.n && p.n <= hi.n && segment_distance_sq(p, *a, *b) <= limit
            })
        })
        .collect();
    kept.sort_by(|a, b| {
        a.e.partial_cmp(&b.e)
            .unwrap_or(Ordering::Equal)
            .then(a.n.partial_cmp(&b.n).unwrap_or(Ordering::Equal))
    });
    kept.dedup();
    Ok(kept)
}

/// Index of the pose closest in space to `p`; the earliest pose wins ties.
pub fn nearest_pose(p: Point, trajectory: &FlightTrajectory) -> Result<usize> {
    trajectory.require_non_empty()?;
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, pose) in trajectory.poses().iter().enumerate() {
        let d = pose.position.distance(&p);
        if d < best_d {
            best = i;
            best_d = d;
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn traj(points: &[(f64, f64)]) -> FlightTrajectory {
        let poses = points
            .iter()
            .enumerate()
            .map(|(i, &(e, n))| GeoPose::new(i as f64, Point::new(e, n), 500.0, 0.0).unwrap())
            .collect();
        FlightTrajectory::new(poses, "local").unwrap()
    }

    #[test]
    fn tiling_covers_expanded_box() {
        let t = traj(&[(0.0, 0.0), (1000.0, 0.0)]);
        let grid = build_tiling(&t, 100.0, 700.0).unwrap();
        // brute-force enumeration of lattice points in [-700,1700] x [-700,700]
        let mut count = 0;
        for i in -100..100 {
            for j in -100..100 {
                let (e, n) = (i as f64 * 100.0, j as f64 * 100.0);
                if (-700.0..=1700.0).contains(&e) && (-700.0..=700.0).contains(&n) {
                    count += 1;
                }
            }
        }
        assert_eq!(grid.len(), count);
        assert_eq!(count, 25 * 15);
        assert_eq!(grid.first().copied(), Some(Point::new(-700.0, -700.0)));
        assert_eq!(grid.last().copied(), Some(Point::new(1700.0, 700.0)));
    }

    #[test]
    fn single_pose_tiling_is_centered() {
        let t = traj(&[(0.0, 0.0)]);
        let grid = build_tiling(&t, 100.0, 700.0).unwrap();
        assert_eq!(grid.len(), 15 * 15);
        let (se, sn) = grid.iter().fold((0.0, 0.0), |(a, b), p| (a + p.e, b + p.n));
        assert_eq!((se, sn), (0.0, 0.0));
    }

    #[test]
    fn zero_spacing_rejected() {
        let t = traj(&[(0.0, 0.0)]);
        assert!(matches!(build_tiling(&t, 0.0, 700.0), Err(Error::InvalidInput(_))));
        let empty = FlightTrajectory::new(vec![], "local").unwrap();
        assert!(build_tiling(&empty, 10.0, 700.0).is_err());
    }

    #[test]
    fn band_edges() {
        let t = traj(&[(0.0, 0.0), (1000.0, 0.0)]);
        let grid = [Point::new(500.0, 699.0), Point::new(500.0, 701.0), Point::new(500.0, -699.0)];
        let kept = select_search_zone(&grid, &t, 700.0).unwrap();
        assert_eq!(kept, vec![Point::new(500.0, -699.0), Point::new(500.0, 699.0)]);
    }

    #[test]
    fn nearest_pose_prefers_earliest_on_tie() {
        let t = traj(&[(0.0, 0.0), (10.0, 0.0), (0.0, 0.0 + 1e-9)]);
        assert_eq!(nearest_pose(Point::new(5.0, 0.0), &t).unwrap(), 0);
        let t = traj(&[(-5.0, 0.0), (5.0, 0.0)]);
        assert_eq!(nearest_pose(Point::new(0.0, 3.0), &t).unwrap(), 0);
    }
}
