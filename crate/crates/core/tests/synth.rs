use std::collections::BTreeMap;
use std::path::Path;

use refloc::geodata::{build_reference_db, read_trajectory_csv, RasterSource};
use refloc::synth::*;

fn small() -> SynthConfig {
    SynthConfig {
        n_tiles: 60,
        n_queries: 12,
        world_size_m: 1600.0,
        ..Default::default()
    }
}

fn dir_bytes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn fixed_seed_gives_identical_files() {
    let cfg = small();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    generate_synthetic_corpus(&cfg).unwrap().write(a.path()).unwrap();
    generate_synthetic_corpus(&cfg).unwrap().write(b.path()).unwrap();
    let fa = dir_bytes(a.path());
    assert!(fa.contains_key(RASTER_FILE) && fa.contains_key(TRUTH_FILE) && fa.contains_key(TRAJECTORY_FILE));
    assert_eq!(fa.keys().filter(|k| k.starts_with(&format!("{QUERY_DIR}/"))).count(), cfg.n_queries);
    assert_eq!(fa, dir_bytes(b.path()));

    let other = generate_synthetic_corpus(&SynthConfig { seed: 1, ..cfg }).unwrap();
    let c = tempfile::tempdir().unwrap();
    other.write(c.path()).unwrap();
    assert_ne!(dir_bytes(c.path())[RASTER_FILE], fa[RASTER_FILE]);
}

#[test]
fn queries_and_flight_stay_inside_the_raster() {
    let cfg = small();
    let corpus = generate_synthetic_corpus(&cfg).unwrap();
    let half_frame = cfg.footprint() * (1.0 + cfg.query.altitude_error) * std::f64::consts::SQRT_2 / 2.0;
    let inside_with_margin = |r: &RasterSource, p: refloc::geodata::Point, m: f64| {
        [(-m, -m), (m, -m), (-m, m), (m, m)]
            .iter()
            .all(|&(de, dn)| r.contains(refloc::geodata::Point::new(p.e + de, p.n + dn)))
    };
    assert_eq!(corpus.queries.len(), cfg.n_queries);
    for q in &corpus.queries {
        assert!(inside_with_margin(&corpus.raster, q.truth.true_position, half_frame), "{:?}", q.truth);
        let side = (cfg.footprint() / cfg.resolution).round() as usize;
        assert_eq!((q.image.width(), q.image.height()), (side, side));
    }
    for p in corpus.trajectory.poses() {
        assert!(corpus.raster.contains(p.position));
    }
    let ts: Vec<f64> = corpus.truth().iter().map(|t| t.timestamp).collect();
    assert!(ts.windows(2).all(|w| w[0] < w[1]));
}

#[test]
fn corridor_holds_the_requested_tile_count() {
    let cfg = small();
    let corpus = generate_synthetic_corpus(&cfg).unwrap();
    let tiles = build_reference_db(&corpus.raster, &corpus.trajectory, &cfg.db_params()).unwrap();
    assert!(tiles.len() >= cfg.n_tiles, "{}", tiles.len());
    // shortest flight reaching the count
    assert!(tiles.len() < cfg.n_tiles + 20, "{}", tiles.len());
    let side = (cfg.footprint() / cfg.resolution).round() as usize;
    assert!(tiles.iter().all(|t| t.image.width() == side));
}

#[test]
fn written_corpus_reads_back() {
    let cfg = small();
    let corpus = generate_synthetic_corpus(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    corpus.write(dir.path()).unwrap();
    let (raster, sidecar) = RasterSource::open(&dir.path().join(RASTER_FILE)).unwrap();
    assert_eq!(sidecar.crs_id, SYNTH_CRS);
    assert_eq!(raster.transform(), corpus.raster.transform());
    let traj = read_trajectory_csv(&dir.path().join(TRAJECTORY_FILE), SYNTH_CRS).unwrap();
    assert_eq!(traj.poses().len(), corpus.trajectory.poses().len());
    let truth = refloc::eval::read_truth_csv(&dir.path().join(TRUTH_FILE)).unwrap();
    assert_eq!(truth, corpus.truth());
    let back: SynthConfig = serde_json::from_slice(&std::fs::read(dir.path().join(SYNTH_CONFIG_FILE)).unwrap()).unwrap();
    assert_eq!(back, cfg);
}

#[test]
fn invalid_configs_are_rejected() {
    assert!(generate_synthetic_corpus(&SynthConfig { n_tiles: 9, ..small() }).is_err());
    assert!(generate_synthetic_corpus(&SynthConfig { world_size_m: 500.0, ..small() }).is_err());
    assert!(generate_synthetic_corpus(&SynthConfig { n_queries: 0, ..small() }).is_err());
    assert!(generate_synthetic_corpus(&SynthConfig { resolution: f64::NAN, ..small() }).is_err());
}
