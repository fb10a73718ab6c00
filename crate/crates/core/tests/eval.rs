mod common;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use refloc::eval::*;
use refloc::geodata::Point;
use refloc::model::{ModelConfig, Stage};
use refloc::retrieval::*;
use refloc::Error;

fn meta() -> IndexMetadata {
    IndexMetadata {
        checkpoint_hash: String::new(),
        config_hash: String::new(),
        crs_id: String::new(),
        created: None,
    }
}

fn line_index(n: usize) -> EmbeddingIndex {
    let records = (0..n)
        .map(|i| EmbeddingRecord {
            tile_id: i as u64,
            center: Point::new(100.0 * i as f64, 0.0),
            vector: vec![1.0],
        })
        .collect();
    EmbeddingIndex::new(records, meta()).unwrap()
}

fn result(id: &str, ranked: &[u64]) -> RetrievalResult {
    RetrievalResult {
        query_id: id.into(),
        ranked: ranked.iter().enumerate().map(|(i, &t)| (t, 1.0 - 0.1 * i as f64)).collect(),
        predicted_location: None,
    }
}

fn truth(id: &str, e: f64, n: f64, altitude: f64, timestamp: f64) -> QueryGroundTruth {
    QueryGroundTruth {
        query_id: id.into(),
        true_position: Point::new(e, n),
        altitude,
        timestamp,
    }
}

/// Tiles every 100 m along the east axis and six queries whose distances to
/// each ranked tile are easy to read off.
fn six_query_fixture() -> (EmbeddingIndex, Vec<RetrievalResult>, Vec<QueryGroundTruth>) {
    let results = vec![
        result("q0", &[0, 1]),
        result("q1", &[3, 1]),
        result("q2", &[0, 1, 2, 3, 4]),
        result("q3", &[2, 3]),
        result("q4", &[4]),
        result("q5", &[1, 2]),
    ];
    let truth = vec![
        truth("q0", 0.0, 0.0, 300.0, 0.0),
        truth("q1", 120.0, 0.0, 300.0, 1.0),
        truth("q2", 400.0, 50.0, 300.0, 2.0),
        truth("q3", 250.0, 0.0, 500.0, 3.0),
        truth("q4", 1000.0, 0.0, 500.0, 4.0),
        truth("q5", 150.0, 0.0, 500.0, 5.0),
    ];
    (line_index(5), results, truth)
}

#[test]
fn six_query_fixture_matches_hand_count() {
    let (index, results, truth) = six_query_fixture();
    let r = |k, d| recall_at_k(&results, &truth, &index, k, d).unwrap();
    // K=1 hits at 100 m: q0 (0 m), q3 (50 m), q5 (50 m)
    assert_eq!(r(1, 100.0), 50.0);
    // q1 has tile 1 at 20 m in second place, q2 has tile 4 at 50 m in fifth
    assert_eq!(r(5, 100.0), 500.0 / 6.0);
    assert_eq!(r(10, 100.0), 500.0 / 6.0);
    assert_eq!(r(2, 100.0), 400.0 / 6.0);
    assert_eq!(r(1, 150.0), 50.0);
    // q1's first tile is 180 m away
    assert_eq!(r(1, 250.0), 400.0 / 6.0);
    // q2's first tile is about 403 m away, q4 is 600 m from everything
    assert_eq!(r(1, 500.0), 500.0 / 6.0);
    assert_eq!(r(10, 500.0), 500.0 / 6.0);

    assert_eq!(
        correctness_by_time(&results, &truth, &index, 1, 100.0).unwrap(),
        [true, false, false, true, false, true]
    );
    let report = evaluate(&results, &truth, &index, &EvalConfig::default()).unwrap();
    assert!(report.is_monotone());
    assert_eq!(report.recall(1, 100.0), Some(50.0));
    let run = report.run_lengths.iter().find(|c| c.k == 1 && c.d == 100.0).unwrap();
    assert_eq!(run.mean_run, 1.5);
}

#[test]
fn two_altitude_fixture_matches_hand_count() {
    let (index, results, truth) = six_query_fixture();
    let rows = altitude_filtered_recall(&results, &truth, &index, &[0.0, 300.0, 400.0, 500.0, 600.0], 1, 100.0).unwrap();
    let got: Vec<(usize, Option<f64>)> = rows.iter().map(|r| (r.queries, r.recall)).collect();
    // q3 and q5 are the hits among the three 500 m queries
    assert_eq!(
        got,
        [
            (6, Some(50.0)),
            (6, Some(50.0)),
            (3, Some(200.0 / 3.0)),
            (3, Some(200.0 / 3.0)),
            (0, None)
        ]
    );
    assert_eq!(rows[0].recall.unwrap(), recall_at_k(&results, &truth, &index, 1, 100.0).unwrap());
}

#[test]
fn run_lengths_by_hand() {
    const F: bool = false;
    const T: bool = true;
    assert_eq!(error_run_lengths(&[F, F, T, F]).unwrap(), 1.5);
    assert_eq!(error_run_lengths(&[T, T, T]).unwrap(), 0.0);
    assert_eq!(error_run_lengths(&[F; 7]).unwrap(), 7.0);
    assert_eq!(error_run_lengths(&[T, F, T, F, F, F, T]).unwrap(), 2.0);
    assert!(matches!(error_run_lengths(&[]), Err(Error::InvalidInput(_))));
}

#[test]
fn missing_truth_lists_ids() {
    let (index, mut results, truth) = six_query_fixture();
    results.push(result("zz", &[0]));
    results.push(result("yy", &[0]));
    match recall_at_k(&results, &truth, &index, 1, 100.0) {
        Err(Error::MissingGroundTruth(ids)) => assert_eq!(ids, ["zz", "yy"]),
        other => panic!("{other:?}"),
    }
}

#[test]
fn every_rank_one_within_d_scores_full_recall() {
    let index = line_index(10);
    let results: Vec<_> = (0..10).map(|i| result(&format!("q{i}"), &[i])).collect();
    let truth: Vec<_> = (0..10).map(|i| truth(&format!("q{i}"), 100.0 * i as f64 + 30.0, 0.0, 400.0, i as f64)).collect();
    assert_eq!(recall_at_k(&results, &truth, &index, 1, 30.0).unwrap(), 100.0);
    assert_eq!(recall_at_k(&results, &truth, &index, 1, 29.0).unwrap(), 0.0);
}

/// Random tiles in a square, random truths and random rankings.
fn random_fixture(seed: u64, n_queries: usize) -> (EmbeddingIndex, Vec<RetrievalResult>, Vec<QueryGroundTruth>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_tiles = 60;
    let records = (0..n_tiles)
        .map(|i| EmbeddingRecord {
            tile_id: 1000 + i as u64,
            center: Point::new(rng.random_range(0.0..2000.0), rng.random_range(0.0..2000.0)),
            vector: vec![1.0],
        })
        .collect();
    let index = EmbeddingIndex::new(records, meta()).unwrap();
    let mut results = Vec::new();
    let mut truths = Vec::new();
    for q in 0..n_queries {
        let id = format!("q{q:03}");
        let len = rng.random_range(1..=12);
        let ranked: Vec<u64> = (0..len).map(|_| 1000 + rng.random_range(0..n_tiles) as u64).collect();
        results.push(result(&id, &ranked));
        truths.push(truth(
            &id,
            rng.random_range(0.0..2000.0),
            rng.random_range(0.0..2000.0),
            rng.random_range(250.0..550.0),
            q as f64,
        ));
    }
    (index, results, truths)
}

/// Double loop over queries and their first K tiles with distances
/// recomputed from the raw coordinates.
fn recall_oracle(index: &EmbeddingIndex, results: &[RetrievalResult], truth: &[QueryGroundTruth], k: usize, d: f64) -> f64 {
    let mut hits = 0usize;
    for r in results {
        let t = truth.iter().find(|t| t.query_id == r.query_id).unwrap();
        let mut ok = false;
        for (rank, (tile, _)) in r.ranked.iter().enumerate() {
            if rank >= k {
                break;
            }
            let c = index.records().find(|rec| rec.tile_id == *tile).unwrap().center;
            let (de, dn) = (c.e - t.true_position.e, c.n - t.true_position.n);
            if (de * de + dn * dn).sqrt() <= d {
                ok = true;
            }
        }
        hits += usize::from(ok);
    }
    100.0 * hits as f64 / results.len() as f64
}

/// Splits the sequence into maximal runs of errors by string matching.
fn run_oracle(seq: &[bool]) -> f64 {
    let s: String = seq.iter().map(|&b| if b { 'T' } else { 'F' }).collect();
    let runs: Vec<usize> = s.split('T').filter(|r| !r.is_empty()).map(str::len).collect();
    if runs.is_empty() {
        0.0
    } else {
        runs.iter().sum::<usize>() as f64 / runs.len() as f64
    }
}

#[test]
fn recall_matches_double_loop_oracle_on_200_queries() {
    for seed in 0..5 {
        let (index, results, truth) = random_fixture(seed, 200);
        for k in [1, 3, 5, 10] {
            for d in [50.0, 100.0, 150.0, 250.0, 500.0] {
                assert_eq!(
                    recall_at_k(&results, &truth, &index, k, d).unwrap(),
                    recall_oracle(&index, &results, &truth, k, d),
                    "seed {seed} k {k} d {d}"
                );
            }
        }
    }
}

proptest! {
    #[test]
    fn run_lengths_match_oracle(seq in prop::collection::vec(any::<bool>(), 1..80), tail in 0usize..10) {
        let v = error_run_lengths(&seq).unwrap();
        prop_assert_eq!(v, run_oracle(&seq));
        let mut longer = seq.clone();
        longer.extend(std::iter::repeat_n(true, tail));
        prop_assert_eq!(error_run_lengths(&longer).unwrap(), v);
    }

    #[test]
    fn reports_are_monotone(seed in any::<u64>()) {
        let (index, results, truth) = random_fixture(seed, 40);
        let report = evaluate(&results, &truth, &index, &EvalConfig::default()).unwrap();
        prop_assert!(report.is_monotone());
        prop_assert_eq!(report.trajectory.len(), 40);
        for k in [1, 5, 10] {
            let mut last = 0.0;
            for d in [100.0, 150.0, 250.0, 500.0] {
                let r = report.recall(k, d).unwrap();
                prop_assert!(r >= last);
                last = r;
            }
        }
    }
}

fn filtered_fixture() -> (EmbeddingIndex, Vec<(String, Vec<f32>)>, Vec<QueryGroundTruth>) {
    // three tiles within 200 m of the truth at the origin, five beyond it;
    // the far tiles are the best cosine matches
    let near = [(50.0, 0.0), (0.0, 120.0), (-150.0, -100.0)];
    let far = [(400.0, 0.0), (0.0, 900.0), (-700.0, 0.0), (1000.0, 1000.0), (0.0, -250.0)];
    let mut records = Vec::new();
    for (i, &(e, n)) in near.iter().enumerate() {
        records.push(EmbeddingRecord {
            tile_id: i as u64,
            center: Point::new(e, n),
            vector: vec![1.0, 0.2 * (i + 1) as f32],
        });
    }
    for (i, &(e, n)) in far.iter().enumerate() {
        records.push(EmbeddingRecord {
            tile_id: 10 + i as u64,
            center: Point::new(e, n),
            vector: vec![1.0, 0.01 * i as f32],
        });
    }
    let index = EmbeddingIndex::new(records, meta()).unwrap();
    let queries = vec![("q".to_string(), vec![1.0, 0.0])];
    let truth = vec![truth("q", 0.0, 0.0, 400.0, 0.0)];
    (index, queries, truth)
}

#[test]
fn restricted_radius_ranks_only_nearby_tiles() {
    let (index, queries, truth) = filtered_fixture();
    let cfg = EvalConfig::default();
    let (results, report) = restricted_radius_eval(&queries, &truth, &index, 200.0, Metric::Cosine, &cfg).unwrap();
    let ids: Vec<u64> = results[0].ranked.iter().map(|s| s.0).collect();
    assert_eq!(ids, [0, 1, 2]);
    assert_eq!(report.recall(1, 100.0), Some(100.0));

    let unrestricted: Vec<RetrievalResult> = queries.iter().map(|(id, v)| rank(id, v, &index, 10, Metric::Cosine).unwrap()).collect();
    let plain = evaluate(&unrestricted, &truth, &index, &cfg).unwrap();
    assert_eq!(plain.recall(1, 100.0), Some(0.0));
    for c in &report.recall {
        assert!(c.recall >= plain.recall(c.k, c.d).unwrap());
    }

    let (all, inf) = restricted_radius_eval(&queries, &truth, &index, f64::INFINITY, Metric::Cosine, &cfg).unwrap();
    assert_eq!(all, unrestricted);
    assert_eq!(inf, plain);

    // nothing within 10 m: scored as a failure
    let (none, tiny) = restricted_radius_eval(&queries, &truth, &index, 10.0, Metric::Cosine, &cfg).unwrap();
    assert!(none[0].ranked.is_empty());
    assert!(tiny.recall.iter().all(|c| c.recall == 0.0));

    assert!(restricted_radius_eval(&queries, &truth, &index, 0.0, Metric::Cosine, &cfg).is_err());
}

#[test]
fn restricted_recall_never_below_unrestricted() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let records: Vec<EmbeddingRecord> = (0..80)
        .map(|i| EmbeddingRecord {
            tile_id: i,
            center: Point::new(rng.random_range(0.0..3000.0), rng.random_range(0.0..3000.0)),
            vector: (0..8).map(|_| rng.random_range(-1.0f32..1.0)).collect(),
        })
        .collect();
    let index = EmbeddingIndex::new(records, meta()).unwrap();
    let queries: Vec<(String, Vec<f32>)> = (0..50)
        .map(|q| (format!("q{q}"), (0..8).map(|_| rng.random_range(-1.0f32..1.0)).collect()))
        .collect();
    let truth: Vec<QueryGroundTruth> = (0..50)
        .map(|q| truth(&format!("q{q}"), rng.random_range(0.0..3000.0), rng.random_range(0.0..3000.0), 400.0, q as f64))
        .collect();
    let cfg = EvalConfig::default();
    let plain: Vec<RetrievalResult> = queries.iter().map(|(id, v)| rank(id, v, &index, 10, Metric::Cosine).unwrap()).collect();
    let plain = evaluate(&plain, &truth, &index, &cfg).unwrap();
    let (_, restricted) = restricted_radius_eval(&queries, &truth, &index, 1000.0, Metric::Cosine, &cfg).unwrap();
    for c in &restricted.recall {
        assert!(c.recall >= plain.recall(c.k, c.d).unwrap(), "{c:?}");
    }
}

#[test]
fn report_files_round_trip() {
    let (index, results, truth) = six_query_fixture();
    let dir = tempfile::tempdir().unwrap();

    let one = EvalConfig {
        ks: vec![1],
        thresholds: vec![100.0],
        run_length_ks: vec![1],
        altitude_floors: vec![],
        curve: vec![100.0],
    };
    let report = evaluate(&results, &truth, &index, &one).unwrap();
    let files = emit_report(&report, &dir.path().join("one")).unwrap();
    assert_eq!(std::fs::read_to_string(&files.recall).unwrap().lines().count(), 2);

    let report = evaluate(&results, &truth, &index, &EvalConfig::default()).unwrap();
    let files = emit_report(&report, dir.path()).unwrap();
    assert_eq!(read_recall_csv(&files.recall).unwrap(), report.recall);
    let traj = std::fs::read_to_string(&files.trajectory).unwrap();
    assert_eq!(traj.lines().count(), 1 + results.len());
    assert_eq!(traj.lines().next().unwrap(), "query_id,true_e,true_n,correct@100,correct@150,correct@250,correct@500");
    let curve = std::fs::read_to_string(&files.curve).unwrap();
    assert_eq!(curve.lines().count(), 1 + 50);
    let back: EvalReport = serde_json::from_slice(&std::fs::read(&files.report).unwrap()).unwrap();
    assert_eq!(back, report);
    let runs: Vec<serde_json::Value> = serde_json::from_slice(&std::fs::read(&files.run_lengths).unwrap()).unwrap();
    assert_eq!(runs.len(), 8);
}

#[test]
fn truth_csv_round_trip() {
    let (_, _, truth) = six_query_fixture();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("truth.csv");
    write_truth_csv(&path, &truth).unwrap();
    assert_eq!(read_truth_csv(&path).unwrap(), truth);
}

#[test]
fn identity_jitter_leaves_pixels_alone() {
    let mut rng = common::rng(1);
    let img = refloc::image::RgbImage::from_fn(16, 16, |_, _| [rng.random(), rng.random(), rng.random()]);
    assert_eq!(color_jitter(&img, 1.0, 1.0, 1.0, 0.0), img);
    let shifted = color_jitter(&img, 1.0, 1.0, 1.0, 1.0);
    for (a, b) in shifted.pixels().iter().zip(img.pixels()) {
        for c in 0..3 {
            assert!((a[c] - b[c]).abs() < 1e-5);
        }
    }
}

#[test]
fn sweep_identity_level_reproduces_baseline() {
    let config = ModelConfig::small();
    let tiles = common::synth_tiles(24, 3);
    let ckpt = common::random_checkpoint(&config, 5, Stage::Finetuned);
    let model = EmbeddingModel::from_checkpoint(&ckpt, common::input_spec(&config)).unwrap();
    let index = build_index(&tiles, &model, "").unwrap();
    // queries are rotated copies of some tiles
    let mut rng = common::rng(2);
    let picks: Vec<_> = tiles.iter().step_by(3).collect();
    let images: Vec<_> = picks.iter().map(|t| t.image.to_gray().rotate(rng.random_range(-20.0..20.0))).collect();
    let refs: Vec<_> = images.iter().collect();
    let vectors = model.embed(&refs).unwrap();
    let queries: Vec<(String, Vec<f32>)> = picks.iter().zip(vectors).map(|(t, v)| (format!("q{}", t.tile_id), v)).collect();
    let truth: Vec<QueryGroundTruth> = picks
        .iter()
        .enumerate()
        .map(|(i, t)| truth(&format!("q{}", t.tile_id), t.center.e, t.center.n, 400.0, i as f64))
        .collect();
    let baseline: Vec<RetrievalResult> = queries.iter().map(|(id, v)| rank(id, v, &index, 1, Metric::Cosine).unwrap()).collect();
    let baseline = recall_at_k(&baseline, &truth, &index, 1, 48.0).unwrap();

    for kind in [Perturbation::Rotation, Perturbation::CenterCrop, Perturbation::ColorJitter] {
        let levels = kind.default_levels();
        let rows = perturbation_sweep(&tiles, &model, &queries, &truth, kind, &levels[..2], 3, 48.0, 9).unwrap();
        assert_eq!(rows[0].mean, baseline, "{kind:?}");
        assert_eq!(rows[0].std, 0.0);
        assert_eq!(rows[0].runs.len(), 3);
        if kind == Perturbation::CenterCrop {
            assert_eq!(rows[1].std, 0.0);
        }
        assert!(rows.iter().all(|r| (0.0..=100.0).contains(&r.mean)));
    }
    assert!(perturbation_sweep(&tiles, &model, &queries, &truth, Perturbation::Rotation, &[0.0], 0, 48.0, 9).is_err());
}
