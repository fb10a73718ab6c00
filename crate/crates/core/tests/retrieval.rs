mod common;

use proptest::prelude::*;
use rand::Rng;
use refloc::geodata::Point;
use refloc::model::{ModelConfig, Stage};
use refloc::retrieval::*;
use refloc::Error;

fn meta() -> IndexMetadata {
    IndexMetadata {
        checkpoint_hash: "c".repeat(64),
        config_hash: "f".repeat(64),
        crs_id: "LOCAL:test".into(),
        created: None,
    }
}

fn index_of(vectors: Vec<Vec<f32>>) -> EmbeddingIndex {
    let records = vectors
        .into_iter()
        .enumerate()
        .map(|(i, vector)| EmbeddingRecord {
            tile_id: i as u64,
            center: Point::new(i as f64 * 10.0, 0.0),
            vector,
        })
        .collect();
    EmbeddingIndex::new(records, meta()).unwrap()
}

/// Independent full sort: every score recomputed from scratch, then ordered
/// by (score descending, id ascending).
fn brute_force(query: &[f32], index: &EmbeddingIndex) -> Vec<(u64, f64)> {
    let sq = |v: &[f32]| v.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt();
    let mut all: Vec<(u64, f64)> = index
        .records()
        .map(|r| {
            let mut d = 0.0;
            for j in 0..query.len() {
                d += f64::from(query[j]) * f64::from(r.vector[j]);
            }
            let n = sq(query) * sq(r.vector);
            (r.tile_id, if n == 0.0 { 0.0 } else { (d / n).clamp(-1.0, 1.0) })
        })
        .collect();
    all.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    all
}

fn assert_ranked_invariants(r: &RetrievalResult) {
    for w in r.ranked.windows(2) {
        assert!(w[0].1 > w[1].1 || (w[0].1 == w[1].1 && w[0].0 < w[1].0), "{w:?}");
    }
    assert!(r.ranked.iter().all(|s| (-1.0..=1.0).contains(&s.1)));
}

#[test]
fn exhaustive_ranking_matches_brute_force_on_ten_thousand_vectors() {
    let mut rng = common::rng(11);
    let dim = 32;
    let mut vectors: Vec<Vec<f32>> = (0..10_000)
        .map(|_| (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect())
        .collect();
    // exact ties, broken by id
    for i in 0..200 {
        vectors[5000 + i] = vectors[i].clone();
    }
    let index = index_of(vectors.clone());
    for q in 0..100 {
        let query: Vec<f32> = if q % 4 == 0 {
            vectors[q].clone()
        } else {
            (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect()
        };
        let want = brute_force(&query, &index);
        let full = rank("q", &query, &index, index.len(), Metric::Cosine).unwrap();
        assert_eq!(full.ranked, want);
        assert_ranked_invariants(&full);
        let top = rank("q", &query, &index, 10, Metric::Cosine).unwrap();
        assert_eq!(top.ranked[..], want[..10]);
        assert_eq!(top.predicted_location, index.center_of(want[0].0));
    }
}

#[test]
fn two_hundred_record_index_matches_brute_force() {
    let mut rng = common::rng(12);
    let vectors: Vec<Vec<f32>> = (0..200)
        .map(|_| (0..16).map(|_| rng.random_range(-1.0f32..1.0)).collect())
        .collect();
    let index = index_of(vectors);
    let query: Vec<f32> = (0..16).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    assert_eq!(rank("q", &query, &index, 200, Metric::Cosine).unwrap().ranked, brute_force(&query, &index));
}

#[test]
fn dot_product_is_not_scale_invariant() {
    // a points along the query, b is off-axis but long
    let a = vec![1.0f32, 0.0];
    let b = vec![3.0f32, 3.0];
    let q = [1.0f32, 0.0];
    let index = index_of(vec![a.clone(), b.clone()]);
    let top = |m| rank("q", &q, &index, 1, m).unwrap().ranked[0].0;
    assert_eq!(top(Metric::Cosine), 0);
    assert_eq!(top(Metric::Dot), 1);

    // shrinking b flips the dot-product winner, cosine does not move
    let shrunk = index_of(vec![a, b.iter().map(|v| v * 0.1).collect()]);
    let top_s = |m| rank("q", &q, &shrunk, 1, m).unwrap().ranked[0].0;
    assert_eq!(top_s(Metric::Cosine), 0);
    assert_eq!(top_s(Metric::Dot), 0);
    assert_ne!(top(Metric::Dot), top_s(Metric::Dot));
}

#[test]
fn empty_index_and_bad_queries_are_rejected() {
    let empty = EmbeddingIndex::new(vec![], meta()).unwrap();
    assert!(matches!(rank("q", &[], &empty, 1, Metric::Cosine), Err(Error::InvalidInput(_))));
    let index = index_of(vec![vec![1.0, 0.0]]);
    assert!(rank("q", &[1.0, 0.0], &index, 0, Metric::Cosine).is_err());
    assert!(rank("q", &[1.0], &index, 1, Metric::Cosine).is_err());
    assert!(rank("q", &[f32::NAN, 0.0], &index, 1, Metric::Cosine).is_err());
}

#[test]
fn index_rejects_ragged_duplicate_or_non_finite_records() {
    let rec = |id, v: Vec<f32>| EmbeddingRecord {
        tile_id: id,
        center: Point::new(0.0, 0.0),
        vector: v,
    };
    assert!(EmbeddingIndex::new(vec![rec(0, vec![1.0]), rec(1, vec![1.0, 2.0])], meta()).is_err());
    assert!(EmbeddingIndex::new(vec![rec(0, vec![1.0]), rec(0, vec![2.0])], meta()).is_err());
    assert!(EmbeddingIndex::new(vec![rec(0, vec![f32::INFINITY])], meta()).is_err());
}

#[test]
fn index_file_round_trip_and_corruption() {
    let mut rng = common::rng(3);
    let index = index_of((0..50).map(|_| (0..8).map(|_| rng.random_range(-1.0f32..1.0)).collect()).collect());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("index.bin");
    index.save(&path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[..4], INDEX_MAGIC);
    assert_eq!(EmbeddingIndex::load(&path).unwrap(), index);

    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(EmbeddingIndex::from_bytes(&bad, &path).is_err());
    assert!(EmbeddingIndex::from_bytes(&bytes[..bytes.len() - 1], &path).is_err());
    let mut long = bytes.clone();
    long.push(0);
    assert!(EmbeddingIndex::from_bytes(&long, &path).is_err());
}

#[test]
fn built_index_is_deterministic_and_checked_at_query_time() {
    let config = ModelConfig::small();
    let tiles = common::synth_tiles(20, 5);
    let ckpt = common::random_checkpoint(&config, 1, Stage::Finetuned);
    let model = EmbeddingModel::from_checkpoint(&ckpt, common::input_spec(&config)).unwrap();
    let index = build_index(&tiles, &model, "LOCAL:test").unwrap();
    assert_eq!(index.len(), tiles.len());
    for (i, t) in tiles.iter().enumerate() {
        assert_eq!(index.record(i).tile_id, t.tile_id);
        assert_eq!(index.record(i).center, t.center);
    }
    assert_eq!(index.metadata().checkpoint_hash, model.checkpoint_hash());

    let again = build_index(&tiles, &EmbeddingModel::from_checkpoint(&ckpt, common::input_spec(&config)).unwrap(), "LOCAL:test").unwrap();
    assert_eq!(again.to_bytes().unwrap(), index.to_bytes().unwrap());

    // self-retrieval
    for t in tiles.iter().step_by(4) {
        let r = localize("q", &t.image.to_gray(), &index, &model, 5, Metric::Cosine).unwrap();
        assert_eq!(r.ranked[0].0, t.tile_id);
        assert!((r.ranked[0].1 - 1.0).abs() <= 1e-6, "{}", r.ranked[0].1);
        assert_eq!(r.predicted_location, Some(t.center));
        assert_ranked_invariants(&r);
    }

    // another encoder cannot query this index
    let other = common::random_checkpoint(&config, 2, Stage::Finetuned);
    let other = EmbeddingModel::from_checkpoint(&other, common::input_spec(&config)).unwrap();
    let q = tiles[0].image.to_gray();
    assert!(matches!(localize("q", &q, &index, &other, 1, Metric::Cosine), Err(Error::Config(_))));
    // nor can the same encoder with different preprocessing
    let mut spec = common::input_spec(&config);
    spec.edges = false;
    let raw = EmbeddingModel::from_checkpoint(&ckpt, spec).unwrap();
    assert!(matches!(localize("q", &q, &index, &raw, 1, Metric::Cosine), Err(Error::Config(_))));

    // train-state files and mismatched input sizes are refused
    let state = common::random_checkpoint(&config, 1, Stage::TrainState);
    assert!(EmbeddingModel::from_checkpoint(&state, common::input_spec(&config)).is_err());
    let mut wrong = common::input_spec(&config);
    wrong.size = 32;
    assert!(EmbeddingModel::from_checkpoint(&ckpt, wrong).is_err());
}

#[test]
fn full_size_encoder_indexes_a_thousand_tiles() {
    let config = ModelConfig::default();
    let tiles = common::synth_tiles(1000, 9);
    assert_eq!(tiles.len(), 1000);
    let ckpt = common::random_checkpoint(&config, 4, Stage::Finetuned);
    let model = EmbeddingModel::from_checkpoint(&ckpt, common::input_spec(&config)).unwrap();
    let index = build_index(&tiles, &model, "LOCAL:test").unwrap();
    assert_eq!((index.len(), index.dim()), (1000, 1024));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("index.bin");
    index.save(&path).unwrap();
    assert_eq!(EmbeddingIndex::load(&path).unwrap(), index);
}

#[test]
fn results_csv_round_trip() {
    let results = vec![
        RetrievalResult {
            query_id: "q00000".into(),
            ranked: vec![(4, 0.5), (2, 0.25)],
            predicted_location: Some(Point::new(1.5, -2.0)),
        },
        RetrievalResult {
            query_id: "q00001".into(),
            ranked: vec![(7, -0.125)],
            predicted_location: Some(Point::new(3.0, 4.0)),
        },
    ];
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("results.csv");
    write_results_csv(&path, &results).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().next().unwrap(), "query_id,rank,tile_id,score,pred_e,pred_n");
    assert_eq!(text.lines().count(), 4);
    assert_eq!(read_results_csv(&path).unwrap(), results);
}

#[test]
fn query_set_loads_sorted_pngs() {
    let dir = tempfile::tempdir().unwrap();
    let mut img = refloc::image::GrayImage::new(8, 8);
    img.set(1, 1, 1.0);
    for id in ["b", "a", "c"] {
        img.save_png(&dir.path().join(format!("{id}.png"))).unwrap();
    }
    std::fs::write(dir.path().join("notes.txt"), "x").unwrap();
    let set = QuerySet::load(dir.path()).unwrap();
    let ids: Vec<&str> = set.iter().map(|q| q.0).collect();
    assert_eq!(ids, ["a", "b", "c"]);
}

fn small_ints(dim: usize) -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec((-8i32..=8).prop_map(|v| v as f32), dim)
}

proptest! {
    #[test]
    fn cosine_is_symmetric(a in prop::collection::vec(-10.0f32..10.0, 1..64), seed in any::<u64>()) {
        let mut rng = common::rng(seed);
        let b: Vec<f32> = a.iter().map(|_| rng.random_range(-10.0f32..10.0)).collect();
        prop_assert!((cosine(&a, &b) - cosine(&b, &a)).abs() <= 1e-7);
        prop_assert!((-1.0..=1.0).contains(&cosine(&a, &b)));
    }

    #[test]
    fn cosine_ranking_ignores_positive_rescaling(
        vectors in prop::collection::vec(small_ints(6), 2..40),
        query in small_ints(6),
        exps in prop::collection::vec(-4i32..=4, 40),
        qexp in -4i32..=4,
    ) {
        let index = index_of(vectors.clone());
        let scaled = index_of(
            vectors.iter().zip(&exps).map(|(v, &e)| v.iter().map(|x| x * 2f32.powi(e)).collect()).collect(),
        );
        let q2: Vec<f32> = query.iter().map(|x| x * 2f32.powi(qexp)).collect();
        let ids = |r: RetrievalResult| r.ranked.into_iter().map(|s| s.0).collect::<Vec<_>>();
        let n = vectors.len();
        prop_assert_eq!(
            ids(rank("q", &query, &index, n, Metric::Cosine).unwrap()),
            ids(rank("q", &q2, &scaled, n, Metric::Cosine).unwrap())
        );
    }
}
