//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use refloc::losses::MatchPair;
use refloc::preprocess::{Affine2, PhotometricParams, ViewTransform};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn plain_transform(affine: Affine2) -> ViewTransform {
    ViewTransform {
        affine,
        photometric: PhotometricParams {
            brightness: 1.0,
            contrast: 1.0,
            noise_sigma: 0.0,
            blur_applied: false,
            vignette_applied: false,
        },
    }
}

/// Scaled rotation plus translation with random parameters.
pub fn random_affine(r: &mut ChaCha8Rng) -> Affine2 {
    let k: f64 = r.random_range(0.5..2.0);
    let th: f64 = r.random_range(-1.0..1.0);
    let (s, c) = th.sin_cos();
    Affine2([
        [k * c, -k * s, r.random_range(-20.0..20.0)],
        [k * s, k * c, r.random_range(-20.0..20.0)],
    ])
}

/// All-pairs table, then per-source minimum by lexicographic (distance,
/// target) order, then the global (distance, source) order.
pub fn brute_matches(n: usize, gamma: usize, dist: impl Fn(usize, usize) -> f64) -> Vec<MatchPair> {
    let mut table: Vec<(usize, usize, f64)> = Vec::with_capacity(n * n);
    for p in 0..n {
        for q in 0..n {
            table.push((p, q, dist(p, q)));
        }
    }
    let mut best: Vec<MatchPair> = Vec::new();
    for p in 0..n {
        let mut row: Vec<&(usize, usize, f64)> = table.iter().filter(|e| e.0 == p).collect();
        row.sort_by(|a, b| a.2.partial_cmp(&b.2).unwrap().then(a.1.cmp(&b.1)));
        let e = row[0];
        best.push(MatchPair {
            p: e.0,
            q: e.1,
            distance: e.2,
        });
    }
    best.sort_by(|a, b| a.distance.partial_cmp(&b.distance).unwrap().then(a.p.cmp(&b.p)));
    best.truncate(gamma);
    best
}

pub fn brute_location(ta: &Affine2, tb: &Affine2, h: usize, w: usize, view: usize, gamma: usize) -> Vec<MatchPair> {
    let center = |i: usize| {
        let (r, c) = (i / w, i % w);
        (
            (c as f64 + 0.5) * view as f64 / w as f64,
            (r as f64 + 0.5) * view as f64 / h as f64,
        )
    };
    brute_matches(h * w, gamma, |p, q| {
        let (xa, ya) = center(p);
        let (xb, yb) = center(q);
        let a = ta.apply(xa, ya);
        let b = tb.apply(xb, yb);
        (a.0 - b.0).hypot(a.1 - b.1)
    })
}

pub fn brute_feature(z: &[f64], z2: &[f64], dim: usize, gamma: usize) -> Vec<MatchPair> {
    let n = z.len() / dim;
    let mut out = brute_matches(n, gamma, |p, q| {
        let mut s = 0.0;
        for k in 0..dim {
            let d = z[p * dim + k] - z2[q * dim + k];
            s += d * d;
        }
        s
    });
    for m in &mut out {
        m.distance = m.distance.sqrt();
    }
    out
}

/// Term-by-term loop evaluation of the VICReg criterion.
pub fn brute_vicreg(z: &[Vec<f64>], z2: &[Vec<f64>], lambda: f64, mu: f64, nu: f64) -> f64 {
    let n = z.len();
    let d = z[0].len();
    let mut inv = 0.0;
    for i in 0..n {
        for k in 0..d {
            inv += (z[i][k] - z2[i][k]).powi(2);
        }
    }
    inv /= (n * d) as f64;
    let branch = |x: &[Vec<f64>]| -> (f64, f64) {
        let mean: Vec<f64> = (0..d).map(|k| x.iter().map(|r| r[k]).sum::<f64>() / n as f64).collect();
        let mut hinge = 0.0;
        for k in 0..d {
            let var = x.iter().map(|r| (r[k] - mean[k]).powi(2)).sum::<f64>() / (n as f64 - 1.0);
            hinge += (1.0 - (var + 1e-4).sqrt()).max(0.0);
        }
        hinge /= d as f64;
        let mut off = 0.0;
        for a in 0..d {
            for b in 0..d {
                if a != b {
                    let c = x.iter().map(|r| (r[a] - mean[a]) * (r[b] - mean[b])).sum::<f64>() / (n as f64 - 1.0);
                    off += c * c;
                }
            }
        }
        (hinge, off / d as f64)
    };
    let (ha, ca) = branch(z);
    let (hb, cb) = branch(z2);
    lambda * inv + mu * (ha + hb) / 2.0 + nu * (ca + cb)
}

pub fn to_rows(t: &Tensor) -> Vec<Vec<f64>> {
    t.to_dtype(DType::F64).unwrap().to_vec2::<f64>().unwrap()
}

pub fn randn(shape: &[usize], r: &mut ChaCha8Rng, scale: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0) * scale).collect();
    Tensor::from_vec(data, shape, &Device::Cpu).unwrap()
}

/// Largest elementwise relative gap between the autograd gradient of `f` at
/// `x0` and central differences with step `h`.
pub fn gradient_gap(x0: &Tensor, h: f64, f: impl Fn(&Tensor) -> Tensor) -> f64 {
    let var = Var::from_tensor(x0).unwrap();
    let y = f(var.as_tensor());
    let grads = y.backward().unwrap();
    let analytic: Vec<f64> = grads
        .get(var.as_tensor())
        .map(|g| g.flatten_all().unwrap().to_vec1::<f64>().unwrap())
        .unwrap_or_else(|| vec![0.0; x0.elem_count()]);
    let base = x0.flatten_all().unwrap().to_vec1::<f64>().unwrap();
    let shape = x0.dims().to_vec();
    let eval = |v: Vec<f64>| -> f64 {
        let t = Tensor::from_vec(v, shape.as_slice(), &Device::Cpu).unwrap();
        f(&t).to_scalar::<f64>().unwrap()
    };
    let mut worst: f64 = 0.0;
    for i in 0..base.len() {
        let mut up = base.clone();
        up[i] += h;
        let mut dn = base.clone();
        dn[i] -= h;
        let numeric = (eval(up) - eval(dn)) / (2.0 * h);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-6);
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    worst
}

/// Identical index pairs in identical order; distances equal up to rounding.
pub fn same_pairs(a: &[MatchPair], b: &[MatchPair]) -> bool {
    a.len() == b.len()
        && a.iter().zip(b).all(|(x, y)| {
            x.p == y.p && x.q == y.q && (x.distance - y.distance).abs() <= 1e-9 * (1.0 + y.distance.abs())
        })
}

/// Reference tiles of a small synthetic corpus, in database order.
pub fn synth_tiles(n_tiles: usize, seed: u64) -> Vec<refloc::geodata::ReferenceTile> {
    let cfg = refloc::synth::SynthConfig {
        seed,
        n_tiles: n_tiles.max(10),
        n_queries: 4,
        ..Default::default()
    };
    let corpus = refloc::synth::generate_synthetic_corpus(&cfg).unwrap();
    let mut tiles = refloc::geodata::build_reference_db(&corpus.raster, &corpus.trajectory, &cfg.db_params()).unwrap();
    tiles.truncate(n_tiles);
    tiles
}

/// An untrained encoder wrapped as a checkpoint of the given stage.
pub fn random_checkpoint(config: &refloc::model::ModelConfig, seed: u64, stage: refloc::model::Stage) -> refloc::model::Checkpoint {
    use refloc::model::{Checkpoint, CheckpointMeta, Encoder, Init, VarStore};
    let vs = VarStore::new(DType::F32, Device::Cpu);
    Encoder::new(config, &vs, &mut Init::new(seed)).unwrap();
    let mut ckpt = Checkpoint::new(CheckpointMeta {
        stage,
        config: config.clone(),
        seed,
        epoch: 0,
        extra: serde_json::Value::Null,
    });
    ckpt.add_store(&vs, |_| true).unwrap();
    ckpt
}

pub fn input_spec(config: &refloc::model::ModelConfig) -> refloc::retrieval::InputSpec {
    refloc::retrieval::InputSpec {
        size: config.input_size,
        edges: true,
        canny: Default::default(),
    }
}
