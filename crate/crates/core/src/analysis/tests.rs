use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::*;
use crate::decoder::DecoderConfig;
use crate::model::ModelConfig;
use crate::object_encoder::ObjectEncoderConfig;
use crate::prompt::Vocabulary;
use crate::training::{generate_corpus, CorpusSpec};

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn clustered(classes: usize, per: usize, d: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<String>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centres: Vec<Vec<f64>> = (0..classes).map(|_| (0..d).map(|_| 3.0 * gaussian(&mut rng)).collect()).collect();
    let mut v = Vec::new();
    let mut l = Vec::new();
    for (c, centre) in centres.iter().enumerate() {
        for _ in 0..per {
            v.push(centre.iter().map(|x| x + 0.5 * gaussian(&mut rng)).collect());
            l.push(format!("c{c}"));
        }
    }
    (v, l)
}

/// Top-2 projections from a dense symmetric eigensolver.
fn dense_projections(vectors: &[Vec<f64>]) -> (Vec<[f64; 2]>, [f64; 2]) {
    let n = vectors.len();
    let d = vectors[0].len();
    let x = DMatrix::from_fn(n, d, |i, j| vectors[i][j]);
    let mean = x.row_mean();
    let xc = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
    let cov = xc.transpose() * &xc / n as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let cols: Vec<Vec<f64>> = order[..2].iter().map(|&c| eig.eigenvectors.column(c).iter().copied().collect()).collect();
    let proj = (0..n)
        .map(|i| {
            let row: Vec<f64> = (0..d).map(|j| xc[(i, j)]).collect();
            [dot(&row, &cols[0]), dot(&row, &cols[1])]
        })
        .collect();
    (proj, [eig.eigenvalues[order[0]], eig.eigenvalues[order[1]]])
}

#[test]
fn pca_matches_dense_eigensolver_up_to_sign() {
    for (seed, d) in [(1u64, 8usize), (2, 32), (3, 64)] {
        let (v, l) = clustered(5, 40, d, seed);
        let r = pca_top2(&v, &l).unwrap();
        let (proj, vals) = dense_projections(&v);
        for c in 0..2 {
            assert!((r.eigenvalues[c] - vals[c]).abs() <= 1e-6 * vals[c].max(1.0));
            let same = proj.iter().zip(&r.projections).map(|(a, b)| (a[c] - b[c]).abs()).fold(0.0, f64::max);
            let flip = proj.iter().zip(&r.projections).map(|(a, b)| (a[c] + b[c]).abs()).fold(0.0, f64::max);
            assert!(same.min(flip) <= 1e-6, "d={d} component {c}: {same} / {flip}");
        }
    }
}

#[test]
fn components_are_orthonormal() {
    let (v, l) = clustered(4, 30, 16, 9);
    let r = pca_top2(&v, &l).unwrap();
    assert!(dot(&r.components[0], &r.components[1]).abs() <= 1e-8);
    for c in &r.components {
        assert!((dot(c, c) - 1.0).abs() <= 1e-12);
    }
    assert!(r.mean_intra_cosine > r.mean_inter_cosine);
    assert!(r.eigenvalues[0] >= r.eigenvalues[1]);
}

#[test]
fn collinear_points_are_degenerate() {
    let v: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, 2.0 * i as f64, -(i as f64)]).collect();
    let l = vec!["a".to_string(); 10];
    assert!(matches!(pca_top2(&v, &l), Err(Error::DegenerateSpectrum(_))));
}

#[test]
fn pca_input_validation() {
    let l = vec!["a".to_string(); 3];
    assert!(pca_top2(&[vec![1.0, 2.0], vec![0.0, 1.0]], &l[..2]).is_err());
    assert!(pca_top2(&[vec![1.0], vec![0.0], vec![2.0]], &l).is_err());
    assert!(pca_top2(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]], &l[..2]).is_err());
}

#[test]
fn isotropic_cloud_explains_two_over_d() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let d = 8;
    let v: Vec<Vec<f64>> = (0..20_000).map(|_| (0..d).map(|_| gaussian(&mut rng)).collect()).collect();
    let l = vec!["x".to_string(); v.len()];
    let r = pca_top2(&v, &l).unwrap();
    let share = r.explained[0] + r.explained[1];
    // Sampling inflates the top eigenvalues by about 2·sqrt(d/N).
    assert!((share - 2.0 / d as f64).abs() < 0.02, "share {share}");
}

fn tiny_model() -> OliveModel {
    let mut decoder = DecoderConfig::new(0);
    decoder.width = 16;
    decoder.layers = 2;
    decoder.heads = 2;
    decoder.max_len = 64;
    let cfg = ModelConfig {
        encoder: ObjectEncoderConfig {
            grid_n: 4,
            feat_dim: 8,
            width: 16,
            heads: 2,
            mlp_ratio: 2,
            layers: 1,
            out_dim: 16,
        },
        decoder,
        lora: None,
    };
    OliveModel::init(cfg, Vocabulary::standard(&[], &[]), 0).unwrap()
}

#[test]
fn probes_read_object_position() {
    let corpus = generate_corpus(&CorpusSpec {
        classes: 2,
        objects_per_class: 1,
        n: 4,
        dim: 8,
        ..Default::default()
    })
    .unwrap();
    let m = tiny_model();
    let a = &corpus.annotations[0];
    let g = &corpus.features[&a.image_id];
    let mask = a.mask().unwrap();
    let obj = object_representation(&m, g, &mask, Probe::ObjectVector).unwrap();
    assert_eq!(obj.len(), 16);
    let l0 = object_representation(&m, g, &mask, Probe::DecoderLayer(0)).unwrap();
    let prompt = m.generative_prompt(g, &mask, CLASSIFY, None).unwrap();
    let pos_id = m.store.require("decoder.pos").unwrap();
    let pos = m.store.get(pos_id).row(1 + prompt.slots()[0]);
    for ((a, b), p) in l0.iter().zip(&obj).zip(pos) {
        assert!((a - (b + *p as f64)).abs() < 1e-6);
    }
    assert_eq!(object_representation(&m, g, &mask, Probe::DecoderLayer(2)).unwrap().len(), 16);
    assert!(object_representation(&m, g, &mask, Probe::DecoderLayer(3)).is_err());
    assert_eq!(
        default_probes(4),
        vec![Probe::ObjectVector, Probe::DecoderLayer(0), Probe::DecoderLayer(2), Probe::DecoderLayer(3)]
    );
    assert_eq!(default_probes(1), vec![Probe::ObjectVector, Probe::DecoderLayer(0)]);
}

fn sweep_corpus() -> crate::training::Corpus {
    generate_corpus(&CorpusSpec {
        classes: 3,
        objects_per_class: 12,
        n: 4,
        dim: 8,
        noise_sigma: 0.05,
        ..Default::default()
    })
    .unwrap()
}

#[test]
fn duplicates_in_the_set_give_perfect_top1() {
    let c = sweep_corpus();
    let spec = SweepSpec { sizes: vec![12], ks: vec![1] };
    let cells = sweep_retrieval(&spec, &c.annotations, &c.annotations, &c.features, 0).unwrap();
    assert_eq!(cells, vec![SweepCell { size: 12, k: 1, accuracy: 1.0 }]);
}

#[test]
fn sweep_grid_shape_and_exports() {
    let c = sweep_corpus();
    let (queries, pool) = c.annotations.split_at(6);
    let spec = SweepSpec { sizes: vec![1, 2], ks: vec![1, 3] };
    let cells = sweep_retrieval(&spec, pool, queries, &c.features, 1).unwrap();
    assert_eq!(cells.iter().map(|c| (c.size, c.k)).collect::<Vec<_>>(), vec![(1, 1), (1, 3), (2, 1), (2, 3)]);
    assert_eq!(cells, sweep_retrieval(&spec, pool, queries, &c.features, 1).unwrap());
    let best = best_over_k(&cells);
    assert_eq!(best.len(), 2);
    assert_eq!(best[0].1, cells[0].accuracy.max(cells[1].accuracy));
    assert_eq!(sweep_csv(&cells).lines().count(), 5);
    assert!(sweep_plot_data(&cells).lines().nth(1).unwrap().ends_with(",k=1"));
    let too_big = SweepSpec { sizes: vec![100], ks: vec![1] };
    assert!(matches!(sweep_retrieval(&too_big, pool, queries, &c.features, 1), Err(Error::Config(_))));
    assert!(sweep_retrieval(&SweepSpec { sizes: vec![], ks: vec![1] }, pool, queries, &c.features, 1).is_err());
}

#[test]
fn voting_over_everything_returns_the_majority_class() {
    let c = sweep_corpus();
    let labels = &c.domain.labels;
    let mut pool: Vec<Annotation> = c.annotations.iter().filter(|a| a.label == labels[0]).take(5).cloned().collect();
    pool.extend(c.annotations.iter().filter(|a| a.label == labels[1]).take(3).cloned());
    let index = build_index(&pool, &c.features).unwrap();
    for q in c.annotations.iter().filter(|a| a.label == labels[2]) {
        let (label, _) =
            predict_retrieval(&index, &c.features[&q.image_id], &q.mask().unwrap(), pool.len(), &BTreeSet::new()).unwrap();
        assert_eq!(&label, &labels[0]);
    }
}
