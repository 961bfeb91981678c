//! Weakly-supervised relation recognition: a fully-connected instance graph,
//! an edge classifier with fixed-statistics normalisation and residual
//! blocks, and max-pooling from edges to image-level relation scores.

mod graph;
mod model;

pub use graph::{appearance_features, build_graph, spatial_features, Edge, InstanceGraph, Node, EDGE_DIM, SPATIAL_DIM};
pub use model::{
    aggregate_edges, bn_fixed, invocations, predict_relations, relation_f1, relation_targets, residual_block,
    select_relations, train_relations, BnStats, GnnConfig, GnnTraining, RelationModel, RelationPrediction,
    RelationSet, RelationTrainer, CHECKPOINT_KIND, DEFAULT_THRESHOLD,
};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::ImageLevelLabels;
    use crate::mask::Mask;
    use crate::nn::{max_gradient_error, Graph, Linear, ParamSet, Tensor};
    use crate::wsor::{FeatureMaps, Instance};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn feature_maps(rng: &mut ChaCha8Rng) -> FeatureMaps {
        let scales = [(2, 16), (3, 8), (3, 4), (4, 2)]
            .iter()
            .map(|&(c, s)| Tensor::uniform(&[c, s, s], 1.0, rng))
            .collect();
        FeatureMaps { scales }
    }

    fn rect(y0: usize, x0: usize, h: usize, w: usize) -> Mask {
        let mut m = Mask::empty(16, 16);
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                m.set(y, x, true);
            }
        }
        m
    }

    fn instances(rng: &mut ChaCha8Rng, n: usize) -> Vec<Instance> {
        (0..n)
            .map(|k| {
                let (h, w) = (rng.gen_range(1..6), rng.gen_range(1..6));
                let (y, x) = (rng.gen_range(0..16 - h), rng.gen_range(0..16 - w));
                Instance { category: k % 3, mask: rect(y, x, h, w), score: 0.9 }
            })
            .collect()
    }

    fn small_config() -> GnnConfig {
        GnnConfig { node_dim: 4, edge_dim: 3, hidden: 5, blocks: 2, ..GnnConfig::new(12, 2) }
    }

    #[test]
    fn graph_edge_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = feature_maps(&mut rng);
        for n in 0..5 {
            let g = build_graph(&instances(&mut rng, n), &f).unwrap();
            assert_eq!(g.nodes.len(), n);
            assert_eq!(g.edges.len(), n * n.saturating_sub(1));
            assert!(g.edges.iter().all(|e| e.from != e.to && e.features.len() == EDGE_DIM));
            assert!(g.nodes.iter().all(|v| v.appearance.len() == 12 && v.spatial.iter().all(|s| (0.0..=1.0).contains(s))));
        }
    }

    #[test]
    fn full_mask_spatial_features() {
        let s = spatial_features(&Mask::full(16, 16)).unwrap();
        assert_eq!(s, vec![0.5, 0.5, 1.0, 0.0, 0.0, 1.0, 1.0]);
        assert!(spatial_features(&Mask::empty(4, 4)).is_none());
    }

    #[test]
    fn tiny_mask_appearance_uses_centroid_cell() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = feature_maps(&mut rng);
        let a = appearance_features(&rect(13, 13, 1, 1), &f);
        let coarse = &f.scales[3];
        // cell (1, 1) of every channel of the 2×2 map
        assert_eq!(a[8..12], [3, 7, 11, 15].map(|i| coarse.data()[i]));
    }

    #[test]
    fn bn_fixed_fixtures() {
        assert_eq!(bn_fixed(&[1.0, 2.0, 3.0], &[2.0; 3], &[1.0; 3]).unwrap(), vec![-1.0, 0.0, 1.0]);
        assert_eq!(bn_fixed(&[0.3, -4.0], &[0.3, -4.0], &[2.0, 0.5]).unwrap(), vec![0.0, 0.0]);
        assert!(bn_fixed(&[1.0], &[0.0], &[0.0]).is_err());
        assert!(bn_fixed(&[1.0, 2.0], &[0.0], &[1.0]).is_err());
    }

    #[test]
    fn residual_fixtures() {
        let p = ParamSet::new();
        let mut g = Graph::new(&p);
        let h = g.input(Tensor::vector(vec![1.5, -2.0, 0.25]));
        let zero = residual_block(&mut g, h, |g, x| g.scale(x, 0.0)).unwrap();
        assert_eq!(g.value(zero).data(), g.value(h).data());
        let twice = residual_block(&mut g, h, |_, x| x).unwrap();
        assert_eq!(g.value(twice).data(), &[3.0, -4.0, 0.5]);
        assert!(residual_block(&mut g, h, |g, x| g.slice(x, 0, 2)).is_err());
    }

    #[test]
    fn residual_matches_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = ParamSet::new();
        let lin = Linear::new(&mut p, "l", 6, 6, &mut rng);
        let x: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut g = Graph::new(&p);
        let h = g.input(Tensor::vector(x.clone()));
        let out = residual_block(&mut g, h, |g, v| {
            let z = lin.forward(g, v);
            g.gelu(z)
        })
        .unwrap();
        let (w, b) = (p.get(lin.w).data(), p.get(lin.b).data());
        for i in 0..6 {
            let z: f64 = b[i] + (0..6).map(|j| w[i * 6 + j] * x[j]).sum::<f64>();
            let gelu = 0.5 * z * (1.0 + (0.797_884_560_802_865_4 * (z + 0.044715 * z * z * z)).tanh());
            assert!((g.value(out).data()[i] - (gelu + x[i])).abs() < 1e-7);
        }
    }

    #[test]
    fn empty_graph_has_no_logits_and_zero_scores() {
        let m = RelationModel::new(small_config(), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f = feature_maps(&mut rng);
        for n in 0..2 {
            let g = build_graph(&instances(&mut rng, n), &f).unwrap();
            assert!(m.edge_logits(&g).unwrap().is_empty());
            assert_eq!(m.image_scores(&g).unwrap(), vec![0.0, 0.0]);
            assert!(m.loss_and_grads(&g, &[1.0, 0.0]).is_none());
        }
    }

    #[test]
    fn node_permutation_permutes_edges_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = feature_maps(&mut rng);
        let mut m = RelationModel::new(small_config(), 2).unwrap();
        let inst = instances(&mut rng, 4);
        let base = build_graph(&inst, &f).unwrap();
        m.warm_up(&[&base]).unwrap();
        let logits = m.edge_logits(&base).unwrap();
        let perm = [2usize, 0, 3, 1];
        let shuffled: Vec<Instance> = perm.iter().map(|&k| inst[k].clone()).collect();
        let pg = build_graph(&shuffled, &f).unwrap();
        let pl = m.edge_logits(&pg).unwrap();
        for (e, l) in pg.edges.iter().zip(&pl) {
            let (i, j) = (perm[e.from], perm[e.to]);
            let k = base.edges.iter().position(|b| b.from == i && b.to == j).unwrap();
            assert_eq!(l, &logits[k]);
        }
    }

    #[test]
    fn gnn_gradcheck_two_nodes() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let f = feature_maps(&mut rng);
        let g2 = build_graph(&instances(&mut rng, 2), &f).unwrap();
        for cfg in [small_config(), small_config().plain()] {
            let mut m = RelationModel::new(cfg, 3).unwrap();
            m.warm_up(&[&g2]).unwrap();
            let y = [1.0, 0.0];
            let (_, grads) = m.loss_and_grads(&g2, &y).unwrap();
            let err = max_gradient_error(&m.params, &grads, &|p| {
                let mm = RelationModel { params: p.clone(), ..m.clone() };
                mm.mean_loss(&[(&g2, &y)])
            });
            assert!(err < 1e-4, "max relative error {err}");
        }
    }

    #[test]
    fn aggregation_fixtures() {
        assert_eq!(aggregate_edges(&[vec![0.8, 0.2]], 1), vec![0.8]);
        let two = aggregate_edges(&[vec![0.1, 0.6, 0.3], vec![0.5, 0.2, 0.3]], 2);
        assert_eq!(two, vec![0.5, 0.6]);
        assert_eq!(aggregate_edges(&[], 3), vec![0.0; 3]);
    }

    #[test]
    fn selection_rule() {
        let s = select_relations(&[0.9, 0.6], 0.7);
        assert_eq!(s, vec![RelationPrediction { relation: 0, score: 0.9 }]);
        assert!(select_relations(&[0.7, 0.2], 0.7).is_empty());
        let order: Vec<usize> = select_relations(&[0.75, 0.99, 0.8], 0.7).iter().map(|p| p.relation).collect();
        assert_eq!(order, vec![1, 2, 0]);
    }

    #[test]
    fn f1_fixtures() {
        let s = |v: &[usize]| v.iter().copied().collect::<std::collections::BTreeSet<_>>();
        assert_eq!(relation_f1(&[s(&[0]), s(&[1])], &[s(&[0]), s(&[1])]), 1.0);
        assert_eq!(relation_f1(&[s(&[])], &[s(&[])]), 1.0);
        assert!((relation_f1(&[s(&[0, 1])], &[s(&[0])]) - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(relation_f1(&[s(&[1])], &[s(&[0])]), 0.0);
    }

    fn toy_set(seed: u64, n: usize) -> (Vec<InstanceGraph>, Vec<ImageLevelLabels>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = feature_maps(&mut rng);
        (0..n)
            .map(|_| {
                let k = rng.gen_range(1..4);
                let inst = instances(&mut rng, k);
                let mut labels = ImageLevelLabels::default();
                // relation 0: some pair with the first left of the second
                let left = inst.iter().any(|a| inst.iter().any(|b| a.mask.bbox().unwrap().x1 < b.mask.bbox().unwrap().x0));
                if left {
                    labels.relations.insert(0);
                }
                (build_graph(&inst, &f).unwrap(), labels)
            })
            .unzip()
    }

    #[test]
    fn one_step_lowers_loss_and_training_is_deterministic() {
        let (graphs, labels) = toy_set(7, 12);
        let mut m = RelationModel::new(small_config(), 1).unwrap();
        let refs: Vec<&InstanceGraph> = graphs.iter().collect();
        m.warm_up(&refs).unwrap();
        let targets: Vec<Vec<f64>> = labels.iter().map(|l| relation_targets(l, 2)).collect();
        let batch: Vec<(&InstanceGraph, &[f64])> = graphs.iter().zip(&targets).map(|(g, t)| (g, t.as_slice())).collect();
        let before = m.mean_loss(&batch);
        let mut t = RelationTrainer::new(m, 1e-3);
        t.step(&batch).unwrap();
        assert!(t.model.mean_loss(&batch) < before);

        let tr = GnnTraining { epochs: 3, lr: 1e-3, batch_size: 4, seed: 9 };
        let (a, _) = train_relations(&graphs, &labels, small_config(), &tr).unwrap();
        let (b, _) = train_relations(&graphs, &labels, small_config(), &tr).unwrap();
        assert_eq!(a.params.checksum(), b.params.checksum());
        assert_eq!(a.stats, b.stats);
        let big = GnnTraining { batch_size: 1000, ..tr };
        assert!(train_relations(&graphs, &labels, small_config(), &big).is_ok());
        assert!(matches!(train_relations(&[], &[], small_config(), &big), Err(crate::Error::Config(_))));
    }

    #[test]
    fn warm_up_fixes_statistics_and_checkpoint_round_trips() {
        let (graphs, labels) = toy_set(8, 10);
        let tr = GnnTraining { epochs: 1, lr: 1e-3, batch_size: 4, seed: 1 };
        let (m, _) = train_relations(&graphs, &labels, small_config(), &tr).unwrap();
        assert!(m.stats.iter().all(|s| s.var.iter().all(|&v| v > 0.0)));
        assert_ne!(m.stats[0], BnStats::identity(m.stats[0].mean.len()));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.ckpt");
        m.to_checkpoint(1, "h").save(&path).unwrap();
        assert_eq!(RelationModel::load(&path).unwrap(), m);
        let (p, _) = train_relations(&graphs, &labels, small_config().plain(), &tr).unwrap();
        assert!(p.stats.iter().all(|s| *s == BnStats::identity(s.mean.len())));
    }

    proptest! {
        #[test]
        fn bn_matches_recomputation_and_is_affine(seed in 0u64..300) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.gen_range(1..8);
            let h: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let d: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let mean: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let var: Vec<f64> = (0..n).map(|_| rng.gen_range(0.1..4.0)).collect();
            let a = rng.gen_range(-3.0..3.0);
            let out = bn_fixed(&h, &mean, &var).unwrap();
            let p = ParamSet::new();
            let mut g = Graph::new(&p);
            let x = g.input(Tensor::vector(h.clone()));
            let y = g.bn_fixed(x, &mean, &var);
            for i in 0..n {
                prop_assert!((out[i] - (h[i] - mean[i]) / var[i].sqrt()).abs() < 1e-7);
                prop_assert!((out[i] - g.value(y).data()[i]).abs() < 1e-12);
            }
            // bn(h + a·d) − bn(h) = a·d / σ
            let moved: Vec<f64> = h.iter().zip(&d).map(|(x, d)| x + a * d).collect();
            let out2 = bn_fixed(&moved, &mean, &var).unwrap();
            for i in 0..n {
                prop_assert!((out2[i] - out[i] - a * d[i] / var[i].sqrt()).abs() < 1e-7);
            }
        }

        #[test]
        fn estimated_statistics_standardise_their_batch(seed in 0u64..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.gen_range(1..6);
            let rows: Vec<Vec<f64>> = (0..rng.gen_range(2..40))
                .map(|_| (0..n).map(|k| rng.gen_range(-3.0..3.0) * (k + 1) as f64 + k as f64).collect())
                .collect();
            let s = BnStats::estimate(&rows).unwrap();
            let normed: Vec<Vec<f64>> = rows.iter().map(|r| bn_fixed(r, &s.mean, &s.var).unwrap()).collect();
            let m = rows.len() as f64;
            for k in 0..n {
                let mean = normed.iter().map(|r| r[k]).sum::<f64>() / m;
                let var = normed.iter().map(|r| (r[k] - mean).powi(2)).sum::<f64>() / m;
                prop_assert!(mean.abs() < 1e-6);
                prop_assert!((var - 1.0).abs() < 1e-5);
            }
        }

        #[test]
        fn aggregation_is_monotone_and_matches_brute_force(seed in 0u64..300) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let r = rng.gen_range(1..5);
            let edges: Vec<Vec<f64>> = (0..rng.gen_range(0..7))
                .map(|_| (0..=r).map(|_| rng.gen_range(0.0..1.0)).collect())
                .collect();
            let agg = aggregate_edges(&edges, r);
            for c in 0..r {
                let brute = edges.iter().map(|e| e[c]).fold(0.0, f64::max);
                prop_assert_eq!(agg[c], brute);
            }
            let mut more = edges.clone();
            more.push((0..=r).map(|_| rng.gen_range(0.0..1.0)).collect());
            let grown = aggregate_edges(&more, r);
            prop_assert!(grown.iter().zip(&agg).all(|(g, a)| g >= a));
        }
    }
}
