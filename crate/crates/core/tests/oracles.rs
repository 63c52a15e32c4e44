mod common;

use common::*;
use gbert::data::generate_tree;
use gbert::eval::{average_precision, visit_f1, visit_jaccard};
use gbert::finetune::{finetune_loss, predict_visit};
use gbert::model::{GBert, ModelConfig};
use gbert::numerics::{Graph, Tensor};
use gbert::ontology::{CodeType, PatientRecord, Visit};
use gbert::pretrain::multilabel_bce;
use gbert::visit_encoder::VisitInput;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small() -> ModelConfig {
    ModelConfig { embed_dim: 5, gat_heads: 2, hidden: 6, ffn: 7, layers: 2, enc_heads: 3, mlp_hidden: 4, ..Default::default() }
}

#[test]
fn ontology_embedding_matches_loops_on_random_trees() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for trial in 0..10 {
        let dx = random_tree(CodeType::Diagnosis, rng.gen_range(1..30), &mut rng);
        let rx = random_tree(CodeType::Medication, rng.gen_range(1..30), &mut rng);
        let model = GBert::<f64>::new(small(), &dx, &rx, trial).unwrap();
        for tree in [&dx, &rx] {
            let got = model.leaf_embeddings(tree.code_type()).unwrap();
            let want = leaf_rows(&model, tree);
            for (g, w) in got.iter().flatten().zip(want.iter().flatten()) {
                assert!((g - w).abs() < 1e-12, "{g} vs {w}");
            }
        }
    }
}

#[test]
fn encoder_matches_loops() {
    let dx = generate_tree(CodeType::Diagnosis, 9, 3).unwrap();
    let rx = generate_tree(CodeType::Medication, 5, 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for graph in [true, false] {
        let model = GBert::<f64>::new(ModelConfig { use_graph: graph, ..small() }, &dx, &rx, 4).unwrap();
        let leaves = leaf_rows(&model, &dx);
        let visits: Vec<Vec<usize>> = (0..6).map(|_| random_set(&mut rng, 9, 5)).collect();
        let inputs: Vec<VisitInput> = visits.iter().map(|v| VisitInput::from_codes(CodeType::Diagnosis, v, None)).collect();
        let mut g = Graph::new();
        let tables = model.code_tables(&mut g).unwrap();
        let enc = model.encoder.encode(&mut g, &model.store, tables, &inputs).unwrap();
        let out = g.value(enc.visits);
        for (i, v) in visits.iter().enumerate() {
            let mut sorted = v.clone();
            sorted.sort();
            let want = visit_oracle(&model, &leaves, &sorted);
            for (a, b) in out.row_slice(i).iter().zip(&want) {
                assert!((a - b).abs() < 1e-10, "{a} vs {b}");
            }
        }
    }
}

#[test]
fn recommendation_matches_straight_line_evaluation() {
    let dx = generate_tree(CodeType::Diagnosis, 10, 2).unwrap();
    let rx = generate_tree(CodeType::Medication, 6, 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for seed in 0..5 {
        let model = GBert::<f64>::new(small(), &dx, &rx, seed).unwrap();
        let visits: Vec<Visit> = (0..4).map(|_| Visit::new(random_set(&mut rng, 10, 4), random_set(&mut rng, 6, 3))).collect();
        let visits: Vec<Visit> =
            visits.into_iter().map(|v| if v.dx.is_empty() { Visit::new(vec![0], v.rx) } else { v }).collect();
        let record = PatientRecord { pid: "x".into(), visits: visits.clone() };
        let dxs: Vec<Vec<usize>> = visits.iter().map(|v| v.dx.clone()).collect();
        let rxs: Vec<Vec<usize>> = visits.iter().map(|v| v.rx.clone()).collect();
        for t in 2..=4 {
            let got = predict_visit(&model, &record, t).unwrap();
            let want = recommend_oracle(&model, &dx, &rx, &dxs, &rxs, t);
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12, "t={t}: {a} vs {b}");
            }
        }
        // Fine-tuning loss: mean over t = 2..T of the summed BCE.
        let mut g = Graph::new();
        let l = finetune_loss(&model, &mut g, &[&record]).unwrap();
        let want: f64 = (2..=4)
            .map(|t| {
                let p = recommend_oracle(&model, &dx, &rx, &dxs, &rxs, t);
                let logits: Vec<f64> = p.iter().map(|p| (p / (1.0 - p)).ln()).collect();
                bce_oracle(&logits, &rxs[t - 1])
            })
            .sum::<f64>()
            / 3.0;
        assert!((g.value(l).item() - want).abs() < 1e-9);
    }
}

#[test]
fn bce_matches_scalar_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..50 {
        let v = rng.gen_range(1..20);
        let logits: Vec<f64> = (0..v).map(|_| rng.gen_range(-8.0..8.0)).collect();
        let set = random_set(&mut rng, v, v);
        let mut g = Graph::<f64>::new();
        let z = g.constant(Tensor::from_f64(1, v, &logits));
        let l = multilabel_bce(&mut g, z, &[&set]).unwrap();
        assert!((g.value(l).item() - bce_oracle(&logits, &set)).abs() < 1e-12);
    }
}

#[test]
fn metrics_match_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..200 {
        let t = random_set(&mut rng, 15, 8);
        let p = random_set(&mut rng, 15, 8);
        assert_eq!(visit_jaccard(&t, &p), jaccard_oracle(&t, &p));
        assert!((visit_f1(&t, &p) - f1_oracle(&t, &p)).abs() < 1e-12);
        // Coarse probabilities force ties.
        let probs: Vec<f64> = (0..15).map(|_| rng.gen_range(0..6) as f64 / 5.0).collect();
        match (average_precision(&t, &probs), ap_oracle(&t, &probs)) {
            (Some(a), Some(b)) => assert!((a - b).abs() < 1e-12, "{a} vs {b}"),
            (a, b) => assert_eq!(a, b),
        }
    }
}
