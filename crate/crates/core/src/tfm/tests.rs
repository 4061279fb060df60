use approx::assert_relative_eq;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::tensor::check_gradients;

/// The fixed sentence used for every unlabeled sample.
const FIXED_TEXT: &str = "Camouflaged objects; hidden objects; concealed objects";

fn arch() -> TfmArch {
    TfmArch {
        text_dim: 8,
        head_dim: 8,
        feature_widths: vec![4, 6, 8],
    }
}

#[test]
fn embed_is_deterministic_and_unit_norm() {
    let e = TextEmbedder::hashed(32, 42);
    let a = e.embed("a frog camouflaged against mossy background").unwrap();
    let b = e.embed("a frog camouflaged against mossy background").unwrap();
    assert_eq!(a, b);
    let n: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    assert_relative_eq!(n, 1.0, epsilon = 1e-9);
    // Different seeds give different vectors.
    let c = TextEmbedder::hashed(32, 43).embed("frog").unwrap();
    assert_ne!(c, e.embed("frog").unwrap());
}

#[test]
fn fixed_sentence_reproduces_across_embedder_instances() {
    let a = TextEmbedder::hashed(32, 7).embed(FIXED_TEXT).unwrap();
    let b = TextEmbedder::hashed(32, 7).embed(FIXED_TEXT).unwrap();
    assert_eq!(a, b);
}

#[test]
fn table_mode_lookup_and_missing_key() {
    let json = r#"{"frog": [3.0, 4.0], "moth": [1.0, 0.0]}"#;
    let e = TextEmbedder::from_table_json(json).unwrap();
    let v = e.embed("frog").unwrap();
    assert_relative_eq!(v[0], 0.6, epsilon = 1e-12);
    assert_relative_eq!(v[1], 0.8, epsilon = 1e-12);
    assert!(matches!(e.embed("newt"), Err(Error::UnknownText(_))));
}

#[test]
fn embed_rejects_empty_text() {
    assert!(TextEmbedder::hashed(8, 0).embed("").is_err());
}

#[test]
fn clue_attention_singleton_and_symmetry() {
    let tfm = TfmModule::new(arch(), 3);
    let g = Graph::new();
    let b = tfm.bind(&g, false);

    // One position: the softmax is forced to [1] and the clue query is
    // exactly that position's value projection.
    let f1 = g.constant(vec![0.3, -0.2, 0.5, 0.1, 0.0, 0.7, -0.4, 0.2], &[1, 8]);
    let (a, clue) = tfm.clue_attention(&b, &f1).unwrap();
    assert_eq!(a.value(), vec![1.0]);
    let v = f1.matmul(tfm.tensor(&b, "clue.wv")).unwrap();
    for (c, v) in clue.value().iter().zip(v.value()) {
        assert_relative_eq!(*c, v, epsilon = 1e-12);
    }

    // Two identical positions split the attention evenly.
    let row = vec![0.3, -0.2, 0.5, 0.1, 0.0, 0.7, -0.4, 0.2];
    let mut two = row.clone();
    two.extend(&row);
    let f2 = g.constant(two, &[2, 8]);
    let (a, _) = tfm.clue_attention(&b, &f2).unwrap();
    assert_relative_eq!(a.value()[0], 0.5, epsilon = 1e-12);
    assert_relative_eq!(a.value()[1], 0.5, epsilon = 1e-12);
}

#[test]
fn clue_attention_matches_scalar_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let tfm = TfmModule::new(arch(), 5);
    let g = Graph::new();
    let b = tfm.bind(&g, false);
    let p = 16;
    let d = 8;
    let feat: Vec<f64> = (0..p * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let ft = g.constant(feat.clone(), &[p, d]);
    let (a, clue) = tfm.clue_attention(&b, &ft).unwrap();

    // Independent scalar-loop attention.
    let q0 = tfm.params.get(tfm.params.index_of("clue.q").unwrap()).data.clone();
    let wq = tfm.params.get(tfm.params.index_of("clue.wq").unwrap()).data.clone();
    let wk = tfm.params.get(tfm.params.index_of("clue.wk").unwrap()).data.clone();
    let wv = tfm.params.get(tfm.params.index_of("clue.wv").unwrap()).data.clone();
    let dh = 8usize;
    let mut q = vec![0.0; dh];
    for j in 0..dh {
        for i in 0..dh {
            q[j] += q0[i] * wq[i * dh + j];
        }
    }
    let mut scores = vec![0.0; p];
    for pos in 0..p {
        let mut k = vec![0.0; dh];
        for j in 0..dh {
            for i in 0..d {
                k[j] += feat[pos * d + i] * wk[i * dh + j];
            }
        }
        scores[pos] = q.iter().zip(&k).map(|(a, b)| a * b).sum::<f64>() / (dh as f64).sqrt();
    }
    let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
    let z: f64 = exps.iter().sum();
    let attn: Vec<f64> = exps.iter().map(|e| e / z).collect();
    let mut clue_o = vec![0.0; dh];
    for pos in 0..p {
        for j in 0..dh {
            let mut vj = 0.0;
            for i in 0..d {
                vj += feat[pos * d + i] * wv[i * dh + j];
            }
            clue_o[j] += attn[pos] * vj;
        }
    }
    for (x, y) in a.value().iter().zip(&attn) {
        assert_relative_eq!(*x, y, epsilon = 1e-9);
    }
    for (x, y) in clue.value().iter().zip(&clue_o) {
        assert_relative_eq!(*x, y, epsilon = 1e-9);
    }
}

#[test]
fn attention_rows_always_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let tfm = TfmModule::new(arch(), 7);
    for _ in 0..5 {
        let g = Graph::new();
        let b = tfm.bind(&g, false);
        let feat: Vec<f64> = (0..16 * 8).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let ft = g.constant(feat, &[16, 8]);
        let (a, _) = tfm.clue_attention(&b, &ft).unwrap();
        let s: f64 = a.value().iter().sum();
        assert_relative_eq!(s, 1.0, epsilon = 1e-6);
        assert!(a.value().iter().all(|&v| v > 0.0 && v < 1.0));
    }
}

#[test]
fn attn_loss_concentrated_attention_near_floor() {
    let g = Graph::new();
    let a = g.constant(vec![10.0, 0.0, 0.0, 0.0], &[1, 4]).softmax(1).unwrap();
    let target = g.constant(vec![1.0, 0.0, 0.0, 0.0], &[1, 4]);
    let l = attn_supervision_loss(&a, &target, AttnLossVariant::MaxRescaled)
        .unwrap()
        .scalar_value();
    assert!(l < 0.1, "loss {l}");
}

#[test]
fn attn_loss_uniform_attention_matches_loop_oracle() {
    let g = Graph::new();
    let a = g.constant(vec![0.25; 4], &[1, 4]);
    let target = g.constant(vec![0.5; 4], &[1, 4]);
    let got = attn_supervision_loss(&a, &target, AttnLossVariant::MaxRescaled)
        .unwrap()
        .scalar_value();
    // Rescaled attention is all ones -> clamped to 1 - eps.
    let p: f64 = 1.0 - 1e-7;
    let want = -(0.5 * p.ln() + 0.5 * (1.0 - p).ln());
    assert_relative_eq!(got, want, epsilon = 1e-9);
}

#[test]
fn attn_loss_invariant_to_positive_rescale() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let g = Graph::new();
    let vals: Vec<f64> = (0..6).map(|_| rng.gen_range(0.01..0.3)).collect();
    let target = g.constant(
        (0..6).map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).collect(),
        &[1, 6],
    );
    let a = g.constant(vals.clone(), &[1, 6]);
    let a7 = g.constant(vals.iter().map(|v| 7.0 * v).collect(), &[1, 6]);
    let l1 = attn_supervision_loss(&a, &target, AttnLossVariant::MaxRescaled).unwrap();
    let l2 = attn_supervision_loss(&a7, &target, AttnLossVariant::MaxRescaled).unwrap();
    assert_relative_eq!(l1.scalar_value(), l2.scalar_value(), epsilon = 1e-12);
}

fn orthonormal_codebook(g: &Graph, k: usize, d: usize) -> Vec<Tensor> {
    (0..k)
        .map(|i| {
            let mut v = vec![0.0; d];
            v[i] = 1.0;
            g.constant(v, &[d])
        })
        .collect()
}

#[test]
fn codebook_similarity_orthonormal_and_scale_invariance() {
    let g = Graph::new();
    let entries = orthonormal_codebook(&g, 3, 8);
    let mut qv = vec![0.0; 8];
    qv[0] = 1.0;
    let q = g.constant(qv.clone(), &[1, 8]);
    let s = codebook_similarity(&q, &entries).unwrap();
    let w = s.as_vector().unwrap().value();
    assert_relative_eq!(w[0], 1.0, epsilon = 1e-12);
    assert_relative_eq!(w[1], 0.0, epsilon = 1e-12);
    assert_relative_eq!(w[2], 0.0, epsilon = 1e-12);

    let q7 = g.constant(qv.iter().map(|v| 7.0 * v).collect(), &[1, 8]);
    let s7 = codebook_similarity(&q7, &entries).unwrap();
    for (a, b) in s.as_vector().unwrap().value().iter().zip(s7.as_vector().unwrap().value()) {
        assert_relative_eq!(*a, b, epsilon = 1e-12);
    }
}

#[test]
fn codebook_similarity_matches_loop_oracle_and_rejects_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let g = Graph::new();
    let d = 8;
    let entries: Vec<Vec<f64>> = (0..4)
        .map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    let ets: Vec<Tensor> = entries.iter().map(|e| g.constant(e.clone(), &[d])).collect();
    let qv: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let q = g.constant(qv.clone(), &[1, d]);
    let s = codebook_similarity(&q, &ets).unwrap();
    let qn: f64 = qv.iter().map(|v| v * v).sum::<f64>().sqrt();
    for (w, e) in s.weights.iter().zip(&entries) {
        let dot: f64 = qv.iter().zip(e).map(|(a, b)| a * b).sum();
        let en: f64 = e.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert_relative_eq!(w.scalar_value(), dot / (qn * en), epsilon = 1e-12);
        assert!(w.scalar_value().abs() <= 1.0 + 1e-12);
    }

    let zero = g.constant(vec![0.0; d], &[1, d]);
    assert!(matches!(
        codebook_similarity(&zero, &ets),
        Err(Error::UndefinedSimilarity)
    ));
}

#[test]
fn clue_vector_identities_and_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let g = Graph::new();
    let entries = orthonormal_codebook(&g, 3, 6);

    // W = (1, 0, 0) reproduces the first entry.
    let w1 = CodebookScores {
        weights: vec![g.scalar(1.0), g.scalar(0.0), g.scalar(0.0)],
    };
    let v = clue_vector(&w1, &entries).unwrap();
    assert_eq!(v.shape(), &[1, 6]);
    assert_eq!(v.value()[0], 1.0);
    assert!(v.value()[1..].iter().all(|&x| x == 0.0));

    // All-zero weights give the zero vector.
    let w0 = CodebookScores {
        weights: vec![g.scalar(0.0), g.scalar(0.0), g.scalar(0.0)],
    };
    assert!(clue_vector(&w0, &entries).unwrap().value().iter().all(|&x| x == 0.0));

    // Random case equals the loop sum.
    let raw: Vec<Vec<f64>> = (0..3)
        .map(|_| (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    let ets: Vec<Tensor> = raw.iter().map(|e| g.constant(e.clone(), &[6])).collect();
    let wv: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let ws = CodebookScores {
        weights: wv.iter().map(|&w| g.scalar(w)).collect(),
    };
    let got = clue_vector(&ws, &ets).unwrap().value();
    for j in 0..6 {
        let want: f64 = (0..3).map(|k| wv[k] * raw[k][j]).sum();
        assert_relative_eq!(got[j], want, epsilon = 1e-12);
    }
}

#[test]
fn retrieval_identity_through_similarity_then_aggregation() {
    // With an orthonormal codebook and Q_CLUE equal to one entry, the
    // similarity-weighted aggregation returns exactly that entry.
    let g = Graph::new();
    let entries = orthonormal_codebook(&g, 4, 8);
    let q = g.constant(entries[2].value(), &[1, 8]);
    let s = codebook_similarity(&q, &entries).unwrap();
    let v = clue_vector(&s, &entries).unwrap();
    for (a, b) in v.value().iter().zip(entries[2].value()) {
        assert_relative_eq!(*a, b, epsilon = 1e-12);
    }
}

#[test]
fn clue_loss_zero_at_target_and_gradients_reach_codebook() {
    let e = TextEmbedder::hashed(8, 1);
    let g = Graph::new();
    let emb = e.embed("frog").unwrap();
    let v = g.constant(emb.clone(), &[1, 8]);
    assert_eq!(clue_loss(&v, "frog", &e).unwrap().scalar_value(), 0.0);

    // Gradient w.r.t. codebook entries through similarity+aggregation.
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let entry_a: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let entry_b: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let qv: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let emb2 = e.embed("moth").unwrap();
    let report = check_gradients(
        move |leaves| {
            let g = leaves[0].graph.clone();
            let q = g.constant(qv.clone(), &[1, 8]);
            let entries = vec![leaves[0].clone(), leaves[1].clone()];
            let s = codebook_similarity(&q, &entries)?;
            let v = clue_vector(&s, &entries)?;
            let target = g.constant(emb2.clone(), &[1, 8]);
            crate::tensor::loss_mse(&v, &target)
        },
        &[(vec![8], entry_a), (vec![8], entry_b)],
        1e-5,
        1e-4,
    )
    .unwrap();
    assert!(report.passed(), "max rel err {}", report.max_rel_err);
}

#[test]
fn fuse_preserves_shapes_and_zero_value_projection_is_inert() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut tfm = TfmModule::new(arch(), 13);
    let g = Graph::new();
    let feats: Vec<Tensor> = [(4usize, 8usize), (6, 4), (8, 2)]
        .iter()
        .map(|&(c, n)| {
            g.constant(
                (0..c * n * n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                &[c, n, n],
            )
        })
        .collect();
    let text = g.constant((0..8).map(|_| rng.gen_range(-1.0..1.0)).collect(), &[1, 8]);
    let vclue = g.constant((0..8).map(|_| rng.gen_range(-1.0..1.0)).collect(), &[1, 8]);
    let b = tfm.bind(&g, false);
    let fused = tfm.fuse(&b, &text, &vclue, &feats).unwrap();
    for (f, o) in fused.iter().zip(&feats) {
        assert_eq!(f.shape(), o.shape());
    }

    // Zero value projections turn the attention delta off entirely:
    // fusion reduces to the residual identity.
    for k in 0..3 {
        let wi = tfm.params.index_of(&format!("fuse{k}.wv")).unwrap();
        tfm.params.get_mut(wi).data.fill(0.0);
    }
    let g2 = Graph::new();
    let feats2: Vec<Tensor> = feats
        .iter()
        .map(|f| g2.constant(f.value(), f.shape()))
        .collect();
    let text2 = g2.constant(vec![0.0; 8], &[1, 8]);
    let vclue2 = g2.constant(vec![0.0; 8], &[1, 8]);
    let b2 = tfm.bind(&g2, false);
    let fused2 = tfm.fuse(&b2, &text2, &vclue2, &feats2).unwrap();
    for (f, o) in fused2.iter().zip(&feats2) {
        for (a, b) in f.value().iter().zip(o.value()) {
            assert_relative_eq!(*a, b, epsilon = 1e-12);
        }
    }
}

#[test]
fn fuse_single_constant_token_gives_position_independent_delta() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let tfm = TfmModule::new(
        TfmArch {
            text_dim: 8,
            head_dim: 8,
            feature_widths: vec![4],
        },
        15,
    );
    let g = Graph::new();
    let c = 4;
    let n = 4;
    let feat = g.constant(
        (0..c * n * n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        &[c, n, n],
    );
    let tok: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
    // Text token and clue vector identical: the token stack has two
    // equal rows, so attention over tokens is uniform and the attended
    // value is the same for every image position.
    let text = g.constant(tok.clone(), &[1, 8]);
    let vclue = g.constant(tok.clone(), &[1, 8]);
    let b = tfm.bind(&g, false);
    let fused = tfm.fuse(&b, &text, &vclue, &[feat.clone()]).unwrap();
    let delta: Vec<f64> = fused[0]
        .value()
        .iter()
        .zip(feat.value())
        .map(|(a, b)| a - b)
        .collect();

    // Scalar oracle: value row = tok*wv, projected by wo.
    let wv = tfm.params.get(tfm.params.index_of("fuse0.wv").unwrap()).data.clone();
    let wo = tfm.params.get(tfm.params.index_of("fuse0.wo").unwrap()).data.clone();
    let dh = 8;
    let mut val = vec![0.0; dh];
    for j in 0..dh {
        for i in 0..8 {
            val[j] += tok[i] * wv[i * dh + j];
        }
    }
    let mut proj = vec![0.0; c];
    for j in 0..c {
        for i in 0..dh {
            proj[j] += val[i] * wo[i * c + j];
        }
    }
    // Delta layout is [c, n, n]: per channel a constant plane.
    for ch in 0..c {
        for p in 0..n * n {
            assert_relative_eq!(delta[ch * n * n + p], proj[ch], epsilon = 1e-9);
        }
    }
}

#[test]
fn tfm_loss_gating() {
    let g = Graph::new();
    let attn = g.scalar(0.7);
    let clue = g.scalar(0.2);
    assert_eq!(tfm_loss(&attn, None, 0.0).unwrap().scalar_value(), 0.7);
    assert_relative_eq!(
        tfm_loss(&attn, Some(&clue), 1.0).unwrap().scalar_value(),
        0.9,
        epsilon = 1e-15
    );
    assert!(tfm_loss(&attn, None, 1.0).is_err());
    assert!(tfm_loss(&attn, Some(&clue), 0.5).is_err());
}

#[test]
fn init_codebook_dedup_and_determinism() {
    let e = TextEmbedder::hashed(16, 5);
    let cb = Codebook::init(["frog", "frog", "moth"], &e).unwrap();
    assert_eq!(cb.len(), 2);
    assert_eq!(cb.words(), &["frog".to_string(), "moth".to_string()]);
    for i in 0..cb.len() {
        let n: f64 = cb.params.get(i).data.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert_relative_eq!(n, 1.0, epsilon = 1e-9);
    }
    let cb2 = Codebook::init(["moth", "frog"], &e).unwrap();
    assert_eq!(cb.params.digest(), cb2.params.digest());

    assert!(matches!(
        Codebook::init(std::iter::empty(), &e),
        Err(Error::EmptyLabeledSet)
    ));
}

#[test]
fn codebook_json_roundtrip_and_extension() {
    let e = TextEmbedder::hashed(8, 5);
    let mut cb = Codebook::init(["frog", "moth"], &e).unwrap();
    let json = cb.to_json();
    let back = Codebook::from_json(&json).unwrap();
    assert_eq!(back.params.digest(), cb.params.digest());

    let added = cb.extend_with(["newt", "frog"], &e).unwrap();
    assert_eq!(added, 1);
    assert_eq!(cb.words(), &["frog", "moth", "newt"]);
}

#[test]
fn full_fusion_path_passes_gradient_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let a = TfmArch {
        text_dim: 4,
        head_dim: 4,
        feature_widths: vec![3],
    };
    let tfm = TfmModule::new(a, 17);
    let inputs: Vec<(Vec<usize>, Vec<f64>)> = tfm
        .params
        .iter()
        .map(|p| (p.shape.clone(), p.data.clone()))
        .collect();
    let feat: Vec<f64> = (0..3 * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let text: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let target: Vec<f64> = (0..4).map(|_| if rng.gen_bool(0.4) { 1.0 } else { 0.0 }).collect();
    let arch2 = tfm.arch.clone();
    let report = check_gradients(
        move |leaves| {
            let g = leaves[0].graph.clone();
            // Fresh module with the same declaration order; the binding
            // points the names at the check's leaf tensors.
            let module = TfmModule::new(arch2.clone(), 17);
            let b = Binding {
                tensors: leaves.to_vec(),
                trainable: true,
            };
            // Top feature has 2x2 spatial extent flattened to 4 positions.
            let f = g.constant(feat.clone(), &[3, 2, 2]);
            let pc = f.reshape(&[3, 4])?.transpose()?;
            let (a_map, clue) = module.clue_attention(&b, &pc)?;
            let t = g.constant(target.clone(), &[1, 4]);
            let attn = attn_supervision_loss(&a_map, &t, AttnLossVariant::MaxRescaled)?;
            let text_t = g.constant(text.clone(), &[1, 4]);
            let fused = module.fuse(&b, &text_t, &clue, &[f.clone()])?;
            let total = attn.add(&fused[0].tanh().mean())?;
            Ok(total)
        },
        &inputs,
        1e-5,
        1e-3,
    )
    .unwrap();
    assert!(report.passed(), "max rel err {}", report.max_rel_err);
}
