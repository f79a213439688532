use fenestra_core::dataset::{synth_corpus, SynthConfig};
use fenestra_core::grammar::{assemble_grammar, AssembleConfig, GrammarParams, WindowType};
use fenestra_core::inference::*;
use fenestra_core::procgen::{InstancePlacement, Transform};
use fenestra_core::train::{initial_checkpoint, BackboneSpec, Profile, TrainConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Probabilities with the given entries set and the rest spread evenly.
fn probs(set: &[(usize, f64)]) -> [f64; 9] {
    let used: f64 = set.iter().map(|(_, p)| p).sum();
    let rest = (1.0 - used) / (9 - set.len()) as f64;
    let mut p = [rest; 9];
    for &(i, v) in set {
        p[i] = v;
    }
    p
}

fn pred(set: &[(usize, f64)], params: [f64; 6]) -> WindowPrediction {
    WindowPrediction {
        probabilities: probs(set),
        params,
    }
}

const P: [f64; 6] = [10.0, 10.0, 50.0, 50.0, 8.0, 8.0];

#[test]
fn mode_of_member_argmaxes() {
    let members = [pred(&[(2, 0.6)], P), pred(&[(2, 0.5)], P), pred(&[(5, 0.9)], P)];
    assert_eq!(aggregate(&members).unwrap().0.index(), 2);
}

#[test]
fn params_are_averaged() {
    let members = [pred(&[(0, 0.9)], P), pred(&[(0, 0.9)], [12.0, 12.0, 52.0, 52.0, 10.0, 10.0])];
    let (_, p) = aggregate(&members).unwrap();
    assert_eq!(p.to_array(), [11.0, 11.0, 51.0, 51.0, 9.0, 9.0]);
}

#[test]
fn vote_ties_go_to_the_larger_summed_probability() {
    // Two votes each for classes 2 and 5; class 2 carries 1.3 in total, class 5 1.1.
    let members = [
        pred(&[(2, 0.5), (5, 0.1)], P),
        pred(&[(2, 0.5), (5, 0.1)], P),
        pred(&[(5, 0.45), (2, 0.15)], P),
        pred(&[(5, 0.45), (2, 0.15)], P),
    ];
    let sum = |c: usize| members.iter().map(|m| m.probabilities[c]).sum::<f64>();
    assert!((sum(2) - 1.3).abs() < 1e-12 && (sum(5) - 1.1).abs() < 1e-12);
    assert_eq!(aggregate(&members).unwrap().0.index(), 2);

    let flipped = [
        pred(&[(5, 0.5), (2, 0.1)], P),
        pred(&[(5, 0.5), (2, 0.1)], P),
        pred(&[(2, 0.45), (5, 0.15)], P),
        pred(&[(2, 0.45), (5, 0.15)], P),
    ];
    assert_eq!(aggregate(&flipped).unwrap().0.index(), 5);
}

#[test]
fn empty_cluster_is_rejected() {
    assert!(matches!(aggregate(&[]), Err(InferenceError::EmptyCluster)));
}

#[test]
fn grouped_grammar_is_assembled_from_the_aggregate() {
    let members = vec![pred(&[(4, 0.9)], P), pred(&[(4, 0.9)], [12.0, 12.0, 52.0, 52.0, 10.0, 10.0])];
    let g = group_predictions(members).unwrap();
    let want = assemble_grammar(WindowType::from_index(4).unwrap(), &g.params, &AssembleConfig::default()).unwrap();
    assert_eq!(g.grammar, want);
    assert_eq!(g.members.len(), 2);
}

/// 10 samples: seven labels ranked first, two second (one through an
/// index tie), one fifth.
fn topk_fixture() -> (Vec<[f64; 9]>, Vec<usize>) {
    let mut p = Vec::new();
    let mut l = Vec::new();
    for c in 0..7 {
        p.push(probs(&[(c, 0.6), ((c + 1) % 9, 0.2)]));
        l.push(c);
    }
    p.push(probs(&[(3, 0.5), (7, 0.3)]));
    l.push(7);
    // Equal probabilities: class 1 outranks class 6.
    p.push(probs(&[(1, 0.4), (6, 0.4)]));
    l.push(6);
    p.push([0.3, 0.25, 0.2, 0.1, 0.06, 0.04, 0.03, 0.01, 0.01]);
    l.push(4);
    (p, l)
}

#[test]
fn top_k_on_the_hand_counted_fixture() {
    let (p, l) = topk_fixture();
    assert_eq!(top_k_accuracy(&p, &l, 1).unwrap(), 0.7);
    assert_eq!(top_k_accuracy(&p, &l, 2).unwrap(), 0.9);
    assert_eq!(top_k_accuracy(&p, &l, 4).unwrap(), 0.9);
    assert_eq!(top_k_accuracy(&p, &l, 5).unwrap(), 1.0);
}

#[test]
fn top_k_extremes() {
    let labels: Vec<usize> = (0..27).map(|i| i % 9).collect();
    let perfect: Vec<[f64; 9]> = labels.iter().map(|&c| probs(&[(c, 1.0)])).collect();
    let uniform = vec![[1.0 / 9.0; 9]; labels.len()];
    for k in 1..=9 {
        assert_eq!(top_k_accuracy(&perfect, &labels, k).unwrap(), 1.0);
    }
    assert_eq!(top_k_accuracy(&uniform, &labels, 9).unwrap(), 1.0);
    // All tied: the lowest indices rank first.
    assert_eq!(top_k_accuracy(&uniform, &labels, 1).unwrap(), 3.0 / 27.0);
    assert_eq!(top_k_accuracy(&uniform, &labels, 3).unwrap(), 9.0 / 27.0);
}

#[test]
fn metric_shape_errors() {
    let (p, l) = topk_fixture();
    for k in [0, 10] {
        assert!(matches!(top_k_accuracy(&p, &l, k), Err(InferenceError::Shape(_))));
    }
    assert!(matches!(top_k_accuracy(&p, &l[..9], 1), Err(InferenceError::Shape(_))));
    assert!(matches!(top_k_accuracy(&p[..1], &[9], 1), Err(InferenceError::Shape(_))));
    assert!(matches!(mae_metric(&[P], &[]), Err(InferenceError::Shape(_))));
    assert!(matches!(mae_metric(&[], &[]), Err(InferenceError::Shape(_))));
}

#[test]
fn mae_sums_parameters_and_averages_samples() {
    assert_eq!(mae_metric(&[P, P], &[P, P]).unwrap(), 0.0);
    let off = P.map(|v| v + 1.0);
    assert_eq!(mae_metric(&[off], &[P]).unwrap(), 6.0);
    assert_eq!(mae_metric(&[off, P], &[P, P]).unwrap(), 3.0);
}

#[test]
fn mae_matches_a_column_wise_recomputation() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let n = 500;
    let a: Vec<[f64; 6]> = (0..n).map(|_| std::array::from_fn(|_| rng.random_range(0.0..64.0))).collect();
    let b: Vec<[f64; 6]> = (0..n).map(|_| std::array::from_fn(|_| rng.random_range(0.0..64.0))).collect();
    let mut per_param = [0.0f64; 6];
    for (x, y) in a.iter().zip(&b) {
        for k in 0..6 {
            per_param[k] += (x[k] - y[k]).abs() / n as f64;
        }
    }
    let oracle: f64 = per_param.iter().sum();
    assert!((mae_metric(&a, &b).unwrap() - oracle).abs() < 1e-12);
}

#[test]
fn evaluation_report_fields() {
    let (p, l) = topk_fixture();
    let preds: Vec<WindowPrediction> = p.iter().map(|&probabilities| WindowPrediction { probabilities, params: P }).collect();
    let r = evaluate(&preds, &l, &vec![P; 10]).unwrap();
    assert_eq!((r.top1, r.top2, r.mae, r.n), (0.7, 0.9, 0.0, 10));
    assert!(r.top3 >= r.top2);
    let json = serde_json::to_value(r).unwrap();
    let keys: Vec<&str> = json.as_object().unwrap().keys().map(String::as_str).collect();
    assert_eq!(keys, ["mae", "n", "top1", "top2", "top3"]);
}

#[test]
fn sanitizing_orders_corners_and_keeps_a_minimum_extent() {
    assert_eq!(sanitize_params([50.0, 60.0, 10.0, 5.0, 4.0, 4.0]), [10.0, 5.0, 50.0, 60.0, 4.0, 4.0]);
    assert_eq!(sanitize_params([-3.0, 70.0, 80.0, 20.0, 0.0, -1.0]), [0.0, 20.0, 64.0, 64.0, MIN_CELL, MIN_CELL]);
    let p = sanitize_params([30.0, 63.0, 30.0, 63.0, 5.0, 5.0]);
    assert_eq!(p[..4], [26.0, 56.0, 34.0, 64.0]);
    let p = sanitize_params([f64::NAN, 1.0, 2.0, 3.0, f64::INFINITY, 1.0]);
    assert!(GrammarParams::from_array(p).is_valid());
}

fn tiny_recognizer() -> (TrainConfig, Recognizer) {
    let cfg = TrainConfig {
        seed: 3,
        backbone: BackboneSpec {
            channels: [4, 4, 8, 8],
            feature_dim: 16,
            gen_channels: 8,
            z_dim: 8,
        },
        ..TrainConfig::profile(Profile::Desk)
    };
    let ck = initial_checkpoint(&cfg).unwrap();
    (cfg, Recognizer::new(&ck).unwrap())
}

#[test]
fn prediction_is_deterministic_normalized_and_batch_independent() {
    let (_, model) = tiny_recognizer();
    let corpus = synth_corpus(&SynthConfig {
        per_class: 8,
        unlabeled: 0,
        seed: 2,
        ..Default::default()
    })
    .unwrap();
    let patches: Vec<_> = corpus.labeled.iter().map(|s| s.image.clone()).collect();
    let batch = model.predict_batch(&patches).unwrap();
    assert_eq!(batch.len(), 72);
    for (patch, b) in patches.iter().zip(&batch) {
        let single = predict_patch(&model, patch).unwrap();
        assert_eq!(&single, b);
        assert_eq!(single, model.predict_patch(patch).unwrap());
        assert!((single.probabilities.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(single.probabilities.iter().all(|&p| p >= 0.0));
        assert!(single.grammar_params().is_valid());
        assert_eq!(single.top_k(3)[0], single.argmax());
    }
}

#[test]
fn singleton_cluster_equals_its_member() {
    let (_, model) = tiny_recognizer();
    let corpus = synth_corpus(&SynthConfig {
        per_class: 1,
        unlabeled: 0,
        seed: 4,
        ..Default::default()
    })
    .unwrap();
    let patch = corpus.labeled[3].image.clone();
    let single = model.predict_patch(&patch).unwrap();
    let g = grouped_inference(&model, &[patch]).unwrap();
    assert_eq!(g.window_type, single.window_type());
    assert_eq!(g.params.to_array(), single.params);
}

#[test]
fn a_pair_takes_parameters_from_the_regressor() {
    let (cfg, _) = tiny_recognizer();
    let a = initial_checkpoint(&cfg).unwrap();
    let b = initial_checkpoint(&TrainConfig { seed: 99, ..cfg }).unwrap();
    let patch = synth_corpus(&SynthConfig {
        per_class: 1,
        unlabeled: 0,
        seed: 1,
        ..Default::default()
    })
    .unwrap()
    .labeled[0]
        .image
        .clone();
    let pa = Recognizer::new(&a).unwrap().predict_patch(&patch).unwrap();
    let pb = Recognizer::new(&b).unwrap().predict_patch(&patch).unwrap();
    let pair = Recognizer::pair(&a, &b).unwrap().predict_patch(&patch).unwrap();
    assert_eq!(pair.probabilities, pa.probabilities);
    assert_eq!(pair.params, pb.params);

    let mut headless = a.clone();
    headless.store.remove_group(fenestra_nn::Group::LR);
    assert!(Recognizer::new(&headless).is_err());
    assert!(Recognizer::pair(&headless, &b).is_ok());
    assert!(Recognizer::pair(&b, &headless).is_err());
}

#[test]
fn symmetric_label_noise_favors_grouping() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for eps in [0.1, 0.3, 0.45] {
        let (mut member_hits, mut group_hits, clusters) = (0usize, 0usize, 4000);
        for _ in 0..clusters {
            let truth = rng.random_range(0..9);
            let members: Vec<WindowPrediction> = (0..5)
                .map(|_| {
                    let vote = if rng.random_bool(eps) {
                        (truth + rng.random_range(1..9)) % 9
                    } else {
                        truth
                    };
                    member_hits += (vote == truth) as usize;
                    pred(&[(vote, 0.5)], P)
                })
                .collect();
            group_hits += (aggregate(&members).unwrap().0.index() == truth) as usize;
        }
        let member = member_hits as f64 / (5 * clusters) as f64;
        let group = group_hits as f64 / clusters as f64;
        assert!(group >= member, "eps {eps}: grouped {group} vs member {member}");
    }
}

#[test]
fn cluster_records_are_checked() {
    let place = |id: &str| InstancePlacement {
        cluster_id: id.into(),
        transform: Transform::identity(),
    };
    let member = |b| MemberRef {
        facade_id: "f".into(),
        box_id: b,
    };
    let mut c = ClusterRecord {
        id: "c0".into(),
        members: vec![member(0), member(1)],
        placements: vec![place("c0"), place("c0")],
        grammar: None,
    };
    assert!(c.check().is_ok());
    c.placements.pop();
    assert!(c.check().is_err());
    c.placements.push(place("c1"));
    assert!(c.check().is_err());
    c.members.clear();
    c.placements.clear();
    assert!(c.check().is_err());
}

fn arb_prediction() -> impl Strategy<Value = WindowPrediction> {
    (prop::array::uniform9(0.01f64..1.0), prop::array::uniform6(0.0f64..64.0)).prop_map(|(w, params)| {
        let s: f64 = w.iter().sum();
        WindowPrediction {
            probabilities: w.map(|v| v / s),
            params,
        }
    })
}

proptest! {
    #[test]
    fn grouping_is_permutation_invariant(members in prop::collection::vec(arb_prediction(), 1..8), seed: u64) {
        let mut shuffled = members.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in (1..shuffled.len()).rev() {
            shuffled.swap(i, rng.random_range(0..=i));
        }
        let (ta, pa) = aggregate(&members).unwrap();
        let (tb, pb) = aggregate(&shuffled).unwrap();
        prop_assert_eq!(ta, tb);
        for (a, b) in pa.to_array().iter().zip(pb.to_array()) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn grouped_params_stay_in_the_member_hull(members in prop::collection::vec(arb_prediction(), 1..8)) {
        let (_, p) = aggregate(&members).unwrap();
        for (k, v) in p.to_array().iter().enumerate() {
            let lo = members.iter().map(|m| m.params[k]).fold(f64::INFINITY, f64::min);
            let hi = members.iter().map(|m| m.params[k]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(lo - 1e-9 <= *v && *v <= hi + 1e-9);
        }
    }

    #[test]
    fn unanimous_members_decide_the_type(members in prop::collection::vec(arb_prediction(), 1..8), class in 0usize..9) {
        let members: Vec<WindowPrediction> = members
            .into_iter()
            .map(|mut m| {
                m.probabilities[class] = 2.0;
                let s: f64 = m.probabilities.iter().sum();
                m.probabilities = m.probabilities.map(|v| v / s);
                m
            })
            .collect();
        prop_assert_eq!(aggregate(&members).unwrap().0.index(), class);
    }

    #[test]
    fn sanitized_params_always_assemble(raw in prop::array::uniform6(-100.0f64..200.0), class in 0usize..9) {
        let p = GrammarParams::from_array(sanitize_params(raw));
        prop_assert!(p.is_valid());
        prop_assert!(assemble_grammar(WindowType::from_index(class).unwrap(), &p, &AssembleConfig::default()).is_ok());
    }
}
