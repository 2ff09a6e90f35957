use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::datagen::{generate, GenConfig};
use crate::grad::check::{gradcheck, jittered, GradcheckConfig};
use crate::seqcodec::{Token, TokenClass};
use crate::OrderPolicy;

fn tiny(task: Task, mode: DecodeMode) -> ModelConfig {
    ModelConfig {
        task,
        decode_mode: mode,
        image_h: 32,
        image_w: 32,
        backbone_channels: vec![4, 8, 8],
        d_model: 32,
        n_heads: 2,
        ffn_dim: 32,
        enc_layers: 2,
        dec_layers: 2,
        n_queries: 5,
        rnn_head: task == Task::Polygons && mode == DecodeMode::Parallel,
        max_vertices: 6,
        max_seq_len: default_max_seq_len(task, 2, 4),
        ..ModelConfig::default()
    }
}

fn scenes(task: Task, n: u64) -> Vec<Sample> {
    let gc = GenConfig {
        task,
        image_w: 32,
        image_h: 32,
        n_max: 2,
        m_max: 4,
        ..GenConfig::default()
    };
    (0..n)
        .map(|i| Sample::new(&generate(&gc, i).unwrap(), OrderPolicy::Spatial).unwrap())
        .collect()
}

fn memory<T: Scalar>(m: &Model<T>, g: &mut Graph<T>, samples: &[Sample]) -> Var {
    let imgs: Vec<&[f64]> = samples.iter().map(|s| s.image.as_slice()).collect();
    let x = m.images(g, &imgs).unwrap();
    m.encode(g, x).unwrap()
}

fn random_prefix(task: Task, len: usize, rng: &mut impl Rng) -> TokenSequence {
    let n_cls = seqcodec::num_classes(task);
    let payload = seqcodec::payload_len(task);
    let mut tokens = vec![Token::special(TokenClass::S)];
    for _ in 1..len {
        let class = TokenClass::from_index(task, rng.gen_range(1..n_cls)).unwrap();
        let coords = if class.is_object() {
            (0..payload).map(|_| rng.gen::<f64>()).collect()
        } else {
            Vec::new()
        };
        tokens.push(Token { class, coords });
    }
    TokenSequence { tokens }
}

#[test]
fn config_validation() {
    assert!(ModelConfig::default().validate().is_ok());
    let mut c = tiny(Task::Gates, DecodeMode::Parallel);
    c.n_heads = 3;
    assert!(c.validate().is_err());
    let mut c = tiny(Task::Gates, DecodeMode::Parallel);
    c.image_h = 40;
    assert!(c.validate().is_err());
    let mut c = tiny(Task::Polygons, DecodeMode::Parallel);
    c.rnn_head = false;
    assert!(c.validate().is_err());
    assert_eq!("ar".parse::<DecodeMode>(), Ok(DecodeMode::Autoregressive));
}

#[test]
fn sine_2d_is_bounded_and_distinct() {
    let pe = sine_2d(4, 4, 16);
    assert!(pe.iter().all(|v| v.abs() <= 1.0));
    let rows: Vec<&[f64]> = pe.chunks(16).collect();
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            assert_ne!(rows[i], rows[j]);
        }
    }
    assert_eq!(pe, sine_2d(4, 4, 16));
}

#[test]
fn parallel_shapes_and_simplex() {
    for task in Task::ALL {
        let m = Model::<f64>::new(tiny(task, DecodeMode::Parallel), 3).unwrap();
        let s = scenes(task, 2);
        let mut g = Graph::new();
        let mem = memory(&m, &mut g, &s);
        assert_eq!(g.shape(mem), &[2, m.config.memory_len(), 32]);
        let (logits, coords, stop) = m.parallel_forward(&mut g, mem, None).unwrap();
        assert_eq!(g.shape(logits), &[10, 2]);
        if task == Task::Polygons {
            assert_eq!(g.shape(coords), &[10, 12]);
            assert_eq!(g.shape(stop.unwrap()), &[10, 6]);
        } else {
            assert_eq!(g.shape(coords), &[10, m.config.coord_dim()]);
            assert!(stop.is_none());
        }
        let imgs: Vec<&[f64]> = s.iter().map(|x| x.image.as_slice()).collect();
        for p in m.predict(&imgs).unwrap() {
            let Prediction::Parallel(q) = p else { panic!("parallel model") };
            assert_eq!(q.len(), 5);
            for o in q {
                assert!((o.probs[0] + o.probs[1] - 1.0).abs() < 1e-12);
                assert!(o.coords.iter().all(|c| (0.0..=1.0).contains(c)));
            }
        }
    }
}

#[test]
fn rnn_head_emits_between_one_and_max_points() {
    let m = Model::<f64>::new(tiny(Task::Polygons, DecodeMode::Parallel), 5).unwrap();
    let s = scenes(Task::Polygons, 3);
    let imgs: Vec<&[f64]> = s.iter().map(|x| x.image.as_slice()).collect();
    for p in m.predict(&imgs).unwrap() {
        let Prediction::Parallel(q) = p else { panic!("parallel model") };
        for o in q {
            let k = o.coords.len() / 2;
            assert!((1..=6).contains(&k) && o.coords.len() % 2 == 0, "{k}");
        }
    }
}

#[test]
fn swapping_queries_permutes_outputs() {
    let mut m = Model::<f64>::new(tiny(Task::Gates, DecodeMode::Parallel), 7).unwrap();
    let s = scenes(Task::Gates, 1);
    let run = |m: &Model<f64>| {
        let mut g = Graph::inference();
        let mem = memory(m, &mut g, &s);
        let (l, c, _) = m.parallel_forward(&mut g, mem, None).unwrap();
        (g.data(l).to_vec(), g.data(c).to_vec())
    };
    let (l0, c0) = run(&m);
    let q = m.query_param().unwrap();
    let d = m.config.d_model;
    let data = m.store.get_mut(q).data_mut();
    for k in 0..d {
        data.swap(k, 3 * d + k);
    }
    let (l1, c1) = run(&m);
    let cd = m.config.coord_dim();
    let perm = [3, 1, 2, 0, 4];
    for (i, &j) in perm.iter().enumerate() {
        for k in 0..2 {
            assert!((l1[2 * i + k] - l0[2 * j + k]).abs() < 1e-12);
        }
        for k in 0..cd {
            assert!((c1[cd * i + k] - c0[cd * j + k]).abs() < 1e-12);
        }
    }
}

#[test]
fn attention_rows_sum_to_one() {
    let m = Model::<f64>::new(tiny(Task::Points, DecodeMode::Parallel), 2).unwrap();
    let s = scenes(Task::Points, 2);
    let mut g = Graph::inference();
    let mem = memory(&m, &mut g, &s);
    let att = m.parallel_attention(&mut g, mem).unwrap();
    assert_eq!(att.len(), 4);
    for a in att {
        let cols = *g.shape(a).last().unwrap();
        for row in g.data(a).chunks(cols) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn ar_future_tokens_do_not_leak() {
    let task = Task::Gates;
    let m = Model::<f64>::new(tiny(task, DecodeMode::Autoregressive), 4).unwrap();
    let s = scenes(task, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..10 {
        let len = rng.gen_range(2..6);
        let a = random_prefix(task, len, &mut rng);
        let cut = rng.gen_range(1..len);
        let mut b = a.clone();
        let tail = random_prefix(task, len, &mut rng);
        b.tokens[cut..].clone_from_slice(&tail.tokens[cut..]);
        let run = |p: &TokenSequence| {
            let mut g = Graph::inference();
            let mem = memory(&m, &mut g, &s);
            let (l, c) = m.ar_forward(&mut g, mem, std::slice::from_ref(p)).unwrap();
            (g.data(l).to_vec(), g.data(c).to_vec())
        };
        let ((la, ca), (lb, cb)) = (run(&a), run(&b));
        let (nc, np) = (seqcodec::num_classes(task), seqcodec::payload_len(task));
        assert_eq!(la[..cut * nc], lb[..cut * nc]);
        assert_eq!(ca[..cut * np], cb[..cut * np]);
        // the last position is the sequential forward of the shorter prefix
        let short = TokenSequence {
            tokens: a.tokens[..cut].to_vec(),
        };
        let (ls, _) = run(&short);
        for k in 0..nc {
            assert!((ls[(cut - 1) * nc + k] - la[(cut - 1) * nc + k]).abs() < 1e-9);
        }
    }
}

#[test]
fn ar_rejects_malformed_prefixes() {
    let m = Model::<f64>::new(tiny(Task::Points, DecodeMode::Autoregressive), 4).unwrap();
    let s = scenes(Task::Points, 1);
    let mut g = Graph::inference();
    let mem = memory(&m, &mut g, &s);
    let no_s = TokenSequence {
        tokens: vec![Token::special(TokenClass::E)],
    };
    assert!(m.ar_forward(&mut g, mem, &[no_s]).is_err());
    assert!(m.ar_forward(&mut g, mem, &[]).is_err());
    assert!(m.parallel_forward(&mut g, mem, None).is_err());
}

#[test]
fn greedy_decode_terminates_without_start_tokens() {
    for task in Task::ALL {
        let m = Model::<f64>::new(tiny(task, DecodeMode::Autoregressive), 11).unwrap();
        let s = scenes(task, 2);
        let imgs: Vec<&[f64]> = s.iter().map(|x| x.image.as_slice()).collect();
        for p in m.predict(&imgs).unwrap() {
            let Prediction::Autoregressive { tokens, confidences } = p else { panic!("ar model") };
            assert!(!tokens.is_empty() && tokens.len() < m.config.max_seq_len);
            assert_eq!(tokens.len(), confidences.len());
            assert!(tokens.tokens.iter().all(|t| t.class != TokenClass::S));
            assert!(confidences.iter().all(|c| (0.0..=1.0).contains(c)));
            let ends = tokens.tokens.iter().filter(|t| t.class == TokenClass::E).count();
            assert!(ends <= 1);
            if ends == 1 {
                assert_eq!(tokens.tokens.last().unwrap().class, TokenClass::E);
            }
        }
    }
}

#[test]
fn ar_objects_follow_the_codec() {
    let gate = [Point2::new(0.1, 0.1), Point2::new(0.3, 0.1), Point2::new(0.3, 0.3), Point2::new(0.1, 0.3)];
    let tokens = TokenSequence {
        tokens: vec![Token::gate(&gate), Token::gate(&gate[..3]), Token::special(TokenClass::E), Token::gate(&gate)],
    };
    let objs = Prediction::Autoregressive {
        tokens,
        confidences: vec![0.9, 0.8, 0.7, 0.6],
    }
    .objects(Task::Gates);
    assert_eq!(objs.len(), 1);
    assert_eq!(objs[0].confidence, 0.9);
}

#[test]
fn parallel_line_joins_confident_queries_in_order() {
    let q = |p: f64, x: f64| QueryOutput {
        probs: [p, 1.0 - p],
        coords: vec![x, 0.5],
    };
    let objs = Prediction::Parallel(vec![q(0.9, 0.1), q(0.2, 0.2), q(0.7, 0.3)]).objects(Task::Line);
    assert_eq!(objs.len(), 1);
    assert_eq!(objs[0].points, vec![Point2::new(0.1, 0.5), Point2::new(0.3, 0.5)]);
    assert!((objs[0].confidence - 0.8).abs() < 1e-12);
    assert!(Prediction::Parallel(vec![q(0.1, 0.1)]).objects(Task::Line).is_empty());
}

#[test]
fn training_reduces_loss_in_both_modes() {
    for mode in [DecodeMode::Parallel, DecodeMode::Autoregressive] {
        let samples = scenes(Task::Points, 4);
        let batch: Vec<&Sample> = samples.iter().collect();
        let mut tc = TrainConfig::default();
        tc.adam.lr_backbone = 1e-3;
        tc.adam.lr_transformer = 1e-3;
        let mut tr = Trainer::new(Model::<f32>::new(tiny(Task::Points, mode), 1).unwrap(), tc);
        let first = tr.train_step(&batch).unwrap().loss;
        let mut last = first;
        for _ in 0..50 {
            last = tr.train_step(&batch).unwrap().loss;
        }
        assert_eq!(tr.step(), 51);
        assert!(last < 0.7 * first, "{mode:?}: {first} -> {last}");
    }
}

#[test]
fn identical_seeds_train_identically() {
    let samples = scenes(Task::Gates, 4);
    let batch: Vec<&Sample> = samples.iter().collect();
    let run = || {
        let mut tr = Trainer::new(Model::<f32>::new(tiny(Task::Gates, DecodeMode::Parallel), 8).unwrap(), TrainConfig::default());
        (0..3).map(|_| tr.train_step(&batch).unwrap().loss).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
    let a = Model::<f32>::new(tiny(Task::Gates, DecodeMode::Parallel), 8).unwrap();
    let b = Model::<f32>::new(tiny(Task::Gates, DecodeMode::Parallel), 9).unwrap();
    assert_ne!(a.store.entries()[0].tensor, b.store.entries()[0].tensor);
}

#[test]
fn checkpoint_restores_predictions() {
    let m = Model::<f32>::new(tiny(Task::Points, DecodeMode::Autoregressive), 6).unwrap();
    let ck = m.checkpoint(42, serde_json::json!({"note": "x"}));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    crate::grad::save_checkpoint(&path, &ck).unwrap();
    let back = Model::<f32>::from_checkpoint(&crate::grad::load_checkpoint(&path).unwrap()).unwrap();
    assert_eq!(back.config, m.config);
    let s = scenes(Task::Points, 2);
    let imgs: Vec<&[f64]> = s.iter().map(|x| x.image.as_slice()).collect();
    assert_eq!(back.predict(&imgs).unwrap(), m.predict(&imgs).unwrap());
}

#[test]
fn non_finite_input_aborts_before_update() {
    let mut samples = scenes(Task::Points, 1);
    samples[0].image[0] = f64::NAN;
    let mut tr = Trainer::new(Model::<f32>::new(tiny(Task::Points, DecodeMode::Parallel), 1).unwrap(), TrainConfig::default());
    let before = tr.model.store.clone();
    let err = tr.train_step(&[&samples[0]]).unwrap_err();
    assert!(matches!(err, ModelError::NonFinite { step: 0, .. }), "{err}");
    assert_eq!(tr.step(), 0);
    for (a, b) in before.entries().iter().zip(tr.model.store.entries()) {
        assert_eq!(a.tensor, b.tensor);
    }
}

fn sampled() -> GradcheckConfig {
    GradcheckConfig {
        max_coords_per_param: Some(3),
        seed: 1,
        ..GradcheckConfig::default()
    }
}

#[test]
fn gradcheck_encoder_layer() {
    let mut c = tiny(Task::Points, DecodeMode::Parallel);
    c.enc_layers = 1;
    let m = Model::<f64>::new(c, 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x: Vec<f64> = (0..2 * 4 * 32).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let report = gradcheck(
        &m.store,
        |g, s| {
            let mut mm = m.clone();
            mm.store = s.clone();
            let x = g.constant(Tensor::from_f64(&[2, 4, 32], &x)?);
            let y = mm.encode_tokens(g, x, &mut Vec::new())?;
            let y = g.tanh(y);
            Ok(g.sum(y))
        },
        GradcheckConfig {
            max_coords_per_param: Some(8),
            ..sampled()
        },
    )
    .unwrap();
    assert!(report.passed(), "{report:?}");
}

#[test]
fn gradcheck_rnn_three_steps() {
    let mut m = Model::<f64>::new(tiny(Task::Polygons, DecodeMode::Parallel), 2).unwrap();
    m.store = jittered(&m.store, 0.05, 1);
    let s = scenes(Task::Polygons, 1);
    let targets = s[0].targets.clone();
    let report = gradcheck(
        &m.store,
        |g, st| {
            let mut mm = m.clone();
            mm.store = st.clone();
            let mem = memory(&mm, g, &s);
            let (l, c, stop) = mm.parallel_forward(g, mem, Some(3)).map_err(|e| match e {
                ModelError::Grad(e) => e,
                other => panic!("{other}"),
            })?;
            let short: Vec<Vec<f64>> = targets.iter().map(|t| t[..t.len().min(6)].to_vec()).collect();
            let (loss, _) = crate::matching::set_loss_sequences(g, l, c, stop.unwrap(), &short, &Default::default()).unwrap();
            Ok(loss)
        },
        sampled(),
    )
    .unwrap();
    assert!(report.passed(), "{report:?}");
}

#[test]
fn gradcheck_end_to_end() {
    for mode in [DecodeMode::Parallel, DecodeMode::Autoregressive] {
        let mut m = Model::<f64>::new(tiny(Task::Gates, mode), 5).unwrap();
        m.store = jittered(&m.store, 0.05, 2);
        let samples = scenes(Task::Gates, 2);
        let batch: Vec<&Sample> = samples.iter().collect();
        let tc = TrainConfig::default();
        let report = gradcheck(
            &m.store,
            |g, s| {
                let mut mm = m.clone();
                mm.store = s.clone();
                mm.batch_loss(g, &batch, &tc).map_err(|e| match e {
                    ModelError::Grad(e) => e,
                    other => panic!("{other}"),
                })
            },
            sampled(),
        )
        .unwrap();
        assert!(report.passed(), "{mode:?}: {report:?}");
    }
}
