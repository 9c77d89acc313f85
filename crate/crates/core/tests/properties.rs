use proptest::prelude::*;

use waco::alignment::{build_spans, rescale_interval, Aligned};
use waco::corpus::bpe::BpeVocab;
use waco::corpus::{generate_corpus, subset_count, subset_indices, CorpusSpec, SplitSizes};
use waco::eval::{self, bleu, similarity_report, DecodeConfig};
use waco::losses::contrastive;
use waco::model::{Model, ModelConfig};
use waco::training::{self, Needs};

fn small_spec(seed: u64, noise: f64) -> CorpusSpec {
    CorpusSpec {
        n_source_words: 10,
        feat_dim: 4,
        noise_sigma: noise,
        sizes: SplitSizes { asr_train: 12, st_train: 6, mt_train: 8, dev: 4, test: 4 },
        seed,
        ..CorpusSpec::default()
    }
}

fn small_model(vocab: &BpeVocab, seed: u64) -> Model {
    let cfg = ModelConfig {
        feat_dim: 4,
        d_model: 8,
        n_heads: 2,
        ffn_dim: 16,
        n_speech_layers: 1,
        n_joint_enc_layers: 1,
        n_dec_layers: 1,
        vocab_size: vocab.len(),
        ..ModelConfig::default()
    };
    Model::new(cfg, seed).unwrap()
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-9);
    v.into_iter().map(|x| x / n).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn corpus_is_deterministic(seed in 0u64..1000) {
        let a = generate_corpus(&small_spec(seed, 1.0)).unwrap();
        let b = generate_corpus(&small_spec(seed, 1.0)).unwrap();
        prop_assert_eq!(a.asr_train, b.asr_train);
        prop_assert_eq!(a.test, b.test);
        prop_assert_eq!(a.mt_train, b.mt_train);
    }

    #[test]
    fn noiseless_intervals_hold_constant_prototypes(seed in 0u64..1000) {
        let c = generate_corpus(&small_spec(seed, 0.0)).unwrap();
        let mut proto: std::collections::HashMap<String, Vec<f64>> = Default::default();
        for u in c.asr_train.iter().chain(&c.dev) {
            for w in u.word_intervals.as_ref().unwrap() {
                let first = u.features.row(w.start).to_vec();
                for f in w.start..w.end {
                    prop_assert_eq!(u.features.row(f), &first[..]);
                }
                let p = proto.entry(w.word.clone()).or_insert_with(|| first.clone());
                prop_assert_eq!(&*p, &first);
            }
        }
    }

    #[test]
    fn tokenizer_round_trips_and_groups_partition(seed in 0u64..1000, size in 40usize..200) {
        let c = generate_corpus(&small_spec(seed, 1.0)).unwrap();
        let vocab = BpeVocab::train(&c.text_lines(), size).unwrap();
        for u in c.asr_train.iter().chain(&c.st_train) {
            let ids = vocab.encode(&u.transcript).unwrap();
            prop_assert_eq!(&vocab.decode(&ids), &u.transcript);
            let groups = vocab.group_words(&ids).unwrap();
            prop_assert_eq!(groups.len(), u.transcript.len());
            let mut next = 0;
            for g in &groups {
                prop_assert_eq!(g.start, next);
                prop_assert!(g.end > g.start);
                next = g.end;
            }
            prop_assert_eq!(next, ids.len());
        }
    }

    #[test]
    fn larger_budgets_give_supersets(seed in 0u64..1000, a in 1usize..400, b in 1usize..400) {
        let c = generate_corpus(&small_spec(seed, 1.0)).unwrap();
        let (lo, hi) = (a.min(b), a.max(b));
        let small = subset_indices(&c.asr_train, lo, seed).unwrap();
        let large = subset_indices(&c.asr_train, hi, seed).unwrap();
        prop_assert!(small.iter().all(|i| large.contains(i)));
        let (n_lo, n_hi) = (lo % 12 + 1, hi % 12 + 1);
        let s = subset_count(&c.asr_train, n_lo.min(n_hi), seed).unwrap();
        let l = subset_count(&c.asr_train, n_lo.max(n_hi), seed).unwrap();
        prop_assert!(s.iter().all(|u| l.contains(u)));
    }

    #[test]
    fn spans_are_ordered_and_inside_the_encoder(seed in 0u64..1000, size in 40usize..200) {
        let c = generate_corpus(&small_spec(seed, 1.0)).unwrap();
        let vocab = BpeVocab::train(&c.text_lines(), size).unwrap();
        let model = small_model(&vocab, seed);
        for u in &c.asr_train {
            let enc_len = model.config.enc_len(u.n_frames());
            let Aligned::Spans(spans) = build_spans(u, &vocab, enc_len).unwrap() else { continue };
            for w in spans.windows(2) {
                prop_assert!(w[0].tokens.end <= w[1].tokens.start);
                prop_assert!(w[0].enc.start <= w[1].enc.start);
            }
            for s in &spans {
                prop_assert!(!s.tokens.is_empty() && !s.enc.is_empty() && s.enc.end <= enc_len);
            }
        }
    }

    #[test]
    fn rescaling_to_the_same_length_is_nearly_identity(n in 2usize..200, a in 0usize..1000, b in 0usize..1000) {
        let l = a % (n - 1) + 1;
        let r = l + 1 + b % (n - l);
        let (nl, nr) = rescale_interval(l, r, n, n).unwrap();
        prop_assert!(nl.abs_diff(l) <= 1 && nr == r);
    }

    #[test]
    fn contrastive_is_nonnegative_and_order_free(
        pairs in prop::collection::vec((prop::collection::vec(-1.0f64..1.0, 3), prop::collection::vec(-1.0f64..1.0, 3)), 1..6),
        tau in 0.05f64..2.0,
        rot in 0usize..6,
    ) {
        let a: Vec<Vec<f64>> = pairs.iter().map(|p| p.0.clone()).collect();
        let b: Vec<Vec<f64>> = pairs.iter().map(|p| p.1.clone()).collect();
        let (loss, _, _) = contrastive(&a, &b, None, tau).unwrap();
        prop_assert!(loss >= 0.0);
        let k = rot % a.len();
        let (mut ra, mut rb) = (a.clone(), b.clone());
        ra.rotate_left(k);
        rb.rotate_left(k);
        ra.reverse();
        rb.reverse();
        let (shuffled, _, _) = contrastive(&ra, &rb, None, tau).unwrap();
        prop_assert!((loss - shuffled).abs() < 1e-12);
    }

    #[test]
    fn pushing_a_negative_away_lowers_the_loss(
        a0 in prop::collection::vec(-1.0f64..1.0, 3),
        b0 in prop::collection::vec(-1.0f64..1.0, 3),
        theta in 0.1f64..3.0,
        phi1 in 0.0f64..std::f64::consts::TAU,
        phi2 in 0.0f64..std::f64::consts::TAU,
        tau in 0.05f64..1.0,
    ) {
        // Spinning b1 around a1 keeps anchor 1's view fixed and only moves
        // the negative b1 relative to anchor 0.
        let a0 = unit(a0);
        let b1 = |phi: f64| vec![theta.sin() * phi.cos(), theta.sin() * phi.sin(), theta.cos()];
        let anchors = vec![a0.clone(), vec![0.0, 0.0, 1.0]];
        let cos = |u: &[f64], v: &[f64]| waco::losses::cosine(u, v).unwrap();
        let (c1, c2) = (cos(&a0, &b1(phi1)), cos(&a0, &b1(phi2)));
        prop_assume!((c1 - c2).abs() > 1e-6);
        let loss = |phi: f64| contrastive(&anchors, &[b0.clone(), b1(phi)], None, tau).unwrap().0;
        prop_assert_eq!(c1 < c2, loss(phi1) < loss(phi2));
    }

    #[test]
    fn orthonormal_loss_grows_with_temperature(t1 in 0.05f64..2.0, t2 in 0.05f64..2.0) {
        prop_assume!((t1 - t2).abs() > 1e-6);
        let e = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let (l1, _, _) = contrastive(&e, &e, None, t1).unwrap();
        let (l2, _, _) = contrastive(&e, &e, None, t2).unwrap();
        prop_assert_eq!(t1 < t2, l1 < l2);
    }

    #[test]
    fn bleu_is_perfect_on_itself_and_order_free(
        // corpus BLEU is 0 when no 4-gram exists, so every hypothesis has one
        sents in prop::collection::vec(prop::collection::vec("[a-e]{1,3}", 4..9), 1..6),
        refs in prop::collection::vec(prop::collection::vec("[a-e]{1,3}", 1..8), 6),
        rot in 0usize..6,
    ) {
        let h: Vec<String> = sents.iter().map(|s| s.join(" ")).collect();
        prop_assert!((bleu(&h, &h).unwrap() - 100.0).abs() < 1e-9);
        let r: Vec<String> = refs[..h.len()].iter().map(|s| s.join(" ")).collect();
        let score = bleu(&h, &r).unwrap();
        let k = rot % h.len();
        let (mut hh, mut rr) = (h.clone(), r.clone());
        hh.rotate_left(k);
        rr.rotate_left(k);
        prop_assert!((bleu(&hh, &rr).unwrap() - score).abs() < 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn model_outputs_are_finite_deterministic_and_bounded(seed in 0u64..1000) {
        let c = generate_corpus(&small_spec(seed, 1.0)).unwrap();
        let vocab = BpeVocab::train(&c.text_lines(), 80).unwrap();
        let model = small_model(&vocab, seed);
        let ex = training::prepare_speech(&c.dev, &vocab, &model, Needs { spans: true, translation: true }).unwrap();
        let a = model.encode_speech(&ex[0].features).unwrap();
        prop_assert!(a.is_finite());
        prop_assert_eq!(&a, &model.encode_speech(&ex[0].features).unwrap());
        let r1 = similarity_report(&model, &ex).unwrap();
        let r2 = similarity_report(&model, &ex).unwrap();
        prop_assert_eq!(&r1, &r2);
        prop_assert!(r1.word_level_mean_cosine.abs() <= 1.0 && r1.sentence_level_mean_cosine.abs() <= 1.0);

        let greedy = DecodeConfig { beam_size: 1, length_penalty_alpha: 0.0, max_len: 6 };
        let hyp = eval::translate_speech(&model, &vocab, &ex[0].features, &greedy).unwrap();
        let mut by_hand = Vec::new();
        let memory = {
            let mut g = waco::tensor::Graph::new(&model.params);
            let m = model.speech_memory(&mut g, &ex[0].features).unwrap();
            g.value(m).clone()
        };
        let mut prefix = vec![waco::corpus::bpe::BOS];
        for _ in 0..6 {
            let mut g = waco::tensor::Graph::new(&model.params);
            let mem = g.constant(memory.clone());
            let logits = model.decoder(&mut g, mem, &prefix, &mut waco::model::Dropout::eval()).unwrap();
            let out = g.value(logits);
            let row = out.row(out.rows() - 1);
            let banned = [0, 1, 3, 4];
            let next = (0..row.len()).filter(|k| !banned.contains(k)).max_by(|&a, &b| row[a].total_cmp(&row[b]).then(b.cmp(&a))).unwrap();
            if next == waco::corpus::bpe::EOS {
                break;
            }
            by_hand.push(next);
            prefix.push(next);
        }
        prop_assert_eq!(hyp, vocab.decode_to_string(&by_hand));

        let bytes = model.to_checkpoint_bytes();
        prop_assert_eq!(Model::from_checkpoint_bytes(&bytes).unwrap().to_checkpoint_bytes(), bytes);
    }
}

#[test]
fn pretraining_never_reads_translations_and_lambda_zero_needs_no_spans() {
    let c = generate_corpus(&small_spec(5, 1.0)).unwrap();
    let vocab = BpeVocab::train(&c.text_lines(), 80).unwrap();
    let model = small_model(&vocab, 5);
    let mut asr = c.st_train.clone();
    for u in &mut asr {
        u.translation = None;
    }
    let cfg = training::TrainConfig { max_steps: 2, eval_interval: 1, ..training::TrainConfig::default() };
    let needs = Needs { spans: true, translation: false };
    let train = training::prepare_speech(&asr, &vocab, &model, needs).unwrap();
    let dev = training::prepare_speech(&c.dev, &vocab, &model, needs).unwrap();
    for objective in [waco::losses::PretrainObjective::Waco, waco::losses::PretrainObjective::Const] {
        training::pretrain_speech(model.clone(), objective, &train, &dev, &cfg).unwrap();
    }

    let needs = Needs { spans: false, translation: true };
    let st = training::prepare_speech(&c.st_train, &vocab, &model, needs).unwrap();
    let dev = training::prepare_speech(&c.dev, &vocab, &model, needs).unwrap();
    assert!(st.iter().all(|e| e.spans.is_none()));
    let ft_cfg = training::TrainConfig { max_steps: 2, eval_interval: 1, keep_last_k: 1, ..training::TrainConfig::default() };
    training::finetune(model, &st, &dev, &vocab, &ft_cfg, None).unwrap();
}
