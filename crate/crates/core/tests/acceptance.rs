//! Acceptance suite: one test per criterion, each printing a PASS/FAIL
//! line (run with `cargo test --test acceptance -- --nocapture` to see
//! them). Tolerances are pinned in the assertions.

use rand::distributions::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use semlogue::corpus::{self, Dialogue, Speaker, Turn, Vocab, EOS_ID};
use semlogue::losses::{
    assemble, cross_entropy, weighted_contanic_ce, BaselineEstimator, LossConfig, LossVariant,
};
use semlogue::metrics::{bleu, dialuation, rouge, DialuationWeights};
use semlogue::model::{Architecture, BoundParams, Model, ModelConfig};
use semlogue::scores::ContanicWeights;
use semlogue::tensor::{grad_check, GradCheckOptions, Graph, Tensor};
use semlogue::trainer::{
    evaluate_corpus, prepare_examples, Adam, AdamConfig, PreparedExample, TrainConfig, Trainer,
};
use std::time::Instant;

fn micro_model_config(vocab: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: vocab,
        embed_dim: 16,
        encoder_layers: 1,
        decoder_layers: 1,
        heads: 2,
        ff_dim: 32,
        max_source_len: 12,
        max_target_len: 8,
        architecture: Architecture::EncoderDecoder,
    }
}

/// Loss-variant gradient check on a micro model (vocab 50, embed 16,
/// 1 layer): model + estimator parameters vs central differences.
fn gradcheck_variant(variant: LossVariant, seed: u64) -> semlogue::tensor::GradReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = Model::<f64>::new(micro_model_config(50), seed).unwrap();
    let bse = BaselineEstimator::<f64>::new(50, 16, seed + 1);
    let loss_cfg = LossConfig {
        variant,
        ..Default::default()
    };
    let mut seq = |len: usize| -> Vec<usize> {
        (0..len)
            .map(|_| rng.gen_range(Vocab::reserved_len()..50))
            .collect()
    };
    let sources = vec![seq(5), seq(3)];
    let mut golds = vec![seq(4), seq(2)];
    for g in golds.iter_mut() {
        g.push(EOS_ID);
    }
    let scores: Vec<f64> = (0..2).map(|_| rng.gen_range(0.0..1.0)).collect();

    let n_model = model.params().len();
    let mut all: Vec<Tensor<f64>> = model.params().tensors().cloned().collect();
    all.extend(bse.params().tensors().cloned());
    grad_check(
        |g, leaves| {
            let bound_model = BoundParams::from_ids(leaves[..n_model].to_vec());
            let bound_bse = BoundParams::from_ids(leaves[n_model..].to_vec());
            let tf = model.forward_teacher_forced(g, &bound_model, &sources, &golds)?;
            let out = assemble(
                g,
                &tf,
                &loss_cfg,
                loss_cfg.variant.needs_scores().then_some(&scores[..]),
                Some((&bse, &bound_bse)),
            )?;
            Ok(out.total)
        },
        &all,
        &GradCheckOptions {
            eps: 1e-5,
            tolerance: 1e-4,
            max_entries_per_param: Some(20),
            ..Default::default()
        },
    )
    .unwrap()
}

#[test]
fn acceptance_1_gradient_correctness_all_variants() {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for variant in LossVariant::ALL {
        for seed in 0..5u64 {
            let report = gradcheck_variant(variant, seed);
            assert!(
                report.pass && report.max_rel_diff < 1e-4,
                "ACCEPTANCE 1 (gradient correctness): FAIL {} seed {seed}: {}",
                variant.name(),
                report.summary()
            );
            worst = worst.max(report.max_rel_diff);
        }
    }
    let elapsed = start.elapsed();
    assert!(
        elapsed.as_secs() < 120,
        "ACCEPTANCE 1: FAIL runtime {elapsed:?} >= 2 min"
    );
    println!(
        "ACCEPTANCE 1 (gradient correctness, 5 variants x 5 seeds): PASS — worst rel err {worst:.3e} < 1e-4, runtime {elapsed:.1?}"
    );
}

#[test]
fn acceptance_2_weighted_ce_gradient_contract() {
    let model = Model::<f64>::new(micro_model_config(30), 42).unwrap();
    let sources = vec![vec![4, 5, 6, 7], vec![8, 9]];
    let golds = vec![vec![10, 11, 12, EOS_ID], vec![13, EOS_ID]];
    let grads_for = |c: Option<f64>| -> Vec<Tensor<f64>> {
        let mut g = Graph::new();
        let bound = model.bind(&mut g, true);
        let tf = model
            .forward_teacher_forced(&mut g, &bound, &sources, &golds)
            .unwrap();
        let (ce, per) = cross_entropy(&mut g, &tf).unwrap();
        let root = match c {
            Some(c) => weighted_contanic_ce(&mut g, per, &[c, c]).unwrap(),
            None => ce,
        };
        let grads = g.backward(root).unwrap();
        bound
            .ids()
            .iter()
            .map(|&id| grads.get(id).unwrap().clone())
            .collect()
    };
    let base = grads_for(None);
    let mut worst: f64 = 0.0;
    for c in [0.0, 0.25, 0.66, 1.0] {
        let weighted = grads_for(Some(c));
        for (b, w) in base.iter().zip(&weighted) {
            for (x, y) in b.data().iter().zip(w.data()) {
                let diff = (y - (1.0 - c) * x).abs();
                assert!(
                    diff <= 1e-9,
                    "ACCEPTANCE 2: FAIL c={c}: |{y} - {}| = {diff} > 1e-9",
                    (1.0 - c) * x
                );
                worst = worst.max(diff);
            }
        }
    }
    println!(
        "ACCEPTANCE 2 (weighted-CE gradient contract, c in {{0, 0.25, 0.66, 1}}): PASS — worst elementwise diff {worst:.2e} <= 1e-9"
    );
}

#[test]
fn acceptance_3_additive_score_is_a_gradient_null_op() {
    let model = Model::<f64>::new(micro_model_config(30), 7).unwrap();
    let sources = vec![vec![4, 5, 6], vec![7, 8, 9]];
    let golds = vec![vec![10, 11, EOS_ID], vec![12, EOS_ID]];
    let grads_for = |added: Option<f64>| -> Vec<Tensor<f64>> {
        let mut g = Graph::new();
        let bound = model.bind(&mut g, true);
        let tf = model
            .forward_teacher_forced(&mut g, &bound, &sources, &golds)
            .unwrap();
        let (ce, _) = cross_entropy(&mut g, &tf).unwrap();
        let root = match added {
            Some(c) => {
                let k = g.constant_scalar(c);
                g.add(ce, k).unwrap()
            }
            None => ce,
        };
        let grads = g.backward(root).unwrap();
        bound
            .ids()
            .iter()
            .map(|&id| grads.get(id).unwrap().clone())
            .collect()
    };
    let plain = grads_for(None);
    let shifted = grads_for(Some(0.73));
    let mut checked = 0usize;
    for (a, b) in plain.iter().zip(&shifted) {
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_eq!(
                x.to_bits(),
                y.to_bits(),
                "ACCEPTANCE 3: FAIL gradient changed: {x} vs {y}"
            );
            checked += 1;
        }
    }
    println!(
        "ACCEPTANCE 3 (additive detached score is a gradient null op): PASS — {checked} gradient entries bitwise unchanged"
    );
}

// ── Shared toy corpus ───────────────────────────────────────────────

fn toy_corpus_16() -> Vec<Dialogue> {
    let pairs = [
        ("hello there", "hi how can i help you"),
        ("i need a hotel in the north", "there are two hotels in the north"),
        ("book a train to cambridge", "what day would you like to travel"),
        ("thank you so much", "you are welcome goodbye"),
        ("find a cheap restaurant", "the golden wok is a cheap restaurant"),
        ("is there free parking", "yes parking is free for guests"),
        ("what time is checkout", "checkout is at eleven in the morning"),
        ("i want italian food", "prezzo serves italian food in the centre"),
        ("how far is the station", "the station is a five minute walk"),
        ("do you allow pets", "small pets are welcome at no charge"),
        ("i need a taxi at seven", "a taxi is booked for seven tonight"),
        ("can you book for two people", "the booking for two is confirmed"),
        ("what is the phone number", "the phone number is five five five"),
        ("where is the museum", "the museum is on trumpington street"),
        ("i would like a table outside", "an outside table has been reserved"),
        ("is breakfast included", "breakfast is included with every room"),
    ];
    pairs
        .iter()
        .enumerate()
        .map(|(i, (u, s))| Dialogue {
            dialogue_id: format!("toy{i}"),
            domains: vec!["hotel".into()],
            turns: vec![
                Turn {
                    speaker: Speaker::User,
                    text: u.to_string(),
                },
                Turn {
                    speaker: Speaker::System,
                    text: s.to_string(),
                },
            ],
        })
        .collect()
}

fn toy_vocab(dialogues: &[Dialogue]) -> Vocab {
    let texts: Vec<String> = corpus::window_examples(dialogues, 3)
        .unwrap()
        .iter()
        .flat_map(|e| [e.context_text.clone(), e.gold_text.clone()])
        .collect();
    corpus::build_vocab(texts.iter().map(|s| s.as_str()), 400, 1)
}

fn toy_train_config(variant: LossVariant, seed: u64) -> TrainConfig {
    TrainConfig {
        lr: 5e-3,
        batch_size: 16,
        epochs: 1,
        seed,
        loss: LossConfig {
            variant,
            ..LossConfig::default()
        },
        model: ModelConfig {
            vocab_size: 0,
            embed_dim: 32,
            encoder_layers: 1,
            decoder_layers: 1,
            heads: 2,
            ff_dim: 64,
            max_source_len: 32,
            max_target_len: 12,
            architecture: Architecture::EncoderDecoder,
        },
        bse_hidden: 32,
        ..TrainConfig::default()
    }
}

#[test]
fn acceptance_4_lambda_one_sigma_zero_equals_pure_ce_for_100_steps() {
    let dialogues = toy_corpus_16();
    let vocab = toy_vocab(&dialogues);
    let mut cfg = toy_train_config(LossVariant::Semtextuallogue, 5);
    cfg.loss.lambda = 1.0;
    cfg.loss.sigma = 0.0;
    let examples = prepare_examples(&dialogues, 3, &vocab, 12).unwrap();

    let mut degenerate = Trainer::<f64>::new(cfg.clone(), vocab.clone()).unwrap();
    let log_a = degenerate.run(&examples, 100).unwrap();

    let mut ce_cfg = cfg;
    ce_cfg.loss.variant = LossVariant::Ce;
    let mut pure = Trainer::<f64>::new(ce_cfg, vocab).unwrap();
    let log_b = pure.run(&examples, 100).unwrap();

    let mut worst: f64 = 0.0;
    for (a, b) in log_a.steps.iter().zip(&log_b.steps) {
        let diff = (a.l_total - b.l_total).abs();
        assert!(
            diff <= 1e-9,
            "ACCEPTANCE 4: FAIL step {}: {} vs {} (diff {diff})",
            a.step,
            a.l_total,
            b.l_total
        );
        worst = worst.max(diff);
    }
    println!(
        "ACCEPTANCE 4 (lambda=1 sigma=0 degenerates to CE over 100 steps): PASS — worst per-step diff {worst:.2e} <= 1e-9"
    );
}

// ── Criterion 5: metric oracles ─────────────────────────────────────

/// Brute-force clipped n-gram counts: for every distinct candidate
/// n-gram, scan both sequences positionally. Independent of the HashMap
/// counting in the implementation.
fn brute_counts(cand: &[String], refr: &[String], n: usize) -> (usize, usize) {
    if cand.len() < n {
        return (0, 0);
    }
    let grams: Vec<&[String]> = cand.windows(n).collect();
    let total = grams.len();
    let mut matched = 0;
    let mut seen: Vec<&[String]> = Vec::new();
    for g in &grams {
        if seen.contains(g) {
            continue;
        }
        seen.push(g);
        let in_cand = grams.iter().filter(|x| x == &g).count();
        let in_ref = if refr.len() < n {
            0
        } else {
            refr.windows(n).filter(|x| x == g).count()
        };
        matched += in_cand.min(in_ref);
    }
    (matched, total)
}

/// Recursive memoized LCS, independent of the iterative DP in the
/// implementation.
fn brute_lcs(a: &[String], b: &[String]) -> usize {
    fn go(
        a: &[String],
        b: &[String],
        i: usize,
        j: usize,
        memo: &mut std::collections::HashMap<(usize, usize), usize>,
    ) -> usize {
        if i == a.len() || j == b.len() {
            return 0;
        }
        if let Some(&v) = memo.get(&(i, j)) {
            return v;
        }
        let v = if a[i] == b[j] {
            1 + go(a, b, i + 1, j + 1, memo)
        } else {
            go(a, b, i + 1, j, memo).max(go(a, b, i, j + 1, memo))
        };
        memo.insert((i, j), v);
        v
    }
    go(a, b, 0, 0, &mut std::collections::HashMap::new())
}

fn brute_bleu_cumulative(cand: &[String], refr: &[String]) -> f64 {
    if cand.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    let mut used = 0;
    for n in 1..=4 {
        let (matched, total) = brute_counts(cand, refr, n);
        if total == 0 {
            continue;
        }
        let p = matched as f64 / total as f64;
        log_sum += p.max(1e-9).ln();
        used += 1;
    }
    let bp = if (cand.len() as f64) < refr.len() as f64 {
        (1.0 - refr.len() as f64 / cand.len() as f64).exp()
    } else {
        1.0
    };
    if used == 0 {
        0.0
    } else {
        bp * (log_sum / used as f64).exp()
    }
}

fn f1(matched: usize, cand_total: usize, ref_total: usize) -> f64 {
    if cand_total == 0 || ref_total == 0 {
        return 0.0;
    }
    let p = matched as f64 / cand_total as f64;
    let r = matched as f64 / ref_total as f64;
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

#[test]
fn acceptance_5_metric_oracles() {
    // BLEU and ROUGE vs brute force on 200 random pairs, exactly.
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let alphabet = ["a", "b", "c", "d", "e"];
    for case in 0..200 {
        let mut seq = |max: usize| -> Vec<String> {
            let len = rng.gen_range(1..=max);
            (0..len)
                .map(|_| alphabet[rng.gen_range(0..alphabet.len())].to_string())
                .collect()
        };
        let cand = seq(12);
        let refr = seq(12);

        let got = bleu(&cand, &refr, 4);
        let want = brute_bleu_cumulative(&cand, &refr);
        assert_eq!(
            got.cumulative.to_bits(),
            want.to_bits(),
            "ACCEPTANCE 5: FAIL bleu case {case}: {cand:?} vs {refr:?}: {} != {want}",
            got.cumulative
        );
        for n in 1..=4usize {
            let (matched, total) = brute_counts(&cand, &refr, n);
            let want_p = if total == 0 {
                0.0
            } else {
                matched as f64 / total as f64
            };
            assert_eq!(got.precisions[n - 1].to_bits(), want_p.to_bits());
        }

        let got_r = rouge(&cand, &refr);
        let (m1, c1) = brute_counts(&cand, &refr, 1);
        let (r1m, r1t) = brute_counts(&refr, &cand, 1);
        assert_eq!(r1m, m1, "clipped counts must be symmetric");
        let want_r1 = f1(m1, c1, r1t);
        let (m2, c2) = brute_counts(&cand, &refr, 2);
        let r2t = refr.len().saturating_sub(1);
        let want_r2 = f1(m2, c2, r2t);
        let lcs = brute_lcs(&cand, &refr);
        let want_rl = f1(lcs, cand.len(), refr.len());
        assert_eq!(got_r.rouge1.to_bits(), want_r1.to_bits(), "case {case}");
        assert_eq!(got_r.rouge2.to_bits(), want_r2.to_bits(), "case {case}");
        assert_eq!(got_r.rouge_l.to_bits(), want_rl.to_bits(), "case {case}");
    }

    // dialuation pinned example and bounds
    let w = DialuationWeights {
        delta_c: 0.3,
        delta_ss: 0.7,
    };
    let d = dialuation(0.5, 0.9, &w).unwrap();
    assert!(
        (d - 78.0).abs() <= 1e-9,
        "ACCEPTANCE 5: FAIL dialuation(0.3,0.7,0.5,0.9) = {d} != 78 +- 1e-9"
    );
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..100_000 {
        let cr = rng.gen_range(0.0..=1.0);
        let ss = rng.gen_range(0.0..=1.0);
        let dc = rng.gen_range(0.0..=1.0);
        let dss = rng.gen_range(0.0..=1.0);
        if dc + dss == 0.0 {
            continue;
        }
        let v = dialuation(
            cr,
            ss,
            &DialuationWeights {
                delta_c: dc,
                delta_ss: dss,
            },
        )
        .unwrap();
        assert!(
            (0.0..=100.0 + 1e-12).contains(&v),
            "ACCEPTANCE 5: FAIL dialuation {v} out of [0,100]"
        );
    }
    println!(
        "ACCEPTANCE 5 (metric oracles): PASS — BLEU/ROUGE match brute force exactly on 200 pairs; dialuation(0.3,0.7,0.5,0.9) = {d:.9}; bounds hold on 1e5 draws"
    );
}

#[test]
fn acceptance_6_bse_converges_to_frozen_contanic_targets() {
    let start = Instant::now();
    // frozen model decodes the toy corpus once; those scores become the
    // regression targets
    let dialogues = toy_corpus_16();
    let vocab = toy_vocab(&dialogues);
    let examples = prepare_examples(&dialogues, 3, &vocab, 12).unwrap();
    let mut model_cfg = micro_model_config(vocab.len());
    model_cfg.embed_dim = 32;
    model_cfg.ff_dim = 64;
    model_cfg.max_source_len = 32;
    model_cfg.max_target_len = 12;
    let model = Model::<f64>::new(model_cfg, 11).unwrap();

    let provider = semlogue::embeddings::ConfiguredProvider::<f64>::hashed_default();
    let weights = ContanicWeights::default();
    let sources: Vec<Vec<usize>> = examples.iter().map(|e| e.src_ids.clone()).collect();
    let golds: Vec<Vec<usize>> = examples.iter().map(|e| e.gold_ids.clone()).collect();
    let caps: Vec<usize> = golds.iter().map(|g| g.len() + 8).collect();
    let decoded = model.generate_greedy_batch(&sources, &caps).unwrap();
    let contexts: Vec<&str> = examples.iter().map(|e| e.context_text.as_str()).collect();
    let gold_texts: Vec<&str> = examples.iter().map(|e| e.gold_text.as_str()).collect();
    let decoded_texts: Vec<String> = decoded.iter().map(|ids| vocab.decode(ids)).collect();
    let gen_refs: Vec<&str> = decoded_texts.iter().map(|s| s.as_str()).collect();
    let triples =
        semlogue::scores::score_batch(&contexts, &gold_texts, &gen_refs, &provider, &weights)
            .unwrap();
    let targets: Vec<f64> = triples
        .iter()
        .map(|t| semlogue::scores::contanic_clamped(t.cr, t.ss, &weights))
        .collect();

    // fixed pooled distributions from the frozen model
    let mut g = Graph::new();
    let bound = model.bind(&mut g, false);
    let tf = model
        .forward_teacher_forced(&mut g, &bound, &sources, &golds)
        .unwrap();
    let dists = tf.distributions(&mut g).unwrap();
    let pooled = semlogue::losses::pool_distributions(&mut g, dists, &tf.target_mask).unwrap();
    let pooled_fixed = g.value(pooled).clone();

    // estimator trained via L_BSE only
    let mut bse = BaselineEstimator::<f64>::new(vocab.len(), 128, 21);
    let shapes: Vec<&[usize]> = bse.params().tensors().map(|t| t.shape()).collect();
    let mut opt = Adam::new(
        AdamConfig {
            lr: 1e-2,
            ..AdamConfig::default()
        },
        &shapes,
    );
    let mut mean_abs_err = f64::INFINITY;
    let mut steps_used = 0;
    for step in 0..2000 {
        let mut g = Graph::new();
        let pooled = g.constant(pooled_fixed.clone());
        let bound = bse.bind(&mut g, true);
        let scores = bse.forward(&mut g, &bound, pooled).unwrap();
        let loss = semlogue::losses::l_bse(&mut g, scores, &targets).unwrap();
        let grads = g.backward(loss).unwrap();
        let grad_tensors: Vec<Tensor<f64>> = bound
            .ids()
            .iter()
            .map(|&id| grads.get(id).unwrap().clone())
            .collect();
        let params: Vec<&mut Tensor<f64>> = bse.params_mut().tensors_mut().collect();
        opt.apply(params, &grad_tensors, 1.0);
        mean_abs_err = g
            .value(scores)
            .data()
            .iter()
            .zip(&targets)
            .map(|(s, t)| (s - t).abs())
            .sum::<f64>()
            / targets.len() as f64;
        steps_used = step + 1;
        if mean_abs_err < 0.03 {
            break;
        }
    }
    let elapsed = start.elapsed();
    assert!(
        mean_abs_err < 0.05,
        "ACCEPTANCE 6: FAIL mean |BSEscore - Contanic| = {mean_abs_err} after {steps_used} steps"
    );
    assert!(
        elapsed.as_secs() < 300,
        "ACCEPTANCE 6: FAIL runtime {elapsed:?} >= 5 min"
    );
    println!(
        "ACCEPTANCE 6 (estimator regresses onto frozen scores): PASS — mean |BSE - Contanic| {mean_abs_err:.4} < 0.05 after {steps_used} steps, runtime {elapsed:.1?}"
    );
}

#[test]
fn acceptance_7_overfit_16_examples_every_variant() {
    let dialogues = toy_corpus_16();
    let vocab = toy_vocab(&dialogues);
    let examples = prepare_examples(&dialogues, 3, &vocab, 12).unwrap();
    for variant in LossVariant::ALL {
        let cfg = toy_train_config(variant, 3);
        let mut trainer = Trainer::<f64>::new(cfg, vocab.clone()).unwrap();
        let log = trainer.run(&examples, 500).unwrap();
        let final_ce = log.steps.last().unwrap().l_ce;
        assert!(
            final_ce < 0.01,
            "ACCEPTANCE 7: FAIL {}: training CE {final_ce} >= 0.01 after 500 steps",
            variant.name()
        );
        let sources: Vec<Vec<usize>> = examples.iter().map(|e| e.src_ids.clone()).collect();
        let caps = vec![12usize; sources.len()];
        let decoded = trainer.model.generate_greedy_batch(&sources, &caps).unwrap();
        let mut reproduced = 0;
        for (ex, ids) in examples.iter().zip(&decoded) {
            let gold_no_eos = &ex.gold_ids[..ex.gold_ids.len() - 1];
            if ids == gold_no_eos {
                reproduced += 1;
            }
        }
        assert!(
            reproduced >= 15,
            "ACCEPTANCE 7: FAIL {}: greedy decode reproduced {reproduced}/16 golds",
            variant.name()
        );
        println!(
            "ACCEPTANCE 7 (overfit) {}: PASS — CE {final_ce:.5} < 0.01, {reproduced}/16 golds reproduced",
            variant.name()
        );
    }
}

// ── Criterion 8: directional desk-scale experiment ──────────────────

/// Synthetic paraphrase corpus: skewed content combinations, each gold
/// response drawn from six templates (three or more valid paraphrases
/// per content tuple).
fn paraphrase_corpus(n: usize, seed: u64) -> Vec<Dialogue> {
    let areas = ["north", "south", "east", "west", "centre", "riverside"];
    let foods = ["chinese", "italian", "indian", "british", "thai"];
    let prices = ["cheap", "moderate", "expensive"];
    let mut combos: Vec<(usize, usize, usize)> = (0..areas.len())
        .flat_map(|a| {
            (0..foods.len()).flat_map(move |f| (0..prices.len()).map(move |p| (a, f, p)))
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    combos.shuffle(&mut rng);
    let weights: Vec<f64> = (0..combos.len())
        .map(|rank| 1.0 / ((rank + 1) as f64).powf(0.8))
        .collect();
    let dist = WeightedIndex::new(&weights).unwrap();

    let user_t = [
        "i am looking for a {p} {f} restaurant in the {a}",
        "find me a {f} place in the {a} that is {p}",
        "any {p} {f} restaurants in the {a}",
    ];
    let sys_t = [
        "the {n} is a {p} {f} restaurant in the {a}",
        "{n} serves {p} {f} food in the {a} part of town",
        "you could try {n} which is {p} and {f} located in the {a}",
        "there is a {p} {f} option in the {a} called {n}",
        "i recommend {n} a {p} spot for {f} cuisine in the {a}",
        "my pick for {p} {f} dining in the {a} would be {n}",
    ];
    (0..n)
        .map(|i| {
            let (a, f, p) = combos[dist.sample(&mut rng)];
            let (area, food, price) = (areas[a], foods[f], prices[p]);
            let name = format!("the {food} {price} corner");
            let fill = |t: &str| {
                t.replace("{a}", area)
                    .replace("{f}", food)
                    .replace("{p}", price)
                    .replace("{n}", &name)
            };
            Dialogue {
                dialogue_id: format!("para{i}"),
                domains: vec!["restaurant".into()],
                turns: vec![
                    Turn {
                        speaker: Speaker::User,
                        text: fill(user_t[rng.gen_range(0..user_t.len())]),
                    },
                    Turn {
                        speaker: Speaker::System,
                        text: fill(sys_t[rng.gen_range(0..sys_t.len())]),
                    },
                ],
            }
        })
        .collect()
}

fn directional_config(variant: LossVariant, seed: u64) -> TrainConfig {
    TrainConfig {
        lr: 2e-3,
        batch_size: 32,
        epochs: 1,
        seed,
        loss: LossConfig {
            variant,
            lambda: 0.5,
            sigma: 1.0,
            contanic: ContanicWeights {
                alpha: 0.3,
                beta: 0.7,
            },
        },
        model: ModelConfig {
            vocab_size: 0,
            embed_dim: 32,
            encoder_layers: 1,
            decoder_layers: 1,
            heads: 2,
            ff_dim: 64,
            max_source_len: 48,
            max_target_len: 16,
            architecture: Architecture::EncoderDecoder,
        },
        bse_hidden: 128,
        ..TrainConfig::default()
    }
}

fn train_and_score(
    variant: LossVariant,
    seed: u64,
    train: &[PreparedExample],
    test: &[PreparedExample],
    vocab: &Vocab,
    steps: usize,
) -> f64 {
    let cfg = directional_config(variant, seed);
    let mut trainer = Trainer::<f64>::new(cfg, vocab.clone()).unwrap();
    trainer.run(train, steps).unwrap();
    let report = evaluate_corpus(
        &trainer.model,
        test,
        vocab,
        &trainer.provider,
        &ContanicWeights {
            alpha: 0.3,
            beta: 0.7,
        },
        &DialuationWeights::default(),
    )
    .unwrap();
    report.mean("dialuation")
}

#[test]
fn acceptance_8_directional_dialuation_experiment() {
    let start = Instant::now();
    let dialogues = paraphrase_corpus(1600, 1717);
    assert!(dialogues.len() >= 500);
    let (train_dlgs, _val, test_dlgs) = corpus::split(&dialogues, 99).unwrap();
    let texts: Vec<String> = corpus::window_examples(&train_dlgs, 3)
        .unwrap()
        .iter()
        .flat_map(|e| [e.context_text.clone(), e.gold_text.clone()])
        .collect();
    let vocab = corpus::build_vocab(texts.iter().map(|s| s.as_str()), 1000, 1);
    let train = prepare_examples(&train_dlgs, 3, &vocab, 16).unwrap();
    let test = prepare_examples(&test_dlgs, 3, &vocab, 16).unwrap();

    let steps = 1400;
    let mut wins = 0;
    let mut lines = Vec::new();
    for seed in [1u64, 2, 3] {
        let ce = train_and_score(LossVariant::Ce, seed, &train, &test, &vocab, steps);
        let stl = train_and_score(
            LossVariant::Semtextuallogue,
            seed,
            &train,
            &test,
            &vocab,
            steps,
        );
        let won = stl >= ce;
        wins += won as usize;
        lines.push(format!(
            "  seed {seed}: ce {ce:.3} vs semtextuallogue {stl:.3} ({})",
            if won { "semtextuallogue >= ce" } else { "ce ahead" }
        ));
    }
    let elapsed = start.elapsed();
    for l in &lines {
        println!("{l}");
    }
    assert!(
        elapsed.as_secs() < 1800,
        "ACCEPTANCE 8: FAIL runtime {elapsed:?} >= 30 min"
    );
    assert!(
        wins >= 2,
        "ACCEPTANCE 8: FAIL semtextuallogue held-out dialuation >= ce in only {wins}/3 seeds:\n{}",
        lines.join("\n")
    );
    println!(
        "ACCEPTANCE 8 (directional desk-scale experiment): PASS — semtextuallogue >= ce in {wins}/3 seeds at equal {steps}-step budget, runtime {elapsed:.0?}"
    );
}

#[test]
fn acceptance_9_full_determinism() {
    let dialogues = toy_corpus_16();
    let vocab = toy_vocab(&dialogues);
    let examples = prepare_examples(&dialogues, 3, &vocab, 12).unwrap();
    let run = || {
        let cfg = toy_train_config(LossVariant::Semtextuallogue, 77);
        let mut trainer = Trainer::<f64>::new(cfg, vocab.clone()).unwrap();
        let log = trainer.run(&examples, 40).unwrap();
        let report = evaluate_corpus(
            &trainer.model,
            &examples,
            &vocab,
            &trainer.provider,
            &ContanicWeights::default(),
            &DialuationWeights::default(),
        )
        .unwrap();
        (log, report)
    };
    let (log_a, report_a) = run();
    let (log_b, report_b) = run();
    assert_eq!(log_a.steps.len(), log_b.steps.len());
    for (a, b) in log_a.steps.iter().zip(&log_b.steps) {
        assert_eq!(
            a.l_total.to_bits(),
            b.l_total.to_bits(),
            "ACCEPTANCE 9: FAIL run logs diverge at step {}",
            a.step
        );
        assert_eq!(a.l_ce.to_bits(), b.l_ce.to_bits());
        assert_eq!(a.contanic.to_bits(), b.contanic.to_bits());
    }
    for (name, mean) in &report_a.means {
        assert_eq!(
            mean.to_bits(),
            report_b.means[name].to_bits(),
            "ACCEPTANCE 9: FAIL score reports diverge on {name}"
        );
    }
    for (ra, rb) in report_a.rows.iter().zip(&report_b.rows) {
        assert_eq!(ra.generated, rb.generated);
    }
    println!(
        "ACCEPTANCE 9 (determinism): PASS — two identical train+evaluate runs produced bitwise-identical run logs ({} steps) and score reports ({} rows)",
        log_a.steps.len(),
        report_a.examples
    );
}
