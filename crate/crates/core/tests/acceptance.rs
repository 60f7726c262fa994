//! Acceptance suite. Runs every criterion at its stated tolerance and prints
//! one PASS/FAIL line each; exits nonzero if any hard criterion fails.

mod common;

use std::collections::HashMap;
use std::panic::{self, AssertUnwindSafe};
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

use gridvec_core::client::train_step;
use gridvec_core::corpus::{build_vocabulary, preprocess, Minibatch};
use gridvec_core::eval::{
    agreement_report, analogy_accuracy, parse_analogies, sample_pairs, spearman, EmbeddingSet,
    SimilarityJudgments,
};
use gridvec_core::oracle::{lambda_gradient, oracle_train, step_negatives, DenseState};
use gridvec_core::shard::{AdjustRequest, DotprodRequest};
use gridvec_core::transport::{
    approximate_ratio, measured_vs_predicted, predicted_conventional_bytes,
    simulated_conventional_bytes, BandwidthMeter, BandwidthModel,
};
use gridvec_core::{train, FullVectorStore, Matrix, NoiseTable, SeededDraw, ShardSet, TrainConfig};

use common::{local_set, local_shards, synthetic_corpus};

struct Outcome {
    passed: bool,
    /// Soft criteria report but never fail the run.
    soft: bool,
    detail: String,
}

fn hard(passed: bool, detail: String) -> Outcome {
    Outcome {
        passed,
        soft: false,
        detail,
    }
}

fn data(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/data")
        .join(name)
}

fn bits(xs: &[f32]) -> Vec<u32> {
    xs.iter().map(|x| x.to_bits()).collect()
}

// 1 -------------------------------------------------------------------------

fn strict_equivalence() -> Outcome {
    let (vocab, corpus) = synthetic_corpus(100_000, 1);
    let config = TrainConfig {
        dim: 32,
        shards: 1,
        window: 5,
        negatives: 5,
        batch_size: 1,
        epochs: 3,
        alpha: 0.025,
        subsample: 1e-3,
        seed: 42,
        threads: 1,
        ..Default::default()
    };
    let set = local_set(&vocab, config.dim, 1, config.seed, BandwidthMeter::new());
    let stats = train(&corpus, &vocab, &config, &set).unwrap();
    let distributed = set.export().unwrap();
    let (oracle, ostats) = oracle_train(&corpus, &vocab, &config).unwrap();
    let same = bits(&distributed.input) == bits(&oracle.input)
        && bits(&distributed.output) == bits(&oracle.output);
    let differing = distributed
        .input
        .iter()
        .chain(&distributed.output)
        .zip(oracle.input.iter().chain(&oracle.output))
        .filter(|(a, b)| a.to_bits() != b.to_bits())
        .count();
    hard(
        same && stats.steps == ostats.steps && stats.steps > 0,
        format!(
            "{} tokens, {} steps, {} pairs; {differing} differing components",
            corpus.total_tokens, stats.steps, stats.pairs
        ),
    )
}

// 2 -------------------------------------------------------------------------

fn shard_count_invariance() -> Outcome {
    let (vocab, corpus) = synthetic_corpus(100_000, 2);
    let base = TrainConfig {
        dim: 64,
        window: 5,
        negatives: 5,
        batch_size: 50,
        epochs: 1,
        subsample: 1e-3,
        seed: 7,
        threads: 1,
        ..Default::default()
    };
    let mut runs: Vec<(usize, FullVectorStore)> = Vec::new();
    for s in [1, 2, 4, 8] {
        let config = TrainConfig {
            shards: s,
            ..base.clone()
        };
        let set = local_set(&vocab, config.dim, s, config.seed, BandwidthMeter::new());
        train(&corpus, &vocab, &config, &set).unwrap();
        runs.push((s, set.export().unwrap()));
    }
    let reference = &runs[0].1;
    let mut violations = 0usize;
    let mut largest_violator = 0.0f64;
    let mut detail = Vec::new();
    for (s, store) in &runs[1..] {
        let mut run_worst = 0.0f64;
        let (mut diff2, mut ref2) = (0.0f64, 0.0f64);
        for (a, b) in reference
            .input
            .iter()
            .chain(&reference.output)
            .zip(store.input.iter().chain(&store.output))
        {
            let (a, b) = (*a as f64, *b as f64);
            diff2 += (a - b) * (a - b);
            ref2 += a * a;
            let scale = a.abs().max(b.abs());
            let rel = if scale == 0.0 {
                0.0
            } else {
                (a - b).abs() / scale
            };
            if rel > 1e-5 {
                largest_violator = largest_violator.max(scale);
                violations += 1;
            }
            run_worst = run_worst.max(rel);
        }
        detail.push(format!(
            "S={s}: max rel {run_worst:.2e}, normwise {:.2e}",
            (diff2 / ref2).sqrt()
        ));
    }
    hard(
        violations == 0,
        format!(
            "{}; {violations} of {} components over 1e-5, all with |x| <= {largest_violator:.1e}",
            detail.join("; "),
            3 * (reference.input.len() + reference.output.len())
        ),
    )
}

// 3 -------------------------------------------------------------------------

/// Restricted objective written directly from the definition.
fn brute_lambda(state: &DenseState, pairs: &[(u32, u32)], negs: &[u32]) -> f64 {
    let d = state.dim;
    let n = negs.len() / pairs.len();
    let dot = |a: usize, b: usize| -> f64 {
        (0..d)
            .map(|c| state.u[a * d + c] * state.v[b * d + c])
            .sum()
    };
    let ln_sig = |x: f64| -(1.0 + (-x).exp()).ln();
    let mut total = 0.0;
    for (p, &(i, o)) in pairs.iter().enumerate() {
        total += ln_sig(dot(i as usize, o as usize));
        for &k in &negs[p * n..(p + 1) * n] {
            total += ln_sig(-dot(i as usize, k as usize));
        }
    }
    total
}

fn gradient_check() -> Outcome {
    let h = 1e-3;
    let mut worst_fd = 0.0f64;
    let mut worst_step = 0.0f64;
    let instances = 200;
    for inst in 0..instances {
        let mut r = SeededDraw::new(1000 + inst);
        let vocab = 2 + r.next_below(9) as usize;
        let dim = 1 + r.next_below(8) as usize;
        let n = r.next_below(4) as u32;
        let mut counts: Vec<u64> = (0..vocab).map(|_| 1 + r.next_below(50)).collect();
        counts.sort_unstable_by(|a, b| b.cmp(a));
        let noise = NoiseTable::from_counts(&counts);
        let mut u: Vec<f64> = (0..vocab * dim).map(|_| r.next_f64() * 2.0 - 1.0).collect();
        let mut v: Vec<f64> = (0..vocab * dim).map(|_| r.next_f64() * 2.0 - 1.0).collect();
        // Round to f32 so the shard path starts from the same state.
        u.iter_mut()
            .chain(v.iter_mut())
            .for_each(|x| *x = *x as f32 as f64);
        let w_in = r.next_below(vocab as u64) as u32;
        let ctx: Vec<u32> = (0..1 + r.next_below(3))
            .map(|_| r.next_below(vocab as u64) as u32)
            .collect();
        let batch = Minibatch {
            inputs: vec![w_in],
            outputs: vec![ctx],
            batch_id: 0,
        };
        let seed = r.next_u64();
        let negs = step_negatives(&noise, &batch, n, seed);
        let pairs: Vec<(u32, u32)> = batch.iter_pairs().collect();
        let state = DenseState { dim, u, v };
        let (gu, gv) = lambda_gradient(&state, &pairs, &negs);

        let mut fd = Vec::with_capacity(gu.len() + gv.len());
        for which in 0..2 {
            for idx in 0..vocab * dim {
                let mut plus = state.clone();
                let mut minus = state.clone();
                let (p, m) = if which == 0 {
                    (&mut plus.u[idx], &mut minus.u[idx])
                } else {
                    (&mut plus.v[idx], &mut minus.v[idx])
                };
                *p += h;
                *m -= h;
                fd.push(
                    (brute_lambda(&plus, &pairs, &negs) - brute_lambda(&minus, &pairs, &negs))
                        / (2.0 * h),
                );
            }
        }
        let analytic: Vec<f64> = gu.iter().chain(&gv).copied().collect();
        let scale = fd.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        if scale > 0.0 {
            let err = analytic
                .iter()
                .zip(&fd)
                .fold(0.0f64, |m, (a, f)| m.max((a - f).abs()))
                / scale;
            worst_fd = worst_fd.max(err);
        }

        // One step of the distributed path divided by alpha. Counts are
        // sorted so vocabulary order equals table order.
        let alpha = 0.01;
        let shard_vocab = gridvec_core::Vocabulary::from_counts(
            counts
                .iter()
                .enumerate()
                .map(|(i, &c)| (format!("t{i:02}"), c)),
        )
        .unwrap();
        let shards = local_shards(&shard_vocab, dim, 1, 0);
        for w in 0..vocab as u32 {
            let row = |m: &[f64]| {
                m[w as usize * dim..(w as usize + 1) * dim]
                    .iter()
                    .map(|&x| x as f32)
                    .collect::<Vec<f32>>()
            };
            shards[0].store().set_row(Matrix::Input, w, &row(&state.u));
            shards[0].store().set_row(Matrix::Output, w, &row(&state.v));
        }
        let set = ShardSet::local(&shards, Arc::new(BandwidthMeter::new())).unwrap();
        train_step(&set, &batch, n, alpha, seed).unwrap();
        let after = set.export().unwrap();
        let step: Vec<f64> = after
            .input
            .iter()
            .zip(&state.u)
            .chain(after.output.iter().zip(&state.v))
            .map(|(&a, &b)| (a as f64 - b) / alpha)
            .collect();
        if scale > 0.0 {
            let err = step
                .iter()
                .zip(&fd)
                .fold(0.0f64, |m, (a, f)| m.max((a - f).abs()))
                / scale;
            worst_step = worst_step.max(err);
        }
    }
    hard(
        worst_fd <= 1e-4 && worst_step <= 1e-4,
        format!("{instances} instances; analytic vs FD max rel {worst_fd:.2e}; f32 step/alpha vs FD max rel {worst_step:.2e}"),
    )
}

// 4 -------------------------------------------------------------------------

fn bandwidth_model() -> Outcome {
    let mut notes = Vec::new();
    let mut ok = true;

    let conv = predicted_conventional_bytes(10.0, 10.0, 500.0).unwrap();
    ok &= conv == 204_000.0;
    ok &= approximate_ratio(15.0, 300.0).unwrap() == 15.0 / 300.0;
    notes.push(format!("r(10,10,500)={conv}"));

    // Dynamic windows: payload bounded by r'(2B, n, S).
    let (vocab, corpus) = synthetic_corpus(30_000, 4);
    let config = TrainConfig {
        dim: 40,
        shards: 4,
        window: 5,
        negatives: 5,
        batch_size: 50,
        epochs: 1,
        subsample: 0.0,
        seed: 3,
        ..Default::default()
    };
    let set = local_set(
        &vocab,
        config.dim,
        config.shards,
        config.seed,
        BandwidthMeter::new(),
    );
    train(&corpus, &vocab, &config, &set).unwrap();
    let model = BandwidthModel {
        max_contexts: 2.0 * config.window as f64,
        negatives: config.negatives as f64,
        shards: config.shards as f64,
        dim: config.dim as f64,
    };
    let snap = set.meter().snapshot();
    let report = measured_vs_predicted(&snap, &model).unwrap();
    ok &= report.within_bound;
    // Exact counting identity: F bytes = 4 (pairs + negatives) S.
    ok &= snap.payload_received == 4 * (snap.pairs + snap.negative_samples) * config.shards as u64;
    ok &= snap.payload_sent == snap.payload_received;
    ok &= report.index_share.unwrap() < report.payload_share.unwrap();
    notes.push(format!(
        "dynamic: F {:.1} B/word <= r' {:.0}, index share {:.3}",
        report.measured_f_per_word.unwrap(),
        report.predicted_upper,
        report.index_share.unwrap()
    ));

    // Forced windows on long sentences: nearly every input has exactly 2B
    // contexts, so payload approaches the bound.
    let mut d = SeededDraw::new(5);
    let text: String = (0..40)
        .map(|_| {
            (0..500)
                .map(|_| format!("w{}", d.next_below(300)))
                .collect::<Vec<_>>()
                .join(" ")
                + "\n"
        })
        .collect();
    let vocab = build_vocabulary(&text, 1, None).unwrap();
    let (corpus, _) = preprocess(&text, &vocab);
    let forced = TrainConfig {
        dynamic_window: false,
        shards: 4,
        ..config.clone()
    };
    let set = local_set(
        &vocab,
        forced.dim,
        forced.shards,
        forced.seed,
        BandwidthMeter::new(),
    );
    train(&corpus, &vocab, &forced, &set).unwrap();
    let report = measured_vs_predicted(&set.meter().snapshot(), &model).unwrap();
    let f = report.measured_f_per_word.unwrap();
    let g = report.measured_g_per_word.unwrap();
    let rel = (report.predicted_upper - f.min(g)) / report.predicted_upper;
    ok &= report.within_bound && rel <= 0.02;
    notes.push(format!(
        "forced: F {f:.1}, G {g:.1} vs r' {:.0} ({:.2}% below)",
        report.predicted_upper,
        rel * 100.0
    ));
    hard(ok, notes.join("; "))
}

// 5 -------------------------------------------------------------------------

fn no_vector_transfer() -> (Outcome, Outcome) {
    let (vocab, corpus) = synthetic_corpus(100_000, 5);
    let config = TrainConfig {
        dim: 300,
        shards: 15,
        window: 5,
        negatives: 5,
        batch_size: 50,
        epochs: 1,
        subsample: 1e-3,
        seed: 11,
        threads: 4,
        ..Default::default()
    };
    let set = local_set(
        &vocab,
        config.dim,
        config.shards,
        config.seed,
        BandwidthMeter::with_trace(),
    );
    train(&corpus, &vocab, &config, &set).unwrap();
    let trace = set.meter().take_trace();
    let vector_frames = trace.iter().filter(|t| t.carries_vectors).count();
    let schema = hard(
        vector_frames == 0 && !trace.is_empty(),
        format!(
            "{} frames traced over one epoch, {vector_frames} carry vector components",
            trace.len()
        ),
    );

    let s = set.meter().snapshot();
    let conventional = simulated_conventional_bytes(
        s.minibatch_words,
        s.pairs,
        s.negative_samples,
        config.dim as u64,
    );
    let total = s.total_bytes();
    let payload = s.payload_sent + s.payload_received;
    let ratio = conventional as f64 / total as f64;
    let payload_ratio = conventional as f64 / payload as f64;
    let ratio_outcome = hard(
        ratio >= 20.0,
        format!(
            "conventional {conventional} B vs measured {total} B: {ratio:.2}x total, {payload_ratio:.2}x F/G payload only \
             (first-order d/S = {:.0}x)",
            config.dim as f64 / config.shards as f64
        ),
    );
    (schema, ratio_outcome)
}

// 6 -------------------------------------------------------------------------

fn seed_replay() -> Outcome {
    let counts: Vec<u64> = (0..200u64).map(|i| 1000 / (i + 1) + 1).collect();
    let vocab = gridvec_core::Vocabulary::from_counts(
        counts
            .iter()
            .enumerate()
            .map(|(i, &c)| (format!("w{i:03}"), c)),
    )
    .unwrap();
    let shards = local_shards(&vocab, 8, 4, 1);
    let noise = NoiseTable::from_vocabulary(&vocab);
    let mut r = SeededDraw::new(99);
    let mut mismatches = 0;
    let mut exclusion_violations = 0;
    let mut drawn = 0usize;
    let trials = 10_000;
    for _ in 0..trials {
        let b = 1 + r.next_below(6) as usize;
        let inputs: Vec<u32> = (0..b).map(|_| r.next_below(200) as u32).collect();
        let outputs: Vec<Vec<u32>> = (0..b)
            .map(|_| {
                (0..1 + r.next_below(10))
                    .map(|_| r.next_below(200) as u32)
                    .collect()
            })
            .collect();
        let seed = r.next_u64();
        let negatives = 1 + r.next_below(8) as u32;
        let dot = DotprodRequest {
            inputs: inputs.clone(),
            outputs: outputs.clone(),
            seed,
            negatives,
        };
        let batch = Minibatch {
            inputs,
            outputs,
            batch_id: 0,
        };
        let expected = step_negatives(&noise, &batch, negatives, seed);
        for (p, (_, w_out)) in batch.iter_pairs().enumerate() {
            let n = negatives as usize;
            exclusion_violations += expected[p * n..(p + 1) * n]
                .iter()
                .filter(|&&k| k == w_out)
                .count();
        }
        drawn += expected.len();
        for shard in &shards {
            let mut t_dot = Vec::new();
            let f = shard.dotprod_traced(&dot, Some(&mut t_dot)).unwrap();
            let mut t_adj = Vec::new();
            shard
                .adjust_traced(
                    &AdjustRequest {
                        inputs: dot.inputs.clone(),
                        outputs: dot.outputs.clone(),
                        g_plus: vec![0.0; f.f_plus.len()],
                        g_minus: vec![0.0; f.f_minus.len()],
                        seed,
                        negatives,
                    },
                    Some(&mut t_adj),
                )
                .unwrap();
            if t_dot != expected || t_adj != expected {
                mismatches += 1;
            }
        }
    }
    hard(
        mismatches == 0 && exclusion_violations == 0,
        format!(
            "{trials} dotprod/adjust pairs on 4 shards, {drawn} negatives each; {mismatches} mismatched sequences, \
             {exclusion_violations} negatives equal to their positive"
        ),
    )
}

// 7 and 8 -------------------------------------------------------------------

fn plant_analogies(set: &mut EmbeddingSet, count: usize, seed: u64) -> Vec<[String; 4]> {
    let mut r = SeededDraw::new(seed);
    let n = set.len() as u64;
    let unit = |v: &[f32]| {
        let norm = v.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
        v.iter()
            .map(|&x| (x as f64 / norm) as f32)
            .collect::<Vec<f32>>()
    };
    let mut questions = Vec::new();
    for q in 0..count {
        let idx: Vec<usize> = (0..3).map(|_| r.next_below(n) as usize).collect();
        if idx[0] == idx[1] || idx[1] == idx[2] || idx[0] == idx[2] {
            continue;
        }
        let [a, b, c] = [0, 1, 2].map(|k| unit(set.vector(idx[k])));
        let d: Vec<f32> = (0..set.dim()).map(|i| b[i] - a[i] + c[i]).collect();
        let token = format!("__planted_{q}");
        set.push(&token, &d).unwrap();
        let w = |k: usize| set.words()[idx[k]].clone();
        questions.push([w(0), w(1), w(2), token]);
    }
    questions
}

fn quality_parity() -> (Outcome, Outcome) {
    let started = Instant::now();
    let text = std::fs::read_to_string(data("wiki_excerpt.txt")).expect("vendored corpus");
    let vocab = build_vocabulary(&text, 5, None).unwrap();
    let (corpus, _) = preprocess(&text, &vocab);
    let base = TrainConfig {
        dim: 100,
        window: 5,
        negatives: 5,
        epochs: 10,
        alpha: 0.025,
        subsample: 1e-4,
        min_count: 5,
        seed: 2024,
        ..Default::default()
    };
    let parallel_cfg = TrainConfig {
        shards: 4,
        threads: 8,
        batch_size: 50,
        ..base.clone()
    };
    let oracle_cfg = TrainConfig {
        shards: 1,
        threads: 1,
        batch_size: 1,
        ..base
    };
    let set = local_set(
        &vocab,
        parallel_cfg.dim,
        parallel_cfg.shards,
        parallel_cfg.seed,
        BandwidthMeter::new(),
    );
    train(&corpus, &vocab, &parallel_cfg, &set).unwrap();
    let parallel = set.export().unwrap();
    let (oracle, _) = oracle_train(&corpus, &vocab, &oracle_cfg).unwrap();

    let parallel_set =
        EmbeddingSet::from_vocabulary(&vocab, parallel.dim, &parallel.input).unwrap();
    let oracle_set = EmbeddingSet::from_vocabulary(&vocab, oracle.dim, &oracle.input).unwrap();
    let judgments = SimilarityJudgments::load(data("wordsim353.tsv")).unwrap();
    let sp = spearman(&parallel_set, &judgments).unwrap();
    let so = spearman(&oracle_set, &judgments).unwrap();
    let questions = parse_analogies(
        &std::fs::read_to_string(data("questions-words.txt"))
            .unwrap()
            .to_lowercase(),
    )
    .unwrap();
    let real_p = analogy_accuracy(&parallel_set, &questions);
    let real_o = analogy_accuracy(&oracle_set, &questions);

    let mut planted_p = parallel_set.clone();
    let qp = plant_analogies(&mut planted_p, 200, 1);
    let mut planted_o = oracle_set.clone();
    let qo = plant_analogies(&mut planted_o, 200, 1);
    let ap = analogy_accuracy(&planted_p, &qp);
    let ao = analogy_accuracy(&planted_o, &qo);

    let gap = (sp.rho - so.rho).abs();
    let fmt_acc = |r: &gridvec_core::eval::AnalogyResult| {
        r.accuracy.map_or("n/a".to_string(), |a| {
            format!("{:.3} of {}", a, r.questions_used)
        })
    };
    let parity = hard(
        gap <= 0.05 && ap.accuracy == Some(1.0) && ao.accuracy == Some(1.0),
        format!(
            "{} tokens, |V|={}; wordsim rho parallel {:.3} vs oracle {:.3} (gap {gap:.3}, {} pairs); planted analogies \
             {}/{} and {}/{}; real analogies parallel {} oracle {}; {:.0}s",
            corpus.total_tokens,
            vocab.len(),
            sp.rho,
            so.rho,
            sp.pairs_used,
            ap.correct,
            ap.questions_used,
            ao.correct,
            ao.questions_used,
            fmt_acc(&real_p),
            fmt_acc(&real_o),
            started.elapsed().as_secs_f64()
        ),
    );

    let pairs = sample_pairs(&oracle_set, &parallel_set, 5000, 8);
    let agreement = agreement_report(&oracle_set, &parallel_set, &pairs);
    let soft_pass = agreement.fraction_below_006 >= 0.5 && agreement.fraction_below_01 >= 0.91;
    let cosine = Outcome {
        passed: soft_pass,
        soft: true,
        detail: format!(
            "{} pairs: {:.1}% differ by < 0.06, {:.1}% by < 0.1, mean |diff| {:.3}",
            agreement.pairs,
            agreement.fraction_below_006 * 100.0,
            agreement.fraction_below_01 * 100.0,
            agreement.mean_abs_diff
        ),
    };
    (parity, cosine)
}

// 9 -------------------------------------------------------------------------

fn deferred_updates() -> Outcome {
    let vocab_size = 12u32;
    let counts: Vec<u64> = (0..vocab_size as u64).map(|i| 50 - 3 * i).collect();
    let vocab = gridvec_core::Vocabulary::from_counts(
        counts
            .iter()
            .enumerate()
            .map(|(i, &c)| (format!("w{i:02}"), c)),
    )
    .unwrap();
    let noise = NoiseTable::from_vocabulary(&vocab);
    let mut r = SeededDraw::new(31);
    let mut mismatches = 0;
    let mut naive_differs = 0;
    let trials = 500;
    for t in 0..trials {
        let shards = local_shards(&vocab, 6, 2, t);
        for s in &shards {
            for w in 0..vocab_size {
                let row: Vec<f32> = (0..s.store().width())
                    .map(|_| (r.next_f64() - 0.5) as f32)
                    .collect();
                s.store().set_row(Matrix::Output, w, &row);
            }
        }
        // Few distinct words so inputs, contexts and negatives repeat.
        let b = 2 + r.next_below(5) as usize;
        let inputs: Vec<u32> = (0..b).map(|_| r.next_below(4) as u32).collect();
        let outputs: Vec<Vec<u32>> = (0..b)
            .map(|_| {
                (0..1 + r.next_below(4))
                    .map(|_| r.next_below(vocab_size as u64) as u32)
                    .collect()
            })
            .collect();
        let negatives = r.next_below(4) as u32;
        let seed = r.next_u64();
        let batch = Minibatch {
            inputs: inputs.clone(),
            outputs: outputs.clone(),
            batch_id: 0,
        };
        let negs = step_negatives(&noise, &batch, negatives, seed);
        let pairs = batch.pairs();
        let g_plus: Vec<f32> = (0..pairs).map(|_| (r.next_f64() - 0.5) as f32).collect();
        let g_minus: Vec<f32> = (0..pairs * negatives as usize)
            .map(|_| (r.next_f64() - 0.5) as f32)
            .collect();

        for s in &shards {
            let width = s.store().width();
            let before_u: Vec<Vec<f32>> = (0..vocab_size)
                .map(|w| s.store().row_vec(Matrix::Input, w))
                .collect();
            let before_v: Vec<Vec<f32>> = (0..vocab_size)
                .map(|w| s.store().row_vec(Matrix::Output, w))
                .collect();
            // Scratch-buffer reference: every delta from pre-call values.
            let mut du: HashMap<u32, Vec<f32>> = HashMap::new();
            let mut dv: HashMap<u32, Vec<f32>> = HashMap::new();
            let n = negatives as usize;
            for (p, (wi, wo)) in batch.iter_pairs().enumerate() {
                let mut terms = vec![(wo, g_plus[p])];
                terms.extend(
                    negs[p * n..(p + 1) * n]
                        .iter()
                        .enumerate()
                        .map(|(j, &k)| (k, g_minus[p * n + j])),
                );
                for (w, g) in terms {
                    let a = du.entry(wi).or_insert_with(|| vec![0.0; width]);
                    for c in 0..width {
                        a[c] += g * before_v[w as usize][c];
                    }
                    let a = dv.entry(w).or_insert_with(|| vec![0.0; width]);
                    for c in 0..width {
                        a[c] += g * before_u[wi as usize][c];
                    }
                }
            }
            let expect =
                |before: &Vec<Vec<f32>>, delta: &HashMap<u32, Vec<f32>>, w: u32| -> Vec<f32> {
                    match delta.get(&w) {
                        Some(d) => before[w as usize]
                            .iter()
                            .zip(d)
                            .map(|(x, y)| x + y)
                            .collect(),
                        None => before[w as usize].clone(),
                    }
                };
            s.adjust(&AdjustRequest {
                inputs: inputs.clone(),
                outputs: outputs.clone(),
                g_plus: g_plus.clone(),
                g_minus: g_minus.clone(),
                seed,
                negatives,
            })
            .unwrap();
            for w in 0..vocab_size {
                if bits(&s.store().row_vec(Matrix::Input, w)) != bits(&expect(&before_u, &du, w))
                    || bits(&s.store().row_vec(Matrix::Output, w))
                        != bits(&expect(&before_v, &dv, w))
                {
                    mismatches += 1;
                }
            }

            // A naive in-place update order, for contrast.
            let mut u = before_u.clone();
            let mut v = before_v.clone();
            for (p, (wi, wo)) in batch.iter_pairs().enumerate() {
                let mut terms = vec![(wo, g_plus[p])];
                terms.extend(
                    negs[p * n..(p + 1) * n]
                        .iter()
                        .enumerate()
                        .map(|(j, &k)| (k, g_minus[p * n + j])),
                );
                for (w, g) in terms {
                    let (uu, vv) = (u[wi as usize].clone(), v[w as usize].clone());
                    for c in 0..width {
                        u[wi as usize][c] += g * vv[c];
                        v[w as usize][c] += g * uu[c];
                    }
                }
            }
            if (0..vocab_size)
                .any(|w| bits(&u[w as usize]) != bits(&s.store().row_vec(Matrix::Input, w)))
            {
                naive_differs += 1;
            }
        }
    }
    hard(
        mismatches == 0,
        format!(
            "{trials} minibatches x 2 shards with repeated words: {mismatches} rows differ from the scratch reference \
             (a naive in-place update differs in {naive_differs} cases)"
        ),
    )
}

fn main() {
    // Keep unrelated panics quiet; each criterion reports its own result.
    let default_hook = panic::take_hook();
    panic::set_hook(Box::new(move |info| {
        eprintln!("panic inside a criterion:");
        default_hook(info);
    }));
    let filter: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let wanted = |n: &str| filter.is_empty() || filter.iter().any(|f| n.contains(f.as_str()));

    type Runner = fn() -> Vec<(&'static str, Outcome)>;
    let criteria: Vec<(&str, Runner)> = vec![
        ("1 strict equivalence", || {
            vec![("1 strict equivalence", strict_equivalence())]
        }),
        ("2 shard-count invariance", || {
            vec![("2 shard-count invariance", shard_count_invariance())]
        }),
        ("3 gradient check", || {
            vec![("3 gradient check", gradient_check())]
        }),
        ("4 bandwidth model", || {
            vec![("4 bandwidth model", bandwidth_model())]
        }),
        ("5 no vector transfer", || {
            let (a, b) = no_vector_transfer();
            vec![
                ("5a no vector components on the wire", a),
                ("5b traffic >= 20x below conventional", b),
            ]
        }),
        ("6 seed replay", || vec![("6 seed replay", seed_replay())]),
        ("7/8 quality parity and cosine agreement", || {
            let (a, b) = quality_parity();
            vec![
                ("7 desk-scale quality parity", a),
                ("8 cosine agreement (soft)", b),
            ]
        }),
        ("9 deferred updates", || {
            vec![("9 deferred adjust semantics", deferred_updates())]
        }),
    ];

    let mut failed = 0;
    let mut ran = 0;
    for (name, run) in criteria {
        if !wanted(name) {
            continue;
        }
        let start = Instant::now();
        let results = match panic::catch_unwind(AssertUnwindSafe(run)) {
            Ok(r) => r,
            Err(_) => vec![(name, hard(false, "panicked".into()))],
        };
        let secs = start.elapsed().as_secs_f64();
        for (label, o) in results {
            ran += 1;
            let status = match (o.passed, o.soft) {
                (true, _) => "PASS",
                (false, true) => "SOFT-FAIL",
                (false, false) => "FAIL",
            };
            if !o.passed && !o.soft {
                failed += 1;
            }
            println!("criterion {label}: {status} [{secs:.1}s] {}", o.detail);
        }
    }
    println!("acceptance: {ran} checks, {failed} hard failures");
    if failed > 0 {
        std::process::exit(1);
    }
}
