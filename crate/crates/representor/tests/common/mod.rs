//! Shared fixtures and oracles for the integration suites.
//!
//! The trained toy model is built once per test binary and shared as
//! serialized checkpoint bytes (tensors are not thread-safe to share
//! directly); each test restores its own copy.

// Different test binaries use different subsets of these helpers.
#![allow(dead_code)]

use std::sync::OnceLock;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use representor::checkpoint;
use representor::data::{Objective, Order, Task, TokenPair};
use representor::decode::{beam_search, length_penalty, DecodeMode, DecodeRequest, Hypothesis};
use representor::model::{DecoderBootstrap, HyperParams, Representor, SharingConfig};
use representor::tensor::no_grad;
use representor::train::{train, TrainConfig};
use representor::vocab::{build_frequency_vocab, SharedVocabulary, Side, BOS, EOS, S2T, T2S};

pub const CIPHER_SYMBOLS: usize = 50;
pub const TRAIN_PAIRS: usize = 5000;
pub const TEST_PAIRS: usize = 500;

/// Deterministic token-substitution cipher corpus: target token j is the
/// permuted image of source token j, position for position.
pub fn cipher_corpus(n: usize, rng: &mut ChaCha12Rng, perm: &[usize]) -> Vec<TokenPair> {
    let mut pairs = Vec::with_capacity(n);
    for _ in 0..n {
        let len = rng.gen_range(3..=12);
        let idx: Vec<usize> = (0..len).map(|_| rng.gen_range(0..CIPHER_SYMBOLS)).collect();
        let src: Vec<String> = idx.iter().map(|i| format!("s{i:02}")).collect();
        let tgt: Vec<String> = idx.iter().map(|i| format!("t{:02}", perm[*i])).collect();
        pairs.push((src, tgt));
    }
    pairs
}

pub struct ToyFixture {
    dir: tempfile::TempDir,
    pub vocab_text: String,
    pub test_pairs: Vec<TokenPair>,
    pub train_seconds: f64,
    pub train_steps: usize,
}

impl ToyFixture {
    pub fn vocab(&self) -> SharedVocabulary {
        SharedVocabulary::from_file_string(&self.vocab_text).unwrap()
    }

    pub fn model(&self) -> Representor {
        checkpoint::load(&self.dir.path().join("checkpoint.bin"))
            .unwrap()
            .model
    }
}

static FIXTURE: OnceLock<ToyFixture> = OnceLock::new();

/// The trained four-direction toy model: 2 layers, d=64, trained with the
/// combined objective on the cipher corpus.
pub fn toy_fixture() -> &'static ToyFixture {
    FIXTURE.get_or_init(|| {
        let mut rng = ChaCha12Rng::seed_from_u64(77);
        let mut perm: Vec<usize> = (0..CIPHER_SYMBOLS).collect();
        for i in (1..CIPHER_SYMBOLS).rev() {
            let j = rng.gen_range(0..=i);
            perm.swap(i, j);
        }
        let train_pairs = cipher_corpus(TRAIN_PAIRS, &mut rng, &perm);
        let test_pairs = cipher_corpus(TEST_PAIRS, &mut rng, &perm);

        let sr: Vec<&[String]> = train_pairs.iter().map(|p| p.0.as_slice()).collect();
        let tr: Vec<&[String]> = train_pairs.iter().map(|p| p.1.as_slice()).collect();
        let vocab = SharedVocabulary::build_shared(
            build_frequency_vocab(sr, CIPHER_SYMBOLS).unwrap(),
            build_frequency_vocab(tr, CIPHER_SYMBOLS).unwrap(),
        )
        .unwrap();

        let hyper = HyperParams {
            num_layers: 2,
            model_dim: 64,
            num_heads: 4,
            ffn_dim: 128,
            vocab_rows: vocab.shared_rows(),
            max_len: 32,
        };
        let mut model = Representor::init(SharingConfig::representor(), hyper, 42).unwrap();
        let cfg = TrainConfig {
            objective: Objective::Cfp,
            warmup_steps: 300,
            batch_size: 64,
            max_steps: 4000,
            seed: 9,
            label_smoothing: 0.0,
            ..TrainConfig::default()
        };
        let dir = tempfile::tempdir().unwrap();
        eprintln!("[fixture] training toy model ({} steps)...", cfg.max_steps);
        let t0 = Instant::now();
        let report = train(&mut model, &train_pairs, &vocab, &cfg, Some(dir.path()), None)
            .expect("toy training failed");
        let train_seconds = t0.elapsed().as_secs_f64();
        eprintln!(
            "[fixture] trained in {train_seconds:.0}s, final loss {:.3}",
            report.final_loss
        );
        ToyFixture {
            dir,
            vocab_text: vocab.to_file_string(),
            test_pairs,
            train_seconds,
            train_steps: report.steps,
        }
    })
}

/// Task-labeled source ids and the expected output payload ids for one test
/// pair under a direction.
pub fn directed_ids(
    vocab: &SharedVocabulary,
    pair: &TokenPair,
    task: Task,
) -> (Vec<usize>, Vec<usize>) {
    let (input_side, output_side, label) = match task {
        Task::S2T => (Side::Src, Side::Tgt, S2T),
        Task::T2S => (Side::Tgt, Side::Src, T2S),
    };
    let (input_toks, output_toks) = match task {
        Task::S2T => (&pair.0, &pair.1),
        Task::T2S => (&pair.1, &pair.0),
    };
    let mut source_ids = vec![label];
    source_ids.extend(vocab.tokens_to_ids(input_side, input_toks));
    let expect = vocab.tokens_to_ids(output_side, output_toks);
    (source_ids, expect)
}

/// Greedy (beam 1) exact-sequence hit for one pair and direction.
pub fn greedy_exact(
    model: &Representor,
    vocab: &SharedVocabulary,
    pair: &TokenPair,
    task: Task,
    order: Order,
) -> bool {
    let (source_ids, expect) = directed_ids(vocab, pair, task);
    let req = DecodeRequest {
        source_ids,
        mode: match order {
            Order::L2R => DecodeMode::L2R,
            Order::R2L => DecodeMode::R2L,
        },
        beam: 1,
        alpha: 0.6,
        max_len: 16,
    };
    let hyps = beam_search(model, &req).unwrap();
    if !hyps[0].finished {
        return false;
    }
    let mut payload = hyps[0].payload().to_vec();
    if order == Order::R2L {
        payload.reverse();
    }
    payload == expect
}

pub fn greedy_accuracy(
    model: &Representor,
    vocab: &SharedVocabulary,
    pairs: &[TokenPair],
    task: Task,
    order: Order,
) -> f64 {
    let hits = pairs
        .iter()
        .filter(|p| greedy_exact(model, vocab, p, task, order))
        .count();
    hits as f64 / pairs.len() as f64
}

/// Token-by-token argmax decoder, independent of the beam implementation;
/// the oracle for the beam-degeneracy criterion.
pub fn greedy_reference(
    model: &Representor,
    source_ids: &[usize],
    label: usize,
    alpha: f64,
    max_len: usize,
) -> Hypothesis {
    no_grad(|| {
        let s = source_ids.len();
        let mask = vec![true; s];
        let z = model.encode(source_ids, &mask, 1, s, &mut None).unwrap();
        let mut ids = vec![label];
        let mut logp = 0.0;
        let mut finished = false;
        while ids.len() - 1 < max_len {
            let mut prefix = vec![BOS];
            prefix.extend_from_slice(&ids);
            let logits = model
                .decode_step(&z, &mask, &prefix, 1, prefix.len(), DecoderBootstrap::Bos)
                .unwrap();
            let row = &logits[0];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z_sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let log_z = max + z_sum.ln();
            let mut best = 0usize;
            for (i, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = i;
                }
            }
            logp += row[best] - log_z;
            ids.push(best);
            if best == EOS {
                finished = true;
                break;
            }
        }
        let plen = ids.len() - 1 - usize::from(finished);
        Hypothesis {
            score: logp / length_penalty(plen, alpha),
            ids,
            logp,
            finished,
        }
    })
}

/// Relative error with a small floor so near-zero gradients compare on an
/// absolute scale.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-2)
}

/// Central finite differences of `f` at `x`.
pub fn finite_diff(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
    let mut g = Vec::with_capacity(x.len());
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        let orig = xp[i];
        xp[i] = orig + step;
        let hi = f(&xp);
        xp[i] = orig - step;
        let lo = f(&xp);
        xp[i] = orig;
        g.push((hi - lo) / (2.0 * step));
    }
    g
}

/// One pass/fail line per criterion, then the assertion.
pub fn criterion(name: &str, ok: bool, detail: &str) {
    let verdict = if ok { "PASS" } else { "FAIL" };
    println!("ACCEPTANCE {name}: {verdict} ({detail})");
    assert!(ok, "criterion {name} failed: {detail}");
}
