//! Turns a parallel corpus into direction-tagged training examples and
//! padded batches.
//!
//! Each sentence pair expands into up to four examples: the task label
//! (`<s2t>`/`<t2s>`) leads the input, the order label (`<l2r>`/`<r2l>`)
//! leads the output, and an `<eos>` closes it. The reverse-order variant
//! reverses only the payload, never the label or `<eos>`.

use std::fmt;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::vocab::{self, SharedVocabulary, Side};

/// Longest payload accepted on either side, chosen so every labeled and
/// `<eos>`-terminated sequence fits in 256 positions.
pub const MAX_PAYLOAD_LEN: usize = 254;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Task {
    S2T,
    T2S,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Order {
    L2R,
    R2L,
}

impl Task {
    pub fn label_id(self) -> usize {
        match self {
            Task::S2T => vocab::S2T,
            Task::T2S => vocab::T2S,
        }
    }
}

impl Order {
    pub fn label_id(self) -> usize {
        match self {
            Order::L2R => vocab::L2R,
            Order::R2L => vocab::R2L,
        }
    }
}

/// Which training objective a corpus is expanded for: the plain one-direction
/// likelihood, the two bidirectional two-term objectives, or all four
/// directions combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    Baseline,
    StTs,
    LrRl,
    Cfp,
}

impl Objective {
    pub fn directions(self) -> &'static [(Task, Order)] {
        match self {
            Objective::Baseline => &[(Task::S2T, Order::L2R)],
            Objective::StTs => &[(Task::S2T, Order::L2R), (Task::T2S, Order::L2R)],
            Objective::LrRl => &[(Task::S2T, Order::L2R), (Task::S2T, Order::R2L)],
            Objective::Cfp => &[
                (Task::S2T, Order::L2R),
                (Task::S2T, Order::R2L),
                (Task::T2S, Order::L2R),
                (Task::T2S, Order::R2L),
            ],
        }
    }
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Objective::Baseline => "baseline",
            Objective::StTs => "st-ts",
            Objective::LrRl => "lr-rl",
            Objective::Cfp => "cfp",
        };
        f.write_str(s)
    }
}

/// One training instance: task-labeled input ids and order-labeled,
/// `<eos>`-terminated output ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DirectedExample {
    pub input_ids: Vec<usize>,
    pub output_ids: Vec<usize>,
    pub task: Task,
    pub order: Order,
}

#[derive(Debug)]
pub enum DataError {
    Io(std::io::Error),
    LineCountMismatch { src_lines: usize, tgt_lines: usize },
}

impl fmt::Display for DataError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DataError::Io(e) => write!(f, "corpus io error: {e}"),
            DataError::LineCountMismatch { src_lines, tgt_lines } => write!(
                f,
                "parallel files differ in length: {src_lines} source lines vs {tgt_lines} target lines"
            ),
        }
    }
}

impl std::error::Error for DataError {}

impl From<std::io::Error> for DataError {
    fn from(e: std::io::Error) -> Self {
        DataError::Io(e)
    }
}

/// A whitespace-tokenized sentence pair.
pub type TokenPair = (Vec<String>, Vec<String>);

#[derive(Debug, Default, Clone, Copy)]
pub struct CorpusStats {
    pub pairs: usize,
    pub skipped_blank: usize,
    pub skipped_long: usize,
}

/// Reads two line-aligned text files into whitespace-tokenized pairs.
/// CRLF endings are normalized; blank lines on either side drop the pair
/// and are counted.
pub fn load_parallel(
    src_path: &Path,
    tgt_path: &Path,
) -> Result<(Vec<TokenPair>, CorpusStats), DataError> {
    let src_text = fs::read_to_string(src_path)?;
    let tgt_text = fs::read_to_string(tgt_path)?;
    let src_lines: Vec<&str> = split_lines(&src_text);
    let tgt_lines: Vec<&str> = split_lines(&tgt_text);
    if src_lines.len() != tgt_lines.len() {
        return Err(DataError::LineCountMismatch {
            src_lines: src_lines.len(),
            tgt_lines: tgt_lines.len(),
        });
    }
    let mut stats = CorpusStats::default();
    let mut pairs = Vec::with_capacity(src_lines.len());
    for (s, t) in src_lines.iter().zip(&tgt_lines) {
        let sv: Vec<String> = s.split_whitespace().map(str::to_string).collect();
        let tv: Vec<String> = t.split_whitespace().map(str::to_string).collect();
        if sv.is_empty() || tv.is_empty() {
            stats.skipped_blank += 1;
            continue;
        }
        pairs.push((sv, tv));
    }
    stats.pairs = pairs.len();
    Ok((pairs, stats))
}

fn split_lines(text: &str) -> Vec<&str> {
    // str::lines already strips \r\n and \n uniformly.
    text.lines().collect()
}

/// Expands one pair into the directed examples the objective calls for.
/// Returns an empty list for a pair with an empty side; the corpus-level
/// caller counts those.
pub fn augment(
    pair: &TokenPair,
    vocab: &SharedVocabulary,
    objective: Objective,
) -> Vec<DirectedExample> {
    let (src, tgt) = pair;
    if src.is_empty() || tgt.is_empty() {
        return Vec::new();
    }
    let src_ids = vocab.tokens_to_ids(Side::Src, src);
    let tgt_ids = vocab.tokens_to_ids(Side::Tgt, tgt);
    objective
        .directions()
        .iter()
        .map(|&(task, order)| build_example(&src_ids, &tgt_ids, task, order))
        .collect()
}

fn build_example(src_ids: &[usize], tgt_ids: &[usize], task: Task, order: Order) -> DirectedExample {
    let (input_payload, output_payload) = match task {
        Task::S2T => (src_ids, tgt_ids),
        Task::T2S => (tgt_ids, src_ids),
    };
    let mut input_ids = Vec::with_capacity(input_payload.len() + 1);
    input_ids.push(task.label_id());
    input_ids.extend_from_slice(input_payload);

    let mut output_ids = Vec::with_capacity(output_payload.len() + 2);
    output_ids.push(order.label_id());
    match order {
        Order::L2R => output_ids.extend_from_slice(output_payload),
        Order::R2L => output_ids.extend(output_payload.iter().rev()),
    }
    output_ids.push(vocab::EOS);
    DirectedExample { input_ids, output_ids, task, order }
}

/// Expands a whole corpus, counting skipped pairs (blank or overlong sides).
pub fn prepare_examples(
    pairs: &[TokenPair],
    vocab: &SharedVocabulary,
    objective: Objective,
) -> (Vec<DirectedExample>, CorpusStats) {
    let mut stats = CorpusStats::default();
    let mut out = Vec::with_capacity(pairs.len() * objective.directions().len());
    for pair in pairs {
        if pair.0.is_empty() || pair.1.is_empty() {
            stats.skipped_blank += 1;
            continue;
        }
        if pair.0.len() > MAX_PAYLOAD_LEN || pair.1.len() > MAX_PAYLOAD_LEN {
            stats.skipped_long += 1;
            continue;
        }
        stats.pairs += 1;
        out.extend(augment(pair, vocab, objective));
    }
    (out, stats)
}

/// Padded id matrices for one step. `decoder_input_ids` is the `<bos>`-led
/// shift of `decoder_target_ids`; the masks flag non-`<pad>` positions.
#[derive(Debug, Clone)]
pub struct Batch {
    pub size: usize,
    pub src_len: usize,
    pub tgt_len: usize,
    /// [size * src_len]
    pub encoder_ids: Vec<usize>,
    /// [size * tgt_len]
    pub decoder_input_ids: Vec<usize>,
    /// [size * tgt_len]
    pub decoder_target_ids: Vec<usize>,
    pub source_mask: Vec<bool>,
    pub target_mask: Vec<bool>,
    pub directions: Vec<(Task, Order)>,
}

impl Batch {
    /// Builds one batch from examples, padding with `<pad>` (id 0).
    pub fn from_examples(examples: &[DirectedExample]) -> Batch {
        assert!(!examples.is_empty(), "batch needs at least one example");
        let size = examples.len();
        let src_len = examples.iter().map(|e| e.input_ids.len()).max().unwrap();
        let tgt_len = examples.iter().map(|e| e.output_ids.len()).max().unwrap();
        let mut encoder_ids = vec![vocab::PAD; size * src_len];
        let mut decoder_input_ids = vec![vocab::PAD; size * tgt_len];
        let mut decoder_target_ids = vec![vocab::PAD; size * tgt_len];
        let mut source_mask = vec![false; size * src_len];
        let mut target_mask = vec![false; size * tgt_len];
        let mut directions = Vec::with_capacity(size);
        for (row, ex) in examples.iter().enumerate() {
            for (j, &id) in ex.input_ids.iter().enumerate() {
                encoder_ids[row * src_len + j] = id;
                source_mask[row * src_len + j] = true;
            }
            // Teacher forcing: input = <bos> + targets[..n-1], target = full.
            decoder_input_ids[row * tgt_len] = vocab::BOS;
            target_mask[row * tgt_len] = true;
            decoder_target_ids[row * tgt_len] = ex.output_ids[0];
            for (j, &id) in ex.output_ids.iter().enumerate().skip(1) {
                decoder_input_ids[row * tgt_len + j] = ex.output_ids[j - 1];
                decoder_target_ids[row * tgt_len + j] = id;
                target_mask[row * tgt_len + j] = true;
            }
            directions.push((ex.task, ex.order));
        }
        Batch {
            size,
            src_len,
            tgt_len,
            encoder_ids,
            decoder_input_ids,
            decoder_target_ids,
            source_mask,
            target_mask,
            directions,
        }
    }
}

/// Shuffles examples with the given seed and chunks them into batches. All
/// directions mix freely in the stream; one parameter set serves them all.
pub fn make_batches(examples: &[DirectedExample], batch_size: usize, seed: u64) -> Vec<Batch> {
    assert!(batch_size >= 1, "batch_size must be at least 1");
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    order
        .chunks(batch_size)
        .map(|chunk| {
            let exs: Vec<DirectedExample> =
                chunk.iter().map(|&i| examples[i].clone()).collect();
            Batch::from_examples(&exs)
        })
        .collect()
}

/// Tab-separated dump of prepared examples: task, order, input tokens,
/// output tokens (labels and `<eos>` spelled out).
pub fn dump_examples(examples: &[DirectedExample], vocab: &SharedVocabulary) -> String {
    let mut out = String::new();
    for ex in examples {
        let task = match ex.task {
            Task::S2T => "s2t",
            Task::T2S => "t2s",
        };
        let order = match ex.order {
            Order::L2R => "l2r",
            Order::R2L => "r2l",
        };
        let in_side = match ex.task {
            Task::S2T => Side::Src,
            Task::T2S => Side::Tgt,
        };
        let out_side = match ex.task {
            Task::S2T => Side::Tgt,
            Task::T2S => Side::Src,
        };
        let input = vocab.ids_to_tokens(in_side, &ex.input_ids).join(" ");
        let output = vocab.ids_to_tokens(out_side, &ex.output_ids).join(" ");
        out.push_str(&format!("{task}\t{order}\t{input}\t{output}\n"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::{EOS, L2R, R2L, S2T, T2S};
    use proptest::prelude::*;
    use std::io::Write as _;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(|t| t.to_string()).collect()
    }

    fn test_vocab() -> SharedVocabulary {
        SharedVocabulary::build_shared(
            vec!["a".into(), "b".into(), "c".into()],
            vec!["X".into(), "Y".into(), "Z".into()],
        )
        .unwrap()
    }

    #[test]
    fn augment_counts_per_objective() {
        let v = test_vocab();
        let pair = (toks("a b"), toks("X Y"));
        assert_eq!(augment(&pair, &v, Objective::Baseline).len(), 1);
        assert_eq!(augment(&pair, &v, Objective::StTs).len(), 2);
        assert_eq!(augment(&pair, &v, Objective::LrRl).len(), 2);
        assert_eq!(augment(&pair, &v, Objective::Cfp).len(), 4);
    }

    #[test]
    fn length_one_payload_reversal_is_identity() {
        let v = test_vocab();
        let pair = (toks("a b"), toks("X"));
        let exs = augment(&pair, &v, Objective::LrRl);
        let x = v.token_to_id(Side::Tgt, "X");
        assert_eq!(exs[0].output_ids, vec![L2R, x, EOS]);
        assert_eq!(exs[1].output_ids, vec![R2L, x, EOS]);
    }

    #[test]
    fn cfp_four_transforms_by_hand() {
        let v = test_vocab();
        let pair = (toks("a"), toks("X Y"));
        let exs = augment(&pair, &v, Objective::Cfp);
        let a = v.token_to_id(Side::Src, "a");
        let x = v.token_to_id(Side::Tgt, "X");
        let y = v.token_to_id(Side::Tgt, "Y");

        assert_eq!(exs[0].input_ids, vec![S2T, a]);
        assert_eq!(exs[0].output_ids, vec![L2R, x, y, EOS]);

        // S2T reverse order: payload reversed, label and <eos> in place.
        assert_eq!(exs[1].input_ids, vec![S2T, a]);
        assert_eq!(exs[1].output_ids, vec![R2L, y, x, EOS]);

        // T2S forward: target tokens in, source tokens out.
        assert_eq!(exs[2].input_ids, vec![T2S, x, y]);
        assert_eq!(exs[2].output_ids, vec![L2R, a, EOS]);

        assert_eq!(exs[3].input_ids, vec![T2S, x, y]);
        assert_eq!(exs[3].output_ids, vec![R2L, a, EOS]);
    }

    #[test]
    fn tags_match_labels_in_every_direction() {
        let v = test_vocab();
        let pair = (toks("a b c"), toks("X Z"));
        for ex in augment(&pair, &v, Objective::Cfp) {
            assert_eq!(ex.input_ids[0], ex.task.label_id());
            assert_eq!(ex.output_ids[0], ex.order.label_id());
            assert_eq!(*ex.output_ids.last().unwrap(), EOS);
        }
    }

    #[test]
    fn token_conservation_under_lr_rl() {
        let v = test_vocab();
        let pairs = vec![(toks("a b"), toks("X Y Z")), (toks("c"), toks("Z"))];
        let count_payload = |exs: &[DirectedExample]| -> usize {
            exs.iter().map(|e| e.output_ids.len() - 2).sum()
        };
        let (base, _) = prepare_examples(&pairs, &v, Objective::Baseline);
        let (lrrl, _) = prepare_examples(&pairs, &v, Objective::LrRl);
        assert_eq!(count_payload(&lrrl), 2 * count_payload(&base));
    }

    #[test]
    fn skips_blank_and_overlong_pairs() {
        let v = test_vocab();
        let long = vec!["a".to_string(); MAX_PAYLOAD_LEN + 1];
        let pairs = vec![
            (toks("a"), toks("X")),
            (Vec::new(), toks("X")),
            (long, toks("X")),
        ];
        let (exs, stats) = prepare_examples(&pairs, &v, Objective::Baseline);
        assert_eq!(exs.len(), 1);
        assert_eq!(stats.pairs, 1);
        assert_eq!(stats.skipped_blank, 1);
        assert_eq!(stats.skipped_long, 1);
    }

    #[test]
    fn batch_padding_and_masks() {
        let v = test_vocab();
        let exs = [
            augment(&(toks("a b c"), toks("X Y Z")), &v, Objective::Baseline),
            augment(&(toks("a"), toks("X")), &v, Objective::Baseline),
        ]
        .concat();
        let b = Batch::from_examples(&exs);
        assert_eq!(b.size, 2);
        assert_eq!(b.src_len, 4);
        assert_eq!(b.tgt_len, 5);
        // Shorter row: mask true on payload, false on pad slots.
        assert_eq!(&b.source_mask[4..8], &[true, true, false, false]);
        assert_eq!(&b.target_mask[5..10], &[true, true, true, false, false]);
        // Decoder target is decoder input shifted left by one.
        for row in 0..2 {
            for j in 0..b.tgt_len - 1 {
                if b.target_mask[row * b.tgt_len + j + 1] {
                    assert_eq!(
                        b.decoder_input_ids[row * b.tgt_len + j + 1],
                        b.decoder_target_ids[row * b.tgt_len + j]
                    );
                }
            }
            assert_eq!(b.decoder_input_ids[row * b.tgt_len], crate::vocab::BOS);
        }
    }

    #[test]
    fn single_example_batch_mask_all_true() {
        let v = test_vocab();
        let exs = augment(&(toks("a b"), toks("X Y")), &v, Objective::Baseline);
        let b = Batch::from_examples(&exs);
        assert!(b.source_mask.iter().all(|&m| m));
        assert!(b.target_mask.iter().all(|&m| m));
    }

    #[test]
    fn batching_is_deterministic_per_seed() {
        let v = test_vocab();
        let pairs: Vec<TokenPair> = (0..20)
            .map(|i| {
                let s = ["a", "b", "c"][i % 3];
                (toks(s), toks("X Y"))
            })
            .collect();
        let (exs, _) = prepare_examples(&pairs, &v, Objective::Cfp);
        let b1 = make_batches(&exs, 7, 99);
        let b2 = make_batches(&exs, 7, 99);
        assert_eq!(b1.len(), b2.len());
        for (x, y) in b1.iter().zip(&b2) {
            assert_eq!(x.encoder_ids, y.encoder_ids);
            assert_eq!(x.decoder_target_ids, y.decoder_target_ids);
        }
        let b3 = make_batches(&exs, 7, 100);
        assert!(b1.iter().zip(&b3).any(|(x, y)| x.encoder_ids != y.encoder_ids));
    }

    #[test]
    fn load_parallel_counts_and_crlf() {
        let dir = tempfile::tempdir().unwrap();
        let sp = dir.path().join("c.src");
        let tp = dir.path().join("c.tgt");
        std::fs::write(&sp, "a b\r\n\r\nc d\r\n").unwrap();
        std::fs::write(&tp, "X\nY\nZ\n").unwrap();
        let (pairs, stats) = load_parallel(&sp, &tp).unwrap();
        assert_eq!(pairs.len(), 2);
        assert_eq!(stats.skipped_blank, 1);
        assert_eq!(pairs[0], (toks("a b"), toks("X")));

        // LF-only input gives identical pairs.
        let sp2 = dir.path().join("c2.src");
        std::fs::write(&sp2, "a b\n\nc d\n").unwrap();
        let (pairs2, _) = load_parallel(&sp2, &tp).unwrap();
        assert_eq!(pairs, pairs2);
    }

    #[test]
    fn load_parallel_mismatch_reports_counts() {
        let dir = tempfile::tempdir().unwrap();
        let sp = dir.path().join("m.src");
        let tp = dir.path().join("m.tgt");
        let mut f = std::fs::File::create(&sp).unwrap();
        writeln!(f, "one\ntwo\nthree").unwrap();
        std::fs::write(&tp, "X\n").unwrap();
        match load_parallel(&sp, &tp) {
            Err(DataError::LineCountMismatch { src_lines: 3, tgt_lines: 1 }) => {}
            other => panic!("expected mismatch error, got {other:?}"),
        }
    }

    #[test]
    fn dump_format_is_tab_separated() {
        let v = test_vocab();
        let exs = augment(&(toks("a"), toks("X Y")), &v, Objective::LrRl);
        let dump = dump_examples(&exs, &v);
        let lines: Vec<&str> = dump.lines().collect();
        assert_eq!(lines[0], "s2t\tl2r\t<s2t> a\t<l2r> X Y <eos>");
        assert_eq!(lines[1], "s2t\tr2l\t<s2t> a\t<r2l> Y X <eos>");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn reversal_is_an_involution(payload in proptest::collection::vec(0usize..50, 1..20)) {
            let reversed: Vec<usize> = payload.iter().rev().copied().collect();
            let double: Vec<usize> = reversed.iter().rev().copied().collect();
            prop_assert_eq!(payload, double);
        }

        #[test]
        fn augment_counts_hold_for_random_pairs(
            src_len in 1usize..8,
            tgt_len in 1usize..8,
        ) {
            let v = test_vocab();
            let src: Vec<String> = (0..src_len).map(|i| ["a","b","c"][i % 3].to_string()).collect();
            let tgt: Vec<String> = (0..tgt_len).map(|i| ["X","Y","Z"][i % 3].to_string()).collect();
            let pair = (src, tgt);
            prop_assert_eq!(augment(&pair, &v, Objective::Cfp).len(), 4);
            prop_assert_eq!(augment(&pair, &v, Objective::StTs).len(), 2);
            prop_assert_eq!(augment(&pair, &v, Objective::LrRl).len(), 2);
            prop_assert_eq!(augment(&pair, &v, Objective::Baseline).len(), 1);

            // R2L example payload reversed twice equals the L2R payload.
            let exs = augment(&pair, &v, Objective::LrRl);
            let l2r_payload = &exs[0].output_ids[1..exs[0].output_ids.len() - 1];
            let r2l_payload = &exs[1].output_ids[1..exs[1].output_ids.len() - 1];
            let back: Vec<usize> = r2l_payload.iter().rev().copied().collect();
            prop_assert_eq!(l2r_payload.to_vec(), back);
        }
    }
}
