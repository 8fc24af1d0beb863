//! Case-insensitive corpus BLEU, direction-ratio statistics and
//! length-bucket reports.
//!
//! BLEU here is the unsmoothed corpus statistic: clipped modified n-gram
//! precisions up to 4, geometric mean, brevity penalty
//! `exp(min(0, 1 - ref_len/hyp_len))`. Text is lowercased before counting
//! and never retokenized beyond whitespace splits.

use std::collections::HashMap;
use std::fmt;

use crate::data::Order;

pub const MAX_NGRAM: usize = 4;

#[derive(Debug)]
pub enum EvalError {
    EmptyCorpus,
    LengthMismatch { hyps: usize, refs: usize },
    MissingDirection { line: usize },
}

impl fmt::Display for EvalError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EvalError::EmptyCorpus => write!(f, "cannot score an empty corpus"),
            EvalError::LengthMismatch { hyps, refs } => {
                write!(f, "hypothesis/reference count mismatch: {hyps} vs {refs}")
            }
            EvalError::MissingDirection { line } => {
                write!(f, "line {line} lacks a direction field")
            }
        }
    }
}

impl std::error::Error for EvalError {}

#[derive(Debug, Clone, PartialEq)]
pub struct BleuReport {
    /// 0 to 100.
    pub bleu: f64,
    pub precisions: [f64; MAX_NGRAM],
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
}

fn fold_case(tokens: &[String]) -> Vec<String> {
    tokens.iter().map(|t| t.to_lowercase()).collect()
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus BLEU with one or more references per sentence. Reference length
/// uses the closest reference (ties to the shorter one).
pub fn corpus_bleu(hyps: &[Vec<String>], refs: &[Vec<Vec<String>>]) -> Result<BleuReport, EvalError> {
    if hyps.is_empty() {
        return Err(EvalError::EmptyCorpus);
    }
    if hyps.len() != refs.len() {
        return Err(EvalError::LengthMismatch { hyps: hyps.len(), refs: refs.len() });
    }
    let mut matches = [0usize; MAX_NGRAM];
    let mut totals = [0usize; MAX_NGRAM];
    let mut hyp_len = 0usize;
    let mut ref_len = 0usize;
    for (hyp, ref_set) in hyps.iter().zip(refs) {
        let hyp = fold_case(hyp);
        let folded: Vec<Vec<String>> = ref_set.iter().map(|r| fold_case(r)).collect();
        hyp_len += hyp.len();
        ref_len += closest_ref_len(hyp.len(), &folded);
        for n in 1..=MAX_NGRAM {
            let hyp_counts = ngram_counts(&hyp, n);
            let ref_counts: Vec<HashMap<&[String], usize>> =
                folded.iter().map(|r| ngram_counts(r, n)).collect();
            let mut clipped = 0usize;
            for (gram, &count) in &hyp_counts {
                let best_ref = ref_counts
                    .iter()
                    .map(|rc| rc.get(gram).copied().unwrap_or(0))
                    .max()
                    .unwrap_or(0);
                clipped += count.min(best_ref);
            }
            matches[n - 1] += clipped;
            totals[n - 1] += hyp_counts.values().sum::<usize>();
        }
    }
    let mut precisions = [0.0; MAX_NGRAM];
    for n in 0..MAX_NGRAM {
        precisions[n] = if totals[n] == 0 {
            0.0
        } else {
            matches[n] as f64 / totals[n] as f64
        };
    }
    let brevity_penalty = if hyp_len == 0 {
        0.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).min(0.0).exp()
    };
    let bleu = if precisions.iter().any(|&p| p == 0.0) {
        0.0
    } else {
        let log_mean =
            precisions.iter().map(|p| p.ln()).sum::<f64>() / MAX_NGRAM as f64;
        100.0 * brevity_penalty * log_mean.exp()
    };
    Ok(BleuReport { bleu, precisions, brevity_penalty, hyp_len, ref_len })
}

/// Single-reference convenience wrapper.
pub fn corpus_bleu_single(
    hyps: &[Vec<String>],
    refs: &[Vec<String>],
) -> Result<BleuReport, EvalError> {
    let wrapped: Vec<Vec<Vec<String>>> = refs.iter().map(|r| vec![r.clone()]).collect();
    corpus_bleu(hyps, &wrapped)
}

fn closest_ref_len(hyp_len: usize, refs: &[Vec<String>]) -> usize {
    let mut best = refs[0].len();
    for r in refs {
        let d = r.len().abs_diff(hyp_len);
        let bd = best.abs_diff(hyp_len);
        if d < bd || (d == bd && r.len() < best) {
            best = r.len();
        }
    }
    best
}

/// Smoothed sentence-level BLEU (add-one on the higher n-gram orders).
/// Debugging aid only; corpus scores use the unsmoothed statistic.
pub fn sentence_bleu_smoothed(hyp: &[String], reference: &[String]) -> f64 {
    let hyp = fold_case(hyp);
    let reference = fold_case(reference);
    if hyp.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=MAX_NGRAM {
        let hyp_counts = ngram_counts(&hyp, n);
        let ref_counts = ngram_counts(&reference, n);
        let mut clipped = 0usize;
        for (gram, &c) in &hyp_counts {
            clipped += c.min(ref_counts.get(gram).copied().unwrap_or(0));
        }
        let total = hyp_counts.values().sum::<usize>();
        let (num, den) = if n == 1 {
            (clipped as f64, total.max(1) as f64)
        } else {
            (clipped as f64 + 1.0, total as f64 + 1.0)
        };
        if num == 0.0 {
            return 0.0;
        }
        log_sum += (num / den).ln();
    }
    let bp = (1.0 - reference.len() as f64 / hyp.len() as f64).min(0.0).exp();
    100.0 * bp * (log_sum / MAX_NGRAM as f64).exp()
}

/// Percentage of sentences decoded in each order by mixed decoding.
pub fn direction_ratio(orders: &[Order]) -> Result<(f64, f64), EvalError> {
    if orders.is_empty() {
        return Err(EvalError::EmptyCorpus);
    }
    let l2r = orders.iter().filter(|o| **o == Order::L2R).count();
    let total = orders.len() as f64;
    let l2r_pct = 100.0 * l2r as f64 / total;
    Ok((l2r_pct, 100.0 - l2r_pct))
}

/// Parses the tab-separated verbose decode format
/// (`direction<TAB>score<TAB>payload`) into the chosen orders.
pub fn parse_verbose_directions(text: &str) -> Result<Vec<Order>, EvalError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let field = line
            .split('\t')
            .next()
            .ok_or(EvalError::MissingDirection { line: i + 1 })?;
        match field {
            "l2r" => out.push(Order::L2R),
            "r2l" => out.push(Order::R2L),
            _ => return Err(EvalError::MissingDirection { line: i + 1 }),
        }
    }
    if out.is_empty() {
        return Err(EvalError::EmptyCorpus);
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct LengthBucket {
    /// Inclusive source-length bounds of this bucket.
    pub lo: usize,
    pub hi: usize,
    pub count: usize,
    pub bleu: f64,
}

/// Groups sentences by source length into [1,w], (w,2w], ... and scores a
/// corpus BLEU per bucket. Empty buckets are absent from the result.
pub fn length_buckets(
    hyps: &[Vec<String>],
    refs: &[Vec<String>],
    srcs: &[Vec<String>],
    bucket_width: usize,
) -> Result<Vec<LengthBucket>, EvalError> {
    assert!(bucket_width >= 1, "bucket width must be positive");
    if hyps.len() != refs.len() || hyps.len() != srcs.len() {
        return Err(EvalError::LengthMismatch { hyps: hyps.len(), refs: refs.len() });
    }
    if hyps.is_empty() {
        return Err(EvalError::EmptyCorpus);
    }
    let mut grouped: std::collections::BTreeMap<usize, (Vec<Vec<String>>, Vec<Vec<String>>)> =
        std::collections::BTreeMap::new();
    for ((h, r), s) in hyps.iter().zip(refs).zip(srcs) {
        let len = s.len().max(1);
        let bucket = (len - 1) / bucket_width;
        let entry = grouped.entry(bucket).or_default();
        entry.0.push(h.clone());
        entry.1.push(r.clone());
    }
    let mut out = Vec::with_capacity(grouped.len());
    for (bucket, (h, r)) in grouped {
        let report = corpus_bleu_single(&h, &r)?;
        out.push(LengthBucket {
            lo: bucket * bucket_width + 1,
            hi: (bucket + 1) * bucket_width,
            count: h.len(),
            bleu: report.bleu,
        });
    }
    Ok(out)
}

/// Assembled evaluation record; `format_text` prints the key: value layout.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub bleu: BleuReport,
    pub direction_ratio: Option<(f64, f64)>,
    pub buckets: Vec<LengthBucket>,
}

impl EvalReport {
    pub fn format_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("BLEU: {:.2}\n", self.bleu.bleu));
        out.push_str(&format!(
            "precisions: p1={:.4} p2={:.4} p3={:.4} p4={:.4}\n",
            self.bleu.precisions[0],
            self.bleu.precisions[1],
            self.bleu.precisions[2],
            self.bleu.precisions[3]
        ));
        out.push_str(&format!(
            "brevity_penalty: {:.4}\nhyp_len: {}\nref_len: {}\n",
            self.bleu.brevity_penalty, self.bleu.hyp_len, self.bleu.ref_len
        ));
        if let Some((l2r, r2l)) = self.direction_ratio {
            out.push_str(&format!("direction_l2r: {l2r:.1}%\ndirection_r2l: {r2l:.1}%\n"));
        }
        for b in &self.buckets {
            out.push_str(&format!(
                "bucket[{}-{}]: count={} bleu={:.2}\n",
                b.lo, b.hi, b.count, b.bleu
            ));
        }
        out
    }

    /// Machine-readable rows: one CSV record per metric and bucket.
    pub fn format_records(&self) -> String {
        let mut out = String::from("key,value\n");
        out.push_str(&format!("bleu,{:.4}\n", self.bleu.bleu));
        for (i, p) in self.bleu.precisions.iter().enumerate() {
            out.push_str(&format!("p{},{:.6}\n", i + 1, p));
        }
        out.push_str(&format!("bp,{:.6}\n", self.bleu.brevity_penalty));
        if let Some((l2r, r2l)) = self.direction_ratio {
            out.push_str(&format!("l2r_pct,{l2r:.2}\nr2l_pct,{r2l:.2}\n"));
        }
        for b in &self.buckets {
            out.push_str(&format!("bucket_{}_{},{:.4}\n", b.lo, b.hi, b.bleu));
        }
        out
    }
}
