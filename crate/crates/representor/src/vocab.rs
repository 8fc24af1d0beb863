//! Frequency-ranked vocabularies with rank-aligned embedding sharing.
//!
//! Both languages are ranked by descending corpus frequency and the token at
//! rank r on either side maps to the same embedding row, so one `[V, d]`
//! table serves encoder input, decoder input and the output projection. The
//! table has `max(src, tgt) + specials` rows.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

/// Reserved tokens pinned to rows 0..8 on both sides. `<pad>` must stay at
/// row 0: the data pipeline pads with id 0 and mixed decoding bootstraps
/// from it.
pub const SPECIALS: [&str; 8] = [
    "<pad>", "<bos>", "<eos>", "<unk>", "<s2t>", "<t2s>", "<l2r>", "<r2l>",
];

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const S2T: usize = 4;
pub const T2S: usize = 5;
pub const L2R: usize = 6;
pub const R2L: usize = 7;
pub const NUM_SPECIALS: usize = 8;

const FILE_HEADER: &str = "representor-vocab v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Src,
    Tgt,
}

#[derive(Debug)]
pub enum VocabError {
    EmptyCorpus,
    DuplicateToken { side: Side, token: String },
    Io(std::io::Error),
    BadFile { line: usize, reason: String },
}

impl fmt::Display for VocabError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VocabError::EmptyCorpus => write!(f, "cannot build a vocabulary from an empty corpus"),
            VocabError::DuplicateToken { side, token } => {
                write!(f, "duplicate token {token:?} in {side:?} list")
            }
            VocabError::Io(e) => write!(f, "vocabulary io error: {e}"),
            VocabError::BadFile { line, reason } => {
                write!(f, "malformed vocabulary file at line {line}: {reason}")
            }
        }
    }
}

impl std::error::Error for VocabError {}

impl From<std::io::Error> for VocabError {
    fn from(e: std::io::Error) -> Self {
        VocabError::Io(e)
    }
}

/// Counts token frequencies and returns the `size` most frequent tokens in
/// descending order. Ties break lexicographically. Tokens spelled like a
/// reserved special are ignored; specials get their fixed rows instead.
pub fn build_frequency_vocab<'a, I>(corpus: I, size: usize) -> Result<Vec<String>, VocabError>
where
    I: IntoIterator<Item = &'a [String]>,
{
    assert!(size >= 1, "vocabulary size must be at least 1");
    let mut counts: HashMap<&str, u64> = HashMap::new();
    let mut saw_any = false;
    for sentence in corpus {
        for tok in sentence {
            saw_any = true;
            if SPECIALS.contains(&tok.as_str()) {
                continue;
            }
            *counts.entry(tok.as_str()).or_insert(0) += 1;
        }
    }
    if !saw_any {
        return Err(VocabError::EmptyCorpus);
    }
    let mut ranked: Vec<(&str, u64)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    Ok(ranked
        .into_iter()
        .take(size)
        .map(|(t, _)| t.to_string())
        .collect())
}

/// Two rank-ordered token lists sharing one embedding index space:
/// rows 0..8 are the specials, and rank r of either language is row 8+r.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SharedVocabulary {
    src_tokens: Vec<String>,
    tgt_tokens: Vec<String>,
    src_index: HashMap<String, usize>,
    tgt_index: HashMap<String, usize>,
}

impl SharedVocabulary {
    /// Builds the shared index from two duplicate-free ranked lists.
    pub fn build_shared(src: Vec<String>, tgt: Vec<String>) -> Result<Self, VocabError> {
        let src_index = index_side(&src, Side::Src)?;
        let tgt_index = index_side(&tgt, Side::Tgt)?;
        Ok(SharedVocabulary {
            src_tokens: src,
            tgt_tokens: tgt,
            src_index,
            tgt_index,
        })
    }

    pub fn src_size(&self) -> usize {
        self.src_tokens.len()
    }

    pub fn tgt_size(&self) -> usize {
        self.tgt_tokens.len()
    }

    /// Number of embedding rows: max of the two sizes plus the specials.
    pub fn shared_rows(&self) -> usize {
        self.src_tokens.len().max(self.tgt_tokens.len()) + NUM_SPECIALS
    }

    fn index(&self, side: Side) -> &HashMap<String, usize> {
        match side {
            Side::Src => &self.src_index,
            Side::Tgt => &self.tgt_index,
        }
    }

    fn tokens(&self, side: Side) -> &[String] {
        match side {
            Side::Src => &self.src_tokens,
            Side::Tgt => &self.tgt_tokens,
        }
    }

    pub fn token_to_id(&self, side: Side, token: &str) -> usize {
        if let Some(pos) = SPECIALS.iter().position(|s| *s == token) {
            return pos;
        }
        self.index(side).get(token).copied().unwrap_or(UNK)
    }

    pub fn tokens_to_ids(&self, side: Side, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.token_to_id(side, t)).collect()
    }

    /// Inverse mapping. Ids on rows the given side does not populate decode
    /// to `<unk>`.
    pub fn id_to_token(&self, side: Side, id: usize) -> &str {
        if id < NUM_SPECIALS {
            return SPECIALS[id];
        }
        self.tokens(side)
            .get(id - NUM_SPECIALS)
            .map(|s| s.as_str())
            .unwrap_or(SPECIALS[UNK])
    }

    pub fn ids_to_tokens(&self, side: Side, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .map(|&id| self.id_to_token(side, id).to_string())
            .collect()
    }

    /// Canonical file serialization: a header line with both sizes, the
    /// eight special rows, then the src block and the tgt block.
    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{FILE_HEADER} {} {}\n",
            self.src_tokens.len(),
            self.tgt_tokens.len()
        ));
        for s in SPECIALS {
            out.push_str(s);
            out.push('\n');
        }
        for t in &self.src_tokens {
            out.push_str(t);
            out.push('\n');
        }
        for t in &self.tgt_tokens {
            out.push_str(t);
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<(), VocabError> {
        let mut f = fs::File::create(path)?;
        f.write_all(self.to_file_string().as_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, VocabError> {
        Self::from_file_string(&fs::read_to_string(path)?)
    }

    pub fn from_file_string(text: &str) -> Result<Self, VocabError> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or(VocabError::BadFile {
            line: 1,
            reason: "empty file".into(),
        })?;
        let rest = header
            .strip_prefix(FILE_HEADER)
            .ok_or_else(|| VocabError::BadFile {
                line: 1,
                reason: format!("expected {FILE_HEADER:?} header"),
            })?;
        let sizes: Vec<usize> = rest
            .split_whitespace()
            .map(|s| {
                s.parse().map_err(|_| VocabError::BadFile {
                    line: 1,
                    reason: format!("bad size field {s:?}"),
                })
            })
            .collect::<Result<_, _>>()?;
        if sizes.len() != 2 {
            return Err(VocabError::BadFile {
                line: 1,
                reason: "header needs exactly two sizes".into(),
            });
        }
        for expect in SPECIALS {
            let (n, got) = lines.next().ok_or(VocabError::BadFile {
                line: 1,
                reason: "truncated specials block".into(),
            })?;
            if got != expect {
                return Err(VocabError::BadFile {
                    line: n + 1,
                    reason: format!("expected special {expect:?}, found {got:?}"),
                });
            }
        }
        let mut take_block = |count: usize| -> Result<Vec<String>, VocabError> {
            let mut block = Vec::with_capacity(count);
            for _ in 0..count {
                let (n, tok) = lines.next().ok_or(VocabError::BadFile {
                    line: 0,
                    reason: "truncated token block".into(),
                })?;
                if tok.is_empty() {
                    return Err(VocabError::BadFile {
                        line: n + 1,
                        reason: "empty token line".into(),
                    });
                }
                block.push(tok.to_string());
            }
            Ok(block)
        };
        let src = take_block(sizes[0])?;
        let tgt = take_block(sizes[1])?;
        Self::build_shared(src, tgt)
    }

    /// Hash of the canonical serialization; stored in checkpoints so decode
    /// can refuse a mismatched vocabulary.
    pub fn sha256_hex(&self) -> String {
        let digest = Sha256::digest(self.to_file_string().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn index_side(tokens: &[String], side: Side) -> Result<HashMap<String, usize>, VocabError> {
    let mut index = HashMap::with_capacity(tokens.len());
    for (rank, tok) in tokens.iter().enumerate() {
        if SPECIALS.contains(&tok.as_str())
            || index.insert(tok.clone(), NUM_SPECIALS + rank).is_some()
        {
            return Err(VocabError::DuplicateToken {
                side,
                token: tok.clone(),
            });
        }
    }
    Ok(index)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(|t| t.to_string()).collect()
    }

    #[test]
    fn frequency_vocab_direct_counts() {
        let corpus = [toks("a a b")];
        let refs: Vec<&[String]> = corpus.iter().map(|v| v.as_slice()).collect();
        assert_eq!(build_frequency_vocab(refs, 2).unwrap(), vec!["a", "b"]);

        let corpus = [toks("x y y z z z")];
        let refs: Vec<&[String]> = corpus.iter().map(|v| v.as_slice()).collect();
        assert_eq!(build_frequency_vocab(refs, 2).unwrap(), vec!["z", "y"]);
    }

    #[test]
    fn frequency_vocab_tie_break_is_lexicographic() {
        let corpus = [toks("beta alpha gamma")];
        let refs: Vec<&[String]> = corpus.iter().map(|v| v.as_slice()).collect();
        assert_eq!(
            build_frequency_vocab(refs, 3).unwrap(),
            vec!["alpha", "beta", "gamma"]
        );
    }

    #[test]
    fn frequency_vocab_size_caps_and_large_limits_accepted() {
        // The configured caps can exceed the observed vocabulary.
        let corpus = [toks("a b c")];
        let refs: Vec<&[String]> = corpus.iter().map(|v| v.as_slice()).collect();
        assert_eq!(build_frequency_vocab(refs.clone(), 35000).unwrap().len(), 3);
        assert_eq!(build_frequency_vocab(refs, 30000).unwrap().len(), 3);
    }

    #[test]
    fn empty_corpus_is_an_error() {
        let refs: Vec<&[String]> = Vec::new();
        assert!(matches!(
            build_frequency_vocab(refs, 5),
            Err(VocabError::EmptyCorpus)
        ));
    }

    #[test]
    fn shared_rows_is_max_plus_specials() {
        let v = SharedVocabulary::build_shared(
            (0..35000).map(|i| format!("s{i}")).collect(),
            (0..30000).map(|i| format!("t{i}")).collect(),
        )
        .unwrap();
        assert_eq!(v.shared_rows(), 35008);
    }

    #[test]
    fn identical_lists_share_every_row() {
        let list: Vec<String> = ["k", "l", "m"].iter().map(|s| s.to_string()).collect();
        let v = SharedVocabulary::build_shared(list.clone(), list.clone()).unwrap();
        for t in &list {
            assert_eq!(v.token_to_id(Side::Src, t), v.token_to_id(Side::Tgt, t));
        }
    }

    #[test]
    fn rank_alignment_with_unequal_sizes() {
        // "zc" has no target partner: rows for ranks 0..1 are shared, the
        // rank-2 row is source-only.
        let v = SharedVocabulary::build_shared(
            vec!["za".into(), "zb".into(), "zc".into()],
            vec!["ya".into(), "yb".into()],
        )
        .unwrap();
        assert_eq!(v.shared_rows(), 3 + NUM_SPECIALS);
        assert_eq!(v.token_to_id(Side::Src, "za"), NUM_SPECIALS);
        assert_eq!(v.token_to_id(Side::Tgt, "ya"), NUM_SPECIALS);
        assert_eq!(v.token_to_id(Side::Src, "zb"), NUM_SPECIALS + 1);
        assert_eq!(v.token_to_id(Side::Tgt, "yb"), NUM_SPECIALS + 1);
        assert_eq!(v.token_to_id(Side::Src, "zc"), NUM_SPECIALS + 2);
        // The source-only row decodes to <unk> on the target side.
        assert_eq!(v.id_to_token(Side::Tgt, NUM_SPECIALS + 2), "<unk>");
    }

    #[test]
    fn duplicate_tokens_rejected() {
        let r = SharedVocabulary::build_shared(vec!["a".into(), "a".into()], vec!["b".into()]);
        assert!(matches!(r, Err(VocabError::DuplicateToken { .. })));
    }

    #[test]
    fn round_trip_and_unknowns() {
        let v = SharedVocabulary::build_shared(
            vec!["hello".into(), "world".into()],
            vec!["bonjour".into()],
        )
        .unwrap();
        let ids = v.tokens_to_ids(Side::Src, &toks("hello world never-seen"));
        assert_eq!(ids[2], UNK);
        assert!(ids.iter().all(|&i| i < v.shared_rows()));
        let back = v.ids_to_tokens(Side::Src, &ids);
        assert_eq!(back, vec!["hello", "world", "<unk>"]);
    }

    #[test]
    fn specials_pinned_on_both_sides() {
        let v = SharedVocabulary::build_shared(vec!["a".into()], vec!["b".into()]).unwrap();
        for (i, s) in SPECIALS.iter().enumerate() {
            assert_eq!(v.token_to_id(Side::Src, s), i);
            assert_eq!(v.token_to_id(Side::Tgt, s), i);
        }
        assert_eq!(v.token_to_id(Side::Src, "<pad>"), PAD);
        assert_eq!(PAD, 0);
    }

    #[test]
    fn file_round_trip_is_identity() {
        let v = SharedVocabulary::build_shared(
            vec!["aa".into(), "bb".into(), "cc".into()],
            vec!["xx".into(), "yy".into()],
        )
        .unwrap();
        let text = v.to_file_string();
        assert!(text.starts_with("representor-vocab v1 3 2\n"));
        let back = SharedVocabulary::from_file_string(&text).unwrap();
        assert_eq!(v, back);
        assert_eq!(v.sha256_hex(), back.sha256_hex());
    }

    #[test]
    fn malformed_file_reports_line() {
        let r = SharedVocabulary::from_file_string("bogus header\n");
        assert!(matches!(r, Err(VocabError::BadFile { line: 1, .. })));
    }
}
