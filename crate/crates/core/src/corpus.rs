//! Parallel-corpus ingestion: vocabularies, sentence encoding and
//! length-bucketed batching.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use unicode_normalization::UnicodeNormalization;

use crate::error::{Error, Result};

pub type TokenId = u32;
pub type TokenSequence = Vec<TokenId>;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const UNK: TokenId = 3;
pub const NUM_SPECIALS: usize = 4;
pub const SPECIAL_TOKENS: [&str; NUM_SPECIALS] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Default bucket width (in source tokens) used by [`make_batches`].
pub const BUCKET_WIDTH: usize = 4;

/// NFC-normalises a line and splits it on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    let normalized: String = text.nfc().collect();
    normalized.split_whitespace().map(str::to_owned).collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    token_to_id: HashMap<String, TokenId>,
    id_to_token: Vec<String>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::specials_only()
    }
}

impl Vocabulary {
    pub fn specials_only() -> Self {
        let id_to_token: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as TokenId))
            .collect();
        Vocabulary {
            token_to_id,
            id_to_token,
        }
    }

    /// Keeps the most frequent tokens with frequency ≥ `min_freq`, up to
    /// `max_size` entries including the four specials. Equal frequencies are
    /// ordered by first occurrence.
    pub fn build<S: AsRef<str>>(lines: &[S], max_size: usize, min_freq: usize) -> Result<Self> {
        if max_size < NUM_SPECIALS {
            return Err(Error::Invalid(format!(
                "vocabulary max_size {max_size} must be at least {NUM_SPECIALS}"
            )));
        }
        if min_freq < 1 {
            return Err(Error::Invalid("min_freq must be at least 1".into()));
        }
        // token -> (count, first occurrence)
        let mut counts: HashMap<String, (usize, usize)> = HashMap::new();
        let mut seen = 0usize;
        for line in lines {
            for tok in tokenize(line.as_ref()) {
                if SPECIAL_TOKENS.contains(&tok.as_str()) {
                    continue;
                }
                let entry = counts.entry(tok).or_insert((0, seen));
                entry.0 += 1;
                seen += 1;
            }
        }
        let mut ranked: Vec<(String, usize, usize)> = counts
            .into_iter()
            .filter(|(_, (c, _))| *c >= min_freq)
            .map(|(t, (c, first))| (t, c, first))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.2.cmp(&b.2)));
        ranked.truncate(max_size - NUM_SPECIALS);

        let mut vocab = Self::specials_only();
        for (tok, _, _) in ranked {
            vocab.push(tok);
        }
        Ok(vocab)
    }

    fn push(&mut self, token: String) {
        let id = self.id_to_token.len() as TokenId;
        self.token_to_id.insert(token.clone(), id);
        self.id_to_token.push(token);
    }

    /// Rebuilds a vocabulary from its id-ordered token list.
    pub fn from_tokens<I: IntoIterator<Item = String>>(tokens: I) -> Result<Self> {
        let tokens: Vec<String> = tokens.into_iter().collect();
        if tokens.len() < NUM_SPECIALS
            || tokens[..NUM_SPECIALS]
                .iter()
                .zip(SPECIAL_TOKENS)
                .any(|(a, b)| a != b)
        {
            return Err(Error::Data(format!(
                "vocabulary must start with {}",
                SPECIAL_TOKENS.join(", ")
            )));
        }
        let mut vocab = Self::specials_only();
        for tok in tokens.into_iter().skip(NUM_SPECIALS) {
            if tok.is_empty() || tok.chars().any(char::is_whitespace) {
                return Err(Error::Data(format!("invalid vocabulary token {tok:?}")));
            }
            if vocab.token_to_id.contains_key(&tok) {
                return Err(Error::Data(format!("duplicate vocabulary token {tok:?}")));
            }
            vocab.push(tok);
        }
        Ok(vocab)
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    /// `[BOS, ids…, EOS]`, with out-of-vocabulary tokens mapped to `UNK`.
    pub fn encode(&self, text: &str) -> TokenSequence {
        let mut ids = vec![BOS];
        ids.extend(tokenize(text).iter().map(|t| self.id(t).unwrap_or(UNK)));
        ids.push(EOS);
        ids
    }

    /// Joins the tokens up to the first `EOS` with single spaces, skipping
    /// `PAD`/`BOS`.
    pub fn decode(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .take_while(|&&id| id != EOS)
            .filter(|&&id| id != PAD && id != BOS)
            .map(|&id| self.token(id).unwrap_or(SPECIAL_TOKENS[UNK as usize]))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// SHA-256 over the newline-joined token list.
    pub fn content_hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for tok in &self.id_to_token {
            h.update(tok.as_bytes());
            h.update(b"\n");
        }
        h.finalize().into()
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for tok in &self.id_to_token {
            writeln!(w, "{tok}")?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).map_err(|e| Error::io(path, e))?;
        fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let tokens = BufReader::new(file)
            .lines()
            .collect::<std::io::Result<Vec<_>>>()
            .map_err(|e| Error::io(path, e))?;
        Self::from_tokens(tokens)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SentencePair {
    pub source: TokenSequence,
    pub target: TokenSequence,
}

impl SentencePair {
    pub fn encode(src_vocab: &Vocabulary, tgt_vocab: &Vocabulary, src: &str, tgt: &str) -> Self {
        SentencePair {
            source: src_vocab.encode(src),
            target: tgt_vocab.encode(tgt),
        }
    }

    pub fn validate(&self, src_vocab: usize, tgt_vocab: usize) -> Result<()> {
        for (seq, size, side) in [(&self.source, src_vocab, "source"), (&self.target, tgt_vocab, "target")] {
            if seq.len() < 2 || seq[0] != BOS || seq[seq.len() - 1] != EOS {
                return Err(Error::Data(format!("{side} sequence must be BOS … EOS")));
            }
            if let Some(bad) = seq.iter().find(|&&id| id as usize >= size) {
                return Err(Error::Data(format!(
                    "{side} token id {bad} outside vocabulary of {size}"
                )));
            }
        }
        Ok(())
    }
}

/// Reads two line-aligned UTF-8 files.
pub fn read_parallel(src: &Path, tgt: &Path) -> Result<Vec<(String, String)>> {
    let read = |p: &Path| -> Result<Vec<String>> {
        let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        Ok(text.lines().map(str::to_owned).collect())
    };
    let (s, t) = (read(src)?, read(tgt)?);
    if s.len() != t.len() {
        return Err(Error::Data(format!(
            "unaligned corpus: {} has {} lines but {} has {} lines",
            src.display(),
            s.len(),
            tgt.display(),
            t.len()
        )));
    }
    Ok(s.into_iter().zip(t).collect())
}

pub fn encode_pairs(
    src_vocab: &Vocabulary,
    tgt_vocab: &Vocabulary,
    lines: &[(String, String)],
) -> Vec<SentencePair> {
    lines
        .iter()
        .map(|(s, t)| SentencePair::encode(src_vocab, tgt_vocab, s, t))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub source_matrix: Vec<Vec<TokenId>>,
    pub target_matrix: Vec<Vec<TokenId>>,
    pub source_lengths: Vec<usize>,
    pub target_lengths: Vec<usize>,
}

impl Batch {
    fn from_pairs(pairs: &[&SentencePair]) -> Self {
        let src_w = pairs.iter().map(|p| p.source.len()).max().unwrap_or(0);
        let tgt_w = pairs.iter().map(|p| p.target.len()).max().unwrap_or(0);
        let pad = |seq: &[TokenId], w: usize| {
            let mut row = seq.to_vec();
            row.resize(w, PAD);
            row
        };
        Batch {
            source_matrix: pairs.iter().map(|p| pad(&p.source, src_w)).collect(),
            target_matrix: pairs.iter().map(|p| pad(&p.target, tgt_w)).collect(),
            source_lengths: pairs.iter().map(|p| p.source.len()).collect(),
            target_lengths: pairs.iter().map(|p| p.target.len()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.source_lengths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source_lengths.is_empty()
    }

    /// The unpadded pair stored in row `i`.
    pub fn pair(&self, i: usize) -> SentencePair {
        SentencePair {
            source: self.source_matrix[i][..self.source_lengths[i]].to_vec(),
            target: self.target_matrix[i][..self.target_lengths[i]].to_vec(),
        }
    }

    pub fn pairs(&self) -> impl Iterator<Item = SentencePair> + '_ {
        (0..self.len()).map(|i| self.pair(i))
    }
}

pub fn make_batches(pairs: &[SentencePair], batch_size: usize, seed: u64) -> Vec<Batch> {
    make_batches_with_width(pairs, batch_size, seed, BUCKET_WIDTH)
}

/// Groups pairs into source-length buckets of `bucket_width`, shuffles each
/// bucket, cuts it into batches and finally shuffles the batch order. A
/// bucket's last batch may be short.
pub fn make_batches_with_width(
    pairs: &[SentencePair],
    batch_size: usize,
    seed: u64,
    bucket_width: usize,
) -> Vec<Batch> {
    assert!(batch_size >= 1 && bucket_width >= 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut buckets: BTreeMap<usize, Vec<&SentencePair>> = BTreeMap::new();
    for p in pairs {
        buckets.entry(p.source.len() / bucket_width).or_default().push(p);
    }
    let mut batches = Vec::new();
    for bucket in buckets.values_mut() {
        bucket.shuffle(&mut rng);
        batches.extend(bucket.chunks(batch_size).map(Batch::from_pairs));
    }
    batches.shuffle(&mut rng);
    batches
}

const CACHE_MAGIC: &[u8; 4] = b"SRNC";
const CACHE_VERSION: u32 = 1;

/// Binary token-id cache: magic, version, pair count, then per pair the
/// source and target as (u32 length, u32 ids), all little-endian.
pub fn write_cache(path: &Path, pairs: &[SentencePair]) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CACHE_MAGIC);
    buf.extend_from_slice(&CACHE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(pairs.len() as u32).to_le_bytes());
    for p in pairs {
        for seq in [&p.source, &p.target] {
            buf.extend_from_slice(&(seq.len() as u32).to_le_bytes());
            for id in seq {
                buf.extend_from_slice(&id.to_le_bytes());
            }
        }
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_cache(path: &Path) -> Result<Vec<SentencePair>> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::Data(format!("{}: {m}", path.display()));
    let mut words = bytes.get(4..).unwrap_or_default().chunks_exact(4).map(|c| {
        u32::from_le_bytes(c.try_into().expect("chunks of four"))
    });
    if bytes.len() < 12 || &bytes[..4] != CACHE_MAGIC || bytes.len() % 4 != 0 {
        return Err(bad("not a token cache"));
    }
    if words.next() != Some(CACHE_VERSION) {
        return Err(bad("unsupported cache version"));
    }
    let n = words.next().ok_or_else(|| bad("truncated"))?;
    let read_seq = |words: &mut dyn Iterator<Item = u32>| -> Result<TokenSequence> {
        let len = words.next().ok_or_else(|| bad("truncated"))?;
        (0..len)
            .map(|_| words.next().ok_or_else(|| bad("truncated")))
            .collect()
    };
    let mut pairs = Vec::with_capacity(n as usize);
    for _ in 0..n {
        let source = read_seq(&mut words)?;
        let target = read_seq(&mut words)?;
        pairs.push(SentencePair { source, target });
    }
    if words.next().is_some() {
        return Err(bad("trailing bytes"));
    }
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn abc() -> Vocabulary {
        Vocabulary::build(&["a b a", "b c"], 1000, 1).unwrap()
    }

    #[test]
    fn empty_corpus_gives_specials_only() {
        let v = Vocabulary::build::<&str>(&[], 1000, 1).unwrap();
        assert_eq!(v.tokens(), SPECIAL_TOKENS);
    }

    #[test]
    fn frequency_then_first_occurrence_order() {
        let v = abc();
        assert_eq!(v.id("a"), Some(4));
        assert_eq!(v.id("b"), Some(5));
        assert_eq!(v.id("c"), Some(6));
        assert_eq!(v.len(), 7);
    }

    #[test]
    fn min_freq_filters() {
        let v = Vocabulary::build(&["a b a", "b c"], 1000, 2).unwrap();
        assert_eq!(v.len(), 6);
        assert_eq!(v.id("c"), None);
    }

    #[test]
    fn max_size_truncates_and_is_validated() {
        let v = Vocabulary::build(&["a b a", "b c"], 5, 1).unwrap();
        assert_eq!(&v.tokens()[4..], ["a"]);
        assert!(Vocabulary::build(&["a"], 3, 1).is_err());
        assert!(Vocabulary::build(&["a"], 10, 0).is_err());
    }

    #[test]
    fn encoding_examples() {
        let v = abc();
        assert_eq!(v.encode(""), vec![BOS, EOS]);
        assert_eq!(v.encode("a b"), vec![1, 4, 5, 2]);
        assert_eq!(v.encode("a zzz"), vec![1, 4, 3, 2]);
    }

    #[test]
    fn nfc_normalisation_merges_composed_forms() {
        // "é" precomposed vs e + combining acute
        let v = Vocabulary::build(&["caf\u{e9}"], 100, 1).unwrap();
        assert_eq!(v.encode("cafe\u{301}"), vec![BOS, 4, EOS]);
    }

    #[test]
    fn vocab_file_round_trip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.txt");
        let v = abc();
        v.save(&path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("<pad>\n<bos>\n<eos>\n<unk>\na\n"));
        assert_eq!(Vocabulary::load(&path).unwrap(), v);
        assert!(Vocabulary::from_tokens(["x".to_string()]).is_err());
        let dup = SPECIAL_TOKENS.iter().map(|s| s.to_string()).chain(["a".into(), "a".into()]);
        assert!(Vocabulary::from_tokens(dup).is_err());
    }

    #[test]
    fn hash_tracks_content() {
        assert_eq!(abc().content_hash(), abc().content_hash());
        assert_ne!(
            abc().content_hash(),
            Vocabulary::build(&["a b"], 100, 1).unwrap().content_hash()
        );
    }

    fn pairs_of_len(n: usize, len: usize) -> Vec<SentencePair> {
        (0..n)
            .map(|i| SentencePair {
                source: std::iter::once(BOS)
                    .chain((0..len).map(|j| 4 + ((i + j) % 5) as TokenId))
                    .chain([EOS])
                    .collect(),
                target: vec![BOS, 4 + i as TokenId, EOS],
            })
            .collect()
    }

    #[test]
    fn batch_counts() {
        let one = make_batches(&pairs_of_len(1, 3), 4, 0);
        assert_eq!(one.len(), 1);
        assert_eq!(one[0].len(), 1);

        let five = make_batches(&pairs_of_len(5, 3), 2, 0);
        let mut rows: Vec<usize> = five.iter().map(Batch::len).collect();
        rows.sort_unstable_by(|a, b| b.cmp(a));
        assert_eq!(rows, vec![2, 2, 1]);
    }

    #[test]
    fn batching_is_seed_deterministic() {
        let p = pairs_of_len(40, 6);
        assert_eq!(make_batches(&p, 3, 9), make_batches(&p, 3, 9));
        assert_ne!(make_batches(&p, 3, 9), make_batches(&p, 3, 10));
    }

    #[test]
    fn cache_round_trip_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bin");
        let p = pairs_of_len(7, 4);
        write_cache(&path, &p).unwrap();
        assert_eq!(read_cache(&path).unwrap(), p);
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        assert!(read_cache(&path).is_err());
    }

    #[test]
    fn misaligned_files_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (s, t) = (dir.path().join("s"), dir.path().join("t"));
        fs::write(&s, "a\nb\nc\n").unwrap();
        fs::write(&t, "a\nb\n").unwrap();
        let err = read_parallel(&s, &t).unwrap_err().to_string();
        assert!(err.contains("3 lines") && err.contains("2 lines"), "{err}");
    }

    proptest! {
        #[test]
        fn decode_inverts_encode(words in prop::collection::vec("[a-e]{1,3}", 0..12)) {
            let line = words.join("  ");
            let v = Vocabulary::build(&[line.as_str()], 1000, 1).unwrap();
            prop_assert_eq!(v.decode(&v.encode(&line)), words.join(" "));
        }

        #[test]
        fn batches_cover_every_pair_once(
            lens in prop::collection::vec(0usize..15, 1..40),
            bs in 1usize..7,
            seed in any::<u64>(),
        ) {
            let pairs: Vec<SentencePair> = lens.iter().enumerate().map(|(i, &l)| SentencePair {
                source: std::iter::once(BOS).chain(std::iter::repeat_n(4, l)).chain([EOS]).collect(),
                target: vec![BOS, i as TokenId + 4, EOS],
            }).collect();
            let batches = make_batches(&pairs, bs, seed);
            let mut seen: Vec<SentencePair> = batches.iter().flat_map(|b| b.pairs()).collect();
            for b in &batches {
                prop_assert!(b.len() <= bs);
                for (row, &len) in b.source_matrix.iter().zip(&b.source_lengths) {
                    prop_assert!(row[len..].iter().all(|&t| t == PAD));
                }
            }
            let mut expected = pairs.clone();
            seen.sort_by(|a, b| a.target.cmp(&b.target));
            expected.sort_by(|a, b| a.target.cmp(&b.target));
            prop_assert_eq!(seen, expected);
        }
    }
}
