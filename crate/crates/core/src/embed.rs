//! Vocabulary management, pretrained word-vector ingestion, and hashed
//! character n-gram embeddings.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};
use crate::util::fnv1a64;
use rand::Rng;
use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;

pub const RESERVED: [&str; 4] = ["<pad>", "<unk>", "<bos>", "<eos>"];

/// Token table with four reserved ids and dense content ids above them.
/// Content ids are assigned in first-seen order, which makes vocabulary
/// construction deterministic for a fixed corpus.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    token_to_id: HashMap<String, usize>,
    id_to_token: Vec<String>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocabulary {
    pub fn new() -> Self {
        let id_to_token: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocabulary {
            token_to_id,
            id_to_token,
        }
    }

    pub fn add(&mut self, token: &str) -> usize {
        if let Some(&id) = self.token_to_id.get(token) {
            return id;
        }
        let id = self.id_to_token.len();
        self.id_to_token.push(token.to_string());
        self.token_to_id.insert(token.to_string(), id);
        id
    }

    pub fn from_token_lines<'a>(lines: impl Iterator<Item = &'a str>) -> Self {
        let mut v = Vocabulary::new();
        for line in lines {
            for tok in line.split_whitespace() {
                v.add(tok);
            }
        }
        v
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.token_to_id.get(token).copied()
    }

    pub fn id_or_unk(&self, token: &str) -> usize {
        self.id(token).unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.id_to_token.get(id).map(|s| s.as_str())
    }

    pub fn size(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn content_tokens(&self) -> &[String] {
        &self.id_to_token[RESERVED.len()..]
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id_or_unk(t)).collect()
    }

    /// Vocabulary file: one content token per line; line index + 4 is the
    /// token id.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for tok in self.content_tokens() {
            out.push_str(tok);
            out.push('\n');
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(out.as_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        let mut v = Vocabulary::new();
        for (i, line) in BufReader::new(f).lines().enumerate() {
            let line = line?;
            let tok = line.trim();
            if tok.is_empty() {
                return Err(Error::Parse {
                    path: path.display().to_string(),
                    line: i + 1,
                    msg: "empty token".into(),
                });
            }
            v.add(tok);
        }
        Ok(v)
    }
}

/// Row-per-token embedding matrix. Fixed tables never receive gradients
/// (they are bound as tape constants) and their checksum is invariant
/// across training.
#[derive(Debug, Clone)]
pub struct EmbeddingTable<F: Real> {
    pub matrix: Tensor<F>,
    pub trainable: bool,
    pub dim: usize,
}

impl<F: Real> EmbeddingTable<F> {
    /// Trainable table initialized uniform in ±0.1; the pad row starts at
    /// zero and stays there (the gather op never routes gradient to it).
    pub fn new_trainable<R: Rng>(vocab: usize, dim: usize, rng: &mut R) -> Self {
        let mut matrix = Tensor::uniform(rng, vec![vocab, dim], -0.1, 0.1);
        for j in 0..dim {
            matrix.data_mut()[PAD * dim + j] = F::zero();
        }
        EmbeddingTable {
            matrix,
            trainable: true,
            dim,
        }
    }

    pub fn fixed(matrix: Tensor<F>) -> Self {
        let dim = matrix.shape()[1];
        EmbeddingTable {
            matrix,
            trainable: false,
            dim,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.matrix.shape()[0]
    }
}

#[derive(Debug, Clone, Default)]
pub struct CoverageStats {
    pub found: usize,
    pub total: usize,
    pub missing: Vec<String>,
}

impl CoverageStats {
    pub fn fraction(&self) -> f64 {
        if self.total == 0 {
            1.0
        } else {
            self.found as f64 / self.total as f64
        }
    }
}

/// Load community text-format vectors: one token per line, then `dim`
/// reals, single-space separated. Rows for in-vocabulary tokens are
/// copied; misses take the zero vector (the OOV policy) and are reported.
/// Lookup tries the lowercased surface first, then the surface itself.
pub fn load_pretrained_text<F: Real>(
    path: &Path,
    vocab: &Vocabulary,
    dim: usize,
) -> Result<(EmbeddingTable<F>, CoverageStats)> {
    let f = std::fs::File::open(path)?;
    let mut file_vectors: HashMap<String, Vec<F>> = HashMap::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split(' ');
        let token = parts.next().ok_or_else(|| Error::Parse {
            path: path.display().to_string(),
            line: i + 1,
            msg: "missing token".into(),
        })?;
        let values: Vec<F> = parts
            .map(|p| {
                p.parse::<f64>().map(F::from_f64).map_err(|_| Error::Parse {
                    path: path.display().to_string(),
                    line: i + 1,
                    msg: format!("bad real value {p:?}"),
                })
            })
            .collect::<Result<_>>()?;
        if values.len() != dim {
            return Err(Error::Format(format!(
                "{}:{}: expected {dim} values for token {token:?}, got {}",
                path.display(),
                i + 1,
                values.len()
            )));
        }
        file_vectors.insert(token.to_string(), values);
    }

    let v = vocab.size();
    let mut matrix = Tensor::zeros(vec![v, dim]);
    let mut stats = CoverageStats::default();
    for (id, token) in vocab.content_tokens().iter().enumerate() {
        let id = id + RESERVED.len();
        stats.total += 1;
        let lowered = token.to_lowercase();
        let hit = file_vectors
            .get(&lowered)
            .or_else(|| file_vectors.get(token.as_str()));
        match hit {
            Some(row) => {
                stats.found += 1;
                matrix.data_mut()[id * dim..(id + 1) * dim].copy_from_slice(row);
            }
            None => stats.missing.push(token.clone()),
        }
    }
    Ok((EmbeddingTable::fixed(matrix), stats))
}

/// Hashed character n-gram embedder. Tokens are wrapped as `#token#`; all
/// n-grams for n in `[n_min, n_max]` hash into `buckets` rows via seeded
/// FNV-1a, and the embedding is the mean of the hit rows. A pure function
/// of (token, seed, table).
#[derive(Debug, Clone)]
pub struct CharNGramEmbedder<F: Real> {
    pub n_min: usize,
    pub n_max: usize,
    pub buckets: usize,
    pub table: Tensor<F>,
    pub seed: u64,
}

impl<F: Real> CharNGramEmbedder<F> {
    pub fn new<R: Rng>(
        n_min: usize,
        n_max: usize,
        buckets: usize,
        dim: usize,
        seed: u64,
        rng: &mut R,
    ) -> Self {
        assert!(n_min >= 1 && n_min <= n_max, "invalid n-gram range");
        CharNGramEmbedder {
            n_min,
            n_max,
            buckets,
            table: Tensor::uniform(rng, vec![buckets, dim], -0.1, 0.1),
            seed,
        }
    }

    pub fn dim(&self) -> usize {
        self.table.shape()[1]
    }

    fn bucket_ids(&self, token: &str) -> Vec<usize> {
        let wrapped: Vec<char> = format!("#{token}#").chars().collect();
        let mut ids = Vec::new();
        for n in self.n_min..=self.n_max {
            if wrapped.len() < n {
                break;
            }
            for w in wrapped.windows(n) {
                let gram: String = w.iter().collect();
                ids.push((fnv1a64(gram.as_bytes(), self.seed) % self.buckets as u64) as usize);
            }
        }
        ids
    }

    pub fn embed(&self, token: &str) -> Result<Tensor<F>> {
        if token.is_empty() {
            return Err(Error::Contract("char_ngram_embed: empty token".into()));
        }
        let d = self.dim();
        let ids = self.bucket_ids(token);
        let mut out = Tensor::zeros(vec![d]);
        if ids.is_empty() {
            return Ok(out);
        }
        for &b in &ids {
            let row = self.table.row_slice(b);
            for j in 0..d {
                out.data_mut()[j] = out.data_mut()[j] + row[j];
            }
        }
        let inv = F::from_f64(1.0 / ids.len() as f64);
        out.scale_in_place(inv);
        Ok(out)
    }

    /// Per-token embeddings stacked as `[T, dim]`.
    pub fn embed_sequence(&self, tokens: &[String]) -> Result<Tensor<F>> {
        if tokens.is_empty() {
            return Err(Error::Contract("embed_sequence: empty sequence".into()));
        }
        let d = self.dim();
        let mut data = Vec::with_capacity(tokens.len() * d);
        for t in tokens {
            data.extend_from_slice(self.embed(t)?.data());
        }
        Tensor::new(vec![tokens.len(), d], data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn write_tmp(content: &str) -> tempfile::NamedTempFile {
        use std::io::Write;
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn reserved_ids_are_fixed() {
        let v = Vocabulary::new();
        assert_eq!(v.id("<pad>"), Some(PAD));
        assert_eq!(v.id("<unk>"), Some(UNK));
        assert_eq!(v.id("<bos>"), Some(BOS));
        assert_eq!(v.id("<eos>"), Some(EOS));
        assert_eq!(v.size(), 4);
    }

    #[test]
    fn ids_are_dense_and_first_seen() {
        let mut v = Vocabulary::new();
        assert_eq!(v.add("b"), 4);
        assert_eq!(v.add("a"), 5);
        assert_eq!(v.add("b"), 4);
        assert_eq!(v.id_or_unk("zzz"), UNK);
    }

    #[test]
    fn vocab_file_round_trip_preserves_ids() {
        let mut v = Vocabulary::new();
        v.add("alpha");
        v.add("beta");
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("toks.vocab");
        v.save(&path).unwrap();
        let back = Vocabulary::load(&path).unwrap();
        assert_eq!(back.id("alpha"), Some(4));
        assert_eq!(back.id("beta"), Some(5));
        assert_eq!(back.size(), 6);
    }

    #[test]
    fn pretrained_two_line_file_loads_with_full_coverage() {
        let f = write_tmp("a 1.0 2.0\nb 3.0 4.0\n");
        let mut v = Vocabulary::new();
        v.add("a");
        v.add("b");
        let (table, stats) = load_pretrained_text::<f64>(f.path(), &v, 2).unwrap();
        assert_eq!(table.matrix.row_slice(4), &[1.0, 2.0]);
        assert_eq!(table.matrix.row_slice(5), &[3.0, 4.0]);
        assert_eq!(stats.found, 2);
        assert_eq!(stats.total, 2);
        assert!(!table.trainable);
    }

    #[test]
    fn missing_token_takes_zero_vector_and_reports_miss() {
        let f = write_tmp("a 1.0 2.0\n");
        let mut v = Vocabulary::new();
        v.add("a");
        v.add("ghost");
        let (table, stats) = load_pretrained_text::<f64>(f.path(), &v, 2).unwrap();
        assert_eq!(table.matrix.row_slice(5), &[0.0, 0.0]);
        assert_eq!(stats.found, 1);
        assert_eq!(stats.missing, vec!["ghost".to_string()]);
    }

    #[test]
    fn short_line_is_format_error_naming_line() {
        let f = write_tmp("a 1.0 2.0\nb 3.0\n");
        let mut v = Vocabulary::new();
        v.add("a");
        let err = load_pretrained_text::<f64>(f.path(), &v, 2).unwrap_err();
        assert!(err.to_string().contains(":2"), "{err}");
    }

    #[test]
    fn malformed_value_is_parse_error_with_line() {
        let f = write_tmp("a 1.0 oops\n");
        let v = Vocabulary::new();
        let err = load_pretrained_text::<f64>(f.path(), &v, 2).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 1),
            other => panic!("expected parse error, got {other}"),
        }
    }

    #[test]
    fn lowercase_lookup_with_surface_fallback() {
        let f = write_tmp("cat 1.0\nBob 2.0\n");
        let mut v = Vocabulary::new();
        v.add("Cat");
        v.add("Bob");
        let (table, stats) = load_pretrained_text::<f64>(f.path(), &v, 1).unwrap();
        assert_eq!(stats.found, 2);
        assert_eq!(table.matrix.row_slice(4), &[1.0]); // via lowercase
        assert_eq!(table.matrix.row_slice(5), &[2.0]); // via surface
    }

    #[test]
    fn char_ngrams_are_deterministic() {
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let e = CharNGramEmbedder::<f64>::new(2, 4, 1000, 8, 99, &mut r);
        let a = e.embed("cat").unwrap();
        let b = e.embed("cat").unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_table_embeds_to_zero() {
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let mut e = CharNGramEmbedder::<f64>::new(2, 4, 100, 4, 1, &mut r);
        e.table = Tensor::zeros(vec![100, 4]);
        assert_eq!(e.embed("word").unwrap().data(), &[0.0; 4]);
    }

    #[test]
    fn bigram_embedding_is_mean_of_exactly_three_rows() {
        // "ab" wrapped is "#ab#": 2-grams {#a, ab, b#}
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let e = CharNGramEmbedder::<f64>::new(2, 2, 512, 4, 7, &mut r);
        let grams = ["#a", "ab", "b#"];
        let mut expect = vec![0.0; 4];
        for g in grams {
            let b = (fnv1a64(g.as_bytes(), 7) % 512) as usize;
            for j in 0..4 {
                expect[j] += e.table.at2(b, j);
            }
        }
        for v in expect.iter_mut() {
            *v /= 3.0;
        }
        let got = e.embed("ab").unwrap();
        for j in 0..4 {
            assert!((got.at1(j) - expect[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn trainable_table_pad_row_is_zero() {
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let t = EmbeddingTable::<f64>::new_trainable(6, 3, &mut r);
        assert_eq!(t.matrix.row_slice(PAD), &[0.0, 0.0, 0.0]);
        assert!(t.trainable);
    }
}
