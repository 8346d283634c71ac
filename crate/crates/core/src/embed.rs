//! Word embedding table: vocabulary map plus one vector per token, with an
//! explicit out-of-vocabulary row. Loads the de facto pretrained-vector text
//! format (`token v1 v2 ... v_dw`, one line per token) and a binary cache.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::param::{ParamId, ParamSet};
use crate::rng::Rng;
use crate::tensor::Tensor2;

pub const OOV_TOKEN: &str = "<unk>";

#[derive(Clone, Debug)]
pub struct EmbeddingTable {
    /// token -> row index; BTreeMap so iteration order is deterministic.
    vocab: BTreeMap<String, usize>,
    tokens: Vec<String>,
    pub vectors: ParamId,
    pub d_w: usize,
    oov: usize,
}

impl EmbeddingTable {
    /// Build a trainable table over `tokens` with random init. An OOV row is
    /// appended if the token list does not already contain one.
    pub fn new_random(
        tokens: &[String],
        d_w: usize,
        set: &mut ParamSet,
        rng: &mut Rng,
        trainable: bool,
    ) -> Self {
        let mut all: Vec<String> = tokens.to_vec();
        if !all.iter().any(|t| t == OOV_TOKEN) {
            all.push(OOV_TOKEN.to_string());
        }
        let scale = 1.0 / (d_w as f64).sqrt();
        let vectors = Tensor2::from_fn(all.len(), d_w, |_, _| rng.normal(0.0, scale));
        Self::from_parts(all, vectors, set, trainable)
    }

    pub fn from_parts(
        tokens: Vec<String>,
        vectors: Tensor2,
        set: &mut ParamSet,
        trainable: bool,
    ) -> Self {
        assert_eq!(tokens.len(), vectors.rows());
        let d_w = vectors.cols();
        let mut vocab = BTreeMap::new();
        for (i, t) in tokens.iter().enumerate() {
            vocab.insert(t.clone(), i);
        }
        let oov = *vocab
            .get(OOV_TOKEN)
            .expect("embedding table must contain the OOV token");
        let vectors = set.add("embed.vectors", vectors, trainable);
        EmbeddingTable {
            vocab,
            tokens,
            vectors,
            d_w,
            oov,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn oov_index(&self) -> usize {
        self.oov
    }

    /// Unknown tokens map to the OOV row, never an error.
    pub fn index_of(&self, token: &str) -> usize {
        *self.vocab.get(token).unwrap_or(&self.oov)
    }

    pub fn lookup(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.index_of(t)).collect()
    }
}

/// Lowercase, strip punctuation, split on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split_whitespace()
        .map(|w| {
            w.chars()
                .filter(|c| c.is_alphanumeric())
                .collect::<String>()
        })
        .filter(|w| !w.is_empty())
        .collect()
}

/// Parse pretrained vectors from the one-line-per-token text format.
/// Returns tokens and the vector matrix; width is taken from the first line.
pub fn load_text_embeddings(path: &Path) -> Result<(Vec<String>, Tensor2)> {
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut tokens = Vec::new();
    let mut rows: Vec<f64> = Vec::new();
    let mut d_w = 0usize;
    let mut offset = 0u64;
    for line in reader.lines() {
        let line = line?;
        let line_len = line.len() as u64 + 1;
        let mut parts = line.split_whitespace();
        let token = match parts.next() {
            Some(t) => t.to_string(),
            None => {
                offset += line_len;
                continue;
            }
        };
        let vals: std::result::Result<Vec<f64>, _> = parts.map(|p| p.parse::<f64>()).collect();
        let vals = vals.map_err(|e| Error::Parse {
            offset,
            msg: format!("bad embedding value for token {token}: {e}"),
        })?;
        if d_w == 0 {
            d_w = vals.len();
            if d_w == 0 {
                return Err(Error::Parse {
                    offset,
                    msg: "embedding line has no values".into(),
                });
            }
        } else if vals.len() != d_w {
            return Err(Error::Parse {
                offset,
                msg: format!("expected {d_w} values, got {}", vals.len()),
            });
        }
        tokens.push(token);
        rows.extend(vals);
        offset += line_len;
    }
    let n = tokens.len();
    let vectors = Tensor2::from_vec(n, d_w, rows)?;
    Ok((tokens, vectors))
}

const EMBED_CACHE_MAGIC: &str = "graphvqa-embed-cache v1";

/// Binary cache: text header (`magic\nn d_w\n` then one token per line, then
/// a blank line) followed by n*d_w little-endian f64 values.
pub fn save_embedding_cache(path: &Path, tokens: &[String], vectors: &Tensor2) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "{EMBED_CACHE_MAGIC}")?;
    writeln!(f, "{} {}", tokens.len(), vectors.cols())?;
    for t in tokens {
        writeln!(f, "{t}")?;
    }
    writeln!(f)?;
    for v in vectors.data() {
        f.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn load_embedding_cache(path: &Path) -> Result<(Vec<String>, Tensor2)> {
    let mut f = BufReader::new(std::fs::File::open(path)?);
    let mut line = String::new();
    f.read_line(&mut line)?;
    if line.trim_end() != EMBED_CACHE_MAGIC {
        return Err(Error::Parse {
            offset: 0,
            msg: format!("bad magic: {:?}", line.trim_end()),
        });
    }
    line.clear();
    f.read_line(&mut line)?;
    let mut it = line.split_whitespace();
    let n: usize = it
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Parse {
            offset: 0,
            msg: "bad count line".into(),
        })?;
    let d_w: usize = it
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Parse {
            offset: 0,
            msg: "bad count line".into(),
        })?;
    let mut tokens = Vec::with_capacity(n);
    for _ in 0..n {
        line.clear();
        f.read_line(&mut line)?;
        tokens.push(line.trim_end().to_string());
    }
    line.clear();
    f.read_line(&mut line)?; // separator
    let mut buf = vec![0u8; n * d_w * 8];
    f.read_exact(&mut buf)?;
    let data: Vec<f64> = buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((tokens, Tensor2::from_vec(n, d_w, data)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenize_strips_punctuation() {
        assert_eq!(
            tokenize("What color is the Dog's ball?"),
            vec!["what", "color", "is", "the", "dogs", "ball"]
        );
    }

    #[test]
    fn unknown_token_maps_to_oov() {
        let mut set = ParamSet::new();
        let mut rng = Rng::new(1);
        let table = EmbeddingTable::new_random(
            &["cat".to_string(), "dog".to_string()],
            4,
            &mut set,
            &mut rng,
            true,
        );
        assert_eq!(table.index_of("zebra"), table.oov_index());
        assert_ne!(table.index_of("cat"), table.oov_index());
    }

    #[test]
    fn text_format_round_trip_via_cache() {
        let dir = tempfile::tempdir().unwrap();
        let txt = dir.path().join("vecs.txt");
        std::fs::write(&txt, "cat 1.0 2.0 3.0\ndog -0.5 0.25 0\n").unwrap();
        let (tokens, vecs) = load_text_embeddings(&txt).unwrap();
        assert_eq!(tokens, vec!["cat", "dog"]);
        assert_eq!(vecs.row(1), &[-0.5, 0.25, 0.0]);

        let cache = dir.path().join("vecs.bin");
        save_embedding_cache(&cache, &tokens, &vecs).unwrap();
        let (t2, v2) = load_embedding_cache(&cache).unwrap();
        assert_eq!(t2, tokens);
        assert_eq!(v2, vecs);
    }

    #[test]
    fn ragged_text_embeddings_error() {
        let dir = tempfile::tempdir().unwrap();
        let txt = dir.path().join("bad.txt");
        std::fs::write(&txt, "cat 1.0 2.0\ndog 1.0\n").unwrap();
        assert!(load_text_embeddings(&txt).is_err());
    }
}
