//! Precomputed token states supplied by an external model.
//!
//! Binary layout, all integers little-endian:
//!
//! ```text
//! "CSEM1"  hidden:u32  count:u32
//! repeated count times:
//!     id_len:u32  id:[u8; id_len]  tokens:u32  values:[f32; tokens * hidden]
//! ```

use std::collections::BTreeMap;

use ndarray::Array2;

use super::{EncoderParams, TokenStates};
use crate::error::EncoderError;
use crate::tokenizer::EncodedInput;

const MAGIC: &[u8; 5] = b"CSEM1";

/// Anything that can produce token states for an encoded example.
pub trait StateSource {
    fn hidden(&self) -> usize;
    fn states(&self, key: &str, input: &EncodedInput) -> Result<TokenStates, EncoderError>;
}

impl StateSource for EncoderParams {
    fn hidden(&self) -> usize {
        self.config.hidden_dim
    }

    fn states(&self, _key: &str, input: &EncodedInput) -> Result<TokenStates, EncoderError> {
        self.forward(input)
    }
}

/// Token states keyed by example key, stored at 32-bit precision.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EmbeddingStore {
    hidden: usize,
    states: BTreeMap<String, Array2<f32>>,
}

impl EmbeddingStore {
    pub fn new(hidden: usize) -> EmbeddingStore {
        EmbeddingStore { hidden, states: BTreeMap::new() }
    }

    pub fn insert(&mut self, key: impl Into<String>, states: Array2<f32>) -> Result<(), EncoderError> {
        if states.ncols() != self.hidden {
            return Err(EncoderError::DimensionMismatch { expected: self.hidden, found: states.ncols() });
        }
        self.states.insert(key.into(), states);
        Ok(())
    }

    /// Store `f64` states rounded to `f32`.
    pub fn insert_states(&mut self, key: impl Into<String>, states: &TokenStates) -> Result<(), EncoderError> {
        self.insert(key, states.0.mapv(|v| v as f32))
    }

    pub fn get(&self, key: &str) -> Result<&Array2<f32>, EncoderError> {
        self.states.get(key).ok_or_else(|| EncoderError::MissingExample(key.to_string()))
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.states.keys().map(String::as_str)
    }
}

impl StateSource for EmbeddingStore {
    fn hidden(&self) -> usize {
        self.hidden
    }

    fn states(&self, key: &str, input: &EncodedInput) -> Result<TokenStates, EncoderError> {
        let m = self.get(key)?;
        if m.nrows() != input.len() {
            return Err(EncoderError::DimensionMismatch { expected: input.len(), found: m.nrows() });
        }
        Ok(TokenStates(m.mapv(f64::from)))
    }
}

pub fn write_embeddings(store: &EmbeddingStore) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(store.hidden as u32).to_le_bytes());
    out.extend_from_slice(&(store.states.len() as u32).to_le_bytes());
    for (id, m) in &store.states {
        out.extend_from_slice(&(id.len() as u32).to_le_bytes());
        out.extend_from_slice(id.as_bytes());
        out.extend_from_slice(&(m.nrows() as u32).to_le_bytes());
        for v in m.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], EncoderError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(e) => {
                let s = &self.bytes[self.pos..e];
                self.pos = e;
                Ok(s)
            }
            None => Err(EncoderError::CorruptHeader(format!("truncated while reading {what}"))),
        }
    }

    fn u32(&mut self, what: &str) -> Result<usize, EncoderError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

pub fn read_embeddings(bytes: &[u8]) -> Result<EmbeddingStore, EncoderError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(MAGIC.len(), "magic")? != MAGIC {
        return Err(EncoderError::CorruptHeader("bad magic".into()));
    }
    let hidden = r.u32("hidden size")?;
    if hidden == 0 {
        return Err(EncoderError::CorruptHeader("hidden size is zero".into()));
    }
    let count = r.u32("example count")?;
    let mut store = EmbeddingStore::new(hidden);
    for _ in 0..count {
        let id_len = r.u32("id length")?;
        let id = std::str::from_utf8(r.take(id_len, "id")?)
            .map_err(|_| EncoderError::CorruptHeader("id is not UTF-8".into()))?
            .to_string();
        let tokens = r.u32("token count")?;
        let n =
            tokens.checked_mul(hidden).ok_or_else(|| EncoderError::CorruptHeader("matrix size overflows".into()))?;
        let raw = r.take(n * 4, "matrix values")?;
        let values: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        let m = Array2::from_shape_vec((tokens, hidden), values).expect("shape checked above");
        store.states.insert(id, m);
    }
    if r.pos != bytes.len() {
        return Err(EncoderError::CorruptHeader(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::EncodedInput;
    use proptest::prelude::*;

    fn input_of_len(n: usize) -> EncodedInput {
        EncodedInput {
            ids: vec![0; n],
            segment_ids: vec![0; n],
            mask: vec![1; n],
            passage_range: 0..n,
            alignment: vec![None; n],
        }
    }

    #[test]
    fn single_example_round_trip() {
        let m = Array2::from_shape_fn((3, 4), |(i, j)| (i * 4 + j) as f32 * 0.25 - 1.0);
        let mut store = EmbeddingStore::new(4);
        store.insert("ex-1", m.clone()).unwrap();
        let back = read_embeddings(&write_embeddings(&store)).unwrap();
        let states = back.states("ex-1", &input_of_len(3)).unwrap();
        assert_eq!(states.0, m.mapv(f64::from));
        assert!(matches!(back.states("nope", &input_of_len(3)), Err(EncoderError::MissingExample(_))));
        assert!(matches!(
            back.states("ex-1", &input_of_len(5)),
            Err(EncoderError::DimensionMismatch { expected: 5, found: 3 })
        ));
    }

    #[test]
    fn header_errors() {
        assert!(matches!(read_embeddings(b"CSEM2\0\0\0\0"), Err(EncoderError::CorruptHeader(_))));
        assert!(matches!(read_embeddings(b"CSE"), Err(EncoderError::CorruptHeader(_))));
        let mut store = EmbeddingStore::new(2);
        store.insert("a", Array2::zeros((2, 2))).unwrap();
        let bytes = write_embeddings(&store);
        assert!(matches!(read_embeddings(&bytes[..bytes.len() - 1]), Err(EncoderError::CorruptHeader(_))));
        assert!(matches!(
            store.insert("b", Array2::zeros((2, 3))),
            Err(EncoderError::DimensionMismatch { expected: 2, found: 3 })
        ));
    }

    proptest! {
        #[test]
        fn random_stores_round_trip_bitwise(
            hidden in 1usize..6,
            shapes in proptest::collection::vec(0usize..7, 0..20),
            seed in any::<u64>(),
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut store = EmbeddingStore::new(hidden);
            for (i, rows) in shapes.iter().enumerate() {
                let m = Array2::from_shape_fn((*rows, hidden), |_| f32::from_bits(rng.gen::<u32>() & 0x7f7f_ffff));
                store.insert(format!("id-{i}"), m).unwrap();
            }
            let back = read_embeddings(&write_embeddings(&store)).unwrap();
            prop_assert_eq!(back.len(), store.len());
            for key in store.keys() {
                let a = store.get(key).unwrap();
                let b = back.get(key).unwrap();
                prop_assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
            }
        }
    }
}
