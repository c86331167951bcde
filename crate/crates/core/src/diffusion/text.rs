//! Frozen toy text encoder: a fixed random embedding table over the tag
//! vocabulary plus separator and pad tokens, with fixed positional offsets.

use candle_core::{DType, Device, IndexOp, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::nn::params::{Init, ParamBuilder};
use crate::tags::{TagSet, TagVocabulary};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TextConfig {
    pub dim: usize,
    pub context_len: usize,
}

impl Default for TextConfig {
    fn default() -> Self {
        Self { dim: 32, context_len: 16 }
    }
}

#[derive(Debug, Clone)]
pub struct TextEncoder {
    vocab: TagVocabulary,
    table: Tensor,
    positions: Tensor,
    context_len: usize,
}

impl TextEncoder {
    /// Table rows: vocabulary classes, then separator, then pad.
    pub fn new(pb: &ParamBuilder, vocab: &TagVocabulary, cfg: &TextConfig) -> Result<Self> {
        if cfg.context_len == 0 || cfg.dim == 0 {
            bail!(Config, "text encoder needs positive dim and context length");
        }
        let pb = pb.trainable(false);
        let table = pb.get("token_embedding", &[vocab.len() + 2, cfg.dim], Init::Normal(1.0))?;
        let positions = pb.get("position_embedding", &[cfg.context_len, cfg.dim], Init::Normal(0.1))?;
        Ok(Self {
            vocab: vocab.clone(),
            table,
            positions,
            context_len: cfg.context_len,
        })
    }

    pub fn vocabulary(&self) -> &TagVocabulary {
        &self.vocab
    }

    pub fn context_len(&self) -> usize {
        self.context_len
    }

    pub fn dim(&self) -> usize {
        self.table.dim(1).unwrap_or(0)
    }

    pub fn sep_token(&self) -> u32 {
        self.vocab.len() as u32
    }

    pub fn pad_token(&self) -> u32 {
        self.vocab.len() as u32 + 1
    }

    /// Tags in vocabulary order separated by the separator token, right-padded.
    pub fn tokenize(&self, tags: &TagSet) -> Result<Vec<u32>> {
        tags.check_vocabulary(&self.vocab)?;
        let mut ids = Vec::with_capacity(self.context_len);
        for (k, &i) in tags.indices().iter().enumerate() {
            if k > 0 {
                ids.push(self.sep_token());
            }
            ids.push(i as u32);
        }
        if ids.len() > self.context_len {
            bail!(
                Argument,
                "{} tags need {} tokens, context holds {}",
                tags.len(),
                ids.len(),
                self.context_len
            );
        }
        ids.resize(self.context_len, self.pad_token());
        Ok(ids)
    }

    /// `(context_len, dim)` context for one tag set.
    pub fn encode(&self, tags: &TagSet) -> Result<Tensor> {
        let ids = self.tokenize(tags)?;
        let idx = Tensor::from_vec(ids, self.context_len, &Device::Cpu)?;
        Ok((self.table.index_select(&idx, 0)? + &self.positions)?)
    }

    /// `(B, context_len, dim)`.
    pub fn encode_batch(&self, tags: &[&TagSet]) -> Result<Tensor> {
        let rows = tags.iter().map(|t| self.encode(t)).collect::<Result<Vec<_>>>()?;
        Ok(Tensor::stack(&rows, 0)?)
    }

    pub fn null_context(&self) -> Result<Tensor> {
        self.encode(&TagSet::empty())
    }

    pub fn dtype(&self) -> DType {
        self.table.dtype()
    }

    pub fn token_row(&self, token: u32) -> Result<Tensor> {
        Ok(self.table.i(token as usize)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::ParamStore;
    use crate::toydata::toy_vocabulary;

    fn enc() -> TextEncoder {
        let store = ParamStore::new();
        TextEncoder::new(&ParamBuilder::new(&store, 3, DType::F32), &toy_vocabulary(), &TextConfig::default()).unwrap()
    }

    #[test]
    fn null_prompt_is_all_pad_and_stable() {
        let e = enc();
        assert!(e.tokenize(&TagSet::empty()).unwrap().iter().all(|&t| t == e.pad_token()));
        let a = e.null_context().unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let b = e.null_context().unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn order_does_not_matter_and_length_is_fixed() {
        let e = enc();
        let v = toy_vocabulary();
        let ab = TagSet::parse("red, circle", &v).unwrap();
        let ba = TagSet::parse("circle, red", &v).unwrap();
        let x = e.encode(&ab).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let y = e.encode(&ba).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(x, y);
        for n in 0..=v.len() {
            let t = TagSet::from_indices(0..n);
            assert_eq!(e.encode(&t).unwrap().dims(), &[16, 32]);
        }
    }

    #[test]
    fn unknown_tag_index_is_a_vocabulary_error() {
        let e = enc();
        let bad = TagSet::from_indices([99]);
        assert!(matches!(e.encode(&bad), Err(crate::error::Error::Vocabulary(_))));
    }

    #[test]
    fn the_table_is_frozen() {
        let store = ParamStore::new();
        let _ = TextEncoder::new(&ParamBuilder::new(&store, 3, DType::F32).pp("text"), &toy_vocabulary(), &TextConfig::default()).unwrap();
        assert_eq!(store.trainable_count(), 0);
        assert_eq!(store.len(), 2);
    }
}
