use super::block::{unit_backward, unit_forward, BlockSettings, IntraRule, UnitCache};
use super::weights::{EncoderWeights, LoraParams, Trainable};
use crate::error::{contract, Result};
use crate::numerics::{layer_norm_backward, layer_norm_with_stats, matmul, matmul_a_bt, LayerNormStats, Mat, Scalar};
use crate::tokens::TokenSet;

/// Whitespace tokenizer hashing lower-cased words into a small vocabulary.
///
/// Ids `0..3` are reserved for padding, begin and end of sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Tokenizer {
    pub vocab_size: usize,
    pub max_len: usize,
}

impl Tokenizer {
    pub const PAD: u32 = 0;
    pub const BOS: u32 = 1;
    pub const EOS: u32 = 2;
    pub const FIRST_WORD: u32 = 3;

    pub fn new(vocab_size: usize, max_len: usize) -> Self {
        Self { vocab_size, max_len }
    }

    pub fn word_id(&self, word: &str) -> u32 {
        // FNV-1a, 64 bit
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in word.to_lowercase().bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        Self::FIRST_WORD + (h % (self.vocab_size as u64 - Self::FIRST_WORD as u64)) as u32
    }

    /// `BOS words... EOS`, truncated so the result fits `max_len` and
    /// still ends with `EOS`.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        let room = self.max_len.saturating_sub(2);
        let mut ids = vec![Self::BOS];
        ids.extend(text.split_whitespace().take(room).map(|w| self.word_id(w)));
        ids.push(Self::EOS);
        ids
    }
}

pub(crate) struct TextCache<T> {
    layers: Vec<UnitCache<T>>,
    ln: LayerNormStats<T>,
    pos: usize,
    len: usize,
}

/// Text embedding: token plus positional embeddings, causal layers, final
/// norm at the first end-of-sequence position (the last position if there
/// is none), projection.
pub fn encode_text<T: Scalar>(w: &EncoderWeights<T>, lora: Option<&LoraParams<T>>, ids: &[u32]) -> Result<Vec<T>> {
    text_forward(w, lora, ids, false).map(|(e, _)| e)
}

pub(crate) fn text_forward<T: Scalar>(
    w: &EncoderWeights<T>,
    lora: Option<&LoraParams<T>>,
    ids: &[u32],
    keep_cache: bool,
) -> Result<(Vec<T>, Option<TextCache<T>>)> {
    let cfg = &w.config;
    if ids.is_empty() || ids.len() > cfg.text_max_len {
        return contract("encode_text", format!("{} ids, allowed 1..={}", ids.len(), cfg.text_max_len));
    }
    if let Some(&bad) = ids.iter().find(|&&id| id as usize >= cfg.text_vocab_size) {
        return contract("encode_text", format!("token id {bad} outside vocabulary of {}", cfg.text_vocab_size));
    }
    let mut settings = BlockSettings::text(cfg);
    if let Some(l) = lora {
        settings.lora_alpha = l.alpha;
        if l.text.len() != w.text.layers.len() {
            return contract("encode_text", "adapter layer count does not match the backbone");
        }
    }
    let mut x = Mat::zeros(ids.len(), cfg.width);
    for (i, &id) in ids.iter().enumerate() {
        for ((o, &e), &p) in x.row_mut(i).iter_mut().zip(w.token_embed.row(id as usize)).zip(w.text_pos.row(i)) {
            *o = e + p;
        }
    }
    let mut ts = TokenSet::from_frame(x, 0);
    let mut caches = Vec::new();
    for (li, lw) in w.text.layers.iter().enumerate() {
        let ll = lora.map(|l| &l.text[li]);
        let out = unit_forward(vec![ts], None, None, IntraRule::None, lw, ll, &settings, None, keep_cache)?;
        caches.extend(out.cache);
        ts = out.tokens;
    }
    let pos = ids.iter().position(|&id| id == super::Tokenizer::EOS).unwrap_or(ids.len() - 1);
    let row = ts.features().slice_rows(pos, pos + 1);
    let (y, ln) = layer_norm_with_stats(&row, &w.text.ln_post_gamma, &w.text.ln_post_beta, cfg.ln_eps)?;
    let emb = matmul(&y, &w.text.proj)?.into_data();
    let cache = keep_cache.then_some(TextCache { layers: caches, ln, pos, len: ids.len() });
    Ok((emb, cache))
}

pub(crate) fn text_backward<T: Scalar>(
    w: &EncoderWeights<T>,
    params: &Trainable<T>,
    cache: &TextCache<T>,
    d_emb: &[T],
    grads: &mut Trainable<T>,
) -> Result<()> {
    let cfg = &w.config;
    let mut settings = BlockSettings::text(cfg);
    settings.lora_alpha = params.lora.alpha;
    let d_emb = Mat::from_vec(1, cfg.embed_dim, d_emb.to_vec())?;
    let dy = matmul_a_bt(&d_emb, &w.text.proj)?;
    let drow = layer_norm_backward(&dy, &w.text.ln_post_gamma, &cache.ln);
    let mut d = Mat::zeros(cache.len, cfg.width);
    d.row_mut(cache.pos).copy_from_slice(drow.row(0));
    for (li, uc) in cache.layers.iter().enumerate().rev() {
        let lw = &w.text.layers[li];
        let ll = &params.lora.text[li];
        let mut out = unit_backward(&d, uc, lw, Some(ll), &settings, Some(&mut grads.lora.text[li]), None)?;
        d = out.pop().expect("single member");
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::Preset;
    use crate::numerics::Rng;

    #[test]
    fn tokenizer_frames_words() {
        let t = Tokenizer::new(256, 6);
        let ids = t.encode("A red Ball");
        assert_eq!(ids.len(), 5);
        assert_eq!((ids[0], ids[4]), (Tokenizer::BOS, Tokenizer::EOS));
        assert_eq!(ids[3], t.word_id("ball"));
        assert!(ids[1..4].iter().all(|&i| (3..256).contains(&i)));
        let long = t.encode("one two three four five six seven");
        assert_eq!(long.len(), 6);
        assert_eq!(*long.last().unwrap(), Tokenizer::EOS);
    }

    #[test]
    fn text_embedding_is_deterministic_and_finite() {
        let cfg = Preset::Micro.config();
        let w = EncoderWeights::<f32>::init(&cfg, 1).unwrap();
        let mut rng = Rng::new(2);
        for _ in 0..100 {
            let n = 1 + rng.below(cfg.text_max_len);
            let ids: Vec<u32> = (0..n).map(|_| rng.below(cfg.text_vocab_size) as u32).collect();
            let e = encode_text(&w, None, &ids).unwrap();
            assert!(e.iter().all(|v| v.is_finite()));
            assert!(e.iter().map(|v| v * v).sum::<f32>() > 0.0);
            assert_eq!(e, encode_text(&w, None, &ids).unwrap());
        }
    }

    #[test]
    fn zero_delta_lora_is_frozen_backbone() {
        let cfg = Preset::Micro.config();
        let w = EncoderWeights::<f32>::init(&cfg, 3).unwrap();
        let lora = LoraParams::init(&cfg, 4);
        let ids = [1, 5, 9, 2];
        assert_eq!(encode_text(&w, Some(&lora), &ids).unwrap(), encode_text(&w, None, &ids).unwrap());
    }

    #[test]
    fn bad_ids_rejected() {
        let cfg = Preset::Micro.config();
        let w = EncoderWeights::<f32>::init(&cfg, 3).unwrap();
        assert!(encode_text(&w, None, &[1, 64, 2]).is_err());
        assert!(encode_text(&w, None, &[]).is_err());
        assert!(encode_text(&w, None, &[1; 9]).is_err());
    }
}
