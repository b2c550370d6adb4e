use super::nn::{LayerNorm, Linear, SeqShape, Transformer, INIT_STD};
use super::{EncodedBatch, EncoderConfig, FeatureBundle, Modality, TokenSequence};
use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamId, ParamStore, Real, Rng};

/// Transformer over word embeddings. The global feature is a linear
/// projection of the output at the EOS position.
#[derive(Debug, Clone)]
pub struct TextEncoder {
    pub token_embed: ParamId,
    pub pos_embed: ParamId,
    pub transformer: Transformer,
    pub ln_final: LayerNorm,
    pub proj: Linear,
    /// Padding positions are excluded from attention.
    pub mask_padding: bool,
    seq_len: usize,
    vocab_size: usize,
}

impl TextEncoder {
    pub fn new<T: Real>(store: &mut ParamStore<T>, prefix: &str, cfg: &EncoderConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.width;
        Ok(Self {
            token_embed: store.randn(&format!("{prefix}.token_embed"), &[cfg.vocab_size, d], INIT_STD, rng),
            pos_embed: store.randn(&format!("{prefix}.pos_embed"), &[cfg.text_seq_len(), d], INIT_STD, rng),
            transformer: Transformer::new(
                store,
                &format!("{prefix}.blocks"),
                d,
                cfg.heads,
                cfg.layers,
                cfg.mlp_ratio,
                rng,
            )?,
            ln_final: LayerNorm::new(store, &format!("{prefix}.ln_final"), d),
            proj: Linear::new(store, &format!("{prefix}.proj"), d, cfg.embed_dim, true, rng),
            mask_padding: true,
            seq_len: cfg.text_seq_len(),
            vocab_size: cfg.vocab_size,
        })
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        batch: &[TokenSequence],
    ) -> Result<EncodedBatch> {
        if batch.is_empty() {
            return Err(Error::contract("empty text batch"));
        }
        let len = self.seq_len;
        let mut ids = Vec::with_capacity(batch.len() * len);
        let mut valid = Vec::with_capacity(batch.len() * len);
        let mut eos_rows = Vec::with_capacity(batch.len());
        for (b, seq) in batch.iter().enumerate() {
            if seq.ids.len() != len {
                return Err(Error::contract(format!(
                    "token sequence has length {}, encoder expects {len}",
                    seq.ids.len()
                )));
            }
            seq.validate(self.vocab_size)?;
            ids.extend(seq.ids.iter().map(|&i| i as usize));
            valid.extend(seq.valid_mask());
            eos_rows.push(b * len + seq.eos_index);
        }
        let shape = SeqShape {
            batch: batch.len(),
            len,
        };
        let table = g.param(store, self.token_embed);
        let d = g.shape(table)[1];
        let tok = g.gather(table, &ids, d)?;
        let pos_table = g.param(store, self.pos_embed);
        let pos_idx: Vec<usize> = (0..batch.len()).flat_map(|_| 0..len).collect();
        let pos = g.gather(pos_table, &pos_idx, d)?;
        let x = g.add(tok, pos)?;
        let key_valid = self.mask_padding.then_some(valid);
        let x = self.transformer.forward(g, store, x, shape, key_valid.as_deref())?;
        let tokens = self.ln_final.forward(g, store, x)?;
        let eos = g.gather(tokens, &eos_rows, d)?;
        let global = self.proj.forward(g, store, eos)?;
        Ok(EncodedBatch {
            tokens,
            global,
            shape,
            key_valid,
            modality: Modality::Text,
        })
    }

    /// Encodes one caption; locals are the `M` word positions.
    pub fn encode<T: Real>(&self, store: &ParamStore<T>, tokens: &TokenSequence) -> Result<FeatureBundle<T>> {
        let mut g = Graph::new();
        let enc = self.forward(&mut g, store, std::slice::from_ref(tokens))?;
        enc.bundle(&g, 0, 1, self.seq_len - 2)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::nn::LN_EPS;
    use crate::encoders::tokenizer::{Vocabulary, EOS, PAD};
    use crate::tensor::Tensor;

    fn setup(layers: usize) -> (ParamStore<f64>, TextEncoder, Vocabulary, EncoderConfig) {
        let vocab = Vocabulary::build(["a man in a red coat with blue shoes"]);
        let mut cfg = EncoderConfig::tiny();
        cfg.layers = layers;
        cfg.vocab_size = vocab.len();
        cfg.text_len = 6;
        let mut store = ParamStore::new();
        let mut rng = Rng::seeded(9);
        let enc = TextEncoder::new(&mut store, "text", &cfg, &mut rng).unwrap();
        (store, enc, vocab, cfg)
    }

    #[test]
    fn deterministic_and_shaped() {
        let (store, enc, vocab, cfg) = setup(1);
        let t = vocab.tokenize("a man in a red coat", cfg.text_len);
        let a = enc.encode(&store, &t).unwrap();
        let b = enc.encode(&store, &t).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.locals.shape(), &[cfg.text_len, cfg.width]);
        assert_eq!(a.global.shape(), &[cfg.embed_dim]);
    }

    #[test]
    fn pad_region_ids_do_not_change_global() {
        let (store, enc, vocab, cfg) = setup(1);
        let t = vocab.tokenize("red coat", cfg.text_len);
        let base = enc.encode(&store, &t).unwrap();
        let mut perturbed = t.clone();
        for id in perturbed.ids[t.real_length..].iter_mut() {
            *id = vocab.id("blue");
        }
        let changed = enc.encode(&store, &perturbed).unwrap();
        for (x, y) in base.global.data().iter().zip(changed.global.data()) {
            assert!((x - y).abs() <= 1e-6);
        }
        // Oracle: the same caption with room for exactly its own words.
        let short = vocab.tokenize("red coat", 2);
        assert_eq!(short.ids[..4], t.ids[..4]);
        let mut g = Graph::new();
        let mut enc_short = enc.clone();
        enc_short.seq_len = 4;
        // Truncate the positional table to the shorter sequence.
        let mut small = store.clone();
        let full = store.peek(enc.pos_embed).clone();
        let trimmed = Tensor::new([4, cfg.width], full.data()[..4 * cfg.width].to_vec()).unwrap();
        *small.get_mut(enc.pos_embed) = trimmed;
        let out = enc_short.forward(&mut g, &small, &[short]).unwrap();
        for (x, y) in base.global.data().iter().zip(g.data(out.global)) {
            assert!((x - y).abs() <= 1e-6, "{x} vs {y}");
        }
    }

    #[test]
    fn zero_layer_identity_projection_trace() {
        let (mut store, enc, vocab, cfg) = setup(0);
        let d = cfg.width;
        let mut eye = vec![0.0; d * d];
        for i in 0..d {
            eye[i * d + i] = 1.0;
        }
        *store.get_mut(enc.proj.weight) = Tensor::new([d, d], eye).unwrap();
        let t = vocab.tokenize("red", cfg.text_len);
        assert_eq!(t.eos_index, 2);
        let out = enc.encode(&store, &t).unwrap();
        // Hand trace: LN(token_embed[EOS] + pos_embed[2]) with unit gain.
        let tok = store.peek(enc.token_embed).row(EOS as usize).to_vec();
        let pos = store.peek(enc.pos_embed).row(2).to_vec();
        let x: Vec<f64> = tok.iter().zip(&pos).map(|(a, b)| a + b).collect();
        let mean = x.iter().sum::<f64>() / d as f64;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        for (j, &v) in x.iter().enumerate() {
            let expect = (v - mean) / (var + LN_EPS).sqrt();
            assert!((out.global.data()[j] - expect).abs() < 1e-12);
        }
        assert_eq!(t.ids[3], PAD);
    }

    #[test]
    fn bad_eos_is_a_contract_error() {
        let (store, enc, vocab, cfg) = setup(1);
        let mut t = vocab.tokenize("red", cfg.text_len);
        t.eos_index = 40;
        assert!(matches!(enc.encode(&store, &t), Err(Error::Contract(_))));
    }
}
