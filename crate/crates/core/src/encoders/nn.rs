//! Layers shared by the encoders and the auxiliary heads.
//!
//! Sequences are carried as a flat `[batch * len, width]` matrix together
//! with the batch size and sequence length, so projections run as a single
//! matrix product over the whole batch.

use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamId, ParamStore, Real, Rng, Tensor, Var};

/// Std of the N(0, s^2) init used for projections and embeddings.
pub const INIT_STD: f64 = 0.02;

pub const LN_EPS: f64 = 1e-5;

/// Attention logit added at masked key positions.
const MASKED_LOGIT: f64 = -1e9;

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut Rng,
    ) -> Self {
        Self::with_std(store, name, in_dim, out_dim, bias, (1.0 / in_dim as f64).sqrt(), rng)
    }

    pub fn with_std<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        std: f64,
        rng: &mut Rng,
    ) -> Self {
        let weight = store.randn(&format!("{name}.weight"), &[in_dim, out_dim], std, rng);
        let bias = bias.then(|| store.zeros(&format!("{name}.bias"), &[out_dim]));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let y = g.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(store, b);
                g.add_bias(y, b)
            }
            None => Ok(y),
        }
    }

    /// Tape-free evaluation on a single row.
    pub fn apply_row<T: Real>(&self, store: &ParamStore<T>, x: &[T]) -> Vec<T> {
        let w = store.get(self.weight).data();
        let mut out = match self.bias {
            Some(b) => store.get(b).data().to_vec(),
            None => vec![T::zero(); self.out_dim],
        };
        for (i, &xi) in x.iter().enumerate() {
            let row = &w[i * self.out_dim..(i + 1) * self.out_dim];
            out.iter_mut().zip(row).for_each(|(o, &wv)| *o += xi * wv);
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.ones(&format!("{name}.gamma"), &[dim]),
            beta: store.zeros(&format!("{name}.beta"), &[dim]),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm(x, gamma, beta, LN_EPS)
    }
}

/// Shape bookkeeping for a batch of equal-length sequences.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeqShape {
    pub batch: usize,
    pub len: usize,
}

/// Multi-head attention with separate query and key/value sources.
///
/// Projections are stored as `d x d` matrices whose column blocks of width
/// `d / heads` are the per-head projections; the output projection maps the
/// concatenated heads back to `d`.
#[derive(Debug, Clone)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub dim: usize,
    /// Logits are divided by `sqrt(scale_dim)`.
    pub scale_dim: usize,
}

impl Attention {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        bias: bool,
        rng: &mut Rng,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::config(format!("width {dim} is not divisible by {heads} heads")));
        }
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, bias, rng),
            k: Linear::new(store, &format!("{name}.k"), dim, dim, bias, rng),
            v: Linear::new(store, &format!("{name}.v"), dim, dim, bias, rng),
            o: Linear::new(store, &format!("{name}.o"), dim, dim, bias, rng),
            heads,
            dim,
            scale_dim: dim / heads,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// `[B*L, d] -> [B*H, L, dh]`
    fn split_heads<T: Real>(&self, g: &mut Graph<T>, x: Var, s: SeqShape) -> Result<Var> {
        let dh = self.head_dim();
        let x = g.reshape(x, &[s.batch, s.len, self.heads, dh])?;
        let x = g.permute(x, &[0, 2, 1, 3])?;
        g.reshape(x, &[s.batch * self.heads, s.len, dh])
    }

    /// `[B*H, L, dh] -> [B*L, d]`
    fn merge_heads<T: Real>(&self, g: &mut Graph<T>, x: Var, s: SeqShape) -> Result<Var> {
        let dh = self.head_dim();
        let x = g.reshape(x, &[s.batch, self.heads, s.len, dh])?;
        let x = g.permute(x, &[0, 2, 1, 3])?;
        g.reshape(x, &[s.batch * s.len, self.dim])
    }

    /// Attention of `query` positions over `context` positions, per sample.
    ///
    /// `key_valid`, when given, has `kv.batch * kv.len` entries; invalid keys
    /// receive no attention weight.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        query: Var,
        qs: SeqShape,
        context: Var,
        kv: SeqShape,
        key_valid: Option<&[bool]>,
    ) -> Result<Var> {
        if qs.batch != kv.batch {
            return Err(Error::contract(format!(
                "attention batch mismatch: {} queries vs {} contexts",
                qs.batch, kv.batch
            )));
        }
        for (v, s) in [(query, qs), (context, kv)] {
            if g.shape(v) != [s.batch * s.len, self.dim] {
                return Err(Error::Dimension {
                    op: "attention",
                    lhs: g.shape(v).to_vec(),
                    rhs: vec![s.batch * s.len, self.dim],
                });
            }
        }
        let q = self.q.forward(g, store, query)?;
        let k = self.k.forward(g, store, context)?;
        let v = self.v.forward(g, store, context)?;
        let q = self.split_heads(g, q, qs)?;
        let k = self.split_heads(g, k, kv)?;
        let v = self.split_heads(g, v, kv)?;
        let logits = g.matmul_t(q, k, true)?;
        let mut logits = g.scale(logits, 1.0 / (self.scale_dim as f64).sqrt());
        if let Some(valid) = key_valid {
            if valid.len() != kv.batch * kv.len {
                return Err(Error::contract("key mask length does not match context"));
            }
            let mut bias = Vec::with_capacity(kv.batch * self.heads * qs.len * kv.len);
            for b in 0..kv.batch {
                let row = &valid[b * kv.len..(b + 1) * kv.len];
                for _ in 0..self.heads * qs.len {
                    bias.extend(row.iter().map(|&ok| T::c(if ok { 0.0 } else { MASKED_LOGIT })));
                }
            }
            let bias = g.constant(Tensor::new([kv.batch * self.heads, qs.len, kv.len], bias)?);
            logits = g.add(logits, bias)?;
        }
        let weights = g.softmax(logits);
        let mixed = g.matmul(weights, v)?;
        let merged = self.merge_heads(g, mixed, qs)?;
        self.o.forward(g, store, merged)
    }
}

/// Pre-norm transformer block: `x + attn(ln(x))`, then `x + mlp(ln(x))`.
#[derive(Debug, Clone)]
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Block {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let hidden = dim * mlp_ratio.max(1);
        Ok(Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim),
            attn: Attention::new(store, &format!("{name}.attn"), dim, heads, true, rng)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim),
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, hidden, true, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, dim, true, rng),
        })
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        s: SeqShape,
        key_valid: Option<&[bool]>,
    ) -> Result<Var> {
        let h = self.ln1.forward(g, store, x)?;
        let h = self.attn.forward(g, store, h, s, h, s, key_valid)?;
        let x = g.add(x, h)?;
        let h = self.ln2.forward(g, store, x)?;
        let h = self.fc1.forward(g, store, h)?;
        let h = g.gelu(h);
        let h = self.fc2.forward(g, store, h)?;
        g.add(x, h)
    }
}

/// A stack of [`Block`]s.
#[derive(Debug, Clone, Default)]
pub struct Transformer {
    pub blocks: Vec<Block>,
}

impl Transformer {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        depth: usize,
        mlp_ratio: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let blocks = (0..depth)
            .map(|i| Block::new(store, &format!("{name}.{i}"), dim, heads, mlp_ratio, rng))
            .collect::<Result<_>>()?;
        Ok(Self { blocks })
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        mut x: Var,
        s: SeqShape,
        key_valid: Option<&[bool]>,
    ) -> Result<Var> {
        for block in &self.blocks {
            x = block.forward(g, store, x, s, key_valid)?;
        }
        Ok(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn attention_rejects_indivisible_width() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = Rng::seeded(0);
        assert!(Attention::new(&mut store, "a", 10, 4, true, &mut rng).is_err());
    }

    #[test]
    fn block_preserves_shape() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = Rng::seeded(0);
        let block = Block::new(&mut store, "b", 8, 2, 2, &mut rng).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::randn([2 * 3, 8], 1.0, &mut rng));
        let s = SeqShape { batch: 2, len: 3 };
        let y = block.forward(&mut g, &store, x, s, None).unwrap();
        assert_eq!(g.shape(y), &[6, 8]);
    }

    #[test]
    fn masked_keys_do_not_leak() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = Rng::seeded(5);
        let attn = Attention::new(&mut store, "a", 4, 2, true, &mut rng).unwrap();
        let q = Tensor::<f64>::randn([2, 4], 1.0, &mut rng);
        let mut ctx = Tensor::<f64>::randn([3, 4], 1.0, &mut rng);
        let valid = [true, true, false];
        let run = |ctx: &Tensor<f64>| {
            let mut g = Graph::new();
            let qv = g.constant(q.clone());
            let cv = g.constant(ctx.clone());
            let y = attn
                .forward(
                    &mut g,
                    &store,
                    qv,
                    SeqShape { batch: 1, len: 2 },
                    cv,
                    SeqShape { batch: 1, len: 3 },
                    Some(&valid),
                )
                .unwrap();
            g.data(y).to_vec()
        };
        let before = run(&ctx);
        ctx.data_mut()[8..12].iter_mut().for_each(|v| *v += 3.0);
        assert_eq!(before, run(&ctx));
    }
}
