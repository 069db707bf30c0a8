//! Small transformer toolkit on top of `candle_core` autograd.
//!
//! Everything is `f64` on the CPU. Parameters live in a [`ParamStore`] keyed
//! by dotted names; initialization draws from a caller-supplied seeded RNG so
//! two constructions with the same seed are bitwise identical.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const DTYPE: DType = DType::F64;
const LN_EPS: f64 = 1e-5;
const MASK_NEG: f64 = -1e9;

pub fn device() -> Device {
    Device::Cpu
}

/// Named trainable parameters, iterated in name order.
#[derive(Debug, Default)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
}

pub enum Init {
    Normal(f64),
    Const(f64),
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Returns the existing parameter `name` or creates it with `init`.
    pub fn get_or_init(
        &mut self,
        name: &str,
        shape: &[usize],
        init: Init,
        rng: &mut ChaCha8Rng,
    ) -> Result<Var> {
        if let Some(v) = self.vars.get(name) {
            if v.dims() != shape {
                return Err(Error::invalid(format!(
                    "parameter `{name}` has shape {:?}, expected {shape:?}",
                    v.dims()
                )));
            }
            return Ok(v.clone());
        }
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match init {
            Init::Normal(std) => {
                let dist = Normal::new(0.0, std).map_err(|e| Error::invalid(e.to_string()))?;
                (0..n).map(|_| dist.sample(rng)).collect()
            }
            Init::Const(c) => vec![c; n],
        };
        let var = Var::from_tensor(&Tensor::from_vec(data, shape, &device())?)?;
        self.vars.insert(name.to_owned(), var.clone());
        Ok(var)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Fresh parameters holding copies of the current values.
    pub fn deep_clone(&self) -> Result<Self> {
        let mut vars = BTreeMap::new();
        for (k, v) in &self.vars {
            vars.insert(k.clone(), Var::from_tensor(&v.as_tensor().copy()?)?);
        }
        Ok(Self { vars })
    }

    /// Overwrite `name` in place with `value`.
    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self
            .vars
            .get(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter `{name}`")))?;
        var.set(value)?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tensors: Vec<(String, Tensor)> = self
            .vars
            .iter()
            .map(|(k, v)| (k.clone(), v.as_tensor().clone()))
            .collect();
        candle_core::safetensors::save(&tensors.into_iter().collect(), path)?;
        Ok(())
    }

    /// Load values for every existing parameter from a safetensors file.
    pub fn load_into(&self, path: &Path) -> Result<()> {
        let loaded = candle_core::safetensors::load(path, &device())?;
        if loaded.len() != self.vars.len() {
            return Err(Error::invalid(format!(
                "{} holds {} tensors, model expects {}",
                path.display(),
                loaded.len(),
                self.vars.len()
            )));
        }
        for (k, v) in &self.vars {
            let t = loaded
                .get(k)
                .ok_or_else(|| Error::invalid(format!("{} lacks `{k}`", path.display())))?;
            v.set(t)?;
        }
        Ok(())
    }

    /// SHA-256 over names, shapes and values.
    pub fn fingerprint(&self) -> Result<String> {
        let mut h = Sha256::new();
        for (k, v) in &self.vars {
            h.update(k.as_bytes());
            for d in v.dims() {
                h.update((*d as u64).to_le_bytes());
            }
            for x in v.as_tensor().flatten_all()?.to_vec1::<f64>()? {
                h.update(x.to_le_bytes());
            }
        }
        Ok(hex(&h.finalize()))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Shared construction context: store, seeded RNG and a name prefix.
pub struct Builder<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a> Builder<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    pub fn push(&mut self, name: &str) -> Builder<'_> {
        let prefix = if self.prefix.is_empty() {
            name.to_owned()
        } else {
            format!("{}.{name}", self.prefix)
        };
        Builder {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Var> {
        let full = if self.prefix.is_empty() {
            name.to_owned()
        } else {
            format!("{}.{name}", self.prefix)
        };
        self.store.get_or_init(&full, shape, init, self.rng)
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        self.rng
    }
}

const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Var,
    bias: Var,
}

impl Linear {
    pub fn new(b: &mut Builder, fan_in: usize, fan_out: usize) -> Result<Self> {
        let std = (1.0 / fan_in as f64).sqrt();
        Ok(Self {
            weight: b.param("weight", &[fan_in, fan_out], Init::Normal(std))?,
            bias: b.param("bias", &[fan_out], Init::Const(0.0))?,
        })
    }

    /// `x`: `[..., fan_in]`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let fan_in = *dims.last().unwrap();
        let rows: usize = dims[..dims.len() - 1].iter().product();
        let y = x
            .reshape((rows, fan_in))?
            .matmul(self.weight.as_tensor())?
            .broadcast_add(self.bias.as_tensor())?;
        let mut out = dims;
        *out.last_mut().unwrap() = self.bias.dims()[0];
        Ok(y.reshape(out)?)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Var,
    pub beta: Var,
}

impl LayerNorm {
    pub fn new(b: &mut Builder, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: b.param("gamma", &[dim], Init::Const(1.0))?,
            beta: b.param("beta", &[dim], Init::Const(0.0))?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + LN_EPS)?.sqrt()?)?;
        Ok(normed
            .broadcast_mul(self.gamma.as_tensor())?
            .broadcast_add(self.beta.as_tensor())?)
    }

    /// Copy `other`'s affine parameters into this norm.
    pub fn copy_from(&self, other: &LayerNorm) -> Result<()> {
        self.gamma.set(&other.gamma.as_tensor().copy()?)?;
        self.beta.set(&other.beta.as_tensor().copy()?)?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Embedding {
    table: Var,
}

impl Embedding {
    pub fn new(b: &mut Builder, rows: usize, dim: usize) -> Result<Self> {
        Ok(Self {
            table: b.param("table", &[rows, dim], Init::Normal(INIT_STD * 5.0))?,
        })
    }

    pub fn rows(&self) -> usize {
        self.table.dims()[0]
    }

    /// `ids`: u32 `[B, L]` → `[B, L, dim]`.
    pub fn forward(&self, ids: &Tensor) -> Result<Tensor> {
        let (b, l) = ids.dims2()?;
        let dim = self.table.dims()[1];
        let flat = ids.flatten_all()?;
        Ok(self
            .table
            .as_tensor()
            .index_select(&flat, 0)?
            .reshape((b, l, dim))?)
    }
}

/// Softmax over the last axis; the max shift is detached.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let m = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&m)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

pub fn log_softmax_last(x: &Tensor) -> Result<Tensor> {
    let m = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&m)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

#[derive(Debug, Clone)]
pub struct SelfAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    heads: usize,
}

impl SelfAttention {
    pub fn new(b: &mut Builder, width: usize, heads: usize) -> Result<Self> {
        if heads == 0 || width % heads != 0 {
            return Err(Error::invalid(format!(
                "width {width} not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            q: Linear::new(&mut b.push("q"), width, width)?,
            k: Linear::new(&mut b.push("k"), width, width)?,
            v: Linear::new(&mut b.push("v"), width, width)?,
            out: Linear::new(&mut b.push("out"), width, width)?,
            heads,
        })
    }

    /// `x`: `[B, L, W]`; `bias`: additive key mask `[B, 1, 1, L]`.
    pub fn forward(&self, x: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let (b, l, w) = x.dims3()?;
        let hd = w / self.heads;
        let split = |t: Tensor| -> Result<Tensor> {
            Ok(t.reshape((b, l, self.heads, hd))?.transpose(1, 2)?.contiguous()?)
        };
        let q = split(self.q.forward(x)?)?;
        let k = split(self.k.forward(x)?)?;
        let v = split(self.v.forward(x)?)?;
        let scores = (q.matmul(&k.t()?.contiguous()?)? / (hd as f64).sqrt())?;
        let probs = softmax_last(&scores.broadcast_add(bias)?)?;
        let ctx = probs
            .matmul(&v)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, l, w))?;
        self.out.forward(&ctx)
    }
}

/// Post-norm transformer block: `x = ln1(x + attn(x)); x = ln2(x + ffn(x))`.
#[derive(Debug, Clone)]
pub struct Block {
    attn: SelfAttention,
    ln1: LayerNorm,
    ff_in: Linear,
    ff_out: Linear,
    pub ln2: LayerNorm,
}

impl Block {
    pub fn new(b: &mut Builder, width: usize, heads: usize, ffn: usize) -> Result<Self> {
        Ok(Self {
            attn: SelfAttention::new(&mut b.push("attn"), width, heads)?,
            ln1: LayerNorm::new(&mut b.push("ln1"), width)?,
            ff_in: Linear::new(&mut b.push("ff_in"), width, ffn)?,
            ff_out: Linear::new(&mut b.push("ff_out"), ffn, width)?,
            ln2: LayerNorm::new(&mut b.push("ln2"), width)?,
        })
    }

    pub fn forward(&self, x: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let x = self.ln1.forward(&(x + self.attn.forward(x, bias)?)?)?;
        let h = self.ff_out.forward(&self.ff_in.forward(&x)?.gelu()?)?;
        self.ln2.forward(&(x + h)?)
    }
}

/// `[B, L]` 1/0 mask → additive attention bias `[B, 1, 1, L]`.
pub fn attention_bias(mask: &Tensor) -> Result<Tensor> {
    let (b, l) = mask.dims2()?;
    Ok(((mask - 1.0)? * -MASK_NEG)?.reshape((b, 1, 1, l))?)
}

/// Reduce `[B, L, W]` to `[B, W]` over positions where `mask` is 1.
pub fn pool(x: &Tensor, mask: &Tensor, pooling: crate::embeddings::Pooling) -> Result<Tensor> {
    match pooling {
        crate::embeddings::Pooling::Mean => {
            let m = mask.unsqueeze(2)?;
            let summed = x.broadcast_mul(&m)?.sum(1)?;
            let counts = mask.sum_keepdim(1)?.clamp(1.0, f64::MAX)?;
            Ok(summed.broadcast_div(&counts)?)
        }
        crate::embeddings::Pooling::First => Ok(x.narrow(1, 0, 1)?.squeeze(1)?),
    }
}

/// Shallow transformer used for both the fusion transformer and the
/// projector: optional input map, learned positions, a two-way segment
/// embedding, an input norm and a stack of post-norm blocks.
#[derive(Debug, Clone)]
pub struct FusionTransformer {
    in_proj: Option<Linear>,
    positions: Embedding,
    segments: Embedding,
    input_ln: LayerNorm,
    blocks: Vec<Block>,
    width: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FusionTransformerConfig {
    pub input_dim: usize,
    pub width: usize,
    pub blocks: usize,
    pub heads: usize,
    pub ffn: usize,
    pub max_positions: usize,
}

impl FusionTransformer {
    pub fn new(b: &mut Builder, cfg: &FusionTransformerConfig) -> Result<Self> {
        if cfg.blocks == 0 {
            return Err(Error::invalid("transformer needs at least one block"));
        }
        let in_proj = if cfg.input_dim != cfg.width {
            Some(Linear::new(&mut b.push("in_proj"), cfg.input_dim, cfg.width)?)
        } else {
            None
        };
        let blocks = (0..cfg.blocks)
            .map(|i| Block::new(&mut b.push(&format!("block{i}")), cfg.width, cfg.heads, cfg.ffn))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            in_proj,
            positions: Embedding::new(&mut b.push("positions"), cfg.max_positions, cfg.width)?,
            segments: Embedding::new(&mut b.push("segments"), 2, cfg.width)?,
            input_ln: LayerNorm::new(&mut b.push("input_ln"), cfg.width)?,
            blocks,
            width: cfg.width,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn max_positions(&self) -> usize {
        self.positions.rows()
    }

    /// Normalization applied last, i.e. the final block's second norm.
    pub fn final_norm(&self) -> &LayerNorm {
        &self.blocks.last().expect("non-empty").ln2
    }

    /// `x`: `[B, L, input_dim]`; `positions`/`segments`: u32 `[B, L]`;
    /// `mask`: `[B, L]`. Output keeps the token count.
    pub fn forward(
        &self,
        x: &Tensor,
        positions: &Tensor,
        segments: &Tensor,
        mask: &Tensor,
    ) -> Result<Tensor> {
        let x = match &self.in_proj {
            Some(p) => p.forward(x)?,
            None => x.clone(),
        };
        let x = (x + self.positions.forward(positions)?)?;
        let x = (x + self.segments.forward(segments)?)?;
        let mut x = self.input_ln.forward(&x)?;
        let bias = attention_bias(mask)?;
        for blk in &self.blocks {
            x = blk.forward(&x, &bias)?;
        }
        Ok(x)
    }
}

/// Rectangular u32 tensor from ragged rows, padded with `pad`, plus a 1/0 mask.
pub fn pad_ids(rows: &[Vec<u32>], pad: u32) -> Result<(Tensor, Tensor)> {
    let b = rows.len();
    let l = rows.iter().map(Vec::len).max().unwrap_or(0).max(1);
    let mut ids = vec![pad; b * l];
    let mut mask = vec![0.0f64; b * l];
    for (i, r) in rows.iter().enumerate() {
        for (j, &t) in r.iter().enumerate() {
            ids[i * l + j] = t;
            mask[i * l + j] = 1.0;
        }
    }
    Ok((
        Tensor::from_vec(ids, (b, l), &device())?,
        Tensor::from_vec(mask, (b, l), &device())?,
    ))
}

/// u32 `[B, L]` tensor with row `i` equal to `offset[i] + j`, clamped to `max - 1`.
pub fn position_ids(b: usize, l: usize, offsets: &[usize], max: usize) -> Result<Tensor> {
    let mut v = Vec::with_capacity(b * l);
    for off in offsets.iter().take(b) {
        for j in 0..l {
            v.push((off + j).min(max - 1) as u32);
        }
    }
    Ok(Tensor::from_vec(v, (b, l), &device())?)
}

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    use rand::SeedableRng;
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform draw kept here so callers need not import `rand` traits.
pub fn uniform(rng: &mut ChaCha8Rng) -> f64 {
    rng.random::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_parameters() {
        let build = || {
            let mut store = ParamStore::new();
            let mut rng = seeded_rng(3);
            let mut b = Builder::new(&mut store, &mut rng);
            Linear::new(&mut b.push("lin"), 4, 3).unwrap();
            store.fingerprint().unwrap()
        };
        assert_eq!(build(), build());
    }

    #[test]
    fn deep_clone_is_independent() {
        let mut store = ParamStore::new();
        let mut rng = seeded_rng(0);
        store.get_or_init("w", &[2], Init::Const(1.0), &mut rng).unwrap();
        let copy = store.deep_clone().unwrap();
        store
            .set("w", &Tensor::new(&[5.0f64, 5.0], &device()).unwrap())
            .unwrap();
        let v = copy.get("w").unwrap().as_tensor().to_vec1::<f64>().unwrap();
        assert_eq!(v, vec![1.0, 1.0]);
    }

    #[test]
    fn layer_norm_output_is_standardized() {
        let mut store = ParamStore::new();
        let mut rng = seeded_rng(0);
        let ln = LayerNorm::new(&mut Builder::new(&mut store, &mut rng), 4).unwrap();
        let x = Tensor::new(&[[1.0f64, 2.0, 3.0, 10.0]], &device()).unwrap();
        let y = ln.forward(&x).unwrap().to_vec2::<f64>().unwrap();
        let mean: f64 = y[0].iter().sum::<f64>() / 4.0;
        let var: f64 = y[0].iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-4);
    }

    #[test]
    fn masked_keys_get_zero_attention() {
        let x = Tensor::new(&[[0.3f64, 1.0, 5.0]], &device()).unwrap();
        let mask = Tensor::new(&[[1.0f64, 1.0, 0.0]], &device()).unwrap();
        let bias = attention_bias(&mask).unwrap().reshape((1, 3)).unwrap();
        let p = softmax_last(&(x + bias).unwrap()).unwrap().to_vec2::<f64>().unwrap();
        assert_eq!(p[0][2], 0.0);
        assert!((p[0][0] + p[0][1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn save_and_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.safetensors");
        let mut store = ParamStore::new();
        let mut rng = seeded_rng(9);
        Linear::new(&mut Builder::new(&mut store, &mut rng).push("l"), 3, 2).unwrap();
        store.save(&path).unwrap();
        let fresh = store.deep_clone().unwrap();
        fresh.set("l.bias", &Tensor::new(&[7.0f64, 7.0], &device()).unwrap()).unwrap();
        fresh.load_into(&path).unwrap();
        assert_eq!(fresh.fingerprint().unwrap(), store.fingerprint().unwrap());
    }
}
