//! Pre-LN transformer encoder-decoder with a pointer-generator output.
//!
//! The output distribution mixes a softmax over the vocabulary with a copy
//! distribution over source positions, weighted by a learned gate. Source
//! tokens missing from the vocabulary get per-example extended ids
//! (`vocab.len() + j`) so they can still be copied.

use std::collections::{BTreeMap, HashMap};

use candle_core::{DType, Device, Result, Tensor, D};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::vocab::{Vocab, BOS, EOS, PAD, UNK};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TinyConfig {
    pub d_model: usize,
    pub heads: usize,
    pub ff: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    /// Rows preallocated in the embedding table.
    pub vocab_capacity: usize,
    pub max_positions: usize,
    pub max_target_len: usize,
}

impl Default for TinyConfig {
    fn default() -> Self {
        TinyConfig {
            d_model: 128,
            heads: 4,
            ff: 512,
            encoder_layers: 2,
            decoder_layers: 2,
            vocab_capacity: 4096,
            max_positions: 96,
            max_target_len: 32,
        }
    }
}

impl TinyConfig {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.d_model == 0 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            ));
        }
        if self.ff == 0 || self.vocab_capacity < 16 || self.max_target_len == 0 {
            return Err("ff, vocab_capacity and max_target_len must be positive".into());
        }
        if self.max_target_len + 1 > self.max_positions {
            return Err("max_target_len must be below max_positions".into());
        }
        Ok(())
    }
}

pub type Params = BTreeMap<String, Tensor>;

fn uniform(rng: &mut ChaCha8Rng, dims: &[usize], limit: f32) -> Result<Tensor> {
    let n = dims.iter().product();
    let v: Vec<f32> = (0..n).map(|_| rng.random_range(-limit..limit)).collect();
    Tensor::from_vec(v, dims, &Device::Cpu)
}

fn constant(dims: &[usize], value: f32) -> Result<Tensor> {
    Tensor::full(value, dims, &Device::Cpu)
}

struct Init<'a> {
    rng: &'a mut ChaCha8Rng,
    params: Params,
}

impl Init<'_> {
    fn linear(&mut self, name: &str, din: usize, dout: usize) -> Result<()> {
        let limit = (6.0 / (din + dout) as f32).sqrt();
        self.params
            .insert(format!("{name}.w"), uniform(self.rng, &[din, dout], limit)?);
        self.params
            .insert(format!("{name}.b"), constant(&[dout], 0.0)?);
        Ok(())
    }

    fn norm(&mut self, name: &str, d: usize) -> Result<()> {
        self.params
            .insert(format!("{name}.g"), constant(&[d], 1.0)?);
        self.params
            .insert(format!("{name}.b"), constant(&[d], 0.0)?);
        Ok(())
    }

    fn attention(&mut self, name: &str, d: usize) -> Result<()> {
        for part in ["q", "k", "v", "o"] {
            self.linear(&format!("{name}.{part}"), d, d)?;
        }
        Ok(())
    }

    fn ffn(&mut self, name: &str, d: usize, ff: usize) -> Result<()> {
        self.linear(&format!("{name}.ff1"), d, ff)?;
        self.linear(&format!("{name}.ff2"), ff, d)
    }
}

pub fn init_params(cfg: &TinyConfig, rng: &mut ChaCha8Rng) -> Result<Params> {
    let d = cfg.d_model;
    let emb_limit = 3f32.sqrt() / (d as f32).sqrt();
    let mut init = Init {
        rng,
        params: Params::new(),
    };
    let emb = uniform(init.rng, &[cfg.vocab_capacity, d], emb_limit)?;
    init.params.insert("emb".into(), emb);
    let pos = uniform(init.rng, &[cfg.max_positions, d], emb_limit)?;
    init.params.insert("pos".into(), pos);
    for i in 0..cfg.encoder_layers {
        init.norm(&format!("enc.{i}.ln1"), d)?;
        init.attention(&format!("enc.{i}.sa"), d)?;
        init.norm(&format!("enc.{i}.ln2"), d)?;
        init.ffn(&format!("enc.{i}"), d, cfg.ff)?;
    }
    init.norm("enc.ln", d)?;
    for i in 0..cfg.decoder_layers {
        init.norm(&format!("dec.{i}.ln1"), d)?;
        init.attention(&format!("dec.{i}.sa"), d)?;
        init.norm(&format!("dec.{i}.ln2"), d)?;
        init.attention(&format!("dec.{i}.ca"), d)?;
        init.norm(&format!("dec.{i}.ln3"), d)?;
        init.ffn(&format!("dec.{i}"), d, cfg.ff)?;
    }
    init.norm("dec.ln", d)?;
    init.linear("copy", d, d)?;
    init.linear("gate", 2 * d, 1)?;
    Ok(init.params)
}

pub fn parameter_count(params: &Params) -> usize {
    params.values().map(|t| t.elem_count()).sum()
}

fn softmax(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    e.broadcast_div(&e.sum_keepdim(D::Minus1)?)
}

fn sigmoid(x: &Tensor) -> Result<Tensor> {
    (x.neg()?.exp()? + 1.0)?.recip()
}

const NEG: f32 = -1e9;

/// One tokenized source/target pair in id space.
#[derive(Debug, Clone)]
pub struct Encoded {
    /// Source ids with out-of-vocabulary tokens at extended ids.
    pub src: Vec<u32>,
    /// Source words at extended ids, in order of first appearance.
    pub oov: Vec<String>,
    /// Target ids without BOS, ending with EOS.
    pub tgt: Vec<u32>,
}

pub fn encode_source(tokens: &[String], vocab: &Vocab, max_len: usize) -> (Vec<u32>, Vec<String>) {
    let mut oov: Vec<String> = Vec::new();
    let src = tokens
        .iter()
        .take(max_len)
        .map(|t| {
            vocab.id(t).unwrap_or_else(|| {
                let j = oov.iter().position(|o| o == t).unwrap_or_else(|| {
                    oov.push(t.clone());
                    oov.len() - 1
                });
                (vocab.len() + j) as u32
            })
        })
        .collect();
    (src, oov)
}

pub fn encode_pair(src: &[String], tgt: &[String], vocab: &Vocab, cfg: &TinyConfig) -> Encoded {
    let (src, oov) = encode_source(src, vocab, cfg.max_positions);
    let mut ids: Vec<u32> = tgt
        .iter()
        .take(cfg.max_target_len - 1)
        .map(|t| {
            vocab
                .id(t)
                .or_else(|| {
                    oov.iter()
                        .position(|o| o == t)
                        .map(|j| (vocab.len() + j) as u32)
                })
                .unwrap_or(UNK)
        })
        .collect();
    ids.push(EOS);
    Encoded { src, oov, tgt: ids }
}

/// Forward pass over a parameter map; the same code serves training
/// (variables) and inference (plain tensors).
pub struct Net<'a> {
    pub params: &'a Params,
    pub cfg: &'a TinyConfig,
    /// Number of live vocabulary rows.
    pub vocab_len: usize,
}

struct Batch {
    /// Embedding ids (extended ids replaced by UNK), `[B, S]`.
    src_in: Tensor,
    /// Additive padding mask, `[B, 1, 1, S]`.
    src_mask: Tensor,
}

impl<'a> Net<'a> {
    fn p(&self, name: &str) -> Result<&'a Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| candle_core::Error::Msg(format!("missing parameter {name}")))
    }

    fn linear(&self, x: &Tensor, name: &str) -> Result<Tensor> {
        let w = self.p(&format!("{name}.w"))?;
        let b = self.p(&format!("{name}.b"))?;
        let (bsz, len, din) = x.dims3()?;
        let dout = w.dim(1)?;
        x.reshape((bsz * len, din))?
            .matmul(w)?
            .broadcast_add(b)?
            .reshape((bsz, len, dout))
    }

    fn norm(&self, x: &Tensor, name: &str) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let xc = x.broadcast_sub(&mean)?;
        let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
        let xn = xc.broadcast_div(&(var + 1e-5)?.sqrt()?)?;
        xn.broadcast_mul(self.p(&format!("{name}.g"))?)?
            .broadcast_add(self.p(&format!("{name}.b"))?)
    }

    fn split_heads(&self, x: &Tensor) -> Result<Tensor> {
        let (b, l, d) = x.dims3()?;
        let h = self.cfg.heads;
        x.reshape((b, l, h, d / h))?.transpose(1, 2)?.contiguous()
    }

    fn attention(
        &self,
        q_in: &Tensor,
        kv_in: &Tensor,
        mask: Option<&Tensor>,
        name: &str,
    ) -> Result<Tensor> {
        let (b, lq, d) = q_in.dims3()?;
        let q = self.split_heads(&self.linear(q_in, &format!("{name}.q"))?)?;
        let k = self.split_heads(&self.linear(kv_in, &format!("{name}.k"))?)?;
        let v = self.split_heads(&self.linear(kv_in, &format!("{name}.v"))?)?;
        let scale = 1.0 / ((d / self.cfg.heads) as f64).sqrt();
        let mut scores = (q.matmul(&k.t()?.contiguous()?)? * scale)?;
        if let Some(m) = mask {
            scores = scores.broadcast_add(m)?;
        }
        let out = softmax(&scores)?.matmul(&v)?;
        let out = out.transpose(1, 2)?.contiguous()?.reshape((b, lq, d))?;
        self.linear(&out, &format!("{name}.o"))
    }

    fn ffn(&self, x: &Tensor, name: &str) -> Result<Tensor> {
        let h = self.linear(x, &format!("{name}.ff1"))?.relu()?;
        self.linear(&h, &format!("{name}.ff2"))
    }

    fn embed(&self, ids: &Tensor) -> Result<Tensor> {
        let (b, l) = ids.dims2()?;
        let d = self.cfg.d_model;
        let e = self
            .p("emb")?
            .index_select(&ids.flatten_all()?, 0)?
            .reshape((b, l, d))?;
        e.broadcast_add(&self.p("pos")?.narrow(0, 0, l)?)
    }

    fn batch(&self, srcs: &[&[u32]]) -> Result<Batch> {
        let s = srcs.iter().map(|x| x.len()).max().unwrap_or(1).max(1);
        let b = srcs.len();
        let mut ids = vec![PAD; b * s];
        let mut mask = vec![NEG; b * s];
        for (i, src) in srcs.iter().enumerate() {
            for (j, &t) in src.iter().enumerate() {
                ids[i * s + j] = if (t as usize) < self.vocab_len {
                    t
                } else {
                    UNK
                };
                mask[i * s + j] = 0.0;
            }
        }
        Ok(Batch {
            src_in: Tensor::from_vec(ids, (b, s), &Device::Cpu)?,
            src_mask: Tensor::from_vec(mask, (b, 1, 1, s), &Device::Cpu)?,
        })
    }

    fn encode(&self, batch: &Batch) -> Result<Tensor> {
        let mut x = self.embed(&batch.src_in)?;
        for i in 0..self.cfg.encoder_layers {
            let h = self.norm(&x, &format!("enc.{i}.ln1"))?;
            x = (x + self.attention(&h, &h, Some(&batch.src_mask), &format!("enc.{i}.sa"))?)?;
            let h = self.norm(&x, &format!("enc.{i}.ln2"))?;
            x = (x + self.ffn(&h, &format!("enc.{i}"))?)?;
        }
        self.norm(&x, "enc.ln")
    }

    fn decode(&self, tgt_in: &Tensor, enc: &Tensor, src_mask: &Tensor) -> Result<Tensor> {
        let t = tgt_in.dim(1)?;
        let causal: Vec<f32> = (0..t * t)
            .map(|i| if i % t > i / t { NEG } else { 0.0 })
            .collect();
        let causal = Tensor::from_vec(causal, (1, 1, t, t), &Device::Cpu)?;
        let mut x = self.embed(tgt_in)?;
        for i in 0..self.cfg.decoder_layers {
            let h = self.norm(&x, &format!("dec.{i}.ln1"))?;
            x = (x + self.attention(&h, &h, Some(&causal), &format!("dec.{i}.sa"))?)?;
            let h = self.norm(&x, &format!("dec.{i}.ln2"))?;
            x = (x + self.attention(&h, enc, Some(src_mask), &format!("dec.{i}.ca"))?)?;
            let h = self.norm(&x, &format!("dec.{i}.ln3"))?;
            x = (x + self.ffn(&h, &format!("dec.{i}"))?)?;
        }
        self.norm(&x, "dec.ln")
    }

    /// Vocabulary distribution `[B, T, V]`, copy attention `[B, T, S]` and
    /// generation gate `[B, T, 1]`.
    fn heads(
        &self,
        h: &Tensor,
        enc: &Tensor,
        src_mask: &Tensor,
    ) -> Result<(Tensor, Tensor, Tensor)> {
        let (b, t, d) = h.dims3()?;
        let emb = self.p("emb")?.narrow(0, 0, self.vocab_len)?;
        let mut never = vec![0f32; self.vocab_len];
        never[PAD as usize] = NEG;
        never[BOS as usize] = NEG;
        let never = Tensor::from_vec(never, self.vocab_len, &Device::Cpu)?;
        let logits = h
            .reshape((b * t, d))?
            .matmul(&emb.t()?)?
            .broadcast_add(&never)?;
        let p_vocab = softmax(&logits)?.reshape((b, t, self.vocab_len))?;

        let q = self.linear(h, "copy")?;
        let scores = (q.matmul(&enc.t()?.contiguous()?)? / (d as f64).sqrt())?;
        let attn = softmax(&scores.broadcast_add(&src_mask.squeeze(1)?)?)?;
        let ctx = attn.matmul(enc)?;
        let gate = sigmoid(&self.linear(&Tensor::cat(&[h, &ctx], D::Minus1)?, "gate")?)?;
        Ok((p_vocab, attn, gate))
    }

    /// Mean negative log-likelihood of the targets under teacher forcing.
    pub fn loss(&self, batch: &[&Encoded]) -> Result<Tensor> {
        let srcs: Vec<&[u32]> = batch.iter().map(|e| e.src.as_slice()).collect();
        let enc_batch = self.batch(&srcs)?;
        let enc = self.encode(&enc_batch)?;
        let b = batch.len();
        let s = enc.dim(1)?;
        let t = batch.iter().map(|e| e.tgt.len()).max().unwrap_or(1);

        let mut tgt_in = vec![PAD; b * t];
        let mut gather = vec![UNK; b * t];
        let mut in_vocab = vec![0f32; b * t];
        let mut weight = vec![0f32; b * t];
        let mut copy_mask = vec![0f32; b * t * s];
        for (i, e) in batch.iter().enumerate() {
            for (j, &y) in e.tgt.iter().enumerate() {
                let prev = if j == 0 { BOS } else { e.tgt[j - 1] };
                tgt_in[i * t + j] = if (prev as usize) < self.vocab_len {
                    prev
                } else {
                    UNK
                };
                if (y as usize) < self.vocab_len {
                    gather[i * t + j] = y;
                    in_vocab[i * t + j] = 1.0;
                }
                weight[i * t + j] = 1.0;
                for (k, &x) in e.src.iter().enumerate() {
                    if x == y {
                        copy_mask[(i * t + j) * s + k] = 1.0;
                    }
                }
            }
        }
        let dev = Device::Cpu;
        let tgt_in = Tensor::from_vec(tgt_in, (b, t), &dev)?;
        let gather = Tensor::from_vec(gather, (b, t, 1), &dev)?;
        let in_vocab = Tensor::from_vec(in_vocab, (b, t, 1), &dev)?;
        let weight = Tensor::from_vec(weight, (b, t), &dev)?;
        let copy_mask = Tensor::from_vec(copy_mask, (b, t, s), &dev)?;

        let h = self.decode(&tgt_in, &enc, &enc_batch.src_mask)?;
        let (p_vocab, attn, gate) = self.heads(&h, &enc, &enc_batch.src_mask)?;
        let pv = (p_vocab.gather(&gather, D::Minus1)? * in_vocab)?;
        let pc = (attn * copy_mask)?.sum_keepdim(D::Minus1)?;
        let p = ((&gate * pv)? + ((1.0 - &gate)? * pc)?)?;
        let nll = ((p + 1e-9)?.log()?.neg()?.squeeze(2)? * &weight)?;
        nll.sum_all()? / weight.sum_all()?.to_scalar::<f32>()? as f64
    }

    /// Greedy decoding; returns extended ids per example, without EOS.
    pub fn greedy(&self, srcs: &[&[u32]]) -> Result<Vec<Vec<u32>>> {
        let enc_batch = self.batch(srcs)?;
        let enc = self.encode(&enc_batch)?;
        let b = srcs.len();
        let mut out: Vec<Vec<u32>> = vec![Vec::new(); b];
        let mut done = vec![false; b];
        for step in 0..self.cfg.max_target_len {
            let mut tgt_in = Vec::with_capacity(b * (step + 1));
            for seq in &out {
                tgt_in.push(BOS);
                for j in 0..step {
                    let y = seq.get(j).copied().unwrap_or(PAD);
                    tgt_in.push(if (y as usize) < self.vocab_len {
                        y
                    } else {
                        UNK
                    });
                }
            }
            let tgt_in = Tensor::from_vec(tgt_in, (b, step + 1), &Device::Cpu)?;
            let h = self
                .decode(&tgt_in, &enc, &enc_batch.src_mask)?
                .narrow(1, step, 1)?;
            let (p_vocab, attn, gate) = self.heads(&h, &enc, &enc_batch.src_mask)?;
            let p_vocab = p_vocab.squeeze(1)?.to_dtype(DType::F32)?.to_vec2::<f32>()?;
            let attn = attn.squeeze(1)?.to_vec2::<f32>()?;
            let gate = gate.flatten_all()?.to_vec1::<f32>()?;
            for i in 0..b {
                if done[i] {
                    continue;
                }
                let mut extra: HashMap<u32, f32> = HashMap::new();
                let mut scores: Vec<f32> = p_vocab[i].iter().map(|p| p * gate[i]).collect();
                for (k, &x) in srcs[i].iter().enumerate() {
                    let c = (1.0 - gate[i]) * attn[i][k];
                    match scores.get_mut(x as usize) {
                        Some(v) => *v += c,
                        None => *extra.entry(x).or_default() += c,
                    }
                }
                let mut best = (EOS, f32::NEG_INFINITY);
                for (id, &sc) in scores.iter().enumerate() {
                    if sc > best.1 {
                        best = (id as u32, sc);
                    }
                }
                let mut extra: Vec<(u32, f32)> = extra.into_iter().collect();
                extra.sort_by_key(|(id, _)| *id);
                for (id, sc) in extra {
                    if sc > best.1 {
                        best = (id, sc);
                    }
                }
                if best.0 == EOS {
                    done[i] = true;
                } else {
                    out[i].push(best.0);
                }
            }
            if done.iter().all(|d| *d) {
                break;
            }
        }
        Ok(out)
    }
}
