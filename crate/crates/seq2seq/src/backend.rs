use std::collections::HashMap;
use std::fs;
use std::path::Path;

use candle_core::{Device, Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use lsap_core::backend::{Hyperparams, Seq2SeqBackend};
use lsap_core::formats::PretrainRecord;
use lsap_core::rng::rng_for;
use lsap_core::tokenizer::Tokenizer;
use lsap_core::{Error, Result};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::model::{
    encode_pair, encode_source, init_params, parameter_count, Encoded, Net, Params, TinyConfig,
};
use crate::tokenizer::CasedWordTokenizer;
use crate::vocab::{Vocab, BOS, PAD, UNK};

const GENERATE_BATCH: usize = 64;
const WEIGHTS_FILE: &str = "model.safetensors";
const META_FILE: &str = "model.json";

fn candle_err(e: candle_core::Error) -> Error {
    Error::backend(0, e)
}

/// A trained model: configuration, vocabulary, weights and the mean
/// training loss of every epoch run so far.
#[derive(Debug, Clone)]
pub struct TinyHandle {
    pub config: TinyConfig,
    pub vocab: Vocab,
    pub params: Params,
    pub epoch_losses: Vec<f32>,
}

impl TinyHandle {
    pub fn parameter_count(&self) -> usize {
        parameter_count(&self.params)
    }

    fn net(&self) -> Net<'_> {
        Net {
            params: &self.params,
            cfg: &self.config,
            vocab_len: self.vocab.len(),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Meta {
    config: TinyConfig,
    vocab: Vocab,
    epoch_losses: Vec<f32>,
}

/// Small pointer-generator transformer trained on the CPU.
#[derive(Debug, Clone, Default)]
pub struct TinySeq2Seq {
    pub config: TinyConfig,
    tokenizer: CasedWordTokenizer,
}

impl TinySeq2Seq {
    pub fn new(config: TinyConfig) -> Result<Self> {
        config.validate().map_err(Error::InvalidArgument)?;
        Ok(TinySeq2Seq {
            config,
            tokenizer: CasedWordTokenizer,
        })
    }

    fn fresh(&self, seed: u64) -> Result<TinyHandle> {
        let mut rng = rng_for(seed, "tiny-seq2seq-init");
        Ok(TinyHandle {
            config: self.config,
            vocab: Vocab::default(),
            params: init_params(&self.config, &mut rng).map_err(candle_err)?,
            epoch_losses: Vec::new(),
        })
    }

    fn train_inner(
        &self,
        init: Option<&TinyHandle>,
        records: &[PretrainRecord],
        hp: &Hyperparams,
    ) -> candle_core::Result<TinyHandle> {
        let mut handle = match init {
            Some(h) => h.clone(),
            None => self
                .fresh(hp.seed)
                .map_err(|e| candle_core::Error::Msg(e.to_string()))?,
        };
        let cfg = handle.config;
        let tokenized: Vec<(Vec<String>, Vec<String>)> = records
            .iter()
            .map(|r| {
                (
                    self.tokenizer.tokenize(&r.input),
                    self.tokenizer.tokenize(&r.target),
                )
            })
            .collect();
        for (src, tgt) in &tokenized {
            for t in src.iter().chain(tgt) {
                handle.vocab.add(t, cfg.vocab_capacity);
            }
        }
        let data: Vec<Encoded> = tokenized
            .iter()
            .map(|(s, t)| encode_pair(s, t, &handle.vocab, &cfg))
            .collect();

        let vars: Vec<(String, Var)> = handle
            .params
            .iter()
            .map(|(k, t)| Ok((k.clone(), Var::from_tensor(&t.copy()?)?)))
            .collect::<candle_core::Result<_>>()?;
        let live: Params = vars
            .iter()
            .map(|(k, v)| (k.clone(), v.as_tensor().clone()))
            .collect();
        let mut opt = AdamW::new(
            vars.iter().map(|(_, v)| v.clone()).collect(),
            ParamsAdamW {
                lr: hp.learning_rate,
                weight_decay: 0.0,
                ..Default::default()
            },
        )?;
        let net = Net {
            params: &live,
            cfg: &cfg,
            vocab_len: handle.vocab.len(),
        };
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut rng = rng_for(hp.seed, "tiny-seq2seq-order");
        for epoch in 0..hp.epochs {
            order.shuffle(&mut rng);
            let (mut total, mut batches) = (0f32, 0usize);
            for chunk in order.chunks(hp.batch_size) {
                let batch: Vec<&Encoded> = chunk.iter().map(|&i| &data[i]).collect();
                let loss = net.loss(&batch)?;
                opt.backward_step(&loss)?;
                total += loss.to_scalar::<f32>()?;
                batches += 1;
            }
            let mean = total / batches.max(1) as f32;
            log::debug!("epoch {} loss {mean:.4}", epoch + 1);
            handle.epoch_losses.push(mean);
        }
        handle.params = vars
            .into_iter()
            .map(|(k, v)| Ok((k, v.as_tensor().detach().copy()?)))
            .collect::<candle_core::Result<_>>()?;
        Ok(handle)
    }

    fn generate_inner(
        &self,
        handle: &TinyHandle,
        inputs: &[String],
    ) -> candle_core::Result<Vec<String>> {
        let net = handle.net();
        let mut out = Vec::with_capacity(inputs.len());
        for chunk in inputs.chunks(GENERATE_BATCH) {
            let encoded: Vec<(Vec<u32>, Vec<String>)> = chunk
                .iter()
                .map(|s| {
                    encode_source(
                        &self.tokenizer.tokenize(s),
                        &handle.vocab,
                        handle.config.max_positions,
                    )
                })
                .collect();
            let srcs: Vec<&[u32]> = encoded.iter().map(|(s, _)| s.as_slice()).collect();
            for (ids, (_, oov)) in net.greedy(&srcs)?.into_iter().zip(&encoded) {
                let tokens: Vec<String> = ids
                    .into_iter()
                    .filter(|&id| id != PAD && id != BOS && id != UNK)
                    .filter_map(|id| {
                        handle
                            .vocab
                            .token(id)
                            .map(str::to_string)
                            .or_else(|| oov.get(id as usize - handle.vocab.len()).cloned())
                    })
                    .collect();
                out.push(self.tokenizer.detokenize(&tokens));
            }
        }
        Ok(out)
    }
}

impl Seq2SeqBackend for TinySeq2Seq {
    type Handle = TinyHandle;

    fn train(
        &self,
        init: Option<&TinyHandle>,
        records: &[PretrainRecord],
        hp: &Hyperparams,
    ) -> Result<TinyHandle> {
        hp.validate()?;
        if records.is_empty() {
            return Err(Error::Empty("training records"));
        }
        self.train_inner(init, records, hp).map_err(candle_err)
    }

    fn generate(&self, handle: &TinyHandle, inputs: &[String]) -> Result<Vec<String>> {
        self.generate_inner(handle, inputs).map_err(candle_err)
    }

    fn tokenizer(&self) -> &dyn Tokenizer {
        &self.tokenizer
    }

    fn save(&self, handle: &TinyHandle, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)
            .map_err(|e| Error::backend(0, format!("{}: {e}", dir.display())))?;
        let tensors: HashMap<&str, Tensor> = handle
            .params
            .iter()
            .map(|(k, v)| (k.as_str(), v.clone()))
            .collect();
        candle_core::safetensors::save(&tensors, dir.join(WEIGHTS_FILE)).map_err(candle_err)?;
        let meta = Meta {
            config: handle.config,
            vocab: handle.vocab.clone(),
            epoch_losses: handle.epoch_losses.clone(),
        };
        let p = dir.join(META_FILE);
        fs::write(&p, serde_json::to_vec_pretty(&meta)?)
            .map_err(|e| Error::backend(0, format!("{}: {e}", p.display())))
    }

    fn load(&self, dir: &Path) -> Result<TinyHandle> {
        let p = dir.join(META_FILE);
        let bytes = fs::read(&p).map_err(|e| Error::backend(0, format!("{}: {e}", p.display())))?;
        let meta: Meta = serde_json::from_slice(&bytes)?;
        let params = candle_core::safetensors::load(dir.join(WEIGHTS_FILE), &Device::Cpu)
            .map_err(candle_err)?
            .into_iter()
            .collect();
        Ok(TinyHandle {
            config: meta.config,
            vocab: meta.vocab,
            params,
            epoch_losses: meta.epoch_losses,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use lsap_core::formats::RecordFormat;

    fn small() -> TinySeq2Seq {
        TinySeq2Seq::new(TinyConfig {
            d_model: 32,
            heads: 2,
            ff: 64,
            encoder_layers: 1,
            decoder_layers: 1,
            vocab_capacity: 256,
            max_positions: 32,
            max_target_len: 8,
        })
        .unwrap()
    }

    fn rec(i: &str, t: &str) -> PretrainRecord {
        PretrainRecord {
            input: i.into(),
            target: t.into(),
            format: RecordFormat::Finetune,
            source_id: "x".into(),
        }
    }

    fn hp(epochs: usize) -> Hyperparams {
        Hyperparams {
            learning_rate: 3e-3,
            batch_size: 2,
            epochs,
            seed: 5,
        }
    }

    #[test]
    fn rejects_bad_input() {
        assert!(TinySeq2Seq::new(TinyConfig {
            heads: 3,
            ..Default::default()
        })
        .is_err());
        assert!(small().train(None, &[], &hp(1)).is_err());
    }

    #[test]
    fn loss_decreases_and_training_is_reproducible() {
        let b = small();
        let recs = vec![
            rec("play some jazz", "Play music"),
            rec("book a table", "Book restaurant"),
        ];
        let h1 = b.train(None, &recs, &hp(30)).unwrap();
        let h2 = b.train(None, &recs, &hp(30)).unwrap();
        assert!(
            h1.epoch_losses.last().unwrap() < &(h1.epoch_losses[0] * 0.5),
            "{:?}",
            h1.epoch_losses
        );
        assert_eq!(h1.epoch_losses, h2.epoch_losses);
        let probe = vec![
            "play some jazz".to_string(),
            "book a table".into(),
            "unseen words here".into(),
        ];
        assert_eq!(
            b.generate(&h1, &probe).unwrap(),
            b.generate(&h2, &probe).unwrap()
        );
    }

    #[test]
    fn continued_training_keeps_the_base_intact() {
        let b = small();
        let base = b.train(None, &[rec("a b", "A")], &hp(2)).unwrap();
        let before = base.params["emb"].to_vec2::<f32>().unwrap();
        let tuned = b.train(Some(&base), &[rec("c d", "C")], &hp(2)).unwrap();
        assert_eq!(base.params["emb"].to_vec2::<f32>().unwrap(), before);
        assert!(tuned.vocab.len() > base.vocab.len());
        assert_eq!(tuned.epoch_losses.len(), 4);
    }

    #[test]
    fn save_and_load() {
        let b = small();
        let h = b
            .train(None, &[rec("a b", "A"), rec("c d", "C")], &hp(3))
            .unwrap();
        let dir = tempfile::tempdir().unwrap();
        b.save(&h, dir.path()).unwrap();
        let back = b.load(dir.path()).unwrap();
        assert_eq!(back.vocab, h.vocab);
        assert_eq!(back.config, h.config);
        let probe = vec!["a b".to_string(), "x y".into()];
        assert_eq!(
            b.generate(&back, &probe).unwrap(),
            b.generate(&h, &probe).unwrap()
        );
    }

    #[test]
    fn default_size_is_in_range() {
        let h = TinySeq2Seq::default().fresh(0).unwrap();
        let n = h.parameter_count();
        assert!((1_000_000..=5_000_000).contains(&n), "{n}");
    }
}
