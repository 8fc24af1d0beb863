//! The weight-shared transformer: one parameter set serving encoder and
//! decoder roles under a configurable sharing scheme.
//!
//! Sharing is realized through the `ParamStore` tying map. Logical parameter
//! names (what a use site asks for) resolve to physical tensor keys; tied
//! logical names resolve to the same key and therefore the same storage, so
//! gradients from every use site accumulate into one buffer.
//!
//! Tying layout:
//! - embedding sharing: encoder embed, decoder embed and the output
//!   projection are one `[V, d]` tensor (logits use its transpose, no bias);
//! - encoder-decoder sharing: both decoder attention sublayers tie to the
//!   layer's single attention set, decoder ffn to encoder ffn, and the three
//!   decoder layer norms to the encoder's two (the cross-attention norm
//!   shares the self-attention norm), so the decoder adds no layer
//!   parameters;
//! - layer sharing: every layer resolves to layer 0.

use std::collections::BTreeMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::data::Batch;
use crate::tensor::{Tensor, TensorError};

pub const LAYER_NORM_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SharingConfig {
    pub embedding_sharing: bool,
    pub encoder_decoder_sharing: bool,
    pub layer_sharing: bool,
}

impl SharingConfig {
    pub fn none() -> Self {
        Self::default()
    }

    /// The configuration used downstream: embeddings and encoder-decoder
    /// weights shared, layers kept separate.
    pub fn representor() -> Self {
        SharingConfig {
            embedding_sharing: true,
            encoder_decoder_sharing: true,
            layer_sharing: false,
        }
    }

    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.embedding_sharing {
            parts.push("ES");
        }
        if self.encoder_decoder_sharing {
            parts.push("EDS");
        }
        if self.layer_sharing {
            parts.push("LS");
        }
        if parts.is_empty() {
            "baseline".to_string()
        } else {
            parts.join("+")
        }
    }

    /// All eight flag combinations, baseline first.
    pub fn all_combinations() -> Vec<SharingConfig> {
        let mut out = Vec::with_capacity(8);
        for bits in 0..8u8 {
            out.push(SharingConfig {
                embedding_sharing: bits & 1 != 0,
                encoder_decoder_sharing: bits & 2 != 0,
                layer_sharing: bits & 4 != 0,
            });
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HyperParams {
    pub num_layers: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    /// Embedding rows, from the shared vocabulary.
    pub vocab_rows: usize,
    pub max_len: usize,
}

impl HyperParams {
    /// The large configuration: 6 layers, d=1024, 16 heads, 4096 ffn.
    pub fn big(vocab_rows: usize) -> Self {
        HyperParams {
            num_layers: 6,
            model_dim: 1024,
            num_heads: 16,
            ffn_dim: 4096,
            vocab_rows,
            max_len: 256,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.model_dim == 0
            || self.num_heads == 0
            || self.model_dim % self.num_heads != 0
        {
            return Err(ModelError::BadConfig(format!(
                "model_dim {} must be a positive multiple of num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        if self.num_layers == 0 || self.ffn_dim == 0 || self.vocab_rows == 0 || self.max_len == 0 {
            return Err(ModelError::BadConfig(
                "layers, ffn_dim, vocab_rows and max_len must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }
}

#[derive(Debug)]
pub enum ModelError {
    BadConfig(String),
    Tensor(TensorError),
    /// Sequence longer than the configured maximum.
    TooLong { len: usize, max_len: usize },
    /// Tied/untied gradient comparison failed for the named tensor.
    TieMismatch { tensor: String, max_abs_diff: f64 },
}

impl fmt::Display for ModelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelError::BadConfig(msg) => write!(f, "bad model config: {msg}"),
            ModelError::Tensor(e) => write!(f, "tensor error: {e}"),
            ModelError::TooLong { len, max_len } => {
                write!(f, "sequence of length {len} exceeds max_len {max_len}")
            }
            ModelError::TieMismatch { tensor, max_abs_diff } => write!(
                f,
                "tied gradient mismatch on {tensor}: max abs diff {max_abs_diff:e}"
            ),
        }
    }
}

impl std::error::Error for ModelError {}

impl From<TensorError> for ModelError {
    fn from(e: TensorError) -> Self {
        ModelError::Tensor(e)
    }
}

/// Registry of named parameter tensors plus the logical-to-physical tying
/// map. Iteration order is the BTreeMap order everywhere, which keeps
/// initialization and optimizer updates deterministic.
pub struct ParamStore {
    physical: BTreeMap<String, Tensor>,
    tying: BTreeMap<String, String>,
}

impl ParamStore {
    /// Bare store with identity tying; for optimizer tests.
    #[cfg(test)]
    pub(crate) fn from_parts_for_tests(physical: BTreeMap<String, Tensor>) -> ParamStore {
        let tying = physical.keys().map(|k| (k.clone(), k.clone())).collect();
        ParamStore { physical, tying }
    }

    /// Resolves a logical name to its (possibly shared) tensor handle.
    pub fn get(&self, logical: &str) -> &Tensor {
        let key = self
            .tying
            .get(logical)
            .unwrap_or_else(|| panic!("unknown logical parameter {logical}"));
        &self.physical[key]
    }

    pub fn physical_iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.physical.iter()
    }

    pub fn physical_names(&self) -> Vec<String> {
        self.physical.keys().cloned().collect()
    }

    pub fn physical_get(&self, key: &str) -> Option<&Tensor> {
        self.physical.get(key)
    }

    pub fn tying_map(&self) -> &BTreeMap<String, String> {
        &self.tying
    }

    /// Logical names resolving to the given physical key.
    pub fn use_sites(&self, physical: &str) -> Vec<String> {
        self.tying
            .iter()
            .filter(|(_, p)| p.as_str() == physical)
            .map(|(l, _)| l.clone())
            .collect()
    }

    pub fn total_scalars(&self) -> usize {
        self.physical.values().map(|t| t.numel()).sum()
    }

    pub fn zero_grad(&self) {
        for t in self.physical.values() {
            t.zero_grad();
        }
    }
}

/// Shape of one logical parameter, used when its physical tensor is first
/// allocated.
fn shape_of(logical: &str, hyper: &HyperParams) -> Vec<usize> {
    let d = hyper.model_dim;
    let f = hyper.ffn_dim;
    let v = hyper.vocab_rows;
    let leaf = logical.rsplit('.').next().unwrap();
    if logical.ends_with("embed") || logical == "output_proj" {
        return vec![v, d];
    }
    match leaf {
        "wq" | "wk" | "wv" | "wo" => vec![d, d],
        "bq" | "bk" | "bv" | "bo" => vec![d],
        "w1" => vec![d, f],
        "b1" => vec![f],
        "w2" => vec![f, d],
        "b2" => vec![d],
        "gain" | "bias" => vec![d],
        other => panic!("unknown parameter leaf {other}"),
    }
}

const ATTN_PARTS: [&str; 8] = ["wq", "wk", "wv", "wo", "bq", "bk", "bv", "bo"];
const FFN_PARTS: [&str; 4] = ["w1", "b1", "w2", "b2"];
const LN_PARTS: [&str; 2] = ["gain", "bias"];

/// Enumerates every (logical, physical) parameter name pair for a config.
/// The physical name is where the sharing scheme lives.
fn tying_pairs(config: &SharingConfig, hyper: &HyperParams) -> Vec<(String, String)> {
    let mut pairs = Vec::new();
    let embed_phys = |role: &str| -> String {
        if config.embedding_sharing {
            "embed".to_string()
        } else {
            role.to_string()
        }
    };
    pairs.push(("encoder.embed".to_string(), embed_phys("encoder.embed")));
    pairs.push(("decoder.embed".to_string(), embed_phys("decoder.embed")));
    pairs.push(("output_proj".to_string(), embed_phys("output_proj")));

    for layer in 0..hyper.num_layers {
        let phys_layer = if config.layer_sharing { 0 } else { layer };
        for part in ATTN_PARTS {
            pairs.push((
                format!("enc.{layer}.attn.{part}"),
                format!("enc.{phys_layer}.attn.{part}"),
            ));
        }
        for part in FFN_PARTS {
            pairs.push((
                format!("enc.{layer}.ffn.{part}"),
                format!("enc.{phys_layer}.ffn.{part}"),
            ));
        }
        for (ln, part) in ["ln1", "ln2"].iter().flat_map(|l| LN_PARTS.map(|p| (*l, p))) {
            pairs.push((
                format!("enc.{layer}.{ln}.{part}"),
                format!("enc.{phys_layer}.{ln}.{part}"),
            ));
        }

        let eds = config.encoder_decoder_sharing;
        for part in ATTN_PARTS {
            let self_phys = if eds {
                format!("enc.{phys_layer}.attn.{part}")
            } else {
                format!("dec.{phys_layer}.self_attn.{part}")
            };
            pairs.push((format!("dec.{layer}.self_attn.{part}"), self_phys));
            let cross_phys = if eds {
                format!("enc.{phys_layer}.attn.{part}")
            } else {
                format!("dec.{phys_layer}.cross_attn.{part}")
            };
            pairs.push((format!("dec.{layer}.cross_attn.{part}"), cross_phys));
        }
        for part in FFN_PARTS {
            let phys = if eds {
                format!("enc.{phys_layer}.ffn.{part}")
            } else {
                format!("dec.{phys_layer}.ffn.{part}")
            };
            pairs.push((format!("dec.{layer}.ffn.{part}"), phys));
        }
        // Decoder norms: self-attn and ffn norms tie to the encoder's two;
        // the cross-attn norm shares the self-attn norm.
        for part in LN_PARTS {
            let ln1 = if eds {
                format!("enc.{phys_layer}.ln1.{part}")
            } else {
                format!("dec.{phys_layer}.ln1.{part}")
            };
            pairs.push((format!("dec.{layer}.ln1.{part}"), ln1.clone()));
            let ln2 = if eds {
                ln1
            } else {
                format!("dec.{phys_layer}.ln2.{part}")
            };
            pairs.push((format!("dec.{layer}.ln2.{part}"), ln2));
            let ln3 = if eds {
                format!("enc.{phys_layer}.ln2.{part}")
            } else {
                format!("dec.{phys_layer}.ln3.{part}")
            };
            pairs.push((format!("dec.{layer}.ln3.{part}"), ln3));
        }
    }
    pairs
}

/// Allocates and initializes the physical tensors for a sharing scheme.
/// Matrices draw from U(-1/sqrt(d), 1/sqrt(d)), biases start at zero, norm
/// gains at one; the `<pad>` embedding row starts all-zero.
pub fn init_params(
    config: &SharingConfig,
    hyper: &HyperParams,
    seed: u64,
) -> Result<ParamStore, ModelError> {
    hyper.validate()?;
    let pairs = tying_pairs(config, hyper);
    let mut tying = BTreeMap::new();
    let mut phys_order: Vec<(String, String)> = Vec::new();
    for (logical, physical) in pairs {
        if !tying.values().any(|p| *p == physical) {
            phys_order.push((physical.clone(), logical.clone()));
        }
        tying.insert(logical, physical);
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let bound = 1.0 / (hyper.model_dim as f64).sqrt();
    let mut physical = BTreeMap::new();
    // Creation order follows first logical mention, so layer 0 weights are
    // identical whether or not later layers share them.
    for (phys, logical) in phys_order {
        let shape = shape_of(&logical, hyper);
        let leaf = phys.rsplit('.').next().unwrap();
        let values = match leaf {
            "gain" => vec![1.0; shape.iter().product()],
            "bq" | "bk" | "bv" | "bo" | "b1" | "b2" | "bias" => {
                vec![0.0; shape.iter().product()]
            }
            _ => {
                let n: usize = shape.iter().product();
                let mut vals: Vec<f64> =
                    (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
                if shape == [hyper.vocab_rows, hyper.model_dim] {
                    // Pad row zeroed: mixed decoding bootstraps from it.
                    for v in vals[..hyper.model_dim].iter_mut() {
                        *v = 0.0;
                    }
                }
                vals
            }
        };
        physical.insert(phys, Tensor::param(values, &shape)?);
    }
    Ok(ParamStore { physical, tying })
}

/// Parameter-free sinusoidal position signal, identical for encoder and
/// decoder roles.
pub fn positional_encoding(len: usize, d: usize) -> Tensor {
    let mut vals = vec![0.0; len * d];
    for pos in 0..len {
        for i in (0..d).step_by(2) {
            let freq = 1.0 / 10000f64.powf(i as f64 / d as f64);
            vals[pos * d + i] = (pos as f64 * freq).sin();
            if i + 1 < d {
                vals[pos * d + i + 1] = (pos as f64 * freq).cos();
            }
        }
    }
    Tensor::new(vals, &[len, d]).expect("positional encoding shape")
}

/// What feeds decoder position 0: the trained `<bos>` embedding (training
/// and fixed-direction decoding) or a literal all-zero vector (mixed
/// decoding, which lets the model pick the order label itself).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecoderBootstrap {
    Bos,
    ZeroPad,
}

/// Optional train-time dropout. Decoding and evaluation run without it.
pub struct DropoutCtx<'a> {
    pub rate: f64,
    pub rng: &'a mut ChaCha12Rng,
}

/// One weight-shared model: hyperparameters, sharing scheme and the store.
pub struct Representor {
    pub sharing: SharingConfig,
    pub hyper: HyperParams,
    pub store: ParamStore,
}

impl Representor {
    pub fn init(sharing: SharingConfig, hyper: HyperParams, seed: u64) -> Result<Self, ModelError> {
        let store = init_params(&sharing, &hyper, seed)?;
        Ok(Representor { sharing, hyper, store })
    }

    /// Rebuilds the same architecture with every sharing flag off, copying
    /// each logical site's current values. Forward passes are bit-identical
    /// to the tied model; gradients split per use site.
    pub fn untied_clone(&self) -> Result<Representor, ModelError> {
        let untied = SharingConfig::none();
        let store = init_params(&untied, &self.hyper, 0)?;
        let logicals: Vec<String> = store.tying.keys().cloned().collect();
        for logical in logicals {
            let src = self.store.get(&logical).value_vec();
            store.physical[&store.tying[&logical]].set_values(&src);
        }
        Ok(Representor { sharing: untied, hyper: self.hyper, store })
    }

    fn check_ids(&self, ids: &[usize]) -> Result<(), ModelError> {
        for &id in ids {
            if id >= self.hyper.vocab_rows {
                return Err(ModelError::Tensor(TensorError::IndexOutOfRange {
                    index: id,
                    bound: self.hyper.vocab_rows,
                }));
            }
        }
        Ok(())
    }

    fn embed(
        &self,
        role: &str,
        ids: &[usize],
        rows: usize,
        len: usize,
        zero_first_position: bool,
        dropout: &mut Option<DropoutCtx>,
    ) -> Result<Tensor, ModelError> {
        if len > self.hyper.max_len {
            return Err(ModelError::TooLong { len, max_len: self.hyper.max_len });
        }
        let d = self.hyper.model_dim;
        let table = self.store.get(role);
        let mut x = Tensor::embedding_lookup(table, ids)?.scale((d as f64).sqrt());
        if zero_first_position {
            // Mixed decoding: position 0 embeds as literal zeros before the
            // position signal is added.
            let keep: Vec<bool> = (0..rows * len * d).map(|i| (i / d) % len != 0).collect();
            x = x.masked_fill(&keep, 0.0)?;
        }
        let pe = positional_encoding(len, d);
        let mut x = x
            .reshape(&[rows, len, d])?
            .add(&pe.reshape(&[len, d])?)?;
        if let Some(ctx) = dropout {
            x = x.dropout(ctx.rate, ctx.rng);
        }
        Ok(x)
    }

    /// Multi-head attention over `memory` driven by `x`, with `keep` masking
    /// the [B, H, Tq, Tk] score grid.
    #[allow(clippy::too_many_arguments)]
    fn attention(
        &self,
        prefix: &str,
        x: &Tensor,
        memory: &Tensor,
        keep: &[bool],
        b: usize,
        tq: usize,
        tk: usize,
    ) -> Result<Tensor, ModelError> {
        let d = self.hyper.model_dim;
        let h = self.hyper.num_heads;
        let dh = self.hyper.head_dim();
        let p = |part: &str| self.store.get(&format!("{prefix}.{part}"));

        let q = x.matmul(p("wq"))?.add(p("bq"))?;
        let k = memory.matmul(p("wk"))?.add(p("bk"))?;
        let v = memory.matmul(p("wv"))?.add(p("bv"))?;

        // [B, T, d] -> [B, H, T, dh]
        let split = |t: &Tensor, len: usize| -> Result<Tensor, TensorError> {
            t.reshape(&[b, len, h, dh])?.transpose(1, 2)
        };
        let q = split(&q, tq)?;
        let k = split(&k, tk)?;
        let v = split(&v, tk)?;

        let scores = q
            .matmul(&k.transpose(2, 3)?)?
            .scale(1.0 / (dh as f64).sqrt());
        let scores = scores.masked_fill(keep, f64::NEG_INFINITY)?;
        let weights = scores.softmax(3)?;
        let ctx = weights.matmul(&v)?; // [B, H, Tq, dh]
        let merged = ctx.transpose(1, 2)?.reshape(&[b, tq, d])?;
        Ok(merged.matmul(p("wo"))?.add(p("bo"))?)
    }

    fn ffn(&self, prefix: &str, x: &Tensor) -> Result<Tensor, ModelError> {
        let p = |part: &str| self.store.get(&format!("{prefix}.{part}"));
        let hidden = x.matmul(p("w1"))?.add(p("b1"))?.relu();
        Ok(hidden.matmul(p("w2"))?.add(p("b2"))?)
    }

    fn norm(&self, prefix: &str, x: &Tensor) -> Result<Tensor, ModelError> {
        let gain = self.store.get(&format!("{prefix}.gain"));
        let bias = self.store.get(&format!("{prefix}.bias"));
        Ok(x.layer_norm(gain, bias, LAYER_NORM_EPS)?)
    }

    fn residual(
        &self,
        x: &Tensor,
        sub: Tensor,
        dropout: &mut Option<DropoutCtx>,
    ) -> Result<Tensor, ModelError> {
        let sub = match dropout {
            Some(ctx) => sub.dropout(ctx.rate, ctx.rng),
            None => sub,
        };
        Ok(x.add(&sub)?)
    }

    /// Encoder stack over labeled source ids; returns `z` of shape [B, S, d].
    pub fn encode(
        &self,
        enc_ids: &[usize],
        src_mask: &[bool],
        b: usize,
        s: usize,
        dropout: &mut Option<DropoutCtx>,
    ) -> Result<Tensor, ModelError> {
        self.check_ids(enc_ids)?;
        let mut x = self.embed("encoder.embed", enc_ids, b, s, false, dropout)?;
        let keep = attention_keep(src_mask, b, self.hyper.num_heads, s, s, false);
        for layer in 0..self.hyper.num_layers {
            let attn = self.attention(&format!("enc.{layer}.attn"), &x, &x, &keep, b, s, s)?;
            x = self.norm(&format!("enc.{layer}.ln1"), &self.residual(&x, attn, dropout)?)?;
            let ffn = self.ffn(&format!("enc.{layer}.ffn"), &x)?;
            x = self.norm(&format!("enc.{layer}.ln2"), &self.residual(&x, ffn, dropout)?)?;
        }
        Ok(x)
    }

    /// Decoder stack over a (teacher-forced or partial) prefix, attending to
    /// `z`; returns logits of shape [B, T, V].
    #[allow(clippy::too_many_arguments)]
    pub fn decode_prefix(
        &self,
        z: &Tensor,
        src_mask: &[bool],
        dec_input_ids: &[usize],
        b: usize,
        t: usize,
        bootstrap: DecoderBootstrap,
        dropout: &mut Option<DropoutCtx>,
    ) -> Result<Tensor, ModelError> {
        self.check_ids(dec_input_ids)?;
        let s = z.shape()[1];
        let zero_first = bootstrap == DecoderBootstrap::ZeroPad;
        let mut x = self.embed("decoder.embed", dec_input_ids, b, t, zero_first, dropout)?;
        let h = self.hyper.num_heads;
        let causal = causal_keep(b, h, t);
        let cross = attention_keep(src_mask, b, h, t, s, false);
        for layer in 0..self.hyper.num_layers {
            let sa =
                self.attention(&format!("dec.{layer}.self_attn"), &x, &x, &causal, b, t, t)?;
            x = self.norm(&format!("dec.{layer}.ln1"), &self.residual(&x, sa, dropout)?)?;
            let ca =
                self.attention(&format!("dec.{layer}.cross_attn"), &x, z, &cross, b, t, s)?;
            x = self.norm(&format!("dec.{layer}.ln2"), &self.residual(&x, ca, dropout)?)?;
            let ffn = self.ffn(&format!("dec.{layer}.ffn"), &x)?;
            x = self.norm(&format!("dec.{layer}.ln3"), &self.residual(&x, ffn, dropout)?)?;
        }
        // Output projection through the transposed embedding-shaped matrix.
        let proj = self.store.get("output_proj").transpose(0, 1)?;
        Ok(x.matmul(&proj)?)
    }

    /// Teacher-forced forward over a batch: logits [B, T, V].
    pub fn forward_train(
        &self,
        batch: &Batch,
        dropout: &mut Option<DropoutCtx>,
    ) -> Result<Tensor, ModelError> {
        let z = self.encode(
            &batch.encoder_ids,
            &batch.source_mask,
            batch.size,
            batch.src_len,
            dropout,
        )?;
        self.decode_prefix(
            &z,
            &batch.source_mask,
            &batch.decoder_input_ids,
            batch.size,
            batch.tgt_len,
            DecoderBootstrap::Bos,
            dropout,
        )
    }

    /// Logits for the last position of each prefix row: [B, V]. Equal to the
    /// teacher-forced logits at that position given the same prefix.
    #[allow(clippy::too_many_arguments)]
    pub fn decode_step(
        &self,
        z: &Tensor,
        src_mask: &[bool],
        prefix_ids: &[usize],
        b: usize,
        t: usize,
        bootstrap: DecoderBootstrap,
    ) -> Result<Vec<Vec<f64>>, ModelError> {
        let logits = self.decode_prefix(z, src_mask, prefix_ids, b, t, bootstrap, &mut None)?;
        let v = self.hyper.vocab_rows;
        let vals = logits.values();
        let mut out = Vec::with_capacity(b);
        for row in 0..b {
            let base = (row * t + (t - 1)) * v;
            out.push(vals[base..base + v].to_vec());
        }
        Ok(out)
    }

    /// Verifies that each physical tensor's gradient equals the sum of the
    /// per-use-site gradients from an untied weight-copied clone, after
    /// running the same forward and backward on both.
    pub fn tied_gradient_accumulation_check(
        &self,
        batch: &Batch,
        tolerance: f64,
    ) -> Result<TieCheckReport, ModelError> {
        self.store.zero_grad();
        run_probe_loss(self, batch)?;

        let clone = self.untied_clone()?;
        clone.store.zero_grad();
        run_probe_loss(&clone, batch)?;

        let mut entries = Vec::new();
        for (phys, tensor) in self.store.physical_iter() {
            let tied_grad = tensor.grad().unwrap_or_else(|| vec![0.0; tensor.numel()]);
            let sites = self.store.use_sites(phys);
            let mut summed = vec![0.0; tensor.numel()];
            for site in &sites {
                let site_grad = clone
                    .store
                    .get(site)
                    .grad()
                    .unwrap_or_else(|| vec![0.0; tensor.numel()]);
                for (s, g) in summed.iter_mut().zip(&site_grad) {
                    *s += g;
                }
            }
            let max_abs_diff = tied_grad
                .iter()
                .zip(&summed)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            if max_abs_diff > tolerance {
                return Err(ModelError::TieMismatch {
                    tensor: phys.clone(),
                    max_abs_diff,
                });
            }
            entries.push(TieCheckEntry {
                physical: phys.clone(),
                use_sites: sites.len(),
                max_abs_diff,
            });
        }
        Ok(TieCheckReport { entries })
    }
}

/// Mean negative log-likelihood over unmasked positions; enough signal to
/// exercise every parameter for the tying check.
fn run_probe_loss(model: &Representor, batch: &Batch) -> Result<(), ModelError> {
    let logits = model.forward_train(batch, &mut None)?;
    let v = model.hyper.vocab_rows;
    let n = batch.size * batch.tgt_len;
    let logp = logits.reshape(&[n, v])?.log_softmax(1)?;
    let picked = logp.pick(&batch.decoder_target_ids)?;
    let mask: Vec<f64> = batch
        .target_mask
        .iter()
        .map(|&m| if m { 1.0 } else { 0.0 })
        .collect();
    let count: f64 = mask.iter().sum();
    let mask_t = Tensor::new(mask, &[n])?;
    let loss = picked.mul(&mask_t)?.sum().scale(-1.0 / count);
    loss.backward()?;
    Ok(())
}

#[derive(Debug)]
pub struct TieCheckEntry {
    pub physical: String,
    pub use_sites: usize,
    pub max_abs_diff: f64,
}

#[derive(Debug)]
pub struct TieCheckReport {
    pub entries: Vec<TieCheckEntry>,
}

impl TieCheckReport {
    pub fn max_diff(&self) -> f64 {
        self.entries.iter().map(|e| e.max_abs_diff).fold(0.0, f64::max)
    }
}

/// Keep mask for a [B, H, Tq, Tk] score grid from a per-position key mask,
/// optionally intersected with the causal triangle.
pub fn attention_keep(
    key_mask: &[bool],
    b: usize,
    h: usize,
    tq: usize,
    tk: usize,
    causal: bool,
) -> Vec<bool> {
    let mut keep = vec![false; b * h * tq * tk];
    for bi in 0..b {
        for hi in 0..h {
            for q in 0..tq {
                for k in 0..tk {
                    let ok = key_mask[bi * tk + k] && (!causal || k <= q);
                    keep[((bi * h + hi) * tq + q) * tk + k] = ok;
                }
            }
        }
    }
    keep
}

/// Pure causal triangle (every key position valid otherwise).
pub fn causal_keep(b: usize, h: usize, t: usize) -> Vec<bool> {
    let mut keep = vec![false; b * h * t * t];
    for bi in 0..b {
        for hi in 0..h {
            for q in 0..t {
                for k in 0..=q {
                    keep[((bi * h + hi) * t + q) * t + k] = true;
                }
            }
        }
    }
    keep
}
