//! Toy diffusion transformer with the three cacheable sublayer kinds and a
//! policy hook at every pre-residual branch output.
//!
//! The cached unit is the full modulated, gated branch output `h`: each block
//! runs `x <- x + h` where `h = gate * Sublayer(scale * layer_norm(x) + shift)`
//! and (shift, scale, gate) come from the timestep embedding through a
//! per-block linear map. A policy can inject a previously stored `h` in place
//! of evaluating the sublayer, which is exactly the residual-connection
//! substitution the cache relies on.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{
    add, gelu, layer_norm, load_sctd, matmul, matmul_nt, save_sctd, softmax, NumericsError,
    SeededRng, Tensor,
};

pub const LAYER_NORM_EPS: f32 = 1e-5;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("cache-shape error: injected branch output has shape {got:?}, expected {expected:?}")]
    CacheShape {
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("policy fault: {0}")]
    Policy(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("weight manifest: {0}")]
    Manifest(String),
}

/// The three cacheable sublayer kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum LayerKind {
    #[serde(rename = "self_attn")]
    SelfAttention,
    #[serde(rename = "cross_attn")]
    CrossAttention,
    #[serde(rename = "ffn")]
    FeedForward,
}

impl LayerKind {
    pub const ALL: [LayerKind; 3] = [
        LayerKind::SelfAttention,
        LayerKind::CrossAttention,
        LayerKind::FeedForward,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LayerKind::SelfAttention => "self_attn",
            LayerKind::CrossAttention => "cross_attn",
            LayerKind::FeedForward => "ffn",
        }
    }

    pub fn from_str_name(s: &str) -> Option<Self> {
        match s {
            "self_attn" => Some(LayerKind::SelfAttention),
            "cross_attn" => Some(LayerKind::CrossAttention),
            "ffn" => Some(LayerKind::FeedForward),
            _ => None,
        }
    }
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Identity of one cacheable sublayer: (kind, block index).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LayerKey {
    pub kind: LayerKind,
    pub block: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub blocks: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub tokens: usize,
    /// 0 disables cross-attention.
    pub context_tokens: usize,
    pub ffn_mult: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            blocks: 4,
            model_dim: 64,
            heads: 4,
            tokens: 16,
            context_tokens: 8,
            ffn_mult: 4,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.blocks == 0 || self.model_dim == 0 || self.heads == 0 || self.tokens == 0 {
            return Err(ModelError::Config(
                "blocks, model_dim, heads and tokens must be positive".into(),
            ));
        }
        if self.ffn_mult == 0 {
            return Err(ModelError::Config("ffn_mult must be positive".into()));
        }
        if self.model_dim % self.heads != 0 {
            return Err(ModelError::Config(format!(
                "heads ({}) must divide model_dim ({})",
                self.heads, self.model_dim
            )));
        }
        if self.model_dim % 2 != 0 {
            return Err(ModelError::Config(
                "model_dim must be even for the sinusoidal timestep embedding".into(),
            ));
        }
        Ok(())
    }

    pub fn has_cross_attention(&self) -> bool {
        self.context_tokens > 0
    }

    /// Kinds present in this model, in execution order within a block.
    pub fn kinds(&self) -> Vec<LayerKind> {
        if self.has_cross_attention() {
            vec![
                LayerKind::SelfAttention,
                LayerKind::CrossAttention,
                LayerKind::FeedForward,
            ]
        } else {
            vec![LayerKind::SelfAttention, LayerKind::FeedForward]
        }
    }

    pub fn sublayers_per_block(&self) -> usize {
        self.kinds().len()
    }
}

/// One branch output as seen by a policy: the full gated `h` for a sublayer.
#[derive(Debug, Clone)]
pub struct BranchOutput {
    pub key: LayerKey,
    pub step: usize,
    pub value: Tensor,
}

pub enum BranchAction {
    Compute,
    Inject(Tensor),
}

/// Decides, per sublayer and execution step, whether the branch output is
/// computed or injected from a cache. Every computed output is reported back
/// through `observe`.
pub trait BranchPolicy {
    fn action(&mut self, key: LayerKey, step: usize) -> Result<BranchAction, ModelError>;

    fn observe(&mut self, _out: &BranchOutput) {}
}

/// Policy that always computes.
pub struct AlwaysCompute;

impl BranchPolicy for AlwaysCompute {
    fn action(&mut self, _key: LayerKey, _step: usize) -> Result<BranchAction, ModelError> {
        Ok(BranchAction::Compute)
    }
}

struct CrossWeights {
    w_q: Tensor,
    w_kv: Tensor,
    w_out: Tensor,
}

struct BlockWeights {
    // maps timestep embedding to (shift, scale, gate) per sublayer
    w_mod: Tensor,
    w_qkv: Tensor,
    w_attn_out: Tensor,
    cross: Option<CrossWeights>,
    w_up: Tensor,
    w_down: Tensor,
}

pub struct Model {
    cfg: ModelConfig,
    w_time1: Tensor,
    w_time2: Tensor,
    blocks: Vec<BlockWeights>,
    w_head: Tensor,
    /// Fixed null-prompt embedding used when no context is supplied; a
    /// stand-in for the learned null embedding of guidance-trained models.
    /// Zeros would silence cross-attention entirely (K = V = 0).
    null_context: Option<Tensor>,
}

pub struct ForwardOutput {
    pub eps: Tensor,
    pub visited: Vec<BranchOutput>,
    /// Multiply-accumulate count of every matmul actually executed.
    pub macs: u64,
}

fn init_matrix(rng: &mut SeededRng, rows: usize, cols: usize, dim: usize) -> Tensor {
    let scale = 1.0 / (dim as f32).sqrt();
    let data = (0..rows * cols).map(|_| rng.normal() * scale).collect();
    Tensor::new(vec![rows, cols], data).expect("finite init")
}

pub fn build_model(cfg: ModelConfig) -> Result<Model, ModelError> {
    cfg.validate()?;
    let d = cfg.model_dim;
    let mut rng = SeededRng::new(cfg.seed);
    let w_time1 = init_matrix(&mut rng, d, d, d);
    let w_time2 = init_matrix(&mut rng, d, d, d);
    let sublayers = cfg.sublayers_per_block();
    let mut blocks = Vec::with_capacity(cfg.blocks);
    for _ in 0..cfg.blocks {
        let w_mod = init_matrix(&mut rng, d, 3 * sublayers * d, d);
        let w_qkv = init_matrix(&mut rng, d, 3 * d, d);
        let w_attn_out = init_matrix(&mut rng, d, d, d);
        let cross = if cfg.has_cross_attention() {
            Some(CrossWeights {
                w_q: init_matrix(&mut rng, d, d, d),
                w_kv: init_matrix(&mut rng, d, 2 * d, d),
                w_out: init_matrix(&mut rng, d, d, d),
            })
        } else {
            None
        };
        let w_up = init_matrix(&mut rng, d, cfg.ffn_mult * d, d);
        let w_down = init_matrix(&mut rng, cfg.ffn_mult * d, d, d);
        blocks.push(BlockWeights {
            w_mod,
            w_qkv,
            w_attn_out,
            cross,
            w_up,
            w_down,
        });
    }
    let w_head = init_matrix(&mut rng, d, d, d);
    let null_context = if cfg.has_cross_attention() {
        Some(rng.normal_tensor(vec![cfg.context_tokens, d]))
    } else {
        None
    };
    Ok(Model {
        cfg,
        w_time1,
        w_time2,
        blocks,
        w_head,
        null_context,
    })
}

/// Sinusoidal embedding of a timestep value, dimension `dim` (even).
pub fn timestep_embedding(t: f32, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = vec![0.0f32; dim];
    for i in 0..half {
        let freq = (-(10_000.0f32).ln() * i as f32 / half as f32).exp();
        data[i] = (t * freq).sin();
        data[half + i] = (t * freq).cos();
    }
    Tensor::new(vec![1, dim], data).expect("finite embedding")
}

fn count_matmul(macs: &mut u64, m: usize, k: usize, n: usize) {
    *macs += (m * k * n) as u64;
}

/// Extract batch item `b` of a [B, L, d] tensor as [L, d].
fn batch_item(x: &Tensor, b: usize, rows: usize, cols: usize) -> Tensor {
    let start = b * rows * cols;
    Tensor::new(
        vec![rows, cols],
        x.data()[start..start + rows * cols].to_vec(),
    )
    .expect("finite slice")
}

impl Model {
    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn null_context(&self) -> Option<&Tensor> {
        self.null_context.as_ref()
    }

    /// All cacheable sublayer keys in execution order.
    pub fn layer_keys(&self) -> Vec<LayerKey> {
        let mut keys = Vec::new();
        for block in 0..self.cfg.blocks {
            for kind in self.cfg.kinds() {
                keys.push(LayerKey { kind, block });
            }
        }
        keys
    }

    /// One denoiser evaluation.
    ///
    /// `x` is [L, d] or batched [B, L, d]; `context` is [Lc, d] or [B, Lc, d]
    /// (a 2-D context is shared across batch rows). When the model has
    /// cross-attention and `context` is absent, a zero context (null prompt)
    /// is used. The returned `eps` has the shape of `x`.
    pub fn forward(
        &self,
        x: &Tensor,
        t: f32,
        step: usize,
        context: Option<&Tensor>,
        policy: &mut dyn BranchPolicy,
    ) -> Result<ForwardOutput, ModelError> {
        let d = self.cfg.model_dim;
        let l = self.cfg.tokens;
        let input_rank = x.rank();
        let (batch, x3) = match x.shape() {
            [rows, cols] if *rows == l && *cols == d => (1usize, x.clone().reshape(vec![1, l, d])?),
            [b, rows, cols] if *rows == l && *cols == d => (*b, x.clone()),
            other => {
                return Err(ModelError::Config(format!(
                    "forward input shape {other:?} does not match tokens={l}, dim={d}"
                )))
            }
        };

        let context3 = if self.cfg.has_cross_attention() {
            let lc = self.cfg.context_tokens;
            let null = self.null_context.as_ref().expect("cross implies null ctx");
            let ctx = match context {
                None => {
                    let mut data = Vec::with_capacity(batch * lc * d);
                    for _ in 0..batch {
                        data.extend_from_slice(null.data());
                    }
                    Tensor::new(vec![batch, lc, d], data)?
                }
                Some(c) => match c.shape() {
                    [rows, cols] if *rows == lc && *cols == d => {
                        let mut data = Vec::with_capacity(batch * lc * d);
                        for _ in 0..batch {
                            data.extend_from_slice(c.data());
                        }
                        Tensor::new(vec![batch, lc, d], data)?
                    }
                    [b, rows, cols] if *b == batch && *rows == lc && *cols == d => c.clone(),
                    other => {
                        return Err(ModelError::Config(format!(
                            "context shape {other:?} does not match batch={batch}, \
                             context_tokens={lc}, dim={d}"
                        )))
                    }
                },
            };
            Some(ctx)
        } else {
            None
        };

        let mut macs = 0u64;
        let mut visited = Vec::new();

        // shared timestep conditioning: one evaluation per forward
        let emb = timestep_embedding(t, d);
        let e1 = gelu(&matmul(&emb, &self.w_time1)?);
        count_matmul(&mut macs, 1, d, d);
        let temb = matmul(&e1, &self.w_time2)?;
        count_matmul(&mut macs, 1, d, d);

        let kinds = self.cfg.kinds();
        let mut x3 = x3;
        for (block_idx, bw) in self.blocks.iter().enumerate() {
            let modv = matmul(&temb, &bw.w_mod)?;
            count_matmul(&mut macs, 1, d, 3 * kinds.len() * d);
            for (si, &kind) in kinds.iter().enumerate() {
                let key = LayerKey {
                    kind,
                    block: block_idx,
                };
                let base = si * 3 * d;
                let shift = &modv.data()[base..base + d];
                let scale = &modv.data()[base + d..base + 2 * d];
                let gate = &modv.data()[base + 2 * d..base + 3 * d];

                let h = match policy.action(key, step)? {
                    BranchAction::Inject(h) => {
                        if h.shape() != x3.shape() {
                            return Err(ModelError::CacheShape {
                                expected: x3.shape().to_vec(),
                                got: h.shape().to_vec(),
                            });
                        }
                        h
                    }
                    BranchAction::Compute => {
                        let normed = layer_norm(&x3, LAYER_NORM_EPS)?;
                        let mut modded = normed.data().to_vec();
                        for row in modded.chunks_mut(d) {
                            for (i, v) in row.iter_mut().enumerate() {
                                *v = scale[i] * *v + shift[i];
                            }
                        }
                        let modded = Tensor::new(x3.shape().to_vec(), modded)?;

                        let mut h_data = Vec::with_capacity(batch * l * d);
                        for b in 0..batch {
                            let xb = batch_item(&modded, b, l, d);
                            let hb = match kind {
                                LayerKind::SelfAttention => {
                                    self.self_attention(&xb, bw, &mut macs)?
                                }
                                LayerKind::CrossAttention => {
                                    let ctx = context3.as_ref().expect("cross implies context");
                                    let cb =
                                        batch_item(ctx, b, self.cfg.context_tokens, d);
                                    self.cross_attention(&xb, &cb, bw, &mut macs)?
                                }
                                LayerKind::FeedForward => self.feed_forward(&xb, bw, &mut macs)?,
                            };
                            h_data.extend_from_slice(hb.data());
                        }
                        for row in h_data.chunks_mut(d) {
                            for (i, v) in row.iter_mut().enumerate() {
                                *v *= gate[i];
                            }
                        }
                        let h = Tensor::new(vec![batch, l, d], h_data)?;
                        let out = BranchOutput {
                            key,
                            step,
                            value: h.clone(),
                        };
                        policy.observe(&out);
                        visited.push(out);
                        h
                    }
                };
                x3 = add(&x3, &h)?;
            }
        }

        // output head, per batch item
        let mut eps_data = Vec::with_capacity(batch * l * d);
        for b in 0..batch {
            let xb = batch_item(&x3, b, l, d);
            let eb = matmul(&xb, &self.w_head)?;
            count_matmul(&mut macs, l, d, d);
            eps_data.extend_from_slice(eb.data());
        }
        let eps_shape = if input_rank == 2 {
            vec![l, d]
        } else {
            vec![batch, l, d]
        };
        let eps = Tensor::new(eps_shape, eps_data)?;
        Ok(ForwardOutput { eps, visited, macs })
    }

    fn self_attention(
        &self,
        x: &Tensor,
        bw: &BlockWeights,
        macs: &mut u64,
    ) -> Result<Tensor, ModelError> {
        let d = self.cfg.model_dim;
        let l = self.cfg.tokens;
        let qkv = matmul(x, &bw.w_qkv)?;
        count_matmul(macs, l, d, 3 * d);
        let attn = self.multi_head(&qkv, l, 0, &qkv, l, d, macs)?;
        let out = matmul(&attn, &bw.w_attn_out)?;
        count_matmul(macs, l, d, d);
        Ok(out)
    }

    fn cross_attention(
        &self,
        x: &Tensor,
        ctx: &Tensor,
        bw: &BlockWeights,
        macs: &mut u64,
    ) -> Result<Tensor, ModelError> {
        let cw = bw.cross.as_ref().expect("cross weights");
        let d = self.cfg.model_dim;
        let l = self.cfg.tokens;
        let lc = self.cfg.context_tokens;
        let q = matmul(x, &cw.w_q)?;
        count_matmul(macs, l, d, d);
        let kv = matmul(ctx, &cw.w_kv)?;
        count_matmul(macs, lc, d, 2 * d);
        let attn = self.multi_head(&q, l, usize::MAX, &kv, lc, d, macs)?;
        let out = matmul(&attn, &cw.w_out)?;
        count_matmul(macs, l, d, d);
        Ok(out)
    }

    /// Multi-head scaled dot-product attention over packed projections.
    ///
    /// `q_src` holds queries in columns [q_offset*d, q_offset*d + d) of each
    /// row; keys and values are the first and second d-column groups of `kv`
    /// after the query group (for fused QKV, `q_offset = 0` and `kv = q_src`;
    /// for cross attention, `q_offset = usize::MAX` marks a plain [l, d]
    /// query matrix and `kv` packs K|V).
    #[allow(clippy::too_many_arguments)]
    fn multi_head(
        &self,
        q_src: &Tensor,
        l_q: usize,
        q_offset: usize,
        kv: &Tensor,
        l_kv: usize,
        d: usize,
        macs: &mut u64,
    ) -> Result<Tensor, ModelError> {
        let heads = self.cfg.heads;
        let dh = d / heads;
        let fused = q_offset != usize::MAX;
        // column offsets of K and V groups within kv rows
        let (k_off, v_off) = if fused { (d, 2 * d) } else { (0, d) };
        let kv_cols = kv.shape()[1];
        let q_cols = q_src.shape()[1];
        let scale = 1.0 / (dh as f32).sqrt();

        let mut out = vec![0.0f32; l_q * d];
        for h in 0..heads {
            let qc = h * dh;
            let take = |src: &Tensor, rows: usize, cols: usize, col0: usize| -> Tensor {
                let mut data = Vec::with_capacity(rows * dh);
                for r in 0..rows {
                    let row = &src.data()[r * cols..r * cols + cols];
                    data.extend_from_slice(&row[col0..col0 + dh]);
                }
                Tensor::new(vec![rows, dh], data).expect("finite head slice")
            };
            let qh = take(q_src, l_q, q_cols, qc);
            let kh = take(kv, l_kv, kv_cols, k_off + qc);
            let vh = take(kv, l_kv, kv_cols, v_off + qc);

            let mut scores = matmul_nt(&qh, &kh)?;
            count_matmul(macs, l_q, dh, l_kv);
            for v in scores.data_mut() {
                *v *= scale;
            }
            let probs = softmax(&scores, 1)?;
            let oh = matmul(&probs, &vh)?;
            count_matmul(macs, l_q, l_kv, dh);
            for r in 0..l_q {
                out[r * d + qc..r * d + qc + dh].copy_from_slice(&oh.data()[r * dh..(r + 1) * dh]);
            }
        }
        Ok(Tensor::new(vec![l_q, d], out)?)
    }

    fn feed_forward(
        &self,
        x: &Tensor,
        bw: &BlockWeights,
        macs: &mut u64,
    ) -> Result<Tensor, ModelError> {
        let d = self.cfg.model_dim;
        let l = self.cfg.tokens;
        let hidden = self.cfg.ffn_mult * d;
        let up = gelu(&matmul(x, &bw.w_up)?);
        count_matmul(macs, l, d, hidden);
        let down = matmul(&up, &bw.w_down)?;
        count_matmul(macs, l, hidden, d);
        Ok(down)
    }

    fn named_matrices(&self) -> Vec<(String, &Tensor)> {
        let mut v: Vec<(String, &Tensor)> = vec![
            ("time1".into(), &self.w_time1),
            ("time2".into(), &self.w_time2),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            v.push((format!("block{i}.mod"), &b.w_mod));
            v.push((format!("block{i}.qkv"), &b.w_qkv));
            v.push((format!("block{i}.attn_out"), &b.w_attn_out));
            if let Some(c) = &b.cross {
                v.push((format!("block{i}.cross_q"), &c.w_q));
                v.push((format!("block{i}.cross_kv"), &c.w_kv));
                v.push((format!("block{i}.cross_out"), &c.w_out));
            }
            v.push((format!("block{i}.ffn_up"), &b.w_up));
            v.push((format!("block{i}.ffn_down"), &b.w_down));
        }
        v.push(("head".into(), &self.w_head));
        if let Some(nc) = &self.null_context {
            v.push(("null_context".into(), nc));
        }
        v
    }

    /// FNV-1a over little-endian f32 bytes; stable across runs and platforms.
    pub fn matrix_checksum(t: &Tensor) -> u64 {
        let mut hash = 0xcbf2_9ce4_8422_2325u64;
        for v in t.data() {
            for byte in v.to_le_bytes() {
                hash ^= byte as u64;
                hash = hash.wrapping_mul(0x0000_0100_0000_01B3);
            }
        }
        hash
    }

    pub fn weight_checksums(&self) -> BTreeMap<String, String> {
        self.named_matrices()
            .into_iter()
            .map(|(name, t)| (name, format!("{:016x}", Self::matrix_checksum(t))))
            .collect()
    }

    /// Export weights as SCTD dumps plus a JSON manifest of checksums.
    pub fn save_weights(&self, dir: &Path) -> Result<(), ModelError> {
        std::fs::create_dir_all(dir).map_err(NumericsError::Io)?;
        for (name, t) in self.named_matrices() {
            save_sctd(&dir.join(format!("{name}.sctd")), t)?;
        }
        let manifest = serde_json::json!({
            "config": self.cfg,
            "checksums": self.weight_checksums(),
        });
        let text = serde_json::to_string_pretty(&manifest)
            .map_err(|e| ModelError::Manifest(e.to_string()))?;
        std::fs::write(dir.join("manifest.json"), text).map_err(NumericsError::Io)?;
        Ok(())
    }

    /// Rebuild a model from an exported weight directory, verifying checksums.
    pub fn load_weights(dir: &Path) -> Result<Model, ModelError> {
        let text =
            std::fs::read_to_string(dir.join("manifest.json")).map_err(NumericsError::Io)?;
        let manifest: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| ModelError::Manifest(e.to_string()))?;
        let cfg: ModelConfig = serde_json::from_value(manifest["config"].clone())
            .map_err(|e| ModelError::Manifest(e.to_string()))?;
        let mut model = build_model(cfg)?;
        let names: Vec<String> = model
            .named_matrices()
            .into_iter()
            .map(|(n, _)| n)
            .collect();
        let mut loaded = BTreeMap::new();
        for name in &names {
            loaded.insert(name.clone(), load_sctd(&dir.join(format!("{name}.sctd")))?);
        }
        model.replace_matrices(&loaded)?;
        for (name, t) in model.named_matrices() {
            let want = manifest["checksums"][&name]
                .as_str()
                .ok_or_else(|| ModelError::Manifest(format!("missing checksum for {name}")))?;
            let got = format!("{:016x}", Self::matrix_checksum(t));
            if got != want {
                return Err(ModelError::Manifest(format!(
                    "checksum mismatch for {name}: {got} != {want}"
                )));
            }
        }
        Ok(model)
    }

    fn replace_matrices(&mut self, loaded: &BTreeMap<String, Tensor>) -> Result<(), ModelError> {
        let get = |name: &str| -> Result<Tensor, ModelError> {
            loaded
                .get(name)
                .cloned()
                .ok_or_else(|| ModelError::Manifest(format!("missing matrix {name}")))
        };
        self.w_time1 = get("time1")?;
        self.w_time2 = get("time2")?;
        for i in 0..self.blocks.len() {
            self.blocks[i].w_mod = get(&format!("block{i}.mod"))?;
            self.blocks[i].w_qkv = get(&format!("block{i}.qkv"))?;
            self.blocks[i].w_attn_out = get(&format!("block{i}.attn_out"))?;
            if self.blocks[i].cross.is_some() {
                self.blocks[i].cross = Some(CrossWeights {
                    w_q: get(&format!("block{i}.cross_q"))?,
                    w_kv: get(&format!("block{i}.cross_kv"))?,
                    w_out: get(&format!("block{i}.cross_out"))?,
                });
            }
            self.blocks[i].w_up = get(&format!("block{i}.ffn_up"))?;
            self.blocks[i].w_down = get(&format!("block{i}.ffn_down"))?;
        }
        self.w_head = get("head")?;
        if self.null_context.is_some() {
            self.null_context = Some(get("null_context")?);
        }
        Ok(())
    }
}
