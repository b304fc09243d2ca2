//! The Dark Transformer: L encoder blocks over one shared parameter set,
//! evaluated as three branches — source, target, and a source→target bridge
//! that mixes the two streams through cross-attention and distills into the
//! target branch.
//!
//! All three branches literally share storage: a branch forward clones
//! tensor *handles*, so every gradient contribution lands in the same
//! buffer. Inference reads only the target clip.

use crate::attention::{
    attend_cross, attend_space, attend_time, AttentionParams, ClsHandling, HeadMaps,
};
use crate::rng::Rng;
use crate::synth::ClipPair;
use crate::tensor::Tensor;
use crate::tokenizer::{tokenize, ClipSpec, TokenizerParams};
use crate::video::VideoClip;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionMode {
    /// Spatial attention only (per-frame groups + class token).
    Spatial,
    /// Temporal attention only; the class query goes global in this pass.
    Temporal,
    /// Divided space-time: temporal pass then spatial pass.
    SpaceTime,
}

impl AttentionMode {
    pub fn parse(s: &str) -> Option<AttentionMode> {
        match s {
            "s" => Some(AttentionMode::Spatial),
            "t" => Some(AttentionMode::Temporal),
            "st" => Some(AttentionMode::SpaceTime),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            AttentionMode::Spatial => "s",
            AttentionMode::Temporal => "t",
            AttentionMode::SpaceTime => "st",
        }
    }
}

/// What seeds the bridge stream at layer 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BridgeInit {
    Source,
    Target,
    Mean,
}

impl BridgeInit {
    pub fn parse(s: &str) -> Option<BridgeInit> {
        match s {
            "source" => Some(BridgeInit::Source),
            "target" => Some(BridgeInit::Target),
            "mean" => Some(BridgeInit::Mean),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            BridgeInit::Source => "source",
            BridgeInit::Target => "target",
            BridgeInit::Mean => "mean",
        }
    }
}

#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub spec: ClipSpec,
    pub embed_dim: usize,
    pub heads: usize,
    pub layers: usize,
    /// MLP hidden width as a multiple of `embed_dim`.
    pub mlp_ratio: usize,
    pub num_classes: usize,
    pub attention_mode: AttentionMode,
    pub cross_attention: bool,
    pub bridge_init: BridgeInit,
    /// Separate Q/K/V sets for the temporal and spatial passes instead of
    /// one shared set per block.
    pub split_qkv: bool,
    pub layernorm_eps: f64,
}

impl Default for ModelConfig {
    /// Desk-scale defaults: everything trains in minutes on one CPU core.
    fn default() -> Self {
        ModelConfig {
            spec: ClipSpec { frames: 8, height: 32, width: 32, channels: 1, patch: 8, stride: 2 },
            embed_dim: 64,
            heads: 4,
            layers: 2,
            mlp_ratio: 2,
            num_classes: 8,
            attention_mode: AttentionMode::SpaceTime,
            cross_attention: true,
            bridge_init: BridgeInit::Source,
            split_qkv: false,
            layernorm_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        if self.embed_dim == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::InvalidParameter {
                name: "embed_dim",
                value: self.embed_dim as f64,
                constraint: "D > 0 and D mod heads == 0",
            });
        }
        if self.num_classes == 0 {
            return Err(Error::InvalidParameter {
                name: "num_classes",
                value: 0.0,
                constraint: "K >= 1",
            });
        }
        if self.mlp_ratio == 0 {
            return Err(Error::InvalidParameter {
                name: "mlp_ratio",
                value: 0.0,
                constraint: "r >= 1",
            });
        }
        Ok(())
    }
}

pub struct LayerNormParams {
    pub gain: Tensor,
    pub bias: Tensor,
}

impl LayerNormParams {
    fn init(d: usize) -> LayerNormParams {
        LayerNormParams { gain: Tensor::full(&[d], 1.0).tracked(), bias: Tensor::zeros(&[d]).tracked() }
    }

    fn apply(&self, x: &Tensor, eps: f64) -> Tensor {
        x.layernorm(&self.gain, &self.bias, eps)
    }
}

pub struct MlpParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl MlpParams {
    fn init(d: usize, hidden: usize, rng: &mut Rng) -> MlpParams {
        MlpParams {
            w1: Tensor::randn(&[d, hidden], 0.02, rng).tracked(),
            b1: Tensor::zeros(&[hidden]).tracked(),
            w2: Tensor::randn(&[hidden, d], 0.02, rng).tracked(),
            b2: Tensor::zeros(&[d]).tracked(),
        }
    }

    fn apply(&self, x: &Tensor) -> Tensor {
        x.matmul(&self.w1).add_bias(&self.b1).gelu().matmul(&self.w2).add_bias(&self.b2)
    }
}

/// One encoder block. `wq`/`wk`/`wv` is the block's projection set, shared
/// by the temporal and spatial passes (and by cross-attention) unless
/// `split_qkv` adds a second set for the spatial/cross side. Each pass has
/// its own output projection.
pub struct BlockParams {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    /// Present only in `split_qkv` mode: (wq, wk, wv) for the spatial pass.
    pub space_qkv: Option<(Tensor, Tensor, Tensor)>,
    pub wo_time: Tensor,
    pub wo_space: Tensor,
    pub wo_cross: Tensor,
    pub ln_time: LayerNormParams,
    pub ln_space: LayerNormParams,
    pub ln_cross: LayerNormParams,
    pub ln_mlp: LayerNormParams,
    pub mlp: MlpParams,
}

impl BlockParams {
    fn init(cfg: &ModelConfig, rng: &mut Rng) -> BlockParams {
        let d = cfg.embed_dim;
        let w = |rng: &mut Rng| Tensor::randn(&[d, d], 0.02, rng).tracked();
        BlockParams {
            wq: w(rng),
            wk: w(rng),
            wv: w(rng),
            space_qkv: if cfg.split_qkv { Some((w(rng), w(rng), w(rng))) } else { None },
            wo_time: w(rng),
            wo_space: w(rng),
            wo_cross: w(rng),
            ln_time: LayerNormParams::init(d),
            ln_space: LayerNormParams::init(d),
            ln_cross: LayerNormParams::init(d),
            ln_mlp: LayerNormParams::init(d),
            mlp: MlpParams::init(d, d * cfg.mlp_ratio, rng),
        }
    }

    fn time_attention(&self, heads: usize) -> AttentionParams {
        AttentionParams {
            wq: self.wq.clone(),
            wk: self.wk.clone(),
            wv: self.wv.clone(),
            wo: self.wo_time.clone(),
            heads,
        }
    }

    fn space_set(&self) -> (Tensor, Tensor, Tensor) {
        match &self.space_qkv {
            Some((q, k, v)) => (q.clone(), k.clone(), v.clone()),
            None => (self.wq.clone(), self.wk.clone(), self.wv.clone()),
        }
    }

    fn space_attention(&self, heads: usize) -> AttentionParams {
        let (wq, wk, wv) = self.space_set();
        AttentionParams { wq, wk, wv, wo: self.wo_space.clone(), heads }
    }

    /// Cross-attention reuses the spatial-pass projection set (the final
    /// self-attention of a block) with its own output projection.
    fn cross_attention(&self, heads: usize) -> AttentionParams {
        let (wq, wk, wv) = self.space_set();
        AttentionParams { wq, wk, wv, wo: self.wo_cross.clone(), heads }
    }
}

/// Per-layer spatial-attention maps (and cross maps on the bridge branch),
/// captured only when a forward is asked to record.
pub struct BranchOutput {
    /// `[num_classes]`, read from the class token after the final layernorm.
    pub logits: Tensor,
    /// Pre-block token states `Z^0 … Z^L` (`Z^L` is the final, pre-layernorm
    /// state); the bridge branch consumes these layer by layer.
    pub states: Vec<Tensor>,
    /// One dense `T×T` map per head per layer, when recorded.
    pub attention: Option<Vec<HeadMaps>>,
}

pub struct TripleOutput {
    pub source: BranchOutput,
    pub target: BranchOutput,
    /// Absent when cross-attention is ablated away.
    pub bridge: Option<BranchOutput>,
}

pub struct Prediction {
    pub class: usize,
    pub probabilities: Vec<f64>,
}

pub struct DarkTransformer {
    pub cfg: ModelConfig,
    pub tokenizer: TokenizerParams,
    pub blocks: Vec<BlockParams>,
    pub final_ln: LayerNormParams,
    /// `[D, K]`; zero-initialized so the untrained model is exactly at
    /// chance and label symmetry holds from the first step.
    pub classifier_w: Tensor,
    pub classifier_b: Tensor,
}

impl DarkTransformer {
    pub fn init(cfg: &ModelConfig, rng: &mut Rng) -> DarkTransformer {
        cfg.validate().expect("invalid model config");
        let d = cfg.embed_dim;
        DarkTransformer {
            tokenizer: TokenizerParams::init(&cfg.spec, d, rng),
            blocks: (0..cfg.layers).map(|_| BlockParams::init(cfg, rng)).collect(),
            final_ln: LayerNormParams::init(d),
            classifier_w: Tensor::zeros(&[d, cfg.num_classes]).tracked(),
            classifier_b: Tensor::zeros(&[cfg.num_classes]).tracked(),
            cfg: cfg.clone(),
        }
    }

    /// Named parameters in a stable order. Shared storage appears exactly
    /// once.
    pub fn parameters(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = vec![
            ("embed".into(), self.tokenizer.embed.clone()),
            ("positions".into(), self.tokenizer.positions.clone()),
            ("cls".into(), self.tokenizer.cls.clone()),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            let mut push = |suffix: &str, t: &Tensor| out.push((format!("block{i}.{suffix}"), t.clone()));
            push("wq", &b.wq);
            push("wk", &b.wk);
            push("wv", &b.wv);
            if let Some((q, k, v)) = &b.space_qkv {
                push("wq_space", q);
                push("wk_space", k);
                push("wv_space", v);
            }
            push("wo_time", &b.wo_time);
            push("wo_space", &b.wo_space);
            push("wo_cross", &b.wo_cross);
            push("ln_time.gain", &b.ln_time.gain);
            push("ln_time.bias", &b.ln_time.bias);
            push("ln_space.gain", &b.ln_space.gain);
            push("ln_space.bias", &b.ln_space.bias);
            push("ln_cross.gain", &b.ln_cross.gain);
            push("ln_cross.bias", &b.ln_cross.bias);
            push("ln_mlp.gain", &b.ln_mlp.gain);
            push("ln_mlp.bias", &b.ln_mlp.bias);
            push("mlp.w1", &b.mlp.w1);
            push("mlp.b1", &b.mlp.b1);
            push("mlp.w2", &b.mlp.w2);
            push("mlp.b2", &b.mlp.b2);
        }
        out.push(("final_ln.gain".into(), self.final_ln.gain.clone()));
        out.push(("final_ln.bias".into(), self.final_ln.bias.clone()));
        out.push(("classifier.w".into(), self.classifier_w.clone()));
        out.push(("classifier.b".into(), self.classifier_b.clone()));
        out
    }

    /// Fresh storage with identical values and the same sharing structure.
    pub fn deep_clone(&self) -> DarkTransformer {
        let copy = |t: &Tensor| Tensor::new(t.to_vec(), t.shape()).tracked();
        DarkTransformer {
            cfg: self.cfg.clone(),
            tokenizer: TokenizerParams {
                embed: copy(&self.tokenizer.embed),
                positions: copy(&self.tokenizer.positions),
                cls: copy(&self.tokenizer.cls),
            },
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockParams {
                    wq: copy(&b.wq),
                    wk: copy(&b.wk),
                    wv: copy(&b.wv),
                    space_qkv: b.space_qkv.as_ref().map(|(q, k, v)| (copy(q), copy(k), copy(v))),
                    wo_time: copy(&b.wo_time),
                    wo_space: copy(&b.wo_space),
                    wo_cross: copy(&b.wo_cross),
                    ln_time: LayerNormParams { gain: copy(&b.ln_time.gain), bias: copy(&b.ln_time.bias) },
                    ln_space: LayerNormParams { gain: copy(&b.ln_space.gain), bias: copy(&b.ln_space.bias) },
                    ln_cross: LayerNormParams { gain: copy(&b.ln_cross.gain), bias: copy(&b.ln_cross.bias) },
                    ln_mlp: LayerNormParams { gain: copy(&b.ln_mlp.gain), bias: copy(&b.ln_mlp.bias) },
                    mlp: MlpParams {
                        w1: copy(&b.mlp.w1),
                        b1: copy(&b.mlp.b1),
                        w2: copy(&b.mlp.w2),
                        b2: copy(&b.mlp.b2),
                    },
                })
                .collect(),
            final_ln: LayerNormParams {
                gain: copy(&self.final_ln.gain),
                bias: copy(&self.final_ln.bias),
            },
            classifier_w: copy(&self.classifier_w),
            classifier_b: copy(&self.classifier_b),
        }
    }

    fn classify(&self, z: &Tensor) -> Tensor {
        let normed = self.final_ln.apply(z, self.cfg.layernorm_eps);
        normed
            .narrow(0, 0, 1)
            .matmul(&self.classifier_w)
            .add_bias(&self.classifier_b)
            .reshape(&[self.cfg.num_classes])
    }

    /// One divided-attention branch over a single clip.
    pub fn forward_branch(&self, clip: &VideoClip) -> Result<BranchOutput> {
        self.forward_branch_inner(clip, false)
    }

    pub fn forward_branch_recording(&self, clip: &VideoClip) -> Result<BranchOutput> {
        self.forward_branch_inner(clip, true)
    }

    fn forward_branch_inner(&self, clip: &VideoClip, record: bool) -> Result<BranchOutput> {
        let cfg = &self.cfg;
        let m = cfg.spec.patches_per_frame();
        let n = cfg.spec.frames;
        let eps = cfg.layernorm_eps;
        let mut z = tokenize(clip, &self.tokenizer, &cfg.spec)?.tokens;
        let mut states = vec![z.clone()];
        let mut attention = record.then(Vec::new);
        for block in &self.blocks {
            match cfg.attention_mode {
                AttentionMode::SpaceTime => {
                    let t = attend_time(
                        &block.ln_time.apply(&z, eps),
                        &block.time_attention(cfg.heads),
                        m,
                        n,
                        ClsHandling::Skip,
                    );
                    z = z.add(&t);
                    let mut maps = HeadMaps::new();
                    let s = attend_space(
                        &block.ln_space.apply(&z, eps),
                        &block.space_attention(cfg.heads),
                        m,
                        n,
                        record.then_some(&mut maps),
                    );
                    z = z.add(&s);
                    if let Some(a) = attention.as_mut() {
                        a.push(maps);
                    }
                }
                AttentionMode::Spatial => {
                    let mut maps = HeadMaps::new();
                    let s = attend_space(
                        &block.ln_space.apply(&z, eps),
                        &block.space_attention(cfg.heads),
                        m,
                        n,
                        record.then_some(&mut maps),
                    );
                    z = z.add(&s);
                    if let Some(a) = attention.as_mut() {
                        a.push(maps);
                    }
                }
                AttentionMode::Temporal => {
                    let t = attend_time(
                        &block.ln_time.apply(&z, eps),
                        &block.time_attention(cfg.heads),
                        m,
                        n,
                        ClsHandling::Global,
                    );
                    z = z.add(&t);
                    if let Some(a) = attention.as_mut() {
                        a.push(HeadMaps::new());
                    }
                }
            }
            z = z.add(&block.mlp.apply(&block.ln_mlp.apply(&z, eps)));
            states.push(z.clone());
        }
        let logits = self.classify(&z);
        Ok(BranchOutput { logits, states, attention })
    }

    /// The three-branch forward over a clip pair using this model's shared
    /// parameters everywhere.
    pub fn forward_triple(&self, pair: &ClipPair) -> Result<TripleOutput> {
        Self::forward_triple_over(self, self, self, pair, false)
    }

    pub fn forward_triple_recording(&self, pair: &ClipPair) -> Result<TripleOutput> {
        Self::forward_triple_over(self, self, self, pair, true)
    }

    /// Three-branch forward with explicit parameter sets per role. Training
    /// passes the same model three times; the duplicated-parameter gradient
    /// oracle passes three clones to decompose the shared gradient.
    pub fn forward_triple_over(
        src_model: &DarkTransformer,
        tgt_model: &DarkTransformer,
        bridge_model: &DarkTransformer,
        pair: &ClipPair,
        record: bool,
    ) -> Result<TripleOutput> {
        if pair.source.label != pair.target.label {
            return Err(Error::LabelMismatch { source: pair.source.label, target: pair.target.label });
        }
        let source = src_model.forward_branch_inner(&pair.source, record)?;
        let target = tgt_model.forward_branch_inner(&pair.target, record)?;
        let cfg = &bridge_model.cfg;
        if !cfg.cross_attention {
            return Ok(TripleOutput { source, target, bridge: None });
        }

        let eps = cfg.layernorm_eps;
        let mut z = match cfg.bridge_init {
            BridgeInit::Source => source.states[0].clone(),
            BridgeInit::Target => target.states[0].clone(),
            BridgeInit::Mean => source.states[0].add(&target.states[0]).scale(0.5),
        };
        let mut states = vec![z.clone()];
        let mut attention = record.then(Vec::new);
        for (l, block) in bridge_model.blocks.iter().enumerate() {
            let q_in = block.ln_cross.apply(&source.states[l], eps);
            let kv_in = block.ln_cross.apply(&target.states[l], eps);
            let mut maps = HeadMaps::new();
            let cross = attend_cross(
                &q_in,
                &kv_in,
                &block.cross_attention(cfg.heads),
                record.then_some(&mut maps),
            );
            z = z.add(&cross);
            z = z.add(&block.mlp.apply(&block.ln_mlp.apply(&z, eps)));
            states.push(z.clone());
            if let Some(a) = attention.as_mut() {
                a.push(maps);
            }
        }
        let logits = bridge_model.classify(&z);
        Ok(TripleOutput { source, target, bridge: Some(BranchOutput { logits, states, attention }) })
    }

    /// Target-only inference: exactly one clip goes in, class probabilities
    /// come out.
    pub fn infer(&self, clip: &VideoClip) -> Result<Prediction> {
        let out = self.forward_branch(clip)?;
        let probs = out.logits.softmax(0).to_vec();
        let class = argmax(&probs);
        Ok(Prediction { class, probabilities: probs })
    }
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}
