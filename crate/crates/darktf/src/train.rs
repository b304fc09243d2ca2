//! Optimizers, the pair-wise training loop, evaluation, and ablation
//! orchestration.
//!
//! Training is strictly serial and, given a seed, bit-deterministic: the
//! epoch pairing shuffle, batch order and every update derive from one
//! SplitMix64 stream. Evaluation is read-only over the parameters and may
//! fan out across threads when `DKTF_THREADS` > 1 (each worker gets its own
//! parameter copy); accuracy aggregation is order-independent integer
//! counting, so the thread count never changes results.

use std::fmt::Write as _;

use crate::losses::{loss_terms, total_loss, LossWeights};
use crate::model::{argmax, AttentionMode, DarkTransformer, ModelConfig};
use crate::rng::Rng;
use crate::synth::{make_dataset, ClipPair, Dataset, SynthConfig};
use crate::tensor::Tensor;
use crate::video::VideoClip;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

impl OptimizerKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "adam" => Some(OptimizerKind::Adam),
            "sgd" => Some(OptimizerKind::Sgd),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            OptimizerKind::Adam => "adam",
            OptimizerKind::Sgd => "sgd",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Schedule {
    Constant,
    Cosine,
}

impl Schedule {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "constant" => Some(Schedule::Constant),
            "cosine" => Some(Schedule::Cosine),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Schedule::Constant => "constant",
            Schedule::Cosine => "cosine",
        }
    }

    pub fn lr_at(&self, base: f64, step: usize, total_steps: usize) -> f64 {
        match self {
            Schedule::Constant => base,
            Schedule::Cosine => {
                let t = step as f64 / total_steps.max(1) as f64;
                base * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub schedule: Schedule,
    pub weight_decay: f64,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub clip_norm: f64,
    pub seed: u64,
    pub weights: LossWeights,
    /// Gate for the distillation term (off forces its weight to zero).
    pub distillation: bool,
    /// Strict unsupervised adaptation: no target-branch cross-entropy.
    pub strict_uda: bool,
    /// Redraw the per-class source↔target pairing every epoch.
    pub repair_each_epoch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: OptimizerKind::Adam,
            lr: 3e-4,
            schedule: Schedule::Cosine,
            weight_decay: 0.01,
            momentum: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            epochs: 30,
            batch_size: 8,
            clip_norm: 1.0,
            seed: 1,
            weights: LossWeights::default(),
            distillation: true,
            strict_uda: false,
            repair_each_epoch: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::InvalidParameter { name: "lr", value: self.lr, constraint: "lr > 0" });
        }
        if self.epochs == 0 {
            return Err(Error::InvalidParameter { name: "epochs", value: 0.0, constraint: "epochs >= 1" });
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidParameter {
                name: "batch_size",
                value: 0.0,
                constraint: "batch_size >= 1",
            });
        }
        self.effective_weights().validate()
    }

    /// Loss weights after applying the distillation / strict-UDA switches.
    pub fn effective_weights(&self) -> LossWeights {
        let mut w = self.weights;
        if !self.distillation {
            w.w_dtl = 0.0;
        }
        if self.strict_uda {
            w.w_tgt_ce = 0.0;
        }
        w
    }
}

/// Decoupled-weight-decay optimizer over a fixed parameter list. With zero
/// gradients a step is exactly `p ← p·(1 − lr·wd)` (identity when wd = 0).
pub struct Optimizer {
    kind: OptimizerKind,
    weight_decay: f64,
    momentum: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    /// Adam first/second moments or SGD velocity, per parameter.
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: usize,
}

impl Optimizer {
    pub fn new(cfg: &TrainConfig, params: &[(String, Tensor)]) -> Optimizer {
        Optimizer {
            kind: cfg.optimizer,
            weight_decay: cfg.weight_decay,
            momentum: cfg.momentum,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            m: params.iter().map(|(_, p)| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|(_, p)| vec![0.0; p.numel()]).collect(),
            t: 0,
        }
    }

    /// Scales all gradients so the global L2 norm is at most `max_norm`.
    /// Returns the pre-clip norm. A zero or non-positive ceiling disables
    /// clipping.
    pub fn clip_gradients(params: &[(String, Tensor)], max_norm: f64) -> f64 {
        let mut sq = 0.0;
        for (_, p) in params {
            for g in p.grad_vec() {
                sq += g * g;
            }
        }
        let norm = sq.sqrt();
        if max_norm > 0.0 && norm > max_norm {
            let scale = max_norm / norm;
            for (_, p) in params {
                let scaled: Vec<f64> = p.grad_vec().iter().map(|g| g * scale).collect();
                p.zero_grad();
                p.accumulate_grad_public(&scaled);
            }
        }
        norm
    }

    pub fn step(&mut self, params: &[(String, Tensor)], lr: f64) {
        self.t += 1;
        for (i, (_, p)) in params.iter().enumerate() {
            let grad = p.grad_vec();
            let mut data = p.to_vec();
            if self.weight_decay != 0.0 {
                for d in data.iter_mut() {
                    *d *= 1.0 - lr * self.weight_decay;
                }
            }
            match self.kind {
                OptimizerKind::Adam => {
                    let bc1 = 1.0 - self.beta1.powi(self.t as i32);
                    let bc2 = 1.0 - self.beta2.powi(self.t as i32);
                    for j in 0..data.len() {
                        let g = grad[j];
                        self.m[i][j] = self.beta1 * self.m[i][j] + (1.0 - self.beta1) * g;
                        self.v[i][j] = self.beta2 * self.v[i][j] + (1.0 - self.beta2) * g * g;
                        let mhat = self.m[i][j] / bc1;
                        let vhat = self.v[i][j] / bc2;
                        data[j] -= lr * mhat / (vhat.sqrt() + self.eps);
                    }
                }
                OptimizerKind::Sgd => {
                    for j in 0..data.len() {
                        self.m[i][j] = self.momentum * self.m[i][j] + grad[j];
                        data[j] -= lr * self.m[i][j];
                    }
                }
            }
            p.set_data(&data);
        }
    }
}

/// Per-epoch metrics. Accuracies are fractions in [0, 1]; the confusion
/// matrix is over the target test split with rows = true class.
#[derive(Debug, Clone)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub loss_src: f64,
    pub loss_tgt: f64,
    pub loss_bridge: f64,
    pub loss_dtl: f64,
    pub loss_total: f64,
    pub acc_source: f64,
    pub acc_target: f64,
    pub top5_source: Option<f64>,
    pub top5_target: Option<f64>,
    pub confusion_target: Vec<Vec<usize>>,
}

pub const METRICS_CSV_HEADER: &str =
    "epoch,loss_src,loss_tgt,loss_bridge,loss_dtl,loss_total,acc_source,acc_target,top5_source,top5_target";

impl MetricsRecord {
    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.loss_src,
            self.loss_tgt,
            self.loss_bridge,
            self.loss_dtl,
            self.loss_total,
            self.acc_source,
            self.acc_target,
            opt(self.top5_source),
            opt(self.top5_target),
        )
    }
}

pub fn metrics_to_csv(records: &[MetricsRecord]) -> String {
    let mut out = String::from(METRICS_CSV_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

pub fn confusion_to_csv(confusion: &[Vec<usize>]) -> String {
    let k = confusion.len();
    let mut out = String::from("true_class");
    for j in 0..k {
        let _ = write!(out, ",pred_{j}");
    }
    out.push('\n');
    for (i, row) in confusion.iter().enumerate() {
        let _ = write!(out, "{i}");
        for v in row {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone)]
pub struct EvalResult {
    pub top1: f64,
    /// Reported only when the label space is larger than five classes.
    pub top5: Option<f64>,
    pub confusion: Vec<Vec<usize>>,
    pub predictions: Vec<usize>,
}

fn worker_count(n_items: usize) -> usize {
    std::env::var("DKTF_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .unwrap_or(1)
        .clamp(1, n_items.max(1))
}

/// Top-1/top-5 accuracy and the confusion matrix over labeled clips, via
/// the target-only inference path.
pub fn evaluate(model: &DarkTransformer, clips: &[VideoClip]) -> Result<EvalResult> {
    if clips.is_empty() {
        return Err(Error::EmptySplit);
    }
    let k = model.cfg.num_classes;
    let workers = worker_count(clips.len());
    let prob_rows: Vec<Vec<f64>> = if workers <= 1 {
        clips
            .iter()
            .map(|c| model.infer(c).map(|p| p.probabilities))
            .collect::<Result<_>>()?
    } else {
        let chunk = clips.len().div_ceil(workers);
        std::thread::scope(|scope| {
            let handles: Vec<_> = clips
                .chunks(chunk)
                .map(|chunk_clips| {
                    let local = model.deep_clone();
                    scope.spawn(move || {
                        chunk_clips
                            .iter()
                            .map(|c| local.infer(c).map(|p| p.probabilities))
                            .collect::<Result<Vec<_>>>()
                    })
                })
                .collect();
            let mut rows = Vec::with_capacity(clips.len());
            for h in handles {
                rows.extend(h.join().expect("evaluation worker panicked")?);
            }
            Ok::<_, Error>(rows)
        })?
    };

    let mut confusion = vec![vec![0usize; k]; k];
    let mut predictions = Vec::with_capacity(clips.len());
    let mut top1_hits = 0usize;
    let mut top5_hits = 0usize;
    for (clip, probs) in clips.iter().zip(&prob_rows) {
        let pred = argmax(probs);
        predictions.push(pred);
        confusion[clip.label][pred] += 1;
        if pred == clip.label {
            top1_hits += 1;
        }
        let mut order: Vec<usize> = (0..k).collect();
        order.sort_by(|&a, &b| probs[b].partial_cmp(&probs[a]).unwrap());
        if order.iter().take(5).any(|&c| c == clip.label) {
            top5_hits += 1;
        }
    }
    let n = clips.len() as f64;
    Ok(EvalResult {
        top1: top1_hits as f64 / n,
        top5: (k > 5).then_some(top5_hits as f64 / n),
        confusion,
        predictions,
    })
}

/// Re-draws the source↔target pairing within each class (targets permuted).
fn repair_pairs(train: &[ClipPair], num_classes: usize, rng: &mut Rng) -> Vec<ClipPair> {
    let mut by_class: Vec<Vec<&ClipPair>> = vec![Vec::new(); num_classes];
    for p in train {
        by_class[p.label].push(p);
    }
    let mut out = Vec::with_capacity(train.len());
    for class_pairs in &by_class {
        let mut target_order: Vec<usize> = (0..class_pairs.len()).collect();
        rng.shuffle(&mut target_order);
        for (i, p) in class_pairs.iter().enumerate() {
            out.push(ClipPair {
                source: p.source.clone(),
                target: class_pairs[target_order[i]].target.clone(),
                label: p.label,
            });
        }
    }
    out
}

/// Loss over one pair, short-circuiting branches whose weights are zero so
/// e.g. a source-only baseline never pays for the target or bridge forward.
fn pair_loss(
    model: &DarkTransformer,
    pair: &ClipPair,
    weights: &LossWeights,
) -> Result<(Tensor, crate::losses::LossTerms)> {
    let bridge_used = model.cfg.cross_attention && (weights.w_bridge > 0.0 || weights.w_dtl > 0.0);
    let target_used = weights.w_tgt_ce > 0.0 || (bridge_used && weights.w_dtl > 0.0);
    if !bridge_used && !target_used {
        let source = model.forward_branch(&pair.source)?;
        let ce = crate::losses::cross_entropy(&source.logits, pair.label)?;
        let terms = crate::losses::LossTerms {
            src_ce: ce.item(),
            tgt_ce: 0.0,
            bridge_ce: 0.0,
            distillation: 0.0,
        };
        return Ok((ce.scale(weights.w_src), terms));
    }
    let triple = model.forward_triple(pair)?;
    let loss = total_loss(&triple, pair.label, weights)?;
    let terms = loss_terms(&triple, pair.label, weights)?;
    Ok((loss, terms))
}

/// Full training run: per step forward → loss → backward → clip → update →
/// zero; per epoch an evaluation of both test splits.
pub fn train(model: &DarkTransformer, data: &Dataset, cfg: &TrainConfig) -> Result<Vec<MetricsRecord>> {
    cfg.validate()?;
    let weights = cfg.effective_weights();
    let params = model.parameters();
    let mut optimizer = Optimizer::new(cfg, &params);
    let mut rng = Rng::derive(cfg.seed, &[0x7261_696e]);

    let steps_per_epoch = data.train.len().div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let mut step = 0usize;
    let mut records = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let mut pairs: Vec<ClipPair> = if cfg.repair_each_epoch {
            repair_pairs(&data.train, model.cfg.num_classes, &mut rng)
        } else {
            data.train.to_vec()
        };
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        rng.shuffle(&mut order);
        let shuffled: Vec<ClipPair> = order.into_iter().map(|i| pairs[i].clone()).collect();
        pairs = shuffled;

        let mut sums = [0.0f64; 5]; // src, tgt, bridge, dtl, total
        let mut pair_count = 0usize;
        for batch in pairs.chunks(cfg.batch_size) {
            let mut batch_loss = Tensor::scalar(0.0);
            for pair in batch {
                let (loss, terms) = pair_loss(model, pair, &weights)?;
                sums[0] += terms.src_ce;
                sums[1] += terms.tgt_ce;
                sums[2] += terms.bridge_ce;
                sums[3] += terms.distillation;
                batch_loss = batch_loss.add(&loss);
            }
            let batch_loss = batch_loss.scale(1.0 / batch.len() as f64);
            let value = batch_loss.item();
            sums[4] += value * batch.len() as f64;
            pair_count += batch.len();
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step,
                    detail: format!(
                        "batch loss {value}; epoch means so far: src {:.4} tgt {:.4} bridge {:.4} dtl {:.4}",
                        sums[0] / pair_count as f64,
                        sums[1] / pair_count as f64,
                        sums[2] / pair_count as f64,
                        sums[3] / pair_count as f64,
                    ),
                });
            }
            batch_loss.backward();
            Optimizer::clip_gradients(&params, cfg.clip_norm);
            let lr = cfg.schedule.lr_at(cfg.lr, step, total_steps);
            optimizer.step(&params, lr);
            for (_, p) in &params {
                p.zero_grad();
            }
            step += 1;
        }

        let eval_src = evaluate(model, &data.test_source)?;
        let eval_tgt = evaluate(model, &data.test_target)?;
        let n = pair_count.max(1) as f64;
        records.push(MetricsRecord {
            epoch,
            loss_src: sums[0] / n,
            loss_tgt: sums[1] / n,
            loss_bridge: sums[2] / n,
            loss_dtl: sums[3] / n,
            loss_total: sums[4] / n,
            acc_source: eval_src.top1,
            acc_target: eval_tgt.top1,
            top5_source: eval_src.top5,
            top5_target: eval_tgt.top5,
            confusion_target: eval_tgt.confusion,
        });
    }
    Ok(records)
}

/// One ablation-grid cell: complete configuration plus a display label.
#[derive(Debug, Clone)]
pub struct AblationSpec {
    pub label: String,
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub label: String,
    pub attention_mode: AttentionMode,
    pub cross_attention: bool,
    pub frames: usize,
    pub seed: u64,
    pub final_metrics: MetricsRecord,
    /// Instrumented query–key pairs for one branch forward.
    pub score_pairs_forward: u64,
}

pub const ABLATION_CSV_HEADER: &str =
    "label,attention_mode,cross_attention,frames,seed,acc_source,acc_target,top5_target,score_pairs_forward";

pub fn ablation_to_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from(ABLATION_CSV_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.label,
            r.attention_mode.as_str(),
            if r.cross_attention { "on" } else { "off" },
            r.frames,
            r.seed,
            r.final_metrics.acc_source,
            r.final_metrics.acc_target,
            r.final_metrics.top5_target.map(|v| v.to_string()).unwrap_or_default(),
            r.score_pairs_forward,
        );
    }
    out
}

/// Runs every grid cell end to end: fresh dataset (cached across cells with
/// identical generation settings), fresh seeded model, full training, final
/// metrics plus an instrumented attention-cost measurement.
pub fn ablate(cells: &[AblationSpec]) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(cells.len());
    let mut cache: Option<(SynthConfig, Dataset)> = None;
    for cell in cells {
        let dataset = match &cache {
            Some((cfg, data)) if synth_eq(cfg, &cell.synth) => data.clone(),
            _ => {
                let data = make_dataset(&cell.synth)?;
                cache = Some((cell.synth.clone(), data.clone()));
                data
            }
        };
        let mut init_rng = Rng::derive(cell.train.seed, &[0x6d6f_64656c]);
        let model = DarkTransformer::init(&cell.model, &mut init_rng);
        let records = train(&model, &dataset, &cell.train)?;
        let final_metrics = records.last().expect("epochs >= 1").clone();

        crate::attention::reset_score_count();
        let _ = model.forward_branch(&dataset.test_target[0])?;
        let score_pairs_forward = crate::attention::score_count();

        rows.push(AblationRow {
            label: cell.label.clone(),
            attention_mode: cell.model.attention_mode,
            cross_attention: cell.model.cross_attention,
            frames: cell.model.spec.frames,
            seed: cell.train.seed,
            final_metrics,
            score_pairs_forward,
        });
    }
    Ok(rows)
}

fn synth_eq(a: &SynthConfig, b: &SynthConfig) -> bool {
    a.num_classes == b.num_classes
        && a.train_pairs_per_class == b.train_pairs_per_class
        && a.test_clips_per_class == b.test_clips_per_class
        && a.spec == b.spec
        && a.gamma == b.gamma
        && a.contrast == b.contrast
        && a.noise_std == b.noise_std
        && a.seed == b.seed
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::ClipSpec;
    use crate::video::Domain;

    fn tiny_setup(num_classes: usize) -> (SynthConfig, ModelConfig) {
        let spec = ClipSpec { frames: 3, height: 8, width: 8, channels: 1, patch: 4, stride: 1 };
        let synth = SynthConfig {
            num_classes,
            train_pairs_per_class: 2,
            test_clips_per_class: 2,
            spec,
            ..SynthConfig::default()
        };
        let model = ModelConfig {
            spec,
            embed_dim: 8,
            heads: 2,
            layers: 1,
            mlp_ratio: 2,
            num_classes,
            ..ModelConfig::default()
        };
        (synth, model)
    }

    fn tiny_train_cfg(epochs: usize) -> TrainConfig {
        TrainConfig { epochs, batch_size: 4, lr: 1e-2, weight_decay: 0.0, ..TrainConfig::default() }
    }

    #[test]
    fn zero_lr_is_rejected_but_zero_grad_step_is_decay() {
        let cfg = TrainConfig { lr: 0.0, ..TrainConfig::default() };
        assert!(cfg.validate().is_err());

        // Zero gradients: step is a pure decay contraction.
        let p = Tensor::new(vec![2.0, -4.0], &[2]).tracked();
        let params = vec![("p".to_string(), p.clone())];
        let cfg = TrainConfig { weight_decay: 0.1, ..TrainConfig::default() };
        let mut opt = Optimizer::new(&cfg, &params);
        opt.step(&params, 0.5);
        let want = 1.0 - 0.5 * 0.1;
        assert_eq!(p.to_vec(), vec![2.0 * want, -4.0 * want]);

        // And identity when decay is zero.
        let q = Tensor::new(vec![1.25, 3.5], &[2]).tracked();
        let params = vec![("q".to_string(), q.clone())];
        let mut opt = Optimizer::new(&TrainConfig { weight_decay: 0.0, ..TrainConfig::default() }, &params);
        opt.step(&params, 0.5);
        assert_eq!(q.to_vec(), vec![1.25, 3.5]);
    }

    #[test]
    fn gradient_clipping_caps_global_norm() {
        let a = Tensor::new(vec![3.0, 0.0], &[2]).tracked();
        let b = Tensor::new(vec![0.0, 4.0], &[2]).tracked();
        a.mul(&a).sum_all().add(&b.mul(&b).sum_all()).backward();
        let params = vec![("a".to_string(), a.clone()), ("b".to_string(), b.clone())];
        let pre = Optimizer::clip_gradients(&params, 1.0);
        assert!((pre - 10.0).abs() < 1e-12, "pre-clip norm {pre}"); // |(6,0,0,8)| = 10
        let mut sq = 0.0;
        for (_, p) in &params {
            for g in p.grad_vec() {
                sq += g * g;
            }
        }
        assert!((sq.sqrt() - 1.0).abs() < 1e-9, "post-clip norm {}", sq.sqrt());
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let s = Schedule::Cosine;
        assert!((s.lr_at(1.0, 0, 100) - 1.0).abs() < 1e-12);
        assert!(s.lr_at(1.0, 99, 100) < 0.01);
        assert_eq!(Schedule::Constant.lr_at(0.3, 57, 100), 0.3);
    }

    #[test]
    fn evaluate_counts_and_identities() {
        let (synth, model_cfg) = tiny_setup(3);
        let data = make_dataset(&synth).unwrap();
        let mut rng = Rng::new(1);
        let model = DarkTransformer::init(&model_cfg, &mut rng);
        let eval = evaluate(&model, &data.test_target).unwrap();

        // accuracy == trace(confusion) / Σ confusion
        let trace: usize = (0..3).map(|i| eval.confusion[i][i]).sum();
        let total: usize = eval.confusion.iter().flatten().sum();
        assert_eq!(total, data.test_target.len());
        assert!((eval.top1 - trace as f64 / total as f64).abs() < 1e-12);

        // naive recount over stored predictions
        let recount = eval
            .predictions
            .iter()
            .zip(&data.test_target)
            .filter(|(p, c)| **p == c.label)
            .count();
        assert_eq!(recount, trace);

        // rows sum to per-class test counts
        for row in &eval.confusion {
            assert_eq!(row.iter().sum::<usize>(), synth.test_clips_per_class);
        }

        assert!(eval.top5.is_none(), "top-5 suppressed for K <= 5");
        assert!(matches!(evaluate(&model, &[]), Err(Error::EmptySplit)));
    }

    #[test]
    fn top5_reported_and_dominates_top1_for_k8() {
        let (synth, model_cfg) = tiny_setup(8);
        let data = make_dataset(&synth).unwrap();
        let mut rng = Rng::new(2);
        let model = DarkTransformer::init(&model_cfg, &mut rng);
        let eval = evaluate(&model, &data.test_source).unwrap();
        let top5 = eval.top5.expect("K = 8 reports top-5");
        assert!(top5 >= eval.top1);
    }

    #[test]
    fn constant_prediction_scores_class_frequency() {
        let (synth, model_cfg) = tiny_setup(3);
        let data = make_dataset(&synth).unwrap();
        let mut rng = Rng::new(3);
        let model = DarkTransformer::init(&model_cfg, &mut rng);
        // Force constant prediction of class 1 via the classifier bias.
        model.classifier_b.set_data(&[0.0, 50.0, 0.0]);
        let eval = evaluate(&model, &data.test_target).unwrap();
        assert!((eval.top1 - 1.0 / 3.0).abs() < 1e-12, "balanced split, constant class 1");
        for (i, row) in eval.confusion.iter().enumerate() {
            assert_eq!(row[1], synth.test_clips_per_class, "row {i} concentrated in column 1");
        }
    }

    #[test]
    fn single_batch_overfit_reduces_loss() {
        let (synth, model_cfg) = tiny_setup(2);
        let synth = SynthConfig { train_pairs_per_class: 1, ..synth };
        let data = make_dataset(&synth).unwrap();
        let mut rng = Rng::new(4);
        let model = DarkTransformer::init(&model_cfg, &mut rng);
        let cfg = TrainConfig { epochs: 5, ..tiny_train_cfg(5) };
        let records = train(&model, &data, &cfg).unwrap();
        let first = records.first().unwrap().loss_total;
        let last = records.last().unwrap().loss_total;
        assert!(last < first, "loss should fall on a 2-pair overfit: {first} -> {last}");
    }

    #[test]
    fn same_seed_identical_metrics() {
        let (synth, model_cfg) = tiny_setup(2);
        let data = make_dataset(&synth).unwrap();
        let run = || {
            let mut rng = Rng::new(5);
            let model = DarkTransformer::init(&model_cfg, &mut rng);
            let records = train(&model, &data, &tiny_train_cfg(2)).unwrap();
            metrics_to_csv(&records)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn label_permutation_permutes_confusion() {
        let (synth, model_cfg) = tiny_setup(3);
        let data = make_dataset(&synth).unwrap();
        let perm = [2usize, 0, 1];

        let mut permuted = data.clone();
        for p in &mut permuted.train {
            p.label = perm[p.label];
            p.source.label = perm[p.source.label];
            p.target.label = perm[p.target.label];
        }
        for c in permuted.test_source.iter_mut().chain(permuted.test_target.iter_mut()) {
            c.label = perm[c.label];
        }

        let run = |d: &Dataset| {
            let mut rng = Rng::new(6);
            let model = DarkTransformer::init(&model_cfg, &mut rng);
            let records = train(&model, d, &tiny_train_cfg(2)).unwrap();
            records.last().unwrap().confusion_target.clone()
        };
        let base = run(&data);
        let shuffled = run(&permuted);
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(
                    base[i][j], shuffled[perm[i]][perm[j]],
                    "confusion must permute with labels at ({i},{j})"
                );
            }
        }
    }

    #[test]
    fn repair_keeps_classes_aligned() {
        let (synth, _) = tiny_setup(3);
        let synth = SynthConfig { train_pairs_per_class: 5, ..synth };
        let data = make_dataset(&synth).unwrap();
        let mut rng = Rng::new(7);
        let repaired = repair_pairs(&data.train, 3, &mut rng);
        assert_eq!(repaired.len(), data.train.len());
        for p in &repaired {
            assert_eq!(p.source.label, p.label);
            assert_eq!(p.target.label, p.label);
        }
    }

    #[test]
    fn ablate_emits_one_row_per_cell_with_cost_ordering() {
        let (synth, model_cfg) = tiny_setup(2);
        let train_cfg = tiny_train_cfg(1);
        let cells: Vec<AblationSpec> = [AttentionMode::Spatial, AttentionMode::Temporal, AttentionMode::SpaceTime]
            .into_iter()
            .map(|mode| AblationSpec {
                label: format!("mode={}", mode.as_str()),
                synth: synth.clone(),
                model: ModelConfig { attention_mode: mode, ..model_cfg.clone() },
                train: train_cfg.clone(),
            })
            .collect();
        let rows = ablate(&cells).unwrap();
        assert_eq!(rows.len(), 3);
        let cost = |m: AttentionMode| {
            rows.iter().find(|r| r.attention_mode == m).unwrap().score_pairs_forward
        };
        assert!(cost(AttentionMode::Spatial) < cost(AttentionMode::SpaceTime));
        assert!(cost(AttentionMode::Temporal) < cost(AttentionMode::SpaceTime));
        let csv = ablation_to_csv(&rows);
        assert_eq!(csv.lines().count(), 4);
    }

    #[test]
    fn nonfinite_loss_aborts_with_step_diagnostic() {
        let (synth, model_cfg) = tiny_setup(2);
        let data = make_dataset(&synth).unwrap();
        let mut rng = Rng::new(8);
        let model = DarkTransformer::init(&model_cfg, &mut rng);
        // A divergent learning rate with SGD reliably overflows.
        let cfg = TrainConfig {
            optimizer: OptimizerKind::Sgd,
            lr: 1e18,
            clip_norm: 0.0,
            epochs: 3,
            ..tiny_train_cfg(3)
        };
        match train(&model, &data, &cfg) {
            Err(Error::NonFiniteLoss { .. }) => {}
            other => panic!("expected NonFiniteLoss, got {other:?}"),
        }
    }

    #[test]
    fn threaded_evaluation_matches_serial() {
        let (synth, model_cfg) = tiny_setup(3);
        let data = make_dataset(&synth).unwrap();
        let mut rng = Rng::new(9);
        let model = DarkTransformer::init(&model_cfg, &mut rng);
        model.classifier_w.set_data(&Tensor::randn(&[8, 3], 0.4, &mut rng).to_vec());
        let serial = evaluate(&model, &data.test_target).unwrap();
        std::env::set_var("DKTF_THREADS", "3");
        let threaded = evaluate(&model, &data.test_target).unwrap();
        std::env::remove_var("DKTF_THREADS");
        assert_eq!(serial.predictions, threaded.predictions);
        assert_eq!(serial.confusion, threaded.confusion);
    }

    #[test]
    fn domain_tags_do_not_leak_into_inference() {
        // infer() takes exactly one clip; flipping its domain tag must not
        // change anything.
        let (_, model_cfg) = tiny_setup(2);
        let mut rng = Rng::new(10);
        let model = DarkTransformer::init(&model_cfg, &mut rng);
        let mut clip = VideoClip::random(&model_cfg.spec, 0, Domain::Target, &mut rng);
        let a = model.infer(&clip).unwrap().probabilities;
        clip.domain = Domain::Source;
        let b = model.infer(&clip).unwrap().probabilities;
        assert_eq!(a, b);
    }
}
