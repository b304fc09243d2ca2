//! Training objectives: per-branch softmax cross-entropy and the
//! teacher→student distillation term, combined into one weighted total.
//!
//! The bridge (source→target) branch acts as the teacher: its softened
//! class distribution supervises the target branch. The teacher side is
//! detached, so no gradient reaches the bridge through the distillation
//! term.

use crate::model::TripleOutput;
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct LossWeights {
    pub w_src: f64,
    pub w_tgt_ce: f64,
    pub w_bridge: f64,
    pub w_dtl: f64,
    pub temperature: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { w_src: 1.0, w_tgt_ce: 1.0, w_bridge: 1.0, w_dtl: 1.0, temperature: 1.0 }
    }
}

impl LossWeights {
    /// Strict unsupervised adaptation: no direct label signal on the target
    /// branch.
    pub fn strict_uda(mut self) -> Self {
        self.w_tgt_ce = 0.0;
        self
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("w_src", self.w_src),
            ("w_tgt_ce", self.w_tgt_ce),
            ("w_bridge", self.w_bridge),
            ("w_dtl", self.w_dtl),
        ] {
            if !(v >= 0.0) {
                return Err(Error::InvalidParameter { name, value: v, constraint: "weight >= 0" });
            }
        }
        if self.temperature <= 0.0 {
            return Err(Error::InvalidParameter {
                name: "temperature",
                value: self.temperature,
                constraint: "temperature > 0",
            });
        }
        if self.w_src == 0.0 && self.w_tgt_ce == 0.0 && self.w_bridge == 0.0 && self.w_dtl == 0.0 {
            return Err(Error::InvalidParameter {
                name: "loss weights",
                value: 0.0,
                constraint: "at least one weight > 0",
            });
        }
        Ok(())
    }
}

/// `−log softmax(logits)[label]`.
pub fn cross_entropy(logits: &Tensor, label: usize) -> Result<Tensor> {
    let k = logits.numel();
    if label >= k {
        return Err(Error::InvalidClass { class: label, num_classes: k });
    }
    Ok(logits.log_softmax(0).pick(label).neg())
}

/// Soft-label cross-entropy `−Σᵢ pᵢ log qᵢ` with `p = softmax(teacher/τ)`
/// and `q = softmax(student/τ)`. The teacher is treated as a constant.
pub fn distillation_loss(teacher_logits: &Tensor, student_logits: &Tensor, temperature: f64) -> Result<Tensor> {
    assert_eq!(
        teacher_logits.numel(),
        student_logits.numel(),
        "distillation: teacher has {} classes, student {}",
        teacher_logits.numel(),
        student_logits.numel()
    );
    if temperature <= 0.0 {
        return Err(Error::InvalidParameter {
            name: "temperature",
            value: temperature,
            constraint: "temperature > 0",
        });
    }
    let p = teacher_logits.detach().scale(1.0 / temperature).softmax(0);
    let log_q = student_logits.scale(1.0 / temperature).log_softmax(0);
    Ok(p.mul(&log_q).sum_all().neg())
}

/// Weighted sum of the three branch cross-entropies plus the bridge→target
/// distillation term. Terms tied to the bridge vanish when cross-attention
/// is ablated away.
pub fn total_loss(triple: &TripleOutput, label: usize, weights: &LossWeights) -> Result<Tensor> {
    weights.validate()?;
    let mut loss = Tensor::scalar(0.0);
    if weights.w_src > 0.0 {
        loss = loss.add(&cross_entropy(&triple.source.logits, label)?.scale(weights.w_src));
    }
    if weights.w_tgt_ce > 0.0 {
        loss = loss.add(&cross_entropy(&triple.target.logits, label)?.scale(weights.w_tgt_ce));
    }
    if let Some(bridge) = &triple.bridge {
        if weights.w_bridge > 0.0 {
            loss = loss.add(&cross_entropy(&bridge.logits, label)?.scale(weights.w_bridge));
        }
        if weights.w_dtl > 0.0 {
            let dtl = distillation_loss(&bridge.logits, &triple.target.logits, weights.temperature)?;
            loss = loss.add(&dtl.scale(weights.w_dtl));
        }
    }
    Ok(loss)
}

/// The individual loss terms, for metrics reporting. Bridge terms are zero
/// when the bridge is absent.
pub struct LossTerms {
    pub src_ce: f64,
    pub tgt_ce: f64,
    pub bridge_ce: f64,
    pub distillation: f64,
}

pub fn loss_terms(triple: &TripleOutput, label: usize, weights: &LossWeights) -> Result<LossTerms> {
    let src_ce = cross_entropy(&triple.source.logits, label)?.item();
    let tgt_ce = cross_entropy(&triple.target.logits, label)?.item();
    let (bridge_ce, distillation) = match &triple.bridge {
        Some(b) => (
            cross_entropy(&b.logits, label)?.item(),
            distillation_loss(&b.logits, &triple.target.logits, weights.temperature)?.item(),
        ),
        None => (0.0, 0.0),
    };
    Ok(LossTerms { src_ce, tgt_ce, bridge_ce, distillation })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_close;
    use crate::rng::Rng;

    #[test]
    fn uniform_logits_cost_log_k() {
        for k in [2usize, 3, 8] {
            let loss = cross_entropy(&Tensor::zeros(&[k]), 0).unwrap().item();
            check_close(loss, (k as f64).ln(), 1e-12, "uniform CE");
        }
    }

    #[test]
    fn confident_correct_logits_cost_ln1p_exp_margin() {
        // logits [+10, −10], label 0 → ln(1 + e^(−20)), frozen from a
        // 30-digit evaluation.
        let loss = cross_entropy(&Tensor::new(vec![10.0, -10.0], &[2]), 0).unwrap().item();
        check_close(loss, 2.0611536203143807e-9, 1e-22, "−log σ(20)");
    }

    #[test]
    fn cross_entropy_nonnegative_and_label_checked() {
        let mut rng = Rng::new(1);
        for _ in 0..50 {
            let logits = Tensor::randn(&[5], 3.0, &mut rng);
            let l = cross_entropy(&logits, rng.below(5)).unwrap().item();
            assert!(l >= 0.0);
        }
        assert_eq!(
            cross_entropy(&Tensor::zeros(&[3]), 3).unwrap_err(),
            crate::Error::InvalidClass { class: 3, num_classes: 3 }
        );
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot() {
        let logits = Tensor::new(vec![0.5, -1.0, 2.0], &[3]).tracked();
        cross_entropy(&logits, 1).unwrap().backward();
        let probs = Tensor::new(vec![0.5, -1.0, 2.0], &[3]).softmax(0).to_vec();
        let grad = logits.grad_vec();
        for (i, g) in grad.iter().enumerate() {
            let want = probs[i] - if i == 1 { 1.0 } else { 0.0 };
            check_close(*g, want, 1e-12, "∂CE/∂logit");
        }
    }

    #[test]
    fn distillation_matches_direct_formula() {
        let mut rng = Rng::new(2);
        for _ in 0..20 {
            let teacher = Tensor::randn(&[4], 2.0, &mut rng);
            let student = Tensor::randn(&[4], 2.0, &mut rng);
            let tau = 1.0 + rng.uniform() * 3.0;
            let got = distillation_loss(&teacher, &student, tau).unwrap().item();

            // Direct −Σ p log q evaluation.
            let soft = |z: &Tensor| {
                let v: Vec<f64> = z.to_vec().iter().map(|x| x / tau).collect();
                let mx = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = v.iter().map(|x| (x - mx).exp()).collect();
                let s: f64 = e.iter().sum();
                e.into_iter().map(|x| x / s).collect::<Vec<f64>>()
            };
            let p = soft(&teacher);
            let q = soft(&student);
            let want: f64 = -p.iter().zip(&q).map(|(pi, qi)| pi * qi.ln()).sum::<f64>();
            check_close(got, want, 1e-12, "distillation value");
        }
    }

    #[test]
    fn distillation_stationary_at_matching_logits() {
        let logits = vec![0.4, -0.3, 1.2, 0.0];
        let teacher = Tensor::new(logits.clone(), &[4]);
        let student = Tensor::new(logits.clone(), &[4]).tracked();
        let loss = distillation_loss(&teacher, &student, 1.0).unwrap();

        // Value equals the entropy of p.
        let p = teacher.softmax(0).to_vec();
        let entropy: f64 = -p.iter().map(|x| x * x.ln()).sum::<f64>();
        check_close(loss.item(), entropy, 1e-12, "loss = H(p) at q = p");

        loss.backward();
        for g in student.grad_vec() {
            assert!(g.abs() < 1e-12, "student gradient at stationarity: {g}");
        }
    }

    #[test]
    fn one_hot_teacher_reduces_to_cross_entropy() {
        // ±50 teacher logits approximate a one-hot soft label.
        let teacher = Tensor::new(vec![50.0, -50.0, -50.0], &[3]);
        let student = Tensor::new(vec![0.3, 1.0, -0.5], &[3]);
        let dtl = distillation_loss(&teacher, &student, 1.0).unwrap().item();
        let ce = cross_entropy(&student, 0).unwrap().item();
        check_close(dtl, ce, 1e-12, "one-hot distillation vs CE");
    }

    #[test]
    fn teacher_gradient_is_exactly_zero() {
        let teacher = Tensor::new(vec![1.0, 0.0, -1.0], &[3]).tracked();
        let student = Tensor::new(vec![0.2, 0.1, 0.3], &[3]).tracked();
        distillation_loss(&teacher, &student, 2.0).unwrap().backward();
        assert!(teacher.grad_vec().iter().all(|&g| g == 0.0), "teacher must be detached");
        assert!(student.grad_vec().iter().any(|&g| g != 0.0));
    }

    #[test]
    fn weights_validate() {
        assert!(LossWeights::default().validate().is_ok());
        let zero = LossWeights { w_src: 0.0, w_tgt_ce: 0.0, w_bridge: 0.0, w_dtl: 0.0, temperature: 1.0 };
        assert!(zero.validate().is_err());
        let neg = LossWeights { w_src: -1.0, ..LossWeights::default() };
        assert!(neg.validate().is_err());
        let bad_t = LossWeights { temperature: 0.0, ..LossWeights::default() };
        assert!(bad_t.validate().is_err());
        assert_eq!(LossWeights::default().strict_uda().w_tgt_ce, 0.0);
    }
}
