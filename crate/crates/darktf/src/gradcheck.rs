//! Finite-difference gradient verification.
//!
//! The checker re-runs a loss-building closure with individual parameter
//! entries nudged by ±h and compares the central difference against the
//! analytic gradient from one reverse pass. The relative error metric is
//! `|a − fd| / (|a| + |fd| + 1e-8)`, evaluated elementwise and reported as a
//! maximum with the location of the worst entry.

use std::time::Instant;

use crate::model::{DarkTransformer, ModelConfig};
use crate::rng::Rng;
use crate::synth::ClipPair;
use crate::tensor::Tensor;
use crate::tokenizer::ClipSpec;
use crate::video::VideoClip;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct GradReport {
    pub max_rel_err: f64,
    /// Human-readable location of the worst entry ("param 2 index 14").
    pub worst: String,
    pub checked: usize,
}

impl GradReport {
    pub fn pass(&self) -> bool {
        self.max_rel_err < FD_TOLERANCE
    }
}

/// Checks `∂f/∂p` for every entry of every parameter in `params` against a
/// central finite difference with step [`FD_STEP`]. The closure must rebuild
/// the loss graph from the *current* parameter values on every call.
pub fn check_params(params: &[Tensor], f: &dyn Fn() -> Tensor) -> GradReport {
    for p in params {
        assert!(p.requires_grad(), "gradcheck parameter is not tracked");
        p.zero_grad();
    }
    let loss = f();
    loss.backward();
    let analytic: Vec<Vec<f64>> = params.iter().map(|p| p.grad_vec()).collect();
    for p in params {
        p.zero_grad();
    }

    let mut max_rel_err = 0.0_f64;
    let mut worst = String::from("-");
    let mut checked = 0usize;
    for (pi, p) in params.iter().enumerate() {
        for i in 0..p.numel() {
            p.nudge(i, FD_STEP);
            let plus = f().item();
            p.nudge(i, -2.0 * FD_STEP);
            let minus = f().item();
            p.nudge(i, FD_STEP);
            let fd = (plus - minus) / (2.0 * FD_STEP);
            let a = analytic[pi][i];
            let rel = (a - fd).abs() / (a.abs() + fd.abs() + 1e-8);
            checked += 1;
            if rel > max_rel_err {
                max_rel_err = rel;
                worst = format!("param {pi} index {i} (analytic {a}, fd {fd})");
            }
        }
    }
    GradReport { max_rel_err, worst, checked }
}

/// Assert-style scalar comparison used across test suites.
pub fn check_close(a: f64, b: f64, tol: f64, what: &str) {
    assert!((a - b).abs() <= tol, "{what}: {a} vs {b} (tol {tol})");
}

/// Outcome of the full verification suite run by `darktf gradcheck`.
#[derive(Debug)]
pub struct SuiteReport {
    pub lines: Vec<(String, f64, bool)>,
    pub elapsed_secs: f64,
}

impl SuiteReport {
    pub fn all_pass(&self) -> bool {
        self.lines.iter().all(|(_, _, ok)| *ok)
    }
}

/// Runs finite-difference checks over every tensor primitive and over the
/// full three-branch training loss on a tiny model (M=4, N=3, D=8, h=2,
/// L=2, K=3).
///
/// `corrupt_backward` deliberately mis-scales one backward rule; it exists
/// as a negative control so tests can confirm the suite actually detects
/// broken gradients.
pub fn run_suite(corrupt_backward: bool) -> SuiteReport {
    let start = Instant::now();
    let mut lines = Vec::new();
    let mut push = |name: &str, report: GradReport| {
        lines.push((name.to_string(), report.max_rel_err, report.pass()));
    };

    let mut rng = Rng::new(20_240_001);

    // Primitives, each exercised through a scalar loss.
    {
        let a = Tensor::randn(&[3, 4], 0.8, &mut rng).tracked();
        let b = Tensor::randn(&[4, 3], 0.8, &mut rng).tracked();
        push(
            "matmul",
            check_params(&[a.clone(), b.clone()], &|| {
                let c = a.matmul(&b);
                c.mul(&c).sum_all()
            }),
        );

        let x = Tensor::randn(&[2, 5], 0.9, &mut rng).tracked();
        let w = Tensor::new((0..10).map(|i| 0.1 * i as f64 - 0.4).collect(), &[2, 5]);
        push("softmax", check_params(&[x.clone()], &|| x.softmax(1).mul(&w).sum_all()));
        push(
            "log_softmax",
            check_params(&[x.clone()], &|| x.log_softmax(1).mul(&w).sum_all()),
        );
        push("gelu", check_params(&[x.clone()], &|| x.gelu().sum_all()));
        push("exp", check_params(&[x.clone()], &|| x.exp().mean_all()));
        push(
            "log",
            check_params(&[x.clone()], &|| {
                x.mul(&x).add(&Tensor::full(&[2, 5], 0.5)).log().sum_all()
            }),
        );

        let gain = Tensor::randn(&[5], 0.2, &mut rng)
            .add(&Tensor::full(&[5], 1.0))
            .detach()
            .tracked();
        let bias = Tensor::randn(&[5], 0.2, &mut rng).tracked();
        push(
            "layernorm",
            check_params(&[x.clone(), gain.clone(), bias.clone()], &|| {
                x.layernorm(&gain, &bias, 1e-5).mul(&w).sum_all()
            }),
        );

        push(
            "add_sub_mul_scale",
            check_params(&[a.clone()], &|| {
                let y = if corrupt_backward {
                    // Negative-control fixture: wrong constant in the
                    // backward path via a detached recombination.
                    a.scale(2.0).add(&a.detach())
                } else {
                    a.scale(2.0).add(&a)
                };
                y.sub(&a.mul(&a)).scale(0.5).sum_all()
            }),
        );

        push(
            "reshape_permute",
            check_params(&[a.clone()], &|| {
                let y = a.permute(&[1, 0]).reshape(&[3, 4]);
                y.mul(&y).sum_all()
            }),
        );
        push(
            "narrow_concat_expand",
            check_params(&[a.clone()], &|| {
                let top = a.narrow(0, 0, 1).expand(0, 2);
                let rest = a.narrow(0, 1, 2);
                Tensor::concat(&[&top, &rest], 0).gelu().sum_all()
            }),
        );
        push(
            "index_select",
            check_params(&[a.clone()], &|| {
                a.index_select(0, &[0, 2, 2, 1]).mul(&a.index_select(0, &[1, 1, 0, 2])).sum_all()
            }),
        );
        push(
            "add_bias_pick_mean",
            check_params(&[a.clone(), bias.clone()], &|| {
                a.matmul(&Tensor::full(&[4, 5], 0.3)).add_bias(&bias).gelu().mean_all()
            }),
        );
    }

    // Full model: total training loss on a tiny configuration.
    {
        let cfg = ModelConfig {
            spec: ClipSpec { frames: 3, height: 4, width: 8, channels: 1, patch: 4, stride: 1 },
            embed_dim: 8,
            heads: 2,
            layers: 2,
            mlp_ratio: 2,
            num_classes: 3,
            ..ModelConfig::default()
        };
        let mut mrng = Rng::new(7);
        let model = DarkTransformer::init(&cfg, &mut mrng);
        let mut drng = Rng::new(8);
        let src = VideoClip::random(&cfg.spec, 0, crate::video::Domain::Source, &mut drng);
        let tgt = VideoClip::random(&cfg.spec, 0, crate::video::Domain::Target, &mut drng);
        let pair = ClipPair { source: src, target: tgt, label: 0 };
        let weights = crate::losses::LossWeights::default();
        let params = model.parameters();
        let report = check_params(&params.iter().map(|(_, t)| t.clone()).collect::<Vec<_>>(), &|| {
            let triple = model.forward_triple(&pair).expect("forward_triple");
            crate::losses::total_loss(&triple, pair.label, &weights).expect("total_loss")
        });
        push("total_loss_tiny_model", report);
    }

    SuiteReport { lines, elapsed_secs: start.elapsed().as_secs_f64() }
}
