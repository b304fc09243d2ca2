//! Multi-head attention kernels: divided temporal and spatial
//! self-attention over the token grid, and full cross-attention between two
//! token streams.
//!
//! Token layout comes from the tokenizer: index 0 is the class token, patch
//! (s, t) sits at `1 + t·M + s`. The divided kernels exploit that layout
//! with reshapes instead of gathers:
//!
//! - temporal: each patch query (s, t) attends to `{(s, t′) : t′ = 1..N}` —
//!   the same spatial slot across frames. The class token is not updated by
//!   this pass (its output row is zero, so a residual add leaves it
//!   unchanged).
//! - spatial: each patch query (s, t) attends to `{(s′, t) : s′ = 1..M}`
//!   plus the class token; the class query attends to all `1 + M·N` tokens.
//!
//! So within one layer the class token attends to everything and is
//! attended to by everything, while the per-layer score count stays at
//! `M·N·(M+N) + 2·M·N + 1` versus `(1 + M·N)²` for joint attention.
//!
//! In the time-only ablation the spatial pass is gone, so the global class
//! query moves into the temporal pass (`ClsHandling::Global`) to keep the
//! classifier readout connected.
//!
//! A thread-local counter tracks how many query–key pairs each kernel
//! scores (independent of head count); tests and the ablation table use it
//! to verify the complexity claims.

use std::cell::Cell;

use crate::tensor::Tensor;

/// Projection weights for one attention application. `wq`/`wk`/`wv` may be
/// handle-shared between the temporal, spatial and cross passes of a block;
/// the output projection `wo` is per-pass.
pub struct AttentionParams {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub heads: usize,
}

impl AttentionParams {
    pub fn head_dim(&self) -> usize {
        let d = self.wq.shape()[0];
        assert_eq!(d % self.heads, 0, "D = {d} not divisible by heads = {}", self.heads);
        d / self.heads
    }
}

/// How a kernel treats the class token as a query.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClsHandling {
    /// Class token row passes through unchanged (zero attention output).
    Skip,
    /// Class query attends over all tokens.
    Global,
}

thread_local! {
    static SCORE_COUNT: Cell<u64> = const { Cell::new(0) };
}

/// Resets the thread-local query–key pair counter.
pub fn reset_score_count() {
    SCORE_COUNT.with(|c| c.set(0));
}

/// Query–key pairs scored on this thread since the last reset. Head count
/// does not multiply the tally: a pair is counted once per attention
/// application.
pub fn score_count() -> u64 {
    SCORE_COUNT.with(|c| c.get())
}

fn count_scores(n: u64) {
    SCORE_COUNT.with(|c| c.set(c.get() + n));
}

/// Per-query key sets. An empty set means the token passes through the
/// kernel unchanged instead of attending.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    pub keys: Vec<Vec<usize>>,
}

impl AttentionMask {
    pub fn score_pairs(&self) -> u64 {
        self.keys.iter().map(|k| k.len() as u64).sum()
    }
}

/// Mask realized by [`attend_time`].
pub fn temporal_mask(m: usize, n: usize, cls: ClsHandling) -> AttentionMask {
    let t_len = 1 + m * n;
    let mut keys = vec![Vec::new(); t_len];
    if cls == ClsHandling::Global {
        keys[0] = (0..t_len).collect();
    }
    for t in 0..n {
        for s in 0..m {
            keys[1 + t * m + s] = (0..n).map(|tp| 1 + tp * m + s).collect();
        }
    }
    AttentionMask { keys }
}

/// Mask realized by [`attend_space`].
pub fn spatial_mask(m: usize, n: usize) -> AttentionMask {
    let t_len = 1 + m * n;
    let mut keys = vec![Vec::new(); t_len];
    keys[0] = (0..t_len).collect();
    for t in 0..n {
        for s in 0..m {
            let mut group: Vec<usize> = (0..m).map(|sp| 1 + t * m + sp).collect();
            group.push(0);
            keys[1 + t * m + s] = group;
        }
    }
    AttentionMask { keys }
}

/// Per-head Q/K/V projections: `[T, D]` → three `[h, T, D/h]` tensors.
pub fn qkv(z: &Tensor, params: &AttentionParams) -> (Tensor, Tensor, Tensor) {
    let t_len = z.shape()[0];
    let h = params.heads;
    let dh = params.head_dim();
    let proj = |w: &Tensor| z.matmul(w).reshape(&[t_len, h, dh]).permute(&[1, 0, 2]);
    (proj(&params.wq), proj(&params.wk), proj(&params.wv))
}

/// Attention weight capture for export: one dense `T×T` row-stochastic
/// matrix per head (rows without keys are left as zeros).
pub type HeadMaps = Vec<Vec<f64>>;

fn scaled_scores(q: &Tensor, k: &Tensor, dh: usize) -> Tensor {
    let rank = k.shape().len();
    q.matmul(&k.transpose(rank - 2, rank - 1)).scale(1.0 / (dh as f64).sqrt())
}

/// Splits patch-token projections into temporal groups: `[h, MN, Dh]` →
/// `[h, M, N, Dh]` (group = same spatial slot across frames).
fn group_by_slot(x: &Tensor, m: usize, n: usize, h: usize, dh: usize) -> Tensor {
    x.reshape(&[h, n, m, dh]).transpose(1, 2)
}

/// Divided temporal self-attention. See the module docs for the exact key
/// groups; `cls` picks the class-query behavior.
pub fn attend_time(z: &Tensor, params: &AttentionParams, m: usize, n: usize, cls: ClsHandling) -> Tensor {
    let t_len = z.shape()[0];
    let d = z.shape()[1];
    assert_eq!(t_len, 1 + m * n, "attend_time: layout mismatch, {t_len} tokens for M={m} N={n}");
    let h = params.heads;
    let dh = params.head_dim();

    let zp = z.narrow(0, 1, m * n);
    let (q, k, v) = qkv(&zp, params); // [h, MN, Dh]
    let qg = group_by_slot(&q, m, n, h, dh); // [h, M, N, Dh]
    let kg = group_by_slot(&k, m, n, h, dh);
    let vg = group_by_slot(&v, m, n, h, dh);

    count_scores((m * n * n) as u64);
    let weights = scaled_scores(&qg, &kg, dh).softmax(3); // [h, M, N, N]
    let out = weights.matmul(&vg); // [h, M, N, Dh]
    let patches = out.permute(&[2, 1, 0, 3]).reshape(&[m * n, d]);

    let cls_row = match cls {
        ClsHandling::Skip => Tensor::zeros(&[1, d]),
        ClsHandling::Global => {
            let (qf, kf, vf) = qkv(z, params); // [h, T, Dh]
            let q_cls = qf.narrow(1, 0, 1); // [h, 1, Dh]
            count_scores(t_len as u64);
            let w = scaled_scores(&q_cls, &kf, dh).softmax(2); // [h, 1, T]
            w.matmul(&vf).permute(&[1, 0, 2]).reshape(&[1, d])
        }
    };
    Tensor::concat(&[&cls_row, &patches], 0).matmul(&params.wo)
}

/// Divided spatial self-attention: frame-local groups plus the class token
/// as an extra key; the class query attends globally. Optionally captures
/// per-head dense weight matrices.
pub fn attend_space(
    z: &Tensor,
    params: &AttentionParams,
    m: usize,
    n: usize,
    mut record: Option<&mut HeadMaps>,
) -> Tensor {
    let t_len = z.shape()[0];
    let d = z.shape()[1];
    assert_eq!(t_len, 1 + m * n, "attend_space: layout mismatch, {t_len} tokens for M={m} N={n}");
    let h = params.heads;
    let dh = params.head_dim();

    let (qf, kf, vf) = qkv(z, params); // [h, T, Dh]
    let split = |x: &Tensor| {
        let pat = x.narrow(1, 1, m * n).reshape(&[h, n, m, dh]);
        let cls = x.narrow(1, 0, 1).reshape(&[h, 1, 1, dh]).expand(1, n);
        (pat, cls)
    };
    let (qp, _) = split(&qf);
    let (kp, kc) = split(&kf);
    let (vp, vc) = split(&vf);
    let keys = Tensor::concat(&[&kp, &kc], 2); // [h, N, M+1, Dh]
    let vals = Tensor::concat(&[&vp, &vc], 2);

    count_scores((m * n * (m + 1)) as u64);
    let weights = scaled_scores(&qp, &keys, dh).softmax(3); // [h, N, M, M+1]
    let patches = weights.matmul(&vals).permute(&[1, 2, 0, 3]).reshape(&[m * n, d]);

    let q_cls = qf.narrow(1, 0, 1);
    count_scores(t_len as u64);
    let cls_weights = scaled_scores(&q_cls, &kf, dh).softmax(2); // [h, 1, T]
    let cls_row = cls_weights.matmul(&vf).permute(&[1, 0, 2]).reshape(&[1, d]);

    if let Some(maps) = record.as_deref_mut() {
        *maps = vec![vec![0.0; t_len * t_len]; h];
        let wd = weights.data();
        let cd = cls_weights.data();
        for head in 0..h {
            let map = &mut maps[head];
            for t in 0..n {
                for s in 0..m {
                    let qi = 1 + t * m + s;
                    for j in 0..=m {
                        let ki = if j == m { 0 } else { 1 + t * m + j };
                        map[qi * t_len + ki] = wd[((head * n + t) * m + s) * (m + 1) + j];
                    }
                }
            }
            map[..t_len].copy_from_slice(&cd[head * t_len..(head + 1) * t_len]);
        }
    }

    Tensor::concat(&[&cls_row, &patches], 0).matmul(&params.wo)
}

/// Full cross-attention: queries from `z_q`, keys/values from `z_kv`, every
/// token attending to every token.
pub fn attend_cross(
    z_q: &Tensor,
    z_kv: &Tensor,
    params: &AttentionParams,
    mut record: Option<&mut HeadMaps>,
) -> Tensor {
    assert_eq!(
        z_q.shape(),
        z_kv.shape(),
        "attend_cross: sequence shapes differ, {:?} vs {:?}",
        z_q.shape(),
        z_kv.shape()
    );
    let t_len = z_q.shape()[0];
    let d = z_q.shape()[1];
    let h = params.heads;
    let dh = params.head_dim();

    let proj = |z: &Tensor, w: &Tensor| z.matmul(w).reshape(&[t_len, h, dh]).permute(&[1, 0, 2]);
    let q = proj(z_q, &params.wq);
    let k = proj(z_kv, &params.wk);
    let v = proj(z_kv, &params.wv);

    count_scores((t_len * t_len) as u64);
    let weights = scaled_scores(&q, &k, dh).softmax(2); // [h, T, T]

    if let Some(maps) = record.as_deref_mut() {
        let wd = weights.data();
        *maps = (0..h)
            .map(|head| wd[head * t_len * t_len..(head + 1) * t_len * t_len].to_vec())
            .collect();
    }

    weights.matmul(&v).permute(&[1, 0, 2]).reshape(&[t_len, d]).matmul(&params.wo)
}

/// Query–key pairs a full joint self-attention over `1 + M·N` tokens would
/// score; the reference point for the divided kernels' savings.
pub fn joint_score_pairs(m: usize, n: usize) -> u64 {
    let t = (1 + m * n) as u64;
    t * t
}

/// Pairs scored by one divided layer (temporal + spatial pass).
pub fn divided_score_pairs(m: usize, n: usize) -> u64 {
    temporal_mask(m, n, ClsHandling::Skip).score_pairs() + spatial_mask(m, n).score_pairs()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn eye(d: usize) -> Tensor {
        let mut v = vec![0.0; d * d];
        for i in 0..d {
            v[i * d + i] = 1.0;
        }
        Tensor::new(v, &[d, d])
    }

    fn random_params(d: usize, heads: usize, rng: &mut Rng) -> AttentionParams {
        AttentionParams {
            wq: Tensor::randn(&[d, d], 0.5, rng),
            wk: Tensor::randn(&[d, d], 0.5, rng),
            wv: Tensor::randn(&[d, d], 0.5, rng),
            wo: Tensor::randn(&[d, d], 0.5, rng),
            heads,
        }
    }

    /// Independent naive oracle: per-head attention restricted to an
    /// explicit mask, written with plain loops.
    fn masked_attention_oracle(
        z: &[f64],
        t_len: usize,
        d: usize,
        p: &AttentionParams,
        mask: &AttentionMask,
    ) -> Vec<f64> {
        let h = p.heads;
        let dh = d / h;
        let (wq, wk, wv, wo) = (p.wq.to_vec(), p.wk.to_vec(), p.wv.to_vec(), p.wo.to_vec());
        let project = |w: &[f64]| -> Vec<f64> {
            let mut out = vec![0.0; t_len * d];
            for i in 0..t_len {
                for j in 0..d {
                    let mut acc = 0.0;
                    for k in 0..d {
                        acc += z[i * d + k] * w[k * d + j];
                    }
                    out[i * d + j] = acc;
                }
            }
            out
        };
        let (q, k, v) = (project(&wq), project(&wk), project(&wv));
        let mut pre = vec![0.0; t_len * d];
        for head in 0..h {
            let cols = head * dh..(head + 1) * dh;
            for qi in 0..t_len {
                let keys = &mask.keys[qi];
                if keys.is_empty() {
                    continue;
                }
                let scores: Vec<f64> = keys
                    .iter()
                    .map(|&ki| {
                        let mut s = 0.0;
                        for c in cols.clone() {
                            s += q[qi * d + c] * k[ki * d + c];
                        }
                        s / (dh as f64).sqrt()
                    })
                    .collect();
                let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
                let total: f64 = exps.iter().sum();
                for (w, &ki) in exps.iter().zip(keys) {
                    for c in cols.clone() {
                        pre[qi * d + c] += w / total * v[ki * d + c];
                    }
                }
            }
        }
        let mut out = vec![0.0; t_len * d];
        for i in 0..t_len {
            for j in 0..d {
                let mut acc = 0.0;
                for c in 0..d {
                    acc += pre[i * d + c] * wo[c * d + j];
                }
                out[i * d + j] = acc;
            }
        }
        out
    }

    fn assert_close(a: &[f64], b: &[f64], tol: f64, what: &str) {
        assert_eq!(a.len(), b.len(), "{what}: length");
        for (i, (x, y)) in a.iter().zip(b).enumerate() {
            assert!((x - y).abs() <= tol, "{what}[{i}]: {x} vs {y}");
        }
    }

    #[test]
    fn qkv_identity_single_head() {
        let d = 4;
        let mut rng = Rng::new(1);
        let z = Tensor::randn(&[3, d], 1.0, &mut rng);
        let p = AttentionParams { wq: eye(d), wk: eye(d), wv: eye(d), wo: eye(d), heads: 1 };
        let (q, _, _) = qkv(&z, &p);
        assert_eq!(q.shape(), &[1, 3, 4]);
        assert_close(&q.to_vec(), &z.to_vec(), 0.0, "identity q");
    }

    #[test]
    fn qkv_zero_input() {
        let mut rng = Rng::new(2);
        let p = random_params(6, 2, &mut rng);
        let (q, k, v) = qkv(&Tensor::zeros(&[5, 6]), &p);
        for t in [q, k, v] {
            assert!(t.to_vec().iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn qkv_matches_per_head_slices_of_full_matmul() {
        let (t_len, d, h) = (5, 6, 2);
        let dh = d / h;
        let mut rng = Rng::new(3);
        let z = Tensor::randn(&[t_len, d], 1.0, &mut rng);
        let p = random_params(d, h, &mut rng);
        let (q, _, _) = qkv(&z, &p);
        let full = z.matmul(&p.wq).to_vec(); // [T, D]
        let qd = q.to_vec(); // [h, T, Dh]
        for head in 0..h {
            for t in 0..t_len {
                for c in 0..dh {
                    let got = qd[(head * t_len + t) * dh + c];
                    let want = full[t * d + head * dh + c];
                    assert_eq!(got.to_bits(), want.to_bits());
                }
            }
        }
    }

    #[test]
    fn attend_time_single_frame_is_self_only() {
        // N=1: every patch's temporal group is just itself, so with V and
        // the output projection both identity the patch rows reproduce z.
        let (m, n, d) = (4, 1, 4);
        let mut rng = Rng::new(4);
        let z = Tensor::randn(&[1 + m * n, d], 1.0, &mut rng);
        let p = AttentionParams { wq: eye(d), wk: eye(d), wv: eye(d), wo: eye(d), heads: 2 };
        let out = attend_time(&z, &p, m, n, ClsHandling::Skip);
        let (zo, oo) = (z.to_vec(), out.to_vec());
        assert_close(&oo[d..], &zo[d..], 1e-12, "self rows");
        assert!(oo[..d].iter().all(|&x| x == 0.0), "cls row untouched");
    }

    #[test]
    fn attend_uniform_values_yield_that_value() {
        // All rows of z equal ⇒ all value vectors equal v ⇒ any convex
        // attention combination returns v.
        let (m, n, d) = (2, 3, 4);
        let t_len = 1 + m * n;
        let row = [0.3, -0.7, 1.1, 0.25];
        let z = Tensor::new(row.iter().cycle().take(t_len * d).cloned().collect(), &[t_len, d]);
        let mut rng = Rng::new(5);
        let mut p = random_params(d, 2, &mut rng);
        p.wv = eye(d);
        p.wo = eye(d);

        let time = attend_time(&z, &p, m, n, ClsHandling::Skip);
        assert_close(&time.to_vec()[d..], &z.to_vec()[d..], 1e-12, "time");

        let space = attend_space(&z, &p, m, n, None);
        assert_close(&space.to_vec(), &z.to_vec(), 1e-12, "space");

        let cross = attend_cross(&z, &z, &p, None);
        assert_close(&cross.to_vec(), &z.to_vec(), 1e-12, "cross");
    }

    #[test]
    fn divided_kernels_match_masked_oracle() {
        let (m, n, d, h) = (4, 3, 8, 2);
        let t_len = 1 + m * n;
        for seed in 0..5 {
            let mut rng = Rng::new(100 + seed);
            let z = Tensor::randn(&[t_len, d], 1.0, &mut rng);
            let p = random_params(d, h, &mut rng);

            let got = attend_time(&z, &p, m, n, ClsHandling::Skip);
            let want =
                masked_attention_oracle(&z.to_vec(), t_len, d, &p, &temporal_mask(m, n, ClsHandling::Skip));
            assert_close(&got.to_vec(), &want, 1e-10, "time vs oracle");

            let got = attend_time(&z, &p, m, n, ClsHandling::Global);
            let want = masked_attention_oracle(
                &z.to_vec(),
                t_len,
                d,
                &p,
                &temporal_mask(m, n, ClsHandling::Global),
            );
            assert_close(&got.to_vec(), &want, 1e-10, "time global-cls vs oracle");

            let got = attend_space(&z, &p, m, n, None);
            let want = masked_attention_oracle(&z.to_vec(), t_len, d, &p, &spatial_mask(m, n));
            assert_close(&got.to_vec(), &want, 1e-10, "space vs oracle");
        }
    }

    #[test]
    fn spatial_degenerate_single_patch() {
        // M=1: each patch group degenerates to {itself, cls}.
        let mask = spatial_mask(1, 3);
        for t in 0..3 {
            assert_eq!(mask.keys[1 + t], vec![1 + t, 0]);
        }
        assert_eq!(mask.keys[0].len(), 4);
    }

    #[test]
    fn temporal_mask_single_frame() {
        // N=1: each patch's group is itself alone; cls passes through.
        let mask = temporal_mask(3, 1, ClsHandling::Skip);
        assert!(mask.keys[0].is_empty());
        for s in 0..3 {
            assert_eq!(mask.keys[1 + s], vec![1 + s]);
        }
    }

    #[test]
    fn spatial_attention_is_frame_permutation_equivariant() {
        let (m, n, d, h) = (3, 4, 6, 2);
        let t_len = 1 + m * n;
        let mut rng = Rng::new(6);
        let z = Tensor::randn(&[t_len, d], 1.0, &mut rng);
        let p = random_params(d, h, &mut rng);

        let perm = [2usize, 0, 3, 1]; // frame t of permuted input = frame perm[t] of original
        let mut idx = vec![0usize];
        for t in 0..n {
            for s in 0..m {
                idx.push(1 + perm[t] * m + s);
            }
        }
        let z_perm = z.index_select(0, &idx);

        let base = attend_space(&z, &p, m, n, None).to_vec();
        let permuted = attend_space(&z_perm, &p, m, n, None).to_vec();

        // cls row is invariant; patch rows permute along with their frame.
        assert_close(&permuted[..d], &base[..d], 1e-12, "cls row");
        for t in 0..n {
            for s in 0..m {
                let src = 1 + perm[t] * m + s;
                let dst = 1 + t * m + s;
                assert_close(
                    &permuted[dst * d..(dst + 1) * d],
                    &base[src * d..(src + 1) * d],
                    1e-12,
                    "patch row",
                );
            }
        }
    }

    #[test]
    fn cross_attention_self_identity() {
        let (t_len, d, h) = (7, 8, 2);
        let mut rng = Rng::new(7);
        let z = Tensor::randn(&[t_len, d], 1.0, &mut rng);
        let p = random_params(d, h, &mut rng);
        let got = attend_cross(&z, &z, &p, None);
        let full = AttentionMask { keys: vec![(0..t_len).collect(); t_len] };
        let want = masked_attention_oracle(&z.to_vec(), t_len, d, &p, &full);
        assert_close(&got.to_vec(), &want, 1e-12, "cross(z,z) vs full self-attention");
    }

    #[test]
    fn cross_attention_matches_two_loop_oracle() {
        // Distinct q and kv streams against a direct per-query/per-key oracle.
        let (t_len, d, h) = (5, 6, 3);
        let mut rng = Rng::new(8);
        let zq = Tensor::randn(&[t_len, d], 1.0, &mut rng);
        let zkv = Tensor::randn(&[t_len, d], 1.0, &mut rng);
        let p = random_params(d, h, &mut rng);
        let got = attend_cross(&zq, &zkv, &p, None).to_vec();

        // Oracle: project both streams, loop over queries and keys.
        let dh = d / h;
        let (wq, wk, wv, wo) = (p.wq.to_vec(), p.wk.to_vec(), p.wv.to_vec(), p.wo.to_vec());
        let project = |z: &Tensor, w: &[f64]| -> Vec<f64> {
            let zd = z.to_vec();
            let mut out = vec![0.0; t_len * d];
            for i in 0..t_len {
                for j in 0..d {
                    for k in 0..d {
                        out[i * d + j] += zd[i * d + k] * w[k * d + j];
                    }
                }
            }
            out
        };
        let (q, k, v) = (project(&zq, &wq), project(&zkv, &wk), project(&zkv, &wv));
        let mut pre = vec![0.0; t_len * d];
        for head in 0..h {
            for qi in 0..t_len {
                let mut scores = vec![0.0; t_len];
                for ki in 0..t_len {
                    for c in head * dh..(head + 1) * dh {
                        scores[ki] += q[qi * d + c] * k[ki * d + c];
                    }
                    scores[ki] /= (dh as f64).sqrt();
                }
                let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
                let total: f64 = exps.iter().sum();
                for ki in 0..t_len {
                    for c in head * dh..(head + 1) * dh {
                        pre[qi * d + c] += exps[ki] / total * v[ki * d + c];
                    }
                }
            }
        }
        let mut want = vec![0.0; t_len * d];
        for i in 0..t_len {
            for j in 0..d {
                for c in 0..d {
                    want[i * d + j] += pre[i * d + c] * wo[c * d + j];
                }
            }
        }
        assert_close(&got, &want, 1e-10, "cross vs naive oracle");
    }

    #[test]
    fn score_counter_matches_mask_cardinality() {
        let (m, n, d, h) = (4, 3, 8, 2);
        let t_len = 1 + m * n;
        let mut rng = Rng::new(9);
        let z = Tensor::randn(&[t_len, d], 1.0, &mut rng);
        let p = random_params(d, h, &mut rng);

        reset_score_count();
        let _ = attend_time(&z, &p, m, n, ClsHandling::Skip);
        assert_eq!(score_count(), temporal_mask(m, n, ClsHandling::Skip).score_pairs());

        reset_score_count();
        let _ = attend_space(&z, &p, m, n, None);
        assert_eq!(score_count(), spatial_mask(m, n).score_pairs());

        reset_score_count();
        let _ = attend_cross(&z, &z, &p, None);
        assert_eq!(score_count(), joint_score_pairs(m, n));
    }

    #[test]
    fn divided_layer_cost_closed_form_and_beats_joint() {
        for (m, n) in [(1, 1), (2, 3), (4, 4), (16, 8)] {
            let mn = (m * n) as u64;
            assert_eq!(
                divided_score_pairs(m, n),
                mn * (m + n) as u64 + 2 * mn + 1,
                "closed form at M={m} N={n}"
            );
        }
        assert!(divided_score_pairs(16, 8) < joint_score_pairs(16, 8));
    }

    #[test]
    fn attention_weights_rows_are_stochastic() {
        let (m, n, d, h) = (3, 2, 6, 2);
        let t_len = 1 + m * n;
        let mut rng = Rng::new(10);
        let z = Tensor::randn(&[t_len, d], 1.5, &mut rng);
        let p = random_params(d, h, &mut rng);
        let mut maps = HeadMaps::new();
        let _ = attend_space(&z, &p, m, n, Some(&mut maps));
        assert_eq!(maps.len(), h);
        for map in &maps {
            for qi in 0..t_len {
                let row = &map[qi * t_len..(qi + 1) * t_len];
                assert!(row.iter().all(|&w| w >= 0.0));
                let sum: f64 = row.iter().sum();
                assert!((sum - 1.0).abs() < 1e-6, "row {qi} sums to {sum}");
            }
        }
    }

    #[test]
    fn kernels_pass_gradient_check() {
        let (m, n, d, h) = (2, 2, 4, 2);
        let t_len = 1 + m * n;
        let mut rng = Rng::new(11);
        let z = Tensor::randn(&[t_len, d], 0.8, &mut rng).tracked();
        let zkv = Tensor::randn(&[t_len, d], 0.8, &mut rng).tracked();
        let p = AttentionParams {
            wq: Tensor::randn(&[d, d], 0.5, &mut rng).tracked(),
            wk: Tensor::randn(&[d, d], 0.5, &mut rng).tracked(),
            wv: Tensor::randn(&[d, d], 0.5, &mut rng).tracked(),
            wo: Tensor::randn(&[d, d], 0.5, &mut rng).tracked(),
            heads: h,
        };
        let params =
            [z.clone(), zkv.clone(), p.wq.clone(), p.wk.clone(), p.wv.clone(), p.wo.clone()];
        let report = crate::gradcheck::check_params(&params, &|| {
            let t = attend_time(&z, &p, m, n, ClsHandling::Skip);
            let s = attend_space(&z, &p, m, n, None);
            let c = attend_cross(&z, &zkv, &p, None);
            t.gelu().sum_all().add(&s.gelu().sum_all()).add(&c.gelu().sum_all())
        });
        assert!(report.pass(), "attention gradcheck: {report:?}");
    }
}
