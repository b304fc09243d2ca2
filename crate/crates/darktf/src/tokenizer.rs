//! Clip → token sequence: frame sampling, non-overlapping S×S patch
//! extraction, linear embedding, class token, learned positions.
//!
//! Token layout: index 0 is the class token; patch (s, t) — spatial slot s
//! of frame t — sits at index `1 + t·M + s`. That mapping is load-bearing:
//! the divided-attention kernels recover the (s, t) grid from it by plain
//! reshapes.

use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::video::VideoClip;
use crate::{Error, Result};

/// Geometry of a tokenized clip.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClipSpec {
    /// Frames per sampled clip (N).
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Patch side in pixels (S).
    pub patch: usize,
    /// Temporal sampling stride over the raw video.
    pub stride: usize,
}

impl ClipSpec {
    /// Patches per frame (M).
    pub fn patches_per_frame(&self) -> usize {
        (self.height / self.patch) * (self.width / self.patch)
    }

    /// Flattened patch length (S·S·C).
    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    /// Sequence length including the class token (1 + M·N).
    pub fn token_len(&self) -> usize {
        1 + self.patches_per_frame() * self.frames
    }

    /// Raw frame count the sampling pattern needs: (N−1)·stride + 1.
    pub fn raw_frames_required(&self) -> usize {
        (self.frames - 1) * self.stride + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 {
            return Err(Error::InvalidParameter {
                name: "frames",
                value: 0.0,
                constraint: "N >= 1",
            });
        }
        if self.stride == 0 {
            return Err(Error::InvalidParameter {
                name: "stride",
                value: 0.0,
                constraint: "stride >= 1",
            });
        }
        if self.patch == 0 || self.height % self.patch != 0 || self.width % self.patch != 0 {
            return Err(Error::PatchDivisibility {
                height: self.height,
                width: self.width,
                patch: self.patch,
            });
        }
        Ok(())
    }

    /// Index of patch (s, t) in the token sequence.
    pub fn token_index(&self, s: usize, t: usize) -> usize {
        1 + t * self.patches_per_frame() + s
    }

    /// Inverse of [`ClipSpec::token_index`]; `None` for the class token.
    pub fn patch_of_token(&self, index: usize) -> Option<(usize, usize)> {
        if index == 0 {
            return None;
        }
        let m = self.patches_per_frame();
        let i = index - 1;
        Some((i % m, i / m))
    }
}

/// The embedded sequence for one clip: `[1 + M·N, D]` with the layout
/// documented at module level.
pub struct TokenSequence {
    pub tokens: Tensor,
    pub patches_per_frame: usize,
    pub frames: usize,
}

/// Trainable tokenizer parameters: the patch projection E, the joint
/// spatiotemporal position table P, and the class token.
pub struct TokenizerParams {
    /// `[S·S·C, D]`
    pub embed: Tensor,
    /// `[1 + M·N, D]`, one learned row per sequence slot.
    pub positions: Tensor,
    /// `[D]`
    pub cls: Tensor,
}

impl TokenizerParams {
    pub fn init(spec: &ClipSpec, embed_dim: usize, rng: &mut Rng) -> TokenizerParams {
        TokenizerParams {
            embed: Tensor::randn(&[spec.patch_dim(), embed_dim], 0.02, rng).tracked(),
            positions: Tensor::randn(&[spec.token_len(), embed_dim], 0.02, rng).tracked(),
            cls: Tensor::zeros(&[embed_dim]).tracked(),
        }
    }
}

/// Uniformly samples N frames at indices 0, stride, 2·stride, … from a raw
/// video.
pub fn sample_frames(video: &VideoClip, spec: &ClipSpec) -> Result<VideoClip> {
    let required = spec.raw_frames_required();
    if video.frames < required {
        return Err(Error::VideoTooShort { required, available: video.frames });
    }
    let flen = video.frame_len();
    let mut pixels = Vec::with_capacity(spec.frames * flen);
    for i in 0..spec.frames {
        pixels.extend_from_slice(video.frame(i * spec.stride));
    }
    Ok(VideoClip::new(
        pixels,
        spec.frames,
        video.height,
        video.width,
        video.channels,
        video.label,
        video.domain,
    ))
}

/// Flattens a sampled clip into patch rows: `[N·M, S·S·C]`, with patch
/// (s, t) at row `t·M + s` and the S×S×C block in row-major order. Lossless.
pub fn patchify(clip: &VideoClip, spec: &ClipSpec) -> Result<Tensor> {
    spec.validate()?;
    assert_eq!(clip.frames, spec.frames, "patchify: clip has {} frames, spec {}", clip.frames, spec.frames);
    let s = spec.patch;
    let m = spec.patches_per_frame();
    let grid_w = clip.width / s;
    let pdim = spec.patch_dim();
    let mut data = Vec::with_capacity(clip.frames * m * pdim);
    for t in 0..clip.frames {
        for p in 0..m {
            let (gy, gx) = (p / grid_w, p % grid_w);
            for dy in 0..s {
                for dx in 0..s {
                    for c in 0..clip.channels {
                        data.push(clip.pixel(t, gy * s + dy, gx * s + dx, c));
                    }
                }
            }
        }
    }
    Ok(Tensor::new(data, &[clip.frames * m, pdim]))
}

/// Reassembles frames from patch rows; exact inverse of [`patchify`].
pub fn unpatchify(patches: &Tensor, spec: &ClipSpec) -> VideoClip {
    let s = spec.patch;
    let m = spec.patches_per_frame();
    let grid_w = spec.width / s;
    assert_eq!(patches.shape(), &[spec.frames * m, spec.patch_dim()], "unpatchify shape");
    let mut clip = VideoClip::zeros(spec.frames, spec.height, spec.width, spec.channels);
    let data = patches.to_vec();
    let pdim = spec.patch_dim();
    for t in 0..spec.frames {
        for p in 0..m {
            let (gy, gx) = (p / grid_w, p % grid_w);
            let row = &data[(t * m + p) * pdim..(t * m + p + 1) * pdim];
            let mut i = 0;
            for dy in 0..s {
                for dx in 0..s {
                    for c in 0..spec.channels {
                        *clip.pixel_mut(t, gy * s + dy, gx * s + dx, c) = row[i];
                        i += 1;
                    }
                }
            }
        }
    }
    clip
}

/// Embeds patch rows: token 0 is `z_cls + P[0]`, token i>0 is `v·E + P[i]`.
pub fn embed(patches: &Tensor, params: &TokenizerParams, spec: &ClipSpec) -> TokenSequence {
    let d = params.embed.shape()[1];
    let projected = patches.matmul(&params.embed);
    let cls_row = params.cls.reshape(&[1, d]);
    let tokens = Tensor::concat(&[&cls_row, &projected], 0).add(&params.positions);
    TokenSequence {
        tokens,
        patches_per_frame: spec.patches_per_frame(),
        frames: spec.frames,
    }
}

/// Full pipeline: sample, patchify, embed.
pub fn tokenize(video: &VideoClip, params: &TokenizerParams, spec: &ClipSpec) -> Result<TokenSequence> {
    let sampled = if video.frames == spec.frames && spec.stride == 1 {
        video.clone()
    } else {
        sample_frames(video, spec)?
    };
    let patches = patchify(&sampled, spec)?;
    Ok(embed(&patches, params, spec))
}
