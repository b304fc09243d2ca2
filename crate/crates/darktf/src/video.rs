//! Video clips: dense `[N, H, W, C]` pixel arrays with a label and a domain
//! tag. Pixel values live in `[0, 1]`.

use crate::rng::Rng;
use crate::tokenizer::ClipSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    /// Daytime / visible-light style footage carrying supervision.
    Source,
    /// Low-light footage that inference must handle.
    Target,
}

impl Domain {
    pub fn tag(self) -> &'static str {
        match self {
            Domain::Source => "src",
            Domain::Target => "tgt",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Domain> {
        match tag {
            "src" => Some(Domain::Source),
            "tgt" => Some(Domain::Target),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct VideoClip {
    /// Row-major `[frames, height, width, channels]`.
    pub pixels: Vec<f64>,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub label: usize,
    pub domain: Domain,
}

impl VideoClip {
    pub fn new(
        pixels: Vec<f64>,
        frames: usize,
        height: usize,
        width: usize,
        channels: usize,
        label: usize,
        domain: Domain,
    ) -> VideoClip {
        assert_eq!(pixels.len(), frames * height * width * channels, "pixel count mismatch");
        VideoClip { pixels, frames, height, width, channels, label, domain }
    }

    pub fn zeros(frames: usize, height: usize, width: usize, channels: usize) -> VideoClip {
        VideoClip::new(
            vec![0.0; frames * height * width * channels],
            frames,
            height,
            width,
            channels,
            0,
            Domain::Source,
        )
    }

    /// Uniform noise clip matching a spec; handy for shape and gradient
    /// tests.
    pub fn random(spec: &ClipSpec, label: usize, domain: Domain, rng: &mut Rng) -> VideoClip {
        let n = spec.frames * spec.height * spec.width * spec.channels;
        VideoClip {
            pixels: (0..n).map(|_| rng.uniform()).collect(),
            frames: spec.frames,
            height: spec.height,
            width: spec.width,
            channels: spec.channels,
            label,
            domain,
        }
    }

    pub fn frame_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        let len = self.frame_len();
        &self.pixels[t * len..(t + 1) * len]
    }

    pub fn pixel(&self, t: usize, y: usize, x: usize, c: usize) -> f64 {
        self.pixels[((t * self.height + y) * self.width + x) * self.channels + c]
    }

    pub fn pixel_mut(&mut self, t: usize, y: usize, x: usize, c: usize) -> &mut f64 {
        &mut self.pixels[((t * self.height + y) * self.width + x) * self.channels + c]
    }

    pub fn mean_brightness(&self) -> f64 {
        self.pixels.iter().sum::<f64>() / self.pixels.len() as f64
    }
}
