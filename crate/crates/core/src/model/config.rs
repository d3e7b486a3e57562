use crate::error::{Error, Result};
use crate::N_CLASSES;

/// Seconds per scored epoch.
pub const EPOCH_SECONDS: usize = 30;

/// Kernel length of the second convolution in each CNN path.
pub const SECOND_KERNEL: usize = 8;

/// Layer-norm variance floor.
pub const LAYERNORM_EPS: f64 = 1e-5;

/// Architectural hyperparameters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    /// Sampling rate in Hz (must be even).
    pub fs: usize,
    /// Epochs per sequence.
    pub seq_len: usize,
    pub channels: usize,
    /// Samples per epoch; always `30 * fs`.
    pub samples_per_epoch: usize,
    /// Feature width, `heads * head_dim`.
    pub dim: usize,
    /// Pooled tokens across both CNN paths, class token excluded.
    pub tokens: usize,
    pub heads: usize,
    pub head_dim: usize,
    /// Number of stacked blocks in each of the cross and sequential encoders.
    pub depth: usize,
    pub ffn_dim: usize,
    pub n_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            fs: 100,
            seq_len: 20,
            channels: 1,
            samples_per_epoch: 3000,
            dim: 64,
            tokens: 16,
            heads: 8,
            head_dim: 8,
            depth: 3,
            ffn_dim: 128,
            n_classes: N_CLASSES,
        }
    }
}

/// Shape of one CNN path for a given config.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PathGeometry {
    pub kernel: usize,
    pub stride: usize,
    /// Length after the first convolution.
    pub first_len: usize,
    /// Length after the second convolution, before pooling.
    pub second_len: usize,
}

impl ModelConfig {
    /// Small configuration used for desk-scale runs and gradient checks.
    pub fn toy() -> Self {
        Self {
            fs: 10,
            seq_len: 4,
            channels: 1,
            samples_per_epoch: 300,
            dim: 16,
            tokens: 4,
            heads: 4,
            head_dim: 4,
            depth: 1,
            ffn_dim: 32,
            n_classes: N_CLASSES,
        }
    }

    /// Builds a config with `samples_per_epoch` derived from `fs`.
    pub fn with_fs(mut self, fs: usize) -> Self {
        self.fs = fs;
        self.samples_per_epoch = EPOCH_SECONDS * fs;
        self
    }

    /// Long path (kernel `4 fs`) and short path (kernel `fs / 2`).
    pub fn paths(&self) -> [PathGeometry; 2] {
        [4 * self.fs, self.fs / 2].map(|kernel| {
            let stride = (kernel / 4).max(1);
            let first_len = if self.samples_per_epoch >= kernel {
                (self.samples_per_epoch - kernel) / stride + 1
            } else {
                0
            };
            let second_len = if first_len >= SECOND_KERNEL { first_len - SECOND_KERNEL + 1 } else { 0 };
            PathGeometry { kernel, stride, first_len, second_len }
        })
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.fs < 2 || self.fs % 2 != 0 {
            return fail(format!("fs must be an even number >= 2, got {}", self.fs));
        }
        if self.samples_per_epoch != EPOCH_SECONDS * self.fs {
            return fail(format!(
                "samples_per_epoch {} != {EPOCH_SECONDS} * fs ({})",
                self.samples_per_epoch,
                EPOCH_SECONDS * self.fs
            ));
        }
        if self.heads == 0 || self.head_dim == 0 || self.heads * self.head_dim != self.dim {
            return fail(format!("heads ({}) * head_dim ({}) must equal dim ({})", self.heads, self.head_dim, self.dim));
        }
        if self.tokens < 2 || self.tokens % 2 != 0 {
            return fail(format!("tokens must be even and >= 2, got {}", self.tokens));
        }
        if self.seq_len == 0 || self.channels == 0 || self.ffn_dim == 0 {
            return fail("seq_len, channels and ffn_dim must be positive".into());
        }
        if self.n_classes != N_CLASSES {
            return fail(format!("n_classes must be {N_CLASSES}, got {}", self.n_classes));
        }
        for p in self.paths() {
            if p.second_len < self.tokens / 2 {
                return fail(format!(
                    "CNN path with kernel {} leaves {} positions, fewer than tokens/2 = {}",
                    p.kernel,
                    p.second_len,
                    self.tokens / 2
                ));
            }
        }
        Ok(())
    }

    /// Ordered `key=value` pairs, used by the checkpoint header.
    pub fn to_pairs(&self) -> Vec<(&'static str, usize)> {
        vec![
            ("fs", self.fs),
            ("seq_len", self.seq_len),
            ("channels", self.channels),
            ("samples_per_epoch", self.samples_per_epoch),
            ("dim", self.dim),
            ("tokens", self.tokens),
            ("heads", self.heads),
            ("head_dim", self.head_dim),
            ("depth", self.depth),
            ("ffn_dim", self.ffn_dim),
            ("n_classes", self.n_classes),
        ]
    }

    pub fn set(&mut self, key: &str, value: usize) -> Result<()> {
        let slot = match key {
            "fs" => &mut self.fs,
            "seq_len" => &mut self.seq_len,
            "channels" => &mut self.channels,
            "samples_per_epoch" => &mut self.samples_per_epoch,
            "dim" => &mut self.dim,
            "tokens" => &mut self.tokens,
            "heads" => &mut self.heads,
            "head_dim" => &mut self.head_dim,
            "depth" => &mut self.depth,
            "ffn_dim" => &mut self.ffn_dim,
            "n_classes" => &mut self.n_classes,
            _ => return Err(Error::Config(format!("unknown model key `{key}`"))),
        };
        *slot = value;
        Ok(())
    }
}
