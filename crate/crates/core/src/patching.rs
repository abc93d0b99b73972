//! Patch tokenization, channel reshapes and random patch masking.
//!
//! Overlapping patching pads the series with `S` copies of its last value
//! and yields `⌊(L−P)/S⌋ + 2` patches. Non-overlapping patching (used for
//! masked pretraining) truncates instead: `⌊L/P⌋` patches, the trailing
//! `L mod P` steps are dropped. With `L = 512, P = 12` that gives 42.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PatchMode {
    PaddedOverlap,
    NonOverlap,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchConfig {
    pub patch_len: usize,
    pub stride: usize,
    pub mode: PatchMode,
}

impl PatchConfig {
    pub fn overlap(patch_len: usize, stride: usize) -> Result<Self> {
        Self::validated(patch_len, stride, PatchMode::PaddedOverlap)
    }

    pub fn nonoverlap(patch_len: usize) -> Result<Self> {
        Self::validated(patch_len, patch_len, PatchMode::NonOverlap)
    }

    pub fn validated(patch_len: usize, stride: usize, mode: PatchMode) -> Result<Self> {
        let cfg = Self {
            patch_len,
            stride,
            mode,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_len == 0 || self.stride == 0 {
            return Err(Error::config("patch length and stride must be ≥ 1"));
        }
        if self.mode == PatchMode::NonOverlap && self.stride != self.patch_len {
            return Err(Error::config(format!(
                "non-overlapping patches need stride == patch length, got P={} S={}",
                self.patch_len, self.stride
            )));
        }
        Ok(())
    }

    /// Number of patches produced from a series of length `lookback`.
    pub fn num_patches(&self, lookback: usize) -> Result<usize> {
        self.validate()?;
        if lookback < self.patch_len {
            return Err(Error::config(format!(
                "look-back {lookback} shorter than patch length {}",
                self.patch_len
            )));
        }
        Ok(match self.mode {
            PatchMode::PaddedOverlap => (lookback - self.patch_len) / self.stride + 2,
            PatchMode::NonOverlap => lookback / self.patch_len,
        })
    }

    /// Patches one univariate series into `[P, N]`.
    pub fn patchify(&self, x: &[f64]) -> Result<Tensor> {
        let n = self.num_patches(x.len())?;
        let p = self.patch_len;
        let mut out = vec![0.0; p * n];
        self.patch_into(x, n, &mut out);
        Tensor::new(vec![p, n], out)
    }

    /// Writes the `[P, N]` patches of `x` into `out`.
    fn patch_into(&self, x: &[f64], n: usize, out: &mut [f64]) {
        let (p, s) = (self.patch_len, self.stride);
        let last = x[x.len() - 1];
        for j in 0..n {
            for k in 0..p {
                let idx = j * s + k;
                out[k * n + j] = if idx < x.len() { x[idx] } else { last };
            }
        }
    }

    /// Patches every series of `x: [B, M, L]` into `[B, M, P, N]`.
    pub fn patchify_batch(&self, x: &Tensor) -> Result<Tensor> {
        let &[b, m, l] = x.shape() else {
            return Err(Error::InvalidShape {
                shape: x.shape().to_vec(),
                reason: "expected [batch, channels, look-back]".into(),
            });
        };
        let n = self.num_patches(l)?;
        let p = self.patch_len;
        let mut out = vec![0.0; b * m * p * n];
        for (series, dst) in x.data().chunks(l).zip(out.chunks_mut(p * n)) {
            self.patch_into(series, n, dst);
        }
        Tensor::new(vec![b, m, p, n], out)
    }
}

/// Free-function form of [`PatchConfig::patchify`] for padded overlapping patches.
pub fn patchify(x: &[f64], patch_len: usize, stride: usize) -> Result<Tensor> {
    PatchConfig::overlap(patch_len, stride)?.patchify(x)
}

/// Free-function form for non-overlapping, truncating patches.
pub fn patchify_nonoverlap(x: &[f64], patch_len: usize) -> Result<Tensor> {
    PatchConfig::nonoverlap(patch_len)?.patchify(x)
}

/// Patches of a batch with every channel treated as its own series.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchTensor {
    /// `[B·M, P, N]`; row `b·M + m` is channel `m` of item `b`.
    pub values: Tensor,
    pub batch: usize,
    pub channels: usize,
}

impl PatchTensor {
    pub fn num_patches(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn patch_len(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn rows(&self) -> usize {
        self.batch * self.channels
    }
}

/// `[B, M, P, N] → [B·M, P, N]`. The data is already laid out so that row
/// `b·M + m` holds channel `m` of item `b`; only the shape changes.
pub fn channel_independent_reshape(x: &Tensor) -> Result<PatchTensor> {
    let &[b, m, p, n] = x.shape() else {
        return Err(Error::InvalidShape {
            shape: x.shape().to_vec(),
            reason: "expected [B, M, P, N]".into(),
        });
    };
    Ok(PatchTensor {
        values: x.clone().reshape(&[b * m, p, n])?,
        batch: b,
        channels: m,
    })
}

pub fn channel_independent_inverse(x: &PatchTensor) -> Result<Tensor> {
    let (p, n) = (x.patch_len(), x.num_patches());
    x.values.clone().reshape(&[x.batch, x.channels, p, n])
}

/// `[B, M, P, N] → [B, M·P, N]`: each token's feature vector stacks the
/// same-position patch of every channel, channel 0 first.
pub fn channel_mixing_reshape(x: &Tensor) -> Result<Tensor> {
    let &[b, m, p, n] = x.shape() else {
        return Err(Error::InvalidShape {
            shape: x.shape().to_vec(),
            reason: "expected [B, M, P, N]".into(),
        });
    };
    x.clone().reshape(&[b, m * p, n])
}

pub fn channel_mixing_inverse(x: &Tensor, channels: usize) -> Result<Tensor> {
    let &[b, mp, n] = x.shape() else {
        return Err(Error::InvalidShape {
            shape: x.shape().to_vec(),
            reason: "expected [B, M·P, N]".into(),
        });
    };
    if channels == 0 || mp % channels != 0 {
        return Err(Error::Shape {
            op: "channel_mixing_inverse",
            lhs: x.shape().to_vec(),
            rhs: vec![channels],
        });
    }
    x.clone().reshape(&[b, channels, mp / channels, n])
}

/// Masked patch indices for every (item, channel) row.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchMask {
    /// Sorted, unique indices in `[0, N)` per row.
    pub masked: Vec<Vec<usize>>,
    pub num_patches: usize,
    pub ratio: f64,
}

/// Masked patches per row: `round(ratio · N)`, halves rounding up.
pub fn mask_count(num_patches: usize, ratio: f64) -> usize {
    (ratio * num_patches as f64 + 0.5).floor() as usize
}

/// Draws `round(ratio·N)` distinct patch indices uniformly at random.
pub fn sample_row_mask<R: Rng + ?Sized>(num_patches: usize, ratio: f64, rng: &mut R) -> Result<Vec<usize>> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::config(format!("mask ratio {ratio} outside [0, 1)")));
    }
    let k = mask_count(num_patches, ratio).min(num_patches);
    let mut idx = rand::seq::index::sample(rng, num_patches, k).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

/// Independent masks for `rows` rows drawn from one stream.
pub fn sample_mask<R: Rng + ?Sized>(
    rows: usize,
    num_patches: usize,
    ratio: f64,
    rng: &mut R,
) -> Result<PatchMask> {
    let masked = (0..rows)
        .map(|_| sample_row_mask(num_patches, ratio, rng))
        .collect::<Result<_>>()?;
    Ok(PatchMask {
        masked,
        num_patches,
        ratio,
    })
}

/// Per-row seed `hash(run_seed, epoch, row)`, so each row's mask is the same
/// regardless of batching or processing order.
pub fn mask_seed(run_seed: u64, epoch: u64, row: u64) -> u64 {
    let mut h = splitmix(run_seed ^ 0x5851_f42d_4c95_7f2d);
    h = splitmix(h ^ epoch);
    splitmix(h ^ row)
}

pub(crate) fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Masks for the given global row ids, each from its own derived stream.
pub fn sample_mask_for_rows(
    row_ids: &[u64],
    num_patches: usize,
    ratio: f64,
    run_seed: u64,
    epoch: u64,
) -> Result<PatchMask> {
    let masked = row_ids
        .iter()
        .map(|&row| {
            let mut rng = ChaCha8Rng::seed_from_u64(mask_seed(run_seed, epoch, row));
            sample_row_mask(num_patches, ratio, &mut rng)
        })
        .collect::<Result<_>>()?;
    Ok(PatchMask {
        masked,
        num_patches,
        ratio,
    })
}

impl PatchMask {
    /// Elementwise flags over `[rows, P, N]`: true where a patch is masked.
    pub fn element_flags(&self, patch_len: usize) -> Vec<bool> {
        let n = self.num_patches;
        let mut flags = vec![false; self.masked.len() * patch_len * n];
        for (r, idx) in self.masked.iter().enumerate() {
            for &j in idx {
                for k in 0..patch_len {
                    flags[(r * patch_len + k) * n + j] = true;
                }
            }
        }
        flags
    }
}

/// Zeroes the masked patches of `[rows, P, N]` patches.
pub fn apply_mask(patches: &Tensor, mask: &PatchMask) -> Result<Tensor> {
    let &[rows, p, n] = patches.shape() else {
        return Err(Error::InvalidShape {
            shape: patches.shape().to_vec(),
            reason: "expected [rows, P, N]".into(),
        });
    };
    if rows != mask.masked.len() || n != mask.num_patches {
        return Err(Error::Shape {
            op: "apply_mask",
            lhs: patches.shape().to_vec(),
            rhs: vec![mask.masked.len(), mask.num_patches],
        });
    }
    let mut out = patches.clone();
    for (flag, v) in mask.element_flags(p).iter().zip(out.data_mut()) {
        if *flag {
            *v = 0.0;
        }
    }
    Ok(out)
}
