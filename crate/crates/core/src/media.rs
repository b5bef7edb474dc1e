//! Parametric video source model.
//!
//! A [`Ladder`] stands in for a clip encoded at 30 quality settings: bitrates
//! are geometrically spaced and PSNR follows a logarithmic rate-distortion
//! curve through both endpoints. [`plan_gop`] turns one variant into the
//! frame and packet sizes that go on the wire for one GoP.

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const LADDER_SIZE: usize = 30;

#[derive(Debug, Error, PartialEq)]
pub enum MediaError {
    #[error("invalid ladder bounds: rate {r_min}..{r_max} b/s, psnr {psnr_min}..{psnr_max} dB")]
    InvalidLadderBounds {
        r_min: f64,
        r_max: f64,
        psnr_min: f64,
        psnr_max: f64,
    },
    #[error("invalid GoP spec: {0}")]
    InvalidGopSpec(&'static str),
    #[error("invalid variant: {0}")]
    InvalidVariant(&'static str),
}

/// One encoded quality level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateVariant {
    /// Ladder position, 0 is the lowest quality.
    pub index: usize,
    /// Opaque monotone quality label in 1..=31.
    pub quality_index: u8,
    /// Bits per second.
    pub bitrate: f64,
    /// PSNR of this encoding with no loss, in dB.
    pub ref_psnr: f64,
}

impl RateVariant {
    pub fn new(index: usize, quality_index: u8, bitrate: f64, ref_psnr: f64) -> Result<Self, MediaError> {
        if !(bitrate.is_finite() && bitrate > 0.0) {
            return Err(MediaError::InvalidVariant("bitrate must be positive"));
        }
        if !(1..=31).contains(&quality_index) {
            return Err(MediaError::InvalidVariant("quality index outside 1..=31"));
        }
        if !ref_psnr.is_finite() {
            return Err(MediaError::InvalidVariant("psnr must be finite"));
        }
        Ok(Self {
            index,
            quality_index,
            bitrate,
            ref_psnr,
        })
    }
}

/// Endpoint anchors for [`build_ladder`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LadderParams {
    pub r_min: f64,
    pub r_max: f64,
    pub psnr_min: f64,
    pub psnr_max: f64,
}

impl Default for LadderParams {
    fn default() -> Self {
        Self {
            r_min: 50_000.0,
            r_max: 1_000_000.0,
            psnr_min: 28.0,
            psnr_max: 42.0,
        }
    }
}

/// Exactly [`LADDER_SIZE`] variants, strictly increasing in both bitrate and PSNR.
#[derive(Debug, Clone, PartialEq)]
pub struct Ladder {
    variants: Vec<RateVariant>,
}

impl Ladder {
    pub fn variants(&self) -> &[RateVariant] {
        &self.variants
    }

    pub fn get(&self, index: usize) -> Option<&RateVariant> {
        self.variants.get(index)
    }

    pub fn top(&self) -> usize {
        self.variants.len() - 1
    }

    /// Lowest variant whose bitrate is at least `rate`, or the top one.
    pub fn index_at_or_above(&self, rate: f64) -> usize {
        self.variants
            .iter()
            .position(|v| v.bitrate >= rate)
            .unwrap_or_else(|| self.top())
    }

    /// Lowest variant satisfying `pred`.
    pub fn lowest_where(&self, pred: impl Fn(&RateVariant) -> bool) -> Option<&RateVariant> {
        self.variants.iter().find(|v| pred(v))
    }
}

impl std::ops::Index<usize> for Ladder {
    type Output = RateVariant;

    fn index(&self, i: usize) -> &RateVariant {
        &self.variants[i]
    }
}

pub fn build_ladder(p: &LadderParams) -> Result<Ladder, MediaError> {
    let ok = p.r_min.is_finite()
        && p.r_max.is_finite()
        && p.psnr_min.is_finite()
        && p.psnr_max.is_finite()
        && p.r_min > 0.0
        && p.r_min < p.r_max
        && p.psnr_min < p.psnr_max;
    if !ok {
        return Err(MediaError::InvalidLadderBounds {
            r_min: p.r_min,
            r_max: p.r_max,
            psnr_min: p.psnr_min,
            psnr_max: p.psnr_max,
        });
    }

    let steps = (LADDER_SIZE - 1) as f64;
    let span = (p.r_max / p.r_min).ln();
    let variants = (0..LADDER_SIZE)
        .map(|i| {
            let bitrate = match i {
                0 => p.r_min,
                i if i == LADDER_SIZE - 1 => p.r_max,
                i => p.r_min * (span * i as f64 / steps).exp(),
            };
            let ref_psnr = match i {
                0 => p.psnr_min,
                i if i == LADDER_SIZE - 1 => p.psnr_max,
                _ => p.psnr_min + (p.psnr_max - p.psnr_min) * (bitrate / p.r_min).ln() / span,
            };
            RateVariant {
                index: i,
                quality_index: (i + 1) as u8,
                bitrate,
                ref_psnr,
            }
        })
        .collect();
    Ok(Ladder { variants })
}

/// Frame and packet layout of a GoP.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GopSpec {
    pub fps: u32,
    pub gop_len: u32,
    /// Bytes per packet payload.
    pub payload: u32,
}

impl Default for GopSpec {
    fn default() -> Self {
        Self {
            fps: 30,
            gop_len: 30,
            payload: 1000,
        }
    }
}

impl GopSpec {
    pub fn validate(&self) -> Result<(), MediaError> {
        if self.fps == 0 {
            return Err(MediaError::InvalidGopSpec("fps must be positive"));
        }
        if self.gop_len == 0 {
            return Err(MediaError::InvalidGopSpec("gop_len must be positive"));
        }
        if self.payload == 0 {
            return Err(MediaError::InvalidGopSpec("payload must be positive"));
        }
        Ok(())
    }

    /// GoP duration in microseconds, rounded to the nearest microsecond.
    pub fn gop_micros(&self) -> u64 {
        frame_offset_micros(self.gop_len as u64, self.fps)
    }

    /// Offset of frame `k` from the start of its GoP.
    pub fn frame_offset_micros(&self, k: u32) -> u64 {
        frame_offset_micros(k as u64, self.fps)
    }
}

fn frame_offset_micros(k: u64, fps: u32) -> u64 {
    let fps = fps as u64;
    (k * 1_000_000 + fps / 2) / fps
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FramePlan {
    /// Position within the GoP.
    pub frame_index: u32,
    pub size: u32,
    pub packet_count: u32,
}

impl FramePlan {
    /// Sizes of this frame's packets; only the last one may be short.
    pub fn packet_sizes(&self, payload: u32) -> impl Iterator<Item = u32> + '_ {
        let full = self.size / payload;
        let rest = self.size % payload;
        (0..self.packet_count).map(move |i| if i < full { payload } else { rest })
    }
}

/// Constant-rate frame plan for one GoP of `variant`.
pub fn plan_gop(variant: &RateVariant, spec: &GopSpec) -> Vec<FramePlan> {
    let total = (variant.bitrate * spec.gop_len as f64 / spec.fps as f64 / 8.0).round() as u64;
    let frames = spec.gop_len as u64;
    let base = total / frames;
    let extra = total % frames;
    (0..spec.gop_len)
        .map(|k| {
            let size = (base + u64::from((k as u64) < extra)) as u32;
            FramePlan {
                frame_index: k,
                size,
                packet_count: size.div_ceil(spec.payload),
            }
        })
        .collect()
}
