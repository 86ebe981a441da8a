use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{QocError, Result};
use crate::hwmodel::{V_MAX, V_MIN};

/// Piecewise-constant voltages, shape `(n_channels, 2 rings, n_segments)`.
///
/// Stored flat as `data[(channel * 2 + ring) * n_segments + segment]`, which
/// is also the row-major layout of an `(2 n_channels, n_segments)` matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlSchedule {
    n_channels: usize,
    n_segments: usize,
    data: Vec<f64>,
}

impl ControlSchedule {
    pub fn zeros(n_channels: usize, n_segments: usize) -> Self {
        Self::constant(n_channels, n_segments, 0.0)
    }

    pub fn constant(n_channels: usize, n_segments: usize, v: f64) -> Self {
        Self {
            n_channels,
            n_segments,
            data: vec![v; n_channels * 2 * n_segments],
        }
    }

    pub fn from_vec(n_channels: usize, n_segments: usize, data: Vec<f64>) -> Result<Self> {
        let expected = n_channels * 2 * n_segments;
        if data.len() != expected {
            return Err(QocError::DimensionMismatch {
                what: "schedule entries",
                expected,
                found: data.len(),
            });
        }
        Ok(Self {
            n_channels,
            n_segments,
            data,
        })
    }

    /// Uniform draw over the full voltage range.
    pub fn random(n_channels: usize, n_segments: usize, rng: &mut impl Rng) -> Self {
        let data = (0..n_channels * 2 * n_segments)
            .map(|_| rng.random_range(V_MIN..=V_MAX))
            .collect();
        Self {
            n_channels,
            n_segments,
            data,
        }
    }

    /// Constant pulse per channel: `pairs[ch] = (v0, v1)` on every segment.
    pub fn from_channel_pairs(pairs: &[(f64, f64)], n_segments: usize) -> Self {
        let mut s = Self::zeros(pairs.len(), n_segments);
        for (ch, (v0, v1)) in pairs.iter().enumerate() {
            for seg in 0..n_segments {
                s.set(ch, 0, seg, *v0);
                s.set(ch, 1, seg, *v1);
            }
        }
        s
    }

    pub fn n_channels(&self) -> usize {
        self.n_channels
    }

    pub fn n_segments(&self) -> usize {
        self.n_segments
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn index(&self, channel: usize, ring: usize, segment: usize) -> usize {
        (channel * 2 + ring) * self.n_segments + segment
    }

    pub fn get(&self, channel: usize, ring: usize, segment: usize) -> f64 {
        self.data[self.index(channel, ring, segment)]
    }

    pub fn set(&mut self, channel: usize, ring: usize, segment: usize, v: f64) {
        let i = self.index(channel, ring, segment);
        self.data[i] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn clamp_to_bounds(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(V_MIN, V_MAX);
        }
    }

    pub fn within_bounds(&self) -> bool {
        self.data.iter().all(|v| (V_MIN..=V_MAX).contains(v))
    }

    /// Checks shape against the hardware and time grid, and every voltage against the limits.
    pub fn validate(&self, n_channels: usize, t_steps: usize) -> Result<()> {
        if self.n_channels != n_channels {
            return Err(QocError::DimensionMismatch {
                what: "schedule channels",
                expected: n_channels,
                found: self.n_channels,
            });
        }
        if self.n_segments == 0 || !t_steps.is_multiple_of(self.n_segments) {
            return Err(QocError::SegmentMismatch {
                t_steps,
                n_segments: self.n_segments,
            });
        }
        for ch in 0..self.n_channels {
            for ring in 0..2 {
                for seg in 0..self.n_segments {
                    let v = self.get(ch, ring, seg);
                    if !(V_MIN..=V_MAX).contains(&v) {
                        return Err(QocError::ConstraintViolation {
                            channel: ch,
                            ring,
                            segment: seg,
                            value: v,
                        });
                    }
                }
            }
        }
        Ok(())
    }

    /// Piecewise-constant hold onto a different segment count: each new
    /// segment copies the old segment containing its midpoint.
    pub fn resample(&self, n_segments: usize) -> Self {
        let mut out = Self::zeros(self.n_channels, n_segments);
        for ch in 0..self.n_channels {
            for ring in 0..2 {
                for seg in 0..n_segments {
                    let src = hold_source(seg, self.n_segments, n_segments);
                    out.set(ch, ring, seg, self.get(ch, ring, src));
                }
            }
        }
        out
    }

    /// Nested `[channel][ring][segment]` view, used for reports.
    pub fn to_nested(&self) -> Vec<[Vec<f64>; 2]> {
        (0..self.n_channels)
            .map(|ch| {
                [
                    (0..self.n_segments).map(|s| self.get(ch, 0, s)).collect(),
                    (0..self.n_segments).map(|s| self.get(ch, 1, s)).collect(),
                ]
            })
            .collect()
    }
}

/// Index of the old segment whose span contains the midpoint of new segment `seg`.
pub fn hold_source(seg: usize, n_old: usize, n_new: usize) -> usize {
    let mid = (2 * seg + 1) * n_old;
    (mid / (2 * n_new)).min(n_old - 1)
}
