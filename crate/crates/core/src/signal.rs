//! Channel-major real sequences and error metrics used to compare paths.

use num_complex::Complex64;

use crate::error::{Error, Result};

/// A real multi-channel sequence of shape `[channels, len]`, stored
/// channel-major (all timesteps of channel 0, then channel 1, ...).
#[derive(Debug, Clone, PartialEq)]
pub struct Signal {
    channels: usize,
    len: usize,
    data: Vec<f64>,
}

impl Signal {
    pub fn zeros(channels: usize, len: usize) -> Self {
        Self {
            channels,
            len,
            data: vec![0.0; channels * len],
        }
    }

    pub fn from_vec(channels: usize, len: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * len {
            return Err(Error::contract(format!(
                "signal of shape [{channels}, {len}] needs {} values, got {}",
                channels * len,
                data.len()
            )));
        }
        Ok(Self {
            channels,
            len,
            data,
        })
    }

    /// Builds a signal from one `Vec` per channel; all rows must share a length.
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let channels = rows.len();
        let len = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != len) {
            return Err(Error::contract("ragged rows"));
        }
        Ok(Self {
            channels,
            len,
            data: rows.into_iter().flatten().collect(),
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn channel(&self, h: usize) -> &[f64] {
        &self.data[h * self.len..(h + 1) * self.len]
    }

    pub fn channel_mut(&mut self, h: usize) -> &mut [f64] {
        &mut self.data[h * self.len..(h + 1) * self.len]
    }

    pub fn get(&self, h: usize, t: usize) -> f64 {
        self.data[h * self.len + t]
    }

    pub fn set(&mut self, h: usize, t: usize, v: f64) {
        self.data[h * self.len + t] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    /// Copies timesteps `[start, start + len)` of every channel.
    pub fn slice_time(&self, start: usize, len: usize) -> Signal {
        assert!(start + len <= self.len, "time slice out of range");
        let mut out = Signal::zeros(self.channels, len);
        for h in 0..self.channels {
            out.channel_mut(h)
                .copy_from_slice(&self.channel(h)[start..start + len]);
        }
        out
    }

    /// Concatenates signals along time. All parts must have the same channel count.
    pub fn concat_time(parts: &[Signal]) -> Result<Signal> {
        let channels = parts.first().map_or(0, Signal::channels);
        if parts.iter().any(|p| p.channels != channels) {
            return Err(Error::contract("channel count differs between parts"));
        }
        let len = parts.iter().map(Signal::len).sum();
        let mut out = Signal::zeros(channels, len);
        for h in 0..channels {
            let mut offset = 0;
            for p in parts {
                out.channel_mut(h)[offset..offset + p.len].copy_from_slice(p.channel(h));
                offset += p.len;
            }
        }
        Ok(out)
    }

    /// Resizes the time axis in place, zero-filling. Reuses the allocation
    /// when shrinking so a buffer sized for a full segment can hold a tail.
    pub fn reshape_time(&mut self, len: usize) {
        self.data.clear();
        self.data.resize(self.channels * len, 0.0);
        self.len = len;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Normwise relative error `max|a - b| / max|b|`.
///
/// Falls back to the absolute error when the reference is identically zero.
/// Slices of unequal length yield infinity.
pub fn relative_error(actual: &[f64], expected: &[f64]) -> f64 {
    if actual.len() != expected.len() {
        return f64::INFINITY;
    }
    let mut diff = 0.0f64;
    let mut scale = 0.0f64;
    for (a, b) in actual.iter().zip(expected) {
        let d = (a - b).abs();
        if d.is_nan() {
            return f64::INFINITY;
        }
        diff = diff.max(d);
        scale = scale.max(b.abs());
    }
    if scale > 0.0 {
        diff / scale
    } else {
        diff
    }
}

/// Complex counterpart of [`relative_error`], using the modulus.
pub fn relative_error_complex(actual: &[Complex64], expected: &[Complex64]) -> f64 {
    if actual.len() != expected.len() {
        return f64::INFINITY;
    }
    let mut diff = 0.0f64;
    let mut scale = 0.0f64;
    for (a, b) in actual.iter().zip(expected) {
        let d = (a - b).norm();
        if d.is_nan() {
            return f64::INFINITY;
        }
        diff = diff.max(d);
        scale = scale.max(b.norm());
    }
    if scale > 0.0 {
        diff / scale
    } else {
        diff
    }
}
