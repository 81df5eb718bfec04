//! Closed-form FLOP counts.
//!
//! Conventions: complex multiply = 6 real FLOPs, complex add = 2, a length-`P`
//! FFT = `5 P log2 P`. Convolution pads to `P = next_pow2(2L - 1)` and costs
//! three transforms plus `6P` for the pointwise product.

use std::fmt;
use std::str::FromStr;

use crate::{BenchError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Method {
    Recurrent,
    FftFull,
    StsChunked,
    Attention,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::Recurrent,
        Method::FftFull,
        Method::StsChunked,
        Method::Attention,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Recurrent => "recurrent",
            Method::FftFull => "fft_full",
            Method::StsChunked => "sts_chunked",
            Method::Attention => "attention",
        }
    }

    pub fn is_ssm(self) -> bool {
        self != Method::Attention
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = BenchError;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| BenchError::Contract(format!("unknown method `{s}`")))
    }
}

/// Shape parameters shared by every method's count.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FlopShape {
    /// H
    pub channels: u64,
    /// N
    pub state_size: u64,
    /// L
    pub len: u64,
    /// M, used by `sts_chunked` only
    pub segment_len: u64,
    /// attention head dimension
    pub d_attn: u64,
}

fn fft_len(len: u64) -> u64 {
    (2 * len - 1).next_power_of_two()
}

/// Three transforms plus the pointwise product for one channel.
fn fft_segment(len: u64) -> u64 {
    let p = fft_len(len);
    let log2 = p.trailing_zeros() as u64;
    3 * 5 * p * log2 + 6 * p
}

fn materialize(state_size: u64, len: u64) -> u64 {
    8 * state_size * len
}

/// Correction for the incoming state plus the explicit end-of-segment state.
fn state_path(state_size: u64, len: u64) -> u64 {
    8 * state_size * len + 8 * state_size * len
}

pub fn count_flops(method: Method, shape: FlopShape) -> Result<u64> {
    let FlopShape {
        channels: h,
        state_size: n,
        len: l,
        segment_len: m,
        d_attn: d,
    } = shape;
    if l == 0 {
        return Err(BenchError::Contract(
            "sequence length must be positive".into(),
        ));
    }
    let flops = match method {
        Method::Recurrent => {
            positive(h, "channels")?;
            positive(n, "state_size")?;
            l * h * (8 * n + 8 * n + 2)
        }
        Method::FftFull => {
            positive(h, "channels")?;
            positive(n, "state_size")?;
            h * (fft_segment(l) + materialize(n, l))
        }
        Method::StsChunked => {
            positive(h, "channels")?;
            positive(n, "state_size")?;
            positive(m, "segment_len")?;
            if m > l {
                return Err(BenchError::Contract(format!(
                    "segment length {m} exceeds sequence length {l}"
                )));
            }
            let (full, tail) = (l / m, l % m);
            let mut per_channel = full * (fft_segment(m) + state_path(n, m)) + materialize(n, m);
            if tail > 0 {
                per_channel += fft_segment(tail) + state_path(n, tail) + materialize(n, tail);
            }
            h * per_channel
        }
        Method::Attention => {
            positive(d, "d_attn")?;
            2 * l * l * d + 5 * l * l + 2 * l * l * d
        }
    };
    Ok(flops)
}

fn positive(v: u64, what: &str) -> Result<()> {
    if v == 0 {
        return Err(BenchError::Contract(format!("{what} must be positive")));
    }
    Ok(())
}
