//! Seeded synthetic token streams.
//!
//! Frames are produced one at a time, so arbitrarily long streams are
//! generated in constant memory.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{CliError, Result};
use crate::stream::{StreamHeader, StreamWriter};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SignalKind {
    /// Independent standard normal samples.
    Noise,
    /// A few sinusoids per channel plus light noise.
    SineMix,
    /// Runs of constant mean per channel ("events") separated by change points.
    PiecewiseEvents,
}

impl SignalKind {
    pub fn name(self) -> &'static str {
        match self {
            SignalKind::Noise => "noise",
            SignalKind::SineMix => "sine_mix",
            SignalKind::PiecewiseEvents => "piecewise_events",
        }
    }
}

impl fmt::Display for SignalKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SignalKind {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "noise" => Ok(SignalKind::Noise),
            "sine_mix" => Ok(SignalKind::SineMix),
            "piecewise_events" => Ok(SignalKind::PiecewiseEvents),
            other => Err(CliError::Usage(format!(
                "unknown signal kind {other:?} (expected noise, sine_mix or piecewise_events)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenReport {
    pub frames: u64,
    /// Positions where a new event starts, excluding position 0. Only
    /// populated for [`SignalKind::PiecewiseEvents`].
    pub change_points: Vec<u64>,
}

const SINES_PER_CHANNEL: usize = 3;
const SINE_NOISE: f64 = 0.1;
const EVENT_NOISE: f64 = 0.25;
const EVENT_MIN_LEN: u64 = 16;
const EVENT_MAX_LEN: u64 = 512;

struct Sine {
    amplitude: f64,
    /// Radians per frame.
    omega: f64,
    phase: f64,
}

/// Writes a stream of `len` frames with `channels` values each.
///
/// An empty stream is only written when `allow_empty` is set.
pub fn generate<W: Write>(
    out: W,
    kind: SignalKind,
    channels: usize,
    len: u64,
    seed: u64,
    allow_empty: bool,
) -> Result<GenReport> {
    if channels == 0 || channels > u32::MAX as usize {
        return Err(CliError::Usage(format!("invalid channel count {channels}")));
    }
    if len == 0 && !allow_empty {
        return Err(CliError::Usage(
            "refusing to write an empty stream without --allow-empty".into(),
        ));
    }
    let mut writer = StreamWriter::new(
        out,
        StreamHeader {
            channels: channels as u32,
            frame_count: len,
        },
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut frame = vec![0.0f64; channels];
    let mut change_points = Vec::new();

    match kind {
        SignalKind::Noise => {
            for _ in 0..len {
                for v in frame.iter_mut() {
                    *v = rng.sample(StandardNormal);
                }
                writer.write_frame(&frame)?;
            }
        }
        SignalKind::SineMix => {
            let sines: Vec<Sine> = (0..channels * SINES_PER_CHANNEL)
                .map(|_| Sine {
                    amplitude: rng.random_range(0.2..1.0),
                    // periods between 4 and 4096 frames
                    omega: std::f64::consts::TAU / 2f64.powf(rng.random_range(2.0..12.0)),
                    phase: rng.random_range(0.0..std::f64::consts::TAU),
                })
                .collect();
            for t in 0..len {
                for (h, v) in frame.iter_mut().enumerate() {
                    let own = &sines[h * SINES_PER_CHANNEL..(h + 1) * SINES_PER_CHANNEL];
                    let clean: f64 = own
                        .iter()
                        .map(|s| s.amplitude * (s.omega * t as f64 + s.phase).sin())
                        .sum();
                    *v = clean + SINE_NOISE * rng.sample::<f64, _>(StandardNormal);
                }
                writer.write_frame(&frame)?;
            }
        }
        SignalKind::PiecewiseEvents => {
            let mut means = vec![0.0f64; channels];
            let mut event_end = 0u64;
            for t in 0..len {
                if t == event_end {
                    if t != 0 {
                        change_points.push(t);
                    }
                    event_end = t + rng.random_range(EVENT_MIN_LEN..=EVENT_MAX_LEN);
                    for m in means.iter_mut() {
                        *m = 2.0 * rng.sample::<f64, _>(StandardNormal);
                    }
                }
                for (v, m) in frame.iter_mut().zip(&means) {
                    *v = m + EVENT_NOISE * rng.sample::<f64, _>(StandardNormal);
                }
                writer.write_frame(&frame)?;
            }
        }
    }
    writer.finish()?;
    Ok(GenReport {
        frames: len,
        change_points,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stream::StreamReader;
    use std::io::Cursor;
    use sts_core::Signal;

    fn gen(kind: SignalKind, channels: usize, len: u64, seed: u64) -> (Vec<u8>, GenReport) {
        let mut bytes = Vec::new();
        let report = generate(&mut bytes, kind, channels, len, seed, false).unwrap();
        (bytes, report)
    }

    #[test]
    fn deterministic_per_seed() {
        for kind in [
            SignalKind::Noise,
            SignalKind::SineMix,
            SignalKind::PiecewiseEvents,
        ] {
            let (a, _) = gen(kind, 4, 1000, 7);
            let (b, _) = gen(kind, 4, 1000, 7);
            let (c, _) = gen(kind, 4, 1000, 8);
            assert_eq!(a, b);
            assert_ne!(a, c);
            assert_eq!(a.len(), 20 + 1000 * 16);
        }
    }

    #[test]
    fn change_points_match_the_data() {
        let (bytes, report) = gen(SignalKind::PiecewiseEvents, 2, 5000, 3);
        assert!(!report.change_points.is_empty());
        assert!(report
            .change_points
            .windows(2)
            .all(|w| w[1] - w[0] >= EVENT_MIN_LEN));
        let mut reader = StreamReader::new(Cursor::new(bytes)).unwrap();
        let mut x = Signal::zeros(2, 0);
        reader.read_frames(&mut x, 5000).unwrap();
        // Event means are drawn with std 2 and the noise has std 0.25, so a
        // segment mean estimated from 16 samples is off by at most ~0.3.
        let mean = |h: usize, a: u64, b: u64| {
            x.channel(h)[a as usize..b as usize].iter().sum::<f64>() / (b - a) as f64
        };
        let mut bounds = vec![0];
        bounds.extend(&report.change_points);
        bounds.push(5000);
        let mut jumps = 0;
        for w in bounds.windows(3) {
            let d = (0..2)
                .map(|h| (mean(h, w[0], w[1]) - mean(h, w[1], w[2])).abs())
                .fold(0.0, f64::max);
            if d > 0.5 {
                jumps += 1;
            }
        }
        // nearly every boundary shows a visible jump in at least one channel
        assert!(
            jumps * 10 >= (bounds.len() - 2) * 8,
            "{jumps} of {}",
            bounds.len() - 2
        );
    }

    #[test]
    fn empty_stream_needs_flag() {
        assert!(generate(Vec::new(), SignalKind::Noise, 4, 0, 1, false).is_err());
        let mut bytes = Vec::new();
        let report = generate(&mut bytes, SignalKind::Noise, 4, 0, 1, true).unwrap();
        assert_eq!(report.frames, 0);
        assert_eq!(bytes.len(), 20);
        assert_eq!(&bytes[12..20], &[0u8; 8]);
    }

    #[test]
    fn kinds_parse() {
        for kind in [
            SignalKind::Noise,
            SignalKind::SineMix,
            SignalKind::PiecewiseEvents,
        ] {
            assert_eq!(kind.name().parse::<SignalKind>().unwrap(), kind);
        }
        assert!("square".parse::<SignalKind>().is_err());
    }
}
