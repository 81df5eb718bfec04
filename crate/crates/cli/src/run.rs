//! Streaming evaluation of a stream file through a [`Session`].
//!
//! Input is read one segment at a time into a reused buffer and emissions are
//! written as they are produced, so memory does not depend on the stream
//! length.

use std::io::{Read, Write};

use sts_core::{load_state, Emission, Session, Signal};

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::stream::StreamReader;

pub const CSV_HEADER: &str = "position,bucket,channel,value";

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Checkpoint bytes to continue from. The input is skipped up to the
    /// checkpoint position and no CSV header is written, so the output of a
    /// resumed run appends cleanly to the interrupted one.
    pub resume: Option<Vec<u8>>,
    /// Stop after this many segments without closing the session.
    pub max_segments: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    /// Frames consumed by this run, excluding any skipped on resume.
    pub frames: u64,
    pub segments: u64,
    pub rows: u64,
    /// False when the run stopped early because of `max_segments`.
    pub finished: bool,
    /// Checkpoint of the state after the last processed segment.
    pub checkpoint: Vec<u8>,
}

fn write_rows<W: Write>(out: &mut W, emissions: &[Emission]) -> Result<u64> {
    let mut rows = 0;
    for e in emissions {
        for (h, v) in e.values.iter().enumerate() {
            match e.bucket {
                Some(b) => writeln!(out, "{},{b},{h},{v}", e.position)?,
                None => writeln!(out, "{},,{h},{v}", e.position)?,
            }
            rows += 1;
        }
    }
    Ok(rows)
}

/// Runs `input` through a session built from `config`, writing CSV rows to
/// `output`. Callers should pass buffered reader and writer.
pub fn run_stream<R: Read, W: Write>(
    config: &RunConfig,
    input: R,
    mut output: W,
    options: &RunOptions,
) -> Result<RunSummary> {
    let mut reader = StreamReader::new(input)?;
    let header = reader.header();
    if header.channels as usize != config.channels {
        return Err(CliError::Format {
            offset: 8,
            detail: format!(
                "stream has {} channels, config expects {}",
                header.channels, config.channels
            ),
        });
    }
    let params = config.build_params()?;
    let mut session = Session::new(params.clone(), config.plan()?, config.policy())?;
    if let Some(total) = config.declared_total {
        session = session.with_declared_total(total)?;
    }
    if let Some(bytes) = &options.resume {
        let state = load_state(bytes, &params)?;
        let position = state.position();
        session = session.with_state(state)?;
        let skipped = reader.skip_frames(position)?;
        if skipped != position {
            return Err(CliError::Usage(format!(
                "checkpoint is at frame {position} but the stream has only {skipped} frames"
            )));
        }
    } else {
        writeln!(output, "{CSV_HEADER}")?;
    }

    let segment_len = config.segment_len;
    let mut buf = Signal::zeros(config.channels, segment_len);
    let mut summary = RunSummary {
        frames: 0,
        segments: 0,
        rows: 0,
        finished: true,
        checkpoint: Vec::new(),
    };
    loop {
        if options.max_segments.is_some_and(|k| summary.segments >= k) {
            summary.finished = false;
            break;
        }
        let n = reader.read_frames(&mut buf, segment_len)?;
        if n == 0 {
            break;
        }
        let emitted = session.process_segment(&buf)?;
        summary.rows += write_rows(&mut output, &emitted)?;
        summary.frames += n as u64;
        summary.segments += 1;
        if n < segment_len {
            // a short read only happens at the end of the stream
            break;
        }
    }
    if summary.finished {
        let emitted = session.close()?;
        summary.rows += write_rows(&mut output, &emitted)?;
    }
    output.flush()?;
    summary.checkpoint = session.save_state();
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gen::{generate, SignalKind};
    use std::io::Cursor;
    use sts_core::{scan_recurrent, TransferState};

    fn config(policy: &str, m: usize) -> RunConfig {
        RunConfig::from_json(&format!(
            r#"{{"state_size": 4, "channels": 2, "seed": 5, "segment_len": {m}, "readout_policy": "{policy}"}}"#
        ))
        .unwrap()
    }

    fn stream(len: u64) -> Vec<u8> {
        let mut bytes = Vec::new();
        generate(&mut bytes, SignalKind::Noise, 2, len, 1, true).unwrap();
        bytes
    }

    fn run(config: &RunConfig, bytes: &[u8], options: &RunOptions) -> (String, RunSummary) {
        let mut out = Vec::new();
        let summary = run_stream(config, Cursor::new(bytes), &mut out, options).unwrap();
        (String::from_utf8(out).unwrap(), summary)
    }

    #[test]
    fn last_per_segment_emits_one_row_per_channel_and_segment() {
        let (csv, summary) = run(
            &config("last_per_segment", 16),
            &stream(16 * 64),
            &RunOptions::default(),
        );
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], CSV_HEADER);
        assert_eq!(lines.len(), 1 + 64 * 2);
        assert_eq!(summary.segments, 64);
        assert_eq!(summary.rows, 128);
        assert!(lines[1].starts_with("15,,0,"));
        assert!(lines[2].starts_with("15,,1,"));
    }

    #[test]
    fn single_segment_all_tokens_matches_the_recurrence() {
        let cfg = config("all", 100);
        let bytes = stream(100);
        let (csv, _) = run(&cfg, &bytes, &RunOptions::default());

        let mut reader = StreamReader::new(Cursor::new(&bytes)).unwrap();
        let mut x = Signal::zeros(2, 0);
        reader.read_frames(&mut x, 100).unwrap();
        let params = cfg.build_params().unwrap();
        let (y, _) = scan_recurrent(&params, &x, &TransferState::for_params(&params)).unwrap();
        for line in csv.lines().skip(1) {
            let f: Vec<&str> = line.split(',').collect();
            let (t, h): (usize, usize) = (f[0].parse().unwrap(), f[2].parse().unwrap());
            let v: f64 = f[3].parse().unwrap();
            let want = y.get(h, t);
            assert!(
                (v - want).abs() <= 1e-10 * want.abs().max(1.0),
                "t={t} h={h}"
            );
        }
    }

    #[test]
    fn resume_concatenates_to_the_uninterrupted_output() {
        for policy in ["all", "last_per_segment", "final"] {
            let cfg = config(policy, 8);
            let bytes = stream(8 * 10 + 3);
            let (full, full_summary) = run(&cfg, &bytes, &RunOptions::default());
            let (head, first) = run(
                &cfg,
                &bytes,
                &RunOptions {
                    max_segments: Some(4),
                    ..Default::default()
                },
            );
            assert!(!first.finished);
            let (tail, second) = run(
                &cfg,
                &bytes,
                &RunOptions {
                    resume: Some(first.checkpoint.clone()),
                    ..Default::default()
                },
            );
            assert_eq!(head + &tail, full, "{policy}");
            assert_eq!(second.checkpoint, full_summary.checkpoint);
            assert_eq!(first.frames + second.frames, 83);
        }
    }

    #[test]
    fn buckets_follow_the_declared_total() {
        let cfg = RunConfig::from_json(
            r#"{"state_size": 2, "channels": 2, "seed": 5, "segment_len": 100, "declared_total": 3200}"#,
        )
        .unwrap();
        let (csv, _) = run(&cfg, &stream(3200), &RunOptions::default());
        let buckets: Vec<u32> = csv
            .lines()
            .skip(1)
            .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
            .collect();
        assert_eq!(buckets.len(), 64);
        assert_eq!(buckets.first(), Some(&0));
        assert_eq!(buckets.last(), Some(&31));
    }

    #[test]
    fn rejects_mismatches() {
        let cfg = config("all", 8);
        let mut one_channel = Vec::new();
        generate(&mut one_channel, SignalKind::Noise, 1, 8, 1, false).unwrap();
        let err = run_stream(
            &cfg,
            Cursor::new(one_channel),
            Vec::new(),
            &RunOptions::default(),
        );
        assert!(matches!(err, Err(CliError::Format { offset: 8, .. })));

        let (_, summary) = run(&cfg, &stream(16), &RunOptions::default());
        let short = run_stream(
            &cfg,
            Cursor::new(stream(8)),
            Vec::new(),
            &RunOptions {
                resume: Some(summary.checkpoint),
                ..Default::default()
            },
        );
        assert!(matches!(short, Err(CliError::Usage(_))));

        let mut garbage = stream(16);
        garbage.truncate(30);
        let err = run_stream(
            &cfg,
            Cursor::new(garbage),
            Vec::new(),
            &RunOptions::default(),
        );
        assert!(matches!(err, Err(CliError::Format { offset: 30, .. })));
    }
}
