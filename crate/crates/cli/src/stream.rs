//! `STSS` token stream files.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "STSS"
//! 4       4     version (u32 LE) = 1
//! 8       4     channels H (u32 LE)
//! 12      8     frame_count (u64 LE), 0 = unknown, read to end of stream
//! 20      ...   frames, each H float32 LE values
//! ```

use std::io::{self, ErrorKind, Read, Write};

use sts_core::Signal;

use crate::error::{CliError, Result};

pub const MAGIC: &[u8; 4] = b"STSS";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: u64 = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamHeader {
    pub channels: u32,
    /// 0 when the length is not known up front.
    pub frame_count: u64,
}

impl StreamHeader {
    pub fn to_bytes(&self) -> [u8; HEADER_LEN as usize] {
        let mut out = [0u8; HEADER_LEN as usize];
        out[..4].copy_from_slice(MAGIC);
        out[4..8].copy_from_slice(&VERSION.to_le_bytes());
        out[8..12].copy_from_slice(&self.channels.to_le_bytes());
        out[12..20].copy_from_slice(&self.frame_count.to_le_bytes());
        out
    }

    pub fn frame_bytes(&self) -> u64 {
        4 * self.channels as u64
    }
}

fn format_err(offset: u64, detail: impl Into<String>) -> CliError {
    CliError::Format {
        offset,
        detail: detail.into(),
    }
}

pub struct StreamWriter<W: Write> {
    inner: W,
    channels: usize,
    written: u64,
    declared: u64,
    frame: Vec<u8>,
}

impl<W: Write> StreamWriter<W> {
    pub fn new(mut inner: W, header: StreamHeader) -> Result<Self> {
        if header.channels == 0 {
            return Err(CliError::Usage("stream needs at least one channel".into()));
        }
        inner.write_all(&header.to_bytes())?;
        Ok(Self {
            inner,
            channels: header.channels as usize,
            written: 0,
            declared: header.frame_count,
            frame: Vec::with_capacity(4 * header.channels as usize),
        })
    }

    /// Appends one frame of `H` values, narrowed to float32.
    pub fn write_frame(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.channels {
            return Err(CliError::Usage(format!(
                "frame has {} values, stream has {} channels",
                values.len(),
                self.channels
            )));
        }
        self.frame.clear();
        for &v in values {
            self.frame.extend_from_slice(&(v as f32).to_le_bytes());
        }
        self.inner.write_all(&self.frame)?;
        self.written += 1;
        Ok(())
    }

    /// Flushes and checks that the declared frame count, if any, was met.
    pub fn finish(mut self) -> Result<W> {
        if self.declared != 0 && self.declared != self.written {
            return Err(CliError::Usage(format!(
                "header declares {} frames but {} were written",
                self.declared, self.written
            )));
        }
        self.inner.flush()?;
        Ok(self.inner)
    }
}

pub struct StreamReader<R: Read> {
    inner: R,
    header: StreamHeader,
    frames_read: u64,
    frame: Vec<u8>,
    /// Frame-major values of the batch being read.
    staging: Vec<f32>,
    done: bool,
}

/// Reads as many bytes as are available up to `buf.len()`.
fn read_full<R: Read>(r: &mut R, buf: &mut [u8]) -> io::Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(filled)
}

impl<R: Read> StreamReader<R> {
    pub fn new(mut inner: R) -> Result<Self> {
        let mut raw = [0u8; HEADER_LEN as usize];
        let got = read_full(&mut inner, &mut raw)?;
        if got < 4 {
            return Err(format_err(got as u64, "truncated magic"));
        }
        if &raw[..4] != MAGIC {
            return Err(format_err(0, format!("bad magic {:02x?}", &raw[..4])));
        }
        if got < 8 {
            return Err(format_err(got as u64, "truncated version"));
        }
        let version = u32::from_le_bytes(raw[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(format_err(4, format!("unsupported version {version}")));
        }
        if got < 12 {
            return Err(format_err(got as u64, "truncated channel count"));
        }
        let channels = u32::from_le_bytes(raw[8..12].try_into().expect("4 bytes"));
        if channels == 0 {
            return Err(format_err(8, "channel count is zero"));
        }
        if got < HEADER_LEN as usize {
            return Err(format_err(got as u64, "truncated frame count"));
        }
        let frame_count = u64::from_le_bytes(raw[12..20].try_into().expect("8 bytes"));
        Ok(Self {
            inner,
            header: StreamHeader {
                channels,
                frame_count,
            },
            frames_read: 0,
            frame: vec![0u8; 4 * channels as usize],
            staging: Vec::new(),
            done: false,
        })
    }

    pub fn header(&self) -> StreamHeader {
        self.header
    }

    pub fn frames_read(&self) -> u64 {
        self.frames_read
    }

    fn offset(&self) -> u64 {
        HEADER_LEN + self.frames_read * self.header.frame_bytes()
    }

    /// Reads the next frame into the internal buffer. `Ok(false)` at a clean
    /// end of stream.
    fn next_raw(&mut self) -> Result<bool> {
        if self.done {
            return Ok(false);
        }
        let declared = self.header.frame_count;
        if declared != 0 && self.frames_read == declared {
            let mut probe = [0u8; 1];
            if read_full(&mut self.inner, &mut probe)? != 0 {
                return Err(format_err(
                    self.offset(),
                    format!("trailing data after the declared {declared} frames"),
                ));
            }
            self.done = true;
            return Ok(false);
        }
        let got = read_full(&mut self.inner, &mut self.frame)?;
        if got == 0 {
            if declared != 0 {
                return Err(format_err(
                    self.offset(),
                    format!(
                        "stream ends after {} frames, header declares {declared}",
                        self.frames_read
                    ),
                ));
            }
            self.done = true;
            return Ok(false);
        }
        if got < self.frame.len() {
            return Err(format_err(
                self.offset() + got as u64,
                format!(
                    "truncated frame {}: {got} of {} bytes",
                    self.frames_read,
                    self.frame.len()
                ),
            ));
        }
        self.frames_read += 1;
        Ok(true)
    }

    /// Reads up to `max` frames into `buf`, which is resized to `[H, n]`
    /// where `n` is the number of frames actually read.
    pub fn read_frames(&mut self, buf: &mut Signal, max: usize) -> Result<usize> {
        let channels = self.header.channels as usize;
        if buf.channels() != channels {
            return Err(CliError::Usage("buffer channel count mismatch".into()));
        }
        self.staging.clear();
        let mut count = 0;
        while count < max && self.next_raw()? {
            self.staging.extend(
                self.frame
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))),
            );
            count += 1;
        }
        buf.reshape_time(count);
        for (t, frame) in self.staging.chunks_exact(channels).enumerate() {
            for (h, &v) in frame.iter().enumerate() {
                buf.set(h, t, v as f64);
            }
        }
        Ok(count)
    }

    /// Discards up to `frames` frames; returns how many were skipped.
    pub fn skip_frames(&mut self, frames: u64) -> Result<u64> {
        let mut skipped = 0;
        while skipped < frames && self.next_raw()? {
            skipped += 1;
        }
        Ok(skipped)
    }
}
