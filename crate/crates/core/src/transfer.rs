//! Segment-by-segment streaming with a carried hidden state.
//!
//! A [`Session`] owns the [`TransferState`] of one stream. Each call to
//! [`Session::process_segment`] evaluates a block of at most `M` timesteps
//! through the kernel path, seeded with the state left by the previous block,
//! and replaces the state with the one at the block's end. Input blocks are
//! not retained, so memory depends on `(H, N, M)` only.

use std::sync::Arc;

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::kernel::{
    materialize_kernels, ExponentConvention, KernelCache, KernelSet, SegmentEngine,
};
use crate::signal::Signal;
use crate::ssm::{step_in_place, DiscreteParams, TransferState};

pub const DEFAULT_TIME_BUCKETS: u32 = 32;

const CHECKPOINT_MAGIC: &[u8; 4] = b"STST";
const CHECKPOINT_VERSION: u32 = 1;
const CHECKPOINT_HEADER_LEN: usize = 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SegmentPlan {
    segment_len: usize,
    allow_partial_tail: bool,
}

impl SegmentPlan {
    pub fn new(segment_len: usize, allow_partial_tail: bool) -> Result<Self> {
        if segment_len == 0 {
            return Err(Error::Plan("segment length must be at least 1".into()));
        }
        Ok(Self {
            segment_len,
            allow_partial_tail,
        })
    }

    pub fn segment_len(&self) -> usize {
        self.segment_len
    }

    pub fn allow_partial_tail(&self) -> bool {
        self.allow_partial_tail
    }
}

/// Splits `[0, total_len)` into consecutive `(start, len)` segments of the
/// plan's length, with a shorter final segment when the plan allows one.
pub fn plan_segments(total_len: u64, plan: &SegmentPlan) -> Result<Vec<(u64, usize)>> {
    let m = plan.segment_len as u64;
    let tail = total_len % m;
    if tail != 0 && !plan.allow_partial_tail {
        return Err(Error::Plan(format!(
            "{total_len} timesteps do not divide into segments of {m}"
        )));
    }
    let full = total_len / m;
    let mut out = Vec::with_capacity(full as usize + usize::from(tail != 0));
    out.extend((0..full).map(|i| (i * m, plan.segment_len)));
    if tail != 0 {
        out.push((full * m, tail as usize));
    }
    Ok(out)
}

/// Which outputs a segment emits. Never affects the state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ReadoutPolicy {
    AllTokens,
    #[default]
    LastTokenPerSegment,
    FinalTokenOnly,
}

/// Output of every channel at one stream position.
#[derive(Debug, Clone, PartialEq)]
pub struct Emission {
    /// Zero-based index of the timestep within the stream.
    pub position: u64,
    /// Time bucket of `position`, present when the stream length was declared.
    pub bucket: Option<u32>,
    pub values: Vec<f64>,
}

/// Maps a timestamp to one of `buckets` equal-width bins over `[0, total]`;
/// `t == total` lands in the last bin.
pub fn bucketize_time(t: u64, total: u64, buckets: u32) -> Result<u32> {
    if total == 0 {
        return Err(Error::contract("total duration must be positive"));
    }
    if buckets == 0 {
        return Err(Error::contract("bucket count must be positive"));
    }
    if t > total {
        return Err(Error::contract(format!(
            "timestamp {t} beyond total {total}"
        )));
    }
    let bin = (t as u128 * buckets as u128 / total as u128) as u32;
    Ok(bin.min(buckets - 1))
}

/// Serializes a state into the `STST` checkpoint format (little-endian).
pub fn save_state(state: &TransferState) -> Vec<u8> {
    let mut out = Vec::with_capacity(CHECKPOINT_HEADER_LEN + state.hidden().len() * 16);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(state.channels() as u32).to_le_bytes());
    out.extend_from_slice(&(state.state_size() as u32).to_le_bytes());
    out.extend_from_slice(&state.position().to_le_bytes());
    for z in state.hidden() {
        out.extend_from_slice(&z.re.to_le_bytes());
        out.extend_from_slice(&z.im.to_le_bytes());
    }
    out
}

fn field<'a>(bytes: &'a [u8], at: usize, len: usize, name: &'static str) -> Result<&'a [u8]> {
    bytes.get(at..at + len).ok_or_else(|| Error::Format {
        field: name,
        detail: format!(
            "truncated: need bytes {at}..{}, have {}",
            at + len,
            bytes.len()
        ),
    })
}

fn le_u32(bytes: &[u8]) -> u32 {
    u32::from_le_bytes(bytes.try_into().expect("4 bytes"))
}

/// Parses a checkpoint and checks it against the system it will seed.
pub fn load_state(bytes: &[u8], params: &DiscreteParams) -> Result<TransferState> {
    let magic = field(bytes, 0, 4, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Format {
            field: "magic",
            detail: format!("expected \"STST\", found {magic:02x?}"),
        });
    }
    let version = le_u32(field(bytes, 4, 4, "version")?);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format {
            field: "version",
            detail: format!("unsupported version {version}"),
        });
    }
    let channels = le_u32(field(bytes, 8, 4, "channels")?) as usize;
    let state_size = le_u32(field(bytes, 12, 4, "state_size")?) as usize;
    let position = u64::from_le_bytes(
        field(bytes, 16, 8, "position")?
            .try_into()
            .expect("8 bytes"),
    );
    if channels != params.channels() {
        return Err(Error::Format {
            field: "channels",
            detail: format!(
                "checkpoint has {channels}, system has {}",
                params.channels()
            ),
        });
    }
    if state_size != params.state_size() {
        return Err(Error::Format {
            field: "state_size",
            detail: format!(
                "checkpoint has {state_size}, system has {}",
                params.state_size()
            ),
        });
    }
    let cells = channels * state_size;
    let payload = &bytes[CHECKPOINT_HEADER_LEN..];
    if payload.len() != cells * 16 {
        return Err(Error::Format {
            field: "payload",
            detail: format!("expected {} bytes, found {}", cells * 16, payload.len()),
        });
    }
    let h = payload
        .chunks_exact(16)
        .map(|pair| {
            let re = f64::from_le_bytes(pair[..8].try_into().expect("8 bytes"));
            let im = f64::from_le_bytes(pair[8..].try_into().expect("8 bytes"));
            Complex64::new(re, im)
        })
        .collect();
    TransferState::from_parts(channels, state_size, h, position)
}

struct TailEngine {
    kernels: Arc<KernelSet>,
    engine: SegmentEngine,
}

/// Streaming evaluation of one input stream.
pub struct Session {
    params: Arc<DiscreteParams>,
    plan: SegmentPlan,
    policy: ReadoutPolicy,
    state: TransferState,
    scratch_state: TransferState,
    kernels: Arc<KernelSet>,
    engine: SegmentEngine,
    tail: Option<TailEngine>,
    out: Signal,
    step_x: Vec<f64>,
    step_y: Vec<f64>,
    segment_index: u64,
    tail_seen: bool,
    declared_total: Option<u64>,
    final_output: Option<Emission>,
    closed: bool,
    convention: ExponentConvention,
}

impl std::fmt::Debug for Session {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Session")
            .field("plan", &self.plan)
            .field("policy", &self.policy)
            .field("position", &self.state.position())
            .field("segment_index", &self.segment_index)
            .field("closed", &self.closed)
            .finish_non_exhaustive()
    }
}

impl Session {
    pub fn new(
        params: Arc<DiscreteParams>,
        plan: SegmentPlan,
        policy: ReadoutPolicy,
    ) -> Result<Self> {
        let kernels = Arc::new(materialize_kernels(&params, plan.segment_len)?);
        Ok(Self::assemble(params, plan, policy, kernels))
    }

    /// Like [`Session::new`] but takes the segment kernels from a shared cache.
    pub fn with_cache(
        params: Arc<DiscreteParams>,
        plan: SegmentPlan,
        policy: ReadoutPolicy,
        cache: &KernelCache,
    ) -> Result<Self> {
        let kernels = cache.get_or_materialize(&params, plan.segment_len)?;
        Ok(Self::assemble(params, plan, policy, kernels))
    }

    fn assemble(
        params: Arc<DiscreteParams>,
        plan: SegmentPlan,
        policy: ReadoutPolicy,
        kernels: Arc<KernelSet>,
    ) -> Self {
        let (channels, state_size) = (params.channels(), params.state_size());
        let engine = SegmentEngine::new(&kernels);
        Self {
            state: TransferState::zeros(channels, state_size),
            scratch_state: TransferState::zeros(channels, state_size),
            out: Signal::zeros(channels, plan.segment_len),
            step_x: vec![0.0; channels],
            step_y: vec![0.0; channels],
            params,
            plan,
            policy,
            kernels,
            engine,
            tail: None,
            segment_index: 0,
            tail_seen: false,
            declared_total: None,
            final_output: None,
            closed: false,
            convention: ExponentConvention::Recurrence,
        }
    }

    /// Continues from a previously saved state. A position that is not a
    /// multiple of the segment length marks a stream that already ended with
    /// a partial segment.
    pub fn with_state(mut self, state: TransferState) -> Result<Self> {
        state.check_shape(&self.params)?;
        let m = self.plan.segment_len as u64;
        if !state.position().is_multiple_of(m) && !self.plan.allow_partial_tail {
            return Err(Error::Session(format!(
                "state position {} is not on a segment boundary of {m}",
                state.position()
            )));
        }
        self.segment_index = state.position() / m;
        self.tail_seen = !state.position().is_multiple_of(m);
        self.state = state;
        Ok(self)
    }

    /// Declares the stream length so emissions carry a time bucket.
    pub fn with_declared_total(mut self, total: u64) -> Result<Self> {
        if total == 0 {
            return Err(Error::contract("declared total must be positive"));
        }
        self.declared_total = Some(total);
        Ok(self)
    }

    /// Overrides the exponent convention of the kernel path. Only useful to
    /// show that the equivalence checks reject [`ExponentConvention::ShiftedByOne`].
    pub fn with_exponent_convention(mut self, convention: ExponentConvention) -> Self {
        self.convention = convention;
        self.engine = SegmentEngine::new(&self.kernels).with_convention(convention);
        self.tail = None;
        self
    }

    pub fn params(&self) -> &DiscreteParams {
        &self.params
    }

    pub fn plan(&self) -> SegmentPlan {
        self.plan
    }

    pub fn policy(&self) -> ReadoutPolicy {
        self.policy
    }

    pub fn state(&self) -> &TransferState {
        &self.state
    }

    pub fn segment_index(&self) -> u64 {
        self.segment_index
    }

    pub fn is_closed(&self) -> bool {
        self.closed
    }

    /// Outputs of the most recent segment, `[H, m]`. Valid until the next feed.
    pub fn last_segment_outputs(&self) -> &Signal {
        &self.out
    }

    pub fn save_state(&self) -> Vec<u8> {
        save_state(&self.state)
    }

    /// Evaluates the next block of `m <= M` timesteps and returns what the
    /// readout policy emits for it.
    pub fn process_segment(&mut self, x: &Signal) -> Result<Vec<Emission>> {
        if self.closed {
            return Err(Error::Session("session is closed".into()));
        }
        let channels = self.params.channels();
        if x.channels() != channels {
            return Err(Error::Session(format!(
                "segment has {} channels, system has {channels}",
                x.channels()
            )));
        }
        let m = x.len();
        let full = self.plan.segment_len;
        if m == 0 || m > full {
            return Err(Error::Session(format!(
                "segment length {m} outside 1..={full}"
            )));
        }
        if self.tail_seen {
            return Err(Error::Session(
                "no segments may follow a partial tail segment".into(),
            ));
        }
        if m < full && !self.plan.allow_partial_tail {
            return Err(Error::Plan(format!(
                "partial segment of {m} with segment length {full}"
            )));
        }
        let start = self.state.position();
        if let Some(total) = self.declared_total {
            if start + m as u64 > total {
                return Err(Error::Session(format!(
                    "stream exceeds declared total of {total} timesteps"
                )));
            }
        }
        for h in 0..channels {
            if let Some(k) = x.channel(h).iter().position(|v| !v.is_finite()) {
                return Err(Error::Numeric {
                    what: "segment input",
                    index: start + k as u64,
                });
            }
        }

        if self.out.len() != m {
            self.out.reshape_time(m);
        }
        self.scratch_state.clone_from(&self.state);
        if m == 1 {
            for h in 0..channels {
                self.step_x[h] = x.get(h, 0);
            }
            step_in_place(
                &self.params,
                &self.step_x,
                &mut self.scratch_state,
                &mut self.step_y,
            )?;
            for h in 0..channels {
                self.out.set(h, 0, self.step_y[h]);
            }
        } else if m == full {
            self.engine.evaluate(
                &self.params,
                &self.kernels,
                x,
                &mut self.scratch_state,
                &mut self.out,
            )?;
        } else {
            if self.tail.as_ref().is_none_or(|t| t.kernels.len() != m) {
                let kernels = Arc::new(materialize_kernels(&self.params, m)?);
                let engine = SegmentEngine::new(&kernels).with_convention(self.convention);
                self.tail = Some(TailEngine { kernels, engine });
            }
            let tail = self.tail.as_mut().expect("tail engine");
            tail.engine.evaluate(
                &self.params,
                &tail.kernels,
                x,
                &mut self.scratch_state,
                &mut self.out,
            )?;
        }
        std::mem::swap(&mut self.state, &mut self.scratch_state);
        if m == full {
            self.segment_index += 1;
        } else {
            self.tail_seen = true;
        }

        let mut emitted = Vec::new();
        match self.policy {
            ReadoutPolicy::AllTokens => {
                emitted.reserve(m);
                for t in 0..m {
                    emitted.push(self.emission(start + t as u64, t)?);
                }
            }
            ReadoutPolicy::LastTokenPerSegment => {
                emitted.push(self.emission(start + m as u64 - 1, m - 1)?);
            }
            ReadoutPolicy::FinalTokenOnly => {
                self.final_output = Some(self.emission(start + m as u64 - 1, m - 1)?);
            }
        }
        Ok(emitted)
    }

    fn emission(&self, position: u64, t: usize) -> Result<Emission> {
        let bucket = match self.declared_total {
            Some(total) => Some(bucketize_time(position, total, DEFAULT_TIME_BUCKETS)?),
            None => None,
        };
        Ok(Emission {
            position,
            bucket,
            values: (0..self.params.channels())
                .map(|h| self.out.get(h, t))
                .collect(),
        })
    }

    /// Ends the stream. Under [`ReadoutPolicy::FinalTokenOnly`] this returns
    /// the last output; otherwise nothing is left to emit.
    pub fn close(&mut self) -> Result<Vec<Emission>> {
        if self.closed {
            return Err(Error::Session("session is already closed".into()));
        }
        self.closed = true;
        Ok(self.final_output.take().into_iter().collect())
    }
}

/// Evaluates an in-memory sequence segment by segment from a zero state and
/// reassembles every output, returning `[H, L]` outputs and the final state.
pub fn eval_chunked(
    params: &Arc<DiscreteParams>,
    x: &Signal,
    segment_len: usize,
    convention: ExponentConvention,
) -> Result<(Signal, TransferState)> {
    let plan = SegmentPlan::new(segment_len, true)?;
    let mut session = Session::new(Arc::clone(params), plan, ReadoutPolicy::LastTokenPerSegment)?
        .with_exponent_convention(convention);
    let mut y = Signal::zeros(x.channels(), x.len());
    let mut buf = Signal::zeros(x.channels(), segment_len);
    for (start, len) in plan_segments(x.len() as u64, &plan)? {
        let start = start as usize;
        if buf.len() != len {
            buf.reshape_time(len);
        }
        for h in 0..x.channels() {
            buf.channel_mut(h)
                .copy_from_slice(&x.channel(h)[start..start + len]);
        }
        session.process_segment(&buf)?;
        let out = session.last_segment_outputs();
        for h in 0..x.channels() {
            y.channel_mut(h)[start..start + len].copy_from_slice(out.channel(h));
        }
    }
    Ok((y, session.state().clone()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::{relative_error, relative_error_complex};
    use crate::ssm::{discretize, init_s4d_lin, scan_recurrent, step, SsmConfig};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn system(channels: usize, state_size: usize, seed: u64) -> Arc<DiscreteParams> {
        Arc::new(
            discretize(&init_s4d_lin(&SsmConfig::new(channels, state_size, seed)).unwrap())
                .unwrap(),
        )
    }

    fn random_signal(channels: usize, len: usize, seed: u64) -> Signal {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Signal::from_vec(
            channels,
            len,
            (0..channels * len)
                .map(|_| rng.sample(StandardNormal))
                .collect(),
        )
        .unwrap()
    }

    /// Runs the whole signal through a session with `AllTokens` and
    /// reassembles the outputs into a `[H, L]` signal.
    fn chunked(params: &Arc<DiscreteParams>, x: &Signal, m: usize) -> (Signal, TransferState) {
        let plan = SegmentPlan::new(m, true).unwrap();
        let mut session = Session::new(Arc::clone(params), plan, ReadoutPolicy::AllTokens).unwrap();
        let mut y = Signal::zeros(x.channels(), x.len());
        for (start, len) in plan_segments(x.len() as u64, &plan).unwrap() {
            let seg = x.slice_time(start as usize, len);
            for e in session.process_segment(&seg).unwrap() {
                for (h, v) in e.values.iter().enumerate() {
                    y.set(h, e.position as usize, *v);
                }
            }
        }
        (y, session.state().clone())
    }

    fn running_sum() -> Arc<DiscreteParams> {
        Arc::new(DiscreteParams::scalar(1, 1.0, 1.0, 1.0, 0.0))
    }

    #[test]
    fn plan_examples() {
        let plan = SegmentPlan::new(16, false).unwrap();
        let segs = plan_segments(1024, &plan).unwrap();
        assert_eq!(segs.len(), 64);
        assert!(segs.iter().all(|&(_, len)| len == 16));

        let partial = SegmentPlan::new(4, true).unwrap();
        assert_eq!(
            plan_segments(10, &partial).unwrap(),
            vec![(0, 4), (4, 4), (8, 2)]
        );
        assert!(plan_segments(0, &partial).unwrap().is_empty());
        assert!(matches!(
            plan_segments(10, &SegmentPlan::new(4, false).unwrap()),
            Err(Error::Plan(_))
        ));
        assert!(SegmentPlan::new(0, true).is_err());
    }

    #[test]
    fn bucket_examples() {
        assert_eq!(bucketize_time(0, 100, 32).unwrap(), 0);
        assert_eq!(bucketize_time(100, 100, 32).unwrap(), 31);
        assert_eq!(bucketize_time(50, 100, 32).unwrap(), 16);
        assert!(bucketize_time(0, 0, 32).is_err());
        assert!(bucketize_time(101, 100, 32).is_err());
        assert!(bucketize_time(1, 10, 0).is_err());
        // no overflow near u64::MAX
        assert_eq!(bucketize_time(u64::MAX, u64::MAX, 32).unwrap(), 31);
    }

    #[test]
    fn last_token_per_segment_running_sum() {
        let plan = SegmentPlan::new(2, false).unwrap();
        let mut s = Session::new(running_sum(), plan, ReadoutPolicy::LastTokenPerSegment).unwrap();
        let a = s
            .process_segment(&Signal::from_rows(vec![vec![1.0, 2.0]]).unwrap())
            .unwrap();
        let b = s
            .process_segment(&Signal::from_rows(vec![vec![3.0, 4.0]]).unwrap())
            .unwrap();
        assert_eq!(a.len(), 1);
        assert_eq!(a[0].position, 1);
        assert!((a[0].values[0] - 3.0).abs() < 1e-12);
        assert_eq!(b[0].position, 3);
        assert!((b[0].values[0] - 10.0).abs() < 1e-12);
        assert_eq!(s.state().position(), 4);
        assert_eq!(s.segment_index(), 2);
    }

    #[test]
    fn eval_chunked_matches_session_emissions() {
        let p = system(2, 5, 17);
        let x = random_signal(2, 77, 6);
        let (a, ha) = chunked(&p, &x, 10);
        let (b, hb) = eval_chunked(&p, &x, 10, ExponentConvention::Recurrence).unwrap();
        assert_eq!(a, b);
        assert!(ha.bitwise_eq(&hb));
    }

    #[test]
    fn single_chunk_equals_scan() {
        let p = system(2, 8, 3);
        let x = random_signal(2, 300, 1);
        let (y_ref, h_ref) = scan_recurrent(&p, &x, &TransferState::for_params(&p)).unwrap();
        let (y, h) = chunked(&p, &x, 300);
        assert!(relative_error(y.as_slice(), y_ref.as_slice()) <= 1e-10);
        assert!(relative_error_complex(h.hidden(), h_ref.hidden()) <= 1e-10);
    }

    #[test]
    fn splits_agree_with_each_other_and_scan() {
        let p = system(3, 16, 12);
        let x = random_signal(3, 256, 2);
        let (y_ref, h_ref) = scan_recurrent(&p, &x, &TransferState::for_params(&p)).unwrap();
        for m in [1usize, 7, 64, 256] {
            let (y, h) = chunked(&p, &x, m);
            assert!(
                relative_error(y.as_slice(), y_ref.as_slice()) <= 1e-10,
                "M = {m}"
            );
            assert!(
                relative_error_complex(h.hidden(), h_ref.hidden()) <= 1e-10,
                "M = {m}"
            );
            assert_eq!(h.position(), 256);
        }
    }

    #[test]
    fn unit_segments_follow_step_exactly() {
        let p = system(2, 4, 5);
        let x = random_signal(2, 50, 3);
        let (y, h) = chunked(&p, &x, 1);
        let mut state = TransferState::for_params(&p);
        for t in 0..50 {
            let (yt, next) = step(&p, &[x.get(0, t), x.get(1, t)], &state).unwrap();
            assert_eq!(yt[0].to_bits(), y.get(0, t).to_bits());
            assert_eq!(yt[1].to_bits(), y.get(1, t).to_bits());
            state = next;
        }
        assert!(state.bitwise_eq(&h));
    }

    #[test]
    fn policies_do_not_change_state() {
        let p = system(2, 6, 8);
        let x = random_signal(2, 100, 4);
        let plan = SegmentPlan::new(16, true).unwrap();
        let mut states = Vec::new();
        let mut counts = Vec::new();
        for policy in [
            ReadoutPolicy::AllTokens,
            ReadoutPolicy::LastTokenPerSegment,
            ReadoutPolicy::FinalTokenOnly,
        ] {
            let mut s = Session::new(Arc::clone(&p), plan, policy).unwrap();
            let mut emitted = 0;
            for (start, len) in plan_segments(100, &plan).unwrap() {
                emitted += s
                    .process_segment(&x.slice_time(start as usize, len))
                    .unwrap()
                    .len();
            }
            let tail = s.close().unwrap();
            emitted += tail.len();
            if policy == ReadoutPolicy::FinalTokenOnly {
                assert_eq!(tail[0].position, 99);
            }
            counts.push(emitted);
            states.push(s.state().clone());
        }
        assert_eq!(counts, vec![100, 7, 1]);
        assert!(states[0].bitwise_eq(&states[1]));
        assert!(states[1].bitwise_eq(&states[2]));
    }

    #[test]
    fn session_errors() {
        let p = system(2, 3, 0);
        let strict = SegmentPlan::new(4, false).unwrap();
        let mut s = Session::new(Arc::clone(&p), strict, ReadoutPolicy::AllTokens).unwrap();
        assert!(matches!(
            s.process_segment(&random_signal(2, 3, 0)),
            Err(Error::Plan(_))
        ));
        assert!(matches!(
            s.process_segment(&random_signal(1, 4, 0)),
            Err(Error::Session(_))
        ));
        assert!(s.process_segment(&random_signal(2, 5, 0)).is_err());
        let mut bad = random_signal(2, 4, 0);
        bad.set(1, 2, f64::INFINITY);
        assert!(matches!(
            s.process_segment(&bad),
            Err(Error::Numeric { index: 2, .. })
        ));
        assert_eq!(s.state().position(), 0);
        s.process_segment(&random_signal(2, 4, 0)).unwrap();
        s.close().unwrap();
        assert!(s.process_segment(&random_signal(2, 4, 0)).is_err());
        assert!(s.close().is_err());

        let loose = SegmentPlan::new(4, true).unwrap();
        let mut s = Session::new(Arc::clone(&p), loose, ReadoutPolicy::AllTokens).unwrap();
        s.process_segment(&random_signal(2, 2, 0)).unwrap();
        assert!(s.process_segment(&random_signal(2, 4, 0)).is_err());
    }

    #[test]
    fn declared_total_buckets() {
        let p = system(1, 2, 0);
        let plan = SegmentPlan::new(10, true).unwrap();
        let mut s = Session::new(Arc::clone(&p), plan, ReadoutPolicy::AllTokens)
            .unwrap()
            .with_declared_total(3200)
            .unwrap();
        let mut seen = std::collections::BTreeSet::new();
        for _ in 0..320 {
            for e in s.process_segment(&random_signal(1, 10, 1)).unwrap() {
                seen.insert(e.bucket.unwrap());
            }
        }
        assert_eq!(seen.len(), 32);
        assert!(s.process_segment(&random_signal(1, 1, 1)).is_err());
    }

    #[test]
    fn checkpoint_layout() {
        let state = TransferState::from_parts(
            1,
            2,
            vec![Complex64::new(1.5, -2.0), Complex64::new(0.0, 3.25)],
            0x0102_0304_0506_0708,
        )
        .unwrap();
        let bytes = save_state(&state);
        assert_eq!(bytes.len(), 24 + 32);
        assert_eq!(&bytes[..4], b"STST");
        assert_eq!(&bytes[4..8], &[1, 0, 0, 0]);
        assert_eq!(&bytes[8..12], &[1, 0, 0, 0]);
        assert_eq!(&bytes[12..16], &[2, 0, 0, 0]);
        assert_eq!(&bytes[16..24], &[8, 7, 6, 5, 4, 3, 2, 1]);
        assert_eq!(&bytes[24..32], &1.5f64.to_le_bytes());
        assert_eq!(&bytes[32..40], &(-2.0f64).to_le_bytes());
    }

    #[test]
    fn fresh_checkpoint_is_zero() {
        let p = system(2, 3, 1);
        let s = Session::new(
            Arc::clone(&p),
            SegmentPlan::new(4, true).unwrap(),
            ReadoutPolicy::default(),
        )
        .unwrap();
        let bytes = s.save_state();
        assert_eq!(&bytes[16..24], &[0; 8]);
        assert!(bytes[24..].iter().all(|&b| b == 0));
        let loaded = load_state(&bytes, &p).unwrap();
        assert!(loaded.bitwise_eq(s.state()));
    }

    #[test]
    fn checkpoint_rejections_name_the_field() {
        let p = system(2, 3, 1);
        let bytes = save_state(&TransferState::for_params(&p));
        let field_of = |b: &[u8], params: &DiscreteParams| match load_state(b, params) {
            Err(Error::Format { field, .. }) => field,
            other => panic!("expected format error, got {other:?}"),
        };
        let mut b = bytes.clone();
        b[0] = b'X';
        assert_eq!(field_of(&b, &p), "magic");
        let mut b = bytes.clone();
        b[4] = 2;
        assert_eq!(field_of(&b, &p), "version");
        assert_eq!(field_of(&bytes, &system(3, 3, 1)), "channels");
        assert_eq!(field_of(&bytes, &system(2, 4, 1)), "state_size");
        assert_eq!(field_of(&bytes[..bytes.len() - 1], &p), "payload");
        assert_eq!(field_of(&bytes[..20], &p), "position");
        assert_eq!(field_of(&bytes[..2], &p), "magic");
        let mut b = bytes.clone();
        b.push(0);
        assert_eq!(field_of(&b, &p), "payload");
    }

    #[test]
    fn resume_matches_uninterrupted_bitwise() {
        let p = system(2, 8, 31);
        let x = random_signal(2, 1000, 9);
        let plan = SegmentPlan::new(100, true).unwrap();

        let mut whole = Session::new(Arc::clone(&p), plan, ReadoutPolicy::AllTokens).unwrap();
        let mut expected = Vec::new();
        for (start, len) in plan_segments(1000, &plan).unwrap() {
            expected.extend(
                whole
                    .process_segment(&x.slice_time(start as usize, len))
                    .unwrap(),
            );
        }

        let mut first = Session::new(Arc::clone(&p), plan, ReadoutPolicy::AllTokens).unwrap();
        let mut got = Vec::new();
        for seg in 0..5 {
            got.extend(
                first
                    .process_segment(&x.slice_time(seg * 100, 100))
                    .unwrap(),
            );
        }
        let bytes = first.save_state();
        drop(first);
        let restored = load_state(&bytes, &p).unwrap();
        assert_eq!(save_state(&restored), bytes);
        let mut second = Session::new(Arc::clone(&p), plan, ReadoutPolicy::AllTokens)
            .unwrap()
            .with_state(restored)
            .unwrap();
        assert_eq!(second.segment_index(), 5);
        for seg in 5..10 {
            got.extend(
                second
                    .process_segment(&x.slice_time(seg * 100, 100))
                    .unwrap(),
            );
        }
        assert_eq!(got.len(), expected.len());
        for (a, b) in got.iter().zip(&expected) {
            assert_eq!(a.position, b.position);
            let bits = |v: &[f64]| v.iter().map(|f| f.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.values), bits(&b.values));
        }
        assert!(second.state().bitwise_eq(whole.state()));
    }

    #[test]
    fn misaligned_resume_rejected_without_tail() {
        let p = system(1, 2, 0);
        let state = TransferState::from_parts(1, 2, vec![Complex64::new(0.0, 0.0); 2], 5).unwrap();
        let strict = SegmentPlan::new(4, false).unwrap();
        let s = Session::new(Arc::clone(&p), strict, ReadoutPolicy::AllTokens).unwrap();
        assert!(s.with_state(state.clone()).is_err());
        let loose = SegmentPlan::new(4, true).unwrap();
        let mut s = Session::new(p, loose, ReadoutPolicy::AllTokens)
            .unwrap()
            .with_state(state)
            .unwrap();
        assert!(s.process_segment(&random_signal(1, 4, 0)).is_err());
    }

    #[test]
    fn cached_sessions_share_kernels() {
        let cache = KernelCache::new();
        let p = system(2, 4, 2);
        let plan = SegmentPlan::new(32, true).unwrap();
        let x = random_signal(2, 64, 0);
        let mut a =
            Session::with_cache(Arc::clone(&p), plan, ReadoutPolicy::AllTokens, &cache).unwrap();
        let mut b =
            Session::with_cache(Arc::clone(&p), plan, ReadoutPolicy::AllTokens, &cache).unwrap();
        assert_eq!(cache.len(), 1);
        for seg in 0..2 {
            let ea = a.process_segment(&x.slice_time(seg * 32, 32)).unwrap();
            let eb = b.process_segment(&x.slice_time(seg * 32, 32)).unwrap();
            assert_eq!(ea, eb);
        }
    }

    #[test]
    fn shifted_convention_breaks_chunking() {
        let p = system(2, 8, 4);
        let x = random_signal(2, 256, 4);
        let (y_ref, _) = scan_recurrent(&p, &x, &TransferState::for_params(&p)).unwrap();
        let plan = SegmentPlan::new(64, true).unwrap();
        let mut s = Session::new(Arc::clone(&p), plan, ReadoutPolicy::AllTokens)
            .unwrap()
            .with_exponent_convention(ExponentConvention::ShiftedByOne);
        let mut y = Signal::zeros(2, 256);
        for seg in 0..4 {
            for e in s.process_segment(&x.slice_time(seg * 64, 64)).unwrap() {
                y.set(0, e.position as usize, e.values[0]);
                y.set(1, e.position as usize, e.values[1]);
            }
        }
        assert!(relative_error(y.as_slice(), y_ref.as_slice()) > 1e-2);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn any_partition_matches_scan(
            seed in any::<u64>(),
            len in 1usize..400,
            m in 1usize..128,
        ) {
            let p = system(2, 4, seed);
            let x = random_signal(2, len, seed.rotate_left(7));
            let (y_ref, h_ref) = scan_recurrent(&p, &x, &TransferState::for_params(&p)).unwrap();
            let (y, h) = chunked(&p, &x, m);
            prop_assert!(relative_error(y.as_slice(), y_ref.as_slice()) <= 1e-10);
            prop_assert!(relative_error_complex(h.hidden(), h_ref.hidden()) <= 1e-10);
        }

        #[test]
        fn checkpoint_round_trip_is_byte_exact(
            seed in any::<u64>(),
            channels in 1usize..5,
            state_size in 1usize..9,
            position in any::<u64>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let h = (0..channels * state_size)
                .map(|_| Complex64::new(rng.sample(StandardNormal), rng.sample(StandardNormal)))
                .collect();
            let state = TransferState::from_parts(channels, state_size, h, position).unwrap();
            let p = DiscreteParams::from_parts(
                channels,
                state_size,
                vec![Complex64::new(0.5, 0.0); channels * state_size],
                vec![Complex64::new(1.0, 0.0); channels * state_size],
                vec![Complex64::new(1.0, 0.0); channels * state_size],
                vec![0.0; channels],
            ).unwrap();
            let bytes = save_state(&state);
            let loaded = load_state(&bytes, &p).unwrap();
            prop_assert!(loaded.bitwise_eq(&state));
            prop_assert_eq!(save_state(&loaded), bytes);
        }
    }
}
