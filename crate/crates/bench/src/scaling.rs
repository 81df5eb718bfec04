//! Scaling sweeps: median wall time, analytic FLOPs and allocation peaks per
//! method and sequence length.

use std::io::Write;
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sts_core::{
    discretize, eval_conv_path, init_s4d_lin, materialize_kernels, scan_recurrent, DiscreteParams,
    ReadoutPolicy, SegmentPlan, Session, Signal, SsmConfig, TransferState,
};

use crate::alloc::PeakWindow;
use crate::attention::AttentionBaseline;
use crate::flops::{count_flops, FlopShape, Method};
use crate::{BenchError, Result};

pub const CSV_HEADER: &str = "method,L,M,flops,wall_ns,peak_bytes,checksum";

#[derive(Debug, Clone)]
pub struct ScalingConfig {
    /// Sequence lengths, strictly ascending.
    pub sweep: Vec<usize>,
    pub channels: usize,
    pub state_size: usize,
    pub seed: u64,
    pub segment_len: usize,
    pub d_attn: usize,
    pub repetitions: usize,
    /// Attention runs needing more heap than this are recorded as skipped.
    pub memory_ceiling: u64,
    pub methods: Vec<Method>,
    /// Run methods on separate threads. Allocation peaks are process-wide,
    /// so they overlap when this is set.
    pub parallel: bool,
}

impl Default for ScalingConfig {
    fn default() -> Self {
        Self {
            sweep: vec![1 << 12, 1 << 14, 1 << 16],
            channels: 4,
            state_size: 16,
            seed: 0,
            segment_len: 1024,
            d_attn: 16,
            repetitions: 3,
            memory_ceiling: 4 << 30,
            methods: Method::ALL.to_vec(),
            parallel: false,
        }
    }
}

impl ScalingConfig {
    fn validate(&self) -> Result<()> {
        if self.sweep.is_empty() || self.sweep[0] == 0 {
            return Err(BenchError::Contract("sweep needs positive lengths".into()));
        }
        if self.sweep.windows(2).any(|w| w[0] >= w[1]) {
            return Err(BenchError::Contract(
                "sweep must be strictly ascending".into(),
            ));
        }
        if self.repetitions < 3 {
            return Err(BenchError::Contract(
                "at least 3 repetitions are required".into(),
            ));
        }
        if self.segment_len == 0 || self.d_attn == 0 {
            return Err(BenchError::Contract(
                "segment length and attention dimension must be positive".into(),
            ));
        }
        if self.methods.is_empty() {
            return Err(BenchError::Contract("no methods selected".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRecord {
    pub method: Method,
    pub len: usize,
    pub segment_len: usize,
    pub flops: u64,
    /// Median over repetitions. For `sts_chunked` this covers segment
    /// processing only; kernels depend on `M` alone and are built beforehand.
    pub wall_ns: u64,
    /// Allocation high-water mark of one repetition, including setup.
    /// Requires [`crate::PeakAlloc`] as the global allocator, else 0. For a
    /// skipped run this is the estimated requirement.
    pub peak_bytes: u64,
    /// Sum of all outputs.
    pub checksum: f64,
    pub skipped: bool,
}

impl BenchRecord {
    pub fn csv_row(&self) -> String {
        if self.skipped {
            format!(
                "{},{},{},{},,{},skipped",
                self.method, self.len, self.segment_len, self.flops, self.peak_bytes
            )
        } else {
            format!(
                "{},{},{},{},{},{},{:e}",
                self.method,
                self.len,
                self.segment_len,
                self.flops,
                self.wall_ns,
                self.peak_bytes,
                self.checksum
            )
        }
    }
}

pub fn write_csv<W: Write>(mut out: W, records: &[BenchRecord]) -> std::io::Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for r in records {
        writeln!(out, "{}", r.csv_row())?;
    }
    Ok(())
}

/// Least-squares slope of `ln(wall_ns)` against `ln(L)` over non-skipped
/// records of one method. `None` with fewer than two points.
pub fn loglog_slope(records: &[BenchRecord], method: Method) -> Option<f64> {
    let points: Vec<(f64, f64)> = records
        .iter()
        .filter(|r| r.method == method && !r.skipped && r.wall_ns > 0)
        .map(|r| ((r.len as f64).ln(), (r.wall_ns as f64).ln()))
        .collect();
    if points.len() < 2 {
        return None;
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    Some(sxy / sxx)
}

fn input_signal(channels: usize, len: usize, seed: u64) -> Signal {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (len as u64).rotate_left(32));
    let data = (0..channels * len)
        .map(|_| rng.sample(StandardNormal))
        .collect();
    Signal::from_vec(channels, len, data).expect("shape")
}

fn median(mut v: Vec<u64>) -> u64 {
    v.sort_unstable();
    v[v.len() / 2]
}

struct Context<'a> {
    config: &'a ScalingConfig,
    params: Arc<DiscreteParams>,
    attention: AttentionBaseline,
}

impl Context<'_> {
    fn shape(&self, len: usize, segment_len: usize) -> FlopShape {
        FlopShape {
            channels: self.config.channels as u64,
            state_size: self.config.state_size as u64,
            len: len as u64,
            segment_len: segment_len as u64,
            d_attn: self.config.d_attn as u64,
        }
    }

    fn measure(&self, method: Method, len: usize) -> Result<BenchRecord> {
        let segment_len = self.config.segment_len.min(len);
        let flops = count_flops(method, self.shape(len, segment_len))?;
        let mut record = BenchRecord {
            method,
            len,
            segment_len,
            flops,
            wall_ns: 0,
            peak_bytes: 0,
            checksum: 0.0,
            skipped: false,
        };
        if method == Method::Attention {
            let needed = self.attention.required_bytes(len);
            if needed > self.config.memory_ceiling {
                record.peak_bytes = needed;
                record.skipped = true;
                return Ok(record);
            }
        }

        let x = input_signal(self.config.channels, len, self.config.seed);
        let mut walls = Vec::with_capacity(self.config.repetitions);
        for _ in 0..self.config.repetitions {
            let window = PeakWindow::start();
            let (wall, checksum) = self.run_once(method, &x, segment_len)?;
            walls.push(wall);
            record.peak_bytes = record.peak_bytes.max(window.peak_bytes());
            record.checksum = checksum;
        }
        record.wall_ns = median(walls);
        Ok(record)
    }

    fn run_once(&self, method: Method, x: &Signal, segment_len: usize) -> Result<(u64, f64)> {
        let params = &self.params;
        match method {
            Method::Recurrent => {
                let t0 = Instant::now();
                let (y, _) = scan_recurrent(params, x, &TransferState::for_params(params))?;
                let checksum = y.as_slice().iter().sum();
                Ok((t0.elapsed().as_nanos() as u64, checksum))
            }
            Method::FftFull => {
                let t0 = Instant::now();
                let kernels = materialize_kernels(params, x.len())?;
                let (y, _) =
                    eval_conv_path(params, &kernels, x, &TransferState::for_params(params))?;
                let checksum = y.as_slice().iter().sum();
                Ok((t0.elapsed().as_nanos() as u64, checksum))
            }
            Method::StsChunked => {
                let plan = SegmentPlan::new(segment_len, true)?;
                let mut session =
                    Session::new(Arc::clone(params), plan, ReadoutPolicy::LastTokenPerSegment)?;
                let mut buf = Signal::zeros(x.channels(), segment_len);
                // Touch the session's buffers outside the timed region. A zero
                // segment from a zero state leaves the state exactly zero, so
                // only the position needs resetting.
                session.process_segment(&buf)?;
                session = session.with_state(TransferState::for_params(params))?;
                let mut checksum = 0.0;
                let t0 = Instant::now();
                let mut start = 0;
                while start < x.len() {
                    let m = segment_len.min(x.len() - start);
                    if buf.len() != m {
                        buf.reshape_time(m);
                    }
                    for h in 0..x.channels() {
                        buf.channel_mut(h)
                            .copy_from_slice(&x.channel(h)[start..start + m]);
                    }
                    session.process_segment(&buf)?;
                    checksum += session
                        .last_segment_outputs()
                        .as_slice()
                        .iter()
                        .sum::<f64>();
                    start += m;
                }
                Ok((t0.elapsed().as_nanos() as u64, checksum))
            }
            Method::Attention => {
                let t0 = Instant::now();
                let out = self.attention.forward(x)?;
                let checksum = out.iter().sum();
                Ok((t0.elapsed().as_nanos() as u64, checksum))
            }
        }
    }
}

/// Runs every selected method over the sweep. Rows are ordered by method,
/// then by length.
pub fn run_scaling(config: &ScalingConfig) -> Result<Vec<BenchRecord>> {
    config.validate()?;
    let ssm = SsmConfig::new(config.channels, config.state_size, config.seed);
    let params = Arc::new(discretize(&init_s4d_lin(&ssm)?)?);
    let ctx = Context {
        config,
        params,
        attention: AttentionBaseline::new(config.channels, config.d_attn, config.seed)?,
    };
    let mut methods = config.methods.clone();
    methods.sort();
    methods.dedup();

    let per_method = |method: Method| -> Result<Vec<BenchRecord>> {
        config
            .sweep
            .iter()
            .map(|&len| ctx.measure(method, len))
            .collect()
    };
    let rows: Vec<Vec<BenchRecord>> = if config.parallel {
        std::thread::scope(|scope| {
            let handles: Vec<_> = methods
                .iter()
                .map(|&m| scope.spawn(move || per_method(m)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("benchmark thread panicked"))
                .collect::<Result<_>>()
        })?
    } else {
        methods
            .iter()
            .map(|&m| per_method(m))
            .collect::<Result<_>>()?
    };
    Ok(rows.into_iter().flatten().collect())
}
