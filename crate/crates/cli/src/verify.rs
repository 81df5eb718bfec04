//! The equivalence suite behind `sts verify`.
//!
//! Every check compares a fast path against the step-by-step recurrence on
//! seeded random stable systems.

use std::io::Write;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sts_core::{
    discretize, eval_chunked, eval_conv_path_with, init_s4d_lin, load_state, materialize_kernels,
    relative_error, relative_error_complex, save_state, scan_recurrent, step, Complex64,
    DiscreteParams, ExponentConvention, ReadoutPolicy, SegmentPlan, Session, Signal, SsmConfig,
    TransferState,
};

use crate::error::Result;

/// Tolerance on outputs and states for sequences up to 4096 steps.
pub const TOL_SHORT: f64 = 1e-10;
/// Tolerance for longer sequences, where round-off in the FFT grows.
pub const TOL_LONG: f64 = 1e-7;
/// Tolerance for identities that involve no long sums.
pub const TOL_TIGHT: f64 = 1e-12;

pub fn tolerance_for(len: usize) -> f64 {
    if len <= 4096 {
        TOL_SHORT
    } else {
        TOL_LONG
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyOptions {
    pub sizes: Vec<usize>,
    pub seeds: Vec<u64>,
    /// Evaluate the kernel path with the exponents shifted by one.
    pub sabotage: bool,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            sizes: vec![1, 2, 64, 1024, 4096],
            seeds: (0..20).collect(),
            sabotage: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Property {
    PathEquivalence,
    Chunking,
    UnitSteps,
    Checkpoint,
    Linearity,
    Causality,
    KernelConsistency,
}

impl Property {
    pub fn name(self) -> &'static str {
        match self {
            Property::PathEquivalence => "path_equivalence",
            Property::Chunking => "chunking",
            Property::UnitSteps => "unit_steps",
            Property::Checkpoint => "checkpoint",
            Property::Linearity => "linearity",
            Property::Causality => "causality",
            Property::KernelConsistency => "kernel_consistency",
        }
    }
}

/// One property evaluated on one system.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub property: Property,
    pub seed: u64,
    pub channels: usize,
    pub state_size: usize,
    pub len: usize,
    /// Segment length, where the property involves one.
    pub segment_len: Option<usize>,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tolerance
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct VerifyReport {
    pub checks: Vec<CheckResult>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(CheckResult::passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckResult> {
        self.checks.iter().filter(|c| !c.passed())
    }

    /// Largest error of `property`, over all checks of that property with
    /// `len >= min_len`.
    pub fn worst(&self, property: Property, min_len: usize) -> Option<&CheckResult> {
        self.checks
            .iter()
            .filter(|c| c.property == property && c.len >= min_len)
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }

    /// Writes one row per property, length and segment length with the worst
    /// case over all seeds, followed by every failing check.
    pub fn write_table<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let mut keys: Vec<(Property, usize, Option<usize>)> = self
            .checks
            .iter()
            .map(|c| (c.property, c.len, c.segment_len))
            .collect();
        keys.sort();
        keys.dedup();
        writeln!(
            out,
            "{:<20} {:>8} {:>8} {:>6} {:>12} {:>8} {:>10}  status",
            "property", "L", "M", "cases", "max_rel_err", "tol", "worst_seed"
        )?;
        for (property, len, m) in keys {
            let group: Vec<&CheckResult> = self
                .checks
                .iter()
                .filter(|c| c.property == property && c.len == len && c.segment_len == m)
                .collect();
            let worst = group
                .iter()
                .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
                .expect("non-empty group");
            let ok = group.iter().all(|c| c.passed());
            writeln!(
                out,
                "{:<20} {:>8} {:>8} {:>6} {:>12.3e} {:>8.0e} {:>10}  {}",
                property.name(),
                len,
                m.map_or_else(|| "-".to_string(), |m| m.to_string()),
                group.len(),
                worst.max_rel_err,
                worst.tolerance,
                worst.seed,
                if ok { "PASS" } else { "FAIL" }
            )?;
        }
        let failures: Vec<&CheckResult> = self.failures().collect();
        if failures.is_empty() {
            writeln!(out, "all {} checks passed", self.checks.len())?;
        } else {
            writeln!(
                out,
                "{} of {} checks failed:",
                failures.len(),
                self.checks.len()
            )?;
            for c in failures {
                writeln!(
                    out,
                    "  {} seed={} H={} N={} L={} M={} max_rel_err={:.3e} tol={:.0e}",
                    c.property.name(),
                    c.seed,
                    c.channels,
                    c.state_size,
                    c.len,
                    c.segment_len
                        .map_or_else(|| "-".to_string(), |m| m.to_string()),
                    c.max_rel_err,
                    c.tolerance
                )?;
            }
        }
        Ok(())
    }
}

/// Shape of the system used for `seed`: cycles through H in {1, 4} and
/// N in {4, 16}.
pub fn system_shape(seed: u64) -> (usize, usize) {
    let channels = if seed.is_multiple_of(2) { 1 } else { 4 };
    let state_size = if (seed / 2).is_multiple_of(2) { 4 } else { 16 };
    (channels, state_size)
}

pub fn random_system(seed: u64) -> Result<Arc<DiscreteParams>> {
    let (channels, state_size) = system_shape(seed);
    let config = SsmConfig::new(channels, state_size, seed);
    Ok(Arc::new(discretize(&init_s4d_lin(&config)?)?))
}

pub fn random_signal(channels: usize, len: usize, seed: u64) -> Signal {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..channels * len)
        .map(|_| rng.sample(StandardNormal))
        .collect();
    Signal::from_vec(channels, len, data).expect("shape matches data")
}

pub fn random_state(params: &DiscreteParams, seed: u64) -> Result<TransferState> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hidden = (0..params.channels() * params.state_size())
        .map(|_| Complex64::new(rng.sample(StandardNormal), rng.sample(StandardNormal)))
        .collect();
    Ok(TransferState::from_parts(
        params.channels(),
        params.state_size(),
        hidden,
        0,
    )?)
}

/// The segment lengths checked for a sequence of `len` steps.
pub fn partition_sizes(len: usize) -> Vec<usize> {
    let mut sizes: Vec<usize> = [1, 7, 64, len / 2, len]
        .into_iter()
        .filter(|&m| m >= 1 && m <= len)
        .collect();
    sizes.sort_unstable();
    sizes.dedup();
    sizes
}

/// Worst of the output and final-state errors.
fn pair_error(
    (y, state): &(Signal, TransferState),
    (y_ref, state_ref): &(Signal, TransferState),
) -> f64 {
    let mut err = relative_error(y.as_slice(), y_ref.as_slice());
    err = err.max(relative_error_complex(state.hidden(), state_ref.hidden()));
    if state.position() != state_ref.position() {
        err = f64::INFINITY;
    }
    err
}

fn add(a: &Signal, b: &Signal, alpha: f64, beta: f64) -> Signal {
    let data = a
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| alpha * x + beta * y)
        .collect();
    Signal::from_vec(a.channels(), a.len(), data).expect("same shape")
}

struct Case {
    seed: u64,
    params: Arc<DiscreteParams>,
    len: usize,
    convention: ExponentConvention,
}

impl Case {
    fn result(&self, property: Property, m: Option<usize>, err: f64, tol: f64) -> CheckResult {
        CheckResult {
            property,
            seed: self.seed,
            channels: self.params.channels(),
            state_size: self.params.state_size(),
            len: self.len,
            segment_len: m,
            max_rel_err: err,
            tolerance: tol,
        }
    }

    fn run(&self, out: &mut Vec<CheckResult>) -> Result<()> {
        let params = &self.params;
        let len = self.len;
        let tol = tolerance_for(len);
        let channels = params.channels();
        let x = random_signal(channels, len, self.seed ^ 0x5eed);
        let zero = TransferState::for_params(params);
        let reference = scan_recurrent(params, &x, &zero)?;

        // kernel path from a nonzero incoming state
        let h0 = random_state(params, self.seed ^ 0xface)?;
        let kernels = materialize_kernels(params, len)?;
        let conv = eval_conv_path_with(params, &kernels, &x, &h0, self.convention)?;
        let want = scan_recurrent(params, &x, &h0)?;
        out.push(self.result(
            Property::PathEquivalence,
            Some(len),
            pair_error(&conv, &want),
            tol,
        ));

        for m in partition_sizes(len) {
            let chunked = eval_chunked(params, &x, m, self.convention)?;
            out.push(self.result(
                Property::Chunking,
                Some(m),
                pair_error(&chunked, &reference),
                tol,
            ));
        }
        out.push(self.unit_steps(&x)?);
        out.push(self.checkpoint(&x)?);
        out.push(self.linearity(&x)?);
        out.push(self.causality(&x)?);

        let mut worst = 0.0f64;
        for h in 0..channels {
            let c = params.c_bar(h);
            let from_state: Vec<f64> = (0..len)
                .map(|l| {
                    (0..params.state_size())
                        .map(|n| (c[n] * kernels.k_state(h, n)[l]).re)
                        .sum()
                })
                .collect();
            worst = worst.max(relative_error(&from_state, kernels.k_out(h)));
        }
        out.push(self.result(Property::KernelConsistency, None, worst, TOL_TIGHT));
        Ok(())
    }

    /// Segments of one step against composing `step` by hand.
    fn unit_steps(&self, x: &Signal) -> Result<CheckResult> {
        let params = &self.params;
        let mut state = TransferState::for_params(params);
        let mut y = Signal::zeros(x.channels(), x.len());
        let mut frame = vec![0.0; x.channels()];
        for t in 0..x.len() {
            for (h, v) in frame.iter_mut().enumerate() {
                *v = x.get(h, t);
            }
            let (out, next) = step(params, &frame, &state)?;
            for (h, v) in out.into_iter().enumerate() {
                y.set(h, t, v);
            }
            state = next;
        }
        let chunked = eval_chunked(params, x, 1, self.convention)?;
        Ok(self.result(
            Property::UnitSteps,
            Some(1),
            pair_error(&chunked, &(y, state)),
            TOL_TIGHT,
        ))
    }

    /// Saving halfway, reloading and finishing in a fresh session reproduces
    /// the uninterrupted run bit for bit, and the checkpoint bytes survive a
    /// load and save.
    fn checkpoint(&self, x: &Signal) -> Result<CheckResult> {
        let params = &self.params;
        let len = x.len();
        let m = (len / 4).max(1);
        let plan = SegmentPlan::new(m, true)?;
        let feed =
            |session: &mut Session, start: usize, end: usize, y: &mut Signal| -> Result<()> {
                let mut t = start;
                while t < end {
                    let n = m.min(end - t);
                    session.process_segment(&x.slice_time(t, n))?;
                    let seg = session.last_segment_outputs();
                    for h in 0..x.channels() {
                        y.channel_mut(h)[t..t + n].copy_from_slice(seg.channel(h));
                    }
                    t += n;
                }
                Ok(())
            };
        let session = || -> Result<Session> {
            Ok(
                Session::new(params.clone(), plan, ReadoutPolicy::AllTokens)?
                    .with_exponent_convention(self.convention),
            )
        };

        let mut whole = session()?;
        let mut y_whole = Signal::zeros(x.channels(), len);
        feed(&mut whole, 0, len, &mut y_whole)?;

        let cut = (len / m / 2) * m;
        let mut first = session()?;
        let mut y_split = Signal::zeros(x.channels(), len);
        feed(&mut first, 0, cut, &mut y_split)?;
        let bytes = first.save_state();
        let restored = load_state(&bytes, params)?;
        let mut err = if save_state(&restored) == bytes {
            0.0
        } else {
            f64::INFINITY
        };
        let mut second = session()?.with_state(restored)?;
        feed(&mut second, cut, len, &mut y_split)?;

        let identical = y_whole
            .as_slice()
            .iter()
            .zip(y_split.as_slice())
            .all(|(a, b)| a.to_bits() == b.to_bits())
            && whole.state().bitwise_eq(second.state());
        if !identical {
            err = err
                .max(relative_error(y_split.as_slice(), y_whole.as_slice()).max(f64::MIN_POSITIVE));
        }
        Ok(self.result(Property::Checkpoint, Some(m), err, 0.0))
    }

    /// Chunked evaluation of `a x1 + b x2` against the same combination of
    /// the separate outputs.
    fn linearity(&self, x: &Signal) -> Result<CheckResult> {
        let params = &self.params;
        let m = 64.min(x.len());
        let x2 = random_signal(x.channels(), x.len(), self.seed ^ 0x1111);
        let (alpha, beta) = (1.75, -0.5);
        let (y1, _) = eval_chunked(params, x, m, self.convention)?;
        let (y2, _) = eval_chunked(params, &x2, m, self.convention)?;
        let (y, _) = eval_chunked(params, &add(x, &x2, alpha, beta), m, self.convention)?;
        let err = relative_error(y.as_slice(), add(&y1, &y2, alpha, beta).as_slice());
        Ok(self.result(Property::Linearity, Some(m), err, TOL_TIGHT))
    }

    /// A change at a segment boundary leaves every earlier output untouched,
    /// bit for bit.
    fn causality(&self, x: &Signal) -> Result<CheckResult> {
        let params = &self.params;
        let len = x.len();
        let m = 7.min(len);
        let t0 = (len / 2 / m) * m;
        let mut bumped = x.clone();
        for h in 0..x.channels() {
            bumped.set(h, t0, x.get(h, t0) + 1.0);
        }
        let (y, _) = eval_chunked(params, x, m, self.convention)?;
        let (yb, _) = eval_chunked(params, &bumped, m, self.convention)?;
        let changed = (0..x.channels()).any(|h| {
            y.channel(h)[..t0]
                .iter()
                .zip(&yb.channel(h)[..t0])
                .any(|(a, b)| a.to_bits() != b.to_bits())
        });
        let err = if changed { f64::INFINITY } else { 0.0 };
        Ok(self.result(Property::Causality, Some(m), err, 0.0))
    }
}

/// Runs every property for every seed and size and prints the table to `out`.
pub fn run_verify<W: Write>(options: &VerifyOptions, mut out: W) -> Result<VerifyReport> {
    let convention = if options.sabotage {
        ExponentConvention::ShiftedByOne
    } else {
        ExponentConvention::Recurrence
    };
    let mut report = VerifyReport::default();
    for &seed in &options.seeds {
        let params = random_system(seed)?;
        for &len in &options.sizes {
            if len == 0 {
                return Err(crate::error::CliError::Usage(
                    "sizes must be positive".into(),
                ));
            }
            let case = Case {
                seed,
                params: params.clone(),
                len,
                convention,
            };
            case.run(&mut report.checks)?;
        }
    }
    report.write_table(&mut out)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partitions() {
        assert_eq!(partition_sizes(1), vec![1]);
        assert_eq!(partition_sizes(2), vec![1, 2]);
        assert_eq!(partition_sizes(64), vec![1, 7, 32, 64]);
        assert_eq!(partition_sizes(1024), vec![1, 7, 64, 512, 1024]);
    }

    #[test]
    fn shapes_cycle() {
        let shapes: Vec<_> = (0..4).map(system_shape).collect();
        assert_eq!(shapes, vec![(1, 4), (4, 4), (1, 16), (4, 16)]);
    }

    #[test]
    fn small_suite_passes() {
        let options = VerifyOptions {
            sizes: vec![1, 2, 64, 300],
            seeds: vec![0, 1, 2, 3],
            sabotage: false,
        };
        let mut table = Vec::new();
        let report = run_verify(&options, &mut table).unwrap();
        let text = String::from_utf8(table).unwrap();
        assert!(report.passed(), "{text}");
        assert!(text.contains("all "));
    }

    #[test]
    fn sabotage_is_caught() {
        let options = VerifyOptions {
            sizes: vec![64],
            seeds: vec![0, 1],
            sabotage: true,
        };
        let mut table = Vec::new();
        let report = run_verify(&options, &mut table).unwrap();
        assert!(!report.passed());
        let worst = report.worst(Property::Chunking, 64).unwrap();
        assert!(worst.max_rel_err > 1e-2, "{}", worst.max_rel_err);
        assert!(String::from_utf8(table).unwrap().contains("FAIL"));
    }
}
