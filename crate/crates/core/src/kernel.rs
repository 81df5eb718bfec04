//! Convolution kernels of a diagonal SSM and the FFT evaluation path.
//!
//! For a segment of length `L`, the output kernel is
//! `K_out[l] = Re(sum_n C_bar[n] A_bar[n]^l B_bar[n])` and the state kernel is
//! `K_state[n, l] = A_bar[n]^l B_bar[n]`. Given an incoming state `h0` the
//! segment evaluates as
//!
//! ```text
//! y_k     = (K_out * x)_k + D x_k + Re(sum_n C_bar[n] A_bar[n]^k h0[n])     k = 1..L
//! h_final = sum_l K_state[., l] x_{L-l} + A_bar^L h0
//! ```
//!
//! which reproduces the recurrence exactly (up to rounding) at every position.

use std::collections::HashMap;
use std::sync::{Arc, RwLock};

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::signal::Signal;
use crate::ssm::{DiscreteParams, TransferState};

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

/// Which power of `A_bar` multiplies the incoming state.
///
/// `Recurrence` is the correct one: `A_bar^k` for the output at position `k`
/// and `A_bar^L` for the end-of-segment state. `ShiftedByOne` uses
/// `A_bar^(k-1)` and `A_bar^(L-1)` instead; it exists only as a fault
/// injection so the equivalence suite can demonstrate it catches the error.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ExponentConvention {
    #[default]
    Recurrence,
    ShiftedByOne,
}

/// Kernels for one segment length. Arrays are channel-major; the lag axis is
/// innermost.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelSet {
    len: usize,
    channels: usize,
    state_size: usize,
    /// `[H, L]`
    k_out: Vec<f64>,
    /// `[H, N, L]`, `A_bar^l B_bar`
    k_state: Vec<Complex64>,
    /// `[H, N, L]`, entry `k - 1` holds `C_bar A_bar^k` for `k = 1..=L`
    corr_out: Vec<Complex64>,
    /// `[H, N]`
    a_pow_len: Vec<Complex64>,
}

impl KernelSet {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn state_size(&self) -> usize {
        self.state_size
    }

    pub fn k_out(&self, h: usize) -> &[f64] {
        &self.k_out[h * self.len..(h + 1) * self.len]
    }

    /// Output kernels of all channels as a `[H, L]` signal.
    pub fn k_out_signal(&self) -> Signal {
        Signal::from_vec(self.channels, self.len, self.k_out.clone()).expect("kernel shape")
    }

    pub fn k_state(&self, h: usize, n: usize) -> &[Complex64] {
        let row = h * self.state_size + n;
        &self.k_state[row * self.len..(row + 1) * self.len]
    }

    pub fn corr_out(&self, h: usize, n: usize) -> &[Complex64] {
        let row = h * self.state_size + n;
        &self.corr_out[row * self.len..(row + 1) * self.len]
    }

    pub fn a_pow_len(&self, h: usize) -> &[Complex64] {
        &self.a_pow_len[h * self.state_size..(h + 1) * self.state_size]
    }

    /// Heap bytes held by the kernel arrays.
    pub fn heap_bytes(&self) -> usize {
        self.k_out.len() * std::mem::size_of::<f64>()
            + (self.k_state.len() + self.corr_out.len() + self.a_pow_len.len())
                * std::mem::size_of::<Complex64>()
    }
}

/// Builds the kernels for segment length `len` by cumulative products of
/// `A_bar` (no explicit exponentiation).
pub fn materialize_kernels(params: &DiscreteParams, len: usize) -> Result<KernelSet> {
    if len == 0 {
        return Err(Error::contract("kernel length must be at least 1"));
    }
    let (channels, state_size) = (params.channels(), params.state_size());
    let rows = channels * state_size;
    let mut k_out = vec![0.0; channels * len];
    let mut k_state = vec![ZERO; rows * len];
    let mut corr_out = vec![ZERO; rows * len];
    let mut a_pow_len = vec![ZERO; rows];

    for h in 0..channels {
        let (a, b, c) = (params.a_bar(h), params.b_bar(h), params.c_bar(h));
        for n in 0..state_size {
            let row = h * state_size + n;
            let ks = &mut k_state[row * len..(row + 1) * len];
            let co = &mut corr_out[row * len..(row + 1) * len];
            let mut power = Complex64::new(1.0, 0.0);
            for l in 0..len {
                ks[l] = power * b[n];
                power *= a[n];
                co[l] = c[n] * power;
            }
            a_pow_len[row] = power;
        }
        let out = &mut k_out[h * len..(h + 1) * len];
        for (n, &cn) in c.iter().enumerate() {
            let row = h * state_size + n;
            let ks = &k_state[row * len..(row + 1) * len];
            for (o, k) in out.iter_mut().zip(ks) {
                *o += (cn * k).re;
            }
        }
    }

    if let Some(i) = k_out.iter().position(|v| !v.is_finite()) {
        debug_assert!(
            !params.is_stable(),
            "stable system produced a non-finite kernel"
        );
        return Err(Error::Numeric {
            what: "output kernel",
            index: (i % len) as u64,
        });
    }
    if let Some(i) = k_state.iter().chain(&corr_out).position(|z| !z.is_finite()) {
        return Err(Error::Numeric {
            what: "state kernel",
            index: (i % len) as u64,
        });
    }

    Ok(KernelSet {
        len,
        channels,
        state_size,
        k_out,
        k_state,
        corr_out,
        a_pow_len,
    })
}

fn fft_size(len: usize) -> usize {
    (2 * len - 1).next_power_of_two()
}

/// FFT plans and scratch space for causal linear convolution of length-`len`
/// sequences, zero-padded to the next power of two at or above `2*len - 1`.
struct Convolver {
    len: usize,
    size: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
    buf: Vec<Complex64>,
    scratch: Vec<Complex64>,
}

impl Convolver {
    fn new(len: usize) -> Self {
        let size = fft_size(len);
        let mut planner = FftPlanner::new();
        let forward = planner.plan_fft_forward(size);
        let inverse = planner.plan_fft_inverse(size);
        let scratch_len = forward
            .get_inplace_scratch_len()
            .max(inverse.get_inplace_scratch_len());
        Self {
            len,
            size,
            forward,
            inverse,
            buf: vec![ZERO; size],
            scratch: vec![ZERO; scratch_len],
        }
    }

    fn spectrum(&mut self, seq: &[f64]) -> Vec<Complex64> {
        self.load(seq);
        self.forward
            .process_with_scratch(&mut self.buf, &mut self.scratch);
        self.buf.clone()
    }

    fn load(&mut self, seq: &[f64]) {
        debug_assert_eq!(seq.len(), self.len);
        for (dst, &v) in self.buf.iter_mut().zip(seq) {
            *dst = Complex64::new(v, 0.0);
        }
        self.buf[self.len..].fill(ZERO);
    }

    /// Writes the first `len` samples of `kernel * x` into `out`, given the
    /// kernel's precomputed spectrum.
    fn convolve(&mut self, kernel_spectrum: &[Complex64], x: &[f64], out: &mut [f64]) {
        self.load(x);
        self.forward
            .process_with_scratch(&mut self.buf, &mut self.scratch);
        for (z, k) in self.buf.iter_mut().zip(kernel_spectrum) {
            *z *= k;
        }
        self.inverse
            .process_with_scratch(&mut self.buf, &mut self.scratch);
        let scale = 1.0 / self.size as f64;
        for (o, z) in out.iter_mut().zip(&self.buf[..self.len]) {
            *o = z.re * scale;
        }
    }
}

fn check_conv_shapes(kernel: &Signal, x: &Signal) -> Result<()> {
    if kernel.channels() != x.channels() || kernel.len() != x.len() {
        return Err(Error::contract(format!(
            "kernel [{}, {}] and input [{}, {}] must have equal shapes",
            kernel.channels(),
            kernel.len(),
            x.channels(),
            x.len()
        )));
    }
    Ok(())
}

/// Causal convolution `y_k = sum_{l<=k} kernel[l] x[k-l]`, truncated to the
/// input length, computed per channel with FFTs.
pub fn conv_causal_fft(kernel: &Signal, x: &Signal) -> Result<Signal> {
    check_conv_shapes(kernel, x)?;
    let mut y = Signal::zeros(x.channels(), x.len());
    if x.is_empty() {
        return Ok(y);
    }
    let mut conv = Convolver::new(x.len());
    for h in 0..x.channels() {
        let spectrum = conv.spectrum(kernel.channel(h));
        conv.convolve(&spectrum, x.channel(h), y.channel_mut(h));
    }
    Ok(y)
}

/// Direct O(L^2) causal convolution; the reference for [`conv_causal_fft`].
pub fn conv_causal_naive(kernel: &Signal, x: &Signal) -> Result<Signal> {
    check_conv_shapes(kernel, x)?;
    let mut y = Signal::zeros(x.channels(), x.len());
    for h in 0..x.channels() {
        let (k, xs) = (kernel.channel(h), x.channel(h));
        let ys = y.channel_mut(h);
        for t in 0..xs.len() {
            ys[t] = (0..=t).map(|l| k[l] * xs[t - l]).sum();
        }
    }
    Ok(y)
}

/// Reusable evaluator for segments of one fixed length: holds FFT plans, the
/// spectra of the output kernels and scratch buffers, so repeated segments
/// allocate nothing.
pub struct SegmentEngine {
    len: usize,
    channels: usize,
    state_size: usize,
    conv: Convolver,
    spectra: Vec<Vec<Complex64>>,
    next_state: Vec<Complex64>,
    convention: ExponentConvention,
}

impl std::fmt::Debug for SegmentEngine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SegmentEngine")
            .field("len", &self.len)
            .field("channels", &self.channels)
            .field("state_size", &self.state_size)
            .field("fft_size", &self.conv.size)
            .field("convention", &self.convention)
            .finish()
    }
}

impl SegmentEngine {
    pub fn new(kernels: &KernelSet) -> Self {
        let mut conv = Convolver::new(kernels.len);
        let spectra = (0..kernels.channels)
            .map(|h| conv.spectrum(kernels.k_out(h)))
            .collect();
        Self {
            len: kernels.len,
            channels: kernels.channels,
            state_size: kernels.state_size,
            conv,
            spectra,
            next_state: vec![ZERO; kernels.state_size],
            convention: ExponentConvention::Recurrence,
        }
    }

    pub fn with_convention(mut self, convention: ExponentConvention) -> Self {
        self.convention = convention;
        self
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Evaluates one segment. `x` and `y` must be `[H, L]`; `state` is read as
    /// the incoming state and overwritten with the outgoing one.
    pub fn evaluate(
        &mut self,
        params: &DiscreteParams,
        kernels: &KernelSet,
        x: &Signal,
        state: &mut TransferState,
        y: &mut Signal,
    ) -> Result<()> {
        let len = self.len;
        if kernels.len != len
            || kernels.channels != self.channels
            || kernels.state_size != self.state_size
        {
            return Err(Error::contract("kernel set does not match engine"));
        }
        if params.channels() != self.channels || params.state_size() != self.state_size {
            return Err(Error::contract("system does not match kernel set"));
        }
        state.check_shape(params)?;
        if x.channels() != self.channels || x.len() != len {
            return Err(Error::contract(format!(
                "segment input must be [{}, {}], got [{}, {}]",
                self.channels,
                len,
                x.channels(),
                x.len()
            )));
        }
        if y.channels() != self.channels || y.len() != len {
            return Err(Error::contract("output buffer shape mismatch"));
        }
        let start = state.position();
        let carry_in = !state.is_zero();

        for h in 0..self.channels {
            let xs = x.channel(h);
            if let Some(k) = xs.iter().position(|v| !v.is_finite()) {
                return Err(Error::Numeric {
                    what: "segment input",
                    index: start + k as u64,
                });
            }
            let ys = y.channel_mut(h);
            self.conv.convolve(&self.spectra[h], xs, ys);
            let d = params.d()[h];
            for (yk, xk) in ys.iter_mut().zip(xs) {
                *yk += d * xk;
            }

            let h0 = state.channel(h);
            if carry_in {
                for (n, &h0n) in h0.iter().enumerate() {
                    let coeffs = kernels.corr_out(h, n);
                    match self.convention {
                        ExponentConvention::Recurrence => {
                            for (yk, c) in ys.iter_mut().zip(coeffs) {
                                *yk += (c * h0n).re;
                            }
                        }
                        ExponentConvention::ShiftedByOne => {
                            let c0 = params.c_bar(h)[n];
                            ys[0] += (c0 * h0n).re;
                            for (yk, c) in ys[1..].iter_mut().zip(coeffs) {
                                *yk += (c * h0n).re;
                            }
                        }
                    }
                }
            }
            if let Some(k) = ys.iter().position(|v| !v.is_finite()) {
                return Err(Error::Numeric {
                    what: "segment output",
                    index: start + k as u64,
                });
            }

            for (n, (next, &h0n)) in self.next_state.iter_mut().zip(h0).enumerate() {
                let ks = kernels.k_state(h, n);
                let mut acc = ZERO;
                for (kl, xv) in ks.iter().zip(xs.iter().rev()) {
                    acc += kl * xv;
                }
                let propagator = match self.convention {
                    ExponentConvention::Recurrence => kernels.a_pow_len(h)[n],
                    ExponentConvention::ShiftedByOne => params.a_bar(h)[n].powu(len as u32 - 1),
                };
                *next = acc + propagator * h0n;
            }
            state.channel_mut(h).copy_from_slice(&self.next_state);
        }
        state.advance_position(len as u64);
        Ok(())
    }
}

/// Evaluates one segment through the kernel path starting from `h0`.
pub fn eval_conv_path(
    params: &DiscreteParams,
    kernels: &KernelSet,
    x: &Signal,
    h0: &TransferState,
) -> Result<(Signal, TransferState)> {
    eval_conv_path_with(params, kernels, x, h0, ExponentConvention::Recurrence)
}

/// [`eval_conv_path`] with an explicit exponent convention.
pub fn eval_conv_path_with(
    params: &DiscreteParams,
    kernels: &KernelSet,
    x: &Signal,
    h0: &TransferState,
    convention: ExponentConvention,
) -> Result<(Signal, TransferState)> {
    if x.len() != kernels.len() {
        return Err(Error::contract(format!(
            "input length {} differs from kernel length {}",
            x.len(),
            kernels.len()
        )));
    }
    let mut engine = SegmentEngine::new(kernels).with_convention(convention);
    let mut state = h0.clone();
    let mut y = Signal::zeros(x.channels(), x.len());
    engine.evaluate(params, kernels, x, &mut state, &mut y)?;
    Ok((y, state))
}

/// Kernel sets shared across sessions, keyed by the value hash of the
/// discrete parameters and the segment length.
#[derive(Debug, Default)]
pub struct KernelCache {
    entries: RwLock<HashMap<(u64, usize), Arc<KernelSet>>>,
}

impl KernelCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get_or_materialize(
        &self,
        params: &DiscreteParams,
        len: usize,
    ) -> Result<Arc<KernelSet>> {
        let key = (params.fingerprint(), len);
        if let Some(hit) = self
            .entries
            .read()
            .expect("kernel cache poisoned")
            .get(&key)
        {
            return Ok(Arc::clone(hit));
        }
        // Concurrent misses on the same key both materialize; the values are
        // identical so whichever insert lands last is fine.
        let kernels = Arc::new(materialize_kernels(params, len)?);
        self.entries
            .write()
            .expect("kernel cache poisoned")
            .insert(key, Arc::clone(&kernels));
        Ok(kernels)
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("kernel cache poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn clear(&self) {
        self.entries.write().expect("kernel cache poisoned").clear();
    }
}
