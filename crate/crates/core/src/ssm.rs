//! Diagonal SSM parameters, S4D-Lin initialization, zero-order-hold
//! discretization and the recurrent reference evaluation.
//!
//! Continuous system, per channel and per diagonal state entry:
//!
//! ```text
//! h'(t) = A h(t) + B x(t)
//! y(t)  = Re(C h(t)) + D x(t)
//! ```
//!
//! Discrete system after zero-order hold with step `dt`:
//!
//! ```text
//! h_k = A_bar * h_{k-1} + B_bar * x_k
//! y_k = Re(sum_n C_bar[n] * h_k[n]) + D * x_k
//! ```

use std::f64::consts::PI;
use std::hash::{Hash, Hasher};

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::signal::Signal;

/// Below this modulus the closed form for `B_bar` cancels catastrophically and
/// its analytic limit `dt * B` is used instead.
const SMALL_POLE: f64 = 1e-12;

/// Shape and initialization settings for a bank of independent SISO systems.
#[derive(Debug, Clone, PartialEq)]
pub struct SsmConfig {
    pub channels: usize,
    pub state_size: usize,
    pub dt_min: f64,
    pub dt_max: f64,
    pub seed: u64,
}

impl SsmConfig {
    pub const DEFAULT_DT_MIN: f64 = 0.001;
    pub const DEFAULT_DT_MAX: f64 = 0.1;

    pub fn new(channels: usize, state_size: usize, seed: u64) -> Self {
        Self {
            channels,
            state_size,
            dt_min: Self::DEFAULT_DT_MIN,
            dt_max: Self::DEFAULT_DT_MAX,
            seed,
        }
    }

    pub fn with_dt_range(mut self, dt_min: f64, dt_max: f64) -> Self {
        self.dt_min = dt_min;
        self.dt_max = dt_max;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(Error::Config("channels must be at least 1".into()));
        }
        if self.state_size == 0 {
            return Err(Error::Config("state_size must be at least 1".into()));
        }
        if !self.dt_min.is_finite() || !self.dt_max.is_finite() {
            return Err(Error::Config("dt bounds must be finite".into()));
        }
        if self.dt_min <= 0.0 {
            return Err(Error::Config(format!(
                "dt_min must be positive, got {}",
                self.dt_min
            )));
        }
        if self.dt_min > self.dt_max {
            return Err(Error::Config(format!(
                "dt_min ({}) exceeds dt_max ({})",
                self.dt_min, self.dt_max
            )));
        }
        Ok(())
    }
}

/// Continuous-time diagonal system. All complex arrays are `[channels, state_size]`
/// flattened channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ContinuousParams {
    channels: usize,
    state_size: usize,
    a: Vec<Complex64>,
    b: Vec<Complex64>,
    c: Vec<Complex64>,
    d: Vec<f64>,
    dt: Vec<f64>,
}

impl ContinuousParams {
    pub fn new(
        channels: usize,
        state_size: usize,
        a: Vec<Complex64>,
        b: Vec<Complex64>,
        c: Vec<Complex64>,
        d: Vec<f64>,
        dt: Vec<f64>,
    ) -> Result<Self> {
        let cells = channels * state_size;
        if channels == 0 || state_size == 0 {
            return Err(Error::contract("empty system"));
        }
        if a.len() != cells || b.len() != cells || c.len() != cells {
            return Err(Error::contract(format!(
                "A, B, C must have {cells} entries ([{channels}, {state_size}])"
            )));
        }
        if d.len() != channels || dt.len() != channels {
            return Err(Error::contract(format!(
                "D and dt must have {channels} entries"
            )));
        }
        let params = Self {
            channels,
            state_size,
            a,
            b,
            c,
            d,
            dt,
        };
        params.check()?;
        Ok(params)
    }

    fn check(&self) -> Result<()> {
        let complex = self.a.iter().chain(&self.b).chain(&self.c);
        for (i, z) in complex.enumerate() {
            if !z.is_finite() {
                return Err(Error::Numeric {
                    what: "continuous parameters",
                    index: i as u64,
                });
            }
        }
        for (i, v) in self.d.iter().chain(&self.dt).enumerate() {
            if !v.is_finite() {
                return Err(Error::Numeric {
                    what: "continuous parameters",
                    index: i as u64,
                });
            }
        }
        for (i, z) in self.a.iter().enumerate() {
            if z.re >= 0.0 {
                return Err(Error::Stability {
                    channel: i / self.state_size,
                    state: i % self.state_size,
                    real: z.re,
                });
            }
        }
        if let Some(h) = self.dt.iter().position(|&dt| dt <= 0.0) {
            return Err(Error::Config(format!(
                "dt[{h}] = {} is not positive",
                self.dt[h]
            )));
        }
        Ok(())
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn state_size(&self) -> usize {
        self.state_size
    }

    pub fn a(&self, h: usize) -> &[Complex64] {
        &self.a[h * self.state_size..(h + 1) * self.state_size]
    }

    pub fn b(&self, h: usize) -> &[Complex64] {
        &self.b[h * self.state_size..(h + 1) * self.state_size]
    }

    pub fn c(&self, h: usize) -> &[Complex64] {
        &self.c[h * self.state_size..(h + 1) * self.state_size]
    }

    pub fn d(&self) -> &[f64] {
        &self.d
    }

    pub fn dt(&self) -> &[f64] {
        &self.dt
    }
}

/// S4D-Lin initialization.
///
/// `A[h, n] = -1/2 + i*pi*n` and `B = 1` for every channel. `C` is drawn from
/// the standard complex normal (each part has variance 1/2), `D` from the
/// standard normal and `dt` log-uniformly on `[dt_min, dt_max]`, all from a
/// ChaCha8 stream seeded with `config.seed`.
pub fn init_s4d_lin(config: &SsmConfig) -> Result<ContinuousParams> {
    config.validate()?;
    let (channels, state_size) = (config.channels, config.state_size);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let a_row: Vec<Complex64> = (0..state_size)
        .map(|n| Complex64::new(-0.5, PI * n as f64))
        .collect();
    let a = a_row.repeat(channels);
    let b = vec![Complex64::new(1.0, 0.0); channels * state_size];

    let part_scale = std::f64::consts::FRAC_1_SQRT_2;
    let c = (0..channels * state_size)
        .map(|_| {
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            Complex64::new(re * part_scale, im * part_scale)
        })
        .collect();
    let d = (0..channels).map(|_| rng.sample(StandardNormal)).collect();

    let (lo, hi) = (config.dt_min.ln(), config.dt_max.ln());
    let dt = (0..channels)
        .map(|_| {
            let u: f64 = rng.random();
            if config.dt_min == config.dt_max {
                config.dt_min
            } else {
                (lo + u * (hi - lo))
                    .exp()
                    .clamp(config.dt_min, config.dt_max)
            }
        })
        .collect();

    ContinuousParams::new(channels, state_size, a, b, c, d, dt)
}

/// Discretized diagonal system ready for recurrence or kernel materialization.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteParams {
    channels: usize,
    state_size: usize,
    a_bar: Vec<Complex64>,
    b_bar: Vec<Complex64>,
    c_bar: Vec<Complex64>,
    d: Vec<f64>,
}

impl DiscreteParams {
    /// Assembles a discrete system directly. Only shapes and finiteness are
    /// checked, so marginally stable systems such as a running sum
    /// (`A_bar = 1`) can be expressed.
    pub fn from_parts(
        channels: usize,
        state_size: usize,
        a_bar: Vec<Complex64>,
        b_bar: Vec<Complex64>,
        c_bar: Vec<Complex64>,
        d: Vec<f64>,
    ) -> Result<Self> {
        let cells = channels * state_size;
        if channels == 0 || state_size == 0 {
            return Err(Error::contract("empty system"));
        }
        if a_bar.len() != cells || b_bar.len() != cells || c_bar.len() != cells {
            return Err(Error::contract(format!(
                "A_bar, B_bar, C_bar must have {cells} entries"
            )));
        }
        if d.len() != channels {
            return Err(Error::contract(format!("D must have {channels} entries")));
        }
        let all = a_bar.iter().chain(&b_bar).chain(&c_bar);
        if let Some(i) = all.clone().position(|z| !z.is_finite()) {
            return Err(Error::Numeric {
                what: "discrete parameters",
                index: i as u64,
            });
        }
        if let Some(i) = d.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                what: "feedthrough D",
                index: i as u64,
            });
        }
        Ok(Self {
            channels,
            state_size,
            a_bar,
            b_bar,
            c_bar,
            d,
        })
    }

    /// Single-state system replicated over `channels` with real coefficients.
    pub fn scalar(channels: usize, a_bar: f64, b_bar: f64, c_bar: f64, d: f64) -> Self {
        let z = |v: f64| vec![Complex64::new(v, 0.0); channels];
        Self::from_parts(channels, 1, z(a_bar), z(b_bar), z(c_bar), vec![d; channels])
            .expect("finite scalar system")
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn state_size(&self) -> usize {
        self.state_size
    }

    pub fn a_bar(&self, h: usize) -> &[Complex64] {
        &self.a_bar[h * self.state_size..(h + 1) * self.state_size]
    }

    pub fn b_bar(&self, h: usize) -> &[Complex64] {
        &self.b_bar[h * self.state_size..(h + 1) * self.state_size]
    }

    pub fn c_bar(&self, h: usize) -> &[Complex64] {
        &self.c_bar[h * self.state_size..(h + 1) * self.state_size]
    }

    pub fn d(&self) -> &[f64] {
        &self.d
    }

    /// True when every `|A_bar|` is strictly below one.
    pub fn is_stable(&self) -> bool {
        self.a_bar.iter().all(|z| z.norm() < 1.0)
    }

    /// Value hash over shapes and the bit patterns of every coefficient.
    pub fn fingerprint(&self) -> u64 {
        let mut hasher = std::collections::hash_map::DefaultHasher::new();
        self.channels.hash(&mut hasher);
        self.state_size.hash(&mut hasher);
        for z in self.a_bar.iter().chain(&self.b_bar).chain(&self.c_bar) {
            z.re.to_bits().hash(&mut hasher);
            z.im.to_bits().hash(&mut hasher);
        }
        for v in &self.d {
            v.to_bits().hash(&mut hasher);
        }
        hasher.finish()
    }

    /// Replaces `A_bar` entries, used by tests that need custom dynamics.
    pub fn with_a_bar(mut self, a_bar: Vec<Complex64>) -> Result<Self> {
        if a_bar.len() != self.a_bar.len() {
            return Err(Error::contract("A_bar shape mismatch"));
        }
        self.a_bar = a_bar;
        Self::from_parts(
            self.channels,
            self.state_size,
            self.a_bar,
            self.b_bar,
            self.c_bar,
            self.d,
        )
    }

    /// Returns the system with a different output matrix.
    pub fn with_c_bar(mut self, c_bar: Vec<Complex64>) -> Result<Self> {
        if c_bar.len() != self.c_bar.len() {
            return Err(Error::contract("C_bar shape mismatch"));
        }
        self.c_bar = c_bar;
        Ok(self)
    }
}

/// Zero-order hold: `A_bar = exp(dt*A)`, `B_bar = (exp(dt*A) - 1) / A * B`,
/// `C_bar = C`, `D` unchanged.
pub fn discretize(params: &ContinuousParams) -> Result<DiscreteParams> {
    params.check()?;
    let n = params.state_size;
    let cells = params.channels * n;
    let mut a_bar = Vec::with_capacity(cells);
    let mut b_bar = Vec::with_capacity(cells);
    for h in 0..params.channels {
        let dt = params.dt[h];
        for (a, b) in params.a(h).iter().zip(params.b(h)) {
            let decay = (a * dt).exp();
            let gain = if a.norm() < SMALL_POLE {
                b * dt
            } else {
                (decay - 1.0) / a * b
            };
            a_bar.push(decay);
            b_bar.push(gain);
        }
    }
    DiscreteParams::from_parts(
        params.channels,
        n,
        a_bar,
        b_bar,
        params.c.clone(),
        params.d.clone(),
    )
}

/// Hidden state carried between segments, with the number of timesteps
/// consumed since the start of the stream.
#[derive(Debug, Clone, PartialEq)]
pub struct TransferState {
    channels: usize,
    state_size: usize,
    h: Vec<Complex64>,
    position: u64,
}

impl TransferState {
    pub fn zeros(channels: usize, state_size: usize) -> Self {
        Self {
            channels,
            state_size,
            h: vec![Complex64::new(0.0, 0.0); channels * state_size],
            position: 0,
        }
    }

    pub fn for_params(params: &DiscreteParams) -> Self {
        Self::zeros(params.channels, params.state_size)
    }

    pub fn from_parts(
        channels: usize,
        state_size: usize,
        h: Vec<Complex64>,
        position: u64,
    ) -> Result<Self> {
        if h.len() != channels * state_size {
            return Err(Error::contract(format!(
                "state needs {} entries, got {}",
                channels * state_size,
                h.len()
            )));
        }
        Ok(Self {
            channels,
            state_size,
            h,
            position,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn state_size(&self) -> usize {
        self.state_size
    }

    pub fn position(&self) -> u64 {
        self.position
    }

    pub fn hidden(&self) -> &[Complex64] {
        &self.h
    }

    pub fn channel(&self, h: usize) -> &[Complex64] {
        &self.h[h * self.state_size..(h + 1) * self.state_size]
    }

    pub(crate) fn channel_mut(&mut self, h: usize) -> &mut [Complex64] {
        &mut self.h[h * self.state_size..(h + 1) * self.state_size]
    }

    pub(crate) fn advance_position(&mut self, steps: u64) {
        self.position += steps;
    }

    pub fn is_zero(&self) -> bool {
        self.h.iter().all(|z| z.re == 0.0 && z.im == 0.0)
    }

    /// Equality of position and of every component's bit pattern.
    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.channels == other.channels
            && self.state_size == other.state_size
            && self.position == other.position
            && self
                .h
                .iter()
                .zip(&other.h)
                .all(|(a, b)| a.re.to_bits() == b.re.to_bits() && a.im.to_bits() == b.im.to_bits())
    }

    pub(crate) fn check_shape(&self, params: &DiscreteParams) -> Result<()> {
        if self.channels != params.channels || self.state_size != params.state_size {
            return Err(Error::contract(format!(
                "state shape [{}, {}] does not match system [{}, {}]",
                self.channels, self.state_size, params.channels, params.state_size
            )));
        }
        Ok(())
    }
}

/// One recurrence update for a single channel; returns the output sample.
///
/// Shared by [`scan_recurrent`] and [`step`] so both produce identical bits.
#[inline]
pub(crate) fn advance_channel(
    a_bar: &[Complex64],
    b_bar: &[Complex64],
    c_bar: &[Complex64],
    d: f64,
    h: &mut [Complex64],
    x: f64,
) -> f64 {
    let mut acc = 0.0;
    for n in 0..h.len() {
        let next = a_bar[n] * h[n] + b_bar[n] * x;
        h[n] = next;
        acc += (c_bar[n] * next).re;
    }
    acc + d * x
}

/// Step-by-step evaluation over a whole sequence starting from `h0`.
///
/// This is the reference path that every other evaluation is checked against.
pub fn scan_recurrent(
    params: &DiscreteParams,
    x: &Signal,
    h0: &TransferState,
) -> Result<(Signal, TransferState)> {
    h0.check_shape(params)?;
    if x.channels() != params.channels {
        return Err(Error::contract(format!(
            "input has {} channels, system has {}",
            x.channels(),
            params.channels
        )));
    }
    let len = x.len();
    let mut y = Signal::zeros(params.channels, len);
    let mut state = h0.clone();
    for h in 0..params.channels {
        let (a, b, c, d) = (
            params.a_bar(h),
            params.b_bar(h),
            params.c_bar(h),
            params.d[h],
        );
        let hidden = state.channel_mut(h);
        let xs = x.channel(h);
        let ys = y.channel_mut(h);
        for k in 0..len {
            let out = advance_channel(a, b, c, d, hidden, xs[k]);
            if !out.is_finite() {
                return Err(Error::Numeric {
                    what: "recurrent output",
                    index: h0.position + k as u64,
                });
            }
            ys[k] = out;
        }
    }
    state.advance_position(len as u64);
    Ok((y, state))
}

/// Single recurrent step over all channels; `x_t` holds one sample per channel.
pub fn step(
    params: &DiscreteParams,
    x_t: &[f64],
    state: &TransferState,
) -> Result<(Vec<f64>, TransferState)> {
    let mut next = state.clone();
    let mut y = vec![0.0; params.channels];
    step_in_place(params, x_t, &mut next, &mut y)?;
    Ok((y, next))
}

pub(crate) fn step_in_place(
    params: &DiscreteParams,
    x_t: &[f64],
    state: &mut TransferState,
    y: &mut [f64],
) -> Result<()> {
    state.check_shape(params)?;
    if x_t.len() != params.channels || y.len() != params.channels {
        return Err(Error::contract(format!(
            "step expects {} channels, got {}",
            params.channels,
            x_t.len()
        )));
    }
    for h in 0..params.channels {
        let out = advance_channel(
            params.a_bar(h),
            params.b_bar(h),
            params.c_bar(h),
            params.d[h],
            state.channel_mut(h),
            x_t[h],
        );
        if !out.is_finite() {
            return Err(Error::Numeric {
                what: "recurrent output",
                index: state.position,
            });
        }
        y[h] = out;
    }
    state.advance_position(1);
    Ok(())
}
