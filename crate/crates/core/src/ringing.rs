//! Hard spectral truncation versus soft channel gating on causal transients.
//!
//! The hard path zeroes every rFFT bin at or above `K = round(kf·(T/2+1))`
//! and inverts. The soft path runs the STAM spectral branch, which can only
//! rescale a channel, so the response keeps the input's temporal support.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::Serialize;

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::nn::{Ctx, Mode, ParamStore};
use crate::stam::StamParams;
use crate::tensor::Tensor;

/// Test signals, each zero before `pos`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Transient {
    Impulse,
    /// Hann-windowed oscillation starting at `pos`.
    Burst,
}

impl Transient {
    pub fn signal(self, t: usize, pos: usize) -> Vec<f64> {
        let mut x = vec![0.0; t];
        match self {
            Transient::Impulse => x[pos] = 1.0,
            Transient::Burst => {
                let len = (t / 8).max(4).min(t - pos);
                for (i, v) in x[pos..pos + len].iter_mut().enumerate() {
                    let w = 0.5 - 0.5 * (std::f64::consts::TAU * i as f64 / len as f64).cos();
                    *v = w * (std::f64::consts::TAU * 0.2 * i as f64).sin();
                }
            }
        }
        x
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RingingMetrics {
    pub transient: Transient,
    pub time: usize,
    pub impulse_pos: usize,
    pub keep_fraction: f64,
    pub kept_bins: usize,
    /// `Σ_{t < pos} y_hard²`.
    pub pre_onset_energy_hard: f64,
    pub pre_onset_energy_soft: f64,
    pub total_energy_hard: f64,
    pub total_energy_soft: f64,
    /// `max_{t < pos} |y_hard|`, relative to `max_t |y_hard|`.
    pub max_sidelobe_hard: f64,
    /// `‖y_hard − x‖ / ‖x‖`.
    pub distortion_hard: f64,
    /// Distance of `y_soft` from the nearest scalar multiple of `x`,
    /// relative to `‖y_soft‖`.
    pub distortion_soft: f64,
}

/// Number of low-frequency rFFT bins kept for `keep_fraction`.
pub fn kept_bins(t: usize, keep_fraction: f64) -> usize {
    let bins = t / 2 + 1;
    ((keep_fraction * bins as f64).round() as usize).clamp(1, bins)
}

/// Brick-wall low-pass of a real signal through the FFT.
pub fn hard_mask(x: &[f64], keep: usize) -> Vec<f64> {
    let t = x.len();
    let mut planner = FftPlanner::<f64>::new();
    let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
    planner.plan_fft_forward(t).process(&mut buf);
    for (k, c) in buf.iter_mut().enumerate() {
        // bin k and its mirror T−k share one rFFT coefficient
        let freq = k.min(t - k);
        if freq >= keep {
            *c = Complex::new(0.0, 0.0);
        }
    }
    planner.plan_fft_inverse(t).process(&mut buf);
    buf.iter().map(|c| c.re / t as f64).collect()
}

/// Closed form of [`hard_mask`] applied to a unit impulse at `pos`:
/// `(1/T)·Σ_k c_k·cos(2πk(n−pos)/T)` over kept bins, with `c_0 = 1`,
/// `c_k = 2`, and `c_{T/2} = 1` for even `T`.
pub fn dirichlet_oracle(t: usize, pos: usize, keep: usize) -> Vec<f64> {
    (0..t)
        .map(|n| {
            let shift = n as f64 - pos as f64;
            let mut acc = 0.0;
            for k in 0..keep {
                let weight = if k == 0 || (t.is_multiple_of(2) && k == t / 2) {
                    1.0
                } else {
                    2.0
                };
                acc += weight * (std::f64::consts::TAU * k as f64 * shift / t as f64).cos();
            }
            acc / t as f64
        })
        .collect()
}

fn energy(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

/// Soft path: STAM spectral branch on `channels` copies of `x` with
/// different gains, freshly initialized from `seed`. Returns the gated
/// output of every channel.
pub fn soft_gate(x: &[f64], channels: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    let t = x.len();
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let stam = StamParams::new(&mut store, "ringing", channels, t, &mut rng)?;
    let input = Tensor::from_fn(&[1, channels, t], |i| {
        let ch = i / t;
        x[i % t] * (1.0 + ch as f64)
    });
    let graph = Graph::new();
    let ctx = Ctx::new(&graph, &store, Mode::Eval, ChaCha8Rng::seed_from_u64(seed));
    let (y, _) = stam.spectral_branch(&ctx, ctx.constant(input))?;
    let y = y.value();
    Ok(y.data().chunks(t).map(|c| c.to_vec()).collect())
}

pub fn ringing_compare(
    t: usize,
    impulse_pos: usize,
    keep_fraction: f64,
    transient: Transient,
) -> Result<RingingMetrics> {
    if t < 16 {
        return Err(Error::Config(format!(
            "T = {t} is too short; need at least 16 samples"
        )));
    }
    if impulse_pos == 0 || impulse_pos >= t {
        return Err(Error::DegenerateInput {
            op: "ringing_compare",
            reason: format!("impulse position {impulse_pos} must lie strictly inside 0..{t}"),
        });
    }
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(Error::Config(format!(
            "keep_fraction must lie in (0, 1], got {keep_fraction}"
        )));
    }
    let x = transient.signal(t, impulse_pos);
    let keep = kept_bins(t, keep_fraction);
    let hard = hard_mask(&x, keep);

    let soft = soft_gate(&x, 4, 0)?;
    let pre_soft: f64 = soft.iter().map(|c| energy(&c[..impulse_pos])).sum();
    let total_soft: f64 = soft.iter().map(|c| energy(c)).sum();
    let mut distortion_soft: f64 = 0.0;
    for c in &soft {
        // least-squares scalar a with c ≈ a·x
        let a = c.iter().zip(&x).map(|(u, v)| u * v).sum::<f64>() / energy(&x);
        let resid: f64 = c.iter().zip(&x).map(|(u, v)| (u - a * v).powi(2)).sum();
        distortion_soft = distortion_soft.max((resid / energy(c).max(f64::MIN_POSITIVE)).sqrt());
    }

    let peak = hard.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let side = hard[..impulse_pos]
        .iter()
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let diff: f64 = hard.iter().zip(&x).map(|(a, b)| (a - b).powi(2)).sum();
    Ok(RingingMetrics {
        transient,
        time: t,
        impulse_pos,
        keep_fraction,
        kept_bins: keep,
        pre_onset_energy_hard: energy(&hard[..impulse_pos]),
        pre_onset_energy_soft: pre_soft,
        total_energy_hard: energy(&hard),
        total_energy_soft: total_soft,
        max_sidelobe_hard: if peak > 0.0 { side / peak } else { 0.0 },
        distortion_hard: (diff / energy(&x)).sqrt(),
        distortion_soft,
    })
}
