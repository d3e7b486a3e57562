//! Polyphase rational resampling with a Kaiser-windowed sinc low-pass.

use super::edf::SignalTrace;
use crate::error::{Error, Result};
use std::f64::consts::PI;

pub const KAISER_BETA: f64 = 8.6;
pub const TAPS_PER_PHASE: usize = 64;
const MAX_FACTOR: u64 = 1000;

/// Zeroth-order modified Bessel function of the first kind.
fn bessel_i0(x: f64) -> f64 {
    let q = x * x / 4.0;
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..200 {
        term *= q / (k * k) as f64;
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 { a } else { gcd(b, a % b) }
}

/// `target / fs` as a reduced fraction `(up, down)`.
pub fn rational_ratio(fs: f64, target: f64) -> Result<(usize, usize)> {
    if !(fs > 0.0 && target > 0.0 && fs.is_finite() && target.is_finite()) {
        return Err(Error::Config(format!("sampling rates must be positive, got {fs} -> {target}")));
    }
    for scale in [1.0, 10.0, 100.0, 1000.0] {
        let (a, b) = (fs * scale, target * scale);
        if (a - a.round()).abs() < 1e-9 && (b - b.round()).abs() < 1e-9 {
            let (a, b) = (a.round() as u64, b.round() as u64);
            let g = gcd(a, b);
            let (up, down) = (b / g, a / g);
            if up > MAX_FACTOR || down > MAX_FACTOR {
                return Err(Error::Config(format!("{fs} Hz -> {target} Hz needs a {up}/{down} ratio; too large")));
            }
            return Ok((up as usize, down as usize));
        }
    }
    Err(Error::Config(format!("{fs} Hz -> {target} Hz is not a small rational ratio")))
}

/// Low-pass prototype for upsampling by `up` then decimating by `down`, with
/// `2 * (TAPS_PER_PHASE / 2) * up + 1` taps centered on the middle one.
fn prototype(up: usize, down: usize) -> Vec<f64> {
    let half = TAPS_PER_PHASE / 2 * up;
    let len = 2 * half + 1;
    let cutoff = 0.5 / up.max(down) as f64;
    let i0_beta = bessel_i0(KAISER_BETA);
    (0..len)
        .map(|n| {
            let t = n as f64 - half as f64;
            let sinc = if t == 0.0 { 2.0 * cutoff } else { (2.0 * PI * cutoff * t).sin() / (PI * t) };
            let r = t / half as f64;
            let window = bessel_i0(KAISER_BETA * (1.0 - r * r).max(0.0).sqrt()) / i0_beta;
            sinc * window
        })
        .collect()
}

/// Resamples `x` by `up / down`. Output length is `ceil(len * up / down)`.
/// Each polyphase branch is normalized to unit DC gain.
pub fn resample_signal(x: &[f64], up: usize, down: usize) -> Vec<f64> {
    if up == down {
        return x.to_vec();
    }
    let h = prototype(up, down);
    let center = h.len() / 2;
    let mut phase_gain = vec![0.0; up];
    for (j, v) in h.iter().enumerate() {
        phase_gain[j % up] += v;
    }
    let out_len = (x.len() * up).div_ceil(down);
    let mut out = Vec::with_capacity(out_len);
    for m in 0..out_len {
        // Tap index for input k is m*down + center - k*up.
        let t = m * down + center;
        let phase = t % up;
        let k_max = (t / up).min(x.len().saturating_sub(1));
        let k_min = (t.saturating_sub(h.len() - 1)).div_ceil(up);
        let mut acc = 0.0;
        let mut k = k_min;
        while k <= k_max {
            acc += x[k] * h[t - k * up];
            k += 1;
        }
        out.push(acc / phase_gain[phase]);
    }
    out
}

/// Resamples a trace to `target_fs`. Digital samples are dropped.
pub fn resample(trace: &SignalTrace, target_fs: f64) -> Result<SignalTrace> {
    if trace.fs == target_fs {
        return Ok(trace.clone());
    }
    let (up, down) = rational_ratio(trace.fs, target_fs)?;
    Ok(SignalTrace::from_physical(trace.label.clone(), target_fs, resample_signal(&trace.samples, up, down)))
}
