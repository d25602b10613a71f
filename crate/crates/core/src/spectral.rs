//! Power spectra of the measurement traces and peak detection, used only to
//! seed the frequency optimization.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use std::f64::consts::{PI, TAU};

use crate::error::{invalid, Result};
use crate::sim::TraceSet;

/// Default grid oversampling relative to `pi / T`.
pub const DEFAULT_RESOLUTION_FACTOR: f64 = 4.0;
/// Default exclusion zone around the DC peak.
pub const DEFAULT_DEAD_ZONE: f64 = 0.1;
/// Default number of peaks kept.
pub const DEFAULT_MAX_PEAKS: usize = 6;

/// Data window applied before the transform.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Window {
    /// `C(w) = |(1/N) sum_n d_n e^{i w t_n}|^2`.
    #[default]
    Rectangular,
    /// Hann-weighted transform normalized by the window sum. Suppresses the
    /// sidelobes of strong lines at the cost of a main lobe twice as wide.
    Hann,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectrumOptions {
    pub resolution_factor: f64,
    pub window: Window,
    /// Subtract the (window-weighted) mean of each trace first, removing
    /// the DC line and its leakage.
    pub remove_mean: bool,
    /// Keep the sixteen per-trace spectra.
    pub keep_per_trace: bool,
}

impl Default for SpectrumOptions {
    fn default() -> Self {
        Self {
            resolution_factor: DEFAULT_RESOLUTION_FACTOR,
            window: Window::Rectangular,
            remove_mean: false,
            keep_per_trace: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PowerSpectrum {
    pub omegas: Vec<f64>,
    /// Sum of the per-trace spectra.
    pub values: Vec<f64>,
    pub per_trace: Option<Vec<Vec<f64>>>,
}

impl PowerSpectrum {
    pub fn spacing(&self) -> f64 {
        if self.omegas.len() > 1 {
            self.omegas[1] - self.omegas[0]
        } else {
            0.0
        }
    }
}

/// Rectangular-window spectrum on the grid `j pi / (T rf)`, `0 <= w <= omega_max`.
pub fn power_spectrum(traces: &TraceSet, omega_max: f64, resolution_factor: f64) -> Result<PowerSpectrum> {
    power_spectrum_with(
        traces,
        omega_max,
        &SpectrumOptions {
            resolution_factor,
            ..SpectrumOptions::default()
        },
    )
}

pub fn power_spectrum_with(
    traces: &TraceSet,
    omega_max: f64,
    opts: &SpectrumOptions,
) -> Result<PowerSpectrum> {
    if !(omega_max.is_finite() && omega_max > 0.0) {
        return Err(invalid(format!("omega_max must be positive, got {omega_max}")));
    }
    let rf = opts.resolution_factor;
    if !(rf.is_finite() && rf > 0.0) {
        return Err(invalid(format!("resolution factor must be positive, got {rf}")));
    }
    let plan = traces.plan;
    let step = PI / (plan.duration() * rf);
    let count = (omega_max / step).floor() as usize + 1;
    let omegas: Vec<f64> = (0..count).map(|j| j as f64 * step).collect();

    let weights = window_weights(opts.window, plan.n);
    let norm: f64 = weights.iter().sum();
    let fft_len = 2.0 * (plan.n - 1) as f64 * rf;
    let use_fft = (fft_len - fft_len.round()).abs() < 1e-9 && fft_len.round() as usize >= plan.n;

    let per: Vec<Vec<f64>> = traces
        .data()
        .iter()
        .map(|d| {
            let mean = if opts.remove_mean {
                d.iter().zip(&weights).map(|(x, w)| x * w).sum::<f64>() / norm
            } else {
                0.0
            };
            let weighted: Vec<f64> = d.iter().zip(&weights).map(|(x, w)| (x - mean) * w).collect();
            if use_fft {
                spectrum_fft(&weighted, norm, fft_len.round() as usize, count)
            } else {
                let times = traces.times();
                spectrum_direct(&weighted, &times, norm, &omegas)
            }
        })
        .collect();

    let mut values = vec![0.0; count];
    for tr in &per {
        for (v, x) in values.iter_mut().zip(tr) {
            *v += x;
        }
    }
    Ok(PowerSpectrum {
        omegas,
        values,
        per_trace: opts.keep_per_trace.then_some(per),
    })
}

fn window_weights(window: Window, n: usize) -> Vec<f64> {
    match window {
        Window::Rectangular => vec![1.0; n],
        Window::Hann => (0..n)
            .map(|i| 0.5 * (1.0 - (2.0 * PI * i as f64 / (n - 1) as f64).cos()))
            .collect(),
    }
}

/// `|(1/norm) sum_n x_n e^{i w t_n}|^2` at each requested frequency.
pub fn spectrum_direct(x: &[f64], times: &[f64], norm: f64, omegas: &[f64]) -> Vec<f64> {
    omegas
        .iter()
        .map(|&w| {
            let (mut re, mut im) = (0.0, 0.0);
            for (v, t) in x.iter().zip(times) {
                let (s, c) = (w * t).sin_cos();
                re += v * c;
                im += v * s;
            }
            (re * re + im * im) / (norm * norm)
        })
        .collect()
}

/// Zero-padded inverse FFT of length `len`; bin `j` sits at `w_j dt = 2 pi j / len`.
fn spectrum_fft(x: &[f64], norm: f64, len: usize, count: usize) -> Vec<f64> {
    let mut buf = vec![Complex::new(0.0, 0.0); len];
    for (b, v) in buf.iter_mut().zip(x) {
        b.re = *v;
    }
    let mut planner = FftPlanner::<f64>::new();
    planner.plan_fft_inverse(len).process(&mut buf);
    (0..count)
        .map(|j| buf[j % len].norm_sqr() / (norm * norm))
        .collect()
}

/// Robust noise floor `median + 5 MAD` of the spectrum outside the dead zone.
pub fn default_floor(spec: &PowerSpectrum, dead_zone: f64) -> f64 {
    let mut v: Vec<f64> = spec
        .omegas
        .iter()
        .zip(&spec.values)
        .filter(|(w, _)| **w >= dead_zone)
        .map(|(_, c)| *c)
        .collect();
    if v.is_empty() {
        return 0.0;
    }
    let med = median(&mut v);
    let mut dev: Vec<f64> = v.iter().map(|x| (x - med).abs()).collect();
    med + 5.0 * median(&mut dev)
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Local maxima of `C` above `floor` with `w >= dead_zone`; the `max_peaks`
/// largest are kept and returned in ascending frequency. Each location is
/// refined by a three-point parabola through `ln C`.
pub fn find_peaks(spec: &PowerSpectrum, floor: f64, max_peaks: usize, dead_zone: f64) -> Vec<f64> {
    select(local_maxima(spec, floor, dead_zone), max_peaks)
}

/// Upper envelope of the window's amplitude response `x` bins (`2 pi / T`)
/// from a line, relative to the line itself.
pub fn leakage_envelope(window: Window, x: f64) -> f64 {
    let x = x.abs();
    match window {
        Window::Rectangular if x > 1.0 => 1.0 / (PI * x),
        Window::Hann if x > 2.0 => 1.0 / (PI * x * (x * x - 1.0)),
        _ => 1.0,
    }
}

/// As `find_peaks`, but first drops every maximum that the window leakage
/// of stronger maxima could explain: `C_p < margin (sum_q E(d_pq) sqrt C_q)^2`
/// over stronger `q`, with `E` the envelope of `window` and `d` in bins of
/// `2 pi / duration`.
pub fn find_peaks_pruned(
    spec: &PowerSpectrum,
    floor: f64,
    max_peaks: usize,
    dead_zone: f64,
    window: Window,
    duration: f64,
    margin: f64,
) -> Vec<f64> {
    let all = local_maxima(spec, floor, dead_zone);
    let bin = TAU / duration;
    let kept: Vec<(f64, f64)> = all
        .iter()
        .filter(|(w, c)| {
            let leak: f64 = all
                .iter()
                .filter(|(_, c2)| c2 > c)
                .map(|(w2, c2)| leakage_envelope(window, (w - w2) / bin) * c2.sqrt())
                .sum();
            *c >= margin * leak * leak
        })
        .copied()
        .collect();
    select(kept, max_peaks)
}

fn select(mut found: Vec<(f64, f64)>, max_peaks: usize) -> Vec<f64> {
    found.sort_by(|a, b| b.1.total_cmp(&a.1));
    found.truncate(max_peaks);
    let mut peaks: Vec<f64> = found.into_iter().map(|p| p.0).collect();
    peaks.sort_by(f64::total_cmp);
    peaks
}

/// `(location, height)` of every interior local maximum above the floor.
fn local_maxima(spec: &PowerSpectrum, floor: f64, dead_zone: f64) -> Vec<(f64, f64)> {
    let c = &spec.values;
    let w = &spec.omegas;
    let dw = spec.spacing();
    let mut found: Vec<(f64, f64)> = Vec::new();
    for j in 1..c.len().saturating_sub(1) {
        if w[j] < dead_zone || c[j] <= floor {
            continue;
        }
        if c[j] > c[j - 1] && c[j] >= c[j + 1] {
            let ln = |x: f64| x.max(f64::MIN_POSITIVE).ln();
            let (l0, l1, l2) = (ln(c[j - 1]), ln(c[j]), ln(c[j + 1]));
            let curv = l0 - 2.0 * l1 + l2;
            let offset = if curv < 0.0 {
                (0.5 * (l0 - l2) / curv).clamp(-0.5, 0.5)
            } else {
                0.0
            };
            found.push((w[j] + offset * dw, c[j]));
        }
    }
    found
}

/// Write `omega,C` rows.
pub fn write_spectrum_csv(spec: &PowerSpectrum, path: &std::path::Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["omega", "C"])?;
    for (o, c) in spec.omegas.iter().zip(&spec.values) {
        w.write_record([o.to_string(), c.to_string()])?;
    }
    w.flush()?;
    Ok(())
}
