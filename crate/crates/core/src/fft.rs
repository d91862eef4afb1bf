//! Thin FFT helpers over rustfft with a thread-local plan cache.

use num_complex::Complex64;
use rustfft::FftPlanner;
use std::cell::RefCell;

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

/// Forward DFT, unnormalized.
pub fn fft(x: &[Complex64]) -> Vec<Complex64> {
    let mut buf = x.to_vec();
    PLANNER.with(|p| {
        let plan = p.borrow_mut().plan_fft_forward(buf.len());
        plan.process(&mut buf);
    });
    buf
}

/// Inverse DFT, normalized by 1/N so that ifft(fft(x)) == x.
pub fn ifft(x: &[Complex64]) -> Vec<Complex64> {
    let mut buf = x.to_vec();
    let n = buf.len();
    PLANNER.with(|p| {
        let plan = p.borrow_mut().plan_fft_inverse(n);
        plan.process(&mut buf);
    });
    let scale = 1.0 / n as f64;
    for v in &mut buf {
        *v *= scale;
    }
    buf
}

/// Forward DFT of a real signal.
pub fn fft_real(x: &[f64]) -> Vec<Complex64> {
    let buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft(&buf)
}

/// Signed frequency of DFT bin `k` for length `n` at sampling rate `fs`.
/// Bins above n/2 map to negative frequencies.
pub fn bin_frequency(k: usize, n: usize, fs: f64) -> f64 {
    if k <= n / 2 {
        k as f64 * fs / n as f64
    } else {
        (k as f64 - n as f64) * fs / n as f64
    }
}
