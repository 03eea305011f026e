//! Small statistics helpers shared by training probes and the benchmark
//! harness: least-squares slope fits and robust location/spread summaries.

/// Slope of the least-squares line through `(xs, ys)`.
///
/// Panics when fewer than two points are given or the x-values are all
/// equal (the slope is undefined there, not zero).
pub fn least_squares_slope(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len(), "slope fit needs paired points");
    assert!(xs.len() >= 2, "slope fit needs at least two points");
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for (&x, &y) in xs.iter().zip(ys) {
        sxx += (x - mx) * (x - mx);
        sxy += (x - mx) * (y - my);
    }
    assert!(sxx > 0.0, "slope fit needs spread in x");
    sxy / sxx
}

/// Slope of `ln y` against `ln x`; all values must be positive.
pub fn log_log_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|&v| {
        assert!(v > 0.0, "log-log fit needs positive x");
        v.ln()
    }).collect();
    let ly: Vec<f64> = ys.iter().map(|&v| {
        assert!(v > 0.0, "log-log fit needs positive y");
        v.ln()
    }).collect();
    least_squares_slope(&lx, &ly)
}

pub fn mean(xs: &[f64]) -> f64 {
    assert!(!xs.is_empty(), "mean of empty slice");
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Population standard deviation.
pub fn std_dev(xs: &[f64]) -> f64 {
    let m = mean(xs);
    (xs.iter().map(|&v| (v - m) * (v - m)).sum::<f64>() / xs.len() as f64).sqrt()
}

/// Median; averages the middle pair for even lengths.
pub fn median(xs: &[f64]) -> f64 {
    assert!(!xs.is_empty(), "median of empty slice");
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("median input must be ordered"));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
