//! Brute-force threshold oracles and random histogram generators.

use rand::Rng as _;
use sscd::rng::Rng;

/// Exhaustive Otsu: every split k in 1..n is scored from scratch; first maximum wins.
pub fn otsu_brute(hist: &[u64]) -> usize {
    let n = hist.len();
    let centre = |i: usize| (i as f64 + 0.5) / n as f64;
    let total: u64 = hist.iter().sum();
    let mut best = (1usize, -1.0f64);
    for k in 1..n {
        let c0: u64 = hist[..k].iter().sum();
        let c1 = total - c0;
        if c0 == 0 || c1 == 0 {
            continue;
        }
        let m0 = (0..k).map(|i| hist[i] as f64 * centre(i)).sum::<f64>() / c0 as f64;
        let m1 = (k..n).map(|i| hist[i] as f64 * centre(i)).sum::<f64>() / c1 as f64;
        let var = (c0 as f64 / total as f64) * (c1 as f64 / total as f64) * (m0 - m1) * (m0 - m1);
        if var > best.1 {
            best = (k, var);
        }
    }
    best.0
}

/// Exhaustive triangle knee using exact integer cross products.
///
/// Peak is the first maximal bin. The line runs to the last non-empty bin on
/// the side with longer support (right on a tie). Among bins between peak and
/// end the largest distance wins, and equal distances go to the bin farther
/// from the peak.
pub fn triangle_brute(hist: &[u64]) -> usize {
    let n = hist.len();
    let max = *hist.iter().max().unwrap();
    let peak = hist.iter().position(|&c| c == max).unwrap();
    let first = hist.iter().position(|&c| c > 0).unwrap_or(0);
    let last = hist.iter().rposition(|&c| c > 0).unwrap_or(n - 1);
    let end = if last - peak >= peak - first { last } else { first };
    let (px, py) = (peak as i128, hist[peak] as i128);
    let (dx, dy) = (end as i128 - px, hist[end] as i128 - py);
    let (lo, hi) = (peak.min(end), peak.max(end));
    let mut best: Option<(usize, i128)> = None;
    for i in lo..=hi {
        let cross = (dy * (i as i128 - px) - dx * (hist[i] as i128 - py)).abs();
        let farther = |b: usize| i.abs_diff(peak) > b.abs_diff(peak);
        best = match best {
            Some((b, d)) if d > cross || (d == cross && !farther(b)) => Some((b, d)),
            _ => Some((i, cross)),
        };
    }
    best.unwrap().0
}

fn bump(h: &mut [f64], centre: f64, width: f64, height: f64) {
    for (i, v) in h.iter_mut().enumerate() {
        let z = (i as f64 - centre) / width;
        *v += height * (-0.5 * z * z).exp();
    }
}

/// Random 256-bin histogram of one of several shapes, with empty stretches and noise.
pub fn random_histogram(rng: &mut Rng) -> Vec<u64> {
    let n = 256;
    let mut h = vec![0.0f64; n];
    match rng.random_range(0..4) {
        // skewed unimodal, tail to the right
        0 => {
            let p = rng.random_range(0..60) as f64;
            let decay = rng.random_range(5.0..60.0);
            for (i, v) in h.iter_mut().enumerate() {
                let x = i as f64 - p;
                *v = if x < 0.0 { (-(x * x) / 20.0).exp() } else { (-x / decay).exp() } * 5000.0;
            }
        }
        // skewed unimodal, tail to the left
        1 => {
            let p = rng.random_range(196..256) as f64;
            let decay = rng.random_range(5.0..60.0);
            for (i, v) in h.iter_mut().enumerate() {
                let x = p - i as f64;
                *v = if x < 0.0 { (-(x * x) / 20.0).exp() } else { (-x / decay).exp() } * 5000.0;
            }
        }
        // bimodal
        2 => {
            bump(&mut h, rng.random_range(20.0..110.0), rng.random_range(4.0..25.0), 3000.0);
            bump(&mut h, rng.random_range(140.0..240.0), rng.random_range(4.0..25.0), rng.random_range(200.0..3000.0));
        }
        // unstructured
        _ => {
            for v in h.iter_mut() {
                *v = rng.random_range(0.0..1000.0);
            }
        }
    }
    let mut out: Vec<u64> = h
        .iter()
        .map(|&v| (v * rng.random_range(0.8..1.2)).round().max(0.0) as u64)
        .collect();
    // Occasional empty runs and a guaranteed non-empty histogram.
    if rng.random_bool(0.5) {
        let a = rng.random_range(0..n);
        let len = rng.random_range(1..30);
        for v in out.iter_mut().skip(a).take(len) {
            *v = 0;
        }
    }
    if out.iter().all(|&v| v == 0) {
        out[rng.random_range(0..n)] = 1;
    }
    out
}
