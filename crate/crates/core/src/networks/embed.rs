use crate::tensor::Tensor;

/// Angular frequency of sinusoid `k`: `2^k` rad per unit time.
fn frequency(k: usize) -> f64 {
    (1u64 << k) as f64
}

/// Per-row time features `[t, sin(ω_k t), cos(ω_k t)]` with `ω_k = 2^k`.
///
/// The lowest frequency is 1 rad, so the `(sin, cos)` pair at `k = 0` is
/// injective on `[0, 1]` and no two times in range share an embedding.
pub fn time_embedding(t: &[f64], freqs: usize) -> Tensor {
    let width = 1 + 2 * freqs;
    let mut data = Vec::with_capacity(t.len() * width);
    for &tv in t {
        data.push(tv);
        for k in 0..freqs {
            let a = frequency(k) * tv;
            data.push(a.sin());
            data.push(a.cos());
        }
    }
    Tensor::matrix(t.len(), width, data).expect("embedding shape")
}

/// Normalized block-centre coordinates of a `rows × cols` token grid plus
/// their Fourier features; one row per token in packing order.
pub fn position_features(rows: usize, cols: usize, freqs: usize) -> Tensor {
    let width = 2 + 4 * freqs;
    let mut data = Vec::with_capacity(rows * cols * width);
    for i in 0..rows {
        for j in 0..cols {
            let u = (i as f64 + 0.5) / rows as f64;
            let v = (j as f64 + 0.5) / cols as f64;
            data.push(u);
            data.push(v);
            for k in 1..=freqs {
                let w = std::f64::consts::PI * k as f64;
                data.extend([(w * u).sin(), (w * u).cos(), (w * v).sin(), (w * v).cos()]);
            }
        }
    }
    Tensor::matrix(rows * cols, width, data).expect("position shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn widths() {
        assert_eq!(time_embedding(&[0.1, 0.2], 6).shape(), &[2, 13]);
        assert_eq!(position_features(4, 6, 3).shape(), &[24, 14]);
    }

    #[test]
    fn top_frequency_alias_is_still_distinguished() {
        let freqs = 6;
        let period = 2.0 * std::f64::consts::PI / frequency(freqs - 1);
        let t0 = 0.1;
        let e = time_embedding(&[t0, t0 + period], freqs);
        let (a, b) = (e.row(0), e.row(1));
        // the highest-frequency pair matches exactly one period later...
        let last = 1 + 2 * (freqs - 1);
        assert!((a[last] - b[last]).abs() < 1e-12);
        // ...but the full embedding does not
        let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum();
        assert!(diff > 0.1);
    }

    #[test]
    fn lowest_pair_is_injective_on_unit_interval() {
        let ts: Vec<f64> = (0..=100).map(|i| i as f64 / 100.0).collect();
        let e = time_embedding(&ts, 1);
        for i in 0..ts.len() {
            for j in i + 1..ts.len() {
                let d = (e.row(i)[1] - e.row(j)[1]).abs() + (e.row(i)[2] - e.row(j)[2]).abs();
                assert!(d > 1e-3);
            }
        }
    }
}
