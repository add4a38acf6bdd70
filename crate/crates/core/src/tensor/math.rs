//! Sigmoid and tanh evaluated four lanes at a time. The scalar forms run the
//! same lane arithmetic, so scalar and slice results agree bit for bit.

use wide::f64x4;

fn sigmoid4(v: f64x4) -> f64x4 {
    f64x4::ONE / (f64x4::ONE + (-v).exp())
}

fn lane0(v: f64x4) -> f64 {
    v.to_array()[0]
}

pub fn sigmoid(x: f64) -> f64 {
    lane0(sigmoid4(f64x4::splat(x)))
}

pub fn tanh(x: f64) -> f64 {
    lane0(f64x4::splat(x).tanh())
}

fn map4(xs: &[f64], out: &mut [f64], f: impl Fn(f64x4) -> f64x4) {
    assert_eq!(xs.len(), out.len(), "slice lengths differ");
    let mut src = xs.chunks_exact(4);
    let mut dst = out.chunks_exact_mut(4);
    for (x, o) in (&mut src).zip(&mut dst) {
        o.copy_from_slice(&f(f64x4::from([x[0], x[1], x[2], x[3]])).to_array());
    }
    let rest = src.remainder();
    if !rest.is_empty() {
        let mut pad = [0.0; 4];
        pad[..rest.len()].copy_from_slice(rest);
        let v = f(f64x4::from(pad)).to_array();
        dst.into_remainder().copy_from_slice(&v[..rest.len()]);
    }
}

/// `out[i] = sigmoid(scale * xs[i])`.
pub fn sigmoid_slice(xs: &[f64], scale: f64, out: &mut [f64]) {
    let s = f64x4::splat(scale);
    map4(xs, out, |v| sigmoid4(s * v));
}

pub fn tanh_slice(xs: &[f64], out: &mut [f64]) {
    map4(xs, out, f64x4::tanh);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn close_to_libm() {
        for i in -400..=400 {
            let x = i as f64 * 0.05 + 0.0123;
            assert!((tanh(x) - x.tanh()).abs() <= 4.0 * f64::EPSILON * x.tanh().abs().max(1e-300));
            let s = 1.0 / (1.0 + (-x).exp());
            assert!((sigmoid(x) - s).abs() <= 4.0 * f64::EPSILON * s);
        }
        assert_eq!(tanh(0.0), 0.0);
        assert_eq!(tanh(50.0), 1.0);
        assert_eq!(tanh(-50.0), -1.0);
        assert_eq!(sigmoid(-800.0), 0.0);
        assert_eq!(sigmoid(800.0), 1.0);
    }

    #[test]
    fn slices_match_scalars() {
        let xs: Vec<f64> = (0..11).map(|i| i as f64 * 0.7 - 3.0).collect();
        let mut a = vec![0.0; xs.len()];
        let mut b = vec![0.0; xs.len()];
        sigmoid_slice(&xs, 0.3, &mut a);
        tanh_slice(&xs, &mut b);
        for (i, &x) in xs.iter().enumerate() {
            assert_eq!(a[i].to_bits(), sigmoid(0.3 * x).to_bits());
            assert_eq!(b[i].to_bits(), tanh(x).to_bits());
        }
    }
}
