use std::f64::consts::SQRT_2;

/// Real Fourier components of a C4 regular vector with mean normalisation:
/// `type0` is the mean, so `‖forward(x)‖ = ‖x‖ / 2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FourierC4 {
    pub type0: f64,
    pub type1: [f64; 2],
    pub type2: f64,
}

impl FourierC4 {
    pub fn norm(&self) -> f64 {
        (self.type0 * self.type0 + self.type1[0] * self.type1[0] + self.type1[1] * self.type1[1] + self.type2 * self.type2)
            .sqrt()
    }
}

pub fn fourier_c4(x: [f64; 4]) -> FourierC4 {
    FourierC4 {
        type0: (x[0] + x[1] + x[2] + x[3]) / 4.0,
        type1: [(x[0] - x[2]) / (2.0 * SQRT_2), (x[1] - x[3]) / (2.0 * SQRT_2)],
        type2: (x[0] - x[1] + x[2] - x[3]) / 4.0,
    }
}

pub fn inverse_fourier_c4(f: FourierC4) -> [f64; 4] {
    let (a, b) = (SQRT_2 * f.type1[0], SQRT_2 * f.type1[1]);
    [
        f.type0 + a + f.type2,
        f.type0 + b - f.type2,
        f.type0 - a + f.type2,
        f.type0 - b - f.type2,
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::group::{Block, CyclicGroup, RepresentationSpec};

    #[test]
    fn constant_signal_has_only_mean() {
        let f = fourier_c4([2.5; 4]);
        assert_eq!(f, FourierC4 { type0: 2.5, type1: [0.0, 0.0], type2: 0.0 });
    }

    #[test]
    fn impulse_matches_direct_dft() {
        // X_k = Σ x_m e^{-2πi km/4} for x = δ_0 is 1 for every k
        let f = fourier_c4([1.0, 0.0, 0.0, 0.0]);
        let dft_re = [1.0, 1.0, 1.0];
        assert!((f.type0 - dft_re[0] / 4.0).abs() < 1e-15);
        assert!((f.type1[0] - dft_re[1] / (2.0 * SQRT_2)).abs() < 1e-15);
        assert!(f.type1[1].abs() < 1e-15);
        assert!((f.type2 - dft_re[2] / 4.0).abs() < 1e-15);
    }

    #[test]
    fn type1_transforms_as_irrep() {
        let x = [0.3, -1.2, 0.7, 2.0];
        let c4 = CyclicGroup::C4;
        let reg = RepresentationSpec::regular(c4, 1);
        for g in c4.elements() {
            let gx = reg.apply(g, &x, 1).unwrap();
            let f = fourier_c4(gx.try_into().unwrap());
            let f0 = fourier_c4(x);
            let rot = RepresentationSpec::new(c4, vec![Block::Irrep(1)]).apply(g, &f0.type1, 1).unwrap();
            assert!((f.type0 - f0.type0).abs() < 1e-15);
            assert!((f.type1[0] - rot[0]).abs() < 1e-15 && (f.type1[1] - rot[1]).abs() < 1e-15);
            let sign = if g.index % 2 == 0 { 1.0 } else { -1.0 };
            assert!((f.type2 - sign * f0.type2).abs() < 1e-15);
        }
    }

    #[test]
    fn roundtrip_and_norm() {
        let mut s = 0.123_f64;
        for _ in 0..100 {
            let x: [f64; 4] = std::array::from_fn(|_| {
                s = (s * 9301.0 + 0.49297).fract();
                s * 4.0 - 2.0
            });
            let f = fourier_c4(x);
            let back = inverse_fourier_c4(f);
            for (a, b) in x.iter().zip(back) {
                assert!((a - b).abs() <= 1e-12);
            }
            let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((f.norm() - nx / 2.0).abs() < 1e-12);
        }
    }
}
