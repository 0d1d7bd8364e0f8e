//! Minimal complex arithmetic on explicit (re, im) pairs.
//!
//! Unitary factors are carried as real angles for as long as possible and
//! exponentiated late; this type only exists for the short stretches where a
//! materialized complex value is unavoidable (scan accumulators, carries).

/// A complex number stored as a real pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct C64 {
    pub re: f64,
    pub im: f64,
}

pub const ZERO: C64 = C64 { re: 0.0, im: 0.0 };
pub const ONE: C64 = C64 { re: 1.0, im: 0.0 };

impl C64 {
    pub fn new(re: f64, im: f64) -> Self {
        C64 { re, im }
    }

    /// exp(i·theta) via a single sin_cos evaluation.
    pub fn from_angle(theta: f64) -> Self {
        let (s, c) = theta.sin_cos();
        C64 { re: c, im: s }
    }

    /// r·exp(i·theta).
    pub fn from_polar(r: f64, theta: f64) -> Self {
        let (s, c) = theta.sin_cos();
        C64 {
            re: r * c,
            im: r * s,
        }
    }

    pub fn add(self, rhs: C64) -> Self {
        C64 {
            re: self.re + rhs.re,
            im: self.im + rhs.im,
        }
    }

    pub fn sub(self, rhs: C64) -> Self {
        C64 {
            re: self.re - rhs.re,
            im: self.im - rhs.im,
        }
    }

    pub fn mul(self, rhs: C64) -> Self {
        C64 {
            re: self.re * rhs.re - self.im * rhs.im,
            im: self.re * rhs.im + self.im * rhs.re,
        }
    }

    pub fn scale(self, s: f64) -> Self {
        C64 {
            re: self.re * s,
            im: self.im * s,
        }
    }

    pub fn conj(self) -> Self {
        C64 {
            re: self.re,
            im: -self.im,
        }
    }

    pub fn abs(self) -> f64 {
        self.re.hypot(self.im)
    }

    /// Principal argument in (−π, π].
    pub fn arg(self) -> f64 {
        let a = self.im.atan2(self.re);
        // atan2 returns [−π, π]; fold the −π edge onto +π.
        if a <= -std::f64::consts::PI {
            std::f64::consts::PI
        } else {
            a
        }
    }

    pub fn is_finite(self) -> bool {
        self.re.is_finite() && self.im.is_finite()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn polar_roundtrip() {
        let z = C64::from_polar(2.0, 0.75);
        assert!((z.abs() - 2.0).abs() < 1e-15);
        assert!((z.arg() - 0.75).abs() < 1e-15);
    }

    #[test]
    fn rotation_composes_additively() {
        let a = C64::from_angle(0.3);
        let b = C64::from_angle(0.4);
        let ab = a.mul(b);
        let direct = C64::from_angle(0.7);
        assert!((ab.re - direct.re).abs() < 1e-15);
        assert!((ab.im - direct.im).abs() < 1e-15);
    }

    #[test]
    fn arg_maps_negative_real_axis_to_plus_pi() {
        let z = C64::new(-1.0, 0.0);
        assert_eq!(z.arg(), PI);
        let z = C64::new(-1.0, -0.0);
        assert_eq!(z.arg(), PI);
    }
}
