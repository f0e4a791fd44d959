//! Small fixed-size vector helpers used by the kinematic layer.

use std::f64::consts::PI;

pub type Vec3 = [f64; 3];

#[inline]
pub fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

#[inline]
pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine of the angle between `a` and `b`; `None` when either is zero.
pub fn cosine(a: Vec3, b: Vec3) -> Option<f64> {
    let denom = (dot(a, a) * dot(b, b)).sqrt();
    if denom == 0.0 || !denom.is_finite() {
        return None;
    }
    Some((dot(a, b) / denom).clamp(-1.0, 1.0))
}

/// Wraps an angle into (-π, π]. Values already in range are returned untouched.
pub fn wrap_angle(a: f64) -> f64 {
    if a > -PI && a <= PI {
        return a;
    }
    let r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r - 2.0 * PI
    } else {
        r
    }
}

pub fn wrap_angles(a: Vec3) -> Vec3 {
    [wrap_angle(a[0]), wrap_angle(a[1]), wrap_angle(a[2])]
}

/// Shortest signed angular difference `to - from`, per axis.
pub fn angle_diff(from: Vec3, to: Vec3) -> Vec3 {
    wrap_angles(sub(to, from))
}

pub fn max_abs(a: Vec3) -> f64 {
    a.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
}

/// SplitMix64 finalizer, used to derive independent RNG stream seeds.
pub fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
