//! Five-point Gauss–Legendre rule on the unit interval.

use nalgebra::Vector3;

/// Nodes on `[0, 1]`, ascending.
pub const GL5_NODES: [f64; 5] = [
    0.046_910_077_030_668_004,
    0.230_765_344_947_158_45,
    0.5,
    0.769_234_655_052_841_5,
    0.953_089_922_969_332,
];

/// Weights on `[0, 1]`; they sum to one.
pub const GL5_WEIGHTS: [f64; 5] = [
    0.118_463_442_528_094_54,
    0.239_314_335_249_683_23,
    0.284_444_444_444_444_45,
    0.239_314_335_249_683_23,
    0.118_463_442_528_094_54,
];

/// Signed integral of `f` over `[a, b]` (exact for polynomials through degree 9).
pub fn gl5<F>(a: f64, b: f64, mut f: F) -> Vector3<f64>
where
    F: FnMut(f64) -> Vector3<f64>,
{
    let len = b - a;
    if len == 0.0 {
        return Vector3::zeros();
    }
    let mut acc = Vector3::zeros();
    for (xi, w) in GL5_NODES.iter().zip(GL5_WEIGHTS.iter()) {
        acc += *w * f(a + len * xi);
    }
    acc * len
}

/// Quadrature nodes `s_i = a + (b − a)·ξ_i` for the same interval.
pub fn gl5_points(a: f64, b: f64) -> [f64; 5] {
    let len = b - a;
    GL5_NODES.map(|xi| a + len * xi)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Legendre P_n and its derivative by the three-term recurrence.
    fn legendre(n: usize, x: f64) -> (f64, f64) {
        let (mut p0, mut p1) = (1.0, x);
        for k in 2..=n {
            let kf = k as f64;
            let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
            p0 = p1;
            p1 = p2;
        }
        let dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
        (p1, dp)
    }

    #[test]
    fn table_matches_newton_roots_of_p5() {
        for (i, (&node, &weight)) in GL5_NODES.iter().zip(GL5_WEIGHTS.iter()).enumerate() {
            // Chebyshev-style initial guess, then Newton on P5 over [-1, 1].
            let k = (5 - i) as f64;
            let mut x = (std::f64::consts::PI * (k - 0.25) / 5.5).cos();
            for _ in 0..50 {
                let (p, dp) = legendre(5, x);
                x -= p / dp;
            }
            let (_, dp) = legendre(5, x);
            let w = 2.0 / ((1.0 - x * x) * dp * dp);
            assert!(((x + 1.0) / 2.0 - node).abs() < 1e-14, "node {i}: {} vs {node}", (x + 1.0) / 2.0);
            assert!((w / 2.0 - weight).abs() < 1e-14, "weight {i}");
        }
        assert!((GL5_WEIGHTS.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn exact_through_degree_nine() {
        for deg in 0..=9 {
            let got = gl5(-0.3, 1.7, |s| Vector3::new(s.powi(deg), 0.0, 0.0)).x;
            let d = deg as f64 + 1.0;
            let exact = (1.7f64.powf(d) - (-0.3f64).powf(d)) / d;
            assert!((got - exact).abs() < 1e-10 * exact.abs().max(1.0), "degree {deg}");
        }
        // degree 10 is no longer exact
        let got = gl5(0.0, 1.0, |s| Vector3::new(s.powi(10), 0.0, 0.0)).x;
        assert!((got - 1.0 / 11.0).abs() > 1e-9);
    }

    #[test]
    fn reversed_limits_negate() {
        let f = |s: f64| Vector3::new(s.sin(), s * s, 1.0);
        let fwd = gl5(0.2, 0.9, f);
        let back = gl5(0.9, 0.2, f);
        assert!((fwd + back).norm() < 1e-15);
        assert_eq!(gl5(0.4, 0.4, f), Vector3::zeros());
    }
}
