//! Quadrature rules on triangles (barycentric) and on edges (parameter in [0, 1]).

/// Barycentric points and weights; weights sum to one and are scaled by the
/// element area at the call site.
#[derive(Debug, Clone, Copy)]
pub struct TriangleRule {
    pub points: &'static [[f64; 3]],
    pub weights: &'static [f64],
}

/// Points in [0, 1] and weights summing to one, scaled by the edge length.
#[derive(Debug, Clone, Copy)]
pub struct EdgeRule {
    pub points: &'static [f64],
    pub weights: &'static [f64],
}

const A4_1: f64 = 0.445_948_490_915_964_9;
const B4_1: f64 = 1.0 - 2.0 * A4_1;
const W4_1: f64 = 0.223_381_589_678_011_47;
const A4_2: f64 = 0.091_576_213_509_770_74;
const B4_2: f64 = 1.0 - 2.0 * A4_2;
const W4_2: f64 = 0.109_951_743_655_321_87;

static DEG4_POINTS: [[f64; 3]; 6] = [
    [A4_1, A4_1, B4_1],
    [A4_1, B4_1, A4_1],
    [B4_1, A4_1, A4_1],
    [A4_2, A4_2, B4_2],
    [A4_2, B4_2, A4_2],
    [B4_2, A4_2, A4_2],
];
static DEG4_WEIGHTS: [f64; 6] = [W4_1, W4_1, W4_1, W4_2, W4_2, W4_2];

// Radon's 7-point rule: a = (6 - sqrt 15)/21, b = (6 + sqrt 15)/21,
// weights (155 -+ sqrt 15)/1200 and 9/40 at the centroid.
const A5_1: f64 = 0.101_286_507_323_456_34;
const B5_1: f64 = 1.0 - 2.0 * A5_1;
const W5_1: f64 = 0.125_939_180_544_827_14;
const A5_2: f64 = 0.470_142_064_105_115_1;
const B5_2: f64 = 1.0 - 2.0 * A5_2;
const W5_2: f64 = 0.132_394_152_788_506_2;
const THIRD: f64 = 1.0 / 3.0;

static DEG5_POINTS: [[f64; 3]; 7] = [
    [THIRD, THIRD, THIRD],
    [A5_1, A5_1, B5_1],
    [A5_1, B5_1, A5_1],
    [B5_1, A5_1, A5_1],
    [A5_2, A5_2, B5_2],
    [A5_2, B5_2, A5_2],
    [B5_2, A5_2, A5_2],
];
static DEG5_WEIGHTS: [f64; 7] = [0.225, W5_1, W5_1, W5_1, W5_2, W5_2, W5_2];

/// Symmetric 6-point rule, exact for polynomials of degree 4.
pub const TRI_DEG4: TriangleRule = TriangleRule {
    points: &DEG4_POINTS,
    weights: &DEG4_WEIGHTS,
};

/// Radon 7-point rule, exact for polynomials of degree 5.
pub const TRI_DEG5: TriangleRule = TriangleRule {
    points: &DEG5_POINTS,
    weights: &DEG5_WEIGHTS,
};

const G3_D: f64 = 0.387_298_334_620_741_7; // sqrt(3/5)/2
static GAUSS3_POINTS: [f64; 3] = [0.5 - G3_D, 0.5, 0.5 + G3_D];
static GAUSS3_WEIGHTS: [f64; 3] = [5.0 / 18.0, 8.0 / 18.0, 5.0 / 18.0];

const G5_X1: f64 = 0.269_234_655_052_841_55; // sqrt(5 - 2 sqrt(10/7)) / 6
const G5_X2: f64 = 0.453_089_922_969_332_1; // sqrt(5 + 2 sqrt(10/7)) / 6
const G5_W1: f64 = 0.239_314_335_249_683_24; // (322 + 13 sqrt 70) / 1800
const G5_W2: f64 = 0.118_463_442_528_094_54; // (322 - 13 sqrt 70) / 1800
static GAUSS5_POINTS: [f64; 5] = [0.5 - G5_X2, 0.5 - G5_X1, 0.5, 0.5 + G5_X1, 0.5 + G5_X2];
static GAUSS5_WEIGHTS: [f64; 5] = [G5_W2, G5_W1, 64.0 / 225.0, G5_W1, G5_W2];

/// 3-point Gauss-Legendre, exact for degree 5.
pub const EDGE_GAUSS3: EdgeRule = EdgeRule {
    points: &GAUSS3_POINTS,
    weights: &GAUSS3_WEIGHTS,
};

/// 5-point Gauss-Legendre, exact for degree 9.
pub const EDGE_GAUSS5: EdgeRule = EdgeRule {
    points: &GAUSS5_POINTS,
    weights: &GAUSS5_WEIGHTS,
};

impl TriangleRule {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// Physical quadrature points of the triangle with the given vertices.
    pub fn map(&self, v: &[[f64; 2]; 3]) -> impl Iterator<Item = ([f64; 2], f64)> + '_ {
        let (a, b, c) = (v[0], v[1], v[2]);
        self.points.iter().zip(self.weights).map(move |(l, &w)| {
            (
                [
                    l[0] * a[0] + l[1] * b[0] + l[2] * c[0],
                    l[0] * a[1] + l[1] * b[1] + l[2] * c[1],
                ],
                w,
            )
        })
    }
}

impl EdgeRule {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// Physical points on the segment from `a` to `b`.
    pub fn map(&self, a: [f64; 2], b: [f64; 2]) -> impl Iterator<Item = ([f64; 2], f64)> + '_ {
        self.points.iter().zip(self.weights).map(move |(&t, &w)| {
            (
                [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])],
                w,
            )
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn factorial(n: u32) -> f64 {
        (1..=n).map(f64::from).product()
    }

    // int_{ref triangle} x^i y^j = i! j! / (i + j + 2)!
    fn monomial_exact(i: u32, j: u32) -> f64 {
        factorial(i) * factorial(j) / factorial(i + j + 2)
    }

    fn check_triangle(rule: TriangleRule, degree: u32) {
        let v = [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]];
        for i in 0..=degree {
            for j in 0..=(degree - i) {
                let q: f64 = rule
                    .map(&v)
                    .map(|(x, w)| 0.5 * w * x[0].powi(i as i32) * x[1].powi(j as i32))
                    .sum();
                let e = monomial_exact(i, j);
                assert!((q - e).abs() < 1e-15, "x^{i} y^{j}: {q} vs {e}");
            }
        }
    }

    #[test]
    fn triangle_rules_integrate_monomials_exactly() {
        check_triangle(TRI_DEG4, 4);
        check_triangle(TRI_DEG5, 5);
    }

    #[test]
    fn radon_constants_match_closed_form() {
        let s = 15f64.sqrt();
        assert!((A5_1 - (6.0 - s) / 21.0).abs() < 1e-16);
        assert!((A5_2 - (6.0 + s) / 21.0).abs() < 1e-16);
        assert!((W5_1 - (155.0 - s) / 1200.0).abs() < 1e-16);
        assert!((W5_2 - (155.0 + s) / 1200.0).abs() < 1e-16);
    }

    #[test]
    fn edge_rules_integrate_monomials_exactly() {
        for (rule, deg) in [(EDGE_GAUSS3, 5), (EDGE_GAUSS5, 9)] {
            for k in 0..=deg {
                let q: f64 = rule.map([0.0, 0.0], [1.0, 0.0]).map(|(x, w)| w * x[0].powi(k)).sum();
                assert!((q - 1.0 / f64::from(k as u32 + 1)).abs() < 1e-15, "degree {k}");
            }
        }
    }
}
