//! Riemannian geometry of the unit sphere `S^{d-1}`.

use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, norm, scaled};
use crate::scalar::Scalar;

/// Points closer than this to the antipode have no log map.
pub const ANTIPODE_MARGIN: f64 = 1e-6;
/// Below this angle `θ / sin θ` is replaced by `1 + θ²/6`.
pub const TAYLOR_THRESHOLD: f64 = 1e-4;
pub const DEFAULT_MEAN_TOL: f64 = 1e-10;
pub const DEFAULT_MEAN_MAX_ITER: usize = 200;

/// A point on the unit sphere. Construction renormalises.
#[derive(Clone, Debug, PartialEq)]
pub struct UnitVector<T> {
    coords: Vec<T>,
}

impl<T: Scalar> UnitVector<T> {
    pub fn new(v: Vec<T>) -> Result<Self> {
        if v.is_empty() {
            return Err(Error::EmptyDimension("unit vector of length 0"));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::Domain("non-finite coordinates".into()));
        }
        let n = norm(&v);
        if !(n > T::min_positive_value()) || !n.is_finite() {
            return Err(Error::Degenerate("cannot normalise a zero vector".into()));
        }
        Ok(Self {
            coords: v.into_iter().map(|x| x / n).collect(),
        })
    }

    /// Takes already-normalised coordinates as they are, so persisted points
    /// round-trip bit for bit. Rejects vectors whose norm is off by more than
    /// `1e-6`.
    pub fn from_normalized(v: Vec<T>) -> Result<Self> {
        if v.is_empty() {
            return Err(Error::EmptyDimension("unit vector of length 0"));
        }
        let n = norm(&v);
        if !n.is_finite() || (n - T::one()).abs() > T::lit(1e-6) {
            return Err(Error::Domain(format!("stored unit vector has norm {n}")));
        }
        Ok(Self { coords: v })
    }

    /// Standard basis vector `e_i` in dimension `d`.
    pub fn basis(d: usize, i: usize) -> Self {
        let mut coords = vec![T::zero(); d];
        coords[i] = T::one();
        Self { coords }
    }

    pub fn as_slice(&self) -> &[T] {
        &self.coords
    }

    pub fn into_vec(self) -> Vec<T> {
        self.coords
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }

    pub fn dot(&self, other: &Self) -> T {
        dot(&self.coords, &other.coords)
    }

    pub fn neg(&self) -> Self {
        Self {
            coords: self.coords.iter().map(|&x| -x).collect(),
        }
    }
}

/// A vector in the tangent space at `base`.
#[derive(Clone, Debug, PartialEq)]
pub struct TangentVector<T> {
    base: UnitVector<T>,
    direction: Vec<T>,
}

impl<T: Scalar> TangentVector<T> {
    /// Checks `base · direction = 0` within `1e-10 · max(1, ‖direction‖)`.
    pub fn new(base: UnitVector<T>, direction: Vec<T>) -> Result<Self> {
        if direction.len() != base.dim() {
            return Err(Error::Dimension(format!(
                "tangent direction of length {} at a point of dimension {}",
                direction.len(),
                base.dim()
            )));
        }
        let along = dot(base.as_slice(), &direction);
        let tol = T::lit(1e-10) * norm(&direction).max(T::one());
        if along.abs() > tol {
            return Err(Error::Domain(format!(
                "vector is not tangent at its base (normal component {:e})",
                along.to_f64_lossy()
            )));
        }
        Ok(Self { base, direction })
    }

    /// Orthogonal projection of an ambient vector onto the tangent space at `base`.
    pub fn project(base: &UnitVector<T>, v: &[T]) -> Result<Self> {
        if v.len() != base.dim() {
            return Err(Error::Dimension(format!(
                "projecting a vector of length {} at a point of dimension {}",
                v.len(),
                base.dim()
            )));
        }
        let mut direction = v.to_vec();
        let along = dot(base.as_slice(), &direction);
        axpy(-along, base.as_slice(), &mut direction);
        Ok(Self {
            base: base.clone(),
            direction,
        })
    }

    pub fn zero(base: &UnitVector<T>) -> Self {
        Self {
            base: base.clone(),
            direction: vec![T::zero(); base.dim()],
        }
    }

    pub fn base(&self) -> &UnitVector<T> {
        &self.base
    }

    pub fn direction(&self) -> &[T] {
        &self.direction
    }

    pub fn into_direction(self) -> Vec<T> {
        self.direction
    }

    pub fn norm(&self) -> T {
        norm(&self.direction)
    }

    pub fn scaled(&self, alpha: T) -> Self {
        Self {
            base: self.base.clone(),
            direction: scaled(alpha, &self.direction),
        }
    }
}

/// `arccos(p·x)` with the dot product clamped to `[-1, 1]`.
pub fn geodesic_distance<T: Scalar>(p: &UnitVector<T>, x: &UnitVector<T>) -> T {
    p.dot(x).max(-T::one()).min(T::one()).acos()
}

/// Logarithmic map at `mu`.
///
/// The angle is taken as `atan2(‖x⊥‖, μ·x)`, which agrees with `arccos(μ·x)`
/// but keeps full precision near `0` and `π`.
pub fn log_map<T: Scalar>(mu: &UnitVector<T>, x: &UnitVector<T>) -> Result<TangentVector<T>> {
    if mu.dim() != x.dim() {
        return Err(Error::Dimension(format!(
            "log map between dimensions {} and {}",
            mu.dim(),
            x.dim()
        )));
    }
    let c = mu.dot(x);
    let mut perp = x.as_slice().to_vec();
    axpy(-c, mu.as_slice(), &mut perp);
    // Second Gram-Schmidt pass keeps the result tangent to rounding.
    let resid = dot(mu.as_slice(), &perp);
    axpy(-resid, mu.as_slice(), &mut perp);

    let sin_theta = norm(&perp);
    let theta = sin_theta.atan2(c);
    if theta >= T::PI() - T::lit(ANTIPODE_MARGIN) {
        return Err(Error::Antipodal {
            angle: theta.to_f64_lossy(),
            index: None,
        });
    }
    let factor = if theta < T::lit(TAYLOR_THRESHOLD) {
        T::one() + theta * theta / T::lit(6.0)
    } else {
        theta / sin_theta
    };
    Ok(TangentVector {
        base: mu.clone(),
        direction: scaled(factor, &perp),
    })
}

/// Exponential map `cos(‖u‖) μ + sin(‖u‖) u/‖u‖`.
pub fn exp_map<T: Scalar>(mu: &UnitVector<T>, u: &TangentVector<T>) -> Result<UnitVector<T>> {
    if mu.dim() != u.base.dim() {
        return Err(Error::Dimension(format!(
            "exp map at dimension {} with a tangent of dimension {}",
            mu.dim(),
            u.base.dim()
        )));
    }
    let offset = mu
        .as_slice()
        .iter()
        .zip(u.base.as_slice())
        .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()));
    if offset > T::lit(1e-12) {
        return Err(Error::BaseMismatch(offset.to_f64_lossy()));
    }
    let n = u.norm();
    if n >= T::PI() {
        return Err(Error::Domain(format!(
            "tangent vector norm {} is not below π",
            n.to_f64_lossy()
        )));
    }
    if n == T::zero() {
        return Ok(mu.clone());
    }
    let mut out = scaled(n.cos(), mu.as_slice());
    axpy(n.sin() / n, &u.direction, &mut out);
    UnitVector::new(out)
}

/// Normalised arithmetic mean.
pub fn frechet_mean_approx<T: Scalar>(points: &[UnitVector<T>]) -> Result<UnitVector<T>> {
    let first = points
        .first()
        .ok_or(Error::EmptyDimension("Fréchet mean of an empty set"))?;
    let d = first.dim();
    let mut sum = vec![T::zero(); d];
    for p in points {
        if p.dim() != d {
            return Err(Error::Dimension("points of mixed dimension".into()));
        }
        axpy(T::one(), p.as_slice(), &mut sum);
    }
    let n = T::from_usize_lossy(points.len());
    if norm(&sum) / n <= T::lit(1e-9) {
        return Err(Error::Degenerate(
            "arithmetic mean vanishes (balanced point set)".into(),
        ));
    }
    UnitVector::new(sum)
}

/// Result of the iterative Fréchet mean.
#[derive(Clone, Debug)]
pub struct FrechetMean<T> {
    pub mean: UnitVector<T>,
    /// Number of gradient evaluations.
    pub iterations: usize,
    /// Norm of the mean log-map at `mean`.
    pub residual: T,
    /// True when the arithmetic mean vanished and the first point seeded the iteration.
    pub fell_back: bool,
}

/// Mean of `log_map(mu, x_i)`.
pub fn mean_log<T: Scalar>(mu: &UnitVector<T>, points: &[UnitVector<T>]) -> Result<Vec<T>> {
    let mut g = vec![T::zero(); mu.dim()];
    for (i, p) in points.iter().enumerate() {
        let u = log_map(mu, p).map_err(|e| match e {
            Error::Antipodal { angle, .. } => Error::Antipodal {
                angle,
                index: Some(i),
            },
            e => e,
        })?;
        axpy(T::one(), u.direction(), &mut g);
    }
    let n = T::from_usize_lossy(points.len());
    Ok(g.into_iter().map(|v| v / n).collect())
}

/// Exact Fréchet (Karcher) mean by Riemannian gradient descent with unit step:
/// `μ ← exp_μ(mean_i log_μ(x_i))`, started at the normalised arithmetic mean
/// (or the first point when that mean vanishes).
pub fn frechet_mean_iterative<T: Scalar>(
    points: &[UnitVector<T>],
    tol: T,
    max_iter: usize,
) -> Result<FrechetMean<T>> {
    let (mut mu, fell_back) = match frechet_mean_approx(points) {
        Ok(m) => (m, false),
        Err(Error::Degenerate(_)) => (points[0].clone(), true),
        Err(e) => return Err(e),
    };
    let mut residual = T::infinity();
    for it in 1..=max_iter {
        let g = mean_log(&mu, points)?;
        residual = norm(&g);
        if residual < tol {
            return Ok(FrechetMean {
                mean: mu,
                iterations: it,
                residual,
                fell_back,
            });
        }
        let step = TangentVector::project(&mu, &g)?;
        mu = exp_map(&mu, &step)?;
    }
    Err(Error::Convergence {
        what: "Fréchet mean",
        iterations: max_iter,
        residual: residual.to_f64_lossy(),
    })
}

/// `Σ d²(p, x_i)`.
pub fn frechet_objective<T: Scalar>(p: &UnitVector<T>, points: &[UnitVector<T>]) -> T {
    points
        .iter()
        .map(|x| {
            let d = geodesic_distance(p, x);
            d * d
        })
        .sum()
}

/// Spherical linear interpolation between two non-antipodal points.
pub fn slerp<T: Scalar>(a: &UnitVector<T>, b: &UnitVector<T>, t: T) -> Result<UnitVector<T>> {
    let u = log_map(a, b)?;
    exp_map(a, &u.scaled(t))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{sub, SeededRng};
    use std::f64::consts::{FRAC_PI_2, PI};

    fn random_unit(rng: &mut SeededRng, d: usize) -> UnitVector<f64> {
        UnitVector::new(rng.gaussian_vec(d).unwrap()).unwrap()
    }

    #[test]
    fn distance_special_cases() {
        let e1 = UnitVector::<f64>::basis(3, 0);
        let e2 = UnitVector::<f64>::basis(3, 1);
        assert_eq!(geodesic_distance(&e1, &e1), 0.0);
        assert!((geodesic_distance(&e1, &e2) - FRAC_PI_2).abs() < 1e-15);
        assert!((geodesic_distance(&e1, &e1.neg()) - PI).abs() < 1e-15);
    }

    #[test]
    fn unit_vector_rejects_zero() {
        assert!(matches!(
            UnitVector::new(vec![0.0f64; 3]),
            Err(Error::Degenerate(_))
        ));
        let u = UnitVector::new(vec![3.0f64, 4.0]).unwrap();
        assert!((norm(u.as_slice()) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn log_map_special_cases() {
        let e1 = UnitVector::<f64>::basis(3, 0);
        let e2 = UnitVector::<f64>::basis(3, 1);
        let zero = log_map(&e1, &e1).unwrap();
        assert!(zero.direction().iter().all(|&v| v == 0.0));
        let u = log_map(&e1, &e2).unwrap();
        assert!((u.direction()[1] - FRAC_PI_2).abs() < 1e-15);
        assert_eq!(u.direction()[0], 0.0);
        match log_map(&e1, &e1.neg()) {
            Err(Error::Antipodal { angle, .. }) => assert!((angle - PI).abs() < 1e-12),
            other => panic!("expected antipodal error, got {other:?}"),
        }
    }

    #[test]
    fn exp_map_special_cases() {
        let e1 = UnitVector::<f64>::basis(3, 0);
        let e2 = UnitVector::<f64>::basis(3, 1);
        assert_eq!(exp_map(&e1, &TangentVector::zero(&e1)).unwrap(), e1);
        let quarter = TangentVector::new(e1.clone(), vec![0.0, FRAC_PI_2, 0.0]).unwrap();
        let out = exp_map(&e1, &quarter).unwrap();
        assert!(geodesic_distance(&out, &e2) < 1e-12);
        assert!(matches!(
            exp_map(&e2, &quarter),
            Err(Error::BaseMismatch(_))
        ));
    }

    #[test]
    fn taylor_branch_is_continuous() {
        let mu = UnitVector::<f64>::basis(4, 0);
        for theta in [1e-9f64, 1e-6, 9.9e-5, 1.01e-4, 1e-3] {
            let x = UnitVector::new(vec![theta.cos(), theta.sin(), 0.0, 0.0]).unwrap();
            let u = log_map(&mu, &x).unwrap();
            assert!((u.norm() - theta).abs() <= 1e-16 + 1e-12 * theta, "{theta}");
        }
    }

    #[test]
    fn round_trip_random_pairs() {
        let mut rng = SeededRng::new(11);
        for d in [2usize, 4, 32] {
            for _ in 0..200 {
                let mu = random_unit(&mut rng, d);
                let x = random_unit(&mut rng, d);
                let u = log_map(&mu, &x).unwrap();
                assert!(dot(mu.as_slice(), u.direction()).abs() < 1e-10);
                assert!((u.norm() - geodesic_distance(&mu, &x)).abs() < 1e-10);
                let back = exp_map(&mu, &u).unwrap();
                let err = back
                    .as_slice()
                    .iter()
                    .zip(x.as_slice())
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max);
                assert!(err < 1e-9);
            }
        }
    }

    #[test]
    fn approx_mean_cases() {
        let e1 = UnitVector::<f64>::basis(2, 0);
        let e2 = UnitVector::<f64>::basis(2, 1);
        assert_eq!(frechet_mean_approx(&[e1.clone(), e1.clone()]).unwrap(), e1);
        let m = frechet_mean_approx(&[e1.clone(), e2]).unwrap();
        let s = 1.0 / 2f64.sqrt();
        assert!((m.as_slice()[0] - s).abs() < 1e-15 && (m.as_slice()[1] - s).abs() < 1e-15);
        assert!(matches!(
            frechet_mean_approx(&[e1.clone(), e1.neg()]),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn iterative_mean_fixed_point_and_midpoint() {
        let x = UnitVector::new(vec![1.0, 2.0, -0.5]).unwrap();
        let m = frechet_mean_iterative(&[x.clone(), x.clone(), x.clone()], 1e-10, 200).unwrap();
        assert_eq!(m.iterations, 1);
        assert!(geodesic_distance(&m.mean, &x) < 1e-15);

        let mut rng = SeededRng::new(3);
        for _ in 0..50 {
            let a = random_unit(&mut rng, 5);
            let b = random_unit(&mut rng, 5);
            let mid = slerp(&a, &b, 0.5).unwrap();
            let m = frechet_mean_iterative(&[a, b], 1e-12, 200).unwrap();
            // arccos cannot resolve sub-1e-8 angles; compare chords instead.
            let chord = norm(&sub(m.mean.as_slice(), mid.as_slice()));
            assert!(chord < 1e-10, "{chord}");
        }
    }

    #[test]
    fn balanced_set_falls_back_to_first_point() {
        let e1 = UnitVector::<f64>::basis(3, 0);
        let e2 = UnitVector::<f64>::basis(3, 1);
        // Four points balanced around the origin in the e1/e2 plane, tilted by e3
        // so that they still sit in an open hemisphere about e3.
        let tilt = |v: &UnitVector<f64>, s: f64| {
            let mut c = scaled(s, v.as_slice());
            c[2] = 1.0;
            UnitVector::new(c).unwrap()
        };
        let pts = vec![tilt(&e1, 0.3), tilt(&e1, -0.3), tilt(&e2, 0.3), tilt(&e2, -0.3)];
        // Not balanced (all share +e3), so the approximation works.
        assert!(frechet_mean_approx(&pts).is_ok());
        let balanced = vec![e1.clone(), e1.neg()];
        assert!(frechet_mean_approx(&balanced).is_err());
        let single_side = vec![tilt(&e1, 1.0), tilt(&e1, -1.0)];
        let m = frechet_mean_iterative(&single_side, 1e-12, 200).unwrap();
        assert!(!m.fell_back);
        assert!(geodesic_distance(&m.mean, &UnitVector::basis(3, 2)) < 1e-12);
    }

    #[test]
    fn f32_geometry() {
        let mu = UnitVector::<f32>::basis(3, 0);
        let x = UnitVector::new(vec![1.0f32, 1.0, 0.0]).unwrap();
        let u = log_map(&mu, &x).unwrap();
        assert!((u.norm() - std::f32::consts::FRAC_PI_4).abs() < 1e-6);
        let back = exp_map(&mu, &u).unwrap();
        assert!(geodesic_distance(&back, &x) < 1e-3);
    }
}
