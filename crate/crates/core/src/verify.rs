//! Independent oracle batteries.
//!
//! Each battery draws random instances from a seeded generator, compares the
//! crate's implementation against a separately written reference and records
//! the worst error seen. The references deliberately avoid the code paths they
//! check: eigenpairs come from Householder tridiagonalisation, Sturm-sequence
//! bisection and inverse iteration rather than Jacobi rotations, and entropic
//! transport costs come from a primal Newton solve in coupling space rather
//! than from Sinkhorn potentials.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::expert::{evaluate_batch, ClassTargets, EncodedSample, LossWeights, TaskExpert};
use crate::linalg::{axpy, dot, norm, Matrix, SeededRng};
use crate::pga::{build_class_anchor, MeanMode};
use crate::routing::{
    cost_matrix, dirac_closed_form, lipschitz_check, sinkhorn, sinkhorn_with_cost, DiscreteMeasure, OtParams,
};
use crate::sphere::{
    exp_map, frechet_mean_approx, frechet_mean_iterative, frechet_objective, log_map, TangentVector, UnitVector,
};

/// Outcome of one battery.
#[derive(Clone, Debug, Serialize)]
pub struct Battery {
    pub name: String,
    pub trials: usize,
    pub passed: usize,
    /// Largest error observed (infinite if a trial errored or produced NaN).
    pub worst: f64,
    pub tolerance: f64,
    /// Instances redrawn because they sat too close to a kink or a
    /// degeneracy; these are not counted as trials.
    pub redrawn: usize,
}

impl Battery {
    pub fn new(name: impl Into<String>, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            trials: 0,
            passed: 0,
            worst: 0.0,
            tolerance,
            redrawn: 0,
        }
    }

    pub fn record(&mut self, err: f64) {
        let err = if err.is_nan() { f64::INFINITY } else { err };
        self.trials += 1;
        if err <= self.tolerance {
            self.passed += 1;
        }
        self.worst = self.worst.max(err);
    }

    pub fn ok(&self) -> bool {
        self.trials > 0 && self.passed == self.trials
    }
}

/// Instance counts for [`run_all`].
#[derive(Clone, Copy, Debug)]
pub struct Plan {
    pub geometry_pairs: usize,
    pub mean_clusters: usize,
    pub perturbations: usize,
    pub eig_classes: usize,
    pub dirac_instances: usize,
    pub coupling_instances: usize,
    pub gradient_instances: usize,
    pub lipschitz_measures: usize,
    pub lipschitz_trials: usize,
}

impl Plan {
    /// The sizes used by the acceptance suite.
    pub fn full() -> Self {
        Self {
            geometry_pairs: 1000,
            mean_clusters: 200,
            perturbations: 1000,
            eig_classes: 100,
            dirac_instances: 1000,
            coupling_instances: 100,
            gradient_instances: 50,
            lipschitz_measures: 100,
            lipschitz_trials: 100,
        }
    }

    pub fn quick() -> Self {
        Self {
            geometry_pairs: 100,
            mean_clusters: 5,
            perturbations: 100,
            eig_classes: 10,
            dirac_instances: 100,
            coupling_instances: 10,
            gradient_instances: 5,
            lipschitz_measures: 10,
            lipschitz_trials: 20,
        }
    }
}

pub fn run_all(plan: &Plan, seed: u64) -> Result<Vec<Battery>> {
    let rng = SeededRng::new(seed);
    let mut out = geometry_battery(plan.geometry_pairs, &mut rng.fork(1))?;
    out.push(frechet_approx_battery(plan.mean_clusters, &mut rng.fork(2))?);
    out.push(frechet_perturbation_battery(
        plan.mean_clusters,
        plan.perturbations,
        &mut rng.fork(3),
    )?);
    out.extend(eig_battery(plan.eig_classes, &mut rng.fork(4))?);
    out.extend(dirac_battery(plan.dirac_instances, &mut rng.fork(5))?);
    out.push(coupling_battery(plan.coupling_instances, &mut rng.fork(6))?);
    out.extend(gradient_battery(plan.gradient_instances, &mut rng.fork(7))?);
    out.push(lipschitz_battery(
        plan.lipschitz_measures,
        plan.lipschitz_trials,
        &mut rng.fork(8),
    )?);
    Ok(out)
}

fn random_unit(d: usize, rng: &mut SeededRng) -> Result<UnitVector<f64>> {
    UnitVector::new(rng.gaussian_vec(d)?)
}

fn chord(a: &UnitVector<f64>, b: &UnitVector<f64>) -> f64 {
    a.as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Random `d × k` matrix with orthonormal columns (Gram-Schmidt, two passes).
pub fn random_orthonormal(d: usize, k: usize, rng: &mut SeededRng) -> Result<Matrix<f64>> {
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(k);
    while cols.len() < k {
        let mut v: Vec<f64> = rng.gaussian_vec(d)?;
        for _ in 0..2 {
            for c in &cols {
                let p = dot(c, &v);
                axpy(-p, c, &mut v);
            }
        }
        let n = norm(&v);
        if n > 1e-8 {
            cols.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    Matrix::from_columns(&cols)
}

/// Points scattered around a random centre with anisotropic tangent spread of
/// total standard deviation at most `spread` radians.
fn cluster(d: usize, n: usize, spread: f64, rng: &mut SeededRng) -> Result<(UnitVector<f64>, Vec<UnitVector<f64>>)> {
    let centre = random_unit(d, rng)?;
    let per_axis = spread / ((d - 1) as f64).sqrt();
    let scales: Vec<f64> = (0..d).map(|_| per_axis * rng.uniform_range(0.2, 1.0)).collect();
    let mut points = Vec::with_capacity(n);
    for _ in 0..n {
        let raw: Vec<f64> = rng
            .gaussian_vec::<f64>(d)?
            .iter()
            .zip(&scales)
            .map(|(g, s)| g * s)
            .collect();
        let u = TangentVector::project(&centre, &raw)?;
        if u.norm() < 1.0 {
            points.push(exp_map(&centre, &u)?);
        }
    }
    Ok((centre, points))
}

/// Log/exp round trip, tangency of `log_μ x` and `‖log_μ x‖ = d(μ, x)` over
/// random pairs in dimensions 4 and 32.
pub fn geometry_battery(pairs: usize, rng: &mut SeededRng) -> Result<Vec<Battery>> {
    let mut round_trip = Battery::new("log_exp_round_trip", 1e-9);
    let mut tangency = Battery::new("log_tangency", 1e-10);
    let mut norms = Battery::new("norm_preservation", 1e-10);
    for i in 0..pairs {
        let d = if i % 2 == 0 { 4 } else { 32 };
        let mu = random_unit(d, rng)?;
        let x = random_unit(d, rng)?;
        let u = match log_map(&mu, &x) {
            Ok(u) => u,
            Err(Error::Antipodal { .. }) => {
                round_trip.redrawn += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        let back = exp_map(&mu, &u)?;
        round_trip.record(chord(&back, &x));
        tangency.record(dot(mu.as_slice(), u.direction()).abs());
        // Angle from the exact `atan2` form, independent of the log map code.
        let c = dot(mu.as_slice(), x.as_slice());
        let mut perp = x.as_slice().to_vec();
        axpy(-c, mu.as_slice(), &mut perp);
        let angle = norm(&perp).atan2(c);
        norms.record((u.norm() - angle).abs() + (norm(back.as_slice()) - 1.0).abs());
    }
    Ok(vec![round_trip, tangency, norms])
}

/// Largest pairwise geodesic distance.
pub fn diameter(points: &[UnitVector<f64>]) -> f64 {
    let mut m: f64 = 0.0;
    for (i, a) in points.iter().enumerate() {
        for b in &points[..i] {
            m = m.max(crate::sphere::geodesic_distance(a, b));
        }
    }
    m
}

/// Normalised arithmetic mean against the exact Fréchet mean on clusters whose
/// diameter is below 0.5 rad. Clusters drawn wider than that are redrawn.
pub fn frechet_approx_battery(clusters: usize, rng: &mut SeededRng) -> Result<Battery> {
    let mut b = Battery::new("frechet_approx_vs_iterative", 1e-3);
    let mut i = 0usize;
    while b.trials < clusters {
        i += 1;
        let d = if i % 2 == 0 { 4 } else { 32 };
        let n = 10 + rng.below(40);
        let (_, points) = cluster(d, n, rng.uniform_range(0.01, 0.3), rng)?;
        if diameter(&points) >= 0.5 {
            b.redrawn += 1;
            continue;
        }
        let approx = frechet_mean_approx(&points)?;
        let exact = frechet_mean_iterative(&points, 1e-13, 1000)?.mean;
        b.record(chord(&approx, &exact));
    }
    Ok(b)
}

/// The exact Fréchet mean must not lose to any random nearby point in the
/// sum-of-squared-geodesics objective. The error is the relative amount by
/// which the best perturbation beats the mean (zero when none does).
pub fn frechet_perturbation_battery(clusters: usize, perturbations: usize, rng: &mut SeededRng) -> Result<Battery> {
    let mut b = Battery::new("frechet_mean_beats_perturbations", 1e-12);
    for i in 0..clusters {
        let d = if i % 2 == 0 { 4 } else { 32 };
        let (_, points) = cluster(d, 10 + rng.below(40), rng.uniform_range(0.05, 0.5), rng)?;
        let mean = frechet_mean_iterative(&points, 1e-13, 1000)?.mean;
        let f0 = frechet_objective(&mean, &points);
        let mut worst: f64 = 0.0;
        for _ in 0..perturbations {
            let step = 10f64.powf(rng.uniform_range(-4.0, -1.0));
            let raw: Vec<f64> = rng.gaussian_vec(d)?;
            let dir = TangentVector::project(&mean, &raw)?;
            let dir = dir.scaled(step / dir.norm());
            let p = exp_map(&mean, &dir)?;
            worst = worst.max((f0 - frechet_objective(&p, &points)) / f0);
        }
        b.record(worst);
    }
    Ok(b)
}

// ---------------------------------------------------------------------------
// Eigen oracle

/// Householder reduction of a symmetric matrix to tridiagonal form; returns
/// the diagonal and the sub-diagonal.
pub fn householder_tridiagonal(a: &Matrix<f64>) -> (Vec<f64>, Vec<f64>) {
    let n = a.rows();
    let mut m: Vec<Vec<f64>> = (0..n).map(|i| a.row(i).to_vec()).collect();
    for k in 0..n.saturating_sub(2) {
        let x: Vec<f64> = (k + 1..n).map(|i| m[i][k]).collect();
        let xn = norm(&x);
        if xn == 0.0 {
            continue;
        }
        let alpha = if x[0] > 0.0 { -xn } else { xn };
        let mut v = x;
        v[0] -= alpha;
        let vn = norm(&v);
        if vn == 0.0 {
            continue;
        }
        for e in &mut v {
            *e /= vn;
        }
        let s = k + 1;
        let len = n - s;
        // A ← A − 2(v qᵀ + q vᵀ) with p = A v, q = p − (vᵀp) v.
        let p: Vec<f64> = (0..len).map(|i| (0..len).map(|j| m[s + i][s + j] * v[j]).sum()).collect();
        let kk = dot(&v, &p);
        let q: Vec<f64> = p.iter().zip(&v).map(|(pi, vi)| pi - kk * vi).collect();
        for i in 0..len {
            for j in 0..len {
                m[s + i][s + j] -= 2.0 * (v[i] * q[j] + q[i] * v[j]);
            }
        }
        m[s][k] = alpha;
        m[k][s] = alpha;
        for i in s + 1..n {
            m[i][k] = 0.0;
            m[k][i] = 0.0;
        }
    }
    let diag = (0..n).map(|i| m[i][i]).collect();
    let off = (0..n.saturating_sub(1)).map(|i| m[i + 1][i]).collect();
    (diag, off)
}

/// Number of eigenvalues of the tridiagonal matrix strictly below `x`.
fn sturm_count(diag: &[f64], off: &[f64], x: f64) -> usize {
    let mut count = 0;
    let mut q = 1.0;
    for i in 0..diag.len() {
        let b2 = if i == 0 { 0.0 } else { off[i - 1] * off[i - 1] };
        let prev = if q == 0.0 { f64::MIN_POSITIVE } else { q };
        q = diag[i] - x - if i == 0 { 0.0 } else { b2 / prev };
        if q < 0.0 {
            count += 1;
        }
    }
    count
}

/// All eigenvalues of a symmetric tridiagonal matrix, descending, by
/// bisection on the Sturm count.
pub fn sturm_eigenvalues(diag: &[f64], off: &[f64]) -> Vec<f64> {
    let n = diag.len();
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for i in 0..n {
        let r = if i > 0 { off[i - 1].abs() } else { 0.0 } + if i + 1 < n { off[i].abs() } else { 0.0 };
        lo = lo.min(diag[i] - r);
        hi = hi.max(diag[i] + r);
    }
    let pad = 1e-12 * (hi - lo).abs().max(1.0);
    (0..n)
        .rev()
        .map(|idx| {
            let (mut a, mut b) = (lo - pad, hi + pad);
            for _ in 0..200 {
                let mid = 0.5 * (a + b);
                if mid <= a || mid >= b {
                    break;
                }
                if sturm_count(diag, off, mid) > idx {
                    b = mid;
                } else {
                    a = mid;
                }
            }
            0.5 * (a + b)
        })
        .collect()
}

/// Solves `m x = rhs` by Gaussian elimination with partial pivoting; exact
/// zero pivots are replaced by `floor`.
fn solve_dense(mut m: Vec<Vec<f64>>, mut rhs: Vec<f64>, floor: f64) -> Vec<f64> {
    let n = rhs.len();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs()))
            .expect("non-empty");
        m.swap(col, piv);
        rhs.swap(col, piv);
        if m[col][col].abs() < floor {
            m[col][col] = if m[col][col] < 0.0 { -floor } else { floor };
        }
        for r in col + 1..n {
            let f = m[r][col] / m[col][col];
            if f != 0.0 {
                for c in col..n {
                    m[r][c] -= f * m[col][c];
                }
                rhs[r] -= f * rhs[col];
            }
        }
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|j| m[i][j] * x[j]).sum();
        x[i] = (rhs[i] - s) / m[i][i];
    }
    x
}

/// Top-`k` eigenpairs of a symmetric matrix: Sturm bisection for the values,
/// inverse iteration on the original matrix for the vectors, which are then
/// orthonormalised in order.
pub fn oracle_eig(a: &Matrix<f64>, k: usize, rng: &mut SeededRng) -> Result<(Vec<f64>, Matrix<f64>)> {
    let n = a.rows();
    let (diag, off) = householder_tridiagonal(a);
    let values = sturm_eigenvalues(&diag, &off);
    let scale = a.frobenius_norm().max(f64::MIN_POSITIVE);
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(k);
    for &lambda in &values[..k] {
        let shifted: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let mut r = a.row(i).to_vec();
                r[i] -= lambda;
                r
            })
            .collect();
        let mut x: Vec<f64> = rng.gaussian_vec(n)?;
        for _ in 0..4 {
            x = solve_dense(shifted.clone(), x, 1e-14 * scale);
            let xn = norm(&x);
            x.iter_mut().for_each(|e| *e /= xn);
        }
        for _ in 0..2 {
            for c in &cols {
                let p = dot(c, &x);
                axpy(-p, c, &mut x);
            }
        }
        let xn = norm(&x);
        cols.push(x.into_iter().map(|e| e / xn).collect());
    }
    Ok((values[..k].to_vec(), Matrix::from_columns(&cols)?))
}

/// `‖(I − QQᵀ) V‖_F` for orthonormal `Q`: an upper bound on the sine of the
/// largest principal angle between the column spans.
pub fn subspace_residual(q: &Matrix<f64>, v: &Matrix<f64>) -> Result<f64> {
    let coeff = q.transpose().matmul(v)?;
    let proj = q.matmul(&coeff)?;
    Ok(v.sub(&proj)?.frobenius_norm())
}

fn tangent_covariance_reference(mu: &UnitVector<f64>, points: &[UnitVector<f64>]) -> Matrix<f64> {
    let d = mu.dim();
    let mut c = Matrix::zeros(d, d);
    for x in points {
        let cos = dot(mu.as_slice(), x.as_slice()).clamp(-1.0, 1.0);
        let theta = cos.acos();
        let perp: Vec<f64> = x.as_slice().iter().zip(mu.as_slice()).map(|(xi, mi)| xi - cos * mi).collect();
        let s = norm(&perp);
        let u: Vec<f64> = if s == 0.0 {
            vec![0.0; d]
        } else {
            perp.iter().map(|p| p * theta / s).collect()
        };
        for i in 0..d {
            for j in 0..d {
                c[(i, j)] += u[i] * u[j] / points.len() as f64;
            }
        }
    }
    c
}

/// PGA anchors against the eigen oracle: covariance entries, top-`K`
/// eigenvalues (relative), principal subspace and rotation equivariance.
pub fn eig_battery(classes: usize, rng: &mut SeededRng) -> Result<Vec<Battery>> {
    let mut cov = Battery::new("tangent_covariance", 1e-10);
    let mut vals = Battery::new("pga_eigenvalues", 1e-8);
    let mut span = Battery::new("pga_subspace", 1e-6);
    let mut equi = Battery::new("pga_rotation_equivariance", 1e-8);
    let mut oracle_rng = rng.fork(0x6f72);
    for _ in 0..classes {
        let d = 4 + rng.below(61);
        let k = 1 + rng.below(8.min(d - 1));
        let n = k + 2 + rng.below(40);
        let (_, points) = cluster(d, n, rng.uniform_range(0.05, 0.3), rng)?;
        if points.len() < k + 2 {
            vals.redrawn += 1;
            continue;
        }
        let anchor = build_class_anchor(&points, &points, 0, k, MeanMode::Iterative)?;
        let mu = &anchor.mu_vis;
        let c_ref = tangent_covariance_reference(mu, &points);
        let c = crate::pga::tangent_covariance(mu, &points)?;
        let scale = c_ref.frobenius_norm();
        cov.record(c.sub(&c_ref)?.max_abs() / scale);

        let (ref_vals, ref_vecs) = oracle_eig(&c_ref, k, &mut oracle_rng)?;
        let floor = 1e-6 * ref_vals[0];
        let val_err = anchor
            .eigvals_vis
            .iter()
            .zip(&ref_vals)
            .map(|(a, b)| (a - b).abs() / b.abs().max(floor))
            .fold(0.0, f64::max);
        vals.record(val_err);
        span.record(subspace_residual(&ref_vecs, &anchor.basis_vis)?);

        let q = random_orthonormal(d, d, rng)?;
        let rotated: Vec<UnitVector<f64>> = points
            .iter()
            .map(|p| UnitVector::new(q.matvec(p.as_slice())?))
            .collect::<Result<_>>()?;
        let rot = build_class_anchor(&rotated, &rotated, 0, k, MeanMode::Iterative)?;
        let qmu = UnitVector::new(q.matvec(mu.as_slice())?)?;
        let qv = q.matmul(&anchor.basis_vis)?;
        let val_drift = anchor
            .eigvals_vis
            .iter()
            .zip(&rot.eigvals_vis)
            .map(|(a, b)| (a - b).abs() / a.abs().max(floor))
            .fold(0.0, f64::max);
        equi.record(chord(&qmu, &rot.mu_vis).max(val_drift).max(subspace_residual(&qv, &rot.basis_vis)?));
    }
    Ok(vec![cov, vals, span, equi])
}

// ---------------------------------------------------------------------------
// Transport

fn random_weights(n: usize, rng: &mut SeededRng) -> Vec<f64> {
    let w: Vec<f64> = (0..n).map(|_| rng.gaussian().exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|x| x / s).collect()
}

fn random_measure(n: usize, d: usize, rng: &mut SeededRng) -> Result<DiscreteMeasure<f64>> {
    let atoms = (0..n).map(|_| random_unit(d, rng)).collect::<Result<Vec<_>>>()?;
    DiscreteMeasure::new(atoms, random_weights(n, rng))
}

/// Dirac-source Sinkhorn against the forced-plan closed form, and marginal
/// feasibility of general (multi-atom source) solves.
pub fn dirac_battery(instances: usize, rng: &mut SeededRng) -> Result<Vec<Battery>> {
    let mut closed = Battery::new("dirac_closed_form", 1e-8);
    // L1 violation of the worse marginal.
    let mut feasible = Battery::new("sinkhorn_marginals", 1e-9);
    for _ in 0..instances {
        let d = 2 + rng.below(31);
        let target = random_measure(1 + rng.below(24), d, rng)?;
        let params = OtParams {
            epsilon: 10f64.powf(rng.uniform_range(-2.0, 0.0)),
            ..OtParams::default()
        };
        let z = random_unit(d, rng)?;
        let sol = sinkhorn(&DiscreteMeasure::dirac(z.clone()), &target, &params)?;
        closed.record((sol.cost - dirac_closed_form(&z, &target, params.epsilon)).abs());

        let source = random_measure(2 + rng.below(6), d, rng)?;
        let general = OtParams {
            epsilon: rng.uniform_range(0.05, 1.0),
            max_iter: 10_000,
            ..OtParams::default()
        };
        match sinkhorn(&source, &target, &general) {
            Ok(sol) => {
                let rows = sol.plan.row_sums();
                let cols = sol.plan.col_sums();
                let row_err: f64 = rows.iter().zip(source.weights()).map(|(r, a)| (r - a).abs()).sum();
                let col_err: f64 = cols.iter().zip(target.weights()).map(|(c, b)| (c - b).abs()).sum();
                feasible.record(row_err.max(col_err));
            }
            Err(Error::Convergence { .. }) => feasible.redrawn += 1,
            Err(e) => return Err(e),
        }
    }
    Ok(vec![closed, feasible])
}

/// Minimum of `⟨π, C⟩ + ε Σ π log π` over couplings of `a` and `b`, by damped
/// Newton in the `(m−1)(n−1)` free coordinates of the coupling polytope,
/// started from the product coupling.
pub fn coupling_oracle(a: &[f64], b: &[f64], cost: &Matrix<f64>, eps: f64) -> f64 {
    let (m, n) = (a.len(), b.len());
    let free: Vec<(usize, usize)> = (0..m - 1).flat_map(|i| (0..n - 1).map(move |j| (i, j))).collect();
    let p = free.len();
    let objective = |pi: &[Vec<f64>]| -> f64 {
        let mut f = 0.0;
        for i in 0..m {
            for j in 0..n {
                if pi[i][j] <= 0.0 {
                    return f64::INFINITY;
                }
                f += pi[i][j] * cost[(i, j)] + eps * pi[i][j] * pi[i][j].ln();
            }
        }
        f
    };
    // Each free coordinate moves (i,j) and (m−1,n−1) up, (i,n−1) and (m−1,j) down.
    let stencil = |i: usize, j: usize| [(i, j, 1.0), (i, n - 1, -1.0), (m - 1, j, -1.0), (m - 1, n - 1, 1.0)];
    let mut pi: Vec<Vec<f64>> = (0..m).map(|i| (0..n).map(|j| a[i] * b[j]).collect()).collect();
    let mut f = objective(&pi);
    for _ in 0..200 {
        let grad_pi = |i: usize, j: usize| cost[(i, j)] + eps * (pi[i][j].ln() + 1.0);
        let g: Vec<f64> = free
            .iter()
            .map(|&(i, j)| stencil(i, j).iter().map(|&(r, c, s)| s * grad_pi(r, c)).sum())
            .collect();
        if norm(&g) < 1e-15 {
            break;
        }
        let mut h = vec![vec![0.0; p]; p];
        for (x, &(i1, j1)) in free.iter().enumerate() {
            for (y, &(i2, j2)) in free.iter().enumerate() {
                let mut acc = 0.0;
                for &(r1, c1, s1) in &stencil(i1, j1) {
                    for &(r2, c2, s2) in &stencil(i2, j2) {
                        if r1 == r2 && c1 == c2 {
                            acc += s1 * s2 * eps / pi[r1][c1];
                        }
                    }
                }
                h[x][y] = acc;
            }
        }
        let step = solve_dense(h, g.iter().map(|v| -v).collect(), 1e-300);
        let mut t = 1.0;
        let mut improved = false;
        for _ in 0..60 {
            let mut trial = pi.clone();
            for (&(i, j), &s) in free.iter().zip(&step) {
                for &(r, c, sign) in &stencil(i, j) {
                    trial[r][c] += t * sign * s;
                }
            }
            let ft = objective(&trial);
            if ft <= f {
                improved = ft < f;
                pi = trial;
                f = ft;
                break;
            }
            t *= 0.5;
        }
        if !improved {
            break;
        }
    }
    f
}

/// 4×4 Sinkhorn solves against [`coupling_oracle`].
pub fn coupling_battery(instances: usize, rng: &mut SeededRng) -> Result<Battery> {
    let mut b = Battery::new("sinkhorn_vs_coupling_newton", 1e-6);
    for _ in 0..instances {
        let d = 2 + rng.below(7);
        let source = random_measure(4, d, rng)?;
        let target = random_measure(4, d, rng)?;
        let params = OtParams {
            epsilon: rng.uniform_range(0.05, 1.0),
            max_iter: 100_000,
            marginal_tol: 1e-12,
            ..OtParams::default()
        };
        let cost = cost_matrix(&source, &target)?;
        let sol = sinkhorn_with_cost(source.weights(), target.weights(), &cost, &params)?;
        let reference = coupling_oracle(source.weights(), target.weights(), &cost, params.epsilon);
        b.record((sol.cost - reference).abs());
    }
    Ok(b)
}

/// Empirical Lipschitz ratio of the Dirac-source routing score over random
/// task measures in `d = 32`; the bound is 1.
pub fn lipschitz_battery(measures: usize, trials_per_measure: usize, rng: &mut SeededRng) -> Result<Battery> {
    let mut b = Battery::new("routing_lipschitz", 1.0 + 1e-6);
    for _ in 0..measures {
        let measure = random_measure(1 + rng.below(40), 32, rng)?;
        let params = OtParams {
            epsilon: 10f64.powf(rng.uniform_range(-2.0, 0.0)),
            ..OtParams::default()
        };
        let ratio = lipschitz_check(&measure, trials_per_measure, &[1e-3, 1e-2], &params, rng)?;
        // One record per measure; each covers `trials_per_measure` draws.
        b.record(ratio);
    }
    Ok(b)
}

// ---------------------------------------------------------------------------
// Gradients

/// Which loss term a gradient check targets.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossTerm {
    Intervention,
    Compression,
    Contrastive,
}

impl LossTerm {
    pub const ALL: [LossTerm; 3] = [LossTerm::Intervention, LossTerm::Compression, LossTerm::Contrastive];

    pub fn name(self) -> &'static str {
        match self {
            LossTerm::Intervention => "grad_intervention",
            LossTerm::Compression => "grad_compression",
            LossTerm::Contrastive => "grad_contrastive",
        }
    }
}

/// A small random training problem for gradient checks.
#[derive(Clone, Debug)]
pub struct GradientInstance {
    pub expert: TaskExpert,
    pub batch: Vec<EncodedSample>,
    pub targets: ClassTargets,
    pub weights: LossWeights,
}

impl GradientInstance {
    pub fn random(rng: &mut SeededRng) -> Result<Self> {
        let d = 3 + rng.below(6);
        let k = 1 + rng.below(3.min(d - 1));
        let classes = 2 + rng.below(2);
        let mut expert = TaskExpert::identity(0, d, k);
        for m in [&mut expert.s_vis, &mut expert.r_vis, &mut expert.s_txt, &mut expert.r_txt] {
            for v in m.as_mut_slice() {
                *v += 0.3 * rng.gaussian();
            }
        }
        let vis_bases = (0..classes).map(|_| random_orthonormal(d, k, rng)).collect::<Result<_>>()?;
        let txt_bases = (0..classes).map(|_| random_orthonormal(d, k, rng)).collect::<Result<_>>()?;
        let text_dirs = (0..classes)
            .map(|_| random_unit(d, rng).map(UnitVector::into_vec))
            .collect::<Result<_>>()?;
        let views = 2 + rng.below(2);
        let mut batch = Vec::new();
        for i in 0..3 + rng.below(3) {
            let z_vis = random_unit(d, rng)?.into_vec();
            let z_txt = random_unit(d, rng)?.into_vec();
            let jitter = |z: &[f64], s: f64, rng: &mut SeededRng| -> Vec<f64> {
                z.iter().map(|v| v + s * rng.gaussian()).collect()
            };
            batch.push(EncodedSample {
                class_index: i % classes,
                occluded_vis: jitter(&z_vis, 0.3, rng),
                occluded_txt: jitter(&z_txt, 0.3, rng),
                views_vis: (0..views).map(|_| jitter(&z_vis, 0.2, rng)).collect(),
                views_txt: (0..views).map(|_| jitter(&z_txt, 0.2, rng)).collect(),
                z_vis,
                z_txt,
            });
        }
        Ok(Self {
            expert,
            batch,
            targets: ClassTargets {
                vis_bases,
                txt_bases,
                text_dirs,
            },
            weights: LossWeights {
                lambda_int: 1.0,
                lambda_comp: 1.0,
                tau_cont: rng.uniform_range(0.05, 1.0),
            },
        })
    }

    /// Smallest distance of any hinge or absolute-value argument from its
    /// kink; finite differences are only meaningful when this is not tiny.
    pub fn kink_margin(&self) -> Result<f64> {
        let e = &self.expert;
        let mut margin = f64::INFINITY;
        for item in &self.batch {
            let clean = crate::expert::evidence_score(e, &item.z_vis, &item.z_txt)?;
            let occl = crate::expert::evidence_score(e, &item.occluded_vis, &item.occluded_txt)?;
            for (c, o) in clean.iter().zip(&occl) {
                margin = margin.min((o - c).abs());
            }
            for (s, views) in [(&e.s_vis, &item.views_vis), (&e.s_txt, &item.views_txt)] {
                let scores: Vec<Vec<f64>> = views.iter().map(|v| s.matvec(v)).collect::<Result<_>>()?;
                for j in 0..e.k() {
                    let mean = scores.iter().map(|v| v[j]).sum::<f64>() / scores.len() as f64;
                    for v in &scores {
                        margin = margin.min((v[j] - mean).abs());
                    }
                }
            }
        }
        Ok(margin)
    }

    pub fn loss(&self, expert: &TaskExpert, term: LossTerm) -> Result<f64> {
        let l = evaluate_batch(expert, &self.batch, &self.targets, &self.weights)?.losses;
        Ok(match term {
            LossTerm::Intervention => l.intervention,
            LossTerm::Compression => l.compression,
            LossTerm::Contrastive => l.contrastive,
        })
    }

    /// Relative max-norm error between the analytic gradient of `term` and
    /// central differences with step `h`.
    pub fn gradient_error(&self, term: LossTerm, h: f64) -> Result<f64> {
        let eval = evaluate_batch(&self.expert, &self.batch, &self.targets, &self.weights)?;
        let analytic = match term {
            LossTerm::Intervention => eval.grad_intervention,
            LossTerm::Compression => eval.grad_compression,
            LossTerm::Contrastive => eval.grad_contrastive,
        };
        let mut diff: f64 = 0.0;
        let mut scale: f64 = 0.0;
        for (block, (_, g)) in analytic.blocks().iter().enumerate() {
            for idx in 0..g.as_slice().len() {
                let mut plus = self.expert.clone();
                let mut minus = self.expert.clone();
                block_mut(&mut plus, block).as_mut_slice()[idx] += h;
                block_mut(&mut minus, block).as_mut_slice()[idx] -= h;
                let fd = (self.loss(&plus, term)? - self.loss(&minus, term)?) / (2.0 * h);
                let an = g.as_slice()[idx];
                diff = diff.max((an - fd).abs());
                scale = scale.max(an.abs()).max(fd.abs());
            }
        }
        Ok(if diff == 0.0 { 0.0 } else { diff / scale.max(1e-12) })
    }
}

fn block_mut(e: &mut TaskExpert, i: usize) -> &mut Matrix<f64> {
    match i {
        0 => &mut e.s_vis,
        1 => &mut e.r_vis,
        2 => &mut e.s_txt,
        _ => &mut e.r_txt,
    }
}

/// Central-difference checks (h = 1e-5) of every loss term's gradient.
/// Instances with a hinge or absolute value within 1e-3 of its kink are
/// redrawn.
pub fn gradient_battery(instances: usize, rng: &mut SeededRng) -> Result<Vec<Battery>> {
    let mut out = Vec::new();
    for term in LossTerm::ALL {
        let mut b = Battery::new(term.name(), 1e-4);
        while b.trials < instances {
            let inst = GradientInstance::random(rng)?;
            if term != LossTerm::Contrastive && inst.kink_margin()? < 1e-3 {
                b.redrawn += 1;
                continue;
            }
            b.record(inst.gradient_error(term, 1e-5)?);
        }
        out.push(b);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tridiagonal_preserves_spectrum_of_known_matrix() {
        // Eigenvalues 1, 2, 4 on the diagonal, rotated by a fixed orthogonal matrix.
        let q = random_orthonormal(3, 3, &mut SeededRng::new(5)).unwrap();
        let a = q.matmul(&Matrix::diag(&[4.0, 1.0, 2.0])).unwrap().matmul(&q.transpose()).unwrap();
        let (d, e) = householder_tridiagonal(&a);
        let vals = sturm_eigenvalues(&d, &e);
        for (v, want) in vals.iter().zip([4.0, 2.0, 1.0]) {
            assert!((v - want).abs() < 1e-12, "{vals:?}");
        }
        let (_, vecs) = oracle_eig(&a, 1, &mut SeededRng::new(6)).unwrap();
        let top = Matrix::from_columns(&[q.column(0)]).unwrap();
        assert!(subspace_residual(&top, &vecs).unwrap() < 1e-10);
    }

    #[test]
    fn coupling_oracle_matches_independent_rows() {
        // With a product-separable cost the optimal plan is a bᵀ-shaped Gibbs
        // kernel; check against a rank-one case where C = 0: plan = a bᵀ.
        let a = [0.2f64, 0.3, 0.1, 0.4];
        let b = [0.25, 0.25, 0.25, 0.25];
        let cost = Matrix::zeros(4, 4);
        let eps = 0.3;
        let want: f64 = a
            .iter()
            .flat_map(|x| b.iter().map(move |y| x * y))
            .map(|p| eps * p * p.ln())
            .sum();
        assert!((coupling_oracle(&a, &b, &cost, eps) - want).abs() < 1e-14);
    }

    #[test]
    fn quick_plan_passes() {
        for b in run_all(&Plan::quick(), 11).unwrap() {
            assert!(b.ok(), "{b:?}");
        }
    }
}
