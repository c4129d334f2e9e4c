//! Per-class attribute anchors.
//!
//! A class anchor is the Fréchet mean of the class's embeddings plus the
//! leading eigenvectors of their tangent-space covariance (principal geodesic
//! analysis), for the visual and the textual modality. The Euclidean PCA
//! variant is kept as a baseline.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::hash::Fnv1a;
use crate::linalg::{axpy, dot, sym_eig, Matrix};
use crate::scalar::Scalar;
use crate::sphere::{
    frechet_mean_approx, frechet_mean_iterative, log_map, UnitVector, DEFAULT_MEAN_MAX_ITER,
    DEFAULT_MEAN_TOL,
};
use crate::{ClassId, TaskId};

pub const DEFAULT_K: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AnchorMethod {
    Pga,
    Pca,
}

/// How the class prototype is located.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum MeanMode {
    /// Normalised arithmetic mean.
    #[default]
    Approx,
    /// Exact Fréchet mean (falls back to the first sample as initialiser when
    /// the arithmetic mean vanishes).
    Iterative,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassAnchor<T> {
    pub class_id: ClassId,
    pub mu_vis: UnitVector<T>,
    /// `d × K`, orthonormal columns.
    pub basis_vis: Matrix<T>,
    pub eigvals_vis: Vec<T>,
    pub mu_txt: UnitVector<T>,
    pub basis_txt: Matrix<T>,
    pub eigvals_txt: Vec<T>,
    pub method: AnchorMethod,
}

impl<T: Scalar> ClassAnchor<T> {
    pub fn k(&self) -> usize {
        self.basis_vis.cols()
    }

    pub fn dim(&self) -> usize {
        self.mu_vis.dim()
    }

    /// Feeds the canonical byte layout into `h`: little-endian `f64` of
    /// `μ_vis, V_vis, λ_vis, μ_txt, V_txt, λ_txt`, matrices row-major.
    pub fn hash_into(&self, h: &mut Fnv1a) {
        let f = |x: &T| x.to_f64_lossy();
        h.write_f64s(self.mu_vis.as_slice().iter().map(f));
        h.write_f64s(self.basis_vis.as_slice().iter().map(f));
        h.write_f64s(self.eigvals_vis.iter().map(f));
        h.write_f64s(self.mu_txt.as_slice().iter().map(f));
        h.write_f64s(self.basis_txt.as_slice().iter().map(f));
        h.write_f64s(self.eigvals_txt.iter().map(f));
    }

    pub fn digest(&self) -> u64 {
        let mut h = Fnv1a::new();
        self.hash_into(&mut h);
        h.finish()
    }
}

/// `C = (1/n) Σ u_i u_iᵀ` with `u_i = log_μ(x_i)`.
pub fn tangent_covariance<T: Scalar>(mu: &UnitVector<T>, points: &[UnitVector<T>]) -> Result<Matrix<T>> {
    if points.is_empty() {
        return Err(Error::InsufficientData("tangent covariance of no points".into()));
    }
    let d = mu.dim();
    let mut c = Matrix::zeros(d, d);
    for (i, x) in points.iter().enumerate() {
        let u = log_map(mu, x).map_err(|e| match e {
            Error::Antipodal { angle, .. } => Error::Antipodal {
                angle,
                index: Some(i),
            },
            e => e,
        })?;
        c.add_outer(T::one(), u.direction(), u.direction());
    }
    c.scale(T::one() / T::from_usize_lossy(points.len()));
    symmetrize(&mut c);
    Ok(c)
}

fn symmetrize<T: Scalar>(c: &mut Matrix<T>) {
    let n = c.rows();
    let half = T::lit(0.5);
    for i in 0..n {
        for j in (i + 1)..n {
            let v = (c[(i, j)] + c[(j, i)]) * half;
            c[(i, j)] = v;
            c[(j, i)] = v;
        }
    }
}

/// Top-`k` eigenvectors of a symmetric PSD matrix and their eigenvalues.
///
/// Tiny negative eigenvalues from rounding are clamped to zero.
pub fn principal_basis<T: Scalar>(c: &Matrix<T>, k: usize) -> Result<(Matrix<T>, Vec<T>)> {
    if k > c.rows() {
        return Err(Error::Dimension(format!(
            "K = {k} exceeds the dimension {}",
            c.rows()
        )));
    }
    let eig = sym_eig(c)?;
    let values = eig.values[..k].iter().map(|&v| v.max(T::zero())).collect();
    Ok((eig.vectors.leading_columns(k), values))
}

/// Principal geodesic basis at `mu`.
///
/// `μ` spans the null space of the tangent covariance; it is shifted to a
/// negative eigenvalue before the solve so that zero-variance directions picked
/// to fill a rank-deficient basis are still tangent.
fn tangent_basis<T: Scalar>(mu: &UnitVector<T>, c: &Matrix<T>, k: usize) -> Result<(Matrix<T>, Vec<T>)> {
    let d = mu.dim();
    if k >= d {
        return Err(Error::Dimension(format!(
            "K = {k} must be below the ambient dimension {d} for a tangent basis"
        )));
    }
    let mut shifted = c.clone();
    let shift = -(T::one() + c.trace());
    shifted.add_outer(shift, mu.as_slice(), mu.as_slice());
    let (mut basis, values) = principal_basis(&shifted, k)?;
    // Remove the rounding-level normal component and renormalise.
    for j in 0..k {
        let mut col = basis.column(j);
        let along = dot(mu.as_slice(), &col);
        axpy(-along, mu.as_slice(), &mut col);
        let n = crate::linalg::norm(&col);
        for (i, v) in col.iter().enumerate() {
            basis[(i, j)] = *v / n;
        }
    }
    Ok((basis, values))
}

fn class_mean<T: Scalar>(points: &[UnitVector<T>], mode: MeanMode) -> Result<UnitVector<T>> {
    match mode {
        MeanMode::Approx => match frechet_mean_approx(points) {
            Ok(m) => Ok(m),
            // Balanced set: seed the exact solver from the first sample.
            Err(Error::Degenerate(_)) => Ok(frechet_mean_iterative(
                points,
                T::lit(DEFAULT_MEAN_TOL),
                DEFAULT_MEAN_MAX_ITER,
            )?
            .mean),
            Err(e) => Err(e),
        },
        MeanMode::Iterative => Ok(frechet_mean_iterative(
            points,
            T::lit(DEFAULT_MEAN_TOL),
            DEFAULT_MEAN_MAX_ITER,
        )?
        .mean),
    }
}

fn check_points<T: Scalar>(points: &[UnitVector<T>], what: &str) -> Result<usize> {
    if points.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "{what} anchor needs at least 2 samples, got {}",
            points.len()
        )));
    }
    let d = points[0].dim();
    if points.iter().any(|p| p.dim() != d) {
        return Err(Error::Dimension(format!("{what} samples of mixed dimension")));
    }
    Ok(d)
}

fn pga_modality<T: Scalar>(
    points: &[UnitVector<T>],
    k: usize,
    mode: MeanMode,
) -> Result<(UnitVector<T>, Matrix<T>, Vec<T>)> {
    let mu = class_mean(points, mode)?;
    let c = tangent_covariance(&mu, points)?;
    let (basis, values) = tangent_basis(&mu, &c, k)?;
    Ok((mu, basis, values))
}

/// PGA anchor for one class from its visual and fused-textual embeddings.
pub fn build_class_anchor<T: Scalar>(
    vis_points: &[UnitVector<T>],
    txt_points: &[UnitVector<T>],
    class_id: ClassId,
    k: usize,
    mean_mode: MeanMode,
) -> Result<ClassAnchor<T>> {
    let dv = check_points(vis_points, "visual")?;
    let dt = check_points(txt_points, "textual")?;
    if dv != dt {
        return Err(Error::Dimension(format!(
            "visual dimension {dv} differs from textual dimension {dt}"
        )));
    }
    if k == 0 {
        return Err(Error::Dimension("K must be at least 1".into()));
    }
    let (mu_vis, basis_vis, eigvals_vis) = pga_modality(vis_points, k, mean_mode)?;
    let (mu_txt, basis_txt, eigvals_txt) = pga_modality(txt_points, k, mean_mode)?;
    Ok(ClassAnchor {
        class_id,
        mu_vis,
        basis_vis,
        eigvals_vis,
        mu_txt,
        basis_txt,
        eigvals_txt,
        method: AnchorMethod::Pga,
    })
}

/// Euclidean mean-centred covariance (no log map).
pub fn euclidean_covariance<T: Scalar>(points: &[UnitVector<T>]) -> (Vec<T>, Matrix<T>) {
    let d = points[0].dim();
    let n = T::from_usize_lossy(points.len());
    let mut mean = vec![T::zero(); d];
    for p in points {
        axpy(T::one() / n, p.as_slice(), &mut mean);
    }
    let mut c = Matrix::zeros(d, d);
    for p in points {
        let centred: Vec<T> = p.as_slice().iter().zip(&mean).map(|(&a, &b)| a - b).collect();
        c.add_outer(T::one() / n, &centred, &centred);
    }
    symmetrize(&mut c);
    (mean, c)
}

fn pca_modality<T: Scalar>(
    points: &[UnitVector<T>],
    k: usize,
    mode: MeanMode,
) -> Result<(UnitVector<T>, Matrix<T>, Vec<T>)> {
    let (_, c) = euclidean_covariance(points);
    let mu = class_mean(points, mode)?;
    let (basis, values) = principal_basis(&c, k)?;
    Ok((mu, basis, values))
}

/// Euclidean PCA anchor: the prototype is still the spherical mean, but the
/// basis comes from the ambient covariance and is not constrained to the
/// tangent space.
pub fn build_class_anchor_pca<T: Scalar>(
    vis_points: &[UnitVector<T>],
    txt_points: &[UnitVector<T>],
    class_id: ClassId,
    k: usize,
    mean_mode: MeanMode,
) -> Result<ClassAnchor<T>> {
    let dv = check_points(vis_points, "visual")?;
    let dt = check_points(txt_points, "textual")?;
    if dv != dt {
        return Err(Error::Dimension(format!(
            "visual dimension {dv} differs from textual dimension {dt}"
        )));
    }
    if k == 0 {
        return Err(Error::Dimension("K must be at least 1".into()));
    }
    let (mu_vis, basis_vis, eigvals_vis) = pca_modality(vis_points, k, mean_mode)?;
    let (mu_txt, basis_txt, eigvals_txt) = pca_modality(txt_points, k, mean_mode)?;
    Ok(ClassAnchor {
        class_id,
        mu_vis,
        basis_vis,
        eigvals_vis,
        mu_txt,
        basis_txt,
        eigvals_txt,
        method: AnchorMethod::Pca,
    })
}

/// Anchors for all seen classes, grouped by task, with freeze digests.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AnchorStore<T> {
    anchors: BTreeMap<ClassId, ClassAnchor<T>>,
    task_index: BTreeMap<TaskId, BTreeSet<ClassId>>,
    class_task: BTreeMap<ClassId, TaskId>,
    freeze_digests: BTreeMap<TaskId, u64>,
}

impl<T: Scalar> AnchorStore<T> {
    pub fn new() -> Self {
        Self {
            anchors: BTreeMap::new(),
            task_index: BTreeMap::new(),
            class_task: BTreeMap::new(),
            freeze_digests: BTreeMap::new(),
        }
    }

    /// Registers (or, before freezing, replaces) the anchor of a class of `task`.
    pub fn insert(&mut self, task: TaskId, anchor: ClassAnchor<T>) -> Result<()> {
        let class = anchor.class_id;
        if let Some(&owner) = self.class_task.get(&class) {
            if self.freeze_digests.contains_key(&owner) {
                return Err(Error::Frozen { class, task: owner });
            }
            if owner != task {
                return Err(Error::DuplicateClass { class, task: owner });
            }
        }
        if self.freeze_digests.contains_key(&task) {
            return Err(Error::Frozen { class, task });
        }
        self.class_task.insert(class, task);
        self.task_index.entry(task).or_default().insert(class);
        self.anchors.insert(class, anchor);
        Ok(())
    }

    /// Content digest of a task's anchors in ascending class order.
    pub fn task_digest(&self, task: TaskId) -> Result<u64> {
        let classes = self.task_index.get(&task).ok_or(Error::UnknownTask(task))?;
        let mut h = Fnv1a::new();
        for c in classes {
            self.anchors[c].hash_into(&mut h);
        }
        Ok(h.finish())
    }

    /// Freezes a task; later writes to its classes are rejected.
    /// Re-freezing returns the recorded digest.
    pub fn freeze_task(&mut self, task: TaskId) -> Result<u64> {
        if let Some(&d) = self.freeze_digests.get(&task) {
            return Ok(d);
        }
        let d = self.task_digest(task)?;
        self.freeze_digests.insert(task, d);
        Ok(d)
    }

    pub fn is_frozen(&self, task: TaskId) -> bool {
        self.freeze_digests.contains_key(&task)
    }

    pub fn frozen_digest(&self, task: TaskId) -> Option<u64> {
        self.freeze_digests.get(&task).copied()
    }

    pub fn get(&self, class: ClassId) -> Option<&ClassAnchor<T>> {
        self.anchors.get(&class)
    }

    pub fn task_of(&self, class: ClassId) -> Option<TaskId> {
        self.class_task.get(&class).copied()
    }

    pub fn classes_of(&self, task: TaskId) -> Option<&BTreeSet<ClassId>> {
        self.task_index.get(&task)
    }

    pub fn tasks(&self) -> impl Iterator<Item = TaskId> + '_ {
        self.task_index.keys().copied()
    }

    pub fn anchors(&self) -> impl Iterator<Item = &ClassAnchor<T>> {
        self.anchors.values()
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    /// Copy restricted to the given tasks (digests carried over).
    pub fn restricted_to(&self, tasks: &BTreeSet<TaskId>) -> Self {
        let mut out = Self::new();
        for &t in tasks {
            if let Some(classes) = self.task_index.get(&t) {
                for c in classes {
                    out.class_task.insert(*c, t);
                    out.anchors.insert(*c, self.anchors[c].clone());
                }
                out.task_index.insert(t, classes.clone());
            }
            if let Some(&d) = self.freeze_digests.get(&t) {
                out.freeze_digests.insert(t, d);
            }
        }
        out
    }

    /// Rebuilds a store from persisted parts, verifying every recorded digest.
    pub fn from_parts(
        entries: Vec<(TaskId, ClassAnchor<T>)>,
        frozen: BTreeMap<TaskId, u64>,
    ) -> Result<Self> {
        let mut out = Self::new();
        for (t, a) in entries {
            out.insert(t, a)?;
        }
        for (t, stored) in frozen {
            let computed = out.task_digest(t)?;
            if computed != stored {
                return Err(Error::DigestMismatch { stored, computed });
            }
            out.freeze_digests.insert(t, stored);
        }
        Ok(out)
    }

    pub fn frozen_digests(&self) -> &BTreeMap<TaskId, u64> {
        &self.freeze_digests
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::SeededRng;
    use crate::sphere::{exp_map, TangentVector};
    use std::f64::consts::PI;

    fn cluster(rng: &mut SeededRng, d: usize, n: usize, spread: f64) -> (UnitVector<f64>, Vec<UnitVector<f64>>) {
        let mu = UnitVector::new(rng.gaussian_vec(d).unwrap()).unwrap();
        let pts = (0..n)
            .map(|_| {
                let g: Vec<f64> = rng.gaussian_vec(d).unwrap();
                let t = TangentVector::project(&mu, &g).unwrap().scaled(spread / (d as f64).sqrt());
                exp_map(&mu, &t).unwrap()
            })
            .collect();
        (mu, pts)
    }

    #[test]
    fn covariance_of_mean_only_is_zero() {
        let mu = UnitVector::<f64>::basis(4, 0);
        let c = tangent_covariance(&mu, &[mu.clone()]).unwrap();
        assert_eq!(c.max_abs(), 0.0);
    }

    #[test]
    fn covariance_single_direction() {
        let mu = UnitVector::<f64>::basis(3, 0);
        let a = PI / 4.0;
        let p = UnitVector::new(vec![a.cos(), a.sin(), 0.0]).unwrap();
        let q = UnitVector::new(vec![a.cos(), -a.sin(), 0.0]).unwrap();
        let c = tangent_covariance(&mu, &[p, q]).unwrap();
        let mut expected = Matrix::zeros(3, 3);
        expected[(1, 1)] = PI * PI / 16.0;
        assert!(c.sub(&expected).unwrap().max_abs() < 1e-15);
    }

    #[test]
    fn covariance_trace_is_mean_squared_angle() {
        let mut rng = SeededRng::new(5);
        let (mu, pts) = cluster(&mut rng, 6, 30, 0.4);
        let c = tangent_covariance(&mu, &pts).unwrap();
        let msq: f64 = pts
            .iter()
            .map(|p| crate::sphere::geodesic_distance(&mu, p).powi(2))
            .sum::<f64>()
            / 30.0;
        assert!((c.trace() - msq).abs() < 1e-12);
    }

    #[test]
    fn antipodal_sample_reports_index() {
        let mu = UnitVector::<f64>::basis(3, 0);
        let pts = vec![mu.clone(), UnitVector::basis(3, 1), mu.neg()];
        match tangent_covariance(&mu, &pts) {
            Err(Error::Antipodal { index: Some(2), .. }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn principal_basis_cases() {
        let (b, v) = principal_basis(&Matrix::diag(&[3.0, 1.0, 2.0]), 3).unwrap();
        assert_eq!(v, vec![3.0, 2.0, 1.0]);
        assert_eq!(b.column(1), vec![0.0, 0.0, 1.0]);

        let w = UnitVector::new(vec![1.0f64, -2.0, 0.5]).unwrap();
        let mut c = Matrix::zeros(3, 3);
        c.add_outer(0.7, w.as_slice(), w.as_slice());
        let (b, v) = principal_basis(&c, 2).unwrap();
        assert!((dot(&b.column(0), w.as_slice()).abs() - 1.0).abs() < 1e-12);
        assert!(v[1].abs() < 1e-15);
        assert!(matches!(principal_basis(&c, 4), Err(Error::Dimension(_))));
    }

    #[test]
    fn anchor_invariants_and_rank_deficient_tangency() {
        let mut rng = SeededRng::new(8);
        // Three points: covariance of rank 2 at most, basis of 8 must still be tangent.
        let (_, pts) = cluster(&mut rng, 16, 3, 0.3);
        let a = build_class_anchor(&pts, &pts, 1, 8, MeanMode::Approx).unwrap();
        let gram = a.basis_vis.transpose().matmul(&a.basis_vis).unwrap();
        assert!(gram.sub(&Matrix::identity(8)).unwrap().max_abs() < 1e-8);
        for j in 0..8 {
            assert!(dot(a.mu_vis.as_slice(), &a.basis_vis.column(j)).abs() < 1e-8);
        }
        assert!(a.eigvals_vis.windows(2).all(|w| w[0] >= w[1]));
        assert!(a.eigvals_vis.iter().all(|&v| v >= 0.0));
        assert_eq!(a.basis_vis, a.basis_txt);
        assert_eq!(a.eigvals_vis, a.eigvals_txt);
    }

    #[test]
    fn single_sample_is_rejected() {
        let p = UnitVector::<f64>::basis(4, 0);
        assert!(matches!(
            build_class_anchor(&[p.clone()], &[p.clone(), p], 0, 2, MeanMode::Approx),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn repeated_point_zero_covariance_both_methods() {
        let p = UnitVector::new(vec![0.3f64, 0.1, -0.9, 0.2]).unwrap();
        let pts = vec![p.clone(), p.clone(), p];
        let a = build_class_anchor(&pts, &pts, 0, 2, MeanMode::Approx).unwrap();
        let b = build_class_anchor_pca(&pts, &pts, 0, 2, MeanMode::Approx).unwrap();
        assert!(a.eigvals_vis.iter().all(|&v: &f64| v.abs() < 1e-15));
        assert!(b.eigvals_vis.iter().all(|&v: &f64| v.abs() < 1e-15));
    }

    #[test]
    fn duplication_leaves_anchor_unchanged() {
        let mut rng = SeededRng::new(21);
        let (_, pts) = cluster(&mut rng, 8, 20, 0.3);
        let doubled: Vec<_> = pts.iter().chain(pts.iter()).cloned().collect();
        let a = build_class_anchor(&pts, &pts, 0, 3, MeanMode::Approx).unwrap();
        let b = build_class_anchor(&doubled, &doubled, 0, 3, MeanMode::Approx).unwrap();
        let mu_err = a
            .mu_vis
            .as_slice()
            .iter()
            .zip(b.mu_vis.as_slice())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(mu_err < 1e-12);
        let ca = tangent_covariance(&a.mu_vis, &pts).unwrap();
        let cb = tangent_covariance(&b.mu_vis, &doubled).unwrap();
        assert!(ca.sub(&cb).unwrap().max_abs() < 1e-12);
        for j in 0..3 {
            let c = dot(&a.basis_vis.column(j), &b.basis_vis.column(j));
            assert!((c.abs() - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn store_freeze_semantics() {
        let mut rng = SeededRng::new(2);
        let (_, pts) = cluster(&mut rng, 6, 5, 0.2);
        let anchor = build_class_anchor(&pts, &pts, 7, 2, MeanMode::Approx).unwrap();
        let mut store = AnchorStore::new();
        store.insert(0, anchor.clone()).unwrap();
        let d1 = store.freeze_task(0).unwrap();
        assert_eq!(store.freeze_task(0).unwrap(), d1);
        assert_eq!(store.task_digest(0).unwrap(), d1);
        assert!(matches!(
            store.insert(0, anchor.clone()),
            Err(Error::Frozen { class: 7, task: 0 })
        ));
        assert!(matches!(
            store.insert(1, anchor.clone()),
            Err(Error::Frozen { class: 7, task: 0 })
        ));
        let mut other = anchor;
        other.class_id = 8;
        store.insert(1, other.clone()).unwrap();
        other.class_id = 8;
        assert!(matches!(
            store.insert(2, other),
            Err(Error::DuplicateClass { class: 8, task: 1 })
        ));
        assert_eq!(store.task_digest(0).unwrap(), d1);
    }
}
