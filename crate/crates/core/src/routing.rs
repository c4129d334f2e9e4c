//! Inference-time task selection and prediction.
//!
//! A query is a Dirac measure at its visual embedding; every task is the
//! uniform measure on the visual basis vectors of its classes. The entropic
//! transport cost between the two drives a Boltzmann distribution over tasks,
//! which weights the experts' class scores.

use crate::error::{Error, Result};
use crate::expert::{score_embedding, TaskExpert};
use crate::linalg::{cosine, dot, Matrix, SeededRng};
use crate::pga::ClassAnchor;
use crate::scalar::Scalar;
use crate::sphere::{exp_map, geodesic_distance, TangentVector, UnitVector};
use crate::ClassId;

/// Tolerance on the total mass of measures and routing distributions.
fn mass_tol<T: Scalar>(n: usize) -> T {
    T::lit(1e-12).max(T::epsilon() * T::from_usize_lossy(4 * n.max(1)))
}

/// `−Σ w log w` with `0 log 0 = 0`.
pub fn entropy<T: Scalar>(weights: &[T]) -> T {
    weights
        .iter()
        .filter(|&&w| w > T::zero())
        .map(|&w| -w * w.ln())
        .sum()
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteMeasure<T> {
    atoms: Vec<UnitVector<T>>,
    weights: Vec<T>,
}

impl<T: Scalar> DiscreteMeasure<T> {
    pub fn new(atoms: Vec<UnitVector<T>>, weights: Vec<T>) -> Result<Self> {
        if atoms.is_empty() {
            return Err(Error::EmptyDimension("measure atoms"));
        }
        if atoms.len() != weights.len() {
            return Err(Error::Dimension(format!(
                "{} atoms but {} weights",
                atoms.len(),
                weights.len()
            )));
        }
        let d = atoms[0].dim();
        if atoms.iter().any(|a| a.dim() != d) {
            return Err(Error::Dimension("measure atoms of mixed dimension".into()));
        }
        if weights.iter().any(|w| !(*w >= T::zero()) || !w.is_finite()) {
            return Err(Error::Domain("measure weights must be finite and non-negative".into()));
        }
        let total: T = weights.iter().copied().sum();
        if (total - T::one()).abs() > mass_tol(weights.len()) {
            return Err(Error::Domain(format!("measure weights sum to {total}, not 1")));
        }
        Ok(Self { atoms, weights })
    }

    pub fn uniform(atoms: Vec<UnitVector<T>>) -> Result<Self> {
        let w = T::one() / T::from_usize_lossy(atoms.len().max(1));
        let weights = vec![w; atoms.len()];
        Self::new(atoms, weights)
    }

    pub fn dirac(atom: UnitVector<T>) -> Self {
        Self {
            atoms: vec![atom],
            weights: vec![T::one()],
        }
    }

    pub fn atoms(&self) -> &[UnitVector<T>] {
        &self.atoms
    }

    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.atoms[0].dim()
    }

    pub fn entropy(&self) -> T {
        entropy(&self.weights)
    }
}

/// Uniform measure on the visual basis columns of the given anchors.
pub fn task_measure<'a, T: Scalar>(anchors: impl IntoIterator<Item = &'a ClassAnchor<T>>) -> Result<DiscreteMeasure<T>> {
    let mut atoms = Vec::new();
    for a in anchors {
        for j in 0..a.basis_vis.cols() {
            atoms.push(UnitVector::new(a.basis_vis.column(j))?);
        }
    }
    DiscreteMeasure::uniform(atoms)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransportPlan<T> {
    matrix: Matrix<T>,
}

impl<T: Scalar> TransportPlan<T> {
    pub fn matrix(&self) -> &Matrix<T> {
        &self.matrix
    }

    pub fn row_sums(&self) -> Vec<T> {
        (0..self.matrix.rows()).map(|i| self.matrix.row(i).iter().copied().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<T> {
        let mut s = vec![T::zero(); self.matrix.cols()];
        for i in 0..self.matrix.rows() {
            for (acc, &v) in s.iter_mut().zip(self.matrix.row(i)) {
                *acc = *acc + v;
            }
        }
        s
    }

    /// Largest L1 deviation of either marginal.
    pub fn marginal_violation(&self, source: &[T], target: &[T]) -> T {
        let l1 = |a: Vec<T>, b: &[T]| a.iter().zip(b).map(|(&x, &y)| (x - y).abs()).sum::<T>();
        l1(self.row_sums(), source).max(l1(self.col_sums(), target))
    }

    /// `⟨π, C⟩`.
    pub fn linear_cost(&self, cost: &Matrix<T>) -> T {
        self.matrix.as_slice().iter().zip(cost.as_slice()).map(|(&p, &c)| p * c).sum()
    }

    pub fn entropy(&self) -> T {
        entropy(self.matrix.as_slice())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OtParams<T> {
    pub epsilon: T,
    pub tau_route: T,
    pub max_iter: usize,
    pub marginal_tol: T,
    /// Add `εH(ν_b)` back to each task cost, removing the entropy term's
    /// dependence on task size.
    pub debias: bool,
}

impl<T: Scalar> Default for OtParams<T> {
    fn default() -> Self {
        Self {
            epsilon: T::lit(0.1),
            tau_route: T::lit(0.05),
            max_iter: 1000,
            marginal_tol: T::lit(1e-9),
            debias: false,
        }
    }
}

impl<T: Scalar> OtParams<T> {
    pub fn validate(&self) -> Result<()> {
        let pos = |v: T| v > T::zero() && v.is_finite();
        if !pos(self.epsilon) || !pos(self.tau_route) || !pos(self.marginal_tol) || self.max_iter == 0 {
            return Err(Error::Config(
                "epsilon, tau_route, marginal_tol and max_iter must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// `C_ij = 1 − ⟨a_i, b_j⟩`, clamped to `[0, 2]`.
pub fn cost_matrix<T: Scalar>(source: &DiscreteMeasure<T>, target: &DiscreteMeasure<T>) -> Result<Matrix<T>> {
    if source.dim() != target.dim() {
        return Err(Error::Dimension(format!(
            "source dimension {} differs from target dimension {}",
            source.dim(),
            target.dim()
        )));
    }
    let two = T::lit(2.0);
    Ok(Matrix::from_fn(source.len(), target.len(), |i, j| {
        let c = T::one() - source.atoms[i].dot(&target.atoms[j]);
        c.max(T::zero()).min(two)
    }))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SinkhornSolution<T> {
    /// `⟨π, C⟩ − εH(π)`.
    pub cost: T,
    pub linear_cost: T,
    pub entropy: T,
    pub plan: TransportPlan<T>,
    pub iterations: usize,
    pub violation: T,
}

fn log_sum_exp<T: Scalar>(vals: impl Iterator<Item = T> + Clone) -> T {
    let max = vals.clone().fold(T::neg_infinity(), T::max);
    if max == T::neg_infinity() {
        return max;
    }
    max + vals.map(|v| (v - max).exp()).sum::<T>().ln()
}

/// Entropic optimal transport by log-domain Sinkhorn iterations.
///
/// Each sweep updates the source potential `f` and then the target potential
/// `g`, so column marginals are exact after every sweep; the loop stops once
/// the row-marginal L1 violation drops below `params.marginal_tol`.
pub fn sinkhorn<T: Scalar>(
    source: &DiscreteMeasure<T>,
    target: &DiscreteMeasure<T>,
    params: &OtParams<T>,
) -> Result<SinkhornSolution<T>> {
    params.validate()?;
    let cost = cost_matrix(source, target)?;
    sinkhorn_with_cost(source.weights(), target.weights(), &cost, params)
}

/// Sinkhorn on an explicit cost matrix.
pub fn sinkhorn_with_cost<T: Scalar>(
    a: &[T],
    b: &[T],
    cost: &Matrix<T>,
    params: &OtParams<T>,
) -> Result<SinkhornSolution<T>> {
    params.validate()?;
    let (m, n) = cost.shape();
    if a.len() != m || b.len() != n || m == 0 || n == 0 {
        return Err(Error::Dimension(format!(
            "marginals of length {}, {} for a {m}x{n} cost",
            a.len(),
            b.len()
        )));
    }
    let eps = params.epsilon;
    let log_a: Vec<T> = a.iter().map(|w| w.ln()).collect();
    let log_b: Vec<T> = b.iter().map(|w| w.ln()).collect();
    let mut f = vec![T::zero(); m];
    let mut g = vec![T::zero(); n];
    let plan_entry = |f: &[T], g: &[T], i: usize, j: usize| {
        let v = (f[i] + g[j] - cost[(i, j)]) / eps;
        if v == T::neg_infinity() || v.is_nan() {
            T::zero()
        } else {
            v.exp()
        }
    };

    let mut violation = T::infinity();
    let mut iterations = 0;
    for it in 1..=params.max_iter {
        for i in 0..m {
            let lse = log_sum_exp((0..n).map(|j| (g[j] - cost[(i, j)]) / eps));
            f[i] = if a[i] > T::zero() { eps * (log_a[i] - lse) } else { T::neg_infinity() };
        }
        for j in 0..n {
            let lse = log_sum_exp((0..m).map(|i| (f[i] - cost[(i, j)]) / eps));
            g[j] = if b[j] > T::zero() { eps * (log_b[j] - lse) } else { T::neg_infinity() };
        }
        violation = (0..m)
            .map(|i| {
                let row: T = (0..n).map(|j| plan_entry(&f, &g, i, j)).sum();
                (row - a[i]).abs()
            })
            .sum();
        iterations = it;
        if violation < params.marginal_tol {
            break;
        }
    }
    if !(violation < params.marginal_tol) {
        return Err(Error::Convergence {
            what: "Sinkhorn",
            iterations,
            residual: violation.to_f64_lossy(),
        });
    }
    let plan = TransportPlan {
        matrix: Matrix::from_fn(m, n, |i, j| plan_entry(&f, &g, i, j)),
    };
    let linear_cost = plan.linear_cost(cost);
    let h = plan.entropy();
    Ok(SinkhornSolution {
        cost: linear_cost - eps * h,
        linear_cost,
        entropy: h,
        plan,
        iterations,
        violation,
    })
}

/// Entropic transport cost from a Dirac at `query` to `measure`, with the
/// optional size debiasing from `params`.
pub fn task_cost<T: Scalar>(query: &UnitVector<T>, measure: &DiscreteMeasure<T>, params: &OtParams<T>) -> Result<T> {
    let sol = sinkhorn(&DiscreteMeasure::dirac(query.clone()), measure, params)?;
    Ok(if params.debias {
        sol.cost + params.epsilon * measure.entropy()
    } else {
        sol.cost
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoutingDistribution<T> {
    probs: Vec<T>,
}

impl<T: Scalar> RoutingDistribution<T> {
    pub fn new(probs: Vec<T>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::EmptyDimension("routing distribution"));
        }
        if probs.iter().any(|p| !(*p >= T::zero())) {
            return Err(Error::Domain("routing probabilities must be non-negative".into()));
        }
        let total: T = probs.iter().copied().sum();
        if (total - T::one()).abs() > mass_tol(probs.len()) {
            return Err(Error::Domain(format!("routing probabilities sum to {total}")));
        }
        Ok(Self { probs })
    }

    pub fn uniform(n: usize) -> Result<Self> {
        Self::new(vec![T::one() / T::from_usize_lossy(n.max(1)); n])
    }

    pub fn one_hot(n: usize, index: usize) -> Result<Self> {
        if index >= n {
            return Err(Error::Dimension(format!("index {index} out of {n} tasks")));
        }
        let mut p = vec![T::zero(); n];
        p[index] = T::one();
        Self::new(p)
    }

    /// `softmax(−cost / τ)`.
    pub fn boltzmann(costs: &[T], tau: T) -> Result<Self> {
        if costs.is_empty() {
            return Err(Error::EmptyDimension("task costs"));
        }
        if !(tau > T::zero()) {
            return Err(Error::Domain("routing temperature must be positive".into()));
        }
        let min = costs.iter().copied().fold(T::infinity(), T::min);
        let w: Vec<T> = costs.iter().map(|&c| (-(c - min) / tau).exp()).collect();
        let z: T = w.iter().copied().sum();
        let mut probs: Vec<T> = w.into_iter().map(|v| v / z).collect();
        // Absorb the last rounding error so the mass is 1 to the ulp.
        let total: T = probs.iter().copied().sum();
        let top = argmax_first(&probs);
        probs[top] = probs[top] + (T::one() - total);
        Self::new(probs)
    }

    pub fn probs(&self) -> &[T] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Most probable task; the first one on ties.
    pub fn argmax(&self) -> usize {
        argmax_first(&self.probs)
    }
}

fn argmax_first<T: Scalar>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Per-task Sinkhorn costs for one query.
pub fn task_costs<T: Scalar>(
    query: &UnitVector<T>,
    task_measures: &[DiscreteMeasure<T>],
    params: &OtParams<T>,
) -> Result<Vec<T>> {
    if task_measures.is_empty() {
        return Err(Error::EmptyDimension("task measures"));
    }
    task_measures.iter().map(|m| task_cost(query, m, params)).collect()
}

/// Boltzmann routing over tasks from the transport costs.
pub fn routing_probs<T: Scalar>(
    query: &UnitVector<T>,
    task_measures: &[DiscreteMeasure<T>],
    params: &OtParams<T>,
) -> Result<RoutingDistribution<T>> {
    let costs = task_costs(query, task_measures, params)?;
    RoutingDistribution::boltzmann(&costs, params.tau_route)
}

/// `1 − max_j ⟨query, atom_j⟩` per task.
pub fn cosine_costs<T: Scalar>(query: &UnitVector<T>, task_measures: &[DiscreteMeasure<T>]) -> Result<Vec<T>> {
    if task_measures.is_empty() {
        return Err(Error::EmptyDimension("task measures"));
    }
    task_measures
        .iter()
        .map(|m| {
            if m.dim() != query.dim() {
                return Err(Error::Dimension("query and task atoms differ in dimension".into()));
            }
            let best = m.atoms().iter().map(|a| a.dot(query)).fold(T::neg_infinity(), T::max);
            Ok(T::one() - best)
        })
        .collect()
}

/// Point-to-point baseline: softmax over the best single-atom match per task.
pub fn cosine_route<T: Scalar>(
    query: &UnitVector<T>,
    task_measures: &[DiscreteMeasure<T>],
    tau: T,
) -> Result<RoutingDistribution<T>> {
    RoutingDistribution::boltzmann(&cosine_costs(query, task_measures)?, tau)
}

/// Largest observed `|S(z) − S(z')| / d(z, z')` over random unit `z`, random
/// unit tangent directions and the given step sizes, where `S` is the
/// Dirac-source transport cost to `measure`.
pub fn lipschitz_check<T: Scalar>(
    measure: &DiscreteMeasure<T>,
    trials: usize,
    step_sizes: &[T],
    params: &OtParams<T>,
    rng: &mut SeededRng,
) -> Result<T> {
    let d = measure.dim();
    let mut worst = T::zero();
    for _ in 0..trials {
        let z = UnitVector::new(rng.gaussian_vec::<T>(d)?)?;
        let raw: Vec<T> = rng.gaussian_vec(d)?;
        let dir = TangentVector::project(&z, &raw)?;
        let n = dir.norm();
        if n == T::zero() {
            continue;
        }
        let dir = dir.scaled(T::one() / n);
        let s0 = task_cost(&z, measure, params)?;
        for &t in step_sizes {
            let z2 = exp_map(&z, &dir.scaled(t))?;
            let dist = geodesic_distance(&z, &z2);
            if dist == T::zero() {
                continue;
            }
            let s1 = task_cost(&z2, measure, params)?;
            worst = worst.max((s1 - s0).abs() / dist);
        }
    }
    Ok(worst)
}

/// A class that can be predicted: its frozen anchor and its prompt-only fused
/// text direction `t_c`.
#[derive(Clone, Copy, Debug)]
pub struct Candidate<'a> {
    pub class_id: ClassId,
    pub anchor: &'a ClassAnchor<f64>,
    pub text: &'a [f64],
}

/// `E_t^b(t_c)` for every candidate under one expert. Independent of the
/// query, so callers cache it.
pub fn expert_text_embeddings(expert: &TaskExpert, candidates: &[Candidate<'_>]) -> Result<Vec<Vec<f64>>> {
    candidates
        .iter()
        .map(|c| score_embedding(&expert.s_txt, &expert.r_txt, &c.anchor.basis_txt, c.text))
        .collect()
}

/// `Σ_b p_b · cos(E_v^b(z; V_c^vis), E_t^b(t_c; V_c^txt))` for every candidate.
///
/// `text_cache[b][c]` must hold `expert_text_embeddings(experts[b], candidates)[c]`.
/// Experts with zero routing weight are skipped.
pub fn mixture_scores(
    z_vis: &[f64],
    candidates: &[Candidate<'_>],
    experts: &[&TaskExpert],
    text_cache: &[Vec<Vec<f64>>],
    routing: &RoutingDistribution<f64>,
) -> Result<Vec<f64>> {
    if experts.is_empty() || candidates.is_empty() {
        return Err(Error::EmptyDimension("experts or candidate classes"));
    }
    if experts.len() != routing.len() || text_cache.len() != experts.len() {
        return Err(Error::Dimension(format!(
            "{} experts, {} routing weights, {} cached text sets",
            experts.len(),
            routing.len(),
            text_cache.len()
        )));
    }
    let mut scores = vec![0.0; candidates.len()];
    for ((expert, cache), &p) in experts.iter().zip(text_cache).zip(routing.probs()) {
        if p == 0.0 {
            continue;
        }
        if cache.len() != candidates.len() {
            return Err(Error::Dimension("text cache does not match candidates".into()));
        }
        let alpha = expert.s_vis.matvec(z_vis)?;
        let residual = expert.r_vis.matvec(z_vis)?;
        for ((score, cand), text) in scores.iter_mut().zip(candidates).zip(cache) {
            let mut e = residual.clone();
            let lift = cand.anchor.basis_vis.matvec(&alpha)?;
            crate::linalg::axpy(1.0, &lift, &mut e);
            *score += p * cosine(&e, text);
        }
    }
    Ok(scores)
}

/// Index of the best score; the lowest class id wins ties.
pub fn argmax_class(candidates: &[Candidate<'_>], scores: &[f64]) -> Result<(ClassId, usize)> {
    if candidates.is_empty() || candidates.len() != scores.len() {
        return Err(Error::Dimension("one score per candidate required".into()));
    }
    let mut best = 0;
    for i in 1..candidates.len() {
        let better = scores[i] > scores[best]
            || (scores[i] == scores[best] && candidates[i].class_id < candidates[best].class_id);
        if better {
            best = i;
        }
    }
    Ok((candidates[best].class_id, best))
}

/// Mixture-of-experts prediction for a visual embedding.
pub fn mixture_predict(
    z_vis: &[f64],
    candidates: &[Candidate<'_>],
    experts: &[&TaskExpert],
    text_cache: &[Vec<Vec<f64>>],
    routing: &RoutingDistribution<f64>,
) -> Result<(ClassId, Vec<f64>)> {
    let scores = mixture_scores(z_vis, candidates, experts, text_cache, routing)?;
    let (label, _) = argmax_class(candidates, &scores)?;
    Ok((label, scores))
}

/// Plain zero-shot prediction: `argmax_c cos(z, t_c)`.
pub fn zero_shot_predict(z_vis: &[f64], candidates: &[Candidate<'_>]) -> Result<ClassId> {
    let scores: Vec<f64> = candidates.iter().map(|c| cosine(z_vis, c.text)).collect();
    Ok(argmax_class(candidates, &scores)?.0)
}

/// Transport cost from a point mass at `query`. The plan is forced to be the
/// target weights, so the cost is `1 − ⟨z, v̄⟩ − εH(w)` with `v̄` the weighted
/// barycentre of the atoms.
pub fn dirac_closed_form<T: Scalar>(query: &UnitVector<T>, measure: &DiscreteMeasure<T>, epsilon: T) -> T {
    let linear: T = measure
        .atoms()
        .iter()
        .zip(measure.weights())
        .map(|(a, &w)| w * (T::one() - dot(a.as_slice(), query.as_slice())).max(T::zero()).min(T::lit(2.0)))
        .sum();
    linear - epsilon * measure.entropy()
}
