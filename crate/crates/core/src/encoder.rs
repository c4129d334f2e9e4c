//! Frozen stand-in encoders and input-space perturbations.
//!
//! Raw samples live in `R^{d_in}`; encoders are fixed random projections to
//! `R^d` followed by normalisation. The textual projection is the visual one
//! plus a small independent perturbation, so the two modalities share a
//! roughly aligned embedding space the way contrastively trained encoders do.
//!
//! Perturbations act on contiguous coordinate blocks (the vector analogue of an
//! image region) and are applied identically to a sample's caption features.
//! Noise amplitudes are relative to the sample's coordinate RMS, which keeps
//! every perturbation equivariant under rescaling of the input.

use crate::error::{Error, Result};
use crate::hash::Fnv1a;
use crate::linalg::{norm, Matrix, SeededRng};
use crate::sphere::UnitVector;
use crate::{ClassId, TaskId};

/// Relative magnitude of the textual projection's deviation from the visual one.
pub const TEXT_ALIGNMENT_NOISE: f64 = 0.1;

/// Fraction range of the coordinate block touched by the flip augmentation.
const FLIP_BLOCK: (f64, f64) = (0.02, 0.1);
/// Fraction range of the block collapsed to its mean by the grey augmentation.
const COLLAPSE_BLOCK: (f64, f64) = (0.05, 0.2);

#[derive(Clone, Debug, PartialEq)]
pub struct RawSample {
    pub features: Vec<f64>,
    pub label: ClassId,
    pub task: TaskId,
    /// Stand-in for a generated caption, in the same raw space as `features`.
    pub caption: Option<Vec<f64>>,
}

impl RawSample {
    pub fn dim(&self) -> usize {
        self.features.len()
    }

    /// Caption features, or the image features when no caption exists.
    pub fn caption_or_features(&self) -> &[f64] {
        self.caption.as_deref().unwrap_or(&self.features)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    Visual,
    Textual,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrozenEncoder {
    projection: Matrix<f64>,
    modality: Modality,
}

impl FrozenEncoder {
    pub fn new(projection: Matrix<f64>, modality: Modality) -> Result<Self> {
        if !projection.is_finite() {
            return Err(Error::Domain("encoder projection has non-finite entries".into()));
        }
        Ok(Self {
            projection,
            modality,
        })
    }

    /// Visual/textual encoder pair for a run seed. Visual entries are
    /// i.i.d. `N(0, 1/d_in)`; the textual projection adds an independent
    /// `N(0, TEXT_ALIGNMENT_NOISE²/d_in)` perturbation.
    pub fn pair(seed: u64, d_in: usize, d: usize) -> Result<(Self, Self)> {
        if d_in == 0 || d == 0 {
            return Err(Error::EmptyDimension("encoder dimensions must be positive"));
        }
        let root = SeededRng::new(seed);
        let mut vis_rng = root.fork(0x0076_6973);
        let mut txt_rng = root.fork(0x0074_7874);
        let s = 1.0 / (d_in as f64).sqrt();
        let vis = Matrix::from_fn(d, d_in, |_, _| s * vis_rng.gaussian());
        let txt = Matrix::from_fn(d, d_in, |i, j| {
            vis[(i, j)] + TEXT_ALIGNMENT_NOISE * s * txt_rng.gaussian()
        });
        Ok((
            Self::new(vis, Modality::Visual)?,
            Self::new(txt, Modality::Textual)?,
        ))
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn projection(&self) -> &Matrix<f64> {
        &self.projection
    }

    pub fn input_dim(&self) -> usize {
        self.projection.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.projection.rows()
    }

    pub fn digest(&self) -> u64 {
        let mut h = Fnv1a::new();
        h.write(&[self.modality as u8]);
        h.write_f64s(self.projection.as_slice().iter().copied());
        h.finish()
    }

    /// Unnormalised projection.
    pub fn project(&self, features: &[f64]) -> Result<Vec<f64>> {
        self.projection.matvec(features)
    }

    /// `normalize(P · features)`.
    pub fn encode(&self, features: &[f64]) -> Result<UnitVector<f64>> {
        let y = self.project(features)?;
        UnitVector::new(y).map_err(|e| match e {
            Error::Degenerate(_) => Error::Degenerate("encoder output vanished".into()),
            e => e,
        })
    }

    pub fn encode_visual(&self, x: &RawSample) -> Result<UnitVector<f64>> {
        if self.modality != Modality::Visual {
            return Err(Error::Domain("encode_visual called on a textual encoder".into()));
        }
        self.encode(&x.features)
    }

    /// `normalize(g_t(prompt) + g_t(caption))`, or `normalize(g_t(prompt))`
    /// when no caption is available (inference path).
    pub fn encode_textual_fused(
        &self,
        class_prompt: &[f64],
        caption: Option<&[f64]>,
    ) -> Result<UnitVector<f64>> {
        if self.modality != Modality::Textual {
            return Err(Error::Domain("textual fusion called on a visual encoder".into()));
        }
        let p = self.encode(class_prompt)?;
        match caption {
            None => Ok(p),
            Some(c) => {
                let c = self.encode(c)?;
                let sum: Vec<f64> = p.as_slice().iter().zip(c.as_slice()).map(|(a, b)| a + b).collect();
                UnitVector::new(sum).map_err(|_| {
                    Error::Degenerate("prompt and caption embeddings cancel".into())
                })
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PerturbationSpec {
    pub rho_min: f64,
    pub rho_max: f64,
    /// Aspect-ratio bounds; carried for completeness, unused by 1-D blocks.
    pub eta_min: f64,
    pub eta_max: f64,
    /// Number of augmented views.
    pub views: usize,
    pub jitter_sigma: f64,
    pub flip_prob: f64,
    pub gray_prob: f64,
}

impl Default for PerturbationSpec {
    fn default() -> Self {
        Self {
            rho_min: 0.02,
            rho_max: 0.4,
            eta_min: 0.3,
            eta_max: 3.3,
            views: 3,
            jitter_sigma: 0.05,
            flip_prob: 0.5,
            gray_prob: 0.2,
        }
    }
}

impl PerturbationSpec {
    pub fn validate(&self) -> Result<()> {
        let frac = |x: f64| x > 0.0 && x < 1.0;
        if !(frac(self.rho_min) && frac(self.rho_max) && self.rho_min < self.rho_max) {
            return Err(Error::Config(format!(
                "occlusion ratio bounds must satisfy 0 < rho_min < rho_max < 1 (got {}, {})",
                self.rho_min, self.rho_max
            )));
        }
        if !(self.eta_min > 0.0 && self.eta_min < self.eta_max) {
            return Err(Error::Config("aspect bounds must satisfy 0 < eta_min < eta_max".into()));
        }
        if self.views == 0 {
            return Err(Error::Config("at least one augmented view is required".into()));
        }
        if !(self.jitter_sigma >= 0.0) {
            return Err(Error::Config("jitter_sigma must be non-negative".into()));
        }
        for p in [self.flip_prob, self.gray_prob] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config("augmentation probabilities must lie in [0, 1]".into()));
            }
        }
        Ok(())
    }
}

fn rms(x: &[f64]) -> f64 {
    if x.is_empty() {
        0.0
    } else {
        norm(x) / (x.len() as f64).sqrt()
    }
}

/// Length of an occlusion block for ratio `rho`: `round(rho · d_in)` clamped
/// to `[1, d_in − 1]`.
pub fn block_len(rho: f64, d_in: usize) -> usize {
    ((rho * d_in as f64).round() as usize).clamp(1, d_in.saturating_sub(1).max(1))
}

fn random_block(len: usize, d_in: usize, rng: &mut SeededRng) -> std::ops::Range<usize> {
    let start = rng.below(d_in - len + 1);
    start..start + len
}

/// Replaces `block` of `v` with Gaussian noise at the vector's RMS scale.
fn fill_noise(v: &mut [f64], block: std::ops::Range<usize>, rng: &mut SeededRng) {
    let scale = rms(v);
    for x in &mut v[block] {
        *x = scale * rng.gaussian();
    }
}

/// Occlusion with a fixed ratio. The same block is corrupted in the caption,
/// with independent noise.
pub fn occlude_with_ratio(x: &RawSample, rho: f64, rng: &mut SeededRng) -> Result<RawSample> {
    let d_in = x.dim();
    if d_in < 4 {
        return Err(Error::Dimension(format!("occlusion needs d_in >= 4, got {d_in}")));
    }
    let len = block_len(rho, d_in);
    let block = random_block(len, d_in, rng);
    let mut out = x.clone();
    fill_noise(&mut out.features, block.clone(), rng);
    if let Some(c) = out.caption.as_mut() {
        fill_noise(c, block, rng);
    }
    Ok(out)
}

/// One contiguous block of length `round(ρ·d_in)`, `ρ ~ U(rho_min, rho_max)`,
/// replaced by i.i.d. Gaussian noise; every other coordinate is untouched.
pub fn occlude(x: &RawSample, spec: &PerturbationSpec, rng: &mut SeededRng) -> Result<RawSample> {
    let rho = rng.uniform_range(spec.rho_min, spec.rho_max);
    occlude_with_ratio(x, rho, rng)
}

/// Applies one augmentation draw to a vector given pre-drawn block choices.
struct ViewPlan {
    flip: Option<std::ops::Range<usize>>,
    collapse: Option<std::ops::Range<usize>>,
}

fn plan_view(d_in: usize, spec: &PerturbationSpec, rng: &mut SeededRng) -> ViewPlan {
    let draw_block = |range: (f64, f64), rng: &mut SeededRng| {
        let frac = rng.uniform_range(range.0, range.1);
        let len = block_len(frac, d_in);
        random_block(len, d_in, rng)
    };
    let flip = rng.bernoulli(spec.flip_prob).then(|| draw_block(FLIP_BLOCK, rng));
    let collapse = rng
        .bernoulli(spec.gray_prob)
        .then(|| draw_block(COLLAPSE_BLOCK, rng));
    ViewPlan { flip, collapse }
}

fn apply_view(v: &mut [f64], plan: &ViewPlan, sigma: f64, rng: &mut SeededRng) {
    if sigma > 0.0 {
        let scale = sigma * rms(v);
        for x in v.iter_mut() {
            *x += scale * rng.gaussian();
        }
    }
    if let Some(b) = &plan.flip {
        for x in &mut v[b.clone()] {
            *x = -*x;
        }
    }
    if let Some(b) = &plan.collapse {
        let m = v[b.clone()].iter().sum::<f64>() / b.len() as f64;
        for x in &mut v[b.clone()] {
            *x = m;
        }
    }
}

/// `M` independent views: RMS-relative Gaussian jitter, sign flip of a random
/// block with probability `flip_prob`, and mean-collapse of a random block with
/// probability `gray_prob`. Labels are preserved.
pub fn augment_views(x: &RawSample, spec: &PerturbationSpec, rng: &mut SeededRng) -> Result<Vec<RawSample>> {
    if spec.views == 0 {
        return Err(Error::Config("at least one augmented view is required".into()));
    }
    let d_in = x.dim();
    if d_in < 2 {
        return Err(Error::Dimension(format!("augmentation needs d_in >= 2, got {d_in}")));
    }
    let mut out = Vec::with_capacity(spec.views);
    for _ in 0..spec.views {
        let plan = plan_view(d_in, spec, rng);
        let mut view = x.clone();
        apply_view(&mut view.features, &plan, spec.jitter_sigma, rng);
        if let Some(c) = view.caption.as_mut() {
            apply_view(c, &plan, spec.jitter_sigma, rng);
        }
        out.push(view);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(rng: &mut SeededRng, d_in: usize, caption: bool) -> RawSample {
        let features = rng.gaussian_vec(d_in).unwrap();
        let caption = caption.then(|| rng.gaussian_vec(d_in).unwrap());
        RawSample {
            features,
            label: 3,
            task: 0,
            caption,
        }
    }

    #[test]
    fn encoding_is_frozen_scale_invariant_and_unit() {
        let (vis, txt) = FrozenEncoder::pair(1, 16, 6).unwrap();
        let mut rng = SeededRng::new(4);
        let x = sample(&mut rng, 16, false);
        let a = vis.encode_visual(&x).unwrap();
        let b = vis.encode_visual(&x).unwrap();
        assert_eq!(a, b);
        let mut x2 = x.clone();
        x2.features.iter_mut().for_each(|v| *v *= 2.0);
        let c = vis.encode_visual(&x2).unwrap();
        assert!(a.as_slice().iter().zip(c.as_slice()).all(|(p, q)| (p - q).abs() < 1e-15));
        assert!((a.dot(&a) - 1.0).abs() < 1e-12);
        assert!(txt.encode_visual(&x).is_err());
        assert!(vis.encode_textual_fused(&x.features, None).is_err());
    }

    #[test]
    fn zero_projection_is_degenerate() {
        let enc = FrozenEncoder::new(Matrix::zeros(3, 5), Modality::Visual).unwrap();
        let x = RawSample {
            features: vec![1.0; 5],
            label: 0,
            task: 0,
            caption: None,
        };
        assert!(matches!(enc.encode_visual(&x), Err(Error::Degenerate(_))));
    }

    #[test]
    fn textual_fusion() {
        let (_, txt) = FrozenEncoder::pair(9, 12, 5).unwrap();
        let mut rng = SeededRng::new(1);
        let prompt: Vec<f64> = rng.gaussian_vec(12).unwrap();
        let alone = txt.encode_textual_fused(&prompt, None).unwrap();
        assert_eq!(alone, txt.encode(&prompt).unwrap());
        let same = txt.encode_textual_fused(&prompt, Some(&prompt)).unwrap();
        assert!(alone.as_slice().iter().zip(same.as_slice()).all(|(a, b)| (a - b).abs() < 1e-15));
        for _ in 0..20 {
            let cap: Vec<f64> = rng.gaussian_vec(12).unwrap();
            let f = txt.encode_textual_fused(&prompt, Some(&cap)).unwrap();
            assert!((f.dot(&f) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn modalities_are_aligned() {
        let (vis, txt) = FrozenEncoder::pair(3, 128, 32).unwrap();
        let mut rng = SeededRng::new(2);
        let x: Vec<f64> = rng.gaussian_vec(128).unwrap();
        let cos = vis.encode(&x).unwrap().dot(&txt.encode(&x).unwrap());
        assert!(cos > 0.9, "{cos}");
    }

    #[test]
    fn minimum_ratio_occludes_two_coordinates() {
        let mut rng = SeededRng::new(6);
        let x = sample(&mut rng, 100, true);
        let y = occlude_with_ratio(&x, 0.02, &mut rng).unwrap();
        let changed = x.features.iter().zip(&y.features).filter(|(a, b)| a != b).count();
        assert_eq!(changed, 2);
        let changed_cap = x
            .caption
            .as_ref()
            .unwrap()
            .iter()
            .zip(y.caption.as_ref().unwrap())
            .filter(|(a, b)| a != b)
            .count();
        assert_eq!(changed_cap, 2);
    }

    #[test]
    fn occluded_block_is_contiguous() {
        let spec = PerturbationSpec::default();
        let mut rng = SeededRng::new(10);
        let x = sample(&mut rng, 64, false);
        for _ in 0..200 {
            let y = occlude(&x, &spec, &mut rng).unwrap();
            let idx: Vec<usize> = (0..64).filter(|&i| x.features[i] != y.features[i]).collect();
            let (lo, hi) = (idx[0], *idx.last().unwrap());
            assert_eq!(hi - lo + 1, idx.len());
            assert!(!idx.is_empty() && idx.len() <= 63);
        }
    }

    #[test]
    fn masked_fraction_is_uniform_over_ratio_range() {
        let spec = PerturbationSpec::default();
        let mut rng = SeededRng::new(14);
        let x = sample(&mut rng, 100, false);
        let draws = 10_000;
        let mut total = 0.0;
        for _ in 0..draws {
            let y = occlude(&x, &spec, &mut rng).unwrap();
            let frac = x.features.iter().zip(&y.features).filter(|(a, b)| a != b).count() as f64 / 100.0;
            assert!((0.02..=0.4).contains(&frac), "{frac}");
            total += frac;
        }
        let mean = total / draws as f64;
        assert!((mean - 0.21).abs() < 0.01, "{mean}");
    }

    #[test]
    fn jitter_energy_matches_variance() {
        let spec = PerturbationSpec {
            views: 1,
            jitter_sigma: 0.1,
            flip_prob: 0.0,
            gray_prob: 0.0,
            ..Default::default()
        };
        let d_in = 64;
        // Unit RMS, so the jitter standard deviation is exactly sigma.
        let x = RawSample {
            features: (0..d_in).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect(),
            label: 0,
            task: 0,
            caption: None,
        };
        let mut rng = SeededRng::new(15);
        let draws = 4000;
        let mut energy = 0.0;
        for _ in 0..draws {
            let v = &augment_views(&x, &spec, &mut rng).unwrap()[0];
            energy += v.features.iter().zip(&x.features).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        }
        let expected = d_in as f64 * 0.01;
        let mean = energy / draws as f64;
        assert!((mean / expected - 1.0).abs() < 0.05, "{mean} vs {expected}");
    }

    #[test]
    fn identity_augmentation() {
        let spec = PerturbationSpec {
            jitter_sigma: 0.0,
            flip_prob: 0.0,
            gray_prob: 0.0,
            ..Default::default()
        };
        let mut rng = SeededRng::new(12);
        let x = sample(&mut rng, 20, true);
        let views = augment_views(&x, &spec, &mut rng).unwrap();
        assert_eq!(views.len(), 3);
        assert!(views.iter().all(|v| *v == x));
    }

    #[test]
    fn augmentation_reproducible_and_label_preserving() {
        let spec = PerturbationSpec::default();
        let x = sample(&mut SeededRng::new(0), 32, true);
        let a = augment_views(&x, &spec, &mut SeededRng::new(99)).unwrap();
        let b = augment_views(&x, &spec, &mut SeededRng::new(99)).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|v| v.label == x.label && v.dim() == x.dim()));
    }

    #[test]
    fn perturbation_bounds_are_validated() {
        assert!(PerturbationSpec::default().validate().is_ok());
        let bad = PerturbationSpec {
            rho_min: 0.5,
            rho_max: 0.4,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = PerturbationSpec {
            views: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
