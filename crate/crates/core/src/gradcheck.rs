//! Central finite-difference checks of the hand-written gradients on seeded random
//! instances. Used by the test suites and the acceptance harness.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::concept_head::{CamPooling, ConceptHead};
use crate::error::Result;
use crate::prototypes::{grad_loss_multi, loss_multi, Atlas, ContrastiveConfig, Projector};
use crate::reasoning::TaskHead;
use crate::tensor::{FeatureMap, Matrix};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

/// `|a - n| / max(|a|, |n|)` over whole gradient vectors; 0 when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let l2 = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = l2(&mut analytic.iter().zip(numeric).map(|(a, n)| a - n));
    let scale = l2(&mut analytic.iter().copied()).max(l2(&mut numeric.iter().copied()));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Central differences of `f` at `x`, one coordinate at a time.
pub fn central_difference(x: &[f64], step: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + step;
            let up = f(&probe);
            probe[i] = orig - step;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * step)
        })
        .collect()
}

fn normals(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let x: f64 = StandardNormal.sample(rng);
            scale * x
        })
        .collect()
}

/// Concept-head BCE: weights and biases of a random `K x C` head on a random map.
pub fn concept_head_instance(seed: u64, pooling: CamPooling) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (k, c) = (rng.random_range(1..=4), rng.random_range(1..=6));
    let (h, w) = (rng.random_range(1..=4), rng.random_range(1..=4));
    let f = FeatureMap::new(c, h, w, normals(&mut rng, c * h * w, 1.0))?;
    let labels: Vec<f64> = (0..k).map(|_| f64::from(u8::from(rng.random_bool(0.5)))).collect();
    let weights = normals(&mut rng, k * c, 0.5);
    let biases = normals(&mut rng, k, 0.5);

    let head = ConceptHead::new(Matrix::new(k, c, weights.clone())?, biases.clone(), pooling)?;
    let (_, grad) = head.bce_loss_and_grad(&f, &labels)?;
    let mut analytic = grad.weights.data().to_vec();
    analytic.extend(&grad.biases);

    let mut params = weights;
    params.extend(biases);
    let numeric = central_difference(&params, STEP, |p| {
        let h =
            ConceptHead::new(Matrix::new(k, c, p[..k * c].to_vec()).unwrap(), p[k * c..].to_vec(), pooling).unwrap();
        h.bce_loss_and_grad(&f, &labels).unwrap().0
    });
    Ok(relative_error(&analytic, &numeric))
}

/// Errors for the prototype and projector gradients of the multi-prototype loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContrastiveErrors {
    pub prototypes: f64,
    pub projector: f64,
}

pub fn contrastive_instance(seed: u64) -> Result<ContrastiveErrors> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (k, m) = (rng.random_range(1..=4), rng.random_range(1..=3));
    let (d, c) = (rng.random_range(2..=5), rng.random_range(2..=6));
    let cfg = ContrastiveConfig {
        lambda: rng.random_range(1.5..12.0),
        gamma: rng.random_range(1.5..12.0),
        delta: rng.random_range(0.0..0.1),
        num_prototypes: m,
        ..ContrastiveConfig::default()
    };
    let atlas = Atlas::seeded(k, m, d, &mut rng)?;
    let projector = Projector::new(Matrix::new(d, c, normals(&mut rng, d * c, 1.0))?)?;
    let raw_v = normals(&mut rng, c, 1.0);
    let target = rng.random_range(0..k);

    let (_, grad) = grad_loss_multi(&atlas, &projector, &raw_v, target, &cfg)?;
    let loss_at = |flat: &[f64], proj: &Projector| {
        let mut a = atlas.clone();
        a.set_prototypes_unchecked(flat);
        loss_multi(&a, proj.project(&raw_v).unwrap().as_slice(), target, &cfg).unwrap()
    };
    let flat = atlas.flat();
    let numeric_p = central_difference(&flat, STEP, |x| loss_at(x, &projector));
    let numeric_proj = central_difference(projector.matrix().data(), STEP, |x| {
        loss_at(&flat, &Projector::new(Matrix::new(d, c, x.to_vec()).unwrap()).unwrap())
    });
    Ok(ContrastiveErrors {
        prototypes: relative_error(&grad.prototypes, &numeric_p),
        projector: relative_error(grad.projector.data(), &numeric_proj),
    })
}

/// Task-head softmax cross-entropy.
pub fn task_head_instance(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (l, n) = (rng.random_range(2..=5), rng.random_range(1..=8));
    let s: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let target = rng.random_range(0..l);
    let weights = normals(&mut rng, l * n, 1.0);
    let biases = normals(&mut rng, l, 1.0);
    let head = TaskHead::new(Matrix::new(l, n, weights.clone())?, biases.clone())?;
    let (_, grad) = head.ce_loss_and_grad(&s, target)?;
    let mut analytic = grad.weights.data().to_vec();
    analytic.extend(&grad.biases);
    let mut params = weights;
    params.extend(biases);
    let numeric = central_difference(&params, STEP, |p| {
        let h = TaskHead::new(Matrix::new(l, n, p[..l * n].to_vec()).unwrap(), p[l * n..].to_vec()).unwrap();
        h.ce_loss_and_grad(&s, target).unwrap().0
    });
    Ok(relative_error(&analytic, &numeric))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_of_identical_vectors_is_zero() {
        assert_eq!(relative_error(&[1.0, -2.0], &[1.0, -2.0]), 0.0);
        assert_eq!(relative_error(&[0.0], &[0.0]), 0.0);
        assert!((relative_error(&[1.0, 0.0], &[0.0, 0.0]) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn central_difference_of_a_quadratic_is_exact() {
        let g = central_difference(&[1.0, -3.0], 1e-3, |x| x[0] * x[0] + 2.0 * x[1]);
        assert!((g[0] - 2.0).abs() < 1e-9 && (g[1] - 2.0).abs() < 1e-9);
    }
}
