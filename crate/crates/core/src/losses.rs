//! Loss primitives shared by both domains and the mapper.
//!
//! All functions are dtype-agnostic: they run on whatever float type the inputs
//! carry, so the same code path serves `f32` training and `f64` verification.

use candle_core::Tensor;

use crate::error::{Error, Result};

/// Floor on the probability assigned to the correct label.
const PROB_FLOOR: f64 = 1e-12;

/// Denominator guard of the mode-seeking ratio.
pub const MODE_SEEK_EPS: f64 = 1e-5;

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!("{what}: {:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// Mean absolute difference over all elements.
pub fn l1(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape(a, b, "l1 operands")?;
    Ok((a - b)?.abs()?.mean_all()?)
}

fn check_binary(labels: &Tensor) -> Result<()> {
    let flat = labels.flatten_all()?.to_dtype(candle_core::DType::F64)?.to_vec1::<f64>()?;
    if flat.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::validation("external factor", "labels must be 0 or 1"));
    }
    Ok(())
}

/// Binary cross-entropy of sigmoid outputs against binary labels, averaged over
/// samples and attributes. For binary labels the per-entry loss is `−ln q`, where
/// `q` is the probability given to the correct label.
pub fn attribute_bce(probs: &Tensor, labels: &Tensor) -> Result<Tensor> {
    same_shape(probs, labels, "classifier outputs vs labels")?;
    check_binary(labels)?;
    let q = ((labels * probs)? + ((1.0 - labels)? * (1.0 - probs)?)?)?;
    Ok(q.clamp(PROB_FLOOR, 1.0)?.log()?.neg()?.mean_all()?)
}

/// Attribute classification loss: BCE on the real image plus BCE on the generated one.
pub fn classification_loss(real_probs: &Tensor, fake_probs: &Tensor, labels: &Tensor) -> Result<Tensor> {
    Ok((attribute_bce(real_probs, labels)? + attribute_bce(fake_probs, labels)?)?)
}

/// Wasserstein terms from critic scores: `(−E[c(fake)], E[c(fake)] − E[c(real)])`.
/// The discriminator term excludes any Lipschitz regularizer.
pub fn wgan_terms(critic_real: &Tensor, critic_fake: &Tensor) -> Result<(Tensor, Tensor)> {
    let fake = critic_fake.mean_all()?;
    let real = critic_real.mean_all()?;
    Ok((fake.neg()?, (&fake - &real)?))
}

/// Reciprocal mode-seeking ratio `d(v₂ − v₁) / (d(y₂ − y₁) + ε)` with `d` the mean
/// absolute value. Minimizing it pushes outputs apart per unit of latent distance.
pub fn mode_seeking(y1: &Tensor, y2: &Tensor, v1: &Tensor, v2: &Tensor, eps: f64) -> Result<Tensor> {
    same_shape(y1, y2, "mode-seeking images")?;
    same_shape(v1, v2, "mode-seeking variety factors")?;
    let dy = (y2 - y1)?.abs()?.mean_all()?;
    let dv = (v2 - v1)?.abs()?.mean_all()?;
    Ok((dv / (dy + eps)?)?)
}

/// `Σ λᵢ·termᵢ`. Any non-finite term is reported as divergence.
pub fn weighted_total(terms: &[(&str, f64)], weights: &[f64]) -> Result<f64> {
    if terms.len() != weights.len() {
        return Err(Error::Shape(format!("{} terms, {} weights", terms.len(), weights.len())));
    }
    let mut total = 0.0;
    for ((name, value), w) in terms.iter().zip(weights) {
        if !value.is_finite() {
            return Err(Error::Divergence {
                step: 0,
                epoch: 0,
                loss: (*name).to_string(),
                value: *value,
                last_good: None,
            });
        }
        total += w * value;
    }
    Ok(total)
}

/// `Σ λᵢ·termᵢ` on tensors; zero-weight terms are skipped entirely.
pub fn weighted_sum(terms: &[(&Tensor, f64)]) -> Result<Option<Tensor>> {
    let mut acc: Option<Tensor> = None;
    for (t, w) in terms {
        if *w == 0.0 {
            continue;
        }
        let scaled = (*t * *w)?;
        acc = Some(match acc {
            None => scaled,
            Some(a) => (a + scaled)?,
        });
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn t(v: &[f64]) -> Tensor {
        Tensor::new(v, &Device::Cpu).unwrap()
    }

    fn s(t: &Tensor) -> f64 {
        t.to_scalar::<f64>().unwrap()
    }

    #[test]
    fn bce_perfect_and_uninformative() {
        let e = t(&[1.0, 0.0, 1.0, 0.0]);
        assert_eq!(s(&classification_loss(&e, &e, &e).unwrap()), 0.0);
        let half = t(&[0.5; 4]);
        let v = s(&classification_loss(&half, &half, &e).unwrap());
        assert!((v - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn bce_rejects_non_binary_labels() {
        let p = t(&[0.5, 0.5]);
        assert!(attribute_bce(&p, &t(&[0.0, 0.3])).is_err());
    }

    #[test]
    fn wgan_examples() {
        let (g, d) = wgan_terms(&t(&[0.8]), &t(&[0.3])).unwrap();
        assert!((s(&g) + 0.3).abs() < 1e-12);
        assert!((s(&d) + 0.5).abs() < 1e-12);
        let (_, d) = wgan_terms(&t(&[0.5, 0.25]), &t(&[0.25, 0.5])).unwrap();
        assert_eq!(s(&d), 0.0);
    }

    #[test]
    fn mode_seeking_cases() {
        let y1 = t(&[0.0, 0.0]);
        let y2 = t(&[0.2, -0.2]);
        let v1 = t(&[0.0, 0.0]);
        let v2 = t(&[0.5, -0.5]);
        let r = s(&mode_seeking(&y1, &y2, &v1, &v2, MODE_SEEK_EPS).unwrap());
        assert!((r - 0.5 / (0.2 + 1e-5)).abs() < 1e-9);
        assert_eq!(s(&mode_seeking(&y1, &y2, &v1, &v1, MODE_SEEK_EPS).unwrap()), 0.0);
        let r = s(&mode_seeking(&y1, &y1, &v1, &v2, MODE_SEEK_EPS).unwrap());
        assert!((r - 0.5 / 1e-5).abs() < 1e-6 && r.is_finite());
    }

    #[test]
    fn weighted_total_flags_divergence() {
        assert!(matches!(
            weighted_total(&[("a", f64::NAN)], &[1.0]),
            Err(Error::Divergence { .. })
        ));
        assert_eq!(weighted_total(&[], &[]).unwrap(), 0.0);
    }
}
