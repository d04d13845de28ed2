//! Genetic, external and variety latent factors.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::data::{AttributeSet, Attribute, Domain};
use crate::error::{Error, Result};

pub const DEFAULT_GENETIC_DIM: usize = 480;
pub const DEFAULT_VARIETY_DIM: usize = 32;
pub const EXTERNAL_DIM: usize = 4;

const FACTOR_MAGIC: &[u8; 4] = b"CPF1";

/// Identity-carrying latent vector; the only factor shared across domains.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneticFactor {
    pub values: Vec<f32>,
    pub domain: Domain,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExternalFactor {
    pub values: [u8; EXTERNAL_DIM],
    pub domain: Domain,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VarietyFactor {
    pub values: Vec<f32>,
}

/// Standard-normal reference sample for the genetic-factor critic.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianReference {
    pub values: Vec<f32>,
}

impl GeneticFactor {
    pub fn new(values: Vec<f32>, domain: Domain) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("genetic factor", "non-finite entry"));
        }
        Ok(Self { values, domain })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn mean_abs_diff(&self, other: &GeneticFactor) -> f64 {
        mean_abs_diff(&self.values, &other.values)
    }
}

impl ExternalFactor {
    pub fn as_f32(&self) -> [f32; EXTERNAL_DIM] {
        self.values.map(f32::from)
    }

    /// Copy with bit `index` flipped.
    pub fn toggled(&self, index: usize) -> Self {
        let mut values = self.values;
        values[index] ^= 1;
        Self {
            values,
            domain: self.domain,
        }
    }

    pub fn random<R: Rng>(domain: Domain, rng: &mut R) -> Self {
        let mut values = [0u8; EXTERNAL_DIM];
        for v in &mut values {
            *v = u8::from(rng.gen_bool(0.5));
        }
        Self { values, domain }
    }
}

pub(crate) fn mean_abs_diff(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| f64::from((x - y).abs())).sum::<f64>() / a.len().max(1) as f64
}

fn check_dim(d: usize, what: &str) -> Result<()> {
    if d < 1 {
        return Err(Error::Argument(format!("{what} dimension must be at least 1")));
    }
    Ok(())
}

pub fn sample_genetic<R: Rng>(d_g: usize, domain: Domain, rng: &mut R) -> Result<GeneticFactor> {
    check_dim(d_g, "genetic")?;
    let values = (0..d_g).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
    GeneticFactor::new(values, domain)
}

pub fn sample_variety<R: Rng>(d_v: usize, rng: &mut R) -> Result<VarietyFactor> {
    check_dim(d_v, "variety")?;
    Ok(VarietyFactor {
        values: (0..d_v).map(|_| rng.gen_range(-1.0f32..=1.0)).collect(),
    })
}

pub fn sample_reference<R: Rng>(d_g: usize, rng: &mut R) -> Result<GaussianReference> {
    check_dim(d_g, "genetic")?;
    Ok(GaussianReference {
        values: (0..d_g).map(|_| rng.sample::<f32, _>(StandardNormal)).collect(),
    })
}

/// Projects an attribute set onto the domain's four trained attributes, in order.
pub fn external_from_attrs(attrs: &AttributeSet) -> Result<ExternalFactor> {
    let order = Attribute::trained(attrs.domain);
    let mut values = [0u8; EXTERNAL_DIM];
    for (slot, attr) in values.iter_mut().zip(order) {
        let v = attrs
            .get(attr)
            .ok_or_else(|| Error::validation("external factor", format!("missing attribute {attr}")))?;
        if v > 1 {
            return Err(Error::validation("external factor", format!("attribute {attr} = {v}")));
        }
        *slot = v;
    }
    Ok(ExternalFactor {
        values,
        domain: attrs.domain,
    })
}

/// Standardizes to zero mean and unit population standard deviation.
pub fn normalize_genetic(g: &GeneticFactor) -> Result<GeneticFactor> {
    let n = g.values.len() as f64;
    let mean = g.values.iter().map(|&v| f64::from(v)).sum::<f64>() / n;
    let var = g
        .values
        .iter()
        .map(|&v| (f64::from(v) - mean).powi(2))
        .sum::<f64>()
        / n;
    if !(var > 0.0) {
        return Err(Error::Degenerate("genetic factor has zero variance".into()));
    }
    let sd = var.sqrt();
    let values = g.values.iter().map(|&v| ((f64::from(v) - mean) / sd) as f32).collect();
    GeneticFactor::new(values, g.domain)
}

/// Little-endian `f32` array after an 8-byte header: magic then `u32` length.
pub fn encode_factor(values: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * values.len());
    out.extend_from_slice(FACTOR_MAGIC);
    out.extend_from_slice(&(values.len() as u32).to_le_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_factor(bytes: &[u8]) -> Result<Vec<f32>> {
    if bytes.len() < 8 || &bytes[..4] != FACTOR_MAGIC {
        return Err(Error::validation("factor blob", "bad header"));
    }
    let d = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let body = &bytes[8..];
    if body.len() != 4 * d {
        return Err(Error::Shape(format!("factor blob holds {} bytes for d = {d}", body.len())));
    }
    Ok(body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn genetic_shape_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut clone = rng.clone();
        let a = sample_genetic(480, Domain::Parent, &mut rng).unwrap();
        let b = sample_genetic(480, Domain::Parent, &mut clone).unwrap();
        assert_eq!(a.dim(), 480);
        assert_eq!(a, b);
        assert!(sample_genetic(0, Domain::Parent, &mut rng).is_err());
    }

    #[test]
    fn genetic_moments() {
        // 1e5 draws per dimension; 4σ bounds: mean ±0.0127, variance ±0.018.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d = 4;
        let n = 100_000;
        let mut sum = vec![0.0f64; d];
        let mut sq = vec![0.0f64; d];
        for _ in 0..n {
            let g = sample_genetic(d, Domain::Child, &mut rng).unwrap();
            for (i, v) in g.values.iter().enumerate() {
                sum[i] += f64::from(*v);
                sq[i] += f64::from(*v).powi(2);
            }
        }
        for i in 0..d {
            let mean = sum[i] / n as f64;
            let var = sq[i] / n as f64 - mean * mean;
            assert!(mean.abs() <= 0.02, "mean {mean}");
            assert!((0.96..=1.04).contains(&var), "var {var}");
        }
    }

    #[test]
    fn variety_range_and_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let v = sample_variety(32, &mut rng).unwrap();
        assert_eq!(v.values.len(), 32);
        let mut total = 0.0f64;
        let n = 100_000;
        for _ in 0..n {
            let v = sample_variety(1, &mut rng).unwrap();
            assert!((-1.0..=1.0).contains(&v.values[0]));
            total += f64::from(v.values[0]);
        }
        assert!((total / n as f64).abs() <= 0.01);
        let mut a = ChaCha8Rng::seed_from_u64(8);
        let mut b = a.clone();
        assert_eq!(sample_variety(8, &mut a).unwrap(), sample_variety(8, &mut b).unwrap());
    }

    #[test]
    fn external_ordering_contract() {
        let zeros = AttributeSet::zeros(Domain::Parent);
        assert_eq!(external_from_attrs(&zeros).unwrap().values, [0, 0, 0, 0]);
        let parent = zeros
            .clone()
            .with(Attribute::Gender, 1)
            .with(Attribute::Glasses, 1)
            .with(Attribute::Expression, 1);
        assert_eq!(external_from_attrs(&parent).unwrap().values, [1, 0, 1, 1]);
        let child = AttributeSet::zeros(Domain::Child)
            .with(Attribute::Moustache, 1)
            .with(Attribute::SkinColor, 1)
            .with(Attribute::Age, 1);
        assert_eq!(external_from_attrs(&child).unwrap().values, [1, 0, 0, 0]);
        assert!(external_from_attrs(&AttributeSet::new(Domain::Child)).is_err());
    }

    #[test]
    fn normalize_closed_forms() {
        let g = GeneticFactor::new(vec![2.0, 4.0], Domain::Child).unwrap();
        assert_eq!(normalize_genetic(&g).unwrap().values, vec![-1.0, 1.0]);
        let unit = GeneticFactor::new(vec![-1.0, 1.0, -1.0, 1.0], Domain::Child).unwrap();
        let out = normalize_genetic(&unit).unwrap();
        for (a, b) in out.values.iter().zip(&unit.values) {
            assert!((a - b).abs() < 1e-6);
        }
        let flat = GeneticFactor::new(vec![3.0; 5], Domain::Child).unwrap();
        assert!(matches!(normalize_genetic(&flat), Err(Error::Degenerate(_))));
    }

    #[test]
    fn factor_blob_rejects_truncation() {
        let blob = encode_factor(&[1.0, 2.0]);
        assert_eq!(blob.len(), 16);
        assert!(decode_factor(&blob[..12]).is_err());
        assert!(decode_factor(b"nope1234").is_err());
    }

    proptest! {
        #[test]
        fn normalize_is_idempotent(values in prop::collection::vec(-50.0f32..50.0, 2..64)) {
            let g = GeneticFactor::new(values, Domain::Parent).unwrap();
            prop_assume!(normalize_genetic(&g).is_ok());
            let once = normalize_genetic(&g).unwrap();
            prop_assume!(once.values.iter().any(|v| (v - once.values[0]).abs() > 1e-3));
            let twice = normalize_genetic(&once).unwrap();
            for (a, b) in once.values.iter().zip(&twice.values) {
                prop_assert!((a - b).abs() < 1e-5);
            }
        }

        #[test]
        fn factor_blob_round_trips(values in prop::collection::vec(any::<f32>().prop_filter("finite", |v| v.is_finite()), 0..40)) {
            prop_assert_eq!(decode_factor(&encode_factor(&values)).unwrap(), values);
        }
    }
}
