//! Quantitative protocol: embedding cosine similarity averaged over groups,
//! group-wise Fréchet distance, pairwise diversity after histogram equalization,
//! and the shuffled parent-child baseline.

pub mod embed;

use std::collections::BTreeSet;
use std::fmt::Write as _;

use image::RgbImage;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::{DatasetManifest, FaceImage};
use crate::error::{Error, Result};
use crate::train::{derive_rng, predict_children, ExternalMode, NetworkBundle};

pub use embed::{EmbedderConfig, IdentityEmbedder};

/// Groups (predictions per family) in the full protocol.
pub const PAPER_GROUPS: usize = 40;
/// Covariance shrinkage used by the protocol when a group has fewer samples than
/// feature dimensions plus one.
pub const DEFAULT_FID_SHRINKAGE: f64 = 0.1;

/// A deterministic face-embedding function with a fixed output length.
pub trait EmbeddingExtractor {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    fn embed(&self, faces: &[&FaceImage]) -> Result<Vec<Vec<f64>>>;
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Protocol(format!("embedding lengths {} and {}", a.len(), b.len())));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Numerical("cosine of a zero embedding".into()));
    }
    Ok(dot / (na * nb))
}

/// Result of the cosine protocol.
#[derive(Clone, Debug, PartialEq)]
pub struct CosineResult {
    pub mean: f64,
    pub per_group: Vec<f64>,
    /// Mean over groups, per family.
    pub per_family: Vec<f64>,
}

/// Embedding-level cosine protocol. `predicted[k][f]` holds the embeddings of
/// group `k`'s predictions for family `f`; `real[f]` the family's real children.
/// Each family/group score is the mean cosine over all predicted × real pairs;
/// families are averaged within a group, then groups are averaged.
pub fn cosine_protocol_embeddings(predicted: &[Vec<Vec<Vec<f64>>>], real: &[Vec<Vec<f64>>]) -> Result<CosineResult> {
    if predicted.is_empty() {
        return Err(Error::Protocol("no prediction groups".into()));
    }
    let n_fam = real.len();
    if n_fam == 0 {
        return Err(Error::Protocol("no families".into()));
    }
    if let Some(f) = real.iter().position(Vec::is_empty) {
        return Err(Error::Protocol(format!("family {f} has no ground-truth child")));
    }
    let mut per_group = Vec::with_capacity(predicted.len());
    let mut per_family = vec![0.0; n_fam];
    for (k, group) in predicted.iter().enumerate() {
        if group.len() != n_fam {
            return Err(Error::Protocol(format!("group {k} covers {} families, expected {n_fam}", group.len())));
        }
        let mut sum = 0.0;
        for (f, (preds, reals)) in group.iter().zip(real).enumerate() {
            if preds.is_empty() {
                return Err(Error::Protocol(format!("group {k} has no prediction for family {f}")));
            }
            let mut s = 0.0;
            for p in preds {
                for r in reals {
                    s += cosine(p, r)?;
                }
            }
            let score = s / (preds.len() * reals.len()) as f64;
            per_family[f] += score / predicted.len() as f64;
            sum += score;
        }
        per_group.push(sum / n_fam as f64);
    }
    let mean = per_group.iter().sum::<f64>() / per_group.len() as f64;
    Ok(CosineResult {
        mean,
        per_group,
        per_family,
    })
}

/// Cosine protocol on images: `predicted_groups[k][f]` are group `k`'s predicted
/// faces for family `f`, `ground_truth[f]` the real children.
pub fn cosine_protocol(
    extractor: &dyn EmbeddingExtractor,
    predicted_groups: &[Vec<Vec<FaceImage>>],
    ground_truth: &[Vec<FaceImage>],
) -> Result<CosineResult> {
    let embed_all = |faces: &[FaceImage]| -> Result<Vec<Vec<f64>>> {
        if faces.is_empty() {
            return Ok(Vec::new());
        }
        let out = extractor.embed(&faces.iter().collect::<Vec<_>>())?;
        if out.iter().any(|e| e.len() != extractor.dim()) {
            return Err(Error::Protocol(format!("{} returned a wrong-length embedding", extractor.name())));
        }
        Ok(out)
    };
    let predicted = predicted_groups
        .iter()
        .map(|g| g.iter().map(|f| embed_all(f)).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    let real = ground_truth.iter().map(|f| embed_all(f)).collect::<Result<Vec<_>>>()?;
    cosine_protocol_embeddings(&predicted, &real)
}

/// Mean cosine over every mismatched `(parent_i, child_j)`, `i ≠ j`: the full
/// shuffled cross-pairing of real parent-child pairs.
pub fn shuffled_baseline_embeddings(pairs: &[(Vec<f64>, Vec<f64>)]) -> Result<f64> {
    if pairs.len() < 2 {
        return Err(Error::Argument("shuffled baseline needs at least two pairs".into()));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for (i, (parent, _)) in pairs.iter().enumerate() {
        for (j, (_, child)) in pairs.iter().enumerate() {
            if i != j {
                sum += cosine(parent, child)?;
                count += 1;
            }
        }
    }
    Ok(sum / count as f64)
}

pub fn shuffled_baseline(extractor: &dyn EmbeddingExtractor, pairs: &[(&FaceImage, &FaceImage)]) -> Result<f64> {
    if pairs.len() < 2 {
        return Err(Error::Argument("shuffled baseline needs at least two pairs".into()));
    }
    let parents = extractor.embed(&pairs.iter().map(|p| p.0).collect::<Vec<_>>())?;
    let children = extractor.embed(&pairs.iter().map(|p| p.1).collect::<Vec<_>>())?;
    shuffled_baseline_embeddings(&parents.into_iter().zip(children).collect::<Vec<_>>())
}

fn moments(xs: &[Vec<f64>], d: usize) -> (DVector<f64>, DMatrix<f64>) {
    let n = xs.len();
    let mut mu = DVector::zeros(d);
    for x in xs {
        mu += DVector::from_column_slice(x);
    }
    mu /= n as f64;
    let mut cov = DMatrix::zeros(d, d);
    for x in xs {
        let c = DVector::from_column_slice(x) - &mu;
        cov += &c * c.transpose();
    }
    cov /= (n - 1) as f64;
    (mu, cov)
}

fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// Fréchet distance between Gaussian fits of two feature sets. When a set has
/// fewer than `dim + 1` samples its covariance is shrunk toward a scaled
/// identity by `shrinkage`; without shrinkage that case is an error.
pub fn fid_features(a: &[Vec<f64>], b: &[Vec<f64>], shrinkage: Option<f64>) -> Result<f64> {
    let d = a.first().map(Vec::len).unwrap_or(0);
    if d == 0 || a.iter().chain(b).any(|x| x.len() != d) {
        return Err(Error::Protocol("feature sets must be non-empty with equal lengths".into()));
    }
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::Argument("each feature set needs at least two samples".into()));
    }
    let fit = |xs: &[Vec<f64>]| -> Result<(DVector<f64>, DMatrix<f64>)> {
        let (mu, mut cov) = moments(xs, d);
        if xs.len() < d + 1 {
            let lambda = shrinkage.ok_or_else(|| {
                Error::Numerical(format!("{} samples for {d} features: covariance is rank-deficient", xs.len()))
            })?;
            let scale = cov.trace() / d as f64;
            cov = cov * (1.0 - lambda) + DMatrix::identity(d, d) * (lambda * scale);
        }
        Ok((mu, cov))
    };
    let (mu1, s1) = fit(a)?;
    let (mu2, s2) = fit(b)?;
    let r1 = sqrt_psd(&s1);
    let inner = &r1 * &s2 * &r1;
    let inner = (&inner + inner.transpose()) * 0.5;
    let tr_sqrt: f64 = SymmetricEigen::new(inner).eigenvalues.iter().map(|l| l.max(0.0).sqrt()).sum();
    let value = (&mu1 - &mu2).norm_squared() + s1.trace() + s2.trace() - 2.0 * tr_sqrt;
    if !value.is_finite() {
        return Err(Error::Numerical("non-finite Fréchet distance".into()));
    }
    Ok(value.max(0.0))
}

pub fn fid(
    set_a: &[&FaceImage],
    set_b: &[&FaceImage],
    feature_fn: &dyn EmbeddingExtractor,
    shrinkage: Option<f64>,
) -> Result<f64> {
    fid_features(&feature_fn.embed(set_a)?, &feature_fn.embed(set_b)?, shrinkage)
}

/// Per-channel histogram equalization of an 8-bit image. A channel with a single
/// occupied level is left unchanged.
pub fn equalize_histogram(image: &RgbImage) -> RgbImage {
    let mut out = image.clone();
    let total = (image.width() * image.height()) as u64;
    for c in 0..3 {
        let mut hist = [0u64; 256];
        for p in image.pixels() {
            hist[p.0[c] as usize] += 1;
        }
        let mut cdf = [0u64; 256];
        let mut acc = 0;
        for (i, h) in hist.iter().enumerate() {
            acc += h;
            cdf[i] = acc;
        }
        let cdf_min = hist.iter().copied().find(|&h| h > 0).unwrap_or(0);
        if total == cdf_min {
            continue;
        }
        let span = (total - cdf_min) as f64;
        let lut: Vec<u8> = cdf
            .iter()
            .map(|&v| ((v.saturating_sub(cdf_min)) as f64 / span * 255.0).round() as u8)
            .collect();
        for p in out.pixels_mut() {
            p.0[c] = lut[p.0[c] as usize];
        }
    }
    out
}

/// Mean absolute difference of two 8-bit images, scaled to `[0, 1]`.
pub fn mean_abs_distance(a: &RgbImage, b: &RgbImage) -> f64 {
    let n = a.as_raw().len().max(1);
    a.as_raw()
        .iter()
        .zip(b.as_raw())
        .map(|(&x, &y)| (f64::from(x) - f64::from(y)).abs())
        .sum::<f64>()
        / (n as f64 * 255.0)
}

pub fn pair_count(n: usize) -> usize {
    n * n.saturating_sub(1) / 2
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiversityResult {
    pub mean: f64,
    pub per_family: Vec<f64>,
    pub pairs_per_family: Vec<usize>,
}

/// Mean pairwise distance among each family's images after per-channel
/// equalization of their 8-bit renderings, averaged over families.
pub fn diversity_protocol(
    families: &[Vec<FaceImage>],
    distance: &dyn Fn(&RgbImage, &RgbImage) -> f64,
) -> Result<DiversityResult> {
    if families.is_empty() {
        return Err(Error::Argument("no families to score".into()));
    }
    let mut per_family = Vec::with_capacity(families.len());
    let mut pairs_per_family = Vec::with_capacity(families.len());
    for (f, imgs) in families.iter().enumerate() {
        if imgs.len() < 2 {
            return Err(Error::Argument(format!("family {f} has {} images; need at least 2", imgs.len())));
        }
        let eq: Vec<RgbImage> = imgs.iter().map(|i| equalize_histogram(&i.to_rgb8())).collect();
        let mut sum = 0.0;
        let mut pairs = 0;
        for i in 0..eq.len() {
            for j in i + 1..eq.len() {
                sum += distance(&eq[i], &eq[j]);
                pairs += 1;
            }
        }
        per_family.push(sum / pairs as f64);
        pairs_per_family.push(pairs);
    }
    Ok(DiversityResult {
        mean: per_family.iter().sum::<f64>() / per_family.len() as f64,
        per_family,
        pairs_per_family,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Cos,
    Fid,
    Lpips,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Cos => "cos",
            Metric::Fid => "fid",
            Metric::Lpips => "lpips",
        }
    }

    /// Comma-separated metric names, e.g. `cos,fid,lpips`.
    pub fn parse_list(s: &str) -> Result<BTreeSet<Metric>> {
        let set = s
            .split(',')
            .map(str::trim)
            .filter(|t| !t.is_empty())
            .map(|t| match t {
                "cos" => Ok(Metric::Cos),
                "fid" => Ok(Metric::Fid),
                "lpips" => Ok(Metric::Lpips),
                other => Err(Error::Argument(format!("unknown metric '{other}'"))),
            })
            .collect::<Result<BTreeSet<_>>>()?;
        if set.is_empty() {
            return Err(Error::Argument("no metrics requested".into()));
        }
        Ok(set)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FamilyScore {
    pub id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cosine: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lpips: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProtocolParams {
    pub groups: usize,
    pub seed: u64,
    pub metrics: Vec<Metric>,
    pub external_mode: String,
    pub extractor: String,
    pub distance: String,
    pub fid_shrinkage: f64,
    pub families: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cosine_mean: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub shuffled_baseline: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fid_mean: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lpips_mean: Option<f64>,
    pub group_count: usize,
    pub per_family: Vec<FamilyScore>,
    pub protocol: ProtocolParams,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Fixed-order summary table.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let row = |s: &mut String, k: &str, v: Option<f64>| {
            if let Some(v) = v {
                writeln!(s, "{k:<18} {v:>10.4}").expect("write to string");
            }
        };
        row(&mut s, "cosine", self.cosine_mean);
        row(&mut s, "shuffled baseline", self.shuffled_baseline);
        row(&mut s, "fid", self.fid_mean);
        row(&mut s, "lpips", self.lpips_mean);
        writeln!(s, "{:<18} {:>10}", "groups", self.group_count).expect("write to string");
        s
    }
}

/// Runs the protocol on a validation manifest: every family with at least one
/// child gets `groups` predictions with the first child's attributes as external
/// factors.
pub fn evaluate(
    bundle: &NetworkBundle,
    manifest: &DatasetManifest,
    extractor: &dyn EmbeddingExtractor,
    groups: usize,
    metrics: &BTreeSet<Metric>,
    seed: u64,
) -> Result<EvalReport> {
    if groups == 0 {
        return Err(Error::Argument("groups must be at least 1".into()));
    }
    if metrics.contains(&Metric::Lpips) && groups < 2 {
        return Err(Error::Argument("diversity needs at least 2 groups".into()));
    }
    let families: Vec<_> = manifest.families.iter().filter(|f| !f.children.is_empty()).collect();
    if families.len() < 2 {
        return Err(Error::Protocol("evaluation needs at least two families with children".into()));
    }
    let mut predictions: Vec<Vec<FaceImage>> = Vec::with_capacity(families.len());
    for (i, fam) in families.iter().enumerate() {
        let mut rng: ChaCha8Rng = derive_rng(seed, "eval", i as u64);
        predictions.push(predict_children(
            bundle,
            &fam.father.image,
            &fam.mother.image,
            groups,
            ExternalMode::GroundTruth,
            Some(&fam.children[0].attrs),
            &mut rng,
        )?);
    }
    let real: Vec<Vec<FaceImage>> = families
        .iter()
        .map(|f| f.children.iter().map(|c| c.image.clone()).collect())
        .collect();
    let by_group: Vec<Vec<Vec<FaceImage>>> = (0..groups)
        .map(|k| predictions.iter().map(|p| vec![p[k].clone()]).collect())
        .collect();

    let mut per_family: Vec<FamilyScore> = families
        .iter()
        .map(|f| FamilyScore {
            id: f.id.clone(),
            cosine: None,
            lpips: None,
        })
        .collect();
    let mut report = EvalReport {
        cosine_mean: None,
        shuffled_baseline: None,
        fid_mean: None,
        lpips_mean: None,
        group_count: groups,
        per_family: Vec::new(),
        protocol: ProtocolParams {
            groups,
            seed,
            metrics: metrics.iter().copied().collect(),
            external_mode: "ground_truth".into(),
            extractor: extractor.name().to_string(),
            distance: "mean_abs_8bit".into(),
            fid_shrinkage: DEFAULT_FID_SHRINKAGE,
            families: families.len(),
        },
    };
    if metrics.contains(&Metric::Cos) {
        let res = cosine_protocol(extractor, &by_group, &real)?;
        for (s, v) in per_family.iter_mut().zip(&res.per_family) {
            s.cosine = Some(*v);
        }
        report.cosine_mean = Some(res.mean);
        let pairs: Vec<(&FaceImage, &FaceImage)> = families
            .iter()
            .map(|f| (&f.father.image, &f.children[0].image))
            .collect();
        report.shuffled_baseline = Some(shuffled_baseline(extractor, &pairs)?);
    }
    if metrics.contains(&Metric::Fid) {
        let real_all: Vec<&FaceImage> = real.iter().flatten().collect();
        let real_feats = extractor.embed(&real_all)?;
        let mut sum = 0.0;
        for group in &by_group {
            let imgs: Vec<&FaceImage> = group.iter().flatten().collect();
            sum += fid_features(&extractor.embed(&imgs)?, &real_feats, Some(DEFAULT_FID_SHRINKAGE))?;
        }
        report.fid_mean = Some(sum / groups as f64);
    }
    if metrics.contains(&Metric::Lpips) {
        let res = diversity_protocol(&predictions, &mean_abs_distance)?;
        for (s, v) in per_family.iter_mut().zip(&res.per_family) {
            s.lpips = Some(*v);
        }
        report.lpips_mean = Some(res.mean);
    }
    for v in [report.cosine_mean, report.shuffled_baseline, report.fid_mean, report.lpips_mean]
        .into_iter()
        .flatten()
    {
        if !v.is_finite() {
            return Err(Error::Numerical("non-finite metric".into()));
        }
    }
    report.per_family = per_family;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_identity_and_orthogonal() {
        let e = vec![vec![vec![vec![1.0, 2.0]]]];
        assert!((cosine_protocol_embeddings(&e, &[vec![vec![1.0, 2.0]]]).unwrap().mean - 1.0).abs() < 1e-12);
        let p = vec![vec![vec![vec![1.0, 0.0]]]];
        assert_eq!(cosine_protocol_embeddings(&p, &[vec![vec![0.0, 3.0]]]).unwrap().mean, 0.0);
    }

    #[test]
    fn cosine_rejects_length_mismatch() {
        let p = vec![vec![vec![vec![1.0, 0.0]]]];
        assert!(matches!(
            cosine_protocol_embeddings(&p, &[vec![vec![0.0, 3.0, 1.0]]]),
            Err(Error::Protocol(_))
        ));
    }

    #[test]
    fn equalize_constant_and_two_level() {
        let c = RgbImage::from_pixel(4, 4, image::Rgb([77, 77, 77]));
        assert_eq!(equalize_histogram(&c), c);
        let mut two = RgbImage::new(4, 2);
        for (x, _, p) in two.enumerate_pixels_mut() {
            let v = if x < 2 { 0 } else { 255 };
            *p = image::Rgb([v, v, v]);
        }
        let out = equalize_histogram(&two);
        let levels: BTreeSet<u8> = out.as_raw().iter().copied().collect();
        assert_eq!(levels, BTreeSet::from([0, 255]));
    }

    #[test]
    fn metric_list_parsing() {
        assert_eq!(Metric::parse_list("cos").unwrap(), BTreeSet::from([Metric::Cos]));
        assert_eq!(Metric::parse_list("lpips,cos,fid").unwrap().len(), 3);
        assert!(Metric::parse_list("cos,psnr").is_err());
    }

    #[test]
    fn fid_without_shrinkage_on_small_sets_is_an_error() {
        let a = vec![vec![0.0, 1.0, 2.0], vec![1.0, 0.0, 2.0]];
        assert!(matches!(fid_features(&a, &a, None), Err(Error::Numerical(_))));
        assert!(fid_features(&a, &a, Some(0.1)).unwrap() < 1e-9);
    }
}
