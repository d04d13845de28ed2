//! Parent domain: U-Net encoder/generator pair, image and genetic-factor critics,
//! and the reconstruction / classification / adversarial loss terms.

use candle_core::Tensor;
use rand_chacha::ChaCha8Rng;

use crate::arch::ArchConfig;
use crate::error::{Error, Result};
use crate::losses;
use crate::nn::{self, BatchNorm2d, Conv2d, Linear, NormMode, ParamStore, Scope};

pub const LEVELS: usize = 5;

/// Encoder activations at each of the five downsampling levels, finest first.
#[derive(Clone, Debug)]
pub struct FeatureStack(pub Vec<Tensor>);

impl FeatureStack {
    pub fn detach(&self) -> FeatureStack {
        FeatureStack(self.0.iter().map(Tensor::detach).collect())
    }
}

#[derive(Clone, Debug)]
struct ConvBlock {
    conv: Conv2d,
    norm: BatchNorm2d,
}

impl ConvBlock {
    fn forward(&self, xs: &Tensor, mode: NormMode) -> Result<Tensor> {
        nn::leaky_relu(&self.norm.forward(&self.conv.forward(xs)?, mode)?)
    }
}

/// `E_X`: five stride-2 conv/BN/leaky blocks, global pooling and a linear head.
#[derive(Clone, Debug)]
pub struct ParentEncoder {
    arch: ArchConfig,
    blocks: Vec<ConvBlock>,
    head: Linear,
    store: ParamStore,
}

impl ParentEncoder {
    pub fn new(arch: &ArchConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut root = Scope::root(&mut store, rng);
        let mut blocks = Vec::with_capacity(LEVELS);
        let mut in_ch = 3;
        for i in 0..LEVELS {
            let out = arch.parent_channels(i);
            let mut s = root.sub(format!("block{i}"));
            blocks.push(ConvBlock {
                conv: Conv2d::new(&mut s.sub("conv"), in_ch, out, 4, 2, 1)?,
                norm: BatchNorm2d::new(&mut s.sub("bn"), out)?,
            });
            in_ch = out;
        }
        let head = Linear::new(&mut root.sub("head"), in_ch, arch.d_g)?;
        Ok(Self {
            arch: arch.clone(),
            blocks,
            head,
            store,
        })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    /// Returns the `(N, d_g)` genetic factors and the feature stack.
    pub fn forward(&self, xs: &Tensor, mode: NormMode) -> Result<(Tensor, FeatureStack)> {
        self.arch.check_images(xs)?;
        let mut h = xs.clone();
        let mut stack = Vec::with_capacity(LEVELS);
        for b in &self.blocks {
            h = b.forward(&h, mode)?;
            stack.push(h.clone());
        }
        let pooled = h.mean(3)?.mean(2)?;
        Ok((self.head.forward(&pooled)?, FeatureStack(stack)))
    }
}

/// `G_X`: mirrors the encoder; the genetic factor is projected to the bottleneck
/// grid, the external factor tiled over it, and encoder features concatenated at
/// every level.
#[derive(Clone, Debug)]
pub struct ParentGenerator {
    arch: ArchConfig,
    project: Linear,
    blocks: Vec<ConvBlock>,
    to_rgb: Conv2d,
    store: ParamStore,
}

impl ParentGenerator {
    pub fn new(arch: &ArchConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut root = Scope::root(&mut store, rng);
        let b = arch.bottleneck();
        let top = arch.parent_channels(LEVELS - 1);
        let project = Linear::new(&mut root.sub("project"), arch.d_g, top * b * b)?;
        let mut blocks = Vec::with_capacity(LEVELS);
        // level i consumes the running activation plus encoder level LEVELS-1-i
        let mut h_ch = top + crate::factors::EXTERNAL_DIM;
        for i in 0..LEVELS {
            let skip = arch.parent_channels(LEVELS - 1 - i);
            let out = arch.parent_channels((LEVELS - 2).saturating_sub(i));
            let mut s = root.sub(format!("block{i}"));
            blocks.push(ConvBlock {
                conv: Conv2d::new(&mut s.sub("conv"), h_ch + skip, out, 3, 1, 1)?,
                norm: BatchNorm2d::new(&mut s.sub("bn"), out)?,
            });
            h_ch = out;
        }
        let to_rgb = Conv2d::new(&mut root.sub("to_rgb"), h_ch, 3, 3, 1, 1)?;
        Ok(Self {
            arch: arch.clone(),
            project,
            blocks,
            to_rgb,
            store,
        })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn forward(&self, g: &Tensor, e: &Tensor, skips: &FeatureStack, mode: NormMode) -> Result<Tensor> {
        let n = self.arch.check_genetic(g)?;
        self.arch.check_external(e, n)?;
        if skips.0.len() != LEVELS {
            return Err(Error::Shape(format!("{} skip levels, expected {LEVELS}", skips.0.len())));
        }
        let b = self.arch.bottleneck();
        let top = self.arch.parent_channels(LEVELS - 1);
        let mut h = self.project.forward(g)?.reshape((n, top, b, b))?;
        h = Tensor::cat(&[&h, &nn::tile_spatial(e, b)?], 1)?;
        for (i, block) in self.blocks.iter().enumerate() {
            let skip = &skips.0[LEVELS - 1 - i];
            if skip.dim(0)? != n || skip.dim(2)? != h.dim(2)? {
                return Err(Error::Shape(format!(
                    "skip level {} has shape {:?}, activation {:?}",
                    LEVELS - 1 - i,
                    skip.dims(),
                    h.dims()
                )));
            }
            h = Tensor::cat(&[&h, skip], 1)?;
            h = block.forward(&nn::upsample2(&h)?, mode)?;
        }
        nn::tanh(&self.to_rgb.forward(&h)?)
    }
}

/// Output of a two-headed image discriminator.
#[derive(Clone, Debug)]
pub struct CriticOutput {
    /// `(N,)` unbounded critic scores.
    pub critic: Tensor,
    /// `(N, 4)` attribute probabilities.
    pub probs: Tensor,
}

/// Shared layout for the parent and child image discriminators: five stride-2
/// conv blocks, then a scalar critic head and a sigmoid attribute head.
#[derive(Clone, Debug)]
pub struct ImageDiscriminator {
    arch: ArchConfig,
    blocks: Vec<Conv2d>,
    critic: Linear,
    classifier: Linear,
    store: ParamStore,
}

impl ImageDiscriminator {
    pub fn new(arch: &ArchConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut root = Scope::root(&mut store, rng);
        let mut blocks = Vec::with_capacity(LEVELS);
        let mut in_ch = 3;
        for i in 0..LEVELS {
            let out = arch.critic_channels(i);
            blocks.push(Conv2d::new(&mut root.sub(format!("block{i}")), in_ch, out, 4, 2, 1)?);
            in_ch = out;
        }
        let flat = in_ch * arch.bottleneck() * arch.bottleneck();
        let critic = Linear::new(&mut root.sub("critic"), flat, 1)?;
        let classifier = Linear::new(&mut root.sub("classifier"), flat, crate::factors::EXTERNAL_DIM)?;
        Ok(Self {
            arch: arch.clone(),
            blocks,
            critic,
            classifier,
            store,
        })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    fn trunk(&self, xs: &Tensor) -> Result<Tensor> {
        self.arch.check_images(xs)?;
        let mut h = xs.clone();
        for conv in &self.blocks {
            h = nn::leaky_relu(&conv.forward(&h)?)?;
        }
        Ok(h.flatten_from(1)?)
    }

    pub fn forward(&self, xs: &Tensor) -> Result<CriticOutput> {
        let h = self.trunk(xs)?;
        Ok(CriticOutput {
            critic: self.critic.forward(&h)?.squeeze(1)?,
            probs: nn::sigmoid(&self.classifier.forward(&h)?)?,
        })
    }

    pub fn critic_only(&self, xs: &Tensor) -> Result<Tensor> {
        Ok(self.critic.forward(&self.trunk(xs)?)?.squeeze(1)?)
    }
}

pub type ParentImageDiscriminator = ImageDiscriminator;

/// `D_GX`: two dense leaky blocks and a scalar head over genetic vectors.
#[derive(Clone, Debug)]
pub struct GeneticDiscriminator {
    d_g: usize,
    hidden: [Linear; 2],
    head: Linear,
    store: ParamStore,
}

impl GeneticDiscriminator {
    pub fn new(arch: &ArchConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut root = Scope::root(&mut store, rng);
        let h = arch.d_g.max(64);
        let hidden = [
            Linear::new(&mut root.sub("fc0"), arch.d_g, h)?,
            Linear::new(&mut root.sub("fc1"), h, h)?,
        ];
        let head = Linear::new(&mut root.sub("head"), h, 1)?;
        Ok(Self {
            d_g: arch.d_g,
            hidden,
            head,
            store,
        })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn forward(&self, g: &Tensor) -> Result<Tensor> {
        if g.rank() != 2 || g.dim(1)? != self.d_g {
            return Err(Error::Shape(format!("genetic critic input {:?}, d_g = {}", g.dims(), self.d_g)));
        }
        let mut h = g.clone();
        for fc in &self.hidden {
            h = nn::leaky_relu(&fc.forward(&h)?)?;
        }
        Ok(self.head.forward(&h)?.squeeze(1)?)
    }
}

/// Lipschitz constraint applied to the WGAN critics.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Lipschitz {
    GradientPenalty { weight: f64 },
    WeightClip { limit: f64 },
}

impl Default for Lipschitz {
    fn default() -> Self {
        Lipschitz::GradientPenalty { weight: 10.0 }
    }
}

/// Generator and critic terms of one adversarial loss.
#[derive(Clone, Debug)]
pub struct AdversarialTerms {
    pub g_term: Tensor,
    /// Includes the gradient penalty when one is configured.
    pub d_term: Tensor,
}

/// WGAN terms for critic `critic`, with the Lipschitz regularizer folded into
/// the critic term. `alpha` holds one interpolation weight per sample.
pub fn adversarial_terms<F>(
    critic: F,
    real: &Tensor,
    fake: &Tensor,
    lipschitz: Lipschitz,
    alpha: &Tensor,
) -> Result<AdversarialTerms>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    let (g_term, raw) = losses::wgan_terms(&critic(real)?, &critic(fake)?)?;
    let d_term = match lipschitz {
        Lipschitz::GradientPenalty { weight } if weight > 0.0 => {
            (raw + (nn::gradient_penalty(&critic, real, fake, alpha)? * weight)?)?
        }
        _ => raw,
    };
    Ok(AdversarialTerms { g_term, d_term })
}

/// Mean absolute reconstruction error.
pub fn loss_parent_recon(x: &Tensor, x_hat: &Tensor) -> Result<Tensor> {
    losses::l1(x, x_hat)
}

/// Attribute BCE on the real and generated images through `D_X`'s classifier.
pub fn loss_parent_cls(d_x: &ImageDiscriminator, x: &Tensor, x_hat: &Tensor, e: &Tensor) -> Result<Tensor> {
    losses::classification_loss(&d_x.forward(x)?.probs, &d_x.forward(x_hat)?.probs, e)
}

pub fn loss_parent_adv(
    d_x: &ImageDiscriminator,
    x: &Tensor,
    x_hat: &Tensor,
    lipschitz: Lipschitz,
    alpha: &Tensor,
) -> Result<AdversarialTerms> {
    adversarial_terms(|t| d_x.critic_only(t), x, x_hat, lipschitz, alpha)
}

/// Adversarial terms pulling encoded genetic factors toward `N(0, I)`.
pub fn loss_genetic_adv(
    d_gx: &GeneticDiscriminator,
    g_hat: &Tensor,
    u: &Tensor,
    lipschitz: Lipschitz,
    alpha: &Tensor,
) -> Result<AdversarialTerms> {
    if g_hat.dims() != u.dims() {
        return Err(Error::Shape(format!(
            "encoded factors {:?} vs reference {:?}",
            g_hat.dims(),
            u.dims()
        )));
    }
    adversarial_terms(|t| d_gx.forward(t), u, g_hat, lipschitz, alpha)
}

/// Coefficients of the parent objective: reconstruction, classification, image
/// adversarial, genetic adversarial.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ParentWeights {
    pub recon: f64,
    pub cls: f64,
    pub adv: f64,
    pub gene_adv: f64,
}

impl Default for ParentWeights {
    fn default() -> Self {
        Self {
            recon: 100.0,
            cls: 10.0,
            adv: 1.0,
            gene_adv: 0.1,
        }
    }
}

impl ParentWeights {
    /// Step 1 trains without the genetic-factor adversarial term.
    pub fn for_step(self, step: u8) -> Self {
        if step == 1 {
            Self { gene_adv: 0.0, ..self }
        } else {
            self
        }
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.recon, self.cls, self.adv, self.gene_adv]
    }
}

/// Scalar values of the four parent loss terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ParentTerms {
    pub recon: f64,
    pub cls: f64,
    pub adv: f64,
    pub gene_adv: f64,
}

pub fn loss_parent_total(terms: &ParentTerms, weights: &ParentWeights) -> Result<f64> {
    losses::weighted_total(
        &[
            ("parent_recon", terms.recon),
            ("parent_cls", terms.cls),
            ("parent_adv", terms.adv),
            ("parent_gene_adv", terms.gene_adv),
        ],
        &weights.as_array(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};
    use rand::SeedableRng;

    fn arch() -> ArchConfig {
        ArchConfig::toy()
    }

    #[test]
    fn encoder_generator_shapes() {
        let a = arch();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let enc = ParentEncoder::new(&a, &mut rng).unwrap();
        let gen = ParentGenerator::new(&a, &mut rng).unwrap();
        let x = Tensor::zeros((2, 3, a.resolution, a.resolution), DType::F32, &Device::Cpu).unwrap();
        let (g, stack) = enc.forward(&x, NormMode::Frozen).unwrap();
        assert_eq!(g.dims(), &[2, a.d_g]);
        assert_eq!(stack.0.len(), LEVELS);
        let e = Tensor::zeros((2, 4), DType::F32, &Device::Cpu).unwrap();
        let y = gen.forward(&g, &e, &stack, NormMode::Frozen).unwrap();
        assert_eq!(y.dims(), x.dims());
        let v = y.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!(v.iter().all(|p| p.is_finite() && p.abs() <= 1.0));
        let bad = Tensor::zeros((2, 3), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(gen.forward(&g, &bad, &stack, NormMode::Frozen), Err(Error::Shape(_))));
    }

    #[test]
    fn encoder_rejects_wrong_resolution() {
        let a = arch();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let enc = ParentEncoder::new(&a, &mut rng).unwrap();
        let x = Tensor::zeros((1, 3, 64, 64), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(enc.forward(&x, NormMode::Frozen), Err(Error::Shape(_))));
    }

    #[test]
    fn step_one_drops_genetic_term() {
        let w = ParentWeights::default().for_step(1);
        assert_eq!(w.gene_adv, 0.0);
        assert_eq!(ParentWeights::default().for_step(2).gene_adv, 0.1);
    }

    #[test]
    fn total_matches_hand_sum() {
        let terms = ParentTerms {
            recon: 0.5,
            cls: 0.1,
            adv: 0.2,
            gene_adv: 0.3,
        };
        let v = loss_parent_total(&terms, &ParentWeights::default()).unwrap();
        assert!((v - 51.23).abs() < 1e-9);
    }
}
