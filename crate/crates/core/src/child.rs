//! Children domain: progressive generator conditioned on `(g, e, v)`, the
//! two-headed discriminator, the latent-space inverse encoder, and their losses.

use candle_core::Tensor;
use rand_chacha::ChaCha8Rng;

use crate::arch::ArchConfig;
use crate::error::{Error, Result};
use crate::factors::EXTERNAL_DIM;
use crate::losses;
use crate::nn::{self, Conv2d, Linear, PRelu, ParamStore, Scope};
use crate::parent::{adversarial_terms, AdversarialTerms, ImageDiscriminator, Lipschitz, LEVELS};

pub use crate::losses::MODE_SEEK_EPS;

pub type ChildDiscriminator = ImageDiscriminator;

const BASE_RES: usize = 4;
/// Lowest resolution of the progressive schedule.
pub const GROWTH_START: usize = 16;

/// Current output stage of the progressive generator. Below the final
/// resolution the stage output is upsampled so callers always see full-size images.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Growth {
    pub resolution: usize,
    /// Blend between the previous stage (0) and this stage (1).
    pub alpha: f64,
}

impl Growth {
    pub fn full(resolution: usize) -> Self {
        Self { resolution, alpha: 1.0 }
    }

    /// Stage for `progress ∈ [0, 1]` through training: resolutions double from 16,
    /// each stage gets an equal share, and all but the first fade in over their
    /// first half.
    pub fn schedule(final_res: usize, progress: f64) -> Self {
        let start = GROWTH_START.min(final_res);
        let stages = (final_res / start).trailing_zeros() as usize + 1;
        let p = progress.clamp(0.0, 1.0) * stages as f64;
        let idx = (p.floor() as usize).min(stages - 1);
        let within = p - idx as f64;
        let alpha = if idx == 0 { 1.0 } else { (within * 2.0).min(1.0) };
        Self {
            resolution: start << idx,
            alpha,
        }
    }
}

#[derive(Clone, Debug)]
struct GenBlock {
    conv: Conv2d,
    act: PRelu,
}

impl GenBlock {
    fn new(scope: &mut Scope, in_ch: usize, out_ch: usize) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(&mut scope.sub("conv"), in_ch, out_ch, 3, 1, 1)?,
            act: PRelu::new(&mut scope.sub("prelu"), out_ch)?,
        })
    }

    fn forward(&self, xs: &Tensor) -> Result<Tensor> {
        self.act.forward(&nn::pixel_norm(&self.conv.forward(xs)?)?)
    }
}

/// `G_Y`: dense projection of `[g, e, v]` to a 4×4 grid, then upsample/conv blocks
/// with pixel normalization and PReLU, with an RGB head at every resolution ≥ 16.
#[derive(Clone, Debug)]
pub struct ChildGenerator {
    arch: ArchConfig,
    input: Linear,
    input_act: PRelu,
    base: GenBlock,
    blocks: Vec<GenBlock>,
    /// `(resolution, head)` pairs, ascending.
    to_rgb: Vec<(usize, Conv2d)>,
    frozen: bool,
    store: ParamStore,
}

impl ChildGenerator {
    pub fn new(arch: &ArchConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut root = Scope::root(&mut store, rng);
        let n_in = arch.d_g + EXTERNAL_DIM + arch.d_v;
        let c0 = arch.child_channels(BASE_RES);
        let input = Linear::new(&mut root.sub("input"), n_in, c0 * BASE_RES * BASE_RES)?;
        let input_act = PRelu::new(&mut root.sub("input_prelu"), c0)?;
        let base = GenBlock::new(&mut root.sub("base"), c0, c0)?;
        let mut blocks = Vec::new();
        let mut to_rgb = Vec::new();
        let mut res = BASE_RES;
        while res < arch.resolution {
            let (cin, cout) = (arch.child_channels(res), arch.child_channels(res * 2));
            res *= 2;
            blocks.push(GenBlock::new(&mut root.sub(format!("up{res}")), cin, cout)?);
            if res >= GROWTH_START.min(arch.resolution) {
                to_rgb.push((res, Conv2d::new(&mut root.sub(format!("rgb{res}")), cout, 3, 1, 1, 0)?));
            }
        }
        Ok(Self {
            arch: arch.clone(),
            input,
            input_act,
            base,
            blocks,
            to_rgb,
            frozen: false,
            store,
        })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    /// Marks the generator as fixed: outputs are detached from its parameters.
    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn unfreeze(&mut self) {
        self.frozen = false;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn forward(&self, g: &Tensor, e: &Tensor, v: &Tensor) -> Result<Tensor> {
        self.forward_at(g, e, v, Growth::full(self.arch.resolution))
    }

    pub fn forward_at(&self, g: &Tensor, e: &Tensor, v: &Tensor, growth: Growth) -> Result<Tensor> {
        let n = self.arch.check_genetic(g)?;
        self.arch.check_external(e, n)?;
        self.arch.check_variety(v, n)?;
        let z = Tensor::cat(&[g, &e.to_dtype(g.dtype())?, v], 1)?;
        let c0 = self.arch.child_channels(BASE_RES);
        let h = self.input.forward(&z)?.reshape((n, c0, BASE_RES, BASE_RES))?;
        let mut h = self.base.forward(&self.input_act.forward(&nn::pixel_norm(&h)?)?)?;
        let mut res = BASE_RES;
        let mut prev: Option<Tensor> = None;
        for block in &self.blocks {
            if res >= growth.resolution {
                break;
            }
            prev = Some(h.clone());
            h = block.forward(&nn::upsample2(&h)?)?;
            res *= 2;
        }
        let mut out = self.rgb(res, &h)?;
        if growth.alpha < 1.0 && res > GROWTH_START.min(self.arch.resolution) {
            let low = self.rgb(res / 2, prev.as_ref().expect("previous stage exists"))?;
            out = ((nn::upsample2(&low)? * (1.0 - growth.alpha))? + (out * growth.alpha)?)?;
        }
        let mut out = nn::tanh(&out)?;
        while out.dim(2)? < self.arch.resolution {
            out = nn::upsample2(&out)?;
        }
        Ok(if self.frozen { out.detach() } else { out })
    }

    fn rgb(&self, res: usize, h: &Tensor) -> Result<Tensor> {
        let head = self
            .to_rgb
            .iter()
            .find(|(r, _)| *r == res)
            .map(|(_, c)| c)
            .ok_or_else(|| Error::Argument(format!("no RGB head at resolution {res}")))?;
        head.forward(h)
    }
}

/// `E_Y`: five downsampling stages like the critic trunk (4×4 stride-2 conv), each
/// followed by a 3×3 conv, then a linear head.
#[derive(Clone, Debug)]
pub struct ChildInverseEncoder {
    arch: ArchConfig,
    stages: Vec<[Conv2d; 2]>,
    head: Linear,
    store: ParamStore,
}

impl ChildInverseEncoder {
    pub fn new(arch: &ArchConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut root = Scope::root(&mut store, rng);
        let mut stages = Vec::with_capacity(LEVELS);
        let mut in_ch = 3;
        for i in 0..LEVELS {
            let out = arch.inverse_channels(i);
            let mut s = root.sub(format!("stage{i}"));
            stages.push([
                Conv2d::new(&mut s.sub("down"), in_ch, out, 4, 2, 1)?,
                Conv2d::new(&mut s.sub("conv"), out, out, 3, 1, 1)?,
            ]);
            in_ch = out;
        }
        let flat = in_ch * arch.bottleneck() * arch.bottleneck();
        let head = Linear::new(&mut root.sub("head"), flat, arch.d_g)?;
        Ok(Self {
            arch: arch.clone(),
            stages,
            head,
            store,
        })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn forward(&self, xs: &Tensor) -> Result<Tensor> {
        self.arch.check_images(xs)?;
        let mut h = xs.clone();
        for [a, b] in &self.stages {
            h = nn::leaky_relu(&a.forward(&h)?)?;
            h = nn::leaky_relu(&b.forward(&h)?)?;
        }
        self.head.forward(&h.flatten_from(1)?)
    }
}

pub fn loss_child_adv(
    d_y: &ChildDiscriminator,
    y: &Tensor,
    y_hat: &Tensor,
    lipschitz: Lipschitz,
    alpha: &Tensor,
) -> Result<AdversarialTerms> {
    adversarial_terms(|t| d_y.critic_only(t), y, y_hat, lipschitz, alpha)
}

pub fn loss_child_cls(d_y: &ChildDiscriminator, y: &Tensor, y_hat: &Tensor, e: &Tensor) -> Result<Tensor> {
    losses::classification_loss(&d_y.forward(y)?.probs, &d_y.forward(y_hat)?.probs, e)
}

pub fn loss_mode_seeking(y1: &Tensor, y2: &Tensor, v1: &Tensor, v2: &Tensor, eps: f64) -> Result<Tensor> {
    losses::mode_seeking(y1, y2, v1, v2, eps)
}

/// `mean |g − E_Y(G_Y(g, e, v))|` with `G_Y` frozen.
pub fn loss_inverse(
    e_y: &ChildInverseEncoder,
    g_y: &ChildGenerator,
    g: &Tensor,
    e: &Tensor,
    v: &Tensor,
) -> Result<Tensor> {
    if !g_y.is_frozen() {
        return Err(Error::Contract("inverse loss requires a frozen child generator".into()));
    }
    let recovered = e_y.forward(&g_y.forward(g, e, v)?)?;
    losses::l1(g, &recovered)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChildWeights {
    pub adv: f64,
    pub cls: f64,
    pub mode_seek: f64,
}

impl Default for ChildWeights {
    fn default() -> Self {
        Self {
            adv: 1.0,
            cls: 1.0,
            mode_seek: 5.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChildTerms {
    pub adv: f64,
    pub cls: f64,
    pub mode_seek: f64,
}

pub fn loss_child_total(terms: &ChildTerms, weights: &ChildWeights) -> Result<f64> {
    losses::weighted_total(
        &[
            ("child_adv", terms.adv),
            ("child_cls", terms.cls),
            ("child_mode_seek", terms.mode_seek),
        ],
        &[weights.adv, weights.cls, weights.mode_seek],
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};
    use rand::SeedableRng;

    fn zeros(shape: (usize, usize)) -> Tensor {
        Tensor::zeros(shape, DType::F32, &Device::Cpu).unwrap()
    }

    #[test]
    fn schedule_stages() {
        assert_eq!(Growth::schedule(32, 0.0), Growth { resolution: 16, alpha: 1.0 });
        assert_eq!(Growth::schedule(32, 0.5), Growth { resolution: 32, alpha: 0.0 });
        assert_eq!(Growth::schedule(32, 0.75), Growth { resolution: 32, alpha: 1.0 });
        assert_eq!(Growth::schedule(32, 1.0), Growth::full(32));
        assert_eq!(Growth::schedule(128, 0.0).resolution, 16);
        assert_eq!(Growth::schedule(128, 0.99).resolution, 128);
    }

    #[test]
    fn generator_shapes_at_every_stage() {
        let a = ArchConfig::toy();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let gen = ChildGenerator::new(&a, &mut rng).unwrap();
        let (g, e, v) = (zeros((3, a.d_g)), zeros((3, 4)), zeros((3, a.d_v)));
        for growth in [Growth { resolution: 16, alpha: 1.0 }, Growth { resolution: 32, alpha: 0.3 }, Growth::full(32)] {
            let y = gen.forward_at(&g, &e, &v, growth).unwrap();
            assert_eq!(y.dims(), &[3, 3, 32, 32]);
        }
        assert!(matches!(gen.forward(&g, &e, &zeros((3, a.d_v + 1))), Err(Error::Shape(_))));
    }

    #[test]
    fn inverse_requires_frozen_generator() {
        let a = ArchConfig::toy();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut gen = ChildGenerator::new(&a, &mut rng).unwrap();
        let enc = ChildInverseEncoder::new(&a, &mut rng).unwrap();
        let (g, e, v) = (zeros((2, a.d_g)), zeros((2, 4)), zeros((2, a.d_v)));
        assert!(matches!(loss_inverse(&enc, &gen, &g, &e, &v), Err(Error::Contract(_))));
        gen.freeze();
        let l = loss_inverse(&enc, &gen, &g, &e, &v).unwrap();
        let grads = l.backward().unwrap();
        assert!(gen.store().params().all(|(_, p)| grads.get(p.as_tensor()).is_none()));
    }

    #[test]
    fn total_matches_hand_sum() {
        let t = ChildTerms {
            adv: 0.2,
            cls: 0.1,
            mode_seek: 0.4,
        };
        assert!((loss_child_total(&t, &ChildWeights::default()).unwrap() - 2.3).abs() < 1e-12);
        let off = ChildWeights {
            mode_seek: 0.0,
            ..ChildWeights::default()
        };
        assert!((loss_child_total(&t, &off).unwrap() - 0.3).abs() < 1e-12);
    }
}
