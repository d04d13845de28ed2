//! The four-step training schedule, network bundle, and child prediction.

use std::collections::{BTreeMap, BTreeSet};

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::arch::ArchConfig;
use crate::batch;
use crate::checkpoint::Checkpoint;
use crate::child::{self, ChildDiscriminator, ChildGenerator, ChildInverseEncoder, ChildWeights, Growth, GROWTH_START};
use crate::config::TrainConfig;
use crate::data::{AttributeSet, DatasetManifest, Domain, FaceImage};
use crate::error::{Error, Result};
use crate::factors::{self, ExternalFactor};
use crate::losses;
use crate::mapper::{self, MappingFunction, BRANCHES};
use crate::nn::{self, Adam, NormMode, ParamStore};
use crate::parent::{self, GeneticDiscriminator, ImageDiscriminator, Lipschitz, ParentEncoder, ParentGenerator};

pub const NETWORKS: [&str; 8] = ["e_x", "g_x", "d_x", "d_gx", "g_y", "d_y", "e_y", "t"];

/// Networks that must exist before `step` can start.
fn prerequisites(step: u8) -> &'static [&'static str] {
    match step {
        2 => &["e_x", "g_x", "d_x", "g_y"],
        3 => &["e_x", "e_y"],
        4 => &NETWORKS,
        _ => &[],
    }
}

/// Networks trained (and checkpointed) by `step`, in addition to earlier ones.
fn trained_by(step: u8) -> &'static [&'static str] {
    match step {
        1 => &["e_x", "g_x", "d_x", "g_y", "d_y"],
        2 => &["e_x", "g_x", "d_x", "d_gx", "e_y"],
        3 => &["t"],
        _ => &NETWORKS,
    }
}

/// Independent generator for a labelled purpose, derived from the run seed.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    derive_rng(seed, label, 0).gen()
}

pub fn derive_rng(seed: u64, label: &str, index: u64) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    h.update(index.to_le_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

/// All eight networks of the pipeline. Which ones hold trained weights is
/// tracked in `present`.
#[derive(Clone, Debug)]
pub struct NetworkBundle {
    pub config: TrainConfig,
    pub e_x: ParentEncoder,
    pub g_x: ParentGenerator,
    pub d_x: ImageDiscriminator,
    pub d_gx: GeneticDiscriminator,
    pub g_y: ChildGenerator,
    pub d_y: ChildDiscriminator,
    pub e_y: ChildInverseEncoder,
    pub t: MappingFunction,
    present: BTreeSet<String>,
}

impl NetworkBundle {
    /// Freshly initialized networks; each draws from its own seeded stream.
    pub fn new(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let a = &config.arch;
        let rng = |name: &str| derive_rng(config.seed, "init", NETWORKS.iter().position(|n| *n == name).unwrap_or(0) as u64);
        Ok(Self {
            config: config.clone(),
            e_x: ParentEncoder::new(a, &mut rng("e_x"))?,
            g_x: ParentGenerator::new(a, &mut rng("g_x"))?,
            d_x: ImageDiscriminator::new(a, &mut rng("d_x"))?,
            d_gx: GeneticDiscriminator::new(a, &mut rng("d_gx"))?,
            g_y: ChildGenerator::new(a, &mut rng("g_y"))?,
            d_y: ImageDiscriminator::new(a, &mut rng("d_y"))?,
            e_y: ChildInverseEncoder::new(a, &mut rng("e_y"))?,
            t: MappingFunction::new(a, config.ablations.single_gene_t, &mut rng("t"))?,
            present: BTreeSet::new(),
        })
    }

    /// Rebuilds the networks stored in `ckpt` using its embedded config.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let config = ckpt.config()?;
        let mut bundle = Self::new(&config)?;
        for net in ckpt.networks() {
            let store = bundle
                .store(&net)
                .ok_or_else(|| Error::Checkpoint(format!("unknown network {net}")))?;
            ckpt.load_store(&net, store)?;
            bundle.present.insert(net);
        }
        Ok(bundle)
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.config.arch
    }

    pub fn store(&self, net: &str) -> Option<&ParamStore> {
        Some(match net {
            "e_x" => self.e_x.store(),
            "g_x" => self.g_x.store(),
            "d_x" => self.d_x.store(),
            "d_gx" => self.d_gx.store(),
            "g_y" => self.g_y.store(),
            "d_y" => self.d_y.store(),
            "e_y" => self.e_y.store(),
            "t" => self.t.store(),
            _ => return None,
        })
    }

    pub fn present(&self) -> &BTreeSet<String> {
        &self.present
    }

    pub fn require(&self, nets: &[&str]) -> Result<()> {
        let missing: Vec<&str> = nets.iter().copied().filter(|n| !self.present.contains(*n)).collect();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::Dependency(format!("checkpoint lacks trained networks: {}", missing.join(", "))))
        }
    }

    pub fn checkpoint(&self, step: u8, epoch: usize, complete: bool) -> Result<Checkpoint> {
        let mut c = Checkpoint::new(step, epoch, complete, &self.config);
        for net in &self.present {
            c.put_store(net, self.store(net).expect("known network"))?;
        }
        Ok(c)
    }

    /// Genetic factors of parent faces, `(N, d_g)`, with frozen normalization.
    pub fn encode_parents(&self, faces: &[&FaceImage]) -> Result<Tensor> {
        let x = self.image_batch(faces)?;
        Ok(self.e_x.forward(&x, NormMode::Frozen)?.0)
    }

    /// Genetic factors recovered from child faces, `(N, d_g)`.
    pub fn encode_children(&self, faces: &[&FaceImage]) -> Result<Tensor> {
        self.e_y.forward(&self.image_batch(faces)?)
    }

    /// The four mapped child factors for each father/mother pair.
    pub fn map(&self, g_father: &Tensor, g_mother: &Tensor) -> Result<Vec<Tensor>> {
        self.t.forward(g_father, g_mother)
    }

    pub fn generate_children(&self, g: &Tensor, e: &Tensor, v: &Tensor) -> Result<Vec<FaceImage>> {
        batch::to_images(&self.g_y.forward(g, e, v)?)
    }

    fn image_batch(&self, faces: &[&FaceImage]) -> Result<Tensor> {
        let r = self.arch().resolution;
        if let Some(f) = faces.iter().find(|f| f.size() != r) {
            return Err(Error::Shape(format!("image is {0}×{0}, model expects {r}×{r}", f.size())));
        }
        batch::images(faces)
    }
}

/// How child external factors are chosen at prediction time.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExternalMode {
    GroundTruth,
    Random,
}

impl std::str::FromStr for ExternalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gt" | "ground_truth" => Ok(Self::GroundTruth),
            "random" => Ok(Self::Random),
            _ => Err(Error::Argument(format!("unknown external mode '{s}'"))),
        }
    }
}

/// `n` child faces for one couple. Sample `i` uses mapped branch `i mod 4` and a
/// fresh variety factor.
pub fn predict_children(
    bundle: &NetworkBundle,
    father: &FaceImage,
    mother: &FaceImage,
    n: usize,
    mode: ExternalMode,
    child_attrs: Option<&AttributeSet>,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<FaceImage>> {
    bundle.require(&["e_x", "t", "g_y"])?;
    if n == 0 {
        return Err(Error::Argument("n must be at least 1".into()));
    }
    let fixed = match (mode, child_attrs) {
        (ExternalMode::GroundTruth, None) => {
            return Err(Error::Argument("ground-truth external mode needs child attributes".into()))
        }
        (ExternalMode::GroundTruth, Some(a)) => {
            if a.domain != Domain::Child {
                return Err(Error::Argument("attributes must be child-domain".into()));
            }
            Some(factors::external_from_attrs(a)?)
        }
        (ExternalMode::Random, _) => None,
    };
    let g = bundle.encode_parents(&[father, mother])?;
    let branches = bundle.map(&g.narrow(0, 0, 1)?, &g.narrow(0, 1, 1)?)?;
    let mut gs = Vec::with_capacity(n);
    let mut es = Vec::with_capacity(n);
    let mut vs = Vec::with_capacity(n);
    for i in 0..n {
        gs.push(branches[i % BRANCHES].clone());
        vs.push(factors::sample_variety(bundle.arch().d_v, rng)?.values);
        es.push(match fixed {
            Some(ref e) => e.clone(),
            None => ExternalFactor::random(Domain::Child, rng),
        });
    }
    let g = Tensor::cat(&gs, 0)?;
    let e = batch::externals(&es.iter().collect::<Vec<_>>())?;
    let v = batch::rows(&vs.iter().map(Vec::as_slice).collect::<Vec<_>>())?;
    bundle.generate_children(&g, &e, &v)
}

/// Child-domain factor varied by a latent walk.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WalkFactor {
    Genetic,
    External,
    Variety,
}

impl std::str::FromStr for WalkFactor {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "genetic" => Ok(Self::Genetic),
            "external" => Ok(Self::External),
            "variety" => Ok(Self::Variety),
            _ => Err(Error::Argument(format!("unknown factor '{s}' (genetic, external, variety)"))),
        }
    }
}

/// Frames of `G_Y` with two factors held at random draws and the third varied.
/// Genetic and variety walks interpolate linearly between two draws over `steps`
/// frames (genetic frames are re-standardized); the external walk is the base
/// frame followed by one frame per toggled bit, so `steps` does not apply.
pub fn latent_walk(bundle: &NetworkBundle, factor: WalkFactor, steps: usize, rng: &mut ChaCha8Rng) -> Result<Vec<FaceImage>> {
    bundle.require(&["g_y"])?;
    if steps < 2 {
        return Err(Error::Argument("a walk needs at least 2 steps".into()));
    }
    let arch = bundle.arch();
    let g = child_genes(1, arch.d_g, rng)?;
    let e = ExternalFactor::random(Domain::Child, rng);
    let v = uniform(1, arch.d_v, -1.0, 1.0, rng)?;
    let lerp = |a: &Tensor, b: &Tensor, n: usize| -> Result<Tensor> {
        let frames = (0..n)
            .map(|i| {
                let t = i as f64 / (n - 1) as f64;
                Ok(((a * (1.0 - t))? + (b * t)?)?)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::cat(&frames, 0)?)
    };
    let (gs, es, vs) = match factor {
        WalkFactor::Genetic => {
            let g2 = child_genes(1, arch.d_g, rng)?;
            let gs = nn::standardize_rows(&lerp(&g, &g2, steps)?)?;
            (gs, vec![e; steps], v.repeat((steps, 1))?)
        }
        WalkFactor::Variety => {
            let v2 = uniform(1, arch.d_v, -1.0, 1.0, rng)?;
            (g.repeat((steps, 1))?, vec![e; steps], lerp(&v, &v2, steps)?)
        }
        WalkFactor::External => {
            let bits = factors::EXTERNAL_DIM;
            let mut es = vec![e.clone()];
            es.extend((0..bits).map(|i| e.toggled(i)));
            (g.repeat((bits + 1, 1))?, es, v.repeat((bits + 1, 1))?)
        }
    };
    let e = batch::externals(&es.iter().collect::<Vec<_>>())?;
    bundle.generate_children(&gs, &e, &vs)
}

/// One logged loss value.
#[derive(Clone, Debug, PartialEq)]
pub struct LossEntry {
    pub step: u8,
    pub epoch: usize,
    pub iter: usize,
    pub name: &'static str,
    pub value: f64,
}

struct Logger<'a> {
    step: u8,
    epoch: usize,
    sink: &'a mut dyn FnMut(&LossEntry),
}

impl Logger<'_> {
    fn record(&mut self, iter: usize, values: &[(&'static str, f64)]) -> Result<()> {
        for &(name, value) in values {
            (self.sink)(&LossEntry {
                step: self.step,
                epoch: self.epoch,
                iter,
                name,
                value,
            });
        }
        if let Some(&(name, value)) = values.iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::Divergence {
                step: self.step,
                epoch: self.epoch,
                loss: name.to_string(),
                value,
                last_good: None,
            });
        }
        Ok(())
    }
}

/// Tensors prepared once per run from the manifest.
struct TrainData {
    parent_images: Tensor,
    parent_ext: Tensor,
    child_images: Tensor,
    child_ext: Tensor,
    /// Families with at least one child: `(father, mother)` rows of `parent_images`
    /// and the child rows assigned to the four branches.
    families: Vec<(u32, u32, [u32; BRANCHES])>,
}

impl TrainData {
    fn new(manifest: &DatasetManifest, arch: &ArchConfig) -> Result<Self> {
        manifest.validate()?;
        if manifest.families.is_empty() {
            return Err(Error::Argument("manifest has no families".into()));
        }
        if let Some(r) = manifest.resolution() {
            if r != arch.resolution {
                return Err(Error::Shape(format!("manifest resolution {r}, config {}", arch.resolution)));
            }
        }
        let mut parents = Vec::new();
        let mut parent_ext = Vec::new();
        let mut children = Vec::new();
        let mut child_ext = Vec::new();
        let mut families = Vec::new();
        for fam in &manifest.families {
            let base = parents.len() as u32;
            for p in [&fam.father, &fam.mother] {
                parents.push(&p.image);
                parent_ext.push(factors::external_from_attrs(&p.attrs)?);
            }
            let first_child = children.len() as u32;
            for c in &fam.children {
                children.push(&c.image);
                child_ext.push(factors::external_from_attrs(&c.attrs)?);
            }
            let rows: Vec<u32> = (first_child..children.len() as u32).collect();
            if let Ok(t) = mapper::assign_ground_truth(&rows) {
                families.push((base, base + 1, t.targets));
            }
        }
        for c in &manifest.unpaired_children {
            children.push(&c.image);
            child_ext.push(factors::external_from_attrs(&c.attrs)?);
        }
        if children.len() < 2 {
            return Err(Error::Argument("need at least two child faces".into()));
        }
        Ok(Self {
            parent_images: batch::images(&parents)?,
            parent_ext: batch::externals(&parent_ext.iter().collect::<Vec<_>>())?,
            child_images: batch::images(&children)?,
            child_ext: batch::externals(&child_ext.iter().collect::<Vec<_>>())?,
            families,
        })
    }
}

/// Shuffled index batches; trailing batches with fewer than two rows are dropped.
fn batches(n: usize, size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<u32>> {
    let mut idx: Vec<u32> = (0..n as u32).collect();
    idx.shuffle(rng);
    idx.chunks(size).filter(|c| c.len() >= 2).map(<[u32]>::to_vec).collect()
}

fn select(t: &Tensor, rows: &[u32]) -> Result<Tensor> {
    let ids = Tensor::from_slice(rows, rows.len(), &Device::Cpu)?;
    Ok(t.index_select(&ids, 0)?)
}

fn gaussian(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let data: Vec<f32> = (0..n * d).map(|_| rng.sample(StandardNormal)).collect();
    Ok(Tensor::from_vec(data, (n, d), &Device::Cpu)?)
}

/// Child-domain genetic factors: Gaussian draws standardized per row, matching
/// the mapping function's output normalization.
fn child_genes(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    nn::standardize_rows(&gaussian(n, d, rng)?)
}

fn uniform(n: usize, d: usize, lo: f32, hi: f32, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let data: Vec<f32> = (0..n * d).map(|_| rng.gen_range(lo..=hi)).collect();
    Ok(Tensor::from_vec(data, (n, d), &Device::Cpu)?)
}

fn random_externals(n: usize, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let es: Vec<ExternalFactor> = (0..n).map(|_| ExternalFactor::random(Domain::Child, rng)).collect();
    batch::externals(&es.iter().collect::<Vec<_>>())
}

/// Mean `|g − E_Y(G_Y(g, e, v))|` over `n` fresh draws from the training law of
/// the child-domain factors.
pub fn inversion_error(bundle: &NetworkBundle, n: usize, rng: &mut ChaCha8Rng) -> Result<f64> {
    let arch = bundle.arch();
    let g = child_genes(n, arch.d_g, rng)?;
    let e = random_externals(n, rng)?;
    let v = uniform(n, arch.d_v, -1.0, 1.0, rng)?;
    let recovered = bundle.e_y.forward(&bundle.g_y.forward(&g, &e, &v)?)?;
    Ok(losses::l1(&g, &recovered)?.to_scalar::<f32>()? as f64)
}

/// Real images shown to the child critic at a growth stage: downsampled to the
/// stage resolution (blended with the previous stage during fade-in), then
/// brought back to full size like the generator output.
fn staged_real(y: &Tensor, growth: Growth) -> Result<Tensor> {
    let full = y.dim(2)?;
    if growth.resolution >= full {
        return Ok(y.clone());
    }
    let f = full / growth.resolution;
    let mut low = y.avg_pool2d(f)?;
    if growth.alpha < 1.0 && growth.resolution > GROWTH_START.min(full) {
        let coarse = nn::upsample2(&y.avg_pool2d(2 * f)?)?;
        low = ((low * growth.alpha)? + (coarse * (1.0 - growth.alpha))?)?;
    }
    Ok(low.upsample_nearest2d(full, full)?)
}

type Optimizers = BTreeMap<&'static str, Adam>;

fn make_optimizers(bundle: &NetworkBundle, step: u8, cfg: &TrainConfig) -> Result<Optimizers> {
    let lr = |net: &str| match (step, net) {
        (1, "g_y" | "d_y") => cfg.lr[1],
        (1, _) => cfg.lr[0],
        (2, "e_y") => cfg.lr[3],
        (2, _) => cfg.lr[2],
        (3, _) => cfg.lr[4],
        _ => cfg.lr[5],
    };
    trained_by(step)
        .iter()
        .map(|&net| {
            let store = bundle.store(net).expect("known network");
            Ok((net, Adam::new(store, lr(net), cfg.beta1, cfg.beta2)?))
        })
        .collect()
}

fn save_optimizers(ckpt: &mut Checkpoint, opts: &Optimizers) -> Result<()> {
    for (net, opt) in opts {
        let (steps, entries) = opt.state();
        ckpt.counters.insert(format!("adam/{net}"), steps);
        for (k, m, v) in entries {
            ckpt.tensors
                .insert(format!("adam_m/{net}/{k}"), crate::checkpoint::Blob::from_tensor(&m)?);
            ckpt.tensors
                .insert(format!("adam_v/{net}/{k}"), crate::checkpoint::Blob::from_tensor(&v)?);
        }
    }
    Ok(())
}

fn load_optimizers(ckpt: &Checkpoint, opts: &mut Optimizers) -> Result<()> {
    for (net, opt) in opts.iter_mut() {
        let steps = *ckpt
            .counters
            .get(&format!("adam/{net}"))
            .ok_or_else(|| Error::Checkpoint(format!("optimizer state for {net} missing")))?;
        let mut entries = BTreeMap::new();
        let prefix = format!("adam_m/{net}/");
        for (key, m) in ckpt.tensors.range(prefix.clone()..) {
            let Some(name) = key.strip_prefix(&prefix) else { break };
            let v = ckpt
                .tensors
                .get(&format!("adam_v/{net}/{name}"))
                .ok_or_else(|| Error::Checkpoint(format!("second moment for {net}/{name} missing")))?;
            entries.insert(name.to_string(), (m.to_tensor()?, v.to_tensor()?));
        }
        opt.load_state(steps, &entries)?;
    }
    Ok(())
}

fn value(t: &Tensor) -> Result<f64> {
    nn::scalar(t)
}

fn apply_lipschitz(store: &ParamStore, lipschitz: Lipschitz) -> Result<()> {
    if let Lipschitz::WeightClip { limit } = lipschitz {
        store.clip(limit)?;
    }
    Ok(())
}

fn add(total: Option<Tensor>, term: Tensor, w: f64) -> Result<Option<Tensor>> {
    if w == 0.0 {
        return Ok(total);
    }
    let term = (term * w)?;
    Ok(Some(match total {
        None => term,
        Some(t) => (t + term)?,
    }))
}

struct Ctx<'a> {
    cfg: &'a TrainConfig,
    step: u8,
    norm: NormMode,
}

/// One parent-domain update. Reconstruction uses each face's own attributes;
/// classification and adversarial terms act on attribute-transferred images
/// whose target attributes are a permutation of the batch's.
fn parent_iteration(
    b: &mut NetworkBundle,
    opts: &mut Optimizers,
    ctx: &Ctx,
    x: &Tensor,
    e: &Tensor,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<(&'static str, f64)>> {
    let w = ctx.cfg.parent_weights(ctx.step);
    let lip = ctx.cfg.lipschitz;
    let n = x.dim(0)?;
    let mut perm: Vec<u32> = (0..n as u32).collect();
    perm.shuffle(rng);
    let e_t = select(e, &perm)?;
    let (g, skips) = b.e_x.forward(x, ctx.norm)?;
    // reconstruction and transfer share one generator pass
    let twice = |t: &Tensor| Tensor::cat(&[t, t], 0);
    let skips2 = parent::FeatureStack(skips.0.iter().map(twice).collect::<candle_core::Result<_>>()?);
    let both = b
        .g_x
        .forward(&twice(&g)?, &Tensor::cat(&[e, &e_t], 0)?, &skips2, ctx.norm)?;
    let x_rec = both.narrow(0, 0, n)?;
    let x_t = both.narrow(0, n, n)?;
    let mut log = Vec::new();

    let fake = x_t.detach();
    for _ in 0..ctx.cfg.critic_steps {
        let alpha = uniform(n, 1, 0.0, 1.0, rng)?.squeeze(1)?;
        let adv = parent::loss_parent_adv(&b.d_x, x, &fake, lip, &alpha)?;
        log.push(("parent_adv_d", value(&adv.d_term)?));
        let mut d_loss = adv.d_term;
        if w.cls > 0.0 {
            let cls_real = losses::attribute_bce(&b.d_x.forward(x)?.probs, e)?;
            log.push(("parent_cls_real", value(&cls_real)?));
            d_loss = (d_loss + cls_real)?;
        }
        opts.get_mut("d_x").expect("d_x optimizer").step(&d_loss.backward()?)?;
        apply_lipschitz(b.d_x.store(), lip)?;
    }
    if w.gene_adv > 0.0 {
        let g_fake = g.detach();
        for _ in 0..ctx.cfg.critic_steps {
            let u = gaussian(n, b.arch().d_g, rng)?;
            let alpha = uniform(n, 1, 0.0, 1.0, rng)?.squeeze(1)?;
            let adv = parent::loss_genetic_adv(&b.d_gx, &g_fake, &u, lip, &alpha)?;
            log.push(("parent_gene_adv_d", value(&adv.d_term)?));
            opts.get_mut("d_gx").expect("d_gx optimizer").step(&adv.d_term.backward()?)?;
            apply_lipschitz(b.d_gx.store(), lip)?;
        }
    }

    let recon = parent::loss_parent_recon(x, &x_rec)?;
    let out = b.d_x.forward(&x_t)?;
    let adv_g = out.critic.mean_all()?.neg()?;
    let mut terms = parent::ParentTerms {
        recon: value(&recon)?,
        cls: 0.0,
        adv: value(&adv_g)?,
        gene_adv: 0.0,
    };
    log.push(("parent_recon", terms.recon));
    log.push(("parent_adv", terms.adv));
    let mut total = add(None, recon, w.recon)?;
    total = add(total, adv_g, w.adv)?;
    if w.cls > 0.0 {
        let cls = losses::attribute_bce(&out.probs, &e_t)?;
        terms.cls = value(&cls)?;
        log.push(("parent_cls", terms.cls));
        total = add(total, cls, w.cls)?;
    }
    if w.gene_adv > 0.0 {
        let gene = b.d_gx.forward(&g)?.mean_all()?.neg()?;
        terms.gene_adv = value(&gene)?;
        log.push(("parent_gene_adv", terms.gene_adv));
        total = add(total, gene, w.gene_adv)?;
    }
    log.push(("parent_total", parent::loss_parent_total(&terms, &w).unwrap_or(f64::NAN)));
    if let Some(total) = total {
        let grads = total.backward()?;
        for net in ["e_x", "g_x"] {
            opts.get_mut(net).expect("parent optimizer").step(&grads)?;
        }
    }
    Ok(log)
}

/// One child-domain GAN update at growth stage `growth`.
fn child_iteration(
    b: &mut NetworkBundle,
    opts: &mut Optimizers,
    ctx: &Ctx,
    y: &Tensor,
    e: &Tensor,
    growth: Growth,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<(&'static str, f64)>> {
    let w: ChildWeights = ctx.cfg.child_weights();
    let lip = ctx.cfg.lipschitz;
    let a = b.arch().clone();
    let n = y.dim(0)?;
    let g = child_genes(n, a.d_g, rng)?;
    let v1 = uniform(n, a.d_v, -1.0, 1.0, rng)?;
    let v2 = uniform(n, a.d_v, -1.0, 1.0, rng)?;
    let (y1, y2) = if w.mode_seek > 0.0 {
        let y = b.g_y.forward_at(
            &Tensor::cat(&[&g, &g], 0)?,
            &Tensor::cat(&[e, e], 0)?,
            &Tensor::cat(&[&v1, &v2], 0)?,
            growth,
        )?;
        (y.narrow(0, 0, n)?, Some(y.narrow(0, n, n)?))
    } else {
        (b.g_y.forward_at(&g, e, &v1, growth)?, None)
    };
    let real = staged_real(y, growth)?;
    let mut log = Vec::new();

    let fake = y1.detach();
    for _ in 0..ctx.cfg.critic_steps {
        let alpha = uniform(n, 1, 0.0, 1.0, rng)?.squeeze(1)?;
        let adv = child::loss_child_adv(&b.d_y, &real, &fake, lip, &alpha)?;
        log.push(("child_adv_d", value(&adv.d_term)?));
        let mut d_loss = adv.d_term;
        if w.cls > 0.0 {
            let cls_real = losses::attribute_bce(&b.d_y.forward(&real)?.probs, e)?;
            log.push(("child_cls_real", value(&cls_real)?));
            d_loss = (d_loss + cls_real)?;
        }
        opts.get_mut("d_y").expect("d_y optimizer").step(&d_loss.backward()?)?;
        apply_lipschitz(b.d_y.store(), lip)?;
    }

    let out = b.d_y.forward(&y1)?;
    let adv_g = out.critic.mean_all()?.neg()?;
    let mut terms = child::ChildTerms {
        adv: value(&adv_g)?,
        cls: 0.0,
        mode_seek: 0.0,
    };
    log.push(("child_adv", terms.adv));
    let mut total = add(None, adv_g, w.adv)?;
    if w.cls > 0.0 {
        let cls = losses::attribute_bce(&out.probs, e)?;
        terms.cls = value(&cls)?;
        log.push(("child_cls", terms.cls));
        total = add(total, cls, w.cls)?;
    }
    if let Some(y2) = y2 {
        let ms = child::loss_mode_seeking(&y1, &y2, &v1, &v2, losses::MODE_SEEK_EPS)?;
        terms.mode_seek = value(&ms)?;
        log.push(("child_mode_seek", terms.mode_seek));
        total = add(total, ms, w.mode_seek)?;
    }
    log.push(("child_total", child::loss_child_total(&terms, &w).unwrap_or(f64::NAN)));
    if let Some(total) = total {
        opts.get_mut("g_y").expect("g_y optimizer").step(&total.backward()?)?;
    }
    Ok(log)
}

/// One update of the inverse encoder on freshly sampled latents.
fn inverse_iteration(
    b: &mut NetworkBundle,
    opts: &mut Optimizers,
    ctx: &Ctx,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<(&'static str, f64)>> {
    let a = b.arch().clone();
    let n = ctx.cfg.batch_size;
    let g = child_genes(n, a.d_g, rng)?;
    let e = random_externals(n, rng)?;
    let v = uniform(n, a.d_v, -1.0, 1.0, rng)?;
    let was_frozen = b.g_y.is_frozen();
    b.g_y.freeze();
    let loss = if ctx.cfg.ablations.inverse_in_image_space {
        let y = b.g_y.forward(&g, &e, &v)?;
        let mut open = b.g_y.clone();
        open.unfreeze();
        let y_rec = open.forward(&b.e_y.forward(&y)?, &e, &v)?;
        losses::l1(&y, &y_rec)
    } else {
        child::loss_inverse(&b.e_y, &b.g_y, &g, &e, &v)
    };
    if !was_frozen {
        b.g_y.unfreeze();
    }
    let loss = loss?;
    let log = vec![("inverse", value(&loss)?)];
    opts.get_mut("e_y").expect("e_y optimizer").step(&loss.backward()?)?;
    Ok(log)
}

fn mapping_update(
    b: &NetworkBundle,
    opts: &mut Optimizers,
    ctx: &Ctx,
    g_f: &Tensor,
    g_m: &Tensor,
    targets: &[Tensor],
) -> Result<Vec<(&'static str, f64)>> {
    let preds = b.t.forward(g_f, g_m)?;
    let loss = mapper::loss_mapping(&preds, targets, ctx.cfg.branch_weights())?;
    let log = vec![("mapping", value(&loss)?)];
    let grads = loss.backward()?;
    let nets: &[&str] = if ctx.step == 4 { &["t", "e_x"] } else { &["t"] };
    for net in nets {
        opts.get_mut(net).expect("mapping optimizer").step(&grads)?;
    }
    Ok(log)
}

/// Branch targets for a batch of families: child factors recovered by `E_Y`,
/// standardized per row and detached.
fn family_targets(b: &NetworkBundle, data: &TrainData, fams: &[u32]) -> Result<Vec<Tensor>> {
    (0..BRANCHES)
        .map(|j| {
            let rows: Vec<u32> = fams.iter().map(|&f| data.families[f as usize].2[j]).collect();
            let g = b.e_y.forward(&select(&data.child_images, &rows)?)?;
            Ok(nn::standardize_rows(&g)?.detach())
        })
        .collect()
}

fn family_parents(data: &TrainData, fams: &[u32]) -> (Vec<u32>, Vec<u32>) {
    fams.iter()
        .map(|&f| {
            let (fa, mo, _) = data.families[f as usize];
            (fa, mo)
        })
        .unzip()
}

/// Runs training step `step` (1 to 4) and returns its final checkpoint.
///
/// `resume` is either the complete checkpoint of step `step - 1`, or an
/// incomplete checkpoint of `step` itself to continue from. Every loss value is
/// passed to `log` as it is computed.
pub fn run_step(
    step: u8,
    config: &TrainConfig,
    manifest: &DatasetManifest,
    resume: Option<&Checkpoint>,
    log: &mut dyn FnMut(&LossEntry),
) -> Result<Checkpoint> {
    if !(1..=4).contains(&step) {
        return Err(Error::Argument(format!("step must be 1 to 4, got {step}")));
    }
    config.validate()?;
    nn::enable_second_order();
    let (mut bundle, start_epoch, continuing) = match resume {
        None if step == 1 => (NetworkBundle::new(config)?, 0, false),
        None => return Err(Error::Dependency(format!("step {step} needs the step {} checkpoint", step - 1))),
        Some(c) => {
            let continuing = c.step == step && !c.complete;
            if !continuing && !(c.step + 1 == step && c.complete) {
                return Err(Error::Dependency(format!(
                    "step {step} needs a complete step {} checkpoint, got step {} ({})",
                    step - 1,
                    c.step,
                    if c.complete { "complete" } else { "incomplete" }
                )));
            }
            if c.config()?.arch != config.arch {
                return Err(Error::Config("checkpoint architecture differs from config".into()));
            }
            let mut b = NetworkBundle::from_checkpoint(c)?;
            b.config = config.clone();
            b.t = if b.present.contains("t") {
                b.t
            } else {
                MappingFunction::new(&config.arch, config.ablations.single_gene_t, &mut derive_rng(config.seed, "init", 7))?
            };
            b.require(prerequisites(step))?;
            (b, if continuing { c.epoch } else { 0 }, continuing)
        }
    };
    let data = TrainData::new(manifest, &config.arch)?;
    if step >= 3 && data.families.len() < 2 {
        return Err(Error::NoTarget("fewer than two families with children".into()));
    }
    let mut opts = make_optimizers(&bundle, step, config)?;
    if continuing {
        load_optimizers(resume.expect("continuing implies resume"), &mut opts)?;
    }
    for net in trained_by(step) {
        bundle.present.insert(net.to_string());
    }
    let epochs = config.epochs[step as usize - 1];
    let mut last_good = resume.cloned();
    let mut step3_inputs = None;
    for epoch in start_epoch..epochs {
        let mut logger = Logger {
            step,
            epoch,
            sink: &mut *log,
        };
        let result = match step {
            1 => step1_epoch(&mut bundle, &mut opts, config, &data, epoch, &mut logger),
            2 => step2_epoch(&mut bundle, &mut opts, config, &data, epoch, &mut logger),
            3 => {
                if step3_inputs.is_none() {
                    step3_inputs = Some(mapping_inputs(&bundle, &data)?);
                }
                step3_epoch(&bundle, &mut opts, config, step3_inputs.as_ref().expect("set above"), epoch, &mut logger)
            }
            _ => step4_epoch(&mut bundle, &mut opts, config, &data, epoch, &mut logger),
        };
        if let Err(e) = result {
            return Err(match e {
                Error::Divergence {
                    step, epoch, loss, value, ..
                } => Error::Divergence {
                    step,
                    epoch,
                    loss,
                    value,
                    last_good: last_good.map(Box::new),
                },
                other => other,
            });
        }
        let mut snap = bundle.checkpoint(step, epoch + 1, epoch + 1 == epochs)?;
        save_optimizers(&mut snap, &opts)?;
        last_good = Some(snap);
    }
    match last_good {
        Some(c) if c.step == step && c.complete => Ok(c),
        _ => {
            let mut c = bundle.checkpoint(step, epochs, true)?;
            save_optimizers(&mut c, &opts)?;
            Ok(c)
        }
    }
}

/// Runs steps 1 through 4 in order, calling `on_checkpoint` after each.
pub fn run_all(
    config: &TrainConfig,
    manifest: &DatasetManifest,
    log: &mut dyn FnMut(&LossEntry),
    on_checkpoint: &mut dyn FnMut(&Checkpoint) -> Result<()>,
) -> Result<Checkpoint> {
    let mut prev: Option<Checkpoint> = None;
    for step in 1..=4 {
        let c = run_step(step, config, manifest, prev.as_ref(), log)?;
        on_checkpoint(&c)?;
        prev = Some(c);
    }
    Ok(prev.expect("four steps ran"))
}

fn child_batches_per_epoch(cfg: &TrainConfig, data: &TrainData) -> usize {
    let n = data.child_images.dim(0).unwrap_or(0);
    (n / cfg.batch_size + usize::from(n % cfg.batch_size >= 2)).max(1)
}

fn step1_epoch(
    b: &mut NetworkBundle,
    opts: &mut Optimizers,
    cfg: &TrainConfig,
    data: &TrainData,
    epoch: usize,
    logger: &mut Logger,
) -> Result<()> {
    let ctx = Ctx {
        cfg,
        step: 1,
        norm: NormMode::Train,
    };
    let mut rng = derive_rng(cfg.seed, "step1-parent", epoch as u64);
    for (i, rows) in batches(data.parent_images.dim(0)?, cfg.batch_size, &mut rng).iter().enumerate() {
        let x = select(&data.parent_images, rows)?;
        let e = select(&data.parent_ext, rows)?;
        let values = parent_iteration(b, opts, &ctx, &x, &e, &mut rng)?;
        logger.record(i, &values)?;
    }
    let mut rng = derive_rng(cfg.seed, "step1-child", epoch as u64);
    let n_child = data.child_images.dim(0)?;
    let mut child_batches = batches(n_child, cfg.batch_size, &mut rng);
    let per_epoch = match cfg.child_iters_per_epoch {
        0 => child_batches.len(),
        k => k,
    };
    while !child_batches.is_empty() && child_batches.len() < per_epoch {
        let more = batches(n_child, cfg.batch_size, &mut rng);
        child_batches.extend(more);
    }
    child_batches.truncate(per_epoch);
    let total = (cfg.epochs[0] * per_epoch).max(1);
    for (i, rows) in child_batches.iter().enumerate() {
        let growth = if cfg.progressive {
            Growth::schedule(cfg.arch.resolution, (epoch * per_epoch + i) as f64 / total as f64)
        } else {
            Growth::full(cfg.arch.resolution)
        };
        let y = select(&data.child_images, rows)?;
        let e = select(&data.child_ext, rows)?;
        let values = child_iteration(b, opts, &ctx, &y, &e, growth, &mut rng)?;
        logger.record(i, &values)?;
    }
    Ok(())
}

fn step2_epoch(
    b: &mut NetworkBundle,
    opts: &mut Optimizers,
    cfg: &TrainConfig,
    data: &TrainData,
    epoch: usize,
    logger: &mut Logger,
) -> Result<()> {
    let ctx = Ctx {
        cfg,
        step: 2,
        norm: NormMode::Train,
    };
    let mut rng = derive_rng(cfg.seed, "step2-parent", epoch as u64);
    for (i, rows) in batches(data.parent_images.dim(0)?, cfg.batch_size, &mut rng).iter().enumerate() {
        let x = select(&data.parent_images, rows)?;
        let e = select(&data.parent_ext, rows)?;
        let values = parent_iteration(b, opts, &ctx, &x, &e, &mut rng)?;
        logger.record(i, &values)?;
    }
    let mut rng = derive_rng(cfg.seed, "step2-inverse", epoch as u64);
    let iters = match cfg.inverse_iters_per_epoch {
        0 => child_batches_per_epoch(cfg, data),
        k => k,
    };
    b.g_y.freeze();
    for i in 0..iters {
        let values = inverse_iteration(b, opts, &ctx, &mut rng)?;
        logger.record(i, &values)?;
    }
    b.g_y.unfreeze();
    Ok(())
}

struct MappingInputs {
    g_f: Tensor,
    g_m: Tensor,
    targets: Vec<Tensor>,
}

/// Step-3 inputs, computed once: parent factors from the frozen `E_X` and branch
/// targets from the frozen `E_Y`.
fn mapping_inputs(b: &NetworkBundle, data: &TrainData) -> Result<MappingInputs> {
    let all: Vec<u32> = (0..data.families.len() as u32).collect();
    let (fa, mo) = family_parents(data, &all);
    let g = b.e_x.forward(&data.parent_images, NormMode::Frozen)?.0.detach();
    Ok(MappingInputs {
        g_f: select(&g, &fa)?,
        g_m: select(&g, &mo)?,
        targets: family_targets(b, data, &all)?,
    })
}

fn step3_epoch(
    b: &NetworkBundle,
    opts: &mut Optimizers,
    cfg: &TrainConfig,
    inputs: &MappingInputs,
    epoch: usize,
    logger: &mut Logger,
) -> Result<()> {
    let ctx = Ctx {
        cfg,
        step: 3,
        norm: NormMode::Frozen,
    };
    let mut rng = derive_rng(cfg.seed, "step3", epoch as u64);
    for (i, rows) in batches(inputs.g_f.dim(0)?, cfg.batch_size, &mut rng).iter().enumerate() {
        let targets = inputs
            .targets
            .iter()
            .map(|t| select(t, rows))
            .collect::<Result<Vec<_>>>()?;
        let values = mapping_update(
            b,
            opts,
            &ctx,
            &select(&inputs.g_f, rows)?,
            &select(&inputs.g_m, rows)?,
            &targets,
        )?;
        logger.record(i, &values)?;
    }
    Ok(())
}

/// Joint fine-tuning: every iteration updates the parent pair, the child GAN, the
/// inverse encoder, and the mapping function (whose gradient also reaches `E_X`).
/// Normalization statistics stay frozen.
fn step4_epoch(
    b: &mut NetworkBundle,
    opts: &mut Optimizers,
    cfg: &TrainConfig,
    data: &TrainData,
    epoch: usize,
    logger: &mut Logger,
) -> Result<()> {
    let ctx = Ctx {
        cfg,
        step: 4,
        norm: NormMode::Frozen,
    };
    let mut rng = derive_rng(cfg.seed, "step4", epoch as u64);
    let fam_batches = batches(data.families.len(), cfg.batch_size, &mut rng);
    let parent_batches = batches(data.parent_images.dim(0)?, cfg.batch_size, &mut rng);
    let child_batches = batches(data.child_images.dim(0)?, cfg.batch_size, &mut rng);
    let full = Growth::full(cfg.arch.resolution);
    for (i, fams) in fam_batches.iter().enumerate() {
        let rows = &parent_batches[i % parent_batches.len()];
        let x = select(&data.parent_images, rows)?;
        let e = select(&data.parent_ext, rows)?;
        let mut values = parent_iteration(b, opts, &ctx, &x, &e, &mut rng)?;

        let rows = &child_batches[i % child_batches.len()];
        let y = select(&data.child_images, rows)?;
        let e = select(&data.child_ext, rows)?;
        values.extend(child_iteration(b, opts, &ctx, &y, &e, full, &mut rng)?);
        values.extend(inverse_iteration(b, opts, &ctx, &mut rng)?);

        let (fa, mo) = family_parents(data, fams);
        let mut parents = fa.clone();
        parents.extend(&mo);
        let g = b.e_x.forward(&select(&data.parent_images, &parents)?, NormMode::Frozen)?.0;
        let k = fa.len();
        let targets = family_targets(b, data, fams)?;
        values.extend(mapping_update(b, opts, &ctx, &g.narrow(0, 0, k)?, &g.narrow(0, k, k)?, &targets)?);
        logger.record(i, &values)?;
    }
    Ok(())
}

/// Flattened `G_X` reconstructions and `G_Y` samples on fixed inputs, used to
/// compare trained states bit-for-bit.
pub fn validation_forward(bundle: &NetworkBundle, faces: &[&FaceImage]) -> Result<Vec<f32>> {
    let mut out = Vec::new();
    let a = bundle.arch().clone();
    if bundle.present.contains("e_x") && bundle.present.contains("g_x") && !faces.is_empty() {
        let x = bundle.image_batch(faces)?;
        let (g, skips) = bundle.e_x.forward(&x, NormMode::Frozen)?;
        let e = Tensor::zeros((faces.len(), factors::EXTERNAL_DIM), DType::F32, &Device::Cpu)?;
        out.extend(bundle.g_x.forward(&g, &e, &skips, NormMode::Frozen)?.flatten_all()?.to_vec1::<f32>()?);
        out.extend(g.flatten_all()?.to_vec1::<f32>()?);
    }
    if bundle.present.contains("g_y") {
        let mut rng = derive_rng(0, "validation", 0);
        let g = child_genes(4, a.d_g, &mut rng)?;
        let e = random_externals(4, &mut rng)?;
        let v = uniform(4, a.d_v, -1.0, 1.0, &mut rng)?;
        out.extend(bundle.g_y.forward(&g, &e, &v)?.flatten_all()?.to_vec1::<f32>()?);
    }
    if bundle.present.contains("t") && bundle.present.contains("e_x") && faces.len() >= 2 {
        let g = bundle.encode_parents(&faces[..2])?;
        for t in bundle.map(&g.narrow(0, 0, 1)?, &g.narrow(0, 1, 1)?)? {
            out.extend(t.flatten_all()?.to_vec1::<f32>()?);
        }
    }
    Ok(out)
}
