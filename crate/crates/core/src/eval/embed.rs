//! Default face embedding: a small identity classifier trained on synthetic
//! identities, read out at its penultimate layer.

use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::EmbeddingExtractor;
use crate::batch;
use crate::data::synth::{render_synth_face, SynthGenome};
use crate::data::{Attribute, AttributeSet, Domain, FaceImage};
use crate::error::{Error, Result};
use crate::factors::{decode_factor, encode_factor};
use crate::nn::{self, Adam, Conv2d, Linear, ParamStore, Scope};

/// Environment variable naming a directory where trained backbones are cached.
pub const CACHE_ENV: &str = "CHILDPREDICTOR_CACHE";

#[derive(Clone, Debug, PartialEq)]
pub struct EmbedderConfig {
    pub identities: usize,
    pub renders_per_identity: usize,
    pub iterations: usize,
    pub batch_size: usize,
    pub dim: usize,
    pub resolution: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        Self {
            identities: 96,
            renders_per_identity: 8,
            iterations: 400,
            batch_size: 64,
            dim: 64,
            resolution: 32,
            lr: 1e-3,
            seed: 0,
        }
    }
}

impl EmbedderConfig {
    fn key(&self) -> String {
        let text = format!("{self:?}");
        let digest = Sha256::digest(text.as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Clone, Debug)]
pub struct IdentityEmbedder {
    config: EmbedderConfig,
    convs: Vec<Conv2d>,
    fc: Linear,
    head: Linear,
    center: candle_core::Var,
    store: ParamStore,
}

const CHANNELS: [usize; 4] = [3, 16, 32, 64];

fn random_attrs(rng: &mut ChaCha8Rng) -> AttributeSet {
    let domain = if rng.gen_bool(0.5) { Domain::Parent } else { Domain::Child };
    let male = rng.gen_bool(0.5);
    let mut a = AttributeSet::zeros(domain)
        .with(Attribute::Gender, u8::from(male))
        .with(Attribute::Age, u8::from(rng.gen_bool(0.4)))
        .with(Attribute::Expression, u8::from(rng.gen_bool(0.5)))
        .with(Attribute::Glasses, u8::from(rng.gen_bool(0.3)));
    if domain == Domain::Parent && male {
        a.set(Attribute::Moustache, u8::from(rng.gen_bool(0.4)));
    }
    a
}

impl IdentityEmbedder {
    fn build(config: &EmbedderConfig) -> Result<Self> {
        if config.resolution < 8 || config.identities < 2 || config.dim == 0 {
            return Err(Error::Config("embedder needs resolution >= 8, >= 2 identities, dim >= 1".into()));
        }
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut root = Scope::root(&mut store, &mut rng);
        let convs = (0..3)
            .map(|i| Conv2d::new(&mut root.sub(format!("conv{i}")), CHANNELS[i], CHANNELS[i + 1], 3, 1, 1))
            .collect::<Result<Vec<_>>>()?;
        let side = config.resolution / 8;
        let fc = Linear::new(&mut root.sub("fc"), CHANNELS[3] * side * side, config.dim)?;
        let head = Linear::new(&mut root.sub("head"), config.dim, config.identities)?;
        let center = root.buffer("center", &[config.dim], 0.0)?;
        Ok(Self {
            config: config.clone(),
            convs,
            fc,
            head,
            center,
            store,
        })
    }

    fn features(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for conv in &self.convs {
            h = nn::leaky_relu(&conv.forward(&h)?)?.avg_pool2d(2)?;
        }
        self.fc.forward(&h.flatten_from(1)?)
    }

    fn prepare(&self, faces: &[&FaceImage]) -> Result<Tensor> {
        let r = self.config.resolution;
        let resized: Vec<FaceImage> = faces
            .iter()
            .map(|f| if f.size() == r { Ok((*f).clone()) } else { f.resized(r) })
            .collect::<Result<_>>()?;
        batch::images(&resized.iter().collect::<Vec<_>>())
    }

    /// Trains the classifier on rendered synthetic identities: each identity is a
    /// random genome rendered under random attributes, domains, and jitter.
    pub fn train(config: &EmbedderConfig) -> Result<Self> {
        let model = Self::build(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed);
        let mut faces = Vec::new();
        let mut labels = Vec::new();
        for id in 0..config.identities {
            let genome = SynthGenome::random(&mut rng);
            for _ in 0..config.renders_per_identity {
                let attrs = random_attrs(&mut rng);
                faces.push(render_synth_face(&genome, &attrs, rng.gen(), config.resolution)?);
                labels.push(id as u32);
            }
        }
        let images = batch::images(&faces.iter().collect::<Vec<_>>())?;
        let onehot = {
            let mut data = vec![0f32; labels.len() * config.identities];
            for (i, &l) in labels.iter().enumerate() {
                data[i * config.identities + l as usize] = 1.0;
            }
            Tensor::from_vec(data, (labels.len(), config.identities), &Device::Cpu)?
        };
        let mut opt = Adam::new(&model.store, config.lr, 0.9, 0.999)?;
        let n = faces.len();
        for _ in 0..config.iterations {
            let rows: Vec<u32> = (0..config.batch_size.min(n)).map(|_| rng.gen_range(0..n as u32)).collect();
            let ids = Tensor::from_slice(&rows, rows.len(), &Device::Cpu)?;
            let x = images.index_select(&ids, 0)?;
            let y = onehot.index_select(&ids, 0)?;
            let logits = model.head.forward(&nn::leaky_relu(&model.features(&x)?)?)?;
            let max = logits.max_keepdim(1)?.detach();
            let shifted = logits.broadcast_sub(&max)?;
            let lse = shifted.exp()?.sum_keepdim(1)?.log()?;
            let logp = shifted.broadcast_sub(&lse)?;
            let loss = (logp * y)?.sum(1)?.mean_all()?.neg()?;
            opt.step(&loss.backward()?)?;
        }
        let feats = model.features(&images)?.mean(0)?.detach();
        model.center.set(&feats)?;
        Ok(model)
    }

    /// Loads the trained embedder from `$CHILDPREDICTOR_CACHE` when present,
    /// otherwise trains it (and writes the cache if the variable is set).
    pub fn cached(config: &EmbedderConfig) -> Result<Self> {
        let path = std::env::var_os(CACHE_ENV)
            .map(PathBuf::from)
            .map(|d| d.join(format!("identity-embedder-{}.bin", config.key())));
        if let Some(p) = &path {
            if p.exists() {
                return Self::load(config, p);
            }
        }
        let model = Self::train(config)?;
        if let Some(p) = &path {
            if let Some(dir) = p.parent() {
                std::fs::create_dir_all(dir)?;
            }
            model.save(p)?;
        }
        Ok(model)
    }

    fn tensors(&self) -> Vec<(String, candle_core::Var)> {
        self.store
            .params()
            .chain(self.store.buffers())
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        for (_, v) in self.tensors() {
            let blob = encode_factor(&v.as_tensor().flatten_all()?.to_vec1::<f32>()?);
            out.extend_from_slice(&(blob.len() as u64).to_le_bytes());
            out.extend_from_slice(&blob);
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load(config: &EmbedderConfig, path: &Path) -> Result<Self> {
        let model = Self::build(config)?;
        let bytes = std::fs::read(path)?;
        let mut pos = 0usize;
        let corrupt = || Error::Load {
            path: path.to_path_buf(),
            reason: "truncated or mismatched embedder cache".into(),
        };
        for (name, var) in model.tensors() {
            let len_bytes = bytes.get(pos..pos + 8).ok_or_else(corrupt)?;
            let len = u64::from_le_bytes(len_bytes.try_into().expect("8 bytes")) as usize;
            pos += 8;
            let blob = bytes.get(pos..pos + len).ok_or_else(corrupt)?;
            pos += len;
            let values = decode_factor(blob)?;
            if values.len() != var.elem_count() {
                return Err(corrupt());
            }
            let t = Tensor::from_vec(values, var.dims(), &Device::Cpu)?;
            model.store.assign(&name, &t)?;
        }
        if pos != bytes.len() {
            return Err(corrupt());
        }
        Ok(model)
    }

    /// Classification accuracy on freshly rendered faces of the training identities.
    pub fn identity_accuracy(&self, renders: usize) -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ 0x5eed);
        let genomes: Vec<SynthGenome> = (0..self.config.identities)
            .map(|_| {
                let g = SynthGenome::random(&mut rng);
                for _ in 0..self.config.renders_per_identity {
                    random_attrs(&mut rng);
                    let _: u64 = rng.gen();
                }
                g
            })
            .collect();
        let mut test_rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ 0x7e57);
        let mut correct = 0usize;
        let mut total = 0usize;
        for (id, genome) in genomes.iter().enumerate() {
            let faces = (0..renders)
                .map(|_| render_synth_face(genome, &random_attrs(&mut test_rng), test_rng.gen(), self.config.resolution))
                .collect::<Result<Vec<_>>>()?;
            let x = batch::images(&faces.iter().collect::<Vec<_>>())?;
            let logits = self.head.forward(&nn::leaky_relu(&self.features(&x)?)?)?;
            let pred = logits.argmax(1)?.to_dtype(DType::U32)?.to_vec1::<u32>()?;
            correct += pred.iter().filter(|&&p| p as usize == id).count();
            total += renders;
        }
        Ok(correct as f64 / total as f64)
    }
}

impl EmbeddingExtractor for IdentityEmbedder {
    fn name(&self) -> &str {
        "synthetic-identity-classifier"
    }

    fn dim(&self) -> usize {
        self.config.dim
    }

    fn embed(&self, faces: &[&FaceImage]) -> Result<Vec<Vec<f64>>> {
        if faces.is_empty() {
            return Ok(Vec::new());
        }
        let f = self.features(&self.prepare(faces)?)?.broadcast_sub(self.center.as_tensor())?;
        Ok(f.to_dtype(DType::F64)?.to_vec2::<f64>()?)
    }
}
