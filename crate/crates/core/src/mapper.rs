//! Mapping from the two parent genetic factors to `k = 4` candidate child factors.

use candle_core::Tensor;
use rand_chacha::ChaCha8Rng;

use crate::arch::ArchConfig;
use crate::error::{Error, Result};
use crate::factors::GeneticFactor;
use crate::losses;
use crate::nn::{self, Linear, ParamStore, Scope};

pub const BRANCHES: usize = 4;
const RESIDUAL_LAYERS: usize = 5;

/// Coefficients of branches 2..4; branch 1 is weighted 1.
pub const DEFAULT_BRANCH_WEIGHTS: [f64; 3] = [0.8, 0.6, 0.4];

#[derive(Clone, Debug)]
struct Residual {
    fc0: Linear,
    fc1: Linear,
}

/// `T`: dense head over `[g_father, g_mother]`, five residual layers, and four
/// linear branches each followed by row standardization.
#[derive(Clone, Debug)]
pub struct MappingFunction {
    d_g: usize,
    head: [Linear; 2],
    body: Vec<Residual>,
    tail: Vec<Linear>,
    single_branch: bool,
    store: ParamStore,
}

impl MappingFunction {
    /// With `single_branch`, one branch is computed and replicated to all four outputs.
    pub fn new(arch: &ArchConfig, single_branch: bool, rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut root = Scope::root(&mut store, rng);
        let w = arch.mapper_width;
        let head = [
            Linear::new(&mut root.sub("head0"), 2 * arch.d_g, w)?,
            Linear::new(&mut root.sub("head1"), w, w)?,
        ];
        let body = (0..RESIDUAL_LAYERS)
            .map(|i| {
                let mut s = root.sub(format!("res{i}"));
                Ok(Residual {
                    fc0: Linear::new(&mut s.sub("fc0"), w, w)?,
                    fc1: Linear::new(&mut s.sub("fc1"), w, w)?,
                })
            })
            .collect::<Result<_>>()?;
        let n_tail = if single_branch { 1 } else { BRANCHES };
        let tail = (0..n_tail)
            .map(|i| Linear::new(&mut root.sub(format!("branch{i}")), w, arch.d_g))
            .collect::<Result<_>>()?;
        Ok(Self {
            d_g: arch.d_g,
            head,
            body,
            tail,
            single_branch,
            store,
        })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn is_single_branch(&self) -> bool {
        self.single_branch
    }

    /// Batched forward: `(N, d_g)` father and mother factors to four `(N, d_g)` outputs.
    pub fn forward(&self, g_father: &Tensor, g_mother: &Tensor) -> Result<Vec<Tensor>> {
        for g in [g_father, g_mother] {
            if g.rank() != 2 || g.dim(1)? != self.d_g {
                return Err(Error::Shape(format!("parent factor {:?}, d_g = {}", g.dims(), self.d_g)));
            }
        }
        if g_father.dim(0)? != g_mother.dim(0)? {
            return Err(Error::Shape("father/mother batch sizes differ".into()));
        }
        let x = Tensor::cat(&[g_father, g_mother], 1)?;
        let h = self.head[1].forward(&self.head[0].forward(&x)?)?;
        let mut h = nn::leaky_relu(&h)?;
        for r in &self.body {
            let inner = r.fc1.forward(&nn::leaky_relu(&r.fc0.forward(&h)?)?)?;
            h = nn::leaky_relu(&(h + inner)?)?;
        }
        let outs = self
            .tail
            .iter()
            .map(|b| nn::standardize_rows(&b.forward(&h)?))
            .collect::<Result<Vec<_>>>()?;
        Ok(if self.single_branch {
            vec![outs[0].clone(); BRANCHES]
        } else {
            outs
        })
    }
}

/// Single-family convenience wrapper around [`MappingFunction::forward`].
pub fn map_genes(t: &MappingFunction, g_father: &GeneticFactor, g_mother: &GeneticFactor) -> Result<Vec<GeneticFactor>> {
    if g_father.dim() != g_mother.dim() {
        return Err(Error::Shape(format!("parent factor lengths {} and {}", g_father.dim(), g_mother.dim())));
    }
    let f = crate::batch::rows(&[&g_father.values])?;
    let m = crate::batch::rows(&[&g_mother.values])?;
    t.forward(&f, &m)?
        .iter()
        .map(|o| GeneticFactor::new(o.squeeze(0)?.to_vec1::<f32>()?, crate::data::Domain::Child))
        .collect()
}

/// Ground-truth child factor for each of the four branches.
#[derive(Clone, Debug, PartialEq)]
pub struct BranchTargets<T> {
    pub targets: [T; BRANCHES],
}

/// First four children in order; missing positions repeat the first child.
pub fn assign_ground_truth<T: Clone>(children: &[T]) -> Result<BranchTargets<T>> {
    let first = children
        .first()
        .ok_or_else(|| Error::NoTarget("family has no children".into()))?;
    let targets = std::array::from_fn(|j| children.get(j).unwrap_or(first).clone());
    Ok(BranchTargets { targets })
}

/// `Σⱼ wⱼ·mean|ĝⱼ − gⱼ|` with `w = (1, λ₁, λ₂, λ₃)`.
pub fn loss_mapping(predictions: &[Tensor], targets: &[Tensor], branch_weights: [f64; 3]) -> Result<Tensor> {
    if predictions.len() != BRANCHES || targets.len() != BRANCHES {
        return Err(Error::Shape(format!(
            "{} predictions and {} targets, expected {BRANCHES} each",
            predictions.len(),
            targets.len()
        )));
    }
    let weights = [1.0, branch_weights[0], branch_weights[1], branch_weights[2]];
    let mut total: Option<Tensor> = None;
    for ((p, t), w) in predictions.iter().zip(targets).zip(weights) {
        let term = (losses::l1(p, t)? * w)?;
        total = Some(match total {
            None => term,
            Some(acc) => (acc + term)?,
        });
    }
    Ok(total.expect("four branches"))
}
