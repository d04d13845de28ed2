//! Procedural face oracle with known generating factors.
//!
//! A [`SynthGenome`] fixes face geometry and skin hue; external attributes draw
//! discrete overlays; the variety seed only jitters pose and overlay placement.
//! Families inherit genomes as a convex blend of the parents plus a bounded mutation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Attribute, AttributeSet, DatasetManifest, Domain, FaceImage, FaceRecord, FamilyRecord, Split};
use crate::error::{Error, Result};

pub const GENOME_LEN: usize = 8;

const OVAL: usize = 0;
const EYE_SPACING: usize = 1;
const EYE_SIZE: usize = 2;
const NOSE_SIZE: usize = 3;
const MOUTH_WIDTH: usize = 4;
const HUE: usize = 5;

const MUTATION: f64 = 0.05;
const AGE_SHRINK: f64 = 0.9;

/// Face oval ratio, eye spacing, eye size, nose size, mouth width and an RGB hue
/// triple, each in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthGenome {
    params: Vec<f64>,
}

impl SynthGenome {
    pub fn new(params: Vec<f64>) -> Result<Self> {
        if params.len() != GENOME_LEN {
            return Err(Error::Shape(format!(
                "genome has {} entries, expected {GENOME_LEN}",
                params.len()
            )));
        }
        if params.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::validation("genome", "entries must lie in [0, 1]"));
        }
        Ok(Self { params })
    }

    pub fn random<R: Rng>(rng: &mut R) -> Self {
        Self {
            params: (0..GENOME_LEN).map(|_| rng.gen::<f64>()).collect(),
        }
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn hue(&self) -> [f64; 3] {
        [self.params[HUE], self.params[HUE + 1], self.params[HUE + 2]]
    }

    /// `α·father + (1−α)·mother + μ`, clamped to `[0, 1]`, with `α ~ U(0.3, 0.7)` and
    /// `|μ| ≤ 0.05` per entry.
    pub fn inherit<R: Rng>(father: &Self, mother: &Self, rng: &mut R) -> Self {
        let alpha = rng.gen_range(0.3..0.7);
        let params = father
            .params
            .iter()
            .zip(&mother.params)
            .map(|(f, m)| {
                let mu = rng.gen_range(-MUTATION..=MUTATION);
                (alpha * f + (1.0 - alpha) * m + mu).clamp(0.0, 1.0)
            })
            .collect();
        Self { params }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    size: usize,
    bits: Vec<bool>,
}

impl Mask {
    fn empty(size: usize) -> Self {
        Self {
            size,
            bits: vec![false; size * size],
        }
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.size + x]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn union(&self, other: &Mask) -> Mask {
        Mask {
            size: self.size,
            bits: self.bits.iter().zip(&other.bits).map(|(a, b)| *a || *b).collect(),
        }
    }

    fn mark(&mut self, x: usize, y: usize) {
        self.bits[y * self.size + x] = true;
    }
}

/// Pixel regions that each external attribute may touch, for one rendering.
#[derive(Clone, Debug)]
pub struct OverlayRegions {
    pub glasses: Mask,
    pub moustache: Mask,
    pub expression: Mask,
    pub age: Mask,
    pub hair: Mask,
}

impl OverlayRegions {
    pub fn all(&self) -> Mask {
        self.glasses
            .union(&self.moustache)
            .union(&self.expression)
            .union(&self.age)
            .union(&self.hair)
    }
}

/// Geometry resolved for one rendering, in normalized `[0, 1]` coordinates.
struct Layout {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    scale: f64,
    eye_dx: f64,
    eye_y: f64,
    eye_r: f64,
    glass_dx: f64,
    glass_dy: f64,
    nose_h: f64,
    mouth_y: f64,
    mouth_hw: f64,
    mouth_amp: f64,
    tache_dx: f64,
    tache_dy: f64,
    stroke: f64,
    skin: [f64; 3],
}

fn layout(genome: &SynthGenome, attrs: &AttributeSet, seed: u64, size: usize) -> Layout {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_FACE);
    let jitter_px = (size / 64).max(1) as i64;
    let px = 1.0 / size as f64;
    let mut jitter = || rng.gen_range(-jitter_px..=jitter_px) as f64 * px;
    let (pose_x, pose_y) = (jitter(), jitter());
    let (glass_dx, glass_dy) = (jitter(), jitter());
    let (tache_dx, tache_dy) = (jitter(), jitter());

    let p = genome.params();
    let child = attrs.domain == Domain::Child;
    let on = |a| attrs.get(a) == Some(1);
    let scale = if on(Attribute::Age) { AGE_SHRINK } else { 1.0 };
    let ry = if child { 0.33 } else { 0.36 } * scale;
    let rx = ry * (0.68 + 0.25 * p[OVAL] + if child { 0.06 } else { 0.0 });
    let eye_mult = if child { 1.25 } else { 1.0 };
    let hue = genome.hue();
    Layout {
        cx: 0.5 + pose_x,
        cy: 0.54 + pose_y,
        rx,
        ry,
        scale,
        eye_dx: (0.09 + 0.08 * p[EYE_SPACING]) * scale,
        eye_y: -0.08 * scale,
        eye_r: (0.035 + 0.035 * p[EYE_SIZE]) * scale * eye_mult,
        glass_dx,
        glass_dy,
        nose_h: (0.05 + 0.08 * p[NOSE_SIZE]) * scale,
        mouth_y: 0.16 * scale,
        mouth_hw: (0.06 + 0.08 * p[MOUTH_WIDTH]) * scale,
        mouth_amp: if on(Attribute::Expression) { 0.035 * scale } else { 0.0 },
        tache_dx,
        tache_dy,
        stroke: (0.03f64).max(1.2 * px),
        skin: [0.2 + 0.75 * hue[0], 0.2 + 0.75 * hue[1], 0.2 + 0.75 * hue[2]],
    }
}

const BACKGROUND: [f64; 3] = [0.35, 0.4, 0.45];
const HAIR: [f64; 3] = [0.16, 0.1, 0.08];
const EYE: [f64; 3] = [0.08, 0.08, 0.12];
const GLASSES: [f64; 3] = [0.9, 0.9, 0.95];
const LIPS: [f64; 3] = [0.75, 0.25, 0.3];
const TACHE: [f64; 3] = [0.22, 0.14, 0.1];

fn ellipse(x: f64, y: f64, cx: f64, cy: f64, rx: f64, ry: f64) -> f64 {
    (((x - cx) / rx).powi(2) + ((y - cy) / ry).powi(2)).sqrt()
}

fn shade(l: &Layout, attrs: &AttributeSet, x: f64, y: f64) -> [f64; 3] {
    let on = |a| attrs.get(a) == Some(1);
    let male = on(Attribute::Gender);
    let rho = ellipse(x, y, l.cx, l.cy, l.rx, l.ry);
    let mut c = BACKGROUND;
    if !male && ellipse(x, y, l.cx, l.cy - 0.02, l.rx + 0.08, l.ry + 0.06) < 1.0 && y < l.cy + 0.5 * l.ry {
        c = HAIR;
    }
    if rho < 1.0 {
        c = l.skin;
    }
    if male && ellipse(x, y, l.cx, l.cy, l.rx + 0.02, l.ry + 0.03) < 1.0 && y < l.cy - 0.62 * l.ry {
        c = HAIR;
    }
    let nose_w = 0.02 * l.scale;
    if (x - l.cx).abs() < nose_w && y > l.cy - 0.02 && y < l.cy - 0.02 + l.nose_h {
        c = [l.skin[0] * 0.7, l.skin[1] * 0.7, l.skin[2] * 0.7];
    }
    let ey = l.cy + l.eye_y;
    for side in [-1.0, 1.0] {
        let ex = l.cx + side * l.eye_dx;
        if ellipse(x, y, ex, ey, l.eye_r, l.eye_r) < 1.0 {
            c = EYE;
        }
        if on(Attribute::Glasses) {
            let r = ellipse(x, y, ex + l.glass_dx, ey + l.glass_dy, 1.0, 1.0);
            let inner = l.eye_r + 0.02;
            if r > inner && r < inner + l.stroke {
                c = GLASSES;
            }
        }
    }
    if on(Attribute::Glasses) {
        let gy = ey + l.glass_dy;
        let span = l.eye_dx - l.eye_r - 0.02;
        if (x - l.cx - l.glass_dx).abs() < span && (y - gy).abs() < l.stroke * 0.5 {
            c = GLASSES;
        }
    }
    let my = l.cy + l.mouth_y;
    let t = (x - l.cx) / l.mouth_hw;
    if t.abs() <= 1.0 {
        let curve = my + l.mouth_amp * (1.0 - t * t) - l.mouth_amp * 0.5;
        if (y - curve).abs() < l.stroke * 0.6 {
            c = LIPS;
        }
    }
    if on(Attribute::Moustache) {
        let tx = (x - l.cx - l.tache_dx).abs();
        let ty = y - (my - 0.05 * l.scale + l.tache_dy);
        if tx < l.mouth_hw * 1.1 && ty.abs() < l.stroke * 0.7 {
            c = TACHE;
        }
    }
    c
}

fn regions(l: &Layout, size: usize) -> OverlayRegions {
    let px = 1.0 / size as f64;
    let margin = 2.5 * px;
    let mut r = OverlayRegions {
        glasses: Mask::empty(size),
        moustache: Mask::empty(size),
        expression: Mask::empty(size),
        age: Mask::empty(size),
        hair: Mask::empty(size),
    };
    let ey = l.cy + l.eye_y;
    let reach = l.eye_dx + l.eye_r + 0.02 + l.stroke + margin;
    let half_h = l.eye_r + 0.02 + l.stroke + margin;
    let my = l.cy + l.mouth_y;
    // unshrunk extent, so the band covers both age states
    let full = 1.0 / l.scale;
    for py in 0..size {
        for pxi in 0..size {
            let x = (pxi as f64 + 0.5) * px;
            let y = (py as f64 + 0.5) * px;
            if (x - l.cx).abs() < reach && (y - ey).abs() < half_h {
                r.glasses.mark(pxi, py);
            }
            let dx = (x - l.cx).abs();
            if dx < l.mouth_hw * full + margin && (y - my).abs() < 0.04 * full + l.stroke + margin {
                r.expression.mark(pxi, py);
            }
            if dx < l.mouth_hw * 1.1 * full + margin
                && (y - (my - 0.05 * l.scale)).abs() < l.stroke + margin
            {
                r.moustache.mark(pxi, py);
            }
            let rho_full = ellipse(x, y, l.cx, l.cy, l.rx * full, l.ry * full);
            let band = margin / (l.rx * full).min(l.ry * full);
            if rho_full > AGE_SHRINK - band && rho_full < 1.0 + band {
                r.age.mark(pxi, py);
            }
            let hair = ellipse(x, y, l.cx, l.cy - 0.02, l.rx * full + 0.08, l.ry * full + 0.06);
            if hair < 1.0 + band && y < l.cy + 0.5 * l.ry * full + margin && rho_full > 0.55 {
                r.hair.mark(pxi, py);
            }
        }
    }
    r
}

pub fn render_synth_face_with_regions(
    genome: &SynthGenome,
    external: &AttributeSet,
    variety_seed: u64,
    size: usize,
) -> Result<(FaceImage, OverlayRegions)> {
    super::check_resolution(size)?;
    let l = layout(genome, external, variety_seed, size);
    const SS: usize = 2;
    let mut pixels = Vec::with_capacity(size * size * 3);
    let step = 1.0 / (size * SS) as f64;
    for py in 0..size {
        for pxi in 0..size {
            let mut acc = [0.0; 3];
            for sy in 0..SS {
                for sx in 0..SS {
                    let x = ((pxi * SS + sx) as f64 + 0.5) * step;
                    let y = ((py * SS + sy) as f64 + 0.5) * step;
                    let c = shade(&l, external, x, y);
                    for k in 0..3 {
                        acc[k] += c[k];
                    }
                }
            }
            for a in acc {
                let v = a / (SS * SS) as f64;
                pixels.push((2.0 * v - 1.0).clamp(-1.0, 1.0) as f32);
            }
        }
    }
    Ok((FaceImage::new(size, pixels)?, regions(&l, size)))
}

/// Deterministic rendering of `(genome, external, variety_seed)` at `size × size`.
pub fn render_synth_face(
    genome: &SynthGenome,
    external: &AttributeSet,
    variety_seed: u64,
    size: usize,
) -> Result<FaceImage> {
    Ok(render_synth_face_with_regions(genome, external, variety_seed, size)?.0)
}

/// Distribution of children per family.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ChildCountLaw {
    Constant(usize),
    /// Inclusive range.
    Uniform(usize, usize),
}

impl ChildCountLaw {
    /// Parses `const:N`, `N`, or `uniform:A-B`.
    pub fn parse(spec: &str) -> Result<Self> {
        let bad = || Error::Argument(format!("cannot parse child-count law '{spec}'"));
        let spec = spec.trim();
        if let Some(rest) = spec.strip_prefix("uniform:") {
            let (a, b) = rest.split_once('-').ok_or_else(bad)?;
            let (a, b) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
            if a > b {
                return Err(bad());
            }
            return Ok(ChildCountLaw::Uniform(a, b));
        }
        let n = spec.strip_prefix("const:").unwrap_or(spec);
        Ok(ChildCountLaw::Constant(n.trim().parse().map_err(|_| bad())?))
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> usize {
        match *self {
            ChildCountLaw::Constant(n) => n,
            ChildCountLaw::Uniform(a, b) => rng.gen_range(a..=b),
        }
    }
}

impl std::fmt::Display for ChildCountLaw {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ChildCountLaw::Constant(n) => write!(f, "const:{n}"),
            ChildCountLaw::Uniform(a, b) => write!(f, "uniform:{a}-{b}"),
        }
    }
}

/// Attribute marginals and output settings of the synthetic generator.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub resolution: usize,
    pub split: Split,
    pub unpaired_children: usize,
    pub parent_glasses: f64,
    pub father_moustache: f64,
    pub parent_age: f64,
    pub child_glasses: f64,
    pub child_age: f64,
    pub expression: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            resolution: super::DEFAULT_RESOLUTION,
            split: Split::Train,
            unpaired_children: 0,
            parent_glasses: 0.3,
            father_moustache: 0.4,
            parent_age: 0.3,
            child_glasses: 0.2,
            child_age: 0.5,
            expression: 0.5,
        }
    }
}

fn bit<R: Rng>(rng: &mut R, p: f64) -> u8 {
    u8::from(rng.gen_bool(p.clamp(0.0, 1.0)))
}

fn skin_label(genome: &SynthGenome) -> u8 {
    let h = genome.hue();
    u8::from((h[0] + h[1] + h[2]) / 3.0 > 0.5)
}

fn parent_attrs<R: Rng>(cfg: &SynthConfig, rng: &mut R, genome: &SynthGenome, male: bool) -> AttributeSet {
    AttributeSet::zeros(Domain::Parent)
        .with(Attribute::Gender, u8::from(male))
        .with(Attribute::Age, bit(rng, cfg.parent_age))
        .with(Attribute::Expression, bit(rng, cfg.expression))
        .with(Attribute::Glasses, bit(rng, cfg.parent_glasses))
        .with(Attribute::Moustache, if male { bit(rng, cfg.father_moustache) } else { 0 })
        .with(Attribute::SkinColor, skin_label(genome))
}

fn child_attrs<R: Rng>(cfg: &SynthConfig, rng: &mut R, genome: &SynthGenome) -> AttributeSet {
    AttributeSet::zeros(Domain::Child)
        .with(Attribute::Gender, bit(rng, 0.5))
        .with(Attribute::Age, bit(rng, cfg.child_age))
        .with(Attribute::Expression, bit(rng, cfg.expression))
        .with(Attribute::Glasses, bit(rng, cfg.child_glasses))
        .with(Attribute::SkinColor, skin_label(genome))
}

fn face<R: Rng>(genome: SynthGenome, attrs: AttributeSet, source: String, size: usize, rng: &mut R) -> Result<FaceRecord> {
    let image = render_synth_face(&genome, &attrs, rng.gen(), size)?;
    Ok(FaceRecord {
        image,
        attrs,
        source,
        genome: Some(genome),
    })
}

fn family_with_id(cfg: &SynthConfig, seed: u64, n_children: usize, id: String) -> Result<FamilyRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = cfg.resolution;
    let fg = SynthGenome::random(&mut rng);
    let mg = SynthGenome::random(&mut rng);
    let fa = parent_attrs(cfg, &mut rng, &fg, true);
    let ma = parent_attrs(cfg, &mut rng, &mg, false);
    let father = face(fg.clone(), fa, format!("images/{id}/father.png"), size, &mut rng)?;
    let mother = face(mg.clone(), ma, format!("images/{id}/mother.png"), size, &mut rng)?;
    let children = (0..n_children)
        .map(|j| {
            let g = SynthGenome::inherit(&fg, &mg, &mut rng);
            let a = child_attrs(cfg, &mut rng, &g);
            face(g, a, format!("images/{id}/child_{j}.png"), size, &mut rng)
        })
        .collect::<Result<_>>()?;
    Ok(FamilyRecord {
        id,
        father,
        mother,
        children,
    })
}

/// One synthetic family, deterministic in `seed`.
pub fn synth_family(cfg: &SynthConfig, seed: u64, n_children: usize) -> Result<FamilyRecord> {
    family_with_id(cfg, seed, n_children, format!("family-{seed}"))
}

pub fn synth_dataset(
    cfg: &SynthConfig,
    n_families: usize,
    seed: u64,
    law: ChildCountLaw,
) -> Result<DatasetManifest> {
    if n_families < 1 {
        return Err(Error::Argument("at least one family is required".into()));
    }
    let tag = match cfg.split {
        Split::Train => "train",
        Split::Val => "val",
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut families = Vec::with_capacity(n_families);
    for i in 0..n_families {
        let fam_seed: u64 = rng.gen();
        let n = law.sample(&mut rng);
        families.push(family_with_id(cfg, fam_seed, n, format!("{tag}-{i:04}"))?);
    }
    let unpaired_children = (0..cfg.unpaired_children)
        .map(|k| {
            let g = SynthGenome::random(&mut rng);
            let a = child_attrs(cfg, &mut rng, &g);
            face(g, a, format!("images/{tag}-unpaired/{k:04}.png"), cfg.resolution, &mut rng)
        })
        .collect::<Result<_>>()?;
    Ok(DatasetManifest {
        split: cfg.split,
        families,
        unpaired_children,
    })
}
