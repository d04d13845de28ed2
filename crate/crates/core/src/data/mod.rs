//! Face images, attribute labels, family records and dataset manifests.

pub mod synth;

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use image::{imageops::FilterType, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use synth::{
    render_synth_face, render_synth_face_with_regions, synth_dataset, synth_family, ChildCountLaw,
    Mask, OverlayRegions, SynthConfig, SynthGenome,
};

pub const DEFAULT_RESOLUTION: usize = 128;

/// An RGB face image with pixel values in `[-1, 1]`, stored row-major as `H × W × 3`.
#[derive(Clone, Debug, PartialEq)]
pub struct FaceImage {
    size: usize,
    pixels: Vec<f32>,
}

pub fn check_resolution(size: usize) -> Result<()> {
    if !(16..=128).contains(&size) || !size.is_power_of_two() {
        return Err(Error::Argument(format!(
            "resolution {size} must be a power of two between 16 and 128"
        )));
    }
    Ok(())
}

impl FaceImage {
    pub fn new(size: usize, pixels: Vec<f32>) -> Result<Self> {
        check_resolution(size)?;
        if pixels.len() != size * size * 3 {
            return Err(Error::Shape(format!(
                "{} pixel values for a {size}x{size}x3 image",
                pixels.len()
            )));
        }
        if let Some(bad) = pixels.iter().find(|p| !p.is_finite() || p.abs() > 1.0) {
            return Err(Error::validation("image", format!("pixel value {bad} outside [-1, 1]")));
        }
        Ok(Self { size, pixels })
    }

    pub fn filled(size: usize, value: f32) -> Result<Self> {
        Self::new(size, vec![value; size * size * 3])
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn pixel(&self, x: usize, y: usize, c: usize) -> f32 {
        self.pixels[(y * self.size + x) * 3 + c]
    }

    /// Maps an 8-bit value `p` to `2p/255 − 1`.
    pub fn from_rgb8(img: &RgbImage) -> Result<Self> {
        let (w, h) = img.dimensions();
        if w != h {
            return Err(Error::Shape(format!("image is {w}x{h}, expected square")));
        }
        let pixels = img
            .as_raw()
            .iter()
            .map(|&p| 2.0 * f32::from(p) / 255.0 - 1.0)
            .collect();
        Self::new(w as usize, pixels)
    }

    pub fn to_rgb8(&self) -> RgbImage {
        let raw = self.pixels.iter().map(|&p| to_u8(p)).collect();
        RgbImage::from_raw(self.size as u32, self.size as u32, raw).expect("buffer length matches size")
    }

    /// Resamples to `size × size` through the 8-bit rendering. Same-size calls are a no-op.
    pub fn resized(&self, size: usize) -> Result<Self> {
        if size == self.size {
            return Ok(self.clone());
        }
        check_resolution(size)?;
        let img = image::imageops::resize(&self.to_rgb8(), size as u32, size as u32, FilterType::Triangle);
        Self::from_rgb8(&img)
    }

    pub fn mean_abs_diff(&self, other: &FaceImage) -> f64 {
        self.pixels
            .iter()
            .zip(&other.pixels)
            .map(|(a, b)| f64::from((a - b).abs()))
            .sum::<f64>()
            / self.pixels.len() as f64
    }
}

pub(crate) fn to_u8(p: f32) -> u8 {
    (((p.clamp(-1.0, 1.0) + 1.0) * 0.5) * 255.0).round() as u8
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Parent,
    Child,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Attribute {
    Gender,
    Age,
    Expression,
    Glasses,
    Moustache,
    SkinColor,
}

impl Attribute {
    pub const ALL: [Attribute; 6] = [
        Attribute::Gender,
        Attribute::Age,
        Attribute::Expression,
        Attribute::Glasses,
        Attribute::Moustache,
        Attribute::SkinColor,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Attribute::Gender => "gender",
            Attribute::Age => "age",
            Attribute::Expression => "expression",
            Attribute::Glasses => "glasses",
            Attribute::Moustache => "moustache",
            Attribute::SkinColor => "skin_color",
        }
    }

    /// Attributes fed to the networks as the external factor, in vector order.
    pub fn trained(domain: Domain) -> [Attribute; 4] {
        match domain {
            Domain::Parent => [
                Attribute::Gender,
                Attribute::Moustache,
                Attribute::Glasses,
                Attribute::Expression,
            ],
            Domain::Child => [
                Attribute::Age,
                Attribute::Gender,
                Attribute::Glasses,
                Attribute::Expression,
            ],
        }
    }
}

impl fmt::Display for Attribute {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttributeSet {
    pub domain: Domain,
    labels: BTreeMap<Attribute, u8>,
}

impl AttributeSet {
    pub fn new(domain: Domain) -> Self {
        Self {
            domain,
            labels: BTreeMap::new(),
        }
    }

    /// All six attributes set to zero.
    pub fn zeros(domain: Domain) -> Self {
        let mut set = Self::new(domain);
        for a in Attribute::ALL {
            set.labels.insert(a, 0);
        }
        set
    }

    pub fn with(mut self, attr: Attribute, value: u8) -> Self {
        self.labels.insert(attr, value);
        self
    }

    pub fn set(&mut self, attr: Attribute, value: u8) {
        self.labels.insert(attr, value);
    }

    pub fn get(&self, attr: Attribute) -> Option<u8> {
        self.labels.get(&attr).copied()
    }

    pub fn labels(&self) -> &BTreeMap<Attribute, u8> {
        &self.labels
    }

    /// Checks that every value is binary and all six attributes are present.
    pub fn validate(&self, subject: &str) -> Result<()> {
        for a in Attribute::ALL {
            match self.labels.get(&a) {
                None => return Err(Error::validation(subject, format!("missing attribute {a}"))),
                Some(v) if *v > 1 => {
                    return Err(Error::validation(subject, format!("attribute {a} = {v} is not binary")))
                }
                _ => {}
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FaceRecord {
    pub image: FaceImage,
    pub attrs: AttributeSet,
    /// Manifest-relative PNG path.
    pub source: String,
    /// Ground-truth generating parameters when the face is synthetic.
    pub genome: Option<SynthGenome>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FamilyRecord {
    pub id: String,
    pub father: FaceRecord,
    pub mother: FaceRecord,
    pub children: Vec<FaceRecord>,
}

impl FamilyRecord {
    pub fn validate(&self) -> Result<()> {
        self.father.attrs.validate(&self.id)?;
        self.mother.attrs.validate(&self.id)?;
        for c in &self.children {
            c.attrs.validate(&self.id)?;
        }
        if self.father.attrs.get(Attribute::Gender) != Some(1) {
            return Err(Error::validation(&self.id, "father must have gender = 1"));
        }
        if self.mother.attrs.get(Attribute::Gender) != Some(0) {
            return Err(Error::validation(&self.id, "mother must have gender = 0"));
        }
        Ok(())
    }

    pub fn faces(&self) -> impl Iterator<Item = &FaceRecord> {
        [&self.father, &self.mother].into_iter().chain(self.children.iter())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub split: Split,
    pub families: Vec<FamilyRecord>,
    pub unpaired_children: Vec<FaceRecord>,
}

impl DatasetManifest {
    pub fn faces(&self) -> impl Iterator<Item = &FaceRecord> {
        self.families.iter().flat_map(|f| f.faces()).chain(self.unpaired_children.iter())
    }

    pub fn parent_faces(&self) -> Vec<&FaceRecord> {
        self.families.iter().flat_map(|f| [&f.father, &f.mother]).collect()
    }

    /// Family children followed by the unpaired pool.
    pub fn child_faces(&self) -> Vec<&FaceRecord> {
        self.families
            .iter()
            .flat_map(|f| f.children.iter())
            .chain(self.unpaired_children.iter())
            .collect()
    }

    pub fn resolution(&self) -> Option<usize> {
        self.faces().next().map(|f| f.image.size())
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for fam in &self.families {
            fam.validate()?;
            for face in fam.faces() {
                if !seen.insert(face.source.as_str()) {
                    return Err(Error::validation(&fam.id, format!("face {} listed twice", face.source)));
                }
            }
        }
        for face in &self.unpaired_children {
            face.attrs.validate(&face.source)?;
            if face.attrs.domain != Domain::Child {
                return Err(Error::validation(&face.source, "unpaired faces must be children"));
            }
            if !seen.insert(face.source.as_str()) {
                return Err(Error::validation(&face.source, "face listed twice"));
            }
        }
        Ok(())
    }
}

/// Fails if any face (by path or by identical pixels) occurs in both manifests.
pub fn check_disjoint(a: &DatasetManifest, b: &DatasetManifest) -> Result<()> {
    let key = |f: &FaceRecord| f.image.to_rgb8().into_raw();
    let paths: HashSet<&str> = a.faces().map(|f| f.source.as_str()).collect();
    let pixels: HashSet<Vec<u8>> = a.faces().map(key).collect();
    for face in b.faces() {
        if paths.contains(face.source.as_str()) || pixels.contains(&key(face)) {
            return Err(Error::validation(
                &face.source,
                "face appears in both train and val splits",
            ));
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AttrsDoc {
    gender: i64,
    age: i64,
    expression: i64,
    glasses: i64,
    moustache: i64,
    skin_color: i64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct FaceDoc {
    image: String,
    attrs: AttrsDoc,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    genome: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct FamilyDoc {
    id: String,
    father: FaceDoc,
    mother: FaceDoc,
    children: Vec<FaceDoc>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ManifestDoc {
    split: Split,
    families: Vec<FamilyDoc>,
    unpaired_children: Vec<FaceDoc>,
}

fn attrs_from_doc(doc: &AttrsDoc, domain: Domain, subject: &str) -> Result<AttributeSet> {
    let pairs = [
        (Attribute::Gender, doc.gender),
        (Attribute::Age, doc.age),
        (Attribute::Expression, doc.expression),
        (Attribute::Glasses, doc.glasses),
        (Attribute::Moustache, doc.moustache),
        (Attribute::SkinColor, doc.skin_color),
    ];
    let mut set = AttributeSet::new(domain);
    for (a, v) in pairs {
        if v != 0 && v != 1 {
            return Err(Error::validation(subject, format!("attribute {a} = {v} is not binary")));
        }
        set.set(a, v as u8);
    }
    Ok(set)
}

fn attrs_to_doc(set: &AttributeSet) -> AttrsDoc {
    let g = |a| i64::from(set.get(a).unwrap_or(0));
    AttrsDoc {
        gender: g(Attribute::Gender),
        age: g(Attribute::Age),
        expression: g(Attribute::Expression),
        glasses: g(Attribute::Glasses),
        moustache: g(Attribute::Moustache),
        skin_color: g(Attribute::SkinColor),
    }
}

fn load_face(dir: &Path, doc: &FaceDoc, domain: Domain, subject: &str, resolution: usize) -> Result<FaceRecord> {
    let path = dir.join(&doc.image);
    let img = image::open(&path)
        .map_err(|e| Error::Load {
            path: path.clone(),
            reason: e.to_string(),
        })?
        .to_rgb8();
    let image = FaceImage::from_rgb8(&img)
        .map_err(|e| Error::Load {
            path: path.clone(),
            reason: e.to_string(),
        })?
        .resized(resolution)?;
    let genome = doc.genome.as_ref().map(|g| SynthGenome::new(g.clone())).transpose()?;
    Ok(FaceRecord {
        image,
        attrs: attrs_from_doc(&doc.attrs, domain, subject)?,
        source: doc.image.clone(),
        genome,
    })
}

/// Reads a manifest document and decodes every referenced image at `resolution`.
pub fn load_manifest(path: &Path, resolution: usize) -> Result<DatasetManifest> {
    check_resolution(resolution)?;
    let text = fs::read_to_string(path).map_err(|e| Error::Load {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let doc: ManifestDoc = serde_json::from_str(&text).map_err(|e| Error::Load {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let dir = path.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
    let mut families = Vec::with_capacity(doc.families.len());
    for fam in &doc.families {
        let face = |d: &FaceDoc, domain| load_face(&dir, d, domain, &fam.id, resolution);
        families.push(FamilyRecord {
            id: fam.id.clone(),
            father: face(&fam.father, Domain::Parent)?,
            mother: face(&fam.mother, Domain::Parent)?,
            children: fam
                .children
                .iter()
                .map(|c| face(c, Domain::Child))
                .collect::<Result<_>>()?,
        });
    }
    let unpaired_children = doc
        .unpaired_children
        .iter()
        .map(|d| load_face(&dir, d, Domain::Child, &d.image, resolution))
        .collect::<Result<_>>()?;
    let manifest = DatasetManifest {
        split: doc.split,
        families,
        unpaired_children,
    };
    manifest.validate()?;
    Ok(manifest)
}

fn face_doc(face: &FaceRecord) -> FaceDoc {
    FaceDoc {
        image: face.source.clone(),
        attrs: attrs_to_doc(&face.attrs),
        genome: face.genome.as_ref().map(|g| g.params().to_vec()),
    }
}

pub fn manifest_json(manifest: &DatasetManifest) -> String {
    let doc = ManifestDoc {
        split: manifest.split,
        families: manifest
            .families
            .iter()
            .map(|f| FamilyDoc {
                id: f.id.clone(),
                father: face_doc(&f.father),
                mother: face_doc(&f.mother),
                children: f.children.iter().map(face_doc).collect(),
            })
            .collect(),
        unpaired_children: manifest.unpaired_children.iter().map(face_doc).collect(),
    };
    let mut text = serde_json::to_string_pretty(&doc).expect("manifest serializes");
    text.push('\n');
    text
}

/// Writes the manifest JSON to `path` and every image as PNG relative to its directory.
pub fn write_manifest(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    manifest.validate()?;
    let dir = path.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
    for face in manifest.faces() {
        let target = dir.join(&face.source);
        if let Some(parent) = target.parent() {
            fs::create_dir_all(parent)?;
        }
        face.image
            .to_rgb8()
            .save_with_format(&target, image::ImageFormat::Png)
            .map_err(|e| Error::Io(std::io::Error::other(format!("{}: {e}", target.display()))))?;
    }
    fs::write(path, manifest_json(manifest))?;
    Ok(())
}

pub fn save_png(image: &FaceImage, path: &Path) -> Result<()> {
    image
        .to_rgb8()
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Io(std::io::Error::other(format!("{}: {e}", path.display()))))
}

/// Columns of a square-ish grid holding `n` tiles: `⌈√n⌉`.
pub fn grid_columns(n: usize) -> usize {
    let mut c = (n as f64).sqrt() as usize;
    while c * c < n {
        c += 1;
    }
    c.max(1)
}

/// Tiles equally sized faces row-major into `cols` columns; unused cells are black.
pub fn grid_image(faces: &[FaceImage], cols: usize) -> Result<RgbImage> {
    let first = faces.first().ok_or_else(|| Error::Argument("grid needs at least one image".into()))?;
    if cols == 0 {
        return Err(Error::Argument("grid needs at least one column".into()));
    }
    let s = first.size();
    if faces.iter().any(|f| f.size() != s) {
        return Err(Error::Shape("grid tiles must share one size".into()));
    }
    let rows = faces.len().div_ceil(cols);
    let mut grid = RgbImage::new((cols * s) as u32, (rows * s) as u32);
    for (i, f) in faces.iter().enumerate() {
        let x0 = ((i % cols) * s) as i64;
        let y0 = ((i / cols) * s) as i64;
        image::imageops::replace(&mut grid, &f.to_rgb8(), x0, y0);
    }
    Ok(grid)
}

pub fn save_grid(faces: &[FaceImage], cols: usize, path: &Path) -> Result<()> {
    grid_image(faces, cols)?
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Io(std::io::Error::other(format!("{}: {e}", path.display()))))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ChildAttrsDoc {
    gender: i64,
    age: i64,
    expression: i64,
    glasses: i64,
    #[serde(default)]
    skin_color: i64,
}

/// Reads a child attribute sidecar: a JSON object with binary `gender`, `age`,
/// `expression`, `glasses` and optional `skin_color`.
pub fn load_child_attrs(path: &Path) -> Result<AttributeSet> {
    let load_err = |reason: String| Error::Load {
        path: path.to_path_buf(),
        reason,
    };
    let text = fs::read_to_string(path).map_err(|e| load_err(e.to_string()))?;
    let doc: ChildAttrsDoc = serde_json::from_str(&text).map_err(|e| load_err(e.to_string()))?;
    let doc = AttrsDoc {
        gender: doc.gender,
        age: doc.age,
        expression: doc.expression,
        glasses: doc.glasses,
        moustache: 0,
        skin_color: doc.skin_color,
    };
    attrs_from_doc(&doc, Domain::Child, &path.display().to_string())
}

pub fn load_png(path: &Path, resolution: usize) -> Result<FaceImage> {
    let img = image::open(path)
        .map_err(|e| Error::Load {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?
        .to_rgb8();
    FaceImage::from_rgb8(&img)?.resized(resolution)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_extremes_map_to_unit_interval() {
        let mut img = RgbImage::new(16, 16);
        img.put_pixel(0, 0, image::Rgb([255, 0, 128]));
        let face = FaceImage::from_rgb8(&img).unwrap();
        assert_eq!(face.pixel(0, 0, 0), 1.0);
        assert_eq!(face.pixel(0, 0, 1), -1.0);
        assert_eq!(face.pixel(1, 0, 0), -1.0);
        assert_eq!(face.to_rgb8(), img);
    }

    #[test]
    fn rejects_bad_resolution_and_range() {
        assert!(FaceImage::filled(24, 0.0).is_err());
        assert!(FaceImage::filled(256, 0.0).is_err());
        assert!(FaceImage::new(16, vec![1.5; 16 * 16 * 3]).is_err());
        assert!(FaceImage::new(16, vec![f32::NAN; 16 * 16 * 3]).is_err());
    }

    #[test]
    fn trained_attribute_orders() {
        use Attribute::*;
        assert_eq!(Attribute::trained(Domain::Parent), [Gender, Moustache, Glasses, Expression]);
        assert_eq!(Attribute::trained(Domain::Child), [Age, Gender, Glasses, Expression]);
    }

    #[test]
    fn attribute_validation() {
        let ok = AttributeSet::zeros(Domain::Child);
        assert!(ok.validate("x").is_ok());
        assert!(ok.clone().with(Attribute::Gender, 2).validate("x").is_err());
        assert!(AttributeSet::new(Domain::Child).validate("x").is_err());
    }
}
