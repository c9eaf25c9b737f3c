//! Synthetic slide-structured datasets, stochastic two-view augmentation,
//! patient-level splitting, and embedding file I/O.
//!
//! Each slide carries one class label and every patch of a slide inherits it
//! as its pseudo-label. Per slide, a configured fraction of patches is drawn
//! around that class's own center ("lesion" patches); the rest are drawn
//! around background centers shared by all classes, so visually identical
//! background patches end up with conflicting pseudo-labels across classes.
//! That engineered collision is the failure mode the class-partitioned
//! training is meant to survive, and the per-patch lesion/background flag is
//! ground truth for evaluation only; training never reads it.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::fsio::{write_atomic, Reader};
use crate::math::l2_normalize;

/// Everything that determines a generated dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetParams {
    pub num_classes: usize,
    pub slides_per_class: usize,
    pub patches_per_slide: usize,
    pub dim: usize,
    pub lesion_fraction: f64,
    pub class_separation: f64,
    pub noise_scale: f64,
    pub background_centers: usize,
    pub seed: u64,
}

impl DatasetParams {
    pub fn from_config(config: &Config) -> Self {
        let d = &config.data;
        DatasetParams {
            num_classes: d.num_classes,
            slides_per_class: d.slides_per_class,
            patches_per_slide: d.patches_per_slide,
            dim: config.model.input_dim,
            lesion_fraction: d.lesion_fraction,
            class_separation: d.class_separation,
            noise_scale: d.noise_scale,
            background_centers: d.background_centers,
            seed: config.run.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::InvalidConfig(format!(
                "num_classes = {} but contrast needs at least 2",
                self.num_classes
            )));
        }
        if self.slides_per_class == 0 || self.patches_per_slide == 0 || self.dim == 0 {
            return Err(Error::InvalidConfig(
                "slides_per_class, patches_per_slide, and dim must be > 0".into(),
            ));
        }
        if !(self.lesion_fraction > 0.0 && self.lesion_fraction <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "lesion_fraction = {} outside (0, 1]",
                self.lesion_fraction
            )));
        }
        if !(self.class_separation.is_finite() && self.class_separation > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "class_separation = {} must be finite and > 0",
                self.class_separation
            )));
        }
        if !(self.noise_scale.is_finite() && self.noise_scale >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "noise_scale = {} must be finite and >= 0",
                self.noise_scale
            )));
        }
        if self.background_centers == 0 {
            return Err(Error::InvalidConfig(
                "background_centers must be > 0".into(),
            ));
        }
        Ok(())
    }
}

/// Generated patches with slide structure and hidden per-patch ground truth.
///
/// Patches are laid out slide-major: slide `s` owns patch indices
/// `s * patches_per_slide .. (s + 1) * patches_per_slide`.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub params: DatasetParams,
    pub patches: Vec<Vec<f64>>,
    pub slide_labels: Vec<usize>,
    /// Evaluation-only ground truth; true marks a lesion patch.
    pub lesion: Vec<bool>,
}

impl SyntheticDataset {
    pub fn generate(params: DatasetParams) -> Result<Self> {
        params.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);

        // class lesion centers, then shared background centers, all unit
        // vectors kept pairwise at least class_separation apart
        let mut centers: Vec<Vec<f64>> = Vec::new();
        let needed = params.num_classes + params.background_centers;
        let mut attempts = 0usize;
        while centers.len() < needed {
            attempts += 1;
            if attempts > 100_000 {
                return Err(Error::InvalidConfig(format!(
                    "cannot place {needed} centers with separation {} in dim {}",
                    params.class_separation, params.dim
                )));
            }
            let raw: Vec<f64> = (0..params.dim)
                .map(|_| StandardNormal.sample(&mut rng))
                .collect();
            let Ok(candidate) = l2_normalize(&raw) else {
                continue;
            };
            let far_enough = centers.iter().all(|c| {
                let d2: f64 = c
                    .iter()
                    .zip(candidate.values())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                d2.sqrt() >= params.class_separation
            });
            if far_enough {
                centers.push(candidate.into_values());
            }
        }
        let (class_centers, background) = centers.split_at(params.num_classes);

        let num_slides = params.num_classes * params.slides_per_class;
        let lesion_per_slide =
            (params.lesion_fraction * params.patches_per_slide as f64).round() as usize;
        let mut slide_labels = Vec::with_capacity(num_slides);
        let mut patches = Vec::with_capacity(num_slides * params.patches_per_slide);
        let mut lesion = Vec::with_capacity(num_slides * params.patches_per_slide);
        for (class, class_center) in class_centers.iter().enumerate() {
            for _ in 0..params.slides_per_class {
                slide_labels.push(class);
                for i in 0..params.patches_per_slide {
                    let is_lesion = i < lesion_per_slide;
                    let center: &[f64] = if is_lesion {
                        class_center
                    } else {
                        &background[rng.random_range(0..background.len())]
                    };
                    let patch: Vec<f64> = center
                        .iter()
                        .map(|&c| {
                            let noise: f64 = StandardNormal.sample(&mut rng);
                            c + params.noise_scale * noise
                        })
                        .collect();
                    patches.push(patch);
                    lesion.push(is_lesion);
                }
            }
        }
        Ok(SyntheticDataset {
            params,
            patches,
            slide_labels,
            lesion,
        })
    }

    pub fn num_slides(&self) -> usize {
        self.slide_labels.len()
    }

    pub fn num_patches(&self) -> usize {
        self.patches.len()
    }

    pub fn slide_of_patch(&self, patch: usize) -> usize {
        patch / self.params.patches_per_slide
    }

    /// The slide-level class every patch inherits.
    pub fn pseudo_label(&self, patch: usize) -> usize {
        self.slide_labels[self.slide_of_patch(patch)]
    }

    pub fn patches_of_slide(&self, slide: usize) -> std::ops::Range<usize> {
        let p = self.params.patches_per_slide;
        slide * p..(slide + 1) * p
    }
}

/// The two-view augmentation: additive Gaussian noise, then independent
/// per-coordinate zeroing.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentationPolicy {
    pub gaussian_sigma: f64,
    pub mask_probability: f64,
}

impl AugmentationPolicy {
    pub fn from_config(config: &Config) -> Self {
        AugmentationPolicy {
            gaussian_sigma: config.augment.gaussian_sigma,
            mask_probability: config.augment.mask_probability,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gaussian_sigma.is_finite() && self.gaussian_sigma >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "gaussian_sigma = {} must be finite and >= 0",
                self.gaussian_sigma
            )));
        }
        if !(0.0..1.0).contains(&self.mask_probability) {
            return Err(Error::InvalidConfig(format!(
                "mask_probability = {} outside [0, 1)",
                self.mask_probability
            )));
        }
        Ok(())
    }
}

/// One augmented view of `x`, fully determined by `view_seed`.
pub fn augment(x: &[f64], policy: &AugmentationPolicy, view_seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(view_seed);
    let mut out: Vec<f64> = x
        .iter()
        .map(|&xi| {
            let noise: f64 = StandardNormal.sample(&mut rng);
            xi + policy.gaussian_sigma * noise
        })
        .collect();
    for v in &mut out {
        if rng.random_range(0.0..1.0) < policy.mask_probability {
            *v = 0.0;
        }
    }
    out
}

/// Collapse an ordered list of seed components into one stream seed.
/// Changing any component or their order changes the result.
pub fn mix_seed(parts: &[u64]) -> u64 {
    fn scramble(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e3779b97f4a7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
        z ^ (z >> 31)
    }
    let mut acc = 0x243f6a8885a308d3; // no special structure, just a fixed start
    for &p in parts {
        acc = scramble(acc ^ p);
    }
    acc
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Validation, Split::Test];

    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "validation" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidInput(format!("unknown split '{other}'"))),
        }
    }
}

/// Which split each slide belongs to. Slides move between splits as whole
/// units; patches never straddle a split boundary.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitAssignment {
    pub slide_split: Vec<Split>,
}

impl SplitAssignment {
    pub fn slides_in(&self, split: Split) -> Vec<usize> {
        self.slide_split
            .iter()
            .enumerate()
            .filter(|(_, s)| **s == split)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn patch_indices(&self, dataset: &SyntheticDataset, split: Split) -> Vec<usize> {
        self.slides_in(split)
            .into_iter()
            .flat_map(|slide| dataset.patches_of_slide(slide))
            .collect()
    }
}

/// Assign whole slides to train/validation/test, stratified by class.
///
/// Within each class the slides are shuffled by the seed and then
/// apportioned by the largest-remainder rule, so 10 slides under 6:1:3
/// land exactly as 6/1/3.
pub fn split_patient_level(
    dataset: &SyntheticDataset,
    ratios: [u32; 3],
    seed: u64,
) -> Result<SplitAssignment> {
    if ratios.contains(&0) {
        return Err(Error::InvalidConfig(format!(
            "split ratios {ratios:?} must all be > 0"
        )));
    }
    let num_classes = dataset.params.num_classes;
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (slide, &label) in dataset.slide_labels.iter().enumerate() {
        by_class[label].push(slide);
    }
    let ratio_total: u32 = ratios.iter().sum();
    // tag 1 reserves a seed stream distinct from dataset generation
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, 1]));
    let mut slide_split = vec![Split::Train; dataset.num_slides()];
    for (class, slides) in by_class.iter_mut().enumerate() {
        if slides.len() < 3 {
            return Err(Error::InvalidConfig(format!(
                "class {class} has {} slides, need at least one per split",
                slides.len()
            )));
        }
        if slides.len() < 10 {
            log::warn!(
                "class {class} has only {} slides; split counts are rounded",
                slides.len()
            );
        }
        slides.shuffle(&mut rng);
        let n = slides.len();
        let mut counts = [0usize; 3];
        let mut remainders: Vec<(usize, f64)> = Vec::with_capacity(3);
        let mut assigned = 0usize;
        for (i, &r) in ratios.iter().enumerate() {
            let exact = n as f64 * r as f64 / ratio_total as f64;
            counts[i] = exact.floor() as usize;
            assigned += counts[i];
            remainders.push((i, exact - exact.floor()));
        }
        // hand leftovers to the largest remainders; ties go to the earlier
        // split so the outcome is order-independent of the sort algorithm
        remainders.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        for k in 0..(n - assigned) {
            counts[remainders[k % 3].0] += 1;
        }
        let mut cursor = 0usize;
        for (split, &count) in Split::ALL.iter().zip(&counts) {
            for &slide in &slides[cursor..cursor + count] {
                slide_split[slide] = *split;
            }
            cursor += count;
        }
        for split in Split::ALL {
            if counts[split as usize] == 0 {
                log::warn!("class {class}: split '{split}' received no slides");
            }
        }
    }
    Ok(SplitAssignment { slide_split })
}

const LEMB_MAGIC: &[u8; 4] = b"LEMB";
const LEMB_VERSION: u32 = 1;

/// Write id-tagged vectors: "LEMB" magic, u32 version, u64 count, u32 dim,
/// count x u64 ids, then count x dim x f64 values row-major, little-endian.
pub fn write_embeddings(path: &Path, ids: &[u64], vectors: &[Vec<f64>]) -> Result<()> {
    if ids.len() != vectors.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} ids for {} vectors",
            ids.len(),
            vectors.len()
        )));
    }
    let dim = vectors.first().map_or(0, |v| v.len());
    if vectors.is_empty() || dim == 0 {
        return Err(Error::InvalidInput(
            "refusing to write an empty embedding file".into(),
        ));
    }
    for (i, v) in vectors.iter().enumerate() {
        if v.len() != dim {
            return Err(Error::ShapeMismatch(format!(
                "vector {i} has dim {}, first vector has dim {dim}",
                v.len()
            )));
        }
    }
    let mut bytes =
        Vec::with_capacity(4 + 4 + 8 + 4 + ids.len() * 8 + vectors.len() * dim * 8);
    bytes.extend_from_slice(LEMB_MAGIC);
    bytes.extend_from_slice(&LEMB_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(vectors.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&(dim as u32).to_le_bytes());
    for &id in ids {
        bytes.extend_from_slice(&id.to_le_bytes());
    }
    for v in vectors {
        for &x in v {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
    }
    write_atomic(path, &bytes)
}

pub fn read_embeddings(path: &Path) -> Result<(Vec<u64>, Vec<Vec<f64>>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader::new(&bytes, path);
    if r.take(4)? != LEMB_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: "LEMB",
        });
    }
    let version = r.u32()?;
    if version != LEMB_VERSION {
        return Err(Error::VersionMismatch {
            path: path.to_path_buf(),
            found: version,
            expected: LEMB_VERSION,
        });
    }
    let count = r.u64()? as usize;
    let dim = r.u32()? as usize;
    if count == 0 || dim == 0 {
        return Err(r.malformed(format!("degenerate header: count {count}, dim {dim}")));
    }
    let ids = r.u64s(count)?;
    let mut vectors = Vec::with_capacity(count);
    for _ in 0..count {
        vectors.push(r.f64s(dim)?);
    }
    if !r.is_empty() {
        return Err(r.malformed(format!("{} trailing bytes", r.remaining())));
    }
    Ok((ids, vectors))
}

/// Plain-text import: one `id,v0,v1,...` row per vector. A first line whose
/// leading field is not an integer is treated as a header and skipped.
pub fn import_embeddings_csv(path: &Path) -> Result<(Vec<u64>, Vec<Vec<f64>>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut ids = Vec::new();
    let mut vectors: Vec<Vec<f64>> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut fields = line.split(',').map(str::trim);
        let first = fields.next().unwrap_or_default();
        let id = match first.parse::<u64>() {
            Ok(id) => id,
            Err(_) if ids.is_empty() && vectors.is_empty() => continue, // header row
            Err(_) => {
                return Err(Error::Malformed {
                    path: path.to_path_buf(),
                    detail: format!("line {}: id '{first}' is not an integer", lineno + 1),
                });
            }
        };
        let mut values = Vec::new();
        for field in fields {
            let v = field.parse::<f64>().map_err(|_| Error::Malformed {
                path: path.to_path_buf(),
                detail: format!("line {}: '{field}' is not a number", lineno + 1),
            })?;
            values.push(v);
        }
        if values.is_empty() {
            return Err(Error::Malformed {
                path: path.to_path_buf(),
                detail: format!("line {}: no values after the id", lineno + 1),
            });
        }
        if let Some(first_vec) = vectors.first() {
            if values.len() != first_vec.len() {
                return Err(Error::Malformed {
                    path: path.to_path_buf(),
                    detail: format!(
                        "line {}: {} values, earlier rows have {}",
                        lineno + 1,
                        values.len(),
                        first_vec.len()
                    ),
                });
            }
        }
        ids.push(id);
        vectors.push(values);
    }
    if vectors.is_empty() {
        return Err(Error::Malformed {
            path: path.to_path_buf(),
            detail: "no data rows".into(),
        });
    }
    Ok((ids, vectors))
}

const DATASET_MANIFEST: &str = "dataset.txt";
const DATASET_PATCHES: &str = "patches.lemb";

/// Write a dataset and its split assignment into `dir` as a text manifest
/// plus a binary patch file.
pub fn save_dataset(
    dir: &Path,
    dataset: &SyntheticDataset,
    split: &SplitAssignment,
) -> Result<()> {
    if split.slide_split.len() != dataset.num_slides() {
        return Err(Error::ShapeMismatch(format!(
            "split covers {} slides, dataset has {}",
            split.slide_split.len(),
            dataset.num_slides()
        )));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let p = &dataset.params;
    let mut text = String::new();
    text.push_str("# synthetic slide-structured patch dataset\n");
    text.push_str(&format!("num_classes = {}\n", p.num_classes));
    text.push_str(&format!("slides_per_class = {}\n", p.slides_per_class));
    text.push_str(&format!("patches_per_slide = {}\n", p.patches_per_slide));
    text.push_str(&format!("dim = {}\n", p.dim));
    text.push_str(&format!("lesion_fraction = {}\n", p.lesion_fraction));
    text.push_str(&format!("class_separation = {}\n", p.class_separation));
    text.push_str(&format!("noise_scale = {}\n", p.noise_scale));
    text.push_str(&format!("background_centers = {}\n", p.background_centers));
    text.push_str(&format!("seed = {}\n", p.seed));
    text.push('\n');
    for (slide, (&label, &sp)) in dataset
        .slide_labels
        .iter()
        .zip(&split.slide_split)
        .enumerate()
    {
        text.push_str(&format!("slide {slide} class {label} split {sp}\n"));
    }
    text.push('\n');
    for (patch, &is_lesion) in dataset.lesion.iter().enumerate() {
        text.push_str(&format!(
            "patch {patch} slide {} lesion {}\n",
            dataset.slide_of_patch(patch),
            is_lesion as u8
        ));
    }
    write_atomic(&dir.join(DATASET_MANIFEST), text.as_bytes())?;
    let ids: Vec<u64> = (0..dataset.num_patches() as u64).collect();
    write_embeddings(&dir.join(DATASET_PATCHES), &ids, &dataset.patches)
}

/// Read back what [`save_dataset`] wrote, validating internal consistency.
pub fn load_dataset(dir: &Path) -> Result<(SyntheticDataset, SplitAssignment)> {
    let manifest_path = dir.join(DATASET_MANIFEST);
    let text = std::fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let malformed = |detail: String| Error::Malformed {
        path: manifest_path.clone(),
        detail,
    };

    let mut fields: std::collections::BTreeMap<String, String> = Default::default();
    let mut slide_labels = Vec::new();
    let mut slide_split = Vec::new();
    let mut lesion_flags: Vec<(usize, usize, bool)> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let tokens: Vec<&str> = line.split_whitespace().collect();
        match tokens.as_slice() {
            [key, "=", value] => {
                fields.insert(key.to_string(), value.to_string());
            }
            ["slide", id, "class", label, "split", sp] => {
                let id: usize = id
                    .parse()
                    .map_err(|_| malformed(format!("line {}: bad slide id", lineno + 1)))?;
                if id != slide_labels.len() {
                    return Err(malformed(format!(
                        "line {}: slide {id} out of order",
                        lineno + 1
                    )));
                }
                slide_labels.push(label.parse::<usize>().map_err(|_| {
                    malformed(format!("line {}: bad class label", lineno + 1))
                })?);
                slide_split.push(sp.parse::<Split>().map_err(|_| {
                    malformed(format!("line {}: bad split name", lineno + 1))
                })?);
            }
            ["patch", id, "slide", slide, "lesion", flag] => {
                let id: usize = id
                    .parse()
                    .map_err(|_| malformed(format!("line {}: bad patch id", lineno + 1)))?;
                let slide: usize = slide
                    .parse()
                    .map_err(|_| malformed(format!("line {}: bad slide id", lineno + 1)))?;
                let flag = match *flag {
                    "0" => false,
                    "1" => true,
                    _ => {
                        return Err(malformed(format!(
                            "line {}: lesion flag must be 0 or 1",
                            lineno + 1
                        )))
                    }
                };
                lesion_flags.push((id, slide, flag));
            }
            _ => {
                return Err(malformed(format!(
                    "line {}: unrecognized line '{line}'",
                    lineno + 1
                )));
            }
        }
    }

    let get_usize = |key: &str| -> Result<usize> {
        fields
            .get(key)
            .ok_or_else(|| malformed(format!("missing field {key}")))?
            .parse()
            .map_err(|_| malformed(format!("field {key} is not an integer")))
    };
    let get_f64 = |key: &str| -> Result<f64> {
        fields
            .get(key)
            .ok_or_else(|| malformed(format!("missing field {key}")))?
            .parse()
            .map_err(|_| malformed(format!("field {key} is not a number")))
    };
    let params = DatasetParams {
        num_classes: get_usize("num_classes")?,
        slides_per_class: get_usize("slides_per_class")?,
        patches_per_slide: get_usize("patches_per_slide")?,
        dim: get_usize("dim")?,
        lesion_fraction: get_f64("lesion_fraction")?,
        class_separation: get_f64("class_separation")?,
        noise_scale: get_f64("noise_scale")?,
        background_centers: get_usize("background_centers")?,
        seed: get_usize("seed")? as u64,
    };
    params.validate()?;

    let num_slides = params.num_classes * params.slides_per_class;
    if slide_labels.len() != num_slides {
        return Err(malformed(format!(
            "{} slide lines, params imply {num_slides}",
            slide_labels.len()
        )));
    }
    let num_patches = num_slides * params.patches_per_slide;
    if lesion_flags.len() != num_patches {
        return Err(malformed(format!(
            "{} patch lines, params imply {num_patches}",
            lesion_flags.len()
        )));
    }
    let mut lesion = vec![false; num_patches];
    for (i, (id, slide, flag)) in lesion_flags.into_iter().enumerate() {
        if id != i {
            return Err(malformed(format!("patch {id} out of order")));
        }
        if slide != id / params.patches_per_slide {
            return Err(malformed(format!(
                "patch {id} claims slide {slide}, layout implies {}",
                id / params.patches_per_slide
            )));
        }
        lesion[id] = flag;
    }

    let patches_path = dir.join(DATASET_PATCHES);
    let (ids, patches) = read_embeddings(&patches_path)?;
    if patches.len() != num_patches {
        return Err(Error::Malformed {
            path: patches_path.clone(),
            detail: format!("{} vectors, manifest implies {num_patches}", patches.len()),
        });
    }
    if patches[0].len() != params.dim {
        return Err(Error::Malformed {
            path: patches_path.clone(),
            detail: format!("dim {} vs manifest dim {}", patches[0].len(), params.dim),
        });
    }
    for (i, &id) in ids.iter().enumerate() {
        if id != i as u64 {
            return Err(Error::Malformed {
                path: patches_path.clone(),
                detail: format!("patch ids are not sequential at position {i}"),
            });
        }
    }

    Ok((
        SyntheticDataset {
            params,
            patches,
            slide_labels,
            lesion,
        },
        SplitAssignment { slide_split },
    ))
}

/// FNV-1a over both dataset files; identical datasets and splits hash alike.
pub fn dataset_fingerprint(dir: &Path) -> Result<String> {
    let mut hash: u64 = 0xcbf29ce484222325;
    for name in [DATASET_MANIFEST, DATASET_PATCHES] {
        let path = dir.join(name);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        for b in bytes {
            hash ^= b as u64;
            hash = hash.wrapping_mul(0x100000001b3);
        }
    }
    Ok(format!("{hash:016x}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_params(seed: u64) -> DatasetParams {
        DatasetParams {
            num_classes: 3,
            slides_per_class: 4,
            patches_per_slide: 50,
            dim: 16,
            lesion_fraction: 0.6,
            class_separation: 1.2,
            noise_scale: 0.1,
            background_centers: 4,
            seed,
        }
    }

    #[test]
    fn patch_counts_and_pseudo_labels() {
        let ds = SyntheticDataset::generate(small_params(5)).unwrap();
        assert_eq!(ds.num_slides(), 12);
        assert_eq!(ds.num_patches(), 600);
        for patch in 0..ds.num_patches() {
            assert_eq!(ds.pseudo_label(patch), ds.slide_labels[ds.slide_of_patch(patch)]);
        }
        // slide-major layout: first slide owns the first 50 patches
        assert_eq!(ds.patches_of_slide(0), 0..50);
        assert_eq!(ds.patches_of_slide(11), 550..600);
        // 0.6 * 50 = 30 lesion patches per slide
        for slide in 0..ds.num_slides() {
            let n = ds.patches_of_slide(slide).filter(|&p| ds.lesion[p]).count();
            assert_eq!(n, 30);
        }
    }

    #[test]
    fn full_lesion_fraction_marks_everything() {
        let mut params = small_params(6);
        params.lesion_fraction = 1.0;
        let ds = SyntheticDataset::generate(params).unwrap();
        assert!(ds.lesion.iter().all(|&l| l));
    }

    #[test]
    fn generation_is_seed_deterministic() {
        let a = SyntheticDataset::generate(small_params(7)).unwrap();
        let b = SyntheticDataset::generate(small_params(7)).unwrap();
        assert_eq!(a, b);
        let c = SyntheticDataset::generate(small_params(8)).unwrap();
        assert_ne!(a.patches, c.patches);
    }

    #[test]
    fn class_collision_exists_across_pseudo_labels() {
        let ds = SyntheticDataset::generate(small_params(9)).unwrap();
        // the closest cross-class background pair must be nearer than any
        // two lesion centers can be
        let mut closest = f64::INFINITY;
        for a in 0..ds.num_patches() {
            if ds.lesion[a] {
                continue;
            }
            for b in (a + 1)..ds.num_patches() {
                if ds.lesion[b] || ds.pseudo_label(a) == ds.pseudo_label(b) {
                    continue;
                }
                let d2: f64 = ds.patches[a]
                    .iter()
                    .zip(&ds.patches[b])
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum();
                closest = closest.min(d2.sqrt());
            }
        }
        assert!(
            closest < ds.params.class_separation,
            "closest cross-class background pair {closest} is not a collision"
        );
    }

    #[test]
    fn invalid_params_are_rejected() {
        let mut p = small_params(0);
        p.num_classes = 1;
        assert!(SyntheticDataset::generate(p).is_err());
        let mut p = small_params(0);
        p.lesion_fraction = 0.0;
        assert!(SyntheticDataset::generate(p).is_err());
        let mut p = small_params(0);
        p.class_separation = 5.0; // unit vectors are never this far apart
        assert!(SyntheticDataset::generate(p).is_err());
    }

    #[test]
    fn null_augmentation_is_identity() {
        let policy = AugmentationPolicy {
            gaussian_sigma: 0.0,
            mask_probability: 0.0,
        };
        let x = vec![0.5, -1.25, 3.0];
        assert_eq!(augment(&x, &policy, 99), x);
    }

    #[test]
    fn augmentation_is_seeded_and_views_differ() {
        let policy = AugmentationPolicy {
            gaussian_sigma: 0.1,
            mask_probability: 0.1,
        };
        let x = vec![0.5, -1.25, 3.0, 0.0];
        let a = augment(&x, &policy, 1);
        let b = augment(&x, &policy, 1);
        let c = augment(&x, &policy, 2);
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn noise_statistics_match_sigma() {
        let policy = AugmentationPolicy {
            gaussian_sigma: 0.1,
            mask_probability: 0.0,
        };
        let x = vec![0.0; 10];
        let mut sum_sq = 0.0;
        let mut n = 0usize;
        for seed in 0..10_000 {
            for v in augment(&x, &policy, seed) {
                sum_sq += v * v;
                n += 1;
            }
        }
        let std = (sum_sq / n as f64).sqrt();
        assert!(
            (std - 0.1).abs() < 0.002,
            "empirical noise std {std} strays from 0.1"
        );
    }

    #[test]
    fn masking_statistics_match_probability() {
        let policy = AugmentationPolicy {
            gaussian_sigma: 0.0,
            mask_probability: 0.3,
        };
        let x = vec![1.0; 20];
        let mut zeros = 0usize;
        let mut n = 0usize;
        for seed in 0..5_000 {
            for v in augment(&x, &policy, seed) {
                if v == 0.0 {
                    zeros += 1;
                }
                n += 1;
            }
        }
        let rate = zeros as f64 / n as f64;
        assert!((rate - 0.3).abs() < 0.01, "empirical mask rate {rate}");
    }

    #[test]
    fn mixed_seeds_depend_on_all_parts_and_order() {
        let a = mix_seed(&[1, 2, 3]);
        assert_eq!(a, mix_seed(&[1, 2, 3]));
        assert_ne!(a, mix_seed(&[1, 2, 4]));
        assert_ne!(a, mix_seed(&[3, 2, 1]));
        assert_ne!(mix_seed(&[0]), mix_seed(&[0, 0]));
    }

    #[test]
    fn ten_slides_split_exactly_six_one_three() {
        let mut params = small_params(11);
        params.slides_per_class = 10;
        let ds = SyntheticDataset::generate(params).unwrap();
        let split = split_patient_level(&ds, [6, 1, 3], 0).unwrap();
        for class in 0..3 {
            let in_class: Vec<usize> = (0..ds.num_slides())
                .filter(|&s| ds.slide_labels[s] == class)
                .collect();
            let count = |sp: Split| {
                in_class
                    .iter()
                    .filter(|&&s| split.slide_split[s] == sp)
                    .count()
            };
            assert_eq!(count(Split::Train), 6);
            assert_eq!(count(Split::Validation), 1);
            assert_eq!(count(Split::Test), 3);
        }
    }

    #[test]
    fn twelve_slides_split_by_largest_remainder() {
        let mut params = small_params(12);
        params.slides_per_class = 12;
        let ds = SyntheticDataset::generate(params).unwrap();
        let split = split_patient_level(&ds, [6, 1, 3], 0).unwrap();
        // 12 * [0.6, 0.1, 0.3] = [7.2, 1.2, 3.6]; the leftover goes to test
        for class in 0..3 {
            let counts: Vec<usize> = Split::ALL
                .iter()
                .map(|&sp| {
                    (0..ds.num_slides())
                        .filter(|&s| ds.slide_labels[s] == class && split.slide_split[s] == sp)
                        .count()
                })
                .collect();
            assert_eq!(counts, vec![7, 1, 4]);
        }
    }

    #[test]
    fn splits_are_disjoint_exhaustive_and_seeded() {
        let ds = SyntheticDataset::generate(small_params(13)).unwrap();
        let a = split_patient_level(&ds, [6, 1, 3], 5).unwrap();
        let b = split_patient_level(&ds, [6, 1, 3], 5).unwrap();
        let c = split_patient_level(&ds, [6, 1, 3], 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        let total: usize = Split::ALL.iter().map(|&sp| a.slides_in(sp).len()).sum();
        assert_eq!(total, ds.num_slides());
        // patch views match slide membership
        let train_patches = a.patch_indices(&ds, Split::Train);
        for &p in &train_patches {
            assert_eq!(a.slide_split[ds.slide_of_patch(p)], Split::Train);
        }
    }

    #[test]
    fn too_few_slides_for_three_splits() {
        let mut params = small_params(14);
        params.slides_per_class = 2;
        let ds = SyntheticDataset::generate(params).unwrap();
        assert!(matches!(
            split_patient_level(&ds, [6, 1, 3], 0),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn embeddings_round_trip_bit_exactly() {
        use rand::Rng;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vectors.lemb");
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        let ids: Vec<u64> = (0..10_000).map(|i| i * 3 + 1).collect();
        let vectors: Vec<Vec<f64>> = (0..10_000)
            .map(|_| (0..8).map(|_| rng.random_range(-5.0..5.0)).collect())
            .collect();
        write_embeddings(&path, &ids, &vectors).unwrap();
        let (rids, rvecs) = read_embeddings(&path).unwrap();
        assert_eq!(rids, ids);
        assert_eq!(rvecs.len(), vectors.len());
        for (a, b) in rvecs.iter().zip(&vectors) {
            let ab: Vec<u64> = a.iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u64> = b.iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb);
        }
    }

    #[test]
    fn embedding_write_validates_shapes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vectors.lemb");
        assert!(matches!(
            write_embeddings(&path, &[1], &[vec![1.0], vec![2.0]]),
            Err(Error::ShapeMismatch(_))
        ));
        assert!(matches!(
            write_embeddings(&path, &[1, 2], &[vec![1.0], vec![2.0, 3.0]]),
            Err(Error::ShapeMismatch(_))
        ));
        assert!(write_embeddings(&path, &[], &[]).is_err());
        assert!(!path.exists(), "failed writes must not leave files");
    }

    #[test]
    fn embedding_read_distinguishes_failure_modes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vectors.lemb");
        write_embeddings(&path, &[7], &[vec![1.0, 2.0]]).unwrap();
        let good = std::fs::read(&path).unwrap();

        let mut bad = good.clone();
        bad[0] = b'X';
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(read_embeddings(&path), Err(Error::BadMagic { .. })));

        let mut bad = good.clone();
        bad[4] = 9;
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(
            read_embeddings(&path),
            Err(Error::VersionMismatch { .. })
        ));

        std::fs::write(&path, &good[..good.len() - 3]).unwrap();
        assert!(matches!(
            read_embeddings(&path),
            Err(Error::Truncated { .. })
        ));

        let mut bad = good.clone();
        bad.push(0);
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(
            read_embeddings(&path),
            Err(Error::Malformed { .. })
        ));

        assert!(matches!(
            read_embeddings(&dir.path().join("absent.lemb")),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn csv_import_parses_and_validates() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vectors.csv");
        std::fs::write(&path, "id,a,b\n0, 1.5, -2.0\n1, 0.25, 3.0\n\n# comment\n2,0,1\n")
            .unwrap();
        let (ids, vecs) = import_embeddings_csv(&path).unwrap();
        assert_eq!(ids, vec![0, 1, 2]);
        assert_eq!(vecs[0], vec![1.5, -2.0]);
        assert_eq!(vecs[2], vec![0.0, 1.0]);

        std::fs::write(&path, "0,1.0\n1,2.0,3.0\n").unwrap();
        assert!(matches!(
            import_embeddings_csv(&path),
            Err(Error::Malformed { .. })
        ));
        std::fs::write(&path, "0,1.0\nx,2.0\n").unwrap();
        assert!(matches!(
            import_embeddings_csv(&path),
            Err(Error::Malformed { .. })
        ));
        std::fs::write(&path, "# nothing\n").unwrap();
        assert!(matches!(
            import_embeddings_csv(&path),
            Err(Error::Malformed { .. })
        ));
    }

    #[test]
    fn dataset_save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = SyntheticDataset::generate(small_params(60)).unwrap();
        let split = split_patient_level(&ds, [6, 1, 3], 60).unwrap();
        save_dataset(dir.path(), &ds, &split).unwrap();
        let (loaded, loaded_split) = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded.params, ds.params);
        assert_eq!(loaded.slide_labels, ds.slide_labels);
        assert_eq!(loaded.lesion, ds.lesion);
        assert_eq!(loaded_split, split);
        for (a, b) in loaded.patches.iter().zip(&ds.patches) {
            let ab: Vec<u64> = a.iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u64> = b.iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb);
        }
    }

    #[test]
    fn dataset_files_are_byte_deterministic() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        for dir in [&d1, &d2] {
            let ds = SyntheticDataset::generate(small_params(61)).unwrap();
            let split = split_patient_level(&ds, [6, 1, 3], 61).unwrap();
            save_dataset(dir.path(), &ds, &split).unwrap();
        }
        for name in [DATASET_MANIFEST, DATASET_PATCHES] {
            let a = std::fs::read(d1.path().join(name)).unwrap();
            let b = std::fs::read(d2.path().join(name)).unwrap();
            assert_eq!(a, b, "{name} differs between identical runs");
        }
        assert_eq!(
            dataset_fingerprint(d1.path()).unwrap(),
            dataset_fingerprint(d2.path()).unwrap()
        );
    }
}
