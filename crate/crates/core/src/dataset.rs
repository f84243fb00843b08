//! Dataset manifests, synthetic desk-scale datasets and training augmentation.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectral::{luma, Image, PixelRange};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Visible,
    Infrared,
}

impl Modality {
    pub const ALL: [Modality; 2] = [Modality::Visible, Modality::Infrared];

    pub fn index(self) -> usize {
        match self {
            Modality::Visible => 0,
            Modality::Infrared => 1,
        }
    }

    pub fn other(self) -> Modality {
        match self {
            Modality::Visible => Modality::Infrared,
            Modality::Infrared => Modality::Visible,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Visible => "visible",
            Modality::Infrared => "infrared",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "visible" | "rgb" | "v" => Ok(Modality::Visible),
            "infrared" | "ir" | "thermal" | "t" => Ok(Modality::Infrared),
            other => Err(Error::Validation(format!("unknown modality '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Query,
    Gallery,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Query => "query",
            Split::Gallery => "gallery",
        }
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "query" => Ok(Split::Query),
            "gallery" => Ok(Split::Gallery),
            other => Err(Error::Validation(format!("unknown split '{other}'"))),
        }
    }
}

/// Where the pixels of a record live.
#[derive(Debug, Clone, PartialEq)]
pub enum ImageSource {
    /// Path as written in the manifest, resolved against the manifest root.
    Path(PathBuf),
    Buffer(Arc<Image>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub source: ImageSource,
    /// Contiguous label. Train identities occupy `0..num_identities`.
    pub identity: usize,
    /// Identity as it appears in the source manifest.
    pub source_identity: u64,
    pub modality: Modality,
    pub camera: u32,
    pub split: Split,
}

#[derive(Debug, Deserialize, Serialize)]
struct CsvRow {
    path: String,
    identity: u64,
    modality: String,
    camera: u32,
    split: String,
}

/// Validated, immutable collection of records.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    records: Vec<ImageRecord>,
    num_identities: usize,
    /// Train label -> record indices per modality.
    index: Vec<[Vec<usize>; 2]>,
    root: Option<PathBuf>,
}

impl DatasetManifest {
    /// Validates the records and re-indexes identities to contiguous labels.
    pub fn from_records(records: Vec<ImageRecord>) -> Result<Self> {
        Self::build(records, None)
    }

    fn build(mut records: Vec<ImageRecord>, root: Option<PathBuf>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Manifest("no records".into()));
        }
        let train_ids: BTreeSet<u64> = records
            .iter()
            .filter(|r| r.split == Split::Train)
            .map(|r| r.source_identity)
            .collect();
        let other_ids: BTreeSet<u64> = records
            .iter()
            .map(|r| r.source_identity)
            .filter(|id| !train_ids.contains(id))
            .collect();
        let labels: BTreeMap<u64, usize> = train_ids
            .iter()
            .chain(other_ids.iter())
            .enumerate()
            .map(|(label, &id)| (id, label))
            .collect();
        let num_identities = train_ids.len();
        let mut index = vec![[Vec::new(), Vec::new()]; num_identities];
        for (i, record) in records.iter_mut().enumerate() {
            record.identity = labels[&record.source_identity];
            if record.split == Split::Train {
                index[record.identity][record.modality.index()].push(i);
            }
        }
        for (&id, &label) in &labels {
            if label >= num_identities {
                continue;
            }
            for modality in Modality::ALL {
                if index[label][modality.index()].is_empty() {
                    return Err(Error::Manifest(format!(
                        "train identity {id} has no {modality} records"
                    )));
                }
            }
        }
        Ok(Self {
            records,
            num_identities,
            index,
            root,
        })
    }

    pub fn records(&self) -> &[ImageRecord] {
        &self.records
    }

    pub fn record(&self, index: usize) -> &ImageRecord {
        &self.records[index]
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Number of train identities (classifier width).
    pub fn num_identities(&self) -> usize {
        self.num_identities
    }

    pub fn root(&self) -> Option<&Path> {
        self.root.as_deref()
    }

    /// Train record indices of `label` in `modality`.
    pub fn train_records_of(&self, label: usize, modality: Modality) -> &[usize] {
        &self.index[label][modality.index()]
    }

    pub fn num_train_records(&self) -> usize {
        self.index.iter().map(|m| m[0].len() + m[1].len()).sum()
    }

    pub fn indices_where(&self, mut pred: impl FnMut(&ImageRecord) -> bool) -> Vec<usize> {
        self.records
            .iter()
            .enumerate()
            .filter(|(_, r)| pred(r))
            .map(|(i, _)| i)
            .collect()
    }

    /// Decodes the pixels of record `index`.
    pub fn load_image(&self, index: usize) -> Result<Image> {
        match &self.records[index].source {
            ImageSource::Buffer(img) => Ok(img.as_ref().clone()),
            ImageSource::Path(p) => {
                let full = match &self.root {
                    Some(root) if p.is_relative() => root.join(p),
                    _ => p.clone(),
                };
                Image::open(full)
            }
        }
    }

    /// Writes the manifest CSV. Buffer-backed records must be materialized first.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut writer = csv::Writer::from_path(path)?;
        for (i, record) in self.records.iter().enumerate() {
            let ImageSource::Path(p) = &record.source else {
                return Err(Error::ManifestRecord {
                    index: i,
                    message: "in-memory record has no path; write the dataset to disk first".into(),
                });
            };
            writer.serialize(CsvRow {
                path: p.to_string_lossy().into_owned(),
                identity: record.source_identity,
                modality: record.modality.as_str().to_string(),
                camera: record.camera,
                split: record.split.as_str().to_string(),
            })?;
        }
        writer.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    /// Saves every image as PNG under `dir` and writes `dir/manifest.csv`.
    pub fn write_to_disk(&self, dir: impl AsRef<Path>) -> Result<DatasetManifest> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir.join("images")).map_err(|e| Error::io(dir, e))?;
        let mut records = self.records.clone();
        for (i, record) in records.iter_mut().enumerate() {
            let rel = PathBuf::from("images").join(format!(
                "{:05}_{}_{:04}_c{}.png",
                i,
                record.split.as_str(),
                record.source_identity,
                record.camera
            ));
            self.load_image(i)?.save(dir.join(&rel))?;
            record.source = ImageSource::Path(rel);
        }
        let manifest = Self::build(records, Some(dir.to_path_buf()))?;
        manifest.save(dir.join("manifest.csv"))?;
        Ok(manifest)
    }
}

/// Parses and validates a CSV manifest (`path,identity,modality,camera,split`).
pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let mut records = Vec::new();
    for (index, row) in reader.deserialize::<CsvRow>().enumerate() {
        let row = row.map_err(|e| Error::ManifestRecord {
            index,
            message: e.to_string(),
        })?;
        let bad = |e: Error| Error::ManifestRecord {
            index,
            message: e.to_string(),
        };
        records.push(ImageRecord {
            source: ImageSource::Path(PathBuf::from(row.path)),
            identity: 0,
            source_identity: row.identity,
            modality: row.modality.parse().map_err(bad)?,
            camera: row.camera,
            split: row.split.parse().map_err(bad)?,
        });
    }
    let root = path.parent().map(Path::to_path_buf);
    DatasetManifest::build(records, root)
}

/// Parameters of a procedurally rendered dataset with the benchmark schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub num_identities: usize,
    pub images_per_identity_per_modality: usize,
    /// `(height, width)`
    pub image_size: (usize, usize),
    pub seed: u64,
    /// Strength of the infrared intensity remapping, in `[0, 1]`.
    pub modality_shift: f64,
    /// Standard deviation of additive pixel noise on the 0..255 scale.
    pub noise: f64,
    /// Extra identities rendered into the query (infrared) and gallery (visible) splits.
    pub num_test_identities: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_identities: 8,
            images_per_identity_per_modality: 8,
            image_size: (32, 16),
            seed: 7,
            modality_shift: 0.3,
            noise: 6.0,
            num_test_identities: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_identities == 0 || self.images_per_identity_per_modality == 0 {
            return Err(Error::Config("synthetic counts must be at least 1".into()));
        }
        if self.image_size.0 < 8 || self.image_size.1 < 8 {
            return Err(Error::Config(format!(
                "synthetic image size {:?} below 8x8",
                self.image_size
            )));
        }
        if !(0.0..=1.0).contains(&self.modality_shift) || self.noise.is_nan() || self.noise < 0.0 {
            return Err(Error::Config(
                "modality_shift must lie in [0, 1] and noise must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Per-identity appearance: body-part colors plus a torso texture.
struct Appearance {
    head: [f64; 3],
    torso: [f64; 3],
    legs: [f64; 3],
    stripe: [f64; 3],
    stripe_period: usize,
    vertical_stripes: bool,
    bag_left: Option<bool>,
}

impl Appearance {
    fn draw(rng: &mut ChaCha8Rng) -> Self {
        let color = |rng: &mut ChaCha8Rng| [0, 1, 2].map(|_| rng.gen_range(20.0..235.0));
        Self {
            head: color(rng),
            torso: color(rng),
            legs: color(rng),
            stripe: color(rng),
            stripe_period: rng.gen_range(2..6),
            vertical_stripes: rng.gen_bool(0.5),
            bag_left: if rng.gen_bool(0.6) {
                Some(rng.gen_bool(0.5))
            } else {
                None
            },
        }
    }

    /// Clean RGB value at `(row, col)` for a figure translated by `(dy, dx)`.
    fn color_at(&self, row: isize, col: isize, h: usize, w: usize) -> [f64; 3] {
        let (h, w) = (h as isize, w as isize);
        let background = [128.0, 128.0, 128.0];
        if row < 0 || col < 0 || row >= h || col >= w {
            return background;
        }
        let margin = (w / 6).max(1);
        if col < margin || col >= w - margin {
            return background;
        }
        let head_end = h / 5;
        let torso_end = (3 * h) / 5;
        if row < head_end {
            let center = w / 2;
            if (col - center).abs() <= w / 5 {
                self.head
            } else {
                background
            }
        } else if row < torso_end {
            if let Some(left) = self.bag_left {
                let bag_cols = if left {
                    margin..margin + (w / 6).max(1)
                } else {
                    w - margin - (w / 6).max(1)..w - margin
                };
                if bag_cols.contains(&col) && row > (head_end + torso_end) / 2 {
                    return self.stripe.map(|c| 255.0 - c);
                }
            }
            let t = if self.vertical_stripes { col } else { row } as usize;
            if (t / self.stripe_period).is_multiple_of(2) {
                self.torso
            } else {
                self.stripe
            }
        } else {
            let gap = (w / 2 - 1..=w / 2).contains(&col) && row > (4 * h) / 5;
            if gap {
                background
            } else {
                self.legs
            }
        }
    }
}

/// Renders a deterministic dataset whose identity signal survives grayscale conversion.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<DatasetManifest> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (h, w) = spec.image_size;
    let total_ids = spec.num_identities + spec.num_test_identities;
    let appearances: Vec<Appearance> = (0..total_ids).map(|_| Appearance::draw(&mut rng)).collect();
    let max_dy = (h / 16).max(1) as isize;
    let max_dx = (w / 16).max(1) as isize;
    let shift = spec.modality_shift;

    let mut records = Vec::with_capacity(total_ids * spec.images_per_identity_per_modality * 2);
    for (id, look) in appearances.iter().enumerate() {
        let is_train = id < spec.num_identities;
        for shot in 0..spec.images_per_identity_per_modality {
            // Pose jitter is shared by the two modalities of one shot.
            let dy = rng.gen_range(-max_dy..=max_dy);
            let dx = rng.gen_range(-max_dx..=max_dx);
            let gain = rng.gen_range(0.85..1.15);
            for modality in Modality::ALL {
                let mut data = Vec::with_capacity(h * w * 3);
                for row in 0..h {
                    for col in 0..w {
                        let c = look.color_at(row as isize - dy, col as isize - dx, h, w);
                        let c = c.map(|v| (v * gain).clamp(0.0, 255.0));
                        match modality {
                            Modality::Visible => {
                                for v in c {
                                    let n = spec.noise * rng.sample::<f64, _>(StandardNormal);
                                    data.push((v + n).clamp(0.0, 255.0));
                                }
                            }
                            Modality::Infrared => {
                                let y = luma(c[0], c[1], c[2]);
                                let remapped = (1.0 - shift) * y + shift * (255.0 - y);
                                let n = spec.noise * rng.sample::<f64, _>(StandardNormal);
                                let v = (remapped + n).clamp(0.0, 255.0);
                                data.extend_from_slice(&[v, v, v]);
                            }
                        }
                    }
                }
                let image = Image::new(h, w, 3, PixelRange::Byte, data)?;
                let split = match (is_train, modality) {
                    (true, _) => Split::Train,
                    (false, Modality::Infrared) => Split::Query,
                    (false, Modality::Visible) => Split::Gallery,
                };
                let camera = match modality {
                    Modality::Visible => 1 + (shot % 2) as u32,
                    Modality::Infrared => 3 + 3 * (shot % 2) as u32,
                };
                records.push(ImageRecord {
                    source: ImageSource::Buffer(Arc::new(image)),
                    identity: 0,
                    source_identity: id as u64,
                    modality,
                    camera,
                    split,
                });
            }
        }
    }
    DatasetManifest::from_records(records)
}

/// Training-time augmentation settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    /// Zero padding added on every side before the random crop.
    pub pad: usize,
    /// Crop window `(height, width)`; defaults to the input size.
    pub crop: Option<(usize, usize)>,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            pad: 10,
            crop: None,
        }
    }
}

/// One realization of the random augmentation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AugmentDraw {
    pub flip: bool,
    /// Crop origin in the padded image; `pad` on both axes is the centered crop.
    pub offset_y: usize,
    pub offset_x: usize,
}

impl AugmentDraw {
    pub fn neutral(config: &AugmentConfig) -> Self {
        Self {
            flip: false,
            offset_y: config.pad,
            offset_x: config.pad,
        }
    }

    pub fn sample<R: Rng + ?Sized>(config: &AugmentConfig, image: &Image, rng: &mut R) -> Result<Self> {
        let (ch, cw) = crop_window(config, image)?;
        let flip = rng.gen_bool(config.flip_prob.clamp(0.0, 1.0));
        let offset_y = rng.gen_range(0..=image.height() + 2 * config.pad - ch);
        let offset_x = rng.gen_range(0..=image.width() + 2 * config.pad - cw);
        Ok(Self {
            flip,
            offset_y,
            offset_x,
        })
    }
}

fn crop_window(config: &AugmentConfig, image: &Image) -> Result<(usize, usize)> {
    let (ch, cw) = config.crop.unwrap_or((image.height(), image.width()));
    if image.height() < ch || image.width() < cw {
        return Err(Error::Shape(format!(
            "image {}x{} smaller than crop window {ch}x{cw}",
            image.height(),
            image.width()
        )));
    }
    Ok((ch, cw))
}

/// Applies a fixed draw: zero-pad, crop, then optionally mirror.
pub fn augment_with(image: &Image, config: &AugmentConfig, draw: AugmentDraw) -> Result<Image> {
    let (ch, cw) = crop_window(config, image)?;
    let pad = config.pad;
    if draw.offset_y + ch > image.height() + 2 * pad || draw.offset_x + cw > image.width() + 2 * pad {
        return Err(Error::Shape("crop offset outside padded image".into()));
    }
    let c = image.channels();
    let mut data = Vec::with_capacity(ch * cw * c);
    for row in 0..ch {
        for col in 0..cw {
            let col = if draw.flip { cw - 1 - col } else { col };
            let sy = (row + draw.offset_y) as isize - pad as isize;
            let sx = (col + draw.offset_x) as isize - pad as isize;
            if sy < 0 || sx < 0 || sy >= image.height() as isize || sx >= image.width() as isize {
                data.extend(std::iter::repeat_n(0.0, c));
            } else {
                data.extend_from_slice(image.pixel(sy as usize, sx as usize));
            }
        }
    }
    Image::new(ch, cw, c, image.range(), data)
}

/// Random horizontal flip plus pad-and-crop.
pub fn augment_train<R: Rng + ?Sized>(image: &Image, config: &AugmentConfig, rng: &mut R) -> Result<Image> {
    let draw = AugmentDraw::sample(config, image, rng)?;
    augment_with(image, config, draw)
}
