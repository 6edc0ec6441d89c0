//! Synthetic multisource benchmark: source geometry, generated splits,
//! oversampling/augmentation, and the on-disk split format.

mod format;
mod sampling;
mod synth;

use std::fmt::Write as _;

pub use format::{read_split, read_split_bytes, write_split, write_split_bytes, FORMAT_VERSION, MAGIC};
pub use sampling::{augment_shift, oversample_weights, shift_image, BatchSampler};
pub use synth::{class_counts, gen_dataset, GeneratorConfig};

use crate::encoder::EncoderStyle;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Role {
    /// Object centered, no location uncertainty.
    Reference,
    /// Object displaced by an unknown registration offset.
    Additional,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Reference => "reference",
            Role::Additional => "additional",
        }
    }
}

/// Geometry of one imaging source.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct SourceSpec {
    pub name: String,
    pub channels: usize,
    pub neighborhood: usize,
    pub object_size: usize,
    pub window: usize,
    pub role: Role,
    /// Largest per-axis displacement of the object from the center.
    pub offset_jitter: usize,
    pub encoder: EncoderStyle,
}

impl SourceSpec {
    /// Centered reference: 3×25×25, object fills the neighborhood.
    pub fn reference() -> Self {
        Self {
            name: "ref".into(),
            channels: 3,
            neighborhood: 25,
            object_size: 25,
            window: 25,
            role: Role::Reference,
            offset_jitter: 0,
            encoder: EncoderStyle::Reference,
        }
    }

    /// Multispectral-like: 8×12×12, 4×4 object, 5×5 proposals.
    pub fn additional_a() -> Self {
        Self {
            name: "a".into(),
            channels: 8,
            neighborhood: 12,
            object_size: 4,
            window: 5,
            role: Role::Additional,
            offset_jitter: 4,
            encoder: EncoderStyle::Flat,
        }
    }

    /// Elevation-like: 1×24×24, 8×8 object, 8×8 proposals.
    pub fn additional_b() -> Self {
        Self {
            name: "b".into(),
            channels: 1,
            neighborhood: 24,
            object_size: 8,
            window: 8,
            role: Role::Additional,
            offset_jitter: 8,
            encoder: EncoderStyle::Pooled,
        }
    }

    pub fn defaults() -> Vec<Self> {
        vec![Self::reference(), Self::additional_a(), Self::additional_b()]
    }

    /// Top-left coordinate of a centered object.
    pub fn center(&self) -> usize {
        (self.neighborhood - self.object_size) / 2
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("source `{}`: {m}", self.name)));
        if self.channels == 0 || self.neighborhood == 0 || self.object_size == 0 || self.window == 0 {
            return bad("extents must be positive".into());
        }
        if self.object_size > self.neighborhood {
            return bad(format!(
                "object {} larger than neighborhood {}",
                self.object_size, self.neighborhood
            ));
        }
        if self.window > self.neighborhood {
            return bad(format!("window {} larger than neighborhood {}", self.window, self.neighborhood));
        }
        if self.role == Role::Reference && self.offset_jitter != 0 {
            return bad("reference sources cannot have offset jitter".into());
        }
        let c = self.center();
        if self.offset_jitter > c || self.offset_jitter > self.neighborhood - self.object_size - c {
            return bad(format!("jitter {} pushes the object outside", self.offset_jitter));
        }
        if self.name.is_empty() || self.name.contains(char::is_whitespace) {
            return bad("name must be a non-empty token".into());
        }
        Ok(())
    }

    pub(crate) fn to_record(&self) -> String {
        format!(
            "{} role={} channels={} neighborhood={} object={} window={} jitter={} encoder={}",
            self.name,
            self.role.as_str(),
            self.channels,
            self.neighborhood,
            self.object_size,
            self.window,
            self.offset_jitter,
            self.encoder.as_str()
        )
    }

    pub(crate) fn from_record(s: &str) -> Result<Self> {
        let mut parts = s.split_whitespace();
        let name = parts
            .next()
            .ok_or_else(|| Error::format("empty source record"))?
            .to_string();
        let mut spec = SourceSpec {
            name,
            ..SourceSpec::reference()
        };
        for kv in parts {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::format(format!("bad source field `{kv}`")))?;
            let num = || v.parse::<usize>().map_err(|_| Error::format(format!("bad number in `{kv}`")));
            match k {
                "role" => {
                    spec.role = match v {
                        "reference" => Role::Reference,
                        "additional" => Role::Additional,
                        _ => return Err(Error::format(format!("bad role `{v}`"))),
                    }
                }
                "channels" => spec.channels = num()?,
                "neighborhood" => spec.neighborhood = num()?,
                "object" => spec.object_size = num()?,
                "window" => spec.window = num()?,
                "jitter" => spec.offset_jitter = num()?,
                "encoder" => spec.encoder = EncoderStyle::parse(v)?,
                _ => return Err(Error::format(format!("unknown source field `{k}`"))),
            }
        }
        spec.validate()?;
        Ok(spec)
    }
}

/// Parses a sources file: one `name key=value ...` record per line; `#`
/// starts a comment.
pub fn parse_sources(text: &str) -> Result<Vec<SourceSpec>> {
    let specs: Vec<SourceSpec> = text
        .lines()
        .map(|l| l.split('#').next().unwrap_or("").trim())
        .filter(|l| !l.is_empty())
        .map(SourceSpec::from_record)
        .collect::<Result<_>>()?;
    if specs.is_empty() {
        return Err(Error::Config("no sources defined".into()));
    }
    Ok(specs)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::format(format!("unknown split `{s}`"))),
        }
    }
}

/// Dataset-wide description shared by all split files.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub classes: usize,
    pub seed: u64,
    pub difficulty: f64,
    pub imbalance: f64,
    pub base_count: usize,
    pub sources: Vec<SourceSpec>,
    /// Per-class totals.
    pub counts: Vec<usize>,
    /// Per-class counts for train, val, test.
    pub split_counts: [Vec<usize>; 3],
}

impl DatasetManifest {
    pub fn to_text(&self) -> String {
        let join = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        let mut s = String::new();
        writeln!(s, "format: MSWS/{FORMAT_VERSION}").unwrap();
        writeln!(s, "classes: {}", self.classes).unwrap();
        writeln!(s, "seed: {}", self.seed).unwrap();
        writeln!(s, "difficulty: {}", self.difficulty).unwrap();
        writeln!(s, "imbalance: {}", self.imbalance).unwrap();
        writeln!(s, "base_count: {}", self.base_count).unwrap();
        writeln!(s, "sources: {}", self.sources.len()).unwrap();
        for (i, src) in self.sources.iter().enumerate() {
            writeln!(s, "source.{i}: {}", src.to_record()).unwrap();
        }
        writeln!(s, "counts: {}", join(&self.counts)).unwrap();
        for (split, counts) in Split::ALL.iter().zip(&self.split_counts) {
            writeln!(s, "{}: {}", split.as_str(), join(counts)).unwrap();
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut fields = std::collections::HashMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once(": ")
                .ok_or_else(|| Error::format(format!("manifest line `{line}`")))?;
            fields.insert(k.to_string(), v.to_string());
        }
        let get = |k: &str| {
            fields
                .get(k)
                .map(String::as_str)
                .ok_or_else(|| Error::format(format!("manifest missing `{k}`")))
        };
        fn num<T: std::str::FromStr>(k: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::format(format!("manifest `{k}`: bad value `{v}`")))
        }
        let list = |k: &str| -> Result<Vec<usize>> {
            let v = get(k)?;
            if v.is_empty() {
                return Ok(Vec::new());
            }
            v.split(',').map(|x| num(k, x)).collect()
        };
        let n_sources: usize = num("sources", get("sources")?)?;
        let sources = (0..n_sources)
            .map(|i| SourceSpec::from_record(get(&format!("source.{i}"))?))
            .collect::<Result<Vec<_>>>()?;
        let m = Self {
            classes: num("classes", get("classes")?)?,
            seed: num("seed", get("seed")?)?,
            difficulty: num("difficulty", get("difficulty")?)?,
            imbalance: num("imbalance", get("imbalance")?)?,
            base_count: num("base_count", get("base_count")?)?,
            sources,
            counts: list("counts")?,
            split_counts: [list("train")?, list("val")?, list("test")?],
        };
        if m.counts.len() != m.classes || m.split_counts.iter().any(|c| c.len() != m.classes) {
            return Err(Error::format("manifest count lists disagree with class count"));
        }
        Ok(m)
    }

    pub fn source_index(&self, name: &str) -> Result<usize> {
        self.sources
            .iter()
            .position(|s| s.name == name)
            .ok_or_else(|| Error::Config(format!("unknown source `{name}`")))
    }
}

/// Ground-truth object placement, kept apart from everything a model sees.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct GroundTruth {
    /// Per source, per sample: object top-left (row, col).
    pub offsets: Vec<Vec<(i16, i16)>>,
}

/// One generated sample across all sources.
#[derive(Clone, Debug, PartialEq)]
pub struct MultisourceSample {
    /// Per source: [B, N, N].
    pub images: Vec<Tensor<f32>>,
    pub label: usize,
    pub offsets: Vec<(i16, i16)>,
}

/// One split of the benchmark.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub split: Split,
    pub manifest: DatasetManifest,
    /// Per source: [S, B, N, N].
    pub images: Vec<Tensor<f32>>,
    pub labels: Vec<u16>,
    truth: GroundTruth,
}

impl Dataset {
    pub fn new(
        split: Split,
        manifest: DatasetManifest,
        images: Vec<Tensor<f32>>,
        labels: Vec<u16>,
        truth: GroundTruth,
    ) -> Result<Self> {
        let n = labels.len();
        if images.len() != manifest.sources.len() || truth.offsets.len() != images.len() {
            return Err(Error::format("source count mismatch"));
        }
        for (img, src) in images.iter().zip(&manifest.sources) {
            let want = [n, src.channels, src.neighborhood, src.neighborhood];
            if img.shape() != want {
                return Err(Error::Geometry(format!(
                    "source `{}`: tensor {:?}, expected {want:?}",
                    src.name,
                    img.shape()
                )));
            }
        }
        if truth.offsets.iter().any(|o| o.len() != n) {
            return Err(Error::format("offset table length mismatch"));
        }
        if let Some(&l) = labels.iter().find(|&&l| l as usize >= manifest.classes) {
            return Err(Error::LabelOutOfRange {
                label: l as usize,
                classes: manifest.classes,
            });
        }
        Ok(Self {
            split,
            manifest,
            images,
            labels,
            truth,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.manifest.classes
    }

    pub fn sources(&self) -> &[SourceSpec] {
        &self.manifest.sources
    }

    pub fn ground_truth(&self) -> &GroundTruth {
        &self.truth
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.classes()];
        for &l in &self.labels {
            c[l as usize] += 1;
        }
        c
    }

    /// Image of sample `i` from source `s`, shaped [B, N, N].
    pub fn image(&self, source: usize, i: usize) -> Tensor<f32> {
        self.images[source].index_first(i)
    }

    pub fn sample(&self, i: usize) -> MultisourceSample {
        MultisourceSample {
            images: (0..self.images.len()).map(|s| self.image(s, i)).collect(),
            label: self.labels[i] as usize,
            offsets: self.truth.offsets.iter().map(|o| o[i]).collect(),
        }
    }

    /// Stacks the requested samples for the requested sources.
    pub fn batch(&self, indices: &[usize], sources: &[usize]) -> Batch {
        let inputs = sources
            .iter()
            .map(|&s| {
                let img = &self.images[s];
                let inner: usize = img.shape()[1..].iter().product();
                let mut data = Vec::with_capacity(inner * indices.len());
                for &i in indices {
                    data.extend_from_slice(&img.data()[i * inner..(i + 1) * inner]);
                }
                let mut shape = img.shape().to_vec();
                shape[0] = indices.len();
                Tensor::new(shape, data).expect("batch shape")
            })
            .collect();
        Batch {
            inputs,
            labels: indices.iter().map(|&i| self.labels[i] as usize).collect(),
        }
    }
}

/// Model-facing batch: images only, no ground-truth placement.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// One [B, Ch, N, N] tensor per consumed source.
    pub inputs: Vec<Tensor<f32>>,
    pub labels: Vec<usize>,
}

/// The three splits of one generated benchmark.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitDataset {
    pub manifest: DatasetManifest,
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

impl SplitDataset {
    pub fn get(&self, split: Split) -> &Dataset {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn sources(&self) -> &[SourceSpec] {
        &self.manifest.sources
    }

    /// Loads `train.msws`, `val.msws` and `test.msws` from `dir`.
    pub fn load(dir: &std::path::Path) -> Result<Self> {
        let train = read_split(&dir.join("train.msws"))?;
        let val = read_split(&dir.join("val.msws"))?;
        let test = read_split(&dir.join("test.msws"))?;
        if train.manifest != val.manifest || train.manifest != test.manifest {
            return Err(Error::format("split files come from different datasets"));
        }
        Ok(Self {
            manifest: train.manifest.clone(),
            train,
            val,
            test,
        })
    }

    /// Writes the three split files and `manifest.txt` into `dir`.
    pub fn save(&self, dir: &std::path::Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for split in Split::ALL {
            write_split(&dir.join(format!("{}.msws", split.as_str())), self.get(split))?;
        }
        std::fs::write(dir.join("manifest.txt"), self.manifest.to_text())?;
        Ok(())
    }

    /// SHA-256 over the serialized split files, hex encoded.
    pub fn content_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for split in Split::ALL {
            h.update(write_split_bytes(self.get(split)));
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_geometry_valid() {
        for s in SourceSpec::defaults() {
            s.validate().unwrap();
        }
        let a = SourceSpec::additional_a();
        assert_eq!((a.channels, a.neighborhood, a.window), (8, 12, 5));
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut s = SourceSpec::reference();
        s.offset_jitter = 1;
        assert!(s.validate().is_err());
        let mut s = SourceSpec::additional_a();
        s.object_size = 13;
        assert!(s.validate().is_err());
        let mut s = SourceSpec::additional_a();
        s.offset_jitter = 5;
        assert!(s.validate().is_err());
    }

    #[test]
    fn source_records_parse() {
        let text = "# custom\nref role=reference channels=3 neighborhood=9 object=9 window=9 jitter=0 encoder=reference\n\
                    x role=additional channels=2 neighborhood=10 object=4 window=5 jitter=3 encoder=flat\n";
        let specs = parse_sources(text).unwrap();
        assert_eq!(specs.len(), 2);
        assert_eq!(specs[1].offset_jitter, 3);
        assert_eq!(specs[1].encoder, EncoderStyle::Flat);
        assert!(parse_sources("").is_err());
    }
}
