//! Pretrain, initialize, fine-tune: builds every model kind from its
//! prerequisites, caching trained checkpoints by content hash.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::Checkpoint;
use super::{evaluate, train, EpochRecord, Evaluation, History, TrainConfig};
use crate::binio::write_atomic;
use crate::data::{Split, SplitDataset};
use crate::encoder::Width;
use crate::error::{Error, Result};
use crate::fusion::Scheme;
use crate::model::{prefix, ModelKind, ModelSpec, Network};
use crate::tensor::ParamStore;

/// Overrides the checkpoint cache location.
pub const CACHE_ENV: &str = "MSATTN_CACHE_DIR";

/// Bumped whenever the training recipe changes so stale caches miss.
const RECIPE_VERSION: &str = "recipe 1";

pub fn cache_dir_from_env() -> Option<PathBuf> {
    std::env::var_os(CACHE_ENV).filter(|v| !v.is_empty()).map(PathBuf::from)
}

/// One parameter transfer performed while assembling a model.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InitRecord {
    /// Model being assembled, as `kind(sources)`.
    pub target: String,
    /// Model the values came from.
    pub source: String,
    pub from_prefix: String,
    pub to_prefix: String,
    /// Names of the copied parameters in the target.
    pub params: Vec<String>,
    /// Whether the copied parameters stay fixed during fine-tuning.
    pub frozen: bool,
}

/// A model with its parameters and training record.
#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub spec: ModelSpec,
    pub net: Network,
    pub store: ParamStore<f32>,
    pub history: History,
    pub best_epoch: usize,
    pub best_val: f64,
    pub hash: u64,
    pub from_cache: bool,
}

impl TrainedModel {
    /// Dataset source positions in model input order. Models may choose their
    /// own region size; everything else must match the dataset.
    pub fn source_indices(&self, data: &SplitDataset) -> Result<Vec<usize>> {
        source_indices(&self.spec, data)
    }

    pub fn evaluate(&self, data: &SplitDataset, split: Split) -> Result<Evaluation> {
        evaluate(&self.net, &self.store, data.get(split), &self.source_indices(data)?)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(&self.store, self.hash, self.best_epoch as u32, self.best_val, None)
    }

    pub fn label(&self) -> String {
        label(&self.spec)
    }
}

fn label(spec: &ModelSpec) -> String {
    format!("{}({})", spec.kind.as_str(), spec.source_names().join(","))
}

pub fn source_indices(spec: &ModelSpec, data: &SplitDataset) -> Result<Vec<usize>> {
    spec.sources
        .iter()
        .map(|s| {
            let i = data.manifest.source_index(&s.name)?;
            let d = &data.sources()[i];
            let same = crate::data::SourceSpec { window: s.window, ..d.clone() } == *s;
            if !same {
                return Err(Error::Config(format!("source `{}` differs from the dataset's", s.name)));
            }
            Ok(i)
        })
        .collect()
}

/// Trains models together with everything they are initialized from.
#[derive(Debug)]
pub struct Pipeline<'a> {
    pub data: &'a SplitDataset,
    pub config: TrainConfig,
    pub width: Width,
    pub cache: Option<PathBuf>,
    /// Multiplies every dropout probability of the models built here.
    pub dropout_scale: f64,
    /// Refuse to train prerequisites; they must already be cached.
    pub pretrained_only: bool,
    pub log: Vec<InitRecord>,
    /// Number of training runs actually executed.
    pub runs: usize,
    data_hash: String,
    memo: HashMap<u64, TrainedModel>,
}

impl<'a> Pipeline<'a> {
    pub fn new(data: &'a SplitDataset, config: TrainConfig) -> Self {
        Self {
            data,
            config,
            width: Width::default(),
            cache: None,
            dropout_scale: 1.0,
            pretrained_only: false,
            log: Vec::new(),
            runs: 0,
            data_hash: data.content_hash(),
            memo: HashMap::new(),
        }
    }

    pub fn with_width(mut self, width: Width) -> Self {
        self.width = width;
        self
    }

    pub fn with_dropout_scale(mut self, scale: f64) -> Self {
        self.dropout_scale = scale;
        self
    }

    pub fn with_cache(mut self, dir: Option<PathBuf>) -> Self {
        self.cache = dir;
        self
    }

    pub fn data_hash(&self) -> &str {
        &self.data_hash
    }

    /// Default spec for `kind` over the named dataset sources.
    pub fn spec(&self, kind: ModelKind, sources: &[&str], scale: usize) -> Result<ModelSpec> {
        let specs = sources
            .iter()
            .map(|n| Ok(self.data.sources()[self.data.manifest.source_index(n)?].clone()))
            .collect::<Result<Vec<_>>>()?;
        let mut spec = ModelSpec::new(kind, self.data.manifest.classes, specs, self.width, scale)?;
        spec.scale_dropout(self.dropout_scale)?;
        Ok(spec)
    }

    /// Cache key: architecture, dataset content and training settings.
    pub fn key(&self, spec: &ModelSpec) -> u64 {
        spec.hash_with(&format!("{RECIPE_VERSION}\n{}\n{}", self.data_hash, self.config.to_text()))
    }

    fn cache_paths(&self, spec: &ModelSpec, key: u64) -> Option<(PathBuf, PathBuf)> {
        let dir = self.cache.as_ref()?;
        let stem = format!("{}-{key:016x}", spec.kind.as_str());
        Some((dir.join(format!("{stem}.msck")), dir.join(format!("{stem}.history.csv"))))
    }

    fn build(&self, spec: &ModelSpec, key: u64) -> Result<(Network, ParamStore<f32>)> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ key);
        let net = Network::build(spec, &mut store, &mut rng)?;
        Ok((net, store))
    }

    fn from_cache(&self, spec: &ModelSpec, key: u64) -> Result<Option<TrainedModel>> {
        let Some((ck_path, hist_path)) = self.cache_paths(spec, key) else {
            return Ok(None);
        };
        if !ck_path.exists() {
            return Ok(None);
        }
        let ck = Checkpoint::load(&ck_path, Some(key))?;
        let (net, mut store) = self.build(spec, key)?;
        ck.apply(&mut store)?;
        let history = match std::fs::File::open(&hist_path) {
            Ok(f) => History::read_csv(f)?,
            Err(_) => History::default(),
        };
        Ok(Some(TrainedModel {
            spec: spec.clone(),
            net,
            store,
            history,
            best_epoch: ck.epoch as usize,
            best_val: ck.best_val,
            hash: key,
            from_cache: true,
        }))
    }

    fn store_cache(&self, model: &TrainedModel, ck: &Checkpoint) -> Result<()> {
        let Some((ck_path, hist_path)) = self.cache_paths(&model.spec, model.hash) else {
            return Ok(());
        };
        std::fs::create_dir_all(ck_path.parent().unwrap_or(Path::new(".")))?;
        ck.save(&ck_path)?;
        write_atomic(&hist_path, model.history.to_csv_string().as_bytes())
    }

    /// Trains (or fetches) the model described by `spec`.
    pub fn run(&mut self, spec: &ModelSpec) -> Result<TrainedModel> {
        self.run_inner(spec, true)
    }

    fn prerequisite(&mut self, spec: &ModelSpec) -> Result<TrainedModel> {
        self.run_inner(spec, false)
    }

    fn run_inner(&mut self, spec: &ModelSpec, top: bool) -> Result<TrainedModel> {
        spec.validate()?;
        let key = self.key(spec);
        if let Some(m) = self.memo.get(&key) {
            return Ok(m.clone());
        }
        if let Some(m) = self.from_cache(spec, key)? {
            self.memo.insert(key, m.clone());
            return Ok(m);
        }
        if !top && self.pretrained_only {
            return Err(Error::Missing(format!("no cached checkpoint for prerequisite {}", label(spec))));
        }
        let (net, mut store) = self.build(spec, key)?;
        let fit = self.assemble(spec, &mut store)?;
        let sources = source_indices(spec, self.data)?;
        let (history, best_epoch, best_val, adam) = if fit {
            if self.config.verbose {
                eprintln!("training {}", label(spec));
            }
            self.runs += 1;
            let out = train(&net, &mut store, self.data, &sources, &self.config)?;
            (out.history, out.best_epoch, out.best_val, Some(out.optimizer))
        } else {
            let val = evaluate(&net, &store, &self.data.val, &sources)?;
            let history = History {
                records: vec![EpochRecord {
                    epoch: 0,
                    split: "val",
                    loss: val.loss,
                    normalized_accuracy: val.normalized_accuracy,
                    lr: 0.0,
                }],
            };
            (history, 0, val.normalized_accuracy, None)
        };
        let model = TrainedModel {
            spec: spec.clone(),
            net,
            store,
            history,
            best_epoch,
            best_val,
            hash: key,
            from_cache: false,
        };
        let ck = Checkpoint::capture(&model.store, key, best_epoch as u32, best_val, adam.as_ref());
        self.store_cache(&model, &ck)?;
        self.memo.insert(key, model.clone());
        Ok(model)
    }

    /// Initializes `store` from prerequisite models and sets trainability.
    /// Returns whether the assembled model is trained afterwards.
    fn assemble(&mut self, spec: &ModelSpec, store: &mut ParamStore<f32>) -> Result<bool> {
        let name = |i: usize| spec.sources[i].name.clone();
        match spec.kind {
            ModelKind::Baseline => Ok(true),
            ModelKind::Attention => {
                let base = self.prerequisite(&self.single(ModelKind::Baseline, spec, 0)?)?;
                let from = format!("{}enc.conv", prefix::BASELINE);
                let to = format!("{}enc.conv", prefix::ATTENTION);
                self.transfer(spec, &base, store, &from, &to, |_| false)?;
                Ok(true)
            }
            ModelKind::Fusion(_) if spec.pairwise => {
                for i in 1..spec.sources.len() {
                    let part = self.prerequisite(&spec.pair(i)?)?;
                    let copied = self.transfer(spec, &part, store, "", &prefix::pair(i - 1), |_| false)?;
                    if copied != part.store.len() {
                        return Err(Error::Architecture(format!(
                            "pair {} copied {copied} of {} parameters",
                            i - 1,
                            part.store.len()
                        )));
                    }
                }
                Ok(false)
            }
            ModelKind::Fusion(scheme) => {
                let base = self.prerequisite(&self.single(ModelKind::Baseline, spec, 0)?)?;
                let freeze = scheme == Scheme::FeatureLevel;
                self.transfer(spec, &base, store, prefix::BASELINE, prefix::REFERENCE, |_| false)?;
                self.log.last_mut().expect("just logged").frozen = freeze;
                for i in 1..spec.sources.len() {
                    let att = self.prerequisite(&self.single(ModelKind::Attention, spec, i)?)?;
                    let branch = prefix::branch(&name(i));
                    match scheme {
                        Scheme::ProbLevel | Scheme::LogitLevel => {
                            self.transfer(spec, &att, store, prefix::ATTENTION, &branch, |_| false)?;
                        }
                        Scheme::FeatureLevel => {
                            let from = format!("{}enc.", prefix::ATTENTION);
                            let to = format!("{branch}enc.");
                            self.transfer(spec, &att, store, &from, &to, |_| false)?;
                            self.log.last_mut().expect("just logged").frozen = true;
                            store.set_trainable(&to, false);
                        }
                        Scheme::PixelLevel => {
                            let skip = |s: &str| {
                                s.starts_with("enc.conv0.") || s.starts_with("loc.") || s.starts_with("cls.") || s == "bias"
                            };
                            self.transfer(spec, &att, store, prefix::ATTENTION, &branch, skip)?;
                        }
                    }
                }
                if scheme == Scheme::FeatureLevel {
                    store.set_trainable(prefix::REFERENCE, false);
                }
                Ok(scheme != Scheme::ProbLevel)
            }
        }
    }

    /// Default single-source spec for source `i` of `spec`.
    fn single(&self, kind: ModelKind, spec: &ModelSpec, i: usize) -> Result<ModelSpec> {
        let mut s = ModelSpec::new(kind, spec.classes, vec![spec.sources[i].clone()], spec.width, spec.scale)?;
        s.scale_dropout(self.dropout_scale)?;
        if kind == ModelKind::Attention {
            s.temperature = crate::attention::DEFAULT_TEMPERATURE;
        }
        Ok(s)
    }

    fn transfer(
        &mut self,
        spec: &ModelSpec,
        from: &TrainedModel,
        store: &mut ParamStore<f32>,
        src_prefix: &str,
        dst_prefix: &str,
        skip: impl Fn(&str) -> bool,
    ) -> Result<usize> {
        let params = store.load_prefixed(&from.store, src_prefix, dst_prefix, skip)?;
        if params.is_empty() {
            return Err(Error::Architecture(format!(
                "nothing copied from {} `{src_prefix}` into {} `{dst_prefix}`",
                from.label(),
                label(spec)
            )));
        }
        let n = params.len();
        self.log.push(InitRecord {
            target: label(spec),
            source: from.label(),
            from_prefix: src_prefix.into(),
            to_prefix: dst_prefix.into(),
            params,
            frozen: false,
        });
        Ok(n)
    }
}

impl History {
    /// Parses the CSV written by [`History::write_csv`].
    pub fn read_csv(r: impl std::io::Read) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        let mut records = Vec::new();
        for row in rdr.records() {
            let row = row?;
            if row.len() != 5 {
                return Err(Error::format(format!("history row has {} fields", row.len())));
            }
            let num = |i: usize| -> Result<f64> {
                row[i]
                    .parse::<f64>()
                    .map_err(|_| Error::format(format!("bad number `{}` in history", &row[i])))
            };
            let split = match &row[1] {
                "train" => "train",
                "val" => "val",
                "test" => "test",
                other => return Err(Error::format(format!("unknown split `{other}` in history"))),
            };
            records.push(EpochRecord {
                epoch: row[0].parse().map_err(|_| Error::format("bad epoch in history"))?,
                split,
                loss: num(2)?,
                normalized_accuracy: num(3)?,
                lr: num(4)?,
            });
        }
        Ok(Self { records })
    }
}
