//! Model zoo construction and scanner evaluation against ground truth.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dataset::{generate, Dataset, DatasetConfig, SyntheticSplit};
use super::poison::{
    attack_success_rate, poison_dataset, Corner, LabelMapping, PatchPattern, PoisonConfig,
    TriggerSpec, DEFAULT_POISON_RATE,
};
use super::train::{accuracy, cnn, mlp, train_with_log, AdaptiveLoss, TrainConfig};
use crate::augmentation::{craft_ood_set, default_transforms};
use crate::error::{Error, Result};
use crate::model_io::{atomic_write, load_model, save_model, ModelBundle, Provenance};
use crate::nn::LayerSpec;
use crate::scanner::{scan_with_sources, ScanConfig, ScanReport, Verdict};
use crate::tensor::Tensor;

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Architecture {
    Mlp { hidden: Vec<usize> },
    Cnn {
        channels: (usize, usize),
        #[serde(default)]
        hidden: Vec<usize>,
    },
}

impl Architecture {
    pub fn layers(&self, input_shape: &[usize], num_classes: usize) -> Vec<LayerSpec> {
        match self {
            Architecture::Mlp { hidden } => mlp(input_shape, hidden, num_classes),
            Architecture::Cnn { channels, hidden } => cnn(input_shape, *channels, hidden, num_classes),
        }
    }
}

/// The three classic triggers at strengths visible on small images.
pub fn default_triggers(image_size: usize) -> Vec<TriggerSpec> {
    vec![
        TriggerSpec::Patch {
            size_px: (image_size / 8).max(2),
            location: Corner::BottomRight,
            pattern: PatchPattern::Checkerboard,
        },
        TriggerSpec::Blended {
            trigger_image_seed: 7,
            alpha: 0.3,
        },
        TriggerSpec::Sinusoidal {
            amplitude: 0.15,
            frequency: 4.0,
        },
    ]
}

pub fn default_mappings() -> Vec<LabelMapping> {
    vec![LabelMapping::AllToOne { target: 0 }, LabelMapping::AllToAll { shift: 1 }]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZooConfig {
    pub dataset: DatasetConfig,
    pub architecture: Architecture,
    pub train: TrainConfig,
    #[serde(default)]
    pub adaptive: Option<AdaptiveLoss>,
    pub n_clean: usize,
    pub n_trojaned_per_attack: usize,
    pub triggers: Vec<TriggerSpec>,
    pub mappings: Vec<LabelMapping>,
    #[serde(default = "default_rate")]
    pub poison_rate: f64,
    #[serde(default = "default_asr_gate")]
    pub asr_gate: f64,
    pub seed: u64,
}

fn default_rate() -> f64 {
    DEFAULT_POISON_RATE
}

fn default_asr_gate() -> f64 {
    0.9
}

impl Default for ZooConfig {
    /// 10 clean models and 10 per (trigger, mapping) cell on the full-size
    /// synthetic dataset.
    fn default() -> Self {
        let dataset = DatasetConfig::default();
        Self {
            triggers: default_triggers(dataset.image_size),
            dataset,
            architecture: Architecture::Mlp { hidden: vec![256, 128] },
            train: TrainConfig::default(),
            adaptive: None,
            n_clean: 10,
            n_trojaned_per_attack: 10,
            mappings: default_mappings(),
            poison_rate: DEFAULT_POISON_RATE,
            asr_gate: 0.9,
            seed: 0,
        }
    }
}

impl ZooConfig {
    /// Desk-scale preset: 10 classes of 16×16 images and a small CNN.
    pub fn desk() -> Self {
        let dataset = DatasetConfig {
            num_classes: 10,
            train_per_class: 300,
            test_per_class: 50,
            image_size: 16,
            hue_jitter: 0.03,
            seed: 0,
        };
        Self {
            triggers: default_triggers(dataset.image_size),
            dataset,
            architecture: Architecture::Cnn {
                channels: (8, 16),
                hidden: vec![64],
            },
            train: TrainConfig {
                epochs: 30,
                learning_rate: 0.05,
                batch_size: 32,
                ..TrainConfig::default()
            },
            ..Self::default()
        }
    }

    /// Every model to train, in a fixed order.
    pub fn jobs(&self) -> Vec<ZooJob> {
        let mut jobs = Vec::new();
        for i in 0..self.n_clean {
            jobs.push(ZooJob {
                id: format!("clean_{i:03}"),
                poison: None,
                seed: self.model_seed(jobs.len()),
            });
        }
        for mapping in &self.mappings {
            for trigger in &self.triggers {
                for i in 0..self.n_trojaned_per_attack {
                    let seed = self.model_seed(jobs.len());
                    jobs.push(ZooJob {
                        id: format!("{}_{}_{i:03}", trigger.id(), mapping.kind()),
                        poison: Some(PoisonConfig {
                            trigger: *trigger,
                            mapping: *mapping,
                            rate: self.poison_rate,
                            seed,
                        }),
                        seed,
                    });
                }
            }
        }
        jobs
    }

    fn model_seed(&self, index: usize) -> u64 {
        self.seed
            .wrapping_mul(0x9e37_79b9_7f4a_7c15)
            .wrapping_add(index as u64 + 1)
    }

    /// Seed of the calibration surrogate, distinct from every zoo model.
    pub fn surrogate_seed(&self) -> u64 {
        self.model_seed(usize::MAX / 2)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZooJob {
    pub id: String,
    pub poison: Option<PoisonConfig>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZooEntry {
    pub id: String,
    /// Relative to the manifest directory; empty for in-memory zoos.
    pub path: PathBuf,
    pub provenance: Provenance,
    pub clean_accuracy: f64,
    pub asr: Option<f64>,
    pub admitted: bool,
    pub fingerprint: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZooManifest {
    pub manifest_version: u32,
    pub config: ZooConfig,
    pub surrogate: ZooEntry,
    pub entries: Vec<ZooEntry>,
    /// `None` when the zoo has no model of that kind.
    pub mean_clean_accuracy: Option<f64>,
    /// Over admitted trojaned models only.
    pub mean_trojaned_accuracy: Option<f64>,
}

impl ZooManifest {
    /// Mean clean accuracy of clean models minus that of admitted trojaned ones.
    pub fn accuracy_gap(&self) -> Option<f64> {
        Some(self.mean_clean_accuracy? - self.mean_trojaned_accuracy?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

/// A built zoo: the manifest plus the trained models, surrogate first.
pub struct Zoo {
    pub manifest: ZooManifest,
    pub data: SyntheticSplit,
    pub surrogate: ModelBundle,
    pub models: Vec<ModelBundle>,
}

impl Zoo {
    /// Admitted models with their manifest entries.
    pub fn admitted(&self) -> Vec<(&ZooEntry, &ModelBundle)> {
        self.manifest
            .entries
            .iter()
            .zip(&self.models)
            .filter(|(e, _)| e.admitted)
            .collect()
    }
}

fn train_job(
    cfg: &ZooConfig,
    data: &SyntheticSplit,
    ood: Option<&crate::augmentation::OodBatch>,
    job: &ZooJob,
) -> Result<(ModelBundle, ZooEntry)> {
    let (train_set, asr_spec) = match &job.poison {
        Some(p) => (poison_dataset(&data.train, p)?.0, Some(p)),
        None => (data.train.clone(), None),
    };
    let arch = cfg
        .architecture
        .layers(data.train.image_shape(), data.train.num_classes);
    let tcfg = TrainConfig {
        seed: job.seed,
        ..cfg.train.clone()
    };
    let adaptive = match (&cfg.adaptive, ood) {
        (Some(loss), Some(batch)) => Some((batch, loss)),
        _ => None,
    };
    let model = train_with_log(&train_set, &arch, &tcfg, adaptive)?.model;
    let clean_accuracy = accuracy(&model, &data.test)?;
    let asr = asr_spec
        .map(|p| attack_success_rate(&model, &data.test, &p.trigger, &p.mapping))
        .transpose()?;
    let admitted = asr.is_none_or(|a| a >= cfg.asr_gate);
    if !admitted {
        log::warn!(
            "{}: attack success rate {:.3} below gate {}, excluded",
            job.id,
            asr.unwrap_or(0.0),
            cfg.asr_gate
        );
    }
    log::info!("{}: clean accuracy {:.3}, asr {:?}", job.id, clean_accuracy, asr);
    let entry = ZooEntry {
        id: job.id.clone(),
        path: PathBuf::new(),
        provenance: model.meta().provenance.clone(),
        clean_accuracy,
        asr,
        admitted,
        fingerprint: model.fingerprint(),
        seed: job.seed,
    };
    Ok((model, entry))
}

/// Trains the surrogate and every zoo model. Training runs in parallel over
/// `jobs` workers; each run is seeded on its own, so results do not depend
/// on the schedule.
pub fn build_zoo(cfg: &ZooConfig, jobs: usize) -> Result<Zoo> {
    if cfg.n_clean == 0 && cfg.n_trojaned_per_attack == 0 {
        return Err(Error::InvalidConfig("zoo has no models".into()));
    }
    if !(cfg.asr_gate >= 0.0 && cfg.asr_gate <= 1.0) {
        return Err(Error::InvalidConfig(format!("asr gate {}", cfg.asr_gate)));
    }
    let data = generate(&cfg.dataset)?;
    // Adaptive attackers shape their loss with their own near-OOD batch.
    let ood = match cfg.adaptive {
        Some(_) => {
            let sources: Vec<Tensor> = data.train.take_per_class(8).images;
            Some(craft_ood_set(&sources, &default_transforms(), 3, cfg.seed ^ 0xada)?)
        }
        None => None,
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
    let surrogate_job = ZooJob {
        id: "surrogate".into(),
        poison: None,
        seed: cfg.surrogate_seed(),
    };
    let surrogate_cfg = ZooConfig {
        adaptive: None,
        ..cfg.clone()
    };
    let work = cfg.jobs();
    let (surrogate, trained) = pool.install(|| -> Result<_> {
        let surrogate = train_job(&surrogate_cfg, &data, None, &surrogate_job)?;
        let trained: Vec<(ModelBundle, ZooEntry)> = work
            .par_iter()
            .map(|job| train_job(cfg, &data, ood.as_ref(), job))
            .collect::<Result<_>>()?;
        Ok((surrogate, trained))
    })?;
    let (models, entries): (Vec<_>, Vec<_>) = trained.into_iter().unzip();
    let mean = |pred: &dyn Fn(&ZooEntry) -> bool| {
        let v: Vec<f64> = entries.iter().filter(|e| pred(e)).map(|e| e.clean_accuracy).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    let mean_clean_accuracy = mean(&|e| !e.provenance.is_trojaned());
    let mean_trojaned_accuracy = mean(&|e| e.provenance.is_trojaned() && e.admitted);
    Ok(Zoo {
        manifest: ZooManifest {
            manifest_version: MANIFEST_VERSION,
            config: cfg.clone(),
            surrogate: surrogate.1,
            entries,
            mean_clean_accuracy,
            mean_trojaned_accuracy,
        },
        data,
        surrogate: surrogate.0,
        models,
    })
}

/// Writes every model, the datasets and `manifest.json` under `dir`.
pub fn save_zoo(zoo: &mut Zoo, dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir.join("models"))?;
    let surrogate_path = PathBuf::from("models/surrogate.trodo");
    save_model(&zoo.surrogate, dir.join(&surrogate_path))?;
    zoo.manifest.surrogate.path = surrogate_path;
    for (entry, model) in zoo.manifest.entries.iter_mut().zip(&zoo.models) {
        let rel = PathBuf::from(format!("models/{}.trodo", entry.id));
        save_model(model, dir.join(&rel))?;
        entry.path = rel;
    }
    super::dataset::save_dataset(&zoo.data.train, dir.join("train.trodod"))?;
    super::dataset::save_dataset(&zoo.data.test, dir.join("test.trodod"))?;
    let path = dir.join("manifest.json");
    atomic_write(&path, &serde_json::to_vec_pretty(&zoo.manifest)?)?;
    Ok(path)
}

/// Loads the admitted models listed in a manifest, with their entries.
pub fn load_zoo_models(manifest_path: &Path) -> Result<(ZooManifest, Vec<(ZooEntry, ModelBundle)>)> {
    let manifest = ZooManifest::load(manifest_path)?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let models = manifest
        .entries
        .iter()
        .filter(|e| e.admitted)
        .map(|e| Ok((e.clone(), load_model(dir.join(&e.path))?)))
        .collect::<Result<_>>()?;
    Ok((manifest, models))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub true_positive: usize,
    pub false_positive: usize,
    pub true_negative: usize,
    pub false_negative: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.true_positive + self.false_positive + self.true_negative + self.false_negative
    }

    pub fn accuracy(&self) -> f64 {
        (self.true_positive + self.true_negative) as f64 / self.total().max(1) as f64
    }

    pub fn false_positive_rate(&self) -> f64 {
        let neg = self.false_positive + self.true_negative;
        self.false_positive as f64 / neg.max(1) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub count: usize,
    pub accuracy: f64,
    pub mean_signature: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelVerdict {
    pub id: String,
    pub group: String,
    pub trojaned: bool,
    pub verdict: Verdict,
    pub signature_s: f64,
    pub z_statistic: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZooEvaluation {
    pub accuracy: f64,
    pub confusion: Confusion,
    /// Keyed by `clean` or `<trigger>/<mapping kind>`.
    pub groups: BTreeMap<String, GroupStats>,
    /// `None` when the zoo has no model of that kind.
    pub mean_signature_clean: Option<f64>,
    pub mean_signature_trojaned: Option<f64>,
    pub tau: f64,
    pub epsilon: f64,
    pub models: Vec<ModelVerdict>,
}

impl ZooEvaluation {
    pub fn table(&self) -> String {
        let mut out = format!("{:<24} {:>5} {:>8} {:>10}\n", "group", "n", "acc", "mean S");
        for (k, g) in &self.groups {
            out.push_str(&format!(
                "{:<24} {:>5} {:>8.3} {:>10.5}\n",
                k, g.count, g.accuracy, g.mean_signature
            ));
        }
        out.push_str(&format!(
            "{:<24} {:>5} {:>8.3}   tau {:.4} eps {:.4}\n",
            "overall",
            self.confusion.total(),
            self.accuracy,
            self.tau,
            self.epsilon
        ));
        out
    }
}

fn group_key(p: &Provenance) -> String {
    match p {
        Provenance::Clean => "clean".into(),
        Provenance::Trojaned {
            trigger_id,
            mapping_id,
        } => {
            let kind = mapping_id.split(':').next().unwrap_or(mapping_id);
            format!("{trigger_id}/{kind}")
        }
    }
}

/// Scans every model and compares verdicts with provenance.
pub fn evaluate_zoo(
    models: &[(&str, &ModelBundle)],
    cfg: &ScanConfig,
    sources: &[Tensor],
) -> Result<ZooEvaluation> {
    if models.is_empty() {
        return Err(Error::EmptyBatch("zoo to evaluate"));
    }
    if let Some(fp) = &cfg.calibration.surrogate_fingerprint {
        if let Some((id, _)) = models.iter().find(|(_, m)| &m.fingerprint() == fp) {
            return Err(Error::SurrogateInZoo((*id).to_string()));
        }
    }
    let reports: Vec<ScanReport> = models
        .iter()
        .map(|(_, m)| scan_with_sources(m, cfg, sources))
        .collect::<Result<_>>()?;
    Ok(summarize(models, &reports, cfg))
}

fn summarize(models: &[(&str, &ModelBundle)], reports: &[ScanReport], cfg: &ScanConfig) -> ZooEvaluation {
    let mut confusion = Confusion::default();
    let mut acc: BTreeMap<String, (usize, usize, f64)> = BTreeMap::new();
    let mut verdicts = Vec::with_capacity(models.len());
    let (mut s_clean, mut n_clean, mut s_troj, mut n_troj) = (0.0, 0, 0.0, 0);
    for ((id, m), r) in models.iter().zip(reports) {
        let trojaned = m.meta().provenance.is_trojaned();
        let flagged = r.verdict == Verdict::Trojaned;
        match (trojaned, flagged) {
            (true, true) => confusion.true_positive += 1,
            (true, false) => confusion.false_negative += 1,
            (false, true) => confusion.false_positive += 1,
            (false, false) => confusion.true_negative += 1,
        }
        if trojaned {
            s_troj += r.signature_s;
            n_troj += 1;
        } else {
            s_clean += r.signature_s;
            n_clean += 1;
        }
        let key = group_key(&m.meta().provenance);
        let g = acc.entry(key.clone()).or_default();
        g.0 += 1;
        g.1 += usize::from(trojaned == flagged);
        g.2 += r.signature_s;
        verdicts.push(ModelVerdict {
            id: id.to_string(),
            group: key,
            trojaned,
            verdict: r.verdict,
            signature_s: r.signature_s,
            z_statistic: r.z_statistic,
        });
    }
    let ratio = |s: f64, n: usize| (n > 0).then(|| s / n as f64);
    ZooEvaluation {
        accuracy: confusion.accuracy(),
        confusion,
        groups: acc
            .into_iter()
            .map(|(k, (n, ok, s))| {
                (
                    k,
                    GroupStats {
                        count: n,
                        accuracy: ok as f64 / n as f64,
                        mean_signature: s / n as f64,
                    },
                )
            })
            .collect(),
        mean_signature_clean: ratio(s_clean, n_clean),
        mean_signature_trojaned: ratio(s_troj, n_troj),
        tau: cfg.calibration.tau,
        epsilon: cfg.effective_attack().epsilon,
        models: verdicts,
    }
}

/// Benign samples for TRODO mode: the first `per_class` training images of
/// each class.
pub fn benign_samples(train: &Dataset, per_class: usize) -> Vec<Tensor> {
    train.take_per_class(per_class).images
}
