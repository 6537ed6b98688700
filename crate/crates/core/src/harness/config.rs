//! Run configuration: a single JSON-serializable description of a run, a
//! canonical hash identifying it, named presets, and deep-merge overrides.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{DDAEConfig, TapId, TapPath};
use crate::corruption::{make_ve_schedule, make_vp_schedule, NoiseSchedule, ScheduleKind};
use crate::error::{Error, Result};
use crate::harness::data::{self, Dataset};
use crate::nn::LrSchedule;
use crate::probe::{FinetuneOpts, Noising, ProbeOpts};
use crate::trainer::{Augmentation, TrainOpts};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub kind: ScheduleKind,
    pub t_count: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub sigma_min: f64,
    pub sigma_max: f64,
}

impl ScheduleSpec {
    pub fn vp(t_count: usize, beta_min: f64, beta_max: f64) -> Self {
        ScheduleSpec { kind: ScheduleKind::Vp, t_count, beta_min, beta_max, sigma_min: 0.002, sigma_max: 80.0 }
    }

    pub fn ve(t_count: usize, sigma_min: f64, sigma_max: f64) -> Self {
        ScheduleSpec { kind: ScheduleKind::Ve, t_count, sigma_min, sigma_max, beta_min: 1e-4, beta_max: 0.02 }
    }

    pub fn build(&self) -> Result<NoiseSchedule> {
        match self.kind {
            ScheduleKind::Vp => make_vp_schedule(self.t_count, self.beta_min, self.beta_max),
            ScheduleKind::Ve => make_ve_schedule(self.t_count, self.sigma_min, self.sigma_max),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataFormat {
    /// One file in the CIFAR-10 binary layout.
    Cifar10,
    /// A directory of CIFAR-10 batch files.
    Cifar10Dir,
    /// PNG files plus a `filename,label` CSV.
    PngDir,
    /// The built-in procedural corpus; no files needed.
    Synthetic,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub format: DataFormat,
    pub path: String,
    /// Labels CSV for `png_dir`.
    pub labels_csv: Option<String>,
    /// Keep only the first N images after loading; 0 keeps everything.
    pub take: usize,
    /// Size and seed for the synthetic corpus.
    pub synth_n: usize,
    pub synth_seed: u64,
}

impl DatasetSpec {
    pub fn load(&self, image_size: usize) -> Result<Dataset> {
        let ds = match self.format {
            DataFormat::Cifar10 => data::load_cifar10_binary(&self.path)?,
            DataFormat::Cifar10Dir => data::load_cifar10_dir(&self.path, false)?,
            DataFormat::PngDir => {
                let csv = self
                    .labels_csv
                    .as_ref()
                    .ok_or_else(|| Error::parameter("png_dir dataset needs labels_csv"))?;
                data::load_png_directory(&self.path, csv, image_size)?
            }
            DataFormat::Synthetic => data::generate_synthetic(self.synth_n, self.synth_seed),
        };
        if !ds.is_empty() && ds.image_size() != image_size {
            return Err(Error::data(format!(
                "dataset images are {}x{} but the model expects {image_size}x{image_size}",
                ds.image_size(),
                ds.image_size()
            )));
        }
        Ok(if self.take > 0 { ds.take(self.take) } else { ds })
    }

    /// The matching held-out split, when the format has one.
    pub fn load_test(&self, image_size: usize) -> Result<Option<Dataset>> {
        match self.format {
            DataFormat::Cifar10Dir => match data::load_cifar10_dir(&self.path, true) {
                Ok(ds) if ds.image_size() == image_size => Ok(Some(ds)),
                _ => Ok(None),
            },
            _ => Ok(None),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeSpec {
    pub taps: Vec<TapId>,
    pub ts: Vec<usize>,
    pub opts: ProbeOpts,
    pub refine_radius: usize,
    pub noising: Noising,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EmbedderSpec {
    /// Flattened raw pixels.
    Pixels,
    /// PCA of spatially strided pixels fitted on the real set.
    Pca { dims: usize, stride: usize },
    /// Pooled features of a truncated encoder checkpoint.
    Encoder { checkpoint: String, tap: TapId, t: usize },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricSpec {
    pub n_pairs: usize,
    pub embedder: EmbedderSpec,
    /// Images per side for FID pipelines; 0 disables the FID stage.
    pub fid_samples: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleSpec {
    pub n_images: usize,
    pub grid_cols: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub preset_name: String,
    pub schedule: ScheduleSpec,
    pub model: DDAEConfig,
    pub train: TrainOpts,
    pub probe: ProbeSpec,
    pub finetune: FinetuneOpts,
    pub metrics: MetricSpec,
    pub sample: SampleSpec,
    pub dataset: DatasetSpec,
    pub out_dir: String,
    pub seed: u64,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.schedule.build()?;
        for &t in &self.probe.ts {
            if t < 1 || t > self.schedule.t_count {
                return Err(Error::parameter(format!(
                    "probe timestep {t} outside [1, {}]",
                    self.schedule.t_count
                )));
            }
        }
        Ok(())
    }

    /// Canonical JSON: object keys sorted at every level, shortest float
    /// round-trip formatting. Semantically equal configs serialize byte-equal.
    pub fn canonical_json(&self) -> Result<String> {
        let value = serde_json::to_value(self)?;
        Ok(value.to_string())
    }

    /// Hex SHA-256 of the canonical form.
    pub fn hash(&self) -> Result<String> {
        let mut h = Sha256::new();
        h.update(self.canonical_json()?.as_bytes());
        Ok(crate::nn::hex_digest(&h.finalize()))
    }

    /// Short run identifier derived from the hash.
    pub fn run_id(&self) -> Result<String> {
        Ok(self.hash()?[..12].to_string())
    }

    pub fn from_json(raw: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(raw)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies a partial JSON override (deep merge), revalidating the result.
    pub fn merged_with(&self, overrides: &serde_json::Value) -> Result<Self> {
        let mut base = serde_json::to_value(self)?;
        deep_merge(&mut base, overrides);
        let cfg: RunConfig = serde_json::from_value(base)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Recursive object merge; non-objects replace.
pub fn deep_merge(base: &mut serde_json::Value, overlay: &serde_json::Value) {
    match (base, overlay) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(k) {
                    Some(slot) => deep_merge(slot, v),
                    None => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (slot, v) => *slot = v.clone(),
    }
}

/// Desk-scale probe taps: the whole up path plus the two middle blocks.
pub fn default_probe_taps(model: &DDAEConfig) -> Vec<TapId> {
    let mut taps = Vec::new();
    let stages = model.stages();
    let mid_stage = stages - 1;
    let mid_res = model.stage_resolution(mid_stage);
    taps.push(TapId { path: TapPath::Mid, stage: mid_stage, block: 0, resolution: mid_res });
    taps.push(TapId { path: TapPath::Mid, stage: mid_stage, block: 1, resolution: mid_res });
    for s in (0..stages).rev() {
        let res = model.stage_resolution(s);
        for b in 0..model.blocks_per_resolution + 1 {
            taps.push(TapId { path: TapPath::Up, stage: s, block: b, resolution: res });
        }
    }
    taps
}

/// Named presets. Desk presets are sized for a single CPU; the cifar10
/// presets carry the full-scale reference settings and adopted layer-noise
/// combinations.
pub fn preset(name: &str) -> Result<RunConfig> {
    let desk_model = DDAEConfig::desk();
    let desk = RunConfig {
        preset_name: "desk".to_string(),
        schedule: ScheduleSpec::vp(1000, 1e-4, 0.02),
        model: desk_model.clone(),
        train: TrainOpts {
            epochs: 16,
            batch_size: 64,
            learning_rate: 3e-4,
            lr_schedule: LrSchedule::Constant,
            seed: 0,
            checkpoint_every: 4,
            augmentations: [Augmentation::HorizontalFlip].into_iter().collect(),
        },
        probe: ProbeSpec {
            taps: default_probe_taps(&desk_model),
            ts: vec![1, 11, 31, 101, 301, 800],
            opts: ProbeOpts::default(),
            refine_radius: 0,
            noising: Noising::Random,
        },
        finetune: FinetuneOpts { epochs: 5, ..FinetuneOpts::default() },
        metrics: MetricSpec {
            n_pairs: 256,
            embedder: EmbedderSpec::Pca { dims: 64, stride: 2 },
            fid_samples: 0,
        },
        sample: SampleSpec { n_images: 16, grid_cols: 4 },
        dataset: DatasetSpec {
            format: DataFormat::Synthetic,
            path: String::new(),
            labels_csv: None,
            take: 5000,
            synth_n: 5000,
            synth_seed: 7,
        },
        out_dir: "runs/desk".to_string(),
        seed: 0,
    };
    match name {
        "desk" => Ok(desk),
        // exploding-variance variant of the desk run
        "desk-ve" => Ok(RunConfig {
            preset_name: "desk-ve".into(),
            schedule: ScheduleSpec::ve(1000, 0.01, 50.0),
            out_dir: "runs/desk-ve".into(),
            ..desk.clone()
        }),
        // full-scale reference: 35.7M network, 2000 epochs, adopted
        // layer-noise combination up[1].block[0]@16 at t = 11/1000
        "ddpm-cifar10" => {
            let model = DDAEConfig::ddpm_cifar10();
            Ok(RunConfig {
                preset_name: "ddpm-cifar10".into(),
                schedule: ScheduleSpec::vp(1000, 1e-4, 0.02),
                train: TrainOpts {
                    epochs: 2000,
                    batch_size: 128,
                    learning_rate: 2e-4,
                    lr_schedule: LrSchedule::Constant,
                    seed: 0,
                    checkpoint_every: 100,
                    augmentations: [Augmentation::HorizontalFlip].into_iter().collect(),
                },
                probe: ProbeSpec {
                    taps: vec![TapId { path: TapPath::Up, stage: 1, block: 0, resolution: 16 }],
                    ts: vec![11],
                    opts: ProbeOpts::default(),
                    refine_radius: 10,
                    noising: Noising::Random,
                },
                finetune: FinetuneOpts::default(),
                metrics: MetricSpec {
                    n_pairs: 4096,
                    embedder: EmbedderSpec::Pca { dims: 64, stride: 2 },
                    fid_samples: 0,
                },
                dataset: DatasetSpec {
                    format: DataFormat::Cifar10Dir,
                    path: "cifar-10-batches-bin".into(),
                    labels_csv: None,
                    take: 0,
                    synth_n: 0,
                    synth_seed: 0,
                },
                model,
                out_dir: "runs/ddpm-cifar10".into(),
                ..desk.clone()
            })
        }
        // 18-level exploding-variance reference with the adopted combination
        // up[1].block[0]@16 at t = 4/18
        "edm-cifar10" => {
            let base = preset("ddpm-cifar10")?;
            Ok(RunConfig {
                preset_name: "edm-cifar10".into(),
                schedule: ScheduleSpec::ve(18, 0.002, 80.0),
                probe: ProbeSpec {
                    taps: vec![TapId { path: TapPath::Up, stage: 1, block: 0, resolution: 16 }],
                    ts: vec![4],
                    opts: ProbeOpts::default(),
                    refine_radius: 2,
                    noising: Noising::Random,
                },
                train: TrainOpts { epochs: 4000, ..base.train.clone() },
                out_dir: "runs/edm-cifar10".into(),
                ..base
            })
        }
        // supervised-from-scratch comparison recipe for truncated encoders
        "scratch-cifar10" => {
            let base = preset("ddpm-cifar10")?;
            Ok(RunConfig {
                preset_name: "scratch-cifar10".into(),
                finetune: FinetuneOpts {
                    epochs: 200,
                    learning_rate: 5e-4,
                    ..FinetuneOpts::default()
                },
                out_dir: "runs/scratch-cifar10".into(),
                ..base
            })
        }
        other => Err(Error::parameter(format!(
            "unknown preset '{other}' (available: desk, desk-ve, ddpm-cifar10, edm-cifar10, scratch-cifar10)"
        ))),
    }
}

/// Parses `path:stage:block` into a tap of `model` (resolution derived).
pub fn parse_tap(s: &str, model: &DDAEConfig) -> Result<TapId> {
    let parts: Vec<&str> = s.split(':').collect();
    if parts.len() != 3 {
        return Err(Error::parameter(format!(
            "tap '{s}' should be path:stage:block, e.g. up:1:0"
        )));
    }
    let path = match parts[0] {
        "down" => TapPath::Down,
        "mid" => TapPath::Mid,
        "up" => TapPath::Up,
        p => return Err(Error::parameter(format!("unknown tap path '{p}'"))),
    };
    let stage: usize = parts[1]
        .parse()
        .map_err(|_| Error::parameter(format!("bad tap stage in '{s}'")))?;
    let block: usize = parts[2]
        .parse()
        .map_err(|_| Error::parameter(format!("bad tap block in '{s}'")))?;
    if stage >= model.stages() {
        return Err(Error::parameter(format!(
            "tap stage {stage} outside the model's {} stages",
            model.stages()
        )));
    }
    Ok(TapId { path, stage, block, resolution: model.stage_resolution(stage) })
}
