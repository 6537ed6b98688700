//! Ablation runner: the full pretrain + grid + metric pipeline per variant,
//! with per-variant records and a cross-variant summary table.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::build_ddae;
use crate::error::{Error, Result};
use crate::harness::config::{EmbedderSpec, RunConfig};
use crate::harness::records::{MemorySink, Phase, RecordSink, RecordWriter};
use crate::probe::{grid_search, GridReport, GridSearchSpec};
use crate::repmetrics::{fid, IdentityEmbedder, PcaEmbedder};
use crate::sampler::{sample, SampleOpts};
use crate::trainer::pretrain;

/// A named partial-config override applied on top of the base run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    pub overrides: serde_json::Value,
}

/// The standard noise-configuration ablations: reduced level counts at the
/// default range, plus the smaller and larger halves of the rate range at
/// the full level count.
pub fn standard_variants(base: &RunConfig) -> Vec<Variant> {
    let (lo, hi) = (base.schedule.beta_min, base.schedule.beta_max);
    let mid = 0.5 * (lo + hi);
    let mut out = Vec::new();
    for t in [512usize, 256, 64] {
        // probe levels rescale with the level count
        let ts: Vec<usize> = base
            .probe
            .ts
            .iter()
            .map(|&x| ((x * t) / base.schedule.t_count).max(1))
            .collect();
        out.push(Variant {
            name: format!("levels-{t}"),
            overrides: serde_json::json!({"schedule": {"t_count": t}, "probe": {"ts": ts}}),
        });
    }
    out.push(Variant {
        name: "beta-smaller-half".into(),
        overrides: serde_json::json!({"schedule": {"beta_min": lo, "beta_max": mid}}),
    });
    out.push(Variant {
        name: "beta-larger-half".into(),
        overrides: serde_json::json!({"schedule": {"beta_min": mid, "beta_max": hi}}),
    });
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineOutcome {
    pub final_loss_eps: f64,
    pub final_loss_x0: f64,
    pub best_tap: String,
    pub best_t: usize,
    pub best_probe_acc: f64,
    pub fid: Option<f64>,
}

/// One full run: pretrain, grid search, optional FID. Emits records through
/// `sink` and returns the summary numbers.
pub fn run_pipeline(
    cfg: &RunConfig,
    out_dir: Option<&Path>,
    sink: &mut dyn RecordSink,
) -> Result<PipelineOutcome> {
    cfg.validate()?;
    let sched = cfg.schedule.build()?;
    let dataset = cfg.dataset.load(cfg.model.image_size)?;
    if dataset.is_empty() {
        return Err(Error::data("pipeline: dataset is empty"));
    }
    let test_set = cfg.dataset.load_test(cfg.model.image_size)?;
    let net = build_ddae(&cfg.model, cfg.seed)?;

    // collect the loss curve locally as well, so the outcome can report the
    // final values without re-reading the sink
    let mut mem = MemorySink::default();
    let mut tee = TeeSink { a: sink, b: &mut mem };
    let mut train_opts = cfg.train.clone();
    train_opts.seed = cfg.seed;
    let net = pretrain(net, &dataset.images, &sched, &train_opts, out_dir, &mut tee)?;

    let spec = GridSearchSpec {
        taps: cfg.probe.taps.clone(),
        ts: cfg.probe.ts.clone(),
        opts: crate::probe::ProbeOpts { seed: cfg.seed, ..cfg.probe.opts.clone() },
        refine_radius: cfg.probe.refine_radius,
    };
    let mut cell_sink = Vec::new();
    let report: GridReport = grid_search(
        &net,
        &dataset,
        test_set.as_ref(),
        &sched,
        &spec,
        Some(&mut |cell: &crate::probe::GridCell| {
            cell_sink.push((format!("linear_acc[{}][t={}]", cell.tap, cell.t), cell.linear_acc));
        }),
    )?;
    for (i, (key, value)) in cell_sink.iter().enumerate() {
        sink.emit(Phase::Grid, key, i as u64, *value)?;
    }
    sink.emit(Phase::Grid, "best_linear_acc", 0, report.best.linear_acc)?;

    let fid_value = if cfg.metrics.fid_samples > 0 {
        let n = cfg.metrics.fid_samples.min(dataset.len());
        let mut rng = crate::nn::substream(cfg.seed, "sampling");
        let generated = sample(&net, &sched, n, &mut rng, None, &SampleOpts::default())?;
        let real = dataset.take(n);
        let value = match &cfg.metrics.embedder {
            EmbedderSpec::Pixels => fid(&IdentityEmbedder, &real.images, &generated.data)?,
            EmbedderSpec::Pca { dims, stride } => {
                let pca = PcaEmbedder::fit(&real.images, *dims, *stride)?;
                fid(&pca, &real.images, &generated.data)?
            }
            EmbedderSpec::Encoder { checkpoint, tap, t } => {
                let enc_net = crate::backbone::DDAENetwork::load(checkpoint)?;
                let enc = crate::backbone::truncate(&enc_net, tap, *t)?;
                fid(&crate::repmetrics::EncoderEmbedder(enc), &real.images, &generated.data)?
            }
        };
        sink.emit(Phase::Metric, "fid", 0, value)?;
        Some(value)
    } else {
        None
    };

    let last = |key: &str| {
        mem.records
            .iter()
            .rev()
            .find(|r| r.key == key)
            .map(|r| r.value)
            .unwrap_or(f64::NAN)
    };
    if let Some(dir) = out_dir {
        let json = serde_json::to_string_pretty(&report)?;
        let path = dir.join("gridreport.json");
        std::fs::write(&path, json).map_err(|e| Error::io(e, path))?;
    }
    Ok(PipelineOutcome {
        final_loss_eps: last("loss_eps"),
        final_loss_x0: last("loss_x0"),
        best_tap: report.best.tap.to_string(),
        best_t: report.best.t,
        best_probe_acc: report.best.linear_acc,
        fid: fid_value,
    })
}

struct TeeSink<'a> {
    a: &'a mut dyn RecordSink,
    b: &'a mut MemorySink,
}

impl RecordSink for TeeSink<'_> {
    fn emit(&mut self, phase: Phase, key: &str, step: u64, value: f64) -> Result<()> {
        self.a.emit(phase, key, step, value)?;
        self.b.emit(phase, key, step, value)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub outcome: Option<PipelineOutcome>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationSummary {
    pub rows: Vec<AblationRow>,
}

/// Runs the base configuration plus each variant. Failures are isolated per
/// variant; remaining variants proceed. Per-variant records land under
/// `out_dir/<variant>/records.jsonl` when an output directory is given.
pub fn run_ablation(
    base: &RunConfig,
    variants: &[Variant],
    out_dir: Option<&Path>,
) -> Result<AblationSummary> {
    let mut rows = Vec::new();
    let mut jobs: Vec<(String, Result<RunConfig>)> =
        vec![("base".to_string(), Ok(base.clone()))];
    for v in variants {
        jobs.push((v.name.clone(), base.merged_with(&v.overrides)));
    }
    for (name, cfg) in jobs {
        let row = match cfg {
            Err(e) => AblationRow { variant: name, outcome: None, error: Some(e.to_string()) },
            Ok(cfg) => {
                let var_dir = out_dir.map(|d| d.join(&name));
                if let Some(dir) = &var_dir {
                    std::fs::create_dir_all(dir).map_err(|e| Error::io(e, dir))?;
                }
                let result = match &var_dir {
                    Some(dir) => {
                        let mut writer = RecordWriter::create(
                            dir.join("records.jsonl"),
                            &cfg.run_id()?,
                            &cfg.hash()?,
                        )?;
                        run_pipeline(&cfg, Some(dir), &mut writer)
                    }
                    None => {
                        let mut sink = MemorySink::default();
                        run_pipeline(&cfg, None, &mut sink)
                    }
                };
                match result {
                    Ok(outcome) => {
                        AblationRow { variant: name, outcome: Some(outcome), error: None }
                    }
                    Err(e) => {
                        eprintln!("variant '{name}' failed: {e}");
                        AblationRow { variant: name, outcome: None, error: Some(e.to_string()) }
                    }
                }
            }
        };
        rows.push(row);
    }
    let summary = AblationSummary { rows };
    if let Some(dir) = out_dir {
        let path = dir.join("summary.json");
        std::fs::write(&path, serde_json::to_string_pretty(&summary)?)
            .map_err(|e| Error::io(e, path))?;
        let csv_path = dir.join("summary.csv");
        let mut w = csv::Writer::from_path(&csv_path).map_err(|e| Error::data(format!("{e}")))?;
        w.write_record(["variant", "final_loss_eps", "final_loss_x0", "best_probe_acc", "fid", "error"])
            .map_err(|e| Error::data(format!("{e}")))?;
        for row in &summary.rows {
            let o = row.outcome.as_ref();
            w.write_record([
                row.variant.clone(),
                o.map(|o| format!("{:.9e}", o.final_loss_eps)).unwrap_or_default(),
                o.map(|o| format!("{:.9e}", o.final_loss_x0)).unwrap_or_default(),
                o.map(|o| format!("{:.9e}", o.best_probe_acc)).unwrap_or_default(),
                o.and_then(|o| o.fid).map(|v| format!("{v:.9e}")).unwrap_or_default(),
                row.error.clone().unwrap_or_default(),
            ])
            .map_err(|e| Error::data(format!("{e}")))?;
        }
        w.flush()?;
    }
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::preset;

    fn micro_config() -> RunConfig {
        let base = preset("desk").unwrap();
        let overrides = serde_json::json!({
            "schedule": {"t_count": 20},
            "train": {"epochs": 1, "batch_size": 16},
            "probe": {
                "ts": [2, 10],
                "taps": [
                    {"path": "mid", "stage": 2, "block": 0, "resolution": 8},
                    {"path": "up", "stage": 0, "block": 1, "resolution": 32}
                ],
                "opts": {"epochs": 2, "batch_size": 16, "learning_rate": 0.01,
                          "lr_schedule": "cosine", "seed": 0, "held_out_frac": 0.2}
            },
            "dataset": {"take": 32, "synth_n": 32},
            "metrics": {"fid_samples": 0}
        });
        base.merged_with(&overrides).unwrap()
    }

    #[test]
    fn pipeline_runs_and_variant_failures_are_isolated() {
        let cfg = micro_config();
        let dir = tempfile::tempdir().unwrap();
        let bad = Variant {
            name: "broken".into(),
            overrides: serde_json::json!({"probe": {"ts": [999]}}),
        };
        let summary = run_ablation(&cfg, &[bad], Some(dir.path())).unwrap();
        assert_eq!(summary.rows.len(), 2);
        assert_eq!(summary.rows[0].variant, "base");
        let base_row = &summary.rows[0];
        assert!(base_row.error.is_none(), "base failed: {:?}", base_row.error);
        let outcome = base_row.outcome.as_ref().unwrap();
        assert!(outcome.final_loss_eps.is_finite());
        assert!(outcome.best_probe_acc >= 0.0 && outcome.best_probe_acc <= 1.0);
        assert_eq!(summary.rows[1].variant, "broken");
        assert!(summary.rows[1].error.is_some());
        // per-variant records and the summary land on disk
        assert!(dir.path().join("base/records.jsonl").is_file());
        assert!(dir.path().join("base/gridreport.json").is_file());
        assert!(dir.path().join("summary.json").is_file());
        assert!(dir.path().join("summary.csv").is_file());
    }

    #[test]
    fn standard_variants_rescale_levels_and_split_ranges() {
        let cfg = preset("desk").unwrap();
        let vars = standard_variants(&cfg);
        assert_eq!(vars.len(), 5);
        let names: Vec<&str> = vars.iter().map(|v| v.name.as_str()).collect();
        assert!(names.contains(&"levels-64"));
        assert!(names.contains(&"beta-smaller-half"));
        // smaller-half keeps T and halves the range from below
        let smaller = vars.iter().find(|v| v.name == "beta-smaller-half").unwrap();
        let merged = cfg.merged_with(&smaller.overrides).unwrap();
        assert_eq!(merged.schedule.t_count, cfg.schedule.t_count);
        assert_eq!(merged.schedule.beta_min, 1e-4);
        let expect_mid = 0.5 * (1e-4 + 0.02);
        assert!((merged.schedule.beta_max - expect_mid).abs() < 1e-12);
        let larger = vars.iter().find(|v| v.name == "beta-larger-half").unwrap();
        let merged = cfg.merged_with(&larger.overrides).unwrap();
        assert!((merged.schedule.beta_min - expect_mid).abs() < 1e-12);
        assert_eq!(merged.schedule.beta_max, 0.02);
        // level variants rescale the probe grid into range
        let l64 = vars.iter().find(|v| v.name == "levels-64").unwrap();
        let merged = cfg.merged_with(&l64.overrides).unwrap();
        assert!(merged.probe.ts.iter().all(|&t| t >= 1 && t <= 64));
    }
}
