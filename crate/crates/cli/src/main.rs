//! Command-line interface for diffusion pre-training and representation
//! evaluation. Exit codes: 0 success, 2 configuration error, 3 data error,
//! 4 numerical abort.

use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Parser, Subcommand};

use ddae_core::backbone::{build_ddae, truncate, DDAENetwork};
use ddae_core::harness::ablate::{run_ablation, standard_variants, Variant};
use ddae_core::harness::config::{parse_tap, preset, EmbedderSpec, RunConfig};
use ddae_core::harness::data::Dataset;
use ddae_core::harness::emit::{emit_csv, emit_plot, save_png_grid};
use ddae_core::harness::records::{read_records, Phase, RecordSink, RecordWriter};
use ddae_core::probe::{
    extract_features, finetune, grid_search, train_linear_probe, train_linear_probe_with_eval,
    FinetuneOpts, GridSearchSpec, Noising, ProbeOpts,
};
use ddae_core::repmetrics::{
    alignment, fid, sweep_accuracy, train_noise_cond_classifier, uniformity, ClassifierHead,
    EncoderEmbedder, IdentityEmbedder, PairEps, PcaEmbedder, TapFeatures,
};
use ddae_core::sampler::{sample, GuidanceSpec, SampleOpts};
use ddae_core::trainer::{pretrain, Trainer};
use ddae_core::Error as CoreError;

#[derive(Parser)]
#[command(name = "ddae", about = "Train small pixel-space denoising diffusion autoencoders and evaluate their activations as representations", version)]
struct Cli {
    /// JSON run configuration merged over the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Named preset to start from.
    #[arg(long, global = true, default_value = "desk")]
    preset: String,
    /// Master seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory override.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Diffusion pre-training with checkpoints and loss records.
    Pretrain {
        /// Resume from an epoch-boundary checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Exhaustive layer-noise probe over the configured taps and timesteps.
    Gridsearch {
        #[arg(long)]
        ckpt: Option<PathBuf>,
    },
    /// Linear probe of one (tap, timestep) cell.
    Probe {
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Tap as path:stage:block, e.g. up:1:0.
        #[arg(long)]
        tap: String,
        #[arg(long)]
        t: usize,
        /// Pass clean images instead of noised ones.
        #[arg(long)]
        clean: bool,
    },
    /// Truncate at a tap and fine-tune end-to-end on clean images.
    Finetune {
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        tap: String,
        #[arg(long)]
        t: usize,
        /// Use a freshly initialized network instead of the checkpoint
        /// (the from-scratch baseline).
        #[arg(long)]
        scratch: bool,
    },
    /// Alignment/uniformity at a cell; optionally train the
    /// noise-conditional classifier and sweep its accuracy over noise.
    Metrics {
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        tap: String,
        #[arg(long)]
        t: usize,
        #[arg(long)]
        with_classifier: bool,
    },
    /// Ancestral sampling; writes a PNG grid and a tensor container.
    Sample {
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(short = 'n', long)]
        n: Option<usize>,
        /// Classifier head container for guided sampling.
        #[arg(long)]
        classifier: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        target: usize,
        #[arg(long, default_value_t = 0.0)]
        scale: f64,
        /// Scale guidance by the standard deviation instead of the variance.
        #[arg(long)]
        std_scaled: bool,
        /// Allow ancestral stepping on exploding-variance schedules.
        #[arg(long)]
        allow_ve: bool,
    },
    /// Fréchet distance between the real set and generated images.
    Fid {
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Container of previously sampled images; samples fresh when absent.
        #[arg(long)]
        generated: Option<PathBuf>,
        #[arg(short = 'n', long)]
        n: Option<usize>,
    },
    /// Pretrain+grid+metric pipelines for the base config and its variants.
    Ablate {
        /// JSON file with a list of {name, overrides} variants; the standard
        /// level-count and rate-range set when absent.
        #[arg(long)]
        variants: Option<PathBuf>,
    },
    /// Render records as an SVG line chart (and optionally CSV).
    Plot {
        #[arg(long)]
        records: PathBuf,
        #[arg(long)]
        phase: Option<String>,
        #[arg(long)]
        key: Option<String>,
        #[arg(long)]
        out_file: Option<PathBuf>,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

fn resolve_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let mut cfg = preset(&cli.preset)?;
    if let Some(path) = &cli.config {
        let raw = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let overrides: serde_json::Value = serde_json::from_str(&raw).map_err(CoreError::from)?;
        cfg = cfg.merged_with(&overrides)?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
        cfg.train.seed = seed;
        cfg.probe.opts.seed = seed;
        cfg.finetune.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.display().to_string();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn open_writer(cfg: &RunConfig) -> anyhow::Result<RecordWriter> {
    let dir = PathBuf::from(&cfg.out_dir);
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(RecordWriter::create(
        dir.join("records.jsonl"),
        &cfg.run_id()?,
        &cfg.hash()?,
    )?)
}

fn load_net(cfg: &RunConfig, ckpt: &Option<PathBuf>) -> anyhow::Result<DDAENetwork> {
    let path = match ckpt {
        Some(p) => p.clone(),
        None => Trainer::latest_checkpoint(Path::new(&cfg.out_dir))?,
    };
    Ok(DDAENetwork::load(&path)?)
}

fn load_dataset(cfg: &RunConfig) -> anyhow::Result<(Dataset, Option<Dataset>)> {
    let train = cfg.dataset.load(cfg.model.image_size)?;
    let test = cfg.dataset.load_test(cfg.model.image_size)?;
    Ok((train, test))
}

fn main() {
    let cli = Cli::parse();
    if let Err(err) = run(&cli) {
        eprintln!("error: {err:#}");
        let code = match err.downcast_ref::<CoreError>() {
            Some(CoreError::Parameter(_)) | Some(CoreError::Contract(_)) | Some(CoreError::Json(_)) => 2,
            Some(CoreError::Data(_)) | Some(CoreError::Io { .. }) => 3,
            Some(CoreError::Numerical(_)) => 4,
            None => 1,
        };
        std::process::exit(code);
    }
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    let cfg = resolve_config(cli)?;
    match &cli.cmd {
        Cmd::Pretrain { resume } => {
            let (train_set, _) = load_dataset(&cfg)?;
            let sched = cfg.schedule.build()?;
            let mut sink = open_writer(&cfg)?;
            let out_dir = PathBuf::from(&cfg.out_dir);
            let mut opts = cfg.train.clone();
            opts.seed = cfg.seed;
            match resume {
                Some(ckpt) => {
                    let steps = train_set.len().div_ceil(opts.batch_size) * opts.epochs;
                    let mut trainer = Trainer::resume(ckpt, sched, opts.clone(), steps)?;
                    while trainer.epoch < opts.epochs {
                        let (loss_eps, loss_x0) = trainer.run_epoch(&train_set.images)?;
                        let e = trainer.epoch as u64;
                        sink.emit(Phase::Pretrain, "loss_eps", e, loss_eps)?;
                        sink.emit(Phase::Pretrain, "loss_x0", e, loss_x0)?;
                        println!("epoch {e}: loss_eps {loss_eps:.5} loss_x0 {loss_x0:.5}");
                        let cadence = opts.checkpoint_every;
                        if (cadence > 0 && trainer.epoch % cadence == 0)
                            || trainer.epoch == opts.epochs
                        {
                            trainer.save_checkpoint(&out_dir)?;
                        }
                    }
                }
                None => {
                    let net = build_ddae(&cfg.model, cfg.seed)?;
                    println!(
                        "training {} parameters for {} epochs on {} images",
                        net.param_count(),
                        opts.epochs,
                        train_set.len()
                    );
                    pretrain(net, &train_set.images, &sched, &opts, Some(&out_dir), &mut sink)?;
                }
            }
            println!("checkpoints under {}", cfg.out_dir);
            Ok(())
        }
        Cmd::Gridsearch { ckpt } => {
            let net = load_net(&cfg, ckpt)?;
            let (train_set, test_set) = load_dataset(&cfg)?;
            let sched = cfg.schedule.build()?;
            let mut sink = open_writer(&cfg)?;
            let spec = GridSearchSpec {
                taps: cfg.probe.taps.clone(),
                ts: cfg.probe.ts.clone(),
                opts: ProbeOpts { seed: cfg.seed, ..cfg.probe.opts.clone() },
                refine_radius: cfg.probe.refine_radius,
            };
            let mut step = 0u64;
            let report = grid_search(
                &net,
                &train_set,
                test_set.as_ref(),
                &sched,
                &spec,
                Some(&mut |cell: &ddae_core::probe::GridCell| {
                    println!(
                        "cell {} t={} -> {:.4}",
                        net.render_tap(&cell.tap).unwrap_or_else(|_| cell.tap.to_string()),
                        cell.t,
                        cell.linear_acc
                    );
                    let _ = sink.emit(
                        Phase::Grid,
                        &format!("linear_acc[{}][t={}]", cell.tap, cell.t),
                        step,
                        cell.linear_acc,
                    );
                    step += 1;
                }),
            )?;
            let path = PathBuf::from(&cfg.out_dir).join("gridreport.json");
            std::fs::write(&path, serde_json::to_string_pretty(&report)?)?;
            println!(
                "best: {} at t={} with accuracy {:.4} ({})",
                report.best.tap,
                report.best.t,
                report.best.linear_acc,
                net.render_tap(&report.best.tap)?
            );
            println!("report at {}", path.display());
            Ok(())
        }
        Cmd::Probe { ckpt, tap, t, clean } => {
            let net = load_net(&cfg, ckpt)?;
            let (train_set, test_set) = load_dataset(&cfg)?;
            let sched = cfg.schedule.build()?;
            let tap = parse_tap(tap, &cfg.model)?;
            let noising = if *clean { Noising::None } else { Noising::Random };
            let opts = ProbeOpts { seed: cfg.seed, ..cfg.probe.opts.clone() };
            let table = extract_features(&net, &tap, *t, &train_set, &sched, cfg.seed, noising)?;
            let (_, acc) = match &test_set {
                Some(ts) => {
                    let eval =
                        extract_features(&net, &tap, *t, ts, &sched, cfg.seed + 1, noising)?;
                    train_linear_probe_with_eval(&table, &eval, &opts)?
                }
                None => train_linear_probe(&table, &opts)?,
            };
            let mut sink = open_writer(&cfg)?;
            sink.emit(Phase::Probe, &format!("linear_acc[{tap}][t={t}]"), 0, acc)?;
            println!("linear probe {} t={t}: {acc:.4}", net.render_tap(&tap)?);
            Ok(())
        }
        Cmd::Finetune { ckpt, tap, t, scratch } => {
            let net = if *scratch {
                build_ddae(&cfg.model, cfg.seed.wrapping_add(1))?
            } else {
                load_net(&cfg, ckpt)?
            };
            let (train_set, test_set) = load_dataset(&cfg)?;
            let tap = parse_tap(tap, &cfg.model)?;
            let mut enc = truncate(&net, &tap, *t)?;
            let opts = FinetuneOpts { seed: cfg.seed, ..cfg.finetune.clone() };
            let acc = finetune(&mut enc, &train_set, test_set.as_ref(), &opts)?;
            let mut sink = open_writer(&cfg)?;
            let key = format!(
                "finetune_acc[{tap}][t={t}]{}",
                if *scratch { "[scratch]" } else { "" }
            );
            sink.emit(Phase::Finetune, &key, 0, acc)?;
            println!("fine-tune {} t={t}: {acc:.4}", net.render_tap(&tap)?);
            Ok(())
        }
        Cmd::Metrics { ckpt, tap, t, with_classifier } => {
            let net = load_net(&cfg, ckpt)?;
            let (train_set, _) = load_dataset(&cfg)?;
            let sched = cfg.schedule.build()?;
            let tap = parse_tap(tap, &cfg.model)?;
            let feat = TapFeatures { net: &net, tap };
            let mut rng = ddae_core::nn::substream(cfg.seed, "metrics");
            let a = alignment(&feat, &train_set, *t, &sched, &mut rng, cfg.metrics.n_pairs)?;
            let u = uniformity(
                &feat,
                &train_set,
                *t,
                &sched,
                &mut rng,
                cfg.metrics.n_pairs,
                PairEps::Shared,
            )?;
            let mut sink = open_writer(&cfg)?;
            sink.emit(Phase::Metric, &format!("alignment[{tap}][t={t}]"), 0, a)?;
            sink.emit(Phase::Metric, &format!("uniformity[{tap}][t={t}]"), 0, u)?;
            println!("alignment {a:.5}  uniformity {u:.5}");
            if *with_classifier {
                let opts = ProbeOpts { seed: cfg.seed, ..cfg.probe.opts.clone() };
                let head = train_noise_cond_classifier(&net, &tap, &train_set, &sched, &opts)?;
                let ts: Vec<usize> = cfg.probe.ts.clone();
                let sweep = sweep_accuracy(&head, &net, &tap, &train_set, &sched, &ts, cfg.seed)?;
                for (ti, acc) in &sweep {
                    sink.emit(Phase::Metric, "noise_cond_acc", *ti as u64, *acc)?;
                    println!("noise-conditional accuracy t={ti}: {acc:.4}");
                }
                let head_path = PathBuf::from(&cfg.out_dir).join("classifier.ckpt");
                head.save(&head_path, &tap)?;
                println!("classifier head at {}", head_path.display());
            }
            Ok(())
        }
        Cmd::Sample { ckpt, n, classifier, target, scale, std_scaled, allow_ve } => {
            let net = load_net(&cfg, ckpt)?;
            let sched = cfg.schedule.build()?;
            let n = n.unwrap_or(cfg.sample.n_images);
            let mut rng = ddae_core::nn::substream(cfg.seed, "sampling");
            let opts = SampleOpts { allow_ve: *allow_ve, ..SampleOpts::default() };
            let loaded = match classifier {
                Some(path) => Some(ClassifierHead::load(path)?),
                None => None,
            };
            let guidance = loaded.as_ref().map(|(head, tap)| GuidanceSpec {
                head,
                tap: *tap,
                target_label: *target,
                scale: *scale,
                variance_scaled: !*std_scaled,
            });
            let batch = sample(&net, &sched, n, &mut rng, guidance.as_ref(), &opts)?;
            std::fs::create_dir_all(&cfg.out_dir)?;
            let png = PathBuf::from(&cfg.out_dir).join("samples.png");
            save_png_grid(&batch.data, &png, cfg.sample.grid_cols)?;
            let mut map = ddae_core::container::TensorMap::new();
            map.insert("images", batch.data.clone().into_dyn());
            let raw = PathBuf::from(&cfg.out_dir).join("samples.ckpt");
            map.save(&raw)?;
            let mut sink = open_writer(&cfg)?;
            sink.emit(Phase::Sample, "n_images", 0, n as f64)?;
            println!("wrote {} and {}", png.display(), raw.display());
            Ok(())
        }
        Cmd::Fid { ckpt, generated, n } => {
            let (train_set, _) = load_dataset(&cfg)?;
            let sched = cfg.schedule.build()?;
            let n = n
                .unwrap_or(if cfg.metrics.fid_samples > 0 {
                    cfg.metrics.fid_samples
                } else {
                    cfg.sample.n_images
                })
                .min(train_set.len());
            let generated: ndarray::Array4<f32> = match generated {
                Some(path) => {
                    let map = ddae_core::container::TensorMap::load(path)?;
                    let t = map
                        .get("images")
                        .ok_or_else(|| CoreError::data("container has no 'images' tensor"))?;
                    t.clone()
                        .into_dimensionality()
                        .map_err(|e| CoreError::data(format!("images tensor: {e}")))?
                }
                None => {
                    let net = load_net(&cfg, ckpt)?;
                    let mut rng = ddae_core::nn::substream(cfg.seed, "sampling");
                    sample(&net, &sched, n, &mut rng, None, &SampleOpts::default())?.data
                }
            };
            let real = train_set.take(n.max(2));
            let value = match &cfg.metrics.embedder {
                EmbedderSpec::Pixels => fid(&IdentityEmbedder, &real.images, &generated)?,
                EmbedderSpec::Pca { dims, stride } => {
                    let pca = PcaEmbedder::fit(&real.images, *dims, *stride)?;
                    fid(&pca, &real.images, &generated)?
                }
                EmbedderSpec::Encoder { checkpoint, tap, t } => {
                    let enc_net = DDAENetwork::load(checkpoint)?;
                    let enc = truncate(&enc_net, tap, *t)?;
                    fid(&EncoderEmbedder(enc), &real.images, &generated)?
                }
            };
            let mut sink = open_writer(&cfg)?;
            sink.emit(Phase::Metric, "fid", 0, value)?;
            println!("fid: {value:.5}");
            Ok(())
        }
        Cmd::Ablate { variants } => {
            let vars: Vec<Variant> = match variants {
                Some(path) => {
                    let raw = std::fs::read_to_string(path)
                        .with_context(|| format!("reading {}", path.display()))?;
                    serde_json::from_str(&raw).map_err(CoreError::from)?
                }
                None => standard_variants(&cfg),
            };
            let out_dir = PathBuf::from(&cfg.out_dir);
            std::fs::create_dir_all(&out_dir)?;
            let summary = run_ablation(&cfg, &vars, Some(&out_dir))?;
            for row in &summary.rows {
                match (&row.outcome, &row.error) {
                    (Some(o), _) => println!(
                        "{}: loss_eps {:.5} loss_x0 {:.5} best_acc {:.4} fid {:?}",
                        row.variant, o.final_loss_eps, o.final_loss_x0, o.best_probe_acc, o.fid
                    ),
                    (_, Some(e)) => println!("{}: FAILED ({e})", row.variant),
                    _ => {}
                }
            }
            println!("summary under {}", out_dir.display());
            Ok(())
        }
        Cmd::Plot { records, phase, key, out_file, csv } => {
            let (rows, _) = read_records(records)?;
            let filtered: Vec<_> = rows
                .into_iter()
                .filter(|r| {
                    phase
                        .as_ref()
                        .map(|p| {
                            serde_json::to_value(r.phase)
                                .ok()
                                .and_then(|v| v.as_str().map(|s| s == p))
                                .unwrap_or(false)
                        })
                        .unwrap_or(true)
                        && key.as_ref().map(|k| r.key.contains(k.as_str())).unwrap_or(true)
                })
                .collect();
            if filtered.is_empty() {
                println!("no records matched the selection; writing an empty chart");
            }
            let out_path = out_file
                .clone()
                .unwrap_or_else(|| PathBuf::from(&cfg.out_dir).join("plot.svg"));
            if let Some(parent) = out_path.parent() {
                std::fs::create_dir_all(parent)?;
            }
            emit_plot(&filtered, &out_path)?;
            println!("chart at {}", out_path.display());
            if let Some(csv_path) = csv {
                emit_csv(&filtered, csv_path)?;
                println!("csv at {}", csv_path.display());
            }
            Ok(())
        }
    }
}
