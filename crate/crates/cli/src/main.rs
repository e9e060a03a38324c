//! Command-line front end: dataset production, training, evaluation, and the
//! staged transfer-scheme experiments.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use sim2real_core::eval;
use sim2real_core::formats::{self, Manifest};
use sim2real_core::net::DetectorNet;
use sim2real_core::rng::{derive_seed, Rng};
use sim2real_core::schemes::{self, MatrixConfig, Scheme, SchemeConfig};
use sim2real_core::synth::{self, DomainProfile, Scene};
use sim2real_core::trainer::TrainConfig;
use sim2real_core::weights;

#[derive(Parser)]
#[command(
    name = "sim2real",
    about = "Desk-scale virtual-to-real object detection lab",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic labeled dataset.
    Generate {
        /// Number of images.
        #[arg(long)]
        n: usize,
        /// Photometric profile: virtual, real, or neutral.
        #[arg(long, default_value = "virtual")]
        profile: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory (images, annotations, manifest.csv).
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = synth::DEFAULT_CLASSES)]
        classes: usize,
        /// Square image edge in pixels.
        #[arg(long, default_value_t = synth::DEFAULT_IMAGE_SIZE)]
        size: usize,
        #[arg(long, default_value_t = synth::DEFAULT_MAX_OBJECTS)]
        max_objects: usize,
        /// Override the profile's mean luminance offset.
        #[arg(long)]
        brightness: Option<f64>,
    },
    /// Draw a class-balanced subset from a manifest.
    Sample {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Path for the subset manifest CSV.
        #[arg(long)]
        out: PathBuf,
    },
    /// Split a manifest into two halves.
    Split {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_train: PathBuf,
        #[arg(long)]
        out_test: PathBuf,
    },
    /// Compose four-scene mosaics from one or more manifests.
    Mosaic {
        /// Comma-separated manifest paths to pool scenes from.
        #[arg(long, value_delimiter = ',')]
        manifests: Vec<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory for the mosaic dataset.
        #[arg(long)]
        out: PathBuf,
        /// Cap on the number of mosaics (default: one per four pooled scenes).
        #[arg(long)]
        n: Option<usize>,
    },
    /// Train a detector from a key=value config file.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate a weight file on a labeled manifest.
    Eval {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = schemes::DEFAULT_IOU_THRESH)]
        iou_thresh: f64,
        /// Recorded alongside the report; ranking for mAP always starts at
        /// the evaluation floor.
        #[arg(long, default_value_t = schemes::DEFAULT_CONF_THRESH)]
        conf_thresh: f64,
        /// Per-class AP report CSV.
        #[arg(long)]
        report: PathBuf,
        /// Box slots per grid cell the weights were trained with.
        #[arg(long, default_value_t = 2)]
        boxes_per_cell: usize,
    },
    /// Average color histogram of a dataset.
    Histogram {
        #[arg(long)]
        manifest: PathBuf,
        /// Output CSV (256 bins per channel).
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one staged transfer scheme end to end.
    Scheme {
        /// One of YR, YVR, YCVR, YCSVR, YCMVR, YCMSVR.
        #[arg(long)]
        name: String,
        #[arg(long, default_value_t = schemes::DEFAULT_VIRTUAL_N)]
        virtual_n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Working/output directory (datasets, stage weights, report.csv).
        #[arg(long, default_value = "scheme_out")]
        out: PathBuf,
        #[arg(long, default_value_t = 3)]
        classes: usize,
        #[arg(long, default_value_t = schemes::DEFAULT_REAL_N)]
        real_n: usize,
    },
    /// Run a scheme/size/seed grid from a config file.
    Matrix {
        #[arg(long)]
        config: PathBuf,
    },
}

fn main() -> anyhow::Result<()> {
    match Cli::parse().cmd {
        Cmd::Generate {
            n,
            profile,
            seed,
            out,
            classes,
            size,
            max_objects,
            brightness,
        } => {
            let mut profile = DomainProfile::preset(&profile)?;
            if let Some(b) = brightness {
                profile = profile.with_brightness(b);
            }
            let manifest =
                synth::generate_dataset(seed, n, &profile, &out, classes, max_objects, size)?;
            println!(
                "wrote {} images ({} profile, seed {seed}) to {}",
                manifest.len(),
                profile.name,
                out.display()
            );
        }
        Cmd::Sample {
            manifest,
            n,
            seed,
            out,
        } => {
            let parent = Manifest::load(&manifest)?;
            let subset = synth::sample_subset(&parent, n, seed)?;
            subset.save(&out)?;
            println!(
                "sampled {} of {} entries into {}",
                subset.len(),
                parent.len(),
                out.display()
            );
        }
        Cmd::Split {
            manifest,
            seed,
            out_train,
            out_test,
        } => {
            let parent = Manifest::load(&manifest)?;
            let (train, test) = synth::split_half(&parent, seed)?;
            train.save(&out_train)?;
            test.save(&out_test)?;
            println!(
                "split {} entries into {} train / {} test",
                parent.len(),
                train.len(),
                test.len()
            );
        }
        Cmd::Mosaic {
            manifests,
            seed,
            out,
            n,
        } => {
            if manifests.is_empty() {
                bail!("at least one manifest is required");
            }
            let count = write_mosaics(&manifests, seed, &out, n)?;
            println!("wrote {count} mosaics to {}", out.display());
        }
        Cmd::Train { config } => {
            let cfg = TrainConfig::from_file(&config)?;
            let stats = cfg.run()?;
            println!(
                "trained {} steps, final epoch mean loss {:.6}, weights in {}",
                stats.steps,
                stats.final_loss,
                cfg.out_weights.display()
            );
        }
        Cmd::Eval {
            weights,
            manifest,
            iou_thresh,
            conf_thresh,
            report,
            boxes_per_cell,
        } => {
            let manifest = Manifest::load(&manifest)?;
            let first = manifest
                .entries
                .first()
                .context("manifest has no entries")?;
            let probe = formats::read_ppm(&manifest.image_path(first))?;
            let config = weights::infer_net_config(&weights, probe.shape[0], boxes_per_cell)?;
            let mut net = DetectorNet::new(&config, 0)?;
            weights::load_weights(&mut net, &weights)?;
            let mut ap = eval::evaluate_detector(&mut net, &manifest, iou_thresh)?;
            ap.conf_threshold = conf_thresh;
            let names: Vec<String> = (0..config.classes)
                .map(|i| synth::class_name(config.classes, i))
                .collect();
            ap.write_csv(&report, &names)?;
            println!(
                "mAP {:.6} at IoU {:.2} over {} images, report in {}",
                ap.map,
                iou_thresh,
                manifest.len(),
                report.display()
            );
        }
        Cmd::Histogram { manifest, out } => {
            let manifest = Manifest::load(&manifest)?;
            let hist = eval::average_color_histogram(&manifest)?;
            hist.write_csv(&out)?;
            println!(
                "mean intensity {:.4} over {} images, histogram in {}",
                hist.mean_intensity(),
                manifest.len(),
                out.display()
            );
        }
        Cmd::Scheme {
            name,
            virtual_n,
            seed,
            out,
            classes,
            real_n,
        } => {
            let scheme: Scheme = name.parse()?;
            let mut config = SchemeConfig::preset(scheme, seed, &out);
            config.virtual_n = virtual_n;
            config.classes = classes;
            config.real_n = real_n;
            let report = schemes::run_scheme(&config)?;
            report.write_csv(&out.join("report.csv"))?;
            println!(
                "{} virtual_n {} seed {}: mAP {:.6} in {:.1}s, report in {}",
                report.scheme,
                report.virtual_n,
                report.seed,
                report.map,
                report.wall_seconds,
                out.join("report.csv").display()
            );
        }
        Cmd::Matrix { config } => {
            let cfg = MatrixConfig::from_file(&config)?;
            let summary = schemes::run_matrix(&cfg)?;
            for (cell, msg) in &summary.failures {
                eprintln!("cell {cell} failed: {msg}");
            }
            println!(
                "{} cells ({} failed), {} aggregate rows, table in {}",
                summary.rows,
                summary.failures.len(),
                summary.aggregates,
                cfg.out.display()
            );
        }
    }
    Ok(())
}

/// Pool every scene behind the manifests, shuffle, and compose one mosaic per
/// group of four. Writes images, annotations, and a manifest like any other
/// generated dataset.
fn write_mosaics(
    manifests: &[PathBuf],
    seed: u64,
    out: &Path,
    cap: Option<usize>,
) -> anyhow::Result<usize> {
    let mut pool: Vec<Scene> = Vec::new();
    let mut classes = 0usize;
    for path in manifests {
        let manifest = Manifest::load(path)?;
        classes = classes.max(manifest.classes());
        for entry in &manifest.entries {
            pool.push(Scene {
                image: formats::read_ppm(&manifest.image_path(entry))?,
                annotations: formats::read_annotations(
                    &manifest.annotation_path(entry),
                    manifest.classes(),
                )?,
                seed: 0,
            });
        }
    }
    if pool.len() < 4 {
        bail!(
            "need at least 4 scenes to build a mosaic, got {}",
            pool.len()
        );
    }
    let size = pool[0].image.shape[0];
    let mut order: Vec<usize> = (0..pool.len()).collect();
    Rng::new(derive_seed(seed, 0)).shuffle(&mut order);
    let mut count = pool.len() / 4;
    if let Some(cap) = cap {
        count = count.min(cap);
    }

    std::fs::create_dir_all(out)?;
    let mut entries = Vec::with_capacity(count);
    for i in 0..count {
        let pick = |j: usize| pool[order[4 * i + j]].clone();
        let scenes = [pick(0), pick(1), pick(2), pick(3)];
        let composed = synth::mosaic(&scenes, derive_seed(seed, 1 + i as u64), size);
        let image_name = format!("mosaic_{i:05}.ppm");
        let ann_name = format!("mosaic_{i:05}.txt");
        formats::write_ppm(&out.join(&image_name), &composed.image)?;
        formats::write_annotations(&out.join(&ann_name), &composed.annotations)?;
        let mut class_counts = vec![0usize; classes];
        for &(class, _) in &composed.annotations {
            class_counts[class] += 1;
        }
        entries.push(formats::ManifestEntry {
            image: image_name.into(),
            annotation: ann_name.into(),
            num_objects: composed.annotations.len(),
            class_counts,
        });
    }
    let manifest = Manifest {
        dir: out.to_path_buf(),
        entries,
    };
    manifest.save(&out.join("manifest.csv"))?;
    Ok(count)
}
