//! The six staged training schemes and the experiment matrix around them.
//!
//! Scheme names are acronyms over the stages they run: Y (the detector),
//! C (generic pretraining), M (mosaic during virtual training), S (segment
//! selection with a frozen head), V (virtual-domain training), R (real-domain
//! fine-tuning). Every preset is overridable field by field.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use crate::config::KvFile;
use crate::error::{Error, Result};
use crate::eval::{self, APReport};
use crate::formats::Manifest;
use crate::loss::DEFAULT_LAMBDA_NOOBJ;
use crate::net::{DetectorNet, NetConfig, SegmentName};
use crate::rng::derive_seed;
use crate::synth::{self, DomainProfile};
use crate::trainer::{self, TrainOpts, TrainStats, DEFAULT_LR, DEFAULT_MOMENTUM};
use crate::weights;

pub const DEFAULT_VIRTUAL_N: usize = 500;
pub const DEFAULT_REAL_N: usize = 200;
pub const DEFAULT_PRETRAIN_N: usize = 300;
pub const DEFAULT_EPOCHS_PRETRAIN: usize = 20;
pub const DEFAULT_EPOCHS_VIRTUAL: usize = 30;
pub const DEFAULT_EPOCHS_REAL: usize = 30;
pub const DEFAULT_CONF_THRESH: f64 = 0.25;
pub const DEFAULT_IOU_THRESH: f64 = 0.5;
pub const DEFAULT_VIRTUAL_BRIGHTNESS: f64 = -0.25;
/// Class offset applied to the glyph table for the pretraining task, so the
/// pretrained detector has seen every mechanism (localization, objectness,
/// classification) but none of the target label/shape pairings.
pub const PRETRAIN_SHAPE_OFFSET: usize = 3;

/// Published mAP percentages from the original full-scale experiments
/// (GPU-class detector on photorealistic safety-equipment data), as
/// (scheme, virtual sample count, mAP). Kept for orientation only: these are
/// not reproducible at this crate's desk scale and are never used as test
/// oracles. The qualitative ordering (YR at zero, virtual pretraining
/// helping, mosaic hurting) is what the miniature reproduces.
pub const FULL_SCALE_REFERENCE: &[(Scheme, usize, f64)] = &[
    (Scheme::YR, 0, 0.0),
    (Scheme::YVR, 5000, 27.251),
    (Scheme::YVR, 10000, 51.369),
    (Scheme::YCVR, 5000, 65.513),
    (Scheme::YCVR, 10000, 72.264),
    (Scheme::YCVR, 20000, 59.691),
    (Scheme::YCSVR, 5000, 74.457),
    (Scheme::YCSVR, 10000, 72.096),
    (Scheme::YCSVR, 20000, 73.369),
    (Scheme::YCMVR, 5000, 55.010),
    (Scheme::YCMVR, 10000, 54.368),
    (Scheme::YCMSVR, 5000, 59.977),
    (Scheme::YCMSVR, 10000, 53.788),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[allow(clippy::upper_case_acronyms)]
pub enum Scheme {
    /// Real data only, from scratch.
    YR,
    /// Virtual training from scratch, then real fine-tuning.
    YVR,
    /// Generic pretraining, virtual training, real fine-tuning.
    YCVR,
    /// As YCVR, but stage R carries backbone+neck and freezes the head.
    YCSVR,
    /// As YCVR with mosaic augmentation during virtual training.
    YCMVR,
    /// Mosaic during virtual training; stage R carries backbone only and
    /// freezes the head.
    YCMSVR,
}

impl Scheme {
    pub const ALL: [Scheme; 6] = [
        Scheme::YR,
        Scheme::YVR,
        Scheme::YCVR,
        Scheme::YCSVR,
        Scheme::YCMVR,
        Scheme::YCMSVR,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Scheme::YR => "YR",
            Scheme::YVR => "YVR",
            Scheme::YCVR => "YCVR",
            Scheme::YCSVR => "YCSVR",
            Scheme::YCMVR => "YCMVR",
            Scheme::YCMSVR => "YCMSVR",
        }
    }

    pub fn has_pretrain(&self) -> bool {
        !matches!(self, Scheme::YR | Scheme::YVR)
    }

    pub fn has_virtual_stage(&self) -> bool {
        !matches!(self, Scheme::YR)
    }

    pub fn mosaic(&self) -> bool {
        matches!(self, Scheme::YCMVR | Scheme::YCMSVR)
    }

    /// Segments stage R receives from the post-V weights and keeps training.
    pub fn transfer_segments(&self) -> Vec<SegmentName> {
        match self {
            Scheme::YR => vec![],
            Scheme::YVR | Scheme::YCVR | Scheme::YCMVR => SegmentName::ALL.to_vec(),
            Scheme::YCSVR => vec![SegmentName::Backbone, SegmentName::Neck],
            Scheme::YCMSVR => vec![SegmentName::Backbone],
        }
    }

    /// Segments stage R receives from the post-V weights and then freezes.
    pub fn frozen_segments(&self) -> Vec<SegmentName> {
        match self {
            Scheme::YCSVR | Scheme::YCMSVR => vec![SegmentName::Head],
            _ => vec![],
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scheme::ALL
            .into_iter()
            .find(|sch| sch.as_str() == s)
            .ok_or_else(|| {
                let valid: Vec<&str> = Scheme::ALL.iter().map(|s| s.as_str()).collect();
                Error::config(format!(
                    "unknown scheme {s:?}, valid schemes: {}",
                    valid.join(", ")
                ))
            })
    }
}

/// Full description of one experiment cell. `preset` fills every field from
/// the scheme's definition; callers may override anything afterwards.
#[derive(Debug, Clone)]
pub struct SchemeConfig {
    pub scheme: Scheme,
    pub virtual_n: usize,
    /// Manifests for the real train/test splits. When `None`, a real-domain
    /// pool of `2 * real_n` images is generated and split in half, all from
    /// `seed`.
    pub real_train: Option<PathBuf>,
    pub real_test: Option<PathBuf>,
    pub real_n: usize,
    pub pretrain_n: usize,
    pub epochs_pretrain: usize,
    pub epochs_virtual: usize,
    pub epochs_real: usize,
    pub transfer_segments: Vec<SegmentName>,
    pub frozen_segments: Vec<SegmentName>,
    pub mosaic: bool,
    pub seed: u64,
    pub lr: f64,
    pub momentum: f64,
    pub lambda_noobj: f64,
    /// Recorded in reports for downstream consumers; evaluation itself ranks
    /// every detection above the mAP floor.
    pub conf_thresh: f64,
    pub iou_thresh: f64,
    pub classes: usize,
    pub input_size: usize,
    pub virtual_brightness: f64,
    /// Gradient-norm cap for every training stage; 0 disables clipping.
    pub clip_norm: f64,
    /// Where datasets, stage weights, and intermediate manifests land.
    pub work_dir: PathBuf,
}

impl SchemeConfig {
    pub fn preset(scheme: Scheme, seed: u64, work_dir: &Path) -> Self {
        SchemeConfig {
            scheme,
            virtual_n: DEFAULT_VIRTUAL_N,
            real_train: None,
            real_test: None,
            real_n: DEFAULT_REAL_N,
            pretrain_n: DEFAULT_PRETRAIN_N,
            epochs_pretrain: DEFAULT_EPOCHS_PRETRAIN,
            epochs_virtual: DEFAULT_EPOCHS_VIRTUAL,
            epochs_real: DEFAULT_EPOCHS_REAL,
            transfer_segments: scheme.transfer_segments(),
            frozen_segments: scheme.frozen_segments(),
            mosaic: scheme.mosaic(),
            seed,
            lr: DEFAULT_LR,
            momentum: DEFAULT_MOMENTUM,
            lambda_noobj: DEFAULT_LAMBDA_NOOBJ,
            conf_thresh: DEFAULT_CONF_THRESH,
            iou_thresh: DEFAULT_IOU_THRESH,
            classes: 3,
            input_size: 64,
            virtual_brightness: DEFAULT_VIRTUAL_BRIGHTNESS,
            clip_norm: trainer::DEFAULT_CLIP_NORM,
            work_dir: work_dir.to_path_buf(),
        }
    }

    pub fn net_config(&self) -> NetConfig {
        let mut cfg = NetConfig::default_for(self.classes);
        cfg.input_size = self.input_size;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        if self.scheme.has_virtual_stage() && self.virtual_n == 0 {
            return Err(Error::config("virtual_n must be positive"));
        }
        if self.real_train.is_none() && self.real_n == 0 {
            return Err(Error::config("real_n must be positive"));
        }
        if !(self.iou_thresh > 0.0 && self.iou_thresh <= 1.0) {
            return Err(Error::config("iou_thresh must be in (0, 1]"));
        }
        if self.clip_norm < 0.0 {
            return Err(Error::config("clip_norm must be zero or positive"));
        }
        self.net_config().validate()
    }

    fn train_opts(&self, epochs: usize, seed: u64, mosaic: bool) -> TrainOpts {
        TrainOpts {
            epochs,
            lr: self.lr,
            momentum: self.momentum,
            lambda_noobj: self.lambda_noobj,
            seed,
            mosaic,
            clip_norm: self.clip_norm,
        }
    }
}

/// One row of the experiment table: stage losses, test mAP, per-class APs.
/// `wall_seconds` is kept for logs but never serialized, so reports stay
/// byte-reproducible.
#[derive(Debug, Clone)]
pub struct RunReport {
    pub scheme: Scheme,
    pub virtual_n: usize,
    pub seed: u64,
    pub pretrain_loss: Option<f64>,
    pub virtual_loss: Option<f64>,
    pub real_loss: f64,
    pub map: f64,
    pub per_class_ap: Vec<Option<f64>>,
    pub wall_seconds: f64,
}

fn opt_cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

impl RunReport {
    pub fn csv_header(classes: usize) -> String {
        let mut h = String::from("scheme,virtual_n,seed,pretrain_loss,virtual_loss,real_loss,map");
        for i in 0..classes {
            h.push_str(&format!(",ap_{}", synth::class_name(classes, i)));
        }
        h.push('\n');
        h
    }

    pub fn csv_row(&self) -> String {
        let mut row = format!(
            "{},{},{},{},{},{:.6},{:.6}",
            self.scheme,
            self.virtual_n,
            self.seed,
            opt_cell(self.pretrain_loss),
            opt_cell(self.virtual_loss),
            self.real_loss,
            self.map,
        );
        for ap in &self.per_class_ap {
            row.push(',');
            row.push_str(&opt_cell(*ap));
        }
        row.push('\n');
        row
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = RunReport::csv_header(self.per_class_ap.len());
        out.push_str(&self.csv_row());
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// Train the detector on an auxiliary synthetic task: same class count,
/// neutral photometric profile, but each class drawn with a different glyph
/// than the target task uses. Saves all three segments to `out_weights`.
pub fn pretrain_generic(
    seed: u64,
    out_weights: &Path,
    net_config: &NetConfig,
    n: usize,
    epochs: usize,
    opts_from: &SchemeConfig,
    work_dir: &Path,
) -> Result<TrainStats> {
    let manifest = synth::generate_dataset_with(
        derive_seed(seed, 0),
        n,
        &DomainProfile::neutral(),
        &work_dir.join("pretrain"),
        net_config.classes,
        synth::DEFAULT_MAX_OBJECTS,
        net_config.input_size,
        PRETRAIN_SHAPE_OFFSET,
    )?;
    let data = trainer::load_dataset(&manifest, net_config.classes)?;
    let mut net = DetectorNet::new(net_config, derive_seed(seed, 1))?;
    let opts = opts_from.train_opts(epochs, derive_seed(seed, 2), false);
    let stats = trainer::train(&mut net, &data, &opts)?;
    weights::save_weights(&net, out_weights)?;
    Ok(stats)
}

/// Seed substream indices for [`run_scheme`]. Fixed so that runs sharing a
/// master seed also share datasets, making cross-scheme comparisons paired.
mod stream {
    pub const REAL_POOL: u64 = 0;
    pub const REAL_SPLIT: u64 = 1;
    pub const VIRTUAL_DATA: u64 = 2;
    pub const PRETRAIN: u64 = 3;
    pub const INIT_V: u64 = 4;
    pub const INIT_R: u64 = 5;
    pub const TRAIN_V: u64 = 6;
    pub const TRAIN_R: u64 = 7;
}

/// Execute one staged experiment end to end.
///
/// Stages, in order and as the scheme requests them: C trains on the generic
/// auxiliary task; V starts from the C weights (when present) and trains on
/// generated virtual-domain data, optionally with mosaic; R starts from a
/// fresh init, receives `transfer_segments ∪ frozen_segments` from the
/// post-V weights, freezes `frozen_segments`, and fine-tunes on real-domain
/// data. The result is evaluated on the real test split.
///
/// Weights are written after every stage (`weights_c.sdw`, `weights_v.sdw`,
/// `weights_r.sdw` in `work_dir`), so later stages can be reproduced from
/// files alone. All randomness derives from `config.seed`.
pub fn run_scheme(config: &SchemeConfig) -> Result<RunReport> {
    config.validate()?;
    let start = Instant::now();
    let work = &config.work_dir;
    std::fs::create_dir_all(work).map_err(|e| Error::io(work, e))?;
    let net_config = config.net_config();
    let seed = config.seed;

    // Real train/test data: supplied or generated-and-split.
    let (real_train, real_test) = match (&config.real_train, &config.real_test) {
        (Some(tr), Some(te)) => (Manifest::load(tr)?, Manifest::load(te)?),
        (None, None) => {
            let pool = synth::generate_dataset(
                derive_seed(seed, stream::REAL_POOL),
                2 * config.real_n,
                &DomainProfile::real_default(),
                &work.join("real_pool"),
                config.classes,
                synth::DEFAULT_MAX_OBJECTS,
                config.input_size,
            )?;
            let (train, test) = synth::split_half(&pool, derive_seed(seed, stream::REAL_SPLIT))?;
            train.save(&work.join("real_train.csv"))?;
            test.save(&work.join("real_test.csv"))?;
            (train, test)
        }
        _ => {
            return Err(Error::config(
                "real_train and real_test must be given together",
            ))
        }
    };
    let real_train_data = trainer::load_dataset(&real_train, config.classes)?;

    // Stage C: generic pretraining.
    let mut pretrain_loss = None;
    let weights_c = work.join("weights_c.sdw");
    if config.scheme.has_pretrain() {
        let stats = pretrain_generic(
            derive_seed(seed, stream::PRETRAIN),
            &weights_c,
            &net_config,
            config.pretrain_n,
            config.epochs_pretrain,
            config,
            work,
        )?;
        pretrain_loss = Some(stats.final_loss);
    }

    // Stage V: virtual-domain training.
    let mut virtual_loss = None;
    let weights_v = work.join("weights_v.sdw");
    if config.scheme.has_virtual_stage() {
        let profile = DomainProfile::virtual_default().with_brightness(config.virtual_brightness);
        let virtual_manifest = synth::generate_dataset(
            derive_seed(seed, stream::VIRTUAL_DATA),
            config.virtual_n,
            &profile,
            &work.join("virtual"),
            config.classes,
            synth::DEFAULT_MAX_OBJECTS,
            config.input_size,
        )?;
        let virtual_data = trainer::load_dataset(&virtual_manifest, config.classes)?;
        let mut net = DetectorNet::new(&net_config, derive_seed(seed, stream::INIT_V))?;
        if config.scheme.has_pretrain() {
            weights::transfer_weights(&mut net, &weights_c, &SegmentName::ALL)?;
        }
        let opts = config.train_opts(
            config.epochs_virtual,
            derive_seed(seed, stream::TRAIN_V),
            config.mosaic,
        );
        let stats = trainer::train(&mut net, &virtual_data, &opts)?;
        weights::save_weights(&net, &weights_v)?;
        virtual_loss = Some(stats.final_loss);
    }

    // Stage R: real-domain fine-tuning with the configured carry/freeze.
    let mut net = DetectorNet::new(&net_config, derive_seed(seed, stream::INIT_R))?;
    if config.scheme.has_virtual_stage() {
        let mut carried = config.transfer_segments.clone();
        for &s in &config.frozen_segments {
            if !carried.contains(&s) {
                carried.push(s);
            }
        }
        weights::transfer_weights(&mut net, &weights_v, &carried)?;
    }
    net.set_frozen(&config.frozen_segments, true);
    let opts = config.train_opts(
        config.epochs_real,
        derive_seed(seed, stream::TRAIN_R),
        false,
    );
    let stats = trainer::train(&mut net, &real_train_data, &opts)?;
    weights::save_weights(&net, &work.join("weights_r.sdw"))?;

    let ap: APReport = eval::evaluate_detector(&mut net, &real_test, config.iou_thresh)?;
    Ok(RunReport {
        scheme: config.scheme,
        virtual_n: config.virtual_n,
        seed,
        pretrain_loss,
        virtual_loss,
        real_loss: stats.final_loss,
        map: ap.map,
        per_class_ap: ap.per_class_ap,
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}

/// The full experiment grid: schemes x virtual sizes x seeds, plus the knobs
/// shared by every cell.
#[derive(Debug, Clone)]
pub struct MatrixConfig {
    pub schemes: Vec<Scheme>,
    pub virtual_ns: Vec<usize>,
    pub seeds: Vec<u64>,
    pub out: PathBuf,
    pub work_dir: PathBuf,
    /// Template applied to every cell; scheme, virtual_n, seed, and work_dir
    /// are overwritten per cell.
    pub base: SchemeConfig,
}

impl MatrixConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let mut kv = KvFile::load(path)?;
        let schemes: Vec<Scheme> = {
            let listed = kv.take_list("schemes");
            if listed.is_empty() {
                Scheme::ALL.to_vec()
            } else {
                listed.iter().map(|s| s.parse()).collect::<Result<_>>()?
            }
        };
        let virtual_ns: Vec<usize> = {
            let listed = kv.take_list("virtual_ns");
            if listed.is_empty() {
                vec![DEFAULT_VIRTUAL_N]
            } else {
                listed
                    .iter()
                    .map(|s| {
                        s.parse::<usize>()
                            .map_err(|_| Error::config(format!("bad virtual_ns entry {s:?}")))
                    })
                    .collect::<Result<_>>()?
            }
        };
        let seeds: Vec<u64> = {
            let listed = kv.take_list("seeds");
            if listed.is_empty() {
                vec![1]
            } else {
                listed
                    .iter()
                    .map(|s| {
                        s.parse::<u64>()
                            .map_err(|_| Error::config(format!("bad seeds entry {s:?}")))
                    })
                    .collect::<Result<_>>()?
            }
        };
        let out = PathBuf::from(kv.take_required("out")?);
        let work_dir = PathBuf::from(kv.take("work_dir").unwrap_or_else(|| "matrix_work".into()));

        let mut base = SchemeConfig::preset(schemes[0], seeds[0], &work_dir);
        base.classes = kv.take_usize("classes", base.classes)?;
        base.input_size = kv.take_usize("input_size", base.input_size)?;
        base.real_n = kv.take_usize("real_n", base.real_n)?;
        base.pretrain_n = kv.take_usize("pretrain_n", base.pretrain_n)?;
        base.epochs_pretrain = kv.take_usize("epochs_pretrain", base.epochs_pretrain)?;
        base.epochs_virtual = kv.take_usize("epochs_virtual", base.epochs_virtual)?;
        base.epochs_real = kv.take_usize("epochs_real", base.epochs_real)?;
        base.lr = kv.take_f64("lr", base.lr)?;
        base.momentum = kv.take_f64("momentum", base.momentum)?;
        base.lambda_noobj = kv.take_f64("lambda_noobj", base.lambda_noobj)?;
        base.conf_thresh = kv.take_f64("conf_thresh", base.conf_thresh)?;
        base.iou_thresh = kv.take_f64("iou_thresh", base.iou_thresh)?;
        base.virtual_brightness = kv.take_f64("virtual_brightness", base.virtual_brightness)?;
        base.clip_norm = kv.take_f64("clip_norm", base.clip_norm)?;
        base.real_train = kv.take("real_train").map(PathBuf::from);
        base.real_test = kv.take("real_test").map(PathBuf::from);
        kv.finish()?;
        Ok(MatrixConfig {
            schemes,
            virtual_ns,
            seeds,
            out,
            work_dir,
            base,
        })
    }
}

#[derive(Debug)]
pub struct MatrixSummary {
    pub rows: usize,
    pub aggregates: usize,
    /// (cell label, error message) for every failed cell.
    pub failures: Vec<(String, String)>,
}

fn population_stddev(values: &[f64], mean: f64) -> f64 {
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / values.len() as f64;
    var.sqrt()
}

/// Run the whole grid sequentially and write one CSV: a row per
/// (scheme, virtual_n, seed) cell, then one aggregate row per
/// (scheme, virtual_n) carrying mean and stddev of mAP over seeds. Failed
/// cells keep their row with `error` in the map column and are left out of
/// the aggregates.
pub fn run_matrix(config: &MatrixConfig) -> Result<MatrixSummary> {
    if config.schemes.is_empty() || config.virtual_ns.is_empty() || config.seeds.is_empty() {
        return Err(Error::config(
            "matrix needs at least one scheme, virtual_n, and seed",
        ));
    }
    let classes = config.base.classes;
    let mut body = String::new();
    let mut aggregates = String::new();
    let mut rows = 0usize;
    let mut n_aggregates = 0usize;
    let mut failures = Vec::new();

    for &scheme in &config.schemes {
        for &virtual_n in &config.virtual_ns {
            let mut maps = Vec::new();
            for &seed in &config.seeds {
                let label = format!("{scheme}_{virtual_n}_{seed}");
                let mut cell = config.base.clone();
                cell.scheme = scheme;
                cell.virtual_n = virtual_n;
                cell.seed = seed;
                cell.transfer_segments = scheme.transfer_segments();
                cell.frozen_segments = scheme.frozen_segments();
                cell.mosaic = scheme.mosaic();
                cell.work_dir = config.work_dir.join(&label);
                match run_scheme(&cell) {
                    Ok(report) => {
                        maps.push(report.map);
                        let mut row = report.csv_row();
                        row.pop();
                        row.push_str(",\n");
                        body.push_str(&row);
                    }
                    Err(e) => {
                        body.push_str(&format!(
                            "{scheme},{virtual_n},{seed},,,,error{},\n",
                            ",".repeat(classes)
                        ));
                        failures.push((label, e.to_string()));
                    }
                }
                rows += 1;
            }
            if !maps.is_empty() {
                let mean = maps.iter().sum::<f64>() / maps.len() as f64;
                let sd = population_stddev(&maps, mean);
                aggregates.push_str(&format!(
                    "{scheme},{virtual_n},aggregate,,,,{mean:.6}{},{sd:.6}\n",
                    ",".repeat(classes)
                ));
            } else {
                aggregates.push_str(&format!(
                    "{scheme},{virtual_n},aggregate,,,,error{},\n",
                    ",".repeat(classes)
                ));
            }
            n_aggregates += 1;
        }
    }

    let mut out = RunReport::csv_header(classes);
    out.pop();
    out.push_str(",map_stddev\n");
    out.push_str(&body);
    out.push_str(&aggregates);
    std::fs::write(&config.out, out).map_err(|e| Error::io(&config.out, e))?;
    Ok(MatrixSummary {
        rows,
        aggregates: n_aggregates,
        failures,
    })
}
