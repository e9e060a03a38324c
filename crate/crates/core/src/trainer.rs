//! The training loop: in-memory datasets, per-image SGD steps over the
//! composite loss, optional mosaic composition, and the `train` config file.

use std::path::{Path, PathBuf};

use crate::config::KvFile;
use crate::error::{Error, Result};
use crate::formats::{self, Manifest};
use crate::geometry::BBox;
use crate::loss::{assign_targets, total_loss_grad, DEFAULT_LAMBDA_NOOBJ};
use crate::net::{DetectorNet, NetConfig, SegmentName};
use crate::rng::{derive_seed, Rng};
use crate::synth::Scene;
use crate::tensor::Tensor;
use crate::trainer;
use crate::weights;

pub const DEFAULT_LR: f64 = 0.01;
pub const DEFAULT_MOMENTUM: f64 = 0.9;
/// Global gradient-norm cap. Healthy steps sit around 5-30; the occasional
/// box-term spike lands in the hundreds and, amplified by momentum, takes
/// the weights to NaN within a handful of steps if left uncapped.
pub const DEFAULT_CLIP_NORM: f64 = 50.0;

/// A dataset held in memory: decoded images plus their annotations.
#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub images: Vec<Tensor>,
    pub annotations: Vec<Vec<(usize, BBox)>>,
}

impl LoadedDataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

pub fn load_dataset(manifest: &Manifest, classes: usize) -> Result<LoadedDataset> {
    let mut images = Vec::with_capacity(manifest.len());
    let mut annotations = Vec::with_capacity(manifest.len());
    for entry in &manifest.entries {
        images.push(formats::read_ppm(&manifest.image_path(entry))?);
        annotations.push(formats::read_annotations(
            &manifest.annotation_path(entry),
            classes,
        )?);
    }
    Ok(LoadedDataset {
        images,
        annotations,
    })
}

#[derive(Debug, Clone)]
pub struct TrainOpts {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub lambda_noobj: f64,
    pub seed: u64,
    /// Compose each training sample as a four-scene mosaic instead of using
    /// images directly.
    pub mosaic: bool,
    /// Gradient-norm cap applied before each step; 0 disables clipping.
    pub clip_norm: f64,
}

impl TrainOpts {
    pub fn new(epochs: usize, seed: u64) -> Self {
        TrainOpts {
            epochs,
            lr: DEFAULT_LR,
            momentum: DEFAULT_MOMENTUM,
            lambda_noobj: DEFAULT_LAMBDA_NOOBJ,
            seed,
            mosaic: false,
            clip_norm: DEFAULT_CLIP_NORM,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TrainStats {
    pub steps: usize,
    /// Mean composite loss over the final epoch.
    pub final_loss: f64,
}

/// Train in place: one SGD step per image, shuffled each epoch, everything
/// derived from `opts.seed`. Frozen segments are respected by the optimizer.
pub fn train(net: &mut DetectorNet, data: &LoadedDataset, opts: &TrainOpts) -> Result<TrainStats> {
    if data.is_empty() {
        return Err(Error::invalid("training dataset is empty"));
    }
    if opts.epochs == 0 {
        return Err(Error::config("epochs must be at least 1"));
    }
    let (s, b, k) = (
        net.config.grid_size(),
        net.config.boxes_per_cell,
        net.config.classes,
    );
    // Pre-assign targets once when images are used as-is.
    let fixed_targets = if opts.mosaic {
        None
    } else {
        let mut t = Vec::with_capacity(data.len());
        for anns in &data.annotations {
            t.push(assign_targets(anns, s, b, k)?);
        }
        Some(t)
    };

    let mut shuffle_rng = Rng::new(derive_seed(opts.seed, 0));
    let mosaic_seed_base = derive_seed(opts.seed, 1);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut steps = 0usize;
    let mut final_loss = 0.0f64;
    let size = net.config.input_size;

    for epoch in 0..opts.epochs {
        shuffle_rng.shuffle(&mut order);
        let mut epoch_loss = 0.0f64;
        for &idx in &order {
            let report = match &fixed_targets {
                Some(targets) => {
                    let pred = net.forward(&data.images[idx])?;
                    let (report, dpred) = total_loss_grad(&pred, &targets[idx], opts.lambda_noobj)?;
                    net.backward(&dpred)?;
                    report
                }
                None => {
                    let pick = |r: &mut Rng| r.below(data.len() as u64) as usize;
                    let others = [
                        pick(&mut shuffle_rng),
                        pick(&mut shuffle_rng),
                        pick(&mut shuffle_rng),
                    ];
                    let scene_of = |i: usize| Scene {
                        image: data.images[i].clone(),
                        annotations: data.annotations[i].clone(),
                        seed: 0,
                    };
                    let scenes = [
                        scene_of(idx),
                        scene_of(others[0]),
                        scene_of(others[1]),
                        scene_of(others[2]),
                    ];
                    let composed = crate::synth::mosaic(
                        &scenes,
                        derive_seed(mosaic_seed_base, steps as u64),
                        size,
                    );
                    let targets = assign_targets(&composed.annotations, s, b, k)?;
                    let pred = net.forward(&composed.image)?;
                    let (report, dpred) = total_loss_grad(&pred, &targets, opts.lambda_noobj)?;
                    net.backward(&dpred)?;
                    report
                }
            };
            if opts.clip_norm > 0.0 {
                net.clip_grads(opts.clip_norm as f32)?;
            }
            net.sgd_step(opts.lr as f32, opts.momentum as f32)?;
            epoch_loss += report.total;
            steps += 1;
        }
        if epoch == opts.epochs - 1 {
            final_loss = epoch_loss / data.len() as f64;
        }
    }
    Ok(TrainStats { steps, final_loss })
}

/// Mean composite loss over a dataset without touching any weights. Used to
/// compare starting points before fine-tuning.
pub fn dataset_loss(net: &mut DetectorNet, data: &LoadedDataset, lambda_noobj: f64) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::invalid("dataset is empty"));
    }
    let (s, b, k) = (
        net.config.grid_size(),
        net.config.boxes_per_cell,
        net.config.classes,
    );
    let mut sum = 0.0f64;
    for (image, anns) in data.images.iter().zip(&data.annotations) {
        let targets = assign_targets(anns, s, b, k)?;
        let pred = net.forward(image)?;
        sum += crate::loss::total_loss(&pred, &targets, lambda_noobj)?.total;
    }
    Ok(sum / data.len() as f64)
}

/// Everything the `train` subcommand needs, parsed from a `key = value`
/// file. Unknown keys are rejected.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub manifest: PathBuf,
    pub out_weights: PathBuf,
    pub init_weights: Option<PathBuf>,
    pub transfer_segments: Vec<SegmentName>,
    pub freeze: Vec<SegmentName>,
    pub net: NetConfig,
    pub opts: TrainOpts,
}

impl TrainConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let mut kv = KvFile::load(path)?;
        let manifest = PathBuf::from(kv.take_required("manifest")?);
        let out_weights = PathBuf::from(kv.take_required("out_weights")?);
        let init_weights = kv.take("init_weights").map(PathBuf::from);
        let parse_segments = |names: Vec<String>| -> Result<Vec<SegmentName>> {
            names.iter().map(|n| n.parse()).collect()
        };
        let transfer_segments = {
            let listed = parse_segments(kv.take_list("transfer_segments"))?;
            if listed.is_empty() && init_weights.is_some() {
                SegmentName::ALL.to_vec()
            } else {
                listed
            }
        };
        let freeze = parse_segments(kv.take_list("freeze"))?;
        let classes = kv.take_usize("classes", crate::synth::DEFAULT_CLASSES)?;
        let mut net = NetConfig::default_for(classes);
        net.input_size = kv.take_usize("input_size", net.input_size)?;
        let mut opts = TrainOpts::new(kv.take_usize("epochs", 30)?, kv.take_u64("seed", 0)?);
        opts.lr = kv.take_f64("lr", DEFAULT_LR)?;
        opts.momentum = kv.take_f64("momentum", DEFAULT_MOMENTUM)?;
        opts.lambda_noobj = kv.take_f64("lambda_noobj", DEFAULT_LAMBDA_NOOBJ)?;
        opts.mosaic = kv.take_bool("mosaic", false)?;
        opts.clip_norm = kv.take_f64("clip_norm", DEFAULT_CLIP_NORM)?;
        if opts.clip_norm < 0.0 {
            return Err(Error::config("clip_norm must be zero or positive"));
        }
        kv.finish()?;
        if !transfer_segments.is_empty() && init_weights.is_none() {
            return Err(Error::config(
                "transfer_segments given without init_weights",
            ));
        }
        Ok(TrainConfig {
            manifest,
            out_weights,
            init_weights,
            transfer_segments,
            freeze,
            net,
            opts,
        })
    }

    /// Build the network, run the configured training, save weights.
    pub fn run(&self) -> Result<TrainStats> {
        let manifest = Manifest::load(&self.manifest)?;
        let data = load_dataset(&manifest, self.net.classes)?;
        let mut net = DetectorNet::new(&self.net, derive_seed(self.opts.seed, 100))?;
        if let Some(init) = &self.init_weights {
            weights::transfer_weights(&mut net, init, &self.transfer_segments)?;
        }
        net.set_frozen(&self.freeze, true);
        let stats = trainer::train(&mut net, &data, &self.opts)?;
        weights::save_weights(&net, &self.out_weights)?;
        Ok(stats)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_dataset, DomainProfile};

    fn tiny_net(classes: usize, seed: u64) -> DetectorNet {
        let cfg = NetConfig {
            input_size: 32,
            backbone_channels: [4, 6, 8],
            neck_channels: 8,
            boxes_per_cell: 2,
            classes,
        };
        DetectorNet::new(&cfg, seed).unwrap()
    }

    fn tiny_data(n: usize, classes: usize) -> (tempfile::TempDir, LoadedDataset) {
        let dir = tempfile::tempdir().unwrap();
        let m =
            generate_dataset(3, n, &DomainProfile::neutral(), dir.path(), classes, 2, 32).unwrap();
        let data = load_dataset(&m, classes).unwrap();
        (dir, data)
    }

    #[test]
    fn training_reduces_loss() {
        let (_dir, data) = tiny_data(16, 2);
        let mut net = tiny_net(2, 1);
        let first = train(&mut net, &data, &TrainOpts::new(1, 9)).unwrap();
        let later = train(&mut net, &data, &TrainOpts::new(10, 9)).unwrap();
        assert!(
            later.final_loss < first.final_loss,
            "loss went {} -> {}",
            first.final_loss,
            later.final_loss
        );
    }

    #[test]
    fn training_is_deterministic() {
        let (_dir, data) = tiny_data(8, 2);
        let mut a = tiny_net(2, 5);
        let mut b = tiny_net(2, 5);
        let sa = train(&mut a, &data, &TrainOpts::new(3, 4)).unwrap();
        let sb = train(&mut b, &data, &TrainOpts::new(3, 4)).unwrap();
        assert_eq!(sa.final_loss.to_bits(), sb.final_loss.to_bits());
        for (x, y) in a.segments().iter().zip(b.segments().iter()) {
            for (px, py) in x.params().iter().zip(y.params().iter()) {
                assert_eq!(px.data, py.data);
            }
        }
    }

    #[test]
    fn fully_frozen_network_keeps_loss_constant() {
        let (_dir, data) = tiny_data(6, 2);
        let mut net = tiny_net(2, 2);
        net.set_frozen(&SegmentName::ALL, true);
        let mut losses = Vec::new();
        for _ in 0..3 {
            let s = train(&mut net, &data, &TrainOpts::new(1, 7)).unwrap();
            losses.push(s.final_loss);
        }
        assert_eq!(losses[0].to_bits(), losses[1].to_bits());
        assert_eq!(losses[1].to_bits(), losses[2].to_bits());
    }

    #[test]
    fn mosaic_training_runs_and_differs_from_plain() {
        let (_dir, data) = tiny_data(8, 2);
        let mut plain = tiny_net(2, 3);
        let mut mosaic = tiny_net(2, 3);
        let opts_plain = TrainOpts::new(2, 11);
        let mut opts_mosaic = TrainOpts::new(2, 11);
        opts_mosaic.mosaic = true;
        train(&mut plain, &data, &opts_plain).unwrap();
        train(&mut mosaic, &data, &opts_mosaic).unwrap();
        let wp = &plain.head.layers[0].weight.data;
        let wm = &mosaic.head.layers[0].weight.data;
        assert_ne!(wp, wm);
    }

    #[test]
    fn train_config_round_trip_and_unknown_key() {
        let dir = tempfile::tempdir().unwrap();
        let cfg_path = dir.path().join("train.cfg");
        std::fs::write(
            &cfg_path,
            "manifest = data/manifest.csv\nout_weights = out.sdw\nepochs = 5\nclasses = 3\nseed = 42\n",
        )
        .unwrap();
        let cfg = TrainConfig::from_file(&cfg_path).unwrap();
        assert_eq!(cfg.opts.epochs, 5);
        assert_eq!(cfg.net.classes, 3);
        assert_eq!(cfg.opts.seed, 42);
        assert!(cfg.freeze.is_empty());

        std::fs::write(
            &cfg_path,
            "manifest = m.csv\nout_weights = o.sdw\nlearning = fast\n",
        )
        .unwrap();
        let err = TrainConfig::from_file(&cfg_path).unwrap_err();
        assert!(err.to_string().contains("learning"), "{err}");
    }

    #[test]
    fn train_config_rejects_transfer_without_source() {
        let dir = tempfile::tempdir().unwrap();
        let cfg_path = dir.path().join("train.cfg");
        std::fs::write(
            &cfg_path,
            "manifest = m.csv\nout_weights = o.sdw\ntransfer_segments = backbone\n",
        )
        .unwrap();
        assert!(TrainConfig::from_file(&cfg_path).is_err());
    }
}
