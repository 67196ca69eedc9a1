use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::evaluate::{evaluate, EvalOptions, ModelPredictor};
use super::optim::{learning_rate, Adam};
use super::{format_err, io_err, HarnessError, TrainConfig};
use crate::autograd::Tape;
use crate::loss::{scene_loss, LossBreakdown, SceneTargets};
use crate::model::{ForwardOptions, ModelInput, PlaneFormer};
use crate::scene::{scene_seed, PlanarScene};
use crate::tensor::Tensor;

pub const CHECKPOINT_FILE: &str = "checkpoint.safetensors";
pub const RUN_LOG_FILE: &str = "run_log.jsonl";

const POINT_SAMPLE_SALT: u64 = 0x9e37_79b9;
const SHUFFLE_SALT: u64 = 0x7f4a_7c15;
const AUGMENT_SALT: u64 = 0x1656_67b1;

/// Headline metrics recorded after an epoch when a validation split is given.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSnapshot {
    pub plane_recall_060: f64,
    pub vi: f64,
    pub ri: f64,
    pub sc: f64,
}

/// One line of the run log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RunRecord {
    Start {
        config_fingerprint: String,
        model_fingerprint: String,
        config: TrainConfig,
        scenes: usize,
        resumed_after_epoch: Option<usize>,
    },
    Step {
        epoch: usize,
        step: usize,
        lr: f64,
        loss: LossBreakdown,
    },
    Epoch {
        epoch: usize,
        lr: f64,
        mean_loss: LossBreakdown,
        wall_clock_s: f64,
        metrics: Option<MetricSnapshot>,
    },
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    pub out: PathBuf,
    /// Continue from `out/checkpoint.safetensors` if it exists.
    pub resume: bool,
    /// Scenes evaluated after each epoch for the metric snapshot.
    pub validation: Option<Vec<PlanarScene>>,
    /// Stop after this epoch even if the config asks for more.
    pub stop_after_epoch: Option<usize>,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: PlaneFormer,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub last_epoch: usize,
    /// Mean total loss of every epoch run in this call.
    pub epoch_losses: Vec<f64>,
}

struct RunLog {
    file: File,
    path: PathBuf,
}

impl RunLog {
    fn open(path: &Path, append: bool) -> Result<Self, HarnessError> {
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(path)
            .map_err(io_err(path))?;
        Ok(Self {
            file,
            path: path.to_path_buf(),
        })
    }

    fn push(&mut self, record: &RunRecord) -> Result<(), HarnessError> {
        let line = serde_json::to_string(record).expect("record serializes");
        writeln!(self.file, "{line}").map_err(io_err(&self.path))
    }
}

pub fn read_run_log(path: &Path) -> Result<Vec<RunRecord>, HarnessError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| format_err(path, format!("line {}: {e}", i + 1)))?);
    }
    Ok(out)
}

fn save_checkpoint(
    path: &Path,
    model: &PlaneFormer,
    adam: &Adam,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<(), HarnessError> {
    let (tensors, mut meta) = adam.state();
    meta.insert("epoch".into(), epoch.to_string());
    meta.insert("train_config".into(), serde_json::to_string(cfg).expect("config serializes"));
    model.save(path, tensors, meta)?;
    Ok(())
}

fn load_checkpoint(path: &Path, cfg: &TrainConfig) -> Result<(PlaneFormer, Adam, usize), HarnessError> {
    let (model, (rest, meta)) = PlaneFormer::load(path, Some(&cfg.model_config()))?;
    let epoch = meta
        .get("epoch")
        .and_then(|e| e.parse().ok())
        .ok_or_else(|| format_err(path, "no epoch metadata"))?;
    let adam = Adam::from_state(cfg.weight_decay, &rest, &meta).ok_or_else(|| format_err(path, "no optimizer state"))?;
    Ok((model, adam, epoch))
}

/// Trains on `scenes`, writing the rolling checkpoint and the run log into
/// `opts.out`. Training is deterministic for a fixed config and dataset,
/// including across a resume.
pub fn train(cfg: &TrainConfig, scenes: &[PlanarScene], opts: &TrainOptions) -> Result<TrainOutcome, HarnessError> {
    cfg.validate()?;
    let mc = cfg.model_config();
    if scenes.is_empty() {
        return Err(HarnessError::Config("training split is empty".into()));
    }
    if let Some(s) = scenes.iter().find(|s| s.num_planes() > mc.queries) {
        return Err(HarnessError::Config(format!(
            "scene {} has {} planes, more than the {} queries",
            s.seed,
            s.num_planes(),
            mc.queries
        )));
    }
    std::fs::create_dir_all(&opts.out).map_err(io_err(&opts.out))?;
    let ckpt = opts.out.join(CHECKPOINT_FILE);
    let log_path = opts.out.join(RUN_LOG_FILE);

    let resuming = opts.resume && ckpt.exists();
    let (mut model, mut adam, start) = if resuming {
        load_checkpoint(&ckpt, cfg)?
    } else {
        (PlaneFormer::new(mc.clone(), cfg.seed)?, Adam::new(cfg.weight_decay), 0)
    };
    let mut log = RunLog::open(&log_path, resuming)?;
    log.push(&RunRecord::Start {
        config_fingerprint: cfg.fingerprint(),
        model_fingerprint: model.fingerprint(),
        config: cfg.clone(),
        scenes: scenes.len(),
        resumed_after_epoch: resuming.then_some(start),
    })?;

    let images: Vec<Vec<f64>> = if cfg.augment {
        Vec::new()
    } else {
        scenes.iter().map(PlanarScene::image_chw).collect()
    };
    let fwd = ForwardOptions {
        use_lines: cfg.use_lines,
        aux: cfg.loss.aux_weight > 0.0,
        ..ForwardOptions::train()
    };
    let timer = Instant::now();
    let last = opts.stop_after_epoch.map_or(cfg.epochs, |e| e.min(cfg.epochs));
    let mut last_good = resuming.then(|| ckpt.clone());
    let mut epoch_losses = Vec::new();
    let n = scenes.len() as u64;
    for epoch in start + 1..=last {
        let lr = learning_rate(cfg.lr, cfg.lr_halving_period, epoch);
        let mut order: Vec<usize> = (0..scenes.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(scene_seed(cfg.seed ^ SHUFFLE_SALT, epoch as u64)));
        let mut epoch_sum = LossBreakdown::default();
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let step = step + 1;
            let weight = 1.0 / batch.len() as f64;
            let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
            let mut step_loss = LossBreakdown::default();
            for &i in batch {
                let sample_seed = scene_seed(cfg.seed ^ POINT_SAMPLE_SALT, (epoch as u64 - 1) * n + i as u64);
                let aug;
                let (scene, image) = if cfg.augment {
                    aug = augmented(&scenes[i], scene_seed(cfg.seed ^ AUGMENT_SALT, (epoch as u64 - 1) * n + i as u64));
                    (&aug.0, &aug.1)
                } else {
                    (&scenes[i], &images[i])
                };
                let targets = SceneTargets::new(scene, mc.queries, cfg.loss.plane_point_cap, sample_seed)
                    .map_err(|source| loss_err(epoch, step, source, &last_good))?;
                let tape = Tape::new();
                let out = model.forward(&tape, &ModelInput::from_scene(scene, image), fwd)?;
                let l = scene_loss(&out, &targets, &cfg.loss).map_err(|source| loss_err(epoch, step, source, &last_good))?;
                step_loss.accumulate(&l.breakdown, weight);
                let g = tape.backward(l.total);
                for (name, t) in g.named() {
                    match grads.get_mut(name) {
                        Some(acc) => {
                            for (a, b) in acc.data_mut().iter_mut().zip(t.data()) {
                                *a += weight * b;
                            }
                        }
                        None => {
                            let scaled = t.data().iter().map(|v| v * weight).collect();
                            grads.insert(name.to_string(), Tensor::new(t.shape().to_vec(), scaled));
                        }
                    }
                }
            }
            if let Some((name, _)) = grads.iter().find(|(_, g)| !g.all_finite()) {
                return Err(HarnessError::NonFiniteGradient {
                    param: name.clone(),
                    epoch,
                    step,
                    last_checkpoint: last_good,
                });
            }
            if cfg.max_grad_norm > 0.0 {
                let norm = grads.values().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt();
                if norm > cfg.max_grad_norm {
                    let scale = cfg.max_grad_norm / norm;
                    grads.values_mut().flat_map(|g| g.data_mut().iter_mut()).for_each(|v| *v *= scale);
                }
            }
            adam.update(&mut model.params, &grads, lr);
            epoch_sum.accumulate(&step_loss, batch.len() as f64 / scenes.len() as f64);
            log.push(&RunRecord::Step {
                epoch,
                step,
                lr,
                loss: step_loss,
            })?;
        }
        save_checkpoint(&ckpt, &model, &adam, cfg, epoch)?;
        if cfg.keep_epoch_checkpoints {
            save_checkpoint(&opts.out.join(format!("epoch_{epoch:03}.safetensors")), &model, &adam, cfg, epoch)?;
        }
        last_good = Some(ckpt.clone());
        let metrics = match &opts.validation {
            Some(val) if !val.is_empty() => {
                let report = evaluate(&ModelPredictor::new(&model, cfg.use_lines), val, &EvalOptions::default())?;
                let s = &report.summary;
                Some(MetricSnapshot {
                    plane_recall_060: s.plane_recall_at_depth(super::HEADLINE_DEPTH),
                    vi: s.vi,
                    ri: s.ri,
                    sc: s.sc,
                })
            }
            _ => None,
        };
        info!(
            "epoch {epoch}: lr {lr:.3e} loss {:.4} ({:.1}s){}",
            epoch_sum.total,
            timer.elapsed().as_secs_f64(),
            metrics.map_or(String::new(), |m| format!(" recall@0.6 {:.3} RI {:.3}", m.plane_recall_060, m.ri))
        );
        log.push(&RunRecord::Epoch {
            epoch,
            lr,
            mean_loss: epoch_sum,
            wall_clock_s: timer.elapsed().as_secs_f64(),
            metrics,
        })?;
        epoch_losses.push(epoch_sum.total);
    }
    Ok(TrainOutcome {
        model,
        checkpoint: ckpt,
        log: log_path,
        last_epoch: last.max(start),
        epoch_losses,
    })
}

/// Mirrors the scene with probability 0.5 and scales its colors by a random
/// brightness and per-channel gain. Returns the scene and its CHW image.
fn augmented(scene: &PlanarScene, seed: u64) -> (PlanarScene, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = if rng.random_bool(0.5) { scene.mirrored() } else { scene.clone() };
    let brightness = rng.random_range(0.8..1.2);
    let gains: [f64; 3] = std::array::from_fn(|_| brightness * rng.random_range(0.9..1.1));
    for px in s.image.chunks_exact_mut(3) {
        for (v, g) in px.iter_mut().zip(gains) {
            *v = (*v * g).clamp(0.0, 1.0);
        }
    }
    let image = s.image_chw();
    (s, image)
}

fn loss_err(epoch: usize, step: usize, source: crate::loss::LossError, last: &Option<PathBuf>) -> HarnessError {
    HarnessError::Loss {
        epoch,
        step,
        source,
        last_checkpoint: last.clone(),
    }
}
