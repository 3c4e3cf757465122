//! SGD training loop with per-epoch validation, checkpoints and metrics.
//!
//! Output directory layout: `run_config.json`, `metrics.csv` (one row per
//! epoch), `steps.csv` (one row per optimizer step), `last.tnsr` +
//! `last.json` (resumable state after the latest epoch) and `best.tnsr` +
//! `best.json` (state at the best validation DSC).

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::dataset::{load_slide, load_split};
use crate::data::patches::{BatchSampler, PatchStore};
use crate::data::tnsr::{encode_tnsr_indexed, read_tnsr, TnsrMap, TnsrTensor};
use crate::error::{ensure, Error, Result};
use crate::graph::Graph;
use crate::inference::evaluate_split;
use crate::losses::{total_loss, LossReport};
use crate::mtnet::{check_params, init_mtnet, mtnet_forward, ArchConfig};
use crate::params::ParamStore;
use crate::tensor::{Float, Tensor};

pub const METRICS_HEADER: &str = "epoch,lr,loss_total,loss_sup,loss_cdkd,loss_um,val_dsc,val_ji";
pub const STEPS_HEADER: &str = "epoch,step,loss_total,loss_sup,loss_cdkd,loss_um";

/// Heavy-ball SGD with L2 weight decay folded into the gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd<T: Float> {
    pub momentum: f64,
    pub weight_decay: f64,
    pub velocity: ParamStore<T>,
}

impl<T: Float> Sgd<T> {
    /// Zero velocity for every parameter.
    pub fn new(params: &ParamStore<T>, momentum: f64, weight_decay: f64) -> Self {
        let mut velocity = ParamStore::new();
        for (name, t) in params.iter() {
            velocity.insert(name, Tensor::zeros(t.shape().to_vec()));
        }
        Sgd {
            momentum,
            weight_decay,
            velocity,
        }
    }

    /// `g' = g + wd·w; v ← μv + g'; w ← w − lr·v`. Parameters without a
    /// gradient entry are left alone. Nothing is updated if any gradient
    /// is non-finite.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &ParamStore<T>, lr: f64) -> Result<()> {
        for (name, g) in grads.iter() {
            if !g.all_finite() {
                return Err(Error::Numeric(format!("non-finite gradient for parameter `{name}`")));
            }
            let w = params
                .get(name)
                .ok_or_else(|| Error::precondition(format!("gradient for unknown parameter `{name}`")))?;
            ensure!(w.shape() == g.shape(), "gradient shape mismatch for `{name}`");
        }
        let (mu, wd, lr) = (T::of(self.momentum), T::of(self.weight_decay), T::of(lr));
        for (name, g) in grads.iter() {
            let w = params.get_mut(name).expect("checked above");
            let v = self
                .velocity
                .get_mut(name)
                .ok_or_else(|| Error::precondition(format!("no velocity for parameter `{name}`")))?;
            for ((wi, vi), &gi) in w.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                let gp = gi + wd * *wi;
                *vi = mu * *vi + gp;
                *wi -= lr * *vi;
            }
        }
        Ok(())
    }
}

/// Everything needed to continue training exactly where it stopped.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: u64,
    pub rng: ChaCha8Rng,
    pub sampler: BatchSampler,
    pub best_val_dsc: Option<f64>,
    pub params: ParamStore<f32>,
    pub optimizer: Sgd<f32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct RngRecord {
    seed: String,
    stream: u64,
    word_pos: String,
}

impl RngRecord {
    fn of(rng: &ChaCha8Rng) -> Self {
        RngRecord {
            seed: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = || Error::format(0, "checkpoint manifest: malformed rng state");
        if self.seed.len() != 64 {
            return Err(bad());
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad())?);
        Ok(rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    offset: u64,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    epoch: usize,
    step: u64,
    best_val_dsc: Option<f64>,
    momentum: f64,
    weight_decay: f64,
    rng: RngRecord,
    sampler: BatchSampler,
    tensors: Vec<TensorEntry>,
}

const PARAM_PREFIX: &str = "param/";
const VELOCITY_PREFIX: &str = "velocity/";

/// `foo.tnsr` → `foo.json`.
pub fn manifest_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Writes the tensors to `path` and the manifest next to it.
pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let mut map = TnsrMap::new();
    for (name, t) in state.params.iter() {
        map.insert(format!("{PARAM_PREFIX}{name}"), TnsrTensor::F32(t.clone()));
    }
    for (name, t) in state.optimizer.velocity.iter() {
        map.insert(format!("{VELOCITY_PREFIX}{name}"), TnsrTensor::F32(t.clone()));
    }
    let (bytes, offsets) = encode_tnsr_indexed(&map)?;
    let manifest = Manifest {
        epoch: state.epoch,
        step: state.step,
        best_val_dsc: state.best_val_dsc,
        momentum: state.optimizer.momentum,
        weight_decay: state.optimizer.weight_decay,
        rng: RngRecord::of(&state.rng),
        sampler: state.sampler.clone(),
        tensors: map
            .iter()
            .zip(offsets)
            .map(|((name, t), offset)| TensorEntry {
                name: name.clone(),
                offset,
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    // Tensors first: a manifest never points at a missing payload.
    fs::write(path, bytes)?;
    fs::write(manifest_path(path), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let mpath = manifest_path(path);
    let text = fs::read_to_string(&mpath)?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::format(0, format!("{}: {e}", mpath.display())))?;
    let bytes = fs::read(path)?;
    let map = crate::data::tnsr::decode_tnsr(&bytes)?;
    let (_, offsets) = encode_tnsr_indexed(&map)?;

    if manifest.tensors.len() != map.len() {
        return Err(Error::format(
            0,
            format!(
                "manifest lists {} tensors, file holds {}",
                manifest.tensors.len(),
                map.len()
            ),
        ));
    }
    let mut params = ParamStore::new();
    let mut velocity = ParamStore::new();
    for ((entry, (name, t)), offset) in manifest.tensors.iter().zip(&map).zip(offsets) {
        if entry.name != *name || entry.offset != offset || entry.shape != t.shape() {
            return Err(Error::format(
                offset,
                format!("manifest entry `{}` does not match tensor `{name}` in the file", entry.name),
            ));
        }
        let TnsrTensor::F32(t) = t else {
            return Err(Error::format(offset, format!("tensor `{name}` is not f32")));
        };
        if let Some(p) = name.strip_prefix(PARAM_PREFIX) {
            params.insert(p, t.clone());
        } else if let Some(v) = name.strip_prefix(VELOCITY_PREFIX) {
            velocity.insert(v, t.clone());
        } else {
            return Err(Error::format(offset, format!("unexpected tensor `{name}` in checkpoint")));
        }
    }
    for (name, t) in params.iter() {
        match velocity.get(name) {
            None => return Err(Error::format(0, format!("checkpoint has no velocity for `{name}`"))),
            Some(v) if v.shape() != t.shape() => {
                return Err(Error::format(0, format!("velocity of `{name}` has the wrong shape")))
            }
            Some(_) => {}
        }
    }
    if velocity.len() != params.len() {
        return Err(Error::format(0, "checkpoint has velocities without parameters"));
    }
    Ok(TrainState {
        epoch: manifest.epoch,
        step: manifest.step,
        rng: manifest.rng.restore()?,
        sampler: manifest.sampler,
        best_val_dsc: manifest.best_val_dsc,
        params,
        optimizer: Sgd {
            momentum: manifest.momentum,
            weight_decay: manifest.weight_decay,
            velocity,
        },
    })
}

/// Parameters of a checkpoint, checked against `arch`.
pub fn load_params(path: &Path, arch: &ArchConfig) -> Result<ParamStore<f32>> {
    let state = load_checkpoint(path)?;
    check_params(arch, &state.params)
        .map_err(|e| Error::config(format!("checkpoint {} does not fit the architecture: {e}", path.display())))?;
    Ok(state.params)
}

/// Reads only the parameter tensors of a checkpoint file.
pub fn read_checkpoint_params(path: &Path) -> Result<ParamStore<f32>> {
    let map = read_tnsr(path)?;
    let mut params = ParamStore::new();
    for (name, t) in map {
        if let (Some(p), TnsrTensor::F32(t)) = (name.strip_prefix(PARAM_PREFIX), t) {
            params.insert(p, t);
        }
    }
    Ok(params)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_sup: f64,
    pub loss_cdkd: f64,
    pub loss_um: f64,
    pub val_dsc: f64,
    pub val_ji: f64,
}

impl EpochRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.epoch, self.lr, self.loss_total, self.loss_sup, self.loss_cdkd, self.loss_um, self.val_dsc, self.val_ji
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: u64,
    pub report: LossReport,
}

impl StepRecord {
    pub fn csv_line(&self) -> String {
        let r = &self.report;
        format!("{},{},{},{},{},{}", self.epoch, self.step, r.total, r.sup, r.cdkd, r.um)
    }
}

const RNG_SALT: u64 = 0x7a11_0c0d;

/// Loaded data plus the evolving training state.
pub struct Trainer {
    pub cfg: RunConfig,
    pub state: TrainState,
    store: PatchStore,
    val_ids: Vec<u32>,
}

impl Trainer {
    /// Loads the training and validation slides and initializes a fresh
    /// state from `cfg.seed`.
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let split = load_split(&cfg.dataset_dir)?;
        let labeled = split
            .train_labeled
            .iter()
            .map(|&id| load_slide(&cfg.dataset_dir, id))
            .collect::<Result<Vec<_>>>()?;
        let unlabeled = if cfg.loss.needs_unlabeled() {
            split
                .train_unlabeled
                .iter()
                .map(|&id| load_slide(&cfg.dataset_dir, id).map(|(img, _)| img))
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        let store = PatchStore::new(labeled, unlabeled, cfg.patch.size, cfg.patch.stride)?;
        let unlabeled_batch = if cfg.loss.needs_unlabeled() { cfg.batch.unlabeled } else { 0 };
        let sampler = BatchSampler::new(&store, cfg.batch.labeled, unlabeled_batch, cfg.patch.augment)?;
        let mut val_ids = split.val.clone();
        if let Some(k) = cfg.val_limit {
            val_ids.truncate(k);
        }
        let params = init_mtnet::<f32>(&cfg.arch, cfg.seed)?;
        let optimizer = Sgd::new(&params, cfg.optimizer.momentum, cfg.optimizer.weight_decay);
        let state = TrainState {
            epoch: 0,
            step: 0,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ RNG_SALT),
            sampler,
            best_val_dsc: None,
            params,
            optimizer,
        };
        Ok(Trainer {
            cfg,
            state,
            store,
            val_ids,
        })
    }

    /// Like [`Trainer::new`], continuing from a saved state.
    pub fn resume(cfg: RunConfig, checkpoint: &Path) -> Result<Self> {
        let mut t = Trainer::new(cfg)?;
        let state = load_checkpoint(checkpoint)?;
        check_params(&t.cfg.arch, &state.params)?;
        if state.sampler.labeled_batch != t.state.sampler.labeled_batch
            || state.sampler.unlabeled_batch != t.state.sampler.unlabeled_batch
        {
            return Err(Error::config("checkpoint batch sizes differ from the config"));
        }
        t.state = state;
        Ok(t)
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.state.sampler.steps_per_epoch(&self.store)
    }

    /// One optimizer step on a fresh batch; returns the loss terms.
    pub fn step(&mut self, lr: f64) -> Result<LossReport> {
        let cfg = &self.cfg;
        let st = &mut self.state;
        let with_unlabeled = cfg.loss.needs_unlabeled();
        let batch = st.sampler.sample(&self.store, with_unlabeled, &mut st.rng)?;
        let bl = batch.labeled_images.shape()[0];
        let images = match &batch.unlabeled_images {
            Some(u) => {
                let mut shape = u.shape().to_vec();
                shape[0] += bl;
                let mut data = batch.labeled_images.data().to_vec();
                data.extend_from_slice(u.data());
                Tensor::new(shape, data)?
            }
            None => batch.labeled_images.clone(),
        };

        let mut g = Graph::new();
        let bound = st.params.bind(&mut g, true);
        let x = g.constant(images);
        let branches: Vec<usize> = (0..cfg.arch.branches()).collect();
        let perturb = cfg.perturbation.training();
        let all = mtnet_forward(&mut g, &cfg.arch, &bound, x, &branches, &perturb, &mut st.rng)?;
        let labeled = all.slice_batch(&mut g, 0, bl)?;
        let unlabeled_view = if with_unlabeled { Some(&all) } else { None };
        let loss = total_loss(&mut g, &labeled, &batch.labeled_masks, unlabeled_view, &cfg.loss)?;
        if !loss.report.total.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss at epoch {} step {}: {:?}",
                st.epoch, st.step, loss.report
            )));
        }
        g.backward(loss.total)?;
        let grads = bound.grads(&g);
        st.optimizer.step(&mut st.params, &grads, lr)?;
        st.step += 1;
        Ok(loss.report)
    }

    /// Mean DSC and JI over the validation slides.
    pub fn validate(&self) -> Result<(f64, f64)> {
        let m = evaluate_split(
            &self.cfg.arch,
            &self.state.params,
            &self.cfg.dataset_dir,
            &self.val_ids,
            &self.cfg.inference,
            None,
        )?;
        Ok((m.mean_dsc, m.mean_ji))
    }

    /// Trains one epoch, validates, and updates the checkpoints.
    pub fn run_epoch(&mut self, mut on_step: impl FnMut(&StepRecord)) -> Result<EpochRow> {
        let epoch = self.state.epoch;
        let lr = self.cfg.optimizer.lr_at(epoch);
        let n = self.steps_per_epoch();
        let mut sums = [0.0f64; 4];
        for _ in 0..n {
            let report = self.step(lr)?;
            sums[0] += report.total;
            sums[1] += report.sup;
            sums[2] += report.cdkd;
            sums[3] += report.um;
            on_step(&StepRecord {
                epoch,
                step: self.state.step,
                report,
            });
        }
        let (val_dsc, val_ji) = self.validate()?;
        self.state.epoch += 1;
        let improved = self.state.best_val_dsc.is_none_or(|b| val_dsc > b);
        if improved {
            self.state.best_val_dsc = Some(val_dsc);
        }
        let out = &self.cfg.output_dir;
        save_checkpoint(&self.state, &out.join("last.tnsr"))?;
        if improved {
            save_checkpoint(&self.state, &out.join("best.tnsr"))?;
        }
        let k = n as f64;
        Ok(EpochRow {
            epoch,
            lr,
            loss_total: sums[0] / k,
            loss_sup: sums[1] / k,
            loss_cdkd: sums[2] / k,
            loss_um: sums[3] / k,
            val_dsc,
            val_ji,
        })
    }

    /// Trains until `cfg.optimizer.epochs` epochs are complete, appending
    /// to `metrics.csv` and `steps.csv`.
    pub fn run(&mut self, mut on_epoch: impl FnMut(&EpochRow)) -> Result<TrainOutcome> {
        self.run_until(self.cfg.optimizer.epochs, &mut on_epoch)
    }

    /// Like [`Trainer::run`], stopping once `epochs` epochs are complete.
    pub fn run_until(&mut self, epochs: usize, on_epoch: &mut dyn FnMut(&EpochRow)) -> Result<TrainOutcome> {
        let out = self.cfg.output_dir.clone();
        fs::create_dir_all(&out)?;
        fs::write(out.join("run_config.json"), self.cfg.to_json())?;
        let done = self.state.epoch;
        let mut metrics = reopen_csv(&out.join("metrics.csv"), METRICS_HEADER, |epoch| epoch < done)?;
        let mut steps_csv = reopen_csv(&out.join("steps.csv"), STEPS_HEADER, |epoch| epoch < done)?;
        let mut rows = Vec::new();
        let mut steps = Vec::new();
        while self.state.epoch < epochs.min(self.cfg.optimizer.epochs) {
            let mut io = Ok(());
            let row = self.run_epoch(|s| {
                if io.is_ok() {
                    io = writeln!(steps_csv, "{}", s.csv_line());
                }
                steps.push(s.clone());
            })?;
            io?;
            writeln!(metrics, "{}", row.csv_line())?;
            metrics.flush()?;
            steps_csv.flush()?;
            on_epoch(&row);
            rows.push(row);
        }
        Ok(TrainOutcome {
            rows,
            steps,
            best_val_dsc: self.state.best_val_dsc,
        })
    }
}

/// Opens a CSV for appending, keeping the header and the existing rows
/// whose leading epoch satisfies `keep`.
fn reopen_csv(path: &Path, header: &str, keep: impl Fn(usize) -> bool) -> Result<fs::File> {
    let mut text = format!("{header}\n");
    if let Ok(old) = fs::read_to_string(path) {
        for line in old.lines().skip(1) {
            let epoch = line.split(',').next().and_then(|e| e.parse::<usize>().ok());
            if epoch.is_some_and(&keep) {
                text += line;
                text.push('\n');
            }
        }
    }
    fs::write(path, &text)?;
    Ok(fs::OpenOptions::new().append(true).open(path)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub rows: Vec<EpochRow>,
    pub steps: Vec<StepRecord>,
    pub best_val_dsc: Option<f64>,
}

/// Fresh training run for `cfg`.
pub fn run_training(cfg: &RunConfig, on_epoch: impl FnMut(&EpochRow)) -> Result<(TrainState, TrainOutcome)> {
    let mut t = Trainer::new(cfg.clone())?;
    let outcome = t.run(on_epoch)?;
    Ok((t.state, outcome))
}
