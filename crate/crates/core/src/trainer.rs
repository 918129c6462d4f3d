//! Optimization loop: AdamW with decoupled weight decay, warmup+cosine
//! learning-rate schedule, photometric augmentation, metrics logging,
//! and bit-exact checkpoint resume.
//!
//! One training step is one whole-batch forward/backward over
//! [`total_loss`], a global gradient-norm clip, one optimizer update,
//! and the temperature clamp. Everything downstream of the seed is
//! deterministic: augmentation draws are keyed by (seed, record id,
//! epoch), the epoch shuffle by (seed, epoch), and the optimizer holds
//! no hidden RNG — so resuming from a checkpoint continues the exact
//! trajectory of an uninterrupted run.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::dataset::{ShardManifest, TrainingRecord, stream_records};
use crate::error::{Error, Result};
use crate::mapper::{AblationMode, apply_ablation};
use crate::model::{
    Checkpoint, ModelConfig, ParamSet, TAU_MIN, bind, load_checkpoint, save_checkpoint,
};
use crate::objectives::{BatchLosses, LossOptions, LossSwitches, total_loss};
use crate::render::RgbdImage;
use crate::sampler::TripletSpec;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Training hyperparameters and run switches.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Fraction of total steps spent in linear warmup before the cosine
    /// decay begins.
    pub warmup_frac: f64,
    pub grad_clip: f64,
    pub seed: u64,
    pub losses: LossSwitches,
    /// Subsample of records kept per epoch (monotone nested in the
    /// fraction).
    pub sample_fraction: f64,
    /// Prefix fraction of worlds kept.
    pub world_fraction: f64,
    /// Brightness/contrast jitter amplitude on view images.
    pub view_jitter: f64,
    /// Brightness jitter amplitude on map rasters.
    pub map_jitter: f64,
    /// Map-input ablation applied while assembling batches (maps are
    /// stored un-ablated; `NoTarget` also masks the target view in the
    /// pair embedding).
    pub ablation: Option<AblationMode>,
    /// Wrap angular residuals into (-pi, pi] before squaring.
    pub circular_angle: bool,
    /// Write a checkpoint every this many steps (0 = final only).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            epochs: 20,
            learning_rate: 3e-4,
            weight_decay: 0.01,
            warmup_frac: 0.05,
            grad_clip: 1.0,
            seed: 7,
            losses: LossSwitches::default(),
            sample_fraction: 1.0,
            world_fraction: 1.0,
            view_jitter: 0.10,
            map_jitter: 0.05,
            ablation: None,
            circular_angle: false,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::InvalidConfig(m));
        if !self.losses.any() {
            return err("every loss term is disabled".into());
        }
        if self.losses.contrastive && self.batch_size < 2 {
            return err("contrastive loss needs a batch of at least 2 (negatives)".into());
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return err("batch size and epochs must be positive".into());
        }
        if !(self.learning_rate >= 0.0) || !(self.weight_decay >= 0.0) {
            return err("rates must be nonnegative".into());
        }
        if !(self.grad_clip > 0.0) {
            return err("gradient clip must be positive".into());
        }
        if !(0.0..=0.5).contains(&self.warmup_frac) {
            return err(format!("warmup fraction {} outside [0, 0.5]", self.warmup_frac));
        }
        for (name, amp) in [("view_jitter", self.view_jitter), ("map_jitter", self.map_jitter)] {
            if !(0.0..=0.5).contains(&amp) {
                return err(format!("{name} {amp} outside [0, 0.5]"));
            }
        }
        Ok(())
    }

    fn loss_options(&self) -> LossOptions {
        LossOptions {
            switches: self.losses,
            no_target: self.ablation == Some(AblationMode::NoTarget),
            circular_angle: self.circular_angle,
        }
    }
}

// --- deterministic augmentation --------------------------------------------------

/// Stateless counter-based generator (splitmix64) so augmentation draws
/// depend only on the key, never on consumption order elsewhere.
struct KeyedDraws {
    state: u64,
}

impl KeyedDraws {
    fn new(seed: u64, record_id: u32, epoch: u32) -> Self {
        let mut s = seed ^ 0x9e37_79b9_7f4a_7c15u64.wrapping_mul(record_id as u64 + 1);
        s ^= 0xbf58_476d_1ce4_e5b9u64.wrapping_mul(epoch as u64 + 1);
        KeyedDraws { state: s }
    }

    fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }

    /// Uniform in [-1, 1).
    fn signed_unit(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 52) as f64 - 1.0
    }
}

fn jitter_image(img: &mut RgbdImage, amp: f64, draws: &mut KeyedDraws) {
    // Per-channel brightness shift and contrast scale about mid-gray.
    let mut params = [[0.0f32; 2]; 3];
    for p in &mut params {
        p[0] = (draws.signed_unit() * amp) as f32;
        p[1] = (1.0 + draws.signed_unit() * amp) as f32;
    }
    for px in img.rgb.chunks_mut(3) {
        for (ch, v) in px.iter_mut().enumerate() {
            let [b, c] = params[ch];
            *v = ((*v - 0.5) * c + 0.5 + b).clamp(0.0, 1.0);
        }
    }
}

/// Photometric augmentation: per-channel brightness/contrast jitter on
/// the four view images, a single brightness shift on the map raster,
/// depth and the map's class-code grid untouched. Deterministic per
/// (seed, record id, epoch); zero amplitudes return the record
/// bit-identically.
pub fn augment(
    record: &TrainingRecord,
    seed: u64,
    epoch: u32,
    view_jitter: f64,
    map_jitter: f64,
) -> TrainingRecord {
    let mut out = record.clone();
    let mut draws = KeyedDraws::new(seed, record.record_id, epoch);
    if view_jitter > 0.0 {
        for img in [&mut out.pair[0], &mut out.pair[1], &mut out.source, &mut out.target] {
            jitter_image(img, view_jitter, &mut draws);
        }
    }
    if map_jitter > 0.0 {
        let b = (draws.signed_unit() * map_jitter) as f32;
        for v in &mut out.map.rgb {
            *v = (*v + b).clamp(0.0, 1.0);
        }
    }
    out
}

/// Recolor the record's map per the configured ablation (its trajectory
/// overlay and class codes stay intact; embedded in the record only for
/// this batch).
fn ablate_record(record: &mut TrainingRecord, mode: AblationMode) {
    // The triplet geometry is immaterial here; only the map recolor and
    // the no-target flag matter, and the flag is handled batch-wide.
    let dummy = TripletSpec {
        source: record.source_id,
        target: record.target_id,
        theta_star: record.theta_star,
        no_target: false,
    };
    let (_, map) = apply_ablation(&dummy, &record.map, mode);
    record.map = map;
}

// --- optimizer --------------------------------------------------------------------

/// AdamW first/second-moment state, index-parallel to the parameter
/// registry.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
}

impl AdamState {
    pub fn new(params: &ParamSet<f32>) -> Self {
        AdamState { step: 0, m: params.grads_like(), v: params.grads_like() }
    }
}

/// Whether a parameter participates in weight decay: true for the
/// weight matrices (registry names whose last segment starts with `w`),
/// false for biases, layer-norm parameters, class/positional tokens,
/// and the temperature.
pub fn decays(name: &str) -> bool {
    name.rsplit('.').next().is_some_and(|last| last.starts_with('w'))
}

/// Learning rate at `step` of `total_steps`: linear warmup over the
/// first `warmup_frac` of steps, then cosine decay to zero.
pub fn lr_at(step: u64, total_steps: u64, base: f64, warmup_frac: f64) -> f64 {
    let total = total_steps.max(1);
    let warmup = ((total as f64 * warmup_frac).round() as u64).clamp(1, total);
    if step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    let denom = (total - warmup).max(1) as f64;
    let progress = ((step - warmup) as f64 / denom).clamp(0.0, 1.0);
    0.5 * base * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// One optimization step: forward/backward over the batch, global-norm
/// gradient clip, AdamW update with decoupled decay on the weight
/// matrices, and the temperature clamp. `lr` is the already-scheduled
/// rate for this step.
pub fn train_step(
    params: &mut ParamSet<f32>,
    opt: &mut AdamState,
    batch: &[TrainingRecord],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    lr: f64,
) -> Result<BatchLosses> {
    let mut tape = Tape::new();
    let bound = bind(&mut tape, params);
    let out = total_loss(&mut tape, params, &bound, model_cfg, batch, &cfg.loss_options())?;
    if !out.losses.l_total.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "non-finite loss {} at step {}",
            out.losses.l_total, opt.step
        )));
    }
    let mut grads = params.grads_like();
    tape.backward(out.root, &mut grads);

    let norm = grads.iter().map(|g| g.sq_norm_f64()).sum::<f64>().sqrt();
    if !norm.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "non-finite gradient norm at step {}",
            opt.step
        )));
    }
    if norm > cfg.grad_clip {
        let k = (cfg.grad_clip / norm) as f32;
        for g in &mut grads {
            g.scale(k);
        }
    }

    opt.step += 1;
    let t = opt.step as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2 = 1.0 - ADAM_BETA2.powi(t);
    for i in 0..params.len() {
        let decay = decays(params.name(i));
        let g = grads[i].data();
        let m = opt.m[i].data_mut();
        let v = opt.v[i].data_mut();
        let p = params.tensor_mut(i).data_mut();
        for k in 0..p.len() {
            let gk = g[k] as f64;
            let mk = ADAM_BETA1 * m[k] as f64 + (1.0 - ADAM_BETA1) * gk;
            let vk = ADAM_BETA2 * v[k] as f64 + (1.0 - ADAM_BETA2) * gk * gk;
            m[k] = mk as f32;
            v[k] = vk as f32;
            let update = (mk / bc1) / ((vk / bc2).sqrt() + ADAM_EPS);
            let mut pk = p[k] as f64 - lr * update;
            if decay {
                pk -= lr * cfg.weight_decay * p[k] as f64;
            }
            p[k] = pk as f32;
        }
    }
    let lt = params.by_name_mut("log_tau");
    let floor = TAU_MIN.ln() as f32;
    if lt.item() < floor {
        lt.set(0, 0, floor);
    }
    Ok(out.losses)
}

// --- fit loop ----------------------------------------------------------------------

/// FNV-1a over the canonical debug rendering of both configs; stored in
/// checkpoints so a resume against different settings is rejected.
pub fn config_hash(model_cfg: &ModelConfig, cfg: &TrainConfig) -> u64 {
    let text = format!("{model_cfg:?}|{cfg:?}");
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for b in text.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn checkpoint_of(
    params: &ParamSet<f32>,
    opt: &AdamState,
    epoch: u32,
    hash: u64,
) -> Checkpoint {
    let mut tensors: Vec<(String, Tensor<f32>)> =
        params.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
    for i in 0..params.len() {
        tensors.push((format!("m:{}", params.name(i)), opt.m[i].clone()));
        tensors.push((format!("v:{}", params.name(i)), opt.v[i].clone()));
    }
    Checkpoint { config_hash: hash, step: opt.step, epoch, tensors }
}

/// Restore parameters and optimizer state from a checkpoint container.
pub fn restore(
    ck: &Checkpoint,
    model_cfg: &ModelConfig,
) -> Result<(ParamSet<f32>, AdamState)> {
    let params = crate::model::params_from_checkpoint(ck, model_cfg)?;
    let mut opt = AdamState::new(&params);
    opt.step = ck.step;
    for i in 0..params.len() {
        for (prefix, slot) in [("m:", &mut opt.m), ("v:", &mut opt.v)] {
            let name = format!("{prefix}{}", params.name(i));
            let t = ck.get(&name).ok_or_else(|| {
                Error::InvalidArgument(format!("checkpoint missing optimizer tensor '{name}'"))
            })?;
            if t.shape() != slot[i].shape() {
                return Err(Error::InvalidArgument(format!(
                    "optimizer tensor '{name}' has shape {:?}, expected {:?}",
                    t.shape(),
                    slot[i].shape()
                )));
            }
            slot[i] = t.clone();
        }
    }
    Ok((params, opt))
}

/// Outcome of a [`fit`] run.
#[derive(Debug)]
pub struct FitResult {
    pub steps: u64,
    pub epochs_run: u32,
    pub final_losses: Option<BatchLosses>,
    pub checkpoint_path: PathBuf,
    pub metrics_path: PathBuf,
}

fn metrics_line(step: u64, l: &BatchLosses, tau: f64) -> String {
    let mut s = String::new();
    let _ = write!(
        s,
        "step {} l_c {:.9e} l_theta {:.9e} l_d {:.9e} l_total {:.9e} tau {:.9e}",
        step, l.l_c, l.l_theta, l.l_d, l.l_total, tau
    );
    s
}

/// Train over the manifest for `cfg.epochs` epochs, appending one
/// metrics line per step to `metrics.txt` in `out_dir` and writing the
/// final (and periodic) state to `checkpoint.e2mc`. `resume` continues
/// from a previous checkpoint of the same configuration: the remaining
/// epochs replay exactly as an uninterrupted run would have.
pub fn fit(
    manifest: &ShardManifest,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<FitResult> {
    cfg.validate()?;
    model_cfg.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let hash = config_hash(model_cfg, cfg);

    let (mut params, mut opt, start_epoch) = match resume {
        Some(path) => {
            let ck = load_checkpoint(path)?;
            if ck.config_hash != hash {
                return Err(Error::InvalidConfig(
                    "checkpoint was written by a different configuration".into(),
                ));
            }
            let (p, o) = restore(&ck, model_cfg)?;
            (p, o, ck.epoch)
        }
        None => {
            let p = ParamSet::<f32>::init(model_cfg, cfg.seed)?;
            let o = AdamState::new(&p);
            (p, o, 0)
        }
    };

    // The per-epoch step count is fraction-dependent but epoch-invariant
    // (the filters do not depend on the shuffle), so the schedule length
    // is known up front.
    let epoch_records =
        stream_records(manifest, cfg.sample_fraction, cfg.world_fraction, 0)?.len() as u64;
    let steps_per_epoch = epoch_records.div_ceil(cfg.batch_size as u64);
    let total_steps = steps_per_epoch * cfg.epochs as u64;

    let metrics_path = out_dir.join("metrics.txt");
    let mut metrics = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&metrics_path)
        .map_err(|e| Error::io(&metrics_path, e))?;
    let checkpoint_path = out_dir.join("checkpoint.e2mc");

    let mut final_losses = None;
    for epoch in start_epoch..cfg.epochs as u32 {
        let shuffle_seed = {
            let mut d = KeyedDraws::new(cfg.seed, 0, epoch);
            d.next_u64()
        };
        let stream =
            stream_records(manifest, cfg.sample_fraction, cfg.world_fraction, shuffle_seed)?;
        let mut batch: Vec<TrainingRecord> = Vec::with_capacity(cfg.batch_size);
        let mut flush = |batch: &mut Vec<TrainingRecord>,
                         params: &mut ParamSet<f32>,
                         opt: &mut AdamState,
                         metrics: &mut std::fs::File|
         -> Result<BatchLosses> {
            let lr = lr_at(opt.step, total_steps, cfg.learning_rate, cfg.warmup_frac);
            let losses = train_step(params, opt, batch, model_cfg, cfg, lr)?;
            batch.clear();
            let line = metrics_line(opt.step, &losses, params.tau());
            writeln!(metrics, "{line}").map_err(|e| Error::io(&metrics_path, e))?;
            Ok(losses)
        };
        for rec in stream {
            let rec = rec?;
            let mut rec = augment(&rec, cfg.seed, epoch, cfg.view_jitter, cfg.map_jitter);
            if let Some(mode) = cfg.ablation {
                ablate_record(&mut rec, mode);
            }
            batch.push(rec);
            if batch.len() == cfg.batch_size {
                final_losses = Some(flush(&mut batch, &mut params, &mut opt, &mut metrics)?);
                if cfg.checkpoint_every > 0 && opt.step % cfg.checkpoint_every as u64 == 0 {
                    save_checkpoint(&checkpoint_path, &checkpoint_of(&params, &opt, epoch, hash))?;
                }
            }
        }
        if !batch.is_empty() {
            final_losses = Some(flush(&mut batch, &mut params, &mut opt, &mut metrics)?);
        }
        // Epoch boundary checkpoint: resume restarts from here.
        save_checkpoint(&checkpoint_path, &checkpoint_of(&params, &opt, epoch + 1, hash))?;
    }

    Ok(FitResult {
        steps: opt.step,
        epochs_run: cfg.epochs as u32 - start_epoch,
        final_losses,
        checkpoint_path,
        metrics_path,
    })
}

// --- gradient verification -----------------------------------------------------------

/// Compare analytic gradients of the total loss against central finite
/// differences on at least `min_coords` randomly sampled coordinates,
/// visiting every parameter tensor (temperature included). Returns the
/// maximum relative disagreement.
///
/// Coordinates whose absolute disagreement sits below `abs_floor` count
/// as matching: a central difference carries no signal once the
/// difference of two nearly equal losses drowns in rounding, which is
/// routine for near-zero gradients (especially at 32-bit).
pub fn grad_check<S: Scalar>(
    params: &mut ParamSet<S>,
    batch: &[TrainingRecord],
    model_cfg: &ModelConfig,
    opts: &LossOptions,
    min_coords: usize,
    eps: f64,
    abs_floor: f64,
    seed: u64,
) -> Result<f64> {
    let mut analytic = params.grads_like();
    {
        let mut tape = Tape::new();
        let bound = bind(&mut tape, params);
        let out = total_loss(&mut tape, params, &bound, model_cfg, batch, opts)?;
        tape.backward(out.root, &mut analytic);
    }
    let eval = |p: &ParamSet<S>| -> Result<f64> {
        let mut tape = Tape::new();
        let bound = bind(&mut tape, p);
        Ok(total_loss(&mut tape, p, &bound, model_cfg, batch, opts)?.losses.l_total)
    };

    let mut coords: Vec<(usize, usize)> = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..params.len() {
        let len = params.tensor(i).len();
        for _ in 0..2.min(len) {
            coords.push((i, rng.gen_range(0..len)));
        }
    }
    while coords.len() < min_coords {
        let i = rng.gen_range(0..params.len());
        let len = params.tensor(i).len();
        coords.push((i, rng.gen_range(0..len)));
    }

    let mut max_rel = 0.0f64;
    for (i, k) in coords {
        let orig = params.tensor(i).data()[k];
        params.tensor_mut(i).data_mut()[k] = orig + S::of_f64(eps);
        let up = eval(params)?;
        params.tensor_mut(i).data_mut()[k] = orig - S::of_f64(eps);
        let down = eval(params)?;
        params.tensor_mut(i).data_mut()[k] = orig;
        let fd = (up - down) / (2.0 * eps);
        let an = analytic[i].data()[k].as_f64();
        let diff = (fd - an).abs();
        if diff < abs_floor {
            continue;
        }
        let rel = diff / an.abs().max(fd.abs()).max(1e-30);
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(max_rel)
}
