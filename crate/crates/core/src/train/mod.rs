//! Training loops (stage-0 VAE, single-image diffusion, control branch) and
//! the sampling/task drivers built on them.

pub mod loader;
pub mod models;
pub mod sample;

pub use loader::Dataset;
pub use models::{build_models, Models};
pub use sample::{
    autoregressive_generate, inpaint_prepare, sample_conditional, sample_single, CorruptionKind,
    SampleOptions,
};

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use terradiff_autograd::{randn, AdamW, Tape};

use crate::checkpoint::{self, RngSnapshot, SaveRequest};
use crate::config::{RunConfig, TaskKind};
use crate::control::ControlSequence;
use crate::data::io::{from_model_range, save_rgb_png};
use crate::data::sequence::{pad_sequence, resize_bilinear};
use crate::diffusion::{add_noise, compute_target};
use crate::metadata::{dropout_mask, MetadataRecord};
use crate::nets::text::TextEmbedding;
use crate::nets::{Fwd, ImageTensor};
use crate::{Error, Result};

const LOSS_HISTORY_CAP: usize = 4096;

fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed.wrapping_add(0x9E3779B97F4A7C15_u64.wrapping_mul(index.wrapping_add(1)));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Mutable per-run state: everything needed for bit-exact resumption.
pub struct TrainState {
    pub iteration: u64,
    pub optimizer: AdamW<f32>,
    pub rng_data: ChaCha8Rng,
    pub rng_noise: ChaCha8Rng,
    pub rng_dropout: ChaCha8Rng,
    pub loss_history: Vec<f32>,
}

impl TrainState {
    pub fn new(cfg: &RunConfig) -> Self {
        TrainState {
            iteration: 0,
            optimizer: AdamW::new(
                cfg.lr,
                cfg.adam_beta1,
                cfg.adam_beta2,
                cfg.adam_eps,
                cfg.weight_decay,
            ),
            rng_data: ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 101)),
            rng_noise: ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 102)),
            rng_dropout: ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 103)),
            loss_history: Vec::new(),
        }
    }

    fn rng_snapshots(&self) -> BTreeMap<String, RngSnapshot> {
        let mut m = BTreeMap::new();
        m.insert("data".into(), RngSnapshot::capture(&self.rng_data));
        m.insert("noise".into(), RngSnapshot::capture(&self.rng_noise));
        m.insert("dropout".into(), RngSnapshot::capture(&self.rng_dropout));
        m
    }

    fn restore(&mut self, meta: &checkpoint::CheckpointMeta) -> Result<()> {
        self.iteration = meta.iteration;
        self.loss_history = meta.loss_history.clone();
        for (name, slot) in [
            ("data", &mut self.rng_data),
            ("noise", &mut self.rng_noise),
            ("dropout", &mut self.rng_dropout),
        ] {
            let snap = meta
                .rng
                .get(name)
                .ok_or_else(|| Error::Data(format!("checkpoint missing rng stream '{name}'")))?;
            *slot = snap.restore()?;
        }
        Ok(())
    }

    fn push_loss(&mut self, loss: f32) {
        if self.loss_history.len() == LOSS_HISTORY_CAP {
            self.loss_history.remove(0);
        }
        self.loss_history.push(loss);
    }
}

pub struct TrainOutcome {
    pub iterations: u64,
    pub final_loss: f32,
    pub checkpoint_dir: PathBuf,
    pub content_hash: String,
}

struct RunDir {
    root: PathBuf,
}

impl RunDir {
    fn prepare(root: &Path, cfg: &RunConfig) -> Result<Self> {
        std::fs::create_dir_all(root.join("samples"))
            .map_err(|e| Error::io(root.display().to_string(), e))?;
        std::fs::write(root.join("config.toml"), cfg.to_toml_string())
            .map_err(|e| Error::io(root.display().to_string(), e))?;
        Ok(RunDir { root: root.to_path_buf() })
    }

    fn ckpt_dir(&self) -> PathBuf {
        self.root.join("ckpt")
    }

    fn log_line(&self, iter: u64, loss: f32, lr: f64, wall_ms: u128) -> Result<()> {
        let path = self.root.join("log.jsonl");
        let mut f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let line = serde_json::json!({
            "iter": iter,
            "loss": loss,
            "lr": lr,
            "wall_ms": wall_ms as u64,
        });
        writeln!(f, "{line}").map_err(|e| Error::io(path.display().to_string(), e))
    }

    fn dump_batch(&self, context: &serde_json::Value) -> Result<PathBuf> {
        let path = self.root.join("diagnostic_batch.json");
        std::fs::write(&path, serde_json::to_string_pretty(context)?)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        Ok(path)
    }
}

/// Assembles `[n, c, h, w]` batches from per-sample `[c, h, w]` arrays.
fn stack_batch(items: &[&ArrayD<f32>]) -> ArrayD<f32> {
    let shape = items[0].shape();
    let mut full = vec![items.len()];
    full.extend_from_slice(shape);
    let mut out = ArrayD::<f32>::zeros(IxDyn(&full));
    for (i, item) in items.iter().enumerate() {
        let mut slot = out.index_axis_mut(ndarray::Axis(0), i);
        slot.assign(item);
    }
    out
}

/// Per-caption embedding cache (the text encoder is frozen, so embeddings
/// are constants).
struct TextCache {
    by_caption: std::collections::HashMap<String, TextEmbedding<f32>>,
}

impl TextCache {
    fn new() -> Self {
        TextCache {
            by_caption: std::collections::HashMap::new(),
        }
    }

    fn get(&mut self, models: &Models, caption: &str) -> TextEmbedding<f32> {
        if let Some(e) = self.by_caption.get(caption) {
            return e.clone();
        }
        let e = models.text.encode(&models.store, &[caption.to_string()]);
        self.by_caption.insert(caption.to_string(), e.clone());
        e
    }

    fn batch(&mut self, models: &Models, captions: &[String]) -> TextEmbedding<f32> {
        let embs: Vec<TextEmbedding<f32>> =
            captions.iter().map(|c| self.get(models, c)).collect();
        let (l, d) = (embs[0].tokens.shape()[1], embs[0].tokens.shape()[2]);
        let mut tokens = ArrayD::<f32>::zeros(IxDyn(&[captions.len(), l, d]));
        let mut mask = Vec::with_capacity(captions.len());
        for (i, e) in embs.iter().enumerate() {
            tokens
                .index_axis_mut(ndarray::Axis(0), i)
                .assign(&e.tokens.index_axis(ndarray::Axis(0), 0));
            mask.push(e.mask[0].clone());
        }
        TextEmbedding { tokens, mask }
    }
}

fn precompute_latents(models: &Models, ds: &Dataset) -> Vec<ArrayD<f32>> {
    ds.samples
        .iter()
        .map(|s| {
            let img = &s.image;
            let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
            let batched = img
                .clone()
                .into_shape_with_order(IxDyn(&[1, c, h, w]))
                .unwrap();
            let z = models.vae.encode_mode_host(&models.store, &batched);
            let zs = z.shape().to_vec();
            z.into_shape_with_order(IxDyn(&[zs[1], zs[2], zs[3]])).unwrap()
        })
        .collect()
}

fn save_state(
    run: &RunDir,
    models: &Models,
    state: &TrainState,
    base_hash: Option<String>,
) -> Result<String> {
    checkpoint::save(
        &run.ckpt_dir(),
        &SaveRequest {
            store: &models.store,
            optimizer: Some(&state.optimizer),
            config: &models.cfg,
            iteration: state.iteration,
            rng: state.rng_snapshots(),
            loss_history: state.loss_history.clone(),
            base_hash,
        },
    )
}

fn check_finite(
    run: &RunDir,
    loss: f32,
    iter: u64,
    context: serde_json::Value,
) -> Result<()> {
    if loss.is_finite() {
        return Ok(());
    }
    let path = run.dump_batch(&serde_json::json!({
        "iteration": iter,
        "loss": format!("{loss}"),
        "batch": context,
    }))?;
    Err(Error::Numerical(format!(
        "non-finite loss {loss} at iteration {iter}; offending batch dumped to {}",
        path.display()
    )))
}

/// Entry point used by the CLI: dispatches on the configured task.
pub fn run_training(
    cfg: &RunConfig,
    manifest: &Path,
    out_dir: &Path,
    prereq_ckpt: Option<&Path>,
    resume: bool,
) -> Result<TrainOutcome> {
    match cfg.task {
        TaskKind::Vae => train_vae(cfg, manifest, out_dir, resume),
        TaskKind::SingleImage => {
            let vae = prereq_ckpt.ok_or_else(|| {
                Error::Dependency(
                    "single_image training needs the stage-0 VAE checkpoint: \
                     run `train --task vae` first and pass it via --base-ckpt"
                        .into(),
                )
            })?;
            train_single_image(cfg, manifest, vae, out_dir, resume)
        }
        TaskKind::Superres | TaskKind::Temporal | TaskKind::Inpaint => {
            let base = prereq_ckpt.ok_or_else(|| {
                Error::Dependency(
                    "control training needs a base checkpoint: \
                     run `train --task single_image` first and pass it via --base-ckpt"
                        .into(),
                )
            })?;
            train_control(cfg, manifest, base, out_dir, resume)
        }
    }
}

/// Stage 0: VAE pretraining with reconstruction + small KL penalty.
pub fn train_vae(
    cfg: &RunConfig,
    manifest: &Path,
    out_dir: &Path,
    resume: bool,
) -> Result<TrainOutcome> {
    let mut models = build_models(cfg, false)?;
    let run = RunDir::prepare(out_dir, cfg)?;
    let mut state = TrainState::new(cfg);
    if resume {
        let meta = checkpoint::load_into(
            &run.ckpt_dir(),
            &mut models.store,
            Some(&mut state.optimizer),
        )?;
        state.restore(&meta)?;
    }
    models.store.set_trainable_prefix("unet.", false);
    models.store.set_trainable_prefix("cond.", false);

    let ds = Dataset::load(manifest, &models.ranges)?;
    let n = ds.len();
    let latent_hw = cfg.model.latent_size();
    let lc = cfg.model.latent_channels;

    let mut final_loss = f32::NAN;
    while state.iteration < cfg.max_iterations as u64 {
        let t0 = Instant::now();
        let idx: Vec<usize> = (0..cfg.batch_size)
            .map(|_| state.rng_data.random_range(0..n))
            .collect();
        let images: Vec<&ArrayD<f32>> = idx.iter().map(|&i| &ds.samples[i].image).collect();
        let x_host = stack_batch(&images);
        let eps_host: ArrayD<f32> = randn(
            &[cfg.batch_size, lc, latent_hw, latent_hw],
            &mut state.rng_noise,
        );

        let tape = Tape::<f32>::new();
        let fw = Fwd::new(&tape, &models.store);
        let xv = tape.leaf(x_host);
        let (mu, logvar) = models.vae.encode_dist(&fw, xv);
        let std = tape.exp(tape.scale(logvar, 0.5));
        let z = tape.add(mu, tape.mul(std, tape.leaf(eps_host)));
        let recon = models.vae.decode(&fw, z);
        let rl = tape.mse(recon, xv);
        let kl = tape.kl_standard_normal(mu, logvar);
        let loss = tape.add(rl, tape.scale(kl, cfg.kl_weight));
        let loss_val = tape.scalar(loss);
        check_finite(&run, loss_val, state.iteration, serde_json::json!({"indices": idx}))?;
        let grads = tape.backward(loss);
        state.optimizer.step(&mut models.store, &grads);

        state.iteration += 1;
        state.push_loss(loss_val);
        run.log_line(state.iteration, loss_val, cfg.lr, t0.elapsed().as_millis())?;
        if state.iteration % cfg.log_every as u64 == 0 {
            println!("vae iter {} loss {loss_val:.6}", state.iteration);
        }
        if state.iteration % cfg.save_every as u64 == 0 {
            save_state(&run, &models, &state, None)?;
            write_vae_preview(&run, &models, &ds, state.iteration)?;
        }
        final_loss = loss_val;
    }
    let content_hash = save_state(&run, &models, &state, None)?;
    write_vae_preview(&run, &models, &ds, state.iteration)?;
    Ok(TrainOutcome {
        iterations: state.iteration,
        final_loss,
        checkpoint_dir: run.ckpt_dir(),
        content_hash,
    })
}

fn write_vae_preview(run: &RunDir, models: &Models, ds: &Dataset, iter: u64) -> Result<()> {
    let k = ds.len().min(4);
    let mut tiles = Vec::new();
    for i in 0..k {
        let img = &ds.samples[i].image;
        let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
        let batched = img.clone().into_shape_with_order(IxDyn(&[1, c, h, w])).unwrap();
        let z = models.vae.encode_mode_host(&models.store, &batched);
        let rec = models.vae.decode_host(&models.store, &z);
        let rec3 = rec.index_axis(ndarray::Axis(0), 0).to_owned().into_dyn();
        tiles.push(from_model_range(img));
        tiles.push(from_model_range(&rec3));
    }
    let grid = image_grid(&tiles, 2);
    save_rgb_png(&run.root.join(format!("samples/vae_{iter:06}.png")), &grid)
}

/// Tiles `[3, h, w]` images into a grid with `cols` columns.
pub fn image_grid(tiles: &[ArrayD<f32>], cols: usize) -> ArrayD<f32> {
    assert!(!tiles.is_empty());
    let (h, w) = (tiles[0].shape()[1], tiles[0].shape()[2]);
    let rows = tiles.len().div_ceil(cols);
    let mut out = ArrayD::<f32>::zeros(IxDyn(&[3, rows * h, cols * w]));
    for (i, tile) in tiles.iter().enumerate() {
        let (r, c) = (i / cols, i % cols);
        for ch in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    out[[ch, r * h + y, c * w + x]] = tile[[ch, y, x]];
                }
            }
        }
    }
    out
}

/// Base diffusion training: denoiser + conditioning embedders update, VAE
/// and text encoder stay frozen.
pub fn train_single_image(
    cfg: &RunConfig,
    manifest: &Path,
    vae_ckpt: &Path,
    out_dir: &Path,
    resume: bool,
) -> Result<TrainOutcome> {
    let mut models = build_models(cfg, false)?;
    let run = RunDir::prepare(out_dir, cfg)?;
    let mut state = TrainState::new(cfg);
    if resume {
        let meta = checkpoint::load_into(
            &run.ckpt_dir(),
            &mut models.store,
            Some(&mut state.optimizer),
        )?;
        state.restore(&meta)?;
    } else {
        checkpoint::load_into(vae_ckpt, &mut models.store, None)?;
    }
    models.store.set_trainable_prefix("vae.", false);

    let ds = Dataset::load(manifest, &models.ranges)?;
    let n = ds.len();
    let latents = precompute_latents(&models, &ds);
    let mut text_cache = TextCache::new();
    let sched = models.schedule.clone();
    let t_max = sched.num_steps();

    let mut final_loss = f32::NAN;
    while state.iteration < cfg.max_iterations as u64 {
        let t0 = Instant::now();
        let idx: Vec<usize> = (0..cfg.batch_size)
            .map(|_| state.rng_data.random_range(0..n))
            .collect();
        let ts: Vec<usize> = (0..cfg.batch_size)
            .map(|_| state.rng_noise.random_range(1..=t_max))
            .collect();
        let keep = dropout_mask(cfg.batch_size, cfg.metadata_dropout, &mut state.rng_dropout);

        let mut zt_rows = Vec::with_capacity(cfg.batch_size);
        let mut target_rows = Vec::with_capacity(cfg.batch_size);
        for (bi, &i) in idx.iter().enumerate() {
            let z = &latents[i];
            let eps: ArrayD<f32> = randn(z.shape(), &mut state.rng_noise);
            zt_rows.push(add_noise(z, ts[bi], &eps, &sched));
            target_rows.push(compute_target(z, &eps, ts[bi], cfg.prediction_mode, &sched));
        }
        let zt_refs: Vec<&ArrayD<f32>> = zt_rows.iter().collect();
        let target_refs: Vec<&ArrayD<f32>> = target_rows.iter().collect();
        let z_t = stack_batch(&zt_refs);
        let target = stack_batch(&target_refs);

        // the metadata-null branch substitutes the empty caption (one draw
        // covers both, so the trained null matches the sampling-time null)
        let captions: Vec<String> = idx
            .iter()
            .zip(&keep)
            .map(|(&i, &k)| {
                if k {
                    ds.samples[i].record.caption.clone()
                } else {
                    String::new()
                }
            })
            .collect();
        let txt = text_cache.batch(&models, &captions);
        let mds: Vec<MetadataRecord> = idx.iter().map(|&i| ds.samples[i].record.metadata()).collect();

        let tape = Tape::<f32>::new();
        let fw = Fwd::new(&tape, &models.store);
        let txt_ctx = txt.context(&tape, cfg.model.heads);
        let c = models
            .embedders
            .combine(&tape, &models.store, &mds, &ts, &models.ranges, Some(&keep));
        let pred = models.unet.forward(&fw, tape.leaf(z_t), &txt_ctx, c, None);
        let loss = tape.mse(pred, tape.leaf(target));
        let loss_val = tape.scalar(loss);
        check_finite(
            &run,
            loss_val,
            state.iteration,
            serde_json::json!({"indices": idx, "timesteps": ts, "captions": captions}),
        )?;
        let grads = tape.backward(loss);
        state.optimizer.step(&mut models.store, &grads);

        state.iteration += 1;
        state.push_loss(loss_val);
        run.log_line(state.iteration, loss_val, cfg.lr, t0.elapsed().as_millis())?;
        if state.iteration % cfg.log_every as u64 == 0 {
            println!("diffusion iter {} loss {loss_val:.6}", state.iteration);
        }
        if state.iteration % cfg.save_every as u64 == 0 {
            save_state(&run, &models, &state, None)?;
            write_diffusion_preview(&run, &models, &ds, state.iteration)?;
        }
        final_loss = loss_val;
    }
    let content_hash = save_state(&run, &models, &state, None)?;
    write_diffusion_preview(&run, &models, &ds, state.iteration)?;
    Ok(TrainOutcome {
        iterations: state.iteration,
        final_loss,
        checkpoint_dir: run.ckpt_dir(),
        content_hash,
    })
}

fn write_diffusion_preview(run: &RunDir, models: &Models, ds: &Dataset, iter: u64) -> Result<()> {
    let rec = &ds.samples[0].record;
    let opts = SampleOptions {
        steps: 20,
        guidance: models.cfg.guidance_scale,
        eta: 0.0,
        seed: derive_seed(models.cfg.seed, 900 + iter),
    };
    let images = sample_single(models, &rec.caption, Some(rec.metadata()), 4, &opts)?;
    let grid = image_grid(&images, 2);
    save_rgb_png(&run.root.join(format!("samples/diffusion_{iter:06}.png")), &grid)
}

/// Control-branch training. The base model (and its conditioning embedders)
/// stay frozen; only `control.*` parameters update.
pub fn train_control(
    cfg: &RunConfig,
    manifest: &Path,
    base_ckpt: &Path,
    out_dir: &Path,
    resume: bool,
) -> Result<TrainOutcome> {
    if !matches!(
        cfg.task,
        TaskKind::Superres | TaskKind::Temporal | TaskKind::Inpaint
    ) {
        return Err(Error::Config("train_control requires a control task".into()));
    }
    let mut models = build_models(cfg, true)?;
    let run = RunDir::prepare(out_dir, cfg)?;
    let mut state = TrainState::new(cfg);
    let base_meta = checkpoint::load_meta(base_ckpt)?;
    check_base_compat(cfg, &base_meta)?;
    let base_hash = base_meta.content_hash.clone();
    if resume {
        let meta = checkpoint::load_into(
            &run.ckpt_dir(),
            &mut models.store,
            Some(&mut state.optimizer),
        )?;
        state.restore(&meta)?;
    } else {
        load_base_into(base_ckpt, &mut models.store)?;
        crate::control::ControlBranch::init_from_base(&mut models.store);
    }
    for prefix in ["vae.", "unet.", "cond.", "text."] {
        models.store.set_trainable_prefix(prefix, false);
    }

    let ds = Dataset::load(manifest, &models.ranges)?;
    let latents = precompute_latents(&models, &ds);
    let mut text_cache = TextCache::new();
    let sched = models.schedule.clone();
    let t_max = sched.num_steps();
    let control = models.control.as_ref().expect("built with control");

    // usable sequence list for the temporal task: a target frame plus at
    // least two conditioning frames
    let seq_ids: Vec<String> = ds
        .sequences
        .iter()
        .filter(|(_, v)| v.len() >= 3)
        .map(|(k, _)| k.clone())
        .collect();
    let mut skipped_short = ds.sequences.values().filter(|v| v.len() < 3).count();
    if cfg.task == TaskKind::Temporal && seq_ids.is_empty() {
        return Err(Error::Data(
            "temporal training needs sequences with at least 3 frames".into(),
        ));
    }

    let batch = cfg.batch_size;
    let mut final_loss = f32::NAN;
    while state.iteration < cfg.max_iterations as u64 {
        let t0 = Instant::now();
        // assemble (target, control sequence) pairs per task
        let mut seqs: Vec<ControlSequence<f32>> = Vec::with_capacity(batch);
        let mut targets: Vec<usize> = Vec::with_capacity(batch);
        match cfg.task {
            TaskKind::Superres => {
                for _ in 0..batch {
                    let i = state.rng_data.random_range(0..ds.len());
                    let s = &ds.samples[i];
                    let lr = s.lowres.as_ref().ok_or_else(|| {
                        Error::Data(format!("sample {} lacks a lowres pair", s.record.id))
                    })?;
                    let up = resize_bilinear(&lr.data, cfg.model.image_size, cfg.model.image_size);
                    let frame = ImageTensor::multispectral(up.mapv(|v| v * 2.0 - 1.0));
                    let mut lr_md = s.record.metadata();
                    let scale = cfg.model.image_size as f64 / lr.data.shape()[1] as f64;
                    lr_md.gsd = (lr_md.gsd * scale).min(10.0);
                    seqs.push(ControlSequence {
                        frames: vec![frame],
                        per_frame_metadata: vec![lr_md],
                        caption: s.record.caption.clone(),
                        target_metadata: s.record.metadata(),
                    });
                    targets.push(i);
                }
            }
            TaskKind::Temporal => {
                for _ in 0..batch {
                    let sid = &seq_ids[state.rng_data.random_range(0..seq_ids.len())];
                    let frames_idx = &ds.sequences[sid];
                    // target strictly before or strictly after the rest
                    let take_last = state.rng_data.random::<f64>() < 0.5;
                    let (target_i, cond_idx): (usize, Vec<usize>) = if take_last {
                        (
                            *frames_idx.last().unwrap(),
                            frames_idx[..frames_idx.len() - 1].to_vec(),
                        )
                    } else {
                        (frames_idx[0], frames_idx[1..].to_vec())
                    };
                    let target_md = ds.samples[target_i].record.metadata();
                    let cond: Vec<(ImageTensor<f32>, MetadataRecord)> = cond_idx
                        .iter()
                        .map(|&ci| {
                            (
                                ImageTensor::rgb(ds.samples[ci].image.clone()),
                                ds.samples[ci].record.metadata(),
                            )
                        })
                        .collect();
                    let padded =
                        match pad_sequence(&cond, cfg.control.sequence_length, &target_md) {
                            Ok(p) => p,
                            Err(_) => {
                                skipped_short += 1;
                                continue;
                            }
                        };
                    let (frames, mds): (Vec<_>, Vec<_>) = padded.into_iter().unzip();
                    seqs.push(ControlSequence {
                        frames,
                        per_frame_metadata: mds,
                        caption: ds.samples[target_i].record.caption.clone(),
                        target_metadata: target_md,
                    });
                    targets.push(target_i);
                }
            }
            TaskKind::Inpaint => {
                for _ in 0..batch {
                    let i = state.rng_data.random_range(0..ds.len());
                    let s = &ds.samples[i];
                    let corrupted = s.corrupted.as_ref().ok_or_else(|| {
                        Error::Data(format!("sample {} lacks a corrupted pair", s.record.id))
                    })?;
                    seqs.push(ControlSequence {
                        frames: vec![ImageTensor::rgb(corrupted.clone())],
                        per_frame_metadata: vec![s.record.metadata()],
                        caption: s.record.caption.clone(),
                        target_metadata: s.record.metadata(),
                    });
                    targets.push(i);
                }
            }
            _ => unreachable!(),
        }
        if seqs.is_empty() {
            continue;
        }
        let b = seqs.len();

        let ts: Vec<usize> = (0..b).map(|_| state.rng_noise.random_range(1..=t_max)).collect();
        let mut zt_rows = Vec::with_capacity(b);
        let mut target_rows = Vec::with_capacity(b);
        for (bi, &i) in targets.iter().enumerate() {
            let z = &latents[i];
            let eps: ArrayD<f32> = randn(z.shape(), &mut state.rng_noise);
            zt_rows.push(add_noise(z, ts[bi], &eps, &sched));
            target_rows.push(compute_target(z, &eps, ts[bi], cfg.prediction_mode, &sched));
        }
        let z_t = stack_batch(&zt_rows.iter().collect::<Vec<_>>());
        let target = stack_batch(&target_rows.iter().collect::<Vec<_>>());
        let captions: Vec<String> = seqs.iter().map(|s| s.caption.clone()).collect();
        let txt = text_cache.batch(&models, &captions);
        let target_mds: Vec<MetadataRecord> = seqs.iter().map(|s| s.target_metadata).collect();

        let tape = Tape::<f32>::new();
        let fw = Fwd::new(&tape, &models.store);
        let (ctrl, t_len) =
            control.encode_control(&fw, &models.vae, &models.embedders, &models.ranges, &seqs)?;
        let c_target = models.embedders.combine(
            &tape,
            &models.store,
            &target_mds,
            &ts,
            &models.ranges,
            None,
        );
        let txt_ctx = txt.context(&tape, cfg.model.heads);
        let txt_rep = if control.stack_2d {
            txt.clone()
        } else {
            txt.repeat_per_frame(t_len)
        };
        let txt_rep_ctx = txt_rep.context(&tape, cfg.model.heads);
        let z_t_var = tape.leaf(z_t);
        let residuals = control.forward(&fw, z_t_var, &txt_rep_ctx, c_target, ctrl, t_len);
        let pred = models
            .unet
            .forward(&fw, z_t_var, &txt_ctx, c_target, Some(&residuals));
        let loss = tape.mse(pred, tape.leaf(target));
        let loss_val = tape.scalar(loss);
        check_finite(
            &run,
            loss_val,
            state.iteration,
            serde_json::json!({"targets": targets, "timesteps": ts}),
        )?;
        let grads = tape.backward(loss);
        state.optimizer.step(&mut models.store, &grads);

        state.iteration += 1;
        state.push_loss(loss_val);
        run.log_line(state.iteration, loss_val, cfg.lr, t0.elapsed().as_millis())?;
        if state.iteration % cfg.log_every as u64 == 0 {
            println!("control iter {} loss {loss_val:.6}", state.iteration);
        }
        if state.iteration % cfg.save_every as u64 == 0 {
            save_state(&run, &models, &state, Some(base_hash.clone()))?;
        }
        final_loss = loss_val;
    }
    if skipped_short > 0 {
        println!("skipped {skipped_short} too-short sequences");
    }
    let content_hash = save_state(&run, &models, &state, Some(base_hash))?;
    Ok(TrainOutcome {
        iterations: state.iteration,
        final_loss,
        checkpoint_dir: run.ckpt_dir(),
        content_hash,
    })
}

fn check_base_compat(cfg: &RunConfig, base: &checkpoint::CheckpointMeta) -> Result<()> {
    let m = &base.config.model;
    let ours = &cfg.model;
    if m.base_width != ours.base_width
        || m.channel_mults != ours.channel_mults
        || m.cond_dim != ours.cond_dim
        || m.latent_channels != ours.latent_channels
        || m.vae_widths != ours.vae_widths
        || m.image_size != ours.image_size
    {
        return Err(Error::Dependency(format!(
            "base checkpoint model shape differs from the run config \
             (base width {} mults {:?} D {} vs width {} mults {:?} D {})",
            m.base_width, m.channel_mults, m.cond_dim, ours.base_width, ours.channel_mults, ours.cond_dim
        )));
    }
    Ok(())
}

/// Loads only base-model tensors (everything except `control.*`) from a base
/// checkpoint into a store that also holds control parameters.
fn load_base_into(dir: &Path, store: &mut terradiff_autograd::ParamStore<f32>) -> Result<()> {
    // stage the base tensors through a control-free twin store
    let meta = checkpoint::load_meta(dir)?;
    let mut base_models = build_models(&meta.config, false)?;
    checkpoint::load_into(dir, &mut base_models.store, None)?;
    let names: Vec<String> = base_models
        .store
        .iter()
        .map(|(_, e)| e.name.clone())
        .collect();
    for name in names {
        let src = base_models.store.id(&name).unwrap();
        let dst = store
            .id(&name)
            .ok_or_else(|| Error::Data(format!("store missing base tensor {name}")))?;
        *store.value_mut(dst) = base_models.store.value(src).clone();
    }
    Ok(())
}
