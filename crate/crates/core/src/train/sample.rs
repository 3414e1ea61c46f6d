//! Sampling drivers: single-image DDIM with guidance, control-conditioned
//! sampling, autoregressive sequence generation, and inpainting preparation.

use ndarray::{Array2, ArrayD, IxDyn};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use terradiff_autograd::{randn, Tape};

use super::models::Models;
use crate::control::ControlSequence;
use crate::data::caption::build_caption;
use crate::data::io::{from_model_range, to_model_range};
use crate::data::sequence::pad_sequence;
use crate::data::DatasetKind;
use crate::diffusion::{cfg_combine, ddim_step, ddim_timesteps};
use crate::metadata::MetadataRecord;
use crate::nets::{Fwd, ImageTensor};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct SampleOptions {
    pub steps: usize,
    pub guidance: f64,
    pub eta: f64,
    pub seed: u64,
}

impl SampleOptions {
    pub fn from_config(cfg: &crate::config::RunConfig, seed: u64) -> Self {
        SampleOptions {
            steps: cfg.sample_steps,
            guidance: cfg.guidance_scale,
            eta: cfg.eta,
            seed,
        }
    }
}

fn split_batch(batch: &ArrayD<f32>) -> Vec<ArrayD<f32>> {
    (0..batch.shape()[0])
        .map(|i| batch.index_axis(ndarray::Axis(0), i).to_owned().into_dyn())
        .collect()
}

/// Draws `n` images for one caption/metadata pair. `metadata = None` uses
/// the trained null branch. Deterministic in `opts.seed`.
pub fn sample_single(
    models: &Models,
    caption: &str,
    metadata: Option<MetadataRecord>,
    n: usize,
    opts: &SampleOptions,
) -> Result<Vec<ArrayD<f32>>> {
    let latents = sample_latents(models, caption, metadata, n, opts, None)?;
    Ok(decode_latents(models, &latents))
}

fn decode_latents(models: &Models, latents: &ArrayD<f32>) -> Vec<ArrayD<f32>> {
    let imgs = models.vae.decode_host(&models.store, latents);
    split_batch(&imgs).iter().map(from_model_range).collect()
}

/// Shared DDIM loop; `control` carries the precomputed control latent and
/// frame count when sampling conditionally.
fn sample_latents(
    models: &Models,
    caption: &str,
    metadata: Option<MetadataRecord>,
    n: usize,
    opts: &SampleOptions,
    control: Option<(&ArrayD<f32>, usize)>,
) -> Result<ArrayD<f32>> {
    if n == 0 {
        return Err(Error::Config("sample count must be >= 1".into()));
    }
    let cfg = &models.cfg;
    let sched = &models.schedule;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let hw = cfg.model.latent_size();
    let mut z: ArrayD<f32> = randn(&[n, cfg.model.latent_channels, hw, hw], &mut rng);

    let captions = vec![caption.to_string(); n];
    let txt_cond = models.text.encode(&models.store, &captions);
    let null_captions = vec![String::new(); n];
    let txt_null = models.text.encode(&models.store, &null_captions);

    let steps = ddim_timesteps(sched.num_steps(), opts.steps);
    for w in steps.windows(2) {
        let (t, t_prev) = (w[0], w[1]);
        let ts = vec![t; n];

        let pred_cond = {
            let tape = Tape::<f32>::new();
            let fw = Fwd::new(&tape, &models.store);
            let txt_ctx = txt_cond.context(&tape, cfg.model.heads);
            let c = match metadata {
                Some(md) => models.embedders.combine(
                    &tape,
                    &models.store,
                    &vec![md; n],
                    &ts,
                    &models.ranges,
                    None,
                ),
                None => models.embedders.combine_null(&tape, &models.store, &ts),
            };
            let z_var = tape.leaf(z.clone());
            let residuals = control.map(|(ctrl, t_len)| {
                let branch = models.control.as_ref().expect("control models");
                let txt_rep = if branch.stack_2d {
                    txt_cond.clone()
                } else {
                    txt_cond.repeat_per_frame(t_len)
                };
                let txt_rep_ctx = txt_rep.context(&tape, cfg.model.heads);
                branch.forward(&fw, z_var, &txt_rep_ctx, c, tape.leaf(ctrl.clone()), t_len)
            });
            let pred = models
                .unet
                .forward(&fw, z_var, &txt_ctx, c, residuals.as_deref());
            tape.value(pred)
        };

        let pred = if opts.guidance == 1.0 {
            pred_cond
        } else {
            let pred_uncond = {
                let tape = Tape::<f32>::new();
                let fw = Fwd::new(&tape, &models.store);
                let txt_ctx = txt_null.context(&tape, cfg.model.heads);
                let c = models.embedders.combine_null(&tape, &models.store, &ts);
                let pred = models.unet.forward(&fw, tape.leaf(z.clone()), &txt_ctx, c, None);
                tape.value(pred)
            };
            cfg_combine(&pred_uncond, &pred_cond, opts.guidance)
        };

        z = ddim_step(
            &z,
            &pred,
            t,
            t_prev,
            cfg.prediction_mode,
            sched,
            opts.eta,
            Some(&mut rng),
        );
    }
    Ok(z)
}

/// Conditional sampling: one output image per control sequence. Residuals
/// from the control branch are injected at every denoising step.
pub fn sample_conditional(
    models: &Models,
    seqs: &[ControlSequence<f32>],
    opts: &SampleOptions,
) -> Result<Vec<ArrayD<f32>>> {
    let control = models
        .control
        .as_ref()
        .ok_or_else(|| Error::Dependency("conditional sampling needs a control checkpoint".into()))?;
    if seqs.is_empty() {
        return Err(Error::Config("no control sequences given".into()));
    }
    // the control latent is timestep-independent; encode once
    let (ctrl_host, t_len) = {
        let tape = Tape::<f32>::new();
        let fw = Fwd::new(&tape, &models.store);
        let (ctrl, t_len) =
            control.encode_control(&fw, &models.vae, &models.embedders, &models.ranges, seqs)?;
        (tape.value(ctrl), t_len)
    };

    // sequences share caption/target metadata per entry; sample each row
    // jointly when they agree, else loop (keeps the common case fast)
    let same = seqs
        .windows(2)
        .all(|w| w[0].caption == w[1].caption && w[0].target_metadata == w[1].target_metadata);
    if same {
        let latents = sample_latents(
            models,
            &seqs[0].caption,
            Some(seqs[0].target_metadata),
            seqs.len(),
            opts,
            Some((&ctrl_host, t_len)),
        )?;
        return Ok(decode_latents(models, &latents));
    }
    let mut out = Vec::with_capacity(seqs.len());
    for (i, seq) in seqs.iter().enumerate() {
        let row = ctrl_host
            .index_axis(ndarray::Axis(0), i)
            .to_owned()
            .into_dyn();
        let shape = row.shape().to_vec();
        let mut batched = vec![1usize];
        batched.extend_from_slice(&shape);
        let row = row.into_shape_with_order(IxDyn(&batched)).unwrap();
        let opts_i = SampleOptions {
            seed: opts.seed.wrapping_add(i as u64),
            ..*opts
        };
        let latents = sample_latents(
            models,
            &seq.caption,
            Some(seq.target_metadata),
            1,
            &opts_i,
            Some((&row, t_len)),
        )?;
        out.extend(decode_latents(models, &latents));
    }
    Ok(out)
}

/// Autoregressive sequence generation: the first image comes from the base
/// model, every later image is conditioned on all previously generated
/// frames. Returns the images plus, per generation step, how many distinct
/// previous frames conditioned it.
pub fn autoregressive_generate(
    models: &Models,
    caption: &str,
    metadata_seq: &[MetadataRecord],
    opts: &SampleOptions,
) -> Result<(Vec<ArrayD<f32>>, Vec<usize>)> {
    if metadata_seq.is_empty() {
        return Err(Error::Config("autoregressive generation needs >= 1 metadata record".into()));
    }
    let mut images: Vec<ArrayD<f32>> = Vec::with_capacity(metadata_seq.len());
    let mut conditioning_sizes = Vec::new();

    let first_opts = SampleOptions {
        seed: opts.seed,
        ..*opts
    };
    let first = sample_single(models, caption, Some(metadata_seq[0]), 1, &first_opts)?;
    images.extend(first);
    conditioning_sizes.push(0);

    for k in 1..metadata_seq.len() {
        let mut frames: Vec<(ImageTensor<f32>, MetadataRecord)> = images
            .iter()
            .zip(metadata_seq.iter())
            .map(|(img, md)| (ImageTensor::rgb(to_model_range(img)), *md))
            .collect();
        conditioning_sizes.push(frames.len());
        // a single prior frame self-pads before the shared padding rule
        if frames.len() == 1 {
            frames.push(frames[0].clone());
        }
        let padded = pad_sequence(&frames, models.cfg.control.sequence_length, &metadata_seq[k])?;
        let (f, mds): (Vec<_>, Vec<_>) = padded.into_iter().unzip();
        let seq = ControlSequence {
            frames: f,
            per_frame_metadata: mds,
            caption: caption.to_string(),
            target_metadata: metadata_seq[k],
        };
        let step_opts = SampleOptions {
            seed: opts.seed.wrapping_add(1000 + k as u64),
            ..*opts
        };
        let img = sample_conditional(models, &[seq], &step_opts)?;
        images.extend(img);
    }
    Ok((images, conditioning_sizes))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CorruptionKind {
    CloudWhite,
    Noise,
    Zero,
}

impl std::str::FromStr for CorruptionKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cloud" | "cloud_white" => Ok(CorruptionKind::CloudWhite),
            "noise" => Ok(CorruptionKind::Noise),
            "zero" => Ok(CorruptionKind::Zero),
            other => Err(Error::Config(format!(
                "unknown corruption '{other}' (cloud|noise|zero)"
            ))),
        }
    }
}

/// Builds the one-frame conditioning sequence for inpainting: the masked
/// region of the image is replaced per the corruption kind and the caption
/// carries the before/after disaster phrasing. An empty mask warns and
/// passes the image through unchanged.
pub fn inpaint_prepare(
    image: &ArrayD<f32>,
    metadata: MetadataRecord,
    mask: &Array2<bool>,
    corruption: CorruptionKind,
    disaster_type: &str,
    phase: &str,
    rng: &mut ChaCha8Rng,
) -> Result<(ControlSequence<f32>, bool)> {
    assert_eq!(image.ndim(), 3);
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    if mask.dim() != (h, w) {
        return Err(Error::Data(format!(
            "mask {:?} does not match image {h}x{w}",
            mask.dim()
        )));
    }
    let empty = !mask.iter().any(|&m| m);
    if empty {
        eprintln!("inpaint_prepare: empty mask, passing the image through unchanged");
    }
    let mut frame = image.clone();
    if !empty {
        for y in 0..h {
            for x in 0..w {
                if !mask[[y, x]] {
                    continue;
                }
                for ci in 0..c {
                    frame[[ci, y, x]] = match corruption {
                        CorruptionKind::CloudWhite => 0.96,
                        CorruptionKind::Noise => rng.random::<f32>() * 2.0 - 1.0,
                        CorruptionKind::Zero => 0.0,
                    };
                }
            }
        }
    }
    let mut labels = std::collections::BTreeMap::new();
    labels.insert("phase".to_string(), phase.to_string());
    labels.insert("disaster_type".to_string(), disaster_type.to_string());
    let mut caption_rng = ChaCha8Rng::seed_from_u64(0);
    let caption = build_caption(DatasetKind::Xbd, &labels, &mut caption_rng, 0.0)?;
    Ok((
        ControlSequence {
            frames: vec![ImageTensor::rgb(frame)],
            per_frame_metadata: vec![metadata],
            caption,
            target_metadata: metadata,
        },
        empty,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inpaint_masks() {
        let img = ArrayD::<f32>::from_elem(IxDyn(&[3, 8, 8]), 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let md = MetadataRecord {
            lon: 0.0,
            lat: 0.0,
            gsd: 1.0,
            cloud_cover: 0.0,
            year: 2020.0,
            month: 6.0,
            day: 1.0,
        };

        // empty mask passes through
        let empty = Array2::from_elem((8, 8), false);
        let (seq, warned) =
            inpaint_prepare(&img, md, &empty, CorruptionKind::Zero, "flooding", "after", &mut rng)
                .unwrap();
        assert!(warned);
        assert!(seq.frames[0]
            .data
            .iter()
            .zip(img.iter())
            .all(|(a, b)| a == b));

        // full mask with zero corruption blanks the frame
        let full = Array2::from_elem((8, 8), true);
        let (seq, warned) =
            inpaint_prepare(&img, md, &full, CorruptionKind::Zero, "fire", "before", &mut rng)
                .unwrap();
        assert!(!warned);
        assert!(seq.frames[0].data.iter().all(|&v| v == 0.0));
        assert_eq!(
            seq.caption,
            "a fmow satellite image before being affected by a fire natural disaster"
        );

        // box mask leaves unmasked pixels bit-identical
        let mut boxm = Array2::from_elem((8, 8), false);
        for y in 2..6 {
            for x in 2..6 {
                boxm[[y, x]] = true;
            }
        }
        let (seq, _) = inpaint_prepare(
            &img,
            md,
            &boxm,
            CorruptionKind::CloudWhite,
            "flooding",
            "after",
            &mut rng,
        )
        .unwrap();
        for y in 0..8 {
            for x in 0..8 {
                for ci in 0..3 {
                    let v = seq.frames[0].data[[ci, y, x]];
                    if boxm[[y, x]] {
                        assert_eq!(v, 0.96);
                    } else {
                        assert_eq!(v.to_bits(), img[[ci, y, x]].to_bits());
                    }
                }
            }
        }
    }
}
