//! Temporal control branch: a trainable copy of the denoiser's down/mid
//! trunk that conditions on a sequence of images with per-frame metadata and
//! feeds residuals into the base denoiser through zero-initialized temporal
//! convolutions.
//!
//! Frame order is canonicalized by timestamp before any computation, so the
//! emitted residuals are exactly invariant to the order conditioning frames
//! arrive in; the metadata alone determines temporal position.

use std::cell::RefCell;

use ndarray::{ArrayD, IxDyn};
use terradiff_autograd::{Builder, Element, Init, ParamId, Var};

use crate::config::{ControlConfig, DenoiserConfig};
use crate::metadata::{EmbedderSet, MetadataRanges, MetadataRecord};
use crate::nets::blocks::{
    Conv2dLayer, LayerNormLayer, LinearLayer, MultiHeadAttention, TextContext,
};
use crate::nets::unet::{skip_inventory, Trunk};
use crate::nets::{Fwd, ImageTensor, Vae};
use crate::{Error, Result};

/// T conditioning frames with per-frame metadata, one caption, and the
/// metadata of the image being generated.
#[derive(Clone)]
pub struct ControlSequence<E: Element> {
    pub frames: Vec<ImageTensor<E>>,
    pub per_frame_metadata: Vec<MetadataRecord>,
    pub caption: String,
    pub target_metadata: MetadataRecord,
}

impl<E: Element> ControlSequence<E> {
    pub fn validate(&self) -> Result<()> {
        if self.frames.len() != self.per_frame_metadata.len() {
            return Err(Error::Data(format!(
                "control sequence has {} frames but {} metadata records",
                self.frames.len(),
                self.per_frame_metadata.len()
            )));
        }
        if self.frames.is_empty() {
            return Err(Error::Data("control sequence is empty".into()));
        }
        let shape = self.frames[0].data.shape().to_vec();
        for f in &self.frames {
            if f.data.shape() != shape.as_slice() {
                return Err(Error::Data("control frames disagree on shape".into()));
            }
        }
        Ok(())
    }

    /// Chronological canonical order (joint sort of frames and metadata).
    /// Any permutation of the input therefore produces identical tensors
    /// downstream.
    pub fn canonicalize(&mut self) {
        let mut idx: Vec<usize> = (0..self.frames.len()).collect();
        idx.sort_by_key(|&i| self.per_frame_metadata[i].date_key());
        let frames = idx.iter().map(|&i| self.frames[i].clone()).collect();
        let md = idx.iter().map(|&i| self.per_frame_metadata[i]).collect();
        self.frames = frames;
        self.per_frame_metadata = md;
    }
}

/// Zero-gated temporal mixer: a zero-initialized temporal convolution, a
/// pixel-wise transformer over the frame axis (no positional encoding), and a
/// learned scalar gate starting at 0 so the block is the identity at
/// initialization.
pub struct TemporalLayer {
    conv_w: ParamId,
    conv_b: ParamId,
    ln1: LayerNormLayer,
    attn: MultiHeadAttention,
    ln2: LayerNormLayer,
    ff1: LinearLayer,
    ff2: LinearLayer,
    alpha: ParamId,
}

impl TemporalLayer {
    pub fn build<E: Element>(
        b: &mut Builder<'_, E>,
        name: &str,
        channels: usize,
        kernel_t: usize,
        heads: usize,
    ) -> Self {
        let mut s = b.scope(name);
        let conv_w = s.param("conv.weight", &[channels, channels, kernel_t], Init::Zeros);
        let conv_b = s.param("conv.bias", &[channels], Init::Zeros);
        let ln1 = LayerNormLayer::new(&mut s, "ln1", channels);
        let heads = if channels % heads == 0 { heads } else { 1 };
        let attn = MultiHeadAttention::new(&mut s, "attn", channels, channels, heads);
        let ln2 = LayerNormLayer::new(&mut s, "ln2", channels);
        let ff1 = LinearLayer::new(&mut s, "ff1", channels, channels * 2);
        let ff2 = LinearLayer::new(&mut s, "ff2", channels * 2, channels);
        let alpha = s.param("alpha", &[1], Init::Zeros);
        TemporalLayer {
            conv_w,
            conv_b,
            ln1,
            attn,
            ln2,
            ff1,
            ff2,
            alpha,
        }
    }

    /// `h` is `[(b*t), c, hs, ws]`; the leading dimension must divide by `t`.
    pub fn forward<E: Element>(&self, fw: &Fwd<'_, E>, h: Var, t_len: usize) -> Var {
        let tape = fw.tape;
        let shape = tape.shape(h);
        let (bt, c, hs, ws) = (shape[0], shape[1], shape[2], shape[3]);
        assert_eq!(
            bt % t_len,
            0,
            "temporal layer: leading dim {bt} not divisible by t = {t_len}"
        );
        let b = bt / t_len;
        let x5 = tape.reshape(h, &[b, t_len, c, hs, ws]);

        let conv = tape.temporal_conv(x5, fw.p(self.conv_w), fw.p(self.conv_b));

        // tokens over the frame axis at each spatial site
        let tok = tape.permute(conv, &[0, 3, 4, 1, 2]); // [b, hs, ws, t, c]
        let mut s = tape.reshape(tok, &[b * hs * ws, t_len, c]);
        let n1 = self.ln1.forward(fw, s);
        let sa = self.attn.forward(fw, n1, n1, None);
        s = tape.add(s, sa);
        let n2 = self.ln2.forward(fw, s);
        let ff = self.ff2.forward(fw, tape.silu(self.ff1.forward(fw, n2)));
        s = tape.add(s, ff);
        let branch = tape.reshape(s, &[b, hs, ws, t_len, c]);
        let branch = tape.permute(branch, &[0, 3, 4, 1, 2]); // [b, t, c, hs, ws]

        let gated = tape.mul_scalar_var(branch, fw.p(self.alpha));
        let out = tape.add(x5, gated);
        tape.reshape(out, &[bt, c, hs, ws])
    }
}

/// The control branch: hint convolution, trainable trunk copy, temporal
/// layers and zero-initialized residual taps.
pub struct ControlBranch {
    pub trunk: Trunk,
    hint: Conv2dLayer,
    md_proj: LinearLayer,
    temporal: Vec<TemporalLayer>,
    taps: Vec<(ParamId, ParamId)>,
    taps_2d: Vec<Conv2dLayer>,
    pub inventory: Vec<(usize, usize)>,
    pub n_md: usize,
    pub stack_2d: bool,
    latent_channels: usize,
}

impl ControlBranch {
    pub fn build<E: Element>(
        b: &mut Builder<'_, E>,
        cfg: &DenoiserConfig,
        ctrl: &ControlConfig,
    ) -> Self {
        let mut s = b.scope("control");
        let trunk = {
            let mut cs = s.scope("copy");
            Trunk::build(&mut cs, cfg)
        };
        let widths0 = cfg.base_width * cfg.channel_mults[0];
        let hint_in = if ctrl.stack_2d {
            ctrl.sequence_length * (cfg.latent_channels + ctrl.metadata_channels)
        } else {
            cfg.latent_channels + ctrl.metadata_channels
        };
        let hint = Conv2dLayer::new_zero(&mut s, "hint", hint_in, widths0, 3, 1, 1);
        let md_proj = LinearLayer::new(&mut s, "md_proj", cfg.cond_dim, ctrl.metadata_channels);

        let inventory = skip_inventory(cfg);
        let mut temporal = Vec::new();
        let mut taps = Vec::new();
        let mut taps_2d = Vec::new();
        for (i, &(ch, _)) in inventory.iter().enumerate() {
            if ctrl.stack_2d {
                taps_2d.push(Conv2dLayer::new_zero(
                    &mut s,
                    &format!("tap{i}"),
                    ch,
                    ch,
                    1,
                    1,
                    0,
                ));
            } else {
                temporal.push(TemporalLayer::build(
                    &mut s,
                    &format!("temporal{i}"),
                    ch,
                    ctrl.temporal_kernel,
                    ctrl.temporal_heads,
                ));
                let mut ts = s.scope(&format!("tap{i}"));
                let w = ts.param("weight", &[ch, ch, ctrl.temporal_kernel], Init::Zeros);
                let bias = ts.param("bias", &[ch], Init::Zeros);
                taps.push((w, bias));
            }
        }
        ControlBranch {
            trunk,
            hint,
            md_proj,
            temporal,
            taps,
            taps_2d,
            inventory,
            n_md: ctrl.metadata_channels,
            stack_2d: ctrl.stack_2d,
            latent_channels: cfg.latent_channels,
        }
    }

    /// Copies the base trunk weights into the trainable copy. Call once when
    /// starting control training from a base checkpoint.
    pub fn init_from_base<E: Element>(store: &mut terradiff_autograd::ParamStore<E>) {
        store.copy_prefix("unet.conv_in.", "control.copy.conv_in.");
        store.copy_prefix("unet.down", "control.copy.down");
        store.copy_prefix("unet.mid.", "control.copy.mid.");
    }

    /// Encodes a batch of control sequences into `[b, t, c' + n_md, h', w']`:
    /// frames are canonically ordered, VAE-encoded independently (posterior
    /// mode, frozen), and concatenated with their spatially broadcast
    /// metadata channels.
    pub fn encode_control<E: Element>(
        &self,
        fw: &Fwd<'_, E>,
        vae: &Vae,
        emb: &EmbedderSet,
        ranges: &MetadataRanges,
        seqs: &[ControlSequence<E>],
    ) -> Result<(Var, usize)> {
        assert!(!seqs.is_empty());
        let tape = fw.tape;
        let mut canon: Vec<ControlSequence<E>> = seqs.to_vec();
        for s in &mut canon {
            s.validate()?;
            s.canonicalize();
        }
        let t_len = canon[0].frames.len();
        for s in &canon {
            if s.frames.len() != t_len {
                return Err(Error::Data("control sequences disagree on length".into()));
            }
        }
        let b = canon.len();

        // frozen VAE encode, frame by frame
        let mut lat_host: Option<ArrayD<E>> = None;
        for (bi, seq) in canon.iter().enumerate() {
            for (ti, frame) in seq.frames.iter().enumerate() {
                let z = vae.encode_image_host(fw.store, frame);
                let (c, hs, ws) = (z.shape()[0], z.shape()[1], z.shape()[2]);
                let store_arr = lat_host.get_or_insert_with(|| {
                    ArrayD::<E>::zeros(IxDyn(&[b, t_len, c, hs, ws]))
                });
                for ci in 0..c {
                    for y in 0..hs {
                        for x in 0..ws {
                            store_arr[[bi, ti, ci, y, x]] = z[[ci, y, x]];
                        }
                    }
                }
            }
        }
        let lat_host = lat_host.expect("at least one frame");
        let (hs, ws) = (lat_host.shape()[3], lat_host.shape()[4]);
        let lat = tape.leaf(lat_host);

        // per-frame metadata -> summed field embeddings -> n_md channels
        let flat_md: Vec<MetadataRecord> = canon
            .iter()
            .flat_map(|s| s.per_frame_metadata.iter().copied())
            .collect();
        let m = emb.metadata_sum(tape, fw.store, &flat_md, ranges); // [(b*t), D]
        let ch = self.md_proj.forward(fw, m); // [(b*t), n_md]
        let ch = tape.broadcast_spatial(ch, hs, ws); // [(b*t), n_md, h, w]
        let ch = tape.reshape(ch, &[b, t_len, self.n_md, hs, ws]);

        let control = tape.concat(2, &[lat, ch]);
        Ok((control, t_len))
    }

    /// Runs the trainable trunk copy over the broadcast noisy latent plus the
    /// control hint, emitting one residual per skip-inventory entry (mid
    /// last), each collapsed over the frame axis by mean.
    pub fn forward<E: Element>(
        &self,
        fw: &Fwd<'_, E>,
        z_t: Var,
        txt_per_frame: &TextContext<E>,
        c_target: Var,
        control: Var,
        t_len: usize,
    ) -> Vec<Var> {
        let tape = fw.tape;
        let zs = tape.shape(z_t);
        let (b, cl, hs, ws) = (zs[0], zs[1], zs[2], zs[3]);
        assert_eq!(cl, self.latent_channels);
        let cs = tape.shape(control);
        assert_eq!(cs[0], b, "control batch mismatch");
        assert_eq!(cs[1], t_len);
        assert_eq!(
            (cs[3], cs[4]),
            (hs, ws),
            "control latent resolution must match the noisy latent"
        );

        if self.stack_2d {
            let ctrl = tape.reshape(control, &[b, t_len * cs[2], hs, ws]);
            let h0 = tape.add(
                self.trunk.conv_in.forward(fw, z_t),
                self.hint.forward(fw, ctrl),
            );
            let taps: RefCell<Vec<Var>> = RefCell::new(Vec::new());
            let mut i = 0usize;
            let mut emit = |fw: &Fwd<'_, E>, h: Var| {
                let r = self.taps_2d[i].forward(fw, h);
                taps.borrow_mut().push(r);
                i += 1;
                h
            };
            self.trunk.down_mid(fw, h0, txt_per_frame, c_target, &mut emit);
            return taps.into_inner();
        }

        // broadcast the noisy latent across frames and add the hint
        let z_rep = tape.repeat_new_axis(z_t, 1, t_len);
        let z_rep = tape.reshape(z_rep, &[b * t_len, cl, hs, ws]);
        let ctrl_bt = tape.reshape(control, &[b * t_len, cs[2], hs, ws]);
        let h0 = tape.add(
            self.trunk.conv_in.forward(fw, z_rep),
            self.hint.forward(fw, ctrl_bt),
        );

        let c_rep = tape.repeat_new_axis(c_target, 1, t_len);
        let dim = tape.shape(c_target)[1];
        let c_rep = tape.reshape(c_rep, &[b * t_len, dim]);

        let taps: RefCell<Vec<Var>> = RefCell::new(Vec::new());
        let mut i = 0usize;
        let mut emit = |fw: &Fwd<'_, E>, h: Var| {
            let ht = self.temporal[i].forward(fw, h, t_len);
            let shape = tape.shape(ht);
            let x5 = tape.reshape(ht, &[b, t_len, shape[1], shape[2], shape[3]]);
            let tap = tape.temporal_conv(x5, fw.p(self.taps[i].0), fw.p(self.taps[i].1));
            let r = tape.mean_axis(tap, 1);
            taps.borrow_mut().push(r);
            i += 1;
            ht
        };
        self.trunk.down_mid(fw, h0, txt_per_frame, c_rep, &mut emit);
        let taps = taps.into_inner();
        assert_eq!(taps.len(), self.inventory.len());
        taps
    }
}
