//! Small convolutional VAE: downsamples images by `2^(levels-1)` into a
//! compact latent, decodes back to a tanh-bounded image.

use ndarray::ArrayD;
use terradiff_autograd::{Builder, Element, ParamStore, Tape, Var};

use super::blocks::{Conv2dLayer, GroupNormLayer, ResBlock};
use super::{ChannelKind, Fwd, ImageTensor};
use crate::config::DenoiserConfig;

struct EncLevel {
    res: ResBlock,
    down: Option<Conv2dLayer>,
}

struct DecLevel {
    up: Option<Conv2dLayer>,
    res: ResBlock,
}

pub struct Vae {
    enc_in: Conv2dLayer,
    enc_levels: Vec<EncLevel>,
    enc_norm: GroupNormLayer,
    mu_head: Conv2dLayer,
    logvar_head: Conv2dLayer,
    dec_in: Conv2dLayer,
    dec_bottom: ResBlock,
    dec_levels: Vec<DecLevel>,
    dec_norm: GroupNormLayer,
    dec_out: Conv2dLayer,
    pub factor: usize,
    pub latent_channels: usize,
    pub image_channels: usize,
}

impl Vae {
    pub fn build<E: Element>(b: &mut Builder<'_, E>, cfg: &DenoiserConfig) -> Self {
        let widths = &cfg.vae_widths;
        let mut s = b.scope("vae");
        let enc_in = Conv2dLayer::new(&mut s, "enc_in", cfg.image_channels, widths[0], 3, 1, 1);
        let mut enc_levels = Vec::new();
        for i in 0..widths.len() {
            let mut ls = s.scope(&format!("enc{i}"));
            let res = ResBlock::new(&mut ls, "res", widths[i], widths[i], None);
            let down = (i + 1 < widths.len())
                .then(|| Conv2dLayer::new(&mut ls, "down", widths[i], widths[i + 1], 3, 2, 1));
            enc_levels.push(EncLevel { res, down });
        }
        let top = *widths.last().unwrap();
        let enc_norm = GroupNormLayer::new(&mut s, "enc_norm", top);
        let mu_head = Conv2dLayer::new(&mut s, "mu", top, cfg.latent_channels, 3, 1, 1);
        let logvar_head = Conv2dLayer::new(&mut s, "logvar", top, cfg.latent_channels, 3, 1, 1);

        let dec_in = Conv2dLayer::new(&mut s, "dec_in", cfg.latent_channels, top, 3, 1, 1);
        let dec_bottom = {
            let mut ls = s.scope("dec_bottom");
            ResBlock::new(&mut ls, "res", top, top, None)
        };
        let mut dec_levels = Vec::new();
        for i in (0..widths.len() - 1).rev() {
            let mut ls = s.scope(&format!("dec{i}"));
            let up = Some(Conv2dLayer::new(&mut ls, "up", widths[i + 1], widths[i], 3, 1, 1));
            let res = ResBlock::new(&mut ls, "res", widths[i], widths[i], None);
            dec_levels.push(DecLevel { up, res });
        }
        let dec_norm = GroupNormLayer::new(&mut s, "dec_norm", widths[0]);
        let dec_out = Conv2dLayer::new(&mut s, "dec_out", widths[0], cfg.image_channels, 3, 1, 1);

        Vae {
            enc_in,
            enc_levels,
            enc_norm,
            mu_head,
            logvar_head,
            dec_in,
            dec_bottom,
            dec_levels,
            dec_norm,
            dec_out,
            factor: cfg.vae_factor(),
            latent_channels: cfg.latent_channels,
            image_channels: cfg.image_channels,
        }
    }

    /// Encoder posterior parameters for a `[n, c, h, w]` batch.
    pub fn encode_dist<E: Element>(&self, fw: &Fwd<'_, E>, x: Var) -> (Var, Var) {
        let shape = fw.tape.shape(x);
        assert_eq!(shape.len(), 4, "vae encode expects [n, c, h, w]");
        assert!(
            shape[2] % self.factor == 0 && shape[3] % self.factor == 0,
            "image dims {}x{} not multiples of the VAE factor {}",
            shape[2],
            shape[3],
            self.factor
        );
        let t = fw.tape;
        let mut h = self.enc_in.forward(fw, x);
        for level in &self.enc_levels {
            h = level.res.forward(fw, h, None);
            if let Some(down) = &level.down {
                h = down.forward(fw, h);
            }
        }
        h = self.enc_norm.forward(fw, h);
        h = t.silu(h);
        let mu = self.mu_head.forward(fw, h);
        let logvar = self.logvar_head.forward(fw, h);
        (mu, logvar)
    }

    /// Tanh-bounded decode of a `[n, c', h', w']` latent batch.
    pub fn decode<E: Element>(&self, fw: &Fwd<'_, E>, z: Var) -> Var {
        let t = fw.tape;
        let mut h = self.dec_in.forward(fw, z);
        h = self.dec_bottom.forward(fw, h, None);
        for level in &self.dec_levels {
            h = t.upsample_nearest_2x(h);
            if let Some(up) = &level.up {
                h = up.forward(fw, h);
            }
            h = level.res.forward(fw, h, None);
        }
        h = self.dec_norm.forward(fw, h);
        h = t.silu(h);
        h = self.dec_out.forward(fw, h);
        t.tanh(h)
    }

    /// Deterministic encode (posterior mode) outside any training graph.
    pub fn encode_mode_host<E: Element>(&self, store: &ParamStore<E>, x: &ArrayD<E>) -> ArrayD<E> {
        let tape = Tape::new();
        let fw = Fwd::new(&tape, store);
        let xv = tape.leaf(x.clone());
        let (mu, _) = self.encode_dist(&fw, xv);
        tape.value(mu)
    }

    /// Deterministic single-image encode honoring the channel tag:
    /// multispectral inputs are reduced to their visible bands first.
    pub fn encode_image_host<E: Element>(
        &self,
        store: &ParamStore<E>,
        img: &ImageTensor<E>,
    ) -> ArrayD<E> {
        let rgb = img.visible();
        debug_assert_eq!(rgb.shape()[0], self.image_channels);
        let (c, h, w) = (rgb.shape()[0], rgb.shape()[1], rgb.shape()[2]);
        let batched = rgb.into_shape_with_order(ndarray::IxDyn(&[1, c, h, w])).unwrap();
        let z = self.encode_mode_host(store, &batched);
        let zs = z.shape().to_vec();
        z.into_shape_with_order(ndarray::IxDyn(&[zs[1], zs[2], zs[3]])).unwrap()
    }

    pub fn decode_host<E: Element>(&self, store: &ParamStore<E>, z: &ArrayD<E>) -> ArrayD<E> {
        let tape = Tape::new();
        let fw = Fwd::new(&tape, store);
        let zv = tape.leaf(z.clone());
        let img = self.decode(&fw, zv);
        tape.value(img)
    }

    pub fn channel_kind_supported(&self, kind: ChannelKind) -> bool {
        matches!(kind, ChannelKind::Rgb | ChannelKind::Multispectral10)
    }
}
