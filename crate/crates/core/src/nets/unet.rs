//! UNet denoiser over latents: conditioning vector added into every residual
//! block, text cross-attention at configured resolutions, and decoder skips
//! that accept additive residuals from a control branch.

use std::cell::RefCell;

use terradiff_autograd::{Builder, Element, Var};

use super::blocks::{Conv2dLayer, GroupNormLayer, ResBlock, SpatialTransformer, TextContext};
use super::Fwd;
use crate::config::DenoiserConfig;

struct BlockUnit {
    res: ResBlock,
    attn: Option<SpatialTransformer>,
}

struct DownLevel {
    blocks: Vec<BlockUnit>,
    down: Option<Conv2dLayer>,
}

/// Shared down+mid structure: the base denoiser walks it once per forward,
/// and the control branch keeps a trainable copy of the same shape.
pub struct Trunk {
    pub(crate) conv_in: Conv2dLayer,
    downs: Vec<DownLevel>,
    mid1: ResBlock,
    mid_attn: Option<SpatialTransformer>,
    mid2: ResBlock,
}

/// Channel width and spatial resolution at each emission point (the skip
/// inventory), mid output last.
pub fn skip_inventory(cfg: &DenoiserConfig) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut res = cfg.latent_size();
    let widths: Vec<usize> = cfg.channel_mults.iter().map(|m| cfg.base_width * m).collect();
    out.push((widths[0], res)); // conv_in
    for (i, &w) in widths.iter().enumerate() {
        for _ in 0..cfg.res_blocks {
            out.push((w, res));
        }
        if i + 1 < widths.len() {
            res /= 2;
            out.push((w, res));
        }
    }
    out.push((*widths.last().unwrap(), res)); // mid
    out
}

impl Trunk {
    pub fn build<E: Element>(b: &mut Builder<'_, E>, cfg: &DenoiserConfig) -> Self {
        let widths: Vec<usize> = cfg.channel_mults.iter().map(|m| cfg.base_width * m).collect();
        let conv_in = Conv2dLayer::new(b, "conv_in", cfg.latent_channels, widths[0], 3, 1, 1);
        let mut downs = Vec::new();
        let mut res_px = cfg.latent_size();
        let mut prev_w = widths[0];
        for (i, &w) in widths.iter().enumerate() {
            let mut ls = b.scope(&format!("down{i}"));
            let mut blocks = Vec::new();
            for j in 0..cfg.res_blocks {
                let mut bs = ls.scope(&format!("block{j}"));
                let res = ResBlock::new(&mut bs, "res", prev_w, w, Some(cfg.cond_dim));
                prev_w = w;
                let attn = cfg
                    .attention_resolutions
                    .contains(&res_px)
                    .then(|| SpatialTransformer::new(&mut bs, "attn", w, cfg.txt_dim, cfg.heads));
                blocks.push(BlockUnit { res, attn });
            }
            let down = (i + 1 < widths.len()).then(|| {
                res_px /= 2;
                Conv2dLayer::new(&mut ls, "down", w, w, 3, 2, 1)
            });
            downs.push(DownLevel { blocks, down });
        }
        let top = *widths.last().unwrap();
        let mut ms = b.scope("mid");
        let mid1 = ResBlock::new(&mut ms, "res1", top, top, Some(cfg.cond_dim));
        let mid_attn = cfg
            .mid_attention
            .then(|| SpatialTransformer::new(&mut ms, "attn", top, cfg.txt_dim, cfg.heads));
        let mid2 = ResBlock::new(&mut ms, "res2", top, top, Some(cfg.cond_dim));
        Trunk {
            conv_in,
            downs,
            mid1,
            mid_attn,
            mid2,
        }
    }

    /// Walks the down path and mid block starting from `h0` (the conv_in
    /// output, possibly with a control hint added). `emit` runs at every
    /// skip-emission point, mid output included, and returns the features the
    /// walk continues with.
    pub fn down_mid<E: Element, F>(
        &self,
        fw: &Fwd<'_, E>,
        h0: Var,
        txt: &TextContext<E>,
        c: Var,
        emit: &mut F,
    ) -> Var
    where
        F: FnMut(&Fwd<'_, E>, Var) -> Var,
    {
        let mut h = emit(fw, h0);
        for level in &self.downs {
            for unit in &level.blocks {
                h = unit.res.forward(fw, h, Some(c));
                if let Some(attn) = &unit.attn {
                    h = attn.forward(fw, h, txt);
                }
                h = emit(fw, h);
            }
            if let Some(down) = &level.down {
                h = down.forward(fw, h);
                h = emit(fw, h);
            }
        }
        h = self.mid1.forward(fw, h, Some(c));
        if let Some(attn) = &self.mid_attn {
            h = attn.forward(fw, h, txt);
        }
        h = self.mid2.forward(fw, h, Some(c));
        emit(fw, h)
    }
}

struct UpLevel {
    blocks: Vec<BlockUnit>,
    upsample: Option<Conv2dLayer>,
}

pub struct UNet {
    pub trunk: Trunk,
    ups: Vec<UpLevel>,
    out_norm: GroupNormLayer,
    out_conv: Conv2dLayer,
    cfg: DenoiserConfig,
}

impl UNet {
    pub fn build<E: Element>(b: &mut Builder<'_, E>, cfg: &DenoiserConfig) -> Self {
        let mut s = b.scope("unet");
        let trunk = Trunk::build(&mut s, cfg);

        let widths: Vec<usize> = cfg.channel_mults.iter().map(|m| cfg.base_width * m).collect();
        // skip channels consumed by the decoder, in pop order
        let mut skip_ch: Vec<usize> = skip_inventory(cfg)
            .iter()
            .map(|&(c, _)| c)
            .collect();
        skip_ch.pop(); // mid entry is not a decoder skip

        let mut ups = Vec::new();
        let mut res_px = cfg.latent_size() >> (widths.len() - 1);
        let mut h_width = *widths.last().unwrap();
        for (i, &w) in widths.iter().enumerate().rev() {
            let mut ls = s.scope(&format!("up{i}"));
            let mut blocks = Vec::new();
            for j in 0..cfg.res_blocks + 1 {
                let skip = skip_ch.pop().expect("skip inventory exhausted");
                let mut bs = ls.scope(&format!("block{j}"));
                let res = ResBlock::new(&mut bs, "res", h_width + skip, w, Some(cfg.cond_dim));
                h_width = w;
                let attn = cfg
                    .attention_resolutions
                    .contains(&res_px)
                    .then(|| SpatialTransformer::new(&mut bs, "attn", w, cfg.txt_dim, cfg.heads));
                blocks.push(BlockUnit { res, attn });
            }
            let upsample = (i > 0).then(|| {
                res_px *= 2;
                Conv2dLayer::new(&mut ls, "up", w, w, 3, 1, 1)
            });
            ups.push(UpLevel { blocks, upsample });
        }
        assert!(skip_ch.is_empty(), "decoder must consume every skip");

        let out_norm = GroupNormLayer::new(&mut s, "out_norm", widths[0]);
        // zero-initialized output head: the first training step sees a zero
        // prediction, and the iteration-0 loss equals E||target||^2
        let out_conv =
            Conv2dLayer::new_zero(&mut s, "out_conv", widths[0], cfg.latent_channels, 3, 1, 1);

        UNet {
            trunk,
            ups,
            out_norm,
            out_conv,
            cfg: cfg.clone(),
        }
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.cfg
    }

    /// Full denoiser pass. `residuals`, when present, must match the skip
    /// inventory (mid last) and are added to the decoder-side skips.
    pub fn forward<E: Element>(
        &self,
        fw: &Fwd<'_, E>,
        z_t: Var,
        txt: &TextContext<E>,
        c: Var,
        residuals: Option<&[Var]>,
    ) -> Var {
        let t = fw.tape;
        let h0 = self.trunk.conv_in.forward(fw, z_t);

        let emitted: RefCell<Vec<Var>> = RefCell::new(Vec::new());
        let mut collect = |_fw: &Fwd<'_, E>, h: Var| {
            emitted.borrow_mut().push(h);
            h
        };
        let mut h = self.trunk.down_mid(fw, h0, txt, c, &mut collect);
        let mut skips = emitted.into_inner();
        skips.pop(); // the mid emission is `h` itself

        if let Some(res) = residuals {
            assert_eq!(
                res.len(),
                skips.len() + 1,
                "residual count must match the skip inventory (mid last)"
            );
            for (i, skip) in skips.iter_mut().enumerate() {
                assert_eq!(
                    t.shape(*skip),
                    t.shape(res[i]),
                    "residual {i} shape mismatch"
                );
                *skip = t.add(*skip, res[i]);
            }
            h = t.add(h, *res.last().unwrap());
        }

        for level in &self.ups {
            for unit in &level.blocks {
                let skip = skips.pop().expect("skip underflow");
                let cat = t.concat(1, &[h, skip]);
                h = unit.res.forward(fw, cat, Some(c));
                if let Some(attn) = &unit.attn {
                    h = attn.forward(fw, h, txt);
                }
            }
            if let Some(up) = &level.upsample {
                h = t.upsample_nearest_2x(h);
                h = up.forward(fw, h);
            }
        }
        assert!(skips.is_empty());

        h = self.out_norm.forward(fw, h);
        h = t.silu(h);
        self.out_conv.forward(fw, h)
    }
}
