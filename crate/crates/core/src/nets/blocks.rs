//! Layer building blocks shared by the VAE, the denoiser and the control
//! branch.

use ndarray::{ArrayD, IxDyn};
use terradiff_autograd::{Builder, Element, Init, ParamId, Var};

use super::Fwd;

/// Group count for GroupNorm: at most 32 groups and at least ~4 channels per
/// group, so per-channel conditioning shifts survive the mean subtraction.
pub fn norm_groups(channels: usize) -> usize {
    let mut g = (channels / 4).clamp(1, 32);
    while channels % g != 0 {
        g -= 1;
    }
    g
}

pub struct Conv2dLayer {
    w: ParamId,
    b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2dLayer {
    pub fn new<E: Element>(
        b: &mut Builder<'_, E>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let mut s = b.scope(name);
        let w = s.param("weight", &[cout, cin, k, k], Init::UniformFanIn(cin * k * k));
        let bias = s.param("bias", &[cout], Init::Zeros);
        Conv2dLayer {
            w,
            b: bias,
            stride,
            pad,
        }
    }

    /// Weights and bias start at exactly zero (residual gates).
    pub fn new_zero<E: Element>(
        b: &mut Builder<'_, E>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let mut s = b.scope(name);
        let w = s.param("weight", &[cout, cin, k, k], Init::Zeros);
        let bias = s.param("bias", &[cout], Init::Zeros);
        Conv2dLayer {
            w,
            b: bias,
            stride,
            pad,
        }
    }

    pub fn forward<E: Element>(&self, fw: &Fwd<'_, E>, x: Var) -> Var {
        fw.tape
            .conv2d(x, fw.p(self.w), fw.p(self.b), self.stride, self.pad)
    }
}

pub struct LinearLayer {
    w: ParamId,
    b: ParamId,
    pub out_dim: usize,
}

impl LinearLayer {
    pub fn new<E: Element>(b: &mut Builder<'_, E>, name: &str, din: usize, dout: usize) -> Self {
        let mut s = b.scope(name);
        let w = s.param("weight", &[dout, din], Init::UniformFanIn(din));
        let bias = s.param("bias", &[dout], Init::Zeros);
        LinearLayer {
            w,
            b: bias,
            out_dim: dout,
        }
    }

    pub fn new_zero<E: Element>(b: &mut Builder<'_, E>, name: &str, din: usize, dout: usize) -> Self {
        let mut s = b.scope(name);
        let w = s.param("weight", &[dout, din], Init::Zeros);
        let bias = s.param("bias", &[dout], Init::Zeros);
        LinearLayer {
            w,
            b: bias,
            out_dim: dout,
        }
    }

    /// Applies over the last axis of an arbitrary-rank input.
    pub fn forward<E: Element>(&self, fw: &Fwd<'_, E>, x: Var) -> Var {
        let shape = fw.tape.shape(x);
        let din = *shape.last().unwrap();
        let rows: usize = shape[..shape.len() - 1].iter().product();
        let flat = fw.tape.reshape(x, &[rows, din]);
        let y = fw.tape.linear(flat, fw.p(self.w), fw.p(self.b));
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = self.out_dim;
        fw.tape.reshape(y, &out_shape)
    }
}

pub struct GroupNormLayer {
    gamma: ParamId,
    beta: ParamId,
    groups: usize,
}

impl GroupNormLayer {
    pub fn new<E: Element>(b: &mut Builder<'_, E>, name: &str, channels: usize) -> Self {
        let mut s = b.scope(name);
        let gamma = s.param("gamma", &[channels], Init::Ones);
        let beta = s.param("beta", &[channels], Init::Zeros);
        GroupNormLayer {
            gamma,
            beta,
            groups: norm_groups(channels),
        }
    }

    pub fn forward<E: Element>(&self, fw: &Fwd<'_, E>, x: Var) -> Var {
        fw.tape
            .group_norm(x, fw.p(self.gamma), fw.p(self.beta), self.groups, 1e-5)
    }
}

pub struct LayerNormLayer {
    gamma: ParamId,
    beta: ParamId,
}

impl LayerNormLayer {
    pub fn new<E: Element>(b: &mut Builder<'_, E>, name: &str, dim: usize) -> Self {
        let mut s = b.scope(name);
        let gamma = s.param("gamma", &[dim], Init::Ones);
        let beta = s.param("beta", &[dim], Init::Zeros);
        LayerNormLayer { gamma, beta }
    }

    pub fn forward<E: Element>(&self, fw: &Fwd<'_, E>, x: Var) -> Var {
        fw.tape
            .layer_norm(x, fw.p(self.gamma), fw.p(self.beta), 1e-5)
    }
}

/// Residual block with optional conditioning-vector injection on the
/// normalization pathway.
pub struct ResBlock {
    gn1: GroupNormLayer,
    conv1: Conv2dLayer,
    cond: Option<LinearLayer>,
    gn2: GroupNormLayer,
    conv2: Conv2dLayer,
    skip: Option<Conv2dLayer>,
}

impl ResBlock {
    pub fn new<E: Element>(
        b: &mut Builder<'_, E>,
        name: &str,
        cin: usize,
        cout: usize,
        cond_dim: Option<usize>,
    ) -> Self {
        let mut s = b.scope(name);
        let gn1 = GroupNormLayer::new(&mut s, "norm1", cin);
        let conv1 = Conv2dLayer::new(&mut s, "conv1", cin, cout, 3, 1, 1);
        let cond = cond_dim.map(|d| LinearLayer::new(&mut s, "cond_proj", d, cout));
        let gn2 = GroupNormLayer::new(&mut s, "norm2", cout);
        let conv2 = Conv2dLayer::new(&mut s, "conv2", cout, cout, 3, 1, 1);
        let skip = (cin != cout).then(|| Conv2dLayer::new(&mut s, "skip", cin, cout, 1, 1, 0));
        ResBlock {
            gn1,
            conv1,
            cond,
            gn2,
            conv2,
            skip,
        }
    }

    pub fn forward<E: Element>(&self, fw: &Fwd<'_, E>, x: Var, c: Option<Var>) -> Var {
        let t = fw.tape;
        let mut h = self.gn1.forward(fw, x);
        h = t.silu(h);
        h = self.conv1.forward(fw, h);
        if let (Some(proj), Some(cv)) = (&self.cond, c) {
            let emb = proj.forward(fw, t.silu(cv));
            h = t.add_per_sample_ch(h, emb);
        }
        let mut h2 = self.gn2.forward(fw, h);
        h2 = t.silu(h2);
        h2 = self.conv2.forward(fw, h2);
        let sk = match &self.skip {
            Some(s) => s.forward(fw, x),
            None => x,
        };
        t.add(sk, h2)
    }
}

/// Additive attention mask (`0` keep, `-1e9` drop), shaped `[b, 1, l]` and
/// tiled per head.
pub fn attention_mask<E: Element>(mask: &[Vec<bool>], heads: usize) -> Option<ArrayD<E>> {
    if mask.iter().all(|row| row.iter().all(|&m| m)) {
        return None;
    }
    let (b, l) = (mask.len(), mask[0].len());
    let mut out = ArrayD::<E>::zeros(IxDyn(&[b * heads, 1, l]));
    let neg = E::from_f64(-1e9);
    for (bi, row) in mask.iter().enumerate() {
        for (li, &keep) in row.iter().enumerate() {
            if !keep {
                for h in 0..heads {
                    out[[bi * heads + h, 0, li]] = neg;
                }
            }
        }
    }
    Some(out)
}

/// Multi-head attention over `[b, l, dim]` sequences; `kv` may come from a
/// different source (cross-attention) with its own feature width.
pub struct MultiHeadAttention {
    q: LinearLayer,
    k: LinearLayer,
    v: LinearLayer,
    o: LinearLayer,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new<E: Element>(
        b: &mut Builder<'_, E>,
        name: &str,
        dim: usize,
        kv_dim: usize,
        heads: usize,
    ) -> Self {
        assert_eq!(dim % heads, 0, "attention dim must divide heads");
        let mut s = b.scope(name);
        let q = LinearLayer::new(&mut s, "q", dim, dim);
        let k = LinearLayer::new(&mut s, "k", kv_dim, dim);
        let v = LinearLayer::new(&mut s, "v", kv_dim, dim);
        let o = LinearLayer::new(&mut s, "out", dim, dim);
        MultiHeadAttention { q, k, v, o, heads, dim }
    }

    fn split_heads<E: Element>(&self, fw: &Fwd<'_, E>, x: Var) -> Var {
        let shape = fw.tape.shape(x); // [b, l, dim]
        let (b, l) = (shape[0], shape[1]);
        let dh = self.dim / self.heads;
        let x = fw.tape.reshape(x, &[b, l, self.heads, dh]);
        let x = fw.tape.permute(x, &[0, 2, 1, 3]);
        fw.tape.reshape(x, &[b * self.heads, l, dh])
    }

    pub fn forward<E: Element>(
        &self,
        fw: &Fwd<'_, E>,
        x: Var,
        kv: Var,
        mask: Option<&ArrayD<E>>,
    ) -> Var {
        let t = fw.tape;
        let shape = t.shape(x);
        let (b, lq) = (shape[0], shape[1]);
        let dh = self.dim / self.heads;
        let q = self.split_heads(fw, self.q.forward(fw, x));
        let k = self.split_heads(fw, self.k.forward(fw, kv));
        let v = self.split_heads(fw, self.v.forward(fw, kv));
        let mut att = t.bmm_nt(q, k);
        att = t.scale(att, 1.0 / (dh as f64).sqrt());
        if let Some(m) = mask {
            att = t.add_const(att, m);
        }
        let att = t.softmax_last(att);
        let out = t.bmm(att, v); // [b*h, lq, dh]
        let out = t.reshape(out, &[b, self.heads, lq, dh]);
        let out = t.permute(out, &[0, 2, 1, 3]);
        let out = t.reshape(out, &[b, lq, self.dim]);
        self.o.forward(fw, out)
    }
}

/// Text conditioning entering a forward pass: token features plus the
/// per-head additive key mask.
pub struct TextContext<E: Element> {
    pub tokens: Var,
    pub mask: Option<ArrayD<E>>,
}

/// Spatial transformer: self-attention, text cross-attention and a feed
/// forward, applied token-wise over flattened spatial positions.
pub struct SpatialTransformer {
    gn: GroupNormLayer,
    proj_in: LinearLayer,
    ln1: LayerNormLayer,
    self_attn: MultiHeadAttention,
    ln2: LayerNormLayer,
    cross_attn: MultiHeadAttention,
    ln3: LayerNormLayer,
    ff1: LinearLayer,
    ff2: LinearLayer,
    proj_out: LinearLayer,
}

impl SpatialTransformer {
    pub fn new<E: Element>(
        b: &mut Builder<'_, E>,
        name: &str,
        channels: usize,
        txt_dim: usize,
        heads: usize,
    ) -> Self {
        let mut s = b.scope(name);
        SpatialTransformer {
            gn: GroupNormLayer::new(&mut s, "norm", channels),
            proj_in: LinearLayer::new(&mut s, "proj_in", channels, channels),
            ln1: LayerNormLayer::new(&mut s, "ln1", channels),
            self_attn: MultiHeadAttention::new(&mut s, "self_attn", channels, channels, heads),
            ln2: LayerNormLayer::new(&mut s, "ln2", channels),
            cross_attn: MultiHeadAttention::new(&mut s, "cross_attn", channels, txt_dim, heads),
            ln3: LayerNormLayer::new(&mut s, "ln3", channels),
            ff1: LinearLayer::new(&mut s, "ff1", channels, channels * 4),
            ff2: LinearLayer::new(&mut s, "ff2", channels * 4, channels),
            proj_out: LinearLayer::new(&mut s, "proj_out", channels, channels),
        }
    }

    pub fn forward<E: Element>(&self, fw: &Fwd<'_, E>, x: Var, txt: &TextContext<E>) -> Var {
        let t = fw.tape;
        let shape = t.shape(x); // [b, c, h, w]
        let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let residual = x;
        let mut s = self.gn.forward(fw, x);
        s = t.reshape(s, &[b, c, h * w]);
        s = t.permute(s, &[0, 2, 1]); // [b, hw, c]
        s = self.proj_in.forward(fw, s);

        let n1 = self.ln1.forward(fw, s);
        let sa = self.self_attn.forward(fw, n1, n1, None);
        s = t.add(s, sa);

        let n2 = self.ln2.forward(fw, s);
        let ca = self
            .cross_attn
            .forward(fw, n2, txt.tokens, txt.mask.as_ref());
        s = t.add(s, ca);

        let n3 = self.ln3.forward(fw, s);
        let ff = self.ff2.forward(fw, t.silu(self.ff1.forward(fw, n3)));
        s = t.add(s, ff);

        s = self.proj_out.forward(fw, s);
        s = t.permute(s, &[0, 2, 1]);
        s = t.reshape(s, &[b, c, h, w]);
        t.add(residual, s)
    }
}
