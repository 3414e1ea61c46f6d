//! Scale-reduced networks: convolutional VAE, hash-vocabulary text encoder,
//! and the UNet denoiser with cross-attention and additive conditioning.

pub mod blocks;
pub mod text;
pub mod unet;
pub mod vae;

pub use text::{TextEmbedding, TextEncoder};
pub use unet::UNet;
pub use vae::Vae;

use ndarray::ArrayD;
use terradiff_autograd::{Element, ParamId, ParamStore, Tape, Var};

/// Forward-pass context: the tape being recorded plus the parameter store.
pub struct Fwd<'a, E: Element> {
    pub tape: &'a Tape<E>,
    pub store: &'a ParamStore<E>,
}

impl<'a, E: Element> Fwd<'a, E> {
    pub fn new(tape: &'a Tape<E>, store: &'a ParamStore<E>) -> Self {
        Fwd { tape, store }
    }

    #[inline]
    pub fn p(&self, id: ParamId) -> Var {
        self.tape.param(self.store, id)
    }
}

/// Channel semantics of an image tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ChannelKind {
    Rgb,
    /// Ten retained Sentinel-2 bands, visible bands first (B2, B3, B4, ...).
    Multispectral10,
}

/// A `[c, h, w]` image in `[-1, 1]` with its channel semantics.
#[derive(Clone, Debug)]
pub struct ImageTensor<E: Element> {
    pub data: ArrayD<E>,
    pub kind: ChannelKind,
}

impl<E: Element> ImageTensor<E> {
    pub fn rgb(data: ArrayD<E>) -> Self {
        assert_eq!(data.ndim(), 3);
        ImageTensor {
            data,
            kind: ChannelKind::Rgb,
        }
    }

    pub fn multispectral(data: ArrayD<E>) -> Self {
        assert_eq!(data.ndim(), 3);
        assert_eq!(data.shape()[0], 10, "multispectral tensors carry 10 bands");
        ImageTensor {
            data,
            kind: ChannelKind::Multispectral10,
        }
    }

    /// Visible-band view: RGB images pass through; multispectral images are
    /// reduced to their (B4, B3, B2) = (r, g, b) bands.
    pub fn visible(&self) -> ArrayD<E> {
        match self.kind {
            ChannelKind::Rgb => self.data.clone(),
            ChannelKind::Multispectral10 => {
                let (h, w) = (self.data.shape()[1], self.data.shape()[2]);
                let mut out = ArrayD::<E>::zeros(ndarray::IxDyn(&[3, h, w]));
                // band order after the B1/B9/B10 drop: B2, B3, B4, ...
                for (dst, src) in [(0usize, 2usize), (1, 1), (2, 0)] {
                    for y in 0..h {
                        for x in 0..w {
                            out[[dst, y, x]] = self.data[[src, y, x]];
                        }
                    }
                }
                out
            }
        }
    }
}
