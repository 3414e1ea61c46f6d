//! The full model bundle for a run: parameter store, VAE, text encoder,
//! conditioning embedders, denoiser, and (for control tasks) the control
//! branch, built deterministically from the run seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use terradiff_autograd::{Builder, ParamStore};

use crate::config::RunConfig;
use crate::control::ControlBranch;
use crate::diffusion::NoiseSchedule;
use crate::metadata::{EmbedderSet, MetadataRanges};
use crate::nets::{TextEncoder, UNet, Vae};
use crate::Result;

pub struct Models {
    pub store: ParamStore<f32>,
    pub vae: Vae,
    pub text: TextEncoder,
    pub embedders: EmbedderSet,
    pub unet: UNet,
    pub control: Option<ControlBranch>,
    pub schedule: NoiseSchedule,
    pub ranges: MetadataRanges,
    pub cfg: RunConfig,
}

/// Builds every network from `cfg.seed`. The control branch is constructed
/// after the base networks, so base initialization is identical whether or
/// not a control branch exists.
pub fn build_models(cfg: &RunConfig, with_control: bool) -> Result<Models> {
    cfg.validate()?;
    let schedule = NoiseSchedule::build(&cfg.schedule)?;
    let mut store = ParamStore::<f32>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut builder = Builder::new(&mut store, &mut rng);

    let vae = Vae::build(&mut builder, &cfg.model);
    let text = TextEncoder::build(&mut builder, &cfg.model);
    let embedders = EmbedderSet::build(&mut builder, cfg.model.proj_dim, cfg.model.cond_dim);
    let unet = UNet::build(&mut builder, &cfg.model);
    let control = with_control.then(|| ControlBranch::build(&mut builder, &cfg.model, &cfg.control));

    // the text stub stands in for a pretrained encoder and is never trained
    store.set_trainable_prefix("text.", false);

    Ok(Models {
        store,
        vae,
        text,
        embedders,
        unet,
        control,
        schedule,
        ranges: MetadataRanges::default(),
        cfg: cfg.clone(),
    })
}
