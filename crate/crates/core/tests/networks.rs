//! Network contracts: shapes, determinism, conditioning pathways, and
//! autodiff-vs-finite-difference checks for the denoiser in both precisions.

use ndarray::{ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use terradiff_autograd::check::{numeric_grad, rel_err};
use terradiff_autograd::{randn, Builder, Element, ParamStore, Tape};
use terradiff_core::config::{DenoiserConfig, RunConfig};
use terradiff_core::diffusion::{add_noise, ddim_step, PredictionMode};
use terradiff_core::metadata::{EmbedderSet, MetadataRanges, MetadataRecord};
use terradiff_core::nets::{Fwd, TextEncoder, UNet, Vae};
use terradiff_core::train::build_models;

fn tiny_model_config() -> DenoiserConfig {
    DenoiserConfig {
        image_size: 16,
        image_channels: 3,
        latent_channels: 4,
        vae_widths: vec![6, 8],
        base_width: 8,
        channel_mults: vec![1, 2],
        attention_resolutions: vec![8, 4],
        res_blocks: 1,
        mid_attention: true,
        heads: 2,
        cond_dim: 16,
        proj_dim: 8,
        txt_dim: 8,
        txt_len: 6,
        txt_layers: 1,
        vocab_size: 64,
    }
}

struct TinyNets<E: Element> {
    store: ParamStore<E>,
    vae: Vae,
    text: TextEncoder,
    emb: EmbedderSet,
    unet: UNet,
    cfg: DenoiserConfig,
}

fn tiny_nets<E: Element>(seed: u64) -> TinyNets<E> {
    let cfg = tiny_model_config();
    let mut store = ParamStore::<E>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = Builder::new(&mut store, &mut rng);
    let vae = Vae::build(&mut b, &cfg);
    let text = TextEncoder::build(&mut b, &cfg);
    let emb = EmbedderSet::build(&mut b, cfg.proj_dim, cfg.cond_dim);
    let unet = UNet::build(&mut b, &cfg);
    TinyNets {
        store,
        vae,
        text,
        emb,
        unet,
        cfg,
    }
}

fn md() -> MetadataRecord {
    MetadataRecord {
        lon: 10.0,
        lat: 45.0,
        gsd: 1.0,
        cloud_cover: 0.05,
        year: 2018.0,
        month: 9.0,
        day: 3.0,
    }
}

#[test]
fn vae_shapes_and_determinism() {
    let cfg = RunConfig::default();
    let models = build_models(&cfg, false).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x: ArrayD<f32> = randn(&[1, 3, 64, 64], &mut rng);
    let z = models.vae.encode_mode_host(&models.store, &x);
    assert_eq!(z.shape(), &[1, 4, 8, 8]);
    let z2 = models.vae.encode_mode_host(&models.store, &x);
    assert!(z.iter().zip(z2.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));

    let img = models.vae.decode_host(&models.store, &z);
    assert_eq!(img.shape(), &[1, 3, 64, 64]);
    assert!(img.iter().all(|v| (-1.0..=1.0).contains(v)));
    let img2 = models.vae.decode_host(&models.store, &z);
    assert!(img.iter().zip(img2.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn text_encoder_contracts() {
    let nets = tiny_nets::<f32>(5);
    let null_a = nets.text.encode(&nets.store, &[String::new()]);
    let null_b = nets.text.encode(&nets.store, &[String::new()]);
    assert!(null_a
        .tokens
        .iter()
        .zip(null_b.tokens.iter())
        .all(|(x, y)| x.to_bits() == y.to_bits()));
    // only the leading BOS position is unmasked for the null caption
    assert!(null_a.mask[0][0]);
    assert!(null_a.mask[0][1..].iter().all(|&m| !m));

    let a1 = nets.text.encode(&nets.store, &["a fmow satellite image".into()]);
    let a2 = nets.text.encode(&nets.store, &["a fmow satellite image".into()]);
    assert!(a1
        .tokens
        .iter()
        .zip(a2.tokens.iter())
        .all(|(x, y)| x.to_bits() == y.to_bits()));

    let b = nets.text.encode(&nets.store, &["a satlas satellite image".into()]);
    // token position 2 (after BOS + "a") holds the differing word
    let l = 2usize;
    let d = nets.cfg.txt_dim;
    let mut differs = false;
    for di in 0..d {
        if a1.tokens[[0, l, di]] != b.tokens[[0, l, di]] {
            differs = true;
        }
    }
    assert!(differs, "differing word must change its token position");
}

#[test]
fn denoiser_zero_residuals_are_identity_and_shapes_hold() {
    let mut nets = tiny_nets::<f32>(7);
    // open the zero-initialized output head so the probe sees the interior
    let out_w = nets.store.id("unet.out_conv.weight").unwrap();
    nets.store
        .value_mut(out_w)
        .iter_mut()
        .enumerate()
        .for_each(|(i, v)| *v = ((i % 9) as f32 - 4.0) * 0.02);
    let nets = nets;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let z: ArrayD<f32> = randn(&[2, 4, 8, 8], &mut rng);
    let txt = nets.text.encode(&nets.store, &["a synthetic satellite image".into(), String::new()]);

    let run = |residuals: bool, dc: f32| -> ArrayD<f32> {
        let tape = Tape::<f32>::new();
        let fw = Fwd::new(&tape, &nets.store);
        let txt_ctx = txt.context(&tape, nets.cfg.heads);
        let mut c = nets.emb.combine(
            &tape,
            &nets.store,
            &[md(), md()],
            &[100, 900],
            &MetadataRanges::default(),
            None,
        );
        if dc != 0.0 {
            let delta = ArrayD::<f32>::from_elem(IxDyn(&[2, nets.cfg.cond_dim]), dc);
            c = tape.add_const(c, &delta);
        }
        let zv = tape.leaf(z.clone());
        let res_vars = residuals.then(|| {
            terradiff_core::nets::unet::skip_inventory(&nets.cfg)
                .iter()
                .map(|&(ch, r)| tape.leaf(ArrayD::<f32>::zeros(IxDyn(&[2, ch, r, r]))))
                .collect::<Vec<_>>()
        });
        let pred = nets.unet.forward(&fw, zv, &txt_ctx, c, res_vars.as_deref());
        tape.value(pred)
    };

    let without = run(false, 0.0);
    assert_eq!(without.shape(), z.shape());
    let with_zeros = run(true, 0.0);
    for (a, b) in without.iter().zip(with_zeros.iter()) {
        assert!((a - b).abs() < 1e-6);
    }

    // perturbing the conditioning vector must change the output
    let perturbed = run(false, 0.05);
    let max_diff = without
        .iter()
        .zip(perturbed.iter())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f32, f32::max);
    assert!(max_diff > 0.0, "conditioning pathway is degenerate");
}

#[test]
fn forward_passes_are_bit_deterministic() {
    let a = tiny_nets::<f32>(21);
    let b = tiny_nets::<f32>(21);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let z: ArrayD<f32> = randn(&[1, 4, 8, 8], &mut rng);
    let run = |nets: &TinyNets<f32>| -> ArrayD<f32> {
        let txt = nets.text.encode(&nets.store, &["deterministic".into()]);
        let tape = Tape::<f32>::new();
        let fw = Fwd::new(&tape, &nets.store);
        let txt_ctx = txt.context(&tape, nets.cfg.heads);
        let c = nets.emb.combine(
            &tape,
            &nets.store,
            &[md()],
            &[500],
            &MetadataRanges::default(),
            None,
        );
        tape.value(nets.unet.forward(&fw, tape.leaf(z.clone()), &txt_ctx, c, None))
    };
    let ya = run(&a);
    let yb = run(&b);
    assert!(ya.iter().zip(yb.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn shape_closure_across_configs() {
    for (cfg, label) in [
        (RunConfig::default(), "desk"),
        (
            RunConfig {
                model: tiny_model_config(),
                ..RunConfig::default()
            },
            "tiny",
        ),
    ] {
        let models = build_models(&cfg, false).unwrap();
        let m = &cfg.model;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x: ArrayD<f32> = randn(&[1, m.image_channels, m.image_size, m.image_size], &mut rng);
        let z0 = models.vae.encode_mode_host(&models.store, &x);
        let eps: ArrayD<f32> = randn(z0.shape(), &mut rng);
        let z_t = add_noise(&z0, 500, &eps, &models.schedule);
        let txt = models.text.encode(&models.store, &["closure".into()]);
        let pred = {
            let tape = Tape::<f32>::new();
            let fw = Fwd::new(&tape, &models.store);
            let txt_ctx = txt.context(&tape, m.heads);
            let c = models.embedders.combine(
                &tape,
                &models.store,
                &[md()],
                &[500],
                &models.ranges,
                None,
            );
            tape.value(models.unet.forward(&fw, tape.leaf(z_t.clone()), &txt_ctx, c, None))
        };
        assert_eq!(pred.shape(), z_t.shape(), "{label}");
        let z_prev = ddim_step(
            &z_t,
            &pred,
            500,
            0,
            PredictionMode::Epsilon,
            &models.schedule,
            0.0,
            None,
        );
        let img = models.vae.decode_host(&models.store, &z_prev);
        assert_eq!(
            img.shape(),
            &[1, m.image_channels, m.image_size, m.image_size],
            "{label}"
        );
    }
}

fn denoiser_loss<E: Element>(nets: &TinyNets<E>, store: &ParamStore<E>) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let z: ArrayD<E> = randn(&[1, 4, 8, 8], &mut rng);
    let target: ArrayD<E> = randn(&[1, 4, 8, 8], &mut rng);
    let txt = nets.text.encode(store, &["gradient check".into()]);
    let tape = Tape::<E>::new();
    let fw = Fwd::new(&tape, store);
    let txt_ctx = txt.context(&tape, nets.cfg.heads);
    let c = nets.emb.combine(
        &tape,
        store,
        &[md()],
        &[321],
        &MetadataRanges::default(),
        None,
    );
    let pred = nets.unet.forward(&fw, tape.leaf(z), &txt_ctx, c, None);
    let loss = tape.mse(pred, tape.leaf(target));
    Element::to_f64(tape.scalar(loss))
}

fn denoiser_grad_slice_check<E: Element>(tol: f64, fd_eps: f64, elementwise: bool) {
    let mut nets = tiny_nets::<E>(31);
    // make the zero-initialized output head informative
    let out_w = nets.store.id("unet.out_conv.weight").unwrap();
    nets.store
        .value_mut(out_w)
        .iter_mut()
        .enumerate()
        .for_each(|(i, v)| *v = E::from_f64(((i % 9) as f64 - 4.0) * 0.02));

    // the store moves out so the loss closure can borrow the frozen layer
    // definitions while finite differences mutate parameters
    let mut store = std::mem::take(&mut nets.store);

    // a 10-parameter slice spread across the denoiser; within each tensor the
    // largest-magnitude gradient element keeps finite differences above the
    // working-precision noise floor
    let names = [
        "unet.conv_in.weight",
        "unet.down0.block0.res.conv1.weight",
        "unet.down0.block0.attn.self_attn.q.weight",
        "unet.mid.res1.cond_proj.weight",
        "unet.mid.attn.cross_attn.k.weight",
        "unet.up0.block1.res.conv2.weight",
        "unet.out_conv.weight",
        "unet.down1.block0.res.norm1.gamma",
        "unet.up1.block0.res.skip.weight",
        "unet.mid.res2.conv1.bias",
    ];

    // analytic gradients
    let slice: Vec<(String, usize, f64)> = {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let z: ArrayD<E> = randn(&[1, 4, 8, 8], &mut rng);
        let target: ArrayD<E> = randn(&[1, 4, 8, 8], &mut rng);
        let txt = nets.text.encode(&store, &["gradient check".into()]);
        let tape = Tape::<E>::new();
        let fw = Fwd::new(&tape, &store);
        let txt_ctx = txt.context(&tape, nets.cfg.heads);
        let c = nets.emb.combine(&tape, &store, &[md()], &[321], &MetadataRanges::default(), None);
        let pred = nets.unet.forward(&fw, tape.leaf(z), &txt_ctx, c, None);
        let loss = tape.mse(pred, tape.leaf(target));
        let grads = tape.backward(loss);
        names
            .iter()
            .map(|name| {
                let id = store.id(name).unwrap_or_else(|| panic!("missing param {name}"));
                let g = grads
                    .of_param(id)
                    .unwrap_or_else(|| panic!("no grad for {name}"));
                let (flat, val) = g
                    .as_slice()
                    .unwrap()
                    .iter()
                    .enumerate()
                    .max_by(|(_, a), (_, b)| {
                        a.abs().partial_cmp(&b.abs()).unwrap()
                    })
                    .unwrap();
                (name.to_string(), flat, Element::to_f64(*val))
            })
            .collect()
    };

    if elementwise {
        for (name, flat, analytic) in &slice {
            assert!(
                analytic.abs() > 1e-10,
                "{name}: analytic gradient vanished; pick a different slice"
            );
            let id = store.id(name).unwrap();
            let num = numeric_grad(&mut store, id, *flat, fd_eps, &|s| denoiser_loss(&nets, s));
            let err = rel_err(*analytic, num);
            assert!(
                err < tol,
                "{name}[{flat}]: analytic {analytic} vs numeric {num} (rel err {err})"
            );
        }
    } else {
        // joint central difference along the slice's gradient direction,
        // which keeps the signal well above the working-precision noise
        let norm: f64 = slice.iter().map(|(_, _, g)| g * g).sum::<f64>().sqrt();
        assert!(norm > 1e-10);
        let direction: Vec<f64> = slice.iter().map(|(_, _, g)| g / norm).collect();
        fn shift<E: Element>(
            store: &mut ParamStore<E>,
            slice: &[(String, usize, f64)],
            direction: &[f64],
            s: f64,
        ) {
            for ((name, flat, _), d) in slice.iter().zip(direction) {
                let id = store.id(name).unwrap();
                let v = &mut store.value_mut(id).as_slice_mut().unwrap()[*flat];
                *v = *v + E::from_f64(s * d);
            }
        }
        shift(&mut store, &slice, &direction, fd_eps);
        let plus = denoiser_loss(&nets, &store);
        shift(&mut store, &slice, &direction, -2.0 * fd_eps);
        let minus = denoiser_loss(&nets, &store);
        shift(&mut store, &slice, &direction, fd_eps);
        let numeric = (plus - minus) / (2.0 * fd_eps);
        let err = rel_err(norm, numeric);
        assert!(
            err < tol,
            "directional slice derivative: analytic {norm} vs numeric {numeric} (rel err {err})"
        );
    }
}

#[test]
fn denoiser_gradients_match_finite_differences_f64() {
    denoiser_grad_slice_check::<f64>(1e-3, 1e-6, true);
}

#[test]
fn denoiser_gradients_match_finite_differences_f32() {
    denoiser_grad_slice_check::<f32>(1e-2, 1e-3, false);
}
