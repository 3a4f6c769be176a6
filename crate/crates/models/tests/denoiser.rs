use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use inpaintkit_core::RngStream;
use inpaintkit_models::denoiser::{Denoiser, DenoiserConfig, Downsampling, Stage, COND_CHANNELS};
use inpaintkit_models::gradcheck::gradient_check;
use inpaintkit_models::Checkpoint;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

fn randn(r: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let v: Vec<f32> = (0..n).map(|_| StandardNormal.sample(r)).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

fn tokens(r: &mut impl Rng, b: usize, cfg: &DenoiserConfig) -> Tensor {
    let v: Vec<u32> = (0..b * cfg.max_len)
        .map(|i| if i % cfg.max_len < 6 { r.random_range(3..cfg.vocab_size as u32) } else { 0 })
        .collect();
    Tensor::from_vec(v, (b, cfg.max_len), &Device::Cpu).unwrap()
}

fn linf(a: &Tensor, b: &Tensor) -> f32 {
    let a: Vec<f32> = a.flatten_all().unwrap().to_vec1().unwrap();
    let b: Vec<f32> = b.flatten_all().unwrap().to_vec1().unwrap();
    a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

#[test]
fn finetune_init_matches_base_on_both_stages() {
    let cfg = DenoiserConfig::default();
    for stage in [Stage::Base, Stage::Sr] {
        let base = Denoiser::new(&cfg, stage, false, DType::F32, &RngStream::new(5, "base")).unwrap();
        let ckpt = base.to_checkpoint().unwrap();
        let ft = Denoiser::init_finetune_from_checkpoint(&ckpt, DType::F32).unwrap();
        assert_eq!(ft.input_channels(), stage.latent_channels() + 4);
        assert!(ft.conditioning_input_weights().unwrap().iter().all(|&w| w == 0.0));
        for name in base.params().names() {
            if name != "conv_in.weight" {
                assert_eq!(base.params().values(name).unwrap(), ft.params().values(name).unwrap(), "{name}");
            }
        }
        let mut r = RngStream::new(6, stage.as_str()).rng();
        let res = cfg.resolution(stage);
        let b = 4;
        let latent = randn(&mut r, &[b, stage.latent_channels(), res, res]);
        let cond = randn(&mut r, &[b, COND_CHANNELS, 64, 64]);
        let tok = tokens(&mut r, b, &cfg);
        let t: Vec<usize> = (0..b).map(|_| r.random_range(0..1000)).collect();
        let want = base.forward(&latent, &t, None, &tok).unwrap();
        let got = ft.forward(&latent, &t, Some(&cond), &tok).unwrap();
        assert!(linf(&want, &got) <= 1e-6, "{stage:?}: {}", linf(&want, &got));
    }
}

#[test]
fn forward_is_deterministic_and_checks_shapes() {
    let cfg = DenoiserConfig::default();
    let m = Denoiser::new(&cfg, Stage::Base, true, DType::F32, &RngStream::new(1, "m")).unwrap();
    let mut r = RngStream::new(2, "x").rng();
    let latent = randn(&mut r, &[2, 3, 16, 16]);
    let cond = randn(&mut r, &[2, 4, 64, 64]);
    let tok = tokens(&mut r, 2, &cfg);
    let a = m.forward(&latent, &[3, 999], Some(&cond), &tok).unwrap();
    let b = m.forward(&latent, &[3, 999], Some(&cond), &tok).unwrap();
    assert_eq!(a.dims(), &[2, 3, 16, 16]);
    assert_eq!(linf(&a, &b), 0.0);
    assert!(m.forward(&latent, &[3, 1000], Some(&cond), &tok).is_err());
    assert!(m.forward(&latent, &[3, 4], None, &tok).is_err());
    assert!(m.forward(&randn(&mut r, &[2, 3, 8, 8]), &[3, 4], Some(&cond), &tok).is_err());
    assert!(m.forward(&latent, &[3, 4], Some(&randn(&mut r, &[2, 4, 32, 32])), &tok).is_err());
}

#[test]
fn checkpoint_round_trip_preserves_outputs() {
    let cfg = DenoiserConfig {
        downsampling: Downsampling::Bicubic,
        ..DenoiserConfig::default()
    };
    let m = Denoiser::new(&cfg, Stage::Sr, true, DType::F32, &RngStream::new(3, "m")).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("sr.ckpt");
    let hash = m.to_checkpoint().unwrap().save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded.hash().unwrap(), hash);
    let back = Denoiser::from_checkpoint(&loaded, DType::F32).unwrap();
    assert_eq!(back.to_checkpoint().unwrap(), m.to_checkpoint().unwrap());
    assert!(Denoiser::init_finetune_from(&back).is_err());
}

#[test]
fn gradients_match_finite_differences() {
    let start = Instant::now();
    for stage in [Stage::Base, Stage::Sr] {
        let m = Denoiser::new(&DenoiserConfig::tiny(), stage, true, DType::F64, &RngStream::new(9, "g")).unwrap();
        let report = gradient_check(&m, 50, 1e-5, &RngStream::new(10, stage.as_str())).unwrap();
        assert!(report.max_rel_error() < 1e-3, "{stage:?}: {:?}", report.entries.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error)));
    }
    eprintln!("gradient check took {:?}", start.elapsed());
}

#[test]
fn forward_cost_is_modest() {
    let cfg = DenoiserConfig::default();
    for stage in [Stage::Base, Stage::Sr] {
        let m = Denoiser::new(&cfg, stage, true, DType::F32, &RngStream::new(1, "m")).unwrap();
        let mut r = RngStream::new(2, "x").rng();
        let res = cfg.resolution(stage);
        let latent = randn(&mut r, &[8, stage.latent_channels(), res, res]);
        let cond = randn(&mut r, &[8, 4, 64, 64]);
        let tok = tokens(&mut r, 8, &cfg);
        let start = Instant::now();
        m.forward(&latent, &[1; 8], Some(&cond), &tok).unwrap();
        eprintln!("{stage:?} forward batch 8: {:?}, {} params", start.elapsed(), m.params().n_params());
    }
}
