use candle_core::DType;
use inpaintkit_core::maskpolicy::MaskPolicy;
use inpaintkit_core::vocab::Tokenizer;
use inpaintkit_core::{Exec, RngStream};
use inpaintkit_models::denoiser::{Denoiser, DenoiserConfig, Stage};
use inpaintkit_models::diffusion::NoiseSchedule;
use inpaintkit_models::trainer::{batch_loss, make_batch, pretrain, step_examples, train, train_pair, trained_checkpoint, TrainConfig};

fn cfg(stage: Stage, steps: usize) -> TrainConfig {
    TrainConfig {
        stage,
        steps,
        batch_size: 8,
        learning_rate: 3e-3,
        warmup_steps: 5,
        corpus_size: 64,
        log_every: 5,
        ..TrainConfig::default()
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn pretraining_reduces_loss_and_logs() {
    let (_, out) = pretrain(&DenoiserConfig::tiny(), &cfg(Stage::Base, 60), Exec::default(), None).unwrap();
    assert_eq!(out.losses.len(), 60);
    let (head, tail) = (mean(&out.losses[..10]), mean(&out.losses[50..]));
    assert!(tail < 0.8 * head, "loss {head:.4} -> {tail:.4}");
    let steps: Vec<usize> = out.log.iter().map(|r| r.step).collect();
    assert_eq!(steps, vec![0, 5, 10, 15, 20, 25, 30, 35, 40, 45, 50, 55, 59]);
    assert!(out.log.iter().all(|r| r.policy == "text"));
}

#[test]
fn training_is_bitwise_reproducible() {
    let dcfg = DenoiserConfig::tiny();
    let c = cfg(Stage::Sr, 4);
    let run = |exec| {
        let (m, out) = pretrain(&dcfg, &c, exec, None).unwrap();
        trained_checkpoint(&m, &c, &out).unwrap().to_bytes().unwrap()
    };
    let a = run(Exec::Sequential);
    assert_eq!(a, run(Exec::Sequential));
    assert_eq!(a, run(Exec::Parallel));
}

#[test]
fn finetune_starts_at_the_pretrained_loss() {
    let dcfg = DenoiserConfig::tiny();
    let c = cfg(Stage::Base, 3);
    let (base, _) = pretrain(&dcfg, &c, Exec::default(), None).unwrap();
    let ft = Denoiser::init_finetune_from(&base).unwrap();
    let tok = Tokenizer::new(dcfg.max_len);
    let examples = step_examples(&c, 7, &tok, None, Exec::default()).unwrap();
    let sched = NoiseSchedule::cosine(dcfg.timesteps).unwrap();
    let rng = RngStream::new(1, "batch");
    let lb = batch_loss(&base, &make_batch(&base, &examples, &sched, &rng).unwrap()).unwrap();
    let lf = batch_loss(&ft, &make_batch(&ft, &examples, &sched, &rng).unwrap()).unwrap();
    let (lb, lf) = (lb.to_scalar::<f32>().unwrap(), lf.to_scalar::<f32>().unwrap());
    assert!((lb - lf).abs() <= 1e-6 * lb.abs().max(1.0), "{lb} vs {lf}");
}

#[test]
fn pair_shares_budget_and_differs_only_in_policy() {
    let dcfg = DenoiserConfig::tiny();
    let c = cfg(Stage::Base, 3);
    let (base, _) = pretrain(&dcfg, &c, Exec::default(), None).unwrap();
    let pair = train_pair(&base, &c, Exec::default()).unwrap();
    let (ou, ro) = (&pair.object_union.1, &pair.random.1);
    assert_eq!(ou.losses.len(), ro.losses.len());
    assert_eq!(c.with_policy(MaskPolicy::ObjectUnion).hash(), ou.config_hash);
    assert_eq!(c.with_policy(MaskPolicy::Random).hash(), ro.config_hash);
    assert!(ou.checkpoint_name.starts_with("base-object_union-"));
    assert!(ro.checkpoint_name.starts_with("base-random-"));
    assert!(pair.object_union.0.is_conditioned() && pair.random.0.is_conditioned());
}

#[test]
fn stage_mismatch_and_bad_config_are_rejected() {
    let dcfg = DenoiserConfig::tiny();
    let m = Denoiser::new(&dcfg, Stage::Base, true, DType::F32, &RngStream::new(0, "m")).unwrap();
    assert!(train(&m, &cfg(Stage::Sr, 1), None, Exec::default(), None).is_err());
    let bad = TrainConfig {
        conditioning_dropout: 1.5,
        ..cfg(Stage::Base, 1)
    };
    assert!(train(&m, &bad, None, Exec::default(), None).is_err());
}
