//! End-to-end acceptance checks. Runs without the libtest harness so every
//! criterion prints exactly one PASS, FAIL or SKIP line; any FAIL makes the
//! process exit non-zero.
//!
//! Trained checkpoints are cached under the cargo target tmpdir, keyed by a
//! hash of the training configuration. Set `INPAINTKIT_LONG=1` to also run
//! the multi-seed directional comparison, which takes hours on a CPU.

#[path = "../../core/tests/support/oracle.rs"]
mod oracle;

use std::cell::OnceCell;
use std::collections::{BTreeMap, HashMap};
use std::hash::{DefaultHasher, Hash, Hasher};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{ensure, Context, Result};
use candle_core::{DType, Device, Tensor};
use inpaintkit_cli::config::{EvaluateSection, SampleSection, TrainSection, BLANK_MODEL, REFERENCE_MODEL};
use inpaintkit_cli::pipeline::{self, Samples};
use inpaintkit_core::agreement::{
    best_of_four_chance, best_of_four_exact, best_of_two_chance, best_of_two_exact, bootstrap_ci, AgreementData,
    FOUR_WAY_BASELINE, PAIR_BASELINE,
};
use inpaintkit_core::judge::{expected_side_by_side_records, expected_single_records, run_protocol, Judge, JudgeConfig, ProtocolConfig};
use inpaintkit_core::maskpolicy::{sample_mask, MaskPolicy, MaskPolicyConfig};
use inpaintkit_core::metrics::{Region, SampleKey};
use inpaintkit_core::scenegen::{build_benchmark, corpus_sample, BenchItem, CANVAS, DEFAULT_BENCH_ITEMS};
use inpaintkit_core::vocab::PromptKind;
use inpaintkit_core::{Exec, RngStream, SizeBucket};
use inpaintkit_models::denoiser::{Denoiser, DenoiserConfig, Stage, COND_CHANNELS};
use inpaintkit_models::gradcheck::gradient_check;
use inpaintkit_models::sampler::{guided_eps, schedule_weight, GuidanceSchedule};
use inpaintkit_service::worker::CascadeBackend;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

enum Outcome {
    Pass(String),
    Fail(String),
    Skip(String),
}

fn verdict(ok: bool, detail: String) -> Outcome {
    if ok {
        Outcome::Pass(detail)
    } else {
        Outcome::Fail(detail)
    }
}

/// Benchmark items and trained models shared by several criteria.
struct Fixtures {
    exec: Exec,
    bench: OnceCell<Vec<BenchItem>>,
    trained: OnceCell<(PathBuf, Samples)>,
}

/// Items whose edits are sampled from the trained cascade: 34 x 3 prompts.
const EDIT_ITEMS: usize = 34;

fn toy_training() -> TrainSection {
    let mut t = TrainSection {
        pretrain_steps: 150,
        ..TrainSection::default()
    };
    t.base.steps = 150;
    t.base.batch_size = 8;
    t.sr.steps = 150;
    t.sr.batch_size = 4;
    t.contrastive.steps = 600;
    t
}

fn cache_dir(cfg: &TrainSection) -> PathBuf {
    let mut h = DefaultHasher::new();
    serde_json::to_string(cfg).expect("config serializes").hash(&mut h);
    Path::new(env!("CARGO_TARGET_TMPDIR")).join(format!("acceptance-{:016x}", h.finish()))
}

/// Trains denoisers and embedder into `dir` unless a previous run finished.
fn ensure_trained(dir: &Path, cfg: &TrainSection, exec: Exec) -> Result<()> {
    let done = dir.join("complete");
    if done.exists() {
        return Ok(());
    }
    eprintln!("training toy checkpoints into {} (cached for later runs)", dir.display());
    pipeline::train_denoisers(dir, cfg, exec)?;
    let top1 = pipeline::train_embedder(dir, cfg, exec)?;
    eprintln!("embedder held-out top-1 retrieval {:.1}%", 100.0 * top1);
    std::fs::write(done, b"")?;
    Ok(())
}

impl Fixtures {
    fn bench(&self) -> Result<&[BenchItem]> {
        if self.bench.get().is_none() {
            let items = build_benchmark(DEFAULT_BENCH_ITEMS, &RngStream::new(0, "benchmark"), self.exec)?;
            let _ = self.bench.set(items);
        }
        Ok(self.bench.get().unwrap())
    }

    fn trained(&self) -> Result<&(PathBuf, Samples)> {
        if self.trained.get().is_none() {
            let cfg = toy_training();
            let dir = cache_dir(&cfg);
            ensure_trained(&dir, &cfg, self.exec)?;
            let eval = EvaluateSection {
                models: vec!["object_union".into(), REFERENCE_MODEL.into(), BLANK_MODEL.into()],
                samples_per_prompt: 1,
                ..EvaluateSection::default()
            };
            let sample = SampleSection {
                steps: 10,
                sr_steps: Some(4),
                ..SampleSection::default()
            };
            let backend = CascadeBackend::open(&dir);
            let items = &self.bench()?[..EDIT_ITEMS];
            let samples = pipeline::generate_samples(items, &eval, &sample, Some(&backend))?;
            let _ = self.trained.set((dir, samples));
        }
        Ok(self.trained.get().unwrap())
    }
}

fn randn(r: &mut impl Rng, shape: &[usize]) -> Result<Tensor> {
    let n = shape.iter().product();
    let v: Vec<f32> = (0..n).map(|_| StandardNormal.sample(r)).collect();
    Ok(Tensor::from_vec(v, shape, &Device::Cpu)?)
}

fn zero_init(_: &Fixtures) -> Result<Outcome> {
    let cfg = DenoiserConfig::default();
    let mut worst = 0.0f32;
    for stage in [Stage::Base, Stage::Sr] {
        let base = Denoiser::new(&cfg, stage, false, DType::F32, &RngStream::new(11, "zero-init"))?;
        let ft = Denoiser::init_finetune_from(&base)?;
        let mut r = RngStream::new(12, stage.as_str()).rng();
        let res = cfg.resolution(stage);
        // 32 triples in batches of 8
        for _ in 0..4 {
            let b = 8;
            let latent = randn(&mut r, &[b, stage.latent_channels(), res, res])?;
            let cond = randn(&mut r, &[b, COND_CHANNELS, cfg.conditioning_resolution, cfg.conditioning_resolution])?;
            let tok: Vec<u32> = (0..b * cfg.max_len)
                .map(|i| if i % cfg.max_len < 8 { r.random_range(3..cfg.vocab_size as u32) } else { 0 })
                .collect();
            let tok = Tensor::from_vec(tok, (b, cfg.max_len), &Device::Cpu)?;
            let t: Vec<usize> = (0..b).map(|_| r.random_range(0..cfg.timesteps)).collect();
            let a = base.forward(&latent, &t, None, &tok)?;
            let c = ft.forward(&latent, &t, Some(&cond), &tok)?;
            let d = (a - c)?.abs()?.flatten_all()?.max(0)?.to_scalar::<f32>()?;
            worst = worst.max(d);
        }
    }
    Ok(verdict(worst <= 1e-6, format!("max L-inf {worst:.2e} over 2 stages x 32 triples (limit 1e-6)")))
}

fn mask_policy(f: &Fixtures) -> Result<Outcome> {
    let n = 10_000u64;
    let corpus = RngStream::new(21, "corpus");
    let masks = RngStream::new(21, "masks");
    let ou = MaskPolicyConfig::with_policy(MaskPolicy::ObjectUnion);
    let rand = MaskPolicyConfig::with_policy(MaskPolicy::Random);
    let idx: Vec<u64> = (0..n).collect();
    let rows = f.exec.map_slice(&idx, |&i| -> Result<(bool, bool, bool)> {
        let sample = corpus_sample(i, &corpus)?;
        let boxes = sample.scene.as_ref().context("corpus scene")?.boxes();
        let rng = masks.child_index(i);
        let m = sample_mask((CANVAS, CANVAS), &boxes, &ou, &rng)?;
        let violation = match m.chosen_box {
            Some(b) => !m.mask.covers_box(&b),
            None => !boxes.is_empty(),
        };
        let r = sample_mask((CANVAS, CANVAS), &boxes, &rand, &rng.child("random"))?;
        let covered = boxes.iter().any(|b| r.mask.covers_box(b));
        Ok((violation, covered, !boxes.is_empty()))
    });
    let (mut violations, mut covered, mut with_objects) = (0, 0, 0);
    for row in rows {
        let (v, c, o) = row?;
        violations += v as usize;
        covered += c as usize;
        with_objects += o as usize;
    }
    let rate = covered as f64 / with_objects as f64;
    Ok(verdict(
        violations == 0 && rate < 0.5,
        format!("{violations} violations in {n} object-union masks; random masks cover a whole object in {:.1}% of scenes", 100.0 * rate),
    ))
}

fn context_preservation(f: &Fixtures) -> Result<Outcome> {
    let (_, samples) = f.trained()?;
    let items: HashMap<&str, &BenchItem> = f.bench()?.iter().map(|i| (i.id.as_str(), i)).collect();
    let mut keys: Vec<&SampleKey> = samples.keys().filter(|k| k.model_id == "object_union").collect();
    keys.sort_by(|a, b| (&a.item_id, a.prompt_kind.as_str()).cmp(&(&b.item_id, b.prompt_kind.as_str())));
    keys.truncate(100);
    ensure!(keys.len() == 100, "only {} edits sampled", keys.len());
    let (mut bad_pixels, mut bad_bytes, mut edited) = (0usize, 0usize, 0usize);
    for k in &keys {
        let item = items[k.item_id.as_str()];
        let out = &samples[*k];
        let (a, b) = (out.to_rgb8(), item.image.to_rgb8());
        let (h, w) = item.image.shape();
        for y in 0..h {
            for x in 0..w {
                if item.mask.get(y, x) {
                    edited += (out.get(y, x) != item.image.get(y, x)) as usize;
                    continue;
                }
                bad_pixels += (out.get(y, x) != item.image.get(y, x)) as usize;
                let p = 3 * (y * w + x);
                bad_bytes += (a[p..p + 3] != b[p..p + 3]) as usize;
            }
        }
    }
    Ok(verdict(
        bad_pixels == 0 && bad_bytes == 0 && edited > 0,
        format!("100 edits: {bad_pixels} context pixels changed ({bad_bytes} after 8-bit encoding); {edited} masked pixels repainted"),
    ))
}

fn cfg_algebra(_: &Fixtures) -> Result<Outcome> {
    let mut r = RngStream::new(31, "cfg").rng();
    let u: Vec<f32> = (0..4096).map(|_| StandardNormal.sample(&mut r)).collect();
    let c: Vec<f32> = (0..4096).map(|_| StandardNormal.sample(&mut r)).collect();
    let exact = guided_eps(&u, &c, 0.0)? == u && guided_eps(&u, &c, 1.0)? == c;
    let g: GuidanceSchedule = "oscillate:1,30".parse()?;
    let weights: Vec<f64> = (0..64).map(|k| schedule_weight(&g, k, Stage::Base)).collect();
    let pattern = weights.iter().enumerate().all(|(k, &w)| w == if k % 2 == 0 { 30.0 } else { 1.0 });
    let default_matches = (0..64).all(|k| schedule_weight(&GuidanceSchedule::default(), k, Stage::Base) == weights[k]);
    Ok(verdict(
        exact && pattern && default_matches,
        format!("w=0 and w=1 reductions exact: {exact}; base-stage weights alternate 30,1,30,...: {pattern}; default schedule identical: {default_matches}"),
    ))
}

fn gradients(_: &Fixtures) -> Result<Outcome> {
    let mut worst = 0.0f64;
    for stage in [Stage::Base, Stage::Sr] {
        let m = Denoiser::new(&DenoiserConfig::tiny(), stage, true, DType::F64, &RngStream::new(41, "grad"))?;
        let report = gradient_check(&m, 100, 1e-5, &RngStream::new(42, stage.as_str()))?;
        worst = worst.max(report.max_rel_error());
    }
    Ok(verdict(worst < 1e-3, format!("max relative error {worst:.2e} on 2 x 100 parameters (limit 1e-3)")))
}

fn benchmark(f: &Fixtures) -> Result<Outcome> {
    let items = f.bench()?;
    let prompts: usize = items
        .iter()
        .map(|i| PromptKind::ALL.iter().filter(|&&k| !i.prompts.get(k).text.trim().is_empty()).count())
        .sum();
    let mut buckets: BTreeMap<&str, usize> = BTreeMap::new();
    for i in items {
        *buckets.entry(i.size_bucket.as_str()).or_default() += 1;
    }
    let single = expected_single_records(items.len(), 4, 4);
    let side = expected_side_by_side_records(items.len(), 4, 3);
    // the record formulas, checked against an actual run on a slice
    let sub = &items[..12];
    let models = ["reference", "blank", "reference-2", "blank-2"];
    let mut samples = Samples::new();
    for item in sub {
        for kind in PromptKind::ALL {
            for m in models {
                for s in 0..4 {
                    let img = if m.starts_with("blank") { item.image.masked(&item.mask)? } else { item.image.clone() };
                    samples.insert(
                        SampleKey {
                            item_id: item.id.clone(),
                            prompt_kind: kind,
                            model_id: m.into(),
                            sample_index: s,
                        },
                        img,
                    );
                }
            }
        }
    }
    let protocol = ProtocolConfig {
        models: models.map(String::from).to_vec(),
        samples_per_prompt: 4,
        annotators: 3,
        seed: 0,
    };
    let out = run_protocol(sub, &samples, &protocol, &Judge::new(JudgeConfig::default())?, f.exec)?;
    let run_ok = out.single.len() == expected_single_records(12, 4, 4)
        && out.side_by_side.len() == expected_side_by_side_records(12, 4, 3);
    let all_buckets = SizeBucket::ALL.iter().all(|b| buckets.get(b.as_str()).is_some_and(|&n| n > 0));
    Ok(verdict(
        items.len() == 240 && prompts == 720 && single == 11_520 && side == 2_160 && run_ok && all_buckets,
        format!(
            "{} items, {prompts} prompts, {single} single / {side} side-by-side records (12-item run matches: {run_ok}), buckets {buckets:?}",
            items.len()
        ),
    ))
}

fn judge_calibration(f: &Fixtures) -> Result<Outcome> {
    let items = f.bench()?;
    let mut samples = Samples::new();
    for item in items {
        for kind in PromptKind::ALL {
            let key = SampleKey {
                item_id: item.id.clone(),
                prompt_kind: kind,
                model_id: REFERENCE_MODEL.into(),
                sample_index: 0,
            };
            samples.insert(key, item.image.clone());
        }
    }
    let protocol = ProtocolConfig {
        models: vec![REFERENCE_MODEL.into()],
        samples_per_prompt: 1,
        annotators: 1,
        seed: 0,
    };
    let out = run_protocol(items, &samples, &protocol, &Judge::new(JudgeConfig::default())?, f.exec)?;
    let correct = out.single.iter().filter(|r| r.correct_overall()).count();
    let rate = correct as f64 / out.single.len() as f64;
    Ok(verdict(rate >= 0.99, format!("{correct}/{} reference images judged correct ({:.2}%)", out.single.len(), 100.0 * rate)))
}

fn agreement_oracle(_: &Fixtures) -> Result<Outcome> {
    let mut mismatches = Vec::new();
    for seed in 0..5 {
        let data = oracle::micro_set(seed);
        ensure!(data.n_samples() == 20, "micro-set has {} samples", data.n_samples());
        let (num, den) = oracle::brute_best_of_two(&data);
        if !best_of_two_exact(&data)?.same_ratio(num, den) {
            mismatches.push(format!("pairs seed {seed}"));
        }
        let (num, den) = oracle::brute_best_of_four(&data);
        if !best_of_four_exact(&data)?.same_ratio(num, den) {
            mismatches.push(format!("4-way seed {seed}"));
        }
    }
    Ok(verdict(
        mismatches.is_empty(),
        format!("5 micro-sets of 20 samples, exact fractions equal enumeration; mismatches {mismatches:?}"),
    ))
}

/// Judge scores on a four-level grid, four models with four samples each.
fn synthetic_agreement_data(seed: u64) -> AgreementData {
    let mut r = RngStream::new(seed, "synthetic").rng();
    let mut data = AgreementData::default();
    for item in 0..240 {
        for model in ["a", "b", "c", "d"] {
            for s in 0..4 {
                let judge = r.random_range(0..4) as f64 / 3.0;
                data.insert(&format!("item-{item}"), PromptKind::MaskSimple, model, s, 0.0, judge);
            }
        }
    }
    data
}

fn random_baselines(f: &Fixtures) -> Result<Outcome> {
    let data = synthetic_agreement_data(51);
    let rng = RngStream::new(53, "agree");
    let two = best_of_two_chance(&data, 10_000, 200, &rng, f.exec)?;
    let four = best_of_four_chance(&data, 100_000, 200, &rng, f.exec)?;
    let se = |p: f64, n: usize| 100.0 * (p * (1.0 - p) / n as f64).sqrt();
    let (se2, se4) = (se(0.5, two.n_comparisons), se(0.25, four.n_comparisons));
    let z2 = (two.agreement_pct - PAIR_BASELINE) / se2;
    let z4 = (four.agreement_pct - FOUR_WAY_BASELINE) / se4;
    Ok(verdict(
        z2.abs() <= 3.0 && z4.abs() <= 3.0,
        format!(
            "pairs {:.2}% (n={}, z={z2:+.2}); 4-way {:.2}% (n={}, z={z4:+.2})",
            two.agreement_pct, two.n_comparisons, four.agreement_pct, four.n_comparisons
        ),
    ))
}

fn bootstrap(f: &Fixtures) -> Result<Outcome> {
    let mut r = RngStream::new(61, "bernoulli").rng();
    let values: Vec<f64> = (0..10_000).map(|_| if r.random_bool(0.5) { 100.0 } else { 0.0 }).collect();
    let (lo, hi) = bootstrap_ci(&values, 2_000, &RngStream::new(62, "boot"), f.exec)?;
    let half = (hi - lo) / 2.0;
    Ok(verdict((0.7..=1.3).contains(&half), format!("95% CI [{lo:.2}, {hi:.2}], half-width {half:.3} points")))
}

fn directional(f: &Fixtures) -> Result<Outcome> {
    if std::env::var("INPAINTKIT_LONG").as_deref() != Ok("1") {
        return Ok(Outcome::Skip("multi-seed training comparison; set INPAINTKIT_LONG=1 to run".into()));
    }
    let items = &f.bench()?[..60];
    let mut wins = 0;
    let mut rates = Vec::new();
    let seeds = 5u64;
    for seed in 0..seeds {
        let mut cfg = TrainSection::default();
        cfg.base.seed = seed;
        cfg.sr.seed = seed;
        cfg.base.corpus_seed = seed;
        cfg.sr.corpus_seed = seed;
        let dir = cache_dir(&cfg);
        if !dir.join("complete").exists() {
            pipeline::train_denoisers(&dir, &cfg, f.exec)?;
            std::fs::write(dir.join("complete"), b"")?;
        }
        let eval = EvaluateSection {
            models: vec!["object_union".into(), "random".into()],
            samples_per_prompt: 2,
            seed,
            ..EvaluateSection::default()
        };
        let backend = CascadeBackend::open(&dir);
        let samples = pipeline::generate_samples(items, &eval, &SampleSection::default(), Some(&backend))?;
        let judge = pipeline::make_judge(&eval, None)?;
        let out = pipeline::judge_samples(items, &samples, &eval, &judge, f.exec)?;
        let rate = |m: &str| {
            let rs: Vec<_> = out
                .single
                .iter()
                .filter(|r| r.model_id == m && r.prompt_kind == PromptKind::MaskSimple)
                .collect();
            rs.iter().filter(|r| r.correct_overall()).count() as f64 / rs.len() as f64
        };
        let (ou, rm) = (rate("object_union"), rate("random"));
        wins += (ou > rm) as usize;
        rates.push(format!("{:.1}/{:.1}", 100.0 * ou, 100.0 * rm));
    }
    Ok(verdict(
        2 * wins > seeds as usize,
        format!("object-union wins {wins}/{seeds} seed pairs on Mask-Simple (correct % OU/Random: {})", rates.join(", ")),
    ))
}

fn metric_sanity(f: &Fixtures) -> Result<Outcome> {
    let (dir, samples) = f.trained()?;
    let embedder = pipeline::load_embedder(dir)?;
    let items = &f.bench()?[..EDIT_ITEMS];
    let scores = pipeline::score_samples(items, samples, embedder.as_ref(), f.exec)?;
    let mut sums: BTreeMap<&str, (f64, usize)> = BTreeMap::new();
    for s in scores.iter().filter(|s| s.region == Region::Full) {
        let e = sums.entry(s.key.model_id.as_str()).or_default();
        e.0 += s.r_precision;
        e.1 += 1;
    }
    let mean = |m: &str| sums.get(m).map(|(t, n)| 100.0 * t / *n as f64).unwrap_or(f64::NAN);
    let (r, m, b) = (mean(REFERENCE_MODEL), mean("object_union"), mean(BLANK_MODEL));
    Ok(verdict(r > m && r > b, format!("R-Precision reference {r:.1}, trained model {m:.1}, blanked {b:.1}")))
}

type Criterion = fn(&Fixtures) -> Result<Outcome>;

fn main() {
    let fixtures = Fixtures {
        exec: Exec::default(),
        bench: OnceCell::new(),
        trained: OnceCell::new(),
    };
    let criteria: [(&str, Criterion); 12] = [
        ("zero-init equivalence", zero_init),
        ("mask-policy invariant", mask_policy),
        ("context preservation", context_preservation),
        ("guidance algebra", cfg_algebra),
        ("gradient check", gradients),
        ("benchmark structure", benchmark),
        ("judge calibration", judge_calibration),
        ("agreement oracle equivalence", agreement_oracle),
        ("random baselines", random_baselines),
        ("bootstrap interval", bootstrap),
        ("directional headline", directional),
        ("metric sanity vs references", metric_sanity),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, check) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let outcome = check(&fixtures).unwrap_or_else(|e| Outcome::Fail(format!("error: {e:#}")));
        let secs = start.elapsed().as_secs_f64();
        let (tag, detail) = match outcome {
            Outcome::Pass(d) => ("PASS", d),
            Outcome::Fail(d) => {
                failed += 1;
                ("FAIL", d)
            }
            Outcome::Skip(d) => ("SKIP", d),
        };
        println!("{tag} {name} ({secs:.1}s): {detail}");
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
