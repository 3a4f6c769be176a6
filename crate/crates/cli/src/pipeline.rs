//! The work behind each subcommand, callable without the argument parser.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use inpaintkit_core::agreement::{
    agreement_table_csv, agreement_table_markdown, best_of_four_agreement, best_of_four_chance, best_of_two_agreement,
    best_of_two_chance, breakdown,
    breakdown_csv, AgreementData, AgreementReport, BreakdownBy,
};
use inpaintkit_core::embed::Embedder;
use inpaintkit_core::judge::{read_ratings, run_protocol, write_ratings, Judge, JudgeMode, ProtocolConfig, ProtocolOutput, RatingRecord};
use inpaintkit_core::metrics::{aggregate, metric_rows_csv, metric_rows_markdown, Metric, MetricContext, Region, SampleKey, SampleScores};
use inpaintkit_core::scenegen::{build_benchmark, write_benchmark, BenchItem};
use inpaintkit_core::vocab::PromptKind;
use inpaintkit_core::{Exec, ImageBuffer, RngStream, SizeBucket};
use inpaintkit_core::maskpolicy::MaskPolicy;
use inpaintkit_models::checkpoint::Checkpoint;
use inpaintkit_models::denoiser::{Denoiser, Stage};
use inpaintkit_models::embedder::{contrastive_pair, retrieval_top1, train_contrastive, ContrastiveConfig, TrainedEmbedder};
use inpaintkit_models::registry::{self, CascadeFiles, ModelIndex};
use inpaintkit_models::trainer::{pretrain, train, trained_checkpoint, TrainConfig};
use inpaintkit_service::job::{EditParams, Provenance};
use inpaintkit_service::worker::{EditBackend, EditInput};
use serde::{Deserialize, Serialize};

use crate::config::{
    AgreeSection, BenchSection, EvaluateSection, SampleSection, TrainSection, BLANK_MODEL, REFERENCE_MODEL,
};

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?);
    for r in rows {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).with_context(|| format!("{}:{}", path.display(), i + 1)))
        .collect()
}

// ---------------------------------------------------------------- bench

#[derive(Debug, Serialize)]
pub struct BenchSummary {
    pub items: usize,
    pub prompts: usize,
    pub buckets: BTreeMap<String, usize>,
}

pub fn bench_summary(items: &[BenchItem]) -> BenchSummary {
    let mut buckets: BTreeMap<String, usize> = SizeBucket::ALL.iter().map(|b| (b.as_str().to_string(), 0)).collect();
    for i in items {
        *buckets.entry(i.size_bucket.as_str().to_string()).or_default() += 1;
    }
    BenchSummary {
        items: items.len(),
        prompts: items.len() * PromptKind::ALL.len(),
        buckets,
    }
}

pub fn build_bench(out: &Path, cfg: &BenchSection, exec: Exec) -> Result<Vec<BenchItem>> {
    let items = build_benchmark(cfg.items, &RngStream::new(cfg.seed, "benchmark"), exec)?;
    write_benchmark(out, &items)?;
    Ok(items)
}

// ---------------------------------------------------------------- train

fn log_file(dir: &Path, name: &str) -> Result<std::fs::File> {
    let logs = dir.join("logs");
    std::fs::create_dir_all(&logs)?;
    Ok(std::fs::File::create(logs.join(format!("{name}.jsonl")))?)
}

fn save(dir: &Path, name: &str, ckpt: &Checkpoint) -> Result<()> {
    let (_, hash) = registry::store(dir, name, ckpt)?;
    log::info!("saved {name} ({})", &hash[..12]);
    Ok(())
}

/// Pretrains both stages text-only, then finetunes one inpainting cascade
/// per mask policy from the same pretrained weights and registers them.
pub fn train_denoisers(dir: &Path, cfg: &TrainSection, exec: Exec) -> Result<ModelIndex> {
    cfg.denoiser.validate()?;
    std::fs::create_dir_all(dir)?;
    let mut files: BTreeMap<MaskPolicy, BTreeMap<Stage, String>> = BTreeMap::new();
    for stage in [Stage::Base, Stage::Sr] {
        let finetune = cfg.stage(stage);
        let pre_cfg = TrainConfig {
            steps: cfg.pretrain_steps,
            ..finetune.clone()
        };
        let pre_name = pre_cfg.checkpoint_name(false);
        log::info!("pretraining {} for {} steps", stage.as_str(), pre_cfg.steps);
        let mut log = log_file(dir, pre_name.trim_end_matches(".ckpt"))?;
        let (pre, outcome) = pretrain(&cfg.denoiser, &pre_cfg, exec, Some(&mut log))?;
        save(dir, &pre_name, &trained_checkpoint(&pre, &pre_cfg, &outcome)?)?;
        for policy in [MaskPolicy::ObjectUnion, MaskPolicy::Random] {
            let c = finetune.with_policy(policy);
            let name = c.checkpoint_name(true);
            log::info!("finetuning {} with {} masks for {} steps", stage.as_str(), policy.as_str(), c.steps);
            let model = Denoiser::init_finetune_from(&pre)?;
            let mut log = log_file(dir, name.trim_end_matches(".ckpt"))?;
            let outcome = train(&model, &c, None, exec, Some(&mut log))?;
            save(dir, &name, &trained_checkpoint(&model, &c, &outcome)?)?;
            files.entry(policy).or_default().insert(stage, name);
        }
    }
    let mut index = ModelIndex::load(dir)?;
    for (policy, stages) in files {
        index.cascades.insert(
            policy.as_str().to_string(),
            CascadeFiles {
                base: stages[&Stage::Base].clone(),
                sr: stages[&Stage::Sr].clone(),
            },
        );
    }
    index.default_cascade = Some(MaskPolicy::ObjectUnion.as_str().to_string());
    index.save(dir)?;
    Ok(index)
}

/// Held-out whole-image pairs for retrieval accuracy.
pub fn retrieval_pairs(cfg: &ContrastiveConfig, n: usize) -> Result<Vec<inpaintkit_models::embedder::ContrastivePair>> {
    let held_out = ContrastiveConfig {
        seed: cfg.seed.wrapping_add(1),
        corpus_seed: cfg.corpus_seed.wrapping_add(1),
        crop_fraction: 0.0,
        ..cfg.clone()
    };
    (0..n as u64).map(|i| Ok(contrastive_pair(i, &held_out)?)).collect()
}

/// Trains the embedder, registers it, and returns held-out top-1 retrieval.
pub fn train_embedder(dir: &Path, cfg: &TrainSection, exec: Exec) -> Result<f64> {
    std::fs::create_dir_all(dir)?;
    let mut log = log_file(dir, "embedder")?;
    let (model, _) = train_contrastive(&cfg.embedder, &cfg.contrastive, exec, Some(&mut log))?;
    let ckpt = model.to_checkpoint()?;
    let name = format!("embedder-{}.ckpt", &ckpt.hash()?[..12]);
    save(dir, &name, &ckpt)?;
    let mut index = ModelIndex::load(dir)?;
    index.embedder = Some(name);
    index.save(dir)?;
    Ok(retrieval_top1(&model, &retrieval_pairs(&cfg.contrastive, 200)?)?)
}

// ---------------------------------------------------------------- sample

pub fn edit_params(sample: &SampleSection, n: usize, seed: u64, model: Option<String>) -> EditParams {
    EditParams {
        n,
        steps: sample.steps,
        sr_steps: sample.sr_steps,
        seed,
        guidance: sample.guidance.clone(),
        model,
        unconditional: false,
    }
}

pub fn sample_edit(backend: &dyn EditBackend, input: &EditInput) -> Result<(Vec<ImageBuffer>, Provenance)> {
    input.params.validate()?;
    let out = backend.run(input)?;
    Ok((out.images, out.provenance))
}

// ---------------------------------------------------------------- evaluate

/// Per-prompt sampling seed, independent of evaluation order.
pub fn prompt_seed(seed: u64, item_index: usize, kind: PromptKind) -> u64 {
    let k = PromptKind::ALL.iter().position(|&p| p == kind).unwrap_or(0) as u64;
    seed.wrapping_mul(1_000_003)
        .wrapping_add(item_index as u64 * PromptKind::ALL.len() as u64 + k)
}

pub type Samples = HashMap<SampleKey, ImageBuffer>;

/// Generates `samples_per_prompt` images per model, item and prompt kind.
pub fn generate_samples(
    items: &[BenchItem],
    cfg: &EvaluateSection,
    sample: &SampleSection,
    backend: Option<&dyn EditBackend>,
) -> Result<Samples> {
    let mut out = Samples::new();
    for model in &cfg.models {
        log::info!("sampling {model}");
        for (idx, item) in items.iter().enumerate() {
            for kind in PromptKind::ALL {
                let images = match model.as_str() {
                    REFERENCE_MODEL => vec![item.image.clone(); cfg.samples_per_prompt],
                    BLANK_MODEL => vec![item.image.masked(&item.mask)?; cfg.samples_per_prompt],
                    id => {
                        let backend = backend.context("no checkpoint directory for sampling models")?;
                        let input = EditInput {
                            image: item.image.clone(),
                            mask: item.mask.clone(),
                            prompt: item.prompts.get(kind).text.clone(),
                            params: edit_params(
                                sample,
                                cfg.samples_per_prompt,
                                prompt_seed(cfg.seed, idx, kind),
                                Some(id.to_string()),
                            ),
                        };
                        sample_edit(backend, &input)
                            .with_context(|| format!("sampling {id} on {} ({})", item.id, kind.as_str()))?
                            .0
                    }
                };
                for (s, image) in images.into_iter().enumerate() {
                    let key = SampleKey {
                        item_id: item.id.clone(),
                        prompt_kind: kind,
                        model_id: model.clone(),
                        sample_index: s,
                    };
                    out.insert(key, image);
                }
            }
        }
    }
    Ok(out)
}

pub fn make_judge(cfg: &EvaluateSection, embedder: Option<Arc<dyn Embedder>>) -> Result<Judge> {
    let judge = Judge::new(cfg.judge.clone())?;
    Ok(match (cfg.judge.mode, embedder) {
        (JudgeMode::TrainedClassifier, Some(e)) => judge.with_embedder(e),
        (JudgeMode::TrainedClassifier, None) => bail!("the trained-classifier judge needs an embedder"),
        (JudgeMode::GroundTruthAnalytic, _) => judge,
    })
}

pub fn judge_samples(items: &[BenchItem], samples: &Samples, cfg: &EvaluateSection, judge: &Judge, exec: Exec) -> Result<ProtocolOutput> {
    let protocol = ProtocolConfig {
        models: cfg.models.clone(),
        samples_per_prompt: cfg.samples_per_prompt,
        annotators: cfg.annotators,
        seed: cfg.seed,
    };
    Ok(run_protocol(items, samples, &protocol, judge, exec)?)
}

/// Scores every sample on both regions.
pub fn score_samples(items: &[BenchItem], samples: &Samples, embedder: &dyn Embedder, exec: Exec) -> Result<Vec<SampleScores>> {
    let ctx = MetricContext::new(embedder, items)?;
    let mut keys: Vec<&SampleKey> = samples.keys().collect();
    keys.sort_by(|a, b| {
        (&a.model_id, &a.item_id, a.prompt_kind.as_str(), a.sample_index).cmp(&(
            &b.model_id,
            &b.item_id,
            b.prompt_kind.as_str(),
            b.sample_index,
        ))
    });
    let mut out = Vec::with_capacity(keys.len() * 2);
    for region in Region::ALL {
        let scored = exec.map_slice(&keys, |k| ctx.score(k, &samples[*k], region));
        for s in scored {
            out.push(s?);
        }
    }
    Ok(out)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct JudgeSummaryRow {
    pub model_id: String,
    pub prompt_kind: PromptKind,
    pub n: usize,
    pub correct_pct: f64,
    pub mean_score: f64,
}

/// Share of single-image ratings answered correct overall, per model and
/// prompt kind.
pub fn judge_summary(ratings: &[RatingRecord]) -> Vec<JudgeSummaryRow> {
    let mut cells: BTreeMap<(String, &'static str), (PromptKind, usize, usize, f64)> = BTreeMap::new();
    for r in ratings.iter().filter(|r| !r.is_side_by_side()) {
        let c = cells
            .entry((r.model_id.clone(), r.prompt_kind.as_str()))
            .or_insert((r.prompt_kind, 0, 0, 0.0));
        c.1 += 1;
        c.2 += r.correct_overall() as usize;
        c.3 += r.score();
    }
    cells
        .into_iter()
        .map(|((model_id, _), (kind, n, correct, score))| JudgeSummaryRow {
            model_id,
            prompt_kind: kind,
            n,
            correct_pct: 100.0 * correct as f64 / n as f64,
            mean_score: score / n as f64,
        })
        .collect()
}

pub const RATINGS_FILE: &str = "ratings.jsonl";
pub const SCORES_FILE: &str = "scores.jsonl";

/// Writes ratings, scores, metric tables and per-category breakdowns.
pub fn write_evaluation(
    out: &Path,
    items: &[BenchItem],
    ratings: &ProtocolOutput,
    scores: Option<&[SampleScores]>,
) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let all: Vec<RatingRecord> = ratings.all().cloned().collect();
    write_ratings(&out.join(RATINGS_FILE), &all)?;
    let summary = judge_summary(&ratings.single);
    write_jsonl(&out.join("judge_summary.jsonl"), &summary)?;
    let mut md = String::from("| Model | Prompt | n | Correct % | Mean answer |\n|---|---|---|---|---|\n");
    for r in &summary {
        md.push_str(&format!(
            "| {} | {} | {} | {:.1} | {:.3} |\n",
            r.model_id,
            r.prompt_kind.as_str(),
            r.n,
            r.correct_pct,
            r.mean_score
        ));
    }
    std::fs::write(out.join("judge_summary.md"), md)?;
    for (by, name) in [
        (BreakdownBy::AttributeCategory, "attribute"),
        (BreakdownBy::ObjectCategory, "object"),
        (BreakdownBy::Scene, "scene"),
        (BreakdownBy::SizeBucket, "size"),
        (BreakdownBy::PromptKind, "prompt"),
    ] {
        let rows = breakdown(&ratings.single, items, by)?;
        std::fs::write(out.join(format!("breakdown_{name}.csv")), breakdown_csv(&rows))?;
    }
    if let Some(scores) = scores {
        write_jsonl(&out.join(SCORES_FILE), scores)?;
        let rows = aggregate(scores);
        std::fs::write(out.join("metrics.csv"), metric_rows_csv(&rows))?;
        std::fs::write(out.join("metrics.md"), metric_rows_markdown(&rows))?;
    }
    Ok(())
}

pub fn save_samples(out: &Path, samples: &Samples) -> Result<()> {
    for (k, img) in samples {
        let dir = out.join("samples").join(&k.model_id);
        std::fs::create_dir_all(&dir)?;
        let name = format!("{}_{}_{}.png", k.item_id, k.prompt_kind.as_str(), k.sample_index);
        std::fs::write(dir.join(name), inpaintkit_core::io::encode_png(img)?)?;
    }
    Ok(())
}

// ---------------------------------------------------------------- agree

pub const RANDOM_METRIC: &str = "Random";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AgreementSummary {
    pub best_of_two: Vec<AgreementReport>,
    pub best_of_four: Vec<AgreementReport>,
    pub config: AgreeSection,
    pub n_ratings: usize,
    pub n_scores: usize,
}

/// Agreement of every metric with the judge, per prompt kind and region,
/// plus a seeded random metric as a baseline column.
pub fn agreement(scores: &[SampleScores], ratings: &[RatingRecord], cfg: &AgreeSection, exec: Exec) -> Result<AgreementSummary> {
    let rng = RngStream::new(cfg.seed, "agreement");
    let mut two = Vec::new();
    let mut four = Vec::new();
    for region in Region::ALL {
        let in_region: Vec<&SampleScores> = scores.iter().filter(|s| s.region == region).collect();
        if in_region.is_empty() {
            continue;
        }
        for kind in PromptKind::ALL {
            let stream = rng.child(region.as_str()).child(kind.as_str());
            let mut columns: Vec<(String, AgreementData)> = Vec::new();
            for metric in Metric::ALL {
                let scored: Vec<_> = in_region.iter().map(|s| s.scored(metric)).collect();
                let data = AgreementData::join(&scored, ratings)?.filter_kind(kind);
                columns.push((metric.as_str().to_string(), data));
            }
            if columns[0].1.n_samples() == 0 {
                continue;
            }
            for (name, data) in &columns {
                let s = stream.child(name);
                let r2 = best_of_two_agreement(data, cfg.pairs, cfg.bootstrap, &s.child("two"), exec)?;
                two.push(r2.labeled(Some(kind), Some(region), name));
                let r4 = best_of_four_agreement(data, cfg.rounds, cfg.bootstrap, &s.child("four"), exec)?;
                four.push(r4.labeled(Some(kind), Some(region), name));
            }
            // chance column: metric redrawn per comparison
            let (data, s) = (&columns[0].1, stream.child(RANDOM_METRIC));
            let r2 = best_of_two_chance(data, cfg.pairs, cfg.bootstrap, &s.child("two"), exec)?;
            two.push(r2.labeled(Some(kind), Some(region), RANDOM_METRIC));
            let r4 = best_of_four_chance(data, cfg.rounds, cfg.bootstrap, &s.child("four"), exec)?;
            four.push(r4.labeled(Some(kind), Some(region), RANDOM_METRIC));
        }
    }
    if two.is_empty() {
        bail!("no scored samples to compare");
    }
    Ok(AgreementSummary {
        best_of_two: two,
        best_of_four: four,
        config: cfg.clone(),
        n_ratings: ratings.len(),
        n_scores: scores.len(),
    })
}

pub fn write_agreement(out: &Path, summary: &AgreementSummary) -> Result<()> {
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("best_of_two.csv"), agreement_table_csv(&summary.best_of_two))?;
    std::fs::write(out.join("best_of_two.md"), agreement_table_markdown(&summary.best_of_two))?;
    std::fs::write(out.join("best_of_four.csv"), agreement_table_csv(&summary.best_of_four))?;
    std::fs::write(out.join("best_of_four.md"), agreement_table_markdown(&summary.best_of_four))?;
    std::fs::write(out.join(inpaintkit_service::LATEST_REPORT), serde_json::to_vec_pretty(summary)?)?;
    Ok(())
}

pub fn load_evaluation(dir: &Path) -> Result<(Vec<SampleScores>, Vec<RatingRecord>)> {
    let ratings = read_ratings(&dir.join(RATINGS_FILE)).with_context(|| format!("reading ratings in {}", dir.display()))?;
    let scores = read_jsonl(&dir.join(SCORES_FILE))?;
    Ok((scores, ratings))
}

pub fn load_embedder(dir: &Path) -> Result<Arc<TrainedEmbedder>> {
    Ok(Arc::new(registry::load_embedder(dir)?))
}
