//! Agreement between a metric and judge scores: does the metric pick the
//! judge-preferred image of a pair, and the judge-preferred model among four
//! hybrid models. Sampled estimates come with percentile-bootstrap
//! intervals; small inputs also have exact enumeration routes.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::judge::RatingRecord;
use crate::metrics::{Region, SampleKey, ScoredSample};
use crate::par::Exec;
use crate::raster::SizeBucket;
use crate::rng::RngStream;
use crate::scenegen::BenchItem;
use crate::vocab::PromptKind;

pub const DEFAULT_PAIRS: usize = 10_000;
pub const DEFAULT_ROUNDS: usize = 100_000;
pub const DEFAULT_BOOT: usize = 2_000;
pub const PAIR_BASELINE: f64 = 50.0;
pub const FOUR_WAY_BASELINE: f64 = 25.0;
/// Scores closer than this are tied.
pub const TIE_EPS: f64 = 1e-9;

fn beats(a: f64, b: f64) -> bool {
    a > b + TIE_EPS
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scored {
    pub sample_index: usize,
    pub metric: f64,
    pub judge: f64,
}

/// Metric and judge scores joined per sample, grouped by prompt and model.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AgreementData {
    /// `(item_id, prompt_kind)` -> model -> samples
    pub prompts: BTreeMap<(String, PromptKind), BTreeMap<String, Vec<Scored>>>,
}

impl AgreementData {
    /// Joins on `(item, prompt kind, model, sample)`. Every score needs a
    /// single-image rating; side-by-side records are ignored.
    pub fn join(scores: &[ScoredSample], ratings: &[RatingRecord]) -> Result<Self> {
        let judged: HashMap<SampleKey, f64> = ratings
            .iter()
            .filter(|r| !r.is_side_by_side())
            .map(|r| (r.sample_key(), r.score()))
            .collect();
        let mut data = Self::default();
        let mut missing = 0usize;
        for s in scores {
            let Some(&judge) = judged.get(&s.key()) else {
                missing += 1;
                continue;
            };
            data.insert(&s.item_id, s.prompt_kind, &s.model_id, s.sample_index, s.score, judge);
        }
        if missing > 0 {
            return Err(Error::Data(format!("{missing} scored samples have no rating")));
        }
        Ok(data)
    }

    pub fn insert(&mut self, item: &str, kind: PromptKind, model: &str, sample_index: usize, metric: f64, judge: f64) {
        self.prompts
            .entry((item.to_string(), kind))
            .or_default()
            .entry(model.to_string())
            .or_default()
            .push(Scored {
                sample_index,
                metric,
                judge,
            });
    }

    pub fn filter_kind(&self, kind: PromptKind) -> Self {
        Self {
            prompts: self
                .prompts
                .iter()
                .filter(|((_, k), _)| *k == kind)
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Same data with the metric replaced by seeded uniform noise.
    pub fn with_random_metric(&self, rng: &RngStream) -> Self {
        let mut r = rng.rng();
        let mut out = self.clone();
        for models in out.prompts.values_mut() {
            for samples in models.values_mut() {
                for s in samples {
                    s.metric = r.random();
                }
            }
        }
        out
    }

    /// Same data with the judge score used as the metric.
    pub fn with_judge_as_metric(&self) -> Self {
        let mut out = self.clone();
        for models in out.prompts.values_mut() {
            for samples in models.values_mut() {
                for s in samples {
                    s.metric = s.judge;
                }
            }
        }
        out
    }

    pub fn n_samples(&self) -> usize {
        self.prompts.values().flat_map(|m| m.values()).map(Vec::len).sum()
    }

    fn pooled(&self) -> Result<Vec<Vec<Scored>>> {
        let pooled: Vec<Vec<Scored>> = self
            .prompts
            .values()
            .map(|models| models.values().flatten().copied().collect())
            .collect();
        if pooled.is_empty() || pooled.iter().any(|p| p.len() < 2) {
            return Err(Error::Data("every prompt needs at least two scored samples".into()));
        }
        Ok(pooled)
    }

    /// Items (across prompt kinds) as rows of per-model sample lists, with
    /// the model order shared by all rows.
    fn by_model(&self) -> Result<(Vec<String>, Vec<Vec<Vec<Scored>>>)> {
        let models: Vec<String> = self
            .prompts
            .values()
            .next()
            .map(|m| m.keys().cloned().collect())
            .unwrap_or_default();
        if models.is_empty() {
            return Err(Error::Data("no scored samples".into()));
        }
        let mut rows = Vec::new();
        for ((item, kind), m) in &self.prompts {
            let keys: Vec<&String> = m.keys().collect();
            if keys.len() != models.len() || keys.iter().zip(&models).any(|(a, b)| *a != b) {
                return Err(Error::Data(format!("{item}/{} lacks some models", kind.as_str())));
            }
            if m.values().any(Vec::is_empty) {
                return Err(Error::Data(format!("{item}/{} has a model without samples", kind.as_str())));
            }
            rows.push(m.values().cloned().collect());
        }
        Ok((models, rows))
    }
}

/// One pair draw: `None` when the judge ties, else whether the metric
/// strictly prefers the same image.
fn pair_outcome(a: &Scored, b: &Scored) -> Option<bool> {
    let judge_a = if beats(a.judge, b.judge) {
        true
    } else if beats(b.judge, a.judge) {
        false
    } else {
        return None;
    };
    let metric_a = beats(a.metric, b.metric);
    let metric_b = beats(b.metric, a.metric);
    Some(if judge_a { metric_a } else { metric_b })
}

/// Agreement percentage over the non-abstaining outcomes, with a bootstrap
/// interval over those outcomes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    pub prompt_kind: Option<PromptKind>,
    pub region: Option<Region>,
    pub metric: String,
    pub agreement_pct: f64,
    pub ci95: (f64, f64),
    pub n_comparisons: usize,
    pub random_baseline: f64,
}

impl AgreementReport {
    pub fn labeled(mut self, prompt_kind: Option<PromptKind>, region: Option<Region>, metric: &str) -> Self {
        self.prompt_kind = prompt_kind;
        self.region = region;
        self.metric = metric.to_string();
        self
    }
}

fn report_from(outcomes: &[bool], baseline: f64, n_boot: usize, rng: &RngStream, exec: Exec) -> Result<AgreementReport> {
    if outcomes.is_empty() {
        return Err(Error::Data("no comparison survived judge-tie exclusion".into()));
    }
    let values: Vec<f64> = outcomes.iter().map(|&b| if b { 100.0 } else { 0.0 }).collect();
    let pct = values.iter().sum::<f64>() / values.len() as f64;
    let ci95 = if values.len() >= 2 {
        bootstrap_ci(&values, n_boot, &rng.child("bootstrap"), exec)?
    } else {
        (pct, pct)
    };
    Ok(AgreementReport {
        prompt_kind: None,
        region: None,
        metric: String::new(),
        agreement_pct: pct,
        ci95,
        n_comparisons: outcomes.len(),
        random_baseline: baseline,
    })
}

/// Samples `n_pairs` image pairs: a prompt uniformly with replacement, then
/// two distinct samples of that prompt. Judge ties are dropped; metric ties
/// count as disagreement.
pub fn best_of_two_agreement(
    data: &AgreementData,
    n_pairs: usize,
    n_boot: usize,
    rng: &RngStream,
    exec: Exec,
) -> Result<AgreementReport> {
    pair_agreement(data, n_pairs, n_boot, rng, exec, false)
}

/// Chance baseline of [`best_of_two_agreement`]: the same pair draws, with
/// both metric values replaced by fresh uniform noise in every comparison.
pub fn best_of_two_chance(
    data: &AgreementData,
    n_pairs: usize,
    n_boot: usize,
    rng: &RngStream,
    exec: Exec,
) -> Result<AgreementReport> {
    pair_agreement(data, n_pairs, n_boot, rng, exec, true)
}

fn pair_agreement(
    data: &AgreementData,
    n_pairs: usize,
    n_boot: usize,
    rng: &RngStream,
    exec: Exec,
    chance: bool,
) -> Result<AgreementReport> {
    let pooled = data.pooled()?;
    let draws = rng.child("pairs");
    let outcomes: Vec<bool> = exec
        .map(n_pairs, |i| {
            let mut r = draws.rng_at(i as u64);
            let p = &pooled[r.random_range(0..pooled.len())];
            let a = r.random_range(0..p.len());
            let mut b = r.random_range(0..p.len() - 1);
            if b >= a {
                b += 1;
            }
            let (mut sa, mut sb) = (p[a], p[b]);
            if chance {
                sa.metric = r.random();
                sb.metric = r.random();
            }
            pair_outcome(&sa, &sb)
        })
        .into_iter()
        .flatten()
        .collect();
    report_from(&outcomes, PAIR_BASELINE, n_boot, rng, exec)
}

/// Exact agreement as a fraction `numerator / denominator`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExactAgreement {
    pub numerator: u128,
    pub denominator: u128,
}

impl ExactAgreement {
    pub fn pct(&self) -> f64 {
        100.0 * self.numerator as f64 / self.denominator as f64
    }

    /// Equality as rationals.
    pub fn same_ratio(&self, num: u128, den: u128) -> bool {
        match (self.numerator.checked_mul(den), self.denominator.checked_mul(num)) {
            (Some(a), Some(b)) => a == b,
            _ => false,
        }
    }
}

fn gcd(a: u128, b: u128) -> u128 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn lcm(a: u128, b: u128) -> Result<u128> {
    (a / gcd(a, b))
        .checked_mul(b)
        .ok_or_else(|| Error::Config("exact enumeration overflows".into()))
}

fn checked(v: Option<u128>) -> Result<u128> {
    v.ok_or_else(|| Error::Config("exact enumeration overflows".into()))
}

/// Expected value of the pair sampler's estimate, by enumerating every
/// unordered pair of every prompt with its draw probability.
pub fn best_of_two_exact(data: &AgreementData) -> Result<ExactAgreement> {
    let pooled = data.pooled()?;
    let pairs = |n: usize| (n * (n - 1) / 2) as u128;
    let mut l = 1u128;
    for p in &pooled {
        l = lcm(l, pairs(p.len()))?;
    }
    let (mut num, mut den) = (0u128, 0u128);
    for p in &pooled {
        let w = l / pairs(p.len());
        for i in 0..p.len() {
            for j in i + 1..p.len() {
                if let Some(agree) = pair_outcome(&p[i], &p[j]) {
                    den = checked(den.checked_add(w))?;
                    if agree {
                        num = checked(num.checked_add(w))?;
                    }
                }
            }
        }
    }
    if den == 0 {
        return Err(Error::Data("every pair is a judge tie".into()));
    }
    Ok(ExactAgreement {
        numerator: num,
        denominator: den,
    })
}

/// A synthetic model taking, for every prompt, one sample of one source
/// model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HybridModel {
    pub assignment: BTreeMap<(String, PromptKind), (String, usize)>,
}

/// Per prompt: a model uniformly, then one of its samples uniformly.
pub fn make_hybrid(data: &AgreementData, rng: &mut impl Rng) -> Result<HybridModel> {
    let mut assignment = BTreeMap::new();
    for (key, models) in &data.prompts {
        if models.is_empty() || models.values().any(Vec::is_empty) {
            return Err(Error::Data(format!("{}/{} lacks samples", key.0, key.1.as_str())));
        }
        let (m, samples) = models.iter().nth(rng.random_range(0..models.len())).expect("in range");
        let s = &samples[rng.random_range(0..samples.len())];
        assignment.insert(key.clone(), (m.clone(), s.sample_index));
    }
    Ok(HybridModel { assignment })
}

/// Mean metric and judge score of a hybrid's selected samples.
pub fn hybrid_scores(data: &AgreementData, hybrid: &HybridModel) -> Result<(f64, f64)> {
    let mut sums = (0.0, 0.0);
    for (key, (m, idx)) in &hybrid.assignment {
        let s = data
            .prompts
            .get(key)
            .and_then(|models| models.get(m))
            .and_then(|v| v.iter().find(|s| s.sample_index == *idx))
            .ok_or_else(|| Error::Data(format!("hybrid references unknown sample {m}#{idx}")))?;
        sums.0 += s.metric;
        sums.1 += s.judge;
    }
    let n = hybrid.assignment.len().max(1) as f64;
    Ok((sums.0 / n, sums.1 / n))
}

/// Winner among `(metric, judge)` score pairs: `None` when the judge has
/// no unique best, else whether the metric's unique best is the same one.
fn four_way_outcome(h: &[(f64, f64)]) -> Option<bool> {
    let unique_best = |f: &dyn Fn(&(f64, f64)) -> f64| {
        (0..h.len()).find(|&i| (0..h.len()).all(|j| j == i || beats(f(&h[i]), f(&h[j]))))
    };
    let judge = unique_best(&|x| x.1)?;
    Some(unique_best(&|x| x.0) == Some(judge))
}

/// Per round builds four hybrids and checks whether the metric-best equals
/// the judge-best. Rounds without a unique judge-best are dropped; metric
/// ties count as disagreement.
pub fn best_of_four_agreement(
    data: &AgreementData,
    n_rounds: usize,
    n_boot: usize,
    rng: &RngStream,
    exec: Exec,
) -> Result<AgreementReport> {
    four_way_agreement(data, n_rounds, n_boot, rng, exec, false)
}

/// Chance baseline of [`best_of_four_agreement`]: each hybrid's metric is
/// fresh uniform noise in every round.
pub fn best_of_four_chance(
    data: &AgreementData,
    n_rounds: usize,
    n_boot: usize,
    rng: &RngStream,
    exec: Exec,
) -> Result<AgreementReport> {
    four_way_agreement(data, n_rounds, n_boot, rng, exec, true)
}

fn four_way_agreement(
    data: &AgreementData,
    n_rounds: usize,
    n_boot: usize,
    rng: &RngStream,
    exec: Exec,
    chance: bool,
) -> Result<AgreementReport> {
    let (_, rows) = data.by_model()?;
    let n_items = rows.len() as f64;
    let draws = rng.child("rounds");
    let outcomes: Vec<bool> = exec
        .map(n_rounds, |i| {
            let mut r = draws.rng_at(i as u64);
            let mut hybrids = [(0.0, 0.0); 4];
            for h in hybrids.iter_mut() {
                for models in &rows {
                    let samples = &models[r.random_range(0..models.len())];
                    let s = &samples[r.random_range(0..samples.len())];
                    h.0 += s.metric;
                    h.1 += s.judge;
                }
                h.0 /= n_items;
                h.1 /= n_items;
            }
            if chance {
                for h in hybrids.iter_mut() {
                    h.0 = r.random();
                }
            }
            four_way_outcome(&hybrids)
        })
        .into_iter()
        .flatten()
        .collect();
    report_from(&outcomes, FOUR_WAY_BASELINE, n_boot, rng, exec)
}

/// Upper bound on distinct hybrids for exact enumeration.
pub const MAX_EXACT_HYBRIDS: usize = 20_000;

/// Expected value of the four-hybrid estimate. With `p` the hybrid
/// distribution, agreement is `sum p(h) q(h)^3 / sum p(h) r(h)^3` where
/// `q(h)` is the chance another hybrid is strictly below `h` on both scores
/// and `r(h)` the chance it is strictly below on the judge score.
pub fn best_of_four_exact(data: &AgreementData) -> Result<ExactAgreement> {
    let (_, rows) = data.by_model()?;
    // integer draw weight of every (model, sample) outcome per item
    let mut per_item: Vec<Vec<(u128, Scored)>> = Vec::new();
    let mut total = 1usize;
    for models in &rows {
        let mut l = 1u128;
        for m in models {
            l = lcm(l, m.len() as u128)?;
        }
        let outcomes: Vec<(u128, Scored)> = models
            .iter()
            .flat_map(|m| m.iter().map(move |s| (l / m.len() as u128, *s)))
            .collect();
        total = total.saturating_mul(outcomes.len());
        per_item.push(outcomes);
    }
    if total > MAX_EXACT_HYBRIDS {
        return Err(Error::Config(format!("{total} hybrids exceed the exact-enumeration limit")));
    }
    let n_items = rows.len() as f64;
    let mut hybrids: Vec<(u128, f64, f64)> = vec![(1, 0.0, 0.0)];
    for outcomes in &per_item {
        let mut next = Vec::with_capacity(hybrids.len() * outcomes.len());
        for h in &hybrids {
            for (w, s) in outcomes {
                next.push((checked(h.0.checked_mul(*w))?, h.1 + s.metric, h.2 + s.judge));
            }
        }
        hybrids = next;
    }
    for h in &mut hybrids {
        h.1 /= n_items;
        h.2 /= n_items;
    }
    let cube = |v: u128| checked(v.checked_mul(v).and_then(|x| x.checked_mul(v)));
    let (mut num, mut den) = (0u128, 0u128);
    for h in &hybrids {
        let (mut q, mut r) = (0u128, 0u128);
        for o in &hybrids {
            if beats(h.2, o.2) {
                r += o.0;
                if beats(h.1, o.1) {
                    q += o.0;
                }
            }
        }
        num = checked(num.checked_add(checked(h.0.checked_mul(cube(q)?))?))?;
        den = checked(den.checked_add(checked(h.0.checked_mul(cube(r)?))?))?;
    }
    if den == 0 {
        return Err(Error::Data("the judge never has a unique best hybrid".into()));
    }
    Ok(ExactAgreement {
        numerator: num,
        denominator: den,
    })
}

/// Percentile bootstrap 95% interval of the mean.
pub fn bootstrap_ci(values: &[f64], n_boot: usize, rng: &RngStream, exec: Exec) -> Result<(f64, f64)> {
    if values.len() < 2 {
        return Err(Error::Data("bootstrap needs at least two observations".into()));
    }
    if n_boot == 0 {
        return Err(Error::Config("bootstrap needs at least one resample".into()));
    }
    let n = values.len();
    let mut means = exec.map(n_boot, |b| {
        let mut r = rng.rng_at(b as u64);
        (0..n).map(|_| values[r.random_range(0..n)]).sum::<f64>() / n as f64
    });
    means.sort_by(f64::total_cmp);
    let at = |q: f64| means[((q * n_boot as f64).floor() as usize).min(n_boot - 1)];
    Ok((at(0.025), at(0.975)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BreakdownBy {
    AttributeCategory,
    ObjectCategory,
    Scene,
    SizeBucket,
    PromptKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BreakdownRow {
    pub model_id: String,
    pub category: String,
    pub n: usize,
    pub correct: usize,
    pub pct: f64,
}

fn category_of(item: &BenchItem, kind: PromptKind, by: BreakdownBy) -> String {
    match by {
        BreakdownBy::AttributeCategory => item.categories.attribute_category.as_str().into(),
        BreakdownBy::ObjectCategory => item.categories.object_category.as_str().into(),
        BreakdownBy::Scene => item.categories.scene.as_str().into(),
        BreakdownBy::SizeBucket => SizeBucket::as_str(&item.size_bucket).into(),
        BreakdownBy::PromptKind => kind.as_str().into(),
    }
}

/// Percentage of single-image records answered correct overall, per model
/// and category.
pub fn breakdown(ratings: &[RatingRecord], items: &[BenchItem], by: BreakdownBy) -> Result<Vec<BreakdownRow>> {
    let index: HashMap<&str, &BenchItem> = items.iter().map(|i| (i.id.as_str(), i)).collect();
    let mut cells: BTreeMap<(String, String), (usize, usize)> = BTreeMap::new();
    for r in ratings.iter().filter(|r| !r.is_side_by_side()) {
        let item = index
            .get(r.item_id.as_str())
            .ok_or_else(|| Error::Data(format!("rating for unknown item {}", r.item_id)))?;
        let cell = cells
            .entry((r.model_id.clone(), category_of(item, r.prompt_kind, by)))
            .or_default();
        cell.0 += 1;
        cell.1 += r.correct_overall() as usize;
    }
    Ok(cells
        .into_iter()
        .map(|((model_id, category), (n, correct))| BreakdownRow {
            model_id,
            category,
            n,
            correct,
            pct: 100.0 * correct as f64 / n as f64,
        })
        .collect())
}

pub fn breakdown_csv(rows: &[BreakdownRow]) -> String {
    let mut out = String::from("model,category,n,correct,pct\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{},{:.1}\n", r.model_id, r.category, r.n, r.correct, r.pct));
    }
    out
}

fn label<T>(v: Option<T>, f: impl Fn(&T) -> &'static str) -> &'static str {
    v.as_ref().map_or("All", f)
}

fn table_cells(reports: &[AgreementReport]) -> (Vec<String>, Vec<(String, String)>, HashMap<(String, String, String), &AgreementReport>) {
    let mut metrics: Vec<String> = Vec::new();
    let mut rows: Vec<(String, String)> = Vec::new();
    let mut cells = HashMap::new();
    for r in reports {
        let row = (
            label(r.prompt_kind, PromptKind::as_str).to_string(),
            label(r.region, Region::as_str).to_string(),
        );
        if !metrics.contains(&r.metric) {
            metrics.push(r.metric.clone());
        }
        if !rows.contains(&row) {
            rows.push(row.clone());
        }
        cells.insert((row.0, row.1, r.metric.clone()), r);
    }
    (metrics, rows, cells)
}

/// One row per prompt kind and region, one column per metric, plus the
/// random baseline.
pub fn agreement_table_csv(reports: &[AgreementReport]) -> String {
    let (metrics, rows, cells) = table_cells(reports);
    let mut out = String::from("prompt,image");
    for m in &metrics {
        out.push_str(&format!(",{m},{m} ci_lo,{m} ci_hi"));
    }
    out.push_str(",Rand\n");
    for (p, g) in rows {
        out.push_str(&format!("{p},{g}"));
        let mut baseline = None;
        for m in &metrics {
            match cells.get(&(p.clone(), g.clone(), m.clone())) {
                Some(r) => {
                    baseline = Some(r.random_baseline);
                    out.push_str(&format!(",{:.1},{:.1},{:.1}", r.agreement_pct, r.ci95.0, r.ci95.1));
                }
                None => out.push_str(",,,"),
            }
        }
        out.push_str(&format!(",{}\n", baseline.map_or(String::new(), |b| format!("{b:.1}"))));
    }
    out
}

pub fn agreement_table_markdown(reports: &[AgreementReport]) -> String {
    let (metrics, rows, cells) = table_cells(reports);
    let mut out = String::from("| Prompt | Image |");
    for m in &metrics {
        out.push_str(&format!(" {m} |"));
    }
    out.push_str(" Rand |\n|---|---|");
    out.push_str(&"---|".repeat(metrics.len() + 1));
    out.push('\n');
    for (p, g) in rows {
        out.push_str(&format!("| {p} | {g} |"));
        let mut baseline = None;
        for m in &metrics {
            match cells.get(&(p.clone(), g.clone(), m.clone())) {
                Some(r) => {
                    baseline = Some(r.random_baseline);
                    let half = (r.ci95.1 - r.ci95.0) / 2.0;
                    out.push_str(&format!(" {:.1} ±{:.1} |", r.agreement_pct, half));
                }
                None => out.push_str(" |"),
            }
        }
        out.push_str(&format!(" {} |\n", baseline.map_or(String::new(), |b| format!("{b:.1}"))));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn micro(kind: PromptKind) -> AgreementData {
        let mut d = AgreementData::default();
        let mut r = RngStream::new(3, "micro").rng();
        for item in ["a", "b"] {
            for (m, n) in [("m0", 3), ("m1", 3), ("m2", 2), ("m3", 2)] {
                for s in 0..n {
                    let judge = r.random_range(0..4) as f64 / 3.0;
                    let metric = r.random_range(0..5) as f64;
                    d.insert(item, kind, m, s, metric, judge);
                }
            }
        }
        d
    }

    #[test]
    fn self_agreement_is_total() {
        let d = micro(PromptKind::MaskSimple).with_judge_as_metric();
        let rng = RngStream::new(1, "t");
        let two = best_of_two_agreement(&d, 2000, 200, &rng, Exec::default()).unwrap();
        assert_eq!(two.agreement_pct, 100.0);
        let four = best_of_four_agreement(&d, 2000, 200, &rng, Exec::default()).unwrap();
        assert_eq!(four.agreement_pct, 100.0);
        assert_eq!(best_of_two_exact(&d).unwrap().pct(), 100.0);
        assert_eq!(best_of_four_exact(&d).unwrap().pct(), 100.0);
    }

    #[test]
    fn sampled_estimates_are_seeded() {
        let d = micro(PromptKind::Full);
        let rng = RngStream::new(9, "t");
        let a = best_of_four_agreement(&d, 3000, 100, &rng, Exec::Sequential).unwrap();
        let b = best_of_four_agreement(&d, 3000, 100, &rng, Exec::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sampled_routes_converge_to_exact() {
        let d = micro(PromptKind::MaskRich);
        let rng = RngStream::new(5, "conv");
        let exact2 = best_of_two_exact(&d).unwrap().pct();
        let s2 = best_of_two_agreement(&d, 40_000, 10, &rng, Exec::default()).unwrap();
        let se2 = (exact2 * (100.0 - exact2) / s2.n_comparisons as f64).sqrt();
        assert!((s2.agreement_pct - exact2).abs() < 4.0 * se2, "{} vs {exact2}", s2.agreement_pct);

        let exact4 = best_of_four_exact(&d).unwrap().pct();
        let s4 = best_of_four_agreement(&d, 40_000, 10, &rng, Exec::default()).unwrap();
        let se4 = (exact4 * (100.0 - exact4) / s4.n_comparisons as f64).sqrt();
        assert!((s4.agreement_pct - exact4).abs() < 4.0 * se4, "{} vs {exact4}", s4.agreement_pct);
    }

    #[test]
    fn hybrid_over_one_model_stays_in_it() {
        let mut d = AgreementData::default();
        for item in ["a", "b", "c"] {
            for s in 0..3 {
                d.insert(item, PromptKind::Full, "only", s, s as f64, 0.5);
            }
        }
        let mut r = RngStream::new(1, "h").rng();
        let h = make_hybrid(&d, &mut r).unwrap();
        assert_eq!(h.assignment.len(), 3);
        assert!(h.assignment.values().all(|(m, _)| m == "only"));
    }

    #[test]
    fn hybrid_two_by_two_is_uniform() {
        let mut d = AgreementData::default();
        for item in ["a", "b"] {
            for m in ["x", "y"] {
                d.insert(item, PromptKind::Full, m, 0, 0.0, 0.0);
            }
        }
        let n = 40_000;
        let mut counts: BTreeMap<Vec<String>, usize> = BTreeMap::new();
        for seed in 0..n {
            let mut r = RngStream::new(seed, "hybrid").rng();
            let h = make_hybrid(&d, &mut r).unwrap();
            *counts.entry(h.assignment.values().map(|v| v.0.clone()).collect()).or_default() += 1;
        }
        assert_eq!(counts.len(), 4);
        // chi-square with 3 dof; 16.27 is the 0.001 critical value
        let e = n as f64 / 4.0;
        let chi: f64 = counts.values().map(|&c| (c as f64 - e).powi(2) / e).sum();
        assert!(chi < 16.27, "chi2 {chi}");
    }

    #[test]
    fn hybrid_scores_average_selected_samples() {
        let d = micro(PromptKind::Full);
        let mut r = RngStream::new(2, "avg").rng();
        let h = make_hybrid(&d, &mut r).unwrap();
        let (mut m, mut j) = (0.0, 0.0);
        for (key, (model, idx)) in &h.assignment {
            let s = d.prompts[key][model].iter().find(|s| s.sample_index == *idx).unwrap();
            m += s.metric;
            j += s.judge;
        }
        let got = hybrid_scores(&d, &h).unwrap();
        assert!((got.0 - m / 2.0).abs() < 1e-12 && (got.1 - j / 2.0).abs() < 1e-12);
    }

    #[test]
    fn bootstrap_examples() {
        let rng = RngStream::new(4, "boot");
        assert_eq!(bootstrap_ci(&[3.0; 50], 500, &rng, Exec::default()).unwrap(), (3.0, 3.0));
        assert!(bootstrap_ci(&[1.0], 500, &rng, Exec::default()).is_err());
        let mut r = RngStream::new(5, "coin").rng();
        let coin: Vec<f64> = (0..10_000).map(|_| if r.random::<bool>() { 100.0 } else { 0.0 }).collect();
        let mean = coin.iter().sum::<f64>() / coin.len() as f64;
        let (lo, hi) = bootstrap_ci(&coin, DEFAULT_BOOT, &rng, Exec::default()).unwrap();
        assert!(lo <= mean && mean <= hi);
        assert!(hi - lo < 2.5, "width {}", hi - lo);
    }

    #[test]
    fn join_requires_ratings() {
        let s = ScoredSample {
            item_id: "a".into(),
            prompt_kind: PromptKind::Full,
            model_id: "m".into(),
            sample_index: 0,
            score: 1.0,
        };
        assert!(matches!(AgreementData::join(&[s], &[]), Err(Error::Data(_))));
    }

    #[test]
    fn too_few_samples_per_prompt() {
        let mut d = AgreementData::default();
        d.insert("a", PromptKind::Full, "m", 0, 1.0, 1.0);
        let rng = RngStream::new(1, "x");
        assert!(best_of_two_agreement(&d, 10, 10, &rng, Exec::Sequential).is_err());
        assert!(best_of_two_exact(&d).is_err());
    }

    #[test]
    fn tables_render_rows_and_baseline() {
        let r = AgreementReport {
            prompt_kind: Some(PromptKind::MaskSimple),
            region: Some(Region::Crop),
            metric: "T2I".into(),
            agreement_pct: 61.25,
            ci95: (60.0, 62.5),
            n_comparisons: 9000,
            random_baseline: 50.0,
        };
        let csv = agreement_table_csv(std::slice::from_ref(&r));
        assert_eq!(csv.lines().nth(1), Some("Mask-Simple,Crop,61.2,60.0,62.5,50.0"));
        let md = agreement_table_markdown(&[r]);
        assert!(md.contains("| Mask-Simple | Crop | 61.2 ±1.2 | 50.0 |"), "{md}");
    }
}
