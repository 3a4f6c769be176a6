//! Brute-force enumeration of the agreement estimators' expectations,
//! written independently of the library routes.

use inpaintkit_core::agreement::{AgreementData, Scored};
use inpaintkit_core::vocab::PromptKind;
use inpaintkit_core::RngStream;
use rand::Rng;

const EPS: f64 = 1e-9;

fn gcd(a: u128, b: u128) -> u128 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn lcm(a: u128, b: u128) -> u128 {
    a / gcd(a, b) * b
}

/// Two items, four models with 3, 3, 2 and 2 samples: 20 samples whose
/// scores come from small grids so ties occur.
pub fn micro_set(seed: u64) -> AgreementData {
    let mut r = RngStream::new(seed, "micro").rng();
    let mut data = AgreementData::default();
    for item in ["i0", "i1"] {
        for (m, n) in [("ma", 3), ("mb", 3), ("mc", 2), ("md", 2)] {
            for s in 0..n {
                let judge = r.random_range(0..4) as f64 / 3.0;
                let metric = r.random_range(0..6) as f64 * 5.0;
                data.insert(item, PromptKind::MaskSimple, m, s, metric, judge);
            }
        }
    }
    data
}

/// Every ordered pair of distinct samples of every prompt, weighted by its
/// draw probability scaled to integers.
pub fn brute_best_of_two(data: &AgreementData) -> (u128, u128) {
    let pooled: Vec<Vec<Scored>> = data
        .prompts
        .values()
        .map(|m| m.values().flatten().copied().collect())
        .collect();
    let scale = pooled
        .iter()
        .map(|p| (p.len() * (p.len() - 1)) as u128)
        .fold(1, lcm);
    let (mut num, mut den) = (0u128, 0u128);
    for p in &pooled {
        let w = scale / (p.len() * (p.len() - 1)) as u128;
        for (i, a) in p.iter().enumerate() {
            for (j, b) in p.iter().enumerate() {
                if i == j || (a.judge - b.judge).abs() <= EPS {
                    continue;
                }
                den += w;
                let (win, lose) = if a.judge > b.judge { (a, b) } else { (b, a) };
                if win.metric > lose.metric + EPS {
                    num += w;
                }
            }
        }
    }
    (num, den)
}

/// Every ordered 4-tuple of hybrids with its probability as an integer
/// weight.
pub fn brute_best_of_four(data: &AgreementData) -> (u128, u128) {
    let items: Vec<Vec<Vec<Scored>>> = data.prompts.values().map(|m| m.values().cloned().collect()).collect();
    let mut hybrids: Vec<(u128, f64, f64)> = vec![(1, 0.0, 0.0)];
    for models in &items {
        let scale = models.iter().map(|s| s.len() as u128).fold(1, lcm);
        let mut next = Vec::new();
        for (w, metric, judge) in &hybrids {
            for samples in models {
                for s in samples {
                    next.push((w * (scale / samples.len() as u128), metric + s.metric, judge + s.judge));
                }
            }
        }
        hybrids = next;
    }
    let n = items.len() as f64;
    let hybrids: Vec<(u128, f64, f64)> = hybrids.into_iter().map(|(w, m, j)| (w, m / n, j / n)).collect();
    let best = |four: [usize; 4], f: &dyn Fn(usize) -> f64| -> Option<usize> {
        (0..4)
            .find(|&p| (0..4).all(|q| q == p || f(four[p]) > f(four[q]) + EPS))
            .map(|p| four[p])
    };
    let h = hybrids.len();
    let (mut num, mut den) = (0u128, 0u128);
    for a in 0..h {
        for b in 0..h {
            let wab = hybrids[a].0 * hybrids[b].0;
            for c in 0..h {
                let wabc = wab * hybrids[c].0;
                for d in 0..h {
                    let four = [a, b, c, d];
                    let Some(jb) = best(four, &|i| hybrids[i].2) else {
                        continue;
                    };
                    let w = wabc * hybrids[d].0;
                    den += w;
                    if best(four, &|i| hybrids[i].1) == Some(jb) {
                        num += w;
                    }
                }
            }
        }
    }
    (num, den)
}
