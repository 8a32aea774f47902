//! BLEU-4, ROUGE-L and CIDEr-D over word tokens.

use std::collections::HashMap;

use crate::textio::tokenize;

pub const BLEU_EPS: f64 = 1e-9;
pub const ROUGE_BETA: f64 = 1.2;
pub const CIDER_SIGMA: f64 = 6.0;
pub const CIDER_SCALE: f64 = 10.0;

/// Metric tokens: lowercase words with punctuation split off.
pub fn metric_tokens(text: &str) -> Vec<String> {
    tokenize(text)
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Sentence BLEU-4 with brevity penalty; zero clipped counts become `ε`.
pub fn bleu4(candidate: &str, references: &[String]) -> f64 {
    let c = metric_tokens(candidate);
    let refs: Vec<Vec<String>> = references.iter().map(|r| metric_tokens(r)).collect();
    if c.is_empty() || refs.iter().all(Vec::is_empty) {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=4 {
        let cand = ngram_counts(&c, n);
        let mut max_ref: HashMap<&[String], usize> = HashMap::new();
        for r in &refs {
            for (g, k) in ngram_counts(r, n) {
                let e = max_ref.entry(g).or_insert(0);
                *e = (*e).max(k);
            }
        }
        let clipped: usize = cand.iter().map(|(g, &k)| k.min(max_ref.get(g).copied().unwrap_or(0))).sum();
        let total = c.len().saturating_sub(n - 1).max(1);
        let num = if clipped == 0 { BLEU_EPS } else { clipped as f64 };
        log_sum += (num / total as f64).ln();
    }
    let cl = c.len() as f64;
    let rl = refs
        .iter()
        .map(|r| r.len())
        .min_by(|a, b| (*a as f64 - cl).abs().total_cmp(&(*b as f64 - cl).abs()).then(a.cmp(b)))
        .expect("references") as f64;
    let bp = if cl > rl { 1.0 } else { (1.0 - rl / cl).exp() };
    (bp * (log_sum / 4.0).exp()).clamp(0.0, 1.0)
}

fn lcs(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0; b.len() + 1];
    for x in a {
        let mut cur = vec![0; b.len() + 1];
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        prev = cur;
    }
    prev[b.len()]
}

/// LCS F-measure with `β = 1.2`, maximized over references.
pub fn rouge_l(candidate: &str, references: &[String]) -> f64 {
    let c = metric_tokens(candidate);
    if c.is_empty() {
        return 0.0;
    }
    references
        .iter()
        .map(|r| {
            let r = metric_tokens(r);
            let l = lcs(&c, &r);
            if l == 0 {
                return 0.0;
            }
            let p = l as f64 / c.len() as f64;
            let rec = l as f64 / r.len() as f64;
            let b2 = ROUGE_BETA * ROUGE_BETA;
            (1.0 + b2) * p * rec / (rec + b2 * p)
        })
        .fold(0.0, f64::max)
}

type NgramVec = Vec<HashMap<Vec<String>, f64>>;

struct Doc {
    vecs: NgramVec,
    norms: Vec<f64>,
    len: usize,
}

fn tf_idf(tokens: &[String], df: &HashMap<Vec<String>, usize>, log_docs: f64) -> Doc {
    let mut vecs = Vec::with_capacity(4);
    let mut norms = Vec::with_capacity(4);
    for n in 1..=4 {
        let mut v = HashMap::new();
        for (g, k) in ngram_counts(tokens, n) {
            let d = df.get(g).copied().unwrap_or(0).max(1) as f64;
            v.insert(g.to_vec(), k as f64 * (log_docs - d.ln()));
        }
        norms.push(v.values().map(|x| x * x).sum::<f64>().sqrt());
        vecs.push(v);
    }
    Doc {
        vecs,
        norms,
        len: tokens.len(),
    }
}

fn cider_sim(h: &Doc, r: &Doc) -> f64 {
    let delta = h.len as f64 - r.len as f64;
    let penalty = (-(delta * delta) / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp();
    let mut total = 0.0;
    for n in 0..4 {
        let mut val = 0.0;
        for (g, hv) in &h.vecs[n] {
            if let Some(rv) = r.vecs[n].get(g) {
                val += hv.min(*rv) * rv;
            }
        }
        if h.norms[n] != 0.0 && r.norms[n] != 0.0 {
            val /= h.norms[n] * r.norms[n];
        }
        total += val * penalty;
    }
    total / 4.0
}

/// CIDEr-D per item; document frequencies come from the reference sets of
/// the whole corpus.
pub fn cider_d(items: &[(String, Vec<String>)]) -> Vec<f64> {
    let toks: Vec<(Vec<String>, Vec<Vec<String>>)> = items
        .iter()
        .map(|(c, rs)| (metric_tokens(c), rs.iter().map(|r| metric_tokens(r)).collect()))
        .collect();
    let mut df: HashMap<Vec<String>, usize> = HashMap::new();
    for (_, refs) in &toks {
        let mut seen: std::collections::HashSet<&[String]> = std::collections::HashSet::new();
        for r in refs {
            for n in 1..=4 {
                if r.len() >= n {
                    seen.extend(r.windows(n));
                }
            }
        }
        for g in seen {
            *df.entry(g.to_vec()).or_insert(0) += 1;
        }
    }
    let log_docs = (items.len().max(1) as f64).ln();
    toks.iter()
        .map(|(c, refs)| {
            if refs.is_empty() || c.is_empty() {
                return 0.0;
            }
            let h = tf_idf(c, &df, log_docs);
            let s: f64 = refs.iter().map(|r| cider_sim(&h, &tf_idf(r, &df, log_docs))).sum();
            (CIDER_SCALE * s / refs.len() as f64).max(0.0)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn refs(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn bleu_examples() {
        assert_eq!(bleu4("the cat sat on the mat", &refs(&["the cat sat on the mat"])), 1.0);
        assert!(bleu4("a b c d", &refs(&["w x y z"])) < 1e-8);
        assert_eq!(bleu4("", &refs(&["a"])), 0.0);
        // clipped precisions counted by hand: 5/6, 3/5, 1/4, and no 4-gram match out of 3
        let hand = (5.0f64 / 6.0 * 3.0 / 5.0 * 1.0 / 4.0 * 1e-9 / 3.0).powf(0.25);
        let got = bleu4("the cat sat on the mat", &refs(&["the cat is on the mat"]));
        assert!((got - hand).abs() < 1e-9, "{got} vs {hand}");
    }

    #[test]
    fn bleu_brevity_penalty() {
        // candidate of 3 tokens against a 6-token reference: BP = e^(1-2)
        let got = bleu4("the cat sat", &refs(&["the cat sat on the mat"]));
        let hand = (1.0f64 - 2.0).exp() * (1.0 * 1.0 * 1.0 * 1e-9f64).powf(0.25);
        assert!((got - hand).abs() < 1e-12, "{got} vs {hand}");
    }

    #[test]
    fn rouge_examples() {
        assert_eq!(rouge_l("a b c", &refs(&["a b c"])), 1.0);
        assert_eq!(rouge_l("a b c", &refs(&["x y"])), 0.0);
        assert!((rouge_l("the cat sat", &refs(&["the dog sat"])) - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(rouge_l("", &refs(&["a"])), 0.0);
    }

    #[test]
    fn cider_degenerate_idf_is_zero() {
        let items = vec![
            ("a red chair".to_string(), refs(&["a red chair"])),
            ("a red chair".to_string(), refs(&["a red chair"])),
        ];
        assert_eq!(cider_d(&items), vec![0.0, 0.0]);
        assert_eq!(cider_d(&items[..1]), vec![0.0]);
    }

    #[test]
    fn cider_exact_match_on_two_doc_corpus() {
        let items = vec![
            ("a red chair by the wall".to_string(), refs(&["a red chair by the wall"])),
            ("the blue table is small".to_string(), refs(&["the blue table is small"])),
        ];
        for s in cider_d(&items) {
            assert!((s - 10.0).abs() < 1e-12, "{s}");
        }
        let miss = vec![
            ("x y z".to_string(), refs(&["a red chair by the wall"])),
            ("the blue table is small".to_string(), refs(&["the blue table is small"])),
        ];
        assert_eq!(cider_d(&miss)[0], 0.0);
    }

    #[test]
    fn cider_length_penalty() {
        // single-token captions only have a unigram order, so three of four orders score 0
        let items = vec![
            ("a".to_string(), refs(&["a"])),
            ("b".to_string(), refs(&["b"])),
        ];
        assert!((cider_d(&items)[0] - 10.0 / 4.0).abs() < 1e-12);
    }
}
