//! Seeded synthetic corpora.
//!
//! [`tradeoff_fixture`] builds train/eval data for the surrogate corrector where
//! each error pattern is also seen, uncorrected, in correct sentences. The
//! ratio of erroneous to correct occurrences differs per pattern, so each
//! pattern stops firing at a different final-stage learning rate.
//! [`ratio_corpus`] builds a corpus with an exact erroneous-pair count.

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Corpus, SentencePair};
use crate::m2::{M2Edit, M2Record};

#[derive(Debug, Clone)]
pub struct TradeoffFixture {
    /// Named `first` and `last` (see [`TradeoffSpec`]).
    pub corpora: Vec<Corpus>,
    pub eval: Vec<SentencePair>,
    pub gold: Vec<M2Record>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TradeoffSpec {
    pub seed: u64,
    pub n_train: usize,
    pub n_eval: usize,
    pub n_patterns: usize,
    /// Erroneous occurrences per pattern in training data.
    pub errors_per_pattern: usize,
    /// Range of erroneous/correct occurrence ratios across patterns.
    pub min_ratio: f64,
    pub max_ratio: f64,
    /// Correct eval occurrences relative to the training proportion.
    pub eval_correct_scale: f64,
    pub first: String,
    pub last: String,
}

impl Default for TradeoffSpec {
    fn default() -> Self {
        Self {
            seed: 7,
            n_train: 500,
            n_eval: 200,
            n_patterns: 30,
            errors_per_pattern: 4,
            min_ratio: 0.03,
            max_ratio: 0.16,
            eval_correct_scale: 0.25,
            first: "fce-train".to_owned(),
            last: "bea-train".to_owned(),
        }
    }
}

struct Pattern {
    left: String,
    wrong: String,
    right: String,
    fix: String,
    /// Number of correct training sentences containing the pattern.
    correct_sentences: usize,
}

fn filler(rng: &mut ChaCha8Rng, out: &mut Vec<String>, max: usize) {
    for _ in 0..rng.random_range(0..=max) {
        out.push(format!("w{}", rng.random_range(0..80)));
    }
}

fn pair_from(id: String, origin: &str, src: Vec<String>, trg: Vec<String>) -> SentencePair {
    SentencePair::new(id, src.join(" "), trg.join(" "))
        .tokenized(true)
        .with_origin(origin)
}

/// Builds a sentence from segments, each surrounded by filler. Returns source
/// tokens, target tokens and the source index of the erroneous token if any.
fn build_sentence(
    rng: &mut ChaCha8Rng,
    segments: &[(&Pattern, bool)],
) -> (Vec<String>, Vec<String>, Option<(usize, String)>) {
    let mut src = Vec::new();
    let mut trg = Vec::new();
    let mut error = None;
    for (p, erroneous) in segments {
        let mut fill = Vec::new();
        filler(rng, &mut fill, 2);
        src.extend(fill.iter().cloned());
        trg.extend(fill);
        src.push(p.left.clone());
        trg.push(p.left.clone());
        if *erroneous {
            error = Some((src.len(), p.fix.clone()));
        }
        src.push(p.wrong.clone());
        trg.push(if *erroneous { p.fix.clone() } else { p.wrong.clone() });
        src.push(p.right.clone());
        trg.push(p.right.clone());
    }
    let mut fill = Vec::new();
    filler(rng, &mut fill, 2);
    src.extend(fill.iter().cloned());
    trg.extend(fill);
    if src.is_empty() {
        src.push("w0".to_owned());
        trg.push("w0".to_owned());
    }
    (src, trg, error)
}

pub fn tradeoff_fixture(spec: &TradeoffSpec) -> TradeoffFixture {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let k = spec.errors_per_pattern.max(1);
    let n_err_total = spec.n_patterns * k;
    let first_err = n_err_total / 2;
    let last_err = n_err_total - first_err;
    // The first corpus holds half the errors plus plain filler sentences; the
    // last holds the other half plus every correct occurrence of a pattern.
    let first_plain = (spec.n_train * 3 / 10).saturating_sub(first_err);
    let last_correct = spec.n_train.saturating_sub(first_err + first_plain + last_err).max(1);
    let denom = (spec.n_patterns.max(2) - 1) as f64;
    let patterns: Vec<Pattern> = (0..spec.n_patterns)
        .map(|p| {
            let t = p as f64 / denom;
            let ratio = spec.min_ratio * (spec.max_ratio / spec.min_ratio).powf(t);
            Pattern {
                left: format!("l{p}"),
                wrong: format!("x{p}"),
                right: format!("r{p}"),
                fix: format!("y{p}"),
                correct_sentences: ((k as f64 / ratio).round() as usize).clamp(1, last_correct),
            }
        })
        .collect();

    let mut error_slots: Vec<usize> = (0..spec.n_patterns).flat_map(|p| std::iter::repeat_n(p, k)).collect();
    error_slots.shuffle(&mut rng);
    let (first_slots, last_slots) = error_slots.split_at(first_err);

    let mut first = Vec::new();
    for (i, &p) in first_slots.iter().enumerate() {
        let (s, t, _) = build_sentence(&mut rng, &[(&patterns[p], true)]);
        first.push(pair_from(format!("{}:{i}", spec.first), &spec.first, s, t));
    }
    for i in 0..first_plain {
        let (s, t, _) = build_sentence(&mut rng, &[]);
        first.push(pair_from(format!("{}:{}", spec.first, first_err + i), &spec.first, s, t));
    }
    first.shuffle(&mut rng);

    let mut correct_members: Vec<Vec<usize>> = vec![Vec::new(); last_correct];
    for (p, pat) in patterns.iter().enumerate() {
        for s in index::sample(&mut rng, last_correct, pat.correct_sentences) {
            correct_members[s].push(p);
        }
    }
    let mut last = Vec::new();
    for &p in last_slots {
        let (s, t, _) = build_sentence(&mut rng, &[(&patterns[p], true)]);
        last.push((s, t));
    }
    for members in &mut correct_members {
        members.shuffle(&mut rng);
        let segs: Vec<(&Pattern, bool)> = members.iter().map(|&p| (&patterns[p], false)).collect();
        let (s, t, _) = build_sentence(&mut rng, &segs);
        last.push((s, t));
    }
    last.shuffle(&mut rng);
    let last: Vec<SentencePair> = last
        .into_iter()
        .enumerate()
        .map(|(i, (s, t))| pair_from(format!("{}:{i}", spec.last), &spec.last, s, t))
        .collect();

    // Eval: one erroneous occurrence per sentence, plus correct occurrences of
    // other patterns in proportion to the training data.
    let err_patterns: Vec<usize> = (0..spec.n_eval).map(|i| i % spec.n_patterns).collect();
    let per_pattern_eval = spec.n_eval as f64 / spec.n_patterns as f64;
    let mut eval_members: Vec<Vec<(usize, bool)>> = err_patterns.iter().map(|&p| vec![(p, true)]).collect();
    for (p, pat) in patterns.iter().enumerate() {
        let want = (spec.eval_correct_scale * per_pattern_eval * pat.correct_sentences as f64 / k as f64).round() as usize;
        let hosts: Vec<usize> = (0..spec.n_eval).filter(|&i| err_patterns[i] != p).collect();
        for h in index::sample(&mut rng, hosts.len(), want.min(hosts.len())) {
            eval_members[hosts[h]].push((p, false));
        }
    }
    let mut eval = Vec::with_capacity(spec.n_eval);
    let mut gold = Vec::with_capacity(spec.n_eval);
    for (i, members) in eval_members.iter_mut().enumerate() {
        members.shuffle(&mut rng);
        let segs: Vec<(&Pattern, bool)> = members.iter().map(|&(p, e)| (&patterns[p], e)).collect();
        let (s, t, error) = build_sentence(&mut rng, &segs);
        let mut record = M2Record::new(s.clone());
        let edits = error
            .map(|(pos, fix)| vec![M2Edit::new(pos, pos + 1, "R:SYN", &[fix.as_str()], 0)])
            .unwrap_or_default();
        record.annotators.insert(0, edits);
        gold.push(record);
        eval.push(pair_from(format!("eval:{i}"), "eval", s, t));
    }

    TradeoffFixture {
        corpora: vec![Corpus::new(spec.first.clone(), first), Corpus::new(spec.last.clone(), last)],
        eval,
        gold,
    }
}

/// A corpus of `n` pairs of which exactly `n_erroneous` differ, in seeded
/// random positions.
pub fn ratio_corpus(name: &str, n: usize, n_erroneous: usize, seed: u64) -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut flags = vec![false; n];
    for i in index::sample(&mut rng, n, n_erroneous.min(n)) {
        flags[i] = true;
    }
    const WORDS: &[&str] = &["the", "cat", "sat", "on", "a", "mat", "we", "went", "to", "school", "she", "reads", "books", "every", "day"];
    let pairs = flags
        .into_iter()
        .enumerate()
        .map(|(i, erroneous)| {
            let len = rng.random_range(4..12);
            let mut words: Vec<&str> = (0..len).map(|_| WORDS[rng.random_range(0..WORDS.len())]).collect();
            let target = format!("{}.", words.join(" "));
            if erroneous {
                let at = rng.random_range(0..words.len());
                words[at] = if words[at] == "is" { "are" } else { "is" };
            }
            let source = format!("{}.", words.join(" "));
            SentencePair::new(format!("{name}:{i}"), source, target).with_origin(name)
        })
        .collect();
    Corpus::new(name, pairs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixture_shape() {
        let spec = TradeoffSpec::default();
        let f = tradeoff_fixture(&spec);
        let n_train: usize = f.corpora.iter().map(Corpus::len).sum();
        assert_eq!(n_train, 500);
        assert_eq!(f.eval.len(), 200);
        assert_eq!(f.gold.len(), 200);
        let errs: usize = f.corpora.iter().map(|c| c.iter().filter(|p| p.is_erroneous()).count()).sum();
        assert_eq!(errs, 120);
        for (p, g) in f.eval.iter().zip(&f.gold) {
            let applied = crate::m2::apply_edits(g, 0).unwrap();
            assert_eq!(applied.join(" "), p.target);
        }
    }

    #[test]
    fn fixture_is_seeded() {
        let a = tradeoff_fixture(&TradeoffSpec::default());
        let b = tradeoff_fixture(&TradeoffSpec::default());
        assert_eq!(a.corpora, b.corpora);
        assert_eq!(a.gold, b.gold);
    }

    #[test]
    fn ratio_corpus_counts() {
        let c = ratio_corpus("x", 1000, 654, 1);
        assert_eq!(c.len(), 1000);
        assert_eq!(c.iter().filter(|p| p.is_erroneous()).count(), 654);
    }
}
