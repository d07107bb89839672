//! Edit-level precision / recall / F0.5 against multi-annotator M2 gold, and
//! sentence-averaged GLEU against multiple fluency references.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::align::{extract_token_edits, tokenize, Edit};
use crate::m2::M2Record;

pub const F_BETA: f64 = 0.5;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ScoreError {
    #[error("sentence {sentence}: hypothesis edit {start}..{end} outside {len} gold tokens")]
    TokenizationMismatch {
        sentence: usize,
        start: usize,
        end: usize,
        len: usize,
    },
    #[error("{hyp} hypotheses but {gold} gold records")]
    LengthMismatch { hyp: usize, gold: usize },
    #[error("at least one reference is required")]
    NoReferences,
}

/// `(1+β²)PR / (β²P + R)`, zero when both inputs are zero.
pub fn f_beta(precision: f64, recall: f64, beta: f64) -> f64 {
    let b2 = beta * beta;
    let denom = b2 * precision + recall;
    if denom == 0.0 {
        0.0
    } else {
        (1.0 + b2) * precision * recall / denom
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Counts {
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f_beta(&self, beta: f64) -> f64 {
        f_beta(self.precision(), self.recall(), beta)
    }
}

impl std::ops::AddAssign for Counts {
    fn add_assign(&mut self, rhs: Counts) {
        self.tp += rhs.tp;
        self.fp += rhs.fp;
        self.fn_ += rhs.fn_;
    }
}

fn ratio(num: usize, denom: usize) -> f64 {
    if denom == 0 {
        0.0
    } else {
        num as f64 / denom as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    #[serde(rename = "f0_5")]
    pub f_half: f64,
}

impl From<Counts> for ScoreReport {
    fn from(c: Counts) -> Self {
        ScoreReport {
            tp: c.tp,
            fp: c.fp,
            fn_: c.fn_,
            precision: c.precision(),
            recall: c.recall(),
            f_half: c.f_beta(F_BETA),
        }
    }
}

impl ScoreReport {
    /// `P R F0.5` as percentages with two decimals.
    pub fn percentages(&self) -> String {
        format!(
            "{:.2}\t{:.2}\t{:.2}",
            self.precision * 100.0,
            self.recall * 100.0,
            self.f_half * 100.0
        )
    }
}

fn span_key(e: &Edit) -> (usize, usize, &[String]) {
    (e.start, e.end, e.replacement.as_slice())
}

fn count_matches(hyp: &[Edit], gold: &[Edit]) -> Counts {
    let mut remaining: HashMap<(usize, usize, &[String]), usize> = HashMap::new();
    for g in gold {
        *remaining.entry(span_key(g)).or_default() += 1;
    }
    let mut tp = 0;
    for h in hyp {
        if let Some(n) = remaining.get_mut(&span_key(h)).filter(|n| **n > 0) {
            *n -= 1;
            tp += 1;
        }
    }
    Counts {
        tp,
        fp: hyp.len() - tp,
        fn_: gold.len() - tp,
    }
}

/// Per-annotator counts for one sentence. An edit is a true positive when its
/// span and replacement match a gold edit exactly.
pub fn match_edits(hyp_edits: &[Edit], gold: &M2Record) -> Result<Vec<(u32, Counts)>, ScoreError> {
    match_sentence(0, hyp_edits, gold)
}

fn match_sentence(sentence: usize, hyp: &[Edit], gold: &M2Record) -> Result<Vec<(u32, Counts)>, ScoreError> {
    let len = gold.tokens.len();
    if let Some(e) = hyp.iter().find(|e| e.end > len || e.start > e.end) {
        return Err(ScoreError::TokenizationMismatch {
            sentence,
            start: e.start,
            end: e.end,
            len,
        });
    }
    Ok(gold
        .annotator_ids()
        .into_iter()
        .map(|id| {
            let gold_edits = gold.gold_edits(id).unwrap_or_default();
            (id, count_matches(hyp, &gold_edits))
        })
        .collect())
}

/// Picks the annotator with the best sentence-level F0.5; ties go to the
/// lowest annotator id.
fn best_annotator(per_annotator: &[(u32, Counts)]) -> Counts {
    let mut best: Option<(f64, Counts)> = None;
    for (_, c) in per_annotator {
        let f = c.f_beta(F_BETA);
        if best.is_none_or(|(bf, _)| f > bf) {
            best = Some((f, *c));
        }
    }
    best.map(|(_, c)| c).unwrap_or_default()
}

pub fn score_corpus(hyp_edits: &[Vec<Edit>], gold: &[M2Record]) -> Result<ScoreReport, ScoreError> {
    if hyp_edits.len() != gold.len() {
        return Err(ScoreError::LengthMismatch {
            hyp: hyp_edits.len(),
            gold: gold.len(),
        });
    }
    let selected = hyp_edits
        .par_iter()
        .zip(gold.par_iter())
        .enumerate()
        .map(|(i, (hyp, g))| match_sentence(i, hyp, g).map(|per| best_annotator(&per)))
        .collect::<Result<Vec<_>, _>>()?;
    let mut total = Counts::default();
    for c in selected {
        total += c;
    }
    Ok(total.into())
}

/// Tokenizes each hypothesis text, extracts edits against the gold tokens and
/// scores the corpus.
pub fn score_texts<S: AsRef<str> + Sync>(hyps: &[S], gold: &[M2Record]) -> Result<ScoreReport, ScoreError> {
    if hyps.len() != gold.len() {
        return Err(ScoreError::LengthMismatch {
            hyp: hyps.len(),
            gold: gold.len(),
        });
    }
    let edits: Vec<Vec<Edit>> = hyps
        .par_iter()
        .zip(gold.par_iter())
        .map(|(h, g)| extract_token_edits(&g.tokens, &tokenize(h.as_ref())))
        .collect();
    score_corpus(&edits, gold)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GleuReport {
    pub gleu: f64,
    pub n_max: usize,
}

fn ngram_counts<'a>(tokens: &'a [&'a str], n: usize) -> HashMap<&'a [&'a str], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Per-order statistics for one (hypothesis, source, reference) triple.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GleuOrderStats {
    pub n: usize,
    pub matches: usize,
    pub penalty: usize,
    pub total: usize,
}

impl GleuOrderStats {
    pub fn numerator(&self) -> usize {
        self.matches.saturating_sub(self.penalty)
    }
}

pub fn gleu_order_stats(hyp: &[&str], src: &[&str], reference: &[&str], n: usize) -> GleuOrderStats {
    let h = ngram_counts(hyp, n);
    let s = ngram_counts(src, n);
    let r = ngram_counts(reference, n);
    let matches = h.iter().map(|(g, c)| (*c).min(r.get(g).copied().unwrap_or(0))).sum();
    // An n-gram is penalized only if the reference lacks it altogether, so a
    // hypothesis equal to its reference is never penalized.
    let penalty = h
        .iter()
        .filter(|(g, _)| !r.contains_key(*g))
        .map(|(g, c)| (*c).min(s.get(g).copied().unwrap_or(0)))
        .sum();
    GleuOrderStats {
        n,
        matches,
        penalty,
        total: hyp.len().saturating_sub(n - 1),
    }
}

/// Sentence GLEU for one reference. Orders with no hypothesis n-grams are left
/// out of the geometric mean.
pub fn sentence_gleu(hyp: &[&str], src: &[&str], reference: &[&str], n_max: usize) -> f64 {
    if hyp.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    let mut orders = 0usize;
    for n in 1..=n_max.min(hyp.len()) {
        let st = gleu_order_stats(hyp, src, reference, n);
        let total = st.total as f64;
        let num = match st.numerator() {
            0 => 1.0 / (2.0 * total),
            k => k as f64,
        };
        log_sum += (num / total).ln();
        orders += 1;
    }
    let (c, r) = (hyp.len() as f64, reference.len() as f64);
    let brevity = (1.0 - r / c).min(0.0);
    (brevity + log_sum / orders as f64).exp()
}

/// Mean sentence GLEU over every reference of every sentence.
pub fn gleu_corpus<S: AsRef<str> + Sync>(
    hyps: &[S],
    sources: &[S],
    refs: &[Vec<S>],
    n_max: usize,
) -> Result<GleuReport, ScoreError> {
    if hyps.len() != sources.len() || hyps.len() != refs.len() {
        return Err(ScoreError::LengthMismatch {
            hyp: hyps.len(),
            gold: sources.len().min(refs.len()),
        });
    }
    if refs.iter().any(Vec::is_empty) {
        return Err(ScoreError::NoReferences);
    }
    let (sum, count) = hyps
        .par_iter()
        .zip(sources.par_iter())
        .zip(refs.par_iter())
        .map(|((h, s), rs)| {
            let h = tokenize(h.as_ref());
            let s = tokenize(s.as_ref());
            let h: Vec<&str> = h.iter().map(String::as_str).collect();
            let s: Vec<&str> = s.iter().map(String::as_str).collect();
            // Summed in sorted order so the reference order cannot change the result.
            let mut scores: Vec<f64> = rs
                .iter()
                .map(|r| {
                    let r = tokenize(r.as_ref());
                    let r: Vec<&str> = r.iter().map(String::as_str).collect();
                    sentence_gleu(&h, &s, &r, n_max)
                })
                .collect();
            scores.sort_by(f64::total_cmp);
            (scores.iter().sum::<f64>(), scores.len())
        })
        .collect::<Vec<_>>()
        .into_iter()
        .fold((0.0, 0usize), |(a, k), (b, j)| (a + b, k + j));
    Ok(GleuReport {
        gleu: if count == 0 { 0.0 } else { sum / count as f64 },
        n_max,
    })
}

/// GLEU of one hypothesis against its source and references.
pub fn gleu(hyp_text: &str, src_text: &str, refs: &[&str], n_max: usize) -> Result<GleuReport, ScoreError> {
    gleu_corpus(&[hyp_text], &[src_text], &[refs.to_vec()], n_max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::m2::parse_m2;
    use proptest::prelude::*;

    fn edit(s: usize, e: usize, r: &str) -> Edit {
        Edit::new(s, e, r.split_whitespace().map(str::to_owned).collect()).unwrap()
    }

    #[test]
    fn f_beta_examples() {
        assert!((f_beta(0.7352, 0.5010, 0.5) - 0.6723).abs() < 1e-4);
        assert_eq!(f_beta(1.0, 1.0, 0.5), 1.0);
        assert_eq!(f_beta(0.0, 0.5, 0.5), 0.0);
        assert_eq!(f_beta(0.0, 0.0, 0.5), 0.0);
    }

    proptest! {
        #[test]
        fn f_beta_monotone(p in 0.0f64..=1.0, r in 0.0f64..=1.0, dp in 0.0f64..=1.0, dr in 0.0f64..=1.0) {
            let base = f_beta(p, r, 0.5);
            prop_assert!(f_beta((p + dp).min(1.0), r, 0.5) >= base - 1e-12);
            prop_assert!(f_beta(p, (r + dr).min(1.0), 0.5) >= base - 1e-12);
        }

        #[test]
        fn gleu_of_reference_is_one(
            hyp in proptest::collection::vec(0usize..4, 1..12),
            src in proptest::collection::vec(0usize..4, 0..12),
        ) {
            // tiny vocabulary so source n-grams repeat more often than in the hypothesis
            const V: [&str; 4] = ["a", "b", ".", "the"];
            let h: Vec<&str> = hyp.iter().map(|&i| V[i]).collect();
            let s: Vec<&str> = src.iter().map(|&i| V[i]).collect();
            prop_assert_eq!(sentence_gleu(&h, &s, &h, 4), 1.0);
        }
    }

    fn gold() -> M2Record {
        parse_m2("S a b c d\nA 0 1|||X|||A|||REQUIRED|||-NONE-|||0\nA 2 3|||X|||C|||REQUIRED|||-NONE-|||0\n")
            .unwrap()
            .remove(0)
    }

    #[test]
    fn match_edits_cases() {
        let g = gold();
        let all = vec![edit(0, 1, "A"), edit(2, 3, "C")];
        assert_eq!(match_edits(&all, &g).unwrap(), vec![(0, Counts { tp: 2, fp: 0, fn_: 0 })]);
        assert_eq!(match_edits(&[], &g).unwrap(), vec![(0, Counts { tp: 0, fp: 0, fn_: 2 })]);
        let wrong = vec![edit(0, 1, "Z")];
        assert_eq!(match_edits(&wrong, &g).unwrap()[0].1, Counts { tp: 0, fp: 1, fn_: 2 });
        let out = vec![edit(3, 6, "Z")];
        assert!(matches!(match_edits(&out, &g), Err(ScoreError::TokenizationMismatch { .. })));
    }

    #[test]
    fn wrong_replacement_on_one_gold_edit() {
        let g = parse_m2("S a b\nA 0 1|||X|||A|||REQUIRED|||-NONE-|||0\n").unwrap().remove(0);
        assert_eq!(match_edits(&[edit(0, 1, "Q")], &g).unwrap()[0].1, Counts { tp: 0, fp: 1, fn_: 1 });
    }

    #[test]
    fn corpus_degenerate_and_perfect() {
        let g = vec![gold(), gold()];
        let perfect = score_texts(&["A b C d", "A b C d"], &g).unwrap();
        assert_eq!((perfect.precision, perfect.recall, perfect.f_half), (1.0, 1.0, 1.0));
        let unchanged = score_texts(&["a b c d", "a b c d"], &g).unwrap();
        assert_eq!((unchanged.tp, unchanged.fp, unchanged.fn_), (0, 0, 4));
        assert_eq!((unchanged.precision, unchanged.recall, unchanged.f_half), (0.0, 0.0, 0.0));
        assert_eq!(
            score_texts(&["a"], &g),
            Err(ScoreError::LengthMismatch { hyp: 1, gold: 2 })
        );
    }

    #[test]
    fn per_sentence_selection_beats_fixed_annotator() {
        let text = "S x y z\nA 0 1|||X|||X|||REQUIRED|||-NONE-|||0\nA 2 3|||X|||Q|||REQUIRED|||-NONE-|||1\n\n\
                    S p q r\nA 1 2|||X|||Q|||REQUIRED|||-NONE-|||0\nA -1 -1|||noop|||-NONE-|||REQUIRED|||-NONE-|||1\n";
        let g = parse_m2(text).unwrap();
        let hyp = vec![vec![edit(2, 3, "Q")], vec![]];
        // Enumerate every annotator assignment and keep the per-sentence maxima.
        let per: Vec<Vec<(u32, Counts)>> =
            hyp.iter().zip(&g).map(|(h, r)| match_edits(h, r).unwrap()).collect();
        // Sentence 1: a0 -> (0,1,1) F=0, a1 -> (1,0,0) F=1.  Sentence 2: a0 -> (0,0,1) F=0,
        // a1 -> (0,0,0) F=0, tie -> a0.
        assert_eq!(per[0][0].1, Counts { tp: 0, fp: 1, fn_: 1 });
        assert_eq!(per[0][1].1, Counts { tp: 1, fp: 0, fn_: 0 });
        assert_eq!(per[1][0].1, Counts { tp: 0, fp: 0, fn_: 1 });
        let report = score_corpus(&hyp, &g).unwrap();
        assert_eq!((report.tp, report.fp, report.fn_), (1, 0, 1));
        let fixed_zero = {
            let mut c = per[0][0].1;
            c += per[1][0].1;
            c
        };
        assert_eq!(fixed_zero, Counts { tp: 0, fp: 1, fn_: 2 });
        assert!(report.f_half > fixed_zero.f_beta(0.5));
        assert!((report.f_half - f_beta(1.0, 0.5, 0.5)).abs() < 1e-12);
    }

    #[test]
    fn gleu_identity_is_one() {
        let r = gleu("the cat sat on the mat .", "the cat sat on the mat .", &["the cat sat on the mat ."], 4).unwrap();
        assert_eq!(r.gleu, 1.0);
        assert_eq!(gleu("a", "a", &["a"], 4).unwrap().gleu, 1.0);
    }

    #[test]
    fn gleu_three_token_count_table() {
        let hyp = ["a", "B", "c"];
        let src = ["a", "b", "c"];
        // hyp = ref: every order has full matches and no penalty.
        for (n, total) in [(1, 3), (2, 2), (3, 1)] {
            let st = gleu_order_stats(&hyp, &src, &hyp, n);
            assert_eq!((st.matches, st.penalty, st.total), (total, 0, total));
        }
        assert_eq!(sentence_gleu(&hyp, &src, &hyp, 4), 1.0);
        // hyp = src against ref "a B c":
        //   n=1 matches {a,c}=2, penalty {b}=1 -> 1/3
        //   n=2 matches 0, penalty {ab,bc}=2 -> floored 1/(2*2), precision 1/8
        //   n=3 matches 0, penalty {abc}=1 -> floored 1/2, precision 1/2
        let table = [(1, 2, 1, 3), (2, 0, 2, 2), (3, 0, 1, 1)];
        for (n, m, p, t) in table {
            let st = gleu_order_stats(&src, &src, &hyp, n);
            assert_eq!((st.matches, st.penalty, st.total), (m, p, t), "order {n}");
        }
        let expected = (1.0f64 / 3.0 * 1.0 / 8.0 * 1.0 / 2.0).powf(1.0 / 3.0);
        assert!((sentence_gleu(&src, &src, &hyp, 4) - expected).abs() < 1e-4);
        assert!((expected - 0.2752).abs() < 1e-4);
    }

    #[test]
    fn gleu_penalizes_kept_errors() {
        let src = "He go to school yesterday .";
        let reference = "He went to school yesterday .";
        let kept = gleu(src, src, &[reference], 4).unwrap().gleu;
        let fixed = gleu(reference, src, &[reference], 4).unwrap().gleu;
        assert!(kept < fixed);
        assert_eq!(gleu("", src, &[reference], 4).unwrap().gleu, 0.0);
        assert_eq!(gleu(src, src, &[], 4), Err(ScoreError::NoReferences));
    }

    #[test]
    fn gleu_reference_order_invariant() {
        let src = "She like cats and dog .";
        let hyp = "She likes cats and dog .";
        let refs = ["She likes cats and dogs .", "She liked cats and dogs .", "She likes cat and dogs ."];
        let a = gleu(hyp, src, &refs, 4).unwrap().gleu;
        let b = gleu(hyp, src, &[refs[2], refs[0], refs[1]], 4).unwrap().gleu;
        assert_eq!(a, b);
    }
}
