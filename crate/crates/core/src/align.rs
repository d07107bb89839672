//! Token alignment and edit extraction.
//!
//! Source and target token sequences are aligned with a weighted Levenshtein
//! model (case-only substitutions are discounted), the resulting script is
//! merged into span edits, and each edit is classified as a Missing,
//! Replacement or Unnecessary operation.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

const EDGE_PUNCT: &[char] = &['.', ',', '!', '?', ';', ':', '"', '\'', '(', ')', '[', ']'];
const CONTRACTIONS: &[&str] = &["n't", "'s", "'re", "'ve", "'ll", "'d", "'m"];

/// Splits on whitespace, peels punctuation off token edges and separates
/// contraction suffixes from their stem.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        let mut core = word;
        let mut trailing = Vec::new();
        while let Some(c) = core.chars().next_back().filter(|c| EDGE_PUNCT.contains(c)) {
            trailing.push(c.to_string());
            core = &core[..core.len() - c.len_utf8()];
        }
        let mut leading = Vec::new();
        while let Some(c) = core.chars().next().filter(|c| EDGE_PUNCT.contains(c)) {
            if is_contraction_suffix(core) {
                break;
            }
            leading.push(c.to_string());
            core = &core[c.len_utf8()..];
        }
        out.extend(leading);
        if !core.is_empty() {
            match split_contraction(core) {
                Some((stem, suffix)) => {
                    out.push(stem.to_owned());
                    out.push(suffix.to_owned());
                }
                None => out.push(core.to_owned()),
            }
        }
        out.extend(trailing.into_iter().rev());
    }
    out
}

fn is_contraction_suffix(s: &str) -> bool {
    let lower = s.to_lowercase();
    CONTRACTIONS.iter().any(|c| lower == *c)
}

fn split_contraction(word: &str) -> Option<(&str, &str)> {
    let lower = word.to_lowercase();
    if lower.len() != word.len() {
        return None;
    }
    CONTRACTIONS.iter().find_map(|suffix| {
        (lower.len() > suffix.len() && lower.ends_with(suffix)).then(|| word.split_at(word.len() - suffix.len()))
    })
}

/// One step of an alignment script.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum AlignOp {
    Match,
    Substitute,
    Delete,
    Insert,
}

/// Alignment script together with its cost in half-units
/// (match 0, case-only substitution 1, anything else 2).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Alignment {
    pub ops: Vec<AlignOp>,
    pub half_cost: u32,
}

impl Alignment {
    pub fn cost(&self) -> f64 {
        f64::from(self.half_cost) / 2.0
    }
}

pub(crate) fn sub_half_cost(a: &str, b: &str) -> u32 {
    if a == b {
        0
    } else if a.to_lowercase() == b.to_lowercase() {
        1
    } else {
        2
    }
}

/// Minimal-cost alignment. Costs are computed over suffixes so the script can
/// be read off left to right; at each step the diagonal move (match or
/// substitution) is preferred, then deletion, then insertion.
pub fn align<S: AsRef<str>, T: AsRef<str>>(src: &[S], trg: &[T]) -> Alignment {
    let (n, m) = (src.len(), trg.len());
    let width = m + 1;
    let mut cost = vec![0u32; (n + 1) * width];
    let at = |i: usize, j: usize| i * width + j;
    for i in (0..=n).rev() {
        for j in (0..=m).rev() {
            cost[at(i, j)] = if i == n {
                2 * (m - j) as u32
            } else if j == m {
                2 * (n - i) as u32
            } else {
                let diag = sub_half_cost(src[i].as_ref(), trg[j].as_ref()) + cost[at(i + 1, j + 1)];
                let del = 2 + cost[at(i + 1, j)];
                let ins = 2 + cost[at(i, j + 1)];
                diag.min(del).min(ins)
            };
        }
    }
    let mut ops = Vec::with_capacity(n.max(m));
    let (mut i, mut j) = (0, 0);
    while i < n || j < m {
        let here = cost[at(i, j)];
        if i < n && j < m {
            let sub = sub_half_cost(src[i].as_ref(), trg[j].as_ref());
            if sub + cost[at(i + 1, j + 1)] == here {
                ops.push(if sub == 0 { AlignOp::Match } else { AlignOp::Substitute });
                i += 1;
                j += 1;
                continue;
            }
        }
        if i < n && 2 + cost[at(i + 1, j)] == here {
            ops.push(AlignOp::Delete);
            i += 1;
        } else {
            ops.push(AlignOp::Insert);
            j += 1;
        }
    }
    Alignment {
        ops,
        half_cost: cost[at(0, 0)],
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum OpKind {
    Missing,
    Replacement,
    Unnecessary,
}

impl OpKind {
    /// `None` for the empty-to-empty case, which is not an edit.
    pub fn classify(start: usize, end: usize, replacement_len: usize) -> Option<OpKind> {
        match (start < end, replacement_len > 0) {
            (false, true) => Some(OpKind::Missing),
            (true, true) => Some(OpKind::Replacement),
            (true, false) => Some(OpKind::Unnecessary),
            (false, false) => None,
        }
    }
}

/// A change to the source span `[start, end)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Edit {
    pub start: usize,
    pub end: usize,
    pub replacement: Vec<String>,
    pub op: OpKind,
}

impl Edit {
    pub fn new(start: usize, end: usize, replacement: Vec<String>) -> Option<Edit> {
        let op = OpKind::classify(start, end, replacement.len())?;
        Some(Edit {
            start,
            end,
            replacement,
            op,
        })
    }
}

/// Collapses each maximal run of non-match operations into one edit.
pub fn merge_edits<T: AsRef<str>>(alignment: &Alignment, trg: &[T]) -> Vec<Edit> {
    let mut edits = Vec::new();
    let (mut i, mut j) = (0usize, 0usize);
    let mut open: Option<(usize, usize)> = None;
    let mut close = |open: &mut Option<(usize, usize)>, i: usize, j: usize| {
        if let Some((si, sj)) = open.take() {
            let replacement = trg[sj..j].iter().map(|t| t.as_ref().to_owned()).collect();
            edits.extend(Edit::new(si, i, replacement));
        }
    };
    for op in &alignment.ops {
        if *op == AlignOp::Match {
            close(&mut open, i, j);
        } else if open.is_none() {
            open = Some((i, j));
        }
        match op {
            AlignOp::Match | AlignOp::Substitute => {
                i += 1;
                j += 1;
            }
            AlignOp::Delete => i += 1,
            AlignOp::Insert => j += 1,
        }
    }
    close(&mut open, i, j);
    edits
}

pub fn extract_token_edits<S: AsRef<str>, T: AsRef<str>>(src: &[S], trg: &[T]) -> Vec<Edit> {
    merge_edits(&align(src, trg), trg)
}

pub fn extract_edits(source_text: &str, target_text: &str) -> Vec<Edit> {
    extract_token_edits(&tokenize(source_text), &tokenize(target_text))
}

/// Applies non-overlapping edits (any order) to `tokens`.
pub fn apply_edits<S: AsRef<str>>(tokens: &[S], edits: &[Edit]) -> Vec<String> {
    let mut sorted: Vec<&Edit> = edits.iter().collect();
    sorted.sort_by_key(|e| (e.start, e.end));
    let mut out = Vec::with_capacity(tokens.len());
    let mut pos = 0;
    for edit in sorted {
        out.extend(tokens[pos..edit.start].iter().map(|t| t.as_ref().to_owned()));
        out.extend(edit.replacement.iter().cloned());
        pos = edit.end;
    }
    out.extend(tokens[pos..].iter().map(|t| t.as_ref().to_owned()));
    out
}

#[derive(Debug, Error, PartialEq)]
pub enum AlignError {
    #[error("no edits found in any pair")]
    NoEdits,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OpStats {
    pub missing: f64,
    pub replacement: f64,
    pub unnecessary: f64,
    pub total_edits: usize,
}

/// Fractions of Missing / Replacement / Unnecessary edits over all pairs.
pub fn operation_stats<S: AsRef<str> + Sync>(pairs: &[(S, S)]) -> Result<OpStats, AlignError> {
    let counts = pairs
        .par_iter()
        .map(|(s, t)| {
            let mut c = [0usize; 3];
            for e in extract_edits(s.as_ref(), t.as_ref()) {
                c[e.op as usize] += 1;
            }
            c
        })
        .reduce(|| [0; 3], |a, b| [a[0] + b[0], a[1] + b[1], a[2] + b[2]]);
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(AlignError::NoEdits);
    }
    let frac = |k: usize| counts[k] as f64 / total as f64;
    Ok(OpStats {
        missing: frac(OpKind::Missing as usize),
        replacement: frac(OpKind::Replacement as usize),
        unnecessary: frac(OpKind::Unnecessary as usize),
        total_edits: total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_owned).collect()
    }

    #[test]
    fn tokenize_examples() {
        assert_eq!(tokenize("Alice has a cat."), toks("Alice has a cat ."));
        assert_eq!(tokenize("don't"), toks("do n't"));
        assert!(tokenize("").is_empty());
        assert_eq!(tokenize("It costs 3.50, ok?"), toks("It costs 3.50 , ok ?"));
        assert_eq!(tokenize("\"We're (here)!\""), toks("\" We 're ( here ) ! \""));
        assert_eq!(tokenize("the students' books"), toks("the students ' books"));
        assert_eq!(tokenize("DON'T"), toks("DO N'T"));
        assert_eq!(tokenize("it 's"), toks("it 's"));
    }

    #[test]
    fn identical_sequences_align_with_zero_cost() {
        let a = toks("a b c");
        let al = align(&a, &a);
        assert_eq!(al.half_cost, 0);
        assert!(al.ops.iter().all(|o| *o == AlignOp::Match));
    }

    #[test]
    fn single_substitution() {
        let al = align(&toks("Alice have a cat ."), &toks("Alice has a cat ."));
        assert_eq!(al.cost(), 1.0);
        assert_eq!(al.ops[1], AlignOp::Substitute);
        assert_eq!(al.ops.iter().filter(|o| **o != AlignOp::Match).count(), 1);
    }

    #[test]
    fn append_is_match_plus_insert() {
        let al = align(&toks("a"), &toks("a b"));
        assert_eq!(al.ops, vec![AlignOp::Match, AlignOp::Insert]);
    }

    #[test]
    fn case_change_is_half_cost_substitution() {
        let al = align(&toks("the cat"), &toks("The cat"));
        assert_eq!(al.half_cost, 1);
        assert_eq!(al.ops, vec![AlignOp::Substitute, AlignOp::Match]);
    }

    #[test]
    fn tie_prefers_substitution_then_deletion() {
        // [x] -> [y]: substitution (2) beats del+ins (4).
        assert_eq!(align(&toks("x"), &toks("y")).ops, vec![AlignOp::Substitute]);
        // [x y] -> [z]: sub+del and del+sub tie; substitution comes first.
        assert_eq!(align(&toks("x y"), &toks("z")).ops, vec![AlignOp::Substitute, AlignOp::Delete]);
        // [x] -> [y z]: substitution first, then insertion.
        assert_eq!(align(&toks("x"), &toks("y z")).ops, vec![AlignOp::Substitute, AlignOp::Insert]);
    }

    #[test]
    fn merge_adjacent_and_separate_runs() {
        let trg = toks("b c");
        let adjacent = Alignment {
            ops: vec![AlignOp::Substitute, AlignOp::Insert],
            half_cost: 4,
        };
        assert_eq!(
            merge_edits(&adjacent, &trg),
            vec![Edit::new(0, 1, toks("b c")).unwrap()]
        );
        let separate = Alignment {
            ops: vec![AlignOp::Substitute, AlignOp::Match, AlignOp::Substitute],
            half_cost: 4,
        };
        let edits = merge_edits(&separate, &toks("x m y"));
        assert_eq!(edits.len(), 2);
        assert_eq!(edits[1], Edit::new(2, 3, toks("y")).unwrap());
        let matches = Alignment {
            ops: vec![AlignOp::Match; 3],
            half_cost: 0,
        };
        assert!(merge_edits(&matches, &toks("a b c")).is_empty());
    }

    #[test]
    fn extract_examples() {
        let e = extract_edits("Alice have a cat.", "Alice has a cat.");
        assert_eq!(e, vec![Edit::new(1, 2, toks("has")).unwrap()]);
        assert_eq!(e[0].op, OpKind::Replacement);
        assert!(extract_edits("Same text.", "Same text.").is_empty());
        let e = extract_edits("I went store.", "I went to the store.");
        assert_eq!(e, vec![Edit::new(2, 2, toks("to the")).unwrap()]);
        assert_eq!(e[0].op, OpKind::Missing);
    }

    #[test]
    fn opkind_classification() {
        assert_eq!(OpKind::classify(2, 2, 1), Some(OpKind::Missing));
        assert_eq!(OpKind::classify(2, 3, 0), Some(OpKind::Unnecessary));
        assert_eq!(OpKind::classify(2, 3, 2), Some(OpKind::Replacement));
        assert_eq!(OpKind::classify(2, 2, 0), None);
    }

    #[test]
    fn operation_stats_partitions() {
        let deletes = [("a b c", "a c"), ("x y", "x")];
        let s = operation_stats(&deletes).unwrap();
        assert_eq!(s.unnecessary, 1.0);
        let inserts = [("a c", "a b c")];
        assert_eq!(operation_stats(&inserts).unwrap().missing, 1.0);
        let mixed = [("a b c", "a B"), ("go", "went home"), ("x", "x y")];
        let s = operation_stats(&mixed).unwrap();
        assert!((s.missing + s.replacement + s.unnecessary - 1.0).abs() < 1e-12);
        assert_eq!(operation_stats(&[("same", "same")]), Err(AlignError::NoEdits));
    }

    proptest! {
        #[test]
        fn extraction_is_complete(
            src in proptest::collection::vec("[abcdA]", 0..=10),
            trg in proptest::collection::vec("[abcdA]", 0..=10),
        ) {
            let edits = extract_token_edits(&src, &trg);
            prop_assert_eq!(apply_edits(&src, &edits), trg);
            for e in &edits {
                prop_assert_eq!(Some(e.op), OpKind::classify(e.start, e.end, e.replacement.len()));
            }
        }
    }
}
