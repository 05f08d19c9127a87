//! ROUGE-2 and ROUGE-L as F-measures (beta = 1) over lowercase words.

use std::collections::HashMap;

use crate::answer::words;

fn f_measure(overlap: usize, cand: usize, reference: usize) -> f64 {
    if overlap == 0 {
        return 0.0;
    }
    let p = overlap as f64 / cand as f64;
    let r = overlap as f64 / reference as f64;
    2.0 * p * r / (p + r)
}

pub fn rouge2_tokens<S: AsRef<str>>(cand: &[S], reference: &[S]) -> f64 {
    match (cand.len() < 2, reference.len() < 2) {
        (true, true) => {
            return if cand.iter().map(AsRef::as_ref).eq(reference.iter().map(AsRef::as_ref)) {
                1.0
            } else {
                0.0
            };
        }
        (true, false) | (false, true) => return 0.0,
        (false, false) => {}
    }
    let mut counts: HashMap<(&str, &str), usize> = HashMap::new();
    for w in reference.windows(2) {
        *counts.entry((w[0].as_ref(), w[1].as_ref())).or_default() += 1;
    }
    let mut overlap = 0;
    for w in cand.windows(2) {
        if let Some(c) = counts.get_mut(&(w[0].as_ref(), w[1].as_ref())) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    f_measure(overlap, cand.len() - 1, reference.len() - 1)
}

/// Longest common subsequence length, two-row dynamic program.
pub fn lcs_len<S: AsRef<str>>(a: &[S], b: &[S]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x.as_ref() == y.as_ref() {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge_l_tokens<S: AsRef<str>>(cand: &[S], reference: &[S]) -> f64 {
    if cand.is_empty() && reference.is_empty() {
        return 1.0;
    }
    if cand.is_empty() || reference.is_empty() {
        return 0.0;
    }
    f_measure(lcs_len(cand, reference), cand.len(), reference.len())
}

pub fn rouge2(cand: &str, reference: &str) -> f64 {
    rouge2_tokens(&words(cand), &words(reference))
}

pub fn rouge_l(cand: &str, reference: &str) -> f64 {
    rouge_l_tokens(&words(cand), &words(reference))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixed_cases() {
        assert_eq!(rouge2("a fake sample", "a fake sample"), 1.0);
        assert_eq!(rouge_l("a fake sample", "A fake sample."), 1.0);
        assert_eq!(rouge2("one two three", "four five six"), 0.0);
        assert_eq!(rouge_l("one two", "three four"), 0.0);
        assert!((rouge2("the cat sat", "the cat ran") - 0.5).abs() < 1e-12);
        assert!((rouge_l("a b c d", "a c d") - 6.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn edge_conventions() {
        assert_eq!(rouge2("", ""), 1.0);
        assert_eq!(rouge2("yes", "yes"), 1.0);
        assert_eq!(rouge2("yes", "no"), 0.0);
        assert_eq!(rouge2("yes", "yes it is"), 0.0);
        assert_eq!(rouge_l("", ""), 1.0);
        assert_eq!(rouge_l("", "a b"), 0.0);
    }

    #[test]
    fn bigram_counts_are_clipped() {
        // reference has "a a" once; candidate repeats it three times
        let r = rouge2_tokens(&["a", "a", "a", "a"], &["a", "a", "b"]);
        assert!((r - 2.0 * (1.0 / 3.0) * 0.5 / (1.0 / 3.0 + 0.5)).abs() < 1e-12);
    }

    #[test]
    fn real_vs_fake_template_shares_words() {
        let r = rouge_l("No, it is a real sample.", "Yes, it is a fake sample generated by glide, a diffusion model.");
        assert!(r > 0.0 && r < 1.0);
    }
}
