//! Evaluation metrics: word error rate and classification scores.

use std::collections::HashMap;

use crate::error::{invalid_arg, Result};

/// Word-level Levenshtein distance with unit costs.
pub fn edit_distance(reference: &[&str], hypothesis: &[&str]) -> usize {
    let (r, h) = (reference.len(), hypothesis.len());
    if r == 0 {
        return h;
    }
    if h == 0 {
        return r;
    }
    let mut prev: Vec<usize> = (0..=h).collect();
    let mut curr = vec![0usize; h + 1];
    for i in 1..=r {
        curr[0] = i;
        for j in 1..=h {
            let cost = if reference[i - 1] == hypothesis[j - 1] { 0 } else { 1 };
            curr[j] = (prev[j] + 1).min(curr[j - 1] + 1).min(prev[j - 1] + cost);
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    prev[h]
}

/// Word error rate: edit distance divided by reference length. The reference
/// must be non-empty.
pub fn wer(reference: &[&str], hypothesis: &[&str]) -> Result<f64> {
    if reference.is_empty() {
        invalid_arg!("wer reference must be non-empty");
    }
    Ok(edit_distance(reference, hypothesis) as f64 / reference.len() as f64)
}

/// Convenience over whitespace-tokenized strings.
pub fn wer_str(reference: &str, hypothesis: &str) -> Result<f64> {
    let r: Vec<&str> = reference.split_whitespace().collect();
    let h: Vec<&str> = hypothesis.split_whitespace().collect();
    wer(&r, &h)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassificationMetrics {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub uar: f64,
}

/// Accuracy, macro F1 over the label set (classes with no gold and no
/// prediction score 0), and unweighted average recall over classes present in
/// the golds. Predictions outside the label set count as plain mistakes.
pub fn classification_metrics(
    golds: &[&str],
    preds: &[&str],
    label_set: &[&str],
) -> Result<ClassificationMetrics> {
    if golds.len() != preds.len() {
        invalid_arg!("golds ({}) and preds ({}) differ in length", golds.len(), preds.len());
    }
    if golds.is_empty() {
        invalid_arg!("need at least one example");
    }
    for g in golds {
        if !label_set.contains(g) {
            invalid_arg!("gold label {g:?} not in the label set");
        }
    }
    let n = golds.len() as f64;
    let correct = golds.iter().zip(preds).filter(|(g, p)| g == p).count();

    let mut tp: HashMap<&str, usize> = HashMap::new();
    let mut gold_count: HashMap<&str, usize> = HashMap::new();
    let mut pred_count: HashMap<&str, usize> = HashMap::new();
    for (&g, &p) in golds.iter().zip(preds) {
        *gold_count.entry(g).or_default() += 1;
        *pred_count.entry(p).or_default() += 1;
        if g == p {
            *tp.entry(g).or_default() += 1;
        }
    }

    let mut f1_sum = 0.0;
    for &class in label_set {
        let tp_c = *tp.get(class).unwrap_or(&0) as f64;
        let gold_c = *gold_count.get(class).unwrap_or(&0) as f64;
        let pred_c = *pred_count.get(class).unwrap_or(&0) as f64;
        let f1 = if tp_c == 0.0 {
            0.0
        } else {
            2.0 * tp_c / (gold_c + pred_c)
        };
        f1_sum += f1;
    }

    let mut recall_sum = 0.0;
    let mut present = 0usize;
    for &class in label_set {
        let gold_c = *gold_count.get(class).unwrap_or(&0);
        if gold_c == 0 {
            continue;
        }
        present += 1;
        recall_sum += *tp.get(class).unwrap_or(&0) as f64 / gold_c as f64;
    }

    Ok(ClassificationMetrics {
        accuracy: correct as f64 / n,
        macro_f1: f1_sum / label_set.len() as f64,
        uar: recall_sum / present as f64,
    })
}
