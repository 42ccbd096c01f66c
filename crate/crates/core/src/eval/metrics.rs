//! Exact-match accuracy, option F1, correlation coefficients and relative
//! improvement.

use std::collections::BTreeSet;

use thiserror::Error;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum MetricError {
    #[error("no records to score")]
    EmptyInput,
    #[error("correlation undefined: {0}")]
    Undefined(String),
    #[error("baseline accuracy is zero")]
    ZeroBaseline,
    #[error("sequences differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
}

/// Correct only when the selection equals the gold set.
pub fn exact_match(selected: Option<&BTreeSet<char>>, gold: &BTreeSet<char>) -> bool {
    selected.is_some_and(|s| s == gold)
}

/// Percentage of exact matches; `None` selections (invalid answers) count
/// as wrong.
pub fn exact_match_accuracy<'a, I>(pairs: I) -> Result<f64, MetricError>
where
    I: IntoIterator<Item = (Option<&'a BTreeSet<char>>, &'a BTreeSet<char>)>,
{
    let mut n = 0usize;
    let mut hits = 0usize;
    for (sel, gold) in pairs {
        n += 1;
        hits += exact_match(sel, gold) as usize;
    }
    if n == 0 {
        return Err(MetricError::EmptyInput);
    }
    Ok(100.0 * hits as f64 / n as f64)
}

pub fn option_f1(selected: &BTreeSet<char>, gold: &BTreeSet<char>) -> f64 {
    let inter = selected.intersection(gold).count() as f64;
    let p = if selected.is_empty() { 0.0 } else { inter / selected.len() as f64 };
    let r = if gold.is_empty() { 0.0 } else { inter / gold.len() as f64 };
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Mean per-question F1; invalid answers score 0.
pub fn macro_f1<'a, I>(pairs: I) -> Result<f64, MetricError>
where
    I: IntoIterator<Item = (Option<&'a BTreeSet<char>>, &'a BTreeSet<char>)>,
{
    let mut n = 0usize;
    let mut total = 0.0;
    for (sel, gold) in pairs {
        n += 1;
        total += sel.map_or(0.0, |s| option_f1(s, gold));
    }
    if n == 0 {
        return Err(MetricError::EmptyInput);
    }
    Ok(total / n as f64)
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Sample Pearson correlation.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64, MetricError> {
    if x.len() != y.len() {
        return Err(MetricError::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 2 {
        return Err(MetricError::Undefined(format!("{} points", x.len())));
    }
    let (mx, my) = (mean(x), mean(y));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(MetricError::Undefined("constant input".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// 1-based ranks; tied values share the mean of their positions.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = r;
        }
        i = j + 1;
    }
    ranks
}

pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64, MetricError> {
    if x.len() != y.len() {
        return Err(MetricError::LengthMismatch(x.len(), y.len()));
    }
    pearson(&average_ranks(x), &average_ranks(y))
}

/// 100 · (new − base) / base.
pub fn relative_improvement(new: f64, base: f64) -> Result<f64, MetricError> {
    if base == 0.0 {
        return Err(MetricError::ZeroBaseline);
    }
    Ok(100.0 * (new - base) / base)
}

/// Mean relative improvement over (new, base) cells.
pub fn mean_relative_improvement(cells: &[(f64, f64)]) -> Result<f64, MetricError> {
    if cells.is_empty() {
        return Err(MetricError::EmptyInput);
    }
    let mut total = 0.0;
    for &(new, base) in cells {
        total += relative_improvement(new, base)?;
    }
    Ok(total / cells.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(l: &str) -> BTreeSet<char> {
        l.chars().collect()
    }

    #[test]
    fn accuracy_examples() {
        let gold = [s("A"), s("B"), s("C"), s("D")];
        let sel = [Some(s("A")), Some(s("B")), Some(s("C")), Some(s("A"))];
        let acc = exact_match_accuracy(sel.iter().map(Option::as_ref).zip(&gold)).unwrap();
        assert_eq!(acc, 75.0);
        let partial = s("A");
        assert!(!exact_match(Some(&partial), &s("AB")));
        let none: [Option<&BTreeSet<char>>; 2] = [None, None];
        assert_eq!(exact_match_accuracy(none.into_iter().zip(&gold)).unwrap(), 0.0);
        assert_eq!(exact_match_accuracy(std::iter::empty()), Err(MetricError::EmptyInput));
    }

    #[test]
    fn f1_examples() {
        assert_eq!(option_f1(&s("AB"), &s("AB")), 1.0);
        assert_eq!(option_f1(&s("AB"), &s("ABC")), 0.8);
        assert_eq!(option_f1(&s("D"), &s("ABC")), 0.0);
        assert_eq!(option_f1(&s(""), &s("ABC")), 0.0);
    }

    #[test]
    fn correlation_examples() {
        assert!((pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((pearson(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
        assert!((pearson(&[1.0, 2.0, 3.0], &[1.0, 3.0, 2.0]).unwrap() - 0.5).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[1.0, 3.0, 2.0]).unwrap() - 0.5).abs() < 1e-12);
        assert!(matches!(pearson(&[1.0, 1.0], &[1.0, 2.0]), Err(MetricError::Undefined(_))));
    }

    #[test]
    fn ties_share_average_rank() {
        assert_eq!(average_ranks(&[1.0, 1.0, 2.0]), [1.5, 1.5, 3.0]);
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), [3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn relative_improvement_examples() {
        assert!((relative_improvement(79.5, 78.8).unwrap() - 0.888).abs() < 1e-3);
        assert_eq!(relative_improvement(50.0, 50.0).unwrap(), 0.0);
        assert_eq!(relative_improvement(1.0, 0.0), Err(MetricError::ZeroBaseline));
    }
}
