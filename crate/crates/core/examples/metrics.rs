// The scoring functions used by the evaluation reports.

use std::collections::BTreeSet;

use exprag::eval::{exact_match_accuracy, macro_f1, pearson, relative_improvement, spearman};

pub fn run_example() {
    let set = |s: &str| s.chars().collect::<BTreeSet<char>>();
    let gold = [set("AC"), set("B"), set("D")];
    let picked = [Some(set("AC")), Some(set("BC")), None];
    let pairs = || picked.iter().map(|p| p.as_ref()).zip(gold.iter());
    let acc = exact_match_accuracy(pairs()).unwrap();
    let f1 = macro_f1(pairs()).unwrap();
    println!("exact match {acc:.1}%  macro F1 {f1:.3}");
    assert!((acc - 100.0 / 3.0).abs() < 1e-9);

    let x = [1.0, 2.0, 3.0, 4.0];
    let y = [1.0, 4.0, 9.0, 16.0];
    println!("pearson {:.4} spearman {:.4}", pearson(&x, &y).unwrap(), spearman(&x, &y).unwrap());
    println!("relative improvement {:.1}%", relative_improvement(75.0, 60.0).unwrap());
}

#[allow(dead_code)]
fn main() {
    run_example();
}
