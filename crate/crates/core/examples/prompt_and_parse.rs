// Render a question into chat messages and parse free-text answers back
// into option letters.

use std::collections::BTreeSet;

use exprag::llm::{parse_answer, render_prompt, PromptTemplate};
use exprag::qagen::{AnswerMode, OptionSource, QAItem, QAOption};
use exprag::segment::TaskKind;

pub fn run_example() {
    let options = ["Hypertension", "Asthma", "Gout", "Anemia"]
        .iter()
        .enumerate()
        .map(|(i, t)| QAOption { letter: (b'A' + i as u8) as char, text: t.to_string(), source: OptionSource::EhrDistractor })
        .collect();
    let item = QAItem {
        question_id: "H1-diagnosis".into(),
        admission_key: "H1".into(),
        task: TaskKind::DiagnosisInference,
        mode: AnswerMode::MultiSelect,
        question: "Which diagnoses apply at discharge?".into(),
        background: "Elevated blood pressure on every visit.".into(),
        options,
        gold_letters: BTreeSet::from(['A']),
    };
    let template = PromptTemplate::default();
    for context in ["", "A similar patient was discharged with hypertension."] {
        let messages = render_prompt(&item, context, &template).expect("prompt");
        println!("--- {} messages, context {}", messages.len(), if context.is_empty() { "none" } else { "given" });
        println!("{}", messages.last().unwrap().content);
    }
    for reply in ["Answer: A, D", "The answer is B.", "I think A and C", "Z"] {
        println!("{reply:?} -> {:?}", parse_answer(reply, item.mode, item.options.len()));
    }
}

#[allow(dead_code)]
fn main() {
    run_example();
}
