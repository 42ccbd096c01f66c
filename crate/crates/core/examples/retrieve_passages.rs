// Fine-grained retrieval over selected reports with each method, then a
// budgeted context string.

use exprag::retriever::{assemble_context, retrieve, Report, RetrievalMethod, RetrieverParams};

const A: &str = "The patient was admitted with pneumonia. Chest imaging showed a right lower lobe infiltrate. \
He improved on ceftriaxone and azithromycin. He was discharged home on oral antibiotics.";
const B: &str = "She presented with a hip fracture after a fall. Orthopedics performed an open reduction. \
Physical therapy cleared her for discharge to rehab.";

pub fn run_example() {
    let reports = [Report { admission_key: "A", text: A }, Report { admission_key: "B", text: B }];
    let query = "pneumonia antibiotics";
    for method in [RetrievalMethod::Bm25, RetrievalMethod::SentenceWindow, RetrievalMethod::HierMerge] {
        let params = RetrieverParams { top_n: 2, chunk_size: 12, chunk_overlap: 2, leaf_size: 8, ..RetrieverParams::with_method(method) };
        let hits = retrieve(&reports, query, &params).expect("retrieve");
        println!("{method}:");
        for h in &hits {
            // Every hit points back to an exact span of its source note.
            let src = if h.chunk.source == "A" { A } else { B };
            assert_eq!(&src[h.chunk.start..h.chunk.end], h.chunk.text);
            println!("  [{}:{}..{}] {:.3} {}", h.chunk.source, h.chunk.start, h.chunk.end, h.score, h.chunk.text);
        }
        let context = assemble_context(&hits, 200);
        assert!(context.chars().count() <= 200);
    }
}

#[allow(dead_code)]
fn main() {
    run_example();
}
