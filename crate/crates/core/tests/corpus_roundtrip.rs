use inpars::corpus::{self, CorpusFormat, CorpusHandle, Document};
use proptest::prelude::*;

fn doc() -> impl Strategy<Value = (Option<String>, String)> {
    (proptest::option::of("\\PC{0,20}"), "\\PC{1,200}")
}

proptest! {
    #[test]
    fn export_then_ingest_is_identity(docs in proptest::collection::vec(doc(), 1..30)) {
        let docs: Vec<Document> = docs
            .into_iter()
            .enumerate()
            .map(|(i, (title, body))| Document::new(format!("d{i}"), title, body))
            .collect();
        let handle = CorpusHandle::from_documents(docs.clone()).unwrap();
        let mut out = Vec::new();
        handle.export_jsonl(&mut out).unwrap();
        let back = corpus::ingest_reader(out.as_slice(), CorpusFormat::Jsonl).unwrap();
        prop_assert_eq!(back.documents(), docs.as_slice());
    }
}

#[test]
fn ingest_from_file_matches_reader() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.tsv");
    std::fs::write(&path, "a\tBody a.\n\nb\tBody b.\n").unwrap();
    let c = corpus::ingest(&path, CorpusFormat::Tsv).unwrap();
    assert_eq!(c.doc_count(), 2);
    assert_eq!(c.get("a").unwrap().presentation_text(), "Body a.");
    assert_eq!(c.get("b").unwrap().title, None);
}
