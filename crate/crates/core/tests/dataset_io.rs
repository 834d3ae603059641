use std::io::Write;

use bridgelab_core::qa::{self, DatasetError};
use bridgelab_core::synthetic;

fn write(lines: &[&str]) -> tempfile::NamedTempFile {
    let mut f = tempfile::NamedTempFile::new().unwrap();
    for l in lines {
        writeln!(f, "{l}").unwrap();
    }
    f
}

fn record(n_docs: usize) -> String {
    let docs: Vec<String> = (1..=n_docs)
        .map(|r| format!(r#"{{"doc_id":"d{r}","rank":{r},"title":null,"text":"text {r}"}}"#))
        .collect();
    format!(
        r#"{{"id":"q","query":"who?","answers":["ann"],"documents":[{}],"answer_type":"extractive","query_type":null}}"#,
        docs.join(",")
    )
}

#[test]
fn synthetic_dataset_round_trips() {
    let examples = synthetic::generate_dataset(25, 4);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.jsonl");
    qa::save_dataset(&examples, &path).unwrap();
    assert_eq!(qa::load_dataset(&path).unwrap(), examples);
}

#[test]
fn empty_file_is_an_empty_dataset() {
    let f = write(&[]);
    assert!(qa::load_dataset(f.path()).unwrap().is_empty());
}

#[test]
fn blank_lines_are_skipped() {
    let r = record(2);
    let f = write(&[&r, "", "   ", &r.replace("\"q\"", "\"q2\"")]);
    assert_eq!(qa::load_dataset(f.path()).unwrap().len(), 2);
}

#[test]
fn ten_documents_allowed_eleven_rejected() {
    let f = write(&[&record(10)]);
    assert_eq!(qa::load_dataset(f.path()).unwrap()[0].documents.len(), 10);
    let f = write(&[&record(10), &record(11)]);
    match qa::load_dataset(f.path()) {
        Err(DatasetError::Invariant { line, message }) => {
            assert_eq!(line, 2);
            assert!(message.contains("11 documents"), "{message}");
        }
        other => panic!("expected invariant error, got {other:?}"),
    }
}

#[test]
fn parse_errors_carry_line_numbers() {
    let r = record(1);
    let f = write(&[&r, &r, "{not json"]);
    assert!(matches!(qa::load_dataset(f.path()), Err(DatasetError::Parse { line: 3, .. })));
}

#[test]
fn gapped_ranks_rejected() {
    let bad = record(2).replace(r#""rank":2"#, r#""rank":3"#);
    let f = write(&[&bad]);
    assert!(matches!(qa::load_dataset(f.path()), Err(DatasetError::Invariant { line: 1, .. })));
}

#[test]
fn missing_file_is_io_error() {
    assert!(matches!(qa::load_dataset("/nonexistent/x.jsonl"), Err(DatasetError::Io { .. })));
}
