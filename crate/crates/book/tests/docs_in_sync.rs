//! `docs/` carries copies of the format and command-line chapters for
//! readers who never build the book.

fn read(rel: &str) -> String {
    let root = concat!(env!("CARGO_MANIFEST_DIR"), "/../../");
    std::fs::read_to_string(format!("{root}{rel}")).unwrap_or_else(|e| panic!("{rel}: {e}"))
}

#[test]
fn docs_copies_match_chapters() {
    for name in ["bitstream.md", "cli.md"] {
        assert_eq!(read(&format!("docs/{name}")), read(&format!("book/src/{name}")), "{name}");
    }
}
