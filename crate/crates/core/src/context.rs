/// Final context block handed to a downstream generator.
pub fn assemble_context<'a>(query: &str, paragraphs: impl IntoIterator<Item = &'a str>) -> String {
    let mut out = format!("Query/Question by User: {query}\nRetrieved Paragraphs:\n");
    for (i, p) in paragraphs.into_iter().enumerate() {
        out.push_str(&format!("[{}] {}\n", i + 1, p));
    }
    out
}
