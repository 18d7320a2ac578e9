const PUNCT: &[char] = &['.', ',', '!', '?', ';', ':', '"', '(', ')'];

/// Lowercases, splits on whitespace and peels punctuation off word edges
/// into separate tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in text.to_lowercase().split_whitespace() {
        let mut core = word;
        let mut leading = Vec::new();
        while let Some(c) = core.chars().next().filter(|c| PUNCT.contains(c)) {
            leading.push(c.to_string());
            core = &core[c.len_utf8()..];
        }
        let mut trailing = Vec::new();
        while let Some(c) = core.chars().last().filter(|c| PUNCT.contains(c)) {
            trailing.push(c.to_string());
            core = &core[..core.len() - c.len_utf8()];
        }
        out.extend(leading);
        if !core.is_empty() {
            out.push(core.to_string());
        }
        out.extend(trailing.into_iter().rev());
    }
    out
}
