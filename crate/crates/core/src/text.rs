//! Word-level text handling shared by the corpus validator, the prompt
//! builder and the label parser.

const PUNCTUATION: &[char] = &['.', ',', ':', ';', '!', '?', '(', ')'];

/// Split text into lowercase words; punctuation marks become their own words.
pub fn words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let mut current = String::new();
        for ch in chunk.chars() {
            if PUNCTUATION.contains(&ch) {
                if !current.is_empty() {
                    out.push(std::mem::take(&mut current));
                }
                out.push(ch.to_string());
            } else {
                current.extend(ch.to_lowercase());
            }
        }
        if !current.is_empty() {
            out.push(current);
        }
    }
    out
}

/// Canonical single-spaced form of `text`.
pub fn normalize(text: &str) -> String {
    words(text).join(" ")
}

/// Position of the first occurrence of `needle` as a contiguous run inside `haystack`.
pub fn find_run<T: PartialEq>(haystack: &[T], needle: &[T], from: usize) -> Option<usize> {
    if needle.is_empty() || haystack.len() < needle.len() {
        return None;
    }
    (from..=haystack.len() - needle.len()).find(|&i| haystack[i..i + needle.len()] == *needle)
}
