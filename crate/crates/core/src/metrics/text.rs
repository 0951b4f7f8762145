//! Caption tokenization: lowercase, punctuation split into standalone
//! tokens, then whitespace split.

use alloc::string::String;
use alloc::vec::Vec;

/// Human-readable description echoed in metric reports.
pub const TOKENIZATION: &str = "lowercase; punctuation as standalone tokens; whitespace split";

pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for c in text.chars() {
        if c.is_whitespace() {
            flush(&mut word, &mut out);
        } else if c.is_alphanumeric() {
            word.extend(c.to_lowercase());
        } else {
            flush(&mut word, &mut out);
            out.push(c.to_lowercase().collect());
        }
    }
    flush(&mut word, &mut out);
    out
}

fn flush(word: &mut String, out: &mut Vec<String>) {
    if !word.is_empty() {
        out.push(core::mem::take(word));
    }
}
