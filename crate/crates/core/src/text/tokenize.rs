//! Whitespace tokenization with punctuation split off as single tokens,
//! lowercased.

pub fn tokenize(text: &str) -> Vec<String> {
    let lower = text.to_lowercase();
    let mut out = Vec::new();
    let mut cur = String::new();
    for c in lower.chars() {
        if c.is_whitespace() {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
        } else if c.is_alphanumeric() || c == '\'' {
            cur.push(c);
        } else {
            // punctuation becomes its own token
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            out.push(c.to_string());
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lowercases_and_splits_punctuation() {
        assert_eq!(
            tokenize("Hello, World! i am 2nd."),
            vec!["hello", ",", "world", "!", "i", "am", "2nd", "."]
        );
    }

    #[test]
    fn apostrophes_stay_inside_words() {
        assert_eq!(tokenize("i'm fine"), vec!["i'm", "fine"]);
    }

    #[test]
    fn empty_input_gives_no_tokens() {
        assert!(tokenize("   ").is_empty());
    }
}
