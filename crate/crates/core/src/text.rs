//! Word boundaries, tokenization and detokenization shared by every module.
//!
//! A *word* is a maximal run of letters and apostrophes. Everything else
//! (spaces, punctuation, digits, hyphens) is a boundary. Tokens are coarser:
//! a word token may carry internal hyphens (`self-reliant`) so that the
//! bundled models see hyphenated trait terms as a single unit.

/// Letters and apostrophes make up words; everything else separates them.
pub fn is_word_char(c: char) -> bool {
    c.is_alphabetic() || c == '\'' || c == '\u{2019}'
}

/// Number of words in `text`.
pub fn count_words(text: &str) -> usize {
    let mut count = 0;
    let mut in_word = false;
    for c in text.chars() {
        let w = is_word_char(c);
        if w && !in_word {
            count += 1;
        }
        in_word = w;
    }
    count
}

fn is_token_char(c: char) -> bool {
    is_word_char(c) || c.is_alphanumeric()
}

/// Split `text` into word tokens and single-character punctuation tokens.
///
/// Hyphens joining two token characters stay inside the word token.
pub fn tokenize(text: &str) -> Vec<String> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
        } else if is_token_char(c) {
            let start = i;
            i += 1;
            while i < chars.len() {
                if is_token_char(chars[i]) {
                    i += 1;
                } else if chars[i] == '-'
                    && i + 1 < chars.len()
                    && is_token_char(chars[i + 1])
                {
                    i += 2;
                } else {
                    break;
                }
            }
            out.push(chars[start..i].iter().collect());
        } else {
            out.push(c.to_string());
            i += 1;
        }
    }
    out
}

/// Whether a token attaches to the previous one without a space.
pub fn is_punctuation_token(token: &str) -> bool {
    token.chars().next().is_some_and(|c| !is_token_char(c))
}

/// The characters a token contributes to the running text.
pub fn surface_piece(token: &str, first: bool) -> String {
    if first || is_punctuation_token(token) {
        token.to_string()
    } else {
        format!(" {token}")
    }
}

/// Inverse of [`tokenize`] for text produced by the bundled models.
pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    let mut out = String::new();
    for (i, t) in tokens.iter().enumerate() {
        out.push_str(&surface_piece(t.as_ref(), i == 0));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn words_are_letter_runs() {
        assert_eq!(count_words("The nurse was caring."), 4);
        assert_eq!(count_words("self-reliant"), 2);
        assert_eq!(count_words("it's 42 o'clock"), 2);
        assert_eq!(count_words(""), 0);
        assert_eq!(count_words("  ...  "), 0);
    }

    #[test]
    fn tokenize_keeps_hyphenated_words() {
        assert_eq!(
            tokenize("The self-reliant chef, bold and kind."),
            vec!["The", "self-reliant", "chef", ",", "bold", "and", "kind", "."]
        );
        assert_eq!(tokenize("end -"), vec!["end", "-"]);
    }

    #[test]
    fn detokenize_inverts_tokenize_on_canonical_text() {
        let s = "Known for being bold yet caring, the chef excelled.";
        assert_eq!(detokenize(&tokenize(s)), s);
    }
}
