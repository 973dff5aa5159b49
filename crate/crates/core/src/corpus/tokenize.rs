/// Literal surface of the digit placeholder token.
pub const DIGIT_TOKEN: &str = "[digit]";
/// Literal surface of the separator token.
pub const SEP_TOKEN: &str = "[sep]";

const BRACKET_LITERALS: [&str; 2] = [DIGIT_TOKEN, SEP_TOKEN];

/// Lowercases, splits on whitespace and punctuation (dropping the
/// punctuation), and replaces every maximal run of digits with `[digit]`.
/// The bracketed literals `[digit]` and `[sep]` are kept as single tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    let lower = text.to_lowercase();
    let mut tokens = Vec::new();
    let mut word = String::new();
    let mut chars = lower.char_indices().peekable();

    let flush = |word: &mut String, tokens: &mut Vec<String>| {
        if !word.is_empty() {
            tokens.push(std::mem::take(word));
        }
    };

    while let Some((i, c)) = chars.next() {
        if c == '[' {
            if let Some(lit) = BRACKET_LITERALS.iter().find(|l| lower[i..].starts_with(*l)) {
                flush(&mut word, &mut tokens);
                tokens.push((*lit).to_string());
                // skip the rest of the literal
                for _ in 1..lit.chars().count() {
                    chars.next();
                }
                continue;
            }
        }
        if c.is_numeric() {
            flush(&mut word, &mut tokens);
            while chars.peek().is_some_and(|(_, n)| n.is_numeric()) {
                chars.next();
            }
            tokens.push(DIGIT_TOKEN.to_string());
        } else if c.is_alphabetic() {
            word.push(c);
        } else {
            flush(&mut word, &mut tokens);
        }
    }
    flush(&mut word, &mut tokens);
    tokens
}

/// Splits text into sentences at `.` and `;`, tokenizing each sentence.
/// Empty sentences are dropped.
pub fn tokenize_sentences(text: &str) -> Vec<Vec<String>> {
    text.split(['.', ';'])
        .map(tokenize)
        .filter(|s| !s.is_empty())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toks(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn examples() {
        assert_eq!(tokenize("Neural Networks!"), toks(&["neural", "networks"]));
        assert_eq!(tokenize("GPT-3 model"), toks(&["gpt", "[digit]", "model"]));
        assert_eq!(tokenize("a  b"), toks(&["a", "b"]));
        assert!(tokenize("").is_empty());
        assert!(tokenize("  ...  ").is_empty());
    }

    #[test]
    fn digit_runs_and_literals() {
        assert_eq!(tokenize("v12.5x"), toks(&["v", "[digit]", "[digit]", "x"]));
        assert_eq!(tokenize("a [sep] b"), toks(&["a", "[sep]", "b"]));
        assert_eq!(tokenize("[SEP]"), toks(&["[sep]"]));
        assert_eq!(tokenize("[digit] 7"), toks(&["[digit]", "[digit]"]));
        assert_eq!(tokenize("[other]"), toks(&["other"]));
    }

    #[test]
    fn unicode_letters_survive() {
        assert_eq!(tokenize("Größe café"), toks(&["größe", "café"]));
    }

    #[test]
    fn sentences() {
        let s = tokenize_sentences("a b. c; d e f.");
        assert_eq!(s, vec![toks(&["a", "b"]), toks(&["c"]), toks(&["d", "e", "f"])]);
    }

    proptest! {
        #[test]
        fn idempotent_on_own_output(text in "[a-zA-Z0-9 ,.!;\\-]{0,60}") {
            let once = tokenize(&text);
            let again = tokenize(&once.join(" "));
            prop_assert_eq!(once, again);
        }
    }
}
