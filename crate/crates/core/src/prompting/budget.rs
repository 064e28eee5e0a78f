use crate::error::{Error, Result};

pub trait Tokenizer: Send + Sync {
    fn count_tokens(&self, text: &str) -> usize;
}

/// Counts whitespace-separated words.
#[derive(Debug, Clone, Copy, Default)]
pub struct WhitespaceTokenizer;

impl Tokenizer for WhitespaceTokenizer {
    fn count_tokens(&self, text: &str) -> usize {
        text.split_whitespace().count()
    }
}

impl<F> Tokenizer for F
where
    F: Fn(&str) -> usize + Send + Sync,
{
    fn count_tokens(&self, text: &str) -> usize {
        self(text)
    }
}

/// Fits a rendered prompt into `budget` tokens by dropping whole utterances
/// from the oldest end of its `### ... ###` block. Everything outside the
/// block is left intact.
pub fn truncate_to_budget(text: &str, budget: usize, tokenizer: &dyn Tokenizer) -> Result<String> {
    let count = tokenizer.count_tokens(text);
    if count <= budget {
        return Ok(text.to_string());
    }

    let Some((block_start, block_end)) = find_block(text) else {
        return Err(Error::IrreduciblePrompt { tokens: count, budget });
    };
    let content = &text[block_start + 4..block_end - 4];
    let units = split_utterances(content);
    let prefix = &text[..block_start];
    let suffix = &text[block_end..];

    let rebuild = |kept: &[&str]| format!("{prefix}### {} ###{suffix}", kept.join(" "));
    for drop in 1..=units.len() {
        let candidate = rebuild(&units[drop..]);
        let tokens = tokenizer.count_tokens(&candidate);
        if tokens <= budget {
            return Ok(candidate);
        }
        if drop == units.len() {
            return Err(Error::IrreduciblePrompt { tokens, budget });
        }
    }
    Err(Error::IrreduciblePrompt {
        tokens: tokenizer.count_tokens(&rebuild(&[])),
        budget,
    })
}

/// Byte range of the first line shaped `### ... ###`.
fn find_block(text: &str) -> Option<(usize, usize)> {
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let body = line.strip_suffix('\n').unwrap_or(line);
        if body.len() >= 8 && body.starts_with("### ") && body.ends_with(" ###") {
            return Some((offset, offset + body.len()));
        }
        offset += line.len();
    }
    None
}

/// Splits `Speaker0:"a" Speaker1:"b"` at utterance boundaries, i.e. at a
/// `" ` followed by `Speaker<digits>:"`.
fn split_utterances(content: &str) -> Vec<&str> {
    if content.is_empty() {
        return Vec::new();
    }
    let bytes = content.as_bytes();
    let mut units = Vec::new();
    let mut start = 0;
    let mut i = 0;
    while let Some(pos) = content[i..].find("\" Speaker") {
        let quote = i + pos;
        let mut j = quote + "\" Speaker".len();
        let digits = j;
        while j < bytes.len() && bytes[j].is_ascii_digit() {
            j += 1;
        }
        if j > digits && content[j..].starts_with(":\"") {
            units.push(&content[start..=quote]);
            start = quote + 2;
        }
        i = quote + 1;
    }
    units.push(&content[start..]);
    units
}

#[cfg(test)]
mod tests {
    use super::*;

    fn prompt(history: &[String], target: &str) -> String {
        let mut block: Vec<String> = history.to_vec();
        block.push(format!("Speaker0:\"{target}\""));
        format!(
            "Now You are an expert.\nThe following conversation noted between '### ###' involves several speakers.\n### {} ###\nPlease infer <Speaker0:\"{target}\"> :",
            block.join(" ")
        )
    }

    #[test]
    fn splits_on_speaker_boundaries() {
        let units = split_utterances(r#"Speaker1:"a b" Speaker0:"say "x" Speaker2" Speaker12:"c""#);
        assert_eq!(
            units,
            vec![
                r#"Speaker1:"a b""#,
                r#"Speaker0:"say "x" Speaker2""#,
                r#"Speaker12:"c""#
            ]
        );
    }

    #[test]
    fn under_budget_unchanged() {
        let text = "word ".repeat(500);
        assert_eq!(truncate_to_budget(&text, 1024, &WhitespaceTokenizer).unwrap(), text);
    }

    #[test]
    fn drops_oldest_utterances() {
        let history: Vec<String> = (0..30)
            .map(|i| format!("Speaker{}:\"{}\"", i % 2, format!("u{i} ").repeat(50).trim_end()))
            .collect();
        let text = prompt(&history, "final words here");
        let tok = WhitespaceTokenizer;
        assert!(tok.count_tokens(&text) > 1024);

        let out = truncate_to_budget(&text, 1024, &tok).unwrap();
        let n = tok.count_tokens(&out);
        assert!(n <= 1024, "{n}");
        // 50 words per history utterance: dropping one fewer must not fit.
        assert!(n + 50 > 1024);
        assert!(out.ends_with("Please infer <Speaker0:\"final words here\"> :"));
        assert!(out.contains("Speaker0:\"final words here\" ###"));
        assert!(!out.contains("u0 "));
        assert!(out.contains("u29 "));
        assert!(out.starts_with("Now You are an expert.\nThe following conversation noted between '### ###'"));
    }

    #[test]
    fn scaffold_alone_over_budget() {
        let text = prompt(&[], "a b c");
        let err = truncate_to_budget(&text, 5, &WhitespaceTokenizer).unwrap_err();
        assert!(err.to_string().contains("irreducible prompt"));
    }

    #[test]
    fn closure_tokenizer() {
        let chars = |s: &str| s.chars().count();
        let text = prompt(&["Speaker1:\"hello there\"".into()], "x");
        let limit = chars(&text) - 5;
        let out = truncate_to_budget(&text, limit, &chars).unwrap();
        assert!(!out.contains("hello there"));
    }

    proptest::proptest! {
        #[test]
        fn idempotent(n in 0usize..20, words in 1usize..20, budget in 10usize..300) {
            let history: Vec<String> = (0..n)
                .map(|i| format!("Speaker{}:\"{}\"", i % 3, "w ".repeat(words).trim_end()))
                .collect();
            let text = prompt(&history, "t");
            if let Ok(once) = truncate_to_budget(&text, budget, &WhitespaceTokenizer) {
                let twice = truncate_to_budget(&once, budget, &WhitespaceTokenizer).unwrap();
                proptest::prop_assert_eq!(once, twice);
            }
        }
    }
}
