//! Text normalization for user comments.
//!
//! Rules run in a fixed order: HTML tags, URLs, @-mentions, laughter,
//! punctuation runs, whitespace. The whole pipeline is re-applied until the
//! text stops changing, so an earlier rule can never be re-armed by a later
//! one (for example `www..x.com` collapsing into a URL). Every rule that
//! changes the text shortens it, which bounds the loop.

use std::sync::LazyLock;

use regex::Regex;

static TAG: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"<[^<>]*>").unwrap());
static URL: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?i)(?:https?://|www\.)\S+").unwrap());
static MENTION: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"@\w+").unwrap());
static WORD: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\p{L}+").unwrap());
static PUNCT_RUN: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"[\p{P}\p{S}]{2,}").unwrap());

/// Normalizes one comment or title. Stopwords are kept.
pub fn clean_text(raw: &str) -> String {
    let mut current = raw.to_string();
    loop {
        let next = clean_once(&current);
        if next == current {
            return next;
        }
        current = next;
    }
}

fn clean_once(text: &str) -> String {
    let text = TAG.replace_all(text, " ");
    let text = URL.replace_all(&text, " ");
    let text = MENTION.replace_all(&text, " ");
    let text = remove_laughter(&text);
    let text = collapse_punctuation(&text);
    normalize_whitespace(&text)
}

/// Collapses runs of whitespace to single spaces and trims both ends.
pub fn normalize_whitespace(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// A laughter token is a whole letter run of length >= 4 that alternates
/// between one repeated consonant from {j, h} and vowels from {a, e, i},
/// e.g. "jajaja", "JEJE", "ahahah". Words such as "hija" (two different
/// consonants) are not laughter.
pub fn is_laughter(word: &str) -> bool {
    let chars: Vec<char> = word.chars().flat_map(char::to_lowercase).collect();
    if chars.len() < 4 {
        return false;
    }
    let is_consonant = |c: char| c == 'j' || c == 'h';
    let is_vowel = |c: char| matches!(c, 'a' | 'e' | 'i');
    if !chars.iter().all(|&c| is_consonant(c) || is_vowel(c)) {
        return false;
    }
    let starts_with_consonant = is_consonant(chars[0]);
    let mut consonant = None;
    for (i, &c) in chars.iter().enumerate() {
        let expect_consonant = (i % 2 == 0) == starts_with_consonant;
        if expect_consonant != is_consonant(c) {
            return false;
        }
        if expect_consonant {
            match consonant {
                None => consonant = Some(c),
                Some(prev) if prev != c => return false,
                Some(_) => {}
            }
        }
    }
    true
}

fn remove_laughter(text: &str) -> String {
    WORD.replace_all(text, |caps: &regex::Captures<'_>| {
        let word = &caps[0];
        if is_laughter(word) {
            " ".to_string()
        } else {
            word.to_string()
        }
    })
    .into_owned()
}

fn collapse_punctuation(text: &str) -> String {
    PUNCT_RUN
        .replace_all(text, |caps: &regex::Captures<'_>| {
            let mut out = String::new();
            let mut prev = None;
            for c in caps[0].chars() {
                if prev != Some(c) {
                    out.push(c);
                }
                prev = Some(c);
            }
            out
        })
        .into_owned()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn documented_rule_order_example() {
        assert_eq!(clean_text("see <b>this</b>!!! http://x.co @sam"), "see this !");
    }

    #[test]
    fn fixed_point_and_empty() {
        assert_eq!(clean_text("plain sentence"), "plain sentence");
        assert_eq!(clean_text(""), "");
        assert_eq!(clean_text("   \t\n "), "");
    }

    #[test]
    fn laughter_detection() {
        for w in [
            "jaja", "jajaja", "JAJAJA", "hahaha", "jejeje", "jijiji", "ajaj", "jajeji",
        ] {
            assert!(is_laughter(w), "{w}");
        }
        for w in ["jaj", "hija", "hijo", "ahijada", "hola", "jajaxa", "jjaa", "haja"] {
            assert!(!is_laughter(w), "{w}");
        }
        assert_eq!(clean_text("que risa jajajaja la hija"), "que risa la hija");
    }

    #[test]
    fn urls_mentions_and_punctuation() {
        assert_eq!(clean_text("mira www.emol.com/x?y=1 ahora"), "mira ahora");
        assert_eq!(clean_text("@juan_23 tienes razón"), "tienes razón");
        assert_eq!(clean_text("¿¿¿en serio??? ...no"), "¿en serio? .no");
        assert_eq!(clean_text("a -- b"), "a - b");
    }

    #[test]
    fn rearmed_url_is_removed() {
        // punctuation collapse turns "www..x.co" into a URL
        assert_eq!(clean_text("go www..x.co now"), "go now");
    }

    proptest! {
        #[test]
        fn idempotent(s in "[a-zA-Z@:/<>!?. jah_0-9áé]{0,40}") {
            let once = clean_text(&s);
            prop_assert_eq!(clean_text(&once), once.clone());
        }

        #[test]
        fn no_tags_urls_mentions_remain(s in "[a-z<>@/:. !]{0,40}") {
            let out = clean_text(&s);
            prop_assert!(!TAG.is_match(&out));
            prop_assert!(!URL.is_match(&out));
            prop_assert!(!MENTION.is_match(&out));
            prop_assert!(!out.contains("  "));
        }
    }
}
