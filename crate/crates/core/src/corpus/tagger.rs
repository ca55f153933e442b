//! Rule-based UPOS tagger used when a corpus ships without tags.
//!
//! A closed-class lexicon covers function words; open-class words fall back to
//! suffix heuristics and finally to NOUN.

pub const UPOS_TAGS: [&str; 17] = [
    "ADJ", "ADP", "ADV", "AUX", "CCONJ", "DET", "INTJ", "NOUN", "NUM", "PART", "PRON", "PROPN", "PUNCT", "SCONJ",
    "SYM", "VERB", "X",
];

pub fn is_known_tag(tag: &str) -> bool {
    UPOS_TAGS.contains(&tag)
}

fn lexicon(word: &str) -> Option<&'static str> {
    let tag = match word {
        "a" | "an" | "the" | "this" | "that" | "these" | "those" | "some" | "any" | "each" | "every" | "another" => {
            "DET"
        }
        "in" | "on" | "at" | "of" | "with" | "by" | "for" | "from" | "to" | "into" | "onto" | "over" | "under"
        | "about" | "through" | "near" | "behind" | "across" | "around" | "between" | "during" | "after"
        | "before" | "while" => "ADP",
        "and" | "or" | "but" | "nor" | "yet" | "so" => "CCONJ",
        "i" | "you" | "he" | "she" | "it" | "we" | "they" | "him" | "her" | "them" | "us" | "me" | "his" | "its"
        | "their" | "our" | "my" | "your" | "someone" | "something" | "who" | "which" => "PRON",
        "is" | "are" | "was" | "were" | "be" | "been" | "being" | "am" | "has" | "have" | "had" | "do" | "does"
        | "did" | "can" | "could" | "will" | "would" | "should" | "may" | "might" | "must" => "AUX",
        "not" | "n't" => "PART",
        "very" | "too" | "also" | "just" | "then" | "there" | "here" | "now" | "up" | "down" | "out" | "away"
        | "back" => "ADV",
        "if" | "because" | "although" | "when" | "whether" => "SCONJ",
        "oh" | "wow" | "hey" => "INTJ",
        _ => return None,
    };
    Some(tag)
}

pub fn tag_word(word: &str) -> &'static str {
    let lower = word.to_lowercase();
    if lower.is_empty() {
        return "X";
    }
    if lower.chars().all(|c| c.is_ascii_punctuation()) {
        return "PUNCT";
    }
    if lower.chars().all(|c| c.is_ascii_digit() || c == '.' || c == ',') {
        return "NUM";
    }
    if let Some(tag) = lexicon(&lower) {
        return tag;
    }
    let ends = |s: &str| lower.len() > s.len() + 2 && lower.ends_with(s);
    if ends("ly") {
        "ADV"
    } else if ends("ing") || ends("ed") || ends("ize") || ends("ise") {
        "VERB"
    } else if ends("ous") || ends("ful") || ends("ive") || ends("able") || ends("ible") || ends("al") || ends("ic")
        || ends("less") || ends("ish")
    {
        "ADJ"
    } else {
        "NOUN"
    }
}

pub fn tag<S: AsRef<str>>(tokens: &[S]) -> Vec<String> {
    tokens.iter().map(|t| tag_word(t.as_ref()).to_string()).collect()
}
