//! Answer-text normalization and label/number extraction.

use crate::synthdata::QuestionFormat;

/// Lowercase, punctuation to spaces, whitespace collapsed, trimmed.
pub fn normalize(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut last_space = true;
    for c in text.chars() {
        let c = if c.is_alphanumeric() { Some(c.to_ascii_lowercase()) } else { None };
        match c {
            Some(c) => {
                out.push(c);
                last_space = false;
            }
            None => {
                if !last_space {
                    out.push(' ');
                    last_space = true;
                }
            }
        }
    }
    while out.ends_with(' ') {
        out.pop();
    }
    out
}

/// Extract the predicted label.
///
/// SV: the first whitespace token equal to "yes" or "no" in the normalized
/// text. OE/MC: the longest label whose normalized form appears as a
/// whole-word (token-aligned) substring; ties break to the earliest match,
/// then label-set order. Returns the label in its label-set spelling, or
/// None (which downstream counts as incorrect).
pub fn extract_label(text: &str, format: QuestionFormat, label_set: &[String]) -> Option<String> {
    let norm = normalize(text);
    let tokens: Vec<&str> = norm.split_whitespace().collect();
    match format {
        QuestionFormat::Sv => {
            for t in &tokens {
                if *t == "yes" || *t == "no" {
                    return label_set
                        .iter()
                        .find(|l| normalize(l) == *t)
                        .cloned()
                        .or_else(|| Some(if *t == "yes" { "Yes".into() } else { "No".into() }));
                }
            }
            None
        }
        QuestionFormat::Oe | QuestionFormat::Mc => {
            // (negative length, position, set order) — min wins.
            let mut best: Option<(i64, usize, usize)> = None;
            for (li, label) in label_set.iter().enumerate() {
                let lnorm = normalize(label);
                let ltokens: Vec<&str> = lnorm.split_whitespace().collect();
                if ltokens.is_empty() {
                    continue;
                }
                for start in 0..tokens.len().saturating_sub(ltokens.len() - 1) {
                    if tokens[start..start + ltokens.len()] == ltokens[..] {
                        let key = (-(lnorm.len() as i64), start, li);
                        if best.map_or(true, |b| key < b) {
                            best = Some(key);
                        }
                        break;
                    }
                }
            }
            best.map(|(_, _, li)| label_set[li].clone())
        }
    }
}

/// First maximal decimal literal (optional sign, optional fraction) in the
/// raw text, or None. A literal must start at a word boundary so digits
/// embedded in identifiers ("fev1") are not picked up.
pub fn extract_number(text: &str) -> Option<f64> {
    let bytes = text.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        let boundary = i == 0 || !bytes[i - 1].is_ascii_alphanumeric();
        let sign_here = bytes[i] == b'-' && i + 1 < bytes.len() && bytes[i + 1].is_ascii_digit();
        if !boundary {
            i += 1;
            continue;
        }
        if bytes[i].is_ascii_digit() || sign_here {
            let start = i;
            if sign_here {
                i += 1;
            }
            while i < bytes.len() && bytes[i].is_ascii_digit() {
                i += 1;
            }
            if i + 1 < bytes.len() && bytes[i] == b'.' && bytes[i + 1].is_ascii_digit() {
                i += 1;
                while i < bytes.len() && bytes[i].is_ascii_digit() {
                    i += 1;
                }
            }
            return text[start..i].parse().ok();
        }
        i += 1;
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(labels: &[&str]) -> Vec<String> {
        labels.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn normalize_cases() {
        assert_eq!(normalize("COPD."), "copd");
        assert_eq!(normalize("  Yes,   the patient\u{2026} "), "yes the patient");
        assert_eq!(normalize(""), "");
    }

    #[test]
    fn sv_extraction() {
        let labels = set(&["Yes", "No"]);
        assert_eq!(
            extract_label("yes the recording suggests asthma", QuestionFormat::Sv, &labels),
            Some("Yes".into())
        );
        assert_eq!(
            extract_label("I think NO.", QuestionFormat::Sv, &labels),
            Some("No".into())
        );
        assert_eq!(extract_label("maybe", QuestionFormat::Sv, &labels), None);
    }

    #[test]
    fn oe_substring_extraction() {
        let labels = set(&["copd", "healthy"]);
        assert_eq!(
            extract_label("the most likely diagnosis is copd", QuestionFormat::Oe, &labels),
            Some("copd".into())
        );
        assert_eq!(extract_label("uncertain", QuestionFormat::Oe, &labels), None);
    }

    #[test]
    fn longest_whole_word_match_wins() {
        let labels = set(&["copd", "copd severe"]);
        assert_eq!(
            extract_label("this looks like copd severe stage", QuestionFormat::Oe, &labels),
            Some("copd severe".into())
        );
        // Not a whole-word match: "copdish" must not match "copd".
        assert_eq!(extract_label("copdish", QuestionFormat::Oe, &labels), None);
    }

    #[test]
    fn mc_never_returns_outside_label_set() {
        let labels = set(&["healthy", "lrti"]);
        let got = extract_label("definitely copd", QuestionFormat::Mc, &labels);
        assert_eq!(got, None);
    }

    #[test]
    fn number_extraction() {
        assert_eq!(extract_number("the fev1 is 2.4 liters"), Some(2.4));
        assert_eq!(extract_number("no measurement possible"), None);
        assert_eq!(extract_number("rate 18, previously 21"), Some(18.0));
        assert_eq!(extract_number("level -3.5 now"), Some(-3.5));
        assert_eq!(extract_number("ends with 3."), Some(3.0));
    }
}
