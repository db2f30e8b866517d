//! Registrable-domain derivation against a public-suffix rule list.
//!
//! Grouping DNS names by operator needs the *registrable* domain (the label
//! directly below the public suffix — `shop.example.co.uk` → `example.co.uk`),
//! not the last two labels. The rule list uses the public-suffix format:
//! one rule per line, `*` matches any single label, a leading `!` marks an
//! exception that overrides the wildcard it punches through, and names that
//! match no rule fall back to a one-label suffix.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::fmt;

/// Key identifying a registrable domain (always lowercase).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SldKey(String);

impl SldKey {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for SldKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone)]
struct Rule {
    /// Labels right-to-left (`co.uk` → `["uk", "co"]`); `*` matches any label.
    labels_rev: Vec<String>,
    exception: bool,
}

/// A parsed public-suffix rule list.
#[derive(Debug, Clone, Default)]
pub struct SuffixRules {
    rules: Vec<Rule>,
}

impl SuffixRules {
    /// Parse rule text: one rule per line, `//` comments and blanks ignored.
    pub fn parse(text: &str) -> Result<SuffixRules> {
        let mut rules = Vec::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with("//") {
                continue;
            }
            let (exception, body) = match line.strip_prefix('!') {
                Some(rest) => (true, rest),
                None => (false, line),
            };
            let labels_rev: Vec<String> = body
                .trim_end_matches('.')
                .split('.')
                .rev()
                .map(|l| l.to_ascii_lowercase())
                .collect();
            if labels_rev.iter().any(|l| l.is_empty()) {
                return Err(Error::Config(format!("malformed suffix rule `{line}`")));
            }
            rules.push(Rule {
                labels_rev,
                exception,
            });
        }
        Ok(SuffixRules { rules })
    }

    pub fn from_file(path: &std::path::Path) -> Result<SuffixRules> {
        SuffixRules::parse(&std::fs::read_to_string(path)?)
    }

    /// Number of labels in the public suffix of a name given right-to-left
    /// labels. Exception rules win outright; otherwise the matching rule with
    /// the most labels prevails; no match means a one-label suffix.
    fn suffix_len(&self, labels_rev: &[&str]) -> usize {
        let mut best = 1;
        for rule in &self.rules {
            if rule.labels_rev.len() > labels_rev.len() {
                continue;
            }
            let matches = rule
                .labels_rev
                .iter()
                .zip(labels_rev)
                .all(|(r, l)| r == "*" || r == l);
            if !matches {
                continue;
            }
            if rule.exception {
                // The exception names a registrable domain: its suffix is one
                // label shorter than the rule itself.
                return rule.labels_rev.len() - 1;
            }
            best = best.max(rule.labels_rev.len());
        }
        best
    }

    /// Registrable domain of `name`, lowercased.
    ///
    /// Errors if the name has fewer than two labels, contains an empty label,
    /// or is itself a public suffix.
    pub fn sld_of(&self, name: &str) -> Result<SldKey> {
        let normalized = name.trim_end_matches('.').to_ascii_lowercase();
        let labels: Vec<&str> = normalized.split('.').collect();
        if labels.len() < 2 || labels.iter().any(|l| l.is_empty()) {
            return Err(Error::UnparsableDomain(name.to_string()));
        }
        let labels_rev: Vec<&str> = labels.iter().rev().copied().collect();
        let suffix = self.suffix_len(&labels_rev);
        if labels.len() <= suffix {
            return Err(Error::UnparsableDomain(name.to_string()));
        }
        let sld = labels[labels.len() - suffix - 1..].join(".");
        Ok(SldKey(sld))
    }

    /// Like [`sld_of`](Self::sld_of) but names without a registrable part
    /// (single labels, bare suffixes) fall back to the whole name as the key.
    /// Used where a grouping key must always exist.
    pub fn sld_or_self(&self, name: &str) -> SldKey {
        self.sld_of(name)
            .unwrap_or_else(|_| SldKey(name.trim_end_matches('.').to_ascii_lowercase()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rules() -> SuffixRules {
        SuffixRules::parse(
            "// test rules\n\
             com\n\
             uk\n\
             co.uk\n\
             ck\n\
             *.ck\n\
             !www.ck\n\
             jp\n\
             kobe.jp\n\
             *.kobe.jp\n\
             !city.kobe.jp\n",
        )
        .unwrap()
    }

    fn sld(name: &str) -> String {
        rules().sld_of(name).unwrap().to_string()
    }

    #[test]
    fn plain_two_label_suffix() {
        assert_eq!(sld("example.com"), "example.com");
        assert_eq!(sld("a.b.example.com"), "example.com");
        assert_eq!(sld("shop.example.co.uk"), "example.co.uk");
    }

    #[test]
    fn longest_rule_prevails() {
        // `uk` and `co.uk` both match; co.uk is longer.
        assert_eq!(sld("x.co.uk"), "x.co.uk");
    }

    #[test]
    fn wildcard_and_exception() {
        // *.ck makes anything.ck a suffix, so registrable needs three labels.
        assert_eq!(sld("x.anything.ck"), "x.anything.ck");
        assert!(rules().sld_of("anything.ck").is_err());
        // !www.ck punches through the wildcard: www.ck is registrable.
        assert_eq!(sld("www.ck"), "www.ck");
        assert_eq!(sld("sub.www.ck"), "www.ck");
        // Deeper exception set.
        assert_eq!(sld("city.kobe.jp"), "city.kobe.jp");
        assert_eq!(sld("a.city.kobe.jp"), "city.kobe.jp");
        assert_eq!(sld("a.other.kobe.jp"), "a.other.kobe.jp");
    }

    #[test]
    fn unlisted_tld_falls_back_to_two_labels() {
        assert_eq!(sld("device.vendor.example"), "vendor.example");
    }

    #[test]
    fn degenerate_names_rejected() {
        let r = rules();
        assert!(r.sld_of("com").is_err());
        assert!(r.sld_of("localhost").is_err());
        assert!(r.sld_of("co.uk").is_err()); // exactly a public suffix
        assert!(r.sld_of("a..b.com").is_err());
        assert!(r.sld_of("").is_err());
    }

    #[test]
    fn normalization() {
        assert_eq!(sld("ShOp.Example.COM."), "example.com");
        let r = rules();
        assert_eq!(r.sld_or_self("example.com").as_str(), "example.com");
        assert_eq!(r.sld_or_self("localhost").as_str(), "localhost");
        assert_eq!(r.sld_or_self("CO.UK").as_str(), "co.uk");
    }

    #[test]
    fn empty_rule_list_means_two_label_fallback() {
        let r = SuffixRules::default();
        assert_eq!(r.sld_of("a.b.c.d").unwrap().as_str(), "c.d");
    }

    #[test]
    fn malformed_rule_rejected() {
        assert!(SuffixRules::parse("co..uk\n").is_err());
    }
}
