use std::collections::BTreeSet;

use super::LabelError;

const DEFAULT_CONFIG: &str = include_str!("../../../../config/labeler.txt");

/// Word lists consulted by the labeling rules. All entries are lowercase.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelerConfig {
    pub org_keywords: BTreeSet<String>,
    pub person_titles: BTreeSet<String>,
    pub person_verbs: BTreeSet<String>,
    pub manner_prepositions: BTreeSet<String>,
    pub predicative_deps: BTreeSet<String>,
    pub object_deps: BTreeSet<String>,
    pub appositive_deps: BTreeSet<String>,
    pub subject_deps: BTreeSet<String>,
    pub possessive_deps: BTreeSet<String>,
}

impl Default for LabelerConfig {
    fn default() -> Self {
        LabelerConfig::parse(DEFAULT_CONFIG).expect("bundled labeler config is valid")
    }
}

impl LabelerConfig {
    /// Parses the sectioned plain-text format of `config/labeler.txt`.
    pub fn parse(text: &str) -> Result<Self, LabelError> {
        let mut cfg = LabelerConfig {
            org_keywords: BTreeSet::new(),
            person_titles: BTreeSet::new(),
            person_verbs: BTreeSet::new(),
            manner_prepositions: BTreeSet::new(),
            predicative_deps: BTreeSet::new(),
            object_deps: BTreeSet::new(),
            appositive_deps: BTreeSet::new(),
            subject_deps: BTreeSet::new(),
            possessive_deps: BTreeSet::new(),
        };
        let mut section: Option<String> = None;
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = Some(name.trim().to_string());
                continue;
            }
            let entry = line.to_lowercase();
            let set = match section.as_deref() {
                Some("org_keywords") => &mut cfg.org_keywords,
                Some("person_titles") => &mut cfg.person_titles,
                Some("person_verbs") => &mut cfg.person_verbs,
                Some("manner_prepositions") => &mut cfg.manner_prepositions,
                Some("predicative_deps") => &mut cfg.predicative_deps,
                Some("object_deps") => &mut cfg.object_deps,
                Some("appositive_deps") => &mut cfg.appositive_deps,
                Some("subject_deps") => &mut cfg.subject_deps,
                Some("possessive_deps") => &mut cfg.possessive_deps,
                Some(other) => {
                    return Err(LabelError::Config { line: i + 1, message: format!("unknown section [{other}]") })
                }
                None => return Err(LabelError::Config { line: i + 1, message: "entry before any section".into() }),
            };
            set.insert(entry);
        }
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_config_has_documented_org_keywords() {
        let cfg = LabelerConfig::default();
        let expected = [
            "committee",
            "council",
            "university",
            "party",
            "institute",
            "company",
            "association",
            "ministry",
            "agency",
        ];
        assert_eq!(cfg.org_keywords, expected.iter().map(|s| s.to_string()).collect());
        assert!(cfg.person_titles.contains("professor"));
        assert!(cfg.person_verbs.contains("born"));
    }

    #[test]
    fn rejects_unknown_section() {
        assert!(matches!(LabelerConfig::parse("[nope]\nx\n"), Err(LabelError::Config { line: 2, .. })));
    }
}
