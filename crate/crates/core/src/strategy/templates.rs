use std::collections::BTreeMap;
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;

use super::StrategyError;

/// Every placeholder a template may use.
pub const PLACEHOLDERS: &[&str] = &[
    "code",
    "api_sequence",
    "examples",
    "chain",
    "step",
    "step_instruction",
    "candidates",
];

const BUNDLED: &[(&str, &str)] = &[
    ("p_b", include_str!("../../templates/p_b.txt")),
    ("p_as", include_str!("../../templates/p_as.txt")),
    ("p_rf", include_str!("../../templates/p_rf.txt")),
    ("p_fs", include_str!("../../templates/p_fs.txt")),
    ("p_dfa", include_str!("../../templates/p_dfa.txt")),
    ("p_dfa_h", include_str!("../../templates/p_dfa_h.txt")),
    ("p_cot_dfa", include_str!("../../templates/p_cot_dfa.txt")),
    ("p_cot_8s", include_str!("../../templates/p_cot_8s.txt")),
    ("p_cr", include_str!("../../templates/p_cr.txt")),
    ("p_tot_8s", include_str!("../../templates/p_tot_8s.txt")),
    ("p_tot_8s_eval", include_str!("../../templates/p_tot_8s_eval.txt")),
    ("rci_criticism", include_str!("../../templates/rci_criticism.txt")),
    ("rci_improve", include_str!("../../templates/rci_improve.txt")),
    ("sr_feedback", include_str!("../../templates/sr_feedback.txt")),
    ("sr_improve", include_str!("../../templates/sr_improve.txt")),
    ("ssr", include_str!("../../templates/ssr.txt")),
    ("srci", include_str!("../../templates/srci.txt")),
];

fn placeholder_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\{([a-z_]+)\}").expect("valid regex"))
}

/// Named prompt templates with `{name}` placeholders.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TemplateSet {
    templates: BTreeMap<String, String>,
}

impl TemplateSet {
    pub fn bundled() -> Self {
        TemplateSet {
            templates: BUNDLED.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }

    /// The bundled set with every `<name>.txt` in `dir` layered on top.
    pub fn with_overrides(dir: &Path) -> Result<Self, StrategyError> {
        let mut set = TemplateSet::bundled();
        let entries = std::fs::read_dir(dir).map_err(|e| StrategyError::Config(format!("{}: {e}", dir.display())))?;
        for entry in entries {
            let path = entry.map_err(|e| StrategyError::Config(e.to_string()))?.path();
            if path.extension().is_none_or(|x| x != "txt") {
                continue;
            }
            let Some(name) = path.file_stem().and_then(|s| s.to_str()) else {
                continue;
            };
            let text = std::fs::read_to_string(&path)
                .map_err(|e| StrategyError::Config(format!("{}: {e}", path.display())))?;
            set.insert(name, text)?;
        }
        Ok(set)
    }

    pub fn insert(&mut self, name: &str, text: String) -> Result<(), StrategyError> {
        if let Some(unknown) = placeholders(&text).into_iter().find(|p| !PLACEHOLDERS.contains(&p.as_str())) {
            return Err(StrategyError::Template(format!("{name}: unknown placeholder {{{unknown}}}")));
        }
        self.templates.insert(name.to_string(), text);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&str> {
        self.templates.get(name).map(String::as_str)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.templates.keys().map(String::as_str)
    }

    /// Fills placeholders in one pass; substituted text is never rescanned,
    /// so code containing `{code}` stays as written.
    pub fn render(&self, name: &str, vars: &[(&str, &str)]) -> Result<String, StrategyError> {
        let template = self
            .get(name)
            .ok_or_else(|| StrategyError::Template(format!("no template named {name:?}")))?;
        let mut missing = Vec::new();
        let out = placeholder_re().replace_all(template, |caps: &regex::Captures<'_>| {
            let key = &caps[1];
            match vars.iter().find(|(k, _)| *k == key) {
                Some((_, v)) => v.to_string(),
                None => {
                    if PLACEHOLDERS.contains(&key) {
                        missing.push(key.to_string());
                    }
                    caps[0].to_string()
                }
            }
        });
        if !missing.is_empty() {
            return Err(StrategyError::Template(format!(
                "{name}: no value for {}",
                missing.iter().map(|m| format!("{{{m}}}")).collect::<Vec<_>>().join(", ")
            )));
        }
        Ok(out.into_owned())
    }
}

/// Placeholder names used by a template, in order, deduplicated.
pub fn placeholders(text: &str) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for caps in placeholder_re().captures_iter(text) {
        if !out.iter().any(|p| p == &caps[1]) {
            out.push(caps[1].to_string());
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_templates_use_known_placeholders() {
        let set = TemplateSet::bundled();
        for name in set.names() {
            for p in placeholders(set.get(name).unwrap()) {
                assert!(PLACEHOLDERS.contains(&p.as_str()), "{name} uses {{{p}}}");
            }
        }
        assert!(!set.get("p_tot_8s").unwrap().contains("best candidate"));
        assert!(set.get("p_tot_8s_eval").unwrap().ends_with("best candidate: <index>"));
    }

    #[test]
    fn render_is_single_pass() {
        let set = TemplateSet::bundled();
        let out = set.render("p_b", &[("code", "s = \"{code}\";")]).unwrap();
        assert!(out.ends_with("```s = \"{code}\";```"));
        assert!(set.render("p_as", &[("code", "x")]).is_err());
        assert!(set.render("nope", &[]).is_err());
    }
}
