use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{StrategyError, TemplateSet};
use crate::cwe::CweId;
use crate::llm::ChatMessage;

/// A labeled snippet shown to the model before the query.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FewShotExample {
    pub cwe: CweId,
    pub name: String,
    pub vulnerable: bool,
    pub code: String,
}

#[derive(Deserialize)]
struct ExampleFile {
    examples: Vec<FewShotExample>,
}

const FS6: &str = include_str!("../../templates/fs6.toml");
const FS20: &str = include_str!("../../templates/fs20.toml");

pub fn parse_examples(text: &str) -> Result<Vec<FewShotExample>, StrategyError> {
    toml::from_str::<ExampleFile>(text)
        .map(|f| f.examples)
        .map_err(|e| StrategyError::Config(format!("few-shot examples: {e}")))
}

/// A bundled example set by name (`fs6`, `fs20`) or a TOML file path.
pub fn load_examples(name_or_path: &str) -> Result<Vec<FewShotExample>, StrategyError> {
    match name_or_path {
        "fs6" => parse_examples(FS6),
        "fs20" => parse_examples(FS20),
        path => {
            let text = std::fs::read_to_string(Path::new(path))
                .map_err(|e| StrategyError::Config(format!("{path}: {e}")))?;
            parse_examples(&text)
        }
    }
}

pub fn check_balance(examples: &[FewShotExample]) -> Result<(), StrategyError> {
    let vulnerable = examples.iter().filter(|e| e.vulnerable).count();
    let clean = examples.len() - vulnerable;
    if vulnerable != clean {
        return Err(StrategyError::Config(format!(
            "unbalanced few-shot examples: {vulnerable} vulnerable, {clean} clean"
        )));
    }
    Ok(())
}

/// The `{examples}` slot text.
pub fn format_examples(examples: &[FewShotExample]) -> String {
    let mut out = String::new();
    for (i, ex) in examples.iter().enumerate() {
        let verdict = if ex.vulnerable {
            format!(
                "vulnerability: YES | vulnerability type: {} | vulnerability name: {}",
                ex.cwe, ex.name
            )
        } else {
            "vulnerability: NO | vulnerability type: N/A | vulnerability name: N/A".to_string()
        };
        out.push_str(&format!(
            "    Example {}:\n    ```{}```\n    Answer: {verdict}\n",
            i + 1,
            ex.code.trim_end()
        ));
    }
    out.pop();
    out
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FewShotPrompt {
    pub messages: Vec<ChatMessage>,
    pub embedded: usize,
    /// Set when the prompt fell back to zero-shot.
    pub warning: Option<String>,
}

/// Embeds every example with its label, then the query code. An empty list
/// falls back to the plain zero-shot prompt.
pub fn build_few_shot_prompt(
    templates: &TemplateSet,
    examples: &[FewShotExample],
    code: &str,
) -> Result<FewShotPrompt, StrategyError> {
    if examples.is_empty() {
        let warning = "no few-shot examples; using the zero-shot prompt".to_string();
        tracing::warn!("{warning}");
        return Ok(FewShotPrompt {
            messages: vec![ChatMessage::human(templates.render("p_b", &[("code", code)])?)],
            embedded: 0,
            warning: Some(warning),
        });
    }
    check_balance(examples)?;
    let block = format_examples(examples);
    let text = templates.render("p_fs", &[("examples", &block), ("code", code)])?;
    Ok(FewShotPrompt {
        messages: vec![ChatMessage::human(text)],
        embedded: examples.len(),
        warning: None,
    })
}
