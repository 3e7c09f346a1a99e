//! Prompting strategies as multi-turn protocols over a [`Gateway`].
//!
//! A [`StrategySpec`] names the protocol, its templates, temperature and
//! sample count; the bundled [`Registry`] holds one spec per [`StrategyId`].
//! [`Engine`] runs a spec on one [`TestCase`] and returns a [`ScanResult`]
//! whose verdicts come from [`aggregate`], a pure function of the
//! transcript. Re-aggregating a stored transcript reproduces the result.

mod api_seq;
mod few_shot;
mod templates;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::lexer::LexError;
use crate::corpus::{prepare_for_llm, TestCase};
use crate::cwe::CweId;
use crate::llm::{ChatMessage, CompletionParams, Gateway, LlmError, ModelProfile, Transcript};
use crate::verdict::{parse_verdicts, Diagnostic, ParsedResponse, Verdict};

pub use api_seq::{extract_api_sequence, format_api_sequence, ApiCall};
pub use few_shot::{
    build_few_shot_prompt, check_balance, format_examples, load_examples, parse_examples, FewShotExample,
    FewShotPrompt,
};
pub use templates::{placeholders, TemplateSet, PLACEHOLDERS};

/// Package name written into every prompt's code unless overridden.
pub const DEFAULT_PACKAGE: &str = "testcases";

#[derive(Debug, Error)]
pub enum StrategyError {
    #[error("strategy configuration: {0}")]
    Config(String),
    #[error("template: {0}")]
    Template(String),
    #[error("{case_id}: {source}")]
    Lex { case_id: String, source: LexError },
    #[error("{case_id} ({purpose}): {source}")]
    Llm {
        case_id: String,
        purpose: String,
        source: LlmError,
    },
    #[error("transcript does not fit the protocol: {0}")]
    Transcript(String),
}

impl StrategyError {
    /// The gateway error behind this one, if any.
    pub fn llm_error(&self) -> Option<&LlmError> {
        match self {
            StrategyError::Llm { source, .. } => Some(source),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum StrategyId {
    B,
    BRci,
    BSr,
    BSsr,
    BSrci,
    BSc,
    As,
    AsRci,
    Rf,
    RfRci,
    Fs20,
    Fs6,
    Fs6Rci,
    Dfa,
    DfaRci,
    DfaH,
    DfaHRci,
    CotDfa,
    CotDfaRci,
    Cot8s,
    Cot8sRci,
    Cot8sSc,
    Cr,
    CrRci,
    Tot8s,
}

impl StrategyId {
    pub const ALL: [StrategyId; 25] = [
        StrategyId::B,
        StrategyId::BRci,
        StrategyId::BSr,
        StrategyId::BSsr,
        StrategyId::BSrci,
        StrategyId::BSc,
        StrategyId::As,
        StrategyId::AsRci,
        StrategyId::Rf,
        StrategyId::RfRci,
        StrategyId::Fs20,
        StrategyId::Fs6,
        StrategyId::Fs6Rci,
        StrategyId::Dfa,
        StrategyId::DfaRci,
        StrategyId::DfaH,
        StrategyId::DfaHRci,
        StrategyId::CotDfa,
        StrategyId::CotDfaRci,
        StrategyId::Cot8s,
        StrategyId::Cot8sRci,
        StrategyId::Cot8sSc,
        StrategyId::Cr,
        StrategyId::CrRci,
        StrategyId::Tot8s,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StrategyId::B => "b",
            StrategyId::BRci => "b_rci",
            StrategyId::BSr => "b_sr",
            StrategyId::BSsr => "b_ssr",
            StrategyId::BSrci => "b_srci",
            StrategyId::BSc => "b_sc",
            StrategyId::As => "as",
            StrategyId::AsRci => "as_rci",
            StrategyId::Rf => "rf",
            StrategyId::RfRci => "rf_rci",
            StrategyId::Fs20 => "fs20",
            StrategyId::Fs6 => "fs6",
            StrategyId::Fs6Rci => "fs6_rci",
            StrategyId::Dfa => "dfa",
            StrategyId::DfaRci => "dfa_rci",
            StrategyId::DfaH => "dfa_h",
            StrategyId::DfaHRci => "dfa_h_rci",
            StrategyId::CotDfa => "cot_dfa",
            StrategyId::CotDfaRci => "cot_dfa_rci",
            StrategyId::Cot8s => "cot_8s",
            StrategyId::Cot8sRci => "cot_8s_rci",
            StrategyId::Cot8sSc => "cot_8s_sc",
            StrategyId::Cr => "cr",
            StrategyId::CrRci => "cr_rci",
            StrategyId::Tot8s => "tot_8s",
        }
    }

    /// Table label, e.g. `p_dfa-rci`.
    pub fn label(self) -> String {
        format!("p_{}", self.as_str().replace('_', "-"))
    }
}

impl fmt::Display for StrategyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Accepts `dfa_rci`, `p_dfa-rci` and `p_dfa_rci`.
impl FromStr for StrategyId {
    type Err = StrategyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = s.trim();
        let t = t.strip_prefix("p_").unwrap_or(t).replace('-', "_");
        StrategyId::ALL
            .into_iter()
            .find(|id| id.as_str() == t)
            .ok_or_else(|| StrategyError::Config(format!("unknown strategy {s:?}")))
    }
}

impl Serialize for StrategyId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for StrategyId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    Single,
    Rci,
    SelfRefine,
    ShortRefine,
    ShortRci,
    SelfConsistency,
    Tot,
}

impl Protocol {
    fn template_count(self) -> usize {
        match self {
            Protocol::Single | Protocol::SelfConsistency => 1,
            Protocol::ShortRefine | Protocol::ShortRci | Protocol::Tot => 2,
            Protocol::Rci | Protocol::SelfRefine => 3,
        }
    }

    fn purposes(self) -> &'static [&'static str] {
        match self {
            Protocol::Rci => &["analysis", "criticism", "improvement"],
            Protocol::SelfRefine => &["analysis", "feedback", "refinement"],
            Protocol::ShortRefine | Protocol::ShortRci => &["analysis", "review"],
            _ => &["analysis"],
        }
    }
}

/// Tree-of-thoughts dimensions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TotShape {
    pub steps: usize,
    pub candidates: usize,
    pub evaluators: usize,
}

impl Default for TotShape {
    fn default() -> Self {
        TotShape {
            steps: 8,
            candidates: 3,
            evaluators: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TotStep {
    pub title: String,
    pub instruction: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrategySpec {
    pub id: StrategyId,
    pub protocol: Protocol,
    /// Template names in turn order.
    pub templates: Vec<String>,
    pub temperature: f64,
    pub samples: u32,
    /// Few-shot example set (`fs6`, `fs20` or a path).
    pub few_shot: Option<String>,
    /// Fenced code blocks in responses are not parsed for verdicts.
    pub exclude_code_blocks: bool,
    pub tot: Option<TotShape>,
}

impl StrategySpec {
    /// Gateway calls per file.
    pub fn expected_calls(&self) -> usize {
        match self.protocol {
            Protocol::SelfConsistency => self.samples as usize,
            Protocol::Tot => {
                let shape = self.tot.unwrap_or_default();
                shape.steps * (shape.candidates + shape.evaluators)
            }
            p => p.template_count(),
        }
    }

    pub fn validate(&self, templates: &TemplateSet) -> Result<(), StrategyError> {
        let bad = |msg: String| Err(StrategyError::Config(format!("{}: {msg}", self.id)));
        if self.templates.len() != self.protocol.template_count() {
            return bad(format!(
                "{:?} takes {} templates, got {}",
                self.protocol,
                self.protocol.template_count(),
                self.templates.len()
            ));
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return bad(format!("temperature {} outside [0, 2]", self.temperature));
        }
        match self.protocol {
            Protocol::SelfConsistency if self.samples != 3 => return bad("self-consistency needs 3 samples".into()),
            Protocol::SelfConsistency => {}
            _ if self.samples != 1 => return bad(format!("{:?} takes 1 sample", self.protocol)),
            _ => {}
        }
        match (self.protocol, self.tot) {
            (Protocol::Tot, Some(shape)) if shape != TotShape::default() => {
                return bad("tree of thoughts is 8 steps, 3 candidates, 3 evaluators".into())
            }
            (Protocol::Tot, None) => return bad("tree of thoughts shape missing".into()),
            (p, Some(_)) if p != Protocol::Tot => return bad("tot shape on a non-tot protocol".into()),
            _ => {}
        }
        for name in &self.templates {
            if templates.get(name).is_none() {
                return bad(format!("no template named {name:?}"));
            }
        }
        let first = placeholders(templates.get(&self.templates[0]).unwrap_or_default());
        if !first.iter().any(|p| p == "code") {
            return bad(format!("{} has no {{code}} slot", self.templates[0]));
        }
        if first.iter().any(|p| p == "examples") != self.few_shot.is_some() {
            return bad("few-shot set and {examples} slot must come together".into());
        }
        Ok(())
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSpec {
    protocol: Protocol,
    templates: Vec<String>,
    #[serde(default)]
    temperature: f64,
    #[serde(default = "one")]
    samples: u32,
    few_shot: Option<String>,
    #[serde(default)]
    exclude_code_blocks: bool,
}

fn one() -> u32 {
    1
}

#[derive(Deserialize)]
struct RawRegistry {
    strategies: BTreeMap<String, RawSpec>,
}

#[derive(Deserialize)]
struct RawSteps {
    steps: Vec<TotStep>,
}

const REGISTRY: &str = include_str!("../../templates/registry.toml");
const TOT_STEPS: &str = include_str!("../../templates/tot_8s_steps.toml");

/// StrategyId → spec.
#[derive(Clone, Debug, PartialEq)]
pub struct Registry {
    specs: BTreeMap<StrategyId, StrategySpec>,
}

impl Registry {
    pub fn bundled() -> Self {
        Registry::from_toml(REGISTRY).expect("bundled registry is valid")
    }

    pub fn from_toml(text: &str) -> Result<Self, StrategyError> {
        let raw: RawRegistry = toml::from_str(text).map_err(|e| StrategyError::Config(e.to_string()))?;
        let mut specs = BTreeMap::new();
        for (name, r) in raw.strategies {
            let id: StrategyId = name.parse()?;
            specs.insert(
                id,
                StrategySpec {
                    id,
                    tot: (r.protocol == Protocol::Tot).then(TotShape::default),
                    protocol: r.protocol,
                    templates: r.templates,
                    temperature: r.temperature,
                    samples: r.samples,
                    few_shot: r.few_shot,
                    exclude_code_blocks: r.exclude_code_blocks,
                },
            );
        }
        Ok(Registry { specs })
    }

    pub fn get(&self, id: StrategyId) -> Result<&StrategySpec, StrategyError> {
        self.specs
            .get(&id)
            .ok_or_else(|| StrategyError::Config(format!("strategy {id} is not registered")))
    }

    pub fn specs(&self) -> impl Iterator<Item = &StrategySpec> {
        self.specs.values()
    }
}

pub fn parse_tot_steps(text: &str) -> Result<Vec<TotStep>, StrategyError> {
    toml::from_str::<RawSteps>(text)
        .map(|r| r.steps)
        .map_err(|e| StrategyError::Config(format!("tot steps: {e}")))
}

pub fn bundled_tot_steps() -> Vec<TotStep> {
    parse_tot_steps(TOT_STEPS).expect("bundled tot steps are valid")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScanStatus {
    Completed,
    /// The prompt did not fit the model's context window. Such cases are
    /// left out of the metrics.
    SkippedOverflow,
}

/// One strategy's outcome on one file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanResult {
    pub case_id: String,
    pub strategy: StrategyId,
    pub model: String,
    pub status: ScanStatus,
    pub verdicts: Vec<Verdict>,
    pub diagnostics: Vec<Diagnostic>,
    pub reported_cwes: BTreeSet<CweId>,
    pub final_decision: bool,
    pub transcript: Transcript,
    /// Self-consistency: samples reporting each CWE.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub votes: BTreeMap<CweId, u32>,
    /// Tree of thoughts: the 1-based winning candidate of every step.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tot_choices: Vec<usize>,
}

/// What [`aggregate`] derives from a transcript.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Aggregate {
    pub verdicts: Vec<Verdict>,
    pub diagnostics: Vec<Diagnostic>,
    pub reported_cwes: BTreeSet<CweId>,
    pub final_decision: bool,
    pub votes: BTreeMap<CweId, u32>,
    pub tot_choices: Vec<usize>,
}

/// Blanks fenced code blocks, keeping line numbers.
pub fn strip_code_blocks(text: &str) -> String {
    static FENCE: OnceLock<Regex> = OnceLock::new();
    let re = FENCE.get_or_init(|| Regex::new(r"(?s)```.*?(```|$)").expect("valid regex"));
    re.replace_all(text, |c: &regex::Captures<'_>| "\n".repeat(c[0].matches('\n').count()))
        .into_owned()
}

fn parse_for(spec: &StrategySpec, response: &str) -> ParsedResponse {
    if spec.exclude_code_blocks {
        parse_verdicts(&strip_code_blocks(response))
    } else {
        parse_verdicts(response)
    }
}

/// Per-CWE sample counts and the CWEs reported by a strict majority.
pub fn majority_vote(samples: &[BTreeSet<CweId>]) -> (BTreeMap<CweId, u32>, BTreeSet<CweId>) {
    let mut votes: BTreeMap<CweId, u32> = BTreeMap::new();
    for sample in samples {
        for &cwe in sample {
            *votes.entry(cwe).or_default() += 1;
        }
    }
    let majority = votes
        .iter()
        .filter(|(_, &n)| 2 * n as usize > samples.len())
        .map(|(&c, _)| c)
        .collect();
    (votes, majority)
}

/// The index named on an evaluator's last `best candidate` line, if it is
/// in `1..=candidates`.
pub fn parse_best_candidate(response: &str, candidates: usize) -> Option<usize> {
    static BEST: OnceLock<Regex> = OnceLock::new();
    let re = BEST.get_or_init(|| Regex::new(r"(?i)best[\s*_]+candidate\W{0,6}?(\d+)").expect("valid regex"));
    let last = re.captures_iter(response).last()?;
    let n: usize = last[1].parse().ok()?;
    (1..=candidates).contains(&n).then_some(n)
}

/// Most-voted candidate (1-based); ties and an all-abstain round go to
/// the lowest index.
pub fn tally_votes(votes: &[Option<usize>], candidates: usize) -> usize {
    let mut counts = vec![0usize; candidates + 1];
    for v in votes.iter().flatten() {
        if (1..=candidates).contains(v) {
            counts[*v] += 1;
        }
    }
    let mut best = 1;
    for c in 2..=candidates {
        if counts[c] > counts[best] {
            best = c;
        }
    }
    best
}

/// Final verdicts from a complete transcript.
pub fn aggregate(spec: &StrategySpec, transcript: &Transcript) -> Result<Aggregate, StrategyError> {
    let steps = transcript.steps();
    if steps.len() != spec.expected_calls() {
        return Err(StrategyError::Transcript(format!(
            "{} expects {} calls, transcript has {}",
            spec.id,
            spec.expected_calls(),
            steps.len()
        )));
    }
    match spec.protocol {
        Protocol::SelfConsistency => {
            let mut agg = Aggregate::default();
            let mut samples = Vec::with_capacity(steps.len());
            for step in steps {
                let parsed = parse_for(spec, &step.response.content);
                samples.push(parsed.reported_cwes());
                agg.verdicts.extend(parsed.verdicts);
                agg.diagnostics.extend(parsed.diagnostics);
            }
            let (votes, majority) = majority_vote(&samples);
            agg.final_decision = !majority.is_empty();
            agg.reported_cwes = majority;
            agg.votes = votes;
            Ok(agg)
        }
        Protocol::Tot => {
            let shape = spec.tot.unwrap_or_default();
            let round = shape.candidates + shape.evaluators;
            let mut choices = Vec::with_capacity(shape.steps);
            for chunk in steps.chunks(round) {
                let votes: Vec<Option<usize>> = chunk[shape.candidates..]
                    .iter()
                    .map(|s| parse_best_candidate(&s.response.content, shape.candidates))
                    .collect();
                choices.push(tally_votes(&votes, shape.candidates));
            }
            let last_round = &steps[steps.len() - round..];
            let winner = &last_round[choices[choices.len() - 1] - 1];
            let parsed = parse_for(spec, &winner.response.content);
            Ok(Aggregate {
                reported_cwes: parsed.reported_cwes(),
                final_decision: parsed.has_positive(),
                verdicts: parsed.verdicts,
                diagnostics: parsed.diagnostics,
                votes: BTreeMap::new(),
                tot_choices: choices,
            })
        }
        _ => {
            let parsed = parse_for(spec, &steps[steps.len() - 1].response.content);
            Ok(Aggregate {
                reported_cwes: parsed.reported_cwes(),
                final_decision: parsed.has_positive(),
                verdicts: parsed.verdicts,
                diagnostics: parsed.diagnostics,
                ..Aggregate::default()
            })
        }
    }
}

/// Recomputes a stored result's verdicts from its transcript.
pub fn reaggregate(spec: &StrategySpec, result: &ScanResult) -> Result<ScanResult, StrategyError> {
    if result.status == ScanStatus::SkippedOverflow {
        return Ok(result.clone());
    }
    let agg = aggregate(spec, &result.transcript)?;
    Ok(ScanResult {
        verdicts: agg.verdicts,
        diagnostics: agg.diagnostics,
        reported_cwes: agg.reported_cwes,
        final_decision: agg.final_decision,
        votes: agg.votes,
        tot_choices: agg.tot_choices,
        ..result.clone()
    })
}

/// Runs strategies: templates, registry, few-shot sets and the package
/// name written into prompts.
#[derive(Clone, Debug)]
pub struct Engine {
    templates: TemplateSet,
    registry: Registry,
    tot_steps: Vec<TotStep>,
    examples: BTreeMap<String, Vec<FewShotExample>>,
    package_override: String,
}

enum Outcome {
    Done,
    Overflow,
}

struct Run<'a> {
    case_id: &'a str,
    gateway: &'a Gateway,
    profile: &'a ModelProfile,
    transcript: Transcript,
}

impl Run<'_> {
    /// One call; `Ok(None)` when the request overflows the context window.
    fn call(&mut self, purpose: &str, messages: &[ChatMessage], params: CompletionParams) -> Result<Option<String>, StrategyError> {
        match self.gateway.complete_step(purpose, messages, self.profile, params) {
            Ok(step) => {
                let text = step.response.content.clone();
                self.transcript.push(step);
                Ok(Some(text))
            }
            Err(LlmError::ContextOverflow { estimated, window }) => {
                tracing::warn!(case = self.case_id, purpose, estimated, window, "context overflow; skipping case");
                Ok(None)
            }
            Err(source) => Err(StrategyError::Llm {
                case_id: self.case_id.to_string(),
                purpose: purpose.to_string(),
                source,
            }),
        }
    }
}

impl Engine {
    pub fn new(templates: TemplateSet, registry: Registry, tot_steps: Vec<TotStep>) -> Result<Self, StrategyError> {
        let mut examples = BTreeMap::new();
        for spec in registry.specs() {
            spec.validate(&templates)?;
            if let Some(set) = &spec.few_shot {
                if !examples.contains_key(set) {
                    let loaded = load_examples(set)?;
                    check_balance(&loaded)?;
                    examples.insert(set.clone(), loaded);
                }
            }
            if let Some(shape) = spec.tot {
                if tot_steps.len() != shape.steps {
                    return Err(StrategyError::Config(format!(
                        "{} needs {} tot steps, {} configured",
                        spec.id,
                        shape.steps,
                        tot_steps.len()
                    )));
                }
            }
        }
        Ok(Engine {
            templates,
            registry,
            tot_steps,
            examples,
            package_override: DEFAULT_PACKAGE.to_string(),
        })
    }

    pub fn bundled() -> Self {
        Engine::new(TemplateSet::bundled(), Registry::bundled(), bundled_tot_steps()).expect("bundled strategies are valid")
    }

    pub fn with_package_override(mut self, package: &str) -> Self {
        self.package_override = package.to_string();
        self
    }

    pub fn templates(&self) -> &TemplateSet {
        &self.templates
    }

    pub fn registry(&self) -> &Registry {
        &self.registry
    }

    pub fn spec(&self, id: StrategyId) -> Result<&StrategySpec, StrategyError> {
        self.registry.get(id)
    }

    /// The code as it appears in prompts.
    pub fn prompt_code(&self, case: &TestCase) -> String {
        prepare_for_llm(&case.source_text, &self.package_override)
    }

    /// The opening human turn for a strategy.
    pub fn initial_prompt(&self, spec: &StrategySpec, case: &TestCase) -> Result<Vec<ChatMessage>, StrategyError> {
        let code = self.prompt_code(case);
        if let Some(set) = &spec.few_shot {
            let examples = self.examples.get(set).map(Vec::as_slice).unwrap_or_default();
            return Ok(build_few_shot_prompt(&self.templates, examples, &code)?.messages);
        }
        let name = &spec.templates[0];
        let template = self.templates.get(name).unwrap_or_default();
        let api_sequence = if placeholders(template).iter().any(|p| p == "api_sequence") {
            let calls = extract_api_sequence(&code).map_err(|source| StrategyError::Lex {
                case_id: case.case_id.clone(),
                source,
            })?;
            format_api_sequence(&calls)
        } else {
            String::new()
        };
        let text = self
            .templates
            .render(name, &[("code", &code), ("api_sequence", &api_sequence)])?;
        Ok(vec![ChatMessage::human(text)])
    }

    /// Runs any registered strategy.
    pub fn run(&self, case: &TestCase, id: StrategyId, gateway: &Gateway, profile: &ModelProfile) -> Result<ScanResult, StrategyError> {
        let spec = self.registry.get(id)?;
        match spec.protocol {
            Protocol::Single => self.run_single(case, spec, gateway, profile),
            Protocol::SelfConsistency => self.run_self_consistency(case, spec, gateway, profile),
            Protocol::Tot => self.run_tot(case, spec, gateway, profile),
            _ => self.run_rci(case, spec, gateway, profile),
        }
    }

    fn expect(spec: &StrategySpec, allowed: &[Protocol]) -> Result<(), StrategyError> {
        if allowed.contains(&spec.protocol) {
            Ok(())
        } else {
            Err(StrategyError::Config(format!("{} uses the {:?} protocol", spec.id, spec.protocol)))
        }
    }

    pub fn run_single(&self, case: &TestCase, spec: &StrategySpec, gateway: &Gateway, profile: &ModelProfile) -> Result<ScanResult, StrategyError> {
        Engine::expect(spec, &[Protocol::Single])?;
        self.run_conversation(case, spec, gateway, profile)
    }

    /// RCI, self-refinement and their two-call short forms.
    pub fn run_rci(&self, case: &TestCase, spec: &StrategySpec, gateway: &Gateway, profile: &ModelProfile) -> Result<ScanResult, StrategyError> {
        Engine::expect(
            spec,
            &[Protocol::Rci, Protocol::SelfRefine, Protocol::ShortRefine, Protocol::ShortRci],
        )?;
        self.run_conversation(case, spec, gateway, profile)
    }

    fn run_conversation(&self, case: &TestCase, spec: &StrategySpec, gateway: &Gateway, profile: &ModelProfile) -> Result<ScanResult, StrategyError> {
        let mut run = self.start(case, gateway, profile);
        let params = params(spec.temperature, 0)?;
        let mut messages = self.initial_prompt(spec, case)?;
        let purposes = spec.protocol.purposes();
        let mut outcome = Outcome::Done;
        for (i, purpose) in purposes.iter().enumerate() {
            if i > 0 {
                messages.push(ChatMessage::human(self.templates.render(&spec.templates[i], &[])?));
            }
            match run.call(purpose, &messages, params)? {
                Some(reply) => messages.push(ChatMessage::ai(reply)),
                None => {
                    outcome = Outcome::Overflow;
                    break;
                }
            }
        }
        self.finish(case, spec, profile, run, outcome)
    }

    pub fn run_self_consistency(&self, case: &TestCase, spec: &StrategySpec, gateway: &Gateway, profile: &ModelProfile) -> Result<ScanResult, StrategyError> {
        Engine::expect(spec, &[Protocol::SelfConsistency])?;
        let mut run = self.start(case, gateway, profile);
        let messages = self.initial_prompt(spec, case)?;
        let mut outcome = Outcome::Done;
        for k in 0..spec.samples {
            if run.call(&format!("sample {}", k + 1), &messages, params(spec.temperature, k)?)?.is_none() {
                outcome = Outcome::Overflow;
                break;
            }
        }
        self.finish(case, spec, profile, run, outcome)
    }

    pub fn run_tot(&self, case: &TestCase, spec: &StrategySpec, gateway: &Gateway, profile: &ModelProfile) -> Result<ScanResult, StrategyError> {
        Engine::expect(spec, &[Protocol::Tot])?;
        let shape = spec.tot.unwrap_or_default();
        let code = self.prompt_code(case);
        let mut run = self.start(case, gateway, profile);
        let mut chain: Vec<(usize, &TotStep, String)> = Vec::new();
        let mut outcome = Outcome::Done;
        'steps: for (s, step) in self.tot_steps.iter().enumerate().take(shape.steps) {
            let number = (s + 1).to_string();
            let chain_text = format_chain(&chain);
            let prompt = self.templates.render(
                &spec.templates[0],
                &[
                    ("code", &code),
                    ("chain", &chain_text),
                    ("step", &number),
                    ("step_instruction", &step.instruction),
                ],
            )?;
            let messages = [ChatMessage::human(prompt)];
            let mut candidates = Vec::with_capacity(shape.candidates);
            for c in 0..shape.candidates {
                let purpose = format!("tot step {} candidate {}", s + 1, c + 1);
                match run.call(&purpose, &messages, params(spec.temperature, c as u32)?)? {
                    Some(text) => candidates.push(text),
                    None => {
                        outcome = Outcome::Overflow;
                        break 'steps;
                    }
                }
            }
            let listing = format_candidates(&candidates);
            let eval = self.templates.render(
                &spec.templates[1],
                &[("code", &code), ("chain", &chain_text), ("step", &number), ("candidates", &listing)],
            )?;
            let eval_messages = [ChatMessage::human(eval)];
            let mut votes = Vec::with_capacity(shape.evaluators);
            for e in 0..shape.evaluators {
                let purpose = format!("tot step {} evaluator {}", s + 1, e + 1);
                match run.call(&purpose, &eval_messages, params(spec.temperature, e as u32)?)? {
                    Some(text) => votes.push(parse_best_candidate(&text, shape.candidates)),
                    None => {
                        outcome = Outcome::Overflow;
                        break 'steps;
                    }
                }
            }
            let winner = tally_votes(&votes, shape.candidates);
            chain.push((s + 1, step, candidates.swap_remove(winner - 1)));
        }
        self.finish(case, spec, profile, run, outcome)
    }

    fn start<'a>(&self, case: &'a TestCase, gateway: &'a Gateway, profile: &'a ModelProfile) -> Run<'a> {
        Run {
            case_id: &case.case_id,
            gateway,
            profile,
            transcript: Transcript::new(),
        }
    }

    fn finish(&self, case: &TestCase, spec: &StrategySpec, profile: &ModelProfile, run: Run<'_>, outcome: Outcome) -> Result<ScanResult, StrategyError> {
        let (status, agg) = match outcome {
            Outcome::Done => (ScanStatus::Completed, aggregate(spec, &run.transcript)?),
            Outcome::Overflow => (ScanStatus::SkippedOverflow, Aggregate::default()),
        };
        Ok(ScanResult {
            case_id: case.case_id.clone(),
            strategy: spec.id,
            model: profile.model_name.clone(),
            status,
            verdicts: agg.verdicts,
            diagnostics: agg.diagnostics,
            reported_cwes: agg.reported_cwes,
            final_decision: agg.final_decision,
            transcript: run.transcript,
            votes: agg.votes,
            tot_choices: agg.tot_choices,
        })
    }
}

fn params(temperature: f64, run_index: u32) -> Result<CompletionParams, StrategyError> {
    CompletionParams::new(temperature, run_index).map_err(|e| StrategyError::Config(e.to_string()))
}

fn format_chain(chain: &[(usize, &TotStep, String)]) -> String {
    if chain.is_empty() {
        return "    (none yet)".to_string();
    }
    chain
        .iter()
        .map(|(n, step, text)| format!("    Step {n}. {}:\n{}", step.title, text.trim_end()))
        .collect::<Vec<_>>()
        .join("\n")
}

fn format_candidates(candidates: &[String]) -> String {
    candidates
        .iter()
        .enumerate()
        .map(|(i, text)| format!("    Candidate {}:\n{}", i + 1, text.trim_end()))
        .collect::<Vec<_>>()
        .join("\n")
}
