//! The CWE "Research Concepts" hierarchy (view 1000) and match acceptance.
//!
//! A detection reports a CWE identifier; whether that identifier counts as
//! finding the targeted weakness is decided here. The expected CWE itself
//! always matches. Its parents match unless they are pillars, and its
//! descendants match. [`MatchPolicy`] makes every one of those rules
//! switchable.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::io::Read;
use std::num::NonZeroU32;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

const BUNDLED_SNAPSHOT: &str = include_str!("../data/cwe1000_snapshot.csv");

/// A CWE identifier such as `CWE-89`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CweId(NonZeroU32);

impl CweId {
    pub fn new(number: u32) -> Option<Self> {
        NonZeroU32::new(number).map(CweId)
    }

    pub fn number(self) -> u32 {
        self.0.get()
    }
}

impl fmt::Display for CweId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "CWE-{}", self.0)
    }
}

/// Accepts `CWE-89`, `cwe-89` and the bare number `89`. Looser model output
/// goes through [`crate::verdict::normalize_cwe_token`] instead.
impl FromStr for CweId {
    type Err = CweError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let trimmed = s.trim();
        let digits = match trimmed.get(..4) {
            Some(prefix) if prefix.eq_ignore_ascii_case("cwe-") => &trimmed[4..],
            _ => trimmed,
        };
        if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
            return Err(CweError::InvalidId(s.to_string()));
        }
        digits
            .parse::<u32>()
            .ok()
            .and_then(CweId::new)
            .ok_or_else(|| CweError::InvalidId(s.to_string()))
    }
}

impl Serialize for CweId {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for CweId {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let raw = String::deserialize(deserializer)?;
        raw.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Abstraction {
    Pillar,
    Class,
    Base,
    Variant,
    Compound,
}

impl FromStr for Abstraction {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "pillar" => Ok(Abstraction::Pillar),
            "class" => Ok(Abstraction::Class),
            "base" => Ok(Abstraction::Base),
            "variant" => Ok(Abstraction::Variant),
            "compound" | "chain" | "composite" => Ok(Abstraction::Compound),
            other => Err(format!("unknown abstraction level {other:?}")),
        }
    }
}

impl fmt::Display for Abstraction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Abstraction::Pillar => "pillar",
            Abstraction::Class => "class",
            Abstraction::Base => "base",
            Abstraction::Variant => "variant",
            Abstraction::Compound => "compound",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CweNode {
    pub id: CweId,
    pub name: String,
    pub abstraction: Abstraction,
    pub parents: BTreeSet<CweId>,
    pub children: BTreeSet<CweId>,
}

/// One input row before validation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CweRow {
    pub id: CweId,
    pub name: String,
    pub abstraction: Abstraction,
    pub parents: BTreeSet<CweId>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CweError {
    #[error("invalid CWE identifier {0:?}")]
    InvalidId(String),
    #[error("row {row}: {message}")]
    Parse { row: usize, message: String },
    #[error("{child} references parent {parent}, which is not in the view")]
    DanglingParent { child: CweId, parent: CweId },
    #[error("{0} is a pillar but has parents")]
    PillarWithParent(CweId),
    #[error("cycle in the hierarchy through {0}")]
    Cycle(CweId),
    #[error("{0} is not in the graph")]
    Unknown(CweId),
}

/// Which relatives of the expected CWE are accepted as a correct report.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct MatchPolicy {
    pub accept_parent: bool,
    pub accept_children: bool,
    /// All descendants rather than immediate children only.
    pub transitive_children: bool,
    /// All ancestors rather than immediate parents only.
    pub transitive_parents: bool,
    pub exclude_pillar_parent: bool,
}

impl Default for MatchPolicy {
    fn default() -> Self {
        MatchPolicy {
            accept_parent: true,
            accept_children: true,
            transitive_children: true,
            transitive_parents: false,
            exclude_pillar_parent: true,
        }
    }
}

impl MatchPolicy {
    /// Only the exact identifier counts.
    pub fn exact() -> Self {
        MatchPolicy {
            accept_parent: false,
            accept_children: false,
            transitive_children: false,
            transitive_parents: false,
            exclude_pillar_parent: true,
        }
    }
}

/// Immutable, validated view-1000 hierarchy.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CweGraph {
    nodes: BTreeMap<CweId, CweNode>,
}

impl CweGraph {
    /// The snapshot shipped with the crate.
    pub fn bundled() -> CweGraph {
        CweGraph::from_snapshot_csv(BUNDLED_SNAPSHOT.as_bytes())
            .expect("bundled CWE snapshot is valid")
    }

    /// Builds and validates a graph. Rejects duplicate ids, dangling parent
    /// references, pillars with parents and cycles.
    pub fn from_rows<I>(rows: I) -> Result<CweGraph, CweError>
    where
        I: IntoIterator<Item = CweRow>,
    {
        let mut nodes: BTreeMap<CweId, CweNode> = BTreeMap::new();
        for (index, row) in rows.into_iter().enumerate() {
            if nodes.contains_key(&row.id) {
                return Err(CweError::Parse {
                    row: index + 1,
                    message: format!("duplicate id {}", row.id),
                });
            }
            nodes.insert(
                row.id,
                CweNode {
                    id: row.id,
                    name: row.name,
                    abstraction: row.abstraction,
                    parents: row.parents,
                    children: BTreeSet::new(),
                },
            );
        }

        let mut edges = Vec::new();
        for node in nodes.values() {
            if node.abstraction == Abstraction::Pillar && !node.parents.is_empty() {
                return Err(CweError::PillarWithParent(node.id));
            }
            for &parent in &node.parents {
                if parent == node.id {
                    return Err(CweError::Cycle(node.id));
                }
                if !nodes.contains_key(&parent) {
                    return Err(CweError::DanglingParent {
                        child: node.id,
                        parent,
                    });
                }
                edges.push((parent, node.id));
            }
        }
        for (parent, child) in edges {
            if let Some(p) = nodes.get_mut(&parent) {
                p.children.insert(child);
            }
        }

        let graph = CweGraph { nodes };
        graph.check_acyclic()?;
        Ok(graph)
    }

    // Kahn's algorithm; anything left unvisited sits on a cycle.
    fn check_acyclic(&self) -> Result<(), CweError> {
        let mut indegree: BTreeMap<CweId, usize> = self
            .nodes
            .values()
            .map(|n| (n.id, n.parents.len()))
            .collect();
        let mut queue: VecDeque<CweId> = indegree
            .iter()
            .filter(|(_, &d)| d == 0)
            .map(|(&id, _)| id)
            .collect();
        let mut visited = 0usize;
        while let Some(id) = queue.pop_front() {
            visited += 1;
            for child in &self.nodes[&id].children {
                let d = indegree.get_mut(child).expect("child resolved");
                *d -= 1;
                if *d == 0 {
                    queue.push_back(*child);
                }
            }
        }
        if visited == self.nodes.len() {
            return Ok(());
        }
        let stuck = indegree
            .iter()
            .find(|(_, &d)| d > 0)
            .map(|(&id, _)| id)
            .expect("unvisited node exists");
        Err(CweError::Cycle(stuck))
    }

    /// Reads either the repo-native snapshot (`id,name,abstraction,parent_ids`)
    /// or a MITRE CSV export; the header decides which.
    pub fn import_research_view<R: Read>(mut source: R) -> Result<CweGraph, CweError> {
        let mut text = String::new();
        source
            .read_to_string(&mut text)
            .map_err(|e| CweError::Parse {
                row: 0,
                message: e.to_string(),
            })?;
        let header = text.lines().next().unwrap_or_default();
        if header.contains("CWE-ID") {
            CweGraph::from_mitre_csv(text.as_bytes())
        } else {
            CweGraph::from_snapshot_csv(text.as_bytes())
        }
    }

    /// Snapshot format. `parent_ids` is semicolon separated; an empty
    /// source yields an empty graph.
    pub fn from_snapshot_csv<R: Read>(source: R) -> Result<CweGraph, CweError> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_reader(source);
        let mut rows = Vec::new();
        for (index, record) in reader.records().enumerate() {
            let row_no = index + 1;
            let record = record.map_err(|e| CweError::Parse {
                row: row_no,
                message: e.to_string(),
            })?;
            if record.len() != 4 {
                return Err(CweError::Parse {
                    row: row_no,
                    message: format!("expected 4 columns, found {}", record.len()),
                });
            }
            let bad = |message: String| CweError::Parse {
                row: row_no,
                message,
            };
            let id: CweId = record[0].parse().map_err(|e: CweError| bad(e.to_string()))?;
            let abstraction: Abstraction = record[2].parse().map_err(bad)?;
            let mut parents = BTreeSet::new();
            for part in record[3].split(';').map(str::trim).filter(|p| !p.is_empty()) {
                parents.insert(part.parse().map_err(|e: CweError| bad(e.to_string()))?);
            }
            rows.push(CweRow {
                id,
                name: record[1].to_string(),
                abstraction,
                parents,
            });
        }
        CweGraph::from_rows(rows)
    }

    /// MITRE's CSV export of view 1000. Only `ChildOf` relations scoped to
    /// view 1000 become parent edges.
    pub fn from_mitre_csv<R: Read>(source: R) -> Result<CweGraph, CweError> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .flexible(true)
            .from_reader(source);
        let headers = reader
            .headers()
            .map_err(|e| CweError::Parse {
                row: 0,
                message: e.to_string(),
            })?
            .clone();
        let column = |name: &str| {
            headers
                .iter()
                .position(|h| h.trim() == name)
                .ok_or_else(|| CweError::Parse {
                    row: 0,
                    message: format!("missing column {name:?}"),
                })
        };
        let id_col = column("CWE-ID")?;
        let name_col = column("Name")?;
        let abstraction_col = column("Weakness Abstraction")?;
        let related_col = column("Related Weaknesses")?;

        let mut rows = Vec::new();
        for (index, record) in reader.records().enumerate() {
            let row_no = index + 1;
            let bad = |message: String| CweError::Parse {
                row: row_no,
                message,
            };
            let record = record.map_err(|e| bad(e.to_string()))?;
            let field = |col: usize| record.get(col).ok_or_else(|| bad(format!("missing column {col}")));
            let id: CweId = field(id_col)?
                .parse()
                .map_err(|e: CweError| bad(e.to_string()))?;
            let abstraction: Abstraction = field(abstraction_col)?.parse().map_err(bad)?;
            let parents = parse_mitre_related(field(related_col)?).map_err(bad)?;
            rows.push(CweRow {
                id,
                name: field(name_col)?.to_string(),
                abstraction,
                parents,
            });
        }
        CweGraph::from_rows(rows)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn contains(&self, id: CweId) -> bool {
        self.nodes.contains_key(&id)
    }

    pub fn node(&self, id: CweId) -> Option<&CweNode> {
        self.nodes.get(&id)
    }

    pub fn nodes(&self) -> impl Iterator<Item = &CweNode> {
        self.nodes.values()
    }

    fn lookup(&self, id: CweId) -> Result<&CweNode, CweError> {
        self.nodes.get(&id).ok_or(CweError::Unknown(id))
    }

    /// Every identifier that counts as a correct report when `expected` is
    /// the targeted weakness.
    pub fn acceptable_set(
        &self,
        expected: CweId,
        policy: &MatchPolicy,
    ) -> Result<BTreeSet<CweId>, CweError> {
        let node = self.lookup(expected)?;
        let mut accepted = BTreeSet::from([expected]);

        if policy.accept_parent {
            let ancestors = if policy.transitive_parents {
                self.walk(expected, |n| &n.parents)
            } else {
                node.parents.clone()
            };
            accepted.extend(ancestors.into_iter().filter(|p| {
                !(policy.exclude_pillar_parent
                    && self.nodes[p].abstraction == Abstraction::Pillar)
            }));
        }
        if policy.accept_children {
            if policy.transitive_children {
                accepted.extend(self.walk(expected, |n| &n.children));
            } else {
                accepted.extend(node.children.iter().copied());
            }
        }
        Ok(accepted)
    }

    fn walk<F>(&self, start: CweId, next: F) -> BTreeSet<CweId>
    where
        F: Fn(&CweNode) -> &BTreeSet<CweId>,
    {
        let mut seen = BTreeSet::new();
        let mut stack = vec![start];
        while let Some(id) = stack.pop() {
            for &n in next(&self.nodes[&id]) {
                if seen.insert(n) {
                    stack.push(n);
                }
            }
        }
        seen
    }

    /// Total over `reported`: an identifier outside the graph never matches.
    /// An `expected` outside the graph matches nothing either.
    pub fn matches(&self, expected: CweId, reported: CweId, policy: &MatchPolicy) -> bool {
        if expected == reported {
            return self.contains(expected);
        }
        self.acceptable_set(expected, policy)
            .map(|set| set.contains(&reported))
            .unwrap_or(false)
    }
}

// "::NATURE:ChildOf:CWE ID:707:VIEW ID:1000:ORDINAL:Primary::..."
fn parse_mitre_related(field: &str) -> Result<BTreeSet<CweId>, String> {
    let mut parents = BTreeSet::new();
    for entry in field.split("::").filter(|e| !e.trim().is_empty()) {
        let parts: Vec<&str> = entry.split(':').collect();
        let mut nature = None;
        let mut cwe = None;
        let mut view = None;
        for pair in parts.chunks(2) {
            if let [key, value] = pair {
                match key.trim() {
                    "NATURE" => nature = Some(value.trim()),
                    "CWE ID" => cwe = Some(value.trim()),
                    "VIEW ID" => view = Some(value.trim()),
                    _ => {}
                }
            }
        }
        if nature == Some("ChildOf") && view == Some("1000") {
            let raw = cwe.ok_or_else(|| format!("relation without CWE ID: {entry:?}"))?;
            parents.insert(raw.parse::<CweId>().map_err(|e| e.to_string())?);
        }
    }
    Ok(parents)
}
