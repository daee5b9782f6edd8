//! In-memory entity store and the natural-text rendering of query results.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dialogue::{normalize_value, BeliefState};
use crate::error::{AcnError, Result};

/// Number of records spliced into the context per query.
pub const MAX_RESULTS: usize = 3;

/// Belief value that leaves a slot unconstrained.
pub const DONTCARE: &str = "dontcare";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityRecord {
    pub domain: String,
    pub name: String,
    /// Includes `"name"`.
    pub attributes: BTreeMap<String, String>,
}

impl EntityRecord {
    pub fn new(domain: &str, name: &str, attrs: &[(&str, &str)]) -> Self {
        let mut attributes: BTreeMap<String, String> = attrs
            .iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect();
        attributes.insert("name".into(), name.into());
        Self {
            domain: domain.into(),
            name: name.into(),
            attributes,
        }
    }

    pub fn get(&self, slot: &str) -> Option<&str> {
        self.attributes.get(slot).map(String::as_str)
    }

    fn validate(&self) -> Result<()> {
        if self.domain.is_empty() || self.name.is_empty() {
            return Err(AcnError::Database("record with empty domain or name".into()));
        }
        if self.get("name") != Some(self.name.as_str()) {
            return Err(AcnError::Database(format!(
                "record {:?} lacks a matching \"name\" attribute",
                self.name
            )));
        }
        Ok(())
    }

    /// True when every informable constraint holds, ignoring `dontcare`.
    pub fn satisfies(&self, constraints: &BTreeMap<String, String>) -> bool {
        constraints.iter().all(|(slot, want)| {
            let want = normalize_value(want);
            want == DONTCARE
                || self
                    .get(slot)
                    .is_some_and(|have| normalize_value(have) == want)
        })
    }
}

/// Up to [`MAX_RESULTS`] matching records plus the total match count.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct QueryResult {
    pub total: usize,
    pub records: Vec<EntityRecord>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Database {
    domains: BTreeMap<String, Vec<EntityRecord>>,
}

impl Database {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_records(records: impl IntoIterator<Item = EntityRecord>) -> Result<Self> {
        let mut db = Self::new();
        for r in records {
            db.insert(r)?;
        }
        Ok(db)
    }

    pub fn insert(&mut self, record: EntityRecord) -> Result<()> {
        record.validate()?;
        let list = self.domains.entry(record.domain.clone()).or_default();
        if list.iter().any(|r| r.name == record.name) {
            return Err(AcnError::Database(format!(
                "duplicate record ({}, {})",
                record.domain, record.name
            )));
        }
        list.push(record);
        Ok(())
    }

    pub fn domains(&self) -> impl Iterator<Item = &str> {
        self.domains.keys().map(String::as_str)
    }

    pub fn has_domain(&self, domain: &str) -> bool {
        self.domains.contains_key(domain)
    }

    /// Records of `domain` in insertion order.
    pub fn records(&self, domain: &str) -> &[EntityRecord] {
        self.domains.get(domain).map_or(&[], Vec::as_slice)
    }

    pub fn all_records(&self) -> impl Iterator<Item = &EntityRecord> {
        self.domains.values().flatten()
    }

    pub fn entity_names(&self) -> BTreeSet<String> {
        self.all_records().map(|r| r.name.clone()).collect()
    }

    pub fn find(&self, domain: &str, name: &str) -> Option<&EntityRecord> {
        let name = normalize_value(name);
        self.records(domain)
            .iter()
            .find(|r| normalize_value(&r.name) == name)
    }

    pub fn len(&self) -> usize {
        self.domains.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records of `domain` matching `belief[domain]`, truncated to three in
    /// insertion order, with the full match count.
    pub fn query(&self, domain: &str, belief: &BeliefState) -> Result<QueryResult> {
        let records = self
            .domains
            .get(domain)
            .ok_or_else(|| AcnError::UnknownDomain(domain.into()))?;
        let empty = BTreeMap::new();
        let constraints = belief.domain(domain).unwrap_or(&empty);
        let mut out = QueryResult::default();
        for r in records.iter().filter(|r| r.satisfies(constraints)) {
            out.total += 1;
            if out.records.len() < MAX_RESULTS {
                out.records.push(r.clone());
            }
        }
        Ok(out)
    }

    /// The domain a belief state is about: its only domain, or the last one in
    /// canonical order among those this database knows. `None` when the belief
    /// names no known domain.
    pub fn active_domain<'b>(&self, belief: &'b BeliefState) -> Option<&'b str> {
        belief.domains().filter(|d| self.has_domain(d)).last()
    }

    /// Queries the active domain of `belief`; an empty result when there is
    /// none.
    pub fn lookup(&self, belief: &BeliefState) -> QueryResult {
        match self.active_domain(belief) {
            Some(d) => self.query(d, belief).expect("active domain is known"),
            None => QueryResult::default(),
        }
    }

    /// One JSON record per line.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut s = String::new();
        for r in self.all_records() {
            s.push_str(&serde_json::to_string(r)?);
            s.push('\n');
        }
        Ok(s)
    }

    pub fn from_jsonl(text: &str, origin: &str) -> Result<Self> {
        let mut db = Self::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let schema = |message: String| AcnError::Schema {
                path: origin.into(),
                line: n + 1,
                message,
            };
            let r: EntityRecord =
                serde_json::from_str(line).map_err(|e| schema(e.to_string()))?;
            db.insert(r).map_err(|e| schema(e.to_string()))?;
        }
        Ok(db)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_jsonl()?).map_err(|e| AcnError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| AcnError::io(path, e))?;
        Self::from_jsonl(&text, &path.display().to_string())
    }
}

/// `"{total} matches. name = a, area = north; name = b, ..."`, or
/// `"0 matches."` when nothing matched.
pub fn format_results(result: &QueryResult) -> String {
    let mut s = format!("{} matches.", result.total);
    let clauses: Vec<String> = result
        .records
        .iter()
        .map(|r| {
            let mut parts = vec![format!("name = {}", r.name)];
            parts.extend(
                r.attributes
                    .iter()
                    .filter(|(k, _)| k.as_str() != "name")
                    .map(|(k, v)| format!("{k} = {v}")),
            );
            parts.join(", ")
        })
        .collect();
    if !clauses.is_empty() {
        s.push(' ');
        s.push_str(&clauses.join("; "));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn db() -> Database {
        Database::from_records([
            EntityRecord::new("restaurant", "alpha", &[("food", "italian"), ("area", "north")]),
            EntityRecord::new("restaurant", "bravo", &[("food", "thai"), ("area", "north")]),
            EntityRecord::new("restaurant", "charlie", &[("food", "italian"), ("area", "south")]),
            EntityRecord::new("restaurant", "delta", &[("food", "Italian"), ("area", "east")]),
            EntityRecord::new("hotel", "echo", &[("area", "north")]),
        ])
        .unwrap()
    }

    fn belief(pairs: &[(&str, &str, &str)]) -> BeliefState {
        let mut b = BeliefState::new();
        for (d, s, v) in pairs {
            b.insert(d, s, v);
        }
        b
    }

    #[test]
    fn empty_constraints_return_first_three() {
        let r = db().query("restaurant", &BeliefState::new()).unwrap();
        assert_eq!(r.total, 4);
        let names: Vec<_> = r.records.iter().map(|r| r.name.as_str()).collect();
        assert_eq!(names, ["alpha", "bravo", "charlie"]);
    }

    #[test]
    fn unsatisfiable_is_empty() {
        let r = db()
            .query("restaurant", &belief(&[("restaurant", "food", "korean")]))
            .unwrap();
        assert_eq!(r, QueryResult::default());
    }

    #[test]
    fn single_match() {
        let b = belief(&[("restaurant", "food", "italian"), ("restaurant", "area", "south")]);
        let r = db().query("restaurant", &b).unwrap();
        assert_eq!(r.total, 1);
        assert_eq!(r.records[0].name, "charlie");
    }

    #[test]
    fn matching_is_case_insensitive_and_dontcare_is_ignored() {
        let b = belief(&[("restaurant", "food", "ITALIAN"), ("restaurant", "area", "dontcare")]);
        let r = db().query("restaurant", &b).unwrap();
        assert_eq!(r.total, 3);
    }

    #[test]
    fn unknown_domain_is_an_error() {
        assert!(matches!(
            db().query("taxi", &BeliefState::new()),
            Err(AcnError::UnknownDomain(_))
        ));
    }

    #[test]
    fn duplicate_and_nameless_records_are_rejected() {
        let mut d = db();
        assert!(d.insert(EntityRecord::new("restaurant", "alpha", &[])).is_err());
        let mut bad = EntityRecord::new("hotel", "x", &[]);
        bad.attributes.remove("name");
        assert!(d.insert(bad).is_err());
    }

    #[test]
    fn formats_empty_and_single() {
        assert_eq!(format_results(&QueryResult::default()), "0 matches.");
        let r = QueryResult {
            total: 1,
            records: vec![EntityRecord::new(
                "restaurant",
                "alpha",
                &[("food", "italian"), ("area", "north")],
            )],
        };
        assert_eq!(
            format_results(&r),
            "1 matches. name = alpha, area = north, food = italian"
        );
    }

    #[test]
    fn formats_several_records() {
        let r = db().query("restaurant", &BeliefState::new()).unwrap();
        let text = format_results(&r);
        assert_eq!(
            text,
            "4 matches. name = alpha, area = north, food = italian; \
             name = bravo, area = north, food = thai; \
             name = charlie, area = south, food = italian"
        );
        assert!(!text.contains('[') && !text.contains('<'));
    }

    #[test]
    fn active_domain_and_lookup() {
        let d = db();
        let b = belief(&[("hotel", "area", "north")]);
        assert_eq!(d.active_domain(&b), Some("hotel"));
        assert_eq!(d.lookup(&b).total, 1);
        assert_eq!(d.lookup(&BeliefState::new()), QueryResult::default());
        let unknown = belief(&[("taxi", "leave", "5")]);
        assert_eq!(d.lookup(&unknown), QueryResult::default());
    }

    #[test]
    fn jsonl_round_trip_and_errors() {
        let d = db();
        let text = d.to_jsonl().unwrap();
        assert_eq!(Database::from_jsonl(&text, "mem").unwrap(), d);
        let dup = format!("{text}{}", text.lines().next().unwrap());
        let err = Database::from_jsonl(&dup, "mem").unwrap_err();
        assert!(matches!(err, AcnError::Schema { line: 6, .. }), "{err}");
        assert!(Database::from_jsonl("{not json", "mem").is_err());
    }
}
