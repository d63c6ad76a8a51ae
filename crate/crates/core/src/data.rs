//! Survival records, outcome declaration and the cluster hierarchy.
//!
//! Parsing from raw text cells happens in [`declare_survival`]; the `mesurv`
//! crate only splits CSV into a [`Frame`] and hands it over, so every
//! validation rule lives here.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::cmp::Ordering;
use core::ops::Range;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DataError {
    #[error("no records")]
    NoRecords,
    #[error("missing column '{0}'")]
    MissingColumn(String),
    #[error("row {row}: column '{column}' has {found} cells, header has {expected}")]
    Ragged { row: usize, column: String, found: usize, expected: usize },
    #[error("row {row}: missing value in column '{column}'")]
    MissingValue { row: usize, column: String },
    #[error("row {row}: cannot parse '{value}' in column '{column}' as a number")]
    Parse { row: usize, column: String, value: String },
    #[error("row {row}: {message}")]
    Invalid { row: usize, message: String },
    #[error("cluster '{id}' at level '{level}' appears under both '{first}' and '{second}'")]
    Nesting { level: String, id: String, first: String, second: String },
    #[error("unknown level variable '{0}'")]
    UnknownLevel(String),
    #[error("unknown covariate '{0}'")]
    UnknownCovariate(String),
    #[error("expected rates must be given for all records or none")]
    PartialRates,
}

/// Raw tabular data: a header and rows of text cells.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Frame {
    pub fn new(header: Vec<String>, rows: Vec<Vec<String>>) -> Result<Self, DataError> {
        for (i, r) in rows.iter().enumerate() {
            if r.len() != header.len() {
                return Err(DataError::Ragged {
                    row: i + 1,
                    column: header.last().cloned().unwrap_or_default(),
                    found: r.len(),
                    expected: header.len(),
                });
            }
        }
        let header = header.into_iter().map(|h| h.trim().to_string()).collect();
        Ok(Self { header, rows })
    }

    pub fn header(&self) -> &[String] {
        &self.header
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn column_index(&self, name: &str) -> Result<usize, DataError> {
        self.header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| DataError::MissingColumn(name.to_string()))
    }

    /// Trimmed text of a cell; empty cells and `.` are missing values.
    pub fn cell(&self, row: usize, col: usize) -> Result<&str, DataError> {
        let v = self.rows[row][col].trim();
        if v.is_empty() || v == "." {
            return Err(DataError::MissingValue { row: row + 1, column: self.header[col].clone() });
        }
        Ok(v)
    }

    /// Cell parsed as a finite number.
    pub fn number(&self, row: usize, col: usize) -> Result<f64, DataError> {
        let v = self.cell(row, col)?;
        v.parse::<f64>().ok().filter(|x| x.is_finite()).ok_or_else(|| DataError::Parse {
            row: row + 1,
            column: self.header[col].clone(),
            value: v.to_string(),
        })
    }
}

/// Which columns carry which survival role.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct OutcomeRoles {
    pub time: String,
    pub event: String,
    pub entry: Option<String>,
    pub expected_rate: Option<String>,
    pub covariates: Vec<String>,
    /// Cluster identifier columns, highest level first.
    pub levels: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SurvivalRecord {
    pub entry: f64,
    pub exit: f64,
    pub event: bool,
    /// Values aligned with [`Dataset::covariate_names`].
    pub covariates: Vec<f64>,
    pub expected_rate: Option<f64>,
    /// Cluster identifiers, highest level first.
    pub cluster_path: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DataSummary {
    pub records: usize,
    pub events: usize,
    pub time_at_risk: f64,
    pub min_entry: f64,
    pub max_exit: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    records: Vec<SurvivalRecord>,
    covariate_names: Vec<String>,
    level_names: Vec<String>,
    summary: DataSummary,
}

impl Dataset {
    /// Assemble a dataset from already-typed records, checking the record
    /// invariants.
    pub fn new(
        records: Vec<SurvivalRecord>,
        covariate_names: Vec<String>,
        level_names: Vec<String>,
    ) -> Result<Self, DataError> {
        if records.is_empty() {
            return Err(DataError::NoRecords);
        }
        let with_rate = records.iter().filter(|r| r.expected_rate.is_some()).count();
        if with_rate != 0 && with_rate != records.len() {
            return Err(DataError::PartialRates);
        }
        for (i, r) in records.iter().enumerate() {
            validate_record(r, i + 1, covariate_names.len(), level_names.len())?;
        }
        let summary = summarize(&records);
        Ok(Self { records, covariate_names, level_names, summary })
    }

    pub fn records(&self) -> &[SurvivalRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn level_names(&self) -> &[String] {
        &self.level_names
    }

    pub fn summary(&self) -> DataSummary {
        self.summary
    }

    pub fn has_expected_rates(&self) -> bool {
        self.records[0].expected_rate.is_some()
    }

    pub fn has_delayed_entry(&self) -> bool {
        self.records.iter().any(|r| r.entry > 0.0)
    }

    pub fn covariate_index(&self, name: &str) -> Result<usize, DataError> {
        self.covariate_names
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| DataError::UnknownCovariate(name.to_string()))
    }

    /// Log exit times of the uncensored records (knot placement input).
    pub fn event_log_times(&self) -> Vec<f64> {
        self.records.iter().filter(|r| r.event).map(|r| libm::log(r.exit)).collect()
    }

    /// Group records into nested clusters over `level_vars` (highest first).
    pub fn build_hierarchy(&self, level_vars: &[&str]) -> Result<ClusterTree, DataError> {
        let idx: Vec<usize> = level_vars
            .iter()
            .map(|l| {
                self.level_names
                    .iter()
                    .position(|n| n == l)
                    .ok_or_else(|| DataError::UnknownLevel(l.to_string()))
            })
            .collect::<Result<_, _>>()?;
        let path = |r: usize| -> Vec<&str> {
            idx.iter().map(|&i| self.records[r].cluster_path[i].as_str()).collect()
        };
        for lvl in 1..idx.len() {
            let mut parent: BTreeMap<&str, &str> = BTreeMap::new();
            for r in 0..self.records.len() {
                let p = path(r);
                let (id, par) = (p[lvl], p[lvl - 1]);
                match parent.get(id) {
                    Some(&prev) if prev != par => {
                        return Err(DataError::Nesting {
                            level: level_vars[lvl].to_string(),
                            id: id.to_string(),
                            first: prev.to_string(),
                            second: par.to_string(),
                        });
                    }
                    Some(_) => {}
                    None => {
                        parent.insert(id, par);
                    }
                }
            }
        }
        let mut order: Vec<usize> = (0..self.records.len()).collect();
        order.sort_by(|&a, &b| {
            let (pa, pb) = (path(a), path(b));
            pa.iter()
                .zip(&pb)
                .map(|(x, y)| natural_cmp(x, y))
                .find(|o| *o != Ordering::Equal)
                .unwrap_or(Ordering::Equal)
        });
        let paths: Vec<Vec<&str>> = order.iter().map(|&r| path(r)).collect();
        let top = if idx.is_empty() { Vec::new() } else { group(&paths, 0, 0..order.len()) };
        Ok(ClusterTree {
            level_names: level_vars.iter().map(|s| s.to_string()).collect(),
            order,
            top,
        })
    }
}

fn validate_record(r: &SurvivalRecord, row: usize, n_cov: usize, n_levels: usize) -> Result<(), DataError> {
    let bad = |message: String| Err(DataError::Invalid { row, message });
    if !(r.entry >= 0.0) || !r.entry.is_finite() {
        return bad(format!("entry time {} must be nonnegative", r.entry));
    }
    if !(r.exit > r.entry) || !r.exit.is_finite() {
        return bad(format!("exit time {} must exceed entry time {}", r.exit, r.entry));
    }
    if let Some(rate) = r.expected_rate {
        if !(rate >= 0.0) || !rate.is_finite() {
            return bad(format!("expected rate {rate} must be nonnegative"));
        }
    }
    if r.covariates.len() != n_cov {
        return bad(format!("{} covariate values, expected {n_cov}", r.covariates.len()));
    }
    if r.cluster_path.len() != n_levels {
        return bad(format!("cluster path of length {}, expected {n_levels}", r.cluster_path.len()));
    }
    Ok(())
}

fn summarize(records: &[SurvivalRecord]) -> DataSummary {
    DataSummary {
        records: records.len(),
        events: records.iter().filter(|r| r.event).count(),
        time_at_risk: records.iter().map(|r| r.exit - r.entry).sum(),
        min_entry: records.iter().map(|r| r.entry).fold(f64::INFINITY, f64::min),
        max_exit: records.iter().map(|r| r.exit).fold(f64::NEG_INFINITY, f64::max),
    }
}

/// Parse and validate the declared outcome columns of `frame`.
pub fn declare_survival(frame: &Frame, roles: &OutcomeRoles) -> Result<Dataset, DataError> {
    if frame.n_rows() == 0 {
        return Err(DataError::NoRecords);
    }
    let time = frame.column_index(&roles.time)?;
    let event = frame.column_index(&roles.event)?;
    let entry = roles.entry.as_deref().map(|c| frame.column_index(c)).transpose()?;
    let rate = roles.expected_rate.as_deref().map(|c| frame.column_index(c)).transpose()?;
    let covs: Vec<usize> =
        roles.covariates.iter().map(|c| frame.column_index(c)).collect::<Result<_, _>>()?;
    let levels: Vec<usize> =
        roles.levels.iter().map(|c| frame.column_index(c)).collect::<Result<_, _>>()?;

    let mut records = Vec::with_capacity(frame.n_rows());
    for row in 0..frame.n_rows() {
        let exit = frame.number(row, time)?;
        let d = frame.number(row, event)?;
        if d != 0.0 && d != 1.0 {
            return Err(DataError::Invalid {
                row: row + 1,
                message: format!("event indicator must be 0 or 1, found {d}"),
            });
        }
        let entry = match entry {
            Some(c) => frame.number(row, c)?,
            None => 0.0,
        };
        let expected_rate = rate.map(|c| frame.number(row, c)).transpose()?;
        let covariates = covs.iter().map(|&c| frame.number(row, c)).collect::<Result<_, _>>()?;
        let cluster_path = levels
            .iter()
            .map(|&c| frame.cell(row, c).map(|s| s.to_string()))
            .collect::<Result<_, _>>()?;
        let rec = SurvivalRecord { entry, exit, event: d == 1.0, covariates, expected_rate, cluster_path };
        validate_record(&rec, row + 1, covs.len(), levels.len())?;
        records.push(rec);
    }
    Dataset::new(records, roles.covariates.clone(), roles.levels.clone())
}

/// Orders identifiers numerically when both parse as numbers, otherwise
/// lexicographically (numbers first).
pub fn natural_cmp(a: &str, b: &str) -> Ordering {
    match (a.parse::<f64>(), b.parse::<f64>()) {
        (Ok(x), Ok(y)) => x.partial_cmp(&y).unwrap_or(Ordering::Equal).then_with(|| a.cmp(b)),
        (Ok(_), Err(_)) => Ordering::Less,
        (Err(_), Ok(_)) => Ordering::Greater,
        (Err(_), Err(_)) => a.cmp(b),
    }
}

fn group(paths: &[Vec<&str>], level: usize, range: Range<usize>) -> Vec<ClusterNode> {
    let depth = paths.first().map_or(0, |p| p.len());
    let mut out = Vec::new();
    let mut start = range.start;
    while start < range.end {
        let id = paths[start][level];
        let mut end = start + 1;
        while end < range.end && paths[end][level] == id {
            end += 1;
        }
        let children = if level + 1 < depth { group(paths, level + 1, start..end) } else { Vec::new() };
        out.push(ClusterNode { id: id.to_string(), range: start..end, children });
        start = end;
    }
    out
}

/// Nested grouping of records. Node ranges index into [`ClusterTree::order`].
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterTree {
    level_names: Vec<String>,
    order: Vec<usize>,
    top: Vec<ClusterNode>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterNode {
    pub id: String,
    pub range: Range<usize>,
    /// Empty at the deepest level.
    pub children: Vec<ClusterNode>,
}

impl ClusterTree {
    pub fn levels(&self) -> usize {
        self.level_names.len()
    }

    pub fn level_names(&self) -> &[String] {
        &self.level_names
    }

    /// Record indices in cluster order.
    pub fn order(&self) -> &[usize] {
        &self.order
    }

    /// Top-level clusters in ascending identifier order.
    pub fn clusters(&self) -> &[ClusterNode] {
        &self.top
    }

    pub fn records_of(&self, node: &ClusterNode) -> &[usize] {
        &self.order[node.range.clone()]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn s(v: &str) -> String {
        v.to_string()
    }

    fn frame(rows: &[[&str; 4]]) -> Frame {
        Frame::new(
            vec![s("id"), s("time"), s("d"), s("x")],
            rows.iter().map(|r| r.iter().map(|c| s(c)).collect()).collect(),
        )
        .unwrap()
    }

    fn roles() -> OutcomeRoles {
        OutcomeRoles {
            time: s("time"),
            event: s("d"),
            covariates: vec![s("x")],
            levels: vec![s("id")],
            ..Default::default()
        }
    }

    #[test]
    fn declares_and_summarizes() {
        let f = frame(&[["1", "2", "1", "0.5"], ["1", "3", "0", "1"], ["2", "1.5", "1", "0"]]);
        let d = declare_survival(&f, &roles()).unwrap();
        let sm = d.summary();
        assert_eq!(sm.records, 3);
        assert_eq!(sm.events, 2);
        assert_eq!(sm.time_at_risk, 6.5);
        assert!(!d.has_delayed_entry());
    }

    #[test]
    fn header_only_is_no_records() {
        let f = frame(&[]);
        assert_eq!(declare_survival(&f, &roles()), Err(DataError::NoRecords));
    }

    #[test]
    fn parse_error_names_row() {
        let f = frame(&[["1", "2", "1", "0"], ["1", "3", "0", "1"], ["2", "abc", "1", "0"]]);
        match declare_survival(&f, &roles()) {
            Err(DataError::Parse { row, column, .. }) => {
                assert_eq!(row, 3);
                assert_eq!(column, "time");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn missing_cells_rejected() {
        let f = frame(&[["1", "2", "1", "."]]);
        assert!(matches!(declare_survival(&f, &roles()), Err(DataError::MissingValue { row: 1, .. })));
        let f = frame(&[["1", "2", "", "0"]]);
        assert!(matches!(declare_survival(&f, &roles()), Err(DataError::MissingValue { .. })));
    }

    #[test]
    fn missing_column_named() {
        let f = frame(&[["1", "2", "1", "0"]]);
        let mut r = roles();
        r.covariates.push(s("age"));
        assert_eq!(declare_survival(&f, &r), Err(DataError::MissingColumn(s("age"))));
    }

    #[test]
    fn exit_before_entry_rejected() {
        let f = Frame::new(
            vec![s("t0"), s("t"), s("d")],
            vec![vec![s("0"), s("1"), s("1")], vec![s("2"), s("2"), s("0")]],
        )
        .unwrap();
        let r = OutcomeRoles { time: s("t"), event: s("d"), entry: Some(s("t0")), ..Default::default() };
        assert!(matches!(declare_survival(&f, &r), Err(DataError::Invalid { row: 2, .. })));
    }

    #[test]
    fn negative_rate_rejected() {
        let f = Frame::new(vec![s("t"), s("d"), s("h")], vec![vec![s("1"), s("1"), s("-0.1")]]).unwrap();
        let r = OutcomeRoles { time: s("t"), event: s("d"), expected_rate: Some(s("h")), ..Default::default() };
        assert!(matches!(declare_survival(&f, &r), Err(DataError::Invalid { row: 1, .. })));
    }

    #[test]
    fn nesting_conflict_names_parents() {
        let f = Frame::new(
            vec![s("hosp"), s("ward"), s("t"), s("d")],
            vec![
                vec![s("A"), s("w1"), s("1"), s("1")],
                vec![s("B"), s("w1"), s("2"), s("0")],
            ],
        )
        .unwrap();
        let r = OutcomeRoles {
            time: s("t"),
            event: s("d"),
            levels: vec![s("hosp"), s("ward")],
            ..Default::default()
        };
        let d = declare_survival(&f, &r).unwrap();
        match d.build_hierarchy(&["hosp", "ward"]) {
            Err(DataError::Nesting { first, second, .. }) => {
                assert_eq!((first.as_str(), second.as_str()), ("A", "B"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn hierarchy_partitions_records() {
        let f = frame(&[
            ["10", "1", "1", "0"],
            ["2", "1", "1", "0"],
            ["10", "2", "0", "0"],
            [" 2 ", "3", "1", "0"],
            ["1", "4", "1", "0"],
        ]);
        let d = declare_survival(&f, &roles()).unwrap();
        let t = d.build_hierarchy(&["id"]).unwrap();
        let ids: Vec<&str> = t.clusters().iter().map(|c| c.id.as_str()).collect();
        assert_eq!(ids, ["1", "2", "10"]);
        assert_eq!(t.records_of(&t.clusters()[1]), &[1, 3]);
        let mut all: Vec<usize> = t.order().to_vec();
        all.sort();
        assert_eq!(all, [0, 1, 2, 3, 4]);
    }

    #[test]
    fn two_level_grouping() {
        let f = Frame::new(
            vec![s("h"), s("p"), s("t"), s("d")],
            vec![
                vec![s("b"), s("3"), s("1"), s("1")],
                vec![s("a"), s("1"), s("1"), s("1")],
                vec![s("b"), s("2"), s("1"), s("1")],
                vec![s("a"), s("1"), s("2"), s("1")],
            ],
        )
        .unwrap();
        let r = OutcomeRoles { time: s("t"), event: s("d"), levels: vec![s("h"), s("p")], ..Default::default() };
        let t = declare_survival(&f, &r).unwrap().build_hierarchy(&["h", "p"]).unwrap();
        assert_eq!(t.clusters().len(), 2);
        assert_eq!(t.clusters()[0].children.len(), 1);
        assert_eq!(t.clusters()[0].children[0].range, 0..2);
        assert_eq!(t.clusters()[1].children.len(), 2);
        assert_eq!(t.clusters()[1].children[0].id, "2");
    }
}
