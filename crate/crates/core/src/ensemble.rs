//! Per-sample trimmed-mean aggregation of member predictions, with
//! small molecules routed to a fallback predictor.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph2d::MolGraph;

/// Sorts ascending, drops `floor((m-k)/2)` values from the bottom and
/// `ceil((m-k)/2)` from the top, and averages the rest.
pub fn trimmed_middle_mean(values: &[f64], k: usize) -> Result<f64> {
    let m = values.len();
    if k == 0 || k > m {
        return Err(Error::contract(format!("trim keeps {k} of {m} values; need 1 <= k <= m")));
    }
    if let Some(index) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { index });
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let lower = (m - k) / 2;
    Ok(sorted[lower..lower + k].iter().sum::<f64>() / k as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredictionSet {
    sample_id: String,
    member_ids: Vec<String>,
    values: Vec<f64>,
}

impl PredictionSet {
    pub fn new(sample_id: impl Into<String>, member_ids: Vec<String>, values: Vec<f64>) -> Result<Self> {
        let sample_id = sample_id.into();
        if values.is_empty() {
            return Err(Error::contract(format!("`{sample_id}` has no member predictions")));
        }
        if member_ids.len() != values.len() {
            return Err(Error::contract(format!(
                "`{sample_id}`: {} member ids for {} values",
                member_ids.len(),
                values.len()
            )));
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = member_ids.iter().find(|id| !seen.insert(id.as_str())) {
            return Err(Error::schema("member_id", format!("`{dup}` repeated for `{sample_id}`")));
        }
        Ok(Self {
            sample_id,
            member_ids,
            values,
        })
    }

    pub fn sample_id(&self) -> &str {
        &self.sample_id
    }

    pub fn member_ids(&self) -> &[String] {
        &self.member_ids
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Predictor consulted for molecules too small for the ensemble.
pub trait Fallback {
    fn predict(&self, graph: &MolGraph) -> Option<f64>;
}

/// Fallback backed by precomputed values keyed by sample id.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LookupFallback {
    table: HashMap<String, f64>,
}

impl LookupFallback {
    pub fn new(table: HashMap<String, f64>) -> Self {
        Self { table }
    }
}

impl Fallback for LookupFallback {
    fn predict(&self, graph: &MolGraph) -> Option<f64> {
        self.table.get(graph.id()).copied()
    }
}

pub struct RoutingRule<'a> {
    pub min_atoms_threshold: usize,
    pub fallback: &'a dyn Fallback,
}

impl<'a> RoutingRule<'a> {
    pub const DEFAULT_THRESHOLD: usize = 4;

    pub fn new(min_atoms_threshold: usize, fallback: &'a dyn Fallback) -> Result<Self> {
        if min_atoms_threshold == 0 {
            return Err(Error::contract("routing threshold must be at least 1"));
        }
        Ok(Self {
            min_atoms_threshold,
            fallback,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Ensemble,
    Fallback,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutedPrediction {
    pub sample_id: String,
    pub gap_ev: f64,
    pub source: Source,
}

/// Molecules with fewer atoms than the threshold go to the fallback;
/// everything else gets the trimmed mean of its member predictions.
pub fn route_and_predict(g: &MolGraph, preds: Option<&PredictionSet>, rule: &RoutingRule<'_>, k: usize) -> Result<RoutedPrediction> {
    let sample_id = g.id().to_string();
    if g.n_atoms() < rule.min_atoms_threshold {
        let gap_ev = rule.fallback.predict(g).ok_or_else(|| Error::Routing {
            sample_id: sample_id.clone(),
        })?;
        return Ok(RoutedPrediction {
            sample_id,
            gap_ev,
            source: Source::Fallback,
        });
    }
    let preds = preds.ok_or_else(|| Error::contract(format!("no member predictions for `{sample_id}`")))?;
    if preds.sample_id() != sample_id {
        return Err(Error::Pairing(format!("predictions for `{}` given for `{sample_id}`", preds.sample_id())));
    }
    Ok(RoutedPrediction {
        sample_id,
        gap_ev: trimmed_middle_mean(preds.values(), k)?,
        source: Source::Ensemble,
    })
}

#[derive(Deserialize)]
struct PredictionRow {
    sample_id: String,
    member_id: String,
    value_ev: f64,
}

#[derive(Deserialize)]
struct FallbackRow {
    sample_id: String,
    value_ev: f64,
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(source) => Error::io(path, source),
        other => Error::Parse(format!("{}: {other:?}", path.display())),
    }
}

/// Groups prediction rows by sample id.
pub fn parse_predictions_csv(text: &str, origin: &Path) -> Result<BTreeMap<String, PredictionSet>> {
    let mut grouped: BTreeMap<String, (Vec<String>, Vec<f64>)> = BTreeMap::new();
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    for row in reader.deserialize::<PredictionRow>() {
        let row = row.map_err(|e| csv_error(origin, e))?;
        let entry = grouped.entry(row.sample_id).or_default();
        entry.0.push(row.member_id);
        entry.1.push(row.value_ev);
    }
    grouped
        .into_iter()
        .map(|(id, (members, values))| Ok((id.clone(), PredictionSet::new(id, members, values)?)))
        .collect()
}

pub fn parse_fallback_csv(text: &str, origin: &Path) -> Result<LookupFallback> {
    let mut table = HashMap::new();
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    for row in reader.deserialize::<FallbackRow>() {
        let row = row.map_err(|e| csv_error(origin, e))?;
        if !row.value_ev.is_finite() {
            return Err(Error::schema("value_ev", format!("non-finite fallback for `{}`", row.sample_id)));
        }
        if table.insert(row.sample_id.clone(), row.value_ev).is_some() {
            return Err(Error::schema("sample_id", format!("`{}` repeated in fallback table", row.sample_id)));
        }
    }
    Ok(LookupFallback::new(table))
}

pub fn format_routed_csv(rows: &[RoutedPrediction]) -> String {
    let mut writer = csv::Writer::from_writer(Vec::new());
    for r in rows {
        writer.serialize(r).expect("in-memory csv write");
    }
    String::from_utf8(writer.into_inner().expect("in-memory csv flush")).expect("csv output is utf-8")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn middle_ten_of_twenty_two() {
        let v: Vec<f64> = (1..=22).map(f64::from).collect();
        assert_eq!(trimmed_middle_mean(&v, 10).unwrap(), 11.5);
        assert_eq!(trimmed_middle_mean(&v, 22).unwrap(), 11.5);
    }

    #[test]
    fn odd_trim_drops_more_from_the_top() {
        // m - k = 3: one from below, two from above
        assert_eq!(trimmed_middle_mean(&[1.0, 2.0, 3.0, 4.0, 100.0], 2).unwrap(), 2.5);
    }

    #[test]
    fn bad_k_is_rejected() {
        assert!(trimmed_middle_mean(&[1.0, 2.0], 3).is_err());
        assert!(trimmed_middle_mean(&[1.0, 2.0], 0).is_err());
        assert!(trimmed_middle_mean(&[], 1).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let text = "sample_id,member_id,value_ev\nb,m1,2.0\na,m1,1.0\na,m2,3.0\n";
        let sets = parse_predictions_csv(text, Path::new("p.csv")).unwrap();
        assert_eq!(sets.len(), 2);
        assert_eq!(sets["a"].values(), [1.0, 3.0]);
        let dup = "sample_id,member_id,value_ev\na,m1,1.0\na,m1,3.0\n";
        assert!(parse_predictions_csv(dup, Path::new("p.csv")).is_err());
        let rows = vec![RoutedPrediction {
            sample_id: "a".into(),
            gap_ev: 2.0,
            source: Source::Ensemble,
        }];
        assert_eq!(format_routed_csv(&rows), "sample_id,gap_ev,source\na,2.0,ensemble\n");
    }
}
