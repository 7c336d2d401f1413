//! Weighted survey samples with item nonresponse, and their fractionally
//! imputed augmentations.
//!
//! Missing values are `None`; there are no numeric sentinels. Categorical
//! items hold integer codes (stored as exact `f64` integers) indexing a label
//! table. Design weights are kept exactly as loaded.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{Read, Write};
use std::ops::Range;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_MISSING_TOKEN: &str = "NA";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ItemKind {
    Continuous,
    Categorical { labels: Vec<String> },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Item {
    pub name: String,
    pub kind: ItemKind,
}

impl Item {
    pub fn continuous(name: impl Into<String>) -> Self {
        Item {
            name: name.into(),
            kind: ItemKind::Continuous,
        }
    }

    pub fn categorical(name: impl Into<String>, labels: Vec<String>) -> Self {
        Item {
            name: name.into(),
            kind: ItemKind::Categorical { labels },
        }
    }

    pub fn is_categorical(&self) -> bool {
        matches!(self.kind, ItemKind::Categorical { .. })
    }

    pub fn labels(&self) -> Option<&[String]> {
        match &self.kind {
            ItemKind::Categorical { labels } => Some(labels),
            ItemKind::Continuous => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnitRecord {
    pub id: String,
    pub weight: f64,
    pub values: Vec<Option<f64>>,
}

impl UnitRecord {
    pub fn new(id: impl Into<String>, weight: f64, values: Vec<Option<f64>>) -> Self {
        UnitRecord {
            id: id.into(),
            weight,
            values,
        }
    }

    /// Response indicator for item `j`.
    pub fn responded(&self, j: usize) -> bool {
        self.values[j].is_some()
    }

    pub fn is_complete(&self) -> bool {
        self.values.iter().all(Option::is_some)
    }

    pub fn pattern(&self) -> MissingPattern {
        MissingPattern {
            mask: self.values.iter().map(Option::is_some).collect(),
        }
    }

    /// The observed vector with missing entries filled by `fill`; only for
    /// callers that overwrite the missing slots before use.
    pub(crate) fn filled(&self, fill: f64) -> Vec<f64> {
        self.values.iter().map(|v| v.unwrap_or(fill)).collect()
    }
}

/// Response mask over items; `true` means observed.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct MissingPattern {
    pub mask: Vec<bool>,
}

impl MissingPattern {
    pub fn complete(items: usize) -> Self {
        MissingPattern {
            mask: vec![true; items],
        }
    }

    pub fn is_complete(&self) -> bool {
        self.mask.iter().all(|&b| b)
    }
}

impl fmt::Display for MissingPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for &b in &self.mask {
            f.write_str(if b { "1" } else { "0" })?;
        }
        Ok(())
    }
}

#[derive(Debug, PartialEq)]
struct DatasetInner {
    items: Vec<Item>,
    units: Vec<UnitRecord>,
    strata: Option<Vec<usize>>,
    stratum_labels: Vec<String>,
}

/// Immutable survey sample. Cloning is cheap (shared storage).
#[derive(Debug, Clone, PartialEq)]
pub struct SurveyDataset {
    inner: Arc<DatasetInner>,
}

impl SurveyDataset {
    /// Validates weights, value arity, categorical codes and unique ids.
    /// `strata`, when given, holds one label per unit.
    pub fn new(items: Vec<Item>, units: Vec<UnitRecord>, strata: Option<Vec<String>>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(units.len());
        for (row, u) in units.iter().enumerate() {
            if !(u.weight.is_finite() && u.weight > 0.0) {
                return Err(Error::Validation(format!(
                    "unit {} (row {}) has nonpositive design weight {}",
                    u.id,
                    row + 1,
                    u.weight
                )));
            }
            if u.values.len() != items.len() {
                return Err(Error::Dimension {
                    expected: items.len(),
                    got: u.values.len(),
                });
            }
            if !seen.insert(u.id.as_str()) {
                return Err(Error::Validation(format!("duplicate unit id {}", u.id)));
            }
            for (item, v) in items.iter().zip(&u.values) {
                let Some(v) = v else { continue };
                match &item.kind {
                    ItemKind::Continuous if !v.is_finite() => {
                        return Err(Error::Validation(format!(
                            "unit {} has non-finite value for item {}",
                            u.id, item.name
                        )));
                    }
                    ItemKind::Categorical { labels }
                        if v.fract() != 0.0 || *v < 0.0 || *v >= labels.len() as f64 =>
                    {
                        return Err(Error::Validation(format!(
                            "unit {} has invalid category code {} for item {}",
                            u.id, v, item.name
                        )));
                    }
                    _ => {}
                }
            }
        }
        let (strata, stratum_labels) = match strata {
            None => (None, Vec::new()),
            Some(labels) => {
                if labels.len() != units.len() {
                    return Err(Error::Dimension {
                        expected: units.len(),
                        got: labels.len(),
                    });
                }
                let mut table: Vec<String> = Vec::new();
                let mut index: HashMap<String, usize> = HashMap::new();
                let codes = labels
                    .into_iter()
                    .map(|l| {
                        *index.entry(l.clone()).or_insert_with(|| {
                            table.push(l);
                            table.len() - 1
                        })
                    })
                    .collect();
                (Some(codes), table)
            }
        };
        Ok(SurveyDataset {
            inner: Arc::new(DatasetInner {
                items,
                units,
                strata,
                stratum_labels,
            }),
        })
    }

    pub fn items(&self) -> &[Item] {
        &self.inner.items
    }

    pub fn units(&self) -> &[UnitRecord] {
        &self.inner.units
    }

    pub fn unit(&self, i: usize) -> &UnitRecord {
        &self.inner.units[i]
    }

    pub fn len(&self) -> usize {
        self.inner.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inner.units.is_empty()
    }

    pub fn n_items(&self) -> usize {
        self.inner.items.len()
    }

    pub fn item_index(&self, name: &str) -> Result<usize> {
        self.inner
            .items
            .iter()
            .position(|it| it.name == name)
            .ok_or_else(|| Error::Validation(format!("unknown item {name}")))
    }

    pub fn weights(&self) -> Vec<f64> {
        self.inner.units.iter().map(|u| u.weight).collect()
    }

    pub fn total_weight(&self) -> f64 {
        self.inner.units.iter().map(|u| u.weight).sum()
    }

    /// Stratum code of unit `i` (index into [`Self::stratum_labels`]).
    pub fn stratum_of(&self, i: usize) -> Option<usize> {
        self.inner.strata.as_ref().map(|s| s[i])
    }

    pub fn strata(&self) -> Option<&[usize]> {
        self.inner.strata.as_deref()
    }

    pub fn stratum_labels(&self) -> &[String] {
        &self.inner.stratum_labels
    }

    pub fn has_missing(&self) -> bool {
        self.inner.units.iter().any(|u| !u.is_complete())
    }

    /// Copy of the dataset with item `j` masked for units where `keep` is
    /// false.
    pub fn mask_item(&self, j: usize, keep: &[bool]) -> Result<SurveyDataset> {
        if keep.len() != self.len() {
            return Err(Error::Dimension {
                expected: self.len(),
                got: keep.len(),
            });
        }
        let units = self
            .units()
            .iter()
            .zip(keep)
            .map(|(u, &k)| {
                let mut u = u.clone();
                if !k {
                    u.values[j] = None;
                }
                u
            })
            .collect();
        self.with_units(units)
    }

    /// Same items and strata, new unit records (must be the same count).
    pub fn with_units(&self, units: Vec<UnitRecord>) -> Result<SurveyDataset> {
        if units.len() != self.len() {
            return Err(Error::Dimension {
                expected: self.len(),
                got: units.len(),
            });
        }
        let strata = self.labels_per_unit();
        SurveyDataset::new(self.items().to_vec(), units, strata)
    }

    /// Subset of units, in the given order.
    pub fn select(&self, idx: &[usize]) -> Result<SurveyDataset> {
        let units = idx.iter().map(|&i| self.unit(i).clone()).collect();
        let strata = self
            .labels_per_unit()
            .map(|l| idx.iter().map(|&i| l[i].clone()).collect());
        SurveyDataset::new(self.items().to_vec(), units, strata)
    }

    fn labels_per_unit(&self) -> Option<Vec<String>> {
        self.inner.strata.as_ref().map(|codes| {
            codes
                .iter()
                .map(|&c| self.inner.stratum_labels[c].clone())
                .collect()
        })
    }
}

/// Buckets unit indices by response pattern.
pub fn pattern_partition(data: &SurveyDataset) -> BTreeMap<MissingPattern, Vec<usize>> {
    let mut out: BTreeMap<MissingPattern, Vec<usize>> = BTreeMap::new();
    for (i, u) in data.units().iter().enumerate() {
        out.entry(u.pattern()).or_default().push(i);
    }
    out
}

/// One augmented record: donor `donor` for unit `unit`.
#[derive(Debug, Clone, PartialEq)]
pub struct FractionalRow {
    pub unit: usize,
    pub donor: usize,
    pub values: Vec<f64>,
    pub weight: f64,
}

/// A completed, fractionally weighted dataset.
///
/// Rows are grouped by unit in unit order. Within each unit the fractional
/// weights sum to one. Regression calibration may produce negative weights;
/// see [`FractionalDataset::has_negative_weights`]. Units that could not be
/// imputed have no rows.
#[derive(Debug, Clone, PartialEq)]
pub struct FractionalDataset {
    base: SurveyDataset,
    rows: Vec<FractionalRow>,
    spans: Vec<Range<usize>>,
}

fn weight_sum_tolerance(count: usize) -> f64 {
    1e-12 * (count as f64 / 1000.0).max(1.0)
}

impl FractionalDataset {
    pub fn new(base: SurveyDataset, mut rows: Vec<FractionalRow>) -> Result<Self> {
        if rows.windows(2).any(|w| w[0].unit > w[1].unit) {
            rows.sort_by_key(|r| r.unit);
        }
        let n = base.len();
        let mut spans = vec![0..0; n];
        let mut start = 0;
        while start < rows.len() {
            let unit = rows[start].unit;
            if unit >= n {
                return Err(Error::Contract(format!("row refers to unit {unit} of {n}")));
            }
            let mut end = start;
            while end < rows.len() && rows[end].unit == unit {
                end += 1;
            }
            spans[unit] = start..end;
            start = end;
        }
        let fd = FractionalDataset { base, rows, spans };
        fd.validate()?;
        Ok(fd)
    }

    fn validate(&self) -> Result<()> {
        let p = self.base.n_items();
        for (i, span) in self.spans.iter().enumerate() {
            if span.is_empty() {
                continue;
            }
            let unit = self.base.unit(i);
            let rows = &self.rows[span.clone()];
            let mut sum = 0.0;
            for r in rows {
                if r.values.len() != p {
                    return Err(Error::Dimension {
                        expected: p,
                        got: r.values.len(),
                    });
                }
                if !r.weight.is_finite() || r.values.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Contract(format!(
                        "unit {} has a non-finite imputed value or weight",
                        unit.id
                    )));
                }
                for (obs, v) in unit.values.iter().zip(&r.values) {
                    if let Some(o) = obs {
                        if o.to_bits() != v.to_bits() {
                            return Err(Error::Contract(format!(
                                "imputed row for unit {} alters an observed value",
                                unit.id
                            )));
                        }
                    }
                }
                sum += r.weight;
            }
            if (sum - 1.0).abs() > weight_sum_tolerance(rows.len()) {
                return Err(Error::Contract(format!(
                    "fractional weights of unit {} sum to {sum}",
                    unit.id
                )));
            }
        }
        Ok(())
    }

    pub fn base(&self) -> &SurveyDataset {
        &self.base
    }

    pub fn rows(&self) -> &[FractionalRow] {
        &self.rows
    }

    pub fn unit_rows(&self, i: usize) -> &[FractionalRow] {
        &self.rows[self.spans[i].clone()]
    }

    pub fn unit_span(&self, i: usize) -> Range<usize> {
        self.spans[i].clone()
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Units with no rows (not imputable).
    pub fn unimputed_units(&self) -> Vec<usize> {
        (0..self.spans.len()).filter(|&i| self.spans[i].is_empty()).collect()
    }

    pub fn has_negative_weights(&self) -> bool {
        self.rows.iter().any(|r| r.weight < 0.0)
    }

    /// Final analysis weight of each row, `w_i * w*_ij`.
    pub fn analysis_weights(&self) -> Vec<f64> {
        self.rows
            .iter()
            .map(|r| self.base.unit(r.unit).weight * r.weight)
            .collect()
    }

    /// Same rows, new fractional weights (revalidated).
    pub fn reweighted(&self, weights: &[f64]) -> Result<FractionalDataset> {
        if weights.len() != self.rows.len() {
            return Err(Error::Dimension {
                expected: self.rows.len(),
                got: weights.len(),
            });
        }
        let rows = self
            .rows
            .iter()
            .zip(weights)
            .map(|(r, &w)| FractionalRow { weight: w, ..r.clone() })
            .collect();
        FractionalDataset::new(self.base.clone(), rows)
    }

    /// Writes `unit_id, donor_index, <items>, fractional_weight`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["unit_id".to_string(), "donor_index".to_string()];
        header.extend(self.base.items().iter().map(|it| it.name.clone()));
        header.push("fractional_weight".into());
        w.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![self.base.unit(r.unit).id.clone(), r.donor.to_string()];
            for (item, v) in self.base.items().iter().zip(&r.values) {
                rec.push(format_value(item, Some(*v), DEFAULT_MISSING_TOKEN));
            }
            rec.push(r.weight.to_string());
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io("<fractional csv>", e))?;
        Ok(())
    }
}

/// Identity augmentation of a fully observed dataset.
pub fn augment_complete(data: &SurveyDataset) -> Result<FractionalDataset> {
    let mut rows = Vec::with_capacity(data.len());
    for (i, u) in data.units().iter().enumerate() {
        let values = u
            .values
            .iter()
            .map(|v| {
                v.ok_or_else(|| {
                    Error::Contract(format!("unit {} has a missing item; cannot augment as complete", u.id))
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(FractionalRow {
            unit: i,
            donor: 0,
            values,
            weight: 1.0,
        });
    }
    FractionalDataset::new(data.clone(), rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnType {
    Continuous,
    Categorical,
}

/// Maps CSV columns onto a [`SurveyDataset`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvSchema {
    /// Unit id column; row numbers (1-based) are used when absent.
    pub id: Option<String>,
    pub weight: String,
    pub stratum: Option<String>,
    pub items: Vec<(String, ColumnType)>,
}

impl CsvSchema {
    /// The schema [`save_csv`] writes for `data`.
    pub fn for_dataset(data: &SurveyDataset) -> Self {
        CsvSchema {
            id: Some("unit_id".into()),
            weight: "weight".into(),
            stratum: data.strata().map(|_| "stratum".into()),
            items: data
                .items()
                .iter()
                .map(|it| {
                    let t = if it.is_categorical() {
                        ColumnType::Categorical
                    } else {
                        ColumnType::Continuous
                    };
                    (it.name.clone(), t)
                })
                .collect(),
        }
    }
}

pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema, missing_token: &str) -> Result<SurveyDataset> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(file, schema, missing_token)
}

pub fn read_csv<R: Read>(input: R, schema: &CsvSchema, missing_token: &str) -> Result<SurveyDataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Parse {
                row: 0,
                message: format!("missing column {name}"),
            })
    };
    let weight_col = col(&schema.weight)?;
    let id_col = schema.id.as_deref().map(col).transpose()?;
    let stratum_col = schema.stratum.as_deref().map(col).transpose()?;
    let item_cols = schema
        .items
        .iter()
        .map(|(n, _)| col(n))
        .collect::<Result<Vec<_>>>()?;

    let mut label_tables: Vec<(Vec<String>, HashMap<String, usize>)> =
        vec![(Vec::new(), HashMap::new()); schema.items.len()];
    let mut units = Vec::new();
    let mut strata = stratum_col.map(|_| Vec::new());

    for (k, rec) in rdr.records().enumerate() {
        // data rows are numbered from 1, after the header
        let row = k + 1;
        let rec = rec.map_err(|e| Error::Parse {
            row,
            message: e.to_string(),
        })?;
        let field = |c: usize| -> Result<&str> {
            rec.get(c).ok_or_else(|| Error::Parse {
                row,
                message: format!("row has {} fields", rec.len()),
            })
        };
        let weight: f64 = field(weight_col)?.trim().parse().map_err(|_| Error::Parse {
            row,
            message: format!("bad weight {:?}", field(weight_col).unwrap_or("")),
        })?;
        if !(weight.is_finite() && weight > 0.0) {
            return Err(Error::Validation(format!("row {row}: nonpositive weight {weight}")));
        }
        let id = match id_col {
            Some(c) => field(c)?.to_string(),
            None => row.to_string(),
        };
        let mut values = Vec::with_capacity(item_cols.len());
        for (j, (&c, (name, ty))) in item_cols.iter().zip(&schema.items).enumerate() {
            let raw = field(c)?;
            if raw == missing_token {
                values.push(None);
                continue;
            }
            let v = match ty {
                ColumnType::Continuous => raw.trim().parse::<f64>().map_err(|_| Error::Parse {
                    row,
                    message: format!("bad value {raw:?} in column {name}"),
                })?,
                ColumnType::Categorical => {
                    let (labels, index) = &mut label_tables[j];
                    let code = *index.entry(raw.to_string()).or_insert_with(|| {
                        labels.push(raw.to_string());
                        labels.len() - 1
                    });
                    code as f64
                }
            };
            values.push(Some(v));
        }
        if let (Some(c), Some(s)) = (stratum_col, strata.as_mut()) {
            s.push(field(c)?.to_string());
        }
        units.push(UnitRecord { id, weight, values });
    }

    let items = schema
        .items
        .iter()
        .zip(label_tables)
        .map(|((name, ty), (labels, _))| match ty {
            ColumnType::Continuous => Item::continuous(name.clone()),
            ColumnType::Categorical => Item::categorical(name.clone(), labels),
        })
        .collect();
    SurveyDataset::new(items, units, strata)
}

fn format_value(item: &Item, v: Option<f64>, missing_token: &str) -> String {
    match (v, &item.kind) {
        (None, _) => missing_token.to_string(),
        (Some(v), ItemKind::Continuous) => v.to_string(),
        (Some(v), ItemKind::Categorical { labels }) => labels[v as usize].clone(),
    }
}

/// Writes the layout described by [`CsvSchema::for_dataset`].
pub fn write_csv<W: Write>(data: &SurveyDataset, out: W, missing_token: &str) -> Result<()> {
    let schema = CsvSchema::for_dataset(data);
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["unit_id".to_string()];
    if schema.stratum.is_some() {
        header.push("stratum".into());
    }
    header.push("weight".into());
    header.extend(schema.items.iter().map(|(n, _)| n.clone()));
    w.write_record(&header)?;
    for (i, u) in data.units().iter().enumerate() {
        let mut rec = vec![u.id.clone()];
        if let Some(code) = data.stratum_of(i) {
            rec.push(data.stratum_labels()[code].clone());
        }
        rec.push(u.weight.to_string());
        for (item, v) in data.items().iter().zip(&u.values) {
            rec.push(format_value(item, *v, missing_token));
        }
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

pub fn save_csv(data: &SurveyDataset, path: impl AsRef<Path>, missing_token: &str) -> Result<()> {
    let mut buf = Vec::new();
    write_csv(data, &mut buf, missing_token)?;
    write_atomic(path, &buf)
}

/// Write to a sibling temporary file, then rename over `path`, so readers
/// never observe a partial file.
pub fn write_atomic(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let file_name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".into());
    let tmp = path.with_file_name(format!(".{file_name}.tmp"));
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
