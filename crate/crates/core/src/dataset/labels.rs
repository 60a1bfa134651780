//! Annotation tables and aggregated label matrices.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::N_TASKS;

pub const RATING_MIN: u8 = 1;
pub const RATING_MAX: u8 = 7;

/// Maps a 7-point rating onto `[-0.5, +0.5]` via `(x - 4) / 6`.
pub fn scale_rating(x: f64) -> Result<f64> {
    let (lo, hi) = (RATING_MIN as f64, RATING_MAX as f64);
    if !(lo..=hi).contains(&x) {
        return Err(Error::Range { value: x, lo, hi });
    }
    Ok((x - 4.0) / 6.0)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Annotation {
    pub image_id: String,
    pub annotator_id: String,
    pub ratings: [u8; N_TASKS],
}

/// Raw per-annotator ratings. Every rating is in `1..=7` and each
/// `(image_id, annotator_id)` pair occurs at most once.
#[derive(Debug, Clone, Default)]
pub struct RawAnnotationTable {
    rows: Vec<Annotation>,
}

impl RawAnnotationTable {
    pub fn new(rows: Vec<Annotation>) -> Result<Self> {
        let mut seen = HashSet::new();
        for row in &rows {
            for &r in &row.ratings {
                if !(RATING_MIN..=RATING_MAX).contains(&r) {
                    return Err(Error::Range {
                        value: r as f64,
                        lo: RATING_MIN as f64,
                        hi: RATING_MAX as f64,
                    });
                }
            }
            if !seen.insert((row.image_id.as_str(), row.annotator_id.as_str())) {
                return Err(Error::Argument(format!(
                    "duplicate annotation for image {:?} by annotator {:?}",
                    row.image_id, row.annotator_id
                )));
            }
        }
        Ok(Self { rows })
    }

    pub fn rows(&self) -> &[Annotation] {
        &self.rows
    }

    /// Parses `image_id,annotator_id,d1,…,d12`. Errors carry the 1-based line.
    pub fn from_csv_reader<R: Read>(reader: R, path: &Path) -> Result<Self> {
        let parse_err = |line: usize, message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_reader(reader);
        let headers = rdr.headers().map_err(|e| parse_err(1, e.to_string()))?;
        if headers.len() != N_TASKS + 2
            || &headers[0] != "image_id"
            || &headers[1] != "annotator_id"
        {
            return Err(parse_err(
                1,
                "expected header image_id,annotator_id,d1,...,d12".into(),
            ));
        }

        let mut rows = Vec::new();
        let mut seen = HashSet::new();
        for (i, record) in rdr.records().enumerate() {
            let line = i + 2;
            let record = record.map_err(|e| parse_err(line, e.to_string()))?;
            if record.len() != N_TASKS + 2 {
                return Err(parse_err(
                    line,
                    format!("expected {} fields, found {}", N_TASKS + 2, record.len()),
                ));
            }
            let mut ratings = [0u8; N_TASKS];
            for (k, slot) in ratings.iter_mut().enumerate() {
                let field = &record[k + 2];
                let value: u8 = field
                    .parse()
                    .map_err(|_| parse_err(line, format!("d{}: not an integer: {field:?}", k + 1)))?;
                if !(RATING_MIN..=RATING_MAX).contains(&value) {
                    return Err(parse_err(
                        line,
                        format!("d{}: rating {value} outside 1..=7", k + 1),
                    ));
                }
                *slot = value;
            }
            let image_id = record[0].to_string();
            let annotator_id = record[1].to_string();
            if !seen.insert((image_id.clone(), annotator_id.clone())) {
                return Err(parse_err(
                    line,
                    format!("duplicate annotation for ({image_id}, {annotator_id})"),
                ));
            }
            rows.push(Annotation {
                image_id,
                annotator_id,
                ratings,
            });
        }
        Ok(Self { rows })
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv_reader(std::io::BufReader::new(file), path)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    #[default]
    Mean,
    Median,
}

impl Aggregation {
    fn apply(self, values: &mut [f64]) -> f64 {
        match self {
            Aggregation::Mean => values.iter().sum::<f64>() / values.len() as f64,
            Aggregation::Median => {
                values.sort_by(f64::total_cmp);
                let n = values.len();
                if n % 2 == 1 {
                    values[n / 2]
                } else {
                    0.5 * (values[n / 2 - 1] + values[n / 2])
                }
            }
        }
    }
}

impl fmt::Display for Aggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Aggregation::Mean => "mean",
            Aggregation::Median => "median",
        })
    }
}

impl FromStr for Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Aggregation::Mean),
            "median" => Ok(Aggregation::Median),
            other => Err(Error::Argument(format!(
                "unknown label mode {other:?} (expected mean or median)"
            ))),
        }
    }
}

/// Scaled labels, one row per image, rows sorted by image id.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMatrix {
    image_ids: Vec<String>,
    values: Vec<[f64; N_TASKS]>,
    aggregation: Aggregation,
}

impl LabelMatrix {
    /// Builds a matrix, sorting rows by id. Values must lie in `[-0.5, 0.5]`.
    pub fn new(rows: Vec<(String, [f64; N_TASKS])>, aggregation: Aggregation) -> Result<Self> {
        let mut sorted: BTreeMap<String, [f64; N_TASKS]> = BTreeMap::new();
        for (id, row) in rows {
            if let Some(v) = row.iter().find(|v| !(-0.5..=0.5).contains(*v)) {
                return Err(Error::Range {
                    value: *v,
                    lo: -0.5,
                    hi: 0.5,
                });
            }
            if sorted.insert(id.clone(), row).is_some() {
                return Err(Error::Argument(format!("duplicate label row for {id:?}")));
            }
        }
        let (image_ids, values) = sorted.into_iter().unzip();
        Ok(Self {
            image_ids,
            values,
            aggregation,
        })
    }

    pub fn image_ids(&self) -> &[String] {
        &self.image_ids
    }

    pub fn values(&self) -> &[[f64; N_TASKS]] {
        &self.values
    }

    pub fn aggregation(&self) -> Aggregation {
        self.aggregation
    }

    pub fn len(&self) -> usize {
        self.image_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.image_ids.is_empty()
    }

    pub fn get(&self, image_id: &str) -> Option<&[f64; N_TASKS]> {
        self.image_ids
            .binary_search_by(|id| id.as_str().cmp(image_id))
            .ok()
            .map(|i| &self.values[i])
    }

    pub fn require(&self, image_id: &str) -> Result<&[f64; N_TASKS]> {
        self.get(image_id)
            .ok_or_else(|| Error::MissingData(image_id.to_string()))
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let to_err = |e: csv::Error| Error::Argument(format!("csv write failed: {e}"));
        let mut header = vec!["image_id".to_string()];
        header.extend((1..=N_TASKS).map(|k| format!("d{k}")));
        w.write_record(&header).map_err(to_err)?;
        for (id, row) in self.image_ids.iter().zip(&self.values) {
            let mut rec = vec![id.clone()];
            rec.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&rec).map_err(to_err)?;
        }
        w.flush()
            .map_err(|e| Error::Argument(format!("csv flush failed: {e}")))?;
        Ok(())
    }

    pub fn read_csv(path: impl AsRef<Path>, aggregation: Aggregation) -> Result<Self> {
        let path = path.as_ref();
        let parse_err = |line: usize, message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| parse_err(0, e.to_string()))?;
        let headers = rdr.headers().map_err(|e| parse_err(1, e.to_string()))?;
        if headers.len() != N_TASKS + 1 || &headers[0] != "image_id" {
            return Err(parse_err(1, "expected header image_id,d1,...,d12".into()));
        }
        let mut rows = Vec::new();
        for (i, record) in rdr.records().enumerate() {
            let line = i + 2;
            let record = record.map_err(|e| parse_err(line, e.to_string()))?;
            let mut row = [0.0; N_TASKS];
            for (k, slot) in row.iter_mut().enumerate() {
                let field = record
                    .get(k + 1)
                    .ok_or_else(|| parse_err(line, "missing field".into()))?;
                *slot = field
                    .parse()
                    .map_err(|_| parse_err(line, format!("d{}: not a number: {field:?}", k + 1)))?;
            }
            rows.push((record[0].to_string(), row));
        }
        Self::new(rows, aggregation).map_err(|e| e.context(path.display().to_string()))
    }
}

/// Aggregates the ratings of every image appearing in `table`.
pub fn aggregate_labels(table: &RawAnnotationTable, mode: Aggregation) -> Result<LabelMatrix> {
    let ids: Vec<String> = table
        .rows()
        .iter()
        .map(|r| r.image_id.clone())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    aggregate_labels_for(table, mode, &ids)
}

/// Aggregates ratings for exactly `image_ids`; an id without annotations is a
/// missing-data error.
pub fn aggregate_labels_for(
    table: &RawAnnotationTable,
    mode: Aggregation,
    image_ids: &[String],
) -> Result<LabelMatrix> {
    let mut grouped: BTreeMap<&str, Vec<&[u8; N_TASKS]>> = BTreeMap::new();
    for row in table.rows() {
        grouped.entry(&row.image_id).or_default().push(&row.ratings);
    }
    let mut out = Vec::with_capacity(image_ids.len());
    for id in image_ids {
        let ratings = grouped
            .get(id.as_str())
            .filter(|r| !r.is_empty())
            .ok_or_else(|| Error::MissingData(id.clone()))?;
        let mut row = [0.0; N_TASKS];
        let mut column = Vec::with_capacity(ratings.len());
        for (k, slot) in row.iter_mut().enumerate() {
            column.clear();
            column.extend(ratings.iter().map(|r| r[k] as f64));
            *slot = scale_rating(mode.apply(&mut column))?;
        }
        out.push((id.clone(), row));
    }
    LabelMatrix::new(out, mode)
}
