//! CSV and JSON readers and writers.
//!
//! Subject files have an `id`, `time` and `event` column plus one column per
//! schema feature, matched by name. The schema lives in a JSON sidecar.

use std::fs::{self, File};
use std::io::{BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use serde::Serialize;
use serde::de::DeserializeOwned;

use crate::dataset::{FeatureSchema, FeatureValue, Subject, SurvivalDataset};
use crate::error::{Error, Result};
use crate::ingest::{Activity, Direction};

pub const ID: &str = "id";
pub const TIME: &str = "time";
pub const EVENT: &str = "event";

/// Writes through a temporary file in the target directory, then renames it
/// into place so readers never see a partial file.
pub fn write_atomic<F>(path: &Path, write: F) -> Result<()>
where
    F: FnOnce(&mut BufWriter<File>) -> Result<()>,
{
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.{}.tmp", std::process::id()));
    let result = (|| {
        let mut w = BufWriter::new(File::create(&tmp)?);
        write(&mut w)?;
        let file = w.into_inner().map_err(|e| e.into_error())?;
        file.sync_all()?;
        fs::rename(&tmp, path)?;
        Ok(())
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_reader(std::io::BufReader::new(File::open(path)?))?)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_atomic(path, |w| {
        serde_json::to_writer_pretty(&mut *w, value)?;
        w.write_all(b"\n")?;
        Ok(())
    })
}

pub fn read_schema(path: &Path) -> Result<FeatureSchema> {
    let schema: FeatureSchema = read_json(path)?;
    schema.check()?;
    Ok(schema)
}

/// How category levels missing from the schema are handled when reading.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum UnknownCategory {
    #[default]
    Reject,
    AsMissing,
}

/// Position of each required column in a CSV header.
#[derive(Debug, Clone)]
struct Columns {
    id: usize,
    outcome: Option<(usize, usize)>,
    features: Vec<usize>,
}

fn mismatch(msg: String) -> Error {
    Error::SchemaMismatch(msg)
}

fn map_columns(
    header: &csv::StringRecord,
    schema: &FeatureSchema,
    id_name: &str,
    fixed: &[&str],
    ignore: &[&str],
) -> Result<(usize, Vec<usize>, Vec<usize>)> {
    let names: Vec<&str> = header.iter().map(str::trim).collect();
    for (i, n) in names.iter().enumerate() {
        if names[..i].contains(n) {
            return Err(mismatch(format!("column `{n}` appears twice")));
        }
        if *n != id_name && !fixed.contains(n) && !ignore.contains(n) && schema.index_of(n).is_none() {
            return Err(mismatch(format!("unexpected column `{n}`")));
        }
    }
    let find = |name: &str| {
        names
            .iter()
            .position(|n| *n == name)
            .ok_or_else(|| mismatch(format!("missing column `{name}`")))
    };
    let id = find(id_name)?;
    let fixed = fixed.iter().map(|n| find(n)).collect::<Result<Vec<_>>>()?;
    let features = schema.features.iter().map(|f| find(&f.name)).collect::<Result<Vec<_>>>()?;
    Ok((id, fixed, features))
}

impl Columns {
    fn new(header: &csv::StringRecord, schema: &FeatureSchema, with_outcome: bool) -> Result<Self> {
        if with_outcome {
            let (id, fixed, features) = map_columns(header, schema, ID, &[TIME, EVENT], &[])?;
            Ok(Self { id, outcome: Some((fixed[0], fixed[1])), features })
        } else {
            let (id, _, features) = map_columns(header, schema, ID, &[], &[TIME, EVENT])?;
            Ok(Self { id, outcome: None, features })
        }
    }
}

fn parse_features(
    record: &csv::StringRecord,
    columns: &[usize],
    schema: &FeatureSchema,
    unknown: UnknownCategory,
) -> Result<Vec<FeatureValue>> {
    columns
        .iter()
        .enumerate()
        .map(|(j, &c)| {
            let raw = record.get(c).unwrap_or("");
            match schema.parse_value(j, raw) {
                Err(Error::Value { .. }) if unknown == UnknownCategory::AsMissing && !schema.features[j].is_numeric() => {
                    Ok(FeatureValue::Missing)
                }
                other => other,
            }
        })
        .collect()
}

fn parse_f64(raw: &str, column: &str) -> Result<f64> {
    raw.trim().parse::<f64>().map_err(|_| Error::Value {
        column: column.into(),
        reason: format!("`{raw}` is not a number"),
    })
}

fn parse_event(raw: &str) -> Result<bool> {
    match raw.trim() {
        "1" | "true" => Ok(true),
        "0" | "false" => Ok(false),
        other => Err(Error::Value {
            column: EVENT.into(),
            reason: format!("`{other}` is not 0 or 1"),
        }),
    }
}

fn csv_reader<R: Read>(reader: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader)
}

/// Reads a subject CSV against `schema`. The result is not validated.
pub fn read_subjects<R: Read>(reader: R, schema: Arc<FeatureSchema>) -> Result<SurvivalDataset> {
    let mut rdr = csv_reader(reader);
    let cols = Columns::new(rdr.headers()?, &schema, true)?;
    let (t, e) = cols.outcome.expect("outcome columns");
    let mut subjects = Vec::new();
    for record in rdr.records() {
        let record = record?;
        let values = parse_features(&record, &cols.features, &schema, UnknownCategory::Reject)?;
        subjects.push(Subject::new(
            &record[cols.id],
            values,
            parse_f64(&record[t], TIME)?,
            parse_event(&record[e])?,
        ));
    }
    Ok(SurvivalDataset::new(schema, subjects))
}

pub fn read_subjects_file(path: &Path, schema: Arc<FeatureSchema>) -> Result<SurvivalDataset> {
    read_subjects(File::open(path)?, schema)
}

/// Streams `(id, values)` rows of a feature CSV. Outcome columns are allowed
/// and ignored.
pub struct FeatureRows<R: Read> {
    records: csv::StringRecordsIntoIter<R>,
    columns: Columns,
    schema: Arc<FeatureSchema>,
    unknown: UnknownCategory,
}

impl<R: Read> FeatureRows<R> {
    pub fn new(reader: R, schema: Arc<FeatureSchema>, unknown: UnknownCategory) -> Result<Self> {
        let mut rdr = csv_reader(reader);
        let columns = Columns::new(rdr.headers()?, &schema, false)?;
        Ok(Self {
            records: rdr.into_records(),
            columns,
            schema,
            unknown,
        })
    }
}

impl<R: Read> Iterator for FeatureRows<R> {
    type Item = Result<(String, Vec<FeatureValue>)>;

    fn next(&mut self) -> Option<Self::Item> {
        let record = self.records.next()?;
        Some(record.map_err(Error::from).and_then(|r| {
            let values = parse_features(&r, &self.columns.features, &self.schema, self.unknown)?;
            Ok((r[self.columns.id].to_string(), values))
        }))
    }
}

fn format_value(schema: &FeatureSchema, j: usize, v: FeatureValue) -> String {
    match v {
        FeatureValue::Numeric(x) => x.to_string(),
        FeatureValue::Category(c) => schema.features[j]
            .categories()
            .and_then(|cats| cats.get(c))
            .cloned()
            .unwrap_or_default(),
        FeatureValue::Missing => String::new(),
    }
}

pub fn write_subjects<W: Write>(writer: W, data: &SurvivalDataset) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec![ID.to_string(), TIME.to_string(), EVENT.to_string()];
    header.extend(data.schema.features.iter().map(|f| f.name.clone()));
    w.write_record(&header)?;
    for s in &data.subjects {
        let mut row = vec![s.id.clone(), s.time.to_string(), u8::from(s.event).to_string()];
        row.extend(s.values.iter().enumerate().map(|(j, &v)| format_value(&data.schema, j, v)));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes two-column `id,<name>` CSV rows.
pub fn write_labels<W: Write, L: ToString>(writer: W, name: &str, rows: impl IntoIterator<Item = (String, L)>) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([ID, name])?;
    for (id, label) in rows {
        w.write_record([id, label.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Reads an `id,<name>` CSV of non-negative integer labels.
pub fn read_labels<R: Read>(reader: R, name: &str) -> Result<Vec<(String, usize)>> {
    let mut rdr = csv_reader(reader);
    let empty = FeatureSchema { features: vec![] };
    let (id, fixed, _) = map_columns(rdr.headers()?, &empty, ID, &[name], &[])?;
    rdr.records()
        .map(|r| {
            let r = r?;
            let label = r[fixed[0]].parse::<usize>().map_err(|_| Error::Value {
                column: name.into(),
                reason: format!("`{}` is not a non-negative integer", &r[fixed[0]]),
            })?;
            Ok((r[id].to_string(), label))
        })
        .collect()
}

/// Reads `user_id,timestamp,direction,partner_id` rows.
pub fn read_activity<R: Read>(reader: R) -> Result<Vec<(String, Activity)>> {
    let mut rdr = csv_reader(reader);
    let empty = FeatureSchema { features: vec![] };
    let (id, f, _) = map_columns(rdr.headers()?, &empty, "user_id", &["timestamp", "direction", "partner_id"], &[])?;
    rdr.records()
        .map(|r| {
            let r = r?;
            let direction = match &r[f[1]] {
                "sent" => Direction::Sent,
                "received" => Direction::Received,
                other => {
                    return Err(Error::Value {
                        column: "direction".into(),
                        reason: format!("`{other}` is not `sent` or `received`"),
                    });
                }
            };
            Ok((
                r[id].to_string(),
                Activity {
                    timestamp: parse_f64(&r[f[0]], "timestamp")?,
                    direction,
                    partner: r[f[2]].to_string(),
                },
            ))
        })
        .collect()
}

/// One row of a profile file.
#[derive(Debug, Clone, PartialEq)]
pub struct ProfileRow {
    pub user_id: String,
    pub join_time: f64,
    pub values: Vec<FeatureValue>,
}

/// Reads `user_id,join_time,<profile features>` rows.
pub fn read_profiles<R: Read>(reader: R, schema: &FeatureSchema) -> Result<Vec<ProfileRow>> {
    let mut rdr = csv_reader(reader);
    let (id, f, features) = map_columns(rdr.headers()?, schema, "user_id", &["join_time"], &[])?;
    rdr.records()
        .map(|r| {
            let r = r?;
            Ok(ProfileRow {
                user_id: r[id].to_string(),
                join_time: parse_f64(&r[f[0]], "join_time")?,
                values: parse_features(&r, &features, schema, UnknownCategory::Reject)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Feature;

    fn schema() -> Arc<FeatureSchema> {
        Arc::new(FeatureSchema::new(vec![Feature::numeric("age"), Feature::categorical("sex", ["F", "M"])]).unwrap())
    }

    #[test]
    fn subjects_round_trip_and_column_order_free() {
        let csv = "sex,id,event,time,age\nM,a,1,2.5,30\nF,b,0,4,\n";
        let ds = read_subjects(csv.as_bytes(), schema()).unwrap();
        assert_eq!(ds.subjects[0].values, vec![FeatureValue::Numeric(30.0), FeatureValue::Category(1)]);
        assert_eq!(ds.subjects[1].values[0], FeatureValue::Missing);
        assert!(!ds.subjects[1].event);

        let mut out = Vec::new();
        write_subjects(&mut out, &ds).unwrap();
        let back = read_subjects(out.as_slice(), schema()).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn errors_name_the_column() {
        let err = read_subjects("id,time,event,age\na,1,1,3\n".as_bytes(), schema()).unwrap_err();
        assert!(err.to_string().contains("`sex`"), "{err}");
        let err = read_subjects("id,time,event,age,sex,zip\n".as_bytes(), schema()).unwrap_err();
        assert!(err.to_string().contains("`zip`"), "{err}");
        let err = read_subjects("id,time,event,age,sex\na,1,1,3,X\n".as_bytes(), schema()).unwrap_err();
        assert!(err.to_string().contains("sex"), "{err}");
        let err = read_subjects("id,time,event,age,sex\na,1,2,3,F\n".as_bytes(), schema()).unwrap_err();
        assert!(err.to_string().contains("event"), "{err}");
    }

    #[test]
    fn feature_rows_lenient_categories() {
        let csv = "id,age,sex\na,1,X\n";
        let strict: Vec<_> = FeatureRows::new(csv.as_bytes(), schema(), UnknownCategory::Reject).unwrap().collect();
        assert!(strict[0].is_err());
        let lenient: Vec<_> = FeatureRows::new(csv.as_bytes(), schema(), UnknownCategory::AsMissing)
            .unwrap()
            .collect::<Result<_>>()
            .unwrap();
        assert_eq!(lenient, vec![("a".to_string(), vec![FeatureValue::Numeric(1.0), FeatureValue::Missing])]);
        let none: Vec<_> = FeatureRows::new("id,age,sex\n".as_bytes(), schema(), UnknownCategory::Reject).unwrap().collect();
        assert!(none.is_empty());
    }

    #[test]
    fn activity_and_profiles() {
        let act = read_activity("user_id,timestamp,direction,partner_id\nu,1.5,sent,v\nv,2,received,u\n".as_bytes()).unwrap();
        assert_eq!(act[1].1.direction, Direction::Received);
        assert!(read_activity("user_id,timestamp,direction,partner_id\nu,1,up,v\n".as_bytes()).is_err());
        let p = read_profiles("user_id,join_time,age,sex\nu,0,20,F\n".as_bytes(), &schema()).unwrap();
        assert_eq!(p[0].join_time, 0.0);
    }

    #[test]
    fn atomic_write_replaces_file() {
        let dir = std::env::temp_dir().join(format!("survclust-io-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("s.json");
        write_json(&path, &*schema()).unwrap();
        write_json(&path, &*schema()).unwrap();
        assert_eq!(read_schema(&path).unwrap(), *schema());
        let names: Vec<_> = fs::read_dir(&dir).unwrap().map(|e| e.unwrap().file_name()).collect();
        assert_eq!(names.len(), 1);
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn labels_round_trip() {
        let mut out = Vec::new();
        write_labels(&mut out, "group", vec![("a".to_string(), 2usize)]).unwrap();
        assert_eq!(read_labels(out.as_slice(), "group").unwrap(), vec![("a".to_string(), 2)]);
    }
}
