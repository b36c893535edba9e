use std::path::Path;

use super::{Dataset, Example, FeatureSchema, Field};
use crate::{Error, Result};

/// Columns every file starts with; context columns `ctx_0..` follow.
pub const CSV_PREFIX: [&str; 4] = ["user_id", "item_id", "domain_id", "label"];

struct RawRow {
    line: u64,
    ids: Vec<usize>,
    domain: usize,
    label: u8,
}

fn csv_err(line: u64, message: impl Into<String>) -> Error {
    Error::Csv { line, message: message.into() }
}

fn expected_header(schema: &FeatureSchema) -> Vec<String> {
    let mut cols: Vec<String> = CSV_PREFIX.iter().map(|s| s.to_string()).collect();
    cols.extend(schema.fields[2..].iter().map(|f| f.name.clone()));
    cols
}

fn read_raw(path: &Path) -> Result<(Vec<String>, Vec<RawRow>)> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => csv_err(1, format!("{other:?}")),
    })?;
    let header: Vec<String> = reader.headers().map_err(|e| csv_err(1, e.to_string()))?.iter().map(str::to_string).collect();
    if header.len() < 4 || header[..4] != CSV_PREFIX {
        return Err(csv_err(1, format!("header must start with {}, got {}", CSV_PREFIX.join(","), header.join(","))));
    }
    for (k, name) in header[4..].iter().enumerate() {
        if *name != format!("ctx_{k}") {
            return Err(csv_err(1, format!("context column {k} must be named ctx_{k}, got {name}")));
        }
    }
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, csv::Position::line);
            csv_err(line, e.to_string())
        })?;
        let line = record.position().map_or(0, csv::Position::line);
        let parse = |col: usize| -> Result<usize> {
            let raw = record.get(col).unwrap_or("");
            raw.trim().parse::<usize>().map_err(|_| csv_err(line, format!("column {}: {raw:?} is not a non-negative integer", header[col])))
        };
        let mut ids = vec![parse(0)?, parse(1)?];
        for col in 4..header.len() {
            ids.push(parse(col)?);
        }
        let domain = parse(2)?;
        let label = match parse(3)? {
            0 => 0,
            1 => 1,
            other => return Err(csv_err(line, format!("label must be 0 or 1, got {other}"))),
        };
        rows.push(RawRow { line, ids, domain, label });
    }
    Ok((header, rows))
}

/// Reads a CSV file and validates every row against `schema`.
///
/// Errors cite the 1-based file line (the header is line 1).
pub fn load_csv(path: impl AsRef<Path>, schema: &FeatureSchema) -> Result<Dataset> {
    schema.validate()?;
    let (header, raw) = read_raw(path.as_ref())?;
    let expected = expected_header(schema);
    if header != expected {
        return Err(csv_err(1, format!("header {} does not match schema columns {}", header.join(","), expected.join(","))));
    }
    let mut rows = Vec::with_capacity(raw.len());
    for r in raw {
        let ex = Example { ids: r.ids, label: r.label, domain: r.domain };
        schema.check_example(&ex).map_err(|e| csv_err(r.line, e.to_string()))?;
        rows.push(ex);
    }
    Dataset::new(schema.clone(), rows)
}

/// Schema whose cardinalities are `max id + 1` per column and whose domain
/// count is `max domain_id + 1`.
pub fn infer_schema(path: impl AsRef<Path>, embedding_dim: usize) -> Result<FeatureSchema> {
    let (header, raw) = read_raw(path.as_ref())?;
    schema_from_raw(&header, &raw, embedding_dim)
}

fn schema_from_raw(header: &[String], raw: &[RawRow], embedding_dim: usize) -> Result<FeatureSchema> {
    if raw.is_empty() {
        return Err(Error::Empty("cannot infer a schema from a file without rows".into()));
    }
    let n_fields = header.len() - 2;
    let mut card = vec![0usize; n_fields];
    let mut n_domains = 0;
    for r in raw {
        for (c, &id) in card.iter_mut().zip(&r.ids) {
            *c = (*c).max(id + 1);
        }
        n_domains = n_domains.max(r.domain + 1);
    }
    let names = [header[0].clone(), header[1].clone()].into_iter().chain(header[4..].iter().cloned());
    let fields = names.zip(card).map(|(name, cardinality)| Field { name, cardinality }).collect();
    FeatureSchema::new(fields, embedding_dim, n_domains)
}

pub fn load_csv_inferred(path: impl AsRef<Path>, embedding_dim: usize) -> Result<Dataset> {
    let (header, raw) = read_raw(path.as_ref())?;
    let schema = schema_from_raw(&header, &raw, embedding_dim)?;
    let rows = raw.into_iter().map(|r| Example { ids: r.ids, label: r.label, domain: r.domain }).collect();
    Dataset::new(schema, rows)
}

pub fn write_csv(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
    w.write_record(expected_header(ds.schema())).map_err(io)?;
    for r in ds.rows() {
        let mut rec = vec![r.ids[0].to_string(), r.ids[1].to_string(), r.domain.to_string(), r.label.to_string()];
        rec.extend(r.ids[2..].iter().map(usize::to_string));
        w.write_record(&rec).map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn file(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn three_rows_two_domains() {
        let f = file("user_id,item_id,domain_id,label\n0,1,0,1\n1,0,0,0\n2,2,1,1\n");
        let ds = load_csv_inferred(f.path(), 4).unwrap();
        assert_eq!(ds.domain_counts(), &[2, 1]);
        assert_eq!(ds.schema().users(), 3);
    }

    #[test]
    fn bad_label_cites_line() {
        let f = file("user_id,item_id,domain_id,label\n0,0,0,1\n0,0,0,1\n0,0,0,0\n0,0,0,2\n");
        match load_csv_inferred(f.path(), 4) {
            Err(Error::Csv { line, .. }) => assert_eq!(line, 5),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_domain_rejected() {
        let schema = FeatureSchema::standard(4, 4, &[], 2, 2).unwrap();
        let f = file("user_id,item_id,domain_id,label\n0,0,0,1\n0,0,2,1\n");
        match load_csv(f.path(), &schema) {
            Err(Error::Csv { line, message }) => {
                assert_eq!(line, 3);
                assert!(message.contains("domain"), "{message}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn round_trip_with_context() {
        let schema = FeatureSchema::standard(5, 6, &[3], 2, 2).unwrap();
        let rows = vec![
            Example { ids: vec![4, 5, 2], label: 1, domain: 1 },
            Example { ids: vec![0, 0, 0], label: 0, domain: 0 },
        ];
        let ds = Dataset::new(schema.clone(), rows).unwrap();
        let out = tempfile::NamedTempFile::new().unwrap();
        write_csv(&ds, out.path()).unwrap();
        assert_eq!(load_csv(out.path(), &schema).unwrap(), ds);
    }

    #[test]
    fn header_mismatch() {
        let f = file("user,item_id,domain_id,label\n0,0,0,1\n");
        assert!(matches!(load_csv_inferred(f.path(), 4), Err(Error::Csv { line: 1, .. })));
    }
}
