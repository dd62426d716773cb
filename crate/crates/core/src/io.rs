//! Delimited-text tables, flat key-value configs and atomic file output.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Result, SconeError};
use crate::evaluation::SurvivalRecord;
use crate::numerics::Matrix;

/// Writes `contents` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| SconeError::Parameter(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let mut f = fs::File::create(&tmp).map_err(|e| SconeError::io(&tmp, e))?;
    f.write_all(contents).map_err(|e| SconeError::io(&tmp, e))?;
    f.sync_all().map_err(|e| SconeError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| SconeError::io(path, e))
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| SconeError::io(path, e))
}

/// Tab if the header line contains one, otherwise comma.
pub fn detect_delimiter(header: &str) -> char {
    if header.contains('\t') {
        '\t'
    } else {
        ','
    }
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> SconeError {
    SconeError::Parse {
        path: path.display().to_string(),
        line,
        message: message.into(),
    }
}

/// Flat `key = value` configuration; `#` starts a comment.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KvConfig {
    entries: BTreeMap<String, String>,
}

impl KvConfig {
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| parse_err(origin, no + 1, format!("expected key = value, got {line:?}")))?;
            entries.insert(k.trim().to_string(), v.trim().to_string());
        }
        Ok(KvConfig { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&read_text(path)?, path)
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl ToString) {
        self.entries.insert(key.into(), value.to_string());
    }

    pub fn get_str(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.entries.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| SconeError::Parameter(format!("config key {key}: cannot parse {v:?}"))),
        }
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        Ok(self.get(key)?.unwrap_or(default))
    }

    pub fn get_list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>> {
        match self.entries.get(key) {
            None => Ok(None),
            Some(v) => v
                .split(',')
                .map(|p| {
                    p.trim()
                        .parse()
                        .map_err(|_| SconeError::Parameter(format!("config key {key}: cannot parse {p:?}")))
                })
                .collect::<Result<Vec<T>>>()
                .map(Some),
        }
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn to_text(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

/// Sample-id keyed numeric table: header `sample_id<d>col...`, one row per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub row_ids: Vec<String>,
    pub columns: Vec<String>,
    pub values: Matrix,
}

impl Table {
    pub fn read(path: &Path) -> Result<Table> {
        let text = read_text(path)?;
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines.next().ok_or_else(|| parse_err(path, 1, "empty file"))?;
        let delim = detect_delimiter(header);
        let columns: Vec<String> = header.split(delim).skip(1).map(|s| s.trim().to_string()).collect();
        let mut row_ids = Vec::new();
        let mut data = Vec::new();
        let mut seen = std::collections::HashSet::new();
        for (no, line) in lines {
            let mut cells = line.split(delim);
            let id = cells.next().unwrap_or("").trim().to_string();
            if id.is_empty() {
                return Err(parse_err(path, no + 1, "missing sample id"));
            }
            if !seen.insert(id.clone()) {
                return Err(parse_err(path, no + 1, format!("duplicate sample id {id}")));
            }
            let mut count = 0;
            for cell in cells {
                let v: f64 = cell
                    .trim()
                    .parse()
                    .map_err(|_| parse_err(path, no + 1, format!("cannot parse {cell:?} as a number")))?;
                if v.is_nan() {
                    return Err(parse_err(path, no + 1, "NaN value"));
                }
                data.push(v);
                count += 1;
            }
            if count != columns.len() {
                return Err(parse_err(
                    path,
                    no + 1,
                    format!("expected {} values, found {count}", columns.len()),
                ));
            }
            row_ids.push(id);
        }
        let values = Matrix::new(row_ids.len(), columns.len(), data)?;
        Ok(Table {
            row_ids,
            columns,
            values,
        })
    }

    /// Tab-separated rendering; floats use the shortest round-trip form.
    pub fn to_text(&self) -> String {
        let mut out = String::from("sample_id");
        for c in &self.columns {
            out.push('\t');
            out.push_str(c);
        }
        out.push('\n');
        for (r, id) in self.row_ids.iter().enumerate() {
            out.push_str(id);
            for v in self.values.row(r) {
                out.push('\t');
                out.push_str(&format!("{v:?}"));
            }
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_text().as_bytes())
    }
}

/// Two-column `sample_id<TAB>label` file.
pub fn write_labels(path: &Path, ids: &[String], labels: &[usize]) -> Result<()> {
    let mut out = String::from("sample_id\tlabel\n");
    for (id, l) in ids.iter().zip(labels) {
        out.push_str(&format!("{id}\t{l}\n"));
    }
    write_atomic(path, out.as_bytes())
}

pub fn read_labels(path: &Path) -> Result<Vec<(String, usize)>> {
    let text = read_text(path)?;
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or_else(|| parse_err(path, 1, "empty file"))?;
    let delim = detect_delimiter(header);
    let mut out = Vec::new();
    for (no, line) in lines {
        let cells: Vec<&str> = line.split(delim).map(str::trim).collect();
        if cells.len() != 2 {
            return Err(parse_err(path, no + 1, "expected two columns"));
        }
        let label = cells[1]
            .parse()
            .map_err(|_| parse_err(path, no + 1, format!("bad label {:?}", cells[1])))?;
        out.push((cells[0].to_string(), label));
    }
    Ok(out)
}

/// `sample_id, duration, event, group` with events as 0/1. The group column
/// may be absent on read, in which case every record gets group 0.
pub fn write_survival(path: &Path, records: &[SurvivalRecord]) -> Result<()> {
    let mut out = String::from("sample_id\tduration\tevent\tgroup\n");
    for r in records {
        out.push_str(&format!("{}\t{:?}\t{}\t{}\n", r.sample_id, r.duration, u8::from(r.event), r.group));
    }
    write_atomic(path, out.as_bytes())
}

pub fn read_survival(path: &Path) -> Result<Vec<SurvivalRecord>> {
    let text = read_text(path)?;
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or_else(|| parse_err(path, 1, "empty file"))?;
    let delim = detect_delimiter(header);
    let width = header.split(delim).count();
    if !(3..=4).contains(&width) {
        return Err(parse_err(path, 1, "expected sample_id, duration, event and optional group columns"));
    }
    let mut out = Vec::new();
    for (no, line) in lines {
        let cells: Vec<&str> = line.split(delim).map(str::trim).collect();
        if cells.len() != width {
            return Err(parse_err(path, no + 1, format!("expected {width} columns, found {}", cells.len())));
        }
        let duration: f64 = cells[1]
            .parse()
            .map_err(|_| parse_err(path, no + 1, format!("bad duration {:?}", cells[1])))?;
        let event = match cells[2] {
            "1" | "true" => true,
            "0" | "false" => false,
            other => return Err(parse_err(path, no + 1, format!("bad event flag {other:?}"))),
        };
        let group = match cells.get(3) {
            Some(g) => g.parse().map_err(|_| parse_err(path, no + 1, format!("bad group {g:?}")))?,
            None => 0,
        };
        out.push(SurvivalRecord {
            sample_id: cells[0].to_string(),
            duration,
            event,
            group,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kv_config_parses_comments_and_lists() {
        let cfg = KvConfig::parse("# header\nepochs = 10\nlist=1, 2,3 # trailing\n\n", Path::new("x")).unwrap();
        assert_eq!(cfg.get::<usize>("epochs").unwrap(), Some(10));
        assert_eq!(cfg.get_list::<usize>("list").unwrap(), Some(vec![1, 2, 3]));
        assert!(cfg.get::<usize>("missing").unwrap().is_none());
        assert!(KvConfig::parse("novalue\n", Path::new("x")).is_err());
    }

    #[test]
    fn table_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.tsv");
        let values = Matrix::new(2, 2, vec![0.1, 1.0 / 3.0, -2.5e-300, 7.0]).unwrap();
        let t = Table {
            row_ids: vec!["a".into(), "b".into()],
            columns: vec!["f1".into(), "f2".into()],
            values,
        };
        t.write(&path).unwrap();
        let back = Table::read(&path).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn comma_tables_are_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        fs::write(&path, "id,x,y\ns1,1,2\ns2,3,4\n").unwrap();
        let t = Table::read(&path).unwrap();
        assert_eq!(t.columns, vec!["x", "y"]);
        assert_eq!(t.values.as_slice(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn table_errors_carry_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.tsv");
        fs::write(&path, "id\tx\ns1\t1\ns1\t2\n").unwrap();
        let err = Table::read(&path).unwrap_err().to_string();
        assert!(err.contains(":3:") && err.contains("s1"), "{err}");
        fs::write(&path, "id\tx\ty\ns1\t1\n").unwrap();
        assert!(Table::read(&path).unwrap_err().to_string().contains(":2:"));
        fs::write(&path, "id\tx\ns1\tNaN\n").unwrap();
        assert!(Table::read(&path).unwrap_err().to_string().contains("NaN"));
    }

    #[test]
    fn labels_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("l.tsv");
        let ids = vec!["x".to_string(), "y".to_string()];
        write_labels(&path, &ids, &[3, 0]).unwrap();
        assert_eq!(read_labels(&path).unwrap(), vec![("x".into(), 3), ("y".into(), 0)]);
    }

    #[test]
    fn survival_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("surv.tsv");
        let recs = vec![
            SurvivalRecord {
                sample_id: "a".into(),
                duration: 0.1 + 0.2,
                event: true,
                group: 2,
            },
            SurvivalRecord {
                sample_id: "b".into(),
                duration: 3.0,
                event: false,
                group: 0,
            },
        ];
        write_survival(&path, &recs).unwrap();
        assert_eq!(read_survival(&path).unwrap(), recs);
        fs::write(&path, "id,time,event\nx,1.5,1\ny,2,maybe\n").unwrap();
        match read_survival(&path) {
            Err(SconeError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }
}
