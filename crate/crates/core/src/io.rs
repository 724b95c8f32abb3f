//! File formats: JSON documents, JSON-lines datasets, and CSV number
//! formatting. Every float is written with 17 significant digits so files
//! round-trip exactly and reruns are byte-identical.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::ser::{CompactFormatter, Formatter, PrettyFormatter};

use crate::env::{Dataset, PreferenceExample};
use crate::error::{Error, Result};

const DATASET_FORMAT: &str = "prefalign-dataset";
const DATASET_VERSION: u32 = 1;

/// Formats a float for CSV output.
pub fn fmt_f64(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        format!("{v}")
    }
}

macro_rules! forward_formatter {
    ($($name:ident),*) => {
        $(
            fn $name<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
                self.inner.$name(w)
            }
        )*
    };
}

/// Wraps a serde_json formatter, replacing its shortest-round-trip float
/// output with fixed 17-significant-digit scientific notation.
struct Digits17<F> {
    inner: F,
}

impl<F: Formatter> Formatter for Digits17<F> {
    fn write_f64<W: ?Sized + io::Write>(&mut self, w: &mut W, value: f64) -> io::Result<()> {
        write!(w, "{value:.16e}")
    }

    fn write_f32<W: ?Sized + io::Write>(&mut self, w: &mut W, value: f32) -> io::Result<()> {
        self.write_f64(w, value as f64)
    }

    fn begin_array_value<W: ?Sized + io::Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.inner.begin_array_value(w, first)
    }

    fn begin_object_key<W: ?Sized + io::Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.inner.begin_object_key(w, first)
    }

    forward_formatter!(begin_array, end_array, end_array_value, begin_object, end_object, begin_object_value, end_object_value);
}

fn serialize_with<T: Serialize, F: Formatter>(value: &T, inner: F) -> Result<String> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, Digits17 { inner });
    value
        .serialize(&mut ser)
        .map_err(|e| Error::Schema(format!("serialization failed: {e}")))?;
    Ok(String::from_utf8(buf).expect("serde_json emits UTF-8"))
}

/// Single-line JSON with 17-digit floats.
pub fn to_json_compact<T: Serialize>(value: &T) -> Result<String> {
    serialize_with(value, CompactFormatter)
}

/// Indented JSON with 17-digit floats.
pub fn to_json_pretty<T: Serialize>(value: &T) -> Result<String> {
    serialize_with(value, PrettyFormatter::new())
}

pub fn from_json_str<T: DeserializeOwned>(text: &str, what: &str) -> Result<T> {
    serde_json::from_str(text).map_err(|e| Error::Schema(format!("{what}: {e}")))
}

/// Writes `contents`, creating parent directories as needed.
pub fn write_text(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = to_json_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    from_json_str(&read_text(path)?, &path.display().to_string())
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetHeader {
    format: String,
    version: u32,
    seed: u64,
    num_examples: usize,
}

#[derive(Serialize)]
struct RecordOut<'a> {
    prompt: usize,
    chosen: usize,
    rejected: usize,
    z: u8,
    rating_gap: &'a Option<f64>,
}

/// Header line followed by one record per line.
pub fn dataset_to_string(ds: &Dataset) -> Result<String> {
    let header = DatasetHeader {
        format: DATASET_FORMAT.into(),
        version: DATASET_VERSION,
        seed: ds.seed,
        num_examples: ds.len(),
    };
    let mut out = to_json_compact(&header)?;
    out.push('\n');
    for e in &ds.examples {
        let rec = RecordOut {
            prompt: e.prompt,
            chosen: e.chosen,
            rejected: e.rejected,
            z: e.z,
            rating_gap: &e.rating_gap,
        };
        out.push_str(&to_json_compact(&rec)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn dataset_from_str(text: &str, what: &str) -> Result<Dataset> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, first) = lines
        .next()
        .ok_or_else(|| Error::Schema(format!("{what}: empty dataset file")))?;
    let header: DatasetHeader = from_json_str(first, &format!("{what}, header line"))?;
    if header.format != DATASET_FORMAT || header.version != DATASET_VERSION {
        return Err(Error::Schema(format!(
            "{what}: expected format {DATASET_FORMAT} v{DATASET_VERSION}, found {} v{}",
            header.format, header.version
        )));
    }
    let examples = lines
        .map(|(i, line)| from_json_str::<PreferenceExample>(line, &format!("{what}, line {}", i + 1)))
        .collect::<Result<Vec<_>>>()?;
    if examples.len() != header.num_examples {
        return Err(Error::Schema(format!(
            "{what}: header declares {} examples but {} records follow",
            header.num_examples,
            examples.len()
        )));
    }
    Ok(Dataset::new(examples, header.seed))
}

pub fn write_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    write_text(path, &dataset_to_string(ds)?)
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    dataset_from_str(&read_text(path)?, &path.display().to_string())
}

/// Streams CSV rows to a string buffer.
#[derive(Debug, Default, Clone)]
pub struct CsvBuffer {
    text: String,
}

impl CsvBuffer {
    pub fn with_header(columns: &[&str]) -> Self {
        let mut b = Self::default();
        b.row(columns.iter().map(|c| c.to_string()));
        b
    }

    pub fn row<I: IntoIterator<Item = String>>(&mut self, fields: I) {
        let line: Vec<String> = fields.into_iter().map(escape_csv).collect();
        self.text.push_str(&line.join(","));
        self.text.push('\n');
    }

    pub fn as_str(&self) -> &str {
        &self.text
    }

    pub fn into_string(self) -> String {
        self.text
    }
}

fn escape_csv(field: String) -> String {
    if field.contains([',', '"', '\n']) {
        format!("\"{}\"", field.replace('"', "\"\""))
    } else {
        field
    }
}

/// Writes to stdout, ignoring a closed pipe.
pub fn print_stdout(text: &str) {
    let mut out = io::stdout().lock();
    let _ = out.write_all(text.as_bytes());
    let _ = out.flush();
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{sample_dataset, EnvSpec, Environment, RatingModel};

    #[test]
    fn floats_use_17_digits_and_round_trip() {
        let v = vec![0.1, 1.0 / 3.0, -2.5e-300, 7.0];
        let s = to_json_compact(&v).unwrap();
        assert_eq!(s, "[1.0000000000000001e-1,3.3333333333333331e-1,-2.5000000000000000e-300,7.0000000000000000e0]");
        let back: Vec<f64> = serde_json::from_str(&s).unwrap();
        assert_eq!(back, v);
        assert_eq!(fmt_f64(0.5), "5.0000000000000000e-1");
    }

    #[test]
    fn environment_round_trip() {
        let env = EnvSpec::default().build().unwrap();
        let s = to_json_pretty(&env).unwrap();
        let back: Environment = from_json_str(&s, "env").unwrap();
        assert_eq!(to_json_pretty(&back).unwrap(), s);
    }

    #[test]
    fn dataset_round_trip_and_schema_errors() {
        let env = EnvSpec::default().build().unwrap();
        let mut ds = sample_dataset(&env, 25, &RatingModel::Gaussian { variance: 0.5 }, 3).unwrap();
        ds.examples[4].rating_gap = None;
        let text = dataset_to_string(&ds).unwrap();
        assert!(text.lines().nth(5).unwrap().ends_with("\"rating_gap\":null}"));
        assert_eq!(dataset_from_str(&text, "t").unwrap(), ds);

        let bad = text.replacen("\"chosen\"", "\"chosn\"", 1);
        let err = dataset_from_str(&bad, "t").unwrap_err();
        assert!(matches!(err, Error::Schema(ref m) if m.contains("line 2") && m.contains("chosn")), "{err}");
        let short: String = text.lines().take(3).map(|l| format!("{l}\n")).collect();
        assert!(matches!(dataset_from_str(&short, "t"), Err(Error::Schema(_))));
    }

    #[test]
    fn csv_escaping() {
        let mut b = CsvBuffer::with_header(&["a", "b"]);
        b.row(["x,y".to_string(), "q\"".to_string()]);
        assert_eq!(b.as_str(), "a,b\n\"x,y\",\"q\"\"\"\n");
    }
}
