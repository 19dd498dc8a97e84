//! Line-delimited JSON record streams.
//!
//! Every file format in the toolkit is one flat JSON object per line,
//! UTF-8, `\n` terminated. Blank lines are skipped. Serialization is
//! compact with struct field order, so a file written by [`write_records`]
//! is canonical and re-writes byte-identically.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

/// One non-blank line from a record stream, with its 1-based line number.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Line {
    pub number: usize,
    pub text: String,
}

/// Iterates the non-blank lines of a reader, keeping line numbers.
pub fn lines<R: Read>(reader: R) -> impl Iterator<Item = io::Result<Line>> {
    BufReader::new(reader)
        .lines()
        .enumerate()
        .filter_map(|(idx, line)| match line {
            Ok(text) if text.trim().is_empty() => None,
            Ok(text) => Some(Ok(Line { number: idx + 1, text })),
            Err(e) => Some(Err(e)),
        })
}

/// Decodes one line as a JSON object of type `T`.
pub fn decode<T: DeserializeOwned>(line: &Line) -> Result<T, String> {
    serde_json::from_str(&line.text).map_err(|e| e.to_string())
}

/// Encodes a record as a single compact JSON line (no trailing newline).
pub fn encode<T: Serialize>(record: &T) -> String {
    // Record types are plain structs of strings, numbers and maps; these
    // always serialize.
    serde_json::to_string(record).expect("record serializes to JSON")
}

pub fn write_records<'a, T, W, I>(writer: W, records: I) -> io::Result<()>
where
    T: Serialize + 'a,
    W: Write,
    I: IntoIterator<Item = &'a T>,
{
    let mut out = BufWriter::new(writer);
    for record in records {
        out.write_all(encode(record).as_bytes())?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

pub fn write_records_to_path<'a, T, I>(path: &Path, records: I) -> io::Result<()>
where
    T: Serialize + 'a,
    I: IntoIterator<Item = &'a T>,
{
    write_records(File::create(path)?, records)
}
