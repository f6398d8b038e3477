//! JSON Lines files with a single header object on the first line.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

#[derive(Debug, thiserror::Error)]
pub enum JsonlError {
    #[error("Io: {0}")]
    Io(#[from] std::io::Error),
    #[error("JsonParse: line {line}: {source}")]
    Parse {
        line: usize,
        source: serde_json::Error,
    },
    #[error("MissingHeader: file has no header line")]
    MissingHeader,
}

pub fn write<H: Serialize, R: Serialize>(
    path: impl AsRef<Path>,
    header: &H,
    records: &[R],
) -> Result<(), JsonlError> {
    let mut out = BufWriter::new(File::create(path)?);
    write_line(&mut out, header)?;
    for record in records {
        write_line(&mut out, record)?;
    }
    out.flush()?;
    Ok(())
}

fn write_line<W: Write, T: Serialize>(out: &mut W, value: &T) -> Result<(), JsonlError> {
    serde_json::to_writer(&mut *out, value)
        .map_err(|source| JsonlError::Parse { line: 0, source })?;
    out.write_all(b"\n")?;
    Ok(())
}

pub fn read<H: DeserializeOwned, R: DeserializeOwned>(
    path: impl AsRef<Path>,
) -> Result<(H, Vec<R>), JsonlError> {
    let reader = BufReader::new(File::open(path)?);
    let mut header = None;
    let mut records = Vec::new();
    for (index, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse = |source| JsonlError::Parse {
            line: index + 1,
            source,
        };
        if header.is_none() {
            header = Some(serde_json::from_str(&line).map_err(parse)?);
        } else {
            records.push(serde_json::from_str(&line).map_err(parse)?);
        }
    }
    Ok((header.ok_or(JsonlError::MissingHeader)?, records))
}
