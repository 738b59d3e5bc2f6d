//! Tab-separated and JSON table output.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};

/// A row type with a fixed column layout.
pub trait Tabular {
    fn header() -> Vec<&'static str>;
    fn cells(&self) -> Vec<String>;
}

/// Renders rows as tab-separated text with a header line.
pub fn to_tsv<T: Tabular>(rows: &[T]) -> String {
    let mut out = T::header().join("\t");
    out.push('\n');
    for r in rows {
        out.push_str(&r.cells().join("\t"));
        out.push('\n');
    }
    out
}

pub fn write_tsv<T: Tabular>(rows: &[T], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, to_tsv(rows)).map_err(|e| Error::io(path, e))
}

/// Pretty-printed JSON of any serializable value.
pub fn write_json<T: Serialize + ?Sized>(value: &T, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| Error::io(path, e.into()))?;
    writeln!(w).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Row(u32, &'static str);

    impl Tabular for Row {
        fn header() -> Vec<&'static str> {
            vec!["n", "name"]
        }
        fn cells(&self) -> Vec<String> {
            vec![self.0.to_string(), self.1.to_string()]
        }
    }

    #[test]
    fn tsv_layout() {
        assert_eq!(to_tsv(&[Row(1, "a"), Row(2, "b")]), "n\tname\n1\ta\n2\tb\n");
        assert_eq!(to_tsv::<Row>(&[]), "n\tname\n");
    }
}
