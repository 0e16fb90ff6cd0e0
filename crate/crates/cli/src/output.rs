//! Artifact writers. CSV files always start with their header row; JSON
//! files are an envelope `{schema, command, result}` whose `schema` names the
//! layout of `result`.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::Failure;

pub struct OutDir(PathBuf);

impl OutDir {
    pub fn create(path: &Path) -> Result<Self, Failure> {
        fs::create_dir_all(path).map_err(|e| Failure::Setup(format!("cannot create output directory {}: {e}", path.display())))?;
        Ok(Self(path.to_path_buf()))
    }

    fn open(&self, name: &str) -> Result<BufWriter<File>, Failure> {
        let p = self.0.join(name);
        File::create(&p).map(BufWriter::new).map_err(|e| Failure::Setup(format!("cannot write {}: {e}", p.display())))
    }

    /// Runs a library CSV writer against `name`.
    pub fn with<F>(&self, name: &str, write: F) -> Result<(), Failure>
    where
        F: FnOnce(&mut BufWriter<File>) -> moe_scaling::Result<()>,
    {
        let mut f = self.open(name)?;
        write(&mut f).and_then(|_| f.flush().map_err(Into::into)).map_err(|e| Failure::Setup(format!("cannot write {name}: {e}")))
    }

    pub fn csv<I>(&self, name: &str, header: &[&str], rows: I) -> Result<(), Failure>
    where
        I: IntoIterator<Item = Vec<String>>,
    {
        self.with(name, |f| {
            let mut w = csv::Writer::from_writer(f);
            w.write_record(header)?;
            for r in rows {
                debug_assert_eq!(r.len(), header.len());
                w.write_record(&r)?;
            }
            w.flush()?;
            Ok(())
        })
    }

    pub fn json<T: Serialize>(&self, name: &str, schema: &str, command: &str, result: &T) -> Result<(), Failure> {
        #[derive(Serialize)]
        struct Envelope<'a, T> {
            schema: &'a str,
            command: &'a str,
            result: &'a T,
        }
        self.with(name, |f| {
            serde_json::to_writer_pretty(&mut *f, &Envelope { schema, command, result })?;
            f.write_all(b"\n")?;
            Ok(())
        })
    }
}

pub fn num(v: f64) -> String {
    v.to_string()
}

pub fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_has_header_even_without_rows() {
        let dir = tempfile::tempdir().unwrap();
        let out = OutDir::create(&dir.path().join("nested")).unwrap();
        out.csv("a.csv", &["x", "y"], Vec::<Vec<String>>::new()).unwrap();
        assert_eq!(fs::read_to_string(dir.path().join("nested/a.csv")).unwrap(), "x,y\n");
    }

    #[test]
    fn json_envelope_leads_with_schema() {
        let dir = tempfile::tempdir().unwrap();
        let out = OutDir::create(dir.path()).unwrap();
        out.json("s.json", "demo/v1", "demo", &vec![1.5, f64::NAN]).unwrap();
        let text = fs::read_to_string(dir.path().join("s.json")).unwrap();
        assert!(text.starts_with("{\n  \"schema\": \"demo/v1\""));
        assert!(text.contains("null"));
    }

    #[test]
    fn numbers_round_trip() {
        assert_eq!(num(0.1).parse::<f64>().unwrap(), 0.1);
        assert_eq!(opt(None), "");
    }
}
