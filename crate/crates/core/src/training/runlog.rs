use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub stage: String,
    pub step: usize,
    pub loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l_con: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l_rec: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grad_cos: Option<f64>,
    pub timesteps: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub stage: String,
    pub step: usize,
    pub metrics: BTreeMap<String, f64>,
}

/// One line of a run log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Record {
    Header {
        mode: String,
        seed: u64,
        config: serde_json::Value,
    },
    Step(StepRecord),
    Eval(EvalRecord),
    Summary {
        stage: String,
        metrics: BTreeMap<String, f64>,
    },
}

/// Append-only list of records, optionally mirrored line by line to a file
/// that is flushed after every record.
#[derive(Debug, Default)]
pub struct RunLog {
    records: Vec<Record>,
    sink: Option<BufWriter<File>>,
}

impl RunLog {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn create(path: &Path) -> Result<Self> {
        Ok(Self {
            records: Vec::new(),
            sink: Some(BufWriter::new(File::create(path)?)),
        })
    }

    pub fn push(&mut self, record: Record) -> Result<()> {
        if let Some(w) = &mut self.sink {
            serde_json::to_writer(&mut *w, &record)?;
            w.write_all(b"\n")?;
            w.flush()?;
        }
        self.records.push(record);
        Ok(())
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn steps(&self) -> impl Iterator<Item = &StepRecord> {
        self.records.iter().filter_map(|r| match r {
            Record::Step(s) => Some(s),
            _ => None,
        })
    }

    pub fn evals(&self) -> impl Iterator<Item = &EvalRecord> {
        self.records.iter().filter_map(|r| match r {
            Record::Eval(e) => Some(e),
            _ => None,
        })
    }

    /// Parses line-delimited records. A final line without a newline that
    /// fails to parse is taken as a write cut short and dropped; any other
    /// malformed line is an error carrying its 1-based line number.
    pub fn parse(text: &str) -> Result<Vec<Record>> {
        let mut out = Vec::new();
        let complete = text.ends_with('\n');
        let lines: Vec<&str> = text.split_terminator('\n').collect();
        for (i, line) in lines.iter().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str::<Record>(line) {
                Ok(r) => out.push(r),
                Err(_) if i + 1 == lines.len() && !complete => break,
                Err(e) => {
                    return Err(Error::RunLog {
                        line: i + 1,
                        detail: e.to_string(),
                    })
                }
            }
        }
        Ok(out)
    }

    pub fn read(path: &Path) -> Result<Vec<Record>> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn from_records(records: Vec<Record>) -> Self {
        Self { records, sink: None }
    }
}
