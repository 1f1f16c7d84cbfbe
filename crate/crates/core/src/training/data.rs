//! Line-delimited JSON datasets: one record per line, either a preference
//! triple `{prompt, chosen, rejected}` or a scored response
//! `{prompt, response, reward}`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::{TokenId, Vocabulary};

/// `(x, y_w, y_l)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreferenceExample {
    pub prompt: Vec<TokenId>,
    pub chosen: Vec<TokenId>,
    pub rejected: Vec<TokenId>,
}

impl PreferenceExample {
    pub fn validate(&self, vocab: &Vocabulary) -> Result<()> {
        if self.chosen == self.rejected {
            return Err(Error::Input("chosen and rejected responses are identical".into()));
        }
        if self.prompt.is_empty() {
            return Err(Error::Input("empty prompt".into()));
        }
        for (name, r) in [("chosen", &self.chosen), ("rejected", &self.rejected)] {
            if r.last() != Some(&vocab.eos()) {
                return Err(Error::Input(format!("{name} response is not eos-terminated")));
            }
            if r[..r.len() - 1].contains(&vocab.eos()) {
                return Err(Error::Input(format!("{name} response has eos before its end")));
            }
        }
        if let Some(t) = self.prompt.iter().chain(&self.chosen).chain(&self.rejected).find(|&&t| !vocab.contains(t)) {
            return Err(Error::Input(format!("token {t} outside vocabulary")));
        }
        Ok(())
    }
}

/// A response with a scalar regression target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoredResponse {
    pub prompt: Vec<TokenId>,
    pub response: Vec<TokenId>,
    pub reward: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DatasetRecord {
    Preference(PreferenceExample),
    Scored(ScoredResponse),
}

fn write_lines<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records(path: impl AsRef<Path>) -> Result<Vec<DatasetRecord>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::MissingArtifact(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec =
            serde_json::from_str(&line).map_err(|e| Error::Input(format!("{}:{}: {e}", path.display(), n + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

pub fn read_preferences(path: impl AsRef<Path>) -> Result<Vec<PreferenceExample>> {
    read_records(path)?
        .into_iter()
        .map(|r| match r {
            DatasetRecord::Preference(p) => Ok(p),
            DatasetRecord::Scored(_) => {
                Err(Error::Input("expected preference records, found a scored response".into()))
            }
        })
        .collect()
}

pub fn read_scored(path: impl AsRef<Path>) -> Result<Vec<ScoredResponse>> {
    read_records(path)?
        .into_iter()
        .map(|r| match r {
            DatasetRecord::Scored(s) => Ok(s),
            DatasetRecord::Preference(_) => Err(Error::Input("expected scored responses, found a preference".into())),
        })
        .collect()
}

pub fn write_preferences(path: impl AsRef<Path>, data: &[PreferenceExample]) -> Result<()> {
    write_lines(path.as_ref(), data)
}

pub fn write_scored(path: impl AsRef<Path>, data: &[ScoredResponse]) -> Result<()> {
    write_lines(path.as_ref(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn records_parse_by_shape() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        std::fs::write(
            &p,
            "{\"prompt\":[0,2],\"chosen\":[3,1],\"rejected\":[4,1]}\n\n{\"prompt\":[0],\"response\":[2,1],\"reward\":0.5}\n",
        )
        .unwrap();
        let recs = read_records(&p).unwrap();
        assert!(matches!(recs[0], DatasetRecord::Preference(_)));
        assert!(matches!(recs[1], DatasetRecord::Scored(_)));
        assert!(read_preferences(&p).is_err());
    }

    #[test]
    fn preference_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("prefs.jsonl");
        let data = vec![PreferenceExample { prompt: vec![0, 2], chosen: vec![3, 1], rejected: vec![2, 2, 1] }];
        write_preferences(&p, &data).unwrap();
        assert_eq!(read_preferences(&p).unwrap(), data);
    }

    #[test]
    fn preference_validation() {
        let v = Vocabulary::with_size(5).unwrap();
        let ok = PreferenceExample { prompt: vec![0], chosen: vec![2, 1], rejected: vec![3, 1] };
        assert!(ok.validate(&v).is_ok());
        let same = PreferenceExample { rejected: vec![2, 1], ..ok.clone() };
        assert!(same.validate(&v).is_err());
        let open = PreferenceExample { chosen: vec![2], ..ok.clone() };
        assert!(open.validate(&v).is_err());
        let empty = PreferenceExample { chosen: vec![], ..ok };
        assert!(empty.validate(&v).is_err());
    }

    #[test]
    fn missing_file_is_a_missing_artifact() {
        assert!(matches!(read_records("/nonexistent/x.jsonl"), Err(Error::MissingArtifact(_))));
    }
}
