//! JSON-lines datasets: one header line with the family spec, then one line per sample.
//!
//! ```text
//! {"format":"drws-dataset","version":1,"family":{...},"count":N,"seed":S}
//! {"theta":[...]}
//! {"theta":[...],"target":[...]}
//! ```

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::zoo::FamilySpec;

pub const DATASET_FORMAT: &str = "drws-dataset";
pub const DATASET_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetHeader {
    pub format: String,
    pub version: u32,
    pub family: FamilySpec,
    pub count: usize,
    /// Seed used to draw the parameters.
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_digest: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sample {
    pub theta: Vec<f64>,
    /// Cached high-accuracy fixed point.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub family: FamilySpec,
    pub seed: u64,
    pub config_digest: Option<String>,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(family: FamilySpec, seed: u64, thetas: Vec<Vec<f64>>) -> Self {
        Self {
            family,
            seed,
            config_digest: None,
            samples: thetas
                .into_iter()
                .map(|theta| Sample {
                    theta,
                    target: None,
                })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn thetas(&self) -> Vec<Vec<f64>> {
        self.samples.iter().map(|s| s.theta.clone()).collect()
    }

    /// All targets, or `None` if any sample lacks one.
    pub fn targets(&self) -> Option<Vec<Vec<f64>>> {
        self.samples.iter().map(|s| s.target.clone()).collect()
    }

    pub fn set_targets(&mut self, targets: Vec<Vec<f64>>) -> Result<()> {
        crate::linalg::check_len(self.samples.len(), targets.len())?;
        for (s, t) in self.samples.iter_mut().zip(targets) {
            s.target = Some(t);
        }
        Ok(())
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let header = DatasetHeader {
            format: DATASET_FORMAT.into(),
            version: DATASET_VERSION,
            family: self.family.clone(),
            count: self.samples.len(),
            seed: self.seed,
            config_digest: self.config_digest.clone(),
        };
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n")?;
        for s in &self.samples {
            serde_json::to_writer(&mut w, s)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from(r: impl BufRead) -> Result<Self> {
        let mut lines = r.lines();
        let first = lines
            .next()
            .ok_or_else(|| Error::InvalidData("dataset is empty".into()))??;
        let header: DatasetHeader = serde_json::from_str(&first)?;
        if header.format != DATASET_FORMAT || header.version != DATASET_VERSION {
            return Err(Error::InvalidData(format!(
                "unsupported dataset format {} v{}",
                header.format, header.version
            )));
        }
        let mut samples = Vec::with_capacity(header.count);
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            samples.push(serde_json::from_str::<Sample>(&line)?);
        }
        if samples.len() != header.count {
            return Err(Error::InvalidData(format!(
                "header announces {} samples, found {}",
                header.count,
                samples.len()
            )));
        }
        Ok(Self {
            family: header.family,
            seed: header.seed,
            config_digest: header.config_digest,
            samples,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(f))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(f))
    }
}
