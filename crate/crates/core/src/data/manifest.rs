use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::audio::{frame_waveform, normalize_duration, read_wav};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::training::Example;

/// Tolerance when cross-checking stated `mos`/`sigma` against ratings.
pub const RATING_CHECK_TOL: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct RatedUtterance {
    pub audio_path: String,
    pub mu: f64,
    pub sigma: Option<f64>,
    pub ratings: Option<Vec<f64>>,
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub entries: Vec<RatedUtterance>,
    /// Base for relative audio paths.
    pub root_dir: PathBuf,
}

#[derive(Clone, Copy)]
enum Column {
    Path,
    Mos,
    Sigma,
    Ratings,
}

fn in_scale(v: f64) -> bool {
    (1.0..=5.0).contains(&v)
}

impl Manifest {
    pub fn new(entries: Vec<RatedUtterance>, root_dir: impl Into<PathBuf>) -> Self {
        Self {
            entries,
            root_dir: root_dir.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Reads a manifest; relative audio paths resolve against `root_dir`,
    /// or against the manifest's own directory when `root_dir` is `None`.
    pub fn read(path: impl AsRef<Path>, root_dir: Option<&Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let root = match root_dir {
            Some(r) => r.to_path_buf(),
            None => path.parent().map(Path::to_path_buf).unwrap_or_default(),
        };
        Self::parse(&text, path, root)
    }

    /// Parses manifest text; `source` only labels error messages.
    pub fn parse(text: &str, source: &Path, root_dir: PathBuf) -> Result<Self> {
        let err = |row: usize, msg: String| Error::Parse {
            path: source.to_path_buf(),
            row,
            msg,
        };
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .flexible(true)
            .trim(csv::Trim::All)
            .comment(Some(b'#'))
            .from_reader(text.as_bytes());

        let header = reader.headers().map_err(|e| err(1, e.to_string()))?.clone();
        let mut columns = Vec::with_capacity(header.len());
        for name in header.iter() {
            columns.push(match name {
                "path" => Column::Path,
                "mos" => Column::Mos,
                "sigma" => Column::Sigma,
                "ratings" => Column::Ratings,
                other => return Err(err(1, format!("unknown column {other:?}"))),
            });
        }
        if header.get(0) != Some("path") || header.get(1) != Some("mos") {
            return Err(err(1, "header must start with path,mos".into()));
        }

        let mut entries: Vec<RatedUtterance> = Vec::new();
        let mut seen = std::collections::HashSet::new();
        for record in reader.records() {
            let record = record.map_err(|e| {
                let row = e.position().map_or(0, |p| p.line() as usize);
                err(row, e.to_string())
            })?;
            let row = record.position().map_or(0, |p| p.line() as usize);
            if record.len() > columns.len() {
                return Err(err(
                    row,
                    format!("{} fields for {} columns", record.len(), columns.len()),
                ));
            }
            let (mut audio, mut mos, mut sigma, mut ratings) = (None, None, None, None);
            for (col, field) in columns.iter().zip(record.iter()) {
                if field.is_empty() {
                    continue;
                }
                let num = |what: &str, s: &str| {
                    s.parse::<f64>()
                        .ok()
                        .filter(|v| v.is_finite())
                        .ok_or_else(|| err(row, format!("{what} {s:?} is not a number")))
                };
                match col {
                    Column::Path => audio = Some(field.to_string()),
                    Column::Mos => mos = Some(num("mos", field)?),
                    Column::Sigma => sigma = Some(num("sigma", field)?),
                    Column::Ratings => {
                        ratings = Some(
                            field
                                .split(';')
                                .map(|r| num("rating", r.trim()))
                                .collect::<Result<Vec<f64>>>()?,
                        )
                    }
                }
            }
            let audio = audio.ok_or_else(|| err(row, "missing path".into()))?;
            if let Some(s) = sigma {
                if s < 0.0 {
                    return Err(err(row, format!("sigma {s} is negative")));
                }
            }
            if let Some(rs) = &ratings {
                if let Some(r) = rs.iter().find(|r| !in_scale(**r)) {
                    return Err(err(row, format!("rating {r} outside [1, 5]")));
                }
                let (m, s) = mean_std(rs);
                if let Some(given) = mos {
                    if (given - m).abs() > RATING_CHECK_TOL {
                        return Err(err(
                            row,
                            format!("mos {given} disagrees with rating mean {m}"),
                        ));
                    }
                }
                if let Some(given) = sigma {
                    if (given - s).abs() > RATING_CHECK_TOL {
                        return Err(err(
                            row,
                            format!("sigma {given} disagrees with rating std {s}"),
                        ));
                    }
                }
                mos = Some(m);
                sigma = Some(s);
            }
            let mu = mos.ok_or_else(|| err(row, "missing mos".into()))?;
            if !in_scale(mu) {
                return Err(err(row, format!("mos {mu} outside [1, 5]")));
            }
            if !seen.insert(audio.clone()) {
                return Err(err(row, format!("duplicate path {audio}")));
            }
            entries.push(RatedUtterance {
                audio_path: audio,
                mu,
                sigma,
                ratings,
            });
        }
        Ok(Self { entries, root_dir })
    }

    /// CSV text with a `path,mos,sigma,ratings` header.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let fmt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        w.write_record(["path", "mos", "sigma", "ratings"])
            .expect("in-memory write");
        for e in &self.entries {
            let ratings = e
                .ratings
                .as_ref()
                .map(|rs| rs.iter().map(f64::to_string).collect::<Vec<_>>().join(";"))
                .unwrap_or_default();
            w.write_record([
                e.audio_path.clone(),
                e.mu.to_string(),
                fmt(e.sigma),
                ratings,
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields")
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn resolve(&self, entry: &RatedUtterance) -> PathBuf {
        let p = Path::new(&entry.audio_path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root_dir.join(p)
        }
    }

    /// Loads, pads or truncates to the model duration, and frames every
    /// entry. Output order follows the manifest.
    pub fn load_examples(&self, cfg: &ModelConfig) -> Result<Vec<Example>> {
        self.entries
            .par_iter()
            .map(|e| {
                let w = read_wav(self.resolve(e))?;
                let w = normalize_duration(&w, cfg.duration_s);
                Ok(Example {
                    name: e.audio_path.clone(),
                    frames: frame_waveform(&w, cfg.frame_ms(), cfg.hop_ms())?,
                    mu: e.mu,
                    sigma: e.sigma,
                })
            })
            .collect()
    }
}
