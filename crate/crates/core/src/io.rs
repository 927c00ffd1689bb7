//! On-disk formats: dataset CSVs and manifest, flag and round tables, JSON.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::dims::DimTable;
use crate::error::Error;
use crate::federation::TrainReport;
use crate::inference::FlagRecord;
use crate::synthetic::{Dataset, Episode};

pub const DATASET_MANIFEST: &str = "dataset.json";

pub fn ensure_dir(dir: &Path) -> Result<(), Error> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<(), Error> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::format(path, e))?;
    s.push('\n');
    write_text(path, &s)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, Error> {
    let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&s).map_err(|e| Error::format(path, e))
}

pub fn write_text(path: &Path, s: &str) -> Result<(), Error> {
    if let Some(parent) = path.parent() {
        ensure_dir(parent)?;
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>, Error> {
    if let Some(parent) = path.parent() {
        ensure_dir(parent)?;
    }
    csv::Writer::from_path(path).map_err(|e| Error::format(path, e))
}

/// Writes string rows under a header.
pub fn write_csv<I, R>(path: &Path, header: &[String], rows: I) -> Result<(), Error>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator<Item = String>,
{
    let mut w = csv_writer(path)?;
    w.write_record(header).map_err(|e| Error::format(path, e))?;
    for r in rows {
        w.write_record(r).map_err(|e| Error::format(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

/// Per-split schedule in the dataset manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub name: String,
    pub steps: usize,
    /// Labels; `None` for unlabelled external data.
    #[serde(default)]
    pub episodes: Option<Vec<Episode>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub clients: usize,
    pub state_dims: Vec<usize>,
    pub obs_dims: Vec<usize>,
    #[serde(default)]
    pub seed: Option<u64>,
    /// SHA-256 of the true maps, for generated data.
    #[serde(default)]
    pub checksum: Option<String>,
    pub splits: Vec<SplitManifest>,
}

pub fn client_csv(dir: &Path, split: &str, m: usize) -> PathBuf {
    dir.join(split).join(format!("client_{m}.csv"))
}

/// One CSV per client: `t,y_1..y_D`.
pub fn write_split(dir: &Path, name: &str, data: &Dataset) -> Result<SplitManifest, Error> {
    for (m, series) in data.obs.iter().enumerate() {
        let d = data.observations.dim(m);
        let header: Vec<String> = std::iter::once("t".to_string())
            .chain((1..=d).map(|i| format!("y_{i}")))
            .collect();
        let rows = series
            .iter()
            .enumerate()
            .map(|(t, y)| std::iter::once(t.to_string()).chain(y.iter().map(f64::to_string)).collect::<Vec<_>>());
        write_csv(&client_csv(dir, name, m), &header, rows)?;
    }
    Ok(SplitManifest {
        name: name.to_string(),
        steps: data.steps(),
        episodes: Some(data.episodes.clone()),
    })
}

pub fn write_dataset(dir: &Path, manifest: &DatasetManifest, splits: &[(&str, &Dataset)]) -> Result<(), Error> {
    ensure_dir(dir)?;
    let mut manifest = manifest.clone();
    manifest.splits = splits
        .iter()
        .map(|(name, d)| write_split(dir, name, d))
        .collect::<Result<_, _>>()?;
    write_json(&dir.join(DATASET_MANIFEST), &manifest)
}

fn read_client_csv(path: &Path, dim: usize) -> Result<Vec<Vec<f64>>, Error> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::format(path, e))?;
    let header = r.headers().map_err(|e| Error::format(path, e))?;
    if header.len() != dim + 1 || &header[0] != "t" {
        return Err(Error::format(path, format!("expected header t,y_1..y_{dim}, got {} columns", header.len())));
    }
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| Error::format(path, e))?;
        let t: usize = rec[0].trim().parse().map_err(|e| Error::format(path, format!("row {i}: bad t: {e}")))?;
        if t != i {
            return Err(Error::format(path, format!("row {i}: t = {t}, rows must be consecutive from 0")));
        }
        let y = rec
            .iter()
            .skip(1)
            .map(|s| {
                let v: f64 = s.trim().parse().map_err(|e| Error::format(path, format!("row {i}: {e}")))?;
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(Error::format(path, format!("row {i}: non-finite value")))
                }
            })
            .collect::<Result<Vec<_>, _>>()?;
        out.push(y);
    }
    Ok(out)
}

/// Reads one split back; works for generated and external datasets alike.
pub fn read_split(dir: &Path, manifest: &DatasetManifest, name: &str) -> Result<Dataset, Error> {
    let split = manifest
        .splits
        .iter()
        .find(|s| s.name == name)
        .ok_or_else(|| Error::format(dir.join(DATASET_MANIFEST), format!("no split named {name:?}")))?;
    if manifest.state_dims.len() != manifest.clients || manifest.obs_dims.len() != manifest.clients {
        return Err(Error::format(dir.join(DATASET_MANIFEST), "dimension lists must have one entry per client"));
    }
    let obs = (0..manifest.clients)
        .map(|m| {
            let path = client_csv(dir, name, m);
            let series = read_client_csv(&path, manifest.obs_dims[m])?;
            if series.len() != split.steps {
                return Err(Error::format(&path, format!("{} rows, manifest says {}", series.len(), split.steps)));
            }
            Ok(series)
        })
        .collect::<Result<Vec<_>, Error>>()?;
    Ok(Dataset {
        states: DimTable::new(manifest.state_dims.clone()),
        observations: DimTable::new(manifest.obs_dims.clone()),
        obs,
        x: Vec::new(),
        episodes: split.episodes.clone().unwrap_or_default(),
    })
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest, Error> {
    read_json(&dir.join(DATASET_MANIFEST))
}

fn opt_bool(b: Option<bool>) -> String {
    b.map_or_else(String::new, |b| u8::from(b).to_string())
}

/// `t,client,d2_c,d2_a,z_c,z_a,zt_c,zt_a,class`; channels a method lacks
/// are blank.
pub fn write_flags(path: &Path, flags: &[Vec<crate::pipeline::StepFlags>]) -> Result<(), Error> {
    let header: Vec<String> = ["t", "client", "d2_c", "d2_a", "z_c", "z_a", "zt_c", "zt_a", "class"]
        .map(String::from)
        .to_vec();
    let steps = flags.first().map_or(0, Vec::len);
    let rows = (0..steps).flat_map(|t| {
        flags.iter().enumerate().map(move |(m, f)| {
            let f = &f[t];
            vec![
                t.to_string(),
                m.to_string(),
                fmt_opt(f.d2_c),
                fmt_opt(f.d2_a),
                opt_bool(f.z_c),
                opt_bool(f.z_a),
                opt_bool(f.zt_c),
                opt_bool(f.zt_a),
                f.class.map_or_else(String::new, |c| c.as_str().to_string()),
            ]
        })
    });
    write_csv(path, &header, rows)
}

/// Full-field flag records, as produced by [`crate::pipeline::Evaluation::records`].
pub fn write_flag_records(path: &Path, records: &[FlagRecord]) -> Result<(), Error> {
    let header: Vec<String> = ["t", "client", "d2_c", "d2_a", "z_c", "z_a", "zt_c", "zt_a", "class"]
        .map(String::from)
        .to_vec();
    let rows = records.iter().map(|r| {
        vec![
            r.t.to_string(),
            r.client.to_string(),
            r.d2_c.to_string(),
            r.d2_a.to_string(),
            u8::from(r.z_c).to_string(),
            u8::from(r.z_a).to_string(),
            u8::from(r.zt_c).to_string(),
            u8::from(r.zt_a).to_string(),
            r.class.as_str().to_string(),
        ]
    });
    write_csv(path, &header, rows)
}

/// `round,L_s,L_0..L_{M-1},bytes_up,bytes_down`.
pub fn write_rounds(path: &Path, report: &TrainReport) -> Result<(), Error> {
    let m = report.rounds.first().map_or(0, |r| r.local_losses.len());
    let header: Vec<String> = ["round".to_string(), "L_s".to_string()]
        .into_iter()
        .chain((0..m).map(|i| format!("L_{i}")))
        .chain(["bytes_up".to_string(), "bytes_down".to_string()])
        .collect();
    let rows = report.rounds.iter().map(|r| {
        [r.round.to_string(), r.server_loss.to_string()]
            .into_iter()
            .chain(r.local_losses.iter().map(f64::to_string))
            .chain([r.bytes_up.to_string(), r.bytes_down.to_string()])
            .collect::<Vec<_>>()
    });
    write_csv(path, &header, rows)
}

/// Moves whatever a failed command left in `dir` into `dir/quarantine`.
pub fn quarantine(dir: &Path) -> Result<Option<PathBuf>, Error> {
    if !dir.is_dir() {
        return Ok(None);
    }
    let q = dir.join("quarantine");
    let entries: Vec<_> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok())
        .filter(|e| e.file_name() != "quarantine")
        .collect();
    if entries.is_empty() {
        return Ok(None);
    }
    if q.exists() {
        fs::remove_dir_all(&q).map_err(|e| Error::io(&q, e))?;
    }
    ensure_dir(&q)?;
    for e in entries {
        let to = q.join(e.file_name());
        fs::rename(e.path(), &to).map_err(|err| Error::io(e.path(), err))?;
    }
    Ok(Some(q))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Dataset {
        Dataset {
            states: DimTable::homogeneous(2, 1),
            observations: DimTable::new(vec![1, 2]),
            obs: vec![
                vec![vec![0.5], vec![-1.25]],
                vec![vec![1.0, 0.1], vec![2.0, 1e-17]],
            ],
            x: Vec::new(),
            episodes: Vec::new(),
        }
    }

    #[test]
    fn dataset_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let d = tiny();
        let manifest = DatasetManifest {
            clients: 2,
            state_dims: vec![1, 1],
            obs_dims: vec![1, 2],
            seed: Some(3),
            checksum: None,
            splits: Vec::new(),
        };
        write_dataset(dir.path(), &manifest, &[("test", &d)]).unwrap();
        let m = read_manifest(dir.path()).unwrap();
        let back = read_split(dir.path(), &m, "test").unwrap();
        assert_eq!(back.obs, d.obs);
        assert!(read_split(dir.path(), &m, "train").is_err());
        let text = fs::read_to_string(client_csv(dir.path(), "test", 1)).unwrap();
        assert!(text.starts_with("t,y_1,y_2\n"));
    }

    #[test]
    fn malformed_csv_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.csv");
        fs::write(&p, "t,y_1\n0,1.0\n2,3.0\n").unwrap();
        assert!(read_client_csv(&p, 1).is_err());
        fs::write(&p, "t,y_1\n0,nan\n").unwrap();
        assert!(read_client_csv(&p, 1).is_err());
        fs::write(&p, "t,y_1,y_2\n0,1,2\n").unwrap();
        assert!(read_client_csv(&p, 1).is_err());
    }

    #[test]
    fn quarantine_moves_partial_outputs() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("a.json"), "{}").unwrap();
        let q = quarantine(dir.path()).unwrap().unwrap();
        assert!(q.join("a.json").exists());
        assert!(!dir.path().join("a.json").exists());
    }
}
