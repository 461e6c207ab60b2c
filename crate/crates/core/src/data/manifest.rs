//! Manifest + CSV ingestion and the matching writer.
//!
//! Layout on disk: a TOML manifest naming one CSV per modality plus a
//! labels CSV. The labels file is the sample spine: its row order is
//! the dataset's sample order, and modality rows are joined to it by
//! sample id. Empty label cells are missing labels; cluster tasks
//! carry no label column.

use crate::data::dataset::{Dataset, ModalitySchema, ProblemClass, Sample, TaskSpec};
use crate::error::{Error, Result};
use crate::ioutil::atomic_write;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestModality {
    pub name: String,
    pub dim: usize,
    pub file: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub sample_id_column: String,
    pub patient_id_column: String,
    pub labels_file: String,
    pub modalities: Vec<ManifestModality>,
    pub tasks: Vec<TaskSpec>,
}

impl Manifest {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Format(format!("cannot read manifest {}: {e}", path.display())))?;
        toml::from_str(&text)
            .map_err(|e| Error::Format(format!("manifest {}: {e}", path.display())))
    }
}

/// Loads and validates a dataset from a manifest file.
pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let manifest = Manifest::from_path(manifest_path)?;
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));

    let schemas: Vec<ModalitySchema> = manifest
        .modalities
        .iter()
        .map(|m| ModalitySchema {
            name: m.name.clone(),
            dim: m.dim,
        })
        .collect();

    let mut modality_rows: Vec<HashMap<String, Vec<f64>>> =
        Vec::with_capacity(manifest.modalities.len());
    for m in &manifest.modalities {
        modality_rows.push(read_embedding_csv(&base.join(&m.file), &m.file, m.dim)?);
    }

    let labels_path = base.join(&manifest.labels_file);
    let mut reader = csv::Reader::from_path(&labels_path)
        .map_err(|e| Error::Format(format!("cannot read {}: {e}", manifest.labels_file)))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Format(format!("{}: {e}", manifest.labels_file)))?
        .clone();
    let col = |name: &str| -> Result<usize> {
        headers.iter().position(|h| h == name).ok_or_else(|| {
            Error::Format(format!(
                "{}: missing column {name}",
                manifest.labels_file
            ))
        })
    };
    let sid_col = col(&manifest.sample_id_column)?;
    let pid_col = col(&manifest.patient_id_column)?;
    let mut task_cols = Vec::with_capacity(manifest.tasks.len());
    for t in &manifest.tasks {
        if t.class == ProblemClass::Cluster {
            task_cols.push(None);
        } else {
            task_cols.push(Some(col(&t.name)?));
        }
    }

    let mut samples = Vec::new();
    let mut seen_ids = std::collections::HashSet::new();
    for (row_idx, record) in reader.records().enumerate() {
        let row_no = row_idx + 1;
        let record =
            record.map_err(|e| Error::Format(format!("{} row {row_no}: {e}", manifest.labels_file)))?;
        let field = |c: usize| -> Result<&str> {
            record.get(c).ok_or_else(|| {
                Error::Format(format!(
                    "{} row {row_no}: missing field {c}",
                    manifest.labels_file
                ))
            })
        };
        let sample_id = field(sid_col)?.to_string();
        let patient_id = field(pid_col)?.to_string();
        if !seen_ids.insert(sample_id.clone()) {
            return Err(Error::Format(format!(
                "{} row {row_no}: duplicate sample_id {sample_id}",
                manifest.labels_file
            )));
        }
        let mut labels = Vec::with_capacity(manifest.tasks.len());
        for (t, c) in manifest.tasks.iter().zip(&task_cols) {
            match c {
                None => labels.push(None),
                Some(c) => {
                    let cell = field(*c)?;
                    if cell.is_empty() {
                        labels.push(None);
                    } else {
                        let v: f64 = cell.parse().map_err(|_| {
                            Error::Format(format!(
                                "{} row {row_no}: task {} value {cell:?} is not a number",
                                manifest.labels_file, t.name
                            ))
                        })?;
                        labels.push(Some(v));
                    }
                }
            }
        }
        let mut embeddings = Vec::with_capacity(manifest.modalities.len());
        for (m, rows) in manifest.modalities.iter().zip(&modality_rows) {
            let emb = rows.get(&sample_id).ok_or_else(|| {
                Error::Format(format!(
                    "{}: no row for sample_id {sample_id}",
                    m.file
                ))
            })?;
            embeddings.push(emb.clone());
        }
        samples.push(Sample {
            sample_id,
            patient_id,
            embeddings,
            labels,
        });
    }

    Dataset::new(schemas, manifest.tasks.clone(), samples)
}

fn read_embedding_csv(path: &Path, file: &str, dim: usize) -> Result<HashMap<String, Vec<f64>>> {
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| Error::Format(format!("cannot read {file}: {e}")))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Format(format!("{file}: {e}")))?;
    if headers.len() != dim + 1 {
        return Err(Error::Format(format!(
            "{file}: header has {} columns, expected sample_id plus {dim} features",
            headers.len()
        )));
    }
    let mut out = HashMap::new();
    for (row_idx, record) in reader.records().enumerate() {
        let row_no = row_idx + 1;
        let record = record.map_err(|e| Error::Format(format!("{file} row {row_no}: {e}")))?;
        if record.len() != dim + 1 {
            return Err(Error::Format(format!(
                "{file} row {row_no}: {} embedding values, manifest says {dim}",
                record.len().saturating_sub(1)
            )));
        }
        let sample_id = record.get(0).unwrap_or_default().to_string();
        let mut emb = Vec::with_capacity(dim);
        for i in 0..dim {
            let cell = record.get(i + 1).unwrap_or_default();
            let v: f64 = cell.parse().map_err(|_| {
                Error::Format(format!(
                    "{file} row {row_no}: value {cell:?} is not a number"
                ))
            })?;
            emb.push(v);
        }
        if out.insert(sample_id.clone(), emb).is_some() {
            return Err(Error::Format(format!(
                "{file} row {row_no}: duplicate sample_id {sample_id}"
            )));
        }
    }
    Ok(out)
}

/// Writes a dataset as manifest + CSVs into `dir`; returns the
/// manifest path. `load_dataset` on the result reproduces the dataset
/// exactly (floats are printed with their shortest round-trip form).
pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let manifest = Manifest {
        sample_id_column: "sample_id".into(),
        patient_id_column: "patient_id".into(),
        labels_file: "labels.csv".into(),
        modalities: ds
            .schemas()
            .iter()
            .map(|s| ManifestModality {
                name: s.name.clone(),
                dim: s.dim,
                file: format!("{}.csv", s.name),
            })
            .collect(),
        tasks: ds.tasks().to_vec(),
    };

    for (mi, m) in manifest.modalities.iter().enumerate() {
        let mut text = String::from("sample_id");
        for f in 0..m.dim {
            text.push_str(&format!(",f{f}"));
        }
        text.push('\n');
        for s in ds.samples() {
            text.push_str(&s.sample_id);
            for v in &s.embeddings[mi] {
                text.push(',');
                text.push_str(&format_float(*v));
            }
            text.push('\n');
        }
        atomic_write(&dir.join(&m.file), text.as_bytes())?;
    }

    let supervised: Vec<usize> = (0..ds.tasks().len())
        .filter(|&i| ds.tasks()[i].class.is_supervised())
        .collect();
    let mut text = String::from("sample_id,patient_id");
    for &t in &supervised {
        text.push(',');
        text.push_str(&ds.tasks()[t].name);
    }
    text.push('\n');
    for s in ds.samples() {
        text.push_str(&s.sample_id);
        text.push(',');
        text.push_str(&s.patient_id);
        for &t in &supervised {
            text.push(',');
            if let Some(v) = s.labels[t] {
                text.push_str(&format_float(v));
            }
        }
        text.push('\n');
    }
    atomic_write(&dir.join(&manifest.labels_file), text.as_bytes())?;

    let manifest_text = toml::to_string_pretty(&manifest)
        .map_err(|e| Error::Format(format!("manifest serialization: {e}")))?;
    let manifest_path = dir.join("manifest.toml");
    atomic_write(&manifest_path, manifest_text.as_bytes())?;
    Ok(manifest_path)
}

/// Shortest representation that parses back to the identical bits.
fn format_float(v: f64) -> String {
    format!("{v}")
}
