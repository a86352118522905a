use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Dataset, InteractionList, Provenance};
use crate::error::{Error, Result};
use crate::features::FeatureSchema;

pub const DATA_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SchemaFile {
    format_version: u32,
    schema: FeatureSchema,
    provenance: Provenance,
}

/// `data/train.jsonl` → `data/train.schema.json`.
pub fn schema_path(path: &Path) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.schema.json"))
}

pub fn save_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    let header = SchemaFile {
        format_version: DATA_FORMAT_VERSION,
        schema: dataset.schema.clone(),
        provenance: dataset.provenance.clone(),
    };
    crate::io_util::write_atomic(&schema_path(path), &serde_json::to_vec_pretty(&header)?)?;

    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let file = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        let mut w = BufWriter::new(file);
        for list in &dataset.lists {
            serde_json::to_writer(&mut w, list)?;
            w.write_all(b"\n").map_err(|e| Error::io(&tmp, e))?;
        }
        let file = w.into_inner().map_err(|e| Error::io(&tmp, e.into_error()))?;
        file.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_schema_file(path: &Path) -> Result<(FeatureSchema, Provenance)> {
    let sp = schema_path(path);
    let text = fs::read_to_string(&sp).map_err(|e| Error::io(&sp, e))?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    let header: SchemaFile = serde_path_to_error::deserialize(de).map_err(|e| Error::Parse {
        path: sp.clone(),
        line: e.inner().line(),
        field: e.path().to_string(),
        message: e.inner().to_string(),
    })?;
    if header.format_version != DATA_FORMAT_VERSION {
        return Err(Error::Parse {
            path: sp,
            line: 1,
            field: "format_version".into(),
            message: format!(
                "unsupported version {} (expected {DATA_FORMAT_VERSION})",
                header.format_version
            ),
        });
    }
    header.schema.validate()?;
    Ok((header.schema, header.provenance))
}

/// Loads `path` and its schema file. Malformed lines and shape violations
/// fail with the 1-based line number; soft contract violations are logged.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let (schema, provenance) = read_schema_file(path)?;
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lists = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let de = &mut serde_json::Deserializer::from_str(&line);
        let list: InteractionList = serde_path_to_error::deserialize(de).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            field: e.path().to_string(),
            message: e.inner().to_string(),
        })?;
        let warnings = list.validate(&schema).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            field: "list".into(),
            message: e.to_string(),
        })?;
        for w in warnings {
            log::warn!("{}:{}: {w}", path.display(), i + 1);
        }
        lists.push(list);
    }
    if lists.is_empty() {
        return Err(Error::InvalidInput(format!("{} contains no lists", path.display())));
    }
    Ok(Dataset {
        lists,
        schema,
        provenance,
    })
}
