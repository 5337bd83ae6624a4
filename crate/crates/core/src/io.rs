//! JSON-lines dataset files, one material record per line:
//! `{"rho": [[..],[..],[..]], "x": [[f,f,f],..], "z": [..], "id": ".."}`.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Mat3, Vec3};
use crate::material::{wrap_frac, Material};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    rho: [[f64; 3]; 3],
    x: Vec<[f64; 3]>,
    z: Vec<u32>,
    #[serde(default)]
    id: String,
}

/// Whether out-of-range fractional coordinates are wrapped onto the torus or rejected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Ingest {
    #[default]
    Strict,
    Wrap,
}

pub fn material_to_json(m: &Material) -> Result<String> {
    let rec = Record {
        rho: std::array::from_fn(|i| std::array::from_fn(|j| m.rho[(i, j)])),
        x: m.x.iter().map(|v| [v.x, v.y, v.z]).collect(),
        z: m.z.clone(),
        id: m.id.clone(),
    };
    Ok(serde_json::to_string(&rec)?)
}

pub fn material_from_json(line: &str, ingest: Ingest) -> Result<Material> {
    let rec: Record = serde_json::from_str(line)?;
    let rho = Mat3::from_fn(|i, j| rec.rho[i][j]);
    let mut x: Vec<Vec3> = rec.x.iter().map(|v| Vec3::new(v[0], v[1], v[2])).collect();
    if ingest == Ingest::Wrap {
        x = x.iter().map(wrap_frac).collect::<Result<_>>()?;
    }
    let m = Material::new(rho, x, rec.z)?;
    Ok(m.with_id(rec.id))
}

/// Reads a dataset file; errors name the offending line.
pub fn read_materials(path: &Path, ingest: Ingest) -> Result<Vec<Material>> {
    let file = fs::File::open(path)?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let m = material_from_json(&line, ingest).map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), n + 1)))?;
        out.push(m);
    }
    Ok(out)
}

pub fn write_materials(path: &Path, data: &[Material]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for m in data {
        writeln!(w, "{}", material_to_json(m)?)?;
    }
    w.flush()?;
    Ok(())
}
