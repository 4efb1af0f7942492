//! Dataset container and its on-disk form: a long-format trajectory CSV plus
//! a JSON manifest.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::record::{Schema, TrajectoryRecord};
use crate::error::{Error, Result};

pub const FORMAT_VERSION: &str = "1";
pub const TRAJECTORY_FILE: &str = "trajectories.csv";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Per-feature z-score statistics (population σ, σ = 0 replaced by 1).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub x_mean: Vec<f64>,
    pub x_std: Vec<f64>,
    pub y_mean: Vec<f64>,
    pub y_std: Vec<f64>,
    pub v_mean: Vec<f64>,
    pub v_std: Vec<f64>,
}

impl NormStats {
    pub fn identity(schema: &Schema) -> Self {
        Self {
            x_mean: vec![0.0; schema.d_x()],
            x_std: vec![1.0; schema.d_x()],
            y_mean: vec![0.0; schema.d_y()],
            y_std: vec![1.0; schema.d_y()],
            v_mean: vec![0.0; schema.d_v()],
            v_std: vec![1.0; schema.d_v()],
        }
    }

    pub fn matches(&self, schema: &Schema) -> bool {
        self.x_mean.len() == schema.d_x()
            && self.x_std.len() == schema.d_x()
            && self.y_mean.len() == schema.d_y()
            && self.y_std.len() == schema.d_y()
            && self.v_mean.len() == schema.d_v()
            && self.v_std.len() == schema.d_v()
    }

    pub fn denorm_y(&self, k: usize, value: f64) -> f64 {
        value * self.y_std[k] + self.y_mean[k]
    }

    pub fn norm_y(&self, k: usize, value: f64) -> f64 {
        (value - self.y_mean[k]) / self.y_std[k]
    }

    pub fn norm_x(&self, i: usize, value: f64) -> f64 {
        (value - self.x_mean[i]) / self.x_std[i]
    }

    pub fn denorm_x(&self, i: usize, value: f64) -> f64 {
        value * self.x_std[i] + self.x_mean[i]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: String,
    pub schema: Schema,
    pub d_x: usize,
    pub d_a: usize,
    pub d_v: usize,
    pub d_y: usize,
    pub normalization: Option<NormStats>,
    #[serde(default)]
    pub provenance: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub schema: Schema,
    pub records: Vec<TrajectoryRecord>,
    /// Present iff the records are z-scored with these statistics.
    pub normalization: Option<NormStats>,
    pub provenance: serde_json::Value,
}

impl Dataset {
    pub fn new(schema: Schema, records: Vec<TrajectoryRecord>) -> Self {
        Self {
            schema,
            records,
            normalization: None,
            provenance: serde_json::Value::Null,
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        self.schema.validate()?;
        for r in &self.records {
            r.check(&self.schema)?;
        }
        if let Some(n) = &self.normalization {
            if !n.matches(&self.schema) {
                return Err(Error::Schema("normalization stats do not match schema".into()));
            }
        }
        Ok(())
    }

    pub fn manifest(&self) -> Manifest {
        Manifest {
            format_version: FORMAT_VERSION.into(),
            schema: self.schema.clone(),
            d_x: self.schema.d_x(),
            d_a: self.schema.d_a(),
            d_v: self.schema.d_v(),
            d_y: self.schema.d_y(),
            normalization: self.normalization.clone(),
            provenance: self.provenance.clone(),
        }
    }

    /// Same schema and stats, selected records.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            schema: self.schema.clone(),
            records: indices.iter().map(|&i| self.records[i].clone()).collect(),
            normalization: self.normalization.clone(),
            provenance: self.provenance.clone(),
        }
    }

    pub fn n_transitions(&self) -> usize {
        self.records.iter().map(|r| r.len.saturating_sub(1)).sum()
    }
}

fn fmt_float(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        format!("{v:.16e}")
    }
}

/// Header of the long-format trajectory CSV.
pub fn csv_header(schema: &Schema) -> Vec<String> {
    let mut h = vec!["patient_id".to_string(), "t".to_string()];
    h.extend(schema.x.iter().map(|f| format!("x_{}", f.name)));
    h.extend(schema.a.iter().map(|f| format!("a_{}", f.name)));
    h.extend(schema.y.iter().map(|f| format!("y_{}", f.name)));
    h.extend(schema.v.iter().map(|f| format!("v_{}", f.name)));
    h
}

pub fn write_trajectory_csv<W: Write>(ds: &Dataset, out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().from_writer(out);
    w.write_record(csv_header(&ds.schema))?;
    let s = &ds.schema;
    for r in &ds.records {
        for t in 0..r.len {
            let mut row = vec![r.patient_id.clone(), t.to_string()];
            for (i, &v) in r.x_row(t, s.d_x()).iter().enumerate() {
                let observed = r.mask[t * s.d_x() + i];
                row.push(if observed { fmt_float(v) } else { String::new() });
            }
            row.extend(r.a_row(t, s.d_a()).iter().map(|&v| if v != 0.0 { "1" } else { "0" }.to_string()));
            row.extend(r.y_row(t, s.d_y()).iter().map(|&v| fmt_float(v)));
            row.extend(r.v.iter().map(|&v| fmt_float(v)));
            w.write_record(&row)?;
        }
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

/// Parse a long-format trajectory CSV against a known schema.
pub fn read_trajectory_csv(schema: &Schema, text: &str) -> Result<Vec<TrajectoryRecord>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let header: Vec<String> = rdr.headers()?.iter().map(|s| s.trim().to_string()).collect();
    let expected = csv_header(schema);
    if header != expected {
        let missing: Vec<&String> = expected.iter().filter(|c| !header.contains(c)).collect();
        let extra: Vec<&String> = header.iter().filter(|c| !expected.contains(c)).collect();
        return Err(Error::Parse {
            location: "header".into(),
            message: format!(
                "column mismatch (missing {missing:?}, unexpected {extra:?}); expected order {expected:?}"
            ),
        });
    }
    let (dx, da, dy, dv) = (schema.d_x(), schema.d_a(), schema.d_y(), schema.d_v());

    let mut records: Vec<TrajectoryRecord> = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    for (row_idx, row) in rdr.records().enumerate() {
        let row = row?;
        // header is line 1
        let line = row_idx + 2;
        let loc = |col: &str| format!("line {line}, column `{col}`");
        let cell = |j: usize| row.get(j).map(str::trim).unwrap_or("");
        let parse_f = |j: usize, allow_missing: bool| -> Result<f64> {
            let c = cell(j);
            if c.is_empty() {
                if allow_missing {
                    return Ok(f64::NAN);
                }
                return Err(Error::Parse {
                    location: loc(&expected[j]),
                    message: "missing value".into(),
                });
            }
            let v: f64 = c.parse().map_err(|_| Error::Parse {
                location: loc(&expected[j]),
                message: format!("`{c}` is not a number"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    location: loc(&expected[j]),
                    message: "non-finite value".into(),
                });
            }
            Ok(v)
        };

        let pid = cell(0).to_string();
        if pid.is_empty() {
            return Err(Error::Parse {
                location: loc("patient_id"),
                message: "empty patient id".into(),
            });
        }
        let t: usize = cell(1).parse().map_err(|_| Error::Parse {
            location: loc("t"),
            message: format!("`{}` is not a step index", cell(1)),
        })?;

        let mut col = 2;
        let mut xs = Vec::with_capacity(dx);
        let mut mask = Vec::with_capacity(dx);
        for _ in 0..dx {
            let v = parse_f(col, true)?;
            mask.push(!v.is_nan());
            xs.push(v);
            col += 1;
        }
        let mut as_ = Vec::with_capacity(da);
        for _ in 0..da {
            let v = parse_f(col, false)?;
            if v != 0.0 && v != 1.0 {
                return Err(Error::Parse {
                    location: loc(&expected[col]),
                    message: format!("treatment value {v} not in {{0,1}}"),
                });
            }
            as_.push(v);
            col += 1;
        }
        let mut ys = Vec::with_capacity(dy);
        for _ in 0..dy {
            ys.push(parse_f(col, false)?);
            col += 1;
        }
        let mut vs = Vec::with_capacity(dv);
        for _ in 0..dv {
            vs.push(parse_f(col, false)?);
            col += 1;
        }

        let idx = match seen.get(&pid) {
            Some(&i) => {
                if i != records.len() - 1 {
                    return Err(Error::Parse {
                        location: loc("patient_id"),
                        message: format!("rows of patient `{pid}` are not contiguous"),
                    });
                }
                i
            }
            None => {
                seen.insert(pid.clone(), records.len());
                records.push(TrajectoryRecord {
                    patient_id: pid.clone(),
                    v: vs.clone(),
                    x: Vec::new(),
                    a: Vec::new(),
                    y: Vec::new(),
                    mask: Vec::new(),
                    len: 0,
                });
                records.len() - 1
            }
        };
        let rec = &mut records[idx];
        if t != rec.len {
            return Err(Error::Parse {
                location: loc("t"),
                message: format!("expected step {} for patient `{pid}`, found {t}", rec.len),
            });
        }
        if rec.v.iter().zip(&vs).any(|(a, b)| a.to_bits() != b.to_bits()) {
            return Err(Error::Parse {
                location: loc("v_*"),
                message: format!("static covariates of patient `{pid}` change over time"),
            });
        }
        rec.x.extend(xs);
        rec.mask.extend(mask);
        rec.a.extend(as_);
        rec.y.extend(ys);
        rec.len += 1;
    }
    Ok(records)
}

pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    ds.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut buf = Vec::new();
    write_trajectory_csv(ds, &mut buf)?;
    write_atomic(&dir.join(TRAJECTORY_FILE), &buf)?;
    let manifest = serde_json::to_vec_pretty(&ds.manifest())?;
    write_atomic(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let mpath = dir.join(MANIFEST_FILE);
    let mtext = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: Manifest = serde_json::from_str(&mtext)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Parse {
            location: mpath.display().to_string(),
            message: format!("unsupported format version `{}`", manifest.format_version),
        });
    }
    manifest.schema.validate()?;
    let s = &manifest.schema;
    if (manifest.d_x, manifest.d_a, manifest.d_v, manifest.d_y) != (s.d_x(), s.d_a(), s.d_v(), s.d_y()) {
        return Err(Error::Schema("manifest widths disagree with schema".into()));
    }
    let cpath = dir.join(TRAJECTORY_FILE);
    let ctext = fs::read_to_string(&cpath).map_err(|e| Error::io(&cpath, e))?;
    let records = read_trajectory_csv(s, &ctext)?;
    let ds = Dataset {
        schema: manifest.schema,
        records,
        normalization: manifest.normalization,
        provenance: manifest.provenance,
    };
    ds.validate()?;
    Ok(ds)
}

/// Write to a temporary sibling and rename into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
