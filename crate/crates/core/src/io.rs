//! CSV and JSON output.
//!
//! Every CSV has a header row. [`write_sidecar`] writes the matching
//! `<stem>.meta.json` file with run metadata; nothing time-dependent is
//! recorded, so identical runs produce identical files.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path as FsPath, PathBuf};

use serde::Serialize;

use crate::hjb::{PolicyGrid, ValueGrid};
use crate::simulate::{Path, PathSummary};
use crate::Result;

/// Writes `t,x,regime` rows of one path.
pub fn write_path<W: Write>(path: &Path, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["t", "x", "regime"])?;
    for k in 0..path.len() {
        w.serialize((path.times[k], path.x_values[k], path.regimes[k]))?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct SummaryRow {
    seed: u64,
    path: usize,
    tau: f64,
    exited: bool,
    cost: f64,
}

/// Writes `seed,path,tau,exited,cost` rows of a batch.
pub fn write_batch_summary<W: Write>(seed: u64, summaries: &[PathSummary], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for s in summaries {
        w.serialize(SummaryRow {
            seed,
            path: s.index,
            tau: s.tau,
            exited: s.exited,
            cost: s.cost,
        })?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct GridRow {
    t: f64,
    x: f64,
    regime: usize,
    value: f64,
    control: Option<f64>,
}

/// Writes `t,x,regime,value,control` for every node. Values are multiplied
/// by `sign` (use the model's sense to report the user objective); the
/// control column is empty on the terminal layer.
pub fn write_value_grid<W: Write>(
    vg: &ValueGrid,
    policy: Option<&PolicyGrid>,
    sign: f64,
    out: W,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for n in 0..=vg.grid.n_t {
        for i in 0..=vg.grid.n_x {
            for a in 0..vg.m {
                let control = policy
                    .filter(|_| n < vg.grid.n_t)
                    .map(|p| p.control_at(n, i, a));
                w.serialize(GridRow {
                    t: vg.t(n),
                    x: vg.x(i),
                    regime: a,
                    value: sign * vg.value(n, i, a),
                    control,
                })?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct SurfaceRow {
    s: f64,
    x: f64,
    regime: usize,
    #[serde(rename = "V")]
    v: f64,
}

/// Writes the value surface as `s,x,regime,V`, keeping every `stride`-th
/// time layer and node.
pub fn write_surface<W: Write>(vg: &ValueGrid, sign: f64, stride: usize, out: W) -> Result<()> {
    let stride = stride.max(1);
    let mut w = csv::Writer::from_writer(out);
    for n in (0..=vg.grid.n_t).step_by(stride) {
        for i in (0..=vg.grid.n_x).step_by(stride) {
            for a in 0..vg.m {
                w.serialize(SurfaceRow {
                    s: vg.t(n),
                    x: vg.x(i),
                    regime: a,
                    v: sign * vg.value(n, i, a),
                })?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Writes serialisable rows with a header taken from the field names.
pub fn write_rows<T: Serialize, W: Write>(rows: &[T], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_json<T: Serialize, W: Write>(value: &T, mut out: W) -> Result<()> {
    serde_json::to_writer_pretty(&mut out, value)?;
    out.write_all(b"\n")?;
    Ok(())
}

/// Opens `path` for buffered writing, creating parent directories.
pub fn create(path: &FsPath) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

/// `dir/stem.meta.json` for a data file `dir/stem.ext`.
pub fn sidecar_path(data: &FsPath) -> PathBuf {
    let stem = data
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    data.with_file_name(format!("{stem}.meta.json"))
}

/// Writes the metadata sidecar for `data`.
pub fn write_sidecar<T: Serialize>(data: &FsPath, metadata: &T) -> Result<PathBuf> {
    let path = sidecar_path(data);
    let mut f = create(&path)?;
    write_json(metadata, &mut f)?;
    f.flush()?;
    Ok(path)
}
