//! Delimited data ingestion.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::gp::Rescale;
use crate::likelihoods::{GStar, Link, ModelData, ModelKind};
use crate::quadrature::{disc_quadrature, gauss_legendre};

use super::fmt_f64;

/// Reference objects attached to ingested data.
#[derive(Debug, Clone, PartialEq)]
pub struct ReadOptions {
    pub link: Link,
    /// `None` picks the default reference density for the model kind.
    pub gstar: Option<GStar>,
    pub density_nodes: usize,
    pub u_nodes: usize,
    /// Seeds the random shift of the density quadrature.
    pub seed: u64,
}

impl Default for ReadOptions {
    fn default() -> Self {
        Self {
            link: Link::default(),
            gstar: None,
            density_nodes: 2048,
            u_nodes: 64,
            seed: 0,
        }
    }
}

fn ingestion(row: usize, column: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Ingestion {
        row,
        column: column.into(),
        message: message.into(),
    }
}

/// Reads a comma-separated file with header `x1, ..., xd[, y]`. Covariates
/// outside the unit disc are shifted and scaled into it; the transform is
/// kept on the returned data. Rows are numbered from 1 after the header.
pub fn read_dataset(path: &Path, kind: ModelKind, opts: &ReadOptions) -> Result<ModelData> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => ingestion(0, "", format!("{other:?}")),
        })?;
    let headers = reader
        .headers()
        .map_err(|e| ingestion(0, "", e.to_string()))?
        .clone();
    if headers.is_empty() || headers.iter().all(str::is_empty) {
        return Err(ingestion(0, "", "file is empty"));
    }
    let mut x_cols = Vec::new();
    let mut y_col = None;
    for (i, name) in headers.iter().enumerate() {
        if name == "y" {
            y_col = Some(i);
        } else if let Some(k) = name.strip_prefix('x').and_then(|s| s.parse::<usize>().ok()) {
            x_cols.push((k, i));
        } else {
            return Err(ingestion(0, name, "unexpected column"));
        }
    }
    x_cols.sort_unstable();
    if x_cols.is_empty() {
        return Err(ingestion(0, "x1", "missing column"));
    }
    for (expect, (k, _)) in x_cols.iter().enumerate() {
        if *k != expect + 1 {
            return Err(ingestion(0, format!("x{}", expect + 1), "missing column"));
        }
    }
    match (kind.has_response(), y_col) {
        (true, None) => return Err(ingestion(0, "y", "missing column")),
        (false, Some(_)) => return Err(ingestion(0, "y", "density data takes no response column")),
        _ => {}
    }
    let mut raw_x = Vec::new();
    let mut y = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let row = r + 1;
        let record = record.map_err(|e| ingestion(row, "", e.to_string()))?;
        let cell = |idx: usize, name: &str| -> Result<f64> {
            let text = record.get(idx).ok_or_else(|| ingestion(row, name, "missing cell"))?;
            let v: f64 = text
                .parse()
                .map_err(|_| ingestion(row, name, format!("non-numeric value '{text}'")))?;
            if !v.is_finite() {
                return Err(ingestion(row, name, format!("non-finite value '{text}'")));
            }
            Ok(v)
        };
        let xi = x_cols
            .iter()
            .map(|(k, idx)| cell(*idx, &format!("x{k}")))
            .collect::<Result<Vec<f64>>>()?;
        raw_x.push(xi);
        if let Some(idx) = y_col {
            let v = cell(idx, "y")?;
            if kind == ModelKind::Classification && v != 0.0 && v != 1.0 {
                return Err(ingestion(row, "y", format!("class label {v} is not 0 or 1")));
            }
            y.push(v);
        }
    }
    if raw_x.is_empty() {
        return Err(ingestion(0, "", "no data rows"));
    }
    let rescale = Rescale::fit(&raw_x);
    if rescale.scale != 1.0 || rescale.shift.iter().any(|&s| s != 0.0) {
        log::info!(
            "covariates rescaled into the unit disc (shift {:?}, scale {})",
            rescale.shift,
            rescale.scale
        );
    }
    let x: Vec<Vec<f64>> = raw_x.iter().map(|xi| clip_to_disc(rescale.apply(xi))).collect();
    let gstar = opts.gstar.unwrap_or_else(|| GStar::default_for(kind));
    let data = match kind {
        ModelKind::RegFixed | ModelKind::RegRandom => ModelData::regression(kind, x, y),
        ModelKind::Classification => ModelData::classification(x, y, opts.link),
        ModelKind::Density => {
            let d = x[0].len();
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            ModelData::density(x, gstar, disc_quadrature(d, opts.density_nodes, &mut rng))
        }
        ModelKind::DensityRegression => {
            ModelData::density_regression(x, y, gstar, gauss_legendre(opts.u_nodes, 0.0, 1.0))
        }
    }?;
    Ok(data.with_rescale(rescale))
}

/// Writes `data` in the format read by [`read_dataset`], mapping covariates
/// back through the recorded rescaling.
pub fn write_dataset(data: &ModelData, path: &Path) -> Result<()> {
    let io_err = |e: csv::Error| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::InvalidInput(format!("{}: {other:?}", path.display())),
    };
    let mut w = csv::Writer::from_path(path).map_err(io_err)?;
    let mut header: Vec<String> = (1..=data.d()).map(|k| format!("x{k}")).collect();
    if data.kind().has_response() {
        header.push("y".into());
    }
    w.write_record(&header).map_err(io_err)?;
    for (i, xi) in data.x().iter().enumerate() {
        let mut row: Vec<String> = data.rescale().invert(xi).into_iter().map(fmt_f64).collect();
        if data.kind().has_response() {
            row.push(fmt_f64(data.y()[i]));
        }
        w.write_record(&row).map_err(io_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Pulls points that landed a rounding error outside the disc back onto it.
fn clip_to_disc(mut x: Vec<f64>) -> Vec<f64> {
    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 1.0 {
        for v in &mut x {
            *v /= norm;
        }
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write(text: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(text.as_bytes()).unwrap();
        f
    }

    #[test]
    fn reads_small_regression_file() {
        let f = write("x1,x2,y\n0.1,0.2,1.0\n-0.3,0.4,0.5\n0,0,0\n");
        let data = read_dataset(f.path(), ModelKind::RegFixed, &ReadOptions::default()).unwrap();
        assert_eq!(data.n(), 3);
        assert_eq!(data.d(), 2);
        assert_eq!(data.rescale().scale, 1.0);
    }

    #[test]
    fn rescales_points_outside_disc() {
        let f = write("x1,y\n3.0,1\n-1.0,0\n");
        let data = read_dataset(f.path(), ModelKind::RegRandom, &ReadOptions::default()).unwrap();
        assert!(data.rescale().scale > 1.0);
        assert!(data.x().iter().all(|x| x[0].abs() <= 1.0));
    }

    #[test]
    fn rejects_bad_labels_and_cells() {
        let f = write("x1,y\n0.1,2\n");
        let err = read_dataset(f.path(), ModelKind::Classification, &ReadOptions::default()).unwrap_err();
        assert!(matches!(err, Error::Ingestion { row: 1, .. }), "{err}");
        let f = write("x1,y\n0.1,1\n0.2,abc\n");
        let err = read_dataset(f.path(), ModelKind::RegFixed, &ReadOptions::default()).unwrap_err();
        match err {
            Error::Ingestion { row, column, .. } => assert_eq!((row, column.as_str()), (2, "y")),
            other => panic!("{other}"),
        }
    }

    #[test]
    fn rejects_missing_columns_and_empty_files() {
        let f = write("x1,x3,y\n0.1,0.2,1\n");
        assert!(matches!(
            read_dataset(f.path(), ModelKind::RegFixed, &ReadOptions::default()),
            Err(Error::Ingestion { row: 0, .. })
        ));
        let f = write("x1\n0.1\n");
        assert!(read_dataset(f.path(), ModelKind::RegFixed, &ReadOptions::default()).is_err());
        let f = write("");
        assert!(read_dataset(f.path(), ModelKind::RegFixed, &ReadOptions::default()).is_err());
        let f = write("x1,y\n");
        assert!(read_dataset(f.path(), ModelKind::RegFixed, &ReadOptions::default()).is_err());
    }
}
