//! File formats and run configuration: CSV datasets and tables, the JSON
//! model file, and the TOML run configuration of the command-line tool.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{Dataset, OutputScaler};
use crate::error::{Error, Result};
use crate::kernel::{KernelFamily, KernelSpec, WendlandSmoothness};
use crate::selection::{GridPoint, Method};
use crate::surrogate::Surrogate;

pub const FORMAT_VERSION: u64 = 1;

/// Reads `d` input and `q` output columns per row.
pub fn load_csv(path: &Path, d: usize, q: usize, has_header: bool) -> Result<Dataset> {
    let file = fs::File::open(path)?;
    parse_csv(file, d, q, has_header)
}

pub fn parse_csv<R: Read>(reader: R, d: usize, q: usize, has_header: bool) -> Result<Dataset> {
    let rows = read_rows(reader, d + q, has_header)?;
    let n = rows.len();
    Dataset::new(
        DMatrix::from_fn(n, d, |i, j| rows[i][j]),
        DMatrix::from_fn(n, q, |i, j| rows[i][d + j]),
    )
}

/// Numeric rows with exactly `width` fields, or `None` width to take the
/// width of the first row.
pub fn read_matrix<R: Read>(
    reader: R,
    width: Option<usize>,
    has_header: bool,
) -> Result<DMatrix<f64>> {
    let rows = read_rows_flexible(reader, width, has_header)?;
    let w = rows[0].len();
    Ok(DMatrix::from_fn(rows.len(), w, |i, j| rows[i][j]))
}

fn read_rows<R: Read>(reader: R, width: usize, has_header: bool) -> Result<Vec<Vec<f64>>> {
    read_rows_flexible(reader, Some(width), has_header)
}

fn read_rows_flexible<R: Read>(
    reader: R,
    width: Option<usize>,
    has_header: bool,
) -> Result<Vec<Vec<f64>>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(has_header)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut rows = Vec::new();
    let mut expected = width;
    for record in rdr.records() {
        let record = record.map_err(|e| Error::Csv {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let w = *expected.get_or_insert(record.len());
        if record.len() != w {
            return Err(Error::Csv {
                line,
                message: format!("expected {w} fields, found {}", record.len()),
            });
        }
        let row = record
            .iter()
            .enumerate()
            .map(|(col, field)| {
                let v: f64 = field.parse().map_err(|_| Error::Csv {
                    line,
                    message: format!("field {} is not a number: '{field}'", col + 1),
                })?;
                if !v.is_finite() {
                    return Err(Error::Csv {
                        line,
                        message: format!("field {} is not finite: '{field}'", col + 1),
                    });
                }
                Ok(v)
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Empty("CSV file has no data rows"));
    }
    Ok(rows)
}

/// Writes `m` with a header row; floats in shortest round-trip form.
pub fn write_matrix_csv(path: &Path, header: &[String], m: &DMatrix<f64>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_io)?;
    if !header.is_empty() {
        w.write_record(header).map_err(csv_io)?;
    }
    for row in m.row_iter() {
        w.write_record(row.iter().map(|v| v.to_string()))
            .map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_dataset_csv(path: &Path, data: &Dataset) -> Result<()> {
    let (d, q) = (data.input_dim(), data.output_dim());
    let m = DMatrix::from_fn(data.len(), d + q, |i, j| {
        if j < d {
            data.inputs[(i, j)]
        } else {
            data.outputs[(i, j - d)]
        }
    });
    let header: Vec<String> = (1..=d)
        .map(|j| format!("x{j}"))
        .chain((1..=q).map(|j| format!("y{j}")))
        .collect();
    write_matrix_csv(path, &header, &m)
}

fn csv_io(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

/// Hex SHA-256 over the little-endian bytes of the shape and the row-major
/// values.
pub fn dataset_sha256(data: &Dataset) -> String {
    let mut h = Sha256::new();
    for dim in [data.len(), data.input_dim(), data.output_dim()] {
        h.update((dim as u64).to_le_bytes());
    }
    for i in 0..data.len() {
        for v in data.inputs.row(i).iter().chain(data.outputs.row(i).iter()) {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingMetadata {
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub dataset_sha256: Option<String>,
    pub hyperparameters: GridPoint,
    pub n_centers: usize,
    #[serde(default)]
    pub offline_seconds: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub format_version: u64,
    pub method: Method,
    pub kernel: KernelSpec,
    pub lambda: f64,
    #[serde(default)]
    pub epsilon: Option<f64>,
    /// One row per center.
    pub centers: Vec<Vec<f64>>,
    /// One row per center.
    pub coefficients: Vec<Vec<f64>>,
    #[serde(default)]
    pub output_scaler: Option<OutputScaler>,
    pub metadata: TrainingMetadata,
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn matrix_of(rows: &[Vec<f64>], name: &str) -> Result<DMatrix<f64>> {
    let w = rows.first().map_or(0, |r| r.len());
    if rows.iter().any(|r| r.len() != w) {
        return Err(Error::Schema(format!("rows of `{name}` differ in length")));
    }
    Ok(DMatrix::from_fn(rows.len(), w, |i, j| rows[i][j]))
}

impl ModelFile {
    pub fn new(
        model: &Surrogate,
        method: Method,
        epsilon: Option<f64>,
        metadata: TrainingMetadata,
    ) -> Self {
        ModelFile {
            format_version: FORMAT_VERSION,
            method,
            kernel: model.kernel,
            lambda: model.lambda,
            epsilon,
            centers: rows_of(&model.centers),
            coefficients: rows_of(&model.coefficients),
            output_scaler: model.output_scaler.clone(),
            metadata,
        }
    }

    pub fn surrogate(&self) -> Result<Surrogate> {
        Surrogate::new(
            self.kernel,
            matrix_of(&self.centers, "centers")?,
            matrix_of(&self.coefficients, "coefficients")?,
            self.output_scaler.clone(),
            self.lambda,
        )
        .map_err(|e| Error::Schema(e.to_string()))
    }
}

pub fn save_model(path: &Path, file: &ModelFile) -> Result<()> {
    let json = serde_json::to_string_pretty(file)?;
    fs::write(path, json + "\n")?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<ModelFile> {
    parse_model(&fs::read_to_string(path)?)
}

pub fn parse_model(text: &str) -> Result<ModelFile> {
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| Error::Schema(e.to_string()))?;
    let version = value
        .get("format_version")
        .ok_or_else(|| Error::Schema("missing field `format_version`".into()))?;
    let found = version
        .as_u64()
        .ok_or_else(|| Error::Schema("`format_version` is not an unsigned integer".into()))?;
    if found != FORMAT_VERSION {
        return Err(Error::FormatVersion {
            found,
            expected: FORMAT_VERSION,
        });
    }
    let file: ModelFile =
        serde_json::from_value(value).map_err(|e| Error::Schema(e.to_string()))?;
    file.surrogate()?;
    Ok(file)
}

/// Kernel family from its command-line name: `gaussian`, `wendland0`,
/// `wendland2`, `brownian-bridge`, or `poly:a:p`.
pub fn parse_kernel(s: &str) -> Result<KernelFamily> {
    Ok(match s {
        "gaussian" => KernelFamily::Gaussian,
        "wendland0" => KernelFamily::Wendland {
            smoothness: WendlandSmoothness::K0,
        },
        "wendland2" => KernelFamily::Wendland {
            smoothness: WendlandSmoothness::K2,
        },
        "brownian-bridge" => KernelFamily::BrownianBridge,
        _ => {
            let parts: Vec<&str> = s.split(':').collect();
            match parts.as_slice() {
                ["poly", a, p] => KernelFamily::Polynomial {
                    a: a.parse().map_err(|_| bad_kernel(s))?,
                    p: p.parse().map_err(|_| bad_kernel(s))?,
                },
                _ => return Err(bad_kernel(s)),
            }
        }
    })
}

fn bad_kernel(s: &str) -> Error {
    Error::InvalidParameter(format!(
        "unknown kernel '{s}', expected gaussian, wendland0, wendland2, brownian-bridge or poly:a:p"
    ))
}

/// `vmin:vmax:count` for a logarithmic grid, or a single value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct GridRange {
    pub min: f64,
    pub max: f64,
    pub count: usize,
}

impl GridRange {
    pub fn values(&self) -> Result<Vec<f64>> {
        if self.count == 1 && self.min == self.max {
            return Ok(vec![self.min]);
        }
        crate::selection::log_grid(self.min, self.max, self.count)
    }
}

impl std::str::FromStr for GridRange {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let bad =
            || Error::InvalidParameter(format!("grid '{s}' is not vmin:vmax:count or a number"));
        let parts: Vec<&str> = s.split(':').collect();
        match parts.as_slice() {
            [v] => {
                let v: f64 = v.parse().map_err(|_| bad())?;
                Ok(GridRange {
                    min: v,
                    max: v,
                    count: 1,
                })
            }
            [a, b, c] => Ok(GridRange {
                min: a.parse().map_err(|_| bad())?,
                max: b.parse().map_err(|_| bad())?,
                count: c.parse().map_err(|_| bad())?,
            }),
            _ => Err(bad()),
        }
    }
}

impl TryFrom<String> for GridRange {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<GridRange> for String {
    fn from(g: GridRange) -> String {
        if g.count == 1 && g.min == g.max {
            g.min.to_string()
        } else {
            format!("{}:{}:{}", g.min, g.max, g.count)
        }
    }
}

/// Settings shared by the subcommands. Every field is optional in the TOML
/// file; command-line flags override the file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: Option<PathBuf>,
    /// Use the built-in synthetic dataset instead of `data`.
    pub synthetic: bool,
    pub d: Option<usize>,
    pub q: Option<usize>,
    pub header: bool,
    pub method: String,
    pub kernel: String,
    pub gamma_grid: GridRange,
    pub lambda_grid: GridRange,
    pub eps_grid: GridRange,
    pub k: usize,
    pub seed: u64,
    /// Test share when `test_count` is not set.
    pub test_fraction: f64,
    pub test_count: Option<usize>,
    pub validation_fraction: f64,
    pub pinned: Vec<usize>,
    pub error: String,
    pub tol_p: f64,
    pub tol_f: f64,
    pub tol_kkt: f64,
    pub max_points: Option<usize>,
    pub svr_max_iter: usize,
    pub online_repetitions: usize,
    pub timings: bool,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: None,
            synthetic: false,
            d: None,
            q: None,
            header: false,
            method: "vkoga-f".into(),
            kernel: "gaussian".into(),
            gamma_grid: GridRange {
                min: 1e-2,
                max: 1e1,
                count: 20,
            },
            lambda_grid: GridRange {
                min: 1e-16,
                max: 1e3,
                count: 20,
            },
            eps_grid: GridRange {
                min: 1e-10,
                max: 1e-3,
                count: 10,
            },
            k: 5,
            seed: 0,
            test_fraction: 0.1,
            test_count: None,
            validation_fraction: 0.0,
            pinned: Vec::new(),
            error: "max".into(),
            tol_p: crate::vkoga::DEFAULT_TOL_P,
            tol_f: crate::vkoga::DEFAULT_TOL_F,
            tol_kkt: crate::svr::DEFAULT_TOL_KKT,
            max_points: None,
            svr_max_iter: crate::svr::DEFAULT_MAX_ITER,
            online_repetitions: 5000,
            timings: true,
            out: PathBuf::from("out"),
        }
    }
}

impl RunConfig {
    pub fn from_toml_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        toml::from_str(&text)
            .map_err(|e| Error::InvalidParameter(format!("{}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::KernelSpec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn csv_examples() {
        let d = parse_csv("0,0,0,0,0,0\n1,1,1,2,2,2".as_bytes(), 3, 3, false).unwrap();
        assert_eq!((d.len(), d.input_dim(), d.output_dim()), (2, 3, 3));
        assert_eq!(d.outputs[(1, 2)], 2.0);

        let err = parse_csv("0,0,0,0,0,0\n1,1,1,2,2\n".as_bytes(), 3, 3, false).unwrap_err();
        match err {
            Error::Csv { line, .. } => assert_eq!(line, 2),
            e => panic!("{e}"),
        }
        let d = parse_csv("a,b\n1e-3, 2\n".as_bytes(), 1, 1, true).unwrap();
        assert_eq!(d.inputs[(0, 0)], 0.001);
        assert!(parse_csv("1,NaN\n".as_bytes(), 1, 1, false).is_err());
        assert!(parse_csv("1,inf\n".as_bytes(), 1, 1, false).is_err());
        assert!(parse_csv("1,x\n".as_bytes(), 1, 1, false).is_err());
        assert!(matches!(
            parse_csv("".as_bytes(), 1, 1, false),
            Err(Error::Empty(_))
        ));
    }

    fn sample_file() -> (ModelFile, Surrogate) {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let centers = DMatrix::from_fn(5, 3, |_, _| rng.gen_range(-1.0..1.0));
        let coef = DMatrix::from_fn(5, 2, |_, _| rng.gen_range(-1.0..1.0) / 3.0);
        let scaler = OutputScaler {
            min: vec![-0.1, 7.0],
            max: vec![0.3, 11.0],
        };
        let model = Surrogate::new(
            KernelSpec::gaussian(0.7).unwrap(),
            centers,
            coef,
            Some(scaler),
            1e-9,
        )
        .unwrap();
        let meta = TrainingMetadata {
            seed: Some(1),
            dataset_sha256: None,
            hyperparameters: GridPoint {
                gamma: 0.7,
                lambda: 1e-9,
                epsilon: None,
            },
            n_centers: 5,
            offline_seconds: None,
        };
        (
            ModelFile::new(&model, Method::Interpolation, None, meta),
            model,
        )
    }

    #[test]
    fn model_round_trip_is_bit_exact() {
        let (file, model) = sample_file();
        let text = serde_json::to_string(&file).unwrap();
        let back = parse_model(&text).unwrap().surrogate().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = DMatrix::from_fn(100, 3, |_, _| rng.gen_range(-2.0..2.0));
        let a = model.evaluate(&x).unwrap();
        let b = back.evaluate(&x).unwrap();
        assert!(a
            .iter()
            .zip(b.iter())
            .all(|(u, v)| u.to_bits() == v.to_bits()));
    }

    #[test]
    fn tampered_model_files_are_refused() {
        let (file, _) = sample_file();
        let mut v = serde_json::to_value(&file).unwrap();
        v["format_version"] = 999.into();
        assert!(matches!(
            parse_model(&v.to_string()),
            Err(Error::FormatVersion { found: 999, .. })
        ));
        let mut v = serde_json::to_value(&file).unwrap();
        v.as_object_mut().unwrap().remove("coefficients");
        match parse_model(&v.to_string()) {
            Err(Error::Schema(msg)) => assert!(msg.contains("coefficients"), "{msg}"),
            other => panic!("{other:?}"),
        }
        let mut v = serde_json::to_value(&file).unwrap();
        v["coefficients"] = serde_json::json!([[1.0, 2.0]]);
        assert!(matches!(parse_model(&v.to_string()), Err(Error::Schema(_))));
    }

    #[test]
    fn grid_ranges_parse() {
        let g: GridRange = "1e-2:1e1:4".parse().unwrap();
        assert_eq!(g.values().unwrap().len(), 4);
        let one: GridRange = "0.5".parse().unwrap();
        assert_eq!(one.values().unwrap(), vec![0.5]);
        assert!("1:2".parse::<GridRange>().is_err());
        assert_eq!(String::from(g), "0.01:10:4");
    }

    #[test]
    fn kernel_names_parse() {
        assert_eq!(parse_kernel("gaussian").unwrap(), KernelFamily::Gaussian);
        assert_eq!(
            parse_kernel("poly:1:3").unwrap(),
            KernelFamily::Polynomial { a: 1.0, p: 3 }
        );
        assert!(parse_kernel("poly:1").is_err());
        assert!(parse_kernel("laplace").is_err());
    }

    #[test]
    fn run_config_from_toml() {
        let cfg: RunConfig =
            toml::from_str("method = \"svr\"\ngamma_grid = \"0.1:1:3\"\nk = 3\npinned = [0]\n")
                .unwrap();
        assert_eq!(cfg.method, "svr");
        assert_eq!(cfg.gamma_grid.count, 3);
        assert_eq!(cfg.k, 3);
        assert_eq!(cfg.tol_p, 1e-12);
        assert!(toml::from_str::<RunConfig>("bogus = 1\n").is_err());
    }

    #[test]
    fn dataset_hash_depends_on_values() {
        let a = parse_csv("1,2\n3,4\n".as_bytes(), 1, 1, false).unwrap();
        let b = parse_csv("1,2\n3,5\n".as_bytes(), 1, 1, false).unwrap();
        assert_eq!(dataset_sha256(&a).len(), 64);
        assert_ne!(dataset_sha256(&a), dataset_sha256(&b));
        assert_eq!(dataset_sha256(&a), dataset_sha256(&a.clone()));
    }
}
