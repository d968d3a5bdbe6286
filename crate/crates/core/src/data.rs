//! Datasets and the synthetic Gaussian generators.
//!
//! A generated dataset draws `theta*` from `N(0, I_d)`, feature rows i.i.d.
//! from `N(0, Sigma)` and noise i.i.d. from `N(0, sigma^2)`, each from its own
//! substream of the configured seed. The logistic task reuses exactly the same
//! draws and only changes how responses are formed.

use std::io::{BufRead, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{substream, Purpose};

/// Learning task a dataset is generated for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Linear,
    Logistic,
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Task::Linear),
            "logistic" => Ok(Task::Logistic),
            other => Err(Error::Config(format!("unknown task '{other}'"))),
        }
    }
}

/// Design matrix, responses and (for synthetic data) the generating truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: DMatrix<f64>,
    pub responses: Vec<f64>,
    pub truth: Option<Vec<f64>>,
    pub noise_sigma: Option<f64>,
}

impl Dataset {
    pub fn new(features: DMatrix<f64>, responses: Vec<f64>) -> Result<Self> {
        let ds = Dataset {
            features,
            responses,
            truth: None,
            noise_sigma: None,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.features.nrows() != self.responses.len() {
            return Err(Error::DimensionMismatch {
                expected: self.features.nrows(),
                found: self.responses.len(),
            });
        }
        if let Some(t) = &self.truth {
            if t.len() != self.dim() {
                return Err(Error::DimensionMismatch {
                    expected: self.dim(),
                    found: t.len(),
                });
            }
        }
        let finite = self.features.iter().all(|v| v.is_finite())
            && self.responses.iter().all(|v| v.is_finite())
            && self.truth.iter().flatten().all(|v| v.is_finite());
        if !finite {
            return Err(Error::Format("dataset contains non-finite values".into()));
        }
        if matches!(self.noise_sigma, Some(s) if !(s >= 0.0)) {
            return Err(Error::Format("noise sigma must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.responses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.responses.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    /// Rows `start..start + len` as a new dataset (truth and sigma carried over).
    pub fn rows(&self, start: usize, len: usize) -> Dataset {
        Dataset {
            features: self.features.rows(start, len).into_owned(),
            responses: self.responses[start..start + len].to_vec(),
            truth: self.truth.clone(),
            noise_sigma: self.noise_sigma,
        }
    }
}

/// Parameters of the synthetic generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataGenConfig {
    pub n: usize,
    pub d: usize,
    pub noise_sigma: f64,
    /// Feature covariance; `None` means the identity.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_covariance: Option<Vec<Vec<f64>>>,
    pub task: Task,
    pub seed: u64,
}

impl DataGenConfig {
    pub fn new(n: usize, d: usize, noise_sigma: f64, task: Task, seed: u64) -> Self {
        DataGenConfig {
            n,
            d,
            noise_sigma,
            feature_covariance: None,
            task,
            seed,
        }
    }

    /// Lower Cholesky factor of the feature covariance, `None` for the identity.
    fn covariance_factor(&self) -> Result<Option<DMatrix<f64>>> {
        if self.n == 0 || self.d == 0 {
            return Err(Error::Config("n and d must be positive".into()));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return Err(Error::Config("noise_sigma must be finite and nonnegative".into()));
        }
        let Some(rows) = &self.feature_covariance else {
            return Ok(None);
        };
        if rows.len() != self.d || rows.iter().any(|r| r.len() != self.d) {
            return Err(Error::Config(format!("feature_covariance must be {0}x{0}", self.d)));
        }
        let sigma = DMatrix::from_fn(self.d, self.d, |i, j| rows[i][j]);
        for i in 0..self.d {
            for j in 0..i {
                if (sigma[(i, j)] - sigma[(j, i)]).abs() > 1e-10 {
                    return Err(Error::Config("feature_covariance is not symmetric".into()));
                }
            }
        }
        let min_eig = nalgebra::SymmetricEigen::new(sigma.clone()).eigenvalues.min();
        if !(min_eig > 1e-10) {
            return Err(Error::Config(
                "feature_covariance is not positive definite".into(),
            ));
        }
        let chol = nalgebra::Cholesky::new(sigma)
            .ok_or_else(|| Error::Config("feature_covariance is not positive definite".into()))?;
        Ok(Some(chol.l()))
    }
}

struct Draws {
    truth: Vec<f64>,
    features: DMatrix<f64>,
    noise: Vec<f64>,
}

fn draw(cfg: &DataGenConfig, fixed_truth: Option<&[f64]>) -> Result<Draws> {
    let factor = cfg.covariance_factor()?;
    let (n, d) = (cfg.n, cfg.d);

    let truth: Vec<f64> = match fixed_truth {
        Some(t) if t.len() != d => {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: t.len(),
            })
        }
        Some(t) => t.to_vec(),
        None => {
            let mut rng = substream(cfg.seed, Purpose::Truth, 0);
            (0..d).map(|_| StandardNormal.sample(&mut rng)).collect()
        }
    };

    let mut rng = substream(cfg.seed, Purpose::Features, 0);
    let mut features = DMatrix::<f64>::zeros(n, d);
    let mut z = DVector::<f64>::zeros(d);
    for i in 0..n {
        for v in z.iter_mut() {
            *v = StandardNormal.sample(&mut rng);
        }
        match &factor {
            None => {
                for j in 0..d {
                    features[(i, j)] = z[j];
                }
            }
            Some(l) => {
                let row = l * &z;
                for j in 0..d {
                    features[(i, j)] = row[j];
                }
            }
        }
    }

    let mut rng = substream(cfg.seed, Purpose::Noise, 0);
    let noise: Vec<f64> = (0..n)
        .map(|_| {
            let e: f64 = StandardNormal.sample(&mut rng);
            cfg.noise_sigma * e
        })
        .collect();

    Ok(Draws {
        truth,
        features,
        noise,
    })
}

fn noisy_signal(draws: &Draws) -> Vec<f64> {
    let theta = DVector::from_column_slice(&draws.truth);
    let signal = &draws.features * theta;
    signal
        .iter()
        .zip(&draws.noise)
        .map(|(s, e)| s + e)
        .collect()
}

fn build(cfg: &DataGenConfig, fixed_truth: Option<&[f64]>) -> Result<Dataset> {
    let draws = draw(cfg, fixed_truth)?;
    let signal = noisy_signal(&draws);
    let responses = match cfg.task {
        Task::Linear => signal,
        Task::Logistic => signal.into_iter().map(binary_label).collect(),
    };
    Ok(Dataset {
        features: draws.features,
        responses,
        truth: Some(draws.truth),
        noise_sigma: Some(cfg.noise_sigma),
    })
}

/// `y = X theta* + eps`.
pub fn generate_linear_dataset(cfg: &DataGenConfig) -> Result<Dataset> {
    if cfg.task != Task::Linear {
        return Err(Error::Config("generate_linear_dataset requires task = linear".into()));
    }
    build(cfg, None)
}

/// `y = round(sigmoid(x^T theta* + eps))`, with the same draws as the linear task.
pub fn generate_logistic_dataset(cfg: &DataGenConfig) -> Result<Dataset> {
    if cfg.task != Task::Logistic {
        return Err(Error::Config(
            "generate_logistic_dataset requires task = logistic".into(),
        ));
    }
    build(cfg, None)
}

/// Dispatches on `cfg.task`.
pub fn generate_dataset(cfg: &DataGenConfig) -> Result<Dataset> {
    build(cfg, None)
}

/// Fresh rows and noise from `cfg.seed` under a given `theta*`, e.g. a test
/// set for a model trained on another draw.
pub fn generate_with_truth(cfg: &DataGenConfig, truth: &[f64]) -> Result<Dataset> {
    build(cfg, Some(truth))
}

/// Rounded sigmoid of a logit. `sigmoid(z) > 1/2` exactly when `z > 0`.
pub fn binary_label(logit: f64) -> f64 {
    if crate::glm::sigmoid(logit) > 0.5 {
        1.0
    } else {
        0.0
    }
}

/// Writes `x0,..,x{d-1},y` with one sample per line.
pub fn write_csv<W: Write>(ds: &Dataset, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<String> = (0..ds.dim()).map(|j| format!("x{j}")).collect();
    header.push("y".into());
    w.write_record(&header)?;
    let mut record = Vec::with_capacity(ds.dim() + 1);
    for i in 0..ds.len() {
        record.clear();
        for j in 0..ds.dim() {
            record.push(ds.features[(i, j)].to_string());
        }
        record.push(ds.responses[i].to_string());
        w.write_record(&record)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<R: Read>(reader: R) -> Result<Dataset> {
    let mut r = csv::Reader::from_reader(reader);
    let width = r.headers()?.len();
    if width < 2 {
        return Err(Error::Format("CSV needs at least one feature column and a response".into()));
    }
    let d = width - 1;
    let mut values = Vec::new();
    let mut responses = Vec::new();
    for record in r.records() {
        let record = record?;
        for (j, field) in record.iter().enumerate() {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| Error::Format(format!("not a number: '{field}'")))?;
            if j < d {
                values.push(v);
            } else {
                responses.push(v);
            }
        }
    }
    let features = DMatrix::from_row_slice(responses.len(), d, &values);
    Dataset::new(features, responses)
}

/// Magic bytes of the binary dataset layout.
pub const BINARY_MAGIC: &[u8; 8] = b"PBDSET\0\0";
pub const BINARY_VERSION: u32 = 1;

/// Binary layout (all little-endian):
///
/// ```text
/// magic    8 bytes  "PBDSET\0\0"
/// version  u32      = 1
/// flags    u32      bit 0: truth present, bit 1: noise sigma present
/// n        u64
/// d        u64
/// features n*d f64, row-major
/// response n f64
/// truth    d f64    (if flagged)
/// sigma    f64      (if flagged)
/// ```
pub fn write_binary<W: Write>(ds: &Dataset, writer: W) -> Result<()> {
    let mut w = BufWriter::new(writer);
    w.write_all(BINARY_MAGIC)?;
    w.write_all(&BINARY_VERSION.to_le_bytes())?;
    let flags = u32::from(ds.truth.is_some()) | (u32::from(ds.noise_sigma.is_some()) << 1);
    w.write_all(&flags.to_le_bytes())?;
    w.write_all(&(ds.len() as u64).to_le_bytes())?;
    w.write_all(&(ds.dim() as u64).to_le_bytes())?;
    for i in 0..ds.len() {
        for j in 0..ds.dim() {
            w.write_all(&ds.features[(i, j)].to_le_bytes())?;
        }
    }
    for v in &ds.responses {
        w.write_all(&v.to_le_bytes())?;
    }
    if let Some(t) = &ds.truth {
        for v in t {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    if let Some(s) = ds.noise_sigma {
        w.write_all(&s.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_binary<R: Read>(reader: R) -> Result<Dataset> {
    let mut r = std::io::BufReader::new(reader);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != BINARY_MAGIC {
        return Err(Error::Format("bad magic header".into()));
    }
    let version = read_u32(&mut r)?;
    if version != BINARY_VERSION {
        return Err(Error::Format(format!("unsupported binary version {version}")));
    }
    let flags = read_u32(&mut r)?;
    let n = read_u64(&mut r)? as usize;
    let d = read_u64(&mut r)? as usize;
    let values = read_f64s(&mut r, n.checked_mul(d).ok_or_else(|| Error::Format("size overflow".into()))?)?;
    let responses = read_f64s(&mut r, n)?;
    let truth = if flags & 1 != 0 { Some(read_f64s(&mut r, d)?) } else { None };
    let noise_sigma = if flags & 2 != 0 { Some(read_f64s(&mut r, 1)?[0]) } else { None };
    if !r.fill_buf()?.is_empty() {
        return Err(Error::Format("trailing bytes after dataset".into()));
    }
    let ds = Dataset {
        features: DMatrix::from_row_slice(n, d, &values),
        responses,
        truth,
        noise_sigma,
    };
    ds.validate()?;
    Ok(ds)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64s<R: Read>(r: &mut R, count: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(count);
    let mut b = [0u8; 8];
    for _ in 0..count {
        r.read_exact(&mut b)?;
        out.push(f64::from_le_bytes(b));
    }
    Ok(out)
}

/// Writes CSV or binary depending on the extension (`.bin` means binary).
pub fn save(ds: &Dataset, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    if path.extension().is_some_and(|e| e == "bin") {
        write_binary(ds, file)
    } else {
        write_csv(ds, BufWriter::new(file))
    }
}

pub fn load(path: &Path) -> Result<Dataset> {
    let file = std::fs::File::open(path)?;
    if path.extension().is_some_and(|e| e == "bin") {
        read_binary(file)
    } else {
        read_csv(std::io::BufReader::new(file))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(n: usize, d: usize, sigma: f64, task: Task, seed: u64) -> DataGenConfig {
        DataGenConfig::new(n, d, sigma, task, seed)
    }

    #[test]
    fn zero_noise_is_exactly_linear() {
        let ds = generate_linear_dataset(&cfg(500, 5, 0.0, Task::Linear, 3)).unwrap();
        let theta = DVector::from_column_slice(ds.truth.as_ref().unwrap());
        let fitted = &ds.features * theta;
        let resid: f64 = fitted
            .iter()
            .zip(&ds.responses)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!(resid < 1e-12);
    }

    #[test]
    fn same_seed_gives_identical_data() {
        let a = generate_linear_dataset(&cfg(200, 4, 0.1, Task::Linear, 11)).unwrap();
        let b = generate_linear_dataset(&cfg(200, 4, 0.1, Task::Linear, 11)).unwrap();
        let c = generate_linear_dataset(&cfg(200, 4, 0.1, Task::Linear, 12)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.features, c.features);
    }

    #[test]
    fn full_scale_shape() {
        let ds = generate_linear_dataset(&cfg(1 << 20, 8, 0.1, Task::Linear, 1)).unwrap();
        assert_eq!(ds.features.shape(), (1 << 20, 8));
        assert_eq!(ds.responses.len(), 1 << 20);
    }

    #[test]
    fn logistic_reuses_linear_draws() {
        let lin = generate_linear_dataset(&cfg(1000, 6, 0.1, Task::Linear, 9)).unwrap();
        let log = generate_logistic_dataset(&cfg(1000, 6, 0.1, Task::Logistic, 9)).unwrap();
        assert_eq!(lin.features, log.features);
        assert_eq!(lin.truth, log.truth);
        for (y_lin, y_log) in lin.responses.iter().zip(&log.responses) {
            assert_eq!(*y_log, if *y_lin > 0.0 { 1.0 } else { 0.0 });
        }
    }

    #[test]
    fn label_rounding() {
        assert_eq!(binary_label(0.7), 1.0);
        assert_eq!(binary_label(-0.7), 0.0);
    }

    #[test]
    fn logistic_labels_are_balanced() {
        let ds = generate_logistic_dataset(&cfg(100_000, 8, 0.1, Task::Logistic, 21)).unwrap();
        let frac = ds.responses.iter().sum::<f64>() / ds.len() as f64;
        assert!((frac - 0.5).abs() < 0.01, "fraction of ones {frac}");
    }

    #[test]
    fn empirical_covariance_converges_to_identity() {
        let (n, d) = (20_000, 5);
        let ds = generate_linear_dataset(&cfg(n, d, 0.1, Task::Linear, 5)).unwrap();
        let emp = ds.features.tr_mul(&ds.features) / n as f64;
        let err = (emp - DMatrix::<f64>::identity(d, d)).norm();
        assert!(err < 5.0 * d as f64 / (n as f64).sqrt(), "frobenius error {err}");
    }

    #[test]
    fn general_covariance_is_applied() {
        let mut c = cfg(40_000, 2, 0.0, Task::Linear, 8);
        c.feature_covariance = Some(vec![vec![2.0, 0.6], vec![0.6, 1.0]]);
        let ds = generate_linear_dataset(&c).unwrap();
        let emp = ds.features.tr_mul(&ds.features) / 40_000.0;
        assert!((emp[(0, 0)] - 2.0).abs() < 0.06);
        assert!((emp[(0, 1)] - 0.6).abs() < 0.04);
        assert!((emp[(1, 1)] - 1.0).abs() < 0.03);
    }

    #[test]
    fn non_pd_covariance_is_a_config_error() {
        let mut c = cfg(10, 2, 0.1, Task::Linear, 1);
        c.feature_covariance = Some(vec![vec![1.0, 2.0], vec![2.0, 1.0]]);
        assert!(matches!(generate_linear_dataset(&c), Err(Error::Config(_))));
        c.feature_covariance = Some(vec![vec![1.0, 0.5], vec![0.4, 1.0]]);
        assert!(matches!(generate_linear_dataset(&c), Err(Error::Config(_))));
    }

    #[test]
    fn wrong_task_is_rejected() {
        assert!(generate_linear_dataset(&cfg(10, 2, 0.1, Task::Logistic, 1)).is_err());
        assert!(generate_logistic_dataset(&cfg(10, 2, 0.1, Task::Linear, 1)).is_err());
    }

    #[test]
    fn csv_and_binary_round_trip() {
        let ds = generate_linear_dataset(&cfg(50, 3, 0.1, Task::Linear, 2)).unwrap();
        let mut buf = Vec::new();
        write_csv(&ds, &mut buf).unwrap();
        let back = read_csv(buf.as_slice()).unwrap();
        assert_eq!(back.features, ds.features);
        assert_eq!(back.responses, ds.responses);
        assert!(back.truth.is_none());

        let mut buf = Vec::new();
        write_binary(&ds, &mut buf).unwrap();
        assert_eq!(&buf[..8], BINARY_MAGIC);
        assert_eq!(read_binary(buf.as_slice()).unwrap(), ds);
        buf[8] = 9;
        assert!(read_binary(buf.as_slice()).is_err());
    }
}
