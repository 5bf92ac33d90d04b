//! Datasets: CSV ingestion, standardization, splitting, synthetic
//! generators, and grid and image files.
//!
//! All randomness comes from `ChaCha20Rng` (the ChaCha stream cipher with 20
//! rounds used as a counter-based generator) seeded through
//! `SeedableRng::seed_from_u64`, and Gaussian draws use the
//! `rand_distr::StandardNormal` ziggurat sampler. A seed therefore pins every
//! generated dataset bit for bit.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, GpError, Result};
use crate::gridgp::GridSpec;
use crate::kernels::Kernel;
use crate::linalg::cholesky_jittered;
use crate::oracle::sigmoid;
use crate::statespace::sort_permutation;

/// Row-wise inputs with one target per row.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub x: DMatrix<f64>,
    pub y: Vec<f64>,
    /// Noise-free latent function values, when the data were generated.
    pub latent: Option<Vec<f64>>,
    /// Rows dropped at load time because a cell was missing or non-finite.
    pub rejected_rows: usize,
    /// Where the data came from, e.g. a file path or a generator call.
    pub provenance: String,
}

impl Dataset {
    pub fn new(x: DMatrix<f64>, y: Vec<f64>, provenance: impl Into<String>) -> Result<Self> {
        if x.nrows() != y.len() {
            return Err(invalid(format!(
                "{} input rows but {} targets",
                x.nrows(),
                y.len()
            )));
        }
        Ok(Self {
            x,
            y,
            latent: None,
            rejected_rows: 0,
            provenance: provenance.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn n_dims(&self) -> usize {
        self.x.ncols()
    }

    /// The rows listed in `idx`, in that order.
    pub fn subset(&self, idx: &[usize]) -> Self {
        let d = self.x.ncols();
        Self {
            x: DMatrix::from_fn(idx.len(), d, |i, j| self.x[(idx[i], j)]),
            y: idx.iter().map(|&i| self.y[i]).collect(),
            latent: self
                .latent
                .as_ref()
                .map(|f| idx.iter().map(|&i| f[i]).collect()),
            rejected_rows: 0,
            provenance: self.provenance.clone(),
        }
    }
}

/// Per-column affine map to zero mean and unit variance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub means: Vec<f64>,
    /// Population standard deviations; constant columns get scale 1.
    pub scales: Vec<f64>,
}

impl Standardizer {
    pub fn fit(x: &DMatrix<f64>) -> Self {
        let n = x.nrows().max(1) as f64;
        let means: Vec<f64> = x.column_iter().map(|c| c.sum() / n).collect();
        let scales = x
            .column_iter()
            .zip(&means)
            .map(|(c, m)| {
                let s = (c.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt();
                if s > 0.0 && s.is_finite() {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Self { means, scales }
    }

    pub fn apply(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check(x)?;
        Ok(DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| {
            (x[(i, j)] - self.means[j]) / self.scales[j]
        }))
    }

    pub fn invert(&self, z: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check(z)?;
        Ok(DMatrix::from_fn(z.nrows(), z.ncols(), |i, j| {
            z[(i, j)] * self.scales[j] + self.means[j]
        }))
    }

    fn check(&self, x: &DMatrix<f64>) -> Result<()> {
        if x.ncols() == self.means.len() {
            Ok(())
        } else {
            Err(GpError::Shape {
                dim: 1,
                detail: format!(
                    "standardizer has {} columns, input has {}",
                    self.means.len(),
                    x.ncols()
                ),
            })
        }
    }
}

/// Which CSV column holds the target.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub enum TargetColumn {
    #[default]
    Last,
    Index(usize),
    /// A header name; requires a header row.
    Name(String),
}

impl std::str::FromStr for TargetColumn {
    type Err = GpError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "last" | "" => Ok(Self::Last),
            t => Ok(t
                .parse::<usize>()
                .map(Self::Index)
                .unwrap_or_else(|_| Self::Name(t.to_string()))),
        }
    }
}

fn is_missing(cell: &str) -> bool {
    matches!(
        cell.to_ascii_lowercase().as_str(),
        "" | "na" | "nan" | "?" | "null"
    )
}

/// Parses CSV text from any reader. See [`load_csv`].
pub fn read_csv<R: Read>(
    reader: R,
    target: &TargetColumn,
    has_header: bool,
    provenance: &str,
) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(has_header)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let target_idx = |width: usize, headers: Option<&csv::StringRecord>| -> Result<usize> {
        match target {
            TargetColumn::Last => Ok(width - 1),
            TargetColumn::Index(i) if *i < width => Ok(*i),
            TargetColumn::Index(i) => Err(invalid(format!(
                "target column {i} out of range for {width} columns"
            ))),
            TargetColumn::Name(name) => headers
                .and_then(|h| h.iter().position(|c| c == name))
                .ok_or_else(|| invalid(format!("no column named {name:?}"))),
        }
    };
    let headers = if has_header {
        Some(
            rdr.headers()
                .map_err(|e| GpError::Parse {
                    line: 1,
                    detail: e.to_string(),
                })?
                .clone(),
        )
    } else {
        None
    };
    let mut width: Option<usize> = headers.as_ref().map(|h| h.len());
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut rejected = 0;
    let mut record = csv::StringRecord::new();
    loop {
        let more = rdr.read_record(&mut record).map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            GpError::Parse {
                line,
                detail: e.to_string(),
            }
        })?;
        if !more {
            break;
        }
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() == 1 && record[0].is_empty() {
            continue;
        }
        let w = *width.get_or_insert(record.len());
        if record.len() != w {
            return Err(GpError::Parse {
                line,
                detail: format!("expected {w} fields, found {}", record.len()),
            });
        }
        let mut row = Vec::with_capacity(w);
        let mut missing = false;
        for (j, cell) in record.iter().enumerate() {
            if is_missing(cell) {
                missing = true;
                continue;
            }
            let v: f64 = cell.parse().map_err(|_| GpError::Parse {
                line,
                detail: format!("column {}: {cell:?} is not a number", j + 1),
            })?;
            if !v.is_finite() {
                missing = true;
            }
            row.push(v);
        }
        if missing {
            rejected += 1;
        } else {
            rows.push(row);
        }
    }
    let width = match width {
        Some(w) if !rows.is_empty() || rejected > 0 => w,
        _ => return Err(invalid("no data rows")),
    };
    if width < 2 {
        return Err(invalid(
            "need at least one input column and a target column",
        ));
    }
    let t = target_idx(width, headers.as_ref())?;
    let n = rows.len();
    let x = DMatrix::from_fn(n, width - 1, |i, j| rows[i][if j < t { j } else { j + 1 }]);
    let y = rows.iter().map(|r| r[t]).collect();
    let mut ds = Dataset::new(x, y, provenance)?;
    ds.rejected_rows = rejected;
    Ok(ds)
}

/// Loads a numeric CSV file. Rows with empty, `NA`, `NaN` or non-finite
/// cells are dropped and counted in [`Dataset::rejected_rows`]; any other
/// non-numeric cell is a parse error carrying its line number.
pub fn load_csv(
    path: impl AsRef<Path>,
    target: &TargetColumn,
    has_header: bool,
) -> Result<Dataset> {
    let path = path.as_ref();
    let file = fs::File::open(path)?;
    read_csv(file, target, has_header, &path.display().to_string())
}

/// Writes inputs followed by the target as the last column.
pub fn write_csv(path: impl AsRef<Path>, ds: &Dataset) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| invalid(e.to_string()))?;
    let d = ds.n_dims();
    let header: Vec<String> = (1..=d)
        .map(|j| format!("x{j}"))
        .chain(std::iter::once("y".to_string()))
        .collect();
    w.write_record(&header)
        .map_err(|e| invalid(e.to_string()))?;
    for i in 0..ds.len() {
        let row: Vec<String> = (0..d)
            .map(|j| format!("{:?}", ds.x[(i, j)]))
            .chain(std::iter::once(format!("{:?}", ds.y[i])))
            .collect();
        w.write_record(&row).map_err(|e| invalid(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Exact draw of a zero-mean GP at the inputs `x` (any order).
///
/// Uses a dense Cholesky factor for up to 3000 points and sequential
/// state-space simulation along the sorted inputs beyond that.
pub fn sample_gp<R: Rng + ?Sized>(x: &[f64], kernel: &Kernel, rng: &mut R) -> Result<Vec<f64>> {
    let n = x.len();
    if n <= 3000 {
        let k = kernel.matrix(x, x);
        let (chol, _) = cholesky_jittered(&k, &[0.0, 1e-12, 1e-10, 1e-8, 1e-6])?;
        let z = nalgebra::DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        return Ok((chol.l() * z).iter().copied().collect());
    }
    let ssm = kernel.to_state_space();
    let m = ssm.order();
    let perm = sort_permutation(x);
    let mut out = vec![0.0; n];
    let draw = |l: &crate::linalg::SmallMat, rng: &mut R| {
        let mut e = crate::linalg::SmallVec::zeros(m);
        for i in 0..m {
            e[i] = rng.sample(StandardNormal);
        }
        l.mul_vec(&e)
    };
    let mut state = draw(&ssm.stationary_cov().psd_cholesky(), rng);
    out[perm[0]] = ssm.emission().dot(&state);
    for t in 1..n {
        let disc = ssm.discretize(x[perm[t]] - x[perm[t - 1]])?;
        state = disc.phi.mul_vec(&state) + draw(&disc.q.psd_cholesky(), rng);
        out[perm[t]] = ssm.emission().dot(&state);
    }
    Ok(out)
}

fn uniform_inputs(rng: &mut ChaCha20Rng, n: usize, d: usize) -> DMatrix<f64> {
    let mut x = DMatrix::zeros(n, d);
    for i in 0..n {
        for j in 0..d {
            x[(i, j)] = rng.random::<f64>();
        }
    }
    x
}

fn additive_latent(
    rng: &mut ChaCha20Rng,
    x: &DMatrix<f64>,
    kernels: &[Kernel],
) -> Result<Vec<f64>> {
    let mut f = vec![0.0; x.nrows()];
    for (j, k) in kernels.iter().enumerate() {
        let col: Vec<f64> = x.column(j).iter().copied().collect();
        for (fi, v) in f.iter_mut().zip(sample_gp(&col, k, rng)?) {
            *fi += v;
        }
    }
    Ok(f)
}

/// Regression data `y = Σ_d f_d(x_d) + ε` with inputs uniform on `[0,1]^D`,
/// independent draws `f_d ~ GP(0, kernel)` and `ε ~ N(0, noise)`.
pub fn gen_additive(n: usize, d: usize, kernel: &Kernel, noise: f64, seed: u64) -> Result<Dataset> {
    if n == 0 || d == 0 {
        return Err(invalid("need N ≥ 1 and D ≥ 1"));
    }
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(invalid("noise variance must be non-negative"));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let x = uniform_inputs(&mut rng, n, d);
    let f = additive_latent(&mut rng, &x, &vec![*kernel; d])?;
    let sd = noise.sqrt();
    let y = f
        .iter()
        .map(|v| v + sd * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let mut ds = Dataset::new(
        x,
        y,
        format!("gen_additive(n={n}, d={d}, kernel={kernel}, noise={noise}, seed={seed})"),
    )?;
    ds.latent = Some(f);
    Ok(ds)
}

/// Binary labels `y_i ~ Bernoulli(σ(f_i))` with `f = Σ_d f_d(x_d)`, one
/// kernel per input dimension, and inputs uniform on `[0,1]^D`.
pub fn gen_classification(n: usize, kernels: &[Kernel], seed: u64) -> Result<Dataset> {
    let d = kernels.len();
    if n == 0 || d == 0 {
        return Err(invalid("need N ≥ 1 and at least one kernel"));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let x = uniform_inputs(&mut rng, n, d);
    let f = additive_latent(&mut rng, &x, kernels)?;
    let y = f
        .iter()
        .map(|&v| {
            if rng.random::<f64>() < sigmoid(v) {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    let mut ds = Dataset::new(
        x,
        y,
        format!("gen_classification(n={n}, d={d}, seed={seed})"),
    )?;
    ds.latent = Some(f);
    Ok(ds)
}

/// Regression data with an interaction, `y = x_1 x_2 + ε`, with inputs
/// uniform on `[0,1]^D` (`D ≥ 2`; further columns are irrelevant).
pub fn gen_product(n: usize, d: usize, noise: f64, seed: u64) -> Result<Dataset> {
    if n == 0 || d < 2 {
        return Err(invalid("need N ≥ 1 and D ≥ 2"));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let x = uniform_inputs(&mut rng, n, d);
    let f: Vec<f64> = (0..n).map(|i| x[(i, 0)] * x[(i, 1)]).collect();
    let sd = noise.max(0.0).sqrt();
    let y = f
        .iter()
        .map(|v| v + sd * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let mut ds = Dataset::new(
        x,
        y,
        format!("gen_product(n={n}, d={d}, noise={noise}, seed={seed})"),
    )?;
    ds.latent = Some(f);
    Ok(ds)
}

/// Uniform random split without replacement. Both parts keep the original
/// relative row order.
pub fn split(ds: &Dataset, n_test: usize, seed: u64) -> Result<(Dataset, Dataset)> {
    let n = ds.len();
    if n_test >= n && n_test > 0 {
        return Err(invalid(format!("cannot hold out {n_test} of {n} rows")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha20Rng::seed_from_u64(seed));
    let mut test: Vec<usize> = idx[..n_test].to_vec();
    let mut train: Vec<usize> = idx[n_test..].to_vec();
    test.sort_unstable();
    train.sort_unstable();
    Ok((ds.subset(&train), ds.subset(&test)))
}

/// Values on a Cartesian grid, with the last axis varying fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct GridData {
    pub spec: GridSpec,
    pub values: Vec<f64>,
}

impl GridData {
    pub fn new(spec: GridSpec, values: Vec<f64>) -> Result<Self> {
        if values.len() != spec.len() {
            return Err(invalid(format!(
                "grid has {} points but {} values were given",
                spec.len(),
                values.len()
            )));
        }
        Ok(Self { spec, values })
    }
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    axes: Vec<Vec<f64>>,
    order: String,
}

const ORDER: &str = "dimD-fastest";

/// On-disk encodings of a grid tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GridFormat {
    /// Whitespace, comma or newline separated decimal values.
    Csv,
    /// Little-endian IEEE-754 doubles.
    Binary,
}

impl GridFormat {
    pub fn from_path(path: &Path) -> Self {
        match path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase)
            .as_deref()
        {
            Some("csv" | "txt") => Self::Csv,
            _ => Self::Binary,
        }
    }
}

/// `<path>.json`, the sidecar holding the axes of a grid file.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Reads a grid tensor and its JSON sidecar `{axes, order}`.
pub fn read_grid(path: impl AsRef<Path>) -> Result<GridData> {
    let path = path.as_ref();
    let side: Sidecar =
        serde_json::from_str(&fs::read_to_string(sidecar_path(path))?).map_err(|e| {
            GpError::Parse {
                line: e.line(),
                detail: e.to_string(),
            }
        })?;
    if side.order != ORDER {
        return Err(GpError::UnsupportedFormat(format!(
            "grid order {:?}; only {ORDER:?} is supported",
            side.order
        )));
    }
    let spec = GridSpec::new(side.axes)?;
    let values = match GridFormat::from_path(path) {
        GridFormat::Csv => {
            let text = fs::read_to_string(path)?;
            let mut vals = Vec::new();
            for (ln, line) in text.lines().enumerate() {
                for tok in line
                    .split([',', ' ', '\t', ';'])
                    .filter(|t| !t.trim().is_empty())
                {
                    vals.push(tok.trim().parse::<f64>().map_err(|_| GpError::Parse {
                        line: ln + 1,
                        detail: format!("{tok:?} is not a number"),
                    })?);
                }
            }
            vals
        }
        GridFormat::Binary => {
            let bytes = fs::read(path)?;
            if bytes.len() % 8 != 0 {
                return Err(GpError::UnsupportedFormat(format!(
                    "{} bytes is not a whole number of doubles",
                    bytes.len()
                )));
            }
            bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect()
        }
    };
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(invalid(format!("grid value {i} is not finite")));
    }
    GridData::new(spec, values)
}

/// Writes a grid tensor in the format implied by the extension, plus its sidecar.
pub fn write_grid(path: impl AsRef<Path>, grid: &GridData) -> Result<()> {
    let path = path.as_ref();
    match GridFormat::from_path(path) {
        GridFormat::Csv => {
            let last = *grid
                .spec
                .shape()
                .last()
                .expect("grid has at least one axis");
            let mut s = String::new();
            for row in grid.values.chunks(last) {
                let cells: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
                s.push_str(&cells.join(","));
                s.push('\n');
            }
            fs::write(path, s)?;
        }
        GridFormat::Binary => {
            let bytes: Vec<u8> = grid.values.iter().flat_map(|v| v.to_le_bytes()).collect();
            fs::write(path, bytes)?;
        }
    }
    let side = Sidecar {
        axes: grid.spec.axes().to_vec(),
        order: ORDER.into(),
    };
    fs::write(
        sidecar_path(path),
        serde_json::to_string_pretty(&side).map_err(|e| invalid(e.to_string()))?,
    )?;
    Ok(())
}

/// Loads an image as a two-axis grid: rows first, columns fastest, pixel
/// coordinates `0, 1, …` on both axes and intensities scaled to `[0, 1]`.
/// Colour images are converted to luma.
pub fn load_image(path: impl AsRef<Path>) -> Result<GridData> {
    let img = image::open(path.as_ref())
        .map_err(|e| GpError::UnsupportedFormat(e.to_string()))?
        .to_luma8();
    let (w, h) = img.dimensions();
    let spec = GridSpec::new(vec![
        (0..h).map(f64::from).collect(),
        (0..w).map(f64::from).collect(),
    ])?;
    let values = img.pixels().map(|p| f64::from(p.0[0]) / 255.0).collect();
    GridData::new(spec, values)
}

/// Saves a two-axis grid as an 8-bit grayscale image (PNG or PGM by
/// extension), clamping values to `[0, 1]`.
pub fn save_image(path: impl AsRef<Path>, grid: &GridData) -> Result<()> {
    let shape = grid.spec.shape();
    if shape.len() != 2 {
        return Err(GpError::Shape {
            dim: shape.len(),
            detail: "images need exactly two axes".into(),
        });
    }
    let (h, w) = (shape[0] as u32, shape[1] as u32);
    let px: Vec<u8> = grid
        .values
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let img = image::GrayImage::from_raw(w, h, px).expect("buffer matches the grid shape");
    img.save(path.as_ref())
        .map_err(|e| GpError::UnsupportedFormat(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standardizer_round_trips() {
        let x = DMatrix::from_fn(7, 3, |i, j| (i * i) as f64 * 0.3 - j as f64 * 10.0 + 1e3);
        let s = Standardizer::fit(&x);
        let z = s.apply(&x).unwrap();
        for c in z.column_iter() {
            assert!((c.sum() / 7.0).abs() < 1e-9);
            assert!((c.iter().map(|v| v * v).sum::<f64>() / 7.0 - 1.0).abs() < 1e-9);
        }
        let back = s.invert(&z).unwrap();
        assert!((back - x).abs().max() < 1e-12 * 1e3);
    }

    #[test]
    fn named_target_column() {
        let text = "a,target,b\n1,2,3\n4,5,6\n";
        let ds = read_csv(
            text.as_bytes(),
            &TargetColumn::Name("target".into()),
            true,
            "inline",
        )
        .unwrap();
        assert_eq!(ds.y, vec![2.0, 5.0]);
        assert_eq!(ds.x, DMatrix::from_row_slice(2, 2, &[1.0, 3.0, 4.0, 6.0]));
    }

    #[test]
    fn large_draws_use_the_state_space_simulator() {
        let k = Kernel::matern72(1.0, 1.0).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let x: Vec<f64> = (0..4000).map(|i| i as f64 * 1e-2).collect();
        let f = sample_gp(&x, &k, &mut rng).unwrap();
        let var = f.iter().map(|v| v * v).sum::<f64>() / f.len() as f64;
        assert!(var > 0.2 && var < 5.0);
        let rough = f
            .windows(2)
            .map(|w| (w[1] - w[0]).abs())
            .fold(0.0, f64::max);
        assert!(rough < 0.1);
    }
}
