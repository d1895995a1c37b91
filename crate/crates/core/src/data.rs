//! Datasets: the 1-D regression curve with a gap, two moons, MNIST IDX files
//! and CSV export.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Inputs `x` (`N × D`) and labels `y` (`N × K`).
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub x: DMatrix<f64>,
    pub y: DMatrix<f64>,
    /// Free-form record of how the dataset was produced.
    pub provenance: String,
}

impl Dataset {
    pub fn new(name: &str, x: DMatrix<f64>, y: DMatrix<f64>) -> Result<Self> {
        if x.nrows() != y.nrows() {
            return Err(Error::Shape {
                context: "dataset rows",
                expected: x.nrows(),
                actual: y.nrows(),
            });
        }
        if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("dataset '{name}' has non-finite entries")));
        }
        Ok(Dataset {
            name: name.to_string(),
            x,
            y,
            provenance: String::new(),
        })
    }

    pub fn with_provenance(mut self, p: impl Into<String>) -> Self {
        self.provenance = p.into();
        self
    }

    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.nrows() == 0
    }

    pub fn input_dim(&self) -> usize {
        self.x.ncols()
    }

    pub fn x_row(&self, i: usize) -> Vec<f64> {
        self.x.row(i).iter().cloned().collect()
    }

    pub fn y_row(&self, i: usize) -> Vec<f64> {
        self.y.row(i).iter().cloned().collect()
    }

    /// Rows at `idx`, in that order.
    pub fn select(&self, idx: &[usize]) -> Dataset {
        Dataset {
            name: self.name.clone(),
            x: self.x.select_rows(idx),
            y: self.y.select_rows(idx),
            provenance: self.provenance.clone(),
        }
    }
}

/// Reads whitespace-separated `x y` lines. Blank lines and lines starting
/// with `#` are skipped.
pub fn load_snelson(path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(path)?;
    parse_xy(&text).map(|d| d.with_provenance(format!("file {}", path.display())))
}

pub fn parse_xy(text: &str) -> Result<Dataset> {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = t.split_whitespace().collect();
        if fields.len() != 2 {
            return Err(Error::Parse {
                line: lineno + 1,
                message: format!("expected 2 fields, found {}", fields.len()),
            });
        }
        let parse = |s: &str| {
            s.parse::<f64>().map_err(|_| Error::Parse {
                line: lineno + 1,
                message: format!("not a number: '{s}'"),
            })
        };
        xs.push(parse(fields[0])?);
        ys.push(parse(fields[1])?);
    }
    let n = xs.len();
    Dataset::new("snelson", DMatrix::from_vec(n, 1, xs), DMatrix::from_vec(n, 1, ys))
}

/// Removes every point whose first input coordinate lies in `[a, b]`.
pub fn apply_gap(ds: &Dataset, a: f64, b: f64) -> Result<Dataset> {
    if !(a < b) {
        return Err(Error::Domain(format!("gap interval [{a}, {b}] is empty")));
    }
    let keep: Vec<usize> = (0..ds.len())
        .filter(|&i| {
            let x = ds.x[(i, 0)];
            !(a..=b).contains(&x)
        })
        .collect();
    let mut out = ds.select(&keep);
    out.provenance = format!("{}; gap [{a}, {b}]", ds.provenance);
    Ok(out)
}

/// Seeded subsample of `n` rows without replacement, kept in original order.
/// Returns all rows when `n ≥ N`.
pub fn subsample(ds: &Dataset, n: usize, seed: u64) -> Dataset {
    if n >= ds.len() {
        return ds.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample(&mut rng, ds.len(), n).into_vec();
    idx.sort_unstable();
    let mut out = ds.select(&idx);
    out.provenance = format!("{}; subsample {n} seed {seed}", ds.provenance);
    out
}

/// Default gap interval for the 1-D regression data.
pub const SNELSON_GAP: (f64, f64) = (1.5, 3.0);
/// Training-set size after the gap.
pub const SNELSON_TRAIN_N: usize = 150;
/// Observation noise variance of the bundled regression data.
pub const SNELSON_NOISE_VAR: f64 = 0.09;
/// Input range of the bundled regression data and of its test draws.
pub const SNELSON_RANGE: (f64, f64) = (-0.5, 6.5);
/// Size and seed of the bundled file `data/snelson.txt`.
pub const SNELSON_FILE_N: usize = 200;
pub const SNELSON_FILE_SEED: u64 = 42;
pub const SNELSON_TEST_N: usize = 1000;

/// Removes the gap and subsamples the training set to `n_train` by `seed`.
pub fn snelson_train(full: &Dataset, gap: (f64, f64), n_train: usize, seed: u64) -> Result<Dataset> {
    Ok(subsample(&apply_gap(full, gap.0, gap.1)?, n_train, seed))
}

/// Fresh test draws from the generator of the bundled file, over its whole
/// input range including the gap.
pub fn snelson_test(n: usize, seed: u64) -> Dataset {
    gen_snelson_like(n, SNELSON_RANGE.0, SNELSON_RANGE.1, SNELSON_NOISE_VAR, seed)
}

/// Noise-free curve underlying the bundled regression data.
pub fn snelson_curve(x: f64) -> f64 {
    0.9 * (1.7 * x).sin() + 0.45 * (4.3 * x + 0.4).cos() * (-0.15 * x).exp() + 0.15 * x - 0.4
}

/// Draws `n` points with `x ~ U[lo, hi]` and `y = curve(x) + N(0, noise_var)`.
pub fn gen_snelson_like(n: usize, lo: f64, hi: f64, noise_var: f64, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sd = noise_var.sqrt();
    let mut xs: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    xs.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let ys: Vec<f64> = xs
        .iter()
        .map(|&x| snelson_curve(x) + sd * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Dataset::new("snelson", DMatrix::from_vec(n, 1, xs), DMatrix::from_vec(n, 1, ys))
        .expect("finite by construction")
        .with_provenance(format!("generated n={n} x~U[{lo},{hi}] noise_var={noise_var} seed={seed}"))
}

/// Serializes a 1-D dataset in the `x y` text format read by [`load_snelson`].
pub fn format_xy(ds: &Dataset) -> String {
    let mut s = String::new();
    for i in 0..ds.len() {
        s.push_str(&format!("{:.10} {:.10}\n", ds.x[(i, 0)], ds.y[(i, 0)]));
    }
    s
}

/// Two interleaved half circles. Class 0 lies on `(cos t, sin t)` and class 1
/// on `(1 − cos t, 0.5 − sin t)` with `t_j = π j / (n/2)`, `j = 0..n/2`,
/// plus isotropic Gaussian noise. Without noise every class-0 point has
/// second coordinate `≥ 0` and every class-1 point `≤ 0.5`.
pub fn gen_two_moons(n: usize, noise_sd: f64, seed: u64) -> Result<Dataset> {
    if !n.is_multiple_of(2) {
        return Err(Error::Domain(format!("two moons needs an even n, got {n}")));
    }
    if !(noise_sd >= 0.0) {
        return Err(Error::Domain("noise_sd must be non-negative".into()));
    }
    let m = n / 2;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = DMatrix::zeros(n, 2);
    let mut y = DMatrix::zeros(n, 1);
    for j in 0..m {
        let t = PI * j as f64 / m as f64;
        x[(j, 0)] = t.cos();
        x[(j, 1)] = t.sin();
        x[(m + j, 0)] = 1.0 - t.cos();
        x[(m + j, 1)] = 0.5 - t.sin();
        y[(m + j, 0)] = 1.0;
    }
    if noise_sd > 0.0 {
        for v in x.iter_mut() {
            *v += noise_sd * rng.sample::<f64, _>(StandardNormal);
        }
    }
    Ok(Dataset::new("two_moons", x, y)?
        .with_provenance(format!("generated n={n} noise_sd={noise_sd} seed={seed}")))
}

/// Raw IDX container (unsigned-byte payloads only).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxTensor {
    pub magic: [u8; 4],
    pub dims: Vec<u32>,
    pub payload: Vec<u8>,
}

impl IdxTensor {
    pub fn parse(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| Error::Parse { line: 0, message: m };
        if bytes.len() < 4 {
            return Err(bad("IDX header truncated".into()));
        }
        let magic = [bytes[0], bytes[1], bytes[2], bytes[3]];
        if magic[0] != 0 || magic[1] != 0 || magic[2] != 0x08 {
            return Err(bad(format!("bad IDX magic {magic:02x?}")));
        }
        let rank = magic[3] as usize;
        let header = 4 + 4 * rank;
        if bytes.len() < header {
            return Err(bad("IDX dimension header truncated".into()));
        }
        let dims: Vec<u32> = (0..rank)
            .map(|r| u32::from_be_bytes(bytes[4 + 4 * r..8 + 4 * r].try_into().expect("4 bytes")))
            .collect();
        let expected: usize = dims.iter().map(|&d| d as usize).product();
        let payload = &bytes[header..];
        if payload.len() != expected {
            return Err(bad(format!(
                "IDX payload has {} bytes, dims {dims:?} need {expected}",
                payload.len()
            )));
        }
        Ok(IdxTensor {
            magic,
            dims,
            payload: payload.to_vec(),
        })
    }

    pub fn rank(&self) -> usize {
        self.magic[3] as usize
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + 4 * self.dims.len() + self.payload.len());
        out.extend_from_slice(&self.magic);
        for d in &self.dims {
            out.extend_from_slice(&d.to_be_bytes());
        }
        out.extend_from_slice(&self.payload);
        out
    }
}

pub const IDX_IMAGES_MAGIC: [u8; 4] = [0, 0, 8, 3];
pub const IDX_LABELS_MAGIC: [u8; 4] = [0, 0, 8, 1];

/// Builds a dataset from IDX image and label tensors: pixels scaled to
/// `[0, 1]`, labels are the raw digits.
pub fn mnist_from_idx(images: &IdxTensor, labels: &IdxTensor) -> Result<Dataset> {
    if images.magic != IDX_IMAGES_MAGIC {
        return Err(Error::Parse { line: 0, message: format!("image magic {:02x?}", images.magic) });
    }
    if labels.magic != IDX_LABELS_MAGIC {
        return Err(Error::Parse { line: 0, message: format!("label magic {:02x?}", labels.magic) });
    }
    let n = images.dims[0] as usize;
    if labels.dims[0] as usize != n {
        return Err(Error::Shape {
            context: "MNIST images vs labels",
            expected: n,
            actual: labels.dims[0] as usize,
        });
    }
    let d = images.dims[1] as usize * images.dims[2] as usize;
    let x = DMatrix::from_fn(n, d, |i, j| images.payload[i * d + j] as f64 / 255.0);
    let y = DMatrix::from_fn(n, 1, |i, _| labels.payload[i] as f64);
    Dataset::new("mnist", x, y)
}

pub fn load_mnist_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let im = IdxTensor::parse(&fs::read(images)?)?;
    let lb = IdxTensor::parse(&fs::read(labels)?)?;
    Ok(mnist_from_idx(&im, &lb)?.with_provenance(format!("{} + {}", images.display(), labels.display())))
}

/// Keeps digits `negative` and `positive` and relabels them 0 and 1.
pub fn filter_digits(ds: &Dataset, negative: u8, positive: u8) -> Dataset {
    let keep: Vec<usize> = (0..ds.len())
        .filter(|&i| {
            let d = ds.y[(i, 0)];
            d == negative as f64 || d == positive as f64
        })
        .collect();
    let mut out = ds.select(&keep);
    out.y.iter_mut().for_each(|v| *v = if *v == positive as f64 { 1.0 } else { 0.0 });
    out.provenance = format!("{}; digits {negative}->0 {positive}->1", ds.provenance);
    out
}

/// Writes a header row and data rows with standard CSV quoting.
pub fn export_csv<S: AsRef<str>>(header: &[&str], rows: &[Vec<S>], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        if r.len() != header.len() {
            return Err(Error::Shape {
                context: "CSV row width",
                expected: header.len(),
                actual: r.len(),
            });
        }
        w.write_record(r.iter().map(|s| s.as_ref()))?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a CSV file written by [`export_csv`] back into header and rows.
pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.iter().map(String::from).collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        rows.push(rec?.iter().map(String::from).collect());
    }
    Ok((header, rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_three_lines_and_gap() {
        let ds = parse_xy("0 0\n1 1\n2 4\n").unwrap();
        assert_eq!(ds.len(), 3);
        let g = apply_gap(&ds, 0.5, 1.5).unwrap();
        assert_eq!(g.x.as_slice(), &[0.0, 2.0]);
        assert_eq!(g.y.as_slice(), &[0.0, 4.0]);
        assert!(apply_gap(&ds, 1.0, 1.0).is_err());
    }

    #[test]
    fn malformed_line_reports_line_number() {
        match parse_xy("0 0\n# note\n1 x\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse_xy("1 2 3\n"), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn subsample_properties() {
        let ds = gen_snelson_like(50, 0.0, 6.0, 0.09, 1);
        let all = subsample(&ds, 50, 3);
        assert_eq!(all, ds);
        let a = subsample(&ds, 20, 3);
        let b = subsample(&ds, 20, 3);
        assert_eq!(a, b);
        assert_eq!(a.len(), 20);
        assert!(a.x.as_slice().windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn two_moons_noise_free_geometry() {
        let ds = gen_two_moons(4, 0.0, 0).unwrap();
        let expected = [
            (1.0, 0.0, 0.0),
            (0.0, 1.0, 0.0),
            (0.0, 0.5, 1.0),
            (1.0, -0.5, 1.0),
        ];
        for (i, (a, b, c)) in expected.iter().enumerate() {
            assert!((ds.x[(i, 0)] - a).abs() < 1e-15);
            assert!((ds.x[(i, 1)] - b).abs() < 1e-15);
            assert_eq!(ds.y[(i, 0)], *c);
        }
        let big = gen_two_moons(200, 0.0, 0).unwrap();
        for i in 0..200 {
            if big.y[(i, 0)] == 0.0 {
                assert!(big.x[(i, 1)] >= 0.0);
            } else {
                assert!(big.x[(i, 1)] <= 0.5);
            }
        }
    }

    #[test]
    fn two_moons_balanced_and_seeded() {
        let a = gen_two_moons(150, 0.1, 11).unwrap();
        let b = gen_two_moons(150, 0.1, 11).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.y.iter().filter(|&&v| v == 1.0).count(), 75);
        assert!(gen_two_moons(151, 0.1, 11).is_err());
        assert_ne!(a, gen_two_moons(150, 0.1, 12).unwrap());
    }

    #[test]
    fn idx_header_and_round_trip() {
        let mut bytes = vec![0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 28, 0, 0, 0, 28];
        bytes.extend((0..1568).map(|i| (i % 256) as u8));
        let t = IdxTensor::parse(&bytes).unwrap();
        assert_eq!(t.rank(), 3);
        assert_eq!(t.dims, vec![2, 28, 28]);
        assert_eq!(t.payload.len(), 1568);
        assert_eq!(t.to_bytes(), bytes);
        assert!(IdxTensor::parse(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[2] = 9;
        assert!(IdxTensor::parse(&bad).is_err());
    }

    fn synthetic_mnist(labels: &[u8]) -> (IdxTensor, IdxTensor) {
        let n = labels.len() as u32;
        let images = IdxTensor {
            magic: IDX_IMAGES_MAGIC,
            dims: vec![n, 28, 28],
            payload: (0..n as usize * 784).map(|i| (i % 255) as u8).collect(),
        };
        let lab = IdxTensor {
            magic: IDX_LABELS_MAGIC,
            dims: vec![n],
            payload: labels.to_vec(),
        };
        (images, lab)
    }

    #[test]
    fn mnist_filter_and_scaling() {
        let (im, lb) = synthetic_mnist(&[0, 1, 2, 3, 4, 5, 6, 7, 8, 9]);
        let ds = mnist_from_idx(&im, &lb).unwrap();
        assert_eq!(ds.x.shape(), (10, 784));
        assert!(ds.x.iter().all(|&v| (0.0..=1.0).contains(&v)));
        let f = filter_digits(&ds, 4, 9);
        assert_eq!(f.len(), 2);
        assert_eq!(f.y.as_slice(), &[0.0, 1.0]);
        let (_, short) = synthetic_mnist(&[1, 2]);
        assert!(matches!(mnist_from_idx(&im, &short), Err(Error::Shape { .. })));
        assert!(mnist_from_idx(&lb, &im).is_err());
    }

    #[test]
    fn mnist_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (im, lb) = synthetic_mnist(&[4, 9, 9]);
        let ip = dir.path().join("img");
        let lp = dir.path().join("lab");
        fs::write(&ip, im.to_bytes()).unwrap();
        fs::write(&lp, lb.to_bytes()).unwrap();
        let ds = load_mnist_idx(&ip, &lp).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(IdxTensor::parse(&fs::read(&ip).unwrap()).unwrap(), im);
    }

    #[test]
    fn csv_round_trip_and_quoting() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.csv");
        export_csv::<String>(&["a", "b"], &[], &p).unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "a,b\n");
        let rows = vec![vec!["1".to_string(), "x,y".to_string()], vec!["2".into(), "plain".into()]];
        export_csv(&["a", "b"], &rows, &p).unwrap();
        assert!(fs::read_to_string(&p).unwrap().contains("\"x,y\""));
        let (h, back) = read_csv(&p).unwrap();
        assert_eq!(h, vec!["a", "b"]);
        assert_eq!(back, rows);
        assert!(export_csv(&["a"], &rows, &p).is_err());
    }

    #[test]
    fn xy_format_round_trip() {
        let ds = gen_snelson_like(10, 0.0, 6.0, 0.09, 2);
        let back = parse_xy(&format_xy(&ds)).unwrap();
        assert!((back.x.clone() - ds.x.clone()).amax() < 1e-9);
        assert!((back.y - ds.y).amax() < 1e-9);
    }
}
