//! Datasets in the `[-1, 1]` box: synthetic toy laws, IDX image files, and
//! the CSV / PGM writers used for sample dumps.
//!
//! Synthetic generators apply an isotropic shrink `x -> s x` about the origin
//! with `s` fixed by the generator parameters, so that `max |x| <= 0.95` for
//! all but vanishingly rare draws; if a draw still escapes, `s` is reduced to
//! fit. The applied `s` is recorded in [`Dataset::scale`].

use std::f64::consts::{PI, TAU};
use std::fs;
use std::path::{Path, PathBuf};

use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::stream;
use crate::tensor::Tensor;

/// Largest absolute coordinate allowed after the shrink.
pub const BOX_MARGIN: f64 = 0.95;

/// Number of noise standard deviations budgeted beyond the noiseless extent.
const NOISE_REACH: f64 = 6.0;

pub const IDX_U8_MAGIC: u32 = 0x0000_0803;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// `N(mean, std^2 I)` before the shrink.
    Gaussian { mean: Vec<f64>, std: f64 },
    /// Isotropic components on a circle of `radius` in 2-D.
    GaussianMixture {
        #[serde(default = "default_modes")]
        modes: usize,
        #[serde(default = "default_radius")]
        radius: f64,
        #[serde(default = "default_mode_std")]
        std: f64,
        #[serde(default)]
        weights: Option<Vec<f64>>,
    },
    TwoMoons {
        #[serde(default = "default_moons_noise")]
        noise: f64,
    },
    SwissRoll {
        #[serde(default = "default_roll_noise")]
        noise: f64,
    },
    IdxImages { path: PathBuf },
}

fn default_modes() -> usize {
    8
}
fn default_radius() -> f64 {
    1.0
}
fn default_mode_std() -> f64 {
    0.05
}
fn default_moons_noise() -> f64 {
    0.05
}
fn default_roll_noise() -> f64 {
    0.02
}

impl DatasetSpec {
    /// The eight-mode ring with radius 1 and component std 0.05.
    pub fn ring() -> Self {
        DatasetSpec::GaussianMixture {
            modes: default_modes(),
            radius: default_radius(),
            std: default_mode_std(),
            weights: None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            DatasetSpec::Gaussian { .. } => "gaussian",
            DatasetSpec::GaussianMixture { .. } => "gaussian_mixture",
            DatasetSpec::TwoMoons { .. } => "two_moons",
            DatasetSpec::SwissRoll { .. } => "swiss_roll",
            DatasetSpec::IdxImages { .. } => "idx_images",
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        match self {
            DatasetSpec::Gaussian { mean, std } => {
                if mean.is_empty() || !(*std >= 0.0) || mean.iter().any(|m| !m.is_finite()) {
                    return bad(format!("gaussian needs a finite nonempty mean and std >= 0, got std {std}"));
                }
            }
            DatasetSpec::GaussianMixture { modes, radius, std, weights } => {
                if *modes == 0 || !(*radius >= 0.0) || !(*std >= 0.0) {
                    return bad(format!("mixture needs modes >= 1, radius >= 0, std >= 0"));
                }
                if let Some(w) = weights {
                    let sum: f64 = w.iter().sum();
                    if w.len() != *modes || w.iter().any(|v| !(*v >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
                        return bad(format!("mixture weights {w:?} must be {modes} nonnegative values summing to 1"));
                    }
                }
            }
            DatasetSpec::TwoMoons { noise } | DatasetSpec::SwissRoll { noise } => {
                if !(*noise >= 0.0) {
                    return bad(format!("noise must be >= 0, got {noise}"));
                }
            }
            DatasetSpec::IdxImages { .. } => {}
        }
        Ok(())
    }

    /// Noiseless extent plus the noise budget, before the shrink.
    fn nominal_extent(&self) -> f64 {
        match self {
            DatasetSpec::Gaussian { mean, std } => {
                mean.iter().fold(0.0f64, |m, v| m.max(v.abs())) + NOISE_REACH * std
            }
            DatasetSpec::GaussianMixture { radius, std, .. } => radius + NOISE_REACH * std,
            DatasetSpec::TwoMoons { noise } => 1.5 + NOISE_REACH * noise,
            DatasetSpec::SwissRoll { noise } => 1.0 + NOISE_REACH * noise,
            DatasetSpec::IdxImages { .. } => 1.0,
        }
    }

    pub fn data_dim(&self) -> Option<usize> {
        match self {
            DatasetSpec::Gaussian { mean, .. } => Some(mean.len()),
            DatasetSpec::IdxImages { .. } => None,
            _ => Some(2),
        }
    }

    /// Shrink factor the generator applies, absent escaping draws.
    pub fn nominal_scale(&self) -> f64 {
        (BOX_MARGIN / self.nominal_extent()).min(1.0)
    }
}

/// Samples stored as an `n x dim` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    samples: Tensor,
    labels: Option<Vec<u32>>,
    /// `(rows, cols)` for image data.
    pub image_shape: Option<(usize, usize)>,
    /// Shrink factor applied after generation; 1 for loaded images.
    pub scale: f64,
    pub seed: Option<u64>,
}

impl Dataset {
    pub fn new(spec: DatasetSpec, samples: Tensor, labels: Option<Vec<u32>>) -> Result<Self> {
        let (n, _) = samples.dims2()?;
        if n == 0 {
            return Err(Error::InvalidArgument("dataset is empty".into()));
        }
        if let Some(l) = &labels {
            if l.len() != n {
                return Err(Error::InvalidArgument(format!("{} labels for {n} samples", l.len())));
            }
        }
        if let Some(v) = samples.data().iter().find(|v| !(v.abs() <= 1.0)) {
            return Err(Error::InvalidArgument(format!("sample value {v} outside [-1, 1]")));
        }
        Ok(Self {
            spec,
            samples,
            labels,
            image_shape: None,
            scale: 1.0,
            seed: None,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.samples.shape()[1]
    }

    pub fn samples(&self) -> &Tensor {
        &self.samples
    }

    pub fn labels(&self) -> Option<&[u32]> {
        self.labels.as_deref()
    }

    /// Rows at `indices`, in order.
    pub fn batch(&self, indices: &[usize]) -> Tensor {
        let d = self.dim();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(self.samples.row(i));
        }
        Tensor::from_vec([indices.len(), d], data).expect("batch shape")
    }

    /// The same draws under shrink factor `scale` instead of `self.scale`,
    /// clamped to the box. Lets an evaluation set match a training set whose
    /// shrink was tightened by a rare escaping draw.
    pub fn rescaled(&self, scale: f64) -> Result<Dataset> {
        if !(scale > 0.0) || !(self.scale > 0.0) {
            return Err(Error::InvalidArgument(format!("scale {scale} must be positive")));
        }
        if scale == self.scale {
            return Ok(self.clone());
        }
        let f = scale / self.scale;
        let mut d = self.clone();
        d.samples = self.samples.map(|v| (v * f).clamp(-1.0, 1.0));
        d.scale = scale;
        Ok(d)
    }

    /// First `at` rows and the remainder.
    pub fn split(&self, at: usize) -> Result<(Dataset, Dataset)> {
        if at == 0 || at >= self.len() {
            return Err(Error::InvalidArgument(format!("split point {at} outside 1..{}", self.len())));
        }
        let part = |range: std::ops::Range<usize>| {
            let idx: Vec<usize> = range.collect();
            let mut d = self.clone();
            d.samples = self.batch(&idx);
            d.labels = self.labels.as_ref().map(|l| idx.iter().map(|&i| l[i]).collect());
            d
        };
        Ok((part(0..at), part(at..self.len())))
    }
}

/// Draws `n` points of a synthetic law; deterministic in `(spec, n, seed)`.
pub fn make_synthetic(spec: &DatasetSpec, n: usize, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::InvalidArgument("n must be at least 1".into()));
    }
    let mut rng = stream(seed, &format!("data/{}", spec.name()));
    let normal = |rng: &mut crate::rng::StreamRng| -> f64 { rng.sample(StandardNormal) };
    let (raw, labels, dim): (Vec<f64>, Option<Vec<u32>>, usize) = match spec {
        DatasetSpec::Gaussian { mean, std } => {
            let d = mean.len();
            let mut v = Vec::with_capacity(n * d);
            for _ in 0..n {
                for m in mean {
                    v.push(m + std * normal(&mut rng));
                }
            }
            (v, None, d)
        }
        DatasetSpec::GaussianMixture { modes, radius, std, weights } => {
            let w = weights.clone().unwrap_or_else(|| vec![1.0 / *modes as f64; *modes]);
            let pick = WeightedIndex::new(&w).map_err(|e| Error::InvalidArgument(e.to_string()))?;
            let mut v = Vec::with_capacity(2 * n);
            let mut labels = Vec::with_capacity(n);
            for _ in 0..n {
                let k = pick.sample(&mut rng);
                let angle = TAU * k as f64 / *modes as f64;
                v.push(radius * angle.cos() + std * normal(&mut rng));
                v.push(radius * angle.sin() + std * normal(&mut rng));
                labels.push(k as u32);
            }
            (v, Some(labels), 2)
        }
        DatasetSpec::TwoMoons { noise } => {
            let mut v = Vec::with_capacity(2 * n);
            let mut labels = Vec::with_capacity(n);
            let outer = n.div_ceil(2);
            for i in 0..n {
                let theta = PI * rng.random::<f64>();
                let (x, y, label) = if i < outer {
                    (theta.cos(), theta.sin(), 0)
                } else {
                    (1.0 - theta.cos(), 0.5 - theta.sin(), 1)
                };
                // Centre the pair of arcs on the origin.
                v.push(x - 0.5 + noise * normal(&mut rng));
                v.push(y - 0.25 + noise * normal(&mut rng));
                labels.push(label);
            }
            (v, Some(labels), 2)
        }
        DatasetSpec::SwissRoll { noise } => {
            let mut v = Vec::with_capacity(2 * n);
            let span = 4.5 * PI;
            for _ in 0..n {
                let t = 1.5 * PI * (1.0 + 2.0 * rng.random::<f64>());
                v.push(t * t.cos() / span + noise * normal(&mut rng));
                v.push(t * t.sin() / span + noise * normal(&mut rng));
            }
            (v, None, 2)
        }
        DatasetSpec::IdxImages { .. } => {
            return Err(Error::InvalidArgument("idx_images is loaded, not generated".into()));
        }
    };
    let scale = fit_scale(&raw, spec.nominal_scale());
    let samples = Tensor::from_vec([n, dim], raw.into_iter().map(|v| v * scale).collect())?;
    let mut ds = Dataset::new(spec.clone(), samples, labels)?;
    ds.scale = scale;
    ds.seed = Some(seed);
    Ok(ds)
}

/// Generated law for synthetic specs; the IDX file otherwise (the first
/// `n` images, or all of them when `n` is 0).
pub fn load_dataset(spec: &DatasetSpec, n: usize, seed: u64) -> Result<Dataset> {
    match spec {
        DatasetSpec::IdxImages { path } => {
            let ds = load_idx(path)?;
            if n == 0 || n >= ds.len() {
                Ok(ds)
            } else {
                Ok(ds.split(n)?.0)
            }
        }
        _ => make_synthetic(spec, n, seed),
    }
}

/// `nominal`, reduced if needed so every `|v| * scale <= BOX_MARGIN`.
fn fit_scale(raw: &[f64], nominal: f64) -> f64 {
    let peak = raw.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak * nominal > BOX_MARGIN {
        BOX_MARGIN / peak
    } else {
        nominal
    }
}

pub fn pixel_to_unit(p: u8) -> f64 {
    p as f64 / 127.5 - 1.0
}

/// Inverse of [`pixel_to_unit`], clamped and rounded to the nearest level.
pub fn unit_to_pixel(x: f64) -> u8 {
    ((x + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

/// Parses an unsigned-byte IDX file. The first dimension counts items; the
/// remaining ones are flattened into the sample vector.
pub fn parse_idx(bytes: &[u8], path: &Path) -> Result<Dataset> {
    let fail = |msg: String| Error::format(path, msg);
    if bytes.len() < 4 {
        return Err(fail("truncated header".into()));
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(fail(format!("bad magic {:02x?}", &bytes[..4])));
    }
    if bytes[2] != 0x08 {
        return Err(fail(format!("unsupported dtype code 0x{:02x}", bytes[2])));
    }
    let rank = bytes[3] as usize;
    if rank == 0 {
        return Err(fail("rank 0".into()));
    }
    let header = 4 + 4 * rank;
    if bytes.len() < header {
        return Err(fail("truncated dimension list".into()));
    }
    let dims: Vec<usize> = (0..rank)
        .map(|i| u32::from_be_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize)
        .collect();
    let n = dims[0];
    let dim: usize = dims[1..].iter().product::<usize>().max(1);
    if n == 0 {
        return Err(Error::InvalidArgument(format!("{}: no items", path.display())));
    }
    let need = n
        .checked_mul(dim)
        .ok_or_else(|| fail("dimension overflow".into()))?;
    let payload = &bytes[header..];
    if payload.len() < need {
        return Err(fail(format!("payload has {} bytes, expected {need}", payload.len())));
    }
    let data = payload[..need].iter().map(|p| pixel_to_unit(*p)).collect();
    let mut ds = Dataset::new(
        DatasetSpec::IdxImages { path: path.to_path_buf() },
        Tensor::from_vec([n, dim], data)?,
        None,
    )?;
    if rank == 3 {
        ds.image_shape = Some((dims[1], dims[2]));
    }
    Ok(ds)
}

pub fn load_idx(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_idx(&bytes, path)
}

/// Writes `samples` (`n x rows*cols`) as a rank-3 unsigned-byte IDX file.
pub fn save_idx(path: impl AsRef<Path>, samples: &Tensor, rows: usize, cols: usize) -> Result<()> {
    let path = path.as_ref();
    let (n, d) = samples.dims2()?;
    if d != rows * cols {
        return Err(Error::InvalidShape {
            shape: samples.shape().to_vec(),
            msg: format!("rows must have {rows}x{cols} entries"),
        });
    }
    let mut out = Vec::with_capacity(16 + n * d);
    out.extend(IDX_U8_MAGIC.to_be_bytes());
    for v in [n, rows, cols] {
        out.extend((v as u32).to_be_bytes());
    }
    out.extend(samples.data().iter().map(|x| unit_to_pixel(*x)));
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Binary PGM (P5, maxval 255) of one `rows x cols` image in `[-1, 1]`.
pub fn encode_pgm(pixels: &[f64], rows: usize, cols: usize) -> Result<Vec<u8>> {
    if pixels.len() != rows * cols {
        return Err(Error::InvalidArgument(format!(
            "{} pixels for a {rows}x{cols} image",
            pixels.len()
        )));
    }
    let mut out = format!("P5\n{cols} {rows}\n255\n").into_bytes();
    out.extend(pixels.iter().map(|x| unit_to_pixel(*x)));
    Ok(out)
}

/// Tiles the rows of `samples` into a grid `per_row` images wide.
pub fn write_pgm_grid(
    path: impl AsRef<Path>,
    samples: &Tensor,
    rows: usize,
    cols: usize,
    per_row: usize,
) -> Result<()> {
    let path = path.as_ref();
    let (n, d) = samples.dims2()?;
    if d != rows * cols || per_row == 0 {
        return Err(Error::InvalidArgument(format!("cannot tile {n}x{d} as {rows}x{cols} images")));
    }
    let grid_rows = n.div_ceil(per_row);
    let (h, w) = (grid_rows * rows, per_row.min(n) * cols);
    let mut canvas = vec![-1.0; h * w];
    for k in 0..n {
        let (gy, gx) = (k / per_row, k % per_row);
        for r in 0..rows {
            for c in 0..cols {
                canvas[(gy * rows + r) * w + gx * cols + c] = samples.at(k, r * cols + c);
            }
        }
    }
    fs::write(path, encode_pgm(&canvas, h, w)?).map_err(|e| Error::io(path, e))
}

/// Decodes a P5 file produced by [`encode_pgm`] back to `[-1, 1]`.
pub fn decode_pgm(bytes: &[u8]) -> std::result::Result<(usize, usize, Vec<f64>), String> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(format!("unsupported header {fields:?}"));
    }
    let cols: usize = fields[1].parse().map_err(|e| format!("width: {e}"))?;
    let rows: usize = fields[2].parse().map_err(|e| format!("height: {e}"))?;
    let body = &bytes[pos + 1..];
    if body.len() != rows * cols {
        return Err(format!("expected {} pixels, got {}", rows * cols, body.len()));
    }
    Ok((rows, cols, body.iter().map(|p| pixel_to_unit(*p)).collect()))
}

/// Column names `x, y` for 2-D data and `x0 .. x{d-1}` otherwise.
pub fn point_header(dim: usize) -> Vec<String> {
    if dim == 2 {
        vec!["x".into(), "y".into()]
    } else {
        (0..dim).map(|j| format!("x{j}")).collect()
    }
}

/// One point per row with a header row.
pub fn write_points_csv(path: impl AsRef<Path>, samples: &Tensor) -> Result<()> {
    let path = path.as_ref();
    let (n, d) = samples.dims2()?;
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(point_header(d)).map_err(|e| csv_error(path, e))?;
    for i in 0..n {
        w.write_record(samples.row(i).iter().map(|v| format!("{v:e}")))
            .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_points_csv(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let d = r.headers().map_err(|e| csv_error(path, e))?.len();
    let mut data = Vec::new();
    let mut n = 0;
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        if rec.len() != d {
            return Err(Error::format(path, format!("row {} has {} fields, expected {d}", n + 1, rec.len())));
        }
        for f in rec.iter() {
            data.push(
                f.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::format(path, format!("row {}: {e}", n + 1)))?,
            );
        }
        n += 1;
    }
    Tensor::from_vec([n, d], data)
}

pub(crate) fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::format(path, e.to_string())
}

/// Writes a table with a header row; every row must match the header width.
pub fn write_csv_table(path: impl AsRef<Path>, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(header).map_err(|e| csv_error(path, e))?;
    for row in rows {
        if row.len() != header.len() {
            return Err(Error::InvalidArgument(format!(
                "row has {} fields, header {}",
                row.len(),
                header.len()
            )));
        }
        w.write_record(row).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
