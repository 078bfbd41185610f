//! Synthetic datasets, dataset files and image grids.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::rng::StreamRng;
use crate::tensor::Tensor;

const EBMD_MAGIC: &[u8; 4] = b"EBMD";
const EBMD_VERSION: u32 = 1;

/// `n` examples of a common shape, stored as `f32` exactly as on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    shape: Vec<usize>,
    data: Vec<f32>,
    labels: Option<Vec<u32>>,
}

impl Dataset {
    pub fn new(shape: Vec<usize>, data: Vec<f32>, labels: Option<Vec<u32>>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::dim("dataset", format!("example shape {:?} must have positive extents", shape)));
        }
        let per: usize = shape.iter().product();
        if data.len() % per != 0 {
            return Err(Error::dim(
                "dataset",
                format!("{} values do not split into examples of {}", data.len(), per),
            ));
        }
        let n = data.len() / per;
        if let Some(l) = &labels {
            if l.len() != n {
                return Err(Error::dim("dataset", format!("{} labels for {} examples", l.len(), n)));
            }
        }
        Ok(Dataset { shape, data, labels })
    }

    /// Vector data from an `[n, d]` tensor, rounded to `f32`.
    pub fn from_tensor(x: &Tensor, labels: Option<Vec<u32>>) -> Result<Self> {
        if x.rank() != 2 {
            return Err(Error::dim("dataset", "expected an [n, d] matrix"));
        }
        Self::new(vec![x.cols()], x.data().iter().map(|&v| v as f32).collect(), labels)
    }

    pub fn n(&self) -> usize {
        self.data.len() / self.example_len()
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn example_len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn labels(&self) -> Option<&[u32]> {
        self.labels.as_deref()
    }

    pub fn example(&self, i: usize) -> &[f32] {
        let d = self.example_len();
        &self.data[i * d..(i + 1) * d]
    }

    /// `(H, W)` grayscale or `(H, W, 3)` color.
    pub fn is_image(&self) -> bool {
        match self.shape.as_slice() {
            [_, _] => true,
            [_, _, c] => *c == 3,
            _ => false,
        }
    }

    /// Examples as rows of an `[n, prod(shape)]` matrix.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::matrix(self.n(), self.example_len(), self.data.iter().map(|&v| v as f64).collect())
            .expect("length checked at construction")
    }

    /// Keeps the examples for which `keep` holds.
    pub fn filter(&self, mut keep: impl FnMut(usize, Option<u32>) -> bool) -> Dataset {
        let d = self.example_len();
        let mut data = Vec::new();
        let mut labels = self.labels.as_ref().map(|_| Vec::new());
        for i in 0..self.n() {
            let label = self.labels.as_ref().map(|l| l[i]);
            if keep(i, label) {
                data.extend_from_slice(&self.data[i * d..(i + 1) * d]);
                if let (Some(out), Some(l)) = (labels.as_mut(), label) {
                    out.push(l);
                }
            }
        }
        Dataset {
            shape: self.shape.clone(),
            data,
            labels,
        }
    }

    /// Largest absolute coordinate.
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, &v| m.max((v as f64).abs()))
    }
}

fn sample_label(rng: &mut StreamRng, k: usize) -> usize {
    rng.random_range(0..k)
}

fn normal(rng: &mut StreamRng) -> f64 {
    StandardNormal.sample(rng)
}

/// Equal-weight Gaussian mixture; labels are component indices.
pub fn gen_mixture(n: usize, centers: &[Vec<f64>], std: f64, rng: &mut StreamRng) -> Result<Dataset> {
    let d = centers.first().map(|c| c.len()).unwrap_or(0);
    if d == 0 || centers.iter().any(|c| c.len() != d) {
        return Err(Error::Config("mixture centers must be nonempty vectors of equal length".into()));
    }
    if !(std > 0.0 && std.is_finite()) {
        return Err(Error::Config(format!("mixture std must be positive, got {}", std)));
    }
    let mut data = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let k = sample_label(rng, centers.len());
        for &c in &centers[k] {
            data.push((c + std * normal(rng)) as f32);
        }
        labels.push(k as u32);
    }
    Dataset::new(vec![d], data, Some(labels))
}

/// `k` centers evenly spaced on a circle of the given radius.
pub fn circle_centers(k: usize, radius: f64) -> Vec<Vec<f64>> {
    (0..k)
        .map(|i| {
            let a = 2.0 * std::f64::consts::PI * i as f64 / k as f64;
            vec![radius * a.cos(), radius * a.sin()]
        })
        .collect()
}

/// Spiral arms: a radial/tangential Gaussian blob per arm, bent by an
/// angle that grows with radius.
pub fn gen_pinwheel(n: usize, arms: usize, rng: &mut StreamRng) -> Result<Dataset> {
    if arms == 0 {
        return Err(Error::Config("pinwheel needs at least one arm".into()));
    }
    let (radial_std, tangential_std, rate) = (0.3, 0.05, 0.25);
    let mut data = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let k = sample_label(rng, arms);
        let r = 1.0 + radial_std * normal(rng);
        let t = tangential_std * normal(rng);
        let angle = 2.0 * std::f64::consts::PI * k as f64 / arms as f64 + rate * r.exp();
        let (s, c) = angle.sin_cos();
        data.push((c * r - s * t) as f32);
        data.push((s * r + c * t) as f32);
        labels.push(k as u32);
    }
    Dataset::new(vec![2], data, Some(labels))
}

/// Concentric rings with radial noise 0.05, labeled by ring.
pub fn gen_rings(n: usize, radii: &[f64], rng: &mut StreamRng) -> Result<Dataset> {
    if radii.is_empty() || radii.iter().any(|r| !(*r > 0.0)) {
        return Err(Error::Config("rings need positive radii".into()));
    }
    let mut data = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let k = sample_label(rng, radii.len());
        let a = rng.random_range(0.0..2.0 * std::f64::consts::PI);
        let r = radii[k] + 0.05 * normal(rng);
        data.push((r * a.cos()) as f32);
        data.push((r * a.sin()) as f32);
        labels.push(k as u32);
    }
    Dataset::new(vec![2], data, Some(labels))
}

fn format_err(path: &Path, offset: u64, msg: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        offset,
        msg: msg.into(),
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(format_err(
                self.path,
                self.bytes.len() as u64,
                format!("truncated while reading {} ({} bytes needed at offset {})", what, n, self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32_le(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u32_be(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_be_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

/// Loads `.ebmd`, `.csv` or IDX (`-idx3-ubyte`) data, chosen by content
/// and extension.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path)?;
    if bytes.starts_with(EBMD_MAGIC) {
        return parse_ebmd(&bytes, path);
    }
    if bytes.len() >= 4 && bytes[..4] == [0, 0, 8, 3] {
        return parse_idx_images(&bytes, path);
    }
    let is_csv = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    if is_csv {
        return parse_csv(&bytes, path);
    }
    Err(format_err(path, 0, "unrecognized dataset format (expected EBMD magic, IDX magic or .csv)"))
}

fn parse_ebmd(bytes: &[u8], path: &Path) -> Result<Dataset> {
    let mut r = Reader { bytes, pos: 0, path };
    r.take(4, "magic")?;
    let version = r.u32_le("version")?;
    if version != EBMD_VERSION {
        return Err(format_err(path, 4, format!("unsupported version {}", version)));
    }
    let n = r.u32_le("count")? as usize;
    let rank = r.u32_le("rank")? as usize;
    if rank == 0 || rank > 8 {
        return Err(format_err(path, 12, format!("invalid rank {}", rank)));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let at = r.pos as u64;
        let d = r.u32_le("dims")? as usize;
        if d == 0 {
            return Err(format_err(path, at, "zero extent"));
        }
        shape.push(d);
    }
    let flag_at = r.pos as u64;
    let flag = r.take(1, "label flag")?[0];
    if flag > 1 {
        return Err(format_err(path, flag_at, format!("label flag {} is not 0 or 1", flag)));
    }
    let count = n
        .checked_mul(shape.iter().product())
        .ok_or_else(|| format_err(path, 8, "example count overflows"))?;
    let raw = r.take(count.checked_mul(4).ok_or_else(|| format_err(path, 8, "size overflows"))?, "values")?;
    let data: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
    let labels = if flag == 1 {
        let raw = r.take(4 * n, "labels")?;
        Some(raw.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
    } else {
        None
    };
    if r.pos != bytes.len() {
        return Err(format_err(path, r.pos as u64, format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let ds = Dataset::new(shape, data, labels)?;
    if ds.is_image() && ds.data.iter().any(|v| !(-1.0..=1.0).contains(v)) {
        return Err(format_err(path, flag_at + 1, "image values outside [-1, 1]"));
    }
    Ok(ds)
}

fn parse_csv(bytes: &[u8], path: &Path) -> Result<Dataset> {
    let text = std::str::from_utf8(bytes).map_err(|e| format_err(path, e.valid_up_to() as u64, "not UTF-8"))?;
    let mut data = Vec::new();
    let mut width = None;
    let mut offset = 0u64;
    for line in text.split_inclusive('\n') {
        let row = line.trim();
        if !row.is_empty() {
            let mut k = 0;
            for field in row.split(',') {
                let v: f32 = field
                    .trim()
                    .parse()
                    .map_err(|_| format_err(path, offset, format!("not a number: {:?}", field.trim())))?;
                data.push(v);
                k += 1;
            }
            match width {
                None => width = Some(k),
                Some(w) if w != k => {
                    return Err(format_err(path, offset, format!("row has {} fields, expected {}", k, w)));
                }
                _ => {}
            }
        }
        offset += line.len() as u64;
    }
    let w = width.ok_or_else(|| format_err(path, 0, "empty CSV file"))?;
    Dataset::new(vec![w], data, None)
}

fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<Dataset> {
    let mut r = Reader { bytes, pos: 0, path };
    r.take(4, "magic")?;
    let n = r.u32_be("count")? as usize;
    let h = r.u32_be("rows")? as usize;
    let w = r.u32_be("cols")? as usize;
    let raw = r.take(n * h * w, "pixels")?;
    let data = raw.iter().map(|&b| b as f32 / 127.5 - 1.0).collect();
    Dataset::new(vec![h, w], data, None)
}

/// Reads an IDX label file (magic `0x00000801`).
pub fn load_idx_labels(path: &Path) -> Result<Vec<u32>> {
    let bytes = fs::read(path)?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
        path,
    };
    if r.take(4, "magic")? != [0, 0, 8, 1] {
        return Err(format_err(path, 0, "not an IDX label file"));
    }
    let n = r.u32_be("count")? as usize;
    Ok(r.take(n, "labels")?.iter().map(|&b| b as u32).collect())
}

/// Writes `.ebmd`, or headerless CSV when the extension is `.csv`.
pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let is_csv = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    let bytes = if is_csv {
        if ds.shape.len() != 1 {
            return Err(Error::usage("CSV output holds vector data only"));
        }
        let mut s = String::new();
        for i in 0..ds.n() {
            let row: Vec<String> = ds.example(i).iter().map(|v| v.to_string()).collect();
            s.push_str(&row.join(","));
            s.push('\n');
        }
        s.into_bytes()
    } else {
        let mut b = Vec::with_capacity(21 + 4 * ds.data.len());
        b.extend_from_slice(EBMD_MAGIC);
        b.extend_from_slice(&EBMD_VERSION.to_le_bytes());
        b.extend_from_slice(&(ds.n() as u32).to_le_bytes());
        b.extend_from_slice(&(ds.shape.len() as u32).to_le_bytes());
        for &d in &ds.shape {
            b.extend_from_slice(&(d as u32).to_le_bytes());
        }
        b.push(ds.labels.is_some() as u8);
        for v in &ds.data {
            b.extend_from_slice(&v.to_le_bytes());
        }
        if let Some(l) = &ds.labels {
            for v in l {
                b.extend_from_slice(&v.to_le_bytes());
            }
        }
        b
    };
    write_atomic(path, &bytes)
}

/// Maps `[-1, 1]` to `[0, 255]`, clamping outside values.
pub fn to_pixel(v: f32) -> u8 {
    (((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round()) as u8
}

/// Tiles the first `rows * cols` examples into a PGM (grayscale) or PPM
/// (color) image with 1-pixel white separators.
pub fn write_image_grid(samples: &Dataset, rows: usize, cols: usize, path: &Path) -> Result<()> {
    let (h, w, ch) = match samples.shape() {
        [h, w] => (*h, *w, 1),
        [h, w, 3] => (*h, *w, 3),
        s => return Err(Error::usage(format!("example shape {:?} is not an image", s))),
    };
    if rows == 0 || cols == 0 || samples.n() < rows * cols {
        return Err(Error::usage(format!(
            "a {}x{} grid needs {} samples, got {}",
            rows,
            cols,
            rows * cols,
            samples.n()
        )));
    }
    let gh = rows * h + rows + 1;
    let gw = cols * w + cols + 1;
    let mut px = vec![255u8; gh * gw * ch];
    for r in 0..rows {
        for c in 0..cols {
            let ex = samples.example(r * cols + c);
            for y in 0..h {
                for x in 0..w {
                    let gy = 1 + r * (h + 1) + y;
                    let gx = 1 + c * (w + 1) + x;
                    for k in 0..ch {
                        px[(gy * gw + gx) * ch + k] = to_pixel(ex[(y * w + x) * ch + k]);
                    }
                }
            }
        }
    }
    let magic = if ch == 1 { "P5" } else { "P6" };
    let mut bytes = format!("{}\n{} {}\n255\n", magic, gw, gh).into_bytes();
    bytes.extend_from_slice(&px);
    write_atomic(path, &bytes)
}
