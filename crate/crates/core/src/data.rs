//! Labeled image datasets: IDX ingestion, a synthetic rectangle set for fast
//! deterministic runs, and seeded mini-batch iteration.

use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

/// Images `[count, 1, H, W]` scaled to `[0, 1]`, with integer labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    images: Tensor,
    labels: Vec<usize>,
    classes: usize,
    /// `pixel = raw * scale + offset`
    pub scale: f64,
    pub offset: f64,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if images.ndim() != 4 || images.shape()[0] != labels.len() {
            return Err(Error::shape(format!(
                "{} labels for images {:?}",
                labels.len(),
                images.shape()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::invalid(format!("label {bad} outside [0, {classes})")));
        }
        Ok(Dataset {
            images,
            labels,
            classes,
            scale: 1.0,
            offset: 0.0,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    /// Per-item image shape `[1, H, W]`.
    pub fn image_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    pub fn image(&self, index: usize) -> Result<Tensor> {
        self.images.item(index)
    }

    /// Stack the selected items into a batch tensor.
    pub fn gather(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let stride: usize = self.image_shape().iter().product();
        let mut data = Vec::with_capacity(indices.len() * stride);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::invalid(format!("index {i} out of range")));
            }
            data.extend_from_slice(&self.images.data()[i * stride..(i + 1) * stride]);
            labels.push(self.labels[i]);
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(self.image_shape());
        Ok((Tensor::new(shape, data)?, labels))
    }

    /// The first `n` items.
    pub fn take(&self, n: usize) -> Result<Dataset> {
        let n = n.min(self.len());
        let (images, labels) = self.gather(&(0..n).collect::<Vec<_>>())?;
        Ok(Dataset {
            images,
            labels,
            classes: self.classes,
            scale: self.scale,
            offset: self.offset,
        })
    }
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::Corrupt {
                what: "IDX file",
                detail: format!("{}: gzip: {e}", path.display()),
            })?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn idx_error(path: &Path, detail: impl std::fmt::Display) -> Error {
    Error::Corrupt {
        what: "IDX file",
        detail: format!("{}: {detail}", path.display()),
    }
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| idx_error(path, "truncated header"))
}

/// Parse an IDX image file (magic `0x00000803`) and label file (magic
/// `0x00000801`). Either may be gzip-compressed. Pixels are scaled by 1/255.
pub fn read_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let images = read_maybe_gz(ip)?;
    let labels = read_maybe_gz(lp)?;

    let magic = be_u32(&images, 0, ip)?;
    if magic != IDX_IMAGES {
        return Err(idx_error(ip, format!("bad image magic {magic:#010x}")));
    }
    let count = be_u32(&images, 4, ip)? as usize;
    let rows = be_u32(&images, 8, ip)? as usize;
    let cols = be_u32(&images, 12, ip)? as usize;
    let pixels = &images[16..];
    if rows == 0 || cols == 0 || pixels.len() != count * rows * cols {
        return Err(idx_error(
            ip,
            format!("payload holds {} bytes, header promises {count}x{rows}x{cols}", pixels.len()),
        ));
    }

    let magic = be_u32(&labels, 0, lp)?;
    if magic != IDX_LABELS {
        return Err(idx_error(lp, format!("bad label magic {magic:#010x}")));
    }
    let label_count = be_u32(&labels, 4, lp)? as usize;
    let label_bytes = &labels[8..];
    if label_bytes.len() != label_count {
        return Err(idx_error(
            lp,
            format!("payload holds {} labels, header promises {label_count}", label_bytes.len()),
        ));
    }
    if label_count != count {
        return Err(Error::invalid(format!(
            "{count} images in {} but {label_count} labels in {}",
            ip.display(),
            lp.display()
        )));
    }
    if count == 0 {
        return Err(idx_error(ip, "no images"));
    }

    let scale = 1.0 / 255.0;
    let data = pixels.iter().map(|&p| p as f64 / 255.0).collect();
    let labels: Vec<usize> = label_bytes.iter().map(|&l| l as usize).collect();
    let classes = labels.iter().max().map_or(0, |&m| m + 1).max(10);
    let mut ds = Dataset::new(Tensor::new([count, 1, rows, cols], data)?, labels, classes)?;
    ds.scale = scale;
    Ok(ds)
}

/// Write IDX files (uncompressed) from raw bytes; used to build fixtures.
pub fn write_idx(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
    rows: usize,
    cols: usize,
    pixels: &[u8],
    labels: &[u8],
) -> Result<()> {
    let mut img = Vec::with_capacity(16 + pixels.len());
    img.extend_from_slice(&IDX_IMAGES.to_be_bytes());
    img.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    img.extend_from_slice(&(rows as u32).to_be_bytes());
    img.extend_from_slice(&(cols as u32).to_be_bytes());
    img.extend_from_slice(pixels);
    let mut lab = Vec::with_capacity(8 + labels.len());
    lab.extend_from_slice(&IDX_LABELS.to_be_bytes());
    lab.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    lab.extend_from_slice(labels);
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    std::fs::write(ip, img).map_err(|e| Error::io(ip, e))?;
    std::fs::write(lp, lab).map_err(|e| Error::io(lp, e))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub n: usize,
    pub classes: usize,
    pub image_size: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn new(n: usize, classes: usize, image_size: usize, seed: u64) -> Self {
        SyntheticSpec {
            n,
            classes,
            image_size,
            noise_std: 0.1,
            seed,
        }
    }
}

/// Class `c` is a bright square in grid cell `c` (cells laid out on a
/// `ceil(sqrt(C))` grid) plus Gaussian pixel noise, clamped to `[0, 1]`.
/// Labels cycle `0, 1, ..., C-1`.
pub fn synthetic_dataset(spec: &SyntheticSpec) -> Result<Dataset> {
    let SyntheticSpec {
        n,
        classes,
        image_size: size,
        noise_std,
        seed,
    } = *spec;
    if classes < 2 || n < classes {
        return Err(Error::invalid(format!(
            "synthetic dataset needs classes >= 2 and n >= classes (n={n}, classes={classes})"
        )));
    }
    if !(noise_std >= 0.0 && noise_std.is_finite()) {
        return Err(Error::invalid("noise std must be finite and non-negative"));
    }
    let grid = (classes as f64).sqrt().ceil() as usize;
    let cell = size / grid;
    let side = cell / 2;
    if side == 0 {
        return Err(Error::invalid(format!(
            "{classes} class rectangles do not fit in a {size}x{size} image"
        )));
    }
    let inset = (cell - side) / 2;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, noise_std.max(f64::MIN_POSITIVE)).expect("valid std");
    let mut data = Vec::with_capacity(n * size * size);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % classes;
        let (top, left) = ((c / grid) * cell + inset, (c % grid) * cell + inset);
        for y in 0..size {
            for x in 0..size {
                let inside = (top..top + side).contains(&y) && (left..left + side).contains(&x);
                let base = if inside { 0.9 } else { 0.1 };
                let v = if noise_std > 0.0 { base + noise.sample(&mut rng) } else { base };
                data.push(v.clamp(0.0, 1.0));
            }
        }
        labels.push(c);
    }
    Dataset::new(Tensor::new([n, 1, size, size], data)?, labels, classes)
}

/// Seeded epoch-wise mini-batches. Every epoch visits each example once in a
/// fresh permutation derived from `(seed, epoch)`; the last batch may be short.
#[derive(Clone, Debug)]
pub struct BatchIterator<'a> {
    dataset: &'a Dataset,
    batch_size: usize,
    seed: u64,
    epoch: u64,
    order: Vec<usize>,
    cursor: usize,
}

impl<'a> BatchIterator<'a> {
    pub fn new(dataset: &'a Dataset, batch_size: usize, seed: u64) -> Result<Self> {
        Self::starting_at(dataset, batch_size, seed, 0)
    }

    /// Positioned at the start of `epoch`.
    pub fn starting_at(dataset: &'a Dataset, batch_size: usize, seed: u64, epoch: u64) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        if dataset.is_empty() {
            return Err(Error::invalid("cannot iterate an empty dataset"));
        }
        let mut it = BatchIterator {
            dataset,
            batch_size,
            seed,
            epoch,
            order: Vec::new(),
            cursor: 0,
        };
        it.shuffle();
        Ok(it)
    }

    fn shuffle(&mut self) {
        let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed(self.seed, self.epoch));
        self.order = (0..self.dataset.len()).collect();
        self.order.shuffle(&mut rng);
        self.cursor = 0;
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.dataset.len().div_ceil(self.batch_size)
    }

    /// Indices of the next batch; rolls over into the next epoch.
    pub fn next_indices(&mut self) -> Vec<usize> {
        if self.cursor >= self.order.len() {
            self.epoch += 1;
            self.shuffle();
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let batch = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        batch
    }

    pub fn next_batch(&mut self) -> Result<(Tensor, Vec<usize>)> {
        let idx = self.next_indices();
        self.dataset.gather(&idx)
    }

    /// True when the current epoch has been fully consumed.
    pub fn epoch_done(&self) -> bool {
        self.cursor >= self.order.len()
    }
}

/// Decorrelated per-epoch seed.
pub fn epoch_seed(seed: u64, epoch: u64) -> u64 {
    let mut z = seed ^ epoch.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn idx_fixture_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("img"), dir.path().join("lab"));
        let pixels: Vec<u8> = (0..2 * 3 * 2).map(|i| (i * 20) as u8).collect();
        write_idx(&ip, &lp, 3, 2, &pixels, &[7, 2]).unwrap();
        let ds = read_idx(&ip, &lp).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.image_shape(), &[1, 3, 2]);
        assert_eq!(ds.labels(), &[7, 2]);
        for (v, p) in ds.images().data().iter().zip(&pixels) {
            assert_eq!(*v, *p as f64 / 255.0);
        }
        assert_eq!(ds.scale, 1.0 / 255.0);
    }

    #[test]
    fn gzip_input_is_detected() {
        use flate2::write::GzEncoder;
        use std::io::Write;
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("img"), dir.path().join("lab"));
        write_idx(&ip, &lp, 2, 2, &[0, 255, 51, 102], &[1]).unwrap();
        let gz = dir.path().join("img.gz");
        let mut enc = GzEncoder::new(Vec::new(), flate2::Compression::default());
        enc.write_all(&std::fs::read(&ip).unwrap()).unwrap();
        std::fs::write(&gz, enc.finish().unwrap()).unwrap();
        assert_eq!(read_idx(&gz, &lp).unwrap(), read_idx(&ip, &lp).unwrap());
    }

    #[test]
    fn idx_errors() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("img"), dir.path().join("lab"));
        write_idx(&ip, &lp, 2, 2, &[0; 8], &[1, 2]).unwrap();
        let (ip1, lp1) = (dir.path().join("img1"), dir.path().join("lab1"));
        write_idx(&ip1, &lp1, 2, 2, &[0; 4], &[1]).unwrap();
        // count mismatch between files
        assert!(matches!(read_idx(&ip, &lp1), Err(Error::InvalidArgument(_))));
        // swapped files: bad magic
        assert!(matches!(read_idx(&lp, &ip), Err(Error::Corrupt { .. })));
        // truncated payload
        let bytes = std::fs::read(&ip).unwrap();
        std::fs::write(&ip, &bytes[..bytes.len() - 1]).unwrap();
        assert!(matches!(read_idx(&ip, &lp), Err(Error::Corrupt { .. })));
        assert!(matches!(read_idx(dir.path().join("missing"), &lp), Err(Error::Io { .. })));
    }

    #[test]
    fn synthetic_is_deterministic_and_bounded() {
        let spec = SyntheticSpec::new(40, 4, 12, 3);
        let a = synthetic_dataset(&spec).unwrap();
        assert_eq!(a, synthetic_dataset(&spec).unwrap());
        assert!(a.images().data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        let mut other = spec;
        other.seed = 4;
        assert_ne!(a, synthetic_dataset(&other).unwrap());
    }

    #[test]
    fn noiseless_classes_are_constant() {
        let mut spec = SyntheticSpec::new(12, 3, 10, 0);
        spec.noise_std = 0.0;
        let ds = synthetic_dataset(&spec).unwrap();
        for c in 0..3 {
            assert_eq!(ds.image(c).unwrap(), ds.image(c + 3).unwrap());
            assert_eq!(ds.image(c).unwrap(), ds.image(c + 9).unwrap());
        }
        assert_ne!(ds.image(0).unwrap(), ds.image(1).unwrap());
    }

    #[test]
    fn synthetic_geometry_errors() {
        assert!(synthetic_dataset(&SyntheticSpec::new(100, 50, 4, 0)).is_err());
        assert!(synthetic_dataset(&SyntheticSpec::new(1, 2, 28, 0)).is_err());
    }

    #[test]
    fn whole_set_batch_is_a_permutation() {
        let ds = synthetic_dataset(&SyntheticSpec::new(10, 2, 6, 0)).unwrap();
        let mut it = BatchIterator::new(&ds, 10, 5).unwrap();
        let mut idx = it.next_indices();
        assert_eq!(idx.len(), 10);
        idx.sort_unstable();
        assert_eq!(idx, (0..10).collect::<Vec<_>>());
        assert!(it.epoch_done());
    }

    #[test]
    fn same_seed_same_stream() {
        let ds = synthetic_dataset(&SyntheticSpec::new(23, 2, 6, 0)).unwrap();
        let mut a = BatchIterator::new(&ds, 4, 9).unwrap();
        let mut b = BatchIterator::new(&ds, 4, 9).unwrap();
        for _ in 0..20 {
            assert_eq!(a.next_indices(), b.next_indices());
        }
        let mut c = BatchIterator::new(&ds, 4, 10).unwrap();
        let mut a = BatchIterator::new(&ds, 4, 9).unwrap();
        assert_ne!(
            (0..6).map(|_| a.next_indices()).collect::<Vec<_>>(),
            (0..6).map(|_| c.next_indices()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn epochs_reshuffle() {
        let ds = synthetic_dataset(&SyntheticSpec::new(30, 3, 6, 0)).unwrap();
        let mut it = BatchIterator::new(&ds, 30, 1).unwrap();
        let e0 = it.next_indices();
        let e1 = it.next_indices();
        assert_eq!(it.epoch(), 1);
        assert_ne!(e0, e1);
        let mut resumed = BatchIterator::starting_at(&ds, 30, 1, 1).unwrap();
        assert_eq!(resumed.next_indices(), e1);
    }
}
