//! Dataset ingestion, synthesis, batching, and the on-disk binary format.
//!
//! Ground-truth labels ride along in [`Dataset`] for evaluation only; nothing
//! in the training or attack paths reads them (they take pixel tensors or
//! [`ImageBatch`]es, which carry no labels).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array4, ArrayD, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"CLBRKDS1";

/// A batch of images in (b, c, h, w) layout with pixels in [0, 1].
#[derive(Debug, Clone)]
pub struct ImageBatch {
    pub pixels: Array4<f64>,
    pub ids: Vec<usize>,
}

impl ImageBatch {
    pub fn new(pixels: Array4<f64>, ids: Vec<usize>) -> Result<ImageBatch> {
        if pixels.shape()[0] != ids.len() {
            return Err(Error::shape(
                format!("{} ids", pixels.shape()[0]),
                format!("{} ids", ids.len()),
            ));
        }
        if pixels.shape()[0] == 0 {
            return Err(Error::invalid("batch", "batch must contain at least one image"));
        }
        if pixels.iter().any(|&p| !(0.0..=1.0).contains(&p) || p.is_nan()) {
            return Err(Error::invalid("pixels", "pixel values must lie in [0, 1]"));
        }
        Ok(ImageBatch { pixels, ids })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn image_dims(&self) -> (usize, usize, usize) {
        let s = self.pixels.shape();
        (s[1], s[2], s[3])
    }

    pub fn pixels_dyn(&self) -> ArrayD<f64> {
        self.pixels.clone().into_dyn()
    }
}

/// Full dataset: images plus held-out ground-truth labels.
#[derive(Debug, Clone)]
pub struct Dataset {
    images: Array4<f64>,
    labels: Vec<usize>,
    class_names: Option<Vec<String>>,
    k_true: usize,
}

impl Dataset {
    pub fn new(
        images: Array4<f64>,
        labels: Vec<usize>,
        k_true: usize,
        class_names: Option<Vec<String>>,
    ) -> Result<Dataset> {
        if images.shape()[0] != labels.len() {
            return Err(Error::shape(
                format!("{} labels", images.shape()[0]),
                format!("{} labels", labels.len()),
            ));
        }
        if labels.iter().any(|&l| l >= k_true) {
            return Err(Error::invalid("labels", "label out of range [0, k_true)"));
        }
        Ok(Dataset { images, labels, class_names, k_true })
    }

    pub fn n(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn k_true(&self) -> usize {
        self.k_true
    }

    pub fn image_dims(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    pub fn images(&self) -> &Array4<f64> {
        &self.images
    }

    /// Evaluation-only ground truth.
    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_names(&self) -> Option<&[String]> {
        self.class_names.as_deref()
    }

    /// One batch covering the whole dataset in index order.
    pub fn full_batch(&self) -> ImageBatch {
        ImageBatch {
            pixels: self.images.clone(),
            ids: (0..self.n()).collect(),
        }
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let (c, h, w) = self.image_dims();
        let mut images = Array4::zeros((indices.len(), c, h, w));
        let mut labels = Vec::with_capacity(indices.len());
        for (row, &i) in indices.iter().enumerate() {
            if i >= self.n() {
                return Err(Error::invalid("indices", format!("index {i} out of range")));
            }
            images.index_axis_mut(Axis(0), row).assign(&self.images.index_axis(Axis(0), i));
            labels.push(self.labels[i]);
        }
        Dataset::new(images, labels, self.k_true, self.class_names.clone())
    }

    /// Deterministic split into (train, holdout) by shuffled indices.
    pub fn split(&self, holdout_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&holdout_fraction) {
            return Err(Error::invalid("holdout_fraction", "must be in [0, 1)"));
        }
        let mut idx: Vec<usize> = (0..self.n()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        idx.shuffle(&mut rng);
        let n_hold = ((self.n() as f64) * holdout_fraction).round() as usize;
        let (hold, train) = idx.split_at(n_hold);
        Ok((self.subset(train)?, self.subset(hold)?))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        let (c, h, wd) = self.image_dims();
        for v in [self.n() as u32, c as u32, h as u32, wd as u32, self.k_true as u32] {
            w.write_all(&v.to_le_bytes())?;
        }
        for p in self.images.iter() {
            w.write_all(&(*p as f32).to_le_bytes())?;
        }
        for l in &self.labels {
            w.write_all(&(*l as i32).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Dataset> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::BadCheckpoint("bad dataset magic".into()));
        }
        let mut u32buf = [0u8; 4];
        let mut read_u32 = |r: &mut BufReader<File>| -> Result<u32> {
            r.read_exact(&mut u32buf)?;
            Ok(u32::from_le_bytes(u32buf))
        };
        let n = read_u32(&mut r)? as usize;
        let c = read_u32(&mut r)? as usize;
        let h = read_u32(&mut r)? as usize;
        let w = read_u32(&mut r)? as usize;
        let k_true = read_u32(&mut r)? as usize;
        let mut pixels = vec![0f64; n * c * h * w];
        let mut f32buf = [0u8; 4];
        for p in pixels.iter_mut() {
            r.read_exact(&mut f32buf)?;
            *p = f32::from_le_bytes(f32buf) as f64;
        }
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            r.read_exact(&mut f32buf)?;
            labels.push(i32::from_le_bytes(f32buf) as usize);
        }
        let images = Array4::from_shape_vec((n, c, h, w), pixels)
            .map_err(|e| Error::BadCheckpoint(e.to_string()))?;
        Dataset::new(images, labels, k_true, None)
    }
}

/// Per-class smooth template: a mixture of low-frequency sinusoids whose
/// parameters are a deterministic function of (class, seed).
fn class_template(class: usize, seed: u64, c: usize, h: usize, w: usize) -> Array4<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(class as u64));
    let mut t = Array4::<f64>::zeros((1, c, h, w));
    for ch in 0..c {
        let fx = rng.gen_range(0.5..2.5);
        let fy = rng.gen_range(0.5..2.5);
        let px = rng.gen_range(0.0..std::f64::consts::TAU);
        let py = rng.gen_range(0.0..std::f64::consts::TAU);
        let sign: f64 = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        for y in 0..h {
            for x in 0..w {
                let u = x as f64 / w as f64 * std::f64::consts::TAU;
                let v = y as f64 / h as f64 * std::f64::consts::TAU;
                t[[0, ch, y, x]] = sign * ((fx * u + px).sin() + (fy * v + py).cos()) / 2.0;
            }
        }
    }
    t
}

/// Synthetic image dataset: k_true classes of low-frequency patterns plus
/// bounded noise, clipped to [0, 1]. Larger `class_separation` widens the
/// margin between class templates relative to the noise.
pub fn make_synthetic_image_dataset(
    n_per_class: usize,
    k_true: usize,
    c: usize,
    h: usize,
    w: usize,
    class_separation: f64,
    seed: u64,
) -> Result<Dataset> {
    if n_per_class < 1 {
        return Err(Error::invalid("n_per_class", "must be >= 1"));
    }
    if k_true < 2 {
        return Err(Error::invalid("k_true", "must be >= 2"));
    }
    if !(class_separation > 0.0) {
        return Err(Error::invalid("class_separation", "must be > 0"));
    }
    if c * h * w < k_true {
        return Err(Error::invalid(
            "shape",
            "c*h*w must be >= k_true so class templates can be distinct",
        ));
    }
    let n = n_per_class * k_true;
    // template amplitude grows (saturating) with separation; noise is fixed
    let amp = 0.45 * (class_separation / (class_separation + 1.0));
    let noise_std = 0.06;
    let mut images = Array4::<f64>::zeros((n, c, h, w));
    let mut labels = Vec::with_capacity(n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for class in 0..k_true {
        let template = class_template(class, seed, c, h, w);
        for i in 0..n_per_class {
            let row = class * n_per_class + i;
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        // Box-Muller keeps us free of rand_distr here
                        let u1: f64 = rng.gen_range(1e-12..1.0);
                        let u2: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                        let z = (-2.0 * u1.ln()).sqrt() * u2.cos();
                        let val = 0.5 + amp * template[[0, ch, y, x]] + noise_std * z;
                        images[[row, ch, y, x]] = val.clamp(0.0, 1.0);
                    }
                }
            }
            labels.push(class);
        }
    }
    Dataset::new(images, labels, k_true, None)
}

/// Adds per-image photometric nuisance variation — a global brightness offset
/// plus horizontal and vertical illumination gradients, each drawn from
/// N(0, strength²) — on top of an existing dataset. Natural photographs carry
/// such dominant low-frequency variance modes; purely i.i.d. pixel noise does
/// not, which makes raw synthetic sets unrealistically easy for
/// variance-based analyses. Pixels are re-clamped to [0, 1].
pub fn add_photometric_modes(dataset: &Dataset, strength: f64, seed: u64) -> Result<Dataset> {
    if !(strength >= 0.0) {
        return Err(Error::invalid("strength", "must be >= 0"));
    }
    let (c, h, w) = dataset.image_dims();
    let mut images = dataset.images().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gauss = |rng: &mut ChaCha8Rng| {
        let u1: f64 = rng.gen_range(1e-12..1.0);
        let u2: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        (-2.0 * u1.ln()).sqrt() * u2.cos()
    };
    // gradients run from -1 to +1, so their per-pixel RMS is 1/√3; scale them
    // up so every mode carries the same per-pixel RMS amplitude `strength`
    let grad_scale = 3.0f64.sqrt();
    for mut img in images.axis_iter_mut(Axis(0)) {
        let b = strength * gauss(&mut rng);
        let gh = grad_scale * strength * gauss(&mut rng);
        let gv = grad_scale * strength * gauss(&mut rng);
        for ch in 0..c {
            for y in 0..h {
                let fy = if h > 1 { 2.0 * y as f64 / (h - 1) as f64 - 1.0 } else { 0.0 };
                for x in 0..w {
                    let fx = if w > 1 { 2.0 * x as f64 / (w - 1) as f64 - 1.0 } else { 0.0 };
                    let v = img[[ch, y, x]] + b + gh * fx + gv * fy;
                    img[[ch, y, x]] = v.clamp(0.0, 1.0);
                }
            }
        }
    }
    Dataset::new(
        images,
        dataset.labels().to_vec(),
        dataset.k_true(),
        dataset.class_names().map(|n| n.to_vec()),
    )
}

/// Loads a directory with one subdirectory per class; images are resized to
/// (h, w), converted to RGB (c=3), and scaled to [0, 1]. Labels follow the
/// lexicographic order of subdirectory names.
pub fn load_image_folder(path: &Path, image_size: (usize, usize)) -> Result<Dataset> {
    let (h, w) = image_size;
    let mut class_dirs: Vec<_> = std::fs::read_dir(path)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| e.path())
        .collect();
    class_dirs.sort();
    if class_dirs.is_empty() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("no class subdirectories in {}", path.display()),
        )));
    }
    let mut all_pixels: Vec<f64> = Vec::new();
    let mut labels = Vec::new();
    let mut class_names = Vec::new();
    for (class, dir) in class_dirs.iter().enumerate() {
        let mut files: Vec<_> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.is_file())
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(Error::EmptyClass(dir.display().to_string()));
        }
        class_names.push(
            dir.file_name()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default(),
        );
        for file in files {
            let img = image::open(&file)?.to_rgb8();
            let resized = image::imageops::resize(
                &img,
                w as u32,
                h as u32,
                image::imageops::FilterType::Triangle,
            );
            for ch in 0..3 {
                for y in 0..h {
                    for x in 0..w {
                        all_pixels.push(resized.get_pixel(x as u32, y as u32)[ch] as f64 / 255.0);
                    }
                }
            }
            labels.push(class);
        }
    }
    let n = labels.len();
    let k_true = class_names.len();
    let images = Array4::from_shape_vec((n, 3, h, w), all_pixels)
        .map_err(|e| Error::BadCheckpoint(e.to_string()))?;
    Dataset::new(images, labels, k_true, Some(class_names))
}

/// Partitions the dataset into batches; every sample appears exactly once.
pub fn batches(dataset: &Dataset, batch_size: usize, shuffle: bool, seed: u64) -> Result<Vec<ImageBatch>> {
    if batch_size < 1 || batch_size > dataset.n() {
        return Err(Error::invalid(
            "batch_size",
            format!("must be in [1, {}]", dataset.n()),
        ));
    }
    let mut idx: Vec<usize> = (0..dataset.n()).collect();
    if shuffle {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        idx.shuffle(&mut rng);
    }
    idx.chunks(batch_size)
        .map(|chunk| {
            let sub = dataset.subset(chunk)?;
            ImageBatch::new(sub.images.clone(), chunk.to_vec())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_counts_and_balance() {
        let ds = make_synthetic_image_dataset(10, 4, 1, 8, 8, 5.0, 0).unwrap();
        assert_eq!(ds.n(), 40);
        for class in 0..4 {
            assert_eq!(ds.labels().iter().filter(|&&l| l == class).count(), 10);
        }
        assert!(ds.images().iter().all(|&p| (0.0..=1.0).contains(&p)));
    }

    #[test]
    fn synthetic_rejects_bad_params() {
        assert!(make_synthetic_image_dataset(10, 4, 1, 8, 8, 0.0, 0).is_err());
        assert!(make_synthetic_image_dataset(0, 4, 1, 8, 8, 1.0, 0).is_err());
        assert!(make_synthetic_image_dataset(1, 2, 1, 1, 1, 1.0, 0).is_err()); // c*h*w < k_true
    }

    #[test]
    fn synthetic_is_deterministic() {
        let a = make_synthetic_image_dataset(5, 3, 1, 6, 6, 3.0, 42).unwrap();
        let b = make_synthetic_image_dataset(5, 3, 1, 6, 6, 3.0, 42).unwrap();
        assert_eq!(a.images(), b.images());
        assert_eq!(a.labels(), b.labels());
    }

    #[test]
    fn photometric_modes_zero_strength_is_identity() {
        let ds = make_synthetic_image_dataset(5, 3, 1, 6, 6, 3.0, 42).unwrap();
        let out = add_photometric_modes(&ds, 0.0, 7).unwrap();
        assert_eq!(out.images(), ds.images());
        assert_eq!(out.labels(), ds.labels());
    }

    #[test]
    fn photometric_modes_are_deterministic_and_clamped() {
        let ds = make_synthetic_image_dataset(5, 3, 1, 6, 6, 3.0, 42).unwrap();
        let a = add_photometric_modes(&ds, 0.2, 7).unwrap();
        let b = add_photometric_modes(&ds, 0.2, 7).unwrap();
        assert_eq!(a.images(), b.images());
        assert!(a.images().iter().all(|&p| (0.0..=1.0).contains(&p)));
        // a different seed draws different mode coefficients
        let c = add_photometric_modes(&ds, 0.2, 8).unwrap();
        assert_ne!(a.images(), c.images());
    }

    #[test]
    fn photometric_modes_shift_each_image_coherently() {
        // without clamping, a pure-brightness draw moves all pixels of one
        // image by the same amount; verify the per-image offset pattern is
        // (b + gh*fx + gv*fy) by regressing it out exactly
        let ds = make_synthetic_image_dataset(4, 2, 1, 8, 8, 1.0, 3).unwrap();
        let out = add_photometric_modes(&ds, 0.01, 11).unwrap(); // small: no clamping
        for i in 0..ds.n() {
            let before = ds.images().index_axis(Axis(0), i);
            let after = out.images().index_axis(Axis(0), i);
            let diff: Vec<f64> = after.iter().zip(before.iter()).map(|(a, b)| a - b).collect();
            // solve for b, gh, gv from three pixels, then check all others
            let f = |x: usize, n: usize| 2.0 * x as f64 / (n - 1) as f64 - 1.0;
            let b_coef = (diff[0] + diff[7] + diff[56] + diff[63]) / 4.0;
            let gh = (diff[7] - diff[0]) / (f(7, 8) - f(0, 8));
            let gv = (diff[56] - diff[0]) / (f(7, 8) - f(0, 8));
            for y in 0..8 {
                for x in 0..8 {
                    let expect = b_coef + gh * f(x, 8) + gv * f(y, 8);
                    assert!((diff[y * 8 + x] - expect).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn batch_partition_is_a_permutation() {
        let ds = make_synthetic_image_dataset(5, 2, 1, 4, 4, 2.0, 1).unwrap();
        let bs = batches(&ds, 4, true, 9).unwrap();
        assert_eq!(bs.iter().map(|b| b.len()).collect::<Vec<_>>(), vec![4, 4, 2]);
        let mut all: Vec<usize> = bs.iter().flat_map(|b| b.ids.clone()).collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn unshuffled_batches_are_in_index_order() {
        let ds = make_synthetic_image_dataset(5, 2, 1, 4, 4, 2.0, 1).unwrap();
        let bs = batches(&ds, 4, false, 0).unwrap();
        assert_eq!(bs[0].ids, vec![0, 1, 2, 3]);
    }

    #[test]
    fn shuffled_batches_are_seed_deterministic() {
        let ds = make_synthetic_image_dataset(5, 2, 1, 4, 4, 2.0, 1).unwrap();
        let a = batches(&ds, 3, true, 7).unwrap();
        let b = batches(&ds, 3, true, 7).unwrap();
        let ida: Vec<_> = a.iter().flat_map(|b| b.ids.clone()).collect();
        let idb: Vec<_> = b.iter().flat_map(|b| b.ids.clone()).collect();
        assert_eq!(ida, idb);
    }

    #[test]
    fn binary_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.bin");
        let ds = make_synthetic_image_dataset(3, 2, 2, 4, 4, 2.0, 5).unwrap();
        ds.save(&path).unwrap();
        let back = Dataset::load(&path).unwrap();
        assert_eq!(back.n(), ds.n());
        assert_eq!(back.k_true(), ds.k_true());
        assert_eq!(back.labels(), ds.labels());
        // stored as f32, so compare with that precision
        for (a, b) in ds.images().iter().zip(back.images().iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn folder_loader_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        // empty root -> io error
        assert!(matches!(load_image_folder(dir.path(), (4, 4)), Err(Error::Io(_))));
        // two classes x three images
        for class in ["a", "b"] {
            let cdir = dir.path().join(class);
            std::fs::create_dir(&cdir).unwrap();
            for i in 0..3 {
                let img = image::RgbImage::from_pixel(6, 6, image::Rgb([i * 40, 100, 200]));
                img.save(cdir.join(format!("{i}.png"))).unwrap();
            }
        }
        let ds = load_image_folder(dir.path(), (4, 4)).unwrap();
        assert_eq!(ds.n(), 6);
        assert_eq!(ds.k_true(), 2);
        assert_eq!(ds.image_dims(), (3, 4, 4));
        // one empty subdirectory -> empty-class error
        std::fs::create_dir(dir.path().join("c")).unwrap();
        assert!(matches!(
            load_image_folder(dir.path(), (4, 4)),
            Err(Error::EmptyClass(_))
        ));
    }
}
