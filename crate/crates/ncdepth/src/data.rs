//! Datasets and metrics: seeded synthetic depth scenes, 16-bit depth PNG
//! I/O in the usual benchmark convention (pixel = meters * 256, zero means
//! missing), a nearest-neighbor fill baseline, and the evaluation metrics.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{NcError, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor4;

/// One training/evaluation sample. All tensors are `(1, 1, h, w)`.
///
/// `input_conf` is binary at ingestion (1 = measured); `sparse_depth` is 0
/// wherever unmeasured; `gt_depth` is positive wherever `gt_valid` is set
/// and 0 elsewhere.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub sparse_depth: Tensor4,
    pub input_conf: Tensor4,
    pub gt_depth: Tensor4,
    pub gt_valid: Tensor4,
}

impl Sample {
    pub fn new(
        sparse_depth: Tensor4,
        input_conf: Tensor4,
        gt_depth: Tensor4,
        gt_valid: Tensor4,
    ) -> Result<Self> {
        let shape = sparse_depth.shape();
        for (name, t) in [
            ("input_conf", &input_conf),
            ("gt_depth", &gt_depth),
            ("gt_valid", &gt_valid),
        ] {
            if t.shape() != shape {
                return Err(NcError::Shape(format!(
                    "sample field {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
        }
        for (&c, &d) in input_conf.values().iter().zip(sparse_depth.values()) {
            if c != 0.0 && c != 1.0 {
                return Err(NcError::Invalid(format!(
                    "input confidence must be binary at ingestion, got {c}"
                )));
            }
            if c == 0.0 && d != 0.0 {
                return Err(NcError::Invalid(
                    "sparse depth must be 0 wherever unmeasured".into(),
                ));
            }
        }
        for (&v, &d) in gt_valid.values().iter().zip(gt_depth.values()) {
            if v != 0.0 && v != 1.0 {
                return Err(NcError::Invalid(format!("gt_valid must be binary, got {v}")));
            }
            if v == 1.0 && d <= 0.0 {
                return Err(NcError::Invalid(format!(
                    "ground truth must be positive where valid, got {d}"
                )));
            }
        }
        Ok(Sample {
            sparse_depth,
            input_conf,
            gt_depth,
            gt_valid,
        })
    }

    pub fn height(&self) -> usize {
        self.sparse_depth.height()
    }

    pub fn width(&self) -> usize {
        self.sparse_depth.width()
    }
}

/// Seeded synthetic scenes shaped like road-scene range data: a smooth
/// ground-plane-style background ramp (near at the bottom, far at the
/// top) with 2..6 nearer planar rectangles whose depth is a fraction of
/// the surface they occlude. Depths live in [2, 80] m; the sparse input
/// and the ground-truth mask are sampled i.i.d. per pixel.
pub fn gen_synthetic(
    seed: u64,
    n: usize,
    size: usize,
    density: f64,
    gt_coverage: f64,
) -> Result<Vec<Sample>> {
    if n == 0 {
        return Err(NcError::Invalid("dataset needs at least one sample".into()));
    }
    if !(density > 0.0 && density <= 1.0) {
        return Err(NcError::Invalid(format!("density must be in (0, 1], got {density}")));
    }
    if !(gt_coverage > 0.0 && gt_coverage <= 1.0) {
        return Err(NcError::Invalid(format!(
            "gt_coverage must be in (0, 1], got {gt_coverage}"
        )));
    }
    if size < 8 || !size.is_multiple_of(4) {
        return Err(NcError::Invalid(format!(
            "scene size must be >= 8 and divisible by 4, got {size}"
        )));
    }

    let mut rng = SeededRng::new(seed);
    let (h, w) = (size, size);
    let obj_span = (h.min(w) / 4).max(1);
    let mut samples = Vec::with_capacity(n);
    for _ in 0..n {
        let far = rng.uniform(55.0, 80.0);
        let near = rng.uniform(8.0, 25.0);
        let tilt = rng.uniform(-0.15, 0.15);
        let mut scene = vec![0.0f64; h * w];
        for i in 0..h {
            for j in 0..w {
                let ramp = near + (far - near) * (h - 1 - i) as f64 / (h - 1) as f64;
                scene[i * w + j] = (ramp + tilt * (j as f64 - w as f64 / 2.0)).clamp(2.0, 80.0);
            }
        }
        // nearer planar rectangles; overlaps keep the nearest surface
        let objects = 2 + rng.uniform_usize(5);
        for _ in 0..objects {
            let oh = (4 + rng.uniform_usize(obj_span)).min(h);
            let ow = (4 + rng.uniform_usize(obj_span)).min(w);
            let y0 = rng.uniform_usize(h - oh + 1);
            let x0 = rng.uniform_usize(w - ow + 1);
            let local = scene[(y0 + oh / 2) * w + x0 + ow / 2];
            let d0 = (local * rng.uniform(0.45, 0.85)).max(2.0);
            let gx = rng.uniform(-0.1, 0.1);
            let gy = rng.uniform(-0.1, 0.1);
            for i in y0..y0 + oh {
                for j in x0..x0 + ow {
                    let d = (d0 + gy * (i - y0) as f64 + gx * (j - x0) as f64).clamp(2.0, 80.0);
                    let cell = &mut scene[i * w + j];
                    *cell = cell.min(d);
                }
            }
        }

        let mut sparse = vec![0.0f64; h * w];
        let mut conf = vec![0.0f64; h * w];
        for k in 0..h * w {
            if rng.bernoulli(density) {
                sparse[k] = scene[k];
                conf[k] = 1.0;
            }
        }
        let mut gt = vec![0.0f64; h * w];
        let mut valid = vec![0.0f64; h * w];
        for k in 0..h * w {
            if rng.bernoulli(gt_coverage) {
                gt[k] = scene[k];
                valid[k] = 1.0;
            }
        }
        samples.push(Sample::new(
            Tensor4::from_vec(1, 1, h, w, sparse)?,
            Tensor4::from_vec(1, 1, h, w, conf)?,
            Tensor4::from_vec(1, 1, h, w, gt)?,
            Tensor4::from_vec(1, 1, h, w, valid)?,
        )?);
    }
    Ok(samples)
}

fn expect_single_plane(what: &str, t: &Tensor4) -> Result<()> {
    let (n, c, _, _) = t.shape();
    if n != 1 || c != 1 {
        return Err(NcError::Shape(format!(
            "{what} must be a (1, 1, h, w) tensor, got {:?}",
            t.shape()
        )));
    }
    Ok(())
}

/// Read a 16-bit single-channel depth PNG: meters = pixel / 256, pixel 0
/// means missing. Returns (depth, confidence mask).
pub fn load_depth_png(path: &Path) -> Result<(Tensor4, Tensor4)> {
    let img = image::open(path).map_err(|e| NcError::Format(format!("{}: {e}", path.display())))?;
    let gray = match img {
        image::DynamicImage::ImageLuma16(g) => g,
        other => {
            return Err(NcError::Format(format!(
                "{}: expected 16-bit single-channel PNG, got {:?}",
                path.display(),
                other.color()
            )))
        }
    };
    let (w, h) = (gray.width() as usize, gray.height() as usize);
    let mut depth = Tensor4::zeros(1, 1, h, w)?;
    let mut conf = Tensor4::zeros(1, 1, h, w)?;
    for (x, y, px) in gray.enumerate_pixels() {
        let v = px.0[0];
        if v > 0 {
            depth.set(0, 0, y as usize, x as usize, v as f64 / 256.0);
            conf.set(0, 0, y as usize, x as usize, 1.0);
        }
    }
    Ok((depth, conf))
}

/// Write a depth map as a 16-bit PNG (pixel = round(256 * meters),
/// saturating). Depth must be non-negative.
pub fn save_depth_png(depth: &Tensor4, path: &Path) -> Result<()> {
    expect_single_plane("depth", depth)?;
    if let Some(&d) = depth.values().iter().find(|&&d| d < 0.0) {
        return Err(NcError::Invalid(format!("depth must be >= 0 to encode, got {d}")));
    }
    let (_, _, h, w) = depth.shape();
    let buf: Vec<u16> = depth
        .values()
        .iter()
        .map(|&m| (m * 256.0).round().min(u16::MAX as f64) as u16)
        .collect();
    let img = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::from_raw(w as u32, h as u32, buf)
        .expect("buffer sized from tensor dims");
    image::DynamicImage::ImageLuma16(img)
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| NcError::io(path, e))
}

/// Write a confidence map as an 8-bit grayscale PNG (round(255 * c)).
pub fn save_conf_png(conf: &Tensor4, path: &Path) -> Result<()> {
    expect_single_plane("confidence", conf)?;
    if let Some(&c) = conf
        .values()
        .iter()
        .find(|&&c| !(0.0..=1.0 + crate::nconv::CONF_SLACK).contains(&c))
    {
        return Err(NcError::Invalid(format!("confidence {c} outside [0, 1]")));
    }
    let (_, _, h, w) = conf.shape();
    let buf: Vec<u8> = conf
        .values()
        .iter()
        .map(|&c| (c.min(1.0) * 255.0).round() as u8)
        .collect();
    let img = image::ImageBuffer::<image::Luma<u8>, Vec<u8>>::from_raw(w as u32, h as u32, buf)
        .expect("buffer sized from tensor dims");
    image::DynamicImage::ImageLuma8(img)
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| NcError::io(path, e))
}

/// Materialize samples as `dir/<split>/{sparse,gt}/NNNNN.png`.
pub fn save_dataset(dir: &Path, split: &str, samples: &[Sample]) -> Result<()> {
    let sparse_dir = dir.join(split).join("sparse");
    let gt_dir = dir.join(split).join("gt");
    fs::create_dir_all(&sparse_dir).map_err(|e| NcError::io(&sparse_dir, e))?;
    fs::create_dir_all(&gt_dir).map_err(|e| NcError::io(&gt_dir, e))?;
    for (i, s) in samples.iter().enumerate() {
        save_depth_png(&s.sparse_depth, &sparse_dir.join(format!("{i:05}.png")))?;
        save_depth_png(&s.gt_depth, &gt_dir.join(format!("{i:05}.png")))?;
    }
    Ok(())
}

/// Load a dataset split written by [`save_dataset`] (or following the same
/// layout). Files are paired by name.
pub fn load_dataset(dir: &Path, split: &str) -> Result<Vec<Sample>> {
    let sparse_dir = dir.join(split).join("sparse");
    let gt_dir = dir.join(split).join("gt");
    let mut names: Vec<PathBuf> = fs::read_dir(&sparse_dir)
        .map_err(|e| NcError::io(&sparse_dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().map(|x| x == "png").unwrap_or(false))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(NcError::Io {
            path: sparse_dir,
            message: "no .png files in split".into(),
        });
    }
    let mut samples = Vec::with_capacity(names.len());
    for sparse_path in names {
        let file = sparse_path.file_name().expect("file from read_dir");
        let gt_path = gt_dir.join(file);
        let (sparse, conf) = load_depth_png(&sparse_path)?;
        let (gt, valid) = load_depth_png(&gt_path)?;
        if gt.shape() != sparse.shape() {
            return Err(NcError::Shape(format!(
                "{}: gt shape {:?} does not match sparse {:?}",
                gt_path.display(),
                gt.shape(),
                sparse.shape()
            )));
        }
        samples.push(Sample::new(sparse, conf, gt, valid)?);
    }
    Ok(samples)
}

/// Fill every unmeasured pixel with the value of its nearest measured
/// pixel (Euclidean distance, ties to the smallest row-major index).
///
/// Searches expanding Chebyshev rings around each missing pixel; a ring at
/// radius r cannot contain any candidate closer than r, so the scan stops
/// once `r^2` exceeds the best squared distance found.
pub fn nn_fill(sparse: &Tensor4, conf: &Tensor4) -> Result<Tensor4> {
    if !sparse.same_shape(conf) {
        return Err(NcError::Shape(format!(
            "nn_fill: depth {:?} vs confidence {:?}",
            sparse.shape(),
            conf.shape()
        )));
    }
    let (n, ch, h, w) = sparse.shape();
    let mut out = sparse.clone();
    for b in 0..n {
        for ci in 0..ch {
            let cp = conf.plane(b, ci);
            let zp = sparse.plane(b, ci);
            if !cp.iter().any(|&c| c > 0.0) {
                return Err(NcError::InsufficientSupport(
                    "nn_fill needs at least one measured pixel".into(),
                ));
            }
            let base = (b * ch + ci) * h * w;
            for i in 0..h {
                for j in 0..w {
                    if cp[i * w + j] > 0.0 {
                        continue;
                    }
                    let mut best_d2 = usize::MAX;
                    let mut best_idx = usize::MAX;
                    let mut r = 1usize;
                    while best_d2 == usize::MAX || r * r <= best_d2 {
                        if r > h + w {
                            break;
                        }
                        // ring cells in row-major order
                        let y_lo = i as isize - r as isize;
                        let y_hi = i as isize + r as isize;
                        for y in y_lo..=y_hi {
                            if y < 0 || y >= h as isize {
                                continue;
                            }
                            let full_row = y == y_lo || y == y_hi;
                            let xs: &[isize] = &if full_row {
                                (j as isize - r as isize..=j as isize + r as isize)
                                    .collect::<Vec<_>>()
                            } else {
                                vec![j as isize - r as isize, j as isize + r as isize]
                            };
                            for &x in xs {
                                if x < 0 || x >= w as isize {
                                    continue;
                                }
                                let (yu, xu) = (y as usize, x as usize);
                                if cp[yu * w + xu] <= 0.0 {
                                    continue;
                                }
                                let dy = yu.abs_diff(i);
                                let dx = xu.abs_diff(j);
                                let d2 = dy * dy + dx * dx;
                                let idx = yu * w + xu;
                                if d2 < best_d2 || (d2 == best_d2 && idx < best_idx) {
                                    best_d2 = d2;
                                    best_idx = idx;
                                }
                            }
                        }
                        r += 1;
                    }
                    out.values_mut()[base + i * w + j] = zp[best_idx];
                }
            }
        }
    }
    Ok(out)
}

/// Error metrics over the valid ground-truth pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Mean absolute error (meters).
    pub mae: f64,
    /// Root mean square error (meters).
    pub rmse: f64,
    /// Mean absolute relative error.
    pub mre: f64,
    /// Inlier ratio at max-ratio threshold 1.01.
    pub delta1: f64,
    /// Inlier ratio at threshold 1.01^2.
    pub delta2: f64,
    /// Inlier ratio at threshold 1.01^3.
    pub delta3: f64,
    pub n_valid: usize,
}

/// Streaming accumulator so whole splits can be pooled pixel-wise.
#[derive(Debug, Clone, Default)]
pub struct MetricsAccumulator {
    abs_sum: f64,
    sq_sum: f64,
    rel_sum: f64,
    inliers: [usize; 3],
    count: usize,
}

impl MetricsAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, pred: &Tensor4, gt: &Tensor4, valid: &Tensor4) -> Result<()> {
        if !pred.same_shape(gt) || !pred.same_shape(valid) {
            return Err(NcError::Shape(format!(
                "evaluate: pred {:?}, gt {:?}, valid {:?} must agree",
                pred.shape(),
                gt.shape(),
                valid.shape()
            )));
        }
        for ((&z, &t), &v) in pred
            .values()
            .iter()
            .zip(gt.values())
            .zip(valid.values())
        {
            if v <= 0.5 {
                continue;
            }
            if t <= 0.0 {
                return Err(NcError::Invalid(format!(
                    "ground truth must be positive on valid pixels, got {t}"
                )));
            }
            let err = (z - t).abs();
            self.abs_sum += err;
            self.sq_sum += (z - t) * (z - t);
            self.rel_sum += err / t;
            // a non-positive prediction can never be an inlier of the
            // symmetric max-ratio criterion
            let ratio = if z > 0.0 { (z / t).max(t / z) } else { f64::INFINITY };
            let mut thr = 1.01;
            for slot in self.inliers.iter_mut() {
                if ratio < thr {
                    *slot += 1;
                }
                thr *= 1.01;
            }
            self.count += 1;
        }
        Ok(())
    }

    pub fn finish(&self) -> Result<MetricsReport> {
        if self.count == 0 {
            return Err(NcError::Invalid("no valid pixels to evaluate".into()));
        }
        let n = self.count as f64;
        Ok(MetricsReport {
            mae: self.abs_sum / n,
            rmse: (self.sq_sum / n).sqrt(),
            mre: self.rel_sum / n,
            delta1: self.inliers[0] as f64 / n,
            delta2: self.inliers[1] as f64 / n,
            delta3: self.inliers[2] as f64 / n,
            n_valid: self.count,
        })
    }
}

/// Metrics for a single prediction.
pub fn evaluate(pred: &Tensor4, gt: &Tensor4, valid: &Tensor4) -> Result<MetricsReport> {
    let mut acc = MetricsAccumulator::new();
    acc.add(pred, gt, valid)?;
    acc.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use tempfile::tempdir;

    #[test]
    fn synthetic_generation_is_deterministic_and_in_range() {
        let a = gen_synthetic(9, 3, 16, 0.3, 0.5).unwrap();
        let b = gen_synthetic(9, 3, 16, 0.3, 0.5).unwrap();
        assert_eq!(a, b);
        let c = gen_synthetic(10, 3, 16, 0.3, 0.5).unwrap();
        assert_ne!(a, c);
        for s in &a {
            for (&d, &cf) in s.sparse_depth.values().iter().zip(s.input_conf.values()) {
                assert!(cf == 0.0 || cf == 1.0);
                if cf > 0.0 {
                    assert!((2.0..=80.0).contains(&d));
                } else {
                    assert_eq!(d, 0.0);
                }
            }
        }
    }

    #[test]
    fn full_density_keeps_the_whole_scene() {
        let s = &gen_synthetic(4, 1, 16, 1.0, 1.0).unwrap()[0];
        assert!(s.input_conf.values().iter().all(|&c| c == 1.0));
        assert!(s.gt_valid.values().iter().all(|&v| v == 1.0));
        assert_eq!(s.sparse_depth, s.gt_depth);
        assert!(s.sparse_depth.values().iter().all(|&d| d >= 2.0));
    }

    #[test]
    fn measured_pixel_count_is_binomially_plausible() {
        // 64x64 at density 0.05: mean 204.8, sigma ~13.9; 3 sigma band
        let samples = gen_synthetic(0, 10, 64, 0.05, 0.3).unwrap();
        let mut total = 0usize;
        for s in &samples {
            let count = s.input_conf.values().iter().filter(|&&c| c > 0.0).count();
            assert!(
                (163..=247).contains(&count),
                "count {count} outside +-3 sigma of Binomial(4096, 0.05)"
            );
            total += count;
        }
        // pooled count, 3 sigma of Binomial(40960, 0.05): 2048 +- 132
        assert!((1916..=2180).contains(&total), "pooled count {total}");
    }

    #[test]
    fn bad_generation_parameters_are_rejected() {
        assert!(gen_synthetic(1, 0, 16, 0.5, 0.5).is_err());
        assert!(gen_synthetic(1, 1, 16, 0.0, 0.5).is_err());
        assert!(gen_synthetic(1, 1, 16, 0.5, 1.5).is_err());
        assert!(gen_synthetic(1, 1, 15, 0.5, 0.5).is_err());
    }

    #[test]
    fn depth_png_round_trips_on_quantized_values() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("d.png");
        // multiples of 1/256 m survive exactly; 0 stays missing
        let depth = Tensor4::from_vec(
            1,
            1,
            2,
            3,
            vec![1.0, 0.0, 256.0 / 256.0 + 5.0, 0.5, 80.0, 3.25],
        )
        .unwrap();
        save_depth_png(&depth, &path).unwrap();
        let (back, conf) = load_depth_png(&path).unwrap();
        assert_eq!(back, depth);
        for (&c, &d) in conf.values().iter().zip(depth.values()) {
            assert_eq!(c, if d > 0.0 { 1.0 } else { 0.0 });
        }
    }

    #[test]
    fn depth_png_convention_values() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("one_meter.png");
        let depth = Tensor4::from_vec(1, 1, 1, 2, vec![1.0, 0.0]).unwrap();
        save_depth_png(&depth, &path).unwrap();
        let (back, conf) = load_depth_png(&path).unwrap();
        // pixel 256 -> 1.0 m with confidence 1; pixel 0 -> missing
        assert_eq!(back.get(0, 0, 0, 0), 1.0);
        assert_eq!(conf.get(0, 0, 0, 0), 1.0);
        assert_eq!(back.get(0, 0, 0, 1), 0.0);
        assert_eq!(conf.get(0, 0, 0, 1), 0.0);
        assert!(save_depth_png(
            &Tensor4::from_vec(1, 1, 1, 1, vec![-1.0]).unwrap(),
            &path
        )
        .is_err());
    }

    #[test]
    fn conf_png_quantization() {
        let dir = tempdir().unwrap();
        for (c, expect) in [(1.0, 255u8), (0.5, 128), (0.0, 0)] {
            let path = dir.path().join(format!("c{expect}.png"));
            let conf = Tensor4::full(1, 1, 2, 2, c).unwrap();
            save_conf_png(&conf, &path).unwrap();
            let img = image::open(&path).unwrap();
            match img {
                image::DynamicImage::ImageLuma8(g) => {
                    assert!(g.pixels().all(|p| p.0[0] == expect), "c={c}");
                }
                other => panic!("unexpected format {:?}", other.color()),
            }
        }
        let over = Tensor4::full(1, 1, 1, 1, 1.5).unwrap();
        assert!(save_conf_png(&over, &dir.path().join("x.png")).is_err());
    }

    #[test]
    fn eight_bit_png_is_rejected_as_depth() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("gray8.png");
        let conf = Tensor4::full(1, 1, 2, 2, 0.5).unwrap();
        save_conf_png(&conf, &path).unwrap();
        let err = load_depth_png(&path).unwrap_err();
        assert!(matches!(err, NcError::Format(_)), "{err}");
    }

    #[test]
    fn dataset_directory_round_trip() {
        let dir = tempdir().unwrap();
        // quantize depths so the files reproduce the samples exactly
        let samples: Vec<Sample> = gen_synthetic(5, 3, 16, 0.4, 0.6)
            .unwrap()
            .into_iter()
            .map(|s| {
                let q = |t: &Tensor4| {
                    Tensor4::from_vec(
                        1,
                        1,
                        t.height(),
                        t.width(),
                        t.values()
                            .iter()
                            .map(|&v| (v * 256.0).round() / 256.0)
                            .collect(),
                    )
                    .unwrap()
                };
                Sample::new(
                    q(&s.sparse_depth),
                    s.input_conf.clone(),
                    q(&s.gt_depth),
                    s.gt_valid.clone(),
                )
                .unwrap()
            })
            .collect();
        save_dataset(dir.path(), "train", &samples).unwrap();
        assert!(dir.path().join("train/sparse/00000.png").exists());
        assert!(dir.path().join("train/gt/00002.png").exists());
        let back = load_dataset(dir.path(), "train").unwrap();
        assert_eq!(back, samples);
        assert!(load_dataset(dir.path(), "missing").is_err());
    }

    /// All-pairs nearest-measured search with the same tie rule.
    fn nn_fill_brute(sparse: &Tensor4, conf: &Tensor4) -> Tensor4 {
        let (_, _, h, w) = sparse.shape();
        let mut out = sparse.clone();
        for i in 0..h {
            for j in 0..w {
                if conf.get(0, 0, i, j) > 0.0 {
                    continue;
                }
                let mut best = (usize::MAX, usize::MAX);
                for y in 0..h {
                    for x in 0..w {
                        if conf.get(0, 0, y, x) <= 0.0 {
                            continue;
                        }
                        let d2 = y.abs_diff(i).pow(2) + x.abs_diff(j).pow(2);
                        let key = (d2, y * w + x);
                        if key < best {
                            best = key;
                        }
                    }
                }
                out.set(0, 0, i, j, sparse.get(0, 0, best.1 / w, best.1 % w));
            }
        }
        out
    }

    #[test]
    fn nn_fill_basics() {
        // dense input: identity
        let mut rng = SeededRng::new(2);
        let dense = Tensor4::from_fn(1, 1, 4, 4, |_, _, _, _| rng.uniform(1.0, 9.0)).unwrap();
        let ones = Tensor4::full(1, 1, 4, 4, 1.0).unwrap();
        assert_eq!(nn_fill(&dense, &ones).unwrap(), dense);

        // single measurement: constant image
        let mut z = Tensor4::zeros(1, 1, 5, 5).unwrap();
        let mut c = Tensor4::zeros(1, 1, 5, 5).unwrap();
        z.set(0, 0, 3, 1, 7.5);
        c.set(0, 0, 3, 1, 1.0);
        let filled = nn_fill(&z, &c).unwrap();
        assert!(filled.values().iter().all(|&v| v == 7.5));

        // nothing measured: rejected
        let zeros = Tensor4::zeros(1, 1, 4, 4).unwrap();
        assert!(matches!(
            nn_fill(&zeros, &zeros),
            Err(NcError::InsufficientSupport(_))
        ));
    }

    #[test]
    fn nn_fill_matches_brute_force() {
        let mut rng = SeededRng::new(8);
        for trial in 0..10 {
            let mut z = Tensor4::zeros(1, 1, 16, 16).unwrap();
            let mut c = Tensor4::zeros(1, 1, 16, 16).unwrap();
            let mut any = false;
            for i in 0..16 {
                for j in 0..16 {
                    if rng.bernoulli(0.1) {
                        z.set(0, 0, i, j, rng.uniform(1.0, 80.0));
                        c.set(0, 0, i, j, 1.0);
                        any = true;
                    }
                }
            }
            if !any {
                z.set(0, 0, 0, 0, 5.0);
                c.set(0, 0, 0, 0, 1.0);
            }
            let fast = nn_fill(&z, &c).unwrap();
            let slow = nn_fill_brute(&z, &c);
            assert_eq!(fast, slow, "trial {trial}");
        }
    }

    #[test]
    fn perfect_prediction_metrics() {
        let gt = Tensor4::from_vec(1, 1, 2, 2, vec![2.0, 4.0, 8.0, 16.0]).unwrap();
        let valid = Tensor4::full(1, 1, 2, 2, 1.0).unwrap();
        let m = evaluate(&gt, &gt, &valid).unwrap();
        assert_eq!(m.mae, 0.0);
        assert_eq!(m.rmse, 0.0);
        assert_eq!(m.mre, 0.0);
        assert_eq!((m.delta1, m.delta2, m.delta3), (1.0, 1.0, 1.0));
        assert_eq!(m.n_valid, 4);
    }

    #[test]
    fn two_percent_overshoot_straddles_the_delta_thresholds() {
        let gt = Tensor4::full(1, 1, 3, 3, 10.0).unwrap();
        let pred = gt.scale(1.02);
        let valid = Tensor4::full(1, 1, 3, 3, 1.0).unwrap();
        let m = evaluate(&pred, &gt, &valid).unwrap();
        assert_eq!(m.delta1, 0.0); // 1.02 > 1.01
        assert_eq!(m.delta2, 1.0); // 1.02 < 1.0201
        assert_eq!(m.delta3, 1.0);
        assert_abs_diff_eq!(m.mre, 0.02, epsilon = 1e-12);
    }

    #[test]
    fn metrics_match_scalar_reference_loop() {
        let mut rng = SeededRng::new(3);
        let gt = Tensor4::from_fn(1, 1, 8, 8, |_, _, _, _| rng.uniform(2.0, 60.0)).unwrap();
        let pred = Tensor4::from_fn(1, 1, 8, 8, |_, _, _, _| rng.uniform(1.0, 70.0)).unwrap();
        let valid = Tensor4::from_fn(1, 1, 8, 8, |_, _, _, _| {
            if rng.bernoulli(0.7) {
                1.0
            } else {
                0.0
            }
        })
        .unwrap();
        let m = evaluate(&pred, &gt, &valid).unwrap();

        // independent scalar recomputation
        let (mut abs, mut sq, mut rel, mut n) = (0.0, 0.0, 0.0, 0.0);
        let mut inl = [0.0; 3];
        for k in 0..64 {
            if valid.values()[k] < 0.5 {
                continue;
            }
            let (z, t) = (pred.values()[k], gt.values()[k]);
            abs += (z - t).abs();
            sq += (z - t) * (z - t);
            rel += (z - t).abs() / t;
            for (i, slot) in inl.iter_mut().enumerate() {
                if z > 0.0 && (z / t).max(t / z) < 1.01f64.powi(i as i32 + 1) {
                    *slot += 1.0;
                }
            }
            n += 1.0;
        }
        assert_abs_diff_eq!(m.mae, abs / n, epsilon = 1e-12);
        assert_abs_diff_eq!(m.rmse, (sq / n).sqrt(), epsilon = 1e-12);
        assert_abs_diff_eq!(m.mre, rel / n, epsilon = 1e-12);
        assert_abs_diff_eq!(m.delta1, inl[0] / n, epsilon = 1e-12);
        assert_abs_diff_eq!(m.delta2, inl[1] / n, epsilon = 1e-12);
        assert_abs_diff_eq!(m.delta3, inl[2] / n, epsilon = 1e-12);
        assert!(m.rmse >= m.mae);
        assert!(m.delta1 <= m.delta2 && m.delta2 <= m.delta3);
    }

    #[test]
    fn evaluation_ignores_invalid_pixels_bitwise() {
        let mut rng = SeededRng::new(4);
        let gt = Tensor4::from_fn(1, 1, 6, 6, |_, _, _, _| rng.uniform(2.0, 60.0)).unwrap();
        let mut pred = Tensor4::from_fn(1, 1, 6, 6, |_, _, _, _| rng.uniform(1.0, 70.0)).unwrap();
        let valid = Tensor4::from_fn(1, 1, 6, 6, |_, _, i, j| ((i + j) % 2) as f64).unwrap();
        let before = evaluate(&pred, &gt, &valid).unwrap();
        // flip every invalid pixel to garbage
        for k in 0..36 {
            if valid.values()[k] < 0.5 {
                pred.values_mut()[k] = 1e6;
            }
        }
        let after = evaluate(&pred, &gt, &valid).unwrap();
        assert_eq!(before.mae.to_bits(), after.mae.to_bits());
        assert_eq!(before.rmse.to_bits(), after.rmse.to_bits());
        assert_eq!(before.mre.to_bits(), after.mre.to_bits());
        assert_eq!(before, after);
    }

    #[test]
    fn empty_valid_set_is_rejected() {
        let t = Tensor4::full(1, 1, 2, 2, 5.0).unwrap();
        let none = Tensor4::zeros(1, 1, 2, 2).unwrap();
        assert!(evaluate(&t, &t, &none).is_err());
    }

    #[test]
    fn negative_predictions_are_never_inliers() {
        let gt = Tensor4::full(1, 1, 1, 2, 10.0).unwrap();
        let pred = Tensor4::from_vec(1, 1, 1, 2, vec![-10.0, 10.0]).unwrap();
        let valid = Tensor4::full(1, 1, 1, 2, 1.0).unwrap();
        let m = evaluate(&pred, &gt, &valid).unwrap();
        assert_eq!(m.delta3, 0.5);
    }
}
