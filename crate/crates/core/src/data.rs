//! Image datasets and PNG interchange.
//!
//! Images are `[h, w, 3]` tensors with values in `[0, 1]`.

use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::{ImageReader, RgbImage};
use nalgebra::Vector3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use surfgan_grad::Tensor;

use crate::error::{Error, Result};
use crate::geometry::{generate_rays, CameraView};

/// Random-access image collection.
pub trait ImageSource {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Image `index` as a `[resolution, resolution, 3]` tensor.
    fn get(&self, index: usize, resolution: usize) -> Result<Tensor>;

    /// Ground-truth `(pitch, yaw)` when the source knows it.
    fn pose(&self, _index: usize) -> Option<(f64, f64)> {
        None
    }
}

/// Visiting order for `epoch`; the same `(seed, epoch)` always gives the same order.
pub fn epoch_order(len: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut rng);
    order
}

/// Index of the `i`-th image drawn overall when walking epochs in [`epoch_order`].
pub fn draw_index(len: usize, seed: u64, i: u64) -> usize {
    let epoch = i / len as u64;
    epoch_order(len, seed, epoch)[(i % len as u64) as usize]
}

const EXTENSIONS: [&str; 4] = ["png", "jpg", "jpeg", "bmp"];

/// Image files under a directory, decoded on access.
#[derive(Clone, Debug)]
pub struct ImageFolder {
    pub root: PathBuf,
    paths: Vec<PathBuf>,
    skipped: usize,
}

/// Scans `root` (non-recursively) for images in sorted path order. Files
/// whose header cannot be read are skipped and counted.
pub fn load_image_folder(root: &Path) -> Result<ImageFolder> {
    let entries = std::fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    let mut candidates: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        })
        .collect();
    candidates.sort();
    let mut paths = Vec::with_capacity(candidates.len());
    let mut skipped = 0;
    for p in candidates {
        let readable = ImageReader::open(&p)
            .ok()
            .and_then(|r| r.with_guessed_format().ok())
            .and_then(|r| r.into_dimensions().ok())
            .is_some_and(|(w, h)| w > 0 && h > 0);
        if readable {
            paths.push(p);
        } else {
            log::warn!("skipping unreadable image {}", p.display());
            skipped += 1;
        }
    }
    Ok(ImageFolder {
        root: root.to_path_buf(),
        paths,
        skipped,
    })
}

impl ImageFolder {
    pub fn skipped(&self) -> usize {
        self.skipped
    }

    pub fn paths(&self) -> &[PathBuf] {
        &self.paths
    }
}

impl ImageSource for ImageFolder {
    fn len(&self) -> usize {
        self.paths.len()
    }

    fn get(&self, index: usize, resolution: usize) -> Result<Tensor> {
        let path = self
            .paths
            .get(index)
            .ok_or_else(|| Error::Data(format!("image index {index} out of range")))?;
        let img = image::open(path)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?
            .to_rgb8();
        Ok(rgb_to_tensor(&center_crop_resize(&img, resolution)))
    }
}

/// Largest centered square, resized with a bilinear (triangle) filter.
pub fn center_crop_resize(img: &RgbImage, resolution: usize) -> RgbImage {
    let (w, h) = img.dimensions();
    let side = w.min(h);
    let crop = image::imageops::crop_imm(img, (w - side) / 2, (h - side) / 2, side, side).to_image();
    if side as usize == resolution {
        return crop;
    }
    image::imageops::resize(&crop, resolution as u32, resolution as u32, FilterType::Triangle)
}

pub fn rgb_to_tensor(img: &RgbImage) -> Tensor {
    let (w, h) = img.dimensions();
    let data = img.as_raw().iter().map(|&v| v as f64 / 255.0).collect();
    Tensor::new(&[h as usize, w as usize, 3], data)
}

/// Values are clamped to `[0, 1]` and rounded to 8 bits.
pub fn tensor_to_rgb(t: &Tensor) -> Result<RgbImage> {
    let s = t.shape();
    if s.len() != 3 || s[2] != 3 {
        return Err(Error::invalid(format!("expected an [h, w, 3] image, got {s:?}")));
    }
    if !t.all_finite() {
        return Err(Error::Numeric("image contains non-finite pixels".into()));
    }
    let raw = t
        .data()
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    Ok(RgbImage::from_raw(s[1] as u32, s[0] as u32, raw).expect("buffer matches dimensions"))
}

pub fn save_png(path: &Path, t: &Tensor) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    tensor_to_rgb(t)?
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Data(format!("writing {}: {e}", path.display())))
}

pub fn load_png(path: &Path) -> Result<Tensor> {
    let img = image::open(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?
        .to_rgb8();
    Ok(rgb_to_tensor(&img))
}

/// Bilinear (triangle-filter) resize of an `[h, w, 3]` image to `resolution` squared.
pub fn resize_image(t: &Tensor, resolution: usize) -> Tensor {
    let (h, w) = (t.shape()[0] as u32, t.shape()[1] as u32);
    let buf: image::Rgb32FImage =
        image::ImageBuffer::from_raw(w, h, t.data().iter().map(|&v| v as f32).collect())
            .expect("buffer matches dimensions");
    let out = image::imageops::resize(&buf, resolution as u32, resolution as u32, FilterType::Triangle);
    Tensor::new(
        &[resolution, resolution, 3],
        out.into_raw().into_iter().map(f64::from).collect(),
    )
}

/// Tiles equally sized images row-major into a `rows x cols` grid.
pub fn make_grid(images: &[Tensor], cols: usize) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::invalid("cannot build a grid from zero images"))?;
    let (h, w) = (first.shape()[0], first.shape()[1]);
    if images.iter().any(|i| i.shape() != first.shape()) {
        return Err(Error::invalid("grid images must share one shape"));
    }
    let cols = cols.max(1);
    let rows = images.len().div_ceil(cols);
    let mut out = vec![0.0; rows * h * cols * w * 3];
    for (n, img) in images.iter().enumerate() {
        let (gr, gc) = (n / cols, n % cols);
        for y in 0..h {
            let dst = ((gr * h + y) * cols * w + gc * w) * 3;
            out[dst..dst + w * 3].copy_from_slice(&img.data()[y * w * 3..(y + 1) * w * 3]);
        }
    }
    Ok(Tensor::new(&[rows * h, cols * w, 3], out))
}

/// Analytic sphere centered at the origin, colored by its surface normal
/// (`0.5 + 0.5 n`) on a black background. The pixel at the image center
/// therefore encodes the viewing direction.
#[derive(Clone, Debug)]
pub struct SphereScene {
    pub radius: f64,
    pub camera: CameraView,
}

impl Default for SphereScene {
    fn default() -> Self {
        Self {
            radius: 0.08,
            camera: CameraView::default(),
        }
    }
}

impl SphereScene {
    pub fn render(&self, pitch: f64, yaw: f64, resolution: usize) -> Result<Tensor> {
        let view = self.camera.with_angles(pitch, yaw);
        let rays = generate_rays(&view, resolution, resolution)?;
        let mut data = vec![0.0; resolution * resolution * 3];
        for (i, (o, d)) in rays.origins.iter().zip(&rays.directions).enumerate() {
            if let Some(n) = sphere_normal(o, d, self.radius) {
                for c in 0..3 {
                    data[i * 3 + c] = 0.5 + 0.5 * n[c];
                }
            }
        }
        Ok(Tensor::new(&[resolution, resolution, 3], data))
    }
}

fn sphere_normal(o: &Vector3<f64>, d: &Vector3<f64>, r: f64) -> Option<Vector3<f64>> {
    let b = o.dot(d);
    let disc = b * b - (o.norm_squared() - r * r);
    if disc < 0.0 {
        return None;
    }
    let t = -b - disc.sqrt();
    (t > 0.0).then(|| (o + d * t) / r)
}

/// Recovers `(pitch, yaw)` from the center pixel of a [`SphereScene`] image.
pub fn sphere_pose_from_image(img: &Tensor) -> Option<(f64, f64)> {
    let (h, w) = (img.shape()[0], img.shape()[1]);
    let at = |y: usize, x: usize, c: usize| img.data()[(y * w + x) * 3 + c];
    // Average the central 2x2 (or single) pixel block, which straddles the axis.
    let ys = if h % 2 == 0 { vec![h / 2 - 1, h / 2] } else { vec![h / 2] };
    let xs = if w % 2 == 0 { vec![w / 2 - 1, w / 2] } else { vec![w / 2] };
    let mut n = Vector3::zeros();
    for &y in &ys {
        for &x in &xs {
            n += Vector3::new(at(y, x, 0), at(y, x, 1), at(y, x, 2)).map(|c| 2.0 * c - 1.0);
        }
    }
    if n.norm() < 1e-9 {
        return None;
    }
    let n = n.normalize();
    Some((n.y.clamp(-1.0, 1.0).asin(), n.x.atan2(n.z)))
}

/// Rendered spheres with known poses, drawn from `sampler` under `seed`.
#[derive(Clone, Debug)]
pub struct SphereDataset {
    pub scene: SphereScene,
    pub poses: Vec<(f64, f64)>,
}

impl SphereDataset {
    pub fn uniform(n: usize, max_pitch: f64, max_yaw: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let poses = (0..n)
            .map(|_| {
                (
                    rng.random_range(-max_pitch..=max_pitch),
                    rng.random_range(-max_yaw..=max_yaw),
                )
            })
            .collect();
        Self {
            scene: SphereScene::default(),
            poses,
        }
    }
}

impl ImageSource for SphereDataset {
    fn len(&self) -> usize {
        self.poses.len()
    }

    fn get(&self, index: usize, resolution: usize) -> Result<Tensor> {
        let (p, y) = *self
            .poses
            .get(index)
            .ok_or_else(|| Error::Data(format!("image index {index} out of range")))?;
        self.scene.render(p, y, resolution)
    }

    fn pose(&self, index: usize) -> Option<(f64, f64)> {
        self.poses.get(index).copied()
    }
}

/// Stacks images `[r, r, 3]` into `[B, r, r, 3]`.
pub fn stack(images: &[Tensor]) -> Tensor {
    let mut shape = vec![images.len()];
    shape.extend_from_slice(images[0].shape());
    let data = images.iter().flat_map(|t| t.data().iter().copied()).collect();
    Tensor::new(&shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn epoch_order_is_a_seeded_permutation() {
        let a = epoch_order(10, 3, 0);
        assert_eq!(a, epoch_order(10, 3, 0));
        assert_ne!(a, epoch_order(10, 3, 1));
        let mut s = a.clone();
        s.sort();
        assert_eq!(s, (0..10).collect::<Vec<_>>());
        assert_eq!(draw_index(10, 3, 13), epoch_order(10, 3, 1)[3]);
    }

    #[test]
    fn sphere_pose_roundtrip() {
        let scene = SphereScene::default();
        for (p, y) in [(0.0, 0.0), (0.3, -0.5), (-0.4, 0.7)] {
            let img = scene.render(p, y, 33).unwrap();
            let (ep, ey) = sphere_pose_from_image(&img).unwrap();
            assert!((ep - p).abs() < 1e-9 && (ey - y).abs() < 1e-9, "{p} {y} -> {ep} {ey}");
        }
    }

    #[test]
    fn png_roundtrip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let img = SphereScene::default().render(0.1, 0.2, 16).unwrap();
        let p = dir.path().join("s.png");
        save_png(&p, &img).unwrap();
        let back = load_png(&p).unwrap();
        assert!(back.max_abs_diff(&img) <= 0.5 / 255.0 + 1e-12);
    }

    #[test]
    fn grid_layout() {
        let a = Tensor::zeros(&[1, 2, 3]);
        let b = Tensor::ones(&[1, 2, 3]);
        let g = make_grid(&[a, b.clone(), b], 2).unwrap();
        assert_eq!(g.shape(), &[2, 4, 3]);
        assert_eq!(&g.data()[6..12], &[1.0; 6]);
        assert_eq!(&g.data()[18..24], &[0.0; 6]);
    }
}
