//! Labelled image sets: a synthetic coloured-shape generator and a loader
//! for directories of class-named subfolders. Pixels live in `[-1, 1]`,
//! images are `[N, 3, S, S]`.

use std::fs;
use std::path::{Path, PathBuf};

use diffrep_tensor::rng::stream;
use diffrep_tensor::Tensor;
use image::imageops::FilterType;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case")]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    ImageDirectory {
        path: PathBuf,
        #[serde(default)]
        flip: bool,
    },
    PackedBinary {
        path: PathBuf,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetDescriptor {
    pub source: DataSource,
    pub image_size: usize,
    pub classes: usize,
    pub class_names: Vec<String>,
    pub count: usize,
    /// Pixel range after normalization.
    pub range: (f64, f64),
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub descriptor: DatasetDescriptor,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.descriptor.classes
    }

    /// Rows `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut descriptor = self.descriptor.clone();
        descriptor.count = indices.len();
        Dataset {
            images: self.images.gather_batch(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            descriptor,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Class = shape × colour family; position, size, shade and background
    /// vary per image.
    Shapes,
    /// Class = a fixed random template plus small pixel noise. Linearly
    /// separable by construction.
    Separable,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub per_class: usize,
    pub size: usize,
    pub seed: u64,
    #[serde(default = "default_variant")]
    pub variant: Variant,
    /// Standard deviation of per-pixel Gaussian noise.
    #[serde(default = "default_noise")]
    pub noise: f64,
}

fn default_variant() -> Variant {
    Variant::Shapes
}

fn default_noise() -> f64 {
    0.05
}

const SHAPES: [&str; 4] = ["disk", "square", "triangle", "ring"];

const PALETTE: [[f64; 3]; 6] = [
    [0.9, 0.2, 0.2],
    [0.2, 0.8, 0.3],
    [0.25, 0.35, 0.95],
    [0.95, 0.85, 0.2],
    [0.85, 0.3, 0.85],
    [0.2, 0.85, 0.9],
];

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 {
            return Err(Error::Parameter {
                field: "classes",
                reason: "must be positive".into(),
            });
        }
        if self.per_class == 0 {
            return Err(Error::Parameter {
                field: "per_class",
                reason: "must be positive".into(),
            });
        }
        if self.size < 4 {
            return Err(Error::Parameter {
                field: "size",
                reason: format!("{} is below the minimum of 4", self.size),
            });
        }
        if self.variant == Variant::Shapes && self.classes > SHAPES.len() * PALETTE.len() {
            return Err(Error::Parameter {
                field: "classes",
                reason: format!(
                    "the shapes variant supports at most {}",
                    SHAPES.len() * PALETTE.len()
                ),
            });
        }
        if !(self.noise >= 0.0) {
            return Err(Error::Parameter {
                field: "noise",
                reason: "must be non-negative".into(),
            });
        }
        Ok(())
    }

    fn shape_count(&self) -> usize {
        self.classes.min(SHAPES.len())
    }

    pub fn class_names(&self) -> Vec<String> {
        (0..self.classes)
            .map(|k| match self.variant {
                Variant::Shapes => {
                    let s = self.shape_count();
                    format!("{}-{}", SHAPES[k % s], k / s)
                }
                Variant::Separable => format!("template-{k}"),
            })
            .collect()
    }
}

fn inside(shape: usize, dx: f64, dy: f64, r: f64) -> bool {
    match shape {
        0 => dx * dx + dy * dy <= r * r,
        1 => dx.abs() <= 0.8 * r && dy.abs() <= 0.8 * r,
        2 => dy <= 0.7 * r && dy >= -r + 2.0 * dx.abs() * 1.1,
        _ => {
            let d = (dx * dx + dy * dy).sqrt();
            d <= r && d >= 0.55 * r
        }
    }
}

fn render_shape(spec: &SyntheticSpec, class: usize, index: usize) -> Vec<f64> {
    let s = spec.size;
    let mut rng = stream(
        spec.seed,
        "shape-image",
        (class * spec.per_class + index) as u64,
    );
    let shape = class % spec.shape_count();
    let family = class / spec.shape_count();
    let shade: f64 = rng.random_range(0.75..1.15);
    let colour: Vec<f64> = PALETTE[family]
        .iter()
        .map(|c| (c * shade).min(1.0) * 2.0 - 1.0)
        .collect();
    let background: f64 = rng.random_range(-0.9..-0.3);
    let sf = s as f64;
    let r = sf * rng.random_range(0.22..0.34);
    let cx = rng.random_range(r..sf - r);
    let cy = rng.random_range(r..sf - r);
    let mut out = vec![0.0; 3 * s * s];
    for y in 0..s {
        for x in 0..s {
            let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            let hit = inside(shape, dx, dy, r);
            for c in 0..3 {
                out[c * s * s + y * s + x] = if hit { colour[c] } else { background };
            }
        }
    }
    out
}

fn render_template(spec: &SyntheticSpec, class: usize) -> Vec<f64> {
    let mut rng = stream(spec.seed, "template", class as u64);
    (0..3 * spec.size * spec.size)
        .map(|_| if rng.random::<bool>() { 0.6 } else { -0.6 })
        .collect()
}

/// Generate `classes × per_class` images, grouped by class.
pub fn synthesize_dataset(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let s = spec.size;
    let n = spec.classes * spec.per_class;
    let mut data = Vec::with_capacity(n * 3 * s * s);
    let mut labels = Vec::with_capacity(n);
    for class in 0..spec.classes {
        let template = (spec.variant == Variant::Separable).then(|| render_template(spec, class));
        for index in 0..spec.per_class {
            let mut img = match &template {
                Some(t) => t.clone(),
                None => render_shape(spec, class, index),
            };
            let noise = Tensor::randn(
                [img.len()],
                &mut stream(
                    spec.seed,
                    "pixel-noise",
                    (class * spec.per_class + index) as u64,
                ),
            );
            for (p, z) in img.iter_mut().zip(noise.data()) {
                *p = (*p + spec.noise * z).clamp(-1.0, 1.0);
            }
            data.extend(img);
            labels.push(class);
        }
    }
    Ok(Dataset {
        images: Tensor::new([n, 3, s, s], data),
        labels,
        descriptor: DatasetDescriptor {
            source: DataSource::Synthetic(spec.clone()),
            image_size: s,
            classes: spec.classes,
            class_names: spec.class_names(),
            count: n,
            range: (-1.0, 1.0),
        },
    })
}

/// Stratified split: from each class, `round(eval_fraction · size)` images
/// (at least one when the class has two or more) go to evaluation. Both
/// index lists are sorted and disjoint.
pub fn train_eval_split(
    labels: &[usize],
    eval_fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0..1.0).contains(&eval_fraction) {
        return Err(Error::Parameter {
            field: "eval_fraction",
            reason: format!("{eval_fraction} is outside [0, 1)"),
        });
    }
    let classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let (mut train, mut eval) = (Vec::new(), Vec::new());
    for class in 0..classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        members.shuffle(&mut stream(seed, "split", class as u64));
        let mut k = (eval_fraction * members.len() as f64).round() as usize;
        if eval_fraction > 0.0 && members.len() >= 2 {
            k = k.clamp(1, members.len() - 1);
        }
        eval.extend_from_slice(&members[..k]);
        train.extend_from_slice(&members[k..]);
    }
    train.sort_unstable();
    eval.sort_unstable();
    Ok((train, eval))
}

/// A directory load plus the files that were skipped.
#[derive(Debug)]
pub struct LoadedImages {
    pub dataset: Dataset,
    pub warnings: Vec<String>,
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    entries.sort();
    Ok(entries)
}

/// Resize the shorter side to `size`, centre-crop to `size × size`, and
/// scale to `[-1, 1]`.
fn prepare_image(img: image::DynamicImage, size: usize) -> Vec<f64> {
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    let scale = size as f64 / w.min(h) as f64;
    let nw = ((w as f64 * scale).round() as u32).max(size as u32);
    let nh = ((h as f64 * scale).round() as u32).max(size as u32);
    let resized = image::imageops::resize(&rgb, nw, nh, FilterType::Triangle);
    let (x0, y0) = ((nw - size as u32) / 2, (nh - size as u32) / 2);
    let mut out = vec![0.0; 3 * size * size];
    for y in 0..size {
        for x in 0..size {
            let p = resized.get_pixel(x0 + x as u32, y0 + y as u32);
            for c in 0..3 {
                out[c * size * size + y * size + x] = f64::from(p[c]) / 127.5 - 1.0;
            }
        }
    }
    out
}

fn mirrored(img: &[f64], size: usize) -> Vec<f64> {
    let mut out = img.to_vec();
    for row in out.chunks_mut(size) {
        row.reverse();
    }
    out
}

/// Load `root/<class>/<image>` files in lexicographic path order. With
/// `flip`, every image is followed by its horizontal mirror. Files that
/// fail to decode become warnings; a class with no usable image is an
/// error.
pub fn load_image_directory(root: &Path, size: usize, flip: bool) -> Result<LoadedImages> {
    if size == 0 {
        return Err(Error::Parameter {
            field: "size",
            reason: "must be positive".into(),
        });
    }
    let class_dirs: Vec<PathBuf> = sorted_entries(root)?
        .into_iter()
        .filter(|p| p.is_dir())
        .collect();
    if class_dirs.is_empty() {
        return Err(Error::Invalid(format!(
            "{} has no class subdirectories",
            root.display()
        )));
    }
    let (mut data, mut labels, mut warnings, mut names) =
        (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (class, dir) in class_dirs.iter().enumerate() {
        names.push(
            dir.file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default(),
        );
        let mut count = 0;
        for file in sorted_entries(dir)?.into_iter().filter(|p| p.is_file()) {
            match image::open(&file) {
                Ok(img) => {
                    let pixels = prepare_image(img, size);
                    if flip {
                        let m = mirrored(&pixels, size);
                        data.extend(pixels);
                        data.extend(m);
                        labels.extend([class, class]);
                    } else {
                        data.extend(pixels);
                        labels.push(class);
                    }
                    count += 1;
                }
                Err(e) => warnings.push(format!("skipping {}: {e}", file.display())),
            }
        }
        if count == 0 {
            return Err(Error::Invalid(format!(
                "class directory {} has no readable images",
                dir.display()
            )));
        }
    }
    let n = labels.len();
    Ok(LoadedImages {
        dataset: Dataset {
            images: Tensor::new([n, 3, size, size], data),
            labels,
            descriptor: DatasetDescriptor {
                source: DataSource::ImageDirectory {
                    path: root.to_path_buf(),
                    flip,
                },
                image_size: size,
                classes: names.len(),
                class_names: names,
                count: n,
                range: (-1.0, 1.0),
            },
        },
        warnings,
    })
}
