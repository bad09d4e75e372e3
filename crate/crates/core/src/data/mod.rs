//! Synthetic dataset generation and on-disk persistence.
//!
//! A dataset directory holds `images.atwb`, `labels.csv`, optionally
//! `masks.atwb` (binary salient-region masks, synthetic data only) and
//! `provenance.json` (generator config echo).
//!
//! The generator makes a two-class shape task: class 0 is a filled
//! Gaussian blob, class 1 an annulus, with randomized center, scale and
//! rotation plus clipped additive noise. Grayscale by default; RGB sits
//! behind a flag.

pub mod container;
pub mod pgm;

use crate::error::{Error, Result};
use crate::rng::PrngState;
use crate::tensor::{Element, Tensor};
use container::{container_from_bytes, find_entry, Entry, EntryData};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

/// Binary salient-region masks, one `[h, w]` grid per image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Masks {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<u8>,
}

impl Masks {
    pub fn mask_for(&self, i: usize) -> &[u8] {
        &self.data[i * self.h * self.w..(i + 1) * self.h * self.w]
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Provenance {
    pub format: String,
    pub version: u32,
    pub split: String,
    pub class_names: Vec<String>,
    pub generator: SynthConfig,
}

/// Images in `[0, 1]`, integer labels, and optional per-image masks.
#[derive(Debug, Clone)]
pub struct Dataset<E: Element = f32> {
    pub images: Tensor<E>,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
    pub masks: Option<Masks>,
    pub provenance: Option<Provenance>,
}

impl<E: Element> Dataset<E> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn class_count(&self) -> usize {
        self.class_names
            .len()
            .max(self.labels.iter().map(|&l| l + 1).max().unwrap_or(0))
    }

    /// One image as `[C, H, W]`.
    pub fn image(&self, i: usize) -> Tensor<E> {
        self.images.index_axis0(i)
    }

    /// Copies the listed rows into a smaller dataset.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset<E>> {
        if indices.is_empty() {
            return Err(Error::EmptyInput { op: "subset" });
        }
        let images = Tensor::stack(&indices.iter().map(|&i| self.image(i)).collect::<Vec<_>>())?;
        let masks = self.masks.as_ref().map(|m| {
            let plane = m.h * m.w;
            let mut data = Vec::with_capacity(indices.len() * plane);
            for &i in indices {
                data.extend_from_slice(m.mask_for(i));
            }
            Masks {
                n: indices.len(),
                h: m.h,
                w: m.w,
                data,
            }
        });
        Ok(Dataset {
            images,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_names: self.class_names.clone(),
            masks,
            provenance: self.provenance.clone(),
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    /// Square image side; must be divisible by 8.
    pub size: usize,
    /// Fixed at 2 (blob vs. ring).
    pub class_count: usize,
    pub n_train: usize,
    pub n_test: usize,
    /// class0 : class1 sample ratio.
    pub imbalance_ratio: f64,
    /// Uniform noise half-width added per pixel, clipped to [0, 1].
    pub noise_amplitude: f64,
    /// Annulus radius range as a fraction of the image side.
    pub ring_radius: (f64, f64),
    pub ring_thickness: (f64, f64),
    /// Blob sigma range as a fraction of the image side.
    pub blob_sigma: (f64, f64),
    pub rgb: bool,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            size: 32,
            class_count: 2,
            n_train: 2000,
            n_test: 500,
            imbalance_ratio: 1.0,
            noise_amplitude: 0.05,
            ring_radius: (0.22, 0.34),
            ring_thickness: (0.05, 0.09),
            blob_sigma: (0.10, 0.18),
            rgb: false,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.size.is_multiple_of(8) || self.size == 0 {
            return Err(Error::invalid(
                "synth",
                format!("size {} must be a positive multiple of 8", self.size),
            ));
        }
        if self.class_count != 2 {
            return Err(Error::invalid(
                "synth",
                "generator produces exactly 2 classes",
            ));
        }
        if self.imbalance_ratio <= 0.0 {
            return Err(Error::invalid("synth", "imbalance ratio must be positive"));
        }
        if self.noise_amplitude < 0.0 {
            return Err(Error::invalid(
                "synth",
                "noise amplitude must be non-negative",
            ));
        }
        for (name, (lo, hi)) in [
            ("ring_radius", self.ring_radius),
            ("ring_thickness", self.ring_thickness),
            ("blob_sigma", self.blob_sigma),
        ] {
            if lo <= 0.0 || hi < lo {
                return Err(Error::invalid("synth", format!("bad {name} range")));
            }
        }
        Ok(())
    }

    /// Split `n` into (class0, class1) counts: floor rounding on class 1,
    /// remainder to class 0.
    pub fn class_split(&self, n: usize) -> Result<(usize, usize)> {
        let n1 = (n as f64 / (self.imbalance_ratio + 1.0)).floor() as usize;
        let n0 = n - n1;
        if n0 == 0 || n1 == 0 {
            return Err(Error::invalid(
                "synth",
                format!(
                    "ratio {} yields an empty class for n = {n}",
                    self.imbalance_ratio
                ),
            ));
        }
        Ok((n0, n1))
    }

    pub fn channels(&self) -> usize {
        if self.rgb {
            3
        } else {
            1
        }
    }
}

pub struct SynthOutput<E: Element = f32> {
    pub train: Dataset<E>,
    pub test: Dataset<E>,
}

/// Fraction of the noiseless peak below which a pixel is outside the mask.
const MASK_THRESHOLD: f64 = 0.1;

/// One image from its own substream; parallel-safe and order-independent.
fn render_image<E: Element>(
    cfg: &SynthConfig,
    global_index: u64,
    label: usize,
    pixels: &mut [E],
    mask: &mut [u8],
) {
    let mut rng = PrngState::substream(cfg.seed, global_index);
    let size = cfg.size;
    let s = size as f64;
    let cx = rng.uniform(0.35, 0.65) * s;
    let cy = rng.uniform(0.35, 0.65) * s;

    // shape parameters, in pixels
    enum Shape {
        Blob {
            su: f64,
            sv: f64,
            cos_t: f64,
            sin_t: f64,
        },
        Ring {
            radius: f64,
            thickness: f64,
        },
    }
    let shape = if label == 0 {
        let su = rng.uniform(cfg.blob_sigma.0, cfg.blob_sigma.1) * s;
        let ratio = rng.uniform(0.6, 1.0);
        let theta = rng.uniform(0.0, std::f64::consts::PI);
        Shape::Blob {
            su,
            sv: su * ratio,
            cos_t: theta.cos(),
            sin_t: theta.sin(),
        }
    } else {
        Shape::Ring {
            radius: rng.uniform(cfg.ring_radius.0, cfg.ring_radius.1) * s,
            thickness: rng.uniform(cfg.ring_thickness.0, cfg.ring_thickness.1) * s,
        }
    };
    let amp = rng.uniform(0.7, 1.0);
    let channels = cfg.channels();
    let mut tint = [1.0f64; 3];
    if cfg.rgb {
        for t in tint.iter_mut().take(3) {
            *t = rng.uniform(0.6, 1.0);
        }
    }

    let plane = size * size;
    let mut base = vec![0.0f64; plane];
    for y in 0..size {
        for x in 0..size {
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            let v = match &shape {
                Shape::Blob {
                    su,
                    sv,
                    cos_t,
                    sin_t,
                } => {
                    let u = dx * cos_t + dy * sin_t;
                    let w = -dx * sin_t + dy * cos_t;
                    (-(u * u / (2.0 * su * su) + w * w / (2.0 * sv * sv))).exp()
                }
                Shape::Ring { radius, thickness } => {
                    let d = (dx * dx + dy * dy).sqrt();
                    let e = d - radius;
                    (-(e * e) / (2.0 * thickness * thickness)).exp()
                }
            };
            base[y * size + x] = v;
            mask[y * size + x] = u8::from(v > MASK_THRESHOLD);
        }
    }

    for c in 0..channels {
        for (i, &b) in base.iter().enumerate() {
            let noise = rng.uniform(-cfg.noise_amplitude, cfg.noise_amplitude);
            let v = (amp * tint[c] * b + noise).clamp(0.0, 1.0);
            pixels[c * plane + i] = E::from_f64(v);
        }
    }
}

fn generate_split<E: Element>(
    cfg: &SynthConfig,
    n: usize,
    index_offset: u64,
    split: &str,
) -> Result<Dataset<E>> {
    let (n0, _) = cfg.class_split(n)?;
    let channels = cfg.channels();
    let plane = cfg.size * cfg.size;
    let mut images = Tensor::zeros(&[n, channels, cfg.size, cfg.size]);
    let mut masks = Masks {
        n,
        h: cfg.size,
        w: cfg.size,
        data: vec![0u8; n * plane],
    };
    let mut labels = Vec::with_capacity(n);
    let img_stride = channels * plane;
    for i in 0..n {
        let label = usize::from(i >= n0);
        labels.push(label);
        render_image(
            cfg,
            index_offset + i as u64,
            label,
            &mut images.data_mut()[i * img_stride..(i + 1) * img_stride],
            &mut masks.data[i * plane..(i + 1) * plane],
        );
    }
    let class_names = vec!["blob".to_string(), "ring".to_string()];
    Ok(Dataset {
        images,
        labels,
        class_names: class_names.clone(),
        masks: Some(masks),
        provenance: Some(Provenance {
            format: "atwb-dataset".into(),
            version: 1,
            split: split.into(),
            class_names,
            generator: cfg.clone(),
        }),
    })
}

pub fn generate_synthetic<E: Element>(cfg: &SynthConfig) -> Result<SynthOutput<E>> {
    cfg.validate()?;
    let train = generate_split(cfg, cfg.n_train, 0, "train")?;
    let test = generate_split(cfg, cfg.n_test, cfg.n_train as u64, "test")?;
    Ok(SynthOutput { train, test })
}

pub fn save_dataset<E: Element>(ds: &Dataset<E>, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;

    container::save_container(
        &[Entry::from_tensor("images", &ds.images)],
        dir.join("images.atwb"),
    )?;

    let mut csv = String::from("index,label\n");
    for (i, &l) in ds.labels.iter().enumerate() {
        csv.push_str(&format!("{i},{l}\n"));
    }
    let labels_path = dir.join("labels.csv");
    fs::write(&labels_path, csv).map_err(|e| Error::io(labels_path.display().to_string(), e))?;

    if let Some(m) = &ds.masks {
        let entry = Entry {
            name: "masks".into(),
            shape: vec![m.n, 1, m.h, m.w],
            data: EntryData::U8(m.data.clone()),
        };
        container::save_container(&[entry], dir.join("masks.atwb"))?;
    }

    if let Some(p) = &ds.provenance {
        let json = serde_json::to_string_pretty(p)
            .map_err(|e| Error::invalid("provenance", e.to_string()))?;
        let path = dir.join("provenance.json");
        fs::write(&path, json).map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    Ok(())
}

pub fn load_dataset<E: Element>(dir: impl AsRef<Path>) -> Result<Dataset<E>> {
    let dir = dir.as_ref();
    let images_path = dir.join("images.atwb");
    let entries = container::load_container(&images_path)?;
    let images: Tensor<E> = find_entry(&entries, "images")?.to_tensor()?;

    let labels_path = dir.join("labels.csv");
    let text = fs::read_to_string(&labels_path)
        .map_err(|e| Error::io(labels_path.display().to_string(), e))?;
    let mut labels = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if lineno == 0 || line.is_empty() {
            continue;
        }
        let label = line
            .split(',')
            .nth(1)
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(|| Error::FileFormat {
                path: labels_path.display().to_string(),
                message: format!("bad label row {}", lineno + 1),
            })?;
        labels.push(label);
    }
    if labels.len() != images.shape()[0] {
        return Err(Error::FileFormat {
            path: labels_path.display().to_string(),
            message: format!("{} labels for {} images", labels.len(), images.shape()[0]),
        });
    }

    let masks_path = dir.join("masks.atwb");
    let masks = if masks_path.exists() {
        let bytes =
            fs::read(&masks_path).map_err(|e| Error::io(masks_path.display().to_string(), e))?;
        let entries = container_from_bytes(&bytes)?;
        let entry = find_entry(&entries, "masks")?;
        match &entry.data {
            EntryData::U8(data) => Some(Masks {
                n: entry.shape[0],
                h: entry.shape[2],
                w: entry.shape[3],
                data: data.clone(),
            }),
            _ => {
                return Err(Error::FileFormat {
                    path: masks_path.display().to_string(),
                    message: "masks entry must be u8".into(),
                })
            }
        }
    } else {
        None
    };

    let prov_path = dir.join("provenance.json");
    let provenance = if prov_path.exists() {
        let text = fs::read_to_string(&prov_path)
            .map_err(|e| Error::io(prov_path.display().to_string(), e))?;
        Some(serde_json::from_str(&text).map_err(|e| Error::FileFormat {
            path: prov_path.display().to_string(),
            message: e.to_string(),
        })?)
    } else {
        None
    };

    let class_names = provenance
        .as_ref()
        .map(|p: &Provenance| p.class_names.clone())
        .unwrap_or_else(|| {
            let k = labels.iter().map(|&l| l + 1).max().unwrap_or(0);
            (0..k).map(|i| format!("class{i}")).collect()
        });

    Ok(Dataset {
        images,
        labels,
        class_names,
        masks,
        provenance,
    })
}
