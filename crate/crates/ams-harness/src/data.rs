//! Synthetic multi-domain identity data.
//!
//! Identities are shared latent prototypes — layouts of colored shapes on a
//! plain canvas — and each domain renders every prototype under its own
//! photometric style: a global illumination gain, a contrast factor,
//! per-channel color gains, a smooth additive background texture, and pixel
//! noise. The style family is exactly the per-channel affine group that
//! instance normalization removes, so the domain-generalization mechanism is
//! directly observable at desk scale.

use crate::error::{HarnessError, Result};
use crate::rng::{normal, substream, Seeded};
use ams_core::tensor::Tensor4;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

/// Photometric style of one domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainStyle {
    pub illumination: f64,
    pub contrast: f64,
    pub color_gains: [f64; 3],
    pub texture_seed: u64,
    pub texture_amplitude: f64,
}

/// One synthetic source (or target) domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDomainSpec {
    pub domain_id: usize,
    pub style: DomainStyle,
    pub noise_std: f64,
}

/// Rendered images of one domain plus their identity labels.
#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub domain_id: usize,
    /// `(N, 3, H, W)` image tensor.
    pub images: Tensor4<f64>,
    /// Local identity labels in `[0, ids_per_domain)`.
    pub ids: Vec<usize>,
    pub spec: SyntheticDomainSpec,
}

/// Generation parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub domains: usize,
    pub ids_per_domain: usize,
    pub images_per_id: usize,
    pub height: usize,
    pub width: usize,
    pub noise_std: f64,
    /// Scales how far apart the domain styles sit.
    pub style_strength: f64,
    /// Scales the per-image geometric jitter (shift and illumination wobble)
    /// that differentiates images of the same identity; 0 disables it.
    pub jitter: f64,
    pub seed: u64,
    /// Domain held out for evaluation; defaults to the last one.
    pub holdout: Option<usize>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            domains: 4,
            ids_per_domain: 12,
            images_per_id: 6,
            height: 32,
            width: 16,
            noise_std: 0.02,
            style_strength: 1.0,
            jitter: 1.0,
            seed: 1234,
            holdout: None,
        }
    }
}

impl DataConfig {
    pub fn holdout_domain(&self) -> usize {
        self.holdout.unwrap_or(self.domains - 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.domains < 2 {
            return Err(HarnessError::config(format!(
                "need at least 2 domains, got {}",
                self.domains
            )));
        }
        if self.ids_per_domain < 2 || self.images_per_id < 2 {
            return Err(HarnessError::config(
        "need at least 2 identities per domain and 2 images per identity",
            ));
        }
        if self.holdout_domain() >= self.domains {
            return Err(HarnessError::config(format!(
                "holdout domain {} out of range 0..{}",
                self.holdout_domain(),
                self.domains
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
enum ShapeKind {
    Rect,
    Ellipse,
    Bar,
}

#[derive(Debug, Clone, Copy)]
struct Shape {
    kind: ShapeKind,
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    color: [f64; 3],
}

/// One latent identity: a layout of colored shapes in unit coordinates.
#[derive(Debug, Clone)]
struct Prototype {
    shapes: Vec<Shape>,
}

fn draw_prototype(rng: &mut Seeded) -> Prototype {
    let shapes = (0..5)
        .map(|_| Shape {
            kind: match rng.gen_range(0..3) {
                0 => ShapeKind::Rect,
                1 => ShapeKind::Ellipse,
                _ => ShapeKind::Bar,
            },
            cy: rng.gen_range(0.12..0.88),
            cx: rng.gen_range(0.12..0.88),
            ry: rng.gen_range(0.08..0.26),
            rx: rng.gen_range(0.1..0.32),
            color: [
                rng.gen_range(0.05..0.95),
                rng.gen_range(0.05..0.95),
                rng.gen_range(0.05..0.95),
            ],
        })
        .collect();
    Prototype { shapes }
}

/// Paints a prototype onto a `(3, H, W)` canvas. `jitter` scales per-shape
/// positional and size noise so images of one identity genuinely vary.
fn paint_prototype(
    proto: &Prototype,
    height: usize,
    width: usize,
    jitter: f64,
    rng: &mut Seeded,
) -> Vec<f64> {
    let mut canvas = vec![0.5f64; 3 * height * width];
    for shape in &proto.shapes {
        // The rng is always advanced so stream layout is jitter-independent.
        let dcy = rng.gen_range(-0.05..0.05) * jitter;
        let dcx = rng.gen_range(-0.05..0.05) * jitter;
        let scale = 1.0 + rng.gen_range(-0.12..0.12) * jitter;
        let cy = (shape.cy + dcy) * height as f64;
        let cx = (shape.cx + dcx) * width as f64;
        let ry = (shape.ry * scale * height as f64).max(1.0);
        let rx = (shape.rx * scale * width as f64).max(1.0);
        for h in 0..height {
            for w in 0..width {
                let dy = (h as f64 - cy) / ry;
                let dx = (w as f64 - cx) / rx;
                let inside = match shape.kind {
                    ShapeKind::Rect => dy.abs() <= 1.0 && dx.abs() <= 1.0,
                    ShapeKind::Ellipse => dy * dy + dx * dx <= 1.0,
                    ShapeKind::Bar => dy.abs() <= 0.35 && dx.abs() <= 1.4,
                };
                if inside {
                    for (c, col) in shape.color.iter().enumerate() {
                        canvas[(c * height + h) * width + w] = *col;
                    }
                }
            }
        }
    }
    canvas
}

/// Smooth low-frequency field deterministic in the domain's texture seed;
/// `phase` varies per image so the texture is a within-domain nuisance.
fn texture_value(seed: u64, h: f64, w: f64, phase: f64) -> f64 {
    let mut acc = 0.0;
    let mut s = seed;
    for _ in 0..3 {
        s = s
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        let fh = 0.1 + ((s >> 33) % 1000) as f64 / 1000.0 * 0.5;
        let fw = 0.1 + ((s >> 43) % 1000) as f64 / 1000.0 * 0.9;
        let base = ((s >> 23) % 6283) as f64 / 1000.0;
        acc += (fh * h + fw * w + base + phase).sin();
    }
    acc / 3.0
}

/// The four well-separated style archetypes; extra domains reuse them with
/// jitter. The last archetype sits deliberately far outside the hull of the
/// others so a held-out domain exercises a real style shift.
fn style_archetype(k: usize, strength: f64, rng: &mut Seeded) -> DomainStyle {
    let blend = |base: f64, delta: f64| base + strength * delta;
    let jitter = 0.03 * strength;
    // Source archetypes (0..2) sit close together: little style diversity to
    // learn invariance from. The held-out archetype (3) is far outside.
    let (illumination, contrast, gains, texture) = match k % 4 {
        0 => (
            blend(1.0, 0.06),
            blend(1.0, 0.02),
            [blend(1.0, 0.08), blend(1.0, -0.04), blend(1.0, -0.06)],
            0.04,
        ),
        1 => (
            blend(1.0, -0.04),
            blend(1.0, 0.07),
            [blend(1.0, -0.07), blend(1.0, 0.06), blend(1.0, 0.02)],
            0.04,
        ),
        2 => (
            blend(1.0, 0.02),
            blend(1.0, -0.06),
            [blend(1.0, -0.02), blend(1.0, -0.07), blend(1.0, 0.09)],
            0.04,
        ),
        _ => (
            blend(1.0, -0.55),
            blend(1.0, 0.9),
            [blend(1.0, 1.2), blend(1.0, -0.62), blend(1.0, 0.5)],
            0.15,
        ),
    };
    DomainStyle {
        illumination: illumination + jitter * normal(rng) * 0.3,
        contrast: contrast + jitter * normal(rng) * 0.3,
        color_gains: [
            gains[0] + jitter * normal(rng),
            gains[1] + jitter * normal(rng),
            gains[2] + jitter * normal(rng),
        ],
        texture_seed: rng.gen(),
        texture_amplitude: texture * strength,
    }
}

pub fn build_domain_specs(cfg: &DataConfig) -> Result<Vec<SyntheticDomainSpec>> {
    let mut rng = substream(cfg.seed, "domain-specs");
    let specs: Vec<SyntheticDomainSpec> = (0..cfg.domains)
        .map(|k| SyntheticDomainSpec {
            domain_id: k,
            style: style_archetype(k, cfg.style_strength, &mut rng),
            noise_std: cfg.noise_std,
        })
        .collect();
    for i in 0..specs.len() {
        for j in (i + 1)..specs.len() {
            if specs[i].style == specs[j].style {
                return Err(HarnessError::config(format!(
                    "domains {i} and {j} have identical styles"
                )));
            }
        }
    }
    Ok(specs)
}

fn render(
    proto: &Prototype,
    spec: &SyntheticDomainSpec,
    height: usize,
    width: usize,
    jitter: f64,
    rng: &mut Seeded,
    out: &mut [f64],
) {
    let canvas = paint_prototype(proto, height, width, jitter, rng);
    // Slight per-image illumination wobble and texture phase.
    let wobble = 1.0 + 0.08 * jitter * rng.gen_range(-1.0..1.0);
    let phase = rng.gen_range(0.0..std::f64::consts::TAU) * jitter.min(1.0);
    let style = &spec.style;
    for c in 0..3 {
        for h in 0..height {
            for w in 0..width {
                let p = canvas[(c * height + h) * width + w];
                let contrasted = (p - 0.5) * style.contrast + 0.5;
                let styled = style.illumination * wobble * style.color_gains[c] * contrasted;
                let textured = styled
                    + style.texture_amplitude
                        * texture_value(style.texture_seed, h as f64, w as f64, phase);
                out[(c * height + h) * width + w] = textured + spec.noise_std * normal(rng);
            }
        }
    }
}

/// Renders every prototype under every domain's style. Deterministic given
/// the config seed. Identity labels are local to each domain; callers offset
/// them per domain when pooling.
pub fn generate_domains(cfg: &DataConfig) -> Result<Vec<SyntheticDataset>> {
    cfg.validate()?;
    let specs = build_domain_specs(cfg)?;
    let mut proto_rng = substream(cfg.seed, "prototypes");
    let prototypes: Vec<Prototype> = (0..cfg.ids_per_domain)
        .map(|_| draw_prototype(&mut proto_rng))
        .collect();

    let plane = 3 * cfg.height * cfg.width;
    let n = cfg.ids_per_domain * cfg.images_per_id;
    let mut datasets = Vec::with_capacity(cfg.domains);
    for spec in specs {
        let mut rng = substream(cfg.seed, &format!("render-domain-{}", spec.domain_id));
        let mut data = vec![0.0f64; n * plane];
        let mut ids = Vec::with_capacity(n);
        for (id, proto) in prototypes.iter().enumerate() {
            for img in 0..cfg.images_per_id {
                let idx = id * cfg.images_per_id + img;
                render(
                    proto,
                    &spec,
                    cfg.height,
                    cfg.width,
                    cfg.jitter,
                    &mut rng,
                    &mut data[idx * plane..(idx + 1) * plane],
                );
                ids.push(id);
            }
        }
        let images = Tensor4::from_vec([n, 3, cfg.height, cfg.width], data)?;
        datasets.push(SyntheticDataset {
            domain_id: spec.domain_id,
            images,
            ids,
            spec,
        });
    }
    Ok(datasets)
}

/// Splits generated domains into (training domains, held-out domain).
pub fn leave_one_out(
    datasets: Vec<SyntheticDataset>,
    holdout: usize,
) -> Result<(Vec<SyntheticDataset>, SyntheticDataset)> {
    let mut train = Vec::new();
    let mut held = None;
    for d in datasets {
        if d.domain_id == holdout {
            held = Some(d);
        } else {
            train.push(d);
        }
    }
    let held = held.ok_or_else(|| {
        HarnessError::input(format!("holdout domain {holdout} not present"))
    })?;
    // The split must never leak: no training domain may carry the holdout id.
    assert!(
        train.iter().all(|d| d.domain_id != held.domain_id),
        "leave-one-domain-out split leaked the holdout domain"
    );
    Ok((train, held))
}

// ---------------------------------------------------------------------------
// Export / import (directory of raw tensors plus a manifest)
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct ManifestDomain {
    domain_id: usize,
    spec: SyntheticDomainSpec,
    ids: Vec<usize>,
    dims: [usize; 4],
    file: String,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    domains: Vec<ManifestDomain>,
}

/// Writes each domain as a raw little-endian f64 tensor plus a manifest.
pub fn export_dataset_dir(dir: &Path, datasets: &[SyntheticDataset]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut manifest = Manifest {
        format_version: 1,
        domains: Vec::new(),
    };
    for d in datasets {
        let file = format!("domain_{}.bin", d.domain_id);
        let mut bytes = Vec::with_capacity(d.images.len() * 8);
        for v in d.images.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::File::create(dir.join(&file))?.write_all(&bytes)?;
        manifest.domains.push(ManifestDomain {
            domain_id: d.domain_id,
            spec: d.spec.clone(),
            ids: d.ids.clone(),
            dims: d.images.dims(),
            file,
        });
    }
    let json = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(dir.join("manifest.json"), json)?;
    Ok(())
}

pub fn load_dataset_dir(dir: &Path) -> Result<Vec<SyntheticDataset>> {
    let manifest: Manifest =
        serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
    if manifest.format_version != 1 {
        return Err(HarnessError::input(format!(
            "unsupported dataset format version {}",
            manifest.format_version
        )));
    }
    let mut out = Vec::new();
    for d in manifest.domains {
        let mut bytes = Vec::new();
        std::fs::File::open(dir.join(&d.file))?.read_to_end(&mut bytes)?;
        let expected: usize = d.dims.iter().product::<usize>() * 8;
        if bytes.len() != expected {
            return Err(HarnessError::input(format!(
                "{}: expected {expected} bytes, found {}",
                d.file,
                bytes.len()
            )));
        }
        let data: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        out.push(SyntheticDataset {
            domain_id: d.domain_id,
            images: Tensor4::from_vec(d.dims, data).map_err(HarnessError::Core)?,
            ids: d.ids,
            spec: d.spec,
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Train-time augmentation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub hflip: bool,
    pub crop: bool,
    pub erase: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            hflip: true,
            crop: false,
            erase: false,
        }
    }
}

/// Applies the enabled augmentations in place to one `(3, H, W)` image.
pub fn augment_image(
    plane: &mut [f64],
    height: usize,
    width: usize,
    cfg: &AugmentConfig,
    rng: &mut Seeded,
) {
    if cfg.hflip && rng.gen_bool(0.5) {
        for c in 0..3 {
            for h in 0..height {
                let row = (c * height + h) * width;
                for w in 0..width / 2 {
                    plane.swap(row + w, row + width - 1 - w);
                }
            }
        }
    }
    if cfg.crop {
        // Translate by up to 2 px with clamped borders (pad-and-crop).
        let dy = rng.gen_range(-2i64..=2) as isize;
        let dx = rng.gen_range(-2i64..=2) as isize;
        if dy != 0 || dx != 0 {
            let src = plane.to_vec();
            for c in 0..3 {
                for h in 0..height {
                    for w in 0..width {
                        let sh = (h as isize + dy).clamp(0, height as isize - 1) as usize;
                        let sw = (w as isize + dx).clamp(0, width as isize - 1) as usize;
                        plane[(c * height + h) * width + w] =
                            src[(c * height + sh) * width + sw];
                    }
                }
            }
        }
    }
    if cfg.erase && rng.gen_bool(0.5) {
        let eh = rng.gen_range(height / 8..height / 3 + 1).max(1);
        let ew = rng.gen_range(width / 8..width / 3 + 1).max(1);
        let top = rng.gen_range(0..height - eh + 1);
        let left = rng.gen_range(0..width - ew + 1);
        for c in 0..3 {
            for h in top..top + eh {
                for w in left..left + ew {
                    plane[(c * height + h) * width + w] = 0.5;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> DataConfig {
        DataConfig {
            domains: 3,
            ids_per_domain: 4,
            images_per_id: 3,
            height: 16,
            width: 8,
            noise_std: 0.01,
            style_strength: 1.0,
            jitter: 1.0,
            seed: 42,
            holdout: None,
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = small_cfg();
        let a = generate_domains(&cfg).unwrap();
        let b = generate_domains(&cfg).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.images.data(), y.images.data());
            assert_eq!(x.ids, y.ids);
        }
    }

    #[test]
    fn leave_one_out_split_counts() {
        let cfg = DataConfig {
            domains: 4,
            ..small_cfg()
        };
        let datasets = generate_domains(&cfg).unwrap();
        let (train, held) = leave_one_out(datasets, 3).unwrap();
        assert_eq!(train.len(), 3);
        assert_eq!(held.domain_id, 3);
        assert!(train.iter().all(|d| d.domain_id != 3));
    }

    #[test]
    fn zero_noise_identity_style_reproduces_prototypes() {
        // With no noise, identity styles and no jitter, every rendering of a
        // prototype is the prototype itself: images of one identity are
        // bit-identical within and across domains.
        let cfg = DataConfig {
            noise_std: 0.0,
            style_strength: 0.0,
            jitter: 0.0,
            ..small_cfg()
        };
        let datasets = generate_domains(&cfg).unwrap();
        let plane = 3 * cfg.height * cfg.width;
        fn img(d: &SyntheticDataset, idx: usize, plane: usize) -> &[f64] {
            &d.images.data()[idx * plane..(idx + 1) * plane]
        }
        for id in 0..cfg.ids_per_domain {
            let reference = img(&datasets[0], id * cfg.images_per_id, plane);
            for d in &datasets {
                for k in 0..cfg.images_per_id {
                    assert_eq!(img(d, id * cfg.images_per_id + k, plane), reference);
                }
            }
        }
    }

    #[test]
    fn style_regression_recovers_per_channel_affine() {
        // The same prototype rendered in two domains differs by a per-channel
        // affine map (plus texture and noise): regressing one on the other
        // recovers it with high R^2.
        // Jitter off: the oracle isolates the style model itself.
        let cfg = DataConfig {
            noise_std: 0.01,
            images_per_id: 2,
            jitter: 0.0,
            ..small_cfg()
        };
        let data = generate_domains(&cfg).unwrap();
        let (h, w) = (cfg.height, cfg.width);
        let plane = h * w;
        let img = |d: &SyntheticDataset, idx: usize, c: usize| -> Vec<f64> {
            let base = d.images.index(idx, c, 0, 0);
            d.images.data()[base..base + plane].to_vec()
        };
        // First image of identity 0 in domains 0 and 1.
        for c in 0..3 {
            let x = img(&data[0], 0, c);
            let y = img(&data[1], 0, c);
            // Least squares y ~ a x + b.
            let n = plane as f64;
            let sx: f64 = x.iter().sum();
            let sy: f64 = y.iter().sum();
            let sxx: f64 = x.iter().map(|v| v * v).sum();
            let sxy: f64 = x.iter().zip(&y).map(|(a, b)| a * b).sum();
            let a = (n * sxy - sx * sy) / (n * sxx - sx * sx);
            let b = (sy - a * sx) / n;
            let mean_y = sy / n;
            let ss_tot: f64 = y.iter().map(|v| (v - mean_y).powi(2)).sum();
            let ss_res: f64 = x
                .iter()
                .zip(&y)
                .map(|(xv, yv)| (yv - (a * xv + b)).powi(2))
                .sum();
            let r2 = 1.0 - ss_res / ss_tot;
            assert!(r2 > 0.9, "channel {c}: R^2 = {r2}");
        }
    }

    #[test]
    fn augmentations_transform_in_place() {
        let (h, w) = (16usize, 8usize);
        let base: Vec<f64> = (0..3 * h * w).map(|i| i as f64 * 0.01).collect();

        // hflip mirrors rows; applying it twice restores the image.
        let flip_cfg = AugmentConfig {
            hflip: true,
            crop: false,
            erase: false,
        };
        let mut flipped = base.clone();
        // gen_bool(0.5) with this seed fires on the first draw.
        let mut rng = crate::rng::seeded(1);
        augment_image(&mut flipped, h, w, &flip_cfg, &mut rng);
        if flipped != base {
            for c in 0..3 {
                for row in 0..h {
                    for col in 0..w {
                        assert_eq!(
                            flipped[(c * h + row) * w + col],
                            base[(c * h + row) * w + (w - 1 - col)]
                        );
                    }
                }
            }
        }

        // erase writes a constant rectangle somewhere.
        let erase_cfg = AugmentConfig {
            hflip: false,
            crop: false,
            erase: true,
        };
        let mut any_erased = false;
        for seed in 0..8 {
            let mut img = base.clone();
            augment_image(&mut img, h, w, &erase_cfg, &mut crate::rng::seeded(seed));
            if img.iter().zip(&base).any(|(a, b)| a != b) {
                any_erased = true;
                assert!(img.iter().filter(|v| **v == 0.5).count() >= 3);
            }
        }
        assert!(any_erased);

        // crop translates with clamped borders: values are a permutation of
        // rows/columns of the original, so the value set stays bounded.
        let crop_cfg = AugmentConfig {
            hflip: false,
            crop: true,
            erase: false,
        };
        let mut img = base.clone();
        augment_image(&mut img, h, w, &crop_cfg, &mut crate::rng::seeded(3));
        let max = base.iter().cloned().fold(f64::MIN, f64::max);
        let min = base.iter().cloned().fold(f64::MAX, f64::min);
        assert!(img.iter().all(|v| *v >= min && *v <= max));
    }

    #[test]
    fn export_import_round_trip() {
        let cfg = small_cfg();
        let data = generate_domains(&cfg).unwrap();
        let dir = std::env::temp_dir().join(format!("ams-data-test-{}", std::process::id()));
        export_dataset_dir(&dir, &data).unwrap();
        let back = load_dataset_dir(&dir).unwrap();
        for (a, b) in data.iter().zip(&back) {
            assert_eq!(a.images.data(), b.images.data());
            assert_eq!(a.ids, b.ids);
            assert_eq!(a.spec, b.spec);
        }
        std::fs::remove_dir_all(&dir).ok();
    }
}
