//! Synthetic haze: the atmospheric scattering model applied to clean images
//! with smooth random depth, plus dataset generation and manifests.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::image_io::{self, read_image, write_image};
use crate::tensor::Tensor;

pub const DEPTH_MIN: f64 = 0.5;
pub const DEPTH_MAX: f64 = 5.0;
const DEPTH_WAVES: usize = 8;

/// Smooth random depth in `[DEPTH_MIN, DEPTH_MAX]`, row-major `h × w`.
///
/// `smoothness` is a correlation length in pixels: the forward-difference
/// gradient never exceeds [`gradient_bound`]`(smoothness)`, and an infinite
/// length gives a constant field.
pub fn depth_field(h: usize, w: usize, seed: u64, smoothness: f64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let max_freq = if smoothness.is_finite() { 2.0 / smoothness } else { 0.0 };
    let waves: Vec<[f64; 4]> = (0..DEPTH_WAVES)
        .map(|_| {
            let theta = rng.gen_range(0.0..std::f64::consts::TAU);
            let freq = rng.gen_range(0.0..=1.0) * max_freq;
            let amp = rng.gen_range(0.2..=1.0);
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            [freq * theta.cos(), freq * theta.sin(), amp, phase]
        })
        .collect();
    let total: f64 = waves.iter().map(|w| w[2]).sum();
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let s: f64 = waves
                .iter()
                .map(|&[fx, fy, a, p]| a * (fx * x as f64 + fy * y as f64 + p).cos())
                .sum();
            let u = 0.5 * (1.0 + s / total);
            out.push(DEPTH_MIN + (DEPTH_MAX - DEPTH_MIN) * u);
        }
    }
    out
}

/// Upper bound on the Euclidean norm of the forward-difference gradient.
pub fn gradient_bound(smoothness: f64) -> f64 {
    (DEPTH_MAX - DEPTH_MIN) / smoothness
}

/// Default correlation length: half the longer side.
pub fn default_smoothness(h: usize, w: usize) -> f64 {
    h.max(w) as f64 / 2.0
}

pub fn transmission(depth: &[f64], beta: f64) -> Vec<f64> {
    depth.iter().map(|d| (-beta * d).exp()).collect()
}

/// `I = J·t + A·(1 − t)` for a `[1, 3, H, W]` clean image and an `H × W` transmission map.
pub fn scatter(clean: &Tensor<f32>, t: &[f64], airlight: [f32; 3]) -> Result<Tensor<f32>> {
    let (n, c, h, w) = clean.dims4()?;
    if n != 1 || c != 3 || t.len() != h * w {
        return Err(Error::shape("scatter", clean.shape(), &[1, 3, t.len()]));
    }
    if let Some(&v) = clean.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::OutOfRange { value: v as f64 });
    }
    let plane = h * w;
    let mut out = clean.clone();
    for (ch, a) in airlight.iter().enumerate() {
        let a = *a as f64;
        for (o, &ti) in out.data_mut()[ch * plane..(ch + 1) * plane].iter_mut().zip(t) {
            *o = (*o as f64 * ti + a * (1.0 - ti)) as f32;
        }
    }
    Ok(out)
}

/// How airlight and scattering coefficients are drawn.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HazeSampling {
    pub airlight_range: [f32; 2],
    pub beta_range: [f32; 2],
    /// Draw each channel's airlight separately instead of one grey value.
    pub channel_independent: bool,
}

impl Default for HazeSampling {
    fn default() -> Self {
        HazeSampling {
            airlight_range: [0.7, 1.0],
            beta_range: [0.6, 1.8],
            channel_independent: false,
        }
    }
}

impl HazeSampling {
    pub fn validate(&self) -> Result<()> {
        let [a0, a1] = self.airlight_range;
        let [b0, b1] = self.beta_range;
        if !(0.0 <= a0 && a0 <= a1 && a1 <= 1.0) {
            return Err(Error::Config(format!("airlight range {a0}..{a1} must lie in [0, 1]")));
        }
        if !(0.0 < b0 && b0 <= b1) {
            return Err(Error::Config(format!("beta range {b0}..{b1} must be positive")));
        }
        Ok(())
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> HazeParams {
        let [a0, a1] = self.airlight_range;
        let mut draw = |lo: f32, hi: f32| if lo < hi { rng.gen_range(lo..=hi) } else { lo };
        let grey = draw(a0, a1);
        let airlight = if self.channel_independent {
            [grey, draw(a0, a1), draw(a0, a1)]
        } else {
            [grey; 3]
        };
        let beta = draw(self.beta_range[0], self.beta_range[1]);
        HazeParams {
            airlight,
            beta,
            depth_seed: rng.gen(),
        }
    }
}

/// Everything needed to re-derive one hazy image from its clean source.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HazeParams {
    pub airlight: [f32; 3],
    pub beta: f32,
    pub depth_seed: u64,
}

impl HazeParams {
    pub fn apply(&self, clean: &Tensor<f32>) -> Result<Tensor<f32>> {
        let (_, _, h, w) = clean.dims4()?;
        let depth = depth_field(h, w, self.depth_seed, default_smoothness(h, w));
        scatter(clean, &transmission(&depth, self.beta as f64), self.airlight)
    }
}

/// One manifest line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub clean_path: String,
    pub hazy_path: String,
    #[serde(rename = "A")]
    pub airlight: [f32; 3],
    pub beta: f32,
    pub depth_seed: u64,
}

impl ManifestEntry {
    pub fn params(&self) -> HazeParams {
        HazeParams {
            airlight: self.airlight,
            beta: self.beta,
            depth_seed: self.depth_seed,
        }
    }
}

pub const MANIFEST_NAME: &str = "manifest.jsonl";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthOptions {
    pub per_clean: usize,
    pub seed: u64,
    pub sampling: HazeSampling,
    /// Also write a lossless `.pfm` next to every hazy PNG.
    pub float_sidecar: bool,
}

impl Default for SynthOptions {
    fn default() -> Self {
        SynthOptions {
            per_clean: 2,
            seed: 0,
            sampling: HazeSampling::default(),
            float_sidecar: false,
        }
    }
}

fn is_image(p: &Path) -> bool {
    matches!(
        p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("png" | "ppm")
    )
}

/// Clean image files in `dir`, sorted by name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let rd = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for entry in rd {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        if p.is_file() && is_image(&p) {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

/// Hazes every clean image `per_clean` times and writes `hazy/*.png` plus the
/// manifest under `out_dir`. The manifest is written last, so a failure never
/// leaves a partial one behind.
pub fn make_dataset(clean_dir: &Path, out_dir: &Path, opts: &SynthOptions) -> Result<Vec<ManifestEntry>> {
    opts.sampling.validate()?;
    if opts.per_clean == 0 {
        return Err(Error::Config("per_clean must be at least 1".into()));
    }
    let clean_dir = fs::canonicalize(clean_dir).map_err(|e| Error::io(clean_dir, e))?;
    let sources = list_images(&clean_dir)?;
    if sources.is_empty() {
        return Err(Error::Manifest(format!("no PNG/PPM images in {}", clean_dir.display())));
    }
    let hazy_dir = out_dir.join("hazy");
    fs::create_dir_all(&hazy_dir).map_err(|e| Error::io(&hazy_dir, e))?;

    let jobs = sources.len() * opts.per_clean;
    let results = exec::map_indices(jobs, |job| -> Result<ManifestEntry> {
        let src = &sources[job / opts.per_clean];
        let k = job % opts.per_clean;
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        rng.set_stream(job as u64);
        let params = opts.sampling.sample(&mut rng);
        let clean = read_image(src)?;
        let hazy = params.apply(&clean)?;
        let stem = src.file_stem().and_then(|s| s.to_str()).unwrap_or("img");
        let id = format!("{stem}_{k}");
        let rel = format!("hazy/{id}.png");
        write_image(&out_dir.join(&rel), &hazy)?;
        if opts.float_sidecar {
            write_image(&out_dir.join(format!("hazy/{id}.pfm")), &hazy)?;
        }
        Ok(ManifestEntry {
            id,
            clean_path: src.to_string_lossy().into_owned(),
            hazy_path: rel,
            airlight: params.airlight,
            beta: params.beta,
            depth_seed: params.depth_seed,
        })
    });
    let entries = results.into_iter().collect::<Result<Vec<_>>>()?;
    write_manifest(&out_dir.join(MANIFEST_NAME), &entries)?;
    Ok(entries)
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut buf = Vec::new();
    for e in entries {
        serde_json::to_writer(&mut buf, e).expect("manifest entries serialize");
        buf.push(b'\n');
    }
    let tmp = path.with_extension("jsonl.tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&buf).map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Manifest(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

/// Resolves a manifest path relative to the manifest's directory.
pub fn resolve(manifest: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        manifest.parent().unwrap_or(Path::new(".")).join(p)
    }
}

/// A clean/hazy pair loaded into memory.
#[derive(Clone, Debug)]
pub struct ImagePair {
    pub id: String,
    pub clean: Tensor<f32>,
    pub hazy: Tensor<f32>,
}

pub fn load_pairs(manifest: &Path) -> Result<Vec<ImagePair>> {
    let entries = read_manifest(manifest)?;
    let pairs = exec::map_indices(entries.len(), |i| {
        let e = &entries[i];
        let clean = read_image(&resolve(manifest, &e.clean_path))?;
        let hazy = read_image(&resolve(manifest, &e.hazy_path))?;
        if clean.shape() != hazy.shape() {
            return Err(Error::shape("load_pairs", clean.shape(), hazy.shape()));
        }
        Ok(ImagePair {
            id: e.id.clone(),
            clean,
            hazy,
        })
    });
    pairs.into_iter().collect()
}

/// A clean test scene: a colour gradient, a few flat shapes with hard edges
/// and a faint texture, all in `[0.05, 0.95]`.
pub fn procedural_scene(h: usize, w: usize, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plane = h * w;
    let corner: [[f32; 3]; 2] = [[rng.gen(), rng.gen(), rng.gen()], [rng.gen(), rng.gen(), rng.gen()]];
    let mut data = vec![0.0f32; 3 * plane];
    for y in 0..h {
        for x in 0..w {
            let s = (x + y) as f32 / (h + w) as f32;
            for c in 0..3 {
                data[c * plane + y * w + x] = corner[0][c] * (1.0 - s) + corner[1][c] * s;
            }
        }
    }
    for _ in 0..rng.gen_range(3..7) {
        let color: [f32; 3] = [rng.gen(), rng.gen(), rng.gen()];
        let (cy, cx) = (rng.gen_range(0..h) as f32, rng.gen_range(0..w) as f32);
        let r = rng.gen_range(0.08..0.3) * h.min(w) as f32;
        let disc = rng.gen_bool(0.5);
        for y in 0..h {
            for x in 0..w {
                let (dy, dx) = (y as f32 - cy, x as f32 - cx);
                let inside = if disc { dy * dy + dx * dx <= r * r } else { dy.abs() <= r && dx.abs() <= r };
                if inside {
                    for c in 0..3 {
                        data[c * plane + y * w + x] = color[c];
                    }
                }
            }
        }
    }
    let (fy, fx, amp) = (rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8), 0.05f32);
    for y in 0..h {
        for x in 0..w {
            let tex = amp * ((fy * y as f32).sin() * (fx * x as f32).cos());
            for c in 0..3 {
                let v = &mut data[c * plane + y * w + x];
                *v = (0.05 + 0.9 * *v + tex).clamp(0.05, 0.95);
            }
        }
    }
    image_io::quantized(&Tensor::new(&[1, 3, h, w], data).expect("scene shape"))
}

/// Writes `count` procedural clean scenes as `clean/scene_XXX.png` under `dir`.
pub fn write_procedural_scenes(dir: &Path, count: usize, h: usize, w: usize, seed: u64) -> Result<PathBuf> {
    let clean = dir.join("clean");
    for i in 0..count {
        let img = procedural_scene(h, w, seed.wrapping_mul(1_000_003).wrapping_add(i as u64));
        write_image(&clean.join(format!("scene_{i:03}.png")), &img)?;
    }
    Ok(clean)
}
