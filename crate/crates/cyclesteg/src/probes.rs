//! Sensitivity, corruption, amplification, and spectral probes.
//!
//! The V metric measures how strongly the photo reconstruction reacts to
//! perturbations of the intermediate map: V = E |G(Fx + z) - G(Fx)| with z a
//! Gaussian field of per-pixel std epsilon and spatial correlation sigma.
//! Epsilon and V are both expressed in [0,1] pixel units; model space is
//! [-1,1], so noise is doubled on the way in and differences halved on the
//! way out.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::tensor::{chw, Tensor};

#[derive(Clone, Copy, Debug)]
pub struct NoiseSpec {
    /// Per-pixel standard deviation in [0,1] units.
    pub epsilon: f64,
    /// Gaussian correlation length in pixels; 0 = white noise.
    pub sigma: f64,
    pub seed: u64,
}

/// Wrapped (circular) 1-D Gaussian kernel taps over a length-n axis.
fn wrapped_gaussian(sigma: f64, n: usize) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as i64;
    let mut k = vec![0.0; n];
    for d in -r..=r {
        let w = (-((d * d) as f64) / (2.0 * sigma * sigma)).exp();
        let idx = ((d % n as i64) + n as i64) as usize % n;
        k[idx] += w;
    }
    k
}

/// Circular convolution along one axis (kernel given as wrapped taps).
fn conv_axis_circular(data: &mut [f64], n_outer: usize, n_axis: usize, stride: usize, k: &[f64]) {
    let mut line = vec![0.0; n_axis];
    for outer in 0..n_outer {
        let base = (outer / stride) * (n_axis * stride) + (outer % stride);
        for (i, l) in line.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (j, &kv) in k.iter().enumerate() {
                if kv != 0.0 {
                    acc += kv * data[base + ((i + j) % n_axis) * stride];
                }
            }
            *l = acc;
        }
        for (i, &l) in line.iter().enumerate() {
            data[base + i * stride] = l;
        }
    }
}

/// Gaussian field: white noise, optional circular Gaussian smoothing, then an
/// exact rescale so the per-pixel standard deviation equals epsilon for every
/// sigma (the smoothing kernel's l2 mass is divided back out).
pub fn sample_noise(spec: &NoiseSpec, shape: &[usize]) -> Tensor {
    if spec.epsilon == 0.0 {
        return Tensor::zeros(shape);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut t = Tensor::from_fn(shape, |_| normal.sample(&mut rng));
    let mut scale = spec.epsilon;
    if spec.sigma > 0.0 {
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let kh = wrapped_gaussian(spec.sigma, h);
        let kw = wrapped_gaussian(spec.sigma, w);
        for ci in 0..c {
            let plane = &mut t.data_mut()[ci * h * w..(ci + 1) * h * w];
            conv_axis_circular(plane, h, w, 1, &kw); // rows
            conv_axis_circular(plane, w, h, w, &kh); // columns
        }
        let l2 = |k: &[f64]| k.iter().map(|v| v * v).sum::<f64>().sqrt();
        scale /= l2(&kh) * l2(&kw);
    }
    t.scale(scale)
}

/// Monte Carlo estimate of V (Eq. 1 analog) with its standard error.
/// `f` and `g` act in model space; photos are [0,1] images. With
/// `visible_channels` set, noise touches only the first that many channels
/// of Fx (the defended threat model: the attacker edits the published
/// visible map, never the hidden channels).
pub fn v_metric_visible(
    g: &dyn Fn(&Tensor) -> Result<Tensor>,
    f: &dyn Fn(&Tensor) -> Result<Tensor>,
    photos01: &[Tensor],
    spec: &NoiseSpec,
    n_noise: usize,
    visible_channels: Option<usize>,
) -> Result<(f64, f64)> {
    if photos01.is_empty() || n_noise < 1 {
        return Err(Error::InvalidConfig(
            "v_metric needs photos and n_noise >= 1".into(),
        ));
    }
    let mut samples = Vec::with_capacity(photos01.len() * n_noise);
    for (pi, photo) in photos01.iter().enumerate() {
        let x = photo.map(|v| 2.0 * v - 1.0);
        let fx = f(&x)?;
        let gfx = g(&fx)?;
        for draw in 0..n_noise {
            let draw_spec = NoiseSpec {
                seed: spec
                    .seed
                    .wrapping_add((pi * n_noise + draw) as u64),
                ..*spec
            };
            let zc = visible_channels.unwrap_or(fx.shape()[0]).min(fx.shape()[0]);
            let z = sample_noise(&draw_spec, &[zc, fx.shape()[1], fx.shape()[2]]);
            let mut noisy = fx.clone();
            // epsilon is in [0,1] units; model space doubles it.
            for (n, zv) in noisy.data_mut().iter_mut().zip(z.data()) {
                *n += 2.0 * zv;
            }
            let gnoisy = g(&noisy)?;
            samples.push(gnoisy.mean_abs_diff(&gfx)? / 2.0);
        }
    }
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n.max(2.0);
    Ok((mean, (var / n).sqrt()))
}

pub fn v_metric_with_stderr(
    g: &dyn Fn(&Tensor) -> Result<Tensor>,
    f: &dyn Fn(&Tensor) -> Result<Tensor>,
    photos01: &[Tensor],
    spec: &NoiseSpec,
    n_noise: usize,
) -> Result<(f64, f64)> {
    v_metric_visible(g, f, photos01, spec, n_noise, None)
}

pub fn v_metric(
    g: &dyn Fn(&Tensor) -> Result<Tensor>,
    f: &dyn Fn(&Tensor) -> Result<Tensor>,
    photos01: &[Tensor],
    spec: &NoiseSpec,
    n_noise: usize,
) -> Result<f64> {
    v_metric_with_stderr(g, f, photos01, spec, n_noise).map(|(v, _)| v)
}

#[derive(Clone, Debug)]
pub struct SensitivityReport {
    pub epsilons: Vec<f64>,
    pub sigmas: Vec<f64>,
    /// v[i][j] for epsilons[i], sigmas[j].
    pub v: Vec<Vec<f64>>,
    pub stderr: Vec<Vec<f64>>,
    pub n_photos: usize,
    pub n_noise: usize,
}

impl SensitivityReport {
    pub fn v_at(&self, eps_idx: usize, sigma_idx: usize) -> f64 {
        self.v[eps_idx][sigma_idx]
    }

    /// CSV rows `epsilon,sigma,V,stderr`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epsilon,sigma,V,stderr\n");
        for (i, &e) in self.epsilons.iter().enumerate() {
            for (j, &s) in self.sigmas.iter().enumerate() {
                out.push_str(&format!("{e},{s},{},{}\n", self.v[i][j], self.stderr[i][j]));
            }
        }
        out
    }

    /// The Fig. 3 reference line V = epsilon, as `epsilon,v_ref` rows.
    pub fn reference_csv(&self) -> String {
        let mut out = String::from("epsilon,v_ref\n");
        for &e in &self.epsilons {
            out.push_str(&format!("{e},{e}\n"));
        }
        out
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("sensitivity.csv"), self.to_csv())?;
        std::fs::write(dir.join("sensitivity_ref.csv"), self.reference_csv())?;
        Ok(())
    }
}

pub fn sensitivity_sweep(
    g: &dyn Fn(&Tensor) -> Result<Tensor>,
    f: &dyn Fn(&Tensor) -> Result<Tensor>,
    photos01: &[Tensor],
    epsilons: &[f64],
    sigmas: &[f64],
    n_noise: usize,
    seed: u64,
) -> Result<SensitivityReport> {
    if epsilons.is_empty() || sigmas.is_empty() {
        return Err(Error::InvalidConfig("empty sensitivity grid".into()));
    }
    let mut v = Vec::new();
    let mut stderr = Vec::new();
    for (i, &e) in epsilons.iter().enumerate() {
        let mut row = Vec::new();
        let mut row_se = Vec::new();
        for (j, &s) in sigmas.iter().enumerate() {
            let spec = NoiseSpec {
                epsilon: e,
                sigma: s,
                seed: seed.wrapping_add(((i * sigmas.len() + j) as u64) << 32),
            };
            let (vv, se) = v_metric_with_stderr(g, f, photos01, &spec, n_noise)?;
            row.push(vv);
            row_se.push(se);
        }
        v.push(row);
        stderr.push(row_se);
    }
    Ok(SensitivityReport {
        epsilons: epsilons.to_vec(),
        sigmas: sigmas.to_vec(),
        v,
        stderr,
        n_photos: photos01.len(),
        n_noise,
    })
}

/// Standard luminance quantization table (Annex K of the JPEG spec).
const QUANT_TABLE: [f64; 64] = [
    16.0, 11.0, 10.0, 16.0, 24.0, 40.0, 51.0, 61.0, //
    12.0, 12.0, 14.0, 19.0, 26.0, 58.0, 60.0, 55.0, //
    14.0, 13.0, 16.0, 24.0, 40.0, 57.0, 69.0, 56.0, //
    14.0, 17.0, 22.0, 29.0, 51.0, 87.0, 80.0, 62.0, //
    18.0, 22.0, 37.0, 56.0, 68.0, 109.0, 103.0, 77.0, //
    24.0, 35.0, 55.0, 64.0, 81.0, 104.0, 113.0, 92.0, //
    49.0, 64.0, 78.0, 87.0, 103.0, 121.0, 120.0, 101.0, //
    72.0, 92.0, 95.0, 98.0, 112.0, 100.0, 103.0, 99.0,
];

/// Scaled quantization steps for a quality setting in 1..=100.
pub fn quant_steps(quality: u32) -> [f64; 64] {
    let q = quality.clamp(1, 100) as f64;
    let s = if q < 50.0 { 5000.0 / q } else { 200.0 - 2.0 * q };
    let mut out = [0.0; 64];
    for (o, &t) in out.iter_mut().zip(QUANT_TABLE.iter()) {
        *o = ((t * s + 50.0) / 100.0).floor().clamp(1.0, 255.0);
    }
    out
}

fn dct8_basis() -> [[f64; 8]; 8] {
    let mut b = [[0.0; 8]; 8];
    for (u, row) in b.iter_mut().enumerate() {
        let a = if u == 0 { (1.0f64 / 8.0).sqrt() } else { (2.0f64 / 8.0).sqrt() };
        for (n, v) in row.iter_mut().enumerate() {
            *v = a * ((std::f64::consts::PI / 8.0) * (n as f64 + 0.5) * u as f64).cos();
        }
    }
    b
}

/// 8x8-block DCT quantization codec (JPEG-style lossy roundtrip, per
/// channel, no chroma subsampling or entropy coding). Input in [0,1].
pub fn block_quantize(img: &Tensor, quality: u32) -> Tensor {
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let steps = quant_steps(quality);
    let basis = dct8_basis();
    let mut out = img.clone();
    let fetch = |ci: usize, y: usize, x: usize| -> f64 {
        img.data()[chw(ci, y.min(h - 1), x.min(w - 1), h, w)] * 255.0 - 128.0
    };
    for ci in 0..c {
        for by in (0..h).step_by(8) {
            for bx in (0..w).step_by(8) {
                let mut block = [[0.0f64; 8]; 8];
                for (y, row) in block.iter_mut().enumerate() {
                    for (x, v) in row.iter_mut().enumerate() {
                        *v = fetch(ci, by + y, bx + x);
                    }
                }
                let mut coeff = [[0.0f64; 8]; 8];
                for u in 0..8 {
                    for v in 0..8 {
                        let mut acc = 0.0;
                        for y in 0..8 {
                            for x in 0..8 {
                                acc += basis[u][y] * basis[v][x] * block[y][x];
                            }
                        }
                        let q = steps[u * 8 + v];
                        coeff[u][v] = (acc / q).round() * q;
                    }
                }
                for y in 0..8 {
                    for x in 0..8 {
                        if by + y >= h || bx + x >= w {
                            continue;
                        }
                        let mut acc = 0.0;
                        for u in 0..8 {
                            for v in 0..8 {
                                acc += basis[u][y] * basis[v][x] * coeff[u][v];
                            }
                        }
                        out.data_mut()[chw(ci, by + y, bx + x, h, w)] =
                            ((acc + 128.0) / 255.0).clamp(0.0, 1.0);
                    }
                }
            }
        }
    }
    out
}

/// Adaptive histogram equalization with bilinear blending between tile
/// mappings. `clip` limits histogram bins to `clip` times the mean count
/// (0 disables clipping). A tile whose histogram is a single spike maps
/// through the identity.
pub fn ahe_amplify(img: &Tensor, tile: usize, clip: f64) -> Result<Tensor> {
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    if tile == 0 || h % tile != 0 || w % tile != 0 {
        return Err(Error::InvalidConfig(format!(
            "tile {tile} must divide image extents {h}x{w}"
        )));
    }
    if clip < 0.0 {
        return Err(Error::InvalidConfig("clip must be >= 0".into()));
    }
    let (ty_n, tx_n) = (h / tile, w / tile);
    let bin_of = |v: f64| ((v.clamp(0.0, 1.0) * 255.0).round() as usize).min(255);
    let mut out = img.clone();
    for ci in 0..c {
        // One 256-entry mapping per tile.
        let mut luts = vec![vec![0.0f64; 256]; ty_n * tx_n];
        for ty in 0..ty_n {
            for tx in 0..tx_n {
                let mut hist = [0.0f64; 256];
                for y in ty * tile..(ty + 1) * tile {
                    for x in tx * tile..(tx + 1) * tile {
                        hist[bin_of(img.data()[chw(ci, y, x, h, w)])] += 1.0;
                    }
                }
                let lut = &mut luts[ty * tx_n + tx];
                let nonzero = hist.iter().filter(|&&v| v > 0.0).count();
                if nonzero <= 1 {
                    for (b, l) in lut.iter_mut().enumerate() {
                        *l = b as f64 / 255.0;
                    }
                    continue;
                }
                let npix = (tile * tile) as f64;
                if clip > 0.0 {
                    let limit = clip * npix / 256.0;
                    let mut excess = 0.0;
                    for hv in hist.iter_mut() {
                        if *hv > limit {
                            excess += *hv - limit;
                            *hv = limit;
                        }
                    }
                    for hv in hist.iter_mut() {
                        *hv += excess / 256.0;
                    }
                }
                let mut cum = 0.0;
                for (b, l) in lut.iter_mut().enumerate() {
                    cum += hist[b];
                    *l = cum / npix;
                }
            }
        }
        for y in 0..h {
            for x in 0..w {
                let b = bin_of(img.data()[chw(ci, y, x, h, w)]);
                let gy = (y as f64 + 0.5) / tile as f64 - 0.5;
                let gx = (x as f64 + 0.5) / tile as f64 - 0.5;
                let y0 = gy.floor().clamp(0.0, (ty_n - 1) as f64) as usize;
                let x0 = gx.floor().clamp(0.0, (tx_n - 1) as f64) as usize;
                let y1 = (y0 + 1).min(ty_n - 1);
                let x1 = (x0 + 1).min(tx_n - 1);
                let wy = (gy - y0 as f64).clamp(0.0, 1.0);
                let wx = (gx - x0 as f64).clamp(0.0, 1.0);
                let v00 = luts[y0 * tx_n + x0][b];
                let v01 = luts[y0 * tx_n + x1][b];
                let v10 = luts[y1 * tx_n + x0][b];
                let v11 = luts[y1 * tx_n + x1][b];
                let v = (1.0 - wy) * ((1.0 - wx) * v00 + wx * v01)
                    + wy * ((1.0 - wx) * v10 + wx * v11);
                out.data_mut()[chw(ci, y, x, h, w)] = v;
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct SpectralReport {
    /// Radially averaged power per integer frequency bin, normalized so the
    /// bin sum equals the spatial-domain energy (Parseval).
    pub power: Vec<f64>,
    /// Energy above half-Nyquist divided by total AC energy.
    pub hf_ratio: f64,
}

impl SpectralReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("radial_bin,power\n");
        for (i, p) in self.power.iter().enumerate() {
            out.push_str(&format!("{i},{p}\n"));
        }
        out
    }
}

/// Radially binned 2-D power spectrum over all channels of a square image.
pub fn spectral_profile(img: &Tensor) -> Result<SpectralReport> {
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    if h != w {
        return Err(Error::ShapeMismatch {
            context: "spectral_profile",
            expected: vec![c, h, h],
            got: img.shape().to_vec(),
        });
    }
    let n = h;
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(n);
    let max_bin = ((2.0f64).sqrt() * (n as f64 / 2.0)).ceil() as usize + 1;
    let mut power = vec![0.0f64; max_bin];
    let mut hf = 0.0;
    let mut total_ac = 0.0;
    for ci in 0..c {
        let mut grid: Vec<Complex<f64>> = img.data()[ci * n * n..(ci + 1) * n * n]
            .iter()
            .map(|&v| Complex::new(v, 0.0))
            .collect();
        for row in grid.chunks_exact_mut(n) {
            fft.process(row);
        }
        let mut col = vec![Complex::new(0.0, 0.0); n];
        for x in 0..n {
            for y in 0..n {
                col[y] = grid[y * n + x];
            }
            fft.process(&mut col);
            for y in 0..n {
                grid[y * n + x] = col[y];
            }
        }
        for ky in 0..n {
            for kx in 0..n {
                let p = grid[ky * n + kx].norm_sqr() / (n * n) as f64;
                let fy = ky.min(n - ky) as f64;
                let fx = kx.min(n - kx) as f64;
                let r = (fx * fx + fy * fy).sqrt();
                power[(r + 0.5) as usize] += p;
                if ky != 0 || kx != 0 {
                    total_ac += p;
                    if r > n as f64 / 4.0 {
                        hf += p;
                    }
                }
            }
        }
    }
    let hf_ratio = if total_ac > 0.0 { hf / total_ac } else { 0.0 };
    Ok(SpectralReport { power, hf_ratio })
}
