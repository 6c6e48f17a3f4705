//! CycleGAN training: adversarial terms plus cyclic consistency, with
//! versioned checkpoints across epochs.
//!
//! Images live in [0,1] on disk and in [-1,1] inside the models; all loss
//! values are reported in [-1,1] units. The map domain may carry extra
//! hidden channels (used by the defended variant); the baseline is the
//! `hidden_channels = 0` case of the same loop.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adam::{AdamConfig, AdamState};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::nets::{Discriminator, DiscriminatorConfig, Generator, GeneratorConfig, ParamSet};
use crate::synthdata::{perturb_details, render_photo, sample_scene, SceneGenParams};
use crate::tape::{Tape, VarId};
use crate::tensor::{chw, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GanMode {
    LeastSquares,
    CrossEntropy,
}

impl GanMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            GanMode::LeastSquares => "least-squares",
            GanMode::CrossEntropy => "cross-entropy",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "least-squares" => Ok(GanMode::LeastSquares),
            "cross-entropy" => Ok(GanMode::CrossEntropy),
            other => Err(Error::Config(format!(
                "unknown gan mode '{other}' (expected least-squares or cross-entropy)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ModelConfig {
    pub image_size: usize,
    pub base_width: usize,
    pub n_resblocks: usize,
    /// Extra map channels invisible to the discriminator; 0 = baseline.
    pub hidden_channels: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 48,
            base_width: 16,
            n_resblocks: 2,
            hidden_channels: 0,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lambda_cyc: f64,
    pub gan_mode: GanMode,
    pub checkpoint_every: usize,
    pub seed: u64,
    pub model: ModelConfig,
    /// Whether the FGy cycle term penalizes hidden channels too. Off by
    /// default: the defense needs the hidden channels unconstrained.
    pub cycle_covers_hidden: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 60,
            batch_size: 4,
            lr: 2e-4,
            lambda_cyc: 10.0,
            gan_mode: GanMode::LeastSquares,
            checkpoint_every: 5,
            seed: 0,
            model: ModelConfig::default(),
            cycle_covers_hidden: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::InvalidConfig("epochs must be >= 1".into()));
        }
        if self.lambda_cyc < 0.0 {
            return Err(Error::InvalidConfig("lambda_cyc must be >= 0".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        if self.checkpoint_every < 1 {
            return Err(Error::InvalidConfig("checkpoint_every must be >= 1".into()));
        }
        Ok(())
    }
}

/// Map a [0,1] image into model space [-1,1].
pub fn to_model(img: &Tensor) -> Tensor {
    img.map(|v| 2.0 * v - 1.0)
}

/// Map a model-space image back to [0,1].
pub fn from_model(img: &Tensor) -> Tensor {
    img.map(|v| ((v + 1.0) / 2.0).clamp(0.0, 1.0))
}

/// Append `extra` constant-fill channels to a [C,H,W] tensor.
pub fn pad_channels(img: &Tensor, extra: usize, fill: f64) -> Tensor {
    if extra == 0 {
        return img.clone();
    }
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let mut data = Vec::with_capacity((c + extra) * h * w);
    data.extend_from_slice(img.data());
    data.extend(std::iter::repeat(fill).take(extra * h * w));
    Tensor::new(vec![c + extra, h, w], data).expect("pad_channels shape")
}

/// First `n` channels of a [C,H,W] tensor.
pub fn take_channels(img: &Tensor, n: usize) -> Tensor {
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    assert!(n <= c, "take_channels: {n} > {c}");
    Tensor::new(vec![n, h, w], img.data()[..n * h * w].to_vec()).expect("take_channels shape")
}

/// All four networks of one CycleGAN instance.
/// F: photos -> maps (plus hidden channels), G: maps -> photos.
#[derive(Clone)]
pub struct Models {
    pub cfg: ModelConfig,
    pub gen_f: Generator,
    pub gen_g: Generator,
    pub disc_x: Discriminator,
    pub disc_y: Discriminator,
}

impl Models {
    pub fn build(cfg: ModelConfig, seed: u64) -> Result<Self> {
        let map_channels = 3 + cfg.hidden_channels;
        let gen_cfg = |cin, cout| GeneratorConfig {
            in_channels: cin,
            out_channels: cout,
            base_width: cfg.base_width,
            n_resblocks: cfg.n_resblocks,
            image_size: cfg.image_size,
        };
        // Discriminators get double the generator width: they are a tiny
        // fraction of the compute, and the extra capacity sharpens the
        // realism pressure that drives the detail code below visibility.
        let disc_cfg = DiscriminatorConfig {
            in_channels: 3,
            base_width: cfg.base_width * 2,
            n_layers: 3,
        };
        Ok(Models {
            cfg,
            gen_f: Generator::build(gen_cfg(3, map_channels), seed.wrapping_add(1))?,
            gen_g: Generator::build(gen_cfg(map_channels, 3), seed.wrapping_add(2))?,
            disc_x: Discriminator::build(disc_cfg, seed.wrapping_add(3))?,
            disc_y: Discriminator::build(disc_cfg, seed.wrapping_add(4))?,
        })
    }

    pub fn to_checkpoint(&self, epoch: usize, train_cfg: &TrainConfig, history: &[EpochLoss]) -> Checkpoint {
        let mut ck = Checkpoint::new();
        let mut push = |prefix: &str, params: &ParamSet| {
            for (name, t) in params.entries() {
                ck.tensors.push((format!("{prefix}.{name}"), t.clone()));
            }
        };
        push("gen_f", &self.gen_f.params);
        push("gen_g", &self.gen_g.params);
        push("disc_x", &self.disc_x.params);
        push("disc_y", &self.disc_y.params);
        ck.push_meta("epoch", epoch);
        ck.push_meta("image_size", self.cfg.image_size);
        ck.push_meta("base_width", self.cfg.base_width);
        ck.push_meta("n_resblocks", self.cfg.n_resblocks);
        ck.push_meta("hidden_channels", self.cfg.hidden_channels);
        ck.push_meta("epochs", train_cfg.epochs);
        ck.push_meta("batch_size", train_cfg.batch_size);
        ck.push_meta("lr", train_cfg.lr);
        ck.push_meta("lambda_cyc", train_cfg.lambda_cyc);
        ck.push_meta("gan_mode", train_cfg.gan_mode.as_str());
        ck.push_meta("checkpoint_every", train_cfg.checkpoint_every);
        ck.push_meta("seed", train_cfg.seed);
        for l in history {
            ck.push_meta("loss", l.csv_row());
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let meta_usize = |key: &str| -> Result<usize> {
            ck.meta(key)
                .ok_or_else(|| Error::Format(format!("checkpoint missing metadata '{key}'")))?
                .parse()
                .map_err(|_| Error::Format(format!("bad checkpoint metadata '{key}'")))
        };
        let cfg = ModelConfig {
            image_size: meta_usize("image_size")?,
            base_width: meta_usize("base_width")?,
            n_resblocks: meta_usize("n_resblocks")?,
            hidden_channels: meta_usize("hidden_channels")?,
        };
        let mut models = Models::build(cfg, 0)?;
        let fill = |prefix: &str, params: &mut ParamSet| -> Result<()> {
            let named = ck.tensors_with_prefix(&format!("{prefix}."));
            if named.len() != params.len() {
                return Err(Error::Format(format!(
                    "checkpoint has {} tensors for {prefix}, expected {}",
                    named.len(),
                    params.len()
                )));
            }
            for (name, t) in named {
                let slot = params.get_mut(&name);
                if !slot.same_shape(&t) {
                    return Err(Error::Format(format!(
                        "checkpoint tensor {prefix}.{name} has shape {:?}, expected {:?}",
                        t.shape(),
                        slot.shape()
                    )));
                }
                *slot = t;
            }
            Ok(())
        };
        fill("gen_f", &mut models.gen_f.params)?;
        fill("gen_g", &mut models.gen_g.params)?;
        fill("disc_x", &mut models.disc_x.params)?;
        fill("disc_y", &mut models.disc_y.params)?;
        Ok(models)
    }

    pub fn epoch_of(ck: &Checkpoint) -> Result<usize> {
        ck.meta("epoch")
            .ok_or_else(|| Error::Format("checkpoint missing epoch".into()))?
            .parse()
            .map_err(|_| Error::Format("bad checkpoint epoch".into()))
    }

    /// Model-space map for a [0,1] 3-channel map image, hidden channels at 0.
    pub fn map_to_model(&self, map01: &Tensor) -> Tensor {
        pad_channels(&to_model(map01), self.cfg.hidden_channels, 0.0)
    }
}

/// Mean-L1 cyclic consistency in model units: |GFx - x| + |FGy - y|.
/// Generic over the translators so stubs can stand in for trained nets.
pub fn cycle_loss(
    f: &dyn Fn(&Tensor) -> Result<Tensor>,
    g: &dyn Fn(&Tensor) -> Result<Tensor>,
    x: &Tensor,
    y: &Tensor,
) -> Result<f64> {
    let gfx = g(&f(x)?)?;
    let fgy = f(&g(y)?)?;
    Ok(gfx.mean_abs_diff(x)? + fgy.mean_abs_diff(y)?)
}

/// Discriminator and generator adversarial losses over batches of logits.
/// Least-squares mode: d = 0.5 E[(D(real)-1)^2] + 0.5 E[D(fake)^2],
/// g = E[(D(fake)-1)^2].
pub fn gan_losses(
    d: &dyn Fn(&Tensor) -> Result<Tensor>,
    real: &[Tensor],
    fake: &[Tensor],
    mode: GanMode,
) -> Result<(f64, f64)> {
    if real.is_empty() || fake.is_empty() {
        return Err(Error::InvalidConfig("gan_losses needs non-empty batches".into()));
    }
    let mean_of = |batch: &[Tensor], f: &dyn Fn(f64) -> f64| -> Result<f64> {
        let mut acc = 0.0;
        for img in batch {
            let logits = d(img)?;
            acc += logits.data().iter().map(|&z| f(z)).sum::<f64>() / logits.numel() as f64;
        }
        Ok(acc / batch.len() as f64)
    };
    match mode {
        GanMode::LeastSquares => {
            let d_loss = 0.5 * mean_of(real, &|z| (z - 1.0) * (z - 1.0))?
                + 0.5 * mean_of(fake, &|z| z * z)?;
            let g_loss = mean_of(fake, &|z| (z - 1.0) * (z - 1.0))?;
            Ok((d_loss, g_loss))
        }
        GanMode::CrossEntropy => {
            let bce = |z: f64, t: f64| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p();
            let d_loss =
                0.5 * mean_of(real, &|z| bce(z, 1.0))? + 0.5 * mean_of(fake, &|z| bce(z, 0.0))?;
            let g_loss = mean_of(fake, &|z| bce(z, 1.0))?;
            Ok((d_loss, g_loss))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLoss {
    pub epoch: usize,
    pub d_loss_x: f64,
    pub d_loss_y: f64,
    pub g_loss: f64,
    pub cycle_loss: f64,
}

impl EpochLoss {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.epoch, self.d_loss_x, self.d_loss_y, self.g_loss, self.cycle_loss
        )
    }
}

pub fn write_loss_csv(history: &[EpochLoss], path: &Path) -> Result<()> {
    let mut out = String::from("epoch,d_loss_x,d_loss_y,g_loss,cycle_loss\n");
    for l in history {
        out.push_str(&l.csv_row());
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn adv_loss_on(tape: &mut Tape, logits: VarId, target: f64, mode: GanMode) -> Result<VarId> {
    match mode {
        GanMode::LeastSquares => {
            let shape = tape.value(logits).shape().to_vec();
            let t = tape.leaf(Tensor::full(&shape, target), false);
            tape.mse_loss(logits, t)
        }
        GanMode::CrossEntropy => Ok(tape.bce_with_logits(logits, target)),
    }
}

/// Sum per-example gradients into a per-parameter accumulator.
fn add_grads(acc: &mut [Option<Tensor>], delta: &[Option<Tensor>]) {
    for (slot, d) in acc.iter_mut().zip(delta) {
        let Some(g) = d else { continue };
        match slot {
            Some(s) => *s = s.add(g).expect("grad accumulation shape"),
            None => *slot = Some(g.clone()),
        }
    }
}

fn scale_grads(acc: &mut [Option<Tensor>], c: f64) {
    for g in acc.iter_mut().flatten() {
        *g = g.scale(c);
    }
}

/// Per-example discriminator gradients and loss (real/fake already in model
/// space, 3 visible channels).
pub fn discriminator_grads(
    disc: &Discriminator,
    real: &Tensor,
    fake: &Tensor,
    mode: GanMode,
) -> Result<(Vec<Option<Tensor>>, f64)> {
    let mut tape = Tape::new();
    let pv = disc.params.register(&mut tape, true);
    let rv = tape.leaf(real.clone(), false);
    let fv = tape.leaf(fake.clone(), false);
    let lr = disc.forward_on(&mut tape, &pv, rv)?;
    let lf = disc.forward_on(&mut tape, &pv, fv)?;
    let a = adv_loss_on(&mut tape, lr, 1.0, mode)?;
    let b = adv_loss_on(&mut tape, lf, 0.0, mode)?;
    let s = tape.add(a, b)?;
    let loss = tape.scale(s, 0.5);
    let value = tape.value(loss).item();
    let grads = tape.backward(loss)?;
    let out = pv.iter().map(|v| grads.get(*v).cloned()).collect();
    Ok((out, value))
}

/// Per-pair generator gradients: adversarial terms for both generators plus
/// the cyclic consistency terms (included in the graph only when
/// lambda_cyc > 0, so a zero weight removes them from the gradient exactly).
/// When `cycle_covers_hidden` is off, the FGy term compares visible channels
/// only. Returns (gen_f grads, gen_g grads, adversarial loss, cycle loss).
pub fn generator_grads(
    models: &Models,
    x: &Tensor,
    y_pad: &Tensor,
    lambda_cyc: f64,
    mode: GanMode,
    cycle_covers_hidden: bool,
) -> Result<(Vec<Option<Tensor>>, Vec<Option<Tensor>>, f64, f64)> {
    let mut tape = Tape::new();
    let pvf = models.gen_f.params.register(&mut tape, true);
    let pvg = models.gen_g.params.register(&mut tape, true);
    let pdx = models.disc_x.params.register(&mut tape, false);
    let pdy = models.disc_y.params.register(&mut tape, false);
    let xv = tape.leaf(x.clone(), false);
    let yv = tape.leaf(y_pad.clone(), false);

    let fake_y = models.gen_f.forward_on(&mut tape, &pvf, xv)?;
    let fake_y_vis = tape.slice_channels(fake_y, 0, 3)?;
    let dfy = models.disc_y.forward_on(&mut tape, &pdy, fake_y_vis)?;
    let adv_y = adv_loss_on(&mut tape, dfy, 1.0, mode)?;
    let rec_x = models.gen_g.forward_on(&mut tape, &pvg, fake_y)?;
    let cyc_x = tape.l1_loss(rec_x, xv)?;

    let fake_x = models.gen_g.forward_on(&mut tape, &pvg, yv)?;
    let dfx = models.disc_x.forward_on(&mut tape, &pdx, fake_x)?;
    let adv_x = adv_loss_on(&mut tape, dfx, 1.0, mode)?;
    let rec_y = models.gen_f.forward_on(&mut tape, &pvf, fake_x)?;
    let cyc_y = if models.cfg.hidden_channels > 0 && !cycle_covers_hidden {
        let rec_vis = tape.slice_channels(rec_y, 0, 3)?;
        let y_vis = tape.leaf(take_channels(y_pad, 3), false);
        tape.l1_loss(rec_vis, y_vis)?
    } else {
        tape.l1_loss(rec_y, yv)?
    };

    let adv = tape.add(adv_x, adv_y)?;
    let cyc = tape.add(cyc_x, cyc_y)?;
    let adv_value = tape.value(adv).item();
    let cyc_value = tape.value(cyc).item();
    let total = if lambda_cyc > 0.0 {
        let weighted = tape.scale(cyc, lambda_cyc);
        tape.add(adv, weighted)?
    } else {
        adv
    };
    let grads = tape.backward(total)?;
    let gf = pvf.iter().map(|v| grads.get(*v).cloned()).collect();
    let gg = pvg.iter().map(|v| grads.get(*v).cloned()).collect();
    Ok((gf, gg, adv_value, cyc_value))
}

pub struct TrainOutcome {
    pub models: Models,
    pub history: Vec<EpochLoss>,
    pub checkpoint_paths: Vec<PathBuf>,
}

/// Train freshly initialized networks; see `train_with_models`.
pub fn train(cfg: &TrainConfig, train_x: &[Tensor], train_y: &[Tensor], out_dir: &Path) -> Result<TrainOutcome> {
    let models = Models::build(cfg.model, cfg.seed)?;
    train_with_models(cfg, models, train_x, train_y, out_dir)
}

/// Alternating discriminator/generator updates with Adam. Inputs are [0,1]
/// images (maps 3-channel; hidden channels are padded internally). Emits a
/// checkpoint every `checkpoint_every` epochs plus the final epoch, and
/// rewrites the loss CSV after every epoch. Aborts on non-finite loss.
pub fn train_with_models(
    cfg: &TrainConfig,
    mut models: Models,
    train_x: &[Tensor],
    train_y: &[Tensor],
    out_dir: &Path,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_x.is_empty() || train_y.is_empty() {
        return Err(Error::MissingInput("empty training split".into()));
    }
    std::fs::create_dir_all(out_dir)?;
    let xs: Vec<Tensor> = train_x.iter().map(to_model).collect();
    let ys: Vec<Tensor> = train_y
        .iter()
        .map(|y| pad_channels(&to_model(y), cfg.model.hidden_channels, 0.0))
        .collect();
    let n = xs.len().min(ys.len());
    let steps = (n / cfg.batch_size).max(1);

    let mut adam_f = AdamState::new(&models.gen_f.params.tensors());
    let mut adam_g = AdamState::new(&models.gen_g.params.tensors());
    let mut adam_dx = AdamState::new(&models.disc_x.params.tensors());
    let mut adam_dy = AdamState::new(&models.disc_y.params.tensors());
    let adam_cfg = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut history: Vec<EpochLoss> = Vec::new();
    let mut checkpoint_paths = Vec::new();

    for epoch in 1..=cfg.epochs {
        let mut ix: Vec<usize> = (0..xs.len()).collect();
        let mut iy: Vec<usize> = (0..ys.len()).collect();
        ix.shuffle(&mut rng);
        iy.shuffle(&mut rng);
        let mut sums = (0.0, 0.0, 0.0, 0.0); // dx, dy, g, cyc

        for step in 0..steps {
            let lo = step * cfg.batch_size;
            let hi = ((step + 1) * cfg.batch_size).min(n);
            let batch: Vec<(usize, usize)> =
                (lo..hi).map(|i| (ix[i % ix.len()], iy[i % iy.len()])).collect();
            let bsz = batch.len() as f64;

            // Discriminator updates on detached fakes.
            let mut acc_dx = vec![None; models.disc_x.params.len()];
            let mut acc_dy = vec![None; models.disc_y.params.len()];
            let (mut dx_sum, mut dy_sum) = (0.0, 0.0);
            for &(i, j) in &batch {
                let fake_y = take_channels(&models.gen_f.forward(&xs[i])?, 3);
                let fake_x = models.gen_g.forward(&ys[j])?;
                let real_y = take_channels(&ys[j], 3);
                let (g, l) =
                    discriminator_grads(&models.disc_y, &real_y, &fake_y, cfg.gan_mode)?;
                add_grads(&mut acc_dy, &g);
                dy_sum += l;
                let (g, l) = discriminator_grads(&models.disc_x, &xs[i], &fake_x, cfg.gan_mode)?;
                add_grads(&mut acc_dx, &g);
                dx_sum += l;
            }
            if !(dx_sum.is_finite() && dy_sum.is_finite()) {
                return Err(Error::NonFiniteLoss { epoch, step });
            }
            scale_grads(&mut acc_dx, 1.0 / bsz);
            scale_grads(&mut acc_dy, 1.0 / bsz);
            let mut t = models.disc_x.params.tensors();
            adam_dx.step(&mut t, &acc_dx, &adam_cfg)?;
            models.disc_x.params.set_tensors(t);
            let mut t = models.disc_y.params.tensors();
            adam_dy.step(&mut t, &acc_dy, &adam_cfg)?;
            models.disc_y.params.set_tensors(t);

            // Generator update.
            let mut acc_f = vec![None; models.gen_f.params.len()];
            let mut acc_g = vec![None; models.gen_g.params.len()];
            let (mut adv_sum, mut cyc_sum) = (0.0, 0.0);
            for &(i, j) in &batch {
                let (gf, gg, adv, cyc) = generator_grads(
                    &models,
                    &xs[i],
                    &ys[j],
                    cfg.lambda_cyc,
                    cfg.gan_mode,
                    cfg.cycle_covers_hidden,
                )?;
                add_grads(&mut acc_f, &gf);
                add_grads(&mut acc_g, &gg);
                adv_sum += adv;
                cyc_sum += cyc;
            }
            if !(adv_sum.is_finite() && cyc_sum.is_finite()) {
                return Err(Error::NonFiniteLoss { epoch, step });
            }
            scale_grads(&mut acc_f, 1.0 / bsz);
            scale_grads(&mut acc_g, 1.0 / bsz);
            let mut t = models.gen_f.params.tensors();
            adam_f.step(&mut t, &acc_f, &adam_cfg)?;
            models.gen_f.params.set_tensors(t);
            let mut t = models.gen_g.params.tensors();
            adam_g.step(&mut t, &acc_g, &adam_cfg)?;
            models.gen_g.params.set_tensors(t);

            sums.0 += dx_sum / bsz;
            sums.1 += dy_sum / bsz;
            sums.2 += adv_sum / bsz;
            sums.3 += cyc_sum / bsz;
        }

        let loss = EpochLoss {
            epoch,
            d_loss_x: sums.0 / steps as f64,
            d_loss_y: sums.1 / steps as f64,
            g_loss: sums.2 / steps as f64,
            cycle_loss: sums.3 / steps as f64,
        };
        history.push(loss);
        write_loss_csv(&history, &out_dir.join("loss_history.csv"))?;
        if epoch % cfg.checkpoint_every == 0 || epoch == cfg.epochs {
            let path = out_dir.join(format!("ckpt_epoch_{epoch:03}.cstg"));
            models.to_checkpoint(epoch, cfg, &history).save(&path)?;
            checkpoint_paths.push(path);
        }
    }

    Ok(TrainOutcome {
        models,
        history,
        checkpoint_paths,
    })
}

/// Evaluation record over the paired probe split.
#[derive(Clone, Copy, Debug)]
pub struct EvalReport {
    /// mean |GFx - x| over probe photos, model units.
    pub cycle_l1_x: f64,
    /// mean |FGy - y| over probe maps (visible channels), model units.
    pub cycle_l1_y: f64,
    /// How well detail-parameter changes survive into GFx, relative to their
    /// magnitude in x (1 = fully reconstructed).
    pub leak_fidelity: f64,
    /// How visible the same changes are in the intermediate map Fx after
    /// local mean removal, on the same relative scale.
    pub leak_visibility: f64,
    /// leak_fidelity - leak_visibility.
    pub leak_score: f64,
    /// Scenes where fidelity >= 2 * visibility (the hiding signature).
    pub scenes_hiding: usize,
    pub n_scenes: usize,
}

/// Subtract a 5x5 local mean from every pixel (windows clipped at borders).
pub fn remove_local_mean(img: &Tensor) -> Tensor {
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let mut out = img.clone();
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                let mut cnt = 0.0;
                for dy in -2i64..=2 {
                    for dx in -2i64..=2 {
                        let (yy, xx) = (y as i64 + dy, x as i64 + dx);
                        if yy >= 0 && yy < h as i64 && xx >= 0 && xx < w as i64 {
                            acc += img.data()[chw(ci, yy as usize, xx as usize, h, w)];
                            cnt += 1.0;
                        }
                    }
                }
                out.data_mut()[chw(ci, y, x, h, w)] -= acc / cnt;
            }
        }
    }
    out
}

/// Evaluate translators over the probe split. `f` maps model-space photos to
/// model-space maps (visible channels first); `g` maps back. The detail-leak
/// components compare each probe scene against a copy with one shape's
/// detail parameters perturbed; the detail-dependent pixel mask comes from
/// the renderer.
pub fn evaluate_fns(
    f: &dyn Fn(&Tensor) -> Result<Tensor>,
    g: &dyn Fn(&Tensor) -> Result<Tensor>,
    probe: &[(u64, Tensor, Tensor)],
) -> Result<EvalReport> {
    if probe.is_empty() {
        return Err(Error::MissingInput("empty probe split".into()));
    }
    let params = SceneGenParams::default();
    let mut cyc_x = 0.0;
    let mut cyc_y = 0.0;
    let mut fid_sum = 0.0;
    let mut vis_sum = 0.0;
    let mut scenes_hiding = 0;
    for (seed, photo01, map01) in probe {
        let x = to_model(photo01);
        let y = to_model(map01);
        let fx = f(&x)?;
        let gfx = g(&fx)?;
        cyc_x += gfx.mean_abs_diff(&x)?;
        let fgy = f(&g(&y)?)?;
        cyc_y += take_channels(&fgy, 3).mean_abs_diff(&y)?;

        let scene = sample_scene(*seed, &params);
        let idx = (*seed as usize) % scene.shapes.len();
        let alt = perturb_details(&scene, idx);
        let x_alt = to_model(&render_photo(&alt));
        let mask: Vec<bool> = x
            .data()
            .iter()
            .zip(x_alt.data())
            .map(|(a, b)| a != b)
            .collect();
        let masked_mean = |a: &Tensor, b: &Tensor| -> f64 {
            let mut acc = 0.0f64;
            let mut cnt = 0.0f64;
            for ((&va, &vb), &m) in a.data().iter().zip(b.data()).zip(&mask) {
                if m {
                    acc += (va - vb).abs();
                    cnt += 1.0;
                }
            }
            acc / cnt.max(1.0)
        };
        let den = masked_mean(&x, &x_alt).max(1e-12);
        let fx_alt = f(&x_alt)?;
        let gfx_alt = g(&fx_alt)?;
        let fidelity = masked_mean(&gfx, &gfx_alt) / den;
        let hp = remove_local_mean(&take_channels(&fx, 3));
        let hp_alt = remove_local_mean(&take_channels(&fx_alt, 3));
        let visibility = masked_mean(&hp, &hp_alt) / den;
        fid_sum += fidelity;
        vis_sum += visibility;
        if fidelity >= 2.0 * visibility {
            scenes_hiding += 1;
        }
    }
    let n = probe.len() as f64;
    Ok(EvalReport {
        cycle_l1_x: cyc_x / n,
        cycle_l1_y: cyc_y / n,
        leak_fidelity: fid_sum / n,
        leak_visibility: vis_sum / n,
        leak_score: (fid_sum - vis_sum) / n,
        scenes_hiding,
        n_scenes: probe.len(),
    })
}

pub fn evaluate(models: &Models, probe: &[(u64, Tensor, Tensor)]) -> Result<EvalReport> {
    let k = models.cfg.hidden_channels;
    let f = |x: &Tensor| models.gen_f.forward(x);
    let g = |y: &Tensor| {
        let y_full = if y.shape()[0] == 3 {
            pad_channels(y, k, 0.0)
        } else {
            y.clone()
        };
        models.gen_g.forward(&y_full)
    };
    evaluate_fns(&f, &g, probe)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity(x: &Tensor) -> Result<Tensor> {
        Ok(x.clone())
    }

    #[test]
    fn cycle_loss_zero_for_identity_stubs() {
        let x = Tensor::from_fn(&[3, 4, 4], |i| (i as f64 * 0.37).sin());
        let y = Tensor::from_fn(&[3, 4, 4], |i| (i as f64 * 0.11).cos());
        assert_eq!(cycle_loss(&identity, &identity, &x, &y).unwrap(), 0.0);
    }

    #[test]
    fn cycle_loss_zero_stub_against_ones() {
        // G maps everything to the zero image; x is all ones in [-1,1] units,
        // so the first term contributes exactly 1.0.
        let zero_stub = |t: &Tensor| Ok(Tensor::zeros(t.shape()));
        let x = Tensor::full(&[3, 4, 4], 1.0);
        let y = Tensor::zeros(&[3, 4, 4]);
        let v = cycle_loss(&identity, &zero_stub, &x, &y).unwrap();
        assert_eq!(v, 1.0);
    }

    #[test]
    fn cycle_loss_symmetric_in_roles() {
        let double = |t: &Tensor| Ok(t.scale(2.0));
        let half = |t: &Tensor| Ok(t.scale(0.5));
        let x = Tensor::from_fn(&[3, 4, 4], |i| (i as f64 * 0.21).sin());
        let y = Tensor::from_fn(&[3, 4, 4], |i| (i as f64 * 0.13).cos());
        let a = cycle_loss(&double, &half, &x, &y).unwrap();
        let b = cycle_loss(&half, &double, &y, &x).unwrap();
        assert!((a - b).abs() < 1e-15);
    }

    #[test]
    fn gan_losses_examples() {
        let batch = vec![Tensor::zeros(&[1, 2, 2]), Tensor::zeros(&[1, 2, 2])];
        let mode = GanMode::LeastSquares;
        // D = 1 on real, 0 on fake: perfect discriminator.
        let perfect = |t: &Tensor| -> Result<Tensor> {
            Ok(Tensor::full(&[1, 2, 2], if t.data()[0] > 0.5 { 1.0 } else { 0.0 }))
        };
        let real = vec![Tensor::full(&[1, 2, 2], 1.0)];
        let fake = vec![Tensor::full(&[1, 2, 2], 0.0)];
        let (d, _) = gan_losses(&perfect, &real, &fake, mode).unwrap();
        assert_eq!(d, 0.0);
        // D = 0 everywhere.
        let zero = |_: &Tensor| Ok(Tensor::zeros(&[1, 2, 2]));
        let (d, g) = gan_losses(&zero, &batch, &batch, mode).unwrap();
        assert_eq!(d, 0.5);
        assert_eq!(g, 1.0);
        // D = 1/2 everywhere.
        let half = |_: &Tensor| Ok(Tensor::full(&[1, 2, 2], 0.5));
        let (d, _) = gan_losses(&half, &batch, &batch, mode).unwrap();
        assert_eq!(d, 0.25);
    }

    #[test]
    fn pad_and_take_channels_round_trip() {
        let t = Tensor::from_fn(&[3, 2, 2], |i| i as f64);
        let p = pad_channels(&t, 2, 0.5);
        assert_eq!(p.shape(), &[5, 2, 2]);
        assert_eq!(take_channels(&p, 3), t);
        assert!(p.data()[12..].iter().all(|&v| v == 0.5));
        assert_eq!(pad_channels(&t, 0, 0.0), t);
    }

    #[test]
    fn model_unit_round_trip() {
        let t = Tensor::from_fn(&[3, 2, 2], |i| i as f64 / 11.0);
        let back = from_model(&to_model(&t));
        for (a, b) in t.data().iter().zip(back.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn remove_local_mean_kills_constants() {
        let t = Tensor::full(&[1, 6, 6], 0.7);
        let hp = remove_local_mean(&t);
        assert!(hp.data().iter().all(|&v| v.abs() < 1e-15));
    }

    #[test]
    fn gan_mode_parse() {
        assert_eq!(GanMode::parse("least-squares").unwrap(), GanMode::LeastSquares);
        assert_eq!(GanMode::parse("cross-entropy").unwrap(), GanMode::CrossEntropy);
        assert!(GanMode::parse("wasserstein").is_err());
    }
}
