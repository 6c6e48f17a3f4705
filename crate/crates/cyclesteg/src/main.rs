//! Experiment harness: dataset generation, training, probes, attacks, and
//! defense comparison, each writing a self-contained run directory
//! `<out>/<command>/<tag>/` with a re-runnable `config.txt` echo.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use cyclesteg::attack::{
    budget_curve_csv, craft, spearman, AttackConfig, AttackOptimizer, AttackTarget,
};
use cyclesteg::checkpoint::Checkpoint;
use cyclesteg::config::{serialize_kv, Reader};
use cyclesteg::defense::{comparison_csv, train_defended, ComparisonRow, DefenseConfig};
use cyclesteg::editprobe::{
    composite_reconstruct, cross_image_transfer, linearity_scan, map_delta, paste_feature,
    EditSpec,
};
use cyclesteg::pngio::{save_image01, tile_grid, tile_row};
use cyclesteg::probes::{
    ahe_amplify, block_quantize, sensitivity_sweep, spectral_profile,
};
use cyclesteg::synthdata::{generate_dataset, load_dataset, LoadedDataset};
use cyclesteg::trainer::{
    evaluate, from_model, take_channels, to_model, train, EvalReport, GanMode, Models,
    TrainConfig,
};
use cyclesteg::Tensor;

#[derive(Parser)]
#[command(
    name = "cyclesteg",
    about = "Desk-scale lab for information hiding in cycle-consistent image translation"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic photo/map dataset
    GenData(Common),
    /// Train the translation pair on a generated dataset
    Train(Common),
    /// Cycle and detail-leak metrics on the probe split
    Eval(Common),
    /// Sensitivity of the reconstruction to noise added to generated maps
    ProbeNoise(Common),
    /// Reconstruction damage from block-quantization of generated maps
    ProbeCorrupt(Common),
    /// Feature-paste map deltas: locality, composition, linearity, transfer
    ProbeEdit(Common),
    /// Adaptive histogram equalization of generated maps
    Amplify(Common),
    /// Radially averaged power spectra of real vs generated maps
    Spectra(Common),
    /// Craft an adversarial map toward a target photo
    Attack(Common),
    /// Required attack budget across training checkpoints
    AttackSweep(Common),
    /// Train with extra generator output channels hidden from the discriminator
    DefendTrain(Common),
    /// Baseline-vs-defended metric comparison
    Compare(Common),
}

#[derive(Args)]
struct Common {
    /// Flat `key = value` config file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Root output directory
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    /// Run directory name under <out>/<command>/
    #[arg(long, default_value = "run")]
    tag: String,
    /// Global seed (overrides the config file)
    #[arg(long)]
    seed: Option<u64>,
    /// Worker thread hint; all commands are deterministic regardless
    #[arg(long)]
    threads: Option<usize>,
    /// Model checkpoint path; repeat for attack-sweep (overrides the config file)
    #[arg(long)]
    checkpoint: Vec<String>,
    /// Dataset directory (overrides the config file)
    #[arg(long)]
    data: Option<PathBuf>,
}

fn main() {
    if let Err(e) = real_main() {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn real_main() -> Result<()> {
    let cli = Cli::parse();
    let (name, common, body): (_, _, fn(&mut Reader, &Path) -> Result<()>) = match &cli.cmd {
        Command::GenData(c) => ("gen-data", c, cmd_gen_data),
        Command::Train(c) => ("train", c, cmd_train),
        Command::Eval(c) => ("eval", c, cmd_eval),
        Command::ProbeNoise(c) => ("probe-noise", c, cmd_probe_noise),
        Command::ProbeCorrupt(c) => ("probe-corrupt", c, cmd_probe_corrupt),
        Command::ProbeEdit(c) => ("probe-edit", c, cmd_probe_edit),
        Command::Amplify(c) => ("amplify", c, cmd_amplify),
        Command::Spectra(c) => ("spectra", c, cmd_spectra),
        Command::Attack(c) => ("attack", c, cmd_attack),
        Command::AttackSweep(c) => ("attack-sweep", c, cmd_attack_sweep),
        Command::DefendTrain(c) => ("defend-train", c, cmd_defend_train),
        Command::Compare(c) => ("compare", c, cmd_compare),
    };
    let mut reader = match &common.config {
        Some(p) => Reader::from_file(p)?,
        None => Reader::empty(),
    };
    if let Some(s) = common.seed {
        reader.set("seed", s);
    }
    if let Some(t) = common.threads {
        reader.set("threads", t);
    }
    if !common.checkpoint.is_empty() {
        reader.set("checkpoints", common.checkpoint.join(","));
    }
    if let Some(d) = &common.data {
        reader.set("data", d.display());
    }
    let run_dir = common.out.join(name).join(&common.tag);
    std::fs::create_dir_all(&run_dir)
        .with_context(|| format!("creating run dir {}", run_dir.display()))?;
    body(&mut reader, &run_dir)?;
    println!("done: {}", run_dir.display());
    Ok(())
}

// ---------------------------------------------------------------- shared

/// Resolve the keys every command shares and write the config echo. Must be
/// called after all command-specific keys have been read.
fn finish(reader: Reader, run_dir: &Path) -> Result<()> {
    let echo = reader.finish()?;
    std::fs::write(run_dir.join("config.txt"), serialize_kv(&echo))?;
    Ok(())
}

fn common_keys(r: &mut Reader) -> Result<u64> {
    let seed = r.get("seed", 0u64)?;
    let threads = r.get("threads", 1usize)?;
    if threads < 1 {
        bail!("threads must be >= 1");
    }
    Ok(seed)
}

fn required(r: &mut Reader, key: &str) -> Result<String> {
    r.get_opt_string(key)
        .with_context(|| format!("missing required key `{key}` (config file or flag)"))
}

fn load_data(r: &mut Reader) -> Result<LoadedDataset> {
    let dir = PathBuf::from(required(r, "data")?);
    load_dataset(&dir).with_context(|| format!("loading dataset {}", dir.display()))
}

/// Photo-to-map / map-to-photo pair: a trained checkpoint, or the literal
/// checkpoint name `identity` for the pass-through stub used by oracles.
enum Translator {
    Identity,
    Model(Box<Models>),
}

impl Translator {
    fn load(spec: &str) -> Result<Translator> {
        if spec == "identity" {
            return Ok(Translator::Identity);
        }
        let ck = Checkpoint::load(Path::new(spec))
            .with_context(|| format!("loading checkpoint {spec}"))?;
        Ok(Translator::Model(Box::new(Models::from_checkpoint(&ck)?)))
    }

    fn from_reader(r: &mut Reader) -> Result<Translator> {
        let spec = required(r, "checkpoints")?;
        if spec.contains(',') {
            bail!("this command takes exactly one checkpoint");
        }
        Translator::load(&spec)
    }

    /// model-space photo -> model-space map (3 + hidden channels)
    fn photo_to_map(&self) -> Box<dyn Fn(&Tensor) -> cyclesteg::Result<Tensor> + '_> {
        match self {
            Translator::Identity => Box::new(|x| Ok(x.clone())),
            Translator::Model(m) => Box::new(move |x| m.gen_f.forward(x)),
        }
    }

    /// model-space map -> model-space photo
    fn map_to_photo(&self) -> Box<dyn Fn(&Tensor) -> cyclesteg::Result<Tensor> + '_> {
        match self {
            Translator::Identity => Box::new(|y| Ok(y.clone())),
            Translator::Model(m) => Box::new(move |y| m.gen_g.forward(y)),
        }
    }

    fn map_to_model(&self, map01: &Tensor) -> Tensor {
        match self {
            Translator::Identity => to_model(map01),
            Translator::Model(m) => m.map_to_model(map01),
        }
    }
}

/// First three channels of a model-space image as a [0,1] RGB tensor, clamped
/// for PNG output.
fn to_rgb01(model: &Tensor) -> Tensor {
    from_model(&take_channels(model, 3)).map(|v| v.clamp(0.0, 1.0))
}

fn write_metric_csv(path: &Path, rows: &[(&str, f64)]) -> Result<()> {
    let mut out = String::from("metric,value\n");
    for (k, v) in rows {
        out.push_str(&format!("{k},{v}\n"));
    }
    std::fs::write(path, out)?;
    Ok(())
}

// ---------------------------------------------------------------- commands

fn cmd_gen_data(r: &mut Reader, run_dir: &Path) -> Result<()> {
    let seed = common_keys(r)?;
    let n_train = r.get("n_train", 400usize)?;
    finish_take(r, run_dir)?;
    let dataset_dir = run_dir.join("dataset");
    let manifest = generate_dataset(n_train, seed, &dataset_dir)?;
    // probe scenes contribute a photo and a map file each
    println!(
        "dataset: {} train pairs + {} probe scenes at {}",
        n_train,
        manifest.count(cyclesteg::synthdata::Split::Probe) / 2,
        dataset_dir.display()
    );
    Ok(())
}

/// finish() but usable before a body that still needs to run; takes the
/// reader by value via mem::replace.
fn finish_take(r: &mut Reader, run_dir: &Path) -> Result<()> {
    let taken = std::mem::replace(r, Reader::empty());
    finish(taken, run_dir)
}

fn train_config_keys(r: &mut Reader) -> Result<TrainConfig> {
    let seed = common_keys(r)?;
    let mut cfg = TrainConfig {
        seed,
        ..TrainConfig::default()
    };
    cfg.epochs = r.get("epochs", cfg.epochs)?;
    cfg.batch_size = r.get("batch_size", cfg.batch_size)?;
    cfg.lr = r.get("lr", cfg.lr)?;
    cfg.lambda_cyc = r.get("lambda_cyc", cfg.lambda_cyc)?;
    cfg.gan_mode = GanMode::parse(&r.get("gan_mode", cfg.gan_mode.as_str().to_string())?)?;
    cfg.checkpoint_every = r.get("checkpoint_every", cfg.checkpoint_every)?;
    cfg.model.base_width = r.get("base_width", cfg.model.base_width)?;
    cfg.model.n_resblocks = r.get("n_resblocks", cfg.model.n_resblocks)?;
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_train(r: &mut Reader, run_dir: &Path) -> Result<()> {
    let data = load_data(r)?;
    let cfg = train_config_keys(r)?;
    finish_take(r, run_dir)?;
    let outcome = train(&cfg, &data.train_x, &data.train_y, run_dir)?;
    let last = outcome.history.last().context("empty training history")?;
    println!(
        "trained {} epochs; final cycle loss {:.4}; {} checkpoints",
        cfg.epochs,
        last.cycle_loss,
        outcome.checkpoint_paths.len()
    );
    Ok(())
}

fn eval_csv_rows(report: &EvalReport) -> Vec<(&'static str, f64)> {
    vec![
        ("cycle_l1_x", report.cycle_l1_x),
        ("cycle_l1_y", report.cycle_l1_y),
        ("leak_fidelity", report.leak_fidelity),
        ("leak_visibility", report.leak_visibility),
        ("leak_score", report.leak_score),
        ("scenes_hiding", report.scenes_hiding as f64),
        ("n_scenes", report.n_scenes as f64),
    ]
}

fn cmd_eval(r: &mut Reader, run_dir: &Path) -> Result<()> {
    common_keys(r)?;
    let data = load_data(r)?;
    let tr = Translator::from_reader(r)?;
    let n_figure = r.get("n_figure", 6usize)?;
    finish_take(r, run_dir)?;
    let Translator::Model(models) = &tr else {
        bail!("eval needs a trained checkpoint");
    };
    let report = evaluate(models, &data.probe)?;
    write_metric_csv(&run_dir.join("eval.csv"), &eval_csv_rows(&report))?;
    let f = tr.photo_to_map();
    let g = tr.map_to_photo();
    let mut rows = Vec::new();
    for (_, photo, map) in data.probe.iter().take(n_figure) {
        let x = to_model(photo);
        let fx = f(&x)?;
        let gfx = g(&fx)?;
        rows.push(tile_row(
            &[photo, &to_rgb01(&fx), map, &to_rgb01(&gfx)],
            2,
        )?);
    }
    save_image01(&tile_grid(&rows, 2)?, &run_dir.join("eval_grid.png"))?;
    println!(
        "cycle L1 x={:.4} y={:.4}; hiding on {}/{} scenes",
        report.cycle_l1_x, report.cycle_l1_y, report.scenes_hiding, report.n_scenes
    );
    Ok(())
}

fn cmd_probe_noise(r: &mut Reader, run_dir: &Path) -> Result<()> {
    let seed = common_keys(r)?;
    let data = load_data(r)?;
    let tr = Translator::from_reader(r)?;
    let epsilons = r.get_f64_list("epsilon_grid", &[0.0, 0.005, 0.01, 0.05, 0.25])?;
    let sigmas = r.get_f64_list("sigma_grid", &[0.0, 1.0, 2.0, 4.0])?;
    let n_noise = r.get("n_noise", 4usize)?;
    let n_photos = r.get("n_photos", 10usize)?;
    finish_take(r, run_dir)?;
    let photos: Vec<Tensor> = data
        .probe
        .iter()
        .take(n_photos)
        .map(|(_, p, _)| p.clone())
        .collect();
    let f = tr.photo_to_map();
    let g = tr.map_to_photo();
    let report = sensitivity_sweep(&*g, &*f, &photos, &epsilons, &sigmas, n_noise, seed)?;
    report.save(run_dir)?;
    println!(
        "V over {} epsilons x {} sigmas on {} photos -> sensitivity.csv",
        epsilons.len(),
        sigmas.len(),
        photos.len()
    );
    Ok(())
}

fn cmd_probe_corrupt(r: &mut Reader, run_dir: &Path) -> Result<()> {
    common_keys(r)?;
    let data = load_data(r)?;
    let tr = Translator::from_reader(r)?;
    let qualities = r.get_f64_list("quality_grid", &[100.0, 90.0, 75.0, 50.0, 30.0, 10.0])?;
    let n_photos = r.get("n_photos", 10usize)?;
    finish_take(r, run_dir)?;
    let f = tr.photo_to_map();
    let g = tr.map_to_photo();
    let mut csv = String::from("quality,recon_l1\n");
    let mut figure_rows: Vec<Tensor> = Vec::new();
    for &q in &qualities {
        let quality = q as u32;
        let mut total = 0.0;
        let mut count = 0usize;
        for (idx, (_, photo, _)) in data.probe.iter().take(n_photos).enumerate() {
            let x = to_model(photo);
            let fx = f(&x)?;
            let gfx = g(&fx)?;
            let corrupted = corrupt_visible(&fx, quality);
            let recon = g(&corrupted)?;
            total += recon.mean_abs_diff(&gfx)? / 2.0;
            count += 1;
            if idx == 0 {
                figure_rows.push(tile_row(
                    &[photo, &to_rgb01(&fx), &to_rgb01(&corrupted), &to_rgb01(&recon)],
                    2,
                )?);
            }
        }
        csv.push_str(&format!("{quality},{}\n", total / count as f64));
    }
    std::fs::write(run_dir.join("corruption.csv"), csv)?;
    save_image01(&tile_grid(&figure_rows, 2)?, &run_dir.join("corruption_grid.png"))?;
    println!("corruption sweep over {} qualities -> corruption.csv", qualities.len());
    Ok(())
}

/// Block-quantize the visible three channels of a model-space map; hidden
/// channels (the published map never carries them) pass through unchanged.
fn corrupt_visible(map_model: &Tensor, quality: u32) -> Tensor {
    let vis01 = to_rgb01(map_model);
    let q = block_quantize(&vis01, quality);
    let mut out = map_model.clone();
    let n = q.numel();
    for (dst, src) in out.data_mut()[..n].iter_mut().zip(q.data()) {
        *dst = 2.0 * src - 1.0;
    }
    out
}

fn cmd_probe_edit(r: &mut Reader, run_dir: &Path) -> Result<()> {
    common_keys(r)?;
    let data = load_data(r)?;
    let tr = Translator::from_reader(r)?;
    let scene = r.get("scene", 0usize)?;
    let scene2 = r.get("scene2", 1usize)?;
    let spec1 = EditSpec {
        cx: r.get("cx", 33usize)?,
        cy: r.get("cy", 33usize)?,
        radius: r.get("radius", 5usize)?,
    };
    let spec2 = EditSpec {
        cx: r.get("cx2", 12usize)?,
        cy: r.get("cy2", 12usize)?,
        radius: r.get("radius2", 4usize)?,
    };
    let eps_grid = r.get_f64_list("eps_grid", &[0.0, 0.25, 0.5, 0.75, 1.0])?;
    finish_take(r, run_dir)?;
    let photo = &data
        .probe
        .get(scene)
        .with_context(|| format!("probe scene {scene} out of range"))?
        .1;
    let other_photo = &data
        .probe
        .get(scene2)
        .with_context(|| format!("probe scene {scene2} out of range"))?
        .1;
    let (h, w) = (photo.shape()[1], photo.shape()[2]);
    spec1.validate(h, w)?;
    spec2.validate(h, w)?;
    let f = tr.photo_to_map();
    let g = tr.map_to_photo();

    let edited1 = paste_feature(photo, &spec1)?;
    let edited2 = paste_feature(photo, &spec2)?;
    let d1 = map_delta(&*f, photo, &edited1, spec1.bbox())?;
    let d2 = map_delta(&*f, photo, &edited2, spec2.bbox())?;

    // exact single-edit identity: G(Fx + (Fx' - Fx)) = G(Fx')
    let single = composite_reconstruct(&*g, &d1.map_base, &[&d1], &[])?;
    let direct = g(&d1.map_edited)?;
    let identity_exact = single.image == direct;

    let both = composite_reconstruct(&*g, &d1.map_base, &[&d1, &d2], &[])?;
    // cross-talk null: how much editing only site 2 moves site 1, and vice versa
    let only1 = composite_reconstruct(&*g, &d1.map_base, &[&d1], &[])?;
    let only2 = composite_reconstruct(&*g, &d1.map_base, &[&d2], &[])?;
    let null1 = cyclesteg::editprobe::site_score(&only2.image, &g(&d1.map_base)?, &d1.bbox);
    let null2 = cyclesteg::editprobe::site_score(&only1.image, &g(&d1.map_base)?, &d2.bbox);

    let linearity = linearity_scan(&*g, &d1.map_base, &d1.delta, &eps_grid)?;
    let other_map = f(&to_model(other_photo))?;
    let (cross_recon, cross_score) = cross_image_transfer(&*g, &other_map, &d1)?;

    write_metric_csv(
        &run_dir.join("edit.csv"),
        &[
            ("delta1_linf", d1.linf),
            ("delta1_l1", d1.l1),
            ("delta1_nonlocality", d1.nonlocality),
            ("delta2_linf", d2.linf),
            ("delta2_l1", d2.l1),
            ("delta2_nonlocality", d2.nonlocality),
            ("site_score_1", both.site_scores[0]),
            ("site_score_2", both.site_scores[1]),
            ("null_score_1", null1),
            ("null_score_2", null2),
            ("identity_exact", f64::from(identity_exact)),
            ("linearity_deviation", linearity),
            ("cross_transfer_score", cross_score),
        ],
    )?;
    let delta_vis = take_channels(&d1.delta, 3).map(|v| (v * 2.0 + 0.5).clamp(0.0, 1.0));
    let rows = vec![
        tile_row(&[photo, &edited1, &edited2], 2)?,
        tile_row(&[&to_rgb01(&d1.map_base), &delta_vis, &to_rgb01(&both.image)], 2)?,
        tile_row(&[other_photo, &to_rgb01(&other_map), &to_rgb01(&cross_recon)], 2)?,
    ];
    save_image01(&tile_grid(&rows, 2)?, &run_dir.join("edit_grid.png"))?;
    println!(
        "site scores {:.4}/{:.4} (nulls {:.4}/{:.4}); linearity {:.4}; cross {:.4}",
        both.site_scores[0], both.site_scores[1], null1, null2, linearity, cross_score
    );
    Ok(())
}

fn cmd_amplify(r: &mut Reader, run_dir: &Path) -> Result<()> {
    common_keys(r)?;
    let data = load_data(r)?;
    let tr = Translator::from_reader(r)?;
    let tile = r.get("tile", 8usize)?;
    let clip = r.get("clip", 2.0f64)?;
    let n_photos = r.get("n_photos", 6usize)?;
    finish_take(r, run_dir)?;
    let f = tr.photo_to_map();
    let mut csv = String::from("scene,hf_before,hf_after\n");
    let mut rows = Vec::new();
    for (idx, (_, photo, map)) in data.probe.iter().take(n_photos).enumerate() {
        let fx01 = to_rgb01(&f(&to_model(photo))?);
        let amp = ahe_amplify(&fx01, tile, clip)?;
        let before = spectral_profile(&fx01)?.hf_ratio;
        let after = spectral_profile(&amp)?.hf_ratio;
        csv.push_str(&format!("{idx},{before},{after}\n"));
        rows.push(tile_row(&[photo, map, &fx01, &amp], 2)?);
    }
    std::fs::write(run_dir.join("amplify.csv"), csv)?;
    save_image01(&tile_grid(&rows, 2)?, &run_dir.join("amplify_grid.png"))?;
    println!("equalized {} generated maps -> amplify_grid.png", rows.len());
    Ok(())
}

fn cmd_spectra(r: &mut Reader, run_dir: &Path) -> Result<()> {
    common_keys(r)?;
    let data = load_data(r)?;
    let tr = Translator::from_reader(r)?;
    let n_photos = r.get("n_photos", 20usize)?;
    finish_take(r, run_dir)?;
    let f = tr.photo_to_map();
    let mut real_power: Vec<f64> = Vec::new();
    let mut gen_power: Vec<f64> = Vec::new();
    let mut hf_real = 0.0;
    let mut hf_gen = 0.0;
    let mut count = 0usize;
    for (_, photo, map) in data.probe.iter().take(n_photos) {
        let sp_real = spectral_profile(map)?;
        let fx01 = to_rgb01(&f(&to_model(photo))?);
        let sp_gen = spectral_profile(&fx01)?;
        if real_power.is_empty() {
            real_power = vec![0.0; sp_real.power.len()];
            gen_power = vec![0.0; sp_gen.power.len()];
        }
        for (acc, v) in real_power.iter_mut().zip(&sp_real.power) {
            *acc += v;
        }
        for (acc, v) in gen_power.iter_mut().zip(&sp_gen.power) {
            *acc += v;
        }
        hf_real += sp_real.hf_ratio;
        hf_gen += sp_gen.hf_ratio;
        count += 1;
    }
    let n = count as f64;
    let mut csv = String::from("radial_bin,power_real,power_generated\n");
    for (i, (pr, pg)) in real_power.iter().zip(&gen_power).enumerate() {
        csv.push_str(&format!("{i},{},{}\n", pr / n, pg / n));
    }
    std::fs::write(run_dir.join("spectra.csv"), csv)?;
    write_metric_csv(
        &run_dir.join("spectra_summary.csv"),
        &[("hf_ratio_real", hf_real / n), ("hf_ratio_generated", hf_gen / n)],
    )?;
    println!(
        "mean hf ratio: real {:.5}, generated {:.5}",
        hf_real / n,
        hf_gen / n
    );
    Ok(())
}

fn attack_keys(r: &mut Reader, seed: u64) -> Result<AttackConfig> {
    let steps = r.get("steps", 300usize)?;
    let optimizer = match r.get("optimizer", "adam".to_string())?.as_str() {
        "adam" => AttackOptimizer::Adam,
        "backtracking" => AttackOptimizer::Backtracking,
        other => bail!("optimizer must be adam or backtracking, got `{other}`"),
    };
    let lr = r.get("attack_lr", 0.01f64)?;
    let budget = r.get("budget", 0.0f64)?;
    let visible_only = r.get("attack_visible_only", false)?;
    Ok(AttackConfig {
        steps,
        optimizer,
        lr,
        budget: (budget > 0.0).then_some(budget),
        optimize_channels: visible_only.then_some(3),
        seed,
    })
}

fn attack_pair(r: &mut Reader, data: &LoadedDataset, tr: &Translator) -> Result<(Tensor, Tensor)> {
    let source = r.get("source", 0usize)?;
    let target = r.get("target", 1usize)?;
    let y0 = tr.map_to_model(
        &data
            .probe
            .get(source)
            .with_context(|| format!("probe scene {source} out of range"))?
            .2,
    );
    let x_star = to_model(
        &data
            .probe
            .get(target)
            .with_context(|| format!("probe scene {target} out of range"))?
            .1,
    );
    Ok((y0, x_star))
}

fn cmd_attack(r: &mut Reader, run_dir: &Path) -> Result<()> {
    let seed = common_keys(r)?;
    let data = load_data(r)?;
    let tr = Translator::from_reader(r)?;
    let cfg = attack_keys(r, seed)?;
    let (y0, x_star) = attack_pair(r, &data, &tr)?;
    finish_take(r, run_dir)?;
    let Translator::Model(models) = &tr else {
        bail!("attack needs a trained checkpoint");
    };
    let result = craft(&models.gen_g, &y0, &x_star, &cfg)?;
    let mut curve = String::from("step,loss\n");
    for (i, l) in result.loss_curve.iter().enumerate() {
        curve.push_str(&format!("{i},{l}\n"));
    }
    std::fs::write(run_dir.join("attack_curve.csv"), curve)?;
    write_metric_csv(
        &run_dir.join("attack_summary.csv"),
        &[
            ("baseline_loss", result.baseline_loss),
            ("final_loss", result.final_loss),
            ("perturbation_linf", result.perturbation_linf),
            ("perturbation_l1", result.perturbation_l1),
        ],
    )?;
    let recon = models.gen_g.forward(&result.y_star)?;
    let row = tile_row(
        &[
            &to_rgb01(&y0),
            &to_rgb01(&result.y_star),
            &to_rgb01(&recon),
            &to_rgb01(&x_star),
        ],
        2,
    )?;
    save_image01(&row, &run_dir.join("attack_grid.png"))?;
    println!(
        "attack loss {:.4} -> {:.4}; perturbation Linf {:.4}",
        result.baseline_loss, result.final_loss, result.perturbation_linf
    );
    Ok(())
}

fn cmd_attack_sweep(r: &mut Reader, run_dir: &Path) -> Result<()> {
    let seed = common_keys(r)?;
    let data = load_data(r)?;
    let spec = required(r, "checkpoints")?;
    let paths: Vec<&str> = spec.split(',').collect();
    if paths.len() < 2 {
        bail!("attack-sweep needs at least two --checkpoint paths");
    }
    let mut cfg = attack_keys(r, seed)?;
    cfg.budget = None; // the sweep bisects its own budgets
    let target_quality = r.get("target_quality", 0.1f64)?;
    let bisect_iters = r.get("bisect_iters", 8usize)?;
    let mut loaded: Vec<(usize, Models)> = Vec::new();
    for p in &paths {
        let ck = Checkpoint::load(Path::new(p)).with_context(|| format!("loading {p}"))?;
        loaded.push((Models::epoch_of(&ck)?, Models::from_checkpoint(&ck)?));
    }
    let tr = Translator::Model(Box::new(loaded[0].1.clone()));
    let (y0, x_star) = attack_pair(r, &data, &tr)?;
    finish_take(r, run_dir)?;
    let targets: Vec<(usize, &dyn AttackTarget)> = loaded
        .iter()
        .map(|(e, m)| (*e, &m.gen_g as &dyn AttackTarget))
        .collect();
    let points = cyclesteg::attack::track_over_checkpoints(
        &targets,
        &y0,
        &x_star,
        &cfg,
        target_quality,
        bisect_iters,
    )?;
    std::fs::write(run_dir.join("budget_curve.csv"), budget_curve_csv(&points))?;
    let attained: Vec<(f64, f64)> = points
        .iter()
        .filter_map(|p| p.required_budget.map(|b| (p.epoch as f64, b)))
        .collect();
    let rho = if attained.len() >= 2 {
        let (e, b): (Vec<f64>, Vec<f64>) = attained.iter().cloned().unzip();
        spearman(&e, &b)
    } else {
        f64::NAN
    };
    write_metric_csv(
        &run_dir.join("sweep_summary.csv"),
        &[
            ("spearman_epoch_vs_budget", rho),
            ("n_checkpoints", points.len() as f64),
            ("n_unattained", (points.len() - attained.len()) as f64),
        ],
    )?;
    println!(
        "budget curve over {} checkpoints; Spearman(epoch, budget) = {rho:.3}",
        points.len()
    );
    Ok(())
}

fn cmd_defend_train(r: &mut Reader, run_dir: &Path) -> Result<()> {
    let data = load_data(r)?;
    let base = train_config_keys(r)?;
    let cfg = DefenseConfig {
        extra_channels: r.get("extra_channels", 1usize)?,
        cycle_covers_hidden: r.get("cycle_covers_hidden", false)?,
        base,
    };
    finish_take(r, run_dir)?;
    let outcome = train_defended(&cfg, &data.train_x, &data.train_y, run_dir)?;
    let last = outcome.history.last().context("empty training history")?;
    println!(
        "defended training ({} hidden channels) done; final cycle loss {:.4}",
        cfg.extra_channels, last.cycle_loss
    );
    Ok(())
}

fn cmd_compare(r: &mut Reader, run_dir: &Path) -> Result<()> {
    let seed = common_keys(r)?;
    let data = load_data(r)?;
    let spec = required(r, "checkpoints")?;
    let paths: Vec<&str> = spec.split(',').collect();
    if paths.len() != 2 {
        bail!("compare takes exactly two checkpoints: baseline,defended");
    }
    let eps_small = r.get("eps_small", 0.01f64)?;
    let eps_large = r.get("eps_large", 0.25f64)?;
    let sigma = r.get("sigma", 2.0f64)?;
    let n_noise = r.get("n_noise", 2usize)?;
    let n_photos = r.get("n_photos", 6usize)?;
    finish_take(r, run_dir)?;
    let baseline = Translator::load(paths[0])?;
    let defended = Translator::load(paths[1])?;
    let photos: Vec<Tensor> = data
        .probe
        .iter()
        .take(n_photos)
        .map(|(_, p, _)| p.clone())
        .collect();
    let base_m = compare_metrics(&baseline, &data, &photos, eps_small, eps_large, sigma, n_noise, seed)?;
    let def_m = compare_metrics(&defended, &data, &photos, eps_small, eps_large, sigma, n_noise, seed)?;
    let rows: Vec<ComparisonRow> = base_m
        .iter()
        .zip(&def_m)
        .map(|((name, b), (_, d))| ComparisonRow {
            metric: name.to_string(),
            baseline: *b,
            defended: *d,
        })
        .collect();
    std::fs::write(run_dir.join("comparison.csv"), comparison_csv(&rows))?;
    println!("comparison over {} metrics -> comparison.csv", rows.len());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn compare_metrics(
    tr: &Translator,
    data: &LoadedDataset,
    photos: &[Tensor],
    eps_small: f64,
    eps_large: f64,
    sigma: f64,
    n_noise: usize,
    seed: u64,
) -> Result<Vec<(&'static str, f64)>> {
    let Translator::Model(models) = tr else {
        bail!("compare needs trained checkpoints");
    };
    let f = tr.photo_to_map();
    let g = tr.map_to_photo();
    // the attacker perturbs only the published visible channels
    let v = |eps: f64, sig: f64, s: u64| {
        cyclesteg::probes::v_metric_visible(
            &*g,
            &*f,
            photos,
            &cyclesteg::probes::NoiseSpec {
                epsilon: eps,
                sigma: sig,
                seed: s,
            },
            n_noise,
            Some(3),
        )
        .map(|(v, _)| v)
    };
    let report = evaluate(models, &data.probe)?;
    let mut hf = 0.0;
    for p in photos {
        hf += spectral_profile(&to_rgb01(&f(&to_model(p))?))?.hf_ratio;
    }
    let hidden = cyclesteg::defense::hidden_energy(&models.gen_f, photos)?;
    Ok(vec![
        ("v_eps_small_sigma0", v(eps_small, 0.0, seed)?),
        ("v_eps_small_sigma", v(eps_small, sigma, seed.wrapping_add(1))?),
        ("v_eps_large_sigma0", v(eps_large, 0.0, seed.wrapping_add(2))?),
        ("cycle_l1_x", report.cycle_l1_x),
        ("cycle_l1_y", report.cycle_l1_y),
        ("leak_fidelity", report.leak_fidelity),
        ("leak_visibility", report.leak_visibility),
        ("scenes_hiding", report.scenes_hiding as f64),
        ("hf_ratio_generated", hf / photos.len() as f64),
        ("hidden_energy", hidden),
    ])
}
