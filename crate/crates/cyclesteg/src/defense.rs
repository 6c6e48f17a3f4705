//! Overt-channel defense: give the photo-to-map generator extra output
//! channels that the map discriminator never sees, so residual photo detail
//! has a sanctioned place to live instead of being folded into the visible
//! map as a hidden signal.
//!
//! The defended pipeline is the ordinary training loop with
//! `hidden_channels > 0`; with zero extra channels it is bit-identical to the
//! baseline because it runs the same code path.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::trainer::{train, TrainConfig, TrainOutcome};

#[derive(Clone, Debug)]
pub struct DefenseConfig {
    /// Extra map channels invisible to the discriminator.
    pub extra_channels: usize,
    /// Whether the map-to-photo cycle reconstructs the hidden channels too.
    pub cycle_covers_hidden: bool,
    pub base: TrainConfig,
}

impl DefenseConfig {
    pub fn to_train_config(&self) -> TrainConfig {
        let mut cfg = self.base.clone();
        cfg.model.hidden_channels = self.extra_channels;
        cfg.cycle_covers_hidden = self.cycle_covers_hidden;
        cfg
    }
}

/// Train with the extra-channel defense. `extra_channels = 0` degenerates to
/// the baseline trainer exactly.
pub fn train_defended(
    cfg: &DefenseConfig,
    train_x: &[Tensor],
    train_y: &[Tensor],
    out_dir: &Path,
) -> Result<TrainOutcome> {
    if cfg.extra_channels > 16 {
        return Err(Error::InvalidConfig(
            "extra_channels > 16 is outside the desk-scale regime".into(),
        ));
    }
    train(&cfg.to_train_config(), train_x, train_y, out_dir)
}

/// Mean absolute activation of the hidden map channels over a set of photos,
/// [0,1] units. Zero when there are no hidden channels.
pub fn hidden_energy(gen_f: &crate::nets::Generator, photos01: &[Tensor]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for p in photos01 {
        let out = gen_f.forward(&crate::trainer::to_model(p))?;
        let c = out.shape()[0];
        if c <= 3 {
            return Ok(0.0);
        }
        let plane = out.shape()[1] * out.shape()[2];
        let hidden = &out.data()[3 * plane..c * plane];
        total += hidden.iter().map(|v| v.abs()).sum::<f64>() / 2.0;
        count += hidden.len();
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

/// One named measurement from a baseline/defended pair.
#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonRow {
    pub metric: String,
    pub baseline: f64,
    pub defended: f64,
}

impl ComparisonRow {
    /// defended / baseline; infinity when only the baseline is zero.
    pub fn ratio(&self) -> f64 {
        if self.baseline == 0.0 {
            if self.defended == 0.0 {
                1.0
            } else {
                f64::INFINITY
            }
        } else {
            self.defended / self.baseline
        }
    }
}

pub fn comparison_csv(rows: &[ComparisonRow]) -> String {
    let mut out = String::from("metric,baseline,defended,ratio\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.metric,
            r.baseline,
            r.defended,
            r.ratio()
        ));
    }
    out
}

pub fn save_comparison(rows: &[ComparisonRow], path: &Path) -> Result<()> {
    std::fs::write(path, comparison_csv(rows))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;
    use crate::trainer::{to_model, ModelConfig, Models};

    fn models_with_hidden(k: usize) -> Models {
        Models::build(
            ModelConfig {
                hidden_channels: k,
                ..ModelConfig::default()
            },
            42,
        )
        .unwrap()
    }

    #[test]
    fn hidden_channels_shape_plumbing() {
        let m = models_with_hidden(1);
        let x = Tensor::from_fn(&[3, 48, 48], |i| (i % 11) as f64 / 5.0 - 1.0);
        let fy = m.gen_f.forward(&x).unwrap();
        assert_eq!(fy.shape(), &[4, 48, 48]);
        let back = m.gen_g.forward(&fy).unwrap();
        assert_eq!(back.shape(), &[3, 48, 48]);
    }

    #[test]
    fn discriminator_gradient_through_hidden_channels_is_zero() {
        // The map discriminator only ever sees the first three channels; its
        // adversarial loss must have exactly zero gradient into the rest.
        let m = models_with_hidden(2);
        let x = Tensor::from_fn(&[3, 48, 48], |i| ((i * 13) % 17) as f64 / 8.0 - 1.0);
        let mut tape = Tape::new();
        let pvf = m.gen_f.params.register(&mut tape, false);
        let pdy = m.disc_y.params.register(&mut tape, false);
        let xv = tape.leaf(x, false);
        let fake_y = m.gen_f.forward_on(&mut tape, &pvf, xv).unwrap();
        // make fake_y a differentiable leaf so we can read its gradient
        let fake_leaf = tape.leaf(tape.value(fake_y).clone(), true);
        let vis = tape.slice_channels(fake_leaf, 0, 3).unwrap();
        let d = m.disc_y.forward_on(&mut tape, &pdy, vis).unwrap();
        let shape = tape.value(d).shape().to_vec();
        let ones = tape.leaf(Tensor::full(&shape, 1.0), false);
        let loss = tape.mse_loss(d, ones).unwrap();
        let grads = tape.backward(loss).unwrap();
        let g = grads.get(fake_leaf).unwrap();
        assert_eq!(g.shape(), &[5, 48, 48]);
        let plane = 48 * 48;
        let hidden = &g.data()[3 * plane..];
        assert!(hidden.iter().all(|&v| v == 0.0));
        let visible = &g.data()[..3 * plane];
        assert!(visible.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn zero_extra_channels_matches_baseline_exactly() {
        use crate::synthdata::{render_map, render_photo, sample_scene, SceneGenParams};
        let pairs: Vec<_> = (900..902)
            .map(|s| {
                let sc = sample_scene(s, &SceneGenParams::default());
                (render_photo(&sc), render_map(&sc))
            })
            .collect();
        let xs: Vec<_> = pairs.iter().map(|(p, _)| p.clone()).collect();
        let ys: Vec<_> = pairs.iter().map(|(_, m)| m.clone()).collect();
        let base_cfg = TrainConfig {
            epochs: 2,
            batch_size: 2,
            seed: 3,
            checkpoint_every: 1000,
            ..TrainConfig::default()
        };
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let baseline = train(&base_cfg, &xs, &ys, d1.path()).unwrap();
        let defended = train_defended(
            &DefenseConfig {
                extra_channels: 0,
                cycle_covers_hidden: false,
                base: base_cfg,
            },
            &xs,
            &ys,
            d2.path(),
        )
        .unwrap();
        assert_eq!(baseline.history, defended.history);
        let x = to_model(&xs[0]);
        assert_eq!(
            baseline.models.gen_f.forward(&x).unwrap(),
            defended.models.gen_f.forward(&x).unwrap()
        );
    }

    #[test]
    fn hidden_energy_zero_without_hidden_channels() {
        let m = models_with_hidden(0);
        let photos = vec![Tensor::from_fn(&[3, 48, 48], |i| (i % 7) as f64 / 7.0)];
        assert_eq!(hidden_energy(&m.gen_f, &photos).unwrap(), 0.0);
        let m = models_with_hidden(1);
        let e = hidden_energy(&m.gen_f, &photos).unwrap();
        assert!(e.is_finite() && e >= 0.0);
    }

    #[test]
    fn comparison_rows_and_ratios() {
        let rows = vec![
            ComparisonRow {
                metric: "v_eps_0.01".into(),
                baseline: 0.4,
                defended: 0.1,
            },
            ComparisonRow {
                metric: "cycle_l1_x".into(),
                baseline: 0.0,
                defended: 0.0,
            },
        ];
        assert_eq!(rows[0].ratio(), 0.25);
        assert_eq!(rows[1].ratio(), 1.0);
        let csv = comparison_csv(&rows);
        assert!(csv.starts_with("metric,baseline,defended,ratio\n"));
        assert!(csv.contains("v_eps_0.01,0.4,0.1,0.25"));
    }
}
