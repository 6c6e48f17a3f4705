//! Generators and patch discriminators at desk scale.
//!
//! The two generators F: X->Y and G: Y->X share one architecture:
//! encoder (stride-2 x2, realized as stride-1 conv + 2x2 average pool),
//! residual blocks, transpose-conv decoder, tanh head. Discriminators emit
//! one real/fake logit per patch. All images live in [-1, 1].

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::kernels::PadMode;
use crate::tape::{Tape, VarId};
use crate::tensor::Tensor;

const LRELU_SLOPE: f64 = 0.2;
const IN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug)]
pub struct GeneratorConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub base_width: usize,
    pub n_resblocks: usize,
    pub image_size: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            in_channels: 3,
            out_channels: 3,
            base_width: 16,
            n_resblocks: 2,
            image_size: 48,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0
            || self.out_channels == 0
            || self.base_width == 0
            || self.image_size == 0
        {
            return Err(Error::InvalidConfig(
                "generator extents must be >= 1".into(),
            ));
        }
        if self.image_size % 4 != 0 {
            return Err(Error::InvalidConfig(format!(
                "image_size {} must be divisible by 4 (two stride-2 stages)",
                self.image_size
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct DiscriminatorConfig {
    pub in_channels: usize,
    pub base_width: usize,
    pub n_layers: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig {
            in_channels: 3,
            base_width: 16,
            n_layers: 3,
        }
    }
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers < 1 {
            return Err(Error::InvalidConfig("n_layers must be >= 1".into()));
        }
        if self.in_channels == 0 || self.base_width == 0 {
            return Err(Error::InvalidConfig(
                "discriminator extents must be >= 1".into(),
            ));
        }
        Ok(())
    }

    /// Logit grid extent for a square input: one stride-2 stage per layer.
    pub fn logit_extent(&self, image_size: usize) -> usize {
        image_size >> self.n_layers
    }
}

/// Named parameter tensors in a fixed registration order.
#[derive(Clone)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn push(&mut self, name: &str, t: Tensor) {
        debug_assert!(!self.index.contains_key(name), "duplicate param {name}");
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push((name.to_string(), t));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn idx(&self, name: &str) -> usize {
        *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown param {name}"))
    }

    pub fn get(&self, name: &str) -> &Tensor {
        &self.entries[self.idx(name)].1
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn tensors(&self) -> Vec<Tensor> {
        self.entries.iter().map(|(_, t)| t.clone()).collect()
    }

    pub fn set_tensors(&mut self, tensors: Vec<Tensor>) {
        debug_assert_eq!(tensors.len(), self.entries.len());
        for ((_, slot), t) in self.entries.iter_mut().zip(tensors) {
            *slot = t;
        }
    }

    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn zero_all(&mut self) {
        for (_, t) in &mut self.entries {
            for v in t.data_mut() {
                *v = 0.0;
            }
        }
    }

    /// Register every parameter on a tape, preserving order.
    pub fn register(&self, tape: &mut Tape, trainable: bool) -> Vec<VarId> {
        self.entries
            .iter()
            .map(|(_, t)| tape.leaf(t.clone(), trainable))
            .collect()
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        let i = self.idx(name);
        &mut self.entries[i].1
    }

    pub fn from_named(entries: Vec<(String, Tensor)>) -> Self {
        let mut ps = ParamSet::new();
        for (name, t) in entries {
            ps.push(&name, t);
        }
        ps
    }
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

struct Init {
    rng: ChaCha8Rng,
    normal: Normal<f64>,
}

impl Init {
    fn new(seed: u64) -> Self {
        Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
            normal: Normal::new(0.0, INIT_STD).unwrap(),
        }
    }

    fn weights(&mut self, shape: &[usize]) -> Tensor {
        let mut t = Tensor::from_fn(shape, |_| self.normal.sample(&mut self.rng));
        t.snap_f32();
        t
    }
}

fn push_conv(params: &mut ParamSet, init: Option<&mut Init>, name: &str, shape: &[usize]) {
    let cout = shape[0];
    let w = match init {
        Some(i) => i.weights(shape),
        None => Tensor::zeros(shape),
    };
    params.push(&format!("{name}.weight"), w);
    params.push(&format!("{name}.bias"), Tensor::zeros(&[cout]));
}

fn push_convt(params: &mut ParamSet, init: Option<&mut Init>, name: &str, shape: &[usize]) {
    let cout = shape[1];
    let w = match init {
        Some(i) => i.weights(shape),
        None => Tensor::zeros(shape),
    };
    params.push(&format!("{name}.weight"), w);
    params.push(&format!("{name}.bias"), Tensor::zeros(&[cout]));
}

fn push_norm(params: &mut ParamSet, name: &str, channels: usize) {
    params.push(&format!("{name}.gamma"), Tensor::full(&[channels], 1.0));
    params.push(&format!("{name}.beta"), Tensor::zeros(&[channels]));
}

#[derive(Clone)]
pub struct Generator {
    pub cfg: GeneratorConfig,
    pub params: ParamSet,
}

impl Generator {
    pub fn build(cfg: GeneratorConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut init = Init::new(seed);
        let params = Self::make_params(&cfg, Some(&mut init));
        Ok(Generator { cfg, params })
    }

    /// Test hook: all conv weights, biases, and norm offsets zero.
    pub fn zeroed(cfg: GeneratorConfig) -> Result<Self> {
        cfg.validate()?;
        let mut params = Self::make_params(&cfg, None);
        // norm gains stay 1 so the zero-weight output is tanh(beta) = 0
        for (name, t) in params.entries.clone() {
            if name.ends_with(".gamma") {
                let i = params.idx(&name);
                params.entries[i].1 = Tensor::full(t.shape(), 1.0);
            }
        }
        Ok(Generator { cfg, params })
    }

    fn make_params(cfg: &GeneratorConfig, mut init: Option<&mut Init>) -> ParamSet {
        let w = cfg.base_width;
        let mut p = ParamSet::new();
        push_conv(&mut p, init.as_deref_mut(), "enc0", &[w, cfg.in_channels, 3, 3]);
        push_norm(&mut p, "enc0.norm", w);
        push_conv(&mut p, init.as_deref_mut(), "enc1", &[2 * w, w, 3, 3]);
        push_norm(&mut p, "enc1.norm", 2 * w);
        push_conv(&mut p, init.as_deref_mut(), "enc2", &[4 * w, 2 * w, 3, 3]);
        push_norm(&mut p, "enc2.norm", 4 * w);
        for i in 0..cfg.n_resblocks {
            push_conv(&mut p, init.as_deref_mut(), &format!("res{i}.a"), &[4 * w, 4 * w, 3, 3]);
            push_norm(&mut p, &format!("res{i}.a.norm"), 4 * w);
            push_conv(&mut p, init.as_deref_mut(), &format!("res{i}.b"), &[4 * w, 4 * w, 3, 3]);
            push_norm(&mut p, &format!("res{i}.b.norm"), 4 * w);
        }
        push_convt(&mut p, init.as_deref_mut(), "dec0", &[4 * w, 2 * w, 4, 4]);
        push_norm(&mut p, "dec0.norm", 2 * w);
        push_convt(&mut p, init.as_deref_mut(), "dec1", &[2 * w, w, 4, 4]);
        push_norm(&mut p, "dec1.norm", w);
        push_conv(&mut p, init.as_deref_mut(), "head", &[cfg.out_channels, w, 3, 3]);
        p
    }

    /// Closed-form parameter count for a config.
    pub fn expected_param_count(cfg: &GeneratorConfig) -> usize {
        let w = cfg.base_width;
        let conv = |cout: usize, cin: usize, k: usize| cout * cin * k * k + cout;
        let norm = |c: usize| 2 * c;
        let mut n = 0;
        n += conv(w, cfg.in_channels, 3) + norm(w);
        n += conv(2 * w, w, 3) + norm(2 * w);
        n += conv(4 * w, 2 * w, 3) + norm(4 * w);
        n += cfg.n_resblocks * 2 * (conv(4 * w, 4 * w, 3) + norm(4 * w));
        n += 4 * w * 2 * w * 16 + 2 * w + norm(2 * w); // dec0
        n += 2 * w * w * 16 + w + norm(w); // dec1
        n += conv(cfg.out_channels, w, 3);
        n
    }

    fn conv_in_act(
        &self,
        tape: &mut Tape,
        pv: &[VarId],
        name: &str,
        x: VarId,
        norm: bool,
        act: bool,
    ) -> Result<VarId> {
        let p = &self.params;
        let mut y = tape.conv2d(
            x,
            pv[p.idx(&format!("{name}.weight"))],
            1,
            1,
            PadMode::Reflect,
        )?;
        y = tape.bias_add(y, pv[p.idx(&format!("{name}.bias"))])?;
        if norm {
            y = tape.instance_norm(
                y,
                pv[p.idx(&format!("{name}.norm.gamma"))],
                pv[p.idx(&format!("{name}.norm.beta"))],
                IN_EPS,
            )?;
        }
        if act {
            y = tape.leaky_relu(y, LRELU_SLOPE);
        }
        Ok(y)
    }

    fn deconv_in_act(&self, tape: &mut Tape, pv: &[VarId], name: &str, x: VarId) -> Result<VarId> {
        let p = &self.params;
        let mut y = tape.conv_transpose2d(x, pv[p.idx(&format!("{name}.weight"))], 2, 1)?;
        y = tape.bias_add(y, pv[p.idx(&format!("{name}.bias"))])?;
        y = tape.instance_norm(
            y,
            pv[p.idx(&format!("{name}.norm.gamma"))],
            pv[p.idx(&format!("{name}.norm.beta"))],
            IN_EPS,
        )?;
        Ok(tape.leaky_relu(y, LRELU_SLOPE))
    }

    /// Record the generator forward pass on a tape.
    pub fn forward_on(&self, tape: &mut Tape, pv: &[VarId], x: VarId) -> Result<VarId> {
        let shape = tape.value(x).shape();
        let s = self.cfg.image_size;
        if shape != [self.cfg.in_channels, s, s] {
            return Err(Error::ShapeMismatch {
                context: "generator_forward",
                expected: vec![self.cfg.in_channels, s, s],
                got: shape.to_vec(),
            });
        }
        let mut y = self.conv_in_act(tape, pv, "enc0", x, true, true)?;
        y = self.conv_in_act(tape, pv, "enc1", y, true, true)?;
        y = tape.avg_pool2(y)?;
        y = self.conv_in_act(tape, pv, "enc2", y, true, true)?;
        y = tape.avg_pool2(y)?;
        for i in 0..self.cfg.n_resblocks {
            let skip = y;
            let mut r = self.conv_in_act(tape, pv, &format!("res{i}.a"), y, true, true)?;
            r = self.conv_in_act(tape, pv, &format!("res{i}.b"), r, true, false)?;
            y = tape.add(r, skip)?;
        }
        y = self.deconv_in_act(tape, pv, "dec0", y)?;
        y = self.deconv_in_act(tape, pv, "dec1", y)?;
        y = self.conv_in_act(tape, pv, "head", y, false, false)?;
        Ok(tape.tanh(y))
    }

    /// Pure inference convenience: fresh tape, no gradients.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let pv = self.params.register(&mut tape, false);
        let xv = tape.leaf(x.clone(), false);
        let y = self.forward_on(&mut tape, &pv, xv)?;
        Ok(tape.value(y).clone())
    }
}

#[derive(Clone)]
pub struct Discriminator {
    pub cfg: DiscriminatorConfig,
    pub params: ParamSet,
}

impl Discriminator {
    pub fn build(cfg: DiscriminatorConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut init = Init::new(seed);
        let params = Self::make_params(&cfg, Some(&mut init));
        Ok(Discriminator { cfg, params })
    }

    pub fn zeroed(cfg: DiscriminatorConfig) -> Result<Self> {
        cfg.validate()?;
        let mut params = Self::make_params(&cfg, None);
        for (name, t) in params.entries.clone() {
            if name.ends_with(".gamma") {
                let i = params.idx(&name);
                params.entries[i].1 = Tensor::full(t.shape(), 1.0);
            }
        }
        Ok(Discriminator { cfg, params })
    }

    fn make_params(cfg: &DiscriminatorConfig, mut init: Option<&mut Init>) -> ParamSet {
        let mut p = ParamSet::new();
        let mut cin = cfg.in_channels;
        for i in 0..cfg.n_layers {
            let cout = cfg.base_width * (1 << i.min(3));
            push_conv(&mut p, init.as_deref_mut(), &format!("l{i}"), &[cout, cin, 3, 3]);
            if i > 0 {
                push_norm(&mut p, &format!("l{i}.norm"), cout);
            }
            cin = cout;
        }
        push_conv(&mut p, init.as_deref_mut(), "head", &[1, cin, 3, 3]);
        p
    }

    /// Record the discriminator forward pass; output is a [1,h,w] logit grid.
    pub fn forward_on(&self, tape: &mut Tape, pv: &[VarId], x: VarId) -> Result<VarId> {
        let shape = tape.value(x).shape();
        if shape.len() != 3 || shape[0] != self.cfg.in_channels {
            return Err(Error::ShapeMismatch {
                context: "discriminator_forward",
                expected: vec![self.cfg.in_channels],
                got: shape.to_vec(),
            });
        }
        let p = &self.params;
        // Fixed high-frequency emphasis: x + 2·Laplacian(x). Real maps are
        // piecewise flat, so this amplifies exactly the low-amplitude texture
        // a generator might use to smuggle information, sharpening the
        // realism pressure without any extra parameters.
        let c = self.cfg.in_channels;
        let lap = Tensor::from_fn(&[c, c, 3, 3], |i| {
            let (co, rest) = (i / (c * 9), i % (c * 9));
            let (ci, k) = (rest / 9, rest % 9);
            if co != ci {
                0.0
            } else if k == 4 {
                -4.0
            } else if k % 2 == 1 {
                1.0
            } else {
                0.0
            }
        });
        let lap = tape.leaf(lap, false);
        let hf = tape.conv2d(x, lap, 1, 1, PadMode::Reflect)?;
        let hf = tape.scale(hf, 2.0);
        let mut y = tape.add(x, hf)?;
        for i in 0..self.cfg.n_layers {
            y = tape.conv2d(y, pv[p.idx(&format!("l{i}.weight"))], 1, 1, PadMode::Zero)?;
            y = tape.bias_add(y, pv[p.idx(&format!("l{i}.bias"))])?;
            if i > 0 {
                y = tape.instance_norm(
                    y,
                    pv[p.idx(&format!("l{i}.norm.gamma"))],
                    pv[p.idx(&format!("l{i}.norm.beta"))],
                    IN_EPS,
                )?;
            }
            y = tape.leaky_relu(y, LRELU_SLOPE);
            y = tape.avg_pool2(y)?;
        }
        y = tape.conv2d(y, pv[p.idx("head.weight")], 1, 1, PadMode::Zero)?;
        y = tape.bias_add(y, pv[p.idx("head.bias")])?;
        Ok(y)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let pv = self.params.register(&mut tape, false);
        let xv = tape.leaf(x.clone(), false);
        let y = self.forward_on(&mut tape, &pv, xv)?;
        Ok(tape.value(y).clone())
    }
}
