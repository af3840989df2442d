//! Generator and discriminator architectures.
//!
//! The generator is an encoder-decoder convolution network with symmetric
//! skip connections; the discriminator is a patch-grid convolution classifier
//! with sigmoid outputs so the log-likelihood adversarial terms are
//! well-defined. Both are generic over the scalar type.

use ndarray::{Array1, Array2, Array4, ArrayD, IxDyn};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Scalar, Tensor};
use crate::domain::{Image, LossWeights};
use crate::error::{Error, Result};

/// Probability clamp of the discriminator head; keeps `ln D` finite.
pub const PROB_EPS: f64 = 1e-7;
/// Weight init std-dev (DCGAN convention).
const INIT_STD: f64 = 0.02;
/// Extra shrink on the map-head init so training starts from M ~ 0.
const MAP_HEAD_SHRINK: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorRole {
    /// `G^{c+ -> c-}`: full counterfactual image, model11 output.
    PosToNeg,
    /// `G^{c- -> c+}`: backward generator, model11 output.
    NegToPos,
    /// `G^{c+ -> M}`: additive map output in [-2, 2].
    PosToMap,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputSquash {
    /// `tanh`, range [-1, 1] (image-output roles).
    Squash11,
    /// `2 tanh`, range [-2, 2] (map-output role).
    Squash22,
}

impl GeneratorRole {
    pub fn squash(self) -> OutputSquash {
        match self {
            GeneratorRole::PosToNeg | GeneratorRole::NegToPos => OutputSquash::Squash11,
            GeneratorRole::PosToMap => OutputSquash::Squash22,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub input_size: usize,
    pub base_channels: usize,
    /// Number of stride-2 down/upsampling stages.
    pub depth: usize,
    pub skip_connections: bool,
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.depth == 0 {
            return Err(Error::Config("generator needs depth >= 1 and channels >= 1".into()));
        }
        let div = 1usize << self.depth;
        if self.input_size == 0 || self.input_size % div != 0 {
            return Err(Error::Config(format!(
                "input_size {} must be divisible by 2^depth = {div}",
                self.input_size
            )));
        }
        if self.input_size >> self.depth == 0 {
            return Err(Error::Config("depth collapses the image to nothing".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscriminatorSpec {
    pub input_size: usize,
    pub base_channels: usize,
    /// Number of stride-2 blocks before the two stride-1 heads.
    pub n_layers: usize,
}

impl DiscriminatorSpec {
    /// Side length of the output patch grid.
    pub fn patch_size(&self) -> Result<usize> {
        let mut s = self.input_size as isize;
        for _ in 0..self.n_layers {
            s = (s + 2 - 4) / 2 + 1; // k4 s2 p1
        }
        s -= 2; // two k4 s1 p1 layers, each shrinking by 1
        if s < 1 {
            return Err(Error::Config(format!(
                "discriminator with {} layers collapses a {} px input",
                self.n_layers, self.input_size
            )));
        }
        Ok(s as usize)
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.n_layers == 0 {
            return Err(Error::Config("discriminator needs n_layers >= 1 and channels >= 1".into()));
        }
        self.patch_size().map(|_| ())
    }
}

// ---- layers ----

struct Conv<T: Scalar> {
    w: Tensor<T>,
    b: Tensor<T>,
    stride: usize,
    pad: usize,
}

impl<T: Scalar> Conv<T> {
    fn new(
        rng: &mut ChaCha12Rng,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        pad: usize,
        init_scale: f64,
    ) -> Self {
        let w = Array4::from_shape_fn((out_ch, in_ch, k, k), |_| {
            T::from_f64(gauss(rng) * INIT_STD * init_scale)
        });
        Conv {
            w: Tensor::param(w.into_dyn()),
            b: Tensor::param(ArrayD::zeros(IxDyn(&[out_ch]))),
            stride,
            pad,
        }
    }

    fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        x.conv2d(&self.w, &self.b, self.stride, self.pad)
    }

    fn params(&self, name: &str, out: &mut Vec<(String, Tensor<T>)>) {
        out.push((format!("{name}.w"), self.w.clone()));
        out.push((format!("{name}.b"), self.b.clone()));
    }
}

struct InstanceNorm<T: Scalar> {
    gain: Tensor<T>,
    bias: Tensor<T>,
}

impl<T: Scalar> InstanceNorm<T> {
    fn new(ch: usize) -> Self {
        InstanceNorm {
            gain: Tensor::param(Array1::from_elem(ch, T::one()).into_dyn()),
            bias: Tensor::param(ArrayD::zeros(IxDyn(&[ch]))),
        }
    }

    fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        x.instance_norm(&self.gain, &self.bias, T::from_f64(1e-5))
    }

    fn params(&self, name: &str, out: &mut Vec<(String, Tensor<T>)>) {
        out.push((format!("{name}.gain"), self.gain.clone()));
        out.push((format!("{name}.bias"), self.bias.clone()));
    }
}

fn gauss(rng: &mut ChaCha12Rng) -> f64 {
    use rand_distr::Distribution;
    rand_distr::StandardNormal.sample(rng)
}

fn channels(base: usize, level: usize) -> usize {
    (base << level).min(base * 8)
}

// ---- generator ----

/// Encoder-decoder generator with optional symmetric skip connections.
pub struct Generator<T: Scalar> {
    pub spec: GeneratorSpec,
    pub role: GeneratorRole,
    enc: Vec<(Conv<T>, Option<InstanceNorm<T>>)>,
    dec: Vec<(Conv<T>, InstanceNorm<T>)>,
    head: Conv<T>,
}

/// Builds a generator for the given role. The map-output head starts near
/// zero so training begins from the identity counterfactual.
pub fn build_generator<T: Scalar>(
    spec: GeneratorSpec,
    role: GeneratorRole,
    rng: &mut ChaCha12Rng,
) -> Result<Generator<T>> {
    spec.validate()?;
    let base = spec.base_channels;
    let mut enc = Vec::new();
    for lvl in 0..spec.depth {
        let in_ch = if lvl == 0 { 1 } else { channels(base, lvl - 1) };
        let out_ch = channels(base, lvl);
        let conv = Conv::new(rng, in_ch, out_ch, 4, 2, 1, 1.0);
        // first block carries no normalization (stabilizes raw intensities)
        let norm = if lvl == 0 { None } else { Some(InstanceNorm::new(out_ch)) };
        enc.push((conv, norm));
    }
    let mut dec = Vec::new();
    for lvl in (0..spec.depth).rev() {
        let up_ch = channels(base, lvl);
        let skip_ch = if spec.skip_connections && lvl > 0 { channels(base, lvl - 1) } else { 0 };
        let out_ch = if lvl == 0 { base } else { channels(base, lvl - 1) };
        let conv = Conv::new(rng, up_ch + skip_ch, out_ch, 3, 1, 1, 1.0);
        dec.push((conv, InstanceNorm::new(out_ch)));
    }
    let head_scale = if role == GeneratorRole::PosToMap { MAP_HEAD_SHRINK } else { 1.0 };
    let head = Conv::new(rng, base, 1, 3, 1, 1, head_scale);
    Ok(Generator { spec, role, enc, dec, head })
}

impl<T: Scalar> Generator<T> {
    /// Forward pass over a `[1, H, W]` tensor; output shape equals input shape.
    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let shape = x.shape();
        assert_eq!(shape.len(), 3, "generator input must be [1, H, W]");
        assert_eq!(shape[0], 1, "generator input must be single-channel");
        assert!(
            shape[1] % (1 << self.spec.depth) == 0 && shape[2] % (1 << self.spec.depth) == 0,
            "spatial size must be divisible by 2^depth"
        );
        let mut h = x.clone();
        let mut skips: Vec<Tensor<T>> = Vec::with_capacity(self.spec.depth);
        for (conv, norm) in &self.enc {
            h = conv.forward(&h);
            if let Some(n) = norm {
                h = n.forward(&h);
            }
            h = h.leaky_relu(T::from_f64(0.2));
            skips.push(h.clone());
        }
        for (i, (conv, norm)) in self.dec.iter().enumerate() {
            let lvl = self.spec.depth - 1 - i;
            h = h.upsample2x();
            if self.spec.skip_connections && lvl > 0 {
                h = h.concat_channels(&skips[lvl - 1]);
            }
            h = conv.forward(&h);
            h = norm.forward(&h);
            h = h.relu();
        }
        let y = self.head.forward(&h).tanh();
        match self.role.squash() {
            OutputSquash::Squash11 => y,
            OutputSquash::Squash22 => y.scale(T::from_f64(2.0)),
        }
    }

    pub fn params(&self, prefix: &str) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        for (i, (conv, norm)) in self.enc.iter().enumerate() {
            conv.params(&format!("{prefix}.enc{i}"), &mut out);
            if let Some(n) = norm {
                n.params(&format!("{prefix}.enc{i}.norm"), &mut out);
            }
        }
        for (i, (conv, norm)) in self.dec.iter().enumerate() {
            conv.params(&format!("{prefix}.dec{i}"), &mut out);
            norm.params(&format!("{prefix}.dec{i}.norm"), &mut out);
        }
        self.head.params(&format!("{prefix}.head"), &mut out);
        out
    }
}

// ---- discriminator ----

/// Patch-grid probability classifier.
pub struct Discriminator<T: Scalar> {
    pub spec: DiscriminatorSpec,
    blocks: Vec<(Conv<T>, Option<InstanceNorm<T>>)>,
    head: Conv<T>,
}

pub fn build_discriminator<T: Scalar>(
    spec: DiscriminatorSpec,
    rng: &mut ChaCha12Rng,
) -> Result<Discriminator<T>> {
    spec.validate()?;
    let base = spec.base_channels;
    let mut blocks = Vec::new();
    let mut ch = 1usize;
    for lvl in 0..spec.n_layers {
        let out_ch = channels(base, lvl);
        let conv = Conv::new(rng, ch, out_ch, 4, 2, 1, 1.0);
        let norm = if lvl == 0 { None } else { Some(InstanceNorm::new(out_ch)) };
        blocks.push((conv, norm));
        ch = out_ch;
    }
    let pen_ch = channels(base, spec.n_layers);
    blocks.push((
        Conv::new(rng, ch, pen_ch, 4, 1, 1, 1.0),
        Some(InstanceNorm::new(pen_ch)),
    ));
    let head = Conv::new(rng, pen_ch, 1, 4, 1, 1, 1.0);
    Ok(Discriminator { spec, blocks, head })
}

impl<T: Scalar> Discriminator<T> {
    /// Forward pass over `[1, H, W]`; returns a `[1, p, p]` grid of
    /// probabilities strictly inside `(0, 1)`.
    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let mut h = x.clone();
        for (conv, norm) in &self.blocks {
            h = conv.forward(&h);
            if let Some(n) = norm {
                h = n.forward(&h);
            }
            h = h.leaky_relu(T::from_f64(0.2));
        }
        self.head.forward(&h).sigmoid_clamped(T::from_f64(PROB_EPS))
    }

    pub fn params(&self, prefix: &str) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        for (i, (conv, norm)) in self.blocks.iter().enumerate() {
            conv.params(&format!("{prefix}.block{i}"), &mut out);
            if let Some(n) = norm {
                n.params(&format!("{prefix}.block{i}.norm"), &mut out);
            }
        }
        self.head.params(&format!("{prefix}.head"), &mut out);
        out
    }
}

// ---- model bundle ----

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// Phase-1 cascaded model: unpaired cycle-consistent translator.
    CascadedCi,
    /// Phase-2 cascaded model: residual generator trained on synthesized pairs.
    CascadedRgan,
    /// Single integrated model whose forward generator emits the map.
    Integrated,
}

impl Scheme {
    pub fn forward_role(self) -> GeneratorRole {
        match self {
            Scheme::CascadedCi => GeneratorRole::PosToNeg,
            Scheme::CascadedRgan | Scheme::Integrated => GeneratorRole::PosToMap,
        }
    }
}

/// Network specs shared by a bundle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BundleSpecs {
    pub generator: GeneratorSpec,
    pub discriminator: DiscriminatorSpec,
}

impl BundleSpecs {
    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.discriminator.validate()?;
        if self.generator.input_size != self.discriminator.input_size {
            return Err(Error::Config("generator and discriminator input sizes differ".into()));
        }
        Ok(())
    }
}

/// The generator/discriminator set of one scheme, plus loss weights.
pub struct ModelBundle<T: Scalar> {
    pub scheme: Scheme,
    pub specs: BundleSpecs,
    pub weights: LossWeights,
    pub forward_gen: Generator<T>,
    /// Backward generator `G^{c- -> c+}`; absent for the paired RGAN phase.
    pub backward_gen: Option<Generator<T>>,
    /// `D^{c+}`; absent for the paired RGAN phase.
    pub disc_pos: Option<Discriminator<T>>,
    /// `D^{c-}`.
    pub disc_neg: Discriminator<T>,
    /// Set once a training loop has produced a usable checkpoint.
    pub trained: bool,
}

impl<T: Scalar> ModelBundle<T> {
    pub fn build(
        scheme: Scheme,
        specs: BundleSpecs,
        weights: LossWeights,
        rng: &mut ChaCha12Rng,
    ) -> Result<Self> {
        specs.validate()?;
        weights.validate()?;
        let forward_gen = build_generator(specs.generator, scheme.forward_role(), rng)?;
        let (backward_gen, disc_pos) = match scheme {
            Scheme::CascadedRgan => (None, None),
            _ => (
                Some(build_generator(specs.generator, GeneratorRole::NegToPos, rng)?),
                Some(build_discriminator(specs.discriminator, rng)?),
            ),
        };
        let disc_neg = build_discriminator(specs.discriminator, rng)?;
        Ok(ModelBundle {
            scheme,
            specs,
            weights,
            forward_gen,
            backward_gen,
            disc_pos,
            disc_neg,
            trained: false,
        })
    }

    /// All named parameters, in a stable order.
    pub fn params(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = self.forward_gen.params("gen_fwd");
        if let Some(g) = &self.backward_gen {
            out.extend(g.params("gen_bwd"));
        }
        if let Some(d) = &self.disc_pos {
            out.extend(d.params("disc_pos"));
        }
        out.extend(self.disc_neg.params("disc_neg"));
        out
    }

    pub fn generator_params(&self) -> Vec<Tensor<T>> {
        let mut out: Vec<Tensor<T>> =
            self.forward_gen.params("g").into_iter().map(|(_, t)| t).collect();
        if let Some(g) = &self.backward_gen {
            out.extend(g.params("g").into_iter().map(|(_, t)| t));
        }
        out
    }
}

// ---- tensor/image bridging ----

/// Model-range image as a `[1, H, W]` constant tensor.
pub fn image_to_tensor<T: Scalar>(img: &Image) -> Tensor<T> {
    let m = img.as_model();
    let d = m.data();
    let (h, w) = (d.nrows(), d.ncols());
    let arr = ArrayD::from_shape_fn(IxDyn(&[1, h, w]), |ix| T::from_f64(d[[ix[1], ix[2]]] as f64));
    Tensor::constant(arr)
}

/// Collapses a `[1, H, W]` tensor into a 2D grid.
pub fn tensor_to_grid<T: Scalar>(t: &Tensor<T>) -> Array2<f32> {
    let d = t.data();
    let shape = d.shape().to_vec();
    assert_eq!(shape.len(), 3);
    assert_eq!(shape[0], 1);
    Array2::from_shape_fn((shape[1], shape[2]), |(i, j)| d[[0, i, j]].to_f64() as f32)
}
