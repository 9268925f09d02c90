//! The three networks: encoder `q(z|d,h)`, joint decoder `p(d,h|z)` and
//! label predictor `q(h|d)`, built from fully connected stacks.
//!
//! All network inputs are row batches `[B, dim]` (a single vector `[dim]` is
//! also accepted); outputs keep the same leading extent.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::gaussian::DiagGaussian;
use crate::tensor::Tensor;

/// Hidden width used when none is configured.
pub const DEFAULT_HIDDEN: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub d_dim: usize,
    pub h_dim: usize,
    pub z_dim: usize,
}

impl ModelDims {
    pub fn new(d_dim: usize, h_dim: usize, z_dim: usize) -> Result<Self> {
        if d_dim == 0 || h_dim == 0 || z_dim == 0 {
            return Err(Error::Invalid(format!(
                "model dimensions must be positive, got d={d_dim} h={h_dim} z={z_dim}"
            )));
        }
        Ok(ModelDims { d_dim, h_dim, z_dim })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

/// Fully connected stack: ReLU between layers, `output_activation` at the end.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpSpec {
    pub layer_widths: Vec<usize>,
    pub output_activation: Activation,
}

impl MlpSpec {
    pub fn new(layer_widths: Vec<usize>, output_activation: Activation) -> Self {
        MlpSpec { layer_widths, output_activation }
    }

    pub fn input(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn output(&self) -> usize {
        *self.layer_widths.last().unwrap()
    }

    fn layers(&self) -> usize {
        self.layer_widths.len() - 1
    }
}

/// Sub-network roles in parameter order.
pub const ROLES: [&str; 8] = [
    "encoder.image",
    "encoder.label",
    "encoder.joint",
    "decoder.trunk",
    "decoder.image",
    "decoder.label",
    "decoder.mask",
    "predictor",
];

fn role_activation(role: &str) -> Activation {
    match role {
        "encoder.image" | "encoder.label" | "decoder.trunk" => Activation::Relu,
        _ => Activation::Identity,
    }
}

/// Layer layout of every sub-network.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkSpecs {
    pub encoder_image: MlpSpec,
    pub encoder_label: MlpSpec,
    pub encoder_joint: MlpSpec,
    pub decoder_trunk: MlpSpec,
    pub decoder_image: MlpSpec,
    pub decoder_label: MlpSpec,
    /// Present only for models of partially observed (depth) images.
    pub decoder_mask: Option<MlpSpec>,
    pub predictor: MlpSpec,
}

impl NetworkSpecs {
    /// The reference layout with hidden width `w`: a one-layer image branch
    /// and a three-layer label branch feeding a joint encoder stack, a
    /// two-layer decoder trunk with separate image/label (and mask) heads,
    /// and a three-layer predictor.
    pub fn standard(dims: ModelDims, w: usize, depth: bool) -> Self {
        use Activation::*;
        let (d, h, z) = (dims.d_dim, dims.h_dim, dims.z_dim);
        NetworkSpecs {
            encoder_image: MlpSpec::new(vec![d, w], Relu),
            encoder_label: MlpSpec::new(vec![h, w, w, w], Relu),
            encoder_joint: MlpSpec::new(vec![2 * w, w, 2 * z], Identity),
            decoder_trunk: MlpSpec::new(vec![z, w, w], Relu),
            decoder_image: MlpSpec::new(vec![w, 2 * d], Identity),
            decoder_label: MlpSpec::new(vec![w, w, 2 * h], Identity),
            decoder_mask: depth.then(|| MlpSpec::new(vec![w, d], Identity)),
            predictor: MlpSpec::new(vec![d, w, w, 2 * h], Identity),
        }
    }

    /// `(role, spec)` pairs in parameter order.
    pub fn roles(&self) -> Vec<(&'static str, &MlpSpec)> {
        let mut out = vec![
            (ROLES[0], &self.encoder_image),
            (ROLES[1], &self.encoder_label),
            (ROLES[2], &self.encoder_joint),
            (ROLES[3], &self.decoder_trunk),
            (ROLES[4], &self.decoder_image),
            (ROLES[5], &self.decoder_label),
        ];
        if let Some(m) = &self.decoder_mask {
            out.push((ROLES[6], m));
        }
        out.push((ROLES[7], &self.predictor));
        out
    }

    pub fn has_mask(&self) -> bool {
        self.decoder_mask.is_some()
    }

    pub fn validate(&self, dims: ModelDims) -> Result<()> {
        for (role, spec) in self.roles() {
            if spec.layer_widths.len() < 2 || spec.layer_widths.contains(&0) {
                return Err(Error::Invalid(format!("{role}: bad layer widths {:?}", spec.layer_widths)));
            }
            if spec.output_activation != role_activation(role) {
                return Err(Error::Invalid(format!("{role}: unexpected output activation")));
            }
        }
        let want = |role: &str, what: &str, got: usize, expected: usize| -> Result<()> {
            if got != expected {
                return Err(Error::Invalid(format!("{role}: {what} width {got}, expected {expected}")));
            }
            Ok(())
        };
        let trunk = self.decoder_trunk.output();
        want("encoder.image", "input", self.encoder_image.input(), dims.d_dim)?;
        want("encoder.label", "input", self.encoder_label.input(), dims.h_dim)?;
        want(
            "encoder.joint",
            "input",
            self.encoder_joint.input(),
            self.encoder_image.output() + self.encoder_label.output(),
        )?;
        want("encoder.joint", "output", self.encoder_joint.output(), 2 * dims.z_dim)?;
        want("decoder.trunk", "input", self.decoder_trunk.input(), dims.z_dim)?;
        want("decoder.image", "input", self.decoder_image.input(), trunk)?;
        want("decoder.image", "output", self.decoder_image.output(), 2 * dims.d_dim)?;
        want("decoder.label", "input", self.decoder_label.input(), trunk)?;
        want("decoder.label", "output", self.decoder_label.output(), 2 * dims.h_dim)?;
        if let Some(m) = &self.decoder_mask {
            want("decoder.mask", "input", m.input(), trunk)?;
            want("decoder.mask", "output", m.output(), dims.d_dim)?;
        }
        want("predictor", "input", self.predictor.input(), dims.d_dim)?;
        want("predictor", "output", self.predictor.output(), 2 * dims.h_dim)?;
        Ok(())
    }

    /// Recovers the layout from named parameter blocks (`role.layer.weight`).
    pub fn from_blocks(blocks: &[(String, Tensor)]) -> Result<Self> {
        let mut specs: Vec<Option<MlpSpec>> = Vec::new();
        for role in ROLES {
            let mut widths = Vec::new();
            for layer in 0.. {
                let name = format!("{role}.{layer}.weight");
                let Some((_, w)) = blocks.iter().find(|(n, _)| *n == name) else { break };
                let &[fan_in, fan_out] = w.shape() else {
                    return Err(Error::Malformed(format!("{name} is not a matrix")));
                };
                if widths.is_empty() {
                    widths.push(fan_in);
                } else if *widths.last().unwrap() != fan_in {
                    return Err(Error::Malformed(format!("{name}: fan-in {fan_in} breaks the chain")));
                }
                widths.push(fan_out);
            }
            specs.push((!widths.is_empty()).then(|| MlpSpec::new(widths, role_activation(role))));
        }
        let mut take = |i: usize| {
            specs[i].take().ok_or_else(|| Error::Malformed(format!("missing sub-network {}", ROLES[i])))
        };
        Ok(NetworkSpecs {
            encoder_image: take(0)?,
            encoder_label: take(1)?,
            encoder_joint: take(2)?,
            decoder_trunk: take(3)?,
            decoder_image: take(4)?,
            decoder_label: take(5)?,
            decoder_mask: take(6).ok(),
            predictor: take(7)?,
        })
    }
}

/// Named parameter blocks for all three networks.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    dims: ModelDims,
    specs: NetworkSpecs,
    blocks: Vec<(String, Tensor)>,
}

fn block_layout(specs: &NetworkSpecs) -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    for (role, spec) in specs.roles() {
        for l in 0..spec.layers() {
            let (i, o) = (spec.layer_widths[l], spec.layer_widths[l + 1]);
            out.push((format!("{role}.{l}.weight"), vec![i, o]));
            out.push((format!("{role}.{l}.bias"), vec![o]));
        }
    }
    out
}

impl ModelParams {
    /// Glorot-uniform weights in `±sqrt(6 / (fan_in + fan_out))`, zero biases.
    pub fn init(dims: ModelDims, specs: NetworkSpecs, seed: u64) -> Result<Self> {
        let dims = ModelDims::new(dims.d_dim, dims.h_dim, dims.z_dim)?;
        specs.validate(dims)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let blocks = block_layout(&specs)
            .into_iter()
            .map(|(name, shape)| {
                let t = if shape.len() == 2 {
                    let a = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                    let data = (0..shape[0] * shape[1]).map(|_| rng.random_range(-a..=a)).collect();
                    Tensor::new(&shape, data).expect("layout shape")
                } else {
                    Tensor::zeros(&shape)
                };
                (name, t)
            })
            .collect();
        Ok(ModelParams { dims, specs, blocks })
    }

    /// Every block zero: each network outputs `N(0, I)`.
    pub fn zeros(dims: ModelDims, specs: NetworkSpecs) -> Result<Self> {
        let dims = ModelDims::new(dims.d_dim, dims.h_dim, dims.z_dim)?;
        specs.validate(dims)?;
        let blocks = block_layout(&specs).into_iter().map(|(n, s)| (n, Tensor::zeros(&s))).collect();
        Ok(ModelParams { dims, specs, blocks })
    }

    /// Reassembles parameters from named blocks, checking them against `dims`.
    pub fn from_blocks(dims: ModelDims, blocks: Vec<(String, Tensor)>) -> Result<Self> {
        let specs = NetworkSpecs::from_blocks(&blocks)?;
        specs.validate(dims)?;
        let layout = block_layout(&specs);
        if layout.len() != blocks.len() {
            return Err(Error::Malformed(format!("{} blocks, layout needs {}", blocks.len(), layout.len())));
        }
        let mut ordered = Vec::with_capacity(layout.len());
        for (name, shape) in layout {
            let (_, t) = blocks
                .iter()
                .find(|(n, _)| *n == name)
                .ok_or_else(|| Error::Malformed(format!("missing block {name}")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Malformed(format!("{name}: shape {:?}, expected {shape:?}", t.shape())));
            }
            ordered.push((name, t.clone()));
        }
        Ok(ModelParams { dims, specs, blocks: ordered })
    }

    pub fn dims(&self) -> ModelDims {
        self.dims
    }

    pub fn specs(&self) -> &NetworkSpecs {
        &self.specs
    }

    pub fn blocks(&self) -> &[(String, Tensor)] {
        &self.blocks
    }

    pub fn block_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.blocks[i].1
    }

    pub fn block_count(&self) -> usize {
        self.blocks.len()
    }

    pub fn num_scalars(&self) -> usize {
        self.blocks.iter().map(|(_, t)| t.len()).sum()
    }

    /// Places every block on `tape` as a leaf.
    pub fn bind<'t>(&self, tape: &'t Tape, requires_grad: bool) -> ModelVars<'t> {
        let vars = self.blocks.iter().map(|(_, t)| tape.leaf(t.clone(), requires_grad)).collect();
        let mut offsets = Vec::new();
        let mut at = 0;
        for (role, spec) in self.specs.roles() {
            offsets.push((role, at, spec.layers(), spec.output_activation));
            at += 2 * spec.layers();
        }
        ModelVars { dims: self.dims, tape, vars, offsets }
    }
}

/// Decoder heads evaluated at a batch of latent codes.
pub struct Decoded<'t> {
    pub image: DiagGaussian<'t>,
    pub label: DiagGaussian<'t>,
    /// Per-pixel observation logits (depth models only).
    pub mask_logits: Option<Var<'t>>,
}

/// Model parameters bound to a tape.
pub struct ModelVars<'t> {
    dims: ModelDims,
    tape: &'t Tape,
    vars: Vec<Var<'t>>,
    offsets: Vec<(&'static str, usize, usize, Activation)>,
}

impl<'t> ModelVars<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn dims(&self) -> ModelDims {
        self.dims
    }

    pub fn vars(&self) -> &[Var<'t>] {
        &self.vars
    }

    pub fn has_mask(&self) -> bool {
        self.offsets.iter().any(|(r, ..)| *r == "decoder.mask")
    }

    /// Gradients of every block, zero where none reached it.
    pub fn grads(&self) -> Vec<Tensor> {
        self.vars
            .iter()
            .map(|v| v.grad().unwrap_or_else(|| Tensor::zeros(&v.shape())))
            .collect()
    }

    fn mlp(&self, role: &str, x: Var<'t>) -> Result<Var<'t>> {
        let &(_, start, layers, act) = self
            .offsets
            .iter()
            .find(|(r, ..)| *r == role)
            .ok_or_else(|| Error::Invalid(format!("model has no {role} network")))?;
        let mut h = x;
        for l in 0..layers {
            let (w, b) = (self.vars[start + 2 * l], self.vars[start + 2 * l + 1]);
            h = h.matmul(w)?.add_bias(b)?;
            if l + 1 < layers || act == Activation::Relu {
                h = h.relu()?;
            }
        }
        Ok(h)
    }

    fn expect_width(&self, op: &'static str, x: Var<'t>, width: usize) -> Result<()> {
        let got = x.value().last_dim();
        if got != width || x.value().shape().is_empty() {
            return Err(Error::shape(op, format!("input width {got}, expected {width}")));
        }
        Ok(())
    }

    /// Image branch of the encoder; reusable across several label samples.
    pub fn encode_image_features(&self, d: Var<'t>) -> Result<Var<'t>> {
        self.expect_width("encode_z", d, self.dims.d_dim)?;
        self.mlp("encoder.image", d)
    }

    pub fn encode_z_from_features(&self, image_features: Var<'t>, h: Var<'t>) -> Result<DiagGaussian<'t>> {
        self.expect_width("encode_z", h, self.dims.h_dim)?;
        let hf = self.mlp("encoder.label", h)?;
        let joint = self.tape.concat(&[image_features, hf])?;
        DiagGaussian::from_packed(self.mlp("encoder.joint", joint)?)
    }

    /// `q(z | d, h)`
    pub fn encode_z(&self, d: Var<'t>, h: Var<'t>) -> Result<DiagGaussian<'t>> {
        let features = self.encode_image_features(d)?;
        self.encode_z_from_features(features, h)
    }

    /// All decoder heads at `z`.
    pub fn decode_all(&self, z: Var<'t>) -> Result<Decoded<'t>> {
        self.expect_width("decode", z, self.dims.z_dim)?;
        let trunk = self.mlp("decoder.trunk", z)?;
        let image = DiagGaussian::from_packed(self.mlp("decoder.image", trunk)?)?;
        let label = DiagGaussian::from_packed(self.mlp("decoder.label", trunk)?)?;
        let mask_logits = if self.has_mask() { Some(self.mlp("decoder.mask", trunk)?) } else { None };
        Ok(Decoded { image, label, mask_logits })
    }

    /// `p(d | z)` and `p(h | z)`
    pub fn decode(&self, z: Var<'t>) -> Result<(DiagGaussian<'t>, DiagGaussian<'t>)> {
        let out = self.decode_all(z)?;
        Ok((out.image, out.label))
    }

    /// `q(h | d)`; its mean is the label prediction.
    pub fn predict_h(&self, d: Var<'t>) -> Result<DiagGaussian<'t>> {
        self.expect_width("predict_h", d, self.dims.d_dim)?;
        DiagGaussian::from_packed(self.mlp("predictor", d)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> (ModelDims, NetworkSpecs) {
        let dims = ModelDims::new(5, 4, 2).unwrap();
        (dims, NetworkSpecs::standard(dims, 6, false))
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let (dims, specs) = small();
        let a = ModelParams::init(dims, specs.clone(), 7).unwrap();
        let b = ModelParams::init(dims, specs.clone(), 7).unwrap();
        assert_eq!(a, b);
        let c = ModelParams::init(dims, specs, 8).unwrap();
        assert_ne!(a, c);
        for (name, t) in a.blocks() {
            if name.ends_with("bias") {
                assert!(t.data().iter().all(|&v| v == 0.0), "{name}");
            } else {
                let bound = (6.0 / (t.shape()[0] + t.shape()[1]) as f64).sqrt();
                assert!(t.data().iter().all(|v| v.abs() <= bound), "{name}");
            }
        }
    }

    #[test]
    fn zero_dims_rejected() {
        let dims = ModelDims { d_dim: 0, h_dim: 1, z_dim: 1 };
        let specs = NetworkSpecs::standard(ModelDims { d_dim: 1, ..dims }, 4, false);
        assert!(ModelParams::init(dims, specs, 0).is_err());
        assert!(ModelDims::new(1, 1, 0).is_err());
    }

    #[test]
    fn output_shapes() {
        let (dims, specs) = small();
        let p = ModelParams::init(dims, specs, 1).unwrap();
        let tape = Tape::new();
        let v = p.bind(&tape, false);
        let d = tape.constant(Tensor::filled(&[3, 5], 0.5));
        let h = tape.constant(Tensor::filled(&[3, 4], 0.2));
        let q = v.encode_z(d, h).unwrap();
        assert_eq!(q.mean().shape(), vec![3, 2]);
        assert_eq!(q.log_std().shape(), vec![3, 2]);
        let (pd, ph) = v.decode(q.mean()).unwrap();
        assert_eq!((pd.mean().shape(), pd.log_std().shape()), (vec![3, 5], vec![3, 5]));
        assert_eq!((ph.mean().shape(), ph.log_std().shape()), (vec![3, 4], vec![3, 4]));
        let r = v.predict_h(d).unwrap();
        assert_eq!(r.mean().shape(), vec![3, 4]);
        let single = tape.constant(Tensor::filled(&[5], 0.5));
        assert_eq!(v.predict_h(single).unwrap().mean().shape(), vec![4]);
    }

    #[test]
    fn zero_parameters_give_standard_normals() {
        let (dims, specs) = small();
        let p = ModelParams::zeros(dims, specs).unwrap();
        let tape = Tape::new();
        let v = p.bind(&tape, false);
        let d = tape.constant(Tensor::filled(&[5], 0.3));
        let h = tape.constant(Tensor::filled(&[4], -0.8));
        let q = v.encode_z(d, h).unwrap();
        assert!(q.mean().value().data().iter().chain(q.log_std().value().data()).all(|&x| x == 0.0));
        let (pd, ph) = v.decode(q.mean()).unwrap();
        for g in [pd, ph, v.predict_h(d).unwrap()] {
            assert!(g.mean().value().data().iter().chain(g.log_std().value().data()).all(|&x| x == 0.0));
        }
    }

    #[test]
    fn zero_parameter_joint_density_at_origin() {
        let dims = ModelDims::new(1, 1, 1).unwrap();
        let p = ModelParams::zeros(dims, NetworkSpecs::standard(dims, 3, false)).unwrap();
        let tape = Tape::new();
        let v = p.bind(&tape, false);
        let z = tape.constant(Tensor::vector(vec![0.4]));
        let (pd, ph) = v.decode(z).unwrap();
        let zero = tape.constant(Tensor::vector(vec![0.0]));
        let lp = pd.log_pdf(zero).unwrap().item().unwrap() + ph.log_pdf(zero).unwrap().item().unwrap();
        assert!((lp + 1.83788).abs() < 1e-5);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let (dims, specs) = small();
        let p = ModelParams::init(dims, specs, 1).unwrap();
        let tape = Tape::new();
        let v = p.bind(&tape, false);
        let bad = tape.constant(Tensor::zeros(&[3]));
        let h = tape.constant(Tensor::zeros(&[4]));
        assert!(v.encode_z(bad, h).is_err());
        assert!(v.decode(bad).is_err());
        assert!(v.predict_h(bad).is_err());
    }

    #[test]
    fn forward_is_pure() {
        let (dims, specs) = small();
        let p = ModelParams::init(dims, specs, 3).unwrap();
        let run = || {
            let tape = Tape::new();
            let v = p.bind(&tape, false);
            let d = tape.constant(Tensor::vector(vec![0.1, 0.2, 0.3, 0.4, 0.5]));
            let h = tape.constant(Tensor::vector(vec![0.9, 0.8, 0.7, 0.6]));
            let q = v.encode_z(d, h).unwrap();
            let r = v.predict_h(d).unwrap();
            let mut out = q.mean().value().data().to_vec();
            out.extend_from_slice(r.log_std().value().data());
            out
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn layout_round_trips_through_blocks() {
        let dims = ModelDims::new(4, 2, 1).unwrap();
        let p = ModelParams::init(dims, NetworkSpecs::standard(dims, 3, true), 5).unwrap();
        let q = ModelParams::from_blocks(dims, p.blocks().to_vec()).unwrap();
        assert_eq!(p, q);
        let wrong = ModelDims::new(4, 3, 1).unwrap();
        assert!(ModelParams::from_blocks(wrong, p.blocks().to_vec()).is_err());
    }
}
