//! The learned function stack: encoder f, decoder g, factor generator
//! Phi(h, z), factor-conditioned policy pi(a | h, phi), baseline V(h) and
//! latent transition T(h, phi).
//!
//! Two-input networks fuse their inputs with the flattened outer product
//! (`bilinear`) rather than concatenation, so neither input can be ignored.

use crate::autodiff::{NodeId, Tape, Tensor};
use crate::env::Observation;
use crate::error::{IcfError, Result};
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    Mlp,
    Conv4,
}

/// Manifold the raw generator output is projected onto.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionMode {
    Hypercube,
    Hypersphere,
    Simplex,
    ScaledSimplex,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Latent size K.
    pub latent_dim: usize,
    pub noise_dim: usize,
    /// Factor embedding size; defaults to K so dh and phi are comparable.
    pub factor_dim: usize,
    pub hidden: usize,
    pub encoder: EncoderKind,
    pub projection: ProjectionMode,
    pub leaky_slope: f64,
    pub n_actions: usize,
    /// Observation tensor shape, from the environment and observation mode.
    pub obs_shape: Vec<usize>,
    /// Number of separately parameterized policy heads in discrete mode;
    /// 0 selects the joint (generator + shared policy) architecture.
    pub n_factors: usize,
    /// Normalize the encoder output with running mean/variance statistics.
    /// Pins the latent scale so the selectivity kernel keeps a fixed length
    /// scale relative to typical variations.
    #[serde(default)]
    pub encoder_norm: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim < 1 || self.noise_dim < 1 || self.factor_dim < 1 {
            return Err(IcfError::Config(
                "latent_dim, noise_dim and factor_dim must all be >= 1".into(),
            ));
        }
        if self.n_actions < 2 {
            return Err(IcfError::Config("need at least 2 actions".into()));
        }
        if self.obs_shape.is_empty() {
            return Err(IcfError::Config("obs_shape must be set".into()));
        }
        Ok(())
    }

    pub fn obs_len(&self) -> usize {
        self.obs_shape.iter().product()
    }

    pub fn is_discrete(&self) -> bool {
        self.n_factors > 0
    }
}

/// A controllable-factor embedding with the manifold it lives on.
#[derive(Clone, Debug, PartialEq)]
pub struct Factor {
    pub vector: Tensor,
    pub projection: ProjectionMode,
}

impl Factor {
    /// Check the projection invariant at tolerance 1e-9.
    pub fn satisfies_invariant(&self) -> bool {
        let d = self.vector.data();
        match self.projection {
            ProjectionMode::Hypercube => d.iter().all(|&v| v > -1.0 && v < 1.0),
            ProjectionMode::Hypersphere => (self.vector.norm() - 1.0).abs() <= 1e-9,
            ProjectionMode::Simplex => {
                d.iter().all(|&v| v >= 0.0) && (d.iter().sum::<f64>() - 1.0).abs() <= 1e-9
            }
            ProjectionMode::ScaledSimplex => {
                // tanh rounds to exactly +-1.0 for large inputs
                let s: f64 = d.iter().sum();
                s.abs() <= 1.0
                    && (d.iter().all(|&v| v >= 0.0) || d.iter().all(|&v| v <= 0.0))
            }
        }
    }
}

// -- layers ----------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct Linear {
    /// [in, out]
    pub w: Tensor,
    /// [out]
    pub b: Tensor,
}

impl Linear {
    pub fn init(rng: &mut ChaCha20Rng, fan_in: usize, fan_out: usize) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut sample =
            |n: usize| Tensor::vector((0..n).map(|_| rng.gen_range(-bound..bound)).collect());
        let w = sample(fan_in * fan_out).reshaped(vec![fan_in, fan_out]).unwrap();
        let b = sample(fan_out);
        Linear { w, b }
    }
}

#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub leaky_slope: f64,
}

impl Mlp {
    /// `dims` = [in, hidden..., out]; leaky ReLU between layers, linear output.
    pub fn init(rng: &mut ChaCha20Rng, dims: &[usize], leaky_slope: f64) -> Self {
        let layers = dims.windows(2).map(|w| Linear::init(rng, w[0], w[1])).collect();
        Mlp { layers, leaky_slope }
    }
}

#[derive(Clone, Debug)]
pub struct Conv4 {
    /// [C_out, C_in, 3, 3] each, stride 2.
    pub kernels: Vec<Tensor>,
    pub head: Linear,
    pub leaky_slope: f64,
}

impl Conv4 {
    pub const CHANNELS: [usize; 4] = [8, 16, 32, 64];
    pub const KERNEL: usize = 3;
    pub const STRIDE: usize = 2;

    pub fn init(
        rng: &mut ChaCha20Rng,
        obs_shape: &[usize],
        latent_dim: usize,
        leaky_slope: f64,
    ) -> Result<Self> {
        if obs_shape.len() != 3 {
            return Err(IcfError::Config(format!(
                "conv4 encoder needs a [C, H, W] observation, got {:?}",
                obs_shape
            )));
        }
        let mut c_in = obs_shape[0];
        let (mut h, mut w) = (obs_shape[1], obs_shape[2]);
        let mut kernels = Vec::new();
        for &c_out in Self::CHANNELS.iter() {
            if h < Self::KERNEL || w < Self::KERNEL {
                return Err(IcfError::Config(format!(
                    "observation {}x{} too small for 4 conv layers",
                    obs_shape[1], obs_shape[2]
                )));
            }
            let fan_in = c_in * Self::KERNEL * Self::KERNEL;
            let bound = 1.0 / (fan_in as f64).sqrt();
            let n = c_out * c_in * Self::KERNEL * Self::KERNEL;
            let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
            kernels.push(Tensor::new(vec![c_out, c_in, Self::KERNEL, Self::KERNEL], data)?);
            h = (h - Self::KERNEL) / Self::STRIDE + 1;
            w = (w - Self::KERNEL) / Self::STRIDE + 1;
            c_in = c_out;
        }
        let flat = c_in * h * w;
        Ok(Conv4 {
            kernels,
            head: Linear::init(rng, flat, latent_dim),
            leaky_slope,
        })
    }
}

#[derive(Clone, Debug)]
pub enum Encoder {
    Mlp(Mlp),
    Conv4(Conv4),
}

// -- the full model --------------------------------------------------------

/// Running mean/variance normalization of the encoder output: the batch-norm
/// analog for single-sample updates. The statistics are treated as constants
/// during differentiation and updated by the trainer after each step, so the
/// encoder cannot cheat the selectivity kernel by shrinking or inflating the
/// latent scale.
#[derive(Clone, Debug)]
pub struct LatentNorm {
    pub mean: Tensor,
    pub var: Tensor,
    pub count: u64,
}

impl LatentNorm {
    pub const MOMENTUM: f64 = 0.99;
    pub const EPS: f64 = 1e-5;

    pub fn new(k: usize) -> Self {
        LatentNorm {
            mean: Tensor::zeros(&[k]),
            var: Tensor::new(vec![k], vec![1.0; k]).unwrap(),
            count: 0,
        }
    }

    /// Fold one pre-normalization latent into the running statistics.
    pub fn update(&mut self, pre: &[f64]) {
        let m = Self::MOMENTUM;
        for ((mu, var), &x) in
            self.mean.data_mut().iter_mut().zip(self.var.data_mut()).zip(pre)
        {
            *mu = m * *mu + (1.0 - m) * x;
            let d = x - *mu;
            *var = m * *var + (1.0 - m) * d * d;
        }
        self.count += 1;
    }

    /// Per-coordinate 1 / sqrt(var + eps).
    pub fn inv_std(&self) -> Tensor {
        let d = self.var.data().iter().map(|v| 1.0 / (v + Self::EPS).sqrt()).collect();
        Tensor::new(vec![self.var.len()], d).unwrap()
    }
}

#[derive(Clone, Debug)]
pub struct IcfModel {
    pub cfg: ModelConfig,
    pub encoder: Encoder,
    /// Present iff cfg.encoder_norm.
    pub norm: Option<LatentNorm>,
    /// Absent in discrete mode (no autoencoder loss there).
    pub decoder: Option<Mlp>,
    pub generator: Option<Mlp>,
    pub policy: Option<Mlp>,
    pub baseline: Mlp,
    pub transition: Option<Mlp>,
    pub discrete_policies: Vec<Mlp>,
}

fn mlp_params<'a>(name: &str, m: &'a Mlp, out: &mut Vec<(String, &'a Tensor)>) {
    for (i, l) in m.layers.iter().enumerate() {
        out.push((format!("{name}.{i}.w"), &l.w));
        out.push((format!("{name}.{i}.b"), &l.b));
    }
}

fn mlp_params_mut<'a>(name: &str, m: &'a mut Mlp, out: &mut Vec<(String, &'a mut Tensor)>) {
    for (i, l) in m.layers.iter_mut().enumerate() {
        out.push((format!("{name}.{i}.w"), &mut l.w));
        out.push((format!("{name}.{i}.b"), &mut l.b));
    }
}

impl IcfModel {
    pub fn new(cfg: ModelConfig, rng: &mut ChaCha20Rng) -> Result<Self> {
        cfg.validate()?;
        let k = cfg.latent_dim;
        let hid = cfg.hidden;
        let slope = cfg.leaky_slope;
        let encoder = match cfg.encoder {
            EncoderKind::Mlp => Encoder::Mlp(Mlp::init(rng, &[cfg.obs_len(), hid, k], slope)),
            EncoderKind::Conv4 => Encoder::Conv4(Conv4::init(rng, &cfg.obs_shape, k, slope)?),
        };
        let norm = cfg.encoder_norm.then(|| LatentNorm::new(k));
        if cfg.is_discrete() {
            let heads = (0..cfg.n_factors)
                .map(|_| Mlp::init(rng, &[k, hid, cfg.n_actions], slope))
                .collect();
            Ok(IcfModel {
                baseline: Mlp::init(rng, &[k, hid, 1], slope),
                cfg,
                encoder,
                norm,
                decoder: None,
                generator: None,
                policy: None,
                transition: None,
                discrete_policies: heads,
            })
        } else {
            let gen_out =
                cfg.factor_dim + usize::from(cfg.projection == ProjectionMode::ScaledSimplex);
            // fused inputs append a constant 1 to each side of the outer
            // product, so the fusion carries linear as well as cross terms
            let gen_in = (k + 1) * (cfg.noise_dim + 1);
            let pair_in = (k + 1) * (cfg.factor_dim + 1);
            Ok(IcfModel {
                decoder: Some(Mlp::init(rng, &[k, hid, cfg.obs_len()], slope)),
                generator: Some(Mlp::init(rng, &[gen_in, hid, gen_out], slope)),
                policy: Some(Mlp::init(rng, &[pair_in, hid, cfg.n_actions], slope)),
                baseline: Mlp::init(rng, &[k, hid, 1], slope),
                transition: Some(Mlp::init(rng, &[pair_in, hid, k], slope)),
                cfg,
                encoder,
                norm,
                discrete_policies: vec![],
            })
        }
    }

    /// Named parameter tensors in a deterministic order. The order is the
    /// contract for checkpoints, optimizer state and bound node ids.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        match &self.encoder {
            Encoder::Mlp(m) => mlp_params("encoder", m, &mut out),
            Encoder::Conv4(c) => {
                for (i, k) in c.kernels.iter().enumerate() {
                    out.push((format!("encoder.conv{i}.k"), k));
                }
                out.push(("encoder.head.w".into(), &c.head.w));
                out.push(("encoder.head.b".into(), &c.head.b));
            }
        }
        if let Some(d) = &self.decoder {
            mlp_params("decoder", d, &mut out);
        }
        if let Some(g) = &self.generator {
            mlp_params("generator", g, &mut out);
        }
        if let Some(p) = &self.policy {
            mlp_params("policy", p, &mut out);
        }
        mlp_params("baseline", &self.baseline, &mut out);
        if let Some(t) = &self.transition {
            mlp_params("transition", t, &mut out);
        }
        for (i, h) in self.discrete_policies.iter().enumerate() {
            mlp_params(&format!("head{i}"), h, &mut out);
        }
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        match &mut self.encoder {
            Encoder::Mlp(m) => mlp_params_mut("encoder", m, &mut out),
            Encoder::Conv4(c) => {
                for (i, k) in c.kernels.iter_mut().enumerate() {
                    out.push((format!("encoder.conv{i}.k"), k));
                }
                out.push(("encoder.head.w".into(), &mut c.head.w));
                out.push(("encoder.head.b".into(), &mut c.head.b));
            }
        }
        if let Some(d) = &mut self.decoder {
            mlp_params_mut("decoder", d, &mut out);
        }
        if let Some(g) = &mut self.generator {
            mlp_params_mut("generator", g, &mut out);
        }
        if let Some(p) = &mut self.policy {
            mlp_params_mut("policy", p, &mut out);
        }
        mlp_params_mut("baseline", &mut self.baseline, &mut out);
        if let Some(t) = &mut self.transition {
            mlp_params_mut("transition", t, &mut out);
        }
        for (i, h) in self.discrete_policies.iter_mut().enumerate() {
            mlp_params_mut(&format!("head{i}"), h, &mut out);
        }
        out
    }

    fn sections(&self) -> Vec<(String, usize, usize)> {
        let names = self.named_params();
        let mut out: Vec<(String, usize, usize)> = Vec::new();
        for (i, (name, _)) in names.iter().enumerate() {
            let prefix = name.split('.').next().unwrap().to_string();
            match out.last_mut() {
                Some((p, _, len)) if *p == prefix => *len += 1,
                _ => out.push((prefix, i, 1)),
            }
        }
        out
    }

    /// Register every parameter as a tape leaf; ids align with named_params.
    pub fn bind<'m>(&'m self, tape: &mut Tape) -> BoundModel<'m> {
        let ids = self
            .named_params()
            .iter()
            .map(|(_, t)| tape.leaf((*t).clone()))
            .collect();
        self.bound_with(ids)
    }

    /// Build a bound view over caller-provided leaf ids (one per parameter,
    /// in named_params order). Used by gradient checks that own the leaves.
    pub fn bound_with<'m>(&'m self, ids: Vec<NodeId>) -> BoundModel<'m> {
        assert_eq!(ids.len(), self.named_params().len());
        BoundModel {
            model: self,
            sections: self.sections(),
            ids,
        }
    }
}

/// A model whose parameters are registered on a tape for one forward/backward
/// round. Forward methods consume node ids and return node ids.
pub struct BoundModel<'m> {
    pub model: &'m IcfModel,
    /// Leaf ids aligned with `IcfModel::named_params` order.
    pub ids: Vec<NodeId>,
    sections: Vec<(String, usize, usize)>,
}

impl<'m> BoundModel<'m> {
    fn cfg(&self) -> &ModelConfig {
        &self.model.cfg
    }

    fn section(&self, prefix: &str) -> (usize, usize) {
        self.sections
            .iter()
            .find(|(p, _, _)| p == prefix)
            .map(|(_, start, len)| (*start, *len))
            .unwrap_or_else(|| panic!("no parameter section `{prefix}`"))
    }

    fn linear(&self, tape: &mut Tape, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let n = tape.value(x).len();
        let xr = tape.reshape(x, vec![1, n])?;
        let y = tape.matmul(xr, w)?;
        let m = tape.value(y).len();
        let y = tape.reshape(y, vec![m])?;
        tape.add(y, b)
    }

    /// Run an MLP whose parameter leaves start at `base` in `self.ids`.
    fn mlp_forward(
        &self,
        tape: &mut Tape,
        base: usize,
        n_layers: usize,
        slope: f64,
        x: NodeId,
    ) -> Result<NodeId> {
        let mut h = x;
        for l in 0..n_layers {
            let w = self.ids[base + 2 * l];
            let b = self.ids[base + 2 * l + 1];
            h = self.linear(tape, h, w, b)?;
            if l + 1 < n_layers {
                h = tape.leaky_relu(h, slope);
            }
        }
        Ok(h)
    }

    /// h = f(obs).
    pub fn encode(&self, tape: &mut Tape, obs: &Observation) -> Result<NodeId> {
        let x = tape.leaf(obs.data.clone());
        self.encode_node(tape, x)
    }

    pub fn encode_node(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        self.encode_node_pre(tape, x).map(|(h, _)| h)
    }

    /// Like `encode_node`, additionally returning the pre-normalization
    /// latent so the trainer can update running statistics. Without
    /// normalization both ids coincide.
    pub fn encode_node_pre(&self, tape: &mut Tape, x: NodeId) -> Result<(NodeId, NodeId)> {
        let pre = self.encode_trunk(tape, x)?;
        let h = match &self.model.norm {
            Some(norm) => {
                // statistics enter as constants; gradients flow through the
                // trunk output only
                let mean = tape.leaf(norm.mean.clone());
                let inv_std = tape.leaf(norm.inv_std());
                let centered = tape.sub(pre, mean)?;
                tape.mul(centered, inv_std)?
            }
            None => pre,
        };
        Ok((h, pre))
    }

    fn encode_trunk(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        if tape.value(x).len() != self.cfg().obs_len() {
            return Err(IcfError::ShapeMismatch {
                context: "encode",
                lhs: tape.value(x).shape().to_vec(),
                rhs: self.cfg().obs_shape.clone(),
            });
        }
        match &self.model.encoder {
            Encoder::Mlp(m) => {
                let n = tape.value(x).len();
                let flat = tape.reshape(x, vec![n])?;
                let (base, len) = self.section("encoder");
                self.mlp_forward(tape, base, len / 2, m.leaky_slope, flat)
            }
            Encoder::Conv4(c) => {
                let (base, _) = self.section("encoder");
                let mut h = x;
                for i in 0..c.kernels.len() {
                    h = tape.conv2d(h, self.ids[base + i], Conv4::STRIDE)?;
                    h = tape.leaky_relu(h, c.leaky_slope);
                }
                let n = tape.value(h).len();
                let flat = tape.reshape(h, vec![n])?;
                let w = self.ids[base + c.kernels.len()];
                let b = self.ids[base + c.kernels.len() + 1];
                self.linear(tape, flat, w, b)
            }
        }
    }

    /// g(h), shaped like the observation tensor.
    pub fn decode(&self, tape: &mut Tape, h: NodeId) -> Result<NodeId> {
        let d = self.model.decoder.as_ref().ok_or_else(|| {
            IcfError::Config("decode called on a model without a decoder (discrete mode)".into())
        })?;
        if tape.value(h).len() != self.cfg().latent_dim {
            return Err(IcfError::Dimension(format!(
                "decode expects a length-{} latent, got {:?}",
                self.cfg().latent_dim,
                tape.value(h).shape()
            )));
        }
        let (base, _) = self.section("decoder");
        let flat = self.mlp_forward(tape, base, d.layers.len(), d.leaky_slope, h)?;
        tape.reshape(flat, self.cfg().obs_shape.clone())
    }

    /// Outer product of both inputs extended with a constant 1: cross terms
    /// plus both raw inputs.
    fn fuse(&self, tape: &mut Tape, a: NodeId, b: NodeId) -> Result<NodeId> {
        let one = tape.constant(1.0);
        let aa = tape.concat(&[a, one])?;
        let bb = tape.concat(&[b, one])?;
        tape.bilinear(aa, bb)
    }

    /// Raw generator output for noise z, before projection.
    pub fn generator_raw(&self, tape: &mut Tape, h: NodeId, z: NodeId) -> Result<NodeId> {
        let g = self
            .model
            .generator
            .as_ref()
            .ok_or_else(|| IcfError::Config("generate_factor called in discrete mode".into()))?;
        let fused = self.fuse(tape, h, z)?;
        let (base, _) = self.section("generator");
        self.mlp_forward(tape, base, g.layers.len(), g.leaky_slope, fused)
    }

    /// phi = project(Phi(h, z)). Returns the factor node and a degeneracy
    /// flag (zero-norm input in hypersphere mode hit the epsilon floor).
    pub fn generate_factor(&self, tape: &mut Tape, h: NodeId, z: NodeId) -> Result<(NodeId, bool)> {
        let raw = self.generator_raw(tape, h, z)?;
        project_factor(tape, raw, self.cfg().projection, self.cfg().factor_dim)
    }

    /// pi(a | h, phi) as a probability vector over the action set.
    pub fn policy(&self, tape: &mut Tape, h: NodeId, phi: NodeId) -> Result<NodeId> {
        let p = self
            .model
            .policy
            .as_ref()
            .ok_or_else(|| IcfError::Config("shared policy called in discrete mode".into()))?;
        let fused = self.fuse(tape, h, phi)?;
        let (base, _) = self.section("policy");
        let logits = self.mlp_forward(tape, base, p.layers.len(), p.leaky_slope, fused)?;
        Ok(tape.softmax(logits))
    }

    /// V(h), scalar.
    pub fn baseline(&self, tape: &mut Tape, h: NodeId) -> Result<NodeId> {
        let (base, _) = self.section("baseline");
        let v = self.mlp_forward(
            tape,
            base,
            self.model.baseline.layers.len(),
            self.model.baseline.leaky_slope,
            h,
        )?;
        tape.reshape(v, vec![1])
    }

    /// T(h, phi): predicted latent after executing the option phi from h.
    pub fn transition(&self, tape: &mut Tape, h: NodeId, phi: NodeId) -> Result<NodeId> {
        let t = self
            .model
            .transition
            .as_ref()
            .ok_or_else(|| IcfError::Config("transition called in discrete mode".into()))?;
        let fused = self.fuse(tape, h, phi)?;
        let (base, _) = self.section("transition");
        self.mlp_forward(tape, base, t.layers.len(), t.leaky_slope, fused)
    }

    /// One of the K separately parameterized policy heads (discrete mode).
    pub fn discrete_policy(&self, tape: &mut Tape, h: NodeId, head: usize) -> Result<NodeId> {
        if !self.cfg().is_discrete() {
            return Err(IcfError::Config(
                "discrete_mode_policies called outside discrete mode".into(),
            ));
        }
        let m = &self.model.discrete_policies[head];
        let (base, _) = self.section(&format!("head{head}"));
        let logits = self.mlp_forward(tape, base, m.layers.len(), m.leaky_slope, h)?;
        Ok(tape.softmax(logits))
    }

    /// All K heads at once.
    pub fn discrete_policies(&self, tape: &mut Tape, h: NodeId) -> Result<Vec<NodeId>> {
        (0..self.cfg().n_factors)
            .map(|i| self.discrete_policy(tape, h, i))
            .collect()
    }
}

/// Project a raw vector onto the configured factor manifold.
///
/// hypercube = tanh, hypersphere = L2 normalize, simplex = softmax,
/// scaled_simplex = softmax(first d) * tanh(last scalar).
pub fn project_factor(
    tape: &mut Tape,
    raw: NodeId,
    mode: ProjectionMode,
    factor_dim: usize,
) -> Result<(NodeId, bool)> {
    match mode {
        ProjectionMode::Hypercube => Ok((tape.tanh(raw), false)),
        ProjectionMode::Hypersphere => {
            let degenerate = tape.value(raw).norm() <= 1e-8;
            Ok((tape.l2_normalize(raw, 1e-8), degenerate))
        }
        ProjectionMode::Simplex => Ok((tape.softmax(raw), false)),
        ProjectionMode::ScaledSimplex => {
            let n = tape.value(raw).len();
            if n != factor_dim + 1 {
                return Err(IcfError::Dimension(format!(
                    "scaled_simplex expects {} components (simplex + scalar), got {}",
                    factor_dim + 1,
                    n
                )));
            }
            let body = tape.slice(raw, 0, factor_dim)?;
            let scalar = tape.slice(raw, factor_dim, 1)?;
            let simplex = tape.softmax(body);
            let scale = tape.tanh(scalar);
            let out = tape.mul(simplex, scale)?;
            Ok((out, false))
        }
    }
}

/// Convenience: encode a single observation outside training (fresh tape).
pub fn encode_value(model: &IcfModel, obs: &Observation) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let h = bound.encode(&mut tape, obs)?;
    Ok(tape.value(h).clone())
}

/// Convenience: decode a latent outside training (fresh tape).
pub fn decode_value(model: &IcfModel, h: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let hid = tape.leaf(h.clone());
    let out = bound.decode(&mut tape, hid)?;
    Ok(tape.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{observe, preset, ObsMode};
    use crate::gradcheck;
    use rand::SeedableRng;

    fn test_cfg() -> ModelConfig {
        ModelConfig {
            latent_dim: 2,
            noise_dim: 2,
            factor_dim: 2,
            hidden: 8,
            encoder: EncoderKind::Mlp,
            projection: ProjectionMode::Hypercube,
            leaky_slope: 0.1,
            n_actions: 4,
            obs_shape: vec![2, 8, 8],
            n_factors: 0,
            encoder_norm: false,
        }
    }

    fn obs_for(cfg: &ModelConfig) -> Observation {
        let spec = preset("mazebase-small", false).unwrap();
        let obs = observe(&spec, &spec.initial_state(), ObsMode::Symbolic);
        assert_eq!(obs.data.shape(), cfg.obs_shape.as_slice());
        obs
    }

    #[test]
    fn encode_is_deterministic_and_sized() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let model = IcfModel::new(test_cfg(), &mut rng).unwrap();
        let obs = obs_for(&model.cfg);
        let h1 = encode_value(&model, &obs).unwrap();
        let h2 = encode_value(&model, &obs).unwrap();
        assert_eq!(h1.len(), 2);
        assert_eq!(h1, h2);
    }

    #[test]
    fn encoder_norm_shifts_and_scales_the_latent() {
        let mut cfg = test_cfg();
        cfg.encoder_norm = true;
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let mut model = IcfModel::new(cfg, &mut rng).unwrap();
        let obs = obs_for(&model.cfg);
        let fresh = encode_value(&model, &obs).unwrap();

        let mut bare_cfg = model.cfg.clone();
        bare_cfg.encoder_norm = false;
        let mut rng2 = ChaCha20Rng::seed_from_u64(1);
        let bare = IcfModel::new(bare_cfg, &mut rng2).unwrap();
        let pre = encode_value(&bare, &obs).unwrap();
        // mean 0, var 1 statistics: output matches the trunk up to the eps
        for (a, b) in fresh.data().iter().zip(pre.data()) {
            assert!((a - b / (1.0f64 + LatentNorm::EPS).sqrt()).abs() < 1e-12);
        }

        let norm = model.norm.as_mut().unwrap();
        norm.mean.data_mut().copy_from_slice(&[1.0, -2.0]);
        norm.var.data_mut().copy_from_slice(&[4.0, 0.25]);
        let shifted = encode_value(&model, &obs).unwrap();
        for (i, (s, p)) in shifted.data().iter().zip(pre.data()).enumerate() {
            let (mu, var) = ([1.0, -2.0][i], [4.0, 0.25][i]);
            let expect = (p - mu) / (var + LatentNorm::EPS).sqrt();
            assert!((s - expect).abs() < 1e-12, "coord {i}: {s} vs {expect}");
        }
    }

    #[test]
    fn encoder_norm_update_tracks_constant_stream() {
        let mut n = LatentNorm::new(2);
        for _ in 0..2000 {
            n.update(&[3.0, -1.0]);
        }
        assert_eq!(n.count, 2000);
        assert!((n.mean.data()[0] - 3.0).abs() < 1e-6);
        assert!((n.mean.data()[1] + 1.0).abs() < 1e-6);
        // constant input drives the variance toward zero
        assert!(n.var.data().iter().all(|v| *v < 1e-6));
    }

    #[test]
    fn encoder_norm_gradients_flow_through_trunk() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let mut cfg = test_cfg();
        cfg.encoder_norm = true;
        cfg.obs_shape = vec![1, 3, 3];
        let mut model = IcfModel::new(cfg, &mut rng).unwrap();
        {
            let norm = model.norm.as_mut().unwrap();
            norm.mean.data_mut().copy_from_slice(&[0.3, -0.2]);
            norm.var.data_mut().copy_from_slice(&[2.0, 0.5]);
        }
        let obs = Tensor::new(vec![1, 3, 3], (0..9).map(|i| i as f64 / 10.0).collect()).unwrap();
        let inputs: Vec<Tensor> =
            model.named_params().iter().map(|(_, t)| (*t).clone()).collect();
        gradcheck::check_default(&inputs, |tape, ids| {
            let bound = model.bound_with(ids.to_vec());
            let x = tape.leaf(obs.clone());
            let h = bound.encode_node(tape, x).unwrap();
            let t = tape.tanh(h);
            tape.sum(t)
        })
        .unwrap();
    }

    #[test]
    fn decode_shape_round_trip() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let model = IcfModel::new(test_cfg(), &mut rng).unwrap();
        let obs = obs_for(&model.cfg);
        let h = encode_value(&model, &obs).unwrap();
        let rec = decode_value(&model, &h).unwrap();
        assert_eq!(rec.shape(), obs.data.shape());
        let mse: f64 = rec
            .data()
            .iter()
            .zip(obs.data.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / rec.len() as f64;
        assert!(mse.is_finite());
    }

    #[test]
    fn projection_invariants_hold_for_all_modes() {
        let raws = [
            Tensor::vector(vec![0.0, 0.0]),
            Tensor::vector(vec![3.0, 4.0]),
            Tensor::vector(vec![-7.0, 0.5]),
        ];
        for raw in &raws {
            for mode in [
                ProjectionMode::Hypercube,
                ProjectionMode::Hypersphere,
                ProjectionMode::Simplex,
            ] {
                if mode == ProjectionMode::Hypersphere && raw.norm() <= 1e-8 {
                    continue;
                }
                let mut tape = Tape::new();
                let r = tape.leaf(raw.clone());
                let (p, _) = project_factor(&mut tape, r, mode, 2).unwrap();
                let f = Factor {
                    vector: tape.value(p).clone(),
                    projection: mode,
                };
                assert!(f.satisfies_invariant(), "{mode:?} on {:?}", raw.data());
            }
        }
    }

    #[test]
    fn projection_hand_values() {
        let mut tape = Tape::new();
        let zero = tape.leaf(Tensor::vector(vec![0.0, 0.0]));
        let (p, _) = project_factor(&mut tape, zero, ProjectionMode::Hypercube, 2).unwrap();
        assert_eq!(tape.value(p).data(), &[0.0, 0.0]);

        let two = tape.leaf(Tensor::vector(vec![0.0, 0.0]));
        let (p, _) = project_factor(&mut tape, two, ProjectionMode::Simplex, 2).unwrap();
        assert_eq!(tape.value(p).data(), &[0.5, 0.5]);

        let v = tape.leaf(Tensor::vector(vec![3.0, 4.0]));
        let (p, _) = project_factor(&mut tape, v, ProjectionMode::Hypersphere, 2).unwrap();
        assert!((tape.value(p).data()[0] - 0.6).abs() < 1e-12);
        assert!((tape.value(p).data()[1] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn hypersphere_zero_norm_flags_degenerate() {
        let mut tape = Tape::new();
        let zero = tape.leaf(Tensor::vector(vec![0.0, 0.0]));
        let (_, degenerate) =
            project_factor(&mut tape, zero, ProjectionMode::Hypersphere, 2).unwrap();
        assert!(degenerate);
    }

    #[test]
    fn scaled_simplex_projection() {
        let mut tape = Tape::new();
        let raw = tape.leaf(Tensor::vector(vec![0.0, 0.0, 100.0]));
        let (p, _) = project_factor(&mut tape, raw, ProjectionMode::ScaledSimplex, 2).unwrap();
        let d = tape.value(p).data();
        // softmax(0,0) = (.5,.5); tanh(100) ~ 1
        assert!((d[0] - 0.5).abs() < 1e-6 && (d[1] - 0.5).abs() < 1e-6);
        let f = Factor {
            vector: tape.value(p).clone(),
            projection: ProjectionMode::ScaledSimplex,
        };
        assert!(f.satisfies_invariant());
    }

    #[test]
    fn generated_factors_vary_with_noise() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let model = IcfModel::new(test_cfg(), &mut rng).unwrap();
        let h = Tensor::vector(vec![0.3, -0.2]);
        let mut distinct = 0;
        let mut prev: Option<Tensor> = None;
        for _ in 0..100 {
            let z = Tensor::vector((0..2).map(|_| gaussian(&mut rng)).collect());
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape);
            let hid = tape.leaf(h.clone());
            let zid = tape.leaf(z);
            let (f, _) = bound.generate_factor(&mut tape, hid, zid).unwrap();
            let v = tape.value(f).clone();
            if let Some(p) = &prev {
                let d: f64 = v.data().iter().zip(p.data()).map(|(a, b)| (a - b).abs()).sum();
                if d > 1e-3 {
                    distinct += 1;
                }
            }
            prev = Some(v);
        }
        assert!(distinct >= 90, "only {distinct}/99 distinct factors");
    }

    fn gaussian(rng: &mut ChaCha20Rng) -> f64 {
        // Box-Muller; good enough for a variability test.
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    #[test]
    fn policy_sums_to_one_and_near_uniform_when_small() {
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let mut model = IcfModel::new(test_cfg(), &mut rng).unwrap();
        for (_, t) in model.named_params_mut() {
            t.scale_in_place(1e-3);
        }
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let h = tape.leaf(Tensor::vector(vec![0.4, 0.6]));
        let phi = tape.leaf(Tensor::vector(vec![0.2, -0.9]));
        let p = bound.policy(&mut tape, h, phi).unwrap();
        let probs = tape.value(p).data();
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let (mx, mn) = (
            probs.iter().cloned().fold(f64::MIN, f64::max),
            probs.iter().cloned().fold(f64::MAX, f64::min),
        );
        assert!(mx - mn < 0.1);
    }

    #[test]
    fn policy_depends_on_both_inputs() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let model = IcfModel::new(test_cfg(), &mut rng).unwrap();
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let h = tape.leaf(Tensor::vector(vec![0.4, 0.6]));
        let phi = tape.leaf(Tensor::vector(vec![0.2, -0.9]));
        let p = bound.policy(&mut tape, h, phi).unwrap();
        let first = tape.index(p, 0).unwrap();
        let grads = tape.backward(first).unwrap();
        assert!(grads.get(h).unwrap().norm() > 1e-8);
        assert!(grads.get(phi).unwrap().norm() > 1e-8);
    }

    #[test]
    fn baseline_scalar_and_gradcheck() {
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        let model = IcfModel::new(test_cfg(), &mut rng).unwrap();
        let h = Tensor::vector(vec![0.1, -0.3]);
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let hid = tape.leaf(h.clone());
        let v = bound.baseline(&mut tape, hid).unwrap();
        assert!(tape.value(v).is_scalar());

        gradcheck::check_default(&[h], |tape, ids| {
            let bound = model.bind(tape);
            let v = bound.baseline(tape, ids[0]).unwrap();
            tape.sum(v)
        })
        .unwrap();
    }

    #[test]
    fn encoder_weight_gradients_match_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(12);
        let mut cfg = test_cfg();
        cfg.obs_shape = vec![1, 3, 3];
        let model = IcfModel::new(cfg, &mut rng).unwrap();
        let obs = Tensor::new(vec![1, 3, 3], (0..9).map(|i| i as f64 / 10.0).collect()).unwrap();
        let inputs: Vec<Tensor> = model.named_params().iter().map(|(_, t)| (*t).clone()).collect();
        gradcheck::check_default(&inputs, |tape, ids| {
            let bound = model.bound_with(ids.to_vec());
            let x = tape.leaf(obs.clone());
            let h = bound.encode_node(tape, x).unwrap();
            tape.index(h, 0).unwrap()
        })
        .unwrap();
    }

    #[test]
    fn transition_output_length() {
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let model = IcfModel::new(test_cfg(), &mut rng).unwrap();
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let h = tape.leaf(Tensor::vector(vec![0.1, -0.3]));
        let phi = tape.leaf(Tensor::vector(vec![0.5, 0.5]));
        let t = bound.transition(&mut tape, h, phi).unwrap();
        assert_eq!(tape.value(t).len(), 2);
    }

    #[test]
    fn discrete_heads_are_independent() {
        let mut rng = ChaCha20Rng::seed_from_u64(10);
        let mut cfg = test_cfg();
        cfg.n_factors = 4;
        cfg.latent_dim = 4;
        let mut model = IcfModel::new(cfg, &mut rng).unwrap();
        let h = Tensor::vector(vec![0.1, 0.2, 0.3, 0.4]);

        let eval = |model: &IcfModel| -> Vec<Tensor> {
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape);
            let hid = tape.leaf(h.clone());
            let ps = bound.discrete_policies(&mut tape, hid).unwrap();
            ps.iter().map(|&p| tape.value(p).clone()).collect()
        };
        let before = eval(&model);
        assert_eq!(before.len(), 4);
        for p in &before {
            assert!((p.data().iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        // perturb head 2; heads 0/1/3 must not move
        model.discrete_policies[2].layers[0].w.data_mut()[0] += 0.5;
        let after = eval(&model);
        assert_eq!(before[0], after[0]);
        assert_eq!(before[1], after[1]);
        assert_ne!(before[2], after[2]);
        assert_eq!(before[3], after[3]);
    }

    #[test]
    fn discrete_policies_outside_discrete_mode_errors() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let model = IcfModel::new(test_cfg(), &mut rng).unwrap();
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let h = tape.leaf(Tensor::vector(vec![0.0, 0.0]));
        assert!(bound.discrete_policy(&mut tape, h, 0).is_err());
    }

    #[test]
    fn conv4_encoder_runs_on_pixels() {
        let mut rng = ChaCha20Rng::seed_from_u64(13);
        let mut cfg = test_cfg();
        cfg.encoder = EncoderKind::Conv4;
        cfg.obs_shape = vec![3, 64, 64];
        let model = IcfModel::new(cfg, &mut rng).unwrap();
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let x = tape.leaf(Tensor::zeros(&[3, 64, 64]));
        let h = bound.encode_node(&mut tape, x).unwrap();
        assert_eq!(tape.value(h).len(), 2);
    }
}
