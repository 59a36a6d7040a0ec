//! The four networks: class-common encoder, class-specific encoder,
//! classifier and discriminator, all sized from one [`NetConfig`].

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};
use crate::SeededRng;

/// Shape configuration shared by every network of a [`FactorModel`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    /// Electrode count of the input.
    pub n_eeg_channels: usize,
    /// Samples per crop.
    pub n_timesamples: usize,
    pub n_classes: usize,
    /// Feature maps produced by each encoder.
    pub n_feature_maps: usize,
    pub temporal_kernel: usize,
    pub spatial_kernel: usize,
    pub pool_kernel: usize,
    pub pool_stride: usize,
    pub dropout_p: f64,
}

impl NetConfig {
    /// Default kernels for the given input geometry.
    pub fn new(n_eeg_channels: usize, n_timesamples: usize, n_classes: usize) -> Self {
        NetConfig {
            n_eeg_channels,
            n_timesamples,
            n_classes,
            n_feature_maps: 40,
            temporal_kernel: 48,
            spatial_kernel: 24,
            pool_kernel: 68,
            pool_stride: 14,
            dropout_p: 0.5,
        }
    }

    /// 24 channels, 997 samples, 6 classes: yields 40 x 64 feature maps and
    /// a 5120-wide classifier input.
    pub fn reference() -> Self {
        Self::new(24, 997, 6)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_eeg_channels", self.n_eeg_channels),
            ("n_timesamples", self.n_timesamples),
            ("n_classes", self.n_classes),
            ("n_feature_maps", self.n_feature_maps),
            ("temporal_kernel", self.temporal_kernel),
            ("spatial_kernel", self.spatial_kernel),
            ("pool_kernel", self.pool_kernel),
            ("pool_stride", self.pool_stride),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.n_classes < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        if self.spatial_kernel > self.n_eeg_channels {
            return Err(Error::Config(format!(
                "spatial_kernel {} exceeds {} channels",
                self.spatial_kernel, self.n_eeg_channels
            )));
        }
        if self.temporal_kernel > self.n_timesamples {
            return Err(Error::Config(format!(
                "temporal_kernel {} exceeds {} samples",
                self.temporal_kernel, self.n_timesamples
            )));
        }
        if self.pool_kernel > self.conv_len() {
            return Err(Error::Config(format!(
                "pool_kernel {} exceeds the {}-sample convolution output",
                self.pool_kernel,
                self.conv_len()
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!("dropout_p {} not in [0, 1)", self.dropout_p)));
        }
        Ok(())
    }

    /// Time extent after the temporal convolution.
    pub fn conv_len(&self) -> usize {
        self.n_timesamples + 1 - self.temporal_kernel.min(self.n_timesamples)
    }

    /// Rows left after the spatial convolution (1 when the kernel spans
    /// every channel).
    pub fn spatial_rows(&self) -> usize {
        self.n_eeg_channels + 1 - self.spatial_kernel.min(self.n_eeg_channels)
    }

    pub fn pooled_len(&self) -> usize {
        (self.conv_len().saturating_sub(self.pool_kernel)) / self.pool_stride.max(1) + 1
    }

    /// `T` of the `[F, T]` feature map. Leftover spatial rows are laid end
    /// to end along time.
    pub fn feature_time(&self) -> usize {
        self.spatial_rows() * self.pooled_len()
    }

    /// Flattened size of one feature map, `F * T`.
    pub fn feature_len(&self) -> usize {
        self.n_feature_maps * self.feature_time()
    }

    fn hidden_widths(&self) -> [usize; 3] {
        let f = self.feature_len();
        [f.max(1), (f / 2).max(1), (f / 4).max(1)]
    }

    /// Layer widths of the classifier, input first: `2FT -> FT -> FT/2 -> FT/4 -> classes`.
    pub fn classifier_widths(&self) -> Vec<usize> {
        let [a, b, c] = self.hidden_widths();
        vec![2 * self.feature_len(), a, b, c, self.n_classes]
    }

    /// Layer widths of the discriminator, input first: `FT -> FT -> FT/2 -> FT/4 -> 2`.
    pub fn discriminator_widths(&self) -> Vec<usize> {
        let [a, b, c] = self.hidden_widths();
        vec![self.feature_len(), a, b, c, 2]
    }
}

/// Parameter groups. The trainer optimizes `Common`, `Specific` and
/// `Classifier` together and `Discriminator` on its own.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Group {
    Common,
    Specific,
    Classifier,
    Discriminator,
}

impl Group {
    pub const ALL: [Group; 4] = [
        Group::Common,
        Group::Specific,
        Group::Classifier,
        Group::Discriminator,
    ];

    fn prefix(self) -> &'static str {
        match self {
            Group::Common => "fc",
            Group::Specific => "fs",
            Group::Classifier => "cls",
            Group::Discriminator => "disc",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub temporal_weight: Tensor,
    pub temporal_bias: Tensor,
    pub spatial_weight: Tensor,
    pub spatial_bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

fn uniform(shape: &[usize], fan_in: usize, rng: &mut SeededRng) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = rng.random_range(-bound..bound);
    }
    t
}

impl Encoder {
    fn init(cfg: &NetConfig, rng: &mut SeededRng) -> Self {
        let f = cfg.n_feature_maps;
        Encoder {
            temporal_weight: uniform(&[f, 1, 1, cfg.temporal_kernel], cfg.temporal_kernel, rng),
            temporal_bias: Tensor::zeros(&[f]),
            spatial_weight: uniform(&[f, f, cfg.spatial_kernel, 1], f * cfg.spatial_kernel, rng),
            spatial_bias: Tensor::zeros(&[f]),
        }
    }

    fn tensors(&self) -> [&Tensor; 4] {
        [&self.temporal_weight, &self.temporal_bias, &self.spatial_weight, &self.spatial_bias]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 4] {
        [
            &mut self.temporal_weight,
            &mut self.temporal_bias,
            &mut self.spatial_weight,
            &mut self.spatial_bias,
        ]
    }
}

impl Mlp {
    fn init(widths: &[usize], rng: &mut SeededRng) -> Self {
        let layers = widths
            .windows(2)
            .map(|w| Dense {
                weight: uniform(&[w[0], w[1]], w[0], rng),
                bias: Tensor::zeros(&[w[1]]),
            })
            .collect();
        Mlp { layers }
    }

    fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias])
    }

    /// Input width of each layer followed by the output width.
    pub fn widths(&self) -> Vec<usize> {
        let mut w: Vec<usize> = self.layers.iter().map(|l| l.weight.shape()[0]).collect();
        if let Some(last) = self.layers.last() {
            w.push(last.weight.shape()[1]);
        }
        w
    }
}

/// Parameters of the four networks plus the configuration they were sized from.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorModel {
    pub config: NetConfig,
    pub common: Encoder,
    pub specific: Encoder,
    pub classifier: Mlp,
    pub discriminator: Mlp,
}

/// Which encoder a forward pass runs through.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Common,
    Specific,
}

/// Dropout behaviour of a forward pass.
pub enum Phase<'r> {
    Eval,
    Train(&'r mut SeededRng),
}

impl Phase<'_> {
    fn dropout(&mut self, tape: &mut Tape<'_>, x: Var, p: f64) -> Result<Var> {
        match self {
            Phase::Eval => Ok(x),
            Phase::Train(rng) => tape.dropout(x, p, true, &mut **rng),
        }
    }
}

impl FactorModel {
    /// Fresh parameters: weights uniform in `±1/sqrt(fan_in)`, zero biases.
    pub fn build(config: NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = SeededRng::seed_from_u64(seed);
        let common = Encoder::init(&config, &mut rng);
        let specific = Encoder::init(&config, &mut rng);
        let classifier = Mlp::init(&config.classifier_widths(), &mut rng);
        let discriminator = Mlp::init(&config.discriminator_widths(), &mut rng);
        Ok(FactorModel {
            config,
            common,
            specific,
            classifier,
            discriminator,
        })
    }

    pub fn params(&self, group: Group) -> Vec<&Tensor> {
        match group {
            Group::Common => self.common.tensors().to_vec(),
            Group::Specific => self.specific.tensors().to_vec(),
            Group::Classifier => self.classifier.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect(),
            Group::Discriminator => self.discriminator.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect(),
        }
    }

    pub fn params_mut(&mut self, group: Group) -> Vec<&mut Tensor> {
        self.params_mut_many(&[group])
    }

    /// Mutable parameters of several groups at once, in [`Group::ALL`] order.
    pub fn params_mut_many(&mut self, groups: &[Group]) -> Vec<&mut Tensor> {
        let FactorModel { common, specific, classifier, discriminator, .. } = self;
        let mut out = Vec::new();
        if groups.contains(&Group::Common) {
            out.extend(common.tensors_mut());
        }
        if groups.contains(&Group::Specific) {
            out.extend(specific.tensors_mut());
        }
        if groups.contains(&Group::Classifier) {
            out.extend(classifier.tensors_mut());
        }
        if groups.contains(&Group::Discriminator) {
            out.extend(discriminator.tensors_mut());
        }
        out
    }

    /// Stable parameter names, in checkpoint order.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for group in Group::ALL {
            let p = group.prefix();
            match group {
                Group::Common | Group::Specific => {
                    let names = ["temporal.weight", "temporal.bias", "spatial.weight", "spatial.bias"];
                    for (n, t) in names.iter().zip(self.params(group)) {
                        out.push((format!("{p}.{n}"), t));
                    }
                }
                Group::Classifier | Group::Discriminator => {
                    for (i, t) in self.params(group).into_iter().enumerate() {
                        let kind = if i % 2 == 0 { "weight" } else { "bias" };
                        out.push((format!("{p}.{}.{kind}", i / 2), t));
                    }
                }
            }
        }
        out
    }

    /// Hash of the exact bit patterns of one parameter group.
    pub fn group_hash(&self, group: Group) -> u64 {
        let mut h = DefaultHasher::new();
        for t in self.params(group) {
            t.shape().hash(&mut h);
            for v in t.data() {
                v.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }

    pub fn param_count(&self) -> usize {
        Group::ALL.iter().flat_map(|&g| self.params(g)).map(Tensor::numel).sum()
    }

    /// Registers every parameter on `tape`; only groups listed in
    /// `trainable` receive gradients.
    pub fn bind<'a>(&'a self, tape: &mut Tape<'a>, trainable: &[Group]) -> Bound {
        let mut vars: [Vec<Var>; 4] = Default::default();
        for (slot, group) in vars.iter_mut().zip(Group::ALL) {
            let grad = trainable.contains(&group);
            *slot = self.params(group).into_iter().map(|t| tape.leaf(t, grad)).collect();
        }
        Bound {
            config: self.config.clone(),
            vars,
        }
    }

    /// Wraps a `[B, channels, samples]` or `[B, 1, channels, samples]` batch as tape input.
    fn eval_input(&self, x: &Tensor) -> Result<Tensor> {
        match *x.shape() {
            [b, c, t] => x.clone().reshaped(vec![b, 1, c, t]),
            _ => Ok(x.clone()),
        }
    }

    /// Inference-mode class-common features `[B, F, T]`.
    pub fn forward_fc(&self, x: &Tensor) -> Result<Tensor> {
        self.encode_eval(Branch::Common, x)
    }

    /// Inference-mode class-specific features `[B, F, T]`.
    pub fn forward_fs(&self, x: &Tensor) -> Result<Tensor> {
        self.encode_eval(Branch::Specific, x)
    }

    fn encode_eval(&self, branch: Branch, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, &[]);
        let input = tape.input(self.eval_input(x)?);
        let z = bound.encode(&mut tape, branch, input, &mut Phase::Eval)?;
        Ok(tape.value(z).clone())
    }

    /// Inference-mode classifier logits from two `[B, F, T]` feature maps.
    pub fn forward_classifier(&self, zc: &Tensor, zs: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, &[]);
        let a = tape.input(zc.clone());
        let b = tape.input(zs.clone());
        let logits = bound.classify(&mut tape, a, b, &mut Phase::Eval)?;
        Ok(tape.value(logits).clone())
    }

    /// Inference-mode discriminator logits; index 1 is "real" (task trial).
    pub fn forward_discriminator(&self, z: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, &[]);
        let input = tape.input(z.clone());
        let logits = bound.discriminate(&mut tape, input, &mut Phase::Eval)?;
        Ok(tape.value(logits).clone())
    }
}

/// Parameters of a [`FactorModel`] registered on one tape.
pub struct Bound {
    config: NetConfig,
    vars: [Vec<Var>; 4],
}

impl Bound {
    pub fn vars(&self, group: Group) -> &[Var] {
        let i = Group::ALL.iter().position(|&g| g == group).expect("group listed in ALL");
        &self.vars[i]
    }

    fn check_features(&self, op: &'static str, tape: &Tape<'_>, z: Var) -> Result<()> {
        let shape = tape.value(z).shape();
        let expected = [self.config.n_feature_maps, self.config.feature_time()];
        if shape.len() != 3 {
            return Err(Error::RankMismatch { op, expected: 3, shape: shape.to_vec() });
        }
        for (axis, (&want, &got)) in expected.iter().zip(&shape[1..]).enumerate() {
            if want != got {
                return Err(Error::ShapeMismatch { op, axis: axis + 1, expected: want, got });
            }
        }
        Ok(())
    }

    /// Temporal conv, spatial conv, average pool, ELU, dropout; returns the
    /// `[B, F, T]` feature map.
    pub fn encode(&self, tape: &mut Tape<'_>, branch: Branch, x: Var, phase: &mut Phase<'_>) -> Result<Var> {
        const OP: &str = "encode";
        let cfg = &self.config;
        let shape = tape.value(x).shape().to_vec();
        if shape.len() != 4 {
            return Err(Error::RankMismatch { op: OP, expected: 4, shape });
        }
        let expected = [1, cfg.n_eeg_channels, cfg.n_timesamples];
        for (axis, (&want, &got)) in expected.iter().zip(&shape[1..]).enumerate() {
            if want != got {
                return Err(Error::ShapeMismatch { op: OP, axis: axis + 1, expected: want, got });
            }
        }
        let p = self.vars(match branch {
            Branch::Common => Group::Common,
            Branch::Specific => Group::Specific,
        });
        let h = tape.conv2d(x, p[0], p[1], (1, 1))?;
        let h = tape.conv2d(h, p[2], p[3], (1, 1))?;
        let h = tape.avg_pool2d(h, (1, cfg.pool_kernel), (1, cfg.pool_stride))?;
        let h = tape.elu(h)?;
        let h = phase.dropout(tape, h, cfg.dropout_p)?;
        tape.reshape(h, vec![shape[0], cfg.n_feature_maps, cfg.feature_time()])
    }

    fn mlp(&self, tape: &mut Tape<'_>, group: Group, x: Var, phase: &mut Phase<'_>) -> Result<(Var, Var)> {
        let p = self.vars(group);
        let layers = p.len() / 2;
        let mut h = x;
        let mut hidden = x;
        for i in 0..layers {
            h = tape.linear(h, p[2 * i], p[2 * i + 1])?;
            if i + 1 < layers {
                h = tape.elu(h)?;
                hidden = h;
                h = phase.dropout(tape, h, self.config.dropout_p)?;
            }
        }
        Ok((h, hidden))
    }

    /// Raw classifier logits `[B, classes]` from time-concatenated features.
    pub fn classify(&self, tape: &mut Tape<'_>, zc: Var, zs: Var, phase: &mut Phase<'_>) -> Result<Var> {
        self.classify_with_hidden(tape, zc, zs, phase).map(|(logits, _)| logits)
    }

    /// Classifier logits together with the activations of its last hidden layer.
    pub fn classify_with_hidden(
        &self,
        tape: &mut Tape<'_>,
        zc: Var,
        zs: Var,
        phase: &mut Phase<'_>,
    ) -> Result<(Var, Var)> {
        self.check_features("classify", tape, zc)?;
        self.check_features("classify", tape, zs)?;
        let joined = tape.concat_time(zc, zs)?;
        let flat = tape.flatten(joined)?;
        self.mlp(tape, Group::Classifier, flat, phase)
    }

    /// Discriminator logits `[B, 2]`: index 0 fake (resting), index 1 real (task).
    pub fn discriminate(&self, tape: &mut Tape<'_>, z: Var, phase: &mut Phase<'_>) -> Result<Var> {
        self.check_features("discriminate", tape, z)?;
        let flat = tape.flatten(z)?;
        self.mlp(tape, Group::Discriminator, flat, phase).map(|(logits, _)| logits)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> NetConfig {
        NetConfig {
            n_eeg_channels: 3,
            n_timesamples: 40,
            n_classes: 3,
            n_feature_maps: 4,
            temporal_kernel: 5,
            spatial_kernel: 3,
            pool_kernel: 6,
            pool_stride: 3,
            dropout_p: 0.5,
        }
    }

    #[test]
    fn reference_geometry() {
        let cfg = NetConfig::reference();
        cfg.validate().unwrap();
        assert_eq!(cfg.conv_len(), 950);
        assert_eq!(cfg.feature_time(), 64);
        assert_eq!(cfg.classifier_widths(), vec![5120, 2560, 1280, 640, 6]);
        assert_eq!(cfg.discriminator_widths(), vec![2560, 2560, 1280, 640, 2]);
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut cfg = small();
        cfg.spatial_kernel = 4;
        assert!(FactorModel::build(cfg, 0).is_err());
        let mut cfg = small();
        cfg.temporal_kernel = 41;
        assert!(cfg.validate().is_err());
        let mut cfg = small();
        cfg.pool_kernel = 37;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn build_is_deterministic() {
        let a = FactorModel::build(small(), 9).unwrap();
        let b = FactorModel::build(small(), 9).unwrap();
        let c = FactorModel::build(small(), 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.classifier.widths(), small().classifier_widths());
        assert_eq!(a.discriminator.widths(), small().discriminator_widths());
        for (_, t) in a.named_params() {
            if t.rank() == 1 {
                assert!(t.data().iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn weights_within_fan_in_bound() {
        let m = FactorModel::build(small(), 1).unwrap();
        let bound = 1.0 / 5f64.sqrt();
        assert!(m.common.temporal_weight.data().iter().all(|v| v.abs() <= bound));
        let bound = 1.0 / 12f64.sqrt();
        assert!(m.specific.spatial_weight.data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn leftover_spatial_rows_extend_time() {
        let mut cfg = small();
        cfg.spatial_kernel = 2;
        let m = FactorModel::build(cfg.clone(), 0).unwrap();
        let z = m.forward_fc(&Tensor::zeros(&[1, 1, 3, 40])).unwrap();
        assert_eq!(z.shape(), &[1, 4, 2 * cfg.pooled_len()]);
    }

    #[test]
    fn zero_input_zero_features() {
        let m = FactorModel::build(small(), 3).unwrap();
        let z = m.forward_fs(&Tensor::zeros(&[2, 1, 3, 40])).unwrap();
        assert_eq!(z.shape(), &[2, 4, small().feature_time()]);
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encoders_do_not_share_parameters() {
        let m = FactorModel::build(small(), 3).unwrap();
        let x = Tensor::new(vec![1, 1, 3, 40], (0..120).map(|i| (i as f64 * 0.3).sin()).collect()).unwrap();
        assert_ne!(m.forward_fc(&x).unwrap(), m.forward_fs(&x).unwrap());
    }

    #[test]
    fn input_geometry_checked() {
        let m = FactorModel::build(small(), 3).unwrap();
        assert!(matches!(
            m.forward_fc(&Tensor::zeros(&[1, 1, 3, 39])),
            Err(Error::ShapeMismatch { axis: 3, .. })
        ));
        let z = Tensor::zeros(&[1, 5, small().feature_time()]);
        assert!(matches!(m.forward_discriminator(&z), Err(Error::ShapeMismatch { axis: 1, .. })));
    }
}
