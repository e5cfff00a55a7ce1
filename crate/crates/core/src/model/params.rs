use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Encoder shape. The reference architecture is 5 layers x 300 hidden; the
/// default here is desk scale.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    /// Node feature width.
    pub in_dim: usize,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    #[serde(default = "default_layers")]
    pub layers: usize,
}

fn default_hidden() -> usize {
    32
}

fn default_layers() -> usize {
    3
}

impl Architecture {
    pub fn new(in_dim: usize) -> Self {
        Self {
            in_dim,
            hidden: default_hidden(),
            layers: default_layers(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_dim == 0 || self.hidden == 0 || self.layers == 0 {
            return Err(Error::config(
                "encoder",
                format!("all architecture extents must be positive, got {self:?}"),
            ));
        }
        Ok(())
    }
}

/// `x W + b` with `W: in x out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Affine {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Affine {
    /// Glorot-uniform weights, zero bias.
    pub fn init(input: usize, output: usize, rng: &mut ChaCha8Rng) -> Self {
        let limit = (6.0 / (input + output) as f64).sqrt();
        let w = (0..input * output).map(|_| rng.random_range(-limit..limit)).collect();
        Self {
            weight: Tensor::matrix(input, output, w),
            bias: Tensor::vector(vec![0.0; output]),
        }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[input, output]),
            bias: Tensor::zeros(&[output]),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.cols()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GinLayer {
    /// Learnable self-weight, a scalar initialised to 0.
    pub eps: Tensor,
    pub lin1: Affine,
    pub lin2: Affine,
}

/// Which part of the model a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamGroup {
    Embed,
    Layer(usize),
    Head,
}

impl ParamGroup {
    pub fn of(name: &str) -> Option<ParamGroup> {
        if name.starts_with("embed.") {
            Some(ParamGroup::Embed)
        } else if name.starts_with("head.") {
            Some(ParamGroup::Head)
        } else {
            let rest = name.strip_prefix("layer.")?;
            let idx = rest.split('.').next()?.parse().ok()?;
            Some(ParamGroup::Layer(idx))
        }
    }

    pub fn is_encoder(self) -> bool {
        !matches!(self, ParamGroup::Head)
    }
}

/// Encoder (input embedding + GIN layers) and an optional downstream head.
///
/// Leaf names: `embed.{weight,bias}`, `layer.{i}.eps`,
/// `layer.{i}.mlp.{0,1}.{weight,bias}`, `head.{weight,bias}`.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    pub arch: Architecture,
    pub embed: Affine,
    pub layers: Vec<GinLayer>,
    /// Pretrained checkpoints carry no head.
    pub head: Option<Affine>,
}

impl ParamSet {
    /// Fresh encoder with no head.
    pub fn init(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let embed = Affine::init(arch.in_dim, arch.hidden, &mut rng);
        let layers = (0..arch.layers)
            .map(|_| GinLayer {
                eps: Tensor::scalar(0.0),
                lin1: Affine::init(arch.hidden, arch.hidden, &mut rng),
                lin2: Affine::init(arch.hidden, arch.hidden, &mut rng),
            })
            .collect();
        Ok(Self {
            arch,
            embed,
            layers,
            head: None,
        })
    }

    /// Copy with a newly initialised `hidden -> tasks` head.
    pub fn with_fresh_head(&self, tasks: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4ead_4ead);
        let mut out = self.clone();
        out.head = Some(Affine::init(self.arch.hidden, tasks, &mut rng));
        out
    }

    pub fn without_head(&self) -> Self {
        let mut out = self.clone();
        out.head = None;
        out
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn leaves(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("embed.weight".to_string(), &self.embed.weight),
            ("embed.bias".to_string(), &self.embed.bias),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layer.{i}.eps"), &l.eps));
            out.push((format!("layer.{i}.mlp.0.weight"), &l.lin1.weight));
            out.push((format!("layer.{i}.mlp.0.bias"), &l.lin1.bias));
            out.push((format!("layer.{i}.mlp.1.weight"), &l.lin2.weight));
            out.push((format!("layer.{i}.mlp.1.bias"), &l.lin2.bias));
        }
        if let Some(h) = &self.head {
            out.push(("head.weight".to_string(), &h.weight));
            out.push(("head.bias".to_string(), &h.bias));
        }
        out
    }

    pub fn leaves_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = vec![
            ("embed.weight".to_string(), &mut self.embed.weight),
            ("embed.bias".to_string(), &mut self.embed.bias),
        ];
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.push((format!("layer.{i}.eps"), &mut l.eps));
            out.push((format!("layer.{i}.mlp.0.weight"), &mut l.lin1.weight));
            out.push((format!("layer.{i}.mlp.0.bias"), &mut l.lin1.bias));
            out.push((format!("layer.{i}.mlp.1.weight"), &mut l.lin2.weight));
            out.push((format!("layer.{i}.mlp.1.bias"), &mut l.lin2.bias));
        }
        if let Some(h) = &mut self.head {
            out.push(("head.weight".to_string(), &mut h.weight));
            out.push(("head.bias".to_string(), &mut h.bias));
        }
        out
    }

    pub fn names(&self) -> Vec<String> {
        self.leaves().into_iter().map(|(n, _)| n).collect()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.leaves().into_iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn parameter_count(&self) -> usize {
        self.leaves().iter().map(|(_, t)| t.len()).sum()
    }

    /// Structural compatibility: same architecture and identical encoder leaf shapes.
    pub fn check_compatible(&self, other: &ParamSet) -> Result<()> {
        if self.arch != other.arch {
            return Err(Error::contract(format!(
                "architectures differ: {:?} vs {:?}",
                self.arch, other.arch
            )));
        }
        for ((na, ta), (_, tb)) in self.leaves().iter().zip(other.leaves().iter()) {
            if ParamGroup::of(na).is_some_and(ParamGroup::is_encoder) && ta.shape() != tb.shape() {
                return Err(Error::contract(format!(
                    "`{na}` shapes differ: {:?} vs {:?}",
                    ta.shape(),
                    tb.shape()
                )));
            }
        }
        Ok(())
    }

    /// Bit-level fingerprint of every leaf, for before/after audits.
    pub fn fingerprints(&self) -> BTreeMap<String, u64> {
        self.leaves()
            .into_iter()
            .map(|(n, t)| {
                let mut h: u64 = 0xcbf2_9ce4_8422_2325;
                for x in t.data() {
                    for b in x.to_bits().to_le_bytes() {
                        h ^= b as u64;
                        h = h.wrapping_mul(0x0100_0000_01b3);
                    }
                }
                (n, h)
            })
            .collect()
    }
}

/// Names of the leaves in encoder layer `k`.
pub fn layer_param_names(params: &ParamSet, k: usize) -> Result<BTreeSet<String>> {
    if k >= params.layer_count() {
        return Err(Error::contract(format!(
            "layer index {k} out of range for {} layers",
            params.layer_count()
        )));
    }
    let prefix = format!("layer.{k}.");
    Ok(params
        .names()
        .into_iter()
        .filter(|n| n.starts_with(&prefix))
        .collect())
}

/// Layer-wise interpolation `(1 - a_i) * pre_i + a_i * ft_i`.
///
/// The input embedding uses `alphas[0]`; the head is copied from `ft`.
/// Endpoints are exact: `a_i = 0` reproduces `pre` and `a_i = 1` reproduces `ft`
/// bit for bit, and `pre == ft` is a fixed point for every `a_i`.
pub fn interpolate(pre: &ParamSet, ft: &ParamSet, alphas: &[f64]) -> Result<ParamSet> {
    pre.check_compatible(ft)?;
    if alphas.len() != pre.layer_count() {
        return Err(Error::contract(format!(
            "{} mixing coefficients for {} layers",
            alphas.len(),
            pre.layer_count()
        )));
    }
    if let Some(a) = alphas.iter().find(|a| !(0.0..=1.0).contains(*a)) {
        return Err(Error::contract(format!("mixing coefficient {a} outside [0, 1]")));
    }
    let mut out = ft.clone();
    let pre_leaves = pre.leaves();
    for ((name, dst), (_, src)) in out.leaves_mut().into_iter().zip(pre_leaves) {
        let alpha = match ParamGroup::of(&name) {
            Some(ParamGroup::Embed) => alphas[0],
            Some(ParamGroup::Layer(i)) => alphas[i],
            _ => continue,
        };
        mix_into(dst, src, alpha);
    }
    Ok(out)
}

/// `dst` holds the fine-tuned value on entry, the mixture on exit.
fn mix_into(dst: &mut Tensor, pre: &Tensor, alpha: f64) {
    if alpha == 1.0 {
        return;
    }
    if alpha == 0.0 {
        dst.data_mut().copy_from_slice(pre.data());
        return;
    }
    for (d, &p) in dst.data_mut().iter_mut().zip(pre.data()) {
        *d = p + alpha * (*d - p);
    }
}
