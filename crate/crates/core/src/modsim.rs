//! Synthetic models and the modifications used to exercise the hashes:
//! magnitude pruning, Gaussian block tampering and a small-noise stand-in
//! for fine-tuning.

use std::collections::BTreeSet;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution as _, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tamper_hash::block_partition;
use crate::tensor_store::{DType, ModelWeights, Tensor, TensorFilter};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Distribution {
    Gaussian {
        #[serde(default)]
        mean: f64,
        std: f64,
    },
    Uniform {
        low: f64,
        high: f64,
    },
}

impl Distribution {
    fn validate(&self) -> Result<()> {
        match *self {
            Distribution::Gaussian { mean, std } if mean.is_finite() && std.is_finite() && std >= 0.0 => Ok(()),
            Distribution::Uniform { low, high } if low.is_finite() && high.is_finite() && low < high => Ok(()),
            d => Err(Error::InvalidSpec(format!("bad distribution {d:?}"))),
        }
    }

    fn fill(&self, n: usize, rng: &mut ChaCha20Rng) -> Vec<f64> {
        match *self {
            Distribution::Gaussian { mean, std } => {
                let d = Normal::new(mean, std).expect("validated");
                (0..n).map(|_| d.sample(rng)).collect()
            }
            Distribution::Uniform { low, high } => {
                let d = Uniform::new(low, high);
                (0..n).map(|_| d.sample(rng)).collect()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub shape: Vec<usize>,
    #[serde(default)]
    pub conv: bool,
    pub dist: Distribution,
    /// Offset added per output channel on top of `dist`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub channel_shift: Option<ChannelShift>,
}

/// A sinusoidal offset over the output channels (the first dimension):
/// channel `c` of `C` is shifted by `amplitude * sin(2 pi (cycles c / C + phase))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelShift {
    pub amplitude: f64,
    pub cycles: f64,
    pub phase: f64,
}

impl ChannelShift {
    fn apply(&self, values: &mut [f64], channels: usize) {
        let per = values.len() / channels;
        for (c, chunk) in values.chunks_mut(per).enumerate() {
            let t = self.cycles * c as f64 / channels as f64 + self.phase;
            let offset = self.amplitude * (std::f64::consts::TAU * t).sin();
            for v in chunk {
                *v += offset;
            }
        }
    }
}

impl LayerSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub name: String,
    pub layers: Vec<LayerSpec>,
    pub seed: u64,
}

impl ArchSpec {
    pub fn total_params(&self) -> usize {
        self.layers.iter().map(LayerSpec::numel).sum()
    }

    /// Checks the spec can feed both hashes with `segments` segments and
    /// `blocks` tamper blocks.
    pub fn validate(&self, segments: usize, blocks: usize) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::InvalidSpec(format!("`{}` has no layers", self.name)));
        }
        if !self.layers.iter().any(|l| l.conv) {
            return Err(Error::InvalidSpec(format!("`{}` has no convolution layer", self.name)));
        }
        for l in &self.layers {
            l.dist.validate()?;
            if let Some(c) = &l.channel_shift {
                if !(c.amplitude.is_finite() && c.cycles.is_finite() && c.phase.is_finite()) {
                    return Err(Error::InvalidSpec(format!("layer `{}` has a non-finite channel shift", l.name)));
                }
            }
            if l.numel() == 0 {
                return Err(Error::InvalidSpec(format!("layer `{}` is empty", l.name)));
            }
        }
        let total = self.total_params();
        if total < 5 * segments || total < blocks {
            return Err(Error::InvalidSpec(format!(
                "`{}` has {total} parameters; need at least {} and {blocks}",
                self.name,
                5 * segments
            )));
        }
        Ok(())
    }
}

/// Draws every layer from its distribution, in order, from one seeded
/// stream.
pub fn generate_model(spec: &ArchSpec) -> Result<ModelWeights> {
    if spec.layers.is_empty() {
        return Err(Error::InvalidSpec(format!("`{}` has no layers", spec.name)));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);
    let mut tensors = Vec::with_capacity(spec.layers.len());
    for l in &spec.layers {
        l.dist.validate()?;
        let mut values = l.dist.fill(l.numel(), &mut rng);
        if let Some(shift) = &l.channel_shift {
            shift.apply(&mut values, l.shape[0]);
        }
        tensors.push(Tensor::new(l.name.clone(), DType::F64, l.shape.clone(), values)?);
    }
    let flags = spec
        .layers
        .iter()
        .filter(|l| l.conv)
        .map(|l| l.name.clone())
        .collect();
    ModelWeights::new(tensors, Some(spec.name.clone()), Some(flags))
}

/// Zeroes the `round(rate * n)` smallest-magnitude entries of every rank >= 2
/// tensor. Ties go to the earlier index.
pub fn prune(model: &ModelWeights, rate: f64) -> Result<ModelWeights> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidArgument(format!("prune rate must be in [0, 1), got {rate}")));
    }
    let tensors = model
        .tensors()
        .iter()
        .map(|t| {
            if !TensorFilter::KernelsOnly.admits(t.meta()) {
                return Ok(t.clone());
            }
            let mut values = t.values().to_vec();
            let k = (rate * values.len() as f64).round() as usize;
            if k > 0 {
                let mut order: Vec<usize> = (0..values.len()).collect();
                let by_mag = |&a: &usize, &b: &usize| {
                    values[a].abs().total_cmp(&values[b].abs()).then(a.cmp(&b))
                };
                order.select_nth_unstable_by(k - 1, by_mag);
                for &i in &order[..k] {
                    values[i] = 0.0;
                }
            }
            t.with_values(values)
        })
        .collect::<Result<Vec<_>>>()?;
    ModelWeights::new(
        tensors,
        model.model_id().map(str::to_string),
        model.conv_layer_flags().map(<[String]>::to_vec),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TamperPlan {
    pub alpha: f64,
    pub sigma: f64,
    pub seed: u64,
}

impl TamperPlan {
    pub fn new(alpha: f64, sigma: f64, seed: u64) -> Result<Self> {
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(Error::InvalidArgument(format!("alpha must be in (0, 1], got {alpha}")));
        }
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(Error::InvalidArgument(format!("sigma must be non-negative, got {sigma}")));
        }
        Ok(TamperPlan { alpha, sigma, seed })
    }

    /// Block indices to modify, sorted.
    pub fn choose_blocks(&self, blocks: usize) -> Result<BTreeSet<usize>> {
        let count = (self.alpha * blocks as f64).round() as usize;
        if count == 0 {
            return Err(Error::EmptyTamperPlan);
        }
        let mut rng = ChaCha20Rng::seed_from_u64(self.seed);
        Ok(sample(&mut rng, blocks, count.min(blocks)).into_iter().collect())
    }
}

/// Adds N(0, sigma^2) noise to every raw parameter inside the chosen blocks.
/// Blocks follow the tamper-hash partition of the flattened parameters.
pub fn tamper(
    model: &ModelWeights,
    plan: &TamperPlan,
    blocks: usize,
) -> Result<(ModelWeights, BTreeSet<usize>)> {
    let mut flat = model.flatten(TensorFilter::All)?;
    let ranges = block_partition(flat.len(), blocks)?;
    let chosen = plan.choose_blocks(blocks)?;
    let mut rng = ChaCha20Rng::seed_from_u64(plan.seed ^ 0x5bd1_e995);
    let noise = Normal::new(0.0, plan.sigma).expect("validated sigma");
    for &b in &chosen {
        for v in &mut flat[ranges[b].clone()] {
            *v += noise.sample(&mut rng);
        }
    }
    Ok((model.with_flat(TensorFilter::All, &flat)?, chosen))
}

/// `w -> w (1 + epsilon g)` with `g` standard normal, for every parameter.
pub fn finetune_surrogate(model: &ModelWeights, epsilon: f64, seed: u64) -> Result<ModelWeights> {
    if !(epsilon > 0.0 && epsilon <= 0.1) {
        return Err(Error::InvalidArgument(format!("epsilon must be in (0, 0.1], got {epsilon}")));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let flat: Vec<f64> = model
        .flatten(TensorFilter::All)?
        .into_iter()
        .map(|w| w * (1.0 + epsilon * rng.sample::<f64, _>(rand_distr::StandardNormal)))
        .collect();
    model.with_flat(TensorFilter::All, &flat)
}

/// Layer shapes of the stand-in architectures. Bias vectors are added by the
/// suite builder.
pub mod arch {
    pub type Shape = Vec<usize>;

    fn conv(out: usize, inp: usize, k: usize) -> Shape {
        vec![out, inp, k, k]
    }

    fn fc(out: usize, inp: usize) -> Shape {
        vec![out, inp]
    }

    /// CIFAR ResNet with `n` basic blocks per stage (depth `6n + 2`).
    pub fn resnet_cifar(n: usize) -> Vec<Shape> {
        let mut layers = vec![conv(16, 3, 3)];
        let mut c = 16;
        for w in [16, 32, 64] {
            for _ in 0..n {
                layers.push(conv(w, c, 3));
                layers.push(conv(w, w, 3));
                c = w;
            }
        }
        layers.push(fc(10, 64));
        layers
    }

    pub fn resnet18() -> Vec<Shape> {
        let mut layers = vec![conv(64, 3, 3)];
        let mut c = 64;
        for w in [64, 128, 256, 512] {
            for _ in 0..2 {
                layers.push(conv(w, c, 3));
                layers.push(conv(w, w, 3));
                if c != w {
                    layers.push(conv(w, c, 1));
                }
                c = w;
            }
        }
        layers.push(fc(10, 512));
        layers
    }

    pub fn vgg11() -> Vec<Shape> {
        let mut layers = Vec::new();
        let mut c = 3;
        for w in [64, 128, 256, 256, 512, 512, 512, 512] {
            layers.push(conv(w, c, 3));
            c = w;
        }
        layers.push(fc(512, 512));
        layers.push(fc(10, 512));
        layers
    }

    pub fn densenet(blocks: &[usize], growth: usize) -> Vec<Shape> {
        let mut layers = vec![conv(2 * growth, 3, 3)];
        let mut c = 2 * growth;
        for (i, &n) in blocks.iter().enumerate() {
            for _ in 0..n {
                layers.push(conv(4 * growth, c, 1));
                layers.push(conv(growth, 4 * growth, 3));
                c += growth;
            }
            if i + 1 < blocks.len() {
                layers.push(conv(c / 2, c, 1));
                c /= 2;
            }
        }
        layers.push(fc(10, c));
        layers
    }

    pub fn lenet5() -> Vec<Shape> {
        vec![conv(6, 1, 5), conv(16, 6, 5), fc(120, 400), fc(84, 120), fc(10, 84)]
    }

    pub fn mnist_cnn() -> Vec<Shape> {
        vec![conv(16, 1, 3), conv(32, 16, 3), conv(32, 32, 3), fc(128, 512), fc(10, 128)]
    }
}

/// Weight family of a stand-in model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Family {
    Gaussian,
    Uniform,
}

/// Builds a stand-in from kernel shapes.
///
/// A seeded subset of layers ("hot" layers, about a third of the kernel
/// parameters) gets full scale; the rest are drawn at half scale, so the
/// largest magnitudes come from the hot layers. Every layer leans by a
/// seeded offset plus a slow wave over its output channels, which gives
/// each model its own feature profile. Each kernel is followed by a small
/// Gaussian bias.
pub fn stand_in(name: &str, shapes: &[arch::Shape], family: Family, seed: u64) -> ArchSpec {
    let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let total: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
    let hot_target = rng.gen_range(0.25..0.4) * total as f64;
    let mut hot = vec![false; shapes.len()];
    let mut order: Vec<usize> = (0..shapes.len()).collect();
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
    let mut acc = 0.0;
    for i in order {
        let n = shapes[i].iter().product::<usize>() as f64;
        if acc + n <= hot_target * 1.25 || acc == 0.0 {
            hot[i] = true;
            acc += n;
        }
        if acc >= hot_target {
            break;
        }
    }

    let sd = 0.05;
    let mut layers = Vec::with_capacity(2 * shapes.len());
    for (i, shape) in shapes.iter().enumerate() {
        let lean = rng.gen_range(-0.5..0.5);
        let wave = ChannelShift {
            amplitude: rng.gen_range(0.25..0.5),
            cycles: rng.gen_range(0.5..3.0),
            phase: rng.gen_range(0.0..1.0),
        };
        let scale = if hot[i] { 1.0 } else { 0.5 };
        let (dist, unit) = match family {
            Family::Gaussian => {
                let unit = 0.8 * sd * scale;
                (Distribution::Gaussian { mean: lean * unit, std: sd * scale }, unit)
            }
            Family::Uniform => {
                let a = sd * 3f64.sqrt() * scale;
                let unit = 0.2 * a;
                (Distribution::Uniform { low: -a + lean * unit, high: a + lean * unit }, unit)
            }
        };
        layers.push(LayerSpec {
            name: format!("layer{i}.weight"),
            shape: shape.clone(),
            conv: shape.len() == 4,
            dist,
            channel_shift: Some(ChannelShift {
                amplitude: wave.amplitude * unit,
                ..wave
            }),
        });
        layers.push(LayerSpec {
            name: format!("layer{i}.bias"),
            shape: vec![shape[0]],
            conv: false,
            dist: Distribution::Gaussian { mean: 0.0, std: 0.01 },
            channel_shift: None,
        });
    }
    ArchSpec {
        name: name.to_string(),
        layers,
        seed,
    }
}

/// Whether a suite member is MNIST-scale (uses the small block profile).
pub fn is_small(spec: &ArchSpec) -> bool {
    spec.total_params() < 500_000
}

/// Eight stand-ins spanning about 6e4 to 1e7 parameters, half Gaussian and
/// half uniform.
pub fn default_suite() -> Vec<ArchSpec> {
    let members: [(&str, Vec<arch::Shape>, Family); 8] = [
        ("lenet5", arch::lenet5(), Family::Uniform),
        ("mnist-cnn", arch::mnist_cnn(), Family::Gaussian),
        ("resnet20", arch::resnet_cifar(3), Family::Gaussian),
        ("resnet56", arch::resnet_cifar(9), Family::Uniform),
        ("resnet110", arch::resnet_cifar(18), Family::Gaussian),
        ("densenet-bc", arch::densenet(&[6, 12, 24, 16], 32), Family::Uniform),
        ("vgg11", arch::vgg11(), Family::Gaussian),
        ("resnet18", arch::resnet18(), Family::Uniform),
    ];
    members
        .into_iter()
        .enumerate()
        .map(|(i, (name, shapes, family))| stand_in(name, &shapes, family, 2000 + i as u64))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hos_features::{kurtosis, skewness};
    use crate::tensor_store::encode_container;

    fn single(dist: Distribution, n: usize, seed: u64) -> ArchSpec {
        ArchSpec {
            name: "t".into(),
            layers: vec![LayerSpec {
                name: "w".into(),
                shape: vec![n, 1, 1, 1],
                conv: true,
                dist,
                channel_shift: None,
            }],
            seed,
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = &default_suite()[0];
        let a = encode_container(&generate_model(spec).unwrap());
        let b = encode_container(&generate_model(spec).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn layer_moments_follow_distribution() {
        let u = generate_model(&single(Distribution::Uniform { low: -1.0, high: 1.0 }, 200_000, 1)).unwrap();
        let v = u.tensors()[0].values();
        assert!(skewness(v).unwrap().abs() < 0.02);
        assert!((kurtosis(v).unwrap() - 1.8).abs() < 0.02);
        let g = generate_model(&single(Distribution::Gaussian { mean: 0.0, std: 2.0 }, 200_000, 2)).unwrap();
        assert!((kurtosis(g.tensors()[0].values()).unwrap() - 3.0).abs() < 0.05);
    }

    #[test]
    fn prune_example_and_counts() {
        let t = Tensor::new("w", DType::F64, vec![2, 2], vec![1.0, -2.0, 3.0, -4.0]).unwrap();
        let m = ModelWeights::new(vec![t], None, None).unwrap();
        assert_eq!(prune(&m, 0.5).unwrap().tensors()[0].values(), &[0.0, 0.0, 3.0, -4.0]);
        assert!(prune(&m, 0.0).unwrap().bit_eq(&m));
        assert!(prune(&m, 1.0).is_err());

        let big = generate_model(&single(Distribution::Gaussian { mean: 0.0, std: 1.0 }, 1001, 3)).unwrap();
        for rate in [0.1, 0.33, 0.6] {
            let p = prune(&big, rate).unwrap();
            let nz = p.tensors()[0].values().iter().filter(|v| **v != 0.0).count();
            let expect = ((1.0 - rate) * 1001.0).ceil();
            assert!((nz as f64 - expect).abs() <= 1.0, "{rate} {nz}");
        }
    }

    #[test]
    fn prune_skips_vectors() {
        let w = Tensor::new("w", DType::F64, vec![2, 2], vec![1.0, -2.0, 3.0, -4.0]).unwrap();
        let b = Tensor::new("b", DType::F64, vec![2], vec![0.1, -0.2]).unwrap();
        let m = ModelWeights::new(vec![w, b], None, None).unwrap();
        assert_eq!(prune(&m, 0.5).unwrap().tensors()[1].values(), &[0.1, -0.2]);
    }

    #[test]
    fn tamper_touches_only_chosen_blocks() {
        let m = generate_model(&single(Distribution::Uniform { low: -1.0, high: 1.0 }, 1000, 4)).unwrap();
        let plan = TamperPlan::new(0.1, 0.1, 9).unwrap();
        let (t, chosen) = tamper(&m, &plan, 100).unwrap();
        assert_eq!(chosen.len(), 10);
        let a = m.flatten(TensorFilter::All).unwrap();
        let b = t.flatten(TensorFilter::All).unwrap();
        for (block, r) in block_partition(1000, 100).unwrap().into_iter().enumerate() {
            let same = r.clone().all(|i| a[i].to_bits() == b[i].to_bits());
            assert_eq!(same, !chosen.contains(&block), "block {block}");
        }

        let zero = TamperPlan::new(0.1, 0.0, 9).unwrap();
        let (u, chosen) = tamper(&m, &zero, 100).unwrap();
        assert!(u.bit_eq(&m));
        assert_eq!(chosen.len(), 10);

        let tiny = TamperPlan::new(0.001, 0.1, 9).unwrap();
        assert!(matches!(tamper(&m, &tiny, 100), Err(Error::EmptyTamperPlan)));
    }

    #[test]
    fn finetune_is_small_and_seeded() {
        let m = generate_model(&single(Distribution::Gaussian { mean: 0.0, std: 1.0 }, 500, 5)).unwrap();
        let a = finetune_surrogate(&m, 0.01, 1).unwrap();
        let b = finetune_surrogate(&m, 0.01, 1).unwrap();
        assert!(a.bit_eq(&b));
        for (x, y) in m.tensors()[0].values().iter().zip(a.tensors()[0].values()) {
            assert_eq!(x.signum(), y.signum());
            assert!((x - y).abs() <= 0.06 * x.abs());
        }
        assert!(finetune_surrogate(&m, 0.0, 1).is_err());
    }

    #[test]
    fn suite_spans_sizes() {
        let suite = default_suite();
        assert_eq!(suite.len(), 8);
        let sizes: Vec<usize> = suite.iter().map(ArchSpec::total_params).collect();
        let min = *sizes.iter().min().unwrap();
        let max = *sizes.iter().max().unwrap();
        assert!((50_000..=80_000).contains(&min), "{sizes:?}");
        assert!((8_000_000..=15_000_000).contains(&max), "{sizes:?}");
        for s in &suite {
            s.validate(50, if is_small(s) { 100 } else { 450 }).unwrap();
        }
    }
}
