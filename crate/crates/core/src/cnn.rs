//! Shallow CNN feature extractor: a fixed high-pass filter followed by
//! `k` conv-pooling groups.
//!
//! | group | conv          | after conv             | pooling           |
//! |-------|---------------|------------------------|-------------------|
//! | 1     | 5x5, 1 -> 8   | abs, batch norm, tanh  | avg 5/2 or global |
//! | 2     | 5x5, 8 -> 16  | batch norm, tanh       | avg 5/2 or global |
//! | 3..5  | 1x1, doubling | batch norm, relu       | avg 5/2 or global |
//!
//! The last group always pools globally, so group `k` emits `8 * 2^(k-1)`
//! features per patch.

use rand::Rng;

use crate::autodiff::{Activation, BatchStats, Mode, ParamId, ParamKind, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// 5x5 "KV" high-pass kernel, already divided by 12.
pub const KV_KERNEL: [[f64; 5]; 5] = [
    [-1.0 / 12.0, 2.0 / 12.0, -2.0 / 12.0, 2.0 / 12.0, -1.0 / 12.0],
    [2.0 / 12.0, -6.0 / 12.0, 8.0 / 12.0, -6.0 / 12.0, 2.0 / 12.0],
    [-2.0 / 12.0, 8.0 / 12.0, -12.0 / 12.0, 8.0 / 12.0, -2.0 / 12.0],
    [2.0 / 12.0, -6.0 / 12.0, 8.0 / 12.0, -6.0 / 12.0, 2.0 / 12.0],
    [-1.0 / 12.0, 2.0 / 12.0, -2.0 / 12.0, 2.0 / 12.0, -1.0 / 12.0],
];

pub const MAX_GROUPS: usize = 5;
pub const POOL_WINDOW: usize = 5;
pub const POOL_STRIDE: usize = 2;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShallowCnnConfig {
    pub groups: usize,
}

impl ShallowCnnConfig {
    pub fn new(groups: usize) -> Result<Self> {
        if !(1..=MAX_GROUPS).contains(&groups) {
            return Err(Error::Config(format!("group count {groups} outside 1..={MAX_GROUPS}")));
        }
        Ok(Self { groups })
    }

    pub fn output_dim(&self) -> usize {
        channels_after(self.groups)
    }

    /// Short name such as `CNN-G3-32`.
    pub fn name(&self) -> String {
        format!("CNN-G{}-{}", self.groups, self.output_dim())
    }

    /// Spatial size entering each group for an `h x w` patch; fails when a
    /// local pooling window would not fit.
    pub fn spatial_sizes(&self, h: usize, w: usize) -> Result<Vec<(usize, usize)>> {
        let mut sizes = Vec::with_capacity(self.groups);
        let (mut sh, mut sw) = (h, w);
        for g in 1..=self.groups {
            if sh == 0 || sw == 0 {
                return Err(Error::Config(format!("{h}x{w} patch vanishes before group {g}")));
            }
            sizes.push((sh, sw));
            if g < self.groups {
                if sh < POOL_WINDOW || sw < POOL_WINDOW {
                    return Err(Error::Config(format!(
                        "{h}x{w} patch is {sh}x{sw} at group {g}, too small for {POOL_WINDOW}x{POOL_WINDOW} pooling"
                    )));
                }
                sh = (sh - POOL_WINDOW) / POOL_STRIDE + 1;
                sw = (sw - POOL_WINDOW) / POOL_STRIDE + 1;
            }
        }
        Ok(sizes)
    }
}

fn channels_after(group: usize) -> usize {
    8 << (group - 1)
}

fn group_kernel(group: usize) -> usize {
    if group <= 2 {
        5
    } else {
        1
    }
}

/// Uniform `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` initialization.
pub fn init_uniform<T: Scalar, R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| T::from_f64(rng.gen_range(-bound..=bound)))
        .collect();
    Tensor::new(shape, data).expect("length follows from shape")
}

#[derive(Debug, Clone)]
pub struct ConvGroup {
    pub index: usize,
    pub conv: ParamId,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub activation: Activation,
    pub abs_first: bool,
}

/// Running-statistics update produced by a train-mode forward pass.
#[derive(Debug, Clone)]
pub struct PendingStats<T> {
    running_mean: ParamId,
    running_var: ParamId,
    stats: BatchStats<T>,
}

/// Blend batch statistics into the running averages with [`BN_MOMENTUM`].
pub fn apply_running_stats<T: Scalar>(store: &mut ParamStore<T>, pending: &[PendingStats<T>]) {
    let mom = T::from_f64(BN_MOMENTUM);
    let keep = T::one() - mom;
    for p in pending {
        for (r, b) in store
            .get_mut(p.running_mean)
            .value
            .data_mut()
            .iter_mut()
            .zip(&p.stats.mean)
        {
            *r = keep * *r + mom * *b;
        }
        for (r, b) in store
            .get_mut(p.running_var)
            .value
            .data_mut()
            .iter_mut()
            .zip(&p.stats.var)
        {
            *r = keep * *r + mom * *b;
        }
    }
}

#[derive(Debug, Clone)]
pub struct ShallowCnn {
    pub config: ShallowCnnConfig,
    pub hpf: ParamId,
    pub groups: Vec<ConvGroup>,
}

impl ShallowCnn {
    /// Register the extractor's tensors under `cnn.*` names.
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        config: ShallowCnnConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let hpf_data: Vec<f64> = KV_KERNEL.iter().flatten().copied().collect();
        let hpf = store.add(
            "cnn.hpf.w",
            Tensor::from_f64(&[1, 1, 5, 5], &hpf_data)?,
            ParamKind::Frozen,
        )?;
        let mut groups = Vec::with_capacity(config.groups);
        let mut c_in = 1;
        for g in 1..=config.groups {
            let c_out = channels_after(g);
            let k = group_kernel(g);
            let prefix = format!("cnn.group{g}");
            let conv = store.add(
                &format!("{prefix}.conv.w"),
                init_uniform(&[c_out, c_in, k, k], c_in * k * k, rng),
                ParamKind::Trainable,
            )?;
            let gamma = store.add(&format!("{prefix}.bn.gamma"), Tensor::full(&[c_out], T::one()), ParamKind::Trainable)?;
            let beta = store.add(&format!("{prefix}.bn.beta"), Tensor::zeros(&[c_out]), ParamKind::Trainable)?;
            let running_mean = store.add(&format!("{prefix}.bn.rmean"), Tensor::zeros(&[c_out]), ParamKind::Buffer)?;
            let running_var = store.add(&format!("{prefix}.bn.rvar"), Tensor::full(&[c_out], T::one()), ParamKind::Buffer)?;
            groups.push(ConvGroup {
                index: g,
                conv,
                gamma,
                beta,
                running_mean,
                running_var,
                activation: if g <= 2 { Activation::Tanh } else { Activation::Relu },
                abs_first: g == 1,
            });
            c_in = c_out;
        }
        Ok(Self {
            config,
            hpf,
            groups,
        })
    }

    /// Residual map of the fixed high-pass filter, spatial size preserved.
    pub fn hpf_forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, patches: Var) -> Result<Var> {
        let k = tape.param(store, self.hpf);
        tape.conv2d(patches, k, None, 1, 2)
    }

    /// `[B,1,h,w]` patches to `[B,l]` features.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        patches: Var,
        mode: Mode,
    ) -> Result<(Var, Vec<PendingStats<T>>)> {
        let shape = tape.value(patches).shape().to_vec();
        if shape.len() != 4 || shape[1] != 1 {
            return Err(Error::Shape {
                op: "extract_features",
                detail: format!("expected [B,1,h,w], got {shape:?}"),
            });
        }
        self.config.spatial_sizes(shape[2], shape[3])?;
        let mut x = self.hpf_forward(tape, store, patches)?;
        let mut pending = Vec::new();
        for g in &self.groups {
            let k = tape.param(store, g.conv);
            let pad = group_kernel(g.index) / 2;
            x = tape.conv2d(x, k, None, 1, pad)?;
            if g.abs_first {
                x = tape.abs(x)?;
            }
            let gamma = tape.param(store, g.gamma);
            let beta = tape.param(store, g.beta);
            let (y, stats) = tape.batch_norm(
                x,
                gamma,
                beta,
                (
                    store.get(g.running_mean).value.data(),
                    store.get(g.running_var).value.data(),
                ),
                mode,
            )?;
            if let Some(stats) = stats {
                pending.push(PendingStats {
                    running_mean: g.running_mean,
                    running_var: g.running_var,
                    stats,
                });
            }
            x = tape.activation(y, g.activation)?;
            x = if g.index == self.config.groups {
                tape.global_avg_pool(x)?
            } else {
                tape.avg_pool2d(x, POOL_WINDOW, POOL_STRIDE)?
            };
        }
        Ok((x, pending))
    }

    /// Trainable tensors owned by the extractor.
    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.groups
            .iter()
            .flat_map(|g| [g.conv, g.gamma, g.beta])
            .collect()
    }
}

/// Eval-mode extractor bound to a parameter store.
pub struct BoundCnn<'a> {
    pub cnn: &'a ShallowCnn,
    pub store: &'a ParamStore<f32>,
}

impl crate::patch_graph::FeatureExtractor for BoundCnn<'_> {
    fn extract(&self, patches: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut tape = Tape::new();
        let x = tape.constant(patches.clone());
        let (f, _) = self.cnn.forward(&mut tape, self.store, x, Mode::Eval)?;
        Ok(tape.value(f).clone())
    }
}

#[cfg(test)]
#[allow(clippy::needless_range_loop)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn kv_kernel_is_zero_sum_and_symmetric() {
        let s: f64 = KV_KERNEL.iter().flatten().sum();
        assert!(s.abs() < 1e-15);
        for i in 0..5 {
            for j in 0..5 {
                assert_eq!(KV_KERNEL[i][j], KV_KERNEL[j][i]);
                assert_eq!(KV_KERNEL[i][j], KV_KERNEL[4 - i][j]);
            }
        }
        assert_eq!(KV_KERNEL[2][2], -1.0);
    }

    #[test]
    fn output_dims_and_names() {
        let names: Vec<String> = (1..=5).map(|k| ShallowCnnConfig::new(k).unwrap().name()).collect();
        assert_eq!(names, ["CNN-G1-8", "CNN-G2-16", "CNN-G3-32", "CNN-G4-64", "CNN-G5-128"]);
        assert!(ShallowCnnConfig::new(0).is_err());
        assert!(ShallowCnnConfig::new(6).is_err());
    }

    #[test]
    fn spatial_validation() {
        let c = ShallowCnnConfig::new(3).unwrap();
        assert_eq!(c.spatial_sizes(64, 64).unwrap(), vec![(64, 64), (30, 30), (13, 13)]);
        assert!(ShallowCnnConfig::new(5).unwrap().spatial_sizes(16, 16).is_err());
        assert!(ShallowCnnConfig::new(1).unwrap().spatial_sizes(1, 1).is_ok());
    }

    #[test]
    fn parameter_names() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        ShallowCnn::new(&mut store, ShallowCnnConfig::new(2).unwrap(), &mut rng).unwrap();
        for name in [
            "cnn.group1.conv.w",
            "cnn.group1.bn.gamma",
            "cnn.group1.bn.beta",
            "cnn.group1.bn.rmean",
            "cnn.group1.bn.rvar",
            "cnn.group2.conv.w",
        ] {
            assert!(store.id(name).is_some(), "{name}");
        }
        assert_eq!(store.get(store.id("cnn.group2.conv.w").unwrap()).value.shape(), &[16, 8, 5, 5]);
    }
}
