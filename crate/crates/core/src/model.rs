//! Full models: the `CNN-Gk-l` baseline and the `CNN-GAT-Gk-l` graph model.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Mode, ParamId, ParamKind, ParamStore, Tape, Var};
use crate::cnn::{init_uniform, PendingStats, ShallowCnn, ShallowCnnConfig};
use crate::error::{Error, Result};
use crate::gat::{attention_mask, GatHead, CLASSES};
use crate::patch_graph::{add_self_loops, extract_patches, GraphTopology, GrayImage, PatchPlan, TopologyKind};
use crate::tensor::{softmax_rows, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ModelKind {
    /// Shallow CNN on the whole image plus one linear layer.
    Cnn,
    /// Shallow CNN per patch, graph attention, readout, classifier.
    CnnGat,
}

impl std::str::FromStr for ModelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cnn" => Ok(Self::Cnn),
            "cnn-gat" => Ok(Self::CnnGat),
            other => Err(Error::Config(format!("unknown model kind {other:?}"))),
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Cnn => "cnn",
            Self::CnnGat => "cnn-gat",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub groups: usize,
    pub image_h: usize,
    pub image_w: usize,
    pub patch_h: usize,
    pub patch_w: usize,
    pub grid_n: usize,
    pub grid_m: usize,
    pub alpha: f64,
    pub beta: f64,
    pub topology: TopologyKind,
}

impl ModelConfig {
    /// Name in the `CNN-G2-16` / `CNN-GAT-G2-16` style.
    pub fn name(&self) -> String {
        let l = 8usize << (self.groups - 1);
        match self.kind {
            ModelKind::Cnn => format!("CNN-G{}-{l}", self.groups),
            ModelKind::CnnGat => format!("CNN-GAT-G{}-{l}", self.groups),
        }
    }

    pub fn to_meta(&self) -> Vec<(String, String)> {
        [
            ("model", self.kind.to_string()),
            ("groups", self.groups.to_string()),
            ("image_h", self.image_h.to_string()),
            ("image_w", self.image_w.to_string()),
            ("patch_h", self.patch_h.to_string()),
            ("patch_w", self.patch_w.to_string()),
            ("grid_n", self.grid_n.to_string()),
            ("grid_m", self.grid_m.to_string()),
            ("alpha", self.alpha.to_string()),
            ("beta", self.beta.to_string()),
            ("topology", self.topology.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    pub fn from_meta(meta: &[(String, String)]) -> Result<Self> {
        let map: BTreeMap<&str, &str> = meta.iter().map(|(k, v)| (k.as_str(), v.as_str())).collect();
        let get = |k: &str| {
            map.get(k)
                .copied()
                .ok_or_else(|| Error::Checkpoint(format!("missing meta key {k}")))
        };
        let num = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|e| Error::Checkpoint(format!("meta {k}: {e}")))
        };
        let real = |k: &str| -> Result<f64> {
            get(k)?
                .parse()
                .map_err(|e| Error::Checkpoint(format!("meta {k}: {e}")))
        };
        Ok(Self {
            kind: get("model")?.parse()?,
            groups: num("groups")?,
            image_h: num("image_h")?,
            image_w: num("image_w")?,
            patch_h: num("patch_h")?,
            patch_w: num("patch_w")?,
            grid_n: num("grid_n")?,
            grid_m: num("grid_m")?,
            alpha: real("alpha")?,
            beta: real("beta")?,
            topology: get("topology")?.parse()?,
        })
    }

    pub fn plan(&self) -> Result<PatchPlan> {
        PatchPlan::new(
            self.image_h,
            self.image_w,
            self.patch_h,
            self.patch_w,
            self.grid_n,
            self.grid_m,
            self.alpha,
            self.beta,
        )
    }
}

#[derive(Debug, Clone)]
pub enum ModelHead {
    Linear { weight: ParamId, bias: ParamId },
    Gat(GatHead),
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub cnn: ShallowCnn,
    pub head: ModelHead,
    plan: Option<PatchPlan>,
    topology: Option<GraphTopology>,
}

/// Handles produced by [`Model::logits`].
pub struct ForwardPass<T> {
    pub logits: Var,
    /// Shared-CNN output, one row per patch (or per image for the baseline).
    pub features: Var,
    /// Batch-norm statistics to fold into the running averages.
    pub pending: Vec<PendingStats<T>>,
}

/// Tensors a forward pass consumes: whole images for the baseline,
/// stacked raster-order patches for the graph model.
pub struct ModelInput<T: Scalar> {
    pub tensor: Tensor<T>,
    pub batch: usize,
}

impl Model {
    /// Register every tensor in `store`, initialized from `seed`.
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, config: ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cnn_config = ShallowCnnConfig::new(config.groups)?;
        let l = cnn_config.output_dim();
        let (plan, topology) = match config.kind {
            ModelKind::Cnn => {
                cnn_config.spatial_sizes(config.image_h, config.image_w)?;
                (None, None)
            }
            ModelKind::CnnGat => {
                let plan = config.plan()?;
                cnn_config.spatial_sizes(plan.patch_h, plan.patch_w)?;
                let topo = add_self_loops(&GraphTopology::build(config.topology, plan.n, plan.m));
                (Some(plan), Some(topo))
            }
        };
        let cnn = ShallowCnn::new(store, cnn_config, &mut rng)?;
        let head = match config.kind {
            ModelKind::Cnn => ModelHead::Linear {
                weight: store.add("cls.fc.w", init_uniform(&[l, CLASSES], l, &mut rng), ParamKind::Trainable)?,
                bias: store.add("cls.fc.b", Tensor::zeros(&[CLASSES]), ParamKind::Trainable)?,
            },
            ModelKind::CnnGat => ModelHead::Gat(GatHead::new(store, l, &mut rng)?),
        };
        Ok(Self {
            config,
            cnn,
            head,
            plan,
            topology,
        })
    }

    pub fn plan(&self) -> Option<&PatchPlan> {
        self.plan.as_ref()
    }

    /// Self-looped topology of the graph model.
    pub fn topology(&self) -> Option<&GraphTopology> {
        self.topology.as_ref()
    }

    pub fn check_image(&self, image: &GrayImage) -> Result<()> {
        if image.height() != self.config.image_h || image.width() != self.config.image_w {
            return Err(Error::Config(format!(
                "model expects {}x{} images, got {}x{}",
                self.config.image_h,
                self.config.image_w,
                image.height(),
                image.width()
            )));
        }
        Ok(())
    }

    pub fn prepare<T: Scalar>(&self, images: &[&GrayImage]) -> Result<ModelInput<T>> {
        if images.is_empty() {
            return Err(Error::Config("empty image batch".into()));
        }
        let mut data = Vec::new();
        let shape = match &self.plan {
            None => {
                for img in images {
                    self.check_image(img)?;
                    data.extend(img.pixels().iter().map(|&p| T::from_f64(p as f64)));
                }
                [images.len(), 1, self.config.image_h, self.config.image_w]
            }
            Some(plan) => {
                for img in images {
                    self.check_image(img)?;
                    let grid = extract_patches(img, plan)?;
                    for p in grid.patches() {
                        data.extend(p.iter().map(|&v| T::from_f64(v as f64)));
                    }
                }
                [images.len() * plan.node_count(), 1, plan.patch_h, plan.patch_w]
            }
        };
        Ok(ModelInput {
            tensor: Tensor::new(&shape, data)?,
            batch: images.len(),
        })
    }

    /// Logits `[B,2]` for prepared input. `topology` overrides the model's
    /// own graph (must be self-looped); ignored by the baseline.
    pub fn logits<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        input: ModelInput<T>,
        mode: Mode,
        topology: Option<&GraphTopology>,
    ) -> Result<ForwardPass<T>> {
        let x = tape.constant(input.tensor);
        let (features, pending) = self.cnn.forward(tape, store, x, mode)?;
        let logits = match &self.head {
            ModelHead::Linear { weight, bias } => {
                let w = tape.param(store, *weight);
                let b = tape.param(store, *bias);
                tape.linear(features, w, Some(b))?
            }
            ModelHead::Gat(head) => {
                let topo = topology
                    .or(self.topology.as_ref())
                    .expect("graph models always carry a topology");
                let nodes = topo.node_count();
                let l = self.cnn.config.output_dim();
                if tape.value(features).shape()[0] != input.batch * nodes {
                    return Err(Error::Shape {
                        op: "model_forward",
                        detail: format!("{} patches for {} graphs of {nodes} nodes", tape.value(features).shape()[0], input.batch),
                    });
                }
                let h = tape.reshape(features, &[input.batch, nodes, l])?;
                let mask = attention_mask(topo)?;
                head.forward(tape, store, h, &mask)?
            }
        };
        Ok(ForwardPass {
            logits,
            features,
            pending,
        })
    }

    /// Eval-mode class probabilities, one `[p_cover, p_stego]` per image.
    pub fn predict<T: Scalar>(&self, store: &ParamStore<T>, images: &[&GrayImage]) -> Result<Vec<[T; 2]>> {
        let input = self.prepare(images)?;
        let mut tape = Tape::new();
        let pass = self.logits(&mut tape, store, input, Mode::Eval, None)?;
        Ok(softmax_rows(tape.value(pass.logits).data(), CLASSES)
            .chunks(CLASSES)
            .map(|r| [r[0], r[1]])
            .collect())
    }

    /// Trainable tensors, in registration order.
    pub fn trainable_ids(&self) -> Vec<ParamId> {
        let mut ids = self.cnn.trainable_ids();
        match &self.head {
            ModelHead::Linear { weight, bias } => ids.extend([*weight, *bias]),
            ModelHead::Gat(h) => ids.extend(h.trainable_ids()),
        }
        ids
    }
}

/// Probabilities for a single image.
pub fn model_forward<T: Scalar>(image: &GrayImage, model: &Model, store: &ParamStore<T>) -> Result<[T; 2]> {
    Ok(model.predict(store, &[image])?[0])
}

/// Predicted label with ties going to class 0 (cover).
pub fn predicted_label<T: Scalar>(probs: &[T; 2]) -> usize {
    usize::from(probs[1] > probs[0])
}
