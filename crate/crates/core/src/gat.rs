//! Single-head graph attention layers, average readout and the two-layer
//! classifier head.

use std::rc::Rc;

use rand::Rng;

use crate::autodiff::{Activation, ParamId, ParamKind, ParamStore, Tape, Var};
use crate::cnn::init_uniform;
use crate::error::{Error, Result};
use crate::patch_graph::GraphTopology;
use crate::tensor::{softmax_rows, Scalar, Tensor};

pub const GAT_LAYERS: usize = 2;
pub const HIDDEN_WIDTH: usize = 64;
pub const CLASSES: usize = 2;

#[derive(Debug, Clone)]
pub struct GatLayer {
    pub wproj: ParamId,
    pub attn: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl GatLayer {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        prefix: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let wproj = store.add(
            &format!("{prefix}.wproj"),
            init_uniform(&[in_dim, out_dim], in_dim, rng),
            ParamKind::Trainable,
        )?;
        let attn = store.add(
            &format!("{prefix}.attn"),
            init_uniform(&[2 * out_dim], 2 * out_dim, rng),
            ParamKind::Trainable,
        )?;
        Ok(Self {
            wproj,
            attn,
            in_dim,
            out_dim,
        })
    }
}

/// Neighbourhood mask of a self-looped topology, row-major.
pub fn attention_mask(topology: &GraphTopology) -> Result<Rc<Vec<bool>>> {
    if let Some(i) = (0..topology.node_count()).find(|&i| !topology.has_edge(i, i)) {
        return Err(Error::MissingSelfLoop(i));
    }
    Ok(Rc::new(topology.adjacency().to_vec()))
}

/// Output of one attention layer.
pub struct GatOutput {
    pub features: Var,
    /// Attention coefficients `[B,N,N]`.
    pub attention: Var,
}

/// `h: [B,N,l_in] -> [B,N,l_out]`:
/// `h'_i = act(sum_j alpha_ij W h_j)` with
/// `alpha_i = softmax_j(leaky_relu(a . [W h_i | W h_j]))` over the neighbours of `i`.
pub fn gat_layer_forward<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    layer: &GatLayer,
    h: Var,
    mask: &Rc<Vec<bool>>,
    activation: Option<Activation>,
) -> Result<GatOutput> {
    let (b, n) = match tape.value(h).shape() {
        [b, n, d] if *d == layer.in_dim => (*b, *n),
        s => {
            return Err(Error::Shape {
                op: "gat_layer_forward",
                detail: format!("expected [B,N,{}], got {s:?}", layer.in_dim),
            })
        }
    };
    let flat = tape.reshape(h, &[b * n, layer.in_dim])?;
    let w = tape.param(store, layer.wproj);
    let wh = tape.linear(flat, w, None)?;
    let wh = tape.reshape(wh, &[b, n, layer.out_dim])?;
    let a = tape.param(store, layer.attn);
    let scores = tape.pair_scores(wh, a)?;
    let scores = tape.leaky_relu(scores, Activation::LEAKY_SLOPE)?;
    let attention = tape.masked_softmax(scores, mask.clone())?;
    let mut out = tape.batch_matmul(attention, wh)?;
    if let Some(act) = activation {
        out = tape.activation(out, act)?;
    }
    Ok(GatOutput {
        features: out,
        attention,
    })
}

/// Average of the node representations, `[B,N,d] -> [B,d]`.
pub fn readout<T: Scalar>(tape: &mut Tape<T>, h: Var) -> Result<Var> {
    tape.mean_axis1(h)
}

#[derive(Debug, Clone)]
pub struct ClassifierHead {
    pub fc1_w: ParamId,
    pub fc1_b: ParamId,
    pub fc2_w: ParamId,
    pub fc2_b: ParamId,
}

impl ClassifierHead {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, in_dim: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            fc1_w: store.add("head.fc1.w", init_uniform(&[in_dim, HIDDEN_WIDTH], in_dim, rng), ParamKind::Trainable)?,
            fc1_b: store.add("head.fc1.b", Tensor::zeros(&[HIDDEN_WIDTH]), ParamKind::Trainable)?,
            fc2_w: store.add(
                "head.fc2.w",
                init_uniform(&[HIDDEN_WIDTH, CLASSES], HIDDEN_WIDTH, rng),
                ParamKind::Trainable,
            )?,
            fc2_b: store.add("head.fc2.b", Tensor::zeros(&[CLASSES]), ParamKind::Trainable)?,
        })
    }
}

/// Graph embedding `[B,d]` to class logits `[B,2]` (relu hidden layer).
pub fn classify_logits<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    head: &ClassifierHead,
    g: Var,
) -> Result<Var> {
    let w1 = tape.param(store, head.fc1_w);
    let b1 = tape.param(store, head.fc1_b);
    let hidden = tape.linear(g, w1, Some(b1))?;
    let hidden = tape.relu(hidden)?;
    let w2 = tape.param(store, head.fc2_w);
    let b2 = tape.param(store, head.fc2_b);
    tape.linear(hidden, w2, Some(b2))
}

/// Class probabilities for graph embeddings `[B,d]`.
pub fn classify<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    head: &ClassifierHead,
    g: Var,
) -> Result<Vec<T>> {
    let logits = classify_logits(tape, store, head, g)?;
    Ok(softmax_rows(tape.value(logits).data(), CLASSES))
}

/// Two attention layers, readout and classifier.
#[derive(Debug, Clone)]
pub struct GatHead {
    pub layers: [GatLayer; GAT_LAYERS],
    pub classifier: ClassifierHead,
}

impl GatHead {
    /// Hidden dimensions default to the input feature dimension.
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, feature_dim: usize, rng: &mut R) -> Result<Self> {
        Self::with_dims(store, feature_dim, feature_dim, feature_dim, rng)
    }

    pub fn with_dims<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        l: usize,
        d1: usize,
        d2: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let first = GatLayer::new(store, "gat.layer1", l, d1, rng)?;
        let second = GatLayer::new(store, "gat.layer2", d1, d2, rng)?;
        let classifier = ClassifierHead::new(store, d2, rng)?;
        Ok(Self {
            layers: [first, second],
            classifier,
        })
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        let c = &self.classifier;
        self.layers
            .iter()
            .flat_map(|l| [l.wproj, l.attn])
            .chain([c.fc1_w, c.fc1_b, c.fc2_w, c.fc2_b])
            .collect()
    }

    /// Node features `[B,N,l]` to logits `[B,2]`. ELU between the layers,
    /// identity after the second.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        features: Var,
        mask: &Rc<Vec<bool>>,
    ) -> Result<Var> {
        let h1 = gat_layer_forward(tape, store, &self.layers[0], features, mask, Some(Activation::Elu(Activation::ELU_ALPHA)))?;
        let h2 = gat_layer_forward(tape, store, &self.layers[1], h1.features, mask, None)?;
        let g = readout(tape, h2.features)?;
        classify_logits(tape, store, &self.classifier, g)
    }
}
