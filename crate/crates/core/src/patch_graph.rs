//! Image-to-graph translation.
//!
//! An `h x w` image is covered by an `n x m` grid of `h_p x w_p` patches.
//! Neighbouring patches in a grid row start `(1 - alpha) * w_p` pixels apart,
//! neighbouring grid rows `(1 - beta) * h_p` pixels apart, so `alpha` and
//! `beta` are the overlap fractions. All offsets reported by [`PatchPlan`]
//! are 1-based `(row, col)` pairs. Patch `(u, v)` becomes node
//! `(u - 1) * m + (v - 1)` (0-based).

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// 8-bit grayscale image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    height: usize,
    width: usize,
    pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(height: usize, width: usize, pixels: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 || pixels.len() != height * width {
            return Err(Error::Config(format!(
                "{} pixels for a {height}x{width} image",
                pixels.len()
            )));
        }
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    pub fn filled(height: usize, width: usize, value: u8) -> Self {
        Self {
            height,
            width,
            pixels: vec![value; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [u8] {
        &mut self.pixels
    }

    /// 0-based access.
    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.pixels[row * self.width + col]
    }

    /// Pixels as reals, unscaled (0..=255), shaped `[1,1,h,w]`.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::new(
            &[1, 1, self.height, self.width],
            self.pixels.iter().map(|&p| T::from_f64(p as f64)).collect(),
        )
        .expect("dimensions checked at construction")
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut out = self.clone();
        for r in 0..self.height {
            out.pixels[r * self.width..(r + 1) * self.width].reverse();
        }
        out
    }

    pub fn flip_vertical(&self) -> Self {
        let mut out = self.clone();
        for r in 0..self.height {
            let src = (self.height - 1 - r) * self.width;
            out.pixels[r * self.width..(r + 1) * self.width]
                .copy_from_slice(&self.pixels[src..src + self.width]);
        }
        out
    }
}

/// Geometry of the patch partition.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchPlan {
    pub image_h: usize,
    pub image_w: usize,
    pub patch_h: usize,
    pub patch_w: usize,
    pub n: usize,
    pub m: usize,
    pub alpha: f64,
    pub beta: f64,
    /// 1-based `(f, g)` top-left corners in raster order.
    offsets: Vec<(usize, usize)>,
}

fn integer_stride(overlap: f64, patch: usize, name: &str) -> Result<usize> {
    if !(0.0..1.0).contains(&overlap) {
        return Err(Error::Plan(format!("{name} = {overlap} must lie in [0, 1)")));
    }
    let stride = (1.0 - overlap) * patch as f64;
    let rounded = stride.round();
    if (stride - rounded).abs() > 1e-9 || rounded < 1.0 {
        return Err(Error::Plan(format!(
            "stride (1 - {name}) * {patch} = {stride} is not a positive integer"
        )));
    }
    Ok(rounded as usize)
}

impl PatchPlan {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        h: usize,
        w: usize,
        patch_h: usize,
        patch_w: usize,
        n: usize,
        m: usize,
        alpha: f64,
        beta: f64,
    ) -> Result<Self> {
        if patch_h == 0 || patch_w == 0 || patch_h > h || patch_w > w {
            return Err(Error::Plan(format!(
                "patch {patch_h}x{patch_w} does not fit image {h}x{w}"
            )));
        }
        if n == 0 || m == 0 {
            return Err(Error::Plan(format!("grid {n}x{m} must be at least 1x1")));
        }
        let col_stride = integer_stride(alpha, patch_w, "alpha")?;
        let row_stride = integer_stride(beta, patch_h, "beta")?;
        let last_row = 1 + (n - 1) * row_stride;
        let last_col = 1 + (m - 1) * col_stride;
        if last_row + patch_h - 1 > h || last_col + patch_w - 1 > w {
            return Err(Error::Plan(format!(
                "{n}x{m} grid of {patch_h}x{patch_w} patches with strides {row_stride}/{col_stride} \
                 exceeds image {h}x{w}"
            )));
        }
        let mut offsets = Vec::with_capacity(n * m);
        for u in 0..n {
            for v in 0..m {
                offsets.push((1 + u * row_stride, 1 + v * col_stride));
            }
        }
        Ok(Self {
            image_h: h,
            image_w: w,
            patch_h,
            patch_w,
            n,
            m,
            alpha,
            beta,
            offsets,
        })
    }

    /// 1-based top-left corners in raster order.
    pub fn offsets(&self) -> &[(usize, usize)] {
        &self.offsets
    }

    /// 1-based corner of grid position `(u, v)` (both 1-based).
    pub fn offset(&self, u: usize, v: usize) -> (usize, usize) {
        self.offsets[node_index(u, v, self.m)]
    }

    pub fn node_count(&self) -> usize {
        self.n * self.m
    }

    pub fn check_image(&self, image: &GrayImage) -> Result<()> {
        if image.height() != self.image_h || image.width() != self.image_w {
            return Err(Error::Plan(format!(
                "plan built for {}x{} images, got {}x{}",
                self.image_h,
                self.image_w,
                image.height(),
                image.width()
            )));
        }
        Ok(())
    }
}

/// 0-based node index of 1-based grid position `(u, v)`.
pub fn node_index(u: usize, v: usize, m: usize) -> usize {
    (u - 1) * m + (v - 1)
}

/// Extracted patches in raster order.
#[derive(Debug, Clone)]
pub struct PatchGrid {
    pub plan: PatchPlan,
    patches: Vec<Vec<u8>>,
}

impl PatchGrid {
    pub fn patches(&self) -> &[Vec<u8>] {
        &self.patches
    }

    /// All patches stacked as `[n*m, 1, h_p, w_p]`.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let mut data = Vec::with_capacity(self.patches.len() * self.plan.patch_h * self.plan.patch_w);
        for p in &self.patches {
            data.extend(p.iter().map(|&v| T::from_f64(v as f64)));
        }
        Tensor::new(
            &[self.patches.len(), 1, self.plan.patch_h, self.plan.patch_w],
            data,
        )
        .expect("patch sizes fixed by the plan")
    }
}

pub fn extract_patches(image: &GrayImage, plan: &PatchPlan) -> Result<PatchGrid> {
    plan.check_image(image)?;
    let patches = plan
        .offsets()
        .iter()
        .map(|&(f, g)| {
            let mut p = Vec::with_capacity(plan.patch_h * plan.patch_w);
            for r in f - 1..f - 1 + plan.patch_h {
                let start = r * image.width() + g - 1;
                p.extend_from_slice(&image.pixels()[start..start + plan.patch_w]);
            }
            p
        })
        .collect();
    Ok(PatchGrid {
        plan: plan.clone(),
        patches,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TopologyKind {
    Complete,
    Lattice,
}

impl std::str::FromStr for TopologyKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "complete" => Ok(Self::Complete),
            "lattice" => Ok(Self::Lattice),
            other => Err(Error::Config(format!("unknown topology {other:?}"))),
        }
    }
}

impl std::fmt::Display for TopologyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Complete => "complete",
            Self::Lattice => "lattice",
        })
    }
}

/// Symmetric boolean adjacency over the patch nodes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GraphTopology {
    node_count: usize,
    adjacency: Vec<bool>,
}

impl GraphTopology {
    pub fn empty(node_count: usize) -> Self {
        Self {
            node_count,
            adjacency: vec![false; node_count * node_count],
        }
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.adjacency[i * self.node_count + j]
    }

    pub fn set_edge(&mut self, i: usize, j: usize) {
        self.adjacency[i * self.node_count + j] = true;
        self.adjacency[j * self.node_count + i] = true;
    }

    /// Row-major `node_count x node_count` matrix.
    pub fn adjacency(&self) -> &[bool] {
        &self.adjacency
    }

    /// Undirected edges between distinct nodes.
    pub fn edge_count(&self) -> usize {
        let n = self.node_count;
        (0..n)
            .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
            .filter(|&(i, j)| self.has_edge(i, j))
            .count()
    }

    /// Neighbours of `i` excluding itself.
    pub fn degree(&self, i: usize) -> usize {
        (0..self.node_count)
            .filter(|&j| j != i && self.has_edge(i, j))
            .count()
    }

    pub fn has_self_loops(&self) -> bool {
        (0..self.node_count).all(|i| self.has_edge(i, i))
    }

    pub fn is_symmetric(&self) -> bool {
        let n = self.node_count;
        (0..n).all(|i| (0..n).all(|j| self.has_edge(i, j) == self.has_edge(j, i)))
    }

    /// Relabel nodes: node `i` of `self` becomes node `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let n = self.node_count;
        let mut out = Self::empty(n);
        for i in 0..n {
            for j in 0..n {
                if self.has_edge(i, j) {
                    out.adjacency[perm[i] * n + perm[j]] = true;
                }
            }
        }
        out
    }

    pub fn build(kind: TopologyKind, n: usize, m: usize) -> Self {
        match kind {
            TopologyKind::Complete => build_complete_graph(n * m),
            TopologyKind::Lattice => build_lattice_graph(n, m),
        }
    }
}

pub fn build_complete_graph(node_count: usize) -> GraphTopology {
    let mut t = GraphTopology::empty(node_count);
    for i in 0..node_count {
        for j in i + 1..node_count {
            t.set_edge(i, j);
        }
    }
    t
}

/// Edges between grid positions at Chebyshev distance 1 (8-neighbourhood).
pub fn build_lattice_graph(n: usize, m: usize) -> GraphTopology {
    let mut t = GraphTopology::empty(n * m);
    for a in 1..=n {
        for b in 1..=m {
            for c in 1..=n {
                for d in 1..=m {
                    if a.abs_diff(c).max(b.abs_diff(d)) == 1 {
                        t.set_edge(node_index(a, b, m), node_index(c, d, m));
                    }
                }
            }
        }
    }
    t
}

pub fn add_self_loops(t: &GraphTopology) -> GraphTopology {
    let mut out = t.clone();
    for i in 0..t.node_count {
        out.adjacency[i * t.node_count + i] = true;
    }
    out
}

/// Per-node feature vectors, one row per patch.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeFeatureMatrix {
    pub rows: usize,
    pub dim: usize,
    pub values: Vec<f64>,
}

impl NodeFeatureMatrix {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }
}

/// Maps a stacked patch batch `[B,1,h_p,w_p]` to features `[B,l]`.
pub trait FeatureExtractor {
    fn extract(&self, patches: &Tensor<f32>) -> Result<Tensor<f32>>;
}

/// Build `(A, W)` for one image: self-looped adjacency and per-node features
/// from one shared extractor applied to every patch.
pub fn image_to_graph(
    image: &GrayImage,
    plan: &PatchPlan,
    kind: TopologyKind,
    extractor: &dyn FeatureExtractor,
) -> Result<(GraphTopology, NodeFeatureMatrix)> {
    let grid = extract_patches(image, plan)?;
    let topology = add_self_loops(&GraphTopology::build(kind, plan.n, plan.m));
    let feats = extractor.extract(&grid.to_tensor())?;
    match feats.shape() {
        [rows, dim] if *rows == plan.node_count() => Ok((
            topology,
            NodeFeatureMatrix {
                rows: *rows,
                dim: *dim,
                values: feats.to_f64_vec(),
            },
        )),
        s => Err(Error::Shape {
            op: "image_to_graph",
            detail: format!("extractor returned {s:?} for {} patches", plan.node_count()),
        }),
    }
}
