//! Toy spatial graph encoder: stacked graph convolutions over a fixed
//! skeleton, global average pooling, a classifier head and a projection
//! head producing a unit-length embedding.

use rand::Rng;

use crate::error::{AclError, Result};
use crate::numerics::{self, DenseTensor, ParamSet, NORMALIZE_EPS};

/// Embeddings whose pre-normalization norm falls below this are flagged.
pub const DEGENERATE_NORM: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonGraph {
    joints: usize,
    adjacency: Vec<f64>,
    normalized: Vec<f64>,
    /// Non-zero entries of the normalized adjacency, row by row: `(row, col, value)`.
    sparse: Vec<(usize, usize, f64)>,
}

impl SkeletonGraph {
    pub fn new(joints: usize, adjacency: Vec<f64>) -> Result<Self> {
        if joints == 0 {
            return Err(AclError::invalid("graph needs at least one joint"));
        }
        let normalized = normalize_adjacency(joints, &adjacency)?;
        let mut sparse = Vec::new();
        for r in 0..joints {
            for c in 0..joints {
                let v = normalized[r * joints + c];
                if v != 0.0 {
                    sparse.push((r, c, v));
                }
            }
        }
        Ok(Self {
            joints,
            adjacency,
            normalized,
            sparse,
        })
    }

    /// Undirected graph from an edge list with unit weights.
    pub fn from_edges(joints: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut a = vec![0.0; joints * joints];
        for &(u, v) in edges {
            if u >= joints || v >= joints {
                return Err(AclError::invalid(format!("edge ({u}, {v}) outside {joints} joints")));
            }
            a[u * joints + v] = 1.0;
            a[v * joints + u] = 1.0;
        }
        Self::new(joints, a)
    }

    /// A spine of up to five joints with the remainder split into four limbs,
    /// two hanging off the upper spine and two off the root. With 17 joints
    /// this is the usual head/arms/legs layout.
    pub fn chain_plus_limbs(joints: usize) -> Result<Self> {
        Self::from_edges(joints, &chain_plus_limbs_edges(joints))
    }

    pub fn joint_count(&self) -> usize {
        self.joints
    }

    pub fn adjacency(&self) -> &[f64] {
        &self.adjacency
    }

    pub fn normalized_adjacency(&self) -> &[f64] {
        &self.normalized
    }

    pub(crate) fn sparse(&self) -> &[(usize, usize, f64)] {
        &self.sparse
    }
}

pub fn chain_plus_limbs_edges(joints: usize) -> Vec<(usize, usize)> {
    let spine = joints.min(5);
    let mut edges: Vec<(usize, usize)> = (1..spine).map(|j| (j - 1, j)).collect();
    let rest = joints - spine;
    let anchors = [spine.saturating_sub(2), spine.saturating_sub(2), 0, 0];
    let mut next = spine;
    for (limb, &anchor) in anchors.iter().enumerate() {
        let len = rest / 4 + usize::from(limb < rest % 4);
        let mut parent = anchor;
        for _ in 0..len {
            edges.push((parent, next));
            parent = next;
            next += 1;
        }
    }
    edges
}

/// `D^{-1/2} (A + I) D^{-1/2}` with `D` the degree matrix of `A + I`.
pub fn normalize_adjacency(joints: usize, adjacency: &[f64]) -> Result<Vec<f64>> {
    if adjacency.len() != joints * joints {
        return Err(AclError::shape(format!(
            "adjacency has {} entries, expected {}",
            adjacency.len(),
            joints * joints
        )));
    }
    for r in 0..joints {
        for c in 0..joints {
            let v = adjacency[r * joints + c];
            if !v.is_finite() || v < 0.0 {
                return Err(AclError::invalid(format!(
                    "adjacency[{r}][{c}] = {v} is not a finite non-negative weight"
                )));
            }
            if v != adjacency[c * joints + r] {
                return Err(AclError::invalid(format!("adjacency is not symmetric at ({r}, {c})")));
            }
        }
    }
    let mut with_loops = adjacency.to_vec();
    for j in 0..joints {
        with_loops[j * joints + j] += 1.0;
    }
    let inv_sqrt_deg: Vec<f64> = (0..joints)
        .map(|r| {
            let deg: f64 = with_loops[r * joints..(r + 1) * joints].iter().sum();
            1.0 / deg.sqrt()
        })
        .collect();
    Ok((0..joints * joints)
        .map(|k| {
            let (r, c) = (k / joints, k % joints);
            with_loops[k] * (inv_sqrt_deg[r] * inv_sqrt_deg[c])
        })
        .collect())
}

/// Learnable weights. Layer `l` maps `C^(l-1)` to `C^(l)` channels.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub layers: Vec<DenseTensor>,
    pub classifier_weight: DenseTensor,
    pub classifier_bias: DenseTensor,
    pub projection_weight: DenseTensor,
    pub projection_bias: DenseTensor,
}

impl EncoderParams {
    /// Glorot-uniform weights and biases of 0.01.
    pub fn init<R: Rng>(channels: &[usize], class_count: usize, embedding_dim: usize, rng: &mut R) -> Result<Self> {
        if channels.len() < 2 {
            return Err(AclError::invalid("need an input width and at least one layer width"));
        }
        if channels.contains(&0) {
            return Err(AclError::invalid("channel widths must be positive"));
        }
        if class_count < 2 {
            return Err(AclError::invalid("need at least two classes"));
        }
        if embedding_dim < 2 {
            return Err(AclError::invalid("embedding dimension must be at least 2"));
        }
        let mut glorot = |fan_in: usize, fan_out: usize| {
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let values = (0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)).collect();
            DenseTensor::new(vec![fan_in, fan_out], values).expect("shape is consistent")
        };
        let layers: Vec<DenseTensor> = channels.windows(2).map(|w| glorot(w[0], w[1])).collect();
        let hidden = *channels.last().unwrap();
        let classifier_weight = glorot(hidden, class_count);
        let projection_weight = glorot(hidden, embedding_dim);
        let bias = |n: usize| DenseTensor::new(vec![n], vec![0.01; n]).expect("positive length");
        Ok(Self {
            layers,
            classifier_weight,
            classifier_bias: bias(class_count),
            projection_weight,
            projection_bias: bias(embedding_dim),
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self.layers.iter().map(DenseTensor::zeros_like).collect(),
            classifier_weight: DenseTensor::zeros_like(&self.classifier_weight),
            classifier_bias: DenseTensor::zeros_like(&self.classifier_bias),
            projection_weight: DenseTensor::zeros_like(&self.projection_weight),
            projection_bias: DenseTensor::zeros_like(&self.projection_bias),
        }
    }

    pub fn input_channels(&self) -> usize {
        self.layers[0].shape()[0]
    }

    pub fn hidden_channels(&self) -> usize {
        self.classifier_weight.shape()[0]
    }

    pub fn class_count(&self) -> usize {
        self.classifier_bias.len()
    }

    pub fn embedding_dim(&self) -> usize {
        self.projection_bias.len()
    }

    /// Channel widths, input first.
    pub fn channels(&self) -> Vec<usize> {
        let mut out = vec![self.input_channels()];
        out.extend(self.layers.iter().map(|l| l.shape()[1]));
        out
    }

    pub fn tensor_names(&self) -> Vec<String> {
        let mut names: Vec<String> = (0..self.layers.len()).map(|l| format!("layer{l}.weight")).collect();
        names.extend(
            [
                "classifier.weight",
                "classifier.bias",
                "projection.weight",
                "projection.bias",
            ]
            .map(String::from),
        );
        names
    }

    /// Tensors in a fixed order matching [`Self::tensor_names`].
    pub fn tensors(&self) -> Vec<&DenseTensor> {
        let mut out: Vec<&DenseTensor> = self.layers.iter().collect();
        out.extend([
            &self.classifier_weight,
            &self.classifier_bias,
            &self.projection_weight,
            &self.projection_bias,
        ]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut DenseTensor> {
        let mut out: Vec<&mut DenseTensor> = self.layers.iter_mut().collect();
        out.extend([
            &mut self.classifier_weight,
            &mut self.classifier_bias,
            &mut self.projection_weight,
            &mut self.projection_bias,
        ]);
        out
    }

    pub fn to_param_set(&self) -> ParamSet {
        self.tensor_names()
            .into_iter()
            .zip(self.tensors().into_iter().cloned())
            .collect()
    }

    /// Rebuilds parameters from a set with the same names and shapes as `self`.
    pub fn with_param_set(&self, set: &ParamSet) -> Result<Self> {
        let mut out = self.clone();
        let names = self.tensor_names();
        if set.len() != names.len() {
            return Err(AclError::shape(format!(
                "expected {} tensors, got {}",
                names.len(),
                set.len()
            )));
        }
        for (name, slot) in names.iter().zip(out.tensors_mut()) {
            let t = set
                .get(name)
                .ok_or_else(|| AclError::shape(format!("missing tensor {name}")))?;
            if t.shape() != slot.shape() {
                return Err(AclError::shape(format!(
                    "{name}: shape {:?}, expected {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t.clone();
        }
        Ok(out)
    }

    /// Rebuild from named tensors, inferring the layer count.
    pub fn from_param_set(set: &ParamSet) -> Result<Self> {
        let take = |name: &str| {
            set.get(name)
                .cloned()
                .ok_or_else(|| AclError::shape(format!("missing tensor {name}")))
        };
        let layer_count = (0..)
            .take_while(|l| set.contains_key(&format!("layer{l}.weight")))
            .count();
        if layer_count == 0 || set.len() != layer_count + 4 {
            return Err(AclError::shape("unexpected tensor names in parameter set"));
        }
        let layers = (0..layer_count)
            .map(|l| take(&format!("layer{l}.weight")))
            .collect::<Result<Vec<_>>>()?;
        let params = Self {
            layers,
            classifier_weight: take("classifier.weight")?,
            classifier_bias: take("classifier.bias")?,
            projection_weight: take("projection.weight")?,
            projection_bias: take("projection.bias")?,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        let matrix = |t: &DenseTensor, what: &str| -> Result<(usize, usize)> {
            match t.shape() {
                [r, c] => Ok((*r, *c)),
                s => Err(AclError::shape(format!("{what} must be a matrix, got {s:?}"))),
            }
        };
        if self.layers.is_empty() {
            return Err(AclError::shape("encoder needs at least one layer"));
        }
        let mut width = matrix(&self.layers[0], "layer0")?.0;
        for (l, layer) in self.layers.iter().enumerate() {
            let (i, o) = matrix(layer, &format!("layer{l}"))?;
            if i != width {
                return Err(AclError::shape(format!(
                    "layer{l} expects {i} channels, previous layer gives {width}"
                )));
            }
            width = o;
        }
        let (ci, c) = matrix(&self.classifier_weight, "classifier.weight")?;
        let (pi, d) = matrix(&self.projection_weight, "projection.weight")?;
        if ci != width || pi != width {
            return Err(AclError::shape("head input width does not match the last layer"));
        }
        if self.classifier_bias.shape() != [c] || self.projection_bias.shape() != [d] {
            return Err(AclError::shape("bias length does not match head width"));
        }
        if c < 2 || d < 2 {
            return Err(AclError::shape("need at least two classes and embedding dimension 2"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncodeOutput {
    pub logits: Vec<f64>,
    pub embedding: Vec<f64>,
    /// Projection norm was below [`DEGENERATE_NORM`]; the embedding is not unit length.
    pub degenerate: bool,
}

/// Intermediate values kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Spatially aggregated input of each layer, `C_in × T × N`.
    aggregated: Vec<Vec<f64>>,
    /// Post-ReLU output of each layer, `C_out × T × N`.
    activations: Vec<Vec<f64>>,
    pooled: Vec<f64>,
    projection: Vec<f64>,
}

fn check_sequence(seq: &DenseTensor, channels: usize, joints: usize) -> Result<usize> {
    match seq.shape() {
        &[c, t, n] if c == channels && n == joints => Ok(t),
        s => Err(AclError::shape(format!(
            "sequence shape {s:?} does not match ({channels}, T, {joints})"
        ))),
    }
}

/// `out[c, t, n] = Σ_m Â[n, m] x[c, t, m]`, using the sparse form of Â.
fn aggregate(graph: &SkeletonGraph, x: &[f64], out: &mut [f64]) {
    let n = graph.joint_count();
    out.fill(0.0);
    for (row_in, row_out) in x.chunks_exact(n).zip(out.chunks_exact_mut(n)) {
        for &(r, c, v) in graph.sparse() {
            row_out[r] += v * row_in[c];
        }
    }
}

/// Adjoint of [`aggregate`]: `dx[c, t, m] = Σ_n Â[n, m] d[c, t, n]`.
fn aggregate_adjoint(graph: &SkeletonGraph, d: &[f64], out: &mut [f64]) {
    let n = graph.joint_count();
    out.fill(0.0);
    for (row_d, row_out) in d.chunks_exact(n).zip(out.chunks_exact_mut(n)) {
        for &(r, c, v) in graph.sparse() {
            row_out[c] += v * row_d[r];
        }
    }
}

/// `out[co, :] = Σ_ci Θ[ci, co] s[ci, :]`.
fn channel_mix(theta: &DenseTensor, s: &[f64], block: usize, out: &mut [f64]) {
    let (cin, cout) = (theta.shape()[0], theta.shape()[1]);
    let w = theta.values();
    out.fill(0.0);
    for ci in 0..cin {
        let src = &s[ci * block..(ci + 1) * block];
        for co in 0..cout {
            let scale = w[ci * cout + co];
            let dst = &mut out[co * block..(co + 1) * block];
            for (d, x) in dst.iter_mut().zip(src) {
                *d += scale * x;
            }
        }
    }
}

/// One graph convolution `ReLU(Θᵀ X_t Âᵀ)` applied frame by frame.
pub fn graph_conv_layer(x: &DenseTensor, graph: &SkeletonGraph, theta: &DenseTensor) -> Result<DenseTensor> {
    let (cin, cout) = match theta.shape() {
        &[i, o] => (i, o),
        s => return Err(AclError::shape(format!("weight must be a matrix, got {s:?}"))),
    };
    let t = check_sequence(x, cin, graph.joint_count())?;
    let block = t * graph.joint_count();
    let mut s = vec![0.0; cin * block];
    aggregate(graph, x.values(), &mut s);
    let mut z = vec![0.0; cout * block];
    channel_mix(theta, &s, block, &mut z);
    z.iter_mut().for_each(|v| *v = v.max(0.0));
    DenseTensor::new(vec![cout, t, graph.joint_count()], z)
}

fn linear(weight: &DenseTensor, bias: &DenseTensor, x: &[f64]) -> Vec<f64> {
    let cols = weight.shape()[1];
    let mut out = bias.values().to_vec();
    for (row, &xi) in weight.values().chunks_exact(cols).zip(x) {
        for (o, w) in out.iter_mut().zip(row) {
            *o += w * xi;
        }
    }
    out
}

pub fn encode(seq: &DenseTensor, graph: &SkeletonGraph, params: &EncoderParams) -> Result<EncodeOutput> {
    encode_with_cache(seq, graph, params).map(|(out, _)| out)
}

pub fn encode_with_cache(
    seq: &DenseTensor,
    graph: &SkeletonGraph,
    params: &EncoderParams,
) -> Result<(EncodeOutput, ForwardCache)> {
    let t = check_sequence(seq, params.input_channels(), graph.joint_count())?;
    let block = t * graph.joint_count();
    let mut aggregated = Vec::with_capacity(params.layers.len());
    let mut activations: Vec<Vec<f64>> = Vec::with_capacity(params.layers.len());
    for theta in &params.layers {
        let input = activations.last().map_or(seq.values(), Vec::as_slice);
        let mut s = vec![0.0; theta.shape()[0] * block];
        aggregate(graph, input, &mut s);
        let mut z = vec![0.0; theta.shape()[1] * block];
        channel_mix(theta, &s, block, &mut z);
        z.iter_mut().for_each(|v| *v = v.max(0.0));
        aggregated.push(s);
        activations.push(z);
    }
    let last = activations.last().expect("at least one layer");
    let inv = 1.0 / block as f64;
    let pooled: Vec<f64> = last.chunks_exact(block).map(|c| c.iter().sum::<f64>() * inv).collect();
    let logits = linear(&params.classifier_weight, &params.classifier_bias, &pooled);
    let projection = linear(&params.projection_weight, &params.projection_bias, &pooled);
    let embedding = numerics::l2_normalize(&projection, NORMALIZE_EPS);
    let degenerate = numerics::norm(&projection) < DEGENERATE_NORM;
    let out = EncodeOutput {
        logits,
        embedding,
        degenerate,
    };
    Ok((
        out,
        ForwardCache {
            aggregated,
            activations,
            pooled,
            projection,
        },
    ))
}

/// Accumulates into `grads` the parameter gradient for upstream gradients
/// `d_logits` and `d_embedding` (w.r.t. the normalized embedding).
pub fn backward(
    graph: &SkeletonGraph,
    params: &EncoderParams,
    cache: &ForwardCache,
    d_logits: &[f64],
    d_embedding: &[f64],
    grads: &mut EncoderParams,
) {
    let hidden = params.hidden_channels();
    let d_proj = numerics::l2_normalize_backward(&cache.projection, NORMALIZE_EPS, d_embedding);

    let mut d_pooled = vec![0.0; hidden];
    let heads = [
        (
            &params.classifier_weight,
            &mut grads.classifier_weight,
            &mut grads.classifier_bias,
            d_logits,
        ),
        (
            &params.projection_weight,
            &mut grads.projection_weight,
            &mut grads.projection_bias,
            d_proj.as_slice(),
        ),
    ];
    for (w, gw, gb, d_out) in heads {
        let cols = w.shape()[1];
        for (b, d) in gb.values_mut().iter_mut().zip(d_out) {
            *b += d;
        }
        for (k, (grow, wrow)) in gw
            .values_mut()
            .chunks_exact_mut(cols)
            .zip(w.values().chunks_exact(cols))
            .enumerate()
        {
            let x = cache.pooled[k];
            let mut acc = 0.0;
            for ((g, wv), d) in grow.iter_mut().zip(wrow).zip(d_out) {
                *g += x * d;
                acc += wv * d;
            }
            d_pooled[k] += acc;
        }
    }

    let last = cache.activations.last().expect("at least one layer");
    let block = last.len() / hidden;
    let inv = 1.0 / block as f64;
    // Gradient w.r.t. the post-ReLU output of the current layer.
    let mut d_act: Vec<f64> = d_pooled
        .iter()
        .flat_map(|&d| std::iter::repeat_n(d * inv, block))
        .collect();

    for l in (0..params.layers.len()).rev() {
        let theta = &params.layers[l];
        let (cin, cout) = (theta.shape()[0], theta.shape()[1]);
        let act = &cache.activations[l];
        let s = &cache.aggregated[l];
        // Through the ReLU.
        for (d, a) in d_act.iter_mut().zip(act) {
            if *a <= 0.0 {
                *d = 0.0;
            }
        }
        let gtheta = grads.layers[l].values_mut();
        let w = theta.values();
        let need_input_grad = l > 0;
        let mut d_s = vec![0.0; if need_input_grad { cin * block } else { 0 }];
        for ci in 0..cin {
            let src = &s[ci * block..(ci + 1) * block];
            for co in 0..cout {
                let dz = &d_act[co * block..(co + 1) * block];
                gtheta[ci * cout + co] += numerics::dot(src, dz);
                if need_input_grad {
                    let scale = w[ci * cout + co];
                    for (ds, g) in d_s[ci * block..(ci + 1) * block].iter_mut().zip(dz) {
                        *ds += scale * g;
                    }
                }
            }
        }
        if need_input_grad {
            let mut d_prev = vec![0.0; cin * block];
            aggregate_adjoint(graph, &d_s, &mut d_prev);
            d_act = d_prev;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f64, hi: f64) -> DenseTensor {
        let n = shape.iter().product();
        DenseTensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
    }

    fn random_graph(rng: &mut ChaCha8Rng, n: usize) -> SkeletonGraph {
        let mut a = vec![0.0; n * n];
        for r in 0..n {
            for c in r + 1..n {
                if rng.random_bool(0.4) {
                    let w = rng.random_range(0.1..2.0);
                    a[r * n + c] = w;
                    a[c * n + r] = w;
                }
            }
        }
        SkeletonGraph::new(n, a).unwrap()
    }

    #[test]
    fn normalize_zero_adjacency_is_identity() {
        assert_eq!(normalize_adjacency(2, &[0.0; 4]).unwrap(), vec![1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn normalize_two_node_chain() {
        // A + I = all ones, D = diag(2, 2): every entry 1/sqrt(2)/sqrt(2) = 0.5
        let out = normalize_adjacency(2, &[0.0, 1.0, 1.0, 0.0]).unwrap();
        for v in out {
            assert!((v - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn normalize_rejects_bad_adjacency() {
        assert!(normalize_adjacency(2, &[0.0, 1.0, 0.0, 0.0]).is_err());
        assert!(normalize_adjacency(2, &[0.0, -1.0, -1.0, 0.0]).is_err());
        assert!(normalize_adjacency(2, &[0.0; 3]).is_err());
    }

    #[test]
    fn normalized_is_symmetric_with_bounded_spectrum() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let n = rng.random_range(1..9);
            let g = random_graph(&mut rng, n);
            let a = g.normalized_adjacency();
            for r in 0..n {
                for c in 0..n {
                    assert_eq!(a[r * n + c], a[c * n + r]);
                }
            }
            // Power iteration on a symmetric non-negative matrix.
            let mut v = vec![1.0; n];
            let mut lambda = 0.0;
            for _ in 0..500 {
                let w: Vec<f64> = (0..n).map(|r| (0..n).map(|c| a[r * n + c] * v[c]).sum()).collect();
                lambda = numerics::norm(&w) / numerics::norm(&v);
                v = numerics::l2_normalize(&w, 1e-300);
            }
            assert!(lambda <= 1.0 + 1e-9, "spectral radius {lambda}");
        }
    }

    #[test]
    fn chain_plus_limbs_layout() {
        let edges = chain_plus_limbs_edges(17);
        assert_eq!(edges.len(), 16);
        assert!(edges.contains(&(3, 5)) && edges.contains(&(3, 8)));
        assert!(edges.contains(&(0, 11)) && edges.contains(&(0, 14)));
        for n in 1..30 {
            assert_eq!(chain_plus_limbs_edges(n).len(), n - 1, "tree on {n} joints");
        }
    }

    #[test]
    fn conv_identity_and_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = SkeletonGraph::new(4, vec![0.0; 16]).unwrap();
        let theta = DenseTensor::new(vec![3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
        let x = random_tensor(&mut rng, vec![3, 5, 4], 0.0, 2.0);
        assert_eq!(graph_conv_layer(&x, &g, &theta).unwrap(), x);
        let zero = DenseTensor::zeros(vec![3, 5, 4]);
        assert_eq!(graph_conv_layer(&zero, &g, &theta).unwrap(), zero);
    }

    #[test]
    fn conv_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..10 {
            let (cin, cout, t, n) = (3, 4, 6, 5);
            let g = random_graph(&mut rng, n);
            let a = g.normalized_adjacency();
            let x = random_tensor(&mut rng, vec![cin, t, n], -1.0, 1.0);
            let theta = random_tensor(&mut rng, vec![cin, cout], -1.0, 1.0);
            let out = graph_conv_layer(&x, &g, &theta).unwrap();
            let xv = x.values();
            let w = theta.values();
            for co in 0..cout {
                for tt in 0..t {
                    for j in 0..n {
                        let mut acc = 0.0;
                        for ci in 0..cin {
                            for m in 0..n {
                                acc += w[ci * cout + co] * xv[(ci * t + tt) * n + m] * a[j * n + m];
                            }
                        }
                        let got = out.values()[(co * t + tt) * n + j];
                        assert!((got - acc.max(0.0)).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn conv_rejects_shape_mismatch() {
        let g = SkeletonGraph::new(3, vec![0.0; 9]).unwrap();
        let theta = DenseTensor::zeros(vec![2, 2]);
        assert!(graph_conv_layer(&DenseTensor::zeros(vec![3, 4, 3]), &g, &theta).is_err());
        assert!(graph_conv_layer(&DenseTensor::zeros(vec![2, 4, 5]), &g, &theta).is_err());
    }

    fn small_params(rng: &mut ChaCha8Rng) -> EncoderParams {
        EncoderParams::init(&[3, 5, 4], 3, 4, rng).unwrap()
    }

    #[test]
    fn encode_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = SkeletonGraph::chain_plus_limbs(6).unwrap();
        let p = small_params(&mut rng);
        let x = random_tensor(&mut rng, vec![3, 7, 6], -1.0, 1.0);
        let out = encode(&x, &g, &p).unwrap();
        assert_eq!(out.logits.len(), 3);
        assert_eq!(out.embedding.len(), 4);
        assert!((numerics::norm(&out.embedding) - 1.0).abs() < 1e-9);
        assert_eq!(encode(&x, &g, &p).unwrap(), out);
        assert!(encode(&DenseTensor::zeros(vec![2, 7, 6]), &g, &p).is_err());
    }

    #[test]
    fn encode_zero_input_with_zero_biases() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = SkeletonGraph::chain_plus_limbs(5).unwrap();
        let mut p = small_params(&mut rng);
        p.projection_bias.values_mut().fill(0.0);
        p.classifier_bias = DenseTensor::new(vec![3], vec![0.2, -0.1, 0.5]).unwrap();
        let out = encode(&DenseTensor::zeros(vec![3, 4, 5]), &g, &p).unwrap();
        assert!(out.degenerate);
        assert_eq!(out.embedding, vec![0.0; 4]);
        assert_eq!(out.logits, vec![0.2, -0.1, 0.5]);
    }

    #[test]
    fn encode_is_joint_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let n = 6;
            let g = random_graph(&mut rng, n);
            let p = small_params(&mut rng);
            let x = random_tensor(&mut rng, vec![3, 4, n], -1.0, 1.0);
            let mut perm: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                perm.swap(i, rng.random_range(0..=i));
            }
            // new joint k is old joint perm[k]
            let a = g.adjacency();
            let pa: Vec<f64> = (0..n * n).map(|k| a[perm[k / n] * n + perm[k % n]]).collect();
            let pg = SkeletonGraph::new(n, pa).unwrap();
            let xv = x.values();
            let px: Vec<f64> = (0..xv.len())
                .map(|k| {
                    let (row, j) = (k / n, k % n);
                    xv[row * n + perm[j]]
                })
                .collect();
            let px = DenseTensor::new(vec![3, 4, n], px).unwrap();
            let o1 = encode(&x, &g, &p).unwrap();
            let o2 = encode(&px, &pg, &p).unwrap();
            for (a, b) in o1.logits.iter().zip(&o2.logits) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn activations_are_non_negative() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let g = SkeletonGraph::chain_plus_limbs(7).unwrap();
        let p = small_params(&mut rng);
        let x = random_tensor(&mut rng, vec![3, 5, 7], -3.0, 3.0);
        let (_, cache) = encode_with_cache(&x, &g, &p).unwrap();
        assert!(cache.activations.iter().flatten().all(|&v| v >= 0.0));
    }

    #[test]
    fn param_set_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = small_params(&mut rng);
        let set = p.to_param_set();
        assert_eq!(EncoderParams::from_param_set(&set).unwrap(), p);
        assert_eq!(p.with_param_set(&set).unwrap(), p);
        assert_eq!(p.channels(), vec![3, 5, 4]);
    }
}
