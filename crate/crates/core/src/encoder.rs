//! Dual-branch graph encoder: a message-passing (GCN) branch and a
//! shortest-path branch, each with its own hazard head, plus the domain
//! classifier used for feature alignment.
//!
//! Both branches map an `n x d` node-feature matrix to a pooled graph
//! embedding and a `k_bins` hazard distribution. The two hazard heads are kept
//! separate so the branches can parameterize two distinct label distributions;
//! [`fused_predict`] averages them at inference time.

use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::error::{DetaError, Result};
use crate::graphs::{normalized_adjacency, shortest_path_sets, WSIGraph};

/// Architecture shape shared by parameters, checkpoints, and configs.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderDims {
    pub feat_dim: usize,
    pub hidden: usize,
    pub mp_layers: usize,
    pub sp_layers: usize,
    pub k_sp: usize,
    pub k_bins: usize,
    pub head_hidden: usize,
    pub dclf_hidden: usize,
}

impl EncoderDims {
    fn validate(&self) -> Result<()> {
        let all = [
            ("feat_dim", self.feat_dim),
            ("hidden", self.hidden),
            ("mp_layers", self.mp_layers),
            ("sp_layers", self.sp_layers),
            ("k_sp", self.k_sp),
            ("k_bins", self.k_bins),
            ("head_hidden", self.head_hidden),
            ("dclf_hidden", self.dclf_hidden),
        ];
        for (name, v) in all {
            if v == 0 {
                return Err(DetaError::invalid(format!("{name} must be positive")));
            }
        }
        if self.k_bins < 2 {
            return Err(DetaError::invalid("k_bins must be >= 2"));
        }
        Ok(())
    }
}

/// One linear layer: weight `[in, out]` and bias `[out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// A stack of linear layers with ReLU between them (none after the last).
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

/// One shortest-path layer: the self map of the combination operator and the
/// map applied to the aggregated neighborhood messages.
#[derive(Clone, Debug)]
pub struct SpLayer {
    pub combine: Tensor,
    pub aggregate: Tensor,
}

/// All learnable weights: MP branch, SP branch, the two hazard heads, and the
/// domain classifier.
#[derive(Clone, Debug)]
pub struct DualEncoderParams {
    pub dims: EncoderDims,
    pub mp_layers: Vec<Tensor>,
    pub sp_layers: Vec<SpLayer>,
    pub head_mp: Mlp,
    pub head_sp: Mlp,
    pub dclf: Mlp,
}

fn init_weight<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let bound = 1.0 / (rows as f64).sqrt();
    Tensor::rand_uniform(vec![rows, cols], -bound, bound, rng)
}

fn init_mlp<R: Rng>(widths: &[usize], rng: &mut R) -> Mlp {
    let layers = widths
        .windows(2)
        .map(|w| Linear {
            weight: init_weight(w[0], w[1], rng),
            bias: Tensor::zeros(vec![w[1]]),
        })
        .collect();
    Mlp { layers }
}

impl DualEncoderParams {
    /// Seeded initialization: weights uniform in `[-1/sqrt(fan_in), +1/..]`,
    /// biases zero.
    pub fn init<R: Rng>(dims: EncoderDims, rng: &mut R) -> Result<Self> {
        dims.validate()?;
        let mut mp = Vec::new();
        let mut width = dims.feat_dim;
        for _ in 0..dims.mp_layers {
            mp.push(init_weight(width, dims.hidden, rng));
            width = dims.hidden;
        }
        let mut sp = Vec::new();
        width = dims.feat_dim;
        for _ in 0..dims.sp_layers {
            sp.push(SpLayer {
                combine: init_weight(width, dims.hidden, rng),
                aggregate: init_weight(width, dims.hidden, rng),
            });
            width = dims.hidden;
        }
        let head_mp = init_mlp(&[dims.hidden, dims.head_hidden, dims.k_bins], rng);
        let head_sp = init_mlp(&[dims.hidden, dims.head_hidden, dims.k_bins], rng);
        let dclf = init_mlp(&[dims.hidden + dims.k_bins, dims.dclf_hidden, 1], rng);
        Ok(DualEncoderParams {
            dims,
            mp_layers: mp,
            sp_layers: sp,
            head_mp,
            head_sp,
            dclf,
        })
    }

    /// MP-branch parameters (theta): GCN weights plus the MP hazard head.
    pub fn theta(&self) -> Vec<Tensor> {
        let mut out = self.mp_layers.clone();
        for l in &self.head_mp.layers {
            out.push(l.weight.clone());
            out.push(l.bias.clone());
        }
        out
    }

    /// SP-branch parameters (phi): combine/aggregate maps plus the SP head.
    pub fn phi(&self) -> Vec<Tensor> {
        let mut out = Vec::new();
        for l in &self.sp_layers {
            out.push(l.combine.clone());
            out.push(l.aggregate.clone());
        }
        for l in &self.head_sp.layers {
            out.push(l.weight.clone());
            out.push(l.bias.clone());
        }
        out
    }

    /// Every encoder parameter except the domain classifier.
    pub fn encoder_tensors(&self) -> Vec<Tensor> {
        let mut out = self.theta();
        out.extend(self.phi());
        out
    }

    pub fn dclf_tensors(&self) -> Vec<Tensor> {
        let mut out = Vec::new();
        for l in &self.dclf.layers {
            out.push(l.weight.clone());
            out.push(l.bias.clone());
        }
        out
    }

    /// Stable `(name, tensor)` listing used by the checkpoint format.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (i, w) in self.mp_layers.iter().enumerate() {
            out.push((format!("mp.{i}.weight"), w.clone()));
        }
        for (i, l) in self.sp_layers.iter().enumerate() {
            out.push((format!("sp.{i}.combine"), l.combine.clone()));
            out.push((format!("sp.{i}.aggregate"), l.aggregate.clone()));
        }
        for (prefix, mlp) in [
            ("head_mp", &self.head_mp),
            ("head_sp", &self.head_sp),
            ("dclf", &self.dclf),
        ] {
            for (i, l) in mlp.layers.iter().enumerate() {
                out.push((format!("{prefix}.{i}.weight"), l.weight.clone()));
                out.push((format!("{prefix}.{i}.bias"), l.bias.clone()));
            }
        }
        out
    }
}

// ── Graph preparation ────────────────────────────────────────────────

/// A graph plus the constant matrices both branches consume: the normalized
/// adjacency and one 0/1 selection matrix per shortest-path distance.
#[derive(Clone, Debug)]
pub struct PreparedGraph {
    pub graph: WSIGraph,
    adj_norm: Vec<f64>,
    sp_masks: Vec<Vec<f64>>,
    sp_mask_nonzero: Vec<bool>,
}

impl PreparedGraph {
    pub fn new(graph: WSIGraph, k_sp: usize) -> Self {
        let n = graph.node_count();
        let adj_norm = normalized_adjacency(&graph);
        let sp = shortest_path_sets(&graph, k_sp);
        let mut sp_masks = Vec::with_capacity(k_sp);
        let mut sp_mask_nonzero = Vec::with_capacity(k_sp);
        for k in 1..=k_sp {
            let mut mask = vec![0.0; n * n];
            let mut any = false;
            for u in 0..n {
                for &v in sp.at(u, k) {
                    mask[u * n + v] = 1.0;
                    any = true;
                }
            }
            sp_masks.push(mask);
            sp_mask_nonzero.push(any);
        }
        PreparedGraph {
            graph,
            adj_norm,
            sp_masks,
            sp_mask_nonzero,
        }
    }

    pub fn node_count(&self) -> usize {
        self.graph.node_count()
    }

    fn features_tensor(&self) -> Tensor {
        Tensor::new(
            vec![self.graph.node_count(), self.graph.feat_dim()],
            self.graph.features().to_vec(),
        )
        .expect("graph invariant")
    }

    fn adj_tensor(&self) -> Tensor {
        let n = self.graph.node_count();
        Tensor::new(vec![n, n], self.adj_norm.clone()).expect("graph invariant")
    }

    fn sp_mask_tensor(&self, k: usize) -> Tensor {
        let n = self.graph.node_count();
        Tensor::new(vec![n, n], self.sp_masks[k - 1].clone()).expect("graph invariant")
    }
}

/// Prepares a whole dataset for the configured shortest-path horizon.
pub fn prepare_all(graphs: Vec<WSIGraph>, k_sp: usize) -> Vec<PreparedGraph> {
    graphs.into_iter().map(|g| PreparedGraph::new(g, k_sp)).collect()
}

// ── Forward passes ───────────────────────────────────────────────────

/// Output of one branch on one graph. `hazard` doubles as the category
/// distribution consumed by the domain classifier.
#[derive(Clone, Debug)]
pub struct BranchOutput {
    pub node_embeddings: Tensor,
    pub graph_embedding: Tensor,
    pub hazard: Tensor,
}

impl BranchOutput {
    pub fn category_dist(&self) -> &Tensor {
        &self.hazard
    }
}

/// Sinusoidal position encoding of a path length `k` at width `d` (even):
/// entry `2i` is `sin(k / 10000^(2i/d))`, entry `2i+1` the matching cosine.
pub fn position_encoding(k: usize, d: usize) -> Result<Vec<f64>> {
    if d % 2 != 0 {
        return Err(DetaError::invalid(format!(
            "position encoding width must be even, got {d}"
        )));
    }
    let mut out = vec![0.0; d];
    for i in 0..d / 2 {
        let angle = k as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
        out[2 * i] = angle.sin();
        out[2 * i + 1] = angle.cos();
    }
    Ok(out)
}

fn check_input(g: &PreparedGraph, params: &DualEncoderParams, delta: Option<&Tensor>) -> Result<()> {
    let d = g.graph.feat_dim();
    if d != params.dims.feat_dim {
        return Err(DetaError::ShapeMismatch {
            op: "branch forward",
            lhs: vec![g.node_count(), d],
            rhs: vec![params.dims.feat_dim],
        });
    }
    if let Some(delta) = delta {
        let want = vec![g.node_count(), d];
        if delta.shape() != want {
            return Err(DetaError::ShapeMismatch {
                op: "perturbation",
                lhs: delta.shape(),
                rhs: want,
            });
        }
    }
    Ok(())
}

fn input_tensor(tape: &Tape, g: &PreparedGraph, delta: Option<&Tensor>) -> Result<Tensor> {
    let x = g.features_tensor();
    match delta {
        Some(delta) => tape.add(&x, delta),
        None => Ok(x),
    }
}

/// Mean over node embeddings, as a `[1, d]` row.
pub fn readout(tape: &Tape, node_embeddings: &Tensor) -> Result<Tensor> {
    let shape = node_embeddings.shape();
    if shape.len() != 2 || shape[0] == 0 {
        return Err(DetaError::Empty("readout over zero nodes".into()));
    }
    let n = shape[0];
    let pool = Tensor::filled(vec![1, n], 1.0 / n as f64);
    tape.matmul(&pool, node_embeddings)
}

fn apply_mlp(tape: &Tape, mlp: &Mlp, input: &Tensor) -> Result<Tensor> {
    let mut x = input.clone();
    let last = mlp.layers.len() - 1;
    for (i, layer) in mlp.layers.iter().enumerate() {
        x = tape.add(&tape.matmul(&x, &layer.weight)?, &layer.bias)?;
        if i != last {
            x = tape.relu(&x)?;
        }
    }
    Ok(x)
}

/// Message-passing branch: stacked `ReLU(A_hat H W)` layers from the (possibly
/// perturbed) features, then mean readout and the MP hazard head.
pub fn mp_forward(
    tape: &Tape,
    g: &PreparedGraph,
    params: &DualEncoderParams,
    delta: Option<&Tensor>,
) -> Result<BranchOutput> {
    check_input(g, params, delta)?;
    let adj = g.adj_tensor();
    let mut h = input_tensor(tape, g, delta)?;
    for w in &params.mp_layers {
        h = tape.relu(&tape.matmul(&tape.matmul(&adj, &h)?, w)?)?;
    }
    let graph_embedding = readout(tape, &h)?;
    let logits = apply_mlp(tape, &params.head_mp, &graph_embedding)?;
    let hazard = tape.softmax_rows(&logits)?;
    Ok(BranchOutput {
        node_embeddings: h,
        graph_embedding,
        hazard,
    })
}

/// Shortest-path branch. Per layer, every neighbor at distance `k` sends
/// `ReLU(m_v + TE(k))`; the summed messages pass through the aggregate map and
/// are combined with the node's own transformed representation.
pub fn sp_forward(
    tape: &Tape,
    g: &PreparedGraph,
    params: &DualEncoderParams,
    delta: Option<&Tensor>,
) -> Result<BranchOutput> {
    check_input(g, params, delta)?;
    if g.sp_masks.len() != params.dims.k_sp {
        return Err(DetaError::DimensionMismatch {
            field: "k_sp".into(),
            expected: params.dims.k_sp.to_string(),
            found: g.sp_masks.len().to_string(),
        });
    }
    let n = g.node_count();
    let mut m = input_tensor(tape, g, delta)?;
    for layer in &params.sp_layers {
        let width = m.shape()[1];
        let mut agg = Tensor::zeros(vec![n, width]);
        for k in 1..=params.dims.k_sp {
            if !g.sp_mask_nonzero[k - 1] {
                continue;
            }
            let te = Tensor::row(position_encoding(k, width)?);
            let messages = tape.relu(&tape.add(&m, &te)?)?;
            let gathered = tape.matmul(&g.sp_mask_tensor(k), &messages)?;
            agg = tape.add(&gathered, &agg)?;
        }
        let self_term = tape.matmul(&m, &layer.combine)?;
        let agg_term = tape.matmul(&agg, &layer.aggregate)?;
        m = tape.relu(&tape.add(&self_term, &agg_term)?)?;
    }
    let graph_embedding = readout(tape, &m)?;
    let logits = apply_mlp(tape, &params.head_sp, &graph_embedding)?;
    let hazard = tape.softmax_rows(&logits)?;
    Ok(BranchOutput {
        node_embeddings: m,
        graph_embedding,
        hazard,
    })
}

/// Probability that the `(embedding, category distribution)` pair comes from
/// the source domain: sigmoid MLP on their concatenation.
pub fn domain_classifier(
    tape: &Tape,
    params: &DualEncoderParams,
    graph_embedding: &Tensor,
    category_dist: &Tensor,
) -> Result<Tensor> {
    let joint = tape.concat_cols(graph_embedding, category_dist)?;
    let want = params.dims.hidden + params.dims.k_bins;
    if joint.shape() != vec![1, want] {
        return Err(DetaError::ShapeMismatch {
            op: "domain_classifier",
            lhs: joint.shape(),
            rhs: vec![1, want],
        });
    }
    let logit = apply_mlp(tape, &params.dclf, &joint)?;
    tape.sigmoid(&logit)
}

/// Inference-time prediction: elementwise mean of the two branch hazards,
/// renormalized to sum exactly one.
pub fn fused_predict(g: &PreparedGraph, params: &DualEncoderParams) -> Result<Vec<f64>> {
    let tape = Tape::new();
    let mp = mp_forward(&tape, g, params, None)?;
    let sp = sp_forward(&tape, g, params, None)?;
    let a = mp.hazard.data();
    let b = sp.hazard.data();
    let mut fused: Vec<f64> = a.iter().zip(&b).map(|(x, y)| 0.5 * (x + y)).collect();
    let sum: f64 = fused.iter().sum();
    for v in &mut fused {
        *v /= sum;
    }
    Ok(fused)
}

/// Both branch graph embeddings concatenated, with the fused predicted bin;
/// the row format of the embedding export.
pub fn export_embedding(g: &PreparedGraph, params: &DualEncoderParams) -> Result<(Vec<f64>, usize)> {
    let tape = Tape::new();
    let mp = mp_forward(&tape, g, params, None)?;
    let sp = sp_forward(&tape, g, params, None)?;
    let mut emb = mp.graph_embedding.data();
    emb.extend(sp.graph_embedding.data());
    let fused = fused_predict(g, params)?;
    let bin = 1 + fused
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
        .map(|(i, _)| i)
        .unwrap();
    Ok((emb, bin))
}

// ── Checkpoints ──────────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct NamedTensor {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    dims: EncoderDims,
    tensors: Vec<NamedTensor>,
}

/// Writes all parameters as a self-describing JSON map; lossless for f64.
pub fn save_checkpoint(path: &Path, params: &DualEncoderParams) -> Result<()> {
    let file = CheckpointFile {
        dims: params.dims.clone(),
        tensors: params
            .named_tensors()
            .into_iter()
            .map(|(name, t)| NamedTensor {
                name,
                shape: t.shape(),
                data: t.data(),
            })
            .collect(),
    };
    let out = std::fs::File::create(path)?;
    let mut w = BufWriter::new(out);
    serde_json::to_writer(&mut w, &file).map_err(|e| DetaError::Parse(e.to_string()))?;
    use std::io::Write;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

/// Loads a checkpoint, validating that every expected tensor is present with
/// the right shape.
pub fn load_checkpoint(path: &Path) -> Result<DualEncoderParams> {
    let file = std::fs::File::open(path)?;
    let parsed: CheckpointFile = serde_json::from_reader(BufReader::new(file))
        .map_err(|e| DetaError::Parse(format!("{}: {e}", path.display())))?;
    // Start from a zero-initialized skeleton with the stored dims, then fill.
    let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(0);
    let params = DualEncoderParams::init(parsed.dims, &mut rng)?;
    let named = params.named_tensors();
    if named.len() != parsed.tensors.len() {
        return Err(DetaError::DimensionMismatch {
            field: "tensors".into(),
            expected: named.len().to_string(),
            found: parsed.tensors.len().to_string(),
        });
    }
    for (want, stored) in named.iter().zip(&parsed.tensors) {
        if want.0 != stored.name {
            return Err(DetaError::DimensionMismatch {
                field: stored.name.clone(),
                expected: want.0.clone(),
                found: stored.name.clone(),
            });
        }
        if want.1.shape() != stored.shape {
            return Err(DetaError::DimensionMismatch {
                field: stored.name.clone(),
                expected: format!("{:?}", want.1.shape()),
                found: format!("{:?}", stored.shape),
            });
        }
        want.1.set_data(stored.data.clone())?;
    }
    Ok(params)
}

use rand_chacha::rand_core::SeedableRng;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graphs::Domain;
    use rand_chacha::ChaCha20Rng;

    fn dims(feat_dim: usize, hidden: usize, k_bins: usize) -> EncoderDims {
        EncoderDims {
            feat_dim,
            hidden,
            mp_layers: 2,
            sp_layers: 2,
            k_sp: 2,
            k_bins,
            head_hidden: 4,
            dclf_hidden: 4,
        }
    }

    fn graph(n: usize, d: usize, edges: Vec<(usize, usize)>, feats: Vec<f64>) -> PreparedGraph {
        let g = WSIGraph::new(n, d, feats, edges, None, Domain::Source).unwrap();
        PreparedGraph::new(g, 2)
    }

    fn random_graph(n: usize, d: usize, p: f64, rng: &mut ChaCha20Rng) -> PreparedGraph {
        use rand::Rng;
        let feats: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut edges = Vec::new();
        for a in 0..n {
            for b in (a + 1)..n {
                if rng.gen_range(0.0..1.0) < p {
                    edges.push((a, b));
                }
            }
        }
        graph(n, d, edges, feats)
    }

    #[test]
    fn position_encoding_at_zero_alternates() {
        let te = position_encoding(0, 6).unwrap();
        assert_eq!(te, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn position_encoding_direct_values() {
        let te = position_encoding(1, 2).unwrap();
        assert!((te[0] - 1f64.sin()).abs() < 1e-15);
        assert!((te[1] - 1f64.cos()).abs() < 1e-15);
        assert!((te[0] - 0.8414709848078965).abs() < 1e-15);
        assert!((te[1] - 0.5403023058681398).abs() < 1e-15);
    }

    #[test]
    fn position_encoding_bounded_and_rejects_odd_width() {
        for k in [0, 1, 5, 100] {
            for d in [2, 8, 64] {
                let te = position_encoding(k, d).unwrap();
                assert!(te.iter().all(|v| (-1.0..=1.0).contains(v)));
            }
        }
        assert!(position_encoding(1, 3).is_err());
    }

    #[test]
    fn mp_single_node_identity_layer_is_identity() {
        let mut d = dims(3, 3, 2);
        d.mp_layers = 1;
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let params = {
            let p = DualEncoderParams::init(d, &mut rng).unwrap();
            p.mp_layers[0]
                .set_data(vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0])
                .unwrap();
            p
        };
        let g = graph(1, 3, vec![], vec![0.5, 1.5, 2.5]);
        let tape = Tape::new();
        let out = mp_forward(&tape, &g, &params, None).unwrap();
        assert_eq!(out.node_embeddings.data(), vec![0.5, 1.5, 2.5]);
    }

    #[test]
    fn zero_features_give_uniform_mp_hazard() {
        // Zero features stay zero through the GCN layers, and the zero-bias
        // head maps them to zero logits, hence a uniform softmax. The SP
        // branch is excluded: its position encodings inject nonzero messages.
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let params = DualEncoderParams::init(dims(4, 4, 4), &mut rng).unwrap();
        let g = graph(3, 4, vec![(0, 1), (1, 2)], vec![0.0; 12]);
        let tape = Tape::new();
        let out = mp_forward(&tape, &g, &params, None).unwrap();
        for v in out.hazard.data() {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn mp_matches_hand_rolled_oracle() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let g = random_graph(5, 3, 0.5, &mut rng);
        let params = DualEncoderParams::init(dims(3, 4, 3), &mut rng).unwrap();
        let tape = Tape::new();
        let out = mp_forward(&tape, &g, &params, None).unwrap();

        // Independent reimplementation with raw loops.
        let n = 5;
        let adj = normalized_adjacency(&g.graph);
        let mut h: Vec<Vec<f64>> = (0..n).map(|i| g.graph.feature_row(i).to_vec()).collect();
        for w in &params.mp_layers {
            let wshape = w.shape();
            let wd = w.data();
            let (win, wout) = (wshape[0], wshape[1]);
            // ah = adj @ h
            let mut ah = vec![vec![0.0; win]; n];
            for i in 0..n {
                for j in 0..n {
                    for t in 0..win {
                        ah[i][t] += adj[i * n + j] * h[j][t];
                    }
                }
            }
            let mut next = vec![vec![0.0; wout]; n];
            for i in 0..n {
                for o in 0..wout {
                    let mut s = 0.0;
                    for t in 0..win {
                        s += ah[i][t] * wd[t * wout + o];
                    }
                    next[i][o] = s.max(0.0);
                }
            }
            h = next;
        }
        let flat: Vec<f64> = h.iter().flatten().cloned().collect();
        let got = out.node_embeddings.data();
        for (a, b) in got.iter().zip(&flat) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        // Pooled embedding, head, softmax.
        let hid = h[0].len();
        let mut pooled = vec![0.0; hid];
        for row in &h {
            for (p, v) in pooled.iter_mut().zip(row) {
                *p += v / n as f64;
            }
        }
        let mut x = pooled;
        for (li, layer) in params.head_mp.layers.iter().enumerate() {
            let wshape = layer.weight.shape();
            let wd = layer.weight.data();
            let bd = layer.bias.data();
            let mut nx = vec![0.0; wshape[1]];
            for o in 0..wshape[1] {
                for (t, xv) in x.iter().enumerate() {
                    nx[o] += xv * wd[t * wshape[1] + o];
                }
                nx[o] += bd[o];
            }
            if li + 1 != params.head_mp.layers.len() {
                for v in &mut nx {
                    *v = v.max(0.0);
                }
            }
            x = nx;
        }
        let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        for (a, b) in out.hazard.data().iter().zip(exps.iter().map(|e| e / z)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn sp_isolated_node_uses_self_path_only() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let mut d = dims(4, 4, 2);
        d.sp_layers = 1;
        let params = DualEncoderParams::init(d, &mut rng).unwrap();
        let g = graph(1, 4, vec![], vec![0.3, -0.2, 0.7, 0.1]);
        let tape = Tape::new();
        let out = sp_forward(&tape, &g, &params, None).unwrap();
        // Oracle: relu(x @ combine) with no aggregate contribution.
        let w = params.sp_layers[0].combine.data();
        let x = [0.3, -0.2, 0.7, 0.1];
        for o in 0..4 {
            let mut s = 0.0;
            for t in 0..4 {
                s += x[t] * w[t * 4 + o];
            }
            let want = s.max(0.0);
            assert!((out.node_embeddings.data()[o] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn sp_path_graph_identity_weights_hand_formula() {
        let mut d = dims(2, 2, 2);
        d.sp_layers = 1;
        d.k_sp = 2;
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let params = {
            let p = DualEncoderParams::init(d, &mut rng).unwrap();
            p.sp_layers[0].combine.set_data(vec![1.0, 0.0, 0.0, 1.0]).unwrap();
            p.sp_layers[0].aggregate.set_data(vec![1.0, 0.0, 0.0, 1.0]).unwrap();
            p
        };
        let feats = vec![0.2, -0.4, 1.0, 0.5, -0.3, 0.8];
        let g = graph(3, 2, vec![(0, 1), (1, 2)], feats.clone());
        let tape = Tape::new();
        let out = sp_forward(&tape, &g, &params, None).unwrap();
        // Node 0: relu(m0 + relu(m1 + TE(1)) + relu(m2 + TE(2))).
        let te1 = position_encoding(1, 2).unwrap();
        let te2 = position_encoding(2, 2).unwrap();
        for j in 0..2 {
            let m1 = (feats[2 + j] + te1[j]).max(0.0);
            let m2 = (feats[4 + j] + te2[j]).max(0.0);
            let want = (feats[j] + m1 + m2).max(0.0);
            assert!((out.node_embeddings.data()[j] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn branch_outputs_are_valid_distributions() {
        let mut rng = ChaCha20Rng::seed_from_u64(19);
        let params = DualEncoderParams::init(dims(4, 6, 4), &mut rng).unwrap();
        for _ in 0..20 {
            let g = random_graph(6, 4, 0.4, &mut rng);
            let tape = Tape::new();
            for out in [
                mp_forward(&tape, &g, &params, None).unwrap(),
                sp_forward(&tape, &g, &params, None).unwrap(),
            ] {
                let h = out.hazard.data();
                let sum: f64 = h.iter().sum();
                assert!((sum - 1.0).abs() < 1e-9);
                assert!(h.iter().all(|&v| v > 0.0 && v < 1.0));
            }
        }
    }

    #[test]
    fn branches_are_permutation_equivariant() {
        let mut rng = ChaCha20Rng::seed_from_u64(23);
        let params = DualEncoderParams::init(dims(4, 4, 3), &mut rng).unwrap();
        let n = 5;
        let feats: Vec<f64> = (0..n * 4).map(|i| (i as f64 * 0.37).sin()).collect();
        let edges = vec![(0, 1), (1, 2), (2, 3), (3, 4), (0, 4)];
        let g = graph(n, 4, edges.clone(), feats.clone());

        let perm: Vec<usize> = vec![3, 0, 4, 1, 2];
        let mut pf = vec![0.0; n * 4];
        for i in 0..n {
            pf[perm[i] * 4..(perm[i] + 1) * 4].copy_from_slice(&feats[i * 4..(i + 1) * 4]);
        }
        let pe: Vec<(usize, usize)> = edges.iter().map(|&(a, b)| (perm[a], perm[b])).collect();
        let gp = graph(n, 4, pe, pf);

        let tape = Tape::new();
        for fwd in [mp_forward, sp_forward] {
            let out = fwd(&tape, &g, &params, None).unwrap();
            let out_p = fwd(&tape, &gp, &params, None).unwrap();
            let e = out.node_embeddings.data();
            let ep = out_p.node_embeddings.data();
            let w = out.node_embeddings.shape()[1];
            for i in 0..n {
                for j in 0..w {
                    assert!(
                        (e[i * w + j] - ep[perm[i] * w + j]).abs() < 1e-9,
                        "node embedding equivariance"
                    );
                }
            }
            for (a, b) in out
                .graph_embedding
                .data()
                .iter()
                .zip(out_p.graph_embedding.data())
            {
                assert!((a - b).abs() < 1e-9);
            }
            for (a, b) in out.hazard.data().iter().zip(out_p.hazard.data()) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn zero_perturbation_is_bitwise_identical() {
        let mut rng = ChaCha20Rng::seed_from_u64(29);
        let params = DualEncoderParams::init(dims(4, 4, 3), &mut rng).unwrap();
        let g = random_graph(5, 4, 0.5, &mut rng);
        let zero = Tensor::zeros(vec![5, 4]);
        let tape = Tape::new();
        for fwd in [mp_forward, sp_forward] {
            let plain = fwd(&tape, &g, &params, None).unwrap();
            let perturbed = fwd(&tape, &g, &params, Some(&zero)).unwrap();
            let a: Vec<u64> = plain.hazard.data().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u64> = perturbed.hazard.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn perturbation_shape_checked() {
        let mut rng = ChaCha20Rng::seed_from_u64(31);
        let params = DualEncoderParams::init(dims(3, 4, 3), &mut rng).unwrap();
        let g = random_graph(5, 3, 0.5, &mut rng);
        let bad = Tensor::zeros(vec![4, 3]);
        let tape = Tape::new();
        assert!(mp_forward(&tape, &g, &params, Some(&bad)).is_err());
    }

    #[test]
    fn readout_examples() {
        let tape = Tape::new();
        let single = Tensor::matrix(1, 2, vec![3.0, 4.0]).unwrap();
        assert_eq!(readout(&tape, &single).unwrap().data(), vec![3.0, 4.0]);
        let two = Tensor::matrix(2, 2, vec![0.0, 0.0, 2.0, 4.0]).unwrap();
        assert_eq!(readout(&tape, &two).unwrap().data(), vec![1.0, 2.0]);
    }

    #[test]
    fn dclf_zero_weights_output_half_and_open_interval() {
        let mut rng = ChaCha20Rng::seed_from_u64(37);
        let params = DualEncoderParams::init(dims(3, 4, 3), &mut rng).unwrap();
        for l in &params.dclf.layers {
            l.weight.set_data(vec![0.0; l.weight.numel()]).unwrap();
        }
        let tape = Tape::new();
        let emb = Tensor::matrix(1, 4, vec![0.3, -0.5, 2.0, 1.0]).unwrap();
        let dist = Tensor::matrix(1, 3, vec![0.2, 0.5, 0.3]).unwrap();
        let p = domain_classifier(&tape, &params, &emb, &dist).unwrap();
        assert_eq!(p.data(), vec![0.5]);
        // Any finite input stays strictly inside (0, 1).
        let params = DualEncoderParams::init(dims(3, 4, 3), &mut rng).unwrap();
        let emb = Tensor::matrix(1, 4, vec![100.0, -100.0, 55.0, 0.0]).unwrap();
        let p = domain_classifier(&tape, &params, &emb, &dist).unwrap();
        let v = p.item();
        assert!(v > 0.0 && v < 1.0);
    }

    #[test]
    fn dclf_gradient_matches_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(41);
        let params = DualEncoderParams::init(dims(3, 4, 3), &mut rng).unwrap();
        let emb = Tensor::matrix(1, 4, vec![0.3, -0.5, 0.9, 0.2]).unwrap();
        let dist = Tensor::matrix(1, 3, vec![0.2, 0.5, 0.3]).unwrap();
        let eval = || {
            let tape = Tape::new();
            let p = domain_classifier(&tape, &params, &emb, &dist).unwrap();
            let root = tape.sum(&tape.log(&p).unwrap()).unwrap();
            (tape, root)
        };
        let (tape, root) = eval();
        tape.backward(&root).unwrap();
        let analytic = emb.grad().unwrap();
        for i in 0..4 {
            let h = 1e-5;
            let orig = emb.data();
            let mut plus = orig.clone();
            plus[i] += h;
            emb.set_data(plus).unwrap();
            let fp = eval().1.item();
            let mut minus = orig.clone();
            minus[i] -= h;
            emb.set_data(minus).unwrap();
            let fm = eval().1.item();
            emb.set_data(orig).unwrap();
            let fd = (fp - fm) / (2.0 * h);
            let denom = analytic[i].abs().max(fd.abs()).max(1.0);
            assert!((analytic[i] - fd).abs() / denom < 1e-6);
        }
    }

    #[test]
    fn fused_predict_examples() {
        let mut rng = ChaCha20Rng::seed_from_u64(43);
        let params = DualEncoderParams::init(dims(4, 4, 4), &mut rng).unwrap();
        // Zeroed head weights force both branch hazards uniform, so the
        // fusion is uniform too.
        for head in [&params.head_mp, &params.head_sp] {
            for l in &head.layers {
                l.weight.set_data(vec![0.0; l.weight.numel()]).unwrap();
            }
        }
        let g = random_graph(5, 4, 0.5, &mut rng);
        let fused = fused_predict(&g, &params).unwrap();
        for v in &fused {
            assert!((v - 0.25).abs() < 1e-12);
        }
        // Random parameters still yield a distribution summing to one.
        let params = DualEncoderParams::init(dims(4, 4, 4), &mut rng).unwrap();
        for _ in 0..10 {
            let g = random_graph(5, 4, 0.5, &mut rng);
            let fused = fused_predict(&g, &params).unwrap();
            let sum: f64 = fused.iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn fused_mean_of_branch_hazards() {
        // Directly verify the averaging rule on a case with distinct branches.
        let mut rng = ChaCha20Rng::seed_from_u64(47);
        let params = DualEncoderParams::init(dims(2, 4, 2), &mut rng).unwrap();
        let g = random_graph(4, 2, 0.6, &mut rng);
        let tape = Tape::new();
        let mp = mp_forward(&tape, &g, &params, None).unwrap().hazard.data();
        let sp = sp_forward(&tape, &g, &params, None).unwrap().hazard.data();
        let fused = fused_predict(&g, &params).unwrap();
        let want: Vec<f64> = mp.iter().zip(&sp).map(|(a, b)| 0.5 * (a + b)).collect();
        let z: f64 = want.iter().sum();
        for (f, w) in fused.iter().zip(want) {
            assert!((f - w / z).abs() < 1e-12);
        }
    }

    #[test]
    fn end_to_end_branch_gradients_match_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(53);
        let params = DualEncoderParams::init(dims(4, 4, 3), &mut rng).unwrap();
        let g = random_graph(6, 4, 0.5, &mut rng);
        for which in [0usize, 1] {
            let build = || {
                let tape = Tape::new();
                let out = if which == 0 {
                    mp_forward(&tape, &g, &params, None).unwrap()
                } else {
                    sp_forward(&tape, &g, &params, None).unwrap()
                };
                let root = tape
                    .sum(&tape.log(&tape.clamp_min(&out.hazard, 1e-12).unwrap()).unwrap())
                    .unwrap();
                (tape, root)
            };
            let (tape, root) = build();
            tape.backward(&root).unwrap();
            let tensors = if which == 0 { params.theta() } else { params.phi() };
            for t in &tensors {
                let analytic = t.grad().expect("param reachable");
                for i in 0..t.numel().min(6) {
                    let h = 1e-5;
                    let orig = t.data();
                    let mut plus = orig.clone();
                    plus[i] += h;
                    t.set_data(plus).unwrap();
                    let fp = build().1.item();
                    let mut minus = orig.clone();
                    minus[i] -= h;
                    t.set_data(minus).unwrap();
                    let fm = build().1.item();
                    t.set_data(orig).unwrap();
                    let fd = (fp - fm) / (2.0 * h);
                    let denom = analytic[i].abs().max(fd.abs()).max(1.0);
                    assert!(
                        (analytic[i] - fd).abs() / denom < 1e-4,
                        "branch {which}: {} vs {}",
                        analytic[i],
                        fd
                    );
                }
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        let mut rng = ChaCha20Rng::seed_from_u64(59);
        let params = DualEncoderParams::init(dims(3, 4, 3), &mut rng).unwrap();
        save_checkpoint(&path, &params).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.dims, params.dims);
        for ((n1, t1), (n2, t2)) in params.named_tensors().iter().zip(loaded.named_tensors()) {
            assert_eq!(*n1, n2);
            let a: Vec<u64> = t1.data().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u64> = t2.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b, "tensor {n1} not bit-identical");
        }
        // Saving the loaded params reproduces the file byte for byte.
        let path2 = dir.path().join("ckpt2.json");
        save_checkpoint(&path2, &loaded).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
    }
}
