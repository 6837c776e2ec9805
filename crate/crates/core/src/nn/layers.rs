//! Graph attention layer, global attention pooling and dense head.
//!
//! The layer computes, per graph,
//!
//! ```text
//! c_ij = ReLU(aᵀ [ (XW)_i ‖ (XW)_j ])
//! α_ij = softmax over j ∈ N(i) of c_ij
//! Z    = ReLU(α X W + b)
//! ```
//!
//! and pooling reduces node features to one vector per graph:
//! `Σ_i (σ(X W₁ + b₁) ⊙ (X W₂ + b₂))_i`.

use rand::Rng;

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A batch of graphs that share one node count. Rows of node-feature matrices
/// are laid out graph-major.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphBatch {
    block: usize,
    graphs: usize,
    mask: Vec<bool>,
    edge_attr: Option<Tensor>,
}

impl GraphBatch {
    /// `graphs` copies of one adjacency. `edge_attr`, when given, is the
    /// `P × P × S` edge tensor and enters the attention logits.
    pub fn uniform(
        adjacency: &Tensor,
        graphs: usize,
        self_loops: bool,
        edge_attr: Option<&Tensor>,
    ) -> Result<Self> {
        let p = adjacency.rows();
        if adjacency.shape() != [p, p] || p == 0 {
            return Err(Error::invalid(format!(
                "adjacency must be square, got {:?}",
                adjacency.shape()
            )));
        }
        if adjacency.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::invalid("adjacency must be binary"));
        }
        if graphs == 0 {
            return Err(Error::invalid("empty graph batch"));
        }
        let single: Vec<bool> = (0..p * p)
            .map(|k| adjacency.data()[k] == 1.0 || (self_loops && k / p == k % p))
            .collect();
        let edge_attr = edge_attr
            .map(|e| {
                if e.shape().len() != 3 || e.shape()[..2] != [p, p] {
                    return Err(Error::invalid(format!(
                        "edge attributes must be {p}×{p}×S, got {:?}",
                        e.shape()
                    )));
                }
                let s = e.shape()[2];
                let mut data = Vec::with_capacity(graphs * e.len());
                for _ in 0..graphs {
                    data.extend_from_slice(e.data());
                }
                Tensor::matrix(graphs * p * p, s, data)
            })
            .transpose()?;
        Ok(GraphBatch {
            block: p,
            graphs,
            mask: single.repeat(graphs),
            edge_attr,
        })
    }

    pub fn nodes_per_graph(&self) -> usize {
        self.block
    }

    pub fn graphs(&self) -> usize {
        self.graphs
    }

    pub fn total_nodes(&self) -> usize {
        self.block * self.graphs
    }

    pub fn edge_dim(&self) -> usize {
        self.edge_attr.as_ref().map_or(0, Tensor::cols)
    }
}

/// Glorot-uniform bound `sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_limit(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

pub(crate) fn glorot<R: Rng + ?Sized>(rows: usize, cols: usize, shape: Vec<usize>, rng: &mut R) -> Tensor {
    let limit = glorot_limit(rows, cols);
    let data = (0..rows * cols).map(|_| rng.random_range(-limit..=limit)).collect();
    Tensor::new(shape, data).expect("glorot shape")
}

/// Weights of one graph attention layer.
#[derive(Clone, Debug, PartialEq)]
pub struct GatLayerParams {
    /// `F × F′`
    pub weight: Tensor,
    /// `2F′ (+ S)`: source half, target half, then the optional edge part.
    pub attn_kernel: Tensor,
    /// `F′`
    pub bias: Tensor,
    pub dropout_rate: f64,
}

impl GatLayerParams {
    pub fn zeros(f_in: usize, f_out: usize, edge_dim: usize, dropout_rate: f64) -> Self {
        GatLayerParams {
            weight: Tensor::zeros(vec![f_in, f_out]),
            attn_kernel: Tensor::zeros(vec![2 * f_out + edge_dim]),
            bias: Tensor::zeros(vec![f_out]),
            dropout_rate,
        }
    }

    pub fn glorot<R: Rng + ?Sized>(
        f_in: usize,
        f_out: usize,
        edge_dim: usize,
        dropout_rate: f64,
        rng: &mut R,
    ) -> Self {
        let k = 2 * f_out + edge_dim;
        GatLayerParams {
            weight: glorot(f_in, f_out, vec![f_in, f_out], rng),
            attn_kernel: glorot(k, 1, vec![k], rng),
            bias: Tensor::zeros(vec![f_out]),
            dropout_rate,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn validate(&self) -> Result<()> {
        let (f, fp) = (self.in_dim(), self.out_dim());
        if self.weight.shape().len() != 2
            || self.bias.len() != fp
            || self.attn_kernel.len() < 2 * fp
        {
            return Err(Error::invalid(format!(
                "inconsistent attention layer: W {:?}, a {:?}, b {:?}",
                self.weight.shape(),
                self.attn_kernel.shape(),
                self.bias.shape()
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::invalid(format!("dropout rate {} outside [0, 1)", self.dropout_rate)));
        }
        if !(self.weight.is_finite() && self.attn_kernel.is_finite() && self.bias.is_finite()) {
            return Err(Error::NonFinite {
                what: "attention layer".into(),
                detail: format!("{f}→{fp} weights"),
            });
        }
        Ok(())
    }
}

/// Weights of the global attention pooling layer.
#[derive(Clone, Debug, PartialEq)]
pub struct PoolParams {
    pub gate_weight: Tensor,
    pub gate_bias: Tensor,
    pub value_weight: Tensor,
    pub value_bias: Tensor,
}

impl PoolParams {
    pub fn zeros(f_in: usize, c: usize) -> Self {
        PoolParams {
            gate_weight: Tensor::zeros(vec![f_in, c]),
            gate_bias: Tensor::zeros(vec![c]),
            value_weight: Tensor::zeros(vec![f_in, c]),
            value_bias: Tensor::zeros(vec![c]),
        }
    }

    pub fn glorot<R: Rng + ?Sized>(f_in: usize, c: usize, rng: &mut R) -> Self {
        PoolParams {
            gate_weight: glorot(f_in, c, vec![f_in, c], rng),
            gate_bias: Tensor::zeros(vec![c]),
            value_weight: glorot(f_in, c, vec![f_in, c], rng),
            value_bias: Tensor::zeros(vec![c]),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (f, c) = (self.gate_weight.rows(), self.gate_weight.cols());
        if self.value_weight.shape() != [f, c] || self.gate_bias.len() != c || self.value_bias.len() != c {
            return Err(Error::invalid(format!(
                "inconsistent pooling layer: W1 {:?}, W2 {:?}",
                self.gate_weight.shape(),
                self.value_weight.shape()
            )));
        }
        Ok(())
    }
}

/// Fully-connected linear layer.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl DenseParams {
    pub fn zeros(f_in: usize, f_out: usize) -> Self {
        DenseParams {
            weight: Tensor::zeros(vec![f_in, f_out]),
            bias: Tensor::zeros(vec![f_out]),
        }
    }

    pub fn glorot<R: Rng + ?Sized>(f_in: usize, f_out: usize, rng: &mut R) -> Self {
        DenseParams {
            weight: glorot(f_in, f_out, vec![f_in, f_out], rng),
            bias: Tensor::zeros(vec![f_out]),
        }
    }
}

pub struct GatVars {
    pub weight: Var,
    pub attn_kernel: Var,
    pub bias: Var,
}

pub struct PoolVars {
    pub gate_weight: Var,
    pub gate_bias: Var,
    pub value_weight: Var,
    pub value_bias: Var,
}

pub struct DenseVars {
    pub weight: Var,
    pub bias: Var,
}

/// Inverted dropout; the identity in eval mode or at rate 0.
pub fn dropout<R: Rng + ?Sized>(
    tape: &mut Tape<'_>,
    x: Var,
    rate: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<Var> {
    if mode == Mode::Eval || rate == 0.0 {
        return Ok(x);
    }
    let keep = 1.0 / (1.0 - rate);
    let shape = tape.value(x).shape().to_vec();
    let n = tape.value(x).len();
    let mask = (0..n)
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
        .collect();
    let mask = tape.constant(Tensor::new(shape, mask)?);
    tape.mul(x, mask)
}

/// Raw (pre-softmax) attention logits for every ordered node pair inside each graph.
pub fn record_attention_logits(
    tape: &mut Tape<'_>,
    z: Var,
    attn_kernel: Var,
    graph: &GraphBatch,
) -> Result<Var> {
    let (rows, f_out) = (tape.value(z).rows(), tape.value(z).cols());
    let k = tape.value(attn_kernel).len();
    if rows != graph.total_nodes() || k != 2 * f_out + graph.edge_dim() {
        return Err(Error::invalid(format!(
            "attention kernel of {k} entries for {f_out} features and {} edge features over {rows} nodes",
            graph.edge_dim()
        )));
    }
    let a_src = tape.slice(attn_kernel, 0, f_out)?;
    let a_dst = tape.slice(attn_kernel, f_out, f_out)?;
    let s = tape.matmul(z, a_src)?;
    let t = tape.matmul(z, a_dst)?;
    let mut logits = tape.pair_sum(s, t, graph.block)?;
    if let Some(edges) = &graph.edge_attr {
        let a_edge = tape.slice(attn_kernel, 2 * f_out, edges.cols())?;
        let e = tape.constant(edges.clone());
        let term = tape.matmul(e, a_edge)?;
        let term = tape.reshape(term, vec![rows, graph.block])?;
        logits = tape.add(logits, term)?;
    }
    tape.relu(logits)
}

/// Records one attention layer on the tape.
pub fn record_gat_layer<R: Rng + ?Sized>(
    tape: &mut Tape<'_>,
    x: Var,
    vars: &GatVars,
    dropout_rate: f64,
    graph: &GraphBatch,
    mode: Mode,
    rng: &mut R,
) -> Result<Var> {
    let x = dropout(tape, x, dropout_rate, mode, rng)?;
    let z = tape.matmul(x, vars.weight)?;
    let logits = record_attention_logits(tape, z, vars.attn_kernel, graph)?;
    let alpha = tape.masked_softmax(logits, &graph.mask)?;
    let alpha = dropout(tape, alpha, dropout_rate, mode, rng)?;
    let mixed = tape.block_aggregate(alpha, z)?;
    let pre = tape.add_bias(mixed, vars.bias)?;
    tape.relu(pre)
}

/// Records global attention pooling: one `C`-vector per graph.
pub fn record_pool(tape: &mut Tape<'_>, x: Var, vars: &PoolVars, graph: &GraphBatch) -> Result<Var> {
    let gate = tape.matmul(x, vars.gate_weight)?;
    let gate = tape.add_bias(gate, vars.gate_bias)?;
    let gate = tape.sigmoid(gate)?;
    let value = tape.matmul(x, vars.value_weight)?;
    let value = tape.add_bias(value, vars.value_bias)?;
    let gated = tape.mul(gate, value)?;
    tape.block_sum(gated, graph.block)
}

pub fn record_dense(tape: &mut Tape<'_>, x: Var, vars: &DenseVars) -> Result<Var> {
    let y = tape.matmul(x, vars.weight)?;
    tape.add_bias(y, vars.bias)
}

fn check_matrix(t: &Tensor, name: &str) -> Result<()> {
    if t.shape().len() != 2 {
        return Err(Error::invalid(format!("{name} must be a matrix, got {:?}", t.shape())));
    }
    Ok(())
}

/// `c[i][j] = ReLU(aᵀ [x_proj[i] ‖ x_proj[j]])` for one graph of `P` nodes.
pub fn attention_logits(x_proj: &Tensor, attn_kernel: &Tensor) -> Result<Tensor> {
    check_matrix(x_proj, "projected features")?;
    let p = x_proj.rows();
    let graph = GraphBatch::uniform(&Tensor::zeros(vec![p, p]), 1, true, None)?;
    let mut tape = Tape::new();
    let z = tape.constant_ref(x_proj);
    let a = tape.constant_ref(attn_kernel);
    let out = record_attention_logits(&mut tape, z, a, &graph)?;
    Ok(tape.value(out).clone())
}

/// Softmax of each row over the neighbourhood given by `adjacency`
/// (plus the node itself when `self_loops` is set).
pub fn masked_softmax(logits: &Tensor, adjacency: &Tensor, self_loops: bool) -> Result<Tensor> {
    if logits.shape() != adjacency.shape() {
        return Err(Error::invalid(format!(
            "logits {:?} and adjacency {:?} differ in shape",
            logits.shape(),
            adjacency.shape()
        )));
    }
    let graph = GraphBatch::uniform(adjacency, 1, self_loops, None)?;
    let mut tape = Tape::new();
    let x = tape.constant_ref(logits);
    let out = tape.masked_softmax(x, &graph.mask)?;
    Ok(tape.value(out).clone())
}

/// One attention layer applied to a single graph.
pub fn gat_layer<R: Rng + ?Sized>(
    x: &Tensor,
    graph: &GraphBatch,
    params: &GatLayerParams,
    mode: Mode,
    rng: &mut R,
) -> Result<Tensor> {
    params.validate()?;
    check_matrix(x, "node features")?;
    if x.cols() != params.in_dim() {
        return Err(Error::invalid(format!(
            "{} input features for a layer expecting {}",
            x.cols(),
            params.in_dim()
        )));
    }
    let mut tape = Tape::new();
    let xv = tape.constant_ref(x);
    let vars = GatVars {
        weight: tape.constant_ref(&params.weight),
        attn_kernel: tape.constant_ref(&params.attn_kernel),
        bias: tape.constant_ref(&params.bias),
    };
    let out = record_gat_layer(&mut tape, xv, &vars, params.dropout_rate, graph, mode, rng)?;
    Ok(tape.value(out).clone())
}

/// `Σ_i (σ(x W₁ + b₁) ⊙ (x W₂ + b₂))_i` over the nodes of one graph.
pub fn global_attention_pool(x: &Tensor, params: &PoolParams) -> Result<Tensor> {
    params.validate()?;
    check_matrix(x, "node features")?;
    if x.cols() != params.gate_weight.rows() {
        return Err(Error::invalid(format!(
            "{} node features for a pooling layer expecting {}",
            x.cols(),
            params.gate_weight.rows()
        )));
    }
    let p = x.rows();
    let graph = GraphBatch::uniform(&Tensor::zeros(vec![p, p]), 1, true, None)?;
    let mut tape = Tape::new();
    let xv = tape.constant_ref(x);
    let vars = PoolVars {
        gate_weight: tape.constant_ref(&params.gate_weight),
        gate_bias: tape.constant_ref(&params.gate_bias),
        value_weight: tape.constant_ref(&params.value_weight),
        value_bias: tape.constant_ref(&params.value_bias),
    };
    let out = record_pool(&mut tape, xv, &vars, &graph)?;
    let c = tape.value(out).cols();
    tape.value(out).clone().reshaped(vec![c])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pair_adjacency() -> Tensor {
        Tensor::matrix(2, 2, vec![0.0, 1.0, 1.0, 0.0]).unwrap()
    }

    #[test]
    fn zero_kernel_gives_zero_logits() {
        let z = Tensor::matrix(3, 2, vec![1.0, -2.0, 0.5, 3.0, -1.0, 4.0]).unwrap();
        let c = attention_logits(&z, &Tensor::zeros(vec![4])).unwrap();
        assert!(c.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identical_rows_give_symmetric_logits() {
        let z = Tensor::matrix(2, 2, vec![0.3, -0.7, 0.3, -0.7]).unwrap();
        let a = Tensor::vector(vec![1.0, 2.0, -0.5, 0.25]);
        let c = attention_logits(&z, &a).unwrap();
        assert_eq!(c.at(0, 1), c.at(1, 0));
        assert!(attention_logits(&z, &Tensor::zeros(vec![3])).is_err());
    }

    #[test]
    fn softmax_examples() {
        let adj = pair_adjacency();
        let eq = masked_softmax(&Tensor::zeros(vec![2, 2]), &adj, true).unwrap();
        assert_eq!(eq.data(), &[0.5, 0.5, 0.5, 0.5]);
        let single = masked_softmax(&Tensor::filled(vec![2, 2], 3.0), &adj, false).unwrap();
        assert_eq!(single.data(), &[0.0, 1.0, 1.0, 0.0]);
        let l = Tensor::matrix(2, 2, vec![1.0, 2.0, 0.0, 0.0]).unwrap();
        let s = masked_softmax(&l, &adj, true).unwrap();
        assert!((s.at(0, 0) - 0.268_941_421_369_995_1).abs() < 1e-12);
        assert!((s.at(0, 1) - 0.731_058_578_630_004_9).abs() < 1e-12);
    }

    #[test]
    fn isolated_node_without_self_loop_is_degenerate() {
        let adj = Tensor::matrix(2, 2, vec![0.0, 1.0, 0.0, 0.0]).unwrap();
        assert!(matches!(
            masked_softmax(&Tensor::zeros(vec![2, 2]), &adj, false),
            Err(Error::DegenerateRow { row: 1 })
        ));
        assert!(masked_softmax(&Tensor::zeros(vec![2, 2]), &adj, true).is_ok());
    }

    #[test]
    fn uniform_attention_averages_rows() {
        let graph = GraphBatch::uniform(&pair_adjacency(), 1, true, None).unwrap();
        let params = GatLayerParams {
            weight: Tensor::identity(3),
            attn_kernel: Tensor::zeros(vec![6]),
            bias: Tensor::zeros(vec![3]),
            dropout_rate: 0.0,
        };
        let x = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 5.0, 0.0, 1.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = gat_layer(&x, &graph, &params, Mode::Eval, &mut rng).unwrap();
        assert_eq!(out.data(), &[3.0, 1.0, 2.0, 3.0, 1.0, 2.0]);
    }

    #[test]
    fn zero_dropout_train_equals_eval() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let graph = GraphBatch::uniform(&pair_adjacency(), 1, true, None).unwrap();
        let params = GatLayerParams::glorot(5, 4, 0, 0.0, &mut rng);
        let x = glorot(2, 5, vec![2, 5], &mut rng);
        let a = gat_layer(&x, &graph, &params, Mode::Train, &mut rng).unwrap();
        let b = gat_layer(&x, &graph, &params, Mode::Eval, &mut rng).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn dropout_is_active_only_in_training() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let graph = GraphBatch::uniform(&pair_adjacency(), 1, true, None).unwrap();
        let mut params = GatLayerParams::glorot(6, 8, 0, 0.5, &mut rng);
        params.bias = Tensor::filled(vec![8], 0.5);
        let x = Tensor::filled(vec![2, 6], 1.0);
        let e1 = gat_layer(&x, &graph, &params, Mode::Eval, &mut rng).unwrap();
        let e2 = gat_layer(&x, &graph, &params, Mode::Eval, &mut rng).unwrap();
        assert_eq!(e1, e2);
        let t = gat_layer(&x, &graph, &params, Mode::Train, &mut rng).unwrap();
        assert_ne!(t, e1);
    }

    #[test]
    fn pooling_examples() {
        let params = PoolParams {
            gate_weight: Tensor::zeros(vec![2, 2]),
            gate_bias: Tensor::zeros(vec![2]),
            value_weight: Tensor::identity(2),
            value_bias: Tensor::zeros(vec![2]),
        };
        let x = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, -4.0]).unwrap();
        assert_eq!(global_attention_pool(&x, &params).unwrap().data(), &[2.0, -1.0]);

        let params = PoolParams {
            value_bias: Tensor::filled(vec![2], 3.0),
            ..params
        };
        let zeros = Tensor::zeros(vec![3, 2]);
        assert_eq!(global_attention_pool(&zeros, &params).unwrap().data(), &[4.5, 4.5]);
        assert!(global_attention_pool(&Tensor::zeros(vec![3, 5]), &params).is_err());
    }
}
