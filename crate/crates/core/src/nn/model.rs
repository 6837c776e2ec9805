//! The estimator network: two attention layers, gated pooling and a dense head.
//!
//! ```text
//! X (2×M) → GAT (2×128) → GAT (2×32) → pool (128) → dense (D)
//! ```

use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::adam::AdamState;
use super::layers::{
    record_dense, record_gat_layer, record_pool, DenseParams, DenseVars, GatLayerParams, GatVars,
    GraphBatch, Mode, PoolParams, PoolVars,
};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::dataset::{adjacency_tensor, GraphSample, InputScaling};
use crate::error::{Error, Result};

/// What the dense head predicts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputLayout {
    /// `4N` reals: `[Re h; Im h; Re g; Im g]`.
    #[default]
    Complex,
    /// `2N` reals: `[Re h; Re g]`; imaginary parts are predicted as zero.
    RealOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub m_pilots: usize,
    pub n_elements: usize,
    pub gat_dims: [usize; 2],
    pub pool_dim: usize,
    pub output: OutputLayout,
    pub self_loops: bool,
    pub edge_fusion: bool,
    pub dropout: f64,
    pub input_scaling: Option<InputScaling>,
}

impl Architecture {
    /// `M → 128 → 32 → 128 → 4N`, self-loops on, dropout 0.5.
    pub fn reference(m_pilots: usize, n_elements: usize) -> Self {
        Architecture {
            m_pilots,
            n_elements,
            gat_dims: [128, 32],
            pool_dim: 128,
            output: OutputLayout::Complex,
            self_loops: true,
            edge_fusion: false,
            dropout: 0.5,
            input_scaling: None,
        }
    }

    pub fn output_dim(&self) -> usize {
        match self.output {
            OutputLayout::Complex => 4 * self.n_elements,
            OutputLayout::RealOnly => 2 * self.n_elements,
        }
    }

    fn edge_dim(&self) -> usize {
        if self.edge_fusion {
            self.m_pilots
        } else {
            0
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.m_pilots == 0 || self.n_elements == 0 || self.gat_dims.contains(&0) || self.pool_dim == 0 {
            return Err(Error::invalid(format!("empty layer in {self:?}")));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid(format!("dropout rate {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    /// Regression target for a stored `4N` label.
    pub fn target(&self, label: &[f32]) -> Vec<f64> {
        let n = self.n_elements;
        let pick = |r: std::ops::Range<usize>| label[r].iter().map(|&v| f64::from(v));
        match self.output {
            OutputLayout::Complex => pick(0..4 * n).collect(),
            OutputLayout::RealOnly => pick(0..n).chain(pick(2 * n..3 * n)).collect(),
        }
    }

    /// Reassembles `(ĥ, ĝ)` from one output row.
    pub fn decode(&self, output: &[f64]) -> Result<(Vec<Complex64>, Vec<Complex64>)> {
        if output.len() != self.output_dim() {
            return Err(Error::invalid(format!(
                "{} outputs for a head of {}",
                output.len(),
                self.output_dim()
            )));
        }
        Ok(decode_output(output, self.n_elements, self.output))
    }
}

fn decode_output(out: &[f64], n: usize, layout: OutputLayout) -> (Vec<Complex64>, Vec<Complex64>) {
    let join = |re: &[f64], im: Option<&[f64]>| -> Vec<Complex64> {
        (0..n)
            .map(|i| Complex64::new(re[i], im.map_or(0.0, |v| v[i])))
            .collect()
    };
    match layout {
        OutputLayout::Complex => (
            join(&out[..n], Some(&out[n..2 * n])),
            join(&out[2 * n..3 * n], Some(&out[3 * n..])),
        ),
        OutputLayout::RealOnly => (join(&out[..n], None), join(&out[n..], None)),
    }
}

/// Every trainable tensor plus the optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParameters {
    pub arch: Architecture,
    pub gat1: GatLayerParams,
    pub gat2: GatLayerParams,
    pub pool: PoolParams,
    pub dense: DenseParams,
    pub adam: AdamState,
}

/// Tensor names in storage and gradient order.
pub const TENSOR_NAMES: [&str; 12] = [
    "gat1.weight",
    "gat1.attn_kernel",
    "gat1.bias",
    "gat2.weight",
    "gat2.attn_kernel",
    "gat2.bias",
    "pool.gate_weight",
    "pool.gate_bias",
    "pool.value_weight",
    "pool.value_bias",
    "dense.weight",
    "dense.bias",
];

/// Indices of the tensors that carry the L2 penalty.
pub const PENALIZED: [usize; 5] = [0, 3, 6, 8, 10];

impl ModelParameters {
    pub fn zeros(arch: Architecture) -> Result<Self> {
        arch.validate()?;
        let [h1, h2] = arch.gat_dims;
        let e = arch.edge_dim();
        let mut model = ModelParameters {
            arch,
            gat1: GatLayerParams::zeros(arch.m_pilots, h1, e, arch.dropout),
            gat2: GatLayerParams::zeros(h1, h2, e, arch.dropout),
            pool: PoolParams::zeros(h2, arch.pool_dim),
            dense: DenseParams::zeros(arch.pool_dim, arch.output_dim()),
            adam: AdamState::default(),
        };
        model.adam = AdamState::for_model(&model);
        Ok(model)
    }

    pub fn tensors(&self) -> [&Tensor; 12] {
        [
            &self.gat1.weight,
            &self.gat1.attn_kernel,
            &self.gat1.bias,
            &self.gat2.weight,
            &self.gat2.attn_kernel,
            &self.gat2.bias,
            &self.pool.gate_weight,
            &self.pool.gate_bias,
            &self.pool.value_weight,
            &self.pool.value_bias,
            &self.dense.weight,
            &self.dense.bias,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 12] {
        [
            &mut self.gat1.weight,
            &mut self.gat1.attn_kernel,
            &mut self.gat1.bias,
            &mut self.gat2.weight,
            &mut self.gat2.attn_kernel,
            &mut self.gat2.bias,
            &mut self.pool.gate_weight,
            &mut self.pool.gate_bias,
            &mut self.pool.value_weight,
            &mut self.pool.value_bias,
            &mut self.dense.weight,
            &mut self.dense.bias,
        ]
    }

    /// `Σ W²` over the weight matrices.
    pub fn l2_penalty(&self) -> f64 {
        let t = self.tensors();
        PENALIZED.iter().map(|&i| t[i].sum_squares()).sum()
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Checks the dimension chain `M → h1 → h2 → C → D` against `arch`.
    pub fn validate(&self) -> Result<()> {
        let a = &self.arch;
        let e = a.edge_dim();
        let expected = [
            vec![a.m_pilots, a.gat_dims[0]],
            vec![2 * a.gat_dims[0] + e],
            vec![a.gat_dims[0]],
            vec![a.gat_dims[0], a.gat_dims[1]],
            vec![2 * a.gat_dims[1] + e],
            vec![a.gat_dims[1]],
            vec![a.gat_dims[1], a.pool_dim],
            vec![a.pool_dim],
            vec![a.gat_dims[1], a.pool_dim],
            vec![a.pool_dim],
            vec![a.pool_dim, a.output_dim()],
            vec![a.output_dim()],
        ];
        for ((name, t), shape) in TENSOR_NAMES.iter().zip(self.tensors()).zip(&expected) {
            if t.shape() != shape.as_slice() {
                return Err(Error::invalid(format!(
                    "{name} has shape {:?}, architecture needs {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Glorot-uniform weights, zero biases, fresh optimizer state.
pub fn init_parameters<R: Rng + ?Sized>(arch: Architecture, rng: &mut R) -> Result<ModelParameters> {
    arch.validate()?;
    let [h1, h2] = arch.gat_dims;
    let e = arch.edge_dim();
    let gat1 = GatLayerParams::glorot(arch.m_pilots, h1, e, arch.dropout, rng);
    let gat2 = GatLayerParams::glorot(h1, h2, e, arch.dropout, rng);
    let pool = PoolParams::glorot(h2, arch.pool_dim, rng);
    let dense = DenseParams::glorot(arch.pool_dim, arch.output_dim(), rng);
    let mut model = ModelParameters {
        arch,
        gat1,
        gat2,
        pool,
        dense,
        adam: AdamState::default(),
    };
    model.adam = AdamState::for_model(&model);
    Ok(model)
}

/// Gradients in [`TENSOR_NAMES`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients(pub Vec<Tensor>);

impl Gradients {
    pub fn zeros_like(model: &ModelParameters) -> Self {
        Gradients(
            model
                .tensors()
                .iter()
                .map(|t| Tensor::zeros(t.shape().to_vec()))
                .collect(),
        )
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += y;
            }
        }
    }

    /// First non-finite entry as `(tensor name, flat index, value)`.
    pub fn first_non_finite(&self) -> Option<(&'static str, usize, f64)> {
        self.0.iter().zip(TENSOR_NAMES).find_map(|(t, name)| {
            t.data()
                .iter()
                .position(|v| !v.is_finite())
                .map(|i| (name, i, t.data()[i]))
        })
    }
}

/// Input features and targets of a batch of samples in tape layout.
#[derive(Clone, Debug)]
pub struct Batch {
    pub x: Tensor,
    pub targets: Tensor,
    pub graph: GraphBatch,
}

impl Batch {
    pub fn new(arch: &Architecture, samples: &[&GraphSample]) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::invalid("empty batch"))?;
        let (m, n) = (arch.m_pilots, arch.n_elements);
        let mut x = Vec::with_capacity(samples.len() * 2 * m);
        let mut targets = Vec::with_capacity(samples.len() * arch.output_dim());
        for s in samples {
            if s.meta.m_pilots != m || s.meta.n_elements != n {
                return Err(Error::invalid(format!(
                    "sample with M = {}, N = {} for a model built for M = {m}, N = {n}",
                    s.meta.m_pilots, s.meta.n_elements
                )));
            }
            if arch.edge_fusion && s.edge_attr() != first.edge_attr() {
                return Err(Error::invalid("edge fusion needs one pilot per batch"));
            }
            for (k, &v) in s.x().iter().enumerate() {
                let v = f64::from(v);
                x.push(arch.input_scaling.map_or(v, |sc| sc.apply(k / m, v)));
            }
            targets.extend(arch.target(s.label()));
        }
        let edges = arch.edge_fusion.then(|| first.edge_attr_tensor());
        Ok(Batch {
            x: Tensor::matrix(samples.len() * 2, m, x)?,
            targets: Tensor::matrix(samples.len(), arch.output_dim(), targets)?,
            graph: GraphBatch::uniform(&adjacency_tensor(), samples.len(), arch.self_loops, edges.as_ref())?,
        })
    }

    pub fn len(&self) -> usize {
        self.graph.graphs()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A recorded forward evaluation, ready for a loss and differentiation.
pub struct ForwardPass<'a> {
    tape: Tape<'a>,
    params: Vec<Var>,
    output: Var,
    loss: Option<Var>,
}

impl<'a> ForwardPass<'a> {
    /// Records the network on `x` (`B·2 × M`) over `graph`.
    pub fn record<R: Rng + ?Sized>(
        model: &'a ModelParameters,
        x: &'a Tensor,
        graph: &GraphBatch,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Self> {
        if x.shape() != [graph.total_nodes(), model.arch.m_pilots] {
            return Err(Error::invalid(format!(
                "input {:?} for {} graphs of M = {}",
                x.shape(),
                graph.graphs(),
                model.arch.m_pilots
            )));
        }
        let mut tape = Tape::new();
        let params: Vec<Var> = model.tensors().into_iter().map(|t| tape.param(t)).collect();
        let p = |i: usize| params[i];
        let g1 = GatVars {
            weight: p(0),
            attn_kernel: p(1),
            bias: p(2),
        };
        let g2 = GatVars {
            weight: p(3),
            attn_kernel: p(4),
            bias: p(5),
        };
        let pool = PoolVars {
            gate_weight: p(6),
            gate_bias: p(7),
            value_weight: p(8),
            value_bias: p(9),
        };
        let dense = DenseVars {
            weight: p(10),
            bias: p(11),
        };
        let input = tape.constant_ref(x);
        let h = record_gat_layer(&mut tape, input, &g1, model.gat1.dropout_rate, graph, mode, rng)?;
        let h = record_gat_layer(&mut tape, h, &g2, model.gat2.dropout_rate, graph, mode, rng)?;
        let pooled = record_pool(&mut tape, h, &pool, graph)?;
        let output = record_dense(&mut tape, pooled, &dense)?;
        Ok(ForwardPass {
            tape,
            params,
            output,
            loss: None,
        })
    }

    /// `B × D` predictions.
    pub fn output(&self) -> &Tensor {
        self.tape.value(self.output)
    }

    /// Records `Σ(pred − target)² / denominator + l2_scale · Σ W²` and returns
    /// its value. The plain mean uses `denominator = B·D`.
    pub fn record_loss(&mut self, targets: &Tensor, denominator: usize, l2_scale: f64) -> Result<f64> {
        if targets.shape() != self.output().shape() {
            return Err(Error::invalid(format!(
                "targets {:?} for predictions {:?}",
                targets.shape(),
                self.output().shape()
            )));
        }
        if denominator == 0 {
            return Err(Error::invalid("zero loss denominator"));
        }
        let t = self.tape.constant(targets.clone());
        let diff = self.tape.sub(self.output, t)?;
        let sq = self.tape.sum_squares(diff)?;
        let mut loss = self.tape.scale(sq, 1.0 / denominator as f64)?;
        if l2_scale != 0.0 {
            for &i in &PENALIZED {
                let w = self.tape.sum_squares(self.params[i])?;
                let w = self.tape.scale(w, l2_scale)?;
                loss = self.tape.add(loss, w)?;
            }
        }
        self.loss = Some(loss);
        Ok(self.tape.value(loss).data()[0])
    }

    /// Gradient of the recorded loss with respect to every parameter.
    pub fn backward(&self) -> Result<Gradients> {
        let loss = self
            .loss
            .ok_or_else(|| Error::InvalidState("backward before a loss was recorded".into()))?;
        let grads = self.tape.backward(loss)?;
        Ok(Gradients(
            self.params.iter().map(|&v| grads.get_or_zeros(v)).collect(),
        ))
    }
}

/// Predictions for a batch of samples, `B × D`.
pub fn forward_batch<R: Rng + ?Sized>(
    model: &ModelParameters,
    samples: &[&GraphSample],
    mode: Mode,
    rng: &mut R,
) -> Result<Tensor> {
    let batch = Batch::new(&model.arch, samples)?;
    let pass = ForwardPass::record(model, &batch.x, &batch.graph, mode, rng)?;
    Ok(pass.output().clone())
}

/// Prediction for one sample, `D` values.
pub fn forward<R: Rng + ?Sized>(
    model: &ModelParameters,
    sample: &GraphSample,
    mode: Mode,
    rng: &mut R,
) -> Result<Vec<f64>> {
    Ok(forward_batch(model, &[sample], mode, rng)?.into_data())
}

/// Mean squared error over `D` outputs plus `λ · Σ W²`.
pub fn loss(pred: &[f64], label: &[f64], model: &ModelParameters, l2: f64) -> Result<f64> {
    if pred.len() != label.len() || pred.is_empty() {
        return Err(Error::invalid(format!(
            "prediction of {} values against a label of {}",
            pred.len(),
            label.len()
        )));
    }
    let mse = pred
        .iter()
        .zip(label)
        .map(|(p, l)| (p - l) * (p - l))
        .sum::<f64>()
        / pred.len() as f64;
    Ok(mse + l2 * model.l2_penalty())
}
