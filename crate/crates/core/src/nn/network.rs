use crate::error::{check_len, Error, Result};
use crate::{Mat, Vector};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
}

impl Activation {
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Identity => z,
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative at the pre-activation `z`. ReLU uses 0 at exactly 0.
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
        }
    }
}

/// One bias-free layer `f = φ(W a)` with `W` of shape `d1 × d2`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearLayer {
    weight: Mat,
    activation: Activation,
}

impl LinearLayer {
    pub fn new(weight: Mat, activation: Activation) -> Result<Self> {
        if weight.nrows() == 0 || weight.ncols() == 0 {
            return Err(Error::InvalidArgument("layer weight must be at least 1x1".into()));
        }
        if weight.iter().any(|w| !w.is_finite()) {
            return Err(Error::NonFinite("layer weight".into()));
        }
        Ok(Self { weight, activation })
    }

    pub fn weight(&self) -> &Mat {
        &self.weight
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn out_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn in_dim(&self) -> usize {
        self.weight.ncols()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    offsets: Vec<usize>,
    shapes: Vec<(usize, usize)>,
    total: usize,
}

impl ParamLayout {
    pub fn from_shapes(shapes: &[(usize, usize)]) -> Self {
        let mut offsets = Vec::with_capacity(shapes.len());
        let mut total = 0;
        for &(d1, d2) in shapes {
            offsets.push(total);
            total += d1 * d2;
        }
        Self {
            offsets,
            shapes: shapes.to_vec(),
            total,
        }
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn shapes(&self) -> &[(usize, usize)] {
        &self.shapes
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn num_layers(&self) -> usize {
        self.shapes.len()
    }

    pub fn range(&self, layer: usize) -> std::ops::Range<usize> {
        let (d1, d2) = self.shapes[layer];
        self.offsets[layer]..self.offsets[layer] + d1 * d2
    }

    /// Reshape the slice of `v` belonging to `layer` into its `d1 × d2` matrix.
    pub fn layer_matrix(&self, v: &Vector, layer: usize) -> Mat {
        let (d1, d2) = self.shapes[layer];
        Mat::from_row_slice(d1, d2, &v.as_slice()[self.range(layer)])
    }

    /// Write a `d1 × d2` matrix row-major into the slice of `out` for `layer`.
    pub fn write_layer(&self, out: &mut Vector, layer: usize, m: &Mat) {
        let (d1, d2) = self.shapes[layer];
        let off = self.offsets[layer];
        for i in 0..d1 {
            for j in 0..d2 {
                out[off + i * d2 + j] = m[(i, j)];
            }
        }
    }

    pub fn flatten(&self, mats: &[Mat]) -> Vector {
        let mut out = Vector::zeros(self.total);
        for (k, m) in mats.iter().enumerate() {
            self.write_layer(&mut out, k, m);
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct Network {
    layers: Vec<LinearLayer>,
    layout: ParamLayout,
    version: u64,
}

/// Everything a forward pass saw, one column per example.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Layer inputs `a`, each `d2 × N`.
    pub inputs: Vec<Mat>,
    /// Pre-activations `z = W a`, each `d1 × N`.
    pub pre_activations: Vec<Mat>,
    /// Network outputs `f`, `C × N`.
    pub outputs: Mat,
    version: u64,
}

impl ForwardTrace {
    pub fn batch_size(&self) -> usize {
        self.outputs.ncols()
    }

    pub fn version(&self) -> u64 {
        self.version
    }
}

#[derive(Debug, Clone)]
pub struct GradientBundle {
    /// `(1/N) Σ_n g_n a_nᵀ` per layer.
    pub weight_grads: Vec<Mat>,
    /// Per-example pre-activation gradients `g_n`, each `d1 × N`.
    pub pre_activation_grads: Vec<Mat>,
    /// Weight gradients flattened with the network's layout.
    pub flat: Vector,
}

impl Network {
    pub fn new(layers: Vec<LinearLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument("network needs a layer".into()));
        }
        for k in 1..layers.len() {
            if layers[k].in_dim() != layers[k - 1].out_dim() {
                return Err(Error::LayerDimension {
                    layer: k,
                    what: "input dim vs previous output dim",
                    expected: layers[k - 1].out_dim(),
                    got: layers[k].in_dim(),
                });
            }
        }
        let shapes: Vec<_> = layers.iter().map(|l| (l.out_dim(), l.in_dim())).collect();
        Ok(Self {
            layers,
            layout: ParamLayout::from_shapes(&shapes),
            version: 0,
        })
    }

    /// Zero-weight network with the given widths `[in, h1, ..., out]`.
    pub fn zeros(widths: &[usize], activations: &[Activation]) -> Result<Self> {
        if widths.len() != activations.len() + 1 {
            return Err(Error::InvalidArgument("need one activation per layer".into()));
        }
        let layers = activations
            .iter()
            .enumerate()
            .map(|(k, &act)| LinearLayer::new(Mat::zeros(widths[k + 1], widths[k]), act))
            .collect::<Result<Vec<_>>>()?;
        Self::new(layers)
    }

    /// Weights drawn from `N(0, 1/fan_in)`.
    pub fn random<R: rand::Rng + ?Sized>(widths: &[usize], activations: &[Activation], rng: &mut R) -> Result<Self> {
        let mut net = Self::zeros(widths, activations)?;
        for k in 0..activations.len() {
            let std = 1.0 / (widths[k].max(1) as f64).sqrt();
            let w = Mat::from_fn(widths[k + 1], widths[k], |_, _| {
                std * rng.sample::<f64, _>(rand_distr::StandardNormal)
            });
            net.set_weight(k, w)?;
        }
        Ok(net)
    }

    pub fn layers(&self) -> &[LinearLayer] {
        &self.layers
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn num_params(&self) -> usize {
        self.layout.total
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    /// Bumped on every parameter mutation; traces remember the value they saw.
    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn flatten_params(&self) -> Vector {
        let mats: Vec<Mat> = self.layers.iter().map(|l| l.weight.clone()).collect();
        self.layout.flatten(&mats)
    }

    pub fn unflatten_params(&mut self, v: &Vector) -> Result<()> {
        check_len("parameter vector length", self.layout.total, v.len())?;
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("parameter vector".into()));
        }
        for k in 0..self.layers.len() {
            self.layers[k].weight = self.layout.layer_matrix(v, k);
        }
        self.version += 1;
        Ok(())
    }

    pub fn with_params(&self, v: &Vector) -> Result<Self> {
        let mut net = self.clone();
        net.unflatten_params(v)?;
        Ok(net)
    }

    pub fn set_weight(&mut self, layer: usize, weight: Mat) -> Result<()> {
        let (d1, d2) = self.layout.shapes[layer];
        if weight.nrows() != d1 || weight.ncols() != d2 {
            return Err(Error::LayerDimension {
                layer,
                what: "weight element count",
                expected: d1 * d2,
                got: weight.len(),
            });
        }
        self.layers[layer] = LinearLayer::new(weight, self.layers[layer].activation)?;
        self.version += 1;
        Ok(())
    }

    pub fn forward(&self, inputs: &Mat) -> Result<ForwardTrace> {
        let l = self.layers.len();
        let mut a_list = Vec::with_capacity(l);
        let mut z_list = Vec::with_capacity(l);
        let mut a = inputs.clone();
        for (k, layer) in self.layers.iter().enumerate() {
            if a.nrows() != layer.in_dim() {
                return Err(Error::LayerDimension {
                    layer: k,
                    what: "input dim",
                    expected: layer.in_dim(),
                    got: a.nrows(),
                });
            }
            let z = &layer.weight * &a;
            let act = layer.activation;
            let next = z.map(|x| act.apply(x));
            a_list.push(a);
            z_list.push(z);
            a = next;
        }
        Ok(ForwardTrace {
            inputs: a_list,
            pre_activations: z_list,
            outputs: a,
            version: self.version,
        })
    }

    fn check_trace(&self, trace: &ForwardTrace) -> Result<()> {
        if trace.version != self.version {
            return Err(Error::StaleTrace {
                trace: trace.version,
                net: self.version,
            });
        }
        Ok(())
    }

    /// Backpropagate per-example output gradients to every layer's
    /// pre-activations. No batch averaging happens here.
    pub fn pre_activation_grads(&self, trace: &ForwardTrace, output_grads: &Mat) -> Result<Vec<Mat>> {
        self.check_trace(trace)?;
        let n = trace.batch_size();
        if output_grads.nrows() != self.output_dim() || output_grads.ncols() != n {
            return Err(Error::DimensionMismatch {
                what: "output gradient entries",
                expected: self.output_dim() * n,
                got: output_grads.len(),
            });
        }
        let l = self.layers.len();
        let mut grads = vec![Mat::zeros(0, 0); l];
        let mut delta = output_grads.clone();
        for k in (0..l).rev() {
            let act = self.layers[k].activation;
            let mut g = delta;
            if act != Activation::Identity {
                g.zip_apply(&trace.pre_activations[k], |gi, z| *gi *= act.derivative(z));
            }
            if k > 0 {
                delta = self.layers[k].weight.tr_mul(&g);
            } else {
                delta = Mat::zeros(0, 0);
            }
            grads[k] = g;
        }
        Ok(grads)
    }

    pub fn backward(&self, trace: &ForwardTrace, output_grads: &Mat) -> Result<GradientBundle> {
        let pre = self.pre_activation_grads(trace, output_grads)?;
        let n = trace.batch_size() as f64;
        let weight_grads: Vec<Mat> = pre.iter().zip(&trace.inputs).map(|(g, a)| (g * a.transpose()) / n).collect();
        let flat = self.layout.flatten(&weight_grads);
        Ok(GradientBundle {
            weight_grads,
            pre_activation_grads: pre,
            flat,
        })
    }

    /// Output tangents `J_θ f · v` for every example (`C × N`), by a
    /// linearised forward pass.
    pub fn jvp(&self, trace: &ForwardTrace, v: &Vector) -> Result<Mat> {
        self.check_trace(trace)?;
        check_len("tangent length", self.layout.total, v.len())?;
        let n = trace.batch_size();
        let mut da = Mat::zeros(self.input_dim(), n);
        for (k, layer) in self.layers.iter().enumerate() {
            let dw = self.layout.layer_matrix(v, k);
            let mut dz = &dw * &trace.inputs[k];
            if k > 0 {
                dz += &layer.weight * &da;
            }
            let act = layer.activation;
            if act != Activation::Identity {
                dz.zip_apply(&trace.pre_activations[k], |d, z| *d *= act.derivative(z));
            }
            da = dz;
        }
        Ok(da)
    }

    /// `⟨∇_θ ℓ_n, v⟩` for each example, from stored pre-activation gradients.
    pub fn per_example_dot(&self, trace: &ForwardTrace, pre_grads: &[Mat], v: &Vector) -> Result<Vector> {
        check_len("direction length", self.layout.total, v.len())?;
        let n = trace.batch_size();
        let mut out = Vector::zeros(n);
        for (k, g) in pre_grads.iter().enumerate() {
            let va = self.layout.layer_matrix(v, k) * &trace.inputs[k];
            for col in 0..n {
                out[col] += g.column(col).dot(&va.column(col));
            }
        }
        Ok(out)
    }

    /// Per-example flat gradients `vec(g_n a_nᵀ)` stacked as columns (`d × N`).
    pub fn per_example_grads(&self, trace: &ForwardTrace, pre_grads: &[Mat]) -> Mat {
        let n = trace.batch_size();
        let mut out = Mat::zeros(self.layout.total, n);
        for (k, g) in pre_grads.iter().enumerate() {
            let (d1, d2) = self.layout.shapes[k];
            let off = self.layout.offsets[k];
            let a = &trace.inputs[k];
            for col in 0..n {
                for i in 0..d1 {
                    let gi = g[(i, col)];
                    for j in 0..d2 {
                        out[(off + i * d2 + j, col)] = gi * a[(j, col)];
                    }
                }
            }
        }
        out
    }
}
