//! Small feed-forward velocity model with hand-rolled gradients.
//!
//! The model maps `[x, t]` (dimension d+1) through tanh hidden layers to a
//! velocity of dimension d. Gradients with respect to parameters and inputs
//! are computed analytically: plain backpropagation for parameter gradients,
//! forward-mode tangents for the input Jacobian, and a combined
//! forward-over-reverse pass ([`VelocityModel::vjp_velocity_divergence`])
//! for differentiating the divergence itself, which the log-density ODE
//! backward pass needs.

use std::io::{BufRead, Write};

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng;
use crate::types::Point;

/// Anything that behaves as a velocity field v(x, t) with a divergence.
///
/// Implementations may assume finite inputs of the right dimension; the
/// samplers and integrators guard their states before calling in.
pub trait VelocityField {
    fn dim(&self) -> usize;
    fn velocity(&self, x: &[f64], t: f64) -> Vec<f64>;
    /// Trace of the input Jacobian d v_i / d x_i at (x, t).
    fn divergence(&self, x: &[f64], t: f64) -> f64;
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Layer {
    /// Row-major `rows x cols` weight matrix.
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub rows: usize,
    pub cols: usize,
}

impl Layer {
    fn zeros(rows: usize, cols: usize) -> Self {
        Layer { w: vec![0.0; rows * cols], b: vec![0.0; rows], rows, cols }
    }

    /// out = W * input + b
    fn affine(&self, input: &[f64], out: &mut Vec<f64>) {
        debug_assert_eq!(input.len(), self.cols);
        out.clear();
        for r in 0..self.rows {
            let row = &self.w[r * self.cols..(r + 1) * self.cols];
            let mut acc = self.b[r];
            for (wi, xi) in row.iter().zip(input) {
                acc += wi * xi;
            }
            out.push(acc);
        }
    }

    /// out = W * input (no bias), used for tangent propagation.
    fn matvec(&self, input: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for r in 0..self.rows {
            let row = &self.w[r * self.cols..(r + 1) * self.cols];
            let mut acc = 0.0;
            for (wi, xi) in row.iter().zip(input) {
                acc += wi * xi;
            }
            out.push(acc);
        }
    }

    /// out = W^T * input
    fn matvec_t(&self, input: &[f64], out: &mut Vec<f64>) {
        debug_assert_eq!(input.len(), self.rows);
        out.clear();
        out.resize(self.cols, 0.0);
        for r in 0..self.rows {
            let row = &self.w[r * self.cols..(r + 1) * self.cols];
            let d = input[r];
            for (o, wi) in out.iter_mut().zip(row) {
                *o += d * wi;
            }
        }
    }
}

/// Feed-forward velocity model v(x, t) with tanh hidden activations.
#[derive(Debug, Clone, PartialEq)]
pub struct VelocityModel {
    dim: usize,
    hidden: Vec<usize>,
    layers: Vec<Layer>,
}

impl VelocityModel {
    /// Glorot-uniform initialized model; biases start at zero.
    pub fn new(dim: usize, hidden: &[usize], seed: u64) -> Result<Self> {
        let mut model = Self::zeros(dim, hidden)?;
        let mut r = rng::rng_from(seed);
        for layer in &mut model.layers {
            let limit = (6.0 / (layer.cols + layer.rows) as f64).sqrt();
            for w in &mut layer.w {
                *w = r.random_range(-limit..limit);
            }
        }
        Ok(model)
    }

    /// All-zero parameters (useful as a degenerate baseline).
    pub fn zeros(dim: usize, hidden: &[usize]) -> Result<Self> {
        if dim == 0 || dim > 2 {
            return Err(Error::invalid("model", format!("dim must be 1 or 2, got {dim}")));
        }
        if hidden.iter().any(|&h| h == 0) {
            return Err(Error::invalid("model", "hidden layer width must be positive"));
        }
        let mut sizes = vec![dim + 1];
        sizes.extend_from_slice(hidden);
        sizes.push(dim);
        let layers = sizes
            .windows(2)
            .map(|pair| Layer::zeros(pair[1], pair[0]))
            .collect();
        Ok(VelocityModel { dim, hidden: hidden.to_vec(), layers })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn hidden(&self) -> &[usize] {
        &self.hidden
    }

    /// Total number of scalar parameters, sum over layers of (fan_in+1)*fan_out.
    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    #[cfg(test)]
    pub(crate) fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    fn check_input(&self, x: &[f64], t: f64) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, got: x.len() });
        }
        if x.iter().any(|c| !c.is_finite()) || !t.is_finite() {
            return Err(Error::NonFinite { context: "model input" });
        }
        Ok(())
    }

    fn input_vec(&self, x: &[f64], t: f64) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.dim + 1);
        v.extend_from_slice(x);
        v.push(t);
        v
    }

    /// Evaluates v(x, t). Deterministic: equal inputs give bitwise-equal outputs.
    pub fn forward(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        self.check_input(x, t)?;
        let mut a = self.input_vec(x, t);
        let mut z = Vec::new();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            layer.affine(&a, &mut z);
            if i < last {
                for v in z.iter_mut() {
                    *v = v.tanh();
                }
            }
            std::mem::swap(&mut a, &mut z);
        }
        Ok(a)
    }

    /// Point-typed wrapper over [`Self::forward`].
    pub fn forward_point(&self, x: &Point, t: f64) -> Result<Point> {
        Ok(Point::from_parts(self.forward(x.coords(), t)?))
    }

    /// Forward pass keeping post-activation values of every layer
    /// (`acts[0]` is the input vector). `acts[last]` is the raw output.
    fn forward_cached(&self, x: &[f64], t: f64, acts: &mut Vec<Vec<f64>>) {
        acts.clear();
        acts.push(self.input_vec(x, t));
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = Vec::new();
            layer.affine(&acts[i], &mut z);
            if i < last {
                for v in z.iter_mut() {
                    *v = v.tanh();
                }
            }
            acts.push(z);
        }
    }

    /// Gradient of `upstream . v(x, t)` with respect to every parameter.
    pub fn grad_params(&self, x: &[f64], t: f64, upstream: &[f64]) -> Result<Gradients> {
        let mut grads = Gradients::zeros_like(self);
        self.accumulate_grad_params(x, t, upstream, 1.0, &mut grads)?;
        Ok(grads)
    }

    /// Adds `scale * d(upstream . v)/d(params)` into `grads`, allocation-light.
    pub fn accumulate_grad_params(
        &self,
        x: &[f64],
        t: f64,
        upstream: &[f64],
        scale: f64,
        grads: &mut Gradients,
    ) -> Result<()> {
        self.check_input(x, t)?;
        if upstream.len() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, got: upstream.len() });
        }
        grads.check_shape(self)?;
        let mut acts = Vec::new();
        self.forward_cached(x, t, &mut acts);

        let mut delta: Vec<f64> = upstream.iter().map(|u| u * scale).collect();
        let mut next_delta = Vec::new();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let g = &mut grads.layers[i];
            let input = &acts[i];
            for r in 0..layer.rows {
                let d = delta[r];
                g.b[r] += d;
                let gw = &mut g.w[r * layer.cols..(r + 1) * layer.cols];
                for (gwi, ai) in gw.iter_mut().zip(input) {
                    *gwi += d * ai;
                }
            }
            if i > 0 {
                layer.matvec_t(&delta, &mut next_delta);
                // chain through the tanh of the previous layer
                for (nd, ai) in next_delta.iter_mut().zip(&acts[i]) {
                    *nd *= 1.0 - ai * ai;
                }
                std::mem::swap(&mut delta, &mut next_delta);
            }
        }
        Ok(())
    }

    /// Input Jacobian (row-major d x d) and its trace, via forward-mode tangents.
    pub fn input_jacobian(&self, x: &[f64], t: f64) -> Result<(Vec<f64>, f64)> {
        self.check_input(x, t)?;
        let mut acts = Vec::new();
        self.forward_cached(x, t, &mut acts);
        let d = self.dim;
        let mut jac = vec![0.0; d * d];
        let mut u = Vec::new();
        let mut m = Vec::new();
        for col in 0..d {
            u.clear();
            u.resize(self.dim + 1, 0.0);
            u[col] = 1.0;
            let last = self.layers.len() - 1;
            for (i, layer) in self.layers.iter().enumerate() {
                layer.matvec(&u, &mut m);
                if i < last {
                    for (mi, ai) in m.iter_mut().zip(&acts[i + 1]) {
                        *mi *= 1.0 - ai * ai;
                    }
                }
                std::mem::swap(&mut u, &mut m);
            }
            for row in 0..d {
                jac[row * d + col] = u[row];
            }
        }
        let div = (0..d).map(|i| jac[i * d + i]).sum();
        Ok((jac, div))
    }

    /// Divergence alone (trace of the input Jacobian).
    pub fn divergence_at(&self, x: &[f64], t: f64) -> Result<f64> {
        Ok(self.input_jacobian(x, t)?.1)
    }

    /// Reverse-mode through both the value and the divergence:
    /// returns gradients of `v_bar . v(x,t) + div_bar * div(x,t)` with
    /// respect to parameters and to x.
    ///
    /// This is the work-horse of the log-density adjoint; the divergence is
    /// itself a derivative, so its cotangent requires propagating tanh
    /// second derivatives.
    pub fn vjp_velocity_divergence(
        &self,
        x: &[f64],
        t: f64,
        v_bar: &[f64],
        div_bar: f64,
        grads: &mut Gradients,
        x_bar: &mut [f64],
    ) -> Result<()> {
        self.check_input(x, t)?;
        if v_bar.len() != self.dim || x_bar.len() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, got: v_bar.len() });
        }
        grads.check_shape(self)?;
        let d = self.dim;
        let n_layers = self.layers.len();
        let last = n_layers - 1;

        // Forward, keeping activations plus tangents u and pre-gate tangents
        // m for each coordinate direction.
        let mut acts = Vec::new();
        self.forward_cached(x, t, &mut acts);
        // tangents[i][l] for direction i at layer l (l = 0..n_layers, l=0 is the seed)
        let mut u_all: Vec<Vec<Vec<f64>>> = Vec::with_capacity(d);
        let mut m_all: Vec<Vec<Vec<f64>>> = Vec::with_capacity(d);
        for i in 0..d {
            let mut u_lvls = Vec::with_capacity(n_layers + 1);
            let mut m_lvls = Vec::with_capacity(n_layers);
            let mut u = vec![0.0; self.dim + 1];
            u[i] = 1.0;
            u_lvls.push(u.clone());
            for (l, layer) in self.layers.iter().enumerate() {
                let mut m = Vec::new();
                layer.matvec(&u, &mut m);
                m_lvls.push(m.clone());
                if l < last {
                    for (mi, ai) in m.iter_mut().zip(&acts[l + 1]) {
                        *mi *= 1.0 - ai * ai;
                    }
                }
                u = m;
                u_lvls.push(u.clone());
            }
            u_all.push(u_lvls);
            m_all.push(m_lvls);
        }

        // Reverse pass. a_bar[l] accumulates the cotangent of acts[l];
        // u_bar[i] holds the cotangent of the direction-i tangent at the
        // current level.
        let mut a_bar: Vec<Vec<f64>> = acts.iter().map(|a| vec![0.0; a.len()]).collect();
        let mut u_bar: Vec<Vec<f64>> = Vec::with_capacity(d);

        // Output layer: v = W a + b, J e_i = W u_i; div = sum_i (W u_i)[i].
        {
            let layer = &self.layers[last];
            let g = &mut grads.layers[last];
            let input = &acts[last];
            for r in 0..layer.rows {
                let vb = v_bar[r];
                g.b[r] += vb;
                let gw = &mut g.w[r * layer.cols..(r + 1) * layer.cols];
                for (gwi, ai) in gw.iter_mut().zip(input) {
                    *gwi += vb * ai;
                }
            }
            layer.matvec_t(v_bar, &mut a_bar[last]);
            for i in 0..d {
                // d(div)/d(u_i at last hidden) = row i of W; also W row i gets
                // div_bar * u_i.
                let ui = &u_all[i][last];
                let row = &layer.w[i * layer.cols..(i + 1) * layer.cols];
                let mut ub = vec![0.0; layer.cols];
                for c in 0..layer.cols {
                    ub[c] = div_bar * row[c];
                    grads.layers[last].w[i * layer.cols + c] += div_bar * ui[c];
                }
                u_bar.push(ub);
            }
        }

        // Hidden layers, top to bottom. Level l covers layer index l-1 with
        // activation acts[l], tangent u_all[i][l] = p_l .* m_all[i][l-1].
        let mut next_u_bar: Vec<Vec<f64>> = vec![Vec::new(); d];
        for l in (1..=last).rev() {
            let layer = &self.layers[l - 1];
            let a_l = &acts[l];
            // p_bar from the tangent gate u = p .* m
            let mut p_bar = vec![0.0; a_l.len()];
            for i in 0..d {
                let m_raw = &m_all[i][l - 1];
                for (pb, (ub, mr)) in p_bar.iter_mut().zip(u_bar[i].iter().zip(m_raw)) {
                    *pb += ub * mr;
                }
            }
            // m_bar = u_bar .* p; propagate into weights and previous tangents
            for i in 0..d {
                let u_prev = &u_all[i][l - 1];
                let mut m_bar = vec![0.0; a_l.len()];
                for (mb, (ub, ai)) in m_bar.iter_mut().zip(u_bar[i].iter().zip(a_l)) {
                    *mb = ub * (1.0 - ai * ai);
                }
                let g = &mut grads.layers[l - 1];
                for r in 0..layer.rows {
                    let mb = m_bar[r];
                    if mb != 0.0 {
                        let gw = &mut g.w[r * layer.cols..(r + 1) * layer.cols];
                        for (gwi, upi) in gw.iter_mut().zip(u_prev) {
                            *gwi += mb * upi;
                        }
                    }
                }
                if l > 1 {
                    layer.matvec_t(&m_bar, &mut next_u_bar[i]);
                }
            }
            // p = 1 - a^2  =>  a_bar += -2 a p_bar
            for (ab, (ai, pb)) in a_bar[l].iter_mut().zip(a_l.iter().zip(&p_bar)) {
                *ab += -2.0 * ai * pb;
            }
            // a = tanh(z)  =>  z_bar = a_bar .* (1 - a^2)
            let z_bar: Vec<f64> = a_bar[l]
                .iter()
                .zip(a_l)
                .map(|(ab, ai)| ab * (1.0 - ai * ai))
                .collect();
            // z = W a_prev + b
            let g = &mut grads.layers[l - 1];
            let input = &acts[l - 1];
            for r in 0..layer.rows {
                let zb = z_bar[r];
                g.b[r] += zb;
                let gw = &mut g.w[r * layer.cols..(r + 1) * layer.cols];
                for (gwi, ai) in gw.iter_mut().zip(input) {
                    *gwi += zb * ai;
                }
            }
            let mut prev_contrib = Vec::new();
            layer.matvec_t(&z_bar, &mut prev_contrib);
            for (ab, pc) in a_bar[l - 1].iter_mut().zip(&prev_contrib) {
                *ab += pc;
            }
            if l > 1 {
                std::mem::swap(&mut u_bar, &mut next_u_bar);
            }
        }

        for (xb, ab) in x_bar.iter_mut().zip(&a_bar[0]) {
            *xb += ab;
        }
        Ok(())
    }
}

impl VelocityField for VelocityModel {
    fn dim(&self) -> usize {
        self.dim
    }

    fn velocity(&self, x: &[f64], t: f64) -> Vec<f64> {
        self.forward(x, t).expect("finite input of matching dimension")
    }

    fn divergence(&self, x: &[f64], t: f64) -> f64 {
        self.divergence_at(x, t).expect("finite input of matching dimension")
    }
}

/// Per-layer gradient (or moment) storage mirroring a model's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGrads>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl Gradients {
    pub fn zeros_like(model: &VelocityModel) -> Self {
        Gradients {
            layers: model
                .layers
                .iter()
                .map(|l| LayerGrads { w: vec![0.0; l.w.len()], b: vec![0.0; l.b.len()] })
                .collect(),
        }
    }

    pub fn check_shape(&self, model: &VelocityModel) -> Result<()> {
        if self.layers.len() != model.layers.len()
            || self
                .layers
                .iter()
                .zip(&model.layers)
                .any(|(g, l)| g.w.len() != l.w.len() || g.b.len() != l.b.len())
        {
            return Err(Error::ShapeMismatch {
                context: "gradient shapes do not mirror model parameters".into(),
            });
        }
        Ok(())
    }

    pub fn fill(&mut self, value: f64) {
        for l in &mut self.layers {
            l.w.iter_mut().for_each(|v| *v = value);
            l.b.iter_mut().for_each(|v| *v = value);
        }
    }

    /// self += scale * other
    pub fn add_scaled(&mut self, other: &Gradients, scale: f64) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.w.iter_mut().zip(&b.w) {
                *x += scale * y;
            }
            for (x, y) in a.b.iter_mut().zip(&b.b) {
                *x += scale * y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for l in &mut self.layers {
            l.w.iter_mut().for_each(|v| *v *= s);
            l.b.iter_mut().for_each(|v| *v *= s);
        }
    }

    /// Euclidean norm over all entries.
    pub fn norm(&self) -> f64 {
        self.layers
            .iter()
            .map(|l| {
                l.w.iter().map(|v| v * v).sum::<f64>() + l.b.iter().map(|v| v * v).sum::<f64>()
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn iter_values(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers.iter().flat_map(|l| l.w.iter().chain(&l.b).copied())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptMethod {
    Sgd,
    Adam,
}

/// Optimizer with state mirroring the parameter shapes.
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub method: OptMethod,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step_count: u64,
    m: Gradients,
    v: Gradients,
}

impl Optimizer {
    pub fn new(method: OptMethod, learning_rate: f64, model: &VelocityModel) -> Self {
        Optimizer {
            method,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step_count: 0,
            m: Gradients::zeros_like(model),
            v: Gradients::zeros_like(model),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Applies one update in place; `grads` is the gradient of the loss
    /// being minimized.
    pub fn step(&mut self, model: &mut VelocityModel, grads: &Gradients) -> Result<()> {
        grads.check_shape(model)?;
        self.m.check_shape(model)?;
        self.step_count += 1;
        match self.method {
            OptMethod::Sgd => {
                for (layer, g) in model.layers.iter_mut().zip(&grads.layers) {
                    for (p, gi) in layer.w.iter_mut().zip(&g.w) {
                        *p -= self.learning_rate * gi;
                    }
                    for (p, gi) in layer.b.iter_mut().zip(&g.b) {
                        *p -= self.learning_rate * gi;
                    }
                }
            }
            OptMethod::Adam => {
                let c1 = 1.0 - self.beta1.powi(self.step_count as i32);
                let c2 = 1.0 - self.beta2.powi(self.step_count as i32);
                for (i, (layer, g)) in model.layers.iter_mut().zip(&grads.layers).enumerate() {
                    let (m, v) = (&mut self.m.layers[i], &mut self.v.layers[i]);
                    for j in 0..layer.w.len() {
                        adam_update(
                            &mut layer.w[j],
                            &mut m.w[j],
                            &mut v.w[j],
                            g.w[j],
                            self.learning_rate,
                            self.beta1,
                            self.beta2,
                            self.epsilon,
                            c1,
                            c2,
                        );
                    }
                    for j in 0..layer.b.len() {
                        adam_update(
                            &mut layer.b[j],
                            &mut m.b[j],
                            &mut v.b[j],
                            g.b[j],
                            self.learning_rate,
                            self.beta1,
                            self.beta2,
                            self.epsilon,
                            c1,
                            c2,
                        );
                    }
                }
            }
        }
        Ok(())
    }
}

#[allow(clippy::too_many_arguments)]
#[inline]
fn adam_update(
    p: &mut f64,
    m: &mut f64,
    v: &mut f64,
    g: f64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    c1: f64,
    c2: f64,
) {
    *m = beta1 * *m + (1.0 - beta1) * g;
    *v = beta2 * *v + (1.0 - beta2) * g * g;
    let m_hat = *m / c1;
    let v_hat = *v / c2;
    *p -= lr * m_hat / (v_hat.sqrt() + eps);
}

const CHECKPOINT_MAGIC: &str = "RLG-CKPT 1";

/// Writes the checkpoint format: magic line, architecture, seed record, then
/// parameters as decimal floats with 17 significant digits, row-major per
/// layer. Round-trips bit-exactly.
pub fn write_checkpoint<W: Write>(model: &VelocityModel, seed: u64, out: &mut W) -> Result<()> {
    writeln!(out, "{CHECKPOINT_MAGIC}")?;
    write!(out, "arch {}", model.dim)?;
    for h in &model.hidden {
        write!(out, " {h}")?;
    }
    writeln!(out)?;
    writeln!(out, "seed {seed}")?;
    for (i, layer) in model.layers.iter().enumerate() {
        writeln!(out, "layer {i} {} {}", layer.rows, layer.cols)?;
        for r in 0..layer.rows {
            let row = &layer.w[r * layer.cols..(r + 1) * layer.cols];
            let line: Vec<String> = row.iter().map(|v| format!("{v:.16e}")).collect();
            writeln!(out, "{}", line.join(" "))?;
        }
        let bias: Vec<String> = layer.b.iter().map(|v| format!("{v:.16e}")).collect();
        writeln!(out, "bias {}", bias.join(" "))?;
    }
    Ok(())
}

/// Reads a checkpoint produced by [`write_checkpoint`].
pub fn read_checkpoint<R: BufRead>(input: R) -> Result<(VelocityModel, u64)> {
    let mut lines = input.lines().enumerate();
    let mut next = |expect: &str| -> Result<(usize, String)> {
        match lines.next() {
            Some((n, Ok(line))) => Ok((n + 1, line)),
            Some((n, Err(e))) => Err(Error::Checkpoint { line: n + 1, why: e.to_string() }),
            None => Err(Error::Checkpoint { line: 0, why: format!("missing {expect}") }),
        }
    };

    let (n, magic) = next("magic")?;
    if magic.trim() != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint { line: n, why: format!("bad magic `{magic}`") });
    }
    let (n, arch) = next("arch")?;
    let fields: Vec<&str> = arch.split_whitespace().collect();
    if fields.first() != Some(&"arch") || fields.len() < 2 {
        return Err(Error::Checkpoint { line: n, why: "expected `arch <dim> <hidden..>`".into() });
    }
    let parse_usize = |s: &str, line: usize| -> Result<usize> {
        s.parse().map_err(|_| Error::Checkpoint { line, why: format!("bad integer `{s}`") })
    };
    let dim = parse_usize(fields[1], n)?;
    let hidden: Vec<usize> =
        fields[2..].iter().map(|s| parse_usize(s, n)).collect::<Result<_>>()?;
    let (n, seed_line) = next("seed")?;
    let seed: u64 = seed_line
        .strip_prefix("seed ")
        .and_then(|s| s.trim().parse().ok())
        .ok_or_else(|| Error::Checkpoint { line: n, why: "expected `seed <u64>`".into() })?;

    let mut model = VelocityModel::zeros(dim, &hidden)?;
    let n_layers = model.layers.len();
    for i in 0..n_layers {
        let (n, header) = next("layer header")?;
        let expect = format!("layer {i} {} {}", model.layers[i].rows, model.layers[i].cols);
        if header.trim() != expect {
            return Err(Error::Checkpoint {
                line: n,
                why: format!("expected `{expect}`, got `{header}`"),
            });
        }
        let rows = model.layers[i].rows;
        let cols = model.layers[i].cols;
        for r in 0..rows {
            let (n, line) = next("weight row")?;
            let vals = parse_floats(&line, cols, n)?;
            model.layers[i].w[r * cols..(r + 1) * cols].copy_from_slice(&vals);
        }
        let (n, bias) = next("bias")?;
        let body = bias
            .strip_prefix("bias ")
            .ok_or_else(|| Error::Checkpoint { line: n, why: "expected `bias <floats>`".into() })?;
        let vals = parse_floats(body, rows, n)?;
        model.layers[i].b.copy_from_slice(&vals);
    }
    Ok((model, seed))
}

fn parse_floats(line: &str, expect: usize, lineno: usize) -> Result<Vec<f64>> {
    let vals: Vec<f64> = line
        .split_whitespace()
        .map(|s| {
            s.parse::<f64>()
                .map_err(|_| Error::Checkpoint { line: lineno, why: format!("bad float `{s}`") })
        })
        .collect::<Result<_>>()?;
    if vals.len() != expect {
        return Err(Error::Checkpoint {
            line: lineno,
            why: format!("expected {expect} values, got {}", vals.len()),
        });
    }
    Ok(vals)
}
