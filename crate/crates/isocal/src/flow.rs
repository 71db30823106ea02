//! Invertible affine coupling flows with a standard Gaussian prior.
//!
//! Each layer passes the masked coordinates through unchanged and applies
//! y = x * exp(s) + t to the rest, where s and t come from one-hidden-layer
//! perceptrons reading the masked half. Log-scales are clamped to
//! |s| <= s_max via tanh squashing, so forward and inverse are finite for
//! any parameters. Output layers start at zero, making a fresh flow the
//! identity map. Backpropagation is written out by hand for this fixed
//! architecture and checked against finite differences.

use crate::error::{Error, Result};
use crate::numkit::{dot, EmbeddingMatrix, Mat, SeededRng};
use crate::par;

pub const DEFAULT_LAYERS: usize = 4;
pub const DEFAULT_S_MAX: f64 = 3.0;
const HIDDEN_INIT_STD: f64 = 0.02;

/// One-hidden-layer perceptron: out = W2 tanh(W1 m + b1) + b2.
#[derive(Clone, Debug)]
struct Mlp {
    w1: Mat, // hidden x dim
    b1: Vec<f64>,
    w2: Mat, // dim x hidden
    b2: Vec<f64>,
}

struct MlpCache {
    h1: Vec<f64>, // tanh(W1 m + b1)
    out: Vec<f64>,
}

impl Mlp {
    fn zeros(dim: usize) -> Self {
        let hidden = 2 * dim;
        Mlp {
            w1: Mat::zeros(hidden, dim),
            b1: vec![0.0; hidden],
            w2: Mat::zeros(dim, hidden),
            b2: vec![0.0; dim],
        }
    }

    /// Gaussian hidden layer, zero output layer: the net is identically zero
    /// at init but has nonzero gradients into the hidden weights.
    fn seeded(dim: usize, rng: &mut SeededRng) -> Self {
        let hidden = 2 * dim;
        Mlp {
            w1: Mat::from_fn(hidden, dim, |_, _| HIDDEN_INIT_STD * rng.gaussian()),
            b1: (0..hidden).map(|_| HIDDEN_INIT_STD * rng.gaussian()).collect(),
            w2: Mat::zeros(dim, hidden),
            b2: vec![0.0; dim],
        }
    }

    fn forward(&self, m: &[f64]) -> MlpCache {
        let mut h1 = self.w1.matvec(m);
        for (h, b) in h1.iter_mut().zip(&self.b1) {
            *h = (*h + b).tanh();
        }
        let mut out = self.w2.matvec(&h1);
        for (o, b) in out.iter_mut().zip(&self.b2) {
            *o += b;
        }
        MlpCache { h1, out }
    }

    /// Accumulates parameter gradients for cotangent g_out and returns the
    /// cotangent of the input m.
    fn backward(&self, m: &[f64], cache: &MlpCache, g_out: &[f64], grads: &mut Mlp) -> Vec<f64> {
        for (gb, g) in grads.b2.iter_mut().zip(g_out) {
            *gb += g;
        }
        for (j, &g) in g_out.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let row = grads.w2.row_mut(j);
            for (k, r) in row.iter_mut().enumerate() {
                *r += g * cache.h1[k];
            }
        }
        let g_h1 = self.w2.matvec_t(g_out);
        let mut g_a1 = vec![0.0; g_h1.len()];
        for (k, ga) in g_a1.iter_mut().enumerate() {
            *ga = g_h1[k] * (1.0 - cache.h1[k] * cache.h1[k]);
        }
        for (gb, g) in grads.b1.iter_mut().zip(&g_a1) {
            *gb += g;
        }
        for (k, &g) in g_a1.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let row = grads.w1.row_mut(k);
            for (i, r) in row.iter_mut().enumerate() {
                *r += g * m[i];
            }
        }
        self.w1.matvec_t(&g_a1)
    }

    fn add_scaled(&mut self, other: &Mlp, factor: f64) {
        self.w1.add_scaled(&other.w1, factor);
        self.w2.add_scaled(&other.w2, factor);
        for (a, b) in self.b1.iter_mut().zip(&other.b1) {
            *a += factor * b;
        }
        for (a, b) in self.b2.iter_mut().zip(&other.b2) {
            *a += factor * b;
        }
    }

    fn for_each_param(&self, f: &mut impl FnMut(f64)) {
        self.w1.data().iter().for_each(|&v| f(v));
        self.b1.iter().for_each(|&v| f(v));
        self.w2.data().iter().for_each(|&v| f(v));
        self.b2.iter().for_each(|&v| f(v));
    }

    fn set_from(&mut self, iter: &mut impl Iterator<Item = f64>) {
        for v in self.w1.data_mut() {
            *v = iter.next().unwrap();
        }
        for v in &mut self.b1 {
            *v = iter.next().unwrap();
        }
        for v in self.w2.data_mut() {
            *v = iter.next().unwrap();
        }
        for v in &mut self.b2 {
            *v = iter.next().unwrap();
        }
    }

    fn param_count(&self) -> usize {
        self.w1.data().len() + self.b1.len() + self.w2.data().len() + self.b2.len()
    }
}

/// Affine coupling layer: pass-through on `mask`, scale-and-shift elsewhere.
#[derive(Clone, Debug)]
pub struct CouplingLayer {
    mask: Vec<bool>,
    scale_net: Mlp,
    shift_net: Mlp,
    s_max: f64,
}

struct LayerCache {
    m: Vec<f64>,
    scale: MlpCache,
    shift: MlpCache,
    s: Vec<f64>, // clamped log-scales, zero on masked coords
    x: Vec<f64>, // inverse output
}

impl CouplingLayer {
    fn alternating_mask(dim: usize, layer_index: usize) -> Vec<bool> {
        (0..dim).map(|i| i % 2 == layer_index % 2).collect()
    }

    fn masked(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.mask)
            .map(|(&v, &keep)| if keep { v } else { 0.0 })
            .collect()
    }

    fn clamp(&self, raw: f64) -> f64 {
        self.s_max * raw.tanh()
    }

    fn forward(&self, x: &[f64]) -> (Vec<f64>, f64) {
        let m = self.masked(x);
        let scale = self.scale_net.forward(&m);
        let shift = self.shift_net.forward(&m);
        let mut y = x.to_vec();
        let mut log_det = 0.0;
        for j in 0..x.len() {
            if self.mask[j] {
                continue;
            }
            let s = self.clamp(scale.out[j]);
            y[j] = x[j] * s.exp() + shift.out[j];
            log_det += s;
        }
        (y, log_det)
    }

    fn inverse_cached(&self, y: &[f64]) -> LayerCache {
        // Masked coords pass through, so the nets see the same values in
        // both directions.
        let m = self.masked(y);
        let scale = self.scale_net.forward(&m);
        let shift = self.shift_net.forward(&m);
        let mut x = y.to_vec();
        let mut s = vec![0.0; y.len()];
        for j in 0..y.len() {
            if self.mask[j] {
                continue;
            }
            s[j] = self.clamp(scale.out[j]);
            x[j] = (y[j] - shift.out[j]) * (-s[j]).exp();
        }
        LayerCache {
            m,
            scale,
            shift,
            s,
            x,
        }
    }

    /// Backward through the inverse map for the NLL objective. `g_x` is the
    /// cotangent of the inverse output; the direct d(sum s)/ds = 1 term of
    /// the NLL is folded in here. Returns the cotangent of the inverse input.
    fn backward_inverse(&self, cache: &LayerCache, g_x: &[f64], grads: &mut LayerGrads) -> Vec<f64> {
        let d = g_x.len();
        let mut g_y = vec![0.0; d];
        let mut g_raw_scale = vec![0.0; d];
        let mut g_shift_out = vec![0.0; d];
        for j in 0..d {
            if self.mask[j] {
                g_y[j] = g_x[j];
                continue;
            }
            let e = (-cache.s[j]).exp();
            g_y[j] = g_x[j] * e;
            g_shift_out[j] = -g_x[j] * e;
            let g_s = -g_x[j] * cache.x[j] + 1.0;
            // d/d raw of s = s_max * tanh(raw); tanh(raw) = s / s_max.
            let th = cache.s[j] / self.s_max;
            g_raw_scale[j] = g_s * self.s_max * (1.0 - th * th);
        }
        let g_m_scale = self
            .scale_net
            .backward(&cache.m, &cache.scale, &g_raw_scale, &mut grads.scale);
        let g_m_shift = self
            .shift_net
            .backward(&cache.m, &cache.shift, &g_shift_out, &mut grads.shift);
        for j in 0..d {
            if self.mask[j] {
                g_y[j] += g_m_scale[j] + g_m_shift[j];
            }
        }
        g_y
    }
}

/// Parameter-shaped gradient accumulator for one layer.
pub struct LayerGrads {
    scale: Mlp,
    shift: Mlp,
}

pub struct FlowGrads {
    layers: Vec<LayerGrads>,
}

impl FlowGrads {
    pub fn zeros_like(model: &FlowModel) -> Self {
        FlowGrads {
            layers: model
                .layers
                .iter()
                .map(|_| LayerGrads {
                    scale: Mlp::zeros(model.dim),
                    shift: Mlp::zeros(model.dim),
                })
                .collect(),
        }
    }

    pub fn add_scaled(&mut self, other: &FlowGrads, factor: f64) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.scale.add_scaled(&b.scale, factor);
            a.shift.add_scaled(&b.shift, factor);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for l in &mut self.layers {
            l.scale.w1.scale(factor);
            l.scale.w2.scale(factor);
            l.scale.b1.iter_mut().for_each(|v| *v *= factor);
            l.scale.b2.iter_mut().for_each(|v| *v *= factor);
            l.shift.w1.scale(factor);
            l.shift.w2.scale(factor);
            l.shift.b1.iter_mut().for_each(|v| *v *= factor);
            l.shift.b2.iter_mut().for_each(|v| *v *= factor);
        }
    }

    /// Flat view in the model's parameter order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            l.scale.for_each_param(&mut |v| out.push(v));
            l.shift.for_each_param(&mut |v| out.push(v));
        }
        out
    }
}

/// Stack of coupling layers with alternating masks and a standard Gaussian
/// prior in R^dim.
#[derive(Clone, Debug)]
pub struct FlowModel {
    layers: Vec<CouplingLayer>,
    dim: usize,
}

pub struct FlowFitConfig {
    pub steps: usize,
    pub step_size: f64,
    /// None = full-batch gradient descent; Some(b) samples b rows per step.
    pub batch_size: Option<usize>,
}

impl Default for FlowFitConfig {
    fn default() -> Self {
        FlowFitConfig {
            steps: 500,
            step_size: 1e-2,
            batch_size: None,
        }
    }
}

impl FlowModel {
    /// Identity flow: all net parameters zero.
    pub fn identity(dim: usize, num_layers: usize, s_max: f64) -> Self {
        FlowModel {
            layers: (0..num_layers)
                .map(|k| CouplingLayer {
                    mask: CouplingLayer::alternating_mask(dim, k),
                    scale_net: Mlp::zeros(dim),
                    shift_net: Mlp::zeros(dim),
                    s_max,
                })
                .collect(),
            dim,
        }
    }

    /// Random hidden layers, zero output layers: still the identity map at
    /// init, but ready to train.
    pub fn seeded(dim: usize, num_layers: usize, s_max: f64, rng: &mut SeededRng) -> Self {
        FlowModel {
            layers: (0..num_layers)
                .map(|k| CouplingLayer {
                    mask: CouplingLayer::alternating_mask(dim, k),
                    scale_net: Mlp::seeded(dim, rng),
                    shift_net: Mlp::seeded(dim, rng),
                    s_max,
                })
                .collect(),
            dim,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn s_max(&self) -> f64 {
        self.layers.first().map(|l| l.s_max).unwrap_or(DEFAULT_S_MAX)
    }

    /// z -> h through the layers in order; returns the accumulated log
    /// determinant of the Jacobian.
    pub fn forward(&self, z: &[f64]) -> (Vec<f64>, f64) {
        assert_eq!(z.len(), self.dim);
        let mut v = z.to_vec();
        let mut log_det = 0.0;
        for layer in &self.layers {
            let (next, ld) = layer.forward(&v);
            v = next;
            log_det += ld;
        }
        (v, log_det)
    }

    /// h -> z through the layers in reverse; exact algebraic inverse miroring
    /// `forward`, with log_det_inv = -log_det at the same point.
    pub fn inverse(&self, h: &[f64]) -> (Vec<f64>, f64) {
        assert_eq!(h.len(), self.dim);
        let mut v = h.to_vec();
        let mut log_det_inv = 0.0;
        for layer in self.layers.iter().rev() {
            let cache = layer.inverse_cached(&v);
            for &s in &cache.s {
                log_det_inv -= s;
            }
            v = cache.x;
        }
        (v, log_det_inv)
    }

    fn item_nll(&self, h: &[f64]) -> f64 {
        let (z, log_det_inv) = self.inverse(h);
        let d = self.dim as f64;
        let log_pz = -0.5 * d * (2.0 * std::f64::consts::PI).ln() - 0.5 * dot(&z, &z);
        -(log_pz + log_det_inv)
    }

    /// Mean negative log-likelihood of the rows of `batch` under the flow.
    pub fn nll(&self, batch: &Mat) -> f64 {
        assert!(batch.rows() > 0, "empty batch");
        assert_eq!(batch.cols(), self.dim);
        let per: Vec<f64> = par::map_range(batch.rows(), |i| self.item_nll(batch.row(i)));
        per.iter().sum::<f64>() / batch.rows() as f64
    }

    /// NLL of one row plus gradients for every parameter and for the input.
    pub fn item_nll_grad(&self, h: &[f64]) -> (f64, FlowGrads, Vec<f64>) {
        assert_eq!(h.len(), self.dim);
        // Inverse pass with caches; layers are applied in reverse order.
        let mut caches: Vec<Option<LayerCache>> = (0..self.layers.len()).map(|_| None).collect();
        let mut v = h.to_vec();
        for (k, layer) in self.layers.iter().enumerate().rev() {
            let cache = layer.inverse_cached(&v);
            v = cache.x.clone();
            caches[k] = Some(cache);
        }
        let z = v;
        let d = self.dim as f64;
        let mut nll = 0.5 * d * (2.0 * std::f64::consts::PI).ln() + 0.5 * dot(&z, &z);
        for cache in caches.iter().flatten() {
            nll += cache.s.iter().sum::<f64>();
        }

        let mut grads = FlowGrads::zeros_like(self);
        let mut g = z; // d nll / d z
        for (k, layer) in self.layers.iter().enumerate() {
            let cache = caches[k].as_ref().unwrap();
            g = layer.backward_inverse(cache, &g, &mut grads.layers[k]);
        }
        (nll, grads, g)
    }

    /// Mean NLL over the rows of `batch` and the matching mean gradients.
    pub fn nll_grad(&self, batch: &Mat) -> (f64, FlowGrads) {
        assert!(batch.rows() > 0, "empty batch");
        let per: Vec<(f64, FlowGrads, Vec<f64>)> =
            par::map_range(batch.rows(), |i| self.item_nll_grad(batch.row(i)));
        let scale = 1.0 / batch.rows() as f64;
        let mut nll = 0.0;
        let mut grads = FlowGrads::zeros_like(self);
        for (l, g, _) in &per {
            nll += l * scale;
            grads.add_scaled(g, scale);
        }
        (nll, grads)
    }

    pub fn apply_update(&mut self, grads: &FlowGrads, step: f64) {
        for (layer, g) in self.layers.iter_mut().zip(&grads.layers) {
            layer.scale_net.add_scaled(&g.scale, -step);
            layer.shift_net.add_scaled(&g.shift, -step);
        }
    }

    /// Maximum-likelihood fit by gradient descent. Full-batch by default;
    /// with a batch size, rows are sampled per step from `rng`. Returns the
    /// per-step NLL curve. Aborts on a non-finite NLL, reporting the last
    /// finite value.
    pub fn fit(&mut self, data: &Mat, cfg: &FlowFitConfig, rng: &mut SeededRng) -> Result<Vec<f64>> {
        if data.rows() == 0 {
            return Err(Error::InvalidArg("flow fit needs a nonempty dataset".into()));
        }
        if cfg.step_size <= 0.0 {
            return Err(Error::InvalidArg("step size must be > 0".into()));
        }
        let mut curve = Vec::with_capacity(cfg.steps);
        let mut last_finite = f64::NAN;
        for step in 0..cfg.steps {
            let batch = match cfg.batch_size {
                Some(b) if b < data.rows() => {
                    let mut m = Mat::zeros(b, self.dim);
                    for i in 0..b {
                        let src = rng.index(data.rows());
                        m.row_mut(i).copy_from_slice(data.row(src));
                    }
                    m
                }
                _ => data.clone(),
            };
            let (nll, grads) = self.nll_grad(&batch);
            if !nll.is_finite() {
                return Err(Error::Diverged {
                    context: format!("flow fit step {step}"),
                    last_loss: last_finite,
                });
            }
            last_finite = nll;
            curve.push(nll);
            self.apply_update(&grads, cfg.step_size);
        }
        Ok(curve)
    }

    /// Row-wise inverse map: the calibrated embedding matrix z = f^-1(h).
    pub fn calibrate(&self, h: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
        if h.dim() != self.dim {
            return Err(Error::InvalidArg(format!(
                "flow dimension {} does not match embedding dimension {}",
                self.dim,
                h.dim()
            )));
        }
        let rows: Vec<Vec<f64>> = par::map_range(h.rows(), |i| self.inverse(h.row(i)).0);
        EmbeddingMatrix::from_rows(&rows)
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.scale_net.param_count() + l.shift_net.param_count())
            .sum()
    }

    /// Flat parameter vector: per layer, scale net then shift net, each as
    /// (w1 row-major, b1, w2 row-major, b2).
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            l.scale_net.for_each_param(&mut |v| out.push(v));
            l.shift_net.for_each_param(&mut |v| out.push(v));
        }
        out
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::InvalidArg(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                params.len()
            )));
        }
        let mut iter = params.iter().copied();
        for l in &mut self.layers {
            l.scale_net.set_from(&mut iter);
            l.shift_net.set_from(&mut iter);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::{finite_diff_grad, max_rel_err, norm};

    fn random_model(dim: usize, layers: usize, rng: &mut SeededRng) -> FlowModel {
        let mut model = FlowModel::identity(dim, layers, DEFAULT_S_MAX);
        let params: Vec<f64> = (0..model.param_count()).map(|_| 0.5 * rng.gaussian()).collect();
        model.set_params(&params).unwrap();
        model
    }

    #[test]
    fn identity_flow_is_identity() {
        let model = FlowModel::identity(3, DEFAULT_LAYERS, DEFAULT_S_MAX);
        let z = vec![0.3, -1.2, 0.7];
        let (h, ld) = model.forward(&z);
        assert_eq!(h, z);
        assert_eq!(ld, 0.0);
        let (back, ldi) = model.inverse(&h);
        assert_eq!(back, z);
        assert_eq!(ldi, 0.0);
    }

    #[test]
    fn hand_layer_scale_two_shift_one() {
        // Single layer, d = 2, passes coordinate 0; constant nets give
        // s = ln 2 and t = 1 on coordinate 1.
        let mut model = FlowModel::identity(2, 1, DEFAULT_S_MAX);
        let raw = (2.0f64.ln() / DEFAULT_S_MAX).atanh();
        model.layers[0].scale_net.b2[1] = raw;
        model.layers[0].shift_net.b2[1] = 1.0;
        let z = vec![0.3, -0.7];
        let (h, ld) = model.forward(&z);
        assert!((h[0] - 0.3).abs() <= 1e-12);
        assert!((h[1] - (2.0 * -0.7 + 1.0)).abs() <= 1e-12);
        assert!((ld - 2.0f64.ln()).abs() <= 1e-12);
        let (z2, ldi) = model.inverse(&h);
        assert!((z2[0] - h[0]).abs() <= 1e-12);
        assert!((z2[1] - (h[1] - 1.0) / 2.0).abs() <= 1e-12);
        assert!((ldi + 2.0f64.ln()).abs() <= 1e-12);
    }

    #[test]
    fn round_trip_random_models() {
        let mut rng = SeededRng::new(17);
        for case in 0..50 {
            let dim = 2 + (case % 5); // includes odd dims
            let model = random_model(dim, DEFAULT_LAYERS, &mut rng);
            let z = rng.gaussian_vec(dim);
            let (h, ld) = model.forward(&z);
            let (back, ldi) = model.inverse(&h);
            for (a, b) in z.iter().zip(&back) {
                assert!((a - b).abs() <= 1e-8, "case {case}");
            }
            assert!((ld + ldi).abs() <= 1e-10, "case {case}: {ld} vs {ldi}");
        }
    }

    #[test]
    fn identity_nll_at_origin() {
        let model = FlowModel::identity(2, DEFAULT_LAYERS, DEFAULT_S_MAX);
        let batch = Mat::zeros(1, 2);
        let nll = model.nll(&batch);
        assert!((nll - (2.0 * std::f64::consts::PI).ln()).abs() <= 1e-12);
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let mut rng = SeededRng::new(23);
        for case in 0..10 {
            let dim = 2 + (case % 3);
            let model = random_model(dim, 2, &mut rng);
            let batch = Mat::from_fn(4, dim, |_, _| rng.gaussian());
            let (_, grads) = model.nll_grad(&batch);
            let analytic = grads.flatten();
            let params = model.params();
            let numeric = finite_diff_grad(
                |p| {
                    let mut m = model.clone();
                    m.set_params(p).unwrap();
                    m.nll(&batch)
                },
                &params,
                1e-5,
            )
            .unwrap();
            let err = max_rel_err(&analytic, &numeric);
            assert!(err <= 1e-5, "case {case}: rel err {err}");
        }
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let mut rng = SeededRng::new(29);
        let model = random_model(3, 2, &mut rng);
        let h = rng.gaussian_vec(3);
        let (_, _, gh) = model.item_nll_grad(&h);
        let numeric = finite_diff_grad(|x| model.item_nll(x), &h, 1e-5).unwrap();
        let err = max_rel_err(&gh, &numeric);
        assert!(err <= 1e-5, "rel err {err}");
    }

    #[test]
    fn fit_on_standard_gaussian_does_not_regress() {
        let mut rng = SeededRng::new(31);
        let data = Mat::from_fn(256, 3, |_, _| rng.gaussian());
        let mut model = FlowModel::seeded(3, 2, DEFAULT_S_MAX, &mut rng);
        let cfg = FlowFitConfig {
            steps: 100,
            step_size: 1e-2,
            batch_size: None,
        };
        let curve = model.fit(&data, &cfg, &mut rng).unwrap();
        assert!(curve.last().unwrap() <= &(curve[0] + 0.01));
    }

    #[test]
    fn fit_centers_shifted_gaussian() {
        let mut rng = SeededRng::new(37);
        let dim = 4;
        let data = Mat::from_fn(256, dim, |_, _| 5.0 + rng.gaussian());
        let mut model = FlowModel::seeded(dim, DEFAULT_LAYERS, DEFAULT_S_MAX, &mut rng);
        let cfg = FlowFitConfig {
            steps: 3000,
            step_size: 5e-2,
            batch_size: None,
        };
        model.fit(&data, &cfg, &mut rng).unwrap();
        let mut mean = vec![0.0; dim];
        for i in 0..data.rows() {
            let (z, _) = model.inverse(data.row(i));
            for (m, v) in mean.iter_mut().zip(&z) {
                *m += v / data.rows() as f64;
            }
        }
        let mean_norm = norm(&mean);
        assert!(
            mean_norm <= 0.1 * (dim as f64).sqrt(),
            "mapped mean norm {mean_norm}"
        );
    }

    #[test]
    fn fit_improves_anisotropic_gaussian() {
        let mut rng = SeededRng::new(41);
        let dim = 4;
        let data = Mat::from_fn(256, dim, |_, j| {
            let scale = if j == 0 { 3.0 } else { 1.0 };
            scale * rng.gaussian()
        });
        let mut model = FlowModel::seeded(dim, DEFAULT_LAYERS, DEFAULT_S_MAX, &mut rng);
        let init_nll = model.nll(&data);
        let cfg = FlowFitConfig {
            steps: 600,
            step_size: 2e-2,
            batch_size: None,
        };
        model.fit(&data, &cfg, &mut rng).unwrap();
        let final_nll = model.nll(&data);
        assert!(final_nll <= init_nll - 0.5, "{init_nll} -> {final_nll}");
    }

    #[test]
    fn calibrate_identity_and_round_trip() {
        let mut rng = SeededRng::new(43);
        let h = EmbeddingMatrix::new(Mat::from_fn(6, 4, |_, _| rng.gaussian())).unwrap();
        let ident = FlowModel::identity(4, DEFAULT_LAYERS, DEFAULT_S_MAX);
        assert_eq!(ident.calibrate(&h).unwrap().as_mat(), h.as_mat());

        let model = random_model(4, DEFAULT_LAYERS, &mut rng);
        let z = model.calibrate(&h).unwrap();
        for i in 0..h.rows() {
            let (back, _) = model.forward(z.row(i));
            for (a, b) in back.iter().zip(h.row(i)) {
                assert!((a - b).abs() <= 1e-8);
            }
        }
    }

    #[test]
    fn params_round_trip() {
        let mut rng = SeededRng::new(47);
        let model = random_model(5, 3, &mut rng);
        let mut copy = FlowModel::identity(5, 3, DEFAULT_S_MAX);
        copy.set_params(&model.params()).unwrap();
        assert_eq!(copy.params(), model.params());
        assert!(copy.set_params(&[0.0]).is_err());
    }
}
