//! A desk-scale contextual sequence model: token embeddings plus fixed
//! sinusoidal position vectors, one head of scaled dot-product self-attention
//! pooled at the final position, and a softmax output head over the matrix W
//! that the calibration methods target. Backpropagation is manual.

use crate::error::{Error, Result};
use crate::numkit::{dot, Mat, SeededRng};
use crate::par;

pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug)]
pub struct ToyConfig {
    pub vocab: usize,
    pub dim: usize,
    pub context_len: usize,
    pub seed: u64,
    pub epochs: usize,
    pub step_size: f64,
    pub batch_size: usize,
    pub tie_output: bool,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            vocab: 64,
            dim: 32,
            context_len: 16,
            seed: 1,
            epochs: 10,
            step_size: 1e-2,
            batch_size: 32,
            tie_output: false,
        }
    }
}

impl ToyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab < 2 || self.dim < 2 || self.context_len < 2 {
            return Err(Error::InvalidArg(
                "need vocab >= 2, dim >= 2, context_len >= 2".into(),
            ));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.step_size <= 0.0 {
            return Err(Error::InvalidArg(
                "need epochs >= 1, batch_size >= 1, step_size > 0".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct ToyModel {
    pub emb: Mat,     // vocab x dim token embeddings
    pub wq: Mat,      // dim x dim
    pub wk: Mat,      // dim x dim
    pub wv: Mat,      // dim x dim
    pub wo: Mat,      // dim x dim
    pub out: Mat,     // vocab x dim output matrix (ignored when tied)
    pos: Mat,         // context_len x dim, fixed sinusoidal
    tie_output: bool,
}

/// Per-item forward pass values kept for the backward pass.
pub struct ItemForward {
    x: Mat, // embedded context, L x dim
    q: Vec<f64>,
    keys: Mat,
    vals: Mat,
    /// Softmax attention weights from the final position; sums to 1.
    pub attention: Vec<f64>,
    ctxv: Vec<f64>, // attention-weighted value vector
    pub h: Vec<f64>,
    pub logits: Vec<f64>,
}

/// Parameter-shaped gradients.
#[derive(Clone, Debug)]
pub struct ToyGrads {
    pub emb: Mat,
    pub wq: Mat,
    pub wk: Mat,
    pub wv: Mat,
    pub wo: Mat,
    pub out: Mat,
}

impl ToyGrads {
    pub fn zeros(vocab: usize, dim: usize) -> Self {
        ToyGrads {
            emb: Mat::zeros(vocab, dim),
            wq: Mat::zeros(dim, dim),
            wk: Mat::zeros(dim, dim),
            wv: Mat::zeros(dim, dim),
            wo: Mat::zeros(dim, dim),
            out: Mat::zeros(vocab, dim),
        }
    }

    pub fn add_scaled(&mut self, other: &ToyGrads, factor: f64) {
        self.emb.add_scaled(&other.emb, factor);
        self.wq.add_scaled(&other.wq, factor);
        self.wk.add_scaled(&other.wk, factor);
        self.wv.add_scaled(&other.wv, factor);
        self.wo.add_scaled(&other.wo, factor);
        self.out.add_scaled(&other.out, factor);
    }
}

/// m += a (x) b.
fn outer_acc(m: &mut Mat, a: &[f64], b: &[f64]) {
    for (i, &ai) in a.iter().enumerate() {
        if ai == 0.0 {
            continue;
        }
        let row = m.row_mut(i);
        for (j, r) in row.iter_mut().enumerate() {
            *r += ai * b[j];
        }
    }
}

fn sinusoidal_positions(len: usize, dim: usize) -> Mat {
    Mat::from_fn(len, dim, |j, i| {
        let rate = 10000f64.powf(-(2.0 * (i / 2) as f64) / dim as f64);
        let angle = j as f64 * rate;
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

pub(crate) fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let exps: Vec<f64> = scores.iter().map(|&s| (s - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Mean cross-entropy of softmax(logits) rows against targets, stabilized
/// with a max shift.
pub fn nll_loss(logits: &Mat, targets: &[usize]) -> f64 {
    assert_eq!(logits.rows(), targets.len());
    let mut total = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        total += item_nll(logits.row(i), t);
    }
    total / targets.len() as f64
}

pub(crate) fn item_nll(logits: &[f64], target: usize) -> f64 {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let lse = max + logits.iter().map(|&l| (l - max).exp()).sum::<f64>().ln();
    lse - logits[target]
}

impl ToyModel {
    pub fn init(cfg: &ToyConfig, rng: &mut SeededRng) -> Self {
        let gauss = |r: usize, c: usize, rng: &mut SeededRng| {
            Mat::from_fn(r, c, |_, _| INIT_STD * rng.gaussian())
        };
        ToyModel {
            emb: gauss(cfg.vocab, cfg.dim, rng),
            wq: gauss(cfg.dim, cfg.dim, rng),
            wk: gauss(cfg.dim, cfg.dim, rng),
            wv: gauss(cfg.dim, cfg.dim, rng),
            wo: gauss(cfg.dim, cfg.dim, rng),
            out: gauss(cfg.vocab, cfg.dim, rng),
            pos: sinusoidal_positions(cfg.context_len, cfg.dim),
            tie_output: cfg.tie_output,
        }
    }

    pub fn vocab(&self) -> usize {
        self.emb.rows()
    }

    pub fn dim(&self) -> usize {
        self.emb.cols()
    }

    pub fn tied(&self) -> bool {
        self.tie_output
    }

    /// The matrix scored against h in the softmax head; the calibration target.
    pub fn output_matrix(&self) -> &Mat {
        if self.tie_output {
            &self.emb
        } else {
            &self.out
        }
    }

    pub fn is_finite(&self) -> bool {
        self.emb.is_finite()
            && self.wq.is_finite()
            && self.wk.is_finite()
            && self.wv.is_finite()
            && self.wo.is_finite()
            && self.out.is_finite()
    }

    pub fn forward_item(&self, ctx: &[usize]) -> ItemForward {
        let len = ctx.len();
        let dim = self.dim();
        debug_assert_eq!(len, self.pos.rows());
        let x = Mat::from_fn(len, dim, |j, i| self.emb.get(ctx[j], i) + self.pos.get(j, i));
        let q = self.wq.matvec(x.row(len - 1));
        let mut keys = Mat::zeros(len, dim);
        let mut vals = Mat::zeros(len, dim);
        for j in 0..len {
            keys.row_mut(j).copy_from_slice(&self.wk.matvec(x.row(j)));
            vals.row_mut(j).copy_from_slice(&self.wv.matvec(x.row(j)));
        }
        let inv_sqrt_d = 1.0 / (dim as f64).sqrt();
        let scores: Vec<f64> = (0..len).map(|j| dot(&q, keys.row(j)) * inv_sqrt_d).collect();
        let attention = softmax(&scores);
        let mut ctxv = vec![0.0; dim];
        for j in 0..len {
            let a = attention[j];
            for (c, v) in ctxv.iter_mut().zip(vals.row(j)) {
                *c += a * v;
            }
        }
        let h = self.wo.matvec(&ctxv);
        let logits = self.output_matrix().matvec(&h);
        ItemForward {
            x,
            q,
            keys,
            vals,
            attention,
            ctxv,
            h,
            logits,
        }
    }

    /// Batch forward: per-item contextual vectors (B x dim) and logits (B x vocab).
    pub fn forward(&self, contexts: &[Vec<usize>]) -> (Mat, Mat) {
        let per: Vec<ItemForward> = par::map_slice(contexts, |ctx| self.forward_item(ctx));
        let mut h = Mat::zeros(contexts.len(), self.dim());
        let mut logits = Mat::zeros(contexts.len(), self.vocab());
        for (i, f) in per.iter().enumerate() {
            h.row_mut(i).copy_from_slice(&f.h);
            logits.row_mut(i).copy_from_slice(&f.logits);
        }
        (h, logits)
    }

    /// Cross-entropy backward for one item. `extra_dh` is an additional
    /// cotangent on h (used by joint flow training). Returns the item NLL
    /// and unscaled parameter gradients.
    pub fn backward_item(
        &self,
        ctx: &[usize],
        target: usize,
        fwd: &ItemForward,
        extra_dh: Option<&[f64]>,
    ) -> (f64, ToyGrads) {
        let len = ctx.len();
        let dim = self.dim();
        let nll = item_nll(&fwd.logits, target);
        let mut grads = ToyGrads::zeros(self.vocab(), dim);

        // Softmax cross-entropy: d nll / d logits = p - onehot(target).
        let mut dz = softmax(&fwd.logits);
        dz[target] -= 1.0;

        let w = self.output_matrix();
        let mut dh = w.matvec_t(&dz);
        let gout = if self.tie_output {
            &mut grads.emb
        } else {
            &mut grads.out
        };
        outer_acc(gout, &dz, &fwd.h);
        if let Some(extra) = extra_dh {
            for (a, b) in dh.iter_mut().zip(extra) {
                *a += b;
            }
        }

        // h = Wo c
        outer_acc(&mut grads.wo, &dh, &fwd.ctxv);
        let dc = self.wo.matvec_t(&dh);

        // c = sum_j attention_j * v_j
        let dalpha: Vec<f64> = (0..len).map(|j| dot(&dc, fwd.vals.row(j))).collect();
        let weighted: f64 = fwd
            .attention
            .iter()
            .zip(&dalpha)
            .map(|(a, g)| a * g)
            .sum();
        let inv_sqrt_d = 1.0 / (dim as f64).sqrt();

        let mut dx = Mat::zeros(len, dim);
        let mut dq = vec![0.0; dim];
        for j in 0..len {
            // Softmax backward, then the scaled dot-product score.
            let de = fwd.attention[j] * (dalpha[j] - weighted) * inv_sqrt_d;
            for (i, v) in dq.iter_mut().enumerate() {
                *v += de * fwd.keys.get(j, i);
            }
            let xj = fwd.x.row(j);
            let dkeys: Vec<f64> = fwd.q.iter().map(|&qi| de * qi).collect();
            outer_acc(&mut grads.wk, &dkeys, xj);
            let dvals: Vec<f64> = dc.iter().map(|&ci| fwd.attention[j] * ci).collect();
            outer_acc(&mut grads.wv, &dvals, xj);
            let dxk = self.wk.matvec_t(&dkeys);
            let dxv = self.wv.matvec_t(&dvals);
            let row = dx.row_mut(j);
            for i in 0..dim {
                row[i] += dxk[i] + dxv[i];
            }
        }

        // Query path: only the final position feeds q.
        let xq = fwd.x.row(len - 1);
        outer_acc(&mut grads.wq, &dq, xq);
        let dxq = self.wq.matvec_t(&dq);
        {
            let row = dx.row_mut(len - 1);
            for i in 0..dim {
                row[i] += dxq[i];
            }
        }

        // Embedding rows accumulate over positions; positions are constant.
        for j in 0..len {
            let row = dx.row(j).to_vec();
            let erow = grads.emb.row_mut(ctx[j]);
            for (e, g) in erow.iter_mut().zip(&row) {
                *e += g;
            }
        }

        (nll, grads)
    }

    pub fn apply_update(&mut self, grads: &ToyGrads, step: f64) {
        self.emb.add_scaled(&grads.emb, -step);
        self.wq.add_scaled(&grads.wq, -step);
        self.wk.add_scaled(&grads.wk, -step);
        self.wv.add_scaled(&grads.wv, -step);
        self.wo.add_scaled(&grads.wo, -step);
        self.out.add_scaled(&grads.out, -step);
    }

    /// Flat parameter vector (emb, wq, wk, wv, wo, out; each row-major).
    pub fn params(&self) -> Vec<f64> {
        let mut v = Vec::new();
        for m in [&self.emb, &self.wq, &self.wk, &self.wv, &self.wo, &self.out] {
            v.extend_from_slice(m.data());
        }
        v
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        let total: usize = [&self.emb, &self.wq, &self.wk, &self.wv, &self.wo, &self.out]
            .iter()
            .map(|m| m.data().len())
            .sum();
        if params.len() != total {
            return Err(Error::InvalidArg(format!(
                "expected {total} parameters, got {}",
                params.len()
            )));
        }
        let mut offset = 0;
        for m in [
            &mut self.emb,
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.out,
        ] {
            let n = m.data().len();
            m.data_mut().copy_from_slice(&params[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    pub fn flat_grads(grads: &ToyGrads) -> Vec<f64> {
        let mut v = Vec::new();
        for m in [
            &grads.emb, &grads.wq, &grads.wk, &grads.wv, &grads.wo, &grads.out,
        ] {
            v.extend_from_slice(m.data());
        }
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> ToyConfig {
        ToyConfig {
            vocab: 5,
            dim: 4,
            context_len: 3,
            seed: 3,
            ..ToyConfig::default()
        }
    }

    #[test]
    fn zero_parameters_give_uniform_softmax() {
        let cfg = tiny_cfg();
        let mut rng = SeededRng::new(cfg.seed);
        let mut model = ToyModel::init(&cfg, &mut rng);
        let zeros = vec![0.0; model.params().len()];
        model.set_params(&zeros).unwrap();
        let fwd = model.forward_item(&[0, 1, 2]);
        assert!(fwd.h.iter().all(|&v| v == 0.0));
        assert!(fwd.logits.iter().all(|&v| v == 0.0));
        let p = softmax(&fwd.logits);
        assert!(p.iter().all(|&v| (v - 0.2).abs() <= 1e-15));
    }

    #[test]
    fn attention_weights_sum_to_one() {
        let cfg = tiny_cfg();
        let mut rng = SeededRng::new(11);
        let model = ToyModel::init(&cfg, &mut rng);
        let fwd = model.forward_item(&[4, 0, 2]);
        let sum: f64 = fwd.attention.iter().sum();
        assert!((sum - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn hand_traced_attention_step() {
        // L=2, d=2, one item; every step recomputed with explicit scalar
        // arithmetic, including the fixed sinusoidal positions.
        let cfg = ToyConfig {
            vocab: 2,
            dim: 2,
            context_len: 2,
            seed: 0,
            ..ToyConfig::default()
        };
        let mut rng = SeededRng::new(0);
        let mut model = ToyModel::init(&cfg, &mut rng);
        model.emb = Mat::from_rows(&[vec![0.1, -0.2], vec![0.3, 0.5]]);
        model.wq = Mat::from_rows(&[vec![1.0, 0.5], vec![0.0, -1.0]]);
        model.wk = Mat::from_rows(&[vec![0.5, 0.0], vec![0.2, 1.0]]);
        model.wv = Mat::from_rows(&[vec![-1.0, 0.3], vec![0.4, 0.8]]);
        model.wo = Mat::from_rows(&[vec![0.7, -0.6], vec![0.1, 0.9]]);
        model.out = Mat::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);

        let ctx = [1usize, 0usize];
        // pos row 0 = (sin 0, cos 0) = (0, 1); pos row 1 = (sin 1, cos 1).
        let x0 = [0.3 + 0.0, 0.5 + 1.0];
        let x1 = [0.1 + 1f64.sin(), -0.2 + 1f64.cos()];
        let q = [
            1.0 * x1[0] + 0.5 * x1[1],
            0.0 * x1[0] + (-1.0) * x1[1],
        ];
        let k0 = [0.5 * x0[0], 0.2 * x0[0] + 1.0 * x0[1]];
        let k1 = [0.5 * x1[0], 0.2 * x1[0] + 1.0 * x1[1]];
        let v0 = [-1.0 * x0[0] + 0.3 * x0[1], 0.4 * x0[0] + 0.8 * x0[1]];
        let v1 = [-1.0 * x1[0] + 0.3 * x1[1], 0.4 * x1[0] + 0.8 * x1[1]];
        let inv = 1.0 / 2f64.sqrt();
        let e0 = (q[0] * k0[0] + q[1] * k0[1]) * inv;
        let e1 = (q[0] * k1[0] + q[1] * k1[1]) * inv;
        let m = e0.max(e1);
        let (a0, a1) = ((e0 - m).exp(), (e1 - m).exp());
        let z = a0 + a1;
        let (a0, a1) = (a0 / z, a1 / z);
        let c = [a0 * v0[0] + a1 * v1[0], a0 * v0[1] + a1 * v1[1]];
        let h = [0.7 * c[0] - 0.6 * c[1], 0.1 * c[0] + 0.9 * c[1]];
        let logits = [h[0], h[1]];

        let fwd = model.forward_item(&ctx);
        for (got, want) in fwd.logits.iter().zip(&logits) {
            assert!((got - want).abs() <= 1e-12, "{got} vs {want}");
        }
        assert!((fwd.attention[0] - a0).abs() <= 1e-12);
    }

    #[test]
    fn nll_values() {
        let logits = Mat::from_rows(&[vec![0.0, 0.0]]);
        assert!((nll_loss(&logits, &[0]) - 2f64.ln()).abs() <= 1e-15);

        let logits = Mat::from_rows(&[vec![10.0, -10.0]]);
        let want = (1.0 + (-20.0f64).exp()).ln();
        assert!((nll_loss(&logits, &[0]) - want).abs() <= 1e-12);
    }

    #[test]
    fn nll_shift_invariance() {
        let base = vec![0.3, -1.2, 2.0, 0.7];
        let shifted: Vec<f64> = base.iter().map(|v| v + 123.456).collect();
        let a = item_nll(&base, 2);
        let b = item_nll(&shifted, 2);
        assert!((a - b).abs() <= 1e-12);
    }

    #[test]
    fn argmax_invariant_under_positive_h_rescaling() {
        let cfg = tiny_cfg();
        let mut rng = SeededRng::new(19);
        let model = ToyModel::init(&cfg, &mut rng);
        let fwd = model.forward_item(&[1, 2, 3]);
        let argmax = |xs: &[f64]| {
            let mut best = 0;
            for i in 1..xs.len() {
                if xs[i] > xs[best] {
                    best = i;
                }
            }
            best
        };
        let scaled: Vec<f64> = model.output_matrix().matvec(
            &fwd.h.iter().map(|v| v * 7.5).collect::<Vec<_>>(),
        );
        assert_eq!(argmax(&fwd.logits), argmax(&scaled));
    }

    #[test]
    fn item_gradients_match_finite_differences() {
        use crate::numkit::{finite_diff_grad, max_rel_err};
        let cfg = tiny_cfg();
        let mut rng = SeededRng::new(23);
        let model = ToyModel::init(&cfg, &mut rng);
        let ctx = vec![0usize, 3, 1];
        let target = 2usize;
        let fwd = model.forward_item(&ctx);
        let (_, grads) = model.backward_item(&ctx, target, &fwd, None);
        let analytic = ToyModel::flat_grads(&grads);
        let params = model.params();
        let numeric = finite_diff_grad(
            |p| {
                let mut m = model.clone();
                m.set_params(p).unwrap();
                item_nll(&m.forward_item(&ctx).logits, target)
            },
            &params,
            1e-5,
        )
        .unwrap();
        let err = max_rel_err(&analytic, &numeric);
        assert!(err <= 1e-5, "rel err {err}");
    }

    #[test]
    fn tied_model_routes_output_grads_to_embeddings() {
        use crate::numkit::{finite_diff_grad, max_rel_err};
        let cfg = ToyConfig {
            tie_output: true,
            ..tiny_cfg()
        };
        let mut rng = SeededRng::new(29);
        let model = ToyModel::init(&cfg, &mut rng);
        assert!(model.tied());
        let ctx = vec![4usize, 1, 0];
        let fwd = model.forward_item(&ctx);
        let (_, grads) = model.backward_item(&ctx, 3, &fwd, None);
        assert_eq!(grads.out.max_abs(), 0.0);
        let analytic = ToyModel::flat_grads(&grads);
        let params = model.params();
        let numeric = finite_diff_grad(
            |p| {
                let mut m = model.clone();
                m.set_params(p).unwrap();
                item_nll(&m.forward_item(&ctx).logits, 3)
            },
            &params,
            1e-5,
        )
        .unwrap();
        let err = max_rel_err(&analytic, &numeric);
        assert!(err <= 1e-5, "rel err {err}");
    }
}
