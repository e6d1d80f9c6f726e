use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{softmax_raw, CategoricalDistribution, ConditionalModel, Logits, TokenId, Vocabulary};
use crate::distill::{divergence_and_grad_wrt_q, DistanceMeasure};
use crate::error::{Error, Result};
use crate::rng::SeededRng;

/// Dimensions of a [`NeuralDraftModel`]; determines the parameter layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub ids: usize,
    pub window: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
}

impl ModelShape {
    pub fn new(vocab: &Vocabulary, window: usize, embed_dim: usize, hidden_dim: usize) -> Result<Self> {
        if window == 0 || embed_dim == 0 || hidden_dim == 0 {
            return Err(Error::invalid("window, embed_dim and hidden_dim must be positive"));
        }
        Ok(Self { ids: vocab.total(), window, embed_dim, hidden_dim })
    }

    fn input_dim(&self) -> usize {
        self.window * self.embed_dim
    }

    // Block offsets in the flat parameter vector:
    // embedding | hidden weights | hidden bias | output weights | output bias
    fn w1_offset(&self) -> usize {
        self.ids * self.embed_dim
    }

    fn b1_offset(&self) -> usize {
        self.w1_offset() + self.input_dim() * self.hidden_dim
    }

    fn w2_offset(&self) -> usize {
        self.b1_offset() + self.hidden_dim
    }

    fn b2_offset(&self) -> usize {
        self.w2_offset() + self.hidden_dim * self.ids
    }

    pub fn parameter_count(&self) -> usize {
        self.b2_offset() + self.ids
    }

    /// Sizes of the five parameter blocks in storage order.
    pub fn block_sizes(&self) -> [usize; 5] {
        [
            self.ids * self.embed_dim,
            self.input_dim() * self.hidden_dim,
            self.hidden_dim,
            self.hidden_dim * self.ids,
            self.ids,
        ]
    }
}

/// One-hidden-layer fixed-window language model:
/// `logits = W2ᵀ tanh(W1ᵀ concat(E[ctx]) + b1) + b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct NeuralDraftModel {
    vocab: Vocabulary,
    shape: ModelShape,
    params: Vec<f64>,
}

/// Gradient with the same layout as the model it was computed for.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterGradient {
    shape: ModelShape,
    values: Vec<f64>,
}

impl ParameterGradient {
    pub fn zeros(shape: ModelShape) -> Self {
        Self { shape, values: vec![0.0; shape.parameter_count()] }
    }

    pub fn shape(&self) -> &ModelShape {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// `self += weight * other`.
    pub fn add_scaled(&mut self, other: &ParameterGradient, weight: f64) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch("gradients of different models".into()));
        }
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += weight * b;
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        for v in &mut self.values {
            *v *= factor;
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

struct Activations {
    key: Vec<usize>,
    input: Vec<f64>,
    hidden: Vec<f64>,
    logits: Vec<f64>,
}

impl NeuralDraftModel {
    pub fn zeros(vocab: Vocabulary, window: usize, embed_dim: usize, hidden_dim: usize) -> Result<Self> {
        let shape = ModelShape::new(&vocab, window, embed_dim, hidden_dim)?;
        Ok(Self { vocab, shape, params: vec![0.0; shape.parameter_count()] })
    }

    /// Uniform initialization: embeddings in ±1, hidden weights in ±1/√(w·d),
    /// output weights in ±`output_scale`/√h, zero biases.
    pub fn init(
        vocab: Vocabulary,
        window: usize,
        embed_dim: usize,
        hidden_dim: usize,
        output_scale: f64,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        let mut m = Self::zeros(vocab, window, embed_dim, hidden_dim)?;
        let s = m.shape;
        let fill = |slice: &mut [f64], bound: f64, rng: &mut SeededRng| {
            if bound > 0.0 {
                let dist = Uniform::new_inclusive(-bound, bound);
                for p in slice {
                    *p = dist.sample(rng);
                }
            }
        };
        let (e, rest) = m.params.split_at_mut(s.w1_offset());
        fill(e, 1.0, rng);
        let (w1, rest) = rest.split_at_mut(s.b1_offset() - s.w1_offset());
        fill(w1, 1.0 / (s.input_dim() as f64).sqrt(), rng);
        let (_b1, rest) = rest.split_at_mut(s.hidden_dim);
        let (w2, _b2) = rest.split_at_mut(s.hidden_dim * s.ids);
        fill(w2, output_scale / (s.hidden_dim as f64).sqrt(), rng);
        Ok(m)
    }

    /// Rebuilds a model from a flat parameter vector.
    pub fn from_params(vocab: Vocabulary, shape: ModelShape, params: Vec<f64>) -> Result<Self> {
        if shape.ids != vocab.total() {
            return Err(Error::ShapeMismatch(format!("shape has {} ids, vocabulary has {}", shape.ids, vocab.total())));
        }
        ModelShape::new(&vocab, shape.window, shape.embed_dim, shape.hidden_dim)?;
        if params.len() != shape.parameter_count() {
            return Err(Error::ShapeMismatch(format!(
                "{} parameters, expected {}",
                params.len(),
                shape.parameter_count()
            )));
        }
        Ok(Self { vocab, shape, params })
    }

    pub fn shape(&self) -> &ModelShape {
        &self.shape
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.len()
    }

    pub fn embedding_mut(&mut self) -> &mut [f64] {
        let end = self.shape.w1_offset();
        &mut self.params[..end]
    }

    pub fn hidden_weights_mut(&mut self) -> &mut [f64] {
        let (a, b) = (self.shape.w1_offset(), self.shape.b1_offset());
        &mut self.params[a..b]
    }

    pub fn hidden_bias_mut(&mut self) -> &mut [f64] {
        let (a, b) = (self.shape.b1_offset(), self.shape.w2_offset());
        &mut self.params[a..b]
    }

    pub fn output_weights_mut(&mut self) -> &mut [f64] {
        let (a, b) = (self.shape.w2_offset(), self.shape.b2_offset());
        &mut self.params[a..b]
    }

    pub fn output_bias_mut(&mut self) -> &mut [f64] {
        let a = self.shape.b2_offset();
        &mut self.params[a..]
    }

    /// Hex SHA-256 over the little-endian parameter bytes.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.params {
            h.update(p.to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// The last `window` ids of `context`, BOS-padded on the left.
    fn window_key(&self, context: &[TokenId]) -> Result<Vec<usize>> {
        if context.is_empty() {
            return Err(Error::invalid("context must contain at least BOS"));
        }
        let w = self.shape.window;
        let mut key = vec![self.vocab.bos().index(); w.saturating_sub(context.len())];
        for &t in &context[context.len().saturating_sub(w)..] {
            self.vocab.check(t)?;
            key.push(t.index());
        }
        Ok(key)
    }

    fn activations(&self, context: &[TokenId]) -> Result<Activations> {
        let s = &self.shape;
        let (d, h, ids) = (s.embed_dim, s.hidden_dim, s.ids);
        let key = self.window_key(context)?;
        let p = &self.params;

        let mut input = Vec::with_capacity(s.input_dim());
        for &t in &key {
            input.extend_from_slice(&p[t * d..(t + 1) * d]);
        }

        let w1 = &p[s.w1_offset()..s.b1_offset()];
        let mut hidden = p[s.b1_offset()..s.w2_offset()].to_vec();
        for (i, &x) in input.iter().enumerate() {
            if x != 0.0 {
                for (acc, &w) in hidden.iter_mut().zip(&w1[i * h..(i + 1) * h]) {
                    *acc += x * w;
                }
            }
        }
        for a in &mut hidden {
            *a = a.tanh();
        }

        let w2 = &p[s.w2_offset()..s.b2_offset()];
        let mut logits = p[s.b2_offset()..].to_vec();
        for (j, &a) in hidden.iter().enumerate() {
            for (acc, &w) in logits.iter_mut().zip(&w2[j * ids..(j + 1) * ids]) {
                *acc += a * w;
            }
        }
        Ok(Activations { key, input, hidden, logits })
    }

    /// Logits for the next token after `context`.
    pub fn forward(&self, context: &[TokenId]) -> Result<Logits> {
        Logits::new(self.activations(context)?.logits)
    }

    /// Loss `D(target ∥ softmax(forward(context)/tau))` and its exact gradient.
    pub fn loss_and_grad(
        &self,
        context: &[TokenId],
        target: &CategoricalDistribution,
        measure: DistanceMeasure,
        tau: f64,
    ) -> Result<(f64, ParameterGradient)> {
        let mut grad = ParameterGradient::zeros(self.shape);
        let loss = self.accumulate_loss_and_grad(context, target, measure, tau, 1.0, &mut grad)?;
        Ok((loss, grad))
    }

    /// Adds `weight * ∇loss` into `grad` and returns the unweighted loss.
    pub fn accumulate_loss_and_grad(
        &self,
        context: &[TokenId],
        target: &CategoricalDistribution,
        measure: DistanceMeasure,
        tau: f64,
        weight: f64,
        grad: &mut ParameterGradient,
    ) -> Result<f64> {
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::invalid(format!("temperature must be positive, got {tau}")));
        }
        if grad.shape != self.shape {
            return Err(Error::ShapeMismatch("gradient does not match model".into()));
        }
        if target.len() != self.shape.ids {
            return Err(Error::ShapeMismatch(format!("target has {} ids, model {}", target.len(), self.shape.ids)));
        }
        let act = self.activations(context)?;
        let q = softmax_raw(&act.logits, tau);
        let (loss, g) = divergence_and_grad_wrt_q(target.probs(), &q, measure)?;

        // Chain through softmax(z / tau): dL/dz_j = q_j (g_j - Σ_i q_i g_i) / tau.
        let mean_g: f64 = q.iter().zip(&g).map(|(q, g)| q * g).sum();
        let dz: Vec<f64> = q.iter().zip(&g).map(|(q, g)| weight * q * (g - mean_g) / tau).collect();
        self.backward(&act, &dz, grad);
        Ok(loss)
    }

    fn backward(&self, act: &Activations, dz: &[f64], grad: &mut ParameterGradient) {
        let s = &self.shape;
        let (d, h, ids) = (s.embed_dim, s.hidden_dim, s.ids);
        let p = &self.params;
        let gv = &mut grad.values;

        for (acc, &g) in gv[s.b2_offset()..].iter_mut().zip(dz) {
            *acc += g;
        }
        let w2 = &p[s.w2_offset()..s.b2_offset()];
        let mut d_pre = vec![0.0; h];
        {
            let gw2 = &mut gv[s.w2_offset()..s.b2_offset()];
            for j in 0..h {
                let a = act.hidden[j];
                let row = &w2[j * ids..(j + 1) * ids];
                let grow = &mut gw2[j * ids..(j + 1) * ids];
                let mut da = 0.0;
                for v in 0..ids {
                    grow[v] += a * dz[v];
                    da += row[v] * dz[v];
                }
                d_pre[j] = da * (1.0 - a * a);
            }
        }
        for (acc, &g) in gv[s.b1_offset()..s.w2_offset()].iter_mut().zip(&d_pre) {
            *acc += g;
        }
        let w1 = &p[s.w1_offset()..s.b1_offset()];
        let mut d_input = vec![0.0; s.input_dim()];
        {
            let gw1 = &mut gv[s.w1_offset()..s.b1_offset()];
            for (i, &x) in act.input.iter().enumerate() {
                let row = &w1[i * h..(i + 1) * h];
                let grow = &mut gw1[i * h..(i + 1) * h];
                let mut dx = 0.0;
                for j in 0..h {
                    grow[j] += x * d_pre[j];
                    dx += row[j] * d_pre[j];
                }
                d_input[i] = dx;
            }
        }
        for (slot, &t) in act.key.iter().enumerate() {
            for c in 0..d {
                gv[t * d + c] += d_input[slot * d + c];
            }
        }
    }
}

impl ConditionalModel for NeuralDraftModel {
    fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    fn conditional(&self, context: &[TokenId], tau: f64) -> Result<CategoricalDistribution> {
        super::softmax_with_temperature(&self.forward(context)?, tau)
    }

    fn context_window(&self) -> Option<usize> {
        Some(self.shape.window)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::softmax_with_temperature;

    fn vocab2() -> Vocabulary {
        Vocabulary::new(2).unwrap()
    }

    #[test]
    fn zero_model_is_uniform() {
        let v = vocab2();
        let m = NeuralDraftModel::zeros(v, 3, 4, 5).unwrap();
        let logits = m.forward(&[v.bos(), TokenId(1)]).unwrap();
        assert!(logits.values().iter().all(|&z| z == 0.0));
        let d = softmax_with_temperature(&logits, 1.0).unwrap();
        assert!(d.probs().iter().all(|&p| (p - 0.2).abs() < 1e-15));
    }

    #[test]
    fn forward_is_deterministic() {
        let v = vocab2();
        let m = NeuralDraftModel::init(v, 2, 3, 4, 1.0, &mut SeededRng::new(5)).unwrap();
        let ctx = [v.bos(), TokenId(0), TokenId(1)];
        let a = m.forward(&ctx).unwrap();
        let b = m.forward(&ctx).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn forward_matches_hand_computation() {
        // ids = 5 (two ordinary + reserved), w = 1, d = 2, h = 2.
        let v = vocab2();
        let mut m = NeuralDraftModel::zeros(v, 1, 2, 2).unwrap();
        m.embedding_mut()[2..4].copy_from_slice(&[0.5, -1.0]); // token 1
        m.hidden_weights_mut().copy_from_slice(&[1.0, 2.0, 0.5, -0.5]);
        m.hidden_bias_mut().copy_from_slice(&[0.1, -0.2]);
        let w2 = [1.0, 0.0, -1.0, 2.0, 0.0, 0.5, 1.0, 0.0, 3.0, -1.0];
        m.output_weights_mut().copy_from_slice(&w2);
        m.output_bias_mut().copy_from_slice(&[0.0, 0.1, 0.2, 0.3, 0.4]);

        // pre = x·W1 + b1 with x = (0.5, -1).
        let pre0: f64 = 0.5 * 1.0 + -0.5 + 0.1;
        let pre1: f64 = 0.5 * 2.0 + -1.0 * -0.5 - 0.2;
        let (a0, a1) = (pre0.tanh(), pre1.tanh());
        let b2 = [0.0, 0.1, 0.2, 0.3, 0.4];
        let expected: Vec<f64> = (0..5).map(|v| a0 * w2[v] + a1 * w2[5 + v] + b2[v]).collect();

        let got = m.forward(&[v.bos(), TokenId(1)]).unwrap();
        for (g, e) in got.values().iter().zip(&expected) {
            assert!((g - e).abs() < 1e-15, "{g} vs {e}");
        }
    }

    #[test]
    fn out_of_vocabulary_context_errors() {
        let m = NeuralDraftModel::zeros(vocab2(), 2, 2, 2).unwrap();
        assert!(m.forward(&[TokenId(42)]).is_err());
        assert!(m.forward(&[]).is_err());
    }

    #[test]
    fn parameter_count_depends_only_on_shape() {
        let v = Vocabulary::new(64).unwrap();
        let a = NeuralDraftModel::zeros(v, 8, 32, 64).unwrap();
        let b = NeuralDraftModel::init(v, 8, 32, 64, 1.0, &mut SeededRng::new(1)).unwrap();
        let ids = 67;
        assert_eq!(a.parameter_count(), ids * 32 + 8 * 32 * 64 + 64 + 64 * ids + ids);
        assert_eq!(a.parameter_count(), b.parameter_count());
        assert_eq!(a.shape().block_sizes().iter().sum::<usize>(), a.parameter_count());
    }

    #[test]
    fn matched_output_has_zero_loss_and_gradient() {
        let v = vocab2();
        let mut m = NeuralDraftModel::zeros(v, 1, 1, 1).unwrap();
        m.output_bias_mut().copy_from_slice(&[1.0, -0.5, 0.0, 0.3, 0.2]);
        let target = m.conditional(&[v.bos()], 1.0).unwrap();
        for measure in [DistanceMeasure::Kl, DistanceMeasure::Rkl, DistanceMeasure::Jsd { beta: 0.3 }] {
            let (loss, grad) = m.loss_and_grad(&[v.bos()], &target, measure, 1.0).unwrap();
            assert!(loss.abs() < 1e-12, "{measure:?}: {loss}");
            assert!(grad.max_abs() < 1e-8, "{measure:?}");
        }
    }

    #[test]
    fn kl_loss_matches_hand_value() {
        // Model distribution (0.9, 0.1) over two live ids, target (0.5, 0.5).
        let v = vocab2();
        let mut m = NeuralDraftModel::zeros(v, 1, 1, 1).unwrap();
        let neg = -1e3;
        m.output_bias_mut().copy_from_slice(&[9f64.ln(), 0.0, neg, neg, neg]);
        let target = CategoricalDistribution::new(vec![0.5, 0.5, 0.0, 0.0, 0.0]).unwrap();
        let (loss, _) = m.loss_and_grad(&[v.bos()], &target, DistanceMeasure::Kl, 1.0).unwrap();
        let expected = 0.5 * (0.5f64 / 0.9).ln() + 0.5 * (0.5f64 / 0.1).ln();
        assert!((loss - expected).abs() < 1e-9);
        assert!((loss - 0.5108).abs() < 1e-4);
    }

    #[test]
    fn model_is_send_and_sync() {
        fn assert_traits<T: Send + Sync>() {}
        assert_traits::<NeuralDraftModel>();
        assert_traits::<crate::model::GrammarOracle>();
    }
}
