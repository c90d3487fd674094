//! Layer primitives composed by the encoder, decoder and ranking modules.

use rand::Rng;

use super::graph::{Graph, Var};
use super::params::{ParamId, ParameterSet};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Log-probabilities of `scores`, computed with max subtraction.
pub fn log_softmax(scores: &[f64]) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(Error::Empty("log_softmax of an empty vector"));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("log_softmax input".into()));
    }
    Ok(super::graph::log_softmax(scores))
}

/// Affine map `x W + b`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        params: &mut ParameterSet,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let w = params.add_uniform(format!("{name}.w"), in_dim, out_dim, rng)?;
        let b = if bias {
            Some(params.add_zeros(format!("{name}.b"), 1, out_dim)?)
        } else {
            None
        };
        Ok(Self {
            w,
            b,
            in_dim,
            out_dim,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.w);
        let y = g.matmul(x, w);
        match self.b {
            Some(b) => {
                let b = g.param(b);
                g.add_row(y, b)
            }
            None => y,
        }
    }
}

/// Learned gain and bias applied after row normalisation.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    gain: ParamId,
    bias: ParamId,
}

impl LayerNorm {
    pub fn new(params: &mut ParameterSet, name: &str, dim: usize) -> Result<Self> {
        let gain = params.add(format!("{name}.gain"), Tensor::filled(1, dim, 1.0))?;
        let bias = params.add_zeros(format!("{name}.bias"), 1, dim)?;
        Ok(Self { gain, bias })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let n = g.layer_norm_rows(x, 1e-5);
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        let y = g.mul_row(n, gain);
        g.add_row(y, bias)
    }
}

/// Weights of one LSTM layer. Gate blocks are laid out `[input, forget,
/// cell, output]` along the columns of `w_x`, `w_h` and `b`.
#[derive(Debug, Clone)]
pub struct LstmWeights {
    pub w_x: ParamId,
    pub w_h: ParamId,
    pub b: ParamId,
    pub input_dim: usize,
    pub hidden_dim: usize,
}

impl LstmWeights {
    pub fn new(
        params: &mut ParameterSet,
        name: &str,
        input_dim: usize,
        hidden_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let w_x = params.add_uniform(format!("{name}.w_x"), input_dim, 4 * hidden_dim, rng)?;
        let w_h = params.add_uniform(format!("{name}.w_h"), hidden_dim, 4 * hidden_dim, rng)?;
        let mut bias = vec![0.0; 4 * hidden_dim];
        bias[hidden_dim..2 * hidden_dim].fill(1.0);
        let b = params.add(
            format!("{name}.b"),
            Tensor::from_vec(1, 4 * hidden_dim, bias),
        )?;
        Ok(Self {
            w_x,
            w_h,
            b,
            input_dim,
            hidden_dim,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

impl LstmState {
    pub fn zeros(g: &mut Graph, hidden: usize) -> Self {
        let h = g.leaf(Tensor::zeros(1, hidden));
        let c = g.leaf(Tensor::zeros(1, hidden));
        Self { h, c }
    }
}

/// Runs one LSTM layer over `inputs`, one `1 x input_dim` row per step.
pub fn lstm_forward(
    g: &mut Graph,
    inputs: &[Var],
    init: LstmState,
    w: &LstmWeights,
) -> Result<(Vec<Var>, LstmState)> {
    if inputs.is_empty() {
        return Err(Error::Empty("lstm_forward needs at least one input step"));
    }
    for &x in inputs {
        if g.value(x).rows() != 1 || g.value(x).cols() != w.input_dim {
            return Err(Error::Config(format!(
                "lstm input width {} does not match weights ({})",
                g.value(x).cols(),
                w.input_dim
            )));
        }
    }
    let xs = g.concat_rows(inputs);
    let (out, last) = lstm_forward_matrix(g, xs, init, w)?;
    let steps = (0..inputs.len()).map(|t| g.row(out, t)).collect();
    Ok((steps, last))
}

/// Runs one LSTM layer over the rows of `inputs` (`T x input_dim`) and
/// returns the `T x hidden` output matrix and the final state.
pub fn lstm_forward_matrix(
    g: &mut Graph,
    inputs: Var,
    init: LstmState,
    w: &LstmWeights,
) -> Result<(Var, LstmState)> {
    let (steps, width) = (g.value(inputs).rows(), g.value(inputs).cols());
    if steps == 0 {
        return Err(Error::Empty("lstm_forward needs at least one input step"));
    }
    if width != w.input_dim {
        return Err(Error::Config(format!(
            "lstm input width {width} does not match weights ({})",
            w.input_dim
        )));
    }
    let hd = w.hidden_dim;
    if g.value(init.h).cols() != hd || g.value(init.c).cols() != hd {
        return Err(Error::Config("lstm initial state width mismatch".into()));
    }
    let w_x = g.param(w.w_x);
    let w_h = g.param(w.w_h);
    let b = g.param(w.b);
    let proj = g.matmul(inputs, w_x);
    let proj = g.add_row(proj, b);

    let mut state = init;
    let mut outputs = Vec::with_capacity(steps);
    for t in 0..steps {
        let xt = g.row(proj, t);
        let rec = g.matmul(state.h, w_h);
        let gates = g.add(xt, rec);
        let sig = g.sigmoid(gates);
        let i = g.slice_cols(sig, 0, hd);
        let f = g.slice_cols(sig, hd, hd);
        let o = g.slice_cols(sig, 3 * hd, hd);
        let cell_pre = g.slice_cols(gates, 2 * hd, hd);
        let cell = g.tanh(cell_pre);
        let keep = g.mul(f, state.c);
        let write = g.mul(i, cell);
        let c = g.add(keep, write);
        let tc = g.tanh(c);
        let h = g.mul(o, tc);
        outputs.push(h);
        state = LstmState { h, c };
    }
    let out = g.concat_rows(&outputs);
    Ok((out, state))
}

/// Stacked LSTM; layer `l + 1` consumes the outputs of layer `l`.
#[derive(Debug, Clone)]
pub struct LstmStack {
    pub layers: Vec<LstmWeights>,
}

impl LstmStack {
    pub fn new(
        params: &mut ParameterSet,
        name: &str,
        input_dim: usize,
        hidden_dim: usize,
        num_layers: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if num_layers == 0 {
            return Err(Error::Config(format!("{name}: num_layers must be >= 1")));
        }
        let layers = (0..num_layers)
            .map(|l| {
                let inp = if l == 0 { input_dim } else { hidden_dim };
                LstmWeights::new(params, &format!("{name}.l{l}"), inp, hidden_dim, rng)
            })
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn hidden_dim(&self) -> usize {
        self.layers[0].hidden_dim
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Returns top-layer outputs (`T x hidden`) and per-layer final states.
    pub fn forward(
        &self,
        g: &mut Graph,
        inputs: Var,
        init: Option<&[LstmState]>,
    ) -> Result<(Var, Vec<LstmState>)> {
        let mut x = inputs;
        let mut finals = Vec::with_capacity(self.layers.len());
        for (l, w) in self.layers.iter().enumerate() {
            let s0 = match init {
                Some(states) => states[l],
                None => LstmState::zeros(g, w.hidden_dim),
            };
            let (out, last) = lstm_forward_matrix(g, x, s0, w)?;
            finals.push(last);
            x = out;
        }
        Ok((x, finals))
    }
}

/// Scaled dot-product multi-head attention with learned projections.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
}

impl MultiHeadAttention {
    pub fn new(
        params: &mut ParameterSet,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "{name}: dim {dim} not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            q: Linear::new(params, &format!("{name}.q"), dim, dim, true, rng)?,
            k: Linear::new(params, &format!("{name}.k"), dim, dim, true, rng)?,
            v: Linear::new(params, &format!("{name}.v"), dim, dim, true, rng)?,
            o: Linear::new(params, &format!("{name}.o"), dim, dim, true, rng)?,
            heads,
        })
    }

    /// `queries` is `n x d`, `memory` is `m x d`; `mask` (n x m, row-major)
    /// marks which memory slots each query may attend to.
    pub fn forward(&self, g: &mut Graph, queries: Var, memory: Var, mask: Option<&[bool]>) -> Var {
        let d = self.q.out_dim;
        let dh = d / self.heads;
        let q = self.q.forward(g, queries);
        let k = self.k.forward(g, memory);
        let v = self.v.forward(g, memory);
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(q, h * dh, dh);
            let kh = g.slice_cols(k, h * dh, dh);
            let vh = g.slice_cols(v, h * dh, dh);
            let kt = g.transpose(kh);
            let scores = g.matmul(qh, kt);
            let scores = g.scale(scores, scale);
            let attn = g.softmax_rows(scores, mask);
            heads.push(g.matmul(attn, vh));
        }
        let cat = if heads.len() == 1 {
            heads[0]
        } else {
            g.concat_cols(&heads)
        };
        self.o.forward(g, cat)
    }
}

/// Position-wise feed-forward block `relu(x W1 + b1) W2 + b2`.
#[derive(Debug, Clone)]
pub struct FeedForward {
    l1: Linear,
    l2: Linear,
}

impl FeedForward {
    pub fn new(
        params: &mut ParameterSet,
        name: &str,
        dim: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            l1: Linear::new(params, &format!("{name}.ff1"), dim, hidden, true, rng)?,
            l2: Linear::new(params, &format!("{name}.ff2"), hidden, dim, true, rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let h = self.l1.forward(g, x);
        let h = g.relu(h);
        self.l2.forward(g, h)
    }
}

/// Post-norm transformer encoder layer.
#[derive(Debug, Clone)]
pub struct TransformerEncoderLayer {
    attn: MultiHeadAttention,
    norm1: LayerNorm,
    ff: FeedForward,
    norm2: LayerNorm,
}

impl TransformerEncoderLayer {
    pub fn new(
        params: &mut ParameterSet,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            attn: MultiHeadAttention::new(params, &format!("{name}.attn"), dim, heads, rng)?,
            norm1: LayerNorm::new(params, &format!("{name}.norm1"), dim)?,
            ff: FeedForward::new(params, name, dim, 2 * dim, rng)?,
            norm2: LayerNorm::new(params, &format!("{name}.norm2"), dim)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let a = self.attn.forward(g, x, x, None);
        let x = g.add(x, a);
        let x = self.norm1.forward(g, x);
        let f = self.ff.forward(g, x);
        let x = g.add(x, f);
        self.norm2.forward(g, x)
    }
}

/// Post-norm transformer decoder layer: causal self-attention, attention
/// over an encoder memory, then feed-forward.
#[derive(Debug, Clone)]
pub struct TransformerDecoderLayer {
    self_attn: MultiHeadAttention,
    norm1: LayerNorm,
    cross_attn: MultiHeadAttention,
    norm2: LayerNorm,
    ff: FeedForward,
    norm3: LayerNorm,
}

impl TransformerDecoderLayer {
    pub fn new(
        params: &mut ParameterSet,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            self_attn: MultiHeadAttention::new(params, &format!("{name}.self"), dim, heads, rng)?,
            norm1: LayerNorm::new(params, &format!("{name}.norm1"), dim)?,
            cross_attn: MultiHeadAttention::new(params, &format!("{name}.cross"), dim, heads, rng)?,
            norm2: LayerNorm::new(params, &format!("{name}.norm2"), dim)?,
            ff: FeedForward::new(params, name, dim, 2 * dim, rng)?,
            norm3: LayerNorm::new(params, &format!("{name}.norm3"), dim)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var, memory: Var, causal: &[bool]) -> Var {
        let a = self.self_attn.forward(g, x, x, Some(causal));
        let x = g.add(x, a);
        let x = self.norm1.forward(g, x);
        let c = self.cross_attn.forward(g, x, memory, None);
        let x = g.add(x, c);
        let x = self.norm2.forward(g, x);
        let f = self.ff.forward(g, x);
        let x = g.add(x, f);
        self.norm3.forward(g, x)
    }
}

/// Lower-triangular `n x n` mask: position `i` sees positions `0..=i`.
pub fn causal_mask(n: usize) -> Vec<bool> {
    (0..n * n).map(|k| k % n <= k / n).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn log_softmax_cases() {
        let u = log_softmax(&[0.0; 4]).unwrap();
        for v in u {
            assert!((v + 4f64.ln()).abs() < 1e-15);
        }
        assert_eq!(log_softmax(&[17.3]).unwrap(), vec![0.0]);
        assert!(log_softmax(&[]).is_err());
        // mpmath at 40 digits: ln(e^2 + e + 1) = 2.4076059644443803045
        let l = log_softmax(&[2.0, 1.0, 0.0]).unwrap();
        let expected = [-0.4076059644443803, -1.4076059644443803, -2.40760596444438];
        for (a, b) in l.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn lstm_rejects_empty_and_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut params = ParameterSet::new();
        let w = LstmWeights::new(&mut params, "l", 3, 2, &mut rng).unwrap();
        let mut g = Graph::new(&params);
        let s = LstmState::zeros(&mut g, 2);
        assert!(matches!(
            lstm_forward(&mut g, &[], s, &w),
            Err(Error::Empty(_))
        ));
        let x = g.leaf(Tensor::row(vec![1.0; 4]));
        assert!(matches!(
            lstm_forward(&mut g, &[x], s, &w),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn lstm_zero_weights_give_zero_outputs() {
        let mut params = ParameterSet::new();
        let w = LstmWeights {
            w_x: params.add_zeros("wx", 4, 8).unwrap(),
            w_h: params.add_zeros("wh", 2, 8).unwrap(),
            b: params.add_zeros("b", 1, 8).unwrap(),
            input_dim: 4,
            hidden_dim: 2,
        };
        let mut g = Graph::new(&params);
        let s = LstmState::zeros(&mut g, 2);
        let xs: Vec<_> = (0..3)
            .map(|t| g.leaf(Tensor::row(vec![t as f64 + 0.5; 4])))
            .collect();
        let (out, last) = lstm_forward(&mut g, &xs, s, &w).unwrap();
        assert_eq!(out.len(), 3);
        for o in &out {
            assert!(g.value(*o).values().iter().all(|&v| v == 0.0));
        }
        assert_eq!(g.value(last.h), g.value(*out.last().unwrap()));
    }

    #[test]
    fn forget_bias_starts_at_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut params = ParameterSet::new();
        let w = LstmWeights::new(&mut params, "l", 3, 2, &mut rng).unwrap();
        assert_eq!(
            params.value(w.b).values(),
            &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]
        );
    }

    #[test]
    fn causal_mask_is_lower_triangular() {
        assert_eq!(
            causal_mask(3),
            vec![true, false, false, true, true, false, true, true, true]
        );
    }

    #[test]
    fn attention_rejects_bad_heads() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut params = ParameterSet::new();
        assert!(MultiHeadAttention::new(&mut params, "a", 6, 4, &mut rng).is_err());
    }

    /// Plain-loop LSTM cell used as an oracle.
    fn scalar_lstm(params: &ParameterSet, w: &LstmWeights, xs: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let (wx, wh, b) = (params.value(w.w_x), params.value(w.w_h), params.value(w.b));
        let n = w.hidden_dim;
        let sig = |z: f64| 1.0 / (1.0 + (-z).exp());
        let (mut h, mut c) = (vec![0.0; n], vec![0.0; n]);
        let mut out = Vec::new();
        for x in xs {
            let mut z = b.values().to_vec();
            for (j, zj) in z.iter_mut().enumerate() {
                for (i, xi) in x.iter().enumerate() {
                    *zj += xi * wx.get(i, j);
                }
                for (i, hi) in h.iter().enumerate() {
                    *zj += hi * wh.get(i, j);
                }
            }
            for k in 0..n {
                let (ig, fg, gg, og) = (
                    sig(z[k]),
                    sig(z[n + k]),
                    z[2 * n + k].tanh(),
                    sig(z[3 * n + k]),
                );
                c[k] = fg * c[k] + ig * gg;
                h[k] = og * c[k].tanh();
            }
            out.push(h.clone());
        }
        out
    }

    #[test]
    fn lstm_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut params = ParameterSet::new();
        let w = LstmWeights::new(&mut params, "l", 3, 4, &mut rng).unwrap();
        let xs: Vec<Vec<f64>> = (0..5)
            .map(|t| (0..3).map(|i| ((t * 3 + i) as f64 * 0.37).sin()).collect())
            .collect();
        let expected = scalar_lstm(&params, &w, &xs);
        let mut g = Graph::new(&params);
        let s = LstmState::zeros(&mut g, 4);
        let x = g.leaf(Tensor::from_rows(&xs));
        let (out, last) = lstm_forward_matrix(&mut g, x, s, &w).unwrap();
        for (t, row) in expected.iter().enumerate() {
            for (a, b) in g.value(out).row_slice(t).iter().zip(row) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        assert_eq!(g.value(last.h).values(), g.value(out).row_slice(4));
    }

    #[test]
    fn layers_pass_grad_check() {
        use crate::substrate::gradcheck::grad_check;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut params = ParameterSet::new();
        let stack = LstmStack::new(&mut params, "s", 3, 4, 2, &mut rng).unwrap();
        let enc = TransformerEncoderLayer::new(&mut params, "e", 4, 2, &mut rng).unwrap();
        let dec = TransformerDecoderLayer::new(&mut params, "d", 4, 2, &mut rng).unwrap();
        let x = Tensor::from_vec(3, 3, (0..9).map(|i| (i as f64 * 0.71).cos()).collect());
        let report = grad_check(&params, 1e-6, |ps| {
            let mut g = Graph::new(ps);
            let xv = g.leaf(x.clone());
            let (h, _) = stack.forward(&mut g, xv, None)?;
            let m = enc.forward(&mut g, h);
            let y = dec.forward(&mut g, h, m, &causal_mask(3));
            let sq = g.mul(y, h);
            let loss = g.sum(sq);
            Ok((g.scalar(loss), g.backward(loss)))
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }
}
