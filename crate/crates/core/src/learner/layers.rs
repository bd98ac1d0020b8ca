use rand::Rng;

use super::tape::{Activation, NodeId, ParamId, ParamStore, Tape};
use crate::error::{Error, Result};

fn uniform_init<R: Rng + ?Sized>(n: usize, fan_in: usize, rng: &mut R) -> Vec<f64> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
}

/// Fully connected layer `activation(W x + b)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dense {
    pub weights: ParamId,
    pub bias: ParamId,
    pub activation: Activation,
    pub input_dim: usize,
    pub output_dim: usize,
}

impl Dense {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input_dim: usize,
        output_dim: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        let weights =
            store.add(format!("{name}.weight"), vec![output_dim, input_dim], uniform_init(output_dim * input_dim, input_dim, rng))?;
        let bias = store.add(format!("{name}.bias"), vec![output_dim], uniform_init(output_dim, input_dim, rng))?;
        Ok(Self { weights, bias, activation, input_dim, output_dim })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let pre = tape.affine(store, self.weights, Some(self.bias), x)?;
        Ok(tape.activation(pre, self.activation))
    }

    /// Tape-free evaluation for a single input.
    pub fn apply(&self, store: &ParamStore, x: &[f64]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let xn = tape.leaf(x.to_vec());
        let y = self.forward(&mut tape, store, xn)?;
        Ok(tape.value(y).to_vec())
    }

    pub fn zero(&self, store: &mut ParamStore) {
        store.get_mut(self.weights).values.iter_mut().for_each(|v| *v = 0.0);
        store.get_mut(self.bias).values.iter_mut().for_each(|v| *v = 0.0);
    }
}

/// A stack of dense layers sharing one hidden activation.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

impl Mlp {
    /// `dims = [in, h1, ..., out]`; hidden layers use `hidden`, the last uses `output`.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dims: &[usize],
        hidden: Activation,
        output: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::Domain("an MLP needs at least input and output sizes".into()));
        }
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let act = if i + 1 == n { output } else { hidden };
                Dense::new(store, &format!("{name}.{i}"), dims[i], dims[i + 1], act, rng)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { layers })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim
    }

    pub fn output_layer(&self) -> &Dense {
        &self.layers[self.layers.len() - 1]
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        self.layers.iter().try_fold(x, |h, l| l.forward(tape, store, h))
    }

    pub fn apply(&self, store: &ParamStore, x: &[f64]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let xn = tape.leaf(x.to_vec());
        let y = self.forward(&mut tape, store, xn)?;
        Ok(tape.value(y).to_vec())
    }
}

/// LSTM cell. Gate rows of the fused weight are ordered input, forget,
/// candidate, output; the weight acts on `[x ; h]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LstmCell {
    pub weights: ParamId,
    pub bias: ParamId,
    pub input_size: usize,
    pub hidden_size: usize,
}

impl LstmCell {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, input_size: usize, hidden_size: usize, rng: &mut R) -> Result<Self> {
        let fan_in = input_size + hidden_size;
        let weights =
            store.add(format!("{name}.weight"), vec![4 * hidden_size, fan_in], uniform_init(4 * hidden_size * fan_in, fan_in, rng))?;
        let mut b = uniform_init(4 * hidden_size, fan_in, rng);
        // Forget-gate bias starts at 1 so early gradients flow through the cell state.
        b[hidden_size..2 * hidden_size].iter_mut().for_each(|v| *v = 1.0);
        let bias = store.add(format!("{name}.bias"), vec![4 * hidden_size], b)?;
        Ok(Self { weights, bias, input_size, hidden_size })
    }

    /// One recurrence step on the tape; returns `(h', c')`.
    pub fn forward_step(&self, tape: &mut Tape, store: &ParamStore, x: NodeId, h: NodeId, c: NodeId) -> Result<(NodeId, NodeId)> {
        let n = self.hidden_size;
        if tape.value(h).len() != n || tape.value(c).len() != n {
            return Err(Error::Domain(format!("LSTM state must have length {n}")));
        }
        if tape.value(x).len() != self.input_size {
            return Err(Error::Domain(format!("LSTM input must have length {}, got {}", self.input_size, tape.value(x).len())));
        }
        let xh = tape.concat(&[x, h]);
        let gates = tape.affine(store, self.weights, Some(self.bias), xh)?;
        let i = tape.slice(gates, 0, n)?;
        let f = tape.slice(gates, n, n)?;
        let g = tape.slice(gates, 2 * n, n)?;
        let o = tape.slice(gates, 3 * n, n)?;
        let i = tape.activation(i, Activation::Sigmoid);
        let f = tape.activation(f, Activation::Sigmoid);
        let g = tape.activation(g, Activation::Tanh);
        let o = tape.activation(o, Activation::Sigmoid);
        let fc = tape.mul(f, c)?;
        let ig = tape.mul(i, g)?;
        let c_next = tape.add(fc, ig)?;
        let tc = tape.activation(c_next, Activation::Tanh);
        let h_next = tape.mul(o, tc)?;
        Ok((h_next, c_next))
    }

    /// Tape-free single step.
    pub fn step(&self, store: &ParamStore, x: &[f64], h: &[f64], c: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut tape = Tape::new();
        let (xn, hn, cn) = (tape.leaf(x.to_vec()), tape.leaf(h.to_vec()), tape.leaf(c.to_vec()));
        let (h2, c2) = self.forward_step(&mut tape, store, xn, hn, cn)?;
        Ok((tape.value(h2).to_vec(), tape.value(c2).to_vec()))
    }

    /// Runs the cell over `inputs` from a zero state and returns the final hidden node.
    pub fn unroll(&self, tape: &mut Tape, store: &ParamStore, inputs: &[NodeId]) -> Result<NodeId> {
        let mut h = tape.leaf(vec![0.0; self.hidden_size]);
        let mut c = tape.leaf(vec![0.0; self.hidden_size]);
        for &x in inputs {
            let (h2, c2) = self.forward_step(tape, store, x, h, c)?;
            h = h2;
            c = c2;
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    #[test]
    fn dense_identity_linear() {
        let mut store = ParamStore::new();
        let l = Dense::new(&mut store, "l", 2, 2, Activation::Linear, &mut rng()).unwrap();
        store.get_mut(l.weights).values = vec![1.0, 0.0, 0.0, 1.0];
        store.get_mut(l.bias).values = vec![0.0, 0.0];
        assert_eq!(l.apply(&store, &[1.0, 2.0]).unwrap(), vec![1.0, 2.0]);
    }

    #[test]
    fn dense_zero_weights_relu_bias() {
        let mut store = ParamStore::new();
        let l = Dense::new(&mut store, "l", 3, 1, Activation::ReLU, &mut rng()).unwrap();
        l.zero(&mut store);
        store.get_mut(l.bias).values = vec![3.0];
        assert_eq!(l.apply(&store, &[5.0, -1.0, 2.0]).unwrap(), vec![3.0]);
    }

    #[test]
    fn dense_hand_product_relu() {
        let mut store = ParamStore::new();
        let l = Dense::new(&mut store, "l", 2, 1, Activation::ReLU, &mut rng()).unwrap();
        store.get_mut(l.weights).values = vec![1.0, -1.0];
        store.get_mut(l.bias).values = vec![0.0];
        assert_eq!(l.apply(&store, &[2.0, 5.0]).unwrap(), vec![0.0]);
    }

    #[test]
    fn dense_shape_mismatch() {
        let mut store = ParamStore::new();
        let l = Dense::new(&mut store, "l", 2, 1, Activation::ReLU, &mut rng()).unwrap();
        assert!(l.apply(&store, &[1.0]).is_err());
    }

    #[test]
    fn lstm_zero_params_gives_zero_hidden() {
        let mut store = ParamStore::new();
        let cell = LstmCell::new(&mut store, "c", 3, 4, &mut rng()).unwrap();
        for t in store.tensors_mut() {
            t.values.iter_mut().for_each(|v| *v = 0.0);
        }
        // From a zero state: c' = sigmoid(0) * 0 + sigmoid(0) * tanh(0) = 0.
        for x in [[1.0, -2.0, 0.5], [10.0, 3.0, -7.0]] {
            let (h, c) = cell.step(&store, &x, &[0.0; 4], &[0.0; 4]).unwrap();
            assert!(h.iter().all(|v| *v == 0.0));
            assert!(c.iter().all(|v| *v == 0.0));
        }
    }

    /// Independent scalar re-implementation of the gate equations.
    fn reference_lstm(w: &[f64], b: &[f64], x: &[f64], h: &[f64], c: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let n = h.len();
        let xh: Vec<f64> = x.iter().chain(h).copied().collect();
        let m = xh.len();
        let row = |r: usize| -> f64 { b[r] + (0..m).map(|j| w[r * m + j] * xh[j]).sum::<f64>() };
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let mut h2 = vec![0.0; n];
        let mut c2 = vec![0.0; n];
        for k in 0..n {
            let i = sig(row(k));
            let f = sig(row(n + k));
            let g = row(2 * n + k).tanh();
            let o = sig(row(3 * n + k));
            c2[k] = f * c[k] + i * g;
            h2[k] = o * c2[k].tanh();
        }
        (h2, c2)
    }

    #[test]
    fn lstm_matches_reference_equations() {
        let mut store = ParamStore::new();
        let cell = LstmCell::new(&mut store, "c", 3, 5, &mut rng()).unwrap();
        let x = [0.4, -1.2, 0.7];
        let h = [0.1, -0.2, 0.3, 0.0, 0.5];
        let c = [1.0, -0.5, 0.2, 0.8, -1.5];
        let (h2, c2) = cell.step(&store, &x, &h, &c).unwrap();
        let (rh, rc) = reference_lstm(&store.get(cell.weights).values, &store.get(cell.bias).values, &x, &h, &c);
        for (a, b) in h2.iter().zip(&rh).chain(c2.iter().zip(&rc)) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        assert!(h2.iter().all(|v| v.abs() < 1.0));
        assert_eq!(cell.step(&store, &x, &h, &c).unwrap(), (h2, c2));
    }

    #[test]
    fn lstm_shape_mismatch() {
        let mut store = ParamStore::new();
        let cell = LstmCell::new(&mut store, "c", 3, 2, &mut rng()).unwrap();
        assert!(cell.step(&store, &[1.0, 2.0], &[0.0; 2], &[0.0; 2]).is_err());
        assert!(cell.step(&store, &[1.0, 2.0, 3.0], &[0.0; 3], &[0.0; 2]).is_err());
    }
}
