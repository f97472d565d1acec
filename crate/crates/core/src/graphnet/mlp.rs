use rand::Rng;
use rvae_autodiff::{ParameterStore, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Three dense layers `in → hidden → hidden → out` with ReLU after the
/// first two and a linear last layer.
///
/// The first layer takes several input groups, each with its own weight
/// block `{prefix}/l0/w{g}`; this equals one dense layer over the
/// concatenated inputs. Groups of width 0 own no parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub prefix: String,
    pub inputs: Vec<usize>,
    pub hidden: usize,
    pub out: usize,
}

/// One input group: rows of `var`, optionally gathered by `index` after the
/// group's first-layer product (so node-level inputs can feed edges).
#[derive(Debug, Clone, Copy)]
pub struct MlpInput<'a> {
    pub var: Var,
    pub gather: Option<&'a [usize]>,
}

impl<'a> MlpInput<'a> {
    pub fn rows(var: Var) -> Self {
        Self { var, gather: None }
    }

    pub fn gathered(var: Var, index: &'a [usize]) -> Self {
        Self { var, gather: Some(index) }
    }
}

pub const LAYERS: usize = 3;

impl Mlp {
    pub fn new(prefix: impl Into<String>, inputs: Vec<usize>, hidden: usize, out: usize) -> Self {
        Self {
            prefix: prefix.into(),
            inputs,
            hidden,
            out,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.inputs.iter().sum()
    }

    fn widths(&self) -> [usize; LAYERS + 1] {
        [self.in_dim(), self.hidden, self.hidden, self.out]
    }

    pub fn weight_name(&self, layer: usize, group: usize) -> String {
        if layer == 0 {
            format!("{}/l0/w{group}", self.prefix)
        } else {
            format!("{}/l{layer}/w", self.prefix)
        }
    }

    pub fn bias_name(&self, layer: usize) -> String {
        format!("{}/l{layer}/b", self.prefix)
    }

    /// Glorot-uniform weights and zero biases. With `zero_last` the final
    /// layer starts at zero, so the network initially outputs 0.
    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParameterStore, rng: &mut R, zero_last: bool) {
        let w = self.widths();
        for (g, &d) in self.inputs.iter().enumerate() {
            if d > 0 {
                // fan-in of the whole layer keeps the scale of a concatenated layer
                let limit = (6.0 / (w[0] + w[1]) as f64).sqrt();
                let data = (0..d * w[1]).map(|_| rng.random_range(-limit..=limit)).collect();
                store.insert(self.weight_name(0, g), Tensor::new(vec![d, w[1]], data).expect("finite init"));
            }
        }
        store.insert_zeros(self.bias_name(0), &[w[1]]);
        for layer in 1..LAYERS {
            let name = self.weight_name(layer, 0);
            if zero_last && layer == LAYERS - 1 {
                store.insert_zeros(name, &[w[layer], w[layer + 1]]);
            } else {
                store.insert_glorot(name, w[layer], w[layer + 1], rng);
            }
            store.insert_zeros(self.bias_name(layer), &[w[layer + 1]]);
        }
    }

    /// Evaluates the network on `rows` output rows.
    pub fn forward(&self, tape: &mut Tape, store: &ParameterStore, inputs: &[MlpInput<'_>], rows: usize) -> Result<Var> {
        if inputs.len() != self.inputs.len() {
            return Err(Error::Dimension(format!(
                "{}: {} input groups for {} declared",
                self.prefix,
                inputs.len(),
                self.inputs.len()
            )));
        }
        let mut parts = Vec::with_capacity(inputs.len());
        for (g, (input, &d)) in inputs.iter().zip(&self.inputs).enumerate() {
            let cols = tape.value(input.var).cols();
            if cols != d {
                return Err(Error::Dimension(format!("{} group {g}: width {cols}, expected {d}", self.prefix)));
            }
            if d == 0 {
                continue;
            }
            let got = input.gather.map_or(tape.value(input.var).rows(), <[usize]>::len);
            if got != rows {
                return Err(Error::Dimension(format!("{} group {g}: {got} rows, expected {rows}", self.prefix)));
            }
            let w = tape.param(store, &self.weight_name(0, g))?;
            parts.push((tape.matmul(input.var, w)?, input.gather));
        }
        let b = tape.param(store, &self.bias_name(0))?;
        let mut h = tape.gather_sum(&parts, b, rows, true)?;
        for layer in 1..LAYERS {
            let w = tape.param(store, &self.weight_name(layer, 0))?;
            let b = tape.param(store, &self.bias_name(layer))?;
            h = tape.dense(h, w, b, layer + 1 < LAYERS)?;
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dense(x: &[f64], w: &Tensor, b: &Tensor, relu: bool) -> Vec<f64> {
        (0..w.cols())
            .map(|j| {
                let s: f64 = x.iter().enumerate().map(|(i, xi)| xi * w.get(i, j)).sum::<f64>() + b.data()[j];
                if relu {
                    s.max(0.0)
                } else {
                    s
                }
            })
            .collect()
    }

    #[test]
    fn grouped_first_layer_matches_concatenated_dense_net() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mlp = Mlp::new("m", vec![2, 0, 3], 4, 2);
        let mut store = ParameterStore::new();
        mlp.init(&mut store, &mut rng, false);
        for name in ["m/l0/b", "m/l1/b", "m/l2/b"] {
            let shape = store.get(name).unwrap().shape().to_vec();
            let data = (0..shape[0]).map(|_| rng.random_range(-0.5..0.5)).collect();
            store.set(name, Tensor::new(shape, data).unwrap()).unwrap();
        }
        assert!(!store.contains("m/l0/w1"));
        let a = Tensor::from_rows(&[vec![0.3, -1.0], vec![0.9, 0.2]], 2).unwrap();
        let c = Tensor::from_rows(&[vec![1.0, 0.5, -0.25], vec![-0.7, 0.1, 0.4]], 3).unwrap();
        let mut tape = Tape::new();
        let va = tape.constant(a.clone());
        let vb = tape.constant(Tensor::zeros(&[2, 0]));
        let vc = tape.constant(c.clone());
        let out = mlp
            .forward(&mut tape, &store, &[MlpInput::rows(va), MlpInput::rows(vb), MlpInput::rows(vc)], 2)
            .unwrap();
        let w0a = store.get("m/l0/w0").unwrap();
        let w0c = store.get("m/l0/w2").unwrap();
        let mut w0 = w0a.to_rows();
        w0.extend(w0c.to_rows());
        let w0 = Tensor::from_rows(&w0, 4).unwrap();
        for r in 0..2 {
            let x: Vec<f64> = a.row(r).iter().chain(c.row(r)).copied().collect();
            let h = dense(&x, &w0, store.get("m/l0/b").unwrap(), true);
            let h = dense(&h, store.get("m/l1/w").unwrap(), store.get("m/l1/b").unwrap(), true);
            let y = dense(&h, store.get("m/l2/w").unwrap(), store.get("m/l2/b").unwrap(), false);
            for (p, q) in tape.value(out).row(r).iter().zip(&y) {
                assert!((p - q).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_last_outputs_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mlp = Mlp::new("z", vec![3], 5, 2);
        let mut store = ParameterStore::new();
        mlp.init(&mut store, &mut rng, true);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[4, 3], 0.7));
        let y = mlp.forward(&mut tape, &store, &[MlpInput::rows(x)], 4).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn inputless_mlp_is_a_learned_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mlp = Mlp::new("c", vec![0], 3, 2);
        let mut store = ParameterStore::new();
        mlp.init(&mut store, &mut rng, false);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[3, 0]));
        let y = mlp.forward(&mut tape, &store, &[MlpInput::rows(x)], 3).unwrap();
        let y = tape.value(y);
        assert_eq!(y.shape(), &[3, 2]);
        assert_eq!(y.row(0), y.row(2));
    }

    #[test]
    fn width_mismatch_is_reported() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mlp = Mlp::new("m", vec![2], 3, 1);
        let mut store = ParameterStore::new();
        mlp.init(&mut store, &mut rng, false);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 3]));
        assert!(matches!(
            mlp.forward(&mut tape, &store, &[MlpInput::rows(x)], 1),
            Err(Error::Dimension(_))
        ));
    }
}
