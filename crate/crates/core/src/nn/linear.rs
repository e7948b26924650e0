use super::{ops, Init, ParamBuilder, ParamRange, Scalar};

/// Fully connected layer applied to a batch of row vectors.
///
/// Weights are stored `out x in`, row-major.
#[derive(Clone, Debug)]
pub struct Linear {
    pub input: usize,
    pub output: usize,
    pub weight: ParamRange,
    pub bias: ParamRange,
}

impl Linear {
    pub fn new(b: &mut ParamBuilder, input: usize, output: usize) -> Self {
        let weight = b.alloc(input * output, Init::fan_in(input));
        let bias = b.alloc(output, Init::Zeros);
        Self {
            input,
            output,
            weight,
            bias,
        }
    }

    pub fn param_count(&self) -> usize {
        self.weight.len + self.bias.len
    }

    /// `Y = X W^T + b` for `rows` inputs.
    pub fn forward<T: Scalar>(&self, params: &[T], x: &[T], rows: usize) -> Vec<T> {
        assert_eq!(x.len(), rows * self.input, "linear input shape");
        let bias = self.bias.of(params);
        let mut y = Vec::with_capacity(rows * self.output);
        for _ in 0..rows {
            y.extend_from_slice(bias);
        }
        T::gemm(
            rows,
            self.input,
            self.output,
            T::one(),
            x,
            (self.input as isize, 1),
            self.weight.of(params),
            (1, self.input as isize),
            T::one(),
            &mut y,
            (self.output as isize, 1),
        );
        y
    }

    pub fn backward<T: Scalar>(
        &self,
        params: &[T],
        x: &[T],
        dy: &[T],
        rows: usize,
        grads: &mut [T],
        want_input_grad: bool,
    ) -> Option<Vec<T>> {
        assert_eq!(dy.len(), rows * self.output, "linear output gradient shape");
        T::gemm(
            self.output,
            rows,
            self.input,
            T::one(),
            dy,
            (1, self.output as isize),
            x,
            (self.input as isize, 1),
            T::one(),
            self.weight.of_mut(grads),
            (self.input as isize, 1),
        );
        let db = self.bias.of_mut(grads);
        for row in dy.chunks(self.output) {
            for (g, &v) in db.iter_mut().zip(row) {
                *g += v;
            }
        }
        if !want_input_grad {
            return None;
        }
        let mut dx = vec![T::zero(); rows * self.input];
        T::gemm(
            rows,
            self.output,
            self.input,
            T::one(),
            dy,
            (self.output as isize, 1),
            self.weight.of(params),
            (self.input as isize, 1),
            T::zero(),
            &mut dx,
            (self.input as isize, 1),
        );
        Some(dx)
    }
}

/// ReLU multilayer perceptron; the last layer has no activation.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

/// Inputs to every layer, kept for the backward pass.
#[derive(Clone, Debug)]
pub struct MlpCache<T> {
    inputs: Vec<Vec<T>>,
    rows: usize,
}

impl Mlp {
    pub fn new(b: &mut ParamBuilder, input: usize, hidden: &[usize], output: usize) -> Self {
        let mut layers = Vec::with_capacity(hidden.len() + 1);
        let mut width = input;
        for &h in hidden.iter().chain(std::iter::once(&output)) {
            layers.push(Linear::new(b, width, h));
            width = h;
        }
        Self { layers }
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].input
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().map_or(0, |l| l.output)
    }

    pub fn hidden_widths(&self) -> Vec<usize> {
        self.layers[..self.layers.len() - 1].iter().map(|l| l.output).collect()
    }

    pub fn last(&self) -> &Linear {
        self.layers.last().expect("mlp has at least one layer")
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Linear::param_count).sum()
    }

    pub fn forward<T: Scalar>(&self, params: &[T], x: Vec<T>, rows: usize) -> (Vec<T>, MlpCache<T>) {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut y = layer.forward(params, &h, rows);
            if i + 1 < self.layers.len() {
                ops::relu_inplace(&mut y);
            }
            inputs.push(h);
            h = y;
        }
        (h, MlpCache { inputs, rows })
    }

    /// Forward pass that keeps no intermediate state.
    pub fn infer<T: Scalar>(&self, params: &[T], x: &[T], rows: usize) -> Vec<T> {
        let mut h = self.layers[0].forward(params, x, rows);
        for layer in &self.layers[1..] {
            ops::relu_inplace(&mut h);
            h = layer.forward(params, &h, rows);
        }
        h
    }

    pub fn backward<T: Scalar>(
        &self,
        params: &[T],
        cache: &MlpCache<T>,
        dy: Vec<T>,
        grads: &mut [T],
        want_input_grad: bool,
    ) -> Option<Vec<T>> {
        let mut g = dy;
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let need = i > 0 || want_input_grad;
            let dx = layer.backward(params, &cache.inputs[i], &g, cache.rows, grads, need);
            match dx {
                Some(mut dx) if i > 0 => {
                    // inputs[i] is the ReLU output of layer i - 1.
                    ops::relu_backward_inplace(&mut dx, &cache.inputs[i]);
                    g = dx;
                }
                other => return other,
            }
        }
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_forward_matches_definition() {
        let mut b = ParamBuilder::new();
        let lin = Linear::new(&mut b, 3, 2);
        let mut params: Vec<f64> = b.finish().initialize(&mut ChaCha8Rng::seed_from_u64(0));
        params[lin.bias.offset] = 1.0;
        let x = [1.0, 2.0, 3.0, -1.0, 0.5, 0.0];
        let y = lin.forward(&params, &x, 2);
        let w = lin.weight.of(&params);
        for r in 0..2 {
            for o in 0..2 {
                let want: f64 = lin.bias.of(&params)[o] + (0..3).map(|i| w[o * 3 + i] * x[r * 3 + i]).sum::<f64>();
                assert!((y[r * 2 + o] - want).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn mlp_gradient_matches_finite_differences() {
        let mut b = ParamBuilder::new();
        let mlp = Mlp::new(&mut b, 3, &[5, 4], 2);
        let layout = b.finish();
        let params: Vec<f64> = layout.initialize(&mut ChaCha8Rng::seed_from_u64(4));
        let x: Vec<f64> = (0..12).map(|i| ((i * 7) % 5) as f64 * 0.3 - 0.6).collect();
        let weights: Vec<f64> = (0..8).map(|i| (i as f64 * 1.3).sin()).collect();
        let loss = |p: &[f64]| -> f64 { mlp.infer(p, &x, 4).iter().zip(&weights).map(|(a, b)| a * b).sum() };
        let (_, cache) = mlp.forward(&params, x.clone(), 4);
        let mut grads = vec![0.0; layout.len()];
        mlp.backward(&params, &cache, weights.clone(), &mut grads, false);
        let eps = 1e-6;
        for i in 0..layout.len() {
            let mut p = params.clone();
            p[i] += eps;
            let up = loss(&p);
            p[i] -= 2.0 * eps;
            let down = loss(&p);
            let fd = (up - down) / (2.0 * eps);
            assert!((fd - grads[i]).abs() < 1e-6, "param {i}: {fd} vs {}", grads[i]);
        }
    }
}
